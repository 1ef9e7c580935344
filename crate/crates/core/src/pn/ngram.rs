use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Shared body of N-Avg (`groups = H`, `splits = 1`) and N-Concat
/// (`groups = 1`, `splits = H`): context mix, projection, LayerNorm.
#[derive(Clone, Debug)]
pub(super) struct NgramBody {
    q: ParamId,
    proj: Linear,
    ln: LayerNorm,
    groups: usize,
    splits: usize,
    order: usize,
}

impl NgramBody {
    pub(super) fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        groups: usize,
        splits: usize,
        order: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let q = store.add(
            format!("{prefix}.q"),
            Tensor::uniform(&[groups * (order - 1), d], bound, rng)?,
        )?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), d, d, true, rng)?;
        let ln = LayerNorm::new(store, &format!("{prefix}.ln"), d)?;
        Ok(Self {
            q,
            proj,
            ln,
            groups,
            splits,
            order,
        })
    }

    pub(super) fn forward(&self, tape: &mut Tape, table: Var, rows: &[Vec<Option<usize>>]) -> Result<Var> {
        let v = tape.gather_rows(table, rows.iter().flatten().copied().collect())?;
        let q = tape.param(self.q);
        let scale = 1.0 / (self.groups * self.order) as f64;
        let mixed = tape.head_mix(v, q, self.groups, self.splits, scale)?;
        let p = self.proj.forward(tape, mixed)?;
        self.ln.forward(tape, p)
    }
}

fn mix(v: &Tensor, q: &Tensor, groups: usize, splits: usize) -> Result<Vec<f64>> {
    let store = ParamStore::new();
    let mut tape = Tape::no_grad(&store);
    let ctx = v.rows();
    let order = ctx + 1;
    let d = v.cols();
    let vv = tape.constant(&[ctx, d], v.data().to_vec())?;
    let qv = tape.constant(&[q.len() / d, d], q.data().to_vec())?;
    let out = tape.head_mix(vv, qv, groups, splits, 1.0 / (groups * order) as f64)?;
    Ok(tape.value(out).to_vec())
}

/// Head-averaged context mix for context embeddings `v [(N-1) x D]` and
/// positional vectors `q [H x (N-1) x D]`, before projection.
pub fn n_avg_mix(v: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    if q.shape().len() != 3 || q.shape()[1] != v.rows() || q.shape()[2] != v.cols() {
        return Err(Error::Shape {
            op: "n_avg_mix",
            lhs: v.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    mix(v, q, q.shape()[0], 1)
}

/// Split-wise context mix with `heads` segments of size `D / heads`, for
/// `v [(N-1) x D]` and `q [(N-1) x D]`, before projection.
pub fn n_concat_mix(v: &Tensor, q: &Tensor, heads: usize) -> Result<Vec<f64>> {
    if q.shape() != v.shape() || heads == 0 || v.cols() % heads != 0 {
        return Err(Error::Shape {
            op: "n_concat_mix",
            lhs: v.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    mix(v, q, 1, heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_bigram() {
        let v = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 1, 2], vec![2.0, 0.0]).unwrap();
        assert_eq!(n_avg_mix(&v, &q).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn zero_positions_annihilate() {
        let v = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let q = Tensor::zeros(&[3, 2, 2]).unwrap();
        assert_eq!(n_avg_mix(&v, &q).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn duplicated_token_adds_equal_parts() {
        let one = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let q1 = Tensor::new(vec![1, 1, 2], vec![0.3, 0.7]).unwrap();
        let two = Tensor::new(vec![2, 2], vec![0.5, -1.0, 0.5, -1.0]).unwrap();
        let q2 = Tensor::new(vec![1, 2, 2], vec![0.3, 0.7, 0.3, 0.7]).unwrap();
        let a = n_avg_mix(&one, &q1).unwrap();
        let b = n_avg_mix(&two, &q2).unwrap();
        // order changes from 2 to 3, so the divisor changes with it
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x * 2.0 / 3.0 - y).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_concat_equals_avg() {
        let v = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let q = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.25, 0.0, 3.0]).unwrap();
        let q3 = Tensor::new(vec![1, 2, 3], q.data().to_vec()).unwrap();
        assert_eq!(n_concat_mix(&v, &q, 1).unwrap(), n_avg_mix(&v, &q3).unwrap());
    }
}
