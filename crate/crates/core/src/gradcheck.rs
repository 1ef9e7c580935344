//! Central finite-difference gradient checks.

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::ParamStore;

/// Coordinates checked per call; larger parameter sets are subsampled.
pub const MAX_COORDINATES: usize = 200;

/// Gradients smaller than this are compared absolutely; below it the
/// difference quotient is dominated by round-off.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Step-`h` and step-`2h` central differences further apart than this mark a
/// coordinate whose stencil straddles a kink (ReLU at zero); it is skipped.
pub const KINK_TOLERANCE: f64 = 1e-6;

/// Compares the tape's analytic gradient of the scalar built by `f` against
/// the fourth-order central difference
/// `(8(f(θ+h) - f(θ-h)) - (f(θ+2h) - f(θ-2h))) / 12h` and returns the largest
/// relative error `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
///
/// When the store holds more than [`MAX_COORDINATES`] trainable scalars a
/// subset is drawn with a generator seeded by `seed`. Coordinates near a kink
/// are skipped; more than a tenth of them skipped is an error.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut f: F, eps: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let grads = tape.backward(loss)?;
        store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect()
    };
    let coords: Vec<(usize, usize)> = store
        .ids()
        .enumerate()
        .filter(|(_, id)| store.get(*id).requires_grad())
        .flat_map(|(p, id)| (0..store.get(id).len()).map(move |i| (p, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > MAX_COORDINATES {
        let mut r = rng::stream(seed, Stream::Shuffle);
        let mut idx = sample(&mut r, coords.len(), MAX_COORDINATES).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };
    let ids: Vec<_> = store.ids().collect();
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::no_grad(store);
        let v = f(&mut tape)?;
        Ok(tape.scalar(v))
    };
    let mut worst: f64 = 0.0;
    let total = chosen.len();
    let mut skipped = 0;
    for (p, i) in chosen {
        let id = ids[p];
        let orig = store.get(id).data()[i];
        let mut at = |store: &mut ParamStore, d: f64| -> Result<f64> {
            store.get_mut(id).data_mut()[i] = orig + d;
            eval(store)
        };
        let near = at(store, eps)? - at(store, -eps)?;
        let far = at(store, 2.0 * eps)? - at(store, -2.0 * eps)?;
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (8.0 * near - far) / (12.0 * eps);
        let a = analytic[p][i];
        if numeric.is_nan() || a.is_nan() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        let (d1, d2) = (near / (2.0 * eps), far / (4.0 * eps));
        if (d1 - d2).abs() > KINK_TOLERANCE * d1.abs().max(1.0) {
            log::debug!("{}[{i}] skipped: stencil crosses a kink", store.name(id));
            skipped += 1;
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    if skipped * 10 > total {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("{skipped} of {total} coordinates sit on a kink"),
        ));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_three_vars() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap()).unwrap();
        let err = finite_diff_check(
            &mut s,
            |t| {
                let v = t.param(x);
                let sq = t.mul(v, v)?;
                let sq = t.scale(sq, 1.5)?;
                t.sum(sq)
            },
            1e-5,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn log_softmax_nll_composite() {
        let mut s = ParamStore::new();
        let x = s
            .add("x", Tensor::new(vec![2, 4], vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9, 0.0, 0.4]).unwrap())
            .unwrap();
        let err = finite_diff_check(
            &mut s,
            |t| {
                let v = t.param(x);
                let lp = t.log_softmax(v, 1)?;
                let picked = t.gather(lp, vec![2, 5])?;
                let s = t.sum(picked)?;
                t.scale(s, -1.0)
            },
            1e-5,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nan_is_an_error() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::new(vec![1], vec![-1.0]).unwrap()).unwrap();
        let r = finite_diff_check(
            &mut s,
            |t| {
                let v = t.param(x);
                let c = t.constant(&[1], vec![f64::NAN])?;
                let y = t.mul(v, c)?;
                t.sum(y)
            },
            1e-5,
            0,
        );
        assert!(r.is_err());
    }
}
