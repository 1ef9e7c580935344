use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Single-layer LSTM with hidden size equal to the embedding size.
/// Gate layout along the `4D` axis: input, forget, cell, output.
#[derive(Clone, Debug)]
pub(super) struct LstmCell {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    dim: usize,
}

impl LstmCell {
    pub(super) fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let w_ih = store.add(format!("{prefix}.lstm.w_ih"), Tensor::uniform(&[d, 4 * d], bound, rng)?)?;
        let w_hh = store.add(format!("{prefix}.lstm.w_hh"), Tensor::uniform(&[d, 4 * d], bound, rng)?)?;
        let mut b = vec![0.0; 4 * d];
        b[d..2 * d].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.add(format!("{prefix}.lstm.bias"), Tensor::new(vec![4 * d], b)?)?;
        Ok(Self { w_ih, w_hh, bias, dim: d })
    }

    pub(super) fn project_input(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w_ih);
        tape.matmul(x, w)
    }

    /// One step given the projected input row; returns `(h, c)`.
    pub(super) fn cell(&self, tape: &mut Tape, xi: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.dim;
        let w = tape.param(self.w_hh);
        let hh = tape.matmul(h, w)?;
        let g = tape.add(xi, hh)?;
        let b = tape.param(self.bias);
        let g = tape.add_row(g, b)?;
        let i = tape.slice_cols(g, 0, d)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(g, d, d)?;
        let f = tape.sigmoid(f)?;
        let cand = tape.slice_cols(g, 2 * d, d)?;
        let cand = tape.tanh(cand)?;
        let o = tape.slice_cols(g, 3 * d, d)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, cand)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// `s_0` comes from a zero input on a zero state; `s_u` consumes `y_u`.
    pub(super) fn forward(&self, tape: &mut Tape, table: Var, tokens: &[usize]) -> Result<Var> {
        let d = self.dim;
        let rows = std::iter::once(None).chain(tokens.iter().map(|&t| Some(t - 1))).collect();
        let x = tape.gather_rows(table, rows)?;
        let xi = self.project_input(tape, x)?;
        let mut h = tape.constant(&[1, d], vec![0.0; d])?;
        let mut c = tape.constant(&[1, d], vec![0.0; d])?;
        let mut out = Vec::with_capacity(tokens.len() + 1);
        for u in 0..=tokens.len() {
            let row = tape.slice_rows(xi, u, 1)?;
            (h, c) = self.cell(tape, row, h, c)?;
            out.push(h);
        }
        tape.concat_rows(&out)
    }
}
