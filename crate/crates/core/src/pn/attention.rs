use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{attention, Activation, ConvModule, FeedForward, LayerNorm, SelfAttention};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

use super::{PnConfig, PnKind};

/// Single pre-norm block applied to a window of the `L` most recent tokens.
/// Rows inside a window run oldest to newest; the state is read off the
/// newest row. The Conformer variant adds a causal depthwise convolution
/// module after self-attention.
#[derive(Clone, Debug)]
pub(super) struct AttentionBody {
    pos: ParamId,
    ln_attn: LayerNorm,
    attn: SelfAttention,
    conv: Option<ConvModule>,
    ln_ff: LayerNorm,
    ff: FeedForward,
    ln_out: LayerNorm,
    window: usize,
}

impl AttentionBody {
    pub(super) fn new(store: &mut ParamStore, prefix: &str, cfg: &PnConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let l = cfg.left_context;
        let bound = 1.0 / (d as f64).sqrt();
        let pos = store.add(format!("{prefix}.pos"), Tensor::uniform(&[l, d], bound, rng)?)?;
        let ln_attn = LayerNorm::new(store, &format!("{prefix}.ln_attn"), d)?;
        let attn = SelfAttention::new(store, &format!("{prefix}.attn"), d, cfg.heads, rng)?;
        let conformer = cfg.kind == PnKind::Conformer;
        let conv = if conformer {
            Some(ConvModule::new(store, &format!("{prefix}.conv"), d, cfg.conv_kernel, rng)?)
        } else {
            None
        };
        let ln_ff = LayerNorm::new(store, &format!("{prefix}.ln_ff"), d)?;
        let act = if conformer { Activation::Silu } else { Activation::Relu };
        let ff = FeedForward::new(store, &format!("{prefix}.ff"), d, cfg.ff_dim, act, rng)?;
        let ln_out = LayerNorm::new(store, &format!("{prefix}.ln"), d)?;
        Ok(Self {
            pos,
            ln_attn,
            attn,
            conv,
            ln_ff,
            ff,
            ln_out,
            window: l,
        })
    }

    /// `rows[w][n]` is the embedding row of the token `n` steps back in
    /// window `w`, or `None` when that slot is empty.
    pub(super) fn forward(&self, tape: &mut Tape, table: Var, rows: &[Vec<Option<usize>>]) -> Result<Var> {
        let l = self.window;
        let nw = rows.len();
        let tokens = rows.iter().flat_map(|w| w.iter().rev().copied()).collect();
        let e = tape.gather_rows(table, tokens)?;
        let pos = tape.param(self.pos);
        let slots = (0..nw).flat_map(|_| (0..l).rev().map(Some)).collect();
        let p = tape.gather_rows(pos, slots)?;
        let x = tape.add(e, p)?;

        let h = self.ln_attn.forward(tape, x)?;
        let q = self.attn.query.forward(tape, h)?;
        let k = self.attn.key.forward(tape, h)?;
        let v = self.attn.value.forward(tape, h)?;
        let newest: Vec<Option<usize>> = (0..nw).map(|w| Some(w * l + l - 1)).collect();

        let r = match &self.conv {
            None => {
                let mut outs = Vec::with_capacity(nw);
                let mask = vec![true; l];
                for w in 0..nw {
                    let qw = tape.slice_rows(q, w * l + l - 1, 1)?;
                    let kw = tape.slice_rows(k, w * l, l)?;
                    let vw = tape.slice_rows(v, w * l, l)?;
                    outs.push(attention(tape, qw, kw, vw, self.attn.heads, &mask)?);
                }
                let a = tape.concat_rows(&outs)?;
                let a = self.attn.out.forward(tape, a)?;
                let xl = tape.gather_rows(x, newest.clone())?;
                tape.add(xl, a)?
            }
            Some(conv) => {
                let mask: Vec<bool> = (0..l * l).map(|i| i % l <= i / l).collect();
                let mut outs = Vec::with_capacity(nw);
                for w in 0..nw {
                    let qw = tape.slice_rows(q, w * l, l)?;
                    let kw = tape.slice_rows(k, w * l, l)?;
                    let vw = tape.slice_rows(v, w * l, l)?;
                    outs.push(attention(tape, qw, kw, vw, self.attn.heads, &mask)?);
                }
                let a = tape.concat_rows(&outs)?;
                let a = self.attn.out.forward(tape, a)?;
                let r = tape.add(x, a)?;
                let g = conv.gate(tape, r)?;
                let mut cols = Vec::with_capacity(nw);
                for w in 0..nw {
                    let gw = tape.slice_rows(g, w * l, l)?;
                    cols.push(conv.depthwise(tape, gw, l - 1, true)?);
                }
                let c = tape.concat_rows(&cols)?;
                let c = conv.finish(tape, c)?;
                let rl = tape.gather_rows(r, newest)?;
                tape.add(rl, c)?
            }
        };
        let f = self.ln_ff.forward(tape, r)?;
        let f = self.ff.forward(tape, f)?;
        let r = tape.add(r, f)?;
        self.ln_out.forward(tape, r)
    }
}
