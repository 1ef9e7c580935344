use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{attention, Activation, ConvModule, FeedForward, LayerNorm, SelfAttention};
use crate::rng::Rng;
use crate::tensor::ParamStore;

/// Macaron Conformer block: half FF, MHSA, convolution module, half FF, LayerNorm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    ln_ff1: LayerNorm,
    ff1: FeedForward,
    ln_attn: LayerNorm,
    attn: SelfAttention,
    conv: ConvModule,
    ln_ff2: LayerNorm,
    ff2: FeedForward,
    ln_out: LayerNorm,
    causal_conv: bool,
}

/// Keys, values and gated convolution inputs of frames already processed.
#[derive(Clone, Debug, Default)]
pub struct BlockCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    conv_history: Vec<f64>,
    frames: usize,
}

impl BlockCache {
    pub fn frames(&self) -> usize {
        self.frames
    }
}

impl ConformerBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        ff_dim: usize,
        heads: usize,
        kernel: usize,
        causal_conv: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_ff1: LayerNorm::new(store, &format!("{prefix}.ln_ff1"), dim)?,
            ff1: FeedForward::new(store, &format!("{prefix}.ff1"), dim, ff_dim, Activation::Silu, rng)?,
            ln_attn: LayerNorm::new(store, &format!("{prefix}.ln_attn"), dim)?,
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            conv: ConvModule::new(store, &format!("{prefix}.conv"), dim, kernel, rng)?,
            ln_ff2: LayerNorm::new(store, &format!("{prefix}.ln_ff2"), dim)?,
            ff2: FeedForward::new(store, &format!("{prefix}.ff2"), dim, ff_dim, Activation::Silu, rng)?,
            ln_out: LayerNorm::new(store, &format!("{prefix}.ln"), dim)?,
            causal_conv,
        })
    }

    fn half_ff(&self, tape: &mut Tape, x: Var, ln: &LayerNorm, ff: &FeedForward) -> Result<Var> {
        let h = ln.forward(tape, x)?;
        let h = ff.forward(tape, h)?;
        let h = tape.scale(h, 0.5)?;
        tape.add(x, h)
    }

    /// Whole-sequence forward; `mask` is `[T' x T']` row-major.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.half_ff(tape, x, &self.ln_ff1, &self.ff1)?;
        let a = self.ln_attn.forward(tape, h)?;
        let q = self.attn.query.forward(tape, a)?;
        let k = self.attn.key.forward(tape, a)?;
        let v = self.attn.value.forward(tape, a)?;
        let a = attention(tape, q, k, v, self.attn.heads, mask)?;
        let a = self.attn.out.forward(tape, a)?;
        let h = tape.add(h, a)?;
        let g = self.conv.gate(tape, h)?;
        let c = self.conv.convolve(tape, None, g, self.causal_conv)?;
        let h = tape.add(h, c)?;
        let h = self.half_ff(tape, h, &self.ln_ff2, &self.ff2)?;
        self.ln_out.forward(tape, h)
    }

    /// Processes new frames attending to the cached ones. `mask` is
    /// `[new x (cached + new)]`. Requires a causal convolution.
    pub fn forward_cached(&self, tape: &mut Tape, x: Var, mask: &[bool], cache: &mut BlockCache) -> Result<Var> {
        let d = tape.shape(x)[1];
        let n = tape.shape(x)[0];
        let h = self.half_ff(tape, x, &self.ln_ff1, &self.ff1)?;
        let a = self.ln_attn.forward(tape, h)?;
        let q = self.attn.query.forward(tape, a)?;
        let k = self.attn.key.forward(tape, a)?;
        let v = self.attn.value.forward(tape, a)?;
        cache.keys.extend_from_slice(tape.value(k));
        cache.values.extend_from_slice(tape.value(v));
        cache.frames += n;
        let k_all = tape.constant(&[cache.frames, d], cache.keys.clone())?;
        let v_all = tape.constant(&[cache.frames, d], cache.values.clone())?;
        let a = attention(tape, q, k_all, v_all, self.attn.heads, mask)?;
        let a = self.attn.out.forward(tape, a)?;
        let h = tape.add(h, a)?;
        let g = self.conv.gate(tape, h)?;
        let hist_rows = cache.conv_history.len() / d;
        let hist = if hist_rows > 0 {
            Some(tape.constant(&[hist_rows, d], cache.conv_history.clone())?)
        } else {
            None
        };
        let c = self.conv.convolve(tape, hist, g, true)?;
        cache.conv_history.extend_from_slice(tape.value(g));
        let keep = (self.conv.kernel - 1).min(cache.conv_history.len() / d);
        let drop = cache.conv_history.len() / d - keep;
        cache.conv_history.drain(..drop * d);
        let h = tape.add(h, c)?;
        let h = self.half_ff(tape, h, &self.ln_ff2, &self.ff2)?;
        self.ln_out.forward(tape, h)
    }
}
