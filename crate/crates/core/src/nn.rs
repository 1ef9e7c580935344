//! Layers shared by the encoder, the prediction networks and the joiner.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x W + b` with `W` stored as `[in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng)?)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])?)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

/// Two-layer position-wise feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
            act,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = match self.act {
            Activation::Relu => tape.relu(h)?,
            Activation::Silu => tape.silu(h)?,
        };
        self.down.forward(tape, h)
    }
}

/// Scaled dot-product attention split over `heads`; `mask` is row-major
/// `[queries x keys]`. Returns the concatenated head outputs `[queries x D]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.masked_softmax(scores, mask)?;
        outs.push(tape.matmul(p, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Multi-head self-attention projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
        })
    }
}

/// Conformer convolution module:
/// `LN -> pointwise(D->2D) -> GLU -> depthwise(K) -> SiLU -> pointwise(D->D)`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub project: Linear,
    pub kernel: usize,
    pub dim: usize,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let norm = LayerNorm::new(store, &format!("{name}.ln"), dim)?;
        let expand = Linear::new(store, &format!("{name}.expand"), dim, 2 * dim, true, rng)?;
        let bound = 1.0 / (kernel as f64).sqrt();
        let depthwise = store.add(format!("{name}.depthwise.weight"), Tensor::uniform(&[kernel, dim], bound, rng)?)?;
        let depthwise_bias = store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[dim])?)?;
        let project = Linear::new(store, &format!("{name}.project"), dim, dim, true, rng)?;
        Ok(Self {
            norm,
            expand,
            depthwise,
            depthwise_bias,
            project,
            kernel,
            dim,
        })
    }

    /// Gated rows fed to the depthwise convolution.
    pub fn gate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, x)?;
        let h = self.expand.forward(tape, h)?;
        let a = tape.slice_cols(h, 0, self.dim)?;
        let b = tape.slice_cols(h, self.dim, self.dim)?;
        let b = tape.sigmoid(b)?;
        tape.mul(a, b)
    }

    /// Convolves gated rows `history ++ gated` and returns outputs for the
    /// `gated` rows only. Causal mode looks `K-1` rows back; otherwise the
    /// kernel is centred.
    pub fn convolve(&self, tape: &mut Tape, history: Option<Var>, gated: Var, causal: bool) -> Result<Var> {
        let (ext, start) = match history {
            Some(h) => {
                let n = tape.shape(h)[0];
                (tape.concat_rows(&[h, gated])?, n)
            }
            None => (gated, 0),
        };
        let y = self.depthwise(tape, ext, start, causal)?;
        self.finish(tape, y)
    }

    /// Raw depthwise convolution of `x` for output rows `start..`.
    pub fn depthwise(&self, tape: &mut Tape, x: Var, start: usize, causal: bool) -> Result<Var> {
        let left = if causal { self.kernel - 1 } else { (self.kernel - 1) / 2 };
        let w = tape.param(self.depthwise);
        tape.depthwise_conv(x, w, left, start)
    }

    /// Bias, SiLU and output projection applied after [`Self::depthwise`].
    pub fn finish(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let b = tape.param(self.depthwise_bias);
        let y = tape.add_row(y, b)?;
        let y = tape.silu(y)?;
        self.project.forward(tape, y)
    }
}
