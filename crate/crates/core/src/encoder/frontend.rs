use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::tensor::ParamStore;

/// Two stride-2, kernel-3 convolutions with ReLU, then a linear projection.
/// Output frame `j` of each convolution reads inputs `2j-1, 2j, 2j+1`, so a
/// subsampled frame never looks past the last input frame it covers.
#[derive(Clone, Debug)]
pub struct Frontend {
    conv1: Linear,
    conv2: Linear,
    proj: Linear,
}

/// Last input row of each convolution from the previous chunk.
#[derive(Clone, Debug, Default)]
pub struct FrontendCache {
    last_input: Option<Vec<f64>>,
    last_hidden: Option<Vec<f64>>,
}

impl Frontend {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv1: Linear::new(store, &format!("{prefix}.conv1"), 3 * input_dim, dim, true, rng)?,
            conv2: Linear::new(store, &format!("{prefix}.conv2"), 3 * dim, dim, true, rng)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), dim, dim, true, rng)?,
        })
    }

    /// Full-utterance subsampling, `[T x d] -> [ceil(T/4) x D]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let t = tape.shape(x)[0];
        if t < 4 {
            return Err(Error::invalid("frontend", format!("need at least 4 frames, got {t}")));
        }
        let h = conv(tape, &self.conv1, x, None)?;
        let h = conv(tape, &self.conv2, h, None)?;
        self.proj.forward(tape, h)
    }

    /// Subsamples one chunk given the rows cached from the previous one.
    /// Every chunk but the last must hold a multiple of 4 frames.
    pub fn forward_chunk(&self, tape: &mut Tape, x: Var, cache: &mut FrontendCache) -> Result<Var> {
        let d_in = tape.shape(x)[1];
        let prev = cache.last_input.as_ref().map(|r| tape.constant(&[1, d_in], r.clone())).transpose()?;
        let n = tape.shape(x)[0];
        cache.last_input = Some(tape.value(x)[(n - 1) * d_in..].to_vec());
        let h = conv(tape, &self.conv1, x, prev)?;

        let d = tape.shape(h)[1];
        let prev = cache.last_hidden.as_ref().map(|r| tape.constant(&[1, d], r.clone())).transpose()?;
        let m = tape.shape(h)[0];
        cache.last_hidden = Some(tape.value(h)[(m - 1) * d..].to_vec());
        let h = conv(tape, &self.conv2, h, prev)?;
        self.proj.forward(tape, h)
    }
}

fn conv(tape: &mut Tape, layer: &Linear, x: Var, prev: Option<Var>) -> Result<Var> {
    let n = tape.shape(x)[0];
    let d = tape.shape(x)[1];
    let (ext, shift) = match prev {
        Some(p) => (tape.concat_rows(&[p, x])?, 1),
        None => (x, 0),
    };
    let out = n.div_ceil(2);
    let mut rows = Vec::with_capacity(3 * out);
    for j in 0..out {
        for k in 0..3 {
            let src = (2 * j + k + shift) as isize - 1;
            rows.push((src >= 0 && (src as usize) < n + shift).then_some(src as usize));
        }
    }
    let u = tape.gather_rows(ext, rows)?;
    let u = tape.reshape(u, &[out, 3 * d])?;
    let y = layer.forward(tape, u)?;
    tape.relu(y)
}
