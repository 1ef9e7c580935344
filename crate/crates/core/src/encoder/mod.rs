//! Convolutional subsampling followed by Conformer blocks under an attention
//! mask, with chunk-incremental evaluation for streaming.

mod block;
mod frontend;
mod mask;

pub use block::{BlockCache, ConformerBlock};
pub use frontend::{Frontend, FrontendCache};
pub use mask::{build_attention_mask, eil_seconds, Eil, MaskSpec, FRONTEND_LOOKAHEAD_S};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Input frames per encoder frame.
pub const SUBSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub input_dim: usize,
    /// Duration of one input frame in seconds.
    pub frame_duration_s: f64,
    /// Longest supported utterance in encoder frames.
    pub max_frames: usize,
    pub causal_conv: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            model_dim: 64,
            ff_dim: 128,
            heads: 4,
            conv_kernel: 7,
            input_dim: 16,
            frame_duration_s: 0.01,
            max_frames: 256,
            causal_conv: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("enc.blocks", self.num_blocks),
            ("enc.dim", self.model_dim),
            ("enc.ff_dim", self.ff_dim),
            ("enc.heads", self.heads),
            ("enc.input_dim", self.input_dim),
            ("enc.max_frames", self.max_frames),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config("enc.heads", "heads must divide the model dimension"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config("enc.conv_kernel", "kernel must be odd"));
        }
        if !(self.frame_duration_s > 0.0) {
            return Err(Error::config("enc.frame_duration", "must be positive"));
        }
        Ok(())
    }

    /// Rejects masks that the convolution layout would leak through.
    pub fn check_mask(&self, mask: &MaskSpec) -> Result<()> {
        mask.validate()?;
        if mask.is_streaming() && !self.causal_conv {
            return Err(Error::config(
                "enc.causal_conv",
                "streaming masks need causal convolutions",
            ));
        }
        Ok(())
    }
}

pub fn subsampled_len(frames: usize) -> usize {
    frames.div_ceil(SUBSAMPLE)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    frontend: Frontend,
    pos: ParamId,
    blocks: Vec<ConformerBlock>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let frontend = Frontend::new(store, &format!("{prefix}.frontend"), cfg.input_dim, d, rng)?;
        let bound = 1.0 / (d as f64).sqrt();
        let pos = store.add(format!("{prefix}.pos"), Tensor::uniform(&[cfg.max_frames, d], bound, rng)?)?;
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                ConformerBlock::new(
                    store,
                    &format!("{prefix}.block{b}"),
                    d,
                    cfg.ff_dim,
                    cfg.heads,
                    cfg.conv_kernel,
                    cfg.causal_conv,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            frontend,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[ConformerBlock] {
        &self.blocks
    }

    fn add_positions(&self, tape: &mut Tape, h: Var, offset: usize) -> Result<Var> {
        let n = tape.shape(h)[0];
        if offset + n > self.cfg.max_frames {
            return Err(Error::invalid(
                "encoder",
                format!("{} encoder frames exceed max_frames {}", offset + n, self.cfg.max_frames),
            ));
        }
        let pos = tape.param(self.pos);
        let p = tape.gather_rows(pos, (offset..offset + n).map(Some).collect())?;
        tape.add(h, p)
    }

    /// `[T x d]` features to `[ceil(T/4) x D]` encoder frames.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &MaskSpec) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.cfg.input_dim {
            return Err(Error::Shape {
                op: "encoder_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.cfg.input_dim],
            });
        }
        self.cfg.check_mask(mask)?;
        let h = self.frontend.forward(tape, x)?;
        let mut h = self.add_positions(tape, h, 0)?;
        let t = tape.shape(h)[0];
        let m = build_attention_mask(t, mask);
        for b in &self.blocks {
            h = b.forward(tape, h, &m)?;
        }
        Ok(h)
    }

    /// Offline encoding without gradients, one row per encoder frame.
    pub fn encode(&self, store: &ParamStore, features: &Tensor, mask: &MaskSpec) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::no_grad(store);
        let x = tape.leaf(features.clone());
        let h = self.forward(&mut tape, x, mask)?;
        Ok(rows_of(&tape, h))
    }

    pub fn start_stream(&self, mask: &MaskSpec) -> Result<EncoderStream> {
        self.cfg.check_mask(mask)?;
        let kind = match *mask {
            MaskSpec::Chunked { chunk } => StreamKind::Cached {
                chunk,
                frontend: FrontendCache::default(),
                blocks: vec![BlockCache::default(); self.blocks.len()],
            },
            MaskSpec::ChunkedLookahead { chunk, .. } => StreamKind::Recompute {
                chunk,
                input: Vec::new(),
            },
            _ => {
                return Err(Error::invalid(
                    "encoder stream",
                    format!("streaming needs a chunked mask, got {mask}"),
                ))
            }
        };
        Ok(EncoderStream {
            mask: *mask,
            kind,
            input_frames: 0,
            emitted: 0,
            closed: false,
        })
    }

    /// Feeds one chunk of row-major features (`rows x input_dim`) and returns
    /// the encoder frames that are now final. Chunks must cover whole mask
    /// chunks; a shorter chunk ends the utterance. Empty chunks are ignored.
    pub fn push_chunk(&self, store: &ParamStore, stream: &mut EncoderStream, chunk: &[f64]) -> Result<Vec<Vec<f64>>> {
        if chunk.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.cfg.input_dim;
        if chunk.len() % d != 0 {
            return Err(Error::Shape {
                op: "push_chunk",
                lhs: vec![chunk.len()],
                rhs: vec![d],
            });
        }
        if stream.closed {
            return Err(Error::invalid(
                "push_chunk",
                "misaligned chunk: a previous chunk did not cover whole mask chunks",
            ));
        }
        let chunk = Tensor::new(vec![chunk.len() / d, d], chunk.to_vec())?;
        let n = chunk.rows();
        let span = SUBSAMPLE * stream.chunk();
        if n % span != 0 {
            stream.closed = true;
        }
        stream.input_frames += n;
        match &mut stream.kind {
            StreamKind::Cached { frontend, blocks, .. } => {
                let mut tape = Tape::no_grad(store);
                let x = tape.leaf(chunk.clone());
                let h = self.frontend.forward_chunk(&mut tape, x, frontend)?;
                let mut h = self.add_positions(&mut tape, h, stream.emitted)?;
                let new = tape.shape(h)[0];
                let total = stream.emitted + new;
                let mut m = Vec::with_capacity(new * total);
                for i in stream.emitted..total {
                    m.extend((0..total).map(|j| stream.mask.visible(i, j)));
                }
                for (b, cache) in self.blocks.iter().zip(blocks.iter_mut()) {
                    h = b.forward_cached(&mut tape, h, &m, cache)?;
                }
                stream.emitted = total;
                Ok(rows_of(&tape, h))
            }
            StreamKind::Recompute { input, .. } => {
                input.extend_from_slice(chunk.data());
                self.emit_ready(store, stream)
            }
        }
    }

    /// Ends the utterance and returns any frames still pending.
    pub fn finish_stream(&self, store: &ParamStore, stream: &mut EncoderStream) -> Result<Vec<Vec<f64>>> {
        stream.closed = true;
        match stream.kind {
            StreamKind::Cached { .. } => Ok(Vec::new()),
            StreamKind::Recompute { .. } => self.emit_ready(store, stream),
        }
    }

    fn emit_ready(&self, store: &ParamStore, stream: &mut EncoderStream) -> Result<Vec<Vec<f64>>> {
        let StreamKind::Recompute { input, .. } = &stream.kind else {
            return Ok(Vec::new());
        };
        let t = stream.input_frames;
        if t < SUBSAMPLE {
            if stream.closed && t > 0 {
                return Err(Error::invalid("frontend", format!("need at least 4 frames, got {t}")));
            }
            return Ok(Vec::new());
        }
        let total = subsampled_len(t);
        let complete = t / SUBSAMPLE;
        let ready = if stream.closed {
            total
        } else {
            let horizon = usize::MAX / 2;
            (stream.emitted..total)
                .take_while(|&i| stream.mask.receptive_limit(i, horizon, self.blocks.len()) < complete)
                .count()
                + stream.emitted
        };
        if ready == stream.emitted {
            return Ok(Vec::new());
        }
        let features = Tensor::new(vec![t, self.cfg.input_dim], input.clone())?;
        let rows = self.encode(store, &features, &stream.mask)?;
        let out = rows[stream.emitted..ready].to_vec();
        stream.emitted = ready;
        Ok(out)
    }
}

fn rows_of(tape: &Tape, v: Var) -> Vec<Vec<f64>> {
    let d = tape.shape(v)[1];
    tape.value(v).chunks(d).map(<[f64]>::to_vec).collect()
}

#[derive(Clone, Debug)]
enum StreamKind {
    Cached {
        chunk: usize,
        frontend: FrontendCache,
        blocks: Vec<BlockCache>,
    },
    Recompute {
        chunk: usize,
        input: Vec<f64>,
    },
}

/// Per-utterance streaming state owned by one decoder.
#[derive(Clone, Debug)]
pub struct EncoderStream {
    mask: MaskSpec,
    kind: StreamKind,
    input_frames: usize,
    emitted: usize,
    closed: bool,
}

impl EncoderStream {
    fn chunk(&self) -> usize {
        match self.kind {
            StreamKind::Cached { chunk, .. } | StreamKind::Recompute { chunk, .. } => chunk,
        }
    }

    /// Encoder frames handed out so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn tiny() -> (Encoder, ParamStore) {
        let cfg = EncoderConfig {
            num_blocks: 2,
            model_dim: 8,
            ff_dim: 12,
            heads: 2,
            conv_kernel: 3,
            input_dim: 3,
            max_frames: 32,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, "enc", &mut stream(5, Stream::Init)).unwrap();
        (enc, store)
    }

    fn features(t: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[t, 3], 1.0, &mut stream(seed, Stream::Corpus)).unwrap()
    }

    #[test]
    fn output_length_is_ceiling() {
        let (enc, store) = tiny();
        for (t, want) in [(8, 2), (10, 3), (4, 1)] {
            assert_eq!(enc.encode(&store, &features(t, 1), &MaskSpec::Offline).unwrap().len(), want);
        }
        assert!(enc.encode(&store, &features(3, 1), &MaskSpec::Offline).is_err());
    }

    #[test]
    fn cached_stream_is_bitwise_offline() {
        let (enc, store) = tiny();
        let mask = MaskSpec::Chunked { chunk: 2 };
        let f = features(37, 2);
        let offline = enc.encode(&store, &f, &mask).unwrap();
        let mut s = enc.start_stream(&mask).unwrap();
        let mut got = Vec::new();
        for start in (0..37).step_by(8) {
            let n = (37 - start).min(8);
            got.extend(enc.push_chunk(&store, &mut s, &f.data()[start * 3..(start + n) * 3]).unwrap());
        }
        got.extend(enc.finish_stream(&store, &mut s).unwrap());
        assert_eq!(got, offline);
    }

    #[test]
    fn recompute_stream_matches_offline() {
        let (enc, store) = tiny();
        let mask = MaskSpec::ChunkedLookahead { chunk: 2, la: 1 };
        let f = features(40, 3);
        let offline = enc.encode(&store, &f, &mask).unwrap();
        let mut s = enc.start_stream(&mask).unwrap();
        let mut got = Vec::new();
        for start in (0..40).step_by(8) {
            got.extend(enc.push_chunk(&store, &mut s, &f.data()[start * 3..(start + 8) * 3]).unwrap());
        }
        got.extend(enc.finish_stream(&store, &mut s).unwrap());
        assert_eq!(got, offline);
    }

    #[test]
    fn misaligned_chunk_rejected() {
        let (enc, store) = tiny();
        let mut s = enc.start_stream(&MaskSpec::Chunked { chunk: 2 }).unwrap();
        enc.push_chunk(&store, &mut s, features(6, 1).data()).unwrap();
        assert!(enc.push_chunk(&store, &mut s, &[]).unwrap().is_empty());
        assert!(enc.push_chunk(&store, &mut s, features(8, 1).data()).is_err());
        assert!(enc.start_stream(&MaskSpec::Offline).is_err());
    }
}
