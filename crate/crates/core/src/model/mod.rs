//! Encoder, prediction network and joiner assembled into a transducer.

mod decode;
mod joiner;
mod rtf;
mod wer;

pub use decode::{greedy_decode_offline, greedy_decode_streaming, DecodeResult, StreamingDecoder};
pub use joiner::Joiner;
pub use rtf::{max_batch_at_unity, pn_step_cost, rtf_benchmark, RtfReport};
pub use wer::{edit_counts, word_error_rate, EditCounts, WerReport};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig, MaskSpec};
use crate::error::{Error, Result};
use crate::loss::{AlignmentVariant, JointLogits};
use crate::pn::{PnConfig, PredictionNetwork};
use crate::rng::{self, Stream};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pn: PnConfig,
    pub joiner_dim: usize,
    pub variant: AlignmentVariant,
    pub mask: MaskSpec,
    pub max_symbols_per_frame: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.check_mask(&self.mask)?;
        self.pn.validate()?;
        if self.joiner_dim == 0 {
            return Err(Error::config("joiner.dim", "must be positive"));
        }
        if self.pn.tie_embeddings && self.joiner_dim != self.pn.embed_dim {
            return Err(Error::config("joiner.dim", "tied embeddings need joiner.dim == pn.dim"));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::config("decode.max_symbols_per_frame", "must be at least 1"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.pn.vocab_size
    }
}

/// Transducer with its own parameter store. Parameter names carry the
/// prefixes `enc.`, `pn.` and `joiner.`.
#[derive(Clone, Debug)]
pub struct TransducerModel {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    pn: PredictionNetwork,
    joiner: Joiner,
}

impl TransducerModel {
    /// Parameters are drawn from the seed's init stream in the order encoder,
    /// prediction network, joiner, so models that differ only in their
    /// prediction network share an identical encoder.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, Stream::Init);
        let encoder = Encoder::new(&cfg.encoder, &mut params, "enc", &mut rng)?;
        let pn = PredictionNetwork::new(&cfg.pn, &mut params, "pn", &mut rng)?;
        let tied = cfg.pn.tie_embeddings.then(|| pn.embedding());
        let joiner = Joiner::new(
            &mut params,
            "joiner",
            cfg.encoder.model_dim,
            cfg.pn.embed_dim,
            cfg.joiner_dim,
            cfg.pn.vocab_size,
            tied,
            &mut rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            pn,
            joiner,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn pn(&self) -> &PredictionNetwork {
        &self.pn
    }

    pub fn pn_mut(&mut self) -> &mut PredictionNetwork {
        &mut self.pn
    }

    pub fn joiner(&self) -> &Joiner {
        &self.joiner
    }

    pub fn set_mask(&mut self, mask: MaskSpec) -> Result<()> {
        self.cfg.encoder.check_mask(&mask)?;
        self.cfg.mask = mask;
        Ok(())
    }

    pub fn set_variant(&mut self, variant: AlignmentVariant) {
        self.cfg.variant = variant;
    }

    /// Log-probability lattice on `tape` for features `x [T x d]`.
    pub fn lattice(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<Var> {
        let enc = self.encoder.forward(tape, x, &self.cfg.mask)?;
        let states = self.pn.forward(tape, labels)?;
        self.joiner.lattice(tape, enc, states)
    }

    /// Transducer negative log-likelihood of one utterance.
    pub fn loss(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<Var> {
        let lattice = self.lattice(tape, x, labels)?;
        tape.transducer_nll(lattice, labels, self.cfg.variant)
    }

    /// Materialised lattice without gradients.
    pub fn joint_lattice(&self, features: &Tensor, labels: &[usize]) -> Result<JointLogits> {
        let mut tape = Tape::no_grad(&self.params);
        let x = tape.leaf(features.clone());
        let l = self.lattice(&mut tape, x, labels)?;
        JointLogits::new(tape.tensor(l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pn::PnKind;

    pub(crate) fn tiny_config(kind: PnKind) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_blocks: 1,
                model_dim: 8,
                ff_dim: 8,
                heads: 2,
                conv_kernel: 3,
                input_dim: 3,
                max_frames: 16,
                ..EncoderConfig::default()
            },
            pn: PnConfig {
                heads: 2,
                ngram_n: 3,
                left_context: 2,
                ff_dim: 8,
                ..PnConfig::new(kind, 4, 6)
            },
            joiner_dim: 6,
            variant: AlignmentVariant::Original,
            mask: MaskSpec::Chunked { chunk: 2 },
            max_symbols_per_frame: 10,
        }
    }

    #[test]
    fn lattice_shape_and_normalisation() {
        let m = TransducerModel::new(&tiny_config(PnKind::NConcat), 1).unwrap();
        let f = Tensor::uniform(&[10, 3], 1.0, &mut rng::stream(2, Stream::Corpus)).unwrap();
        let l = m.joint_lattice(&f, &[1, 3]).unwrap();
        assert_eq!(l.values().shape(), &[3, 3, 5]);
        assert!(l.normalization_error() < 1e-9);
    }

    #[test]
    fn tied_output_uses_embedding() {
        let mut cfg = tiny_config(PnKind::NConcat);
        cfg.pn.tie_embeddings = true;
        let m = TransducerModel::new(&cfg, 1).unwrap();
        assert!(m.params().id("joiner.out.weight").is_none());
        assert!(m.params().id("joiner.out.blank").is_some());
        cfg.joiner_dim = 5;
        assert!(cfg.validate().is_err());
    }
}
