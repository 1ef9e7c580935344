//! Flat `key=value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are dotted
//! (`pn.kind=nconcat`); unknown keys are errors. Unset keys keep the desk
//! defaults.

use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, MaskSpec};
use crate::error::{Error, Result};
use crate::loss::AlignmentVariant;
use crate::model::ModelConfig;
use crate::pn::{PnConfig, PnKind};

use super::corpus::SyntheticTaskSpec;
use super::specaug::SpecAugConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub reg_beta: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_steps: 300,
            total_steps: 3000,
            batch_size: 8,
            eval_interval: 250,
            reg_beta: 0.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub specaug: SpecAugConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = SyntheticTaskSpec::default();
        let encoder = EncoderConfig {
            input_dim: task.feature_dim,
            max_frames: 64,
            ..EncoderConfig::default()
        };
        let pn = PnConfig {
            heads: 4,
            left_context: 4,
            ff_dim: 128,
            conv_kernel: 3,
            ngram_n: 5,
            ..PnConfig::new(PnKind::NConcat, task.vocab_size, 64)
        };
        Self {
            model: ModelConfig {
                encoder,
                pn,
                joiner_dim: 64,
                variant: AlignmentVariant::Original,
                mask: MaskSpec::Chunked { chunk: 4 },
                max_symbols_per_frame: 10,
            },
            task,
            train: TrainParams::default(),
            specaug: SpecAugConfig {
                time_masks: 1,
                max_time_width: 4,
                feat_masks: 1,
                max_feat_width: 2,
            },
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "task.vocab",
    "task.feature_dim",
    "task.frames_min",
    "task.frames_max",
    "task.noise_std",
    "task.len_min",
    "task.len_max",
    "task.corpus_size",
    "task.seed",
    "task.pair_separation",
    "task.pair_prob",
    "enc.blocks",
    "enc.dim",
    "enc.ff_dim",
    "enc.heads",
    "enc.conv_kernel",
    "enc.frame_duration",
    "enc.max_frames",
    "enc.causal_conv",
    "pn.kind",
    "pn.dim",
    "pn.heads",
    "pn.left_context",
    "pn.ngram_n",
    "pn.ff_dim",
    "pn.conv_kernel",
    "pn.tie_embeddings",
    "joiner.dim",
    "loss.variant",
    "mask.mode",
    "mask.chunk_frames",
    "mask.la_frames",
    "train.peak_lr",
    "train.warmup_steps",
    "train.total_steps",
    "train.batch_size",
    "train.eval_interval",
    "train.reg_beta",
    "train.seed",
    "specaug.time_masks",
    "specaug.max_time_width",
    "specaug.feat_masks",
    "specaug.max_feat_width",
    "decode.max_symbols_per_frame",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if t.total_steps == 0 || t.batch_size == 0 || t.warmup_steps == 0 || t.eval_interval == 0 {
            return Err(Error::config("train", "step counts and batch size must be positive"));
        }
        if t.warmup_steps > t.total_steps {
            return Err(Error::config("train.warmup_steps", "must not exceed train.total_steps"));
        }
        if !(t.peak_lr > 0.0) {
            return Err(Error::config("train.peak_lr", "must be positive"));
        }
        if !(t.reg_beta >= 0.0) {
            return Err(Error::config("train.reg_beta", "must be non-negative"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "task.vocab" => {
                self.task.vocab_size = parse(key, v)?;
                m.pn.vocab_size = self.task.vocab_size;
            }
            "task.feature_dim" => {
                self.task.feature_dim = parse(key, v)?;
                m.encoder.input_dim = self.task.feature_dim;
            }
            "task.frames_min" => self.task.frames_per_token.0 = parse(key, v)?,
            "task.frames_max" => self.task.frames_per_token.1 = parse(key, v)?,
            "task.noise_std" => self.task.noise_std = parse(key, v)?,
            "task.len_min" => self.task.token_len.0 = parse(key, v)?,
            "task.len_max" => self.task.token_len.1 = parse(key, v)?,
            "task.corpus_size" => self.task.corpus_size = parse(key, v)?,
            "task.seed" => self.task.seed = parse(key, v)?,
            "task.pair_separation" => self.task.pair_separation = parse(key, v)?,
            "task.pair_prob" => self.task.pair_prob = parse(key, v)?,
            "enc.blocks" => m.encoder.num_blocks = parse(key, v)?,
            "enc.dim" => m.encoder.model_dim = parse(key, v)?,
            "enc.ff_dim" => m.encoder.ff_dim = parse(key, v)?,
            "enc.heads" => m.encoder.heads = parse(key, v)?,
            "enc.conv_kernel" => m.encoder.conv_kernel = parse(key, v)?,
            "enc.frame_duration" => m.encoder.frame_duration_s = parse(key, v)?,
            "enc.max_frames" => m.encoder.max_frames = parse(key, v)?,
            "enc.causal_conv" => m.encoder.causal_conv = parse(key, v)?,
            "pn.kind" => m.pn.kind = v.parse()?,
            "pn.dim" => m.pn.embed_dim = parse(key, v)?,
            "pn.heads" => m.pn.heads = parse(key, v)?,
            "pn.left_context" => m.pn.left_context = parse(key, v)?,
            "pn.ngram_n" => m.pn.ngram_n = parse(key, v)?,
            "pn.ff_dim" => m.pn.ff_dim = parse(key, v)?,
            "pn.conv_kernel" => m.pn.conv_kernel = parse(key, v)?,
            "pn.tie_embeddings" => m.pn.tie_embeddings = parse(key, v)?,
            "joiner.dim" => m.joiner_dim = parse(key, v)?,
            "loss.variant" => m.variant = v.parse().map_err(|_| Error::config(key, format!("unknown variant `{v}`")))?,
            "mask.mode" | "mask.chunk_frames" | "mask.la_frames" => {
                let (mut mode, mut chunk, mut la) = (
                    m.mask.mode_name().to_string(),
                    m.mask.chunk_frames().unwrap_or(1),
                    m.mask.la_frames(),
                );
                match key {
                    "mask.mode" => mode = v.to_string(),
                    "mask.chunk_frames" => chunk = parse(key, v)?,
                    _ => la = parse(key, v)?,
                }
                m.mask = MaskSpec::from_parts(&mode, chunk, la)?;
            }
            "train.peak_lr" => self.train.peak_lr = parse(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "train.total_steps" => self.train.total_steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.eval_interval" => self.train.eval_interval = parse(key, v)?,
            "train.reg_beta" => self.train.reg_beta = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "specaug.time_masks" => self.specaug.time_masks = parse(key, v)?,
            "specaug.max_time_width" => self.specaug.max_time_width = parse(key, v)?,
            "specaug.feat_masks" => self.specaug.feat_masks = parse(key, v)?,
            "specaug.max_feat_width" => self.specaug.max_feat_width = parse(key, v)?,
            "decode.max_symbols_per_frame" => m.max_symbols_per_frame = parse(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "task.vocab" => self.task.vocab_size.to_string(),
            "task.feature_dim" => self.task.feature_dim.to_string(),
            "task.frames_min" => self.task.frames_per_token.0.to_string(),
            "task.frames_max" => self.task.frames_per_token.1.to_string(),
            "task.noise_std" => self.task.noise_std.to_string(),
            "task.len_min" => self.task.token_len.0.to_string(),
            "task.len_max" => self.task.token_len.1.to_string(),
            "task.corpus_size" => self.task.corpus_size.to_string(),
            "task.seed" => self.task.seed.to_string(),
            "task.pair_separation" => self.task.pair_separation.to_string(),
            "task.pair_prob" => self.task.pair_prob.to_string(),
            "enc.blocks" => m.encoder.num_blocks.to_string(),
            "enc.dim" => m.encoder.model_dim.to_string(),
            "enc.ff_dim" => m.encoder.ff_dim.to_string(),
            "enc.heads" => m.encoder.heads.to_string(),
            "enc.conv_kernel" => m.encoder.conv_kernel.to_string(),
            "enc.frame_duration" => m.encoder.frame_duration_s.to_string(),
            "enc.max_frames" => m.encoder.max_frames.to_string(),
            "enc.causal_conv" => m.encoder.causal_conv.to_string(),
            "pn.kind" => m.pn.kind.to_string(),
            "pn.dim" => m.pn.embed_dim.to_string(),
            "pn.heads" => m.pn.heads.to_string(),
            "pn.left_context" => m.pn.left_context.to_string(),
            "pn.ngram_n" => m.pn.ngram_n.to_string(),
            "pn.ff_dim" => m.pn.ff_dim.to_string(),
            "pn.conv_kernel" => m.pn.conv_kernel.to_string(),
            "pn.tie_embeddings" => m.pn.tie_embeddings.to_string(),
            "joiner.dim" => m.joiner_dim.to_string(),
            "loss.variant" => m.variant.to_string(),
            "mask.mode" => m.mask.mode_name().to_string(),
            "mask.chunk_frames" => m.mask.chunk_frames().unwrap_or(1).to_string(),
            "mask.la_frames" => m.mask.la_frames().to_string(),
            "train.peak_lr" => self.train.peak_lr.to_string(),
            "train.warmup_steps" => self.train.warmup_steps.to_string(),
            "train.total_steps" => self.train.total_steps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.eval_interval" => self.train.eval_interval.to_string(),
            "train.reg_beta" => self.train.reg_beta.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "specaug.time_masks" => self.specaug.time_masks.to_string(),
            "specaug.max_time_width" => self.specaug.max_time_width.to_string(),
            "specaug.feat_masks" => self.specaug.feat_masks.to_string(),
            "specaug.max_feat_width" => self.specaug.max_feat_width.to_string(),
            "decode.max_symbols_per_frame" => m.max_symbols_per_frame.to_string(),
            _ => return None,
        })
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.set("pn.kind", "lstm").unwrap();
        c.set("mask.la_frames", "2").unwrap();
        c.set("loss.variant", "monotonic").unwrap();
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.mask, MaskSpec::ChunkedLookahead { chunk: 4, la: 2 });
    }

    #[test]
    fn unknown_key_is_an_error() {
        match ExperimentConfig::from_text("pn.kind=nconcat\npn.colour=blue\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "pn.colour"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ExperimentConfig::from_text("no equals sign").is_err());
    }
}
