use std::fmt;

use crate::error::{Error, Result};

use super::{EncoderConfig, SUBSAMPLE};

/// Attention visibility policy, counted in subsampled frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSpec {
    Offline,
    Autoregressive,
    AutoregressiveLookahead { la: usize },
    Chunked { chunk: usize },
    ChunkedLookahead { chunk: usize, la: usize },
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskSpec::Chunked { chunk: 0 } | MaskSpec::ChunkedLookahead { chunk: 0, .. } => {
                Err(Error::config("mask.chunk_frames", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Whether query frame `i` may attend key frame `j`.
    pub fn visible(&self, i: usize, j: usize) -> bool {
        match *self {
            MaskSpec::Offline => true,
            MaskSpec::Autoregressive => j <= i,
            MaskSpec::AutoregressiveLookahead { la } => j <= i + la,
            MaskSpec::Chunked { chunk } => j / chunk <= i / chunk,
            MaskSpec::ChunkedLookahead { chunk, la } => j <= chunk_end(i, chunk) + la,
        }
    }

    pub fn is_streaming(&self) -> bool {
        !matches!(self, MaskSpec::Offline)
    }

    /// Parses the `mask.*` config triple.
    pub fn from_parts(mode: &str, chunk: usize, la: usize) -> Result<Self> {
        let spec = match mode {
            "offline" => MaskSpec::Offline,
            "autoregressive" if la == 0 => MaskSpec::Autoregressive,
            "autoregressive" => MaskSpec::AutoregressiveLookahead { la },
            "chunked" if la == 0 => MaskSpec::Chunked { chunk },
            "chunked" => MaskSpec::ChunkedLookahead { chunk, la },
            other => return Err(Error::config("mask.mode", format!("unknown mask mode `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            MaskSpec::Offline => "offline",
            MaskSpec::Autoregressive | MaskSpec::AutoregressiveLookahead { .. } => "autoregressive",
            MaskSpec::Chunked { .. } | MaskSpec::ChunkedLookahead { .. } => "chunked",
        }
    }

    pub fn chunk_frames(&self) -> Option<usize> {
        match *self {
            MaskSpec::Chunked { chunk } | MaskSpec::ChunkedLookahead { chunk, .. } => Some(chunk),
            _ => None,
        }
    }

    pub fn la_frames(&self) -> usize {
        match *self {
            MaskSpec::AutoregressiveLookahead { la } | MaskSpec::ChunkedLookahead { la, .. } => la,
            _ => 0,
        }
    }

    /// Largest key frame visible from query `i` in a sequence of `len` frames.
    pub fn last_visible(&self, i: usize, len: usize) -> usize {
        let end = match *self {
            MaskSpec::Offline => len - 1,
            MaskSpec::Autoregressive => i,
            MaskSpec::AutoregressiveLookahead { la } => i + la,
            MaskSpec::Chunked { chunk } => chunk_end(i, chunk),
            MaskSpec::ChunkedLookahead { chunk, la } => chunk_end(i, chunk) + la,
        };
        end.min(len - 1)
    }

    /// Latest subsampled frame that can influence output frame `i` after
    /// `blocks` attention layers.
    pub fn receptive_limit(&self, i: usize, len: usize, blocks: usize) -> usize {
        let mut r = i.min(len - 1);
        for _ in 0..blocks {
            r = self.last_visible(r, len);
        }
        r
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::Offline => write!(f, "offline"),
            MaskSpec::Autoregressive => write!(f, "autoregressive"),
            MaskSpec::AutoregressiveLookahead { la } => write!(f, "autoregressive+la{la}"),
            MaskSpec::Chunked { chunk } => write!(f, "chunked{chunk}"),
            MaskSpec::ChunkedLookahead { chunk, la } => write!(f, "chunked{chunk}+la{la}"),
        }
    }
}

fn chunk_end(i: usize, chunk: usize) -> usize {
    (i / chunk + 1) * chunk - 1
}

/// Row-major `[frames x frames]` visibility matrix.
pub fn build_attention_mask(frames: usize, spec: &MaskSpec) -> Vec<bool> {
    let mut m = Vec::with_capacity(frames * frames);
    for i in 0..frames {
        for j in 0..frames {
            m.push(spec.visible(i, j));
        }
    }
    m
}

/// Future input the frontend needs beyond the frame it emits. Each output
/// frame only reads inputs inside its own subsampling window.
pub const FRONTEND_LOOKAHEAD_S: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Eil {
    NotApplicable,
    Seconds { total: f64, chunk_only: f64 },
}

impl Eil {
    pub fn total(&self) -> Option<f64> {
        match self {
            Eil::NotApplicable => None,
            Eil::Seconds { total, .. } => Some(*total),
        }
    }
}

/// Worst-case future input an encoder output depends on.
pub fn eil_seconds(spec: &MaskSpec, cfg: &EncoderConfig) -> Eil {
    let delta = SUBSAMPLE as f64 * cfg.frame_duration_s;
    let (chunk_only, fe) = match *spec {
        MaskSpec::Offline => return Eil::NotApplicable,
        MaskSpec::Autoregressive => (delta, 0.0),
        MaskSpec::AutoregressiveLookahead { la } => (la as f64 * delta + delta, 0.0),
        MaskSpec::Chunked { chunk } => (chunk as f64 * delta, FRONTEND_LOOKAHEAD_S),
        MaskSpec::ChunkedLookahead { chunk, la } => ((chunk + la) as f64 * delta, FRONTEND_LOOKAHEAD_S),
    };
    Eil::Seconds {
        total: chunk_only + fe,
        chunk_only,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_example_rows() {
        let m = build_attention_mask(5, &MaskSpec::Chunked { chunk: 2 });
        let row = |i: usize| (0..5).filter(|&j| m[i * 5 + j]).collect::<Vec<_>>();
        assert_eq!(row(2), vec![0, 1, 2, 3]);
        assert_eq!(row(4), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn autoregressive_is_lower_triangular() {
        let m = build_attention_mask(3, &MaskSpec::Autoregressive);
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn full_chunk_is_offline() {
        assert_eq!(
            build_attention_mask(7, &MaskSpec::Chunked { chunk: 7 }),
            build_attention_mask(7, &MaskSpec::Offline)
        );
    }

    #[test]
    fn receptive_limit_compounds_lookahead() {
        let s = MaskSpec::AutoregressiveLookahead { la: 2 };
        assert_eq!(s.receptive_limit(3, 100, 3), 9);
        assert_eq!(s.receptive_limit(3, 8, 3), 7);
        assert_eq!(MaskSpec::Chunked { chunk: 4 }.receptive_limit(5, 100, 4), 7);
    }
}
