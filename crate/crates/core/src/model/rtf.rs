use std::time::Instant;

use crate::error::{Error, Result};
use crate::pn::PredictionNetwork;
use crate::tensor::{ParamStore, Tensor};

use super::{greedy_decode_offline, TransducerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct RtfReport {
    /// Mean over repeats of decode wall-clock divided by audio duration.
    pub rtf: f64,
    pub rtf_std: f64,
    pub repeats: usize,
    pub audio_seconds: f64,
    pub max_batch_at_unity: Option<usize>,
}

fn audio_seconds(model: &TransducerModel, features: &Tensor) -> f64 {
    features.rows() as f64 * model.config().encoder.frame_duration_s
}

/// Times encoder forward plus greedy decoding over the whole corpus.
pub fn rtf_benchmark(model: &TransducerModel, corpus: &[Tensor], repeats: usize) -> Result<RtfReport> {
    if corpus.is_empty() || repeats == 0 {
        return Err(Error::invalid("rtf_benchmark", "need at least one utterance and one repeat"));
    }
    let audio: f64 = corpus.iter().map(|f| audio_seconds(model, f)).sum();
    let mut rtfs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for f in corpus {
            greedy_decode_offline(model, f)?;
        }
        rtfs.push(start.elapsed().as_secs_f64() / audio);
    }
    let mean = rtfs.iter().sum::<f64>() / repeats as f64;
    let var = rtfs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / repeats as f64;
    Ok(RtfReport {
        rtf: mean,
        rtf_std: var.sqrt(),
        repeats,
        audio_seconds: audio,
        max_batch_at_unity: None,
    })
}

/// Real-time factor of serving `batch` concurrent utterances: the time to
/// decode all of them divided by the mean utterance duration.
fn batch_rtf(model: &TransducerModel, corpus: &[Tensor], batch: usize) -> Result<f64> {
    let mean = corpus.iter().map(|f| audio_seconds(model, f)).sum::<f64>() / corpus.len() as f64;
    let start = Instant::now();
    for f in corpus.iter().cycle().take(batch) {
        greedy_decode_offline(model, f)?;
    }
    Ok(start.elapsed().as_secs_f64() / mean)
}

/// Largest batch whose real-time factor stays at or below 1, found by
/// doubling and then bisection. `None` when even one utterance is slower
/// than real time; `limit` caps the search.
pub fn max_batch_at_unity(model: &TransducerModel, corpus: &[Tensor], limit: usize) -> Result<Option<usize>> {
    if corpus.is_empty() {
        return Err(Error::invalid("max_batch_at_unity", "empty corpus"));
    }
    if batch_rtf(model, corpus, 1)? > 1.0 {
        return Ok(None);
    }
    let mut lo = 1;
    let mut hi = None;
    while lo < limit {
        let next = (lo * 2).min(limit);
        if batch_rtf(model, corpus, next)? <= 1.0 {
            lo = next;
        } else {
            hi = Some(next);
            break;
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if batch_rtf(model, corpus, mid)? <= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Ok(Some(lo))
}

/// Mean seconds per prediction-network step folding over `tokens`, one
/// value per repeat.
pub fn pn_step_cost(pn: &PredictionNetwork, store: &ParamStore, tokens: &[usize], repeats: usize) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::invalid("pn_step_cost", "no tokens"));
    }
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let (mut state, _) = pn.start(store)?;
        for &t in tokens {
            state = pn.step(store, &state, t)?.0;
        }
        out.push(start.elapsed().as_secs_f64() / tokens.len() as f64);
    }
    Ok(out)
}
