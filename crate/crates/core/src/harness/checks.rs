//! Self-check suites shared by `check-oracle` and the acceptance tests.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::encoder::{build_attention_mask, ConformerBlock, Encoder, EncoderConfig, MaskSpec};
use crate::error::{Error, Result};
use crate::gradcheck::finite_diff_check;
use crate::loss::{brute_force_oracle, transducer_loss, AlignmentVariant, JointLogits};
use crate::model::Joiner;
use crate::pn::{pn_init, PnConfig, PnKind};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{ParamStore, Tensor};

pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const ORACLE_LATTICES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

pub fn check_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<34} {:>6} {:>12} {:>10}  status\n", "check", "cases", "worst", "tol");
    for r in results {
        let _ = writeln!(
            s,
            "{:<34} {:>6} {:>12.3e} {:>10.1e}  {}",
            r.name,
            r.cases,
            r.worst,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

fn random_log_probs(frames: usize, u: usize, vocab: usize, rng: &mut Rng) -> Result<JointLogits> {
    let k = vocab + 1;
    let mut data = Vec::with_capacity(frames * (u + 1) * k);
    for _ in 0..frames * (u + 1) {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - z));
    }
    JointLogits::new(Tensor::new(vec![frames, u + 1, k], data)?)
}

fn random_labels(u: usize, vocab: usize, rng: &mut Rng) -> Vec<usize> {
    (0..u).map(|_| rng.random_range(1..=vocab)).collect()
}

/// Dynamic-programming loss against exhaustive alignment enumeration on every
/// `(T', U, V)` in `{1..4} x {0..3} x {1..3}`.
pub fn loss_oracle_check(variant: AlignmentVariant, seed: u64) -> Result<CheckResult> {
    let mut rng = rng::stream(seed, Stream::Corpus);
    let (mut worst, mut cases) = (0.0f64, 0);
    for frames in 1..=4 {
        for u in 0..=3 {
            for vocab in 1..=3 {
                for _ in 0..ORACLE_LATTICES {
                    let lat = random_log_probs(frames, u, vocab, &mut rng)?;
                    let labels = random_labels(u, vocab, &mut rng);
                    let dp = transducer_loss(&lat, &labels, variant)?.loss;
                    let bf = brute_force_oracle(&lat, &labels, variant)?.loss;
                    let err = if dp.is_infinite() && bf.is_infinite() { 0.0 } else { (dp - bf).abs() };
                    worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
                    cases += 1;
                }
            }
        }
    }
    Ok(CheckResult {
        name: format!("loss oracle ({variant})"),
        cases,
        worst,
        tolerance: ORACLE_TOLERANCE,
    })
}

/// Moves every parameter off its initial value so zero-initialised biases do
/// not sit exactly on a ReLU kink.
fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = rng::stream(seed, Stream::Augment);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Reruns `check` from a freshly perturbed point when the stencil of too many
/// coordinates straddles a kink.
fn at_smooth_point(seed: u64, mut check: impl FnMut(u64) -> Result<f64>) -> Result<f64> {
    const ATTEMPTS: u64 = 3;
    for attempt in 0..ATTEMPTS {
        match check(seed.wrapping_add(attempt << 32)) {
            Err(Error::Invalid { op: "finite_diff_check", msg }) if attempt + 1 < ATTEMPTS => {
                log::debug!("retrying from a new point: {msg}");
            }
            r => return r,
        }
    }
    unreachable!("last attempt always returns")
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Analytic transducer gradient through a log-softmax over free logits.
pub fn transducer_grad_check(variant: AlignmentVariant, seed: u64) -> Result<CheckResult> {
    let mut rng = rng::stream(seed, Stream::Corpus);
    let mut worst = 0.0f64;
    let shapes = [(1, 0, 1), (2, 1, 2), (3, 2, 3), (4, 3, 2), (5, 2, 4)];
    for &(frames, u, vocab) in &shapes {
        let labels = random_labels(u, vocab, &mut rng);
        let mut store = ParamStore::new();
        let id = store.add("lattice", Tensor::uniform(&[frames, u + 1, vocab + 1], 2.0, &mut rng)?)?;
        let err = finite_diff_check(
            &mut store,
            |t| {
                let x = t.param(id);
                let lp = t.log_softmax(x, 2)?;
                t.transducer_nll(lp, &labels, variant)
            },
            GRAD_EPS,
            seed,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: format!("transducer gradient ({variant})"),
        cases: shapes.len(),
        worst,
        tolerance: GRAD_TOLERANCE,
    })
}

/// Small prediction-network configuration used by the gradient checks.
pub fn small_pn_config(kind: PnKind) -> PnConfig {
    PnConfig {
        heads: 2,
        left_context: 3,
        ngram_n: 3,
        ff_dim: 8,
        conv_kernel: 3,
        ..PnConfig::new(kind, 5, 6)
    }
}

pub fn pn_grad_check(kind: PnKind, seed: u64) -> Result<CheckResult> {
    let cfg = small_pn_config(kind);
    let (pn, store) = pn_init(&cfg, seed)?;
    let mut rng = rng::stream(seed, Stream::Corpus);
    let tokens = random_labels(5, cfg.vocab_size, &mut rng);
    let weights = random_tensor(&[tokens.len() + 1, cfg.embed_dim], &mut rng)?;
    let worst = at_smooth_point(seed, |point| {
        let mut store = store.clone();
        perturb(&mut store, point);
        finite_diff_check(
            &mut store,
            |t| {
                let s = pn.forward(t, &tokens)?;
                weighted_sum(t, s, &weights)
            },
            GRAD_EPS,
            seed,
        )
    })?;
    Ok(CheckResult {
        name: format!("pn forward ({kind})"),
        cases: 1,
        worst,
        tolerance: GRAD_TOLERANCE,
    })
}

pub fn conformer_block_grad_check(seed: u64) -> Result<CheckResult> {
    let (frames, dim) = (6, 8);
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, Stream::Init);
    let block = ConformerBlock::new(&mut store, "block", dim, 16, 2, 3, true, &mut rng)?;
    let mut data = rng::stream(seed, Stream::Corpus);
    let x = random_tensor(&[frames, dim], &mut data)?;
    let weights = random_tensor(&[frames, dim], &mut data)?;
    let mask = build_attention_mask(frames, &MaskSpec::Chunked { chunk: 2 });
    let worst = at_smooth_point(seed, |point| {
        let mut store = store.clone();
        perturb(&mut store, point);
        finite_diff_check(
            &mut store,
            |t| {
                let xv = t.leaf(x.clone());
                let y = block.forward(t, xv, &mask)?;
                weighted_sum(t, y, &weights)
            },
            GRAD_EPS,
            seed,
        )
    })?;
    Ok(CheckResult {
        name: "conformer block".into(),
        cases: 1,
        worst,
        tolerance: GRAD_TOLERANCE,
    })
}

/// Two-block encoder at desk width, chunked mask, frontend included.
pub fn encoder_grad_check(seed: u64) -> Result<CheckResult> {
    let cfg = EncoderConfig {
        num_blocks: 2,
        max_frames: 64,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, Stream::Init);
    let encoder = Encoder::new(&cfg, &mut store, "enc", &mut rng)?;
    let mut data = rng::stream(seed, Stream::Corpus);
    let x = random_tensor(&[24, cfg.input_dim], &mut data)?;
    let weights = random_tensor(&[6, cfg.model_dim], &mut data)?;
    let mask = MaskSpec::Chunked { chunk: 2 };
    let worst = at_smooth_point(seed, |point| {
        let mut store = store.clone();
        perturb(&mut store, point);
        finite_diff_check(
            &mut store,
            |t| {
                let xv = t.leaf(x.clone());
                let y = encoder.forward(t, xv, &mask)?;
                weighted_sum(t, y, &weights)
            },
            GRAD_EPS,
            seed,
        )
    })?;
    Ok(CheckResult {
        name: "encoder (2 blocks)".into(),
        cases: 1,
        worst,
        tolerance: GRAD_TOLERANCE,
    })
}

/// Joiner followed by the transducer loss; `tied` shares the output layer
/// with a token embedding.
pub fn joiner_grad_check(tied: bool, seed: u64) -> Result<CheckResult> {
    let (frames, enc_dim, pn_dim, dim, vocab) = (4, 5, 6, 7, 4);
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, Stream::Init);
    let embed = if tied {
        Some(store.add("embed", Tensor::uniform(&[vocab, dim], 1.0, &mut rng)?)?)
    } else {
        None
    };
    let joiner = Joiner::new(&mut store, "joiner", enc_dim, pn_dim, dim, vocab, embed, &mut rng)?;
    let mut data = rng::stream(seed, Stream::Corpus);
    let labels = random_labels(2, vocab, &mut data);
    let enc = random_tensor(&[frames, enc_dim], &mut data)?;
    let states = random_tensor(&[labels.len() + 1, pn_dim], &mut data)?;
    let worst = at_smooth_point(seed, |point| {
        let mut store = store.clone();
        perturb(&mut store, point);
        finite_diff_check(
            &mut store,
            |t| {
                let e = t.leaf(enc.clone());
                let s = t.leaf(states.clone());
                let lat = joiner.lattice(t, e, s)?;
                t.transducer_nll(lat, &labels, AlignmentVariant::Original)
            },
            GRAD_EPS,
            seed,
        )
    })?;
    Ok(CheckResult {
        name: format!("joiner ({})", if tied { "tied" } else { "untied" }),
        cases: 1,
        worst,
        tolerance: GRAD_TOLERANCE,
    })
}

pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for v in [AlignmentVariant::Original, AlignmentVariant::Monotonic] {
        out.push(transducer_grad_check(v, seed)?);
    }
    for kind in PnKind::ALL {
        out.push(pn_grad_check(kind, seed)?);
    }
    out.push(conformer_block_grad_check(seed)?);
    out.push(encoder_grad_check(seed)?);
    out.push(joiner_grad_check(false, seed)?);
    out.push(joiner_grad_check(true, seed)?);
    Ok(out)
}

/// Loss oracle for both variants followed by the gradient suite.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        loss_oracle_check(AlignmentVariant::Original, seed)?,
        loss_oracle_check(AlignmentVariant::Monotonic, seed)?,
    ];
    out.extend(gradient_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_default_seed() {
        let results = oracle_suite(7).unwrap();
        for r in &results {
            assert!(r.passed(), "{}", check_table(&results));
        }
    }
}
