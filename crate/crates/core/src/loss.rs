//! Transducer losses over a joint log-probability lattice.
//!
//! Two alignment families are supported:
//!
//! * [`AlignmentVariant::Original`]: an alignment interleaves `T'` blanks with
//!   the `U` labels and always ends with a blank, so `K = T' + U`. Any number
//!   of labels may be emitted on one frame.
//! * [`AlignmentVariant::Monotonic`]: every alignment step consumes exactly one
//!   frame (`K = T'`), emitting either a blank or the next label. A finite loss
//!   requires `U <= T'`.
//!
//! The lattice `values[t, u, k]` holds `log p(k | e_t, s_u)` with `k = 0` the
//! blank. Forward variables live in log space and unreachable cells carry
//! `-inf`.

use crate::autodiff::log_add_exp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of the blank symbol in the extended vocabulary.
pub const BLANK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignmentVariant {
    Original,
    Monotonic,
}

impl std::str::FromStr for AlignmentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "monotonic" => Ok(Self::Monotonic),
            _ => Err(Error::config("loss.variant", format!("unknown variant `{s}`"))),
        }
    }
}

impl std::fmt::Display for AlignmentVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::Monotonic => "monotonic",
        })
    }
}

/// Lattice of log-probabilities of shape `T' x (U+1) x (V+1)`.
#[derive(Clone, Debug)]
pub struct JointLogits {
    values: Tensor,
}

impl JointLogits {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::invalid(
                "JointLogits::new",
                format!("expected rank 3, got shape {:?}", values.shape()),
            ));
        }
        if values.shape()[2] < 2 {
            return Err(Error::invalid("JointLogits::new", "need at least blank plus one token"));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of labels `U` the lattice was built for.
    pub fn labels(&self) -> usize {
        self.values.shape()[1] - 1
    }

    /// Vocabulary size `V`, excluding the blank.
    pub fn vocab(&self) -> usize {
        self.values.shape()[2] - 1
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        let s = self.values.shape();
        self.values.data()[(t * s[1] + u) * s[2] + k]
    }

    /// Largest deviation of `sum_k exp(values[t,u,k])` from one.
    pub fn normalization_error(&self) -> f64 {
        self.values
            .data()
            .chunks(self.vocab() + 1)
            .map(|row| (row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Loss, forward lattice and (optionally) gradient for one utterance.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Negative log-likelihood in nats; `+inf` when no alignment exists.
    pub loss: f64,
    /// Forward log-scores, row-major. `T' x (U+1)` for the original variant and
    /// `(T'+1) x (U+1)` for the monotonic one (row `t` = frames consumed).
    pub alpha: Vec<f64>,
    pub alpha_rows: usize,
    pub grad: Option<Tensor>,
}

impl LossOutput {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Stable log-sum-exp of a non-empty list; all `-inf` gives `-inf`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("logsumexp", "empty input"));
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    Ok(m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
}

fn check_labels(logits: &JointLogits, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.labels() {
        return Err(Error::invalid(
            "transducer_loss",
            format!("lattice built for U={} but {} labels given", logits.labels(), labels.len()),
        ));
    }
    for &y in labels {
        if y == BLANK {
            return Err(Error::BlankToken("label"));
        }
        if y > logits.vocab() {
            return Err(Error::TokenOutOfRange { id: y, vocab: logits.vocab() });
        }
    }
    Ok(())
}

struct Lattice<'a> {
    logits: &'a JointLogits,
    labels: &'a [usize],
}

impl Lattice<'_> {
    fn blank(&self, t: usize, u: usize) -> f64 {
        self.logits.at(t, u, BLANK)
    }
    fn label(&self, t: usize, u: usize) -> f64 {
        self.logits.at(t, u, self.labels[u])
    }
}

fn forward_original(lat: &Lattice, frames: usize, u_max: usize) -> Vec<f64> {
    let w = u_max + 1;
    let mut alpha = vec![f64::NEG_INFINITY; frames * w];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..=u_max {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 { alpha[(t - 1) * w + u] + lat.blank(t - 1, u) } else { f64::NEG_INFINITY };
            let from_label = if u > 0 { alpha[t * w + u - 1] + lat.label(t, u - 1) } else { f64::NEG_INFINITY };
            alpha[t * w + u] = log_add_exp(from_blank, from_label);
        }
    }
    alpha
}

fn backward_original(lat: &Lattice, frames: usize, u_max: usize) -> Vec<f64> {
    let w = u_max + 1;
    let mut beta = vec![f64::NEG_INFINITY; frames * w];
    for t in (0..frames).rev() {
        for u in (0..=u_max).rev() {
            beta[t * w + u] = if t == frames - 1 && u == u_max {
                lat.blank(t, u)
            } else {
                let via_blank = if t + 1 < frames { lat.blank(t, u) + beta[(t + 1) * w + u] } else { f64::NEG_INFINITY };
                let via_label = if u < u_max { lat.label(t, u) + beta[t * w + u + 1] } else { f64::NEG_INFINITY };
                log_add_exp(via_blank, via_label)
            };
        }
    }
    beta
}

fn forward_monotonic(lat: &Lattice, frames: usize, u_max: usize) -> Vec<f64> {
    let w = u_max + 1;
    let mut alpha = vec![f64::NEG_INFINITY; (frames + 1) * w];
    alpha[0] = 0.0;
    for t in 1..=frames {
        for u in 0..=u_max.min(t) {
            let stay = alpha[(t - 1) * w + u] + lat.blank(t - 1, u);
            let emit = if u > 0 { alpha[(t - 1) * w + u - 1] + lat.label(t - 1, u - 1) } else { f64::NEG_INFINITY };
            alpha[t * w + u] = log_add_exp(stay, emit);
        }
    }
    alpha
}

fn backward_monotonic(lat: &Lattice, frames: usize, u_max: usize) -> Vec<f64> {
    let w = u_max + 1;
    let mut beta = vec![f64::NEG_INFINITY; (frames + 1) * w];
    beta[frames * w + u_max] = 0.0;
    for t in (0..frames).rev() {
        for u in 0..=u_max {
            let stay = lat.blank(t, u) + beta[(t + 1) * w + u];
            let emit = if u < u_max { lat.label(t, u) + beta[(t + 1) * w + u + 1] } else { f64::NEG_INFINITY };
            beta[t * w + u] = log_add_exp(stay, emit);
        }
    }
    beta
}

fn run(logits: &JointLogits, labels: &[usize], variant: AlignmentVariant, want_grad: bool) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    let (frames, u_max, k) = (logits.frames(), logits.labels(), logits.vocab() + 1);
    let w = u_max + 1;
    let lat = Lattice { logits, labels };
    let (alpha, alpha_rows, log_p) = match variant {
        AlignmentVariant::Original => {
            let alpha = forward_original(&lat, frames, u_max);
            let log_p = alpha[(frames - 1) * w + u_max] + lat.blank(frames - 1, u_max);
            (alpha, frames, log_p)
        }
        AlignmentVariant::Monotonic => {
            let alpha = forward_monotonic(&lat, frames, u_max);
            let log_p = alpha[frames * w + u_max];
            (alpha, frames + 1, log_p)
        }
    };
    let loss = -log_p;
    let grad = if want_grad && loss.is_finite() {
        let mut g = vec![0.0; frames * w * k];
        let idx = |t: usize, u: usize, s: usize| (t * w + u) * k + s;
        match variant {
            AlignmentVariant::Original => {
                let beta = backward_original(&lat, frames, u_max);
                for t in 0..frames {
                    for u in 0..=u_max {
                        let a = alpha[t * w + u];
                        if a == f64::NEG_INFINITY {
                            continue;
                        }
                        let next = if t + 1 < frames {
                            beta[(t + 1) * w + u]
                        } else if u == u_max {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        };
                        if next > f64::NEG_INFINITY {
                            g[idx(t, u, BLANK)] = -(a + lat.blank(t, u) + next - log_p).exp();
                        }
                        if u < u_max {
                            let next = beta[t * w + u + 1];
                            if next > f64::NEG_INFINITY {
                                g[idx(t, u, labels[u])] = -(a + lat.label(t, u) + next - log_p).exp();
                            }
                        }
                    }
                }
            }
            AlignmentVariant::Monotonic => {
                let beta = backward_monotonic(&lat, frames, u_max);
                for t in 0..frames {
                    for u in 0..=u_max {
                        let a = alpha[t * w + u];
                        if a == f64::NEG_INFINITY {
                            continue;
                        }
                        let stay = beta[(t + 1) * w + u];
                        if stay > f64::NEG_INFINITY {
                            g[idx(t, u, BLANK)] = -(a + lat.blank(t, u) + stay - log_p).exp();
                        }
                        if u < u_max {
                            let emit = beta[(t + 1) * w + u + 1];
                            if emit > f64::NEG_INFINITY {
                                g[idx(t, u, labels[u])] = -(a + lat.label(t, u) + emit - log_p).exp();
                            }
                        }
                    }
                }
            }
        }
        Some(Tensor::new(vec![frames, w, k], g)?)
    } else {
        None
    };
    Ok(LossOutput {
        loss,
        alpha,
        alpha_rows,
        grad,
    })
}

/// Negative log-likelihood by forward dynamic programming. An infeasible
/// monotonic instance (`U > T'`) returns `loss = +inf` rather than an error.
pub fn transducer_loss(logits: &JointLogits, labels: &[usize], variant: AlignmentVariant) -> Result<LossOutput> {
    run(logits, labels, variant, false)
}

/// Loss together with its gradient with respect to the lattice entries.
pub fn transducer_loss_with_grad(
    logits: &JointLogits,
    labels: &[usize],
    variant: AlignmentVariant,
) -> Result<LossOutput> {
    run(logits, labels, variant, true)
}

/// Gradient of the loss with respect to every lattice entry; cells that lie on
/// no complete alignment get exactly zero.
pub fn transducer_grad(logits: &JointLogits, labels: &[usize], variant: AlignmentVariant) -> Result<Tensor> {
    let out = run(logits, labels, variant, true)?;
    out.grad.ok_or(Error::InfiniteLoss)
}

/// Per-utterance losses over a zero- or garbage-padded batch
/// `[B x T_max x (U_max+1) x (V+1)]`. Each utterance only reads its own
/// `frames[b] x (labels[b].len()+1)` corner.
pub fn transducer_loss_batch(
    padded: &Tensor,
    frames: &[usize],
    labels: &[Vec<usize>],
    variant: AlignmentVariant,
) -> Result<Vec<LossOutput>> {
    let s = padded.shape();
    if s.len() != 4 || s[0] != frames.len() || s[0] != labels.len() {
        return Err(Error::invalid("transducer_loss_batch", format!("bad batch shape {s:?}")));
    }
    let (tm, um, k) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(s[0]);
    for (b, (&t, y)) in frames.iter().zip(labels).enumerate() {
        let u = y.len();
        if t == 0 || t > tm || u + 1 > um {
            return Err(Error::invalid("transducer_loss_batch", format!("utterance {b} exceeds padding")));
        }
        let mut data = Vec::with_capacity(t * (u + 1) * k);
        for ti in 0..t {
            for ui in 0..=u {
                let off = ((b * tm + ti) * um + ui) * k;
                data.extend_from_slice(&padded.data()[off..off + k]);
            }
        }
        let lat = JointLogits::new(Tensor::new(vec![t, u + 1, k], data)?)?;
        out.push(transducer_loss_with_grad(&lat, y, variant)?);
    }
    Ok(out)
}

/// Exhaustive enumeration result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BruteForce {
    pub loss: f64,
    pub alignments: usize,
}

/// Largest lattice the enumeration accepts.
pub const ORACLE_MAX_FRAMES: usize = 6;
pub const ORACLE_MAX_LABELS: usize = 4;

/// Literal enumeration of every alignment string over the extended vocabulary.
///
/// At each step every symbol `0..=V` is tried; strings whose non-blank symbols
/// diverge from `labels`, or that violate the variant's length rules, are
/// dropped. Probabilities of surviving strings are summed in linear space.
pub fn brute_force_oracle(logits: &JointLogits, labels: &[usize], variant: AlignmentVariant) -> Result<BruteForce> {
    check_labels(logits, labels)?;
    let (frames, u_max) = (logits.frames(), logits.labels());
    if frames > ORACLE_MAX_FRAMES || u_max > ORACLE_MAX_LABELS {
        return Err(Error::invalid(
            "brute_force_oracle",
            format!("T'={frames}, U={u_max} exceeds guard {ORACLE_MAX_FRAMES}x{ORACLE_MAX_LABELS}"),
        ));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut path = Vec::new();
    enumerate(logits, labels, variant, &mut path, &mut total, &mut count);
    let loss = if total > 0.0 { -total.ln() } else { f64::INFINITY };
    Ok(BruteForce { loss, alignments: count })
}

fn enumerate(
    logits: &JointLogits,
    labels: &[usize],
    variant: AlignmentVariant,
    path: &mut Vec<usize>,
    total: &mut f64,
    count: &mut usize,
) {
    let (frames, u_max) = (logits.frames(), labels.len());
    let blanks = path.iter().filter(|&&z| z == BLANK).count();
    let emitted = path.len() - blanks;
    let (target_len, complete) = match variant {
        AlignmentVariant::Original => (frames + u_max, blanks == frames && emitted == u_max),
        AlignmentVariant::Monotonic => (frames, path.len() == frames && emitted == u_max),
    };
    if path.len() == target_len {
        if complete {
            *total += score(logits, labels, variant, path).exp();
            *count += 1;
        }
        return;
    }
    for z in 0..=logits.vocab() {
        if z != BLANK && (emitted == u_max || labels[emitted] != z) {
            continue;
        }
        match variant {
            // the final symbol of an original alignment is the blank that
            // leaves the last frame; no label may follow it
            AlignmentVariant::Original if z == BLANK && blanks == frames => continue,
            AlignmentVariant::Original if z != BLANK && blanks == frames => continue,
            _ => {}
        }
        path.push(z);
        enumerate(logits, labels, variant, path, total, count);
        path.pop();
    }
}

fn score(logits: &JointLogits, labels: &[usize], variant: AlignmentVariant, path: &[usize]) -> f64 {
    let (mut t, mut u, mut s) = (0, 0, 0.0);
    for (k, &z) in path.iter().enumerate() {
        let frame = match variant {
            AlignmentVariant::Original => t,
            AlignmentVariant::Monotonic => k,
        };
        s += logits.at(frame, u, z);
        if z == BLANK {
            t += 1;
        } else {
            debug_assert_eq!(labels[u], z);
            u += 1;
        }
    }
    s
}
