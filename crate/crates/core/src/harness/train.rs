use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{greedy_decode_offline, word_error_rate, TransducerModel, WerReport};
use crate::pn::{embedding_spread_penalty, max_row_distance};
use crate::rng::{self, Stream};
use crate::tensor::{ParamStore, Tensor};

use super::config::ExperimentConfig;
use super::corpus::{split_index, Utterance};
use super::optim::{clip_grad_norm, lr_at, Adam, CLIP_NORM};
use super::specaug::spec_augment;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    /// Held-out token error rate.
    pub ter: f64,
    /// Embedding spread penalty of the prediction network.
    pub spread: f64,
    pub max_row_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config: String,
    /// `(step, mean training loss)` for every optimisation step.
    pub curve: Vec<(usize, f64)>,
    /// Step 0 holds the untrained model.
    pub evals: Vec<EvalPoint>,
    pub final_eval: WerReport,
    pub skipped_utterances: usize,
    pub diverged: bool,
    pub steps_run: usize,
    pub param_groups: Vec<(String, usize)>,
    pub param_total: usize,
    pub pn_params: usize,
}

impl ExperimentReport {
    pub fn final_ter(&self) -> f64 {
        self.final_eval.wer
    }

    pub fn final_spread(&self) -> f64 {
        self.evals.last().map_or(f64::NAN, |e| e.spread)
    }
}

pub struct TrainOutcome {
    pub model: TransducerModel,
    pub report: ExperimentReport,
    pub elapsed_s: f64,
}

/// Held-out token error rate of greedy decoding.
pub fn evaluate(model: &TransducerModel, utts: &[Utterance]) -> Result<WerReport> {
    let mut refs = Vec::with_capacity(utts.len());
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        hyps.push(greedy_decode_offline(model, &u.features)?.tokens);
        refs.push(u.labels.clone());
    }
    word_error_rate(&refs, &hyps)
}

fn embedding(model: &TransducerModel) -> &Tensor {
    model.params().get(model.pn().embedding())
}

fn eval_point(model: &TransducerModel, step: usize, held_out: &[Utterance]) -> Result<EvalPoint> {
    let e = embedding(model);
    Ok(EvalPoint {
        step,
        ter: evaluate(model, held_out)?.wer,
        spread: embedding_spread_penalty(e)?,
        max_row_distance: max_row_distance(e),
    })
}

struct ShardResult {
    grads: Vec<Vec<f64>>,
    loss: f64,
    used: usize,
    skipped: usize,
}

fn shard(model: &TransducerModel, batch: &[(Tensor, &[usize])]) -> Result<ShardResult> {
    let store = model.params();
    let mut grads: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
    let (mut loss, mut used, mut skipped) = (0.0, 0, 0);
    for (x, labels) in batch {
        let mut tape = Tape::new(store);
        let xv = tape.leaf(x.clone());
        let l = match model.loss(&mut tape, xv, labels) {
            Ok(l) => l,
            Err(Error::InfiniteLoss) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        loss += tape.scalar(l);
        used += 1;
        let g = tape.backward(l)?;
        for (id, gp) in g.params() {
            grads[id.0].iter_mut().zip(gp).for_each(|(a, b)| *a += b);
        }
    }
    Ok(ShardResult {
        grads,
        loss,
        used,
        skipped,
    })
}

/// Runs the configured optimisation on the first 90% of `corpus` and
/// evaluates on the rest. Batches are split into `threads` contiguous shards
/// whose gradients are summed in shard order.
pub fn train(cfg: &ExperimentConfig, corpus: &[Utterance], threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::invalid("train", "corpus needs at least two utterances"));
    }
    let started = Instant::now();
    let t = &cfg.train;
    let mut model = TransducerModel::new(&cfg.model, t.seed)?;
    let split = split_index(corpus.len());
    let (train_set, held_out) = corpus.split_at(split);
    let mut shuffle = rng::stream(t.seed, Stream::Shuffle);
    let mut augment = rng::stream(t.seed, Stream::Augment);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(t.total_steps);
    let mut evals = vec![eval_point(&model, 0, held_out)?];
    let mut last_good: ParamStore = model.params().clone();
    let (mut skipped, mut diverged, mut steps_run) = (0, false, 0);
    let threads = threads.max(1);
    let embed = model.pn().embedding();

    for step in 1..=t.total_steps {
        let mut batch = Vec::with_capacity(t.batch_size);
        while batch.len() < t.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            let u = &train_set[order[cursor]];
            cursor += 1;
            batch.push((spec_augment(&u.features, &cfg.specaug, &mut augment), u.labels.as_slice()));
        }
        let per = batch.len().div_ceil(threads);
        let results: Vec<Result<ShardResult>> = if threads == 1 {
            vec![shard(&model, &batch)]
        } else {
            let m = &model;
            std::thread::scope(|s| {
                let handles: Vec<_> = batch.chunks(per).map(|c| s.spawn(move || shard(m, c))).collect();
                handles.into_iter().map(|h| h.join().expect("training shard panicked")).collect()
            })
        };
        let mut total: Option<ShardResult> = None;
        for r in results {
            let r = r?;
            total = Some(match total {
                None => r,
                Some(mut acc) => {
                    for (a, b) in acc.grads.iter_mut().zip(&r.grads) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                    acc.loss += r.loss;
                    acc.used += r.used;
                    acc.skipped += r.skipped;
                    acc
                }
            });
        }
        let total = total.expect("at least one shard");
        skipped += total.skipped;
        if total.skipped > 0 {
            warn!("step {step}: skipped {} utterances without a valid alignment", total.skipped);
        }
        if total.used == 0 {
            continue;
        }
        let scale = 1.0 / total.used as f64;
        let mut loss = total.loss * scale;
        let store = model.params_mut();
        store.zero_grad();
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.iter().zip(&total.grads) {
            let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
            store.get_mut(*id).accumulate_grad(&g);
        }
        if t.reg_beta > 0.0 {
            let (value, grad) = {
                let mut tape = Tape::new(store);
                let e = tape.param(embed);
                let r = tape.spread_penalty(e)?;
                let r = tape.scale(r, t.reg_beta)?;
                let g = tape.backward(r)?;
                (tape.scalar(r), g.param(embed).map(<[f64]>::to_vec))
            };
            loss += value;
            if let Some(g) = grad {
                store.get_mut(embed).accumulate_grad(&g);
            }
        }
        let norm = clip_grad_norm(store, CLIP_NORM);
        if !loss.is_finite() || !norm.is_finite() {
            warn!("step {step}: non-finite loss or gradient, restoring last good parameters");
            store.copy_values_from(&last_good)?;
            diverged = true;
            break;
        }
        adam.step(store, lr_at(step, t.peak_lr, t.warmup_steps));
        curve.push((step, loss));
        steps_run = step;
        if step % t.eval_interval == 0 || step == t.total_steps {
            let p = eval_point(&model, step, held_out)?;
            info!("step {step}: loss {loss:.4} held-out ter {:.4}", p.ter);
            if p.spread.is_finite() {
                last_good = model.params().clone();
            }
            evals.push(p);
        }
    }

    let final_eval = evaluate(&model, held_out)?;
    let pn_params = model.pn().param_count(model.params(), "pn");
    let report = ExperimentReport {
        seed: t.seed,
        config: cfg.to_text(),
        curve,
        evals,
        final_eval,
        skipped_utterances: skipped,
        diverged,
        steps_run,
        param_groups: model.params().group_counts(),
        param_total: model.params().param_count(),
        pn_params,
    };
    Ok(TrainOutcome {
        model,
        report,
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}
