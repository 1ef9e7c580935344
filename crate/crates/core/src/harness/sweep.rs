use std::fmt;
use std::str::FromStr;

use log::info;

use crate::error::{Error, Result};
use crate::pn::PnKind;

use super::config::ExperimentConfig;
use super::corpus::{split_index, Utterance};
use super::train::{evaluate, train, ExperimentReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Train once at full context, restrict the context only when decoding.
    InferenceOnly,
    /// Train a separate model for every context.
    Matched,
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inference_only" | "inference-only" => Ok(SweepMode::InferenceOnly),
            "matched" => Ok(SweepMode::Matched),
            other => Err(Error::config("mode", format!("unknown sweep mode `{other}`"))),
        }
    }
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMode::InferenceOnly => "inference_only",
            SweepMode::Matched => "matched",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextPoint {
    pub kind: PnKind,
    pub context: usize,
    pub ter: f64,
}

#[derive(Clone, Debug)]
pub struct ContextSweep {
    pub mode: SweepMode,
    pub points: Vec<ContextPoint>,
    /// Training reports, one per trained model.
    pub runs: Vec<ExperimentReport>,
}

impl ContextSweep {
    pub fn ter_at(&self, kind: PnKind, context: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.kind == kind && p.context == context)
            .map(|p| p.ter)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("kind\tcontext\tter\n");
        for p in &self.points {
            s.push_str(&format!("{}\t{}\t{:.6}\n", p.kind, p.context, p.ter));
        }
        s
    }
}

fn with_context(base: &ExperimentConfig, c: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    match cfg.model.pn.kind {
        PnKind::NAvg | PnKind::NConcat => cfg.model.pn.ngram_n = c + 1,
        _ => cfg.model.pn.left_context = c,
    }
    cfg
}

/// Token error rate against the number of visible previous tokens.
pub fn sweep_left_context(
    base: &ExperimentConfig,
    corpus: &[Utterance],
    contexts: &[usize],
    mode: SweepMode,
    threads: usize,
) -> Result<ContextSweep> {
    if contexts.is_empty() {
        return Err(Error::config("contexts", "need at least one context"));
    }
    let kind = base.model.pn.kind;
    let held_out = &corpus[split_index(corpus.len())..];
    let mut points = Vec::with_capacity(contexts.len());
    let mut runs = Vec::new();
    match mode {
        SweepMode::InferenceOnly => {
            let mut out = train(base, corpus, threads)?;
            runs.push(out.report);
            for &c in contexts {
                out.model.pn_mut().set_inference_context(c)?;
                let ter = evaluate(&out.model, held_out)?.wer;
                info!("{kind} context {c}: ter {ter:.4}");
                points.push(ContextPoint { kind, context: c, ter });
            }
        }
        SweepMode::Matched => {
            for &c in contexts {
                let out = train(&with_context(base, c), corpus, threads)?;
                points.push(ContextPoint {
                    kind,
                    context: c,
                    ter: out.report.final_ter(),
                });
                runs.push(out.report);
            }
        }
    }
    Ok(ContextSweep { mode, points, runs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegPoint {
    pub beta: f64,
    pub ter: f64,
    pub final_spread: f64,
    /// Largest pairwise embedding distance at every evaluation.
    pub max_row_distances: Vec<f64>,
}

/// One training run per embedding-spread weight.
pub fn sweep_reg(
    base: &ExperimentConfig,
    corpus: &[Utterance],
    betas: &[f64],
    threads: usize,
) -> Result<Vec<RegPoint>> {
    let mut out = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut cfg = base.clone();
        cfg.train.reg_beta = beta;
        let r = train(&cfg, corpus, threads)?.report;
        info!("beta {beta}: ter {:.4} spread {:.4e}", r.final_ter(), r.final_spread());
        out.push(RegPoint {
            beta,
            ter: r.final_ter(),
            final_spread: r.final_spread(),
            max_row_distances: r.evals.iter().map(|e| e.max_row_distance).collect(),
        });
    }
    Ok(out)
}

pub fn reg_tsv(points: &[RegPoint]) -> String {
    let mut s = String::from("beta\tter\tspread\n");
    for p in points {
        s.push_str(&format!("{}\t{:.6}\t{:.6e}\n", p.beta, p.ter, p.final_spread));
    }
    s
}
