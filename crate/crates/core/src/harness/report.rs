use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint;
use crate::error::Result;
use crate::model::pn_step_cost;
use crate::pn::{pn_init, PnConfig, PnKind};
use crate::rng::{self, Stream};

use super::train::TrainOutcome;

/// `key=value` lines.
pub fn metrics_text(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn curve_tsv(curve: &[(usize, f64)]) -> String {
    let mut s = String::new();
    for (step, loss) in curve {
        let _ = writeln!(s, "{step}\t{loss}");
    }
    s
}

/// Writes checkpoint, loss curve, evaluation trace, metrics and config echo.
pub fn write_training_outputs(dir: &Path, out: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let r = &out.report;
    checkpoint::save(out.model.params(), &dir.join("model.ckpt"))?;
    fs::write(dir.join("curve.tsv"), curve_tsv(&r.curve))?;
    let mut evals = String::from("step\tter\tspread\tmax_row_distance\n");
    for e in &r.evals {
        let _ = writeln!(evals, "{}\t{}\t{}\t{}", e.step, e.ter, e.spread, e.max_row_distance);
    }
    fs::write(dir.join("evals.tsv"), evals)?;
    let e = &r.final_eval;
    let metrics = metrics_text(&[
        ("wer", format!("{:.6}", e.wer)),
        ("sub", e.substitutions.to_string()),
        ("ins", e.insertions.to_string()),
        ("del", e.deletions.to_string()),
        ("final_loss", r.curve.last().map_or("nan".into(), |c| c.1.to_string())),
        ("steps", r.steps_run.to_string()),
        ("skipped", r.skipped_utterances.to_string()),
        ("diverged", r.diverged.to_string()),
        ("params", r.param_total.to_string()),
        ("pn_params", r.pn_params.to_string()),
        ("seed", r.seed.to_string()),
    ]);
    fs::write(dir.join("metrics.txt"), metrics)?;
    fs::write(dir.join("config.cfg"), &r.config)?;
    let mut groups = String::new();
    for (g, n) in &r.param_groups {
        let _ = writeln!(groups, "{g}\t{n}");
    }
    fs::write(dir.join("params.tsv"), groups)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnParamRow {
    pub kind: PnKind,
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}

/// Parameter counts of every prediction network built with the dimensions of `base`.
pub fn pn_param_table(base: &PnConfig) -> Result<Vec<PnParamRow>> {
    PnKind::ALL
        .iter()
        .map(|&kind| {
            let cfg = PnConfig { kind, ..base.clone() };
            let (pn, store) = pn_init(&cfg, 0)?;
            Ok(PnParamRow {
                kind,
                total: pn.param_count(&store, "pn"),
                groups: pn.param_report(&store, "pn"),
            })
        })
        .collect()
}

pub fn param_table_text(rows: &[PnParamRow]) -> String {
    let lstm = rows.iter().find(|r| r.kind == PnKind::Lstm).map(|r| r.total);
    let mut s = format!("{:<12} {:>10} {:>8} {:>10}\n", "pn", "params", "M", "lstm/x");
    for r in rows {
        let ratio = lstm.map_or(String::from("-"), |l| format!("{:.2}", l as f64 / r.total as f64));
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>8.3} {:>10}",
            r.kind.to_string(),
            r.total,
            r.total as f64 / 1e6,
            ratio
        );
        for (g, n) in &r.groups {
            let _ = writeln!(s, "  {g:<22} {n:>10}");
        }
    }
    s
}

/// Passes per reported value; the fastest one is kept.
const STEP_PASSES: usize = 15;

/// Per-step prediction-network cost for every kind at the dimensions of
/// `base`, folding the same random token sequence; one value per repeat.
/// Each pass visits the kinds in a fresh random order so periodic load
/// does not keep landing on the same kind.
pub fn pn_step_table(base: &PnConfig, steps: usize, repeats: usize, seed: u64) -> Result<Vec<(PnKind, Vec<f64>)>> {
    let mut r = rng::stream(seed, Stream::Corpus);
    let tokens: Vec<usize> = (0..steps).map(|_| r.random_range(1..=base.vocab_size)).collect();
    let nets = PnKind::ALL
        .iter()
        .map(|&kind| pn_init(&PnConfig { kind, ..base.clone() }, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut shuffle = rng::stream(seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..nets.len()).collect();
    let mut rows: Vec<(PnKind, Vec<f64>)> = PnKind::ALL.iter().map(|&k| (k, Vec::with_capacity(repeats))).collect();
    for _ in 0..repeats {
        let mut best = vec![f64::INFINITY; nets.len()];
        for _ in 0..STEP_PASSES {
            order.shuffle(&mut shuffle);
            for &i in &order {
                let (pn, store) = &nets[i];
                best[i] = best[i].min(pn_step_cost(pn, store, &tokens, 1)?[0]);
            }
        }
        for (row, b) in rows.iter_mut().zip(best) {
            row.1.push(b);
        }
    }
    Ok(rows)
}

pub fn pn_step_text(rows: &[(PnKind, Vec<f64>)]) -> String {
    let mut s = String::from("pn\trepeat\tus_per_step\n");
    for (kind, costs) in rows {
        for (i, c) in costs.iter().enumerate() {
            let _ = writeln!(s, "{kind}\t{i}\t{:.3}", c * 1e6);
        }
    }
    s
}
