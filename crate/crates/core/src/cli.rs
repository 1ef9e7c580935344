//! Command-line entry point.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint;
use crate::error::Result;
use crate::harness::checks::{check_table, oracle_suite};
use crate::harness::config::ExperimentConfig;
use crate::harness::corpus::{generate_corpus, load_corpus, save_corpus, split_index, Utterance};
use crate::harness::report::{
    curve_tsv, metrics_text, param_table_text, pn_param_table, pn_step_table, pn_step_text, write_training_outputs,
};
use crate::harness::sweep::{reg_tsv, sweep_left_context, sweep_reg, SweepMode};
use crate::harness::train::{evaluate, train};
use crate::model::{greedy_decode_offline, greedy_decode_streaming, max_batch_at_unity, rtf_benchmark, TransducerModel};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "tkit", version, about = "Transducer toolkit: train, decode and benchmark on synthetic tasks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (`key=value` lines); built-in desk defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (`task.seed` for `gen`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for gradient computation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Corpus file; generated from the config when absent.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Model checkpoint to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Train a model and write checkpoint, curve and metrics.
    Train,
    /// Greedy-decode the held-out split.
    Decode {
        /// Feed the encoder chunk by chunk instead of whole utterances.
        #[arg(long)]
        streaming: bool,
    },
    /// Token error rate on the held-out split.
    Eval,
    /// Token error rate against prediction-network left context.
    SweepContext {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        contexts: Vec<usize>,
        #[arg(long, default_value = "inference_only")]
        mode: String,
    },
    /// Embedding-spread weight sweep.
    SweepReg {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,10,1000")]
        betas: Vec<f64>,
    },
    /// Real-time factor and per-step prediction-network cost.
    BenchRtf {
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 64)]
        batch_limit: usize,
        #[arg(long, default_value_t = 2000)]
        pn_steps: usize,
    },
    /// Loss oracle and finite-difference gradient suites.
    CheckOracle,
    /// Prediction-network parameter counts.
    ParamReport,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn load_config(c: &Common, gen: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        if gen {
            cfg.task.seed = s;
        } else {
            cfg.train.seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus(c: &Common, cfg: &ExperimentConfig) -> Result<Vec<Utterance>> {
    match &c.corpus {
        Some(p) => load_corpus(p),
        None => generate_corpus(&cfg.task),
    }
}

fn held_out(corpus: &[Utterance]) -> &[Utterance] {
    &corpus[split_index(corpus.len())..]
}

fn load_model(c: &Common, cfg: &ExperimentConfig) -> Result<TransducerModel> {
    let mut model = TransducerModel::new(&cfg.model, cfg.train.seed)?;
    match &c.checkpoint {
        Some(p) => checkpoint::load_into(model.params_mut(), p)?,
        None => log::warn!("no --checkpoint given, using freshly initialised parameters"),
    }
    Ok(model)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<i32> {
    let c = &cli.common;
    let out = &c.out;
    match &cli.command {
        Command::Gen => {
            let cfg = load_config(c, true)?;
            let data = generate_corpus(&cfg.task)?;
            let path = c.corpus.clone().unwrap_or_else(|| out.join("corpus.bin"));
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            save_corpus(&data, &path)?;
            println!("wrote {} utterances to {}", data.len(), path.display());
        }
        Command::Train => {
            let cfg = load_config(c, false)?;
            let data = corpus(c, &cfg)?;
            let result = train(&cfg, &data, c.threads)?;
            write_training_outputs(out, &result)?;
            let r = &result.report;
            println!(
                "steps {} held-out ter {:.4} skipped {} elapsed {:.1}s",
                r.steps_run,
                r.final_ter(),
                r.skipped_utterances,
                result.elapsed_s
            );
            if r.diverged {
                eprintln!("training diverged; last good parameters written");
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::Decode { streaming } => {
            let cfg = load_config(c, false)?;
            let data = corpus(c, &cfg)?;
            let model = load_model(c, &cfg)?;
            let chunk = model.config().mask.chunk_frames().unwrap_or(1) * crate::encoder::SUBSAMPLE;
            let mut text = String::new();
            for u in held_out(&data) {
                let r = if *streaming {
                    let pieces: Vec<&[f64]> = u.features.data().chunks(chunk * u.features.cols()).collect();
                    greedy_decode_streaming(&model, &pieces)?
                } else {
                    greedy_decode_offline(&model, &u.features)?
                };
                let toks: Vec<String> = r.tokens.iter().map(usize::to_string).collect();
                let _ = writeln!(text, "{}\t{}\t{}", u.id, toks.join(" "), r.frames);
            }
            write(out, "decode.tsv", &text)?;
            print!("{text}");
        }
        Command::Eval => {
            let cfg = load_config(c, false)?;
            let data = corpus(c, &cfg)?;
            let model = load_model(c, &cfg)?;
            let w = evaluate(&model, held_out(&data))?;
            let m = metrics_text(&[
                ("wer", format!("{:.6}", w.wer)),
                ("sub", w.substitutions.to_string()),
                ("ins", w.insertions.to_string()),
                ("del", w.deletions.to_string()),
                ("ref_len", w.ref_len.to_string()),
            ]);
            write(out, "metrics.txt", &m)?;
            print!("{m}");
        }
        Command::SweepContext { contexts, mode } => {
            let cfg = load_config(c, false)?;
            let data = corpus(c, &cfg)?;
            let mode: SweepMode = mode.parse()?;
            let sweep = sweep_left_context(&cfg, &data, contexts, mode, c.threads)?;
            for (i, r) in sweep.runs.iter().enumerate() {
                write(out, &format!("curve_{i}.tsv"), &curve_tsv(&r.curve))?;
            }
            let t = sweep.to_tsv();
            write(out, "context_sweep.tsv", &t)?;
            print!("{t}");
            if sweep.runs.iter().any(|r| r.diverged) {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::SweepReg { betas } => {
            let cfg = load_config(c, false)?;
            let data = corpus(c, &cfg)?;
            let points = sweep_reg(&cfg, &data, betas, c.threads)?;
            let t = reg_tsv(&points);
            write(out, "reg_sweep.tsv", &t)?;
            print!("{t}");
        }
        Command::BenchRtf {
            repeats,
            batch_limit,
            pn_steps,
        } => {
            let cfg = load_config(c, false)?;
            let data = corpus(c, &cfg)?;
            let model = load_model(c, &cfg)?;
            let feats: Vec<Tensor> = held_out(&data).iter().map(|u| u.features.clone()).collect();
            let mut r = rtf_benchmark(&model, &feats, *repeats)?;
            r.max_batch_at_unity = max_batch_at_unity(&model, &feats, *batch_limit)?;
            let m = metrics_text(&[
                ("rtf", format!("{:.6}", r.rtf)),
                ("rtf_std", format!("{:.6}", r.rtf_std)),
                ("repeats", r.repeats.to_string()),
                ("audio_seconds", format!("{:.3}", r.audio_seconds)),
                (
                    "max_batch_at_unity",
                    r.max_batch_at_unity.map_or("none".into(), |b| b.to_string()),
                ),
            ]);
            write(out, "metrics.txt", &m)?;
            let steps = pn_step_table(&cfg.model.pn, *pn_steps, *repeats, cfg.train.seed)?;
            let t = pn_step_text(&steps);
            write(out, "pn_steps.tsv", &t)?;
            print!("{m}{t}");
        }
        Command::CheckOracle => {
            let seed = c.seed.unwrap_or(0);
            info!("running oracle and gradient suites with seed {seed}");
            let results = oracle_suite(seed)?;
            let t = check_table(&results);
            print!("{t}");
            if results.iter().any(|r| !r.passed()) {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::ParamReport => {
            let cfg = load_config(c, false)?;
            let rows = pn_param_table(&cfg.model.pn)?;
            let t = param_table_text(&rows);
            print!("{t}");
        }
    }
    Ok(EXIT_OK)
}

