//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Training criteria share runs: the desk N-Concat model trained for
//! convergence also feeds streaming equivalence, the context sweep and the
//! beta = 0 point of the regularisation sweep.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use tkit::autodiff::Tape;
use tkit::harness::checks::{gradient_suite, loss_oracle_check, CheckResult};
use tkit::harness::config::ExperimentConfig;
use tkit::harness::corpus::{generate_corpus, split_index, Utterance};
use tkit::harness::report::{pn_param_table, pn_step_table};
use tkit::harness::train::{evaluate, train, TrainOutcome};
use tkit::loss::AlignmentVariant;
use tkit::model::{greedy_decode_offline, greedy_decode_streaming};
use tkit::pn::{n_concat_mix, pn_init, PnConfig, PnKind, PredictionNetwork};
use tkit::rng::{self, Stream};
use tkit::tensor::{ParamStore, Tensor};

const SEED: u64 = 7;
const MAX_STEPS: usize = 3000;
const MAX_TRAIN_S: f64 = 600.0;
const TER_LIMIT: f64 = 0.05;
const EXTREME_BETA: f64 = 1000.0;

struct Line {
    id: usize,
    name: &'static str,
    ok: bool,
    detail: String,
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::load(&configs().join("desk.cfg")).expect("desk.cfg")
}

/// Trained desk models keyed by `(kind, variant)`, trained on first use.
struct Runs {
    corpus: Vec<Utterance>,
    done: HashMap<(PnKind, AlignmentVariant), TrainOutcome>,
}

impl Runs {
    fn get(&mut self, kind: PnKind, variant: AlignmentVariant) -> &TrainOutcome {
        let corpus = &self.corpus;
        self.done.entry((kind, variant)).or_insert_with(|| {
            let mut cfg = desk();
            cfg.model.pn.kind = kind;
            cfg.model.variant = variant;
            train(&cfg, corpus, 1).expect("training run")
        })
    }

    fn held_out(&self) -> &[Utterance] {
        &self.corpus[split_index(self.corpus.len())..]
    }
}

fn worst(results: &[CheckResult]) -> String {
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let w = results.iter().map(|r| r.worst / r.tolerance).fold(0.0, f64::max);
    if failed.is_empty() {
        format!("worst/tolerance {w:.3}")
    } else {
        format!("failed: {}", failed.join(", "))
    }
}

fn loss_oracle() -> Line {
    let t = Instant::now();
    let results: Vec<_> = [AlignmentVariant::Original, AlignmentVariant::Monotonic]
        .into_iter()
        .map(|v| loss_oracle_check(v, SEED).expect("oracle check"))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let cases: usize = results.iter().map(|r| r.cases).sum();
    Line {
        id: 1,
        name: "loss oracle equivalence",
        ok: results.iter().all(CheckResult::passed) && secs < 30.0,
        detail: format!("{cases} lattices, {}, {secs:.1}s", worst(&results)),
    }
}

fn gradients() -> Line {
    let t = Instant::now();
    let results = gradient_suite(SEED).expect("gradient suite");
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: 2,
        name: "gradient suite",
        ok: results.iter().all(CheckResult::passed) && secs < 120.0,
        detail: format!("{} checks, {}, {secs:.1}s", results.len(), worst(&results)),
    }
}

fn states(pn: &PredictionNetwork, store: &ParamStore, tokens: &[usize]) -> Vec<f64> {
    let mut t = Tape::no_grad(store);
    let s = pn.forward(&mut t, tokens).expect("pn forward");
    t.value(s).to_vec()
}

fn random_history(r: &mut tkit::rng::Rng, vocab: usize, len: std::ops::Range<usize>) -> Vec<usize> {
    let n = r.random_range(len);
    (0..n).map(|_| r.random_range(1..=vocab)).collect()
}

fn collapse() -> Line {
    let mut r = rng::stream(SEED, Stream::Corpus);
    let base = PnConfig {
        heads: 1,
        ngram_n: 5,
        ..PnConfig::new(PnKind::NAvg, 12, 16)
    };
    let (avg, avg_store) = pn_init(&base, SEED).expect("navg");
    let (cat, mut cat_store) = pn_init(&PnConfig { kind: PnKind::NConcat, ..base.clone() }, SEED + 1).expect("nconcat");
    cat_store.copy_values_from(&avg_store).expect("shared parameters");
    let mut gap: f64 = 0.0;
    for _ in 0..100 {
        let h = random_history(&mut r, base.vocab_size, 0..12);
        let (a, c) = (states(&avg, &avg_store, &h), states(&cat, &cat_store, &h));
        gap = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(gap, f64::max);
    }

    let (heads, d, ctx) = (4, 16, 4);
    let dh = d / heads;
    let mut leaks = 0;
    for _ in 0..100 {
        let v = Tensor::uniform(&[ctx, d], 1.0, &mut r).expect("v");
        let q = Tensor::uniform(&[ctx, d], 1.0, &mut r).expect("q");
        let before = n_concat_mix(&v, &q, heads).expect("mix");
        let head = r.random_range(0..heads);
        let mut moved = v.clone();
        for row in moved.data_mut().chunks_mut(d) {
            for x in &mut row[head * dh..(head + 1) * dh] {
                *x += r.random_range(-2.0..2.0);
            }
        }
        let after = n_concat_mix(&moved, &q, heads).expect("mix");
        leaks += (0..d)
            .filter(|&j| j / dh != head && before[j].to_bits() != after[j].to_bits())
            .count();
    }
    Line {
        id: 3,
        name: "n-concat / n-avg collapse and split isolation",
        ok: gap <= 1e-12 && leaks == 0,
        detail: format!("H=1 max gap {gap:.1e} over 100 histories, H=4 leaked entries {leaks}"),
    }
}

fn truncation() -> Line {
    let mut r = rng::stream(SEED + 1, Stream::Corpus);
    let mut broken = Vec::new();
    for case in 0..10 {
        for kind in [PnKind::NAvg, PnKind::NConcat, PnKind::Transformer] {
            let heads = [1, 2, 4][r.random_range(0..3)];
            let d = heads * r.random_range(1..4);
            let n = r.random_range(2..7);
            let cfg = PnConfig {
                heads,
                ngram_n: n,
                left_context: n - 1,
                ff_dim: 2 * d,
                ..PnConfig::new(kind, 6, d)
            };
            let ctx = cfg.context().expect("bounded context");
            let (pn, store) = pn_init(&cfg, SEED + case).expect("pn");
            let recent = random_history(&mut r, 6, ctx..ctx + 4);
            let mut a = random_history(&mut r, 6, 1..6);
            let mut b = random_history(&mut r, 6, 1..6);
            a.extend(&recent);
            b.extend(&recent);
            let (sa, sb) = (states(&pn, &store, &a), states(&pn, &store, &b));
            let tail = |s: &[f64]| s[s.len() - d..].iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if tail(&sa) != tail(&sb) {
                broken.push(format!("{kind} case {case}"));
            }
        }
    }
    Line {
        id: 4,
        name: "context truncation",
        ok: broken.is_empty(),
        detail: if broken.is_empty() {
            "10 configs x navg/nconcat/transformer bitwise invariant".into()
        } else {
            broken.join(", ")
        },
    }
}

fn param_counts() -> Line {
    let cfg = ExperimentConfig::load(&configs().join("ls100_char.cfg")).expect("ls100_char.cfg");
    let rows = pn_param_table(&cfg.model.pn).expect("param table");
    let count = |k: PnKind| rows.iter().find(|r| r.kind == k).map_or(0, |r| r.total) as f64 / 1e6;
    let bands = [
        (PnKind::Lstm, 0.50, 0.65),
        (PnKind::Transformer, 0.8, 1.0),
        (PnKind::NAvg, 0.08, 0.10),
        (PnKind::NConcat, 0.06, 0.09),
    ];
    let in_band = bands.iter().all(|&(k, lo, hi)| (lo..=hi).contains(&count(k)));
    let ratio = count(PnKind::Lstm) / count(PnKind::NConcat);
    let listed: Vec<_> = bands.iter().map(|&(k, _, _)| format!("{k} {:.3}M", count(k))).collect();
    Line {
        id: 5,
        name: "parameter counts",
        ok: in_band && ratio >= 5.0,
        detail: format!("{}, lstm/nconcat {ratio:.2}x", listed.join(", ")),
    }
}

fn streaming(runs: &mut Runs) -> Line {
    let mut cfg = desk();
    cfg.task.seed += 1000;
    cfg.task.corpus_size = 100;
    let utts = generate_corpus(&cfg.task).expect("corpus");
    let model = &runs.get(PnKind::NConcat, AlignmentVariant::Original).model;
    let chunk = match model.config().mask {
        tkit::encoder::MaskSpec::Chunked { chunk } => chunk,
        other => panic!("desk mask must be chunked, got {other:?}"),
    };
    let d = cfg.task.feature_dim;
    let mut mismatched = 0;
    let mut tokens = 0;
    for u in &utts {
        let offline = greedy_decode_offline(model, &u.features).expect("offline");
        let pieces: Vec<&[f64]> = u.features.data().chunks(4 * chunk * d).collect();
        let online = greedy_decode_streaming(model, &pieces).expect("streaming");
        tokens += offline.tokens.len();
        if online.tokens != offline.tokens {
            mismatched += 1;
        }
    }
    Line {
        id: 6,
        name: "streaming equivalence",
        ok: mismatched == 0 && tokens > 0,
        detail: format!("{} utterances, {tokens} tokens, {mismatched} mismatched", utts.len()),
    }
}

fn convergence(runs: &mut Runs) -> Line {
    let mut jobs: Vec<_> = PnKind::ALL.iter().map(|&k| (k, AlignmentVariant::Original)).collect();
    jobs.push((PnKind::NConcat, AlignmentVariant::Monotonic));
    jobs.push((PnKind::Lstm, AlignmentVariant::Monotonic));
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, variant) in jobs {
        let out = runs.get(kind, variant);
        let r = &out.report;
        let mut good = r.final_ter() < TER_LIMIT && r.steps_run <= MAX_STEPS && out.elapsed_s < MAX_TRAIN_S;
        let mut note = format!("{kind}/{variant} {:.2}% {:.0}s", 100.0 * r.final_ter(), out.elapsed_s);
        if variant == AlignmentVariant::Monotonic {
            let (first, last) = (r.curve[0].1, r.curve.last().expect("curve").1);
            good &= first >= 10.0 * last;
            note.push_str(&format!(" loss x{:.0}", first / last));
        }
        if !good {
            note.push_str(" FAIL");
        }
        ok &= good;
        parts.push(note);
    }
    Line {
        id: 7,
        name: "desk convergence",
        ok,
        detail: parts.join("; "),
    }
}

fn context_plateau(runs: &mut Runs) -> Line {
    runs.get(PnKind::NConcat, AlignmentVariant::Original);
    let held: Vec<Utterance> = runs.held_out().to_vec();
    let out = runs.done.get_mut(&(PnKind::NConcat, AlignmentVariant::Original)).expect("trained");
    let max = out.model.pn().config().context().expect("bounded");
    let mut ter = Vec::with_capacity(max);
    for c in 1..=max {
        out.model.pn_mut().set_inference_context(c).expect("context");
        ter.push(evaluate(&out.model, &held).expect("eval").wer);
    }
    out.model.pn_mut().set_inference_context(max).expect("context");
    let at = |c: usize| ter[c - 1];
    let listed: Vec<_> = ter.iter().enumerate().map(|(i, t)| format!("c{} {:.2}%", i + 1, 100.0 * t)).collect();
    Line {
        id: 8,
        name: "left-context plateau",
        ok: max >= 4 && (at(4) - at(max)).abs() <= 0.01 && at(1) > at(2),
        detail: listed.join(", "),
    }
}

fn regularisation(runs: &mut Runs) -> Line {
    let corpus = runs.corpus.clone();
    let zero = &runs.get(PnKind::NConcat, AlignmentVariant::Original).report;
    let mut points = vec![(0.0, zero.final_ter(), zero.final_spread())];
    for beta in [0.1, 10.0, EXTREME_BETA] {
        let mut cfg = desk();
        cfg.train.reg_beta = beta;
        let r = train(&cfg, &corpus, 1).expect("training run").report;
        points.push((beta, r.final_ter(), r.final_spread()));
    }
    let decreasing = points.windows(2).all(|w| w[1].2 < w[0].2);
    let worse = points[3].1 > points[0].1;
    let listed: Vec<_> = points
        .iter()
        .map(|(b, t, s)| format!("beta {b}: R {s:.3e} ter {:.2}%", 100.0 * t))
        .collect();
    Line {
        id: 9,
        name: "regularisation trend",
        ok: decreasing && worse,
        detail: listed.join("; "),
    }
}

fn step_cost() -> Line {
    let base = desk().model.pn;
    let rows = pn_step_table(&base, 3000, 3, SEED).expect("step table");
    let cost = |k: PnKind| &rows.iter().find(|r| r.0 == k).expect("kind").1;
    let ok = (0..3).all(|i| {
        let (nc, na) = (cost(PnKind::NConcat)[i], cost(PnKind::NAvg)[i]);
        nc <= na && na < cost(PnKind::Transformer)[i].min(cost(PnKind::Conformer)[i])
    });
    let listed: Vec<_> = [PnKind::NConcat, PnKind::NAvg, PnKind::Transformer, PnKind::Conformer]
        .iter()
        .map(|&k| {
            let us: Vec<_> = cost(k).iter().map(|c| format!("{:.1}", c * 1e6)).collect();
            format!("{k} [{}]us", us.join(" "))
        })
        .collect();
    Line {
        id: 10,
        name: "pn step cost ordering",
        ok,
        detail: listed.join(", "),
    }
}

fn report(line: &Line) -> bool {
    let tag = if line.ok { "PASS" } else { "FAIL" };
    println!("criterion {:>2} {tag}  {}: {}", line.id, line.name, line.detail);
    line.ok
}

fn main() {
    let t = Instant::now();
    let mut runs = Runs {
        corpus: generate_corpus(&desk().task).expect("desk corpus"),
        done: HashMap::new(),
    };
    let mut ok = true;
    ok &= report(&loss_oracle());
    ok &= report(&gradients());
    ok &= report(&collapse());
    ok &= report(&truncation());
    ok &= report(&param_counts());
    ok &= report(&streaming(&mut runs));
    ok &= report(&convergence(&mut runs));
    ok &= report(&context_plateau(&mut runs));
    ok &= report(&regularisation(&mut runs));
    ok &= report(&step_cost());
    println!("acceptance: {} in {:.0}s", if ok { "all passed" } else { "FAILED" }, t.elapsed().as_secs_f64());
    if !ok {
        std::process::exit(1);
    }
}
