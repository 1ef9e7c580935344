use std::io::Cursor;

use proptest::prelude::*;
use tkit::harness::config::{ExperimentConfig, KEYS};
use tkit::harness::corpus::{
    generate_corpus, prototypes, read_corpus, sample_labels, split_index, write_corpus, SyntheticTaskSpec,
};
use tkit::harness::optim::lr_at;
use tkit::harness::specaug::{spec_augment, SpecAugConfig};
use tkit::rng::{self, Stream};
use tkit::tensor::Tensor;
use tkit::Error;

fn tiny_task(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        corpus_size: 12,
        seed,
        ..SyntheticTaskSpec::default()
    }
}

#[test]
fn same_seed_gives_bitwise_identical_corpus() {
    let a = generate_corpus(&tiny_task(4)).unwrap();
    let b = generate_corpus(&tiny_task(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_corpus(&tiny_task(5)).unwrap());
}

#[test]
fn noiseless_fixed_rate_features_repeat_prototypes() {
    let spec = SyntheticTaskSpec {
        noise_std: 0.0,
        frames_per_token: (3, 3),
        ..tiny_task(2)
    };
    let protos = prototypes(&spec);
    for u in generate_corpus(&spec).unwrap() {
        assert_eq!(u.frames(), 3 * u.labels.len());
        for (f, row) in u.features.data().chunks(spec.feature_dim).enumerate() {
            assert_eq!(row, protos[u.labels[f / 3]].as_slice());
        }
    }
}

#[test]
fn nearest_prototype_recovers_noiseless_labels() {
    let spec = SyntheticTaskSpec {
        noise_std: 0.0,
        ..tiny_task(9)
    };
    let protos = prototypes(&spec);
    for u in generate_corpus(&spec).unwrap() {
        let mut decoded: Vec<usize> = Vec::new();
        for row in u.features.data().chunks(spec.feature_dim) {
            let best = (1..protos.len())
                .min_by(|&a, &b| {
                    let da: f64 = protos[a].iter().zip(row).map(|(p, x)| (p - x).powi(2)).sum();
                    let db: f64 = protos[b].iter().zip(row).map(|(p, x)| (p - x).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            if decoded.last() != Some(&best) {
                decoded.push(best);
            }
        }
        assert_eq!(decoded, u.labels);
    }
}

#[test]
fn corpus_round_trips_through_bytes() {
    let c = generate_corpus(&tiny_task(3)).unwrap();
    let mut buf = Vec::new();
    write_corpus(&c, &mut buf).unwrap();
    assert_eq!(read_corpus(Cursor::new(buf)).unwrap(), c);
}

#[test]
fn held_out_split_is_last_tenth() {
    assert_eq!(split_index(200), 180);
    assert_eq!(split_index(10), 9);
    assert_eq!(split_index(2), 1);
}

#[test]
fn schedule_landmarks() {
    assert_eq!(lr_at(300, 1e-3, 300), 1e-3);
    assert!((lr_at(150, 1e-3, 300) - 5e-4).abs() < 1e-18);
    assert!((lr_at(1200, 1e-3, 300) - 5e-4).abs() < 1e-18);
}

#[test]
fn config_echo_round_trips_and_rejects_unknown_keys() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_text();
    assert_eq!(ExperimentConfig::from_text(&text).unwrap(), cfg);
    assert_eq!(text.lines().count(), KEYS.len());
    assert!(matches!(ExperimentConfig::from_text("pn.colour=red"), Err(Error::Config { .. })));
    assert!(matches!(ExperimentConfig::from_text("pn.kind=gru"), Err(Error::Config { .. })));
    let c = ExperimentConfig::from_text("# comment\n\npn.kind=lstm\nloss.variant=monotonic\n").unwrap();
    assert_eq!(c.model.pn.kind.to_string(), "lstm");
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.cfg", "ls100_char.cfg"] {
        ExperimentConfig::load(&dir.join(name)).unwrap();
    }
    assert_eq!(ExperimentConfig::load(&dir.join("desk.cfg")).unwrap(), ExperimentConfig::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grammar_never_emits_blank_or_repeats(seed in 0u64..5000) {
        let spec = tiny_task(seed);
        let mut r = rng::stream(seed, Stream::Corpus);
        let y = sample_labels(&spec, &mut r);
        prop_assert!(y.len() >= spec.token_len.0 && y.len() <= spec.token_len.1);
        prop_assert!(y[0] >= 5);
        prop_assert!(y.iter().all(|&t| (1..=spec.vocab_size).contains(&t)));
        for i in 1..y.len() {
            prop_assert_ne!(y[i], y[i - 1]);
            if y[i - 1] <= 4 {
                prop_assert!(y[i] >= 5);
            }
            if y[i] == 1 || y[i] == 2 {
                prop_assert_eq!(y[i], 1 + y[i - 1] % 2);
            }
            if y[i] == 3 || y[i] == 4 {
                prop_assert!(i >= 2);
                prop_assert_eq!(y[i], 3 + y[i - 2] % 2);
            }
        }
    }

    #[test]
    fn spec_augment_only_zeroes_within_budget(
        seed in 0u64..5000,
        t in 1usize..40,
        d in 1usize..12,
        tm in 0usize..3, tw in 0usize..6, fm in 0usize..3, fw in 0usize..4,
    ) {
        let cfg = SpecAugConfig { time_masks: tm, max_time_width: tw, feat_masks: fm, max_feat_width: fw };
        let x = Tensor::uniform(&[t, d], 1.0, &mut rng::stream(seed, Stream::Corpus)).unwrap();
        prop_assume!(x.data().iter().all(|&v| v != 0.0));
        let y = spec_augment(&x, &cfg, &mut rng::stream(seed, Stream::Augment));
        let mut masked = 0;
        for (a, b) in x.data().iter().zip(y.data()) {
            if *b == 0.0 { masked += 1 } else { prop_assert_eq!(a, b) }
        }
        let bound = (tm * tw) as f64 / t as f64 + (fm * fw) as f64 / d as f64;
        prop_assert!(masked as f64 / (t * d) as f64 <= bound + 1e-12);
        if cfg.is_identity() {
            prop_assert_eq!(masked, 0);
        }
    }

    #[test]
    fn inverse_sqrt_after_warmup(warmup in 1usize..1000, k in 1usize..50) {
        let peak = 2e-3;
        let step = warmup * k;
        let expect = peak * (1.0 / k as f64).sqrt();
        prop_assert!((lr_at(step, peak, warmup) - expect).abs() <= 1e-15);
    }
}
