use proptest::prelude::*;
use tkit::encoder::{subsampled_len, EncoderConfig, MaskSpec};
use tkit::loss::AlignmentVariant;
use tkit::model::{
    edit_counts, greedy_decode_offline, greedy_decode_streaming, word_error_rate, ModelConfig, TransducerModel,
};
use tkit::pn::{PnConfig, PnKind};
use tkit::rng::{self, Stream};
use tkit::tensor::Tensor;

fn model(kind: PnKind, variant: AlignmentVariant, cap: usize, seed: u64) -> TransducerModel {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            num_blocks: 1,
            model_dim: 8,
            ff_dim: 8,
            heads: 2,
            conv_kernel: 3,
            input_dim: 3,
            max_frames: 32,
            ..EncoderConfig::default()
        },
        pn: PnConfig {
            heads: 2,
            ngram_n: 3,
            left_context: 2,
            ff_dim: 8,
            ..PnConfig::new(kind, 4, 6)
        },
        joiner_dim: 6,
        variant,
        mask: MaskSpec::Chunked { chunk: 2 },
        max_symbols_per_frame: cap,
    };
    TransducerModel::new(&cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decode_structure(
        kind_ix in 0usize..6,
        mono in any::<bool>(),
        cap in 1usize..4,
        seed in 0u64..300,
        raw in 4usize..48,
        scale in 0.5f64..4.0,
    ) {
        let variant = if mono { AlignmentVariant::Monotonic } else { AlignmentVariant::Original };
        let m = model(PnKind::ALL[kind_ix], variant, cap, seed);
        let x = Tensor::uniform(&[raw, 3], scale, &mut rng::stream(seed, Stream::Corpus)).unwrap();
        let r = greedy_decode_offline(&m, &x).unwrap();
        let frames = subsampled_len(raw);
        prop_assert_eq!(r.frames, frames);
        prop_assert_eq!(r.tokens.len(), r.frame_of_emission.len());
        prop_assert!(r.frame_of_emission.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.tokens.iter().all(|&t| (1..=4).contains(&t)));
        let bound = if mono { frames } else { frames * cap };
        prop_assert!(r.tokens.len() <= bound);
        prop_assert_eq!(r.symbols_per_frame.iter().sum::<usize>(), frames);
        let emitted: usize = r.symbols_per_frame.iter().enumerate().map(|(n, c)| n * c).sum();
        prop_assert_eq!(emitted, r.tokens.len());
    }

    #[test]
    fn streaming_decode_equals_offline(kind_ix in 0usize..6, seed in 0u64..300, raw in 4usize..48) {
        let m = model(PnKind::ALL[kind_ix], AlignmentVariant::Original, 3, seed);
        let x = Tensor::uniform(&[raw, 3], 2.0, &mut rng::stream(seed, Stream::Corpus)).unwrap();
        let pieces: Vec<&[f64]> = x.data().chunks(8 * 3).collect();
        let s = greedy_decode_streaming(&m, &pieces).unwrap();
        let o = greedy_decode_offline(&m, &x).unwrap();
        prop_assert_eq!(s, o);
    }

    #[test]
    fn wer_is_permutation_invariant_and_aggregates(
        pairs in prop::collection::vec(
            (prop::collection::vec(1usize..5, 1..8), prop::collection::vec(1usize..5, 0..8)),
            1..6,
        ),
        rot in 0usize..6,
    ) {
        let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let hyps: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
        let w = word_error_rate(&refs, &hyps).unwrap();
        let k = rot % refs.len();
        let (mut r2, mut h2) = (refs.clone(), hyps.clone());
        r2.rotate_left(k);
        h2.rotate_left(k);
        prop_assert_eq!(word_error_rate(&r2, &h2).unwrap(), w.clone());
        let errors: usize = refs.iter().zip(&hyps).map(|(r, h)| edit_counts(r, h).errors()).sum();
        let n: usize = refs.iter().map(Vec::len).sum();
        prop_assert_eq!(w.ref_len, n);
        prop_assert!((w.wer - errors as f64 / n as f64).abs() < 1e-15);
        prop_assert_eq!(word_error_rate(&refs, &refs).unwrap().wer, 0.0);
    }
}

#[test]
fn edit_counts_by_hand() {
    let c = edit_counts(&["a", "b", "c", "d"], &["a", "x", "c"]);
    assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 1));
    let c = edit_counts::<u8>(&[], &[1, 2]);
    assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 2, 0));
    assert!(word_error_rate::<usize>(&[], &[]).is_err());
}
