use proptest::prelude::*;
use tkit::encoder::{build_attention_mask, eil_seconds, subsampled_len, Encoder, EncoderConfig, MaskSpec};
use tkit::rng::{self, Stream};
use tkit::tensor::{ParamStore, Tensor};

fn small_encoder(blocks: usize, seed: u64) -> (Encoder, ParamStore) {
    let cfg = EncoderConfig {
        num_blocks: blocks,
        model_dim: 8,
        ff_dim: 16,
        heads: 2,
        conv_kernel: 3,
        input_dim: 3,
        max_frames: 64,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&cfg, &mut store, "enc", &mut rng::stream(seed, Stream::Init)).unwrap();
    (enc, store)
}

fn mask_strategy() -> impl Strategy<Value = MaskSpec> {
    prop_oneof![
        Just(MaskSpec::Autoregressive),
        (1usize..4).prop_map(|la| MaskSpec::AutoregressiveLookahead { la }),
        (1usize..6).prop_map(|chunk| MaskSpec::Chunked { chunk }),
        (1usize..5, 1usize..3).prop_map(|(chunk, la)| MaskSpec::ChunkedLookahead { chunk, la }),
    ]
}

#[test]
fn chunked_mask_rows_by_hand() {
    let m = build_attention_mask(5, &MaskSpec::Chunked { chunk: 2 });
    let row = |i: usize| m[i * 5..(i + 1) * 5].to_vec();
    assert_eq!(row(0), [true, true, false, false, false]);
    assert_eq!(row(2), [true, true, true, true, false]);
    assert_eq!(row(4), [true; 5]);
}

#[test]
fn streaming_masks_require_causal_convolution() {
    let cfg = EncoderConfig {
        causal_conv: false,
        ..EncoderConfig::default()
    };
    assert!(cfg.check_mask(&MaskSpec::Chunked { chunk: 2 }).is_err());
    assert!(cfg.check_mask(&MaskSpec::Offline).is_ok());
}

#[test]
fn eil_is_one_frame_for_autoregressive_and_grows_with_chunk() {
    let cfg = EncoderConfig::default();
    let delta = 4.0 * cfg.frame_duration_s;
    assert_eq!(eil_seconds(&MaskSpec::Autoregressive, &cfg).total(), Some(delta));
    assert_eq!(eil_seconds(&MaskSpec::Offline, &cfg).total(), None);
    let mut last = 0.0;
    for chunk in 1..8 {
        for la in 0..3 {
            let spec = MaskSpec::from_parts("chunked", chunk, la).unwrap();
            let e = eil_seconds(&spec, &cfg).total().unwrap();
            if la == 0 {
                assert!(e >= last);
                last = e;
            }
            let wider = MaskSpec::from_parts("chunked", chunk, la + 1).unwrap();
            assert!(eil_seconds(&wider, &cfg).total().unwrap() >= e);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn multiplied_chunks_only_add_visibility(chunk in 1usize..8, k in 1usize..5, frames in 1usize..40) {
        let small = build_attention_mask(frames, &MaskSpec::Chunked { chunk });
        let large = build_attention_mask(frames, &MaskSpec::Chunked { chunk: chunk * k });
        for (s, l) in small.iter().zip(&large) {
            prop_assert!(!s || *l);
        }
    }

    #[test]
    fn frames_outside_the_receptive_field_have_no_effect(
        spec in mask_strategy(),
        seed in 0u64..200,
        raw in 8usize..64,
        blocks in 1usize..3,
        out_frac in 0.0f64..1.0,
        bump in 0.5f64..5.0,
    ) {
        let (enc, store) = small_encoder(blocks, seed);
        let x = Tensor::uniform(&[raw, 3], 1.0, &mut rng::stream(seed, Stream::Corpus)).unwrap();
        let len = subsampled_len(raw);
        let i = ((len as f64 * out_frac) as usize).min(len - 1);
        let limit = spec.receptive_limit(i, len, blocks);
        // Subsampled frame j reads raw frames up to 4j + 3.
        let first_hidden = 4 * limit + 4;
        prop_assume!(first_hidden < raw);
        let base = enc.encode(&store, &x, &spec).unwrap();
        let mut y = x.clone();
        for f in first_hidden..raw {
            for v in &mut y.data_mut()[f * 3..(f + 1) * 3] {
                *v += bump;
            }
        }
        let moved = enc.encode(&store, &y, &spec).unwrap();
        for k in 0..=i {
            let a: Vec<u64> = base[k].iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = moved[k].iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn chunked_stream_matches_offline_bitwise(seed in 0u64..200, raw in 4usize..60, chunk in 1usize..5) {
        let (enc, store) = small_encoder(2, seed);
        let x = Tensor::uniform(&[raw, 3], 1.0, &mut rng::stream(seed, Stream::Corpus)).unwrap();
        let spec = MaskSpec::Chunked { chunk };
        let offline = enc.encode(&store, &x, &spec).unwrap();
        let mut stream = enc.start_stream(&spec).unwrap();
        let mut got = Vec::new();
        for piece in x.data().chunks(4 * chunk * 3) {
            got.extend(enc.push_chunk(&store, &mut stream, piece).unwrap());
        }
        got.extend(enc.finish_stream(&store, &mut stream).unwrap());
        prop_assert_eq!(got, offline);
    }
}
