use proptest::prelude::*;
use tkit::autodiff::Tape;
use tkit::harness::checks::{gradient_suite, GRAD_TOLERANCE};
use tkit::rng::{self, Stream};
use tkit::tensor::{ParamStore, Tensor};

#[test]
fn gradient_suite_holds_on_five_seeds() {
    for seed in [1, 2, 3, 4, 5] {
        for r in gradient_suite(seed).unwrap() {
            assert!(r.worst < GRAD_TOLERANCE, "seed {seed}: {} worst {:e}", r.name, r.worst);
        }
    }
}

fn store_with(shape: &[usize], seed: u64) -> (ParamStore, tkit::tensor::ParamId) {
    let mut s = ParamStore::new();
    let id = s
        .add("x", Tensor::uniform(shape, 2.0, &mut rng::stream(seed, Stream::Init)).unwrap())
        .unwrap();
    (s, id)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_softmax_rows_normalise(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, shift in -200.0f64..200.0) {
        let (s, id) = store_with(&[rows, cols], seed);
        let mut t = Tape::no_grad(&s);
        let x = t.param(id);
        let c = t.constant(&[cols], vec![shift; cols]).unwrap();
        let x = t.add_row(x, c).unwrap();
        let y = t.log_softmax(x, 1).unwrap();
        for r in t.value(y).chunks(cols) {
            let total: f64 = r.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "{total}");
        }
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (s, id) = store_with(&[3, 4], seed);
        let w = Tensor::uniform(&[4, 2], 1.0, &mut rng::stream(seed, Stream::Corpus)).unwrap();
        let build_f = |t: &mut Tape| {
            let x = t.param(id);
            let wv = t.leaf(w.clone());
            let y = t.matmul(x, wv).unwrap();
            let y = t.tanh(y).unwrap();
            t.sum(y).unwrap()
        };
        let build_g = |t: &mut Tape| {
            let x = t.param(id);
            let y = t.log_softmax(x, 1).unwrap();
            let y = t.mul(y, x).unwrap();
            t.sum(y).unwrap()
        };
        let grad = |which: u8| -> Vec<f64> {
            let mut t = Tape::new(&s);
            let v = match which {
                0 => build_f(&mut t),
                1 => build_g(&mut t),
                _ => {
                    let f = build_f(&mut t);
                    let g = build_g(&mut t);
                    let f = t.scale(f, a).unwrap();
                    let g = t.scale(g, b).unwrap();
                    t.add(f, g).unwrap()
                }
            };
            t.backward(v).unwrap().param(id).unwrap().to_vec()
        };
        let (gf, gg, gc) = (grad(0), grad(1), grad(2));
        for i in 0..gc.len() {
            prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..1000) {
        let run = || {
            let (s, id) = store_with(&[4, 5], seed);
            let mut t = Tape::no_grad(&s);
            let x = t.param(id);
            let xt = t.transpose(x).unwrap();
            let y = t.matmul(x, xt).unwrap();
            let y = t.log_softmax(y, 1).unwrap();
            t.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
