mod common;

use chansel_core::{Graph, Tensor};
use common::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn conv_output_obeys_floor_formula(
        h in 1usize..12, w in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5, 7]),
        stride in 1usize..4, padding in 0usize..4, c_in in 1usize..3, c_out in 1usize..3, seed in any::<u64>(),
    ) {
        let mut r = test_rng(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(normal_tensor(&[2, c_in, h, w], &mut r));
        let wt = g.constant(normal_tensor(&[c_out, c_in, k, k], &mut r));
        let out = g.conv2d(x, wt, stride, padding);
        if h + 2 * padding < k || w + 2 * padding < k {
            prop_assert!(out.is_err());
        } else {
            let y = out.unwrap();
            let expect = [2, c_out, (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1];
            prop_assert_eq!(g.shape(y), &expect[..]);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let model = tiny_model::<f32>(seed);
        let x = random_batch::<f32>(3, 3, 6, &mut test_rng(seed));
        let run = || {
            let mut m = model.clone();
            let mut g = Graph::new();
            let bind = m.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let mut r = chansel_core::rng::stream(seed, &[1]);
            let v = m.forward_view(&mut g, &bind, xv, chansel_core::Mode::Train,
                &mut chansel_core::backbone::GatePolicy::Relaxed { tau: 1.0, rng: &mut r }).unwrap();
            (g.value(v.p).clone(), m.store.all_stats().to_vec())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn non_finite_values_are_reported() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2], f32::MAX));
    let y = g.scale(x, 10.0);
    assert!(matches!(y, Err(chansel_core::Error::NumericFault { .. })));
    let mut g = Graph::<f32>::new();
    let z = g.leaf(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap(), true);
    assert!(matches!(g.l2_normalize(z), Err(chansel_core::Error::Degenerate { .. })));
    let v = g.leaf(Tensor::zeros(&[3]), true);
    assert!(matches!(g.backward(v), Err(chansel_core::Error::NonScalarLoss { numel: 3 })));
}
