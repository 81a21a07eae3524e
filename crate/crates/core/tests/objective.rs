mod common;

use chansel_core::backbone::GatePolicy;
use chansel_core::model::Model;
use chansel_core::simsiam::{simsiam_loss, symmetric_loss};
use chansel_core::{Graph, Mode, Tensor, Var};
use common::*;
use proptest::prelude::*;

type Loss = fn(&mut Graph<f64>, Var, Var, Var, Var) -> chansel_core::Result<Var>;

/// Builds the two-view objective with the target branch (`z`) computed from a
/// separate binding of the same parameters; returns encoder-parameter
/// gradients reaching each binding.
fn branch_grads(model: &Model<f64>, x1: &Tensor<f64>, x2: &Tensor<f64>, loss: Loss, online: bool, target: bool) -> (f64, Vec<Vec<f64>>) {
    let mut m = model.clone();
    let mut g = Graph::new();
    let bind_on = m.bind(&mut g, online);
    let bind_tg = m.bind(&mut g, target);
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let pol = || GatePolicy::Soft { tau: 1.0 };
    let v1 = m.forward_view(&mut g, &bind_on, a, Mode::Train, &mut pol()).unwrap();
    let v2 = m.forward_view(&mut g, &bind_on, b, Mode::Train, &mut pol()).unwrap();
    let (e1, _) = m.encode(&mut g, &bind_tg, a, Mode::Train, &mut pol()).unwrap();
    let z1 = m.heads.project(&mut g, &bind_tg, &mut m.store, e1, Mode::Train).unwrap();
    let (e2, _) = m.encode(&mut g, &bind_tg, b, Mode::Train, &mut pol()).unwrap();
    let z2 = m.heads.project(&mut g, &bind_tg, &mut m.store, e2, Mode::Train).unwrap();
    assert_eq!(g.value(z1), g.value(v1.z));
    let l = loss(&mut g, v1.p, v2.p, z1, z2).unwrap();
    g.backward(l).unwrap();
    let vars = if target { bind_tg.vars() } else { bind_on.vars() };
    let grads = model
        .store
        .params()
        .iter()
        .zip(vars)
        .filter(|(p, _)| !p.name.starts_with("projector") && !p.name.starts_with("predictor"))
        .map(|(p, v)| g.grad_data(*v).map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
        .collect();
    (g.value(l).item().unwrap(), grads)
}

#[test]
fn stop_gradient_blocks_the_target_branch_exactly() {
    for seed in 0..3 {
        let mut r = test_rng(40 + seed);
        let model = tiny_model::<f64>(seed);
        let x1 = random_batch::<f64>(4, 3, 6, &mut r);
        let x2 = random_batch::<f64>(4, 3, 6, &mut r);
        let (l_sg, with_sg) = branch_grads(&model, &x1, &x2, simsiam_loss, false, true);
        assert!(with_sg.iter().flatten().all(|&v| v == 0.0));
        let (l_plain, without) = branch_grads(&model, &x1, &x2, symmetric_loss, false, true);
        assert_eq!(l_sg, l_plain);
        assert!(without.iter().flatten().any(|&v| v.abs() > 1e-8));
        let (_, online) = branch_grads(&model, &x1, &x2, simsiam_loss, true, false);
        assert!(online.iter().flatten().any(|&v| v.abs() > 1e-8));
    }
}

#[test]
fn shared_binding_gradient_equals_online_branch_only() {
    let mut r = test_rng(77);
    let model = tiny_model::<f64>(5);
    let x1 = random_batch::<f64>(4, 3, 6, &mut r);
    let x2 = random_batch::<f64>(4, 3, 6, &mut r);
    let (_, online) = branch_grads(&model, &x1, &x2, simsiam_loss, true, false);

    let mut m = model.clone();
    let mut g = Graph::new();
    let bind = m.bind(&mut g, true);
    let a = g.constant(x1);
    let b = g.constant(x2);
    let v1 = m.forward_view(&mut g, &bind, a, Mode::Train, &mut GatePolicy::Soft { tau: 1.0 }).unwrap();
    let v2 = m.forward_view(&mut g, &bind, b, Mode::Train, &mut GatePolicy::Soft { tau: 1.0 }).unwrap();
    let l = simsiam_loss(&mut g, v1.p, v2.p, v1.z, v2.z).unwrap();
    g.backward(l).unwrap();
    let shared: Vec<Vec<f64>> = model
        .store
        .params()
        .iter()
        .zip(bind.vars())
        .filter(|(p, _)| !p.name.starts_with("projector") && !p.name.starts_with("predictor"))
        .map(|(p, v)| g.grad_data(*v).map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
        .collect();
    assert_eq!(shared, online);
}

fn loss_value(p1: &Tensor<f64>, p2: &Tensor<f64>, z1: &Tensor<f64>, z2: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let v: Vec<Var> = [p1, p2, z1, z2].iter().map(|t| g.constant((*t).clone())).collect();
    let l = simsiam_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
    g.value(l).item().unwrap()
}

fn rows(b: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-5.0f64..5.0, b * d)
        .prop_filter("non-degenerate rows", move |v| v.chunks(d).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6))
        .prop_map(move |v| Tensor::new(&[b, d], v).unwrap())
}

proptest! {
    #[test]
    fn loss_is_bounded_symmetric_and_scale_free(
        (p1, p2, z1, z2) in (1usize..4, 1usize..6).prop_flat_map(|(b, d)| (rows(b, d), rows(b, d), rows(b, d), rows(b, d))),
        c in 0.01f64..100.0,
    ) {
        let l = loss_value(&p1, &p2, &z1, &z2);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        prop_assert!((loss_value(&p2, &p1, &z2, &z1) - l).abs() < 1e-12);
        let s = |t: &Tensor<f64>| t.map(|v| v * c);
        prop_assert!((loss_value(&s(&p1), &s(&p2), &z1, &z2) - l).abs() < 1e-12);
        prop_assert!((loss_value(&p1, &p2, &s(&z1), &s(&z2)) - l).abs() < 1e-12);
    }
}

#[test]
fn identical_directions_reach_the_minimum() {
    let p = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
    assert!((loss_value(&p, &p, &p.map(|v| 3.0 * v), &p) + 1.0).abs() < 1e-12);
}
