mod common;

use chansel_core::backbone::GatePolicy;
use chansel_core::eval::encode_eval;
use chansel_core::model::Model;
use chansel_core::sparse::{measure_budget, SparseEngine};
use chansel_core::{Graph, Mode, Tensor};
use common::*;
use rand::Rng as _;

fn mixed_gates(model: &mut Model<f32>, rng: &mut chansel_core::rng::Rng, spread: f64) {
    let ids: Vec<_> = model.backbone.blocks.iter().map(|b| b.gate.b1).collect();
    for id in ids {
        model.store.param_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-spread..spread) as f32);
    }
}

fn forced_dense(model: &mut Model<f32>, x: &Tensor<f32>, masks: &[Tensor<f32>]) -> Tensor<f32> {
    let mut g = Graph::new();
    let bind = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (e, _) = model.encode(&mut g, &bind, xv, Mode::Eval, &mut GatePolicy::Forced(masks)).unwrap();
    g.value(e).clone()
}

#[test]
fn all_active_sparse_run_is_bitwise_dense() {
    for seed in 0..3 {
        let mut r = test_rng(500 + seed);
        let mut model = tiny_model::<f32>(seed);
        perturb_model(&mut model, &mut r);
        let x = random_batch::<f32>(5, 3, 6, &mut r);
        let (dense, masks) = encode_eval(&mut model, &x).unwrap();
        assert!(masks.iter().all(|m| m.data().iter().all(|&v| v == 1.0)));
        let (sparse, stats, _) = SparseEngine::new(&model).sparse_forward(&x).unwrap();
        assert_eq!(sparse.data(), dense.data());
        for b in &stats.blocks {
            assert!(b.macs.iter().all(|&m| m == b.dense + b.overhead));
        }
    }
}

#[test]
fn sparse_matches_masked_dense_and_ledger() {
    for seed in 0..8 {
        let mut r = test_rng(600 + seed);
        let mut model = tiny_model::<f32>(seed);
        perturb_model(&mut model, &mut r);
        mixed_gates(&mut model, &mut r, 1.5);
        if seed == 7 {
            let b = model.backbone.blocks[0].gate.b1;
            model.store.param_mut(b).value.data_mut().fill(-1e3);
        }
        let x = random_batch::<f32>(6, 3, 6, &mut r);
        let engine = SparseEngine::new(&model);
        let (sparse, stats, traces) = engine.sparse_forward(&x).unwrap();

        let (dense, thr_masks) = encode_eval(&mut model.clone(), &x).unwrap();
        let masks: Vec<Tensor<f32>> = (0..model.backbone.blocks.len())
            .map(|l| {
                let c = model.backbone.blocks[l].c_out;
                let data = traces.iter().flat_map(|t| t.mask(l, c)).collect();
                Tensor::new(&[traces.len(), c], data).unwrap()
            })
            .collect();
        assert_eq!(masks, thr_masks);
        let forced = forced_dense(&mut model.clone(), &x, &masks);
        assert!(sparse.max_abs_diff(&forced).unwrap() < 1e-5);
        assert!(sparse.max_abs_diff(&dense).unwrap() < 1e-5);

        let geoms = model.geometries();
        for (l, (b, ge)) in stats.blocks.iter().zip(&geoms).enumerate() {
            for (i, t) in traces.iter().enumerate() {
                assert_eq!(b.macs[i], ge.dynamic_macs(t.active[l].len()));
                assert_eq!(t.gate_macs[l], ge.gate_overhead());
            }
        }
        let on: usize = stats.blocks.iter().map(|b| b.active.iter().sum::<usize>()).sum();
        let total: usize = stats.blocks.iter().map(|b| b.channels * b.active.len()).sum();
        assert!(seed == 0 || (on > 0 && on < total), "seed {seed}: degenerate gate pattern");
    }
}

#[test]
fn sparse_forward_is_deterministic() {
    let mut r = test_rng(9);
    let mut model = tiny_model::<f32>(2);
    perturb_model(&mut model, &mut r);
    mixed_gates(&mut model, &mut r, 1.0);
    let x = random_batch::<f32>(4, 3, 6, &mut r);
    let e = SparseEngine::new(&model);
    let (a, sa, _) = e.sparse_forward(&x).unwrap();
    let (b, sb, _) = e.sparse_forward(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let (c, _, _) = e.sparse_forward(&x.slice_rows(1, 3).unwrap()).unwrap();
    assert_eq!(c.data(), a.slice_rows(1, 3).unwrap().data());
}

#[test]
fn budget_report_of_untrained_model_is_dense() {
    let model = tiny_model::<f32>(3);
    let x = random_batch::<f32>(4, 3, 6, &mut test_rng(1));
    let (_, stats, _) = SparseEngine::new(&model).sparse_forward(&x).unwrap();
    let rep = measure_budget(&stats).unwrap();
    assert!((rep.mean_ratio - 1.0).abs() < 1e-12);
    assert!(rep.overhead_ratio > 0.0);
    assert_eq!(rep.histogram[9], 4);
    let geoms = model.geometries();
    let oh: u64 = geoms.iter().map(|g| g.gate_overhead()).sum();
    let dn: u64 = geoms.iter().map(|g| g.dense_macs()).sum();
    assert!((rep.ratio_with_overhead() - (dn + oh) as f64 / dn as f64).abs() < 1e-12);
}

#[test]
fn sparse_runs_in_f64() {
    let mut r = test_rng(10);
    let mut model = tiny_model::<f64>(6);
    perturb_model(&mut model, &mut r);
    let ids: Vec<_> = model.backbone.blocks.iter().map(|b| b.gate.b1).collect();
    for id in ids {
        model.store.param_mut(id).value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    let x = random_batch::<f64>(3, 3, 6, &mut r);
    let (sparse, _, traces) = SparseEngine::new(&model).sparse_forward(&x).unwrap();
    let masks: Vec<Tensor<f64>> = (0..model.backbone.blocks.len())
        .map(|l| {
            let c = model.backbone.blocks[l].c_out;
            Tensor::new(&[3, c], traces.iter().flat_map(|t| t.mask(l, c)).collect()).unwrap()
        })
        .collect();
    let mut m = model.clone();
    let mut g = Graph::new();
    let bind = m.bind(&mut g, false);
    let xv = g.constant(x);
    let (e, _) = m.encode(&mut g, &bind, xv, Mode::Eval, &mut GatePolicy::Forced(&masks)).unwrap();
    assert!(sparse.max_abs_diff(g.value(e)).unwrap() < 1e-12);
}
