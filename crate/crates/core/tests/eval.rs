mod common;

use chansel_core::eval::{encode_eval, extract_embeddings, knn_accuracy, knn_predict, ChannelCategory, EmbeddingSet, UsageCounter};
use chansel_core::data::{make_synthetic, LabeledImage};
use chansel_core::sparse::SparseEngine;
use chansel_core::Tensor;
use common::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn random_set(n: usize, d: usize, classes: usize, rng: &mut chansel_core::rng::Rng) -> EmbeddingSet {
    let data: Vec<f32> = normal_tensor(&[n, d], rng).data().iter().map(|&v| v as f32).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    EmbeddingSet::from_rows(d, data, labels).unwrap()
}

fn brute_force_1nn(bank: &EmbeddingSet, q: &EmbeddingSet) -> f64 {
    let mut hits = 0;
    for i in 0..q.len() {
        let (mut best, mut best_sim) = (0, f64::NEG_INFINITY);
        for j in 0..bank.len() {
            let s: f64 = q.row(i).iter().zip(bank.row(j)).map(|(a, b)| *a as f64 * *b as f64).sum();
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        hits += (bank.labels[best] == q.labels[i]) as usize;
    }
    hits as f64 / q.len() as f64
}

#[test]
fn one_nn_matches_exhaustive_search() {
    for case in 0..5 {
        let mut r = test_rng(900 + case);
        let n = r.random_range(50..=500);
        let d = r.random_range(2..=32);
        let bank = random_set(n, d, 10, &mut r);
        let q = random_set(r.random_range(20..=300), d, 10, &mut r);
        assert_eq!(knn_accuracy(&bank, &q, 1).unwrap(), brute_force_1nn(&bank, &q));
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    let row = vec![1.0f32, 0.0];
    let bank = EmbeddingSet::from_rows(2, [row.clone(), row.clone(), vec![0.0, 1.0]].concat(), vec![4, 7, 1]).unwrap();
    let q = EmbeddingSet::from_rows(2, row, vec![4]).unwrap();
    assert_eq!(knn_predict(&bank, &q, 1).unwrap(), vec![4]);
}

#[test]
fn k_nearest_majority_vote() {
    let bank = EmbeddingSet::from_rows(
        2,
        vec![1.0, 0.0, 0.9, 0.1, 0.8, 0.2, 0.0, 1.0, 0.1, 0.9],
        vec![1, 2, 2, 3, 3],
    )
    .unwrap();
    let q = EmbeddingSet::from_rows(2, vec![1.0, 0.05], vec![2]).unwrap();
    assert_eq!(knn_predict(&bank, &q, 1).unwrap(), vec![1]);
    assert_eq!(knn_predict(&bank, &q, 3).unwrap(), vec![2]);
    assert_eq!(knn_predict(&bank, &q, 2).unwrap(), vec![1]);
    assert!(knn_predict(&bank, &q, 0).is_err());
    assert!(knn_predict(&bank, &q, 6).is_err());
}

fn random_rotation(d: usize, rng: &mut chansel_core::rng::Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v = normal_tensor(&[d], rng).into_data();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn rotate(set: &EmbeddingSet, rot: &[Vec<f64>]) -> EmbeddingSet {
    let data = (0..set.len())
        .flat_map(|i| rot.iter().map(move |r| r.iter().zip(set.row(i)).map(|(a, b)| a * *b as f64).sum::<f64>() as f32))
        .collect();
    EmbeddingSet::from_rows(set.dim, data, set.labels.clone()).unwrap()
}

#[test]
fn accuracy_is_rotation_invariant() {
    for case in 0..5 {
        let mut r = test_rng(950 + case);
        let bank = random_set(200, 8, 5, &mut r);
        let q = random_set(100, 8, 5, &mut r);
        let rot = random_rotation(8, &mut r);
        assert_eq!(knn_accuracy(&bank, &q, 1).unwrap(), knn_accuracy(&rotate(&bank, &rot), &rotate(&q, &rot), 1).unwrap());
    }
}

#[test]
fn degenerate_embeddings_are_rejected() {
    assert!(EmbeddingSet::from_rows(2, vec![0.0, 0.0], vec![0]).is_err());
    assert!(EmbeddingSet::from_rows(2, vec![1.0], vec![0]).is_err());
}

fn gated_model(seed: u64) -> chansel_core::model::Model<f32> {
    let mut r = test_rng(seed);
    let mut model = tiny_model::<f32>(seed);
    perturb_model(&mut model, &mut r);
    let ids: Vec<_> = model.backbone.blocks.iter().map(|b| b.gate.b1).collect();
    for (k, id) in ids.into_iter().enumerate() {
        model.store.param_mut(id).value.data_mut().iter_mut().enumerate().for_each(|(c, v)| {
            *v = match c % 3 {
                0 => 50.0,
                1 => -50.0,
                _ => r.random_range(-0.2..0.2) + 0.1 * k as f32,
            }
        });
    }
    model
}

#[test]
fn usage_is_independent_of_batching_and_order() {
    let mut model = gated_model(4);
    let mut r = test_rng(5);
    let images = random_batch::<f32>(12, 3, 6, &mut r);
    let counter_for = |model: &mut chansel_core::model::Model<f32>, order: &[usize], bs: usize| {
        let mut u = UsageCounter::for_model(model);
        for chunk in order.chunks(bs) {
            let rows: Vec<Tensor<f32>> = chunk.iter().map(|&i| images.slice_rows(i, i + 1).unwrap()).collect();
            let batch = Tensor::stack_rows(&rows).unwrap();
            let (_, masks) = encode_eval(model, &batch).unwrap();
            u.add_masks(&masks).unwrap();
        }
        u.finish().unwrap()
    };
    let id: Vec<usize> = (0..12).collect();
    let base = counter_for(&mut model, &id, 12);
    for bs in [1, 5, 7] {
        let mut order = id.clone();
        order.shuffle(&mut r);
        assert_eq!(counter_for(&mut model, &order, bs), base);
    }
    for b in &base.blocks {
        assert_eq!(b.count(ChannelCategory::AlwaysOff) + b.count(ChannelCategory::AlwaysOn) + b.count(ChannelCategory::Dynamic), b.categories.len());
    }
    assert!(base.count(ChannelCategory::AlwaysOff) > 0 && base.count(ChannelCategory::AlwaysOn) > 0);

    let engine = SparseEngine::new(&model);
    let (_, _, traces) = engine.sparse_forward(&images).unwrap();
    let mut from_traces = UsageCounter::for_model(&model);
    traces.iter().for_each(|t| from_traces.add_trace(t).unwrap());
    assert_eq!(from_traces.finish().unwrap(), base);
    for (l, b) in base.blocks.iter().enumerate() {
        for (c, cat) in b.categories.iter().enumerate() {
            if *cat == ChannelCategory::AlwaysOff {
                assert!(traces.iter().all(|t| !t.active[l].contains(&c)));
            }
        }
    }
}

#[test]
fn counters_merge() {
    let model = gated_model(6);
    let images = random_batch::<f32>(6, 3, 6, &mut test_rng(6));
    let (_, _, traces) = SparseEngine::new(&model).sparse_forward(&images).unwrap();
    let mut all = UsageCounter::for_model(&model);
    let mut a = UsageCounter::for_model(&model);
    let mut b = UsageCounter::for_model(&model);
    for (i, t) in traces.iter().enumerate() {
        all.add_trace(t).unwrap();
        if i % 2 == 0 { a.add_trace(t).unwrap() } else { b.add_trace(t).unwrap() }
    }
    a.merge(&b).unwrap();
    assert_eq!(a, all);
    assert!(UsageCounter::for_model(&model).finish().is_err());
}

#[test]
fn extracted_embeddings_are_unit_norm_and_batch_free() {
    let model = tiny_model::<f32>(2);
    let imgs: Vec<LabeledImage> = make_synthetic(3, 3, 6, 0).unwrap();
    let a = extract_embeddings(&model, &imgs, 4).unwrap();
    let b = extract_embeddings(&model, &imgs, 9).unwrap();
    assert_eq!(a, b);
    for i in 0..a.len() {
        let n: f32 = a.row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert_eq!(a.labels, imgs.iter().map(|i| i.label).collect::<Vec<_>>());
}

#[test]
fn nearest_axis_and_self_match() {
    let bank = EmbeddingSet::from_rows(2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]).unwrap();
    let q = EmbeddingSet::from_rows(2, vec![0.9, 0.1], vec![0]).unwrap();
    assert_eq!(knn_predict(&bank, &q, 1).unwrap(), vec![0]);
    let set = random_set(150, 6, 4, &mut test_rng(1));
    assert_eq!(knn_accuracy(&set, &set, 1).unwrap(), 1.0);
}

#[test]
fn fixed_gate_logits_give_uniform_categories() {
    for (bias, cat) in [(1.0f32, ChannelCategory::AlwaysOn), (-1.0, ChannelCategory::AlwaysOff)] {
        let mut model = tiny_model::<f32>(1);
        let ids: Vec<_> = model.backbone.blocks.iter().map(|b| (b.gate.w1, b.gate.b1)).collect();
        for (w, b) in ids {
            model.store.param_mut(w).value.data_mut().fill(0.0);
            model.store.param_mut(b).value.data_mut().fill(bias);
        }
        let (_, masks) = encode_eval(&mut model, &random_batch(5, 3, 6, &mut test_rng(2))).unwrap();
        let mut u = UsageCounter::for_model(&model);
        u.add_masks(&masks).unwrap();
        let usage = u.finish().unwrap();
        assert_eq!(usage.count(cat), usage.channels());
    }
}
