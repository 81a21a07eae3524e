#![allow(dead_code)]

pub mod gradcases;

use chansel_core::backbone::BackboneConfig;
use chansel_core::model::Model;
use chansel_core::rng::{self, Rng};
use chansel_core::simsiam::HeadsConfig;
use chansel_core::{Graph, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at the given `(tensor, element)` coordinates,
/// where `f(i, j, h)` evaluates the loss with element `j` of input `i` shifted by `h`.
pub fn central_diff(coords: &[(usize, usize)], mut f: impl FnMut(usize, usize, f64) -> f64) -> Vec<f64> {
    coords.iter().map(|&(i, j)| (f(i, j, FD_STEP) - f(i, j, -FD_STEP)) / (2.0 * FD_STEP)).collect()
}

/// Every coordinate when there are at most `limit`, otherwise a random sample.
pub fn pick_coords(sizes: &[usize], limit: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = sizes.iter().enumerate().flat_map(|(i, &n)| (0..n).map(move |j| (i, j))).collect();
    if all.len() <= limit {
        return all;
    }
    (0..limit).map(|_| all[rng.random_range(0..all.len())]).collect()
}

/// Compares reverse-mode gradients of `build` w.r.t. every input against
/// central differences. Returns the relative error.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], limit: usize, rng: &mut Rng, mut build: F) -> f64
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> chansel_core::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad_data(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let coords = pick_coords(&inputs.iter().map(Tensor::len).collect::<Vec<_>>(), limit, rng);
    let analytic: Vec<f64> = coords.iter().map(|&(i, j)| grads[i][j]).collect();
    let numeric = central_diff(&coords, |i, j, h| {
        let mut shifted = inputs.to_vec();
        shifted[i].data_mut()[j] += h;
        let mut g = Graph::new();
        let vars: Vec<Var> = shifted.into_iter().map(|t| g.leaf(t, true)).collect();
        let loss = build(&mut g, &vars).expect("forward");
        g.value(loss).item().unwrap()
    });
    rel_err(&analytic, &numeric)
}

pub fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Normal entries with magnitude at least `gap`, keeping kinks out of reach
/// of the finite-difference step.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor<f64> {
    normal_tensor(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element carries a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> chansel_core::Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn test_rng(case: u64) -> Rng {
    rng::stream(0x7e57, &[case])
}

/// Two stages of 4 and 8 channels on 6x6 inputs.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { widths: vec![4, 8], blocks_per_stage: 1, input_side: 6, reduction: 2, in_channels: 3 }
}

pub fn tiny_heads() -> HeadsConfig {
    HeadsConfig { proj_layers: 2, proj_hidden: 8, proj_dim: 8, pred_hidden: 4 }
}

pub fn tiny_model<T: chansel_core::Real>(seed: u64) -> Model<T> {
    Model::new(&tiny_backbone(), &tiny_heads(), seed).unwrap()
}

/// Randomizes BN affine parameters and running statistics away from their
/// identity initialization so eval paths exercise every term.
pub fn perturb_model<T: chansel_core::Real>(model: &mut Model<T>, rng: &mut Rng) {
    for p in model.store.params_mut() {
        let is_bn = p.name.contains(".bn");
        if is_bn && p.name.ends_with(".weight") {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.random_range(0.5..1.5)));
        } else if is_bn && p.name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.random_range(-0.3..0.3)));
        }
    }
    for (_, s) in model.store.all_stats_mut() {
        s.mean.iter_mut().for_each(|v| *v = T::lit(rng.random_range(-0.2..0.2)));
        s.var.iter_mut().for_each(|v| *v = T::lit(rng.random_range(0.05..0.3)));
    }
}

/// Random images in `[0, 1]`, `[B, C, S, S]`.
pub fn random_batch<T: chansel_core::Real>(b: usize, c: usize, s: usize, rng: &mut Rng) -> Tensor<T> {
    let n = b * c * s * s;
    Tensor::new(&[b, c, s, s], (0..n).map(|_| T::lit(rng.random::<f64>())).collect()).unwrap()
}
