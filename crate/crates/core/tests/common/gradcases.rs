//! Finite-difference gradient cases, one per differentiable op plus a full
//! gated block + heads composition. Each case draws a random configuration
//! and returns the relative error between analytic and numeric gradients.

use chansel_core::backbone::GatePolicy;
use chansel_core::flops::{total_gating_loss, BudgetConfig};
use chansel_core::graph::RunningStats;
use chansel_core::rng::Rng;
use chansel_core::simsiam::{negcos, symmetric_loss};
use chansel_core::{Graph, Mode, Tensor, Var};
use rand::Rng as _;

use super::*;

pub const CONFIGS: u64 = 20;
pub const TOL: f64 = 1e-4;

pub type Case = fn(&mut Rng) -> f64;

/// Largest error of `case` over every configuration, with the index of the
/// first configuration at or above `TOL`, if any.
pub fn sweep(name: &str, case: Case) -> (f64, Option<u64>) {
    let mut worst: f64 = 0.0;
    let mut first_bad = None;
    for c in 0..CONFIGS {
        let mut rng = test_rng(name.bytes().map(u64::from).sum::<u64>() * 1000 + c);
        let e = case(&mut rng);
        if !(e < TOL) && first_bad.is_none() {
            first_bad = Some(c);
        }
        worst = worst.max(e);
    }
    (worst, first_bad)
}

pub const CASES: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("linear", linear),
    ("scale_and_shift", scale_and_shift),
    ("gap2d", gap2d),
    ("l2_normalize", l2_normalize),
    ("channel_mask", channel_mask),
    ("reductions", reductions),
    ("rowdot_mean", rowdot_mean),
    ("negcos", negative_cosine_and_symmetric_loss),
    ("gated_block_and_heads", gated_block_and_heads),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("square", square),
    ("abs", abs),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
];

pub fn conv2d(rng: &mut Rng) -> f64 {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=k / 2 + 1);
    let (b, c_in, c_out) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let h = rng.random_range(k.max(2)..=7);
    let w = rng.random_range(k.max(2)..=7);
    let x = normal_tensor(&[b, c_in, h, w], rng);
    let wt = normal_tensor(&[c_out, c_in, k, k], rng);
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let r = normal_tensor(&[b, c_out, ho, wo], rng);
    gradcheck(&[x, wt], 60, rng, |g, v| {
        let y = g.conv2d(v[0], v[1], stride, padding)?;
        weighted_sum(g, y, &r)
    })
}

pub fn batch_norm_train(rng: &mut Rng) -> f64 {
    let rank4 = rng.random_bool(0.5);
    let affine = rng.random_bool(0.5);
    let (b, c) = (rng.random_range(2..=4), rng.random_range(1..=3));
    let shape = if rank4 { vec![b, c, rng.random_range(1..=3), rng.random_range(1..=3)] } else { vec![b, c] };
    let x = normal_tensor(&shape, rng);
    let gamma = uniform_tensor(&[c], 0.5, 1.5, rng);
    let beta = normal_tensor(&[c], rng);
    let r = normal_tensor(&shape, rng);
    gradcheck(&[x, gamma, beta], 60, rng, |g, v| {
        let mut stats = RunningStats::new(c);
        let (ga, be) = if affine { (Some(v[1]), Some(v[2])) } else { (None, None) };
        let y = g.batch_norm(v[0], ga, be, &mut stats, Mode::Train)?;
        weighted_sum(g, y, &r)
    })
}

pub fn batch_norm_eval(rng: &mut Rng) -> f64 {
    let (b, c, s) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let x = normal_tensor(&[b, c, s, s], rng);
    let gamma = uniform_tensor(&[c], 0.5, 1.5, rng);
    let beta = normal_tensor(&[c], rng);
    let mut stats = RunningStats::new(c);
    stats.mean = normal_tensor(&[c], rng).into_data();
    stats.var = uniform_tensor(&[c], 0.1, 2.0, rng).into_data();
    let r = normal_tensor(&[b, c, s, s], rng);
    gradcheck(&[x, gamma, beta], 60, rng, |g, v| {
        let mut st = stats.clone();
        let y = g.batch_norm(v[0], Some(v[1]), Some(v[2]), &mut st, Mode::Eval)?;
        weighted_sum(g, y, &r)
    })
}

pub fn linear(rng: &mut Rng) -> f64 {
    let (b, n, m) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
    let bias = rng.random_bool(0.5);
    let x = normal_tensor(&[b, n], rng);
    let w = normal_tensor(&[m, n], rng);
    let bi = normal_tensor(&[m], rng);
    let r = normal_tensor(&[b, m], rng);
    gradcheck(&[x, w, bi], 60, rng, |g, v| {
        let y = g.linear(v[0], v[1], bias.then_some(v[2]))?;
        weighted_sum(g, y, &r)
    })
}

fn random_shape(rng: &mut Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=4);
    (0..rank).map(|_| rng.random_range(1..=3)).collect()
}

fn unary(rng: &mut Rng, op: fn(&mut Graph<f64>, Var) -> chansel_core::Result<Var>) -> f64 {
    let shape = random_shape(rng);
    let x = away_from_zero(&shape, 1e-3, rng);
    let r = normal_tensor(&shape, rng);
    gradcheck(&[x], 60, rng, |g, v| {
        let y = op(g, v[0])?;
        weighted_sum(g, y, &r)
    })
}

pub fn relu(rng: &mut Rng) -> f64 {
    unary(rng, |g, x| g.relu(x))
}

pub fn sigmoid(rng: &mut Rng) -> f64 {
    unary(rng, |g, x| g.sigmoid(x))
}

pub fn square(rng: &mut Rng) -> f64 {
    unary(rng, |g, x| g.square(x))
}

pub fn abs(rng: &mut Rng) -> f64 {
    unary(rng, |g, x| g.abs(x))
}

pub fn scale_and_shift(rng: &mut Rng) -> f64 {
    let shape = random_shape(rng);
    let f = rng.random_range(-3.0..3.0);
    let c = rng.random_range(-3.0..3.0);
    let k = normal_tensor(&shape, rng);
    let x = normal_tensor(&shape, rng);
    let r = normal_tensor(&shape, rng);
    gradcheck(&[x], 60, rng, |g, v| {
        let y = g.scale(v[0], f)?;
        let y = g.add_scalar(y, c)?;
        let y = g.add_const(y, &k)?;
        let y = g.square(y)?;
        weighted_sum(g, y, &r)
    })
}

pub fn gap2d(rng: &mut Rng) -> f64 {
    let (b, c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
    let x = normal_tensor(&[b, c, h, w], rng);
    let r = normal_tensor(&[b, c], rng);
    gradcheck(&[x], 60, rng, |g, v| {
        let y = g.gap2d(v[0])?;
        weighted_sum(g, y, &r)
    })
}

pub fn l2_normalize(rng: &mut Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(1..=6));
    let x = normal_tensor(&[b, d], rng).map(|v| v + 0.1);
    let r = normal_tensor(&[b, d], rng);
    gradcheck(&[x], 60, rng, |g, v| {
        let y = g.l2_normalize(v[0])?;
        weighted_sum(g, y, &r)
    })
}

fn binary(rng: &mut Rng, op: fn(&mut Graph<f64>, Var, Var) -> chansel_core::Result<Var>) -> f64 {
    let shape = random_shape(rng);
    let a = normal_tensor(&shape, rng);
    let b = normal_tensor(&shape, rng);
    let r = normal_tensor(&shape, rng);
    gradcheck(&[a, b], 60, rng, |g, v| {
        let y = op(g, v[0], v[1])?;
        weighted_sum(g, y, &r)
    })
}

pub fn add(rng: &mut Rng) -> f64 {
    binary(rng, |g, a, b| g.add(a, b))
}

pub fn sub(rng: &mut Rng) -> f64 {
    binary(rng, |g, a, b| g.sub(a, b))
}

pub fn mul(rng: &mut Rng) -> f64 {
    binary(rng, |g, a, b| g.mul(a, b))
}

pub fn channel_mask(rng: &mut Rng) -> f64 {
    let (b, c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
    let x = normal_tensor(&[b, c, h, w], rng);
    let m = uniform_tensor(&[b, c], 0.0, 1.0, rng);
    let r = normal_tensor(&[b, c, h, w], rng);
    gradcheck(&[x, m], 60, rng, |g, v| {
        let y = g.channel_mask(v[0], v[1])?;
        weighted_sum(g, y, &r)
    })
}

pub fn reductions(rng: &mut Rng) -> f64 {
    let shape = random_shape(rng);
    let x = normal_tensor(&shape, rng);
    let y0 = normal_tensor(&shape, rng);
    gradcheck(&[x, y0], 60, rng, |g, v| {
        let s = g.sum(v[0])?;
        let m = g.mean(v[1])?;
        let sq = g.square(s)?;
        let p = g.mul(sq, m)?;
        g.add_all(&[p, s, m])
    })
}

pub fn rowdot_mean(rng: &mut Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(1..=6));
    let a = normal_tensor(&[b, d], rng);
    let c = normal_tensor(&[b, d], rng);
    gradcheck(&[a, c], 60, rng, |g, v| g.rowdot_mean(v[0], v[1]))
}

pub fn negative_cosine_and_symmetric_loss(rng: &mut Rng) -> f64 {
    let (b, d) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let xs: Vec<Tensor<f64>> = (0..4).map(|_| normal_tensor(&[b, d], rng)).collect();
    gradcheck(&xs, 80, rng, |g, v| {
        let a = negcos(g, v[0], v[1])?;
        let s = symmetric_loss(g, v[0], v[1], v[2], v[3])?;
        g.add(a, s)
    })
}

pub fn gated_block_and_heads(rng: &mut Rng) -> f64 {
    let mut model = tiny_model::<f64>(rng.random());
    perturb_model(&mut model, rng);
    let tau = rng.random_range(0.5..2.0);
    let progress = rng.random_range(0.0..0.2);
    let budget = BudgetConfig { target: rng.random_range(0.3..0.7), ..BudgetConfig::default() };
    let x1 = random_batch::<f64>(3, 3, 6, rng);
    let x2 = random_batch::<f64>(3, 3, 6, rng);

    let loss_of = |model: &mut chansel_core::model::Model<f64>, g: &mut Graph<f64>, grad: bool| -> (Var, Vec<Var>) {
        let bind = model.bind(g, grad);
        let a = g.constant(x1.clone());
        let b = g.constant(x2.clone());
        let v1 = model.forward_view(g, &bind, a, Mode::Train, &mut GatePolicy::Soft { tau }).unwrap();
        let v2 = model.forward_view(g, &bind, b, Mode::Train, &mut GatePolicy::Soft { tau }).unwrap();
        let ssl = symmetric_loss(g, v1.p, v2.p, v1.z, v2.z).unwrap();
        let report = model.flop_report(g, &[&v1.gates, &v2.gates]).unwrap();
        let lg = total_gating_loss(g, &report, progress, &budget).unwrap();
        (g.add(ssl, lg.total).unwrap(), bind.vars().to_vec())
    };

    let mut g = Graph::new();
    let mut m0 = model.clone();
    let (loss, vars) = loss_of(&mut m0, &mut g, true);
    g.backward(loss).unwrap();
    let sizes: Vec<usize> = model.store.params().iter().map(|p| p.value.len()).collect();
    let coords = pick_coords(&sizes, 40, rng);
    let analytic: Vec<f64> =
        coords.iter().map(|&(i, j)| g.grad_data(vars[i]).map_or(0.0, |d| d[j])).collect();
    let numeric = central_diff(&coords, |i, j, h| {
        let mut m = model.clone();
        m.store.params_mut()[i].value.data_mut()[j] += h;
        let mut g = Graph::new();
        let (loss, _) = loss_of(&mut m, &mut g, false);
        g.value(loss).item().unwrap()
    });
    rel_err(&analytic, &numeric)
}
