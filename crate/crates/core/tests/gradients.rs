//! Analytic gradients against central finite differences.

use mscale::linalg::DenseMatrix;
use mscale::mesh::MultiscaleMesh;
use mscale::nn::{self, Activation, Mlp};
use mscale::pu::{PuMode, PuModel, MACRO_NET_ACTIVATIONS, MACRO_NET_DIMS};
use mscale::shosvd::{self, FactorStage, IndexNorm, ObservationSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[derive(Default, Debug)]
struct Tally {
    checked: usize,
    skipped: usize,
    worst: f64,
}

/// Compares `analytic[k]` with the central difference of `loss` in parameter `k`.
/// Parameters sitting on a ReLU kink (one-sided slopes disagree) are skipped.
fn check(params: &mut [f64], analytic: &[f64], loss: &mut dyn FnMut(&[f64]) -> f64, tally: &mut Tally) {
    assert_eq!(params.len(), analytic.len());
    let f0 = loss(params);
    for k in 0..params.len() {
        let orig = params[k];
        params[k] = orig + STEP;
        let fp = loss(params);
        params[k] = orig - STEP;
        let fm = loss(params);
        params[k] = orig;
        let (right, left) = ((fp - f0) / STEP, (f0 - fm) / STEP);
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
            tally.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
        tally.worst = tally.worst.max(rel);
        tally.checked += 1;
        assert!(rel <= TOL, "parameter {k}: analytic {a}, numeric {numeric}, relative error {rel}");
    }
}

fn flatten(groups: Vec<&mut [f64]>) -> Vec<f64> {
    groups.into_iter().flat_map(|g| g.iter().copied().collect::<Vec<_>>()).collect()
}

fn write_back(groups: Vec<&mut [f64]>, flat: &[f64]) {
    let mut k = 0;
    for g in groups {
        for v in g.iter_mut() {
            *v = flat[k];
            k += 1;
        }
    }
}

#[test]
fn mlp_tanh_network_matches_finite_differences() {
    let mut tally = Tally::default();
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = nn::init_mlp::<f64>(&[1, 8, 1], &[Activation::Tanh, Activation::Identity], seed).unwrap();
        let x = [rng.gen_range(-2.0..2.0)];
        let up = [rng.gen_range(-2.0..2.0)];
        let grads = net.backward(&x, &up).unwrap();
        let analytic: Vec<f64> = grads.groups().concat();
        let mut work = net.clone();
        let mut flat = flatten(work.param_groups_mut());
        let mut loss = |p: &[f64]| {
            let mut n = net.clone();
            write_back(n.param_groups_mut(), p);
            up[0] * n.forward(&x).unwrap()[0]
        };
        check(&mut flat, &analytic, &mut loss, &mut tally);
    }
    assert_eq!(tally.skipped, 0);
}

#[test]
fn mlp_backward_trivial_cases() {
    let layer = nn::Layer::new(DenseMatrix::new(1, 1, vec![2.0]).unwrap(), vec![1.0], Activation::Identity).unwrap();
    let net = Mlp::new(vec![layer]).unwrap();
    let g = net.backward(&[3.0], &[1.0]).unwrap();
    assert_eq!(g.layers[0].weights.as_slice(), &[3.0]);
    assert_eq!(g.layers[0].bias, vec![1.0]);
    assert!(net.backward(&[3.0], &[0.0]).unwrap().is_zero());
    assert!(net.backward(&[3.0], &[1.0, 2.0]).is_err());
}

fn random_pu_model(seed: u64) -> (PuModel<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..4);
    let n = rng.gen_range(2..6);
    let mesh = MultiscaleMesh::new(-1.0, 2.0, m, n).unwrap();
    let modes = rng.gen_range(1..3);
    let mut model = PuModel::new(mesh);
    for k in 0..modes {
        let mut net = nn::init_mlp(&MACRO_NET_DIMS, &MACRO_NET_ACTIVATIONS, seed * 7 + k as u64).unwrap();
        for layer in net.layers_mut() {
            layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        let len = 2 * n + 1;
        let micro = mscale::pu::MicroVector::new((0..len).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        model.push_mode(PuMode { macro_net: net, micro }).unwrap();
    }
    let xs: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin() + 0.5).collect();
    (model, xs, ys)
}

#[test]
fn pu_macro_and_micro_gradients_match_finite_differences() {
    let mut tally = Tally::default();
    for seed in 0..20u64 {
        let (model, xs, ys) = random_pu_model(seed);
        let k = model.modes().len() - 1;
        let (loss0, grads) = model.loss_gradient(k, &xs, &ys).unwrap();
        let direct = nn::relative_loss(&model.eval_many(&xs).unwrap(), &ys).unwrap();
        assert!((loss0 - direct).abs() <= 1e-12 * direct.max(1.0));
        let analytic: Vec<f64> = grads.groups().concat();
        let mut work = model.clone();
        let mode = &mut work.modes_mut()[k];
        let mut groups = mode.macro_net.param_groups_mut();
        groups.push(mode.micro.samples_mut());
        let mut flat = flatten(groups);
        let mut loss = |p: &[f64]| {
            let mut m = model.clone();
            let mode = &mut m.modes_mut()[k];
            let mut groups = mode.macro_net.param_groups_mut();
            groups.push(mode.micro.samples_mut());
            write_back(groups, p);
            nn::relative_loss(&m.eval_many(&xs).unwrap(), &ys).unwrap()
        };
        check(&mut flat, &analytic, &mut loss, &mut tally);
    }
    assert!(tally.skipped * 1000 < tally.checked + tally.skipped, "{tally:?}");
}

#[test]
fn factor_network_gradients_match_finite_differences() {
    let mut tally = Tally::default();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let r = rng.gen_range(1..3);
        let truth = DenseMatrix::from_fn(rows, cols, |i, j| ((i + 1) as f64 * 0.3).sin() * (j as f64 * 0.7).cos());
        let (obs, _) = shosvd::mask(&truth, 0.3, seed).unwrap();
        let norm = IndexNorm::for_shape(rows, cols);
        let dims = [1, 6, 5, r];
        let acts = [Activation::Tanh, Activation::Tanh, Activation::Identity];
        let stage = FactorStage {
            row_net: nn::init_mlp(&dims, &acts, 2 * seed + 1).unwrap(),
            col_net: nn::init_mlp(&dims, &acts, 2 * seed + 2).unwrap(),
            r,
        };
        let (_, rg, cg) = shosvd::stage_loss_gradient(&stage, &norm, &obs).unwrap();
        let analytic: Vec<f64> = rg.groups().into_iter().chain(cg.groups()).flatten().copied().collect();
        let mut work = stage.clone();
        let mut groups = work.row_net.param_groups_mut();
        groups.extend(work.col_net.param_groups_mut());
        let mut flat = flatten(groups);
        let mut loss = |p: &[f64]| stage_mse(&stage, &norm, &obs, p);
        check(&mut flat, &analytic, &mut loss, &mut tally);
    }
    assert_eq!(tally.skipped, 0);
}

/// Independent forward evaluation of the stage MSE with parameters `p`.
fn stage_mse(stage: &FactorStage<f64>, norm: &IndexNorm<f64>, obs: &ObservationSet<f64>, p: &[f64]) -> f64 {
    let mut s = stage.clone();
    let mut groups = s.row_net.param_groups_mut();
    groups.extend(s.col_net.param_groups_mut());
    write_back(groups, p);
    let sum: f64 = obs
        .entries()
        .iter()
        .map(|o| {
            let u = s.row_net.forward(&[norm.row_coord(o.i)]).unwrap();
            let v = s.col_net.forward(&[norm.col_coord(o.j)]).unwrap();
            let pred: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            (pred - o.value).powi(2)
        })
        .sum();
    sum / obs.len() as f64
}
