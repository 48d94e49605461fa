//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use bayes_adapt::adapt::{insert_adapter, make_output_mask, AdapterKind};
use bayes_adapt::hier::{build_tree, tags_from_groups, EmbeddingView, HierRegularizer, SenoneTree};
use bayes_adapt::linalg::Matrix;
use bayes_adapt::net::{
    batch_gradient, LabeledFrameSet, Network, Objective, ParamMask, PenaltyScaling, TargetSet,
    TrainConfig,
};
use bayes_adapt::prior::{kld_targets, GaussianPrior, MapRegularizer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a| + |n|, 1e-6)`: symmetric, and an absolute test for
/// entries that are essentially zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

pub fn random_net(rng: &mut ChaCha8Rng) -> Network {
    let input = rng.random_range(2..=6);
    let hidden: Vec<usize> = (0..rng.random_range(1..=3))
        .map(|_| rng.random_range(2..=10))
        .collect();
    let classes = rng.random_range(2..=6);
    let mut net = Network::new(input, &hidden, classes, rng.random()).unwrap();
    // Nonzero biases so every bias gradient is exercised.
    for i in 0..net.depth() {
        for b in net.layer_mut(i).bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    net
}

pub fn random_data(rng: &mut ChaCha8Rng, dim: usize, classes: usize, n: usize) -> LabeledFrameSet {
    let frames: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledFrameSet::single(Matrix::from_vec(n, dim, frames).unwrap(), targets, classes).unwrap()
}

/// Every parameter as `(layer, index)`, weights before bias.
pub fn param_slots(net: &Network, mask: &ParamMask) -> Vec<(usize, usize)> {
    mask.indices()
        .iter()
        .flat_map(|&l| (0..net.layer(l).param_count()).map(move |k| (l, k)))
        .collect()
}

pub fn get_param(net: &Network, l: usize, k: usize) -> f64 {
    let layer = net.layer(l);
    if k < layer.weights.len() {
        layer.weights[k]
    } else {
        layer.bias[k - layer.weights.len()]
    }
}

pub fn set_param(net: &mut Network, l: usize, k: usize, v: f64) {
    let layer = net.layer_mut(l);
    let nw = layer.weights.len();
    if k < nw {
        layer.weights[k] = v;
    } else {
        layer.bias[k - nw] = v;
    }
}

/// Largest relative error between the objective's gradient and central
/// differences of its value, over every masked parameter.
pub fn max_fd_error(
    net: &Network,
    data: &LabeledFrameSet,
    mask: &ParamMask,
    obj: &Objective,
) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, grads) = obj.evaluate(net, data, &idx, mask).unwrap();
    let value = |n: &Network| obj.evaluate(n, data, &idx, mask).unwrap().0;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (l, k) in param_slots(net, mask) {
        let w = get_param(net, l, k);
        set_param(&mut probe, l, k, w + FD_EPS);
        let up = value(&probe);
        set_param(&mut probe, l, k, w - FD_EPS);
        let down = value(&probe);
        set_param(&mut probe, l, k, w);
        let numeric = (up - down) / (2.0 * FD_EPS);
        let analytic = grads.layer(l).unwrap().flattened()[k];
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

pub fn random_prior(rng: &mut ChaCha8Rng, kind: AdapterKind, len: usize) -> GaussianPrior {
    let mean = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var = (0..len).map(|_| rng.random_range(0.2..2.0)).collect();
    GaussianPrior::new(kind, mean, var, 1e-6).unwrap()
}

/// Worst gradient error of each objective on one random net:
/// `[cross-entropy, MAP, KLD, hierarchical]`.
pub fn gradient_errors(seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(&mut rng);
    let data = random_data(&mut rng, net.input_dim(), net.class_count(), 7);

    let ce = max_fd_error(
        &net,
        &data,
        &ParamMask::all(&net),
        &Objective::cross_entropy(),
    );

    let ins = insert_adapter(&net, AdapterKind::Lhn).unwrap();
    let mut adapted = ins.net.clone();
    // Move away from identity so the MAP term is not at a special point.
    for w in adapted.layer_mut(ins.placement.layer).weights.iter_mut() {
        *w += rng.random_range(-0.2..0.2);
    }
    let len = adapted.layer(ins.placement.layer).param_count();
    let map_obj = Objective::cross_entropy().with_regularizer(MapRegularizer {
        prior: random_prior(&mut rng, AdapterKind::Lhn, len),
        lambda: rng.random_range(0.1..3.0),
        layer: ins.placement.layer,
    });
    let map = max_fd_error(&adapted, &data, &ins.mask, &map_obj);

    let rho = rng.random_range(0.1..0.9);
    let kld_obj =
        Objective::cross_entropy().with_soft_targets(kld_targets(&net, &data, rho).unwrap());
    let kld = max_fd_error(&adapted, &data, &ins.mask, &kld_obj);

    let groups: Vec<usize> = (0..net.class_count()).map(|c| c % 2).collect();
    let mut tree = build_tree(
        &tags_from_groups(&groups),
        rng.random_range(0.01..1.0),
        rng.random_range(0.1..3.0),
        &EmbeddingView::from_network(&net),
    )
    .unwrap();
    perturb_theta(&mut tree, &mut rng);
    let hier_obj = Objective::cross_entropy().with_regularizer(HierRegularizer {
        tree,
        layer: net.output_layer_index(),
    });
    let hier = max_fd_error(&net, &data, &make_output_mask(&net), &hier_obj);
    [ce, map, kld, hier]
}

pub fn perturb_theta(tree: &mut SenoneTree, rng: &mut ChaCha8Rng) {
    let theta = tree
        .theta()
        .iter()
        .map(|t| t.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect())
        .collect();
    tree.set_theta(theta).unwrap();
}

/// Plain mini-batch SGD with L2 weight decay `coef * |w|^2 / 2` on `layer`,
/// written without the library's objective or regularizer machinery. Uses
/// the same shuffling stream as `sgd_train`.
pub fn l2_sgd_reference(
    net: &Network,
    data: &LabeledFrameSet,
    cfg: &TrainConfig,
    mask: &ParamMask,
    layer: usize,
    coef: f64,
) -> Network {
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.min(data.len());
    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let share = match cfg.penalty_scaling {
                PenaltyScaling::PerBatch => 1.0,
                PenaltyScaling::PerEpoch => chunk.len() as f64 / data.len() as f64,
            };
            let (_, g) = batch_gradient(
                &net,
                data.frames(),
                &TargetSet::Hard(data.targets()),
                chunk,
                mask,
            )
            .unwrap();
            for (i, gl) in g.layers.iter().enumerate() {
                let Some(gl) = gl else { continue };
                let decay = if i == layer { share * coef } else { 0.0 };
                let l = net.layer_mut(i);
                for (p, d) in l.weights.iter_mut().zip(&gl.weights) {
                    *p -= cfg.learning_rate * (d + decay * *p);
                }
                for (p, d) in l.bias.iter_mut().zip(&gl.bias) {
                    *p -= cfg.learning_rate * (d + decay * *p);
                }
            }
        }
    }
    net
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn all_params(net: &Network) -> Vec<f64> {
    net.layers().iter().flat_map(|l| l.flattened()).collect()
}

/// Hierarchical penalty written out directly from its definition.
pub fn hier_penalty_reference(
    rows: &[Vec<f64>],
    parent_of: &[usize],
    theta: &[Vec<f64>],
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    let mut leaves = 0.0;
    for (s, row) in rows.iter().enumerate() {
        for (w, t) in row.iter().zip(&theta[parent_of[s]]) {
            leaves += (w - t).powi(2);
        }
    }
    let parents: f64 = theta.iter().flatten().map(|t| t * t).sum();
    0.5 * lambda2 * leaves + 0.5 * lambda1 * parents
}

/// Minimizes the hierarchical penalty over theta by gradient descent with
/// the exact step `1 / (lambda2 * n_p + lambda1)` replaced by a fixed, much
/// smaller one, so the result does not lean on the closed form.
pub fn theta_by_descent(
    rows: &[Vec<f64>],
    parent_of: &[usize],
    parents: usize,
    lambda1: f64,
    lambda2: f64,
) -> Vec<Vec<f64>> {
    let dim = rows[0].len();
    let mut theta = vec![vec![0.0; dim]; parents];
    let mut counts = vec![0usize; parents];
    for &p in parent_of {
        counts[p] += 1;
    }
    let largest = counts
        .iter()
        .map(|&n| lambda2 * n as f64 + lambda1)
        .fold(0.0, f64::max);
    let step = 0.5 / largest;
    for _ in 0..100_000 {
        let mut grad: Vec<Vec<f64>> = theta
            .iter()
            .map(|t| t.iter().map(|v| lambda1 * v).collect())
            .collect();
        for (s, row) in rows.iter().enumerate() {
            let p = parent_of[s];
            for ((g, t), w) in grad[p].iter_mut().zip(&theta[p]).zip(row) {
                *g += lambda2 * (t - w);
            }
        }
        let norm: f64 = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-13 {
            break;
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            for (tv, gv) in t.iter_mut().zip(g) {
                *tv -= step * gv;
            }
        }
    }
    theta
}
