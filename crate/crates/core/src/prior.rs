//! Empirical-Bayes Gaussian priors over flattened adapter weights, the MAP
//! objective built on them, and the KLD target-interpolation baseline.

use rayon::prelude::*;

use crate::adapt::{adaptable_param_count, prepare, AdapterKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{
    sgd_train, Gradients, LabeledFrameSet, Network, Objective, Regularizer, TrainConfig,
};
use crate::seeds;

/// Default lower bound on prior variances.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

/// One condition's adapted transform, flattened row-major weights then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVectorSample {
    pub condition_id: u32,
    pub kind: AdapterKind,
    pub w: Vec<f64>,
}

/// Diagonal Gaussian over flattened adapter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub kind: AdapterKind,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance, every entry `>= floor`.
    pub var: Vec<f64>,
    pub floor: f64,
}

impl GaussianPrior {
    pub fn new(kind: AdapterKind, mean: Vec<f64>, var: Vec<f64>, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::config("variance floor must be positive"));
        }
        if mean.len() != var.len() {
            return Err(Error::Dimension {
                what: "prior variance",
                expected: mean.len(),
                got: var.len(),
            });
        }
        if !mean.iter().chain(&var).all(|v| v.is_finite()) {
            return Err(Error::invalid("prior contains non-finite values"));
        }
        let var = var.into_iter().map(|v| v.max(floor)).collect();
        Ok(Self {
            kind,
            mean,
            var,
            floor,
        })
    }

    /// `N(0, I)`, under which MAP reduces to L2 weight decay.
    pub fn standard(kind: AdapterKind, len: usize) -> Self {
        Self {
            kind,
            mean: vec![0.0; len],
            var: vec![1.0; len],
            floor: DEFAULT_VAR_FLOOR,
        }
    }

    /// Dimension `M`.
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Maximum-likelihood mean and diagonal variance (divisor `N`), floored.
pub fn fit_prior(samples: &[WeightVectorSample], floor: f64) -> Result<GaussianPrior> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "fit_prior needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let m = samples[0].w.len();
    let kind = samples[0].kind;
    for s in samples {
        if s.w.len() != m {
            return Err(Error::Dimension {
                what: "weight vector sample",
                expected: m,
                got: s.w.len(),
            });
        }
        if s.kind != kind {
            return Err(Error::invalid("samples mix adapter kinds"));
        }
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; m];
    for s in samples {
        for (mu, w) in mean.iter_mut().zip(&s.w) {
            *mu += w;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= n);
    let mut var = vec![0.0; m];
    for s in samples {
        for ((v, w), mu) in var.iter_mut().zip(&s.w).zip(&mean) {
            let d = w - mu;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    GaussianPrior::new(kind, mean, var, floor)
}

/// `(lambda / 2) * sum_m (w_m - mu_m)^2 / var_m + xent`.
pub fn map_loss(w: &[f64], prior: &GaussianPrior, lambda: f64, xent: f64) -> f64 {
    debug_assert_eq!(w.len(), prior.len());
    let quad: f64 = w
        .iter()
        .zip(&prior.mean)
        .zip(&prior.var)
        .map(|((w, mu), v)| (w - mu) * (w - mu) / v)
        .sum();
    0.5 * lambda * quad + xent
}

/// Component `m`: `lambda * (w_m - mu_m) / var_m + xent_gradient_m`.
pub fn map_gradient(
    w: &[f64],
    prior: &GaussianPrior,
    lambda: f64,
    xent_gradient: &[f64],
) -> Result<Vec<f64>> {
    if w.len() != prior.len() || xent_gradient.len() != prior.len() {
        return Err(Error::Dimension {
            what: "MAP gradient operands",
            expected: prior.len(),
            got: if w.len() != prior.len() {
                w.len()
            } else {
                xent_gradient.len()
            },
        });
    }
    Ok(w.iter()
        .zip(&prior.mean)
        .zip(&prior.var)
        .zip(xent_gradient)
        .map(|(((w, mu), v), g)| lambda * (w - mu) / v + g)
        .collect())
}

/// Gaussian-prior penalty on one layer's flattened parameters.
#[derive(Debug, Clone)]
pub struct MapRegularizer {
    pub prior: GaussianPrior,
    pub lambda: f64,
    pub layer: usize,
}

impl MapRegularizer {
    fn zip_params<'a>(&'a self, net: &'a Network) -> impl Iterator<Item = (f64, f64, f64)> + 'a {
        let l = net.layer(self.layer);
        l.weights
            .iter()
            .chain(&l.bias)
            .zip(&self.prior.mean)
            .zip(&self.prior.var)
            .map(|((w, mu), v)| (*w, *mu, *v))
    }
}

impl Regularizer for MapRegularizer {
    fn penalty(&self, net: &Network) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let quad: f64 = self
            .zip_params(net)
            .map(|(w, mu, v)| (w - mu) * (w - mu) / v)
            .sum();
        0.5 * self.lambda * quad
    }

    fn add_gradient(&self, net: &Network, grads: &mut Gradients) {
        if self.lambda == 0.0 {
            return;
        }
        let l = net.layer(self.layer);
        let Some(g) = grads.layer_mut(self.layer) else {
            return;
        };
        let (mw, mb) = self.prior.mean.split_at(l.weights.len());
        let (vw, vb) = self.prior.var.split_at(l.weights.len());
        for (((g, w), mu), v) in g.weights.iter_mut().zip(&l.weights).zip(mw).zip(vw) {
            *g += self.lambda * (w - mu) / v;
        }
        for (((g, w), mu), v) in g.bias.iter_mut().zip(&l.bias).zip(mb).zip(vb) {
            *g += self.lambda * (w - mu) / v;
        }
    }

    fn add_curvature(&self, net: &Network, curv: &mut Gradients) {
        if self.lambda == 0.0 {
            return;
        }
        let nw = net.layer(self.layer).weights.len();
        let Some(c) = curv.layer_mut(self.layer) else {
            return;
        };
        let (vw, vb) = self.prior.var.split_at(nw);
        for (c, v) in c.weights.iter_mut().zip(vw) {
            *c += self.lambda / v;
        }
        for (c, v) in c.bias.iter_mut().zip(vb) {
            *c += self.lambda / v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub lambda: f64,
    pub train: TrainConfig,
}

/// Adapts `kind` parameters under the MAP objective with `prior`.
pub fn adapt_map(
    net: &Network,
    data: &LabeledFrameSet,
    prior: &GaussianPrior,
    cfg: &MapConfig,
    kind: AdapterKind,
) -> Result<Network> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::config("lambda must be non-negative"));
    }
    let expected = adaptable_param_count(net, kind);
    if prior.len() != expected {
        return Err(Error::config(format!(
            "prior has {} entries but a {kind} adapter on this network has {expected}",
            prior.len()
        )));
    }
    if prior.kind != kind {
        return Err(Error::config(format!(
            "prior was fitted for {} but adaptation uses {kind}",
            prior.kind
        )));
    }
    let prep = prepare(net, kind)?;
    let mut objective = Objective::cross_entropy().with_regularizer(MapRegularizer {
        prior: prior.clone(),
        lambda: cfg.lambda,
        layer: prep.layer,
    });
    sgd_train(&prep.net, data, &cfg.train, &prep.mask, &mut objective).map(|o| o.net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KldConfig {
    pub rho: f64,
    pub train: TrainConfig,
}

/// Interpolated targets `(1 - rho) * onehot + rho * p_base(.|o)`.
pub fn kld_targets(base: &Network, data: &LabeledFrameSet, rho: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("rho must lie in [0, 1], got {rho}")));
    }
    let mut targets = base.posteriors(data.frames())?;
    for (t, &label) in data.targets().iter().enumerate() {
        for (j, p) in targets.row_mut(t).iter_mut().enumerate() {
            let hard = if j == label { 1.0 } else { 0.0 };
            *p = (1.0 - rho) * hard + rho * *p;
        }
    }
    Ok(targets)
}

/// Adapts `kind` parameters toward targets interpolated with the frozen
/// network's own posteriors.
pub fn adapt_kld(
    net: &Network,
    data: &LabeledFrameSet,
    cfg: &KldConfig,
    kind: AdapterKind,
) -> Result<Network> {
    let targets = kld_targets(net, data, cfg.rho)?;
    let prep = prepare(net, kind)?;
    let mut objective = Objective::cross_entropy().with_soft_targets(targets);
    sgd_train(&prep.net, data, &cfg.train, &prep.mask, &mut objective).map(|o| o.net)
}

/// Flattened trainable parameters of an adapted network for `kind`.
pub fn adapted_weights(net: &Network, kind: AdapterKind) -> Result<Vec<f64>> {
    match kind {
        AdapterKind::LonDirect => Ok(net.output_layer().flattened()),
        _ => match net.linear_adapter() {
            Some(a) if a.placement.kind == kind => Ok(a.flattened()),
            _ => Err(Error::invalid(format!("network carries no {kind} adapter"))),
        },
    }
}

#[derive(Debug, Clone)]
pub struct Harvest {
    pub samples: Vec<WeightVectorSample>,
    /// Conditions whose adaptation failed, with the reason.
    pub skipped: Vec<(u32, String)>,
}

/// Plain supervised adaptation on each condition separately, starting from
/// identity each time. Conditions are adapted concurrently; each job gets a
/// seed derived from `cfg.rng_seed` and its condition id.
pub fn harvest_speaker_transforms(
    base: &Network,
    conditions: &[(u32, LabeledFrameSet)],
    cfg: &TrainConfig,
    kind: AdapterKind,
) -> Result<Harvest> {
    if conditions.len() < 2 {
        return Err(Error::invalid(format!(
            "harvesting needs at least 2 conditions, got {}",
            conditions.len()
        )));
    }
    let results: Vec<(u32, Result<Vec<f64>>)> = conditions
        .par_iter()
        .map(|(id, data)| {
            let job = TrainConfig {
                rng_seed: seeds::derive(cfg.rng_seed, "harvest", u64::from(*id)),
                ..cfg.clone()
            };
            let w = crate::adapt::adapt(base, data, &job, kind, &mut Objective::cross_entropy())
                .and_then(|net| adapted_weights(&net, kind));
            (*id, w)
        })
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(w) => samples.push(WeightVectorSample {
                condition_id: id,
                kind,
                w,
            }),
            Err(e) => {
                log::warn!("condition {id}: adaptation failed, skipped: {e}");
                skipped.push((id, e.to_string()));
            }
        }
    }
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "only {} condition(s) adapted successfully; need at least 2",
            samples.len()
        )));
    }
    Ok(Harvest { samples, skipped })
}

/// Per-component sample skewness and excess kurtosis of harvested weights.
/// Components with zero spread report 0 for both.
#[derive(Debug, Clone)]
pub struct GaussianityReport {
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
}

impl GaussianityReport {
    pub fn mean_abs_skewness(&self) -> f64 {
        mean_abs(&self.skewness)
    }

    pub fn mean_abs_excess_kurtosis(&self) -> f64 {
        mean_abs(&self.excess_kurtosis)
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

pub fn gaussianity_report(samples: &[WeightVectorSample]) -> GaussianityReport {
    let m = samples.first().map_or(0, |s| s.w.len());
    let n = samples.len() as f64;
    let mut skewness = Vec::with_capacity(m);
    let mut excess_kurtosis = Vec::with_capacity(m);
    for k in 0..m {
        let mean = samples.iter().map(|s| s.w[k]).sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for s in samples {
            let d = s.w[k] - mean;
            m2 += d * d;
            m3 += d * d * d;
            m4 += d * d * d * d;
        }
        m2 /= n;
        m3 /= n;
        m4 /= n;
        if m2 <= f64::EPSILON * mean.abs().max(1.0) * 1e-6 {
            skewness.push(0.0);
            excess_kurtosis.push(0.0);
        } else {
            skewness.push(m3 / m2.powf(1.5));
            excess_kurtosis.push(m4 / (m2 * m2) - 3.0);
        }
    }
    GaussianityReport {
        skewness,
        excess_kurtosis,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(w: &[f64]) -> WeightVectorSample {
        WeightVectorSample {
            condition_id: 0,
            kind: AdapterKind::Lhn,
            w: w.to_vec(),
        }
    }

    #[test]
    fn two_sample_fixture() {
        let p = fit_prior(&[sample(&[0.0, 2.0]), sample(&[2.0, 4.0])], 1e-6).unwrap();
        assert_eq!(p.mean, vec![1.0, 3.0]);
        assert_eq!(p.var, vec![1.0, 1.0]);
    }

    #[test]
    fn population_divisor() {
        let p = fit_prior(&[sample(&[0.0]), sample(&[3.0]), sample(&[6.0])], 1e-6).unwrap();
        assert_eq!(p.mean, vec![3.0]);
        assert_eq!(p.var, vec![6.0]);
    }

    #[test]
    fn identical_samples_floor_variance() {
        let s = sample(&[0.5, -1.25, 3.0]);
        let p = fit_prior(&[s.clone(), s.clone(), s.clone()], 1e-6).unwrap();
        assert_eq!(p.mean, s.w);
        assert_eq!(p.var, vec![1e-6; 3]);
    }

    #[test]
    fn fit_prior_rejects_bad_input() {
        assert!(fit_prior(&[sample(&[1.0])], 1e-6).is_err());
        assert!(fit_prior(&[sample(&[1.0]), sample(&[1.0, 2.0])], 1e-6).is_err());
    }

    #[test]
    fn map_loss_examples() {
        let prior =
            GaussianPrior::new(AdapterKind::Lhn, vec![0.0, 0.0], vec![1.0, 4.0], 1e-6).unwrap();
        assert_eq!(map_loss(&[2.0, 0.0], &prior, 2.0, 1.0), 5.0);
        assert_eq!(map_loss(&[0.0, 0.0], &prior, 2.0, 1.25), 1.25);
        assert_eq!(map_loss(&[7.0, -3.0], &prior, 0.0, 1.25), 1.25);
    }

    #[test]
    fn map_gradient_at_mean_is_xent_gradient() {
        let prior =
            GaussianPrior::new(AdapterKind::Lhn, vec![1.0, -2.0], vec![0.5, 2.0], 1e-6).unwrap();
        let g = map_gradient(&[1.0, -2.0], &prior, 3.0, &[0.25, -0.5]).unwrap();
        assert_eq!(g, vec![0.25, -0.5]);
        assert!(map_gradient(&[1.0], &prior, 3.0, &[0.25, -0.5]).is_err());
    }

    #[test]
    fn standard_prior_is_l2() {
        let prior = GaussianPrior::standard(AdapterKind::Lhn, 3);
        let w = [0.3, -1.2, 2.0];
        let g = [0.1, 0.2, -0.3];
        let lambda = 0.7;
        let got = map_gradient(&w, &prior, lambda, &g).unwrap();
        for k in 0..3 {
            assert_eq!(got[k], lambda * w[k] + g[k]);
        }
    }

    #[test]
    fn kld_targets_are_distributions() {
        let net = Network::new(3, &[4], 5, 2).unwrap();
        let frames = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 2.0]]).unwrap();
        let data = LabeledFrameSet::single(frames, vec![4, 0], 5).unwrap();
        for rho in [0.0, 0.3, 1.0] {
            let t = kld_targets(&net, &data, rho).unwrap();
            for r in 0..t.rows() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let hard = kld_targets(&net, &data, 0.0).unwrap();
        assert_eq!(hard.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(kld_targets(&net, &data, 1.5).is_err());
    }

    #[test]
    fn gaussianity_of_symmetric_sample() {
        let samples: Vec<_> = [-2.0, -1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|&x| sample(&[x, 5.0]))
            .collect();
        let r = gaussianity_report(&samples);
        assert!(r.skewness[0].abs() < 1e-12);
        assert_eq!(r.skewness[1], 0.0);
        // m2 = 2, m4 = 6.8, so m4 / m2^2 = 1.7
        assert!((r.excess_kurtosis[0] - (1.7 - 3.0)).abs() < 1e-12);
    }
}
