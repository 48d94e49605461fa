//! Mini-batch SGD with a pluggable objective.

use std::any::Any;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    batch_gradient, cross_entropy, Gradients, LabeledFrameSet, Network, ParamMask, TargetSet,
};
use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Clamped to the number of frames.
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
    #[serde(default)]
    pub penalty_scaling: PenaltyScaling,
}

/// How much of each regularizer penalty one mini-batch step is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScaling {
    /// The whole penalty on every step, as in weight decay.
    PerBatch,
    /// A batch of `n` frames out of `T` is charged `n / T` of the penalty,
    /// so an epoch sums to one copy against the summed cross-entropy.
    #[default]
    PerEpoch,
}

fn default_shuffle() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.008,
            batch_size: 32,
            epochs: 10,
            rng_seed: 0,
            shuffle: true,
            penalty_scaling: PenaltyScaling::PerEpoch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// A parameter penalty added to the data term of an objective. How much of
/// it each mini-batch step pays is set by [`PenaltyScaling`].
pub trait Regularizer: Any + Send + Sync {
    fn penalty(&self, net: &Network) -> f64;

    fn add_gradient(&self, net: &Network, grads: &mut Gradients);

    /// Adds the diagonal of the penalty Hessian. SGD caps each parameter's
    /// step at `1 / curvature` so stiff penalties stay stable.
    fn add_curvature(&self, _net: &Network, _curv: &mut Gradients) {}

    /// Called after every epoch with the current parameters.
    fn end_epoch(&mut self, _net: &Network) {}
}

/// Cross-entropy against hard labels or per-frame soft targets, plus any
/// number of parameter penalties.
#[derive(Default)]
pub struct Objective {
    soft_targets: Option<Matrix>,
    regularizers: Vec<Box<dyn Regularizer>>,
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Objective")
            .field(
                "soft_targets",
                &self.soft_targets.as_ref().map(Matrix::rows),
            )
            .field("regularizers", &self.regularizers.len())
            .finish()
    }
}

impl Objective {
    pub fn cross_entropy() -> Self {
        Self::default()
    }

    /// Replaces the hard labels with one target distribution per frame.
    pub fn with_soft_targets(mut self, targets: Matrix) -> Self {
        self.soft_targets = Some(targets);
        self
    }

    pub fn with_regularizer(mut self, reg: impl Regularizer) -> Self {
        self.regularizers.push(Box::new(reg));
        self
    }

    pub fn soft_targets(&self) -> Option<&Matrix> {
        self.soft_targets.as_ref()
    }

    /// First regularizer of type `R`, if any.
    pub fn regularizer<R: Regularizer>(&self) -> Option<&R> {
        self.regularizers
            .iter()
            .find_map(|r| (r.as_ref() as &dyn Any).downcast_ref::<R>())
    }

    pub fn penalty(&self, net: &Network) -> f64 {
        self.regularizers.iter().map(|r| r.penalty(net)).sum()
    }

    /// Objective value and gradient over the frames in `indices`, with the
    /// full penalty.
    pub fn evaluate(
        &self,
        net: &Network,
        data: &LabeledFrameSet,
        indices: &[usize],
        mask: &ParamMask,
    ) -> Result<(f64, Gradients)> {
        self.evaluate_weighted(net, data, indices, mask, 1.0)
    }

    /// As [`Objective::evaluate`] with the penalty multiplied by `weight`.
    pub fn evaluate_weighted(
        &self,
        net: &Network,
        data: &LabeledFrameSet,
        indices: &[usize],
        mask: &ParamMask,
        weight: f64,
    ) -> Result<(f64, Gradients)> {
        let targets = match &self.soft_targets {
            Some(m) => TargetSet::Soft(m),
            None => TargetSet::Hard(data.targets()),
        };
        let (loss, mut grads) = batch_gradient(net, data.frames(), &targets, indices, mask)?;
        if self.regularizers.is_empty() {
            return Ok((loss, grads));
        }
        if weight == 1.0 {
            for r in &self.regularizers {
                r.add_gradient(net, &mut grads);
            }
        } else {
            let mut pg = Gradients::zeros(net, mask);
            for r in &self.regularizers {
                r.add_gradient(net, &mut pg);
            }
            for (g, p) in grads.layers.iter_mut().zip(&pg.layers) {
                if let (Some(g), Some(p)) = (g, p) {
                    for (a, b) in g.values_mut().zip(p.weights.iter().chain(&p.bias)) {
                        *a += weight * b;
                    }
                }
            }
        }
        Ok((loss + weight * self.penalty(net), grads))
    }

    fn step_sizes(
        &self,
        net: &Network,
        mask: &ParamMask,
        lr: f64,
        weight: f64,
    ) -> Option<Gradients> {
        if self.regularizers.is_empty() {
            return None;
        }
        let mut curv = Gradients::zeros(net, mask);
        for r in &self.regularizers {
            r.add_curvature(net, &mut curv);
        }
        let mut stiff = false;
        for layer in curv.layers.iter_mut().flatten() {
            for c in layer.values_mut() {
                let c_w = *c * weight;
                if c_w * lr > 1.0 {
                    stiff = true;
                    *c = 1.0 / c_w;
                } else {
                    *c = lr;
                }
            }
        }
        stiff.then_some(curv)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    /// Summed objective over each epoch's mini-batches, one entry per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains the masked layers of a copy of `net`.
///
/// Deterministic given `cfg.rng_seed`. The final short batch of an epoch is
/// used as-is.
pub fn sgd_train(
    net: &Network,
    data: &LabeledFrameSet,
    cfg: &TrainConfig,
    mask: &ParamMask,
    objective: &mut Objective,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    mask.check(net)?;
    if data.feature_dim() != net.input_dim() {
        return Err(Error::Dimension {
            what: "training frames",
            expected: net.input_dim(),
            got: data.feature_dim(),
        });
    }
    if data.class_count() != net.class_count() {
        return Err(Error::Dimension {
            what: "training class count",
            expected: net.class_count(),
            got: data.class_count(),
        });
    }
    if let Some(m) = &objective.soft_targets {
        if m.rows() != data.len() || m.cols() != net.class_count() {
            return Err(Error::Dimension {
                what: "soft target rows",
                expected: data.len(),
                got: m.rows(),
            });
        }
    }

    let mut net = net.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            net,
            loss_trace: trace,
        });
    }

    let lr = cfg.learning_rate;
    let batch = cfg.batch_size.min(data.len());
    let weight = |n: usize| match cfg.penalty_scaling {
        PenaltyScaling::PerBatch => 1.0,
        PenaltyScaling::PerEpoch => n as f64 / data.len() as f64,
    };
    // Curvature is constant for every regularizer here, so step sizes only
    // depend on the batch length: a full batch or the final short one.
    let full_steps = objective.step_sizes(&net, mask, lr, weight(batch));
    let tail = data.len() % batch;
    let tail_steps = if tail == 0 {
        None
    } else {
        objective.step_sizes(&net, mask, lr, weight(tail))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let (loss, grads) =
                objective.evaluate_weighted(&net, data, chunk, mask, weight(chunk.len()))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            let steps = if chunk.len() == batch {
                full_steps.as_ref()
            } else {
                tail_steps.as_ref()
            };
            apply_step(&mut net, &grads, steps, lr);
            if !net.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            epoch_loss += loss;
        }
        trace.push(epoch_loss);
        for r in objective.regularizers.iter_mut() {
            r.end_epoch(&net);
        }
    }
    Ok(TrainOutcome {
        net,
        loss_trace: trace,
    })
}

fn apply_step(net: &mut Network, grads: &Gradients, steps: Option<&Gradients>, lr: f64) {
    for (i, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let layer = net.layer_mut(i);
        match steps.and_then(|s| s.layer(i)) {
            None => {
                for (p, d) in layer.weights.iter_mut().zip(&g.weights) {
                    *p -= lr * d;
                }
                for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                    *p -= lr * d;
                }
            }
            Some(s) => {
                for ((p, d), h) in layer.weights.iter_mut().zip(&g.weights).zip(&s.weights) {
                    *p -= h * d;
                }
                for ((p, d), h) in layer.bias.iter_mut().zip(&g.bias).zip(&s.bias) {
                    *p -= h * d;
                }
            }
        }
    }
}

/// Fraction of frames whose argmax posterior differs from the target.
/// Ties go to the lowest class index.
pub fn frame_error_rate(net: &Network, data: &LabeledFrameSet) -> Result<f64> {
    let post = net.posteriors(data.frames())?;
    let wrong = data
        .targets()
        .iter()
        .enumerate()
        .filter(|(t, &y)| argmax(post.row(*t)) != y)
        .count();
    Ok(wrong as f64 / data.len() as f64)
}

/// Cross-entropy per frame.
pub fn mean_cross_entropy(net: &Network, data: &LabeledFrameSet) -> Result<f64> {
    let post = net.posteriors(data.frames())?;
    Ok(cross_entropy(&post, data.targets())? / data.len() as f64)
}
