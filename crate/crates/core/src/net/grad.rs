//! Cross-entropy loss and backpropagation restricted to a parameter mask.

use super::{Activation, LabeledFrameSet, Network, TargetSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Floor applied to posteriors before taking logs.
pub const LOG_FLOOR: f64 = 1e-30;

/// Selects which layers are trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    layers: Vec<usize>,
}

impl ParamMask {
    pub fn layers(indices: &[usize]) -> Self {
        let mut layers = indices.to_vec();
        layers.sort_unstable();
        layers.dedup();
        Self { layers }
    }

    pub fn all(net: &Network) -> Self {
        Self {
            layers: (0..net.depth()).collect(),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Number of scalar parameters selected in `net`.
    pub fn cardinality(&self, net: &Network) -> usize {
        self.layers
            .iter()
            .map(|&i| net.layer(i).param_count())
            .sum()
    }

    pub(crate) fn check(&self, net: &Network) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("parameter mask selects no layers"));
        }
        if let Some(&bad) = self.layers.iter().find(|&&i| i >= net.depth()) {
            return Err(Error::config(format!(
                "mask names layer {bad} but the network has {} layers",
                net.depth()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    fn zeros_like(net: &Network, layer: usize) -> Self {
        let l = net.layer(layer);
        Self {
            weights: vec![0.0; l.weights.len()],
            bias: vec![0.0; l.bias.len()],
        }
    }

    /// Weights then bias, matching `LayerParams::flattened`.
    pub fn flattened(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Per-layer gradients; `None` for layers outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrads>>,
}

impl Gradients {
    pub fn zeros(net: &Network, mask: &ParamMask) -> Self {
        let layers = (0..net.depth())
            .map(|i| mask.contains(i).then(|| LayerGrads::zeros_like(net, i)))
            .collect();
        Self { layers }
    }

    pub fn layer(&self, i: usize) -> Option<&LayerGrads> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut LayerGrads> {
        self.layers.get_mut(i).and_then(Option::as_mut)
    }

    /// Number of gradient entries carried.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|g| g.weights.len() + g.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// `-sum_t log p(target_t | o_t)`.
    pub total: f64,
    /// Frames whose target posterior fell below the log floor.
    pub floored: usize,
}

/// Summed cross-entropy of hard targets under the given posteriors.
pub fn cross_entropy(posteriors: &Matrix, targets: &[usize]) -> Result<f64> {
    cross_entropy_with_diagnostics(posteriors, targets).map(|c| c.total)
}

pub fn cross_entropy_with_diagnostics(
    posteriors: &Matrix,
    targets: &[usize],
) -> Result<CrossEntropy> {
    if posteriors.rows() != targets.len() {
        return Err(Error::Dimension {
            what: "cross-entropy targets",
            expected: posteriors.rows(),
            got: targets.len(),
        });
    }
    let mut total = 0.0;
    let mut floored = 0;
    for (t, &target) in targets.iter().enumerate() {
        let row = posteriors.row(t);
        if target >= row.len() {
            return Err(Error::invalid(format!(
                "target {target} outside [0, {})",
                row.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "posterior row {t} sums to {sum}, not 1"
            )));
        }
        let p = row[target];
        if p < LOG_FLOOR {
            floored += 1;
        }
        total -= p.max(LOG_FLOOR).ln();
    }
    if floored > 0 {
        log::debug!("cross-entropy: {floored} frame(s) floored at {LOG_FLOOR:e}");
    }
    Ok(CrossEntropy { total, floored })
}

/// Gradient of the summed cross-entropy over all frames of `batch`.
pub fn backward(net: &Network, batch: &LabeledFrameSet, mask: &ParamMask) -> Result<Gradients> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_gradient(
        net,
        batch.frames(),
        &TargetSet::Hard(batch.targets()),
        &idx,
        mask,
    )
    .map(|(_, g)| g)
}

/// Summed cross-entropy over `indices` and its gradient for masked layers.
pub fn batch_gradient(
    net: &Network,
    frames: &Matrix,
    targets: &TargetSet<'_>,
    indices: &[usize],
    mask: &ParamMask,
) -> Result<(f64, Gradients)> {
    mask.check(net)?;
    if frames.cols() != net.input_dim() {
        return Err(Error::Dimension {
            what: "input frames",
            expected: net.input_dim(),
            got: frames.cols(),
        });
    }
    let mut grads = Gradients::zeros(net, mask);
    let lowest = mask.indices()[0];
    let depth = net.depth();
    let classes = net.class_count();

    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    let mut target = vec![0.0; classes];
    let mut delta: Vec<f64> = Vec::new();
    let mut prev: Vec<f64> = Vec::new();
    let mut loss = 0.0;

    for &t in indices {
        acts.truncate(1);
        if acts.is_empty() {
            acts.push(Vec::new());
        }
        acts[0].clear();
        acts[0].extend_from_slice(frames.row(t));
        net.forward_from(0, &mut acts);

        targets.fill(t, &mut target);
        let y = &acts[depth];
        match targets {
            TargetSet::Hard(labels) => loss -= y[labels[t]].max(LOG_FLOOR).ln(),
            TargetSet::Soft(_) => {
                for (p, q) in target.iter().zip(y) {
                    if *p != 0.0 {
                        loss -= p * q.max(LOG_FLOOR).ln();
                    }
                }
            }
        }
        // softmax + cross-entropy: dL/dx_L = y - target
        delta.clear();
        delta.extend(y.iter().zip(&target).map(|(a, b)| a - b));

        for i in (lowest..depth).rev() {
            let layer = net.layer(i);
            let input = &acts[i];
            if let Some(g) = grads.layers[i].as_mut() {
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[r * layer.in_dim()..(r + 1) * layer.in_dim()];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                    g.bias[r] += d;
                }
            }
            if i == lowest {
                break;
            }
            // propagate to the pre-activation of layer i-1
            prev.clear();
            prev.resize(layer.in_dim(), 0.0);
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.in_dim()..(r + 1) * layer.in_dim()];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            match net.layer(i - 1).activation {
                Activation::Sigmoid => {
                    for (p, a) in prev.iter_mut().zip(input) {
                        *p *= a * (1.0 - a);
                    }
                }
                Activation::Linear => {}
                Activation::Softmax => unreachable!("softmax only at the output"),
            }
            std::mem::swap(&mut delta, &mut prev);
        }
    }
    Ok((loss, grads))
}
