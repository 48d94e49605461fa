//! Augmented linear transforms: input (LIN), hidden (LHN), and direct
//! output-layer adaptation (LON).
//!
//! LIN and LHN insert a square linear layer initialised to the identity with
//! zero bias, so the augmented network computes exactly what the original
//! did. Only the inserted layer is trainable. LON inserts nothing and trains
//! the output layer directly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{
    sgd_train, Activation, LabeledFrameSet, LayerParams, Network, Objective, ParamMask, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterKind {
    #[serde(rename = "LIN")]
    Lin,
    #[serde(rename = "LHN")]
    Lhn,
    /// Direct adaptation of the output layer; nothing is inserted.
    #[serde(rename = "LON")]
    LonDirect,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lin => "LIN",
            AdapterKind::Lhn => "LHN",
            AdapterKind::LonDirect => "LON",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            AdapterKind::Lin => 1,
            AdapterKind::Lhn => 2,
            AdapterKind::LonDirect => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(AdapterKind::Lin),
            2 => Some(AdapterKind::Lhn),
            3 => Some(AdapterKind::LonDirect),
            _ => None,
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LIN" => Ok(AdapterKind::Lin),
            "LHN" => Ok(AdapterKind::Lhn),
            "LON" | "LON_DIRECT" => Ok(AdapterKind::LonDirect),
            other => Err(Error::config(format!("unknown adapter kind {other:?}"))),
        }
    }
}

/// Where an inserted adapter lives: `layer` is its index in the augmented net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterPlacement {
    pub kind: AdapterKind,
    pub layer: usize,
}

/// A square affine transform `x -> A x + c` read out of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdapter {
    pub transform: Matrix,
    pub bias: Vec<f64>,
    pub placement: AdapterPlacement,
}

impl LinearAdapter {
    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Row-major transform followed by bias; length `d*d + d`.
    pub fn flattened(&self) -> Vec<f64> {
        let mut w = self.transform.as_slice().to_vec();
        w.extend_from_slice(&self.bias);
        w
    }
}

impl Network {
    /// The inserted adapter, if any.
    pub fn linear_adapter(&self) -> Option<LinearAdapter> {
        let placement = self.adapter()?;
        let layer = self.layer(placement.layer);
        Some(LinearAdapter {
            transform: layer.weight_matrix(),
            bias: layer.bias.clone(),
            placement,
        })
    }
}

#[derive(Debug, Clone)]
pub struct InsertedAdapter {
    pub net: Network,
    pub placement: AdapterPlacement,
    pub mask: ParamMask,
}

/// Inserts an identity LIN or LHN layer.
pub fn insert_adapter(net: &Network, kind: AdapterKind) -> Result<InsertedAdapter> {
    if net.adapter().is_some() {
        return Err(Error::config("network already carries an adapter"));
    }
    let (index, dim) = match kind {
        AdapterKind::Lin => (0, net.input_dim()),
        AdapterKind::Lhn => {
            if net.depth() < 2 {
                return Err(Error::config("LHN needs at least one hidden layer"));
            }
            (net.depth() - 1, net.output_layer().in_dim())
        }
        AdapterKind::LonDirect => {
            return Err(Error::config(
                "LON adapts the output layer directly; use make_output_mask",
            ))
        }
    };
    let identity = LayerParams::new(
        dim,
        dim,
        Matrix::identity(dim).into_vec(),
        vec![0.0; dim],
        Activation::Linear,
    )?;
    let (input_dim, mut layers, _) = net.clone().into_parts();
    layers.insert(index, identity);
    let placement = AdapterPlacement { kind, layer: index };
    let net = Network::with_adapter(input_dim, layers, Some(placement))?;
    Ok(InsertedAdapter {
        net,
        placement,
        mask: ParamMask::layers(&[index]),
    })
}

/// Mask selecting only the output layer.
pub fn make_output_mask(net: &Network) -> ParamMask {
    ParamMask::layers(&[net.output_layer_index()])
}

/// Number of adaptable parameters `kind` introduces on `net`.
pub fn adaptable_param_count(net: &Network, kind: AdapterKind) -> usize {
    let d = match kind {
        AdapterKind::Lin => net.input_dim(),
        AdapterKind::Lhn => net.output_layer().in_dim(),
        AdapterKind::LonDirect => return net.output_layer().param_count(),
    };
    d * d + d
}

/// Network ready for adaptation plus the index of the trainable layer.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub net: Network,
    pub layer: usize,
    pub mask: ParamMask,
}

pub fn prepare(net: &Network, kind: AdapterKind) -> Result<Prepared> {
    match kind {
        AdapterKind::LonDirect => Ok(Prepared {
            net: net.clone(),
            layer: net.output_layer_index(),
            mask: make_output_mask(net),
        }),
        _ => {
            let ins = insert_adapter(net, kind)?;
            Ok(Prepared {
                net: ins.net,
                layer: ins.placement.layer,
                mask: ins.mask,
            })
        }
    }
}

/// Adapts only the `kind` parameters of `net` on one condition's data.
pub fn adapt(
    net: &Network,
    data: &LabeledFrameSet,
    cfg: &TrainConfig,
    kind: AdapterKind,
    objective: &mut Objective,
) -> Result<Network> {
    let prep = prepare(net, kind)?;
    sgd_train(&prep.net, data, cfg, &prep.mask, objective).map(|o| o.net)
}

/// Folds an inserted adapter into the layer that consumes it:
/// `W' = W A`, `b' = W c + b`.
pub fn collapse_adapter(net: &Network) -> Result<Network> {
    let placement = net
        .adapter()
        .ok_or_else(|| Error::invalid("network has no adapter to collapse"))?;
    let k = placement.layer;
    let adapter = net.layer(k);
    let next = net.layer(k + 1);
    let merged_w = next.weight_matrix().matmul(&adapter.weight_matrix())?;
    let mut merged_b = next.bias.clone();
    for (r, b) in merged_b.iter_mut().enumerate() {
        let row = &next.weights[r * next.in_dim()..(r + 1) * next.in_dim()];
        *b += crate::linalg::dot(row, &adapter.bias);
    }
    let merged = LayerParams::new(
        adapter.in_dim(),
        next.out_dim(),
        merged_w.into_vec(),
        merged_b,
        next.activation,
    )?;
    let (input_dim, mut layers, _) = net.clone().into_parts();
    layers.remove(k);
    layers[k] = merged;
    Network::from_layers(input_dim, layers)
}

/// Merges an LHN adapter into the output layer.
pub fn collapse_lhn(net: &Network) -> Result<Network> {
    match net.adapter() {
        Some(p) if p.kind == AdapterKind::Lhn => collapse_adapter(net),
        Some(p) => Err(Error::invalid(format!(
            "expected an LHN adapter, found {}",
            p.kind
        ))),
        None => Err(Error::invalid("network has no LHN adapter")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lin_mask_cardinality() {
        let net = Network::new(4, &[6, 3], 5, 0).unwrap();
        let ins = insert_adapter(&net, AdapterKind::Lin).unwrap();
        assert_eq!(ins.mask.cardinality(&ins.net), 20);
        assert_eq!(ins.placement.layer, 0);
    }

    #[test]
    fn lhn_sits_before_output() {
        let net = Network::new(4, &[6, 3], 5, 0).unwrap();
        let ins = insert_adapter(&net, AdapterKind::Lhn).unwrap();
        assert_eq!(ins.net.depth(), 4);
        assert_eq!(ins.placement.layer, 2);
        assert_eq!(ins.net.layer(2).in_dim(), 3);
        assert_eq!(ins.mask.cardinality(&ins.net), 12);
        let a = ins.net.linear_adapter().unwrap();
        assert_eq!(a.flattened().len(), 12);
        assert_eq!(a.transform, Matrix::identity(3));
    }

    #[test]
    fn lon_rejected_by_insert() {
        let net = Network::new(4, &[6], 5, 0).unwrap();
        assert!(insert_adapter(&net, AdapterKind::LonDirect).is_err());
        assert_eq!(make_output_mask(&net).cardinality(&net), 6 * 5 + 5);
    }

    #[test]
    fn toy_output_mask() {
        let net = Network::new(2, &[5], 3, 0).unwrap();
        assert_eq!(make_output_mask(&net).cardinality(&net), 18);
    }

    #[test]
    fn double_insertion_rejected() {
        let net = Network::new(4, &[6], 5, 0).unwrap();
        let ins = insert_adapter(&net, AdapterKind::Lhn).unwrap();
        assert!(insert_adapter(&ins.net, AdapterKind::Lin).is_err());
    }

    #[test]
    fn collapse_identity_recovers_original() {
        let net = Network::new(4, &[6, 3], 5, 11).unwrap();
        let ins = insert_adapter(&net, AdapterKind::Lhn).unwrap();
        let back = collapse_lhn(&ins.net).unwrap();
        for (a, b) in back.layers().iter().zip(net.layers()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in a.bias.iter().zip(&b.bias) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert!(collapse_lhn(&net).is_err());
    }

    #[test]
    fn collapse_lin_is_rejected_by_collapse_lhn_but_folds() {
        let net = Network::new(3, &[4], 2, 5).unwrap();
        let mut ins = insert_adapter(&net, AdapterKind::Lin).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for w in ins.net.layer_mut(0).weights.iter_mut() {
            *w += rng.random_range(-0.3..0.3);
        }
        assert!(collapse_lhn(&ins.net).is_err());
        let folded = collapse_adapter(&ins.net).unwrap();
        let x = [0.3, -0.7, 1.1];
        let a = ins.net.posterior(&x).unwrap();
        let b = folded.posterior(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("lhn".parse::<AdapterKind>().unwrap(), AdapterKind::Lhn);
        assert_eq!(
            "LON".parse::<AdapterKind>().unwrap(),
            AdapterKind::LonDirect
        );
        assert!("xyz".parse::<AdapterKind>().is_err());
    }
}
