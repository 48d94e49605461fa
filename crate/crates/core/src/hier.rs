//! Two-level tree prior over output-layer rows ("senone embeddings").
//!
//! Each output unit `s` owns a row `w_s` (weights plus bias, length `D+1`).
//! Leaves hang off parents `theta_p`; the penalty is
//!
//! ```text
//! (lambda2 / 2) * sum_s |w_s - theta_parent(s)|^2 + (lambda1 / 2) * sum_p |theta_p|^2
//! ```
//!
//! With the rows fixed, the minimizing parent is the scaled average
//! `lambda2 * sum_{s in p} w_s / (lambda2 * n_p + lambda1)`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{insert_adapter, make_output_mask, AdapterKind};
use crate::error::{Error, Result};
use crate::net::{
    sgd_train, Gradients, LabeledFrameSet, LayerParams, Network, Objective, ParamMask, Regularizer,
    TrainConfig,
};
use crate::prior::{GaussianPrior, MapRegularizer};

/// Output-layer rows with the bias appended.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingView {
    rows: Vec<Vec<f64>>,
}

impl EmbeddingView {
    pub fn from_layer(layer: &LayerParams) -> Self {
        let d = layer.in_dim();
        let rows = (0..layer.out_dim())
            .map(|s| {
                let mut r = layer.weights[s * d..(s + 1) * d].to_vec();
                r.push(layer.bias[s]);
                r
            })
            .collect();
        Self { rows }
    }

    pub fn from_network(net: &Network) -> Self {
        Self::from_layer(net.output_layer())
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("embedding rows differ in length"));
        }
        Ok(Self { rows })
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.rows[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Number of leaves, `J`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row length, `D + 1`.
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenoneTree {
    leaf_parent: Vec<usize>,
    parent_tags: Vec<String>,
    theta: Vec<Vec<f64>>,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Group tags for classes numbered by group, e.g. from the synthetic corpus.
pub fn tags_from_groups(groups: &[usize]) -> Vec<Option<String>> {
    groups.iter().map(|g| Some(format!("g{g}"))).collect()
}

/// Builds the tree from one tag per output class; parents are numbered in
/// order of first appearance. Parent vectors start at the closed-form
/// minimizer for the given rows.
pub fn build_tree(
    tags: &[Option<String>],
    lambda1: f64,
    lambda2: f64,
    embeddings: &EmbeddingView,
) -> Result<SenoneTree> {
    if tags.len() != embeddings.len() {
        return Err(Error::Dimension {
            what: "tree leaves",
            expected: embeddings.len(),
            got: tags.len(),
        });
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
        return Err(Error::config("lambda1 and lambda2 must be non-negative"));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut parent_tags = Vec::new();
    let mut leaf_parent = Vec::with_capacity(tags.len());
    for (leaf, tag) in tags.iter().enumerate() {
        let tag = tag
            .as_deref()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::invalid(format!("class {leaf} has no group tag")))?;
        let p = *index.entry(tag).or_insert_with(|| {
            parent_tags.push(tag.to_owned());
            parent_tags.len() - 1
        });
        leaf_parent.push(p);
    }
    let mut tree = SenoneTree {
        theta: vec![vec![0.0; embeddings.dim()]; parent_tags.len()],
        leaf_parent,
        parent_tags,
        lambda1,
        lambda2,
    };
    update_theta(embeddings, &mut tree);
    Ok(tree)
}

impl SenoneTree {
    /// Number of parents, `S`.
    pub fn parent_count(&self) -> usize {
        self.parent_tags.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_parent.len()
    }

    pub fn parent_of(&self, leaf: usize) -> usize {
        self.leaf_parent[leaf]
    }

    pub fn parent_tag(&self, parent: usize) -> &str {
        &self.parent_tags[parent]
    }

    pub fn theta(&self) -> &[Vec<f64>] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<Vec<f64>>) -> Result<()> {
        if theta.len() != self.parent_count() {
            return Err(Error::Dimension {
                what: "theta vectors",
                expected: self.parent_count(),
                got: theta.len(),
            });
        }
        self.theta = theta;
        Ok(())
    }

    /// Leaves of each parent.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.parent_count()];
        for (leaf, &p) in self.leaf_parent.iter().enumerate() {
            m[p].push(leaf);
        }
        m
    }

    fn check(&self, emb: &EmbeddingView) {
        debug_assert_eq!(emb.len(), self.leaf_count());
        debug_assert!(self.theta.iter().all(|t| t.len() == emb.dim()));
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn hier_penalty(embeddings: &EmbeddingView, tree: &SenoneTree) -> f64 {
    tree.check(embeddings);
    let leaves: f64 = (0..tree.leaf_count())
        .map(|s| sq_dist(embeddings.row(s), &tree.theta[tree.leaf_parent[s]]))
        .sum();
    let parents: f64 = tree
        .theta
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>())
        .sum();
    0.5 * tree.lambda2 * leaves + 0.5 * tree.lambda1 * parents
}

/// Replaces every parent vector with its closed-form minimizer given the
/// rows. Returns the parents whose denominator `lambda2 * n + lambda1` was
/// zero; those are set to 0.
pub fn update_theta(embeddings: &EmbeddingView, tree: &mut SenoneTree) -> Vec<usize> {
    tree.check(embeddings);
    let dim = embeddings.dim();
    let mut sums = vec![vec![0.0; dim]; tree.parent_count()];
    let mut counts = vec![0usize; tree.parent_count()];
    for (s, &p) in tree.leaf_parent.iter().enumerate() {
        counts[p] += 1;
        for (acc, w) in sums[p].iter_mut().zip(embeddings.row(s)) {
            *acc += w;
        }
    }
    let mut flagged = Vec::new();
    for (p, (sum, n)) in sums.into_iter().zip(counts).enumerate() {
        let denom = tree.lambda2 * n as f64 + tree.lambda1;
        if denom == 0.0 {
            flagged.push(p);
            tree.theta[p] = vec![0.0; dim];
        } else {
            tree.theta[p] = sum.into_iter().map(|v| tree.lambda2 * v / denom).collect();
        }
    }
    if !flagged.is_empty() {
        log::warn!(
            "update_theta: {} parent(s) with zero denominator",
            flagged.len()
        );
    }
    flagged
}

/// Gradient of the penalty with respect to each parent vector.
pub fn theta_gradient(embeddings: &EmbeddingView, tree: &SenoneTree) -> Vec<Vec<f64>> {
    let mut g: Vec<Vec<f64>> = tree
        .theta
        .iter()
        .map(|t| t.iter().map(|v| tree.lambda1 * v).collect())
        .collect();
    for (s, &p) in tree.leaf_parent.iter().enumerate() {
        for ((gv, t), w) in g[p].iter_mut().zip(&tree.theta[p]).zip(embeddings.row(s)) {
            *gv += tree.lambda2 * (t - w);
        }
    }
    g
}

/// Tree penalty on the rows of one layer, with parents refreshed once per epoch.
#[derive(Debug, Clone)]
pub struct HierRegularizer {
    pub tree: SenoneTree,
    pub layer: usize,
}

impl Regularizer for HierRegularizer {
    fn penalty(&self, net: &Network) -> f64 {
        hier_penalty(
            &EmbeddingView::from_layer(net.layer(self.layer)),
            &self.tree,
        )
    }

    fn add_gradient(&self, net: &Network, grads: &mut Gradients) {
        let lambda2 = self.tree.lambda2;
        if lambda2 == 0.0 {
            return;
        }
        let l = net.layer(self.layer);
        let d = l.in_dim();
        let Some(g) = grads.layer_mut(self.layer) else {
            return;
        };
        for s in 0..l.out_dim() {
            let theta = &self.tree.theta[self.tree.leaf_parent[s]];
            let w = &l.weights[s * d..(s + 1) * d];
            for ((gv, wv), tv) in g.weights[s * d..(s + 1) * d].iter_mut().zip(w).zip(theta) {
                *gv += lambda2 * (wv - tv);
            }
            g.bias[s] += lambda2 * (l.bias[s] - theta[d]);
        }
    }

    fn add_curvature(&self, net: &Network, curv: &mut Gradients) {
        let lambda2 = self.tree.lambda2;
        if lambda2 == 0.0 {
            return;
        }
        let _ = net;
        if let Some(c) = curv.layer_mut(self.layer) {
            c.values_mut().for_each(|v| *v += lambda2);
        }
    }

    fn end_epoch(&mut self, net: &Network) {
        update_theta(
            &EmbeddingView::from_layer(net.layer(self.layer)),
            &mut self.tree,
        );
    }
}

/// Which parameters adapt when the tree prior is in force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierTarget {
    /// Output rows only; the tree penalty applies to them directly.
    #[default]
    OutputRows,
    /// An identity LHN plus the output rows, penalty on the rows.
    LhnAndOutputRows,
}

#[derive(Debug, Clone)]
pub struct HierConfig {
    pub train: TrainConfig,
    pub target: HierTarget,
    /// Optional flat Gaussian prior (with its lambda) on the LHN weights;
    /// only meaningful for `LhnAndOutputRows`.
    pub flat_prior: Option<(GaussianPrior, f64)>,
}

#[derive(Debug, Clone)]
pub struct HierOutcome {
    pub net: Network,
    /// Tree with parents at their final closed-form values.
    pub tree: SenoneTree,
}

/// Alternates SGD on the masked parameters (cross-entropy plus tree
/// penalty) with a closed-form parent refresh after every epoch.
pub fn adapt_hier(
    net: &Network,
    data: &LabeledFrameSet,
    tree: &SenoneTree,
    cfg: &HierConfig,
) -> Result<HierOutcome> {
    if tree.leaf_count() != net.class_count() {
        return Err(Error::Dimension {
            what: "tree leaves vs output units",
            expected: net.class_count(),
            got: tree.leaf_count(),
        });
    }
    let row_len = net.output_layer().in_dim() + 1;
    if tree.theta.iter().any(|t| t.len() != row_len) {
        return Err(Error::Dimension {
            what: "theta length",
            expected: row_len,
            got: tree.theta[0].len(),
        });
    }
    let (work, mask, lhn_layer) = match cfg.target {
        HierTarget::OutputRows => (net.clone(), make_output_mask(net), None),
        HierTarget::LhnAndOutputRows => {
            let ins = insert_adapter(net, AdapterKind::Lhn)?;
            let out = ins.net.output_layer_index();
            (
                ins.net,
                ParamMask::layers(&[ins.placement.layer, out]),
                Some(ins.placement.layer),
            )
        }
    };
    let mut objective = Objective::cross_entropy().with_regularizer(HierRegularizer {
        tree: tree.clone(),
        layer: work.output_layer_index(),
    });
    if let Some((prior, lambda)) = &cfg.flat_prior {
        let layer = lhn_layer
            .ok_or_else(|| Error::config("a flat prior needs hier_target = lhn_and_output_rows"))?;
        if prior.len() != work.layer(layer).param_count() {
            return Err(Error::config("flat prior length does not match the LHN"));
        }
        objective = objective.with_regularizer(MapRegularizer {
            prior: prior.clone(),
            lambda: *lambda,
            layer,
        });
    }
    let out = sgd_train(&work, data, &cfg.train, &mask, &mut objective)?;
    let tree = objective
        .regularizer::<HierRegularizer>()
        .expect("hier regularizer installed above")
        .tree
        .clone();
    Ok(HierOutcome { net: out.net, tree })
}

const TREE_HEADER: &str = "# bayes-adapt senone tree v1";

/// Leaf-to-parent assignment and strengths as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeFile {
    pub tags: Vec<String>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl TreeFile {
    pub fn from_tree(tree: &SenoneTree) -> Self {
        Self {
            tags: tree
                .leaf_parent
                .iter()
                .map(|&p| tree.parent_tags[p].clone())
                .collect(),
            lambda1: tree.lambda1,
            lambda2: tree.lambda2,
        }
    }

    pub fn build(&self, embeddings: &EmbeddingView) -> Result<SenoneTree> {
        let tags: Vec<Option<String>> = self.tags.iter().cloned().map(Some).collect();
        build_tree(&tags, self.lambda1, self.lambda2, embeddings)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(TREE_HEADER);
        s.push('\n');
        s.push_str(&format!(
            "lambda1 {:?}\nlambda2 {:?}\n",
            self.lambda1, self.lambda2
        ));
        s.push_str(&format!("leaves {}\n", self.tags.len()));
        for (leaf, tag) in self.tags.iter().enumerate() {
            s.push_str(&format!("{leaf} {tag}\n"));
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TREE_HEADER => {}
            _ => return Err(bad(format!("missing header {TREE_HEADER:?}"))),
        }
        let mut field = |name: &str| -> Result<String> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| bad(format!("missing {name} line")))?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(v), None) if k == name => Ok(v.to_owned()),
                _ => Err(bad(format!("line {}: expected `{name} <value>`", n + 1))),
            }
        };
        let lambda1: f64 = field("lambda1")?
            .parse()
            .map_err(|e| bad(format!("lambda1: {e}")))?;
        let lambda2: f64 = field("lambda2")?
            .parse()
            .map_err(|e| bad(format!("lambda2: {e}")))?;
        let leaves: usize = field("leaves")?
            .parse()
            .map_err(|e| bad(format!("leaves: {e}")))?;
        let mut tags: Vec<Option<String>> = vec![None; leaves];
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(leaf), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!(
                    "line {}: expected `<leaf> <parent tag>`",
                    n + 1
                )));
            };
            let leaf: usize = leaf
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            if leaf >= leaves {
                return Err(bad(format!("line {}: leaf {leaf} out of range", n + 1)));
            }
            if tags[leaf].replace(tag.to_owned()).is_some() {
                return Err(bad(format!("line {}: leaf {leaf} listed twice", n + 1)));
            }
        }
        let tags = tags
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| bad(format!("leaf {i} has no parent"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tags,
            lambda1,
            lambda2,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.render().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Self::parse(&text, &path.display().to_string())
    }
}
