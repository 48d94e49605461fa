use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdapterKind;
use crate::error::{Error, Result};
use crate::hier::HierTarget;
use crate::net::{PenaltyScaling, TrainConfig};
use crate::prior::DEFAULT_VAR_FLOOR;
use crate::sim::{CorpusSpec, ShiftSpec};

/// Adaptation pipelines in the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BASELINE")]
    Baseline,
    #[serde(rename = "LIN")]
    Lin,
    #[serde(rename = "LIN_KLD")]
    LinKld,
    #[serde(rename = "MAP_LIN")]
    MapLin,
    #[serde(rename = "LON")]
    Lon,
    #[serde(rename = "LON_KLD")]
    LonKld,
    #[serde(rename = "LHN")]
    Lhn,
    #[serde(rename = "LHN_KLD")]
    LhnKld,
    #[serde(rename = "MAP_LHN")]
    MapLhn,
    #[serde(rename = "MAP_LHN_HIER")]
    MapLhnHier,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Baseline,
        Method::Lin,
        Method::LinKld,
        Method::MapLin,
        Method::Lon,
        Method::LonKld,
        Method::Lhn,
        Method::LhnKld,
        Method::MapLhn,
        Method::MapLhnHier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "BASELINE",
            Method::Lin => "LIN",
            Method::LinKld => "LIN_KLD",
            Method::MapLin => "MAP_LIN",
            Method::Lon => "LON",
            Method::LonKld => "LON_KLD",
            Method::Lhn => "LHN",
            Method::LhnKld => "LHN_KLD",
            Method::MapLhn => "MAP_LHN",
            Method::MapLhnHier => "MAP_LHN_HIER",
        }
    }

    /// Transform family the method adapts; `None` for the baseline.
    pub fn kind(self) -> Option<AdapterKind> {
        match self {
            Method::Baseline => None,
            Method::Lin | Method::LinKld | Method::MapLin => Some(AdapterKind::Lin),
            Method::Lon | Method::LonKld => Some(AdapterKind::LonDirect),
            Method::Lhn | Method::LhnKld | Method::MapLhn | Method::MapLhnHier => {
                Some(AdapterKind::Lhn)
            }
        }
    }

    /// Row block in the text report: input, output, hidden transforms.
    pub fn block(self) -> usize {
        match self {
            Method::Baseline => 0,
            Method::Lin | Method::LinKld | Method::MapLin => 1,
            Method::Lon | Method::LonKld => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Sigmoid hidden widths; the last one is the bottleneck the LHN acts on.
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 24],
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub shuffle: bool,
    pub penalty_scaling: PenaltyScaling,
    /// MAP strengths; every value becomes its own report row.
    pub lambdas: Vec<f64>,
    /// KLD interpolation weights; every value becomes its own report row.
    pub rhos: Vec<f64>,
    pub hier_lambda1: f64,
    pub hier_lambda2: f64,
    pub hier_target: HierTarget,
    /// Also keep the flat LHN prior (at the first lambda) during
    /// hierarchical adaptation. Requires `hier_target = lhn_and_output_rows`.
    pub hier_flat_prior: bool,
    pub var_floor: f64,
    /// Training speakers adapted to estimate each prior.
    pub prior_speakers: usize,
    pub prior_sentences: usize,
}

impl Default for AdaptationSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.004,
            batch_size: 25,
            epochs: 10,
            rng_seed: 7,
            shuffle: true,
            penalty_scaling: PenaltyScaling::PerEpoch,
            lambdas: vec![3.0],
            rhos: vec![0.5],
            hier_lambda1: 0.01,
            hier_lambda2: 3.0,
            hier_target: HierTarget::LhnAndOutputRows,
            hier_flat_prior: true,
            var_floor: DEFAULT_VAR_FLOOR,
            prior_speakers: 8,
            prior_sentences: 200,
        }
    }
}

impl AdaptationSpec {
    pub fn train_config(&self, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            rng_seed,
            shuffle: self.shuffle,
            penalty_scaling: self.penalty_scaling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub methods: Vec<Method>,
    /// Adaptation sentence counts.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Fraction of classes present in each evaluation speaker's adaptation set.
    pub coverage: f64,
    /// Concurrent cells; 0 uses every core.
    pub jobs: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            budgets: vec![40],
            seeds: (0..10).collect(),
            coverage: 1.0,
            jobs: 0,
        }
    }
}

/// Everything a run needs: corpus, speaker family, network, training
/// schedules, hyperparameter grids and the plan. Omitted sections and keys
/// take the benchmark defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub shift: ShiftSpec,
    pub network: NetworkSpec,
    pub base_training: TrainConfig,
    pub adaptation: AdaptationSpec,
    pub plan: ExperimentPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            shift: ShiftSpec::default(),
            network: NetworkSpec::default(),
            base_training: TrainConfig {
                learning_rate: 0.05,
                batch_size: 32,
                epochs: 20,
                rng_seed: 3,
                shuffle: true,
                penalty_scaling: PenaltyScaling::PerEpoch,
            },
            adaptation: AdaptationSpec::default(),
            plan: ExperimentPlan::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.shift.validate()?;
        self.base_training.validate()?;
        self.adaptation.train_config(0).validate()?;
        let a = &self.adaptation;
        let p = &self.plan;
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::config(
                "network needs at least one positive hidden width",
            ));
        }
        if p.methods.is_empty() {
            return Err(Error::config("plan lists no methods"));
        }
        if p.seeds.is_empty() {
            return Err(Error::config("plan lists no seeds"));
        }
        if p.budgets.is_empty() || p.budgets.contains(&0) {
            return Err(Error::config("plan budgets must be non-empty and positive"));
        }
        if !(p.coverage > 0.0 && p.coverage <= 1.0) {
            return Err(Error::config("coverage must lie in (0, 1]"));
        }
        let uses = |ms: &[Method]| p.methods.iter().any(|m| ms.contains(m));
        if uses(&[Method::MapLin, Method::MapLhn]) || a.hier_flat_prior {
            if a.lambdas.is_empty() || a.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::config("lambdas must be non-empty and non-negative"));
            }
            if a.prior_speakers < 2 || a.prior_sentences == 0 {
                return Err(Error::config(
                    "priors need at least 2 speakers and 1 sentence",
                ));
            }
        }
        if uses(&[Method::LinKld, Method::LonKld, Method::LhnKld])
            && (a.rhos.is_empty() || a.rhos.iter().any(|r| !(0.0..=1.0).contains(r)))
        {
            return Err(Error::config("rhos must be non-empty and inside [0, 1]"));
        }
        if !(a.hier_lambda1 >= 0.0 && a.hier_lambda2 >= 0.0) {
            return Err(Error::config("hier lambdas must be non-negative"));
        }
        if a.hier_flat_prior && a.hier_target != HierTarget::LhnAndOutputRows {
            return Err(Error::config(
                "hier_flat_prior requires hier_target = \"lhn_and_output_rows\"",
            ));
        }
        if !(a.var_floor > 0.0) {
            return Err(Error::config("var_floor must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hash_text(&self.to_toml())
    }

    /// Adapter kinds whose priors the plan needs.
    pub fn prior_kinds(&self) -> Vec<AdapterKind> {
        let mut kinds = Vec::new();
        if self.plan.methods.contains(&Method::MapLin) {
            kinds.push(AdapterKind::Lin);
        }
        if self.plan.methods.contains(&Method::MapLhn)
            || (self.plan.methods.contains(&Method::MapLhnHier) && self.adaptation.hier_flat_prior)
        {
            kinds.push(AdapterKind::Lhn);
        }
        kinds
    }
}

pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
