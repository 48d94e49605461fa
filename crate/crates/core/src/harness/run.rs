use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AdaptationSpec, ExperimentConfig, Method};
use crate::adapt::{adapt, AdapterKind};
use crate::error::{Error, Result};
use crate::hier::{adapt_hier, tags_from_groups, EmbeddingView, HierConfig, TreeFile};
use crate::net::{
    frame_error_rate, mean_cross_entropy, sgd_train, LabeledFrameSet, Network, Objective,
    ParamMask, TrainConfig,
};
use crate::prior::{
    adapt_kld, adapt_map, fit_prior, harvest_speaker_transforms, GaussianPrior, Harvest, KldConfig,
    MapConfig,
};
use crate::seeds;
use crate::sim::{
    choose_covered, forgetting_probe, gen_base_corpus, gen_speaker, AdaptationBudget, BaseCorpus,
    SpeakerData, SpeakerShift,
};

/// Hyperparameter setting of one method row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    None,
    Lambda(f64),
    Rho(f64),
    Hier {
        lambda1: f64,
        lambda2: f64,
        flat_lambda: Option<f64>,
    },
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::None => f.write_str("-"),
            Setting::Lambda(l) => write!(f, "lambda={l}"),
            Setting::Rho(r) => write!(f, "rho={r}"),
            Setting::Hier {
                lambda1,
                lambda2,
                flat_lambda,
            } => {
                write!(f, "l1={lambda1};l2={lambda2}")?;
                if let Some(l) = flat_lambda {
                    write!(f, ";lambda={l}")?;
                }
                Ok(())
            }
        }
    }
}

/// Settings a method is run at, in report order.
pub fn settings_for(method: Method, a: &AdaptationSpec) -> Vec<Setting> {
    match method {
        Method::MapLin | Method::MapLhn => a.lambdas.iter().map(|&l| Setting::Lambda(l)).collect(),
        Method::LinKld | Method::LonKld | Method::LhnKld => {
            a.rhos.iter().map(|&r| Setting::Rho(r)).collect()
        }
        Method::MapLhnHier => vec![Setting::Hier {
            lambda1: a.hier_lambda1,
            lambda2: a.hier_lambda2,
            flat_lambda: a.hier_flat_prior.then(|| a.lambdas[0]),
        }],
        _ => vec![Setting::None],
    }
}

/// Trained base network, fitted priors and the class tree shared by all cells.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub base: Network,
    pub priors: BTreeMap<AdapterKind, GaussianPrior>,
    pub tree: Option<TreeFile>,
}

pub fn train_base(cfg: &ExperimentConfig, corpus: &BaseCorpus) -> Result<Network> {
    let net = Network::new(
        cfg.corpus.feature_dim,
        &cfg.network.hidden,
        cfg.corpus.class_count,
        cfg.network.init_seed,
    )?;
    let mask = ParamMask::all(&net);
    let out = sgd_train(
        &net,
        &corpus.train,
        &cfg.base_training,
        &mask,
        &mut Objective::cross_entropy(),
    )?;
    Ok(out.net)
}

/// Seed of evaluation speaker `seed`; prior speakers come from a separate stream.
pub fn eval_speaker_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    seeds::derive(cfg.corpus.rng_seed, "eval-speaker", seed)
}

pub fn prior_speaker_seed(cfg: &ExperimentConfig, index: u64) -> u64 {
    seeds::derive(cfg.corpus.rng_seed, "prior-speaker", index)
}

/// Full-coverage adaptation sets of the prior-estimation speakers.
pub fn prior_speakers(
    cfg: &ExperimentConfig,
    corpus: &BaseCorpus,
) -> Result<Vec<(u32, LabeledFrameSet)>> {
    let a = &cfg.adaptation;
    (0..a.prior_speakers)
        .map(|i| {
            let seed = prior_speaker_seed(cfg, i as u64);
            let shift = SpeakerShift::sample(cfg.corpus.feature_dim, &cfg.shift, seed);
            let budget = AdaptationBudget::full(a.prior_sentences, cfg.corpus.class_count)?;
            let data = gen_speaker(corpus, &cfg.shift, &shift, &budget, i as u32)?;
            Ok((i as u32, data.adapt))
        })
        .collect()
}

/// Plain `kind` adaptation on every prior-estimation speaker.
pub fn harvest_samples(
    cfg: &ExperimentConfig,
    corpus: &BaseCorpus,
    base: &Network,
    kind: AdapterKind,
) -> Result<Harvest> {
    let speakers = prior_speakers(cfg, corpus)?;
    let train = cfg
        .adaptation
        .train_config(seeds::derive(cfg.adaptation.rng_seed, "prior", 0));
    let harvest = harvest_speaker_transforms(base, &speakers, &train, kind)?;
    log::info!(
        "{kind} transforms from {} speakers ({} skipped)",
        harvest.samples.len(),
        harvest.skipped.len()
    );
    Ok(harvest)
}

pub fn harvest_prior(
    cfg: &ExperimentConfig,
    corpus: &BaseCorpus,
    base: &Network,
    kind: AdapterKind,
) -> Result<GaussianPrior> {
    let harvest = harvest_samples(cfg, corpus, base, kind)?;
    fit_prior(&harvest.samples, cfg.adaptation.var_floor)
}

pub fn default_tree(cfg: &ExperimentConfig) -> TreeFile {
    TreeFile {
        tags: tags_from_groups(&cfg.corpus.groups())
            .into_iter()
            .map(|t| t.expect("groups always tag"))
            .collect(),
        lambda1: cfg.adaptation.hier_lambda1,
        lambda2: cfg.adaptation.hier_lambda2,
    }
}

/// Fills in whatever `preloaded` lacks: base network, priors, tree.
pub fn prepare_artifacts(
    cfg: &ExperimentConfig,
    corpus: &BaseCorpus,
    preloaded: Option<Artifacts>,
) -> Result<Artifacts> {
    let mut art = match preloaded {
        Some(a) => a,
        None => {
            log::info!("training base network");
            Artifacts {
                base: train_base(cfg, corpus)?,
                priors: BTreeMap::new(),
                tree: None,
            }
        }
    };
    if art.base.input_dim() != cfg.corpus.feature_dim
        || art.base.class_count() != cfg.corpus.class_count
    {
        return Err(Error::config(
            "base network does not match the corpus dimensions",
        ));
    }
    for kind in cfg.prior_kinds() {
        if !art.priors.contains_key(&kind) {
            let prior = harvest_prior(cfg, corpus, &art.base, kind)?;
            art.priors.insert(kind, prior);
        }
    }
    if art.tree.is_none() && cfg.plan.methods.contains(&Method::MapLhnHier) {
        art.tree = Some(default_tree(cfg));
    }
    Ok(art)
}

/// Runs one method at one setting from the base network.
pub fn apply_method(
    method: Method,
    setting: Setting,
    art: &Artifacts,
    data: &LabeledFrameSet,
    cfg: &ExperimentConfig,
    train: &TrainConfig,
) -> Result<Network> {
    let base = &art.base;
    let prior = |kind: AdapterKind| {
        art.priors
            .get(&kind)
            .ok_or_else(|| Error::config(format!("no {kind} prior available")))
    };
    let plain = |kind| adapt(base, data, train, kind, &mut Objective::cross_entropy());
    let kld = |kind, rho| {
        adapt_kld(
            base,
            data,
            &KldConfig {
                rho,
                train: train.clone(),
            },
            kind,
        )
    };
    let map = |kind, lambda| {
        adapt_map(
            base,
            data,
            prior(kind)?,
            &MapConfig {
                lambda,
                train: train.clone(),
            },
            kind,
        )
    };
    match (method, setting) {
        (Method::Baseline, _) => Ok(base.clone()),
        (Method::Lin, _) => plain(AdapterKind::Lin),
        (Method::Lon, _) => plain(AdapterKind::LonDirect),
        (Method::Lhn, _) => plain(AdapterKind::Lhn),
        (Method::LinKld, Setting::Rho(r)) => kld(AdapterKind::Lin, r),
        (Method::LonKld, Setting::Rho(r)) => kld(AdapterKind::LonDirect, r),
        (Method::LhnKld, Setting::Rho(r)) => kld(AdapterKind::Lhn, r),
        (Method::MapLin, Setting::Lambda(l)) => map(AdapterKind::Lin, l),
        (Method::MapLhn, Setting::Lambda(l)) => map(AdapterKind::Lhn, l),
        (
            Method::MapLhnHier,
            Setting::Hier {
                lambda1,
                lambda2,
                flat_lambda,
            },
        ) => {
            let file = art
                .tree
                .as_ref()
                .ok_or_else(|| Error::config("no class tree available"))?;
            let file = TreeFile {
                lambda1,
                lambda2,
                ..file.clone()
            };
            let tree = file.build(&EmbeddingView::from_network(base))?;
            let flat_prior = match flat_lambda {
                Some(l) => Some((prior(AdapterKind::Lhn)?.clone(), l)),
                None => None,
            };
            let hc = HierConfig {
                train: train.clone(),
                target: cfg.adaptation.hier_target,
                flat_prior,
            };
            adapt_hier(base, data, &tree, &hc).map(|o| o.net)
        }
        (m, s) => Err(Error::config(format!("setting {s} does not apply to {m}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One (method, setting, budget, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub setting: String,
    pub budget: usize,
    pub seed: u64,
    pub status: Status,
    /// Test frame error of the adapted network.
    pub frame_error: Option<f64>,
    /// Test frame error of the base network on the same speaker.
    pub base_error: Option<f64>,
    /// Mean cross-entropy per adaptation frame after adaptation.
    pub adapt_xent: Option<f64>,
    /// Test error on classes absent from the adaptation set.
    pub uncovered_error: Option<f64>,
    /// Mean KL(base || adapted) over test frames.
    pub mean_kl: Option<f64>,
    pub note: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// `METHOD` or `METHOD[setting]`.
    pub fn arm(&self) -> String {
        if self.setting == "-" {
            self.method.to_string()
        } else {
            format!("{}[{}]", self.method, self.setting)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn failed_count(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: std::io::Read>(input: R, origin: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::read_csv(f, &path.display().to_string())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub artifacts: Artifacts,
    pub base_dev_error: f64,
    pub table: ResultTable,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    method: Method,
    setting: Setting,
    budget: usize,
    seed: u64,
}

/// Evaluation speaker `seed` at `budget` sentences with the plan's coverage.
/// Budgets nest: a smaller budget is a prefix of a larger one.
pub fn eval_speaker(
    cfg: &ExperimentConfig,
    corpus: &BaseCorpus,
    budget: usize,
    seed: u64,
) -> Result<(SpeakerData, Vec<usize>)> {
    let s = eval_speaker_seed(cfg, seed);
    let j = cfg.corpus.class_count;
    let covered = choose_covered(j, cfg.plan.coverage, s);
    let uncovered: Vec<usize> = (0..j).filter(|c| !covered.contains(c)).collect();
    let shift = SpeakerShift::sample(cfg.corpus.feature_dim, &cfg.shift, s);
    let data = gen_speaker(
        corpus,
        &cfg.shift,
        &shift,
        &AdaptationBudget::new(budget, covered)?,
        seed as u32,
    )?;
    Ok((data, uncovered))
}

/// Per-seed training seed, shared by every method so comparisons are paired.
pub fn cell_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    cfg.adaptation
        .train_config(seeds::derive(cfg.adaptation.rng_seed, "cell", seed))
}

fn run_cell(cfg: &ExperimentConfig, corpus: &BaseCorpus, art: &Artifacts, c: Cell) -> ResultRow {
    let mut row = ResultRow {
        method: c.method,
        setting: c.setting.to_string(),
        budget: c.budget,
        seed: c.seed,
        status: Status::Failed,
        frame_error: None,
        base_error: None,
        adapt_xent: None,
        uncovered_error: None,
        mean_kl: None,
        note: String::new(),
    };
    let result = (|| -> Result<()> {
        let (data, uncovered) = eval_speaker(cfg, corpus, c.budget, c.seed)?;
        let train = cell_train_config(cfg, c.seed);
        let adapted = apply_method(c.method, c.setting, art, &data.adapt, cfg, &train)?;
        let probe = forgetting_probe(&art.base, &adapted, &data.test, &uncovered)?;
        row.frame_error = Some(frame_error_rate(&adapted, &data.test)?);
        row.base_error = Some(frame_error_rate(&art.base, &data.test)?);
        row.adapt_xent = Some(mean_cross_entropy(&adapted, &data.adapt)?);
        row.uncovered_error = probe.uncovered_adapted_error;
        row.mean_kl = Some(probe.mean_kl);
        Ok(())
    })();
    match result {
        Ok(()) => row.status = Status::Ok,
        Err(e) => {
            log::warn!("{} budget {} seed {}: {e}", row.arm(), c.budget, c.seed);
            row.note = e.to_string();
        }
    }
    row
}

/// Runs every cell of the plan. Cells execute concurrently; rows come back
/// in plan order (method, setting, budget, seed) whatever the thread count.
/// A failing cell is recorded as such and does not stop the others.
pub fn run_plan(cfg: &ExperimentConfig, preloaded: Option<Artifacts>) -> Result<RunOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.plan.jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let corpus = gen_base_corpus(&cfg.corpus)?;
        let artifacts = prepare_artifacts(cfg, &corpus, preloaded)?;
        let base_dev_error = frame_error_rate(&artifacts.base, &corpus.dev)?;
        log::info!("base dev frame error {base_dev_error:.4}");
        let mut cells = Vec::new();
        for &method in &cfg.plan.methods {
            for setting in settings_for(method, &cfg.adaptation) {
                for &budget in &cfg.plan.budgets {
                    for &seed in &cfg.plan.seeds {
                        cells.push(Cell {
                            method,
                            setting,
                            budget,
                            seed,
                        });
                    }
                }
            }
        }
        let rows = cells
            .par_iter()
            .map(|&c| run_cell(cfg, &corpus, &artifacts, c))
            .collect();
        Ok(RunOutput {
            artifacts,
            base_dev_error,
            table: ResultTable { rows },
        })
    })
}
