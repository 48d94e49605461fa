use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bayes_adapt::adapt::AdapterKind;
use bayes_adapt::harness::{
    apply_method, cell_train_config, default_tree, eval_speaker, harvest_samples, load_bundle,
    render_csv, render_text, run_plan, save_bundle, train_base, Artifacts, Bundle,
    ExperimentConfig, Method, ResultTable, Setting,
};
use bayes_adapt::hier::TreeFile;
use bayes_adapt::net::frame_error_rate;
use bayes_adapt::persist::{
    load_network, load_prior, load_samples, save_network, save_prior, save_samples,
};
use bayes_adapt::prior::{fit_prior, gaussianity_report};
use bayes_adapt::sim::{gen_base_corpus, write_frames_csv};
use bayes_adapt::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bayes-adapt", version, about = "MAP adaptation experiments")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    PrintConfig,
    /// Train the base network on the generated corpus.
    TrainBase {
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt every prior-estimation speaker and save the transforms.
    Harvest {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: AdapterKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a diagonal Gaussian prior to harvested transforms.
    FitPrior {
        #[arg(long)]
        samples: PathBuf,
        /// Variance floor; the config value when omitted.
        #[arg(long)]
        floor: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt the base network to one evaluation speaker.
    Adapt {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_enum)]
        method: AdaptMethod,
        #[arg(long, value_parser = parse_kind, default_value = "LHN")]
        kind: AdapterKind,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Class tree for `hier`; grouping from the config when omitted.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        speaker: u64,
        /// Adaptation sentences.
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the config's plan and print the report.
    RunPlan {
        /// Reuse the base network, priors and tree of a saved bundle.
        #[arg(long)]
        load_bundle: Option<PathBuf>,
        #[arg(long)]
        save_bundle: Option<PathBuf>,
        /// Per-cell results CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (0: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarize a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Write the base training or dev frames as CSV.
    ExportCorpus {
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptMethod {
    Plain,
    Map,
    Kld,
    Hier,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
}

fn parse_kind(s: &str) -> std::result::Result<AdapterKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad configs and inputs, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::MissingFile(_)
            | Error::Format { .. }
            | Error::Dimension { .. },
        ) => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::PrintConfig => {
            print!("{}", load_config(cli.config.as_deref())?.to_toml());
        }
        Command::TrainBase { out } => {
            let cfg = load_config(cli.config.as_deref())?;
            let corpus = gen_base_corpus(&cfg.corpus)?;
            let net = train_base(&cfg, &corpus)?;
            println!(
                "dev frame error {:.4}",
                frame_error_rate(&net, &corpus.dev)?
            );
            save_network(&net, &out)?;
        }
        Command::Harvest { base, kind, out } => {
            let cfg = load_config(cli.config.as_deref())?;
            let corpus = gen_base_corpus(&cfg.corpus)?;
            let net = load_network(&base)?;
            let harvest = harvest_samples(&cfg, &corpus, &net, kind)?;
            for (id, reason) in &harvest.skipped {
                eprintln!("speaker {id} skipped: {reason}");
            }
            let g = gaussianity_report(&harvest.samples);
            println!(
                "{} samples, mean |skewness| {:.3}, mean |excess kurtosis| {:.3}",
                harvest.samples.len(),
                g.mean_abs_skewness(),
                g.mean_abs_excess_kurtosis()
            );
            save_samples(&harvest.samples, &out)?;
        }
        Command::FitPrior {
            samples,
            floor,
            out,
        } => {
            let floor = match floor {
                Some(f) => f,
                None => load_config(cli.config.as_deref())?.adaptation.var_floor,
            };
            let samples = load_samples(&samples)?;
            let prior = fit_prior(&samples, floor)?;
            println!(
                "{} prior over {} weights from {} samples",
                prior.kind,
                prior.len(),
                samples.len()
            );
            save_prior(&prior, &out)?;
        }
        Command::Adapt {
            base,
            method,
            kind,
            lambda,
            rho,
            prior,
            tree,
            speaker,
            budget,
            out,
        } => {
            let cfg = load_config(cli.config.as_deref())?;
            let a = &cfg.adaptation;
            let (m, setting) = match (method, kind) {
                (AdaptMethod::Plain, AdapterKind::Lin) => (Method::Lin, Setting::None),
                (AdaptMethod::Plain, AdapterKind::Lhn) => (Method::Lhn, Setting::None),
                (AdaptMethod::Plain, AdapterKind::LonDirect) => (Method::Lon, Setting::None),
                (AdaptMethod::Kld, k) => {
                    let r = Setting::Rho(rho.unwrap_or(a.rhos[0]));
                    match k {
                        AdapterKind::Lin => (Method::LinKld, r),
                        AdapterKind::Lhn => (Method::LhnKld, r),
                        AdapterKind::LonDirect => (Method::LonKld, r),
                    }
                }
                (AdaptMethod::Map, k) => {
                    let l = Setting::Lambda(lambda.unwrap_or(a.lambdas[0]));
                    match k {
                        AdapterKind::Lin => (Method::MapLin, l),
                        AdapterKind::Lhn => (Method::MapLhn, l),
                        AdapterKind::LonDirect => {
                            return Err(
                                Error::Config("map adaptation needs LIN or LHN".into()).into()
                            )
                        }
                    }
                }
                (AdaptMethod::Hier, _) => (
                    Method::MapLhnHier,
                    Setting::Hier {
                        lambda1: a.hier_lambda1,
                        lambda2: a.hier_lambda2,
                        flat_lambda: prior.is_some().then(|| lambda.unwrap_or(a.lambdas[0])),
                    },
                ),
            };
            let mut priors = BTreeMap::new();
            if let Some(p) = &prior {
                let p = load_prior(p)?;
                priors.insert(p.kind, p);
            } else if matches!(method, AdaptMethod::Map) {
                return Err(Error::Config("map adaptation needs --prior".into()).into());
            }
            let tree = match (&tree, method) {
                (Some(t), _) => Some(TreeFile::load(t)?),
                (None, AdaptMethod::Hier) => Some(default_tree(&cfg)),
                _ => None,
            };
            let art = Artifacts {
                base: load_network(&base)?,
                priors,
                tree,
            };
            let corpus = gen_base_corpus(&cfg.corpus)?;
            let (data, _) = eval_speaker(&cfg, &corpus, budget, speaker)?;
            let train = cell_train_config(&cfg, speaker);
            let adapted = apply_method(m, setting, &art, &data.adapt, &cfg, &train)?;
            println!(
                "{m} {setting}: frame error {:.4} (base {:.4})",
                frame_error_rate(&adapted, &data.test)?,
                frame_error_rate(&art.base, &data.test)?
            );
            save_network(&adapted, &out)?;
        }
        Command::RunPlan {
            load_bundle: from,
            save_bundle: to,
            out,
            jobs,
        } => {
            let (mut cfg, preloaded) = match &from {
                Some(dir) => {
                    let loaded = load_bundle(dir)?;
                    for w in &loaded.warnings {
                        eprintln!("warning: {w}");
                    }
                    let cfg = match &cli.config {
                        Some(p) => load_config(Some(p))?,
                        None => loaded.bundle.config,
                    };
                    (cfg, Some(loaded.bundle.artifacts))
                }
                None => (load_config(cli.config.as_deref())?, None),
            };
            if let Some(j) = jobs {
                cfg.plan.jobs = j;
            }
            let output = run_plan(&cfg, preloaded)?;
            println!("base dev frame error {:.4}\n", output.base_dev_error);
            print!("{}", render_text(&output.table)?);
            if let Some(p) = &out {
                output
                    .table
                    .save(p)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(dir) = &to {
                save_bundle(
                    dir,
                    &Bundle {
                        config: cfg.clone(),
                        artifacts: output.artifacts,
                        adapted: BTreeMap::new(),
                    },
                )?;
            }
            let failed = output.table.failed_count();
            if failed > 0 {
                eprintln!("{failed} cells failed");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { results, format } => {
            let table = ResultTable::load(&results)?;
            let text = match format {
                ReportFormat::Text => render_text(&table)?,
                ReportFormat::Csv => render_csv(&table)?,
            };
            print!("{text}");
            if table.failed_count() > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::ExportCorpus { split, out } => {
            let cfg = load_config(cli.config.as_deref())?;
            let corpus = gen_base_corpus(&cfg.corpus)?;
            let set = match split {
                Split::Train => &corpus.train,
                Split::Dev => &corpus.dev,
            };
            match out {
                Some(p) => {
                    let f =
                        File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    write_frames_csv(set, BufWriter::new(f))?;
                }
                None => {
                    let stdout = io::stdout();
                    let mut lock = stdout.lock();
                    write_frames_csv(set, &mut lock)?;
                    lock.flush()?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
