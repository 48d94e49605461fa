//! Experiment driver: configuration, the plan runner, result tables,
//! text and CSV reports, and on-disk bundles of trained artifacts.

pub mod bundle;
pub mod config;
pub mod report;
pub mod run;

pub use bundle::{load_bundle, save_bundle, Bundle, LoadedBundle, Manifest};
pub use config::{AdaptationSpec, ExperimentConfig, ExperimentPlan, Method, NetworkSpec};
pub use report::{relative_improvement, render_csv, render_text, standings, summarize};
pub use run::{
    apply_method, cell_train_config, default_tree, eval_speaker, harvest_prior, harvest_samples,
    prepare_artifacts, run_plan, settings_for, train_base, Artifacts, ResultRow, ResultTable,
    RunOutput, Setting, Status,
};
