//! Configuration, the two-stage training pipeline, and the scoring,
//! preview and plotting tools behind the command-line interface.

mod config;
mod pipeline;
mod plot;
mod tools;

pub use config::{apply_override, AugmentationParams, DatasetSource, EnvRecipe, EvalProtocol, Precision, RunConfig};
pub use pipeline::{
    action_bounds_from_data, check_compatibility, eval_env, evaluate_agent, load_run_dataset, prepare_output_dir,
    run_train_tdm, run_train_tsrl, train_tdm_with, train_tsrl_with, JsonlWriter, MetricsRecord, TsrlOutcome, TsrlRun,
    CONFIG_ECHO, EVAL_REPORT, TDM_CHECKPOINT, TDM_METRICS, TSRL_CHECKPOINT, TSRL_METRICS,
};
pub use plot::{metric_bands, plot_learning_curves, Band};
pub use tools::{
    augment_preview, read_metrics, read_scores_csv, score_dataset, summarize_scores, write_scores_csv, AugmentPreview,
    PreviewRow, ScoreSummary, SUMMARY_QUANTILES,
};
