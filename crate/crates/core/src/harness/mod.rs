//! Experiments, result tables, whole-file separation and live sessions.

mod experiment;
mod separate;
mod separator;
mod session;
mod spec;
mod suite;
mod table;

pub use experiment::{
    ablation_specs, checkpoint_path, comparison_table, evaluate_separator, load_neural, obtain_separator,
    per_sample_accuracy, results_table, run_ablation_rows, run_ablations, run_experiment, training_seconds, AblationGroup, AblationRow,
    CheckpointPolicy, ExperimentResult, RunScores, TABLE_COLUMNS,
};
pub use separate::{piano_roll_png, read_mixture, separate, Separation, PART_COLORS};
pub use separator::Separator;
pub use session::{
    check_live_model, replay_script, ClientFrame, ServerFrame, Session, SessionConfig, DEFAULT_MS_PER_STEP,
};
pub use spec::{file_digest, ExperimentSpec, Method};
pub use suite::{comparison_specs, disjoint_octaves_dataset, interchangeable_dataset};
pub use table::{percent, ResultTable};
