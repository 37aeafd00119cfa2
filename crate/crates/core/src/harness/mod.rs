//! Experiment harness: synthetic data, dataset IO, evaluation and ablations.

mod ablation;
mod eval;
mod experiment;
mod idx;
mod oracle;
mod planted;

pub use ablation::{run_ablation, AblationRow, AblationTable, Strategy};
pub use eval::{accuracy, eval_examples, eval_full_data, eval_student, EvalReport, StudentArch, StudentConfig};
pub use experiment::ExperimentConfig;
pub use idx::{load_idx, write_idx};
pub use oracle::{random_game, shapley_comparison, toy_examples, toy_model, toy_utilities, utility_table, ShapleyComparison};
pub use planted::*;
