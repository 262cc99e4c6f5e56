//! Metrics, discrimination tasks, reports and hyperparameter sweeps.

mod metrics;
mod report;
mod sweep;

pub use metrics::{accuracy, auroc, roc_points, roc_to_text, trapezoid_area};
pub use report::{default_tasks, evaluate, task_scores, BinaryTask, ConfigEcho, EvalReport};
pub use sweep::{
    render_table, run_cell, run_sweep, student_spec_for, CellKey, LossVariant, Metric, SweepCell, SweepGrid,
    SweepInputs, SweepLayout, SweepResult, SweepTable, TableCell,
};
