//! Training, evaluation, audits and persistence around the model.

mod ablation;
mod audit;
mod checkpoint;
mod config;
mod gradcheck;
mod optim;
mod train;

pub use ablation::{run_ablation_suite, AblationRow, AblationTable};
pub use audit::{
    inspect_filter, shuffle_audit, shuffle_audit_with, FilterReport, FilterRow, ShuffleAuditReport, ShuffleRun,
    EQUIVARIANCE_TOLERANCE,
};
pub use checkpoint::{peek_manifest, Checkpoint, Manifest, TensorEntry, CHECKPOINT_VERSION};
pub use config::{DataConfig, TrainConfig};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckEntry, GradcheckReport};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use train::{
    check_compatible, evaluate, load_or_generate, metrics_csv, predict, train, write_metrics_csv, MetricRow,
    METRICS_HEADER,
};
