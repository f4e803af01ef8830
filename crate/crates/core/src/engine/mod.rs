//! Training system: component losses, alternating updates, evaluation and
//! the amortized-versus-exact transport comparison.

pub mod compare;
pub mod config;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod train;

pub use compare::{
    compare_amortized_vs_exact, compare_plans, fit_transport_head, CompareReport, FitOptions,
};
pub use config::{AblationRow, TrainConfig};
pub use losses::{GeneratorWeights, LossOutput, LossParts, LossSettings};
pub use model::{ClothModel, ModelGrads, NetId};
pub use train::{
    evaluate, train, CsvSink, EvalReport, MetricsSink, NullSink, TrainError, TrainMetricsRow,
    TrainOutput, METRICS_HEADER,
};
