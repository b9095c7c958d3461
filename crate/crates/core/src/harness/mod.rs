//! End-to-end experiment harness: synthetic data, proxy metrics, staged
//! training pipeline, ablation suite, and simple PNG/plot output.

pub mod ablation;
pub mod data;
pub mod metrics;
pub mod pipeline;
pub mod plot;

pub use data::{gen_dataset, gen_identity, gen_item, DatasetItem, SyntheticIdentity};
pub use metrics::{drift_curve, oral_signal, pearson, session_metrics, MetricRecord};
