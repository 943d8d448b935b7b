//! Retrieval and classification tasks over a citation graph, and their metrics.

mod eval;
mod metrics;
mod probe;
mod tasks;

pub use eval::{
    config_fingerprint, encode_papers, evaluate_encoder, retrieval_metrics, EvalSettings,
    EvalTasks, MetricValue, MetricsReport, TaskSelection,
};
pub use metrics::{average_precision, macro_f1, mean_defined, ndcg, rank_candidates};
pub use probe::{fit_linear_probe, LinearProbe};
pub use tasks::{
    build_classification_task, build_retrieval_task, related_papers, ClassificationTask,
    RetrievalQuery, RetrievalTask, TaskKind,
};
