//! Synthetic tasks, toy training, metrics, the multi-seed protocol and the
//! attention cost meter.

pub mod cost;
pub mod harness;
pub mod metrics;
pub mod task;
pub mod train;

pub use cost::{even_split, measure_cost, measure_encode, score_matrix_entries, CostEstimate, EncodeMeasurement};
pub use harness::{evaluate, mean_and_variance, EvalReport, Grouping, Mode, Protocol, SeedResult};
pub use metrics::{exact_match, f1, normalize_answer};
pub use task::{gen_task, Task, TaskKind, TaskSpec};
pub use train::{
    induction_corpus, lookup_corpus, task_corpus, toy_train, InductionCorpusSpec, LookupCorpusSpec, Optimizer,
    TrainConfig, TrainOutcome, TrainingSequence,
};
