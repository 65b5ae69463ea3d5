//! Cross-lingual model merging for low-resource speech recognition.
//!
//! The crate covers the desk-scale half of the workflow: reading and
//! writing tensor checkpoints, task-vector arithmetic and LoRA adapter
//! merging, lambda tuning with a small Gaussian-process optimizer, WER and
//! similarity metrics, and Common Voice style manifest preparation. Model
//! inference is delegated to an external command (see [`evaluator`]).

pub mod checkpoint;
pub mod config;
pub mod dataprep;
pub mod error;
pub mod evaluator;
pub mod lora;
pub mod metrics;
pub mod optimize;
pub mod taskvec;

pub use checkpoint::{read_checkpoint, write_checkpoint, Dtype, Tensor, TensorMap};
pub use config::{EvaluatorConfig, RunConfig, TrainingHyperparameters};
pub use dataprep::{LanguageMapping, Manifest, ManifestKind, Ruleset, SampleRecord, Votes};
pub use error::{Error, Result};
pub use evaluator::{
    evaluate_merge, mock_eval, run_external_eval, tune, EvalBackend, EvalRequest, MergeSource,
    MockBackend, MockObjective, TuneOutcome,
};
pub use lora::{LoraAdapter, LoraLayer, MergedAdapter};
pub use metrics::{ComparisonReport, Correlation, TokenCountVector, WerReport};
pub use optimize::{optimize, OptimizeError, OptimizerConfig, Trial, TrialLog};
pub use taskvec::{
    apply_task_vector, combine_task_vectors, compute_task_vector, MergeMode, MergeSpec,
    NamePolicy, TaskVector,
};
