//! Training loops, inference, post-processing, metrics, and the benchmark
//! runner.

pub mod adapt;
pub mod benchmark;
pub mod infer;
pub mod metrics;
pub mod optimizer;
pub mod postproc;
pub mod pretrain;
pub mod sampling;

pub use adapt::{adapt, AdaptConfig, AdaptReport};
pub use benchmark::{run_benchmark, summary_table, BenchmarkConfig, EvalCell};
pub use infer::{sliding_window_predict, tile_origins};
pub use metrics::dice_score;
pub use optimizer::{cosine_lr, AdamW};
pub use postproc::binarize_and_largest_cc;
pub use pretrain::{pretrain, EpochLog, PretrainConfig, PretrainReport};
