//! Run configuration, toy data, training, evaluation and the ablation runner.

mod ablation;
mod bench;
mod checks;
mod config;
mod dataset;
mod image_io;
mod optim;
mod probe;
mod train;

pub use ablation::{run_ablation, AblationReport, AblationRow, ROADMAP};
pub use bench::{bench_conv, BenchRow, BenchTable, DEFAULT_SHAPES};
pub use checks::{gradcheck_model, perturbed_model, PERTURB_STD};
pub use config::RunConfig;
pub use dataset::{Pattern, ToyDataset};
pub use image_io::{write_ppm, write_raw_f32};
pub use optim::{grad_norm, AdamW};
pub use probe::LinearProbe;
pub use train::{eval_loss, step_cost_warning, train, MetricRow, TrainOptions, TrainOutcome, METRICS_HEADER, STEP_COST_WARN};
