//! Desk-scale training: datasets, AdamW with warmup and cosine decay, and a
//! deterministic loop.

mod config;
mod data;
mod optim;
mod trainer;

pub use config::TrainConfig;
pub use data::{
    class_of_code, load_cifar, load_cifar_binary, load_dataset, stamp_code,
    synthetic_locality_dataset, ChannelStats, CifarKind, DataSource, Dataset, DatasetSpec, STAMP,
};
pub use optim::{AdamW, WarmupCosine};
pub use trainer::{ablation_table, evaluate_top1, train, EpochRecord, TrainOutput, CHECKPOINT_DIR, LOG_FILE};
