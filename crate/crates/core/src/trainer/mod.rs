//! Datasets, SGD training, fine-tuning, and evaluation.

pub mod dataset;
pub mod train;

pub use dataset::{
    load_cifar_binary, parse_cifar_binary, synth_dataset, synth_split, ChannelStats, Dataset, Split, SynthSpec,
    CIFAR10_LABELS, CIFAR_RECORD,
};
pub use train::{evaluate, evaluate_counts, finetune, mean_loss, train, EpochRecord, History, TrainSchedule};
