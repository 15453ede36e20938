//! Training engine for physically-plausible learning algorithms built around
//! circular autoencoders: recirculation and symmetric anti-Hebbian local rules,
//! backpropagation and feedback-alignment baselines, greedy stack construction
//! (Tourbillon), decoder-channel fine-tuning, and the twin-construction
//! ("tourbillonization") procedure, plus the dataset loaders, checkpointing,
//! metrics, and experiment plumbing needed to reproduce the MNIST /
//! Fashion-MNIST / CIFAR-10 comparisons on a desktop CPU.
//!
//! Everything is 64-bit, deterministic under a fixed seed, and free of weight
//! transport in the local-rule code paths.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod layer;
mod linalg;
pub mod metrics;
pub mod optim;
pub mod plot;
pub mod recirc;
pub mod rng;
pub mod stack;
pub mod tensor;
pub mod twin;

pub use config::{DataConfig, DataFormat, ModelConfig, RunConfig, RunKind, TrainConfig};
pub use data::{batches, load_cifar10, load_idx, Dataset};
pub use error::{Error, Result};
pub use experiment::{run_config, RunArtifacts};
pub use grad::{bp_backward, fa_backward, FeedbackWeights, LossKind, UpdateSet};
pub use layer::{forward, Activation, Activations, Layer, LayerSpec, Network, Padding};
pub use metrics::{Metric, MetricsLog, Split};
pub use optim::{apply_updates, lr_at_epoch, InitScheme, LrSchedule, OptimizerState};
pub use plot::emit_plots;
pub use recirc::{
    recirc_updates, reconstruction_loss, recirculate, symmetric_updates, train_cae,
    CircularAutoencoder, PassActivations, TrainOutcome, TrainParams, TrainRule,
};
pub use rng::Rng;
pub use stack::{
    fine_tune, head_train, stack_train, FineTuneParams, Head, Stage, TourbillonModel,
};
pub use tensor::Tensor;
pub use twin::{tourbillonize, twin_forward, TwinModel};
