//! Desk-scale segmentation: network, training, evaluation, data and checkpoints.

pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod synth;
pub mod train;

pub use eval::{evaluate, score, ConfusionMatrix, EvalReport};
pub use model::{Layer, ToySeg, ToySegConfig};
pub use synth::{synth_banded, Dataset, Sample};
pub use train::{poly_lr, train, TrainConfig, TrainLog};
