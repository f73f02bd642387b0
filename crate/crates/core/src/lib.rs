//! Sequence-to-item matching: a stacked LSTM encodes a trajectory of frame
//! features, a per-frame similarity expert scores each hidden state against
//! one gallery item, and a hierarchical gating tree fuses the per-frame
//! scores into a single match probability.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod ssn;
pub mod trainer;
pub mod tree;

pub use encoder::{encode, encode_hidden, EncoderTape, LstmParams, LstmState, StackGrads, StackedLstm};
pub use error::{DatasetError, Error, Result};
pub use features::{Dataset, FeatureVector, SynthConfig, Trajectory};
pub use numerics::{Matrix, Rng, Vector};
pub use ssn::{SsnGrads, SsnOutput, SsnParams};
pub use tree::{FusionTree, PosteriorRecord, TreeConfig, TreeForwardRecord};
pub use model::{Model, ModelConfig, Provenance};
pub use trainer::{BatchSample, EpochMetrics, Schedule, TrainConfig};
pub use eval::{Baseline, EvalOptions, EvalReport, RankedResult, Scoring};
