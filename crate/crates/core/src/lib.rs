//! One-step discrete generation through a learned coupling between token
//! sequences and Gaussian latents.
//!
//! Stage A trains an encoder and a normalizing flow so that encoded sequences
//! land near `N(0, I)`; Stage B freezes it and trains a one-step decoder from
//! those latents. [`mdm`] adds a latent-conditioned masked denoiser with the
//! P2-self sampler, [`oracle`] computes exact divergences on small supports,
//! and [`guidance`] steers the one-step generator.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32` / `*64` aliases below name the common instantiations.

pub mod autodiff;
pub mod autoencoder;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod mdm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod stage_a;
pub mod stage_b;
pub mod tensor;
pub mod training;
pub mod types;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{CouplingError, Result};
pub use mdm::{MaskedDenoiser, MdmState, P2SelfOptions};
pub use oracle::{ExactDistribution, OracleRecord, OracleSuite};
pub use scalar::Scalar;
pub use stage_a::StageAState;
pub use stage_b::{OneStepGenerator, StageBState};
pub use tensor::Tensor;
pub use types::{GaussianLatent, LatentShape, LogitGrid, PairedLatentDataset, TokenSequence};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type StageA32 = StageAState<f32>;
pub type StageA64 = StageAState<f64>;
pub type Generator32 = OneStepGenerator<f32>;
pub type Generator64 = OneStepGenerator<f64>;
pub type Denoiser32 = MaskedDenoiser<f32>;
pub type Denoiser64 = MaskedDenoiser<f64>;
