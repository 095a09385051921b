//! Soft-IntroVAE with a learnable mixture-of-Gaussians prior trained as a
//! third player, the 2D density benchmark, and executable checks of the
//! game's analytic results.

pub mod autodiff;
pub mod distributions;
pub mod error;
pub mod gradcheck;
pub mod tensor;
pub mod prior;
pub mod nets;
pub mod optim;
pub mod objective;
pub mod data2d;
pub mod trainer;
pub mod evalsuite;
pub mod theory;

pub use data2d::{BoundingBox, Dataset};
pub use distributions::{DiagGaussian, MixtureDensity, ResponsibilityVector};
pub use error::{Error, Result};
pub use evalsuite::{EvalConfig, EvalReport};
pub use nets::{Decoder, Encoder, Mlp};
pub use objective::{GameHyper, KlMode, LossOptions, Models, Player, PlayerLosses};
pub use optim::Adam;
pub use prior::{ClipRanges, MixturePrior, VampPseudoInputs};
pub use tensor::Matrix;
pub use trainer::{EpochRecord, Phase, PriorKind, TrainConfig, TrainState};
