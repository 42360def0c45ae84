//! Networks that solve a one-parameter family of Poisson problems, and tools
//! for measuring how general their layers are across that parameter.
//!
//! The crate is organised bottom-up:
//!
//! * [`net`]: tanh MLPs with exact input derivatives up to the pure second
//!   order, parameter gradients of the PDE loss, and checkpoint files.
//! * [`bvp`]: the Poisson family, point samplers, grid fields and a
//!   finite-difference reference solver.
//! * [`trainer`]: Adam with periodic resampling and patience-based stopping.
//! * [`svcca`]: canonical correlation analysis of layer activations.
//! * [`generality`]: ensemble similarity matrices and the derived
//!   dimensionality, reproducibility and specificity metrics.
//! * [`transfer`]: donor/recipient transfer experiments.

pub mod bvp;
pub mod generality;
pub mod net;
pub mod svcca;
pub(crate) mod text;
pub mod trainer;
pub mod transfer;

pub use bvp::{BvpSpec, GridField, LossNorm, PointTag, Rect, TaggedPointSet};
pub use net::{Activation, DerivativeBundle, Mlp, ParamGradient};
pub use trainer::{TrainConfig, TrainRecord};
