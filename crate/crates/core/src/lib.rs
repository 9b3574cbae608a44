//! Geometry of last-layer features under mixup training.
//!
//! * [`etf`]: simplex equiangular tight frames and deviation metrics.
//! * [`mixup`]: mixing coefficients, mixed pairs and batches.
//! * [`ufm`]: the unconstrained-features objective, its gradient and a
//!   numerical minimizer.
//! * [`theory`]: closed-form optimal features and their amplification.
//! * [`projection`]: the three-class planar view of features.
//! * [`trainer`]: a small MLP trained with mixup on synthetic blobs.
//! * [`calibration`]: expected calibration error.
//! * [`io`]: CSV and JSON formats shared by the command-line tools.

pub mod calibration;
pub mod error;
pub mod etf;
pub mod io;
pub mod mixup;
pub mod projection;
pub mod roots;
pub mod theory;
pub mod trainer;
pub mod ufm;

pub use error::{Error, Result};
