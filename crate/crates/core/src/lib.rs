//! Local-polynomial estimation and inference for sharp regression discontinuity
//! designs, with coverage-error-aware bandwidth selection.

mod error;
mod numeric;

pub mod bandwidths;
pub mod cecoef;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod lpfit;
pub mod simulate;
pub mod variance;

pub use bandwidths::{select, BandwidthSelection, Method, RhoMode, SelectorOptions};
pub use cecoef::{estimate_ce_constants, CeConstants, Flavor};
pub use error::{RdError, Result};
pub use inference::{infer, ConfidenceInterval, Inference, IntervalMethod};
pub use kernels::{optimal_rho, Kernel};
pub use lpfit::{point_estimate, FitConfig, RdEstimate, Sample, Side};
pub use variance::{VceFlavor, VceSpec};
