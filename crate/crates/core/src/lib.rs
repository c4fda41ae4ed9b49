//! Maximum-likelihood estimation of ellipses from single low-resolution,
//! photon-limited, quantised images.
//!
//! The crate models the full image formation chain (exact pixel averaging of
//! an elliptic region, Gaussian blur, Poisson photon noise, quantisation),
//! fits ellipse parameters by minimising the negative log-likelihood of the
//! observed photon counts, and reports parameter covariances together with a
//! planar confidence region. Direct ellipse fits on edge points and on
//! gradient tangent lines are provided as baselines.
//!
//! Module map:
//!
//! * [`geometry`]: geometric and algebraic ellipse parameters, conversions, Jacobians.
//! * [`clip`]: exact area of an axis-aligned rectangle intersected with a standard ellipse.
//! * [`forward`]: synthetic image formation.
//! * [`pmf`]: quantised Poisson distribution and the negative log-likelihood.
//! * [`optimize`]: BFGS minimisation with numerical derivatives.
//! * [`uncertainty`]: covariance propagation and planar confidence regions.
//! * [`baseline`]: point-based and gradient-based direct ellipse fits.
//! * [`experiment`]: seeded synthetic experiment sweeps producing CSV output.
//! * [`io`] and [`config`]: PGM images, CSV exports, key-value configuration files.
//!
//! With the default `parallel` feature, pixel loops, finite-difference probes
//! and experiment trials run on rayon; without it everything runs sequentially.
//! Results are bit-identical either way.

pub mod baseline;
pub mod clip;
pub mod config;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod optimize;
pub mod par;
pub mod pmf;
pub mod special;
pub mod uncertainty;

pub use error::{Error, Result};
pub use geometry::{AlgebraicEllipse, EtaVector, GeometricEllipse};
