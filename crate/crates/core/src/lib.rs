//! Common principal component analysis, solved two ways: the classical
//! Flury–Gautschi pairwise-rotation estimator and a differentiable,
//! deep-unfolded Riemannian solver built on the Cayley retraction.
//!
//! The crate also carries the small reverse-mode [`tape`] used to
//! differentiate the unfolded solver end to end, the learnable heads and
//! toy trainer in [`net`], and seeded synthetic generators in [`data`].

pub mod checks;
pub mod data;
pub mod error;
pub mod fg;
pub mod linalg;
pub mod net;
pub mod tape;
pub mod unfold;

pub use error::{Error, Result};
pub use linalg::{
    cayley, covariance, frobenius_norm, offdiag_energy, CovarianceMatrix, CovarianceSet, Matrix,
    OrthogonalBasis, SkewMatrix, WeightedCovariance,
};
