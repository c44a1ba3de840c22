//! Incomplete multi-view representation learning with permutation-prior VAEs.
//!
//! Each sample of a multi-view dataset is observed through a subset of its L
//! views. Per-view encoders and learned inter-view correspondence maps fill an
//! L×L grid of diagonal-Gaussian latents; cyclically permuting each column of
//! the grid yields a second grid whose rows provide cross-view reconstruction
//! targets and informational priors. The resulting KL regularizer is a
//! permutation divergence — it vanishes exactly when all representations of a
//! view coincide, regardless of their source view. Rows are fused by
//! precision-weighted geometric means into a consensus variable used for
//! clustering and for reconstructing missing views.
//!
//! The crate ships a library (Gaussian algebra, cyclic permutations, the
//! masked ELBO, a small dense-network stack with reverse-mode gradients,
//! synthetic data and fingerprint tooling, clustering evaluation) and a
//! `permvae` CLI binding them into reproducible workflows.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, NumCast, ToPrimitive};

pub mod ablation;
pub mod cli;
pub mod dataset;
pub mod divergence;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod latent;
pub mod model;
pub mod neural;
pub mod objective;
pub mod permutation;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use gaussian::DiagonalGaussian;
pub use latent::LatentMatrix;
pub use permutation::{CyclicPermutation, PermutationBundle};

/// Scalar type for all latent-space math: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from an `f64` literal; panics only on values a float cannot
    /// represent at all (never for the finite constants used here).
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite literal converts to Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Concrete aliases used by the training pipeline and the CLI.
pub type Gaussian32 = DiagonalGaussian<f32>;
pub type Gaussian64 = DiagonalGaussian<f64>;
pub type LatentMatrix64 = LatentMatrix<f64>;
pub type Model64 = model::ModelParams<f64>;
pub type LossBreakdown64 = objective::LossBreakdown<f64>;
