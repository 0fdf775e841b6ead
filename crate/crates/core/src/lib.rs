//! Robust low-rank matrix recovery by median-truncated gradient descent.
//!
//! Given measurements `y_i = ⟨A_i, M⟩` of a rank-r matrix `M = XYᵀ` under
//! i.i.d. Gaussian sensing matrices `A_i`, where an unknown fraction of the
//! `y_i` have been replaced by arbitrary values, the crate recovers the
//! factors by gradient descent on `(U, V)`, discarding at every iteration the
//! samples whose residuals are large relative to the sample median.
//!
//! * [`linalg`]: dense matrices, rank-r SVD, Procrustes alignment, quantiles.
//! * [`sensing`]: seeded Gaussian ensembles and synthetic corrupted instances.
//! * [`recovery`]: spectral initialization, the truncated gradient loop, and
//!   the untruncated baseline.
//! * [`diagnostics`]: Monte-Carlo checks of the concentration and regularity
//!   properties the method relies on.
//! * [`harness`]: phase-transition grids, noise sweeps and convergence
//!   comparisons behind the `median-tgd` CLI.
//!
//! The `book/` directory holds a longer guide; its code listings are
//! compiled and run as doctests of this crate.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod recovery;
pub mod seeding;
pub mod sensing;

pub use error::{Error, Result};
pub use linalg::{factor_distance, procrustes_align, rank_r_svd, sample_quantile, DenseMatrix, Quantile, RankRSvd};
pub use recovery::{
    gamma1, run_recovery, run_recovery_from, tgd_gradients, theory_alpha_y, truncated_spectral_init, truncation_mask,
    Algorithm, FactorPair, RecoveryConfig, RecoveryTrace,
};
pub use sensing::{
    apply_adjoint_weighted, apply_forward, generate_instance, GroundTruth, InstanceParams, ProblemInstance, Seeds,
    SensingEnsemble, Storage, StoragePolicy,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/measurements.md")]
    mod measurements {}
    #[doc = include_str!("../../../book/src/quantiles.md")]
    mod quantiles {}
    #[doc = include_str!("../../../book/src/initialization.md")]
    mod initialization {}
    #[doc = include_str!("../../../book/src/gradient-loop.md")]
    mod gradient_loop {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
