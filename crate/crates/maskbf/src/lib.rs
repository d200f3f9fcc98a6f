//! Mask-based beamforming laboratory.
//!
//! This crate implements a small, self-contained pipeline for studying
//! time-frequency masks as the driving quantity of covariance-based
//! beamformers:
//!
//! * [`stft`] — multichannel STFT/iSTFT with exact weighted-overlap-add
//!   reconstruction.
//! * [`linalg`] — dense complex Hermitian linear algebra sized for
//!   microphone arrays: mask-weighted covariances, Cholesky solves and a
//!   Jacobi generalized eigensolver.
//! * [`masks`] — oracle masks (ratio and magnitude-ratio), mask
//!   conversions and the optimizer's feasibility projection.
//! * [`beamform`] — five beamformers (mask-driven multichannel Wiener,
//!   its clean-signal ideal counterpart, and three generalized-eigenvalue
//!   variants) plus per-bin ideal output scaling.
//! * [`optimizer`] — per-bin projected gradient descent on the
//!   post-scaling reconstruction error, with analytic and finite-difference
//!   gradients.
//! * [`metrics`] — SDR, scale-invariant SDR, SNR and spectral MSE.
//! * [`scene`] — deterministic synthetic scene generator and a loader for
//!   pre-separated two-source recordings.
//! * [`experiment`] — the three reproducible experiment suites behind the
//!   `maskbf` binary.
//!
//! Everything is deterministic: random quantities derive from explicit
//! seeds, and computations are sequential with a fixed evaluation order, so
//! repeated runs produce byte-identical outputs.

pub mod beamform;
pub mod container;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod masks;
pub mod metrics;
pub mod optimizer;
pub mod scene;
pub mod stft;
pub mod wav;

pub use error::{Error, Result};
