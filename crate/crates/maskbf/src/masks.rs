//! Time-frequency masks: oracle definitions, cross-method conversions and
//! the feasibility projection used by the optimizer.
//!
//! A mask is a nonnegative `bins × frames` matrix. Two oracle families are
//! provided:
//!
//! * the ratio mask `(|s|² / (|s|² + |n|²))^β` with its interference
//!   complement, and
//! * the magnitude ratio `|s| / |s + n|`, which can exceed 1 where target
//!   and interference cancel.
//!
//! Masks destined for the target-covariance side and masks destined for the
//! interference side live on opposite ends of the same scale; the
//! conversion ops flip one into the other per frequency bin via
//! `out(t) = max_t' in(t') - in(t)`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::stft::Spectrogram;

/// A matched pair of target / interference masks over the same grid.
#[derive(Debug, Clone)]
pub struct MaskSet {
    /// Target-side mask (`bins × frames`).
    pub m_s: Array2<f64>,
    /// Interference-side mask (`bins × frames`).
    pub m_n: Array2<f64>,
}

impl MaskSet {
    pub fn n_bins(&self) -> usize {
        self.m_s.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.m_s.dim().1
    }
}

/// Oracle mask families selectable in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum MaskKind {
    /// Power-ratio mask raised to `beta`.
    Ratio { beta: f64 },
    /// Magnitude-over-mixture mask.
    MagnitudeRatio,
}

impl MaskKind {
    /// Short stable identifier used in file names and report tables.
    pub fn label(&self) -> String {
        match self {
            MaskKind::Ratio { beta } => format!("irm{beta}"),
            MaskKind::MagnitudeRatio => "smm".to_string(),
        }
    }
}

fn check_same_grid(s: &Spectrogram, n: &Spectrogram, ref_mic: usize) -> Result<()> {
    if s.bins.dim() != n.bins.dim() {
        return Err(Error::invalid_input(
            "target and interference spectrograms must share a grid",
        ));
    }
    if ref_mic >= s.n_channels() {
        return Err(Error::invalid_input(format!(
            "reference channel {ref_mic} out of range for {} channels",
            s.n_channels()
        )));
    }
    Ok(())
}

/// Power-ratio masks at the reference channel:
/// `m_s = (|s|² / (|s|² + |n|²))^β` and the analogous interference mask.
/// Cells where both signals are exactly zero get the indifferent value
/// `0.5^β` on both sides.
pub fn ratio_masks(s: &Spectrogram, n: &Spectrogram, ref_mic: usize, beta: f64) -> Result<MaskSet> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::invalid_input(format!(
            "mask exponent must be positive, got {beta}"
        )));
    }
    check_same_grid(s, n, ref_mic)?;
    let (_, f, t) = s.bins.dim();
    let mut m_s = Array2::zeros((f, t));
    let mut m_n = Array2::zeros((f, t));
    for fi in 0..f {
        for ti in 0..t {
            let ps = s.bins[[ref_mic, fi, ti]].norm_sqr();
            let pn = n.bins[[ref_mic, fi, ti]].norm_sqr();
            let total = ps + pn;
            let (rs, rn) = if total == 0.0 {
                (0.5, 0.5)
            } else {
                (ps / total, pn / total)
            };
            m_s[[fi, ti]] = rs.powf(beta);
            m_n[[fi, ti]] = rn.powf(beta);
        }
    }
    Ok(MaskSet { m_s, m_n })
}

/// Magnitude-ratio masks at the reference channel: `m_s = |s| / |s + n|`,
/// `m_n = |n| / |s + n|`. Exceeds 1 where target and interference
/// interfere destructively; a zero mixture cell yields 0 on both sides.
pub fn magnitude_ratio_masks(s: &Spectrogram, n: &Spectrogram, ref_mic: usize) -> Result<MaskSet> {
    check_same_grid(s, n, ref_mic)?;
    let (_, f, t) = s.bins.dim();
    let mut m_s = Array2::zeros((f, t));
    let mut m_n = Array2::zeros((f, t));
    for fi in 0..f {
        for ti in 0..t {
            let zs: Complex64 = s.bins[[ref_mic, fi, ti]];
            let zn: Complex64 = n.bins[[ref_mic, fi, ti]];
            let mix = (zs + zn).norm();
            if mix > 0.0 {
                m_s[[fi, ti]] = zs.norm() / mix;
                m_n[[fi, ti]] = zn.norm() / mix;
            }
        }
    }
    Ok(MaskSet { m_s, m_n })
}

/// Builds the oracle mask pair of the requested kind.
pub fn oracle_masks(
    kind: MaskKind,
    s: &Spectrogram,
    n: &Spectrogram,
    ref_mic: usize,
) -> Result<MaskSet> {
    match kind {
        MaskKind::Ratio { beta } => ratio_masks(s, n, ref_mic, beta),
        MaskKind::MagnitudeRatio => magnitude_ratio_masks(s, n, ref_mic),
    }
}

fn validate_mask_input(mask: ArrayView2<f64>) -> Result<()> {
    if mask.dim().1 == 0 {
        return Err(Error::invalid_input("mask has an empty frame axis"));
    }
    if mask.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::constraint(
            "mask entries must be finite and nonnegative",
        ));
    }
    Ok(())
}

fn flip_per_bin(mask: ArrayView2<f64>) -> Array2<f64> {
    let (f, t) = mask.dim();
    let mut out = Array2::zeros((f, t));
    for fi in 0..f {
        let row: ArrayView1<f64> = mask.row(fi);
        let max = row.iter().cloned().fold(0.0, f64::max);
        for ti in 0..t {
            out[[fi, ti]] = max - row[ti];
        }
    }
    out
}

/// Converts a target-side mask into an interference-side mask by flipping
/// each frequency bin around its per-bin maximum.
pub fn interference_from_target(m_s: ArrayView2<f64>) -> Result<Array2<f64>> {
    validate_mask_input(m_s)?;
    Ok(flip_per_bin(m_s))
}

/// Converts an interference-side mask into a target-side mask; same flip,
/// opposite direction.
pub fn target_from_interference(m_n: ArrayView2<f64>) -> Result<Array2<f64>> {
    validate_mask_input(m_n)?;
    Ok(flip_per_bin(m_n))
}

/// Projects one frequency bin's mask row onto the optimizer's feasible
/// set: negative (or non-finite) entries clamp to zero, an all-zero row
/// resets to all ones, and the row is rescaled to unit mean square over
/// frames.
pub fn project_constraints_row(row: &mut [f64]) {
    let mut sumsq = 0.0;
    for v in row.iter_mut() {
        if !v.is_finite() || *v < 0.0 {
            *v = 0.0;
        }
        sumsq += *v * *v;
    }
    if sumsq == 0.0 {
        row.fill(1.0);
        return;
    }
    let rms = (sumsq / row.len() as f64).sqrt();
    for v in row.iter_mut() {
        *v /= rms;
    }
}

/// Applies [`project_constraints_row`] to every frequency bin of a mask.
///
/// The projection is idempotent up to floating-point rounding and leaves
/// the mask's shape within each bin (ratios of entries) untouched.
pub fn project_constraints(mask: &mut Array2<f64>) {
    for mut row in mask.rows_mut() {
        project_constraints_row(
            row.as_slice_mut()
                .expect("masks are stored in standard row-major layout"),
        );
    }
}
