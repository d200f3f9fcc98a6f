//! Covariance-driven beamformers and per-bin output scaling.
//!
//! Five filter designs share one pipeline. Writing `Φx` for the mixture
//! covariance of a bin, `Φ̂s`/`Φ̂n` for mask-weighted covariances and `k`
//! for the reference channel:
//!
//! * mask Wiener — `w = Φx⁻¹ · ⟨m_s · x · conj(x_k)⟩`
//! * ideal Wiener — `w = Φx⁻¹ · ⟨x · conj(s_k)⟩` (needs the clean target)
//! * max-SNR — dominant eigenvector of `Φ̂s w = λ Φ̂n w`
//! * max-SOR — dominant eigenvector of `Φ̂s w = λ Φx w`
//! * min-NOR — minorant eigenvector of `Φ̂n w = λ Φx w`
//!
//! Every *estimated* covariance is diagonally loaded exactly once with
//! `ε·(trace/N)·I` before use — the eigensolver loads its right-hand
//! matrix, and the builders here pre-load the left-hand one. Loading each
//! covariance by its own trace keeps the algebraic equivalences between the
//! three eigenvector designs intact: when the two masks of a bin sum to a
//! constant, the loaded covariances still satisfy `Φ̂s' + Φ̂n' = α·Φx'`,
//! so max-SNR, max-SOR and min-NOR return the same filter direction.
//!
//! A numerical failure in one bin (e.g. a silent bin whose covariance
//! cannot be factorized) zeroes that bin's filter and records a warning
//! instead of failing the whole utterance.

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{gev_max, gev_min, solve_loaded, solve_refined, weighted_covariance};
use crate::masks::MaskSet;
use crate::stft::Spectrogram;

/// The beamformer designs the laboratory compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Method {
    MaskMwf,
    IdealMwf,
    MaxSnr,
    MaxSor,
    MinNor,
}

impl Method {
    /// Stable lowercase identifier used in files, tables and CLI values.
    pub fn label(&self) -> &'static str {
        match self {
            Method::MaskMwf => "mask_mwf",
            Method::IdealMwf => "ideal_mwf",
            Method::MaxSnr => "max_snr",
            Method::MaxSor => "max_sor",
            Method::MinNor => "min_nor",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        Ok(match label {
            "mask_mwf" => Method::MaskMwf,
            "ideal_mwf" => Method::IdealMwf,
            "max_snr" => Method::MaxSnr,
            "max_sor" => Method::MaxSor,
            "min_nor" => Method::MinNor,
            other => {
                return Err(Error::invalid_input(format!(
                    "unknown method '{other}' (expected mask_mwf, ideal_mwf, max_snr, max_sor or min_nor)"
                )))
            }
        })
    }

    /// Whether the design reads the target-side mask.
    pub fn uses_target_mask(&self) -> bool {
        matches!(self, Method::MaskMwf | Method::MaxSnr | Method::MaxSor)
    }

    /// Whether the design reads the interference-side mask.
    pub fn uses_interference_mask(&self) -> bool {
        matches!(self, Method::MaxSnr | Method::MinNor)
    }

    /// All mask-driven designs, in fixed report order.
    pub fn mask_driven() -> [Method; 4] {
        [Method::MaxSnr, Method::MaxSor, Method::MinNor, Method::MaskMwf]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BeamformerConfig {
    /// Relative diagonal loading `ε` applied once per estimated covariance.
    pub loading: f64,
    /// Reference channel `k` for cross-covariances and output scaling.
    pub ref_mic: usize,
}

impl Default for BeamformerConfig {
    fn default() -> Self {
        Self {
            loading: 1e-6,
            ref_mic: 0,
        }
    }
}

/// Per-bin filter weights, `bins × channels`, applied as `y = wᴴ x`.
#[derive(Debug, Clone)]
pub struct BeamformerFilter {
    pub weights: Array2<Complex64>,
    /// One entry per bin that was zeroed after a contained numerical
    /// failure.
    pub warnings: Vec<String>,
}

fn validate_masks(x: &Spectrogram, mask: ArrayView2<f64>) -> Result<()> {
    if mask.dim() != (x.n_bins(), x.n_frames()) {
        return Err(Error::invalid_input(format!(
            "mask shape {:?} does not match spectrogram grid ({}, {})",
            mask.dim(),
            x.n_bins(),
            x.n_frames()
        )));
    }
    if mask.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::constraint(
            "mask entries must be finite and nonnegative",
        ));
    }
    Ok(())
}

fn validate_ref(x: &Spectrogram, cfg: &BeamformerConfig) -> Result<()> {
    if cfg.ref_mic >= x.n_channels() {
        return Err(Error::invalid_input(format!(
            "reference channel {} out of range for {} channels",
            cfg.ref_mic,
            x.n_channels()
        )));
    }
    if !(cfg.loading.is_finite() && cfg.loading >= 0.0) {
        return Err(Error::invalid_config(format!(
            "loading must be finite and nonnegative, got {}",
            cfg.loading
        )));
    }
    Ok(())
}

/// Mask-weighted cross-covariance of all channels against one reference
/// row: `r_i = (1/T) Σ_t w_t · x_i(t) · conj(ref(t))`.
fn weighted_cross(
    x: ArrayView2<Complex64>,
    reference: &[Complex64],
    weights: Option<&[f64]>,
) -> Vec<Complex64> {
    let (n_ch, n_frames) = x.dim();
    let inv_t = 1.0 / n_frames as f64;
    (0..n_ch)
        .map(|i| {
            let row = x.row(i);
            let mut acc = Complex64::ZERO;
            for t in 0..n_frames {
                let w = weights.map_or(1.0, |w| w[t]);
                acc += w * row[t] * reference[t].conj();
            }
            acc * inv_t
        })
        .collect()
}

/// Runs `per_bin` over every frequency bin, zeroing bins whose computation
/// fails numerically.
fn build_per_bin(
    x: &Spectrogram,
    mut per_bin: impl FnMut(usize, ArrayView2<Complex64>) -> Result<Vec<Complex64>>,
) -> Result<BeamformerFilter> {
    let n_ch = x.n_channels();
    let mut weights = Array2::zeros((x.n_bins(), n_ch));
    let mut warnings = Vec::new();
    for f in 0..x.n_bins() {
        let xf = x.bins.slice(s![.., f, ..]);
        match per_bin(f, xf) {
            Ok(w) => {
                for (i, v) in w.into_iter().enumerate() {
                    weights[[f, i]] = v;
                }
            }
            Err(Error::NumericalError(msg)) => {
                warnings.push(format!("bin {f}: {msg}; filter zeroed"));
            }
            Err(other) => return Err(other),
        }
    }
    Ok(BeamformerFilter { weights, warnings })
}

/// Mask-driven multichannel Wiener filter.
pub fn mask_mwf_filter(
    x: &Spectrogram,
    m_s: ArrayView2<f64>,
    cfg: &BeamformerConfig,
) -> Result<BeamformerFilter> {
    validate_ref(x, cfg)?;
    validate_masks(x, m_s)?;
    let k = cfg.ref_mic;
    build_per_bin(x, |f, xf| {
        let phi_x = weighted_covariance(xf, None)?;
        let mask_row: Vec<f64> = m_s.row(f).to_vec();
        let reference: Vec<Complex64> = xf.row(k).to_vec();
        let r = weighted_cross(xf, &reference, Some(&mask_row));
        solve_loaded(&phi_x, &r, cfg.loading)
    })
}

/// Ideal multichannel Wiener filter driven by the clean target at the
/// reference channel instead of a mask.
///
/// This filter serves as the per-bin least-squares optimum every other
/// design is measured against, so its solve is refined past the diagonal
/// loading: the loading only preconditions the factorization and the
/// returned weights satisfy the *unloaded* normal equations wherever the
/// mixture covariance is numerically invertible.
pub fn ideal_mwf_filter(
    x: &Spectrogram,
    clean: &Spectrogram,
    cfg: &BeamformerConfig,
) -> Result<BeamformerFilter> {
    validate_ref(x, cfg)?;
    if clean.bins.dim() != x.bins.dim() {
        return Err(Error::invalid_input(
            "clean spectrogram must share the mixture grid",
        ));
    }
    let k = cfg.ref_mic;
    build_per_bin(x, |f, xf| {
        let phi_x = weighted_covariance(xf, None)?;
        let s_row: Vec<Complex64> = clean.bins.slice(s![k, f, ..]).to_vec();
        let r = weighted_cross(xf, &s_row, None);
        solve_refined(&phi_x, &r, cfg.loading)
    })
}

/// Dominant generalized eigenvector of target covariance against
/// interference covariance.
pub fn max_snr_filter(
    x: &Spectrogram,
    m_s: ArrayView2<f64>,
    m_n: ArrayView2<f64>,
    cfg: &BeamformerConfig,
) -> Result<BeamformerFilter> {
    validate_ref(x, cfg)?;
    validate_masks(x, m_s)?;
    validate_masks(x, m_n)?;
    build_per_bin(x, |f, xf| {
        let ms_row: Vec<f64> = m_s.row(f).to_vec();
        let mn_row: Vec<f64> = m_n.row(f).to_vec();
        let phi_s = weighted_covariance(xf, Some(&ms_row))?.loaded(cfg.loading);
        let phi_n = weighted_covariance(xf, Some(&mn_row))?;
        Ok(gev_max(&phi_s, &phi_n, cfg.loading)?.filter)
    })
}

/// Dominant generalized eigenvector of target covariance against mixture
/// covariance.
pub fn max_sor_filter(
    x: &Spectrogram,
    m_s: ArrayView2<f64>,
    cfg: &BeamformerConfig,
) -> Result<BeamformerFilter> {
    validate_ref(x, cfg)?;
    validate_masks(x, m_s)?;
    build_per_bin(x, |f, xf| {
        let ms_row: Vec<f64> = m_s.row(f).to_vec();
        let phi_s = weighted_covariance(xf, Some(&ms_row))?.loaded(cfg.loading);
        let phi_x = weighted_covariance(xf, None)?;
        Ok(gev_max(&phi_s, &phi_x, cfg.loading)?.filter)
    })
}

/// Minorant generalized eigenvector of interference covariance against
/// mixture covariance.
pub fn min_nor_filter(
    x: &Spectrogram,
    m_n: ArrayView2<f64>,
    cfg: &BeamformerConfig,
) -> Result<BeamformerFilter> {
    validate_ref(x, cfg)?;
    validate_masks(x, m_n)?;
    build_per_bin(x, |f, xf| {
        let mn_row: Vec<f64> = m_n.row(f).to_vec();
        let phi_n = weighted_covariance(xf, Some(&mn_row))?.loaded(cfg.loading);
        let phi_x = weighted_covariance(xf, None)?;
        Ok(gev_min(&phi_n, &phi_x, cfg.loading)?.filter)
    })
}

/// Dispatches to the right builder for `method`. `clean` is required for
/// the ideal Wiener filter, `masks` for everything else (only the sides the
/// method actually reads are validated).
pub fn build_filter(
    method: Method,
    x: &Spectrogram,
    clean: Option<&Spectrogram>,
    masks: Option<&MaskSet>,
    cfg: &BeamformerConfig,
) -> Result<BeamformerFilter> {
    let need_masks = || {
        masks.ok_or_else(|| {
            Error::invalid_input(format!("method {} requires masks", method.label()))
        })
    };
    match method {
        Method::IdealMwf => {
            let clean = clean.ok_or_else(|| {
                Error::invalid_input("ideal_mwf requires the clean target spectrogram")
            })?;
            ideal_mwf_filter(x, clean, cfg)
        }
        Method::MaskMwf => mask_mwf_filter(x, need_masks()?.m_s.view(), cfg),
        Method::MaxSnr => {
            let m = need_masks()?;
            max_snr_filter(x, m.m_s.view(), m.m_n.view(), cfg)
        }
        Method::MaxSor => max_sor_filter(x, need_masks()?.m_s.view(), cfg),
        Method::MinNor => min_nor_filter(x, need_masks()?.m_n.view(), cfg),
    }
}

/// Applies a filter: `y[f, t] = Σ_i conj(w[f, i]) · x[i, f, t]`.
pub fn apply_filter(filter: &BeamformerFilter, x: &Spectrogram) -> Result<Array2<Complex64>> {
    let (n_ch, n_bins, n_frames) = x.bins.dim();
    if filter.weights.dim() != (n_bins, n_ch) {
        return Err(Error::invalid_input(format!(
            "filter shape {:?} does not match spectrogram ({n_bins} bins × {n_ch} channels)",
            filter.weights.dim()
        )));
    }
    let mut y = Array2::zeros((n_bins, n_frames));
    for f in 0..n_bins {
        for t in 0..n_frames {
            let mut acc = Complex64::ZERO;
            for i in 0..n_ch {
                acc += filter.weights[[f, i]].conj() * x.bins[[i, f, t]];
            }
            y[[f, t]] = acc;
        }
    }
    Ok(y)
}

/// Per-bin least-squares output scaling against a reference TF signal:
/// `γ_f = ⟨ref · conj(y)⟩_t / ⟨|y|²⟩_t`, with `γ_f = 0` for silent bins.
/// Scales `y` in place and returns the per-bin gains.
pub fn ideal_scale(
    y: &mut Array2<Complex64>,
    reference: ArrayView2<Complex64>,
) -> Result<Vec<Complex64>> {
    if y.dim() != reference.dim() {
        return Err(Error::invalid_input(format!(
            "output grid {:?} does not match reference grid {:?}",
            y.dim(),
            reference.dim()
        )));
    }
    let (n_bins, n_frames) = y.dim();
    let mut gammas = Vec::with_capacity(n_bins);
    for f in 0..n_bins {
        let mut num = Complex64::ZERO;
        let mut den = 0.0;
        for t in 0..n_frames {
            num += reference[[f, t]] * y[[f, t]].conj();
            den += y[[f, t]].norm_sqr();
        }
        let gamma = if den > 0.0 {
            num / den
        } else {
            Complex64::ZERO
        };
        for t in 0..n_frames {
            y[[f, t]] *= gamma;
        }
        gammas.push(gamma);
    }
    Ok(gammas)
}
