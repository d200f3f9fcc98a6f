//! Evaluation metrics: SDR, scale-invariant SDR, SNR and spectral MSE.
//!
//! All the decibel metrics share two conventions. A zero estimate scores
//! 0 dB (the estimator did nothing, which is the natural floor for a
//! distortion ratio against a nonzero reference), and a residual below
//! `RESIDUAL_FLOOR_REL` of the reference energy is capped at
//! [`PERFECT_SCORE_DB`] so "numerically perfect" results compare equal
//! instead of ranking on rounding noise.

use ndarray::ArrayView2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Score assigned when the residual is negligible relative to the
/// reference.
pub const PERFECT_SCORE_DB: f64 = 100.0;

/// Residual-to-reference energy ratio below which a result counts as
/// perfect.
pub const RESIDUAL_FLOOR_REL: f64 = 1e-10;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::invalid_input("empty reference signal"));
    }
    if reference.len() != estimate.len() {
        return Err(Error::invalid_input(format!(
            "signal lengths differ: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

fn ratio_db(signal_energy: f64, residual_energy: f64) -> f64 {
    if residual_energy <= RESIDUAL_FLOOR_REL * signal_energy {
        PERFECT_SCORE_DB
    } else {
        10.0 * (signal_energy / residual_energy).log10()
    }
}

/// Signal-to-distortion ratio `10·log10(Σ s² / Σ (s - y)²)` in dB.
pub fn sdr_db(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let es = energy(reference);
    if es == 0.0 {
        return Err(Error::invalid_input("reference signal is all zeros"));
    }
    if energy(estimate) == 0.0 {
        return Ok(0.0);
    }
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, y)| (s - y) * (s - y))
        .sum();
    Ok(ratio_db(es, residual))
}

/// Scale-invariant SDR: the estimate is first rescaled by the least-squares
/// gain `α = Σ s·y / Σ y²`, so any global amplitude error is forgiven.
pub fn si_sdr_db(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let es = energy(reference);
    if es == 0.0 {
        return Err(Error::invalid_input("reference signal is all zeros"));
    }
    let ey = energy(estimate);
    if ey == 0.0 {
        return Ok(0.0);
    }
    let cross: f64 = reference.iter().zip(estimate).map(|(s, y)| s * y).sum();
    let alpha = cross / ey;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, y)| {
            let d = s - alpha * y;
            d * d
        })
        .sum();
    Ok(ratio_db(es, residual))
}

/// Signal-to-noise ratio between a clean component and a noise component
/// (`10·log10(Σ s² / Σ n²)`).
pub fn snr_db(signal: &[f64], noise: &[f64]) -> Result<f64> {
    check_pair(signal, noise)?;
    let es = energy(signal);
    if es == 0.0 {
        return Err(Error::invalid_input("signal component is all zeros"));
    }
    let en = energy(noise);
    if en == 0.0 {
        return Ok(PERFECT_SCORE_DB);
    }
    Ok(ratio_db(es, en))
}

/// Mean squared error between two complex TF grids, reported per frequency
/// bin (mean over frames) plus the fullband sum of the per-bin values.
pub fn mse_tf(
    reference: ArrayView2<Complex64>,
    estimate: ArrayView2<Complex64>,
) -> Result<(Vec<f64>, f64)> {
    if reference.dim() != estimate.dim() {
        return Err(Error::invalid_input(format!(
            "TF grid shapes differ: {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    let (n_bins, n_frames) = reference.dim();
    if n_bins == 0 || n_frames == 0 {
        return Err(Error::invalid_input("TF grid is empty"));
    }
    let mut per_bin = Vec::with_capacity(n_bins);
    for f in 0..n_bins {
        let mut acc = 0.0;
        for t in 0..n_frames {
            acc += (reference[[f, t]] - estimate[[f, t]]).norm_sqr();
        }
        per_bin.push(acc / n_frames as f64);
    }
    let fullband = per_bin.iter().sum();
    Ok((per_bin, fullband))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn sdr_of_exact_estimate_is_capped() {
        let s = vec![0.5, -0.25, 1.0, 0.0, 0.125];
        assert_eq!(sdr_db(&s, &s).unwrap(), PERFECT_SCORE_DB);
    }

    #[test]
    fn sdr_of_zero_estimate_is_zero_db() {
        let s = vec![1.0, -1.0, 0.5];
        assert_eq!(sdr_db(&s, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn sdr_matches_hand_computation() {
        let s = vec![1.0, 0.0];
        let y = vec![0.5, 0.0];
        // Residual energy 0.25 against signal energy 1: 6.0206 dB.
        assert_abs_diff_eq!(sdr_db(&s, &y).unwrap(), 10.0 * 4.0f64.log10(), epsilon = 1e-12);
    }

    #[test]
    fn si_sdr_forgives_global_gain() {
        let s: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = s.iter().map(|v| v * 0.1).collect();
        assert!(sdr_db(&s, &y).unwrap() < 1.0);
        assert_eq!(si_sdr_db(&s, &y).unwrap(), PERFECT_SCORE_DB);
    }

    #[test]
    fn si_sdr_never_below_sdr() {
        let s: Vec<f64> = (0..256).map(|i| (i as f64 * 0.11).sin()).collect();
        let y: Vec<f64> = s
            .iter()
            .enumerate()
            .map(|(i, v)| 0.8 * v + 0.1 * ((i as f64 * 0.37).cos()))
            .collect();
        assert!(si_sdr_db(&s, &y).unwrap() >= sdr_db(&s, &y).unwrap() - 1e-12);
    }

    #[test]
    fn snr_doubling_amplitude_costs_six_db() {
        let s: Vec<f64> = (0..128).map(|i| (i as f64 * 0.2).sin()).collect();
        let n: Vec<f64> = (0..128).map(|i| (i as f64 * 0.7).cos() * 0.3).collect();
        let n2: Vec<f64> = n.iter().map(|v| v * 2.0).collect();
        let drop = snr_db(&s, &n).unwrap() - snr_db(&s, &n2).unwrap();
        assert_abs_diff_eq!(drop, 20.0 * 2.0f64.log10(), epsilon = 1e-12);
    }

    #[test]
    fn mse_tf_sums_per_bin_means() {
        let a = Array2::from_shape_fn((3, 4), |(f, t)| {
            Complex64::new(f as f64, t as f64)
        });
        let mut b = a.clone();
        b[[1, 2]] += Complex64::new(0.0, 2.0);
        let (per_bin, fullband) = mse_tf(a.view(), b.view()).unwrap();
        assert_eq!(per_bin.len(), 3);
        assert_abs_diff_eq!(per_bin[0], 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(per_bin[1], 4.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fullband, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(sdr_db(&[1.0], &[1.0, 2.0]).is_err());
        assert!(si_sdr_db(&[], &[]).is_err());
    }
}
