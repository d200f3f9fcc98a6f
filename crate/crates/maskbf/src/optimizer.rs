//! Per-bin mask optimization by projected gradient descent.
//!
//! The objective of a frequency bin is the reconstruction error that
//! remains *after* the per-bin least-squares output gain: writing
//! `y_t = wᴴ x_t` for the beamformer output, `r_s = Σ_t x_t conj(s_t)`,
//! `R = Σ_t x_t x_tᴴ` and `E_s = Σ_t |s_t|²`,
//!
//! ```text
//! J(w) = (1/T) · min_γ Σ_t |s_t - γ y_t|²
//!      = (1/T) · (E_s - |r_sᴴ w|² / (wᴴ R w))
//! ```
//!
//! `J` is invariant to any complex rescaling of `w`, which has two useful
//! consequences: the eigenvector normalization/phase conventions drop out,
//! and the gradient of `J` with respect to `w̄` is orthogonal to `w`, so
//! normalization constraints contribute nothing to mask gradients.
//!
//! Masks enter through the filters. For the Wiener path `w = M⁻¹ r(m)`
//! the chain rule is direct; for the eigenvector designs the gradient uses
//! first-order eigenvector perturbation over the full `B'`-orthonormal
//! eigenbasis `{(λ_i, w_i)}` returned by the solver,
//!
//! ```text
//! ∂w_j = Σ_{i≠j} w_i · w_iᴴ (∂A - λ_j ∂B) w_j / (λ_j - λ_i),
//! ```
//!
//! including the mask-dependent diagonal loading of each estimated
//! covariance (`∂(ε·tr/N·I)/∂m_t = ε‖x_t‖²/(T·N)·I`). Near-degenerate
//! eigenvalue gaps are skipped — the filter is not differentiable across
//! them, and the projected step simply does not move along those
//! directions.
//!
//! A finite-difference mode with central differences serves as the
//! reference implementation; it is orders of magnitude slower and exists
//! for verification and as a fallback.

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beamform::Method;
use crate::error::{Error, Result};
use crate::linalg::{
    gev_full, solve_refined, weighted_covariance_signed, CholeskyFactor, EigenBasis,
    HermitianMatrix, PivotMode,
};
use crate::masks::{project_constraints_row, MaskSet};
use crate::scene::Scene;

/// Relative eigenvalue gap below which perturbation terms are dropped.
const EIGEN_GAP_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GradientMode {
    /// Closed-form gradients through the filter solve (default).
    Analytic,
    /// Central finite differences over every mask entry; the reference
    /// implementation, at roughly `2T` filter solves per gradient.
    FiniteDifference,
}

impl GradientMode {
    pub fn label(&self) -> &'static str {
        match self {
            GradientMode::Analytic => "analytic",
            GradientMode::FiniteDifference => "fd",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        Ok(match label {
            "analytic" => GradientMode::Analytic,
            "fd" => GradientMode::FiniteDifference,
            other => {
                return Err(Error::invalid_input(format!(
                    "unknown gradient mode '{other}' (expected analytic or fd)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    /// Maximum gradient steps per bin.
    pub iterations: usize,
    /// Step length after normalizing the gradient to unit max-norm.
    pub step_size: f64,
    /// Stop a bin early when the best objective improves by less than this
    /// relative amount over `early_stop_window` iterations.
    pub early_stop_rel: f64,
    pub early_stop_window: usize,
    pub gradient: GradientMode,
    /// Central-difference step for [`GradientMode::FiniteDifference`].
    pub fd_step: f64,
    /// Relative magnitude of the deterministic per-bin jitter applied to
    /// the initial mask (0 disables it).
    pub init_jitter: f64,
    /// Seed for the jitter stream.
    pub seed: u64,
    /// Relative diagonal loading, shared with the beamformers.
    pub loading: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 0.01,
            early_stop_rel: 1e-8,
            early_stop_window: 20,
            gradient: GradientMode::Analytic,
            fd_step: 1e-5,
            init_jitter: 1e-3,
            seed: 0,
            loading: 1e-6,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid_config("iteration budget must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid_config("step size must be positive"));
        }
        if self.early_stop_window == 0 {
            return Err(Error::invalid_config("early-stop window must be at least 1"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::invalid_config("finite-difference step must be positive"));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::invalid_config("init jitter must be nonnegative"));
        }
        if !(self.loading >= 0.0 && self.loading.is_finite()) {
            return Err(Error::invalid_config("loading must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-bin objective values plus their fullband sum.
#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    pub per_bin: Vec<f64>,
    pub fullband: f64,
}

/// Mask-shaped gradient; only the sides the method consumes are present.
#[derive(Debug, Clone)]
pub struct MaskGradient {
    pub m_s: Option<Array2<f64>>,
    pub m_n: Option<Array2<f64>>,
}

/// Everything `optimize` produces: the best masks found, the best-so-far
/// objective per bin and iteration, and bookkeeping.
#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    /// Best-so-far objective, `bins × (iterations + 1)`; column 0 is the
    /// post-projection initial objective. Non-increasing along every row by
    /// construction.
    pub per_bin: Array2<f64>,
    /// Sum of `per_bin` over bins per iteration.
    pub fullband: Vec<f64>,
    /// Final masks (best-so-far per bin; sides the method does not consume
    /// pass through from the init unchanged).
    pub masks: MaskSet,
    /// Gradient steps actually executed per bin.
    pub iterations_run: Vec<usize>,
    /// One entry per bin that had to be abandoned numerically.
    pub warnings: Vec<String>,
}

impl OptimizationTrace {
    /// Fullband objective after the last iteration.
    pub fn final_objective(&self) -> f64 {
        *self.fullband.last().expect("trace has at least one column")
    }

    /// Fullband objective at initialization.
    pub fn initial_objective(&self) -> f64 {
        self.fullband[0]
    }
}

/// The filter a method produced for one bin, retaining the eigenbasis when
/// there is one so gradients can reuse it.
enum SolvedFilter {
    Direct(Vec<Complex64>),
    Eigen { basis: EigenBasis, selected: usize },
}

impl SolvedFilter {
    fn filter(&self) -> &[Complex64] {
        match self {
            SolvedFilter::Direct(w) => w,
            SolvedFilter::Eigen { basis, selected } => &basis.vectors[*selected],
        }
    }
}

/// Immutable per-bin data shared by every objective/gradient evaluation.
struct BinProblem {
    x: Array2<Complex64>,
    k: usize,
    /// `Σ_t |s_t|²` of the clean reference.
    es_sum: f64,
    /// `Σ_t x_t conj(s_t)`.
    r_s: Vec<Complex64>,
    /// `‖x_t‖²` per frame (drives the loading derivative).
    xsq: Vec<f64>,
    /// Mean mixture covariance of the bin.
    phi_x: HermitianMatrix,
    /// Factorization of the loaded mixture covariance (Wiener solves).
    chol_x: CholeskyFactor,
    w_ideal: Vec<Complex64>,
    n_ch: usize,
    n_frames: usize,
    loading: f64,
}

impl BinProblem {
    fn build(scene: &Scene, f: usize, loading: f64) -> Result<Self> {
        let x = scene.x_tf.bins.slice(s![.., f, ..]).to_owned();
        let (n_ch, n_frames) = x.dim();
        let k = scene.ref_mic;
        let sk: Vec<Complex64> = scene.s_tf.bins.slice(s![k, f, ..]).to_vec();
        let es_sum = sk.iter().map(|z| z.norm_sqr()).sum();
        let r_s: Vec<Complex64> = (0..n_ch)
            .map(|i| {
                (0..n_frames)
                    .map(|t| x[[i, t]] * sk[t].conj())
                    .sum::<Complex64>()
            })
            .collect();
        let xsq: Vec<f64> = (0..n_frames)
            .map(|t| (0..n_ch).map(|i| x[[i, t]].norm_sqr()).sum())
            .collect();
        let phi_x = weighted_covariance_signed(x.view(), None)?;
        let chol_x =
            CholeskyFactor::decompose(&phi_x.loaded(loading), PivotMode::AllowSemidefinite)?;
        let r_ideal: Vec<Complex64> = r_s.iter().map(|z| z / n_frames as f64).collect();
        // Refined past the loading so the ideal filter is the bin's true
        // least-squares optimum, matching the filter builders.
        let w_ideal = solve_refined(&phi_x, &r_ideal, loading)?;
        Ok(Self {
            x,
            k,
            es_sum,
            r_s,
            xsq,
            phi_x,
            chol_x,
            w_ideal,
            n_ch,
            n_frames,
            loading,
        })
    }

    /// Post-scaling reconstruction error of an arbitrary filter.
    fn objective_of(&self, w: &[Complex64]) -> f64 {
        let t = self.n_frames as f64;
        let a: Complex64 = self
            .r_s
            .iter()
            .zip(w)
            .map(|(r, wi)| r.conj() * wi)
            .sum();
        let q = t * self.phi_x.quad(w);
        if q <= 0.0 {
            return self.es_sum / t;
        }
        ((self.es_sum - a.norm_sqr() / q) / t).max(0.0)
    }

    /// Builds the method's filter from the given mask rows.
    fn solve(
        &self,
        method: Method,
        ms: Option<&[f64]>,
        mn: Option<&[f64]>,
    ) -> Result<SolvedFilter> {
        fn need(m: Option<&[f64]>) -> Result<&[f64]> {
            m.ok_or_else(|| Error::invalid_input("method requires a mask row it was not given"))
        }
        match method {
            Method::IdealMwf => Ok(SolvedFilter::Direct(self.w_ideal.clone())),
            Method::MaskMwf => {
                let ms = need(ms)?;
                let inv_t = 1.0 / self.n_frames as f64;
                let r: Vec<Complex64> = (0..self.n_ch)
                    .map(|i| {
                        (0..self.n_frames)
                            .map(|t| ms[t] * self.x[[i, t]] * self.x[[self.k, t]].conj())
                            .sum::<Complex64>()
                            * inv_t
                    })
                    .collect();
                Ok(SolvedFilter::Direct(self.chol_x.solve(&r)?))
            }
            Method::MaxSnr => {
                let a = weighted_covariance_signed(self.x.view(), Some(need(ms)?))?
                    .loaded(self.loading);
                let b = weighted_covariance_signed(self.x.view(), Some(need(mn)?))?;
                let basis = gev_full(&a, &b, self.loading)?;
                let selected = basis.eigenvalues.len() - 1;
                Ok(SolvedFilter::Eigen { basis, selected })
            }
            Method::MaxSor => {
                let a = weighted_covariance_signed(self.x.view(), Some(need(ms)?))?
                    .loaded(self.loading);
                let basis = gev_full(&a, &self.phi_x, self.loading)?;
                let selected = basis.eigenvalues.len() - 1;
                Ok(SolvedFilter::Eigen { basis, selected })
            }
            Method::MinNor => {
                let a = weighted_covariance_signed(self.x.view(), Some(need(mn)?))?
                    .loaded(self.loading);
                let basis = gev_full(&a, &self.phi_x, self.loading)?;
                Ok(SolvedFilter::Eigen { basis, selected: 0 })
            }
        }
    }

    fn objective(&self, method: Method, ms: Option<&[f64]>, mn: Option<&[f64]>) -> Result<f64> {
        Ok(self.objective_of(self.solve(method, ms, mn)?.filter()))
    }

    /// `∂J/∂w̄` at `w`, or `None` where the output energy vanishes and the
    /// objective is flat.
    fn grad_w(&self, w: &[Complex64]) -> Option<Vec<Complex64>> {
        let t = self.n_frames as f64;
        let raw: Complex64 = self
            .r_s
            .iter()
            .zip(w)
            .map(|(r, wi)| r.conj() * wi)
            .sum();
        let q = t * self.phi_x.quad(w);
        if q <= 0.0 {
            return None;
        }
        // With the least-squares gain a = r_sᴴw / q the gradient is
        // (1/T)(-a·r_s + |a|²·T·Φ_x w); it is orthogonal to w, as scale
        // invariance demands.
        let a = raw / q;
        let pw = self.phi_x.matvec(w);
        let coef = a.norm_sqr() * t;
        Some(
            (0..self.n_ch)
                .map(|i| (-a * self.r_s[i] + coef * pw[i]) / t)
                .collect(),
        )
    }

    /// Analytic mask gradient; returns sides in method order `(m_s, m_n)`.
    fn analytic_gradient(
        &self,
        method: Method,
        ms: Option<&[f64]>,
        mn: Option<&[f64]>,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let solved = self.solve(method, ms, mn)?;
        let w = solved.filter();
        let Some(g_w) = self.grad_w(w) else {
            // Flat objective: zero gradient on whatever sides are in use.
            let zero = || Some(vec![0.0; self.n_frames]);
            return Ok(match method {
                Method::MaskMwf | Method::MaxSor => (zero(), None),
                Method::MinNor => (None, zero()),
                Method::MaxSnr => (zero(), zero()),
                Method::IdealMwf => (None, None),
            });
        };
        let t = self.n_frames as f64;

        match (&solved, method) {
            (SolvedFilter::Direct(_), Method::MaskMwf) => {
                // dJ/dm_t = (2/T)·Re[(M⁻¹g_w)ᴴ x_t · conj(x_k(t))]
                let u = self.chol_x.solve(&g_w)?;
                let grad: Vec<f64> = (0..self.n_frames)
                    .map(|ti| {
                        let ux: Complex64 = (0..self.n_ch)
                            .map(|i| u[i].conj() * self.x[[i, ti]])
                            .sum();
                        2.0 / t * (ux * self.x[[self.k, ti]].conj()).re
                    })
                    .collect();
                Ok((Some(grad), None))
            }
            (SolvedFilter::Eigen { basis, selected }, _) => {
                let j = *selected;
                let n = self.n_ch;
                let lam_j = basis.eigenvalues[j];
                // c_i = g_wᴴ w_i and the gap-weighted couplings d_i.
                let mut d = vec![Complex64::ZERO; n];
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let gap = lam_j - basis.eigenvalues[i];
                    let scale = lam_j.abs() + basis.eigenvalues[i].abs();
                    if gap.abs() <= EIGEN_GAP_REL_TOL * scale + f64::MIN_POSITIVE {
                        continue; // non-differentiable direction, skip
                    }
                    let c: Complex64 = g_w
                        .iter()
                        .zip(&basis.vectors[i])
                        .map(|(g, v)| g.conj() * v)
                        .sum();
                    d[i] = c / gap;
                }
                // a_i(t) = w_iᴴ x_t for every basis vector.
                let mut a = Array2::from_elem((n, self.n_frames), Complex64::ZERO);
                for i in 0..n {
                    for ti in 0..self.n_frames {
                        let mut acc = Complex64::ZERO;
                        for r in 0..n {
                            acc += basis.vectors[i][r].conj() * self.x[[r, ti]];
                        }
                        a[[i, ti]] = acc;
                    }
                }
                // σ_S = Σ_{i≠j} d_i · w_iᴴ w_j (loading derivative weight).
                let mut sigma = Complex64::ZERO;
                for i in 0..n {
                    if i == j || d[i] == Complex64::ZERO {
                        continue;
                    }
                    let s_ij: Complex64 = basis.vectors[i]
                        .iter()
                        .zip(&basis.vectors[j])
                        .map(|(p, q)| p.conj() * q)
                        .sum();
                    sigma += d[i] * s_ij;
                }
                let load_coef = 2.0 * self.loading / (t * n as f64) * sigma.re;
                // E(t): sensitivity of J to the covariance on the mask's
                // side of the pencil.
                let e: Vec<f64> = (0..self.n_frames)
                    .map(|ti| {
                        let p: Complex64 = (0..n)
                            .filter(|i| *i != j && d[*i] != Complex64::ZERO)
                            .map(|i| d[i] * a[[i, ti]])
                            .sum();
                        2.0 / t * (p * a[[j, ti]].conj()).re + load_coef * self.xsq[ti]
                    })
                    .collect();
                Ok(match method {
                    Method::MaxSor => (Some(e), None),
                    Method::MinNor => (None, Some(e)),
                    Method::MaxSnr => {
                        // The interference mask sits on the loaded right-hand
                        // side: same sensitivity scaled by -λ_j.
                        let gn: Vec<f64> = e.iter().map(|v| -lam_j * v).collect();
                        (Some(e), Some(gn))
                    }
                    _ => unreachable!("eigen solution only for eigen methods"),
                })
            }
            _ => Err(Error::invalid_input(format!(
                "no mask gradient for method {}",
                method.label()
            ))),
        }
    }

    /// Central-difference mask gradient; falls back to one-sided where a
    /// probe fails numerically.
    fn fd_gradient(
        &self,
        method: Method,
        ms: Option<&[f64]>,
        mn: Option<&[f64]>,
        h: f64,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let j0 = self.objective(method, ms, mn)?;
        let probe_role = |role_is_ms: bool| -> Result<Vec<f64>> {
            let base = if role_is_ms { ms } else { mn }.expect("role checked by caller");
            let mut probe = base.to_vec();
            let mut grad = vec![0.0; self.n_frames];
            for ti in 0..self.n_frames {
                let orig = probe[ti];
                probe[ti] = orig + h;
                let jp = if role_is_ms {
                    self.objective(method, Some(&probe), mn)
                } else {
                    self.objective(method, ms, Some(&probe))
                };
                probe[ti] = orig - h;
                let jm = if role_is_ms {
                    self.objective(method, Some(&probe), mn)
                } else {
                    self.objective(method, ms, Some(&probe))
                };
                probe[ti] = orig;
                grad[ti] = match (jp, jm) {
                    (Ok(p), Ok(m)) => (p - m) / (2.0 * h),
                    (Ok(p), Err(_)) => (p - j0) / h,
                    (Err(_), Ok(m)) => (j0 - m) / h,
                    (Err(_), Err(_)) => 0.0,
                };
            }
            Ok(grad)
        };
        let gs = if method.uses_target_mask() {
            Some(probe_role(true)?)
        } else {
            None
        };
        let gn = if method.uses_interference_mask() {
            Some(probe_role(false)?)
        } else {
            None
        };
        Ok((gs, gn))
    }

    fn gradient(
        &self,
        method: Method,
        ms: Option<&[f64]>,
        mn: Option<&[f64]>,
        cfg: &OptimizerConfig,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        match cfg.gradient {
            GradientMode::Analytic => self.analytic_gradient(method, ms, mn),
            GradientMode::FiniteDifference => self.fd_gradient(method, ms, mn, cfg.fd_step),
        }
    }
}

fn validate_mask_set(scene: &Scene, masks: &MaskSet) -> Result<()> {
    let grid = (scene.x_tf.n_bins(), scene.x_tf.n_frames());
    if masks.m_s.dim() != grid || masks.m_n.dim() != grid {
        return Err(Error::invalid_input(format!(
            "mask grids {:?}/{:?} do not match the scene grid {grid:?}",
            masks.m_s.dim(),
            masks.m_n.dim()
        )));
    }
    if masks
        .m_s
        .iter()
        .chain(masks.m_n.iter())
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(Error::constraint(
            "mask entries must be finite and nonnegative",
        ));
    }
    Ok(())
}

fn mask_rows(
    method: Method,
    masks: &MaskSet,
    f: usize,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ms = method
        .uses_target_mask()
        .then(|| masks.m_s.row(f).to_vec());
    let mn = method
        .uses_interference_mask()
        .then(|| masks.m_n.row(f).to_vec());
    (ms, mn)
}

/// Evaluates the per-bin objective of `method` under the given masks.
/// The ideal Wiener filter takes no masks; every other method requires
/// them.
pub fn objective(
    method: Method,
    scene: &Scene,
    masks: Option<&MaskSet>,
    cfg: &OptimizerConfig,
) -> Result<ObjectiveReport> {
    cfg.validate()?;
    let masks = resolve_masks(method, masks, scene)?;
    let n_bins = scene.x_tf.n_bins();
    let mut per_bin = Vec::with_capacity(n_bins);
    for f in 0..n_bins {
        let p = BinProblem::build(scene, f, cfg.loading)?;
        let (ms, mn) = masks
            .map(|m| mask_rows(method, m, f))
            .unwrap_or((None, None));
        let j = match p.objective(method, ms.as_deref(), mn.as_deref()) {
            Ok(j) => j,
            // A bin the filter cannot be built for scores as "no
            // enhancement": the zero filter's objective.
            Err(Error::NumericalError(_)) => p.es_sum / p.n_frames as f64,
            Err(other) => return Err(other),
        };
        per_bin.push(j);
    }
    let fullband = per_bin.iter().sum();
    Ok(ObjectiveReport { per_bin, fullband })
}

fn resolve_masks<'a>(
    method: Method,
    masks: Option<&'a MaskSet>,
    scene: &Scene,
) -> Result<Option<&'a MaskSet>> {
    if method == Method::IdealMwf {
        return Ok(None);
    }
    let m = masks.ok_or_else(|| {
        Error::invalid_input(format!("method {} requires masks", method.label()))
    })?;
    validate_mask_set(scene, m)?;
    Ok(Some(m))
}

/// Mask gradient of the fullband objective (the per-bin objectives are
/// independent, so this is just the per-bin gradients stacked).
pub fn gradient(
    method: Method,
    scene: &Scene,
    masks: &MaskSet,
    cfg: &OptimizerConfig,
) -> Result<MaskGradient> {
    cfg.validate()?;
    if method == Method::IdealMwf {
        return Err(Error::invalid_input(
            "the ideal Wiener filter has no masks to differentiate",
        ));
    }
    validate_mask_set(scene, masks)?;
    let (n_bins, n_frames) = masks.m_s.dim();
    let mut gs = method
        .uses_target_mask()
        .then(|| Array2::zeros((n_bins, n_frames)));
    let mut gn = method
        .uses_interference_mask()
        .then(|| Array2::zeros((n_bins, n_frames)));
    for f in 0..n_bins {
        let p = BinProblem::build(scene, f, cfg.loading)?;
        let (ms, mn) = mask_rows(method, masks, f);
        let (row_s, row_n) = match p.gradient(method, ms.as_deref(), mn.as_deref(), cfg) {
            Ok(g) => g,
            Err(Error::NumericalError(_)) => (None, None), // flat, contained
            Err(other) => return Err(other),
        };
        if let (Some(gs), Some(row)) = (gs.as_mut(), row_s) {
            for (t, v) in row.into_iter().enumerate() {
                gs[[f, t]] = v;
            }
        }
        if let (Some(gn), Some(row)) = (gn.as_mut(), row_n) {
            for (t, v) in row.into_iter().enumerate() {
                gn[[f, t]] = v;
            }
        }
    }
    Ok(MaskGradient { m_s: gs, m_n: gn })
}

/// Optimizes the masks of `method` on `scene` by per-bin projected gradient
/// descent starting from `init`.
///
/// Each bin runs independently: normalize the gradient to unit max-norm
/// (jointly over both mask sides when the method uses two), take a fixed
/// step downhill, project back onto the feasible set, and keep the best
/// post-projection objective seen so far. The recorded trace is therefore
/// non-increasing by construction.
pub fn optimize(
    method: Method,
    scene: &Scene,
    init: &MaskSet,
    cfg: &OptimizerConfig,
) -> Result<OptimizationTrace> {
    cfg.validate()?;
    if method == Method::IdealMwf {
        return Err(Error::invalid_input(
            "the ideal Wiener filter has no masks to optimize",
        ));
    }
    validate_mask_set(scene, init)?;

    let n_bins = scene.x_tf.n_bins();
    let use_ms = method.uses_target_mask();
    let use_mn = method.uses_interference_mask();

    let mut out_ms = init.m_s.clone();
    let mut out_mn = init.m_n.clone();
    let mut per_bin = Array2::zeros((n_bins, cfg.iterations + 1));
    let mut iterations_run = vec![0usize; n_bins];
    let mut warnings = Vec::new();

    for f in 0..n_bins {
        let p = BinProblem::build(scene, f, cfg.loading)?;

        // Deterministic per-bin jitter so distinct seeds explore distinct
        // starting points; relative, so zeros stay zero and signs stay put.
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (f as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut jittered_row = |row: &mut Vec<f64>| {
            if cfg.init_jitter > 0.0 {
                for v in row.iter_mut() {
                    *v *= 1.0 + cfg.init_jitter * rng.random_range(-1.0..1.0);
                }
            }
            project_constraints_row(row);
        };
        let mut cur_ms = use_ms.then(|| out_ms.row(f).to_vec());
        let mut cur_mn = use_mn.then(|| out_mn.row(f).to_vec());
        if let Some(row) = cur_ms.as_mut() {
            jittered_row(row);
        }
        if let Some(row) = cur_mn.as_mut() {
            jittered_row(row);
        }

        let zero_filter_objective = p.es_sum / p.n_frames as f64;
        let mut best_j = match p.objective(method, cur_ms.as_deref(), cur_mn.as_deref()) {
            Ok(j) => j,
            Err(Error::NumericalError(msg)) => {
                warnings.push(format!("bin {f}: {msg}; bin not optimized"));
                for it in 0..=cfg.iterations {
                    per_bin[[f, it]] = zero_filter_objective;
                }
                write_back(&mut out_ms, &mut out_mn, f, &cur_ms, &cur_mn);
                continue;
            }
            Err(other) => return Err(other),
        };
        per_bin[[f, 0]] = best_j;
        let mut best_ms = cur_ms.clone();
        let mut best_mn = cur_mn.clone();

        let mut last_it = 0;
        for it in 1..=cfg.iterations {
            let (g_s, g_n) =
                match p.gradient(method, cur_ms.as_deref(), cur_mn.as_deref(), cfg) {
                    Ok(g) => g,
                    Err(Error::NumericalError(msg)) => {
                        warnings.push(format!("bin {f}: {msg}; stopped at iteration {it}"));
                        break;
                    }
                    Err(other) => return Err(other),
                };
            // Joint max-norm across both sides keeps the two masks on one
            // step scale.
            let ginf = g_s
                .iter()
                .chain(g_n.iter())
                .flat_map(|g| g.iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if ginf == 0.0 || !ginf.is_finite() {
                break; // stationary (or flat) point
            }
            let scale = cfg.step_size / ginf;
            if let (Some(row), Some(g)) = (cur_ms.as_mut(), g_s.as_ref()) {
                for (v, gv) in row.iter_mut().zip(g) {
                    *v -= scale * gv;
                }
                project_constraints_row(row);
            }
            if let (Some(row), Some(g)) = (cur_mn.as_mut(), g_n.as_ref()) {
                for (v, gv) in row.iter_mut().zip(g) {
                    *v -= scale * gv;
                }
                project_constraints_row(row);
            }
            match p.objective(method, cur_ms.as_deref(), cur_mn.as_deref()) {
                Ok(j) => {
                    if j < best_j {
                        best_j = j;
                        best_ms.clone_from(&cur_ms);
                        best_mn.clone_from(&cur_mn);
                    }
                }
                Err(Error::NumericalError(msg)) => {
                    warnings.push(format!("bin {f}: {msg}; stopped at iteration {it}"));
                    break;
                }
                Err(other) => return Err(other),
            }
            per_bin[[f, it]] = best_j;
            last_it = it;
            if it >= cfg.early_stop_window {
                let anchor = per_bin[[f, it - cfg.early_stop_window]];
                if anchor - best_j <= cfg.early_stop_rel * anchor.abs().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
        }
        iterations_run[f] = last_it;
        for it in (last_it + 1)..=cfg.iterations {
            per_bin[[f, it]] = best_j;
        }
        write_back(&mut out_ms, &mut out_mn, f, &best_ms, &best_mn);
    }

    let fullband: Vec<f64> = (0..=cfg.iterations)
        .map(|it| (0..n_bins).map(|f| per_bin[[f, it]]).sum())
        .collect();
    Ok(OptimizationTrace {
        per_bin,
        fullband,
        masks: MaskSet {
            m_s: out_ms,
            m_n: out_mn,
        },
        iterations_run,
        warnings,
    })
}

/// [`optimize`] with the init stated as an oracle mask family instead of a
/// concrete mask set; the scene carries the ground truth to build it from.
pub fn optimize_from_kind(
    method: Method,
    scene: &Scene,
    kind: crate::masks::MaskKind,
    cfg: &OptimizerConfig,
) -> Result<OptimizationTrace> {
    let init = crate::masks::oracle_masks(kind, &scene.s_tf, &scene.n_tf, scene.ref_mic)?;
    optimize(method, scene, &init, cfg)
}

fn write_back(
    out_ms: &mut Array2<f64>,
    out_mn: &mut Array2<f64>,
    f: usize,
    ms: &Option<Vec<f64>>,
    mn: &Option<Vec<f64>>,
) {
    if let Some(row) = ms {
        for (t, v) in row.iter().enumerate() {
            out_ms[[f, t]] = *v;
        }
    }
    if let Some(row) = mn {
        for (t, v) in row.iter().enumerate() {
            out_mn[[f, t]] = *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::{apply_filter, build_filter, ideal_scale, BeamformerConfig};
    use crate::masks::{project_constraints, ratio_masks};
    use crate::metrics::mse_tf;
    use crate::scene::{synth_scene, SceneSpec};
    use crate::stft::StftConfig;
    use ndarray::s;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_scene(seed: u64) -> Scene {
        let mut spec =
            SceneSpec::synthetic("opt-test", 3, seed, StftConfig::new(64, 16).unwrap());
        spec.duration_s = 0.25;
        spec.sample_rate = 8000;
        spec.base_snr_db = 0.0;
        synth_scene(&spec).unwrap()
    }

    /// Random feasible masks, strictly interior so FD probes stay clean.
    fn random_masks(scene: &Scene, seed: u64) -> MaskSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = (scene.x_tf.n_bins(), scene.x_tf.n_frames());
        let mut gen = || {
            let mut m = Array2::from_shape_fn(dim, |_| rng.random_range(0.3..1.2));
            project_constraints(&mut m);
            m
        };
        MaskSet {
            m_s: gen(),
            m_n: gen(),
        }
    }

    #[test]
    fn objective_matches_explicit_pipeline() {
        // The closed-form objective must equal the literal pipeline:
        // filter → apply → ideal scaling → per-bin MSE.
        let scene = small_scene(5);
        let masks = random_masks(&scene, 6);
        let cfg = OptimizerConfig::default();
        let bf_cfg = BeamformerConfig {
            loading: cfg.loading,
            ref_mic: scene.ref_mic,
        };
        for method in [
            Method::IdealMwf,
            Method::MaskMwf,
            Method::MaxSnr,
            Method::MaxSor,
            Method::MinNor,
        ] {
            let report = objective(
                method,
                &scene,
                (method != Method::IdealMwf).then_some(&masks),
                &cfg,
            )
            .unwrap();
            let filt = build_filter(
                method,
                &scene.x_tf,
                Some(&scene.s_tf),
                Some(&masks),
                &bf_cfg,
            )
            .unwrap();
            let mut y = apply_filter(&filt, &scene.x_tf).unwrap();
            let s_ref = scene.s_tf.bins.slice(s![scene.ref_mic, .., ..]);
            ideal_scale(&mut y, s_ref).unwrap();
            let (per_bin, _) = mse_tf(s_ref, y.view()).unwrap();
            for (f, (a, b)) in report.per_bin.iter().zip(&per_bin).enumerate() {
                let tol = 1e-9 * b.abs().max(1e-12);
                assert!(
                    (a - b).abs() <= tol,
                    "{}: bin {f} objective {a:.6e} vs pipeline {b:.6e}",
                    method.label()
                );
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let scene = small_scene(9);
        let masks = random_masks(&scene, 10);
        let analytic_cfg = OptimizerConfig::default();
        let fd_cfg = OptimizerConfig {
            gradient: GradientMode::FiniteDifference,
            ..analytic_cfg
        };
        for method in Method::mask_driven() {
            let ga = gradient(method, &scene, &masks, &analytic_cfg).unwrap();
            let gf = gradient(method, &scene, &masks, &fd_cfg).unwrap();
            for (side, a, b) in [
                ("m_s", &ga.m_s, &gf.m_s),
                ("m_n", &ga.m_n, &gf.m_n),
            ] {
                let (Some(a), Some(b)) = (a, b) else {
                    assert_eq!(a.is_some(), b.is_some(), "{side} presence differs");
                    continue;
                };
                let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
                let worst = a
                    .iter()
                    .zip(b.iter())
                    .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
                assert!(
                    worst <= 1e-6 * scale,
                    "{}: {side} gradient mismatch {worst:.3e} vs scale {scale:.3e}",
                    method.label()
                );
            }
        }
    }

    #[test]
    fn ideal_wiener_is_a_per_bin_lower_bound() {
        let scene = small_scene(13);
        let masks = random_masks(&scene, 14);
        let cfg = OptimizerConfig::default();
        let ideal = objective(Method::IdealMwf, &scene, None, &cfg).unwrap();
        for method in Method::mask_driven() {
            let rep = objective(method, &scene, Some(&masks), &cfg).unwrap();
            for f in 0..rep.per_bin.len() {
                assert!(
                    rep.per_bin[f] >= ideal.per_bin[f] - 1e-9,
                    "{} bin {f}: {} < ideal {}",
                    method.label(),
                    rep.per_bin[f],
                    ideal.per_bin[f]
                );
            }
        }
    }

    #[test]
    fn optimize_descends_and_records_monotone_trace() {
        let scene = small_scene(17);
        let init = ratio_masks(&scene.s_tf, &scene.n_tf, scene.ref_mic, 1.0).unwrap();
        let cfg = OptimizerConfig {
            iterations: 40,
            ..Default::default()
        };
        for method in Method::mask_driven() {
            let trace = optimize(method, &scene, &init, &cfg).unwrap();
            assert!(
                trace.final_objective() <= trace.initial_objective(),
                "{} went uphill",
                method.label()
            );
            for f in 0..trace.per_bin.dim().0 {
                for it in 1..trace.per_bin.dim().1 {
                    assert!(
                        trace.per_bin[[f, it]] <= trace.per_bin[[f, it - 1]],
                        "best-so-far increased at bin {f}, iteration {it}"
                    );
                }
            }
            // Re-evaluating the final masks reproduces the recorded best.
            let recheck =
                objective(method, &scene, Some(&trace.masks), &cfg).unwrap();
            let diff = (recheck.fullband - trace.final_objective()).abs();
            assert!(
                diff <= 1e-9 * trace.final_objective().max(1e-12),
                "{}: trace {} vs recheck {}",
                method.label(),
                trace.final_objective(),
                recheck.fullband
            );
        }
    }

    #[test]
    fn optimize_is_seed_deterministic() {
        let scene = small_scene(23);
        let init = ratio_masks(&scene.s_tf, &scene.n_tf, scene.ref_mic, 1.0).unwrap();
        let cfg = OptimizerConfig {
            iterations: 10,
            seed: 77,
            ..Default::default()
        };
        let a = optimize(Method::MaxSor, &scene, &init, &cfg).unwrap();
        let b = optimize(Method::MaxSor, &scene, &init, &cfg).unwrap();
        assert_eq!(a.masks.m_s, b.masks.m_s);
        assert_eq!(a.fullband, b.fullband);
        let c = optimize(
            Method::MaxSor,
            &scene,
            &init,
            &OptimizerConfig { seed: 78, ..cfg },
        )
        .unwrap();
        assert_ne!(a.masks.m_s, c.masks.m_s, "seed should steer the jitter");
    }

    /// Every method's objective is invariant to rescaling either mask role
    /// (the filter is scale-equivariant, the objective scale-free), so the
    /// gradient must be orthogonal to the mask itself.
    #[test]
    fn gradient_is_orthogonal_to_the_mask_direction() {
        let scene = small_scene(31);
        let masks = random_masks(&scene, 32);
        let cfg = OptimizerConfig::default();
        for method in Method::mask_driven() {
            let g = gradient(method, &scene, &masks, &cfg).unwrap();
            for (grad, mask) in [(&g.m_s, &masks.m_s), (&g.m_n, &masks.m_n)] {
                let Some(grad) = grad else { continue };
                for f in 0..grad.dim().0 {
                    let dot: f64 = grad
                        .row(f)
                        .iter()
                        .zip(mask.row(f))
                        .map(|(a, b)| a * b)
                        .sum();
                    let gn = grad.row(f).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mn = mask.row(f).iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!(
                        dot.abs() <= 1e-8 * (gn * mn).max(1e-300),
                        "{} bin {f}: directional derivative along the mask is {dot:.3e}",
                        method.label()
                    );
                }
            }
        }
    }

    /// Micro-instance scene (2 mics, 4 bins, 16 frames) assembled directly
    /// from random component signals.
    fn micro_scene(seed: u64) -> Scene {
        use crate::stft::TimeSignal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut white = |gain: f64| {
            let chans: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..24).map(|_| gain * rng.random_range(-1.0..1.0)).collect())
                .collect();
            TimeSignal::new(chans, 8000).unwrap()
        };
        let s = white(1.0);
        let n = white(0.7);
        Scene::from_components("micro", s, n, 0, 1.0, &StftConfig::new(6, 2).unwrap()).unwrap()
    }

    #[test]
    fn fd_and_analytic_optimize_land_on_the_same_objective() {
        let scene = micro_scene(41);
        let init = ratio_masks(&scene.s_tf, &scene.n_tf, scene.ref_mic, 1.0).unwrap();
        let base = OptimizerConfig {
            iterations: 30,
            seed: 3,
            ..Default::default()
        };
        for method in [Method::MaskMwf, Method::MaxSor, Method::MaxSnr] {
            let ja = optimize(method, &scene, &init, &base).unwrap().final_objective();
            let jf = optimize(
                method,
                &scene,
                &init,
                &OptimizerConfig {
                    gradient: GradientMode::FiniteDifference,
                    ..base
                },
            )
            .unwrap()
            .final_objective();
            assert!(
                (ja - jf).abs() <= 0.01 * ja.abs().max(jf.abs()).max(1e-300),
                "{}: analytic landed at {ja:.6e}, finite differences at {jf:.6e}",
                method.label()
            );
        }
    }

    #[test]
    fn silent_target_gives_zero_objective_and_finite_gradient() {
        use crate::stft::TimeSignal;
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let zeros = TimeSignal::new(vec![vec![0.0; 24]; 2], 8000).unwrap();
        let noise_chans: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..24).map(|_| rng.random_range(-1.0f64..1.0)).collect())
            .collect();
        let noise = TimeSignal::new(noise_chans, 8000).unwrap();
        let scene =
            Scene::from_components("silent", zeros, noise, 0, 1.0, &StftConfig::new(6, 2).unwrap())
                .unwrap();
        let masks = random_masks(&scene, 52);
        let cfg = OptimizerConfig::default();
        for method in Method::mask_driven() {
            let rep = objective(method, &scene, Some(&masks), &cfg).unwrap();
            assert!(rep.fullband.abs() < 1e-25, "residual of nothing is nothing");
            let g = gradient(method, &scene, &masks, &cfg).unwrap();
            for side in [g.m_s.as_ref(), g.m_n.as_ref()].into_iter().flatten() {
                assert!(side.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn optimize_rejects_bad_requests() {
        let scene = small_scene(29);
        let init = ratio_masks(&scene.s_tf, &scene.n_tf, scene.ref_mic, 1.0).unwrap();
        let cfg = OptimizerConfig::default();
        assert!(matches!(
            optimize(Method::IdealMwf, &scene, &init, &cfg),
            Err(Error::InvalidInput(_))
        ));
        let mut bad = init.clone();
        bad.m_s[[0, 0]] = -0.5;
        assert!(matches!(
            optimize(Method::MaxSor, &scene, &bad, &cfg),
            Err(Error::ConstraintViolation(_))
        ));
        let short = MaskSet {
            m_s: Array2::zeros((1, 1)),
            m_n: Array2::zeros((1, 1)),
        };
        assert!(matches!(
            optimize(Method::MaxSor, &scene, &short, &cfg),
            Err(Error::InvalidInput(_))
        ));
    }
}
