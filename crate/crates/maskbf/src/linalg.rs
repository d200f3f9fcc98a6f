//! Dense complex Hermitian linear algebra sized for microphone arrays.
//!
//! Everything here operates on matrices whose dimension is the channel
//! count (typically 2–8), so the implementations favour clarity and
//! reproducibility over asymptotic cleverness: plain `Vec<Complex64>`
//! row-major storage, unblocked Cholesky, and a cyclic complex Jacobi
//! eigensolver. All routines are deterministic — identical inputs produce
//! bit-identical outputs regardless of how many times they run.
//!
//! The generalized eigenproblem `A w = λ B' w` is reduced to a standard
//! Hermitian problem via Cholesky of the diagonally loaded right-hand
//! matrix `B' = B + ε·(tr B / N)·I`:
//!
//! ```text
//! B' = L Lᴴ,   C = L⁻¹ A L⁻ᴴ,   C v = λ v,   w = L⁻ᴴ v
//! ```
//!
//! Returned eigenvectors are `B'`-orthonormal, which downstream gradient
//! code relies on; the single-vector entry points additionally rescale to
//! unit 2-norm and canonical phase.

use ndarray::ArrayView2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Absolute tolerance when validating that caller-supplied entries form a
/// Hermitian matrix.
pub const HERMITIAN_SYMMETRY_TOL: f64 = 1e-12;

/// A Cholesky pivot below `-PSD_NEG_TOL · (tr A / N)` means the matrix is
/// indefinite beyond what accumulated rounding in a covariance estimate can
/// explain, and the factorization fails rather than papering over it.
pub const PSD_NEG_TOL: f64 = 1e-10;

/// Pivots within `PD_PIVOT_TOL · (tr A / N)` of zero are treated as exactly
/// zero in semidefinite mode (the corresponding column is skipped) and as a
/// hard error in positive-definite mode.
pub const PD_PIVOT_TOL: f64 = 1e-13;

/// Jacobi sweeps stop once the off-diagonal Frobenius mass drops below this
/// fraction of the total Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-14;

/// Upper bound on Jacobi sweeps; for the matrix sizes used here convergence
/// takes well under ten sweeps, so hitting this indicates a genuine problem.
pub const JACOBI_MAX_SWEEPS: usize = 64;

#[inline]
fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Dense Hermitian matrix in row-major order.
///
/// Construction enforces Hermitian symmetry, and every operation that
/// returns a `HermitianMatrix` re-establishes it exactly, so `a[(i, j)] ==
/// conj(a[(j, i)])` holds bitwise at all times.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl HermitianMatrix {
    /// The `dim × dim` zero matrix.
    pub fn zeros(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid_input("matrix dimension must be at least 1"));
        }
        Ok(Self {
            dim,
            data: vec![Complex64::ZERO; dim * dim],
        })
    }

    /// Builds a matrix from full rows, verifying Hermitian symmetry within
    /// [`HERMITIAN_SYMMETRY_TOL`] and then symmetrizing exactly via
    /// `(a + aᴴ) / 2` so later algebra can rely on bitwise symmetry.
    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::invalid_input("matrix dimension must be at least 1"));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid_input(format!(
                "expected square {dim}×{dim} matrix"
            )));
        }
        let mut m = Self::zeros(dim)?;
        for i in 0..dim {
            for j in i..dim {
                let upper = rows[i][j];
                let lower = rows[j][i];
                let dev = (upper - lower.conj()).norm();
                if dev > HERMITIAN_SYMMETRY_TOL {
                    return Err(Error::invalid_input(format!(
                        "matrix is not Hermitian: |a[{i}][{j}] - conj(a[{j}][{i}])| = {dev:.3e}"
                    )));
                }
                let avg = (upper + lower.conj()) * 0.5;
                m.set_pair(i, j, avg);
            }
        }
        Ok(m)
    }

    /// Writes entry `(i, j)` and its conjugate mirror; diagonal imaginary
    /// parts are forced to zero.
    fn set_pair(&mut self, i: usize, j: usize, value: Complex64) {
        if i == j {
            self.data[i * self.dim + i] = c64(value.re, 0.0);
        } else {
            self.data[i * self.dim + j] = value;
            self.data[j * self.dim + i] = value.conj();
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    /// Trace; exactly real because diagonal imaginary parts are zero.
    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i).re).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `A + ε·(tr A / N)·I` — diagonal loading relative to the mean
    /// eigenvalue, so the regularization strength follows the matrix scale.
    pub fn loaded(&self, eps: f64) -> Self {
        let shift = eps * self.trace() / self.dim as f64;
        let mut out = self.clone();
        for i in 0..self.dim {
            let d = out.data[i * self.dim + i];
            out.data[i * self.dim + i] = c64(d.re + shift, 0.0);
        }
        out
    }

    /// Matrix-vector product `A v`.
    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.dim, "matvec dimension mismatch");
        (0..self.dim)
            .map(|i| {
                (0..self.dim)
                    .map(|j| self.get(i, j) * v[j])
                    .sum::<Complex64>()
            })
            .collect()
    }

    /// Quadratic form `vᴴ A v`; exactly real for Hermitian `A`, so only the
    /// real part is returned.
    pub fn quad(&self, v: &[Complex64]) -> f64 {
        assert_eq!(v.len(), self.dim, "quadratic form dimension mismatch");
        let mut acc = 0.0;
        for i in 0..self.dim {
            // Diagonal term plus twice the real part of the upper triangle.
            acc += self.get(i, i).re * v[i].norm_sqr();
            for j in (i + 1)..self.dim {
                acc += 2.0 * (v[i].conj() * self.get(i, j) * v[j]).re;
            }
        }
        acc
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for z in &mut out.data {
            *z *= c;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::invalid_input("matrix dimension mismatch in add"));
        }
        let mut out = self.clone();
        for (z, w) in out.data.iter_mut().zip(&other.data) {
            *z += w;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::invalid_input("matrix dimension mismatch in sub"));
        }
        let mut out = self.clone();
        for (z, w) in out.data.iter_mut().zip(&other.data) {
            *z -= w;
        }
        Ok(out)
    }
}

/// Weighted covariance of one frequency bin: with `x` holding channel rows
/// over frames, returns `(1/T) Σ_t w_t · x_t x_tᴴ` (plain mean when
/// `weights` is `None`).
///
/// The result is exactly Hermitian by construction: only the upper triangle
/// is accumulated and mirrored, and diagonal entries are computed as real
/// sums of squared magnitudes.
pub fn weighted_covariance(
    x: ArrayView2<Complex64>,
    weights: Option<&[f64]>,
) -> Result<HermitianMatrix> {
    if let Some(w) = weights {
        if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::constraint(format!(
                "covariance weights must be finite and nonnegative, got {bad}"
            )));
        }
    }
    weighted_covariance_signed(x, weights)
}

/// Like [`weighted_covariance`] but admits negative weights. Only used
/// internally, where finite-difference probes may step a mask entry just
/// below zero; the result is Hermitian but not necessarily semidefinite.
pub(crate) fn weighted_covariance_signed(
    x: ArrayView2<Complex64>,
    weights: Option<&[f64]>,
) -> Result<HermitianMatrix> {
    let (n_ch, n_frames) = x.dim();
    if n_ch == 0 || n_frames == 0 {
        return Err(Error::invalid_input(
            "covariance requires at least one channel and one frame",
        ));
    }
    if let Some(w) = weights {
        if w.len() != n_frames {
            return Err(Error::invalid_input(format!(
                "weight length {} does not match frame count {}",
                w.len(),
                n_frames
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::constraint("covariance weights must be finite"));
        }
    }
    let mut m = HermitianMatrix::zeros(n_ch)?;
    let inv_t = 1.0 / n_frames as f64;
    for i in 0..n_ch {
        let xi = x.row(i);
        // Diagonal: real nonnegative sum of |x|².
        let mut diag = 0.0;
        for t in 0..n_frames {
            let w = weights.map_or(1.0, |w| w[t]);
            diag += w * xi[t].norm_sqr();
        }
        m.set_pair(i, i, c64(diag * inv_t, 0.0));
        for j in (i + 1)..n_ch {
            let xj = x.row(j);
            let mut acc = Complex64::ZERO;
            for t in 0..n_frames {
                let w = weights.map_or(1.0, |w| w[t]);
                acc += w * xi[t] * xj[t].conj();
            }
            m.set_pair(i, j, acc * inv_t);
        }
    }
    Ok(m)
}

/// The three covariances a masked beamformer works from: the raw mixture
/// covariance and the mask-weighted target/interference estimates.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    pub phi_x: HermitianMatrix,
    pub phi_s: HermitianMatrix,
    pub phi_n: HermitianMatrix,
}

impl CovarianceSet {
    /// Builds all three covariances of one bin from the mixture snapshot
    /// matrix and per-frame mask rows.
    pub fn from_bin(x: ArrayView2<Complex64>, mask_s: &[f64], mask_n: &[f64]) -> Result<Self> {
        Ok(Self {
            phi_x: weighted_covariance(x, None)?,
            phi_s: weighted_covariance(x, Some(mask_s))?,
            phi_n: weighted_covariance(x, Some(mask_n))?,
        })
    }
}

/// Whether a Cholesky factorization must succeed on strictly positive
/// definite input or may skip exactly-singular directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivotMode {
    /// Any non-positive pivot is an error. Used where a genuine inverse is
    /// required (the eigensolver's right-hand matrix).
    RequirePositiveDefinite,
    /// Pivots that are zero within tolerance zero out their column, giving
    /// the pseudoinverse-like solve used for covariance systems whose
    /// right-hand sides lie in the matrix range.
    AllowSemidefinite,
}

/// Lower-triangular Cholesky factor `A = L Lᴴ` with bookkeeping for columns
/// skipped in semidefinite mode.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    l: Vec<Complex64>,
    zero_pivot: Vec<bool>,
}

impl CholeskyFactor {
    /// Factorizes a Hermitian matrix. Pivot tolerances are relative to the
    /// mean diagonal (`tr A / N` clamped below by the largest diagonal
    /// entry's magnitude) so behaviour is invariant to overall scale.
    pub fn decompose(a: &HermitianMatrix, mode: PivotMode) -> Result<Self> {
        let n = a.dim();
        let scale = {
            let mean = a.trace() / n as f64;
            let max_diag = (0..n).map(|i| a.get(i, i).re.abs()).fold(0.0, f64::max);
            mean.abs().max(max_diag)
        };
        let mut l = vec![Complex64::ZERO; n * n];
        let mut zero_pivot = vec![false; n];
        for j in 0..n {
            let mut d = a.get(j, j).re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if d < -PSD_NEG_TOL * scale {
                return Err(Error::numerical(format!(
                    "matrix is indefinite: pivot {d:.3e} at column {j} (scale {scale:.3e})"
                )));
            }
            if d <= PD_PIVOT_TOL * scale {
                if mode == PivotMode::RequirePositiveDefinite {
                    return Err(Error::numerical(format!(
                        "matrix is not positive definite: pivot {d:.3e} at column {j}"
                    )));
                }
                zero_pivot[j] = true;
                continue; // column stays zero
            }
            let ljj = d.sqrt();
            l[j * n + j] = c64(ljj, 0.0);
            for i in (j + 1)..n {
                let mut acc = a.get(i, j);
                for k in 0..j {
                    acc -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = acc / ljj;
            }
        }
        Ok(Self {
            dim: n,
            l,
            zero_pivot,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `L y = b` by forward substitution; skipped columns contribute
    /// zero.
    pub(crate) fn forward(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        let mut y = vec![Complex64::ZERO; n];
        for i in 0..n {
            if self.zero_pivot[i] {
                continue;
            }
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l[i * n + k] * y[k];
            }
            y[i] = acc / self.l[i * n + i];
        }
        y
    }

    /// Solves `Lᴴ x = y` by back substitution; skipped columns contribute
    /// zero.
    pub(crate) fn back_h(&self, y: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        let mut x = vec![Complex64::ZERO; n];
        for i in (0..n).rev() {
            if self.zero_pivot[i] {
                continue;
            }
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= self.l[k * n + i].conj() * x[k];
            }
            x[i] = acc / self.l[i * n + i];
        }
        x
    }

    /// Solves `A x = b` using the stored factorization.
    pub fn solve(&self, b: &[Complex64]) -> Result<Vec<Complex64>> {
        if b.len() != self.dim {
            return Err(Error::invalid_input(format!(
                "right-hand side length {} does not match dimension {}",
                b.len(),
                self.dim
            )));
        }
        let y = self.forward(b);
        Ok(self.back_h(&y))
    }
}

/// Solves `(A + ε·(tr A / N)·I) x = b` for a Hermitian positive
/// semidefinite `A`.
///
/// A zero matrix (all pivots skipped) yields the zero solution; an
/// indefinite `A` is a [`Error::NumericalError`].
pub fn solve_loaded(a: &HermitianMatrix, b: &[Complex64], eps: f64) -> Result<Vec<Complex64>> {
    let chol = CholeskyFactor::decompose(&a.loaded(eps), PivotMode::AllowSemidefinite)?;
    chol.solve(b)
}

/// Refinement steps are cheap (one matvec and one triangular solve each,
/// a few hundred flops at these dimensions). The error contracts by
/// ε·κ/(1 + ε·κ) per step, which approaches 1 for extreme condition
/// numbers, so the bound is sized for κ up to ~1e8 at the default ε; the
/// loop exits at the first step that fails to shrink the residual.
const MAX_REFINEMENT_STEPS: usize = 2000;

/// Solves `A x = b` for the *unloaded* matrix: a loaded Cholesky solve
/// followed by iterative refinement against `A` itself, keeping the iterate
/// with the smallest residual.
///
/// [`solve_loaded`] returns the minimizer of the *shifted* system, which on
/// ill-conditioned covariances sits measurably off the true solution even
/// for tiny ε. Refinement contracts that error by roughly ε·κ(A) per step
/// whenever `A` is numerically invertible, and stalls harmlessly at the
/// best reachable residual when it is not.
pub fn solve_refined(a: &HermitianMatrix, b: &[Complex64], eps: f64) -> Result<Vec<Complex64>> {
    let chol = CholeskyFactor::decompose(&a.loaded(eps), PivotMode::AllowSemidefinite)?;
    let residual = |x: &[Complex64]| -> Vec<Complex64> {
        a.matvec(x)
            .iter()
            .zip(b)
            .map(|(ax, bi)| bi - ax)
            .collect()
    };
    let norm = |v: &[Complex64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();

    let mut x = chol.solve(b)?;
    let mut r = residual(&x);
    let mut best_norm = norm(&r);
    let mut best = x.clone();
    for _ in 0..MAX_REFINEMENT_STEPS {
        if best_norm == 0.0 {
            break;
        }
        let d = chol.solve(&r)?;
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += di;
        }
        r = residual(&x);
        let n = norm(&r);
        if n < best_norm {
            best_norm = n;
            best = x.clone();
        } else {
            break;
        }
    }
    Ok(best)
}

/// One generalized eigenpair, with the filter rescaled to unit 2-norm and
/// canonical phase.
#[derive(Debug, Clone)]
pub struct GevResult {
    pub eigenvalue: f64,
    pub filter: Vec<Complex64>,
}

/// Complete eigenbasis of the pencil `(A, B')`, ascending by eigenvalue.
///
/// Vectors are `B'`-orthonormal (`w_iᴴ B' w_j = δ_ij`) and deliberately
/// *not* phase-canonicalized: perturbation formulas built on this basis are
/// phase-invariant, and keeping the raw back-transformed vectors avoids a
/// spurious extra rotation.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub eigenvalues: Vec<f64>,
    pub vectors: Vec<Vec<Complex64>>,
}

/// Rescales to unit 2-norm, then rotates the phase so the
/// largest-magnitude component (lowest index on ties) is real nonnegative.
/// Zero vectors pass through unchanged.
pub fn canonicalize_filter(v: &mut [Complex64]) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let mut idx = 0;
    let mut best = 0.0;
    for (i, z) in v.iter().enumerate() {
        let m = z.norm();
        if m > best {
            best = m;
            idx = i;
        }
    }
    let phase = v[idx] / v[idx].norm();
    let rot = phase.conj() / norm;
    for z in v.iter_mut() {
        *z *= rot;
    }
}

/// Solves the full generalized Hermitian eigenproblem `A w = λ B' w` with
/// `B' = B + ε·(tr B / N)·I`.
///
/// `B'` must be positive definite after loading; `A` is used exactly as
/// passed. Eigenvalues come back ascending with `B'`-orthonormal vectors.
pub fn gev_full(a: &HermitianMatrix, b: &HermitianMatrix, eps: f64) -> Result<EigenBasis> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::invalid_input(
            "eigenproblem matrices must share dimensions",
        ));
    }
    let chol = CholeskyFactor::decompose(&b.loaded(eps), PivotMode::RequirePositiveDefinite)
        .map_err(|e| {
            Error::numerical(format!(
                "right-hand matrix not positive definite after loading: {e}"
            ))
        })?;

    // M = L⁻¹ A, column by column.
    let mut m = vec![Complex64::ZERO; n * n];
    let mut col = vec![Complex64::ZERO; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = a.get(i, j);
        }
        let y = chol.forward(&col);
        for i in 0..n {
            m[i * n + j] = y[i];
        }
    }
    // C = M L⁻ᴴ computed as Cᴴ = L⁻¹ Mᴴ.
    let mut c = vec![Complex64::ZERO; n * n];
    for j in 0..n {
        for i in 0..n {
            col[i] = m[j * n + i].conj(); // column j of Mᴴ
        }
        let y = chol.forward(&col);
        for i in 0..n {
            c[j * n + i] = y[i].conj(); // row j of C
        }
    }
    // Kill rounding drift so the Jacobi input is exactly Hermitian.
    for i in 0..n {
        c[i * n + i] = c64(c[i * n + i].re, 0.0);
        for j in (i + 1)..n {
            let avg = (c[i * n + j] + c[j * n + i].conj()) * 0.5;
            c[i * n + j] = avg;
            c[j * n + i] = avg.conj();
        }
    }

    let (vals, vecs) = jacobi_hermitian(&mut c, n)?;

    // Back-transform: w = L⁻ᴴ v keeps B'-orthonormality automatically.
    let mut pairs: Vec<(f64, Vec<Complex64>)> = (0..n)
        .map(|k| {
            for i in 0..n {
                col[i] = vecs[i * n + k];
            }
            (vals[k], chol.back_h(&col))
        })
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));

    Ok(EigenBasis {
        eigenvalues: pairs.iter().map(|p| p.0).collect(),
        vectors: pairs.into_iter().map(|p| p.1).collect(),
    })
}

/// Largest eigenpair of `A w = λ B' w`, canonicalized.
pub fn gev_max(a: &HermitianMatrix, b: &HermitianMatrix, eps: f64) -> Result<GevResult> {
    let basis = gev_full(a, b, eps)?;
    let last = basis.eigenvalues.len() - 1;
    let mut filter = basis.vectors[last].clone();
    canonicalize_filter(&mut filter);
    Ok(GevResult {
        eigenvalue: basis.eigenvalues[last],
        filter,
    })
}

/// Smallest eigenpair of `A w = λ B' w`, canonicalized.
pub fn gev_min(a: &HermitianMatrix, b: &HermitianMatrix, eps: f64) -> Result<GevResult> {
    let basis = gev_full(a, b, eps)?;
    let mut filter = basis.vectors[0].clone();
    canonicalize_filter(&mut filter);
    Ok(GevResult {
        eigenvalue: basis.eigenvalues[0],
        filter,
    })
}

/// Cyclic complex Jacobi diagonalization of a Hermitian matrix stored flat
/// row-major. Returns eigenvalues (unsorted) and the accumulated unitary `V`
/// (columns are eigenvectors), with `a` overwritten.
///
/// Rotation pairs are visited in a fixed row-major order every sweep, so the
/// result is deterministic. Each 2×2 rotation uses the classic
/// smaller-root choice `t² - 2τt - 1 = 0`, `τ = (a_qq - a_pp) / (2|a_pq|)`,
/// which keeps rotation angles at most 45° and guarantees convergence.
fn jacobi_hermitian(a: &mut [Complex64], n: usize) -> Result<(Vec<f64>, Vec<Complex64>)> {
    let mut v = vec![Complex64::ZERO; n * n];
    for i in 0..n {
        v[i * n + i] = c64(1.0, 0.0);
    }
    if n == 1 {
        return Ok((vec![a[0].re], v));
    }

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let total_sq: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        let off_sq: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].norm_sqr())
            .sum();
        if off_sq <= JACOBI_REL_TOL * JACOBI_REL_TOL * total_sq || total_sq == 0.0 {
            let vals = (0..n).map(|i| a[i * n + i].re).collect();
            return Ok((vals, v));
        }

        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                let mag = apq.norm();
                if mag <= 1e-300 {
                    a[p * n + q] = Complex64::ZERO;
                    a[q * n + p] = Complex64::ZERO;
                    continue;
                }
                let app = a[p * n + p].re;
                let aqq = a[q * n + q].re;
                let phase = apq / mag; // e^{iφ}
                let tau = (aqq - app) / (2.0 * mag);
                // Smaller-magnitude root of t² - 2τt - 1 = 0.
                let t = if tau >= 0.0 {
                    -1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let cth = 1.0 / (1.0 + t * t).sqrt();
                let sth = t * cth;
                // Rotation U: U_pp = U_qq = cth, U_pq = -sth·e^{iφ},
                // U_qp = sth·e^{-iφ}; zeroes the (p, q) entry of UᴴAU.
                let s_fwd = sth * phase; // sth·e^{iφ}
                let s_bwd = sth * phase.conj(); // sth·e^{-iφ}

                // Columns p and q of A·U.
                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = cth * arp + s_bwd * arq;
                    a[r * n + q] = cth * arq - s_fwd * arp;
                }
                // Rows p and q of Uᴴ·(A U).
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = cth * apr + s_fwd * aqr;
                    a[q * n + r] = cth * aqr - s_bwd * apr;
                }
                // Restore exact symmetry at the rotated entries.
                a[p * n + q] = Complex64::ZERO;
                a[q * n + p] = Complex64::ZERO;
                a[p * n + p] = c64(a[p * n + p].re, 0.0);
                a[q * n + q] = c64(a[q * n + q].re, 0.0);

                // Accumulate V ← V·U.
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = cth * vrp + s_bwd * vrq;
                    v[r * n + q] = cth * vrq - s_fwd * vrp;
                }
            }
        }
    }
    Err(Error::numerical(format!(
        "Jacobi eigensolver did not converge within {JACOBI_MAX_SWEEPS} sweeps"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    /// Random Hermitian matrix with entries O(1).
    fn rand_hermitian(rng: &mut ChaCha8Rng, n: usize) -> HermitianMatrix {
        let mut rows = vec![vec![Complex64::ZERO; n]; n];
        for i in 0..n {
            rows[i][i] = c64(rng.random_range(-1.0..1.0), 0.0);
            for j in (i + 1)..n {
                let z = rand_c(rng);
                rows[i][j] = z;
                rows[j][i] = z.conj();
            }
        }
        HermitianMatrix::from_rows(&rows).unwrap()
    }

    /// Random PSD matrix G·Gᴴ/k from k outer products.
    fn rand_psd(rng: &mut ChaCha8Rng, n: usize, k: usize) -> HermitianMatrix {
        let mut x = Array2::zeros((n, k));
        for i in 0..n {
            for t in 0..k {
                x[[i, t]] = rand_c(rng);
            }
        }
        weighted_covariance(x.view(), None).unwrap()
    }

    fn residual_norm(
        a: &HermitianMatrix,
        b_loaded: &HermitianMatrix,
        lambda: f64,
        w: &[Complex64],
    ) -> f64 {
        let aw = a.matvec(w);
        let bw = b_loaded.matvec(w);
        aw.iter()
            .zip(&bw)
            .map(|(x, y)| (x - y * lambda).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn from_rows_rejects_asymmetry() {
        let rows = vec![
            vec![c64(1.0, 0.0), c64(0.5, 0.5)],
            vec![c64(0.5, 0.5), c64(2.0, 0.0)], // should be conj
        ];
        assert!(matches!(
            HermitianMatrix::from_rows(&rows),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn from_rows_symmetrizes_tiny_drift() {
        let d = 1e-14;
        let rows = vec![
            vec![c64(1.0, 0.0), c64(0.5, 0.5 + d)],
            vec![c64(0.5, -0.5), c64(2.0, 0.0)],
        ];
        let m = HermitianMatrix::from_rows(&rows).unwrap();
        assert_eq!(m.get(0, 1), m.get(1, 0).conj());
    }

    #[test]
    fn weighted_covariance_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, t) = (4, 17);
        let mut x = Array2::zeros((n, t));
        for i in 0..n {
            for u in 0..t {
                x[[i, u]] = rand_c(&mut rng);
            }
        }
        let w: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..2.0)).collect();
        let cov = weighted_covariance(x.view(), Some(&w)).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex64::ZERO;
                for u in 0..t {
                    acc += w[u] * x[[i, u]] * x[[j, u]].conj();
                }
                acc /= t as f64;
                assert_abs_diff_eq!(cov.get(i, j).re, acc.re, epsilon = 1e-13);
                assert_abs_diff_eq!(cov.get(i, j).im, acc.im, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn weighted_covariance_rejects_negative_weights() {
        let x = Array2::from_elem((2, 3), c64(1.0, 0.0));
        let err = weighted_covariance(x.view(), Some(&[1.0, -0.1, 1.0])).unwrap_err();
        assert!(matches!(err, Error::ConstraintViolation(_)));
    }

    #[test]
    fn covariance_set_is_additive_for_complementary_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Array2::zeros((3, 29));
        for v in x.iter_mut() {
            *v = rand_c(&mut rng);
        }
        let ms: Vec<f64> = (0..29).map(|_| rng.random_range(0.0..1.0)).collect();
        let mn: Vec<f64> = ms.iter().map(|m| 1.0 - m).collect();
        let set = CovarianceSet::from_bin(x.view(), &ms, &mn).unwrap();
        let sum = set.phi_s.add(&set.phi_n).unwrap();
        let diff = sum.sub(&set.phi_x).unwrap();
        assert!(diff.frobenius_norm() <= 1e-12 * set.phi_x.frobenius_norm());
    }

    #[test]
    fn cholesky_reconstructs_and_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 1..=6 {
            let a = rand_psd(&mut rng, n, n + 4).loaded(1e-9);
            let chol = CholeskyFactor::decompose(&a, PivotMode::RequirePositiveDefinite).unwrap();
            let b: Vec<Complex64> = (0..n).map(|_| rand_c(&mut rng)).collect();
            let x = chol.solve(&b).unwrap();
            let ax = a.matvec(&x);
            let res: f64 = ax
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - q).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(res < 1e-9, "solve residual {res:.3e} at n={n}");
        }
    }

    #[test]
    fn cholesky_semidefinite_solves_in_range() {
        // Rank-1 PSD matrix: b = A·y lies in the range, and the solve must
        // reproduce it even though the matrix is singular.
        let g = [c64(1.0, 0.5), c64(-0.5, 0.25), c64(0.0, 1.0)];
        let rows: Vec<Vec<Complex64>> = (0..3)
            .map(|i| (0..3).map(|j| g[i] * g[j].conj()).collect())
            .collect();
        let a = HermitianMatrix::from_rows(&rows).unwrap();
        let y = [c64(0.3, -0.2), c64(1.0, 0.0), c64(-0.7, 0.9)];
        let b = a.matvec(&y);
        let chol = CholeskyFactor::decompose(&a, PivotMode::AllowSemidefinite).unwrap();
        let x = chol.solve(&b).unwrap();
        let ax = a.matvec(&x);
        let res: f64 = ax
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(res < 1e-10, "semidefinite solve residual {res:.3e}");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let rows = vec![
            vec![c64(1.0, 0.0), c64(0.0, 0.0)],
            vec![c64(0.0, 0.0), c64(-1.0, 0.0)],
        ];
        let a = HermitianMatrix::from_rows(&rows).unwrap();
        for mode in [
            PivotMode::RequirePositiveDefinite,
            PivotMode::AllowSemidefinite,
        ] {
            assert!(matches!(
                CholeskyFactor::decompose(&a, mode),
                Err(Error::NumericalError(_))
            ));
        }
    }

    #[test]
    fn solve_loaded_zero_matrix_gives_zero_solution() {
        let a = HermitianMatrix::zeros(3).unwrap();
        let b = [c64(1.0, 0.0), c64(0.0, 2.0), c64(-1.0, 0.0)];
        let x = solve_loaded(&a, &b, 1e-6).unwrap();
        assert!(x.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn refinement_removes_the_loading_bias_on_ill_conditioned_systems() {
        // Condition number 1e7: the relative loading shifts the small
        // eigenvalue by a factor ~11, so the plain loaded solve misses the
        // true solution badly while refinement walks back to it.
        let a = {
            let mut rows = vec![vec![Complex64::ZERO; 2]; 2];
            rows[0][0] = c64(1.0, 0.0);
            rows[1][1] = c64(1e-7, 0.0);
            HermitianMatrix::from_rows(&rows).unwrap()
        };
        let truth = [c64(2.0, -1.0), c64(3.0, 4.0)];
        let b = a.matvec(&truth);
        let err = |x: &[Complex64]| {
            x.iter()
                .zip(&truth)
                .map(|(p, q)| (p - q).norm_sqr())
                .sum::<f64>()
                .sqrt()
                / truth.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
        };
        let loaded = solve_loaded(&a, &b, 1e-6).unwrap();
        let refined = solve_refined(&a, &b, 1e-6).unwrap();
        assert!(err(&loaded) > 1e-2, "loaded error {:.3e}", err(&loaded));
        assert!(err(&refined) < 1e-10, "refined error {:.3e}", err(&refined));
    }

    #[test]
    fn refinement_is_harmless_on_singular_systems() {
        // Rank-1 matrix with the right-hand side inside its range: the
        // refined solve must stay finite and keep the residual at least as
        // small as the loaded solve's.
        let a = {
            let mut rows = vec![vec![Complex64::ZERO; 2]; 2];
            rows[0][0] = c64(1.0, 0.0);
            HermitianMatrix::from_rows(&rows).unwrap()
        };
        let b = [c64(0.5, 0.25), Complex64::ZERO];
        let refined = solve_refined(&a, &b, 1e-6).unwrap();
        assert!(refined.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
        let res: f64 = a
            .matvec(&refined)
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(res < 1e-12, "residual {res:.3e}");
    }

    #[test]
    fn gev_diagonal_pencil_is_exact() {
        // A = diag(1, 4, 9), B = I: eigenvalues are the diagonal, vectors
        // the coordinate axes.
        let a = {
            let mut rows = vec![vec![Complex64::ZERO; 3]; 3];
            for (i, v) in [1.0, 4.0, 9.0].iter().enumerate() {
                rows[i][i] = c64(*v, 0.0);
            }
            HermitianMatrix::from_rows(&rows).unwrap()
        };
        let b = {
            let mut rows = vec![vec![Complex64::ZERO; 3]; 3];
            for i in 0..3 {
                rows[i][i] = c64(1.0, 0.0);
            }
            HermitianMatrix::from_rows(&rows).unwrap()
        };
        let top = gev_max(&a, &b, 0.0).unwrap();
        assert_abs_diff_eq!(top.eigenvalue, 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(top.filter[2].re, 1.0, epsilon = 1e-12);
        let bottom = gev_min(&a, &b, 0.0).unwrap();
        assert_abs_diff_eq!(bottom.eigenvalue, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bottom.filter[0].re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gev_residuals_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let eps = 1e-6;
        for n in 2..=6 {
            for _ in 0..20 {
                let a = rand_hermitian(&mut rng, n);
                let b = rand_psd(&mut rng, n, n + 2);
                let basis = gev_full(&a, &b, eps).unwrap();
                let bl = b.loaded(eps);
                let a_norm = a.frobenius_norm();
                for (k, w) in basis.vectors.iter().enumerate() {
                    let res = residual_norm(&a, &bl, basis.eigenvalues[k], w);
                    assert!(
                        res < 1e-10 * a_norm.max(1e-30),
                        "residual {res:.3e} vs ‖A‖={a_norm:.3e} (n={n}, k={k})"
                    );
                }
                // wᵢᴴ B' wⱼ = δᵢⱼ
                for i in 0..n {
                    for j in 0..n {
                        let bwj = bl.matvec(&basis.vectors[j]);
                        let dot: Complex64 = basis.vectors[i]
                            .iter()
                            .zip(&bwj)
                            .map(|(p, q)| p.conj() * q)
                            .sum();
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert_abs_diff_eq!(dot.re, expect, epsilon = 1e-9);
                        assert_abs_diff_eq!(dot.im, 0.0, epsilon = 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn gev_eigenvalues_sorted_and_extremes_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_hermitian(&mut rng, 5);
        let b = rand_psd(&mut rng, 5, 8);
        let basis = gev_full(&a, &b, 1e-6).unwrap();
        for k in 1..5 {
            assert!(basis.eigenvalues[k] >= basis.eigenvalues[k - 1]);
        }
        let top = gev_max(&a, &b, 1e-6).unwrap();
        let bottom = gev_min(&a, &b, 1e-6).unwrap();
        assert_eq!(top.eigenvalue, basis.eigenvalues[4]);
        assert_eq!(bottom.eigenvalue, basis.eigenvalues[0]);
        assert!(top.eigenvalue >= bottom.eigenvalue);
    }

    #[test]
    fn canonical_filter_has_unit_norm_and_real_peak() {
        let mut v = vec![c64(0.3, -0.4), c64(-1.2, 0.9), c64(0.1, 0.0)];
        canonicalize_filter(&mut v);
        let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1].im, 0.0, epsilon = 1e-14);
        assert!(v[1].re > 0.0);
    }

    #[test]
    fn gev_pencil_reconstruction() {
        // Completeness: A = B'·W·Λ·Wᴴ·B' for the B'-orthonormal basis W.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = rand_hermitian(&mut rng, 4);
        let b = rand_psd(&mut rng, 4, 6);
        let eps = 1e-6;
        let basis = gev_full(&a, &b, eps).unwrap();
        let bl = b.loaded(eps);
        let n = 4;
        let mut recon = vec![Complex64::ZERO; n * n];
        for k in 0..n {
            let bw = bl.matvec(&basis.vectors[k]);
            for i in 0..n {
                for j in 0..n {
                    recon[i * n + j] += basis.eigenvalues[k] * bw[i] * bw[j].conj();
                }
            }
        }
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                err += (recon[i * n + j] - a.get(i, j)).norm_sqr();
            }
        }
        assert!(err.sqrt() < 1e-9 * a.frobenius_norm());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Scaling A by c > 0 scales every eigenvalue by c and leaves the
        /// canonicalized top filter unchanged.
        #[test]
        fn gev_scale_equivariance(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=5);
            let a = rand_psd(&mut rng, n, n + 3);
            let b = rand_psd(&mut rng, n, n + 3);
            let base = gev_max(&a, &b, 1e-6);
            let scaled = gev_max(&a.scaled(scale), &b, 1e-6);
            if let (Ok(base), Ok(scaled)) = (base, scaled) {
                let rel = (scaled.eigenvalue - scale * base.eigenvalue).abs()
                    / (scale * base.eigenvalue).abs().max(1e-12);
                prop_assert!(rel < 1e-8, "eigenvalue rel err {rel:.3e}");
                for (p, q) in scaled.filter.iter().zip(&base.filter) {
                    prop_assert!((p - q).norm() < 1e-7);
                }
            }
        }

        /// Loading never produces NaNs and the loaded solve matches the
        /// plain solve on well-conditioned input.
        #[test]
        fn solve_loaded_consistent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=6);
            let a = rand_psd(&mut rng, n, n + 4).loaded(1e-3);
            let b: Vec<Complex64> = (0..n).map(|_| rand_c(&mut rng)).collect();
            let x = solve_loaded(&a, &b, 0.0).unwrap();
            prop_assert!(x.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
            let res: f64 = a.matvec(&x).iter().zip(&b)
                .map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
            prop_assert!(res < 1e-8);
        }
    }
}
