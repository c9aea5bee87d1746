//! Kernel regression and abundance estimation.
//!
//! Two estimators are provided:
//!
//! - [`LssvrModel`]: least-squares support vector regression of a pixel on the
//!   band rows of the endmember matrix, `(K + mu I) beta = r`.
//! - [`SkHypeModel`]: a linear trend plus a kernel residual, blended by a
//!   scalar `u in (0, 1)`. For fixed `u` the dual
//!
//!   ```text
//!   max  G(beta, gamma) = -1/2 [beta; gamma]' H [beta; gamma] + r' beta
//!   s.t. gamma >= 0,     H = [[A, u M], [u M', u I]],  A = u M M' + (1-u) K + mu I
//!   ```
//!
//!   is solved by eliminating `beta = A^-1 (r - u M gamma)` and running an
//!   active-set method on the remaining `R`-dimensional nonnegative QP. The
//!   outer problem minimizes the optimal dual value `J(u)` by golden-section
//!   search.
//!
//! Every per-`u` solve reuses one eigendecomposition `K = Q diag(lambda) Q'`
//! of the band Gram matrix. With `D = diag(1 / ((1-u) lambda + mu))` and
//! `N = Q'M`, the Woodbury identity collapses the reduced QP to
//!
//! ```text
//! C = I/u + N' D N,   S = C^-1,   q = C^-1 N' D Q'r,
//! J(u) = 1/2 r'QDQ'r - min_{gamma >= 0} 1/2 (gamma + N'DQ'r)' C^-1 (gamma + N'DQ'r)
//! ```
//!
//! so each evaluation of `J` costs `O(L R^2)` rather than a dense `L x L`
//! factorization.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cross_kernel, kernel_matrix, EndmemberMatrix};
use crate::mixing::AbundanceVector;

/// Lower end of the search interval for `u`; the upper end is `1 - U_MARGIN`.
pub const U_MARGIN: f64 = 1e-3;
/// Golden-section stopping width on `u`.
pub const U_TOLERANCE: f64 = 1e-6;
/// Bound on KKT residuals accepted from the fixed-`u` solver.
pub const KKT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MU: f64 = 1e-2;

const JITTER_START: f64 = 1e-10;
const JITTER_RETRIES: usize = 3;

/// Cholesky factor of `a`, adding `1e-10, 1e-9, 1e-8` to the diagonal if the
/// plain factorization fails.
fn spd_factor(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let mut jitter = JITTER_START;
    for _ in 0..JITTER_RETRIES {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Solver(format!(
        "{}x{} system is not positive definite even with diagonal jitter {:e}",
        a.nrows(),
        a.ncols(),
        jitter / 10.0
    )))
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::Parameter(format!(
            "regularization must be nonnegative, got {mu}"
        )));
    }
    Ok(())
}

fn check_pixel(r: &[f64], bands: usize) -> Result<()> {
    if r.len() != bands {
        return Err(Error::Shape(format!(
            "pixel has {} values for {bands} bands",
            r.len()
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("pixel contains non-finite values".into()));
    }
    Ok(())
}

fn check_band_rows(band_rows: &DMatrix<f64>) -> Result<()> {
    if band_rows.nrows() == 0 || band_rows.ncols() == 0 {
        return Err(Error::Shape(format!(
            "empty band matrix {}x{}",
            band_rows.nrows(),
            band_rows.ncols()
        )));
    }
    if band_rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(
            "band matrix contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// LS-SVR fit of one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LssvrFit {
    pub beta: DVector<f64>,
    /// `K beta`, the kernel expansion evaluated at every band.
    pub fitted: DVector<f64>,
    /// `r - fitted`, equal to `mu beta`.
    pub residuals: DVector<f64>,
}

/// Factored `(K + mu I)` for repeated LS-SVR fits over one band set.
pub struct LssvrModel {
    kernel: DMatrix<f64>,
    system: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl LssvrModel {
    pub fn new(band_rows: &DMatrix<f64>, mu: f64, sigma2: f64) -> Result<Self> {
        check_band_rows(band_rows)?;
        check_mu(mu)?;
        let kernel = kernel_matrix(band_rows, sigma2)?;
        let n = kernel.nrows();
        let system = &kernel + DMatrix::identity(n, n) * mu;
        let factor = spd_factor(&system)?;
        Ok(Self {
            kernel,
            system,
            factor,
        })
    }

    pub fn fit(&self, r: &[f64]) -> Result<LssvrFit> {
        check_pixel(r, self.kernel.nrows())?;
        let r = DVector::from_column_slice(r);
        let beta = self.factor.solve(&r);
        let defect = (&self.system * &beta - &r).amax();
        let scale = 1.0 + r.amax();
        if !(defect <= 1e-8 * scale) {
            return Err(Error::Solver(format!(
                "LS-SVR system is numerically singular: residual {defect:e}"
            )));
        }
        let fitted = &self.kernel * &beta;
        let residuals = &r - &fitted;
        Ok(LssvrFit {
            beta,
            fitted,
            residuals,
        })
    }
}

/// One-shot LS-SVR regression of `r` on `band_rows` (`L' x R`).
pub fn lssvr_fit(band_rows: &DMatrix<f64>, r: &[f64], mu: f64, sigma2: f64) -> Result<LssvrFit> {
    LssvrModel::new(band_rows, mu, sigma2)?.fit(r)
}

/// Worst violations of the optimality conditions of the fixed-`u` dual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `max(0, -min gamma)`.
    pub primal_infeasibility: f64,
    /// `max(0, -min nu)` with `nu = u (M' beta + gamma)` the multiplier of `gamma >= 0`.
    pub dual_infeasibility: f64,
    /// `max |gamma_i nu_i|`.
    pub complementarity: f64,
    /// `|| A beta + u M gamma - r ||_inf`.
    pub stationarity: f64,
}

impl KktReport {
    pub fn worst(&self) -> f64 {
        self.primal_infeasibility
            .max(self.dual_infeasibility)
            .max(self.complementarity)
            .max(self.stationarity)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

/// Optimal multipliers of the dual at a fixed `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub beta: DVector<f64>,
    /// Nonnegative.
    pub gamma: DVector<f64>,
    pub u: f64,
    /// Dual objective `G` at `(beta, gamma)`.
    pub objective: f64,
    /// `G` after each active-set step; non-decreasing.
    pub qp_trace: Vec<f64>,
    pub kkt: KktReport,
}

/// Primal quantities recovered from a dual solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub alpha: AbundanceVector,
    /// Unnormalised linear coefficients `u (M' beta + gamma)`.
    pub linear: DVector<f64>,
    /// Weights of the kernel expansion of the nonlinear part: `(1-u) beta`.
    pub psi: DVector<f64>,
    /// `r - M linear - K psi`.
    pub residuals: DVector<f64>,
}

/// Estimate for one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixResult {
    pub alpha: AbundanceVector,
    pub u: f64,
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub linear: DVector<f64>,
    pub psi: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `(u, J(u))` for every evaluation of the outer search, in order.
    pub objective_trace: Vec<(f64, f64)>,
    pub kkt: KktReport,
}

/// `M' beta + gamma` normalised onto the simplex. Entries that are negative
/// within solver accuracy are clipped to zero first.
pub fn normalize_abundances(
    band_rows: &DMatrix<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<AbundanceVector> {
    let raw = band_rows.tr_mul(beta) + gamma;
    let clipped: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!(
            "abundance normaliser is {total}"
        )));
    }
    let mut alpha: Vec<f64> = clipped.iter().map(|v| v / total).collect();
    let s: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|v| *v /= s);
    AbundanceVector::new(alpha)
}

/// Solves `min 1/2 x'Sx + q'x  s.t. x >= 0` for positive definite `S` by a
/// primal active-set method started at `x = 0`. Returns the minimizer and
/// the objective after every step.
fn nonnegative_qp(s: &DMatrix<f64>, q: &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = q.len();
    let objective = |x: &DVector<f64>| 0.5 * x.dot(&(s * x)) + q.dot(x);
    let mut x = DVector::zeros(n);
    let mut free = vec![false; n];
    let mut trace = vec![0.0];
    let tol = 1e-13 * (1.0 + q.amax() + s.amax());
    for _ in 0..(50 + 20 * n) {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let mut target = DVector::zeros(n);
        if !idx.is_empty() {
            let sff = DMatrix::from_fn(idx.len(), idx.len(), |a, b| s[(idx[a], idx[b])]);
            let qf = DVector::from_iterator(idx.len(), idx.iter().map(|&i| -q[i]));
            let y = spd_factor(&sff)?.solve(&qf);
            for (a, &i) in idx.iter().enumerate() {
                target[i] = y[a];
            }
        }
        let step = &target - &x;
        if step.amax() <= 1e-15 * (1.0 + x.amax()) {
            let grad = s * &x + q;
            let release = (0..n)
                .filter(|&i| !free[i])
                .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
            match release {
                Some(j) if grad[j] < -tol => free[j] = true,
                _ => return Ok((x, trace)),
            }
            continue;
        }
        let mut t = 1.0;
        let mut blocking = None;
        for &i in &idx {
            if step[i] < 0.0 {
                let ti = -x[i] / step[i];
                if ti < t {
                    t = ti;
                    blocking = Some(i);
                }
            }
        }
        x += step * t;
        if let Some(b) = blocking {
            x[b] = 0.0;
            free[b] = false;
        }
        for &i in &idx {
            x[i] = x[i].max(0.0);
        }
        let f = objective(&x);
        // a step never increases the objective beyond rounding
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(f.min(prev));
    }
    Err(Error::Solver(format!(
        "active-set QP did not terminate within {} steps",
        50 + 20 * n
    )))
}

/// Band rows, Gram matrix and its eigendecomposition for one band set.
pub struct SkHypeModel {
    band_rows: DMatrix<f64>,
    kernel: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    /// `(Q' M)'`, one column per eigenvector
    rotated_t: DMatrix<f64>,
    mu: f64,
    sigma2: f64,
}

/// Quantities of the reduced QP at one `u`, in the eigenbasis of `K`.
struct Reduced {
    /// `D` on the eigenbasis
    d: DVector<f64>,
    c: Cholesky<f64, Dyn>,
    s: DMatrix<f64>,
    q: DVector<f64>,
    /// `r'QDQ'r`
    rdr: f64,
    /// `N'DQ'r`
    ndr: DVector<f64>,
}

impl SkHypeModel {
    pub fn new(band_rows: &DMatrix<f64>, mu: f64, sigma2: f64) -> Result<Self> {
        check_band_rows(band_rows)?;
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Parameter(format!(
                "regularization must be positive, got {mu}"
            )));
        }
        let kernel = kernel_matrix(band_rows, sigma2)?;
        let eig = SymmetricEigen::new(kernel.clone());
        let rotated_t = band_rows.tr_mul(&eig.eigenvectors);
        Ok(Self {
            band_rows: band_rows.clone(),
            kernel,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
            rotated_t,
            mu,
            sigma2,
        })
    }

    pub fn bands(&self) -> usize {
        self.band_rows.nrows()
    }

    pub fn endmembers(&self) -> usize {
        self.band_rows.ncols()
    }

    pub fn band_rows(&self) -> &DMatrix<f64> {
        &self.band_rows
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `A = u M M' + (1-u) K + mu I`.
    pub fn system_matrix(&self, u: f64) -> DMatrix<f64> {
        let n = self.bands();
        &self.band_rows * self.band_rows.transpose() * u
            + &self.kernel * (1.0 - u)
            + DMatrix::identity(n, n) * self.mu
    }

    /// Full dual matrix `H = [[A, u M], [u M', u I]]`.
    pub fn dual_matrix(&self, u: f64) -> DMatrix<f64> {
        let (l, r) = (self.bands(), self.endmembers());
        let mut h = DMatrix::zeros(l + r, l + r);
        h.view_mut((0, 0), (l, l)).copy_from(&self.system_matrix(u));
        h.view_mut((0, l), (l, r)).copy_from(&(&self.band_rows * u));
        h.view_mut((l, 0), (r, l))
            .copy_from(&(self.band_rows.transpose() * u));
        h.view_mut((l, l), (r, r)).fill_with_identity();
        h.view_mut((l, l), (r, r)).scale_mut(u);
        h
    }

    /// Problem for one pixel of this band set.
    pub fn pixel(&self, r: &[f64]) -> Result<PixelProblem<'_>> {
        check_pixel(r, self.bands())?;
        let r = DVector::from_column_slice(r);
        let rotated = self.eigvecs.tr_mul(&r);
        Ok(PixelProblem {
            model: self,
            r,
            rotated,
        })
    }

    fn reduced(&self, rotated_r: &DVector<f64>, u: f64) -> Result<Reduced> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Parameter(format!("u must lie in (0, 1), got {u}")));
        }
        let l = self.bands();
        let rr = self.endmembers();
        // tiny negative eigenvalues are rounding
        let d = DVector::from_iterator(
            l,
            self.eigvals
                .iter()
                .map(|&lam| 1.0 / ((1.0 - u) * lam.max(0.0) + self.mu)),
        );
        let mut c = DMatrix::zeros(rr, rr);
        let mut ndr = DVector::zeros(rr);
        let mut rdr = 0.0;
        for i in 0..l {
            let row = self.rotated_t.column(i);
            let di = d[i];
            let dri = di * rotated_r[i];
            rdr += dri * rotated_r[i];
            for a in 0..rr {
                let wa = di * row[a];
                ndr[a] += row[a] * dri;
                for b in a..rr {
                    c[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..rr {
            c[(a, a)] += 1.0 / u;
            for b in 0..a {
                c[(a, b)] = c[(b, a)];
            }
        }
        let c = spd_factor(&c)?;
        let s = c.inverse();
        let s = (&s + s.transpose()) * 0.5;
        let q = &s * &ndr;
        Ok(Reduced {
            d,
            c,
            s,
            q,
            rdr,
            ndr,
        })
    }

    /// `J(u)` at a QP point `gamma`: `1/2 r'QDQ'r - 1/2 y' C^-1 y`, `y = gamma + N'DQ'r`.
    fn dual_value(red: &Reduced, gamma: &DVector<f64>) -> f64 {
        let y = gamma + &red.ndr;
        0.5 * red.rdr - 0.5 * y.dot(&red.c.solve(&y))
    }
}

/// A pixel bound to a [`SkHypeModel`].
pub struct PixelProblem<'a> {
    model: &'a SkHypeModel,
    r: DVector<f64>,
    rotated: DVector<f64>,
}

impl PixelProblem<'_> {
    pub fn observation(&self) -> &DVector<f64> {
        &self.r
    }

    /// Optimal dual value `J(u)`.
    pub fn objective_at(&self, u: f64) -> Result<f64> {
        let red = self.model.reduced(&self.rotated, u)?;
        let (gamma, _) = nonnegative_qp(&red.s, &red.q)?;
        Ok(SkHypeModel::dual_value(&red, &gamma))
    }

    /// Maximizes the dual at fixed `u` and verifies its KKT conditions.
    pub fn solve_fixed_u(&self, u: f64) -> Result<DualSolution> {
        let m = self.model;
        let red = m.reduced(&self.rotated, u)?;
        let (gamma, steps) = nonnegative_qp(&red.s, &red.q)?;
        // beta = A^-1 (r - u M gamma), through the same Woodbury form
        let w = &self.rotated - m.rotated_t.tr_mul(&gamma) * u;
        let dw = w.component_mul(&red.d);
        let z = red.c.solve(&(&m.rotated_t * &dw));
        let beta_rot = &dw - (m.rotated_t.tr_mul(&z)).component_mul(&red.d);
        let beta = &m.eigvecs * beta_rot;
        let base = 0.5 * red.rdr - 0.5 * red.ndr.dot(&red.q);
        let qp_trace: Vec<f64> = steps.into_iter().map(|f| base - f).collect();
        let objective = SkHypeModel::dual_value(&red, &gamma);

        let nu = (m.band_rows.tr_mul(&beta) + &gamma) * u;
        let a_beta = &m.band_rows * m.band_rows.tr_mul(&beta) * u
            + &m.kernel * &beta * (1.0 - u)
            + &beta * m.mu;
        let stationarity = (a_beta + &m.band_rows * &gamma * u - &self.r).amax();
        let kkt = KktReport {
            primal_infeasibility: (-gamma.min()).max(0.0),
            dual_infeasibility: (-nu.min()).max(0.0),
            complementarity: gamma.component_mul(&nu).amax(),
            stationarity,
        };
        if !kkt.holds(KKT_TOLERANCE) {
            return Err(Error::Solver(format!(
                "fixed-u dual at u = {u} violates KKT conditions: {kkt:?}"
            )));
        }
        Ok(DualSolution {
            beta,
            gamma,
            u,
            objective,
            qp_trace,
            kkt,
        })
    }

    pub fn recover(&self, dual: &DualSolution) -> Result<Recovered> {
        let m = self.model;
        let alpha = normalize_abundances(&m.band_rows, &dual.beta, &dual.gamma)?;
        let linear = (m.band_rows.tr_mul(&dual.beta) + &dual.gamma) * dual.u;
        let psi = &dual.beta * (1.0 - dual.u);
        let residuals = &self.r - &m.band_rows * &linear - &m.kernel * &psi;
        Ok(Recovered {
            alpha,
            linear,
            psi,
            residuals,
        })
    }

    /// Minimizes `J(u)` over `[U_MARGIN, 1 - U_MARGIN]` by golden-section
    /// search and recovers the primal solution at the best evaluated `u`.
    pub fn minimize(&self) -> Result<UnmixResult> {
        let mut trace: Vec<(f64, f64)> = Vec::new();
        let mut eval = |u: f64| -> Result<f64> {
            let j = self.objective_at(u)?;
            trace.push((u, j));
            Ok(j)
        };
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (U_MARGIN, 1.0 - U_MARGIN);
        eval(a)?;
        eval(b)?;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let mut fc = eval(c)?;
        let mut fd = eval(d)?;
        while b - a > U_TOLERANCE {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = eval(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = eval(d)?;
            }
        }
        let (u, _) = trace
            .iter()
            .copied()
            .reduce(|best, x| if x.1 < best.1 { x } else { best })
            .expect("at least four evaluations");
        let dual = self.solve_fixed_u(u)?;
        let rec = self.recover(&dual)?;
        Ok(UnmixResult {
            alpha: rec.alpha,
            u,
            beta: dual.beta,
            gamma: dual.gamma,
            linear: rec.linear,
            psi: rec.psi,
            residuals: rec.residuals,
            objective_trace: trace,
            kkt: dual.kkt,
        })
    }
}

/// Fixed-`u` dual for a single pixel.
pub fn skhype_dual_fixed_u(
    band_rows: &DMatrix<f64>,
    r: &[f64],
    u: f64,
    mu: f64,
    sigma2: f64,
) -> Result<DualSolution> {
    SkHypeModel::new(band_rows, mu, sigma2)?
        .pixel(r)?
        .solve_fixed_u(u)
}

/// Full SK-Hype estimate for a single pixel.
pub fn minimize_ju(
    band_rows: &DMatrix<f64>,
    r: &[f64],
    mu: f64,
    sigma2: f64,
) -> Result<UnmixResult> {
    SkHypeModel::new(band_rows, mu, sigma2)?
        .pixel(r)?
        .minimize()
}

/// `G(beta, gamma) = -1/2 x'Hx + r'beta` with `x = [beta; gamma]`.
pub fn dual_objective(
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> f64 {
    let x = stack(beta, gamma);
    -0.5 * x.dot(&(h * &x)) + r.dot(beta)
}

/// Gradient of [`dual_objective`] with respect to `[beta; gamma]`.
pub fn dual_gradient(
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> DVector<f64> {
    let x = stack(beta, gamma);
    let mut g = -(h * &x);
    for i in 0..beta.len() {
        g[i] += r[i];
    }
    g
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Spectrum predicted at every band of `full` by a fit made on the bands in
/// `indices`: `m_l' linear + sum_j psi_j k(m_l, m_j)`.
pub fn reconstruct(
    full: &EndmemberMatrix,
    indices: &[usize],
    linear: &DVector<f64>,
    psi: &DVector<f64>,
    sigma2: f64,
) -> Result<DVector<f64>> {
    if indices.len() != psi.len() || linear.len() != full.endmembers() {
        return Err(Error::Shape(format!(
            "{} dictionary bands with {} kernel weights and {} linear coefficients for {} endmembers",
            indices.len(),
            psi.len(),
            linear.len(),
            full.endmembers()
        )));
    }
    let dict = full.select_bands(indices);
    Ok(full.matrix() * linear + cross_kernel(full.matrix(), &dict, sigma2)? * psi)
}

/// Per-pixel estimates for a scene and the time spent producing them.
#[derive(Debug, Clone)]
pub struct SceneUnmixing {
    /// `None` where the pixel failed; see `failures`.
    pub results: Vec<Option<UnmixResult>>,
    pub failures: Vec<(usize, String)>,
    pub bands_used: usize,
    pub elapsed: Duration,
}

impl SceneUnmixing {
    /// `N x R` abundance estimates; failed pixels are rows of NaN.
    pub fn abundances(&self, endmembers: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.results.len(), endmembers, |i, j| {
            self.results[i]
                .as_ref()
                .map_or(f64::NAN, |r| r.alpha.as_slice()[j])
        })
    }
}

/// Validates a band subset and returns the selected rows.
pub fn restrict_bands(m: &EndmemberMatrix, indices: Option<&[usize]>) -> Result<Vec<usize>> {
    let l = m.bands();
    match indices {
        None => Ok((0..l).collect()),
        Some(ix) => {
            if ix.is_empty() {
                return Err(Error::Input("empty band dictionary".into()));
            }
            let mut seen = vec![false; l];
            for &i in ix {
                if i >= l {
                    return Err(Error::Input(format!(
                        "band index {i} out of range for {l} bands"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Input(format!("duplicate band index {i}")));
                }
            }
            Ok(ix.to_vec())
        }
    }
}

/// SK-Hype on every row of `pixels` (`N x L`), restricted to `indices` when
/// given. Pixels are solved in parallel; a failing pixel is recorded and does
/// not abort the scene.
pub fn unmix_scene(
    pixels: &DMatrix<f64>,
    m: &EndmemberMatrix,
    indices: Option<&[usize]>,
    mu: f64,
    sigma2: f64,
) -> Result<SceneUnmixing> {
    if pixels.ncols() != m.bands() {
        return Err(Error::Shape(format!(
            "pixels have {} bands, endmembers have {}",
            pixels.ncols(),
            m.bands()
        )));
    }
    let bands = restrict_bands(m, indices)?;
    let start = Instant::now();
    let model = SkHypeModel::new(&m.select_bands(&bands), mu, sigma2)?;
    let outcomes: Vec<std::result::Result<UnmixResult, String>> = (0..pixels.nrows())
        .into_par_iter()
        .map(|p| {
            let r: Vec<f64> = bands.iter().map(|&b| pixels[(p, b)]).collect();
            model
                .pixel(&r)
                .and_then(|pp| pp.minimize())
                .map_err(|e| e.to_string())
        })
        .collect();
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    let results = outcomes
        .into_iter()
        .enumerate()
        .map(|(p, o)| match o {
            Ok(r) => Some(r),
            Err(e) => {
                failures.push((p, e));
                None
            }
        })
        .collect();
    Ok(SceneUnmixing {
        results,
        failures,
        bands_used: bands.len(),
        elapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::{lmm, pnmm, random_endmembers, sample_simplex, stream_rng};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(l: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(l, r, |_, _| rng.random_range(0.0..1.0))
    }

    fn random_pixel(l: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..l).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn lssvr_identity_system() {
        let rows = DMatrix::from_fn(4, 2, |i, j| 100.0 * (i * 2 + j) as f64);
        let r = [0.3, -0.2, 0.9, 0.1];
        let fit = lssvr_fit(&rows, &r, 1e-12, 1e-3).unwrap();
        for (b, x) in fit.beta.iter().zip(r) {
            assert!((b - x).abs() < 1e-9);
        }
    }

    #[test]
    fn lssvr_defining_equation_and_residual_identity() {
        let rows = random_rows(30, 4, 1);
        let r = random_pixel(30, 2);
        let fit = lssvr_fit(&rows, &r, 0.05, 0.7).unwrap();
        let k = kernel_matrix(&rows, 0.7).unwrap();
        let rv = DVector::from_column_slice(&r);
        let defect = (&k * &fit.beta + &fit.beta * 0.05 - &rv).norm();
        assert!(defect <= 1e-10, "{defect}");
        for (e, b) in fit.residuals.iter().zip(fit.beta.iter()) {
            assert!((e - 0.05 * b).abs() <= 1e-9);
        }
    }

    #[test]
    fn lssvr_matches_dense_lu_solve() {
        let rows = random_rows(25, 3, 3);
        let r = random_pixel(25, 4);
        let fit = lssvr_fit(&rows, &r, 1e-2, 2.0).unwrap();
        // assemble the kernel entrywise and solve through LU
        let mut a = DMatrix::zeros(25, 25);
        for i in 0..25 {
            for j in 0..25 {
                let d: f64 = (0..3).map(|c| (rows[(i, c)] - rows[(j, c)]).powi(2)).sum();
                a[(i, j)] = (-d / 4.0).exp() + if i == j { 1e-2 } else { 0.0 };
            }
        }
        let beta = a.lu().solve(&DVector::from_column_slice(&r)).unwrap();
        assert!((beta - &fit.beta).amax() < 1e-8);
    }

    #[test]
    fn lssvr_singular_system_is_a_solver_error() {
        let rows = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1, 0.2, 0.5, 0.6]);
        let r = [1.0, -1.0, 0.0];
        assert!(matches!(
            lssvr_fit(&rows, &r, 0.0, 1.0),
            Err(Error::Solver(_))
        ));
        assert!(matches!(
            lssvr_fit(&rows, &r, -1.0, 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn interior_optimum_solves_the_full_linear_system() {
        // a pixel inside the endmember cone leaves every gamma at its bound
        let rows = random_rows(20, 3, 5);
        let alpha = [0.3, 0.3, 0.4];
        let r: Vec<f64> = (0..20)
            .map(|l| (0..3).map(|k| rows[(l, k)] * alpha[k]).sum())
            .collect();
        let model = SkHypeModel::new(&rows, 1e-2, 1.0).unwrap();
        let dual = model.pixel(&r).unwrap().solve_fixed_u(0.6).unwrap();
        assert!(
            dual.gamma.iter().all(|&g| g == 0.0),
            "expected an empty active set: {}",
            dual.gamma
        );
        // with gamma = 0 held at the bound the optimum is A beta = r
        let a = model.system_matrix(0.6);
        let beta = a.lu().solve(&DVector::from_column_slice(&r)).unwrap();
        assert!((&beta - &dual.beta).amax() < 1e-9);
    }

    #[test]
    fn all_multipliers_positive_solves_the_block_system() {
        // r = -M 1 drives every multiplier of gamma >= 0 positive
        let rows = random_rows(15, 3, 6);
        let r: Vec<f64> = (0..15)
            .map(|l| -(0..3).map(|k| rows[(l, k)]).sum::<f64>())
            .collect();
        let model = SkHypeModel::new(&rows, 1e-2, 1.0).unwrap();
        let u = 0.4;
        let dual = model.pixel(&r).unwrap().solve_fixed_u(u).unwrap();
        assert!(dual.gamma.iter().all(|&g| g > 0.0), "{}", dual.gamma);
        let h = model.dual_matrix(u);
        let mut rhs = DVector::zeros(18);
        for i in 0..15 {
            rhs[i] = r[i];
        }
        let x = h.lu().solve(&rhs).unwrap();
        assert!((x.rows(0, 15) - &dual.beta).amax() < 1e-8);
        assert!((x.rows(15, 3) - &dual.gamma).amax() < 1e-8);
    }

    #[test]
    fn single_endmember_matches_grid_search() {
        for (seed, sign) in [(7u64, 1.0), (8, -1.0)] {
            let rows = random_rows(12, 1, seed);
            let r: Vec<f64> = random_pixel(12, seed + 100)
                .iter()
                .map(|v| sign * (v.abs() + 0.1))
                .collect();
            let model = SkHypeModel::new(&rows, 0.05, 0.5).unwrap();
            let u = 0.3;
            let dual = model.pixel(&r).unwrap().solve_fixed_u(u).unwrap();
            let h = model.dual_matrix(u);
            let a = model.system_matrix(u);
            let rv = DVector::from_column_slice(&r);
            let g_at = |gamma: f64| {
                let beta = a
                    .clone()
                    .lu()
                    .solve(&(&rv - rows.column(0) * (u * gamma)))
                    .unwrap();
                dual_objective(&h, &rv, &beta, &DVector::from_element(1, gamma))
            };
            let span = 2.0 * dual.gamma[0] + 1.0;
            let best = (0..=20_000)
                .map(|i| g_at(span * i as f64 / 20_000.0))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(dual.objective >= best - 1e-9, "{} < {best}", dual.objective);
            assert!((dual.objective - best).abs() < 1e-6);
            let direct = dual_objective(&h, &rv, &dual.beta, &dual.gamma);
            assert!((direct - dual.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn random_feasible_perturbations_do_not_improve() {
        let rows = random_rows(25, 4, 9);
        let r = random_pixel(25, 10);
        let model = SkHypeModel::new(&rows, 1e-2, 0.8).unwrap();
        let u = 0.5;
        let dual = model.pixel(&r).unwrap().solve_fixed_u(u).unwrap();
        let h = model.dual_matrix(u);
        let rv = DVector::from_column_slice(&r);
        let g0 = dual_objective(&h, &rv, &dual.beta, &dual.gamma);
        let mut rng = stream_rng(11, 0);
        for _ in 0..100 {
            let scale = 10f64.powf(rng.random_range(-4.0..0.0));
            let db = DVector::from_fn(25, |_, _| scale * rng.random_range(-1.0..1.0));
            let gamma = DVector::from_fn(4, |i, _| {
                (dual.gamma[i] + scale * rng.random_range(-1.0..1.0)).max(0.0)
            });
            assert!(dual_objective(&h, &rv, &(&dual.beta + db), &gamma) <= g0 + 1e-12);
        }
    }

    #[test]
    fn qp_trace_is_monotone() {
        for seed in 0..10 {
            let rows = random_rows(20, 5, 20 + seed);
            let r = random_pixel(20, 40 + seed);
            let dual = skhype_dual_fixed_u(&rows, &r, 0.5, 1e-2, 1.0).unwrap();
            for w in dual.qp_trace.windows(2) {
                assert!(w[1] >= w[0], "{:?}", dual.qp_trace);
            }
            assert!(dual.kkt.holds(KKT_TOLERANCE));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rows = random_rows(10, 3, 12);
        let r = DVector::from_column_slice(&random_pixel(10, 13));
        let model = SkHypeModel::new(&rows, 1e-2, 1.0).unwrap();
        let h = model.dual_matrix(0.35);
        let mut rng = stream_rng(14, 0);
        for _ in 0..5 {
            let beta = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let gamma = DVector::from_fn(3, |_, _| rng.random_range(0.0..1.0));
            let g = dual_gradient(&h, &r, &beta, &gamma);
            let eps = 1e-6;
            for i in 0..13 {
                let (mut bp, mut gp, mut bm, mut gm) =
                    (beta.clone(), gamma.clone(), beta.clone(), gamma.clone());
                if i < 10 {
                    bp[i] += eps;
                    bm[i] -= eps;
                } else {
                    gp[i - 10] += eps;
                    gm[i - 10] -= eps;
                }
                let fd = (dual_objective(&h, &r, &bp, &gp) - dual_objective(&h, &r, &bm, &gm))
                    / (2.0 * eps);
                assert!(
                    (fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0),
                    "{fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn recovery_cases() {
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let beta = DVector::from_vec(vec![0.2, 0.6]);
        let zero = DVector::zeros(2);
        let a = normalize_abundances(&rows, &beta, &zero).unwrap();
        assert!((a.as_slice()[0] - 0.25).abs() < 1e-15 && (a.as_slice()[1] - 0.75).abs() < 1e-15);

        let gamma = DVector::from_vec(vec![0.5, 0.1]);
        let u = normalize_abundances(&rows, &beta, &gamma).unwrap();
        assert_eq!(u.as_slice(), &[0.5, 0.5]);

        let neg = DVector::from_vec(vec![-0.2, -0.6]);
        assert!(matches!(
            normalize_abundances(&rows, &neg, &zero),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn random_duals_normalise_onto_the_simplex() {
        let mut rng = stream_rng(15, 0);
        for _ in 0..200 {
            let rows = DMatrix::from_fn(8, 4, |_, _| rng.random_range(0.0..1.0));
            let beta = DVector::from_fn(8, |_, _| rng.random_range(0.0..1.0));
            let gamma = DVector::from_fn(4, |_, _| rng.random_range(0.0..1.0));
            let a = normalize_abundances(&rows, &beta, &gamma).unwrap();
            assert!(a.as_slice().iter().all(|&v| v >= 0.0));
            assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn noiseless_linear_pixels_are_recovered() {
        let m = random_endmembers(60, 3, 21).unwrap();
        let model = SkHypeModel::new(m.matrix(), DEFAULT_MU, 1.0).unwrap();
        let mut rng = stream_rng(22, 0);
        let mut sq = 0.0;
        let mut count = 0;
        for _ in 0..10 {
            let alpha = sample_simplex(3, &mut rng);
            let r = lmm(&m, alpha.as_slice()).unwrap();
            let res = model.pixel(&r).unwrap().minimize().unwrap();
            assert!(res.u > 0.5, "u = {}", res.u);
            for (a, b) in res.alpha.as_slice().iter().zip(alpha.as_slice()) {
                sq += (a - b) * (a - b);
                count += 1;
            }
        }
        let rmse = (sq / count as f64).sqrt();
        assert!(rmse < 1e-2, "rmse {rmse}");
    }

    #[test]
    fn strongly_nonlinear_pixel_prefers_small_u() {
        let m = random_endmembers(60, 3, 23).unwrap();
        let r = pnmm(&m, &[0.3, 0.3, 0.4], 2.0).unwrap();
        let model = SkHypeModel::new(m.matrix(), 1e-2, 1.0).unwrap();
        let p = model.pixel(&r).unwrap();
        let low = (1..=5)
            .map(|i| p.objective_at(0.1 * i as f64).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(low < p.objective_at(0.99).unwrap());
    }

    #[test]
    fn single_band_objective_has_closed_form() {
        // one band, one endmember: A = u m^2 + (1-u) + mu and, when r m > 0,
        // gamma = 0 and J(u) = r^2 / (2 A), monotone in u
        let mu = 0.1;
        for (m, r) in [(2.0, 1.0), (0.5, 1.0)] {
            let rows = DMatrix::from_element(1, 1, m);
            let res = minimize_ju(&rows, &[r], mu, 1.0).unwrap();
            let j = |u: f64| r * r / (2.0 * (u * m * m + (1.0 - u) + mu));
            let want = if j(U_MARGIN) < j(1.0 - U_MARGIN) {
                U_MARGIN
            } else {
                1.0 - U_MARGIN
            };
            assert!((res.u - want).abs() < 1e-4, "{} vs {want}", res.u);
            let p = SkHypeModel::new(&rows, mu, 1.0).unwrap();
            let j_num = p.pixel(&[r]).unwrap().objective_at(0.37).unwrap();
            assert!((j_num - j(0.37)).abs() < 1e-14);
        }
    }

    #[test]
    fn interior_minimum_matches_fine_grid() {
        let m = random_endmembers(30, 3, 24).unwrap();
        let r = gbm(&m, &[0.2, 0.5, 0.3]);
        let model = SkHypeModel::new(m.matrix(), 1e-2, 1.0).unwrap();
        let p = model.pixel(&r).unwrap();
        let res = p.minimize().unwrap();
        let grid_best = (1..1000)
            .map(|i| {
                let u = i as f64 / 1000.0;
                (u, p.objective_at(u).unwrap())
            })
            .fold((0.0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
        let j_star = p.objective_at(res.u).unwrap();
        assert!(j_star <= grid_best.1 + 1e-12);
    }

    fn gbm(m: &EndmemberMatrix, a: &[f64]) -> Vec<f64> {
        crate::mixing::gbm(m, a, 1.0).unwrap()
    }

    #[test]
    fn returned_u_is_a_local_minimum() {
        let m = random_endmembers(40, 4, 25).unwrap();
        let model = SkHypeModel::new(m.matrix(), 1e-2, 2.0).unwrap();
        let mut rng = stream_rng(26, 0);
        for _ in 0..10 {
            let alpha = sample_simplex(4, &mut rng);
            let r = gbm(&m, alpha.as_slice());
            let p = model.pixel(&r).unwrap();
            let res = p.minimize().unwrap();
            let j = p.objective_at(res.u).unwrap();
            for v in [res.u - 1e-3, res.u + 1e-3] {
                if (U_MARGIN..=1.0 - U_MARGIN).contains(&v) {
                    assert!(j <= p.objective_at(v).unwrap(), "u = {}", res.u);
                }
            }
        }
    }

    #[test]
    fn residuals_equal_scaled_multipliers() {
        let m = random_endmembers(50, 3, 27).unwrap();
        let model = SkHypeModel::new(m.matrix(), 1e-2, 1.0).unwrap();
        let mut rng = stream_rng(28, 0);
        for _ in 0..10 {
            let alpha = sample_simplex(3, &mut rng);
            let r = pnmm(&m, alpha.as_slice(), 0.7).unwrap();
            let res = model.pixel(&r).unwrap().minimize().unwrap();
            for (e, b) in res.residuals.iter().zip(res.beta.iter()) {
                assert!((e - 1e-2 * b).abs() <= 1e-9, "{e} vs {}", 1e-2 * b);
            }
            assert!(res.alpha.as_slice().iter().all(|&v| v >= 0.0));
            assert!((res.alpha.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn full_dictionary_equals_no_dictionary() {
        let m = random_endmembers(30, 3, 29).unwrap();
        let scene =
            crate::mixing::synth_scene(&m, 6, crate::mixing::MixingModel::Lmm, Some(30.0), 3)
                .unwrap();
        let all: Vec<usize> = (0..30).collect();
        let a = unmix_scene(&scene.pixels, &m, None, 1e-2, 1.0).unwrap();
        let b = unmix_scene(&scene.pixels, &m, Some(&all), 1e-2, 1.0).unwrap();
        assert_eq!(a.abundances(3), b.abundances(3));
        assert!(a.failures.is_empty());
    }

    #[test]
    fn reconstruction_on_fitted_bands_is_the_fit() {
        let m = random_endmembers(30, 3, 30).unwrap();
        let idx = [1, 5, 9, 14, 22];
        let r_full = gbm(&m, &[0.2, 0.3, 0.5]);
        let r: Vec<f64> = idx.iter().map(|&i| r_full[i]).collect();
        let res = minimize_ju(&m.select_bands(&idx), &r, 1e-2, 1.0).unwrap();
        let full = reconstruct(&m, &idx, &res.linear, &res.psi, 1.0).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert!((full[i] - (r[k] - res.residuals[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_dictionaries_are_rejected() {
        let m = random_endmembers(10, 2, 31).unwrap();
        let px = DMatrix::zeros(1, 10);
        assert!(matches!(
            unmix_scene(&px, &m, Some(&[10]), 1e-2, 1.0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            unmix_scene(&px, &m, Some(&[1, 1]), 1e-2, 1.0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            unmix_scene(&DMatrix::zeros(1, 9), &m, None, 1e-2, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn failing_pixels_are_collected() {
        let m = random_endmembers(10, 2, 32).unwrap();
        let mut px = DMatrix::from_fn(3, 10, |_, j| m.matrix()[(j, 0)]);
        px[(1, 4)] = f64::NAN;
        let out = unmix_scene(&px, &m, None, 1e-2, 1.0).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, 1);
        assert!(out.results[0].is_some() && out.results[1].is_none());
    }
}
