//! Least-squares fits on the decreasing I-spline basis, used for chain
//! initialization and as the coefficient proposal of the knot sampler.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ispline::{decreasing_basis, KnotSequence};
use crate::normal::LN_2PI;
use crate::{Error, Result};

/// Ridge added to `XᵀX` so the normal equations are always solvable.
pub const LS_RIDGE: f64 = 1e-8;

/// Rows are `(1 − I_j(m_i))_j`.
pub fn design_matrix(knots: &KnotSequence, m: &[f64]) -> DMatrix<f64> {
    let b = knots.n_basis();
    let mut x = DMatrix::zeros(m.len(), b);
    for (i, &mi) in m.iter().enumerate() {
        for (j, v) in decreasing_basis(mi, knots).into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    x
}

/// Ordinary least-squares coefficients with covariance `σ_d² (XᵀX + εI)⁻¹`.
#[derive(Debug, Clone)]
pub struct LsFit {
    pub coeffs: DVector<f64>,
    sigma_d: f64,
    // Cholesky factor of the precision-shaped matrix XᵀX + εI.
    chol: Cholesky<f64, Dyn>,
}

impl LsFit {
    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn cov(&self) -> DMatrix<f64> {
        self.chol.inverse() * (self.sigma_d * self.sigma_d)
    }

    /// Draw from `N(coeffs, cov)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        // cov = σ² L⁻ᵀ L⁻¹, so L⁻ᵀ z has covariance (L Lᵀ)⁻¹.
        let w = self
            .chol
            .l_dirty()
            .tr_solve_lower_triangular(&z)
            .unwrap_or_else(|| DVector::zeros(self.dim()));
        &self.coeffs + w * self.sigma_d
    }

    /// Multivariate normal log density at `beta`.
    pub fn ln_density(&self, beta: &[f64]) -> f64 {
        let b = self.dim();
        let l = self.chol.l();
        let diff = DVector::from_column_slice(beta) - &self.coeffs;
        let u = l.transpose() * diff;
        let ln_det_l: f64 = (0..b).map(|i| l[(i, i)].ln()).sum();
        -0.5 * b as f64 * LN_2PI - b as f64 * self.sigma_d.ln() + ln_det_l
            - 0.5 * u.norm_squared() / (self.sigma_d * self.sigma_d)
    }

    /// Random-walk proposal around `center` with covariance `scale² · cov`.
    pub fn perturb<R: Rng + ?Sized>(&self, center: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = self
            .chol
            .l_dirty()
            .tr_solve_lower_triangular(&z)
            .unwrap_or_else(|| DVector::zeros(self.dim()));
        center.iter().zip(w.iter()).map(|(c, wi)| c + scale * self.sigma_d * wi).collect()
    }
}

/// Regress `y` on the decreasing basis evaluated at `m`.
pub fn ls_fit(knots: &KnotSequence, m: &[f64], y: &[f64], sigma_d: f64) -> Result<LsFit> {
    let b = knots.n_basis();
    if m.len() != y.len() {
        return Err(Error::Contract(format!("{} MIC values but {} DIA values", m.len(), y.len())));
    }
    if m.len() < b {
        return Err(Error::Contract(format!("least squares needs at least {b} points, got {}", m.len())));
    }
    let x = design_matrix(knots, m);
    let xty = x.tr_mul(&DVector::from_column_slice(y));
    let mut xtx = x.tr_mul(&x);
    let mut ridge = LS_RIDGE;
    loop {
        let mut a = xtx.clone();
        for i in 0..b {
            a[(i, i)] += ridge;
        }
        if let Some(chol) = a.cholesky() {
            let coeffs = chol.solve(&xty);
            if coeffs.iter().all(|c| c.is_finite()) {
                return Ok(LsFit { coeffs, sigma_d, chol });
            }
        }
        // Rounding can leave a numerically indefinite matrix; grow the ridge.
        ridge *= 100.0;
        if ridge > 1e2 {
            return Err(Error::Numerical("least-squares normal equations are singular".into()));
        }
        xtx = x.tr_mul(&x);
    }
}

/// Non-negative least squares, `min ‖Ax − b‖` subject to `x ≥ 0`
/// (Lawson–Hanson active set).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let tol = 1e-10 * a.norm().max(1.0);
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let mut z = DVector::zeros(n);
        if idx.is_empty() {
            return z;
        }
        let ap = a.select_columns(&idx);
        let mut normal = ap.tr_mul(&ap);
        for i in 0..idx.len() {
            normal[(i, i)] += 1e-12;
        }
        let rhs = ap.tr_mul(b);
        let sol = normal
            .cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| ap.clone().svd(true, true).solve(b, 1e-12).unwrap_or(DVector::zeros(idx.len())));
        for (k, &j) in idx.iter().enumerate() {
            z[j] = sol[k];
        }
        z
    };

    for _ in 0..max_outer {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;

        for _ in 0..max_outer {
            let z = solve_passive(&passive);
            if (0..n).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                x = z;
                break;
            }
            let mut step = f64::INFINITY;
            for j in 0..n {
                if passive[j] && z[j] <= 0.0 {
                    step = step.min(x[j] / (x[j] - z[j]));
                }
            }
            x += (z - &x) * step;
            for j in 0..n {
                if passive[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    x
}
