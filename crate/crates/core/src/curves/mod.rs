//! Monotone decreasing MIC → DIA relationships.

mod ispline;
mod lsfit;

pub use ispline::{
    decreasing_basis, ispline_basis, mspline_basis, ISplineCurve, KnotSequence, MSPLINE_ORDER,
};
pub use lsfit::{design_matrix, ls_fit, nnls, LsFit, LS_RIDGE};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance for the monotonicity check.
pub const MONOTONE_TOL: f64 = 1e-9;

/// Asymmetric (five-parameter style) logistic curve, oriented to decrease in
/// `m`: `β1` is the upper asymptote in mm, `β2` the inflection on the log2
/// MIC scale, `β3`/`β4` the right/left rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic4 {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl Logistic4 {
    pub fn new(beta1: f64, beta2: f64, beta3: f64, beta4: f64) -> Result<Self> {
        if !(beta1 > 0.0 && beta3 > 0.0 && beta4 > 0.0) || !beta2.is_finite() {
            return Err(Error::Validation(format!(
                "logistic parameters must satisfy β1, β3, β4 > 0 (got {beta1}, {beta2}, {beta3}, {beta4})"
            )));
        }
        if ![beta1, beta3, beta4].iter().all(|b| b.is_finite()) {
            return Err(Error::Validation("logistic parameters must be finite".into()));
        }
        Ok(Self { beta1, beta2, beta3, beta4 })
    }

    /// Three-parameter logistic, `β3 = β4`.
    pub fn symmetric(beta1: f64, beta2: f64, rate: f64) -> Result<Self> {
        Self::new(beta1, beta2, rate, rate)
    }

    /// Rate of the mixing weight: `2 β3 β4 / (β3 + β4)`.
    pub fn beta_star(&self) -> f64 {
        2.0 * self.beta3 * self.beta4 / (self.beta3 + self.beta4)
    }

    pub fn eval(&self, m: f64) -> f64 {
        let u = m - self.beta2;
        // g = β1 S / (1 + S), S = w e^{-β3 u} + (1 − w) e^{-β4 u},
        // w = 1 / (1 + e^{-β* u}). Work with ln S to avoid overflow.
        let bs = self.beta_star();
        let ln_w = -softplus(-bs * u);
        let ln_1mw = -softplus(bs * u);
        let ln_s = log_add_exp(ln_w - self.beta3 * u, ln_1mw - self.beta4 * u);
        self.beta1 / (1.0 + (-ln_s).exp())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.beta1, self.beta2, self.beta3, self.beta4]
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Straight line `intercept + slope·m` with `slope ≤ 0`. Used for simulation
/// truths, never fitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearCurve {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearCurve {
    pub fn new(intercept: f64, slope: f64) -> Result<Self> {
        if !(slope <= 0.0) || !intercept.is_finite() {
            return Err(Error::Validation(format!("linear truth must be non-increasing, slope={slope}")));
        }
        Ok(Self { intercept, slope })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveRepr", into = "CurveRepr")]
pub enum CurveModel {
    Logistic4(Logistic4),
    ISpline(ISplineCurve),
    Linear(LinearCurve),
}

impl CurveModel {
    #[inline]
    pub fn eval(&self, m: f64) -> f64 {
        match self {
            CurveModel::Logistic4(c) => c.eval(m),
            CurveModel::ISpline(c) => c.eval(m),
            CurveModel::Linear(c) => c.intercept + c.slope * m,
        }
    }

    pub fn eval_grid(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&m| self.eval(m)).collect()
    }

    /// Number of interior knots for spline curves.
    pub fn n_knots(&self) -> Option<usize> {
        match self {
            CurveModel::ISpline(c) => Some(c.knots().n_interior()),
            _ => None,
        }
    }
}

pub fn eval_curve(g: &CurveModel, m: f64) -> f64 {
    g.eval(m)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum CurveRepr {
    Logistic4 { beta: [f64; 4] },
    Ispline { interior_knots: Vec<f64>, boundary: [f64; 2], coeffs: Vec<f64> },
    Linear { intercept: f64, slope: f64 },
}

impl TryFrom<CurveRepr> for CurveModel {
    type Error = Error;

    fn try_from(r: CurveRepr) -> Result<Self> {
        Ok(match r {
            CurveRepr::Logistic4 { beta } => {
                CurveModel::Logistic4(Logistic4::new(beta[0], beta[1], beta[2], beta[3])?)
            }
            CurveRepr::Ispline { interior_knots, boundary, coeffs } => {
                let knots = KnotSequence::new(boundary[0], interior_knots, boundary[1])?;
                CurveModel::ISpline(ISplineCurve::new(knots, coeffs)?)
            }
            CurveRepr::Linear { intercept, slope } => {
                CurveModel::Linear(LinearCurve::new(intercept, slope)?)
            }
        })
    }
}

impl From<CurveModel> for CurveRepr {
    fn from(c: CurveModel) -> Self {
        match c {
            CurveModel::Logistic4(l) => CurveRepr::Logistic4 { beta: l.as_array() },
            CurveModel::ISpline(s) => CurveRepr::Ispline {
                interior_knots: s.knots().interior().to_vec(),
                boundary: [s.knots().lo(), s.knots().hi()],
                coeffs: s.coeffs().to_vec(),
            },
            CurveModel::Linear(l) => CurveRepr::Linear { intercept: l.intercept, slope: l.slope },
        }
    }
}

/// True iff consecutive values never increase by more than [`MONOTONE_TOL`].
pub fn is_non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + MONOTONE_TOL)
}

pub fn check_monotone_decreasing(g: &CurveModel, grid: &[f64]) -> bool {
    let mut prev = f64::INFINITY;
    for &m in grid {
        let v = g.eval(m);
        if !(v <= prev + MONOTONE_TOL) {
            return false;
        }
        prev = v;
    }
    true
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n).map(|i| if i == n - 1 { hi } else { lo + step * i as f64 }).collect()
        }
    }
}
