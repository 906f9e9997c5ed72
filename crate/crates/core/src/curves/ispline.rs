//! Monotone spline bases.
//!
//! M-splines of order 3 are piecewise quadratic densities on the knot
//! sequence `t = (lo, lo, lo, t_1, …, t_k, hi, hi, hi)`; I-splines are their
//! running integrals and therefore piecewise cubic, non-decreasing, 0 at `lo`
//! and 1 at `hi`. There are `B = k + 3` of each.
//!
//! [`mspline_basis`] follows the M-spline recursion directly. I-splines are
//! evaluated through the identity `I_i(x) = Σ_{j > i} N_j(x)`, where `N_j` are
//! order-4 B-splines on the same breakpoints with boundary multiplicity 4.
//! The two routes are independent, which the derivative tests exploit.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Order of the M-splines; the I-splines have degree `MSPLINE_ORDER`.
pub const MSPLINE_ORDER: usize = 3;
const BSPLINE_DEGREE: usize = MSPLINE_ORDER;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSequence {
    lo: f64,
    hi: f64,
    interior: Vec<f64>,
}

impl KnotSequence {
    pub fn new(lo: f64, interior: Vec<f64>, hi: f64) -> Result<Self> {
        if interior.is_empty() {
            return Err(Error::Validation("at least one interior knot is required".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Validation(format!("invalid boundary knots [{lo}, {hi}]")));
        }
        let mut prev = lo;
        for &t in interior.iter().chain(std::iter::once(&hi)) {
            if !(t > prev) {
                return Err(Error::Validation(format!(
                    "knots must be strictly increasing inside ({lo}, {hi}); got {interior:?}"
                )));
            }
            prev = t;
        }
        Ok(Self { lo, hi, interior })
    }

    /// Boundary knots half a dilution outside the observed MIC range.
    pub fn observed_boundaries(min_mic: i32, max_mic: i32) -> (f64, f64) {
        (min_mic as f64 - 0.5, max_mic as f64 + 0.5)
    }

    /// Interior knots every `spacing` units strictly inside `(lo, hi)`.
    pub fn equally_spaced(lo: f64, hi: f64, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::Validation(format!("knot spacing must be positive, got {spacing}")));
        }
        let n = ((hi - lo) / spacing).round() as i64;
        let interior: Vec<f64> = (1..n)
            .map(|i| lo + i as f64 * spacing)
            .filter(|&t| t > lo + 1e-9 && t < hi - 1e-9)
            .collect();
        Self::new(lo, interior, hi)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    /// Number of interior knots, k.
    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    /// Number of basis functions, B = k + 3.
    pub fn n_basis(&self) -> usize {
        self.interior.len() + MSPLINE_ORDER
    }

    /// Knot vector with each boundary repeated `mult` times.
    pub fn extended(&self, mult: usize) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.interior.len() + 2 * mult);
        t.extend(std::iter::repeat_n(self.lo, mult));
        t.extend_from_slice(&self.interior);
        t.extend(std::iter::repeat_n(self.hi, mult));
        t
    }

    /// Position of `x` relative to the knots, used by the B-spline evaluator:
    /// the index `s` in the multiplicity-4 knot vector with `τ_s ≤ x < τ_{s+1}`.
    fn span(&self, x: f64) -> usize {
        // τ = (lo×4, interior, hi×4); τ_{3+j} = interior[j-1] for j in 1..=k.
        let k = self.interior.len();
        let j = self.interior.partition_point(|&t| t <= x);
        (BSPLINE_DEGREE + j).min(BSPLINE_DEGREE + k)
    }
}

/// Nonzero cubic B-splines at `x` in span `s`: values of `N_{s-3..=s}`.
fn cubic_bspline_values(tau: &[f64], s: usize, x: f64) -> [f64; BSPLINE_DEGREE + 1] {
    let p = BSPLINE_DEGREE;
    let mut n = [0.0; BSPLINE_DEGREE + 1];
    let mut left = [0.0; BSPLINE_DEGREE + 1];
    let mut right = [0.0; BSPLINE_DEGREE + 1];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = x - tau[s + 1 - j];
        right[j] = tau[s + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// I-spline basis `(I_1(x), …, I_B(x))`; `x` is clamped to `[lo, hi]`.
pub fn ispline_basis(x: f64, knots: &KnotSequence) -> Vec<f64> {
    let b = knots.n_basis();
    let x = x.clamp(knots.lo, knots.hi);
    if x <= knots.lo {
        return vec![0.0; b];
    }
    if x >= knots.hi {
        return vec![1.0; b];
    }
    let tau = knots.extended(BSPLINE_DEGREE + 1);
    let s = knots.span(x);
    let nvals = cubic_bspline_values(&tau, s, x);
    let first = s - BSPLINE_DEGREE;
    (0..b)
        .map(|i| {
            if i < first {
                1.0
            } else if i + 1 > s {
                0.0
            } else {
                nvals[(i + 1 - first)..].iter().sum::<f64>().clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Decreasing basis `1 − I_j(x)` used by the curve.
pub fn decreasing_basis(x: f64, knots: &KnotSequence) -> Vec<f64> {
    ispline_basis(x, knots).into_iter().map(|v| 1.0 - v).collect()
}

/// Order-3 M-spline basis `(M_1(x), …, M_B(x))` by the M-spline recursion.
/// Zero outside `[lo, hi]`.
pub fn mspline_basis(x: f64, knots: &KnotSequence) -> Vec<f64> {
    let b = knots.n_basis();
    if x < knots.lo || x > knots.hi {
        return vec![0.0; b];
    }
    let t = knots.extended(MSPLINE_ORDER);
    let n1 = t.len() - 1;
    // Order 1: indicator of the containing interval scaled to unit mass. The
    // right boundary belongs to the last non-empty interval.
    let mut m: Vec<f64> = (0..n1)
        .map(|i| {
            let (a, c) = (t[i], t[i + 1]);
            let inside = a < c && ((a <= x && x < c) || (x == knots.hi && c == knots.hi));
            if inside {
                1.0 / (c - a)
            } else {
                0.0
            }
        })
        .collect();
    for order in 2..=MSPLINE_ORDER {
        let kf = order as f64;
        let next: Vec<f64> = (0..t.len() - order)
            .map(|i| {
                let width = t[i + order] - t[i];
                if width <= 0.0 {
                    return 0.0;
                }
                kf * ((x - t[i]) * m[i] + (t[i + order] - x) * m[i + 1]) / ((kf - 1.0) * width)
            })
            .collect();
        m = next;
    }
    debug_assert_eq!(m.len(), b);
    m
}

/// `g(m) = Σ_j β_j (1 − I_j(m))`: equal to `Σ β` at the left boundary and 0
/// at the right boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ISplineCurve {
    knots: KnotSequence,
    coeffs: Vec<f64>,
    tau: Vec<f64>,
    // suffix[i] = Σ_{j ≥ i} β_j, length B + 1
    suffix: Vec<f64>,
}

impl ISplineCurve {
    pub fn new(knots: KnotSequence, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != knots.n_basis() {
            return Err(Error::Validation(format!(
                "{} interior knots need {} coefficients, got {}",
                knots.n_interior(),
                knots.n_basis(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("spline coefficients must be finite".into()));
        }
        let mut suffix = vec![0.0; coeffs.len() + 1];
        for i in (0..coeffs.len()).rev() {
            suffix[i] = suffix[i + 1] + coeffs[i];
        }
        let tau = knots.extended(BSPLINE_DEGREE + 1);
        Ok(Self { knots, coeffs, tau, suffix })
    }

    pub fn knots(&self) -> &KnotSequence {
        &self.knots
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.knots.lo {
            return self.suffix[0];
        }
        if x >= self.knots.hi {
            return 0.0;
        }
        let s = self.knots.span(x);
        let n = cubic_bspline_values(&self.tau, s, x);
        let first = s - BSPLINE_DEGREE;
        // For first ≤ i < s, 1 − I_i(x) = Σ_{j=first}^{i} N_j(x).
        let mut acc = self.suffix[s];
        let mut partial = 0.0;
        for (r, i) in (first..s).enumerate() {
            partial += n[r];
            acc += self.coeffs[i] * partial;
        }
        acc
    }
}
