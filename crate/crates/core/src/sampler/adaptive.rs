//! Adaptive multivariate-normal random-walk proposal.
//!
//! Before `adapt_start` the covariance is `0.2·I`; from then on it is the
//! sample covariance of the last `window` accepted states, recomputed every
//! [`RECOMPUTE_EVERY`] iterations. A global log-scale is tuned toward
//! [`TARGET_ACCEPT`] by a Robbins–Monro recursion. All adaptation stops at the
//! end of burn-in, so retained draws come from a fixed kernel.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub const INITIAL_VARIANCE: f64 = 0.2;
pub const TARGET_ACCEPT: f64 = 0.234;
pub const RECOMPUTE_EVERY: usize = 100;
const JITTER: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    dim: usize,
    adapt_start: usize,
    stop_at: usize,
    history: VecDeque<Vec<f64>>,
    window: usize,
    // Lower Cholesky factor of the unscaled covariance.
    chol: DMatrix<f64>,
    log_scale: f64,
    empirical: bool,
}

impl AdaptiveProposal {
    /// `stop_at` is the first iteration with adaptation frozen (the burn-in).
    pub fn new(dim: usize, adapt_start: usize, window: usize, stop_at: usize) -> Self {
        Self {
            dim,
            adapt_start,
            stop_at,
            history: VecDeque::with_capacity(window),
            window: window.max(2),
            chol: DMatrix::identity(dim, dim) * INITIAL_VARIANCE.sqrt(),
            log_scale: 0.0,
            empirical: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn uses_empirical_covariance(&self) -> bool {
        self.empirical
    }

    pub fn propose<R: Rng + ?Sized>(&self, current: &[f64], rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &self.chol * z * self.scale();
        current.iter().zip(step.iter()).map(|(c, s)| c + s).collect()
    }

    /// Record the chain state after iteration `iteration` and whether the
    /// proposal was accepted.
    pub fn record(&mut self, iteration: usize, state: &[f64], accepted: bool) {
        if iteration >= self.stop_at {
            return;
        }
        if accepted {
            if self.history.len() == self.window {
                self.history.pop_front();
            }
            self.history.push_back(state.to_vec());
        }

        let gain = ((iteration + 1) as f64).powf(-0.6);
        self.log_scale += gain * (if accepted { 1.0 } else { 0.0 } - TARGET_ACCEPT);
        self.log_scale = self.log_scale.clamp(-15.0, 5.0);

        let next = iteration + 1;
        if next >= self.adapt_start && (next - self.adapt_start).is_multiple_of(RECOMPUTE_EVERY) && next < self.stop_at {
            if let Some(chol) = self.empirical_factor() {
                self.chol = chol;
                if !self.empirical {
                    self.log_scale = (2.38 / (self.dim as f64).sqrt()).ln();
                    self.empirical = true;
                }
            }
        }
    }

    fn empirical_factor(&self) -> Option<DMatrix<f64>> {
        let n = self.history.len();
        if n < 2 {
            return None;
        }
        let d = self.dim;
        let mut mean = DVector::zeros(d);
        for h in &self.history {
            mean += DVector::from_column_slice(h);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for h in &self.history {
            let x = DVector::from_column_slice(h) - &mean;
            cov.syger(1.0, &x, &x, 1.0);
        }
        cov /= (n - 1) as f64;
        cov.fill_upper_triangle_with_lower_triangle();
        for i in 0..d {
            cov[(i, i)] += JITTER;
        }
        cov.cholesky().map(|c| c.l())
    }
}
