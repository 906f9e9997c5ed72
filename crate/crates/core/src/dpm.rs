//! Dirichlet process mixture of Normals for the true-MIC distribution.
//!
//! Assignments are updated with Neal's auxiliary-component sampler
//! (Algorithm 8), cluster parameters by their exact full conditionals under
//! the independent Normal × inverse-gamma base measure, and the concentration
//! by a bounded uniform random walk.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::normal::ln_normal;

/// Base measure and concentration prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpmPrior {
    pub mu_mean: f64,
    pub mu_var: f64,
    /// Inverse-gamma shape for σ².
    pub sigma2_shape: f64,
    /// Inverse-gamma scale for σ².
    pub sigma2_scale: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Half-width of the uniform proposal for α.
    pub alpha_step: f64,
    pub n_aux: usize,
}

impl Default for DpmPrior {
    fn default() -> Self {
        Self {
            mu_mean: 0.0,
            mu_var: 100.0,
            sigma2_shape: 0.01,
            sigma2_scale: 0.01,
            alpha_min: 0.2,
            alpha_max: 2.0,
            alpha_step: 0.2,
            n_aux: 3,
        }
    }
}

const SIGMA2_MIN: f64 = 1e-12;
const SIGMA2_MAX: f64 = 1e300;

impl DpmPrior {
    /// One `(μ, σ²)` draw from the base measure.
    pub fn draw_g0<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let mu = self.mu_mean + self.mu_var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        (mu, draw_inv_gamma(self.sigma2_shape, self.sigma2_scale, rng))
    }

    /// Unnormalized log posterior of α given `k` clusters among `n` points.
    pub fn ln_alpha_target(&self, alpha: f64, k: usize, n: usize) -> f64 {
        if alpha < self.alpha_min || alpha > self.alpha_max {
            return f64::NEG_INFINITY;
        }
        k as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(alpha + n as f64)
    }
}

fn draw_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    (scale / g.max(f64::MIN_POSITIVE)).clamp(SIGMA2_MIN, SIGMA2_MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mu: f64,
    pub sigma2: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpmState {
    z: Vec<usize>,
    clusters: Vec<Cluster>,
    alpha: f64,
}

impl DpmState {
    /// Every point in one cluster.
    pub fn single_cluster(n: usize, mu: f64, sigma2: f64, alpha: f64) -> Self {
        assert!(n > 0, "a mixture needs at least one point");
        Self {
            z: vec![0; n],
            clusters: vec![Cluster { mu, sigma2: sigma2.clamp(SIGMA2_MIN, SIGMA2_MAX), size: n }],
            alpha,
        }
    }

    /// Build from explicit assignments; cluster ids must be `0..clusters.len()`
    /// and every cluster must be occupied. Sizes are recomputed.
    pub fn from_parts(z: Vec<usize>, params: Vec<(f64, f64)>, alpha: f64) -> Self {
        let mut clusters: Vec<Cluster> =
            params.into_iter().map(|(mu, sigma2)| Cluster { mu, sigma2, size: 0 }).collect();
        for &c in &z {
            clusters[c].size += 1;
        }
        assert!(clusters.iter().all(|c| c.size > 0), "empty cluster");
        Self { z, clusters, alpha }
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn assignments(&self) -> &[usize] {
        &self.z
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    pub fn cluster_of(&self, i: usize) -> &Cluster {
        &self.clusters[self.z[i]]
    }

    /// ln N(m; μ, σ²) under point `i`'s current cluster.
    #[inline]
    pub fn ln_conditional(&self, i: usize, m: f64) -> f64 {
        let c = self.cluster_of(i);
        ln_normal(m, c.mu, c.sigma2)
    }

    /// Structural invariants; used by tests.
    pub fn is_consistent(&self) -> bool {
        let mut sizes = vec![0usize; self.clusters.len()];
        for &c in &self.z {
            if c >= sizes.len() {
                return false;
            }
            sizes[c] += 1;
        }
        self.clusters
            .iter()
            .zip(&sizes)
            .all(|(c, &s)| c.size == s && s > 0 && c.sigma2 > 0.0 && c.sigma2.is_finite())
    }

    /// One full sweep: reassign every point, then redraw cluster parameters.
    /// With `use_data = false` the positions are ignored, so the chain targets
    /// the prior partition and base measure.
    pub fn sweep<R: Rng + ?Sized>(&mut self, m: &[f64], prior: &DpmPrior, use_data: bool, rng: &mut R) {
        assert_eq!(m.len(), self.z.len(), "one latent value per assignment");
        self.update_assignments(m, prior, use_data, rng);
        self.update_params(m, prior, use_data, rng);
    }

    pub fn update_assignments<R: Rng + ?Sized>(
        &mut self,
        m: &[f64],
        prior: &DpmPrior,
        use_data: bool,
        rng: &mut R,
    ) {
        let n_aux = prior.n_aux.max(1);
        let ln_aux_weight = (self.alpha / n_aux as f64).ln();
        let mut aux = vec![(0.0, 1.0); n_aux];
        let mut logw = Vec::with_capacity(self.clusters.len() + n_aux);

        for i in 0..self.z.len() {
            let c = self.z[i];
            self.clusters[c].size -= 1;
            let singleton = self.clusters[c].size == 0;
            for (j, a) in aux.iter_mut().enumerate() {
                *a = if singleton && j == 0 {
                    (self.clusters[c].mu, self.clusters[c].sigma2)
                } else {
                    prior.draw_g0(rng)
                };
            }

            logw.clear();
            for cl in &self.clusters {
                if cl.size == 0 {
                    logw.push(f64::NEG_INFINITY);
                } else {
                    let lik = if use_data { ln_normal(m[i], cl.mu, cl.sigma2) } else { 0.0 };
                    logw.push((cl.size as f64).ln() + lik);
                }
            }
            for &(mu, s2) in &aux {
                let lik = if use_data { ln_normal(m[i], mu, s2) } else { 0.0 };
                logw.push(ln_aux_weight + lik);
            }
            let pick = sample_log_weights(&logw, rng);

            if pick < self.clusters.len() {
                self.clusters[pick].size += 1;
                self.z[i] = pick;
                if singleton {
                    self.remove_cluster(c);
                }
            } else {
                let (mu, sigma2) = aux[pick - self.clusters.len()];
                if singleton {
                    self.clusters[c] = Cluster { mu, sigma2, size: 1 };
                } else {
                    self.clusters.push(Cluster { mu, sigma2, size: 1 });
                    self.z[i] = self.clusters.len() - 1;
                }
            }
        }
    }

    fn remove_cluster(&mut self, c: usize) {
        let last = self.clusters.len() - 1;
        self.clusters.swap_remove(c);
        if c != last {
            for zi in self.z.iter_mut() {
                if *zi == last {
                    *zi = c;
                }
            }
        }
    }

    /// Exact Gibbs draws: μ | σ², data is Normal and σ² | μ, data is
    /// inverse-gamma under the independent base measure.
    pub fn update_params<R: Rng + ?Sized>(&mut self, m: &[f64], prior: &DpmPrior, use_data: bool, rng: &mut R) {
        if !use_data {
            for c in self.clusters.iter_mut() {
                let (mu, s2) = prior.draw_g0(rng);
                c.mu = mu;
                c.sigma2 = s2;
            }
            return;
        }
        let k = self.clusters.len();
        let mut sum = vec![0.0; k];
        for (&c, &mi) in self.z.iter().zip(m) {
            sum[c] += mi;
        }
        for (c, cl) in self.clusters.iter_mut().enumerate() {
            let n = cl.size as f64;
            let prec = 1.0 / prior.mu_var + n / cl.sigma2;
            let mean = (prior.mu_mean / prior.mu_var + sum[c] / cl.sigma2) / prec;
            cl.mu = Normal::new(mean, prec.recip().sqrt()).expect("finite variance").sample(rng);
        }
        let mut ss = vec![0.0; k];
        for (&c, &mi) in self.z.iter().zip(m) {
            let d = mi - self.clusters[c].mu;
            ss[c] += d * d;
        }
        for (c, cl) in self.clusters.iter_mut().enumerate() {
            let shape = prior.sigma2_shape + 0.5 * cl.size as f64;
            let scale = prior.sigma2_scale + 0.5 * ss[c];
            cl.sigma2 = draw_inv_gamma(shape, scale, rng);
        }
    }

    /// Metropolis step on α. Returns whether the proposal was accepted.
    pub fn update_alpha<R: Rng + ?Sized>(&mut self, prior: &DpmPrior, rng: &mut R) -> bool {
        let proposal = self.alpha + rng.random_range(-prior.alpha_step..prior.alpha_step);
        self.accept_alpha(proposal, prior, rng)
    }

    /// Accept or reject a specific α proposal.
    pub fn accept_alpha<R: Rng + ?Sized>(&mut self, proposal: f64, prior: &DpmPrior, rng: &mut R) -> bool {
        let (k, n) = (self.n_clusters(), self.n());
        let ln_ratio = prior.ln_alpha_target(proposal, k, n) - prior.ln_alpha_target(self.alpha, k, n);
        if ln_ratio == f64::NEG_INFINITY {
            return false;
        }
        if ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio {
            self.alpha = proposal;
            true
        } else {
            false
        }
    }

    /// Mixture density on `grid`, including the weight `α/(N+α)` of a new
    /// component, whose predictive is approximated by averaging Normals at
    /// the supplied base-measure draws.
    pub fn density_on_grid(&self, grid: &[f64], g0_draws: &[(f64, f64)]) -> Vec<f64> {
        let n = self.n() as f64;
        let denom = n + self.alpha;
        let new_w = if g0_draws.is_empty() { 0.0 } else { self.alpha / denom / g0_draws.len() as f64 };
        grid.iter()
            .map(|&u| {
                let mut f = 0.0;
                for c in &self.clusters {
                    f += c.size as f64 / denom * ln_normal(u, c.mu, c.sigma2).exp();
                }
                for &(mu, s2) in g0_draws {
                    f += new_w * ln_normal(u, mu, s2).exp();
                }
                f
            })
            .collect()
    }
}

/// Index drawn with probability proportional to `exp(logw)`.
pub(crate) fn sample_log_weights<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> usize {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logw.iter().map(|&l| (l - max).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (j, &l) in logw.iter().enumerate() {
        let w = (l - max).exp();
        if w > 0.0 {
            last = j;
            if u < w {
                return j;
            }
            u -= w;
        }
    }
    last
}

/// Posterior density draws for directly observed values: `sweeps` Gibbs
/// sweeps from a single-cluster start, keeping every `thin`-th draw after
/// `burn_in`. Each row is the mixture density on `grid`.
pub fn sample_density<R: Rng + ?Sized>(
    values: &[f64],
    prior: &DpmPrior,
    sweeps: usize,
    burn_in: usize,
    thin: usize,
    grid: &[f64],
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut state = DpmState::single_cluster(values.len(), mean, var.max(1e-6), 1.0);
    let thin = thin.max(1);
    let mut rows = Vec::new();
    for it in 0..sweeps {
        state.sweep(values, prior, true, rng);
        state.update_alpha(prior, rng);
        if it >= burn_in && (it - burn_in).is_multiple_of(thin) {
            let draws: Vec<(f64, f64)> = (0..50).map(|_| prior.draw_g0(rng)).collect();
            rows.push(state.density_on_grid(grid, &draws));
        }
    }
    rows
}
