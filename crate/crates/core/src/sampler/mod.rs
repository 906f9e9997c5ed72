//! MCMC for the joint posterior of latent MICs, the curve, its smoothing or
//! knot parameters and the DPM density.
//!
//! Normal "second arguments" are variances throughout: the latent-MIC
//! proposal `N(m, 0.5)` has variance 0.5 and the random-walk coefficient
//! prior `N(log β_j, λ)` has variance λ.

mod adaptive;
mod chain;

pub use adaptive::{AdaptiveProposal, INITIAL_VARIANCE, TARGET_ACCEPT};
pub use chain::{ChainState, CurveParams, Sampler};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{is_non_increasing, CurveModel};
use crate::data::AssayDataset;
use crate::stats::column_quantiles;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Asymmetric logistic curve.
    Logistic4,
    /// I-spline with knots every 0.5 and a random-walk coefficient prior.
    SplineRw,
    /// I-spline with free knots (reversible jump).
    SplineRj,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Logistic4, ModelKind::SplineRw, ModelKind::SplineRj];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Logistic4 => "logistic4",
            ModelKind::SplineRw => "spline_rw",
            ModelKind::SplineRj => "spline_rj",
        }
    }

    /// Censored readings are modelled only by the parametric curve, which can
    /// extrapolate beyond the tested range.
    pub fn models_censoring(self) -> bool {
        self == ModelKind::Logistic4
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "logistic4" | "logistic" => Ok(ModelKind::Logistic4),
            "spline_rw" => Ok(ModelKind::SplineRw),
            "spline_rj" => Ok(ModelKind::SplineRj),
            other => Err(Error::Validation(format!(
                "unknown model '{other}' (expected logistic4, spline-rw or spline-rj)"
            ))),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_kmax() -> usize {
    20
}

fn default_spacing() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub model: ModelKind,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub adapt_start: usize,
    pub adapt_window: usize,
    /// Upper bound on the number of interior knots (reversible jump only).
    #[serde(default = "default_kmax")]
    pub kmax: usize,
    /// Interior knot spacing for the fixed-knot spline.
    #[serde(default = "default_spacing")]
    pub knot_spacing: f64,
    /// When false the assay likelihood is dropped and the chain samples the
    /// prior; used to validate the update kernels.
    #[serde(default = "default_true")]
    pub likelihood_enabled: bool,
}

impl SamplerConfig {
    pub fn new(model: ModelKind, seed: u64) -> Self {
        Self {
            model,
            iterations: 12_000,
            burn_in: 6_000,
            thin: 10,
            seed,
            grid_points: 1_000,
            adapt_start: 1_000,
            adapt_window: 500,
            kmax: default_kmax(),
            knot_spacing: default_spacing(),
            likelihood_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.burn_in >= self.iterations {
            return fail(format!("burn-in {} must be below iterations {}", self.burn_in, self.iterations));
        }
        if self.thin == 0 {
            return fail("thin must be at least 1".into());
        }
        if self.grid_points < 100 {
            return fail(format!("grid needs at least 100 points, got {}", self.grid_points));
        }
        if self.adapt_window < 2 {
            return fail("adaptation window must hold at least 2 states".into());
        }
        if self.kmax == 0 {
            return fail("kmax must be at least 1".into());
        }
        if !(self.knot_spacing > 0.0) {
            return fail("knot spacing must be positive".into());
        }
        Ok(())
    }

    /// Number of snapshots a complete run keeps.
    pub fn n_retained(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub curve: CurveModel,
    pub lambda: Option<f64>,
    pub n_knots: Option<usize>,
    pub alpha: f64,
    pub n_clusters: usize,
    /// Curve on the trace grid.
    pub g: Vec<f64>,
    /// Density on the trace grid.
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateCounter {
    pub proposed: u64,
    pub accepted: u64,
}

impl RateCounter {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

/// Acceptance counters per update type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub latent_mic: RateCounter,
    pub curve: RateCounter,
    pub lambda: RateCounter,
    pub birth: RateCounter,
    pub death: RateCounter,
    pub relocate: RateCounter,
    pub alpha: RateCounter,
}

impl AcceptanceRates {
    pub fn named(&self) -> Vec<(&'static str, RateCounter)> {
        vec![
            ("latent_mic", self.latent_mic),
            ("curve", self.curve),
            ("lambda", self.lambda),
            ("birth", self.birth),
            ("death", self.death),
            ("move", self.relocate),
            ("alpha", self.alpha),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub model: ModelKind,
    pub grid: Vec<f64>,
    pub samples: Vec<TraceSample>,
    pub acceptance: AcceptanceRates,
}

impl ChainTrace {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Row-major `samples × grid` matrix of curve values.
    pub fn g_matrix(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.g.iter().copied()).collect()
    }

    pub fn f_matrix(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.f.iter().copied()).collect()
    }

    pub fn all_curves_monotone(&self) -> bool {
        self.samples.iter().all(|s| is_non_increasing(&s.g))
    }
}

/// Run one chain to completion.
pub fn run_chain(config: &SamplerConfig, data: &AssayDataset) -> Result<ChainTrace> {
    let mut sampler = Sampler::new(config.clone(), data)?;
    sampler.run()?;
    Ok(sampler.into_trace())
}

/// Independent chains, one per seed, run in parallel and returned in seed
/// order.
pub fn run_chains(config: &SamplerConfig, data: &AssayDataset, seeds: &[u64]) -> Result<Vec<ChainTrace>> {
    seeds
        .par_iter()
        .map(|&seed| run_chain(&SamplerConfig { seed, ..config.clone() }, data))
        .collect()
}

/// Minimum number of retained samples for a posterior summary.
pub const MIN_SUMMARY_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub grid: Vec<f64>,
    pub g_median: Vec<f64>,
    pub g_lo: Vec<f64>,
    pub g_hi: Vec<f64>,
    pub f_median: Vec<f64>,
    pub f_lo: Vec<f64>,
    pub f_hi: Vec<f64>,
}

/// Pointwise median and central 95% band of `g` and `f`.
pub fn posterior_summary(trace: &ChainTrace) -> Result<PosteriorSummary> {
    summarize_grids(&trace.grid, &trace.g_matrix(), &trace.f_matrix(), trace.n_samples())
}

pub fn summarize_grids(grid: &[f64], g: &[f64], f: &[f64], rows: usize) -> Result<PosteriorSummary> {
    if rows < MIN_SUMMARY_SAMPLES {
        return Err(Error::Contract(format!(
            "posterior summary needs at least {MIN_SUMMARY_SAMPLES} samples, got {rows}"
        )));
    }
    let probs = [0.5, 0.025, 0.975];
    let cols = grid.len();
    let mut gq = column_quantiles(g, rows, cols, &probs).into_iter();
    let mut fq = column_quantiles(f, rows, cols, &probs).into_iter();
    let next = |it: &mut std::vec::IntoIter<Vec<f64>>| it.next().expect("three quantiles");
    Ok(PosteriorSummary {
        grid: grid.to_vec(),
        g_median: next(&mut gq),
        g_lo: next(&mut gq),
        g_hi: next(&mut gq),
        f_median: next(&mut fq),
        f_lo: next(&mut fq),
        f_hi: next(&mut fq),
    })
}
