//! Simulation studies: known truths, synthetic scatterplots, curve and
//! density error, and breakpoint accuracy across replicates.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::breakpoints::{analyze_samples, optimal_breakpoints, SearchRange};
use crate::curves::{linspace, CurveModel, ISplineCurve, KnotSequence, LinearCurve, Logistic4};
use crate::data::{AssayDataset, DiaBreakpoints, MicBreakpoints, Observation, DEFAULT_SIGMA_D, DEFAULT_SIGMA_M};
use crate::normal::ln_normal;
use crate::sampler::{posterior_summary, run_chain, ModelKind, SamplerConfig};
use crate::stats::{mean, median, std_dev, trapezoid};
use crate::{Error, Result};

/// Search range used when scoring simulations; wide enough for every
/// built-in truth.
pub const SIM_SEARCH: SearchRange = SearchRange { d_min: 6, d_max: 60 };
/// Points in the grid used to derive true breakpoints.
pub const TRUTH_GRID_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mu: f64,
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub truth: CurveModel,
    pub density: Vec<MixtureComponent>,
    pub n_isolates: usize,
    pub sigma_m: f64,
    pub sigma_d: f64,
    pub mic_breakpoints: Vec<MicBreakpoints>,
}

fn mix(mu: &[f64], sigma: &[f64], w: &[f64]) -> Vec<MixtureComponent> {
    let total: f64 = w.iter().sum();
    mu.iter()
        .zip(sigma)
        .zip(w)
        .map(|((&mu, &sigma), &w)| MixtureComponent { mu, sigma, weight: w / total })
        .collect()
}

fn bps(pairs: &[(i32, i32)]) -> Vec<MicBreakpoints> {
    pairs.iter().map(|&(l, u)| MicBreakpoints { lower: l, upper: u }).collect()
}

fn spline_truth(lo: f64, interior: &[f64], hi: f64, coeffs: &[f64]) -> CurveModel {
    let k = KnotSequence::new(lo, interior.to_vec(), hi).expect("valid built-in knots");
    CurveModel::ISpline(ISplineCurve::new(k, coeffs.to_vec()).expect("valid built-in coefficients"))
}

/// Support of a mixture: extreme component mean ∓ 4 SD.
fn support(density: &[MixtureComponent]) -> (f64, f64) {
    let lo = density.iter().map(|c| c.mu - 4.0 * c.sigma).fold(f64::INFINITY, f64::min);
    let hi = density.iter().map(|c| c.mu + 4.0 * c.sigma).fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// The four main scenarios and the two gap scenarios.
pub fn builtin_scenarios() -> Vec<Scenario> {
    let base = |name: &str, truth, density, n, mic: &[(i32, i32)]| Scenario {
        name: name.to_string(),
        truth,
        density,
        n_isolates: n,
        sigma_m: DEFAULT_SIGMA_M,
        sigma_d: DEFAULT_SIGMA_D,
        mic_breakpoints: bps(mic),
    };

    let d3 = mix(&[-3.0, 0.0, 3.0], &[1.0; 3], &[0.5, 0.3, 0.2]);
    let (lo3, hi3) = support(&d3);
    let s3_curve = spline_truth(lo3, &[-3.0, 0.0, 1.0], hi3, &[1.0, 1.0, 20.0, 1.0, 20.0, 1.0]);

    let d4 = mix(&[-3.0, 0.0, 3.0], &[2.0; 3], &[1.0; 3]);
    let (lo4, hi4) = support(&d4);
    let s4_curve =
        spline_truth(lo4, &[-4.0, -2.0, 0.0, 2.0, 4.0], hi4, &[1.0, 10.0, 1.0, 25.0, 1.0, 1.0, 10.0, 1.0]);

    vec![
        base(
            "scenario1",
            CurveModel::Linear(LinearCurve { intercept: 30.0, slope: -2.0 }),
            mix(&[-6.0, 3.0], &[2.0, 0.7], &[0.8, 0.2]),
            1000,
            &[(-6, -4), (0, 2)],
        ),
        base(
            "scenario2",
            CurveModel::Logistic4(Logistic4 { beta1: 35.0, beta2: 1.17, beta3: 0.1, beta4: 1.2 }),
            mix(&[-4.6, -2.0, 1.0], &[0.6, 0.2, 0.2], &[1.1, 1.5, 1.5]),
            1000,
            &[(-2, 0), (0, 2)],
        ),
        base("scenario3", s3_curve.clone(), d3, 1000, &[(-1, 1), (1, 3)]),
        base("scenario4", s4_curve, d4, 1000, &[(-1, 1), (0, 2)]),
        base(
            "gap1",
            CurveModel::Logistic4(Logistic4 { beta1: 49.0, beta2: 1.17, beta3: 0.4, beta4: 0.4 }),
            mix(&[-5.5, 5.5], &[1.0, 1.0], &[1.0, 1.0]),
            500,
            &[(-5, -3), (-1, 1), (3, 5)],
        ),
        base("gap2", s3_curve, mix(&[-4.0, 4.0], &[0.5, 0.5], &[1.0, 1.0]), 500, &[(-5, -3), (-1, 1), (3, 5)]),
    ]
}

pub fn scenario(name: &str) -> Result<Scenario> {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = builtin_scenarios().into_iter().map(|s| s.name).collect();
            Error::Validation(format!("unknown scenario '{name}' (known: {})", names.join(", ")))
        })
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.density.is_empty() || self.density.iter().any(|c| !(c.sigma > 0.0 && c.weight >= 0.0)) {
            return Err(Error::Validation("mixture needs positive SDs and non-negative weights".into()));
        }
        if self.density.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Validation("mixture weights sum to zero".into()));
        }
        if !(self.sigma_m > 0.0 && self.sigma_d > 0.0) || self.n_isolates == 0 {
            return Err(Error::Validation("scenario needs positive error SDs and isolates".into()));
        }
        Ok(())
    }

    /// Copy with weights rescaled to sum to one.
    pub fn normalized(&self) -> Scenario {
        let total: f64 = self.density.iter().map(|c| c.weight).sum();
        let mut s = self.clone();
        for c in &mut s.density {
            c.weight /= total;
        }
        s
    }

    pub fn density_at(&self, u: f64) -> f64 {
        let total: f64 = self.density.iter().map(|c| c.weight).sum();
        self.density.iter().map(|c| c.weight / total * ln_normal(u, c.mu, c.sigma * c.sigma).exp()).sum()
    }

    pub fn support(&self) -> (f64, f64) {
        support(&self.density)
    }

    /// Grid spanning the mixture support.
    pub fn truth_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.support();
        linspace(lo, hi, TRUTH_GRID_POINTS)
    }

    /// Optimal DIA breakpoints under the true curve and density.
    pub fn true_dia_breakpoints(&self, bp: MicBreakpoints, search: SearchRange) -> DiaBreakpoints {
        let grid = self.truth_grid();
        let g = self.truth.eval_grid(&grid);
        let f: Vec<f64> = grid.iter().map(|&u| self.density_at(u)).collect();
        optimal_breakpoints(&g, &f, &grid, bp, self.sigma_m, self.sigma_d, search).0
    }
}

/// A synthetic dataset with its generating true MICs, in draw order.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: AssayDataset,
    pub true_m: Vec<f64>,
    /// `(observed MIC, observed DIA)` in draw order.
    pub pairs: Vec<(i32, i32)>,
}

/// Draw true MICs from the mixture, map through the true curve, add assay
/// error and round (MIC up, DIA to nearest).
pub fn generate_scatterplot(s: &Scenario, n: usize, seed: u64) -> Result<SimulatedData> {
    s.validate()?;
    let s = s.normalized();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut true_m = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random::<f64>();
        let mut comp = s.density[s.density.len() - 1];
        for c in &s.density {
            if u < c.weight {
                comp = *c;
                break;
            }
            u -= c.weight;
        }
        let m = comp.mu + comp.sigma * rng.sample::<f64, _>(StandardNormal);
        let d = s.truth.eval(m);
        let x = (m + s.sigma_m * rng.sample::<f64, _>(StandardNormal)).ceil() as i32;
        let y = (d + s.sigma_d * rng.sample::<f64, _>(StandardNormal)).round() as i32;
        true_m.push(m);
        pairs.push((x, y));
    }
    let obs: Vec<Observation> = pairs.iter().map(|&(x, y)| Observation::new(x, y, 1)).collect();
    let dataset = AssayDataset::new(format!("{}-seed{seed}", s.name), obs, s.sigma_m, s.sigma_d)?;
    Ok(SimulatedData { dataset, true_m, pairs })
}

/// `∫ (estimate − truth)²` by the trapezoid rule.
pub fn sse(estimate: &[f64], truth: &[f64], grid: &[f64]) -> f64 {
    assert_eq!(estimate.len(), truth.len());
    let sq: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).collect();
    trapezoid(grid, &sq)
}

/// Percentages of MAP sets that match the truth exactly and within 1 mm on
/// both bounds.
pub fn score_breakpoints(maps: &[DiaBreakpoints], truth: DiaBreakpoints) -> (f64, f64) {
    if maps.is_empty() {
        return (0.0, 0.0);
    }
    let n = maps.len() as f64;
    let exact = maps.iter().filter(|m| **m == truth).count() as f64;
    let within = maps
        .iter()
        .filter(|m| (m.lower - truth.lower).abs() <= 1 && (m.upper - truth.upper).abs() <= 1)
        .count() as f64;
    (100.0 * exact / n, 100.0 * within / n)
}

/// Outcome for one MIC breakpoint set within one replicate fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointOutcome {
    pub mic: MicBreakpoints,
    pub truth: DiaBreakpoints,
    pub map: DiaBreakpoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub scenario: String,
    pub model: ModelKind,
    pub replicate: usize,
    pub data_seed: u64,
    pub chain_seed: u64,
    pub n_isolates: usize,
    pub sse_curve: f64,
    pub sse_density: f64,
    pub breakpoints: Vec<BreakpointOutcome>,
}

/// Design of a simulation study.
#[derive(Debug, Clone)]
pub struct StudyPlan {
    pub scenario: Scenario,
    pub models: Vec<ModelKind>,
    pub replicates: usize,
    pub n_isolates: usize,
    pub base_seed: u64,
    /// Sampler settings; model and seed are overwritten per fit.
    pub sampler: SamplerConfig,
    pub search: SearchRange,
}

impl StudyPlan {
    pub fn new(scenario: Scenario, replicates: usize, base_seed: u64) -> Self {
        let n = scenario.n_isolates;
        Self {
            scenario,
            models: vec![ModelKind::Logistic4, ModelKind::SplineRw],
            replicates,
            n_isolates: n,
            base_seed,
            sampler: SamplerConfig::new(ModelKind::Logistic4, 0),
            search: SIM_SEARCH,
        }
    }

    pub fn data_seed(&self, replicate: usize) -> u64 {
        self.base_seed.wrapping_add(replicate as u64)
    }

    pub fn chain_seed(&self, replicate: usize, model: ModelKind) -> u64 {
        let idx = ModelKind::ALL.iter().position(|&m| m == model).unwrap_or(0) as u64;
        self.data_seed(replicate).wrapping_mul(31).wrapping_add(idx + 1)
    }
}

/// Generate, fit and score one replicate with one model.
pub fn run_replicate(plan: &StudyPlan, replicate: usize, model: ModelKind) -> Result<ReplicateResult> {
    let data_seed = plan.data_seed(replicate);
    let chain_seed = plan.chain_seed(replicate, model);
    let sim = generate_scatterplot(&plan.scenario, plan.n_isolates, data_seed)?;
    let cfg = SamplerConfig { model, seed: chain_seed, ..plan.sampler.clone() };
    let trace = run_chain(&cfg, &sim.dataset)?;
    let summary = posterior_summary(&trace)?;

    let g_true = plan.scenario.truth.eval_grid(&trace.grid);
    let f_true: Vec<f64> = trace.grid.iter().map(|&u| plan.scenario.density_at(u)).collect();
    let sse_curve = sse(&summary.g_median, &g_true, &trace.grid);
    let sse_density = sse(&summary.f_median, &f_true, &trace.grid);

    let (g_rows, f_rows) = (trace.g_matrix(), trace.f_matrix());
    let mut outcomes = Vec::new();
    for &bp in &plan.scenario.mic_breakpoints {
        let truth = plan.scenario.true_dia_breakpoints(bp, plan.search);
        let analysis =
            analyze_samples(&trace.grid, &g_rows, &f_rows, bp, plan.scenario.sigma_m, plan.scenario.sigma_d, plan.search)?;
        let map = analysis.posterior.map_set().expect("non-empty posterior");
        outcomes.push(BreakpointOutcome { mic: bp, truth, map });
    }
    Ok(ReplicateResult {
        scenario: plan.scenario.name.clone(),
        model,
        replicate,
        data_seed,
        chain_seed,
        n_isolates: plan.n_isolates,
        sse_curve,
        sse_density,
        breakpoints: outcomes,
    })
}

/// All replicates × models, run on up to `jobs` threads and returned in
/// (replicate, model) order.
pub fn run_study(plan: &StudyPlan, jobs: usize) -> Result<Vec<ReplicateResult>> {
    let tasks: Vec<(usize, ModelKind)> =
        (0..plan.replicates).flat_map(|r| plan.models.iter().map(move |&m| (r, m))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| tasks.par_iter().map(|&(r, m)| run_replicate(plan, r, m)).collect())
}

/// Mean, median and SD of the curve and density errors per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummaryRow {
    pub scenario: String,
    pub model: ModelKind,
    pub n: usize,
    pub sse_curve_mean: f64,
    pub sse_curve_median: f64,
    pub sse_curve_sd: f64,
    pub sse_density_mean: f64,
    pub sse_density_median: f64,
    pub sse_density_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointSummaryRow {
    pub scenario: String,
    pub model: ModelKind,
    pub mic_lower: i32,
    pub mic_upper: i32,
    pub true_lower: i32,
    pub true_upper: i32,
    pub exact_pct: f64,
    pub within1_pct: f64,
}

pub fn summarize_fits(results: &[ReplicateResult]) -> Vec<FitSummaryRow> {
    let mut models: Vec<ModelKind> = Vec::new();
    for r in results {
        if !models.contains(&r.model) {
            models.push(r.model);
        }
    }
    models
        .into_iter()
        .map(|m| {
            let rs: Vec<&ReplicateResult> = results.iter().filter(|r| r.model == m).collect();
            let c: Vec<f64> = rs.iter().map(|r| r.sse_curve).collect();
            let d: Vec<f64> = rs.iter().map(|r| r.sse_density).collect();
            FitSummaryRow {
                scenario: rs[0].scenario.clone(),
                model: m,
                n: rs.len(),
                sse_curve_mean: mean(&c),
                sse_curve_median: median(&c),
                sse_curve_sd: std_dev(&c),
                sse_density_mean: mean(&d),
                sse_density_median: median(&d),
                sse_density_sd: std_dev(&d),
            }
        })
        .collect()
}

pub fn summarize_breakpoints(results: &[ReplicateResult]) -> Vec<BreakpointSummaryRow> {
    let mut keys: Vec<(ModelKind, MicBreakpoints)> = Vec::new();
    for r in results {
        for o in &r.breakpoints {
            if !keys.contains(&(r.model, o.mic)) {
                keys.push((r.model, o.mic));
            }
        }
    }
    keys.into_iter()
        .map(|(model, mic)| {
            let outcomes: Vec<&BreakpointOutcome> = results
                .iter()
                .filter(|r| r.model == model)
                .flat_map(|r| r.breakpoints.iter().filter(|o| o.mic == mic))
                .collect();
            let truth = outcomes[0].truth;
            let maps: Vec<DiaBreakpoints> = outcomes.iter().map(|o| o.map).collect();
            let (exact, within) = score_breakpoints(&maps, truth);
            BreakpointSummaryRow {
                scenario: results[0].scenario.clone(),
                model,
                mic_lower: mic.lower,
                mic_upper: mic.upper,
                true_lower: truth.lower,
                true_upper: truth.upper,
                exact_pct: exact,
                within1_pct: within,
            }
        })
        .collect()
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn fit_summary_csv(rows: &[FitSummaryRow]) -> Result<String> {
    to_csv(rows)
}

pub fn breakpoint_summary_csv(rows: &[BreakpointSummaryRow]) -> Result<String> {
    to_csv(rows)
}

/// One line per replicate × model × MIC breakpoint set, with the seeds
/// needed to rerun it.
pub fn replicate_csv(results: &[ReplicateResult]) -> String {
    let mut s = String::from(
        "scenario,model,replicate,data_seed,chain_seed,n_isolates,sse_curve,sse_density,mic_lower,mic_upper,true_lower,true_upper,map_lower,map_upper\n",
    );
    for r in results {
        for o in &r.breakpoints {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.scenario,
                r.model,
                r.replicate,
                r.data_seed,
                r.chain_seed,
                r.n_isolates,
                r.sse_curve,
                r.sse_density,
                o.mic.lower,
                o.mic.upper,
                o.truth.lower,
                o.truth.upper,
                o.map.lower,
                o.map.upper
            );
        }
    }
    s
}
