use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adaptive::AdaptiveProposal;
use super::{AcceptanceRates, ChainTrace, ModelKind, SamplerConfig, TraceSample};
use crate::curves::{
    check_monotone_decreasing, design_matrix, linspace, ls_fit, nnls, CurveModel, ISplineCurve,
    KnotSequence, Logistic4, LsFit,
};
use crate::data::{AssayDataset, Isolate};
use crate::dpm::{DpmPrior, DpmState};
use crate::likelihood::ObservationModel;
use crate::normal::{ln_normal, LN_2PI};
use crate::stats::{mean, median, variance};
use crate::{Error, Result};

/// Variance of the latent-MIC random walk.
pub const LATENT_PROPOSAL_VAR: f64 = 0.5;
/// Half-width of the λ random walk.
pub const LAMBDA_STEP: f64 = 0.1;
pub const LAMBDA_MAX: f64 = 2.0;
/// Variance of the vague Normal priors on (log-)coefficients.
pub const COEF_PRIOR_VAR: f64 = 100.0;
/// Mean of the truncated-Poisson prior on the number of interior knots.
pub const KNOT_PRIOR_MEAN: f64 = 3.0;
/// Base-measure draws averaged into each density snapshot.
pub const G0_DRAWS_PER_SNAPSHOT: usize = 50;
/// Floor applied to initial spline coefficients.
const INIT_COEF_FLOOR: f64 = 0.01;
const INIT_RJ_KNOTS: usize = 3;

/// Curve parameters in the coordinates the sampler moves in.
#[derive(Debug, Clone, PartialEq)]
pub enum CurveParams {
    /// `(ln β1, β2, ln β3, ln β4)`.
    Logistic { theta: [f64; 4] },
    /// Fixed knots, log-coefficients under the random-walk prior.
    FixedKnots { knots: KnotSequence, log_beta: Vec<f64> },
    /// Free knots, unconstrained coefficients.
    FreeKnots { knots: KnotSequence, beta: Vec<f64> },
}

impl CurveParams {
    pub fn to_curve(&self) -> Result<CurveModel> {
        Ok(match self {
            CurveParams::Logistic { theta } => CurveModel::Logistic4(Logistic4::new(
                theta[0].exp(),
                theta[1],
                theta[2].exp(),
                theta[3].exp(),
            )?),
            CurveParams::FixedKnots { knots, log_beta } => CurveModel::ISpline(ISplineCurve::new(
                knots.clone(),
                log_beta.iter().map(|v| v.exp()).collect(),
            )?),
            CurveParams::FreeKnots { knots, beta } => {
                CurveModel::ISpline(ISplineCurve::new(knots.clone(), beta.clone())?)
            }
        })
    }

    pub fn n_knots(&self) -> Option<usize> {
        match self {
            CurveParams::Logistic { .. } => None,
            CurveParams::FixedKnots { knots, .. } | CurveParams::FreeKnots { knots, .. } => {
                Some(knots.n_interior())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub m: Vec<f64>,
    pub params: CurveParams,
    pub curve: CurveModel,
    pub lambda: Option<f64>,
    pub dpm: DpmState,
    pub iteration: usize,
}

pub struct Sampler {
    config: SamplerConfig,
    isolates: Vec<Isolate>,
    y: Vec<f64>,
    obs: ObservationModel,
    grid: Vec<f64>,
    rng: ChaCha8Rng,
    dpm_prior: DpmPrior,
    state: ChainState,
    mic_ll: Vec<f64>,
    dia_ll: Vec<f64>,
    scratch_ll: Vec<f64>,
    adapt: Option<AdaptiveProposal>,
    rw_log_scale: f64,
    acceptance: AcceptanceRates,
    samples: Vec<TraceSample>,
}

fn ln_tpois_unnorm(k: usize) -> f64 {
    k as f64 * KNOT_PRIOR_MEAN.ln() - statrs::function::factorial::ln_factorial(k as u64)
}

fn ln_coef_prior(beta: &[f64]) -> f64 {
    beta.iter().map(|&b| ln_normal(b, 0.0, COEF_PRIOR_VAR)).sum()
}

fn accept<R: Rng + ?Sized>(ln_ratio: f64, rng: &mut R) -> bool {
    if ln_ratio.is_nan() {
        return false;
    }
    ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio
}

impl Sampler {
    pub fn new(config: SamplerConfig, data: &AssayDataset) -> Result<Self> {
        config.validate()?;
        let isolates = data.isolates();
        let y: Vec<f64> = isolates.iter().map(|i| i.dia as f64).collect();
        let obs = ObservationModel::new(data, config.model.models_censoring());
        let (lo, hi) = {
            let (a, b) = data.mic_range();
            KnotSequence::observed_boundaries(a, b)
        };
        let grid = linspace(lo, hi, config.grid_points);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);

        let m: Vec<f64> = isolates.iter().map(|i| i.mic as f64 - 0.5).collect();
        let x: Vec<f64> = isolates.iter().map(|i| i.mic as f64).collect();
        let params = match config.model {
            ModelKind::Logistic4 => {
                let b1 = y.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(1.0);
                CurveParams::Logistic { theta: [b1.ln(), median(&x), 0.0, 0.0] }
            }
            ModelKind::SplineRw => {
                let knots = KnotSequence::equally_spaced(lo, hi, config.knot_spacing)
                    .or_else(|_| KnotSequence::new(lo, vec![0.5 * (lo + hi)], hi))?;
                let beta = init_coefficients(&knots, &m, &y);
                CurveParams::FixedKnots { knots, log_beta: beta.iter().map(|b| b.ln()).collect() }
            }
            ModelKind::SplineRj => {
                let k = INIT_RJ_KNOTS.min(config.kmax);
                let step = (hi - lo) / (k + 1) as f64;
                let knots = KnotSequence::new(lo, (1..=k).map(|j| lo + step * j as f64).collect(), hi)?;
                let beta = init_coefficients(&knots, &m, &y);
                CurveParams::FreeKnots { knots, beta }
            }
        };
        let curve = params.to_curve()?;
        let lambda = (config.model == ModelKind::SplineRw).then_some(1.0);

        let var = variance(&m);
        let dpm = DpmState::single_cluster(m.len(), mean(&m), if var > 0.0 { var } else { 1.0 }, 1.0);

        let mut mic_ll = Vec::with_capacity(m.len());
        let mut dia_ll = Vec::with_capacity(m.len());
        for (i, (iso, &mi)) in isolates.iter().zip(&m).enumerate() {
            let a = obs.mic_logprob(iso, mi);
            let b = obs.dia_logprob(iso, curve.eval(mi));
            if !(a.is_finite() && b.is_finite()) {
                return Err(Error::Init {
                    isolate: i,
                    message: format!(
                        "non-finite log-likelihood for MIC {} / DIA {} (MIC term {a}, DIA term {b})",
                        iso.mic, iso.dia
                    ),
                });
            }
            mic_ll.push(a);
            dia_ll.push(b);
        }

        let adapt = match &params {
            CurveParams::Logistic { .. } => Some(4),
            CurveParams::FixedKnots { log_beta, .. } => Some(log_beta.len()),
            CurveParams::FreeKnots { .. } => None,
        }
        .map(|d| AdaptiveProposal::new(d, config.adapt_start, config.adapt_window, config.burn_in));

        let n = m.len();
        Ok(Self {
            isolates,
            y,
            obs,
            grid,
            rng,
            dpm_prior: DpmPrior::default(),
            state: ChainState { m, params, curve, lambda, dpm, iteration: 0 },
            mic_ll,
            dia_ll,
            scratch_ll: vec![0.0; n],
            adapt,
            rw_log_scale: 0.0,
            acceptance: AcceptanceRates::default(),
            samples: Vec::with_capacity(config.n_retained()),
            config,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn acceptance(&self) -> &AcceptanceRates {
        &self.acceptance
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    /// Replace the mixture state, e.g. to hold it fixed while testing other
    /// kernels.
    pub fn set_dpm(&mut self, dpm: DpmState) {
        assert_eq!(dpm.n(), self.state.m.len());
        self.state.dpm = dpm;
    }

    fn lik(&self) -> bool {
        self.config.likelihood_enabled
    }

    pub fn run(&mut self) -> Result<()> {
        while self.state.iteration < self.config.iterations {
            self.step()?;
        }
        Ok(())
    }

    /// One full iteration: latent MICs, curve, λ or knots, mixture, α; then a
    /// snapshot if the iteration is retained.
    pub fn step(&mut self) -> Result<()> {
        self.update_latent_mics();
        self.update_curve()?;
        match self.config.model {
            ModelKind::SplineRw => self.update_lambda(),
            ModelKind::SplineRj => self.rjmcmc_step()?,
            ModelKind::Logistic4 => {}
        }
        self.update_dpm();
        let it = self.state.iteration;
        if it >= self.config.burn_in && (it - self.config.burn_in).is_multiple_of(self.config.thin) {
            self.snapshot();
        }
        self.state.iteration += 1;
        Ok(())
    }

    pub fn update_latent_mics(&mut self) {
        let sd = LATENT_PROPOSAL_VAR.sqrt();
        let lik = self.lik();
        for i in 0..self.state.m.len() {
            let cur = self.state.m[i];
            let prop = cur + sd * self.rng.sample::<f64, _>(StandardNormal);
            let mut ln_ratio = self.state.dpm.ln_conditional(i, prop) - self.state.dpm.ln_conditional(i, cur);
            let (mut new_mic, mut new_dia) = (0.0, 0.0);
            if lik {
                let iso = &self.isolates[i];
                new_mic = self.obs.mic_logprob(iso, prop);
                new_dia = self.obs.dia_logprob(iso, self.state.curve.eval(prop));
                ln_ratio += new_mic + new_dia - self.mic_ll[i] - self.dia_ll[i];
            }
            let ok = accept(ln_ratio, &mut self.rng);
            self.acceptance.latent_mic.record(ok);
            if ok {
                self.state.m[i] = prop;
                if lik {
                    self.mic_ll[i] = new_mic;
                    self.dia_ll[i] = new_dia;
                }
            }
        }
    }

    /// DIA log-likelihood of `curve` at the current latent MICs, written
    /// per isolate into the scratch buffer.
    fn propose_dia_ll(&mut self, curve: &CurveModel) -> f64 {
        let mut total = 0.0;
        for (i, (iso, &mi)) in self.isolates.iter().zip(&self.state.m).enumerate() {
            let v = self.obs.dia_logprob(iso, curve.eval(mi));
            self.scratch_ll[i] = v;
            total += v;
        }
        total
    }

    fn current_dia_ll(&self) -> f64 {
        self.dia_ll.iter().sum()
    }

    fn is_monotone(&self, curve: &CurveModel) -> bool {
        check_monotone_decreasing(curve, &self.grid)
    }

    /// Commit a proposed curve whose per-isolate DIA terms are in scratch.
    fn commit_curve(&mut self, params: CurveParams, curve: CurveModel) {
        self.state.params = params;
        self.state.curve = curve;
        if self.lik() {
            std::mem::swap(&mut self.dia_ll, &mut self.scratch_ll);
        }
    }

    pub fn update_curve(&mut self) -> Result<()> {
        match self.state.params.clone() {
            CurveParams::Logistic { theta } => {
                let adapt = self.adapt.as_ref().expect("logistic chains adapt");
                let prop = adapt.propose(&theta, &mut self.rng);
                let prop: [f64; 4] = [prop[0], prop[1], prop[2], prop[3]];
                let ln_prior = |t: &[f64; 4]| t.iter().map(|&v| ln_normal(v, 0.0, COEF_PRIOR_VAR)).sum::<f64>();
                let new_params = CurveParams::Logistic { theta: prop };
                let ok = self.try_accept_rw(new_params, ln_prior(&prop) - ln_prior(&theta), false)?;
                let current = match &self.state.params {
                    CurveParams::Logistic { theta } => theta.to_vec(),
                    _ => unreachable!(),
                };
                let it = self.state.iteration;
                self.adapt.as_mut().unwrap().record(it, &current, ok);
            }
            CurveParams::FixedKnots { knots, log_beta } => {
                let lambda = self.state.lambda.expect("fixed-knot chains carry λ");
                let prop = self.adapt.as_ref().unwrap().propose(&log_beta, &mut self.rng);
                let d_prior = rw_prior(&prop, lambda) - rw_prior(&log_beta, lambda);
                let ok = self.try_accept_rw(CurveParams::FixedKnots { knots, log_beta: prop }, d_prior, false)?;
                let current = match &self.state.params {
                    CurveParams::FixedKnots { log_beta, .. } => log_beta.clone(),
                    _ => unreachable!(),
                };
                let it = self.state.iteration;
                self.adapt.as_mut().unwrap().record(it, &current, ok);
            }
            CurveParams::FreeKnots { knots, beta } => {
                let b = beta.len();
                let scale = self.rw_log_scale.exp() * 2.38 / (b as f64).sqrt();
                let prop = if self.lik() {
                    match ls_fit(&knots, &self.state.m, &self.y, self.obs.sigma_d) {
                        Ok(fit) => fit.perturb(&beta, scale, &mut self.rng),
                        Err(_) => {
                            self.acceptance.curve.record(false);
                            return Ok(());
                        }
                    }
                } else {
                    // Without data the LS geometry is meaningless; walk on the
                    // identity instead.
                    beta.iter().map(|v| v + scale * self.rng.sample::<f64, _>(StandardNormal)).collect()
                };
                let d_prior = ln_coef_prior(&prop) - ln_coef_prior(&beta);
                let ok = self.try_accept_rw(CurveParams::FreeKnots { knots, beta: prop }, d_prior, true)?;
                if self.state.iteration < self.config.burn_in {
                    let gain = ((self.state.iteration + 1) as f64).powf(-0.6);
                    self.rw_log_scale += gain * (if ok { 1.0 } else { 0.0 } - super::TARGET_ACCEPT);
                    self.rw_log_scale = self.rw_log_scale.clamp(-15.0, 5.0);
                }
            }
        }
        Ok(())
    }

    fn try_accept_rw(&mut self, params: CurveParams, d_ln_prior: f64, check_monotone: bool) -> Result<bool> {
        let curve = match params.to_curve() {
            Ok(c) => c,
            Err(_) => {
                // Overflowing or degenerate proposals have zero prior mass.
                self.acceptance.curve.record(false);
                return Ok(false);
            }
        };
        if check_monotone && self.lik() && !self.is_monotone(&curve) {
            self.acceptance.curve.record(false);
            return Ok(false);
        }
        let mut ln_ratio = d_ln_prior;
        if self.lik() {
            ln_ratio += self.propose_dia_ll(&curve) - self.current_dia_ll();
        }
        let ok = accept(ln_ratio, &mut self.rng);
        self.acceptance.curve.record(ok);
        if ok {
            self.commit_curve(params, curve);
        }
        Ok(ok)
    }

    pub fn update_lambda(&mut self) {
        let Some(lambda) = self.state.lambda else { return };
        let prop = lambda + self.rng.random_range(-LAMBDA_STEP..LAMBDA_STEP);
        if !(prop > 0.0 && prop < LAMBDA_MAX) {
            self.acceptance.lambda.record(false);
            return;
        }
        let CurveParams::FixedKnots { log_beta, .. } = &self.state.params else { return };
        let ln_ratio = increments_ln_density(log_beta, prop) - increments_ln_density(log_beta, lambda);
        let ok = accept(ln_ratio, &mut self.rng);
        self.acceptance.lambda.record(ok);
        if ok {
            self.state.lambda = Some(prop);
        }
    }

    fn n_moves(&self, k: usize) -> usize {
        1 + usize::from(k < self.config.kmax) + usize::from(k > 1)
    }

    /// Draw coefficients for a proposed knot set and return them with their
    /// proposal log density.
    fn rj_coefficients(&mut self, fit: Option<&LsFit>, b: usize) -> (Vec<f64>, f64) {
        match fit {
            Some(fit) => {
                let beta: Vec<f64> = fit.sample(&mut self.rng).iter().copied().collect();
                let q = fit.ln_density(&beta);
                (beta, q)
            }
            None => {
                let sd = COEF_PRIOR_VAR.sqrt();
                let beta: Vec<f64> = (0..b).map(|_| sd * self.rng.sample::<f64, _>(StandardNormal)).collect();
                let q = ln_coef_prior(&beta);
                (beta, q)
            }
        }
    }

    fn rj_ln_q(&self, fit: Option<&LsFit>, beta: &[f64]) -> f64 {
        match fit {
            Some(f) => f.ln_density(beta),
            None => ln_coef_prior(beta),
        }
    }

    /// One birth, death or relocation proposal for the free-knot spline.
    pub fn rjmcmc_step(&mut self) -> Result<()> {
        let CurveParams::FreeKnots { knots, beta } = self.state.params.clone() else {
            return Err(Error::Contract("knot moves need a free-knot spline".into()));
        };
        let k = knots.n_interior();
        let (lo, hi) = (knots.lo(), knots.hi());
        let mut moves = vec![Move::Relocate];
        if k < self.config.kmax {
            moves.push(Move::Birth);
        }
        if k > 1 {
            moves.push(Move::Death);
        }
        moves.sort();
        let mv = moves[self.rng.random_range(0..moves.len())];

        let interior = knots.interior().to_vec();
        let (new_interior, ln_move_ratio) = match mv {
            Move::Birth => {
                let t = self.rng.random_range(lo..hi);
                let mut v = interior.clone();
                let pos = v.partition_point(|&u| u < t);
                v.insert(pos, t);
                // Uniform order-statistics knot prior: position densities
                // cancel against the uniform birth location and the 1/(k+1)
                // death choice, leaving the move-type probabilities.
                (v, (self.n_moves(k) as f64 / self.n_moves(k + 1) as f64).ln())
            }
            Move::Death => {
                let j = self.rng.random_range(0..k);
                let mut v = interior.clone();
                v.remove(j);
                (v, (self.n_moves(k) as f64 / self.n_moves(k - 1) as f64).ln())
            }
            Move::Relocate => {
                let j = self.rng.random_range(0..k);
                let left = if j == 0 { lo } else { interior[j - 1] };
                let right = if j + 1 == k { hi } else { interior[j + 1] };
                let mut v = interior.clone();
                v[j] = self.rng.random_range(left..right);
                (v, 0.0)
            }
        };
        let new_knots = match KnotSequence::new(lo, new_interior, hi) {
            Ok(kn) => kn,
            Err(_) => {
                // Coincident knots: a measure-zero proposal, reject.
                self.record_move(mv, false);
                return Ok(());
            }
        };

        let lik = self.lik();
        let (fit_cur, fit_new) = if lik {
            let a = ls_fit(&knots, &self.state.m, &self.y, self.obs.sigma_d);
            let b = ls_fit(&new_knots, &self.state.m, &self.y, self.obs.sigma_d);
            match (a, b) {
                (Ok(a), Ok(b)) => (Some(a), Some(b)),
                _ => {
                    self.record_move(mv, false);
                    return Ok(());
                }
            }
        } else {
            (None, None)
        };

        let (beta_new, ln_q_new) = self.rj_coefficients(fit_new.as_ref(), new_knots.n_basis());
        let ln_q_cur = self.rj_ln_q(fit_cur.as_ref(), &beta);
        let params = CurveParams::FreeKnots { knots: new_knots.clone(), beta: beta_new.clone() };
        let curve = params.to_curve()?;

        if lik && !self.is_monotone(&curve) {
            self.record_move(mv, false);
            return Ok(());
        }

        let mut ln_ratio = ln_coef_prior(&beta_new) - ln_coef_prior(&beta)
            + ln_tpois_unnorm(new_knots.n_interior())
            - ln_tpois_unnorm(k)
            + ln_q_cur
            - ln_q_new
            + ln_move_ratio;
        if lik {
            ln_ratio += self.propose_dia_ll(&curve) - self.current_dia_ll();
        }
        let ok = accept(ln_ratio, &mut self.rng);
        self.record_move(mv, ok);
        if ok {
            self.commit_curve(params, curve);
        }
        Ok(())
    }

    fn record_move(&mut self, mv: Move, ok: bool) {
        let a = &mut self.acceptance;
        match mv {
            Move::Birth => a.birth.record(ok),
            Move::Death => a.death.record(ok),
            Move::Relocate => a.relocate.record(ok),
        }
    }

    pub fn update_dpm(&mut self) {
        self.state.dpm.sweep(&self.state.m, &self.dpm_prior, true, &mut self.rng);
        let ok = self.state.dpm.update_alpha(&self.dpm_prior, &mut self.rng);
        self.acceptance.alpha.record(ok);
    }

    fn snapshot(&mut self) {
        let draws: Vec<(f64, f64)> =
            (0..G0_DRAWS_PER_SNAPSHOT).map(|_| self.dpm_prior.draw_g0(&mut self.rng)).collect();
        let f = self.state.dpm.density_on_grid(&self.grid, &draws);
        let g = self.state.curve.eval_grid(&self.grid);
        self.samples.push(TraceSample {
            curve: self.state.curve.clone(),
            lambda: self.state.lambda,
            n_knots: match self.config.model {
                ModelKind::SplineRj => self.state.params.n_knots(),
                _ => None,
            },
            alpha: self.state.dpm.alpha(),
            n_clusters: self.state.dpm.n_clusters(),
            g,
            f,
        });
    }

    pub fn into_trace(self) -> ChainTrace {
        ChainTrace {
            model: self.config.model,
            grid: self.grid,
            samples: self.samples,
            acceptance: self.acceptance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Move {
    Birth,
    Death,
    Relocate,
}

/// ln density of the increments `log β_{j+1} − log β_j ~ N(0, λ)`.
fn increments_ln_density(log_beta: &[f64], lambda: f64) -> f64 {
    let n = log_beta.len().saturating_sub(1) as f64;
    let ss: f64 = log_beta.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    -0.5 * n * (LN_2PI + lambda.ln()) - 0.5 * ss / lambda
}

/// Random-walk prior: `log β_1 ~ N(0, 100)` and increments `N(0, λ)`.
pub(crate) fn rw_prior(log_beta: &[f64], lambda: f64) -> f64 {
    ln_normal(log_beta[0], 0.0, COEF_PRIOR_VAR) + increments_ln_density(log_beta, lambda)
}

/// Non-negative LS fit of `y` on the decreasing basis, floored at 0.01.
fn init_coefficients(knots: &KnotSequence, m: &[f64], y: &[f64]) -> Vec<f64> {
    let x = design_matrix(knots, m);
    let b = nalgebra::DVector::from_column_slice(y);
    nnls(&x, &b).iter().map(|&v| v.max(INIT_COEF_FLOOR)).collect()
}
