//! Independent oracles for the statistical pieces: exact prior
//! distributions, brute-force loss evaluation and known closed forms.

use bpcal_core::artifact::FitArtifact;
use bpcal_core::breakpoints::{loss, optimal_breakpoints, p_mic, SearchRange};
use bpcal_core::curves::{linspace, CurveModel};
use bpcal_core::data::{AssayDataset, Censor, DiaBreakpoints, MicBreakpoints, Observation};
use bpcal_core::dpm::{DpmPrior, DpmState};
use bpcal_core::sampler::{run_chain, ModelKind, Sampler, SamplerConfig};
use bpcal_core::sim::{generate_scatterplot, run_replicate, scenario, sse, StudyPlan, SIM_SEARCH};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

fn ks_pvalue(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=100).map(|k| 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * t * t).exp()).sum();
    p.clamp(0.0, 1.0)
}

/// χ² p-value with bins pooled from the top until each expects 5 draws.
fn chi2_pvalue(expected: &[f64], observed: &[f64]) -> f64 {
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (e, o) in expected.iter().zip(observed).rev() {
        acc.0 += e;
        acc.1 += o;
        if acc.0 >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += acc.0;
        last.1 += acc.1;
    }
    let chi2: f64 = bins.iter().map(|(e, o)| (o - e) * (o - e) / e).sum();
    1.0 - ChiSquared::new((bins.len() - 1) as f64).unwrap().cdf(chi2)
}

/// `P(K = k)` for a Chinese restaurant process with `α ~ U(lo, hi)`, from
/// unsigned Stirling numbers of the first kind and Simpson's rule over α.
fn crp_cluster_pmf(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut s = vec![vec![0.0f64; n + 1]; n + 1];
    s[0][0] = 1.0;
    for i in 1..=n {
        for k in 1..=i {
            s[i][k] = s[i - 1][k - 1] + (i - 1) as f64 * s[i - 1][k];
        }
    }
    let steps = 2000;
    let h = (hi - lo) / steps as f64;
    (1..=n)
        .map(|k| {
            let integrand = |a: f64| (s[n][k].ln() + k as f64 * a.ln() + ln_gamma(a) - ln_gamma(a + n as f64)).exp();
            let inner: f64 = (1..steps).map(|j| integrand(lo + j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 }).sum();
            (integrand(lo) + integrand(hi) + inner) * h / 3.0 / (hi - lo)
        })
        .collect()
}

#[test]
fn crp_pmf_sums_to_one() {
    let pmf = crp_cluster_pmf(30, 0.2, 2.0);
    assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn dpm_without_data_recovers_the_partition_prior() {
    let prior = DpmPrior::default();
    let n = 30;
    let m = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut dpm = DpmState::single_cluster(n, 0.0, 1.0, 1.0);
    let mut counts = vec![0.0; n];
    let (sweeps, thin, burn) = (200_000, 20, 1000);
    for it in 0..burn + sweeps {
        dpm.sweep(&m, &prior, false, &mut rng);
        dpm.update_alpha(&prior, &mut rng);
        if it >= burn && (it - burn) % thin == 0 {
            counts[dpm.n_clusters() - 1] += 1.0;
        }
    }
    assert!(dpm.is_consistent());
    let draws: f64 = counts.iter().sum();
    let expected: Vec<f64> = crp_cluster_pmf(n, prior.alpha_min, prior.alpha_max).iter().map(|p| p * draws).collect();
    let p = chi2_pvalue(&expected, &counts);
    assert!(p > 0.01, "cluster count χ² p = {p:.4}");
}

#[test]
fn latent_updates_target_the_cluster_normal() {
    let obs = vec![Observation::new(-1, 25, 2), Observation::new(0, 20, 2), Observation::new(1, 15, 1)];
    let data = AssayDataset::new("latent", obs, 0.707, 2.121).unwrap();
    let mut cfg = SamplerConfig::new(ModelKind::Logistic4, 5);
    cfg.likelihood_enabled = false;
    cfg.grid_points = 100;
    let mut sampler = Sampler::new(cfg, &data).unwrap();
    let (mu, sigma2) = (1.5, 0.64);
    sampler.set_dpm(DpmState::from_parts(vec![0; 5], vec![(mu, sigma2)], 1.0));
    let mut draws = Vec::new();
    for it in 0..60_000 {
        sampler.update_latent_mics();
        if it >= 1000 && it % 10 == 0 {
            draws.push(sampler.state().m[0]);
        }
    }
    let normal = Normal::new(mu, sigma2.sqrt()).unwrap();
    let p = ks_pvalue(draws, |x| normal.cdf(x));
    assert!(p > 0.01, "latent MIC KS p = {p:.4}");
}

#[test]
fn mic_call_probability_at_the_true_lower_cut() {
    let bp = MicBreakpoints::new(-1, 1).unwrap();
    let t = bp.true_breakpoints();
    assert_eq!((t.lower, t.upper), (-1.5, 0.5));
    // At the true lower cut, half a unit below the reported breakpoint.
    let p = p_mic(t.lower, bp, 0.707);
    assert!((p - 0.760_25).abs() < 1e-4, "{p}");
}

#[test]
fn grid_loss_agrees_with_a_ten_times_finer_brute_force() {
    let s = scenario("scenario1").unwrap();
    let (lo, hi) = s.support();
    let bp = MicBreakpoints::new(-6, -4).unwrap();
    let coarse = s.truth_grid();
    let g: Vec<f64> = s.truth.eval_grid(&coarse);
    let f: Vec<f64> = coarse.iter().map(|&u| s.density_at(u)).collect();
    let (best, grid) = optimal_breakpoints(&g, &f, &coarse, bp, s.sigma_m, s.sigma_d, SIM_SEARCH);
    let best_loss = grid.get(best).unwrap();

    let fine = linspace(lo, hi, 10 * coarse.len());
    let gf = s.truth.eval_grid(&fine);
    let ff: Vec<f64> = fine.iter().map(|&u| s.density_at(u)).collect();
    let mut brute = (DiaBreakpoints::new(0, 1).unwrap(), f64::INFINITY);
    for dl in SIM_SEARCH.d_min..SIM_SEARCH.d_max {
        for du in dl + 1..=SIM_SEARCH.d_max {
            let pair = DiaBreakpoints::new(dl, du).unwrap();
            let l = loss(pair, &gf, &ff, &fine, bp, s.sigma_m, s.sigma_d);
            if l < brute.1 {
                brute = (pair, l);
            }
        }
    }
    assert_eq!(best, brute.0);
    assert_eq!((best.lower, best.upper), (39, 43));
    assert!((best_loss - brute.1).abs() <= 1e-3 * brute.1, "{best_loss} vs {}", brute.1);
}

#[test]
fn narrower_search_cannot_beat_the_full_range() {
    let s = scenario("scenario2").unwrap();
    let grid = s.truth_grid();
    let g = s.truth.eval_grid(&grid);
    let f: Vec<f64> = grid.iter().map(|&u| s.density_at(u)).collect();
    let bp = MicBreakpoints::new(-2, 0).unwrap();
    let best = |search| {
        let (d, l) = optimal_breakpoints(&g, &f, &grid, bp, s.sigma_m, s.sigma_d, search);
        l.get(d).unwrap()
    };
    assert!(best(SIM_SEARCH) <= best(SearchRange::new(20, 30).unwrap()));
}

#[test]
fn observed_dia_mean_converges_to_the_curve_average() {
    let s = scenario("scenario1").unwrap();
    let sim = generate_scatterplot(&s, 200_000, 3).unwrap();
    let n = sim.pairs.len() as f64;
    let mean = sim.pairs.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let var = sim.pairs.iter().map(|p| (p.1 as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Rounding to the nearest integer is unbiased on average.
    let grid = linspace(s.support().0, s.support().1, 20_000);
    let h = grid[1] - grid[0];
    let truth: f64 = grid.iter().map(|&u| s.truth.eval(u) * s.density_at(u) * h).sum();
    assert!((mean - truth).abs() < 4.0 * (var / n).sqrt(), "mean {mean} vs {truth}");
    assert_eq!(sim.dataset.n_isolates(), 200_000);
}

#[test]
fn logistic_fits_recover_the_logistic_truth() {
    let mut plan = StudyPlan::new(scenario("scenario2").unwrap(), 5, 20_000);
    plan.scenario.mic_breakpoints.truncate(1);
    for rep in 0..plan.replicates {
        let r = run_replicate(&plan, rep, ModelKind::Logistic4).unwrap();
        assert!(r.sse_curve < 150.0, "replicate {rep}: SSE {}", r.sse_curve);
    }
}

/// Scenario 2 with MICs outside [-5, 1] reported as censored at the edge.
fn censored_dataset(seed: u64) -> (AssayDataset, usize) {
    let s = scenario("scenario2").unwrap();
    let sim = generate_scatterplot(&s, 600, seed).unwrap();
    let mut censored = 0;
    let obs: Vec<Observation> = sim
        .pairs
        .iter()
        .map(|&(x, y)| {
            let mut o = Observation::new(x.clamp(-5, 1), y, 1);
            if x <= -5 {
                o.mic_censor = Censor::Left;
            } else if x >= 1 {
                o.mic_censor = Censor::Right;
            }
            censored += (o.mic_censor != Censor::None) as usize;
            o
        })
        .collect();
    (AssayDataset::new("censored", obs, s.sigma_m, s.sigma_d).unwrap(), censored)
}

#[test]
fn censored_readings_fit_a_monotone_logistic() {
    let (data, censored) = censored_dataset(44);
    assert!(data.has_censoring());
    assert!(censored > 50, "only {censored} censored isolates");
    let mut cfg = SamplerConfig::new(ModelKind::Logistic4, 9);
    cfg.iterations = 6000;
    cfg.burn_in = 3000;
    let trace = run_chain(&cfg, &data).unwrap();
    assert!(trace.all_curves_monotone());

    let s = scenario("scenario2").unwrap();
    let truth = s.truth.eval_grid(&trace.grid);
    let rows = trace.n_samples() as f64;
    let mean: Vec<f64> = (0..trace.grid.len())
        .map(|j| trace.samples.iter().map(|t| t.g[j]).sum::<f64>() / rows)
        .collect();
    // Compare only inside the uncensored window, where the data pin the curve.
    let idx: Vec<usize> = (0..trace.grid.len()).filter(|&j| (-4.0..=0.0).contains(&trace.grid[j])).collect();
    let sub = |v: &[f64]| idx.iter().map(|&j| v[j]).collect::<Vec<f64>>();
    let err = sse(&sub(&mean), &sub(&truth), &sub(&trace.grid));
    assert!(err < 20.0, "SSE on [-4, 0] = {err}");
}

#[test]
fn saved_fits_reload_bit_for_bit() {
    let s = scenario("scenario4").unwrap();
    let sim = generate_scatterplot(&s, 200, 8).unwrap();
    let mut cfg = SamplerConfig::new(ModelKind::SplineRj, 2);
    cfg.iterations = 1500;
    cfg.burn_in = 500;
    cfg.grid_points = 150;
    let trace = run_chain(&cfg, &sim.dataset).unwrap();
    let dir = tempfile::tempdir().unwrap();
    FitArtifact::from_trace(&cfg, &sim.dataset, &trace).save(dir.path(), &trace, &sim.dataset).unwrap();
    let (art, back) = FitArtifact::load(dir.path()).unwrap();
    assert_eq!(art.config, cfg);
    assert_eq!(back.grid, trace.grid);
    assert_eq!(back.g_matrix(), trace.g_matrix());
    assert_eq!(back.f_matrix(), trace.f_matrix());
    let reloaded = art.load_dataset(dir.path()).unwrap();
    assert_eq!(reloaded.digest(), sim.dataset.digest());
    for (a, b) in back.samples.iter().zip(&trace.samples) {
        assert_eq!(a.n_knots, b.n_knots);
        if let (CurveModel::ISpline(x), CurveModel::ISpline(y)) = (&a.curve, &b.curve) {
            assert_eq!(x.coeffs(), y.coeffs());
        }
    }
}
