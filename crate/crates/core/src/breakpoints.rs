//! Correct-classification probabilities, the density-weighted loss and the
//! search for optimal DIA breakpoints, per posterior draw.
//!
//! Regions are decided on the true-MIC scale: `m ≤ M_L − 0.5` is
//! susceptible, `m ≥ M_U − 0.5` resistant, anything between intermediate.
//! Within each region the probability that the assay reports that same
//! category is compared between MIC and DIA, and the loss accumulates
//! `min(0, p_DIA − p_MIC)² f(m)` over the grid.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::CurveModel;
use crate::data::{DiaBreakpoints, MicBreakpoints};
use crate::normal::{cdf, sf};
use crate::sampler::ChainTrace;
use crate::stats::trapezoid_weights;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Susceptible,
    Intermediate,
    Resistant,
}

impl Region {
    fn index(self) -> usize {
        match self {
            Region::Susceptible => 0,
            Region::Intermediate => 1,
            Region::Resistant => 2,
        }
    }
}

/// Category of a true MIC under the shifted (true-scale) breakpoints.
pub fn region(m: f64, bp: MicBreakpoints) -> Region {
    let t = bp.true_breakpoints();
    if m <= t.lower {
        Region::Susceptible
    } else if m >= t.upper {
        Region::Resistant
    } else {
        Region::Intermediate
    }
}

/// `[Pr(x ≤ M_L), Pr(M_L < x < M_U), Pr(x ≥ M_U)]` for true MIC `m`.
pub fn p_mic_branches(m: f64, bp: MicBreakpoints, sigma_m: f64) -> [f64; 3] {
    let a = (bp.lower as f64 - m) / sigma_m;
    let b = (bp.upper as f64 - 1.0 - m) / sigma_m;
    let s = cdf(a);
    let r = sf(b);
    [s, 1.0 - s - r, r]
}

/// Probability that the MIC assay classifies `m` correctly.
pub fn p_mic(m: f64, bp: MicBreakpoints, sigma_m: f64) -> f64 {
    p_mic_branches(m, bp, sigma_m)[region(m, bp).index()]
}

/// `[Pr(y ≥ D_U), Pr(D_L < y < D_U), Pr(y ≤ D_L)]` for true DIA `d`.
pub fn p_dia_branches(d: f64, dia: DiaBreakpoints, sigma_d: f64) -> [f64; 3] {
    let zu = (dia.upper as f64 - 0.5 - d) / sigma_d;
    let r = cdf((dia.lower as f64 + 0.5 - d) / sigma_d);
    [sf(zu), cdf(zu) - r, r]
}

/// Probability that the DIA assay classifies `m` correctly, with the region
/// taken from the MIC breakpoints.
pub fn p_dia(m: f64, g: &CurveModel, dia: DiaBreakpoints, bp: MicBreakpoints, sigma_d: f64) -> f64 {
    p_dia_branches(g.eval(m), dia, sigma_d)[region(m, bp).index()]
}

#[inline]
fn shortfall_sq(p_dia: f64, p_mic: f64) -> f64 {
    let d = p_dia - p_mic;
    if d < 0.0 {
        d * d
    } else {
        0.0
    }
}

/// Loss of one breakpoint pair for a curve tabulated on `grid`.
pub fn loss(
    dia: DiaBreakpoints,
    g_on_grid: &[f64],
    f_on_grid: &[f64],
    grid: &[f64],
    bp: MicBreakpoints,
    sigma_m: f64,
    sigma_d: f64,
) -> f64 {
    assert_eq!(g_on_grid.len(), grid.len());
    assert_eq!(f_on_grid.len(), grid.len());
    let w = trapezoid_weights(grid);
    grid.iter()
        .enumerate()
        .map(|(i, &u)| {
            let r = region(u, bp).index();
            let pd = p_dia_branches(g_on_grid[i], dia, sigma_d)[r];
            let pm = p_mic_branches(u, bp, sigma_m)[r];
            w[i] * f_on_grid[i] * shortfall_sq(pd, pm)
        })
        .sum()
}

/// [`loss`] with the curve evaluated on the grid first.
pub fn loss_for_curve(
    dia: DiaBreakpoints,
    g: &CurveModel,
    f_on_grid: &[f64],
    grid: &[f64],
    bp: MicBreakpoints,
    sigma_m: f64,
    sigma_d: f64,
) -> f64 {
    loss(dia, &g.eval_grid(grid), f_on_grid, grid, bp, sigma_m, sigma_d)
}

/// Inclusive integer range searched for `D_L < D_U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRange {
    pub d_min: i32,
    pub d_max: i32,
}

impl Default for SearchRange {
    fn default() -> Self {
        Self { d_min: 6, d_max: 40 }
    }
}

impl SearchRange {
    pub fn new(d_min: i32, d_max: i32) -> Result<Self> {
        if d_min >= d_max {
            return Err(Error::Validation(format!("search range needs d_min < d_max, got [{d_min}, {d_max}]")));
        }
        Ok(Self { d_min, d_max })
    }

    fn size(&self) -> usize {
        (self.d_max - self.d_min + 1) as usize
    }
}

/// Loss for every `(D_L, D_U)` pair of a search range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGrid {
    pub search: SearchRange,
    /// Row-major by `D_L − d_min`, column `D_U − d_min`; `None` where `D_L ≥ D_U`.
    pub values: Vec<Option<f64>>,
}

impl LossGrid {
    fn empty(search: SearchRange) -> Self {
        let n = search.size();
        let mut values = vec![None; n * n];
        for l in 0..n {
            for u in l + 1..n {
                values[l * n + u] = Some(0.0);
            }
        }
        Self { search, values }
    }

    pub fn get(&self, dia: DiaBreakpoints) -> Option<f64> {
        let n = self.search.size() as i32;
        let (l, u) = (dia.lower - self.search.d_min, dia.upper - self.search.d_min);
        if l < 0 || u < 0 || l >= n || u >= n {
            return None;
        }
        self.values[(l * n + u) as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (DiaBreakpoints, f64)> + '_ {
        let n = self.search.size();
        let d0 = self.search.d_min;
        self.values.iter().enumerate().filter_map(move |(idx, v)| {
            v.map(|v| (DiaBreakpoints { lower: d0 + (idx / n) as i32, upper: d0 + (idx % n) as i32 }, v))
        })
    }

    /// Minimizer with ties (to relative 1e-12) resolved toward the widest
    /// pair, then the smallest `D_L`.
    pub fn argmin(&self) -> DiaBreakpoints {
        let mut best: Option<(DiaBreakpoints, f64)> = None;
        for (pair, v) in self.iter() {
            best = match best {
                None => Some((pair, v)),
                Some((bp, bv)) => {
                    let tol = 1e-12 * bv.abs().max(v.abs());
                    if v < bv - tol {
                        Some((pair, v))
                    } else if (v - bv).abs() <= tol && prefer(pair, bp) {
                        Some((pair, v.min(bv)))
                    } else {
                        Some((bp, bv))
                    }
                }
            };
        }
        best.expect("a search range holds at least one pair").0
    }

    fn add_scaled(&mut self, other: &LossGrid, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if let (Some(a), Some(b)) = (a.as_mut(), b) {
                *a += scale * b;
            }
        }
    }
}

/// True if `a` beats `b` on the tie-break: wider, then smaller lower bound.
fn prefer(a: DiaBreakpoints, b: DiaBreakpoints) -> bool {
    (a.width(), -a.lower) > (b.width(), -b.lower)
}

/// Loss for all pairs at once.
///
/// With `c_i(D) = Φ((D + 0.5 − g_i)/σ_d)`, susceptible points contribute
/// through `1 − c_i(D_U − 1)` only and resistant points through `c_i(D_L)`
/// only, so those parts are tabulated once per bound; intermediate points
/// need the pair.
pub fn loss_grid(
    g_on_grid: &[f64],
    f_on_grid: &[f64],
    grid: &[f64],
    bp: MicBreakpoints,
    sigma_m: f64,
    sigma_d: f64,
    search: SearchRange,
) -> LossGrid {
    assert_eq!(g_on_grid.len(), grid.len());
    assert_eq!(f_on_grid.len(), grid.len());
    let n = search.size();
    let n_c = n - 1; // D from d_min to d_max − 1
    let tw = trapezoid_weights(grid);

    let mut s_term = vec![0.0; n]; // indexed by D_U − d_min
    let mut r_term = vec![0.0; n]; // indexed by D_L − d_min
    let mut i_term = vec![0.0; n * n];
    let mut c = vec![0.0; n_c];

    for (i, &u) in grid.iter().enumerate() {
        let w = tw[i] * f_on_grid[i];
        if w == 0.0 {
            continue;
        }
        let reg = region(u, bp);
        let pm = p_mic_branches(u, bp, sigma_m)[reg.index()];
        if pm == 0.0 {
            continue;
        }
        let c_at = |j: usize| cdf(((search.d_min + j as i32) as f64 + 0.5 - g_on_grid[i]) / sigma_d);
        // Each call probability is monotone in the bound, so the shortfall
        // vanishes past the first bound where it reaches `pm`.
        match reg {
            Region::Susceptible => {
                for du in (1..n).rev() {
                    let z = (search.d_min + du as i32) as f64 - 0.5 - g_on_grid[i];
                    let p = sf(z / sigma_d);
                    if p >= pm {
                        break;
                    }
                    s_term[du] += w * shortfall_sq(p, pm);
                }
            }
            Region::Resistant => {
                for dl in 0..n_c {
                    let p = c_at(dl);
                    if p >= pm {
                        break;
                    }
                    r_term[dl] += w * shortfall_sq(p, pm);
                }
            }
            Region::Intermediate => {
                for (j, cj) in c.iter_mut().enumerate() {
                    *cj = c_at(j);
                }
                for dl in 0..n_c {
                    for du in dl + 1..n {
                        let p = c[du - 1] - c[dl];
                        if p >= pm {
                            break;
                        }
                        i_term[dl * n + du] += w * shortfall_sq(p, pm);
                    }
                }
            }
        }
    }

    let mut out = LossGrid::empty(search);
    for dl in 0..n {
        for du in dl + 1..n {
            out.values[dl * n + du] = Some(s_term[du] + r_term[dl] + i_term[dl * n + du]);
        }
    }
    out
}

/// Breakpoint pair minimizing the loss over the search range.
pub fn optimal_breakpoints(
    g_on_grid: &[f64],
    f_on_grid: &[f64],
    grid: &[f64],
    bp: MicBreakpoints,
    sigma_m: f64,
    sigma_d: f64,
    search: SearchRange,
) -> (DiaBreakpoints, LossGrid) {
    let lg = loss_grid(g_on_grid, f_on_grid, grid, bp, sigma_m, sigma_d, search);
    (lg.argmin(), lg)
}

/// One row of a posterior table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRow {
    pub d_lower: i32,
    pub d_upper: i32,
    pub pct: f64,
    pub cum_pct: f64,
}

/// Frequencies of optimal breakpoint pairs across posterior draws.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BreakpointPosterior {
    counts: BTreeMap<DiaBreakpoints, u64>,
    total: u64,
}

impl BreakpointPosterior {
    pub fn from_sets(sets: impl IntoIterator<Item = DiaBreakpoints>) -> Self {
        let mut p = Self::default();
        for s in sets {
            p.add(s, 1);
        }
        p
    }

    pub fn add(&mut self, set: DiaBreakpoints, count: u64) {
        *self.counts.entry(set).or_default() += count;
        self.total += count;
    }

    pub fn merge(&mut self, other: &BreakpointPosterior) {
        for (&k, &v) in &other.counts {
            self.add(k, v);
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, set: DiaBreakpoints) -> u64 {
        self.counts.get(&set).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<DiaBreakpoints, u64> {
        &self.counts
    }

    /// Pairs by descending frequency; equal frequencies ordered by the MAP
    /// tie-break.
    pub fn ranked(&self) -> Vec<(DiaBreakpoints, u64)> {
        let mut v: Vec<_> = self.counts.iter().map(|(&k, &c)| (k, c)).collect();
        v.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(b.0.width().cmp(&a.0.width()))
                .then(a.0.lower.cmp(&b.0.lower))
        });
        v
    }

    /// Most frequent pair; ties go to the wider set, then the smaller `D_L`.
    pub fn map_set(&self) -> Option<DiaBreakpoints> {
        self.ranked().first().map(|r| r.0)
    }

    /// All rows with percentages and running totals.
    pub fn full_table(&self) -> Vec<PosteriorRow> {
        let mut cum = 0u64;
        self.ranked()
            .into_iter()
            .map(|(set, c)| {
                cum += c;
                PosteriorRow {
                    d_lower: set.lower,
                    d_upper: set.upper,
                    pct: 100.0 * c as f64 / self.total as f64,
                    cum_pct: 100.0 * cum as f64 / self.total as f64,
                }
            })
            .collect()
    }

    /// Leading rows up to and including the first to reach 95% cumulative.
    pub fn table(&self) -> Vec<PosteriorRow> {
        let mut out = Vec::new();
        for row in self.full_table() {
            let done = row.cum_pct >= 95.0 - 1e-9;
            out.push(row);
            if done {
                break;
            }
        }
        out
    }
}

/// Posterior over breakpoint pairs plus the posterior-mean loss surface.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakpointAnalysis {
    pub posterior: BreakpointPosterior,
    pub mean_loss: LossGrid,
}

/// Optimize breakpoints separately for each row of row-major `g`/`f` grids.
#[allow(clippy::too_many_arguments)]
pub fn analyze_samples(
    grid: &[f64],
    g_rows: &[f64],
    f_rows: &[f64],
    bp: MicBreakpoints,
    sigma_m: f64,
    sigma_d: f64,
    search: SearchRange,
) -> Result<BreakpointAnalysis> {
    let cols = grid.len();
    if cols == 0 || !g_rows.len().is_multiple_of(cols) || g_rows.len() != f_rows.len() {
        return Err(Error::Contract("sample grids do not match the evaluation grid".into()));
    }
    let rows = g_rows.len() / cols;
    if rows == 0 {
        return Err(Error::Contract("no posterior samples".into()));
    }
    let per_sample: Vec<(DiaBreakpoints, LossGrid)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let g = &g_rows[r * cols..(r + 1) * cols];
            let f = &f_rows[r * cols..(r + 1) * cols];
            optimal_breakpoints(g, f, grid, bp, sigma_m, sigma_d, search)
        })
        .collect();
    let mut posterior = BreakpointPosterior::default();
    let mut mean_loss = LossGrid::empty(search);
    for (set, lg) in &per_sample {
        posterior.add(*set, 1);
        mean_loss.add_scaled(lg, 1.0 / rows as f64);
    }
    Ok(BreakpointAnalysis { posterior, mean_loss })
}

pub fn breakpoint_posterior(
    trace: &ChainTrace,
    bp: MicBreakpoints,
    sigma_m: f64,
    sigma_d: f64,
    search: SearchRange,
) -> Result<BreakpointPosterior> {
    Ok(analyze_samples(&trace.grid, &trace.g_matrix(), &trace.f_matrix(), bp, sigma_m, sigma_d, search)?
        .posterior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::{linspace, LinearCurve, Logistic4};
    use crate::normal::ln_normal;

    const SM: f64 = 0.707;
    const SD: f64 = 2.121;

    fn bp(l: i32, u: i32) -> MicBreakpoints {
        MicBreakpoints::new(l, u).unwrap()
    }

    fn dia(l: i32, u: i32) -> DiaBreakpoints {
        DiaBreakpoints::new(l, u).unwrap()
    }

    #[test]
    fn mic_boundary_probability() {
        let b = bp(-1, 1);
        let p = p_mic(-1.5, b, SM);
        assert!((p - 0.760_249_938_906_457).abs() < 1e-4);
        assert!(p_mic(-40.0, b, SM) > 1.0 - 1e-15);
    }

    #[test]
    fn branches_partition() {
        for &m in &[-7.0, -1.5, -0.2, 0.5, 3.3] {
            let s: f64 = p_mic_branches(m, bp(-1, 1), SM).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let s: f64 = p_dia_branches(m * 5.0 + 20.0, dia(14, 19), SD).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dia_half_at_boundary_and_tail_limit() {
        let g = CurveModel::Linear(LinearCurve::new(21.5, 0.0).unwrap());
        assert!((p_dia(-5.0, &g, dia(15, 22), bp(-1, 1), SD) - 0.5).abs() < 1e-15);
        let g = CurveModel::Linear(LinearCurve::new(1e6, 0.0).unwrap());
        assert_eq!(p_dia(-5.0, &g, dia(15, 22), bp(-1, 1), SD), 1.0);
    }

    fn setup() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let grid = linspace(-6.5, 5.5, 1000);
        let curve = Logistic4::new(35.0, 1.17, 0.1, 1.2).unwrap();
        let g: Vec<f64> = grid.iter().map(|&u| curve.eval(u)).collect();
        let f: Vec<f64> = grid
            .iter()
            .map(|&u| 0.3 * ln_normal(u, -4.6, 0.36).exp() + 0.7 * ln_normal(u, 0.5, 1.0).exp())
            .collect();
        (grid, g, f)
    }

    #[test]
    fn fast_grid_matches_direct_loss() {
        let (grid, g, f) = setup();
        let b = bp(-1, 1);
        let search = SearchRange::default();
        let lg = loss_grid(&g, &f, &grid, b, SM, SD, search);
        for (pair, v) in lg.iter() {
            let direct = loss(pair, &g, &f, &grid, b, SM, SD);
            assert!((v - direct).abs() <= 1e-12 * direct.max(1e-6), "{pair}: {v} vs {direct}");
        }
    }

    #[test]
    fn loss_is_linear_in_the_weight_and_zero_when_dia_dominates() {
        let (grid, g, f) = setup();
        let b = bp(-1, 1);
        let pair = dia(18, 24);
        let l1 = loss(pair, &g, &f, &grid, b, SM, SD);
        let f2: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
        let l2 = loss(pair, &g, &f2, &grid, b, SM, SD);
        assert!(l1 > 0.0);
        assert!((l2 - 2.0 * l1).abs() < 1e-15 * l1.max(1.0) * 10.0);
        let zero = vec![0.0; grid.len()];
        assert_eq!(loss(pair, &g, &zero, &grid, b, SM, SD), 0.0);

        // A curve with a 200 mm cliff and a negligible DIA error beats MIC everywhere.
        let steep: Vec<f64> = grid.iter().map(|&u| if u < -0.5 { 200.0 } else { -200.0 }).collect();
        let b2 = bp(0, 1);
        assert!(loss(dia(10, 20), &steep, &f, &grid, b2, SM, 1e-3) < 1e-30);
    }

    #[test]
    fn zero_loss_ties_pick_the_widest_pair() {
        let (grid, _, f) = setup();
        // Sharp step between the true MIC breakpoints, tiny DIA error.
        let g: Vec<f64> = grid.iter().map(|&u| if u <= -1.5 { 300.0 } else if u >= 0.5 { -300.0 } else { 20.0 }).collect();
        let (best, lg) = optimal_breakpoints(&g, &f, &grid, bp(-1, 1), SM, 1e-3, SearchRange::default());
        assert_eq!(lg.get(best), Some(0.0));
        // Every pair with D_L ≤ 19 and D_U ≥ 21 is loss-free; the widest wins.
        assert_eq!(best, dia(6, 40));
        assert!(lg.get(dia(20, 21)).unwrap() > 0.0);
    }

    #[test]
    fn rescaling_the_density_keeps_the_argmin() {
        let (grid, g, f) = setup();
        let f3: Vec<f64> = f.iter().map(|v| v * 7.5).collect();
        let s = SearchRange::default();
        let a = optimal_breakpoints(&g, &f, &grid, bp(0, 2), SM, SD, s).0;
        let b = optimal_breakpoints(&g, &f3, &grid, bp(0, 2), SM, SD, s).0;
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_table_shape() {
        let sets = [dia(18, 22), dia(18, 22), dia(17, 22), dia(18, 22), dia(19, 23)];
        let p = BreakpointPosterior::from_sets(sets);
        assert_eq!(p.map_set(), Some(dia(18, 22)));
        let t = p.full_table();
        assert_eq!(t[0].pct, 60.0);
        assert!(t.windows(2).all(|w| w[0].pct >= w[1].pct && w[1].cum_pct >= w[0].cum_pct));
        assert!((t.last().unwrap().cum_pct - 100.0).abs() < 1e-12);
        // (17,22) is wider than (19,23), so it ranks first among the ties.
        assert_eq!((t[1].d_lower, t[1].d_upper), (17, 22));

        let mut q = p.clone();
        q.merge(&p);
        assert_eq!(q.total(), 10);
        assert_eq!(q.count(dia(18, 22)), 6);
    }

    #[test]
    fn map_tie_break() {
        let p = BreakpointPosterior::from_sets([dia(18, 22), dia(17, 22), dia(16, 21)]);
        assert_eq!(p.map_set(), Some(dia(16, 21)));
    }

    #[test]
    fn identical_samples_give_a_single_row() {
        let (grid, g, f) = setup();
        let rows = 5;
        let gr: Vec<f64> = (0..rows).flat_map(|_| g.iter().copied()).collect();
        let fr: Vec<f64> = (0..rows).flat_map(|_| f.iter().copied()).collect();
        let a = analyze_samples(&grid, &gr, &fr, bp(-1, 1), SM, SD, SearchRange::default()).unwrap();
        let t = a.posterior.table();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].pct, 100.0);
        let single = loss_grid(&g, &f, &grid, bp(-1, 1), SM, SD, SearchRange::default());
        for ((_, a), (_, b)) in a.mean_loss.iter().zip(single.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.max(1e-12));
        }
    }
}
