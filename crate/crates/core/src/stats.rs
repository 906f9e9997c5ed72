//! Small numeric helpers shared by the sampler, breakpoint and simulation code.

/// Trapezoid rule for `∫ y dx` on an ascending, possibly uneven grid.
pub fn trapezoid(grid: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(grid.len(), y.len());
    grid.windows(2)
        .zip(y.windows(2))
        .map(|(x, v)| 0.5 * (x[1] - x[0]) * (v[0] + v[1]))
        .sum()
}

/// Per-point trapezoid weights, so that `Σ w_i y_i = trapezoid(grid, y)`.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = 0.5 * (grid[i] - grid[i - 1]);
        w[i - 1] += h;
        w[i] += h;
    }
    w
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mu = mean(values);
    values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (values.len() - 1) as f64
}

pub fn std_dev(values: &[f64]) -> f64 {
    variance(values).sqrt()
}

/// Column-wise quantiles of row-major `rows × cols` data.
pub fn column_quantiles(data: &[f64], rows: usize, cols: usize, probs: &[f64]) -> Vec<Vec<f64>> {
    assert_eq!(data.len(), rows * cols);
    let mut out = vec![Vec::with_capacity(cols); probs.len()];
    let mut col = vec![0.0; rows];
    for j in 0..cols {
        for i in 0..rows {
            col[i] = data[i * cols + j];
        }
        col.sort_by(f64::total_cmp);
        for (k, &p) in probs.iter().enumerate() {
            out[k].push(quantile_sorted(&col, p));
        }
    }
    out
}
