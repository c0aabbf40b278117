//! Campaign metrics and the paired-comparison statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: String,
    pub pipeline_kind: String,
    pub lambda: f64,
    pub seed: u64,
    pub n_events: usize,
    pub completed: usize,
    pub completion_rate: f64,
    pub mean_latency_ms: Option<f64>,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
}

/// Nearest-rank percentile of sorted data, `q` in (0, 1].
pub fn nearest_rank(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    // Slack absorbs rounding in q, e.g. (1 - 0.95) / 2 * 10000 = 250.0000000004.
    let rank = ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Some(sorted[rank - 1])
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Completion rate over the pipelines that arrived in the window, latency
/// statistics over the completed ones.
pub fn summarize(
    strategy: &str,
    pipeline_kind: &str,
    lambda: f64,
    seed: u64,
    arrived: usize,
    completed_latencies: &[f64],
) -> Result<CellSummary> {
    if arrived == 0 {
        return Err(Error::Argument("run has no arrivals in the window".into()));
    }
    if completed_latencies.len() > arrived {
        return Err(Error::Argument("more completions than arrivals".into()));
    }
    let mut sorted = completed_latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(CellSummary {
        strategy: strategy.to_string(),
        pipeline_kind: pipeline_kind.to_string(),
        lambda,
        seed,
        n_events: arrived,
        completed: sorted.len(),
        completion_rate: sorted.len() as f64 / arrived as f64,
        mean_latency_ms: mean(&sorted),
        p50_ms: nearest_rank(&sorted, 0.50),
        p95_ms: nearest_rank(&sorted, 0.95),
        p99_ms: nearest_rank(&sorted, 0.99),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Counts a win when the difference is negative.
    Less,
    Greater,
}

/// One-tailed paired sign test: P(X >= wins) for X ~ Bin(n, 1/2), with zero
/// differences dropped.
pub fn sign_test(diffs: &[f64], direction: Direction) -> Result<f64> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(Error::Undefined("sign test with no nonzero differences".into()));
    }
    let wins = nonzero
        .iter()
        .filter(|d| match direction {
            Direction::Less => **d < 0.0,
            Direction::Greater => **d > 0.0,
        })
        .count();
    Ok(binomial_upper_tail(n, wins))
}

/// P(X >= k) for X ~ Bin(n, 1/2).
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if n <= 120 {
        let mut c: u128 = 1;
        let mut total: u128 = 0;
        for i in 0..=n {
            if i >= k {
                total += c;
            }
            if i < n {
                c = c * (n - i) as u128 / (i + 1) as u128;
            }
        }
        return total as f64 / 2f64.powi(n as i32);
    }
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    b.sf(k as u64 - 1)
}

/// Median of all pairwise (self-inclusive) Walsh averages.
pub fn hodges_lehmann(diffs: &[f64]) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::Argument("Hodges-Lehmann of an empty sample".into()));
    }
    let mut walsh = Vec::with_capacity(diffs.len() * (diffs.len() + 1) / 2);
    for i in 0..diffs.len() {
        for j in i..diffs.len() {
            walsh.push((diffs[i] + diffs[j]) / 2.0);
        }
    }
    walsh.sort_by(f64::total_cmp);
    Ok(median_sorted(&walsh))
}

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Some(median_sorted(&v))
}

/// Percentile bootstrap interval with nearest-rank endpoints.
pub fn bootstrap_ci(
    values: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Argument("bootstrap of an empty sample".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument("bootstrap needs B >= 1 and level in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; values.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = values[rng.gen_range(0..values.len())];
            }
            statistic(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok(percentile_interval(&stats, level))
}

/// Nearest-rank (alpha/2, 1 - alpha/2) bounds of a sorted distribution.
pub fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    let lo = nearest_rank(sorted, alpha / 2.0).expect("nonempty");
    let hi = nearest_rank(sorted, 1.0 - alpha / 2.0).expect("nonempty");
    (lo, hi)
}

pub const KNEE_GRID_STEP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeFit {
    pub breakpoint: f64,
    /// Slopes left and right of the breakpoint.
    pub slope_left: f64,
    pub slope_right: f64,
    pub sse: f64,
    pub ci: Option<(f64, f64)>,
    /// No change of slope: flat or single-line data.
    pub degenerate: bool,
}

struct HingeFit {
    k: f64,
    coef: [f64; 3],
    sse: f64,
}

/// Least squares of y = a + b x + c (x - k)+ for fixed k.
fn fit_hinge(points: &[(f64, f64)], k: f64) -> Option<HingeFit> {
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(x, y) in points {
        let row = [1.0, x, (x - k).max(0.0)];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    let coef = solve3(ata, aty)?;
    let sse = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (coef[0] + coef[1] * x + coef[2] * (x - k).max(0.0));
            r * r
        })
        .sum();
    Some(HingeFit { k, coef, sse })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..3 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

fn knee_point(points: &[(f64, f64)]) -> Result<(HingeFit, bool)> {
    let distinct = {
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    };
    if distinct.len() < 4 {
        return Err(Error::Argument("knee fit needs at least 4 distinct lambdas".into()));
    }
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let steps = ((hi - lo) / KNEE_GRID_STEP).round() as i64;
    let mut best: Option<HingeFit> = None;
    for s in 1..steps {
        let k = lo + s as f64 * KNEE_GRID_STEP;
        if let Some(f) = fit_hinge(points, k) {
            // Strict improvement keeps the smallest breakpoint on ties.
            if best.as_ref().is_none_or(|b| f.sse < b.sse - 1e-12) {
                best = Some(f);
            }
        }
    }
    let best = best.ok_or_else(|| Error::Argument("knee fit has no admissible breakpoint".into()))?;
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let scale = ys.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1.0);
    let flat = ys.iter().all(|y| (y - ys[0]).abs() <= 1e-9 * scale);
    let degenerate = flat || best.coef[2].abs() <= 1e-9 * scale;
    Ok((best, degenerate))
}

/// Two-segment knee of completion rate versus offered load, with a
/// bootstrap CI from resampling the points.
pub fn knee_fit(points: &[(f64, f64)], bootstrap_b: usize, seed: u64) -> Result<KneeFit> {
    let (best, degenerate) = knee_point(points)?;
    let ci = if bootstrap_b > 0 && !degenerate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ks = Vec::with_capacity(bootstrap_b);
        let mut sample = vec![(0.0, 0.0); points.len()];
        for _ in 0..bootstrap_b {
            for slot in sample.iter_mut() {
                *slot = points[rng.gen_range(0..points.len())];
            }
            if let Ok((f, false)) = knee_point(&sample) {
                ks.push(f.k);
            }
        }
        ks.sort_by(f64::total_cmp);
        (!ks.is_empty()).then(|| percentile_interval(&ks, 0.95))
    } else {
        None
    };
    Ok(KneeFit {
        breakpoint: best.k,
        slope_left: best.coef[1],
        slope_right: best.coef[1] + best.coef[2],
        sse: best.sse,
        ci,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub eta_market: f64,
    pub eta_oracle: f64,
    pub delta_eff: f64,
}

impl EfficiencyReport {
    pub fn from_welfare(eta_market: f64, eta_oracle: f64) -> Result<EfficiencyReport> {
        if !(eta_oracle > 0.0) {
            return Err(Error::Undefined(format!("oracle welfare {eta_oracle} is not positive")));
        }
        Ok(EfficiencyReport { eta_market, eta_oracle, delta_eff: 1.0 - eta_market / eta_oracle })
    }
}

/// Pipeline value minus placement cost, summed over completed pipelines.
pub fn welfare(completed_costs: &[f64], pipeline_value: f64) -> f64 {
    completed_costs.iter().map(|c| pipeline_value - c).sum()
}

pub fn efficiency_gap(market_costs: &[f64], oracle_costs: &[f64], pipeline_value: f64) -> Result<EfficiencyReport> {
    EfficiencyReport::from_welfare(welfare(market_costs, pipeline_value), welfare(oracle_costs, pipeline_value))
}

pub const TIE_THRESHOLD_MS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

/// Market versus baseline mean latency for one cell.
pub fn compare_cell(market_mean: f64, baseline_mean: f64) -> Outcome {
    let d = market_mean - baseline_mean;
    if d.abs() < TIE_THRESHOLD_MS {
        Outcome::Tie
    } else if d < 0.0 {
        Outcome::Win
    } else {
        Outcome::Loss
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub baseline: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub sign_p: Option<f64>,
    pub hl_ms: Option<f64>,
    pub ci_ms: Option<(f64, f64)>,
}

/// Paired comparison over matched cells: (market mean, baseline mean).
pub fn compare(baseline: &str, pairs: &[(f64, f64)], bootstrap_b: usize, seed: u64) -> ComparisonReport {
    let mut r = ComparisonReport {
        baseline: baseline.to_string(),
        wins: 0,
        losses: 0,
        ties: 0,
        sign_p: None,
        hl_ms: None,
        ci_ms: None,
    };
    for &(m, b) in pairs {
        match compare_cell(m, b) {
            Outcome::Win => r.wins += 1,
            Outcome::Loss => r.losses += 1,
            Outcome::Tie => r.ties += 1,
        }
    }
    let diffs: Vec<f64> = pairs.iter().map(|(m, b)| m - b).collect();
    r.sign_p = sign_test(&diffs, Direction::Less).ok();
    r.hl_ms = hodges_lehmann(&diffs).ok();
    if bootstrap_b > 0 && !diffs.is_empty() {
        r.ci_ms = bootstrap_ci(&diffs, |s| hodges_lehmann(s).unwrap_or(f64::NAN), bootstrap_b, 0.95, seed).ok();
    }
    r
}

impl ComparisonReport {
    pub fn render(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let ci = self.ci_ms.map_or("n/a".to_string(), |(a, b)| format!("[{a:.2}, {b:.2}]"));
        format!(
            "market vs {}: wins {} losses {} ties {} | sign-test p {} | HL {} ms | 95% CI {}",
            self.baseline,
            self.wins,
            self.losses,
            self.ties,
            self.sign_p.map_or("n/a".to_string(), |p| format!("{p:.3e}")),
            fmt(self.hl_ms),
            ci
        )
    }
}
