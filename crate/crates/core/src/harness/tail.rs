use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::record::SampleRecord;
use crate::error::{Error, Result};
use crate::probes::clopper_pearson;

pub const MIN_RECORDS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub m: u32,
    pub count: usize,
    pub p: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub dim: usize,
    pub n: u32,
    pub records: usize,
    pub mean: f64,
    /// Normal-approximation 95% interval for the mean.
    pub mean_ci: (f64, f64),
    pub survival: Vec<SurvivalPoint>,
    /// Slope of `log P(N ≥ M)` against `log M` over points with `0 < P < 1`.
    pub slope: Option<f64>,
    /// Least-squares `C` in `P ≈ C/M`.
    pub c: Option<f64>,
    /// Least-squares `C'` in `P ≈ C'/M²`.
    pub c2: Option<f64>,
    /// Samples with `n < M` (mesh coarser than `1/M`) and `N ≥ 100 M²`.
    pub coarse_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub m_grid: Vec<u32>,
    pub rows: Vec<TailRow>,
}

impl TailEstimate {
    pub fn row(&self, dim: usize, n: u32) -> Option<&TailRow> {
        self.rows.iter().find(|r| r.dim == dim && r.n == n)
    }
}

/// Ordinary least squares slope and intercept.
pub fn ols(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let k = xs.len();
    if k < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / k as f64;
    let my = ys.iter().sum::<f64>() / k as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / sxx;
    Some((slope, my - slope * mx))
}

fn through_origin(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    (sxx > 0.0).then(|| xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / sxx)
}

/// Empirical tail of `N_δ` per `(dim, n)` over the grid of `M`; needs at
/// least [`MIN_RECORDS`] successful records per `n`.
pub fn estimate_tail(records: &[SampleRecord], m_grid: &[u32]) -> Result<TailEstimate> {
    estimate_tail_with_min(records, m_grid, MIN_RECORDS)
}

pub fn estimate_tail_with_min(
    records: &[SampleRecord],
    m_grid: &[u32],
    min_records: usize,
) -> Result<TailEstimate> {
    let mut by_n: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
    for r in records {
        if let Some(v) = r.n_delta {
            by_n.entry((r.dim, r.n)).or_default().push(v);
        }
    }
    let mut grid = m_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut rows = Vec::new();
    for ((dim, n), vals) in by_n {
        if vals.len() < min_records {
            return Err(Error::InsufficientRecords {
                n,
                got: vals.len(),
                needed: min_records,
            });
        }
        let total = vals.len();
        let mean = vals.iter().sum::<usize>() as f64 / total as f64;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / (total.max(2) - 1) as f64;
        let half = 1.96 * (var / total as f64).sqrt();
        let survival: Vec<SurvivalPoint> = grid
            .iter()
            .map(|&m| {
                let count = vals.iter().filter(|&&v| v >= m as usize).count();
                let (ci_lo, ci_hi) = clopper_pearson(count as u64, total as u64, 0.05);
                SurvivalPoint {
                    m,
                    count,
                    p: count as f64 / total as f64,
                    ci_lo,
                    ci_hi,
                }
            })
            .collect();
        let decaying: Vec<&SurvivalPoint> =
            survival.iter().filter(|s| s.p > 0.0 && s.p < 1.0).collect();
        let lx: Vec<f64> = decaying.iter().map(|s| (s.m as f64).ln()).collect();
        let ly: Vec<f64> = decaying.iter().map(|s| s.p.ln()).collect();
        let inv: Vec<f64> = survival.iter().map(|s| 1.0 / s.m as f64).collect();
        let inv2: Vec<f64> = inv.iter().map(|x| x * x).collect();
        let ps: Vec<f64> = survival.iter().map(|s| s.p).collect();
        let coarse_violations = grid
            .iter()
            .filter(|&&m| n < m)
            .map(|&m| {
                vals.iter()
                    .filter(|&&v| v as u64 >= 100 * (m as u64).pow(2))
                    .count()
            })
            .sum();
        rows.push(TailRow {
            dim,
            n,
            records: total,
            mean,
            mean_ci: (mean - half, mean + half),
            survival,
            slope: ols(&lx, &ly).map(|f| f.0),
            c: through_origin(&inv, &ps),
            c2: through_origin(&inv2, &ps),
            coarse_violations,
        });
    }
    Ok(TailEstimate { m_grid: grid, rows })
}

/// `N < 100 M²` for every record whose mesh is coarser than `1/M`; returns
/// the offending `(n, stream, M)` triples.
pub fn coarse_mesh_violations(records: &[SampleRecord], m_grid: &[u32]) -> Vec<(u32, u64, u32)> {
    let mut out = Vec::new();
    for r in records {
        let Some(v) = r.n_delta else { continue };
        for &m in m_grid {
            if r.n < m && v as u64 >= 100 * (m as u64).pow(2) {
                out.push((r.n, r.stream_id, m));
            }
        }
    }
    out
}
