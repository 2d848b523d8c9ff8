//! Monte Carlo estimates of branch hittability and face-to-face traversals.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::lattice::{regions, FaceRegion, LatticeBox, MeshSpec, SitePoint};
use crate::walk::{default_step_cap, pick_direction, PathRecord, RngStream};
use crate::wilson::{sample_ust_fast, BoundaryCondition, SamplingDomain, TreeState};

pub const CI_METHOD: &str = "clopper-pearson-95";

/// Exact two-sided binomial interval at level `1 - alpha`.
pub fn clopper_pearson(successes: u64, trials: u64, alpha: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let (k, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0).unwrap().inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .unwrap()
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Dense membership set over a lattice box.
#[derive(Clone, Debug)]
pub struct SiteSet {
    lattice: LatticeBox,
    bits: Vec<u64>,
    count: usize,
}

impl SiteSet {
    pub fn new(lattice: &LatticeBox) -> Self {
        SiteSet {
            lattice: lattice.clone(),
            bits: vec![0; lattice.len().div_ceil(64)],
            count: 0,
        }
    }

    pub fn from_sites<'a, I: IntoIterator<Item = &'a SitePoint>>(
        lattice: &LatticeBox,
        sites: I,
    ) -> Self {
        let mut s = SiteSet::new(lattice);
        for p in sites {
            s.insert(p);
        }
        s
    }

    pub fn insert(&mut self, p: &SitePoint) {
        if let Some(i) = self.lattice.index(p) {
            let (w, b) = (i / 64, i % 64);
            if self.bits[w] >> b & 1 == 0 {
                self.bits[w] |= 1 << b;
                self.count += 1;
            }
        }
    }

    #[inline]
    fn contains_index(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn contains(&self, p: &SitePoint) -> bool {
        self.lattice
            .index(p)
            .is_some_and(|i| self.contains_index(i))
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Estimate of `P^x(R[0,T] ∩ γ = ∅)` with `T` the exit time of `B(x, radius)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HittabilityEstimate {
    pub branch_id: usize,
    pub probe: SitePoint,
    pub radius: f64,
    pub trials: u64,
    pub non_hits: u64,
    /// Walks that hit their step cap; excluded from the estimate.
    pub capped: u64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub ci_method: String,
}

impl HittabilityEstimate {
    fn from_counts(
        branch_id: usize,
        probe: SitePoint,
        radius: f64,
        trials: u64,
        non_hits: u64,
        capped: u64,
    ) -> Self {
        let used = trials - capped;
        let (ci_lo, ci_hi) = clopper_pearson(non_hits, used, 0.05);
        HittabilityEstimate {
            branch_id,
            probe,
            radius,
            trials,
            non_hits,
            capped,
            p_hat: if used == 0 {
                f64::NAN
            } else {
                non_hits as f64 / used as f64
            },
            ci_lo,
            ci_hi,
            ci_method: CI_METHOD.into(),
        }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, estimates: &[HittabilityEstimate]) -> Result<()> {
    for e in estimates {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w).map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

enum TrialOutcome {
    Hit,
    Escaped,
    Capped,
}

fn run_trial(
    branch: &SiteSet,
    x: &SitePoint,
    r2: f64,
    domain: &LatticeBox,
    cap: u64,
    rng: &RngStream,
) -> TrialOutcome {
    let mut r = rng.rng();
    let two_d = 2 * domain.dim() as u32;
    let full = ((1u16 << two_d) - 1) as u8;
    let mut cur = *x;
    let mut steps = 0u64;
    loop {
        if branch.contains(&cur) {
            return TrialOutcome::Hit;
        }
        if cur.dist2(x) as f64 >= r2 {
            return TrialOutcome::Escaped;
        }
        if steps == cap {
            return TrialOutcome::Capped;
        }
        let mask = domain.direction_mask(&cur);
        if mask == 0 {
            return TrialOutcome::Escaped;
        }
        let dir = pick_direction(&mut r, mask, full, two_d);
        cur = cur.shifted((dir / 2) as usize, if dir.is_multiple_of(2) { -1 } else { 1 });
        steps += 1;
    }
}

/// Run `trials` walks from `x` until they leave `B(x, radius)` and count
/// those that never touch the branch. Trial `t` draws from `rng.child(t)`,
/// so two branches probed with the same stream see identical walks.
#[allow(clippy::too_many_arguments)]
pub fn probe_hittability(
    branch_id: usize,
    branch: &SiteSet,
    x: &SitePoint,
    radius: f64,
    trials: u64,
    domain: &LatticeBox,
    n: u32,
    rng: &RngStream,
) -> HittabilityEstimate {
    let r_steps = radius * n as f64;
    let r2 = r_steps * r_steps;
    let cap = 64 * (r_steps.ceil() as u64 + 1).pow(3).max(64);
    let mut non_hits = 0;
    let mut capped = 0;
    for t in 0..trials {
        match run_trial(branch, x, r2, domain, cap, &rng.child(t)) {
            TrialOutcome::Hit => {}
            TrialOutcome::Escaped => non_hits += 1,
            TrialOutcome::Capped => capped += 1,
        }
    }
    HittabilityEstimate::from_counts(branch_id, *x, radius, trials, non_hits, capped)
}

/// Probe points near a branch: grid sites (spacing as for a covering net of
/// `net_radius`) within distance `net_radius` of the branch, thinned to at
/// most `cap` by farthest-point selection starting from the site farthest
/// from the branch.
pub fn probe_points(
    branch: &PathRecord,
    net_radius: f64,
    n: u32,
    domain: &LatticeBox,
    cap: usize,
) -> Vec<SitePoint> {
    if branch.is_empty() || cap == 0 {
        return Vec::new();
    }
    let dim = domain.dim();
    let r_steps = net_radius * n as f64;
    let r2 = r_steps * r_steps;
    let spacing = ((r_steps / (dim as f64).sqrt()).floor() as i64).max(1);
    let reach = r_steps.floor() as i64;
    let mut lo = [i64::MAX; 4];
    let mut hi = [i64::MIN; 4];
    for s in branch.sites() {
        for a in 0..dim {
            lo[a] = lo[a].min(s.coord(a) - reach).max(domain.lo()[a]);
            hi[a] = hi[a].max(s.coord(a) + reach).min(domain.hi()[a]);
        }
    }
    // grid aligned to multiples of the spacing
    let first: Vec<i64> = (0..dim)
        .map(|a| {
            lo[a].div_euclid(spacing) * spacing
                + if lo[a].rem_euclid(spacing) == 0 {
                    0
                } else {
                    spacing
                }
        })
        .collect();
    let mut cands: Vec<(SitePoint, i64)> = Vec::new();
    let mut c = first.clone();
    'outer: loop {
        let p = SitePoint::new(&c);
        let d = branch.sites().iter().map(|s| s.dist2(&p)).min().unwrap();
        if d as f64 <= r2 {
            cands.push((p, d));
        }
        for a in (0..dim).rev() {
            c[a] += spacing;
            if c[a] <= hi[a] {
                continue 'outer;
            }
            c[a] = first[a];
        }
        break;
    }
    if cands.is_empty() {
        return vec![branch.sites()[0]];
    }
    let start = cands
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.1.cmp(&b.1).then(j.cmp(i)))
        .map(|(i, _)| i)
        .unwrap();
    let mut chosen = vec![cands[start].0];
    let mut nearest: Vec<i64> = cands.iter().map(|(p, _)| p.dist2(&chosen[0])).collect();
    while chosen.len() < cap.min(cands.len()) {
        let (k, _) = nearest
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.cmp(b).then(j.cmp(i)))
            .unwrap();
        if nearest[k] == 0 {
            break;
        }
        let p = cands[k].0;
        chosen.push(p);
        for (i, (q, _)) in cands.iter().enumerate() {
            nearest[i] = nearest[i].min(q.dist2(&p));
        }
    }
    chosen
}

/// Least-squares fit of `log p̂_worst = ξ log(scale) + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub scales: Vec<f64>,
    /// Worst (largest) `p̂` per scale after zero substitution.
    pub worst_p: Vec<f64>,
    /// Scales whose worst `p̂` was zero and got replaced by its CI upper bound.
    pub substituted: Vec<bool>,
    pub xi: f64,
    pub intercept: f64,
    pub xi_se: f64,
    pub residuals: Vec<f64>,
}

impl ExponentFit {
    /// Refit from the stored `(scale, p̂)` pairs.
    pub fn refit(&self) -> Result<ExponentFit> {
        let mut f = fit_power(&self.scales, &self.worst_p)?;
        f.substituted = self.substituted.clone();
        Ok(f)
    }

    /// One-sided 95% lower confidence bound on `ξ` (Student t, `k - 2` d.o.f.).
    pub fn xi_lower95(&self) -> f64 {
        let df = self.scales.len() as f64 - 2.0;
        if df <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let t = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.95);
        self.xi - t * self.xi_se
    }
}

fn fit_power(scales: &[f64], p: &[f64]) -> Result<ExponentFit> {
    let k = scales.len();
    let xs: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k as f64;
    let my = ys.iter().sum::<f64>() / k as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::TooFewScales { needed: 3, got: 1 });
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let xi = sxy / sxx;
    let intercept = my - xi * mx;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - (xi * x + intercept))
        .collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let xi_se = if k > 2 {
        (rss / (k as f64 - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(ExponentFit {
        scales: scales.to_vec(),
        worst_p: p.to_vec(),
        substituted: vec![false; k],
        xi,
        intercept,
        xi_se,
        residuals,
    })
}

/// Fit the hittability exponent from estimates grouped by scale (the net
/// radius `1/M` or `δ_k`).
pub fn estimate_xi(groups: &[(f64, Vec<HittabilityEstimate>)]) -> Result<ExponentFit> {
    let mut distinct: Vec<f64> = groups.iter().map(|g| g.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::TooFewScales {
            needed: 3,
            got: distinct.len(),
        });
    }
    let mut scales = Vec::new();
    let mut worst = Vec::new();
    let mut substituted = Vec::new();
    for (scale, ests) in groups {
        let w = ests.iter().filter(|e| e.p_hat.is_finite()).max_by(|a, b| {
            a.p_hat
                .total_cmp(&b.p_hat)
                .then(b.ci_hi.total_cmp(&a.ci_hi))
        });
        let Some(w) = w else { continue };
        scales.push(*scale);
        if w.p_hat > 0.0 {
            worst.push(w.p_hat);
            substituted.push(false);
        } else {
            // all probes at this scale saw zero escapes; use the smallest CI
            // upper bound among them (rule of three)
            let hi = ests.iter().map(|e| e.ci_hi).fold(f64::INFINITY, f64::min);
            worst.push(hi);
            substituted.push(true);
        }
    }
    if scales.len() < 3 {
        return Err(Error::TooFewScales {
            needed: 3,
            got: scales.len(),
        });
    }
    let mut fit = fit_power(&scales, &worst)?;
    fit.substituted = substituted;
    Ok(fit)
}

/// Incremental face-alternation counter: the first face visited (the start
/// counts) sets the side; each later visit to the other face is one traversal.
#[derive(Clone, Debug)]
pub struct TraversalCounter<'a> {
    a: &'a FaceRegion,
    b: &'a FaceRegion,
    n: u32,
    side: u8,
    count: usize,
}

impl<'a> TraversalCounter<'a> {
    pub fn new(a: &'a FaceRegion, b: &'a FaceRegion, n: u32) -> Self {
        TraversalCounter {
            a,
            b,
            n,
            side: 0,
            count: 0,
        }
    }

    pub fn observe(&mut self, s: &SitePoint) {
        let on = if self.a.within_delta(s, self.n) {
            1
        } else if self.b.within_delta(s, self.n) {
            2
        } else {
            return;
        };
        if on != self.side {
            if self.side != 0 {
                self.count += 1;
            }
            self.side = on;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

pub fn traversal_count<I: IntoIterator<Item = SitePoint>>(
    sites: I,
    a: &FaceRegion,
    b: &FaceRegion,
    n: u32,
) -> usize {
    let mut c = TraversalCounter::new(a, b, n);
    for s in sites {
        c.observe(&s);
    }
    c.count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalTail {
    pub counts: Vec<usize>,
    /// `(m, P(count ≥ m))` for `m = 1..=max`.
    pub survival: Vec<(usize, f64)>,
    /// Slope of `ln P(count ≥ m)` against `m`.
    pub slope: f64,
    /// `exp(slope)`, the estimated per-traversal continuation probability `1 - c₀`.
    pub one_minus_c0: f64,
    pub c0: f64,
}

/// Empirical tail of traversal counts with a geometric fit.
pub fn traversal_tail(counts: &[usize]) -> TraversalTail {
    let max = counts.iter().copied().max().unwrap_or(0);
    let total = counts.len().max(1) as f64;
    let survival: Vec<(usize, f64)> = (1..=max)
        .map(|m| (m, counts.iter().filter(|&&c| c >= m).count() as f64 / total))
        .collect();
    let pts: Vec<(f64, f64)> = survival
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|&(m, p)| (m as f64, p.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx
    } else {
        f64::NAN
    };
    TraversalTail {
        counts: counts.to_vec(),
        survival,
        slope,
        one_minus_c0: slope.exp(),
        c0: 1.0 - slope.exp(),
    }
}

/// Traversal counts between `A'` and `A''` for walks from `start` absorbed at
/// the wired surface of the sampling box, the same stopping regime as the
/// walks of a staged build.
pub fn sample_traversal_counts(
    spec: &MeshSpec,
    start: &SitePoint,
    walks: u64,
    rng: &RngStream,
) -> Result<Vec<usize>> {
    let domain = SamplingDomain::for_spec(spec, BoundaryCondition::FreeWithWiredHalo)?;
    let lb = &domain.lattice;
    if !lb.contains(start) {
        return Err(Error::OutsideDomain(*start));
    }
    let a1 = regions::a_prime(spec.dim);
    let a2 = regions::a_second(spec);
    let two_d = 2 * spec.dim as u32;
    let full = ((1u16 << two_d) - 1) as u8;
    let cap = default_step_cap(lb);
    let mut out = Vec::with_capacity(walks as usize);
    for w in 0..walks {
        let mut r = rng.child(w).rng();
        let mut cur = *start;
        let mut steps = 0u64;
        let mut counter = TraversalCounter::new(&a1, &a2, spec.n);
        counter.observe(&cur);
        while !lb.on_surface(&cur) && steps < cap {
            let mask = lb.direction_mask(&cur);
            let dir = pick_direction(&mut r, mask, full, two_d);
            cur = cur.shifted((dir / 2) as usize, if dir % 2 == 0 { -1 } else { 1 });
            steps += 1;
            counter.observe(&cur);
        }
        out.push(counter.count());
    }
    Ok(out)
}

/// Hittability of branches `γ_z` of one sampled tree across a grid of `M`:
/// probe radius `1/√M`, probe points within `1/M` of the branch.
#[derive(Clone, Debug)]
pub struct HittabilityPlan {
    pub ms: Vec<u32>,
    pub branches: usize,
    pub probes_per_branch: usize,
    pub trials: u64,
}

/// Branch seeds drawn uniformly from the unit window.
pub fn window_seeds(spec: &MeshSpec, count: usize, rng: &RngStream) -> Result<Vec<SitePoint>> {
    let wb = spec.window().lattice_box(spec.n)?;
    let mut r = rng.rng();
    Ok((0..count)
        .map(|_| {
            let c: Vec<i64> = (0..spec.dim)
                .map(|a| r.random_range(wb.lo()[a]..=wb.hi()[a]))
                .collect();
            SitePoint::new(&c)
        })
        .collect())
}

/// Probe the branches of `seeds` at scale `M`. Estimate streams derive from
/// `(branch, probe)` so different `M` reuse the same walks where possible.
pub fn probe_branches(
    tree: &TreeState,
    seeds: &[SitePoint],
    m: u32,
    probes_per_branch: usize,
    trials: u64,
    rng: &RngStream,
) -> Result<Vec<HittabilityEstimate>> {
    let n = tree.domain().n;
    if n <= m {
        return Err(Error::MeshTooCoarse { n, m });
    }
    let lb = tree.lattice();
    let net_radius = 1.0 / m as f64;
    let radius = (m as f64).powf(-0.5);
    let mut ests = Vec::new();
    for (bi, z) in seeds.iter().enumerate() {
        let b = tree.branch_of(z)?;
        let set = SiteSet::from_sites(lb, b.sites());
        for (pi, x) in probe_points(&b, net_radius, n, lb, probes_per_branch)
            .iter()
            .enumerate()
        {
            let stream = rng.child(((bi as u64) << 20) | pi as u64);
            ests.push(probe_hittability(
                bi, &set, x, radius, trials, lb, n, &stream,
            ));
        }
    }
    Ok(ests)
}

/// Sample one tree and probe the same branches at every `M` of the plan.
pub fn hittability_sweep(
    spec: &MeshSpec,
    plan: &HittabilityPlan,
    rng: &RngStream,
) -> Result<(TreeState, Vec<(f64, Vec<HittabilityEstimate>)>)> {
    let domain = SamplingDomain::for_spec(spec, BoundaryCondition::FreeWithWiredHalo)?;
    let tree = sample_ust_fast(&domain, rng)?;
    let seeds = window_seeds(spec, plan.branches, &rng.child(u64::MAX))?;
    let mut groups = Vec::new();
    for &m in &plan.ms {
        let ests = probe_branches(
            &tree,
            &seeds,
            m,
            plan.probes_per_branch,
            plan.trials,
            &rng.child(m as u64),
        )?;
        groups.push((1.0 / m as f64, ests));
    }
    Ok((tree, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Rational;

    fn p(c: &[i64]) -> SitePoint {
        SitePoint::new(c)
    }

    #[test]
    fn probe_on_branch_and_empty_branch() {
        let lb = LatticeBox::new(&[-20, -20, -20], &[20, 20, 20]).unwrap();
        let x = p(&[0, 0, 0]);
        let set = SiteSet::from_sites(&lb, &[x]);
        let e = probe_hittability(0, &set, &x, 0.5, 50, &lb, 10, &RngStream::new(1, 1));
        assert_eq!(e.p_hat, 0.0);
        let empty = SiteSet::new(&lb);
        let e = probe_hittability(0, &empty, &x, 0.5, 50, &lb, 10, &RngStream::new(1, 1));
        assert_eq!(e.p_hat, 1.0);
        assert_eq!(e.ci_method, CI_METHOD);
    }

    /// Exact escape probability: harmonic function on the finitely many
    /// interior sites, solved by Gaussian elimination.
    fn exact_escape(x: SitePoint, slab: &dyn Fn(&SitePoint) -> bool, r2: i64) -> f64 {
        let r = (r2 as f64).sqrt().ceil() as i64;
        let mut interior = Vec::new();
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    let q = p(&[a, b, c]);
                    if q.dist2(&x) < r2 && !slab(&q) {
                        interior.push(q);
                    }
                }
            }
        }
        let k = interior.len();
        let mut m = vec![vec![0.0f64; k + 1]; k];
        for (i, q) in interior.iter().enumerate() {
            m[i][i] = 1.0;
            for a in 0..3 {
                for by in [-1, 1] {
                    let nb = q.shifted(a, by);
                    if let Some(j) = interior.iter().position(|z| *z == nb) {
                        m[i][j] -= 1.0 / 6.0;
                    } else if !slab(&nb) {
                        m[i][k] += 1.0 / 6.0;
                    }
                }
            }
        }
        for col in 0..k {
            let piv = (col..k)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, piv);
            for row in 0..k {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    for c in col..=k {
                        m[row][c] -= f * m[col][c];
                    }
                }
            }
        }
        let i0 = interior.iter().position(|z| *z == x).unwrap();
        m[i0][k] / m[i0][i0]
    }

    #[test]
    fn slab_escape_matches_linear_solve() {
        // slab {x₁ = -1} next to x, ball of radius 1.5 steps
        let lb = LatticeBox::new(&[-6, -6, -6], &[6, 6, 6]).unwrap();
        let slab_sites: Vec<SitePoint> = lb.sites().filter(|s| s.coord(0) == -1).collect();
        let set = SiteSet::from_sites(&lb, &slab_sites);
        let x = p(&[0, 0, 0]);
        // radius 1.5 steps at n = 2 is 0.75 physical
        let r2 = 3; // dist² ≥ 2.25 ⇔ dist² ≥ 3
        let exact = exact_escape(x, &|s: &SitePoint| s.coord(0) == -1, r2);
        let trials = 40_000;
        let e = probe_hittability(0, &set, &x, 0.75, trials, &lb, 2, &RngStream::new(8, 0));
        let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!(
            (e.p_hat - exact).abs() < 4.0 * sigma,
            "{} vs {exact}",
            e.p_hat
        );
        assert!(e.p_hat < 1.0 - 1.0 / 6.0 + 4.0 * sigma);
    }

    #[test]
    fn superset_never_escapes_more() {
        let lb = LatticeBox::new(&[-15, -15, -15], &[15, 15, 15]).unwrap();
        let line: Vec<SitePoint> = (-15..=15).map(|z| p(&[2, 0, z])).collect();
        let mut more = line.clone();
        more.extend((-15..=15).map(|z| p(&[-3, 1, z])));
        let a = SiteSet::from_sites(&lb, &line);
        let b = SiteSet::from_sites(&lb, &more);
        for s in 0..10 {
            let x = p(&[0, 0, 0]);
            let ea = probe_hittability(0, &a, &x, 0.8, 200, &lb, 10, &RngStream::new(s, 2));
            let eb = probe_hittability(1, &b, &x, 0.8, 200, &lb, 10, &RngStream::new(s, 2));
            assert!(eb.non_hits <= ea.non_hits);
        }
    }

    #[test]
    fn clopper_pearson_coverage() {
        let p_true = 0.3;
        let mut rng = RngStream::new(99, 0).rng();
        let mut covered = 0;
        for _ in 0..1000 {
            let k = (0..200).filter(|_| rng.random_bool(p_true)).count() as u64;
            let (lo, hi) = clopper_pearson(k, 200, 0.05);
            covered += (lo <= p_true && p_true <= hi) as usize;
        }
        assert!(covered >= 930, "coverage {covered}/1000");
        assert_eq!(clopper_pearson(0, 10, 0.05).0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.05).1, 1.0);
    }

    fn synthetic(
        scales: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) -> Vec<(f64, Vec<HittabilityEstimate>)> {
        scales
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut e = HittabilityEstimate::from_counts(0, p(&[0, 0]), s, 100, 50, 0);
                e.p_hat = f(s, i);
                (s, vec![e])
            })
            .collect()
    }

    #[test]
    fn fit_recovers_planted_exponent() {
        let scales = [0.5, 0.25, 0.125, 0.0625];
        let fit = estimate_xi(&synthetic(&scales, |s, _| s.sqrt())).unwrap();
        assert!((fit.xi - 0.5).abs() < 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
        let again = fit.refit().unwrap();
        assert!((again.xi - fit.xi).abs() < 1e-12);
    }

    #[test]
    fn fit_with_noise() {
        let mut rng = RngStream::new(3, 3).rng();
        let noise: Vec<f64> = (0..5)
            .map(|_| 1.0 + rng.random_range(-0.05..0.05))
            .collect();
        let scales = [0.5, 0.25, 0.125, 0.0625, 0.03125];
        let fit = estimate_xi(&synthetic(&scales, |s, i| 0.7 * s.powf(1.2) * noise[i])).unwrap();
        assert!((1.0..=1.4).contains(&fit.xi), "xi = {}", fit.xi);
    }

    #[test]
    fn fit_needs_three_scales() {
        assert!(matches!(
            estimate_xi(&synthetic(&[0.5, 0.25], |s, _| s)),
            Err(Error::TooFewScales { .. })
        ));
    }

    #[test]
    fn zero_estimates_use_ci_upper_bound() {
        let mut g = synthetic(&[0.5, 0.25, 0.125], |s, _| s);
        g[2].1[0] = HittabilityEstimate::from_counts(0, p(&[0, 0]), 0.125, 100, 0, 0);
        let fit = estimate_xi(&g).unwrap();
        assert!(fit.substituted[2]);
        assert!((fit.worst_p[2] - clopper_pearson(0, 100, 0.05).1).abs() < 1e-12);
    }

    #[test]
    fn traversal_counting() {
        let n = 3;
        let a = FaceRegion::new(0, Rational::from_integer(0), None);
        let b = FaceRegion::new(0, Rational::new(2, 3), None);
        let line = |xs: &[i64]| -> Vec<SitePoint> { xs.iter().map(|&x| p(&[x, 0])).collect() };
        // never reaches the far face
        assert_eq!(traversal_count(line(&[1, 0, 1, 0]), &a, &b, n), 0);
        // starting on A'' and reaching A' counts once
        assert_eq!(traversal_count(line(&[2, 1, 0]), &a, &b, n), 1);
        // shuttle t times
        for t in 1..6 {
            let mut xs = vec![0];
            for k in 0..t {
                if k % 2 == 0 {
                    xs.extend([1, 2]);
                } else {
                    xs.extend([1, 0]);
                }
            }
            let sites = line(&xs);
            assert_eq!(traversal_count(sites.clone(), &a, &b, n), t);
            assert_eq!(traversal_count(sites, &b, &a, n), t);
        }
    }

    #[test]
    fn geometric_tail_fit() {
        // P(count ≥ m) = 2^-m exactly over 1024 walks
        let mut counts = Vec::new();
        for m in 0..10usize {
            let with = 1024 >> (m + 1);
            counts.extend(std::iter::repeat_n(m, with));
        }
        counts.push(10);
        let tail = traversal_tail(&counts);
        assert!((tail.one_minus_c0 - 0.5).abs() < 1e-9);
        assert!((tail.c0 - 0.5).abs() < 1e-9);
        assert!(tail.survival.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn probe_points_within_radius_and_capped() {
        let lb = LatticeBox::new(&[-30, -30, -30], &[30, 30, 30]).unwrap();
        let branch = PathRecord::new((0..20).map(|x| p(&[x, 0, 0])).collect()).unwrap();
        let pts = probe_points(&branch, 0.5, 16, &lb, 64);
        assert!(!pts.is_empty() && pts.len() <= 64);
        for q in &pts {
            let d = branch.sites().iter().map(|s| s.dist2(q)).min().unwrap();
            assert!(d as f64 <= 64.0);
        }
        assert_eq!(pts, probe_points(&branch, 0.5, 16, &lb, 64));
    }
}
