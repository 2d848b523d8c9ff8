//! Simple random walks with stopping rules, and chronological loop-erasure.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeBox, SitePoint};

/// Name of the generator behind every [`RngStream`]; stored in sample records.
pub const GENERATOR: &str = "rand_chacha::ChaCha8Rng/0.9 seed_from_u64+set_stream";

/// A reproducible random stream: `(seed, stream)` fixes every draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// An independent sub-stream, e.g. one per trial.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream {
            seed: splitmix64(self.seed ^ splitmix64(self.stream ^ 0x5851_f42d_4c95_7f2d)),
            stream: index,
        }
    }
}

/// Uniform choice among the set bits of `mask`; returns the direction index.
#[inline]
pub(crate) fn pick_direction<R: Rng>(rng: &mut R, mask: u8, full: u8, two_d: u32) -> u32 {
    if mask == full {
        rng.random_range(0..two_d)
    } else {
        let mut k = rng.random_range(0..mask.count_ones());
        let mut m = mask;
        loop {
            let bit = m.trailing_zeros();
            if k == 0 {
                return bit;
            }
            k -= 1;
            m &= m - 1;
        }
    }
}

/// A finite nearest-neighbor path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRecord {
    sites: Vec<SitePoint>,
}

impl PathRecord {
    pub fn new(sites: Vec<SitePoint>) -> Result<Self> {
        if let Some(w) = sites.windows(2).find(|w| !w[0].is_adjacent(&w[1])) {
            return Err(Error::InvalidRegion(format!(
                "path sites {} and {} are not adjacent",
                w[0], w[1]
            )));
        }
        Ok(PathRecord { sites })
    }

    pub(crate) fn from_sites_unchecked(sites: Vec<SitePoint>) -> Self {
        debug_assert!(sites.windows(2).all(|w| w[0].is_adjacent(&w[1])));
        PathRecord { sites }
    }

    pub fn sites(&self) -> &[SitePoint] {
        &self.sites
    }

    pub fn into_sites(self) -> Vec<SitePoint> {
        self.sites
    }

    /// Number of steps `m`.
    pub fn steps(&self) -> usize {
        self.sites.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn first(&self) -> Option<&SitePoint> {
        self.sites.first()
    }

    pub fn last(&self) -> Option<&SitePoint> {
        self.sites.last()
    }

    pub fn is_simple(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.sites.len());
        self.sites.iter().all(|s| seen.insert(*s))
    }

    /// One site per line, space-separated integer coordinates.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.sites {
            let line: Vec<String> = s.coords().iter().map(|c| c.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut sites = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<path dump>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let coords = line
                .split_whitespace()
                .map(|t| t.parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidRegion(format!("bad path line {line:?}: {e}")))?;
            sites.push(SitePoint::new(&coords));
        }
        PathRecord::new(sites)
    }
}

/// When a walk stops. Every walk also carries a step cap; see [`srw_run`].
#[derive(Clone, Debug)]
pub enum StopRule {
    /// Stop on the first visit to a site of the set.
    HitSet(HashSet<SitePoint>),
    /// Stop at the first time the walk is at Euclidean distance
    /// `≥ radius_steps` (lattice units) from `center`.
    ExitBall {
        center: SitePoint,
        radius_steps: f64,
    },
    /// Stop on reaching an absorbing set (roots, wired boundary).
    HitAbsorber(HashSet<SitePoint>),
    StepCap(u64),
    /// Stop as soon as any component rule fires.
    Any(Vec<StopRule>),
}

impl StopRule {
    /// Exit rule for a ball given in physical units at mesh `1/n`.
    pub fn exit_ball(center: SitePoint, radius: f64, n: u32) -> Self {
        StopRule::ExitBall {
            center,
            radius_steps: radius * n as f64,
        }
    }

    fn stops_at(&self, p: &SitePoint) -> bool {
        match self {
            StopRule::HitSet(s) | StopRule::HitAbsorber(s) => s.contains(p),
            StopRule::ExitBall {
                center,
                radius_steps,
            } => p.dist2(center) as f64 >= radius_steps * radius_steps,
            StopRule::StepCap(_) => false,
            StopRule::Any(rules) => rules.iter().any(|r| r.stops_at(p)),
        }
    }

    fn cap(&self) -> Option<u64> {
        match self {
            StopRule::StepCap(c) => Some(*c),
            StopRule::Any(rules) => rules.iter().filter_map(StopRule::cap).min(),
            _ => None,
        }
    }
}

/// Default step cap: `64 · diam³` with `diam` the domain's largest side.
pub fn default_step_cap(domain: &LatticeBox) -> u64 {
    64u64.saturating_mul(domain.diameter_steps().saturating_pow(3))
}

/// Run a simple random walk from `start` inside `domain` until `rule` fires.
///
/// Each step is uniform over the in-domain neighbors of the current site.
/// The returned trace includes the stopping site. A rule without an explicit
/// [`StopRule::StepCap`] is capped at [`default_step_cap`].
pub fn srw_run(
    start: SitePoint,
    rule: &StopRule,
    domain: &LatticeBox,
    rng: &RngStream,
) -> Result<PathRecord> {
    let mut r = rng.rng();
    srw_run_with(start, rule, domain, &mut r)
}

pub fn srw_run_with<R: Rng>(
    start: SitePoint,
    rule: &StopRule,
    domain: &LatticeBox,
    rng: &mut R,
) -> Result<PathRecord> {
    if !domain.contains(&start) {
        return Err(Error::OutsideDomain(start));
    }
    let cap = rule.cap().unwrap_or_else(|| default_step_cap(domain));
    let two_d = 2 * domain.dim() as u32;
    let full = ((1u16 << two_d) - 1) as u8;
    let mut cur = start;
    let mut sites = vec![cur];
    let mut steps = 0u64;
    while !rule.stops_at(&cur) {
        if steps == cap {
            return Err(Error::StepCapExceeded {
                cap,
                partial: Box::new(PathRecord::from_sites_unchecked(sites)),
            });
        }
        let mask = domain.direction_mask(&cur);
        if mask == 0 {
            // isolated single-site domain
            break;
        }
        let dir = pick_direction(rng, mask, full, two_d);
        cur = cur.shifted((dir / 2) as usize, if dir.is_multiple_of(2) { -1 } else { 1 });
        sites.push(cur);
        steps += 1;
    }
    Ok(PathRecord::from_sites_unchecked(sites))
}

/// Loop-erasure via the last-visit recursion: `s₀` is the last visit to
/// `λ(0)` and `s_i` the last visit to `λ(s_{i-1} + 1)`.
pub fn loop_erase(path: &PathRecord) -> PathRecord {
    let sites = path.sites();
    if sites.is_empty() {
        return path.clone();
    }
    let m = sites.len() - 1;
    let mut last = HashMap::with_capacity(sites.len());
    for (j, s) in sites.iter().enumerate() {
        last.insert(*s, j);
    }
    let mut s = last[&sites[0]];
    let mut out = vec![sites[s]];
    while s < m {
        s = last[&sites[s + 1]];
        out.push(sites[s]);
    }
    PathRecord::from_sites_unchecked(out)
}

/// Chronological loop-erasure fed one site at a time. Memory is proportional
/// to the current erased path.
#[derive(Clone, Debug, Default)]
pub struct LoopEraser {
    stack: Vec<SitePoint>,
    position: HashMap<SitePoint, usize>,
}

impl LoopEraser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, site: SitePoint) {
        if let Some(&i) = self.position.get(&site) {
            for s in self.stack.drain(i + 1..) {
                self.position.remove(&s);
            }
        } else {
            self.position.insert(site, self.stack.len());
            self.stack.push(site);
        }
    }

    pub fn current(&self) -> &[SitePoint] {
        &self.stack
    }

    pub fn finish(self) -> PathRecord {
        PathRecord::from_sites_unchecked(self.stack)
    }
}

pub fn loop_erase_incremental<I: IntoIterator<Item = SitePoint>>(steps: I) -> PathRecord {
    let mut le = LoopEraser::new();
    for s in steps {
        le.push(s);
    }
    le.finish()
}

/// Times `u₀ = 0 < u₁ < …` at which the path first reaches distance
/// `≥ leg_radius` (physical) from its position at the previous time.
pub fn leg_decomposition(path: &PathRecord, leg_radius: f64, n: u32) -> Vec<usize> {
    let mut legs = LegTracker::new(leg_radius * n as f64);
    let mut it = path.sites().iter();
    if let Some(first) = it.next() {
        legs.start(first.coords());
        for s in it {
            legs.observe(s.coords());
        }
    }
    legs.into_times()
}

/// Online version of [`leg_decomposition`] over integer coordinates.
#[derive(Clone, Debug)]
pub(crate) struct LegTracker {
    r2: f64,
    anchor: [i64; 4],
    dim: usize,
    t: usize,
    times: Vec<usize>,
}

impl LegTracker {
    pub(crate) fn new(radius_steps: f64) -> Self {
        LegTracker {
            r2: radius_steps * radius_steps,
            anchor: [0; 4],
            dim: 0,
            t: 0,
            times: Vec::new(),
        }
    }

    pub(crate) fn start(&mut self, coords: &[i64]) {
        self.dim = coords.len();
        self.anchor[..self.dim].copy_from_slice(coords);
        self.t = 0;
        self.times.clear();
        self.times.push(0);
    }

    #[inline]
    pub(crate) fn observe(&mut self, coords: &[i64]) {
        self.t += 1;
        let d2: i64 = (0..self.dim)
            .map(|a| (coords[a] - self.anchor[a]).pow(2))
            .sum();
        if d2 as f64 >= self.r2 {
            self.anchor[..self.dim].copy_from_slice(&coords[..self.dim]);
            self.times.push(self.t);
        }
    }

    pub(crate) fn into_times(self) -> Vec<usize> {
        self.times
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(c: &[i64]) -> SitePoint {
        SitePoint::new(c)
    }

    fn path(c: &[&[i64]]) -> PathRecord {
        PathRecord::new(c.iter().map(|x| p(x)).collect()).unwrap()
    }

    #[test]
    fn loop_erase_hand_traced() {
        let lam = path(&[&[0, 0], &[1, 0], &[1, 1], &[1, 0], &[2, 0]]);
        assert_eq!(loop_erase(&lam), path(&[&[0, 0], &[1, 0], &[2, 0]]));
        let aba = path(&[&[0, 0], &[1, 0], &[0, 0]]);
        assert_eq!(loop_erase(&aba), path(&[&[0, 0]]));
        let ababc = path(&[&[0, 0], &[1, 0], &[0, 0], &[1, 0], &[2, 0]]);
        assert_eq!(loop_erase(&ababc), path(&[&[0, 0], &[1, 0], &[2, 0]]));
        assert_eq!(
            loop_erase_incremental(ababc.sites().iter().copied()),
            path(&[&[0, 0], &[1, 0], &[2, 0]])
        );
    }

    #[test]
    fn simple_paths_unchanged() {
        let s = path(&[&[0, 0], &[0, 1], &[1, 1], &[2, 1], &[2, 0]]);
        assert_eq!(loop_erase(&s), s);
        assert_eq!(loop_erase_incremental(s.sites().iter().copied()), s);
    }

    #[test]
    fn non_adjacent_path_rejected() {
        assert!(PathRecord::new(vec![p(&[0, 0]), p(&[2, 0])]).is_err());
    }

    #[test]
    fn path_dump_roundtrip() {
        let s = path(&[&[0, 0, -1], &[0, 1, -1], &[1, 1, -1]]);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "0 0 -1\n0 1 -1\n1 1 -1\n"
        );
        assert_eq!(PathRecord::read_from(&buf[..]).unwrap(), s);
    }

    #[test]
    fn walk_already_stopped() {
        let dom = LatticeBox::new(&[0, 0], &[5, 5]).unwrap();
        let start = p(&[2, 2]);
        let rule = StopRule::HitSet([start].into_iter().collect());
        let w = srw_run(start, &rule, &dom, &RngStream::new(1, 0)).unwrap();
        assert_eq!(w.steps(), 0);
    }

    #[test]
    fn walk_step_cap_returns_partial() {
        let dom = LatticeBox::new(&[0, 0], &[50, 50]).unwrap();
        let rule = StopRule::Any(vec![
            StopRule::HitSet(HashSet::new()),
            StopRule::StepCap(100),
        ]);
        match srw_run(p(&[25, 25]), &rule, &dom, &RngStream::new(3, 0)) {
            Err(Error::StepCapExceeded { cap, partial }) => {
                assert_eq!(cap, 100);
                assert_eq!(partial.steps(), 100);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn exit_ball_stops_at_first_exit() {
        let dom = LatticeBox::new(&[-50, -50, -50], &[50, 50, 50]).unwrap();
        let c = p(&[0, 0, 0]);
        for s in 0..50 {
            let rule = StopRule::ExitBall {
                center: c,
                radius_steps: 5.5,
            };
            let w = srw_run(c, &rule, &dom, &RngStream::new(9, s)).unwrap();
            let sites = w.sites();
            assert!(sites[sites.len() - 1].dist2(&c) as f64 >= 5.5 * 5.5);
            for q in &sites[..sites.len() - 1] {
                assert!((q.dist2(&c) as f64) < 5.5 * 5.5);
            }
        }
    }

    #[test]
    fn gamblers_ruin() {
        let dom = LatticeBox::new(&[0], &[10]).unwrap();
        let rule = StopRule::HitAbsorber([p(&[0]), p(&[10])].into_iter().collect());
        let trials = 100_000u64;
        let base = RngStream::new(2024, 0);
        let mut rng = base.rng();
        let mut right = 0u64;
        for _ in 0..trials {
            let w = srw_run_with(p(&[5]), &rule, &dom, &mut rng).unwrap();
            if w.last().unwrap().coord(0) == 10 {
                right += 1;
            }
        }
        let phat = right as f64 / trials as f64;
        let sigma = (0.25 / trials as f64).sqrt();
        assert!((phat - 0.5).abs() < 3.0 * sigma, "p̂ = {phat}");
    }

    #[test]
    fn exit_time_is_diffusive() {
        let dom = LatticeBox::new(&[-40, -40, -40], &[40, 40, 40]).unwrap();
        let c = p(&[0, 0, 0]);
        for r in [4.0f64, 8.0, 16.0] {
            let rule = StopRule::ExitBall {
                center: c,
                radius_steps: r,
            };
            let mut rng = RngStream::new(5, r as u64).rng();
            let trials = 400;
            let total: usize = (0..trials)
                .map(|_| srw_run_with(c, &rule, &dom, &mut rng).unwrap().steps())
                .sum();
            let ratio = total as f64 / trials as f64 / (r * r);
            assert!((0.25..=4.0).contains(&ratio), "r = {r}: ratio {ratio}");
        }
    }

    #[test]
    fn reproducible_streams() {
        let dom = LatticeBox::new(&[0, 0, 0], &[20, 20, 20]).unwrap();
        let rule = StopRule::StepCap(500);
        let a = srw_run(p(&[10, 10, 10]), &rule, &dom, &RngStream::new(7, 3));
        let b = srw_run(p(&[10, 10, 10]), &rule, &dom, &RngStream::new(7, 3));
        let c = srw_run(p(&[10, 10, 10]), &rule, &dom, &RngStream::new(7, 4));
        let (a, b, c) = match (a, b, c) {
            (
                Err(Error::StepCapExceeded { partial: a, .. }),
                Err(Error::StepCapExceeded { partial: b, .. }),
                Err(Error::StepCapExceeded { partial: c, .. }),
            ) => (a, b, c),
            _ => panic!("walks should hit the cap"),
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn legs_straight_path() {
        let sites: Vec<SitePoint> = (0..=8).map(|x| p(&[x, 0])).collect();
        let straight = PathRecord::new(sites).unwrap();
        // r = 1/4 at n = 16 is 4 steps; path has 8 steps = 2r/δ
        assert_eq!(leg_decomposition(&straight, 0.25, 16), vec![0, 4, 8]);
        let short = PathRecord::new((0..3).map(|x| p(&[x, 0])).collect()).unwrap();
        assert_eq!(leg_decomposition(&short, 0.25, 16), vec![0]);
    }

    #[test]
    fn legs_random_walk_recheck() {
        let dom = LatticeBox::new(&[-200, -200], &[200, 200]).unwrap();
        let w = match srw_run(
            p(&[0, 0]),
            &StopRule::StepCap(10_000),
            &dom,
            &RngStream::new(11, 0),
        ) {
            Err(Error::StepCapExceeded { partial, .. }) => *partial,
            other => panic!("{other:?}"),
        };
        let n = 10;
        let r = 0.45;
        let u = leg_decomposition(&w, r, n);
        let r2 = (r * n as f64).powi(2);
        let s = w.sites();
        assert!(u.len() > 2);
        for m in 1..u.len() {
            assert!(s[u[m]].dist2(&s[u[m - 1]]) as f64 >= r2);
            for j in u[m - 1]..u[m] {
                assert!((s[j].dist2(&s[u[m - 1]]) as f64) < r2);
            }
        }
        // trailing partial leg stays inside
        for j in *u.last().unwrap()..s.len() {
            assert!((s[j].dist2(&s[*u.last().unwrap()]) as f64) < r2);
        }
    }

    fn arb_walk() -> impl Strategy<Value = PathRecord> {
        (2usize..=3, prop::collection::vec(0u8..6, 0..400)).prop_map(|(dim, dirs)| {
            let mut cur = SitePoint::new(&vec![0; dim]);
            let mut sites = vec![cur];
            for d in dirs {
                let d = d as usize % (2 * dim);
                cur = cur.shifted(d / 2, if d.is_multiple_of(2) { -1 } else { 1 });
                sites.push(cur);
            }
            PathRecord::new(sites).unwrap()
        })
    }

    proptest! {
        #[test]
        fn loop_erase_properties(w in arb_walk()) {
            let le = loop_erase(&w);
            prop_assert!(le.is_simple());
            prop_assert_eq!(le.first(), w.first());
            prop_assert_eq!(le.last(), w.last());
            let input: HashSet<_> = w.sites().iter().collect();
            prop_assert!(le.sites().iter().all(|s| input.contains(s)));
            prop_assert_eq!(&loop_erase(&le), &le);
            prop_assert_eq!(loop_erase_incremental(w.sites().iter().copied()), le);
        }
    }
}
