//! Integer lattice geometry.
//!
//! Sites live on the scaled lattice `δℤ^d` with `δ = 1/n`; every site is
//! stored by its integer coordinates and all region tests are done in exact
//! rational arithmetic after scaling by `n`.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 4;

pub type Rational = Ratio<i64>;

/// Mesh parameters: dimension, sites per unit length, and the factor by
/// which the sampling box extends beyond the unit window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeshSpec {
    pub dim: usize,
    pub n: u32,
    #[serde(default = "default_enlargement")]
    pub enlargement: u32,
}

fn default_enlargement() -> u32 {
    3
}

impl MeshSpec {
    pub fn new(dim: usize, n: u32, enlargement: u32) -> Result<Self> {
        let spec = MeshSpec {
            dim,
            n,
            enlargement,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.dim) {
            return Err(Error::InvalidMesh(format!(
                "dimension {} not in {{2,3,4}}",
                self.dim
            )));
        }
        if self.n < 2 {
            return Err(Error::InvalidMesh(format!("n = {} must be >= 2", self.n)));
        }
        if self.enlargement < 1 {
            return Err(Error::InvalidMesh("enlargement must be >= 1".into()));
        }
        Ok(())
    }

    pub fn delta(&self) -> Rational {
        Rational::new(1, self.n as i64)
    }

    pub fn delta_f64(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// The unit window `[0,1]^d`.
    pub fn window(&self) -> BoxRegion {
        BoxRegion::unit(self.dim)
    }

    /// The enlarged sampling box, centred on the window. For enlargement 3
    /// this is `[-1, 2]^d`.
    pub fn sampling_box(&self) -> BoxRegion {
        let pad = Rational::new(self.enlargement as i64 - 1, 2);
        BoxRegion::cube(self.dim, -pad, Rational::from_integer(1) + pad)
    }
}

/// A site of `δℤ^d` stored by its integer coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SitePoint {
    coords: [i64; MAX_DIM],
    dim: u8,
}

impl SitePoint {
    pub fn new(coords: &[i64]) -> Self {
        assert!(
            (1..=MAX_DIM).contains(&coords.len()),
            "site dimension must be in 1..={MAX_DIM}"
        );
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        SitePoint {
            coords: c,
            dim: coords.len() as u8,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[i64] {
        &self.coords[..self.dim as usize]
    }

    pub fn coord(&self, axis: usize) -> i64 {
        self.coords[axis]
    }

    pub fn shifted(&self, axis: usize, by: i64) -> Self {
        let mut s = *self;
        s.coords[axis] += by;
        s
    }

    /// Squared Euclidean distance in lattice steps.
    pub fn dist2(&self, other: &SitePoint) -> i64 {
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_adjacent(&self, other: &SitePoint) -> bool {
        self.dim == other.dim && self.dist2(other) == 1
    }

    /// Physical coordinates `coords · δ`.
    pub fn physical(&self, n: u32) -> Vec<f64> {
        self.coords().iter().map(|&c| c as f64 / n as f64).collect()
    }
}

impl fmt::Debug for SitePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

impl fmt::Display for SitePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coords().iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl Serialize for SitePoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SitePoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i64>::deserialize(d)?;
        if !(1..=MAX_DIM).contains(&v.len()) {
            return Err(serde::de::Error::custom("site dimension out of range"));
        }
        Ok(SitePoint::new(&v))
    }
}

fn ceil_div(a: i128, b: i128) -> i128 {
    -((-a).div_euclid(b))
}

pub fn ratio_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `ceil(r · n)` computed exactly.
pub fn scaled_ceil(r: Rational, n: u32) -> i64 {
    ceil_div(*r.numer() as i128 * n as i128, *r.denom() as i128) as i64
}

/// `floor(r · n)` computed exactly.
pub fn scaled_floor(r: Rational, n: u32) -> i64 {
    (*r.numer() as i128 * n as i128).div_euclid(*r.denom() as i128) as i64
}

/// Closed axis-aligned box with rational bounds in physical units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    lo: Vec<Rational>,
    hi: Vec<Rational>,
}

impl BoxRegion {
    pub fn new(lo: Vec<Rational>, hi: Vec<Rational>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > MAX_DIM {
            return Err(Error::InvalidRegion("bound dimensions disagree".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidRegion("lo > hi".into()));
        }
        Ok(BoxRegion { lo, hi })
    }

    pub fn cube(dim: usize, lo: Rational, hi: Rational) -> Self {
        BoxRegion::new(vec![lo; dim], vec![hi; dim]).expect("cube bounds")
    }

    pub fn unit(dim: usize) -> Self {
        Self::cube(dim, Rational::from_integer(0), Rational::from_integer(1))
    }

    /// Box whose bounds are given in floating point; each bound is snapped
    /// to the lattice toward the interior.
    pub fn snapped_inward(lo: &[f64], hi: &[f64], n: u32) -> Result<Self> {
        let nf = n as f64;
        let lo = lo
            .iter()
            .map(|&l| Rational::new((l * nf).ceil() as i64, n as i64))
            .collect();
        let hi = hi
            .iter()
            .map(|&h| Rational::new((h * nf).floor() as i64, n as i64))
            .collect();
        BoxRegion::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[Rational] {
        &self.lo
    }

    pub fn hi(&self) -> &[Rational] {
        &self.hi
    }

    /// Copy with the upper bound on `axis` replaced.
    pub fn with_hi(&self, axis: usize, hi: Rational) -> Result<Self> {
        let mut out = self.clone();
        out.hi[axis] = hi;
        BoxRegion::new(out.lo, out.hi)
    }

    /// Exact membership of a lattice site at mesh `1/n`.
    pub fn contains(&self, p: &SitePoint, n: u32) -> bool {
        p.dim() == self.dim()
            && (0..self.dim()).all(|a| {
                let c = p.coord(a) as i128;
                let (l, h) = (self.lo[a], self.hi[a]);
                *l.numer() as i128 * n as i128 <= c * *l.denom() as i128
                    && c * *h.denom() as i128 <= *h.numer() as i128 * n as i128
            })
    }

    pub fn contains_box(&self, other: &BoxRegion) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    /// The integer lattice box of all sites in this region at mesh `1/n`.
    pub fn lattice_box(&self, n: u32) -> Result<LatticeBox> {
        let lo: Vec<i64> = self.lo.iter().map(|&l| scaled_ceil(l, n)).collect();
        let hi: Vec<i64> = self.hi.iter().map(|&h| scaled_floor(h, n)).collect();
        LatticeBox::new(&lo, &hi)
    }
}

/// A hyperplane slice `{x_axis = level}`, optionally clipped to a box.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRegion {
    pub axis: usize,
    pub level: Rational,
    pub clip: Option<BoxRegion>,
}

impl FaceRegion {
    pub fn new(axis: usize, level: Rational, clip: Option<BoxRegion>) -> Self {
        FaceRegion { axis, level, clip }
    }

    /// Face at a floating-point level, snapped to the lattice. `down` picks
    /// the floor, otherwise the ceiling.
    pub fn snapped(axis: usize, level: f64, n: u32, down: bool, clip: Option<BoxRegion>) -> Self {
        let scaled = level * n as f64;
        let k = if down { scaled.floor() } else { scaled.ceil() } as i64;
        FaceRegion::new(axis, Rational::new(k, n as i64), clip)
    }

    /// Exact test of `dist(p, face) < δ` with Euclidean distance.
    pub fn within_delta(&self, p: &SitePoint, n: u32) -> bool {
        // work in lattice units, where δ = 1
        let n = n as i128;
        let scale = |r: Rational| Ratio::<i128>::new(*r.numer() as i128 * n, *r.denom() as i128);
        let mut d2 = Ratio::<i128>::from_integer(0);
        let along = Ratio::from_integer(p.coord(self.axis) as i128) - scale(self.level);
        d2 += along * along;
        if let Some(clip) = &self.clip {
            if self.level < clip.lo[self.axis] || self.level > clip.hi[self.axis] {
                return false;
            }
            for a in 0..p.dim() {
                if a == self.axis {
                    continue;
                }
                let c = Ratio::from_integer(p.coord(a) as i128);
                let (l, h) = (scale(clip.lo[a]), scale(clip.hi[a]));
                let ex = if c < l {
                    l - c
                } else if c > h {
                    c - h
                } else {
                    Ratio::from_integer(0)
                };
                d2 += ex * ex;
                if d2 >= Ratio::from_integer(1) {
                    return false;
                }
            }
        }
        d2 < Ratio::from_integer(1)
    }
}

/// Named regions used by the staged construction, for a mesh `spec` and
/// scale `m`.
pub mod regions {
    use super::*;

    /// `F`: the hyperplane `x₁ = 0`.
    pub fn face_f() -> FaceRegion {
        FaceRegion::new(0, Rational::from_integer(0), None)
    }

    /// `G`: the hyperplane `x₁ = 1`.
    pub fn face_g() -> FaceRegion {
        FaceRegion::new(0, Rational::from_integer(1), None)
    }

    /// `A' = F ∩ 𝔹`.
    pub fn a_prime(dim: usize) -> FaceRegion {
        FaceRegion::new(0, Rational::from_integer(0), Some(BoxRegion::unit(dim)))
    }

    /// `A''`: `x₁ = 2/3` inside `𝔹`, snapped toward `x₁ = 0`.
    pub fn a_second(spec: &MeshSpec) -> FaceRegion {
        let level = Rational::new(scaled_floor(Rational::new(2, 3), spec.n), spec.n as i64);
        FaceRegion::new(0, level, Some(BoxRegion::unit(spec.dim)))
    }

    /// `𝔹' = {x ∈ 𝔹 : x₁ ≤ 2/3}`, with the same snapping as [`a_second`].
    pub fn b_prime(spec: &MeshSpec) -> BoxRegion {
        BoxRegion::unit(spec.dim)
            .with_hi(0, a_second(spec).level)
            .expect("2/3 lies inside the unit window")
    }

    /// `A''₂`: `x₁ = 2/3 + M^{-1/4}` inside `𝔹`.
    pub fn a_second_2(spec: &MeshSpec, m: u32) -> FaceRegion {
        let level = 2.0 / 3.0 + (m as f64).powf(-0.25);
        FaceRegion::snapped(0, level, spec.n, true, Some(BoxRegion::unit(spec.dim)))
    }

    /// `A'''`: `x₁ = 3/4` inside `𝔹`.
    pub fn a_third(spec: &MeshSpec) -> FaceRegion {
        let level = Rational::new(scaled_floor(Rational::new(3, 4), spec.n), spec.n as i64);
        FaceRegion::new(0, level, Some(BoxRegion::unit(spec.dim)))
    }
}

/// Integer box of lattice sites with a dense row-major indexing
/// (last axis fastest, so index order is lexicographic order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticeBox {
    dim: usize,
    lo: [i64; MAX_DIM],
    hi: [i64; MAX_DIM],
    shape: [usize; MAX_DIM],
    strides: [usize; MAX_DIM],
    len: usize,
}

impl LatticeBox {
    pub fn new(lo: &[i64], hi: &[i64]) -> Result<Self> {
        let dim = lo.len();
        if dim == 0 || dim > MAX_DIM || hi.len() != dim {
            return Err(Error::InvalidRegion("bad lattice box dimension".into()));
        }
        let mut b = LatticeBox {
            dim,
            lo: [0; MAX_DIM],
            hi: [0; MAX_DIM],
            shape: [1; MAX_DIM],
            strides: [0; MAX_DIM],
            len: 1,
        };
        for a in 0..dim {
            if hi[a] < lo[a] {
                return Err(Error::InvalidRegion("empty lattice box".into()));
            }
            b.lo[a] = lo[a];
            b.hi[a] = hi[a];
            b.shape[a] = (hi[a] - lo[a] + 1) as usize;
        }
        let mut stride = 1usize;
        for a in (0..dim).rev() {
            b.strides[a] = stride;
            stride = stride
                .checked_mul(b.shape[a])
                .ok_or_else(|| Error::InvalidRegion("lattice box too large".into()))?;
        }
        if stride >= u32::MAX as usize - 2 {
            return Err(Error::InvalidRegion("lattice box too large".into()));
        }
        b.len = stride;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo[..self.dim]
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi[..self.dim]
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape[..self.dim]
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Largest side length in lattice steps.
    pub fn diameter_steps(&self) -> u64 {
        self.shape()
            .iter()
            .map(|&s| s as u64 - 1)
            .max()
            .unwrap_or(0)
            .max(1)
    }

    pub fn contains(&self, p: &SitePoint) -> bool {
        p.dim() == self.dim
            && (0..self.dim).all(|a| self.lo[a] <= p.coord(a) && p.coord(a) <= self.hi[a])
    }

    pub fn contains_box(&self, other: &LatticeBox) -> bool {
        self.dim == other.dim
            && (0..self.dim).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    pub fn index(&self, p: &SitePoint) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        Some(
            (0..self.dim)
                .map(|a| (p.coord(a) - self.lo[a]) as usize * self.strides[a])
                .sum(),
        )
    }

    pub fn site(&self, mut idx: usize) -> SitePoint {
        debug_assert!(idx < self.len);
        let mut c = [0i64; MAX_DIM];
        for a in 0..self.dim {
            c[a] = self.lo[a] + (idx / self.strides[a]) as i64;
            idx %= self.strides[a];
        }
        SitePoint::new(&c[..self.dim])
    }

    /// Is `p` on the outer surface of the box?
    pub fn on_surface(&self, p: &SitePoint) -> bool {
        (0..self.dim).any(|a| p.coord(a) == self.lo[a] || p.coord(a) == self.hi[a])
    }

    /// Bitmask of available step directions at `p`. Direction `2a` steps
    /// `-1` along axis `a`, direction `2a+1` steps `+1`.
    pub fn direction_mask(&self, p: &SitePoint) -> u8 {
        let mut mask = 0u8;
        for a in 0..self.dim {
            if p.coord(a) > self.lo[a] {
                mask |= 1 << (2 * a);
            }
            if p.coord(a) < self.hi[a] {
                mask |= 1 << (2 * a + 1);
            }
        }
        mask
    }

    /// Neighbors of `p` inside the box, axis-major, negative before positive.
    pub fn neighbors(&self, p: &SitePoint) -> Vec<SitePoint> {
        let mut out = Vec::with_capacity(2 * self.dim);
        for a in 0..self.dim {
            for by in [-1, 1] {
                let q = p.shifted(a, by);
                if self.contains(&q) {
                    out.push(q);
                }
            }
        }
        out
    }

    pub fn sites(&self) -> impl Iterator<Item = SitePoint> + '_ {
        (0..self.len).map(move |i| self.site(i))
    }
}

/// All neighbors of `p` inside `domain`, in axis-major order with the
/// negative step first.
pub fn neighbors(p: &SitePoint, spec: &MeshSpec, domain: &BoxRegion) -> Result<Vec<SitePoint>> {
    let lb = domain.lattice_box(spec.n)?;
    if !lb.contains(p) {
        return Err(Error::OutsideDomain(*p));
    }
    Ok(lb.neighbors(p))
}

/// Deterministic grid net covering a region.
#[derive(Clone, Debug)]
pub struct CoveringNet {
    pub points: Vec<SitePoint>,
    /// Grid spacing in lattice steps.
    pub spacing: i64,
    /// `(ceil(side / spacing) + 1)^d`, the cardinality guarantee for the
    /// lattice-rounded spacing.
    pub cardinality_bound: u64,
}

/// Grid net whose open balls of `radius` cover every lattice site of `region`.
pub fn covering_net(region: &BoxRegion, radius: f64, n: u32) -> Result<CoveringNet> {
    let delta = 1.0 / n as f64;
    if radius < delta {
        return Err(Error::NetFinerThanMesh { radius, delta });
    }
    let dim = region.dim();
    let lb = region.lattice_box(n)?;
    let sqrt_d = (dim as f64).sqrt();
    let spacing = ((radius * n as f64 / sqrt_d).floor() as i64).max(1);
    let per_axis: Vec<Vec<i64>> = (0..dim)
        .map(|a| {
            let (lo, hi) = (lb.lo()[a], lb.hi()[a]);
            let mut v: Vec<i64> = (0..)
                .map(|j| lo + j * spacing)
                .take_while(|&c| c <= hi)
                .collect();
            if *v.last().unwrap() != hi {
                v.push(hi);
            }
            v
        })
        .collect();
    let mut points = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    let mut idx = vec![0usize; dim];
    let mut coords = vec![0i64; dim];
    'outer: loop {
        for a in 0..dim {
            coords[a] = per_axis[a][idx[a]];
        }
        points.push(SitePoint::new(&coords));
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < per_axis[a].len() {
                continue 'outer;
            }
            idx[a] = 0;
        }
        break;
    }
    let max_steps = (0..dim).map(|a| lb.hi()[a] - lb.lo()[a]).max().unwrap_or(0);
    let per = (max_steps as u64).div_ceil(spacing as u64) + 1;
    Ok(CoveringNet {
        points,
        spacing,
        cardinality_bound: per.pow(dim as u32),
    })
}

/// `a*` with `a* Σ_{k≥1} k⁻² = 1/10`, i.e. `3/(5π²)`.
pub fn a_star() -> f64 {
    3.0 / (5.0 * std::f64::consts::PI * std::f64::consts::PI)
}

/// Offsets `η_k` and radii `δ_k = M⁻¹ 2^{-(k-1)}` for `k = 1..=k₀`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetSchedule {
    pub m: u32,
    pub a_star: f64,
    /// `eta[k-1] = η_k`.
    pub eta: Vec<f64>,
    /// `delta_k[k-1] = δ_k`, exact.
    pub delta_k: Vec<Rational>,
    pub k0: usize,
    /// Sampling box the `A_k` shrink from (`A = [-1,2]^d` at enlargement 3).
    pub outer: BoxRegion,
}

impl NetSchedule {
    pub fn eta(&self, k: usize) -> f64 {
        self.eta[k - 1]
    }

    pub fn delta(&self, k: usize) -> Rational {
        self.delta_k[k - 1]
    }

    pub fn delta_f64(&self, k: usize) -> f64 {
        ratio_f64(self.delta(k))
    }

    /// Physical (unsnapped) bounds of `A_k = [lo + η_k, hi - η_k]^d`.
    pub fn region_bounds(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let eta = self.eta(k);
        (
            self.outer
                .lo()
                .iter()
                .map(|&l| ratio_f64(l) + eta)
                .collect(),
            self.outer
                .hi()
                .iter()
                .map(|&h| ratio_f64(h) - eta)
                .collect(),
        )
    }

    /// `A_k` snapped inward to the lattice.
    pub fn region(&self, k: usize, n: u32) -> Result<BoxRegion> {
        let (lo, hi) = self.region_bounds(k);
        BoxRegion::snapped_inward(&lo, &hi, n)
    }

    /// `Σ_{k=1}^{k₀} δ_k^{1/4}`.
    pub fn quarter_power_sum(&self) -> f64 {
        (1..=self.k0).map(|k| self.delta_f64(k).powf(0.25)).sum()
    }
}

/// Build the stage schedule for scale `m` at the mesh of `spec`.
pub fn net_schedule(m: u32, spec: &MeshSpec) -> Result<NetSchedule> {
    if m < 1 {
        return Err(Error::InvalidMesh("M must be >= 1".into()));
    }
    if spec.n <= m {
        return Err(Error::MeshTooCoarse { n: spec.n, m });
    }
    // k₀ = min{k : M·2^{k-1} > n}
    let mut k0 = 1usize;
    while (m as u64) << (k0 - 1) <= spec.n as u64 {
        k0 += 1;
    }
    let a = a_star();
    let mut eta = Vec::with_capacity(k0);
    let mut acc = 0.0;
    for k in 1..=k0 {
        eta.push(a * acc);
        acc += 1.0 / (k * k) as f64;
    }
    let delta_k = (1..=k0)
        .map(|k| Rational::new(1, m as i64 * (1i64 << (k - 1))))
        .collect();
    Ok(NetSchedule {
        m,
        a_star: a,
        eta,
        delta_k,
        k0,
        outer: spec.sampling_box(),
    })
}
