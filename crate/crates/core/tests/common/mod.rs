#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use rand::Rng;
use spanclust::lattice::LatticeBox;
use spanclust::{BoundaryCondition, SamplingDomain, SitePoint, TreeState};

/// Loop erasure by the literal recursion
/// `s_0 = max{j : S(j) = S(0)}`, `s_i = max{j : S(j) = S(s_{i-1} + 1)}`.
pub fn s_recursion(trace: &[SitePoint]) -> Vec<SitePoint> {
    let mut last: HashMap<SitePoint, usize> = HashMap::new();
    for (j, s) in trace.iter().enumerate() {
        last.insert(*s, j);
    }
    let mut out = Vec::new();
    if trace.is_empty() {
        return out;
    }
    let mut s = last[&trace[0]];
    out.push(trace[s]);
    while s + 1 < trace.len() {
        s = last[&trace[s + 1]];
        out.push(trace[s]);
    }
    out
}

/// Nearest-neighbor walk of `len` steps on `ℤ^d` from the origin.
pub fn random_trace<R: Rng>(rng: &mut R, dim: usize, len: usize) -> Vec<SitePoint> {
    let mut cur = SitePoint::new(&vec![0; dim]);
    let mut out = Vec::with_capacity(len + 1);
    out.push(cur);
    for _ in 0..len {
        let d = rng.random_range(0..2 * dim);
        cur = cur.shifted(d / 2, if d % 2 == 0 { -1 } else { 1 });
        out.push(cur);
    }
    out
}

/// Wilson's algorithm driven by a walk that steps in direction `+x₁` with
/// weight `bias` and every other direction with weight 1. Its output is not
/// uniform for `bias ≠ 1`.
pub fn biased_wilson<R: Rng>(domain: &SamplingDomain, bias: f64, rng: &mut R) -> TreeState {
    let lb = &domain.lattice;
    let len = lb.len();
    let mut in_tree = vec![false; len];
    let mut parent: Vec<Option<usize>> = vec![None; len];
    for (i, flag) in in_tree.iter_mut().enumerate() {
        *flag = domain.is_root_site(&lb.site(i));
    }
    let mut next = vec![usize::MAX; len];
    for start in 0..len {
        let mut cur = start;
        while !in_tree[cur] {
            let s = lb.site(cur);
            let nbrs: Vec<(usize, f64)> = (0..lb.dim())
                .flat_map(|a| [(a, -1i64), (a, 1)])
                .filter_map(|(a, by)| {
                    let w = if a == 0 && by == 1 { bias } else { 1.0 };
                    lb.index(&s.shifted(a, by)).map(|j| (j, w))
                })
                .collect();
            let total: f64 = nbrs.iter().map(|x| x.1).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = nbrs[nbrs.len() - 1].0;
            for &(j, w) in &nbrs {
                if u < w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            next[cur] = pick;
            cur = pick;
        }
        let mut cur = start;
        while !in_tree[cur] {
            in_tree[cur] = true;
            parent[cur] = Some(next[cur]);
            cur = next[cur];
        }
    }
    let parents: Vec<(SitePoint, Option<SitePoint>)> = (0..len)
        .map(|i| (lb.site(i), parent[i].map(|j| lb.site(j))))
        .collect();
    TreeState::from_parents(domain.clone(), &parents).unwrap()
}

pub fn small_domain(lo: &[i64], hi: &[i64], bc: BoundaryCondition) -> SamplingDomain {
    SamplingDomain::new(LatticeBox::new(lo, hi).unwrap(), 1, bc)
}

/// Spanning clusters of a tree inside an integer window `[lo, hi]^d` by
/// breadth-first search over tree edges, touching `x₁ = lo` and `x₁ = hi`.
pub fn bfs_spanning_clusters(tree: &TreeState, lo: i64, hi: i64) -> usize {
    let dim = tree.lattice().dim();
    let inside = |s: &SitePoint| (0..dim).all(|a| (lo..=hi).contains(&s.coord(a)));
    let mut adj: HashMap<SitePoint, Vec<SitePoint>> = HashMap::new();
    for (a, b) in tree.edges() {
        if inside(&a) && inside(&b) {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
    }
    let mut seen: HashSet<SitePoint> = HashSet::new();
    let mut count = 0;
    let mut starts: Vec<SitePoint> = tree
        .lattice()
        .sites()
        .filter(|s| inside(s) && tree.contains(s))
        .collect();
    starts.sort();
    for s in starts {
        if !seen.insert(s) {
            continue;
        }
        let (mut l, mut r) = (false, false);
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            l |= v.coord(0) == lo;
            r |= v.coord(0) == hi;
            for w in adj.get(&v).into_iter().flatten() {
                if seen.insert(*w) {
                    q.push_back(*w);
                }
            }
        }
        count += (l && r) as usize;
    }
    count
}
