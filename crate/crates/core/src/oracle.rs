//! Exact spanning-tree counting and enumeration on tiny graphs, and
//! chi-square checks of sampler output against them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::wilson::{BoundaryCondition, SamplingDomain, TreeState};

pub const MAX_VERTICES: usize = 24;
pub const MAX_EXCESS_EDGES: usize = 16;

/// Small undirected multigraph. Parallel edges only arise from vertex
/// identification and are kept as separate edges, each remembering the
/// original pair it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmallGraph {
    vertices: usize,
    edges: Vec<(usize, usize)>,
    labels: Vec<(usize, usize)>,
    identification: Option<Vec<usize>>,
}

impl SmallGraph {
    /// Simple graph from an edge list. Duplicate edges and loops are rejected.
    pub fn new(vertices: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut norm: Vec<(usize, usize)> =
            edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        norm.sort_unstable();
        if norm.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidRegion(
                "duplicate edge in simple graph".into(),
            ));
        }
        if norm.iter().any(|&(a, b)| a == b || b >= vertices) {
            return Err(Error::InvalidRegion("loop or out-of-range edge".into()));
        }
        let g = SmallGraph {
            vertices,
            labels: norm.clone(),
            edges: norm,
            identification: None,
        };
        g.check_size()?;
        Ok(g)
    }

    pub fn cycle(k: usize) -> Result<Self> {
        SmallGraph::new(k, &(0..k).map(|i| (i, (i + 1) % k)).collect::<Vec<_>>())
    }

    pub fn path(k: usize) -> Result<Self> {
        SmallGraph::new(k, &(1..k).map(|i| (i - 1, i)).collect::<Vec<_>>())
    }

    pub fn complete(k: usize) -> Result<Self> {
        let mut e = Vec::new();
        for a in 0..k {
            for b in a + 1..k {
                e.push((a, b));
            }
        }
        SmallGraph::new(k, &e)
    }

    /// `rows × cols` grid, vertex `r * cols + c`.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let mut e = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = r * cols + c;
                if c + 1 < cols {
                    e.push((v, v + 1));
                }
                if r + 1 < rows {
                    e.push((v, v + cols));
                }
            }
        }
        SmallGraph::new(rows * cols, &e)
    }

    /// Merge every vertex in `group` into one. Edges inside the group
    /// vanish; edges leaving it become parallel edges to the merged vertex.
    pub fn identify(&self, group: &[usize]) -> Result<Self> {
        let base = self
            .identification
            .clone()
            .unwrap_or_else(|| (0..self.vertices).collect());
        let in_group: Vec<bool> = (0..self.vertices).map(|v| group.contains(&v)).collect();
        let mut map = vec![usize::MAX; self.vertices];
        let mut next = 0;
        let mut merged = usize::MAX;
        for v in 0..self.vertices {
            if in_group[v] {
                if merged == usize::MAX {
                    merged = next;
                    next += 1;
                }
                map[v] = merged;
            } else {
                map[v] = next;
                next += 1;
            }
        }
        let mut pairs: Vec<((usize, usize), (usize, usize))> = Vec::new();
        for (&(a, b), &label) in self.edges.iter().zip(&self.labels) {
            let (x, y) = (map[a], map[b]);
            if x != y {
                pairs.push(((x.min(y), x.max(y)), label));
            }
        }
        pairs.sort_unstable();
        let g = SmallGraph {
            vertices: next,
            edges: pairs.iter().map(|p| p.0).collect(),
            labels: pairs.iter().map(|p| p.1).collect(),
            identification: Some(base.iter().map(|&v| map[v]).collect()),
        };
        g.check_size()?;
        Ok(g)
    }

    /// The graph a sampling domain describes: lattice sites as vertices
    /// (lexicographic order) with the root set identified for wired
    /// conditions. Edge labels are lattice index pairs.
    pub fn from_domain(domain: &SamplingDomain) -> Result<Self> {
        let lb = &domain.lattice;
        if lb.len() > 4 * MAX_VERTICES {
            return Err(Error::OracleGuard(format!("{} sites", lb.len())));
        }
        let mut e = Vec::new();
        for i in 0..lb.len() {
            let s = lb.site(i);
            for a in 0..lb.dim() {
                if let Some(j) = lb.index(&s.shifted(a, 1)) {
                    e.push((i, j));
                }
            }
        }
        let mut g = SmallGraph {
            vertices: lb.len(),
            labels: e.clone(),
            edges: e,
            identification: None,
        };
        if domain.bc != BoundaryCondition::Free {
            let roots: Vec<usize> = (0..lb.len())
                .filter(|&i| domain.is_root_site(&lb.site(i)))
                .collect();
            g = g.identify(&roots)?;
        }
        g.check_size()?;
        Ok(g)
    }

    fn check_size(&self) -> Result<()> {
        if self.vertices > MAX_VERTICES {
            return Err(Error::OracleGuard(format!(
                "{} vertices > {MAX_VERTICES}",
                self.vertices
            )));
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Original vertex pair of each edge.
    pub fn labels(&self) -> &[(usize, usize)] {
        &self.labels
    }

    pub fn identification(&self) -> Option<&[usize]> {
        self.identification.as_deref()
    }

    pub fn is_connected(&self) -> bool {
        if self.vertices == 0 {
            return true;
        }
        let mut dsu = Dsu::new(self.vertices);
        let mut parts = self.vertices;
        for &(a, b) in &self.edges {
            if dsu.union(a, b) {
                parts -= 1;
            }
        }
        parts == 1
    }

    /// Edge indices (sorted) of a tree sampled on the domain this graph
    /// came from.
    pub fn edge_set_of(&self, tree: &TreeState) -> Result<Vec<usize>> {
        let lookup: HashMap<(usize, usize), usize> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| ((a.min(b), a.max(b)), i))
            .collect();
        let mut out = Vec::with_capacity(self.vertices.saturating_sub(1));
        for (a, b) in tree.edge_indices() {
            let key = (a.min(b), a.max(b));
            out.push(
                *lookup.get(&key).ok_or_else(|| {
                    Error::InvalidRegion(format!("tree edge {key:?} not in graph"))
                })?,
            );
        }
        out.sort_unstable();
        Ok(out)
    }
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }

    fn find(&self, mut v: usize) -> usize {
        while self.0[v] != v {
            v = self.0[v];
        }
        v
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Number of spanning trees: determinant of the Laplacian with vertex 0's
/// row and column removed, by fraction-free elimination.
pub fn matrix_tree_count(g: &SmallGraph) -> Result<u128> {
    if !g.is_connected() {
        return Err(Error::Disconnected);
    }
    let k = g.vertices - 1;
    if k == 0 {
        return Ok(1);
    }
    let mut a = vec![vec![0i128; k]; k];
    for &(u, v) in &g.edges {
        for (x, y) in [(u, v), (v, u)] {
            if x > 0 {
                a[x - 1][x - 1] += 1;
                if y > 0 {
                    a[x - 1][y - 1] -= 1;
                }
            }
        }
    }
    let det = bareiss_det(a)?;
    Ok(det as u128)
}

/// Determinant of a square integer matrix by Bareiss elimination.
pub fn bareiss_det(mut a: Vec<Vec<i128>>) -> Result<i128> {
    let k = a.len();
    let overflow = || Error::OracleGuard("determinant overflow".into());
    let mut sign = 1i128;
    let mut prev = 1i128;
    for p in 0..k {
        if a[p][p] == 0 {
            let Some(r) = (p + 1..k).find(|&r| a[r][p] != 0) else {
                return Ok(0);
            };
            a.swap(p, r);
            sign = -sign;
        }
        for i in p + 1..k {
            for j in p + 1..k {
                let x = a[i][j].checked_mul(a[p][p]).ok_or_else(overflow)?;
                let y = a[i][p].checked_mul(a[p][j]).ok_or_else(overflow)?;
                a[i][j] = x.checked_sub(y).ok_or_else(overflow)? / prev;
            }
            a[i][p] = 0;
        }
        prev = a[p][p];
    }
    Ok(sign * a[k - 1][k - 1])
}

/// All spanning trees as sorted edge-index lists, in lexicographic order.
pub fn enumerate_spanning_trees(g: &SmallGraph) -> Result<Vec<Vec<usize>>> {
    if !g.is_connected() {
        return Err(Error::Disconnected);
    }
    let need = g.vertices.saturating_sub(1);
    let excess = g.edges.len() - need;
    if excess > MAX_EXCESS_EDGES {
        return Err(Error::OracleGuard(format!(
            "{excess} edges beyond a spanning tree > {MAX_EXCESS_EDGES}"
        )));
    }
    let mut out = Vec::new();
    let mut chosen = Vec::with_capacity(need);
    let dsu = Dsu::new(g.vertices);
    extend(g, 0, need, &dsu, &mut chosen, &mut out);
    Ok(out)
}

fn extend(
    g: &SmallGraph,
    from: usize,
    need: usize,
    dsu: &Dsu,
    chosen: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if chosen.len() == need {
        out.push(chosen.clone());
        return;
    }
    let left = need - chosen.len();
    for e in from..g.edges.len() {
        if g.edges.len() - e < left {
            break;
        }
        let (a, b) = g.edges[e];
        let mut next = Dsu(dsu.0.clone());
        if next.union(a, b) {
            chosen.push(e);
            extend(g, e + 1, need, &next, chosen, out);
            chosen.pop();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

fn chi_sf(stat: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    if stat <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64).unwrap().sf(stat)
}

/// Pearson goodness of fit against the uniform law on `counts.len()` cells.
pub fn uniformity_test(counts: &[u64]) -> Result<ChiSquareResult> {
    let total: u64 = counts.iter().sum();
    let k = counts.len();
    let expected = total as f64 / k as f64;
    if k == 0 || expected < 5.0 {
        return Err(Error::IncreaseSamples { expected });
    }
    let statistic = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    Ok(ChiSquareResult {
        statistic,
        dof: k - 1,
        p_value: chi_sf(statistic, k - 1),
    })
}

/// Chi-square test of homogeneity between two count vectors over the same
/// cells. Cells empty in both samples are dropped.
pub fn two_sample_test(a: &[u64], b: &[u64]) -> Result<ChiSquareResult> {
    assert_eq!(a.len(), b.len(), "count vectors must share cells");
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let total = na + nb;
    let mut statistic = 0.0;
    let mut cells = 0;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cells += 1;
        let (ea, eb) = (na * col / total, nb * col / total);
        if ea < 5.0 || eb < 5.0 {
            return Err(Error::IncreaseSamples {
                expected: ea.min(eb),
            });
        }
        statistic += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    let dof = cells.max(1) - 1;
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: chi_sf(statistic, dof),
    })
}

/// Tally sampled edge sets against an enumeration.
pub fn tree_frequencies<I: IntoIterator<Item = Vec<usize>>>(
    samples: I,
    enumeration: &[Vec<usize>],
) -> Result<Vec<u64>> {
    let index: HashMap<&[usize], usize> = enumeration
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_slice(), i))
        .collect();
    let mut counts = vec![0u64; enumeration.len()];
    for s in samples {
        let i = index
            .get(s.as_slice())
            .ok_or_else(|| Error::InvalidRegion(format!("sample {s:?} is not a spanning tree")))?;
        counts[*i] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeBox;

    #[test]
    fn small_counts() {
        assert_eq!(
            matrix_tree_count(&SmallGraph::complete(3).unwrap()).unwrap(),
            3
        );
        assert_eq!(
            matrix_tree_count(&SmallGraph::cycle(4).unwrap()).unwrap(),
            4
        );
        assert_eq!(
            matrix_tree_count(&SmallGraph::grid(2, 2).unwrap()).unwrap(),
            4
        );
        assert_eq!(matrix_tree_count(&SmallGraph::path(6).unwrap()).unwrap(), 1);
        assert_eq!(
            matrix_tree_count(&SmallGraph::complete(5).unwrap()).unwrap(),
            125
        );
    }

    #[test]
    fn grid_2x3_counts_agree() {
        let g = SmallGraph::grid(2, 3).unwrap();
        let trees = enumerate_spanning_trees(&g).unwrap();
        assert_eq!(trees.len(), 15);
        assert_eq!(matrix_tree_count(&g).unwrap(), 15);
        let mut sorted = trees.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, trees);
    }

    #[test]
    fn triangle_trees_omit_one_edge() {
        let g = SmallGraph::complete(3).unwrap();
        let trees = enumerate_spanning_trees(&g).unwrap();
        assert_eq!(trees, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
    }

    #[test]
    fn cayley_formula_on_k6() {
        let g = SmallGraph::complete(6).unwrap();
        assert_eq!(matrix_tree_count(&g).unwrap(), 6u128.pow(4));
        assert_eq!(enumerate_spanning_trees(&g).unwrap().len(), 1296);
    }

    #[test]
    fn disconnected_is_an_error() {
        let g = SmallGraph::new(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(matches!(matrix_tree_count(&g), Err(Error::Disconnected)));
        assert!(matches!(
            enumerate_spanning_trees(&g),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn excess_guard() {
        let g = SmallGraph::complete(8).unwrap(); // 28 edges, 8 vertices
        assert!(matches!(
            enumerate_spanning_trees(&g),
            Err(Error::OracleGuard(_))
        ));
        assert!(SmallGraph::grid(5, 5).is_err());
    }

    #[test]
    fn wired_identification_keeps_parallel_edges() {
        // wiring the boundary of a 3×3 box leaves the center with four
        // parallel edges to the root: four spanning trees
        let lb = LatticeBox::new(&[0, 0], &[2, 2]).unwrap();
        let g = SmallGraph::from_domain(&SamplingDomain::new(lb, 2, BoundaryCondition::WiredAll))
            .unwrap();
        assert_eq!(g.num_vertices(), 2);
        assert_eq!(g.edges().len(), 4);
        assert_eq!(matrix_tree_count(&g).unwrap(), 4);
        assert_eq!(enumerate_spanning_trees(&g).unwrap().len(), 4);
    }

    #[test]
    fn count_matches_enumeration_on_wired_boxes() {
        for (lo, hi) in [([0, 0], [3, 2]), ([0, 0], [3, 3]), ([0, 0], [4, 2])] {
            let lb = LatticeBox::new(&lo, &hi).unwrap();
            for bc in [BoundaryCondition::WiredAll, BoundaryCondition::RightWired] {
                let g = SmallGraph::from_domain(&SamplingDomain::new(lb.clone(), 3, bc)).unwrap();
                let count = matrix_tree_count(&g).unwrap();
                assert_eq!(
                    count as usize,
                    enumerate_spanning_trees(&g).unwrap().len(),
                    "{bc:?} {hi:?}"
                );
            }
        }
    }

    #[test]
    fn bareiss_known_values() {
        assert_eq!(bareiss_det(vec![vec![2, 1], vec![1, 3]]).unwrap(), 5);
        assert_eq!(bareiss_det(vec![vec![0, 1], vec![1, 0]]).unwrap(), -1);
        assert_eq!(bareiss_det(vec![vec![1, 2], vec![2, 4]]).unwrap(), 0);
    }

    #[test]
    fn uniform_counts_give_zero_statistic() {
        let r = uniformity_test(&[100; 15]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.dof, 14);
    }

    #[test]
    fn planted_bias_is_rejected() {
        // one of 15 trees at twice the weight, 10⁵ draws, expected counts
        let total: f64 = 100_000.0;
        let w = 1.0 / 16.0;
        let mut counts = vec![(total * w).round() as u64; 15];
        counts[0] = (total * 2.0 * w).round() as u64;
        let r = uniformity_test(&counts).unwrap();
        assert!(r.p_value < 1e-6, "p = {}", r.p_value);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            uniformity_test(&[3, 4, 5]),
            Err(Error::IncreaseSamples { .. })
        ));
    }

    #[test]
    fn two_sample_identical() {
        let r = two_sample_test(&[50, 60, 70], &[50, 60, 70]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let r = two_sample_test(&[500, 600, 700], &[700, 600, 500]).unwrap();
        assert!(r.p_value < 1e-6);
    }
}
