//! Restriction of a tree to a window, connected components, and spanning
//! cluster / crossing counts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{regions, BoxRegion, FaceRegion, LatticeBox, MeshSpec, SitePoint};
use crate::walk::PathRecord;
use crate::wilson::TreeState;

/// Disjoint sets with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    components: usize,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        UnionFind {
            parent: (0..len as u32).collect(),
            size: vec![1; len],
            components: len,
        }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] as usize != i {
            let gp = self.parent[self.parent[i] as usize];
            self.parent[i] = gp;
            i = gp as usize;
        }
        i
    }

    /// Merge the sets of `a` and `b`; returns the new root if they differed.
    pub fn union(&mut self, a: usize, b: usize) -> Option<usize> {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return None;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        self.components -= 1;
        Some(ra)
    }

    pub fn size_of(&mut self, i: usize) -> usize {
        let r = self.find(i);
        self.size[r] as usize
    }

    pub fn components(&self) -> usize {
        self.components
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentInfo {
    /// Lexicographically smallest site; doubles as the component's name.
    pub min_site: SitePoint,
    pub size: usize,
    pub touches_left: bool,
    pub touches_right: bool,
}

impl ComponentInfo {
    pub fn spanning(&self) -> bool {
        self.touches_left && self.touches_right
    }
}

const ABSENT: u32 = u32::MAX;

/// Components of a tree restricted to a window.
#[derive(Clone, Debug)]
pub struct ClusterLabeling {
    pub window: BoxRegion,
    lattice: LatticeBox,
    /// Component id per window site (lexicographic), `None` if absent.
    component: Vec<u32>,
    /// Components ordered by their smallest site.
    pub components: Vec<ComponentInfo>,
}

impl ClusterLabeling {
    pub fn lattice(&self) -> &LatticeBox {
        &self.lattice
    }

    pub fn component_of(&self, p: &SitePoint) -> Option<usize> {
        let i = self.lattice.index(p)?;
        match self.component[i] {
            ABSENT => None,
            c => Some(c as usize),
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn spanning_count(&self) -> usize {
        self.components.iter().filter(|c| c.spanning()).count()
    }

    pub fn spanning_ids(&self) -> Vec<usize> {
        (0..self.components.len())
            .filter(|&c| self.components[c].spanning())
            .collect()
    }

    /// CSV: site coordinates, component id, spanning flag.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dim = self.lattice.dim();
        let header: Vec<String> = (1..=dim).map(|a| format!("x{a}")).collect();
        writeln!(w, "{},component,spanning", header.join(","))?;
        for (i, &c) in self.component.iter().enumerate() {
            if c == ABSENT {
                continue;
            }
            let s = self.lattice.site(i);
            let coords: Vec<String> = s.coords().iter().map(|c| c.to_string()).collect();
            writeln!(
                w,
                "{},{},{}",
                coords.join(","),
                c,
                self.components[c as usize].spanning() as u8
            )?;
        }
        Ok(())
    }
}

/// Label the graph with vertex set `present` (sites of `strip_box`) and the
/// given edges; edges with an endpoint outside are dropped.
pub fn label_subgraph<I>(
    strip_box: &LatticeBox,
    window: BoxRegion,
    present: &[bool],
    edges: I,
    left: &FaceRegion,
    right: &FaceRegion,
    n: u32,
) -> ClusterLabeling
where
    I: IntoIterator<Item = (SitePoint, SitePoint)>,
{
    let len = strip_box.len();
    let mut uf = UnionFind::new(len);
    for (a, b) in edges {
        if let (Some(i), Some(j)) = (strip_box.index(&a), strip_box.index(&b)) {
            if present[i] && present[j] {
                uf.union(i, j);
            }
        }
    }
    finish_labeling(strip_box, window, present, &mut uf, left, right, n)
}

fn finish_labeling(
    strip_box: &LatticeBox,
    window: BoxRegion,
    present: &[bool],
    uf: &mut UnionFind,
    left: &FaceRegion,
    right: &FaceRegion,
    n: u32,
) -> ClusterLabeling {
    let len = strip_box.len();
    let mut root_to_comp = vec![ABSENT; len];
    let mut component = vec![ABSENT; len];
    let mut components: Vec<ComponentInfo> = Vec::new();
    // index order is lexicographic, so the first site seen is the minimum
    for i in 0..len {
        if !present[i] {
            continue;
        }
        let r = uf.find(i);
        let c = if root_to_comp[r] == ABSENT {
            root_to_comp[r] = components.len() as u32;
            components.push(ComponentInfo {
                min_site: strip_box.site(i),
                size: 0,
                touches_left: false,
                touches_right: false,
            });
            root_to_comp[r]
        } else {
            root_to_comp[r]
        };
        component[i] = c;
        let info = &mut components[c as usize];
        info.size += 1;
        let s = strip_box.site(i);
        if !info.touches_left && left.within_delta(&s, n) {
            info.touches_left = true;
        }
        if !info.touches_right && right.within_delta(&s, n) {
            info.touches_right = true;
        }
    }
    ClusterLabeling {
        window,
        lattice: strip_box.clone(),
        component,
        components,
    }
}

/// Components of the tree restricted to `strip`, with left/right touch flags.
pub fn label_clusters(
    tree: &TreeState,
    left: &FaceRegion,
    right: &FaceRegion,
    strip: &BoxRegion,
    n: u32,
) -> Result<ClusterLabeling> {
    let sb = strip.lattice_box(n)?;
    let lb = tree.lattice();
    if !lb.contains_box(&sb) {
        return Err(Error::WindowExceedsDomain);
    }
    let len = sb.len();
    let mut to_domain = Vec::with_capacity(len);
    let mut present = Vec::with_capacity(len);
    for i in 0..len {
        let di = lb.index(&sb.site(i)).expect("strip inside domain");
        to_domain.push(di);
        present.push(tree.contains_index(di));
    }
    let mut uf = UnionFind::new(len);
    for i in 0..len {
        if !present[i] {
            continue;
        }
        if let Some(p) = tree.parent_index(to_domain[i]) {
            if let Some(j) = sb.index(&lb.site(p)) {
                uf.union(i, j);
            }
        }
    }
    Ok(finish_labeling(
        &sb,
        strip.clone(),
        &present,
        &mut uf,
        left,
        right,
        n,
    ))
}

/// `N_δ`: the number of clusters of the tree in the window meeting both
/// `dist(·, F) < δ` and `dist(·, G) < δ`.
pub fn count_spanning_clusters(
    tree: &TreeState,
    window: &BoxRegion,
    spec: &MeshSpec,
) -> Result<(usize, ClusterLabeling)> {
    let labeling = label_clusters(tree, &regions::face_f(), &regions::face_g(), window, spec.n)?;
    Ok((labeling.spanning_count(), labeling))
}

/// Spanning clusters between two faces within a strip.
pub fn spanning_clusters_between(
    tree: &TreeState,
    left: &FaceRegion,
    right: &FaceRegion,
    strip: &BoxRegion,
) -> Result<usize> {
    let n = tree.domain().n;
    Ok(label_clusters(tree, left, right, strip, n)?.spanning_count())
}

/// Crossings of a path between two faces within a strip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub path_id: usize,
    pub count: usize,
    /// `count < M`.
    pub i_event: bool,
}

fn crossings_of<I: Iterator<Item = SitePoint>>(
    sites: I,
    left: &FaceRegion,
    right: &FaceRegion,
    strip: &BoxRegion,
    n: u32,
) -> usize {
    let mut count = 0;
    let (mut inside, mut l, mut r) = (false, false, false);
    for s in sites {
        if strip.contains(&s, n) {
            if !inside {
                inside = true;
                l = false;
                r = false;
            }
            l |= left.within_delta(&s, n);
            r |= right.within_delta(&s, n);
        } else if inside {
            count += (l && r) as usize;
            inside = false;
        }
    }
    if inside {
        count += (l && r) as usize;
    }
    count
}

/// Split `path` into maximal runs inside `strip` and count the runs that
/// come within `δ` of both faces.
pub fn count_crossings(
    path_id: usize,
    path: &PathRecord,
    left: &FaceRegion,
    right: &FaceRegion,
    strip: &BoxRegion,
    n: u32,
    m: u32,
) -> CrossingReport {
    let count = crossings_of(path.sites().iter().copied(), left, right, strip, n);
    CrossingReport {
        path_id,
        count,
        i_event: count < m as usize,
    }
}

pub(crate) fn count_crossings_indices(
    lb: &LatticeBox,
    path: &[usize],
    left: &FaceRegion,
    right: &FaceRegion,
    strip: &BoxRegion,
    n: u32,
) -> usize {
    crossings_of(path.iter().map(|&i| lb.site(i)), left, right, strip, n)
}

/// Running count of spanning clusters in a strip as branches are added.
pub(crate) struct StripTracker {
    domain: LatticeBox,
    strip: LatticeBox,
    uf: UnionFind,
    present: Vec<bool>,
    left_face: Vec<bool>,
    right_face: Vec<bool>,
    flags: Vec<u8>,
    spanning: usize,
}

impl StripTracker {
    pub(crate) fn new(
        domain: &LatticeBox,
        strip: &BoxRegion,
        left: &FaceRegion,
        right: &FaceRegion,
        n: u32,
    ) -> Result<Self> {
        let sb = strip.lattice_box(n)?;
        if !domain.contains_box(&sb) {
            return Err(Error::WindowExceedsDomain);
        }
        let len = sb.len();
        let left_face = (0..len)
            .map(|i| left.within_delta(&sb.site(i), n))
            .collect();
        let right_face = (0..len)
            .map(|i| right.within_delta(&sb.site(i), n))
            .collect();
        Ok(StripTracker {
            domain: domain.clone(),
            uf: UnionFind::new(len),
            present: vec![false; len],
            left_face,
            right_face,
            flags: vec![0; len],
            spanning: 0,
            strip: sb,
        })
    }

    fn local(&self, domain_index: u32) -> Option<usize> {
        self.strip.index(&self.domain.site(domain_index as usize))
    }

    fn activate(&mut self, i: usize) {
        if !self.present[i] {
            self.present[i] = true;
            self.flags[i] = self.left_face[i] as u8 | (self.right_face[i] as u8) << 1;
            if self.flags[i] == 3 {
                self.spanning += 1;
            }
        }
    }

    /// Add a branch given as consecutive domain indices; the last entry is
    /// the attachment site, already in the tree.
    pub(crate) fn add_path(&mut self, branch: &[u32]) {
        let locals: Vec<Option<usize>> = branch.iter().map(|&d| self.local(d)).collect();
        for l in locals.iter().flatten() {
            self.activate(*l);
        }
        for w in locals.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                let (ra, rb) = (self.uf.find(a), self.uf.find(b));
                if ra == rb {
                    continue;
                }
                let (fa, fb) = (self.flags[ra], self.flags[rb]);
                self.spanning -= (fa == 3) as usize + (fb == 3) as usize;
                let r = self.uf.union(ra, rb).expect("distinct roots");
                self.flags[r] = fa | fb;
                self.spanning += (self.flags[r] == 3) as usize;
            }
        }
    }

    pub(crate) fn spanning(&self) -> usize {
        self.spanning
    }
}
