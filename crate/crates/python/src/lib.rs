use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use spanclust::harness::{render_svg, SlabProjection};
use spanclust::oracle::{self, SmallGraph};
use spanclust::probes;
use spanclust::wilson::{sample_ust_on, write_tree_dump, TreeDumpHeader};
use spanclust::{BoundaryCondition, RngStream, SamplingDomain, SiteOrdering, SitePoint};

type Site = Vec<i64>;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn site(c: &[i64]) -> SitePoint {
    SitePoint::new(c)
}

fn coords(p: &SitePoint) -> Site {
    p.coords().to_vec()
}

#[pyclass(name = "MeshSpec", frozen, from_py_object)]
#[derive(Clone)]
struct PyMeshSpec {
    inner: spanclust::MeshSpec,
}

#[pymethods]
impl PyMeshSpec {
    #[new]
    #[pyo3(signature = (dim, n, enlargement = 3))]
    fn new(dim: usize, n: u32, enlargement: u32) -> PyResult<Self> {
        Ok(PyMeshSpec {
            inner: spanclust::MeshSpec::new(dim, n, enlargement).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn n(&self) -> u32 {
        self.inner.n
    }

    #[getter]
    fn enlargement(&self) -> u32 {
        self.inner.enlargement
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta_f64()
    }

    fn __repr__(&self) -> String {
        format!(
            "MeshSpec(dim={}, n={}, enlargement={})",
            self.inner.dim, self.inner.n, self.inner.enlargement
        )
    }
}

/// A sampled spanning tree together with the mesh it was sampled for.
#[pyclass(name = "Tree")]
struct PyTree {
    spec: spanclust::MeshSpec,
    header: TreeDumpHeader,
    tree: spanclust::TreeState,
}

#[pymethods]
impl PyTree {
    #[getter]
    fn num_sites(&self) -> usize {
        self.tree.num_sites()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.tree.num_edges()
    }

    #[getter]
    fn num_root_sites(&self) -> usize {
        self.tree.num_root_sites()
    }

    /// `(child, parent)` coordinate pairs.
    fn edges(&self) -> Vec<(Site, Site)> {
        self.tree
            .edges()
            .map(|(a, b)| (coords(&a), coords(&b)))
            .collect()
    }

    fn parent(&self, z: Site) -> Option<Site> {
        self.tree.parent(&site(&z)).map(|p| coords(&p))
    }

    /// Path from `z` to the root set.
    fn branch(&self, z: Site) -> PyResult<Vec<Site>> {
        let b = self.tree.branch_of(&site(&z)).map_err(err)?;
        Ok(b.sites().iter().map(coords).collect())
    }

    fn check_spanning(&self) -> PyResult<()> {
        self.tree.check_spanning().map_err(PyValueError::new_err)
    }

    /// Number of spanning clusters in the unit window.
    fn n_delta(&self) -> PyResult<usize> {
        let (n, _) =
            spanclust::count_spanning_clusters(&self.tree, &self.spec.window(), &self.spec)
                .map_err(err)?;
        Ok(n)
    }

    /// `(site, component, spanning)` rows of the window labeling.
    fn labeling(&self) -> PyResult<Vec<(Site, usize, bool)>> {
        let (_, lab) =
            spanclust::count_spanning_clusters(&self.tree, &self.spec.window(), &self.spec)
                .map_err(err)?;
        Ok(lab
            .lattice()
            .sites()
            .filter_map(|s| {
                lab.component_of(&s)
                    .map(|c| (coords(&s), c, lab.components[c].spanning()))
            })
            .collect())
    }

    fn write_dump(&self, path: std::path::PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(&path).map_err(err)?;
        write_tree_dump(std::io::BufWriter::new(f), &self.header, &self.tree).map_err(err)
    }

    /// Write an SVG of the window; returns `(base_edges, highlighted_groups)`.
    #[pyo3(signature = (path, slab = None))]
    fn render_svg(&self, path: std::path::PathBuf, slab: Option<i64>) -> PyResult<(usize, usize)> {
        let (_, lab) =
            spanclust::count_spanning_clusters(&self.tree, &self.spec.window(), &self.spec)
                .map_err(err)?;
        let f = std::fs::File::create(&path).map_err(err)?;
        let proj = slab.map(|level| SlabProjection { axis: 2, level });
        let s = render_svg(&self.tree, &lab, proj, std::io::BufWriter::new(f)).map_err(err)?;
        Ok((s.base_edges, s.highlighted_groups))
    }
}

fn parse_bc(bc: &str) -> PyResult<BoundaryCondition> {
    bc.parse().map_err(err)
}

/// Sample a uniform spanning tree with Wilson's algorithm.
#[pyfunction]
#[pyo3(signature = (spec, bc = "free-with-wired-halo", seed = 0, stream = 0, reverse = false))]
fn sample_tree(
    py: Python<'_>,
    spec: &PyMeshSpec,
    bc: &str,
    seed: u64,
    stream: u64,
    reverse: bool,
) -> PyResult<PyTree> {
    let bc = parse_bc(bc)?;
    let spec = spec.inner;
    let ordering = if reverse {
        SiteOrdering::ReverseLexicographic
    } else {
        SiteOrdering::Lexicographic
    };
    let tree = py
        .detach(|| {
            let dom = SamplingDomain::for_spec(&spec, bc)?;
            sample_ust_on(&dom, &ordering, &RngStream::new(seed, stream))
        })
        .map_err(err)?;
    Ok(PyTree {
        spec,
        header: TreeDumpHeader {
            spec,
            bc,
            ordering: ordering.digest(),
            seed,
            stream,
            generator: spanclust::walk::GENERATOR.into(),
        },
        tree,
    })
}

/// Staged build at scale `m`; returns the tree and a summary dict.
#[pyfunction]
#[pyo3(signature = (spec, m, seed = 0, stream = 0))]
fn staged_sample(
    py: Python<'_>,
    spec: &PyMeshSpec,
    m: u32,
    seed: u64,
    stream: u64,
) -> PyResult<(PyTree, Py<PyAny>)> {
    let spec = spec.inner;
    let out = py
        .detach(|| spanclust::staged_sample(&spec, m, &RngStream::new(seed, stream)))
        .map_err(err)?;
    let summary = pyo3::types::PyDict::new(py);
    summary.set_item("stages", out.stages.len())?;
    summary.set_item("all_i", out.stage1.all_i)?;
    summary.set_item("nested", out.nested)?;
    summary.set_item("n_seq", out.stage1.n_seq.clone())?;
    summary.set_item(
        "w_counts",
        out.stages.iter().map(|s| s.w_count).collect::<Vec<_>>(),
    )?;
    let tree = PyTree {
        spec,
        header: TreeDumpHeader {
            spec,
            bc: BoundaryCondition::FreeWithWiredHalo,
            ordering: format!("staged-m{m}"),
            seed,
            stream,
            generator: spanclust::walk::GENERATOR.into(),
        },
        tree: out.tree,
    };
    Ok((tree, summary.into_any().unbind()))
}

/// Chronological loop erasure of a nearest-neighbor path.
#[pyfunction]
fn loop_erase(path: Vec<Site>) -> PyResult<Vec<Site>> {
    let p = spanclust::PathRecord::new(path.iter().map(|c| site(c)).collect()).map_err(err)?;
    Ok(spanclust::loop_erase(&p)
        .sites()
        .iter()
        .map(coords)
        .collect())
}

fn graph(vertices: usize, edges: Vec<(usize, usize)>) -> PyResult<SmallGraph> {
    SmallGraph::new(vertices, &edges).map_err(err)
}

/// Number of spanning trees of a small simple graph.
#[pyfunction]
fn matrix_tree_count(vertices: usize, edges: Vec<(usize, usize)>) -> PyResult<u128> {
    oracle::matrix_tree_count(&graph(vertices, edges)?).map_err(err)
}

/// All spanning trees as lists of edge indices into the sorted edge list.
#[pyfunction]
fn enumerate_spanning_trees(
    vertices: usize,
    edges: Vec<(usize, usize)>,
) -> PyResult<Vec<Vec<usize>>> {
    oracle::enumerate_spanning_trees(&graph(vertices, edges)?).map_err(err)
}

/// Pearson chi-square against the uniform law: `(statistic, p_value)`.
#[pyfunction]
fn uniformity_test(counts: Vec<u64>) -> PyResult<(f64, f64)> {
    let r = oracle::uniformity_test(&counts).map_err(err)?;
    Ok((r.statistic, r.p_value))
}

#[pyfunction]
#[pyo3(signature = (successes, trials, alpha = 0.05))]
fn clopper_pearson(successes: u64, trials: u64, alpha: f64) -> (f64, f64) {
    probes::clopper_pearson(successes, trials, alpha)
}

#[pymodule]
fn spanclust_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMeshSpec>()?;
    m.add_class::<PyTree>()?;
    m.add_function(wrap_pyfunction!(sample_tree, m)?)?;
    m.add_function(wrap_pyfunction!(staged_sample, m)?)?;
    m.add_function(wrap_pyfunction!(loop_erase, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_tree_count, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_spanning_trees, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity_test, m)?)?;
    m.add_function(wrap_pyfunction!(clopper_pearson, m)?)?;
    Ok(())
}
