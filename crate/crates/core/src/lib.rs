//! Uniform spanning trees on boxes of the scaled lattice `δℤ^d`, sampled
//! with Wilson's algorithm, together with the observables used to study how
//! many tree clusters cross a box: spanning-cluster counts, loop-erased
//! branches, hittability probes, and exact checks on tiny graphs.

pub mod cluster;
pub mod digest;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod oracle;
pub mod probes;
pub mod walk;
pub mod wilson;

pub use cluster::{
    count_crossings, count_spanning_clusters, label_clusters, ClusterLabeling, UnionFind,
};
pub use error::{Error, Result};
pub use lattice::{
    covering_net, net_schedule, BoxRegion, FaceRegion, LatticeBox, MeshSpec, NetSchedule, SitePoint,
};
pub use oracle::{enumerate_spanning_trees, matrix_tree_count, uniformity_test, SmallGraph};
pub use probes::{estimate_xi, probe_hittability, HittabilityEstimate};
pub use walk::{loop_erase, loop_erase_incremental, srw_run, PathRecord, RngStream, StopRule};
pub use wilson::{
    sample_ust, staged_sample, BoundaryCondition, SamplingDomain, SiteOrdering, StagedOutcome,
    TreeState,
};
