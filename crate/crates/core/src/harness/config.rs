use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::short_digest;
use crate::error::{Error, Result};
use crate::lattice::MeshSpec;
use crate::wilson::BoundaryCondition;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Wilson's algorithm in lexicographic order.
    #[default]
    Plain,
    /// Net-seeded stages, one cell per `(n, M)` with `n > M`.
    Staged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBudget {
    /// Walks per probe point; 0 disables hittability probes in sweeps.
    #[serde(default)]
    pub trials: u64,
    #[serde(default = "default_branches")]
    pub branches: usize,
    #[serde(default = "default_points")]
    pub points_per_branch: usize,
    /// Exponent in the threshold `M^{-ξ}` for the H-event.
    #[serde(default = "default_xi")]
    pub xi: f64,
}

fn default_branches() -> usize {
    4
}

fn default_points() -> usize {
    8
}

fn default_xi() -> f64 {
    0.1
}

impl Default for ProbeBudget {
    fn default() -> Self {
        ProbeBudget {
            trials: 0,
            branches: default_branches(),
            points_per_branch: default_points(),
            xi: default_xi(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderToggles {
    /// Render the first `count` samples of each cell.
    #[serde(default)]
    pub count: usize,
    /// Fixed `x₃` level (lattice units) for `d = 3` renders.
    #[serde(default)]
    pub slab: Option<i64>,
}

fn default_enlargement() -> u32 {
    3
}

fn default_bc() -> BoundaryCondition {
    BoundaryCondition::FreeWithWiredHalo
}

/// One experiment. Stored as TOML; every record carries [`digest`](Self::digest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub n: Vec<u32>,
    #[serde(default)]
    pub m: Vec<u32>,
    #[serde(default = "default_bc")]
    pub bc: BoundaryCondition,
    #[serde(default = "default_enlargement")]
    pub enlargement: u32,
    pub samples: u64,
    #[serde(default)]
    pub base_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub probes: ProbeBudget,
    #[serde(default)]
    pub render: RenderToggles,
    /// Worker threads; `None` leaves the choice to the caller.
    #[serde(default)]
    pub workers: Option<usize>,
}

/// The fields that determine record contents.
#[derive(Serialize)]
struct DigestView<'a> {
    dim: usize,
    n: &'a [u32],
    m: &'a [u32],
    bc: BoundaryCondition,
    enlargement: u32,
    samples: u64,
    base_seed: u64,
    mode: Mode,
    probes: &'a ProbeBudget,
}

impl ExperimentConfig {
    pub fn new(dim: usize, n: Vec<u32>, samples: u64, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            dim,
            n,
            m: Vec::new(),
            bc: default_bc(),
            enlargement: default_enlargement(),
            samples,
            base_seed: 0,
            output_dir: output_dir.into(),
            mode: Mode::Plain,
            probes: ProbeBudget::default(),
            render: RenderToggles::default(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n.is_empty() {
            return Err(Error::Config("empty n list".into()));
        }
        for &n in &self.n {
            MeshSpec::new(self.dim, n, self.enlargement)?;
        }
        if self.mode == Mode::Staged {
            if self.m.is_empty() {
                return Err(Error::Config("staged mode needs an M list".into()));
            }
            if self.bc != BoundaryCondition::FreeWithWiredHalo {
                return Err(Error::Config(
                    "staged mode samples with the wired halo".into(),
                ));
            }
        }
        if self.m.contains(&0) {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.dim == 3 && self.render.count > 0 && self.render.slab.is_none() {
            return Err(Error::ProjectionRequired(3));
        }
        Ok(())
    }

    /// Hash of everything that affects record contents. The output
    /// directory, worker count and render toggles are excluded.
    pub fn digest(&self) -> String {
        let view = DigestView {
            dim: self.dim,
            n: &self.n,
            m: &self.m,
            bc: self.bc,
            enlargement: self.enlargement,
            samples: self.samples,
            base_seed: self.base_seed,
            mode: self.mode,
            probes: &self.probes,
        };
        short_digest(&serde_json::to_vec(&view).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn spec(&self, n: u32) -> Result<MeshSpec> {
        MeshSpec::new(self.dim, n, self.enlargement)
    }

    /// Cells in sweep order: every `n`, and for staged runs every `M < n`.
    pub fn cells(&self) -> Vec<(u32, Option<u32>)> {
        let mut out = Vec::new();
        for &n in &self.n {
            match self.mode {
                Mode::Plain => out.push((n, None)),
                Mode::Staged => {
                    out.extend(self.m.iter().filter(|&&m| m < n).map(|&m| (n, Some(m))))
                }
            }
        }
        out
    }

    /// Seed shared by all samples of a cell; samples differ by stream id.
    pub fn cell_seed(&self, n: u32, m: Option<u32>) -> u64 {
        let tag = ((self.dim as u64) << 56) ^ ((n as u64) << 24) ^ m.map_or(0, |m| m as u64 + 1);
        crate::walk::splitmix64(self.base_seed ^ crate::walk::splitmix64(tag))
    }
}
