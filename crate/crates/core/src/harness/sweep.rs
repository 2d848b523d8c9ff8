use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Mode};
use super::record::{HSummary, SampleRecord};
use super::render::{render_svg, SlabProjection};
use crate::cluster::count_spanning_clusters;
use crate::error::{Error, Result};
use crate::probes::{probe_branches, window_seeds};
use crate::walk::{RngStream, GENERATOR};
use crate::wilson::{sample_ust_fast, staged_sample, SamplingDomain, TreeState};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub path: PathBuf,
    pub written: usize,
    /// Records already present from an earlier run.
    pub skipped: usize,
    pub failed: usize,
}

/// Where a sweep writes its records.
pub fn records_path(config: &ExperimentConfig) -> PathBuf {
    config
        .output_dir
        .join(format!("samples-{}.jsonl", config.digest()))
}

fn render_path(config: &ExperimentConfig, n: u32, m: Option<u32>, stream: u64) -> PathBuf {
    let m = m.map_or(String::new(), |m| format!("-m{m}"));
    config
        .output_dir
        .join(format!("render-n{n}{m}-s{stream}.svg"))
}

/// Hittability summary for `branches` random window seeds at scale `m`.
pub fn h_summary(
    tree: &TreeState,
    config: &ExperimentConfig,
    n: u32,
    m: u32,
    rng: &RngStream,
) -> Result<HSummary> {
    let spec = config.spec(n)?;
    let budget = &config.probes;
    let seeds = window_seeds(&spec, budget.branches, &rng.child(u64::MAX))?;
    let ests = probe_branches(
        tree,
        &seeds,
        m,
        budget.points_per_branch,
        budget.trials,
        &rng.child(u64::MAX - 1),
    )?;
    let worst_p = ests
        .iter()
        .map(|e| e.p_hat)
        .filter(|p| p.is_finite())
        .fold(0.0, f64::max);
    let threshold = (m as f64).powf(-budget.xi);
    Ok(HSummary {
        branches: seeds.len(),
        probes: ests.len(),
        trials: budget.trials,
        worst_p,
        threshold,
        all_h: worst_p <= threshold,
    })
}

/// Build and measure one sample. Replaying the same `(config, n, m,
/// stream)` yields the same record apart from `wall_ms`.
pub fn sample_one(config: &ExperimentConfig, n: u32, m: Option<u32>, stream: u64) -> SampleRecord {
    let seed = config.cell_seed(n, m);
    let mut rec = SampleRecord {
        config_digest: config.digest(),
        seed,
        stream_id: stream,
        dim: config.dim,
        n,
        m,
        bc: config.bc.name().into(),
        n_delta: None,
        sites: None,
        all_i: None,
        n_stage1: None,
        increment_violations: None,
        nested: None,
        w_counts: Vec::new(),
        h: None,
        error: None,
        generator: GENERATOR.into(),
        wall_ms: 0,
    };
    let t0 = Instant::now();
    if let Err(e) = fill(config, &mut rec, RngStream::new(seed, stream)) {
        rec.error = Some(e.to_string());
    }
    rec.wall_ms = t0.elapsed().as_millis() as u64;
    rec
}

fn fill(config: &ExperimentConfig, rec: &mut SampleRecord, rng: RngStream) -> Result<()> {
    let spec = config.spec(rec.n)?;
    let tree = match (config.mode, rec.m) {
        (Mode::Staged, Some(m)) => {
            let out = staged_sample(&spec, m, &rng)?;
            rec.all_i = Some(out.stage1.all_i);
            rec.n_stage1 = out.stage1.n_seq.last().copied();
            rec.increment_violations = Some(out.stage1.increment_violations.len());
            rec.nested = Some(out.nested);
            rec.w_counts = out.stages.iter().map(|s| s.w_count).collect();
            if config.probes.trials > 0 {
                rec.h = Some(h_summary(&out.tree, config, rec.n, m, &rng)?);
            }
            out.tree
        }
        _ => sample_ust_fast(&SamplingDomain::for_spec(&spec, config.bc)?, &rng)?,
    };
    let (n_delta, labeling) = count_spanning_clusters(&tree, &spec.window(), &spec)?;
    rec.n_delta = Some(n_delta);
    rec.sites = Some(tree.num_sites());
    if (rec.stream_id as usize) < config.render.count {
        let projection = config
            .render
            .slab
            .map(|level| SlabProjection { axis: 2, level });
        let path = render_path(config, rec.n, rec.m, rec.stream_id);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        render_svg(&tree, &labeling, projection, BufWriter::new(f))?;
    }
    Ok(())
}

/// Drop a torn final line and return the records already on disk.
fn recover(path: &Path) -> Result<Vec<SampleRecord>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    }
    super::record::read_records(&bytes[..keep])
}

/// Run every `(cell, stream)` of the config, appending records to
/// [`records_path`]. Records already present are skipped, so an interrupted
/// sweep can be resumed by running it again. Batches are computed in
/// parallel on `config.workers` threads and written in a fixed order, so the
/// file does not depend on the worker count.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepSummary> {
    run_sweep_with(config, |_| {})
}

/// [`run_sweep`] with a callback for each newly written record.
pub fn run_sweep_with(
    config: &ExperimentConfig,
    mut on_record: impl FnMut(&SampleRecord),
) -> Result<SweepSummary> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let path = records_path(config);
    let existing = recover(&path)?;
    let digest = config.digest();
    if let Some(r) = existing.iter().find(|r| r.config_digest != digest) {
        return Err(Error::Config(format!(
            "{} holds records of config {}",
            path.display(),
            r.config_digest
        )));
    }
    let done: HashSet<_> = existing.iter().map(|r| r.key()).collect();
    let todo: Vec<(u32, Option<u32>, u64)> = config
        .cells()
        .into_iter()
        .flat_map(|(n, m)| (0..config.samples).map(move |s| (n, m, s)))
        .filter(|k| !done.contains(k))
        .collect();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let workers = config.workers.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut summary = SweepSummary {
        path: path.clone(),
        skipped: done.len(),
        ..Default::default()
    };
    for batch in todo.chunks(workers * 4) {
        let recs: Vec<SampleRecord> = pool.install(|| {
            batch
                .par_iter()
                .map(|&(n, m, s)| sample_one(config, n, m, s))
                .collect()
        });
        for r in &recs {
            r.write_line(&mut out)?;
            summary.written += 1;
            summary.failed += !r.ok() as usize;
            on_record(r);
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}
