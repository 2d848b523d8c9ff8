use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spanclust::harness::record::load_records;
use spanclust::harness::tail::{coarse_mesh_violations, estimate_tail_with_min, MIN_RECORDS};
use spanclust::harness::{render_svg, run_sweep, ExperimentConfig, SlabProjection};
use spanclust::lattice::LatticeBox;
use spanclust::oracle::{
    enumerate_spanning_trees, matrix_tree_count, tree_frequencies, two_sample_test,
    uniformity_test, SmallGraph,
};
use spanclust::probes::{
    estimate_xi, hittability_sweep, sample_traversal_counts, traversal_tail, write_jsonl,
    HittabilityPlan,
};
use spanclust::walk::GENERATOR;
use spanclust::wilson::{read_tree_dump, sample_ust_on, write_tree_dump, TreeDumpHeader};
use spanclust::{
    count_spanning_clusters, staged_sample, BoundaryCondition, MeshSpec, RngStream, SamplingDomain,
    SiteOrdering, SitePoint,
};

#[derive(Parser)]
#[command(
    name = "spanclust",
    version,
    about = "Spanning clusters of uniform spanning trees on lattice boxes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample one tree and report N_δ; optionally dump, label and render it.
    Sample(SampleArgs),
    /// Run every sample of a config file, appending JSONL records.
    Sweep(SweepArgs),
    /// Tail of N_δ from sweep records.
    Tail(TailArgs),
    /// Hittability and traversal experiments.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Exact spanning-tree counts and sampler uniformity on tiny graphs.
    Verify(VerifyArgs),
    /// Render a tree dump to SVG.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Bc {
    Free,
    WiredAll,
    RightWired,
    FreeWithWiredHalo,
}

impl From<Bc> for BoundaryCondition {
    fn from(b: Bc) -> Self {
        match b {
            Bc::Free => BoundaryCondition::Free,
            Bc::WiredAll => BoundaryCondition::WiredAll,
            Bc::RightWired => BoundaryCondition::RightWired,
            Bc::FreeWithWiredHalo => BoundaryCondition::FreeWithWiredHalo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Ordering {
    Lexicographic,
    Reverse,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, short = 'n', default_value_t = 16)]
    n: u32,
    #[arg(long, default_value_t = 3)]
    enlargement: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

impl MeshArgs {
    fn spec(&self) -> Result<MeshSpec> {
        Ok(MeshSpec::new(self.dim, self.n, self.enlargement)?)
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    mesh: MeshArgs,
    #[arg(long, value_enum, default_value = "free-with-wired-halo")]
    bc: Bc,
    #[arg(long, value_enum, default_value = "lexicographic")]
    ordering: Ordering,
    /// Build with the staged net construction at this M instead.
    #[arg(long)]
    staged: Option<u32>,
    /// Tree dump output.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Cluster labeling CSV output.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// SVG output.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// x₃ level (lattice units) for d = 3 renders.
    #[arg(long)]
    slab: Option<i64>,
    /// Write the branch from this site (comma-separated coordinates) as a path dump.
    #[arg(long, requires = "branch_out")]
    branch_from: Option<String>,
    #[arg(long)]
    branch_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Config file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "SPANCLUST_WORKERS")]
    workers: Option<usize>,
    /// Also write a CSV summary next to the records.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct TailArgs {
    /// JSONL record files.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Largest M of the grid 1..=M.
    #[arg(long, default_value_t = 8)]
    max_m: u32,
    #[arg(long, default_value_t = MIN_RECORDS)]
    min_records: usize,
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Escape probabilities near branches over a grid of M, with a fitted exponent.
    Hittability {
        #[command(flatten)]
        mesh: MeshArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        m: Vec<u32>,
        #[arg(long, default_value_t = 4)]
        branches: usize,
        #[arg(long, default_value_t = 8)]
        points: usize,
        #[arg(long, default_value_t = 400)]
        trials: u64,
        /// JSONL output of every estimate.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Traversals between x₁ = 0 and x₁ = 2/3 by walks absorbed at the halo.
    Traversal {
        #[command(flatten)]
        mesh: MeshArgs,
        #[arg(long, default_value_t = 1000)]
        walks: u64,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    /// Tree dump input.
    tree: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    slab: Option<i64>,
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn parse_site(s: &str) -> Result<SitePoint> {
    let c: Vec<i64> = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()?;
    Ok(SitePoint::new(&c))
}

fn sample(a: SampleArgs) -> Result<()> {
    let spec = a.mesh.spec()?;
    let rng = RngStream::new(a.mesh.seed, a.mesh.stream);
    let bc: BoundaryCondition = a.bc.into();
    let (ordering, tree) = match a.staged {
        Some(m) => {
            if bc != BoundaryCondition::FreeWithWiredHalo {
                bail!("staged sampling uses the free-with-wired-halo condition");
            }
            let out = staged_sample(&spec, m, &rng)?;
            println!(
                "{}",
                serde_json::json!({"stages": out.stages.len(), "all_i": out.stage1.all_i, "nested": out.nested,
                    "w_counts": out.stages.iter().map(|s| s.w_count).collect::<Vec<_>>()})
            );
            (format!("staged-m{m}"), out.tree)
        }
        None => {
            let ord = match a.ordering {
                Ordering::Lexicographic => SiteOrdering::Lexicographic,
                Ordering::Reverse => SiteOrdering::ReverseLexicographic,
            };
            let dom = SamplingDomain::for_spec(&spec, bc)?;
            (ord.digest(), sample_ust_on(&dom, &ord, &rng)?)
        }
    };
    let (n_delta, labeling) = count_spanning_clusters(&tree, &spec.window(), &spec)?;
    if let Some(p) = &a.tree {
        let header = TreeDumpHeader {
            spec,
            bc,
            ordering,
            seed: a.mesh.seed,
            stream: a.mesh.stream,
            generator: GENERATOR.into(),
        };
        write_tree_dump(create(p)?, &header, &tree)?;
    }
    if let Some(p) = &a.labels {
        labeling.write_csv(create(p)?)?;
    }
    if let Some(p) = &a.svg {
        let proj = a.slab.map(|level| SlabProjection { axis: 2, level });
        render_svg(&tree, &labeling, proj, create(p)?)?;
    }
    if let (Some(z), Some(p)) = (&a.branch_from, &a.branch_out) {
        tree.branch_of(&parse_site(z)?)?.write_to(create(p)?)?;
    }
    println!(
        "{}",
        serde_json::json!({"dim": spec.dim, "n": spec.n, "bc": bc.name(), "n_delta": n_delta,
            "sites": tree.num_sites(), "components": labeling.num_components()})
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = a.samples {
        cfg.samples = s;
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    cfg.validate()?;
    let summary = run_sweep(&cfg)?;
    if a.csv {
        let recs = load_records(&summary.path)?;
        spanclust::harness::record::write_csv(create(&summary.path.with_extension("csv"))?, &recs)?;
    }
    eprintln!(
        "{}: {} written, {} already present, {} failed",
        summary.path.display(),
        summary.written,
        summary.skipped,
        summary.failed
    );
    Ok(summary.failed == 0)
}

fn tail(a: TailArgs) -> Result<()> {
    let mut recs = Vec::new();
    for p in &a.records {
        recs.extend(load_records(p)?);
    }
    let grid: Vec<u32> = (1..=a.max_m).collect();
    let est = estimate_tail_with_min(&recs, &grid, a.min_records)?;
    let bad = coarse_mesh_violations(&recs, &grid);
    if !bad.is_empty() {
        eprintln!("coarse-mesh bound N < 100 M² violated: {bad:?}");
    }
    println!("{}", serde_json::to_string_pretty(&est)?);
    Ok(())
}

fn probe(cmd: ProbeCmd) -> Result<()> {
    match cmd {
        ProbeCmd::Hittability {
            mesh,
            m,
            branches,
            points,
            trials,
            out,
        } => {
            let spec = mesh.spec()?;
            let plan = HittabilityPlan {
                ms: m,
                branches,
                probes_per_branch: points,
                trials,
            };
            let (_, groups) =
                hittability_sweep(&spec, &plan, &RngStream::new(mesh.seed, mesh.stream))?;
            if let Some(p) = out {
                let mut w = create(&p)?;
                for (_, ests) in &groups {
                    write_jsonl(&mut w, ests)?;
                }
                w.flush()?;
            }
            let fit = estimate_xi(&groups)?;
            println!(
                "{}",
                serde_json::json!({"fit": fit, "xi_lower95": fit.xi_lower95()})
            );
        }
        ProbeCmd::Traversal { mesh, walks } => {
            let spec = mesh.spec()?;
            let start = SitePoint::new(&vec![spec.n as i64 / 3; spec.dim]);
            let counts = sample_traversal_counts(
                &spec,
                &start,
                walks,
                &RngStream::new(mesh.seed, mesh.stream),
            )?;
            println!("{}", serde_json::to_string(&traversal_tail(&counts))?);
        }
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let mut ok = true;
    let mut line = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "ok  " } else { "FAIL" });
        ok &= pass;
    };
    for (name, g, expect) in [
        ("K3", SmallGraph::complete(3)?, 3u128),
        ("C4", SmallGraph::cycle(4)?, 4),
        ("path6", SmallGraph::path(6)?, 1),
        ("grid2x3", SmallGraph::grid(2, 3)?, 15),
        ("K6", SmallGraph::complete(6)?, 1296),
    ] {
        let count = matrix_tree_count(&g)?;
        let enumerated = enumerate_spanning_trees(&g)?.len() as u128;
        line(
            name,
            count == expect && enumerated == count,
            format!("det {count}, enumeration {enumerated}"),
        );
    }
    let boxes = [
        ("C4 free", [1i64, 1], BoundaryCondition::Free),
        ("2x3 free", [2, 1], BoundaryCondition::Free),
        ("4x4 wired", [3, 3], BoundaryCondition::WiredAll),
        ("4x3 right-wired", [3, 2], BoundaryCondition::RightWired),
    ];
    for (name, hi, bc) in boxes {
        let dom = SamplingDomain::new(LatticeBox::new(&[0, 0], &hi)?, 1, bc);
        let g = SmallGraph::from_domain(&dom)?;
        let trees = enumerate_spanning_trees(&g)?;
        let count = matrix_tree_count(&g)?;
        let sample = |ord: &SiteOrdering, seed: u64| -> Result<Vec<u64>> {
            let sets = (0..a.samples)
                .map(|i| g.edge_set_of(&sample_ust_on(&dom, ord, &RngStream::new(seed, i))?))
                .collect::<spanclust::Result<Vec<_>>>()?;
            Ok(tree_frequencies(sets, &trees)?)
        };
        let lex = sample(&SiteOrdering::Lexicographic, a.seed)?;
        let r = uniformity_test(&lex)?;
        line(
            name,
            trees.len() as u128 == count && r.p_value > 1e-3,
            format!(
                "{count} trees, chi2 {:.2} on {} dof, p = {:.4}",
                r.statistic, r.dof, r.p_value
            ),
        );
        let rev = sample(&SiteOrdering::ReverseLexicographic, a.seed ^ 0x5eed)?;
        let r2 = two_sample_test(&lex, &rev)?;
        line(
            &format!("{name} ordering"),
            r2.p_value > 1e-3,
            format!("lexicographic vs reverse p = {:.4}", r2.p_value),
        );
    }
    Ok(ok)
}

fn render(a: RenderArgs) -> Result<()> {
    let f = File::open(&a.tree).with_context(|| format!("opening {}", a.tree.display()))?;
    let (header, tree) = read_tree_dump(BufReader::new(f))?;
    let spec = header.spec;
    let (n_delta, labeling) = count_spanning_clusters(&tree, &spec.window(), &spec)?;
    let proj = a.slab.map(|level| SlabProjection { axis: 2, level });
    let s = render_svg(&tree, &labeling, proj, create(&a.out)?)?;
    println!(
        "{}",
        serde_json::json!({"n_delta": n_delta, "base_edges": s.base_edges,
            "highlighted_groups": s.highlighted_groups, "highlighted_edges": s.highlighted_edges})
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Sample(a) => sample(a).map(|_| true),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Tail(a) => tail(a).map(|_| true),
        Cmd::Probe(c) => probe(c).map(|_| true),
        Cmd::Verify(a) => verify(a),
        Cmd::Render(a) => render(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
