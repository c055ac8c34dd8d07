//! `vvn`: synthetic data, network building, alignment, reconstruction and
//! evaluation from the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vvn::dataset::{normalize_collection, read_json, write_json};
use vvn::geometry::{is_mirrored_id, with_mirrored_instances};
use vvn::harness::{
    align_euclid, alignment_report, pair_errors, pose_topk_oracle, predict_pose_retrieval, recon_error,
    write_curves_csv, write_matches_csv, write_pairs_csv, write_recon_csv, ReconErrorReport, DEFAULT_BIN_WIDTH,
};
use vvn::network::{
    align_fast, build_artifacts, dock, load_network, random_docking, random_network, save_network, CompressedNetwork,
    NetworkArtifacts, RandomNetworkSpec, VVNetwork, DEFAULT_K, DEFAULT_N_DOCK,
};
use vvn::recon::{reconstruct, ReconConfig};
use vvn::synth::{builtin_model, generate, GroundTruth, SynthConfig};
use vvn::{load_collection, save_collection, Camera, Collection, Error, ObjectInstance, Real, Result};

#[derive(Parser, Debug)]
#[command(name = "vvn", version, about = "Object reconstruction from few views on a network of instances")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Normalized object height in pixels.
    #[arg(long, global = true)]
    height: Option<Real>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic collection and its ground truth.
    Synth(SynthArgs),
    /// Build and compress the network of a collection.
    BuildNetwork(BuildArgs),
    /// Align one target with every network instance.
    Align(AlignArgs),
    /// Reconstruct one or more views of a target.
    Reconstruct(ReconArgs),
    /// Alignment error against viewpoint difference.
    EvalAlign(EvalAlignArgs),
    /// Reconstruction error of held-out targets.
    EvalRecon(EvalReconArgs),
    /// Time fast alignment against shortest paths on a random network.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "car")]
    model: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Trailing instances written to a separate test collection.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value_t = 400)]
    grid_points: usize,
    #[arg(long, default_value_t = 0.1)]
    descriptor_noise: Real,
    #[arg(long, default_value_t = 1.0)]
    keypoint_noise: Real,
    #[arg(long, default_value_t = 0.1)]
    deformation: Real,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar (default: `<out>.truth.json`).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Held-out collection (default: `<out>.test.vvn`).
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Spatial weight, or `auto` to calibrate it.
    #[arg(long, default_value = "auto")]
    alpha: String,
    /// Leave out the mirrored instances.
    #[arg(long)]
    no_mirror: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PoseSource {
    Oracle,
    Retrieval,
}

#[derive(Args, Debug)]
struct NetworkInput {
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    network: PathBuf,
}

#[derive(Args, Debug)]
struct PoseArgs {
    #[arg(long, value_enum, default_value_t = PoseSource::Oracle)]
    pose: PoseSource,
    /// Pick the best of the top `k` retrieved poses using the true pose.
    #[arg(long, value_name = "K")]
    pose_topk_oracle: Option<usize>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[command(flatten)]
    input: NetworkInput,
    /// Collection holding the target (default: the network collection).
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    target_id: String,
    #[command(flatten)]
    pose: PoseArgs,
    #[arg(long, default_value_t = DEFAULT_N_DOCK)]
    n_dock: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReconArgs {
    #[command(flatten)]
    input: NetworkInput,
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Repeat for several views of the same object.
    #[arg(long, required = true)]
    target_id: Vec<String>,
    #[command(flatten)]
    pose: PoseArgs,
    /// Reconstruction settings as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_mirror: bool,
    #[arg(long)]
    no_snap: bool,
    #[arg(long)]
    include_auxiliary: bool,
    #[arg(long)]
    out: PathBuf,
    /// Run report (default: `<out>.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Vvn,
    Euclid,
}

#[derive(Args, Debug)]
struct EvalAlignArgs {
    #[command(flatten)]
    input: NetworkInput,
    #[arg(long)]
    tests: PathBuf,
    #[arg(long = "method", value_enum, required = true)]
    methods: Vec<Method>,
    #[command(flatten)]
    pose: PoseArgs,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: Real,
    #[arg(long, default_value_t = DEFAULT_N_DOCK)]
    n_dock: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-pair errors.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalReconArgs {
    #[command(flatten)]
    input: NetworkInput,
    #[arg(long)]
    tests: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Evaluate only the first `n` test instances.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    pose: PoseArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 300)]
    instances: usize,
    #[arg(long, default_value_t = 300)]
    min_points: usize,
    #[arg(long, default_value_t = 400)]
    max_points: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    test_points: usize,
    #[arg(long, default_value_t = DEFAULT_N_DOCK)]
    n_dock: usize,
    /// Report path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Context {
    seed: u64,
    height: Option<Real>,
}

impl Context {
    fn collection(&self, path: &Path) -> Result<Collection> {
        let c = load_collection(path)?;
        match self.height {
            Some(h) => normalize_collection(&c, h),
            None => Ok(c),
        }
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", path.display())))
}

fn synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    if a.holdout >= a.n {
        return Err(Error::InvalidInput("holdout must leave at least one training instance".into()));
    }
    let model = builtin_model(&a.model)?;
    let mut cfg = SynthConfig {
        n_instances: a.n,
        n_grid_points: a.grid_points,
        descriptor_noise_sigma: a.descriptor_noise,
        keypoint_noise_sigma_px: a.keypoint_noise,
        deformation_scale: a.deformation,
        seed: ctx.seed,
        ..SynthConfig::default()
    };
    if let Some(h) = ctx.height {
        cfg.target_height = h;
    }
    let (all, truth) = generate(&model, &cfg)?;
    let split = a.n - a.holdout;
    let train = Collection { instances: all.instances[..split].to_vec(), ..all.clone() };
    save_collection(&train, &a.out)?;
    if a.holdout > 0 {
        let test = Collection { instances: all.instances[split..].to_vec(), ..all.clone() };
        save_collection(&test, a.test_out.clone().unwrap_or_else(|| sidecar(&a.out, ".test.vvn")))?;
    }
    write_json(&truth, a.truth.clone().unwrap_or_else(|| sidecar(&a.out, ".truth.json")))
}

fn build(ctx: &Context, a: &BuildArgs) -> Result<()> {
    let c = ctx.collection(&a.input)?;
    let c = if a.no_mirror { c } else { with_mirrored_instances(&c)? };
    let alpha = match a.alpha.as_str() {
        "auto" => None,
        s => Some(s.parse::<Real>().map_err(|_| Error::InvalidInput(format!("alpha `{s}` is neither `auto` nor a number")))?),
    };
    let cache = std::env::var_os("VVN_CACHE_DIR").map(PathBuf::from);
    let (artifacts, hit) = build_artifacts(&c, a.k, alpha, ctx.seed, cache.as_deref())?;
    log::info!(
        "network: {} instances, {} nodes, alpha {}{}",
        artifacts.network.instance_count(),
        artifacts.network.node_count(),
        artifacts.network.alpha(),
        if hit { " (cached)" } else { "" }
    );
    save_network(&a.out, &artifacts)
}

/// The network, its compressed form and the collection it was built on
/// (mirrored instances added when the network has them).
fn load_inputs(ctx: &Context, input: &NetworkInput) -> Result<(VVNetwork, CompressedNetwork, Collection)> {
    let base = ctx.collection(&input.collection)?;
    let NetworkArtifacts { network, compressed, .. } = load_network(&input.network)?;
    let compressed = compressed.ok_or_else(|| Error::InvalidInput("network file has no compressed form".into()))?;
    let c = if network.instance_count() == 2 * base.len() { with_mirrored_instances(&base)? } else { base };
    let ids: Vec<&str> = c.instances.iter().map(|i| i.id.as_str()).collect();
    if ids.len() != network.instance_count() || ids.iter().zip(network.instance_ids()).any(|(a, b)| *a != b) {
        return Err(Error::InvalidInput("network was not built from this collection".into()));
    }
    Ok((network, compressed, c))
}

fn find_target(ctx: &Context, targets: Option<&Path>, fallback: &Collection, id: &str) -> Result<ObjectInstance> {
    let owned;
    let c = match targets {
        Some(p) => {
            owned = ctx.collection(p)?;
            &owned
        }
        None => fallback,
    };
    c.find(id).map(|(_, i)| i.clone()).ok_or_else(|| Error::InvalidInput(format!("no instance `{id}`")))
}

fn resolve_pose(target: &ObjectInstance, c: &Collection, p: &PoseArgs) -> Result<Camera<Real>> {
    if let Some(k) = p.pose_topk_oracle {
        return pose_topk_oracle(target, c, k);
    }
    match p.pose {
        PoseSource::Oracle => target.camera.ok_or_else(|| Error::InvalidInput(format!("`{}` has no camera", target.id))),
        PoseSource::Retrieval => {
            let originals = Collection {
                instances: c.instances.iter().filter(|i| !is_mirrored_id(&i.id)).cloned().collect(),
                ..c.clone()
            };
            predict_pose_retrieval(target, &originals)
        }
    }
}

fn align(ctx: &Context, a: &AlignArgs) -> Result<()> {
    let (net, comp, c) = load_inputs(ctx, &a.input)?;
    let target = find_target(ctx, a.targets.as_deref(), &c, &a.target_id)?;
    let pose = resolve_pose(&target, &c, &a.pose)?;
    let d = dock(&target, &c, &net, &pose, a.n_dock, net.alpha())?;
    let al = align_fast(&comp, &d)?;
    write_matches_csv(create(&a.out)?, &al, &c)
}

fn recon(ctx: &Context, a: &ReconArgs) -> Result<()> {
    let (net, comp, c) = load_inputs(ctx, &a.input)?;
    let mut cfg: ReconConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ReconConfig::default(),
    };
    cfg.mirror &= !a.no_mirror;
    cfg.xy_snap &= !a.no_snap;
    cfg.include_auxiliary |= a.include_auxiliary;
    cfg.factorize.seed = ctx.seed;
    let mut targets = Vec::new();
    for id in &a.target_id {
        let mut t = find_target(ctx, a.targets.as_deref(), &c, id)?;
        t.camera = Some(resolve_pose(&t, &c, &a.pose)?);
        targets.push(t);
    }
    let r = reconstruct(&targets, &net, &comp, &c, &cfg)?;
    r.cloud.save_ply(&a.out)?;
    r.report.save(a.report.clone().unwrap_or_else(|| sidecar(&a.out, ".json")))
}

fn eval_align(ctx: &Context, a: &EvalAlignArgs) -> Result<()> {
    let (net, comp, c) = load_inputs(ctx, &a.input)?;
    let tests = ctx.collection(&a.tests)?;
    let originals = Collection { instances: c.instances.iter().filter(|i| !is_mirrored_id(&i.id)).cloned().collect(), ..c.clone() };
    let mut curves = Vec::new();
    let mut all_pairs = Vec::new();
    for &m in &a.methods {
        let mut pairs = Vec::new();
        for t in &tests.instances {
            match m {
                Method::Vvn => {
                    let pose = resolve_pose(t, &c, &a.pose)?;
                    let al = align_fast(&comp, &dock(t, &c, &net, &pose, a.n_dock, net.alpha())?)?;
                    pairs.extend(pair_errors("vvn", t, &al, &c)?.into_iter().filter(|p| !is_mirrored_id(&p.train_id)));
                }
                Method::Euclid => pairs.extend(pair_errors("euclid", t, &align_euclid(t, &originals)?, &originals)?),
            }
        }
        let report = alignment_report(pairs, a.bin_width)?;
        let name = match m {
            Method::Vvn => "vvn",
            Method::Euclid => "euclid",
        };
        curves.push((name.to_string(), report.bins));
        all_pairs.extend(report.pairs);
    }
    write_curves_csv(create(&a.out)?, &curves)?;
    if let Some(p) = &a.pairs {
        write_pairs_csv(create(p)?, &all_pairs)?;
    }
    Ok(())
}

fn eval_recon(ctx: &Context, a: &EvalReconArgs) -> Result<()> {
    let (net, comp, c) = load_inputs(ctx, &a.input)?;
    let tests = ctx.collection(&a.tests)?;
    let truth: GroundTruth = read_json(&a.truth)?;
    let cfg = ReconConfig::default();
    let mut report = ReconErrorReport::default();
    for t in tests.instances.iter().take(a.limit.unwrap_or(usize::MAX)) {
        let gt = truth.find(&t.id).ok_or_else(|| Error::InvalidInput(format!("no ground truth for `{}`", t.id)))?;
        let mut target = t.clone();
        target.camera = Some(resolve_pose(t, &c, &a.pose)?);
        let r = reconstruct(std::slice::from_ref(&target), &net, &comp, &c, &cfg)?;
        report.targets.push(recon_error(&t.id, &r, &gt.grid_points_3d())?);
    }
    write_recon_csv(create(&a.out)?, &report)
}

fn bench(ctx: &Context, a: &BenchArgs) -> Result<()> {
    let spec = RandomNetworkSpec {
        instances: a.instances,
        min_points: a.min_points,
        max_points: a.max_points,
        k: a.k,
        components: 1,
        integer_weights: false,
    };
    if a.instances <= a.k || a.min_points == 0 || a.min_points > a.max_points || a.queries == 0 {
        return Err(Error::InvalidInput("benchmark sizes are inconsistent".into()));
    }
    let net = random_network(&spec, ctx.seed);
    let comp = vvn::network::compress(&net);
    let sets: Vec<_> = (0..a.queries as u64).map(|q| random_docking(&net, a.test_points, a.n_dock, false, ctx.seed + q)).collect();
    let report = vvn::harness::benchmark_alignment(&net, &comp, &sets)?;
    match &a.out {
        Some(p) => write_json(&report, p),
        None => {
            let mut out = std::io::stdout().lock();
            vvn::dataset::to_json_writer(&mut out, &report)?;
            writeln!(out).map_err(|e| Error::InvalidInput(e.to_string()))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    let ctx = Context { seed: cli.seed, height: cli.height };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::BuildNetwork(a) => build(&ctx, a),
        Command::Align(a) => align(&ctx, a),
        Command::Reconstruct(a) => recon(&ctx, a),
        Command::EvalAlign(a) => eval_align(&ctx, a),
        Command::EvalRecon(a) => eval_recon(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
