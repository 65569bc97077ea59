//! `swct`: command-line front end for the swallowing CT toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 algorithm error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use swct_core::evalkit::{
    baseline_predict, boxplot_export, dice_report, load_case_list, loocv_plan, run_loocv, DiceReport, LoocvOptions,
    PredictorSpec,
};
use swct_core::meshviz::{centroid_trajectory, export_mesh_sequence, horn_asymmetry, MeshFormat, MeshSequence};
use swct_core::phantom::{generate, write_phantom, PhantomConfig};
use swct_core::segkit::{
    cage_bind, cage_deform, region_grow, track_rigid, voxelize, Cage, CageMoves, Connectivity, GrowParams, RigidPose,
    TrackParams, TriMesh, DEFAULT_MAX_VOXELS,
};
use swct_core::volcore::{
    load_case, load_mask, load_volume, save_case, save_mask, Encoding, Frame, LabelMap, RegionCode, Sequence4D,
};

#[derive(Parser)]
#[command(name = "swct", version, about = "Segmentation, evaluation and motion display for 4D swallowing CT")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only report errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom with ground truth.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Ground-truth segmentation procedures.
    #[command(subcommand)]
    Seg(SegCmd),
    /// Dice evaluation and cross-validation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Surface extraction.
    #[command(subcommand)]
    Mesh(MeshCmd),
    /// Motion metrics.
    #[command(subcommand)]
    Motion(MotionCmd),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Write a phantom case directory plus truth.json.
    Gen(PhantomGenArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Phantom configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Gzip-encode the NRRD payloads.
    #[arg(long)]
    gzip: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SegCmd {
    /// Seeded region growing over an HU range.
    Grow(GrowArgs),
    /// Rigid tracking of a frame-0 template through a case.
    Track(TrackArgs),
    /// Cage deformation of a mesh, voxelized onto a grid.
    Ffd(FfdArgs),
    /// Builtin reference segmentation of a case (needs frame-0 labels).
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct GrowArgs {
    #[arg(long)]
    vol: PathBuf,
    /// Seed voxel `X,Y,Z` (repeatable).
    #[arg(long = "seed", required = true, value_parser = parse_seed)]
    seeds: Vec<[usize; 3]>,
    /// Inclusive HU range `LO:HI`.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    range: (i32, i32),
    /// Mask restricting growth.
    #[arg(long)]
    restrict: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_VOXELS)]
    max_voxels: usize,
    /// 6 or 26.
    #[arg(long, default_value_t = 6)]
    connectivity: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    case: PathBuf,
    /// Frame-0 mask of the structure.
    #[arg(long)]
    template: PathBuf,
    /// Region code or name recorded with the poses.
    #[arg(long)]
    region: RegionCode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FfdArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    cage: PathBuf,
    /// Node moves `{"moves": [{"node": i, "delta_mm": [x, y, z]}]}`.
    #[arg(long)]
    deform: PathBuf,
    /// Volume whose grid receives the mask.
    #[arg(long)]
    geom: PathBuf,
    /// Also write the deformed mesh.
    #[arg(long)]
    mesh_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    gzip: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Per-frame, per-region Dice of a prediction against ground truth.
    Dice(DiceArgs),
    /// Leave-one-out cross-validation over a case list.
    Loocv(LoocvArgs),
    /// Box-plot summary CSV from a report.
    Boxplot(BoxplotArgs),
}

#[derive(Args)]
struct DiceArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Comma-separated region codes or names (default: all anatomical).
    #[arg(long, value_delimiter = ',')]
    regions: Vec<RegionCode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LoocvArgs {
    /// JSON array of case directories.
    #[arg(long)]
    cases: PathBuf,
    /// `baseline`, or a command template with {train}, {test} and {out}.
    #[arg(long)]
    predictor: String,
    /// Per-fold predictor timeout in seconds.
    #[arg(long, default_value_t = 3600.0)]
    timeout: f64,
    /// Predictor working directory.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Scratch directory for fold inputs and outputs (default: next to --out).
    #[arg(long)]
    scratch: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    regions: Vec<RegionCode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoxplotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MeshCmd {
    /// Per-frame OBJ surfaces plus sequence.json.
    Extract(MeshExtractArgs),
}

#[derive(Args)]
struct MeshExtractArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    regions: Vec<RegionCode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MotionCmd {
    /// Centroid trajectory (plus horn asymmetry for the hyoid).
    Trace(TraceArgs),
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    region: RegionCode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Root directory holding case directories.
    #[arg(long)]
    data: PathBuf,
}

fn parse_seed(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|t| t.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected X,Y,Z, got '{s}'"))
}

fn parse_range(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got '{s}'"))?;
    let lo = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi = b.trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn encoding(gzip: bool) -> Encoding {
    if gzip {
        Encoding::Gzip
    } else {
        Encoding::Raw
    }
}

fn all_regions(r: Vec<RegionCode>) -> Vec<RegionCode> {
    if r.is_empty() {
        RegionCode::anatomical().collect()
    } else {
        r
    }
}

#[derive(Serialize)]
struct TrackedPose {
    pose: RigidPose,
    objective_trace: Vec<f64>,
}

#[derive(Serialize)]
struct PosesFile {
    region: RegionCode,
    frames: Vec<TrackedPose>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom(PhantomCmd::Gen(a)) => {
            let mut cfg = match &a.config {
                Some(p) => PhantomConfig::read(p)?,
                None => PhantomConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.rng_seed = s;
            }
            cfg.validate()?;
            let (seq, truth) = generate(&cfg)?;
            write_phantom(&a.out, &seq, &truth, encoding(a.gzip))?;
            log::info!("wrote {} frames of {:?} to {}", seq.len(), cfg.dims, a.out.display());
        }
        Command::Seg(SegCmd::Grow(a)) => {
            let v = load_volume(&a.vol)?;
            let mut p = GrowParams::new(a.seeds, a.range.0, a.range.1);
            p.max_voxels = a.max_voxels;
            p.connectivity = Connectivity::from_count(a.connectivity)?;
            p.restriction = a.restrict.as_ref().map(load_mask).transpose()?;
            let m = region_grow(&v, &p)?;
            save_mask(&a.out, &m, Encoding::Raw)?;
            log::info!("grew {} voxels", m.count());
        }
        Command::Seg(SegCmd::Track(a)) => {
            let seq = load_case(&a.case)?;
            let tmpl = load_mask(&a.template)?;
            let tracked = track_rigid(&seq, &tmpl, &TrackParams::default())?;
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            for (f, t) in tracked.iter().enumerate() {
                save_mask(a.out.join(format!("mask_{f:03}.nrrd")), &t.mask, Encoding::Raw)?;
            }
            let poses = PosesFile {
                region: a.region,
                frames: tracked.into_iter().map(|t| TrackedPose { pose: t.pose, objective_trace: t.objective_trace }).collect(),
            };
            write_json(&a.out.join("poses.json"), &poses)?;
            log::info!("tracked {} frames", poses.frames.len());
        }
        Command::Seg(SegCmd::Ffd(a)) => {
            let g = *load_volume(&a.geom)?.geometry();
            let mesh = TriMesh::read_obj(&a.mesh, RegionCode::Tongue)?;
            let mut cage = Cage::read(&a.cage)?;
            cage.apply_moves(&CageMoves::read(&a.deform)?.moves)?;
            let binding = cage_bind(&mesh, &Cage { displaced: cage.rest.clone(), ..cage.clone() })?;
            let deformed = cage_deform(&binding, &cage)?;
            if let Some(p) = &a.mesh_out {
                deformed.write_obj(p)?;
            }
            let m = voxelize(&deformed, &g)?;
            save_mask(&a.out, &m, Encoding::Raw)?;
            log::info!("voxelized {} voxels", m.count());
        }
        Command::Seg(SegCmd::Baseline(a)) => {
            let seq = load_case(&a.case)?;
            let labels = baseline_predict(&seq)?;
            let frames = seq
                .frames
                .into_iter()
                .zip(labels)
                .map(|(f, l)| Frame { volume: f.volume, labels: Some(l) })
                .collect();
            let out = Sequence4D::new(seq.case_id, seq.frame_interval_s, frames)?;
            save_case(&a.out, &out, encoding(a.gzip))?;
            log::info!("wrote baseline labels to {}", a.out.display());
        }
        Command::Eval(EvalCmd::Dice(a)) => {
            let gt = load_case(&a.gt)?;
            let pred = load_case(&a.pred)?;
            let r = dice_report(&gt, &pred, &all_regions(a.regions))?;
            r.write(&a.out)?;
            log::info!("dice summary\n{}", r.format_table());
        }
        Command::Eval(EvalCmd::Loocv(a)) => {
            let cases = load_case_list(&a.cases)?;
            let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
            let plan = loocv_plan(&ids)?;
            let mut spec = if a.predictor.trim() == "baseline" {
                PredictorSpec::baseline()
            } else {
                PredictorSpec::external(a.predictor.clone())?
            };
            spec.timeout_s = a.timeout;
            spec.working_dir = a.workdir;
            let scratch = a.scratch.unwrap_or_else(|| {
                let mut s = a.out.clone().into_os_string();
                s.push(".work");
                PathBuf::from(s)
            });
            let opts = LoocvOptions {
                jobs: cli.jobs.unwrap_or_else(rayon::current_num_threads),
                work_dir: scratch,
                regions: all_regions(a.regions),
            };
            let r = run_loocv(&plan, &spec, &cases, &opts)?;
            r.write(&a.out)?;
            let failed = r.folds.iter().filter(|f| f.error.is_some()).count();
            log::info!("pooled dice summary\n{}{} of {} folds failed", r.format_table(), failed, r.folds.len());
        }
        Command::Eval(EvalCmd::Boxplot(a)) => {
            let r = DiceReport::read(&a.report)?;
            boxplot_export(&r, &a.out)?;
        }
        Command::Mesh(MeshCmd::Extract(a)) => {
            let seq = load_case(&a.case)?;
            let labels = seq.label_maps()?;
            let ms = MeshSequence::extract(&labels, &a.regions, seq.frame_interval_s);
            let idx = export_mesh_sequence(&ms, &a.out, MeshFormat::Obj)?;
            let open: usize = idx.frames.iter().map(|f| f.open_meshes.len()).sum();
            if open > 0 {
                log::warn!("{open} meshes are not watertight");
            }
        }
        Command::Motion(MotionCmd::Trace(a)) => {
            let seq = load_case(&a.case)?;
            let labels: Vec<&LabelMap> = seq.label_maps()?;
            let trace = if a.region == RegionCode::Hyoid {
                horn_asymmetry(&labels, a.region, seq.frame_interval_s)?
            } else {
                centroid_trajectory(&labels, a.region, seq.frame_interval_s)
            };
            write_json(&a.out, &trace)?;
            if let Some(p) = trace.peak_asymmetry() {
                log::info!("peak horn asymmetry {p:.3} mm");
            }
        }
        Command::Serve(a) => {
            if !a.data.is_dir() {
                bail!(swct_core::Error::Invalid(format!("data directory {} does not exist", a.data.display())));
            }
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(cli.jobs.unwrap_or_else(rayon::current_num_threads).max(1))
                .enable_all()
                .build()?;
            rt.block_on(swct_annotd::serve(std::net::SocketAddr::new(a.host, a.port), &a.data))
                .map_err(|e| anyhow!("server: {e}"))?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<swct_core::Error>() {
        Some(c) if c.is_algorithmic() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let default_level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SWCT_LOG", default_level))
        .format(|buf, rec| writeln!(buf, "{}: {}", rec.level().as_str().to_lowercase(), rec.args()))
        .init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            if log::max_level() < log::LevelFilter::Error {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
