use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{error::ErrorKind, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use groupsplat::config::PipelineConfig;
use groupsplat::grouping::{read_manifest, write_manifest, BuildingGroup};
use groupsplat::imaging::RgbImage;
use groupsplat::mask::{load_mask, load_segment_labels, MaskBitmap, SegmentLabelMap};
use groupsplat::meshing::TriangleMesh;
use groupsplat::pipeline::{eval_stage, group_jobs, group_stage, mesh_stage, refine_stage, train_stage};
use groupsplat::scene::{load_scene, write_sparse_model, SceneBundle, ViewRecord};
use groupsplat::synth;
use groupsplat::trainer::{load_images, read_primitives_ply, GroupCheckpoint};
use groupsplat::voting::{read_reliable_ply, write_reliable_ply, RefinedMaskSet};

#[derive(Parser, Debug)]
#[command(name = "groupsplat", version, about = "Building surface reconstruction from posed images and masks")]
struct Cli {
    /// key = value file overriding the defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Groups trained concurrently
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Print the stage result as JSON on stdout
    #[arg(long, global = true)]
    json: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a scene and copy it to <out>/scene, optionally downsampled
    Ingest {
        #[arg(long)]
        scene: PathBuf,
        /// Downsample so the longer image edge is at most this many pixels
        #[arg(long)]
        max_edge: Option<usize>,
    },
    /// Voting filter and segment-union mask refinement
    RefineMasks {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Cluster reliable points into building groups
    Group {
        #[arg(long)]
        scene: PathBuf,
        /// Reliable points PLY (default <out>/reliable.ply)
        #[arg(long)]
        reliable: Option<PathBuf>,
        /// Refined mask directory (default <out>/refined)
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Optimize every group
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// Group manifest (default <out>/groups.json)
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Fuse trained groups into one mesh
    Mesh {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Directory of group_NNN.ply checkpoints (default <out>/train)
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Also write <out>/mesh.obj
        #[arg(long)]
        obj: bool,
        /// Dump TSDF volumes to <out>/volumes
        #[arg(long)]
        dump_volume: bool,
    },
    /// Precision, recall and F1 of a mesh against a reference cloud
    Eval {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        density: Option<f64>,
        /// Voxel-downsample the reference cloud at the sample density first
        #[arg(long)]
        downsample_gt: bool,
    },
    /// Run every stage
    Pipeline {
        #[arg(long)]
        scene: PathBuf,
        /// Reference cloud; evaluation is skipped without it
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        max_edge: Option<usize>,
    },
    /// Write a synthetic scene with reference cloud to <out>
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::TwoBuildings)]
        kind: SynthKind,
        #[arg(long, default_value_t = 20)]
        views: usize,
        #[arg(long, default_value_t = 160)]
        width: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SynthKind {
    TwoBuildings,
    GableHouse,
    Square,
}

enum Failure {
    Usage(String),
    Stage(String),
}

impl From<groupsplat::Error> for Failure {
    fn from(e: groupsplat::Error) -> Self {
        Failure::Stage(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(v) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Outcome<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            let mut c = PipelineConfig::default();
            c.apply_text(&text)
                .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            c
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if cli.workers == 0 {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

fn mkdir(p: &Path) -> Outcome<()> {
    fs::create_dir_all(p).map_err(|e| Failure::Stage(format!("cannot create {}: {e}", p.display())))
}

fn write_json(path: &Path, v: &Value) -> Outcome<()> {
    let text = serde_json::to_string_pretty(v).expect("json values serialize");
    fs::write(path, text).map_err(|e| Failure::Stage(format!("cannot write {}: {e}", path.display())))
}

fn say(cli: &Cli, msg: String) {
    if !cli.json {
        println!("{msg}");
    }
}

struct Inputs {
    scene: SceneBundle,
    masks: Vec<MaskBitmap>,
    segments: Vec<SegmentLabelMap>,
}

fn load_inputs(root: &Path) -> Outcome<Inputs> {
    let scene = load_scene(root)?;
    let mut masks = Vec::with_capacity(scene.views.len());
    let mut segments = Vec::with_capacity(scene.views.len());
    for v in &scene.views {
        masks.push(load_mask(&v.mask_path, v.width(), v.height())?);
        segments.push(load_segment_labels(&v.segment_path, v.width(), v.height())?);
    }
    Ok(Inputs { scene, masks, segments })
}

fn run(cli: &Cli) -> Outcome<Value> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Command::Ingest { scene, max_edge } => ingest(cli, scene, *max_edge).map(|(v, _)| v),
        Command::RefineMasks { scene } => refine(cli, &cfg, scene),
        Command::Group { scene, reliable, masks } => group(cli, &cfg, scene, reliable.as_deref(), masks.as_deref()),
        Command::Train { scene, groups, iters } => train(cli, &cfg, scene, groups.as_deref(), *iters),
        Command::Mesh {
            scene,
            groups,
            checkpoints,
            obj,
            dump_volume,
        } => mesh(cli, &cfg, scene, groups.as_deref(), checkpoints.as_deref(), *obj, *dump_volume).map(|(v, _)| v),
        Command::Eval {
            mesh,
            gt,
            threshold,
            density,
            downsample_gt,
        } => {
            let mut cfg = cfg;
            if let Some(t) = threshold {
                cfg.eval.threshold = *t;
            }
            if let Some(d) = density {
                cfg.eval.density = *d;
            }
            cfg.eval.gt_downsample |= *downsample_gt;
            if !(cfg.eval.threshold > 0.0 && cfg.eval.density > 0.0) {
                return Err(Failure::Usage("--threshold and --density must be positive".into()));
            }
            let m = TriangleMesh::read_ply(mesh)?;
            evaluate(cli, &cfg, &m, gt)
        }
        Command::Pipeline {
            scene,
            gt,
            iters,
            max_edge,
        } => pipeline(cli, &cfg, scene, gt.as_deref(), *iters, *max_edge),
        Command::Synth { kind, views, width } => {
            if *views == 0 || *width < 16 {
                return Err(Failure::Usage("--views must be positive and --width at least 16".into()));
            }
            let s = match kind {
                SynthKind::TwoBuildings => synth::two_buildings(*views, *width, *width * 3 / 4),
                SynthKind::GableHouse => synth::gable_house(*views, *width, *width * 3 / 4),
                SynthKind::Square => synth::textured_square(*views, *width),
            };
            s.write(&cli.out)?;
            say(cli, format!("wrote {} views and {} points to {}", s.scene.views.len(), s.scene.points.len(), cli.out.display()));
            Ok(json!({
                "stage": "synth",
                "views": s.scene.views.len(),
                "points": s.scene.points.len(),
                "gt_points": s.gt_points.len(),
                "scene": cli.out,
                "gt": cli.out.join("gt.ply"),
            }))
        }
    }
}

fn ingest(cli: &Cli, root: &Path, max_edge: Option<usize>) -> Outcome<(Value, PathBuf)> {
    if max_edge == Some(0) {
        return Err(Failure::Usage("--max-edge must be positive".into()));
    }
    let inp = load_inputs(root)?;
    let images = load_images(&inp.scene)?;
    let dst = cli.out.join("scene");
    for d in ["images", "masks", "segments"] {
        mkdir(&dst.join(d))?;
    }
    let mut views = Vec::with_capacity(inp.scene.views.len());
    let mut scale_used = 1.0;
    for (i, v) in inp.scene.views.iter().enumerate() {
        let (img, s) = match max_edge {
            Some(m) => images[i].downsample_to_max_edge(m),
            None => (images[i].clone(), 1.0),
        };
        scale_used = s;
        let mut k = if s < 1.0 { v.intrinsics.scaled(s) } else { v.intrinsics };
        k.width = img.width;
        k.height = img.height;
        let nv = ViewRecord::new(v.view_id, v.name.clone(), v.rotation, v.center, k);
        img.save_png(&dst.join(&nv.image_path))?;
        inp.masks[i]
            .resized(img.width, img.height)
            .save_png(&dst.join(&nv.mask_path))?;
        inp.segments[i]
            .resized(img.width, img.height)
            .save_png(&dst.join(&nv.segment_path))?;
        views.push(nv);
    }
    let out_scene = SceneBundle {
        views,
        points: inp.scene.points.clone(),
    };
    write_sparse_model(&out_scene, &dst.join("sparse"))?;
    say(
        cli,
        format!("ingested {} views, {} points into {}", out_scene.views.len(), out_scene.points.len(), dst.display()),
    );
    Ok((
        json!({
            "stage": "ingest",
            "views": out_scene.views.len(),
            "points": out_scene.points.len(),
            "scale": scale_used,
            "scene": dst,
        }),
        dst,
    ))
}

fn refine(cli: &Cli, cfg: &PipelineConfig, root: &Path) -> Outcome<Value> {
    let inp = load_inputs(root)?;
    let (reliable, refined) = refine_stage(&inp.scene, &inp.masks, &inp.segments, cfg);
    mkdir(&cli.out)?;
    refined.save(&inp.scene, &cli.out.join("refined"))?;
    write_reliable_ply(&inp.scene, &reliable, &cli.out.join("reliable.ply"))?;
    let pixels: usize = refined.rbm.iter().map(|m| m.count()).sum();
    say(cli, format!("{} of {} points reliable", reliable.len(), inp.scene.points.len()));
    Ok(json!({
        "stage": "refine-masks",
        "points": inp.scene.points.len(),
        "reliable": reliable.len(),
        "refined_pixels": pixels,
        "band_pixels": refined.mb.iter().map(|m| m.count()).sum::<usize>(),
    }))
}

fn group(cli: &Cli, cfg: &PipelineConfig, root: &Path, reliable: Option<&Path>, masks: Option<&Path>) -> Outcome<Value> {
    let scene = load_scene(root)?;
    let reliable = read_reliable_ply(&reliable.map_or_else(|| cli.out.join("reliable.ply"), Path::to_path_buf))?;
    let refined = RefinedMaskSet::load(&scene, &masks.map_or_else(|| cli.out.join("refined"), Path::to_path_buf))?;
    let groups = group_stage(&scene, &reliable, &refined, cfg)?;
    mkdir(&cli.out)?;
    write_manifest(&groups, &cli.out.join("groups.json"))?;
    say(cli, format!("{} groups", groups.len()));
    Ok(group_summary(&groups))
}

fn group_summary(groups: &[BuildingGroup]) -> Value {
    json!({
        "stage": "group",
        "groups": groups.iter().map(|g| json!({
            "group_id": g.group_id,
            "points": g.point_ids.len(),
            "views": g.view_ids.len(),
            "aabb": g.aabb,
            "warnings": g.warnings,
        })).collect::<Vec<_>>(),
    })
}

fn train(cli: &Cli, cfg: &PipelineConfig, root: &Path, groups: Option<&Path>, iters: Option<usize>) -> Outcome<Value> {
    let mut cfg = cfg.clone();
    if let Some(n) = iters {
        if n == 0 {
            return Err(Failure::Usage("--iters must be positive".into()));
        }
        cfg.train.iterations = n;
    }
    let inp = load_inputs(root)?;
    let groups = read_manifest(&groups.map_or_else(|| cli.out.join("groups.json"), Path::to_path_buf))?;
    let images = load_images(&inp.scene)?;
    let jobs = group_jobs(&groups, &inp.scene, &images, &inp.segments, &cfg);
    let dir = cli.out.join("train");
    let (_, report) = train_stage(&jobs, &inp.scene, &cfg, cli.workers, Some(&dir))?;
    let v = serde_json::to_value(&report).expect("report serializes");
    write_json(&dir.join("run_report.json"), &v)?;
    say(cli, format!("trained {} groups, {} failed", report.groups.len(), report.failed()));
    if report.failed() == report.groups.len() && !report.groups.is_empty() {
        return Err(Failure::Stage("every group failed to train".into()));
    }
    Ok(json!({ "stage": "train", "report": v }))
}

#[allow(clippy::too_many_arguments)]
fn mesh(
    cli: &Cli,
    cfg: &PipelineConfig,
    root: &Path,
    groups: Option<&Path>,
    checkpoints: Option<&Path>,
    obj: bool,
    dump_volume: bool,
) -> Outcome<(Value, TriangleMesh)> {
    let inp = load_inputs(root)?;
    let groups = read_manifest(&groups.map_or_else(|| cli.out.join("groups.json"), Path::to_path_buf))?;
    let ck_dir = checkpoints.map_or_else(|| cli.out.join("train"), Path::to_path_buf);
    let cks: Vec<Option<GroupCheckpoint>> = groups
        .iter()
        .map(|g| {
            let p = ck_dir.join(format!("group_{:03}.ply", g.group_id));
            match read_primitives_ply(&p) {
                Ok(primitives) => Some(GroupCheckpoint {
                    group_id: g.group_id,
                    aabb: g.aabb,
                    primitives,
                    iteration: 0,
                    log: Vec::new(),
                    loss_log: None,
                }),
                Err(e) => {
                    log::warn!("skipping group {}: {e}", g.group_id);
                    None
                }
            }
        })
        .collect();
    // Only masks and poses are needed here; images are not read.
    let blank: Vec<RgbImage> = inp.scene.views.iter().map(|v| RgbImage::new(v.width(), v.height())).collect();
    let jobs = group_jobs(&groups, &inp.scene, &blank, &inp.segments, cfg);
    let dump = dump_volume.then(|| cli.out.join("volumes"));
    let (m, report) = mesh_stage(&jobs, &cks, cfg, dump.as_deref())?;
    mkdir(&cli.out)?;
    let path = cli.out.join("mesh.ply");
    m.write_ply(&path)?;
    if obj {
        m.write_obj(&cli.out.join("mesh.obj"))?;
    }
    let v = serde_json::to_value(&report).expect("report serializes");
    write_json(&cli.out.join("mesh_report.json"), &v)?;
    say(cli, format!("mesh with {} vertices, {} triangles at {}", m.vertices.len(), m.triangles.len(), path.display()));
    Ok((json!({ "stage": "mesh", "mesh": path, "report": v }), m))
}

fn evaluate(cli: &Cli, cfg: &PipelineConfig, m: &TriangleMesh, gt: &Path) -> Outcome<Value> {
    let gt = synth::read_point_cloud(gt)?;
    let r = eval_stage(m, &gt, cfg, cfg.train.seed)?;
    say(
        cli,
        format!("precision {:.4}  recall {:.4}  F1 {:.4}  ({} samples, {} reference points)", r.precision, r.recall, r.f1, r.sample_count, r.gt_count),
    );
    Ok(serde_json::to_value(r).expect("report serializes"))
}

fn pipeline(
    cli: &Cli,
    cfg: &PipelineConfig,
    root: &Path,
    gt: Option<&Path>,
    iters: Option<usize>,
    max_edge: Option<usize>,
) -> Outcome<Value> {
    let t0 = Instant::now();
    let mut stages = serde_json::Map::new();
    let (v, scene) = ingest(cli, root, max_edge)?;
    stages.insert("ingest".into(), v);
    stages.insert("refine-masks".into(), refine(cli, cfg, &scene)?);
    stages.insert("group".into(), group(cli, cfg, &scene, None, None)?);
    stages.insert("train".into(), train(cli, cfg, &scene, None, iters)?);
    let (v, m) = mesh(cli, cfg, &scene, None, None, false, false)?;
    stages.insert("mesh".into(), v);
    if let Some(gt) = gt {
        stages.insert("eval".into(), evaluate(cli, cfg, &m, gt)?);
    }
    let report = json!({
        "stage": "pipeline",
        "wall_time_s": t0.elapsed().as_secs_f64(),
        "stages": stages,
    });
    write_json(&cli.out.join("pipeline_report.json"), &report)?;
    Ok(report)
}
