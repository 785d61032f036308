//! Command-line orchestration: dataset synthesis, training, evaluation,
//! gradient checking, and plot/CSV emission.
//!
//! Exit codes: 0 success, 1 user error (flags/config), 2 data error,
//! 3 verification failure.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Config, Mode};
use crate::decoder::semantic_from_instances;
use crate::evalmetrics::{
    evaluate_instances_dataset, evaluate_semantic, labels_to_mesh, predictions_from_logits,
    EvalReport, GtInstance, SceneEval, MESH_LABEL_TOLERANCE,
};
use crate::geometry::Vec3;
use crate::graph::NodeId;
use crate::learn::{gradient_check, prepare_example, train_loop, Example, LossWeights};
use crate::model::Model;
use crate::nn::{Ctx, Initializer, ParamStore};
use crate::scenedata::{
    generate_scene, load_scene, save_scene, simulate_depth_holes, Scene, SceneGenConfig,
    BACKGROUND_CLASS,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    User(String),
    /// Unreadable, malformed, or inconsistent data (exit 2).
    Data(String),
    /// A verification command found errors above tolerance (exit 3).
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Data(m) | CliError::Verification(m) => m,
        }
    }
}

fn user<E: std::fmt::Display>(e: E) -> CliError {
    CliError::User(e.to_string())
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// Worker cap: `OMNISEG_THREADS` when set, else the machine's parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("OMNISEG_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Exclusive ownership of an output directory via a `run.lock` file holding
/// the owner's PID; locks from exited processes are treated as stale.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        let path = dir.join("run.lock");
        if path.exists() {
            let pid: Option<u32> =
                std::fs::read_to_string(&path).ok().and_then(|s| s.trim().parse().ok());
            if let Some(pid) = pid {
                if Path::new(&format!("/proc/{}", pid)).exists() && pid != std::process::id() {
                    return Err(CliError::User(format!(
                        "output directory {} is locked by running process {}",
                        dir.display(),
                        pid
                    )));
                }
            }
        }
        std::fs::write(&path, format!("{}\n", std::process::id())).map_err(user)?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Parser, Debug)]
#[command(name = "omniseg", about = "Unified 2D/3D instance and semantic segmentation, desk-scale")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic posed RGB-D scenes plus a train/test manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        views: usize,
        /// Image size as WIDTHxHEIGHT, multiples of 32.
        #[arg(long, default_value = "64x64")]
        size: String,
        /// Probability of zeroing depth at instance-boundary pixels.
        #[arg(long, default_value_t = 0.0)]
        hole_rate: f64,
        /// Insert a central occluding divider into every scene.
        #[arg(long, default_value_t = false)]
        occluder: bool,
        /// Mirrored same-class object pairs per scene.
        #[arg(long, default_value_t = 0)]
        duplicate_pairs: usize,
    },
    /// Train a model and write checkpoints plus metrics.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation token domain: per-view pixels or the GT surface cloud.
        #[arg(long, default_value = "pixels")]
        domain: String,
        /// Restrict inference context to the first K views of each scene.
        #[arg(long)]
        views: Option<usize>,
        /// Report directory (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step. Small enough that the step rarely straddles
        /// a ReLU or |x| kink, large enough to stay above f64 roundoff.
        #[arg(long, default_value_t = 1e-7)]
        eps: f64,
        /// Coordinates probed per parameter block.
        #[arg(long, default_value_t = 2)]
        entries: usize,
        /// Test hook: corrupt the report to exercise the failure path.
        #[arg(long, hide = true, default_value_t = false)]
        corrupt: bool,
    },
    /// Render a whitespace-separated metrics table as SVG or CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Output file; the extension (.svg or .csv) selects the format.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are successes, not flag errors
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { 0 } else { 1 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, scenes, seed, views, size, hole_rate, occluder, duplicate_pairs } => {
            cmd_synth(&out, scenes, seed, views, &size, hole_rate, occluder, duplicate_pairs)
        }
        Command::Train { config, data, out } => cmd_train(&config, data.as_deref(), out.as_deref()),
        Command::Eval { checkpoint, data, domain, views, out } => {
            cmd_eval(&checkpoint, &data, &domain, views, out.as_deref())
        }
        Command::Gradcheck { config, seed, eps, entries, corrupt } => {
            cmd_gradcheck(config.as_deref(), seed, eps, entries, corrupt)
        }
        Command::Plot { metrics, out } => cmd_plot(&metrics, &out),
    }
}

fn parse_size(size: &str) -> Result<(usize, usize), CliError> {
    let (w, h) = size
        .split_once('x')
        .ok_or_else(|| CliError::User(format!("--size must be WIDTHxHEIGHT, got `{}`", size)))?;
    let w: usize = w.parse().map_err(|_| CliError::User(format!("bad width in `{}`", size)))?;
    let h: usize = h.parse().map_err(|_| CliError::User(format!("bad height in `{}`", size)))?;
    if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
        return Err(CliError::User("image dimensions must be positive multiples of 32".into()));
    }
    Ok((w, h))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_synth(
    out: &Path,
    scenes: usize,
    seed: u64,
    views: usize,
    size: &str,
    hole_rate: f64,
    occluder: bool,
    duplicate_pairs: usize,
) -> Result<(), CliError> {
    if scenes == 0 {
        return Err(CliError::User("--scenes must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&hole_rate) {
        return Err(CliError::User("--hole-rate must be in [0, 1]".into()));
    }
    let (w, h) = parse_size(size)?;
    let cfg = SceneGenConfig {
        views,
        image_width: w,
        image_height: h,
        central_occluder: occluder,
        duplicate_pairs,
        ..SceneGenConfig::default()
    };
    std::fs::create_dir_all(out).map_err(user)?;
    let _lock = DirLock::acquire(out)?;

    let workers = worker_count().min(scenes);
    let errors = std::sync::Mutex::new(Vec::<String>::new());
    std::thread::scope(|scope| {
        for worker in 0..workers {
            let cfg = &cfg;
            let errors = &errors;
            scope.spawn(move || {
                for i in (worker..scenes).step_by(workers) {
                    let dir = out.join(format!("scene_{:04}", i));
                    let result = generate_scene(seed.wrapping_add(i as u64), cfg)
                        .map(|s| {
                            if hole_rate > 0.0 {
                                simulate_depth_holes(&s, hole_rate, seed.wrapping_add(i as u64))
                            } else {
                                s
                            }
                        })
                        .and_then(|s| save_scene(&s, &dir));
                    if let Err(e) = result {
                        errors.lock().unwrap().push(format!("scene_{:04}: {}", i, e));
                    }
                }
            });
        }
    });
    let errors = errors.into_inner().unwrap();
    if !errors.is_empty() {
        return Err(CliError::Data(errors.join("; ")));
    }

    // 75/25 train/test split, shuffled by seed
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_count = (scenes / 4).max(if scenes > 1 { 1 } else { 0 });
    let mut lines: Vec<String> = vec![String::new(); scenes];
    for (rank, &i) in order.iter().enumerate() {
        let split = if rank < test_count { "test" } else { "train" };
        lines[i] = format!("scene_{:04} {}", i, split);
    }
    std::fs::write(out.join("manifest.txt"), lines.join("\n") + "\n").map_err(user)?;
    println!("wrote {} scenes to {}", scenes, out.display());
    Ok(())
}

/// Scenes of one manifest split, in manifest order.
pub fn load_split(data: &Path, split: &str) -> Result<Vec<Scene>, CliError> {
    let manifest = std::fs::read_to_string(data.join("manifest.txt"))
        .map_err(|e| CliError::Data(format!("{}: {}", data.join("manifest.txt").display(), e)))?;
    let mut scenes = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (dir, tag) = (it.next(), it.next());
        let (Some(dir), Some(tag)) = (dir, tag) else {
            return Err(CliError::Data(format!("manifest.txt line {}: expected `dir split`", lineno + 1)));
        };
        if tag == split {
            scenes.push(load_scene(&data.join(dir)).map_err(|e| data_err_scene(dir, e))?);
        }
    }
    if scenes.is_empty() {
        return Err(CliError::Data(format!("no `{}` scenes in {}", split, data.display())));
    }
    for s in &scenes[1..] {
        if s.vocabulary.entries != scenes[0].vocabulary.entries {
            return Err(CliError::Data("scenes disagree on the vocabulary".into()));
        }
    }
    Ok(scenes)
}

fn data_err_scene(dir: &str, e: crate::scenedata::SceneError) -> CliError {
    CliError::Data(format!("{}: {}", dir, e))
}

pub fn cmd_train(
    config_path: &Path,
    data_flag: Option<&Path>,
    out_flag: Option<&Path>,
) -> Result<(), CliError> {
    let mut config = Config::from_file(config_path).map_err(user)?;
    if let Some(d) = data_flag {
        config.data_dir = d.display().to_string();
    }
    if let Some(o) = out_flag {
        config.out_dir = o.display().to_string();
    }
    if config.data_dir.is_empty() {
        return Err(CliError::User("no data directory (--data or data_dir=)".into()));
    }
    if config.out_dir.is_empty() {
        return Err(CliError::User("no output directory (--out or out_dir=)".into()));
    }
    let data_dir = PathBuf::from(&config.data_dir);
    let out_dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(user)?;
    let _lock = DirLock::acquire(&out_dir)?;

    let train_scenes = load_split(&data_dir, "train")?;
    let vocab = train_scenes[0].vocabulary.clone();
    let model = Model::new(config.model_config(), &vocab);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    model.init(&mut store, &mut Initializer { rng: &mut rng });

    let test_scenes = if config.eval_every > 0 { load_split(&data_dir, "test").ok() } else { None };
    let mut eval_hook = test_scenes.map(|scenes| {
        move |m: &Model, s: &ParamStore| -> String {
            match evaluate_scenes(m, s, &scenes, EvalDomain::Pixels, None) {
                Ok(r) => format!("mAP25 {:.4} mIoU {:.4}", r.map25, r.miou),
                Err(e) => format!("eval_error {}", e.message()),
            }
        }
    });

    let mut log = std::fs::File::create(out_dir.join("metrics.log")).map_err(user)?;
    let tcfg = config.train_config();
    train_loop(
        &model,
        &mut store,
        &train_scenes,
        &tcfg,
        &mut log,
        eval_hook.as_mut().map(|h| h as &mut dyn FnMut(&Model, &ParamStore) -> String),
    )
    .map_err(data)?;
    log.flush().map_err(user)?;

    save_checkpoint(&out_dir.join("model.ckpt"), &store, &config).map_err(data)?;
    println!("trained {} iterations; checkpoint at {}", config.iterations, out_dir.join("model.ckpt").display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalDomain {
    Pixels,
    Mesh,
}

/// Inference plus metric accumulation over a scene list. `views_limit`
/// restricts each scene to its first K frames.
pub fn evaluate_scenes(
    model: &Model,
    store: &ParamStore,
    scenes: &[Scene],
    domain: EvalDomain,
    views_limit: Option<usize>,
) -> Result<EvalReport, CliError> {
    let mut scene_evals = Vec::new();
    let mut pred_sem = Vec::new();
    let mut gt_sem = Vec::new();
    for scene in scenes {
        let k = views_limit.unwrap_or(scene.frames.len()).clamp(1, scene.frames.len());
        let frames = &scene.frames[..k];
        if model.cfg.enable_3d_fusion || domain == EvalDomain::Mesh {
            let example = prepare_example(frames, scene, true);
            eval_one(model, store, scene, &example, domain, &mut scene_evals, &mut pred_sem, &mut gt_sem)?;
        } else {
            // pure-2D model on the pixel domain: score each frame separately
            for f in frames {
                let example = prepare_example(std::slice::from_ref(f), scene, false);
                eval_one(model, store, scene, &example, domain, &mut scene_evals, &mut pred_sem, &mut gt_sem)?;
            }
        }
    }
    let mut report = evaluate_instances_dataset(&scene_evals);
    let (miou, per_class) = evaluate_semantic(&pred_sem, &gt_sem);
    report.miou = miou;
    report.per_class_iou = per_class;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn eval_one(
    model: &Model,
    store: &ParamStore,
    scene: &Scene,
    example: &Example,
    domain: EvalDomain,
    scene_evals: &mut Vec<SceneEval>,
    pred_sem: &mut Vec<usize>,
    gt_sem: &mut Vec<usize>,
) -> Result<(), CliError> {
    let mut ctx = Ctx::new(store);
    let views: Vec<NodeId> = example.views.iter().map(|v| ctx.g.constant(v.clone())).collect();
    let preds = model.forward(&mut ctx, &views, example.geometry.as_ref());
    let last = preds.rounds.last().expect("final prediction");
    let class_logits = ctx.g.value(last.class_logits).clone();

    match domain {
        EvalDomain::Pixels => {
            let mask_logits = ctx.g.value(last.mask_logits).clone();
            let predictions =
                predictions_from_logits(&mask_logits, &class_logits, BACKGROUND_CLASS);
            // instance metrics cover objects only; the background target
            // exists for semantics, not AP. Every labeled instance of the
            // scene counts, even when invisible in the evaluated frames
            // (empty mask, unreachable): limiting the view context costs
            // recall instead of shrinking the task.
            let gts = scene
                .labels
                .iter()
                .map(|l| GtInstance {
                    mask: example
                        .token_instances
                        .iter()
                        .map(|&id| id == l.instance_id)
                        .collect(),
                    class_id: l.class_id,
                })
                .collect();
            scene_evals.push(SceneEval { predictions, gts });
            pred_sem.extend(semantic_from_instances(&mask_logits, &class_logits));
            gt_sem.extend_from_slice(&example.token_classes);
        }
        EvalDomain::Mesh => {
            let frames_used = example.views.len();
            let frames = &scene.frames[..frames_used];
            let points: Vec<Vec3> = scene.gt_surface_cloud.iter().map(|p| p.position).collect();
            let labels = labels_to_mesh(frames, &points, MESH_LABEL_TOLERANCE);
            let keep: Vec<usize> =
                (0..points.len()).filter(|&i| labels[i].is_some()).collect();
            if keep.is_empty() {
                return Err(CliError::Data("no mesh point visible in any view".into()));
            }
            let kept_points: Vec<Vec3> = keep.iter().map(|&i| points[i]).collect();
            let mesh_node = model.mask_logits_on_mesh(&mut ctx, &preds, &kept_points);
            let mask_logits = ctx.g.value(mesh_node).clone();

            let kept_labels: Vec<u16> = keep.iter().map(|&i| labels[i].unwrap()).collect();
            let mut gts = Vec::new();
            for label in &scene.labels {
                let mask: Vec<bool> = kept_labels.iter().map(|&id| id == label.instance_id).collect();
                if mask.iter().any(|&b| b) {
                    gts.push(GtInstance { mask, class_id: label.class_id });
                }
            }
            let predictions =
                predictions_from_logits(&mask_logits, &class_logits, BACKGROUND_CLASS);
            scene_evals.push(SceneEval { predictions, gts });
            pred_sem.extend(semantic_from_instances(&mask_logits, &class_logits));
            gt_sem.extend(
                kept_labels
                    .iter()
                    .map(|&id| scene.class_of_instance(id).unwrap_or(BACKGROUND_CLASS)),
            );
        }
    }
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    domain: &str,
    views: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let domain = match domain {
        "pixels" => EvalDomain::Pixels,
        "mesh" => EvalDomain::Mesh,
        other => return Err(CliError::User(format!("--domain must be pixels|mesh, got `{}`", other))),
    };
    if views == Some(0) {
        return Err(CliError::User("--views must be ≥ 1".into()));
    }
    let (store, config) = load_checkpoint(checkpoint, None).map_err(|e| CliError::Data(e.to_string()))?;
    let scenes = load_split(data, "test")?;
    if domain == EvalDomain::Mesh && config.mode == Mode::Mode2d {
        return Err(CliError::User("mesh-domain evaluation needs a 3D-capable checkpoint".into()));
    }
    let mut model = Model::new(config.model_config(), &scenes[0].vocabulary);
    if config.mode == Mode::Mode2d {
        model.cfg.enable_3d_fusion = false;
    }

    let report = evaluate_scenes(&model, &store, &scenes, domain, views)?;
    print!("{}", report.to_text());

    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(user)?;
    let suffix = match (domain, views) {
        (EvalDomain::Pixels, None) => "pixels".to_string(),
        (EvalDomain::Mesh, None) => "mesh".to_string(),
        (EvalDomain::Pixels, Some(k)) => format!("pixels_views{}", k),
        (EvalDomain::Mesh, Some(k)) => format!("mesh_views{}", k),
    };
    std::fs::write(out_dir.join(format!("eval_{}.txt", suffix)), report.to_text()).map_err(user)?;
    std::fs::write(out_dir.join(format!("eval_{}.csv", suffix)), report.to_csv()).map_err(user)?;
    Ok(())
}

/// Tiny model for gradient verification (well under 5k parameters).
pub fn gradcheck_config() -> Config {
    let mut cfg = Config::default();
    cfg.image_width = 32;
    cfg.image_height = 32;
    cfg.views = 2;
    cfg.backbone_width = 1;
    cfg.decoder_dim = 4;
    cfg.heads = 2;
    cfg.rounds = 1;
    cfg.queries = 3;
    cfg.deform_points = 1;
    cfg.knn = 4;
    cfg.voxel_size4 = 0.08;
    cfg.fusion_layers = 1;
    cfg
}

/// Builds the gradient-check model pair (closed- and open-vocabulary heads
/// share every other parameter) plus one multiview RGB-D example.
fn gradcheck_setup(config: &Config, seed: u64) -> Result<(Model, Model, ParamStore, Example), CliError> {
    let gen_cfg = SceneGenConfig {
        views: config.views.max(2),
        image_width: config.image_width,
        image_height: config.image_height,
        object_count_min: 2,
        object_count_max: 3,
        ..SceneGenConfig::default()
    };
    let scene = generate_scene(seed, &gen_cfg).map_err(data)?;
    let example = prepare_example(&scene.frames[..2], &scene, true);

    let mut closed_cfg = config.model_config();
    closed_cfg.open_vocab = false;
    let mut open_cfg = config.model_config();
    open_cfg.open_vocab = true;
    let closed = Model::new(closed_cfg, &scene.vocabulary);
    let open = Model::new(open_cfg, &scene.vocabulary);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer { rng: &mut rng };
    closed.init(&mut store, &mut init);
    // Zero-initialized residual outputs structurally block gradients into the
    // branches behind them, so the check would see exact zeros there. Jitter
    // every parameter to probe a generic point where all paths carry signal.
    for (_, t) in store.iter_mut() {
        let noise = init.normal(t.shape().to_vec(), 0.05);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    Ok((closed, open, store, example))
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Runs the analytic-vs-finite-difference check for both head variants and
/// merges the per-block errors (a block passes if either head's run reaches
/// it). Returns the scalar parameter count and `(block, max rel err)` pairs.
pub fn run_gradcheck(
    config: &Config,
    seed: u64,
    eps: f64,
    entries: usize,
) -> Result<(usize, Vec<(String, f64)>), CliError> {
    let (closed, open, store, example) = gradcheck_setup(config, seed)?;
    let scalar_count = store.scalar_count();

    let weights = LossWeights::default();
    let examples = std::slice::from_ref(&example);
    let closed_report = gradient_check(&closed, &store, examples, &weights, eps, entries, seed)
        .map_err(data)?;
    let open_report = gradient_check(&open, &store, examples, &weights, eps, entries, seed + 1)
        .map_err(data)?;

    let open_map: std::collections::BTreeMap<String, f64> = open_report.into_iter().collect();
    let merged = closed_report
        .into_iter()
        .map(|(name, closed_err)| {
            let open_err = open_map.get(&name).copied().unwrap_or(f64::NAN);
            let err = match (closed_err.is_nan(), open_err.is_nan()) {
                (false, false) => closed_err.max(open_err),
                (false, true) => closed_err,
                (true, false) => open_err,
                (true, true) => f64::NAN,
            };
            (name, err)
        })
        .collect();
    Ok((scalar_count, merged))
}

pub fn cmd_gradcheck(
    config_path: Option<&Path>,
    seed: u64,
    eps: f64,
    entries: usize,
    corrupt: bool,
) -> Result<(), CliError> {
    let config = match config_path {
        Some(p) => Config::from_file(p).map_err(user)?,
        None => gradcheck_config(),
    };
    let (scalar_count, merged) = run_gradcheck(&config, seed, eps, entries)?;
    println!("model parameters: {}", scalar_count);

    let block_count = merged.len();
    let mut failures = Vec::new();
    for (i, (name, mut err)) in merged.into_iter().enumerate() {
        if corrupt && i == 0 {
            err += 1.0; // test hook: force the failure path
        }
        let pass = err.is_finite() && err <= GRADCHECK_TOLERANCE;
        println!("{} {:.3e} {}", name, err, if pass { "pass" } else { "FAIL" });
        if !pass {
            failures.push(name);
        }
    }
    if failures.is_empty() {
        println!("gradcheck pass ({} blocks)", block_count);
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for {} block(s): {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}

/// Numeric table parsed from a metrics file: the leading numeric prefix of
/// each non-comment line, truncated to a common width.
fn parse_metrics_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let mut names: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = usize::MAX;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let numeric_prefix: Vec<f64> = tokens
            .iter()
            .map(|t| t.parse::<f64>())
            .take_while(|r| r.is_ok())
            .map(|r| r.unwrap())
            .collect();
        if numeric_prefix.is_empty() {
            if names.is_none() && rows.is_empty() {
                names = Some(tokens.iter().map(|s| s.to_string()).collect());
                continue;
            }
            return Err(CliError::Data(format!(
                "{} line {}: no numeric values",
                path.display(),
                lineno + 1
            )));
        }
        if numeric_prefix.len() < 2 {
            return Err(CliError::Data(format!(
                "{} line {}: need at least two numeric columns",
                path.display(),
                lineno + 1
            )));
        }
        width = width.min(numeric_prefix.len());
        rows.push(numeric_prefix);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    for r in rows.iter_mut() {
        r.truncate(width);
    }
    let names = match names {
        Some(mut n) => {
            n.truncate(width);
            while n.len() < width {
                n.push(format!("col{}", n.len()));
            }
            n
        }
        None => (0..width).map(|i| format!("col{}", i)).collect(),
    };
    Ok((names, rows))
}

const PLOT_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Standalone SVG polyline chart: first column is x, the rest are series.
pub fn render_svg(names: &[String], rows: &[Vec<f64>]) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 45.0);
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for r in rows {
        for &v in &r[1..] {
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
    }
    let mut xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if xmax == xmin {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if ymax == ymin {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let px = |x: f64| ml + (x - xmin) / (xmax - xmin) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
        w, h, w, h
    );
    let _ = writeln!(s, "<rect width=\"{}\" height=\"{}\" fill=\"white\"/>", w, h);
    // axes
    let _ = writeln!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        ml, h - mb, w - mr, h - mb
    );
    let _ = writeln!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        ml, mt, ml, h - mb
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>",
        ml, h - mb + 16.0, fmt_num(xmin)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>",
        w - mr, h - mb + 16.0, fmt_num(xmax)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>",
        ml - 6.0, h - mb, fmt_num(ymin)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>",
        ml - 6.0, mt + 10.0, fmt_num(ymax)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        (ml + w - mr) / 2.0, h - 8.0, names[0]
    );
    for series in 1..rows[0].len() {
        let color = PLOT_COLORS[(series - 1) % PLOT_COLORS.len()];
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r[0]), py(r[series])))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            color,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{}</text>",
            w - mr - 120.0,
            mt + 14.0 * series as f64,
            color,
            names[series]
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{:.4}", v)
    }
}

pub fn cmd_plot(metrics: &Path, out: &Path) -> Result<(), CliError> {
    let (names, rows) = parse_metrics_table(metrics)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some("svg") => {
            std::fs::write(out, render_svg(&names, &rows)).map_err(user)?;
        }
        Some("csv") => {
            let mut csv = names.join(",");
            csv.push('\n');
            for r in &rows {
                let cells: Vec<String> = r.iter().map(|v| format!("{}", v)).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            std::fs::write(out, csv).map_err(user)?;
        }
        _ => return Err(CliError::User("--out must end in .svg or .csv".into())),
    }
    Ok(())
}
