//! Command-line interface. Exit codes: 0 success, 1 validation failure,
//! 2 usage error, 3 configuration or input error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::avatar::CanonicalAvatar;
use crate::body_model::{load_motion, toy};
use crate::dataset::{
    clip_dir, evaluate_predictions, export_clip, groundtruth_predictions, load_annotations,
    read_predictions, split_subjects, validate_dataset, write_predictions, ClipMetadata,
    ANNOTATION_FILE, DEFAULT_AP_THRESHOLDS,
};
use crate::guidance::external::serve;
use crate::guidance::{mock_denoiser, Denoiser, ExternalDenoiser, MockMode};
use crate::image::{encode_npy, read_npy, read_png, write_png, Image, NpyDtype};
use crate::pipeline::{
    animate_clip, annotate_frame, build_avatar, choose_scene, clip_camera, compose_frame,
    load_body_model, mock_for_prompt, render_frame, resolve_scene, run_demo, AnimationCache,
    PipelineConfig, RenderManifest,
};
use crate::prompts::{generate_prompts, load_space, read_prompts_jsonl, write_prompts_jsonl};
use crate::render::{RenderOutput, ScreenStats};
use crate::{rng, Error, Result, FORMAT_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gen4d",
    version,
    about = "Synthetic human pose dataset generator"
)]
pub struct Cli {
    /// Base directory; relative paths in flags and the config resolve against it.
    #[arg(long, global = true, default_value = ".")]
    pub root: PathBuf,
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Outputs do not depend on this value.
    #[arg(long, global = true, env = "GEN4D_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate balanced avatar description prompts as JSON lines.
    Prompts(PromptsArgs),
    /// Build and refine a canonical avatar for one prompt.
    Avatar(AvatarArgs),
    /// Deform an avatar with a motion sequence into a clip directory.
    Animate(AnimateArgs),
    /// Rasterize an animated clip under a sampled camera and scene light.
    Render(RenderArgs),
    /// Cast shadows and composite rendered frames over the clip's scene.
    Compose(ComposeArgs),
    /// Annotate composed clips, split subjects and write a dataset.
    Export(ExportArgs),
    /// Check a dataset against its manifest and annotation invariants.
    Validate(ValidateArgs),
    /// Score keypoint predictions against a dataset's ground truth.
    Eval(EvalArgs),
    /// Generate a complete mini dataset from the bundled toy assets.
    Demo(DemoArgs),
    /// Serve a mock denoiser over stdin/stdout (external denoiser protocol).
    #[command(hide = true)]
    MockDenoiser(MockDenoiserArgs),
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value = "sports")]
    pub scenario: String,
    /// Attribute space JSON; overrides the config.
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    #[arg(long, default_value = "prompts.jsonl")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DenoiserKind {
    Mock,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MockKind {
    /// Pull toward the prompt's clothing color.
    ColorTarget,
    Perfect,
}

#[derive(Debug, Args)]
pub struct AvatarArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value = "avatar.json")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DenoiserKind::Mock)]
    pub denoiser: DenoiserKind,
    /// Command line of the external denoiser, split on whitespace.
    #[arg(long)]
    pub denoiser_cmd: Option<String>,
    #[arg(long, value_enum, default_value_t = MockKind::ColorTarget)]
    pub mock: MockKind,
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub avatar: PathBuf,
    #[arg(long)]
    pub clip_dir: PathBuf,
    /// Motion file; without it a procedural toy motion is generated.
    #[arg(long)]
    pub motion: Option<PathBuf>,
    #[arg(long, default_value = "batting")]
    pub action: String,
    #[arg(long, default_value = "subject00")]
    pub subject: String,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Defaults to the clip directory's name.
    #[arg(long)]
    pub clip_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub clip_dir: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub clip_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Composed clip directories.
    #[arg(long = "clip-dir", required = true)]
    pub clip_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sport: Option<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Predictions as JSON lines of `{clip_id, frame_index, kp2d}`.
    #[arg(long, required_unless_present = "dump_groundtruth")]
    pub pred: Option<PathBuf>,
    /// Limit to one split; all splits by default.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub json: bool,
    /// Write the ground truth in prediction format and exit.
    #[arg(long)]
    pub dump_groundtruth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MockDenoiserArgs {
    /// Mock mode as JSON, e.g. `{"mode":"perfect"}`.
    #[arg(long, default_value = r#"{"mode":"perfect"}"#)]
    pub mode: String,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CONFIG
        }
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(&cli.root.join(p))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    Ok(cfg)
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = effective_config(cli)?;
    apply_overrides(&cli.command, &mut cfg);
    cfg.validate(&cli.root)?;
    let threads = cfg.threads.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(cli, &cfg, &mut buf));
    out.write_all(&buf).map_err(|e| Error::io("<stdout>", e))?;
    result
}

fn apply_overrides(command: &Command, cfg: &mut PipelineConfig) {
    match command {
        Command::Prompts(a) => {
            if a.attributes.is_some() {
                cfg.attribute_space = a.attributes.clone();
            }
        }
        Command::Avatar(a) => {
            if let Some(n) = a.iterations {
                cfg.guidance.iterations = n;
            }
            if let Some(r) = a.resolution {
                cfg.guidance.resolution = r;
            }
            if let Some(g) = a.gaussians {
                cfg.demo.gaussians = g;
            }
        }
        Command::Animate(a) => {
            if let Some(f) = a.frames {
                cfg.demo.frames = f;
            }
        }
        Command::Render(a) => {
            if let Some(r) = a.resolution {
                cfg.demo.resolution = r;
            }
        }
        Command::Export(a) => {
            if let Some(o) = &a.out {
                cfg.dataset.output_root = o.clone();
            }
            if let Some(s) = &a.sport {
                cfg.dataset.sport = s.clone();
            }
        }
        Command::Demo(a) => {
            if let Some(o) = &a.out {
                cfg.dataset.output_root = o.clone();
            }
            if let Some(f) = a.frames {
                cfg.demo.frames = f;
            }
            if let Some(s) = a.subjects {
                cfg.demo.subjects = s;
            }
            if let Some(r) = a.resolution {
                cfg.demo.resolution = r;
            }
        }
        Command::Compose(_)
        | Command::Validate(_)
        | Command::Eval(_)
        | Command::MockDenoiser(_) => {}
    }
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig, out: &mut Vec<u8>) -> Result<i32> {
    let root = cli.root.as_path();
    let say = |out: &mut Vec<u8>, text: String| {
        writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
    };
    match &cli.command {
        Command::Prompts(a) => {
            let space = load_space(
                cfg.attribute_space
                    .as_ref()
                    .map(|p| root.join(p))
                    .as_deref(),
            )?;
            let prompts = generate_prompts(&space, a.count, &a.scenario, None, cfg.seed)?;
            let path = root.join(&a.out);
            write_prompts_jsonl(&path, &prompts)?;
            echo_beside(cfg, &path)?;
            say(
                out,
                format!("wrote {} prompts to {}", prompts.len(), path.display()),
            )?;
        }
        Command::Avatar(a) => {
            let prompts = read_prompts_jsonl(&root.join(&a.prompts))?;
            let prompt = prompts.get(a.index).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "prompt index {} out of range ({} prompts)",
                    a.index,
                    prompts.len()
                ))
            })?;
            let model = load_body_model(cfg, root)?;
            let mut denoiser: Box<dyn Denoiser> = match a.denoiser {
                DenoiserKind::Mock => match a.mock {
                    MockKind::ColorTarget => Box::new(mock_for_prompt(prompt)),
                    MockKind::Perfect => Box::new(mock_denoiser(MockMode::Perfect)),
                },
                DenoiserKind::External => {
                    let cmd = a.denoiser_cmd.as_deref().ok_or_else(|| {
                        Error::InvalidArgument("--denoiser external needs --denoiser-cmd".into())
                    })?;
                    let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
                    Box::new(ExternalDenoiser::spawn(&argv)?)
                }
            };
            let seed = rng::derive_seed(cfg.seed, "subject", a.index as u64);
            let avatar = build_avatar(
                &model,
                prompt,
                &cfg.guidance,
                cfg.demo.gaussians,
                denoiser.as_mut(),
                seed,
            )?;
            let path = root.join(&a.out);
            avatar.save(&path)?;
            echo_beside(cfg, &path)?;
            say(
                out,
                format!(
                    "wrote avatar with {} gaussians to {}",
                    avatar.len(),
                    path.display()
                ),
            )?;
        }
        Command::Animate(a) => {
            let model = load_body_model(cfg, root)?;
            let avatar = CanonicalAvatar::load(&root.join(&a.avatar))?;
            let dir = root.join(&a.clip_dir);
            let clip_id = a.clip_id.clone().unwrap_or_else(|| dir_name(&dir));
            let motion = match &a.motion {
                Some(p) => load_motion(&root.join(p))?,
                None => {
                    if !toy::ACTIONS.contains(&a.action.as_str()) {
                        return Err(Error::InvalidArgument(format!(
                            "unknown action {:?}; procedural motions cover {:?}",
                            a.action,
                            toy::ACTIONS
                        )));
                    }
                    let seed = rng::derive_seed(cfg.seed, &format!("motion/{clip_id}"), 0);
                    toy::humanoid_motion(&a.action, &a.subject, cfg.demo.frames, seed)
                }
            };
            let cache = animate_clip(&avatar, &model, &motion, &cfg.animate, &clip_id)?;
            cache.save(&dir)?;
            cfg.echo(&dir)?;
            say(
                out,
                format!(
                    "animated {} frames into {}",
                    cache.frames.len(),
                    dir.display()
                ),
            )?;
        }
        Command::Render(a) => {
            let model = load_body_model(cfg, root)?;
            let dir = root.join(&a.clip_dir);
            let cache = AnimationCache::load(&dir)?;
            let cam = clip_camera(
                &cfg.camera,
                cfg.demo.resolution,
                &model,
                &cache.motion,
                &cache.clip_id,
                cfg.seed,
            )?;
            let source = choose_scene(
                &cfg.compose,
                root,
                &cache.motion.action_label,
                &cache.clip_id,
                cfg.seed,
            )?;
            let scene = resolve_scene(&source, &cam, root)?;
            cache
                .frames
                .par_iter()
                .enumerate()
                .try_for_each(|(i, cloud)| -> Result<()> {
                    let fg = render_frame(cloud, &scene, &cam, &cfg.guidance.raster)?;
                    write_bytes(
                        &dir.join(format!("fg/{i:06}_rgb.npy")),
                        &encode_npy(&fg.rgb, NpyDtype::F64),
                    )?;
                    write_bytes(
                        &dir.join(format!("fg/{i:06}_alpha.npy")),
                        &encode_npy(&fg.alpha, NpyDtype::F64),
                    )?;
                    write_bytes(
                        &dir.join(format!("fg/{i:06}_depth.npy")),
                        &encode_npy(&fg.depth, NpyDtype::F64),
                    )?;
                    Ok(())
                })?;
            RenderManifest {
                format_version: FORMAT_VERSION,
                clip_id: cache.clip_id.clone(),
                camera: cam,
                scene: source,
                frame_count: cache.frames.len(),
            }
            .save(&dir)?;
            cfg.echo(&dir)?;
            say(
                out,
                format!(
                    "rendered {} frames into {}",
                    cache.frames.len(),
                    dir.display()
                ),
            )?;
        }
        Command::Compose(a) => {
            let dir = root.join(&a.clip_dir);
            let cache = AnimationCache::load(&dir)?;
            let rm = RenderManifest::load(&dir)?;
            let scene = resolve_scene(&rm.scene, &rm.camera, root)?;
            cache
                .frames
                .par_iter()
                .enumerate()
                .try_for_each(|(i, cloud)| -> Result<()> {
                    let fg = load_foreground(&dir, i)?;
                    let frame = compose_frame(cloud, &fg, &scene, &rm.camera, &cfg.compose.shadow)?;
                    write_png(&dir.join(crate::dataset::frame_file(i)), &frame)
                })?;
            cfg.echo(&dir)?;
            say(
                out,
                format!(
                    "composed {} frames in {}",
                    cache.frames.len(),
                    dir.display()
                ),
            )?;
        }
        Command::Export(a) => {
            let model = load_body_model(cfg, root)?;
            let k = model.num_joints();
            let clips: Vec<(PathBuf, AnimationCache, RenderManifest)> = a
                .clip_dirs
                .iter()
                .map(|d| {
                    let dir = root.join(d);
                    Ok((
                        dir.clone(),
                        AnimationCache::load(&dir)?,
                        RenderManifest::load(&dir)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let metas: Vec<ClipMetadata> = clips
                .iter()
                .map(|(_, c, _)| ClipMetadata {
                    clip_id: c.clip_id.clone(),
                    subject_id: c.motion.subject_id.clone(),
                    action_label: c.motion.action_label.clone(),
                    frame_count: c.frames.len(),
                    keypoint_count: k,
                })
                .collect();
            let manifest =
                split_subjects(&cfg.dataset.sport, &metas, &cfg.dataset.split, cfg.seed)?;
            let data_root = root.join(&cfg.dataset.output_root);
            clips
                .par_iter()
                .try_for_each(|(dir, cache, rm)| -> Result<()> {
                    let mut frames = Vec::with_capacity(cache.frames.len());
                    let mut records = Vec::with_capacity(cache.frames.len());
                    for i in 0..cache.frames.len() {
                        let alpha = read_npy(&dir.join(format!("fg/{i:06}_alpha.npy")))?;
                        frames.push(read_png(&dir.join(crate::dataset::frame_file(i)))?);
                        records.push(annotate_frame(
                            &model,
                            &cache.motion.frames[i],
                            &alpha,
                            &rm.camera,
                            &cache.motion,
                            &cache.clip_id,
                            i,
                        )?);
                    }
                    let split = manifest
                        .splits
                        .split_of(&cache.clip_id)
                        .expect("clip was split");
                    export_clip(
                        &frames,
                        &records,
                        &clip_dir(&data_root, split, &cache.clip_id),
                        &cache.clip_id,
                        k,
                    )?;
                    Ok(())
                })?;
            manifest.save(&data_root)?;
            cfg.echo(&data_root)?;
            say(
                out,
                format!(
                    "exported {} clips, {} frames to {}",
                    metas.len(),
                    manifest.total_frames(),
                    data_root.display()
                ),
            )?;
        }
        Command::Validate(a) => {
            let data_root = root.join(a.dataset.as_ref().unwrap_or(&cfg.dataset.output_root));
            let report = validate_dataset(&data_root)?;
            if a.json {
                let text = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::json("<stdout>", e))?;
                say(out, text)?;
            } else {
                for v in &report.violations {
                    say(out, v.to_string())?;
                }
                say(
                    out,
                    format!(
                        "{} clips, {} frames, {} violations",
                        report.clips_checked,
                        report.frames_checked,
                        report.violations.len()
                    ),
                )?;
            }
            if !report.is_empty() {
                return Ok(EXIT_VALIDATION);
            }
        }
        Command::Eval(a) => {
            let data_root = root.join(a.dataset.as_ref().unwrap_or(&cfg.dataset.output_root));
            if let Some(p) = &a.dump_groundtruth {
                let preds = groundtruth_predictions(&data_root, a.split.as_deref())?;
                write_predictions(&root.join(p), &preds)?;
                say(out, format!("wrote {} frames of ground truth", preds.len()))?;
                return Ok(EXIT_OK);
            }
            let pred_path = a.pred.as_ref().expect("clap requires --pred");
            let preds = read_predictions(&root.join(pred_path))?;
            let thresholds = a
                .thresholds
                .clone()
                .unwrap_or_else(|| DEFAULT_AP_THRESHOLDS.to_vec());
            let ap = evaluate_predictions(&data_root, a.split.as_deref(), &preds, &thresholds)?;
            if a.json {
                let doc = serde_json::json!({ "thresholds": thresholds, "ap": ap });
                say(out, doc.to_string())?;
            } else {
                let head: Vec<String> = thresholds.iter().map(|t| format!("AP^{t}")).collect();
                let row: Vec<String> = ap.iter().map(|v| format!("{v:.1}")).collect();
                say(out, head.join("\t"))?;
                say(out, row.join("/"))?;
            }
        }
        Command::Demo(_) => {
            let data_root = root.join(&cfg.dataset.output_root);
            let summary = run_demo(cfg, root, &data_root)?;
            let m = &summary.manifest;
            say(
                out,
                format!(
                    "demo dataset at {}: train {}/{}, valid {}/{}, test {}/{} (clips/frames)",
                    data_root.display(),
                    m.splits.train.clip_count,
                    m.splits.train.frame_count,
                    m.splits.valid.clip_count,
                    m.splits.valid.frame_count,
                    m.splits.test.clip_count,
                    m.splits.test.frame_count
                ),
            )?;
        }
        Command::MockDenoiser(a) => {
            let mode: MockMode = serde_json::from_str(&a.mode)
                .map_err(|e| Error::InvalidArgument(format!("mock mode: {e}")))?;
            let mut inner = mock_denoiser(mode);
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            serve(&mut stdin.lock(), &mut stdout.lock(), &mut inner)?;
        }
    }
    Ok(EXIT_OK)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("clip")
        .to_string()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_foreground(dir: &Path, i: usize) -> Result<RenderOutput> {
    let rgb = read_npy(&dir.join(format!("fg/{i:06}_rgb.npy")))?;
    let alpha: Image = read_npy(&dir.join(format!("fg/{i:06}_alpha.npy")))?;
    let depth = read_npy(&dir.join(format!("fg/{i:06}_depth.npy")))?;
    Ok(RenderOutput {
        rgb,
        alpha,
        depth,
        screen_stats: ScreenStats::default(),
    })
}

/// Config echo for single-file outputs: `<file>.config.json`.
fn echo_beside(cfg: &PipelineConfig, path: &Path) -> Result<()> {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".config.json");
    crate::error::write_json(&path.with_file_name(name), cfg)
}

/// Reads back a clip's annotations; used by tests and tooling.
pub fn clip_annotations(dir: &Path) -> Result<Vec<crate::dataset::AnnotationRecord>> {
    load_annotations(&dir.join(ANNOTATION_FILE))
}
