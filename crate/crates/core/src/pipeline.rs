//! Configuration and stage orchestration shared by the command line and the
//! demo. Every stage is a pure function of its inputs and an explicit seed;
//! per-clip stages exchange data through files in a clip directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::animate::{animate_sequence, AnimateConfig, DeformedCloud};
use crate::avatar::{init_avatar, CanonicalAvatar};
use crate::body_model::{normalize_shape, toy, BodyModel, MotionSequence, PoseParams};
use crate::compose::{
    cast_shadow, composite, load_library, load_scene, procedural_scene, shade_directional,
    BackgroundStyle, RelightWeights, SceneAsset, ShadowConfig,
};
use crate::dataset::{
    clip_dir, export_clip, foreground_box, keypoints, split_subjects, AnnotationRecord,
    ClipMetadata, DatasetManifest, Kp3dFrame, SplitRatios,
};
use crate::error::{read_json, write_json};
use crate::guidance::{
    mock_denoiser, optimize_avatar, Denoiser, GuidanceConfig, MockDenoiser, MockMode,
};
use crate::image::Image;
use crate::math::Vec3;
use crate::prompts::{generate_prompts, load_space, PromptTemplate};
use crate::render::{
    rasterize, sample_camera, Camera, CameraSamplerConfig, RasterConfig, RenderOutput,
};
use crate::{rng, Error, Result, FORMAT_VERSION};

pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const ANIMATION_FILE: &str = "animation.json";
pub const RENDER_FILE: &str = "render.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ComposeConfig {
    pub shadow: ShadowConfig,
    /// Directory of backgrounds with sidecars; `None` uses procedural scenes.
    pub background_library: Option<PathBuf>,
    /// Procedural style; `None` picks one from the clip's action.
    pub background_style: Option<BackgroundStyle>,
    pub relight: RelightWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub output_root: PathBuf,
    pub sport: String,
    pub split: SplitRatios,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            output_root: PathBuf::from("dataset"),
            sport: "multi-sport".into(),
            split: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub subjects: usize,
    pub clips_per_subject: usize,
    pub frames: usize,
    /// Square frame side.
    pub resolution: usize,
    pub gaussians: usize,
    pub sds_iterations: usize,
    pub sds_resolution: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            subjects: 3,
            clips_per_subject: 2,
            frames: 30,
            resolution: 256,
            gaussians: 600,
            sds_iterations: 30,
            sds_resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    /// Body model file; `None` uses the bundled toy humanoid.
    pub body_model: Option<PathBuf>,
    /// Attribute space file; `None` uses the bundled lists.
    pub attribute_space: Option<PathBuf>,
    pub camera: CameraSamplerConfig,
    pub guidance: GuidanceConfig,
    pub animate: AnimateConfig,
    pub compose: ComposeConfig,
    pub dataset: DatasetConfig,
    pub demo: DemoConfig,
    pub seed: u64,
    /// Worker count; not echoed since outputs never depend on it.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Checks sub-configs and that every referenced path exists under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        self.camera.validate()?;
        self.guidance.validate()?;
        for (what, p) in [
            ("body model", &self.body_model),
            ("attribute space", &self.attribute_space),
            ("background library", &self.compose.background_library),
        ] {
            if let Some(p) = p {
                let full = root.join(p);
                if !full.exists() {
                    return Err(Error::InvalidArgument(format!(
                        "{what} {} does not exist",
                        full.display()
                    )));
                }
            }
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("threads must be at least 1".into()));
        }
        let d = &self.demo;
        if d.subjects < 2
            || d.clips_per_subject == 0
            || d.frames == 0
            || d.resolution == 0
            || d.gaussians == 0
        {
            return Err(Error::InvalidArgument(
                "demo needs at least 2 subjects and non-zero clips, frames, resolution and gaussians".into(),
            ));
        }
        Ok(())
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(CONFIG_ECHO_FILE), self)
    }
}

pub fn load_body_model(cfg: &PipelineConfig, root: &Path) -> Result<BodyModel> {
    match &cfg.body_model {
        Some(p) => BodyModel::load(&root.join(p)),
        None => Ok(toy::humanoid()),
    }
}

/// Linear RGB for a color word, gray when unknown.
pub fn color_from_name(name: &str) -> [f64; 3] {
    match name {
        "white" => [0.85, 0.85, 0.85],
        "navy" => [0.02, 0.04, 0.25],
        "red" => [0.7, 0.05, 0.04],
        "green" => [0.05, 0.45, 0.08],
        "yellow" => [0.8, 0.65, 0.05],
        "black" => [0.03, 0.03, 0.03],
        "orange" => [0.85, 0.3, 0.03],
        "purple" => [0.3, 0.06, 0.45],
        _ => [0.5, 0.5, 0.5],
    }
}

/// Color-target mock pulling the avatar toward the prompt's clothing color.
pub fn mock_for_prompt(prompt: &PromptTemplate) -> MockDenoiser {
    let color = prompt
        .assignment
        .get("clothing color")
        .map_or([0.5; 3], |c| color_from_name(c));
    mock_denoiser(MockMode::ColorTarget { color, gain: 1.0 })
}

/// Samples a canonical avatar and refines it against `denoiser`.
pub fn build_avatar(
    model: &BodyModel,
    prompt: &PromptTemplate,
    guidance: &GuidanceConfig,
    gaussians: usize,
    denoiser: &mut dyn Denoiser,
    seed: u64,
) -> Result<CanonicalAvatar> {
    let mut avatar = init_avatar(model, gaussians, rng::derive_seed(seed, "avatar-init", 0))?;
    avatar.prompt = Some(prompt.clone());
    let mut refined = optimize_avatar(
        &avatar,
        model,
        denoiser,
        prompt,
        guidance,
        rng::derive_seed(seed, "sds", 0),
    )?;
    refined.prompt = Some(prompt.clone());
    Ok(refined)
}

/// Deformed clouds of one clip, cached between the animate and render stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationCache {
    pub format_version: u32,
    pub clip_id: String,
    pub motion: MotionSequence,
    pub frames: Vec<DeformedCloud>,
}

impl AnimationCache {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(ANIMATION_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(ANIMATION_FILE);
        let cache: AnimationCache = read_json(&path)?;
        if cache.format_version != FORMAT_VERSION {
            return Err(Error::schema(
                &path,
                format!("unsupported format_version {}", cache.format_version),
            ));
        }
        if cache.frames.len() != cache.motion.frames.len() {
            return Err(Error::schema(
                &path,
                "frame count disagrees with the motion",
            ));
        }
        Ok(cache)
    }
}

pub fn animate_clip(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    motion: &MotionSequence,
    cfg: &AnimateConfig,
    clip_id: &str,
) -> Result<AnimationCache> {
    let motion = normalize_shape(motion)?;
    let frames = animate_sequence(avatar, model, &motion, cfg)?;
    Ok(AnimationCache {
        format_version: FORMAT_VERSION,
        clip_id: clip_id.to_string(),
        motion,
        frames,
    })
}

/// One fixed camera per clip, aimed at the subject's mean root position.
pub fn clip_camera(
    camera: &CameraSamplerConfig,
    resolution: usize,
    model: &BodyModel,
    motion: &MotionSequence,
    clip_id: &str,
    seed: u64,
) -> Result<Camera> {
    let n = motion.frames.len().max(1) as f64;
    let mean_t = motion
        .frames
        .iter()
        .fold(Vec3::zeros(), |a, f| a + f.translation)
        / n;
    let target = model.rest_joints.first().copied().unwrap_or_default() + mean_t;
    let mut cfg = camera.clone();
    cfg.fixed_intrinsics = cfg.fixed_intrinsics.resized(resolution, resolution);
    let sample = sample_camera(
        rng::derive_seed(seed, &format!("clip-camera/{clip_id}"), 0),
        &cfg,
        target,
    )?;
    Ok(sample.camera)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSource {
    Procedural { style: BackgroundStyle, seed: u64 },
    Library { path: PathBuf },
}

/// Picks the scene for a clip from the library or a procedural style.
pub fn choose_scene(
    cfg: &ComposeConfig,
    root: &Path,
    action: &str,
    clip_id: &str,
    seed: u64,
) -> Result<SceneSource> {
    let scene_seed = rng::derive_seed(seed, &format!("scene/{clip_id}"), 0);
    match &cfg.background_library {
        Some(dir) => {
            let lib = load_library(&root.join(dir))?;
            if lib.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "background library {} is empty",
                    dir.display()
                )));
            }
            let (name, _) = &lib[(scene_seed % lib.len() as u64) as usize];
            let path = std::fs::read_dir(root.join(dir))
                .map_err(|e| Error::io(root.join(dir), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_stem().and_then(|s| s.to_str()) == Some(name.as_str()))
                .find(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("png") | Some("npy")
                    )
                })
                .expect("library entry has an image");
            Ok(SceneSource::Library {
                path: dir.join(path.file_name().expect("file name")),
            })
        }
        None => Ok(SceneSource::Procedural {
            style: cfg
                .background_style
                .unwrap_or_else(|| BackgroundStyle::for_action(action)),
            seed: scene_seed,
        }),
    }
}

/// Materializes a scene at the camera's resolution.
pub fn resolve_scene(source: &SceneSource, cam: &Camera, root: &Path) -> Result<SceneAsset> {
    match source {
        SceneSource::Procedural { style, seed } => Ok(procedural_scene(*style, cam, *seed)),
        SceneSource::Library { path } => {
            let mut scene = load_scene(&root.join(path))?;
            scene.background = scene.background.resize_bilinear(cam.width, cam.height);
            Ok(scene)
        }
    }
}

/// Camera and scene of a rendered clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderManifest {
    pub format_version: u32,
    pub clip_id: String,
    pub camera: Camera,
    pub scene: SceneSource,
    pub frame_count: usize,
}

impl RenderManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RENDER_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RENDER_FILE);
        let m: RenderManifest = read_json(&path)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::schema(
                &path,
                format!("unsupported format_version {}", m.format_version),
            ));
        }
        Ok(m)
    }
}

/// Shades the cloud under the scene light and rasterizes it.
pub fn render_frame(
    cloud: &DeformedCloud,
    scene: &SceneAsset,
    cam: &Camera,
    raster: &RasterConfig,
) -> Result<RenderOutput> {
    let shaded = shade_directional(cloud, &[scene.light])?;
    rasterize(&shaded.gaussians, cam, raster)
}

/// Shadow pass plus compositing over the scene background, display range.
pub fn compose_frame(
    cloud: &DeformedCloud,
    fg: &RenderOutput,
    scene: &SceneAsset,
    cam: &Camera,
    shadow: &ShadowConfig,
) -> Result<Image> {
    let layer = cast_shadow(cloud, scene, cam, shadow)?;
    composite(fg, &layer.attenuation, &scene.background)
}

/// Annotation for one frame: keypoints from the posed body, box from alpha.
pub fn annotate_frame(
    model: &BodyModel,
    params: &PoseParams,
    alpha: &Image,
    cam: &Camera,
    motion: &MotionSequence,
    clip_id: &str,
    frame_index: usize,
) -> Result<AnnotationRecord> {
    let (kp2d, kp3d) = keypoints(model, params, cam)?;
    let (bbox, foreground_pixels) = foreground_box(alpha)?;
    Ok(AnnotationRecord {
        frame_path: crate::dataset::frame_file(frame_index),
        bbox,
        foreground_pixels,
        kp2d,
        kp3d,
        kp3d_frame: Kp3dFrame::World,
        pose_params: params.clone(),
        action_label: motion.action_label.clone(),
        camera: *cam,
        subject_id: motion.subject_id.clone(),
        clip_id: clip_id.to_string(),
        frame_index,
    })
}

/// Renders, composites and annotates every frame of an animated clip.
pub fn produce_clip(
    model: &BodyModel,
    cache: &AnimationCache,
    scene: &SceneAsset,
    cam: &Camera,
    cfg: &PipelineConfig,
) -> Result<(Vec<Image>, Vec<AnnotationRecord>)> {
    let results: Vec<(Image, AnnotationRecord)> = cache
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, cloud)| {
            let fg = render_frame(cloud, scene, cam, &cfg.guidance.raster)?;
            let frame = compose_frame(cloud, &fg, scene, cam, &cfg.compose.shadow)?;
            let record = annotate_frame(
                model,
                &cache.motion.frames[i],
                &fg.alpha,
                cam,
                &cache.motion,
                &cache.clip_id,
                i,
            )?;
            Ok((frame, record))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

/// One clip of the demo: who, doing what.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipPlan {
    pub clip_id: String,
    pub subject_index: usize,
    pub subject_id: String,
    pub action: String,
}

pub fn demo_plan(demo: &DemoConfig) -> Vec<ClipPlan> {
    let mut plan = Vec::new();
    for s in 0..demo.subjects {
        for c in 0..demo.clips_per_subject {
            let action = toy::ACTIONS[(s + c) % toy::ACTIONS.len()];
            plan.push(ClipPlan {
                clip_id: format!("subject{s:02}_{action}_{c:02}"),
                subject_index: s,
                subject_id: format!("subject{s:02}"),
                action: action.to_string(),
            });
        }
    }
    plan
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSummary {
    pub manifest: DatasetManifest,
    pub avatars: Vec<CanonicalAvatar>,
}

/// Guidance settings for the demo's short avatar refinement.
pub fn demo_guidance(cfg: &PipelineConfig) -> GuidanceConfig {
    let mut g = cfg.guidance.clone();
    g.iterations = cfg.demo.sds_iterations;
    g.resolution = cfg.demo.sds_resolution;
    g.batch = 1;
    g
}

/// End-to-end mini dataset from the bundled humanoid and procedural motions:
/// prompts, avatars, animation, rendering, compositing, split and export.
pub fn run_demo(cfg: &PipelineConfig, root: &Path, out: &Path) -> Result<DemoSummary> {
    cfg.validate(root)?;
    let model = toy::humanoid();
    let space = load_space(
        cfg.attribute_space
            .as_ref()
            .map(|p| root.join(p))
            .as_deref(),
    )?;
    let demo = &cfg.demo;
    let prompts = generate_prompts(
        &space,
        demo.subjects,
        "sports",
        None,
        rng::derive_seed(cfg.seed, "prompts", 0),
    )?;
    let guidance = demo_guidance(cfg);
    let avatars: Vec<CanonicalAvatar> = prompts
        .par_iter()
        .enumerate()
        .map(|(s, prompt)| {
            let mut denoiser = mock_for_prompt(prompt);
            let seed = rng::derive_seed(cfg.seed, "subject", s as u64);
            build_avatar(
                &model,
                prompt,
                &guidance,
                demo.gaussians,
                &mut denoiser,
                seed,
            )
        })
        .collect::<Result<_>>()?;

    let plan = demo_plan(demo);
    let k = model.num_joints();
    let metas: Vec<ClipMetadata> = plan
        .iter()
        .map(|p| ClipMetadata {
            clip_id: p.clip_id.clone(),
            subject_id: p.subject_id.clone(),
            action_label: p.action.clone(),
            frame_count: demo.frames,
            keypoint_count: k,
        })
        .collect();
    let manifest = split_subjects(&cfg.dataset.sport, &metas, &cfg.dataset.split, cfg.seed)?;

    let exported: Vec<ClipMetadata> = plan
        .par_iter()
        .map(|p| {
            let motion_seed = rng::derive_seed(cfg.seed, &format!("motion/{}", p.clip_id), 0);
            let motion = toy::humanoid_motion(&p.action, &p.subject_id, demo.frames, motion_seed);
            let cache = animate_clip(
                &avatars[p.subject_index],
                &model,
                &motion,
                &cfg.animate,
                &p.clip_id,
            )?;
            let cam = clip_camera(
                &cfg.camera,
                demo.resolution,
                &model,
                &cache.motion,
                &p.clip_id,
                cfg.seed,
            )?;
            let source = choose_scene(&cfg.compose, root, &p.action, &p.clip_id, cfg.seed)?;
            let scene = resolve_scene(&source, &cam, root)?;
            let (frames, records) = produce_clip(&model, &cache, &scene, &cam, cfg)?;
            let split = manifest
                .splits
                .split_of(&p.clip_id)
                .expect("every planned clip is assigned a split");
            export_clip(
                &frames,
                &records,
                &clip_dir(out, split, &p.clip_id),
                &p.clip_id,
                k,
            )
        })
        .collect::<Result<_>>()?;
    if exported != metas {
        return Err(Error::InvalidArgument(
            "exported clips disagree with the plan".into(),
        ));
    }
    manifest.save(out)?;
    cfg.echo(out)?;
    Ok(DemoSummary { manifest, avatars })
}
