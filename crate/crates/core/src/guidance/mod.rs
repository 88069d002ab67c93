//! Dual-branch score distillation: RGB and depth renders are pushed along the
//! residual between a denoiser's noise prediction and the injected noise.

mod denoiser;
pub mod external;
mod pose_map;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::avatar::{binding_position, densify_and_prune, rebind, CanonicalAvatar, DensifyConfig};
use crate::body_model::{regress_joints, BodyModel};
use crate::image::Image;
use crate::math::{quat_normalize, Vec3};
use crate::prompts::PromptTemplate;
use crate::render::{
    rasterize, rasterize_backward, sample_camera, CameraSamplerConfig, CloudGradients,
    RasterConfig, ScreenStats,
};
use crate::{rng, Error, Result};

pub use denoiser::{
    add_noise, mock_denoiser, DenoiseRequest, Denoiser, MockDenoiser, MockMode, NoisePrediction,
};
pub use external::ExternalDenoiser;
pub use pose_map::{draw_pose_map, joint_color};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseWeight {
    /// `w_t = 1`.
    Constant,
    /// `w_t = 1 − ᾱ_t`.
    OneMinusAlphaBar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Position,
    Rotation,
    LogScale,
    OpacityLogit,
    Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 2e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity_logit: 5e-2,
            color: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    /// Inclusive timestep range, 1-based.
    pub t_range: [u32; 2],
    pub num_train_timesteps: u32,
    pub noise_weight: NoiseWeight,
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub frozen: Vec<ParamGroup>,
    /// Square render side used during optimization.
    pub resolution: usize,
    pub batch: usize,
    pub camera: CameraSamplerConfig,
    pub raster: RasterConfig,
    pub densify: DensifyConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_rgb: 0.5,
            lambda_depth: 0.5,
            t_range: [20, 980],
            num_train_timesteps: 1000,
            noise_weight: NoiseWeight::Constant,
            iterations: 3600,
            learning_rates: LearningRates::default(),
            frozen: Vec::new(),
            resolution: 1024,
            batch: 8,
            camera: CameraSamplerConfig::default(),
            raster: RasterConfig::default(),
            densify: DensifyConfig::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda_rgb >= 0.0 && self.lambda_depth >= 0.0)
            || !self.lambda_rgb.is_finite()
            || !self.lambda_depth.is_finite()
        {
            return bad("branch weights must be finite and non-negative".into());
        }
        let [lo, hi] = self.t_range;
        if !(1 <= lo && lo <= hi && hi <= self.num_train_timesteps) {
            return bad(format!(
                "t_range {:?} must satisfy 1 <= t_min <= t_max <= {}",
                self.t_range, self.num_train_timesteps
            ));
        }
        if self.resolution < 8 {
            return bad(format!("resolution {} is below 8", self.resolution));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        self.camera.validate()
    }

    /// `ᾱ_t` of the linear schedule `β ∈ [1e-4, 0.02]` over the training steps.
    pub fn alpha_bar(&self, t: u32) -> f64 {
        let n = self.num_train_timesteps.max(2) as f64;
        (1..=t).fold(1.0, |acc, s| {
            let beta = 1e-4 + (0.02 - 1e-4) * (s as f64 - 1.0) / (n - 1.0);
            acc * (1.0 - beta)
        })
    }

    pub fn weight(&self, t: u32) -> f64 {
        match self.noise_weight {
            NoiseWeight::Constant => 1.0,
            NoiseWeight::OneMinusAlphaBar => 1.0 - self.alpha_bar(t),
        }
    }

    fn is_frozen(&self, g: ParamGroup) -> bool {
        self.frozen.contains(&g)
    }
}

fn branch_gradient(lambda: f64, w: f64, eps: &Image, noise: &Image) -> Image {
    if lambda == 0.0 {
        return Image::new(noise.width, noise.height, noise.channels);
    }
    let s = lambda * w;
    let data = eps
        .data
        .iter()
        .zip(&noise.data)
        .map(|(e, n)| s * (e - n))
        .collect();
    Image {
        data,
        ..noise.clone()
    }
}

/// Per-pixel SDS gradients `λ·w_t·(ε̂ − ε)` for both branches.
#[allow(clippy::too_many_arguments)]
pub fn sds_pixel_gradients(
    denoiser: &mut dyn Denoiser,
    rgb: &Image,
    depth: &Image,
    pose_map: &Image,
    prompt: &PromptTemplate,
    t: u32,
    noise_rgb: &Image,
    noise_depth: &Image,
    cfg: &GuidanceConfig,
) -> Result<(Image, Image)> {
    rgb.ensure_shape(noise_rgb, "rgb noise")?;
    depth.ensure_shape(noise_depth, "depth noise")?;
    if (depth.width, depth.height) != (rgb.width, rgb.height)
        || (pose_map.width, pose_map.height) != (rgb.width, rgb.height)
    {
        return Err(Error::Dimension(
            "rgb, depth and pose map resolutions differ".into(),
        ));
    }
    if t < cfg.t_range[0] || t > cfg.t_range[1] {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside {:?}",
            cfg.t_range
        )));
    }
    let req = DenoiseRequest {
        rgb,
        depth,
        noise_rgb,
        noise_depth,
        t,
        alpha_bar: cfg.alpha_bar(t),
        pose_map,
        prompt,
    };
    let pred = denoiser.predict_noise(&req)?;
    pred.eps_rgb.ensure_shape(rgb, "predicted rgb noise")?;
    pred.eps_depth
        .ensure_shape(depth, "predicted depth noise")?;
    let w = cfg.weight(t);
    Ok((
        branch_gradient(cfg.lambda_rgb, w, &pred.eps_rgb, noise_rgb),
        branch_gradient(cfg.lambda_depth, w, &pred.eps_depth, noise_depth),
    ))
}

/// Min-max normalization of blended depth over covered pixels. The bounds are
/// treated as constants when differentiating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthNormalization {
    pub lo: f64,
    pub hi: f64,
}

impl DepthNormalization {
    pub fn fit(depth: &Image, alpha: &Image) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (d, a) in depth.data.iter().zip(&alpha.data) {
            if *a > 0.0 {
                lo = lo.min(*d);
                hi = hi.max(*d);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        DepthNormalization { lo, hi }
    }

    fn span(&self) -> f64 {
        if self.hi > self.lo {
            self.hi - self.lo
        } else {
            1.0
        }
    }

    /// Covered pixels mapped to `[0, 1]`, uncovered pixels to 0.
    pub fn apply(&self, depth: &Image, alpha: &Image) -> Image {
        let span = self.span();
        let data = depth
            .data
            .iter()
            .zip(&alpha.data)
            .map(|(d, a)| if *a > 0.0 { (d - self.lo) / span } else { 0.0 })
            .collect();
        Image {
            data,
            ..depth.clone()
        }
    }

    /// Chain rule back to raw blended depth.
    pub fn backward(&self, grad: &Image, alpha: &Image) -> Image {
        let span = self.span();
        let data = grad
            .data
            .iter()
            .zip(&alpha.data)
            .map(|(g, a)| if *a > 0.0 { g / span } else { 0.0 })
            .collect();
        Image {
            data,
            ..grad.clone()
        }
    }
}

/// Diagnostics emitted once per optimization iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub timestep: u32,
    /// Alpha-normalized mean color of the first render of the iteration.
    pub mean_color: Vec3,
    pub num_gaussians: usize,
}

/// Coverage-weighted mean color `Σ rgb / Σ α`; zero for an empty render.
pub fn mean_render_color(rgb: &Image, alpha: &Image) -> Vec3 {
    let total: f64 = alpha.data.iter().sum();
    if total <= 0.0 {
        return Vec3::zeros();
    }
    let mut sum = Vec3::zeros();
    for px in rgb.data.chunks_exact(3) {
        sum += Vec3::new(px[0], px[1], px[2]);
    }
    sum / total
}

fn accumulate(total: &mut CloudGradients, g: &CloudGradients) {
    for i in 0..total.len() {
        total.position[i] += g.position[i];
        for k in 0..4 {
            total.rotation[i][k] += g.rotation[i][k];
        }
        total.log_scale[i] += g.log_scale[i];
        total.opacity_logit[i] += g.opacity_logit[i];
        total.color[i] += g.color[i];
    }
}

fn apply_step(
    avatar: &mut CanonicalAvatar,
    model: &BodyModel,
    g: &CloudGradients,
    cfg: &GuidanceConfig,
) {
    let lr = &cfg.learning_rates;
    let inv_batch = 1.0 / cfg.batch as f64;
    for i in 0..avatar.len() {
        let gauss = &mut avatar.gaussians[i];
        if !cfg.is_frozen(ParamGroup::Position) && g.position[i] != Vec3::zeros() {
            let moved = gauss.position - g.position[i] * (lr.position * inv_batch);
            if moved != gauss.position {
                // stay attached to the bound face
                let b = rebind(
                    &model.faces,
                    &model.template_vertices,
                    avatar.bindings[i].face,
                    &moved,
                );
                gauss.position = binding_position(&model.faces, &model.template_vertices, &b);
                avatar.bindings[i] = b;
            }
        }
        if !cfg.is_frozen(ParamGroup::Rotation) && g.rotation[i] != [0.0; 4] {
            let q: [f64; 4] = std::array::from_fn(|k| {
                gauss.rotation[k] - lr.rotation * inv_batch * g.rotation[i][k]
            });
            gauss.rotation = quat_normalize(&q);
        }
        if !cfg.is_frozen(ParamGroup::LogScale) {
            gauss.log_scale -= g.log_scale[i] * (lr.log_scale * inv_batch);
        }
        if !cfg.is_frozen(ParamGroup::OpacityLogit) {
            gauss.opacity_logit -= g.opacity_logit[i] * (lr.opacity_logit * inv_batch);
        }
        if !cfg.is_frozen(ParamGroup::Color) {
            gauss.color -= g.color[i] * (lr.color * inv_batch);
            gauss.color = gauss.color.map(|c| c.clamp(0.0, 1.0));
        }
    }
}

/// [`optimize_avatar_observed`] without a progress callback.
pub fn optimize_avatar(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    denoiser: &mut dyn Denoiser,
    prompt: &PromptTemplate,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<CanonicalAvatar> {
    optimize_avatar_observed(avatar, model, denoiser, prompt, cfg, seed, &mut |_| {})
}

/// Refines the avatar in its canonical pose by gradient descent on the SDS
/// objective, densifying and pruning on the configured schedule.
pub fn optimize_avatar_observed(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    denoiser: &mut dyn Denoiser,
    prompt: &PromptTemplate,
    cfg: &GuidanceConfig,
    seed: u64,
    observer: &mut dyn FnMut(&IterationReport),
) -> Result<CanonicalAvatar> {
    cfg.validate()?;
    avatar.validate(model)?;
    let mut avatar = avatar.clone();
    if cfg.iterations == 0 {
        return Ok(avatar);
    }
    let joints = regress_joints(model, &model.template_vertices)?;
    let pelvis = joints[0];
    let camera_cfg = CameraSamplerConfig {
        fixed_intrinsics: cfg
            .camera
            .fixed_intrinsics
            .resized(cfg.resolution, cfg.resolution),
        ..cfg.camera.clone()
    };
    let mut stats = ScreenStats::new(avatar.len());

    for iter in 1..=cfg.iterations {
        let mut total = CloudGradients::zeros(avatar.len());
        let mut report = None;
        for b in 0..cfg.batch {
            let draw = (iter * cfg.batch + b) as u64;
            let cam = sample_camera(
                rng::derive_seed(seed, "sds-camera", draw),
                &camera_cfg,
                pelvis,
            )?
            .camera;
            let render = rasterize(&avatar.gaussians, &cam, &cfg.raster)?;
            let mut r = rng::stream(seed, "sds-noise", draw);
            let t = r.random_range(cfg.t_range[0]..=cfg.t_range[1]);
            let mut normal = |c: usize| {
                let data = (0..cam.width * cam.height * c)
                    .map(|_| r.sample(StandardNormal))
                    .collect();
                Image::from_data(cam.width, cam.height, c, data)
            };
            let noise_rgb = normal(3)?;
            let noise_depth = normal(1)?;
            let norm = DepthNormalization::fit(&render.depth, &render.alpha);
            let depth_n = norm.apply(&render.depth, &render.alpha);
            let pose_map = draw_pose_map(model, &joints, &cam)?;
            if report.is_none() {
                report = Some(IterationReport {
                    iteration: iter,
                    timestep: t,
                    mean_color: mean_render_color(&render.rgb, &render.alpha),
                    num_gaussians: avatar.len(),
                });
            }
            let (g_rgb, g_depth_n) = sds_pixel_gradients(
                denoiser,
                &render.rgb,
                &depth_n,
                &pose_map,
                prompt,
                t,
                &noise_rgb,
                &noise_depth,
                cfg,
            )?;
            let g_depth = norm.backward(&g_depth_n, &render.alpha);
            let g_alpha = Image::new(cam.width, cam.height, 1);
            let grads = rasterize_backward(
                &avatar.gaussians,
                &cam,
                &cfg.raster,
                &g_rgb,
                &g_depth,
                &g_alpha,
            )?;
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter gradient at iteration {iter}, batch item {b}, timestep {t}"
                )));
            }
            stats.accumulate(&render.screen_stats.visible, &grads, cam.width, cam.height);
            accumulate(&mut total, &grads);
        }
        apply_step(&mut avatar, model, &total, cfg);
        if let Some(r) = &report {
            observer(r);
        }
        if cfg.densify.is_active(iter) {
            avatar = densify_and_prune(&avatar, model, &stats.mean_grad(), iter, &cfg.densify)?;
            stats = ScreenStats::new(avatar.len());
        }
    }
    Ok(avatar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::init_avatar;
    use crate::body_model::toy;

    fn images(w: usize, h: usize) -> (Image, Image, Image, Image, Image) {
        let rgb = Image::filled(w, h, 3, 0.5);
        let depth = Image::filled(w, h, 1, 0.3);
        let nr = Image::from_data(
            w,
            h,
            3,
            (0..w * h * 3).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let nd = Image::from_data(
            w,
            h,
            1,
            (0..w * h).map(|i| (i as f64 * 1.3).cos()).collect(),
        )
        .unwrap();
        (rgb, depth, nr, nd, Image::new(w, h, 3))
    }

    #[test]
    fn perfect_denoiser_gives_zero_pixel_gradients() {
        let (rgb, depth, nr, nd, pose) = images(8, 8);
        let cfg = GuidanceConfig::default();
        let mut d = mock_denoiser(MockMode::Perfect);
        let (gr, gd) = sds_pixel_gradients(
            &mut d,
            &rgb,
            &depth,
            &pose,
            &PromptTemplate::default(),
            500,
            &nr,
            &nd,
            &cfg,
        )
        .unwrap();
        assert!(gr.data.iter().all(|&v| v == 0.0));
        assert!(gd.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_depth_weight_zeroes_depth_branch() {
        let (rgb, depth, nr, nd, pose) = images(8, 8);
        let cfg = GuidanceConfig {
            lambda_depth: 0.0,
            ..Default::default()
        };
        let mut d = mock_denoiser(MockMode::ConstantBias { bias: 3.0 });
        let (_, gd) = sds_pixel_gradients(
            &mut d,
            &rgb,
            &depth,
            &pose,
            &PromptTemplate::default(),
            500,
            &nr,
            &nd,
            &cfg,
        )
        .unwrap();
        assert!(gd.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_bias_closed_form() {
        let (rgb, depth, nr, nd, pose) = images(6, 5);
        let cfg = GuidanceConfig {
            lambda_rgb: 0.7,
            noise_weight: NoiseWeight::OneMinusAlphaBar,
            ..Default::default()
        };
        let mut d = mock_denoiser(MockMode::ConstantBias { bias: 0.25 });
        let t = 300;
        let (gr, _) = sds_pixel_gradients(
            &mut d,
            &rgb,
            &depth,
            &pose,
            &PromptTemplate::default(),
            t,
            &nr,
            &nd,
            &cfg,
        )
        .unwrap();
        let expect = 0.7 * cfg.weight(t) * 0.25;
        assert!(gr.data.iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn doubling_lambda_doubles_gradient_exactly() {
        let (rgb, depth, nr, nd, pose) = images(6, 5);
        let mode = MockMode::ColorTarget {
            color: [0.9, 0.1, 0.3],
            gain: 0.8,
        };
        let base = GuidanceConfig::default();
        let doubled = GuidanceConfig {
            lambda_rgb: 2.0 * base.lambda_rgb,
            lambda_depth: 2.0 * base.lambda_depth,
            ..Default::default()
        };
        let p = PromptTemplate::default();
        let (a, ad) = sds_pixel_gradients(
            &mut mock_denoiser(mode.clone()),
            &rgb,
            &depth,
            &pose,
            &p,
            77,
            &nr,
            &nd,
            &base,
        )
        .unwrap();
        let (b, bd) = sds_pixel_gradients(
            &mut mock_denoiser(mode),
            &rgb,
            &depth,
            &pose,
            &p,
            77,
            &nr,
            &nd,
            &doubled,
        )
        .unwrap();
        assert_eq!(a.map(|v| 2.0 * v), b);
        assert_eq!(ad.map(|v| 2.0 * v), bd);
    }

    #[test]
    fn timestep_and_shape_errors() {
        let (rgb, depth, nr, nd, pose) = images(4, 4);
        let cfg = GuidanceConfig::default();
        let p = PromptTemplate::default();
        let mut d = mock_denoiser(MockMode::Perfect);
        assert!(sds_pixel_gradients(&mut d, &rgb, &depth, &pose, &p, 5, &nr, &nd, &cfg).is_err());
        let small = Image::new(3, 4, 1);
        assert!(sds_pixel_gradients(&mut d, &rgb, &small, &pose, &p, 500, &nr, &nd, &cfg).is_err());
    }

    #[test]
    fn alpha_bar_is_decreasing() {
        let cfg = GuidanceConfig::default();
        assert!((cfg.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        let mut prev = 1.0;
        for t in (1..=1000).step_by(37) {
            let a = cfg.alpha_bar(t);
            assert!(a < prev && a > 0.0);
            prev = a;
        }
    }

    #[test]
    fn depth_normalization_spans_unit_interval() {
        let depth = Image::from_data(3, 1, 1, vec![2.0, 4.0, 9.0]).unwrap();
        let alpha = Image::from_data(3, 1, 1, vec![1.0, 0.5, 0.0]).unwrap();
        let n = DepthNormalization::fit(&depth, &alpha);
        assert_eq!((n.lo, n.hi), (2.0, 4.0));
        assert_eq!(n.apply(&depth, &alpha).data, vec![0.0, 1.0, 0.0]);
        assert_eq!(
            n.backward(&Image::filled(3, 1, 1, 1.0), &alpha).data,
            vec![0.5, 0.5, 0.0]
        );
    }

    fn small_cfg(iterations: usize) -> GuidanceConfig {
        GuidanceConfig {
            iterations,
            resolution: 16,
            batch: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let model = toy::humanoid();
        let av = init_avatar(&model, 40, 2).unwrap();
        let mut d = mock_denoiser(MockMode::ConstantBias { bias: 1.0 });
        let out = optimize_avatar(
            &av,
            &model,
            &mut d,
            &PromptTemplate::default(),
            &small_cfg(0),
            1,
        )
        .unwrap();
        assert_eq!(out, av);
    }

    #[test]
    fn perfect_denoiser_is_a_fixed_point() {
        let model = toy::humanoid();
        let av = init_avatar(&model, 40, 2).unwrap();
        let mut d = mock_denoiser(MockMode::Perfect);
        let out = optimize_avatar(
            &av,
            &model,
            &mut d,
            &PromptTemplate::default(),
            &small_cfg(5),
            1,
        )
        .unwrap();
        assert_eq!(out, av);
    }

    #[test]
    fn optimization_is_deterministic() {
        let model = toy::humanoid();
        let av = init_avatar(&model, 40, 2).unwrap();
        let mode = MockMode::ColorTarget {
            color: [1.0, 0.0, 0.0],
            gain: 1.0,
        };
        let run = || {
            let mut d = mock_denoiser(mode.clone());
            optimize_avatar(
                &av,
                &model,
                &mut d,
                &PromptTemplate::default(),
                &small_cfg(4),
                9,
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_ne!(a, av);
        a.validate(&model).unwrap();
        assert!(a.binding_error(&model) < 1e-5);
    }

    #[test]
    fn albedo_stays_in_unit_interval() {
        let model = toy::humanoid();
        let av = init_avatar(&model, 40, 2).unwrap();
        let mode = MockMode::ColorTarget {
            color: [3.0, -2.0, 0.5],
            gain: 50.0,
        };
        let out = optimize_avatar(
            &av,
            &model,
            &mut mock_denoiser(mode),
            &PromptTemplate::default(),
            &small_cfg(3),
            4,
        )
        .unwrap();
        assert!(out
            .gaussians
            .iter()
            .all(|g| g.color.iter().all(|c| (0.0..=1.0).contains(c))));
        assert!(out
            .gaussians
            .iter()
            .any(|g| g.color.x == 1.0 && g.color.y == 0.0));
    }

    #[test]
    fn guidance_config_json_defaults() {
        let cfg: GuidanceConfig =
            serde_json::from_str(r#"{"iterations": 5, "frozen": ["position"]}"#).unwrap();
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.lambda_rgb, 0.5);
        assert!(cfg.is_frozen(ParamGroup::Position));
    }
}
