use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::math::Vec3;
use crate::prompts::PromptTemplate;
use crate::{Error, Result};

/// Everything a noise predictor may look at for one SDS step.
///
/// Images are used directly as latents. A diffusion backbone consumes the
/// noised latents from [`DenoiseRequest::noised_rgb`]; the clean renders and
/// the injected noise are exposed as well so that mocks can be exact.
pub struct DenoiseRequest<'a> {
    pub rgb: &'a Image,
    pub depth: &'a Image,
    pub noise_rgb: &'a Image,
    pub noise_depth: &'a Image,
    pub t: u32,
    pub alpha_bar: f64,
    pub pose_map: &'a Image,
    pub prompt: &'a PromptTemplate,
}

/// `√ᾱ·x + √(1−ᾱ)·ε`.
pub fn add_noise(clean: &Image, noise: &Image, alpha_bar: f64) -> Image {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = clean
        .data
        .iter()
        .zip(&noise.data)
        .map(|(x, e)| a * x + b * e)
        .collect();
    Image {
        data,
        ..clean.clone()
    }
}

impl DenoiseRequest<'_> {
    pub fn noised_rgb(&self) -> Image {
        add_noise(self.rgb, self.noise_rgb, self.alpha_bar)
    }

    pub fn noised_depth(&self) -> Image {
        add_noise(self.depth, self.noise_depth, self.alpha_bar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePrediction {
    pub eps_rgb: Image,
    pub eps_depth: Image,
}

/// Noise predictor conditioned on a pose map and a prompt.
pub trait Denoiser {
    fn predict_noise(&mut self, req: &DenoiseRequest<'_>) -> Result<NoisePrediction>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MockMode {
    /// Returns the injected noise.
    Perfect,
    /// Injected noise plus a constant on every channel of both branches.
    ConstantBias { bias: f64 },
    /// Injected noise plus `gain·(render − color)` on the RGB branch, so the
    /// SDS gradient pulls renders toward `color`. Depth gets the bare noise.
    ColorTarget { color: [f64; 3], gain: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MockDenoiser {
    pub mode: MockMode,
}

pub fn mock_denoiser(mode: MockMode) -> MockDenoiser {
    MockDenoiser { mode }
}

impl Denoiser for MockDenoiser {
    fn predict_noise(&mut self, req: &DenoiseRequest<'_>) -> Result<NoisePrediction> {
        match &self.mode {
            MockMode::Perfect => Ok(NoisePrediction {
                eps_rgb: req.noise_rgb.clone(),
                eps_depth: req.noise_depth.clone(),
            }),
            MockMode::ConstantBias { bias } => Ok(NoisePrediction {
                eps_rgb: req.noise_rgb.map(|e| e + bias),
                eps_depth: req.noise_depth.map(|e| e + bias),
            }),
            MockMode::ColorTarget { color, gain } => {
                req.rgb.ensure_shape(req.noise_rgb, "rgb noise")?;
                if req.rgb.channels != 3 {
                    return Err(Error::Dimension(
                        "color target needs a 3-channel render".into(),
                    ));
                }
                let target = Vec3::from(*color);
                let mut eps = req.noise_rgb.clone();
                for (i, e) in eps.data.iter_mut().enumerate() {
                    *e += gain * (req.rgb.data[i] - target[i % 3]);
                }
                Ok(NoisePrediction {
                    eps_rgb: eps,
                    eps_depth: req.noise_depth.clone(),
                })
            }
        }
    }
}
