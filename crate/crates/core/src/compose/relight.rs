//! Relight consistency objective for a pluggable relighting model.
//!
//! With `ε` the injected noise, `E` the encoder and `δ` the noise predictor:
//!
//! ```text
//! L = λ_v ‖ε − δ(E(I_L)_t, L, t, E(I_d))‖² + λ_ic ‖M ⊙ (E(I_{L1+L2}) − δ_mix(E(I_L1), E(I_L2)))‖²
//! ```
//!
//! `I_{L1+L2}` is the appearance under both lights at once and `δ_mix` is the
//! model's estimate of that latent from the two single-light latents. Norms
//! are plain sums of squares.

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

use super::Light;

pub trait RelightModel {
    fn encode(&self, image: &Image) -> Result<Image>;

    /// Noise prediction for a noised appearance latent under `light`.
    fn predict(
        &mut self,
        noised: &Image,
        light: &[Light],
        t: u32,
        degradation: &Image,
    ) -> Result<Image>;

    /// Latent of the mixed-light appearance from the single-light latents.
    /// Light transport is additive, so the default is their sum.
    fn predict_mixture(&mut self, latent_l1: &Image, latent_l2: &Image, _t: u32) -> Result<Image> {
        latent_l1.ensure_shape(latent_l2, "second light latent")?;
        let data = latent_l1
            .data
            .iter()
            .zip(&latent_l2.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Image {
            data,
            ..latent_l1.clone()
        })
    }
}

/// Identity encoder whose noise prediction is a stored noise plus a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MockRelight {
    pub noise: Image,
    pub bias: f64,
}

impl RelightModel for MockRelight {
    fn encode(&self, image: &Image) -> Result<Image> {
        Ok(image.clone())
    }

    fn predict(
        &mut self,
        noised: &Image,
        _light: &[Light],
        _t: u32,
        _degradation: &Image,
    ) -> Result<Image> {
        noised.ensure_shape(&self.noise, "stored noise")?;
        Ok(self.noise.map(|e| e + self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelightBatch {
    /// `I_L`, the appearance under `light`.
    pub appearance: Image,
    pub light: Vec<Light>,
    /// `I_d`.
    pub degradation: Image,
    /// Binary foreground mask, H×W×1.
    pub mask: Image,
    pub image_l1: Image,
    pub image_l2: Image,
    /// Appearance under `L1` and `L2` together.
    pub image_combined: Image,
    pub t: u32,
    pub alpha_bar: f64,
    /// `ε`, shaped like the appearance latent.
    pub noise: Image,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelightLossTerms {
    pub appearance: f64,
    pub consistency: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelightWeights {
    pub lambda_v: f64,
    pub lambda_ic: f64,
}

impl Default for RelightWeights {
    fn default() -> Self {
        RelightWeights {
            lambda_v: 1.0,
            lambda_ic: 0.1,
        }
    }
}

fn masked_sq_norm(diff: &[f64], latent: &Image, mask: &Image) -> Result<f64> {
    if (mask.width, mask.height, mask.channels) != (latent.width, latent.height, 1) {
        return Err(Error::Dimension(format!(
            "mask is {}x{}x{}, latent is {}x{}",
            mask.width, mask.height, mask.channels, latent.width, latent.height
        )));
    }
    let c = latent.channels;
    Ok(diff
        .iter()
        .enumerate()
        .map(|(i, d)| mask.data[i / c] * d * d)
        .sum())
}

pub fn relight_consistency_loss(
    model: &mut dyn RelightModel,
    batch: &RelightBatch,
    weights: &RelightWeights,
) -> Result<RelightLossTerms> {
    let RelightWeights {
        lambda_v,
        lambda_ic,
    } = *weights;
    if batch.mask.data.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument("relight mask must be binary".into()));
    }
    let z = model.encode(&batch.appearance)?;
    z.ensure_shape(&batch.noise, "noise")?;
    let (a, b) = (batch.alpha_bar.sqrt(), (1.0 - batch.alpha_bar).sqrt());
    let noised = Image {
        data: z
            .data
            .iter()
            .zip(&batch.noise.data)
            .map(|(x, e)| a * x + b * e)
            .collect(),
        ..z.clone()
    };
    let zd = model.encode(&batch.degradation)?;
    let pred = model.predict(&noised, &batch.light, batch.t, &zd)?;
    pred.ensure_shape(&batch.noise, "noise prediction")?;
    let appearance: f64 = batch
        .noise
        .data
        .iter()
        .zip(&pred.data)
        .map(|(e, p)| (e - p).powi(2))
        .sum();

    let consistency = if lambda_ic == 0.0 {
        0.0
    } else {
        let z1 = model.encode(&batch.image_l1)?;
        let z2 = model.encode(&batch.image_l2)?;
        let z12 = model.encode(&batch.image_combined)?;
        let mix = model.predict_mixture(&z1, &z2, batch.t)?;
        mix.ensure_shape(&z12, "mixed-light latent")?;
        let diff: Vec<f64> = z12.data.iter().zip(&mix.data).map(|(x, y)| x - y).collect();
        masked_sq_norm(&diff, &z12, &batch.mask)?
    };
    Ok(RelightLossTerms {
        appearance,
        consistency,
        total: lambda_v * appearance + lambda_ic * consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    fn batch(combined_offset: f64, mask: f64) -> RelightBatch {
        let (w, h) = (5, 4);
        let l1 = Image::from_data(
            w,
            h,
            3,
            (0..60).map(|i| (i as f64 * 0.1).sin().abs()).collect(),
        )
        .unwrap();
        let l2 = Image::from_data(
            w,
            h,
            3,
            (0..60).map(|i| (i as f64 * 0.2).cos().abs()).collect(),
        )
        .unwrap();
        let combined = Image {
            data: l1
                .data
                .iter()
                .zip(&l2.data)
                .map(|(a, b)| a + b + combined_offset)
                .collect(),
            ..l1.clone()
        };
        RelightBatch {
            appearance: l1.clone(),
            light: vec![Light {
                direction: -Vec3::y(),
                intensity: 1.0,
                ambient: 0.1,
            }],
            degradation: Image::filled(w, h, 3, 0.3),
            mask: Image::filled(w, h, 1, mask),
            image_l1: l1,
            image_l2: l2,
            image_combined: combined,
            t: 200,
            alpha_bar: 0.7,
            noise: Image::from_data(w, h, 3, (0..60).map(|i| (i as f64).sin()).collect()).unwrap(),
        }
    }

    #[test]
    fn default_weights() {
        let w = RelightWeights::default();
        assert_eq!((w.lambda_v, w.lambda_ic), (1.0, 0.1));
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let b = batch(0.0, 1.0);
        let mut m = MockRelight {
            noise: b.noise.clone(),
            bias: 0.0,
        };
        let loss = relight_consistency_loss(&mut m, &b, &RelightWeights::default()).unwrap();
        assert_eq!(loss.appearance, 0.0);
        assert!(loss.consistency < 1e-24);
    }

    #[test]
    fn constant_residual_closed_form() {
        let b = batch(0.0, 1.0);
        let c = 0.3;
        let mut m = MockRelight {
            noise: b.noise.clone(),
            bias: c,
        };
        let loss = relight_consistency_loss(
            &mut m,
            &b,
            &RelightWeights {
                lambda_v: 1.0,
                lambda_ic: 0.0,
            },
        )
        .unwrap();
        assert!((loss.total - c * c * 60.0).abs() < 1e-9);
    }

    #[test]
    fn zero_mask_removes_consistency_term() {
        let b = batch(5.0, 0.0);
        let mut m = MockRelight {
            noise: b.noise.clone(),
            bias: 0.0,
        };
        let loss = relight_consistency_loss(&mut m, &b, &RelightWeights::default()).unwrap();
        assert_eq!(loss.consistency, 0.0);
        let b = batch(5.0, 1.0);
        let loss = relight_consistency_loss(&mut m, &b, &RelightWeights::default()).unwrap();
        assert!((loss.consistency - 25.0 * 60.0).abs() < 1e-9);
    }

    #[test]
    fn non_binary_mask_and_shape_errors() {
        let mut b = batch(0.0, 0.5);
        let mut m = MockRelight {
            noise: b.noise.clone(),
            bias: 0.0,
        };
        assert!(relight_consistency_loss(&mut m, &b, &RelightWeights::default()).is_err());
        b.mask = Image::filled(3, 3, 1, 1.0);
        assert!(relight_consistency_loss(&mut m, &b, &RelightWeights::default()).is_err());
    }
}
