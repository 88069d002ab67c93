use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::math::{quat_normalize, quat_to_matrix};
use crate::{Error, Result};

use super::{binding_position, rebind, CanonicalAvatar, Gaussian, SurfaceBinding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean screen-space positional gradient above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Gaussians below this opacity are pruned.
    pub opacity_threshold: f64,
    /// Split-vs-clone boundary as a fraction of the body bounding-box diagonal.
    pub split_scale_fraction: f64,
    pub split_factor: f64,
    pub start_iter: usize,
    pub end_iter: usize,
    pub interval: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            opacity_threshold: 0.005,
            split_scale_fraction: 0.01,
            split_factor: 1.6,
            start_iter: 300,
            end_iter: 800,
            interval: 100,
        }
    }
}

impl DensifyConfig {
    pub fn is_active(&self, iter: usize) -> bool {
        self.interval > 0
            && iter >= self.start_iter
            && iter <= self.end_iter
            && iter.is_multiple_of(self.interval)
    }
}

/// Clones or splits high-gradient Gaussians and prunes transparent ones on the
/// configured schedule; a no-op on every other iteration.
pub fn densify_and_prune(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    screen_grads: &[f64],
    iter: usize,
    cfg: &DensifyConfig,
) -> Result<CanonicalAvatar> {
    if screen_grads.len() != avatar.len() {
        return Err(Error::Dimension(format!(
            "{} screen gradients for {} gaussians",
            screen_grads.len(),
            avatar.len()
        )));
    }
    if !cfg.is_active(iter) {
        return Ok(avatar.clone());
    }
    let split_threshold = cfg.split_scale_fraction * model.bbox_diagonal();
    let shrink = cfg.split_factor.ln();
    let verts = &model.template_vertices;

    let mut gaussians = Vec::with_capacity(avatar.len());
    let mut bindings = Vec::with_capacity(avatar.len());
    for ((g, b), &grad) in avatar
        .gaussians
        .iter()
        .zip(&avatar.bindings)
        .zip(screen_grads)
    {
        if !(grad > cfg.grad_threshold) {
            gaussians.push(g.clone());
            bindings.push(*b);
            continue;
        }
        let scale = g.scale();
        let (axis_idx, sigma) =
            scale
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc },
                );
        if sigma <= split_threshold {
            gaussians.push(g.clone());
            bindings.push(*b);
            gaussians.push(g.clone());
            bindings.push(*b);
            continue;
        }
        let rot = quat_to_matrix(&quat_normalize(&g.rotation));
        let axis = rot.column(axis_idx).into_owned();
        for sign in [-1.0, 1.0] {
            let target = g.position + axis * (0.5 * sigma * sign);
            let child_binding: SurfaceBinding = rebind(&model.faces, verts, b.face, &target);
            let child = Gaussian {
                position: binding_position(&model.faces, verts, &child_binding),
                rotation: quat_normalize(&g.rotation),
                log_scale: g.log_scale.map(|l| l - shrink),
                opacity_logit: g.opacity_logit,
                color: g.color,
            };
            gaussians.push(child);
            bindings.push(child_binding);
        }
    }

    let keep: Vec<bool> = gaussians
        .iter()
        .map(|g| g.opacity() >= cfg.opacity_threshold)
        .collect();
    let mut k = keep.iter();
    gaussians.retain(|_| *k.next().expect("mask length"));
    let mut k = keep.iter();
    bindings.retain(|_| *k.next().expect("mask length"));

    Ok(CanonicalAvatar {
        gaussians,
        bindings,
        prompt: avatar.prompt.clone(),
        body_model_id: avatar.body_model_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::init_avatar;
    use crate::body_model::toy;
    use crate::math::quat_norm;

    fn setup() -> (BodyModel, CanonicalAvatar) {
        let model = toy::humanoid();
        let av = init_avatar(&model, 20, 4).unwrap();
        (model, av)
    }

    #[test]
    fn outside_schedule_is_identity() {
        let (model, av) = setup();
        let grads = vec![1.0; av.len()];
        let cfg = DensifyConfig::default();
        for iter in [0, 250, 299, 350, 801, 900] {
            assert_eq!(
                densify_and_prune(&av, &model, &grads, iter, &cfg).unwrap(),
                av
            );
        }
    }

    #[test]
    fn low_opacity_is_pruned() {
        let (model, mut av) = setup();
        let target = 0.001f64;
        av.gaussians[5].opacity_logit = (target / (1.0 - target)).ln();
        let out = densify_and_prune(
            &av,
            &model,
            &vec![0.0; av.len()],
            400,
            &DensifyConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), av.len() - 1);
        assert!(out.gaussians.iter().all(|g| g.opacity() >= 0.005));
    }

    #[test]
    fn large_high_gradient_gaussian_splits() {
        let (model, mut av) = setup();
        let cfg = DensifyConfig::default();
        let threshold = cfg.split_scale_fraction * model.bbox_diagonal();
        av.gaussians[2].log_scale.x = (threshold * 3.0).ln();
        let mut grads = vec![0.0; av.len()];
        grads[2] = 10.0 * cfg.grad_threshold;
        let out = densify_and_prune(&av, &model, &grads, 400, &cfg).unwrap();
        assert_eq!(out.len(), av.len() + 1);
        let shrink = 1.6f64.ln();
        for child in &out.gaussians[2..4] {
            for c in 0..3 {
                let expect = av.gaussians[2].log_scale[c] - shrink;
                assert!((child.log_scale[c] - expect).abs() < 1e-12);
            }
        }
        assert!(out.binding_error(&model) < 1e-5);
        out.validate(&model).unwrap();
    }

    #[test]
    fn small_high_gradient_gaussian_clones() {
        let (model, mut av) = setup();
        let cfg = DensifyConfig::default();
        av.gaussians[0].log_scale = crate::math::Vec3::repeat(-9.0);
        let mut grads = vec![0.0; av.len()];
        grads[0] = 1.0;
        let out = densify_and_prune(&av, &model, &grads, 500, &cfg).unwrap();
        assert_eq!(out.len(), av.len() + 1);
        assert_eq!(out.gaussians[0], out.gaussians[1]);
        assert_eq!(out.bindings[0], out.bindings[1]);
    }

    #[test]
    fn densify_keeps_invariants_on_mass_split() {
        let (model, av) = setup();
        let grads = vec![1.0; av.len()];
        let out = densify_and_prune(&av, &model, &grads, 300, &DensifyConfig::default()).unwrap();
        assert!(out.len() >= av.len());
        out.validate(&model).unwrap();
        assert!(out
            .gaussians
            .iter()
            .all(|g| (quat_norm(&g.rotation) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gradient_length_mismatch_errors() {
        let (model, av) = setup();
        assert!(densify_and_prune(&av, &model, &[0.0], 400, &DensifyConfig::default()).is_err());
    }
}
