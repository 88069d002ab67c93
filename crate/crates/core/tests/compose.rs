use gen4d::animate::DeformedCloud;
use gen4d::avatar::Gaussian;
use gen4d::compose::{
    cast_shadow, shade_directional, GroundPlane, Light, SceneAsset, ShadowConfig,
};
use gen4d::image::Image;
use gen4d::math::Vec3;
use gen4d::render::{rasterize, Camera, Intrinsics, RasterConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single(position: Vec3, scale: f64) -> DeformedCloud {
    DeformedCloud {
        gaussians: vec![Gaussian {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vec3::repeat(scale.ln()),
            opacity_logit: 40.0,
            color: Vec3::repeat(0.5),
        }],
        normals: vec![Vec3::y()],
        kept_indices: vec![0],
        frame_index: 0,
    }
}

fn scene(direction: Vec3) -> SceneAsset {
    SceneAsset {
        background: Image::new(1, 1, 3),
        ground_plane: GroundPlane::horizontal(0.0),
        light: Light {
            direction: direction.normalize(),
            intensity: 1.0,
            ambient: 0.2,
        },
        scene_prompt: String::new(),
    }
}

fn top_down(size: usize) -> Camera {
    let intr = Intrinsics::from_fov(40.0, size, size, 0.1, 100.0);
    Camera::look_at(intr, Vec3::new(0.0, 12.0, 0.0), Vec3::zeros())
}

/// Darkness-weighted pixel centroid, unprojected onto the ground plane.
fn shadow_centroid(att: &Image, cam: &Camera) -> Vec3 {
    let (mut su, mut sv, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..att.height {
        for x in 0..att.width {
            let w = 1.0 - att.get(x, y, 0);
            su += w * x as f64;
            sv += w * y as f64;
            sw += w;
        }
    }
    assert!(sw > 0.0, "no shadow was cast");
    let ray = cam.pixel_ray(su / sw, sv / sw);
    let origin = cam.position();
    origin + ray * (-origin.y / ray.y)
}

#[test]
fn nadir_shadow_lies_under_subject() {
    let cam = top_down(128);
    let subject = Vec3::new(0.7, 1.6, -0.4);
    let layer = cast_shadow(
        &single(subject, 0.1),
        &scene(-Vec3::y()),
        &cam,
        &ShadowConfig::default(),
    )
    .unwrap();
    let c = shadow_centroid(&layer.attenuation, &cam);
    let (u, v, _) = gen4d::render::project(&cam, &c).unwrap();
    let (eu, ev, _) = gen4d::render::project(&cam, &Vec3::new(subject.x, 0.0, subject.z)).unwrap();
    assert!(
        (u - eu).hypot(v - ev) < 1.0,
        "centroid off by {} px",
        (u - eu).hypot(v - ev)
    );
}

#[test]
fn shadow_at_45_degrees_is_displaced_by_height() {
    let cam = top_down(160);
    for height in [0.8, 1.5, 2.2] {
        let subject = Vec3::new(-1.0, height, 0.3);
        let layer = cast_shadow(
            &single(subject, 0.1),
            &scene(Vec3::new(1.0, -1.0, 0.0)),
            &cam,
            &ShadowConfig::default(),
        )
        .unwrap();
        let c = shadow_centroid(&layer.attenuation, &cam);
        let displacement = (c - Vec3::new(subject.x, 0.0, subject.z)).norm();
        assert!(
            (displacement - height).abs() <= 0.02 * height,
            "height {height}: displacement {displacement}"
        );
    }
}

fn random_cloud(n: usize, seed: u64) -> DeformedCloud {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| Gaussian {
            position: Vec3::new(
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
            ),
            rotation: [
                1.0,
                r.random_range(-0.3..0.3),
                r.random_range(-0.3..0.3),
                0.0,
            ],
            log_scale: Vec3::repeat(r.random_range(-3.0..-2.0)),
            opacity_logit: r.random_range(-1.0..3.0),
            color: Vec3::new(
                r.random_range(0.0..1.0),
                r.random_range(0.0..1.0),
                r.random_range(0.0..1.0),
            ),
        })
        .collect();
    let normals = (0..n)
        .map(|_| {
            Vec3::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            )
            .normalize()
        })
        .collect();
    DeformedCloud {
        gaussians,
        normals,
        kept_indices: (0..n).collect(),
        frame_index: 0,
    }
}

#[test]
fn mixed_lighting_is_the_sum_of_single_lights() {
    let cloud = random_cloud(80, 5);
    let l1 = Light {
        direction: Vec3::new(0.3, -1.0, 0.2).normalize(),
        intensity: 0.9,
        ambient: 0.1,
    };
    let l2 = Light {
        direction: Vec3::new(-0.8, -0.2, 0.5).normalize(),
        intensity: 1.4,
        ambient: 0.05,
    };
    let intr = Intrinsics::from_fov(50.0, 40, 40, 0.1, 50.0);
    let cam = Camera::look_at(intr, Vec3::new(0.2, 0.3, 3.0), Vec3::zeros());
    let cfg = RasterConfig::default();
    let render = |lights: &[Light]| {
        let shaded = shade_directional(&cloud, lights).unwrap();
        rasterize(&shaded.gaussians, &cam, &cfg).unwrap().rgb
    };
    let (a, b, ab) = (render(&[l1]), render(&[l2]), render(&[l1, l2]));
    let err = a
        .data
        .iter()
        .zip(&b.data)
        .zip(&ab.data)
        .map(|((x, y), z)| (x + y - z).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-5, "max deviation {err}");

    let s1 = shade_directional(&cloud, &[l1]).unwrap();
    let s2 = shade_directional(&cloud, &[l2]).unwrap();
    let s12 = shade_directional(&cloud, &[l1, l2]).unwrap();
    for i in 0..cloud.len() {
        let d = s1.gaussians[i].color + s2.gaussians[i].color - s12.gaussians[i].color;
        assert!(d.amax() < 1e-9);
    }
}

#[test]
fn shading_leaves_albedo_untouched() {
    let cloud = random_cloud(30, 8);
    let before = serde_json::to_string(&cloud.gaussians).unwrap();
    let l = Light {
        direction: -Vec3::y(),
        intensity: 2.0,
        ambient: 0.0,
    };
    let shaded = shade_directional(&cloud, &[l]).unwrap();
    assert_ne!(shaded.gaussians, cloud.gaussians);
    assert_eq!(serde_json::to_string(&cloud.gaussians).unwrap(), before);
}
