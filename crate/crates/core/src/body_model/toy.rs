//! Procedural body models and motions used by tests and the demo pipeline.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::math::Vec3;
use crate::rng;

use super::{BodyModel, MotionSequence, PoseParams, ROOT_SENTINEL};

/// Straight chain of `k` joints spaced 0.3 m apart along +y, each carrying a
/// ring of `ring` vertices. `chain(4, 8)` is the default 32-vertex test skeleton.
pub fn chain(k: usize, ring: usize) -> BodyModel {
    assert!(k >= 1 && ring >= 3);
    let radius = 0.1;
    let spacing = 0.3;
    let mut verts = Vec::new();
    let mut shape_basis = Vec::new();
    let mut weights = Vec::new();
    for j in 0..k {
        let y = j as f64 * spacing;
        for r in 0..ring {
            let a = std::f64::consts::TAU * r as f64 / ring as f64;
            let (s, c) = a.sin_cos();
            verts.push(Vec3::new(radius * c, y, radius * s));
            shape_basis.push(vec![
                Vec3::new(0.0, 0.1 * y, 0.0),
                Vec3::new(0.02 * c, 0.0, 0.02 * s),
            ]);
            let mut w = vec![0.0; k];
            if j == 0 {
                w[0] = 1.0;
            } else {
                w[j] = 0.7;
                w[j - 1] = 0.3;
            }
            weights.push(w);
        }
    }
    let mut faces = Vec::new();
    for j in 0..k.saturating_sub(1) {
        for r in 0..ring {
            let a = j * ring + r;
            let b = j * ring + (r + 1) % ring;
            let c = a + ring;
            let d = b + ring;
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    if k == 1 {
        // single ring: close it with a fan so the mesh has area
        for r in 1..ring - 1 {
            faces.push([0, r + 1, r]);
        }
    }
    let m = verts.len();
    let regressor = (0..k)
        .map(|j| {
            (0..m)
                .map(|i| {
                    if i / ring == j {
                        1.0 / ring as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    BodyModel {
        id: format!("toy-chain-{k}x{ring}"),
        joint_names: (0..k).map(|j| format!("joint_{j}")).collect(),
        template_vertices: verts,
        faces,
        rest_joints: (0..k)
            .map(|j| Vec3::new(0.0, j as f64 * spacing, 0.0))
            .collect(),
        skinning_weights: weights,
        joint_regressor: regressor,
        kinematic_parents: (0..k).map(|j| j as i64 - 1).collect(),
        shape_basis,
    }
}

/// Joint names of [`humanoid`], in index order.
pub const HUMANOID_JOINTS: [&str; 16] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

const HUMANOID_PARENTS: [i64; 16] = [
    ROOT_SENTINEL,
    0,
    1,
    2,
    1,
    4,
    5,
    1,
    7,
    8,
    0,
    10,
    11,
    0,
    13,
    14,
];

/// A 16-joint T-pose humanoid about 1.78 m tall, standing on y = 0 and facing +z.
/// Every joint owns one capped tube segment; the regressor averages the ring
/// at the segment start, which sits exactly on the joint.
pub fn humanoid() -> BodyModel {
    let joints = [
        [0.0, 0.95, 0.0],
        [0.0, 1.2, 0.0],
        [0.0, 1.45, 0.0],
        [0.0, 1.58, 0.0],
        [0.17, 1.42, 0.0],
        [0.45, 1.42, 0.0],
        [0.7, 1.42, 0.0],
        [-0.17, 1.42, 0.0],
        [-0.45, 1.42, 0.0],
        [-0.7, 1.42, 0.0],
        [0.1, 0.9, 0.0],
        [0.1, 0.5, 0.0],
        [0.1, 0.08, 0.0],
        [-0.1, 0.9, 0.0],
        [-0.1, 0.5, 0.0],
        [-0.1, 0.08, 0.0],
    ]
    .map(Vec3::from);
    // (owning joint, segment end, radius)
    let segments: [(usize, [f64; 3], f64); 16] = [
        (0, [0.0, 1.2, 0.0], 0.15),
        (1, [0.0, 1.45, 0.0], 0.17),
        (2, [0.0, 1.58, 0.0], 0.055),
        (3, [0.0, 1.78, 0.0], 0.1),
        (4, [0.45, 1.42, 0.0], 0.055),
        (5, [0.7, 1.42, 0.0], 0.045),
        (6, [0.82, 1.42, 0.0], 0.04),
        (7, [-0.45, 1.42, 0.0], 0.055),
        (8, [-0.7, 1.42, 0.0], 0.045),
        (9, [-0.82, 1.42, 0.0], 0.04),
        (10, [0.1, 0.5, 0.0], 0.075),
        (11, [0.1, 0.08, 0.0], 0.058),
        (12, [0.1, 0.03, 0.16], 0.045),
        (13, [-0.1, 0.5, 0.0], 0.075),
        (14, [-0.1, 0.08, 0.0], 0.058),
        (15, [-0.1, 0.03, 0.16], 0.045),
    ];
    const RING: usize = 8;
    const RINGS: usize = 4;
    let k = joints.len();
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    let mut basis = Vec::new();
    let mut regressor = vec![Vec::new(); k];
    let height_basis = |p: &Vec3| Vec3::new(0.0, 0.06 * p.y, 0.0);

    for &(owner, end, radius) in &segments {
        let start = joints[owner];
        let end = Vec3::from(end);
        let axis = (end - start).normalize();
        let helper = if axis.y.abs() < 0.9 {
            Vec3::y()
        } else {
            Vec3::x()
        };
        let u = axis.cross(&helper).normalize();
        let w = axis.cross(&u);
        let base = verts.len();
        let parent = HUMANOID_PARENTS[owner];
        for ring in 0..RINGS {
            let s = ring as f64 / (RINGS - 1) as f64;
            let center = start + (end - start) * s;
            for r in 0..RING {
                let a = std::f64::consts::TAU * r as f64 / RING as f64;
                let dir = u * a.cos() + w * a.sin();
                let p = center + dir * radius;
                verts.push(p);
                basis.push(vec![height_basis(&p), dir * 0.015]);
                let mut wt = vec![0.0; k];
                if ring == 0 && parent != ROOT_SENTINEL {
                    wt[owner] = 0.5;
                    wt[parent as usize] = 0.5;
                } else {
                    wt[owner] = 1.0;
                }
                weights.push(wt);
            }
        }
        for ring in 0..RINGS - 1 {
            for r in 0..RING {
                let a = base + ring * RING + r;
                let b = base + ring * RING + (r + 1) % RING;
                faces.push([a, b, a + RING]);
                faces.push([b, b + RING, a + RING]);
            }
        }
        // caps
        for (ring, tip) in [
            (0usize, start - axis * radius * 0.5),
            (RINGS - 1, end + axis * radius * 0.5),
        ] {
            let c = verts.len();
            verts.push(tip);
            basis.push(vec![
                height_basis(&tip),
                axis * if ring == 0 { -0.015 } else { 0.015 },
            ]);
            let mut wt = vec![0.0; k];
            wt[owner] = 1.0;
            weights.push(wt);
            for r in 0..RING {
                let a = base + ring * RING + r;
                let b = base + ring * RING + (r + 1) % RING;
                if ring == 0 {
                    faces.push([c, b, a]);
                } else {
                    faces.push([c, a, b]);
                }
            }
        }
        regressor[owner] = (base..base + RING).collect();
    }
    let m = verts.len();
    let joint_regressor = regressor
        .iter()
        .map(|idx| {
            let mut row = vec![0.0; m];
            for &i in idx {
                row[i] = 1.0 / idx.len() as f64;
            }
            row
        })
        .collect();
    BodyModel {
        id: "toy-humanoid-16".into(),
        joint_names: HUMANOID_JOINTS.iter().map(|s| s.to_string()).collect(),
        template_vertices: verts,
        faces,
        rest_joints: joints.to_vec(),
        skinning_weights: weights,
        joint_regressor,
        kinematic_parents: HUMANOID_PARENTS.to_vec(),
        shape_basis: basis,
    }
}

/// Actions the procedural motion generator knows.
pub const ACTIONS: [&str; 3] = ["batting", "skating", "kicking"];

/// Periodic humanoid motion for one of [`ACTIONS`]. Per-frame betas carry
/// small seeded jitter around a subject-specific shape, mimicking per-frame
/// shape estimates before normalization.
pub fn humanoid_motion(action: &str, subject_id: &str, frames: usize, seed: u64) -> MotionSequence {
    let mut r = rng::stream(seed, &format!("motion/{subject_id}/{action}"), 0);
    let subject_shape = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
    let phase0: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let amp: f64 = r.random_range(0.8..1.2);
    let heading: f64 = r.random_range(-0.6..0.6);
    let jitter = Normal::new(0.0, 0.05).expect("valid normal");
    let n = frames.max(1);
    let frames = (0..n)
        .map(|i| {
            let t = phase0 + std::f64::consts::TAU * i as f64 / n as f64;
            let (s, c) = t.sin_cos();
            let mut p = PoseParams::identity(16, 2);
            // bring the T-pose arms down to the sides
            p.body_pose[4] = Vec3::new(0.0, 0.0, -1.2);
            p.body_pose[7] = Vec3::new(0.0, 0.0, 1.2);
            match action {
                "batting" => {
                    p.body_pose[1] = Vec3::new(0.0, 0.6 * amp * s, 0.0);
                    p.body_pose[4] = Vec3::new(-0.9 * amp * (1.0 + s) * 0.5, 0.4 * c, -0.5);
                    p.body_pose[7] = Vec3::new(-0.9 * amp * (1.0 + s) * 0.5, 0.4 * c, 0.5);
                    p.body_pose[5] = Vec3::new(0.0, -0.6 - 0.3 * c, 0.0);
                    p.body_pose[8] = Vec3::new(0.0, 0.6 + 0.3 * c, 0.0);
                    p.body_pose[11] = Vec3::new(0.3 + 0.1 * s, 0.0, 0.0);
                    p.body_pose[14] = Vec3::new(0.3 - 0.1 * s, 0.0, 0.0);
                }
                "skating" => {
                    p.body_pose[0] = Vec3::new(0.35, 0.0, 0.0);
                    p.body_pose[10] =
                        Vec3::new(-0.5 * amp * (s + 1.0) * 0.5, 0.0, 0.4 * amp * s.max(0.0));
                    p.body_pose[13] = Vec3::new(
                        -0.5 * amp * (1.0 - s) * 0.5,
                        0.0,
                        -0.4 * amp * (-s).max(0.0),
                    );
                    p.body_pose[11] = Vec3::new(0.6 + 0.3 * s, 0.0, 0.0);
                    p.body_pose[14] = Vec3::new(0.6 - 0.3 * s, 0.0, 0.0);
                    p.body_pose[4] = Vec3::new(0.5 * s, 0.0, -1.1);
                    p.body_pose[7] = Vec3::new(-0.5 * s, 0.0, 1.1);
                }
                _ => {
                    p.body_pose[10] = Vec3::new(-1.1 * amp * s.max(0.0), 0.0, 0.0);
                    p.body_pose[11] = Vec3::new(0.8 * amp * (1.0 - c) * 0.5, 0.0, 0.0);
                    p.body_pose[13] = Vec3::new(0.15, 0.0, 0.0);
                    p.body_pose[4] = Vec3::new(0.4 * s, 0.0, -0.9);
                    p.body_pose[7] = Vec3::new(-0.4 * s, 0.0, 0.9);
                }
            }
            p.global_orient = Vec3::new(0.0, heading + 0.1 * s, 0.0);
            p.translation = Vec3::new(0.05 * s, 0.02 * c.abs(), 0.0);
            p.betas = subject_shape
                .iter()
                .map(|b| b + jitter.sample(&mut r))
                .collect();
            p
        })
        .collect();
    MotionSequence {
        frames,
        action_label: action.to_string(),
        subject_id: subject_id.to_string(),
        source_id: format!("procedural/{action}/{seed}"),
    }
}
