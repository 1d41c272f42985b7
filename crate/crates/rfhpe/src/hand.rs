//! Parametric kinematic hand model and pose sampler.
//!
//! The canonical hand lies in the z = 0 palm plane with the wrist at the
//! origin and fingers pointing toward +y. Each finger is a rigid
//! three-segment chain articulated by non-negative flexion angles (curling
//! toward -z) at the MCP, PIP and DIP joints, plus a small in-plane
//! abduction at the base. Bone lengths are fixed constants, so sampled
//! poses always satisfy the skeleton's rigid-link invariant.

use crate::pose::{HandPose, FINGERS};
#[cfg(test)]
use crate::pose::NUM_KEYPOINTS;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Base (MCP) position of each finger in the palm plane, meters.
pub const FINGER_BASES: [[f64; 2]; FINGERS] = [
    [-0.030, 0.025], // thumb
    [-0.022, 0.085], // index
    [0.000, 0.090],  // middle
    [0.021, 0.085],  // ring
    [0.040, 0.075],  // pinky
];

/// Unit base direction of each finger in the palm plane.
pub const FINGER_DIRS: [[f64; 2]; FINGERS] = [
    [-0.643, 0.766], // thumb splays outward
    [-0.087, 0.996],
    [0.000, 1.000],
    [0.087, 0.996],
    [0.174, 0.985],
];

/// Bone lengths [proximal, middle, distal] per finger, meters.
pub const BONE_LENGTHS: [[f64; 3]; FINGERS] = [
    [0.046, 0.033, 0.027],
    [0.042, 0.025, 0.021],
    [0.045, 0.028, 0.022],
    [0.041, 0.026, 0.021],
    [0.032, 0.021, 0.018],
];

/// Flexion limits in radians: MCP, PIP, DIP.
pub const FLEX_LIMITS: [f64; 3] = [1.70, 1.92, 1.31];
/// In-plane abduction limit, radians, symmetric.
pub const ABDUCTION_LIMIT: f64 = 0.26;

/// Sampled articulation families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseFamily {
    Open,
    Fist,
    Pinch,
    RandomArticulation,
}

impl PoseFamily {
    pub const ALL: [PoseFamily; 4] = [
        PoseFamily::Open,
        PoseFamily::Fist,
        PoseFamily::Pinch,
        PoseFamily::RandomArticulation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PoseFamily::Open => "open",
            PoseFamily::Fist => "fist",
            PoseFamily::Pinch => "pinch",
            PoseFamily::RandomArticulation => "random-articulation",
        }
    }
}

/// Joint angles of one hand: per finger, three flexions and one abduction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Articulation {
    pub flex: [[f64; 3]; FINGERS],
    pub abduction: [f64; FINGERS],
}

impl Articulation {
    pub fn flat() -> Self {
        Articulation {
            flex: [[0.0; 3]; FINGERS],
            abduction: [0.0; FINGERS],
        }
    }
}

fn sample_articulation(rng: &mut ChaCha8Rng, family: PoseFamily) -> Articulation {
    let mut art = Articulation::flat();
    match family {
        PoseFamily::Open => {
            for f in 0..FINGERS {
                for j in 0..3 {
                    art.flex[f][j] = rng.random_range(0.0..0.25);
                }
                art.abduction[f] = rng.random_range(-0.10..0.10);
            }
        }
        PoseFamily::Fist => {
            for f in 0..FINGERS {
                let scale = if f == 0 { 0.5 } else { 1.0 }; // thumb curls less
                art.flex[f][0] = scale * rng.random_range(1.20..1.65);
                art.flex[f][1] = scale * rng.random_range(1.40..1.90);
                art.flex[f][2] = scale * rng.random_range(0.70..1.30);
                art.abduction[f] = rng.random_range(-0.05..0.05);
            }
        }
        PoseFamily::Pinch => {
            for f in 0..FINGERS {
                let curl = matches!(f, 0 | 1); // thumb and index close
                for j in 0..3 {
                    art.flex[f][j] = if curl {
                        rng.random_range(0.50..0.90)
                    } else {
                        rng.random_range(0.0..0.30)
                    };
                }
                art.abduction[f] = rng.random_range(-0.10..0.10);
            }
        }
        PoseFamily::RandomArticulation => {
            for f in 0..FINGERS {
                for j in 0..3 {
                    art.flex[f][j] = rng.random_range(0.0..0.75 * FLEX_LIMITS[j]);
                }
                art.abduction[f] =
                    rng.random_range(-0.75 * ABDUCTION_LIMIT..0.75 * ABDUCTION_LIMIT);
            }
        }
    }
    art
}

/// Build the canonical-pose keypoints from joint angles.
pub fn pose_from_articulation(art: &Articulation) -> HandPose {
    let mut pose = HandPose::zeros();
    pose.keypoints[0] = [0.0, 0.0, 0.0]; // wrist
    for f in 0..FINGERS {
        let base = FINGER_BASES[f];
        let inv = 1.0 / (FINGER_DIRS[f][0].powi(2) + FINGER_DIRS[f][1].powi(2)).sqrt();
        let (dx, dy) = (FINGER_DIRS[f][0] * inv, FINGER_DIRS[f][1] * inv);
        // abduction rotates the base direction within the palm plane
        let (s, c) = art.abduction[f].sin_cos();
        let ux = dx * c - dy * s;
        let uy = dx * s + dy * c;
        let mut cum = 0.0;
        let mut p = [base[0], base[1], 0.0];
        pose.keypoints[1 + 4 * f] = p; // MCP at the base
        for j in 0..3 {
            cum += art.flex[f][j];
            let (sj, cj) = cum.sin_cos();
            // curl from the palm plane toward -z
            let dir = [ux * cj, uy * cj, -sj];
            let len = BONE_LENGTHS[f][j];
            p = [p[0] + len * dir[0], p[1] + len * dir[1], p[2] + len * dir[2]];
            pose.keypoints[1 + 4 * f + 1 + j] = p;
        }
    }
    pose
}

/// Deterministic canonical-pose sample for a seed and family; wrist at the
/// origin, palm in the z = 0 plane.
pub fn sample_hand_pose(seed: u64, family: PoseFamily) -> HandPose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let art = sample_articulation(&mut rng, family);
    pose_from_articulation(&art)
}

/// Rigid placement of a canonical pose: intrinsic rotations about x
/// (pitch), y (yaw), z (roll) applied about the wrist, then a translation
/// moving the hand centroid to `center`.
pub fn place_hand(pose: &HandPose, rotation: [f64; 3], center: [f64; 3]) -> HandPose {
    let (sx, cx) = rotation[0].sin_cos();
    let (sy, cy) = rotation[1].sin_cos();
    let (sz, cz) = rotation[2].sin_cos();
    let rot = |p: [f64; 3]| -> [f64; 3] {
        // Rx
        let p = [p[0], cx * p[1] - sx * p[2], sx * p[1] + cx * p[2]];
        // Ry
        let p = [cy * p[0] + sy * p[2], p[1], -sy * p[0] + cy * p[2]];
        // Rz
        [cz * p[0] - sz * p[1], sz * p[0] + cz * p[1], p[2]]
    };
    let mut out = HandPose::zeros();
    for (dst, src) in out.keypoints.iter_mut().zip(pose.keypoints.iter()) {
        *dst = rot(*src);
    }
    let centroid = out.centroid();
    out.translated([
        center[0] - centroid[0],
        center[1] - centroid[1],
        center[2] - centroid[2],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [b[0] - a[0], b[1] - a[1], b[2] - a[2]]
    }

    fn norm(v: [f64; 3]) -> f64 {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    #[test]
    fn flat_hand_lies_in_palm_plane() {
        let pose = pose_from_articulation(&Articulation::flat());
        for kp in &pose.keypoints {
            assert_eq!(kp[2], 0.0);
        }
    }

    #[test]
    fn bone_lengths_match_skeleton_constants() {
        for seed in 0..20 {
            for family in PoseFamily::ALL {
                let pose = sample_hand_pose(seed, family);
                for f in 0..FINGERS {
                    let base = 1 + 4 * f;
                    for j in 0..3 {
                        let a = pose.keypoints[base + j];
                        let b = pose.keypoints[base + j + 1];
                        let len = norm(seg(a, b));
                        assert!(
                            (len - BONE_LENGTHS[f][j]).abs() < 1e-9,
                            "finger {f} bone {j}: {len} vs {}",
                            BONE_LENGTHS[f][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn joint_angles_stay_within_limits() {
        // limit-sweep oracle: recover inter-segment angles from keypoints
        for seed in 0..1000 {
            let pose = sample_hand_pose(seed, PoseFamily::RandomArticulation);
            for f in 0..FINGERS {
                let base = 1 + 4 * f;
                let mut prev: Option<[f64; 3]> = None;
                for j in 0..3 {
                    let s = seg(pose.keypoints[base + j], pose.keypoints[base + j + 1]);
                    if let Some(p) = prev {
                        let dot = (s[0] * p[0] + s[1] * p[1] + s[2] * p[2])
                            / (norm(s) * norm(p));
                        let angle = dot.clamp(-1.0, 1.0).acos();
                        // inter-segment angle equals the sampled flexion
                        assert!(
                            angle <= FLEX_LIMITS[j] + 1e-6,
                            "seed {seed}, finger {f}, joint {j}: {angle}"
                        );
                    }
                    prev = Some(s);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = sample_hand_pose(77, PoseFamily::Fist);
        let b = sample_hand_pose(77, PoseFamily::Fist);
        assert_eq!(a, b);
        let c = sample_hand_pose(78, PoseFamily::Fist);
        assert_ne!(a, c);
    }

    #[test]
    fn placement_moves_centroid_and_preserves_lengths() {
        let pose = sample_hand_pose(5, PoseFamily::Open);
        let placed = place_hand(&pose, [0.3, -0.2, 0.1], [0.05, -0.02, 0.5]);
        let c = placed.centroid();
        assert!((c[0] - 0.05).abs() < 1e-12);
        assert!((c[1] + 0.02).abs() < 1e-12);
        assert!((c[2] - 0.5).abs() < 1e-12);
        for f in 0..FINGERS {
            let base = 1 + 4 * f;
            for j in 0..3 {
                let len = norm(seg(placed.keypoints[base + j], placed.keypoints[base + j + 1]));
                assert!((len - BONE_LENGTHS[f][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn keypoint_count_is_twenty_one() {
        let pose = sample_hand_pose(0, PoseFamily::Open);
        assert_eq!(pose.keypoints.len(), NUM_KEYPOINTS);
    }
}
