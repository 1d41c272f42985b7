//! Hand pose representation, joint taxonomy, and the mapping between
//! metric keypoints and the network's heatmap + depth output space.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_KEYPOINTS: usize = 21;
pub const FINGERS: usize = 5;

/// Per-joint evaluation group. Keypoint 0 is the wrist; each finger then
/// contributes four keypoints in base-to-tip order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JointGroup {
    Wrist,
    Mcp,
    Pip,
    Dip,
    Fingertip,
}

impl JointGroup {
    pub const FINGER_GROUPS: [JointGroup; 4] = [
        JointGroup::Mcp,
        JointGroup::Pip,
        JointGroup::Dip,
        JointGroup::Fingertip,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            JointGroup::Wrist => "wrist",
            JointGroup::Mcp => "MCP",
            JointGroup::Pip => "PIP",
            JointGroup::Dip => "DIP",
            JointGroup::Fingertip => "fingertip",
        }
    }
}

/// Group of keypoint `idx` under the wrist + 4-per-finger layout.
pub fn joint_group(idx: usize) -> JointGroup {
    debug_assert!(idx < NUM_KEYPOINTS);
    if idx == 0 {
        return JointGroup::Wrist;
    }
    JointGroup::FINGER_GROUPS[(idx - 1) % 4]
}

/// 21 keypoints in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandPose {
    pub keypoints: [[f64; 3]; NUM_KEYPOINTS],
}

impl HandPose {
    pub fn zeros() -> Self {
        HandPose {
            keypoints: [[0.0; 3]; NUM_KEYPOINTS],
        }
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut out = *self;
        for kp in out.keypoints.iter_mut() {
            for d in 0..3 {
                kp[d] += offset[d];
            }
        }
        out
    }

    /// Mean squared Euclidean distance over keypoints, in m^2.
    pub fn mean_sq_dist(&self, other: &HandPose) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.keypoints.iter().zip(other.keypoints.iter()) {
            for d in 0..3 {
                let diff = a[d] - b[d];
                acc += diff * diff;
            }
        }
        acc / NUM_KEYPOINTS as f64
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for kp in &self.keypoints {
            for d in 0..3 {
                c[d] += kp[d];
            }
        }
        for d in c.iter_mut() {
            *d /= NUM_KEYPOINTS as f64;
        }
        c
    }
}

/// Regressor output: per-keypoint spatial likelihood maps plus normalized
/// depths in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PosePrediction {
    /// `[21, H, W]`, each map non-negative and summing to 1.
    pub heatmaps: Tensor,
    /// `[21]` normalized depths.
    pub depths: Tensor,
}

impl PosePrediction {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.heatmaps.shape();
        (s[1], s[2])
    }
}

/// Maps heatmap cells to the metric (x, y) plane and normalized depth to
/// metric z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub grid: (usize, usize),
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            x_range: (-0.25, 0.25),
            y_range: (-0.25, 0.25),
            z_range: (0.20, 0.80),
            grid: (40, 40),
        }
    }
}

impl Calibration {
    pub fn cell_width(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.grid.1 as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.grid.0 as f64
    }

    /// Metric x at the center of column j.
    pub fn col_center(&self, j: usize) -> f64 {
        self.x_range.0 + (j as f64 + 0.5) * self.cell_width()
    }

    /// Metric y at the center of row i.
    pub fn row_center(&self, i: usize) -> f64 {
        self.y_range.0 + (i as f64 + 0.5) * self.cell_height()
    }

    /// Fractional (row, col) cell coordinates of a metric point; a point on
    /// a cell center lands on integer coordinates.
    pub fn cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.y_range.0) / self.cell_height() - 0.5,
            (x - self.x_range.0) / self.cell_width() - 0.5,
        )
    }

    pub fn normalize_z(&self, z: f64) -> f64 {
        (z - self.z_range.0) / (self.z_range.1 - self.z_range.0)
    }

    pub fn denormalize_z(&self, d: f64) -> f64 {
        self.z_range.0 + d * (self.z_range.1 - self.z_range.0)
    }

    /// Column-center x coordinates, length W.
    pub fn grid_x(&self) -> Vec<f64> {
        (0..self.grid.1).map(|j| self.col_center(j)).collect()
    }

    /// Row-center y coordinates, length H.
    pub fn grid_y(&self) -> Vec<f64> {
        (0..self.grid.0).map(|i| self.row_center(i)).collect()
    }
}

/// Soft-argmax decode: heatmap expectation gives (x, y), depth rescales to
/// metric z.
pub fn decode_keypoints(p: &PosePrediction, calib: &Calibration) -> HandPose {
    let (h, w) = p.grid();
    let gx = calib.grid_x();
    let gy = calib.grid_y();
    let hm = p.heatmaps.data();
    let mut pose = HandPose::zeros();
    for k in 0..NUM_KEYPOINTS {
        let plane = &hm[k * h * w..(k + 1) * h * w];
        let mut ex = 0.0;
        let mut ey = 0.0;
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                ex += v * gx[j];
                ey += v * gy[i];
            }
        }
        pose.keypoints[k] = [ex, ey, calib.denormalize_z(p.depths.data()[k])];
    }
    pose
}

/// Supervision target built from a ground-truth pose.
#[derive(Clone, Debug)]
pub struct EncodedTarget {
    pub target: PosePrediction,
    /// Set when any keypoint fell outside the calibrated field of view and
    /// was clamped to the border cell.
    pub clamped: bool,
}

/// Per-keypoint Gaussian heatmap (std `sigma_hm` cells, normalized to sum
/// 1) plus normalized depth.
pub fn encode_targets(pose: &HandPose, calib: &Calibration, sigma_hm: f64) -> EncodedTarget {
    let (h, w) = calib.grid;
    let mut maps = vec![0.0; NUM_KEYPOINTS * h * w];
    let mut depths = vec![0.0; NUM_KEYPOINTS];
    let mut clamped = false;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma_hm * sigma_hm);
    for (k, kp) in pose.keypoints.iter().enumerate() {
        let (mut ci, mut cj) = calib.cell_coords(kp[0], kp[1]);
        if ci < 0.0 || cj < 0.0 || ci > (h - 1) as f64 || cj > (w - 1) as f64 {
            clamped = true;
            ci = ci.clamp(0.0, (h - 1) as f64);
            cj = cj.clamp(0.0, (w - 1) as f64);
        }
        let plane = &mut maps[k * h * w..(k + 1) * h * w];
        let mut sum = 0.0;
        for i in 0..h {
            for j in 0..w {
                let di = i as f64 - ci;
                let dj = j as f64 - cj;
                let v = (-(di * di + dj * dj) * inv_two_sigma_sq).exp();
                plane[i * w + j] = v;
                sum += v;
            }
        }
        for v in plane.iter_mut() {
            *v /= sum;
        }
        depths[k] = calib.normalize_z(kp[2]).clamp(0.0, 1.0);
    }
    EncodedTarget {
        target: PosePrediction {
            heatmaps: Tensor::from_vec(&[NUM_KEYPOINTS, h, w], maps).expect("shape"),
            depths: Tensor::from_vec(&[NUM_KEYPOINTS], depths).expect("shape"),
        },
        clamped,
    }
}

/// Flatten a pose batch into a `[B, 21, 3]` tensor.
pub fn poses_to_tensor(poses: &[HandPose]) -> Tensor {
    let mut data = Vec::with_capacity(poses.len() * NUM_KEYPOINTS * 3);
    for p in poses {
        for kp in &p.keypoints {
            data.extend_from_slice(kp);
        }
    }
    Tensor::from_vec(&[poses.len(), NUM_KEYPOINTS, 3], data).expect("shape")
}

/// Read a `[B, 21, 3]` tensor back into poses.
pub fn tensor_to_poses(t: &Tensor) -> Result<Vec<HandPose>> {
    let s = t.shape();
    if s.len() != 3 || s[1] != NUM_KEYPOINTS || s[2] != 3 {
        return Err(Error::dimension(
            "tensor_to_poses",
            "[B, 21, 3]".to_string(),
            format!("{s:?}"),
        ));
    }
    let mut out = Vec::with_capacity(s[0]);
    let d = t.data();
    for b in 0..s[0] {
        let mut pose = HandPose::zeros();
        for k in 0..NUM_KEYPOINTS {
            for c in 0..3 {
                pose.keypoints[k][c] = d[(b * NUM_KEYPOINTS + k) * 3 + c];
            }
        }
        out.push(pose);
    }
    Ok(out)
}
