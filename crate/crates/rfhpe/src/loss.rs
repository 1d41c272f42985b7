//! Training objectives: the base regression loss, the teacher-weighted
//! imitation loss used for cross-modality distillation, disparity and
//! disparity-discrepancy estimators, and the accumulated false-pose
//! heatmap prior that bounds the adversary's output space.

use crate::error::{Error, Result};
use crate::pose::{Calibration, HandPose, PosePrediction, NUM_KEYPOINTS};
use crate::tensor::Tensor;

/// Per-sample teacher reliability statistics.
///
/// `errors[i]` is the squared error of the teacher on sample i (mean squared
/// Euclidean distance over keypoints), `eta` the spread max - min, and
/// `phi[i] = clamp(1 - errors[i] / eta, 0, 1)` the attention weight. When
/// every teacher error is identical the spread degenerates and all weights
/// are 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStats {
    pub errors: Vec<f64>,
    pub eta: f64,
    pub phi: Vec<f64>,
}

/// Squared teacher error per sample, spread, and clamped attention weights
/// over the full training set.
pub fn compute_teacher_stats(teacher: &[HandPose], gt: &[HandPose]) -> Result<TeacherStats> {
    if teacher.is_empty() || teacher.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "teacher stats need aligned nonempty sets, got {} teacher / {} gt",
            teacher.len(),
            gt.len()
        )));
    }
    let errors: Vec<f64> = teacher
        .iter()
        .zip(gt.iter())
        .map(|(t, g)| t.mean_sq_dist(g))
        .collect();
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let eta = max - min;
    let phi = if eta <= 0.0 {
        vec![1.0; errors.len()]
    } else {
        errors
            .iter()
            .map(|e| (1.0 - e / eta).clamp(0.0, 1.0))
            .collect()
    };
    Ok(TeacherStats { errors, eta, phi })
}

/// Base regression loss: mean squared error over heatmaps and over
/// depths, equally weighted.
pub fn regression_loss_la(pred: &PosePrediction, target: &PosePrediction) -> Result<f64> {
    if pred.heatmaps.shape() != target.heatmaps.shape()
        || pred.depths.shape() != target.depths.shape()
    {
        return Err(Error::dimension(
            "regression_loss_la",
            format!(
                "heatmaps {:?}, depths {:?}",
                target.heatmaps.shape(),
                target.depths.shape()
            ),
            format!(
                "heatmaps {:?}, depths {:?}",
                pred.heatmaps.shape(),
                pred.depths.shape()
            ),
        ));
    }
    Ok(0.5 * mse(&pred.heatmaps, &target.heatmaps) + 0.5 * mse(&pred.depths, &target.depths))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Teacher-weighted imitation loss over a batch of decoded poses:
///
/// ```text
/// L = (1/n) sum_i  alpha * d(y_S_i, y_i) + (1 - alpha) * phi_i * d(y_S_i, y_T_i)
/// ```
///
/// with d the mean squared Euclidean distance over keypoints and `phi_i`
/// taken from full-training-set statistics.
pub fn attentive_imitation_loss(
    student: &[HandPose],
    teacher: &[HandPose],
    gt: &[HandPose],
    alpha: f64,
    phi: &[f64],
) -> Result<f64> {
    if student.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if student.len() != teacher.len() || student.len() != gt.len() || student.len() != phi.len() {
        return Err(Error::InvalidInput(format!(
            "misaligned batch: student {}, teacher {}, gt {}, phi {}",
            student.len(),
            teacher.len(),
            gt.len(),
            phi.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let n = student.len() as f64;
    let mut acc = 0.0;
    for i in 0..student.len() {
        acc += alpha * student[i].mean_sq_dist(&gt[i])
            + (1.0 - alpha) * phi[i] * student[i].mean_sq_dist(&teacher[i]);
    }
    Ok(acc / n)
}

/// Expected regression loss between two regressors' outputs over a batch.
pub fn disparity(a: &[PosePrediction], b: &[PosePrediction]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "disparity needs aligned nonempty batches, got {} / {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += regression_loss_la(x, y)?;
    }
    Ok(acc / a.len() as f64)
}

/// Accumulated truncated-Gaussian mass of other-keypoint locations over
/// wrongly predicted poses, per keypoint, on the heatmap grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FalsePoseHeatmap {
    /// `[K, H, W]`, non-negative, zero beyond the truncation radius of
    /// every contributing keypoint.
    pub grid: Tensor,
    pub sigma_g: f64,
    pub r_g: f64,
}

impl FalsePoseHeatmap {
    /// An all-ones grid: reweighting with it leaves heatmaps unchanged.
    pub fn uniform(grid: (usize, usize)) -> FalsePoseHeatmap {
        FalsePoseHeatmap {
            grid: Tensor::filled(&[NUM_KEYPOINTS, grid.0, grid.1], 1.0),
            sigma_g: 0.0,
            r_g: 0.0,
        }
    }
}

/// Floor added to the prior grid before reweighting so no cell collapses
/// to zero mass.
pub const PRIOR_FLOOR: f64 = 1e-3;

/// Build the false-pose prior: for keypoint i, Gaussian mass (std
/// `sigma_g` cells, truncated at `r_g` cells) is placed at every *other*
/// keypoint's predicted cell, accumulated over the set of wrong poses.
pub fn accumulate_false_heatmap(
    wrong_preds: &[HandPose],
    sigma_g: f64,
    r_g: f64,
    calib: &Calibration,
) -> Result<FalsePoseHeatmap> {
    if sigma_g <= 0.0 || r_g <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "sigma_g and r_g must be positive, got {sigma_g} / {r_g}"
        )));
    }
    let (h, w) = calib.grid;
    let mut grid = vec![0.0; NUM_KEYPOINTS * h * w];
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma_g * sigma_g);
    let radius_sq = r_g * r_g;

    for pose in wrong_preds {
        // total = sum over all keypoints q of N(q); per-keypoint grid for i
        // is total - N(i), computed by accumulating every q into all maps
        // except its own.
        for (q, kp) in pose.keypoints.iter().enumerate() {
            let (ci, cj) = calib.cell_coords(kp[0], kp[1]);
            let ci = ci.clamp(0.0, (h - 1) as f64);
            let cj = cj.clamp(0.0, (w - 1) as f64);
            let lo_i = ((ci - r_g).floor().max(0.0)) as usize;
            let hi_i = ((ci + r_g).ceil() as usize).min(h - 1);
            let lo_j = ((cj - r_g).floor().max(0.0)) as usize;
            let hi_j = ((cj + r_g).ceil() as usize).min(w - 1);
            for i in lo_i..=hi_i {
                for j in lo_j..=hi_j {
                    let di = i as f64 - ci;
                    let dj = j as f64 - cj;
                    let d2 = di * di + dj * dj;
                    if d2 > radius_sq {
                        continue;
                    }
                    let v = (-d2 * inv_two_sigma_sq).exp();
                    for k in 0..NUM_KEYPOINTS {
                        if k != q {
                            grid[(k * h + i) * w + j] += v;
                        }
                    }
                }
            }
        }
    }
    Ok(FalsePoseHeatmap {
        grid: Tensor::from_vec(&[NUM_KEYPOINTS, h, w], grid)?,
        sigma_g,
        r_g,
    })
}

/// Reweight heatmaps elementwise by `(prior + floor)` and renormalize each
/// map to sum 1. `heatmaps` is `[K, H, W]` or `[B, K, H, W]` flattened per
/// map.
pub fn apply_prior(pred: &PosePrediction, prior: &FalsePoseHeatmap) -> Result<PosePrediction> {
    if pred.heatmaps.shape() != prior.grid.shape() {
        return Err(Error::dimension(
            "apply_prior",
            format!("{:?}", prior.grid.shape()),
            format!("{:?}", pred.heatmaps.shape()),
        ));
    }
    let (h, w) = pred.grid();
    let mut out = vec![0.0; pred.heatmaps.len()];
    for k in 0..NUM_KEYPOINTS {
        let plane = &pred.heatmaps.data()[k * h * w..(k + 1) * h * w];
        let pr = &prior.grid.data()[k * h * w..(k + 1) * h * w];
        let dst = &mut out[k * h * w..(k + 1) * h * w];
        let mut sum = 0.0;
        for ((d, &p), &g) in dst.iter_mut().zip(plane.iter()).zip(pr.iter()) {
            *d = p * (g + PRIOR_FLOOR);
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(PosePrediction {
        heatmaps: Tensor::from_vec(&[NUM_KEYPOINTS, h, w], out)?,
        depths: pred.depths.clone(),
    })
}

/// Disparity discrepancy between domains:
/// `disp_OC(g_adv, g) - disp_NO(g_adv, g)`, where the occluded-side
/// adversarial heatmaps are optionally reweighted by the false-pose prior
/// before the loss.
pub fn disparity_discrepancy(
    adv_no: &[PosePrediction],
    main_no: &[PosePrediction],
    adv_oc: &[PosePrediction],
    main_oc: &[PosePrediction],
    prior: Option<&FalsePoseHeatmap>,
) -> Result<f64> {
    if adv_no.is_empty() || adv_oc.is_empty() {
        return Err(Error::InvalidInput(
            "disparity_discrepancy needs nonempty batches".into(),
        ));
    }
    let disp_oc = match prior {
        Some(p) => {
            let reweighted: Result<Vec<PosePrediction>> =
                adv_oc.iter().map(|a| apply_prior(a, p)).collect();
            disparity(&reweighted?, main_oc)?
        }
        None => disparity(adv_oc, main_oc)?,
    };
    let disp_no = disparity(adv_no, main_no)?;
    Ok(disp_oc - disp_no)
}
