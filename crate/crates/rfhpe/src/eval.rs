//! PCK (percentage of correct keypoints) metrics with per-joint-group
//! reporting.
//!
//! A keypoint counts as correct at threshold `a` when its Euclidean
//! distance to ground truth, divided by the ground-truth hand's bounding
//! box diagonal, is at most `a`.

use crate::error::{Error, Result};
use crate::pose::{joint_group, HandPose, JointGroup, NUM_KEYPOINTS};
use std::fmt::Write as _;

/// Diagonal of the axis-aligned bounding box of a pose, in meters.
pub fn bounding_box_diag(gt: &HandPose) -> Result<f64> {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for kp in &gt.keypoints {
        for d in 0..3 {
            min[d] = min[d].min(kp[d]);
            max[d] = max[d].max(kp[d]);
        }
    }
    let diag = ((max[0] - min[0]).powi(2) + (max[1] - min[1]).powi(2) + (max[2] - min[2]).powi(2))
        .sqrt();
    if diag <= 0.0 {
        return Err(Error::InvalidInput(
            "degenerate pose: all keypoints coincide, bounding box diagonal is zero".into(),
        ));
    }
    Ok(diag)
}

fn check_aligned(preds: &[HandPose], gts: &[HandPose], a: f64) -> Result<()> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "pck needs aligned nonempty sets, got {} predictions / {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if a <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "pck threshold must be positive, got {a}"
        )));
    }
    Ok(())
}

/// Overall PCK@a over all keypoints of all samples.
pub fn pck_at(preds: &[HandPose], gts: &[HandPose], a: f64) -> Result<f64> {
    check_aligned(preds, gts, a)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in preds.iter().zip(gts.iter()) {
        let diag = bounding_box_diag(g)?;
        for k in 0..NUM_KEYPOINTS {
            let d = dist(p.keypoints[k], g.keypoints[k]);
            if d / diag <= a {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// PCK broken down by joint group.
#[derive(Clone, Debug, PartialEq)]
pub struct PckReport {
    pub overall: f64,
    /// In [`JointGroup::FINGER_GROUPS`] order: MCP, PIP, DIP, fingertip.
    pub per_group: [f64; 4],
    pub wrist: f64,
    pub threshold: f64,
    pub samples: usize,
}

impl PckReport {
    pub fn group(&self, g: JointGroup) -> f64 {
        match g {
            JointGroup::Wrist => self.wrist,
            JointGroup::Mcp => self.per_group[0],
            JointGroup::Pip => self.per_group[1],
            JointGroup::Dip => self.per_group[2],
            JointGroup::Fingertip => self.per_group[3],
        }
    }
}

/// Per-group PCK@a. The overall value is the keypoint-count-weighted mean
/// of the finger groups plus the wrist.
pub fn pck_by_group(preds: &[HandPose], gts: &[HandPose], a: f64) -> Result<PckReport> {
    check_aligned(preds, gts, a)?;
    let mut hits = [0usize; 5]; // wrist, mcp, pip, dip, tip
    let mut totals = [0usize; 5];
    for (p, g) in preds.iter().zip(gts.iter()) {
        let diag = bounding_box_diag(g)?;
        for k in 0..NUM_KEYPOINTS {
            let idx = match joint_group(k) {
                JointGroup::Wrist => 0,
                JointGroup::Mcp => 1,
                JointGroup::Pip => 2,
                JointGroup::Dip => 3,
                JointGroup::Fingertip => 4,
            };
            totals[idx] += 1;
            if dist(p.keypoints[k], g.keypoints[k]) / diag <= a {
                hits[idx] += 1;
            }
        }
    }
    let total_hits: usize = hits.iter().sum();
    let total: usize = totals.iter().sum();
    Ok(PckReport {
        overall: total_hits as f64 / total as f64,
        per_group: [
            hits[1] as f64 / totals[1] as f64,
            hits[2] as f64 / totals[2] as f64,
            hits[3] as f64 / totals[3] as f64,
            hits[4] as f64 / totals[4] as f64,
        ],
        wrist: hits[0] as f64 / totals[0] as f64,
        threshold: a,
        samples: preds.len(),
    })
}

/// CSV rows for reports over a grid of thresholds, plus a header.
pub fn reports_to_csv(reports: &[PckReport]) -> String {
    let mut out = String::from("threshold,overall,MCP,PIP,DIP,fingertip,wrist,samples\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.threshold,
            r.overall,
            r.per_group[0],
            r.per_group[1],
            r.per_group[2],
            r.per_group[3],
            r.wrist,
            r.samples
        );
    }
    out
}

/// Fixed-width table for terminal output.
pub fn reports_to_table(reports: &[PckReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9} {:>8} {:>8} {:>8} {:>8} {:>10} {:>8}",
        "PCK@a", "overall", "MCP", "PIP", "DIP", "fingertip", "wrist"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:>9.3} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4} {:>8.4}",
            r.threshold,
            r.overall,
            r.per_group[0],
            r.per_group[1],
            r.per_group[2],
            r.per_group[3],
            r.wrist
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> HandPose {
        let mut p = HandPose::zeros();
        for kp in p.keypoints.iter_mut() {
            *kp = [
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ];
        }
        p
    }

    #[test]
    fn diag_of_unit_cube_corners() {
        let mut p = HandPose::zeros();
        p.keypoints[1] = [1.0, 1.0, 1.0];
        let d = bounding_box_diag(&p).unwrap();
        assert!((d - 3.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn diag_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 0.3);
        let q = p.translated([0.7, -0.4, 2.0]);
        assert!((bounding_box_diag(&p).unwrap() - bounding_box_diag(&q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn diag_matches_brute_force_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_pose(&mut rng, 0.5);
            let mut min = [f64::INFINITY; 3];
            let mut max = [f64::NEG_INFINITY; 3];
            for kp in &p.keypoints {
                for d in 0..3 {
                    if kp[d] < min[d] {
                        min[d] = kp[d];
                    }
                    if kp[d] > max[d] {
                        max[d] = kp[d];
                    }
                }
            }
            let expected = ((max[0] - min[0]).powi(2)
                + (max[1] - min[1]).powi(2)
                + (max[2] - min[2]).powi(2))
            .sqrt();
            assert_eq!(bounding_box_diag(&p).unwrap(), expected);
        }
    }

    #[test]
    fn diag_rejects_degenerate_pose() {
        assert!(bounding_box_diag(&HandPose::zeros()).is_err());
    }

    #[test]
    fn pck_perfect_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts: Vec<HandPose> = (0..10).map(|_| random_pose(&mut rng, 0.2)).collect();
        assert_eq!(pck_at(&gts, &gts, 0.2).unwrap(), 1.0);
        let report = pck_by_group(&gts, &gts, 0.2).unwrap();
        assert_eq!(report.overall, 1.0);
        assert_eq!(report.per_group, [1.0; 4]);
    }

    #[test]
    fn pck_single_keypoint_threshold_cases() {
        // one keypoint displaced by 0.1 * diag: in at a=0.2, out at a=0.05
        let mut gt = HandPose::zeros();
        gt.keypoints[1] = [1.0, 0.0, 0.0]; // diag = 1
        let mut pred = gt;
        pred.keypoints[5] = [gt.keypoints[5][0] + 0.1, 0.0, 0.0];
        let p2 = pck_at(&[pred], &[gt], 0.2).unwrap();
        let p005 = pck_at(&[pred], &[gt], 0.05).unwrap();
        assert_eq!(p2, 1.0);
        assert!((p005 - 20.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn pck_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gts: Vec<HandPose> = (0..50).map(|_| random_pose(&mut rng, 0.2)).collect();
        let preds: Vec<HandPose> = gts
            .iter()
            .map(|g| {
                let mut p = *g;
                for kp in p.keypoints.iter_mut() {
                    for d in kp.iter_mut() {
                        *d += rng.random_range(-0.05..0.05);
                    }
                }
                p
            })
            .collect();
        let mut last = 0.0;
        let mut a = 0.05;
        while a <= 0.5 {
            let v = pck_at(&preds, &gts, a).unwrap();
            assert!(v >= last);
            last = v;
            a += 0.05;
        }
    }

    #[test]
    fn pck_translation_invariant_jointly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gts: Vec<HandPose> = (0..10).map(|_| random_pose(&mut rng, 0.2)).collect();
        let preds: Vec<HandPose> = (0..10).map(|_| random_pose(&mut rng, 0.2)).collect();
        let v = pck_at(&preds, &gts, 0.2).unwrap();
        let shift = [0.3, -0.2, 0.5];
        let preds_t: Vec<HandPose> = preds.iter().map(|p| p.translated(shift)).collect();
        let gts_t: Vec<HandPose> = gts.iter().map(|g| g.translated(shift)).collect();
        assert_eq!(pck_at(&preds_t, &gts_t, 0.2).unwrap(), v);
    }

    #[test]
    fn pck_rejects_misaligned_sets() {
        let gts = vec![HandPose::zeros(); 2];
        let preds = vec![HandPose::zeros(); 3];
        assert!(matches!(
            pck_at(&preds, &gts, 0.2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn group_isolation_of_fingertips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gts: Vec<HandPose> = (0..8).map(|_| random_pose(&mut rng, 0.2)).collect();
        let preds: Vec<HandPose> = gts
            .iter()
            .map(|g| {
                let mut p = *g;
                for k in 0..NUM_KEYPOINTS {
                    if joint_group(k) == JointGroup::Fingertip {
                        p.keypoints[k][0] += 10.0; // far beyond any threshold
                    }
                }
                p
            })
            .collect();
        let report = pck_by_group(&preds, &gts, 0.2).unwrap();
        assert_eq!(report.per_group[3], 0.0);
        assert_eq!(report.per_group[0], 1.0);
        assert_eq!(report.per_group[1], 1.0);
        assert_eq!(report.per_group[2], 1.0);
        assert_eq!(report.wrist, 1.0);
    }

    #[test]
    fn overall_is_weighted_mean_of_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gts: Vec<HandPose> = (0..30).map(|_| random_pose(&mut rng, 0.2)).collect();
        let preds: Vec<HandPose> = gts
            .iter()
            .map(|g| {
                let mut p = *g;
                for kp in p.keypoints.iter_mut() {
                    for d in kp.iter_mut() {
                        *d += rng.random_range(-0.08..0.08);
                    }
                }
                p
            })
            .collect();
        let r = pck_by_group(&preds, &gts, 0.2).unwrap();
        let recomposed = (r.wrist * 1.0
            + r.per_group.iter().map(|g| g * 5.0).sum::<f64>())
            / NUM_KEYPOINTS as f64;
        assert!((r.overall - recomposed).abs() < 1e-12);
        // and the overall agrees with pck_at
        assert_eq!(r.overall, pck_at(&preds, &gts, 0.2).unwrap());
    }

    #[test]
    fn csv_lists_all_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gts: Vec<HandPose> = (0..4).map(|_| random_pose(&mut rng, 0.2)).collect();
        let r = pck_by_group(&gts, &gts, 0.2).unwrap();
        let csv = reports_to_csv(&[r]);
        for g in ["MCP", "PIP", "DIP", "fingertip"] {
            assert!(csv.contains(g));
        }
    }
}
