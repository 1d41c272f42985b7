//! Adam optimizer and the cross-modality pretraining loop.
//!
//! Pretraining supervises the decoded keypoints directly: the heatmap
//! soft-argmax and scaled depth are part of the graph, and the batch loss
//! is the teacher-weighted imitation objective over (student, teacher,
//! ground-truth) pose triples. Teacher reliability weights come from
//! statistics over the entire training set.

use crate::error::{Error, Result};
use crate::eval::{pck_at, PckReport};
use crate::graph::{Tape, VarId};
use crate::io::Dataset;
use crate::loss::{compute_teacher_stats, TeacherStats};
use crate::net::{
    apply_bn_updates, extractor_graph, predict_batch, regressor_graph, stack_frames, ForwardOpts,
    NetworkWeights,
};
use crate::pose::{Calibration, HandPose, NUM_KEYPOINTS};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Adam with per-parameter first/second moment state keyed by name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Adam {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the step counter; call once per optimization step before
    /// applying per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one named parameter in place from its gradient.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        debug_assert!(self.t > 0, "begin_step before update");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Pull gradients for the given leaves off a tape after backward.
pub fn collect_grads(tape: &Tape, leaves: &[(String, VarId)]) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, id) in leaves {
        if let Some(g) = tape.grad(*id) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

/// Like [`collect_grads`], but sums gradients when the same parameter was
/// registered as several leaves (one per domain batch).
pub fn collect_grads_accumulate(
    tape: &Tape,
    leaves: &[(String, VarId)],
) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, id) in leaves {
        if let Some(g) = tape.grad(*id) {
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
    }
    out
}

/// Apply collected gradients to the full network in visit order.
pub fn apply_grads(weights: &mut NetworkWeights, opt: &mut Adam, grads: &BTreeMap<String, Tensor>) {
    opt.begin_step();
    let mut pending: Vec<(String, Tensor)> = Vec::new();
    weights.for_each_param(|name, _| {
        if let Some(g) = grads.get(name) {
            pending.push((name.to_string(), g.clone()));
        }
    });
    let mut iter = pending.into_iter().peekable();
    weights.for_each_param_mut(|name, param| {
        if iter.peek().map(|(n, _)| n.as_str()) == Some(name) {
            let (n, g) = iter.next().expect("peeked");
            opt.update(&n, param, &g);
        }
    });
}

/// Pose batch flattened into the (xy, z) layout used by the loss graph.
pub struct PoseTargets {
    pub xy: Tensor,
    pub z: Tensor,
}

pub fn pose_targets(poses: &[HandPose]) -> PoseTargets {
    let b = poses.len();
    let mut xy = Vec::with_capacity(b * NUM_KEYPOINTS * 2);
    let mut z = Vec::with_capacity(b * NUM_KEYPOINTS);
    for p in poses {
        for kp in &p.keypoints {
            xy.push(kp[0]);
            xy.push(kp[1]);
            z.push(kp[2]);
        }
    }
    PoseTargets {
        xy: Tensor::from_vec(&[b, NUM_KEYPOINTS, 2], xy).expect("shape"),
        z: Tensor::from_vec(&[b, NUM_KEYPOINTS], z).expect("shape"),
    }
}

/// Add `sum_b w_b / (B * K) * sum_els (pred - target)^2` over the xy and z
/// parts to the graph.
fn weighted_sq_term(
    tape: &mut Tape,
    xy: VarId,
    z: VarId,
    targets: &PoseTargets,
    weights_per_sample: &[f64],
) -> Result<VarId> {
    let b = weights_per_sample.len();
    let k = NUM_KEYPOINTS;
    let norm = 1.0 / (b as f64 * k as f64);

    let mut wxy = Vec::with_capacity(b * k * 2);
    let mut wz = Vec::with_capacity(b * k);
    for &w in weights_per_sample {
        for _ in 0..k {
            wxy.push(w * norm);
            wxy.push(w * norm);
            wz.push(w * norm);
        }
    }

    let txy = tape.constant(targets.xy.clone());
    let dxy = tape.sub(xy, txy)?;
    let sxy = tape.mul(dxy, dxy)?;
    let wxy = tape.mul_const(sxy, Tensor::from_vec(&[b, k, 2], wxy)?)?;
    let s1 = tape.sum_all(wxy);

    let tz = tape.constant(targets.z.clone());
    let dz = tape.sub(z, tz)?;
    let sz = tape.mul(dz, dz)?;
    let wz = tape.mul_const(sz, Tensor::from_vec(&[b, k], wz)?)?;
    let s2 = tape.sum_all(wz);

    tape.add(s1, s2)
}

/// Imitation loss on the graph: alpha-weighted ground-truth term plus
/// (1 - alpha) * phi weighted teacher term.
pub fn imitation_loss_graph(
    tape: &mut Tape,
    xy: VarId,
    z: VarId,
    gt: &PoseTargets,
    teacher: &PoseTargets,
    alpha: f64,
    phi: &[f64],
) -> Result<VarId> {
    let gt_weights: Vec<f64> = vec![alpha; phi.len()];
    let teach_weights: Vec<f64> = phi.iter().map(|p| (1.0 - alpha) * p).collect();
    let a = weighted_sq_term(tape, xy, z, gt, &gt_weights)?;
    let b = weighted_sq_term(tape, xy, z, teacher, &teach_weights)?;
    tape.add(a, b)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub alpha: f64,
    pub seed: u64,
    /// Weight of the output-space alignment term (base regression loss
    /// against encoded targets, attentively weighted like the keypoint
    /// term). Dense heatmap gradients make desk-scale training converge;
    /// zero disables the term.
    pub heatmap_weight: f64,
    /// Gaussian std (cells) of encoded target heatmaps.
    pub sigma_hm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 0.001,
            betas: (0.9, 0.999),
            alpha: 0.5,
            seed: 0,
            heatmap_weight: 30.0,
            sigma_hm: 1.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pck: f64,
}

/// Overall PCK@0.2 of a network on a dataset (optionally only its first
/// `limit` samples).
pub fn evaluate_pck(
    weights: &NetworkWeights,
    ds: &Dataset,
    calib: &Calibration,
    limit: Option<usize>,
) -> Result<f64> {
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    if n == 0 {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let frames: Vec<_> = (0..n).map(|i| ds.frame(i)).collect();
    let refs: Vec<&_> = frames.iter().collect();
    let preds = predict_batch(weights, &refs, calib)?;
    let poses: Vec<HandPose> = preds.into_iter().map(|(_, p)| p).collect();
    pck_at(&poses, &ds.poses[..n], 0.2)
}

/// Per-group report over a dataset.
pub fn evaluate_report(
    weights: &NetworkWeights,
    ds: &Dataset,
    calib: &Calibration,
    a: f64,
) -> Result<PckReport> {
    let frames: Vec<_> = (0..ds.len()).map(|i| ds.frame(i)).collect();
    let refs: Vec<&_> = frames.iter().collect();
    let preds = predict_batch(weights, &refs, calib)?;
    let poses: Vec<HandPose> = preds.into_iter().map(|(_, p)| p).collect();
    crate::eval::pck_by_group(&poses, &ds.poses, a)
}

/// Per-sample weighted base regression loss between prediction nodes and
/// constant targets: `sum_b w_b * (0.5 * mse(hm) + 0.5 * mse(depths))`.
pub fn la_graph_const(
    tape: &mut Tape,
    heatmaps: VarId,
    depths: VarId,
    target_hm: &Tensor,
    target_d: &Tensor,
    sample_weights: &[f64],
) -> Result<VarId> {
    let hs = tape.value(heatmaps).shape().to_vec();
    let (b, k, h, w) = (hs[0], hs[1], hs[2], hs[3]);
    let khw = (k * h * w) as f64;
    let mut whm = Vec::with_capacity(b * k * h * w);
    let mut wd = Vec::with_capacity(b * k);
    for &sw in sample_weights {
        whm.extend(std::iter::repeat_n(0.5 * sw / khw, k * h * w));
        wd.extend(std::iter::repeat_n(0.5 * sw / k as f64, k));
    }
    let t_hm = tape.constant(target_hm.clone());
    let dh = tape.sub(heatmaps, t_hm)?;
    let sh = tape.mul(dh, dh)?;
    let sh = tape.mul_const(sh, Tensor::from_vec(&[b, k, h, w], whm)?)?;
    let s1 = tape.sum_all(sh);
    let t_d = tape.constant(target_d.clone());
    let dd = tape.sub(depths, t_d)?;
    let sd = tape.mul(dd, dd)?;
    let sd = tape.mul_const(sd, Tensor::from_vec(&[b, k], wd)?)?;
    let s2 = tape.sum_all(sd);
    tape.add(s1, s2)
}

/// Encode a pose batch into stacked heatmap/depth target tensors.
pub fn encoded_target_batch(
    poses: &[HandPose],
    calib: &Calibration,
    sigma_hm: f64,
) -> (Tensor, Tensor) {
    let b = poses.len();
    let (h, w) = calib.grid;
    let mut hm = Vec::with_capacity(b * NUM_KEYPOINTS * h * w);
    let mut d = Vec::with_capacity(b * NUM_KEYPOINTS);
    for pose in poses {
        let enc = crate::pose::encode_targets(pose, calib, sigma_hm);
        hm.extend_from_slice(enc.target.heatmaps.data());
        d.extend_from_slice(enc.target.depths.data());
    }
    (
        Tensor::from_vec(&[b, NUM_KEYPOINTS, h, w], hm).expect("shape"),
        Tensor::from_vec(&[b, NUM_KEYPOINTS], d).expect("shape"),
    )
}

/// One optimization step over a frame batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    weights: &mut NetworkWeights,
    opt: &mut Adam,
    frames: &[crate::tensor::ComplexTensor],
    gt: &[HandPose],
    teacher: &[HandPose],
    phi: &[f64],
    cfg: &TrainConfig,
    calib: &Calibration,
) -> Result<f64> {
    let mut tape = Tape::new(true);
    let refs: Vec<&_> = frames.iter().collect();
    let input = stack_frames(&refs)?;
    let opts = ForwardOpts {
        batch_stats: true,
        collect_updates: true,
        grad_extractor: true,
    };
    let ext = extractor_graph(&mut tape, weights, &input, &opts)?;
    let reg = regressor_graph(&mut tape, &weights.regressor, ext.features, calib, true, "reg")?;

    let gt_t = pose_targets(gt);
    let teach_t = pose_targets(teacher);
    let alpha = cfg.alpha;
    let mut loss =
        imitation_loss_graph(&mut tape, reg.xy, reg.z, &gt_t, &teach_t, alpha, phi)?;

    if cfg.heatmap_weight > 0.0 {
        // heatmap-space alignment with the same attentive weighting; depths
        // are already supervised through the metric z term
        let b = phi.len();
        let hs = tape.value(reg.heatmaps).shape().to_vec();
        let (k, h, w) = (hs[1], hs[2], hs[3]);
        let khw = (k * h * w) as f64;
        let mut aux_term = |targets: &[HandPose], weights_per_sample: Vec<f64>,
                            tape: &mut Tape|
         -> Result<VarId> {
            let (t_hm, _) = encoded_target_batch(targets, calib, cfg.sigma_hm);
            let mut whm = Vec::with_capacity(b * k * h * w);
            for &sw in &weights_per_sample {
                whm.extend(std::iter::repeat_n(sw / (b as f64 * khw), k * h * w));
            }
            let t = tape.constant(t_hm);
            let dh = tape.sub(reg.heatmaps, t)?;
            let sh = tape.mul(dh, dh)?;
            let sh = tape.mul_const(sh, Tensor::from_vec(&[b, k, h, w], whm)?)?;
            Ok(tape.sum_all(sh))
        };
        let w_gt: Vec<f64> = phi.iter().map(|_| alpha * cfg.heatmap_weight).collect();
        let aux_gt = aux_term(gt, w_gt, &mut tape)?;
        loss = tape.add(loss, aux_gt)?;
        if alpha < 1.0 {
            let w_te: Vec<f64> = phi
                .iter()
                .map(|p| (1.0 - alpha) * p * cfg.heatmap_weight)
                .collect();
            let aux_te = aux_term(teacher, w_te, &mut tape)?;
            loss = tape.add(loss, aux_te)?;
        }
    }

    let loss_value = tape.value(loss).item();
    tape.backward(loss)?;

    let mut leaves = ext.param_leaves;
    leaves.extend(reg.param_leaves);
    let grads = collect_grads(&tape, &leaves);
    apply_grads(weights, opt, &grads);
    apply_bn_updates(weights, &tape, &ext.bn_updates);
    Ok(loss_value)
}

/// Cross-modality pretraining over a labeled normal-domain dataset with
/// teacher records. Returns per-epoch statistics and the teacher stats.
pub fn pretrain(
    weights: &mut NetworkWeights,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    calib: &Calibration,
) -> Result<(Vec<EpochStats>, TeacherStats)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training dataset".into()));
    }
    let stats = compute_teacher_stats(&train.teacher, &train.poses)?;
    let mut opt = Adam::new(cfg.lr, cfg.betas);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let frames: Vec<_> = chunk.iter().map(|&i| train.frame(i)).collect();
            let gt: Vec<HandPose> = chunk.iter().map(|&i| train.poses[i]).collect();
            let teacher: Vec<HandPose> = chunk.iter().map(|&i| train.teacher[i]).collect();
            let phi: Vec<f64> = chunk.iter().map(|&i| stats.phi[i]).collect();
            loss_sum += pretrain_step(
                weights, &mut opt, &frames, &gt, &teacher, &phi, cfg, calib,
            )?;
            batches += 1;
        }
        let val_pck = match val {
            Some(v) => evaluate_pck(weights, v, calib, None)?,
            None => f64::NAN,
        };
        eprintln!(
            "epoch {epoch}: loss {:.6}, val PCK@0.2 {}",
            loss_sum / batches.max(1) as f64,
            if val_pck.is_nan() { "n/a".to_string() } else { format!("{val_pck:.4}") }
        );
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_pck,
        });
    }
    Ok((history, stats))
}
