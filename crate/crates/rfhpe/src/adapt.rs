//! Two-player alternating optimization transferring a trained network
//! from the labeled normal domain to an unlabeled occluded domain.
//!
//! An adversarial regressor head is split off the trained one. Each batch
//! alternates one ascent step on the adversary (maximizing the disparity
//! discrepancy between domains, with the false-pose prior bounding its
//! occluded-side output space) and one descent step on the extractor and
//! main regressor (supervised loss on normal data plus the weighted
//! discrepancy). The frozen player's bytes never change during the other
//! player's step.

use crate::error::{Error, Result};
use crate::eval::bounding_box_diag;
use crate::graph::{Tape, VarId};
use crate::io::Dataset;
use crate::loss::{accumulate_false_heatmap, FalsePoseHeatmap, PRIOR_FLOOR};
use crate::net::{
    apply_bn_updates, extractor_graph, predict_batch, regressor_graph, stack_frames, ForwardOpts,
    NetworkWeights, RegressorParams,
};
use crate::pose::{encode_targets, Calibration, HandPose, NUM_KEYPOINTS};
use crate::sim::derive_rng;
use crate::tensor::{ComplexTensor, Tensor};
use crate::train::{collect_grads_accumulate, Adam};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    /// Weight of the discrepancy term in the min step.
    pub lambda_dd: f64,
    pub seed: u64,
    /// Gaussian std (cells) of the false-pose prior.
    pub prior_sigma: f64,
    /// Truncation radius (cells) of the prior.
    pub prior_radius: f64,
    /// Mean normalized keypoint error above which a validation sample
    /// counts as wrongly predicted when accumulating the prior.
    pub wrong_threshold: f64,
    /// Epochs without discrepancy improvement before stopping; 0 disables.
    pub patience: usize,
    /// Normal-domain PCK@0.2 a checkpoint must reach before adaptation.
    pub min_pretrain_pck: f64,
    /// Std of the perturbation splitting the adversary off the regressor.
    pub adv_init_noise: f64,
    /// Heatmap target Gaussian std (cells) for the supervised term.
    pub sigma_hm: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 4,
            batch_size: 8,
            lr: 0.001,
            betas: (0.9, 0.999),
            lambda_dd: 1.0,
            seed: 0,
            prior_sigma: 2.0,
            prior_radius: 6.0,
            wrong_threshold: 0.2,
            patience: 5,
            min_pretrain_pck: 0.85,
            adv_init_noise: 1e-3,
            sigma_hm: 1.5,
        }
    }
}

/// All mutable state of the two-player game.
pub struct AdaptState {
    /// Extractor (phi) and main regressor (g).
    pub weights: NetworkWeights,
    /// Adversarial regressor (g'), never sharing storage with g.
    pub g_adv: RegressorParams,
    /// Frozen output-space prior computed from the pretraining sweep.
    pub prior: FalsePoseHeatmap,
    pub lambda_dd: f64,
    pub opt_min: Adam,
    pub opt_max: Adam,
    pub max_steps: u64,
    pub min_steps: u64,
}

impl AdaptState {
    pub fn new(weights: NetworkWeights, prior: FalsePoseHeatmap, cfg: &AdaptConfig) -> AdaptState {
        let mut rng = derive_rng(cfg.seed, 0x6164_7631);
        let g_adv = weights.regressor.perturbed(cfg.adv_init_noise, &mut rng);
        AdaptState {
            weights,
            g_adv,
            prior,
            lambda_dd: cfg.lambda_dd,
            opt_min: Adam::new(cfg.lr, cfg.betas),
            opt_max: Adam::new(cfg.lr, cfg.betas),
            max_steps: 0,
            min_steps: 0,
        }
    }
}

/// Per-sample weighted base regression loss between two (heatmaps, depths)
/// nodes: `sum_b w_b * (0.5 * mse(hm_b) + 0.5 * mse(d_b))`.
fn la_weighted(
    tape: &mut Tape,
    hm_a: VarId,
    d_a: VarId,
    hm_b: VarId,
    d_b: VarId,
    sample_weights: &[f64],
) -> Result<VarId> {
    let hs = tape.value(hm_a).shape().to_vec();
    let (b, k, h, w) = (hs[0], hs[1], hs[2], hs[3]);
    debug_assert_eq!(b, sample_weights.len());
    let khw = (k * h * w) as f64;

    let mut whm = Vec::with_capacity(b * k * h * w);
    let mut wd = Vec::with_capacity(b * k);
    for &sw in sample_weights {
        let vh = 0.5 * sw / khw;
        let vd = 0.5 * sw / k as f64;
        whm.extend(std::iter::repeat_n(vh, k * h * w));
        wd.extend(std::iter::repeat_n(vd, k));
    }

    let dh = tape.sub(hm_a, hm_b)?;
    let sh = tape.mul(dh, dh)?;
    let sh = tape.mul_const(sh, Tensor::from_vec(&[b, k, h, w], whm)?)?;
    let s1 = tape.sum_all(sh);

    let dd = tape.sub(d_a, d_b)?;
    let sd = tape.mul(dd, dd)?;
    let sd = tape.mul_const(sd, Tensor::from_vec(&[b, k], wd)?)?;
    let s2 = tape.sum_all(sd);

    tape.add(s1, s2)
}

/// Reweight `[B, K, H, W]` heatmaps by the prior grid (plus floor) and
/// renormalize each map.
fn prior_reweight(tape: &mut Tape, hm: VarId, prior: &FalsePoseHeatmap) -> Result<VarId> {
    let hs = tape.value(hm).shape().to_vec();
    let (b, k, h, w) = (hs[0], hs[1], hs[2], hs[3]);
    if prior.grid.shape() != [k, h, w] {
        return Err(Error::dimension(
            "prior_reweight",
            format!("[{k}, {h}, {w}]"),
            format!("{:?}", prior.grid.shape()),
        ));
    }
    let mut full = Vec::with_capacity(b * k * h * w);
    for _ in 0..b {
        full.extend(prior.grid.data().iter().map(|&g| g + PRIOR_FLOOR));
    }
    let weighted = tape.mul_const(hm, Tensor::from_vec(&[b, k, h, w], full)?)?;
    tape.renorm_hw(weighted)
}

struct DomainHeads {
    g_hm: VarId,
    g_d: VarId,
    adv_hm: VarId,
    adv_d: VarId,
    ext_leaves: Vec<(String, VarId)>,
    reg_leaves: Vec<(String, VarId)>,
    adv_leaves: Vec<(String, VarId)>,
    bn_updates: Vec<crate::net::BnUpdate>,
}

#[allow(clippy::too_many_arguments)]
fn domain_forward(
    tape: &mut Tape,
    weights: &NetworkWeights,
    g_adv: &RegressorParams,
    frames: &[&ComplexTensor],
    calib: &Calibration,
    grad_extractor: bool,
    grad_regressor: bool,
    grad_adv: bool,
) -> Result<DomainHeads> {
    let input = stack_frames(frames)?;
    let opts = ForwardOpts {
        batch_stats: true,
        collect_updates: grad_extractor,
        grad_extractor,
    };
    let ext = extractor_graph(tape, weights, &input, &opts)?;
    let g_out = regressor_graph(tape, &weights.regressor, ext.features, calib, grad_regressor, "reg")?;
    let adv_out = regressor_graph(tape, g_adv, ext.features, calib, grad_adv, "adv")?;
    Ok(DomainHeads {
        g_hm: g_out.heatmaps,
        g_d: g_out.depths_norm,
        adv_hm: adv_out.heatmaps,
        adv_d: adv_out.depths_norm,
        ext_leaves: ext.param_leaves,
        reg_leaves: g_out.param_leaves,
        adv_leaves: adv_out.param_leaves,
        bn_updates: ext.bn_updates,
    })
}

/// Discrepancy node over already-built domain heads:
/// `La(prior o adv_oc, g_oc) - La(adv_no, g_no)`.
fn dd_node(
    tape: &mut Tape,
    no: &DomainHeads,
    oc: &DomainHeads,
    prior: &FalsePoseHeatmap,
    b_no: usize,
    b_oc: usize,
) -> Result<VarId> {
    let adv_oc = prior_reweight(tape, oc.adv_hm, prior)?;
    let w_oc = vec![1.0 / b_oc as f64; b_oc];
    let pos = la_weighted(tape, adv_oc, oc.adv_d, oc.g_hm, oc.g_d, &w_oc)?;
    let w_no = vec![-1.0 / b_no as f64; b_no];
    let neg = la_weighted(tape, no.adv_hm, no.adv_d, no.g_hm, no.g_d, &w_no)?;
    tape.add(pos, neg)
}

/// One ascent step on the adversary; extractor and main regressor stay
/// byte-identical. Returns the discrepancy estimate before the update.
pub fn adapt_step_max(
    state: &mut AdaptState,
    batch_no: &[&ComplexTensor],
    batch_oc: &[&ComplexTensor],
    calib: &Calibration,
) -> Result<f64> {
    if batch_oc.is_empty() {
        return Err(Error::InvalidInput("empty occluded batch".into()));
    }
    let mut tape = Tape::new(true);
    let no = domain_forward(
        &mut tape,
        &state.weights,
        &state.g_adv,
        batch_no,
        calib,
        false,
        false,
        true,
    )?;
    let oc = domain_forward(
        &mut tape,
        &state.weights,
        &state.g_adv,
        batch_oc,
        calib,
        false,
        false,
        true,
    )?;
    let dd = dd_node(&mut tape, &no, &oc, &state.prior, batch_no.len(), batch_oc.len())?;
    let dd_value = tape.value(dd).item();
    // ascent realized as descent on the negated objective
    let loss = tape.scale(dd, -1.0);
    tape.backward(loss)?;

    let mut leaves = no.adv_leaves;
    leaves.extend(oc.adv_leaves);
    let grads = collect_grads_accumulate(&tape, &leaves);
    state.opt_max.begin_step();
    apply_reg_grads(&mut state.g_adv, &mut state.opt_max, &grads);
    state.max_steps += 1;
    Ok(dd_value)
}

/// One descent step on the extractor and main regressor; the adversary
/// stays byte-identical. Returns (supervised loss, discrepancy estimate).
pub fn adapt_step_min(
    state: &mut AdaptState,
    batch_no: &[&ComplexTensor],
    gt_no: &[HandPose],
    batch_oc: &[&ComplexTensor],
    calib: &Calibration,
    sigma_hm: f64,
) -> Result<(f64, f64)> {
    if batch_oc.is_empty() {
        return Err(Error::InvalidInput("empty occluded batch".into()));
    }
    if batch_no.len() != gt_no.len() {
        return Err(Error::InvalidInput(
            "normal batch and labels are misaligned".into(),
        ));
    }
    let mut tape = Tape::new(true);
    let no = domain_forward(
        &mut tape,
        &state.weights,
        &state.g_adv,
        batch_no,
        calib,
        true,
        true,
        false,
    )?;
    let oc = domain_forward(
        &mut tape,
        &state.weights,
        &state.g_adv,
        batch_oc,
        calib,
        true,
        true,
        false,
    )?;

    // supervised term on encoded ground-truth targets
    let b_no = batch_no.len();
    let (k, h, w) = (
        NUM_KEYPOINTS,
        calib.grid.0,
        calib.grid.1,
    );
    let mut hm_t = Vec::with_capacity(b_no * k * h * w);
    let mut d_t = Vec::with_capacity(b_no * k);
    for pose in gt_no {
        let enc = encode_targets(pose, calib, sigma_hm);
        hm_t.extend_from_slice(enc.target.heatmaps.data());
        d_t.extend_from_slice(enc.target.depths.data());
    }
    let hm_t = tape.constant(Tensor::from_vec(&[b_no, k, h, w], hm_t)?);
    let d_t = tape.constant(Tensor::from_vec(&[b_no, k], d_t)?);
    let w_sup = vec![1.0 / b_no as f64; b_no];
    let supervised = la_weighted(&mut tape, no.g_hm, no.g_d, hm_t, d_t, &w_sup)?;

    let dd = dd_node(&mut tape, &no, &oc, &state.prior, b_no, batch_oc.len())?;
    let dd_value = tape.value(dd).item();
    let sup_value = tape.value(supervised).item();
    let weighted_dd = tape.scale(dd, state.lambda_dd);
    let loss = tape.add(supervised, weighted_dd)?;
    tape.backward(loss)?;

    let mut leaves = no.ext_leaves;
    leaves.extend(no.reg_leaves);
    leaves.extend(oc.ext_leaves);
    leaves.extend(oc.reg_leaves);
    let grads = collect_grads_accumulate(&tape, &leaves);
    crate::train::apply_grads(&mut state.weights, &mut state.opt_min, &grads);
    apply_bn_updates(&mut state.weights, &tape, &no.bn_updates);
    apply_bn_updates(&mut state.weights, &tape, &oc.bn_updates);
    state.min_steps += 1;
    Ok((sup_value, dd_value))
}

fn apply_reg_grads(reg: &mut RegressorParams, opt: &mut Adam, grads: &BTreeMap<String, Tensor>) {
    reg.for_each_mut("adv", |name, param| {
        if let Some(g) = grads.get(name) {
            opt.update(name, param, g);
        }
    });
}

/// Mean normalized keypoint error of one prediction.
fn mean_normalized_error(pred: &HandPose, gt: &HandPose) -> Result<f64> {
    let diag = bounding_box_diag(gt)?;
    let mut acc = 0.0;
    for (p, g) in pred.keypoints.iter().zip(gt.keypoints.iter()) {
        let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
        acc += d / diag;
    }
    Ok(acc / NUM_KEYPOINTS as f64)
}

/// Sweep a trained network over the validation split and accumulate the
/// false-pose prior from its wrongly predicted poses.
pub fn build_prior(
    weights: &NetworkWeights,
    val: &Dataset,
    calib: &Calibration,
    cfg: &AdaptConfig,
) -> Result<FalsePoseHeatmap> {
    let frames: Vec<_> = (0..val.len()).map(|i| val.frame(i)).collect();
    let refs: Vec<&_> = frames.iter().collect();
    let preds = predict_batch(weights, &refs, calib)?;
    let mut wrong = Vec::new();
    for (i, (_, pose)) in preds.iter().enumerate() {
        if mean_normalized_error(pose, &val.poses[i])? > cfg.wrong_threshold {
            wrong.push(*pose);
        }
    }
    accumulate_false_heatmap(&wrong, cfg.prior_sigma, cfg.prior_radius, calib)
}

#[derive(Clone, Debug)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub pck_no: f64,
    pub pck_oc: f64,
    pub dd_estimate: f64,
}

/// Occluded-domain batches draw from these datasets; labels inside are
/// never read by the adaptation loop.
pub struct OccludedPool<'a> {
    pub datasets: Vec<&'a Dataset>,
}

impl<'a> OccludedPool<'a> {
    pub fn len(&self) -> usize {
        self.datasets.iter().map(|d| d.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, mut idx: usize) -> ComplexTensor {
        for d in &self.datasets {
            if idx < d.len() {
                return d.frame(idx);
            }
            idx -= d.len();
        }
        panic!("occluded pool index out of range");
    }
}

/// Full adaptation run. `val_no` gates the precondition, seeds the prior,
/// and provides the per-epoch normal-domain PCK; `val_oc` is used only by
/// this evaluation harness for the occluded PCK column.
pub fn run_adaptation(
    pretrained: &NetworkWeights,
    data_no: &Dataset,
    val_no: &Dataset,
    data_oc: &OccludedPool,
    val_oc: Option<&Dataset>,
    cfg: &AdaptConfig,
    calib: &Calibration,
) -> Result<(NetworkWeights, Vec<AdaptEpoch>)> {
    let pre_pck = crate::train::evaluate_pck(pretrained, val_no, calib, None)?;
    if pre_pck < cfg.min_pretrain_pck {
        return Err(Error::Contract(format!(
            "pretrained network reaches PCK@0.2 = {pre_pck:.4} on the normal validation split, \
             below the required {:.2}; refusing to adapt an untrained network",
            cfg.min_pretrain_pck
        )));
    }
    if data_oc.is_empty() {
        return Err(Error::InvalidInput("occluded pool is empty".into()));
    }

    let prior = build_prior(pretrained, val_no, calib, cfg)?;
    let mut state = AdaptState::new(pretrained.clone(), prior, cfg);
    let mut history = Vec::new();
    let mut best_dd = f64::INFINITY;
    let mut stale = 0usize;

    let mut no_indices: Vec<usize> = (0..data_no.len()).collect();
    let mut oc_indices: Vec<usize> = (0..data_oc.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5050).wrapping_add(epoch as u64));
        no_indices.shuffle(&mut rng);
        oc_indices.shuffle(&mut rng);
        let batches = (no_indices.len() / cfg.batch_size).min(oc_indices.len() / cfg.batch_size);
        let mut dd_sum = 0.0;
        for b in 0..batches {
            let no_chunk = &no_indices[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let oc_chunk = &oc_indices[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let no_frames: Vec<_> = no_chunk.iter().map(|&i| data_no.frame(i)).collect();
            let no_refs: Vec<&_> = no_frames.iter().collect();
            let gt_no: Vec<HandPose> = no_chunk.iter().map(|&i| data_no.poses[i]).collect();
            let oc_frames: Vec<_> = oc_chunk.iter().map(|&i| data_oc.frame(i)).collect();
            let oc_refs: Vec<&_> = oc_frames.iter().collect();

            adapt_step_max(&mut state, &no_refs, &oc_refs, calib)?;
            let (_, dd) = adapt_step_min(&mut state, &no_refs, &gt_no, &oc_refs, calib, cfg.sigma_hm)?;
            dd_sum += dd;
        }
        let dd_estimate = dd_sum / batches.max(1) as f64;
        let pck_no = crate::train::evaluate_pck(&state.weights, val_no, calib, None)?;
        let pck_oc = match val_oc {
            Some(v) => crate::train::evaluate_pck(&state.weights, v, calib, None)?,
            None => f64::NAN,
        };
        eprintln!(
            "adapt epoch {epoch}: pck_no {pck_no:.4}, pck_oc {}, dd {dd_estimate:.6}",
            if pck_oc.is_nan() { "n/a".to_string() } else { format!("{pck_oc:.4}") }
        );
        history.push(AdaptEpoch {
            epoch,
            pck_no,
            pck_oc,
            dd_estimate,
        });
        if cfg.patience > 0 {
            if dd_estimate.abs() + 1e-4 < best_dd {
                best_dd = dd_estimate.abs();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok((state.weights, history))
}
