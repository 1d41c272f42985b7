//! Command implementations behind the CLI: dataset synthesis, pretraining,
//! adaptation, evaluation and inference. These are plain library functions
//! so tests drive them directly; the binary only maps them onto flags and
//! exit codes.

use crate::adapt::{run_adaptation, AdaptConfig, OccludedPool};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{pck_by_group, reports_to_csv, reports_to_table, PckReport};
use crate::io::{load_checkpoint, save_checkpoint, Dataset, Manifest};
use crate::net::{build_network, predict_batch, NetworkWeights};
use crate::pose::{Calibration, HandPose};
use crate::sim::{generate_dataset, GenConfig, MaterialKind};
use crate::train::{evaluate_pck, pretrain, EpochStats, TrainConfig};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub fn default_calibration() -> Calibration {
    Calibration::default()
}

/// Generate one dataset directory per requested material under `out`.
/// Returns (subdirectory, manifest) pairs in invocation order.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<(PathBuf, Manifest)>> {
    if cfg.count == 0 {
        return Err(Error::InvalidInput("--count must be >= 1".into()));
    }
    let mut results = Vec::new();
    for name in &cfg.materials {
        let material = MaterialKind::from_name(name)?;
        let domain = if material == MaterialKind::Identity {
            "normal"
        } else {
            "occluded"
        };
        let sub = out.join(format!("{domain}-{name}"));
        let mut gen = GenConfig::new(cfg.seed, material);
        gen.noise_std = cfg.noise_std;
        gen.teacher_noise = cfg.teacher_noise;
        let manifest = generate_dataset(cfg.count, &gen, &sub, cfg.deterministic)?;
        println!(
            "wrote {}: {} samples, domain={}, material={}, seed={}",
            sub.display(),
            manifest.count,
            manifest.domain,
            manifest.material,
            manifest.seed
        );
        results.push((sub, manifest));
    }
    Ok(results)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn history_path(ckpt: &Path, suffix: &str) -> PathBuf {
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "checkpoint".to_string());
    ckpt.with_file_name(format!("{stem}_{suffix}.csv"))
}

pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochStats>,
    pub final_val_pck: f64,
}

/// Cross-modality pretraining from a normal-domain dataset with teacher
/// records.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    data_dir: &Path,
    val_dir: Option<&Path>,
    out_ckpt: &Path,
) -> Result<PretrainSummary> {
    if !data_dir.join("teacher.bin").exists() {
        return Err(Error::InvalidInput(format!(
            "{}: no teacher records; distillation requires teacher poses",
            data_dir.display()
        )));
    }
    let train_ds = Dataset::load(data_dir)?;
    let val_ds = val_dir.map(Dataset::load).transpose()?;
    let arch = cfg.arch()?;
    let mut weights = build_network(cfg.seed, &arch)?;
    let calib = default_calibration();
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.learning_rate,
        betas: cfg.adam_betas,
        alpha: cfg.alpha,
        seed: cfg.seed,
        heatmap_weight: cfg.heatmap_weight,
        ..TrainConfig::default()
    };
    let (history, _) = pretrain(&mut weights, &train_ds, val_ds.as_ref(), &tc, &calib)?;

    if let Some(parent) = out_ckpt.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(out_ckpt, &weights)?;
    let mut csv = String::from("epoch,train_loss,val_pck\n");
    for h in &history {
        let _ = writeln!(csv, "{},{:.8},{:.6}", h.epoch, h.train_loss, h.val_pck);
    }
    write_text(&history_path(out_ckpt, "history"), &csv)?;
    let final_val_pck = history.last().map(|h| h.val_pck).unwrap_or(f64::NAN);
    println!(
        "pretrained {} epochs on {} samples; final val PCK@0.2 = {final_val_pck:.4}",
        history.len(),
        train_ds.len()
    );
    Ok(PretrainSummary {
        checkpoint: out_ckpt.to_path_buf(),
        history,
        final_val_pck,
    })
}

/// Occluded dataset directories under `parent`, sorted by material name.
pub fn scan_occluded_dirs(parent: &Path, exclude: Option<&str>) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(parent)? {
        let entry = entry?;
        let path = entry.path();
        if !path.is_dir() || !path.join("manifest.json").exists() {
            continue;
        }
        let text = fs::read_to_string(path.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if manifest.domain != "occluded" {
            continue;
        }
        if exclude == Some(manifest.material.as_str()) {
            continue;
        }
        found.push((manifest.material.clone(), path));
    }
    found.sort();
    Ok(found)
}

pub struct AdaptSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<crate::adapt::AdaptEpoch>,
    /// Materials whose datasets fed the adaptation, sorted.
    pub materials: Vec<String>,
}

/// Unsupervised occluded-domain adaptation of a pretrained checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn cmd_adapt(
    cfg: &RunConfig,
    ckpt_in: &Path,
    data_no_dir: &Path,
    val_no_dir: &Path,
    occluded_parent: &Path,
    val_oc_dir: Option<&Path>,
    out_ckpt: &Path,
) -> Result<AdaptSummary> {
    let pretrained = load_checkpoint(ckpt_in)?;
    let data_no = Dataset::load(data_no_dir)?;
    let val_no = Dataset::load(val_no_dir)?;
    let dirs = scan_occluded_dirs(occluded_parent, cfg.exclude_material.as_deref())?;
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no occluded dataset directories found",
            occluded_parent.display()
        )));
    }
    let datasets: Result<Vec<Dataset>> = dirs.iter().map(|(_, p)| Dataset::load(p)).collect();
    let datasets = datasets?;
    let pool = OccludedPool {
        datasets: datasets.iter().collect(),
    };
    let val_oc = val_oc_dir.map(Dataset::load).transpose()?;

    let calib = default_calibration();
    let ac = AdaptConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.learning_rate,
        betas: cfg.adam_betas,
        lambda_dd: cfg.lambda_dd,
        seed: cfg.seed,
        patience: cfg.patience,
        ..AdaptConfig::default()
    };
    let (adapted, history) =
        run_adaptation(&pretrained, &data_no, &val_no, &pool, val_oc.as_ref(), &ac, &calib)?;

    if let Some(parent) = out_ckpt.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(out_ckpt, &adapted)?;
    let mut csv = String::from("epoch,pck_no,pck_oc,dd_estimate\n");
    for h in &history {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.8}",
            h.epoch, h.pck_no, h.pck_oc, h.dd_estimate
        );
    }
    write_text(&history_path(out_ckpt, "history"), &csv)?;
    let materials: Vec<String> = dirs.iter().map(|(m, _)| m.clone()).collect();
    println!(
        "adapted on materials [{}], {} epochs",
        materials.join(", "),
        history.len()
    );
    Ok(AdaptSummary {
        checkpoint: out_ckpt.to_path_buf(),
        history,
        materials,
    })
}

pub struct EvalSummary {
    pub reports: Vec<PckReport>,
    pub table: String,
}

/// Per-group PCK of a checkpoint over a labeled dataset; writes report and
/// threshold-curve CSVs under `out_dir`.
pub fn cmd_eval(_cfg: &RunConfig, ckpt: &Path, data_dir: &Path, out_dir: &Path) -> Result<EvalSummary> {
    let weights = load_checkpoint(ckpt)?;
    let ds = Dataset::load(data_dir)?;
    let calib = default_calibration();
    let frames: Vec<_> = (0..ds.len()).map(|i| ds.frame(i)).collect();
    let refs: Vec<&_> = frames.iter().collect();
    let preds = predict_batch(&weights, &refs, &calib)?;
    let poses: Vec<HandPose> = preds.into_iter().map(|(_, p)| p).collect();

    let reports: Result<Vec<PckReport>> = [0.05, 0.10, 0.15, 0.20]
        .iter()
        .map(|&a| pck_by_group(&poses, &ds.poses, a))
        .collect();
    let reports = reports?;
    let curve: Result<Vec<PckReport>> = (1..=10)
        .map(|i| pck_by_group(&poses, &ds.poses, 0.05 * i as f64))
        .collect();
    let curve = curve?;

    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("pck_report.csv"), &reports_to_csv(&reports))?;
    write_text(&out_dir.join("pck_curve.csv"), &reports_to_csv(&curve))?;
    let table = reports_to_table(&reports);
    println!("{table}");
    Ok(EvalSummary { reports, table })
}

/// Decode poses for one sample (or every sample) of a dataset.
pub fn cmd_infer(
    _cfg: &RunConfig,
    ckpt: &Path,
    data_dir: &Path,
    index: Option<usize>,
    out: Option<&Path>,
) -> Result<Vec<HandPose>> {
    let weights = load_checkpoint(ckpt)?;
    let ds = Dataset::load(data_dir)?;
    let calib = default_calibration();
    let indices: Vec<usize> = match index {
        Some(i) if i >= ds.len() => {
            return Err(Error::InvalidInput(format!(
                "sample index {i} out of range 0..{}",
                ds.len()
            )))
        }
        Some(i) => vec![i],
        None => (0..ds.len()).collect(),
    };
    let frames: Vec<_> = indices.iter().map(|&i| ds.frame(i)).collect();
    let refs: Vec<&_> = frames.iter().collect();
    let preds = predict_batch(&weights, &refs, &calib)?;
    let poses: Vec<HandPose> = preds.into_iter().map(|(_, p)| p).collect();

    let mut csv = String::from("sample,keypoint,x,y,z\n");
    for (row, &i) in indices.iter().enumerate() {
        for (k, kp) in poses[row].keypoints.iter().enumerate() {
            let _ = writeln!(csv, "{i},{k},{:.6},{:.6},{:.6}", kp[0], kp[1], kp[2]);
        }
    }
    match out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(poses)
}

/// Convenience wrapper for tests: normal-domain PCK@0.2 of a checkpoint.
pub fn checkpoint_pck(ckpt: &Path, data_dir: &Path) -> Result<f64> {
    let weights: NetworkWeights = load_checkpoint(ckpt)?;
    let ds = Dataset::load(data_dir)?;
    evaluate_pck(&weights, &ds, &default_calibration(), None)
}
