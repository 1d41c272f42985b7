//! On-disk formats: dataset directories and network checkpoints.
//!
//! A dataset directory holds `manifest.json` (UTF-8 text), `frames.bin`
//! (little-endian f32, layout `[sample][branch I=0/Q=1][n][t][d]`),
//! `poses.bin` (`[sample][21][3]` meters) and `teacher.bin` (same layout
//! as poses). The manifest is written last, via a temp-file rename, so a
//! partial write leaves no manifest behind.
//!
//! Checkpoints start with the magic `OCHN1` and then repeat records of
//! (name length u32 LE, name UTF-8, rank u32, dims u32..., f32 LE
//! payload). Architecture metadata rides along as small `meta/...`
//! records. Saving is order-stable, so save -> load -> save reproduces
//! identical bytes.

use crate::error::{Error, Result};
use crate::net::{Arch, NetworkWeights, Variant};
use crate::pose::{HandPose, NUM_KEYPOINTS};
use crate::sim::{DomainTag, MaterialKind, N_ANTENNAS, N_BINS, N_PULSES};
use crate::tensor::{ComplexTensor, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OCHN1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub domain: String,
    pub material: String,
    pub seed: u64,
    pub dims: [usize; 3],
    /// Unix seconds at generation; zero in deterministic mode.
    pub timestamp: u64,
    pub noise_std: f64,
    pub teacher_noise: f64,
}

pub struct DatasetPaths {
    pub dir: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        DatasetPaths {
            dir: dir.as_ref().to_path_buf(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn frames(&self) -> PathBuf {
        self.dir.join("frames.bin")
    }

    pub fn poses(&self) -> PathBuf {
        self.dir.join("poses.bin")
    }

    pub fn teacher(&self) -> PathBuf {
        self.dir.join("teacher.bin")
    }
}

/// Incremental dataset writer; finalize writes the manifest atomically.
pub struct DatasetWriter {
    paths: DatasetPaths,
    frames: BufWriter<File>,
    poses: BufWriter<File>,
    teacher: BufWriter<File>,
    count: usize,
}

impl DatasetWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<DatasetWriter> {
        let paths = DatasetPaths::new(&dir);
        fs::create_dir_all(&paths.dir)?;
        Ok(DatasetWriter {
            frames: BufWriter::new(File::create(paths.frames())?),
            poses: BufWriter::new(File::create(paths.poses())?),
            teacher: BufWriter::new(File::create(paths.teacher())?),
            paths,
            count: 0,
        })
    }

    pub fn push(&mut self, frame: &ComplexTensor, gt: &HandPose, teacher: &HandPose) -> Result<()> {
        write_f32_slice(&mut self.frames, frame.re.data())?;
        write_f32_slice(&mut self.frames, frame.im.data())?;
        write_pose(&mut self.poses, gt)?;
        write_pose(&mut self.teacher, teacher)?;
        self.count += 1;
        Ok(())
    }

    pub fn finalize(mut self, mut manifest: Manifest) -> Result<Manifest> {
        manifest.count = self.count;
        manifest.version = DATASET_VERSION;
        self.frames.flush()?;
        self.poses.flush()?;
        self.teacher.flush()?;
        let tmp = self.paths.dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest).map_err(json_err)?)?;
        fs::rename(&tmp, self.paths.manifest())?;
        Ok(manifest)
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::format("manifest.json", e.to_string())
}

fn write_f32_slice(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn write_pose(w: &mut impl Write, pose: &HandPose) -> Result<()> {
    for kp in &pose.keypoints {
        for &c in kp {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Whole dataset held in memory; frames stay in their on-disk f32 form
/// and convert per access.
pub struct Dataset {
    pub manifest: Manifest,
    frames_f32: Vec<f32>,
    pub poses: Vec<HandPose>,
    pub teacher: Vec<HandPose>,
    frame_elems: usize,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let paths = DatasetPaths::new(&dir);
        let manifest_path = paths.manifest();
        let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::format(
                manifest_path.display().to_string(),
                format!("cannot read manifest: {e}"),
            )
        })?;
        let manifest: Manifest = serde_json::from_str(&manifest_text).map_err(json_err)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("unsupported dataset version {}", manifest.version),
            ));
        }
        let frame_elems = 2 * manifest.dims[0] * manifest.dims[1] * manifest.dims[2];
        let frames_f32 = read_f32_file(&paths.frames())?;
        if frames_f32.len() != manifest.count * frame_elems {
            return Err(Error::format(
                paths.frames().display().to_string(),
                format!(
                    "frame records ({}) disagree with manifest count {}",
                    frames_f32.len() / frame_elems.max(1),
                    manifest.count
                ),
            ));
        }
        let poses = read_pose_file(&paths.poses(), manifest.count)?;
        let teacher = read_pose_file(&paths.teacher(), manifest.count)?;
        Ok(Dataset {
            manifest,
            frames_f32,
            poses,
            teacher,
            frame_elems,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn frame(&self, i: usize) -> ComplexTensor {
        let dims = &self.manifest.dims;
        let half = self.frame_elems / 2;
        let base = i * self.frame_elems;
        let re: Vec<f64> = self.frames_f32[base..base + half]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let im: Vec<f64> = self.frames_f32[base + half..base + self.frame_elems]
            .iter()
            .map(|&v| v as f64)
            .collect();
        ComplexTensor {
            re: Tensor::from_vec(&[dims[0], dims[1], dims[2]], re).expect("shape"),
            im: Tensor::from_vec(&[dims[0], dims[1], dims[2]], im).expect("shape"),
        }
    }

    pub fn domain(&self) -> DomainTag {
        if self.manifest.domain == "normal" {
            DomainTag::Normal
        } else {
            DomainTag::Occluded(
                MaterialKind::from_name(&self.manifest.material)
                    .unwrap_or(MaterialKind::Wood),
            )
        }
    }
}

fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path.display().to_string(),
            "length is not a multiple of 4",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_pose_file(path: &Path, count: usize) -> Result<Vec<HandPose>> {
    let raw = read_f32_file(path)?;
    let per = NUM_KEYPOINTS * 3;
    if raw.len() != count * per {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {count} pose records, found {}", raw.len() / per),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut pose = HandPose::zeros();
        for k in 0..NUM_KEYPOINTS {
            for c in 0..3 {
                pose.keypoints[k][c] = raw[i * per + k * 3 + c] as f64;
            }
        }
        out.push(pose);
    }
    Ok(out)
}

/// Frame dims every dataset in this pipeline uses.
pub fn frame_dims() -> [usize; 3] {
    [N_ANTENNAS, N_PULSES, N_BINS]
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn write_record(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    write_f32_slice(w, data)?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, weights: &NetworkWeights) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(CHECKPOINT_MAGIC)?;

    let arch = &weights.arch;
    let meta: Vec<(&str, Vec<f64>)> = vec![
        ("meta/variant", vec![arch.variant.tag() as f64]),
        (
            "meta/enc_channels",
            arch.enc_channels.iter().map(|&c| c as f64).collect(),
        ),
        (
            "meta/dec_channels",
            arch.dec_channels.iter().map(|&c| c as f64).collect(),
        ),
        ("meta/blocks_per_stage", vec![arch.blocks_per_stage as f64]),
        ("meta/pools", vec![arch.pools as f64]),
        (
            "meta/stem_stride",
            vec![arch.stem_stride.0 as f64, arch.stem_stride.1 as f64],
        ),
        (
            "meta/input_hw",
            vec![arch.input_hw.0 as f64, arch.input_hw.1 as f64],
        ),
        ("meta/keypoints", vec![arch.keypoints as f64]),
    ];
    for (name, data) in &meta {
        write_record(&mut w, name, &[data.len()], data)?;
    }

    let mut err = None;
    weights.for_each_param(|name, t| {
        if err.is_none() {
            if let Err(e) = write_record(&mut w, name, t.shape(), t.data()) {
                err = Some(e);
            }
        }
    });
    weights.for_each_stat(|name, t| {
        if err.is_none() {
            if let Err(e) = write_record(&mut w, name, t.shape(), t.data()) {
                err = Some(e);
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    w.flush()?;
    Ok(())
}

struct RecordReader<R: Read> {
    inner: R,
    path: String,
}

impl<R: Read> RecordReader<R> {
    fn read_u32(&mut self) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn next(&mut self) -> Result<Option<(String, Vec<usize>, Vec<f64>)>> {
        let Some(name_len) = self.read_u32()? else {
            return Ok(None);
        };
        let mut name = vec![0u8; name_len as usize];
        self.inner.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(self.path.clone(), "record name is not UTF-8".to_string()))?;
        let rank = self
            .read_u32()?
            .ok_or_else(|| Error::format(self.path.clone(), "truncated record".to_string()))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = self
                .read_u32()?
                .ok_or_else(|| Error::format(self.path.clone(), "truncated dims".to_string()))?;
            shape.push(d as usize);
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        self.inner.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Some((name, shape, data)))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let display = path.as_ref().display().to_string();
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 5];
    reader.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(display, "bad checkpoint magic".to_string()));
    }
    let mut rr = RecordReader {
        inner: reader,
        path: display.clone(),
    };
    let mut records: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    while let Some((name, shape, data)) = rr.next()? {
        records.insert(name, (shape, data));
    }

    let meta_vec = |name: &str| -> Result<Vec<f64>> {
        records
            .get(name)
            .map(|(_, d)| d.clone())
            .ok_or_else(|| Error::format(display.clone(), format!("missing record {name}")))
    };
    let meta_scalar = |name: &str| -> Result<usize> {
        let v = meta_vec(name)?;
        Ok(v[0] as usize)
    };

    let variant = Variant::from_tag(meta_scalar("meta/variant")? as u32)?;
    let input_hw = meta_vec("meta/input_hw")?;
    let arch = Arch {
        variant,
        enc_channels: meta_vec("meta/enc_channels")?
            .iter()
            .map(|&c| c as usize)
            .collect(),
        dec_channels: meta_vec("meta/dec_channels")?
            .iter()
            .map(|&c| c as usize)
            .collect(),
        blocks_per_stage: meta_scalar("meta/blocks_per_stage")?,
        pools: meta_scalar("meta/pools")?,
        stem_stride: {
            let v = meta_vec("meta/stem_stride")?;
            if v.len() == 2 {
                (v[0] as usize, v[1] as usize)
            } else {
                (v[0] as usize, v[0] as usize)
            }
        },
        input_hw: (input_hw[0] as usize, input_hw[1] as usize),
        keypoints: meta_scalar("meta/keypoints")?,
    };

    let mut weights = crate::net::build_network(0, &arch)?;
    let mut missing = Vec::new();
    weights.for_each_param_mut(|name, t| match records.get(name) {
        Some((shape, data)) if shape == t.shape() => {
            t.data_mut().copy_from_slice(data);
        }
        Some((shape, _)) => missing.push(format!("{name}: shape {shape:?} != {:?}", t.shape())),
        None => missing.push(format!("{name}: missing")),
    });
    weights.for_each_stat_mut(|name, t| match records.get(name) {
        Some((shape, data)) if shape == t.shape() => {
            t.data_mut().copy_from_slice(data);
        }
        Some((shape, _)) => missing.push(format!("{name}: shape {shape:?} != {:?}", t.shape())),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(Error::format(
            display,
            format!("checkpoint does not match architecture: {}", missing.join("; ")),
        ));
    }
    Ok(weights)
}

/// Convenience used by tests and the freeze-contract checks: serialized
/// bytes of the full weight state.
pub fn checkpoint_bytes(weights: &NetworkWeights) -> Result<Vec<u8>> {
    let tmp = tempdir_path("ckpt")?;
    save_checkpoint(&tmp, weights)?;
    let bytes = fs::read(&tmp)?;
    let _ = fs::remove_file(&tmp);
    Ok(bytes)
}

fn tempdir_path(prefix: &str) -> Result<PathBuf> {
    let mut p = std::env::temp_dir();
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    p.push(format!("rfhpe-{prefix}-{}-{nanos}", std::process::id()));
    Ok(p)
}

/// Byte-stability helper for `Merge`/`Block`-level tests.
pub fn weights_equal_bytes(a: &NetworkWeights, b: &NetworkWeights) -> bool {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    a.for_each_param(|_, t| fa.extend(t.data().iter().map(|v| v.to_bits())));
    b.for_each_param(|_, t| fb.extend(t.data().iter().map(|v| v.to_bits())));
    a.for_each_stat(|_, t| fa.extend(t.data().iter().map(|v| v.to_bits())));
    b.for_each_stat(|_, t| fb.extend(t.data().iter().map(|v| v.to_bits())));
    fa == fb
}
