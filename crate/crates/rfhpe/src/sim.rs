//! Synthetic UWB radar scene simulator.
//!
//! Stand-in for a hardware rig: each hand keypoint acts as a point
//! scatterer. For antenna n and a scatterer at one-way range r, every
//! range bin d receives
//!
//! ```text
//! A(r) * env(d - r / BIN) * exp(-j * 4 pi * r / WAVELENGTH)
//! ```
//!
//! with a Gaussian envelope, A(r) = 1 / r^2, and the round-trip phase
//! making sub-bin displacements visible in I/Q. The hand drifts by a small
//! random walk across the 40 pulses of a frame (slow-time), which is what
//! survives the static-clutter filter in [`preprocess`]. Occlusion scales
//! the hand path by the material's round-trip transmission, rotates its
//! phase, and adds a flickering clutter echo at the obstacle's range bin.

use crate::error::{Error, Result};
use crate::hand::{place_hand, sample_hand_pose, PoseFamily};
use crate::net::normal;
use crate::pose::HandPose;
use crate::tensor::{ComplexTensor, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const N_ANTENNAS: usize = 10;
pub const N_PULSES: usize = 40;
pub const N_BINS: usize = 40;
/// Carrier wavelength, meters (8 GHz).
pub const WAVELENGTH: f64 = 0.0375;
/// Range bin pitch, meters; bins cover 0 to 1 m.
pub const RANGE_BIN: f64 = 0.025;
/// Gaussian envelope std in bins.
pub const ENVELOPE_STD: f64 = 0.8;
/// Envelope cut-off in bins (beyond 4 std the contribution is dropped).
const ENVELOPE_CUT: f64 = 4.0 * ENVELOPE_STD;
/// Physiological tremor amplitude, meters. The hand oscillates radially at
/// [`TREMOR_FREQ`] across the 40 pulses of a frame; this is the slow-time
/// modulation that survives static-clutter removal.
pub const TREMOR_AMP: f64 = 0.002;
/// Tremor frequency, Hz (frame-synchronous).
pub const TREMOR_FREQ: f64 = 8.0;
/// Extra slow-time random-walk step std, meters.
pub const TREMOR_STEP: f64 = 0.0001;
/// Relative per-pulse flicker of the obstacle clutter echo.
const CLUTTER_FLICKER: f64 = 0.3;
/// RF sensor frame rate, pulses per second.
pub const PULSE_RATE: f64 = 150.0;

/// Fixed cross-shaped antenna-pair array in the z = 0 plane: five
/// elements along x, four along y, one diagonal outlier. Equal apertures
/// on both axes give comparable lateral resolution in x and y.
pub fn antenna_positions() -> [[f64; 3]; N_ANTENNAS] {
    [
        [-0.16, 0.0, 0.0],
        [-0.08, 0.0, 0.0],
        [0.0, 0.0, 0.0],
        [0.08, 0.0, 0.0],
        [0.16, 0.0, 0.0],
        [0.0, -0.16, 0.0],
        [0.0, -0.08, 0.0],
        [0.0, 0.08, 0.0],
        [0.0, 0.16, 0.0],
        [0.12, 0.12, 0.0],
    ]
}

/// Obstacle materials, ordered by increasing interference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaterialKind {
    Identity,
    Plastic,
    Cardboard,
    Glass,
    Wood,
}

impl MaterialKind {
    pub const OBSTACLES: [MaterialKind; 4] = [
        MaterialKind::Plastic,
        MaterialKind::Cardboard,
        MaterialKind::Glass,
        MaterialKind::Wood,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MaterialKind::Identity => "identity",
            MaterialKind::Plastic => "plastic",
            MaterialKind::Cardboard => "cardboard",
            MaterialKind::Glass => "glass",
            MaterialKind::Wood => "wood",
        }
    }

    pub fn from_name(name: &str) -> Result<MaterialKind> {
        Ok(match name {
            "identity" => MaterialKind::Identity,
            "plastic" => MaterialKind::Plastic,
            "cardboard" => MaterialKind::Cardboard,
            "glass" => MaterialKind::Glass,
            "wood" => MaterialKind::Wood,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown material '{other}'; valid: identity, plastic, cardboard, glass, wood"
                )))
            }
        })
    }

    fn salt(&self) -> u64 {
        match self {
            MaterialKind::Identity => 0,
            MaterialKind::Plastic => 1,
            MaterialKind::Cardboard => 2,
            MaterialKind::Glass => 3,
            MaterialKind::Wood => 4,
        }
    }
}

/// Occlusion parameters of one obstacle material.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialProfile {
    pub kind: MaterialKind,
    /// One-way amplitude transmission in (0, 1].
    pub gamma: f64,
    /// One-way phase offset, radians.
    pub phase_offset: f64,
    pub clutter_amp: f64,
    /// Obstacle range bin (10 cm in front of the sensor).
    pub clutter_bin: usize,
}

impl MaterialProfile {
    pub fn of(kind: MaterialKind) -> MaterialProfile {
        let (gamma, phase_offset, clutter_amp) = match kind {
            MaterialKind::Identity => (1.0, 0.0, 0.0),
            MaterialKind::Plastic => (0.90, 0.2, 0.05),
            MaterialKind::Cardboard => (0.85, 0.3, 0.08),
            MaterialKind::Glass => (0.75, 0.6, 0.10),
            MaterialKind::Wood => (0.60, 0.9, 0.15),
        };
        MaterialProfile {
            kind,
            gamma,
            phase_offset,
            clutter_amp,
            clutter_bin: 4,
        }
    }

    pub fn identity() -> MaterialProfile {
        MaterialProfile::of(MaterialKind::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    Normal,
    Occluded(MaterialKind),
}

impl DomainTag {
    pub fn name(&self) -> &'static str {
        match self {
            DomainTag::Normal => "normal",
            DomainTag::Occluded(_) => "occluded",
        }
    }
}

/// One preprocessed or raw radar observation.
#[derive(Clone, Debug, PartialEq)]
pub struct RFFrame {
    /// `[N_ANTENNAS, N_PULSES, N_BINS]` complex signal.
    pub signal: ComplexTensor,
    pub timestamp: f64,
    pub domain: DomainTag,
}

/// Per-frame scene description.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub hand_center: [f64; 3],
    pub antennas: [[f64; 3]; N_ANTENNAS],
    pub noise_std: f64,
    pub pulse_rate: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(hand_center: [f64; 3], noise_std: f64, seed: u64) -> Result<SceneConfig> {
        if !(0.20..=0.80).contains(&hand_center[2]) {
            return Err(Error::InvalidInput(format!(
                "hand center distance {} outside [0.20, 0.80] m",
                hand_center[2]
            )));
        }
        Ok(SceneConfig {
            hand_center,
            antennas: antenna_positions(),
            noise_std,
            pulse_rate: PULSE_RATE,
            seed,
        })
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic stream for (seed, salt).
pub fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(salt)))
}

const SALT_TREMOR: u64 = 0x7472_656d;
const SALT_NOISE: u64 = 0x6e6f_6973;
const SALT_CLUTTER: u64 = 0x636c_7574;

/// Slow-time radial displacement shared by every scatterer of a frame:
/// a frame-synchronous tremor sinusoid plus a small random walk.
fn tremor_walk(scene: &SceneConfig) -> [f64; N_PULSES] {
    let mut rng = derive_rng(scene.seed, SALT_TREMOR);
    let mut walk = [0.0; N_PULSES];
    let mut acc = 0.0;
    for (t, w) in walk.iter_mut().enumerate() {
        acc += TREMOR_STEP * normal(&mut rng);
        let osc =
            TREMOR_AMP * (std::f64::consts::TAU * TREMOR_FREQ * t as f64 / scene.pulse_rate).sin();
        *w = osc + acc;
    }
    walk
}

/// Noiseless echo of arbitrary point scatterers, with slow-time tremor.
pub fn simulate_point_scatterers(points: &[[f64; 3]], scene: &SceneConfig) -> ComplexTensor {
    let tremor = tremor_walk(scene);
    let mut re = vec![0.0; N_ANTENNAS * N_PULSES * N_BINS];
    let mut im = vec![0.0; N_ANTENNAS * N_PULSES * N_BINS];
    for (n, ant) in scene.antennas.iter().enumerate() {
        for p in points {
            let r0 = ((p[0] - ant[0]).powi(2) + (p[1] - ant[1]).powi(2) + (p[2] - ant[2]).powi(2))
                .sqrt();
            let amp = 1.0 / (r0 * r0);
            for (t, drift) in tremor.iter().enumerate() {
                let r = r0 + drift;
                let center = r / RANGE_BIN;
                let phase = -4.0 * std::f64::consts::PI * r / WAVELENGTH;
                let (s, c) = phase.sin_cos();
                let lo = ((center - ENVELOPE_CUT).floor().max(0.0)) as usize;
                let hi = ((center + ENVELOPE_CUT).ceil() as usize).min(N_BINS - 1);
                for d in lo..=hi {
                    let u = (d as f64 - center) / ENVELOPE_STD;
                    let env = (-0.5 * u * u).exp();
                    let idx = (n * N_PULSES + t) * N_BINS + d;
                    re[idx] += amp * env * c;
                    im[idx] += amp * env * s;
                }
            }
        }
    }
    ComplexTensor {
        re: Tensor::from_vec(&[N_ANTENNAS, N_PULSES, N_BINS], re).expect("shape"),
        im: Tensor::from_vec(&[N_ANTENNAS, N_PULSES, N_BINS], im).expect("shape"),
    }
}

/// Noiseless hand echo: every keypoint scatters.
pub fn simulate_hand_echo(pose: &HandPose, scene: &SceneConfig) -> ComplexTensor {
    simulate_point_scatterers(&pose.keypoints, scene)
}

/// Occlude a noiseless frame and finalize it: the hand path is scaled by
/// gamma^2 (round trip) and rotated by twice the material phase offset, a
/// flickering clutter echo is added at the obstacle bin, and fresh receiver
/// noise is drawn from a stream salted by the material.
pub fn apply_occlusion(
    frame: &RFFrame,
    m: &MaterialProfile,
    scene: &SceneConfig,
) -> Result<RFFrame> {
    if m.clutter_bin >= N_BINS {
        return Err(Error::InvalidInput(format!(
            "clutter bin {} outside 0..{N_BINS}",
            m.clutter_bin
        )));
    }
    let scale = m.gamma * m.gamma;
    let rot = 2.0 * m.phase_offset;
    let (sr, cr) = rot.sin_cos();
    let src_re = frame.signal.re.data();
    let src_im = frame.signal.im.data();
    let mut re = vec![0.0; src_re.len()];
    let mut im = vec![0.0; src_im.len()];
    for i in 0..src_re.len() {
        re[i] = scale * (src_re[i] * cr - src_im[i] * sr);
        im[i] = scale * (src_re[i] * sr + src_im[i] * cr);
    }

    if m.clutter_amp > 0.0 {
        let mut rng = derive_rng(scene.seed, SALT_CLUTTER ^ m.kind.salt());
        for n in 0..N_ANTENNAS {
            let psi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = psi.sin_cos();
            for t in 0..N_PULSES {
                let flicker = 1.0 + CLUTTER_FLICKER * normal(&mut rng);
                let center = m.clutter_bin as f64;
                let lo = ((center - ENVELOPE_CUT).floor().max(0.0)) as usize;
                let hi = ((center + ENVELOPE_CUT).ceil() as usize).min(N_BINS - 1);
                for d in lo..=hi {
                    let u = (d as f64 - center) / ENVELOPE_STD;
                    let env = (-0.5 * u * u).exp();
                    let idx = (n * N_PULSES + t) * N_BINS + d;
                    re[idx] += m.clutter_amp * flicker * env * c;
                    im[idx] += m.clutter_amp * flicker * env * s;
                }
            }
        }
    }

    if scene.noise_std > 0.0 {
        let mut rng = derive_rng(scene.seed, SALT_NOISE ^ m.kind.salt());
        for i in 0..re.len() {
            re[i] += scene.noise_std * normal(&mut rng);
            im[i] += scene.noise_std * normal(&mut rng);
        }
    }

    Ok(RFFrame {
        signal: ComplexTensor {
            re: Tensor::from_vec(&[N_ANTENNAS, N_PULSES, N_BINS], re)?,
            im: Tensor::from_vec(&[N_ANTENNAS, N_PULSES, N_BINS], im)?,
        },
        timestamp: frame.timestamp,
        domain: match m.kind {
            MaterialKind::Identity => DomainTag::Normal,
            kind => DomainTag::Occluded(kind),
        },
    })
}

/// Normal-domain frame: hand echo plus receiver noise.
pub fn simulate_rf_frame(pose: &HandPose, scene: &SceneConfig) -> Result<RFFrame> {
    let echo = simulate_hand_echo(pose, scene);
    let noiseless = RFFrame {
        signal: echo,
        timestamp: 0.0,
        domain: DomainTag::Normal,
    };
    apply_occlusion(&noiseless, &MaterialProfile::identity(), scene)
}

/// Static clutter removal followed by smoothing: per (antenna, bin),
/// subtract the slow-time mean, then apply a circular 3-tap moving
/// average along the pulse axis.
pub fn preprocess(frame: &RFFrame) -> RFFrame {
    let filt = |src: &Tensor| -> Tensor {
        let v = src.data();
        let mut out = vec![0.0; v.len()];
        let mut centered = vec![0.0; N_PULSES];
        for n in 0..N_ANTENNAS {
            for d in 0..N_BINS {
                let mut mean = 0.0;
                for t in 0..N_PULSES {
                    mean += v[(n * N_PULSES + t) * N_BINS + d];
                }
                mean /= N_PULSES as f64;
                for t in 0..N_PULSES {
                    centered[t] = v[(n * N_PULSES + t) * N_BINS + d] - mean;
                }
                for t in 0..N_PULSES {
                    let prev = centered[(t + N_PULSES - 1) % N_PULSES];
                    let next = centered[(t + 1) % N_PULSES];
                    out[(n * N_PULSES + t) * N_BINS + d] = (prev + centered[t] + next) / 3.0;
                }
            }
        }
        Tensor::from_vec(&[N_ANTENNAS, N_PULSES, N_BINS], out).expect("shape")
    };
    RFFrame {
        signal: ComplexTensor {
            re: filt(&frame.signal.re),
            im: filt(&frame.signal.im),
        },
        timestamp: frame.timestamp,
        domain: frame.domain,
    }
}

/// Emulated camera-side teacher: ground truth plus per-sample mixture
/// noise. 90% of samples use a small per-keypoint std, 10% a 5x larger
/// one; the two components are normalized so the overall per-coordinate
/// error std equals `noise_scale`.
pub fn emulate_teacher(gt: &HandPose, noise_scale: f64, seed: u64) -> Result<HandPose> {
    if noise_scale < 0.0 {
        return Err(Error::InvalidInput(format!(
            "noise scale must be non-negative, got {noise_scale}"
        )));
    }
    if noise_scale == 0.0 {
        return Ok(*gt);
    }
    let mut rng = derive_rng(seed, 0x7465_6163);
    // 0.9 * s^2 + 0.1 * (5 s)^2 = noise_scale^2
    let s = noise_scale / (0.9 + 0.1 * 25.0_f64).sqrt();
    let scale = if rng.random_range(0.0..1.0) < 0.1 { 5.0 * s } else { s };
    let mut out = *gt;
    for kp in out.keypoints.iter_mut() {
        for c in kp.iter_mut() {
            *c += scale * normal(&mut rng);
        }
    }
    Ok(out)
}

/// Dataset synthesis parameters (per-sample scenes derive from these).
#[derive(Clone, Copy, Debug)]
pub struct GenConfig {
    pub seed: u64,
    pub material: MaterialKind,
    pub noise_std: f64,
    pub teacher_noise: f64,
    /// Hand centroid lateral half-range, meters.
    pub lateral: f64,
    /// Hand centroid depth range, meters.
    pub depth_range: (f64, f64),
    /// Rotation half-range per axis, radians.
    pub rot_range: f64,
}

impl GenConfig {
    pub fn new(seed: u64, material: MaterialKind) -> GenConfig {
        GenConfig {
            seed,
            material,
            noise_std: 0.02,
            teacher_noise: 0.01,
            lateral: 0.10,
            depth_range: (0.30, 0.70),
            rot_range: 0.35,
        }
    }
}

const SALT_POSE: u64 = 0x706f_7365;
const SALT_SAMPLE: u64 = 0x7361_6d70;

/// One fully preprocessed sample: frame, ground truth, teacher estimate.
/// Sample streams derive from (seed, index) so parallel and serial
/// generation produce identical bytes.
pub fn synthesize_sample(cfg: &GenConfig, index: u64) -> Result<(RFFrame, HandPose, HandPose)> {
    let family = PoseFamily::ALL[(index % 4) as usize];
    let pose_seed = splitmix64(cfg.seed ^ splitmix64(SALT_POSE ^ index));
    let canonical = sample_hand_pose(pose_seed, family);

    let mut rng = derive_rng(cfg.seed, SALT_SAMPLE ^ index);
    let rotation = [
        rng.random_range(-cfg.rot_range..cfg.rot_range),
        rng.random_range(-cfg.rot_range..cfg.rot_range),
        rng.random_range(-cfg.rot_range..cfg.rot_range),
    ];
    let center = [
        rng.random_range(-cfg.lateral..cfg.lateral),
        rng.random_range(-cfg.lateral..cfg.lateral),
        rng.random_range(cfg.depth_range.0..cfg.depth_range.1),
    ];
    let gt = place_hand(&canonical, rotation, center);

    let frame_seed = splitmix64(cfg.seed ^ splitmix64(index));
    let scene = SceneConfig::new(center, cfg.noise_std, frame_seed)?;
    let echo = simulate_hand_echo(&gt, &scene);
    let noiseless = RFFrame {
        signal: echo,
        timestamp: index as f64 * N_PULSES as f64 / scene.pulse_rate,
        domain: DomainTag::Normal,
    };
    let frame = apply_occlusion(&noiseless, &MaterialProfile::of(cfg.material), &scene)?;
    let frame = preprocess(&frame);
    let teacher = emulate_teacher(&gt, cfg.teacher_noise, frame_seed)?;
    Ok((frame, gt, teacher))
}

/// Synthesize `count` samples and write them as a dataset directory.
/// Samples are generated in deterministic parallel chunks; the manifest is
/// finalized last.
pub fn generate_dataset(
    count: usize,
    cfg: &GenConfig,
    out: &std::path::Path,
    deterministic: bool,
) -> Result<crate::io::Manifest> {
    if count == 0 {
        return Err(Error::InvalidInput("dataset count must be >= 1".into()));
    }
    let mut writer = crate::io::DatasetWriter::create(out)?;
    let chunk = 128usize;
    let mut start = 0usize;
    while start < count {
        let n = chunk.min(count - start);
        let samples = crate::par::map_indexed(n, true, |i| {
            synthesize_sample(cfg, (start + i) as u64)
        });
        for s in samples {
            let (frame, gt, teacher) = s?;
            writer.push(&frame.signal, &gt, &teacher)?;
        }
        start += n;
    }
    let timestamp = if deterministic {
        0
    } else {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    };
    let domain = if cfg.material == MaterialKind::Identity {
        "normal"
    } else {
        "occluded"
    };
    writer.finalize(crate::io::Manifest {
        version: crate::io::DATASET_VERSION,
        count,
        domain: domain.to_string(),
        material: cfg.material.name().to_string(),
        seed: cfg.seed,
        dims: crate::io::frame_dims(),
        timestamp,
        noise_std: cfg.noise_std,
        teacher_noise: cfg.teacher_noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_scene(seed: u64) -> SceneConfig {
        SceneConfig::new([0.0, 0.0, 0.5], 0.0, seed).unwrap()
    }

    #[test]
    fn generate_dataset_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::new(7, MaterialKind::Identity);
        let m1 = generate_dataset(10, &cfg, &dir.path().join("a"), true).unwrap();
        assert_eq!(m1.count, 10);
        let ds = crate::io::Dataset::load(dir.path().join("a")).unwrap();
        assert_eq!(ds.len(), 10);

        generate_dataset(10, &cfg, &dir.path().join("b"), true).unwrap();
        let bytes_a = std::fs::read(dir.path().join("a/frames.bin")).unwrap();
        let bytes_b = std::fs::read(dir.path().join("b/frames.bin")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let ma = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
        let mb = std::fs::read(dir.path().join("b/manifest.json")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn scene_rejects_out_of_range_distance() {
        assert!(SceneConfig::new([0.0, 0.0, 0.1], 0.0, 0).is_err());
        assert!(SceneConfig::new([0.0, 0.0, 0.9], 0.0, 0).is_err());
    }

    #[test]
    fn noise_only_frame_power_matches_variance() {
        let scene = SceneConfig::new([0.0, 0.0, 0.5], 0.05, 3).unwrap();
        let empty = RFFrame {
            signal: ComplexTensor::zeros(&[N_ANTENNAS, N_PULSES, N_BINS]),
            timestamp: 0.0,
            domain: DomainTag::Normal,
        };
        let frame = apply_occlusion(&empty, &MaterialProfile::identity(), &scene).unwrap();
        let n = (N_ANTENNAS * N_PULSES * N_BINS) as f64;
        let expected = 2.0 * 0.05 * 0.05 * n; // complex variance per element
        let power = frame.signal.power();
        assert!(
            (power - expected).abs() / expected < 0.10,
            "power {power}, expected {expected}"
        );
    }

    #[test]
    fn single_scatterer_peaks_at_its_range_bin() {
        let scene = test_scene(4);
        let sig = simulate_point_scatterers(&[[0.0, 0.0, 0.5]], &scene);
        for n in 0..N_ANTENNAS {
            let mut best = (0usize, 0.0f64);
            for d in 0..N_BINS {
                // magnitude at pulse 0
                let idx = (n * N_PULSES) * N_BINS + d;
                let mag =
                    (sig.re.data()[idx].powi(2) + sig.im.data()[idx].powi(2)).sqrt();
                if mag > best.1 {
                    best = (d, mag);
                }
            }
            // antenna offsets make the true range slightly exceed 0.5 m
            let ant = scene.antennas[n];
            let r = ((0.0 - ant[0]).powi(2) + (0.0 - ant[1]).powi(2) + 0.5f64.powi(2)).sqrt();
            let expected = (r / RANGE_BIN).round() as usize;
            assert!(
                (best.0 as isize - expected as isize).abs() <= 1,
                "antenna {n}: peak bin {} vs expected {expected}",
                best.0
            );
        }
    }

    #[test]
    fn superposition_of_scatterers_is_linear() {
        let scene = test_scene(9);
        let a = [[0.02, 0.0, 0.45]];
        let b = [[-0.03, 0.01, 0.55]];
        let both = [[0.02, 0.0, 0.45], [-0.03, 0.01, 0.55]];
        let sa = simulate_point_scatterers(&a, &scene);
        let sb = simulate_point_scatterers(&b, &scene);
        let sboth = simulate_point_scatterers(&both, &scene);
        let mut sum = sa.clone();
        sum.re.add_assign(&sb.re);
        sum.im.add_assign(&sb.im);
        assert!(sboth.max_abs_diff(&sum) < 1e-6);
    }

    #[test]
    fn identity_occlusion_keeps_signal_bit_identical() {
        let scene = SceneConfig::new([0.0, 0.0, 0.5], 0.03, 11).unwrap();
        let pose = sample_hand_pose(1, PoseFamily::Open).translated([0.0, 0.0, 0.5]);
        let a = simulate_rf_frame(&pose, &scene).unwrap();
        let noiseless = RFFrame {
            signal: simulate_hand_echo(&pose, &scene),
            timestamp: 0.0,
            domain: DomainTag::Normal,
        };
        let b = apply_occlusion(&noiseless, &MaterialProfile::identity(), &scene).unwrap();
        assert_eq!(a.signal, b.signal);
    }

    #[test]
    fn gamma_scales_hand_component_quadratically() {
        let scene = test_scene(12); // noiseless
        let pose = sample_hand_pose(2, PoseFamily::Open).translated([0.0, 0.0, 0.5]);
        let noiseless = RFFrame {
            signal: simulate_hand_echo(&pose, &scene),
            timestamp: 0.0,
            domain: DomainTag::Normal,
        };
        let mut m = MaterialProfile::identity();
        m.gamma = 0.5;
        m.phase_offset = 0.0;
        let occluded = apply_occlusion(&noiseless, &m, &scene).unwrap();
        let ratio = (occluded.signal.power() / noiseless.signal.power()).sqrt();
        assert!((ratio - 0.25).abs() < 1e-9, "magnitude ratio {ratio}");
    }

    #[test]
    fn full_blockage_leaves_clutter_and_noise() {
        let scene = SceneConfig::new([0.0, 0.0, 0.5], 0.01, 13).unwrap();
        let pose = sample_hand_pose(3, PoseFamily::Open).translated([0.0, 0.0, 0.5]);
        let noiseless = RFFrame {
            signal: simulate_hand_echo(&pose, &scene),
            timestamp: 0.0,
            domain: DomainTag::Normal,
        };
        let mut m = MaterialProfile::of(MaterialKind::Wood);
        m.gamma = 0.0;
        let occluded = apply_occlusion(&noiseless, &m, &scene).unwrap();
        // power at the hand's range bins is at the noise floor
        let hand_bin = (0.5 / RANGE_BIN) as usize;
        let mut hand_power = 0.0;
        let mut count = 0usize;
        for n in 0..N_ANTENNAS {
            for t in 0..N_PULSES {
                let idx = (n * N_PULSES + t) * N_BINS + hand_bin;
                hand_power +=
                    occluded.signal.re.data()[idx].powi(2) + occluded.signal.im.data()[idx].powi(2);
                count += 1;
            }
        }
        let per_elem = hand_power / count as f64;
        let noise_floor = 2.0 * 0.01 * 0.01;
        assert!(per_elem < 4.0 * noise_floor, "residual {per_elem} vs floor {noise_floor}");
    }

    #[test]
    fn material_table_orders_wood_worst() {
        let gammas: Vec<f64> = [
            MaterialKind::Plastic,
            MaterialKind::Cardboard,
            MaterialKind::Glass,
            MaterialKind::Wood,
        ]
        .iter()
        .map(|&k| MaterialProfile::of(k).gamma)
        .collect();
        for w in gammas.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert_eq!(MaterialProfile::identity().gamma, 1.0);
        assert_eq!(MaterialProfile::identity().clutter_amp, 0.0);
    }

    #[test]
    fn preprocess_zeroes_pulse_constant_input() {
        let signal = ComplexTensor {
            re: Tensor::filled(&[N_ANTENNAS, N_PULSES, N_BINS], 3.5),
            im: Tensor::filled(&[N_ANTENNAS, N_PULSES, N_BINS], -1.25),
        };
        let frame = RFFrame {
            signal,
            timestamp: 0.0,
            domain: DomainTag::Normal,
        };
        let out = preprocess(&frame);
        assert!(out.signal.re.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(out.signal.im.data().iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(out.signal.shape(), &[N_ANTENNAS, N_PULSES, N_BINS]);
    }

    #[test]
    fn preprocess_attenuates_alternating_sequence_to_third() {
        // x_t = (-1)^t has zero slow-time mean; the circular 3-tap average
        // maps it to -x_t / 3
        let mut re = vec![0.0; N_ANTENNAS * N_PULSES * N_BINS];
        for n in 0..N_ANTENNAS {
            for t in 0..N_PULSES {
                for d in 0..N_BINS {
                    re[(n * N_PULSES + t) * N_BINS + d] = if t % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let frame = RFFrame {
            signal: ComplexTensor {
                re: Tensor::from_vec(&[N_ANTENNAS, N_PULSES, N_BINS], re).unwrap(),
                im: Tensor::zeros(&[N_ANTENNAS, N_PULSES, N_BINS]),
            },
            timestamp: 0.0,
            domain: DomainTag::Normal,
        };
        let out = preprocess(&frame);
        for n in 0..N_ANTENNAS {
            for t in 0..N_PULSES {
                let expected = if t % 2 == 0 { -1.0 / 3.0 } else { 1.0 / 3.0 };
                let got = out.signal.re.data()[(n * N_PULSES + t) * N_BINS];
                assert!((got - expected).abs() < 1e-12, "t={t}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn teacher_zero_noise_is_exact() {
        let gt = sample_hand_pose(5, PoseFamily::Open);
        let t = emulate_teacher(&gt, 0.0, 42).unwrap();
        assert_eq!(gt, t);
    }

    #[test]
    fn teacher_error_std_matches_configured_scale() {
        let gt = HandPose::zeros();
        let scale = 0.01;
        let mut sq = 0.0;
        let mut n = 0usize;
        for seed in 0..10_000 {
            let t = emulate_teacher(&gt, scale, seed).unwrap();
            for kp in &t.keypoints {
                for c in kp {
                    sq += c * c;
                    n += 1;
                }
            }
        }
        let std = (sq / n as f64).sqrt();
        assert!(
            (std - scale).abs() / scale < 0.10,
            "empirical std {std} vs scale {scale}"
        );
    }

    #[test]
    fn teacher_is_deterministic_per_seed() {
        let gt = sample_hand_pose(6, PoseFamily::Pinch);
        let a = emulate_teacher(&gt, 0.02, 7).unwrap();
        let b = emulate_teacher(&gt, 0.02, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthesize_sample_is_deterministic() {
        let cfg = GenConfig::new(5, MaterialKind::Identity);
        let (fa, ga, ta) = synthesize_sample(&cfg, 17).unwrap();
        let (fb, gb, tb) = synthesize_sample(&cfg, 17).unwrap();
        assert_eq!(fa.signal, fb.signal);
        assert_eq!(ga, gb);
        assert_eq!(ta, tb);
        let (fc, _, _) = synthesize_sample(&cfg, 18).unwrap();
        assert_ne!(fa.signal, fc.signal);
    }

    #[test]
    fn pose_signal_sensitivity() {
        // poses >= 5 cm apart give normalized correlation < 0.95
        let scene = test_scene(21);
        let pose_a = sample_hand_pose(1, PoseFamily::Open).translated([0.0, 0.0, 0.45]);
        let pose_b = pose_a.translated([0.0, 0.0, 0.06]);
        let sa = simulate_hand_echo(&pose_a, &scene);
        let sb = simulate_hand_echo(&pose_b, &scene);
        let dot: f64 = sa
            .re
            .data()
            .iter()
            .chain(sa.im.data())
            .zip(sb.re.data().iter().chain(sb.im.data()))
            .map(|(x, y)| x * y)
            .sum();
        let na = sa.power().sqrt();
        let nb = sb.power().sqrt();
        let corr = dot / (na * nb);
        assert!(corr < 0.95, "correlation {corr}");
    }

    #[test]
    fn normal_and_wood_power_distributions_differ() {
        // two-sample Welch t-test on per-frame power over 200 frames/side
        let count = 200;
        let mk = |material: MaterialKind, seed: u64| -> Vec<f64> {
            let cfg = GenConfig::new(seed, material);
            (0..count)
                .map(|i| synthesize_sample(&cfg, i).unwrap().0.signal.power())
                .collect()
        };
        let normal = mk(MaterialKind::Identity, 31);
        let wood = mk(MaterialKind::Wood, 31);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| {
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let (m1, m2) = (mean(&normal), mean(&wood));
        let (v1, v2) = (var(&normal, m1), var(&wood, m2));
        let t = (m1 - m2) / (v1 / count as f64 + v2 / count as f64).sqrt();
        assert!(t.abs() > 2.6, "Welch t {t} too small to reject equality at p < 0.01");
    }
}
