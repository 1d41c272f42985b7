//! The pose network: a complex-valued encoder-decoder feature extractor
//! with skip connections, and a regressor with a 2D-heatmap branch and a
//! depth branch.
//!
//! The encoder runs stages of conv/bn/leaky-relu blocks; after each of the
//! first `pools` stages the spatial dims halve under 2x2 max pooling. The
//! decoder mirrors the schedule: before a stage whose paired encoder skip
//! lives at a higher resolution, features are upsampled; the skip is then
//! concatenated channelwise and a 1x1 convolution restores the schedule.
//! The extractor ends by concatenating the I and Q branches into a real
//! feature map which both regressor branches consume: a 1x1 convolution +
//! spatial softmax produces one heatmap per keypoint, and a global average
//! pool + dense layer + sigmoid produces the normalized depths.
//!
//! Real-valued ablation variants reuse the same stage layout with plain
//! convolutions over the concatenated (or single-branch) input.

use crate::cvnn::{
    self, cconcat, cconv, cleaky, cpool, cupsample, BnState, CConvVars, CVar, ComplexBnState,
    ComplexConvParams, LEAKY_SLOPE,
};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Tape, VarId};
use crate::pose::{Calibration, HandPose, PosePrediction, NUM_KEYPOINTS};
use crate::tensor::{ComplexTensor, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which signal representation the extractor consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Complex-valued blocks over paired I/Q branches.
    Complex,
    /// Real blocks over the channelwise concatenation of I and Q.
    RealConcat,
    /// Real blocks over the I branch only.
    RealI,
    /// Real blocks over the Q branch only.
    RealQ,
}

impl Variant {
    pub fn tag(&self) -> u32 {
        match self {
            Variant::Complex => 0,
            Variant::RealConcat => 1,
            Variant::RealI => 2,
            Variant::RealQ => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Variant> {
        Ok(match tag {
            0 => Variant::Complex,
            1 => Variant::RealConcat,
            2 => Variant::RealI,
            3 => Variant::RealQ,
            other => {
                return Err(Error::Config(format!("unknown variant tag {other}")));
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Complex => "complex",
            Variant::RealConcat => "real-concat",
            Variant::RealI => "i-only",
            Variant::RealQ => "q-only",
        }
    }
}

/// Channel schedule and block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub variant: Variant,
    /// `[input_channels, stage_1_out, stage_2_out, ...]`.
    pub enc_channels: Vec<usize>,
    /// `[enc_last, stage_1_out, ..., feature_channels]`.
    pub dec_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Max-pool after each of the first `pools` encoder stages.
    pub pools: usize,
    /// Per-axis stride of the very first convolution. A strided stem
    /// reduces the working resolution (the pulse axis carries little
    /// spatial information and tolerates aggressive striding); the heatmap
    /// head upsamples its logits back to the output grid.
    pub stem_stride: (usize, usize),
    pub input_hw: (usize, usize),
    pub keypoints: usize,
}

impl Arch {
    /// The full-scale schedule: encoder 10-64-128-256-512, decoder
    /// 512-256-128-64-32, three blocks per stage, two pooling stages.
    pub fn full(variant: Variant) -> Arch {
        Arch {
            variant,
            enc_channels: vec![10, 64, 128, 256, 512],
            dec_channels: vec![512, 256, 128, 64, 32],
            blocks_per_stage: 3,
            pools: 2,
            stem_stride: (1, 1),
            input_hw: (40, 40),
            keypoints: NUM_KEYPOINTS,
        }
    }

    /// A reduced schedule sized for CPU training and the bundled benchmark
    /// experiments: a (4, 2)-strided stem collapses the pulse axis early,
    /// one pooled stage, heatmap logits produced at 10x20 and upsampled to
    /// the 40x40 output grid.
    pub fn desk(variant: Variant) -> Arch {
        Arch {
            variant,
            enc_channels: vec![10, 14, 28],
            dec_channels: vec![28, 14, 12],
            blocks_per_stage: 2,
            pools: 1,
            stem_stride: (4, 2),
            input_hw: (40, 40),
            keypoints: NUM_KEYPOINTS,
        }
    }

    pub fn enc_stages(&self) -> usize {
        self.enc_channels.len() - 1
    }

    pub fn dec_stages(&self) -> usize {
        self.dec_channels.len() - 1
    }

    /// Real channel count entering the first conv: signal channels plus
    /// two coordinate planes.
    pub fn in_channels(&self) -> usize {
        let signal = match self.variant {
            Variant::Complex | Variant::RealI | Variant::RealQ => self.enc_channels[0],
            Variant::RealConcat => 2 * self.enc_channels[0],
        };
        signal + 2
    }

    /// Channels of the real feature map handed to the regressor.
    pub fn feature_channels(&self) -> usize {
        let c = *self.dec_channels.last().expect("nonempty schedule");
        match self.variant {
            Variant::Complex => 2 * c,
            _ => c,
        }
    }

    /// Encoder stages that export a skip connection: every pooled stage,
    /// plus unpooled stages other than the last.
    pub fn has_skip(&self, stage: usize) -> bool {
        stage < self.pools || stage + 1 < self.enc_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.len() < 2 || self.dec_channels.len() < 2 {
            return Err(Error::Config(
                "schedules need at least one stage on each side".into(),
            ));
        }
        if self.dec_channels[0] != *self.enc_channels.last().unwrap() {
            return Err(Error::Config(format!(
                "decoder entry channels {} must match encoder exit channels {}",
                self.dec_channels[0],
                self.enc_channels.last().unwrap()
            )));
        }
        if self.pools > self.enc_stages() {
            return Err(Error::Config(format!(
                "{} pooling stages exceed {} encoder stages",
                self.pools,
                self.enc_stages()
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        for st in [self.stem_stride.0, self.stem_stride.1] {
            if !(1..=4).contains(&st) {
                return Err(Error::Config(format!(
                    "stem stride must lie in 1..=4, got {:?}",
                    self.stem_stride
                )));
            }
        }
        let skips = (0..self.enc_stages()).filter(|&s| self.has_skip(s)).count();
        if skips > self.dec_stages() {
            return Err(Error::Config(format!(
                "{} skip connections cannot pair with {} decoder stages",
                skips,
                self.dec_stages()
            )));
        }
        // walk the spatial flow; decoding must land on a divisor of the
        // output grid (the head upsamples the remainder)
        let (mut h, mut w) = (
            self.input_hw.0 / self.stem_stride.0,
            self.input_hw.1 / self.stem_stride.1,
        );
        if self.input_hw.0 % self.stem_stride.0 != 0 || self.input_hw.1 % self.stem_stride.1 != 0
        {
            return Err(Error::Config(format!(
                "input {:?} not divisible by stem stride {:?}",
                self.input_hw, self.stem_stride
            )));
        }
        for s in 0..self.enc_stages() {
            if s < self.pools {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {s}: cannot pool odd dims {h}x{w}"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        let skip_res = self.skip_resolutions();
        for d in 0..self.dec_stages() {
            if let Some(&(sh, _sw)) = skip_res.len().checked_sub(1 + d).and_then(|i| skip_res.get(i)) {
                if sh > h {
                    h *= 2;
                    w *= 2;
                }
                if (h, w) != skip_res[skip_res.len() - 1 - d] {
                    return Err(Error::Config(format!(
                        "decoder stage {d} resolution {h}x{w} does not match its paired skip"
                    )));
                }
            }
        }
        if self.input_hw.0 % h != 0 || self.input_hw.1 % w != 0 {
            return Err(Error::Config(format!(
                "decoder ends at {h}x{w}, which cannot upsample to {:?}",
                self.input_hw
            )));
        }
        Ok(())
    }

    /// Resolutions at which each exported skip is captured, in stage order.
    fn skip_resolutions(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (
            self.input_hw.0 / self.stem_stride.0,
            self.input_hw.1 / self.stem_stride.1,
        );
        let mut out = Vec::new();
        for s in 0..self.enc_stages() {
            if self.has_skip(s) {
                out.push((h, w));
            }
            if s < self.pools {
                h /= 2;
                w /= 2;
            }
        }
        out
    }
}

/// One conv/bn/activation block, complex or real.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Complex {
        conv: ComplexConvParams,
        bn: ComplexBnState,
    },
    Real {
        w: Tensor,
        b: Tensor,
        stride: (usize, usize),
        bn: BnState,
    },
}

impl Block {
    fn init(
        complex: bool,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: (usize, usize),
        pad: usize,
        rng: &mut impl Rng,
    ) -> Block {
        if complex {
            Block::Complex {
                conv: ComplexConvParams::init(out_ch, in_ch, k, k, stride, pad, rng),
                bn: ComplexBnState::new(out_ch),
            }
        } else {
            let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
            let n = out_ch * in_ch * k * k;
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Block::Real {
                w: Tensor::from_vec(&[out_ch, in_ch, k, k], data).expect("shape"),
                b: Tensor::zeros(&[out_ch]),
                stride,
                bn: BnState::new(out_ch),
            }
        }
    }
}

/// The skip-merge adapter: a bias-only 1x1 convolution (no norm, no
/// activation), complex or real.
#[derive(Clone, Debug, PartialEq)]
pub enum Merge {
    Complex(ComplexConvParams),
    Real { w: Tensor, b: Tensor },
}

impl Merge {
    fn init(complex: bool, out_ch: usize, in_ch: usize, rng: &mut impl Rng) -> Merge {
        if complex {
            Merge::Complex(ComplexConvParams::init(out_ch, in_ch, 1, 1, (1, 1), 0, rng))
        } else {
            let bound = 1.0 / (in_ch as f64).sqrt();
            let data: Vec<f64> = (0..out_ch * in_ch)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Merge::Real {
                w: Tensor::from_vec(&[out_ch, in_ch, 1, 1], data).expect("shape"),
                b: Tensor::zeros(&[out_ch]),
            }
        }
    }
}

/// Feature extractor parameters (the phi player in adaptation).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub enc_stages: Vec<Vec<Block>>,
    /// One merge per decoder stage that receives a skip.
    pub merges: Vec<Option<Merge>>,
    pub dec_stages: Vec<Vec<Block>>,
}

/// Regressor channel width between the coordinate join and the heads.
pub const REG_MID_CHANNELS: usize = 24;

/// Regressor parameters (the g player). For the 2D branch, extractor
/// features are joined with two coordinate channels and mixed by a 3x3
/// convolution before a 1x1 projection emits per-keypoint heatmap logits.
/// The depth branch global-average-pools the extractor features into a
/// dense layer with one sigmoid per keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorParams {
    /// `[M, F + 2, 3, 3]` feature/coordinate mixer.
    pub mid_w: Tensor,
    pub mid_b: Tensor,
    /// `[K, M, 1, 1]` heatmap logit projection.
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// `[K, F]` depth projection over pooled features.
    pub depth_w: Tensor,
    pub depth_b: Tensor,
}

impl RegressorParams {
    fn init(keypoints: usize, feat_ch: usize, rng: &mut impl Rng) -> RegressorParams {
        let m = REG_MID_CHANNELS;
        let in_ch = feat_ch + 2;
        let bound_mid = 1.0 / ((in_ch * 9) as f64).sqrt();
        let mid: Vec<f64> = (0..m * in_ch * 9)
            .map(|_| rng.random_range(-bound_mid..bound_mid))
            .collect();
        let bound = 1.0 / (m as f64).sqrt();
        let conv: Vec<f64> = (0..keypoints * m)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bound_d = 1.0 / (feat_ch as f64).sqrt();
        let dense: Vec<f64> = (0..keypoints * feat_ch)
            .map(|_| rng.random_range(-bound_d..bound_d))
            .collect();
        RegressorParams {
            mid_w: Tensor::from_vec(&[m, in_ch, 3, 3], mid).expect("shape"),
            mid_b: Tensor::zeros(&[m]),
            head_w: Tensor::from_vec(&[keypoints, m, 1, 1], conv).expect("shape"),
            head_b: Tensor::zeros(&[keypoints]),
            depth_w: Tensor::from_vec(&[keypoints, feat_ch], dense).expect("shape"),
            depth_b: Tensor::zeros(&[keypoints]),
        }
    }

    /// Gaussian perturbation of every parameter, used to split the
    /// adversarial regressor off the trained one.
    pub fn perturbed(&self, std: f64, rng: &mut impl Rng) -> RegressorParams {
        let mut out = self.clone();
        for t in [
            &mut out.mid_w,
            &mut out.mid_b,
            &mut out.head_w,
            &mut out.head_b,
            &mut out.depth_w,
            &mut out.depth_b,
        ] {
            for v in t.data_mut() {
                *v += std * normal(rng);
            }
        }
        out
    }

    /// Visit the four regressor tensors under an arbitrary name prefix.
    pub fn for_each(&self, prefix: &str, mut f: impl FnMut(&str, &Tensor)) {
        visit_regressor(prefix, self, &mut |name, t| f(name, t));
    }

    pub fn for_each_mut(&mut self, prefix: &str, mut f: impl FnMut(&str, &mut Tensor)) {
        visit_regressor_mut(prefix, self, &mut |name, t| f(name, t));
    }
}

/// Standard normal draw via Box-Muller; deterministic per rng stream.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// All trainable state of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub arch: Arch,
    pub extractor: ExtractorParams,
    pub regressor: RegressorParams,
}

/// Deterministic construction from a seed and schedule.
pub fn build_network(seed: u64, arch: &Arch) -> Result<NetworkWeights> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let complex = arch.variant == Variant::Complex;

    let mut enc_stages = Vec::new();
    let mut in_ch = arch.in_channels();
    for s in 0..arch.enc_stages() {
        let out_ch = arch.enc_channels[s + 1];
        let mut blocks = Vec::new();
        for b in 0..arch.blocks_per_stage {
            let bin = if b == 0 { in_ch } else { out_ch };
            let stride = if s == 0 && b == 0 {
                arch.stem_stride
            } else {
                (1, 1)
            };
            blocks.push(Block::init(complex, out_ch, bin, 3, stride, 1, &mut rng));
        }
        enc_stages.push(blocks);
        in_ch = out_ch;
    }

    let skip_channels: Vec<usize> = (0..arch.enc_stages())
        .filter(|&s| arch.has_skip(s))
        .map(|s| arch.enc_channels[s + 1])
        .collect();

    let mut merges = Vec::new();
    let mut dec_stages = Vec::new();
    let mut cur = arch.dec_channels[0];
    for d in 0..arch.dec_stages() {
        let paired = skip_channels
            .len()
            .checked_sub(1 + d)
            .map(|i| skip_channels[i]);
        match paired {
            Some(skip_ch) => {
                merges.push(Some(Merge::init(complex, cur, cur + skip_ch, &mut rng)));
            }
            None => merges.push(None),
        }
        let out_ch = arch.dec_channels[d + 1];
        let mut blocks = Vec::new();
        for b in 0..arch.blocks_per_stage {
            let bin = if b == 0 { cur } else { out_ch };
            blocks.push(Block::init(complex, out_ch, bin, 3, (1, 1), 1, &mut rng));
        }
        dec_stages.push(blocks);
        cur = out_ch;
    }

    let regressor = RegressorParams::init(arch.keypoints, arch.feature_channels(), &mut rng);
    Ok(NetworkWeights {
        arch: arch.clone(),
        extractor: ExtractorParams {
            enc_stages,
            merges,
            dec_stages,
        },
        regressor,
    })
}

impl NetworkWeights {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.len());
        n
    }

    /// Visit every trainable tensor with a stable name, in a fixed order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        visit_extractor(&self.extractor, &mut |name, t| f(name, t));
        visit_regressor("reg", &self.regressor, &mut |name, t| f(name, t));
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        visit_extractor_mut(&mut self.extractor, &mut |name, t| f(name, t));
        visit_regressor_mut("reg", &mut self.regressor, &mut |name, t| f(name, t));
    }

    /// Visit batch-norm running statistics (not trained, but persisted).
    pub fn for_each_stat(&self, mut f: impl FnMut(&str, &Tensor)) {
        visit_stats(&self.extractor, &mut |name, t| f(name, t));
    }

    pub fn for_each_stat_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        visit_stats_mut(&mut self.extractor, &mut |name, t| f(name, t));
    }

    /// Byte-stable digest input: every parameter and statistic in visit
    /// order. Used by tests asserting freeze contracts.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_param(|_, t| out.extend_from_slice(t.data()));
        self.for_each_stat(|_, t| out.extend_from_slice(t.data()));
        out
    }
}

fn visit_block(prefix: &str, block: &Block, f: &mut impl FnMut(&str, &Tensor)) {
    match block {
        Block::Complex { conv, bn } => {
            f(&format!("{prefix}.w_re"), &conv.w_re);
            f(&format!("{prefix}.w_im"), &conv.w_im);
            f(&format!("{prefix}.b_re"), &conv.b_re);
            f(&format!("{prefix}.b_im"), &conv.b_im);
            f(&format!("{prefix}.bn.gamma_re"), &bn.gamma_re);
            f(&format!("{prefix}.bn.beta_re"), &bn.beta_re);
            f(&format!("{prefix}.bn.gamma_im"), &bn.gamma_im);
            f(&format!("{prefix}.bn.beta_im"), &bn.beta_im);
        }
        Block::Real { w, b, bn, .. } => {
            f(&format!("{prefix}.w"), w);
            f(&format!("{prefix}.b"), b);
            f(&format!("{prefix}.bn.gamma"), &bn.gamma);
            f(&format!("{prefix}.bn.beta"), &bn.beta);
        }
    }
}

fn visit_block_mut(prefix: &str, block: &mut Block, f: &mut impl FnMut(&str, &mut Tensor)) {
    match block {
        Block::Complex { conv, bn } => {
            f(&format!("{prefix}.w_re"), &mut conv.w_re);
            f(&format!("{prefix}.w_im"), &mut conv.w_im);
            f(&format!("{prefix}.b_re"), &mut conv.b_re);
            f(&format!("{prefix}.b_im"), &mut conv.b_im);
            f(&format!("{prefix}.bn.gamma_re"), &mut bn.gamma_re);
            f(&format!("{prefix}.bn.beta_re"), &mut bn.beta_re);
            f(&format!("{prefix}.bn.gamma_im"), &mut bn.gamma_im);
            f(&format!("{prefix}.bn.beta_im"), &mut bn.beta_im);
        }
        Block::Real { w, b, bn, .. } => {
            f(&format!("{prefix}.w"), w);
            f(&format!("{prefix}.b"), b);
            f(&format!("{prefix}.bn.gamma"), &mut bn.gamma);
            f(&format!("{prefix}.bn.beta"), &mut bn.beta);
        }
    }
}

fn visit_extractor(e: &ExtractorParams, f: &mut impl FnMut(&str, &Tensor)) {
    for (s, stage) in e.enc_stages.iter().enumerate() {
        for (b, block) in stage.iter().enumerate() {
            visit_block(&format!("enc{s}.{b}"), block, f);
        }
    }
    for (d, merge) in e.merges.iter().enumerate() {
        if let Some(m) = merge {
            match m {
                Merge::Complex(c) => {
                    f(&format!("merge{d}.w_re"), &c.w_re);
                    f(&format!("merge{d}.w_im"), &c.w_im);
                    f(&format!("merge{d}.b_re"), &c.b_re);
                    f(&format!("merge{d}.b_im"), &c.b_im);
                }
                Merge::Real { w, b } => {
                    f(&format!("merge{d}.w"), w);
                    f(&format!("merge{d}.b"), b);
                }
            }
        }
    }
    for (s, stage) in e.dec_stages.iter().enumerate() {
        for (b, block) in stage.iter().enumerate() {
            visit_block(&format!("dec{s}.{b}"), block, f);
        }
    }
}

fn visit_extractor_mut(e: &mut ExtractorParams, f: &mut impl FnMut(&str, &mut Tensor)) {
    for (s, stage) in e.enc_stages.iter_mut().enumerate() {
        for (b, block) in stage.iter_mut().enumerate() {
            visit_block_mut(&format!("enc{s}.{b}"), block, f);
        }
    }
    for (d, merge) in e.merges.iter_mut().enumerate() {
        if let Some(m) = merge {
            match m {
                Merge::Complex(c) => {
                    f(&format!("merge{d}.w_re"), &mut c.w_re);
                    f(&format!("merge{d}.w_im"), &mut c.w_im);
                    f(&format!("merge{d}.b_re"), &mut c.b_re);
                    f(&format!("merge{d}.b_im"), &mut c.b_im);
                }
                Merge::Real { w, b } => {
                    f(&format!("merge{d}.w"), w);
                    f(&format!("merge{d}.b"), b);
                }
            }
        }
    }
    for (s, stage) in e.dec_stages.iter_mut().enumerate() {
        for (b, block) in stage.iter_mut().enumerate() {
            visit_block_mut(&format!("dec{s}.{b}"), block, f);
        }
    }
}

fn visit_regressor(prefix: &str, r: &RegressorParams, f: &mut impl FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.mid_w"), &r.mid_w);
    f(&format!("{prefix}.mid_b"), &r.mid_b);
    f(&format!("{prefix}.head_w"), &r.head_w);
    f(&format!("{prefix}.head_b"), &r.head_b);
    f(&format!("{prefix}.depth_w"), &r.depth_w);
    f(&format!("{prefix}.depth_b"), &r.depth_b);
}

fn visit_regressor_mut(prefix: &str, r: &mut RegressorParams, f: &mut impl FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.mid_w"), &mut r.mid_w);
    f(&format!("{prefix}.mid_b"), &mut r.mid_b);
    f(&format!("{prefix}.head_w"), &mut r.head_w);
    f(&format!("{prefix}.head_b"), &mut r.head_b);
    f(&format!("{prefix}.depth_w"), &mut r.depth_w);
    f(&format!("{prefix}.depth_b"), &mut r.depth_b);
}

fn visit_bn_stats<'a>(prefix: String, block: &'a Block, out: &mut Vec<(String, &'a Tensor)>) {
    match block {
        Block::Complex { bn, .. } => {
            out.push((format!("{prefix}.bn.running_mean_re"), &bn.running_mean_re));
            out.push((format!("{prefix}.bn.running_var_re"), &bn.running_var_re));
            out.push((format!("{prefix}.bn.running_mean_im"), &bn.running_mean_im));
            out.push((format!("{prefix}.bn.running_var_im"), &bn.running_var_im));
        }
        Block::Real { bn, .. } => {
            out.push((format!("{prefix}.bn.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &bn.running_var));
        }
    }
}

fn visit_stats(e: &ExtractorParams, f: &mut impl FnMut(&str, &Tensor)) {
    let mut items = Vec::new();
    for (s, stage) in e.enc_stages.iter().enumerate() {
        for (b, block) in stage.iter().enumerate() {
            visit_bn_stats(format!("enc{s}.{b}"), block, &mut items);
        }
    }
    for (s, stage) in e.dec_stages.iter().enumerate() {
        for (b, block) in stage.iter().enumerate() {
            visit_bn_stats(format!("dec{s}.{b}"), block, &mut items);
        }
    }
    for (name, t) in items {
        f(&name, t);
    }
}

fn visit_stats_mut(e: &mut ExtractorParams, f: &mut impl FnMut(&str, &mut Tensor)) {
    for (s, stage) in e.enc_stages.iter_mut().enumerate() {
        for (b, block) in stage.iter_mut().enumerate() {
            let prefix = format!("enc{s}.{b}");
            match block {
                Block::Complex { bn, .. } => {
                    f(&format!("{prefix}.bn.running_mean_re"), &mut bn.running_mean_re);
                    f(&format!("{prefix}.bn.running_var_re"), &mut bn.running_var_re);
                    f(&format!("{prefix}.bn.running_mean_im"), &mut bn.running_mean_im);
                    f(&format!("{prefix}.bn.running_var_im"), &mut bn.running_var_im);
                }
                Block::Real { bn, .. } => {
                    f(&format!("{prefix}.bn.running_mean"), &mut bn.running_mean);
                    f(&format!("{prefix}.bn.running_var"), &mut bn.running_var);
                }
            }
        }
    }
    for (s, stage) in e.dec_stages.iter_mut().enumerate() {
        for (b, block) in stage.iter_mut().enumerate() {
            let prefix = format!("dec{s}.{b}");
            match block {
                Block::Complex { bn, .. } => {
                    f(&format!("{prefix}.bn.running_mean_re"), &mut bn.running_mean_re);
                    f(&format!("{prefix}.bn.running_var_re"), &mut bn.running_var_re);
                    f(&format!("{prefix}.bn.running_mean_im"), &mut bn.running_mean_im);
                    f(&format!("{prefix}.bn.running_var_im"), &mut bn.running_var_im);
                }
                Block::Real { bn, .. } => {
                    f(&format!("{prefix}.bn.running_mean"), &mut bn.running_mean);
                    f(&format!("{prefix}.bn.running_var"), &mut bn.running_var);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward graph construction
// ---------------------------------------------------------------------------

/// Where a batch-norm node's fresh batch statistics should be folded back.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    /// true = encoder side.
    pub encoder: bool,
    pub stage: usize,
    pub block: usize,
    /// 0 = real/I branch, 1 = Q branch.
    pub branch: usize,
    pub node: VarId,
}

enum Feat {
    Complex(CVar),
    Real(VarId),
}

/// Extractor output plus bookkeeping handles.
pub struct ExtractorOut {
    /// Real feature map `[B, F, H, W]` (complex branches already
    /// concatenated).
    pub features: VarId,
    pub param_leaves: Vec<(String, VarId)>,
    pub bn_updates: Vec<BnUpdate>,
}

pub struct RegressorOut {
    /// `[B, K, H, W]`, softmax-normalized per map.
    pub heatmaps: VarId,
    /// `[B, K]` sigmoid depths.
    pub depths_norm: VarId,
    /// `[B, K, 2]` metric (x, y) via soft-argmax.
    pub xy: VarId,
    /// `[B, K]` metric z.
    pub z: VarId,
    pub param_leaves: Vec<(String, VarId)>,
}

pub struct ForwardOpts {
    /// Batch-statistics mode for batch norm (training) vs running stats.
    pub batch_stats: bool,
    /// Record batch stats for folding into running stats.
    pub collect_updates: bool,
    /// Extractor parameters require gradients.
    pub grad_extractor: bool,
}

/// Stack frames `[C, H, W]` into one `[B, C, H, W]` pair.
pub fn stack_frames(frames: &[&ComplexTensor]) -> Result<ComplexTensor> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty frame batch".into()));
    }
    let shape = frames[0].shape().to_vec();
    let mut re = Vec::with_capacity(frames.len() * frames[0].len());
    let mut im = Vec::with_capacity(frames.len() * frames[0].len());
    for f in frames {
        if f.shape() != shape.as_slice() {
            return Err(Error::dimension(
                "stack_frames",
                format!("{shape:?}"),
                format!("{:?}", f.shape()),
            ));
        }
        re.extend_from_slice(f.re.data());
        im.extend_from_slice(f.im.data());
    }
    let full = [frames.len(), shape[0], shape[1], shape[2]];
    Ok(ComplexTensor {
        re: Tensor::from_vec(&full, re)?,
        im: Tensor::from_vec(&full, im)?,
    })
}

fn block_forward(
    tape: &mut Tape,
    block: &Block,
    feat: Feat,
    opts: &ForwardOpts,
    prefix: &str,
    leaves: &mut Vec<(String, VarId)>,
    update: impl Fn(usize, VarId) -> BnUpdate,
    updates: &mut Vec<BnUpdate>,
) -> Result<Feat> {
    let grad = opts.grad_extractor;
    match (block, feat) {
        (Block::Complex { conv, bn }, Feat::Complex(x)) => {
            let vars = CConvVars {
                w_re: tape.leaf(conv.w_re.clone(), grad),
                w_im: tape.leaf(conv.w_im.clone(), grad),
                b_re: tape.leaf(conv.b_re.clone(), grad),
                b_im: tape.leaf(conv.b_im.clone(), grad),
            };
            if grad {
                leaves.push((format!("{prefix}.w_re"), vars.w_re));
                leaves.push((format!("{prefix}.w_im"), vars.w_im));
                leaves.push((format!("{prefix}.b_re"), vars.b_re));
                leaves.push((format!("{prefix}.b_im"), vars.b_im));
            }
            let y = cconv(tape, x, vars, conv.stride, conv.pad)?;
            let g_re = tape.leaf(bn.gamma_re.clone(), grad);
            let be_re = tape.leaf(bn.beta_re.clone(), grad);
            let g_im = tape.leaf(bn.gamma_im.clone(), grad);
            let be_im = tape.leaf(bn.beta_im.clone(), grad);
            if grad {
                leaves.push((format!("{prefix}.bn.gamma_re"), g_re));
                leaves.push((format!("{prefix}.bn.beta_re"), be_re));
                leaves.push((format!("{prefix}.bn.gamma_im"), g_im));
                leaves.push((format!("{prefix}.bn.beta_im"), be_im));
            }
            let mode_re = if opts.batch_stats {
                BnMode::Batch
            } else {
                BnMode::Running {
                    mean: bn.running_mean_re.data().to_vec(),
                    var: bn.running_var_re.data().to_vec(),
                }
            };
            let mode_im = if opts.batch_stats {
                BnMode::Batch
            } else {
                BnMode::Running {
                    mean: bn.running_mean_im.data().to_vec(),
                    var: bn.running_var_im.data().to_vec(),
                }
            };
            let n_re = tape.batch_norm(y.re, g_re, be_re, bn.eps, mode_re)?;
            let n_im = tape.batch_norm(y.im, g_im, be_im, bn.eps, mode_im)?;
            if opts.collect_updates && opts.batch_stats {
                updates.push(update(0, n_re));
                updates.push(update(1, n_im));
            }
            Ok(Feat::Complex(cleaky(
                tape,
                CVar { re: n_re, im: n_im },
                LEAKY_SLOPE,
            )))
        }
        (Block::Real { w, b, stride, bn }, Feat::Real(x)) => {
            let wv = tape.leaf(w.clone(), grad);
            let bv = tape.leaf(b.clone(), grad);
            if grad {
                leaves.push((format!("{prefix}.w"), wv));
                leaves.push((format!("{prefix}.b"), bv));
            }
            let y = tape.conv2d(x, wv, Some(bv), *stride, 1)?;
            let g = tape.leaf(bn.gamma.clone(), grad);
            let be = tape.leaf(bn.beta.clone(), grad);
            if grad {
                leaves.push((format!("{prefix}.bn.gamma"), g));
                leaves.push((format!("{prefix}.bn.beta"), be));
            }
            let mode = if opts.batch_stats {
                BnMode::Batch
            } else {
                BnMode::Running {
                    mean: bn.running_mean.data().to_vec(),
                    var: bn.running_var.data().to_vec(),
                }
            };
            let n = tape.batch_norm(y, g, be, bn.eps, mode)?;
            if opts.collect_updates && opts.batch_stats {
                updates.push(update(0, n));
            }
            Ok(Feat::Real(tape.leaky_relu(n, LEAKY_SLOPE)))
        }
        _ => Err(Error::Contract(
            "block kind does not match feature kind".into(),
        )),
    }
}

/// Build the extractor graph over a stacked input batch.
pub fn extractor_graph(
    tape: &mut Tape,
    weights: &NetworkWeights,
    input: &ComplexTensor,
    opts: &ForwardOpts,
) -> Result<ExtractorOut> {
    let arch = &weights.arch;
    let shape = input.shape();
    if shape.len() != 4
        || shape[1] != arch.enc_channels[0]
        || (shape[2], shape[3]) != arch.input_hw
    {
        return Err(Error::dimension(
            "extractor input",
            format!(
                "[B, {}, {}, {}]",
                arch.enc_channels[0], arch.input_hw.0, arch.input_hw.1
            ),
            format!("{shape:?}"),
        ));
    }

    let mut leaves = Vec::new();
    let mut updates = Vec::new();

    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let coords = tape.constant(coord_channels(b, h, w));
    let zeros2 = tape.constant(Tensor::zeros(&[b, 2, h, w]));
    let mut feat = match arch.variant {
        Variant::Complex => {
            let re = tape.leaf(input.re.clone(), false);
            let im = tape.leaf(input.im.clone(), false);
            let re = tape.concat_c(re, coords)?;
            let im = tape.concat_c(im, zeros2)?;
            Feat::Complex(CVar { re, im })
        }
        Variant::RealConcat => {
            let re = tape.leaf(input.re.clone(), false);
            let im = tape.leaf(input.im.clone(), false);
            let cat = tape.concat_c(re, im)?;
            Feat::Real(tape.concat_c(cat, coords)?)
        }
        Variant::RealI => {
            let re = tape.leaf(input.re.clone(), false);
            Feat::Real(tape.concat_c(re, coords)?)
        }
        Variant::RealQ => {
            let im = tape.leaf(input.im.clone(), false);
            Feat::Real(tape.concat_c(im, coords)?)
        }
    };

    let mut skips: Vec<Feat> = Vec::new();
    for (s, stage) in weights.extractor.enc_stages.iter().enumerate() {
        for (b, block) in stage.iter().enumerate() {
            let prefix = format!("enc{s}.{b}");
            feat = block_forward(
                tape,
                block,
                feat,
                opts,
                &prefix,
                &mut leaves,
                |branch, node| BnUpdate {
                    encoder: true,
                    stage: s,
                    block: b,
                    branch,
                    node,
                },
                &mut updates,
            )?;
        }
        if arch.has_skip(s) {
            skips.push(match &feat {
                Feat::Complex(c) => Feat::Complex(*c),
                Feat::Real(r) => Feat::Real(*r),
            });
        }
        if s < arch.pools {
            feat = match feat {
                Feat::Complex(c) => Feat::Complex(cpool(tape, c, 2)?),
                Feat::Real(r) => Feat::Real(tape.max_pool(r, 2)?),
            };
        }
    }

    for (d, stage) in weights.extractor.dec_stages.iter().enumerate() {
        if let Some(skip_idx) = skips.len().checked_sub(1 + d) {
            let skip = &skips[skip_idx];
            // lift current features to the skip's resolution if needed
            let (cur_h, cur_w) = match &feat {
                Feat::Complex(c) => {
                    let s = tape.value(c.re).shape();
                    (s[2], s[3])
                }
                Feat::Real(r) => {
                    let s = tape.value(*r).shape();
                    (s[2], s[3])
                }
            };
            let (skip_h, skip_w) = match skip {
                Feat::Complex(c) => {
                    let s = tape.value(c.re).shape();
                    (s[2], s[3])
                }
                Feat::Real(r) => {
                    let s = tape.value(*r).shape();
                    (s[2], s[3])
                }
            };
            if skip_h > cur_h || skip_w > cur_w {
                let factor = (skip_h / cur_h, skip_w / cur_w);
                feat = match feat {
                    Feat::Complex(c) => Feat::Complex(cupsample(tape, c, factor)?),
                    Feat::Real(r) => Feat::Real(tape.upsample(r, factor)?),
                };
            }
            let merged = match (&feat, skip) {
                (Feat::Complex(c), Feat::Complex(s)) => Feat::Complex(cconcat(tape, *c, *s)?),
                (Feat::Real(r), Feat::Real(s)) => Feat::Real(tape.concat_c(*r, *s)?),
                _ => unreachable!("variant is uniform across the graph"),
            };
            let merge = weights.extractor.merges[d]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("decoder stage {d} lacks a merge conv")))?;
            feat = match (merge, merged) {
                (Merge::Complex(conv), Feat::Complex(x)) => {
                    let vars = CConvVars {
                        w_re: tape.leaf(conv.w_re.clone(), opts.grad_extractor),
                        w_im: tape.leaf(conv.w_im.clone(), opts.grad_extractor),
                        b_re: tape.leaf(conv.b_re.clone(), opts.grad_extractor),
                        b_im: tape.leaf(conv.b_im.clone(), opts.grad_extractor),
                    };
                    if opts.grad_extractor {
                        leaves.push((format!("merge{d}.w_re"), vars.w_re));
                        leaves.push((format!("merge{d}.w_im"), vars.w_im));
                        leaves.push((format!("merge{d}.b_re"), vars.b_re));
                        leaves.push((format!("merge{d}.b_im"), vars.b_im));
                    }
                    Feat::Complex(cconv(tape, x, vars, (1, 1), 0)?)
                }
                (Merge::Real { w, b }, Feat::Real(x)) => {
                    let wv = tape.leaf(w.clone(), opts.grad_extractor);
                    let bv = tape.leaf(b.clone(), opts.grad_extractor);
                    if opts.grad_extractor {
                        leaves.push((format!("merge{d}.w"), wv));
                        leaves.push((format!("merge{d}.b"), bv));
                    }
                    Feat::Real(tape.conv2d(x, wv, Some(bv), (1, 1), 0)?)
                }
                _ => unreachable!("variant is uniform across the graph"),
            };
        }
        for (b, block) in stage.iter().enumerate() {
            let prefix = format!("dec{d}.{b}");
            feat = block_forward(
                tape,
                block,
                feat,
                opts,
                &prefix,
                &mut leaves,
                |branch, node| BnUpdate {
                    encoder: false,
                    stage: d,
                    block: b,
                    branch,
                    node,
                },
                &mut updates,
            )?;
        }
    }

    let features = match feat {
        Feat::Complex(c) => tape.concat_c(c.re, c.im)?,
        Feat::Real(r) => r,
    };
    Ok(ExtractorOut {
        features,
        param_leaves: leaves,
        bn_updates: updates,
    })
}

/// Normalized coordinate planes for a `[B, ?, H, W]` feature map:
/// channel 0 ramps -1..1 left to right, channel 1 top to bottom.
fn coord_channels(b: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * 2 * h * w);
    for _ in 0..b {
        for i in 0..h {
            let _ = i;
            for j in 0..w {
                data.push(-1.0 + 2.0 * (j as f64 + 0.5) / w as f64);
            }
        }
        for i in 0..h {
            let y = -1.0 + 2.0 * (i as f64 + 0.5) / h as f64;
            for _ in 0..w {
                data.push(y);
            }
        }
    }
    Tensor::from_vec(&[b, 2, h, w], data).expect("shape")
}

/// Build the regressor graph over extractor features.
pub fn regressor_graph(
    tape: &mut Tape,
    reg: &RegressorParams,
    features: VarId,
    calib: &Calibration,
    grad: bool,
    prefix: &str,
) -> Result<RegressorOut> {
    let mut leaves = Vec::new();
    let mid_w = tape.leaf(reg.mid_w.clone(), grad);
    let mid_b = tape.leaf(reg.mid_b.clone(), grad);
    let head_w = tape.leaf(reg.head_w.clone(), grad);
    let head_b = tape.leaf(reg.head_b.clone(), grad);
    let depth_w = tape.leaf(reg.depth_w.clone(), grad);
    let depth_b = tape.leaf(reg.depth_b.clone(), grad);
    if grad {
        leaves.push((format!("{prefix}.mid_w"), mid_w));
        leaves.push((format!("{prefix}.mid_b"), mid_b));
        leaves.push((format!("{prefix}.head_w"), head_w));
        leaves.push((format!("{prefix}.head_b"), head_b));
        leaves.push((format!("{prefix}.depth_w"), depth_w));
        leaves.push((format!("{prefix}.depth_b"), depth_b));
    }

    let fs = tape.value(features).shape().to_vec();
    let coords = tape.constant(coord_channels(fs[0], fs[2], fs[3]));
    let joined = tape.concat_c(features, coords)?;
    let mixed = tape.conv2d(joined, mid_w, Some(mid_b), (1, 1), 1)?;
    let mid = tape.leaky_relu(mixed, cvnn::LEAKY_SLOPE);

    let logits = tape.conv2d(mid, head_w, Some(head_b), (1, 1), 0)?;
    let ls = tape.value(logits).shape().to_vec();
    let up_logits = if calib.grid.0 > ls[2] || calib.grid.1 > ls[3] {
        tape.upsample(logits, (calib.grid.0 / ls[2], calib.grid.1 / ls[3]))?
    } else {
        logits
    };
    let heatmaps = tape.softmax_hw(up_logits)?;

    // depth branch: pooled decoder features through a dense layer
    let pooled = tape.gap(features)?;
    let depth_logits = tape.linear(pooled, depth_w, depth_b)?;
    let depths_norm = tape.sigmoid(depth_logits);

    let xy = tape.expect_hw(heatmaps, calib.grid_x(), calib.grid_y())?;
    let scaled = tape.scale(depths_norm, calib.z_range.1 - calib.z_range.0);
    let offset = tape.constant(Tensor::filled(
        tape.value(scaled).shape(),
        calib.z_range.0,
    ));
    let z = tape.add(scaled, offset)?;

    Ok(RegressorOut {
        heatmaps,
        depths_norm,
        xy,
        z,
        param_leaves: leaves,
    })
}

/// Fold collected batch statistics into the running statistics.
pub fn apply_bn_updates(weights: &mut NetworkWeights, tape: &Tape, updates: &[BnUpdate]) {
    for u in updates {
        let Some((mean, var)) = tape.bn_batch_stats(u.node) else {
            continue;
        };
        let (mean, var) = (mean.to_vec(), var.to_vec());
        let block = if u.encoder {
            &mut weights.extractor.enc_stages[u.stage][u.block]
        } else {
            &mut weights.extractor.dec_stages[u.stage][u.block]
        };
        match block {
            Block::Complex { bn, .. } => {
                let momentum = bn.momentum;
                if u.branch == 0 {
                    cvnn::update_running(&mut bn.running_mean_re, &mean, momentum);
                    cvnn::update_running(&mut bn.running_var_re, &var, momentum);
                } else {
                    cvnn::update_running(&mut bn.running_mean_im, &mean, momentum);
                    cvnn::update_running(&mut bn.running_var_im, &var, momentum);
                }
            }
            Block::Real { bn, .. } => {
                let momentum = bn.momentum;
                cvnn::update_running(&mut bn.running_mean, &mean, momentum);
                cvnn::update_running(&mut bn.running_var, &var, momentum);
            }
        }
    }
}

/// One-off forward of a single frame with explicit normalization mode;
/// no gradients, no statistics updates.
pub fn forward_once(
    weights: &NetworkWeights,
    frame: &ComplexTensor,
    batch_stats: bool,
) -> Result<PosePrediction> {
    let mut tape = Tape::new(false);
    let input = stack_frames(&[frame])?;
    let opts = ForwardOpts {
        batch_stats,
        collect_updates: false,
        grad_extractor: false,
    };
    let calib = Calibration {
        grid: weights.arch.input_hw,
        ..Calibration::default()
    };
    let ext = extractor_graph(&mut tape, weights, &input, &opts)?;
    let reg = regressor_graph(&mut tape, &weights.regressor, ext.features, &calib, false, "reg")?;
    let hm = tape.value(reg.heatmaps);
    let (k, h, w) = (weights.arch.keypoints, hm.shape()[2], hm.shape()[3]);
    Ok(PosePrediction {
        heatmaps: Tensor::from_vec(&[k, h, w], hm.data().to_vec())?,
        depths: Tensor::from_vec(&[k], tape.value(reg.depths_norm).data().to_vec())?,
    })
}

/// Inference for a batch of frames: heatmaps, depths and decoded poses,
/// using running statistics.
pub fn predict_batch(
    weights: &NetworkWeights,
    frames: &[&ComplexTensor],
    calib: &Calibration,
) -> Result<Vec<(PosePrediction, HandPose)>> {
    predict_batch_opts(weights, frames, calib, true)
}

/// `predict_batch` with explicit control over kernel parallelism.
pub fn predict_batch_opts(
    weights: &NetworkWeights,
    frames: &[&ComplexTensor],
    calib: &Calibration,
    parallel: bool,
) -> Result<Vec<(PosePrediction, HandPose)>> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty frame batch".into()));
    }
    // chunk frames so independent tapes can run on worker threads
    let chunk = 16usize;
    let n_chunks = frames.len().div_ceil(chunk);
    let results: Vec<Result<Vec<(PosePrediction, HandPose)>>> =
        crate::par::map_indexed(n_chunks, parallel, |ci| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(frames.len());
            let mut tape = Tape::new(false);
            if !parallel {
                tape = tape.sequential();
            }
            let input = stack_frames(&frames[lo..hi])?;
            let opts = ForwardOpts {
                batch_stats: false,
                collect_updates: false,
                grad_extractor: false,
            };
            let ext = extractor_graph(&mut tape, weights, &input, &opts)?;
            let reg = regressor_graph(&mut tape, &weights.regressor, ext.features, calib, false, "reg")?;
            let hm = tape.value(reg.heatmaps);
            let dn = tape.value(reg.depths_norm);
            let k = weights.arch.keypoints;
            let (h, w) = (hm.shape()[2], hm.shape()[3]);
            let mut out = Vec::with_capacity(hi - lo);
            for b in 0..hi - lo {
                let maps = Tensor::from_vec(
                    &[k, h, w],
                    hm.data()[b * k * h * w..(b + 1) * k * h * w].to_vec(),
                )?;
                let depths =
                    Tensor::from_vec(&[k], dn.data()[b * k..(b + 1) * k].to_vec())?;
                let pred = PosePrediction {
                    heatmaps: maps,
                    depths,
                };
                let pose = crate::pose::decode_keypoints(&pred, calib);
                out.push((pred, pose));
            }
            Ok(out)
        });
    let mut flat = Vec::with_capacity(frames.len());
    for r in results {
        flat.extend(r?);
    }
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_frame(seed: u64, arch: &Arch) -> ComplexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = arch.input_hw;
        let c = arch.enc_channels[0];
        let n = c * h * w;
        ComplexTensor {
            re: Tensor::from_vec(
                &[c, h, w],
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            im: Tensor::from_vec(
                &[c, h, w],
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        }
    }

    fn tiny_arch() -> Arch {
        Arch {
            variant: Variant::Complex,
            enc_channels: vec![2, 4],
            dec_channels: vec![4, 3],
            blocks_per_stage: 1,
            pools: 1,
            stem_stride: (1, 1),
            input_hw: (8, 8),
            keypoints: NUM_KEYPOINTS,
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let arch = Arch::desk(Variant::Complex);
        let a = build_network(7, &arch).unwrap();
        let b = build_network(7, &arch).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = build_network(8, &arch).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn full_schedule_matches_channel_plan() {
        let arch = Arch::full(Variant::Complex);
        arch.validate().unwrap();
        let w = build_network(1, &arch).unwrap();
        assert_eq!(w.extractor.enc_stages.len(), 4);
        for stage in &w.extractor.enc_stages {
            assert_eq!(stage.len(), 3);
        }
        // regressor consumes 32 + 32 concatenated channels
        assert_eq!(arch.feature_channels(), 64);
        assert!(w.param_count() > 0);
    }

    #[test]
    fn toy_schedule_builds_and_runs() {
        let arch = tiny_arch();
        let w = build_network(3, &arch).unwrap();
        let frame = toy_frame(5, &arch);
        let calib = Calibration {
            grid: (8, 8),
            ..Calibration::default()
        };
        let out = predict_batch(&w, &[&frame], &calib).unwrap();
        assert_eq!(out.len(), 1);
        let (pred, _) = &out[0];
        assert_eq!(pred.heatmaps.shape(), &[NUM_KEYPOINTS, 8, 8]);
    }

    #[test]
    fn rejects_mismatched_schedule() {
        let mut arch = tiny_arch();
        arch.dec_channels[0] = 3;
        assert!(matches!(
            build_network(0, &arch),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_validates_input_dims() {
        let arch = Arch::desk(Variant::Complex);
        let w = build_network(2, &arch).unwrap();
        let bad = ComplexTensor::zeros(&[10, 20, 40]);
        let calib = Calibration::default();
        assert!(predict_batch(&w, &[&bad], &calib).is_err());
    }

    #[test]
    fn heatmaps_are_normalized_and_depths_bounded() {
        let arch = Arch::desk(Variant::Complex);
        let w = build_network(11, &arch).unwrap();
        let frame = toy_frame(2, &arch);
        let calib = Calibration::default();
        let out = predict_batch(&w, &[&frame], &calib).unwrap();
        let (pred, _) = &out[0];
        let (h, ww) = pred.grid();
        for k in 0..NUM_KEYPOINTS {
            let s: f64 = pred.heatmaps.data()[k * h * ww..(k + 1) * h * ww].iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "heatmap {k} sums to {s}");
        }
        for d in pred.depths.data() {
            assert!((0.0..=1.0).contains(d));
        }
    }

    #[test]
    fn different_seeds_differ_on_same_input() {
        let arch = Arch::desk(Variant::Complex);
        let w1 = build_network(21, &arch).unwrap();
        let w2 = build_network(22, &arch).unwrap();
        let frame = toy_frame(4, &arch);
        let p1 = forward_once(&w1, &frame, true).unwrap();
        let p2 = forward_once(&w2, &frame, true).unwrap();
        let diff = p1
            .heatmaps
            .max_abs_diff(&p2.heatmaps)
            .max(p1.depths.max_abs_diff(&p2.depths));
        assert!(diff > 1e-3, "predictions nearly identical: {diff}");
    }

    #[test]
    fn fixed_seed_prediction_is_bitwise_stable() {
        let arch = Arch::desk(Variant::Complex);
        let w = build_network(13, &arch).unwrap();
        let frame = toy_frame(8, &arch);
        let calib = Calibration::default();
        let a = &predict_batch(&w, &[&frame], &calib).unwrap()[0].0;
        let b = &predict_batch(&w, &[&frame], &calib).unwrap()[0].0;
        assert_eq!(a, b);
    }

    #[test]
    fn real_variants_build_and_run() {
        for variant in [Variant::RealConcat, Variant::RealI, Variant::RealQ] {
            let arch = Arch::desk(variant);
            let w = build_network(5, &arch).unwrap();
            let frame = toy_frame(6, &arch);
            let calib = Calibration::default();
            let out = predict_batch(&w, &[&frame], &calib).unwrap();
            assert_eq!(out.len(), 1);
        }
    }
}
