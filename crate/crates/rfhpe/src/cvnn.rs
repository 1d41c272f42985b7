//! Complex-valued network layers.
//!
//! A complex feature map is carried as paired I/Q branches. Convolution
//! cross-couples the branches through two real kernels:
//!
//! ```text
//! out = (W_re * x_re - W_im * x_im) + j (W_re * x_im + W_im * x_re)
//! ```
//!
//! Activation, batch normalization, pooling and upsampling act on each
//! branch independently and re-pair the results, so the complex structure
//! is preserved from layer to layer; an explicit concatenation of the two
//! branches into a real feature map happens once, at the boundary between
//! the feature extractor and the regressor.
//!
//! Every operation here exists in two forms with one implementation: a
//! tape-level builder used inside network graphs, and a value-level
//! function that wraps a throwaway tape (used by the simulator, tests and
//! oracles). Gradients treat the I and Q branches as independent real
//! variables.

use crate::error::{Error, Result};
use crate::graph::{BnMode, Tape, VarId};
use crate::tensor::{ComplexTensor, Tensor};
use rand::Rng;

/// Leaky ReLU negative slope used throughout the extractor.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Parameters of one complex convolution: two real kernels and a complex
/// bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexConvParams {
    pub w_re: Tensor,
    pub w_im: Tensor,
    pub b_re: Tensor,
    pub b_im: Tensor,
    pub stride: (usize, usize),
    pub pad: usize,
}

impl ComplexConvParams {
    pub fn new(w_re: Tensor, w_im: Tensor, b_re: Tensor, b_im: Tensor, stride: (usize, usize), pad: usize) -> Result<Self> {
        if w_re.shape() != w_im.shape() {
            return Err(Error::dimension(
                "ComplexConvParams kernels",
                format!("{:?}", w_re.shape()),
                format!("{:?}", w_im.shape()),
            ));
        }
        let ws = w_re.shape();
        if ws.len() != 4 || ws.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "kernel shape must be [out_ch, in_ch, kh, kw] with positive dims, got {ws:?}"
            )));
        }
        if b_re.shape() != [ws[0]] || b_im.shape() != [ws[0]] {
            return Err(Error::dimension(
                "ComplexConvParams bias",
                format!("[{}]", ws[0]),
                format!("{:?} / {:?}", b_re.shape(), b_im.shape()),
            ));
        }
        Ok(ComplexConvParams {
            w_re,
            w_im,
            b_re,
            b_im,
            stride,
            pad,
        })
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per branch, zero bias.
    pub fn init(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kh * kw) as f64).sqrt();
        let mut draw = |n: usize| -> Tensor {
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_vec(&[out_ch, in_ch, kh, kw], data).expect("shape matches count")
        };
        let n = out_ch * in_ch * kh * kw;
        ComplexConvParams {
            w_re: draw(n),
            w_im: draw(n),
            b_re: Tensor::zeros(&[out_ch]),
            b_im: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.w_re.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.w_re.shape()[1]
    }
}

/// A complex feature map on a tape: paired I/Q node ids.
#[derive(Clone, Copy, Debug)]
pub struct CVar {
    pub re: VarId,
    pub im: VarId,
}

/// Tape-side ids of one complex convolution's parameters.
#[derive(Clone, Copy, Debug)]
pub struct CConvVars {
    pub w_re: VarId,
    pub w_im: VarId,
    pub b_re: VarId,
    pub b_im: VarId,
}

/// Complex convolution on the tape. Inputs `[B, C, H, W]` per branch.
pub fn cconv(tape: &mut Tape, x: CVar, p: CConvVars, stride: (usize, usize), pad: usize) -> Result<CVar> {
    let rr = tape.conv2d(x.re, p.w_re, Some(p.b_re), stride, pad)?;
    let ii = tape.conv2d(x.im, p.w_im, None, stride, pad)?;
    let re = tape.sub(rr, ii)?;
    let ri = tape.conv2d(x.im, p.w_re, Some(p.b_im), stride, pad)?;
    let ir = tape.conv2d(x.re, p.w_im, None, stride, pad)?;
    let im = tape.add(ri, ir)?;
    Ok(CVar { re, im })
}

pub fn cleaky(tape: &mut Tape, x: CVar, slope: f64) -> CVar {
    CVar {
        re: tape.leaky_relu(x.re, slope),
        im: tape.leaky_relu(x.im, slope),
    }
}

pub fn cpool(tape: &mut Tape, x: CVar, k: usize) -> Result<CVar> {
    Ok(CVar {
        re: tape.max_pool(x.re, k)?,
        im: tape.max_pool(x.im, k)?,
    })
}

pub fn cupsample(tape: &mut Tape, x: CVar, factor: (usize, usize)) -> Result<CVar> {
    Ok(CVar {
        re: tape.upsample(x.re, factor)?,
        im: tape.upsample(x.im, factor)?,
    })
}

pub fn cconcat(tape: &mut Tape, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar {
        re: tape.concat_c(a.re, b.re)?,
        im: tape.concat_c(a.im, b.im)?,
    })
}

/// Running statistics and affine parameters of a complex batch-norm layer
/// (independent per branch).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexBnState {
    pub gamma_re: Tensor,
    pub beta_re: Tensor,
    pub gamma_im: Tensor,
    pub beta_im: Tensor,
    pub running_mean_re: Tensor,
    pub running_var_re: Tensor,
    pub running_mean_im: Tensor,
    pub running_var_im: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl ComplexBnState {
    pub fn new(channels: usize) -> Self {
        ComplexBnState {
            gamma_re: Tensor::filled(&[channels], 1.0),
            beta_re: Tensor::zeros(&[channels]),
            gamma_im: Tensor::filled(&[channels], 1.0),
            beta_im: Tensor::zeros(&[channels]),
            running_mean_re: Tensor::zeros(&[channels]),
            running_var_re: Tensor::filled(&[channels], 1.0),
            running_mean_im: Tensor::zeros(&[channels]),
            running_var_im: Tensor::filled(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma_re.len()
    }
}

/// Fold a batch statistic into a running statistic in place.
pub fn update_running(running: &mut Tensor, batch: &[f64], momentum: f64) {
    for (r, b) in running.data_mut().iter_mut().zip(batch.iter()) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Single-branch batch-norm state for the real network variants.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

// ---------------------------------------------------------------------------
// Value-level operations (thin wrappers over a throwaway tape).
// ---------------------------------------------------------------------------

fn as_batched(x: &ComplexTensor) -> Result<(ComplexTensor, bool)> {
    match x.shape().len() {
        4 => Ok((x.clone(), false)),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            Ok((
                ComplexTensor {
                    re: x.re.clone().reshaped(&shape)?,
                    im: x.im.clone().reshaped(&shape)?,
                },
                true,
            ))
        }
        _ => Err(Error::dimension(
            "complex op input",
            "[C, H, W] or [B, C, H, W]".to_string(),
            format!("{:?}", x.shape()),
        )),
    }
}

fn unbatch(x: ComplexTensor, squeeze: bool) -> Result<ComplexTensor> {
    if !squeeze {
        return Ok(x);
    }
    let shape: Vec<usize> = x.shape()[1..].to_vec();
    Ok(ComplexTensor {
        re: x.re.reshaped(&shape)?,
        im: x.im.reshaped(&shape)?,
    })
}

/// Complex 2D convolution of a `[C, H, W]` (or batched) input.
pub fn complex_conv2d(x: &ComplexTensor, p: &ComplexConvParams) -> Result<ComplexTensor> {
    let (xb, squeeze) = as_batched(x)?;
    let mut tape = Tape::new(false);
    let xr = tape.constant(xb.re);
    let xi = tape.constant(xb.im);
    let vars = CConvVars {
        w_re: tape.constant(p.w_re.clone()),
        w_im: tape.constant(p.w_im.clone()),
        b_re: tape.constant(p.b_re.clone()),
        b_im: tape.constant(p.b_im.clone()),
    };
    let out = cconv(&mut tape, CVar { re: xr, im: xi }, vars, p.stride, p.pad)?;
    let res = ComplexTensor {
        re: tape.value(out.re).clone(),
        im: tape.value(out.im).clone(),
    };
    unbatch(res, squeeze)
}

/// Leaky-ReLU on each branch independently.
pub fn complex_activation(x: &ComplexTensor, slope: f64) -> Result<ComplexTensor> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::InvalidInput(format!(
            "activation slope must lie in [0, 1), got {slope}"
        )));
    }
    let leak = |t: &Tensor| t.map(|v| if v >= 0.0 { v } else { slope * v });
    Ok(ComplexTensor {
        re: leak(&x.re),
        im: leak(&x.im),
    })
}

/// Per-branch batch normalization over `[B, C, H, W]`; updates running
/// statistics when `training` is set.
pub fn complex_batch_norm(
    x: &ComplexTensor,
    state: &mut ComplexBnState,
    training: bool,
) -> Result<ComplexTensor> {
    if x.shape().len() != 4 {
        return Err(Error::dimension(
            "complex_batch_norm",
            "[B, C, H, W]".to_string(),
            format!("{:?}", x.shape()),
        ));
    }
    if x.shape()[0] == 0 {
        return Err(Error::InvalidInput("batch_norm: zero-size batch".into()));
    }
    if state.eps <= 0.0 {
        return Err(Error::InvalidInput("batch_norm: epsilon must be > 0".into()));
    }
    let mut tape = Tape::new(false);
    let xr = tape.constant(x.re.clone());
    let xi = tape.constant(x.im.clone());
    let g_re = tape.constant(state.gamma_re.clone());
    let b_re = tape.constant(state.beta_re.clone());
    let g_im = tape.constant(state.gamma_im.clone());
    let b_im = tape.constant(state.beta_im.clone());
    let mode_re = if training {
        BnMode::Batch
    } else {
        BnMode::Running {
            mean: state.running_mean_re.data().to_vec(),
            var: state.running_var_re.data().to_vec(),
        }
    };
    let mode_im = if training {
        BnMode::Batch
    } else {
        BnMode::Running {
            mean: state.running_mean_im.data().to_vec(),
            var: state.running_var_im.data().to_vec(),
        }
    };
    let yr = tape.batch_norm(xr, g_re, b_re, state.eps, mode_re)?;
    let yi = tape.batch_norm(xi, g_im, b_im, state.eps, mode_im)?;
    if training {
        if let Some((m, v)) = tape.bn_batch_stats(yr) {
            let (m, v) = (m.to_vec(), v.to_vec());
            update_running(&mut state.running_mean_re, &m, state.momentum);
            update_running(&mut state.running_var_re, &v, state.momentum);
        }
        if let Some((m, v)) = tape.bn_batch_stats(yi) {
            let (m, v) = (m.to_vec(), v.to_vec());
            update_running(&mut state.running_mean_im, &m, state.momentum);
            update_running(&mut state.running_var_im, &v, state.momentum);
        }
    }
    Ok(ComplexTensor {
        re: tape.value(yr).clone(),
        im: tape.value(yi).clone(),
    })
}

/// Per-branch k x k max pooling.
pub fn complex_max_pool(x: &ComplexTensor, k: usize) -> Result<ComplexTensor> {
    let (xb, squeeze) = as_batched(x)?;
    let mut tape = Tape::new(false);
    let xr = tape.constant(xb.re);
    let xi = tape.constant(xb.im);
    let yr = tape.max_pool(xr, k)?;
    let yi = tape.max_pool(xi, k)?;
    let res = ComplexTensor {
        re: tape.value(yr).clone(),
        im: tape.value(yi).clone(),
    };
    unbatch(res, squeeze)
}

/// Per-branch nearest-neighbor upsampling.
pub fn complex_upsample(x: &ComplexTensor, factor: usize) -> Result<ComplexTensor> {
    let (xb, squeeze) = as_batched(x)?;
    let mut tape = Tape::new(false);
    let xr = tape.constant(xb.re);
    let xi = tape.constant(xb.im);
    let yr = tape.upsample(xr, (factor, factor))?;
    let yi = tape.upsample(xi, (factor, factor))?;
    let res = ComplexTensor {
        re: tape.value(yr).clone(),
        im: tape.value(yi).clone(),
    };
    unbatch(res, squeeze)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_input(re: f64, im: f64) -> ComplexTensor {
        ComplexTensor::new(
            Tensor::from_vec(&[1, 1, 1], vec![re]).unwrap(),
            Tensor::from_vec(&[1, 1, 1], vec![im]).unwrap(),
        )
        .unwrap()
    }

    fn kernel_1x1(re: f64, im: f64) -> ComplexConvParams {
        ComplexConvParams::new(
            Tensor::from_vec(&[1, 1, 1, 1], vec![re]).unwrap(),
            Tensor::from_vec(&[1, 1, 1, 1], vec![im]).unwrap(),
            Tensor::zeros(&[1]),
            Tensor::zeros(&[1]),
            (1, 1),
            0,
        )
        .unwrap()
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let x = scalar_input(3.0, -2.0);
        let out = complex_conv2d(&x, &kernel_1x1(0.0, 0.0)).unwrap();
        assert_eq!(out.re.data(), &[0.0]);
        assert_eq!(out.im.data(), &[0.0]);
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let re: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = ComplexTensor::new(
            Tensor::from_vec(&[1, 4, 4], re.clone()).unwrap(),
            Tensor::from_vec(&[1, 4, 4], im.clone()).unwrap(),
        )
        .unwrap();
        let out = complex_conv2d(&x, &kernel_1x1(1.0, 0.0)).unwrap();
        assert_eq!(out.re.data(), re.as_slice());
        assert_eq!(out.im.data(), im.as_slice());
    }

    #[test]
    fn conv_scalar_matches_complex_product() {
        // (1 + 2j)(3 + 4j) = -5 + 10j
        let x = scalar_input(1.0, 2.0);
        let out = complex_conv2d(&x, &kernel_1x1(3.0, 4.0)).unwrap();
        assert!((out.re.data()[0] - -5.0).abs() < 1e-12);
        assert!((out.im.data()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = ComplexTensor::zeros(&[2, 4, 4]);
        let p = kernel_1x1(1.0, 0.0); // expects 1 input channel
        let err = complex_conv2d(&x, &p).unwrap_err();
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn activation_keeps_positive_orthant() {
        let x = scalar_input(0.5, 2.0);
        let out = complex_activation(&x, 0.01).unwrap();
        assert_eq!(out.re.data(), &[0.5]);
        assert_eq!(out.im.data(), &[2.0]);
    }

    #[test]
    fn activation_scales_negative_branch() {
        let x = scalar_input(-1.0, 2.0);
        let out = complex_activation(&x, 0.01).unwrap();
        assert!((out.re.data()[0] - -0.01).abs() < 1e-15);
        assert_eq!(out.im.data(), &[2.0]);
    }

    #[test]
    fn activation_zero_is_zero() {
        let x = scalar_input(0.0, 0.0);
        let out = complex_activation(&x, 0.01).unwrap();
        assert_eq!(out.re.data(), &[0.0]);
        assert_eq!(out.im.data(), &[0.0]);
    }

    #[test]
    fn activation_rejects_bad_slope() {
        let x = scalar_input(1.0, 1.0);
        assert!(complex_activation(&x, 1.0).is_err());
        assert!(complex_activation(&x, -0.1).is_err());
    }

    #[test]
    fn pool_takes_branchwise_max() {
        // real branch max at (0,0), imag at (1,1): each branch keeps its own max
        let x = ComplexTensor::new(
            Tensor::from_vec(&[1, 2, 2], vec![9.0, 1.0, 2.0, 3.0]).unwrap(),
            Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 7.0]).unwrap(),
        )
        .unwrap();
        let out = complex_max_pool(&x, 2).unwrap();
        assert_eq!(out.re.data(), &[9.0]);
        assert_eq!(out.im.data(), &[7.0]);
    }

    #[test]
    fn pool_rejects_non_divisible() {
        let x = ComplexTensor::zeros(&[1, 3, 3]);
        assert!(complex_max_pool(&x, 2).is_err());
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = scalar_input(1.5, -0.5);
        let out = complex_upsample(&x, 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn upsample_expands_constant() {
        let x = scalar_input(2.5, -1.0);
        let out = complex_upsample(&x, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.re.data().iter().all(|&v| v == 2.5));
        assert!(out.im.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn upsample_rejects_zero_factor() {
        let x = scalar_input(1.0, 1.0);
        assert!(complex_upsample(&x, 0).is_err());
    }

    #[test]
    fn bn_eval_with_unit_stats_is_near_identity() {
        // small inputs keep the eps-induced scale error below 1e-6
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.random_range(-0.1..0.1)).collect();
        let x = ComplexTensor::new(
            Tensor::from_vec(&[2, 3, 4, 4], data.clone()).unwrap(),
            Tensor::from_vec(&[2, 3, 4, 4], data.iter().map(|v| -v).collect()).unwrap(),
        )
        .unwrap();
        let mut state = ComplexBnState::new(3);
        let out = complex_batch_norm(&x, &mut state, false).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn bn_training_centers_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [4, 2, 3, 3];
        let n = shape.iter().product::<usize>();
        let data: Vec<f64> = (0..n).map(|_| 5.0 + rng.random_range(-1.0..1.0)).collect();
        let x = ComplexTensor::new(
            Tensor::from_vec(&shape, data.clone()).unwrap(),
            Tensor::from_vec(&shape, data).unwrap(),
        )
        .unwrap();
        let mut state = ComplexBnState::new(2);
        let out = complex_batch_norm(&x, &mut state, true).unwrap();
        // per-channel mean of the output must vanish
        let plane = 9;
        for ch in 0..2 {
            let mut s = 0.0;
            for b in 0..4 {
                let base = (b * 2 + ch) * plane;
                s += out.re.data()[base..base + plane].iter().sum::<f64>();
            }
            assert!((s / (4.0 * 9.0)).abs() < 1e-5);
        }
        // running stats moved toward the batch mean of 5
        assert!(state.running_mean_re.data()[0] > 0.4);
    }

    #[test]
    fn bn_rejects_empty_batch() {
        let x = ComplexTensor::zeros(&[0, 2, 3, 3]);
        let mut state = ComplexBnState::new(2);
        assert!(complex_batch_norm(&x, &mut state, true).is_err());
    }

    #[test]
    fn bn_constant_input_yields_beta() {
        let x = ComplexTensor::new(
            Tensor::filled(&[2, 1, 2, 2], 3.0),
            Tensor::filled(&[2, 1, 2, 2], -1.0),
        )
        .unwrap();
        let mut state = ComplexBnState::new(1);
        state.beta_re = Tensor::filled(&[1], 0.7);
        state.beta_im = Tensor::filled(&[1], -0.2);
        let out = complex_batch_norm(&x, &mut state, true).unwrap();
        for v in out.re.data() {
            assert!((v - 0.7).abs() < 1e-9);
        }
        for v in out.im.data() {
            assert!((v + 0.2).abs() < 1e-9);
        }
    }
}
