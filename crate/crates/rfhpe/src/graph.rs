//! Reverse-mode automatic differentiation over real-valued tensors.
//!
//! A [`Tape`] records operations append-only; node inputs always have
//! smaller ids than the node itself, so a single reverse sweep visits every
//! node after all of its consumers. Complex-valued layers are built on top
//! of this engine by carrying the I and Q branches as separate nodes
//! (gradients treat the two branches as independent real variables).
//!
//! The backward pass runs on one thread and consumes the tape; leaf
//! gradients remain readable afterwards. Forward compute kernels may run
//! data-parallel (see [`crate::kernels`]) while staying bitwise
//! deterministic.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(pub(crate) usize);

/// Whether batch statistics or provided running statistics normalize a
/// batch-norm node.
#[derive(Clone)]
pub enum BnMode {
    /// Normalize with statistics computed from the batch itself.
    Batch,
    /// Normalize with fixed statistics (inference).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

struct BnSaved {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    MulConst(VarId, Tensor),
    LeakyRelu(VarId, f64),
    Sigmoid(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        dims: ConvDims,
        cols: Option<Vec<Vec<f64>>>,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mode: BnMode,
        saved: Option<BnSaved>,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<u32>,
    },
    Upsample(VarId, (usize, usize)),
    ConcatC(VarId, VarId),
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Gap(VarId),
    SoftmaxHw(VarId),
    ExpectHw {
        h: VarId,
        grid_x: Vec<f64>,
        grid_y: Vec<f64>,
    },
    RenormHw(VarId),
    SumHw(VarId),
    AddRowBias(VarId, VarId),
    MeanAll(VarId),
    SumAll(VarId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    train: bool,
    par: bool,
}

impl Tape {
    /// `train` keeps forward intermediates needed by backward (column
    /// matrices); inference tapes skip them.
    pub fn new(train: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            train,
            par: crate::par::parallel_enabled(),
        }
    }

    /// Force the sequential kernel paths regardless of the build features.
    pub fn sequential(mut self) -> Self {
        self.par = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Batch statistics (mean, biased variance) saved by a training-mode
    /// batch-norm node; used by callers to update running statistics.
    pub fn bn_batch_stats(&self, id: VarId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { saved: Some(s), .. } if !s.mean.is_empty() => {
                Some((&s.mean, &s.var))
            }
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn req(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    fn check_same_shape(&self, ctx: &str, a: VarId, b: VarId) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::dimension(ctx, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, self.req(a) || self.req(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("sub", a, b)?;
        let vb = self.value(b);
        let v = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        Ok(self.push(v, self.req(a) || self.req(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("mul", a, b)?;
        let v = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(v, self.req(a) || self.req(b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| c * x);
        self.push(v, self.req(a), Op::Scale(a, c))
    }

    pub fn mul_const(&mut self, a: VarId, k: Tensor) -> Result<VarId> {
        if self.value(a).shape() != k.shape() {
            return Err(Error::dimension(
                "mul_const",
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", k.shape()),
            ));
        }
        let v = Tensor::from_vec(
            k.shape(),
            self.value(a)
                .data()
                .iter()
                .zip(k.data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(v, self.req(a), Op::MulConst(a, k)))
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, self.req(a), Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, self.req(a), Op::Sigmoid(a))
    }

    /// 2D convolution over `[B, C, H, W]` with kernel `[O, C, KH, KW]`
    /// and per-axis strides.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        pad: usize,
    ) -> Result<VarId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dimension(
                "conv2d",
                "rank-4 input and kernel".to_string(),
                format!("input {xs:?}, kernel {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::dimension(
                "conv2d channel axis",
                format!("in_ch {}", ws[1]),
                format!("in_ch {}", xs[1]),
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::dimension(
                "conv2d spatial axes",
                format!("padded dims >= kernel {}x{}", ws[2], ws[3]),
                format!("{}x{} with pad {}", xs[2], xs[3], pad),
            ));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [ws[0]] {
                return Err(Error::dimension(
                    "conv2d bias",
                    format!("[{}]", ws[0]),
                    format!("{bs:?}"),
                ));
            }
        }
        let dims = ConvDims::infer(xs, ws, pad, stride);
        let requires = self.req(x) || self.req(w) || b.map(|b| self.req(b)).unwrap_or(false);
        let keep_cols = self.train && requires;
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
            keep_cols,
            self.par,
        );
        let shape = [dims.batch, dims.out_ch, dims.oh, dims.ow];
        let v = Tensor::from_vec(&shape, out)?;
        Ok(self.push(v, requires, Op::Conv2d { x, w, b, dims, cols }))
    }

    /// Per-channel batch normalization over `[B, C, H, W]`.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        mode: BnMode,
    ) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension(
                "batch_norm",
                "rank-4 input".to_string(),
                format!("{xs:?}"),
            ));
        }
        if xs[0] == 0 {
            return Err(Error::InvalidInput("batch_norm: zero-size batch".into()));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dimension(
                "batch_norm affine",
                format!("[{c}]"),
                format!(
                    "gamma {:?}, beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let n = (b * h * w) as f64;
        let plane = h * w;
        let xv = self.value(x).data();

        let (mean, var) = match &mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for v in &xv[base..base + plane] {
                            s += v;
                        }
                    }
                    let m = s / n;
                    let mut sv = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for v in &xv[base..base + plane] {
                            let d = v - m;
                            sv += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sv / n;
                }
                (mean, var)
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dimension(
                        "batch_norm running stats",
                        format!("[{c}]"),
                        format!("mean [{}], var [{}]", mean.len(), var.len()),
                    ));
                }
                (mean.clone(), var.clone())
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let (m, is, g, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for k in 0..plane {
                    out[base + k] = g * (xv[base + k] - m) * is + be;
                }
            }
        }
        let requires = self.req(x) || self.req(gamma) || self.req(beta);
        let saved = Some(match &mode {
            BnMode::Batch => BnSaved { mean, var, inv_std },
            BnMode::Running { .. } => BnSaved {
                mean: Vec::new(),
                var: Vec::new(),
                inv_std,
            },
        });
        let v = Tensor::from_vec(&xs, out)?;
        Ok(self.push(
            v,
            requires,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                saved,
            },
        ))
    }

    /// k x k stride-k max pooling; spatial dims must divide by the window.
    pub fn max_pool(&mut self, x: VarId, k: usize) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
            return Err(Error::dimension(
                "max_pool",
                format!("rank-4 input with H and W divisible by {k}"),
                format!("{xs:?}"),
            ));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), &xs, k, self.par);
        let v = Tensor::from_vec(&[xs[0], xs[1], xs[2] / k, xs[3] / k], out)?;
        Ok(self.push(v, self.req(x), Op::MaxPool { x, argmax }))
    }

    pub fn upsample(&mut self, x: VarId, factor: (usize, usize)) -> Result<VarId> {
        if factor.0 < 1 || factor.1 < 1 {
            return Err(Error::InvalidInput("upsample: factors must be >= 1".into()));
        }
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension(
                "upsample",
                "rank-4 input".to_string(),
                format!("{xs:?}"),
            ));
        }
        let out = kernels::upsample_forward(self.value(x).data(), &xs, factor);
        let v = Tensor::from_vec(&[xs[0], xs[1], xs[2] * factor.0, xs[3] * factor.1], out)?;
        Ok(self.push(v, self.req(x), Op::Upsample(x, factor)))
    }

    /// Concatenate along the channel axis of `[B, C, H, W]`.
    pub fn concat_c(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::dimension(
                "concat_c",
                format!("matching batch/spatial axes, got {sa:?}"),
                format!("{sb:?}"),
            ));
        }
        let (bt, c1, c2, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity((c1 + c2) * bt * plane);
        for bi in 0..bt {
            out.extend_from_slice(&va[bi * c1 * plane..(bi + 1) * c1 * plane]);
            out.extend_from_slice(&vb[bi * c2 * plane..(bi + 1) * c2 * plane]);
        }
        let v = Tensor::from_vec(&[bt, c1 + c2, h, w], out)?;
        Ok(self.push(v, self.req(a) || self.req(b), Op::ConcatC(a, b)))
    }

    /// Dense layer: `x [B, F] * w [O, F]^T + b [O]`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dimension(
                "linear",
                "x [B, F], w [O, F]".to_string(),
                format!("x {xs:?}, w {ws:?}"),
            ));
        }
        let (bt, f, o) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bt * o];
        for bi in 0..bt {
            for oi in 0..o {
                let mut acc = bv[oi];
                let wrow = &wv[oi * f..(oi + 1) * f];
                let xrow = &xv[bi * f..(bi + 1) * f];
                for k in 0..f {
                    acc += xrow[k] * wrow[k];
                }
                out[bi * o + oi] = acc;
            }
        }
        let requires = self.req(x) || self.req(w) || self.req(b);
        let v = Tensor::from_vec(&[bt, o], out)?;
        Ok(self.push(v, requires, Op::Linear { x, w, b }))
    }

    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn gap(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension(
                "gap",
                "rank-4 input".to_string(),
                format!("{xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let xv = self.value(x).data();
        let mut out = vec![0.0; xs[0] * xs[1]];
        for (p, o) in out.iter_mut().enumerate() {
            *o = xv[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        let v = Tensor::from_vec(&[xs[0], xs[1]], out)?;
        Ok(self.push(v, self.req(x), Op::Gap(x)))
    }

    /// Softmax over the spatial plane of `[B, K, H, W]`, per (batch, map).
    pub fn softmax_hw(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension(
                "softmax_hw",
                "rank-4 input".to_string(),
                format!("{xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for p in 0..xs[0] * xs[1] {
            let src = &xv[p * plane..(p + 1) * plane];
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[p * plane..(p + 1) * plane];
            let mut s = 0.0;
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = (v - m).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
        let v = Tensor::from_vec(&xs, out)?;
        Ok(self.push(v, self.req(x), Op::SoftmaxHw(x)))
    }

    /// Spatial expectation of normalized maps `[B, K, H, W] -> [B, K, 2]`,
    /// pairing (sum h*grid_x, sum h*grid_y).
    pub fn expect_hw(&mut self, h: VarId, grid_x: Vec<f64>, grid_y: Vec<f64>) -> Result<VarId> {
        let hs = self.value(h).shape().to_vec();
        if hs.len() != 4 || grid_x.len() != hs[3] || grid_y.len() != hs[2] {
            return Err(Error::dimension(
                "expect_hw",
                format!("grids matching H={} W={}", hs[2], hs[3]),
                format!("grid_y {}, grid_x {}", grid_y.len(), grid_x.len()),
            ));
        }
        let (bt, k, hh, ww) = (hs[0], hs[1], hs[2], hs[3]);
        let hv = self.value(h).data();
        let mut out = vec![0.0; bt * k * 2];
        for p in 0..bt * k {
            let src = &hv[p * hh * ww..(p + 1) * hh * ww];
            let mut ex = 0.0;
            let mut ey = 0.0;
            for i in 0..hh {
                for j in 0..ww {
                    let v = src[i * ww + j];
                    ex += v * grid_x[j];
                    ey += v * grid_y[i];
                }
            }
            out[p * 2] = ex;
            out[p * 2 + 1] = ey;
        }
        let v = Tensor::from_vec(&[bt, k, 2], out)?;
        Ok(self.push(v, self.req(h), Op::ExpectHw { h, grid_x, grid_y }))
    }

    /// Renormalize each spatial plane of `[B, K, H, W]` to sum 1.
    pub fn renorm_hw(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension(
                "renorm_hw",
                "rank-4 input".to_string(),
                format!("{xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for p in 0..xs[0] * xs[1] {
            let src = &xv[p * plane..(p + 1) * plane];
            let s: f64 = src.iter().sum();
            for (d, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src.iter()) {
                *d = v / s;
            }
        }
        let v = Tensor::from_vec(&xs, out)?;
        Ok(self.push(v, self.req(x), Op::RenormHw(x)))
    }

    /// Sum each spatial plane of `[B, K, H, W]` down to `[B, K]`.
    pub fn sum_hw(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dimension(
                "sum_hw",
                "rank-4 input".to_string(),
                format!("{xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let xv = self.value(x).data();
        let mut out = vec![0.0; xs[0] * xs[1]];
        for (p, o) in out.iter_mut().enumerate() {
            *o = xv[p * plane..(p + 1) * plane].iter().sum();
        }
        let v = Tensor::from_vec(&[xs[0], xs[1]], out)?;
        Ok(self.push(v, self.req(x), Op::SumHw(x)))
    }

    /// Broadcast-add a `[K]` bias over the rows of `[B, K]`.
    pub fn add_row_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::dimension(
                "add_row_bias",
                format!("x [B, K], b [{}]", xs.last().unwrap_or(&0)),
                format!("x {xs:?}, b {bs:?}"),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % bs[0]])
            .collect();
        let v = Tensor::from_vec(&xs, out)?;
        Ok(self.push(v, self.req(x) || self.req(b), Op::AddRowBias(x, b)))
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.value(x).len() as f64;
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, self.req(x), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, self.req(x), Op::SumAll(x))
    }

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad`
    /// leaves are left on the tape; interior state is consumed.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        let par = self.par;

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let g = node.grad.take().expect("grad present");
            let gd = g.data();

            match &mut node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accum(head, *a, |d| d.copy_from_slice(gd), |d| add_into(d, gd));
                    accum(head, *b, |d| d.copy_from_slice(gd), |d| add_into(d, gd));
                }
                Op::Sub(a, b) => {
                    accum(head, *a, |d| d.copy_from_slice(gd), |d| add_into(d, gd));
                    accum_map(head, *b, gd, |gv, _| -gv);
                }
                Op::Mul(a, b) => {
                    let (ai, bi) = (a.0, b.0);
                    // contributions use the other operand's value
                    let contrib_a: Vec<f64> = gd
                        .iter()
                        .zip(head[bi].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    let contrib_b: Vec<f64> = gd
                        .iter()
                        .zip(head[ai].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    accum(
                        head,
                        VarId(ai),
                        |d| d.copy_from_slice(&contrib_a),
                        |d| add_into(d, &contrib_a),
                    );
                    accum(
                        head,
                        VarId(bi),
                        |d| d.copy_from_slice(&contrib_b),
                        |d| add_into(d, &contrib_b),
                    );
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accum_map(head, *a, gd, |gv, _| c * gv);
                }
                Op::MulConst(a, k) => {
                    let contrib: Vec<f64> =
                        gd.iter().zip(k.data()).map(|(g, v)| g * v).collect();
                    accum(
                        head,
                        *a,
                        |d| d.copy_from_slice(&contrib),
                        |d| add_into(d, &contrib),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let xi = a.0;
                    let contrib: Vec<f64> = gd
                        .iter()
                        .zip(head[xi].value.data())
                        .map(|(g, x)| if *x >= 0.0 { *g } else { slope * g })
                        .collect();
                    accum(
                        head,
                        *a,
                        |d| d.copy_from_slice(&contrib),
                        |d| add_into(d, &contrib),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let contrib: Vec<f64> = gd
                        .iter()
                        .zip(y.iter())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accum(
                        head,
                        *a,
                        |d| d.copy_from_slice(&contrib),
                        |d| add_into(d, &contrib),
                    );
                }
                Op::Conv2d { x, w, b, dims, cols } => {
                    let (xi, wi) = (x.0, w.0);
                    let need_dx = head[xi].requires_grad;
                    let need_dw = head[wi].requires_grad
                        || (*b).map(|b| head[b.0].requires_grad).unwrap_or(false);
                    let cols_taken = cols.take();
                    let (dx, dw, db) = kernels::conv2d_backward(
                        gd,
                        head[xi].value.data(),
                        head[wi].value.data(),
                        dims,
                        cols_taken.as_deref(),
                        need_dx,
                        need_dw,
                        par,
                    );
                    if let Some(dx) = dx {
                        accum(
                            head,
                            VarId(xi),
                            |d| d.copy_from_slice(&dx),
                            |d| add_into(d, &dx),
                        );
                    }
                    if let Some(dw) = dw {
                        accum(
                            head,
                            VarId(wi),
                            |d| d.copy_from_slice(&dw),
                            |d| add_into(d, &dw),
                        );
                    }
                    if let (Some(db), Some(b)) = (db, *b) {
                        if head[b.0].requires_grad {
                            accum(
                                head,
                                b,
                                |d| d.copy_from_slice(&db),
                                |d| add_into(d, &db),
                            );
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mode,
                    saved,
                } => {
                    let saved = saved.as_ref().expect("bn saved state");
                    let xs = head[x.0].value.shape();
                    let (bt, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let plane = h * w;
                    let n = (bt * plane) as f64;
                    let xv = head[x.0].value.data();
                    let gv = head[gamma.0].value.data();
                    let batch_mode = matches!(mode, BnMode::Batch);
                    let (mean, inv_std) = match mode {
                        BnMode::Batch => (saved.mean.as_slice(), saved.inv_std.as_slice()),
                        BnMode::Running { mean, .. } => (mean.as_slice(), saved.inv_std.as_slice()),
                    };

                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gxh = vec![0.0; c];
                    for bi in 0..bt {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let (m, is) = (mean[ch], inv_std[ch]);
                            for k in 0..plane {
                                let xh = (xv[base + k] - m) * is;
                                let gg = gd[base + k];
                                dgamma[ch] += gg * xh;
                                dbeta[ch] += gg;
                                sum_g[ch] += gg;
                                sum_gxh[ch] += gg * xh;
                            }
                        }
                    }
                    if head[x.0].requires_grad {
                        let mut dx = vec![0.0; xv.len()];
                        for bi in 0..bt {
                            for ch in 0..c {
                                let base = (bi * c + ch) * plane;
                                let (m, is, ga) = (mean[ch], inv_std[ch], gv[ch]);
                                if batch_mode {
                                    let mg = sum_g[ch] / n;
                                    let mgx = sum_gxh[ch] / n;
                                    for k in 0..plane {
                                        let xh = (xv[base + k] - m) * is;
                                        dx[base + k] = ga * is * (gd[base + k] - mg - xh * mgx);
                                    }
                                } else {
                                    for k in 0..plane {
                                        dx[base + k] = ga * is * gd[base + k];
                                    }
                                }
                            }
                        }
                        accum(
                            head,
                            *x,
                            |d| d.copy_from_slice(&dx),
                            |d| add_into(d, &dx),
                        );
                    }
                    if head[gamma.0].requires_grad {
                        accum(
                            head,
                            *gamma,
                            |d| d.copy_from_slice(&dgamma),
                            |d| add_into(d, &dgamma),
                        );
                    }
                    if head[beta.0].requires_grad {
                        accum(
                            head,
                            *beta,
                            |d| d.copy_from_slice(&dbeta),
                            |d| add_into(d, &dbeta),
                        );
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::maxpool_backward(gd, argmax, head[x.0].value.len());
                    accum(
                        head,
                        *x,
                        |d| d.copy_from_slice(&dx),
                        |d| add_into(d, &dx),
                    );
                }
                Op::Upsample(x, factor) => {
                    let dx =
                        kernels::upsample_backward(gd, head[x.0].value.shape(), *factor);
                    accum(
                        head,
                        *x,
                        |d| d.copy_from_slice(&dx),
                        |d| add_into(d, &dx),
                    );
                }
                Op::ConcatC(a, b) => {
                    let sa = head[a.0].value.shape();
                    let sb = head[b.0].value.shape();
                    let (bt, c1, c2) = (sa[0], sa[1], sb[1]);
                    let plane = sa[2] * sa[3];
                    let mut da = vec![0.0; head[a.0].value.len()];
                    let mut db = vec![0.0; head[b.0].value.len()];
                    for bi in 0..bt {
                        let src = &gd[bi * (c1 + c2) * plane..(bi + 1) * (c1 + c2) * plane];
                        da[bi * c1 * plane..(bi + 1) * c1 * plane]
                            .copy_from_slice(&src[..c1 * plane]);
                        db[bi * c2 * plane..(bi + 1) * c2 * plane]
                            .copy_from_slice(&src[c1 * plane..]);
                    }
                    accum(
                        head,
                        *a,
                        |d| d.copy_from_slice(&da),
                        |d| add_into(d, &da),
                    );
                    accum(
                        head,
                        *b,
                        |d| d.copy_from_slice(&db),
                        |d| add_into(d, &db),
                    );
                }
                Op::Linear { x, w, b } => {
                    let xs = head[x.0].value.shape();
                    let ws = head[w.0].value.shape();
                    let (bt, f, o) = (xs[0], xs[1], ws[0]);
                    let need_dx = head[x.0].requires_grad;
                    let need_dw = head[w.0].requires_grad;
                    let need_db = head[b.0].requires_grad;
                    let (mut dx, mut dw, mut db) = (Vec::new(), Vec::new(), Vec::new());
                    {
                        let xv = head[x.0].value.data();
                        let wv = head[w.0].value.data();
                        if need_dx {
                            dx = vec![0.0; bt * f];
                            for bi in 0..bt {
                                for oi in 0..o {
                                    let gg = gd[bi * o + oi];
                                    for k in 0..f {
                                        dx[bi * f + k] += gg * wv[oi * f + k];
                                    }
                                }
                            }
                        }
                        if need_dw {
                            dw = vec![0.0; o * f];
                            for bi in 0..bt {
                                for oi in 0..o {
                                    let gg = gd[bi * o + oi];
                                    for k in 0..f {
                                        dw[oi * f + k] += gg * xv[bi * f + k];
                                    }
                                }
                            }
                        }
                        if need_db {
                            db = vec![0.0; o];
                            for bi in 0..bt {
                                for oi in 0..o {
                                    db[oi] += gd[bi * o + oi];
                                }
                            }
                        }
                    }
                    if need_dx {
                        accum(
                            head,
                            *x,
                            |d| d.copy_from_slice(&dx),
                            |d| add_into(d, &dx),
                        );
                    }
                    if need_dw {
                        accum(
                            head,
                            *w,
                            |d| d.copy_from_slice(&dw),
                            |d| add_into(d, &dw),
                        );
                    }
                    if need_db {
                        accum(
                            head,
                            *b,
                            |d| d.copy_from_slice(&db),
                            |d| add_into(d, &db),
                        );
                    }
                }
                Op::Gap(x) => {
                    let xs = head[x.0].value.shape();
                    let plane = xs[2] * xs[3];
                    let inv = 1.0 / plane as f64;
                    let mut dx = vec![0.0; head[x.0].value.len()];
                    for (p, &gg) in gd.iter().enumerate() {
                        for d in &mut dx[p * plane..(p + 1) * plane] {
                            *d = gg * inv;
                        }
                    }
                    accum(
                        head,
                        *x,
                        |d| d.copy_from_slice(&dx),
                        |d| add_into(d, &dx),
                    );
                }
                Op::SoftmaxHw(x) => {
                    let y = node.value.data();
                    let xs = head[x.0].value.shape();
                    let plane = xs[2] * xs[3];
                    let mut dx = vec![0.0; y.len()];
                    for p in 0..xs[0] * xs[1] {
                        let ys = &y[p * plane..(p + 1) * plane];
                        let gs = &gd[p * plane..(p + 1) * plane];
                        let dot: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                        for k in 0..plane {
                            dx[p * plane + k] = ys[k] * (gs[k] - dot);
                        }
                    }
                    accum(
                        head,
                        *x,
                        |d| d.copy_from_slice(&dx),
                        |d| add_into(d, &dx),
                    );
                }
                Op::ExpectHw { h, grid_x, grid_y } => {
                    let hs = head[h.0].value.shape();
                    let (hh, ww) = (hs[2], hs[3]);
                    let mut dh = vec![0.0; head[h.0].value.len()];
                    for p in 0..hs[0] * hs[1] {
                        let gx = gd[p * 2];
                        let gy = gd[p * 2 + 1];
                        let dst = &mut dh[p * hh * ww..(p + 1) * hh * ww];
                        for i in 0..hh {
                            for j in 0..ww {
                                dst[i * ww + j] = gx * grid_x[j] + gy * grid_y[i];
                            }
                        }
                    }
                    accum(
                        head,
                        *h,
                        |d| d.copy_from_slice(&dh),
                        |d| add_into(d, &dh),
                    );
                }
                Op::RenormHw(x) => {
                    let y = node.value.data();
                    let xs = head[x.0].value.shape();
                    let plane = xs[2] * xs[3];
                    let xv = head[x.0].value.data();
                    let mut dx = vec![0.0; y.len()];
                    for p in 0..xs[0] * xs[1] {
                        let s: f64 = xv[p * plane..(p + 1) * plane].iter().sum();
                        let ys = &y[p * plane..(p + 1) * plane];
                        let gs = &gd[p * plane..(p + 1) * plane];
                        let dot: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                        for k in 0..plane {
                            dx[p * plane + k] = (gs[k] - dot) / s;
                        }
                    }
                    accum(
                        head,
                        *x,
                        |d| d.copy_from_slice(&dx),
                        |d| add_into(d, &dx),
                    );
                }
                Op::SumHw(x) => {
                    let xs = head[x.0].value.shape();
                    let plane = xs[2] * xs[3];
                    let mut dx = vec![0.0; head[x.0].value.len()];
                    for (p, &gg) in gd.iter().enumerate() {
                        dx[p * plane..(p + 1) * plane].fill(gg);
                    }
                    accum(
                        head,
                        *x,
                        |d| d.copy_from_slice(&dx),
                        |d| add_into(d, &dx),
                    );
                }
                Op::AddRowBias(x, b) => {
                    let k = head[b.0].value.len();
                    accum(head, *x, |d| d.copy_from_slice(gd), |d| add_into(d, gd));
                    if head[b.0].requires_grad {
                        let mut db = vec![0.0; k];
                        for (i, g) in gd.iter().enumerate() {
                            db[i % k] += g;
                        }
                        accum(
                            head,
                            *b,
                            |d| d.copy_from_slice(&db),
                            |d| add_into(d, &db),
                        );
                    }
                }
                Op::MeanAll(x) => {
                    let n = head[x.0].value.len() as f64;
                    let gv = gd[0] / n;
                    accum(head, *x, |d| d.fill(gv), |d| {
                        for v in d.iter_mut() {
                            *v += gv;
                        }
                    });
                }
                Op::SumAll(x) => {
                    let gv = gd[0];
                    accum(head, *x, |d| d.fill(gv), |d| {
                        for v in d.iter_mut() {
                            *v += gv;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// Accumulate a contribution into `nodes[target]`; `init` fills a fresh
/// gradient buffer, `add` folds into an existing one.
fn accum(
    nodes: &mut [Node],
    target: VarId,
    init: impl FnOnce(&mut [f64]),
    add: impl FnOnce(&mut [f64]),
) {
    let node = &mut nodes[target.0];
    if !node.requires_grad {
        return;
    }
    match node.grad.as_mut() {
        Some(g) => add(g.data_mut()),
        None => {
            let mut g = Tensor::zeros(node.value.shape());
            init(g.data_mut());
            node.grad = Some(g);
        }
    }
}

fn accum_map(nodes: &mut [Node], target: VarId, gd: &[f64], f: impl Fn(f64, f64) -> f64) {
    let node = &mut nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let xv = node.value.data();
    let contrib: Vec<f64> = gd.iter().zip(xv.iter()).map(|(g, x)| f(*g, *x)).collect();
    match node.grad.as_mut() {
        Some(g) => add_into(g.data_mut(), &contrib),
        None => {
            let mut g = Tensor::zeros(node.value.shape());
            g.data_mut().copy_from_slice(&contrib);
            node.grad = Some(g);
        }
    }
}
