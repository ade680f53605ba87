//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and an op
//! record pointing at the input node ids. Records are therefore already in
//! execution (topological) order, and `backward` replays them exactly once
//! in reverse, accumulating gradients across fan-out by summation.
//!
//! A tape is single-threaded by design; independent tapes are safe to use
//! from independent threads.

use super::tensor::{shape_str, AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    GlobalMaxPool {
        input: TensorId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: TensorId,
    },
    Softmax2d {
        input: TensorId,
        beta: f32,
    },
    GradReverse {
        input: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sub {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    AddConst {
        input: TensorId,
    },
    MulConst {
        input: TensorId,
        value: f32,
    },
    Sum {
        input: TensorId,
    },
    Channel {
        input: TensorId,
        index: usize,
    },
    ConcatChannels {
        lhs: TensorId,
        rhs: TensorId,
    },
    ConcatVecs {
        parts: Vec<TensorId>,
    },
    ScaleChannels {
        maps: TensorId,
        weights: TensorId,
    },
    GaussianPriorMaps {
        mu_x: TensorId,
        mu_y: TensorId,
        sigma_x: TensorId,
        sigma_y: TensorId,
        h: usize,
        w: usize,
    },
    BceMean {
        pred: TensorId,
        target: Vec<f32>,
    },
    BceWithLogits {
        logit: TensorId,
        label: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Clamp used inside the cross-entropy ops so logs stay finite.
const BCE_EPS: f32 = 1e-7;

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call with respect to node `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution: input `[Cin,H,W]`, kernel `[Cout,Cin,kh,kw]`,
    /// bias `[Cout]` -> `[Cout,H',W']` with `H' = (H+2p-kh)/stride + 1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, AutodiffError> {
        let (xs, ks, bs) = (
            self.value(input).shape().to_vec(),
            self.value(kernel).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                expected: "input [Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout]".into(),
                got: format!("{}, {}, {}", shape_str(&xs), shape_str(&ks), shape_str(&bs)),
            });
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                expected: format!("kernel in-channels {cin}"),
                got: format!("{kcin}"),
            });
        }
        if bs[0] != cout {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                expected: format!("bias length {cout}"),
                got: format!("{}", bs[0]),
            });
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArg {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if kh > h + 2 * padding {
            return Err(AutodiffError::Dimension {
                op: "conv2d",
                axis: 1,
                detail: format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding),
            });
        }
        if kw > w + 2 * padding {
            return Err(AutodiffError::Dimension {
                op: "conv2d",
                axis: 2,
                detail: format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0f32; cout * oh * ow];
        let pad = padding as isize;
        for co in 0..cout {
            let kbase = co * cin * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ci * h * w + iy as usize * w;
                            let krow = kbase + ci * kh * kw + ky * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[xrow + ix as usize] * k[krow + kx];
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let requires = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![cout, oh, ow], out).expect("conv2d output shape"),
            requires,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel spatial convolution: input `[C,H,W]`, kernels `[C,kh,kw]`,
    /// bias `[C]` -> `[C,H',W']`.
    pub fn depthwise_conv2d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, AutodiffError> {
        let (xs, ks, bs) = (
            self.value(input).shape().to_vec(),
            self.value(kernels).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 3 || ks.len() != 3 || bs.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "depthwise_conv2d",
                expected: "input [C,H,W], kernels [C,kh,kw], bias [C]".into(),
                got: format!("{}, {}, {}", shape_str(&xs), shape_str(&ks), shape_str(&bs)),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (kc, kh, kw) = (ks[0], ks[1], ks[2]);
        if kc != c || bs[0] != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "depthwise_conv2d",
                expected: format!("{c} kernels and biases"),
                got: format!("{kc} kernels, {} biases", bs[0]),
            });
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArg {
                op: "depthwise_conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(AutodiffError::Dimension {
                op: "depthwise_conv2d",
                axis: if kh > h + 2 * padding { 1 } else { 2 },
                detail: "kernel exceeds padded input".into(),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0f32; c * oh * ow];
        let pad = padding as isize;
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[ci];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = ci * h * w + iy as usize * w;
                        let krow = ci * kh * kw + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] * k[krow + kx];
                        }
                    }
                    out[ci * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let requires = self.requires(input) || self.requires(kernels) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![c, oh, ow], out).expect("depthwise output shape"),
            requires,
            Op::DepthwiseConv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Depthwise-separable convolution: per-channel spatial conv followed by
    /// a 1x1 channel-mixing conv. Bias-free; callers add biases explicitly
    /// where they need them.
    pub fn depthwise_separable(
        &mut self,
        input: TensorId,
        dw_kernels: TensorId,
        pw_kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, AutodiffError> {
        let c = self.value(input).shape()[0];
        let pw_shape = self.value(pw_kernel).shape().to_vec();
        if pw_shape.len() != 4 || pw_shape[1] != c || pw_shape[2] != 1 || pw_shape[3] != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "depthwise_separable",
                expected: format!("pointwise kernel [Cout,{c},1,1]"),
                got: shape_str(&pw_shape),
            });
        }
        let zero_c = self.constant(Tensor::zeros(&[c]));
        let dw = self.depthwise_conv2d(input, dw_kernels, zero_c, stride, padding)?;
        let zero_out = self.constant(Tensor::zeros(&[pw_shape[0]]));
        self.conv2d(dw, pw_kernel, zero_out, 1, 0)
    }

    // ── pointwise ───────────────────────────────────────────────────────

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let out: Vec<f32> = self.value(input).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        let requires = self.requires(input);
        self.push(
            Tensor::new(shape, out).expect("relu shape"),
            requires,
            Op::Relu { input },
        )
    }

    pub fn sigmoid_op(&mut self, input: TensorId) -> TensorId {
        let out: Vec<f32> = self.value(input).data().iter().map(|v| sigmoid(*v)).collect();
        let shape = self.value(input).shape().to_vec();
        let requires = self.requires(input);
        self.push(
            Tensor::new(shape, out).expect("sigmoid shape"),
            requires,
            Op::Sigmoid { input },
        )
    }

    /// Identity forward; multiplies the upstream gradient by -1 on the way
    /// back.
    pub fn gradient_reverse(&mut self, input: TensorId) -> TensorId {
        let value = self.value(input).clone();
        let requires = self.requires(input);
        self.push(value, requires, Op::GradReverse { input })
    }

    // ── dense / pooling ─────────────────────────────────────────────────

    /// Dense layer `Wx + b`: x `[n]`, W `[m,n]`, b `[m]` -> `[m]`.
    pub fn linear(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                expected: "x [n], W [m,n], b [m]".into(),
                got: format!("{}, {}, {}", shape_str(&xs), shape_str(&ws), shape_str(&bs)),
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0f32; m];
        for i in 0..m {
            let row = &wt[i * n..(i + 1) * n];
            let mut acc = b[i];
            for j in 0..n {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
        let requires = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            Tensor::from_vec(out),
            requires,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    fn check_maps(&self, op: &'static str, id: TensorId) -> Result<(usize, usize, usize), AutodiffError> {
        let s = self.value(id).shape();
        if s.len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                expected: "[C,h,w]".into(),
                got: shape_str(s),
            });
        }
        if s[1] == 0 || s[2] == 0 {
            return Err(AutodiffError::Dimension {
                op,
                axis: if s[1] == 0 { 1 } else { 2 },
                detail: "empty map".into(),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Per-channel max over the spatial grid. Ties route the gradient to the
    /// first maximal element in row-major order.
    pub fn global_max_pool(&mut self, input: TensorId) -> Result<TensorId, AutodiffError> {
        let (c, h, w) = self.check_maps("global_max_pool", input)?;
        let x = self.value(input).data();
        let mut out = vec![0.0f32; c];
        let mut argmax = vec![0usize; c];
        for ci in 0..c {
            let base = ci * h * w;
            let mut best = x[base];
            let mut best_at = base;
            for off in 1..h * w {
                if x[base + off] > best {
                    best = x[base + off];
                    best_at = base + off;
                }
            }
            out[ci] = best;
            argmax[ci] = best_at;
        }
        let requires = self.requires(input);
        Ok(self.push(
            Tensor::from_vec(out),
            requires,
            Op::GlobalMaxPool { input, argmax },
        ))
    }

    /// Per-channel mean over the spatial grid.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId, AutodiffError> {
        let (c, h, w) = self.check_maps("global_avg_pool", input)?;
        let x = self.value(input).data();
        let inv = 1.0 / (h * w) as f32;
        let mut out = vec![0.0f32; c];
        for ci in 0..c {
            let base = ci * h * w;
            let mut acc = 0.0f32;
            for off in 0..h * w {
                acc += x[base + off];
            }
            out[ci] = acc * inv;
        }
        let requires = self.requires(input);
        Ok(self.push(Tensor::from_vec(out), requires, Op::GlobalAvgPool { input }))
    }

    /// Softmax over a whole 2-D map with sharpness `beta`, computed with
    /// max-subtraction so large `beta` does not overflow.
    pub fn softmax2d(&mut self, input: TensorId, beta: f32) -> Result<TensorId, AutodiffError> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax2d",
                expected: "[h,w]".into(),
                got: shape_str(&s),
            });
        }
        if !(beta > 0.0) {
            return Err(AutodiffError::InvalidArg {
                op: "softmax2d",
                detail: format!("beta must be > 0, got {beta}"),
            });
        }
        let x = self.value(input).data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteInput { op: "softmax2d" });
        }
        let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut out: Vec<f32> = x.iter().map(|v| (beta * (v - max)).exp()).collect();
        let total: f32 = out.iter().sum();
        for v in &mut out {
            *v /= total;
        }
        let requires = self.requires(input);
        Ok(self.push(
            Tensor::new(s, out).expect("softmax shape"),
            requires,
            Op::Softmax2d { input, beta },
        ))
    }

    // ── structural ──────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        lhs: TensorId,
        rhs: TensorId,
    ) -> Result<(), AutodiffError> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: op_name,
                expected: shape_str(self.value(lhs).shape()),
                got: shape_str(self.value(rhs).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, AutodiffError> {
        self.binary_same_shape("add", lhs, rhs)?;
        let out: Vec<f32> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let requires = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(
            Tensor::new(shape, out).expect("add shape"),
            requires,
            Op::Add { lhs, rhs },
        ))
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, AutodiffError> {
        self.binary_same_shape("sub", lhs, rhs)?;
        let out: Vec<f32> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| a - b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let requires = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(
            Tensor::new(shape, out).expect("sub shape"),
            requires,
            Op::Sub { lhs, rhs },
        ))
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, AutodiffError> {
        self.binary_same_shape("mul", lhs, rhs)?;
        let out: Vec<f32> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let requires = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(
            Tensor::new(shape, out).expect("mul shape"),
            requires,
            Op::Mul { lhs, rhs },
        ))
    }

    pub fn add_const(&mut self, input: TensorId, value: f32) -> TensorId {
        let out: Vec<f32> = self.value(input).data().iter().map(|v| v + value).collect();
        let shape = self.value(input).shape().to_vec();
        let requires = self.requires(input);
        self.push(
            Tensor::new(shape, out).expect("add_const shape"),
            requires,
            Op::AddConst { input },
        )
    }

    pub fn mul_const(&mut self, input: TensorId, value: f32) -> TensorId {
        let out: Vec<f32> = self.value(input).data().iter().map(|v| v * value).collect();
        let shape = self.value(input).shape().to_vec();
        let requires = self.requires(input);
        self.push(
            Tensor::new(shape, out).expect("mul_const shape"),
            requires,
            Op::MulConst { input, value },
        )
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let total: f32 = self.value(input).data().iter().sum();
        let requires = self.requires(input);
        self.push(Tensor::scalar(total), requires, Op::Sum { input })
    }

    /// Extract channel `index` of a `[C,h,w]` tensor as `[h,w]`.
    pub fn channel(&mut self, input: TensorId, index: usize) -> Result<TensorId, AutodiffError> {
        let (c, h, w) = self.check_maps("channel", input)?;
        if index >= c {
            return Err(AutodiffError::Dimension {
                op: "channel",
                axis: 0,
                detail: format!("index {index} out of {c} channels"),
            });
        }
        let plane = self.value(input).data()[index * h * w..(index + 1) * h * w].to_vec();
        let requires = self.requires(input);
        Ok(self.push(
            Tensor::new(vec![h, w], plane).expect("channel shape"),
            requires,
            Op::Channel { input, index },
        ))
    }

    /// Concatenate two `[C,h,w]` tensors along the channel axis.
    pub fn concat_channels(
        &mut self,
        lhs: TensorId,
        rhs: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let (c1, h1, w1) = self.check_maps("concat_channels", lhs)?;
        let (c2, h2, w2) = self.check_maps("concat_channels", rhs)?;
        if (h1, w1) != (h2, w2) {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_channels",
                expected: format!("[*,{h1},{w1}]"),
                got: format!("[*,{h2},{w2}]"),
            });
        }
        let mut out = Vec::with_capacity((c1 + c2) * h1 * w1);
        out.extend_from_slice(self.value(lhs).data());
        out.extend_from_slice(self.value(rhs).data());
        let requires = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(
            Tensor::new(vec![c1 + c2, h1, w1], out).expect("concat shape"),
            requires,
            Op::ConcatChannels { lhs, rhs },
        ))
    }

    /// Concatenate rank-1 tensors into one vector.
    pub fn concat_vecs(&mut self, parts: &[TensorId]) -> Result<TensorId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArg {
                op: "concat_vecs",
                detail: "no parts".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_vecs",
                    expected: "rank-1 parts".into(),
                    got: shape_str(v.shape()),
                });
            }
            out.extend_from_slice(v.data());
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::from_vec(out),
            requires,
            Op::ConcatVecs {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Scale each channel of `maps` `[C,h,w]` by the matching entry of
    /// `weights` `[C]`.
    pub fn scale_channels(
        &mut self,
        maps: TensorId,
        weights: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let (c, h, w) = self.check_maps("scale_channels", maps)?;
        let ws = self.value(weights).shape();
        if ws != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_channels",
                expected: format!("weights [{c}]"),
                got: shape_str(ws),
            });
        }
        let m = self.value(maps).data();
        let s = self.value(weights).data();
        let mut out = vec![0.0f32; c * h * w];
        for ci in 0..c {
            let sc = s[ci];
            for off in 0..h * w {
                out[ci * h * w + off] = m[ci * h * w + off] * sc;
            }
        }
        let requires = self.requires(maps) || self.requires(weights);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out).expect("scale shape"),
            requires,
            Op::ScaleChannels { maps, weights },
        ))
    }

    /// Render N two-dimensional Gaussian bumps on an h x w grid from raw
    /// parameters (all `[N]`). Means are `sigmoid(raw)` so they stay in
    /// (0,1); standard deviations are `softplus(raw)` so they stay positive.
    /// Grid coordinates are `(i/w, j/h)`, matching the soft-argmax grid.
    /// Peak amplitude follows the bivariate normal density 1/(2 pi sx sy).
    pub fn gaussian_prior_maps(
        &mut self,
        mu_x: TensorId,
        mu_y: TensorId,
        sigma_x: TensorId,
        sigma_y: TensorId,
        h: usize,
        w: usize,
    ) -> Result<TensorId, AutodiffError> {
        let n = self.value(mu_x).shape().to_vec();
        for (name, id) in [("mu_y", mu_y), ("sigma_x", sigma_x), ("sigma_y", sigma_y)] {
            if self.value(id).shape() != n.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "gaussian_prior_maps",
                    expected: format!("{name} shaped {}", shape_str(&n)),
                    got: shape_str(self.value(id).shape()),
                });
            }
        }
        if n.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gaussian_prior_maps",
                expected: "rank-1 parameter vectors".into(),
                got: shape_str(&n),
            });
        }
        if h == 0 || w == 0 {
            return Err(AutodiffError::InvalidArg {
                op: "gaussian_prior_maps",
                detail: "empty grid".into(),
            });
        }
        let count = n[0];
        let mut out = vec![0.0f32; count * h * w];
        {
            let rmx = self.value(mu_x).data();
            let rmy = self.value(mu_y).data();
            let rsx = self.value(sigma_x).data();
            let rsy = self.value(sigma_y).data();
            for p in 0..count {
                let mx = sigmoid(rmx[p]);
                let my = sigmoid(rmy[p]);
                let sx = softplus(rsx[p]);
                let sy = softplus(rsy[p]);
                let amp = 1.0 / (2.0 * std::f32::consts::PI * sx * sy);
                for j in 0..h {
                    let dy = j as f32 / h as f32 - my;
                    let ey = dy * dy / (2.0 * sy * sy);
                    for i in 0..w {
                        let dx = i as f32 / w as f32 - mx;
                        let ex = dx * dx / (2.0 * sx * sx);
                        out[p * h * w + j * w + i] = amp * (-(ex + ey)).exp();
                    }
                }
            }
        }
        let requires = self.requires(mu_x)
            || self.requires(mu_y)
            || self.requires(sigma_x)
            || self.requires(sigma_y);
        Ok(self.push(
            Tensor::new(vec![count, h, w], out).expect("prior maps shape"),
            requires,
            Op::GaussianPriorMaps {
                mu_x,
                mu_y,
                sigma_x,
                sigma_y,
                h,
                w,
            },
        ))
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean binary cross-entropy of `pred` (flattened) against a constant
    /// target vector. Values are clamped away from {0,1} before the logs.
    pub fn bce_mean(&mut self, pred: TensorId, target: &[f32]) -> Result<TensorId, AutodiffError> {
        let p = self.value(pred);
        if p.numel() != target.len() || target.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_mean",
                expected: format!("target length {}", p.numel()),
                got: format!("{}", target.len()),
            });
        }
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.data().iter().zip(target) {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= (tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln()) as f64;
        }
        let mean = (acc / target.len() as f64) as f32;
        let requires = self.requires(pred);
        Ok(self.push(
            Tensor::scalar(mean),
            requires,
            Op::BceMean {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Numerically stable binary cross-entropy from a raw logit:
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(
        &mut self,
        logit: TensorId,
        label: f32,
    ) -> Result<TensorId, AutodiffError> {
        let l = self.value(logit);
        if l.numel() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                expected: "scalar logit".into(),
                got: shape_str(l.shape()),
            });
        }
        let z = l.item();
        if !z.is_finite() {
            return Err(AutodiffError::NonFiniteInput {
                op: "bce_with_logits",
            });
        }
        let value = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        let requires = self.requires(logit);
        Ok(self.push(
            Tensor::scalar(value),
            requires,
            Op::BceWithLogits { logit, label },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of all nodes that
    /// (transitively) require them become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutodiffError> {
        {
            let node = &self.nodes[loss.0];
            if node.value.numel() != 1 {
                return Err(AutodiffError::NonScalarLoss(node.value.shape().to_vec()));
            }
            if !node.requires_grad {
                return Err(AutodiffError::DetachedGraph);
            }
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        // Accumulate `delta` into the pending gradient buffer of `id`.
        fn acc(
            tape: &Tape,
            grads: &mut [Option<Vec<f32>>],
            id: TensorId,
            delta: impl FnOnce(&mut [f32]),
        ) {
            if !tape.requires(id) {
                return;
            }
            let numel = tape.value(id).numel();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
            delta(slot.as_mut_slice());
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let xs = self.value(*input).shape();
                let ks = self.value(*kernel).shape();
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = self.nodes[i].value.shape();
                let (oh, ow) = (os[1], os[2]);
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let need_gi = self.requires(*input);
                let need_gk = self.requires(*kernel);
                let mut gi = vec![0.0f32; if need_gi { cin * h * w } else { 0 }];
                let mut gk = vec![0.0f32; if need_gk { cout * cin * kh * kw } else { 0 }];
                let pad = *padding as isize;
                for co in 0..cout {
                    let kbase = co * cin * kh * kw;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gout[co * oh * ow + oy * ow + ox];
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = ci * h * w + iy as usize * w;
                                    let krow = kbase + ci * kh * kw + ky * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        if need_gi {
                                            gi[xrow + ix as usize] += g * k[krow + kx];
                                        }
                                        if need_gk {
                                            gk[krow + kx] += g * x[xrow + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_gi {
                    acc(self, grads, *input, |s| {
                        for (a, b) in s.iter_mut().zip(&gi) {
                            *a += b;
                        }
                    });
                }
                if need_gk {
                    acc(self, grads, *kernel, |s| {
                        for (a, b) in s.iter_mut().zip(&gk) {
                            *a += b;
                        }
                    });
                }
                acc(self, grads, *bias, |s| {
                    for co in 0..cout {
                        let mut t = 0.0;
                        for off in 0..oh * ow {
                            t += gout[co * oh * ow + off];
                        }
                        s[co] += t;
                    }
                });
            }
            Op::DepthwiseConv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let xs = self.value(*input).shape();
                let ks = self.value(*kernels).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (kh, kw) = (ks[1], ks[2]);
                let os = self.nodes[i].value.shape();
                let (oh, ow) = (os[1], os[2]);
                let x = self.value(*input).data();
                let k = self.value(*kernels).data();
                let need_gi = self.requires(*input);
                let need_gk = self.requires(*kernels);
                let mut gi = vec![0.0f32; if need_gi { c * h * w } else { 0 }];
                let mut gk = vec![0.0f32; if need_gk { c * kh * kw } else { 0 }];
                let pad = *padding as isize;
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gout[ci * oh * ow + oy * ow + ox];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = ci * h * w + iy as usize * w;
                                let krow = ci * kh * kw + ky * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    if need_gi {
                                        gi[xrow + ix as usize] += g * k[krow + kx];
                                    }
                                    if need_gk {
                                        gk[krow + kx] += g * x[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                if need_gi {
                    acc(self, grads, *input, |s| {
                        for (a, b) in s.iter_mut().zip(&gi) {
                            *a += b;
                        }
                    });
                }
                if need_gk {
                    acc(self, grads, *kernels, |s| {
                        for (a, b) in s.iter_mut().zip(&gk) {
                            *a += b;
                        }
                    });
                }
                acc(self, grads, *bias, |s| {
                    for ci in 0..c {
                        let mut t = 0.0;
                        for off in 0..oh * ow {
                            t += gout[ci * oh * ow + off];
                        }
                        s[ci] += t;
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                acc(self, grads, *input, |s| {
                    for (idx, g) in gout.iter().enumerate() {
                        if x[idx] > 0.0 {
                            s[idx] += g;
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = self.nodes[i].value.data();
                acc(self, grads, *input, |s| {
                    for (idx, g) in gout.iter().enumerate() {
                        s[idx] += g * y[idx] * (1.0 - y[idx]);
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = self.value(*weight).shape();
                let (m, n) = (ws[0], ws[1]);
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                acc(self, grads, *input, |s| {
                    for r in 0..m {
                        let g = gout[r];
                        let row = &wt[r * n..(r + 1) * n];
                        for c in 0..n {
                            s[c] += g * row[c];
                        }
                    }
                });
                acc(self, grads, *weight, |s| {
                    for r in 0..m {
                        let g = gout[r];
                        for c in 0..n {
                            s[r * n + c] += g * x[c];
                        }
                    }
                });
                acc(self, grads, *bias, |s| {
                    for r in 0..m {
                        s[r] += gout[r];
                    }
                });
            }
            Op::GlobalMaxPool { input, argmax } => {
                acc(self, grads, *input, |s| {
                    for (c, &at) in argmax.iter().enumerate() {
                        s[at] += gout[c];
                    }
                });
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.value(*input).shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let inv = 1.0 / hw as f32;
                acc(self, grads, *input, |s| {
                    for ci in 0..c {
                        let g = gout[ci] * inv;
                        for off in 0..hw {
                            s[ci * hw + off] += g;
                        }
                    }
                });
            }
            Op::Softmax2d { input, beta } => {
                let y = self.nodes[i].value.data();
                let dot: f32 = y.iter().zip(gout).map(|(a, b)| a * b).sum();
                let beta = *beta;
                acc(self, grads, *input, |s| {
                    for idx in 0..y.len() {
                        s[idx] += beta * y[idx] * (gout[idx] - dot);
                    }
                });
            }
            Op::GradReverse { input } => {
                acc(self, grads, *input, |s| {
                    for (a, g) in s.iter_mut().zip(gout) {
                        *a -= g;
                    }
                });
            }
            Op::Add { lhs, rhs } => {
                acc(self, grads, *lhs, |s| {
                    for (a, g) in s.iter_mut().zip(gout) {
                        *a += g;
                    }
                });
                acc(self, grads, *rhs, |s| {
                    for (a, g) in s.iter_mut().zip(gout) {
                        *a += g;
                    }
                });
            }
            Op::Sub { lhs, rhs } => {
                acc(self, grads, *lhs, |s| {
                    for (a, g) in s.iter_mut().zip(gout) {
                        *a += g;
                    }
                });
                acc(self, grads, *rhs, |s| {
                    for (a, g) in s.iter_mut().zip(gout) {
                        *a -= g;
                    }
                });
            }
            Op::Mul { lhs, rhs } => {
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                acc(self, grads, *lhs, |s| {
                    for idx in 0..gout.len() {
                        s[idx] += gout[idx] * b[idx];
                    }
                });
                acc(self, grads, *rhs, |s| {
                    for idx in 0..gout.len() {
                        s[idx] += gout[idx] * a[idx];
                    }
                });
            }
            Op::AddConst { input } => {
                acc(self, grads, *input, |s| {
                    for (a, g) in s.iter_mut().zip(gout) {
                        *a += g;
                    }
                });
            }
            Op::MulConst { input, value } => {
                let v = *value;
                acc(self, grads, *input, |s| {
                    for (a, g) in s.iter_mut().zip(gout) {
                        *a += g * v;
                    }
                });
            }
            Op::Sum { input } => {
                let g = gout[0];
                acc(self, grads, *input, |s| {
                    for a in s.iter_mut() {
                        *a += g;
                    }
                });
            }
            Op::Channel { input, index } => {
                let xs = self.value(*input).shape();
                let hw = xs[1] * xs[2];
                let base = index * hw;
                acc(self, grads, *input, |s| {
                    for off in 0..hw {
                        s[base + off] += gout[off];
                    }
                });
            }
            Op::ConcatChannels { lhs, rhs } => {
                let n1 = self.value(*lhs).numel();
                acc(self, grads, *lhs, |s| {
                    for (a, g) in s.iter_mut().zip(&gout[..n1]) {
                        *a += g;
                    }
                });
                acc(self, grads, *rhs, |s| {
                    for (a, g) in s.iter_mut().zip(&gout[n1..]) {
                        *a += g;
                    }
                });
            }
            Op::ConcatVecs { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &gout[offset..offset + len];
                    acc(self, grads, p, |s| {
                        for (a, g) in s.iter_mut().zip(slice) {
                            *a += g;
                        }
                    });
                    offset += len;
                }
            }
            Op::ScaleChannels { maps, weights } => {
                let xs = self.value(*maps).shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let m = self.value(*maps).data();
                let wv = self.value(*weights).data();
                acc(self, grads, *maps, |s| {
                    for ci in 0..c {
                        let sc = wv[ci];
                        for off in 0..hw {
                            s[ci * hw + off] += gout[ci * hw + off] * sc;
                        }
                    }
                });
                acc(self, grads, *weights, |s| {
                    for ci in 0..c {
                        let mut t = 0.0;
                        for off in 0..hw {
                            t += gout[ci * hw + off] * m[ci * hw + off];
                        }
                        s[ci] += t;
                    }
                });
            }
            Op::GaussianPriorMaps {
                mu_x,
                mu_y,
                sigma_x,
                sigma_y,
                h,
                w,
            } => {
                let (h, w) = (*h, *w);
                let count = self.value(*mu_x).numel();
                let rmx = self.value(*mu_x).data();
                let rmy = self.value(*mu_y).data();
                let rsx = self.value(*sigma_x).data();
                let rsy = self.value(*sigma_y).data();
                let f = self.nodes[i].value.data();
                let mut gmx = vec![0.0f32; count];
                let mut gmy = vec![0.0f32; count];
                let mut gsx = vec![0.0f32; count];
                let mut gsy = vec![0.0f32; count];
                for p in 0..count {
                    let mx = sigmoid(rmx[p]);
                    let my = sigmoid(rmy[p]);
                    let sx = softplus(rsx[p]);
                    let sy = softplus(rsy[p]);
                    let (mut amx, mut amy, mut asx, mut asy) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
                    for j in 0..h {
                        let dy = j as f32 / h as f32 - my;
                        for iw in 0..w {
                            let dx = iw as f32 / w as f32 - mx;
                            let idx = p * h * w + j * w + iw;
                            let gf = gout[idx] * f[idx];
                            amx += gf * dx / (sx * sx);
                            amy += gf * dy / (sy * sy);
                            asx += gf * (dx * dx / (sx * sx * sx) - 1.0 / sx);
                            asy += gf * (dy * dy / (sy * sy * sy) - 1.0 / sy);
                        }
                    }
                    // chain through the reparameterizations
                    gmx[p] = amx * mx * (1.0 - mx);
                    gmy[p] = amy * my * (1.0 - my);
                    gsx[p] = asx * sigmoid(rsx[p]);
                    gsy[p] = asy * sigmoid(rsy[p]);
                }
                acc(self, grads, *mu_x, |s| {
                    for (a, b) in s.iter_mut().zip(&gmx) {
                        *a += b;
                    }
                });
                acc(self, grads, *mu_y, |s| {
                    for (a, b) in s.iter_mut().zip(&gmy) {
                        *a += b;
                    }
                });
                acc(self, grads, *sigma_x, |s| {
                    for (a, b) in s.iter_mut().zip(&gsx) {
                        *a += b;
                    }
                });
                acc(self, grads, *sigma_y, |s| {
                    for (a, b) in s.iter_mut().zip(&gsy) {
                        *a += b;
                    }
                });
            }
            Op::BceMean { pred, target } => {
                let g = gout[0] / target.len() as f32;
                let p = self.value(*pred).data();
                let target = target.clone();
                acc(self, grads, *pred, |s| {
                    for idx in 0..target.len() {
                        let pc = p[idx].clamp(BCE_EPS, 1.0 - BCE_EPS);
                        s[idx] += g * (pc - target[idx]) / (pc * (1.0 - pc));
                    }
                });
            }
            Op::BceWithLogits { logit, label } => {
                let z = self.value(*logit).item();
                let d = sigmoid(z) - label;
                let g = gout[0];
                acc(self, grads, *logit, |s| {
                    s[0] += g * d;
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn conv2d_scalar_product() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv2d_all_ones_full_window() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_shape_errors_name_axes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap());
        let b = t.constant(Tensor::zeros(&[1]));
        let err = t.conv2d(x, k, b, 1, 0).unwrap_err();
        match err {
            AutodiffError::Dimension { axis, .. } => assert_eq!(axis, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn depthwise_identity_kernels_preserve_input() {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new(vec![2, 3, 3], (0..18).map(|v| v as f32).collect()).unwrap(),
        );
        // 3x3 kernels with a 1 in the middle
        let mut kd = vec![0.0; 2 * 9];
        kd[4] = 1.0;
        kd[13] = 1.0;
        let dw = t.constant(Tensor::new(vec![2, 3, 3], kd).unwrap());
        // identity pointwise: out0 = in0, out1 = in1
        let pw = t.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.depthwise_separable(x, dw, pw, 1, 1).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn depthwise_pointwise_channel_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap());
        let mut kd = vec![0.0; 2 * 9];
        kd[4] = 1.0;
        kd[13] = 1.0;
        let dw = t.constant(Tensor::new(vec![2, 3, 3], kd).unwrap());
        let pw = t.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap());
        let y = t.depthwise_separable(x, dw, pw, 1, 1).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn depthwise_separable_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3, 3]));
        let dw = t.constant(Tensor::zeros(&[2, 3, 3]));
        let pw = t.constant(Tensor::zeros(&[4, 3, 1, 1]));
        assert!(t.depthwise_separable(x, dw, pw, 1, 1).is_err());
    }

    #[test]
    fn activations_trivial_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-1.5, 0.0]), true);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0]);
        let s = t.sigmoid_op(x);
        assert_eq!(t.value(s).data()[1], 0.5);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0), true);
        let y = t.sigmoid_op(x);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(close(t.grad(x).unwrap()[0], 0.25, 1e-7));
    }

    #[test]
    fn linear_identity_and_row_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![2.0, 3.0]));
        let w_id = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b0 = t.constant(Tensor::zeros(&[2]));
        let y = t.linear(x, w_id, b0, ).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 3.0]);

        let w_sum = t.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b1 = t.constant(Tensor::zeros(&[1]));
        let z = t.linear(x, w_sum, b1).unwrap();
        assert_eq!(t.value(z).data(), &[5.0]);
    }

    #[test]
    fn pools_on_small_map() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap(), true);
        let mx = t.global_max_pool(x).unwrap();
        let av = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(mx).data(), &[5.0]);
        assert_eq!(t.value(av).data(), &[2.75]);

        let c = t.constant(Tensor::full(&[3, 4, 4], 0.7));
        let mc = t.global_max_pool(c).unwrap();
        let ac = t.global_avg_pool(c).unwrap();
        assert_eq!(t.value(mc).data(), &[0.7; 3]);
        for v in t.value(ac).data() {
            assert!(close(*v, 0.7, 1e-6));
        }
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2, 2], vec![4.0, 4.0, 1.0, 4.0]).unwrap(), true);
        let y = t.global_max_pool(x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::zeros(&[2, 3]));
        let s = t.softmax2d(u, 1.0).unwrap();
        for v in t.value(s).data() {
            assert!(close(*v, 1.0 / 6.0, 1e-6));
        }
        let m = t.constant(Tensor::new(vec![2, 1], vec![0.0, (2.0f32).ln()]).unwrap());
        let s2 = t.softmax2d(m, 1.0).unwrap();
        assert!(close(t.value(s2).data()[0], 1.0 / 3.0, 1e-6));
        assert!(close(t.value(s2).data()[1], 2.0 / 3.0, 1e-6));
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let base = vec![0.3, -1.2, 2.0, 0.0, 4.5, -0.7];
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 3], base.clone()).unwrap());
        let sa = t.softmax2d(a, 3.0).unwrap();
        let shifted = t.add_const(a, 7.0);
        let sb = t.softmax2d(shifted, 3.0).unwrap();
        let total: f32 = t.value(sa).data().iter().sum();
        assert!(close(total, 1.0, 1e-6));
        for (x, y) in t.value(sa).data().iter().zip(t.value(sb).data()) {
            assert!(close(*x, *y, 1e-6));
        }
    }

    #[test]
    fn gradient_reverse_forward_identity_backward_negation() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let y = t.gradient_reverse(x);
        assert_eq!(t.value(y).data(), t.value(x).data());

        // loss = sum(grl(x) * c) with upstream weights [0.5, -1.0]
        let mut t2 = Tape::new();
        let x2 = t2.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let g = t2.gradient_reverse(x2);
        let c = t2.constant(Tensor::from_vec(vec![0.5, -1.0]));
        let prod = t2.mul(g, c).unwrap();
        let l = t2.sum(prod);
        t2.backward(l).unwrap();
        assert_eq!(t2.grad(x2).unwrap(), &[-0.5, 1.0]);
    }

    #[test]
    fn double_gradient_reverse_cancels_exactly() {
        let weights = vec![0.37, -2.25, 0.0, 9.5];
        let run = |wrap: bool| -> Vec<f32> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::from_vec(vec![0.1, -0.4, 2.0, 1.0]), true);
            let mid = if wrap {
                let a = t.gradient_reverse(x);
                t.gradient_reverse(a)
            } else {
                x
            };
            let c = t.constant(Tensor::from_vec(weights.clone()));
            let p = t.mul(mid, c).unwrap();
            let l = t.sum(p);
            t.backward(l).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![3.0, -1.0, 0.5]), true);
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_fanout_accumulates() {
        // loss = x*x at x = 3 -> grad 6 via fan-out accumulation
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(x, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(
            t.backward(x),
            Err(AutodiffError::NonScalarLoss(_))
        ));
        let c = t.constant(Tensor::scalar(1.0));
        assert!(matches!(t.backward(c), Err(AutodiffError::DetachedGraph)));
    }

    #[test]
    fn accumulation_is_order_independent_within_tolerance() {
        // same graph built with operand order swapped
        let vals = vec![0.11, -0.53, 1.7, 0.02];
        let build = |swap: bool| -> Vec<f32> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::from_vec(vals.clone()), true);
            let a = t.relu(x);
            let b = t.sigmoid_op(x);
            let s = if swap { t.add(b, a) } else { t.add(a, b) }.unwrap();
            let l = t.sum(s);
            t.backward(l).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        for (a, b) in build(false).iter().zip(build(true)) {
            assert!(close(*a, b, 1e-6));
        }
    }

    #[test]
    fn bce_mean_matched_binary_is_zero() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0]), true);
        let l = t.bce_mean(p, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(t.value(l).item().abs() < 1e-6);
    }

    #[test]
    fn bce_with_logits_trivial_values() {
        let mut t = Tape::new();
        let z0 = t.leaf(Tensor::scalar(0.0), true);
        let l0 = t.bce_with_logits(z0, 1.0).unwrap();
        assert!(close(t.value(l0).item(), (2.0f32).ln(), 1e-6));
        let z0b = t.leaf(Tensor::scalar(0.0), true);
        let l0b = t.bce_with_logits(z0b, 0.0).unwrap();
        assert!(close(t.value(l0b).item(), (2.0f32).ln(), 1e-6));

        let zp = t.leaf(Tensor::scalar(20.0), true);
        let lp1 = t.bce_with_logits(zp, 1.0).unwrap();
        assert!(t.value(lp1).item() < 1e-6);
        let zp2 = t.leaf(Tensor::scalar(20.0), true);
        let lp0 = t.bce_with_logits(zp2, 0.0).unwrap();
        assert!(close(t.value(lp0).item(), 20.0, 1e-4));
    }

    #[test]
    fn chained_sigmoid_scales_upstream_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0), true);
        let s = t.sigmoid_op(x);
        let y = t.mul_const(s, 3.0);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(close(t.grad(x).unwrap()[0], 0.75, 1e-6));
    }
}
