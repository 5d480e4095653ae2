//! Reverse-mode autodiff graph.
//!
//! Operations execute eagerly and record a node per result; [`Graph::backward`]
//! consumes the graph and walks the nodes in reverse topological order (which
//! is simply record order). Gradients are only propagated into nodes that
//! can reach a `requires_grad` leaf, so data leaves cost nothing extra.

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Train/infer switch for batchnorm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Elementwise nonlinearity kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
}

/// Running first/second moments owned by a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningMoments<T> {
    pub fn new(channels: usize) -> Self {
        RunningMoments {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RunningMoments<U> {
        RunningMoments {
            mean: self.mean.cast(),
            var: self.var.cast(),
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `[B,D] + [D]`, bias broadcast over rows.
    AddBias {
        x: Var,
        bias: Var,
    },
    /// `x:[B,I] × w:[O,I]ᵀ -> [B,O]`.
    Matmul {
        x: Var,
        w: Var,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        /// Flat input index of each output element's argmax.
        argmax: Vec<u32>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        /// Per-channel mean/inv-std actually used for normalization.
        mean: Vec<T>,
        inv_std: Vec<T>,
        /// True when the stats above are batch stats (gradient couples the batch).
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        keep: Vec<u8>,
        scale: T,
    },
    /// Concatenate two rank-2 tensors along axis 1.
    Concat2 {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    /// `x:[B,D] * f:[B,1]` row-wise broadcast.
    ScaleRows {
        x: Var,
        f: Var,
    },
    MseLoss {
        pred: Var,
        target: Var,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient map produced by a backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Per-channel batch statistics reported by a train-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Recorded computation: ordered nodes, inputs always preceding consumers.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor; its `requires_grad` flag decides whether
    /// backward will produce a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Registers a non-differentiated input (targets, precomputed stacks).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let t = tensor.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x + y);
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x - y);
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x * y);
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let data = self.val(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(
                op,
                format!(
                    "lhs {:?} vs rhs {:?}",
                    self.val(a).shape(),
                    self.val(b).shape()
                ),
            ));
        }
        Ok(())
    }

    // ---- linear algebra ----

    /// `x:[B,I] (or [I]) × w:[O,I]ᵀ -> [B,O] (or [O])`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.val(x).shape(), self.val(w).shape());
        let (rows, in_dim, vector_in) = match xs.len() {
            1 => (1, xs[0], true),
            2 => (xs[0], xs[1], false),
            _ => {
                return Err(Error::dim("matmul", format!("input rank {} > 2", xs.len())));
            }
        };
        if ws.len() != 2 || ws[1] != in_dim {
            return Err(Error::dim(
                "matmul",
                format!("weights {ws:?} incompatible with input {xs:?}"),
            ));
        }
        let out_dim = ws[0];
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        let mut out = vec![T::zero(); rows * out_dim];
        for b in 0..rows {
            let xrow = &xd[b * in_dim..(b + 1) * in_dim];
            let orow = &mut out[b * out_dim..(b + 1) * out_dim];
            for (o, slot) in orow.iter_mut().enumerate() {
                *slot = dot(xrow, &wd[o * in_dim..(o + 1) * in_dim]);
            }
        }
        let shape = if vector_in {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::Matmul { x, w }, needs))
    }

    /// Row-broadcast bias add: `[B,D] + [D]` (or `[D] + [D]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = last_dim(self.val(x).shape());
        let bs = self.val(bias).shape();
        if bs.len() != 1 || bs[0] != d {
            return Err(Error::dim(
                "add_bias",
                format!("bias {bs:?} vs feature dim {d}"),
            ));
        }
        let bd = self.val(bias).data().to_vec();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(&bd) {
                *v = *v + *b;
            }
        }
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, needs))
    }

    /// Fully connected layer: `w·x + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ---- convolution ----

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[C_in,H,W]` or `[B,C_in,H,W]`, `kernels` is
    /// `[C_out,C_in,kH,kW]`, `bias` is `[C_out]`. Output spatial dims follow
    /// `H' = (H + 2·padding − kH)/stride + 1` (floor).
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (b, c_in, h, w, batched) = split_chw("conv2d", self.val(input).shape())?;
        let ks = self.val(kernels).shape();
        if ks.len() != 4 {
            return Err(Error::dim("conv2d", format!("kernels rank {:?}", ks)));
        }
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("kernel in-channels {kc} vs input channels {c_in}"),
            ));
        }
        let bs = self.val(bias).shape();
        if bs != [c_out] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {bs:?} vs out-channels {c_out}"),
            ));
        }
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if kh > hp || kw > wp {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {hp}x{wp}"),
            ));
        }
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;

        let padded = pad_input(self.val(input).data(), b, c_in, h, w, padding);
        let kd = self.val(kernels).data();
        let bd = self.val(bias).data();
        let mut out = vec![T::zero(); b * c_out * oh * ow];
        for bi in 0..b {
            for oc in 0..c_out {
                let plane = &mut out[(bi * c_out + oc) * oh * ow..][..oh * ow];
                plane.fill(bd[oc]);
                for ic in 0..c_in {
                    let xp = &padded[(bi * c_in + ic) * hp * wp..][..hp * wp];
                    let ker = &kd[(oc * c_in + ic) * kh * kw..][..kh * kw];
                    accumulate_corr(plane, xp, ker, kh, kw, wp, oh, ow, stride);
                }
            }
        }
        let shape = if batched {
            vec![b, c_out, oh, ow]
        } else {
            vec![c_out, oh, ow]
        };
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Max pooling; gradient flows to the argmax cell, first occurrence wins ties.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        if window < 1 || stride < 1 {
            return Err(Error::Config("maxpool2d window/stride must be >= 1".into()));
        }
        let (b, c, h, w, batched) = split_chw("maxpool2d", self.val(input).shape())?;
        if window > h || window > w {
            return Err(Error::dim(
                "maxpool2d",
                format!("window {window} exceeds input {h}x{w}"),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let xd = self.val(input).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..b * c {
            let plane = &xd[p * h * w..][..h * w];
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for r in 0..window {
                        let base = (orow * stride + r) * w + ocol * stride;
                        for (s, &v) in plane[base..base + window].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_idx = base + s;
                            }
                        }
                    }
                    let o = orow * ow + ocol;
                    out[p * oh * ow + o] = best;
                    argmax[p * oh * ow + o] = (p * h * w + best_idx) as u32;
                }
            }
        }
        let shape = if batched {
            vec![b, c, oh, ow]
        } else {
            vec![c, oh, ow]
        };
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(input);
        Ok(self.push(t, Op::MaxPool2d { input, argmax }, needs))
    }

    // ---- nonlinearities and regularization ----

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let data: Vec<T> = match kind {
            Activation::Sigmoid => self
                .val(input)
                .data()
                .iter()
                .map(|&x| T::one() / (T::one() + (-x).exp()))
                .collect(),
            Activation::Tanh => self.val(input).data().iter().map(|&x| x.tanh()).collect(),
            Activation::LeakyRelu(slope) => {
                let s = T::of_f64(slope);
                self.val(input)
                    .data()
                    .iter()
                    .map(|&x| if x >= T::zero() { x } else { s * x })
                    .collect()
            }
        };
        let t = Tensor::new(self.val(input).shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(input);
        self.push(t, Op::Activation { input, kind }, needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    /// Batch normalization over axis 1 channels.
    ///
    /// Train mode normalizes with batch statistics (biased variance) and
    /// folds them into `running` with weight `momentum`; infer mode is a pure
    /// function of the stored running moments.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningMoments<T>,
        mode: Mode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) = self.batchnorm_train(x, gamma, beta, epsilon)?;
                let m = T::of_f64(momentum);
                let keep = T::one() - m;
                for (r, &b) in running.mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in running.var.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * b;
                }
                Ok(y)
            }
            Mode::Infer => {
                self.batchnorm_infer(x, gamma, beta, &running.mean, &running.var, epsilon)
            }
        }
    }

    /// Train-mode batchnorm returning the batch statistics it used.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
    ) -> Result<(Var, BnBatchStats<T>)> {
        let (b, c, spatial) = bn_dims("batchnorm", self.val(x).shape())?;
        if b < 2 {
            return Err(Error::Config(format!(
                "batchnorm in train mode needs batch >= 2, got {b}"
            )));
        }
        self.check_bn_params(c, gamma, beta)?;
        let xd = self.val(x).data();
        let n = (b * spatial) as f64;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for bi in 0..b {
                let plane = &xd[(bi * c + ch) * spatial..][..spatial];
                for &v in plane {
                    let v = v.as_f64();
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let m = sum / n;
            mean[ch] = T::of_f64(m);
            var[ch] = T::of_f64((sum_sq / n - m * m).max(0.0));
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of_f64(epsilon)).sqrt())
            .collect();
        let stats = BnBatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let y = self.bn_apply(x, gamma, beta, mean, inv_std, true)?;
        Ok((y, stats))
    }

    /// Infer-mode batchnorm: pure function of input and stored statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        epsilon: f64,
    ) -> Result<Var> {
        let (_b, c, _s) = bn_dims("batchnorm", self.val(x).shape())?;
        self.check_bn_params(c, gamma, beta)?;
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::dim(
                "batchnorm",
                format!("running stats sized for {} channels, input has {c}", running_mean.numel()),
            ));
        }
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::of_f64(epsilon)).sqrt())
            .collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn check_bn_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.val(v).shape();
            if s != [c] {
                return Err(Error::dim(
                    "batchnorm",
                    format!("{name} {s:?} vs {c} channels"),
                ));
            }
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (b, c, spatial) = bn_dims("batchnorm", self.val(x).shape())?;
        let xd = self.val(x).data();
        let gd = self.val(gamma).data();
        let bd = self.val(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let scale = gd[ch] * inv_std[ch];
                let shift = bd[ch] - mean[ch] * scale;
                let src = &xd[(bi * c + ch) * spatial..][..spatial];
                let dst = &mut out[(bi * c + ch) * spatial..][..spatial];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * scale + shift;
                }
            }
        }
        let t = Tensor::new(self.val(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// Inverted dropout: train mode zeroes with probability `rate` and scales
    /// survivors by `1/(1-rate)`; infer mode (or rate 0) is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep: Vec<u8> = (0..self.val(x).numel())
            .map(|_| u8::from(rng.random::<f64>() >= rate))
            .collect();
        let scale = T::of_f64(1.0 / (1.0 - rate));
        let data: Vec<T> = self
            .val(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k == 1 { v * scale } else { T::zero() })
            .collect();
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Op::Dropout {
                input: x,
                keep,
                scale,
            },
            needs,
        ))
    }

    // ---- shape plumbing ----

    /// Concatenates `[B,Da]` and `[B,Db]` along axis 1.
    pub fn concat2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim(
                "concat2",
                format!("expected matching rank-2 batches, got {sa:?} and {sb:?}"),
            ));
        }
        let (rows, da, db) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let t = Tensor::new(vec![rows, da + db], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Concat2 { a, b }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.val(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `x:[B,D] * f:[B,1]`, one scalar gate per row.
    pub fn scale_rows(&mut self, x: Var, f: Var) -> Result<Var> {
        let (xs, fs) = (self.val(x).shape(), self.val(f).shape());
        if xs.len() != 2 || fs.len() != 2 || fs[1] != 1 || fs[0] != xs[0] {
            return Err(Error::dim(
                "scale_rows",
                format!("x {xs:?} vs row factors {fs:?}"),
            ));
        }
        let (rows, d) = (xs[0], xs[1]);
        let xd = self.val(x).data();
        let fd = self.val(f).data();
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let fr = fd[r];
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(&xd[r * d..(r + 1) * d]) {
                *o = v * fr;
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let needs = self.needs(x) || self.needs(f);
        Ok(self.push(t, Op::ScaleRows { x, f }, needs))
    }

    // ---- reductions ----

    /// Mean of squared elementwise differences, returned as a `[1]` tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same_shape("mse_loss", pred, target)?;
        let n = self.val(pred).numel() as f64;
        let sum: f64 = self
            .val(pred)
            .data()
            .iter()
            .zip(self.val(target).data())
            .map(|(&p, &t)| {
                let d = (p - t).as_f64();
                d * d
            })
            .sum();
        let t = Tensor::scalar(T::of_f64(sum / n));
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(t, Op::MseLoss { pred, target }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).data().iter().map(|v| v.as_f64()).sum();
        let t = Tensor::scalar(T::of_f64(s));
        let needs = self.needs(x);
        self.push(t, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).numel() as f64;
        let s: f64 = self.val(x).data().iter().map(|v| v.as_f64()).sum();
        let t = Tensor::scalar(T::of_f64(s / n));
        let needs = self.needs(x);
        self.push(t, Op::Mean(x), needs)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Consumes the graph; every
    /// `requires_grad` leaf ends up with a gradient of its own shape (zeros
    /// when the loss does not depend on it).
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let is_leaf = matches!(self.nodes[id].op, Op::Leaf);
            self.propagate(id, &gout, &mut grads)?;
            if is_leaf {
                grads[id] = Some(gout);
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.push(Some(Tensor::new(node.value.shape().to_vec(), data)?));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy_one(g, gout));
                self.acc(grads, *b, |g| axpy_one(g, gout));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy_one(g, gout));
                self.acc(grads, *b, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi - go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |g| {
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(bd) {
                        *gi = *gi + go * bv;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(ad) {
                        *gi = *gi + go * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go * c;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let d = self.val(*bias).numel();
                self.acc(grads, *x, |g| axpy_one(g, gout));
                self.acc(grads, *bias, |g| {
                    for row in gout.chunks(d) {
                        for (gi, &go) in g.iter_mut().zip(row) {
                            *gi = *gi + go;
                        }
                    }
                });
            }
            Op::Matmul { x, w } => {
                let xs = self.val(*x).shape();
                let (rows, in_dim) = if xs.len() == 1 {
                    (1, xs[0])
                } else {
                    (xs[0], xs[1])
                };
                let out_dim = self.val(*w).shape()[0];
                let wd = self.val(*w).data();
                let xd = self.val(*x).data();
                self.acc(grads, *x, |g| {
                    for b in 0..rows {
                        let grow = &mut g[b * in_dim..(b + 1) * in_dim];
                        let gorow = &gout[b * out_dim..(b + 1) * out_dim];
                        for (o, &go) in gorow.iter().enumerate() {
                            axpy(grow, go, &wd[o * in_dim..(o + 1) * in_dim]);
                        }
                    }
                });
                self.acc(grads, *w, |g| {
                    for b in 0..rows {
                        let xrow = &xd[b * in_dim..(b + 1) * in_dim];
                        let gorow = &gout[b * out_dim..(b + 1) * out_dim];
                        for (o, &go) in gorow.iter().enumerate() {
                            axpy(&mut g[o * in_dim..(o + 1) * in_dim], go, xrow);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                self.conv2d_backward(*input, *kernels, *bias, *stride, *padding, gout, grads)?;
            }
            Op::MaxPool2d { input, argmax } => {
                self.acc(grads, *input, |g| {
                    for (&go, &idx) in gout.iter().zip(argmax) {
                        g[idx as usize] = g[idx as usize] + go;
                    }
                });
            }
            Op::Activation { input, kind } => {
                let y = node.value.data();
                let x = self.val(*input).data();
                let kind = *kind;
                self.acc(grads, *input, |g| match kind {
                    Activation::Sigmoid => {
                        for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                            *gi = *gi + go * yv * (T::one() - yv);
                        }
                    }
                    Activation::Tanh => {
                        for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                            *gi = *gi + go * (T::one() - yv * yv);
                        }
                    }
                    Activation::LeakyRelu(slope) => {
                        let s = T::of_f64(slope);
                        for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(x) {
                            let d = if xv >= T::zero() { go } else { go * s };
                            *gi = *gi + d;
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                self.batchnorm_backward(
                    *input,
                    *gamma,
                    *beta,
                    mean,
                    inv_std,
                    *batch_stats,
                    gout,
                    grads,
                )?;
            }
            Op::Dropout { input, keep, scale } => {
                let scale = *scale;
                self.acc(grads, *input, |g| {
                    for ((gi, &go), &k) in g.iter_mut().zip(gout).zip(keep) {
                        if k == 1 {
                            *gi = *gi + go * scale;
                        }
                    }
                });
            }
            Op::Concat2 { a, b } => {
                let da = self.val(*a).shape()[1];
                let db = self.val(*b).shape()[1];
                let rows = self.val(*a).shape()[0];
                self.acc(grads, *a, |g| {
                    for r in 0..rows {
                        let src = &gout[r * (da + db)..r * (da + db) + da];
                        axpy_one(&mut g[r * da..(r + 1) * da], src);
                    }
                });
                self.acc(grads, *b, |g| {
                    for r in 0..rows {
                        let src = &gout[r * (da + db) + da..(r + 1) * (da + db)];
                        axpy_one(&mut g[r * db..(r + 1) * db], src);
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |g| axpy_one(g, gout));
            }
            Op::ScaleRows { x, f } => {
                let d = self.val(*x).shape()[1];
                let rows = self.val(*x).shape()[0];
                let fd = self.val(*f).data();
                let xd = self.val(*x).data();
                self.acc(grads, *x, |g| {
                    for r in 0..rows {
                        let fr = fd[r];
                        for (gi, &go) in g[r * d..(r + 1) * d].iter_mut().zip(&gout[r * d..]) {
                            *gi = *gi + go * fr;
                        }
                    }
                });
                self.acc(grads, *f, |g| {
                    for r in 0..rows {
                        let s = dot(&gout[r * d..(r + 1) * d], &xd[r * d..(r + 1) * d]);
                        g[r] = g[r] + s;
                    }
                });
            }
            Op::MseLoss { pred, target } => {
                let go = gout[0];
                let n = T::of_f64(self.val(*pred).numel() as f64);
                let two = T::of_f64(2.0);
                let pd = self.val(*pred).data();
                let td = self.val(*target).data();
                self.acc(grads, *pred, |g| {
                    for ((gi, &p), &t) in g.iter_mut().zip(pd).zip(td) {
                        *gi = *gi + go * two * (p - t) / n;
                    }
                });
                self.acc(grads, *target, |g| {
                    for ((gi, &p), &t) in g.iter_mut().zip(pd).zip(td) {
                        *gi = *gi - go * two * (p - t) / n;
                    }
                });
            }
            Op::Sum(x) => {
                let go = gout[0];
                self.acc(grads, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + go;
                    }
                });
            }
            Op::Mean(x) => {
                let go = gout[0];
                let n = T::of_f64(self.val(*x).numel() as f64);
                self.acc(grads, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + go / n;
                    }
                });
            }
        }
        Ok(())
    }

    /// Runs `write` on the gradient buffer of `v` if that node wants gradients.
    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, write: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        write(buf);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (b, c_in, h, w, _) = split_chw("conv2d", self.val(input).shape())?;
        let ks = self.val(kernels).shape();
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;

        if self.nodes[bias.0].needs_grad {
            self.acc(grads, bias, |g| {
                for bi in 0..b {
                    for oc in 0..c_out {
                        let plane = &gout[(bi * c_out + oc) * oh * ow..][..oh * ow];
                        let mut s = T::zero();
                        for &v in plane {
                            s = s + v;
                        }
                        g[oc] = g[oc] + s;
                    }
                }
            });
        }

        if self.nodes[kernels.0].needs_grad {
            let padded = pad_input(self.val(input).data(), b, c_in, h, w, padding);
            self.acc(grads, kernels, |g| {
                for bi in 0..b {
                    for oc in 0..c_out {
                        let gplane = &gout[(bi * c_out + oc) * oh * ow..][..oh * ow];
                        for ic in 0..c_in {
                            let xp = &padded[(bi * c_in + ic) * hp * wp..][..hp * wp];
                            let gk = &mut g[(oc * c_in + ic) * kh * kw..][..kh * kw];
                            corr_weight_grad(gk, xp, gplane, kh, kw, wp, oh, ow, stride);
                        }
                    }
                }
            });
        }

        if self.nodes[input.0].needs_grad {
            let kd = self.val(kernels).data();
            // Accumulate into a padded buffer, then crop the interior.
            let mut gxp = vec![T::zero(); b * c_in * hp * wp];
            for bi in 0..b {
                for oc in 0..c_out {
                    let gplane = &gout[(bi * c_out + oc) * oh * ow..][..oh * ow];
                    for ic in 0..c_in {
                        let ker = &kd[(oc * c_in + ic) * kh * kw..][..kh * kw];
                        let gx = &mut gxp[(bi * c_in + ic) * hp * wp..][..hp * wp];
                        corr_input_grad(gx, gplane, ker, kh, kw, wp, oh, ow, stride);
                    }
                }
            }
            self.acc(grads, input, |g| {
                for p in 0..b * c_in {
                    for row in 0..h {
                        let src = &gxp[p * hp * wp + (row + padding) * wp + padding..][..w];
                        axpy_one(&mut g[p * h * w + row * w..][..w], src);
                    }
                }
            });
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_backward(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (b, c, spatial) = bn_dims("batchnorm", self.val(input).shape())?;
        let xd = self.val(input).data();
        let gd = self.val(gamma).data();
        let n = (b * spatial) as f64;

        // Per-channel reductions shared by all three gradients.
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * spatial;
                let m = mean[ch].as_f64();
                let is = inv_std[ch].as_f64();
                let mut s = 0.0;
                let mut sx = 0.0;
                for i in 0..spatial {
                    let dy = gout[base + i].as_f64();
                    let xhat = (xd[base + i].as_f64() - m) * is;
                    s += dy;
                    sx += dy * xhat;
                }
                sum_dy[ch] += s;
                sum_dy_xhat[ch] += sx;
            }
        }

        self.acc(grads, beta, |g| {
            for ch in 0..c {
                g[ch] = g[ch] + T::of_f64(sum_dy[ch]);
            }
        });
        self.acc(grads, gamma, |g| {
            for ch in 0..c {
                g[ch] = g[ch] + T::of_f64(sum_dy_xhat[ch]);
            }
        });
        if self.nodes[input.0].needs_grad {
            self.acc(grads, input, |g| {
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * spatial;
                        let m = mean[ch];
                        let is = inv_std[ch];
                        let scale = gd[ch] * is;
                        if batch_stats {
                            let mean_dy = T::of_f64(sum_dy[ch] / n);
                            let mean_dy_xhat = T::of_f64(sum_dy_xhat[ch] / n);
                            for i in 0..spatial {
                                let xhat = (xd[base + i] - m) * is;
                                let dy = gout[base + i];
                                g[base + i] =
                                    g[base + i] + scale * (dy - mean_dy - xhat * mean_dy_xhat);
                            }
                        } else {
                            for i in 0..spatial {
                                g[base + i] = g[base + i] + scale * gout[base + i];
                            }
                        }
                    }
                }
            });
        }
        Ok(())
    }
}

// ---- shape helpers ----

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

/// Splits `[C,H,W]` or `[B,C,H,W]` into `(b, c, h, w, batched)`.
fn split_chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], false)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], true)),
        _ => Err(Error::dim(
            op,
            format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"),
        )),
    }
}

/// Splits `[B,C,...]` into `(b, c, spatial)` for per-channel normalization.
fn bn_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(
            op,
            format!("expected at least [B,C], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product::<usize>().max(1)))
}

fn pad_input<T: Scalar>(
    data: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    padding: usize,
) -> Vec<T> {
    if padding == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![T::zero(); b * c * hp * wp];
    for p in 0..b * c {
        for row in 0..h {
            let src = &data[p * h * w + row * w..][..w];
            out[p * hp * wp + (row + padding) * wp + padding..][..w].copy_from_slice(src);
        }
    }
    out
}

// ---- inner loops, written so LLVM can vectorize them ----

/// `out += k * shifted(input)` over every output row; stride-1 fast path.
#[allow(clippy::too_many_arguments)]
fn accumulate_corr<T: Scalar>(
    out: &mut [T],
    xp: &[T],
    ker: &[T],
    kh: usize,
    kw: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) {
    for r in 0..kh {
        for s in 0..kw {
            let kv = ker[r * kw + s];
            if stride == 1 {
                for orow in 0..oh {
                    let src = &xp[(orow + r) * wp + s..][..ow];
                    let dst = &mut out[orow * ow..][..ow];
                    axpy(dst, kv, src);
                }
            } else {
                for orow in 0..oh {
                    let row_base = (orow * stride + r) * wp + s;
                    let dst = &mut out[orow * ow..][..ow];
                    for (ocol, d) in dst.iter_mut().enumerate() {
                        *d = *d + kv * xp[row_base + ocol * stride];
                    }
                }
            }
        }
    }
}

/// `gk[r,s] += Σ_rows dot(gout_row, xp_row_shifted)`.
#[allow(clippy::too_many_arguments)]
fn corr_weight_grad<T: Scalar>(
    gk: &mut [T],
    xp: &[T],
    gplane: &[T],
    kh: usize,
    kw: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) {
    for r in 0..kh {
        for s in 0..kw {
            let mut acc = T::zero();
            if stride == 1 {
                for orow in 0..oh {
                    let xrow = &xp[(orow + r) * wp + s..][..ow];
                    let grow = &gplane[orow * ow..][..ow];
                    acc = acc + dot(grow, xrow);
                }
            } else {
                for orow in 0..oh {
                    let row_base = (orow * stride + r) * wp + s;
                    let grow = &gplane[orow * ow..][..ow];
                    for (ocol, &g) in grow.iter().enumerate() {
                        acc = acc + g * xp[row_base + ocol * stride];
                    }
                }
            }
            gk[r * kw + s] = gk[r * kw + s] + acc;
        }
    }
}

/// `gx_padded += kernel ⊛ gout` (transposed correlation).
#[allow(clippy::too_many_arguments)]
fn corr_input_grad<T: Scalar>(
    gx: &mut [T],
    gplane: &[T],
    ker: &[T],
    kh: usize,
    kw: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    stride: usize,
) {
    for r in 0..kh {
        for s in 0..kw {
            let kv = ker[r * kw + s];
            if stride == 1 {
                for orow in 0..oh {
                    let dst = &mut gx[(orow + r) * wp + s..][..ow];
                    let src = &gplane[orow * ow..][..ow];
                    axpy(dst, kv, src);
                }
            } else {
                for orow in 0..oh {
                    let row_base = (orow * stride + r) * wp + s;
                    let src = &gplane[orow * ow..][..ow];
                    for (ocol, &g) in src.iter().enumerate() {
                        gx[row_base + ocol * stride] = gx[row_base + ocol * stride] + kv * g;
                    }
                }
            }
        }
    }
}

/// `y += a * x`, fixed evaluation order.
#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `y += x`.
#[inline]
fn axpy_one<T: Scalar>(y: &mut [T], x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + xi;
    }
}

#[inline]
fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Dot product with eight independent accumulator lanes so the loop
/// vectorizes; lane combination order is fixed, results are deterministic.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let av = &a[i * 8..i * 8 + 8];
        let bv = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            lanes[l] = lanes[l] + av[l] * bv[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}
