//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in insertion order; [`Graph::backward`]
//! replays the tape in reverse and sums gradient contributions into each
//! input. Parameters enter the tape as leaves (copied from their owning
//! [`Tensor`]) and gradients are read back with [`Graph::grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{conv_out_dim, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel running statistics owned by a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Std {
        input: Var,
        mean: f64,
        std: f64,
    },
    Sigmoid(Var),
    TransformWeight {
        input: Var,
        center: Var,
        half_width: Var,
    },
    TransformActivation {
        input: Var,
        center: Var,
        half_width: Var,
    },
    AbsAffine {
        input: Var,
        center: Var,
        half_width: Var,
    },
    RoundSte(Var),
    ChannelMul {
        input: Var,
        mask: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Which side of a learned interval a value falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Low,
    Linear,
    High,
}

/// Branch of the weight transform for magnitude `|w|`.
pub fn weight_branch(w: f64, center: f64, half_width: f64) -> Branch {
    let m = w.abs();
    if m > center + half_width {
        Branch::High
    } else if m < center - half_width {
        Branch::Low
    } else {
        Branch::Linear
    }
}

/// Branch of the activation transform for value `a`.
pub fn activation_branch(a: f64, center: f64, half_width: f64) -> Branch {
    if a > center + half_width {
        Branch::High
    } else if a < center - half_width {
        Branch::Low
    } else {
        Branch::Linear
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Interval slope and offset: maps `[c-d, c+d]` onto `[0, 1]`.
pub fn interval_affine(center: f64, half_width: f64) -> (f64, f64) {
    (0.5 / half_width, -0.5 * center / half_width + 0.5)
}

pub fn transform_weight_scalar(w: f64, center: f64, half_width: f64) -> f64 {
    match weight_branch(w, center, half_width) {
        Branch::High => sign(w),
        Branch::Low => 0.0,
        Branch::Linear => {
            let (alpha, beta) = interval_affine(center, half_width);
            sign(w) * (alpha * w.abs() + beta)
        }
    }
}

pub fn transform_activation_scalar(a: f64, center: f64, half_width: f64) -> f64 {
    match activation_branch(a, center, half_width) {
        Branch::High => 1.0,
        Branch::Low => 0.0,
        Branch::Linear => {
            let (alpha, beta) = interval_affine(center, half_width);
            alpha * a + beta
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) || value.is_finite(),
            "non-finite output from finite inputs in {op:?}",
            op = std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf holding a copy of `t`'s data.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        value.requires_grad = true;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient or zeros when the node was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        let (h_out, w_out) = match (
            conv_out_dim(h, k, stride, padding),
            conv_out_dim(w, k, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "conv2d kernel {k} (stride {stride}, padding {padding}) does not fit input {xs:?}"
                )))
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kernel: k,
            stride,
            padding,
            h_out,
            w_out,
        };
        let (pl, p) = (geom.patch_len(), geom.positions());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut cols = vec![0.0; n * pl * p];
        let mut out = vec![0.0; n * c_out * p];
        for b in 0..n {
            let col = &mut cols[b * pl * p..(b + 1) * pl * p];
            kernels::im2col(&x[b * c_in * h * w..(b + 1) * c_in * h * w], &geom, col);
            kernels::gemm_nn(c_out, pl, p, wt, col, &mut out[b * c_out * p..(b + 1) * c_out * p]);
        }
        let value = Tensor::new(&[n, c_out, h_out, w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
            &[input, weight],
        ))
    }

    /// `input[N, F_in] x weight[F_out, F_in]^T`
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, f_in, f_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * f_out];
        kernels::gemm_nt(n, f_in, f_out, self.value(input).data(), self.value(weight).data(), &mut out);
        let value = Tensor::new(&[n, f_out], out)?;
        Ok(self.push(value, Op::Linear { input, weight }, &[input, weight]))
    }

    /// Adds a per-channel bias to `[N, C]` or `[N, C, H, W]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias).to_vec();
        let Some((n, c, s)) = channel_layout(&xs) else {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: xs, rhs: bs });
        };
        if bs != [c] {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: xs, rhs: bs });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut out[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    *v += b[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::AddBias { input, bias }, &[input, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.push(value, Op::Relu(input), &[input])
    }

    /// Non-overlapping max pooling with a square window.
    pub fn maxpool2d(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || kernel == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::InvalidArgument(format!(
                "maxpool2d kernel {kernel} does not fit input {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / kernel, w / kernel);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for plane in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let idx = plane * h * w + (oh * kernel + kh) * w + ow * kernel + kw;
                            if x[idx] > best {
                                best = x[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = plane * ho * wo + oh * wo + ow;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Per-channel batch normalization over `[N, C]` or `[N, C, H, W]`.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats`; eval mode uses `stats` unchanged.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let Some((n, c, s)) = channel_layout(&xs) else {
            return Err(Error::ShapeMismatch { op: "batchnorm", lhs: xs, rhs: vec![] });
        };
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    lhs: xs,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: xs,
                rhs: vec![stats.mean.len()],
            });
        }
        let m = n * s;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm in train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for i in 0..n {
                    sum += x[(i * c + ch) * s..(i * c + ch + 1) * s].iter().sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut ss = 0.0;
                for i in 0..n {
                    for &v in &x[(i * c + ch) * s..(i * c + ch + 1) * s] {
                        ss += (v - mean) * (v - mean);
                    }
                }
                let var = ss / m as f64;
                let mom = stats.momentum;
                stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean;
                stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * ss / (m - 1) as f64;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    xhat[j] = (x[j] - mean) * is;
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Flattens `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        let n = xs[0];
        let f = xs[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[n, f])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sample standard deviation (`n - 1` denominator) over all entries.
    pub fn std(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "std needs at least 2 elements, got {n}"
            )));
        }
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let ss: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum();
        let std = (ss / (n - 1) as f64).sqrt();
        Ok(self.push(Tensor::scalar(std), Op::Std { input: a, mean, std }, &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    fn interval_inputs(&self, op: &'static str, center: Var, half_width: Var) -> Result<(f64, f64)> {
        for v in [center, half_width] {
            if self.shape(v) != [1] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: vec![1],
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let d = self.value(half_width).item();
        if d <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{op}: interval half-width must be positive, got {d}"
            )));
        }
        Ok((self.value(center).item(), d))
    }

    /// Learned-interval weight transform onto `[-1, 1]`.
    pub fn transform_weight(&mut self, input: Var, center: Var, half_width: Var) -> Result<Var> {
        let (c, d) = self.interval_inputs("transform_weight", center, half_width)?;
        let v = self.value(input).map(|w| transform_weight_scalar(w, c, d));
        Ok(self.push(
            v,
            Op::TransformWeight {
                input,
                center,
                half_width,
            },
            &[input, center, half_width],
        ))
    }

    /// Learned-interval activation transform onto `[0, 1]`.
    pub fn transform_activation(&mut self, input: Var, center: Var, half_width: Var) -> Result<Var> {
        let (c, d) = self.interval_inputs("transform_activation", center, half_width)?;
        let v = self.value(input).map(|a| transform_activation_scalar(a, c, d));
        Ok(self.push(
            v,
            Op::TransformActivation {
                input,
                center,
                half_width,
            },
            &[input, center, half_width],
        ))
    }

    /// Unclamped affine image `alpha * |w| + beta` of the interval map.
    pub fn abs_affine(&mut self, input: Var, center: Var, half_width: Var) -> Result<Var> {
        let (c, d) = self.interval_inputs("abs_affine", center, half_width)?;
        let (alpha, beta) = interval_affine(c, d);
        let v = self.value(input).map(|w| alpha * w.abs() + beta);
        Ok(self.push(
            v,
            Op::AbsAffine {
                input,
                center,
                half_width,
            },
            &[input, center, half_width],
        ))
    }

    /// `round(x * levels) / levels` with ties away from zero; backward is identity.
    pub fn round_ste(&mut self, input: Var, levels: f64) -> Var {
        let v = self.value(input).map(|x| (x * levels).round() / levels);
        self.push(v, Op::RoundSte(input), &[input])
    }

    /// Multiplies channel `c` of `[N, C]` / `[N, C, H, W]` by `mask[c]`.
    pub fn channel_mul(&mut self, input: Var, mask: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ms = self.shape(mask).to_vec();
        let Some((n, c, s)) = channel_layout(&xs) else {
            return Err(Error::ShapeMismatch { op: "channel_mul", lhs: xs, rhs: ms });
        };
        if ms != [c] {
            return Err(Error::ShapeMismatch { op: "channel_mul", lhs: xs, rhs: ms });
        }
        let m = self.value(mask).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut out[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    *v *= m[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::ChannelMul { input, mask }, &[input, mask]))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls,
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients are summed into every
    /// node that requires them; call [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &dy);
            self.grads[id] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, id: usize, dy: &[f64]) {
        let node = &self.nodes[id];
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let (input, weight, geom) = (*input, *weight, *geom);
                let n = self.shape(input)[0];
                let c_out = self.shape(weight)[0];
                let (pl, p) = (geom.patch_len(), geom.positions());
                let img = geom.c_in * geom.h * geom.w;
                if self.wants(weight) {
                    let mut dw = vec![0.0; c_out * pl];
                    for b in 0..n {
                        kernels::gemm_nt(
                            c_out,
                            p,
                            pl,
                            &dy[b * c_out * p..(b + 1) * c_out * p],
                            &cols[b * pl * p..(b + 1) * pl * p],
                            &mut dw,
                        );
                    }
                    pending.push((weight, dw));
                }
                if self.wants(input) {
                    let wt = self.value(weight).data();
                    let mut dx = vec![0.0; n * img];
                    let mut dcols = vec![0.0; pl * p];
                    for b in 0..n {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn(pl, c_out, p, wt, &dy[b * c_out * p..(b + 1) * c_out * p], &mut dcols);
                        kernels::col2im(&dcols, &geom, &mut dx[b * img..(b + 1) * img]);
                    }
                    pending.push((input, dx));
                }
            }
            Op::Linear { input, weight } => {
                let (input, weight) = (*input, *weight);
                let (n, f_in) = (self.shape(input)[0], self.shape(input)[1]);
                let f_out = self.shape(weight)[0];
                if self.wants(weight) {
                    let mut dw = vec![0.0; f_out * f_in];
                    kernels::gemm_tn(f_out, n, f_in, dy, self.value(input).data(), &mut dw);
                    pending.push((weight, dw));
                }
                if self.wants(input) {
                    let mut dx = vec![0.0; n * f_in];
                    kernels::gemm_nn(n, f_out, f_in, dy, self.value(weight).data(), &mut dx);
                    pending.push((input, dx));
                }
            }
            Op::AddBias { input, bias } => {
                let (input, bias) = (*input, *bias);
                let (n, c, s) = channel_layout(self.shape(input)).unwrap();
                if self.wants(bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            *acc += dy[(i * c + ch) * s..(i * c + ch + 1) * s].iter().sum::<f64>();
                        }
                    }
                    pending.push((bias, db));
                }
                pending.push((input, dy.to_vec()));
            }
            Op::Relu(a) => {
                let a = *a;
                let x = self.value(a).data();
                let dx = dy.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                pending.push((a, dx));
            }
            Op::MaxPool { input, argmax } => {
                let input = *input;
                let mut dx = vec![0.0; self.value(input).len()];
                for (o, &at) in argmax.iter().enumerate() {
                    dx[at] += dy[o];
                }
                pending.push((input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (input, gamma, beta, train) = (*input, *gamma, *beta, *train);
                let (n, c, s) = channel_layout(self.shape(input)).unwrap();
                let m = (n * s) as f64;
                let g = self.value(gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for ch in 0..c {
                    let idx = (0..n).flat_map(|i| (i * c + ch) * s..(i * c + ch + 1) * s);
                    let (mut sdy, mut sdyx) = (0.0, 0.0);
                    for j in idx.clone() {
                        sdy += dy[j];
                        sdyx += dy[j] * xhat[j];
                    }
                    dgamma[ch] = sdyx;
                    dbeta[ch] = sdy;
                    let k = g[ch] * inv_std[ch];
                    for j in idx {
                        dx[j] = if train {
                            k * (dy[j] - sdy / m - xhat[j] * sdyx / m)
                        } else {
                            k * dy[j]
                        };
                    }
                }
                pending.push((input, dx));
                pending.push((gamma, dgamma));
                pending.push((beta, dbeta));
            }
            Op::Reshape(a) | Op::AddScalar(a) | Op::RoundSte(a) => pending.push((*a, dy.to_vec())),
            Op::Add(a, b) => {
                pending.push((*a, dy.to_vec()));
                pending.push((*b, dy.to_vec()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, dy.to_vec()));
                pending.push((*b, dy.iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                pending.push((a, dy.iter().zip(bv).map(|(g, y)| g * y).collect()));
                pending.push((b, dy.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, k) => pending.push((*a, dy.iter().map(|g| g * k).collect())),
            Op::Square(a) => {
                let a = *a;
                let x = self.value(a).data();
                pending.push((a, dy.iter().zip(x).map(|(g, v)| 2.0 * g * v).collect()));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                pending.push((*a, vec![dy[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                pending.push((*a, vec![dy[0] / n as f64; n]));
            }
            Op::Std { input, mean, std } => {
                let input = *input;
                let x = self.value(input).data();
                let n = x.len() as f64;
                let dx = if *std > 0.0 {
                    x.iter().map(|v| dy[0] * (v - mean) / ((n - 1.0) * std)).collect()
                } else {
                    vec![0.0; x.len()]
                };
                pending.push((input, dx));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                pending.push((*a, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
            Op::TransformWeight {
                input,
                center,
                half_width,
            } => {
                let (input, center, half_width) = (*input, *center, *half_width);
                let c = self.value(center).item();
                let d = self.value(half_width).item();
                let x = self.value(input).data();
                let mut dx = vec![0.0; x.len()];
                let (mut dc, mut dd) = (0.0, 0.0);
                for (j, &w) in x.iter().enumerate() {
                    if weight_branch(w, c, d) == Branch::Linear {
                        let s = sign(w);
                        dx[j] = dy[j] * 0.5 / d;
                        dc -= dy[j] * s * 0.5 / d;
                        dd -= dy[j] * s * 0.5 * (w.abs() - c) / (d * d);
                    }
                }
                pending.push((input, dx));
                pending.push((center, vec![dc]));
                pending.push((half_width, vec![dd]));
            }
            Op::TransformActivation {
                input,
                center,
                half_width,
            } => {
                let (input, center, half_width) = (*input, *center, *half_width);
                let c = self.value(center).item();
                let d = self.value(half_width).item();
                let x = self.value(input).data();
                let mut dx = vec![0.0; x.len()];
                let (mut dc, mut dd) = (0.0, 0.0);
                for (j, &a) in x.iter().enumerate() {
                    if activation_branch(a, c, d) == Branch::Linear {
                        dx[j] = dy[j] * 0.5 / d;
                        dc -= dy[j] * 0.5 / d;
                        dd -= dy[j] * 0.5 * (a - c) / (d * d);
                    }
                }
                pending.push((input, dx));
                pending.push((center, vec![dc]));
                pending.push((half_width, vec![dd]));
            }
            Op::AbsAffine {
                input,
                center,
                half_width,
            } => {
                let (input, center, half_width) = (*input, *center, *half_width);
                let c = self.value(center).item();
                let d = self.value(half_width).item();
                let x = self.value(input).data();
                let mut dx = vec![0.0; x.len()];
                let (mut dc, mut dd) = (0.0, 0.0);
                for (j, &w) in x.iter().enumerate() {
                    dx[j] = dy[j] * 0.5 * sign(w) / d;
                    dc -= dy[j] * 0.5 / d;
                    dd -= dy[j] * 0.5 * (w.abs() - c) / (d * d);
                }
                pending.push((input, dx));
                pending.push((center, vec![dc]));
                pending.push((half_width, vec![dd]));
            }
            Op::ChannelMul { input, mask } => {
                let (input, mask) = (*input, *mask);
                let (n, c, s) = channel_layout(self.shape(input)).unwrap();
                let m = self.value(mask).data();
                let x = self.value(input).data();
                let mut dx = vec![0.0; x.len()];
                let mut dm = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            dx[j] = dy[j] * m[ch];
                            dm[ch] += dy[j] * x[j];
                        }
                    }
                }
                pending.push((input, dx));
                pending.push((mask, dm));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] -= scale;
                }
                pending.push((*logits, dz));
            }
        }
        for (v, g) in pending {
            self.accumulate(v, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);

        let x = g.constant(Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);

        let x = g.constant(Tensor::zeros(&[2, 3, 5, 5]));
        let w = g.constant(Tensor::full(&[4, 3, 3, 3], 0.7));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let y = g.linear(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let id = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.linear(x, id).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let z = g.constant(Tensor::zeros(&[2, 2]));
        let y = g.linear(x, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);

        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.linear(x, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let yy = g.relu(y);
        assert_eq!(g.value(yy).data(), g.value(y).data());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 2, 3, 3], 5.0));
        let gamma = g.constant(Tensor::from_vec(vec![2.0, 3.0]));
        let beta = g.constant(Tensor::from_vec(vec![0.25, -1.5]));
        let mut stats = RunningStats::new(2);
        let y = g.batchnorm(x, gamma, beta, BN_EPS, &mut stats, Mode::Train).unwrap();
        let d = g.value(y).data();
        for (j, &v) in d.iter().enumerate() {
            let ch = (j / 9) % 2;
            assert_eq!(v, [0.25, -1.5][ch]);
        }
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = g.constant(Tensor::new(&[2, 3, 2, 2], data.clone()).unwrap());
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        stats.var = vec![1.0 - BN_EPS; 3];
        let y = g.batchnorm(x, gamma, beta, BN_EPS, &mut stats, Mode::Eval).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        g.batchnorm(x, gamma, beta, BN_EPS, &mut stats, Mode::Train).unwrap();
        assert!((stats.mean[0] - 0.25).abs() < 1e-12);
        // unbiased batch variance 5/3
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_losses() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap());
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let vals = vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25];
        let w = g.param(&Tensor::new(&[2, 3], vals.clone()).unwrap());
        let sq = g.square(w);
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), vals.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::zeros(&[3]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![1.5, -2.0]));
        let a = g.scale(x, 3.0);
        let b = g.square(x);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0 + 3.0, 3.0 - 4.0]);
    }

    #[test]
    fn unreachable_param_has_no_grad() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.param(&Tensor::from_vec(vec![1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused), vec![0.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.cross_entropy(z, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_max_and_routes_grad() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let y = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
