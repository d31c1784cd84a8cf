//! Learned-interval quantizers for weights and activations.
//!
//! Weights are mapped onto `[-1, 1]` and activations onto `[0, 1]` by a
//! clamped affine map over a learned interval `[c - d, c + d]`, then rounded
//! onto `2^(b-1) - 1` (signed) or `2^b - 1` (unsigned) levels. Rounding uses
//! a straight-through gradient, so the training graph sees the transform's
//! derivative only.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    transform_activation_scalar, transform_weight_scalar, Graph, Var,
};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{conv_out_dim, Tensor};

/// Smallest interval half-width kept after an optimizer step.
pub const HALF_WIDTH_FLOOR: f64 = 1e-4;

/// Bit width of one operand: a fixed-point width, or full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BitsRepr", into = "BitsRepr")]
pub enum Bits {
    Full,
    Fixed(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BitsRepr {
    Int(u32),
    Str(String),
}

impl TryFrom<BitsRepr> for Bits {
    type Error = String;

    fn try_from(r: BitsRepr) -> std::result::Result<Self, String> {
        match r {
            BitsRepr::Int(n) if (2..=16).contains(&n) => Ok(Bits::Fixed(n)),
            BitsRepr::Int(32) => Ok(Bits::Full),
            BitsRepr::Int(n) => Err(format!("bit width {n} outside 2..=16 (or 32 for full)")),
            BitsRepr::Str(s) if s == "full" => Ok(Bits::Full),
            BitsRepr::Str(s) => Err(format!("expected an integer bit width or \"full\", got {s:?}")),
        }
    }
}

impl From<Bits> for BitsRepr {
    fn from(b: Bits) -> Self {
        match b {
            Bits::Full => BitsRepr::Str("full".into()),
            Bits::Fixed(n) => BitsRepr::Int(n),
        }
    }
}

impl Bits {
    pub fn is_full(self) -> bool {
        matches!(self, Bits::Full)
    }

    /// Width used for cost accounting; full precision counts as 32.
    pub fn cost_width(self) -> u32 {
        match self {
            Bits::Full => 32,
            Bits::Fixed(n) => n,
        }
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bits::Full => write!(f, "32"),
            Bits::Fixed(n) => write!(f, "{n}"),
        }
    }
}

/// Positive code range for signed weight codes: `2^(b-1) - 1`.
pub fn weight_levels(n_bits: u32) -> i64 {
    (1i64 << (n_bits - 1)) - 1
}

/// Largest unsigned activation code: `2^b - 1`.
pub fn activation_levels(n_bits: u32) -> i64 {
    (1i64 << n_bits) - 1
}

/// Interval parameters of one layer's weight and input-activation quantizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub c_w: f64,
    pub d_w: f64,
    pub c_a: f64,
    pub d_a: f64,
    pub weight_bits: Bits,
    pub act_bits: Bits,
}

impl QuantParams {
    /// Data-driven init: weight interval from `|W|` statistics, activation interval `[0, 2]`.
    pub fn init_from_weights(w: &Tensor, weight_bits: Bits, act_bits: Bits) -> Self {
        let n = w.len() as f64;
        let mean = w.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        let var = if w.len() > 1 {
            w.data().iter().map(|v| (v.abs() - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        QuantParams {
            c_w: mean,
            d_w: (2.0 * var.sqrt()).max(HALF_WIDTH_FLOOR),
            c_a: 1.0,
            d_a: 1.0,
            weight_bits,
            act_bits,
        }
    }

    pub fn alpha_w(&self) -> f64 {
        0.5 / self.d_w
    }

    pub fn beta_w(&self) -> f64 {
        -0.5 * self.c_w / self.d_w + 0.5
    }

    pub fn alpha_a(&self) -> f64 {
        0.5 / self.d_a
    }

    pub fn beta_a(&self) -> f64 {
        -0.5 * self.c_a / self.d_a + 0.5
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_w > 0.0 && self.d_a > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "interval half-widths must be positive (d_w={}, d_a={})",
                self.d_w, self.d_a
            )));
        }
        for b in [self.weight_bits, self.act_bits] {
            if let Bits::Fixed(n) = b {
                if n < 2 {
                    return Err(Error::InvalidArgument(format!("bit width {n} < 2")));
                }
            }
        }
        Ok(())
    }
}

/// Desired mean and standard deviation of the transformed weight magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormTargets {
    pub mu0: f64,
    pub sigma0: f64,
}

impl Default for NormTargets {
    fn default() -> Self {
        NormTargets {
            mu0: 0.5,
            sigma0: 0.25,
        }
    }
}

impl NormTargets {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 > 0.0 && self.mu0 < 1.0 && self.sigma0 > 0.0) {
            return Err(Error::Config(format!(
                "normalization targets need 0 < mu0 < 1 and sigma0 > 0, got ({}, {})",
                self.mu0, self.sigma0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    Weight,
    Activation,
}

/// Integer codes plus the scale that maps them back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntCodeTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
    /// `1 / levels`
    pub scale: f64,
    /// Number of positive levels the codes were rounded onto.
    pub levels: i64,
    /// Weights are symmetric around zero; activations are unsigned.
    pub zero_symmetric: bool,
}

impl IntCodeTensor {
    pub fn dequantize(&self) -> Tensor {
        Tensor::new(
            &self.shape,
            self.codes.iter().map(|&c| c as f64 * self.scale).collect(),
        )
        .expect("code tensor shape is consistent")
    }

    pub fn distinct_codes(&self) -> usize {
        let mut v = self.codes.clone();
        v.sort_unstable();
        v.dedup();
        v.len()
    }
}

pub fn transform_weight(w: &Tensor, qp: &QuantParams) -> Tensor {
    w.map(|v| transform_weight_scalar(v, qp.c_w, qp.d_w))
}

pub fn transform_activation(a: &Tensor, qp: &QuantParams) -> Tensor {
    a.map(|v| transform_activation_scalar(v, qp.c_a, qp.d_a))
}

const RANGE_SLACK: f64 = 1e-9;

pub fn quantize_weight(w_hat: &Tensor, n_bits: u32) -> Result<IntCodeTensor> {
    if n_bits < 2 {
        return Err(Error::InvalidArgument(format!("bit width {n_bits} < 2")));
    }
    if let Some(v) = w_hat.data().iter().find(|v| !(v.abs() <= 1.0 + RANGE_SLACK)) {
        return Err(Error::QuantRange(format!(
            "transformed weight {v} outside [-1, 1]"
        )));
    }
    let levels = weight_levels(n_bits);
    let codes = w_hat
        .data()
        .iter()
        .map(|&v| ((v * levels as f64).round() as i64).clamp(-levels, levels) as i32)
        .collect();
    Ok(IntCodeTensor {
        shape: w_hat.shape().to_vec(),
        codes,
        scale: 1.0 / levels as f64,
        levels,
        zero_symmetric: true,
    })
}

pub fn quantize_activation(a_hat: &Tensor, n_bits: u32) -> Result<IntCodeTensor> {
    if n_bits < 2 {
        return Err(Error::InvalidArgument(format!("bit width {n_bits} < 2")));
    }
    if let Some(v) = a_hat
        .data()
        .iter()
        .find(|&&v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v))
    {
        return Err(Error::QuantRange(format!(
            "transformed activation {v} outside [0, 1]"
        )));
    }
    let levels = activation_levels(n_bits);
    let codes = a_hat
        .data()
        .iter()
        .map(|&v| ((v * levels as f64).round() as i64).clamp(0, levels) as i32)
        .collect();
    Ok(IntCodeTensor {
        shape: a_hat.shape().to_vec(),
        codes,
        scale: 1.0 / levels as f64,
        levels,
        zero_symmetric: false,
    })
}

/// Transform, round and dequantize outside any graph.
pub fn fake_quant_forward(x: &Tensor, qp: &QuantParams, kind: QuantKind) -> Result<Tensor> {
    qp.validate()?;
    match kind {
        QuantKind::Weight => match qp.weight_bits {
            Bits::Full => Ok(x.clone()),
            Bits::Fixed(b) => Ok(quantize_weight(&transform_weight(x, qp), b)?.dequantize()),
        },
        QuantKind::Activation => match qp.act_bits {
            Bits::Full => Ok(x.clone()),
            Bits::Fixed(b) => Ok(quantize_activation(&transform_activation(x, qp), b)?.dequantize()),
        },
    }
}

/// Integer codes of a weight tensor under `qp`, or `None` at full precision.
pub fn weight_codes(w: &Tensor, qp: &QuantParams) -> Result<Option<IntCodeTensor>> {
    match qp.weight_bits {
        Bits::Full => Ok(None),
        Bits::Fixed(b) => quantize_weight(&transform_weight(w, qp), b).map(Some),
    }
}

/// Fake-quantized weights on the tape.
pub fn fake_quant_weight(g: &mut Graph, w: Var, c: Var, d: Var, n_bits: u32) -> Result<Var> {
    let t = g.transform_weight(w, c, d)?;
    Ok(g.round_ste(t, weight_levels(n_bits) as f64))
}

/// Fake-quantized activations on the tape.
pub fn fake_quant_activation(g: &mut Graph, a: Var, c: Var, d: Var, n_bits: u32) -> Result<Var> {
    let t = g.transform_activation(a, c, d)?;
    Ok(g.round_ste(t, activation_levels(n_bits) as f64))
}

/// Convolution on integer codes with an exact `i64` accumulator.
///
/// Each output is `acc / (La * Lw)` evaluated as a single correctly rounded
/// division, i.e. the real-valued conv of the dequantized operands rounded
/// once to `f64`.
pub fn fixedpoint_conv2d(
    a: &IntCodeTensor,
    w: &IntCodeTensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (xs, ws) = (&a.shape, &w.shape);
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
        return Err(Error::ShapeMismatch {
            op: "fixedpoint_conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        });
    }
    check_code_range(a)?;
    check_code_range(w)?;
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    let (Some(h_out), Some(w_out)) = (
        conv_out_dim(h, k, stride, padding),
        conv_out_dim(wd, k, stride, padding),
    ) else {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} does not fit input {xs:?}"
        )));
    };
    let geom = ConvGeom {
        c_in,
        h,
        w: wd,
        kernel: k,
        stride,
        padding,
        h_out,
        w_out,
    };
    let (pl, p) = (geom.patch_len(), geom.positions());
    let denom = (a.levels * w.levels) as f64;
    const EXACT: i64 = 1 << 53;
    let mut cols = vec![0i32; pl * p];
    let mut out = vec![0.0; n * c_out * p];
    for b in 0..n {
        kernels::im2col(&a.codes[b * c_in * h * wd..(b + 1) * c_in * h * wd], &geom, &mut cols);
        for o in 0..c_out {
            let wrow = &w.codes[o * pl..(o + 1) * pl];
            for pos in 0..p {
                let mut acc: i64 = 0;
                for (kk, &wc) in wrow.iter().enumerate() {
                    let prod = wc as i64 * cols[kk * p + pos] as i64;
                    acc = acc.checked_add(prod).ok_or(Error::AccumulatorOverflow)?;
                }
                if acc.abs() > EXACT {
                    return Err(Error::AccumulatorOverflow);
                }
                out[(b * c_out + o) * p + pos] = acc as f64 / denom;
            }
        }
    }
    Tensor::new(&[n, c_out, h_out, w_out], out)
}

fn check_code_range(t: &IntCodeTensor) -> Result<()> {
    let (lo, hi) = if t.zero_symmetric {
        (-t.levels, t.levels)
    } else {
        (0, t.levels)
    };
    if let Some(c) = t.codes.iter().find(|&&c| (c as i64) < lo || (c as i64) > hi) {
        return Err(Error::QuantRange(format!("code {c} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Weight normalization loss: per layer, squared deviation of the mean and
/// sample std of `alpha_w |W| + beta_w` from the targets.
pub fn loss_qw(g: &mut Graph, layers: &[(Var, Var, Var)], targets: &NormTargets) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("loss_qw needs at least one layer".into()));
    }
    let mut total: Option<Var> = None;
    for &(w, c, d) in layers {
        if g.value(w).len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "loss_qw: weight tensor {:?} has fewer than 2 elements",
                g.shape(w)
            )));
        }
        let img = g.abs_affine(w, c, d)?;
        let mean = g.mean(img);
        let std = g.std(img)?;
        let dm = g.add_scalar(mean, -targets.mu0);
        let ds = g.add_scalar(std, -targets.sigma0);
        let dm2 = g.square(dm);
        let ds2 = g.square(ds);
        let term = g.add(dm2, ds2)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Activation normalization loss over captured post-batchnorm activations.
///
/// Per layer: `[avg + 2 std - (c + d)]+ + [d - std]+ + [(c - d) - avg]+`.
pub fn loss_qa(g: &mut Graph, layers: &[(Var, Var, Var)]) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("loss_qa needs at least one activation".into()));
    }
    let mut total: Option<Var> = None;
    for &(act, c, d) in layers {
        let avg = g.mean(act);
        let std = g.std(act)?;
        let upper = g.add(c, d)?;
        let lower = g.sub(c, d)?;
        let two_std = g.scale(std, 2.0);
        let reach = g.add(avg, two_std)?;
        let over = g.sub(reach, upper)?;
        let h1 = g.relu(over);
        let spread = g.sub(d, std)?;
        let h2 = g.relu(spread);
        let low = g.sub(lower, avg)?;
        let h3 = g.relu(low);
        let s = g.add(h1, h2)?;
        let term = g.add(s, h3)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(c_w: f64, d_w: f64, c_a: f64, d_a: f64, bits: u32) -> QuantParams {
        QuantParams {
            c_w,
            d_w,
            c_a,
            d_a,
            weight_bits: Bits::Fixed(bits),
            act_bits: Bits::Fixed(bits),
        }
    }

    #[test]
    fn transform_weight_branches() {
        let p = qp(0.5, 0.25, 1.0, 1.0, 4);
        let w = Tensor::from_vec(vec![0.2, 0.9, -0.5, -0.9, 0.0]);
        let out = transform_weight(&w, &p);
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[1], 1.0);
        assert!((out.data()[2] + 0.5).abs() < 1e-12);
        assert_eq!(out.data()[3], -1.0);
        assert_eq!(out.data()[4], 0.0);
        assert_eq!(p.alpha_w(), 2.0);
        assert_eq!(p.beta_w(), -0.5);
    }

    #[test]
    fn transform_activation_branches() {
        let p = qp(0.5, 0.25, 0.6, 0.2, 4);
        let a = Tensor::from_vec(vec![0.9, 0.3, 0.6]);
        let out = transform_activation(&a, &p);
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - 0.5).abs() < 1e-12);
        assert!((p.alpha_a() - 2.5).abs() < 1e-12);
        assert!((p.beta_a() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_code_examples() {
        let codes = quantize_weight(&Tensor::from_vec(vec![0.0, 1.0, -0.5, 0.5, -1.0]), 4).unwrap();
        assert_eq!(codes.codes, vec![0, 7, -4, 4, -7]);
        assert!((codes.scale - 1.0 / 7.0).abs() < 1e-15);
        for bits in 2..=8 {
            let c = quantize_weight(&Tensor::from_vec(vec![0.0]), bits).unwrap();
            assert_eq!(c.codes, vec![0]);
        }
    }

    #[test]
    fn weight_code_rejects_out_of_range() {
        let err = quantize_weight(&Tensor::from_vec(vec![1.01]), 4).unwrap_err();
        assert!(matches!(err, Error::QuantRange(_)));
        assert!(quantize_weight(&Tensor::from_vec(vec![1.0 + 1e-12]), 4).is_ok());
    }

    #[test]
    fn activation_code_examples() {
        let codes = quantize_activation(&Tensor::from_vec(vec![1.0, 0.0, 0.5]), 4).unwrap();
        assert_eq!(codes.codes, vec![15, 0, 8]);
        assert!(quantize_activation(&Tensor::from_vec(vec![-0.1]), 4).is_err());
        assert!(quantize_activation(&Tensor::from_vec(vec![1.2]), 4).is_err());
    }

    #[test]
    fn fake_quant_examples() {
        let p = qp(0.5, 0.25, 0.6, 0.2, 4);
        let w = fake_quant_forward(&Tensor::from_vec(vec![0.2]), &p, QuantKind::Weight).unwrap();
        assert_eq!(w.data(), &[0.0]);
        let a = fake_quant_forward(&Tensor::from_vec(vec![0.9]), &p, QuantKind::Activation).unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn full_precision_passthrough() {
        let mut p = qp(0.5, 0.25, 0.6, 0.2, 4);
        p.weight_bits = Bits::Full;
        let w = Tensor::from_vec(vec![3.0, -7.5]);
        assert_eq!(fake_quant_forward(&w, &p, QuantKind::Weight).unwrap(), w);
        assert!(weight_codes(&w, &p).unwrap().is_none());
    }

    #[test]
    fn fixedpoint_unit_example() {
        let a = quantize_activation(&Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap(), 4).unwrap();
        let w = quantize_weight(&Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap(), 4).unwrap();
        assert_eq!((a.codes[0], w.codes[0]), (15, 7));
        let out = fixedpoint_conv2d(&a, &w, 1, 0).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn fixedpoint_zero_activations() {
        let a = quantize_activation(&Tensor::zeros(&[2, 3, 5, 5]), 4).unwrap();
        let w = quantize_weight(&Tensor::full(&[2, 3, 3, 3], 0.6), 4).unwrap();
        let out = fixedpoint_conv2d(&a, &w, 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixedpoint_rejects_bad_codes() {
        let mut a = quantize_activation(&Tensor::zeros(&[1, 1, 2, 2]), 4).unwrap();
        a.codes[0] = 16;
        let w = quantize_weight(&Tensor::zeros(&[1, 1, 1, 1]), 4).unwrap();
        assert!(matches!(fixedpoint_conv2d(&a, &w, 1, 0), Err(Error::QuantRange(_))));
    }

    #[test]
    fn loss_qw_values() {
        // |W| = {0.25, 0.75} under c=0.5, d=0.5 (alpha=1, beta=0): mean 0.5, std sqrt(0.125)
        let targets = NormTargets {
            mu0: 0.5,
            sigma0: 0.125f64.sqrt(),
        };
        let mut g = Graph::new();
        let w = g.param(&Tensor::from_vec(vec![0.25, -0.75]));
        let c = g.param(&Tensor::scalar(0.5));
        let d = g.param(&Tensor::scalar(0.5));
        let l = loss_qw(&mut g, &[(w, c, d)], &targets).unwrap();
        assert!(g.value(l).item().abs() < 1e-24);

        let shifted = NormTargets {
            mu0: 0.4,
            sigma0: targets.sigma0,
        };
        let l = loss_qw(&mut g, &[(w, c, d)], &shifted).unwrap();
        assert!((g.value(l).item() - 0.01).abs() < 1e-12);

        let tiny = g.param(&Tensor::scalar(0.3));
        assert!(loss_qw(&mut g, &[(tiny, c, d)], &targets).is_err());
    }

    #[test]
    fn loss_qa_values() {
        // values {0, 1}: mean 0.5, sample std sqrt(0.5)
        let s = 0.5f64.sqrt();
        let mut g = Graph::new();
        let a = g.param(&Tensor::from_vec(vec![0.0, 1.0]));
        // c + d = 0.5 + 2s, c - d <= 0.5, d <= s
        let d_val = s;
        let c_val = 0.5 + 2.0 * s - d_val;
        let c = g.param(&Tensor::scalar(c_val));
        let d = g.param(&Tensor::scalar(d_val));
        let l = loss_qa(&mut g, &[(a, c, d)]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let c2 = g.param(&Tensor::scalar(c_val - 0.2));
        let l = loss_qa(&mut g, &[(a, c2, d)]).unwrap();
        assert!((g.value(l).item() - 0.2).abs() < 1e-12);

        assert!(loss_qa(&mut g, &[]).is_err());
    }

    #[test]
    fn bits_serde() {
        #[derive(Deserialize, Serialize)]
        struct W {
            b: Bits,
        }
        let w: W = toml::from_str("b = 4").unwrap();
        assert_eq!(w.b, Bits::Fixed(4));
        let w: W = toml::from_str("b = \"full\"").unwrap();
        assert_eq!(w.b, Bits::Full);
        let w: W = toml::from_str("b = 32").unwrap();
        assert_eq!(w.b, Bits::Full);
        assert!(toml::from_str::<W>("b = 1").is_err());
        assert!(toml::from_str::<W>("b = \"half\"").is_err());
        assert_eq!(toml::to_string(&W { b: Bits::Fixed(5) }).unwrap().trim(), "b = 5");
    }
}
