//! Layer specifications and shape inference for the shared branch skeleton.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::Bits;
use crate::tensor::conv_out_dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
    Relu,
    Batchnorm,
    Pool,
}

fn one() -> usize {
    1
}

fn full() -> Bits {
    Bits::Full
}

fn is_full(b: &Bits) -> bool {
    b.is_full()
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Input channels (conv) or features (linear); 0 lets shape inference fill it in.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub c_in: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub c_out: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub kernel: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub padding: usize,
    #[serde(default = "full", skip_serializing_if = "is_full")]
    pub act_bits: Bits,
    #[serde(default = "full", skip_serializing_if = "is_full")]
    pub weight_bits: Bits,
    #[serde(default, skip_serializing_if = "is_false")]
    pub prunable: bool,
    /// Surviving output-channel fraction assumed by cost estimates made
    /// without a trained model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_ratio: Option<f64>,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            c_in: 0,
            c_out: 0,
            kernel: 1,
            stride: 1,
            padding: 0,
            act_bits: Bits::Full,
            weight_bits: Bits::Full,
            prunable: false,
            keep_ratio: None,
        }
    }

    pub fn conv(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            ..Self::base(name, LayerKind::Conv)
        }
    }

    pub fn linear(name: &str, c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            c_in,
            c_out,
            ..Self::base(name, LayerKind::Linear)
        }
    }

    pub fn relu(name: &str) -> Self {
        Self::base(name, LayerKind::Relu)
    }

    pub fn batchnorm(name: &str) -> Self {
        Self::base(name, LayerKind::Batchnorm)
    }

    pub fn pool(name: &str, kernel: usize) -> Self {
        LayerSpec {
            kernel,
            stride: kernel,
            ..Self::base(name, LayerKind::Pool)
        }
    }

    pub fn bits(mut self, act: Bits, weight: Bits) -> Self {
        self.act_bits = act;
        self.weight_bits = weight;
        self
    }

    pub fn prunable(mut self, yes: bool) -> Self {
        self.prunable = yes;
        self
    }

    pub fn keep_ratio(mut self, r: f64) -> Self {
        self.keep_ratio = Some(r);
        self
    }
}

/// Network skeleton shared by the quantized and pruned branches.
///
/// Layers before the first `linear` form the feature extractor that both
/// branches replicate; the remaining layers form the prediction head applied
/// to the fused features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[channels, height, width]` of one input frame.
    pub input: [usize; 3],
    pub n_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Shape information resolved by [`Architecture::resolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    /// Output shape per example: `[C, H, W]` for feature layers, `[F]` for head layers.
    pub out_shape: Vec<usize>,
    /// Index of the most recent conv/linear layer before this one, if any.
    pub prev_weighted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub layers: Vec<ResolvedLayer>,
    /// Index of the first head layer.
    pub head_start: usize,
    /// `[C, H, W]` at the fusion point.
    pub fused_shape: [usize; 3],
}

impl Resolved {
    pub fn features(&self) -> &[ResolvedLayer] {
        &self.layers[..self.head_start]
    }

    pub fn head(&self) -> &[ResolvedLayer] {
        &self.layers[self.head_start..]
    }
}

fn cfg_err(msg: String) -> Error {
    Error::Config(msg)
}

impl Architecture {
    /// Scaled-down three-conv, two-linear layout with the 32/4, 4/4, 4/4 bit pattern.
    pub fn default_toy() -> Self {
        let b4 = Bits::Fixed(4);
        Architecture {
            input: [1, 32, 32],
            n_classes: 8,
            layers: vec![
                LayerSpec::conv("conv1", 1, 12, 7, 2, 0).bits(Bits::Full, b4).prunable(true),
                LayerSpec::batchnorm("bn1"),
                LayerSpec::relu("relu1"),
                LayerSpec::conv("conv2", 12, 32, 5, 2, 0).bits(b4, b4).prunable(true),
                LayerSpec::batchnorm("bn2"),
                LayerSpec::relu("relu2"),
                LayerSpec::conv("conv3", 32, 64, 3, 1, 0).bits(b4, b4).prunable(true),
                LayerSpec::batchnorm("bn3"),
                LayerSpec::relu("relu3"),
                LayerSpec::linear("fc4", 64 * 3 * 3, 64).prunable(true),
                LayerSpec::relu("relu4"),
                LayerSpec::linear("fc5", 64, 8),
            ],
        }
    }

    /// Validates the layer sequence and infers every intermediate shape.
    pub fn resolve(&self) -> Result<Resolved> {
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(cfg_err(format!("input shape {:?} must be positive", self.input)));
        }
        if self.n_classes < 2 {
            return Err(cfg_err("need at least 2 classes".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for l in &self.layers {
            if l.name.is_empty() || !names.insert(l.name.as_str()) {
                return Err(cfg_err(format!("layer names must be unique and non-empty: {:?}", l.name)));
            }
        }
        let head_start = self
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::Linear)
            .ok_or_else(|| cfg_err("architecture needs at least one linear layer".into()))?;
        if !self.layers[..head_start].iter().any(|l| l.kind == LayerKind::Conv) {
            return Err(cfg_err("architecture needs at least one conv layer before the head".into()));
        }

        let mut shape = vec![c0, h0, w0];
        let mut out = Vec::with_capacity(self.layers.len());
        let mut prev_weighted = None;
        let mut fused_shape = [0; 3];
        for (i, l) in self.layers.iter().enumerate() {
            let mut spec = l.clone();
            let in_head = i >= head_start;
            if i == head_start {
                fused_shape = [shape[0], shape[1], shape[2]];
                shape = vec![shape.iter().product()];
            }
            match (l.kind, in_head) {
                (LayerKind::Conv, false) => {
                    if spec.c_in == 0 {
                        spec.c_in = shape[0];
                    }
                    if spec.c_in != shape[0] || spec.c_out == 0 {
                        return Err(cfg_err(format!(
                            "{}: conv expects {} input channels and a positive c_out, got c_in={} c_out={}",
                            l.name, shape[0], spec.c_in, spec.c_out
                        )));
                    }
                    let (Some(h), Some(w)) = (
                        conv_out_dim(shape[1], l.kernel, l.stride, l.padding),
                        conv_out_dim(shape[2], l.kernel, l.stride, l.padding),
                    ) else {
                        return Err(cfg_err(format!(
                            "{}: kernel {} / stride {} / padding {} does not fit {:?}",
                            l.name, l.kernel, l.stride, l.padding, shape
                        )));
                    };
                    shape = vec![spec.c_out, h, w];
                }
                (LayerKind::Batchnorm, false) | (LayerKind::Relu, _) => {
                    if l.kind == LayerKind::Batchnorm {
                        for v in [&mut spec.c_in, &mut spec.c_out] {
                            if *v == 0 {
                                *v = shape[0];
                            }
                        }
                        if spec.c_in != shape[0] || spec.c_out != shape[0] {
                            return Err(cfg_err(format!(
                                "{}: batchnorm over {} channels, spec says {}/{}",
                                l.name, shape[0], spec.c_in, spec.c_out
                            )));
                        }
                    }
                }
                (LayerKind::Pool, false) => {
                    if l.kernel < 1 || l.kernel > shape[1] || l.kernel > shape[2] {
                        return Err(cfg_err(format!("{}: pool window {} does not fit {:?}", l.name, l.kernel, shape)));
                    }
                    if l.stride != l.kernel {
                        return Err(cfg_err(format!("{}: pool stride must equal its kernel", l.name)));
                    }
                    shape = vec![shape[0], shape[1] / l.kernel, shape[2] / l.kernel];
                }
                (LayerKind::Linear, true) => {
                    if spec.c_in == 0 {
                        spec.c_in = shape[0];
                    }
                    if spec.c_in != shape[0] || spec.c_out == 0 {
                        return Err(cfg_err(format!(
                            "{}: linear expects {} input features and a positive c_out, got c_in={} c_out={}",
                            l.name, shape[0], spec.c_in, spec.c_out
                        )));
                    }
                    if !l.weight_bits.is_full() {
                        return Err(cfg_err(format!("{}: head weights stay full precision", l.name)));
                    }
                    if i != head_start && !l.act_bits.is_full() {
                        return Err(cfg_err(format!(
                            "{}: only the first head layer may quantize its input",
                            l.name
                        )));
                    }
                    shape = vec![spec.c_out];
                }
                (kind, true) => {
                    return Err(cfg_err(format!("{}: {kind:?} is not allowed in the head", l.name)));
                }
                (LayerKind::Linear, false) => unreachable!("head_start is the first linear layer"),
            }
            if l.prunable && !matches!(l.kind, LayerKind::Conv | LayerKind::Linear) {
                return Err(cfg_err(format!("{}: only conv and linear layers can be pruned", l.name)));
            }
            if let Some(r) = l.keep_ratio {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(cfg_err(format!("{}: keep_ratio {r} outside (0, 1]", l.name)));
                }
            }
            let this_prev = prev_weighted;
            if matches!(l.kind, LayerKind::Conv | LayerKind::Linear) {
                prev_weighted = Some(i);
            }
            out.push(ResolvedLayer {
                spec,
                out_shape: shape.clone(),
                prev_weighted: this_prev,
            });
        }
        let last = self.layers.last().unwrap();
        if last.kind != LayerKind::Linear || shape != [self.n_classes] {
            return Err(cfg_err(format!(
                "last layer must be linear with {} outputs",
                self.n_classes
            )));
        }
        if last.prunable {
            return Err(cfg_err(format!("{}: the prediction layer cannot be pruned", last.name)));
        }
        Ok(Resolved {
            layers: out,
            head_start,
            fused_shape,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toy_resolves() {
        let r = Architecture::default_toy().resolve().unwrap();
        assert_eq!(r.head_start, 9);
        assert_eq!(r.fused_shape, [64, 3, 3]);
        assert_eq!(r.layers[0].out_shape, vec![12, 13, 13]);
        assert_eq!(r.layers[3].out_shape, vec![32, 5, 5]);
        assert_eq!(r.layers[11].out_shape, vec![8]);
        assert_eq!(r.layers[3].prev_weighted, Some(0));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut a = Architecture::default_toy();
        a.layers[3].c_in = 7;
        assert!(matches!(a.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_prunable_prediction_layer() {
        let mut a = Architecture::default_toy();
        a.layers.last_mut().unwrap().prunable = true;
        assert!(a.resolve().is_err());
    }

    #[test]
    fn rejects_quantized_head_weights() {
        let mut a = Architecture::default_toy();
        a.layers[9].weight_bits = Bits::Fixed(4);
        assert!(a.resolve().is_err());
    }

    #[test]
    fn spec_toml_round_trip() {
        let a = Architecture::default_toy();
        let s = toml::to_string(&a).unwrap();
        let b: Architecture = toml::from_str(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_layer_key_is_error() {
        let s = r#"
            input = [1, 8, 8]
            n_classes = 2
            [[layers]]
            name = "c"
            kind = "conv"
            c_out = 2
            colour = "red"
        "#;
        assert!(toml::from_str::<Architecture>(s).is_err());
    }
}
