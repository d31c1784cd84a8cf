//! The hybrid model: a low-bit quantized branch and a channel-gated
//! full-precision branch over the same skeleton, fused by summation and
//! followed by a full-precision prediction head.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, LayerKind, Resolved};
use crate::autodiff::{Graph, Mode, RunningStats, Var, BN_EPS};
use crate::cost::{self, BranchCosts, LayerCostInput};
use crate::error::{Error, Result};
use crate::prune::{self, ChannelGate, MaskVars, PrunableLayer};
use crate::quant::{self, Bits, NormTargets, QuantParams, HALF_WIDTH_FLOOR};
use crate::tensor::Tensor;

/// Parameter families, used to select what an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    QuantWeight,
    QuantInterval,
    QuantNorm,
    PruneWeight,
    PruneNorm,
    Gate,
    HeadWeight,
    HeadGate,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::QuantWeight,
        ParamGroup::QuantInterval,
        ParamGroup::QuantNorm,
        ParamGroup::PruneWeight,
        ParamGroup::PruneNorm,
        ParamGroup::Gate,
        ParamGroup::HeadWeight,
        ParamGroup::HeadGate,
    ];

    pub fn is_quant(self) -> bool {
        matches!(
            self,
            ParamGroup::QuantWeight | ParamGroup::QuantInterval | ParamGroup::QuantNorm
        )
    }

    /// Interval centers/widths and gate logits; optimized at the auxiliary rate.
    pub fn is_auxiliary(self) -> bool {
        matches!(
            self,
            ParamGroup::QuantInterval | ParamGroup::Gate | ParamGroup::HeadGate
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub trainable: Vec<ParamGroup>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            trainable: Vec::new(),
        }
    }

    pub fn train(trainable: &[ParamGroup]) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            trainable: trainable.to_vec(),
        }
    }

    fn is_trainable(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchSet {
    Hybrid,
    QuantOnly,
    PruneOnly,
}

impl BranchSet {
    pub fn has_quant(self) -> bool {
        !matches!(self, BranchSet::PruneOnly)
    }

    pub fn has_prune(self) -> bool {
        !matches!(self, BranchSet::QuantOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Quant,
    Prune,
}

impl BranchKind {
    fn prefix(self) -> &'static str {
        match self {
            BranchKind::Quant => "quant",
            BranchKind::Prune => "prune",
        }
    }
}

fn default_lambda_quant() -> f64 {
    1.0
}
fn default_lambda_prune() -> f64 {
    0.01
}
fn default_threshold() -> f64 {
    prune::DEFAULT_THRESHOLD
}
fn default_tau() -> f64 {
    1.0
}
fn default_keep_prob() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "default_lambda_quant")]
    pub lambda_quant: f64,
    #[serde(default = "default_lambda_prune")]
    pub lambda_prune: f64,
    #[serde(default)]
    pub norm: NormTargets,
    /// Keep-probability threshold for test-time channel removal.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Initial Gumbel-softmax temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Keep probability every gate starts from.
    #[serde(default = "default_keep_prob")]
    pub init_keep_prob: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            lambda_quant: default_lambda_quant(),
            lambda_prune: default_lambda_prune(),
            norm: NormTargets::default(),
            threshold: default_threshold(),
            tau: default_tau(),
            init_keep_prob: default_keep_prob(),
        }
    }
}

impl ModelSettings {
    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        if !(self.lambda_quant >= 0.0 && self.lambda_prune >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if !(self.init_keep_prob > 0.0 && self.init_keep_prob < 1.0) {
            return Err(Error::Config(format!(
                "init_keep_prob {} outside (0, 1)",
                self.init_keep_prob
            )));
        }
        Ok(())
    }
}

/// Learned interval `[center - half_width, center + half_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub center: Tensor,
    pub half_width: Tensor,
}

impl Interval {
    pub fn new(center: f64, half_width: f64) -> Self {
        Interval {
            center: Tensor::scalar(center).into_param(),
            half_width: Tensor::scalar(half_width).into_param(),
        }
    }

    pub fn center(&self) -> f64 {
        self.center.item()
    }

    pub fn half_width(&self) -> f64 {
        self.half_width.item()
    }

    fn reproject(&mut self) {
        let d = &mut self.half_width.data_mut()[0];
        if !(*d >= HALF_WIDTH_FLOOR) {
            *d = HALF_WIDTH_FLOOR;
        }
    }
}

/// Quantizer state of one quantized-branch conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub weight_bits: Bits,
    pub act_bits: Bits,
    pub weight: Interval,
    pub act: Interval,
}

impl LayerQuant {
    pub fn params(&self) -> QuantParams {
        QuantParams {
            c_w: self.weight.center(),
            d_w: self.weight.half_width(),
            c_a: self.act.center(),
            d_a: self.act.half_width(),
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
        }
    }
}

/// Activation quantizer on the head input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuant {
    pub bits: u32,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub quant: Option<LayerQuant>,
    pub gate: Option<ChannelGate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureLayer {
    Conv(ConvLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    Pool(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub kind: BranchKind,
    pub layers: Vec<FeatureLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub gate: Option<ChannelGate>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadLayer {
    Linear(LinearLayer),
    Relu,
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub quant_out: Option<Var>,
    pub prune_out: Option<Var>,
    pub fused: Var,
    pub logits: Var,
    /// `(weight, c_w, d_w)` per quantized weight tensor.
    pub qw_terms: Vec<(Var, Var, Var)>,
    /// `(post-batchnorm activation, c_a, d_a)` of the quantizer that consumes it.
    pub qa_terms: Vec<(Var, Var, Var)>,
    /// Sampled masks (train mode only).
    pub masks: Vec<MaskVars>,
    /// Trainable parameter leaves by name.
    pub bindings: Vec<(String, Var)>,
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub quant: Option<Var>,
    pub prune: Option<Var>,
    pub forward: ForwardOutput,
}

struct Ctx<'a> {
    g: &'a mut Graph,
    opts: &'a ForwardOptions,
    threshold: f64,
    bindings: Vec<(String, Var)>,
    qw: Vec<(Var, Var, Var)>,
    qa: Vec<(Var, Var, Var)>,
    masks: Vec<MaskVars>,
}

impl<'a> Ctx<'a> {
    fn new(g: &'a mut Graph, opts: &'a ForwardOptions, threshold: f64) -> Self {
        Ctx {
            g,
            opts,
            threshold,
            bindings: Vec::new(),
            qw: Vec::new(),
            qa: Vec::new(),
            masks: Vec::new(),
        }
    }

    fn bind(&mut self, name: String, group: ParamGroup, t: &Tensor) -> Var {
        if self.opts.is_trainable(group) {
            let v = self.g.param(t);
            self.bindings.push((name, v));
            v
        } else {
            self.g.constant(t.clone())
        }
    }

    fn gate_mask(&mut self, name: String, group: ParamGroup, gate: &mut ChannelGate) -> Var {
        match self.opts.mode {
            Mode::Train => {
                let logits = self.bind(name, group, gate.logits());
                let mv = prune::sample_mask_on(self.g, logits, gate);
                self.masks.push(mv);
                mv.hard
            }
            Mode::Eval => self.g.constant(Tensor::from_vec(gate.eval_mask(self.threshold))),
        }
    }
}

fn branch_forward(ctx: &mut Ctx<'_>, branch: &mut Branch, x: Var) -> Result<Var> {
    let prefix = branch.kind.prefix();
    let (wg, ng) = match branch.kind {
        BranchKind::Quant => (ParamGroup::QuantWeight, ParamGroup::QuantNorm),
        BranchKind::Prune => (ParamGroup::PruneWeight, ParamGroup::PruneNorm),
    };
    let mut h = x;
    let mut pending: Option<Var> = None;
    let mut last_preact: Option<Var> = None;
    for layer in branch.layers.iter_mut() {
        match layer {
            FeatureLayer::Conv(c) => {
                if let Some(m) = pending.take() {
                    h = prune::apply_mask_on(ctx.g, h, m)?;
                }
                let w = ctx.bind(format!("{prefix}.{}.weight", c.name), wg, &c.weight);
                let mut input = h;
                let mut wq = w;
                if let Some(q) = &c.quant {
                    if let Bits::Fixed(b) = q.act_bits {
                        let ca = ctx.bind(format!("{prefix}.{}.c_a", c.name), ParamGroup::QuantInterval, &q.act.center);
                        let da = ctx.bind(format!("{prefix}.{}.d_a", c.name), ParamGroup::QuantInterval, &q.act.half_width);
                        if let Some(pre) = last_preact {
                            ctx.qa.push((pre, ca, da));
                        }
                        input = quant::fake_quant_activation(ctx.g, input, ca, da, b)?;
                    }
                    if let Bits::Fixed(b) = q.weight_bits {
                        let cw = ctx.bind(format!("{prefix}.{}.c_w", c.name), ParamGroup::QuantInterval, &q.weight.center);
                        let dw = ctx.bind(format!("{prefix}.{}.d_w", c.name), ParamGroup::QuantInterval, &q.weight.half_width);
                        ctx.qw.push((w, cw, dw));
                        wq = quant::fake_quant_weight(ctx.g, w, cw, dw, b)?;
                    }
                }
                h = ctx.g.conv2d(input, wq, c.stride, c.padding)?;
                last_preact = Some(h);
                if let Some(gate) = &mut c.gate {
                    pending = Some(ctx.gate_mask(format!("{prefix}.{}.gate", c.name), ParamGroup::Gate, gate));
                }
            }
            FeatureLayer::BatchNorm(bn) => {
                let gamma = ctx.bind(format!("{prefix}.{}.gamma", bn.name), ng, &bn.gamma);
                let beta = ctx.bind(format!("{prefix}.{}.beta", bn.name), ng, &bn.beta);
                h = ctx.g.batchnorm(h, gamma, beta, BN_EPS, &mut bn.stats, ctx.opts.mode)?;
                last_preact = Some(h);
            }
            FeatureLayer::Relu => h = ctx.g.relu(h),
            FeatureLayer::Pool(k) => h = ctx.g.maxpool2d(h, *k)?,
        }
    }
    if let Some(m) = pending {
        h = prune::apply_mask_on(ctx.g, h, m)?;
    }
    Ok(h)
}

fn head_forward(
    ctx: &mut Ctx<'_>,
    head: &mut [HeadLayer],
    input_quant: Option<&ActQuant>,
    fused: Var,
) -> Result<Var> {
    let mut h = ctx.g.flatten(fused)?;
    if let Some(aq) = input_quant {
        let c = ctx.bind("head.input.c_a".into(), ParamGroup::QuantInterval, &aq.interval.center);
        let d = ctx.bind("head.input.d_a".into(), ParamGroup::QuantInterval, &aq.interval.half_width);
        h = quant::fake_quant_activation(ctx.g, h, c, d, aq.bits)?;
    }
    let mut pending: Option<Var> = None;
    for layer in head.iter_mut() {
        match layer {
            HeadLayer::Linear(l) => {
                if let Some(m) = pending.take() {
                    h = prune::apply_mask_on(ctx.g, h, m)?;
                }
                let w = ctx.bind(format!("head.{}.weight", l.name), ParamGroup::HeadWeight, &l.weight);
                let b = ctx.bind(format!("head.{}.bias", l.name), ParamGroup::HeadWeight, &l.bias);
                h = ctx.g.linear(h, w)?;
                h = ctx.g.add_bias(h, b)?;
                if let Some(gate) = &mut l.gate {
                    pending = Some(ctx.gate_mask(format!("head.{}.gate", l.name), ParamGroup::HeadGate, gate));
                }
            }
            HeadLayer::Relu => h = ctx.g.relu(h),
        }
    }
    if let Some(m) = pending {
        h = prune::apply_mask_on(ctx.g, h, m)?;
    }
    Ok(h)
}

fn check_input(arch: &Architecture, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != arch.input {
        let mut want = vec![0];
        want.extend_from_slice(&arch.input);
        return Err(Error::ShapeMismatch {
            op: "model input",
            lhs: s.to_vec(),
            rhs: want,
        });
    }
    Ok(())
}

enum Slot<'a> {
    Param(ParamGroup, &'a mut Tensor),
    Stat(&'a mut Vec<f64>),
}

fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng).into_param()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub arch: Architecture,
    pub settings: ModelSettings,
    pub branches: BranchSet,
    pub quant: Option<Branch>,
    pub prune: Option<Branch>,
    pub head: Vec<HeadLayer>,
    pub head_input: Option<ActQuant>,
    pub seed: u64,
    frozen: bool,
}

impl HybridModel {
    pub fn new(arch: Architecture, settings: ModelSettings, branches: BranchSet, seed: u64) -> Result<Self> {
        settings.validate()?;
        let resolved = arch.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quant = branches
            .has_quant()
            .then(|| build_branch(BranchKind::Quant, &resolved, &settings, &mut rng))
            .transpose()?;
        let prune = branches
            .has_prune()
            .then(|| build_branch(BranchKind::Prune, &resolved, &settings, &mut rng))
            .transpose()?;
        let n_head = resolved.head().len();
        let mut head = Vec::with_capacity(n_head);
        for (i, rl) in resolved.head().iter().enumerate() {
            let s = &rl.spec;
            match s.kind {
                LayerKind::Linear => {
                    let last = i + 1 == n_head;
                    let gain = if last { 1.0 } else { 2.0 };
                    let gate_seed: u64 = rng.gen();
                    let gate = (s.prunable && branches.has_prune())
                        .then(|| ChannelGate::new(s.c_out, settings.init_keep_prob, settings.tau, gate_seed))
                        .transpose()?;
                    head.push(HeadLayer::Linear(LinearLayer {
                        name: s.name.clone(),
                        weight: kaiming(&[s.c_out, s.c_in], s.c_in, gain, &mut rng),
                        bias: Tensor::zeros(&[s.c_out]).into_param(),
                        gate,
                    }));
                }
                _ => head.push(HeadLayer::Relu),
            }
        }
        let head_input = match resolved.head()[0].spec.act_bits {
            Bits::Fixed(b) => Some(ActQuant {
                bits: b,
                interval: Interval::new(1.0, 1.0),
            }),
            Bits::Full => None,
        };
        Ok(HybridModel {
            arch,
            settings,
            branches,
            quant,
            prune,
            head,
            head_input,
            seed,
            frozen: false,
        })
    }

    pub fn resolved(&self) -> Resolved {
        self.arch.resolve().expect("architecture validated at construction")
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops every later optimizer step from touching the quantized branch.
    pub fn freeze_quant(&mut self) {
        self.frozen = true;
    }

    pub fn set_tau(&mut self, tau: f64) {
        for gate in self.gates_mut() {
            gate.tau = tau;
        }
    }

    pub fn gates_mut(&mut self) -> Vec<&mut ChannelGate> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.prune {
            for l in &mut p.layers {
                if let FeatureLayer::Conv(c) = l {
                    if let Some(g) = &mut c.gate {
                        out.push(g);
                    }
                }
            }
        }
        for l in &mut self.head {
            if let HeadLayer::Linear(lin) = l {
                if let Some(g) = &mut lin.gate {
                    out.push(g);
                }
            }
        }
        out
    }

    /// Gates keyed by layer name.
    pub fn gates(&self) -> Vec<(String, &ChannelGate)> {
        let mut out = Vec::new();
        if let Some(p) = &self.prune {
            for l in &p.layers {
                if let FeatureLayer::Conv(c) = l {
                    if let Some(g) = &c.gate {
                        out.push((c.name.clone(), g));
                    }
                }
            }
        }
        for l in &self.head {
            if let HeadLayer::Linear(lin) = l {
                if let Some(g) = &lin.gate {
                    out.push((lin.name.clone(), g));
                }
            }
        }
        out
    }

    /// `(layer, active channels, total channels)` under the test threshold.
    pub fn active_channels(&self) -> Vec<(String, usize, usize)> {
        self.gates()
            .into_iter()
            .map(|(n, g)| (n, g.kept_channels(self.settings.threshold).len(), g.channels()))
            .collect()
    }

    /// Quantizer parameters of each quantized conv layer.
    pub fn quant_params(&self) -> Vec<(String, QuantParams)> {
        let mut out = Vec::new();
        if let Some(q) = &self.quant {
            for l in &q.layers {
                if let FeatureLayer::Conv(c) = l {
                    if let Some(lq) = &c.quant {
                        out.push((c.name.clone(), lq.params()));
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, g: &mut Graph, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.forward_with(g, x, None, opts)
    }

    /// Forward pass; when `quant_features` is given it stands in for the
    /// quantized branch output (a frozen branch evaluated once per batch).
    pub fn forward_with(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        quant_features: Option<&Tensor>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        check_input(&self.arch, x)?;
        let threshold = self.settings.threshold;
        let mut ctx = Ctx::new(g, opts, threshold);
        let xv = ctx.g.constant(x.clone());
        let quant_out = match (quant_features, &mut self.quant) {
            (Some(f), Some(_)) => Some(ctx.g.constant(f.clone())),
            (None, Some(q)) => Some(branch_forward(&mut ctx, q, xv)?),
            (_, None) => None,
        };
        let prune_out = match &mut self.prune {
            Some(p) => Some(branch_forward(&mut ctx, p, xv)?),
            None => None,
        };
        let fused = match (quant_out, prune_out) {
            (Some(a), Some(b)) => ctx.g.add(a, b).map_err(|_| Error::ShapeMismatch {
                op: "hybrid fusion",
                lhs: ctx.g.shape(a).to_vec(),
                rhs: ctx.g.shape(b).to_vec(),
            })?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("a model always has at least one branch"),
        };
        let logits = head_forward(&mut ctx, &mut self.head, self.head_input.as_ref(), fused)?;
        Ok(ForwardOutput {
            quant_out,
            prune_out,
            fused,
            logits,
            qw_terms: ctx.qw,
            qa_terms: ctx.qa,
            masks: ctx.masks,
            bindings: ctx.bindings,
        })
    }

    /// Output of one branch alone, evaluated on a fresh tape.
    pub fn branch_features(&mut self, kind: BranchKind, x: &Tensor, opts: &ForwardOptions) -> Result<Option<Tensor>> {
        check_input(&self.arch, x)?;
        let threshold = self.settings.threshold;
        let branch = match kind {
            BranchKind::Quant => &mut self.quant,
            BranchKind::Prune => &mut self.prune,
        };
        let Some(b) = branch else { return Ok(None) };
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, opts, threshold);
        let xv = ctx.g.constant(x.clone());
        let out = branch_forward(&mut ctx, b, xv)?;
        Ok(Some(g.value(out).clone()))
    }

    /// Cross-entropy plus the weighted quantization and pruning regularizers.
    pub fn total_loss(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        labels: &[usize],
        opts: &ForwardOptions,
    ) -> Result<LossParts> {
        self.total_loss_with(g, x, None, labels, opts)
    }

    pub fn total_loss_with(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        quant_features: Option<&Tensor>,
        labels: &[usize],
        opts: &ForwardOptions,
    ) -> Result<LossParts> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let fwd = self.forward_with(g, x, quant_features, opts)?;
        let ce = g.cross_entropy(fwd.logits, labels)?;
        let qw = (!fwd.qw_terms.is_empty())
            .then(|| quant::loss_qw(g, &fwd.qw_terms, &self.settings.norm))
            .transpose()?;
        let qa = (!fwd.qa_terms.is_empty())
            .then(|| quant::loss_qa(g, &fwd.qa_terms))
            .transpose()?;
        let quant = match (qw, qa) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (a, b) => a.or(b),
        };
        let hard: Vec<Var> = fwd.masks.iter().map(|m| m.hard).collect();
        let prune_term = (!hard.is_empty()).then(|| prune::loss_prune(g, &hard)).transpose()?;
        let mut total = ce;
        if let Some(q) = quant {
            let w = g.scale(q, self.settings.lambda_quant);
            total = g.add(total, w)?;
        }
        if let Some(p) = prune_term {
            let w = g.scale(p, self.settings.lambda_prune);
            total = g.add(total, w)?;
        }
        Ok(LossParts {
            total,
            ce,
            quant,
            prune: prune_term,
            forward: fwd,
        })
    }

    /// Eval-mode logits.
    pub fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x, &ForwardOptions::eval())?;
        Ok(g.value(out.logits).clone())
    }

    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Trainable tensors of the selected groups, by name.
    pub fn params_mut(&mut self, groups: &[ParamGroup]) -> Vec<(String, &mut Tensor)> {
        self.params_grouped_mut()
            .into_iter()
            .filter(|(_, grp, _)| groups.contains(grp))
            .map(|(n, _, t)| (n, t))
            .collect()
    }

    pub fn params_grouped_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor)> {
        self.slots_mut()
            .into_iter()
            .filter_map(|(n, slot)| match slot {
                Slot::Param(g, t) => Some((n, g, t)),
                Slot::Stat(_) => None,
            })
            .collect()
    }

    fn slots_mut(&mut self) -> Vec<(String, Slot<'_>)> {
        let mut out = Vec::new();
        for branch in [&mut self.quant, &mut self.prune].into_iter().flatten() {
            let prefix = branch.kind.prefix();
            let (wg, ng) = match branch.kind {
                BranchKind::Quant => (ParamGroup::QuantWeight, ParamGroup::QuantNorm),
                BranchKind::Prune => (ParamGroup::PruneWeight, ParamGroup::PruneNorm),
            };
            for l in &mut branch.layers {
                match l {
                    FeatureLayer::Conv(c) => {
                        out.push((format!("{prefix}.{}.weight", c.name), Slot::Param(wg, &mut c.weight)));
                        if let Some(q) = &mut c.quant {
                            let ig = ParamGroup::QuantInterval;
                            out.push((format!("{prefix}.{}.c_w", c.name), Slot::Param(ig, &mut q.weight.center)));
                            out.push((format!("{prefix}.{}.d_w", c.name), Slot::Param(ig, &mut q.weight.half_width)));
                            out.push((format!("{prefix}.{}.c_a", c.name), Slot::Param(ig, &mut q.act.center)));
                            out.push((format!("{prefix}.{}.d_a", c.name), Slot::Param(ig, &mut q.act.half_width)));
                        }
                        if let Some(gate) = &mut c.gate {
                            out.push((format!("{prefix}.{}.gate", c.name), Slot::Param(ParamGroup::Gate, gate.logits_mut())));
                        }
                    }
                    FeatureLayer::BatchNorm(bn) => {
                        out.push((format!("{prefix}.{}.gamma", bn.name), Slot::Param(ng, &mut bn.gamma)));
                        out.push((format!("{prefix}.{}.beta", bn.name), Slot::Param(ng, &mut bn.beta)));
                        out.push((format!("{prefix}.{}.running_mean", bn.name), Slot::Stat(&mut bn.stats.mean)));
                        out.push((format!("{prefix}.{}.running_var", bn.name), Slot::Stat(&mut bn.stats.var)));
                    }
                    FeatureLayer::Relu | FeatureLayer::Pool(_) => {}
                }
            }
        }
        if let Some(aq) = &mut self.head_input {
            out.push(("head.input.c_a".into(), Slot::Param(ParamGroup::QuantInterval, &mut aq.interval.center)));
            out.push(("head.input.d_a".into(), Slot::Param(ParamGroup::QuantInterval, &mut aq.interval.half_width)));
        }
        for l in &mut self.head {
            if let HeadLayer::Linear(lin) = l {
                out.push((format!("head.{}.weight", lin.name), Slot::Param(ParamGroup::HeadWeight, &mut lin.weight)));
                out.push((format!("head.{}.bias", lin.name), Slot::Param(ParamGroup::HeadWeight, &mut lin.bias)));
                if let Some(gate) = &mut lin.gate {
                    out.push((format!("head.{}.gate", lin.name), Slot::Param(ParamGroup::HeadGate, gate.logits_mut())));
                }
            }
        }
        out
    }

    /// Every stored value by name: parameters and batchnorm running statistics.
    pub fn state_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        self.slots_mut()
            .into_iter()
            .map(|(n, slot)| match slot {
                Slot::Param(_, t) => {
                    let shape = t.shape().to_vec();
                    (n, shape, t.data_mut())
                }
                Slot::Stat(v) => (n, vec![v.len()], v.as_mut_slice()),
            })
            .collect()
    }

    /// Copies gradients from the tape into the owning tensors. Parameters of
    /// the selected groups that the loss did not reach get zero gradients.
    pub fn store_grads(&mut self, g: &Graph, bindings: &[(String, Var)], groups: &[ParamGroup]) {
        let map: HashMap<&str, Var> = bindings.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        for (name, t) in self.params_mut(groups) {
            let grad = match map.get(name.as_str()) {
                Some(&v) => g.grad_or_zeros(v),
                None => vec![0.0; t.len()],
            };
            t.set_grad(grad);
        }
    }

    /// Clamps every interval half-width to the positive floor.
    pub fn reproject(&mut self) {
        for branch in [&mut self.quant, &mut self.prune].into_iter().flatten() {
            for l in &mut branch.layers {
                if let FeatureLayer::Conv(ConvLayer { quant: Some(q), .. }) = l {
                    q.weight.reproject();
                    q.act.reproject();
                }
            }
        }
        if let Some(aq) = &mut self.head_input {
            aq.interval.reproject();
        }
    }

    /// Integer weight codes of every quantized conv layer.
    pub fn weight_codes(&self) -> Result<Vec<(String, quant::IntCodeTensor)>> {
        let mut out = Vec::new();
        if let Some(q) = &self.quant {
            for l in &q.layers {
                if let FeatureLayer::Conv(c) = l {
                    if let Some(lq) = &c.quant {
                        if let Some(codes) = quant::weight_codes(&c.weight, &lq.params())? {
                            out.push((c.name.clone(), codes));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-layer cost inputs of this model and of its full-precision baseline.
    pub fn cost_layers(&self) -> Result<(Vec<BranchCosts>, Vec<LayerCostInput>)> {
        let keep: HashMap<String, f64> = self
            .gates()
            .into_iter()
            .map(|(n, g)| {
                let r = g.keep_ratio(self.settings.threshold);
                (n, r)
            })
            .collect();
        cost::from_architecture(&self.arch, self.branches, |spec| {
            keep.get(&spec.name).copied().unwrap_or(1.0)
        })
    }

    /// Removes every channel below the test threshold. The result computes
    /// the same eval-mode function as `self`.
    pub fn compact(&self) -> Result<CompactModel> {
        let threshold = self.settings.threshold;
        let prune = match &self.prune {
            Some(b) => Some(compact_branch(b, threshold)?),
            None => None,
        };
        let head = compact_head(&self.head, threshold)?;
        Ok(CompactModel {
            arch: self.arch.clone(),
            quant: self.quant.clone(),
            prune,
            head,
            head_input: self.head_input.clone(),
            threshold,
        })
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn build_branch(
    kind: BranchKind,
    resolved: &Resolved,
    settings: &ModelSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Branch> {
    let mut layers = Vec::new();
    for rl in resolved.features() {
        let s = &rl.spec;
        let layer = match s.kind {
            LayerKind::Conv => {
                let fan_in = s.c_in * s.kernel * s.kernel;
                let weight = kaiming(&[s.c_out, s.c_in, s.kernel, s.kernel], fan_in, 2.0, rng);
                let gate_seed: u64 = rng.gen();
                let quant = (kind == BranchKind::Quant && !(s.weight_bits.is_full() && s.act_bits.is_full()))
                    .then(|| {
                        let qp = QuantParams::init_from_weights(&weight, s.weight_bits, s.act_bits);
                        LayerQuant {
                            weight_bits: s.weight_bits,
                            act_bits: s.act_bits,
                            weight: Interval::new(qp.c_w, qp.d_w),
                            act: Interval::new(qp.c_a, qp.d_a),
                        }
                    });
                let gate = (kind == BranchKind::Prune && s.prunable)
                    .then(|| ChannelGate::new(s.c_out, settings.init_keep_prob, settings.tau, gate_seed))
                    .transpose()?;
                FeatureLayer::Conv(ConvLayer {
                    name: s.name.clone(),
                    weight,
                    stride: s.stride,
                    padding: s.padding,
                    quant,
                    gate,
                })
            }
            LayerKind::Batchnorm => FeatureLayer::BatchNorm(BatchNormLayer {
                name: s.name.clone(),
                gamma: Tensor::full(&[s.c_out], 1.0).into_param(),
                beta: Tensor::zeros(&[s.c_out]).into_param(),
                stats: RunningStats::new(s.c_out),
            }),
            LayerKind::Relu => FeatureLayer::Relu,
            LayerKind::Pool => FeatureLayer::Pool(s.kernel),
            LayerKind::Linear => unreachable!("features end before the first linear layer"),
        };
        layers.push(layer);
    }
    Ok(Branch { kind, layers })
}

/// A model with pruned channels physically removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub arch: Architecture,
    pub quant: Option<Branch>,
    /// Compacted pruned branch and the original channel index of each of its outputs.
    pub prune: Option<(Branch, Vec<usize>)>,
    pub head: Vec<HeadLayer>,
    pub head_input: Option<ActQuant>,
    pub threshold: f64,
}

impl CompactModel {
    pub fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.arch, x)?;
        let opts = ForwardOptions::eval();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &opts, self.threshold);
        let xv = ctx.g.constant(x.clone());
        let q = match &mut self.quant {
            Some(b) => Some(branch_forward(&mut ctx, b, xv)?),
            None => None,
        };
        let p = match &mut self.prune {
            Some((b, kept)) => Some((branch_forward(&mut ctx, b, xv)?, kept.clone())),
            None => None,
        };
        let fused = match (q, p) {
            (q, Some((pv, kept))) => {
                let ps = ctx.g.value(pv);
                let (n, ck, hh, ww) = (ps.shape()[0], ps.shape()[1], ps.shape()[2], ps.shape()[3]);
                let c_full = self.arch.resolve()?.fused_shape[0];
                let s = hh * ww;
                let mut base = match q {
                    Some(qv) => ctx.g.value(qv).data().to_vec(),
                    None => vec![0.0; n * c_full * s],
                };
                let pd = ps.data();
                for i in 0..n {
                    for (j, &c) in kept.iter().enumerate() {
                        for t in 0..s {
                            base[(i * c_full + c) * s + t] += pd[(i * ck + j) * s + t];
                        }
                    }
                }
                ctx.g.constant(Tensor::new(&[n, c_full, hh, ww], base)?)
            }
            (Some(qv), None) => qv,
            (None, None) => unreachable!("a model always has at least one branch"),
        };
        let out = head_forward(&mut ctx, &mut self.head, self.head_input.as_ref(), fused)?;
        Ok(g.value(out).clone())
    }

    /// Number of weights in the compacted pruned branch and head.
    pub fn weight_count(&self) -> usize {
        let mut n = 0;
        if let Some((b, _)) = &self.prune {
            for l in &b.layers {
                if let FeatureLayer::Conv(c) = l {
                    n += c.weight.len();
                }
            }
        }
        for l in &self.head {
            if let HeadLayer::Linear(lin) = l {
                n += lin.weight.len();
            }
        }
        n
    }
}

fn compact_branch(branch: &Branch, threshold: f64) -> Result<(Branch, Vec<usize>)> {
    // Each conv owns the batchnorm layers that follow it up to the next conv.
    let mut prunable = Vec::new();
    let mut owner = vec![None; branch.layers.len()];
    for (i, l) in branch.layers.iter().enumerate() {
        match l {
            FeatureLayer::Conv(c) => prunable.push(PrunableLayer {
                name: c.name.clone(),
                weight: c.weight.clone(),
                per_channel: Vec::new(),
                gate: c.gate.clone(),
            }),
            FeatureLayer::BatchNorm(bn) => {
                let Some(p) = prunable.last_mut() else {
                    return Err(Error::InvalidArgument(format!(
                        "{}: batchnorm before the first conv cannot be compacted",
                        bn.name
                    )));
                };
                owner[i] = Some(p.per_channel.len());
                p.per_channel.push(bn.gamma.data().to_vec());
                p.per_channel.push(bn.beta.data().to_vec());
                p.per_channel.push(bn.stats.mean.clone());
                p.per_channel.push(bn.stats.var.clone());
            }
            FeatureLayer::Relu | FeatureLayer::Pool(_) => {}
        }
    }
    let compacted = prune::compact_channels(&prunable, threshold)?;
    let mut layers = Vec::with_capacity(branch.layers.len());
    let mut ci = 0usize;
    for (i, l) in branch.layers.iter().enumerate() {
        match l {
            FeatureLayer::Conv(c) => {
                layers.push(FeatureLayer::Conv(ConvLayer {
                    name: c.name.clone(),
                    weight: compacted[ci].weight.clone(),
                    stride: c.stride,
                    padding: c.padding,
                    quant: None,
                    gate: None,
                }));
                ci += 1;
            }
            FeatureLayer::BatchNorm(bn) => {
                let pc = &compacted[ci - 1].per_channel;
                let k = owner[i].expect("recorded above");
                let mut stats = bn.stats.clone();
                stats.mean = pc[k + 2].clone();
                stats.var = pc[k + 3].clone();
                layers.push(FeatureLayer::BatchNorm(BatchNormLayer {
                    name: bn.name.clone(),
                    gamma: Tensor::from_vec(pc[k].clone()),
                    beta: Tensor::from_vec(pc[k + 1].clone()),
                    stats,
                }));
            }
            other => layers.push(other.clone()),
        }
    }
    let kept = compacted.last().map(|c| c.kept_out.clone()).unwrap_or_default();
    Ok((
        Branch {
            kind: branch.kind,
            layers,
        },
        kept,
    ))
}

fn compact_head(head: &[HeadLayer], threshold: f64) -> Result<Vec<HeadLayer>> {
    let prunable: Vec<PrunableLayer> = head
        .iter()
        .filter_map(|l| match l {
            HeadLayer::Linear(lin) => Some(PrunableLayer {
                name: lin.name.clone(),
                weight: lin.weight.clone(),
                per_channel: vec![lin.bias.data().to_vec()],
                gate: lin.gate.clone(),
            }),
            HeadLayer::Relu => None,
        })
        .collect();
    let compacted = prune::compact_channels(&prunable, threshold)?;
    let mut it = compacted.into_iter();
    Ok(head
        .iter()
        .map(|l| match l {
            HeadLayer::Linear(_) => {
                let c = it.next().expect("one compacted entry per linear layer");
                HeadLayer::Linear(LinearLayer {
                    name: c.name,
                    weight: c.weight,
                    bias: Tensor::from_vec(c.per_channel[0].clone()),
                    gate: None,
                })
            }
            HeadLayer::Relu => HeadLayer::Relu,
        })
        .collect())
}
