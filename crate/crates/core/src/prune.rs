//! Stochastic channel gates trained with a two-way Gumbel-softmax.
//!
//! Each gate keeps one logit per output channel; the keep probability is
//! `sigmoid(logit)`. During training a mask is sampled as
//! `soft = sigmoid((logit + g1 - g2) / tau)`, `hard = round(soft)`, with the
//! hard value used forward and the soft path used backward. At test time a
//! channel survives iff its keep probability reaches the threshold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{sigmoid, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ChannelGate {
    logits: Tensor,
    pub tau: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ChannelGate {
    fn eq(&self, other: &Self) -> bool {
        self.logits == other.logits
            && self.tau == other.tau
            && self.seed == other.seed
            && self.rng.get_word_pos() == other.rng.get_word_pos()
    }
}

/// One sampled mask: relaxed values and their rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
}

impl Mask {
    pub fn active(&self) -> usize {
        self.hard.iter().filter(|&&h| h == 1.0).count()
    }
}

/// Mask nodes on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MaskVars {
    pub soft: Var,
    pub hard: Var,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ChannelGate {
    pub fn new(channels: usize, init_prob: f64, tau: f64, seed: u64) -> Result<Self> {
        Self::from_probs(&vec![init_prob; channels], tau, seed)
    }

    pub fn from_probs(probs: &[f64], tau: f64, seed: u64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("gate needs at least one channel".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "keep probability {p} outside (0, 1)"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        Ok(ChannelGate {
            logits: Tensor::from_vec(probs.iter().map(|&p| logit(p)).collect()).into_param(),
            tau,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn channels(&self) -> usize {
        self.logits.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.data().iter().map(|&z| sigmoid(z)).collect()
    }

    /// Position of the gate's RNG stream, for checkpointing.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.rng.set_word_pos(pos);
    }

    /// Difference of two independent Gumbel(0, 1) draws per channel.
    pub fn draw_noise(&mut self) -> Vec<f64> {
        let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
        (0..self.channels())
            .map(|_| {
                let keep = gumbel.sample(&mut self.rng);
                let drop = gumbel.sample(&mut self.rng);
                keep - drop
            })
            .collect()
    }

    pub fn sample_mask(&mut self) -> Mask {
        let noise = self.draw_noise();
        let soft: Vec<f64> = self
            .logits
            .data()
            .iter()
            .zip(&noise)
            .map(|(z, g)| sigmoid((z + g) / self.tau))
            .collect();
        let hard = soft.iter().map(|s| s.round()).collect();
        Mask { soft, hard }
    }

    /// Deterministic test-time mask `1[prob >= threshold]`.
    pub fn eval_mask(&self, threshold: f64) -> Vec<f64> {
        self.probs()
            .iter()
            .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn kept_channels(&self, threshold: f64) -> Vec<usize> {
        self.eval_mask(threshold)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn keep_ratio(&self, threshold: f64) -> f64 {
        self.kept_channels(threshold).len() as f64 / self.channels() as f64
    }
}

/// Records a sampled straight-through mask on the tape.
pub fn sample_mask_on(g: &mut Graph, logits: Var, gate: &mut ChannelGate) -> MaskVars {
    let noise = gate.draw_noise();
    relaxed_mask_on(g, logits, &noise, gate.tau)
}

/// `soft = sigmoid((logits + noise) / tau)`, `hard = round(soft)` with a
/// straight-through backward pass.
pub fn relaxed_mask_on(g: &mut Graph, logits: Var, noise: &[f64], tau: f64) -> MaskVars {
    let n = g.constant(Tensor::from_vec(noise.to_vec()));
    let z = g.add(logits, n).expect("noise matches gate width");
    let scaled = g.scale(z, 1.0 / tau);
    let soft = g.sigmoid(scaled);
    let hard = g.round_ste(soft, 1.0);
    MaskVars { soft, hard }
}

/// Channel-wise multiplication by a mask of matching width.
pub fn apply_mask_on(g: &mut Graph, acts: Var, mask: Var) -> Result<Var> {
    let c = g.shape(acts).get(1).copied().unwrap_or(0);
    let m = g.value(mask).len();
    if c != m {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: g.shape(acts).to_vec(),
            rhs: vec![m],
        });
    }
    g.channel_mul(acts, mask)
}

/// Applies a mask outside the tape: hard values in train mode, the
/// probability threshold in eval mode.
pub fn apply_mask(
    acts: &Tensor,
    mask: &Mask,
    probs: &[f64],
    mode: Mode,
    threshold: f64,
) -> Result<Tensor> {
    let c = acts.shape().get(1).copied().unwrap_or(0);
    if c != mask.hard.len() || c != probs.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: acts.shape().to_vec(),
            rhs: vec![mask.hard.len()],
        });
    }
    let m: Vec<f64> = match mode {
        Mode::Train => mask.hard.clone(),
        Mode::Eval => probs.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect(),
    };
    let mut g = Graph::new();
    let a = g.constant(acts.clone());
    let mv = g.constant(Tensor::from_vec(m));
    let out = g.channel_mul(a, mv)?;
    Ok(g.value(out).clone())
}

/// Sum over layers of the active channel count, differentiable through the soft path.
pub fn loss_prune(g: &mut Graph, masks: &[Var]) -> Result<Var> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("loss_prune needs at least one mask".into()));
    }
    let mut total: Option<Var> = None;
    for &m in masks {
        let s = g.sum(m);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap())
}

/// One layer handed to [`compact_channels`].
#[derive(Debug, Clone)]
pub struct PrunableLayer {
    pub name: String,
    /// `[C_out, C_in, K, K]` or `[C_out, F_in]`.
    pub weight: Tensor,
    /// Vectors indexed by output channel (bias, batchnorm parameters and statistics).
    pub per_channel: Vec<Vec<f64>>,
    /// Gate on this layer's outputs; `None` keeps every channel.
    pub gate: Option<ChannelGate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactedLayer {
    pub name: String,
    pub weight: Tensor,
    pub per_channel: Vec<Vec<f64>>,
    /// Original indices of the surviving output channels.
    pub kept_out: Vec<usize>,
}

/// Physically removes output channels whose keep probability is below
/// `threshold`, together with the matching input slices of the next layer.
///
/// A layer whose input is a flattened `[C, H, W]` map has each channel's
/// `H*W` contiguous input columns removed as a block.
pub fn compact_channels(layers: &[PrunableLayer], threshold: f64) -> Result<Vec<CompactedLayer>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut prev_kept: Option<(usize, Vec<usize>)> = None;
    for layer in layers {
        let ws = layer.weight.shape().to_vec();
        let c_out = ws[0];
        let c_in = ws[1];
        let inner: usize = ws[2..].iter().product::<usize>().max(1);
        let kept_out: Vec<usize> = match &layer.gate {
            Some(gate) => {
                if gate.channels() != c_out {
                    return Err(Error::ShapeMismatch {
                        op: "compact_channels",
                        lhs: ws.clone(),
                        rhs: vec![gate.channels()],
                    });
                }
                gate.kept_channels(threshold)
            }
            None => (0..c_out).collect(),
        };
        if kept_out.is_empty() {
            return Err(Error::EmptyLayer(layer.name.clone()));
        }
        let kept_in_cols: Vec<usize> = match &prev_kept {
            None => (0..c_in).collect(),
            Some((prev_c, kept)) => {
                if c_in % prev_c != 0 {
                    return Err(Error::ShapeMismatch {
                        op: "compact_channels",
                        lhs: ws.clone(),
                        rhs: vec![*prev_c],
                    });
                }
                let block = c_in / prev_c;
                kept.iter().flat_map(|&c| c * block..(c + 1) * block).collect()
            }
        };
        let w = layer.weight.data();
        let mut data = Vec::with_capacity(kept_out.len() * kept_in_cols.len() * inner);
        for &o in &kept_out {
            for &i in &kept_in_cols {
                let base = (o * c_in + i) * inner;
                data.extend_from_slice(&w[base..base + inner]);
            }
        }
        let mut shape = ws.clone();
        shape[0] = kept_out.len();
        shape[1] = kept_in_cols.len();
        let per_channel = layer
            .per_channel
            .iter()
            .map(|v| kept_out.iter().map(|&o| v[o]).collect())
            .collect();
        out.push(CompactedLayer {
            name: layer.name.clone(),
            weight: Tensor::new(&shape, data)?,
            per_channel,
            kept_out: kept_out.clone(),
        });
        prev_kept = Some((c_out, kept_out));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probs_stay_in_open_interval() {
        let g = ChannelGate::from_probs(&[1e-9, 0.5, 1.0 - 1e-9], 1.0, 1).unwrap();
        for p in g.probs() {
            assert!(p > 0.0 && p < 1.0);
        }
        assert!(ChannelGate::from_probs(&[1.0], 1.0, 1).is_err());
        assert!(ChannelGate::from_probs(&[0.5], 0.0, 1).is_err());
    }

    #[test]
    fn hard_is_round_of_soft() {
        let mut g = ChannelGate::new(16, 0.7, 0.8, 3).unwrap();
        for _ in 0..50 {
            let m = g.sample_mask();
            for (s, h) in m.soft.iter().zip(&m.hard) {
                assert!(*s > 0.0 && *s < 1.0);
                assert_eq!(*h, s.round());
            }
            assert_eq!(m.active() as f64, m.hard.iter().sum::<f64>());
        }
    }

    #[test]
    fn near_certain_gate_keeps_channel() {
        let mut g = ChannelGate::from_probs(&[1.0 - 1e-9], 1.0, 11).unwrap();
        let kept = (0..100_000).filter(|_| g.sample_mask().hard[0] == 1.0).count();
        assert!(kept as f64 >= 0.9999 * 100_000.0, "kept {kept}");
    }

    #[test]
    fn rng_position_round_trips() {
        let mut a = ChannelGate::new(4, 0.5, 1.0, 99).unwrap();
        a.sample_mask();
        let mut b = ChannelGate::new(4, 0.5, 1.0, 99).unwrap();
        b.set_rng_word_pos(a.rng_word_pos());
        assert_eq!(a.sample_mask(), b.sample_mask());
    }

    #[test]
    fn apply_mask_examples() {
        let acts = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Mask {
            soft: vec![0.9, 0.9],
            hard: vec![1.0, 1.0],
        };
        let zeros = Mask {
            soft: vec![0.1, 0.1],
            hard: vec![0.0, 0.0],
        };
        let probs = [0.9, 0.3];
        assert_eq!(apply_mask(&acts, &ones, &probs, Mode::Train, 0.5).unwrap(), acts);
        assert!(apply_mask(&acts, &zeros, &probs, Mode::Train, 0.5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let ev = apply_mask(&acts, &zeros, &probs, Mode::Eval, 0.5).unwrap();
        assert_eq!(ev.data(), &[1.0, 2.0, 0.0, 0.0]);
        let short = Mask {
            soft: vec![0.5],
            hard: vec![1.0],
        };
        assert!(apply_mask(&acts, &short, &[0.5], Mode::Train, 0.5).is_err());
    }

    #[test]
    fn prune_loss_counts_active_channels() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 0.0, 1.0]));
        let b = g.constant(Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0]));
        let l = loss_prune(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        let z = g.constant(Tensor::zeros(&[5]));
        let l = loss_prune(&mut g, &[z]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn compaction_without_pruning_is_identity() {
        let w1 = Tensor::new(&[2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let w2 = Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let layers = vec![
            PrunableLayer {
                name: "a".into(),
                weight: w1.clone(),
                per_channel: vec![vec![0.1, 0.2]],
                gate: Some(ChannelGate::new(2, 0.9, 1.0, 0).unwrap()),
            },
            PrunableLayer {
                name: "b".into(),
                weight: w2.clone(),
                per_channel: vec![],
                gate: None,
            },
        ];
        let c = compact_channels(&layers, 0.5).unwrap();
        assert_eq!(c[0].weight.data(), w1.data());
        assert_eq!(c[1].weight.data(), w2.data());
        assert_eq!(c[0].per_channel, vec![vec![0.1, 0.2]]);
    }

    #[test]
    fn compaction_rejects_empty_layer() {
        let layers = vec![PrunableLayer {
            name: "conv2".into(),
            weight: Tensor::zeros(&[2, 1, 1, 1]),
            per_channel: vec![],
            gate: Some(ChannelGate::new(2, 0.1, 1.0, 0).unwrap()),
        }];
        let err = compact_channels(&layers, 0.5).unwrap_err();
        assert!(matches!(err, Error::EmptyLayer(ref n) if n == "conv2"));
    }

    #[test]
    fn compaction_removes_flattened_blocks() {
        // conv with 3 channels over a 2x1 map feeding a linear layer on 6 features
        let conv = Tensor::zeros(&[3, 1, 1, 1]);
        let fc = Tensor::new(&[1, 6], (0..6).map(f64::from).collect()).unwrap();
        let layers = vec![
            PrunableLayer {
                name: "conv".into(),
                weight: conv,
                per_channel: vec![],
                gate: Some(ChannelGate::from_probs(&[0.9, 0.2, 0.8], 1.0, 0).unwrap()),
            },
            PrunableLayer {
                name: "fc".into(),
                weight: fc,
                per_channel: vec![],
                gate: None,
            },
        ];
        let c = compact_channels(&layers, 0.5).unwrap();
        assert_eq!(c[0].kept_out, vec![0, 2]);
        assert_eq!(c[1].weight.shape(), &[1, 4]);
        assert_eq!(c[1].weight.data(), &[0.0, 1.0, 4.0, 5.0]);
    }
}
