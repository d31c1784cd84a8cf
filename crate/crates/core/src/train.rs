//! Offline pretraining and online updates of the pruned branch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, BranchKind, ForwardOptions, HybridModel, ParamGroup};
use crate::optim::{Adam, AdamConfig};
use crate::stream::Dataset;

fn d_epochs() -> usize {
    6
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    3e-3
}
fn d_aux_lr() -> f64 {
    1e-2
}
fn d_tau_start() -> f64 {
    1.0
}
fn d_tau_end() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Adam step size for weights and batchnorm affine parameters.
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Adam step size for interval parameters and gate logits.
    #[serde(default = "d_aux_lr")]
    pub aux_lr: f64,
    /// Gumbel-softmax temperature, annealed linearly across epochs.
    #[serde(default = "d_tau_start")]
    pub tau_start: f64,
    #[serde(default = "d_tau_end")]
    pub tau_end: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            aux_lr: d_aux_lr(),
            tau_start: d_tau_start(),
            tau_end: d_tau_end(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.aux_lr >= 0.0 && self.lr.is_finite() && self.aux_lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub tau: f64,
    pub loss: f64,
    pub ce: f64,
    pub quant: f64,
    pub prune: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// `(layer, active, total)` channels after training.
    pub active_channels: Vec<(String, usize, usize)>,
}

fn finite(term: &'static str, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

fn adam_step(model: &mut HybridModel, adam: &mut Adam, groups: &[ParamGroup], main: &AdamConfig, aux: &AdamConfig) -> Result<()> {
    let (aux_params, main_params): (Vec<_>, Vec<_>) = model
        .params_grouped_mut()
        .into_iter()
        .filter(|(_, g, _)| groups.contains(g))
        .partition(|(_, g, _)| g.is_auxiliary());
    let mut m: Vec<_> = main_params.into_iter().map(|(n, _, t)| (n, t)).collect();
    let mut a: Vec<_> = aux_params.into_iter().map(|(n, _, t)| (n, t)).collect();
    adam.step(&mut m, main)?;
    adam.step(&mut a, aux)?;
    Ok(())
}

/// Trains every parameter group not frozen, minimizing the hybrid loss.
pub fn pretrain(model: &mut HybridModel, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let groups: Vec<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|g| !(model.is_frozen() && g.is_quant()))
        .collect();
    let opts = ForwardOptions::train(&groups);
    let main = AdamConfig::with_lr(cfg.lr);
    let aux = AdamConfig::with_lr(cfg.aux_lr);
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let tau = cfg.tau_at(epoch);
        model.set_tau(tau);
        order.shuffle(&mut rng);
        let (mut loss, mut ce, mut qt, mut pt, mut correct) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(idx);
            let mut g = Graph::new();
            let parts = model.total_loss(&mut g, &x, &y, &opts)?;
            ce += finite("cross_entropy", g.value(parts.ce).item(), step)?;
            if let Some(q) = parts.quant {
                qt += finite("quantization", g.value(q).item(), step)?;
            }
            if let Some(p) = parts.prune {
                pt += finite("pruning", g.value(p).item(), step)?;
            }
            loss += finite("total", g.value(parts.total).item(), step)?;
            correct += argmax_rows(g.value(parts.forward.logits))
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            g.backward(parts.total)?;
            model.store_grads(&g, &parts.forward.bindings, &groups);
            adam_step(model, &mut adam, &groups, &main, &aux)?;
            model.reproject();
            batches += 1;
            step += 1;
        }
        let nb = batches as f64;
        let stats = EpochStats {
            epoch,
            tau,
            loss: loss / nb,
            ce: ce / nb,
            quant: qt / nb,
            prune: pt / nb,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ce {:.4} quant {:.4} prune {:.1} acc {:.3}",
            stats.loss,
            stats.ce,
            stats.quant,
            stats.prune,
            stats.train_accuracy
        );
        epochs.push(stats);
    }
    Ok(TrainReport {
        epochs,
        active_channels: model.active_channels(),
    })
}

/// Fraction of `data` classified correctly in eval mode.
pub fn evaluate(model: &mut HybridModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        correct += model.predict(&x)?.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Parameters an online update may change.
pub const ONLINE_GROUPS: [ParamGroup; 3] = [ParamGroup::PruneWeight, ParamGroup::PruneNorm, ParamGroup::HeadWeight];

/// Fine-tunes the pruned branch and head on recent frames while the
/// quantized branch stays fixed. Optimizer state persists across updates.
#[derive(Debug, Clone)]
pub struct OnlineUpdater {
    adam: Adam,
    cfg: AdamConfig,
    updates: usize,
}

impl OnlineUpdater {
    pub fn new(lr: f64) -> Self {
        OnlineUpdater {
            adam: Adam::new(),
            cfg: AdamConfig::with_lr(lr),
            updates: 0,
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Runs `iters` full-batch steps on `replay`; returns the loss before each step.
    ///
    /// Batchnorm statistics and channel masks are used in eval form, and the
    /// quantized-branch output is computed once and reused as a constant.
    pub fn update(&mut self, model: &mut HybridModel, replay: &Dataset, iters: usize) -> Result<Vec<f64>> {
        if !model.is_frozen() {
            return Err(Error::NotFrozen);
        }
        let (x, y) = replay.all();
        let qf = model.branch_features(BranchKind::Quant, &x, &ForwardOptions::eval())?;
        let opts = ForwardOptions {
            mode: Mode::Eval,
            trainable: ONLINE_GROUPS.to_vec(),
        };
        let mut losses = Vec::with_capacity(iters);
        for _ in 0..iters {
            let mut g = Graph::new();
            let parts = model.total_loss_with(&mut g, &x, qf.as_ref(), &y, &opts)?;
            losses.push(finite("cross_entropy", g.value(parts.ce).item(), self.updates)?);
            g.backward(parts.ce)?;
            model.store_grads(&g, &parts.forward.bindings, &ONLINE_GROUPS);
            let mut params = model.params_mut(&ONLINE_GROUPS);
            self.adam.step(&mut params, &self.cfg)?;
        }
        self.updates += 1;
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Architecture, LayerSpec};
    use crate::model::{BranchSet, ModelSettings};
    use crate::quant::Bits;
    use crate::stream::StreamSpec;

    fn small() -> (HybridModel, Dataset) {
        let spec = StreamSpec {
            image: [12, 12],
            n_classes: 3,
            ..StreamSpec::default()
        };
        let b4 = Bits::Fixed(4);
        let arch = Architecture {
            input: [1, 12, 12],
            n_classes: 3,
            layers: vec![
                LayerSpec::conv("c1", 1, 4, 3, 2, 0).bits(Bits::Full, b4).prunable(true),
                LayerSpec::batchnorm("b1"),
                LayerSpec::relu("r1"),
                LayerSpec::linear("f1", 4 * 5 * 5, 3),
            ],
        };
        let m = HybridModel::new(arch, ModelSettings::default(), BranchSet::Hybrid, 4).unwrap();
        (m, spec.undrifted_set(96, 1))
    }

    #[test]
    fn tau_schedule_endpoints() {
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        assert_eq!(cfg.tau_at(0), 1.0);
        assert_eq!(cfg.tau_at(4), 0.5);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let (mut m, data) = small();
        let cfg = TrainConfig { epochs: 4, batch_size: 16, ..TrainConfig::default() };
        let rep = pretrain(&mut m, &data, &cfg, 0).unwrap();
        assert!(rep.epochs.last().unwrap().ce < rep.epochs[0].ce);
    }

    #[test]
    fn online_update_requires_freeze() {
        let (mut m, data) = small();
        let mut up = OnlineUpdater::new(1e-3);
        assert!(matches!(up.update(&mut m, &data, 1), Err(Error::NotFrozen)));
        m.freeze_quant();
        let before: Vec<_> = m.quant_params();
        let qw = m.quant.clone();
        let losses = up.update(&mut m, &data, 5).unwrap();
        assert!(losses[4] < losses[0]);
        assert_eq!(m.quant, qw);
        assert_eq!(m.quant_params(), before);
    }

    #[test]
    fn non_finite_input_names_the_term() {
        let (mut m, mut data) = small();
        data.data[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 1, batch_size: 200, ..TrainConfig::default() };
        let err = pretrain(&mut m, &data, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err:?}");
    }
}
