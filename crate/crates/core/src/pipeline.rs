//! Run configuration and the pretrain / freeze / stream pipeline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::checkpoint;
use crate::cost::{self, CostReport};
use crate::error::{Error, Result};
use crate::model::{BranchSet, HybridModel, ModelSettings};
use crate::stream::{Dataset, Frame, StreamSpec};
use crate::train::{self, OnlineUpdater, TrainConfig, TrainReport};

fn d_train_examples() -> usize {
    1024
}
fn d_test_examples() -> usize {
    512
}
fn d_online_lr() -> f64 {
    5e-4
}
fn d_segment() -> usize {
    100
}
fn d_prefetch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pretraining examples drawn from the undrifted distribution.
    #[serde(default = "d_train_examples")]
    pub train_examples: usize,
    /// Held-out examples from the same distribution.
    #[serde(default = "d_test_examples")]
    pub test_examples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_examples: d_train_examples(),
            test_examples: d_test_examples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    #[serde(default = "d_online_lr")]
    pub lr: f64,
    /// Frames per accuracy segment.
    #[serde(default = "d_segment")]
    pub segment: usize,
    /// Frames the generator may run ahead of the consumer.
    #[serde(default = "d_prefetch")]
    pub prefetch: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            lr: d_online_lr(),
            segment: d_segment(),
            prefetch: d_prefetch(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for checkpoints and reports; nothing is written when unset.
    #[serde(default)]
    pub dir: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "Architecture::default_toy")]
    pub arch: Architecture,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub stream: StreamSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            arch: Architecture::default_toy(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            online: OnlineConfig::default(),
            stream: StreamSpec::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg = RunConfig::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without cross-section validation; for tools that only read
    /// part of the config (e.g. cost estimates of the architecture).
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.resolve()?;
        self.model.validate()?;
        self.train.validate()?;
        self.stream.validate()?;
        if self.stream.frame_shape() != self.arch.input {
            return Err(Error::Config(format!(
                "stream frames are {:?} but the architecture expects {:?}",
                self.stream.frame_shape(),
                self.arch.input
            )));
        }
        if self.stream.n_classes != self.arch.n_classes {
            return Err(Error::Config(format!(
                "stream has {} classes but the architecture predicts {}",
                self.stream.n_classes, self.arch.n_classes
            )));
        }
        if self.data.train_examples == 0 || self.data.test_examples == 0 {
            return Err(Error::Config("train_examples and test_examples must be positive".into()));
        }
        if !(self.online.lr >= 0.0) || self.online.segment == 0 || self.online.prefetch == 0 {
            return Err(Error::Config("online lr must be non-negative; segment and prefetch positive".into()));
        }
        Ok(())
    }

    /// Copy with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seed = seed;
        c.stream.seed = seed;
        c
    }
}

/// Attaches the pipeline stage to an error.
fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub hybrid: HybridModel,
    pub quant_only: HybridModel,
    pub hybrid_report: TrainReport,
    pub quant_only_report: TrainReport,
    pub hybrid_heldout: f64,
    pub quant_only_heldout: f64,
}

pub fn pretraining_sets(cfg: &RunConfig) -> (Dataset, Dataset) {
    (
        cfg.stream.undrifted_set(cfg.data.train_examples, 1),
        cfg.stream.undrifted_set(cfg.data.test_examples, 2),
    )
}

/// Pretrains one model of the given branch layout and freezes its quantized branch.
pub fn pretrain_model(cfg: &RunConfig, branches: BranchSet, train_set: &Dataset) -> Result<(HybridModel, TrainReport)> {
    let mut m = HybridModel::new(cfg.arch.clone(), cfg.model.clone(), branches, cfg.seed)?;
    let rep = train::pretrain(&mut m, train_set, &cfg.train, cfg.seed)?;
    m.freeze_quant();
    Ok((m, rep))
}

/// Pretrains the hybrid model and the quantized-only reference.
pub fn train_models(cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    let (train_set, test_set) = pretraining_sets(cfg);
    let (mut hybrid, hybrid_report) = stage("pretrain hybrid", pretrain_model(cfg, BranchSet::Hybrid, &train_set))?;
    let (mut quant_only, quant_only_report) =
        stage("pretrain quant-only", pretrain_model(cfg, BranchSet::QuantOnly, &train_set))?;
    let hybrid_heldout = stage("evaluate", train::evaluate(&mut hybrid, &test_set))?;
    let quant_only_heldout = stage("evaluate", train::evaluate(&mut quant_only, &test_set))?;
    Ok(Trained {
        hybrid,
        quant_only,
        hybrid_report,
        quant_only_report,
        hybrid_heldout,
        quant_only_heldout,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub frames: usize,
    /// Hybrid model with online updates.
    pub online: f64,
    /// Hybrid model left as pretrained.
    pub frozen: f64,
    /// Quantized-only model left as pretrained.
    pub quant_only: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub frames: usize,
    pub updates: usize,
    pub segments: Vec<Segment>,
    /// Frame indices at which an update ran (after the frame was scored).
    pub update_frames: Vec<usize>,
}

impl StreamSummary {
    pub fn final_segment(&self) -> &Segment {
        self.segments.last().expect("a stream has at least one frame")
    }
}

/// Ring of the most recent labelled frames.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    cap: usize,
    frames: VecDeque<Frame>,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> Self {
        ReplayBuffer {
            cap,
            frames: VecDeque::with_capacity(cap),
        }
    }

    pub fn push(&mut self, f: Frame) {
        if self.frames.len() == self.cap {
            self.frames.pop_front();
        }
        self.frames.push_back(f);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Indices of the buffered frames, oldest first.
    pub fn indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.index).collect()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let v: Vec<Frame> = self.frames.iter().cloned().collect();
        Dataset::from_frames(&v)
    }
}

fn predict_one(m: &mut HybridModel, f: &Frame) -> Result<bool> {
    let s = f.image.shape();
    let x = f.image.reshape(&[1, s[0], s[1], s[2]])?;
    Ok(m.predict(&x)?[0] == f.label)
}

/// Streams frames test-then-train: every frame is scored by each model
/// before it enters the replay buffer, and the online model is updated
/// after every `frames_per_update` frames.
pub fn run_stream(cfg: &RunConfig, hybrid: &HybridModel, quant_only: Option<&HybridModel>) -> Result<StreamSummary> {
    cfg.validate()?;
    let spec = &cfg.stream;
    let mut online = hybrid.clone();
    let mut frozen = hybrid.clone();
    let mut reference = quant_only.cloned();
    online.freeze_quant();
    let mut updater = OnlineUpdater::new(cfg.online.lr);
    let mut replay = ReplayBuffer::new(spec.replay_len);
    let seg = cfg.online.segment;
    let mut segments: Vec<Segment> = Vec::new();
    let mut counts = [0usize; 3];
    let mut in_seg = 0usize;
    let mut update_frames = Vec::new();
    let mut n = 0usize;
    let flush = |start: usize, in_seg: usize, counts: &[usize; 3], has_ref: bool, segments: &mut Vec<Segment>| {
        let k = in_seg as f64;
        segments.push(Segment {
            start,
            frames: in_seg,
            online: counts[0] as f64 / k,
            frozen: counts[1] as f64 / k,
            quant_only: has_ref.then(|| counts[2] as f64 / k),
        });
    };
    for frame in spec.prefetch(cfg.online.prefetch) {
        let t = frame.index;
        counts[0] += stage("stream", predict_one(&mut online, &frame))? as usize;
        counts[1] += predict_one(&mut frozen, &frame)? as usize;
        if let Some(r) = &mut reference {
            counts[2] += predict_one(r, &frame)? as usize;
        }
        in_seg += 1;
        replay.push(frame);
        if (t + 1) % spec.frames_per_update == 0 {
            let data = replay.dataset()?;
            stage("online update", updater.update(&mut online, &data, spec.update_iters))?;
            update_frames.push(t);
        }
        if in_seg == seg {
            flush(t + 1 - in_seg, in_seg, &counts, reference.is_some(), &mut segments);
            counts = [0; 3];
            in_seg = 0;
        }
        n += 1;
    }
    if in_seg > 0 {
        flush(n - in_seg, in_seg, &counts, reference.is_some(), &mut segments);
    }
    Ok(StreamSummary {
        frames: n,
        updates: updater.updates(),
        segments,
        update_frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub hybrid_heldout: f64,
    pub quant_only_heldout: f64,
    pub hybrid_train: TrainReport,
    pub quant_only_train: TrainReport,
    pub stream: StreamSummary,
    pub cost: CostReport,
    pub rc_total: f64,
}

/// Cost report of a trained model, keep ratios read from its gates.
pub fn model_cost(model: &HybridModel) -> Result<CostReport> {
    let (rows, base) = model.cost_layers()?;
    cost::relative_cost(&rows, &base)
}

/// Pretrains, freezes, streams and costs; writes artifacts when an output
/// directory is configured.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineSummary> {
    let trained = train_models(cfg)?;
    let stream = run_stream(cfg, &trained.hybrid, Some(&trained.quant_only))?;
    let cost = stage("cost", model_cost(&trained.hybrid))?;
    let summary = PipelineSummary {
        seed: cfg.seed,
        hybrid_heldout: trained.hybrid_heldout,
        quant_only_heldout: trained.quant_only_heldout,
        hybrid_train: trained.hybrid_report,
        quant_only_train: trained.quant_only_report,
        stream,
        rc_total: cost.rc_total,
        cost,
    };
    if let Some(dir) = &cfg.output.dir {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&trained.hybrid, &dir.join("hybrid.ckpt"))?;
        checkpoint::save(&trained.quant_only, &dir.join("quant_only.ckpt"))?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(dir.join("summary.json"), json)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_keeps_latest() {
        let mut r = ReplayBuffer::new(3);
        for (i, f) in StreamSpec::default().frames().take(5).enumerate() {
            assert_eq!(f.index, i);
            r.push(f);
        }
        assert_eq!(r.indices(), vec![2, 3, 4]);
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml("seed = 1\n[train]\nepochz = 3\n").unwrap_err();
        assert!(err.is_config());
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn mismatched_stream_shape_is_rejected() {
        let err = RunConfig::from_toml("[stream]\nimage = [16, 16]\n").unwrap_err();
        assert!(err.is_config(), "{err}");
    }
}
