//! Synthetic drifting image streams and in-memory datasets.
//!
//! Each class is a Gaussian blob whose center sits on a circle around the
//! image center. Drift moves the centers (rotation, shift) or remaps the
//! labels as the stream advances.

use std::f64::consts::PI;
use std::sync::mpsc::{sync_channel, IntoIter};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    /// Class centers rotate about the image center by `rate` radians per frame.
    Rotation,
    /// Class centers translate horizontally by `rate` pixels per frame.
    MeanShift,
    /// Labels advance by one class every `1 / rate` frames.
    LabelFlip,
}

fn d_classes() -> usize {
    8
}
fn d_image() -> [usize; 2] {
    [32, 32]
}
fn d_drift() -> DriftKind {
    DriftKind::Rotation
}
fn d_rate() -> f64 {
    0.0015
}
fn d_frames() -> usize {
    600
}
fn d_fpu() -> usize {
    10
}
fn d_iters() -> usize {
    15
}
fn d_replay() -> usize {
    20
}
fn d_radius() -> f64 {
    0.6
}
fn d_width() -> f64 {
    2.5
}
fn d_jitter() -> f64 {
    1.5
}
fn d_noise() -> f64 {
    0.35
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    /// `[height, width]`; frames have a single channel.
    #[serde(default = "d_image")]
    pub image: [usize; 2],
    #[serde(default = "d_drift")]
    pub drift_kind: DriftKind,
    #[serde(default = "d_rate")]
    pub drift_rate: f64,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_fpu")]
    pub frames_per_update: usize,
    #[serde(default = "d_iters")]
    pub update_iters: usize,
    #[serde(default = "d_replay")]
    pub replay_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Radius of the circle of class centers, as a fraction of half the image size.
    #[serde(default = "d_radius")]
    pub center_radius: f64,
    /// Blob standard deviation in pixels.
    #[serde(default = "d_width")]
    pub blob_width: f64,
    /// Per-frame random displacement of the blob center, in pixels.
    #[serde(default = "d_jitter")]
    pub jitter: f64,
    /// Additive pixel noise standard deviation.
    #[serde(default = "d_noise")]
    pub noise: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            n_classes: d_classes(),
            image: d_image(),
            drift_kind: d_drift(),
            drift_rate: d_rate(),
            frames: d_frames(),
            frames_per_update: d_fpu(),
            update_iters: d_iters(),
            replay_len: d_replay(),
            seed: 0,
            center_radius: d_radius(),
            blob_width: d_width(),
            jitter: d_jitter(),
            noise: d_noise(),
        }
    }
}

/// One labelled frame, shaped `[1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: Tensor,
    pub label: usize,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad("stream needs at least 2 classes".into());
        }
        if self.image[0] < 4 || self.image[1] < 4 {
            return bad(format!("image {:?} is too small", self.image));
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate.is_finite()) {
            return bad(format!("drift_rate {} must be finite and non-negative", self.drift_rate));
        }
        if self.replay_len == 0 || self.frames_per_update == 0 || self.update_iters == 0 {
            return bad("replay_len, frames_per_update and update_iters must be positive".into());
        }
        if self.frames < self.replay_len {
            return bad(format!(
                "frames ({}) must be at least replay_len ({})",
                self.frames, self.replay_len
            ));
        }
        if !(self.blob_width > 0.0 && self.center_radius >= 0.0 && self.jitter >= 0.0 && self.noise >= 0.0) {
            return bad("blob_width must be positive; radius, jitter and noise non-negative".into());
        }
        Ok(())
    }

    /// Input shape `[C, H, W]` of one frame.
    pub fn frame_shape(&self) -> [usize; 3] {
        [1, self.image[0], self.image[1]]
    }

    /// Rotation of the class centers at frame `t`, in radians.
    pub fn rotation_at(&self, t: usize) -> f64 {
        match self.drift_kind {
            DriftKind::Rotation => self.drift_rate * t as f64,
            _ => 0.0,
        }
    }

    /// Label offset at frame `t` under label-flip drift.
    pub fn label_offset(&self, t: usize) -> usize {
        match self.drift_kind {
            DriftKind::LabelFlip => (self.drift_rate * t as f64).floor() as usize,
            _ => 0,
        }
    }

    /// Blob center `(row, col)` of `class` at frame `t`, in pixel coordinates.
    pub fn class_center(&self, class: usize, t: usize) -> (f64, f64) {
        let [h, w] = self.image;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let r = self.center_radius * (h.min(w) as f64 / 2.0);
        let theta = 2.0 * PI * class as f64 / self.n_classes as f64 + self.rotation_at(t);
        let shift = match self.drift_kind {
            DriftKind::MeanShift => self.drift_rate * t as f64,
            _ => 0.0,
        };
        (cy + r * theta.sin(), cx + r * theta.cos() + shift)
    }

    fn render(&self, class: usize, t: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let [h, w] = self.image;
        let (my, mx) = self.class_center(class, t);
        let jy: f64 = rng.sample::<f64, _>(StandardNormal) * self.jitter;
        let jx: f64 = rng.sample::<f64, _>(StandardNormal) * self.jitter;
        let (my, mx) = (my + jy, mx + jx);
        let inv = 1.0 / (2.0 * self.blob_width * self.blob_width);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - my).powi(2) + (x as f64 - mx).powi(2);
                let n: f64 = rng.sample(StandardNormal);
                data.push((-d2 * inv).exp() + self.noise * n);
            }
        }
        Tensor::new(&[1, h, w], data).expect("shape matches data")
    }

    fn draw(&self, t: usize, rng: &mut ChaCha8Rng) -> (Tensor, usize) {
        let class = rng.gen_range(0..self.n_classes);
        let image = self.render(class, t, rng);
        let label = (class + self.label_offset(t)) % self.n_classes;
        (image, label)
    }

    /// The drifting stream; deterministic in `seed`.
    pub fn frames(&self) -> StreamIter {
        StreamIter {
            spec: self.clone(),
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            t: 0,
        }
    }

    /// `n` i.i.d. examples from the undrifted (frame 0) distribution. `salt`
    /// separates independent sets drawn for the same stream seed.
    pub fn undrifted_set(&self, n: usize, salt: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
        let shape = self.frame_shape();
        let mut data = Vec::with_capacity(n * shape.iter().product::<usize>());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (img, label) = self.draw(0, &mut rng);
            data.extend_from_slice(img.data());
            labels.push(label);
        }
        Dataset { shape, data, labels }
    }

    /// Runs the generator on a producer thread, at most `capacity` frames ahead.
    pub fn prefetch(&self, capacity: usize) -> Prefetch {
        let (tx, rx) = sync_channel(capacity);
        let iter = self.frames();
        let handle = std::thread::spawn(move || {
            for f in iter {
                if tx.send(f).is_err() {
                    break;
                }
            }
        });
        Prefetch {
            rx: rx.into_iter(),
            handle: Some(handle),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamIter {
    spec: StreamSpec,
    rng: ChaCha8Rng,
    t: usize,
}

impl Iterator for StreamIter {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        if self.t >= self.spec.frames {
            return None;
        }
        let (image, label) = self.spec.draw(self.t, &mut self.rng);
        let f = Frame {
            index: self.t,
            image,
            label,
        };
        self.t += 1;
        Some(f)
    }
}

/// Frames produced ahead of consumption through a bounded queue; the
/// producer blocks while the queue is full.
pub struct Prefetch {
    rx: IntoIter<Frame>,
    handle: Option<JoinHandle<()>>,
}

impl Iterator for Prefetch {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        let f = self.rx.next();
        if f.is_none() {
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
        f
    }
}

/// Labelled examples stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of one example.
    pub shape: [usize; 3],
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_frames(frames: &[Frame]) -> Result<Dataset> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("no frames".into()))?;
        let s = first.image.shape();
        let shape = [s[0], s[1], s[2]];
        let mut data = Vec::with_capacity(frames.len() * first.image.len());
        for f in frames {
            if f.image.shape() != s {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: s.to_vec(),
                    rhs: f.image.shape().to_vec(),
                });
            }
            data.extend_from_slice(f.image.data());
        }
        Ok(Dataset {
            shape,
            data,
            labels: frames.iter().map(|f| f.label).collect(),
        })
    }

    /// Reads rows of `label,pixel0,pixel1,...` for frames of `shape`.
    pub fn from_csv(text: &str, shape: [usize; 3]) -> Result<Dataset> {
        let per: usize = shape.iter().product();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let label = fields
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: bad label", i + 1)))?;
            let row: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", i + 1)))?;
            if row.len() != per {
                return Err(Error::InvalidArgument(format!(
                    "line {}: expected {per} pixels, found {}",
                    i + 1,
                    row.len()
                )));
            }
            labels.push(label);
            data.extend(row);
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("csv has no rows".into()));
        }
        Ok(Dataset { shape, data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples at `idx` as an `[N, C, H, W]` tensor plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new(&[idx.len(), c, h, w], data).expect("batch shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let spec = StreamSpec { frames: 30, ..StreamSpec::default() };
        let a: Vec<Frame> = spec.frames().collect();
        let b: Vec<Frame> = spec.frames().collect();
        assert_eq!(a, b);
        let c: Vec<Frame> = StreamSpec { seed: 1, ..spec }.frames().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn rotation_is_cumulative() {
        let spec = StreamSpec { drift_rate: 0.01, ..StreamSpec::default() };
        let (y0, x0) = spec.class_center(0, 0);
        let (y1, x1) = spec.class_center(0, 100);
        let (cy, cx) = (15.5, 15.5);
        let a0 = (y0 - cy).atan2(x0 - cx);
        let a1 = (y1 - cy).atan2(x1 - cx);
        assert!((a1 - a0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_flip_offsets() {
        let spec = StreamSpec {
            drift_kind: DriftKind::LabelFlip,
            drift_rate: 0.01,
            ..StreamSpec::default()
        };
        assert_eq!(spec.label_offset(99), 0);
        assert_eq!(spec.label_offset(100), 1);
    }

    #[test]
    fn validate_rejects_short_stream() {
        let spec = StreamSpec { frames: 5, ..StreamSpec::default() };
        assert!(spec.validate().unwrap_err().is_config());
    }

    #[test]
    fn prefetch_matches_direct() {
        let spec = StreamSpec { frames: 25, ..StreamSpec::default() };
        let a: Vec<Frame> = spec.prefetch(2).collect();
        let b: Vec<Frame> = spec.frames().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let text = "1,0.5,0.25,0,1\n0,1,2,3,4\n";
        let d = Dataset::from_csv(text, [1, 2, 2]).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        let (x, y) = d.batch(&[1]);
        assert_eq!(x.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y, vec![0]);
        assert!(Dataset::from_csv("1,0.5\n", [1, 2, 2]).is_err());
    }
}
