use hybrep::checkpoint;
use hybrep::pipeline::{self, RunConfig};
use hybrep::stream::StreamSpec;

const TINY: &str = r#"
seed = 3

[train]
epochs = 1
batch_size = 16

[stream]
frames = 45
replay_len = 7
frames_per_update = 6
update_iters = 2

[online]
segment = 20

[data]
train_examples = 48
test_examples = 32
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

fn mean_and_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Brightness-weighted column of a frame, a statistic that moves with the blob.
fn centroid_col(img: &[f64], w: usize) -> f64 {
    let (mut s, mut z) = (0.0, 0.0);
    for (i, v) in img.iter().enumerate() {
        let v = v.max(0.0);
        s += v * (i % w) as f64;
        z += v;
    }
    s / z
}

fn window_stat(spec: &StreamSpec, from: usize, to: usize) -> Vec<f64> {
    spec.frames()
        .skip(from)
        .take(to - from)
        .map(|f| centroid_col(f.image.data(), spec.image[1]))
        .collect()
}

fn welch_z(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_and_var(a);
    let (mb, vb) = mean_and_var(b);
    (ma - mb) / (va / a.len() as f64 + vb / b.len() as f64).sqrt()
}

#[test]
fn without_drift_early_and_late_frames_agree() {
    let spec = StreamSpec {
        drift_kind: hybrep::stream::DriftKind::MeanShift,
        drift_rate: 0.0,
        frames: 1200,
        ..StreamSpec::default()
    };
    for c in 0..spec.n_classes {
        assert_eq!(spec.class_center(c, 0), spec.class_center(c, 1199));
    }
    let z = welch_z(&window_stat(&spec, 0, 400), &window_stat(&spec, 800, 1200));
    assert!(z.abs() < 4.0, "z = {z}");

    // the same statistic does see a real shift
    let drifting = StreamSpec {
        drift_rate: 0.01,
        ..spec.clone()
    };
    let z = welch_z(&window_stat(&drifting, 0, 400), &window_stat(&drifting, 800, 1200));
    assert!(z.abs() > 4.0, "z = {z}");
}

#[test]
fn rotation_moves_centers_by_angle() {
    let spec = StreamSpec {
        drift_rate: 0.003,
        ..StreamSpec::default()
    };
    let [h, w] = spec.image;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for t in [0usize, 1, 250, 599] {
        assert_eq!(spec.rotation_at(t), 0.003 * t as f64);
        let (a, b) = (spec.class_center(2, 0), spec.class_center(2, t));
        let ang = |(y, x): (f64, f64)| (y - cy).atan2(x - cx);
        let mut d = ang(b) - ang(a);
        d = d.rem_euclid(std::f64::consts::TAU);
        assert!((d - spec.rotation_at(t)).abs() < 1e-9, "t = {t}: {d}");
    }
}

#[test]
fn updates_follow_the_cadence() {
    let cfg = tiny();
    let trained = pipeline::train_models(&cfg).unwrap();
    let s = pipeline::run_stream(&cfg, &trained.hybrid, Some(&trained.quant_only)).unwrap();
    assert_eq!(s.frames, 45);
    assert_eq!(s.update_frames, vec![5, 11, 17, 23, 29, 35, 41]);
    assert_eq!(s.updates, 7);
    let starts: Vec<(usize, usize)> = s.segments.iter().map(|g| (g.start, g.frames)).collect();
    assert_eq!(starts, vec![(0, 20), (20, 20), (40, 5)]);
    assert!(s.segments.iter().all(|g| g.quant_only.is_some()));
}

#[test]
fn pipeline_is_deterministic_and_costs_the_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.output.dir = Some(dir.path().to_path_buf());
    let a = pipeline::run_pipeline(&cfg).unwrap();
    let bytes = std::fs::read(dir.path().join("hybrid.ckpt")).unwrap();
    let saved = checkpoint::load(&dir.path().join("hybrid.ckpt")).unwrap();
    assert_eq!(pipeline::model_cost(&saved).unwrap().rc_total, a.rc_total);
    assert!(a.rc_total.is_finite() && a.rc_total > 0.0);

    let b = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(dir.path().join("hybrid.ckpt")).unwrap(), bytes);
    let other = pipeline::run_pipeline(&cfg.with_seed(4)).unwrap();
    assert_ne!(other.hybrid_train, a.hybrid_train);
}

#[test]
fn without_drift_online_updates_do_no_harm() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml")).unwrap();
    let mut cfg = RunConfig::from_toml(&text).unwrap();
    cfg.stream.drift_rate = 0.0;
    let trained = pipeline::train_models(&cfg).unwrap();
    let s = pipeline::run_stream(&cfg, &trained.hybrid, None).unwrap();
    let n = s.frames as f64;
    let acc = |f: fn(&pipeline::Segment) -> f64| s.segments.iter().map(|g| f(g) * g.frames as f64).sum::<f64>() / n;
    let (online, frozen) = (acc(|g| g.online), acc(|g| g.frozen));
    assert!((online - frozen).abs() <= 0.02, "online {online} vs frozen {frozen}");
}
