//! A fast built-in invariant suite, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Architecture, LayerSpec};
use crate::autodiff::{Graph, Mode, RunningStats};
use crate::checkpoint;
use crate::cost::{self, LayerCostInput};
use crate::gradcheck;
use crate::model::{BranchKind, BranchSet, ForwardOptions, HybridModel, ModelSettings};
use crate::prune::{self, ChannelGate};
use crate::quant::{self, Bits, IntCodeTensor, NormTargets};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> std::result::Result<String, String>;

fn ok_if(cond: bool, detail: String) -> std::result::Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s(e: crate::Error) -> String {
    e.to_string()
}

fn cost_additivity(_: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let arch = Architecture::default_toy();
    let r = cost::report_for_architecture(&arch, BranchSet::Hybrid).map_err(e2s)?;
    let worst = r
        .rows
        .iter()
        .map(|row| (row.rc_hybrid - row.rc_prune.unwrap_or(0.0) - row.rc_quant.unwrap_or(0.0)).abs())
        .fold(0.0, f64::max);
    ok_if(worst < 1e-12, format!("max |hybrid - prune - quant| = {worst:e}"))
}

fn bops_closed_form(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let c_in = rng.gen_range(1..=512);
        let k = rng.gen_range(1..=7);
        let l = LayerCostInput {
            name: "l".into(),
            c_in,
            c_out: rng.gen_range(1..=512),
            kernel: k,
            spatial_out: (rng.gen_range(1..=64), rng.gen_range(1..=64)),
            b_a: Bits::Fixed(4),
            b_w: Bits::Fixed(4),
            keep_in: 1.0,
            keep_out: 1.0,
        };
        let got = cost::layer_bops(&l).map_err(e2s)? / cost::layer_bops(&l.baseline()).map_err(e2s)?;
        let lg = ((c_in * k * k) as f64).log2();
        worst = worst.max((got - (24.0 + lg) / (1088.0 + lg)).abs());
    }
    ok_if(worst < 1e-12, format!("max deviation {worst:e}"))
}

fn gradients(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, rng);
        let r = gradcheck::check(&[x, w], 1e-5, |g, v| g.conv2d(v[0], v[1], 2, 1)).map_err(e2s)?;
        worst = worst.max(r.max_rel_err);
        let x = Tensor::randn(&[4, 3, 2, 2], 1.0, rng);
        let gamma = Tensor::randn(&[3], 1.0, rng);
        let beta = Tensor::randn(&[3], 1.0, rng);
        let r = gradcheck::check(&[x, gamma, beta], 1e-5, |g, v| {
            let mut stats = RunningStats::new(3);
            g.batchnorm(v[0], v[1], v[2], 1e-5, &mut stats, Mode::Train)
        })
        .map_err(e2s)?;
        worst = worst.max(r.max_rel_err);
        let logits = Tensor::randn(&[5], 1.0, rng);
        let noise: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = gradcheck::check(&[logits], 1e-5, |g, v| Ok(prune::relaxed_mask_on(g, v[0], &noise, 0.7).soft))
            .map_err(e2s)?;
        worst = worst.max(r.max_rel_err);
        // Weight normalization on weights away from zero, where |w| is smooth.
        let w = Tensor::randn(&[12], 1.0, rng).map(|v| if v.abs() < 0.01 { 0.5 } else { v });
        let c = Tensor::scalar(rng.gen_range(0.3..1.0));
        let d = Tensor::scalar(rng.gen_range(0.1..0.5));
        let targets = NormTargets::default();
        let r = gradcheck::check(&[w, c, d], 1e-5, |g, v| quant::loss_qw(g, &[(v[0], v[1], v[2])], &targets))
            .map_err(e2s)?;
        worst = worst.max(r.max_rel_err);
    }
    ok_if(worst < 1e-4, format!("max relative error {worst:e}"))
}

fn code_ranges(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    for bits in 2..=5u32 {
        let w = Tensor::randn(&[10_000], 1.0, rng);
        let qp = quant::QuantParams::init_from_weights(&w, Bits::Fixed(bits), Bits::Fixed(bits));
        let codes = quant::quantize_weight(&quant::transform_weight(&w, &qp), bits).map_err(e2s)?;
        let l = quant::weight_levels(bits) as i32;
        if codes.codes.iter().any(|&c| c < -l || c > l) || codes.distinct_codes() > (1 << bits) - 1 {
            return Err(format!("weight codes out of range at {bits} bits"));
        }
        let a = Tensor::randn(&[10_000], 1.0, rng);
        let codes = quant::quantize_activation(&quant::transform_activation(&a, &qp), bits).map_err(e2s)?;
        let l = quant::activation_levels(bits) as i32;
        if codes.codes.iter().any(|&c| c < 0 || c > l) || codes.distinct_codes() > (1 << bits) {
            return Err(format!("activation codes out of range at {bits} bits"));
        }
    }
    Ok("2..5 bits".into())
}

fn fixed_point(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    for _ in 0..50 {
        let (c_in, c_out, k, h) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(3..7));
        let (la, lw) = (15i64, 7i64);
        let a = IntCodeTensor {
            shape: vec![1, c_in, h, h],
            codes: (0..c_in * h * h).map(|_| rng.gen_range(0..=la as i32)).collect(),
            scale: 1.0 / la as f64,
            levels: la,
            zero_symmetric: false,
        };
        let w = IntCodeTensor {
            shape: vec![c_out, c_in, k, k],
            codes: (0..c_out * c_in * k * k).map(|_| rng.gen_range(-lw as i32..=lw as i32)).collect(),
            scale: 1.0 / lw as f64,
            levels: lw,
            zero_symmetric: true,
        };
        let got = quant::fixedpoint_conv2d(&a, &w, 1, 0).map_err(e2s)?;
        // Direct integer convolution, rounded once.
        let ho = h - k + 1;
        for o in 0..c_out {
            for y in 0..ho {
                for x in 0..ho {
                    let mut acc = 0i64;
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += a.codes[(c * h + y + ky) * h + x + kx] as i64
                                    * w.codes[((o * c_in + c) * k + ky) * k + kx] as i64;
                            }
                        }
                    }
                    let want = acc as f64 / (la * lw) as f64;
                    if got.data()[(o * ho + y) * ho + x] != want {
                        return Err(format!("mismatch at ({o},{y},{x})"));
                    }
                }
            }
        }
    }
    Ok("50 instances".into())
}

fn gumbel_frequency(_: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let n = 20_000;
    let mut gate = ChannelGate::from_probs(&[0.3], 1.0, 11).map_err(e2s)?;
    let hits: f64 = (0..n).map(|_| gate.sample_mask().hard[0]).sum();
    let p = hits / n as f64;
    let sigma = (0.3f64 * 0.7 / n as f64).sqrt();
    ok_if((p - 0.3).abs() <= 4.0 * sigma, format!("P(keep) = {p:.4} for b = 0.3"))
}

fn tiny_arch() -> Architecture {
    let b4 = Bits::Fixed(4);
    Architecture {
        input: [1, 8, 8],
        n_classes: 3,
        layers: vec![
            LayerSpec::conv("c1", 1, 4, 3, 1, 0).bits(Bits::Full, b4).prunable(true),
            LayerSpec::batchnorm("b1"),
            LayerSpec::relu("r1"),
            LayerSpec::conv("c2", 4, 5, 3, 2, 0).bits(b4, b4).prunable(true),
            LayerSpec::relu("r2"),
            LayerSpec::linear("f1", 5 * 2 * 2, 6).prunable(true),
            LayerSpec::relu("r3"),
            LayerSpec::linear("f2", 6, 3),
        ],
    }
}

fn random_gates(m: &mut HybridModel, rng: &mut ChaCha8Rng) {
    for gate in m.gates_mut() {
        let mut probs: Vec<f64> = (0..gate.channels()).map(|_| rng.gen_range(0.05..0.95)).collect();
        probs[0] = 0.9;
        *gate = ChannelGate::from_probs(&probs, 1.0, gate.seed()).expect("valid probabilities");
    }
}

fn compaction(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    for i in 0..10 {
        let mut m = HybridModel::new(tiny_arch(), ModelSettings::default(), BranchSet::Hybrid, i).map_err(e2s)?;
        random_gates(&mut m, rng);
        let x = Tensor::randn(&[3, 1, 8, 8], 1.0, rng);
        let want = m.logits(&x).map_err(e2s)?;
        let got = m.compact().map_err(e2s)?.logits(&x).map_err(e2s)?;
        if got != want {
            return Err(format!("model {i}: compacted logits differ"));
        }
    }
    Ok("10 models".into())
}

fn decomposition(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let mut m = HybridModel::new(tiny_arch(), ModelSettings::default(), BranchSet::Hybrid, 3).map_err(e2s)?;
    random_gates(&mut m, rng);
    let x = Tensor::randn(&[4, 1, 8, 8], 1.0, rng);
    let opts = ForwardOptions::eval();
    let mut g = Graph::new();
    let out = m.forward(&mut g, &x, &opts).map_err(e2s)?;
    let q = m.branch_features(BranchKind::Quant, &x, &opts).map_err(e2s)?.unwrap();
    let p = m.branch_features(BranchKind::Prune, &x, &opts).map_err(e2s)?.unwrap();
    let sum: Vec<f64> = q.data().iter().zip(p.data()).map(|(a, b)| a + b).collect();
    ok_if(g.value(out.fused).data() == sum.as_slice(), "fused == quant + prune".into())
}

fn checkpoint_round_trip(rng: &mut ChaCha8Rng) -> std::result::Result<String, String> {
    let mut m = HybridModel::new(tiny_arch(), ModelSettings::default(), BranchSet::Hybrid, 5).map_err(e2s)?;
    random_gates(&mut m, rng);
    let x = Tensor::randn(&[2, 1, 8, 8], 1.0, rng);
    let want = m.logits(&x).map_err(e2s)?;
    let bytes = checkpoint::to_bytes(&m).map_err(e2s)?;
    let mut back = checkpoint::from_bytes(&bytes).map_err(e2s)?;
    ok_if(back.logits(&x).map_err(e2s)? == want, format!("{} bytes", bytes.len()))
}

const CHECKS: [(&str, Check); 9] = [
    ("cost additivity", cost_additivity),
    ("bops closed form", bops_closed_form),
    ("gradients", gradients),
    ("quantizer code ranges", code_ranges),
    ("fixed-point conv", fixed_point),
    ("gumbel keep frequency", gumbel_frequency),
    ("channel compaction", compaction),
    ("hybrid decomposition", decomposition),
    ("checkpoint round trip", checkpoint_round_trip),
];

/// Runs every check with a fixed seed.
pub fn run(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f(&mut rng) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run(0) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
