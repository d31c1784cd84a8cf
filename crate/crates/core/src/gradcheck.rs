//! Central finite-difference checks of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn scalarize(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights.reshape(g.shape(out))?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Compares the reverse-mode gradient of `f` at `inputs` against central
/// differences with step `h`. Non-scalar outputs are reduced with fixed
/// random weights so every output element contributes.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], weights: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = scalarize(&mut g, out, weights)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let n_out = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n_out as u64);
    let weights = Tensor::randn(&[n_out], 1.0, &mut rng);
    let loss = scalarize(&mut g, out, &weights)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut vals = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..vals[i].len() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + h;
            let up = eval(&vals, &weights)?;
            vals[i].data_mut()[j] = orig - h;
            let down = eval(&vals, &weights)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(grads[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(Mismatch {
                    input: i,
                    index: j,
                    analytic: grads[j],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = check(&[x], 1e-5, |g, v| Ok(g.square(v[0]))).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // round_ste claims identity gradient; the true derivative is zero almost everywhere
        let x = Tensor::from_vec(vec![0.31, 0.62]);
        let r = check(&[x], 1e-5, |g, v| Ok(g.round_ste(v[0], 7.0))).unwrap();
        assert!(r.max_rel_err > 0.5);
    }
}
