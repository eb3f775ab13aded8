//! Finite-difference verification of analytic gradients.
//!
//! Both sides are evaluated in `f64`: the analytic gradient comes from a
//! `Graph<f64>` running the same op code used for training, the numeric
//! one from a fourth-order central difference
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Which elements of each input get perturbed.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// `None` checks every element; `Some(k)` checks a seeded sample of at
    /// most `k` elements per input tensor.
    pub sample_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn exhaustive(eps: f64) -> Self {
        Self {
            eps,
            sample_per_input: None,
            seed: 0,
        }
    }

    pub fn sampled(eps: f64, per_input: usize, seed: u64) -> Self {
        Self {
            eps,
            sample_per_input: Some(per_input),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[(Vec<usize>, Vec<f64>)], requires_grad: bool) -> Result<(Graph<f64>, Vec<Var>, Var), TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .map(|(shape, data)| g.leaf_raw(shape.clone(), data.clone(), requires_grad))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

fn scalar_of<F>(f: &F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let (g, _, out) = evaluate(f, inputs, false)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::Rank {
            op: "grad_check",
            expected: "scalar function",
            shape: g.shape(out).to_vec(),
        });
    }
    Ok(g.item(out))
}

/// Maximum relative error between analytic and numeric gradients of the
/// scalar function `f` at `inputs`. Reports; never asserts.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheck) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut point: Vec<(Vec<usize>, Vec<f64>)> = inputs
        .iter()
        .map(|t| (t.shape().to_vec(), t.data().iter().map(|&x| x as f64).collect()))
        .collect();

    let (mut g, vars, out) = evaluate(&f, &point, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&point)
        .map(|(&v, (_, data))| g.grad(v).map_or_else(|| alloc::vec![0.0; data.len()], <[f64]>::to_vec))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.eps;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for input in 0..point.len() {
        let len = point[input].1.len();
        let elements: Vec<usize> = match cfg.sample_per_input {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for e in elements {
            let x0 = point[input].1[e];
            let mut at = |dx: f64| -> Result<f64, TensorError> {
                point[input].1[e] = x0 + dx;
                scalar_of(&f, &point)
            };
            let fp2 = at(2.0 * h)?;
            let fp1 = at(h)?;
            let fm1 = at(-h)?;
            let fm2 = at(-2.0 * h)?;
            point[input].1[e] = x0;
            let numeric = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
            let err = relative_error(analytic[input][e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (input, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.999) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn matmul_sum_gradient() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1.5, -0.2, 0.4, 0.9, -1.1, 0.6]).unwrap();
        let r = grad_check(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            GradCheck::exhaustive(1e-3),
        )
        .unwrap();
        assert_eq!(r.checked, 12);
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // A function whose graph deliberately disagrees with its value:
        // value uses x*x but we differentiate through a constant copy.
        let x = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
        let r = grad_check(
            |g, v| {
                let c = g.leaf_raw(vec![2], g.value(v[0]).to_vec(), false)?;
                let sq = g.mul(v[0], c)?;
                Ok(g.sum(sq))
            },
            &[x],
            GradCheck::exhaustive(1e-3),
        )
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
