//! Finite-difference verification of reverse-mode gradients.
//!
//! Every entry of every parameter is perturbed by `±h` and the central
//! difference `(f(θ+h) − f(θ−h)) / 2h` is compared with the tape's gradient
//! using `|a − b| / max(1e-8, |a| + |b|)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Corrupt this op's backward rule for the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Checks `f` with the default step and tolerance.
pub fn grad_check<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(params, GradCheckOptions::default(), f)
}

/// `f` must build a scalar on the given graph from leaves holding `params`.
pub fn grad_check_with<F>(
    params: &[Tensor],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(Error::Param(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        )));
    }

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("objective under gradient check".into()));
        }
        Ok(v)
    };

    let mut g = match opts.fault {
        Some(k) => Graph::with_fault(k),
        None => Graph::new(),
    };
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("objective under gradient check".into()));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut entries = 0;
    for p in 0..params.len() {
        let mut worst: f64 = 0.0;
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[p].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[p].data()[e], numeric));
            entries += 1;
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance: opts.tolerance,
        entries_checked: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let r = grad_check(&[x], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = grad_check(&[x], |g, _| Ok(g.leaf(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn matmul_against_finite_differences() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let r = grad_check_with(
            &[a, b],
            GradCheckOptions {
                step: 1e-5,
                tolerance: 1e-6,
                fault: None,
            },
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            },
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.per_param);
    }

    // Each registered op family, composed into a scalar through a random
    // projection so that no output direction is trivially symmetric.
    #[test]
    fn every_op_passes() {
        let mut rng = Rng::new(11);
        let x = random(&mut rng, &[4, 6]);
        let y = random(&mut rng, &[4, 6]);
        let w = random(&mut rng, &[5, 6]);
        let bias = random(&mut rng, &[5]);
        let gain = random(&mut rng, &[6]);
        let shift = random(&mut rng, &[6]);
        let proj = random(&mut rng, &[4, 5]);
        let proj6 = random(&mut rng, &[4, 6]);
        let params = [x, y, w, bias, gain, shift, proj, proj6];
        let r = grad_check(&params, |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[1])?;
            let m = g.scale(m, 0.7);
            let ln = g.layer_norm(m, v[4], v[5], 1e-5)?;
            let lin = g.matmul_t(ln, v[2])?;
            let lin = g.add_bias(lin, v[3])?;
            let r = g.relu(lin);
            let sm = g.row_softmax(lin)?;
            let c = g.concat(&[r, sm])?;
            let half = g.concat(&[v[6], v[6]])?;
            let p = g.mul(c, half)?;
            let ce = g.smoothed_ce(ln, &[0, 3, 5, 1], 0.5, 0.1)?;
            let extra = g.mul(ln, v[7])?;
            let a = g.sum(p);
            let b = g.sum(extra);
            let t = g.add(a, b)?;
            g.add(t, ce)
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.per_param);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let x = Tensor::from_rows(&[[0.3, -0.2], [1.0, 0.5]]);
        let opts = GradCheckOptions {
            fault: Some(OpKind::Relu),
            ..Default::default()
        };
        let r = grad_check_with(&[x], opts, |g, v| {
            let r = g.relu(v[0]);
            let sq = g.mul(r, r)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::vector(vec![1.0]);
        let opts = GradCheckOptions {
            step: 0.1,
            ..Default::default()
        };
        assert!(grad_check_with(&[x], opts, |g, v| Ok(g.sum(v[0]))).is_err());
    }
}
