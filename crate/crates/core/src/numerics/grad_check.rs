//! Central finite-difference oracle for reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_ERR_FLOOR)`, so
/// gradient entries that are zero up to rounding compare absolutely at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, scalar index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar of every input.
///
/// `f` receives a fresh graph and one leaf per input, in order.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::invalid(format!("grad_check: function value {v} is not finite")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &ids)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::invalid("grad_check: function value is not finite"));
    }
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
    };
    let mut work = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for k in 0..inputs[which].numel() {
            let orig = inputs[which].data()[k];
            work[which].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let abs = (analytic[k] - numeric).abs();
            let rel = abs / analytic[k].abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (which, k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn linear_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.1, &mut rng);
        let report = grad_check(
            |g, ids| {
                let z = g.matmul(ids[0], ids[1])?;
                let z = g.add_bias(z, ids[2])?;
                g.cross_entropy(z, &[0, 2, 1, 1], 0.0)
            },
            &[x, w, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn rejects_non_finite_function() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = grad_check(|g, ids| g.scale(ids[0], f64::NAN), &[x], 1e-5, 1e-6);
        assert!(r.is_err());
    }
}
