//! Dense `f64` tensors, a reverse-mode tape, log-domain helpers and a finite-difference
//! gradient oracle.

mod grad_check;
mod graph;
pub mod logspace;
mod tensor;

pub use grad_check::{grad_check, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{Graph, Mask, NodeId};
pub use logspace::{is_log_zero, log_add, log_mul, log_sum_exp, LOG_ZERO};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Reduces any node to a scalar through a fixed random projection so every output
    /// element contributes a distinct weight.
    fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId, crate::Error> {
        let shape = g.shape(x).to_vec();
        let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
        let p = g.mul(x, w)?;
        g.sum(p)
    }

    fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, crate::Error>) {
        let report = grad_check(f, inputs, H, TOL).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn matmul_grad() {
        let mut r = rng(1);
        let a = Tensor::randn(&[3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 3], 1.0, &mut r);
        let report = grad_check(
            |g, ids| {
                let c = g.matmul(ids[0], ids[1])?;
                project(g, c, 11)
            },
            &[a, b],
            H,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn elementwise_and_shape_ops_grad() {
        let mut r = rng(2);
        let a = Tensor::randn(&[4, 6], 1.0, &mut r);
        let b = Tensor::randn(&[4, 6], 1.0, &mut r);
        let bias = Tensor::randn(&[6], 1.0, &mut r);
        check(&[a.clone(), b.clone(), bias], |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let m = g.mul(s, ids[1])?;
            let m = g.add_bias(m, ids[2])?;
            let m = g.scale(m, 0.7)?;
            let t = g.transpose(m)?;
            project(g, t, 3)
        });
        check(&[a.clone()], |g, ids| {
            let x = g.gelu(ids[0])?;
            project(g, x, 4)
        });
        check(&[a.clone(), b], |g, ids| {
            let l = g.slice_cols(ids[0], 1, 3)?;
            let r = g.slice_cols(ids[1], 0, 2)?;
            let c = g.concat_cols(&[r, l, ids[0]])?;
            project(g, c, 5)
        });
        check(&[a], |g, ids| {
            let u = g.unfold_frames(ids[0], 3, 2, 1)?;
            project(g, u, 6)
        });
    }

    #[test]
    fn softmax_variants_grad() {
        let mut r = rng(3);
        let x3 = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        for axis in 0..3 {
            check(&[x3.clone()], |g, ids| {
                let y = g.softmax(ids[0], axis, Mask::None)?;
                project(g, y, 7)
            });
        }
        let x2 = Tensor::randn(&[4, 4], 1.0, &mut r);
        check(&[x2.clone()], |g, ids| {
            let y = g.softmax(ids[0], 1, Mask::Causal)?;
            project(g, y, 8)
        });
        check(&[x2], |g, ids| {
            let y = g.log_softmax(ids[0])?;
            project(g, y, 9)
        });
    }

    #[test]
    fn layer_norm_grad() {
        let mut r = rng(4);
        let x = Tensor::randn(&[3, 5], 1.0, &mut r);
        let gain = Tensor::randn(&[5], 1.0, &mut r);
        let bias = Tensor::randn(&[5], 1.0, &mut r);
        let report = grad_check(
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                project(g, y, 10)
            },
            &[x, gain, bias],
            H,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gather_and_losses_grad() {
        let mut r = rng(5);
        let table = Tensor::randn(&[5, 3], 1.0, &mut r);
        check(&[table], |g, ids| {
            let e = g.gather_rows(ids[0], &[4, 0, 4, 2])?;
            project(g, e, 12)
        });
        let logits = Tensor::randn(&[3, 4], 1.0, &mut r);
        check(&[logits.clone()], |g, ids| g.cross_entropy(ids[0], &[1, 3, 0], 0.1));
        let logits = Tensor::randn(&[5, 4], 1.0, &mut r);
        check(&[logits], |g, ids| {
            let lp = g.log_softmax(ids[0])?;
            g.ctc_loss(lp, &[0, 2])
        });
    }

    #[test]
    fn shared_input_matches_fused_function() {
        // y = softmax(x) ⊙ x then summed: x is consumed by two ops; the fused scalar
        // function's finite differences must agree with the accumulated gradient.
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng(6));
        check(&[x], |g, ids| {
            let s = g.softmax(ids[0], 1, Mask::None)?;
            let p = g.mul(s, ids[0])?;
            g.sum(p)
        });
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(z, &[2], 0.0).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let l = g.cross_entropy(z, &[2], 0.1).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let z = g.constant(Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap());
        let l = g.cross_entropy(z, &[1], 0.0).unwrap();
        assert!(g.value(l).item() < 1e-20);
        assert!(g.cross_entropy(z, &[3], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            data in prop::collection::vec(-15.0f64..15.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor::new(vec![3, 4], data.clone()).unwrap();
            let s = x.softmax(1).unwrap();
            for row in s.data().chunks(4) {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let shifted = Tensor::new(vec![3, 4], data.iter().map(|v| v + shift).collect()).unwrap();
            prop_assert!(shifted.softmax(1).unwrap().max_abs_diff(&s) < 1e-12);
        }
    }
}
