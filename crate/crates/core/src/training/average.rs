use std::path::Path;

use crate::data::{symmetric_difference, Checkpoint};
use crate::error::{CheckpointError, Error, Result};
use crate::numerics::Tensor;

/// Elementwise mean, computed as `first + Σ(xᵢ − first)/k` so that identical inputs
/// average to themselves exactly.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let Some(first) = ckpts.first() else {
        return Err(Error::invalid("nothing to average"));
    };
    for c in &ckpts[1..] {
        if !first.paths().eq(c.paths()) {
            return Err(CheckpointError::PathMismatch(symmetric_difference(first.paths(), c.paths())).into());
        }
        for (p, t) in c.iter() {
            let f = first.get(p).expect("same path set");
            if f.shape() != t.shape() {
                return Err(Error::ParamShape {
                    path: p.to_string(),
                    donor: t.shape().to_vec(),
                    target: f.shape().to_vec(),
                });
            }
        }
    }
    let k = ckpts.len() as f64;
    let mut out = Checkpoint::new();
    for (path, base) in first.iter() {
        let mut delta = vec![0.0; base.numel()];
        for c in &ckpts[1..] {
            for ((d, &x), &b) in delta.iter_mut().zip(c.get(path).expect("checked").data()).zip(base.data()) {
                *d += x - b;
            }
        }
        let data = base.data().iter().zip(&delta).map(|(&b, &d)| b + d / k).collect();
        out.insert(path, Tensor::new(base.shape().to_vec(), data)?);
    }
    Ok(out)
}

pub fn average_checkpoint_files<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint> {
    let ckpts = paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ck(pairs: &[(&str, Tensor)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (p, t) in pairs {
            c.insert(*p, t.clone());
        }
        c
    }

    #[test]
    fn identical_inputs_are_exact() {
        let t = Tensor::randn(&[7, 5], 3.0, &mut ChaCha8Rng::seed_from_u64(2));
        let c = ck(&[("w", t.clone())]);
        let avg = average_checkpoints(&vec![c; 10]).unwrap();
        assert!(avg.get("w").unwrap().bitwise_eq(&t));
    }

    #[test]
    fn mean_of_two() {
        let a = ck(&[("x", Tensor::full(&[2], 1.0))]);
        let b = ck(&[("x", Tensor::full(&[2], 3.0))]);
        assert_eq!(average_checkpoints(&[a, b]).unwrap().get("x").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn path_mismatch_names_difference() {
        let a = ck(&[("x", Tensor::zeros(&[1])), ("y", Tensor::zeros(&[1]))]);
        let b = ck(&[("x", Tensor::zeros(&[1])), ("z", Tensor::zeros(&[1]))]);
        let err = average_checkpoints(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("\"y\"") && err.contains("\"z\""), "{err}");
    }
}
