use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Flat map from dotted parameter path to tensor, with a freeze flag per path.
///
/// Paths are the stable naming scheme shared with checkpoint files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Param>,
}

/// `true` when `path` lies under `selector` in the dotted hierarchy. The empty selector
/// matches everything.
pub fn path_matches(path: &str, selector: &str) -> bool {
    selector.is_empty()
        || path == selector
        || (path.starts_with(selector) && path.as_bytes().get(selector.len()) == Some(&b'.'))
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::invalid(format!("duplicate parameter path {path}")));
        }
        self.entries.insert(path, Param { tensor, frozen: false });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.entries.get(path).is_some_and(|p| p.frozen)
    }

    /// Sets the freeze flag on every path under `selector`; returns how many matched.
    pub fn set_frozen(&mut self, selector: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (path, p) in &mut self.entries {
            if path_matches(path, selector) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Number of scalars under `selector`.
    pub fn count(&self, selector: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| path_matches(k, selector))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Snapshot of the tensors under `selector`.
    pub fn to_checkpoint(&self, selector: &str) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (path, p) in &self.entries {
            if path_matches(path, selector) {
                ckpt.insert(path.clone(), p.tensor.clone());
            }
        }
        ckpt
    }

    /// Replaces every tensor from `ckpt`; the path sets and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let ours: Vec<&str> = self.paths().collect();
        let theirs: Vec<&str> = ckpt.paths().collect();
        if ours != theirs {
            let diff = crate::data::symmetric_difference(ours.iter().copied(), theirs.iter().copied());
            return Err(crate::error::CheckpointError::PathMismatch(diff).into());
        }
        for (path, t) in ckpt.iter() {
            self.copy_from(path, t)?;
        }
        Ok(())
    }

    /// Overwrites `path` with `donor`, which must have the same shape.
    pub fn copy_from(&mut self, path: &str, donor: &Tensor) -> Result<()> {
        let target = self.tensor_mut(path)?;
        if target.shape() != donor.shape() {
            return Err(Error::ParamShape {
                path: path.to_string(),
                donor: donor.shape().to_vec(),
                target: target.shape().to_vec(),
            });
        }
        target.data_mut().copy_from_slice(donor.data());
        Ok(())
    }
}

/// Binds parameters into a graph for one forward pass.
///
/// Parameters are added as leaves the first time they are requested; frozen ones (or all,
/// when gradients are not tracked) are constants so backward never visits them.
pub struct ForwardCtx<'g, 'p> {
    pub graph: &'g mut Graph,
    params: &'p ModelParams,
    bound: HashMap<String, NodeId>,
    track_grads: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'g, 'p> ForwardCtx<'g, 'p> {
    pub fn new(graph: &'g mut Graph, params: &'p ModelParams, track_grads: bool) -> Self {
        Self {
            graph,
            params,
            bound: HashMap::new(),
            track_grads,
            dropout: None,
        }
    }

    /// Enables dropout at `rate` for this pass.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    /// Uses an existing node for `path` instead of reading it from the parameter map.
    pub fn bind(&mut self, path: impl Into<String>, id: NodeId) {
        self.bound.insert(path.into(), id);
    }

    pub fn param(&mut self, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(path) {
            return Ok(id);
        }
        let p = self
            .params
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))?;
        let id = self
            .graph
            .leaf(p.tensor.clone().with_requires_grad(self.track_grads && !p.frozen));
        self.bound.insert(path.to_string(), id);
        Ok(id)
    }

    /// Nodes of every parameter bound so far.
    pub fn bindings(&self) -> &HashMap<String, NodeId> {
        &self.bound
    }

    pub fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        match &mut self.dropout {
            Some((rate, rng)) => self.graph.dropout(x, *rate, rng),
            None => Ok(x),
        }
    }
}

/// Xavier-normal matrix.
pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::randn(&[rows, cols], std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_respects_dot_boundaries() {
        assert!(path_matches("encoder.conv.0.w", "encoder.conv"));
        assert!(path_matches("encoder.conv.0.w", ""));
        assert!(path_matches("ctc.w", "ctc.w"));
        assert!(!path_matches("encoder.convx.w", "encoder.conv"));
        assert!(!path_matches("decoder.self.10.w", "decoder.self.1"));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut p = ModelParams::new();
        p.insert("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a.w", Tensor::zeros(&[2])).is_err());
        assert_eq!(p.count("a"), 2);
    }

    #[test]
    fn copy_checks_shape() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::zeros(&[2, 3])).unwrap();
        let err = p.copy_from("x", &Tensor::zeros(&[3, 2])).unwrap_err().to_string();
        assert!(err.contains('x') && err.contains("[3, 2]") && err.contains("[2, 3]"), "{err}");
    }
}
