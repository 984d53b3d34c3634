//! Named parameter registry and seeded initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureGraph, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name -> tensor registry backing a graph. Iteration order is the sorted
/// name order, which keeps every consumer deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("parameter `{name}` missing from store")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::Weights(format!("parameter `{name}` missing from store"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Checks the store holds exactly the graph's parameters at the declared
    /// shapes.
    pub fn validate_against(&self, graph: &ArchitectureGraph) -> Result<()> {
        let specs = graph.parameters();
        for (_, spec) in &specs {
            let tensor = self.get(&spec.name)?;
            if tensor.shape() != spec.shape.as_slice() {
                return Err(Error::Weights(format!(
                    "parameter `{}` has shape {:?}, graph declares {:?}",
                    spec.name,
                    tensor.shape(),
                    spec.shape
                )));
            }
        }
        if specs.len() != self.tensors.len() {
            let declared: Vec<&String> = specs.iter().map(|(_, p)| &p.name).collect();
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| !declared.iter().any(|d| d == k))
                .collect();
            return Err(Error::Weights(format!(
                "store holds {} tensors the graph does not declare: {extra:?}",
                extra.len()
            )));
        }
        Ok(())
    }
}

fn fill(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let draw_uniform = |limit: f64, rng: &mut ChaCha8Rng| -> Tensor {
        let len: usize = spec.shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
        Tensor::new(spec.shape.clone(), data).expect("spec shapes are positive")
    };
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::filled(spec.shape.clone(), 1.0),
        Init::HeUniform => {
            let fan_in = fan_in_of(&spec.shape);
            draw_uniform((6.0 / fan_in as f64).sqrt(), rng)
        }
        Init::GlorotUniform => {
            let (fan_in, fan_out) = (fan_in_of(&spec.shape), fan_out_of(&spec.shape));
            draw_uniform((6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
        }
    }
}

fn fan_in_of(shape: &[usize]) -> usize {
    match shape {
        // Conv kernel [F, C, kh, kw].
        [_, c, kh, kw] => c * kh * kw,
        // Dense weight [D, K].
        [d, _] => *d,
        other => other.iter().product(),
    }
}

fn fan_out_of(shape: &[usize]) -> usize {
    match shape {
        [f, _, kh, kw] => f * kh * kw,
        [_, k] => *k,
        other => other.iter().product(),
    }
}

/// Fills every graph parameter from a fixed seed: He-uniform for conv and
/// relu-facing dense weights, Glorot-uniform for the classifier weights,
/// identity batch-norm (gamma 1, beta 0, stored mean 0, variance 1), zero
/// biases. Draw order is layer order, so a given (graph, seed) pair always
/// produces the same store.
pub fn init_parameters(graph: &ArchitectureGraph, seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (_, spec) in graph.parameters() {
        let tensor = fill(&spec, &mut rng);
        store.insert(spec.name, tensor);
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{assemble_model, Backbone, HeadKind, ModelVariant};

    #[test]
    fn init_is_deterministic_and_complete() {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let a = init_parameters(&graph, 9);
        let b = init_parameters(&graph, 9);
        assert_eq!(a, b);
        a.validate_against(&graph).unwrap();
        let c = init_parameters(&graph, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn batchnorm_starts_as_identity() {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let store = init_parameters(&graph, 0);
        assert!(store.get("norm0.gamma").unwrap().data().iter().all(|v| *v == 1.0));
        assert!(store.get("norm0.beta").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(store.get("norm0.mean").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(store.get("norm0.var").unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn validate_catches_shape_tamper() {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let mut store = init_parameters(&graph, 0);
        store.insert("head.dense2.bias", Tensor::from_slice(&[0.0; 3]));
        let err = store.validate_against(&graph).unwrap_err();
        assert!(err.to_string().contains("head.dense2.bias"));
    }
}
