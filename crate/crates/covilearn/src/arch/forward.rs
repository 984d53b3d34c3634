//! Executes an [`ArchitectureGraph`] against a [`ParameterStore`].
//!
//! Plain forward evaluation is pure and thread-safe over shared immutable
//! graphs and stores. Training splits execution at the head boundary: the
//! frozen prefix runs without a tape (its outputs are constants of the run),
//! and only the trainable head is recorded on a [`GradientTape`].

use std::collections::HashMap;

use crate::arch::{ArchitectureGraph, LayerKind, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::autodiff::{GradientTape, NodeId};
use crate::tensor::{ops, Tensor};

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    /// Dropout draws masks from a per-layer stream derived from this seed.
    Train { seed: u64 },
    /// Stochastic layers are the identity.
    Infer,
}

fn layer_seed(base: u64, layer_idx: usize) -> u64 {
    base.wrapping_add((layer_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn check_input(graph: &ArchitectureGraph, input: &Tensor) -> Result<()> {
    let want = graph.input_shape();
    match input.shape() {
        [_, c, h, w] if [*c, *h, *w] == want => Ok(()),
        other => Err(Error::dimension(format!(
            "graph `{}` expects input [N,{},{},{}], got {:?}",
            graph.variant(),
            want[0],
            want[1],
            want[2],
            other
        ))),
    }
}

/// Runs layers `range` given pre-seeded values, freeing intermediates after
/// their last consumer.
fn execute_range(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    seeded: HashMap<usize, Tensor>,
    range: std::ops::Range<usize>,
    mode: ExecutionMode,
) -> Result<Tensor> {
    let layers = graph.layers();
    let terminal = range.end - 1;
    let mut remaining_uses: HashMap<usize, usize> = HashMap::new();
    for idx in range.clone() {
        for &input in &layers[idx].inputs {
            *remaining_uses.entry(input).or_insert(0) += 1;
        }
    }
    *remaining_uses.entry(terminal).or_insert(0) += 1;

    let mut values: HashMap<usize, Tensor> = seeded;
    for idx in range {
        let layer = &layers[idx];
        let get = |i: usize| -> Result<&Tensor> {
            values.get(&i).ok_or_else(|| {
                Error::dimension(format!(
                    "layer `{}` input {} was not produced in this execution",
                    layer.name, i
                ))
            })
        };
        let param = |field: &str| store.get(&format!("{}.{field}", layer.name));
        let value = match &layer.kind {
            LayerKind::Input => {
                // Seeded by the caller.
                values
                    .get(&idx)
                    .cloned()
                    .ok_or_else(|| Error::argument("input layer value missing"))?
            }
            LayerKind::Conv2d { stride, padding, bias, .. } => {
                let bias_t = if *bias { Some(param("bias")?) } else { None };
                ops::conv2d(get(layer.inputs[0])?, param("kernel")?, bias_t, *stride, *padding)?
            }
            LayerKind::BatchNorm { eps, .. } => ops::batchnorm_infer(
                get(layer.inputs[0])?,
                param("gamma")?,
                param("beta")?,
                param("mean")?,
                param("var")?,
                *eps,
            )?,
            LayerKind::Relu => ops::relu(get(layer.inputs[0])?),
            LayerKind::MaxPool2d { window, stride, padding } => {
                ops::max_pool2d_padded(get(layer.inputs[0])?, *window, *stride, *padding)?.0
            }
            LayerKind::AvgPool2d { window, stride } => {
                ops::avg_pool2d(get(layer.inputs[0])?, *window, *stride)?
            }
            LayerKind::GlobalAvgPool => ops::global_avg_pool(get(layer.inputs[0])?)?,
            LayerKind::ConcatChannels => {
                let tensors: Result<Vec<&Tensor>> = layer.inputs.iter().map(|&i| get(i)).collect();
                ops::concat_channels(&tensors?)?
            }
            LayerKind::Add => ops::add(get(layer.inputs[0])?, get(layer.inputs[1])?)?,
            LayerKind::Dense { .. } => {
                ops::dense_affine(get(layer.inputs[0])?, param("weight")?, param("bias")?)?
            }
            LayerKind::Flatten => ops::flatten(get(layer.inputs[0])?)?,
            LayerKind::Dropout { rate } => match mode {
                ExecutionMode::Infer => get(layer.inputs[0])?.clone(),
                ExecutionMode::Train { seed } => ops::dropout(
                    get(layer.inputs[0])?,
                    *rate,
                    ops::DropoutMode::Train,
                    layer_seed(seed, idx),
                )?,
            },
            LayerKind::Softmax => ops::softmax(get(layer.inputs[0])?)?,
        };
        debug_assert!(value.is_all_finite(), "layer `{}` produced non-finite values", layer.name);
        for &input in &layer.inputs {
            if let Some(uses) = remaining_uses.get_mut(&input) {
                *uses -= 1;
                if *uses == 0 {
                    values.remove(&input);
                }
            }
        }
        values.insert(idx, value);
    }
    values
        .remove(&terminal)
        .ok_or_else(|| Error::argument("execution range is empty"))
}

/// Full forward pass over the whole graph.
pub fn forward(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    input: &Tensor,
    mode: ExecutionMode,
) -> Result<Tensor> {
    check_input(graph, input)?;
    let seeded = HashMap::from([(0, input.clone())]);
    execute_range(graph, store, seeded, 0..graph.layers().len(), mode)
}

/// Runs only the frozen prefix, producing the feature map the head consumes.
/// For a bare backbone this is the whole graph.
pub fn forward_features(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    input: &Tensor,
) -> Result<Tensor> {
    check_input(graph, input)?;
    let seeded = HashMap::from([(0, input.clone())]);
    execute_range(graph, store, seeded, 0..graph.head_start(), ExecutionMode::Infer)
}

/// Runs the trainable head from precomputed features.
pub fn forward_head(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    features: &Tensor,
    mode: ExecutionMode,
) -> Result<Tensor> {
    let boundary = graph.head_start() - 1;
    if graph.head_start() == graph.layers().len() {
        return Ok(features.clone());
    }
    let seeded = HashMap::from([(boundary, features.clone())]);
    execute_range(graph, store, seeded, graph.head_start()..graph.layers().len(), mode)
}

/// Records the head's forward pass on a tape. Learnable parameters of
/// non-frozen layers become named tape parameters; everything else is a
/// constant. Returns the tape node holding the head output.
pub fn head_forward_tape(
    graph: &ArchitectureGraph,
    store: &ParameterStore,
    features: &Tensor,
    train_seed: u64,
    tape: &mut GradientTape,
) -> Result<NodeId> {
    let layers = graph.layers();
    let start = graph.head_start();
    if start == layers.len() {
        return Err(Error::argument("graph has no head layers to train"));
    }
    let boundary = start - 1;
    let mut nodes: HashMap<usize, NodeId> = HashMap::new();
    nodes.insert(boundary, tape.constant(features.clone()));

    for (idx, layer) in layers.iter().enumerate().skip(start) {
        let input_node = |i: usize, nodes: &HashMap<usize, NodeId>| -> Result<NodeId> {
            nodes.get(&i).copied().ok_or_else(|| {
                Error::dimension(format!(
                    "head layer `{}` references layer {} outside the head",
                    layer.name, i
                ))
            })
        };
        let param = |field: &str, learnable: bool, tape: &mut GradientTape| -> Result<NodeId> {
            let name = format!("{}.{field}", layer.name);
            let value = store.get(&name)?.clone();
            Ok(if learnable && !layer.frozen {
                tape.parameter(name, value)
            } else {
                tape.constant(value)
            })
        };
        let node = match &layer.kind {
            LayerKind::Input => return Err(Error::argument("head cannot contain an input layer")),
            LayerKind::Conv2d { stride, padding, bias, .. } => {
                let x = input_node(layer.inputs[0], &nodes)?;
                let kernel = param("kernel", true, tape)?;
                let bias_node = if *bias { Some(param("bias", true, tape)?) } else { None };
                tape.conv2d(x, kernel, bias_node, *stride, *padding)?
            }
            LayerKind::BatchNorm { eps, .. } => {
                let x = input_node(layer.inputs[0], &nodes)?;
                let gamma = param("gamma", true, tape)?;
                let beta = param("beta", true, tape)?;
                let mean = param("mean", false, tape)?;
                let var = param("var", false, tape)?;
                tape.batchnorm_infer(x, gamma, beta, mean, var, *eps)?
            }
            LayerKind::Relu => {
                let x = input_node(layer.inputs[0], &nodes)?;
                tape.relu(x)
            }
            LayerKind::MaxPool2d { window, stride, padding } => {
                let x = input_node(layer.inputs[0], &nodes)?;
                tape.max_pool2d(x, *window, *stride, *padding)?
            }
            LayerKind::AvgPool2d { window, stride } => {
                let x = input_node(layer.inputs[0], &nodes)?;
                tape.avg_pool2d(x, *window, *stride)?
            }
            LayerKind::GlobalAvgPool => {
                let x = input_node(layer.inputs[0], &nodes)?;
                tape.global_avg_pool(x)?
            }
            LayerKind::ConcatChannels => {
                let ids: Result<Vec<NodeId>> =
                    layer.inputs.iter().map(|&i| input_node(i, &nodes)).collect();
                tape.concat_channels(&ids?)?
            }
            LayerKind::Add => {
                let lhs = input_node(layer.inputs[0], &nodes)?;
                let rhs = input_node(layer.inputs[1], &nodes)?;
                tape.add(lhs, rhs)?
            }
            LayerKind::Dense { .. } => {
                let x = input_node(layer.inputs[0], &nodes)?;
                let weight = param("weight", true, tape)?;
                let bias = param("bias", true, tape)?;
                tape.dense_affine(x, weight, bias)?
            }
            LayerKind::Flatten => {
                let x = input_node(layer.inputs[0], &nodes)?;
                tape.flatten(x)?
            }
            LayerKind::Dropout { rate } => {
                let x = input_node(layer.inputs[0], &nodes)?;
                tape.dropout(x, *rate, ops::DropoutMode::Train, layer_seed(train_seed, idx))?
            }
            LayerKind::Softmax => {
                let x = input_node(layer.inputs[0], &nodes)?;
                tape.softmax(x)?
            }
        };
        nodes.insert(idx, node);
    }
    Ok(nodes[&(layers.len() - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{assemble_model, init_parameters, Backbone, HeadKind, ModelVariant};

    fn micro_setup() -> (ArchitectureGraph, ParameterStore, Tensor) {
        let graph = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
        let store = init_parameters(&graph, 1);
        let data: Vec<f64> = (0..2 * 3 * 32 * 32).map(|i| (i % 97) as f64 / 96.0).collect();
        let input = Tensor::new(vec![2, 3, 32, 32], data).unwrap();
        (graph, store, input)
    }

    #[test]
    fn forward_produces_probability_rows() {
        let (graph, store, input) = micro_setup();
        let out = forward(&graph, &store, &input, ExecutionMode::Infer).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        for row in 0..2 {
            let sum: f64 = out.data()[row * 2..(row + 1) * 2].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn declared_shapes_match_executed_shapes() {
        let (graph, store, input) = micro_setup();
        // Spot-check the executed terminal shape against propagation; the
        // per-layer agreement is implied because execution threads each
        // value into the next kernel's shape checks.
        let declared = graph.output_shape(2).unwrap();
        let out = forward(&graph, &store, &input, ExecutionMode::Infer).unwrap();
        assert_eq!(out.shape(), declared.as_slice());
    }

    #[test]
    fn split_execution_equals_full_forward() {
        let (graph, store, input) = micro_setup();
        let full = forward(&graph, &store, &input, ExecutionMode::Infer).unwrap();
        let features = forward_features(&graph, &store, &input).unwrap();
        let head = forward_head(&graph, &store, &features, ExecutionMode::Infer).unwrap();
        assert_eq!(full.data(), head.data());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let (graph, store, input) = micro_setup();
        let features = forward_features(&graph, &store, &input).unwrap();
        let mut tape = GradientTape::new();
        let out = head_forward_tape(&graph, &store, &features, 7, &mut tape).unwrap();
        let plain =
            forward_head(&graph, &store, &features, ExecutionMode::Train { seed: 7 }).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn wrong_input_shape_is_a_dimension_error() {
        let (graph, store, _) = micro_setup();
        let bad = Tensor::zeros(vec![1, 3, 16, 16]);
        assert!(matches!(
            forward(&graph, &store, &bad, ExecutionMode::Infer),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn concurrent_forward_is_identical() {
        let (graph, store, input) = micro_setup();
        let expected = forward(&graph, &store, &input, ExecutionMode::Infer).unwrap();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..8)
                .map(|_| {
                    scope.spawn(|| forward(&graph, &store, &input, ExecutionMode::Infer).unwrap())
                })
                .collect();
            for handle in handles {
                assert_eq!(handle.join().unwrap().data(), expected.data());
            }
        });
    }
}
