//! Declarative layer graphs for the four full-size classifier variants plus
//! the `micro` variant used for fast end-to-end runs.
//!
//! A graph is an ordered DAG of [`LayerSpec`]s: every layer references only
//! earlier layers, so vector order is execution order. Output shapes are
//! fully determined by input shapes and layer attributes before anything
//! runs, and parameter accounting is derived from the same attributes.
//!
//! Parameter counting follows the convention of the framework the published
//! totals come from: batch-norm layers contribute four per-channel tensors
//! (gamma, beta, and the stored mean/variance), with the statistics never
//! trainable.

mod builders;
mod forward;
mod init;
mod weights;

pub use builders::{
    assemble_model, build_backbone, build_head, Backbone, GraphFragment, HeadKind, ModelVariant,
    DEFAULT_HEAD_DROPOUT,
};
pub use forward::{forward, forward_features, forward_head, head_forward_tape, ExecutionMode};
pub use init::{init_parameters, ParameterStore};
pub use weights::{
    deserialize_weights, read_weights_file, serialize_weights, write_weights_file, WEIGHTS_MAGIC,
};

use crate::error::{Error, Result};
use crate::tensor::ops::Padding;

/// How a parameter tensor is filled when no weights file is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    GlorotUniform,
    Zeros,
    Ones,
}

/// Layer operation plus the attributes that fix its shapes and parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Graph source; carries no parameters.
    Input,
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        init: Init,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    ConcatChannels,
    Add,
    Dense {
        in_features: usize,
        out_features: usize,
        init: Init,
    },
    Flatten,
    Dropout {
        rate: f64,
    },
    Softmax,
}

/// One parameter tensor owned by a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    /// Fully qualified name, `<layer>.<field>`.
    pub name: String,
    pub shape: Vec<usize>,
    /// Stored batch-norm statistics are parameters for accounting purposes
    /// but are never learnable.
    pub learnable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A named node in the graph: operation, predecessors, freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Indices of earlier layers feeding this one.
    pub inputs: Vec<usize>,
    pub frozen: bool,
}

impl LayerSpec {
    /// Parameter tensors declared by this layer, in a fixed order.
    pub fn parameters(&self) -> Vec<ParamSpec> {
        let p = |field: &str, shape: Vec<usize>, learnable: bool, init: Init| ParamSpec {
            name: format!("{}.{}", self.name, field),
            shape,
            learnable,
            init,
        };
        match &self.kind {
            LayerKind::Conv2d { in_channels, filters, kernel, bias, init, .. } => {
                let mut out = vec![p(
                    "kernel",
                    vec![*filters, *in_channels, *kernel, *kernel],
                    true,
                    *init,
                )];
                if *bias {
                    out.push(p("bias", vec![*filters], true, Init::Zeros));
                }
                out
            }
            LayerKind::BatchNorm { channels, .. } => vec![
                p("gamma", vec![*channels], true, Init::Ones),
                p("beta", vec![*channels], true, Init::Zeros),
                p("mean", vec![*channels], false, Init::Zeros),
                p("var", vec![*channels], false, Init::Ones),
            ],
            LayerKind::Dense { in_features, out_features, init } => vec![
                p("weight", vec![*in_features, *out_features], true, *init),
                p("bias", vec![*out_features], true, Init::Zeros),
            ],
            _ => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(ParamSpec::count).sum()
    }
}

/// Ordered layer DAG with a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureGraph {
    layers: Vec<LayerSpec>,
    /// Per-sample input shape `[C, H, W]`; the batch axis is free.
    input_shape: [usize; 3],
    /// Canonical variant string, e.g. `densenet121-gapdense` or `micro`.
    variant: String,
    /// Index of the first trainable (head) layer; equals `layers.len()` for a
    /// bare backbone.
    head_start: usize,
}

impl ArchitectureGraph {
    pub(crate) fn new(input_shape: [usize; 3], variant: impl Into<String>) -> Self {
        ArchitectureGraph {
            layers: vec![LayerSpec {
                name: "input".into(),
                kind: LayerKind::Input,
                inputs: Vec::new(),
                frozen: true,
            }],
            input_shape,
            variant: variant.into(),
            head_start: 1,
        }
    }

    pub(crate) fn push(&mut self, layer: LayerSpec) -> Result<usize> {
        if self.layers.iter().any(|l| l.name == layer.name) {
            return Err(Error::argument(format!(
                "duplicate layer name `{}`",
                layer.name
            )));
        }
        let idx = self.layers.len();
        for &i in &layer.inputs {
            if i >= idx {
                return Err(Error::argument(format!(
                    "layer `{}` references layer {} before it exists",
                    layer.name, i
                )));
            }
        }
        self.layers.push(layer);
        Ok(idx)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    pub(crate) fn set_head_start(&mut self, idx: usize) {
        self.head_start = idx;
    }

    pub(crate) fn set_variant(&mut self, variant: impl Into<String>) {
        self.variant = variant.into();
    }

    /// All parameter tensors in layer order.
    pub fn parameters(&self) -> Vec<(usize, ParamSpec)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.parameters().into_iter().map(move |p| (i, p)))
            .collect()
    }

    /// Sum of all parameter-shape products, frozen or not.
    pub fn total_parameters(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    /// Sum over non-frozen layers of their learnable parameters.
    pub fn trainable_parameters(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.frozen)
            .flat_map(|l| l.parameters())
            .filter(|p| p.learnable)
            .map(|p| p.count())
            .sum()
    }

    /// Propagates shapes from the input through every layer for batch size
    /// `batch`. Fails if any layer's attributes disagree with what its
    /// predecessors produce.
    pub fn output_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<&Vec<usize>> = layer.inputs.iter().map(|&i| &shapes[i]).collect();
            let shape = propagate(layer, &ins, batch, self.input_shape)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Shape of the final layer's output for batch size `batch`.
    pub fn output_shape(&self, batch: usize) -> Result<Vec<usize>> {
        Ok(self.output_shapes(batch)?.pop().expect("graph has an input layer"))
    }

    /// Human-readable per-layer parameter table.
    pub fn parameter_table(&self) -> String {
        let shapes = self.output_shapes(1).ok();
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>6} {:<18} {:>12} {:>9}\n",
            "layer", "frozen", "output", "params", "trainable"
        ));
        for (i, layer) in self.layers.iter().enumerate() {
            let shape = shapes
                .as_ref()
                .map(|s| format!("{:?}", s[i]))
                .unwrap_or_else(|| "?".into());
            let params = layer.parameter_count();
            let trainable: usize = if layer.frozen {
                0
            } else {
                layer.parameters().iter().filter(|p| p.learnable).map(|p| p.count()).sum()
            };
            out.push_str(&format!(
                "{:<28} {:>6} {:<18} {:>12} {:>9}\n",
                layer.name,
                if layer.frozen { "yes" } else { "no" },
                shape,
                params,
                trainable
            ));
        }
        out.push_str(&format!(
            "total {} | trainable {} | frozen {}\n",
            self.total_parameters(),
            self.trainable_parameters(),
            self.total_parameters() - self.trainable_parameters()
        ));
        out
    }
}

fn expect_nchw<'a>(name: &str, shape: &'a [usize]) -> Result<(&'a [usize], usize, usize, usize)> {
    match shape {
        [n_and_c @ .., h, w] if n_and_c.len() == 2 => Ok((n_and_c, n_and_c[1], *h, *w)),
        other => Err(Error::dimension(format!(
            "layer `{name}` expects a rank-4 input, predecessor produces {other:?}"
        ))),
    }
}

fn pool_extent(extent: usize, window: usize, stride: usize, padding: usize) -> usize {
    let padded = extent + 2 * padding;
    if padded >= window {
        (padded - window) / stride + 1
    } else {
        1
    }
}

fn propagate(
    layer: &LayerSpec,
    ins: &[&Vec<usize>],
    batch: usize,
    input_shape: [usize; 3],
) -> Result<Vec<usize>> {
    let name = &layer.name;
    let one = || -> Result<&Vec<usize>> {
        ins.first().copied().ok_or_else(|| {
            Error::dimension(format!("layer `{name}` is missing its input edge"))
        })
    };
    match &layer.kind {
        LayerKind::Input => Ok(vec![batch, input_shape[0], input_shape[1], input_shape[2]]),
        LayerKind::Conv2d { in_channels, filters, kernel, stride, padding, .. } => {
            let (nc, c, h, w) = expect_nchw(name, one()?)?;
            if c != *in_channels {
                return Err(Error::dimension(format!(
                    "layer `{name}` expects {in_channels} channels, predecessor produces {c}"
                )));
            }
            let span = |extent: usize| -> Result<usize> {
                let (before, after) = crate::tensor::ops::padding_extents(*padding, extent, *kernel, *stride);
                let padded = extent + before + after;
                if padded < *kernel {
                    return Err(Error::dimension(format!(
                        "layer `{name}` kernel {kernel} exceeds padded extent {padded}"
                    )));
                }
                Ok((padded - kernel) / stride + 1)
            };
            Ok(vec![nc[0], *filters, span(h)?, span(w)?])
        }
        LayerKind::BatchNorm { channels, .. } => {
            let shape = one()?;
            let (_, c, _, _) = expect_nchw(name, shape)?;
            if c != *channels {
                return Err(Error::dimension(format!(
                    "layer `{name}` normalizes {channels} channels, predecessor produces {c}"
                )));
            }
            Ok(shape.clone())
        }
        LayerKind::Relu | LayerKind::Dropout { .. } => Ok(one()?.clone()),
        LayerKind::MaxPool2d { window, stride, padding } => {
            let (nc, c, h, w) = expect_nchw(name, one()?)?;
            Ok(vec![
                nc[0],
                c,
                pool_extent(h, *window, *stride, *padding),
                pool_extent(w, *window, *stride, *padding),
            ])
        }
        LayerKind::AvgPool2d { window, stride } => {
            let (nc, c, h, w) = expect_nchw(name, one()?)?;
            Ok(vec![nc[0], c, pool_extent(h, *window, *stride, 0), pool_extent(w, *window, *stride, 0)])
        }
        LayerKind::GlobalAvgPool => {
            let (nc, c, _, _) = expect_nchw(name, one()?)?;
            Ok(vec![nc[0], c])
        }
        LayerKind::ConcatChannels => {
            let first = one()?;
            let (nc, _, h, w) = expect_nchw(name, first)?;
            let mut channels = 0;
            for shape in ins {
                let (_, c, th, tw) = expect_nchw(name, shape)?;
                if (th, tw) != (h, w) {
                    return Err(Error::dimension(format!(
                        "layer `{name}` concat inputs disagree spatially: {first:?} vs {shape:?}"
                    )));
                }
                channels += c;
            }
            Ok(vec![nc[0], channels, h, w])
        }
        LayerKind::Add => {
            let first = one()?;
            for shape in ins {
                if shape != &first {
                    return Err(Error::dimension(format!(
                        "layer `{name}` add inputs disagree: {first:?} vs {shape:?}"
                    )));
                }
            }
            Ok(first.clone())
        }
        LayerKind::Dense { in_features, out_features, .. } => {
            let shape = one()?;
            match shape.as_slice() {
                [n, d] if d == in_features => Ok(vec![*n, *out_features]),
                other => Err(Error::dimension(format!(
                    "layer `{name}` expects [N,{in_features}], predecessor produces {other:?}"
                ))),
            }
        }
        LayerKind::Flatten => {
            let shape = one()?;
            if shape.len() < 2 {
                return Err(Error::dimension(format!(
                    "layer `{name}` cannot flatten rank-{} input",
                    shape.len()
                )));
            }
            Ok(vec![shape[0], shape[1..].iter().product()])
        }
        LayerKind::Softmax => {
            let shape = one()?;
            match shape.as_slice() {
                [n, k] => Ok(vec![*n, *k]),
                other => Err(Error::dimension(format!(
                    "layer `{name}` softmax expects [N,K], predecessor produces {other:?}"
                ))),
            }
        }
    }
}
