//! Feed-forward model description and its context-slot catalog.
//!
//! A model is an ordered chain of operator nodes ending in exactly one
//! softmax cross-entropy loss node. Each node declares which tensors it saves
//! for the backward pass: those declarations form the slot catalog that the
//! compression scheme, the stream keys, and the sensitivity profile are all
//! indexed by.

use serde::{Deserialize, Serialize};

use crate::error::{ActError, Result};
use crate::numerics::{counter_rng, Precision, StreamKey, Tensor};

/// Context slot index within a model's catalog.
pub type SlotId = usize;

/// Stream-id namespace tags. Slot streams use the slot id directly; parameter
/// initialization draws from a disjoint range so adding slots never perturbs
/// init noise.
pub const PARAM_STREAM_BASE: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    /// Dense layer `y = x W + b`, weight `in_dim x out_dim`.
    Linear { out_dim: usize },
    Relu,
    Tanh,
    /// Inverted dropout with Bernoulli(keep_prob) mask, scaled at train time.
    Dropout { keep_prob: f64 },
    /// Channelwise max pooling over `in_h x in_w` planes.
    MaxPool2d {
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
    },
    /// Mean softmax cross-entropy over the batch; the terminal loss node.
    SoftmaxCrossEntropy { classes: usize, loss_scale: f64 },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Linear { .. } => "linear",
            NodeKind::Relu => "relu",
            NodeKind::Tanh => "tanh",
            NodeKind::Dropout { .. } => "dropout",
            NodeKind::MaxPool2d { .. } => "maxpool2d",
            NodeKind::SoftmaxCrossEntropy { .. } => "softmax_ce_loss",
        }
    }

    /// Smooth nodes admit finite-difference probing through their context.
    pub fn is_smooth(&self) -> bool {
        !matches!(self, NodeKind::Relu | NodeKind::MaxPool2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    /// Marks this node as the first of a new checkpoint segment.
    pub segment_boundary: bool,
}

/// What a slot stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Saved-for-backward tensor; compressed per the active scheme.
    Activation,
    /// Model parameter referenced by a backward rule; never quantized.
    Parameter,
    /// Integer state (masks, argmax indices, labels); never quantized.
    IntState,
}

#[derive(Debug, Clone)]
pub struct SlotInfo {
    pub id: SlotId,
    pub node: usize,
    pub kind: SlotKind,
    /// Element count at the catalog's batch size.
    pub dims: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub node: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

/// The model's parameters, aligned with `ModelGraph::param_specs`.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Rebuilds a ParamSet from a flat vector, preserving shapes/precision.
    pub fn from_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.total_len() {
            return Err(ActError::DataLength {
                expected: self.total_len(),
                got: flat.len(),
            });
        }
        let mut tensors = Vec::with_capacity(self.tensors.len());
        let mut off = 0;
        for t in &self.tensors {
            let next = off + t.len();
            tensors.push(Tensor::new(
                t.shape().to_vec(),
                flat[off..next].to_vec(),
                t.precision(),
            )?);
            off = next;
        }
        Ok(ParamSet { tensors })
    }
}

/// One training batch: row-major inputs plus class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input_dim: usize,
    pub nodes: Vec<Node>,
    pub precision: Precision,
}

impl ModelGraph {
    pub fn new(input_dim: usize, nodes: Vec<Node>, precision: Precision) -> Result<Self> {
        let g = ModelGraph {
            input_dim,
            nodes,
            precision,
        };
        g.validate()?;
        Ok(g)
    }

    /// Convenience builder: an MLP `input -> hidden.. -> classes` with the
    /// given activation between linear layers.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: NodeKind,
        precision: Precision,
    ) -> Result<Self> {
        let mut nodes = Vec::new();
        for &h in hidden {
            nodes.push(Node {
                kind: NodeKind::Linear { out_dim: h },
                segment_boundary: false,
            });
            nodes.push(Node {
                kind: activation,
                segment_boundary: false,
            });
        }
        nodes.push(Node {
            kind: NodeKind::Linear { out_dim: classes },
            segment_boundary: false,
        });
        nodes.push(Node {
            kind: NodeKind::SoftmaxCrossEntropy {
                classes,
                loss_scale: 1.0,
            },
            segment_boundary: false,
        });
        ModelGraph::new(input_dim, nodes, precision)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(ActError::InvalidModel("input_dim must be positive".into()));
        }
        if self.nodes.is_empty() {
            return Err(ActError::InvalidModel("empty node list".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let is_loss = matches!(node.kind, NodeKind::SoftmaxCrossEntropy { .. });
            let is_last = i + 1 == self.nodes.len();
            if is_loss != is_last {
                return Err(ActError::InvalidModel(
                    "exactly one terminal softmax_ce_loss node required".into(),
                ));
            }
            match node.kind {
                NodeKind::Linear { out_dim } if out_dim == 0 => {
                    return Err(ActError::InvalidModel(format!("node {i}: out_dim 0")));
                }
                NodeKind::Dropout { keep_prob } => {
                    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: keep_prob {keep_prob} outside (0, 1]"
                        )));
                    }
                }
                NodeKind::MaxPool2d {
                    channels,
                    in_h,
                    in_w,
                    kernel,
                    stride,
                } => {
                    if channels == 0 || kernel == 0 || stride == 0 {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: zero maxpool parameter"
                        )));
                    }
                    if kernel > in_h || kernel > in_w {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: kernel larger than plane"
                        )));
                    }
                    if (in_h - kernel) % stride != 0 || (in_w - kernel) % stride != 0 {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: pooling windows must tile the plane"
                        )));
                    }
                }
                NodeKind::SoftmaxCrossEntropy { classes, loss_scale } => {
                    if classes < 2 {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: need at least 2 classes"
                        )));
                    }
                    if !(loss_scale.is_finite() && loss_scale > 0.0) {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: bad loss_scale"
                        )));
                    }
                }
                _ => {}
            }
        }
        // Dimension chain must be consistent.
        self.output_dims()?;
        Ok(())
    }

    /// Per-node output width; the entry for the loss node is its class count.
    pub fn output_dims(&self) -> Result<Vec<usize>> {
        let mut dims = Vec::with_capacity(self.nodes.len());
        let mut cur = self.input_dim;
        for (i, node) in self.nodes.iter().enumerate() {
            cur = match node.kind {
                NodeKind::Linear { out_dim } => out_dim,
                NodeKind::Relu | NodeKind::Tanh | NodeKind::Dropout { .. } => cur,
                NodeKind::MaxPool2d {
                    channels,
                    in_h,
                    in_w,
                    kernel,
                    stride,
                } => {
                    if channels * in_h * in_w != cur {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: maxpool expects {} inputs, got {cur}",
                            channels * in_h * in_w
                        )));
                    }
                    let oh = (in_h - kernel) / stride + 1;
                    let ow = (in_w - kernel) / stride + 1;
                    channels * oh * ow
                }
                NodeKind::SoftmaxCrossEntropy { classes, .. } => {
                    if classes != cur {
                        return Err(ActError::InvalidModel(format!(
                            "node {i}: loss expects {classes} logits, got {cur}"
                        )));
                    }
                    classes
                }
            };
            dims.push(cur);
        }
        Ok(dims)
    }

    /// Width of the tensor entering node `i`.
    pub fn input_dim_of(&self, node: usize, dims: &[usize]) -> usize {
        if node == 0 {
            self.input_dim
        } else {
            dims[node - 1]
        }
    }

    /// The declared context slots at a given batch size, in slot-id order.
    pub fn slot_catalog(&self, batch_size: usize) -> Vec<SlotInfo> {
        let dims = self.output_dims().expect("validated");
        let mut slots = Vec::new();
        let mut push = |node: usize, kind: SlotKind, count: usize, label: &str, k: &NodeKind| {
            let id = slots.len();
            slots.push(SlotInfo {
                id,
                node,
                kind,
                dims: count,
                name: format!("n{node}.{}.{label}", k.name()),
            });
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let in_dim = self.input_dim_of(i, &dims);
            match node.kind {
                NodeKind::Linear { out_dim } => {
                    push(i, SlotKind::Activation, batch_size * in_dim, "input", &node.kind);
                    push(i, SlotKind::Parameter, in_dim * out_dim, "weight", &node.kind);
                }
                NodeKind::Relu => {
                    push(i, SlotKind::Activation, batch_size * in_dim, "input", &node.kind);
                }
                NodeKind::Tanh => {
                    push(i, SlotKind::Activation, batch_size * in_dim, "output", &node.kind);
                }
                NodeKind::Dropout { .. } => {
                    push(i, SlotKind::IntState, batch_size * in_dim, "mask", &node.kind);
                }
                NodeKind::MaxPool2d { .. } => {
                    push(i, SlotKind::IntState, batch_size * dims[i], "indices", &node.kind);
                }
                NodeKind::SoftmaxCrossEntropy { classes, .. } => {
                    push(i, SlotKind::Activation, batch_size * classes, "probs", &node.kind);
                    push(i, SlotKind::IntState, batch_size, "labels", &node.kind);
                }
            }
        }
        slots
    }

    /// Total declared activation dimensionality (aliases included).
    pub fn context_dims(&self, batch_size: usize) -> usize {
        self.slot_catalog(batch_size)
            .iter()
            .filter(|s| s.kind == SlotKind::Activation)
            .map(|s| s.dims)
            .sum()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let dims = self.output_dims().expect("validated");
        let mut specs = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Linear { out_dim } = node.kind {
                let in_dim = self.input_dim_of(i, &dims);
                specs.push(ParamSpec {
                    node: i,
                    role: ParamRole::Weight,
                    shape: vec![in_dim, out_dim],
                });
                specs.push(ParamSpec {
                    node: i,
                    role: ParamRole::Bias,
                    shape: vec![out_dim],
                });
            }
        }
        specs
    }

    /// Glorot-uniform weights, zero biases; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let specs = self.param_specs();
        let mut tensors = Vec::with_capacity(specs.len());
        for (p, spec) in specs.iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let t = match spec.role {
                ParamRole::Weight => {
                    let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
                    let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let key = StreamKey::new(seed, PARAM_STREAM_BASE + p as u64);
                    let data = (0..n)
                        .map(|j| (counter_rng(key, j as u64) * 2.0 - 1.0) * scale)
                        .collect();
                    Tensor::new(spec.shape.clone(), data, self.precision).expect("finite init")
                }
                ParamRole::Bias => Tensor::zeros(spec.shape.clone(), self.precision),
            };
            tensors.push(t);
        }
        ParamSet { tensors }
    }

    /// Checkpoint segments as node ranges. Node 0 opens segment 0; each
    /// `segment_boundary` opens a new one.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut starts = vec![0usize];
        for (i, node) in self.nodes.iter().enumerate() {
            if i > 0 && node.segment_boundary {
                starts.push(i);
            }
        }
        starts.push(self.nodes.len());
        starts.windows(2).map(|w| w[0]..w[1]).collect()
    }

    /// Checkpointed execution stores only the input of each segment's first
    /// node, so that node must be one that declares its input.
    pub fn validate_for_checkpointing(&self) -> Result<()> {
        let segs = self.segments();
        if segs.len() < 2 {
            return Err(ActError::InvalidModel(
                "checkpointed execution needs at least one segment boundary".into(),
            ));
        }
        for seg in &segs {
            match self.nodes[seg.start].kind {
                NodeKind::Linear { .. } | NodeKind::Relu => {}
                ref k => {
                    return Err(ActError::InvalidModel(format!(
                        "segment starting at node {} must begin with a linear or relu node, got {}",
                        seg.start,
                        k.name()
                    )))
                }
            }
        }
        Ok(())
    }
}

// ── JSON model description ──────────────────────────────────────────────────

/// Flat node description with strict field checking; irrelevant fields for a
/// kind are rejected rather than ignored.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeConfig {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    keep_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_w: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    segment_boundary: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfig {
    input_dim: usize,
    precision: String,
    nodes: Vec<NodeConfig>,
}

struct FieldCheck<'a> {
    node: usize,
    kind: &'a str,
    used: Vec<&'static str>,
}

impl<'a> FieldCheck<'a> {
    fn take<T: Copy>(&mut self, name: &'static str, v: Option<T>) -> Result<T> {
        self.used.push(name);
        v.ok_or_else(|| {
            ActError::InvalidConfig(format!(
                "node {} ({}): missing field '{name}'",
                self.node, self.kind
            ))
        })
    }

    fn forbid<T>(&self, name: &str, v: &Option<T>) -> Result<()> {
        if v.is_some() && !self.used.contains(&name) {
            return Err(ActError::InvalidConfig(format!(
                "node {} ({}): field '{name}' not valid for this kind",
                self.node, self.kind
            )));
        }
        Ok(())
    }
}

pub fn model_from_json(json: &str) -> Result<ModelGraph> {
    let cfg: ModelConfig = serde_json::from_str(json)?;
    let precision = match cfg.precision.as_str() {
        "single" => Precision::Single,
        "double" => Precision::Double,
        other => {
            return Err(ActError::InvalidConfig(format!(
                "precision must be 'single' or 'double', got '{other}'"
            )))
        }
    };
    let mut nodes = Vec::with_capacity(cfg.nodes.len());
    for (i, nc) in cfg.nodes.iter().enumerate() {
        let mut chk = FieldCheck {
            node: i,
            kind: &nc.kind,
            used: Vec::new(),
        };
        let kind = match nc.kind.as_str() {
            "linear" => NodeKind::Linear {
                out_dim: chk.take("out_dim", nc.out_dim)?,
            },
            "relu" => NodeKind::Relu,
            "tanh" => NodeKind::Tanh,
            "dropout" => NodeKind::Dropout {
                keep_prob: chk.take("keep_prob", nc.keep_prob)?,
            },
            "maxpool2d" => NodeKind::MaxPool2d {
                channels: chk.take("channels", nc.channels)?,
                in_h: chk.take("in_h", nc.in_h)?,
                in_w: chk.take("in_w", nc.in_w)?,
                kernel: chk.take("kernel", nc.kernel)?,
                stride: chk.take("stride", nc.stride)?,
            },
            "softmax_ce_loss" => {
                chk.used.push("loss_scale");
                NodeKind::SoftmaxCrossEntropy {
                    classes: chk.take("classes", nc.classes)?,
                    loss_scale: nc.loss_scale.unwrap_or(1.0),
                }
            }
            other => {
                return Err(ActError::InvalidConfig(format!(
                    "node {i}: unknown kind '{other}'"
                )))
            }
        };
        chk.forbid("out_dim", &nc.out_dim)?;
        chk.forbid("keep_prob", &nc.keep_prob)?;
        chk.forbid("channels", &nc.channels)?;
        chk.forbid("in_h", &nc.in_h)?;
        chk.forbid("in_w", &nc.in_w)?;
        chk.forbid("kernel", &nc.kernel)?;
        chk.forbid("stride", &nc.stride)?;
        chk.forbid("classes", &nc.classes)?;
        chk.forbid("loss_scale", &nc.loss_scale)?;
        nodes.push(Node {
            kind,
            segment_boundary: nc.segment_boundary,
        });
    }
    ModelGraph::new(cfg.input_dim, nodes, precision)
}

pub fn model_to_json(model: &ModelGraph) -> String {
    let nodes: Vec<NodeConfig> = model
        .nodes
        .iter()
        .map(|n| {
            let mut nc = NodeConfig {
                kind: n.kind.name().to_string(),
                out_dim: None,
                keep_prob: None,
                channels: None,
                in_h: None,
                in_w: None,
                kernel: None,
                stride: None,
                classes: None,
                loss_scale: None,
                segment_boundary: n.segment_boundary,
            };
            match n.kind {
                NodeKind::Linear { out_dim } => nc.out_dim = Some(out_dim),
                NodeKind::Dropout { keep_prob } => nc.keep_prob = Some(keep_prob),
                NodeKind::MaxPool2d {
                    channels,
                    in_h,
                    in_w,
                    kernel,
                    stride,
                } => {
                    nc.channels = Some(channels);
                    nc.in_h = Some(in_h);
                    nc.in_w = Some(in_w);
                    nc.kernel = Some(kernel);
                    nc.stride = Some(stride);
                }
                NodeKind::SoftmaxCrossEntropy { classes, loss_scale } => {
                    nc.classes = Some(classes);
                    if loss_scale != 1.0 {
                        nc.loss_scale = Some(loss_scale);
                    }
                }
                _ => {}
            }
            nc
        })
        .collect();
    let cfg = ModelConfig {
        input_dim: model.input_dim,
        precision: match model.precision {
            Precision::Single => "single".into(),
            Precision::Double => "double".into(),
        },
        nodes,
    };
    serde_json::to_string_pretty(&cfg).expect("model config serializes")
}
