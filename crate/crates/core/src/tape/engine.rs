//! Forward execution with context capture, and reverse-mode gradients from
//! the decompressed context.
//!
//! The forward pass always computes exact values; compression touches only
//! what gets *stored*. The backward pass reads every saved tensor back
//! through the store (decoding quantized payloads), so the gradient it
//! returns is the gradient-at-compressed-context. With an all-32-bit scheme
//! the two paths coincide bit-for-bit.

use crate::error::{ActError, Result};
use crate::numerics::{counter_rng, mix64, Precision, StreamKey, Tensor};
use crate::quantizer::CompressionScheme;
use crate::tape::graph::{
    Batch, ModelGraph, NodeKind, ParamSet, SlotId, SlotInfo, SlotKind,
};
use crate::tape::store::ContextStore;

/// Parameter-slot footprint tokens live in their own namespace so tied
/// parameters dedup while never colliding with forward value tokens.
const PARAM_TOKEN_BASE: u64 = 1 << 32;

/// Per-parameter gradients, aligned with `ModelGraph::param_specs`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.sq_norm()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            t.check_finite("gradient")?;
        }
        Ok(())
    }
}

/// Raw forward results: every intermediate value plus integer state.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `values[0]` is the batch input; `values[i + 1]` is node `i`'s output
    /// (the loss node's output is the probability matrix).
    pub values: Vec<Tensor>,
    pub masks: Vec<Option<Vec<u8>>>,
    pub indices: Vec<Option<Vec<u32>>>,
    pub loss: f64,
}

/// Fresh per-slot stream keys for one training step.
pub fn step_keys(run_seed: u64, step: u64, num_slots: usize) -> Vec<StreamKey> {
    let seed = mix64(run_seed ^ mix64(step ^ 0x5bd1_e995_9bd1_e995));
    (0..num_slots as u64)
        .map(|l| StreamKey::new(seed, l))
        .collect()
}

/// Keys from an explicit per-slot seed list (sensitivity estimation).
pub fn keys_from_seeds(seeds: &[u64]) -> Vec<StreamKey> {
    seeds
        .iter()
        .enumerate()
        .map(|(l, &s)| StreamKey::new(s, l as u64))
        .collect()
}

fn to_precision(t: &Tensor, p: Precision) -> Result<Tensor> {
    if t.precision() == p {
        Ok(t.clone())
    } else {
        Tensor::new(t.shape().to_vec(), t.data().to_vec(), p)
    }
}

// ── Operator forward kernels ────────────────────────────────────────────────

fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = crate::numerics::matmul(x, w)?;
    crate::numerics::add_bias(&y, b)
}

fn relu_forward(x: &Tensor) -> Result<Tensor> {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn tanh_forward(x: &Tensor) -> Result<Tensor> {
    x.map(f64::tanh)
}

fn dropout_forward(x: &Tensor, keep_prob: f64, key: StreamKey) -> Result<(Tensor, Vec<u8>)> {
    let mask: Vec<u8> = (0..x.len())
        .map(|j| (counter_rng(key, j as u64) < keep_prob) as u8)
        .collect();
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m as f64 / keep_prob)
        .collect();
    Ok((Tensor::new(x.shape().to_vec(), data, x.precision())?, mask))
}

fn maxpool_forward(
    x: &Tensor,
    channels: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor, Vec<u32>)> {
    let batch = x.rows();
    let out_h = (in_h - kernel) / stride + 1;
    let out_w = (in_w - kernel) / stride + 1;
    let in_plane = in_h * in_w;
    let out_len = channels * out_h * out_w;
    let mut out = Vec::with_capacity(batch * out_len);
    let mut indices = Vec::with_capacity(batch * out_len);
    for b in 0..batch {
        let row = &x.data()[b * channels * in_plane..(b + 1) * channels * in_plane];
        for c in 0..channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let y = oy * stride + ky;
                            let xx = ox * stride + kx;
                            let idx = c * in_plane + y * in_w + xx;
                            // Strict > keeps the first scan-order winner on
                            // ties.
                            if row[idx] > best {
                                best = row[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    out.push(best);
                    indices.push(best_idx);
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![batch, out_len], out, x.precision())?,
        indices,
    ))
}

/// Mean softmax cross-entropy over the batch, scaled by `loss_scale`.
/// Returns the loss and the saved probability matrix.
pub fn softmax_ce_loss(logits: &Tensor, labels: &[usize], loss_scale: f64) -> Result<(f64, Tensor)> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(ActError::ShapeMismatch(format!(
            "{} labels for batch {batch}",
            labels.len()
        )));
    }
    let mut probs = Vec::with_capacity(batch * classes);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(ActError::LabelOutOfRange { label, classes });
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= (row[label] - m - z.ln()) / batch as f64;
        probs.extend(exps.iter().map(|&e| e / z));
    }
    let probs = Tensor::new(vec![batch, classes], probs, logits.precision())?;
    Ok((loss_scale * loss, probs))
}

// ── Operator backward rules ─────────────────────────────────────────────────

/// Gradient of the loss through a dense layer evaluated on the saved
/// (decompressed) input: `grad_weight = input^T upstream`,
/// `grad_input = upstream weight^T`, `grad_bias = column sums of upstream`.
pub fn linear_vjp(
    ctx_input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, in_dim) = (ctx_input.rows(), ctx_input.cols());
    let (w_in, out_dim) = (weight.rows(), weight.cols());
    if w_in != in_dim || upstream.rows() != batch || upstream.cols() != out_dim {
        return Err(ActError::ShapeMismatch(format!(
            "linear_vjp x{:?} w{:?} up{:?}",
            ctx_input.shape(),
            weight.shape(),
            upstream.shape()
        )));
    }
    let prec = upstream.precision();
    let mut gx = vec![0.0f64; batch * in_dim];
    let mut gw = vec![0.0f64; in_dim * out_dim];
    let mut gb = vec![0.0f64; out_dim];
    for b in 0..batch {
        let up = &upstream.data()[b * out_dim..(b + 1) * out_dim];
        let x = &ctx_input.data()[b * in_dim..(b + 1) * in_dim];
        for (o, &u) in up.iter().enumerate() {
            gb[o] += u;
        }
        for i in 0..in_dim {
            let mut acc = 0.0;
            let wrow = &weight.data()[i * out_dim..(i + 1) * out_dim];
            for (o, &u) in up.iter().enumerate() {
                acc += u * wrow[o];
                gw[i * out_dim + o] += x[i] * u;
            }
            gx[b * in_dim + i] = acc;
        }
    }
    Ok((
        Tensor::new(vec![batch, in_dim], gx, prec)?,
        Tensor::new(vec![in_dim, out_dim], gw, prec)?,
        Tensor::new(vec![out_dim], gb, prec)?,
    ))
}

/// `upstream ⊙ 1[input > 0]` on the saved pre-activation.
pub fn relu_vjp(ctx_input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if ctx_input.shape() != upstream.shape() {
        return Err(ActError::ShapeMismatch("relu_vjp".into()));
    }
    let data = ctx_input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data, upstream.precision())
}

/// `upstream ⊙ (1 - output^2)` on the saved activation output.
pub fn tanh_vjp(ctx_output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if ctx_output.shape() != upstream.shape() {
        return Err(ActError::ShapeMismatch("tanh_vjp".into()));
    }
    let data = ctx_output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&y, &u)| u * (1.0 - y * y))
        .collect();
    Tensor::new(upstream.shape().to_vec(), data, upstream.precision())
}

/// `upstream ⊙ mask / keep_prob`; the mask is raw integer state.
pub fn dropout_vjp(ctx_mask: &[u8], keep_prob: f64, upstream: &Tensor) -> Result<Tensor> {
    if ctx_mask.len() != upstream.len() {
        return Err(ActError::ShapeMismatch("dropout_vjp".into()));
    }
    if ctx_mask.iter().any(|&m| m > 1) {
        return Err(ActError::InvalidMask);
    }
    let data = ctx_mask
        .iter()
        .zip(upstream.data())
        .map(|(&m, &u)| u * m as f64 / keep_prob)
        .collect();
    Tensor::new(upstream.shape().to_vec(), data, upstream.precision())
}

/// Scatters the upstream gradient into the recorded argmax positions.
pub fn maxpool2d_vjp(
    ctx_indices: &[u32],
    input_width: usize,
    upstream: &Tensor,
) -> Result<Tensor> {
    let batch = upstream.rows();
    let out_len = upstream.cols();
    if ctx_indices.len() != batch * out_len {
        return Err(ActError::ShapeMismatch("maxpool2d_vjp".into()));
    }
    let mut grad = vec![0.0f64; batch * input_width];
    for b in 0..batch {
        for k in 0..out_len {
            let idx = ctx_indices[b * out_len + k] as usize;
            if idx >= input_width {
                return Err(ActError::IndexOutOfRange(format!(
                    "pool index {idx} >= {input_width}"
                )));
            }
            grad[b * input_width + idx] += upstream.data()[b * out_len + k];
        }
    }
    Tensor::new(vec![batch, input_width], grad, upstream.precision())
}

/// `loss_scale * (probs - onehot) / batch` on the saved probabilities.
pub fn softmax_ce_vjp(probs: &Tensor, labels: &[usize], loss_scale: f64) -> Result<Tensor> {
    let (batch, classes) = (probs.rows(), probs.cols());
    if labels.len() != batch {
        return Err(ActError::ShapeMismatch("softmax_ce_vjp".into()));
    }
    let mut grad = Vec::with_capacity(batch * classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(ActError::LabelOutOfRange { label, classes });
        }
        for c in 0..classes {
            let y = (c == label) as u8 as f64;
            grad.push(loss_scale * (probs.data()[i * classes + c] - y) / batch as f64);
        }
    }
    Tensor::new(vec![batch, classes], grad, probs.precision())
}

// ── Engine ──────────────────────────────────────────────────────────────────

/// Slots grouped by owning node, in declaration order.
fn slots_by_node(model: &ModelGraph, catalog: &[SlotInfo]) -> Vec<Vec<SlotInfo>> {
    let mut by_node: Vec<Vec<SlotInfo>> = vec![Vec::new(); model.nodes.len()];
    for s in catalog {
        by_node[s.node].push(s.clone());
    }
    by_node
}

/// Runs the exact forward pass. Keys are needed only to draw dropout masks;
/// values are never compressed here.
pub fn run_forward(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    keys: &[StreamKey],
) -> Result<Trace> {
    if batch.x.rank() != 2 || batch.x.cols() != model.input_dim {
        return Err(ActError::ShapeMismatch(format!(
            "batch {:?} vs input_dim {}",
            batch.x.shape(),
            model.input_dim
        )));
    }
    let catalog = model.slot_catalog(batch.size());
    let by_node = slots_by_node(model, &catalog);
    let mut values = Vec::with_capacity(model.nodes.len() + 1);
    values.push(batch.x.clone());
    let mut masks = vec![None; model.nodes.len()];
    let mut indices = vec![None; model.nodes.len()];
    let mut loss = None;
    let mut param_cursor = 0usize;
    for (i, node) in model.nodes.iter().enumerate() {
        let x = &values[i];
        let out = match node.kind {
            NodeKind::Linear { .. } => {
                let w = &params.tensors[param_cursor];
                let b = &params.tensors[param_cursor + 1];
                param_cursor += 2;
                linear_forward(x, w, b)?
            }
            NodeKind::Relu => relu_forward(x)?,
            NodeKind::Tanh => tanh_forward(x)?,
            NodeKind::Dropout { keep_prob } => {
                let mask_slot = by_node[i][0].id;
                let (y, mask) = dropout_forward(x, keep_prob, keys[mask_slot])?;
                masks[i] = Some(mask);
                y
            }
            NodeKind::MaxPool2d {
                channels,
                in_h,
                in_w,
                kernel,
                stride,
            } => {
                let (y, idx) = maxpool_forward(x, channels, in_h, in_w, kernel, stride)?;
                indices[i] = Some(idx);
                y
            }
            NodeKind::SoftmaxCrossEntropy { loss_scale, .. } => {
                let (l, probs) = softmax_ce_loss(x, &batch.labels, loss_scale)?;
                loss = Some(l);
                probs
            }
        };
        out.check_finite("forward intermediate")?;
        values.push(out);
    }
    Ok(Trace {
        values,
        masks,
        indices,
        loss: loss.expect("terminal loss node validated"),
    })
}

/// Stores node `i`'s declared context into `store`. `skip_input_slot` leaves
/// an input slot that is already present (checkpoint segment inputs) alone.
fn store_node_context(
    node_kind: &NodeKind,
    node_idx: usize,
    node_slots: &[SlotInfo],
    trace: &Trace,
    labels: &[usize],
    params: &ParamSet,
    param_cursor: usize,
    keys: &[StreamKey],
    store: &mut ContextStore,
    skip_input_slot: bool,
) -> Result<()> {
    match node_kind {
        NodeKind::Linear { .. } => {
            let (input_slot, weight_slot) = (&node_slots[0], &node_slots[1]);
            if !skip_input_slot {
                store.insert_activation(
                    input_slot,
                    &trace.values[node_idx],
                    node_idx as u64,
                    keys[input_slot.id],
                )?;
            }
            store.insert_parameter(
                weight_slot,
                &params.tensors[param_cursor],
                PARAM_TOKEN_BASE + param_cursor as u64,
            )?;
        }
        NodeKind::Relu => {
            if !skip_input_slot {
                store.insert_activation(
                    &node_slots[0],
                    &trace.values[node_idx],
                    node_idx as u64,
                    keys[node_slots[0].id],
                )?;
            }
        }
        NodeKind::Tanh => {
            store.insert_activation(
                &node_slots[0],
                &trace.values[node_idx + 1],
                node_idx as u64 + 1,
                keys[node_slots[0].id],
            )?;
        }
        NodeKind::Dropout { .. } => {
            let mask = trace.masks[node_idx].as_ref().expect("dropout ran");
            store.insert_mask(&node_slots[0], mask.clone());
        }
        NodeKind::MaxPool2d { .. } => {
            let idx = trace.indices[node_idx].as_ref().expect("pool ran");
            store.insert_indices(&node_slots[0], idx.clone());
        }
        NodeKind::SoftmaxCrossEntropy { .. } => {
            store.insert_activation(
                &node_slots[0],
                &trace.values[node_idx + 1],
                node_idx as u64 + 1,
                keys[node_slots[0].id],
            )?;
            store.insert_labels(&node_slots[1], labels.to_vec());
        }
    }
    Ok(())
}

fn param_cursor_at(model: &ModelGraph, node: usize) -> usize {
    model.nodes[..node]
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Linear { .. }))
        .count()
        * 2
}

/// One forward pass with context capture. The returned loss is the exact
/// uncompressed loss; the store holds the (possibly compressed) context.
pub fn forward(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    scheme: &CompressionScheme,
    keys: &[StreamKey],
) -> Result<(f64, ContextStore)> {
    let trace = run_forward(model, params, batch, keys)?;
    let store = capture_context(model, params, batch, scheme, keys, &trace)?;
    Ok((trace.loss, store))
}

/// Builds the full context store from a finished trace.
pub fn capture_context(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    scheme: &CompressionScheme,
    keys: &[StreamKey],
    trace: &Trace,
) -> Result<ContextStore> {
    let catalog = model.slot_catalog(batch.size());
    if scheme.num_slots() != catalog.len() || keys.len() != catalog.len() {
        return Err(ActError::ShapeMismatch(format!(
            "{} slots vs scheme {} / keys {}",
            catalog.len(),
            scheme.num_slots(),
            keys.len()
        )));
    }
    let by_node = slots_by_node(model, &catalog);
    let mut store = ContextStore::new(catalog.len(), scheme.clone());
    for (i, node) in model.nodes.iter().enumerate() {
        store_node_context(
            &node.kind,
            i,
            &by_node[i],
            trace,
            &batch.labels,
            params,
            param_cursor_at(model, i),
            keys,
            &mut store,
            false,
        )?;
    }
    Ok(store)
}

/// Backpropagates through `nodes[range]` reading all context from the store.
/// `upstream` is the gradient w.r.t. the range's output value (None when the
/// range ends at the loss node). Returns the gradient w.r.t. the range's
/// input value; parameter gradients accumulate into `grads`.
fn backward_range(
    model: &ModelGraph,
    store: &ContextStore,
    range: std::ops::Range<usize>,
    upstream: Option<Tensor>,
    grads: &mut [Option<Tensor>],
) -> Result<Tensor> {
    // Group populated slot ids by owning node; ids ascend in declaration
    // order, so a linear node sees [input, weight].
    let batch_catalog = {
        let mut v: Vec<Vec<SlotId>> = vec![Vec::new(); model.nodes.len()];
        for id in 0..store.num_slots() {
            if let Ok(info) = store.slot_info(id) {
                v[info.node].push(id);
            }
        }
        v
    };
    let precision = model.precision;
    let mut up = upstream;
    for i in range.clone().rev() {
        let node = &model.nodes[i];
        let slots = &batch_catalog[i];
        let next = match node.kind {
            NodeKind::SoftmaxCrossEntropy { loss_scale, .. } => {
                if up.is_some() {
                    return Err(ActError::InvalidModel(
                        "loss node cannot receive an upstream gradient".into(),
                    ));
                }
                let probs = store.fetch_tensor(slots[0])?;
                let labels = store.fetch_labels(slots[1])?;
                let g = softmax_ce_vjp(&probs, labels, loss_scale)?;
                to_precision(&g, precision)?
            }
            NodeKind::Linear { .. } => {
                let u = up.ok_or_else(|| ActError::MissingSlot(slots[0]))?;
                let x = store.fetch_tensor(slots[0])?;
                let w = store.fetch_tensor(slots[1])?;
                let (gx, gw, gb) = linear_vjp(&x, &w, &u)?;
                let p = param_cursor_at(model, i);
                accumulate(grads, p, to_precision(&gw, precision)?)?;
                accumulate(grads, p + 1, to_precision(&gb, precision)?)?;
                to_precision(&gx, precision)?
            }
            NodeKind::Relu => {
                let u = up.ok_or_else(|| ActError::MissingSlot(slots[0]))?;
                let x = store.fetch_tensor(slots[0])?;
                to_precision(&relu_vjp(&x, &u)?, precision)?
            }
            NodeKind::Tanh => {
                let u = up.ok_or_else(|| ActError::MissingSlot(slots[0]))?;
                let y = store.fetch_tensor(slots[0])?;
                to_precision(&tanh_vjp(&y, &u)?, precision)?
            }
            NodeKind::Dropout { keep_prob } => {
                let u = up.ok_or_else(|| ActError::MissingSlot(slots[0]))?;
                let mask = store.fetch_mask(slots[0])?;
                to_precision(&dropout_vjp(mask, keep_prob, &u)?, precision)?
            }
            NodeKind::MaxPool2d {
                channels,
                in_h,
                in_w,
                ..
            } => {
                let u = up.ok_or_else(|| ActError::MissingSlot(slots[0]))?;
                let idx = store.fetch_indices(slots[0])?;
                let g = maxpool2d_vjp(idx, channels * in_h * in_w, &u)?;
                to_precision(&g, precision)?
            }
        };
        next.check_finite("backward gradient")?;
        up = Some(next);
    }
    up.ok_or_else(|| ActError::InvalidModel("empty backward range".into()))
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &grads[idx] {
        None => grads[idx] = Some(g),
        Some(prev) => grads[idx] = Some(crate::numerics::add(prev, &g)?),
    }
    Ok(())
}

/// Gradients from a completed forward's context store.
pub fn backward(model: &ModelGraph, store: &ContextStore) -> Result<Gradients> {
    let mut grads: Vec<Option<Tensor>> = vec![None; model.param_specs().len()];
    backward_range(model, store, 0..model.nodes.len(), None, &mut grads)?;
    finish_grads(model, grads)
}

fn finish_grads(model: &ModelGraph, grads: Vec<Option<Tensor>>) -> Result<Gradients> {
    let specs = model.param_specs();
    let tensors = grads
        .into_iter()
        .zip(&specs)
        .map(|(g, spec)| g.unwrap_or_else(|| Tensor::zeros(spec.shape.clone(), model.precision)))
        .collect();
    let g = Gradients { tensors };
    g.check_finite()?;
    Ok(g)
}

/// Checkpointed execution: the forward stores only each segment's input
/// (compressed per the scheme); the backward re-runs each segment from the
/// decoded segment input, capturing (and compressing) within-segment context,
/// then backpropagates through it. With an all-32 scheme the gradients are
/// bit-identical to `backward(forward(..))`.
pub fn checkpointed_backward(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    scheme: &CompressionScheme,
    keys: &[StreamKey],
) -> Result<(f64, Gradients)> {
    model.validate_for_checkpointing()?;
    let catalog = model.slot_catalog(batch.size());
    if scheme.num_slots() != catalog.len() || keys.len() != catalog.len() {
        return Err(ActError::ShapeMismatch(format!(
            "{} slots vs scheme {} / keys {}",
            catalog.len(),
            scheme.num_slots(),
            keys.len()
        )));
    }
    let by_node = slots_by_node(model, &catalog);
    let segments = model.segments();

    // Exact forward: loss plus the segment-input values to store.
    let trace = run_forward(model, params, batch, keys)?;
    let mut store = ContextStore::new(catalog.len(), scheme.clone());
    for seg in &segments {
        let input_slot = &by_node[seg.start][0];
        debug_assert_eq!(input_slot.kind, SlotKind::Activation);
        store.insert_activation(
            input_slot,
            &trace.values[seg.start],
            seg.start as u64,
            keys[input_slot.id],
        )?;
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; model.param_specs().len()];
    let mut upstream: Option<Tensor> = None;
    for seg in segments.iter().rev() {
        // Recompute the segment from its decoded stored input.
        let seg_input = to_precision(
            &store.fetch_tensor(by_node[seg.start][0].id)?,
            model.precision,
        )?;
        let seg_trace = run_segment(
            model,
            params,
            seg.clone(),
            &seg_input,
            &batch.labels,
            keys,
            &by_node,
        )?;
        for i in seg.clone() {
            store_node_context(
                &model.nodes[i].kind,
                i,
                &by_node[i],
                &seg_trace,
                &batch.labels,
                params,
                param_cursor_at(model, i),
                keys,
                &mut store,
                i == seg.start,
            )?;
        }
        let g_in = backward_range(model, &store, seg.clone(), upstream.take(), &mut grads)?;
        upstream = Some(g_in);
    }
    Ok((trace.loss, finish_grads(model, grads)?))
}

/// Re-runs `nodes[seg]` from `input`, producing a trace whose value indices
/// line up with the full model (values outside the segment are placeholders).
fn run_segment(
    model: &ModelGraph,
    params: &ParamSet,
    seg: std::ops::Range<usize>,
    input: &Tensor,
    labels: &[usize],
    keys: &[StreamKey],
    by_node: &[Vec<SlotInfo>],
) -> Result<Trace> {
    let mut values: Vec<Tensor> =
        vec![Tensor::zeros(vec![1], model.precision); model.nodes.len() + 1];
    values[seg.start] = input.clone();
    let mut masks = vec![None; model.nodes.len()];
    let mut indices = vec![None; model.nodes.len()];
    let mut loss = 0.0;
    let mut param_cursor = param_cursor_at(model, seg.start);
    for i in seg.clone() {
        let x = values[i].clone();
        let out = match model.nodes[i].kind {
            NodeKind::Linear { .. } => {
                let w = &params.tensors[param_cursor];
                let b = &params.tensors[param_cursor + 1];
                param_cursor += 2;
                linear_forward(&x, w, b)?
            }
            NodeKind::Relu => relu_forward(&x)?,
            NodeKind::Tanh => tanh_forward(&x)?,
            NodeKind::Dropout { keep_prob } => {
                let mask_slot = by_node[i][0].id;
                let (y, mask) = dropout_forward(&x, keep_prob, keys[mask_slot])?;
                masks[i] = Some(mask);
                y
            }
            NodeKind::MaxPool2d {
                channels,
                in_h,
                in_w,
                kernel,
                stride,
            } => {
                let (y, idx) = maxpool_forward(&x, channels, in_h, in_w, kernel, stride)?;
                indices[i] = Some(idx);
                y
            }
            NodeKind::SoftmaxCrossEntropy { loss_scale, .. } => {
                // The recomputed loss is discarded (the exact loss comes from
                // the initial forward); this evaluation exists to rebuild the
                // saved probability matrix.
                let (l, probs) = softmax_ce_loss(&x, labels, loss_scale)?;
                loss = l;
                probs
            }
        };
        out.check_finite("recompute intermediate")?;
        values[i + 1] = out;
    }
    Ok(Trace {
        values,
        masks,
        indices,
        loss,
    })
}
