//! The compressed-context SGD loop: warmup at uniform bits, periodic
//! sensitivity refresh and bit re-allocation, running gradient-variance
//! tracking, and the compression-noise alert.

pub mod config;
pub mod dataset;

use std::path::Path;
use std::time::Instant;

use crate::allocator::{allocate_bits, predicted_variance, AllocationProblem};
use crate::error::{ActError, Result};
use crate::numerics::{write_tensor, Tensor};
use crate::quantizer::{BitWidth, CompressionScheme, LADDER};
use crate::sensitivity::{
    estimate_sensitivities, update_profile, EstimatorConfig, GradientEpisode, SensitivityProfile,
};
use crate::tape::{
    backward, checkpointed_backward, forward, model_to_json, run_forward, step_keys, Batch,
    ModelGraph, ParamSet, SlotKind,
};

pub use config::{DatasetSpec, TrainConfig, TrainMode};
pub use dataset::Dataset;

/// One row of the metrics log.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub predicted_compression_variance: f64,
    pub ema_grad_variance: f64,
    pub alert: bool,
    pub avg_bits_actual: f64,
    pub compression_ratio: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,loss,grad_norm,predicted_compression_variance,\
ema_grad_variance,alert,avg_bits_actual,compression_ratio,wall_ms";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.4},{:.4},{:.3}",
            self.step,
            self.loss,
            self.grad_norm,
            self.predicted_compression_variance,
            self.ema_grad_variance,
            self.alert as u8,
            self.avg_bits_actual,
            self.compression_ratio,
            self.wall_ms
        )
    }
}

/// Sensitivity snapshot taken at each refresh, one row per canonical slot.
#[derive(Debug, Clone)]
pub struct SensitivityLogRow {
    pub refresh_step: usize,
    pub slot_id: usize,
    pub slot_name: String,
    pub sensitivity: f64,
    pub bits: u8,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub mode: TrainMode,
    pub steps: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub avg_bits: f64,
    pub compression_ratio: f64,
    pub alert_count: usize,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "mode": self.mode.as_str(),
            "steps": self.steps,
            "seed": self.seed,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "avg_bits": self.avg_bits,
            "compression_ratio": self.compression_ratio,
            "alert_count": self.alert_count,
        })
        .to_string()
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: ModelGraph,
    pub params: ParamSet,
    pub metrics: Vec<MetricsRecord>,
    pub sensitivity_log: Vec<SensitivityLogRow>,
    pub summary: Summary,
}

// ── Gradient variance tracking ──────────────────────────────────────────────

/// Running vector-variance estimate: `Var ~ EMA|g|^2 - |EMA g|^2`, both
/// averages bias-corrected, clamped at zero.
#[derive(Debug, Clone)]
pub struct GradVarState {
    decay: f64,
    steps: u32,
    ema_sq: f64,
    ema_grad: Vec<f64>,
}

impl GradVarState {
    pub fn new(dim: usize, decay: f64) -> Self {
        GradVarState {
            decay,
            steps: 0,
            ema_sq: 0.0,
            ema_grad: vec![0.0; dim],
        }
    }

    pub fn variance(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        let correction = 1.0 - self.decay.powi(self.steps as i32);
        let mean_sq = self.ema_sq / correction;
        let mean_norm: f64 = self
            .ema_grad
            .iter()
            .map(|g| (g / correction) * (g / correction))
            .sum();
        (mean_sq - mean_norm).max(0.0)
    }
}

/// Folds one gradient into the running variance estimate.
pub fn update_grad_variance_ema(state: &mut GradVarState, grad: &[f64]) {
    let d = state.decay;
    state.steps = state.steps.saturating_add(1);
    let sq: f64 = grad.iter().map(|g| g * g).sum();
    state.ema_sq = d * state.ema_sq + (1.0 - d) * sq;
    for (m, &g) in state.ema_grad.iter_mut().zip(grad) {
        *m = d * *m + (1.0 - d) * g;
    }
}

/// True when the predicted compression variance dominates the observed
/// gradient variance: `V > rho * max(var, eps)`.
pub fn compression_alert(predicted: f64, grad_var: f64, rho: f64) -> bool {
    predicted > rho * grad_var.max(1e-12)
}

// ── One optimization step ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub gradient: Vec<f64>,
}

/// One SGD step with compressed context: forward (capturing compressed
/// context), backward on the decompressed context, then
/// `theta <- theta - lr * v` with optional momentum. Deterministic given the
/// keys.
#[allow(clippy::too_many_arguments)]
pub fn act_step(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    scheme: &CompressionScheme,
    keys: &[crate::numerics::StreamKey],
    learning_rate: f64,
    momentum: f64,
    velocity: &mut Vec<f64>,
    checkpointed: bool,
) -> Result<(ParamSet, StepStats)> {
    let (loss, grads) = if checkpointed {
        checkpointed_backward(model, params, batch, scheme, keys)?
    } else {
        let (loss, store) = forward(model, params, batch, scheme, keys)?;
        (loss, backward(model, &store)?)
    };
    if !loss.is_finite() {
        return Err(ActError::NonFinite("loss".into()));
    }
    grads.check_finite()?;
    let flat_g = grads.flatten();
    if velocity.len() != flat_g.len() {
        *velocity = vec![0.0; flat_g.len()];
    }
    let flat_p = params.flatten();
    let mut next = Vec::with_capacity(flat_p.len());
    for i in 0..flat_p.len() {
        velocity[i] = momentum * velocity[i] + flat_g[i];
        next.push(flat_p[i] - learning_rate * velocity[i]);
    }
    let new_params = params.from_flat(&next)?;
    let grad_norm = grads.norm();
    Ok((
        new_params,
        StepStats {
            loss,
            grad_norm,
            gradient: flat_g,
        },
    ))
}

// ── Scheme construction ─────────────────────────────────────────────────────

/// Structural description of the compressible context: canonical activation
/// slots, their dims, and the alias edges. Discovered once from a probe
/// forward pass (the sharing structure does not depend on parameter values).
struct ContextLayout {
    canonical: Vec<(usize, usize)>,
    alias_of: Vec<Option<usize>>,
}

fn probe_layout(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    group_size: usize,
) -> Result<ContextLayout> {
    let catalog = model.slot_catalog(batch.size());
    let scheme = CompressionScheme::uniform(catalog.len(), BitWidth::FULL, group_size);
    let keys = step_keys(0, 0, catalog.len());
    let (_, store) = forward(model, params, batch, &scheme, &keys)?;
    let canonical: Vec<(usize, usize)> = store
        .canonical_activation_slots()
        .into_iter()
        .map(|(slot, _)| (slot, catalog[slot].dims))
        .collect();
    let mut alias_of = vec![None; catalog.len()];
    for info in catalog.iter().filter(|s| s.kind == SlotKind::Activation) {
        if store.is_alias(info.id)? {
            let payload = store.payload_index(info.id)?;
            alias_of[info.id] = canonical
                .iter()
                .find(|&&(slot, _)| store.payload_index(slot).unwrap() == payload)
                .map(|&(slot, _)| slot);
        }
    }
    Ok(ContextLayout {
        canonical,
        alias_of,
    })
}

/// The uniform warmup width: the ladder value closest to the target average
/// (ties toward fewer bits).
fn warmup_width(avg_bits: f64) -> BitWidth {
    let mut best = LADDER[0];
    let mut best_gap = f64::INFINITY;
    for b in LADDER {
        let gap = (b.get() as f64 - avg_bits).abs();
        if gap < best_gap {
            best_gap = gap;
            best = b;
        }
    }
    best
}

/// Builds a full-catalog scheme from per-canonical-slot widths: aliases
/// inherit their owner's width, everything else stays at 32 bits.
fn scheme_from_canonical(
    num_slots: usize,
    layout: &ContextLayout,
    widths: impl Fn(usize) -> BitWidth,
    forced: impl Fn(usize) -> bool,
    group_size: usize,
) -> CompressionScheme {
    let mut scheme = CompressionScheme::uniform(num_slots, BitWidth::FULL, group_size);
    for &(slot, _) in &layout.canonical {
        if forced(slot) {
            scheme.force_fullprec(slot);
        } else {
            scheme.set_bits(slot, widths(slot));
        }
    }
    for (slot, owner) in layout.alias_of.iter().enumerate() {
        if let Some(owner) = owner {
            if forced(*owner) {
                scheme.force_fullprec(slot);
            } else {
                scheme.set_bits(slot, widths(*owner));
            }
        }
    }
    scheme
}

/// Re-solves the bit budget for the current sensitivity profile.
fn allocate_scheme(
    layout: &ContextLayout,
    profile: &SensitivityProfile,
    num_slots: usize,
    avg_bits: f64,
    group_size: usize,
) -> Result<CompressionScheme> {
    let c: Vec<f64> = layout
        .canonical
        .iter()
        .map(|&(slot, _)| profile.coefficients[slot])
        .collect();
    let dims: Vec<usize> = layout.canonical.iter().map(|&(_, d)| d).collect();
    let pinned: Vec<bool> = c.iter().map(|v| v.is_infinite()).collect();
    let budget = AllocationProblem::budget_from_average(avg_bits, &dims, &pinned);
    let problem = AllocationProblem::new(c, dims, budget, group_size);
    let solved = allocate_bits(&problem)?;
    let index_of = |slot: usize| {
        layout
            .canonical
            .iter()
            .position(|&(s, _)| s == slot)
            .expect("canonical slot")
    };
    Ok(scheme_from_canonical(
        num_slots,
        layout,
        |slot| solved.bits_for(index_of(slot)),
        |slot| solved.bits_for(index_of(slot)).is_full(),
        group_size,
    ))
}

/// Payload-weighted average bits over non-pinned canonical activation slots.
fn realized_avg_bits(layout: &ContextLayout, scheme: &CompressionScheme) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(slot, dims) in &layout.canonical {
        if scheme.bits_for(slot).is_full() {
            continue;
        }
        num += scheme.bits_for(slot).get() as f64 * dims as f64;
        den += dims as f64;
    }
    if den == 0.0 {
        32.0
    } else {
        num / den
    }
}

/// Activation payload bits (codes plus group sidecar) versus 32-bit storage.
fn realized_compression_ratio(
    layout: &ContextLayout,
    scheme: &CompressionScheme,
    group_size: usize,
) -> f64 {
    let mut compressed = 0u64;
    let mut full = 0u64;
    for &(slot, dims) in &layout.canonical {
        let b = scheme.bits_for(slot);
        full += 32 * dims as u64;
        if b.is_full() {
            compressed += 32 * dims as u64;
        } else {
            compressed += b.get() as u64 * dims as u64 + dims.div_ceil(group_size) as u64 * 64;
        }
    }
    full as f64 / compressed as f64
}

/// Predicted compression variance of the profile under a scheme, over
/// canonical slots (pinned slots contribute zero).
fn predicted_v(
    layout: &ContextLayout,
    profile: &SensitivityProfile,
    scheme: &CompressionScheme,
) -> f64 {
    let c: Vec<f64> = layout
        .canonical
        .iter()
        .map(|&(slot, _)| profile.coefficients[slot])
        .collect();
    let per_slot = CompressionScheme::from_bits(
        layout
            .canonical
            .iter()
            .map(|&(slot, _)| scheme.bits_for(slot))
            .collect(),
        scheme.group_size(),
    );
    predicted_variance(&c, &per_slot).unwrap_or(0.0)
}

// ── Evaluation ──────────────────────────────────────────────────────────────

/// Mean loss and argmax accuracy over a full dataset; dropout is disabled
/// (inverted dropout already matches expectations at train time).
pub fn evaluate(model: &ModelGraph, params: &ParamSet, data: &Dataset) -> Result<(f64, f64)> {
    let eval_model = ModelGraph {
        input_dim: model.input_dim,
        nodes: model
            .nodes
            .iter()
            .map(|n| crate::tape::Node {
                kind: match n.kind {
                    crate::tape::NodeKind::Dropout { .. } => {
                        crate::tape::NodeKind::Dropout { keep_prob: 1.0 }
                    }
                    k => k,
                },
                segment_boundary: n.segment_boundary,
            })
            .collect(),
        precision: model.precision,
    };
    let batch = data.full_batch(model.precision)?;
    let keys = step_keys(0, 0, eval_model.slot_catalog(batch.size()).len());
    let trace = run_forward(&eval_model, params, &batch, &keys)?;
    let logits = &trace.values[trace.values.len() - 2];
    let classes = logits.cols();
    let mut correct = 0usize;
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut arg = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = c;
            }
        }
        correct += (arg == label) as usize;
    }
    Ok((trace.loss, correct as f64 / batch.labels.len() as f64))
}

// ── The training loop ───────────────────────────────────────────────────────

pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let model = cfg.model_graph()?;
    let data = cfg.dataset.build(cfg.seed)?;
    if data.input_dim != model.input_dim {
        return Err(ActError::InvalidConfig(format!(
            "dataset dim {} vs model input_dim {}",
            data.input_dim, model.input_dim
        )));
    }
    let mut params = model.init_params(cfg.seed);
    let catalog = model.slot_catalog(cfg.batch_size);
    let num_slots = catalog.len();

    let probe_batch = data.batch(cfg.seed, 0, cfg.batch_size, model.precision)?;
    let layout = probe_layout(&model, &params, &probe_batch, cfg.group_size)?;

    let uniform_width = warmup_width(cfg.avg_bits);
    let mut scheme = match cfg.mode {
        TrainMode::Fp32 => CompressionScheme::uniform(num_slots, BitWidth::FULL, cfg.group_size),
        _ => scheme_from_canonical(
            num_slots,
            &layout,
            |_| uniform_width,
            |_| false,
            cfg.group_size,
        ),
    };

    let est_cfg = EstimatorConfig {
        n_pairs: cfg.sensitivity_pairs,
        min_dims_for_compression: cfg.min_slot_dims,
        ema_decay: cfg.sensitivity_ema_decay,
    };
    let mut profile: Option<SensitivityProfile> = None;
    let mut grad_var = GradVarState::new(params.total_len(), cfg.grad_ema_decay);
    let mut velocity: Vec<f64> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut sensitivity_log = Vec::new();
    let mut alert_count = 0usize;

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch = data.batch(cfg.seed, step as u64, cfg.batch_size, model.precision)?;
        let keys = step_keys(cfg.seed, step as u64, num_slots);
        let (next_params, stats) = act_step(
            &model,
            &params,
            &batch,
            &scheme,
            &keys,
            cfg.learning_rate,
            cfg.momentum,
            &mut velocity,
            cfg.mode.checkpointed(),
        )
        .map_err(|e| ActError::Diverged {
            step,
            what: e.to_string(),
        })?;
        params = next_params;
        update_grad_variance_ema(&mut grad_var, &stats.gradient);

        let v = profile
            .as_ref()
            .map(|p| predicted_v(&layout, p, &scheme))
            .unwrap_or(0.0);
        let alert = profile.is_some()
            && cfg.mode != TrainMode::Fp32
            && compression_alert(v, grad_var.variance(), cfg.alert_threshold);
        if alert {
            alert_count += 1;
        }
        metrics.push(MetricsRecord {
            step,
            loss: stats.loss,
            grad_norm: stats.grad_norm,
            predicted_compression_variance: v,
            ema_grad_variance: grad_var.variance(),
            alert,
            avg_bits_actual: if cfg.mode == TrainMode::Fp32 {
                32.0
            } else {
                realized_avg_bits(&layout, &scheme)
            },
            compression_ratio: if cfg.mode == TrainMode::Fp32 {
                1.0
            } else {
                realized_compression_ratio(&layout, &scheme, cfg.group_size)
            },
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        if cfg.mode.adapts() && (step + 1) % cfg.adapt_interval == 0 && step + 1 < cfg.steps {
            let episode = GradientEpisode {
                model: &model,
                params: &params,
                batch: &batch,
                scheme: &scheme,
                checkpointed: cfg.mode.checkpointed(),
            };
            let fresh = estimate_sensitivities(
                &episode,
                crate::numerics::mix64(cfg.seed ^ (step as u64)),
                step as u64,
                &est_cfg,
            )?;
            let merged = match profile {
                Some(ref old) => update_profile(old, &fresh)?,
                None => fresh,
            };
            scheme = allocate_scheme(&layout, &merged, num_slots, cfg.avg_bits, cfg.group_size)?;
            for &(slot, _) in &layout.canonical {
                sensitivity_log.push(SensitivityLogRow {
                    refresh_step: step + 1,
                    slot_id: slot,
                    slot_name: catalog[slot].name.clone(),
                    sensitivity: merged.coefficients[slot],
                    bits: scheme.bits_for(slot).get(),
                });
            }
            profile = Some(merged);
        }
    }

    let (final_loss, final_accuracy) = evaluate(&model, &params, &data)?;
    let last = metrics.last().expect("steps >= 1");
    let summary = Summary {
        mode: cfg.mode,
        steps: cfg.steps,
        seed: cfg.seed,
        final_loss,
        final_accuracy,
        avg_bits: last.avg_bits_actual,
        compression_ratio: last.compression_ratio,
        alert_count,
    };
    if cfg.fail_on_alert && alert_count > 0 {
        return Err(ActError::Diverged {
            step: cfg.steps,
            what: format!("{alert_count} compression alerts raised"),
        });
    }
    Ok(TrainOutput {
        model,
        params,
        metrics,
        sensitivity_log,
        summary,
    })
}

// ── Artifacts ───────────────────────────────────────────────────────────────

pub fn metrics_to_csv(metrics: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn sensitivity_log_to_csv(rows: &[SensitivityLogRow]) -> String {
    let mut out = String::from("refresh_step,slot_id,slot_name,c_l,bits\n");
    for r in rows {
        let c = if r.sensitivity.is_infinite() {
            "inf".into()
        } else {
            format!("{:.9e}", r.sensitivity)
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.refresh_step, r.slot_id, r.slot_name, c, r.bits
        ));
    }
    out
}

/// Writes metrics, sensitivity log, summary, and a final checkpoint.
pub fn write_artifacts(out_dir: &Path, output: &TrainOutput) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&output.metrics))?;
    std::fs::write(
        out_dir.join("sensitivity_log.csv"),
        sensitivity_log_to_csv(&output.sensitivity_log),
    )?;
    std::fs::write(out_dir.join("summary.json"), output.summary.to_json())?;
    write_checkpoint(&out_dir.join("checkpoint"), &output.model, &output.params)?;
    Ok(())
}

/// Checkpoint layout: `manifest.json` describing the model and tensor
/// offsets, plus `params.bin` holding the concatenated tensor records.
pub fn write_checkpoint(dir: &Path, model: &ModelGraph, params: &ParamSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (i, (t, spec)) in params.tensors.iter().zip(model.param_specs()).enumerate() {
        let offset = blob.len();
        write_tensor(&mut blob, t)?;
        entries.push(serde_json::json!({
            "index": i,
            "node": spec.node,
            "role": match spec.role {
                crate::tape::ParamRole::Weight => "weight",
                crate::tape::ParamRole::Bias => "bias",
            },
            "shape": spec.shape,
            "offset_bytes": offset,
            "len_bytes": blob.len() - offset,
        }));
    }
    let manifest = serde_json::json!({
        "format": "act-checkpoint-v1",
        "model": serde_json::from_str::<serde_json::Value>(&model_to_json(model))?,
        "tensors": entries,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    std::fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(ModelGraph, ParamSet)> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let model = crate::tape::model_from_json(&serde_json::to_string(
        manifest
            .get("model")
            .ok_or_else(|| ActError::BadFormat("manifest missing model".into()))?,
    )?)?;
    let blob = std::fs::read(dir.join("params.bin"))?;
    let entries = manifest["tensors"]
        .as_array()
        .ok_or_else(|| ActError::BadFormat("manifest missing tensors".into()))?;
    let mut tensors: Vec<Tensor> = Vec::with_capacity(entries.len());
    for e in entries {
        let off = e["offset_bytes"].as_u64().unwrap_or(0) as usize;
        let len = e["len_bytes"].as_u64().unwrap_or(0) as usize;
        if off + len > blob.len() {
            return Err(ActError::BadFormat("checkpoint blob truncated".into()));
        }
        tensors.push(crate::numerics::read_tensor(&mut &blob[off..off + len])?);
    }
    Ok((model, ParamSet { tensors }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{counter_normal, StreamKey};

    fn base_config(mode: &str, steps: usize) -> TrainConfig {
        let json = format!(
            r#"{{
            "learning_rate": 0.2,
            "steps": {steps},
            "batch_size": 16,
            "seed": 7,
            "mode": "{mode}",
            "adapt_interval": 20,
            "group_size": 64,
            "dataset": {{"kind": "two_gaussians", "num_samples": 256, "input_dim": 8,
                         "separation": 4.0, "noise": 1.0}},
            "model": {{"input_dim": 8, "precision": "single", "nodes": [
                {{"kind": "linear", "out_dim": 16}},
                {{"kind": "tanh"}},
                {{"kind": "linear", "out_dim": 2}},
                {{"kind": "softmax_ce_loss", "classes": 2}}
            ]}}
        }}"#
        );
        TrainConfig::from_json(&json).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let cfg = base_config("fp32", 1);
        let model = cfg.model_graph().unwrap();
        let data = cfg.dataset.build(cfg.seed).unwrap();
        let params = model.init_params(cfg.seed);
        let batch = data.batch(cfg.seed, 0, 16, model.precision).unwrap();
        let n = model.slot_catalog(16).len();
        let scheme = CompressionScheme::uniform(n, BitWidth::FULL, 64);
        let keys = step_keys(cfg.seed, 0, n);
        let mut v = Vec::new();
        let (next, _) = act_step(
            &model, &params, &batch, &scheme, &keys, 0.0, 0.0, &mut v, false,
        )
        .unwrap();
        for (a, b) in next.tensors.iter().zip(&params.tensors) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fp32_mode_matches_a_plain_sgd_loop() {
        let cfg = base_config("fp32", 5);
        let out = train(&cfg).unwrap();

        // Reference loop: same init, batches, forward/backward, update rule.
        let model = cfg.model_graph().unwrap();
        let data = cfg.dataset.build(cfg.seed).unwrap();
        let mut params = model.init_params(cfg.seed);
        let n = model.slot_catalog(cfg.batch_size).len();
        let scheme = CompressionScheme::uniform(n, BitWidth::FULL, cfg.group_size);
        for step in 0..cfg.steps {
            let batch = data
                .batch(cfg.seed, step as u64, cfg.batch_size, model.precision)
                .unwrap();
            let keys = step_keys(cfg.seed, step as u64, n);
            let (_, store) = forward(&model, &params, &batch, &scheme, &keys).unwrap();
            let g = backward(&model, &store).unwrap();
            let flat_p = params.flatten();
            let flat_g = g.flatten();
            let next: Vec<f64> = flat_p
                .iter()
                .zip(&flat_g)
                .map(|(p, g)| p - cfg.learning_rate * g)
                .collect();
            params = params.from_flat(&next).unwrap();
        }
        assert_eq!(out.params.flatten(), params.flatten());
    }

    #[test]
    fn metrics_are_reproducible_modulo_wall_clock() {
        let cfg = base_config("adaptive_b", 25);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let strip = |m: &[MetricsRecord]| {
            m.iter()
                .map(|r| {
                    let row = r.to_csv_row();
                    row.rsplit_once(',').unwrap().0.to_string()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.params.flatten(), b.params.flatten());
    }

    #[test]
    fn adaptive_average_bits_stay_near_target() {
        let cfg = base_config("adaptive_b", 41);
        let out = train(&cfg).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(
            (last.avg_bits_actual - cfg.avg_bits).abs() / cfg.avg_bits <= 0.05,
            "avg bits {}",
            last.avg_bits_actual
        );
        assert!(last.compression_ratio > 1.0);
        // The sensitivity log captured both refreshes.
        assert!(out.sensitivity_log.iter().any(|r| r.refresh_step == 20));
        assert!(out.sensitivity_log.iter().any(|r| r.refresh_step == 40));
    }

    #[test]
    fn fp32_summary_reports_unit_ratio() {
        let cfg = base_config("fp32", 3);
        let out = train(&cfg).unwrap();
        assert_eq!(out.summary.compression_ratio, 1.0);
        assert_eq!(out.summary.mode.as_str(), "fp32");
    }

    #[test]
    fn grad_variance_ema_examples() {
        // Constant gradient stream: variance goes to zero.
        let mut st = GradVarState::new(3, 0.9);
        for _ in 0..500 {
            update_grad_variance_ema(&mut st, &[1.0, -2.0, 0.5]);
        }
        assert!(st.variance() < 1e-6, "{}", st.variance());

        // Zero gradients: exactly zero.
        let mut st = GradVarState::new(2, 0.99);
        for _ in 0..10 {
            update_grad_variance_ema(&mut st, &[0.0, 0.0]);
        }
        assert_eq!(st.variance(), 0.0);

        // I.i.d. standard normal entries in 100 dims: estimate near 100
        // within 20% after 1e3 updates.
        let mut st = GradVarState::new(100, 0.99);
        let key = StreamKey::new(31, 0);
        for t in 0..1000u64 {
            let g: Vec<f64> = (0..100).map(|d| counter_normal(key, t * 100 + d)).collect();
            update_grad_variance_ema(&mut st, &g);
        }
        let v = st.variance();
        assert!((80.0..=120.0).contains(&v), "variance {v}");
    }

    #[test]
    fn alert_contract() {
        assert!(!compression_alert(0.0, 1.0, 0.5));
        assert!(compression_alert(1e-6, 0.0, 0.5));
        assert!(compression_alert(0.6, 1.0, 0.5));
        assert!(!compression_alert(0.4, 1.0, 0.5));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = base_config("fp32", 2);
        let out = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), &out.model, &out.params).unwrap();
        let (model, params) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(model, out.model);
        assert_eq!(params.flatten(), out.params.flatten());
    }

    #[test]
    fn divergence_is_reported() {
        // Relu with a huge step: activations and gradients feed back on each
        // other until single-precision parameters overflow. (Tanh cannot
        // diverge this way; its saturated gradient is exactly zero.)
        let json = base_config("fp32", 30).to_json().replace("tanh", "relu");
        let mut cfg = TrainConfig::from_json(&json).unwrap();
        cfg.learning_rate = 1e20;
        match train(&cfg) {
            Err(ActError::Diverged { .. }) => {}
            Ok(out) => panic!(
                "expected divergence, got final loss {}",
                out.summary.final_loss
            ),
            Err(other) => panic!("expected divergence, got {other}"),
        }
    }
}
