//! Empirical verification of the variance theory on smooth models.
//!
//! The compressed-context gradient `g(Q(h))` is compared against its
//! linearization `g(h) + J dh` where `dh = dequantize(quantize(h)) - h` and
//! the Jacobian-vector product is taken by central finite differences through
//! the backward map. Three experiments probe the theory at desk scale:
//!
//! - linearization error vs. compression noise (the error should scale
//!   linearly in `Var[dh]`),
//! - decomposition of total gradient variance into data-sampling and
//!   compression parts,
//! - additivity of per-slot compression variances.
//!
//! Everything here requires double precision and a model without kinked
//! operators (no relu, no maxpool).

use rayon::prelude::*;

use crate::error::{ActError, Result};
use crate::numerics::Precision;
use crate::quantizer::{BitWidth, CompressionScheme};
use crate::sensitivity::{brute_force_sensitivity, vector_variance, GradientEpisode};
use crate::tape::{backward, forward, step_keys, Batch, ContextStore, ModelGraph, ParamSet};
use crate::trainer::Dataset;

// ── Report plumbing ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub label: String,
    pub measured: f64,
    pub predicted: f64,
    pub ratio: f64,
    pub tolerance: String,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ReportSection {
    pub name: String,
    pub rows: Vec<ReportRow>,
    pub passed: bool,
    pub notes: String,
}

#[derive(Debug, Clone, Default)]
pub struct TheoryReport {
    pub sections: Vec<ReportSection>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.sections.iter().all(|s| s.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,label,measured,predicted,ratio,tolerance,verdict\n");
        for s in &self.sections {
            for r in &s.rows {
                out.push_str(&format!(
                    "{},{},{:.9e},{:.9e},{:.6},{},{}\n",
                    s.name,
                    r.label,
                    r.measured,
                    r.predicted,
                    r.ratio,
                    r.tolerance,
                    if r.pass { "pass" } else { "FAIL" }
                ));
            }
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if s.passed { "PASS" } else { "FAIL" },
                s.name,
                s.notes
            ));
        }
        out
    }
}

fn require_smooth(model: &ModelGraph) -> Result<()> {
    if model.precision != Precision::Double {
        return Err(ActError::InvalidModel(
            "theory checks require double precision".into(),
        ));
    }
    if let Some(node) = model.nodes.iter().find(|n| !n.kind.is_smooth()) {
        return Err(ActError::InvalidModel(format!(
            "theory checks require smooth operators, found {}",
            node.kind.name()
        )));
    }
    Ok(())
}

// ── Gradient-at-context plumbing ────────────────────────────────────────────

/// Raw context store plus the flattened context and gradient at that point.
struct BasePoint {
    store: ContextStore,
    h: Vec<f64>,
    g: Vec<f64>,
}

fn base_point(model: &ModelGraph, params: &ParamSet, batch: &Batch) -> Result<BasePoint> {
    let num_slots = model.slot_catalog(batch.size()).len();
    let scheme = CompressionScheme::uniform(num_slots, BitWidth::FULL, 256);
    let keys = step_keys(0, 0, num_slots);
    let (_, store) = forward(model, params, batch, &scheme, &keys)?;
    let h = store.activation_vector()?;
    let g = backward(model, &store)?.flatten();
    Ok(BasePoint { store, h, g })
}

fn gradient_at(model: &ModelGraph, base: &BasePoint, h: &[f64]) -> Result<Vec<f64>> {
    let store = base.store.with_activation_vector(h)?;
    Ok(backward(model, &store)?.flatten())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The linearized compressed-context gradient `g(h) + J dh`, with
/// `dh = dequantize(quantize(h)) - h` drawn under `scheme` and `key_seed`,
/// and `J dh` taken by central finite differences through the backward map.
/// Returns the pair `(g_hat, g_at_quantized)` so callers can compare.
pub fn linearized_gradient(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    scheme: &CompressionScheme,
    key_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    require_smooth(model)?;
    let base = base_point(model, params, batch)?;
    linearized_gradient_from(model, params, batch, scheme, key_seed, &base)
}

fn linearized_gradient_from(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    scheme: &CompressionScheme,
    key_seed: u64,
    base: &BasePoint,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let num_slots = scheme.num_slots();
    let keys = step_keys(key_seed, 0, num_slots);
    let (_, qstore) = forward(model, params, batch, scheme, &keys)?;
    let h_q = qstore.activation_vector()?;
    let g_q = backward(model, &qstore)?.flatten();

    let dh: Vec<f64> = h_q.iter().zip(&base.h).map(|(a, b)| a - b).collect();
    let dh_norm = norm(&dh);
    if dh_norm == 0.0 {
        return Ok((base.g.clone(), g_q));
    }
    let t = 1e-3 * norm(&base.h) / dh_norm.max(1e-300);
    let h_plus: Vec<f64> = base.h.iter().zip(&dh).map(|(h, d)| h + t * d).collect();
    let h_minus: Vec<f64> = base.h.iter().zip(&dh).map(|(h, d)| h - t * d).collect();
    let g_plus = gradient_at(model, base, &h_plus)?;
    let g_minus = gradient_at(model, base, &h_minus)?;
    let g_hat: Vec<f64> = base
        .g
        .iter()
        .zip(g_plus.iter().zip(&g_minus))
        .map(|(g, (p, m))| g + (p - m) / (2.0 * t))
        .collect();
    Ok((g_hat, g_q))
}

// ── Experiment 1: linearization error scaling ───────────────────────────────

/// For each width, measures the mean linearization error
/// `E|g(Q(h)) - g_hat|` and the mean compression noise `E|dh|^2`, then fits
/// the log-log slope across widths. A slope near 1 confirms the error is of
/// the order of the compression variance.
#[allow(clippy::too_many_arguments)]
pub fn linearization_error_scan(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    widths: &[BitWidth],
    n_draws: usize,
    group_size: usize,
    seed: u64,
) -> Result<(ReportSection, f64)> {
    require_smooth(model)?;
    let base = base_point(model, params, batch)?;
    let num_slots = model.slot_catalog(batch.size()).len();
    let mut points = Vec::new();
    let mut rows = Vec::new();
    for &b in widths {
        if b.is_full() {
            // Zero error by construction; excluded from the fit.
            rows.push(ReportRow {
                label: "b=32".into(),
                measured: 0.0,
                predicted: 0.0,
                ratio: 1.0,
                tolerance: "exact".into(),
                pass: true,
            });
            continue;
        }
        let scheme = CompressionScheme::uniform(num_slots, b, group_size);
        let results: Vec<(f64, f64)> = (0..n_draws as u64)
            .into_par_iter()
            .map(|i| {
                let draw_seed = crate::numerics::mix64(seed ^ ((b.get() as u64) << 32) ^ i);
                let (g_hat, g_q) =
                    linearized_gradient_from(model, params, batch, &scheme, draw_seed, &base)?;
                let err: f64 = g_q
                    .iter()
                    .zip(&g_hat)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                let keys = step_keys(draw_seed, 0, num_slots);
                let (_, qstore) = forward(model, params, batch, &scheme, &keys)?;
                let h_q = qstore.activation_vector()?;
                let dh_sq: f64 = h_q
                    .iter()
                    .zip(&base.h)
                    .map(|(a, h)| (a - h) * (a - h))
                    .sum();
                Ok((err, dh_sq))
            })
            .collect::<Result<_>>()?;
        let mean_err = results.iter().map(|r| r.0).sum::<f64>() / n_draws as f64;
        let mean_var = results.iter().map(|r| r.1).sum::<f64>() / n_draws as f64;
        points.push((mean_var.ln(), mean_err.ln()));
        rows.push(ReportRow {
            label: format!("b={b}"),
            measured: mean_err,
            predicted: mean_var,
            ratio: mean_err / mean_var,
            tolerance: "slope in [0.8, 1.2]".into(),
            pass: true,
        });
    }
    // Least-squares slope of ln(err) on ln(var).
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    let passed = (0.8..=1.2).contains(&slope);
    let section = ReportSection {
        name: "linearization_error_scan".into(),
        rows,
        passed,
        notes: format!(
            "log-log slope of linearization error vs compression noise: {slope:.4} \
             (expected in [0.8, 1.2])"
        ),
    };
    Ok((section, slope))
}

// ── Experiment 2: variance decomposition ────────────────────────────────────

/// Splits total gradient variance over joint (datum, key) draws into the
/// data-sampling part (no compression) and the average per-datum compression
/// part, reporting the relative residual.
#[allow(clippy::too_many_arguments)]
pub fn variance_decomposition(
    model: &ModelGraph,
    params: &ParamSet,
    data: &Dataset,
    bits: BitWidth,
    n_data: usize,
    n_keys: usize,
    group_size: usize,
    seed: u64,
) -> Result<(ReportSection, f64)> {
    require_smooth(model)?;
    if data.num_samples < n_data || n_data == 0 {
        return Err(ActError::InvalidConfig(format!(
            "need {n_data} samples, dataset has {}",
            data.num_samples
        )));
    }
    let num_slots = model.slot_catalog(1).len();
    let scheme = CompressionScheme::uniform(num_slots, bits, group_size);

    let per_datum: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n_data)
        .into_par_iter()
        .map(|i| {
            let batch = Batch {
                x: crate::numerics::Tensor::matrix(
                    1,
                    data.input_dim,
                    data.features[i * data.input_dim..(i + 1) * data.input_dim].to_vec(),
                    Precision::Double,
                )?,
                labels: vec![data.labels[i]],
            };
            let base = base_point(model, params, &batch)?;
            let draws: Vec<Vec<f64>> = (0..n_keys as u64)
                .map(|k| {
                    let keys = step_keys(crate::numerics::mix64(seed ^ k), 0, num_slots);
                    let (_, store) = forward(model, params, &batch, &scheme, &keys)?;
                    Ok(backward(model, &store)?.flatten())
                })
                .collect::<Result<_>>()?;
            Ok((base.g, draws))
        })
        .collect::<Result<_>>()?;

    let raw: Vec<Vec<f64>> = per_datum.iter().map(|(g, _)| g.clone()).collect();
    let sampling = vector_variance(&raw);
    let compression = per_datum
        .iter()
        .map(|(_, draws)| vector_variance(draws))
        .sum::<f64>()
        / n_data as f64;
    let all: Vec<Vec<f64>> = per_datum
        .iter()
        .flat_map(|(_, draws)| draws.iter().cloned())
        .collect();
    let total = vector_variance(&all);
    let g_scale = per_datum
        .iter()
        .map(|(g, _)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n_data as f64;
    let residual = if total <= g_scale * 1e-18 {
        0.0
    } else {
        (total - sampling - compression).abs() / total
    };
    let passed = residual < 0.15;
    let section = ReportSection {
        name: "variance_decomposition".into(),
        rows: vec![
            ReportRow {
                label: "sampling".into(),
                measured: sampling,
                predicted: f64::NAN,
                ratio: if total > 0.0 { sampling / total } else { 0.0 },
                tolerance: "-".into(),
                pass: true,
            },
            ReportRow {
                label: "compression".into(),
                measured: compression,
                predicted: f64::NAN,
                ratio: if total > 0.0 { compression / total } else { 0.0 },
                tolerance: "-".into(),
                pass: true,
            },
            ReportRow {
                label: "total".into(),
                measured: total,
                predicted: sampling + compression,
                ratio: residual,
                tolerance: "residual < 0.15".into(),
                pass: passed,
            },
        ],
        passed,
        notes: format!(
            "total {total:.4e} vs sampling {sampling:.4e} + compression {compression:.4e}; \
             relative residual {residual:.4}"
        ),
    };
    Ok((section, residual))
}

// ── Experiment 3: additive variance structure ───────────────────────────────

/// Measures gradient variance with every slot compressed against the sum of
/// single-slot variances, and compares that sum with the sensitivity-model
/// prediction from brute-force coefficients.
pub fn additivity_check(
    model: &ModelGraph,
    params: &ParamSet,
    batch: &Batch,
    bits: BitWidth,
    n_keys: usize,
    group_size: usize,
    seed: u64,
) -> Result<(ReportSection, f64)> {
    require_smooth(model)?;
    let num_slots = model.slot_catalog(batch.size()).len();
    let all_scheme = CompressionScheme::uniform(num_slots, bits, group_size);
    let episode = GradientEpisode {
        model,
        params,
        batch,
        scheme: &all_scheme,
        checkpointed: false,
    };
    let targets = episode.estimation_targets()?;

    let var_under = |scheme: &CompressionScheme| -> Result<f64> {
        let grads: Vec<Vec<f64>> = (0..n_keys as u64)
            .into_par_iter()
            .map(|k| {
                let keys = step_keys(crate::numerics::mix64(seed ^ (k + 1)), 0, num_slots);
                let (_, store) = forward(model, params, batch, scheme, &keys)?;
                Ok(backward(model, &store)?.flatten())
            })
            .collect::<Result<_>>()?;
        Ok(vector_variance(&grads))
    };

    let v_all = var_under(&all_scheme)?;
    // Machine-zero floor relative to the gradient scale: pure-roundoff
    // variances (all slots effectively lossless) must not produce junk
    // ratios.
    let g_scale = {
        let keys = step_keys(1, 0, num_slots);
        let (_, store) = forward(model, params, batch, &all_scheme, &keys)?;
        backward(model, &store)?.sq_norm()
    };
    let zero_floor = g_scale * 1e-18;
    let mut rows = Vec::new();
    let mut sum_single = 0.0;
    let mut predicted_sum = 0.0;
    for &(slot, _) in &targets {
        let mut single = CompressionScheme::uniform(num_slots, BitWidth::FULL, group_size);
        single.set_bits(slot, bits);
        let v_l = var_under(&single)?;
        sum_single += v_l;
        let c_l = brute_force_sensitivity(&episode, slot, n_keys.max(200), seed ^ 0xbf)?;
        let pred = c_l * bits.s_factor();
        predicted_sum += pred;
        rows.push(ReportRow {
            label: format!("slot {slot}"),
            measured: v_l,
            predicted: pred,
            ratio: if pred > 0.0 { v_l / pred } else { 1.0 },
            tolerance: "-".into(),
            pass: true,
        });
    }
    let residual = if v_all <= zero_floor {
        0.0
    } else {
        (v_all - sum_single).abs() / v_all
    };
    let passed = residual < 0.2;
    rows.push(ReportRow {
        label: "sum vs all".into(),
        measured: v_all,
        predicted: sum_single,
        ratio: residual,
        tolerance: "residual < 0.2".into(),
        pass: passed,
    });
    rows.push(ReportRow {
        label: "sum vs model".into(),
        measured: sum_single,
        predicted: predicted_sum,
        ratio: if predicted_sum > 0.0 {
            sum_single / predicted_sum
        } else {
            1.0
        },
        tolerance: "informational".into(),
        pass: true,
    });
    let section = ReportSection {
        name: "additivity_check".into(),
        rows,
        passed,
        notes: format!(
            "V_all {v_all:.4e} vs sum of single-slot variances {sum_single:.4e} \
             (residual {residual:.4}); sensitivity-model prediction {predicted_sum:.4e}"
        ),
    };
    Ok((section, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{counter_rng, StreamKey, Tensor};
    use crate::tape::{Node, NodeKind};

    fn make_batch(model: &ModelGraph, batch: usize, seed: u64, classes: usize) -> Batch {
        let key = StreamKey::new(seed, 7);
        let data: Vec<f64> = (0..batch * model.input_dim)
            .map(|i| counter_rng(key, i as u64) * 2.0 - 1.0)
            .collect();
        let labels = (0..batch)
            .map(|i| (counter_rng(key, (1000 + i) as u64) * classes as f64) as usize)
            .collect();
        Batch {
            x: Tensor::matrix(batch, model.input_dim, data, Precision::Double).unwrap(),
            labels,
        }
    }

    fn tanh_mlp() -> (ModelGraph, ParamSet, Batch) {
        let model = ModelGraph::mlp(6, &[10, 8], 3, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(3);
        let batch = make_batch(&model, 8, 4, 3);
        (model, params, batch)
    }

    #[test]
    fn rejects_kinked_or_single_precision_models() {
        let relu = ModelGraph::mlp(4, &[4], 2, NodeKind::Relu, Precision::Double).unwrap();
        let p = relu.init_params(0);
        let b = make_batch(&relu, 4, 0, 2);
        let scheme = CompressionScheme::uniform(relu.slot_catalog(4).len(), BitWidth::FULL, 64);
        assert!(linearized_gradient(&relu, &p, &b, &scheme, 0).is_err());

        let single = ModelGraph::mlp(4, &[4], 2, NodeKind::Tanh, Precision::Single).unwrap();
        let p = single.init_params(0);
        let b = Batch {
            x: Tensor::matrix(2, 4, vec![0.1; 8], Precision::Single).unwrap(),
            labels: vec![0, 1],
        };
        let scheme = CompressionScheme::uniform(single.slot_catalog(2).len(), BitWidth::FULL, 64);
        assert!(linearized_gradient(&single, &p, &b, &scheme, 0).is_err());
    }

    #[test]
    fn full_precision_linearization_is_exact() {
        let (model, params, batch) = tanh_mlp();
        let n = model.slot_catalog(batch.size()).len();
        let scheme = CompressionScheme::uniform(n, BitWidth::FULL, 64);
        let (g_hat, g_q) = linearized_gradient(&model, &params, &batch, &scheme, 9).unwrap();
        assert_eq!(g_hat, g_q, "32-bit scheme means dh = 0");
    }

    #[test]
    fn affine_gradient_linearizes_exactly() {
        // Single linear + loss with only the input slot compressed: the
        // parameter gradient is affine in the saved input, so the
        // linearization reproduces g(Q(h)) up to finite-difference roundoff.
        let model = ModelGraph::new(
            5,
            vec![
                Node {
                    kind: NodeKind::Linear { out_dim: 3 },
                    segment_boundary: false,
                },
                Node {
                    kind: NodeKind::SoftmaxCrossEntropy {
                        classes: 3,
                        loss_scale: 1.0,
                    },
                    segment_boundary: false,
                },
            ],
            Precision::Double,
        )
        .unwrap();
        let params = model.init_params(5);
        let batch = make_batch(&model, 6, 6, 3);
        let n = model.slot_catalog(6).len();
        let mut scheme = CompressionScheme::uniform(n, BitWidth::FULL, 64);
        scheme.set_bits(0, BitWidth::new(3).unwrap());
        let (g_hat, g_q) = linearized_gradient(&model, &params, &batch, &scheme, 11).unwrap();
        let err: f64 = g_hat
            .iter()
            .zip(&g_q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = norm(&g_q).max(1e-12);
        assert!(err / scale < 1e-8, "relative err {}", err / scale);
    }

    #[test]
    fn high_width_linearization_error_is_small() {
        let (model, params, batch) = tanh_mlp();
        let n = model.slot_catalog(batch.size()).len();
        let scheme = CompressionScheme::uniform(n, BitWidth::new(8).unwrap(), 64);
        let base = base_point(&model, &params, &batch).unwrap();
        let (g_hat, g_q) = linearized_gradient(&model, &params, &batch, &scheme, 123).unwrap();
        let err: f64 = g_hat
            .iter()
            .zip(&g_q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            err / norm(&base.g) < 1e-3,
            "relative error {}",
            err / norm(&base.g)
        );
    }

    #[test]
    fn error_scan_slope_is_near_one() {
        let (model, params, batch) = tanh_mlp();
        let widths: Vec<BitWidth> = [3u8, 4, 5, 6, 8]
            .iter()
            .map(|&b| BitWidth::new(b).unwrap())
            .collect();
        let (section, slope) =
            linearization_error_scan(&model, &params, &batch, &widths, 120, 64, 31).unwrap();
        assert!(section.passed, "{}", section.notes);
        assert!((0.8..=1.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn shrinking_the_context_shrinks_noise_and_error() {
        // Rescaling inputs by 1/2 shrinks group ranges, so measured noise
        // and linearization error both fall.
        let (model, params, batch) = tanh_mlp();
        let widths = [BitWidth::new(4).unwrap()];
        let (sec_full, _) =
            linearization_error_scan(&model, &params, &batch, &widths, 60, 64, 77).unwrap();
        let half = Batch {
            x: batch.x.map(|v| 0.5 * v).unwrap(),
            labels: batch.labels.clone(),
        };
        let (sec_half, _) =
            linearization_error_scan(&model, &params, &half, &widths, 60, 64, 77).unwrap();
        let (e_full, v_full) = (sec_full.rows[0].measured, sec_full.rows[0].predicted);
        let (e_half, v_half) = (sec_half.rows[0].measured, sec_half.rows[0].predicted);
        assert!(v_half < v_full, "noise {v_half} !< {v_full}");
        assert!(e_half < e_full, "error {e_half} !< {e_full}");
    }

    #[test]
    fn decomposition_residual_small_at_4_bits() {
        let model = ModelGraph::mlp(6, &[10], 2, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(7);
        let data = crate::trainer::dataset::two_gaussians(64, 6, 3.0, 1.0, 9).unwrap();
        let (section, residual) = variance_decomposition(
            &model,
            &params,
            &data,
            BitWidth::new(4).unwrap(),
            32,
            32,
            64,
            5,
        )
        .unwrap();
        assert!(section.passed, "residual {residual}: {}", section.notes);
    }

    #[test]
    fn decomposition_degenerates_cleanly_at_full_width() {
        let model = ModelGraph::mlp(6, &[8], 2, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(8);
        let data = crate::trainer::dataset::two_gaussians(16, 6, 3.0, 1.0, 10).unwrap();
        let (section, residual) =
            variance_decomposition(&model, &params, &data, BitWidth::FULL, 8, 4, 64, 6).unwrap();
        // Compression term is exactly zero and total equals sampling.
        assert_eq!(section.rows[1].measured, 0.0);
        assert!(residual < 1e-12, "residual {residual}");

        // Single datum: sampling variance is zero, total equals compression.
        let (section, _) = variance_decomposition(
            &model,
            &params,
            &data,
            BitWidth::new(4).unwrap(),
            1,
            16,
            64,
            7,
        )
        .unwrap();
        assert_eq!(section.rows[0].measured, 0.0);
    }

    #[test]
    fn additivity_holds_at_high_width() {
        let model = ModelGraph::mlp(6, &[10], 3, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(12);
        let batch = make_batch(&model, 8, 13, 3);
        let (section, residual) = additivity_check(
            &model,
            &params,
            &batch,
            BitWidth::new(8).unwrap(),
            300,
            64,
            15,
        )
        .unwrap();
        assert!(section.passed, "residual {residual}: {}", section.notes);
        // The sensitivity-model prediction lands in the same ballpark.
        let last = section.rows.last().unwrap();
        assert!(
            (0.5..=2.0).contains(&last.ratio),
            "prediction ratio {}",
            last.ratio
        );
    }

    #[test]
    fn everything_vanishes_at_full_width() {
        let model = ModelGraph::mlp(6, &[8], 2, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(20);
        let batch = make_batch(&model, 6, 21, 2);
        let (_, residual) =
            additivity_check(&model, &params, &batch, BitWidth::FULL, 50, 64, 22).unwrap();
        assert_eq!(residual, 0.0);
    }

    #[test]
    fn report_renders() {
        let (model, params, batch) = tanh_mlp();
        let widths = [BitWidth::new(4).unwrap(), BitWidth::FULL];
        let (section, _) =
            linearization_error_scan(&model, &params, &batch, &widths, 20, 64, 1).unwrap();
        let report = TheoryReport {
            sections: vec![section],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("section,label"));
        assert!(csv.contains("b=32"));
        assert!(report.summary_text().contains("linearization_error_scan"));
    }
}
