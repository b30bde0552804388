//! Pinned-seed verification suites behind the CLI's `verify` command.
//!
//! Each suite runs a fixed experiment with pinned seeds and the tolerances
//! used by the acceptance tests, returning one pass/fail line per check.

use crate::allocator::{allocate_bits, exhaustive_allocate, predicted_variance, AllocationProblem};
use crate::error::Result;
use crate::numerics::{counter_rng, KahanSum, Precision, StreamKey, Tensor};
use crate::quantizer::{
    conditioned_group_stats, dequantize, quantize, BitWidth, LADDER,
};
use crate::tape::{Batch, ModelGraph, NodeKind, ParamSet};
use crate::theorycheck::{
    additivity_check, linearization_error_scan, variance_decomposition, TheoryReport,
};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteResult {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out.push_str(&format!(
            "suite {}: {}\n",
            self.suite,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

/// The reference smooth model for theory suites: a three-hidden-layer tanh
/// MLP with five distinct compressible context payloads, under 1000
/// parameters.
pub fn reference_tanh_mlp() -> (ModelGraph, ParamSet, Batch) {
    let model =
        ModelGraph::mlp(8, &[12, 12, 12], 3, NodeKind::Tanh, Precision::Double).unwrap();
    let params = model.init_params(1001);
    let key = StreamKey::new(2002, 5);
    let batch_size = 16;
    let data: Vec<f64> = (0..batch_size * 8)
        .map(|i| counter_rng(key, i as u64) * 2.0 - 1.0)
        .collect();
    let labels: Vec<usize> = (0..batch_size)
        .map(|i| (counter_rng(key, (5000 + i) as u64) * 3.0) as usize)
        .collect();
    let batch = Batch {
        x: Tensor::matrix(batch_size, 8, data, Precision::Double).unwrap(),
        labels,
    };
    (model, params, batch)
}

/// A fixed 1024-element suite tensor whose quantization levels stay away
/// from half-integer rounding points at every ladder width, so per-element
/// Bernoulli variances sit strictly below the analytic bound. Values lie on
/// the 255-step grid over [0, 1] with each 256-group containing both
/// endpoints.
pub fn quantizer_suite_tensor() -> Tensor {
    let key = StreamKey::new(424_242, 0);
    // Admissible grid positions: frac(k * L / 255) outside (0.4, 0.6) for
    // every L in {3, 7, 15}; k = 0 and k = 255 are always admissible.
    let admissible: Vec<u64> = (0..=255u64)
        .filter(|&k| {
            [3u64, 7, 15].iter().all(|&l| {
                let frac = (k * l) % 255;
                let f = frac as f64 / 255.0;
                !(0.4..0.6).contains(&f)
            })
        })
        .collect();
    let mut data = Vec::with_capacity(1024);
    for g in 0..4 {
        for j in 0..256 {
            let v = match j {
                0 => 0.0,
                1 => 255.0,
                _ => {
                    let u = counter_rng(key, (g * 256 + j) as u64);
                    admissible[(u * admissible.len() as f64) as usize % admissible.len()] as f64
                }
            };
            data.push(v / 255.0);
        }
    }
    Tensor::new(vec![1024], data, Precision::Double).unwrap()
}

/// Unbiasedness, variance bound, and idempotence at pinned seeds.
pub fn quantizer_suite() -> Result<SuiteResult> {
    let mut out = SuiteResult {
        suite: "quantizer".into(),
        ..Default::default()
    };
    let x = quantizer_suite_tensor();
    let group = 256;
    let n_keys = 100_000u64;
    let stats = conditioned_group_stats(&x, group)?;

    for &bits in &LADDER {
        let levels = bits.levels() as f64;
        let mut sum = vec![KahanSum::default(); x.len()];
        let mut sum_sq = vec![KahanSum::default(); x.len()];
        for s in 0..n_keys {
            let q = quantize(&x, bits, group, StreamKey::new(7_000_000 + s, 3))?;
            let y = dequantize(&q)?;
            for (j, &v) in y.data().iter().enumerate() {
                sum[j].add(v);
                sum_sq[j].add(v * v);
            }
        }
        let mut worst_dev = 0.0f64;
        let mut bias_fail = 0usize;
        let mut bound_fail = 0usize;
        let mut worst_var_ratio = 0.0f64;
        for j in 0..x.len() {
            let g = stats[j / group];
            let mean = sum[j].value() / n_keys as f64;
            let var = (sum_sq[j].value() / n_keys as f64 - mean * mean).max(0.0);
            let step = g.range as f64 / levels;
            let t = levels * ((x.data()[j] - g.min as f64) / g.range as f64);
            let p = t - t.floor();
            let sigma = step * (p * (1.0 - p)).sqrt() / (n_keys as f64).sqrt();
            let tol = 4.0 * sigma + 1e-12;
            let dev = (mean - x.data()[j]).abs();
            if dev > tol {
                bias_fail += 1;
            }
            worst_dev = worst_dev.max(if sigma > 0.0 { dev / sigma.max(1e-300) } else { 0.0 });
            let bound = 0.25 * (g.range as f64) * (g.range as f64) * bits.s_factor();
            if var > bound {
                bound_fail += 1;
            }
            if bound > 0.0 {
                worst_var_ratio = worst_var_ratio.max(var / bound);
            }
        }
        out.push(
            &format!("unbiasedness b={bits}"),
            bias_fail == 0,
            format!("{bias_fail} elements outside 4 sigma (worst {worst_dev:.2} sigma)"),
        );
        out.push(
            &format!("variance bound b={bits}"),
            bound_fail == 0,
            format!("{bound_fail} violations; worst var/bound {worst_var_ratio:.4}"),
        );
    }

    // Idempotence: 100 random tensors x all ladder widths, fresh keys.
    let mut idem_fail = 0usize;
    for t in 0..100u64 {
        let key = StreamKey::new(31_337 + t, 9);
        let data: Vec<f64> = (0..512)
            .map(|i| counter_rng(key, i as u64) * 6.0 - 3.0)
            .collect();
        let precision = if t % 2 == 0 {
            Precision::Single
        } else {
            Precision::Double
        };
        let tensor = Tensor::new(vec![512], data, precision)?;
        for &bits in &LADDER {
            let q1 = quantize(&tensor, bits, 64, StreamKey::new(t, 1))?;
            let y = dequantize(&q1)?;
            let q2 = quantize(&y, bits, 64, StreamKey::new(900_000 + t, 2))?;
            if !q1.payload_eq(&q2) {
                idem_fail += 1;
            }
        }
    }
    out.push(
        "idempotence",
        idem_fail == 0,
        format!("{idem_fail} of 400 re-quantizations changed the payload"),
    );
    Ok(out)
}

/// Linearization-error scaling on the reference tanh MLP.
pub fn prop1_suite() -> Result<(SuiteResult, TheoryReport)> {
    let (model, params, batch) = reference_tanh_mlp();
    let widths: Vec<BitWidth> = [3u8, 4, 5, 6, 8]
        .iter()
        .map(|&b| BitWidth::new(b).unwrap())
        .collect();
    let (section, slope) =
        linearization_error_scan(&model, &params, &batch, &widths, 200, 64, 4711)?;
    let mut out = SuiteResult {
        suite: "prop1".into(),
        ..Default::default()
    };
    out.push(
        "log-log slope in [0.8, 1.2]",
        section.passed,
        format!("slope {slope:.4}"),
    );
    Ok((
        out,
        TheoryReport {
            sections: vec![section],
        },
    ))
}

/// Variance decomposition at 4 bits with a 64 x 64 grid.
pub fn prop2_suite() -> Result<(SuiteResult, TheoryReport)> {
    let model = ModelGraph::mlp(8, &[12], 2, NodeKind::Tanh, Precision::Double).unwrap();
    let params = model.init_params(77);
    let data = crate::trainer::dataset::two_gaussians(64, 8, 3.0, 1.0, 88)?;
    let (section, residual) = variance_decomposition(
        &model,
        &params,
        &data,
        BitWidth::new(4).unwrap(),
        64,
        64,
        64,
        99,
    )?;
    let mut out = SuiteResult {
        suite: "prop2".into(),
        ..Default::default()
    };
    out.push(
        "decomposition residual < 0.15",
        section.passed,
        format!("residual {residual:.4}"),
    );
    Ok((
        out,
        TheoryReport {
            sections: vec![section],
        },
    ))
}

/// Additivity of per-slot variances at 8 bits on a 3-slot model.
pub fn additivity_suite() -> Result<(SuiteResult, TheoryReport)> {
    let model = ModelGraph::mlp(8, &[14], 3, NodeKind::Tanh, Precision::Double).unwrap();
    let params = model.init_params(55);
    let key = StreamKey::new(66, 5);
    let data: Vec<f64> = (0..12 * 8)
        .map(|i| counter_rng(key, i as u64) * 2.0 - 1.0)
        .collect();
    let labels: Vec<usize> = (0..12)
        .map(|i| (counter_rng(key, (900 + i) as u64) * 3.0) as usize)
        .collect();
    let batch = Batch {
        x: Tensor::matrix(12, 8, data, Precision::Double).unwrap(),
        labels,
    };
    let (section, residual) = additivity_check(
        &model,
        &params,
        &batch,
        BitWidth::new(8).unwrap(),
        500,
        64,
        1234,
    )?;
    let mut out = SuiteResult {
        suite: "additivity".into(),
        ..Default::default()
    };
    out.push(
        "additivity residual < 0.2",
        section.passed,
        format!("residual {residual:.4}"),
    );
    Ok((
        out,
        TheoryReport {
            sections: vec![section],
        },
    ))
}

/// Greedy-vs-exhaustive gap on 1000 random instances.
pub fn allocator_suite() -> Result<SuiteResult> {
    let mut within = 0usize;
    let mut budget_ok = true;
    let n = 1000u64;
    for seed in 0..n {
        let key = StreamKey::new(seed, 0);
        let l = 2 + (counter_rng(key, 0) * 5.0) as usize;
        let c: Vec<f64> = (0..l)
            .map(|i| (counter_rng(key, 10 + i as u64) * 6.0).exp())
            .collect();
        let dims: Vec<usize> = (0..l)
            .map(|i| 16 + (counter_rng(key, 100 + i as u64) * 500.0) as usize)
            .collect();
        let total: usize = dims.iter().sum();
        let avg = 2.0 + counter_rng(key, 999) * 6.0;
        let p = AllocationProblem::new(c, dims.clone(), (avg * total as f64) as u64, 256);
        let g = allocate_bits(&p)?;
        let e = exhaustive_allocate(&p)?;
        let spent: u64 = (0..l)
            .map(|i| g.bits_for(i).get() as u64 * dims[i] as u64)
            .sum();
        if spent > p.budget_bits {
            budget_ok = false;
        }
        let vg = predicted_variance(&p.sensitivities, &g)?;
        let ve = predicted_variance(&p.sensitivities, &e)?;
        if vg <= 1.05 * ve + 1e-15 {
            within += 1;
        }
    }
    let mut out = SuiteResult {
        suite: "allocator".into(),
        ..Default::default()
    };
    out.push(
        "budget never violated",
        budget_ok,
        "checked on every instance".into(),
    );
    out.push(
        "greedy within 5% of optimum on >= 95%",
        within as f64 >= 0.95 * n as f64,
        format!("{within}/{n} instances within 1.05x"),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantizer_suite_passes() {
        let r = quantizer_suite().unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn allocator_suite_passes() {
        let r = allocator_suite().unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn reference_model_has_five_payloads() {
        use crate::quantizer::CompressionScheme;
        use crate::sensitivity::GradientEpisode;
        let (model, params, batch) = reference_tanh_mlp();
        assert!(params.total_len() <= 1000, "{}", params.total_len());
        let scheme = CompressionScheme::uniform(
            model.slot_catalog(batch.size()).len(),
            BitWidth::new(4).unwrap(),
            64,
        );
        let ep = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &scheme,
            checkpointed: false,
        };
        assert_eq!(ep.estimation_targets().unwrap().len(), 5);
    }
}
