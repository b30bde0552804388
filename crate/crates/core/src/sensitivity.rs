//! Per-slot sensitivity estimation.
//!
//! The gradient's variance under compression decomposes as
//! `sum_l c_l * S(b_l)` across context slots. The coefficient `c_l` is
//! estimated numerically: evaluate the gradient twice with every compressor
//! stream fixed except slot `l`'s, and take `0.5 * |g0 - g1|^2 / S(b_l)`.
//! Counter-based streams make the "fixed" part exact, so the difference
//! isolates slot `l`'s rounding noise. A brute-force oracle that measures the
//! empirical gradient variance over many keys for one slot validates the
//! estimator.

use rayon::prelude::*;

use crate::error::{ActError, Result};
use crate::numerics::{mix64, StreamKey};
use crate::quantizer::CompressionScheme;
use crate::tape::{
    backward, checkpointed_backward, forward, keys_from_seeds, Batch, Gradients, ModelGraph,
    ParamSet, SlotId, SlotInfo, SlotKind,
};

/// Per-slot sensitivity coefficients with staleness metadata. Slots pinned to
/// full precision carry `f64::INFINITY` and are never demoted by allocation.
#[derive(Debug, Clone)]
pub struct SensitivityProfile {
    /// Indexed by slot id; zero for slots that are not estimation targets
    /// (parameters, integer state, aliases).
    pub coefficients: Vec<f64>,
    pub estimated_at_step: u64,
    pub ema_decay: f64,
    pub scheme_used: CompressionScheme,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    /// Seed pairs averaged per estimate; single pairs are high-variance.
    pub n_pairs: usize,
    /// Slots smaller than this are pinned to 32 bits and skipped.
    pub min_dims_for_compression: usize,
    /// Smoothing factor applied by `update_profile`.
    pub ema_decay: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            n_pairs: 4,
            min_dims_for_compression: 16,
            ema_decay: 0.5,
        }
    }
}

/// One gradient evaluation as a function of the per-slot stream keys: a
/// forward/backward episode, optionally through the checkpointed path.
#[derive(Clone, Copy)]
pub struct GradientEpisode<'a> {
    pub model: &'a ModelGraph,
    pub params: &'a ParamSet,
    pub batch: &'a Batch,
    pub scheme: &'a CompressionScheme,
    pub checkpointed: bool,
}

impl GradientEpisode<'_> {
    pub fn gradient(&self, keys: &[StreamKey]) -> Result<Gradients> {
        if self.checkpointed {
            let (_, g) =
                checkpointed_backward(self.model, self.params, self.batch, self.scheme, keys)?;
            Ok(g)
        } else {
            let (_, store) = forward(self.model, self.params, self.batch, self.scheme, keys)?;
            backward(self.model, &store)
        }
    }

    /// Canonical activation slots (one per distinct payload) with their
    /// dimensionalities, discovered from a probe forward pass.
    pub fn estimation_targets(&self) -> Result<Vec<(SlotId, usize)>> {
        let catalog = self.model.slot_catalog(self.batch.size());
        let keys = crate::tape::step_keys(0, 0, catalog.len());
        let (_, store) = forward(self.model, self.params, self.batch, self.scheme, &keys)?;
        let dims: Vec<usize> = catalog.iter().map(|s| s.dims).collect();
        Ok(store
            .canonical_activation_slots()
            .into_iter()
            .map(|(slot, _)| (slot, dims[slot]))
            .collect())
    }
}

fn sq_dist(a: &Gradients, b: &Gradients) -> f64 {
    a.tensors
        .iter()
        .zip(&b.tensors)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
        })
        .sum()
}

/// One estimator pass: `g0` with the base seeds, then for each target slot
/// one episode with that slot re-seeded, giving
/// `c_l = 0.5 * |g0 - g1|^2 / S(b_l)`. Costs `targets + 1` episodes.
pub fn estimate_once(
    episode: &GradientEpisode,
    targets: &[(SlotId, usize)],
    base_seeds: &[u64],
    fresh_seed: u64,
) -> Result<Vec<(SlotId, f64)>> {
    let scheme = episode.scheme;
    let base_keys = keys_from_seeds(base_seeds);
    let g0 = episode.gradient(&base_keys)?;
    targets
        .par_iter()
        .map(|&(slot, _)| {
            let bits = scheme.bits_for(slot);
            if bits.is_full() {
                return Ok((slot, 0.0));
            }
            let s = bits.s_factor();
            let mut keys = base_keys.clone();
            keys[slot] = StreamKey::new(fresh_seed, slot as u64);
            let g1 = episode.gradient(&keys)?;
            g1.check_finite()?;
            Ok((slot, 0.5 * sq_dist(&g0, &g1) / s))
        })
        .collect()
}

/// Full profile estimation: pins undersized slots to full precision
/// (infinite sensitivity), averages `cfg.n_pairs` independent seed pairs for
/// the rest.
pub fn estimate_sensitivities(
    episode: &GradientEpisode,
    seed: u64,
    step: u64,
    cfg: &EstimatorConfig,
) -> Result<SensitivityProfile> {
    let num_slots = episode.model.slot_catalog(episode.batch.size()).len();
    let targets = episode.estimation_targets()?;
    let mut coefficients = vec![0.0f64; num_slots];
    let estimable: Vec<(SlotId, usize)> = targets
        .iter()
        .copied()
        .filter(|&(slot, dims)| {
            if dims < cfg.min_dims_for_compression {
                coefficients[slot] = f64::INFINITY;
                false
            } else {
                true
            }
        })
        .collect();

    let per_pair: Vec<Vec<(SlotId, f64)>> = (0..cfg.n_pairs as u64)
        .into_par_iter()
        .map(|pair| {
            let base_seeds: Vec<u64> = (0..num_slots as u64)
                .map(|l| mix64(seed ^ mix64(0x7061_6972 ^ pair) ^ mix64(l.wrapping_mul(0x9e37))))
                .collect();
            let fresh_seed = mix64(seed ^ mix64(0x6672_6573 ^ pair));
            estimate_once(episode, &estimable, &base_seeds, fresh_seed)
        })
        .collect::<Result<_>>()?;

    for pass in &per_pair {
        for &(slot, c) in pass {
            coefficients[slot] += c / cfg.n_pairs as f64;
        }
    }
    Ok(SensitivityProfile {
        coefficients,
        estimated_at_step: step,
        ema_decay: cfg.ema_decay,
        scheme_used: episode.scheme.clone(),
    })
}

/// Monte Carlo oracle for one slot: all streams fixed except slot `l`, which
/// draws `n_draws` independent keys. Returns the empirical gradient variance
/// (summed per-coordinate, population normalization) divided by `S(b_l)`.
pub fn brute_force_sensitivity(
    episode: &GradientEpisode,
    slot: SlotId,
    n_draws: usize,
    base_seed: u64,
) -> Result<f64> {
    if n_draws < 100 {
        return Err(ActError::InvalidConfig(format!(
            "oracle needs >= 100 draws, got {n_draws}"
        )));
    }
    let bits = episode.scheme.bits_for(slot);
    if bits.is_full() {
        return Ok(0.0);
    }
    let num_slots = episode.model.slot_catalog(episode.batch.size()).len();
    let base_seeds: Vec<u64> = (0..num_slots as u64)
        .map(|l| mix64(base_seed ^ mix64(l.wrapping_mul(0xabcd_ef12))))
        .collect();
    let grads: Vec<Vec<f64>> = (0..n_draws as u64)
        .into_par_iter()
        .map(|d| {
            let mut keys = keys_from_seeds(&base_seeds);
            keys[slot] = StreamKey::new(mix64(base_seed ^ mix64(0xd00d ^ d)), slot as u64);
            Ok(episode.gradient(&keys)?.flatten())
        })
        .collect::<Result<_>>()?;
    Ok(vector_variance(&grads) / bits.s_factor())
}

/// Vector variance `E|g - E g|^2` over a set of gradient vectors
/// (population normalization, two-pass form for numerical headroom).
pub fn vector_variance(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mut mean = vec![0.0f64; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut total = 0.0;
    for s in samples {
        total += s
            .iter()
            .zip(&mean)
            .map(|(v, m)| (v - m) * (v - m))
            .sum::<f64>();
    }
    total / n
}

/// Exponential smoothing of a fresh profile into the running one:
/// `c_new = decay * c_old + (1 - decay) * c_fresh`. Pinned markers are
/// absorbing.
pub fn update_profile(
    old: &SensitivityProfile,
    fresh: &SensitivityProfile,
) -> Result<SensitivityProfile> {
    if old.coefficients.len() != fresh.coefficients.len() {
        return Err(ActError::ProblemMismatch(format!(
            "profile slots {} vs {}",
            old.coefficients.len(),
            fresh.coefficients.len()
        )));
    }
    let d = old.ema_decay;
    let coefficients = old
        .coefficients
        .iter()
        .zip(&fresh.coefficients)
        .map(|(&a, &b)| {
            if a.is_infinite() || b.is_infinite() {
                f64::INFINITY
            } else {
                d * a + (1.0 - d) * b
            }
        })
        .collect();
    Ok(SensitivityProfile {
        coefficients,
        estimated_at_step: fresh.estimated_at_step,
        ema_decay: old.ema_decay,
        scheme_used: fresh.scheme_used.clone(),
    })
}

/// Profile dump: `slot_id,node_kind,D_l,c_l,bits_assigned` per activation
/// slot.
pub fn profile_to_csv(
    profile: &SensitivityProfile,
    catalog: &[SlotInfo],
    scheme: &CompressionScheme,
) -> String {
    let mut out = String::from("slot_id,node_kind,D_l,c_l,bits_assigned\n");
    for s in catalog {
        if s.kind != SlotKind::Activation {
            continue;
        }
        let c = profile.coefficients[s.id];
        let c_str = if c.is_infinite() {
            "inf".to_string()
        } else {
            format!("{c:.6e}")
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.id,
            s.name,
            s.dims,
            c_str,
            scheme.bits_for(s.id)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{counter_rng, Precision, Tensor};
    use crate::quantizer::BitWidth;
    use crate::tape::{step_keys, NodeKind};

    fn make_batch(model: &ModelGraph, batch: usize, seed: u64, classes: usize) -> Batch {
        let key = StreamKey::new(seed, 7);
        let data: Vec<f64> = (0..batch * model.input_dim)
            .map(|i| counter_rng(key, i as u64) * 2.0 - 1.0)
            .collect();
        let labels = (0..batch)
            .map(|i| (counter_rng(key, (1000 + i) as u64) * classes as f64) as usize)
            .collect();
        Batch {
            x: Tensor::matrix(batch, model.input_dim, data, model.precision).unwrap(),
            labels,
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn identical_keys_reproduce_the_gradient_exactly() {
        let model = ModelGraph::mlp(6, &[8], 3, NodeKind::Tanh, Precision::Single).unwrap();
        let params = model.init_params(1);
        let batch = make_batch(&model, 8, 2, 3);
        let scheme = CompressionScheme::uniform(
            model.slot_catalog(8).len(),
            BitWidth::new(4).unwrap(),
            16,
        );
        let ep = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &scheme,
            checkpointed: false,
        };
        let keys = step_keys(5, 0, scheme.num_slots());
        let g0 = ep.gradient(&keys).unwrap().flatten();
        let g1 = ep.gradient(&keys).unwrap().flatten();
        assert_eq!(g0, g1, "seed replay must be exact");
    }

    #[test]
    fn full_precision_slot_has_zero_sensitivity() {
        let model = ModelGraph::mlp(6, &[8], 3, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(3);
        let batch = make_batch(&model, 8, 4, 3);
        let mut scheme = CompressionScheme::uniform(
            model.slot_catalog(8).len(),
            BitWidth::new(4).unwrap(),
            16,
        );
        scheme.set_bits(0, BitWidth::FULL);
        let ep = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &scheme,
            checkpointed: false,
        };
        let targets = ep.estimation_targets().unwrap();
        let seeds: Vec<u64> = (0..scheme.num_slots() as u64).collect();
        let c = estimate_once(&ep, &targets, &seeds, 999).unwrap();
        let c0 = c.iter().find(|(s, _)| *s == 0).unwrap().1;
        assert_eq!(c0, 0.0);
        // Oracle agrees by construction.
        assert_eq!(brute_force_sensitivity(&ep, 0, 100, 7).unwrap(), 0.0);
    }

    #[test]
    fn zeroed_downstream_path_kills_sensitivity() {
        let model = ModelGraph::mlp(6, &[8], 3, NodeKind::Tanh, Precision::Double).unwrap();
        let mut params = model.init_params(5);
        // Zero the second linear layer: the gradient no longer depends on
        // the first layer's saved input.
        params.tensors[2] = Tensor::zeros(params.tensors[2].shape().to_vec(), Precision::Double);
        let batch = make_batch(&model, 8, 6, 3);
        let scheme = CompressionScheme::uniform(
            model.slot_catalog(8).len(),
            BitWidth::new(2).unwrap(),
            16,
        );
        let ep = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &scheme,
            checkpointed: false,
        };
        let targets = ep.estimation_targets().unwrap();
        let seeds: Vec<u64> = (0..scheme.num_slots() as u64).map(|l| l + 100).collect();
        let c = estimate_once(&ep, &targets, &seeds, 1234).unwrap();
        let c0 = c.iter().find(|(s, _)| *s == 0).unwrap().1;
        assert_eq!(c0, 0.0, "zero Jacobian column must give zero sensitivity");
    }

    #[test]
    fn estimator_tracks_oracle_on_small_mlp() {
        // Smooth 2-layer tanh MLP, under 1e3 parameters: estimator vs oracle
        // correlation above 0.9 across slots.
        let model = ModelGraph::mlp(8, &[12], 3, NodeKind::Tanh, Precision::Double).unwrap();
        assert!(model.init_params(0).total_len() <= 1000);
        let params = model.init_params(8);
        let batch = make_batch(&model, 12, 9, 3);
        let scheme = CompressionScheme::uniform(
            model.slot_catalog(12).len(),
            BitWidth::new(4).unwrap(),
            16,
        );
        let ep = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &scheme,
            checkpointed: false,
        };
        let cfg = EstimatorConfig {
            n_pairs: 16,
            ..Default::default()
        };
        let profile = estimate_sensitivities(&ep, 42, 0, &cfg).unwrap();
        let targets = ep.estimation_targets().unwrap();
        let mut est = Vec::new();
        let mut oracle = Vec::new();
        for &(slot, _) in &targets {
            est.push(profile.coefficients[slot]);
            oracle.push(brute_force_sensitivity(&ep, slot, 600, 77).unwrap());
        }
        assert!(est.iter().all(|&c| c >= 0.0));
        let r = pearson(&est, &oracle);
        assert!(r > 0.9, "pearson {r}, est {est:?}, oracle {oracle:?}");
    }

    #[test]
    fn estimates_scale_quadratically_with_the_loss() {
        let mut model = ModelGraph::mlp(6, &[8], 2, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(11);
        let batch = make_batch(&model, 8, 12, 2);
        let scheme = CompressionScheme::uniform(
            model.slot_catalog(8).len(),
            BitWidth::new(4).unwrap(),
            16,
        );
        let run = |model: &ModelGraph| {
            let ep = GradientEpisode {
                model,
                params: &params,
                batch: &batch,
                scheme: &scheme,
                checkpointed: false,
            };
            let targets = ep.estimation_targets().unwrap();
            let seeds: Vec<u64> = (0..scheme.num_slots() as u64).map(|l| l * 3 + 1).collect();
            estimate_once(&ep, &targets, &seeds, 4242).unwrap()
        };
        let base = run(&model);
        let last = model.nodes.len() - 1;
        if let NodeKind::SoftmaxCrossEntropy { loss_scale, .. } = &mut model.nodes[last].kind {
            *loss_scale = 2.0;
        }
        let scaled = run(&model);
        for ((slot, c1), (_, c2)) in base.iter().zip(&scaled) {
            if *c1 > 0.0 {
                let ratio = c2 / c1;
                assert!(
                    (ratio - 4.0).abs() < 1e-9,
                    "slot {slot}: ratio {ratio} (expected 4)"
                );
            }
        }
    }

    #[test]
    fn oracle_homogeneity_and_width_scaling() {
        let model = ModelGraph::mlp(6, &[8], 2, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(13);
        let batch = make_batch(&model, 8, 14, 2);
        let slots = model.slot_catalog(8).len();
        let at_bits = |b: u8| CompressionScheme::uniform(slots, BitWidth::new(b).unwrap(), 16);

        // Doubling the loss scale multiplies the oracle value by 4.
        let mut scaled_model = model.clone();
        let last = scaled_model.nodes.len() - 1;
        if let NodeKind::SoftmaxCrossEntropy { loss_scale, .. } =
            &mut scaled_model.nodes[last].kind
        {
            *loss_scale = 2.0;
        }
        let s4 = at_bits(4);
        let ep1 = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &s4,
            checkpointed: false,
        };
        let ep2 = GradientEpisode {
            model: &scaled_model,
            params: &params,
            batch: &batch,
            scheme: &s4,
            checkpointed: false,
        };
        let v1 = brute_force_sensitivity(&ep1, 2, 300, 5).unwrap();
        let v2 = brute_force_sensitivity(&ep2, 2, 300, 5).unwrap();
        assert!((v2 / v1 - 4.0).abs() < 1e-9, "ratio {}", v2 / v1);

        // Raw variance ratio between 2 and 4 bits tracks S(2)/S(4) = 25
        // within +-40% in the linearization regime.
        let s2 = at_bits(2);
        let ep_w2 = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &s2,
            checkpointed: false,
        };
        let raw2 = brute_force_sensitivity(&ep_w2, 2, 1500, 21).unwrap()
            * BitWidth::new(2).unwrap().s_factor();
        let raw4 = brute_force_sensitivity(&ep1, 2, 1500, 21).unwrap()
            * BitWidth::new(4).unwrap().s_factor();
        let ratio = raw2 / raw4;
        assert!(
            (15.0..=35.0).contains(&ratio),
            "variance ratio {ratio}, expected near 25"
        );
    }

    #[test]
    fn tiny_slots_get_pinned() {
        // Head probs slot of a batch-4, 2-class model has 8 elements: pinned.
        let model = ModelGraph::mlp(16, &[32], 2, NodeKind::Tanh, Precision::Double).unwrap();
        let params = model.init_params(15);
        let batch = make_batch(&model, 4, 16, 2);
        let scheme = CompressionScheme::uniform(
            model.slot_catalog(4).len(),
            BitWidth::new(4).unwrap(),
            16,
        );
        let ep = GradientEpisode {
            model: &model,
            params: &params,
            batch: &batch,
            scheme: &scheme,
            checkpointed: false,
        };
        let profile = estimate_sensitivities(&ep, 1, 0, &EstimatorConfig::default()).unwrap();
        // Catalog: lin.in(0), lin.w(1), tanh.out(2), lin.in(3), lin.w(4),
        // probs(5), labels(6).
        assert!(profile.coefficients[5].is_infinite());
        assert!(profile.coefficients[0].is_finite());
    }

    #[test]
    fn update_profile_blends() {
        let scheme = CompressionScheme::uniform(2, BitWidth::new(4).unwrap(), 16);
        let mk = |c: Vec<f64>, decay: f64, step: u64| SensitivityProfile {
            coefficients: c,
            estimated_at_step: step,
            ema_decay: decay,
            scheme_used: scheme.clone(),
        };
        // decay 0 returns fresh.
        let out = update_profile(&mk(vec![5.0, 1.0], 0.0, 0), &mk(vec![2.0, 3.0], 0.5, 7)).unwrap();
        assert_eq!(out.coefficients, vec![2.0, 3.0]);
        assert_eq!(out.estimated_at_step, 7);
        // fresh == old leaves it unchanged.
        let out = update_profile(&mk(vec![4.0, 2.0], 0.3, 0), &mk(vec![4.0, 2.0], 0.3, 9)).unwrap();
        assert_eq!(out.coefficients, vec![4.0, 2.0]);
        // decay 0.5: old 4, fresh 2 -> 3.
        let out = update_profile(&mk(vec![4.0], 0.5, 0), &mk(vec![2.0], 0.5, 1)).unwrap();
        assert_eq!(out.coefficients, vec![3.0]);
        // Pinned markers absorb.
        let out =
            update_profile(&mk(vec![f64::INFINITY], 0.5, 0), &mk(vec![2.0], 0.5, 1)).unwrap();
        assert!(out.coefficients[0].is_infinite());
        // Slot mismatch rejected.
        assert!(update_profile(&mk(vec![1.0], 0.5, 0), &mk(vec![1.0, 2.0], 0.5, 1)).is_err());
    }
}
