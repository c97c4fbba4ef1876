//! Gradient dropout regularity.
//!
//! For every mask element, the gradient retaining purity P in [0, 1] scores
//! how well the task gradient agrees with the gradient of a KL term against
//! the frozen model's predictions. A Bernoulli gate keeps the task gradient
//! with probability P; where the gate drops it, only a (1 - l) fraction leaks
//! through, for a leak parameter l. The final per-element factor is
//! 1 - l + l * gate, equivalently 1 - l * (1 - gate).
//!
//! The piecewise form of the purity is normative. The compact sign-based
//! form agrees with it whenever the task gradient is nonzero; at exactly
//! zero task gradient the compact form (with sign 0) would give 1/2, while
//! the piecewise first case (product >= 0) gives 1 — a zero gradient carries
//! no conflict to suppress.

use crate::error::{Error, Result};
use crate::model::{batch_logits, register_model, DualEncoder};
use crate::rng::uniform_at;
use crate::tape::Tape;
use crate::task::{Sample, TaskKind};
use crate::tensor::Tensor;

/// Piecewise gradient retaining purity of one (task, kl) gradient pair.
pub fn purity(g_ce: f64, g_kl: f64) -> f64 {
    let p = if g_ce * g_kl >= 0.0 {
        1.0
    } else {
        // signs disagree; both magnitudes are nonzero here
        let ratio = (g_ce + g_kl) / (g_ce.abs() + g_kl.abs());
        if g_ce > 0.0 {
            (1.0 + ratio) / 2.0
        } else {
            (1.0 - ratio) / 2.0
        }
    };
    p.clamp(0.0, 1.0)
}

/// Compact sign-based form; equal to `purity` for nonzero task gradients.
pub fn purity_compact(g_ce: f64, g_kl: f64) -> f64 {
    let denom = g_ce.abs() + g_kl.abs();
    if denom == 0.0 {
        return 1.0;
    }
    let sgn = if g_ce > 0.0 {
        1.0
    } else if g_ce < 0.0 {
        -1.0
    } else {
        0.0
    };
    (0.5 * (1.0 + sgn * (g_ce + g_kl) / denom)).clamp(0.0, 1.0)
}

/// Sample the dropout gate for a purity tensor: gate = 1 exactly when
/// P > U with U uniform in [0, 1) from the counter-based gate stream.
pub fn sample_gate(p: &Tensor, gate_seed: u64, step: u64, index_offset: u64) -> Tensor {
    let mut out = Tensor::zeros(p.shape().to_vec());
    for i in 0..p.len() {
        let u = uniform_at(gate_seed, step, index_offset + i as u64);
        out.data_mut()[i] = if p.data()[i] > u { 1.0 } else { 0.0 };
    }
    out
}

/// The per-element update factor 1 - l + l * gate.
pub fn gate_scale(leak: f64, gate: f64) -> f64 {
    1.0 - leak + leak * gate
}

/// Per-layer snapshot of the regularizer at one step, for diagnostics.
#[derive(Clone, Debug)]
pub struct PurityStats {
    pub layer: String,
    pub mean_purity: f64,
    pub gate_rate: f64,
    pub mean_abs_g_ce: f64,
    pub mean_abs_g_kl: f64,
}

/// Compute the final gradient for one layer: purity, gate, scale, applied to
/// the task gradient elementwise. Returns the scaled gradient and stats.
pub fn regularize_gradient(
    layer_name: &str,
    g_ce: &Tensor,
    g_kl: &Tensor,
    leak: f64,
    gate_seed: u64,
    step: u64,
    index_offset: u64,
) -> Result<(Tensor, PurityStats)> {
    if !(0.0..=1.0).contains(&leak) {
        return Err(Error::Config(format!("leak parameter {leak} outside [0, 1]")));
    }
    if g_ce.shape() != g_kl.shape() {
        return Err(Error::Shape("gradient fields of different shapes".into()));
    }
    let n = g_ce.len();
    let mut out = Tensor::zeros(g_ce.shape().to_vec());
    let mut p_sum = 0.0;
    let mut gate_sum = 0.0;
    let mut ce_abs = 0.0;
    let mut kl_abs = 0.0;
    for i in 0..n {
        let gc = g_ce.data()[i];
        let gk = g_kl.data()[i];
        let p = purity(gc, gk);
        let u = uniform_at(gate_seed, step, index_offset + i as u64);
        let gate = if p > u { 1.0 } else { 0.0 };
        out.data_mut()[i] = gate_scale(leak, gate) * gc;
        p_sum += p;
        gate_sum += gate;
        ce_abs += gc.abs();
        kl_abs += gk.abs();
    }
    Ok((
        out,
        PurityStats {
            layer: layer_name.to_string(),
            mean_purity: p_sum / n as f64,
            gate_rate: gate_sum / n as f64,
            mean_abs_g_ce: ce_abs / n as f64,
            mean_abs_g_kl: kl_abs / n as f64,
        },
    ))
}

/// One plain mask update M <- M - lr * scale * g_ce (the SGD form of the
/// regularized step). The Adam path hands the scaled gradient to the
/// optimizer instead; both use the same factor.
pub fn regularized_step(
    mask: &mut Tensor,
    g_ce: &Tensor,
    g_kl: &Tensor,
    leak: f64,
    lr: f64,
    gate_seed: u64,
    step: u64,
    index_offset: u64,
) -> Result<PurityStats> {
    let (scaled, stats) =
        regularize_gradient("mask", g_ce, g_kl, leak, gate_seed, step, index_offset)?;
    crate::optim::sgd_step(mask, &scaled, lr);
    Ok(stats)
}

/// Gradients of the KL loss (frozen reference against the masked model) with
/// respect to every enabled layer's mask, via the straight-through estimate.
/// Returns (layer id, gradient) pairs in masked-layer order.
pub fn kl_gradient_field(
    model: &DualEncoder,
    samples: &[&Sample],
    kind: TaskKind,
    class_ids: &[usize],
    reference: &Tensor,
) -> Result<Vec<(usize, Tensor)>> {
    if reference.ndim() != 2 || reference.rows() != samples.len() {
        return Err(Error::State(format!(
            "reference of {:?} for a batch of {}",
            reference.shape(),
            samples.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, model, class_ids, true)?;
    let logits = batch_logits(&mut tape, &vars, model, samples, kind)?;
    let kl = tape.kl_divergence(reference.clone(), logits)?;
    let grads = tape.backward(kl)?;
    let mut out = Vec::new();
    for (i, layer) in model.masked_layers().iter().enumerate() {
        if !layer.enabled() {
            continue;
        }
        let g_w = grads.wrt(vars.weights[i], tape.value(vars.weights[i]));
        out.push((i, layer.ste_gradient(&g_w)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn purity_sign_agreement_is_one() {
        assert_eq!(purity(0.2, 0.3), 1.0);
        assert_eq!(purity(-0.2, -0.3), 1.0);
    }

    #[test]
    fn purity_exact_cancellation_is_half() {
        assert_eq!(purity(0.2, -0.2), 0.5);
    }

    #[test]
    fn purity_known_values() {
        // (1 + (1 - 3) / (1 + 3)) / 2 = 0.25
        assert!((purity(1.0, -3.0) - 0.25).abs() < 1e-15);
        // (1 - (−1 + 2) / (1 + 2)) / 2 = 1/3
        assert!((purity(-1.0, 2.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn purity_zero_task_gradient_is_one_under_piecewise() {
        // the compact form with sign 0 would say 1/2; the piecewise first
        // case wins
        assert_eq!(purity(0.0, 5.0), 1.0);
        assert_eq!(purity(0.0, -5.0), 1.0);
        assert_eq!(purity_compact(0.0, 5.0), 0.5);
    }

    #[test]
    fn purity_forms_agree_on_nonzero_gradients() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..200_000 {
            let a = (rng.next_f64() - 0.5) * 4.0;
            let b = (rng.next_f64() - 0.5) * 4.0;
            if a == 0.0 || b == 0.0 {
                continue;
            }
            let diff = (purity(a, b) - purity_compact(a, b)).abs();
            assert!(diff <= 1e-12, "a={a} b={b} diff={diff}");
        }
    }

    #[test]
    fn purity_scale_free() {
        let mut rng = SplitMix64::new(78);
        for _ in 0..10_000 {
            let a = (rng.next_f64() - 0.5) * 2.0;
            let b = (rng.next_f64() - 0.5) * 2.0;
            // power-of-two scalings are exact in IEEE arithmetic
            for c in [0.5, 2.0, 1024.0, 0.0078125] {
                assert_eq!(purity(a, b), purity(c * a, c * b));
            }
            // arbitrary positive scalings agree to rounding
            for c in [37.0, 1e-6, 3.7] {
                assert!((purity(a, b) - purity(c * a, c * b)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn purity_bounded() {
        let mut rng = SplitMix64::new(79);
        for _ in 0..100_000 {
            let a = (rng.next_f64() - 0.5) * 1e6;
            let b = (rng.next_f64() - 0.5) * 1e6;
            let p = purity(a, b);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn gate_certain_cases() {
        let ones = Tensor::filled(vec![100], 1.0);
        let g = sample_gate(&ones, 1, 0, 0);
        assert!(g.data().iter().all(|&x| x == 1.0));
        let zeros = Tensor::zeros(vec![100]);
        let g = sample_gate(&zeros, 1, 0, 0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gate_monte_carlo_rate() {
        let p = Tensor::filled(vec![100_000], 0.7);
        let g = sample_gate(&p, 99, 3, 0);
        let rate = g.data().iter().sum::<f64>() / g.len() as f64;
        assert!((rate - 0.7).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn expected_scale_matches_formula() {
        for &p in &[0.1, 0.5, 0.9] {
            for &l in &[0.3, 1.0] {
                let pt = Tensor::filled(vec![100_000], p);
                let g = sample_gate(&pt, 5, 7, 0);
                let mean: f64 =
                    g.data().iter().map(|&gate| gate_scale(l, gate)).sum::<f64>() / g.len() as f64;
                let expect = 1.0 - l + l * p;
                assert!((mean - expect).abs() < 0.01, "p={p} l={l} mean={mean}");
            }
        }
    }

    #[test]
    fn factor_forms_are_identical() {
        for gate in [0.0, 1.0] {
            for l in [0.0, 0.25, 0.5, 0.75, 1.0] {
                assert_eq!(gate_scale(l, gate), 1.0 - l * (1.0 - gate));
            }
        }
    }

    #[test]
    fn leak_zero_is_the_unregularized_step() {
        let g_ce = Tensor::new(vec![4], vec![0.1, -0.4, 0.2, 0.9]).unwrap();
        let g_kl = Tensor::new(vec![4], vec![-0.1, 0.4, 0.2, -0.9]).unwrap();
        let mut m1 = Tensor::filled(vec![4], 0.01);
        let mut m2 = m1.clone();
        regularized_step(&mut m1, &g_ce, &g_kl, 0.0, 0.05, 9, 0, 0).unwrap();
        crate::optim::sgd_step(&mut m2, &g_ce, 0.05);
        assert_eq!(m1.data(), m2.data());
    }

    #[test]
    fn full_drop_freezes_the_element() {
        // leak 1 and a gate of 0 means factor 0: the element cannot move.
        // P = 0 requires sign conflict with |g_kl| >> |g_ce| in the limit;
        // use the factor directly
        assert_eq!(gate_scale(1.0, 0.0), 0.0);
        assert_eq!(gate_scale(0.3, 0.0), 0.7);
    }

    #[test]
    fn leak_outside_unit_interval_rejected() {
        let g = Tensor::zeros(vec![2]);
        let mut m = Tensor::zeros(vec![2]);
        let r = regularized_step(&mut m, &g, &g, 1.5, 0.1, 0, 0, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn field_fixture() -> (DualEncoder, Vec<Sample>) {
        use crate::model::ModelDims;
        let protos = crate::task::class_prototypes(5, 5, 16);
        let mut model = DualEncoder::init(
            &ModelDims { dim: 16, blocks: 1, heads: 4, mlp_expansion: 2 },
            protos,
            0.07,
            &mut crate::rng::derive_stream(5, 201),
        )
        .unwrap();
        let all: Vec<usize> = (0..model.masked_layers().len()).collect();
        model.set_enabled_layers(&all);
        let mut rng = SplitMix64::new(31);
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample {
                data: Tensor::new(
                    vec![4, 16],
                    (0..64).map(|_| rng.next_normal()).collect(),
                )
                .unwrap(),
                label: i,
            })
            .collect();
        (model, samples)
    }

    #[test]
    fn kl_field_vanishes_at_initialization() {
        // masks at init are all ones, so the masked model IS the frozen
        // model and every KL mask gradient is exactly zero
        let (model, samples) = field_fixture();
        let refs: Vec<&Sample> = samples.iter().collect();
        let ids: Vec<usize> = (0..5).collect();
        let reference =
            crate::model::zero_shot_reference(&model, &refs, TaskKind::Tokens, &ids).unwrap();
        let field =
            kl_gradient_field(&model, &refs, TaskKind::Tokens, &ids, &reference).unwrap();
        assert_eq!(field.len(), model.masked_layers().len());
        for (_, g) in &field {
            for &e in g.data() {
                assert_eq!(e, 0.0);
            }
        }
    }

    #[test]
    fn kl_field_invariant_under_duplicated_batch() {
        let (mut model, samples) = field_fixture();
        // perturb one binary mask so the field is nonzero
        {
            let mut layers = model.masked_layers_mut();
            let mut bin = layers[0].mask_bin().clone();
            bin.data_mut()[3] = 0.0;
            bin.data_mut()[40] = 0.0;
            layers[0].set_mask_bin(bin).unwrap();
        }
        let ids: Vec<usize> = (0..5).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let reference =
            crate::model::zero_shot_reference(&model, &refs, TaskKind::Tokens, &ids).unwrap();
        let once = kl_gradient_field(&model, &refs, TaskKind::Tokens, &ids, &reference).unwrap();
        let doubled: Vec<&Sample> = refs.iter().chain(refs.iter()).copied().collect();
        let ref2 =
            crate::model::zero_shot_reference(&model, &doubled, TaskKind::Tokens, &ids).unwrap();
        let twice = kl_gradient_field(&model, &doubled, TaskKind::Tokens, &ids, &ref2).unwrap();
        let mut saw_nonzero = false;
        for ((ia, ga), (ib, gb)) in once.iter().zip(&twice) {
            assert_eq!(ia, ib);
            for (&a, &b) in ga.data().iter().zip(gb.data()) {
                assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
                saw_nonzero |= a != 0.0;
            }
        }
        assert!(saw_nonzero, "fixture produced an all-zero field");
    }

    #[test]
    fn kl_field_rejects_mismatched_reference() {
        let (model, samples) = field_fixture();
        let refs: Vec<&Sample> = samples.iter().collect();
        let ids: Vec<usize> = (0..5).collect();
        let bad = Tensor::filled(vec![1, 5], 0.2);
        assert!(matches!(
            kl_gradient_field(&model, &refs, TaskKind::Tokens, &ids, &bad),
            Err(Error::State(_))
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn purity_always_in_unit_interval(
                a in -1e9f64..1e9,
                b in -1e9f64..1e9,
            ) {
                let p = purity(a, b);
                prop_assert!((0.0..=1.0).contains(&p));
            }

            #[test]
            fn purity_forms_agree_for_nonzero(
                a in prop_oneof![-1e3f64..-1e-9, 1e-9f64..1e3],
                b in prop_oneof![-1e3f64..-1e-9, 1e-9f64..1e3],
            ) {
                prop_assert!((purity(a, b) - purity_compact(a, b)).abs() <= 1e-12);
            }
        }
    }
}
