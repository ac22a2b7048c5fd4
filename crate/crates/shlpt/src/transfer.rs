//! Transfer from stored tasks: prompt mixtures for similar tasks and
//! contrastive activation losses that push the current task away from
//! dissimilar ones.
//!
//! Both contrastive losses share the same shape. The anchor is compared
//! against itself (cosine 1) as the positive and a set of activation
//! snapshots as negatives:
//!
//! `L = ln(e^{1/tau} + sum_k e^{cos(x, x_k)/tau}) - 1/tau`
//!
//! which is the negative log probability of the positive pair. The hidden
//! state contrast uses decoder hidden states; the activation-state
//! contrast first zeroes coordinates that an unprompted forward pass
//! already activates, so only prompt-induced activations are pushed apart.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::pool::Prompt;
use crate::tape::{Tape, Var};

/// How to combine negative terms inside the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeReduction {
    #[default]
    Sum,
    Mean,
}

const NORM_FLOOR: f64 = 1e-12;

fn squared_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `P(X) = sum_j w_j P^j + P^t` on the tape. `terms` pairs a `1 x 1`
/// weight with a stored prompt entered as a constant. With no terms the
/// trainable prompt is returned as-is, so an empty similar set degenerates
/// to plain prompt tuning bit for bit.
pub fn compose_prompt(tape: &mut Tape, prompt_t: Var, terms: &[(Var, Var)]) -> Var {
    let mut out = prompt_t;
    for &(weight, stored) in terms {
        let scaled = tape.mul_scalar(weight, stored);
        out = tape.add(out, scaled);
    }
    out
}

/// Renormalized mixture weights over the similar set, kept on the tape so
/// the similarity head keeps receiving gradient. Set membership itself is
/// decided by value. Returns one `1 x 1` weight per entry of `similar`.
pub fn mixture_weight_vars(tape: &mut Tape, alpha: Var, similar: &[usize]) -> Vec<Var> {
    if similar.is_empty() {
        return Vec::new();
    }
    let alpha_col = tape.transpose(alpha);
    let selected = tape.gather_rows(alpha_col, similar.to_vec());
    let total = tape.sum(selected);
    let inv = tape.powf(total, -1.0);
    let normalized = tape.mul_scalar(inv, selected);
    (0..similar.len())
        .map(|i| tape.slice_rows(normalized, i, 1))
        .collect()
}

/// Puts the similar stored prompts on the tape as constants and pairs them
/// with on-tape mixture weights.
pub fn mixture_terms(
    tape: &mut Tape,
    alpha: Var,
    similar: &[usize],
    prompts: &[Prompt],
) -> Vec<(Var, Var)> {
    let weights = mixture_weight_vars(tape, alpha, similar);
    similar
        .iter()
        .zip(weights)
        .map(|(&idx, w)| (w, tape.constant(prompts[idx].matrix().clone())))
        .collect()
}

/// Shared contrastive form. `anchor` is a `1 x d` row on the tape;
/// negatives enter as constants. Returns an exact zero with no negatives.
pub fn contrastive_loss(
    tape: &mut Tape,
    anchor: Var,
    negatives: &[Array2<f64>],
    tau: f64,
    reduction: NegativeReduction,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument {
            field: "tau",
            reason: format!("temperature must be positive, got {tau}"),
        });
    }
    if negatives.is_empty() {
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    if squared_norm(tape.value(anchor)) < NORM_FLOOR {
        return Err(Error::DegenerateCosine("anchor has zero norm".into()));
    }
    let mut acc: Option<Var> = None;
    for (k, neg) in negatives.iter().enumerate() {
        if squared_norm(neg) < NORM_FLOOR {
            return Err(Error::DegenerateCosine(format!("negative {k} has zero norm")));
        }
        let neg_var = tape.constant(neg.clone());
        let cos = tape.cosine(anchor, neg_var);
        let scaled = tape.scale(cos, 1.0 / tau);
        let term = tape.exp(scaled);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let mut sum = acc.expect("at least one negative");
    if reduction == NegativeReduction::Mean {
        sum = tape.scale(sum, 1.0 / negatives.len() as f64);
    }
    let positive = tape.constant(Array2::from_elem((1, 1), (1.0 / tau).exp()));
    let inside = tape.add(sum, positive);
    let log = tape.ln(inside);
    let shift = tape.constant(Array2::from_elem((1, 1), -1.0 / tau));
    Ok(tape.add(log, shift))
}

/// Hidden-state contrast against dissimilar-prompt decoder states.
pub fn hsc_loss(
    tape: &mut Tape,
    hidden: Var,
    negatives: &[Array2<f64>],
    tau: f64,
    reduction: NegativeReduction,
) -> Result<Var> {
    contrastive_loss(tape, hidden, negatives, tau, reduction)
}

/// Keeps only coordinates the unprompted baseline leaves inactive:
/// `m = 1 - (s0 > 0)`.
pub fn asc_mask(baseline: &Array2<f64>) -> Array2<f64> {
    baseline.map(|&v| if v > 0.0 { 0.0 } else { 1.0 })
}

/// Activation-state contrast. The same baseline-derived mask is applied to
/// the live activation row and to every negative; if the baseline already
/// activates everything there is nothing to contrast and the loss is zero.
pub fn asc_loss(
    tape: &mut Tape,
    activation: Var,
    baseline: &Array2<f64>,
    negatives: &[Array2<f64>],
    tau: f64,
    reduction: NegativeReduction,
) -> Result<Var> {
    let mask = asc_mask(baseline);
    if mask.iter().all(|&m| m == 0.0) {
        log::warn!("activation contrast skipped: baseline activates every coordinate");
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    let mask_var = tape.constant(mask.clone());
    let masked = tape.mul(activation, mask_var);
    let masked_negatives: Vec<Array2<f64>> = negatives.iter().map(|n| n * &mask).collect();
    contrastive_loss(tape, masked, &masked_negatives, tau, reduction)
}

/// `L = L_down + lambda_1 L_hsc + lambda_2 L_asc`, all `1 x 1` scalars.
pub fn total_loss(
    tape: &mut Tape,
    nll: Var,
    hsc: Var,
    asc: Var,
    lambda_1: f64,
    lambda_2: f64,
) -> Var {
    let h = tape.scale(hsc, lambda_1);
    let a = tape.scale(asc, lambda_2);
    let partial = tape.add(nll, h);
    tape.add(partial, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn loss_value(anchor: &Array2<f64>, negatives: &[Array2<f64>], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.leaf(anchor.clone());
        let l = contrastive_loss(&mut tape, a, negatives, tau, NegativeReduction::Sum).unwrap();
        tape.scalar(l)
    }

    fn scalar_cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        dot / (squared_norm(a).sqrt() * squared_norm(b).sqrt())
    }

    #[test]
    fn no_negatives_means_exactly_zero() {
        assert_eq!(loss_value(&array![[1.0, 2.0]], &[], 1.0), 0.0);
    }

    #[test]
    fn identical_negative_costs_ln_two() {
        let x = array![[0.3, -1.2, 0.7]];
        let l = loss_value(&x, &[x.clone()], 1.0);
        assert!((l - 2.0f64.ln()).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn opposite_negative_is_near_free() {
        let x = array![[1.0, 0.0]];
        let l = loss_value(&x, &[array![[-1.0, 0.0]]], 1.0);
        let want = (1f64.exp() + (-1f64).exp()).ln() - 1.0;
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.126928).abs() < 1e-5);
    }

    #[test]
    fn cosine_makes_the_loss_scale_invariant() {
        let x = array![[0.4, -0.9, 2.0, 0.1]];
        let n = vec![array![[1.0, 0.5, -0.2, 0.8]], array![[-0.3, 0.4, 0.9, -1.0]]];
        let scaled: Vec<Array2<f64>> = n.iter().map(|m| m * 7.5).collect();
        let a = loss_value(&x, &n, 0.7);
        let b = loss_value(&(&x * 3.0), &scaled, 0.7);
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn loss_grows_with_negative_alignment() {
        let x = array![[1.0, 0.0]];
        let angles = [3.0, 2.2, 1.5, 0.8, 0.2, 0.0f64];
        let losses: Vec<f64> = angles
            .iter()
            .map(|&t| loss_value(&x, &[array![[t.cos(), t.sin()]]], 1.0))
            .collect();
        for w in losses.windows(2) {
            assert!(w[1] > w[0], "not increasing: {losses:?}");
        }
    }

    #[test]
    fn matches_a_scalar_reimplementation() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = rng.gen_range(2..10);
            let x = Array2::from_shape_fn((1, d), |_| rng.gen_range(-2.0..2.0));
            let n = rng.gen_range(1..5);
            let negs: Vec<Array2<f64>> = (0..n)
                .map(|_| Array2::from_shape_fn((1, d), |_| rng.gen_range(-2.0..2.0)))
                .collect();
            let tau = rng.gen_range(0.3..3.0);
            let got = loss_value(&x, &negs, tau);
            let sum: f64 = negs
                .iter()
                .map(|k| (scalar_cosine(&x, k) / tau).exp())
                .sum();
            let want = ((1.0 / tau).exp() + sum).ln() - 1.0 / tau;
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn mean_reduction_divides_the_negative_mass() {
        let x = array![[0.3, 1.0]];
        let neg = array![[0.7, -0.4]];
        let negs = vec![neg.clone(), neg.clone()];
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let mean = contrastive_loss(&mut tape, a, &negs, 1.0, NegativeReduction::Mean).unwrap();
        let got = tape.scalar(mean);
        let want = loss_value(&x, &[neg], 1.0);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_inputs_are_rejected() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Array2::zeros((1, 3)));
        assert!(matches!(
            contrastive_loss(&mut tape, zero, &[array![[1.0, 0.0, 0.0]]], 1.0, NegativeReduction::Sum),
            Err(Error::DegenerateCosine(_))
        ));
        let ok = tape.leaf(array![[1.0, 0.0, 0.0]]);
        assert!(matches!(
            contrastive_loss(&mut tape, ok, &[Array2::zeros((1, 3))], 1.0, NegativeReduction::Sum),
            Err(Error::DegenerateCosine(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((1, 5), |_| rng.gen_range(-1.0..1.0));
        let negs: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((1, 5), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let l = contrastive_loss(&mut tape, a, &negs, 0.8, NegativeReduction::Sum).unwrap();
        tape.backward(l);
        let g = tape.grad(a);
        let eps = 1e-6;
        for j in 0..5 {
            let mut hi = x.clone();
            hi[[0, j]] += eps;
            let mut lo = x.clone();
            lo[[0, j]] -= eps;
            let fd = (loss_value(&hi, &negs, 0.8) - loss_value(&lo, &negs, 0.8)) / (2.0 * eps);
            assert!((g[[0, j]] - fd).abs() < 1e-7, "coord {j}: {} vs {fd}", g[[0, j]]);
        }
    }

    #[test]
    fn mask_keeps_only_inactive_baseline_coordinates() {
        let m = asc_mask(&array![[0.0, 1.5, -0.0, 2.0, 0.3]]);
        assert_eq!(m, array![[1.0, 0.0, 1.0, 0.0, 0.0]]);
    }

    #[test]
    fn fully_active_baseline_skips_the_activation_loss() {
        let mut tape = Tape::new();
        let s = tape.leaf(array![[1.0, 2.0]]);
        let l = asc_loss(
            &mut tape,
            s,
            &array![[0.5, 0.8]],
            &[array![[1.0, 1.0]]],
            1.0,
            NegativeReduction::Sum,
        )
        .unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn activation_loss_masks_negatives_too() {
        // baseline activates coord 0, so only coord 1 survives the mask
        let baseline = array![[2.0, 0.0]];
        let s = array![[5.0, 1.0]];
        let neg = array![[-3.0, 1.0]]; // masked: [0, 1], perfectly aligned with masked s
        let mut tape = Tape::new();
        let sv = tape.leaf(s);
        let l = asc_loss(&mut tape, sv, &baseline, &[neg], 1.0, NegativeReduction::Sum).unwrap();
        assert!((tape.scalar(l) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let mut tape = Tape::new();
        let nll = tape.constant(array![[1.0]]);
        let hsc = tape.constant(array![[2.0]]);
        let asc = tape.constant(array![[3.0]]);
        let l = total_loss(&mut tape, nll, hsc, asc, 0.1, 0.5);
        assert!((tape.scalar(l) - 2.7).abs() < 1e-12);
    }

    #[test]
    fn empty_mixture_is_the_identity() {
        let mut tape = Tape::new();
        let p = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let composed = compose_prompt(&mut tape, p, &[]);
        assert_eq!(composed, p);
    }

    #[test]
    fn mixture_matches_hand_computation() {
        let mut tape = Tape::new();
        let alpha = tape.constant(array![[0.5, 0.3, 0.2]]);
        let p_t = tape.leaf(array![[1.0, 0.0]]);
        let p1 = tape.constant(array![[2.0, 4.0]]);
        let p2 = tape.constant(array![[-1.0, 8.0]]);
        let weights = mixture_weight_vars(&mut tape, alpha, &[0, 1]);
        assert!((tape.scalar(weights[0]) - 0.625).abs() < 1e-12);
        assert!((tape.scalar(weights[1]) - 0.375).abs() < 1e-12);
        let composed = compose_prompt(&mut tape, p_t, &[(weights[0], p1), (weights[1], p2)]);
        let v = tape.value(composed);
        // 1 + 0.625*2 + 0.375*(-1), 0 + 0.625*4 + 0.375*8
        assert!((v[[0, 0]] - 1.875).abs() < 1e-12);
        assert!((v[[0, 1]] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn stored_prompts_receive_no_gradient() {
        let mut tape = Tape::new();
        let alpha_leaf = tape.leaf(array![[0.6, 0.4]]);
        let p_t = tape.leaf(array![[0.5, -0.5]]);
        let stored_a = tape.constant(array![[1.0, 2.0]]);
        let stored_b = tape.constant(array![[-4.0, 3.0]]);
        let weights = mixture_weight_vars(&mut tape, alpha_leaf, &[0, 1]);
        let composed = compose_prompt(
            &mut tape,
            p_t,
            &[(weights[0], stored_a), (weights[1], stored_b)],
        );
        let out = tape.sum(composed);
        tape.backward(out);
        assert!(tape.grad(stored_a).iter().all(|&g| g == 0.0));
        assert!(tape.grad(stored_b).iter().all(|&g| g == 0.0));
        assert!(tape.grad(p_t).iter().all(|&g| g == 1.0));
        // renormalization keeps gradient flowing into the similarity weights
        assert!(tape.grad(alpha_leaf).iter().any(|&g| g.abs() > 0.0));
    }
}
