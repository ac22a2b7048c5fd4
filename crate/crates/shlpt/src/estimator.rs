//! Attention-style similarity estimator over the prompt pool.
//!
//! Each stored prompt is summarized by a column-wise max over its rows. The
//! current task's instance representation is pooled the same way (over the
//! trainable prompt concatenated with the embedded input, so the estimator
//! stays differentiable in the prompt), projected through a small
//! down/up bottleneck with a layer norm, and compared to the pool summaries
//! with a tempered softmax. Tasks whose weight clears a threshold count as
//! similar and get renormalized mixture weights; everything else is treated
//! as dissimilar.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LN_EPS;
use crate::error::{Error, Result};
use crate::pool::PromptPool;
use crate::tape::{Tape, Var};

/// Default softmax temperature for a given model width.
pub fn default_tau_sim(d_model: usize) -> f64 {
    2e4 * d_model as f64 / 1024.0
}

/// Bottleneck projection weights plus the similarity hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub w_down: Array2<f64>,
    pub w_up: Array2<f64>,
    pub ln_gain: Array2<f64>,
    pub ln_bias: Array2<f64>,
    pub tau_sim: f64,
    pub delta: f64,
}

/// Tape handles for the estimator weights.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorVars {
    pub w_down: Var,
    pub w_up: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl EstimatorParams {
    /// Fresh estimator with bottleneck width `d / 4`.
    pub fn init(d_model: usize, tau_sim: f64, delta: f64, seed: u64) -> Result<Self> {
        if d_model < 4 {
            return Err(Error::InvalidArgument {
                field: "d_model",
                reason: format!("need at least width 4 for the bottleneck, got {d_model}"),
            });
        }
        if tau_sim <= 0.0 {
            return Err(Error::InvalidArgument {
                field: "tau_sim",
                reason: format!("temperature must be positive, got {tau_sim}"),
            });
        }
        if delta < 0.0 {
            return Err(Error::InvalidArgument {
                field: "delta",
                reason: format!("threshold must be nonnegative, got {delta}"),
            });
        }
        let r = d_model / 4;
        let scale = 1.0 / (d_model as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(Self {
            w_down: Array2::from_shape_fn((d_model, r), |_| rng.gen_range(-scale..scale)),
            w_up: Array2::from_shape_fn((r, d_model), |_| rng.gen_range(-scale..scale)),
            ln_gain: Array2::ones((1, d_model)),
            ln_bias: Array2::zeros((1, d_model)),
            tau_sim,
            delta,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_down.nrows()
    }

    /// Puts the weights on a tape, as leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EstimatorVars {
        let put = |tape: &mut Tape, m: &Array2<f64>| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        EstimatorVars {
            w_down: put(tape, &self.w_down),
            w_up: put(tape, &self.w_up),
            ln_gain: put(tape, &self.ln_gain),
            ln_bias: put(tape, &self.ln_bias),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.w_down,
            &mut self.w_up,
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    pub fn grads(&self, tape: &Tape, vars: &EstimatorVars) -> Vec<Array2<f64>> {
        vec![
            tape.grad(vars.w_down),
            tape.grad(vars.w_up),
            tape.grad(vars.ln_gain),
            tape.grad(vars.ln_bias),
        ]
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Column-wise max summary of one matrix: `1 x d`.
pub fn max_pool(m: &Array2<f64>) -> Array2<f64> {
    let pooled: Array1<f64> = m.map_axis(Axis(0), |col| {
        col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    });
    pooled.insert_axis(Axis(0))
}

/// Stacked max-pooled summaries of every stored prompt: `(t-1) x d`.
/// Pool entries are frozen, so this never sits on a tape.
pub fn pool_features(pool: &PromptPool) -> Array2<f64> {
    let d = pool.entries().first().map_or(0, |p| p.dim());
    let mut feats = Array2::zeros((pool.len(), d));
    for (i, p) in pool.entries().iter().enumerate() {
        feats.row_mut(i).assign(&max_pool(p.matrix()).row(0));
    }
    feats
}

/// Max-pools the current prompt together with the embedded input. Keeping
/// the prompt in the pooled view is what lets similarity weights push
/// gradient back into it.
pub fn instance_feature(tape: &mut Tape, prompt: Var, embedded_input: Var) -> Var {
    let joined = tape.concat_rows(prompt, embedded_input);
    tape.col_max(joined)
}

/// Bottleneck projection: `LayerNorm(SiLU(x W_down) W_up)`.
pub fn project_instance(tape: &mut Tape, vars: &EstimatorVars, pooled: Var) -> Var {
    let down = tape.matmul(pooled, vars.w_down);
    let act = tape.silu(down);
    let up = tape.matmul(act, vars.w_up);
    tape.layer_norm(up, vars.ln_gain, vars.ln_bias, LN_EPS)
}

/// Tempered softmax over inner products with the pool summaries.
/// `projected` is `1 x d`, `pool_feats` is `k x d` with `k >= 1`; the
/// result is `1 x k`.
pub fn similarity(tape: &mut Tape, projected: Var, pool_feats: Var, tau_sim: f64) -> Result<Var> {
    let k = tape.value(pool_feats).nrows();
    if k == 0 {
        return Err(Error::InvalidArgument {
            field: "pool_feats",
            reason: "similarity needs at least one stored prompt".into(),
        });
    }
    let pool_t = tape.transpose(pool_feats);
    let logits = tape.matmul(projected, pool_t);
    let tempered = tape.scale(logits, 1.0 / tau_sim);
    Ok(tape.row_softmax(tempered, None))
}

/// Threshold split of the similarity weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Indices with weight strictly above the threshold.
    pub similar: Vec<usize>,
    /// Everything else, ties included.
    pub dissimilar: Vec<usize>,
    /// Per-index mixture weights: renormalized over the similar set,
    /// zero elsewhere. All zero when nothing clears the threshold.
    pub mixture_weights: Vec<f64>,
}

pub fn partition(alpha: &[f64], delta: f64) -> Partition {
    let similar: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > delta).collect();
    let dissimilar: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] <= delta).collect();
    let total: f64 = similar.iter().map(|&i| alpha[i]).sum();
    let mut mixture_weights = vec![0.0; alpha.len()];
    if total > 0.0 {
        for &i in &similar {
            mixture_weights[i] = alpha[i] / total;
        }
    }
    Partition {
        similar,
        dissimilar,
        mixture_weights,
    }
}

/// One similarity readout, logged per training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub task_id: String,
    pub step: usize,
    pub pool_task_ids: Vec<String>,
    pub alpha: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::Prompt;
    use ndarray::array;

    fn make_pool(k: usize, l_p: usize, d: usize, seed: u64) -> PromptPool {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut pool = PromptPool::new();
        for i in 0..k {
            let m = Array2::from_shape_fn((l_p, d), |_| rng.gen_range(-1.0..1.0));
            pool.append_finalized(Prompt::trainable(format!("t{i}"), m).finalize())
                .unwrap();
        }
        pool
    }

    fn alpha_for(
        params: &EstimatorParams,
        prompt: &Array2<f64>,
        input: &Array2<f64>,
        pool_feats: &Array2<f64>,
    ) -> (Tape, Var, Var, EstimatorVars, Var) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let p = tape.leaf(prompt.clone());
        let x = tape.constant(input.clone());
        let feats = tape.constant(pool_feats.clone());
        let pooled = instance_feature(&mut tape, p, x);
        let projected = project_instance(&mut tape, &vars, pooled);
        let alpha = similarity(&mut tape, projected, feats, params.tau_sim).unwrap();
        (tape, alpha, p, vars, feats)
    }

    #[test]
    fn softmax_matches_reference_values() {
        let mut tape = Tape::new();
        let projected = tape.constant(array![[1.0, 0.0, -1.0]]);
        let feats = tape.constant(Array2::eye(3));
        let alpha = similarity(&mut tape, projected, feats, 1.0).unwrap();
        let a = tape.value(alpha);
        let expected = [0.66524096, 0.24472847, 0.09003057];
        for (got, want) in a.iter().zip(expected) {
            assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
        }
    }

    #[test]
    fn higher_temperature_flattens_the_distribution() {
        let logits = array![[3.0, 1.0, 0.0, -2.0]];
        let entropy = |tau: f64| -> f64 {
            let mut tape = Tape::new();
            let projected = tape.constant(logits.clone());
            let feats = tape.constant(Array2::eye(4));
            let alpha = similarity(&mut tape, projected, feats, tau).unwrap();
            tape.value(alpha)
                .iter()
                .map(|&a| if a > 0.0 { -a * a.ln() } else { 0.0 })
                .sum()
        };
        let taus = [0.1, 0.5, 1.0, 2.0, 10.0, 100.0];
        let hs: Vec<f64> = taus.iter().map(|&t| entropy(t)).collect();
        for w in hs.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "entropy not nondecreasing: {hs:?}");
        }
        assert!((hs[hs.len() - 1] - (4.0f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn partition_matches_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let k = rng.gen_range(1..8);
            let logits = Array2::from_shape_fn((1, k), |_| rng.gen_range(-3.0..3.0));
            let alpha: Vec<f64> = crate::tape::softmax_rows(&logits).row(0).to_vec();
            let delta = rng.gen_range(0.0..1.0);

            let got = partition(&alpha, delta);

            // independent element-wise check
            let mut sum_similar = 0.0;
            for (i, &a) in alpha.iter().enumerate() {
                if a > delta {
                    assert!(got.similar.contains(&i));
                    sum_similar += a;
                } else {
                    assert!(got.dissimilar.contains(&i));
                    assert_eq!(got.mixture_weights[i], 0.0);
                }
            }
            assert_eq!(got.similar.len() + got.dissimilar.len(), k);
            if sum_similar > 0.0 {
                let total: f64 = got.mixture_weights.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                for &i in &got.similar {
                    assert!((got.mixture_weights[i] - alpha[i] / sum_similar).abs() < 1e-12);
                }
            } else {
                assert!(got.mixture_weights.iter().all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn partition_renormalizes_similar_weights() {
        let p = partition(&[0.5, 0.3, 0.2], 0.25);
        assert_eq!(p.similar, vec![0, 1]);
        assert_eq!(p.dissimilar, vec![2]);
        assert!((p.mixture_weights[0] - 0.625).abs() < 1e-12);
        assert!((p.mixture_weights[1] - 0.375).abs() < 1e-12);
        assert_eq!(p.mixture_weights[2], 0.0);
    }

    #[test]
    fn high_threshold_marks_everything_dissimilar() {
        let p = partition(&[0.5, 0.3, 0.2], 1.5);
        assert!(p.similar.is_empty());
        assert_eq!(p.dissimilar, vec![0, 1, 2]);
        assert!(p.mixture_weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn zero_threshold_keeps_raw_weights() {
        let alpha = [0.5, 0.3, 0.2];
        let p = partition(&alpha, 0.0);
        assert_eq!(p.similar, vec![0, 1, 2]);
        for (w, a) in p.mixture_weights.iter().zip(alpha) {
            assert!((w - a).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_are_dissimilar() {
        let p = partition(&[0.25, 0.25, 0.5], 0.25);
        assert_eq!(p.similar, vec![2]);
        assert_eq!(p.dissimilar, vec![0, 1]);
    }

    #[test]
    fn pool_features_are_columnwise_maxima() {
        let pool = make_pool(3, 4, 6, 5);
        let feats = pool_features(&pool);
        assert_eq!(feats.dim(), (3, 6));
        for (i, p) in pool.entries().iter().enumerate() {
            for j in 0..6 {
                let want = p.matrix().column(j).iter().cloned().fold(f64::MIN, f64::max);
                assert_eq!(feats[[i, j]], want);
            }
        }
    }

    /// Central finite differences of a scalar functional of alpha against
    /// the tape gradients for the projection weights and the live prompt.
    #[test]
    fn similarity_gradients_match_finite_differences() {
        let d = 8;
        let params = EstimatorParams::init(d, 0.7, 0.06, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let prompt = Array2::from_shape_fn((2, d), |_| rng.gen_range(-1.0..1.0));
        let input = Array2::from_shape_fn((5, d), |_| rng.gen_range(-1.0..1.0));
        let pool = make_pool(3, 2, d, 21);
        let feats = pool_features(&pool);
        let probe = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-1.0..1.0));

        // scalar objective: probe . alpha (plain sum(alpha) is constant)
        let objective = |params: &EstimatorParams, prompt: &Array2<f64>| -> f64 {
            let (mut tape, alpha, _, _, _) = alpha_for(params, prompt, &input, &feats);
            let w = tape.constant(probe.clone());
            let weighted = tape.mul(alpha, w);
            let out = tape.sum(weighted);
            tape.scalar(out)
        };

        let (mut tape, alpha, p_var, vars, feats_var) = alpha_for(&params, &prompt, &input, &feats);
        let w = tape.constant(probe.clone());
        let weighted = tape.mul(alpha, w);
        let out = tape.sum(weighted);
        tape.backward(out);

        let eps = 1e-5;
        let check = |analytic: &Array2<f64>, mut bump: Box<dyn FnMut(usize, usize, f64) -> f64>| {
            for i in 0..analytic.nrows() {
                for j in 0..analytic.ncols() {
                    let fd = (bump(i, j, eps) - bump(i, j, -eps)) / (2.0 * eps);
                    assert!(
                        (analytic[[i, j]] - fd).abs() < 1e-6,
                        "grad mismatch at ({i},{j}): {} vs {fd}",
                        analytic[[i, j]]
                    );
                }
            }
        };

        let g_prompt = tape.grad(p_var);
        assert!(g_prompt.iter().any(|&g| g.abs() > 1e-8), "prompt grad all zero");
        check(
            &g_prompt,
            Box::new(|i, j, e| {
                let mut p = prompt.clone();
                p[[i, j]] += e;
                objective(&params, &p)
            }),
        );

        let g_down = tape.grad(vars.w_down);
        check(
            &g_down,
            Box::new(|i, j, e| {
                let mut q = params.clone();
                q.w_down[[i, j]] += e;
                objective(&q, &prompt)
            }),
        );

        let g_up = tape.grad(vars.w_up);
        check(
            &g_up,
            Box::new(|i, j, e| {
                let mut q = params.clone();
                q.w_up[[i, j]] += e;
                objective(&q, &prompt)
            }),
        );

        // stored prompt summaries entered as constants: no gradient flows back
        assert!(tape.grad(feats_var).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_pool_is_rejected() {
        let mut tape = Tape::new();
        let projected = tape.constant(array![[1.0, 2.0]]);
        let feats = tape.constant(Array2::zeros((0, 2)));
        assert!(similarity(&mut tape, projected, feats, 1.0).is_err());
    }

    #[test]
    fn estimator_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let params = EstimatorParams::init(8, 156.25, 0.06, 7).unwrap();
        let path = dir.path().join("estimator.json");
        params.save(&path).unwrap();
        let loaded = EstimatorParams::load(&path).unwrap();
        assert_eq!(loaded.w_down, params.w_down);
        assert_eq!(loaded.tau_sim, params.tau_sim);
    }
}
