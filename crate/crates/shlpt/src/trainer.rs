//! The sequential task loop: per-task prompt optimization with
//! similarity-partitioned transfer, prompt finalization into the pool, and
//! the baseline / ablation training modes.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::estimator::{
    default_tau_sim, instance_feature, partition, pool_features, project_instance,
    similarity, EstimatorParams, SimilarityProfile,
};
use crate::optim::AdamW;
use crate::pool::{Prompt, PromptPool};
use crate::tape::{Tape, Var};
use crate::task_data::{label_token, TaskBatch, TaskDataset};
use crate::transfer::{
    asc_loss, compose_prompt, hsc_loss, mixture_terms, total_loss, NegativeReduction,
};

/// Training mode: the full method, baselines, and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Shlpt,
    PerTaskPrompts,
    ContinualInit,
    ProgressivePrompts,
    /// Similarity estimator replaced by uniform weights over old tasks.
    ShlptMinusAse,
    ShlptMinusAsc,
    ShlptMinusHsc,
    /// Similar-task mixture zeroed out; losses unchanged.
    ShlptMinusStt,
    ShlptMinusAscHsc,
}

impl Method {
    /// Modes that compute similarity over the pool (trained or uniform).
    pub fn partitions_pool(self) -> bool {
        !matches!(
            self,
            Method::PerTaskPrompts | Method::ContinualInit | Method::ProgressivePrompts
        )
    }

    /// Modes with a trainable similarity head.
    pub fn trains_estimator(self) -> bool {
        self.partitions_pool() && self != Method::ShlptMinusAse
    }

    pub fn zero_mixture(self) -> bool {
        self == Method::ShlptMinusStt
    }

    /// Contrastive loss weights after applying the ablation switches.
    pub fn effective_lambdas(self, lambda_1: f64, lambda_2: f64) -> (f64, f64) {
        match self {
            Method::PerTaskPrompts | Method::ContinualInit | Method::ProgressivePrompts => {
                (0.0, 0.0)
            }
            Method::ShlptMinusAsc => (lambda_1, 0.0),
            Method::ShlptMinusHsc => (0.0, lambda_2),
            Method::ShlptMinusAscHsc => (0.0, 0.0),
            _ => (lambda_1, lambda_2),
        }
    }
}

/// Which epochs contribute to the averaged similarity used at
/// finalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaAveraging {
    /// Average over the selected (best validation) epoch only.
    #[default]
    FinalEpoch,
    /// Average over every epoch up to and including the selected one.
    AllEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub prompt_length: usize,
    pub seeds: Vec<u64>,
    pub early_stopping_patience: usize,
    pub delta: f64,
    /// Similarity temperature; derived from the model width when absent.
    pub tau_sim: Option<f64>,
    pub tau_hsc: f64,
    pub tau_asc: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub alpha_averaging: AlphaAveraging,
    pub negative_reduction: NegativeReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Shlpt,
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.3,
            weight_decay: 0.01,
            prompt_length: 16,
            seeds: vec![42, 142, 242],
            early_stopping_patience: 5,
            delta: 0.06,
            tau_sim: None,
            tau_hsc: 1.0,
            tau_asc: 1.0,
            lambda_1: 0.1,
            lambda_2: 0.5,
            alpha_averaging: AlphaAveraging::default(),
            negative_reduction: NegativeReduction::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, f64); 4] = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("prompt_length", self.prompt_length as f64),
        ];
        for (field, v) in positive {
            if v <= 0.0 {
                return Err(Error::InvalidArgument {
                    field,
                    reason: format!("must be positive, got {v}"),
                });
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument {
                field: "seeds",
                reason: "at least one seed is required".into(),
            });
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidArgument {
                field: "delta",
                reason: format!("must be nonnegative, got {}", self.delta),
            });
        }
        for (field, v) in [
            ("tau_hsc", self.tau_hsc),
            ("tau_asc", self.tau_asc),
            ("tau_sim", self.tau_sim.unwrap_or(1.0)),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidArgument {
                    field,
                    reason: format!("temperature must be positive, got {v}"),
                });
            }
        }
        for (field, v) in [("lambda_1", self.lambda_1), ("lambda_2", self.lambda_2)] {
            if v < 0.0 {
                return Err(Error::InvalidArgument {
                    field,
                    reason: format!("must be nonnegative, got {v}"),
                });
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument {
                field: "weight_decay",
                reason: format!("must be nonnegative, got {}", self.weight_decay),
            });
        }
        Ok(())
    }

    pub fn effective_tau_sim(&self, d_model: usize) -> f64 {
        self.tau_sim.unwrap_or_else(|| default_tau_sim(d_model))
    }
}

/// Outcome of one task's training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    /// Mean batch loss per optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean train loss per epoch.
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    /// Epoch whose weights were kept (early stopping restores the best).
    pub best_epoch: usize,
    pub test_accuracy: f64,
    /// Averaged similarity over old tasks used to build the final prompt;
    /// empty when nothing was in the pool.
    pub final_alpha: Vec<f64>,
    pub pool_task_ids: Vec<String>,
    /// Batch-mean similarity per step, for the step-curve reports.
    pub alpha_profiles: Vec<SimilarityProfile>,
    pub wall_clock_secs: f64,
}

/// Pool, similarity head, and completed-task records: everything needed to
/// continue a sequence from a task boundary.
#[derive(Debug, Clone, Default)]
pub struct TrainerState {
    pub pool: PromptPool,
    pub estimator: Option<EstimatorParams>,
    pub completed: Vec<TaskResult>,
    /// Row `i`: test accuracy on tasks `0..=i` after learning task `i`.
    pub accuracy_matrix: Vec<Vec<f64>>,
}

/// One full pass over a task sequence with a single seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceOutcome {
    pub method: Method,
    pub seed: u64,
    pub task_results: Vec<TaskResult>,
    pub accuracy_matrix: Vec<Vec<f64>>,
}

impl SequenceOutcome {
    /// Copy with wall-clock timings zeroed, for equality comparisons of
    /// otherwise deterministic runs.
    pub fn without_timing(mut self) -> Self {
        for r in &mut self.task_results {
            r.wall_clock_secs = 0.0;
        }
        self
    }
}

mod purpose {
    pub const PROMPT_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ESTIMATOR_INIT: u64 = 3;
}

/// Independent random stream per (seed, task, purpose). Methods that share
/// a seed draw identical streams for the same purpose, which is what makes
/// the degenerate modes bit-comparable.
fn stream(seed: u64, task_index: usize, purpose: u64) -> ChaCha20Rng {
    let mixed = seed
        ^ (task_index as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15)
        ^ purpose.wrapping_mul(0xd2b74407b1ce6e93);
    ChaCha20Rng::seed_from_u64(mixed)
}

fn init_prompt_matrix(
    d_model: usize,
    prompt_length: usize,
    seed: u64,
    task_index: usize,
    inherited: Option<&Array2<f64>>,
) -> Array2<f64> {
    if let Some(m) = inherited {
        return m.clone();
    }
    let scale = 1.0 / (d_model as f64).sqrt();
    let mut rng = stream(seed, task_index, purpose::PROMPT_INIT);
    Array2::from_shape_fn((prompt_length, d_model), |_| {
        rng.gen_range(-0.5..0.5) * scale
    })
}

/// Uniform similarity over `k` old tasks, the estimator-free ablation.
pub fn uniform_alpha(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Builds the frozen composed prompt from a trained `P^t` and averaged
/// similarity weights: `P = P^t + sum_j w_j P^j` over the similar set.
fn finalize_prompt(
    task_id: &str,
    trained: &Array2<f64>,
    pool: &PromptPool,
    weights: &[f64],
) -> Prompt {
    let mut matrix = trained.clone();
    for (w, p) in weights.iter().zip(pool.entries()) {
        if *w != 0.0 {
            matrix = matrix + &(p.matrix() * *w);
        }
    }
    Prompt::trainable(task_id, matrix).finalize()
}

/// Classification accuracy of a fixed prompt on one split.
pub fn evaluate_accuracy(
    backbone: &Backbone,
    prompt: &Array2<f64>,
    batch: &TaskBatch,
    num_classes: usize,
) -> Result<f64> {
    if batch.instances.is_empty() {
        return Err(Error::InvalidArgument {
            field: "batch",
            reason: "cannot score an empty split".into(),
        });
    }
    let mut correct = 0usize;
    for inst in &batch.instances {
        if backbone.predict(prompt, &inst.tokens, num_classes)? == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.instances.len() as f64)
}

/// Mean prompted classification loss on a split (no gradient use).
fn evaluate_loss(
    backbone: &Backbone,
    prompt: &Array2<f64>,
    batch: &TaskBatch,
) -> Result<f64> {
    let mut total = 0.0;
    for inst in &batch.instances {
        let probe =
            backbone.forward_with_prompt(prompt, &inst.tokens, label_token(inst.label))?;
        total += probe.nll;
    }
    Ok(total / batch.instances.len() as f64)
}

/// Trains `P^t` (and the similarity head when applicable) on one task.
/// The pool is read-only here; appending the finalized prompt is the
/// caller's job.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    backbone: &Backbone,
    pool: &PromptPool,
    estimator: &mut Option<EstimatorParams>,
    dataset: &TaskDataset,
    config: &TrainConfig,
    seed: u64,
    task_index: usize,
    inherited_prompt: Option<&Array2<f64>>,
) -> Result<(Prompt, TaskResult)> {
    config.validate()?;
    if pool.contains(&dataset.task_id) {
        return Err(Error::DuplicateTask(dataset.task_id.clone()));
    }
    let started = Instant::now();
    let d = backbone.config.d_model;
    let method = config.method;
    let k = pool.len();
    let partitions = method.partitions_pool() && k > 0;
    let trains_estimator = method.trains_estimator() && k > 0;
    let (lambda_1, lambda_2) = method.effective_lambdas(config.lambda_1, config.lambda_2);
    let tau_sim = config.effective_tau_sim(d);

    if trains_estimator && estimator.is_none() {
        let mut init_rng = stream(seed, 0, purpose::ESTIMATOR_INIT);
        *estimator = Some(EstimatorParams::init(
            d,
            tau_sim,
            config.delta,
            init_rng.gen(),
        )?);
    }

    let mut prompt = init_prompt_matrix(d, config.prompt_length, seed, task_index, inherited_prompt);
    let feats = if partitions { pool_features(pool) } else { Array2::zeros((0, d)) };
    let progressive_prefix: Option<Array2<f64>> = if method == Method::ProgressivePrompts && k > 0
    {
        let mut rows = pool.entries()[0].matrix().clone();
        for p in &pool.entries()[1..] {
            rows = ndarray::concatenate(Axis(0), &[rows.view(), p.matrix().view()])
                .expect("pool prompts share dimensions");
        }
        Some(rows)
    } else {
        None
    };

    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut shuffle_rng = stream(seed, task_index, purpose::SHUFFLE);

    let mut step_losses = Vec::new();
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut val_accuracies = Vec::new();
    let mut alpha_profiles = Vec::new();
    let mut epoch_alphas: Vec<Vec<f64>> = Vec::new();

    let mut best: Option<(usize, f64, Array2<f64>, Option<EstimatorParams>)> = None;

    let n_train = dataset.train.instances.len();
    if n_train == 0 {
        return Err(Error::InvalidArgument {
            field: "dataset",
            reason: format!("task {} has no training instances", dataset.task_id),
        });
    }

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        // Fisher-Yates from the task's dedicated shuffle stream
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_alpha_sum = vec![0.0; k];
        let mut epoch_alpha_count = 0usize;
        let mut steps_this_epoch = 0usize;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let prompt_var = tape.leaf(prompt.clone());
            let est_vars = if trains_estimator {
                estimator.as_ref().map(|e| e.register(&mut tape, true))
            } else {
                None
            };
            let feats_var = if partitions && trains_estimator {
                Some(tape.constant(feats.clone()))
            } else {
                None
            };

            let mut batch_loss: Option<Var> = None;
            let mut batch_alpha_sum = vec![0.0; k];

            for &idx in chunk {
                let inst = &dataset.train.instances[idx];
                let target = label_token(inst.label);

                // similarity over the pool (trained head or uniform)
                let (alpha_values, alpha_var) = if trains_estimator {
                    let vars = est_vars.as_ref().expect("estimator registered");
                    let embedded = backbone.embed(&inst.tokens)?;
                    let x = tape.constant(embedded);
                    let pooled = instance_feature(&mut tape, prompt_var, x);
                    let projected = project_instance(&mut tape, vars, pooled);
                    let alpha = similarity(
                        &mut tape,
                        projected,
                        feats_var.expect("features registered"),
                        tau_sim,
                    )?;
                    (tape.value(alpha).row(0).to_vec(), Some(alpha))
                } else if partitions {
                    (uniform_alpha(k), None)
                } else {
                    (Vec::new(), None)
                };

                for (a, s) in alpha_values.iter().zip(batch_alpha_sum.iter_mut()) {
                    *s += a;
                }

                let part = partition(&alpha_values, config.delta);

                // prompt for this instance: trained rows plus, depending on
                // the method, the similar-task mixture or the frozen prefix
                let composed = if let Some(prefix) = &progressive_prefix {
                    let prefix_var = tape.constant(prefix.clone());
                    tape.concat_rows(prefix_var, prompt_var)
                } else if partitions && !part.similar.is_empty() && !method.zero_mixture() {
                    if let Some(alpha) = alpha_var {
                        let terms =
                            mixture_terms(&mut tape, alpha, &part.similar, pool.entries());
                        compose_prompt(&mut tape, prompt_var, &terms)
                    } else {
                        // uniform-similarity ablation: fixed-weight mixture
                        let terms: Vec<(Var, Var)> = part
                            .similar
                            .iter()
                            .map(|&j| {
                                let w = tape.constant(Array2::from_elem(
                                    (1, 1),
                                    part.mixture_weights[j],
                                ));
                                let p = tape.constant(pool.entries()[j].matrix().clone());
                                (w, p)
                            })
                            .collect();
                        compose_prompt(&mut tape, prompt_var, &terms)
                    }
                } else {
                    prompt_var
                };

                let fwd = backbone.forward_train(&mut tape, composed, &inst.tokens, target)?;

                // dissimilar-task probes enter the losses by value only
                let mut inst_loss = fwd.nll;
                if partitions && !part.dissimilar.is_empty() && (lambda_1 > 0.0 || lambda_2 > 0.0)
                {
                    let mut h_negs = Vec::new();
                    let mut s_negs = Vec::new();
                    for &j in &part.dissimilar {
                        let probe = backbone.forward_with_prompt(
                            pool.entries()[j].matrix(),
                            &inst.tokens,
                            target,
                        )?;
                        h_negs.push(probe.h.insert_axis(Axis(0)));
                        s_negs.push(probe.s.insert_axis(Axis(0)));
                    }
                    let hsc = if lambda_1 > 0.0 {
                        hsc_loss(
                            &mut tape,
                            fwd.h,
                            &h_negs,
                            config.tau_hsc,
                            config.negative_reduction,
                        )?
                    } else {
                        tape.constant(Array2::zeros((1, 1)))
                    };
                    let asc = if lambda_2 > 0.0 {
                        let s0 = backbone
                            .baseline_activation(&inst.tokens)?
                            .insert_axis(Axis(0));
                        match asc_loss(
                            &mut tape,
                            fwd.s,
                            &s0,
                            &s_negs,
                            config.tau_asc,
                            config.negative_reduction,
                        ) {
                            Ok(v) => v,
                            Err(Error::DegenerateCosine(why)) => {
                                log::warn!(
                                    "activation contrast skipped on task {}: {why}",
                                    dataset.task_id
                                );
                                tape.constant(Array2::zeros((1, 1)))
                            }
                            Err(e) => return Err(e),
                        }
                    } else {
                        tape.constant(Array2::zeros((1, 1)))
                    };
                    inst_loss = total_loss(&mut tape, fwd.nll, hsc, asc, lambda_1, lambda_2);
                }

                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, inst_loss),
                    None => inst_loss,
                });
            }

            let summed = batch_loss.expect("non-empty batch");
            let mean = tape.scale(summed, 1.0 / chunk.len() as f64);
            let loss_value = tape.scalar(mean);
            if !loss_value.is_finite() {
                let tokens: Vec<&[u32]> = chunk
                    .iter()
                    .map(|&i| dataset.train.instances[i].tokens.as_slice())
                    .collect();
                log::error!("non-finite loss on batch {batch_idx}: {tokens:?}");
                return Err(Error::Diverged(format!(
                    "task {} epoch {epoch} batch {batch_idx}: loss {loss_value}",
                    dataset.task_id
                )));
            }
            tape.backward(mean);

            let mut grads = vec![tape.grad(prompt_var)];
            if let (Some(vars), Some(est)) = (&est_vars, estimator.as_ref()) {
                grads.extend(est.grads(&tape, vars));
            }
            {
                let mut params: Vec<&mut Array2<f64>> = vec![&mut prompt];
                if trains_estimator {
                    if let Some(est) = estimator.as_mut() {
                        params.extend(est.tensors_mut());
                    }
                }
                optimizer.step(&mut params, &grads);
            }

            step_losses.push(loss_value);
            epoch_loss += loss_value;
            steps_this_epoch += 1;

            if k > 0 && partitions {
                let mean_alpha: Vec<f64> = batch_alpha_sum
                    .iter()
                    .map(|s| s / chunk.len() as f64)
                    .collect();
                for (t, b) in epoch_alpha_sum.iter_mut().zip(&mean_alpha) {
                    *t += b * chunk.len() as f64;
                }
                epoch_alpha_count += chunk.len();
                alpha_profiles.push(SimilarityProfile {
                    task_id: dataset.task_id.clone(),
                    step: step_losses.len() - 1,
                    pool_task_ids: pool
                        .entries()
                        .iter()
                        .map(|p| p.task_id().to_string())
                        .collect(),
                    alpha: mean_alpha,
                });
            }
        }

        train_losses.push(epoch_loss / steps_this_epoch as f64);
        epoch_alphas.push(if epoch_alpha_count > 0 {
            epoch_alpha_sum
                .iter()
                .map(|s| s / epoch_alpha_count as f64)
                .collect()
        } else {
            vec![0.0; k]
        });

        // validation with the prompt this epoch would finalize to
        let eval_prompt = eval_prompt_for(
            method,
            &prompt,
            pool,
            &epoch_alphas[epoch],
            config.delta,
            progressive_prefix.as_ref(),
        );
        let val_acc =
            evaluate_accuracy(backbone, &eval_prompt, &dataset.validation, dataset.num_classes)?;
        let val_loss = evaluate_loss(backbone, &eval_prompt, &dataset.validation)?;
        val_accuracies.push(val_acc);
        val_losses.push(val_loss);

        let improved = best.as_ref().map_or(true, |(_, acc, _, _)| val_acc > *acc);
        if improved {
            best = Some((epoch, val_acc, prompt.clone(), estimator.clone()));
        } else if let Some((best_epoch, _, _, _)) = &best {
            if epoch - best_epoch >= config.early_stopping_patience {
                log::info!(
                    "task {}: stopping after epoch {epoch} (best epoch {best_epoch})",
                    dataset.task_id
                );
                break;
            }
        }
    }

    let (best_epoch, _, best_prompt, best_estimator) = best.expect("at least one epoch ran");
    if trains_estimator {
        *estimator = best_estimator;
    }

    // averaged similarity over the chosen window decides the final mixture
    let final_alpha: Vec<f64> = if k > 0 && partitions {
        match config.alpha_averaging {
            AlphaAveraging::FinalEpoch => epoch_alphas[best_epoch].clone(),
            AlphaAveraging::AllEpochs => {
                let window = &epoch_alphas[..=best_epoch];
                (0..k)
                    .map(|j| window.iter().map(|e| e[j]).sum::<f64>() / window.len() as f64)
                    .collect()
            }
        }
    } else {
        Vec::new()
    };

    let weights = if partitions && !method.zero_mixture() {
        partition(&final_alpha, config.delta).mixture_weights
    } else {
        vec![0.0; k]
    };
    let finalized = finalize_prompt(&dataset.task_id, &best_prompt, pool, &weights);

    let eval_prompt = effective_eval_prompt(method, &finalized, progressive_prefix.as_ref());
    let test_accuracy =
        evaluate_accuracy(backbone, &eval_prompt, &dataset.test, dataset.num_classes)?;

    let result = TaskResult {
        task_id: dataset.task_id.clone(),
        step_losses,
        train_losses,
        val_losses,
        val_accuracies,
        best_epoch,
        test_accuracy,
        final_alpha,
        pool_task_ids: pool
            .entries()
            .iter()
            .map(|p| p.task_id().to_string())
            .collect(),
        alpha_profiles,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((finalized, result))
}

fn eval_prompt_for(
    method: Method,
    prompt: &Array2<f64>,
    pool: &PromptPool,
    epoch_alpha: &[f64],
    delta: f64,
    progressive_prefix: Option<&Array2<f64>>,
) -> Array2<f64> {
    if let Some(prefix) = progressive_prefix {
        return ndarray::concatenate(Axis(0), &[prefix.view(), prompt.view()])
            .expect("prefix and prompt share width");
    }
    if method.partitions_pool() && !pool.is_empty() && !method.zero_mixture() {
        let weights = partition(epoch_alpha, delta).mixture_weights;
        return finalize_prompt("eval", prompt, pool, &weights)
            .matrix()
            .clone();
    }
    prompt.clone()
}

fn effective_eval_prompt(
    method: Method,
    finalized: &Prompt,
    progressive_prefix: Option<&Array2<f64>>,
) -> Array2<f64> {
    match (method, progressive_prefix) {
        (Method::ProgressivePrompts, Some(prefix)) => {
            ndarray::concatenate(Axis(0), &[prefix.view(), finalized.matrix().view()])
                .expect("prefix and prompt share width")
        }
        _ => finalized.matrix().clone(),
    }
}

/// Prompt used to score task `index` of a sequence trained with `method`.
/// Progressive runs prepend every earlier stored prompt; everything else
/// uses the task's own finalized prompt.
pub fn stored_eval_prompt(method: Method, pool: &PromptPool, index: usize) -> Array2<f64> {
    let entries = pool.entries();
    if method == Method::ProgressivePrompts && index > 0 {
        let mut rows = entries[0].matrix().clone();
        for p in &entries[1..=index] {
            rows = ndarray::concatenate(Axis(0), &[rows.view(), p.matrix().view()])
                .expect("pool prompts share dimensions");
        }
        rows
    } else {
        entries[index].matrix().clone()
    }
}

/// Trains the whole sequence, scoring all seen tasks after each one.
/// `state` resumes from a task boundary; `checkpoint` runs after every
/// completed task with the updated state.
pub fn run_sequence(
    backbone: &Backbone,
    datasets: &[TaskDataset],
    config: &TrainConfig,
    seed: u64,
    state: Option<TrainerState>,
    mut checkpoint: Option<&mut dyn FnMut(&TrainerState) -> Result<()>>,
) -> Result<SequenceOutcome> {
    config.validate()?;
    backbone.verify_hash()?;
    let mut seen = std::collections::HashSet::new();
    for d in datasets {
        if !seen.insert(d.task_id.as_str()) {
            return Err(Error::DuplicateTask(d.task_id.clone()));
        }
    }

    let mut state = state.unwrap_or_default();
    let start = state.completed.len();
    if start > datasets.len() {
        return Err(Error::Config(format!(
            "resume state has {start} tasks but the sequence has {}",
            datasets.len()
        )));
    }
    for (done, dataset) in state.completed.iter().zip(datasets) {
        if done.task_id != dataset.task_id {
            return Err(Error::Config(format!(
                "resume mismatch: completed task {} vs configured {}",
                done.task_id, dataset.task_id
            )));
        }
    }

    for (t, dataset) in datasets.iter().enumerate().skip(start) {
        let inherited = if config.method == Method::ContinualInit && t > 0 {
            Some(state.pool.entries()[t - 1].matrix().clone())
        } else {
            None
        };
        let (finalized, result) = train_task(
            backbone,
            &state.pool,
            &mut state.estimator,
            dataset,
            config,
            seed,
            t,
            inherited.as_ref(),
        )?;
        state.pool.append_finalized(finalized)?;
        state.completed.push(result);

        let mut row = Vec::with_capacity(t + 1);
        for (j, past) in datasets.iter().enumerate().take(t + 1) {
            let prompt = stored_eval_prompt(config.method, &state.pool, j);
            row.push(evaluate_accuracy(
                backbone,
                &prompt,
                &past.test,
                past.num_classes,
            )?);
        }
        state.accuracy_matrix.push(row);

        if let Some(cb) = checkpoint.as_mut() {
            cb(&state)?;
        }
    }

    Ok(SequenceOutcome {
        method: config.method,
        seed,
        task_results: state.completed,
        accuracy_matrix: state.accuracy_matrix,
    })
}
