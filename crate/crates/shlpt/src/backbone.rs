//! Frozen toy encoder-decoder backbone.
//!
//! The model exposes exactly the probe points the transfer losses need: the
//! downstream negative log likelihood given a prompt-prefixed input, the
//! decoder's last hidden state at the first output position (`h`, the input
//! to the output projection), and the last feed-forward layer's activation
//! values at that position (`s`). Weights are content-hashed at freeze time
//! and re-verified on load; task training registers them as tape constants
//! so no gradient ever reaches them.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tape::{Tape, Var};
use crate::task_data::BOS_TOKEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Maximum total input rows (prompt + tokens) the model accepts.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    160
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            num_layers: 2,
            ffn_dim: 256,
            activation: Activation::Relu,
            seed: 0,
            max_len: 160,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument {
                    field: "backbone config",
                    reason: format!("{field} must be > 0"),
                });
            }
        }
        Ok(())
    }
}

/// Probes captured by a prompted forward pass.
#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub nll: f64,
    /// Decoder last hidden state at the first output position.
    pub h: Array1<f64>,
    /// Last FFN layer's activation values at the first output position.
    pub s: Array1<f64>,
}

/// Tape handles for the differentiable forward pass.
pub struct Forward {
    pub nll: Var,
    pub logits: Var,
    pub h: Var,
    pub s: Var,
}

#[derive(Debug, Clone)]
struct AttnBlock<T> {
    wq: T,
    wk: T,
    wv: T,
    wo: T,
    ln_g: T,
    ln_b: T,
}

#[derive(Debug, Clone)]
struct FfnBlock<T> {
    w1: T,
    w2: T,
    ln_g: T,
    ln_b: T,
}

#[derive(Debug, Clone)]
struct EncLayer<T> {
    attn: AttnBlock<T>,
    ffn: FfnBlock<T>,
}

#[derive(Debug, Clone)]
struct DecLayer<T> {
    self_attn: AttnBlock<T>,
    cross_attn: AttnBlock<T>,
    ffn: FfnBlock<T>,
}

#[derive(Debug, Clone)]
struct ParamsT<T> {
    embedding: T,
    pos: T,
    enc: Vec<EncLayer<T>>,
    dec: Vec<DecLayer<T>>,
    enc_ln_g: T,
    enc_ln_b: T,
    fin_g: T,
    fin_b: T,
    output: T,
}

type Params = ParamsT<Array2<f64>>;
type TapeParams = ParamsT<Var>;

impl<T> AttnBlock<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttnBlock<U> {
        AttnBlock {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            ln_g: f(&self.ln_g),
            ln_b: f(&self.ln_b),
        }
    }
}

impl<T> FfnBlock<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnBlock<U> {
        FfnBlock {
            w1: f(&self.w1),
            w2: f(&self.w2),
            ln_g: f(&self.ln_g),
            ln_b: f(&self.ln_b),
        }
    }
}

impl<T> ParamsT<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ParamsT<U> {
        ParamsT {
            embedding: f(&self.embedding),
            pos: f(&self.pos),
            enc: self
                .enc
                .iter()
                .map(|l| EncLayer {
                    attn: l.attn.map(f),
                    ffn: l.ffn.map(f),
                })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|l| DecLayer {
                    self_attn: l.self_attn.map(f),
                    cross_attn: l.cross_attn.map(f),
                    ffn: l.ffn.map(f),
                })
                .collect(),
            enc_ln_g: f(&self.enc_ln_g),
            enc_ln_b: f(&self.enc_ln_b),
            fin_g: f(&self.fin_g),
            fin_b: f(&self.fin_b),
            output: f(&self.output),
        }
    }

    /// Tensor references in the same order as [`ParamsT::map`].
    fn tensors(&self) -> Vec<&T> {
        let mut out: Vec<&T> = vec![&self.embedding, &self.pos];
        for l in &self.enc {
            out.extend([
                &l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo, &l.attn.ln_g, &l.attn.ln_b,
                &l.ffn.w1, &l.ffn.w2, &l.ffn.ln_g, &l.ffn.ln_b,
            ]);
        }
        for l in &self.dec {
            out.extend([
                &l.self_attn.wq, &l.self_attn.wk, &l.self_attn.wv, &l.self_attn.wo,
                &l.self_attn.ln_g, &l.self_attn.ln_b,
                &l.cross_attn.wq, &l.cross_attn.wk, &l.cross_attn.wv, &l.cross_attn.wo,
                &l.cross_attn.ln_g, &l.cross_attn.ln_b,
                &l.ffn.w1, &l.ffn.w2, &l.ffn.ln_g, &l.ffn.ln_b,
            ]);
        }
        out.extend([&self.enc_ln_g, &self.enc_ln_b, &self.fin_g, &self.fin_b, &self.output]);
        out
    }

    /// Mutable tensor references in the same order as [`ParamsT::map`].
    fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.embedding, &mut self.pos];
        for l in &mut self.enc {
            out.extend([
                &mut l.attn.wq,
                &mut l.attn.wk,
                &mut l.attn.wv,
                &mut l.attn.wo,
                &mut l.attn.ln_g,
                &mut l.attn.ln_b,
                &mut l.ffn.w1,
                &mut l.ffn.w2,
                &mut l.ffn.ln_g,
                &mut l.ffn.ln_b,
            ]);
        }
        for l in &mut self.dec {
            out.extend([
                &mut l.self_attn.wq,
                &mut l.self_attn.wk,
                &mut l.self_attn.wv,
                &mut l.self_attn.wo,
                &mut l.self_attn.ln_g,
                &mut l.self_attn.ln_b,
                &mut l.cross_attn.wq,
                &mut l.cross_attn.wk,
                &mut l.cross_attn.wv,
                &mut l.cross_attn.wo,
                &mut l.cross_attn.ln_g,
                &mut l.cross_attn.ln_b,
                &mut l.ffn.w1,
                &mut l.ffn.w2,
                &mut l.ffn.ln_g,
                &mut l.ffn.ln_b,
            ]);
        }
        out.extend([
            &mut self.enc_ln_g,
            &mut self.enc_ln_b,
            &mut self.fin_g,
            &mut self.fin_b,
            &mut self.output,
        ]);
        out
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    params: Params,
    weight_hash: String,
}

/// Pretraining hyperparameters for the toy backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 8,
            learning_rate: 3e-3,
            weight_decay: 0.01,
        }
    }
}

fn uniform_mat(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

impl Backbone {
    /// Untrained model. The output head starts at zero, so the untrained
    /// likelihood is exactly uniform over the vocabulary.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let attn = |rng: &mut ChaCha20Rng| AttnBlock {
            wq: uniform_mat(rng, d, d, scale),
            wk: uniform_mat(rng, d, d, scale),
            wv: uniform_mat(rng, d, d, scale),
            wo: uniform_mat(rng, d, d, scale),
            ln_g: Array2::ones((1, d)),
            ln_b: Array2::zeros((1, d)),
        };
        let ffn = |rng: &mut ChaCha20Rng| FfnBlock {
            w1: uniform_mat(rng, d, config.ffn_dim, scale),
            w2: uniform_mat(rng, config.ffn_dim, d, 1.0 / (config.ffn_dim as f64).sqrt()),
            ln_g: Array2::ones((1, d)),
            ln_b: Array2::zeros((1, d)),
        };
        let params = Params {
            embedding: uniform_mat(&mut rng, config.vocab_size, d, scale),
            pos: uniform_mat(&mut rng, config.max_len, d, scale),
            enc: (0..config.num_layers)
                .map(|_| EncLayer {
                    attn: attn(&mut rng),
                    ffn: ffn(&mut rng),
                })
                .collect(),
            dec: (0..config.num_layers)
                .map(|_| DecLayer {
                    self_attn: attn(&mut rng),
                    cross_attn: attn(&mut rng),
                    ffn: ffn(&mut rng),
                })
                .collect(),
            enc_ln_g: Array2::ones((1, d)),
            enc_ln_b: Array2::zeros((1, d)),
            fin_g: Array2::ones((1, d)),
            fin_b: Array2::zeros((1, d)),
            output: Array2::zeros((d, config.vocab_size)),
        };
        let weight_hash = hash_params(&config, &params);
        Ok(Self {
            config,
            params,
            weight_hash,
        })
    }

    /// Pretrains on a copy/denoise objective over the corpus, then freezes.
    /// Aborts with a diagnostic if the loss goes non-finite.
    pub fn pretrain(
        config: BackboneConfig,
        corpus: &[Vec<u32>],
        pretrain: &PretrainConfig,
    ) -> Result<(Self, Vec<f64>)> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument {
                field: "corpus",
                reason: "empty pretraining corpus".to_string(),
            });
        }
        let mut model = Self::init(config)?;
        let mut opt = AdamW::new(pretrain.learning_rate, pretrain.weight_decay);
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(model.config.seed ^ 0x707265);
        let mut epoch_losses = Vec::with_capacity(pretrain.epochs);
        for epoch in 0..pretrain.epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, shuffle_rng.gen_range(0..=i));
            }
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(pretrain.batch_size) {
                let mut tape = Tape::new();
                let tp = model.register(&mut tape, true);
                let mut batch_loss = None;
                let mut tokens_in_batch = 0usize;
                for &idx in chunk {
                    let seq = &corpus[idx];
                    let nll = model.sequence_nll(&mut tape, &tp, seq)?;
                    tokens_in_batch += seq.len();
                    batch_loss = Some(match batch_loss {
                        None => nll,
                        Some(acc) => tape.add(acc, nll),
                    });
                }
                let loss = tape.scale(batch_loss.unwrap(), 1.0 / tokens_in_batch as f64);
                let loss_val = tape.scalar(loss);
                if !loss_val.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite pretraining loss at epoch {epoch}"
                    )));
                }
                epoch_loss += loss_val * tokens_in_batch as f64;
                seen += tokens_in_batch;
                tape.backward(loss);
                let grads: Vec<Array2<f64>> =
                    tp.tensors().into_iter().map(|&v| tape.grad(v)).collect();
                let mut slots = model.params.tensors_mut();
                opt.step(&mut slots, &grads);
            }
            epoch_losses.push(epoch_loss / seen as f64);
        }
        model.weight_hash = hash_params(&model.config, &model.params);
        Ok((model, epoch_losses))
    }

    pub fn weight_hash(&self) -> &str {
        &self.weight_hash
    }

    /// Re-hashes the weights against the stored freeze-time hash.
    pub fn verify_hash(&self) -> Result<()> {
        let actual = hash_params(&self.config, &self.params);
        if actual != self.weight_hash {
            return Err(Error::HashMismatch {
                expected: self.weight_hash.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Token embeddings for an instance (no positional component).
    pub fn embed(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut out = Array2::zeros((tokens.len(), d));
        for (r, &t) in tokens.iter().enumerate() {
            out.row_mut(r).assign(&self.params.embedding.row(t as usize));
        }
        Ok(out)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument {
                field: "instance",
                reason: "empty token sequence".to_string(),
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument {
                field: "instance",
                reason: format!("token {t} >= vocab size {}", self.config.vocab_size),
            });
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> TapeParams {
        self.params.map(&mut |t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn activation(&self, tape: &mut Tape, x: Var) -> Var {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
        }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        x_q: Var,
        x_kv: Var,
        block: &AttnBlock<Var>,
        mask: Option<Array2<f64>>,
    ) -> Var {
        let d = self.config.d_model as f64;
        let q = tape.matmul(x_q, block.wq);
        let k = tape.matmul(x_kv, block.wk);
        let v = tape.matmul(x_kv, block.wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / d.sqrt());
        let attn = tape.row_softmax(scores, mask);
        let ctx = tape.matmul(attn, v);
        tape.matmul(ctx, block.wo)
    }

    fn encode(&self, tape: &mut Tape, tp: &TapeParams, input: Var) -> Var {
        let mut x = input;
        for layer in &tp.enc {
            let a = tape.layer_norm(x, layer.attn.ln_g, layer.attn.ln_b, LN_EPS);
            let attn = self.attention(tape, a, a, &layer.attn, None);
            x = tape.add(x, attn);
            let f = tape.layer_norm(x, layer.ffn.ln_g, layer.ffn.ln_b, LN_EPS);
            let hidden = tape.matmul(f, layer.ffn.w1);
            let hidden = self.activation(tape, hidden);
            let out = tape.matmul(hidden, layer.ffn.w2);
            x = tape.add(x, out);
        }
        tape.layer_norm(x, tp.enc_ln_g, tp.enc_ln_b, LN_EPS)
    }

    /// Decoder stack; returns (post-final-LN hidden states, last FFN
    /// activation values).
    fn decode(&self, tape: &mut Tape, tp: &TapeParams, dec_in: Var, enc_out: Var) -> (Var, Var) {
        let n = tape.value(dec_in).nrows();
        let mut causal = Array2::zeros((n, n));
        for r in 0..n {
            for c in r + 1..n {
                causal[[r, c]] = -1e30;
            }
        }
        let mut y = dec_in;
        let mut last_act = None;
        for layer in &tp.dec {
            let a = tape.layer_norm(y, layer.self_attn.ln_g, layer.self_attn.ln_b, LN_EPS);
            let self_attn = self.attention(tape, a, a, &layer.self_attn, Some(causal.clone()));
            y = tape.add(y, self_attn);
            let c = tape.layer_norm(y, layer.cross_attn.ln_g, layer.cross_attn.ln_b, LN_EPS);
            let cross = self.attention(tape, c, enc_out, &layer.cross_attn, None);
            y = tape.add(y, cross);
            let f = tape.layer_norm(y, layer.ffn.ln_g, layer.ffn.ln_b, LN_EPS);
            let hidden = tape.matmul(f, layer.ffn.w1);
            let act = self.activation(tape, hidden);
            let out = tape.matmul(act, layer.ffn.w2);
            y = tape.add(y, out);
            last_act = Some(act);
        }
        let h_all = tape.layer_norm(y, tp.fin_g, tp.fin_b, LN_EPS);
        (h_all, last_act.expect("num_layers > 0"))
    }

    /// Embeds decoder input `[BOS, targets[..n-1]]` and adds positions.
    fn decoder_input(&self, tape: &mut Tape, tp: &TapeParams, targets: &[u32]) -> Var {
        let mut ids: Vec<usize> = vec![BOS_TOKEN as usize];
        ids.extend(targets[..targets.len() - 1].iter().map(|&t| t as usize));
        let emb = tape.gather_rows(tp.embedding, ids);
        let pos = tape.slice_rows(tp.pos, 0, targets.len());
        tape.add(emb, pos)
    }

    /// Full differentiable forward. `prompt` rows (if any) are prepended to
    /// the encoder input in embedding space; gradients reach the backbone
    /// weights only when `tp` was registered trainable.
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        prompt: Option<Var>,
        tokens: &[u32],
        targets: &[u32],
    ) -> Result<Forward> {
        self.check_tokens(tokens)?;
        self.check_tokens(targets)?;
        let prompt_rows = prompt.map(|p| tape.value(p).nrows()).unwrap_or(0);
        if let Some(p) = prompt {
            if tape.value(p).ncols() != self.config.d_model {
                return Err(Error::DimensionMismatch(format!(
                    "prompt dim {} != d_model {}",
                    tape.value(p).ncols(),
                    self.config.d_model
                )));
            }
        }
        if prompt_rows + tokens.len() > self.config.max_len
            || targets.len() > self.config.max_len
        {
            return Err(Error::DimensionMismatch(format!(
                "input rows {} exceed positional capacity {}",
                prompt_rows + tokens.len(),
                self.config.max_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.gather_rows(tp.embedding, ids);
        let pos = tape.slice_rows(tp.pos, 0, tokens.len());
        let emb = tape.add(emb, pos);
        let enc_in = match prompt {
            Some(p) => tape.concat_rows(p, emb),
            None => emb,
        };
        let enc_out = self.encode(tape, tp, enc_in);
        let dec_in = self.decoder_input(tape, tp, targets);
        let (h_all, act_all) = self.decode(tape, tp, dec_in, enc_out);
        let logits = tape.matmul(h_all, tp.output);
        let nll = tape.cross_entropy_sum(logits, targets.iter().map(|&t| t as usize).collect());
        let h = tape.slice_rows(h_all, 0, 1);
        let s = tape.slice_rows(act_all, 0, 1);
        Ok(Forward { nll, logits, h, s })
    }

    fn sequence_nll(&self, tape: &mut Tape, tp: &TapeParams, seq: &[u32]) -> Result<Var> {
        Ok(self.forward_on_tape(tape, tp, None, seq, seq)?.nll)
    }

    /// Differentiable prompted forward against frozen weights; gradients
    /// flow to `prompt` (and anything it was built from) only.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        prompt: Var,
        tokens: &[u32],
        target: u32,
    ) -> Result<Forward> {
        if tape.value(prompt).nrows() == 0 {
            return Err(Error::InvalidArgument {
                field: "prompt",
                reason: "prompt length must be >= 1".to_string(),
            });
        }
        let tp = self.register(tape, false);
        self.forward_on_tape(tape, &tp, Some(prompt), tokens, &[target])
    }

    /// Evaluation forward: nll plus the h/s probes.
    pub fn forward_with_prompt(
        &self,
        prompt: &Array2<f64>,
        tokens: &[u32],
        target: u32,
    ) -> Result<ProbeOutput> {
        let (probe, _) = self.forward_debug(Some(prompt), tokens, target)?;
        Ok(probe)
    }

    /// Like [`Backbone::forward_with_prompt`] but also returns the logits at
    /// the first output position for oracle tests and debug dumps.
    pub fn forward_debug(
        &self,
        prompt: Option<&Array2<f64>>,
        tokens: &[u32],
        target: u32,
    ) -> Result<(ProbeOutput, Array1<f64>)> {
        let mut tape = Tape::new();
        let tp = self.register(&mut tape, false);
        let pvar = match prompt {
            Some(p) => {
                if p.nrows() == 0 {
                    None
                } else {
                    Some(tape.constant(p.clone()))
                }
            }
            None => None,
        };
        let fwd = self.forward_on_tape(&mut tape, &tp, pvar, tokens, &[target])?;
        let logits = tape.value(fwd.logits).row(0).to_owned();
        Ok((
            ProbeOutput {
                nll: tape.scalar(fwd.nll),
                h: tape.value(fwd.h).row(0).to_owned(),
                s: tape.value(fwd.s).row(0).to_owned(),
            },
            logits,
        ))
    }

    /// Activation values at the first output position with no prompt
    /// prepended (`s0`).
    pub fn baseline_activation(&self, tokens: &[u32]) -> Result<Array1<f64>> {
        let (probe, _) = self.forward_debug(None, tokens, BOS_TOKEN)?;
        Ok(probe.s)
    }

    /// Argmax class over the label-token logits at the first output
    /// position. Ties resolve to the lowest class index.
    pub fn predict(
        &self,
        prompt: &Array2<f64>,
        tokens: &[u32],
        num_classes: usize,
    ) -> Result<usize> {
        let (_, logits) = self.forward_debug(Some(prompt), tokens, BOS_TOKEN)?;
        let mut best = 0;
        for c in 1..num_classes {
            if logits[crate::task_data::label_token(c) as usize]
                > logits[crate::task_data::label_token(best) as usize]
            {
                best = c;
            }
        }
        Ok(best)
    }

    /// Mean per-token perplexity of the copy objective on a corpus.
    pub fn perplexity(&self, corpus: &[Vec<u32>]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for seq in corpus {
            let mut tape = Tape::new();
            let tp = self.register(&mut tape, false);
            let nll = self.sequence_nll(&mut tape, &tp, seq)?;
            total += tape.scalar(nll);
            tokens += seq.len();
        }
        Ok((total / tokens as f64).exp())
    }

    /// Writes a single binary checkpoint with an embedded JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.params.tensors();
        let header = serde_json::json!({
            "format": CHECKPOINT_MAGIC,
            "config": self.config,
            "weight_hash": self.weight_hash,
            "tensors": tensors.len(),
        });
        let header_bytes = serde_json::to_vec(&header)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for t in tensors {
            file.write_all(&(t.nrows() as u32).to_le_bytes())?;
            file.write_all(&(t.ncols() as u32).to_le_bytes())?;
            for &v in t.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a checkpoint and re-verifies the stored weight hash.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_buf = [0u8; 4];
        file.read_exact(&mut len_buf)?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len_buf) as usize];
        file.read_exact(&mut header_bytes)?;
        let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;
        if header["format"] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".to_string()));
        }
        let config: BackboneConfig = serde_json::from_value(header["config"].clone())?;
        let stored_hash = header["weight_hash"]
            .as_str()
            .ok_or_else(|| Error::CorruptCheckpoint("missing weight_hash".to_string()))?
            .to_string();
        let mut model = Self::init(config)?;
        let read_tensor = |file: &mut dyn Read| -> Result<Array2<f64>> {
            let mut dims = [0u8; 8];
            file.read_exact(&mut dims)?;
            let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
            let mut data = vec![0.0f64; rows * cols];
            for v in &mut data {
                let mut b = [0u8; 8];
                file.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))
        };
        for t in model.params.tensors_mut() {
            let loaded = read_tensor(&mut file)?;
            if loaded.dim() != t.dim() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor shape {:?} != expected {:?}",
                    loaded.dim(),
                    t.dim()
                )));
            }
            *t = loaded;
        }
        model.weight_hash = stored_hash;
        model.verify_hash()?;
        Ok(model)
    }

    /// Test-only hook: perturbs one weight so frozen-contract checks can see
    /// the hash fail.
    #[doc(hidden)]
    pub fn corrupt_for_test(&mut self) {
        self.params.embedding[[0, 0]] += 1.0;
    }
}

pub const LN_EPS: f64 = 1e-6;
const CHECKPOINT_MAGIC: &str = "shlpt-backbone-v1";

fn hash_params(config: &BackboneConfig, params: &Params) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    for t in params.tensors() {
        for &v in t.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Random token sequences over the full non-reserved vocabulary (label and
/// content ranges), for pretraining. Covering the label tokens matters: the
/// output head starts at zero, and a token that never appears as a target
/// would keep an output column identical to every other absent token's,
/// leaving its logit permanently tied and downstream classification stuck
/// at chance.
pub fn synthetic_corpus(vocab_size: usize, count: usize, seq_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..seq_len)
                .map(|_| rng.gen_range(crate::task_data::LABEL_BASE..vocab_size as u32))
                .collect()
        })
        .collect()
}
