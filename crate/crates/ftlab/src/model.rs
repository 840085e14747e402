//! Transformer architectures, parameter state and batched forward passes.
//!
//! Two shapes are used throughout: the compiled shape (3 blocks, single
//! head, two-layer ReLU MLPs, no normalization, bidirectional attention)
//! and the GPT shape (multi-head, pre-layernorm, causal, GELU). A model is
//! a flat list of named parameter tensors; the forward pass loads them onto
//! an autodiff tape, so training, evaluation and probing all share one
//! implementation.

use crate::data::EncodedSample;
use crate::rng::{fnv1a, Rng};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    /// Output class count; equals `vocab_size` for language models, the
    /// answer-class count for compiled task models.
    pub n_outputs: usize,
    pub use_layernorm: bool,
    pub causal: bool,
    pub activation: Activation,
}

impl TransformerConfig {
    /// Compiled-model shape: 3 blocks, one head, no normalization.
    pub fn tracr_shape(
        d_model: usize,
        d_mlp: usize,
        context_len: usize,
        vocab_size: usize,
        n_outputs: usize,
    ) -> TransformerConfig {
        TransformerConfig {
            n_blocks: 3,
            n_heads: 1,
            d_model,
            d_mlp,
            context_len,
            vocab_size,
            n_outputs,
            use_layernorm: false,
            causal: false,
            activation: Activation::Relu,
        }
    }

    /// Full GPT shape used for grammar pretraining: 6 blocks, 6 heads,
    /// embedding dimension 192.
    pub fn gpt_shape(vocab_size: usize, context_len: usize) -> TransformerConfig {
        TransformerConfig {
            n_blocks: 6,
            n_heads: 6,
            d_model: 192,
            d_mlp: 768,
            context_len,
            vocab_size,
            n_outputs: vocab_size,
            use_layernorm: true,
            causal: true,
            activation: Activation::Gelu,
        }
    }

    /// Desk-scale GPT shape for fast experiment turnaround.
    pub fn tiny_shape(vocab_size: usize, context_len: usize) -> TransformerConfig {
        TransformerConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 64,
            d_mlp: 128,
            context_len,
            vocab_size,
            n_outputs: vocab_size,
            use_layernorm: true,
            causal: true,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_blocks == 0 || self.context_len == 0 || self.vocab_size == 0 {
            return Err("zero-sized model dimension".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical parameter names in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed.tok".to_string(), "embed.pos".to_string()];
        for b in 0..self.n_blocks {
            if self.use_layernorm {
                names.push(format!("blocks.{b}.ln1.g"));
                names.push(format!("blocks.{b}.ln1.b"));
            }
            for p in ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"] {
                names.push(format!("blocks.{b}.attn.{p}"));
            }
            if self.use_layernorm {
                names.push(format!("blocks.{b}.ln2.g"));
                names.push(format!("blocks.{b}.ln2.b"));
            }
            for p in ["w1", "b1", "w2", "b2"] {
                names.push(format!("blocks.{b}.mlp.{p}"));
            }
        }
        if self.use_layernorm {
            names.push("ln_f.g".to_string());
            names.push("ln_f.b".to_string());
        }
        names.push("unembed.w".to_string());
        names
    }

    pub fn param_shape(&self, name: &str) -> Vec<usize> {
        let d = self.d_model;
        match name {
            "embed.tok" => vec![self.vocab_size, d],
            "embed.pos" => vec![self.context_len, d],
            "unembed.w" => vec![d, self.n_outputs],
            _ => {
                let field = name.rsplit('.').next().unwrap();
                match field {
                    "g" | "b" if name.contains("ln") => vec![d],
                    "w_q" | "w_k" | "w_v" | "w_o" => vec![d, d],
                    "b_q" | "b_k" | "b_v" | "b_o" => vec![d],
                    "w1" => vec![d, self.d_mlp],
                    "b1" => vec![self.d_mlp],
                    "w2" => vec![self.d_mlp, d],
                    "b2" => vec![d],
                    _ => panic!("unknown param {name}"),
                }
            }
        }
    }
}

/// Optimizer state, persisted alongside parameters in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    None,
    AdamW {
        step: u64,
        m: Vec<Tensor<f32>>,
        v: Vec<Tensor<f32>>,
    },
    SgdMomentum {
        buf: Vec<Tensor<f32>>,
    },
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TransformerConfig,
    /// Parameters in `config.param_names()` order.
    pub params: Vec<Tensor<f32>>,
    pub opt_state: OptState,
    pub iteration: u64,
    pub provenance: String,
}

impl ModelState {
    pub fn new_random(config: TransformerConfig, seed: u64) -> ModelState {
        config.validate().expect("invalid config");
        let mut rng = Rng::new(seed);
        let params = config
            .param_names()
            .iter()
            .map(|name| {
                let shape = config.param_shape(name);
                let field = name.rsplit('.').next().unwrap();
                let is_ln_gain = name.contains("ln") && field == "g";
                let is_bias_like = shape.len() == 1;
                let mut t = Tensor::zeros(&shape);
                if is_ln_gain {
                    t.data.fill(1.0);
                } else if !is_bias_like {
                    for v in &mut t.data {
                        *v = (rng.next_gaussian() * 0.02) as f32;
                    }
                }
                t
            })
            .collect();
        ModelState {
            config,
            params,
            opt_state: OptState::None,
            iteration: 0,
            provenance: String::new(),
        }
    }

    pub fn param_index(&self, name: &str) -> usize {
        self.config
            .param_names()
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn param(&self, name: &str) -> &Tensor<f32> {
        &self.params[self.param_index(name)]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<f32> {
        let i = self.param_index(name);
        &mut self.params[i]
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    /// Bitwise fingerprint over all parameter values.
    pub fn param_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.n_params() * 4);
        for t in &self.params {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

/// Parameter tensors loaded onto a tape as leaves, index-aligned with
/// `config.param_names()`.
pub struct ParamVars {
    pub vars: Vec<VarId>,
    names: Vec<String>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> VarId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }
}

pub fn load_params<S: Scalar>(tape: &mut Tape<S>, state: &ModelState) -> ParamVars {
    let names = state.config.param_names();
    let vars = state
        .params
        .iter()
        .map(|t| tape.leaf(t.map_to::<S>()))
        .collect();
    ParamVars { vars, names }
}

/// Load an explicit parameter list (index-aligned with
/// `config.param_names()`) onto a tape; used by shadow-precision checks.
pub fn load_param_tensors<S: Scalar>(
    tape: &mut Tape<S>,
    config: &TransformerConfig,
    tensors: &[Tensor<S>],
) -> ParamVars {
    let names = config.param_names();
    assert_eq!(tensors.len(), names.len());
    let vars = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    ParamVars { vars, names }
}

/// Forward-pass handles: logits plus per-block residuals and attention
/// probabilities, all still on the tape.
pub struct ForwardOutput {
    pub logits: VarId,
    pub block_residuals: Vec<VarId>,
    pub attentions: Vec<VarId>,
    pub n: usize,
    pub t: usize,
}

/// Trunk of the decoder pass: embeddings through the final normalization,
/// without the unembedding.
struct TrunkOutput {
    final_x: VarId,
    block_residuals: Vec<VarId>,
    attentions: Vec<VarId>,
}

/// Standard decoder pass over a flat token matrix (`n` rows of length `t`).
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    config: &TransformerConfig,
    tokens: &[u16],
    n: usize,
    t: usize,
) -> ForwardOutput {
    let trunk = forward_trunk(tape, params, config, tokens, n, t);
    let logits = tape.matmul(trunk.final_x, params.get("unembed.w"));
    ForwardOutput {
        logits,
        block_residuals: trunk.block_residuals,
        attentions: trunk.attentions,
        n,
        t,
    }
}

/// Decoder pass that unembeds only the given flat row positions; used by
/// answer-position losses and evaluation, where computing logits at every
/// position would dominate the cost.
pub fn forward_readout<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    config: &TransformerConfig,
    tokens: &[u16],
    n: usize,
    t: usize,
    rows: &[u32],
) -> VarId {
    let trunk = forward_trunk(tape, params, config, tokens, n, t);
    let picked = tape.gather_rows(trunk.final_x, rows);
    tape.matmul(picked, params.get("unembed.w"))
}

fn forward_trunk<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    config: &TransformerConfig,
    tokens: &[u16],
    n: usize,
    t: usize,
) -> TrunkOutput {
    assert_eq!(tokens.len(), n * t);
    assert!(t <= config.context_len, "sequence longer than context");
    for &tok in tokens {
        assert!((tok as usize) < config.vocab_size, "token id out of vocab");
    }
    let ids: Vec<u32> = tokens.iter().map(|&v| v as u32).collect();
    let pos_ids: Vec<u32> = (0..n as u32)
        .flat_map(|_| (0..t as u32).collect::<Vec<_>>())
        .collect();
    let tok_emb = tape.embed(params.get("embed.tok"), &ids);
    let pos_emb = tape.embed(params.get("embed.pos"), &pos_ids);
    let mut x = tape.add(tok_emb, pos_emb);

    let h = config.n_heads;
    let dh = config.head_dim();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let causal_t = if config.causal { Some(t) } else { None };
    let mut block_residuals = Vec::with_capacity(config.n_blocks);
    let mut attentions = Vec::with_capacity(config.n_blocks);

    for b in 0..config.n_blocks {
        let pre_attn = if config.use_layernorm {
            tape.layer_norm(
                x,
                params.get(&format!("blocks.{b}.ln1.g")),
                params.get(&format!("blocks.{b}.ln1.b")),
            )
        } else {
            x
        };
        let q = {
            let mm = tape.matmul(pre_attn, params.get(&format!("blocks.{b}.attn.w_q")));
            tape.add_bias(mm, params.get(&format!("blocks.{b}.attn.b_q")))
        };
        let k = {
            let mm = tape.matmul(pre_attn, params.get(&format!("blocks.{b}.attn.w_k")));
            tape.add_bias(mm, params.get(&format!("blocks.{b}.attn.b_k")))
        };
        let v = {
            let mm = tape.matmul(pre_attn, params.get(&format!("blocks.{b}.attn.w_v")));
            tape.add_bias(mm, params.get(&format!("blocks.{b}.attn.b_v")))
        };
        let qh = tape.split_heads(q, n, t, h, dh);
        let kh = tape.split_heads(k, n, t, h, dh);
        let vh = tape.split_heads(v, n, t, h, dh);
        let scores = tape.bmm_scaled(qh, kh, n * h, t, dh, t, true, scale);
        let probs = tape.softmax(scores, n * h * t, t, causal_t);
        attentions.push(probs);
        let ctx = tape.bmm_scaled(probs, vh, n * h, t, t, dh, false, S::ONE);
        let merged = tape.merge_heads(ctx, n, t, h, dh);
        let attn_out = {
            let mm = tape.matmul(merged, params.get(&format!("blocks.{b}.attn.w_o")));
            tape.add_bias(mm, params.get(&format!("blocks.{b}.attn.b_o")))
        };
        x = tape.add(x, attn_out);

        let pre_mlp = if config.use_layernorm {
            tape.layer_norm(
                x,
                params.get(&format!("blocks.{b}.ln2.g")),
                params.get(&format!("blocks.{b}.ln2.b")),
            )
        } else {
            x
        };
        let h1 = {
            let mm = tape.matmul(pre_mlp, params.get(&format!("blocks.{b}.mlp.w1")));
            tape.add_bias(mm, params.get(&format!("blocks.{b}.mlp.b1")))
        };
        let act = match config.activation {
            Activation::Relu => tape.relu(h1),
            Activation::Gelu => tape.gelu(h1),
        };
        let h2 = {
            let mm = tape.matmul(act, params.get(&format!("blocks.{b}.mlp.w2")));
            tape.add_bias(mm, params.get(&format!("blocks.{b}.mlp.b2")))
        };
        x = tape.add(x, h2);
        block_residuals.push(x);
    }

    let final_x = if config.use_layernorm {
        tape.layer_norm(x, params.get("ln_f.g"), params.get("ln_f.b"))
    } else {
        x
    };
    TrunkOutput {
        final_x,
        block_residuals,
        attentions,
    }
}

/// Readout logits (one row of `n_outputs` per sample) without gradients.
pub fn readout_logits(state: &ModelState, batch: &Batch) -> Tensor<f32> {
    let mut tape: Tape<f32> = Tape::new();
    let params = load_params(&mut tape, state);
    let rows: Vec<u32> = batch.readout.iter().map(|&r| r as u32).collect();
    let logits = forward_readout(
        &mut tape,
        &params,
        &state.config,
        &batch.tokens,
        batch.n,
        batch.t,
        &rows,
    );
    tape.value(logits).clone()
}

/// Owned snapshot of a forward pass for analysis tooling.
pub struct ForwardTrace {
    pub logits: Tensor<f32>,
    /// Residual output of each block, (n·t, d_model).
    pub block_residuals: Vec<Tensor<f32>>,
    /// Attention probabilities per block, (n·heads, t, t).
    pub attentions: Vec<Tensor<f32>>,
    pub n: usize,
    pub t: usize,
}

/// Run the model without training: full trace when `capture` is set,
/// logits only otherwise.
pub fn forward_trace(state: &ModelState, tokens: &[u16], n: usize, t: usize, capture: bool) -> ForwardTrace {
    let mut tape: Tape<f32> = Tape::new();
    let params = load_params(&mut tape, state);
    let out = forward(&mut tape, &params, &state.config, tokens, n, t);
    ForwardTrace {
        logits: tape.value(out.logits).clone(),
        block_residuals: if capture {
            out.block_residuals
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect()
        } else {
            Vec::new()
        },
        attentions: if capture {
            out.attentions
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect()
        } else {
            Vec::new()
        },
        n,
        t,
    }
}

// ---------------------------------------------------------------------------
// Batches

/// A flat training/eval batch: `n` rows of `t` tokens with per-position
/// loss targets and weights, plus per-sample readout positions for accuracy.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<u16>,
    pub n: usize,
    pub t: usize,
    /// Per-position next-class targets (only meaningful where weight > 0).
    pub targets: Vec<u32>,
    /// Per-position loss weights; zero masks a position out.
    pub weights: Vec<f32>,
    /// Flat index of the position whose logits predict the answer.
    pub readout: Vec<usize>,
    /// Expected answer class per sample.
    pub answers: Vec<u32>,
}

impl Batch {
    /// Next-token objective: every position predicts its successor; PAD
    /// targets are masked out.
    pub fn next_token(samples: &[EncodedSample]) -> Batch {
        let t = samples[0].token_ids.len();
        let n = samples.len();
        let mut tokens = Vec::with_capacity(n * t);
        let mut targets = vec![0u32; n * t];
        let mut weights = vec![0f32; n * t];
        let mut readout = Vec::with_capacity(n);
        let mut answers = Vec::with_capacity(n);
        for (r, s) in samples.iter().enumerate() {
            assert_eq!(s.token_ids.len(), t, "ragged batch");
            tokens.extend_from_slice(&s.token_ids);
            for p in 0..t - 1 {
                let target = s.token_ids[p + 1];
                if target != crate::vocab::PAD {
                    targets[r * t + p] = target as u32;
                    weights[r * t + p] = 1.0;
                }
            }
            readout.push(r * t + s.answer_position as usize - 1);
            answers.push(s.token_ids[s.answer_position as usize] as u32);
        }
        Batch {
            tokens,
            n,
            t,
            targets,
            weights,
            readout,
            answers,
        }
    }

    /// Answer-only objective: loss solely at the position predicting the
    /// answer token.
    pub fn answer_only(samples: &[EncodedSample]) -> Batch {
        let mut b = Batch::next_token(samples);
        b.weights.fill(0.0);
        b.targets.fill(0);
        for (r, s) in samples.iter().enumerate() {
            let pos = r * b.t + s.answer_position as usize - 1;
            b.weights[pos] = 1.0;
            b.targets[pos] = s.token_ids[s.answer_position as usize] as u32;
        }
        b
    }

    /// Rows from two batches stacked; used by the data-mixing protocol.
    pub fn stack(a: Batch, b: Batch) -> Batch {
        assert_eq!(a.t, b.t);
        let t = a.t;
        let offset = a.n * t;
        let mut out = a;
        out.tokens.extend_from_slice(&b.tokens);
        out.targets.extend_from_slice(&b.targets);
        out.weights.extend_from_slice(&b.weights);
        out.readout.extend(b.readout.iter().map(|p| p + offset));
        out.answers.extend_from_slice(&b.answers);
        out.n += b.n;
        out
    }

    /// Compiled-task batch: `[BOS] ++ letters`, answer read at the fixed
    /// readout index, targets in output-class space.
    pub fn tracr(samples: &[crate::data::TracrSample], bos_id: u16, readout_index: usize) -> Batch {
        let len = samples[0].tokens.len();
        let t = len + 1;
        let n = samples.len();
        let mut tokens = Vec::with_capacity(n * t);
        let mut targets = vec![0u32; n * t];
        let mut weights = vec![0f32; n * t];
        let mut readout = Vec::with_capacity(n);
        let mut answers = Vec::with_capacity(n);
        for (r, s) in samples.iter().enumerate() {
            assert_eq!(s.tokens.len(), len, "ragged batch");
            tokens.push(bos_id);
            tokens.extend_from_slice(&s.tokens);
            targets[r * t + readout_index] = s.answer;
            weights[r * t + readout_index] = 1.0;
            readout.push(r * t + readout_index);
            answers.push(s.answer);
        }
        Batch {
            tokens,
            n,
            t,
            targets,
            weights,
            readout,
            answers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_shapes_consistent() {
        let cfg = TransformerConfig::tiny_shape(272, 92);
        let state = ModelState::new_random(cfg.clone(), 0);
        assert_eq!(state.params.len(), cfg.param_names().len());
        for (name, t) in cfg.param_names().iter().zip(&state.params) {
            assert_eq!(t.shape, cfg.param_shape(name), "shape of {name}");
        }
    }

    #[test]
    fn forward_on_pads_is_finite_and_stochastic() {
        let cfg = TransformerConfig::tiny_shape(64, 16);
        let state = ModelState::new_random(cfg, 1);
        let tokens = vec![0u16; 2 * 16];
        let trace = forward_trace(&state, &tokens, 2, 16, true);
        assert!(trace.logits.data.iter().all(|v| v.is_finite()));
        for attn in &trace.attentions {
            let t = 16;
            for row in 0..attn.numel() / t {
                let sum: f32 = attn.data[row * t..(row + 1) * t].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "attention row sum {sum}");
            }
        }
        assert_eq!(trace.block_residuals.len(), 2);
    }

    #[test]
    fn random_init_next_token_loss_near_ln_vocab() {
        let vocab = 64;
        let cfg = TransformerConfig::tiny_shape(vocab, 24);
        let state = ModelState::new_random(cfg.clone(), 2);
        let mut rng = Rng::new(3);
        let n = 8;
        let t = 24;
        let tokens: Vec<u16> = (0..n * t).map(|_| rng.below(vocab as u64) as u16).collect();
        let mut tape: Tape<f32> = Tape::new();
        let params = load_params(&mut tape, &state);
        let out = forward(&mut tape, &params, &cfg, &tokens, n, t);
        let targets: Vec<u32> = (0..n * t).map(|i| tokens[i] as u32).collect();
        let weights = vec![1.0f32; n * t];
        let loss = tape.cross_entropy(out.logits, &targets, &weights);
        let got = tape.value(loss).data[0] as f64;
        let expect = (vocab as f64).ln();
        assert!(
            (got - expect).abs() / expect < 0.05,
            "loss {got} vs ln(V) {expect}"
        );
    }

    #[test]
    fn causal_masking_blocks_future_influence() {
        let cfg = TransformerConfig::tiny_shape(32, 8);
        let state = ModelState::new_random(cfg, 7);
        let a = vec![1u16, 2, 3, 4, 5, 6, 7, 8];
        let mut b = a.clone();
        b[7] = 31; // change the last token
        let ta = forward_trace(&state, &a, 1, 8, false);
        let tb = forward_trace(&state, &b, 1, 8, false);
        let v = 32;
        // Positions before the change must be identical.
        for p in 0..7 {
            for j in 0..v {
                assert_eq!(ta.logits.data[p * v + j], tb.logits.data[p * v + j]);
            }
        }
        // The changed position must differ.
        let diff: f32 = (0..v)
            .map(|j| (ta.logits.data[7 * v + j] - tb.logits.data[7 * v + j]).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn batch_construction_masks_pads() {
        use crate::data::EncodedSample;
        let s = EncodedSample {
            token_ids: vec![1, 6, 13, 16, 2, 13, 14, 3, 4, 18, 0, 0, 1],
            answer_position: 9,
            answer_value: 2,
            is_correlated: false,
        };
        let b = Batch::next_token(std::slice::from_ref(&s));
        // Position 9 predicts token_ids[10] = PAD -> masked.
        assert_eq!(b.weights[9], 0.0);
        // Position 8 predicts the answer token 18.
        assert_eq!(b.weights[8], 1.0);
        assert_eq!(b.targets[8], 18);
        let ao = Batch::answer_only(std::slice::from_ref(&s));
        assert_eq!(ao.weights.iter().filter(|&&w| w > 0.0).count(), 1);
        assert_eq!(ao.targets[8], 18);
        assert_eq!(ao.readout[0], 8);
    }
}
