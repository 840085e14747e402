//! Mechanistic-analysis toolkit: accuracy evaluation, saliency pruning,
//! linear probes on the residual stream, attention dumps and prediction
//! histograms. Every analysis operates on a read-only model snapshot.

use crate::model::{forward_readout, forward_trace, load_params, Batch, ModelState};
use crate::optim::{ADAMW_BETA1, ADAMW_BETA2, ADAMW_EPS, ADAMW_WEIGHT_DECAY};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

const EVAL_CHUNK: usize = 200;

/// Argmax readout classes for a chunk of a batch.
fn chunk_predictions(model: &ModelState, batch: &Batch, start: usize, end: usize) -> Vec<u32> {
    let t = batch.t;
    let rows = end - start;
    let tokens = &batch.tokens[start * t..end * t];
    let readout: Vec<u32> = (0..rows)
        .map(|r| (r * t + (batch.readout[start + r] - (start + r) * t)) as u32)
        .collect();
    let mut tape: Tape<f32> = Tape::new();
    let params = load_params(&mut tape, model);
    let logits = forward_readout(&mut tape, &params, &model.config, tokens, rows, t, &readout);
    let v = model.config.n_outputs;
    let data = &tape.value(logits).data;
    (0..rows)
        .map(|r| {
            let row = &data[r * v..(r + 1) * v];
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Fraction of samples whose argmax prediction at the answer position
/// equals the stored answer, as a percentage.
pub fn evaluate(model: &ModelState, batch: &Batch) -> f64 {
    assert!(batch.n > 0, "empty eval set");
    let mut correct = 0usize;
    let mut start = 0;
    while start < batch.n {
        let end = (start + EVAL_CHUNK).min(batch.n);
        for (r, pred) in chunk_predictions(model, batch, start, end).into_iter().enumerate() {
            if pred == batch.answers[start + r] {
                correct += 1;
            }
        }
        start = end;
    }
    100.0 * correct as f64 / batch.n as f64
}

/// Reference implementation: one sample per forward pass. Used to
/// cross-check the batched path.
pub fn evaluate_naive(model: &ModelState, batch: &Batch) -> f64 {
    let mut correct = 0usize;
    let t = batch.t;
    let v = model.config.n_outputs;
    for r in 0..batch.n {
        let tokens = &batch.tokens[r * t..(r + 1) * t];
        let trace = forward_trace(model, tokens, 1, t, false);
        let pos = batch.readout[r] - r * t;
        let row = &trace.logits.data[pos * v..(pos + 1) * v];
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        if best as u32 == batch.answers[r] {
            correct += 1;
        }
    }
    100.0 * correct as f64 / batch.n as f64
}

/// Histogram of argmax predictions per output class.
pub fn prediction_histogram(model: &ModelState, batch: &Batch) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    let mut start = 0;
    while start < batch.n {
        let end = (start + EVAL_CHUNK).min(batch.n);
        for pred in chunk_predictions(model, batch, start, end) {
            *hist.entry(pred).or_insert(0) += 1;
        }
        start = end;
    }
    hist
}

// ---------------------------------------------------------------------------
// Saliency pruning

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Individual entries of weight matrices.
    Weight,
    /// Whole rows of weight matrices.
    Neuron,
}

/// One pruned unit: parameter name plus the flat entry index (weight
/// granularity) or row index (neuron granularity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunedUnit {
    pub param: String,
    pub index: usize,
    pub score: OrderedScore,
}

/// Score wrapper keeping the sort total and reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderedScore(pub f64);
impl Eq for OrderedScore {}

#[derive(Debug, Clone)]
pub struct PruneMask {
    pub granularity: Granularity,
    pub k: usize,
    pub units: Vec<PrunedUnit>,
}

/// Weight matrices eligible for pruning: every 2D parameter matrix except
/// the token/position embedding tables (biases are never pruned).
fn prunable(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && !name.starts_with("embed.")
}

/// Single gradient computation for Alg-style saliency: run the loss over
/// one large batch labeled for the capability being revived and return
/// per-parameter gradients.
fn saliency_grads(model: &ModelState, batch: &Batch) -> Vec<Option<Tensor<f32>>> {
    let mut tape: Tape<f32> = Tape::new();
    let params = load_params(&mut tape, model);
    let rows: Vec<u32> = batch.readout.iter().map(|&r| r as u32).collect();
    let logits = forward_readout(
        &mut tape,
        &params,
        &model.config,
        &batch.tokens,
        batch.n,
        batch.t,
        &rows,
    );
    let weights = vec![1.0f32; batch.n];
    let loss = tape.cross_entropy(logits, &batch.answers, &weights);
    let grads = tape.backward(loss);
    params
        .vars
        .iter()
        .map(|&v| grads.get(v).cloned())
        .collect()
}

/// Zero the top-K units ranked by gradient-times-weight. The input model is
/// untouched; ties break toward the lower parameter/flat index so prune
/// sets are reproducible.
pub fn saliency_prune(
    model: &ModelState,
    data: &Batch,
    k: usize,
    granularity: Granularity,
) -> (ModelState, PruneMask) {
    let grads = saliency_grads(model, data);
    let names = model.config.param_names();
    let mut scored: Vec<(f64, usize, usize)> = Vec::new(); // (score, param, index)
    for (pi, name) in names.iter().enumerate() {
        let p = &model.params[pi];
        if !prunable(name, &p.shape) {
            continue;
        }
        let Some(g) = &grads[pi] else { continue };
        match granularity {
            Granularity::Weight => {
                for (j, (&w, &gv)) in p.data.iter().zip(&g.data).enumerate() {
                    scored.push(((gv as f64) * (w as f64), pi, j));
                }
            }
            Granularity::Neuron => {
                let cols = p.shape[1];
                for row in 0..p.shape[0] {
                    let mut s = 0.0f64;
                    for j in 0..cols {
                        s += (g.data[row * cols + j] as f64) * (p.data[row * cols + j] as f64);
                    }
                    scored.push((s, pi, row));
                }
            }
        }
    }
    let total = scored.len();
    assert!(k <= total, "K={k} exceeds {total} prunable units");
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pruned = model.clone();
    let mut units = Vec::with_capacity(k);
    for &(score, pi, index) in scored.iter().take(k) {
        let p = &mut pruned.params[pi];
        match granularity {
            Granularity::Weight => p.data[index] = 0.0,
            Granularity::Neuron => {
                let cols = p.shape[1];
                for j in 0..cols {
                    p.data[index * cols + j] = 0.0;
                }
            }
        }
        units.push(PrunedUnit {
            param: names[pi].clone(),
            index,
            score: OrderedScore(score),
        });
    }
    pruned.provenance = format!(
        "{} pruned k={k} granularity={granularity:?}",
        model.provenance
    );
    (
        pruned,
        PruneMask {
            granularity,
            k,
            units,
        },
    )
}

/// Prune-accuracy curve: each K prunes the original model independently
/// and reports accuracy on the pretraining- and fine-tuning-task sets.
pub fn prune_curve(
    model: &ModelState,
    data: &Batch,
    ks: &[usize],
    granularity: Granularity,
    pt_eval: &Batch,
    ft_eval: &Batch,
) -> Vec<(usize, f64, f64)> {
    ks.iter()
        .map(|&k| {
            if k == 0 {
                (0, evaluate(model, pt_eval), evaluate(model, ft_eval))
            } else {
                let (pruned, _) = saliency_prune(model, data, k, granularity);
                (k, evaluate(&pruned, pt_eval), evaluate(&pruned, ft_eval))
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Linear probes

#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// Held-out accuracy (percent) per block, index 0 = first block.
    pub block_accuracies: Vec<f64>,
    pub chance: f64,
    pub provenance: String,
}

pub const PROBE_ITERS: u64 = 4000;
pub const PROBE_BASE_LR: f64 = 1e-3;
const PROBE_BATCH: usize = 256;

fn probe_lr(iter: u64) -> f64 {
    // Step decay by 10 at 2K, 3K and 3.5K iterations.
    let mut lr = PROBE_BASE_LR;
    for &boundary in &[2000u64, 3000, 3500] {
        if iter >= boundary {
            lr /= 10.0;
        }
    }
    lr
}

/// Residual features at the answer-predicting position for every sample.
/// Returns one feature matrix per block.
pub fn residual_features(model: &ModelState, batch: &Batch) -> Vec<Vec<f32>> {
    let d = model.config.d_model;
    let n_blocks = model.config.n_blocks;
    let mut feats = vec![vec![0f32; batch.n * d]; n_blocks];
    let per_row = batch.t;
    let mut start = 0;
    while start < batch.n {
        let end = (start + EVAL_CHUNK).min(batch.n);
        let rows = end - start;
        let tokens = &batch.tokens[start * per_row..end * per_row];
        let trace = forward_trace(model, tokens, rows, per_row, true);
        for (b, res) in trace.block_residuals.iter().enumerate() {
            for r in 0..rows {
                let pos = batch.readout[start + r] - (start + r) * per_row;
                let src = &res.data[(r * per_row + pos) * d..(r * per_row + pos + 1) * d];
                feats[b][(start + r) * d..(start + r + 1) * d].copy_from_slice(src);
            }
        }
        start = end;
    }
    feats
}

/// Train a linear readout from one block's residual to the label classes;
/// returns held-out accuracy. The transformer itself is never updated.
pub fn train_probe(
    features: &[f32],
    labels: &[u32],
    d: usize,
    n_classes: usize,
    seed: u64,
) -> f64 {
    let n = labels.len();
    assert_eq!(features.len(), n * d);
    assert!(n >= 10, "probe needs data");
    let n_train = (n * 4) / 5;
    let n_test = n - n_train;
    let distinct: std::collections::BTreeSet<u32> = labels[..n_train].iter().copied().collect();
    assert!(distinct.len() > 1, "degenerate single-class probe data");

    let mut w = vec![0f32; d * n_classes];
    let mut b = vec![0f32; n_classes];
    let mut mw = vec![0f32; d * n_classes];
    let mut vw = vec![0f32; d * n_classes];
    let mut mb = vec![0f32; n_classes];
    let mut vb = vec![0f32; n_classes];
    let mut rng = Rng::new(seed);
    let mut logits = vec![0f32; PROBE_BATCH * n_classes];

    for iter in 0..PROBE_ITERS {
        let lr = probe_lr(iter);
        // Deterministic minibatch of training rows.
        let rows: Vec<usize> = (0..PROBE_BATCH).map(|_| rng.usize_below(n_train)).collect();
        // logits = X W + b
        for (bi, &r) in rows.iter().enumerate() {
            let x = &features[r * d..(r + 1) * d];
            let lrow = &mut logits[bi * n_classes..(bi + 1) * n_classes];
            lrow.copy_from_slice(&b);
            for (i, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    let wrow = &w[i * n_classes..(i + 1) * n_classes];
                    for (l, &wv) in lrow.iter_mut().zip(wrow) {
                        *l += xv * wv;
                    }
                }
            }
        }
        crate::tensor::softmax_rows(&mut logits, PROBE_BATCH, n_classes, None);
        // dlogits = (p - y)/B
        for (bi, &r) in rows.iter().enumerate() {
            logits[bi * n_classes + labels[r] as usize] -= 1.0;
        }
        let inv_b = 1.0 / PROBE_BATCH as f32;
        // AdamW update over W and b with gradients X^T dlogits.
        let step = iter + 1;
        let bc1 = 1.0 - (ADAMW_BETA1 as f32).powi(step as i32);
        let bc2 = 1.0 - (ADAMW_BETA2 as f32).powi(step as i32);
        let mut gw = vec![0f32; d * n_classes];
        let mut gb = vec![0f32; n_classes];
        for (bi, &r) in rows.iter().enumerate() {
            let x = &features[r * d..(r + 1) * d];
            let lrow = &logits[bi * n_classes..(bi + 1) * n_classes];
            for (i, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    let grow = &mut gw[i * n_classes..(i + 1) * n_classes];
                    for (g, &l) in grow.iter_mut().zip(lrow) {
                        *g += xv * l * inv_b;
                    }
                }
            }
            for (g, &l) in gb.iter_mut().zip(lrow) {
                *g += l * inv_b;
            }
        }
        for i in 0..w.len() {
            let g = gw[i];
            mw[i] = ADAMW_BETA1 as f32 * mw[i] + (1.0 - ADAMW_BETA1 as f32) * g;
            vw[i] = ADAMW_BETA2 as f32 * vw[i] + (1.0 - ADAMW_BETA2 as f32) * g * g;
            let mhat = mw[i] / bc1;
            let vhat = vw[i] / bc2;
            w[i] -= lr as f32
                * (mhat / (vhat.sqrt() + ADAMW_EPS as f32) + ADAMW_WEIGHT_DECAY as f32 * w[i]);
        }
        for i in 0..b.len() {
            let g = gb[i];
            mb[i] = ADAMW_BETA1 as f32 * mb[i] + (1.0 - ADAMW_BETA1 as f32) * g;
            vb[i] = ADAMW_BETA2 as f32 * vb[i] + (1.0 - ADAMW_BETA2 as f32) * g * g;
            let mhat = mb[i] / bc1;
            let vhat = vb[i] / bc2;
            b[i] -= lr as f32 * (mhat / (vhat.sqrt() + ADAMW_EPS as f32));
        }
    }

    // Held-out accuracy.
    let mut correct = 0usize;
    for r in n_train..n {
        let x = &features[r * d..(r + 1) * d];
        let mut lrow = b.clone();
        for (i, &xv) in x.iter().enumerate() {
            if xv != 0.0 {
                let wrow = &w[i * n_classes..(i + 1) * n_classes];
                for (l, &wv) in lrow.iter_mut().zip(wrow) {
                    *l += xv * wv;
                }
            }
        }
        let mut best = 0usize;
        for (j, &l) in lrow.iter().enumerate() {
            if l > lrow[best] {
                best = j;
            }
        }
        if best as u32 == labels[r] {
            correct += 1;
        }
    }
    100.0 * correct as f64 / n_test as f64
}

/// Chance level: the held-out frequency of the most common label.
pub fn chance_level(labels: &[u32]) -> f64 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    100.0 * counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

/// Probe every block for a target quantity. `labels` are output classes at
/// the answer-predicting position for the probe task. Model parameters are
/// asserted unchanged.
pub fn probe_sweep(model: &ModelState, batch: &Batch, labels: &[u32], seed: u64) -> ProbeReport {
    let before = model.param_hash();
    let feats = residual_features(model, batch);
    let d = model.config.d_model;
    let n_classes = model.config.n_outputs;
    let block_accuracies: Vec<f64> = feats
        .iter()
        .enumerate()
        .map(|(b, f)| train_probe(f, labels, d, n_classes, seed ^ (b as u64 + 1)))
        .collect();
    assert_eq!(model.param_hash(), before, "probe modified the model");
    ProbeReport {
        block_accuracies,
        chance: chance_level(labels),
        provenance: format!("probe seed={seed} n={}", labels.len()),
    }
}

// ---------------------------------------------------------------------------
// Attention dumps

#[derive(Debug, Clone)]
pub struct AttentionDump {
    /// One matrix per (block, head), each t x t row-stochastic.
    pub matrices: Vec<Tensor<f32>>,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub t: usize,
    pub token_labels: Vec<String>,
}

pub fn attention_dump(model: &ModelState, tokens: &[u16], labels: Vec<String>) -> AttentionDump {
    let t = tokens.len();
    assert_eq!(labels.len(), t);
    let trace = forward_trace(model, tokens, 1, t, true);
    let h = model.config.n_heads;
    let mut matrices = Vec::with_capacity(model.config.n_blocks * h);
    for block in &trace.attentions {
        for head in 0..h {
            let mut m = Tensor::zeros(&[t, t]);
            m.data
                .copy_from_slice(&block.data[head * t * t..(head + 1) * t * t]);
            matrices.push(m);
        }
    }
    AttentionDump {
        matrices,
        n_blocks: model.config.n_blocks,
        n_heads: h,
        t,
        token_labels: labels,
    }
}

impl AttentionDump {
    pub fn matrix(&self, block: usize, head: usize) -> &Tensor<f32> {
        &self.matrices[block * self.n_heads + head]
    }

    /// Attention mass each row places on key positions whose label equals
    /// `target`.
    pub fn target_mass(&self, block: usize, head: usize, target: &str) -> Vec<f64> {
        let m = self.matrix(block, head);
        (0..self.t)
            .map(|q| {
                (0..self.t)
                    .filter(|&k| self.token_labels[k] == target)
                    .map(|k| m.data[q * self.t + k] as f64)
                    .sum()
            })
            .collect()
    }

    /// Mean over rows of `target_mass`.
    pub fn mean_target_mass(&self, block: usize, head: usize, target: &str) -> f64 {
        let per_row = self.target_mass(block, head, target);
        per_row.iter().sum::<f64>() / per_row.len() as f64
    }

    pub fn to_csv(&self, block: usize, head: usize) -> String {
        let m = self.matrix(block, head);
        let mut s = String::new();
        s.push_str("query\\key");
        for l in &self.token_labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for q in 0..self.t {
            s.push_str(&self.token_labels[q]);
            for k in 0..self.t {
                s.push_str(&format!(",{:.6}", m.data[q * self.t + k]));
            }
            s.push('\n');
        }
        s
    }

    /// Portable grayscale (PGM P2) rendering; the CSV stays canonical.
    pub fn to_pgm(&self, block: usize, head: usize) -> String {
        let m = self.matrix(block, head);
        let mut s = format!("P2\n{} {}\n255\n", self.t, self.t);
        for q in 0..self.t {
            for k in 0..self.t {
                let v = (m.data[q * self.t + k].clamp(0.0, 1.0) * 255.0).round() as u32;
                s.push_str(&v.to_string());
                s.push(if k + 1 == self.t { '\n' } else { ' ' });
            }
        }
        s
    }
}
