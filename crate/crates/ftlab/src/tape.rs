//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every forward op appends a node holding its output value plus whatever
//! the backward pass needs. `backward` walks the tape in reverse and
//! accumulates gradients for every node reachable from the loss; parameters
//! are ordinary leaf nodes, so their gradients fall out of the same walk.

use crate::tensor::{bmm, bmm_tn, matmul_nn, matmul_nt, matmul_tn, softmax_rows, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    /// C (m×n) = A (m×k) · B (k×n)
    Matmul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    /// C[b] = scale · A[b] · op(B[b]) for every batch b.
    Bmm {
        a: VarId,
        b: VarId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
        scale: S,
    },
    Add { a: VarId, b: VarId },
    /// rows×cols plus a length-cols bias on every row.
    AddBias { a: VarId, bias: VarId, rows: usize, cols: usize },
    Relu { a: VarId },
    Gelu { a: VarId },
    /// Row softmax; the node value is the saved output.
    Softmax { a: VarId, rows: usize, cols: usize },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, rows: usize, cols: usize },
    /// Gather rows of `table` by id.
    Embed { table: VarId, ids: Vec<u32>, d: usize },
    /// (B·T, H·Dh) -> (B·H, T, Dh)
    SplitHeads { a: VarId, b: usize, t: usize, h: usize, dh: usize },
    /// (B·H, T, Dh) -> (B·T, H·Dh)
    MergeHeads { a: VarId, b: usize, t: usize, h: usize, dh: usize },
    /// Select rows of a 2D tensor.
    GatherRows { a: VarId, rows: Vec<u32>, cols: usize },
    /// Weighted mean cross-entropy over rows of logits.
    CrossEntropy {
        logits: VarId,
        rows: usize,
        cols: usize,
        targets: Vec<u32>,
        weights: Vec<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    /// Op-specific saved buffers (softmax probs for CE, mean/rstd for LN).
    aux: Vec<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, aux: Vec<S>) -> VarId {
        self.nodes.push(Node { value, op, aux });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> VarId {
        self.push(t, Op::Leaf, Vec::new())
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (m, k) = rows_cols(&self.nodes[a.0].value);
        let (k2, n) = rows_cols(&self.nodes[b.0].value);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut out.data,
            m,
            k,
            n,
        );
        self.push(out, Op::Matmul { a, b, m, k, n }, Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bmm_scaled(
        &mut self,
        a: VarId,
        b: VarId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
        scale: S,
    ) -> VarId {
        let mut out = Tensor::zeros(&[batch, m, n]);
        bmm(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut out.data,
            batch,
            m,
            k,
            n,
            transpose_b,
        );
        if scale.to_f64() != 1.0 {
            for v in &mut out.data {
                *v = *v * scale;
            }
        }
        self.push(
            out,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
                scale,
            },
            Vec::new(),
        )
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.nodes[a.0].value.shape, self.nodes[b.0].value.shape);
        let mut out = self.nodes[a.0].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o += v;
        }
        self.push(out, Op::Add { a, b }, Vec::new())
    }

    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> VarId {
        let (rows, cols) = rows_cols(&self.nodes[a.0].value);
        assert_eq!(self.nodes[bias.0].value.numel(), cols);
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let row = &mut out.data[r * cols..(r + 1) * cols];
            for (o, &bv) in row.iter_mut().zip(&self.nodes[bias.0].value.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { a, bias, rows, cols }, Vec::new())
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let mut out = self.nodes[a.0].value.clone();
        for v in &mut out.data {
            if *v < S::ZERO {
                *v = S::ZERO;
            }
        }
        self.push(out, Op::Relu { a }, Vec::new())
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let mut out = self.nodes[a.0].value.clone();
        for v in &mut out.data {
            *v = gelu_fwd(*v);
        }
        self.push(out, Op::Gelu { a }, Vec::new())
    }

    pub fn softmax(&mut self, a: VarId, rows: usize, cols: usize, causal_t: Option<usize>) -> VarId {
        let mut out = self.nodes[a.0].value.clone();
        softmax_rows(&mut out.data, rows, cols, causal_t);
        self.push(out, Op::Softmax { a, rows, cols }, Vec::new())
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let (rows, cols) = rows_cols(&self.nodes[x.0].value);
        let eps = S::from_f64(1e-5);
        let mut out = Tensor::zeros(&self.nodes[x.0].value.shape.clone());
        // aux layout: [mean; rstd], each `rows` long.
        let mut aux = vec![S::ZERO; 2 * rows];
        let xd = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let inv_n = S::from_f64(1.0 / cols as f64);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var = d.mul_add(d, var);
            }
            var = var * inv_n;
            let rstd = S::ONE / (var + eps).sqrt();
            aux[r] = mean;
            aux[rows + r] = rstd;
            let orow = &mut out.data[r * cols..(r + 1) * cols];
            for j in 0..cols {
                orow[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
            },
            aux,
        )
    }

    pub fn embed(&mut self, table: VarId, ids: &[u32]) -> VarId {
        let (vocab, d) = rows_cols(&self.nodes[table.0].value);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        let td = &self.nodes[table.0].value.data;
        for (r, &id) in ids.iter().enumerate() {
            assert!((id as usize) < vocab, "token id {id} out of vocab {vocab}");
            out.data[r * d..(r + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                d,
            },
            Vec::new(),
        )
    }

    pub fn split_heads(&mut self, a: VarId, b: usize, t: usize, h: usize, dh: usize) -> VarId {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.numel(), b * t * h * dh);
        let mut out = Tensor::zeros(&[b * h, t, dh]);
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let s = ((bi * t + ti) * h + hi) * dh;
                    let dst = ((bi * h + hi) * t + ti) * dh;
                    out.data[dst..dst + dh].copy_from_slice(&src.data[s..s + dh]);
                }
            }
        }
        self.push(out, Op::SplitHeads { a, b, t, h, dh }, Vec::new())
    }

    pub fn merge_heads(&mut self, a: VarId, b: usize, t: usize, h: usize, dh: usize) -> VarId {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.numel(), b * t * h * dh);
        let mut out = Tensor::zeros(&[b * t, h * dh]);
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let s = ((bi * h + hi) * t + ti) * dh;
                    let dst = ((bi * t + ti) * h + hi) * dh;
                    out.data[dst..dst + dh].copy_from_slice(&src.data[s..s + dh]);
                }
            }
        }
        self.push(out, Op::MergeHeads { a, b, t, h, dh }, Vec::new())
    }

    /// Select a subset of rows from a row-major 2D/3D tensor.
    pub fn gather_rows(&mut self, a: VarId, rows: &[u32]) -> VarId {
        let (n_rows, cols) = rows_cols(&self.nodes[a.0].value);
        let mut out = Tensor::zeros(&[rows.len(), cols]);
        let src = &self.nodes[a.0].value.data;
        for (r, &idx) in rows.iter().enumerate() {
            assert!((idx as usize) < n_rows, "gather row out of range");
            out.data[r * cols..(r + 1) * cols]
                .copy_from_slice(&src[idx as usize * cols..(idx as usize + 1) * cols]);
        }
        self.push(
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
                cols,
            },
            Vec::new(),
        )
    }

    /// Weighted mean cross-entropy: sum_r w_r * ce_r / sum_r w_r.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[u32], weights: &[S]) -> VarId {
        let (rows, cols) = rows_cols(&self.nodes[logits.0].value);
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let total_w: f64 = weights.iter().map(|w| w.to_f64()).sum();
        assert!(total_w > 0.0, "cross_entropy needs a non-empty mask");
        let mut probs = self.nodes[logits.0].value.data.clone();
        softmax_rows(&mut probs, rows, cols, None);
        let mut loss = 0.0f64;
        for r in 0..rows {
            let w = weights[r].to_f64();
            if w == 0.0 {
                continue;
            }
            let p = probs[r * cols + targets[r] as usize].to_f64();
            loss -= w * p.max(1e-300).ln();
        }
        let value = Tensor::from_vec(&[1], vec![S::from_f64(loss / total_w)]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                rows,
                cols,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            probs,
        )
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; nodes
    /// not reachable from the loss have `None`.
    pub fn backward(&self, loss: VarId) -> Grads<S> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(&[1], vec![S::ONE]));
        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor<S>>], id: VarId, contrib: Tensor<S>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data.iter_mut().zip(contrib.data) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let mut da = Tensor::zeros(&[m, k]);
                matmul_nt(&gout.data, bv, &mut da.data, m, n, k);
                Self::accumulate(grads, *a, da);
                let mut db = Tensor::zeros(&[k, n]);
                matmul_tn(av, &gout.data, &mut db.data, k, m, n);
                Self::accumulate(grads, *b, db);
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
                scale,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let mut g = gout.clone();
                if scale.to_f64() != 1.0 {
                    for v in &mut g.data {
                        *v = *v * *scale;
                    }
                }
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let mut da = Tensor::zeros(&[batch, m, k]);
                let mut db = Tensor::zeros(&self.nodes[b.0].value.shape.clone());
                if *transpose_b {
                    // C = A·Bᵀ with B (batch, n, k): dA = dC·B ; dB = dCᵀ·A
                    bmm(&g.data, bv, &mut da.data, batch, m, n, k, false);
                    bmm_tn(&g.data, av, &mut db.data, batch, n, m, k);
                } else {
                    // C = A·B with B (batch, k, n): dA = dC·Bᵀ ; dB = Aᵀ·dC
                    bmm(&g.data, bv, &mut da.data, batch, m, n, k, true);
                    bmm_tn(av, &g.data, &mut db.data, batch, k, m, n);
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, gout.clone());
                Self::accumulate(grads, *b, gout.clone());
            }
            Op::AddBias { a, bias, rows, cols } => {
                Self::accumulate(grads, *a, gout.clone());
                let mut db = Tensor::zeros(&[*cols]);
                for r in 0..*rows {
                    for j in 0..*cols {
                        db.data[j] += gout.data[r * cols + j];
                    }
                }
                Self::accumulate(grads, *bias, db);
            }
            Op::Relu { a } => {
                let out = &self.nodes[idx].value.data;
                let mut da = gout.clone();
                for (g, &o) in da.data.iter_mut().zip(out) {
                    if o <= S::ZERO {
                        *g = S::ZERO;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Gelu { a } => {
                let x = &self.nodes[a.0].value.data;
                let mut da = gout.clone();
                for (g, &xv) in da.data.iter_mut().zip(x) {
                    *g = *g * gelu_bwd(xv);
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Softmax { a, rows, cols } => {
                let p = &self.nodes[idx].value.data;
                let mut da = gout.clone();
                for r in 0..*rows {
                    let prow = &p[r * cols..(r + 1) * cols];
                    let grow = &mut da.data[r * cols..(r + 1) * cols];
                    let mut dot = S::ZERO;
                    for (g, &pv) in grow.iter().zip(prow) {
                        dot = (*g).mul_add(pv, dot);
                    }
                    for (g, &pv) in grow.iter_mut().zip(prow) {
                        *g = pv * (*g - dot);
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let aux = &self.nodes[idx].aux;
                let xd = &self.nodes[x.0].value.data;
                let g = &self.nodes[gamma.0].value.data;
                let mut dx = Tensor::zeros(&self.nodes[x.0].value.shape.clone());
                let mut dgamma = Tensor::zeros(&[cols]);
                let mut dbeta = Tensor::zeros(&[cols]);
                let inv_n = S::from_f64(1.0 / cols as f64);
                for r in 0..rows {
                    let mean = aux[r];
                    let rstd = aux[rows + r];
                    let xrow = &xd[r * cols..(r + 1) * cols];
                    let grow = &gout.data[r * cols..(r + 1) * cols];
                    // xhat and dy*gamma moments
                    let mut sum_dyg = S::ZERO;
                    let mut sum_dyg_xhat = S::ZERO;
                    for j in 0..cols {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dyg = grow[j] * g[j];
                        sum_dyg += dyg;
                        sum_dyg_xhat = dyg.mul_add(xhat, sum_dyg_xhat);
                        dgamma.data[j] = grow[j].mul_add(xhat, dgamma.data[j]);
                        dbeta.data[j] += grow[j];
                    }
                    let m1 = sum_dyg * inv_n;
                    let m2 = sum_dyg_xhat * inv_n;
                    let dxrow = &mut dx.data[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (xrow[j] - mean) * rstd;
                        dxrow[j] = rstd * (grow[j] * g[j] - m1 - xhat * m2);
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dgamma);
                Self::accumulate(grads, *beta, dbeta);
            }
            Op::Embed { table, ids, d } => {
                let shape = self.nodes[table.0].value.shape.clone();
                let mut dt = Tensor::zeros(&shape);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data[id as usize * d..(id as usize + 1) * d];
                    let src = &gout.data[r * d..(r + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *table, dt);
            }
            Op::SplitHeads { a, b, t, h, dh } => {
                let (b, t, h, dh) = (*b, *t, *h, *dh);
                let mut da = Tensor::zeros(&[b * t, h * dh]);
                for bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..h {
                            let dst = ((bi * t + ti) * h + hi) * dh;
                            let s = ((bi * h + hi) * t + ti) * dh;
                            da.data[dst..dst + dh].copy_from_slice(&gout.data[s..s + dh]);
                        }
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::MergeHeads { a, b, t, h, dh } => {
                let (b, t, h, dh) = (*b, *t, *h, *dh);
                let mut da = Tensor::zeros(&[b * h, t, dh]);
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..t {
                            let dst = ((bi * h + hi) * t + ti) * dh;
                            let s = ((bi * t + ti) * h + hi) * dh;
                            da.data[dst..dst + dh].copy_from_slice(&gout.data[s..s + dh]);
                        }
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::GatherRows { a, rows, cols } => {
                let shape = self.nodes[a.0].value.shape.clone();
                let mut da = Tensor::zeros(&shape);
                for (r, &idx) in rows.iter().enumerate() {
                    let dst = &mut da.data[idx as usize * cols..(idx as usize + 1) * cols];
                    let src = &gout.data[r * cols..(r + 1) * cols];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::CrossEntropy {
                logits,
                rows,
                cols,
                targets,
                weights,
            } => {
                let probs = &self.nodes[idx].aux;
                let upstream = gout.data[0];
                let total_w: f64 = weights.iter().map(|w| w.to_f64()).sum();
                let inv_w = S::from_f64(1.0 / total_w);
                let mut dl = Tensor::zeros(&[*rows, *cols]);
                for r in 0..*rows {
                    let w = weights[r];
                    if w.to_f64() == 0.0 {
                        continue;
                    }
                    let coeff = upstream * w * inv_w;
                    let prow = &probs[r * cols..(r + 1) * cols];
                    let drow = &mut dl.data[r * cols..(r + 1) * cols];
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = coeff * pv;
                    }
                    drow[targets[r] as usize] = drow[targets[r] as usize] - coeff;
                }
                Self::accumulate(grads, *logits, dl);
            }
        }
    }
}

pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn rows_cols<S>(t: &Tensor<S>) -> (usize, usize) {
    match t.shape.len() {
        1 => (1, t.shape[0]),
        2 => (t.shape[0], t.shape[1]),
        3 => (t.shape[0] * t.shape[1], t.shape[2]),
        _ => panic!("unsupported rank {}", t.shape.len()),
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}
