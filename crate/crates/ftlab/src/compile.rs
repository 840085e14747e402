//! Compilation of mini-RASP programs into exact transformer weights.
//!
//! The compiled model prepends a beginning-of-sequence token; real token
//! positions carry their program index shifted by one, and the program
//! answer is read at model position [`TRACR_READOUT`]. Selectors become
//! single attention heads whose logits are `SHARPNESS * match + default`,
//! with the BOS key acting as the default sink: selector-width heads always
//! co-attend BOS with full weight so the BOS attention mass equals
//! `1/(width+1)`, which a piecewise-linear MLP inverts exactly at every
//! attainable width. Aggregates give BOS a half-strength default so an
//! empty selection reads out zeros.
//!
//! The contract is output exactness: for every in-domain input the readout
//! class equals the reference interpreter's answer. Residual values at
//! other positions may differ where a selector was broadcast (see
//! `SelectorPlan::Broadcast`), which also reproduces the fully-concentrated
//! attention maps the counting head is known for.

use crate::model::{ModelState, OptState, TransformerConfig};
use crate::rasp::{Comparison, MapFn, RaspExpr};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt;

/// Model position carrying the answer (BOS occupies position 0, so this is
/// program index 1).
pub const TRACR_READOUT: usize = 2;

/// Attention logit scale for selected keys. Large enough that unselected
/// keys are numerically invisible, small enough that the weight noise used
/// to densify models cannot perturb the selected-key mix meaningfully.
const SHARPNESS: f64 = 6.0;

/// Logit scale of the answer classes at the unembedding.
const READOUT_SCALE: f64 = 2.0;

/// A numerical root value is spread over this many redundant residual
/// dimensions so no single structural weight carries the whole readout.
const NUM_SPLIT: usize = 8;

/// Constant written onto the boost dimension by the readout block's MLP
/// bias; the inert output head reads it, giving fine-tuning one
/// high-sensitivity global offset path. Created after the width head runs
/// so its magnitude never couples into attention-value noise.
const BOOST: f64 = 8.0;

/// First attention value channel used for payload routing.
const MATCH_CHANNELS: usize = 1;

/// Gain on the width head's raw BOS-mass channels. Larger gain flattens the
/// inversion slopes, which both shrinks the noise amplification onto the
/// readout and keeps gradients through the width path moderate.
const RAW_SCALE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingKind {
    /// One dimension per class.
    OneHot,
    /// Single 0/1 dimension (class-1 flag of a binary value).
    Flag,
    /// Scalar dimension(s); a split numerical value sums over its slice.
    Numerical,
}

#[derive(Debug, Clone)]
pub struct LayoutEntry {
    pub name: String,
    pub slice: Slice,
    pub kind: EncodingKind,
}

/// Residual-stream map: disjoint named slices covering every intermediate
/// value the compiled program materializes.
#[derive(Debug, Clone, Default)]
pub struct ResidualLayout {
    pub entries: Vec<LayoutEntry>,
    pub width: usize,
}

impl ResidualLayout {
    fn alloc(&mut self, name: &str, len: usize, kind: EncodingKind) -> Slice {
        let slice = Slice {
            start: self.width,
            len,
        };
        self.width += len;
        self.entries.push(LayoutEntry {
            name: name.to_string(),
            slice,
            kind,
        });
        slice
    }

    pub fn find(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompileError {
    Unsupported { node: &'static str, reason: String },
    DepthExceeded { needed: usize, blocks: usize },
    BadInput(String),
}

impl fmt::Display for CompileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompileError::Unsupported { node, reason } => {
                write!(f, "cannot compile node '{node}': {reason}")
            }
            CompileError::DepthExceeded { needed, blocks } => {
                write!(f, "program needs {needed} blocks but the target has {blocks}")
            }
            CompileError::BadInput(s) => write!(f, "{s}"),
        }
    }
}

impl std::error::Error for CompileError {}

/// How a selector's match term is wired into attention logits: a list of
/// (key dim, query dim) products, each worth one full match.
#[derive(Debug, Clone)]
struct SelectorPlan {
    /// (key dim, query dim) products; a pair whose query side is the
    /// constant dimension broadcasts the match over every row, which is
    /// sound when downstream consumption is positional and only the
    /// readout position is contract-relevant.
    pairs: Vec<(usize, usize)>,
    /// Expected selection width; centers the inversion table's margins.
    pivot_width: usize,
}

#[derive(Debug, Clone)]
enum Step {
    /// MLP: flag = relu(sum of listed one-hot dims), written to dst.
    FlagFromDims { src_dims: Vec<usize>, dst: usize },
    /// MLP: exact 0/1 tent over an integer-valued scalar dim, gated to
    /// stay zero at BOS.
    NumEqFlag { src: usize, value: i64, dst: usize },
    /// Attention head computing selector width: each of the `out.len`
    /// value channels reads the BOS mass 1/(w+1) into its own `raw`
    /// dimension, and an exact inversion MLP per channel writes w/len into
    /// `out`. Splitting the readout keeps any single weight's noise
    /// contribution small.
    Width {
        sel: SelectorPlan,
        raw: Slice,
        out: Slice,
        max_width: usize,
    },
    /// Attention head averaging `values` over the selection into `dst`.
    Aggregate {
        sel: SelectorPlan,
        values: Slice,
        dst: Slice,
    },
}

impl Step {
    fn is_attention(&self) -> bool {
        matches!(self, Step::Width { .. } | Step::Aggregate { .. })
    }
}

#[derive(Debug, Clone)]
enum Readout {
    /// Nearest-integer classes over a (possibly split) scalar: the last
    /// block's MLP computes |count - v| per class into `absdiff`, and the
    /// unembedding reads it with weight -s, so argmax is the nearest
    /// integer and no logit depends on the scalar with more than slope s.
    NumericalClasses {
        slice: Slice,
        absdiff: Slice,
        n_classes: usize,
    },
    /// Diagonal readout of a one-hot slice.
    Categorical { slice: Slice },
    /// Fixed class from the constant dimension.
    Constant { value: u16 },
}

/// A compiled program: exact weights in the standard parameter layout plus
/// the residual map and readout metadata.
#[derive(Debug, Clone)]
pub struct CompiledTransformer {
    pub model: ModelState,
    pub layout: ResidualLayout,
    pub alphabet: usize,
    pub max_len: usize,
    pub bos_id: u16,
    /// Model position whose logits carry the answer.
    pub readout_pos: usize,
    pub program: RaspExpr,
}

struct Compiler {
    alphabet: usize,
    max_len: usize,
    layout: ResidualLayout,
    steps: Vec<Step>,
    const_dim: usize,
    bos_dim: usize,
    token_dims: Slice,
    node_counter: usize,
}

/// The lowered encoding of one expression value.
#[derive(Debug, Clone)]
struct Lowered {
    slice: Slice,
    kind: EncodingKind,
    /// Index of the producing step, if any (embedding values have none).
    produced_by: Option<usize>,
}

impl Compiler {
    fn fresh(&mut self, prefix: &str) -> String {
        self.node_counter += 1;
        format!("{prefix}.{}", self.node_counter)
    }

    fn lower(&mut self, expr: &RaspExpr) -> Result<Lowered, CompileError> {
        match expr {
            RaspExpr::Tokens => Ok(Lowered {
                slice: self.token_dims,
                kind: EncodingKind::OneHot,
                produced_by: None,
            }),
            RaspExpr::Indices => Err(CompileError::Unsupported {
                node: "indices",
                reason: "index values are only usable as selector queries".into(),
            }),
            RaspExpr::Constant { .. } => Err(CompileError::Unsupported {
                node: "const",
                reason: "constants are only supported as program roots".into(),
            }),
            RaspExpr::Select { .. } => Err(CompileError::Unsupported {
                node: "select",
                reason: "selectors only feed aggregate/width".into(),
            }),
            RaspExpr::Map { f, inner } => {
                let MapFn::EqConst(c) = *f;
                match inner.as_ref() {
                    RaspExpr::Tokens => {
                        if c < 0 || c as usize >= self.alphabet {
                            return Err(CompileError::BadInput(format!(
                                "map target {c} outside alphabet"
                            )));
                        }
                        let name = self.fresh("flag");
                        let dst = self.layout.alloc(&name, 1, EncodingKind::Flag);
                        let step = Step::FlagFromDims {
                            src_dims: vec![self.token_dims.start + c as usize],
                            dst: dst.start,
                        };
                        self.steps.push(step);
                        Ok(Lowered {
                            slice: dst,
                            kind: EncodingKind::Flag,
                            produced_by: Some(self.steps.len() - 1),
                        })
                    }
                    inner_expr => {
                        let lowered = self.lower(inner_expr)?;
                        if lowered.kind != EncodingKind::Numerical || lowered.slice.len != 1 {
                            return Err(CompileError::Unsupported {
                                node: "map",
                                reason: "equality maps need token or scalar inputs".into(),
                            });
                        }
                        let name = self.fresh("flag");
                        let dst = self.layout.alloc(&name, 1, EncodingKind::Flag);
                        self.steps.push(Step::NumEqFlag {
                            src: lowered.slice.start,
                            value: c,
                            dst: dst.start,
                        });
                        Ok(Lowered {
                            slice: dst,
                            kind: EncodingKind::Flag,
                            produced_by: Some(self.steps.len() - 1),
                        })
                    }
                }
            }
            RaspExpr::SelectorWidth { selector } => {
                let sel = self.lower_selector(selector)?;
                let raw_name = self.fresh("width_raw");
                let raw = self.layout.alloc(&raw_name, 1, EncodingKind::Numerical);
                let out_name = self.fresh("width");
                let out = self.layout.alloc(&out_name, 1, EncodingKind::Numerical);
                self.steps.push(Step::Width {
                    sel,
                    raw,
                    out,
                    max_width: self.max_len,
                });
                Ok(Lowered {
                    slice: out,
                    kind: EncodingKind::Numerical,
                    produced_by: Some(self.steps.len() - 1),
                })
            }
            RaspExpr::Aggregate { selector, values } => {
                // Identity aggregates broadcast a positional value through a
                // position-matching selector; the residual already holds the
                // value at every position, so the head is elided.
                if is_identity_select(selector) {
                    return self.lower(values);
                }
                let vals = self.lower(values)?;
                let sel = self.lower_selector(selector)?;
                let dst_name = self.fresh("agg");
                let dst = self.layout.alloc(&dst_name, vals.slice.len, vals.kind.agg_kind());
                self.steps.push(Step::Aggregate {
                    sel,
                    values: vals.slice,
                    dst,
                });
                Ok(Lowered {
                    slice: dst,
                    kind: vals.kind.agg_kind(),
                    produced_by: Some(self.steps.len() - 1),
                })
            }
        }
    }

    fn lower_selector(&mut self, expr: &RaspExpr) -> Result<SelectorPlan, CompileError> {
        let RaspExpr::Select { keys, queries, cmp } = expr else {
            return Err(CompileError::Unsupported {
                node: expr.node_name(),
                reason: "expected a selector".into(),
            });
        };
        match (keys.as_ref(), queries.as_ref(), cmp) {
            // Flag keys matched against position indices: the readout row is
            // the index-1 row, which matches flag value 1; broadcasting the
            // match over all queries leaves the readout row's selection
            // unchanged and yields the fully-concentrated attention map.
            (RaspExpr::Map { .. }, RaspExpr::Indices, Comparison::Eq) => {
                let flag = self.lower(keys)?;
                Ok(SelectorPlan {
                    pairs: vec![(flag.slice.start, self.const_dim)],
                    // Flags mark one token class; under roughly uniform
                    // inputs the expected width is len/alphabet.
                    pivot_width: (self.max_len / self.alphabet).max(1),
                })
            }
            (RaspExpr::Tokens, RaspExpr::Tokens, cmp) => {
                let mut pairs = Vec::new();
                for k in 0..self.alphabet {
                    for q in 0..self.alphabet {
                        let hit = match cmp {
                            Comparison::Eq => k == q,
                            Comparison::Lt => k < q,
                        };
                        if hit {
                            pairs.push((self.token_dims.start + k, self.token_dims.start + q));
                        }
                    }
                }
                Ok(SelectorPlan {
                    pairs,
                    // Ordering selectors average half the sequence.
                    pivot_width: (self.max_len / 2).max(1),
                })
            }
            _ => Err(CompileError::Unsupported {
                node: "select",
                reason: format!(
                    "unsupported key/query combination ({} vs {})",
                    keys.node_name(),
                    queries.node_name()
                ),
            }),
        }
    }
}

impl EncodingKind {
    fn agg_kind(self) -> EncodingKind {
        match self {
            EncodingKind::Flag => EncodingKind::Flag,
            EncodingKind::OneHot => EncodingKind::OneHot,
            EncodingKind::Numerical => EncodingKind::Numerical,
        }
    }
}

fn is_identity_select(expr: &RaspExpr) -> bool {
    matches!(
        expr,
        RaspExpr::Select { keys, queries, cmp: Comparison::Eq }
            if matches!(keys.as_ref(), RaspExpr::Indices)
                && matches!(queries.as_ref(), RaspExpr::Indices)
    )
}

/// Compile a program for inputs of length 2..=max_len over the alphabet.
pub fn compile(
    expr: &RaspExpr,
    alphabet: usize,
    max_len: usize,
) -> Result<CompiledTransformer, CompileError> {
    if alphabet == 0 || max_len < 2 {
        return Err(CompileError::BadInput(
            "alphabet must be non-empty and max_len at least 2".into(),
        ));
    }
    let n_blocks = 3;

    let mut layout = ResidualLayout::default();
    let const_dim = layout.alloc("const", 1, EncodingKind::Numerical).start;
    let bos_dim = layout.alloc("bos", 1, EncodingKind::Flag).start;
    let token_dims = layout.alloc("tokens", alphabet, EncodingKind::OneHot);

    let mut compiler = Compiler {
        alphabet,
        max_len,
        layout,
        steps: Vec::new(),
        const_dim,
        bos_dim,
        token_dims,
        node_counter: 0,
    };

    // Lower the root; constants short-circuit to a pure readout.
    let readout = match expr {
        RaspExpr::Constant { value, domain } => {
            if *value as usize >= *domain {
                return Err(CompileError::BadInput("constant outside its domain".into()));
            }
            Readout::Constant { value: *value }
        }
        _ => {
            let root = compiler.lower(expr)?;
            match root.kind {
                EncodingKind::Numerical => {
                    // Spread the scalar readout over redundant dimensions
                    // with independent raw channels.
                    let split = compiler
                        .layout
                        .alloc("readout_num", NUM_SPLIT, EncodingKind::Numerical);
                    let raw_split = compiler
                        .layout
                        .alloc("readout_raw", NUM_SPLIT, EncodingKind::Numerical);
                    let _boost = compiler.layout.alloc("boost", 1, EncodingKind::Numerical);
                    let absdiff = compiler
                        .layout
                        .alloc("readout_absdiff", max_len + 1, EncodingKind::OneHot);
                    retarget_numerical_root(&mut compiler, &root, split, raw_split)?;
                    Readout::NumericalClasses {
                        slice: split,
                        absdiff,
                        n_classes: max_len + 1,
                    }
                }
                EncodingKind::OneHot => Readout::Categorical { slice: root.slice },
                EncodingKind::Flag => Readout::Categorical {
                    slice: Slice {
                        start: root.slice.start,
                        len: 1,
                    },
                },
            }
        }
    };

    // Schedule steps onto blocks: one attention op per block, MLP ops fuse.
    // Availability times: embeddings at 0; attention of block b reads at 2b
    // and completes at 2b+1; the block's MLP reads at 2b+1, completes 2b+2.
    let mut step_block: Vec<usize> = vec![0; compiler.steps.len()];
    let mut completion: Vec<usize> = vec![0; compiler.steps.len()];
    let mut attn_used = vec![false; n_blocks];
    let deps: Vec<Vec<usize>> = compiler
        .steps
        .iter()
        .map(|s| step_deps(s, &compiler))
        .collect();
    for i in 0..compiler.steps.len() {
        let ready = deps[i].iter().map(|&d| completion[d]).max().unwrap_or(0);
        if compiler.steps[i].is_attention() {
            let mut b = ready.div_ceil(2);
            while b < n_blocks && attn_used[b] {
                b += 1;
            }
            if b >= n_blocks {
                return Err(CompileError::DepthExceeded {
                    needed: b + 1,
                    blocks: n_blocks,
                });
            }
            attn_used[b] = true;
            step_block[i] = b;
            completion[i] = 2 * b + 1;
            // The width inversion MLP runs in the same block.
            if matches!(compiler.steps[i], Step::Width { .. }) {
                completion[i] = 2 * b + 2;
            }
        } else {
            let b = if ready == 0 { 0 } else { (ready - 1).div_ceil(2) };
            if b >= n_blocks {
                return Err(CompileError::DepthExceeded {
                    needed: b + 1,
                    blocks: n_blocks,
                });
            }
            step_block[i] = b;
            completion[i] = 2 * b + 2;
        }
    }

    // Numerical readouts get an inert uniform head in a free late block: it
    // contributes nothing when compiled but exposes a smooth global offset
    // path once the model is trained.
    let mut offset_head_block = None;
    if let Readout::NumericalClasses { .. } = readout {
        let root_done = completion.iter().max().copied().unwrap_or(0);
        let earliest = root_done.div_ceil(2);
        for (b, used) in attn_used.iter().enumerate().skip(earliest) {
            if !used {
                offset_head_block = Some(b);
                break;
            }
        }
    }

    // Per-block hidden unit budgets.
    let mut mlp_units = vec![0usize; n_blocks];
    for (i, s) in compiler.steps.iter().enumerate() {
        mlp_units[step_block[i]] += match s {
            Step::FlagFromDims { .. } => 1,
            Step::NumEqFlag { .. } => 4,
            Step::Width { max_width, out, .. } => max_width * out.len,
            Step::Aggregate { .. } => 0,
        };
    }
    if let Readout::NumericalClasses { n_classes, .. } = &readout {
        mlp_units[n_blocks - 1] += 2 * n_classes;
    }
    let d_mlp = mlp_units.iter().copied().max().unwrap_or(0).max(1);
    let d_model = compiler.layout.width;
    let vocab_size = alphabet + 1;
    let bos_id = alphabet as u16;
    let n_outputs = match &readout {
        Readout::NumericalClasses { n_classes, .. } => *n_classes,
        Readout::Categorical { slice } => slice.len,
        Readout::Constant { value } => *value as usize + 1,
    };
    let config = TransformerConfig::tracr_shape(
        d_model,
        d_mlp,
        max_len + 1,
        vocab_size,
        n_outputs,
    );

    // Assemble parameters.
    let names = config.param_names();
    let mut params: Vec<Tensor<f32>> = names
        .iter()
        .map(|n| Tensor::zeros(&config.param_shape(n)))
        .collect();
    let idx = |name: &str| names.iter().position(|n| n == name).unwrap();
    let sqrt_d = (d_model as f64).sqrt();

    // Token embedding: one-hot plus const/boost on every row, BOS flag on
    // the BOS row.
    {
        let tok = &mut params[idx("embed.tok")];
        for t in 0..vocab_size {
            tok.data[t * d_model + const_dim] = 1.0;
            if t == bos_id as usize {
                tok.data[t * d_model + bos_dim] = 1.0;
            } else {
                tok.data[t * d_model + token_dims.start + t] = 1.0;
            }
        }
    }

    for (i, step) in compiler.steps.iter().enumerate() {
        let b = step_block[i];
        emit_step(
            step,
            b,
            &mut params,
            &idx,
            &compiler,
            sqrt_d,
            d_model,
            d_mlp,
            const_dim,
            bos_dim,
        );
    }

    if let Readout::NumericalClasses {
        slice,
        absdiff,
        n_classes,
    } = &readout
    {
        let boost_dim = compiler
            .layout
            .find("boost")
            .expect("numerical readout allocates boost")
            .slice
            .start;
        // The boost constant appears after the readout block's MLP, so the
        // width head upstream never sees it.
        let root_block = compiler
            .steps
            .iter()
            .enumerate()
            .find_map(|(i, s)| match s {
                Step::Width { out, .. } if out.start == slice.start => Some(step_block[i]),
                _ => None,
            })
            .expect("numerical root is a width step");
        if root_block + 1 >= n_blocks {
            return Err(CompileError::DepthExceeded {
                needed: root_block + 2,
                blocks: n_blocks,
            });
        }
        params[idx(&format!("blocks.{root_block}.mlp.b2"))].data[boost_dim] = BOOST as f32;
        if let Some(b) = offset_head_block {
            // Uniform head: zero Q/K logits attend everywhere evenly; the
            // value path reads the boost dimension with zero weight, and
            // the output projection fans into the readout dimensions.
            let wo = &mut params[idx(&format!("blocks.{b}.attn.w_o"))];
            for r in 0..slice.len {
                wo.data[boost_channel(d_model) * d_model + slice.start + r] =
                    (1.0 / slice.len as f64) as f32;
            }
        }
        // Absolute-difference stage in the last block: |count - v| per
        // class from a relu pair.
        let b = n_blocks - 1;
        for v in 0..*n_classes {
            for sign in [1.0f64, -1.0] {
                let unit = next_free_unit(&mut params, &idx, b, d_mlp);
                {
                    let w1 = &mut params[idx(&format!("blocks.{b}.mlp.w1"))];
                    for r in 0..slice.len {
                        w1.data[(slice.start + r) * d_mlp + unit] = sign as f32;
                    }
                }
                params[idx(&format!("blocks.{b}.mlp.b1"))].data[unit] = (-sign * v as f64) as f32;
                params[idx(&format!("blocks.{b}.mlp.w2"))]
                    .data[unit * d_model + absdiff.start + v] = 1.0;
            }
        }
    }

    // Unembedding.
    {
        let u = &mut params[idx("unembed.w")];
        let cols = n_outputs;
        match &readout {
            Readout::NumericalClasses {
                absdiff, n_classes, ..
            } => {
                for v in 0..*n_classes {
                    u.data[(absdiff.start + v) * cols + v] = (-READOUT_SCALE) as f32;
                }
            }
            Readout::Categorical { slice } => {
                for c in 0..slice.len {
                    u.data[(slice.start + c) * cols + c] = READOUT_SCALE as f32;
                }
                // Empty selections read out as (near-)zero vectors; bias
                // class 0 by a threshold between the largest possible
                // softmax leak and the smallest genuine read so ties
                // resolve exactly like the interpreter's.
                u.data[const_dim * cols] += (READOUT_SCALE * 0.2) as f32;
            }
            Readout::Constant { value } => {
                u.data[const_dim * cols + *value as usize] = READOUT_SCALE as f32;
            }
        }
    }

    let model = ModelState {
        config,
        params,
        opt_state: OptState::None,
        iteration: 0,
        provenance: format!(
            "compiled program={} alphabet={alphabet} max_len={max_len}",
            crate::rasp::print_program(expr)
        ),
    };
    Ok(CompiledTransformer {
        model,
        layout: compiler.layout,
        alphabet,
        max_len,
        bos_id,
        readout_pos: TRACR_READOUT,
        program: expr.clone(),
    })
}

/// Channel used by the inert offset head's value path.
fn boost_channel(_d_model: usize) -> usize {
    0
}

fn step_deps(step: &Step, c: &Compiler) -> Vec<usize> {
    // A step depends on the producers of the dims it reads.
    let mut dims: Vec<usize> = Vec::new();
    match step {
        Step::FlagFromDims { src_dims, .. } => dims.extend(src_dims),
        Step::NumEqFlag { src, .. } => dims.push(*src),
        Step::Width { sel, .. } => dims.extend(sel.pairs.iter().map(|p| p.0)),
        Step::Aggregate { sel, values, .. } => {
            dims.extend(sel.pairs.iter().map(|p| p.0));
            dims.extend(values.start..values.start + values.len);
        }
    }
    let mut out = Vec::new();
    for (j, other) in c.steps.iter().enumerate() {
        let writes: Vec<usize> = match other {
            Step::FlagFromDims { dst, .. } | Step::NumEqFlag { dst, .. } => vec![*dst],
            Step::Width { raw, out: o, .. } => {
                let mut v: Vec<usize> = (raw.start..raw.start + raw.len).collect();
                v.extend(o.start..o.start + o.len);
                v
            }
            Step::Aggregate { dst, .. } => (dst.start..dst.start + dst.len).collect(),
        };
        if writes.iter().any(|w| dims.contains(w)) {
            out.push(j);
        }
    }
    out
}

/// Rewire a numerical root so its inversion runs over independent raw
/// channels into the redundant readout slice.
fn retarget_numerical_root(
    compiler: &mut Compiler,
    root: &Lowered,
    split: Slice,
    raw_split: Slice,
) -> Result<(), CompileError> {
    let Some(step_idx) = root.produced_by else {
        return Err(CompileError::Unsupported {
            node: "width",
            reason: "numerical root must come from a computed value".into(),
        });
    };
    match &mut compiler.steps[step_idx] {
        Step::Width { out, raw, .. } => {
            *out = split;
            *raw = raw_split;
            Ok(())
        }
        _ => Err(CompileError::Unsupported {
            node: "aggregate",
            reason: "only selector-width roots support the numerical readout".into(),
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn emit_step(
    step: &Step,
    block: usize,
    params: &mut [Tensor<f32>],
    idx: &dyn Fn(&str) -> usize,
    c: &Compiler,
    sqrt_d: f64,
    d_model: usize,
    d_mlp: usize,
    const_dim: usize,
    bos_dim: usize,
) {
    // Hidden units are appended left-to-right per block.
    match step {
        Step::FlagFromDims { src_dims, dst } => {
            let unit = next_free_unit(params, idx, block, d_mlp);
            let w1 = &mut params[idx(&format!("blocks.{block}.mlp.w1"))];
            for &s in src_dims {
                w1.data[s * d_mlp + unit] = 1.0;
            }
            let w2 = &mut params[idx(&format!("blocks.{block}.mlp.w2"))];
            w2.data[unit * d_model + dst] = 1.0;
        }
        Step::NumEqFlag { src, value, dst } => {
            // Exact unit tent over integers: relu(x-c+1) - 2 relu(x-c) +
            // relu(x-c-1), corrected at BOS where the scalar reads zero.
            let v = *value as f64;
            let tent_at_zero = (1.0 - v).max(0.0) - 2.0 * (-v).max(0.0) + (-1.0 - v).max(0.0);
            let mut units: Vec<(Vec<(usize, f64)>, f64, f64)> = vec![
                (vec![(*src, 1.0)], -(v - 1.0), 1.0),
                (vec![(*src, 1.0)], -v, -2.0),
                (vec![(*src, 1.0)], -(v + 1.0), 1.0),
            ];
            if tent_at_zero != 0.0 {
                units.push((vec![(c.bos_dim, 1.0)], 0.0, -tent_at_zero));
            }
            for (ins, bias, coeff) in units {
                let unit = next_free_unit(params, idx, block, d_mlp);
                {
                    let w1 = &mut params[idx(&format!("blocks.{block}.mlp.w1"))];
                    for (dim, w) in ins {
                        w1.data[dim * d_mlp + unit] = w as f32;
                    }
                }
                params[idx(&format!("blocks.{block}.mlp.b1"))].data[unit] = bias as f32;
                params[idx(&format!("blocks.{block}.mlp.w2"))].data[unit * d_model + dst] =
                    coeff as f32;
            }
        }
        Step::Width {
            sel,
            raw,
            out,
            max_width,
        } => {
            emit_selector_head(params, idx, block, sel, sqrt_d, d_model, true, const_dim, bos_dim);
            assert_eq!(raw.len, out.len);
            // One value channel per raw dimension: BOS indicator -> raw_i =
            // scaled bos attention mass, so channel noise stays independent.
            for i in 0..raw.len {
                let ch = MATCH_CHANNELS + i;
                params[idx(&format!("blocks.{block}.attn.w_v"))]
                    .data[c.bos_dim * d_model + ch] = RAW_SCALE as f32;
                params[idx(&format!("blocks.{block}.attn.w_o"))]
                    .data[ch * d_model + raw.start + i] = 1.0;
            }
            // Inversion per channel: f(raw_i) = w exactly at the knots
            // t_w = RAW_SCALE/(w+1), piecewise linear between them. The
            // table is anchored at a pivot width (the output bias carries
            // the pivot value): widths above the pivot activate descending
            // ramps relu(t_j - raw), widths below activate ascending ramps
            // relu(raw - t_j), so at common inputs almost no unit is
            // active and every unit's slope-times-activation stays O(1).
            // That keeps both weight-noise accumulation and gradient
            // magnitudes small even though the interpolation slopes grow
            // quadratically with width.
            let share = 1.0 / out.len as f64;
            let g = RAW_SCALE;
            let knot = |j: usize| g / (j as f64 + 1.0);
            let pivot = sel.pivot_width.min(*max_width);
            for i in 0..raw.len {
                params[idx(&format!("blocks.{block}.mlp.b2"))].data[out.start + i] +=
                    (pivot as f64 * share) as f32;
                let emit_unit = |params: &mut [Tensor<f32>], w1v: f64, b1v: f64, coeff: f64| {
                    let unit = next_free_unit(params, idx, block, d_mlp);
                    params[idx(&format!("blocks.{block}.mlp.w1"))]
                        .data[(raw.start + i) * d_mlp + unit] = w1v as f32;
                    params[idx(&format!("blocks.{block}.mlp.b1"))].data[unit] = b1v as f32;
                    params[idx(&format!("blocks.{block}.mlp.w2"))]
                        .data[unit * d_model + out.start + i] = (coeff * share) as f32;
                };
                // Ascending ramps cover widths below the pivot: ramp j is
                // active on segments w < j, carrying the slope change
                // between segments j-1 and j; the pivot ramp closes the
                // telescoped sum.
                for j in 1..=pivot {
                    let m = if j == pivot {
                        -(pivot as f64) * (pivot as f64 + 1.0) / g
                    } else {
                        2.0 * (j as f64 + 1.0) / g
                    };
                    emit_unit(params, 1.0, -knot(j), m);
                }
                // Descending ramps cover widths above the pivot: ramp j is
                // active on segments w >= j.
                for j in pivot..*max_width {
                    let m = if j == pivot {
                        (pivot as f64 + 1.0) * (pivot as f64 + 2.0) / g
                    } else {
                        2.0 * (j as f64 + 1.0) / g
                    };
                    emit_unit(params, -1.0, knot(j), m);
                }
            }
        }
        Step::Aggregate { sel, values, dst } => {
            emit_selector_head(params, idx, block, sel, sqrt_d, d_model, true, const_dim, bos_dim);
            let wv = &mut params[idx(&format!("blocks.{block}.attn.w_v"))];
            for i in 0..values.len {
                wv.data[(values.start + i) * d_model + MATCH_CHANNELS + i] = 1.0;
            }
            let wo = &mut params[idx(&format!("blocks.{block}.attn.w_o"))];
            for i in 0..dst.len {
                wo.data[(MATCH_CHANNELS + i) * d_model + dst.start + i] = 1.0;
            }
        }
    }
}

/// Wire the Q/K matrices of one selector head. Each distinct key dimension
/// owns a query-key channel (so non-product match structures like
/// less-than wire correctly); the last channel carries the BOS default,
/// full strength for width heads and half for aggregates so real matches
/// dominate.
#[allow(clippy::too_many_arguments)]
fn emit_selector_head(
    params: &mut [Tensor<f32>],
    idx: &dyn Fn(&str) -> usize,
    block: usize,
    sel: &SelectorPlan,
    sqrt_d: f64,
    d_model: usize,
    full_bos: bool,
    const_dim: usize,
    bos_dim: usize,
) {
    let mut key_channels: Vec<usize> = Vec::new();
    for &(key_dim, _) in &sel.pairs {
        if !key_channels.contains(&key_dim) {
            key_channels.push(key_dim);
        }
    }
    let bos_weight = if full_bos { 1.0 } else { 0.5 };
    // Single-channel selectors share the channel with the BOS default so
    // query-side weight noise cancels between real matches and the sink;
    // multi-channel (ordering) selectors need a dedicated sink channel.
    let shared_bos = key_channels.len() == 1;
    let bos_ch = if shared_bos { 0 } else { key_channels.len() };
    assert!(bos_ch < d_model, "selector channels exceed head width");
    {
        let wk = &mut params[idx(&format!("blocks.{block}.attn.w_k"))];
        for (ch, &key_dim) in key_channels.iter().enumerate() {
            wk.data[key_dim * d_model + ch] = sqrt_d as f32;
        }
        wk.data[bos_dim * d_model + bos_ch] = (sqrt_d * bos_weight) as f32;
    }
    let wq = &mut params[idx(&format!("blocks.{block}.attn.w_q"))];
    for &(key_dim, query_dim) in &sel.pairs {
        let ch = key_channels.iter().position(|&k| k == key_dim).unwrap();
        wq.data[query_dim * d_model + ch] = SHARPNESS as f32;
    }
    if !shared_bos {
        wq.data[const_dim * d_model + bos_ch] = SHARPNESS as f32;
    }
}

fn next_free_unit(
    params: &mut [Tensor<f32>],
    idx: &dyn Fn(&str) -> usize,
    block: usize,
    d_mlp: usize,
) -> usize {
    // A unit is free when its input column, bias and output row are all
    // zero; units are claimed in order.
    let w1 = &params[idx(&format!("blocks.{block}.mlp.w1"))];
    let b1 = &params[idx(&format!("blocks.{block}.mlp.b1"))];
    let w2 = &params[idx(&format!("blocks.{block}.mlp.w2"))];
    let d_model = w2.shape[1];
    for u in 0..d_mlp {
        let col_zero = (0..w1.shape[0]).all(|i| w1.data[i * d_mlp + u] == 0.0);
        let row_zero = (0..d_model).all(|j| w2.data[u * d_model + j] == 0.0);
        if col_zero && row_zero && b1.data[u] == 0.0 {
            return u;
        }
    }
    panic!("MLP unit budget exhausted in block {block}");
}

// ---------------------------------------------------------------------------
// Densification and evaluation helpers

/// Trainable copy of a compiled model with N(0, sigma^2) noise on every
/// parameter. The default sigma keeps exact-task accuracy intact while
/// breaking the extreme sparsity that destabilizes gradient updates.
pub fn densify(compiled: &CompiledTransformer, sigma: f64, rng: &mut Rng) -> ModelState {
    let mut model = compiled.model.clone();
    if sigma > 0.0 {
        for t in &mut model.params {
            for v in &mut t.data {
                *v += (rng.next_gaussian() * sigma) as f32;
            }
        }
    }
    model.provenance = format!("{} densify_sigma={sigma}", compiled.model.provenance);
    model
}

impl CompiledTransformer {
    /// Model-space token row for a program input.
    pub fn model_tokens(&self, input: &[u16]) -> Vec<u16> {
        let mut row = Vec::with_capacity(input.len() + 1);
        row.push(self.bos_id);
        row.extend_from_slice(input);
        row
    }

    /// Answer classes for a batch of equal-length inputs.
    pub fn answers(&self, inputs: &[Vec<u16>]) -> Vec<u16> {
        answers_for_model(&self.model, self.bos_id, self.readout_pos, inputs)
    }
}

/// Argmax answers at the readout position for any model sharing the
/// compiled input convention (used for both exact and densified models).
pub fn answers_for_model(
    model: &ModelState,
    bos_id: u16,
    readout_pos: usize,
    inputs: &[Vec<u16>],
) -> Vec<u16> {
    let n = inputs.len();
    assert!(n > 0);
    let len = inputs[0].len();
    let t = len + 1;
    let mut tokens = Vec::with_capacity(n * t);
    for input in inputs {
        assert_eq!(input.len(), len, "answers_for_model needs equal lengths");
        tokens.push(bos_id);
        tokens.extend_from_slice(input);
    }
    let trace = crate::model::forward_trace(model, &tokens, n, t, false);
    let v = model.config.n_outputs;
    let pos = readout_pos.min(t - 1);
    (0..n)
        .map(|r| {
            let row = &trace.logits.data[(r * t + pos) * v..(r * t + pos + 1) * v];
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasp::{build_counter, build_kth_largest, program_answer};

    fn letters(s: &str) -> Vec<u16> {
        s.chars().map(|c| (c as u8 - b'a') as u16).collect()
    }

    #[test]
    fn layout_slices_are_disjoint() {
        let compiled = compile(&build_counter(0), 9, 20).unwrap();
        let mut covered = vec![false; compiled.layout.width];
        for e in &compiled.layout.entries {
            for d in e.slice.start..e.slice.start + e.slice.len {
                assert!(!covered[d], "overlap at dim {d} ({})", e.name);
                covered[d] = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "residual gaps");
    }

    #[test]
    fn compiled_counter_matches_interpreter_exhaustively() {
        let target = 0u16;
        let prog = build_counter(target);
        let compiled = compile(&prog, 3, 6).unwrap();
        for len in 2..=4usize {
            let total = 3usize.pow(len as u32);
            let inputs: Vec<Vec<u16>> = (0..total)
                .map(|mut code| {
                    (0..len)
                        .map(|_| {
                            let t = (code % 3) as u16;
                            code /= 3;
                            t
                        })
                        .collect()
                })
                .collect();
            let got = compiled.answers(&inputs);
            for (input, &ans) in inputs.iter().zip(&got) {
                let expect = program_answer(&prog, input, 3).unwrap();
                assert_eq!(ans, expect, "counter mismatch on {input:?}");
            }
        }
    }

    #[test]
    fn compiled_counter_on_published_sample() {
        let s = "cadabcbadfbgcebbahjibdefihfegabgfhjcbeddhjibab";
        let input = letters(s);
        let compiled = compile(&build_counter(1), 10, 48).unwrap();
        let ans = compiled.answers(&[input]);
        assert_eq!(ans[0], 10);
    }

    #[test]
    fn compiled_kth_largest_on_published_sample() {
        let compiled = compile(&build_kth_largest(5), 26, 26).unwrap();
        let input = letters("bdafhmxpqn");
        let ans = compiled.answers(&[input]);
        assert_eq!(ans[0], (b'h' - b'a') as u16);
    }

    #[test]
    fn compiled_constant_outputs_the_constant() {
        let prog = RaspExpr::Constant { value: 3, domain: 7 };
        let compiled = compile(&prog, 5, 8).unwrap();
        let inputs = vec![vec![0u16, 1, 2, 3], vec![4u16, 4, 4, 4]];
        assert_eq!(compiled.answers(&inputs), vec![3, 3]);
    }

    #[test]
    fn unsupported_node_is_named() {
        // Aggregating over a bare tokens "selector" cannot compile.
        let bad = RaspExpr::Aggregate {
            selector: Box::new(RaspExpr::Tokens),
            values: Box::new(RaspExpr::Tokens),
        };
        match compile(&bad, 3, 8) {
            Err(CompileError::Unsupported { node, .. }) => assert_eq!(node, "tokens"),
            other => panic!("expected unsupported-node error, got {other:?}"),
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let compiled = compile(&build_counter(0), 9, 12).unwrap();
        let input: Vec<u16> = vec![0, 1, 0, 2, 3, 0, 1, 8];
        let tokens = compiled.model_tokens(&input);
        let t = tokens.len();
        let trace = crate::model::forward_trace(&compiled.model, &tokens, 1, t, true);
        for attn in &trace.attentions {
            for r in 0..t {
                let sum: f32 = attn.data[r * t..(r + 1) * t].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn densify_zero_sigma_is_identical() {
        let compiled = compile(&build_counter(0), 9, 10).unwrap();
        let model = densify(&compiled, 0.0, &mut Rng::new(1));
        assert_eq!(model.param_hash(), compiled.model.param_hash());
    }

    #[test]
    fn counter_width_head_attends_targets() {
        // On a string with many targets, every row of the width head puts
        // nearly all its mass on target positions.
        let compiled = compile(&build_counter(0), 9, 24).unwrap();
        let mut input = vec![1u16; 20];
        for i in [0usize, 2, 4, 6, 8, 10, 12, 14, 16, 18] {
            input[i] = 0;
        }
        let tokens = compiled.model_tokens(&input);
        let t = tokens.len();
        let trace = crate::model::forward_trace(&compiled.model, &tokens, 1, t, true);
        let attn = &trace.attentions[1]; // width head block
        for q in 0..t {
            let mass: f32 = (0..t)
                .filter(|&k| k > 0 && input[k - 1] == 0)
                .map(|k| attn.data[q * t + k])
                .sum();
            assert!(mass >= 0.9, "row {q} target mass {mass}");
        }
    }
}
