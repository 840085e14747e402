//! Sample encoding and dataset generation.
//!
//! Encoded samples follow the fixed layout
//! `SOS T O O' SOT txt... EOT ART Ans PAD... SOS`; the trailing marker closes
//! the sequence and padding fills up to the configured context length.
//! Fine-tuning data carries a controlled spurious correlation: a sample is
//! "correlated" when the offset `r(txt, o_ft) - r(txt, o_pt) == q` holds
//! exactly, and the generator edits texts by substituting tokens inside the
//! task's window so the correlated/uncorrelated partition is exact.

use crate::grammar::{Grammar, GrammarError, TerminalId};
use crate::rng::{fnv1a, Rng};
use crate::task::{answer_token, task_oracle, CorrelationSpec, SamplingPrior, TaskSpec};
use crate::vocab::{FamilyAlias, TaskFamily, Vocabulary, ART, EOT, NULL, PAD, SOS, SOT};
use std::collections::BTreeMap;
use std::fmt;

pub const DEFAULT_TXT_LEN: usize = 250;
pub const DEFAULT_CONTEXT_LEN: usize = 300;
const MAX_SAMPLE_RETRIES: u32 = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    /// Exactly `context_len` token ids.
    pub token_ids: Vec<u16>,
    /// Index of the `Ans` token; the model predicts it from the previous
    /// position.
    pub answer_position: u16,
    pub answer_value: u32,
    pub is_correlated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    Grammar(GrammarError),
    LengthOverflow { needed: usize, context_len: usize },
    MalformedSample(String),
    RetriesExhausted { what: &'static str },
    UnsupportedCorrelation { family: TaskFamily },
    TooFewTerminals,
    MaxLenOverflow { len: usize, alphabet: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Grammar(e) => write!(f, "{e}"),
            DataError::LengthOverflow {
                needed,
                context_len,
            } => write!(
                f,
                "encoded sample needs {needed} tokens but context_len is {context_len}"
            ),
            DataError::MalformedSample(why) => write!(f, "malformed sample: {why}"),
            DataError::RetriesExhausted { what } => {
                write!(f, "could not generate {what} within the retry budget")
            }
            DataError::UnsupportedCorrelation { family } => write!(
                f,
                "correlation injection is not implemented for family {}",
                family.code()
            ),
            DataError::TooFewTerminals => {
                write!(f, "correlation editing needs at least 3 terminals")
            }
            DataError::MaxLenOverflow { len, alphabet } => write!(
                f,
                "cannot draw {len} distinct letters from an alphabet of {alphabet}"
            ),
        }
    }
}

impl std::error::Error for DataError {}

impl From<GrammarError> for DataError {
    fn from(e: GrammarError) -> Self {
        DataError::Grammar(e)
    }
}

/// Assemble one sample in the canonical layout.
pub fn encode_sample(
    task: &TaskSpec,
    vocab: &Vocabulary,
    txt: &[TerminalId],
    answer: u32,
    context_len: usize,
    is_correlated: bool,
) -> Result<EncodedSample, DataError> {
    // SOS T O O' SOT | txt | EOT ART Ans | pads | SOS
    let needed = 5 + txt.len() + 3 + 1;
    if needed > context_len {
        return Err(DataError::LengthOverflow {
            needed,
            context_len,
        });
    }
    let mut ids = Vec::with_capacity(context_len);
    ids.push(SOS);
    ids.push(task.family_token(vocab));
    ids.push(task.operand_token(vocab));
    ids.push(vocab.numeric_token(task.operand2));
    ids.push(SOT);
    for &t in txt {
        ids.push(vocab.terminal_token(t));
    }
    ids.push(EOT);
    ids.push(ART);
    let answer_position = ids.len() as u16;
    ids.push(answer_token(vocab, task.family, answer));
    while ids.len() < context_len - 1 {
        ids.push(PAD);
    }
    ids.push(SOS);
    Ok(EncodedSample {
        token_ids: ids,
        answer_position,
        answer_value: answer,
        is_correlated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSample {
    pub family: TaskFamily,
    pub alias: FamilyAlias,
    pub operand: Option<TerminalId>,
    pub operand2: u16,
    pub txt: Vec<TerminalId>,
    pub answer_value: u32,
    pub answer_position: u16,
}

/// Inverse of [`encode_sample`]; used by audits and round-trip tests.
pub fn decode_sample(vocab: &Vocabulary, ids: &[u16]) -> Result<DecodedSample, DataError> {
    let bad = |why: &str| DataError::MalformedSample(why.to_string());
    if ids.len() < 10 || ids[0] != SOS {
        return Err(bad("missing SOS"));
    }
    let (family, alias) = vocab
        .family_of_token(ids[1])
        .ok_or_else(|| bad("bad family token"))?;
    let operand = if ids[2] == NULL {
        None
    } else {
        Some(
            vocab
                .terminal_of_token(ids[2])
                .ok_or_else(|| bad("bad operand token"))?,
        )
    };
    let operand2 = vocab
        .numeric_value(ids[3])
        .ok_or_else(|| bad("bad operand2 token"))?;
    if ids[4] != SOT {
        return Err(bad("missing SOT"));
    }
    let mut txt = Vec::new();
    let mut i = 5;
    while i < ids.len() && ids[i] != EOT {
        txt.push(
            vocab
                .terminal_of_token(ids[i])
                .ok_or_else(|| bad("non-terminal inside txt"))?,
        );
        i += 1;
    }
    if i + 2 >= ids.len() || ids[i] != EOT || ids[i + 1] != ART {
        return Err(bad("missing EOT/ART"));
    }
    let answer_position = (i + 2) as u16;
    let ans_id = ids[i + 2];
    let answer_value = match family {
        TaskFamily::TokenAt => vocab
            .terminal_of_token(ans_id)
            .ok_or_else(|| bad("bad token-at answer"))? as u32,
        _ => vocab
            .numeric_value(ans_id)
            .ok_or_else(|| bad("bad numeric answer"))? as u32,
    };
    for (j, &id) in ids.iter().enumerate().skip(i + 3) {
        let last = j == ids.len() - 1;
        if (last && id != SOS) || (!last && id != PAD) {
            return Err(bad("bad padding/terminator"));
        }
    }
    Ok(DecodedSample {
        family,
        alias,
        operand,
        operand2,
        txt,
        answer_value,
        answer_position,
    })
}

// ---------------------------------------------------------------------------
// Provenance

/// Ordered key-value block stored with every generated artifact; the
/// canonical text determines the content hash, so identical provenance means
/// bitwise-identical data.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    entries: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(kind: &str) -> Provenance {
        let mut p = Provenance::default();
        p.push("kind", kind);
        p.push("format_version", "1");
        p.push("rng_algo", crate::rng::RNG_ALGO);
        p
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical_text().as_bytes())
    }

    pub fn parse(text: &str) -> Provenance {
        let mut p = Provenance::default();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                p.push(k, v);
            }
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<EncodedSample>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Histogram of answer labels, used for the distribution-shift guard.
    pub fn label_histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.answer_value).or_insert(0) += 1;
        }
        h
    }

    pub fn correlated_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.is_correlated).count() as f64 / self.samples.len() as f64
    }
}

/// Total-variation distance between two label histograms.
pub fn tv_distance(a: &BTreeMap<u32, usize>, b: &BTreeMap<u32, usize>) -> f64 {
    let na: usize = a.values().sum();
    let nb: usize = b.values().sum();
    if na == 0 || nb == 0 {
        return 1.0;
    }
    let mut keys: Vec<u32> = a.keys().chain(b.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|k| {
            let pa = *a.get(k).unwrap_or(&0) as f64 / na as f64;
            let pb = *b.get(k).unwrap_or(&0) as f64 / nb as f64;
            (pa - pb).abs()
        })
        .sum::<f64>()
}

// ---------------------------------------------------------------------------
// Correlation editing

/// Edit `txt` in place so the count offset `r(o_ft) - r(o_pt) = q` holds
/// exactly inside the window, using single-token substitutions that move
/// the difference by one step at a time (filler <-> o_ft preferred, o_pt ->
/// filler when fillers run out). Returns false when the text cannot be
/// edited (caller resamples).
fn enforce_count_offset(
    txt: &mut [TerminalId],
    corr: &CorrelationSpec,
    window: usize,
    n_terminals: usize,
    rng: &mut Rng,
) -> bool {
    let len = txt.len();
    let start = len.saturating_sub(window);
    let diff = |txt: &[TerminalId]| {
        let w = &txt[start..];
        let nf = w.iter().filter(|&&t| t == corr.o_ft).count() as i64;
        let np = w.iter().filter(|&&t| t == corr.o_pt).count() as i64;
        nf - np
    };
    for _ in 0..2 * window {
        let d = diff(txt);
        if d == corr.offset_q {
            return true;
        }
        let positions_of = |kind: u8| -> Vec<usize> {
            (start..len)
                .filter(|&i| match kind {
                    0 => txt[i] == corr.o_ft,
                    1 => txt[i] == corr.o_pt,
                    _ => txt[i] != corr.o_ft && txt[i] != corr.o_pt,
                })
                .collect()
        };
        if d < corr.offset_q {
            // Raise the difference: filler -> o_ft, or o_pt -> filler.
            let fillers = positions_of(2);
            if !fillers.is_empty() {
                txt[fillers[rng.usize_below(fillers.len())]] = corr.o_ft;
                continue;
            }
            let pts = positions_of(1);
            if pts.is_empty() {
                return false;
            }
            txt[pts[rng.usize_below(pts.len())]] = pick_filler(corr, n_terminals, rng);
        } else {
            // Lower the difference: o_ft -> filler, or filler -> o_pt.
            let fts = positions_of(0);
            if !fts.is_empty() {
                txt[fts[rng.usize_below(fts.len())]] = pick_filler(corr, n_terminals, rng);
                continue;
            }
            let fillers = positions_of(2);
            if fillers.is_empty() {
                return false;
            }
            txt[fillers[rng.usize_below(fillers.len())]] = corr.o_pt;
        }
    }
    diff(txt) == corr.offset_q
}

fn pick_filler(corr: &CorrelationSpec, n_terminals: usize, rng: &mut Rng) -> TerminalId {
    let fillers: Vec<TerminalId> = (0..n_terminals as TerminalId)
        .filter(|&t| t != corr.o_pt && t != corr.o_ft)
        .collect();
    fillers[rng.usize_below(fillers.len())]
}

/// Make sure the count offset does NOT hold, flipping a single window token
/// when the text satisfies it by accident.
fn break_count_offset(
    txt: &mut [TerminalId],
    corr: &CorrelationSpec,
    window: usize,
    n_terminals: usize,
    rng: &mut Rng,
) -> bool {
    let len = txt.len();
    let start = len.saturating_sub(window);
    let holds = |txt: &[TerminalId]| {
        let w = &txt[start..];
        let nf = w.iter().filter(|&&t| t == corr.o_ft).count() as i64;
        let np = w.iter().filter(|&&t| t == corr.o_pt).count() as i64;
        nf - np == corr.offset_q
    };
    if !holds(txt) {
        return true;
    }
    let mut ft_pos: Vec<usize> = Vec::new();
    let mut filler_pos: Vec<usize> = Vec::new();
    for i in start..len {
        if txt[i] == corr.o_ft {
            ft_pos.push(i);
        } else if txt[i] != corr.o_pt {
            filler_pos.push(i);
        }
    }
    // Shift the fine-tuning operand count by one in either direction.
    let add = if filler_pos.is_empty() {
        false
    } else if ft_pos.is_empty() {
        true
    } else {
        rng.chance(0.5)
    };
    if add && !filler_pos.is_empty() {
        txt[filler_pos[rng.usize_below(filler_pos.len())]] = corr.o_ft;
    } else if !ft_pos.is_empty() {
        txt[ft_pos[rng.usize_below(ft_pos.len())]] = pick_filler(corr, n_terminals, rng);
    } else {
        return false;
    }
    !holds(txt)
}

/// Edit `txt` so the indexing offset holds: the `k`-th backward occurrence of
/// `o_ft` sits exactly `q` positions further from the end than that of
/// `o_pt`.
fn enforce_index_offset(
    txt: &mut [TerminalId],
    corr: &CorrelationSpec,
    k: u16,
    n_terminals: usize,
    rng: &mut Rng,
) -> bool {
    let len = txt.len();
    let r_pt = match crate::task::r_statistic(TaskFamily::IndexOf, corr.o_pt, k, txt) {
        Some(r) => r,
        None => return false,
    };
    let d = r_pt + corr.offset_q;
    if d < k as i64 || d > len as i64 {
        return false;
    }
    let d = d as usize;
    let target_pos = len - d;
    if txt[target_pos] == corr.o_pt {
        return false;
    }
    // Positions closer to the end than the target (distances 1..d-1).
    let mut candidates: Vec<usize> = (target_pos + 1..len)
        .filter(|&i| txt[i] != corr.o_pt)
        .collect();
    if candidates.len() < (k - 1) as usize {
        return false;
    }
    rng.shuffle(&mut candidates);
    let (chosen, rest) = candidates.split_at((k - 1) as usize);
    for &i in chosen {
        txt[i] = corr.o_ft;
    }
    for &i in rest {
        if txt[i] == corr.o_ft {
            txt[i] = pick_filler(corr, n_terminals, rng);
        }
    }
    txt[target_pos] = corr.o_ft;
    true
}

fn break_index_offset(
    txt: &mut [TerminalId],
    corr: &CorrelationSpec,
    k: u16,
    n_terminals: usize,
    rng: &mut Rng,
) -> bool {
    for _ in 0..10 {
        let r_pt = match crate::task::r_statistic(TaskFamily::IndexOf, corr.o_pt, k, txt) {
            Some(r) => r,
            None => return false,
        };
        let r_ft = match crate::task::r_statistic(TaskFamily::IndexOf, corr.o_ft, k, txt) {
            Some(r) => r,
            None => return false,
        };
        if r_ft - r_pt != corr.offset_q {
            return true;
        }
        // Remove the k-th occurrence; the statistic moves to a later one.
        let pos = txt.len() - r_ft as usize;
        txt[pos] = pick_filler(corr, n_terminals, rng);
    }
    false
}

fn apply_correlation(
    txt: &mut [TerminalId],
    family: TaskFamily,
    operand2: u16,
    corr: &CorrelationSpec,
    correlated: bool,
    n_terminals: usize,
    rng: &mut Rng,
) -> Result<bool, DataError> {
    if n_terminals < 3 {
        return Err(DataError::TooFewTerminals);
    }
    let ok = match family {
        TaskFamily::Count => {
            if correlated {
                enforce_count_offset(txt, corr, operand2 as usize, n_terminals, rng)
            } else {
                break_count_offset(txt, corr, operand2 as usize, n_terminals, rng)
            }
        }
        TaskFamily::IndexOf => {
            if correlated {
                enforce_index_offset(txt, corr, operand2, n_terminals, rng)
            } else {
                break_index_offset(txt, corr, operand2, n_terminals, rng)
            }
        }
        other => return Err(DataError::UnsupportedCorrelation { family: other }),
    };
    Ok(ok)
}

/// Texts drawn from the grammar and edited so that a fraction `c` of them
/// satisfies the spurious offset exactly and the rest are guaranteed not to.
/// Each returned text is answerable for both operands of the task family.
pub fn correlated_texts(
    grammar: &Grammar,
    family: TaskFamily,
    operand2: u16,
    corr: &CorrelationSpec,
    c: f64,
    n: usize,
    rng: &Rng,
    txt_len: usize,
) -> Result<Vec<(Vec<TerminalId>, bool)>, DataError> {
    let n_terminals = grammar.n_terminals();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut srng = rng.split(i as u64);
        let correlated = srng.chance(c);
        let mut done = false;
        for _ in 0..MAX_SAMPLE_RETRIES {
            let mut txt = grammar.sample_string(&mut srng, txt_len)?.tokens;
            if !apply_correlation(
                &mut txt,
                family,
                operand2,
                corr,
                correlated,
                n_terminals,
                &mut srng,
            )? {
                continue;
            }
            // Both operands must yield answers, and the partition must be
            // exact.
            let ans_ft = task_oracle(family, Some(corr.o_ft), operand2, &txt);
            let ans_pt = task_oracle(family, Some(corr.o_pt), operand2, &txt);
            if ans_ft.is_none() || ans_pt.is_none() {
                continue;
            }
            debug_assert_eq!(corr.holds(family, operand2, &txt), correlated);
            out.push((txt, correlated));
            done = true;
            break;
        }
        if !done {
            return Err(DataError::RetriesExhausted {
                what: "correlated text",
            });
        }
    }
    Ok(out)
}

fn base_provenance(
    kind: &str,
    grammar: &Grammar,
    task: &TaskSpec,
    corr: &CorrelationSpec,
    c: f64,
    n: usize,
    seed: u64,
    txt_len: usize,
    context_len: usize,
) -> Provenance {
    let mut p = Provenance::new(kind);
    p.push("grammar_hash", format!("{:016x}", grammar.content_hash()));
    p.push("task", task);
    p.push("o_pt", corr.o_pt);
    p.push("o_ft", corr.o_ft);
    p.push("offset_q", corr.offset_q);
    p.push("c", c);
    p.push("n", n);
    p.push("seed", seed);
    p.push("txt_len", txt_len);
    p.push("context_len", context_len);
    p
}

/// Fine-tuning dataset for a single task with a controlled correlated
/// fraction `corr.c_tr`. Labels are recomputed after editing.
pub fn finetune_dataset(
    grammar: &Grammar,
    vocab: &Vocabulary,
    task: &TaskSpec,
    corr: &CorrelationSpec,
    n: usize,
    seed: u64,
    txt_len: usize,
    context_len: usize,
) -> Result<Dataset, DataError> {
    assert!(n >= 1);
    assert_eq!(
        task.operand,
        Some(corr.o_ft),
        "fine-tuning task operand must be the correlation's o_ft"
    );
    dataset_for_task(
        grammar,
        vocab,
        task,
        corr,
        corr.c_tr,
        n,
        seed,
        txt_len,
        context_len,
        "finetune",
    )
}

/// Dataset of texts with correlation level `c`, encoded and labeled for
/// `task` (which may be either the fine-tuning or the pretraining task).
#[allow(clippy::too_many_arguments)]
pub fn dataset_for_task(
    grammar: &Grammar,
    vocab: &Vocabulary,
    task: &TaskSpec,
    corr: &CorrelationSpec,
    c: f64,
    n: usize,
    seed: u64,
    txt_len: usize,
    context_len: usize,
    kind: &str,
) -> Result<Dataset, DataError> {
    let rng = Rng::new(seed);
    let texts = correlated_texts(grammar, task.family, task.operand2, corr, c, n, &rng, txt_len)?;
    let mut samples = Vec::with_capacity(n);
    for (txt, correlated) in texts {
        let answer = task_oracle(task.family, task.operand, task.operand2, &txt)
            .expect("correlated_texts guarantees answerability");
        samples.push(encode_sample(
            task,
            vocab,
            &txt,
            answer,
            context_len,
            correlated,
        )?);
    }
    let provenance = base_provenance(
        kind,
        grammar,
        task,
        corr,
        c,
        n,
        seed,
        txt_len,
        context_len,
    );
    Ok(Dataset {
        samples,
        provenance,
    })
}

/// The two evaluation sets: without (`c = 0`) and with (`c = 1`) the
/// spurious correlation.
#[allow(clippy::too_many_arguments)]
pub fn eval_sets(
    grammar: &Grammar,
    vocab: &Vocabulary,
    task: &TaskSpec,
    corr: &CorrelationSpec,
    n: usize,
    seed: u64,
    txt_len: usize,
    context_len: usize,
) -> Result<(Dataset, Dataset), DataError> {
    let c0 = dataset_for_task(
        grammar,
        vocab,
        task,
        corr,
        0.0,
        n,
        seed,
        txt_len,
        context_len,
        "eval_c0",
    )?;
    let c1 = dataset_for_task(
        grammar,
        vocab,
        task,
        corr,
        1.0,
        n,
        seed ^ 0x9E3779B97F4A7C15,
        txt_len,
        context_len,
        "eval_c1",
    )?;
    Ok((c0, c1))
}

/// Natural (unedited) samples for a task, used for pretraining-distribution
/// evaluation and reverse fine-tuning data.
pub fn natural_dataset(
    grammar: &Grammar,
    vocab: &Vocabulary,
    task: &TaskSpec,
    n: usize,
    seed: u64,
    txt_len: usize,
    context_len: usize,
) -> Result<Dataset, DataError> {
    let rng = Rng::new(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut srng = rng.split(i as u64);
        let mut made = false;
        for _ in 0..MAX_SAMPLE_RETRIES {
            let txt = grammar.sample_string(&mut srng, txt_len)?.tokens;
            if let Some(answer) = task_oracle(task.family, task.operand, task.operand2, &txt) {
                samples.push(encode_sample(
                    task,
                    vocab,
                    &txt,
                    answer,
                    context_len,
                    false,
                )?);
                made = true;
                break;
            }
        }
        if !made {
            return Err(DataError::RetriesExhausted {
                what: "natural sample",
            });
        }
    }
    let mut provenance = Provenance::new("natural");
    provenance.push("grammar_hash", format!("{:016x}", grammar.content_hash()));
    provenance.push("task", task);
    provenance.push("n", n);
    provenance.push("seed", seed);
    provenance.push("txt_len", txt_len);
    provenance.push("context_len", context_len);
    Ok(Dataset {
        samples,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Pretraining stream

/// One entry in the pretraining task mix. `fixed_operand` pins the operand
/// (jailbreak aliases are paired with a single operand); otherwise the
/// operand is drawn from the sampling prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyChoice {
    pub family: TaskFamily,
    pub alias: FamilyAlias,
    pub fixed_operand: Option<TerminalId>,
}

impl FamilyChoice {
    pub fn plain(family: TaskFamily) -> FamilyChoice {
        FamilyChoice {
            family,
            alias: FamilyAlias::Plain,
            fixed_operand: None,
        }
    }
}

/// Endless, seed-deterministic iterator of pretraining samples: the family
/// token is uniform over the configured mix and operands follow the prior.
pub struct PretrainStream {
    grammar: Grammar,
    vocab: Vocabulary,
    families: Vec<FamilyChoice>,
    prior: SamplingPrior,
    txt_len: usize,
    context_len: usize,
    root: Rng,
    counter: u64,
}

impl PretrainStream {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grammar: Grammar,
        vocab: Vocabulary,
        families: Vec<FamilyChoice>,
        prior: SamplingPrior,
        seed: u64,
        txt_len: usize,
        context_len: usize,
    ) -> PretrainStream {
        assert!(!families.is_empty());
        assert_eq!(
            prior.probabilities.len(),
            grammar.n_terminals(),
            "prior arity must match grammar terminals"
        );
        PretrainStream {
            grammar,
            vocab,
            families,
            prior,
            txt_len,
            context_len,
            root: Rng::new(seed),
            counter: 0,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn make(&self, index: u64) -> EncodedSample {
        let mut rng = self.root.split(index);
        let choice = self.families[rng.usize_below(self.families.len())];
        let mut operand = match (choice.family, choice.fixed_operand) {
            (TaskFamily::TokenAt, _) => None,
            (_, Some(t)) => Some(t),
            (_, None) => Some(self.prior.draw(&mut rng)),
        };
        let mut task = TaskSpec {
            family: choice.family,
            operand,
            operand2: choice.family.default_operand2(),
            alias: choice.alias,
        };
        for attempt in 0..MAX_SAMPLE_RETRIES {
            // Some family/operand pairs may be unanswerable under the
            // grammar (a rare operand may never form the required pattern);
            // redraw the operand rather than stall, keeping the family mix
            // uniform.
            if attempt >= 10 && choice.fixed_operand.is_none() && operand.is_some() {
                operand = Some(self.prior.draw(&mut rng));
                task.operand = operand;
            }
            let txt = self
                .grammar
                .sample_string(&mut rng, self.txt_len)
                .expect("grammar covers txt_len")
                .tokens;
            if let Some(answer) = task_oracle(task.family, task.operand, task.operand2, &txt) {
                return encode_sample(&task, &self.vocab, &txt, answer, self.context_len, false)
                    .expect("context_len covers txt_len");
            }
        }
        panic!("pretraining sample retries exhausted");
    }
}

impl Iterator for PretrainStream {
    type Item = EncodedSample;

    fn next(&mut self) -> Option<EncodedSample> {
        let s = self.make(self.counter);
        self.counter += 1;
        Some(s)
    }
}

// ---------------------------------------------------------------------------
// Compiled-model task inputs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracrTask {
    Counter,
    MaxElement,
}

pub const COUNTER_ALPHABET: usize = 9;
pub const MAX_ELEMENT_ALPHABET: usize = 26;

/// Random input for a compiled task: the counter draws letters uniformly
/// with replacement from the first nine letters; max-element draws without
/// replacement from all 26 so the ranking is duplicate-free.
pub fn tracr_input(task: TracrTask, len: usize, rng: &mut Rng) -> Result<Vec<u16>, DataError> {
    match task {
        TracrTask::Counter => Ok((0..len)
            .map(|_| rng.below(COUNTER_ALPHABET as u64) as u16)
            .collect()),
        TracrTask::MaxElement => {
            if len > MAX_ELEMENT_ALPHABET {
                return Err(DataError::MaxLenOverflow {
                    len,
                    alphabet: MAX_ELEMENT_ALPHABET,
                });
            }
            let mut letters: Vec<u16> = (0..MAX_ELEMENT_ALPHABET as u16).collect();
            rng.shuffle(&mut letters);
            letters.truncate(len);
            Ok(letters)
        }
    }
}

/// One labeled sample for fine-tuning or evaluating a compiled counter:
/// plain letter tokens (no header), the count of `count_target` over the
/// whole string, and the correlation flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracrSample {
    pub tokens: Vec<u16>,
    pub answer: u32,
    pub is_correlated: bool,
}

/// Counter-task dataset over uniform random strings with the counting offset
/// enforced (or excluded) per sample, mirroring the PCFG editing but with
/// the whole string as the window.
#[allow(clippy::too_many_arguments)]
pub fn tracr_counter_dataset(
    len: usize,
    alphabet: usize,
    corr: &CorrelationSpec,
    c: f64,
    count_target: u16,
    n: usize,
    seed: u64,
) -> Result<Vec<TracrSample>, DataError> {
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.split(i as u64);
        let correlated = rng.chance(c);
        let mut made = false;
        for _ in 0..MAX_SAMPLE_RETRIES {
            let mut tokens: Vec<u16> = (0..len).map(|_| rng.below(alphabet as u64) as u16).collect();
            let ok = if correlated {
                enforce_count_offset(&mut tokens, corr, len, alphabet, &mut rng)
            } else {
                break_count_offset(&mut tokens, corr, len, alphabet, &mut rng)
            };
            if !ok {
                continue;
            }
            let answer = tokens.iter().filter(|&&t| t == count_target).count() as u32;
            out.push(TracrSample {
                tokens,
                answer,
                is_correlated: correlated,
            });
            made = true;
            break;
        }
        if !made {
            return Err(DataError::RetriesExhausted {
                what: "tracr counter sample",
            });
        }
    }
    Ok(out)
}
