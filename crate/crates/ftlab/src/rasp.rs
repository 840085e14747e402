//! Mini-RASP expressions, a reference interpreter, and the two shipped
//! program builders (counter and k-th-largest).
//!
//! Expressions are trees over `Tokens`, `Indices`, `Map`, `Select`,
//! `Aggregate`, `SelectorWidth` and `Constant`. Selectors may only feed
//! `Aggregate` / `SelectorWidth`. Values are either categorical (a class
//! over a finite domain) or numerical (a scalar); `Aggregate` averages the
//! selected values per query and yields 0 (or a zero class-mix) on an empty
//! selection.
//!
//! Both shipped programs compare against position indices with an equality
//! selector, which places their output under query position
//! [`READOUT_POS`].

use std::fmt;

/// Query position at which the shipped programs expose their answer: the
/// equality selector `value == index` fires for index 1 exactly on the
/// positions flagged 1.
pub const READOUT_POS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Eq,
    Lt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFn {
    /// 1 when the value equals the constant (numerical values are compared
    /// to the nearest integer), else 0.
    EqConst(i64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RaspExpr {
    Tokens,
    Indices,
    /// Categorical constant `value` over `domain` classes.
    Constant { value: u16, domain: usize },
    Map {
        f: MapFn,
        inner: Box<RaspExpr>,
    },
    Select {
        keys: Box<RaspExpr>,
        queries: Box<RaspExpr>,
        cmp: Comparison,
    },
    Aggregate {
        selector: Box<RaspExpr>,
        values: Box<RaspExpr>,
    },
    SelectorWidth {
        selector: Box<RaspExpr>,
    },
}

impl RaspExpr {
    pub fn node_name(&self) -> &'static str {
        match self {
            RaspExpr::Tokens => "tokens",
            RaspExpr::Indices => "indices",
            RaspExpr::Constant { .. } => "const",
            RaspExpr::Map { .. } => "map",
            RaspExpr::Select { .. } => "select",
            RaspExpr::Aggregate { .. } => "aggregate",
            RaspExpr::SelectorWidth { .. } => "width",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueKind {
    Categorical { domain: usize },
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RaspError {
    /// A `Select` node appeared outside `Aggregate`/`SelectorWidth`.
    BareSelector,
    /// `Aggregate`/`SelectorWidth` was given a non-selector expression.
    NotASelector(&'static str),
    /// A `Map` was applied to an aggregated class mixture.
    MapOverMixture,
    TokenOutOfAlphabet { token: u16, alphabet: usize },
    Parse(String),
}

impl fmt::Display for RaspError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RaspError::BareSelector => write!(f, "selector used as a value expression"),
            RaspError::NotASelector(n) => write!(f, "expected a selector, found node '{n}'"),
            RaspError::MapOverMixture => write!(f, "map applied to an aggregated mixture"),
            RaspError::TokenOutOfAlphabet { token, alphabet } => {
                write!(f, "token {token} outside alphabet of size {alphabet}")
            }
            RaspError::Parse(s) => write!(f, "program parse error: {s}"),
        }
    }
}

impl std::error::Error for RaspError {}

/// Inferred value kind of an expression; `max_len` bounds the index domain.
pub fn expr_kind(expr: &RaspExpr, alphabet: usize, max_len: usize) -> Result<ValueKind, RaspError> {
    match expr {
        RaspExpr::Tokens => Ok(ValueKind::Categorical { domain: alphabet }),
        RaspExpr::Indices => Ok(ValueKind::Categorical { domain: max_len }),
        RaspExpr::Constant { domain, .. } => Ok(ValueKind::Categorical { domain: *domain }),
        RaspExpr::Map { .. } => Ok(ValueKind::Categorical { domain: 2 }),
        RaspExpr::Select { .. } => Err(RaspError::BareSelector),
        RaspExpr::Aggregate { values, .. } => expr_kind(values, alphabet, max_len),
        RaspExpr::SelectorWidth { .. } => Ok(ValueKind::Numerical),
    }
}

/// Per-position interpreter value: a scalar, or a class mixture over the
/// expression's categorical domain (one-hot for pure values, a mean of
/// one-hots after aggregation).
#[derive(Debug, Clone, PartialEq)]
pub enum PosValue {
    Num(f64),
    Cat(Vec<f64>),
}

impl PosValue {
    /// Scalar view used by comparisons: class index for pure categoricals.
    fn scalar(&self) -> Result<f64, RaspError> {
        match self {
            PosValue::Num(x) => Ok(*x),
            PosValue::Cat(dist) => {
                // Pure one-hot only; mixtures cannot be compared.
                let mut idx = None;
                for (i, &p) in dist.iter().enumerate() {
                    if p != 0.0 {
                        if p == 1.0 && idx.is_none() {
                            idx = Some(i);
                        } else {
                            return Err(RaspError::MapOverMixture);
                        }
                    }
                }
                Ok(idx.unwrap_or(0) as f64)
            }
        }
    }

    /// Class readout: argmax with ties resolved to the lowest class;
    /// numerical values round to the nearest integer.
    pub fn readout_class(&self) -> u16 {
        match self {
            PosValue::Num(x) => x.round().max(0.0) as u16,
            PosValue::Cat(dist) => {
                let mut best = 0usize;
                for (i, &p) in dist.iter().enumerate() {
                    if p > dist[best] {
                        best = i;
                    }
                }
                best as u16
            }
        }
    }
}

/// Evaluate an expression on an input, producing one value per position.
pub fn interpret(
    expr: &RaspExpr,
    input: &[u16],
    alphabet: usize,
) -> Result<Vec<PosValue>, RaspError> {
    for &t in input {
        if t as usize >= alphabet {
            return Err(RaspError::TokenOutOfAlphabet {
                token: t,
                alphabet,
            });
        }
    }
    eval(expr, input, alphabet)
}

fn eval(expr: &RaspExpr, input: &[u16], alphabet: usize) -> Result<Vec<PosValue>, RaspError> {
    let n = input.len();
    match expr {
        RaspExpr::Tokens => Ok(input
            .iter()
            .map(|&t| {
                let mut one = vec![0.0; alphabet];
                one[t as usize] = 1.0;
                PosValue::Cat(one)
            })
            .collect()),
        RaspExpr::Indices => Ok((0..n)
            .map(|i| {
                let mut one = vec![0.0; n.max(1)];
                one[i] = 1.0;
                PosValue::Cat(one)
            })
            .collect()),
        RaspExpr::Constant { value, domain } => Ok((0..n)
            .map(|_| {
                let mut one = vec![0.0; *domain];
                one[*value as usize] = 1.0;
                PosValue::Cat(one)
            })
            .collect()),
        RaspExpr::Map { f, inner } => {
            let vals = eval(inner, input, alphabet)?;
            vals.iter()
                .map(|v| {
                    let x = v.scalar()?;
                    let hit = match f {
                        MapFn::EqConst(c) => (x - *c as f64).abs() < 0.5,
                    };
                    let mut one = vec![0.0; 2];
                    one[hit as usize] = 1.0;
                    Ok(PosValue::Cat(one))
                })
                .collect()
        }
        RaspExpr::Select { .. } => Err(RaspError::BareSelector),
        RaspExpr::Aggregate { selector, values } => {
            let matrix = eval_selector(selector, input, alphabet)?;
            let vals = eval(values, input, alphabet)?;
            let kind_num = vals.iter().any(|v| matches!(v, PosValue::Num(_)));
            (0..n)
                .map(|q| {
                    let selected: Vec<usize> =
                        (0..n).filter(|&k| matrix[q * n + k]).collect();
                    if kind_num {
                        let mean = if selected.is_empty() {
                            0.0
                        } else {
                            selected
                                .iter()
                                .map(|&k| match &vals[k] {
                                    PosValue::Num(x) => *x,
                                    PosValue::Cat(_) => unreachable!(),
                                })
                                .sum::<f64>()
                                / selected.len() as f64
                        };
                        Ok(PosValue::Num(mean))
                    } else {
                        let domain = match &vals[0] {
                            PosValue::Cat(d) => d.len(),
                            _ => 1,
                        };
                        let mut mix = vec![0.0; domain];
                        if !selected.is_empty() {
                            for &k in &selected {
                                if let PosValue::Cat(d) = &vals[k] {
                                    for (m, &p) in mix.iter_mut().zip(d) {
                                        *m += p;
                                    }
                                }
                            }
                            for m in &mut mix {
                                *m /= selected.len() as f64;
                            }
                        }
                        Ok(PosValue::Cat(mix))
                    }
                })
                .collect()
        }
        RaspExpr::SelectorWidth { selector } => {
            let matrix = eval_selector(selector, input, alphabet)?;
            Ok((0..n)
                .map(|q| {
                    PosValue::Num((0..n).filter(|&k| matrix[q * n + k]).count() as f64)
                })
                .collect())
        }
    }
}

/// Boolean selection matrix, row-major `[query][key]`.
pub fn eval_selector(
    expr: &RaspExpr,
    input: &[u16],
    alphabet: usize,
) -> Result<Vec<bool>, RaspError> {
    let RaspExpr::Select { keys, queries, cmp } = expr else {
        return Err(RaspError::NotASelector(expr.node_name()));
    };
    let n = input.len();
    let kv = eval(keys, input, alphabet)?;
    let qv = eval(queries, input, alphabet)?;
    let kscal: Vec<f64> = kv.iter().map(|v| v.scalar()).collect::<Result<_, _>>()?;
    let qscal: Vec<f64> = qv.iter().map(|v| v.scalar()).collect::<Result<_, _>>()?;
    let mut m = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            m[q * n + k] = match cmp {
                Comparison::Eq => (kscal[k] - qscal[q]).abs() < 0.5,
                Comparison::Lt => kscal[k] < qscal[q],
            };
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Program builders

/// Counting program: binarize tokens against the target, select positions
/// whose flag equals the index value, count them, then broadcast the count
/// through an identity aggregate.
pub fn build_counter(target: u16) -> RaspExpr {
    let bin = RaspExpr::Map {
        f: MapFn::EqConst(target as i64),
        inner: Box::new(RaspExpr::Tokens),
    };
    let bin_idx = RaspExpr::Select {
        keys: Box::new(bin),
        queries: Box::new(RaspExpr::Indices),
        cmp: Comparison::Eq,
    };
    let count = RaspExpr::SelectorWidth {
        selector: Box::new(bin_idx),
    };
    let idx_select = RaspExpr::Select {
        keys: Box::new(RaspExpr::Indices),
        queries: Box::new(RaspExpr::Indices),
        cmp: Comparison::Eq,
    };
    RaspExpr::Aggregate {
        selector: Box::new(idx_select),
        values: Box::new(count),
    }
}

/// k-th-largest program under the ordering a > b > c > ...: count, for every
/// position, the tokens ranked above it; the k-th largest has exactly k-1 of
/// them; read that token out through an index-equality selector.
pub fn build_kth_largest(k: usize) -> RaspExpr {
    assert!(k >= 1, "k must be at least 1");
    let var_small = RaspExpr::Select {
        keys: Box::new(RaspExpr::Tokens),
        queries: Box::new(RaspExpr::Tokens),
        cmp: Comparison::Lt,
    };
    let sum_small = RaspExpr::SelectorWidth {
        selector: Box::new(var_small),
    };
    let bin_target = RaspExpr::Map {
        f: MapFn::EqConst(k as i64 - 1),
        inner: Box::new(sum_small),
    };
    let select_idx = RaspExpr::Select {
        keys: Box::new(bin_target),
        queries: Box::new(RaspExpr::Indices),
        cmp: Comparison::Eq,
    };
    RaspExpr::Aggregate {
        selector: Box::new(select_idx),
        values: Box::new(RaspExpr::Tokens),
    }
}

/// Class answer of a program on an input: the readout-position value.
pub fn program_answer(expr: &RaspExpr, input: &[u16], alphabet: usize) -> Result<u16, RaspError> {
    let vals = interpret(expr, input, alphabet)?;
    Ok(vals[READOUT_POS.min(vals.len().saturating_sub(1))].readout_class())
}

// ---------------------------------------------------------------------------
// Textual program IR

pub fn print_program(expr: &RaspExpr) -> String {
    match expr {
        RaspExpr::Tokens => "(tokens)".into(),
        RaspExpr::Indices => "(indices)".into(),
        RaspExpr::Constant { value, domain } => format!("(const {value} {domain})"),
        RaspExpr::Map { f, inner } => {
            let MapFn::EqConst(c) = f;
            format!("(map (eq {c}) {})", print_program(inner))
        }
        RaspExpr::Select { keys, queries, cmp } => format!(
            "(select {} {} {})",
            print_program(keys),
            print_program(queries),
            match cmp {
                Comparison::Eq => "eq",
                Comparison::Lt => "lt",
            }
        ),
        RaspExpr::Aggregate { selector, values } => format!(
            "(aggregate {} {})",
            print_program(selector),
            print_program(values)
        ),
        RaspExpr::SelectorWidth { selector } => {
            format!("(width {})", print_program(selector))
        }
    }
}

pub fn parse_program(text: &str) -> Result<RaspExpr, RaspError> {
    let tokens = lex(text)?;
    let mut pos = 0usize;
    let expr = parse_expr(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(RaspError::Parse("trailing tokens".into()));
    }
    Ok(expr)
}

fn lex(text: &str) -> Result<Vec<String>, RaspError> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

fn expect(tokens: &[String], pos: &mut usize, what: &str) -> Result<String, RaspError> {
    let t = tokens
        .get(*pos)
        .ok_or_else(|| RaspError::Parse(format!("expected {what}, found end")))?;
    *pos += 1;
    Ok(t.clone())
}

fn parse_expr(tokens: &[String], pos: &mut usize) -> Result<RaspExpr, RaspError> {
    let open = expect(tokens, pos, "'('")?;
    if open != "(" {
        return Err(RaspError::Parse(format!("expected '(', found '{open}'")));
    }
    let head = expect(tokens, pos, "node name")?;
    let expr = match head.as_str() {
        "tokens" => RaspExpr::Tokens,
        "indices" => RaspExpr::Indices,
        "const" => {
            let value = expect(tokens, pos, "value")?
                .parse()
                .map_err(|_| RaspError::Parse("bad const value".into()))?;
            let domain = expect(tokens, pos, "domain")?
                .parse()
                .map_err(|_| RaspError::Parse("bad const domain".into()))?;
            RaspExpr::Constant { value, domain }
        }
        "map" => {
            let open2 = expect(tokens, pos, "'('")?;
            let kind = expect(tokens, pos, "map fn")?;
            if open2 != "(" || kind != "eq" {
                return Err(RaspError::Parse("only (eq N) maps are supported".into()));
            }
            let c: i64 = expect(tokens, pos, "constant")?
                .parse()
                .map_err(|_| RaspError::Parse("bad map constant".into()))?;
            let close = expect(tokens, pos, "')'")?;
            if close != ")" {
                return Err(RaspError::Parse("unclosed map fn".into()));
            }
            let inner = parse_expr(tokens, pos)?;
            RaspExpr::Map {
                f: MapFn::EqConst(c),
                inner: Box::new(inner),
            }
        }
        "select" => {
            let keys = parse_expr(tokens, pos)?;
            let queries = parse_expr(tokens, pos)?;
            let cmp = match expect(tokens, pos, "comparison")?.as_str() {
                "eq" => Comparison::Eq,
                "lt" => Comparison::Lt,
                other => {
                    return Err(RaspError::Parse(format!("unknown comparison '{other}'")))
                }
            };
            RaspExpr::Select {
                keys: Box::new(keys),
                queries: Box::new(queries),
                cmp,
            }
        }
        "aggregate" => {
            let selector = parse_expr(tokens, pos)?;
            let values = parse_expr(tokens, pos)?;
            RaspExpr::Aggregate {
                selector: Box::new(selector),
                values: Box::new(values),
            }
        }
        "width" => {
            let selector = parse_expr(tokens, pos)?;
            RaspExpr::SelectorWidth {
                selector: Box::new(selector),
            }
        }
        other => return Err(RaspError::Parse(format!("unknown node '{other}'"))),
    };
    let close = expect(tokens, pos, "')'")?;
    if close != ")" {
        return Err(RaspError::Parse(format!("expected ')', found '{close}'")));
    }
    Ok(expr)
}
