//! Probabilistic context-free grammars and string sampling.
//!
//! A [`GrammarSpec`] lists nonterminals, terminals and weighted productions.
//! Sampling derives a full string by repeatedly expanding the leftmost
//! nonterminal, choosing productions by their probabilities, then subsamples
//! a contiguous window of the requested length at a uniformly random offset
//! so tokens near the start of a derivation are not over-represented.
//!
//! Only generation is supported; the crate never parses strings back against
//! a grammar.

use crate::rng::Rng;
use std::fmt;

/// Grammar-local terminal index (not a vocabulary token id).
pub type TerminalId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Nonterminal(u16),
    Terminal(TerminalId),
}

#[derive(Debug, Clone)]
pub struct Production {
    pub parent: u16,
    pub children: Vec<Symbol>,
    pub probability: f64,
}

/// Raw, unvalidated grammar description.
#[derive(Debug, Clone)]
pub struct GrammarSpec {
    pub nonterminal_names: Vec<String>,
    pub terminal_names: Vec<String>,
    pub root: u16,
    pub productions: Vec<Production>,
    /// Derivation depth cap; expansions deeper than this are rejected.
    pub max_depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BadProbability { production: usize, value: f64 },
    ProbabilitySum { nonterminal: u16, sum: f64 },
    NoProductions { nonterminal: u16 },
    UndeclaredChild { production: usize },
    BadRoot,
    Unreachable { nonterminal: u16 },
    NonTerminating { nonterminal: u16 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadProbability { production, value } => {
                write!(f, "production {production} has invalid probability {value}")
            }
            Violation::ProbabilitySum { nonterminal, sum } => {
                // Round away float noise so reports read "sum to 0.9".
                let rounded = (sum * 1e9).round() / 1e9;
                write!(f, "nonterminal {nonterminal}: probabilities sum to {rounded}")
            }
            Violation::NoProductions { nonterminal } => {
                write!(f, "nonterminal {nonterminal} has no productions")
            }
            Violation::UndeclaredChild { production } => {
                write!(f, "production {production} references an undeclared symbol")
            }
            Violation::BadRoot => write!(f, "root is not a declared nonterminal"),
            Violation::Unreachable { nonterminal } => {
                write!(f, "nonterminal {nonterminal} is unreachable from root")
            }
            Violation::NonTerminating { nonterminal } => {
                write!(
                    f,
                    "nonterminal {nonterminal} is non-terminating: cannot derive a terminal-only string within max_depth"
                )
            }
        }
    }
}

const PROB_SUM_TOL: f64 = 1e-9;

/// Report-style validation; an empty list means the grammar is usable.
pub fn validate_grammar(spec: &GrammarSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let n_nt = spec.nonterminal_names.len() as u16;
    let n_t = spec.terminal_names.len() as u16;

    if spec.root >= n_nt {
        out.push(Violation::BadRoot);
    }
    for (i, p) in spec.productions.iter().enumerate() {
        if !(p.probability.is_finite() && (0.0..=1.0).contains(&p.probability)) {
            out.push(Violation::BadProbability {
                production: i,
                value: p.probability,
            });
        }
        let declared = p.parent < n_nt
            && p.children.iter().all(|c| match c {
                Symbol::Nonterminal(id) => *id < n_nt,
                Symbol::Terminal(id) => *id < n_t,
            });
        if !declared {
            out.push(Violation::UndeclaredChild { production: i });
        }
    }
    if !out.is_empty() {
        // Structural problems make the remaining checks meaningless.
        return out;
    }

    for nt in 0..n_nt {
        let sum: f64 = spec
            .productions
            .iter()
            .filter(|p| p.parent == nt)
            .map(|p| p.probability)
            .sum();
        if spec.productions.iter().all(|p| p.parent != nt) {
            out.push(Violation::NoProductions { nonterminal: nt });
        } else if (sum - 1.0).abs() > PROB_SUM_TOL {
            out.push(Violation::ProbabilitySum {
                nonterminal: nt,
                sum,
            });
        }
    }

    // Reachability from the root.
    let mut reachable = vec![false; n_nt as usize];
    let mut stack = vec![spec.root];
    reachable[spec.root as usize] = true;
    while let Some(nt) = stack.pop() {
        for p in spec.productions.iter().filter(|p| p.parent == nt) {
            for c in &p.children {
                if let Symbol::Nonterminal(id) = c {
                    if !reachable[*id as usize] {
                        reachable[*id as usize] = true;
                        stack.push(*id);
                    }
                }
            }
        }
    }
    for nt in 0..n_nt {
        if !reachable[nt as usize] {
            out.push(Violation::Unreachable { nonterminal: nt });
        }
    }

    // Minimum depth at which each nonterminal derives a terminal-only string.
    let depths = min_terminal_depths(spec);
    for nt in 0..n_nt {
        if depths[nt as usize] > spec.max_depth {
            out.push(Violation::NonTerminating { nonterminal: nt });
        }
    }
    out
}

/// Fixpoint computation of the minimum expansion depth needed for each
/// nonterminal to reach an all-terminal string. Terminals cost 0; applying a
/// production costs 1 plus the deepest child.
fn min_terminal_depths(spec: &GrammarSpec) -> Vec<u32> {
    let n_nt = spec.nonterminal_names.len();
    let mut depth = vec![u32::MAX; n_nt];
    loop {
        let mut changed = false;
        for p in &spec.productions {
            let mut worst: u32 = 0;
            let mut ok = true;
            for c in &p.children {
                match c {
                    Symbol::Terminal(_) => {}
                    Symbol::Nonterminal(id) => {
                        let d = depth[*id as usize];
                        if d == u32::MAX {
                            ok = false;
                            break;
                        }
                        worst = worst.max(d);
                    }
                }
            }
            if ok {
                let cand = worst.saturating_add(1);
                if cand < depth[p.parent as usize] {
                    depth[p.parent as usize] = cand;
                    changed = true;
                }
            }
        }
        if !changed {
            return depth;
        }
    }
}

/// One generated string: grammar-local terminal ids plus the fingerprint of
/// the generator state that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawString {
    pub tokens: Vec<TerminalId>,
    pub source_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GrammarError {
    Invalid(Vec<Violation>),
    /// Every re-derivation attempt fell short of the requested window length.
    TargetLenUnreachable { target_len: usize, attempts: u32 },
}

impl fmt::Display for GrammarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrammarError::Invalid(v) => {
                write!(f, "invalid grammar ({} violations): ", v.len())?;
                for (i, violation) in v.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(f, "{violation}")?;
                }
                Ok(())
            }
            GrammarError::TargetLenUnreachable {
                target_len,
                attempts,
            } => write!(
                f,
                "grammar never produced a string of length >= {target_len} in {attempts} attempts"
            ),
        }
    }
}

impl std::error::Error for GrammarError {}

/// Validated grammar ready for sampling. Construction precomputes per-symbol
/// derivation depths so sampling can honor `max_depth` exactly.
#[derive(Debug, Clone)]
pub struct Grammar {
    spec: GrammarSpec,
    min_depth: Vec<u32>,
    /// Production indices grouped by parent, in declaration order.
    by_parent: Vec<Vec<usize>>,
    pub max_retries: u32,
}

pub const DEFAULT_MAX_RETRIES: u32 = 100;

impl Grammar {
    pub fn new(spec: GrammarSpec) -> Result<Grammar, GrammarError> {
        let violations = validate_grammar(&spec);
        if !violations.is_empty() {
            return Err(GrammarError::Invalid(violations));
        }
        let min_depth = min_terminal_depths(&spec);
        let mut by_parent = vec![Vec::new(); spec.nonterminal_names.len()];
        for (i, p) in spec.productions.iter().enumerate() {
            by_parent[p.parent as usize].push(i);
        }
        Ok(Grammar {
            spec,
            min_depth,
            by_parent,
            max_retries: DEFAULT_MAX_RETRIES,
        })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn n_terminals(&self) -> usize {
        self.spec.terminal_names.len()
    }

    /// Fingerprint of the grammar content, stored in dataset provenance.
    pub fn content_hash(&self) -> u64 {
        crate::rng::fnv1a(self.to_dsl().as_bytes())
    }

    /// Expand the root to a full terminal string, recording each production
    /// choice when `trace` is provided. Expansion is leftmost-first so leaf
    /// order equals left-to-right concatenation order.
    fn derive_full(&self, rng: &mut Rng, mut trace: Option<&mut Vec<usize>>) -> Vec<TerminalId> {
        let mut out = Vec::with_capacity(512);
        // Stack of (symbol, depth); leftmost symbol on top.
        let mut stack: Vec<(Symbol, u32)> = vec![(Symbol::Nonterminal(self.spec.root), 0)];
        let mut probs: Vec<f64> = Vec::with_capacity(4);
        let mut eligible: Vec<usize> = Vec::with_capacity(4);
        while let Some((sym, depth)) = stack.pop() {
            match sym {
                Symbol::Terminal(t) => out.push(t),
                Symbol::Nonterminal(nt) => {
                    let remaining = self.spec.max_depth - depth;
                    eligible.clear();
                    probs.clear();
                    for &pi in &self.by_parent[nt as usize] {
                        let p = &self.spec.productions[pi];
                        // A production is usable only if all its nonterminal
                        // children can still finish within the depth budget.
                        let fits = p.children.iter().all(|c| match c {
                            Symbol::Terminal(_) => true,
                            Symbol::Nonterminal(id) => {
                                self.min_depth[*id as usize] < remaining
                            }
                        });
                        if fits && p.probability > 0.0 {
                            eligible.push(pi);
                            probs.push(p.probability);
                        }
                    }
                    // Validation guarantees at least one production fits.
                    let pick = eligible[rng.weighted(&probs)];
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(pick);
                    }
                    let children = &self.spec.productions[pick].children;
                    for c in children.iter().rev() {
                        stack.push((*c, depth + 1));
                    }
                }
            }
        }
        out
    }

    /// Root-to-terminal tree traversal followed by a uniform subsample of a
    /// contiguous `target_len`-token window. Re-derives (bounded retries) if
    /// the full string is shorter than the window.
    pub fn sample_string(
        &self,
        rng: &mut Rng,
        target_len: usize,
    ) -> Result<RawString, GrammarError> {
        self.sample_string_traced(rng, target_len, None)
    }

    pub fn sample_string_traced(
        &self,
        rng: &mut Rng,
        target_len: usize,
        mut trace: Option<&mut Vec<usize>>,
    ) -> Result<RawString, GrammarError> {
        assert!(target_len >= 1, "target_len must be positive");
        let source_seed = rng.split(0).next_u64();
        for _ in 0..self.max_retries {
            let full = self.derive_full(rng, trace.as_deref_mut());
            if full.len() >= target_len {
                let start = rng.usize_below(full.len() - target_len + 1);
                return Ok(RawString {
                    tokens: full[start..start + target_len].to_vec(),
                    source_seed,
                });
            }
        }
        Err(GrammarError::TargetLenUnreachable {
            target_len,
            attempts: self.max_retries,
        })
    }

    /// Render the grammar in the DSL accepted by [`Grammar::from_dsl`].
    pub fn to_dsl(&self) -> String {
        let mut s = String::new();
        s.push_str("pcfg v1\n");
        s.push_str(&format!("max_depth {}\n", self.spec.max_depth));
        s.push_str("terminals");
        for t in &self.spec.terminal_names {
            s.push(' ');
            s.push_str(t);
        }
        s.push('\n');
        s.push_str(&format!(
            "root {}\n",
            self.spec.nonterminal_names[self.spec.root as usize]
        ));
        for p in &self.spec.productions {
            s.push_str(&self.spec.nonterminal_names[p.parent as usize]);
            s.push_str(" ->");
            for c in &p.children {
                s.push(' ');
                match c {
                    Symbol::Nonterminal(id) => {
                        s.push_str(&self.spec.nonterminal_names[*id as usize])
                    }
                    Symbol::Terminal(id) => s.push_str(&self.spec.terminal_names[*id as usize]),
                }
            }
            s.push_str(&format!(" @ {}\n", p.probability));
        }
        s
    }

    /// Parse the grammar DSL. Files failing validation are rejected.
    ///
    /// ```text
    /// pcfg v1
    /// max_depth 16
    /// terminals a b c
    /// root S
    /// S -> A B @ 0.5
    /// S -> B A A @ 0.5
    /// ...
    /// ```
    pub fn from_dsl(text: &str) -> Result<Grammar, String> {
        let mut max_depth: u32 = 16;
        let mut terminals: Vec<String> = Vec::new();
        let mut root_name: Option<String> = None;
        let mut raw_rules: Vec<(String, Vec<String>, f64)> = Vec::new();

        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            match head {
                "pcfg" => {
                    let ver = parts.next().unwrap_or("");
                    if ver != "v1" {
                        return Err(format!("line {}: unsupported version {ver}", ln + 1));
                    }
                }
                "max_depth" => {
                    max_depth = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| format!("line {}: bad max_depth", ln + 1))?;
                }
                "terminals" => {
                    terminals = parts.map(str::to_string).collect();
                    if terminals.is_empty() {
                        return Err(format!("line {}: empty terminals", ln + 1));
                    }
                }
                "root" => {
                    root_name = Some(
                        parts
                            .next()
                            .ok_or_else(|| format!("line {}: missing root", ln + 1))?
                            .to_string(),
                    );
                }
                lhs => {
                    let rest: Vec<&str> = parts.collect();
                    let arrow = rest
                        .first()
                        .filter(|s| **s == "->")
                        .ok_or_else(|| format!("line {}: expected '->'", ln + 1))?;
                    let _ = arrow;
                    let at = rest
                        .iter()
                        .position(|s| *s == "@")
                        .ok_or_else(|| format!("line {}: expected '@ prob'", ln + 1))?;
                    let children: Vec<String> =
                        rest[1..at].iter().map(|s| s.to_string()).collect();
                    if children.is_empty() {
                        return Err(format!("line {}: empty production body", ln + 1));
                    }
                    let prob: f64 = rest
                        .get(at + 1)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| format!("line {}: bad probability", ln + 1))?;
                    raw_rules.push((lhs.to_string(), children, prob));
                }
            }
        }

        let root_name = root_name.ok_or("missing 'root' declaration")?;
        // Nonterminals are declared implicitly by appearing on a left-hand side.
        let mut nt_names: Vec<String> = Vec::new();
        for (lhs, _, _) in &raw_rules {
            if !nt_names.contains(lhs) {
                nt_names.push(lhs.clone());
            }
        }
        let nt_index = |name: &str| nt_names.iter().position(|n| n == name);
        let t_index = |name: &str| terminals.iter().position(|n| n == name);
        let root = nt_index(&root_name).ok_or("root has no productions")? as u16;

        let mut productions = Vec::with_capacity(raw_rules.len());
        for (lhs, children, prob) in &raw_rules {
            let parent = nt_index(lhs).unwrap() as u16;
            let mut syms = Vec::with_capacity(children.len());
            for c in children {
                if let Some(t) = t_index(c) {
                    syms.push(Symbol::Terminal(t as u16));
                } else if let Some(nt) = nt_index(c) {
                    syms.push(Symbol::Nonterminal(nt as u16));
                } else {
                    return Err(format!("undeclared symbol '{c}'"));
                }
            }
            productions.push(Production {
                parent,
                children: syms,
                probability: *prob,
            });
        }

        let spec = GrammarSpec {
            nonterminal_names: nt_names,
            terminal_names: terminals,
            root,
            productions,
            max_depth,
        };
        Grammar::new(spec).map_err(|e| e.to_string())
    }
}

/// Default grammar over terminals {a, b, c}.
///
/// The published rule set exists only as a figure, so this stand-in keeps
/// the statistical properties the experiments depend on: two productions
/// per nonterminal at probability 0.5 each and child arity 2-3. The
/// second-to-last level alternates letter blocks with filler blocks, so
/// window counts of `a` and `b` swing widely but track each other (their
/// difference stays small, which keeps correlated and uncorrelated label
/// histograms close and correlation edits minimal); the two letters have
/// equal marginal frequency by symmetry, and `c` fillers are plentiful for
/// the correlation editor. Seven nonterminal levels keep derivations well
/// above the subsampling windows used for training data.
pub fn default_grammar() -> Grammar {
    Grammar::from_dsl(DEFAULT_GRAMMAR_DSL).expect("builtin grammar is valid")
}

pub const DEFAULT_GRAMMAR_DSL: &str = "\
pcfg v1
max_depth 16
terminals a b c
root S
S -> A1 A2 @ 0.5
S -> A2 A1 A1 @ 0.5
A1 -> B1 B2 B1 @ 0.5
A1 -> B2 B1 @ 0.5
A2 -> B2 B1 B2 @ 0.5
A2 -> B1 B2 @ 0.5
B1 -> C1 C2 @ 0.5
B1 -> C2 C1 C1 @ 0.5
B2 -> C2 C1 @ 0.5
B2 -> C1 C2 C2 @ 0.5
C1 -> D1 D2 D1 @ 0.5
C1 -> D2 D1 @ 0.5
C2 -> D2 D1 D2 @ 0.5
C2 -> D1 D2 @ 0.5
D1 -> E1 E2 @ 0.5
D1 -> E2 E1 E1 @ 0.5
D2 -> E2 E1 @ 0.5
D2 -> E1 E2 E2 @ 0.5
E1 -> F1 F2 @ 0.5
E1 -> c c @ 0.5
E2 -> F2 F1 @ 0.5
E2 -> c c c @ 0.5
F1 -> a b @ 0.5
F1 -> b a a @ 0.5
F2 -> b a @ 0.5
F2 -> a b b @ 0.5
";

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(probs: (f64, f64)) -> GrammarSpec {
        // S -> S S | a
        GrammarSpec {
            nonterminal_names: vec!["S".into()],
            terminal_names: vec!["a".into()],
            root: 0,
            productions: vec![
                Production {
                    parent: 0,
                    children: vec![Symbol::Nonterminal(0), Symbol::Nonterminal(0)],
                    probability: probs.0,
                },
                Production {
                    parent: 0,
                    children: vec![Symbol::Terminal(0)],
                    probability: probs.1,
                },
            ],
            max_depth: 20,
        }
    }

    #[test]
    fn minimal_valid_grammar_passes() {
        let spec = GrammarSpec {
            nonterminal_names: vec!["S".into()],
            terminal_names: vec!["a".into()],
            root: 0,
            productions: vec![Production {
                parent: 0,
                children: vec![Symbol::Terminal(0)],
                probability: 1.0,
            }],
            max_depth: 4,
        };
        assert!(validate_grammar(&spec).is_empty());
    }

    #[test]
    fn probability_sum_violation_reported() {
        let spec = tiny_spec((0.6, 0.3));
        let report = validate_grammar(&spec);
        assert_eq!(report.len(), 1);
        match &report[0] {
            Violation::ProbabilitySum { nonterminal: 0, sum } => {
                assert!((sum - 0.9).abs() < 1e-12)
            }
            v => panic!("unexpected violation {v:?}"),
        }
        assert!(report[0].to_string().contains("probabilities sum to 0.9"));
    }

    #[test]
    fn non_terminating_nonterminal_reported() {
        // X -> X only: can never reach terminals.
        let spec = GrammarSpec {
            nonterminal_names: vec!["S".into(), "X".into()],
            terminal_names: vec!["a".into()],
            root: 0,
            productions: vec![
                Production {
                    parent: 0,
                    children: vec![Symbol::Nonterminal(1), Symbol::Terminal(0)],
                    probability: 1.0,
                },
                Production {
                    parent: 1,
                    children: vec![Symbol::Nonterminal(1)],
                    probability: 1.0,
                },
            ],
            max_depth: 8,
        };
        let report = validate_grammar(&spec);
        assert!(report
            .iter()
            .any(|v| matches!(v, Violation::NonTerminating { nonterminal: 1 })));
        // The root depends on X, so it is non-terminating too.
        assert!(report
            .iter()
            .any(|v| matches!(v, Violation::NonTerminating { nonterminal: 0 })));
    }

    #[test]
    fn deep_but_terminating_passes_when_depth_allows() {
        // Chain S -> X -> a needs depth 2.
        let mut spec = GrammarSpec {
            nonterminal_names: vec!["S".into(), "X".into()],
            terminal_names: vec!["a".into()],
            root: 0,
            productions: vec![
                Production {
                    parent: 0,
                    children: vec![Symbol::Nonterminal(1)],
                    probability: 1.0,
                },
                Production {
                    parent: 1,
                    children: vec![Symbol::Terminal(0)],
                    probability: 1.0,
                },
            ],
            max_depth: 2,
        };
        assert!(validate_grammar(&spec).is_empty());
        spec.max_depth = 1;
        assert!(!validate_grammar(&spec).is_empty());
    }

    #[test]
    fn sample_is_deterministic_and_sized() {
        let g = Grammar::new(tiny_spec((0.5, 0.5))).unwrap();
        let a = g.sample_string(&mut Rng::new(42), 3).unwrap();
        let b = g.sample_string(&mut Rng::new(42), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 3);
        assert!(a.tokens.iter().all(|&t| t == 0));
    }

    #[test]
    fn unreachable_length_errors_out() {
        // S -> a only: every derivation has length 1.
        let spec = GrammarSpec {
            nonterminal_names: vec!["S".into()],
            terminal_names: vec!["a".into()],
            root: 0,
            productions: vec![Production {
                parent: 0,
                children: vec![Symbol::Terminal(0)],
                probability: 1.0,
            }],
            max_depth: 4,
        };
        let g = Grammar::new(spec).unwrap();
        match g.sample_string(&mut Rng::new(1), 2) {
            Err(GrammarError::TargetLenUnreachable { target_len: 2, .. }) => {}
            other => panic!("expected TargetLenUnreachable, got {other:?}"),
        }
    }

    #[test]
    fn default_grammar_round_trips_through_dsl() {
        let g = default_grammar();
        let text = g.to_dsl();
        let g2 = Grammar::from_dsl(&text).unwrap();
        assert_eq!(g.content_hash(), g2.content_hash());
    }

    #[test]
    fn dsl_loader_rejects_invalid_grammar() {
        let bad = "pcfg v1\nterminals a\nroot S\nS -> S S @ 0.6\nS -> a @ 0.3\n";
        assert!(Grammar::from_dsl(bad).is_err());
    }

    #[test]
    fn default_grammar_covers_training_windows() {
        let g = default_grammar();
        let mut rng = Rng::new(9);
        for i in 0..20 {
            let mut r = rng.split(i);
            let s = g.sample_string(&mut r, 250).unwrap();
            assert_eq!(s.tokens.len(), 250);
        }
    }
}
