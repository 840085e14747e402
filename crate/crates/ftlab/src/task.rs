//! Task definitions, label oracles, sampling priors and spurious-correlation
//! specifications.
//!
//! All tasks read the text right-to-left: counting tasks look at the last
//! `operand2` positions, indexing tasks report the distance from the end of
//! text at which the `operand2`-th occurrence (scanning backward) sits, and
//! token-at reads the token `operand2` positions before the end. Answers are
//! small integers; for the token-at family the integer is the terminal id.

use crate::grammar::TerminalId;
use crate::vocab::{FamilyAlias, TaskFamily, Vocabulary};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// `None` encodes the NULL operand (token-at family).
    pub operand: Option<TerminalId>,
    pub operand2: u16,
    pub alias: FamilyAlias,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, operand: Option<TerminalId>) -> TaskSpec {
        let spec = TaskSpec {
            family,
            operand,
            operand2: family.default_operand2(),
            alias: FamilyAlias::Plain,
        };
        spec.validate().expect("invalid task spec");
        spec
    }

    pub fn with_alias(mut self, alias: FamilyAlias) -> TaskSpec {
        self.alias = alias;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.family {
            TaskFamily::TokenAt => {
                if self.operand.is_some() {
                    return Err("token-at family takes the NULL operand".into());
                }
            }
            _ => {
                if self.operand.is_none() {
                    return Err(format!("family {} needs an operand", self.family.code()));
                }
            }
        }
        if self.operand2 == 0 {
            return Err("operand2 must be positive".into());
        }
        if self.alias != FamilyAlias::Plain && self.family != TaskFamily::Count {
            return Err("aliases exist only for the counting family".into());
        }
        Ok(())
    }

    pub fn family_token(&self, vocab: &Vocabulary) -> u16 {
        vocab.family_token(self.family, self.alias)
    }

    pub fn operand_token(&self, vocab: &Vocabulary) -> u16 {
        match self.operand {
            Some(t) => vocab.terminal_token(t),
            None => crate::vocab::NULL,
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.operand {
            Some(t) => format!("t{t}"),
            None => "NULL".into(),
        };
        write!(f, "{}{}{}", self.family.code(), op, self.operand2)
    }
}

/// Answer sentinel: indexing tasks have no answer when the text holds fewer
/// than `operand2` occurrences of the operand; generators resample instead of
/// emitting such texts.
pub const NO_ANSWER: Option<u32> = None;

/// Ground-truth label for a task on a text. Integer semantics per family:
/// counts for C/CC, backward distance from the end of text for I/IC (the last
/// text token is at distance 1), and the terminal id for T.
pub fn task_oracle(
    family: TaskFamily,
    operand: Option<TerminalId>,
    operand2: u16,
    txt: &[TerminalId],
) -> Option<u32> {
    let len = txt.len();
    let k = operand2 as usize;
    match family {
        TaskFamily::Count => {
            let op = operand.expect("count needs operand");
            let window = &txt[len.saturating_sub(k)..];
            Some(window.iter().filter(|&&t| t == op).count() as u32)
        }
        TaskFamily::CountBigram => {
            let op = operand.expect("count-bigram needs operand");
            let start = len.saturating_sub(k);
            let window = &txt[start..];
            Some(
                window
                    .windows(2)
                    .filter(|w| w[0] == op && w[1] == op)
                    .count() as u32,
            )
        }
        TaskFamily::IndexOf => {
            let op = operand.expect("index-of needs operand");
            let mut seen = 0usize;
            for (dist, &t) in txt.iter().rev().enumerate() {
                if t == op {
                    seen += 1;
                    if seen == k {
                        return Some((dist + 1) as u32);
                    }
                }
            }
            NO_ANSWER
        }
        TaskFamily::IndexOfBigram => {
            let op = operand.expect("index-of-bigram needs operand");
            let mut seen = 0usize;
            // Scan bigrams from the end; a bigram's distance is measured at
            // its second (later) token.
            for i in (1..len).rev() {
                if txt[i - 1] == op && txt[i] == op {
                    seen += 1;
                    if seen == k {
                        return Some((len - i) as u32);
                    }
                }
            }
            NO_ANSWER
        }
        TaskFamily::TokenAt => {
            if len < k {
                return NO_ANSWER;
            }
            Some(txt[len - k] as u32)
        }
    }
}

/// The statistic `r(x, O)` entering the spurious-correlation offset. For the
/// tasks studied here it coincides with the task label.
pub fn r_statistic(
    family: TaskFamily,
    operand: TerminalId,
    operand2: u16,
    txt: &[TerminalId],
) -> Option<i64> {
    task_oracle(family, Some(operand), operand2, txt).map(|v| v as i64)
}

/// Map an oracle answer to its single vocabulary token.
pub fn answer_token(vocab: &Vocabulary, family: TaskFamily, answer: u32) -> u16 {
    match family {
        TaskFamily::TokenAt => vocab.terminal_token(answer as TerminalId),
        _ => vocab.numeric_token(answer as u16),
    }
}

/// Multinomial prior over operand terminals.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPrior {
    pub probabilities: Vec<f64>,
}

pub const PRIOR_TOL: f64 = 1e-9;

impl SamplingPrior {
    pub fn new(probabilities: Vec<f64>) -> Result<SamplingPrior, String> {
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err("prior probabilities must be non-negative".into());
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > PRIOR_TOL {
            return Err(format!("prior probabilities sum to {sum}"));
        }
        Ok(SamplingPrior { probabilities })
    }

    /// Low probability of sampling the fine-tuning operand.
    pub fn low() -> SamplingPrior {
        SamplingPrior::new(vec![0.999, 0.001, 0.000]).unwrap()
    }

    /// Medium probability of sampling the fine-tuning operand.
    pub fn medium() -> SamplingPrior {
        SamplingPrior::new(vec![0.9, 0.1, 0.0]).unwrap()
    }

    /// High probability of sampling the fine-tuning operand.
    pub fn high() -> SamplingPrior {
        SamplingPrior::new(vec![0.5, 0.3, 0.2]).unwrap()
    }

    pub fn concentrated(on: TerminalId, n_terminals: usize) -> SamplingPrior {
        let mut p = vec![0.0; n_terminals];
        p[on as usize] = 1.0;
        SamplingPrior { probabilities: p }
    }

    pub fn preset(name: &str) -> Option<SamplingPrior> {
        match name {
            "P_L" | "low" => Some(SamplingPrior::low()),
            "P_M" | "medium" => Some(SamplingPrior::medium()),
            "P_H" | "high" => Some(SamplingPrior::high()),
            _ => None,
        }
    }

    pub fn draw(&self, rng: &mut crate::rng::Rng) -> TerminalId {
        rng.weighted(&self.probabilities) as TerminalId
    }
}

/// Spurious-correlation description: a train or eval sample is "correlated"
/// when `r(txt, o_ft) - r(txt, o_pt) == offset_q` for the task's statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSpec {
    pub o_pt: TerminalId,
    pub o_ft: TerminalId,
    pub offset_q: i64,
    /// Probability a training sample is correlated, in [0, 1].
    pub c_tr: f64,
}

impl CorrelationSpec {
    pub fn new(o_pt: TerminalId, o_ft: TerminalId, offset_q: i64, c_tr: f64) -> CorrelationSpec {
        let spec = CorrelationSpec {
            o_pt,
            o_ft,
            offset_q,
            c_tr,
        };
        spec.validate().expect("invalid correlation spec");
        spec
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.o_pt == self.o_ft {
            return Err("o_pt and o_ft must differ".into());
        }
        if !(0.0..=1.0).contains(&self.c_tr) || !self.c_tr.is_finite() {
            return Err(format!("c_tr {} outside [0, 1]", self.c_tr));
        }
        Ok(())
    }

    pub fn with_c(mut self, c: f64) -> CorrelationSpec {
        self.c_tr = c;
        self
    }

    /// Does the text satisfy the offset condition for this task family?
    pub fn holds(&self, family: TaskFamily, operand2: u16, txt: &[TerminalId]) -> bool {
        match (
            r_statistic(family, self.o_ft, operand2, txt),
            r_statistic(family, self.o_pt, operand2, txt),
        ) {
            (Some(rf), Some(rp)) => rf - rp == self.offset_q,
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Grammar-local ids used throughout: a=0, b=1, c=2.
    const A: TerminalId = 0;
    const B: TerminalId = 1;
    const C: TerminalId = 2;

    #[test]
    fn count_zero_case() {
        let txt = vec![B; 40];
        assert_eq!(task_oracle(TaskFamily::Count, Some(A), 40, &txt), Some(0));
    }

    #[test]
    fn count_respects_window() {
        // 50 tokens: 10 leading a's outside the 40-window, 3 inside.
        let mut txt = vec![A; 10];
        txt.extend(vec![B; 37]);
        txt.extend(vec![A; 3]);
        assert_eq!(txt.len(), 50);
        assert_eq!(task_oracle(TaskFamily::Count, Some(A), 40, &txt), Some(3));
    }

    #[test]
    fn bigram_count_is_overlapping_and_windowed() {
        // ...a a a -> two overlapping aa bigrams.
        let txt = vec![B, B, A, A, A];
        assert_eq!(
            task_oracle(TaskFamily::CountBigram, Some(A), 5, &txt),
            Some(2)
        );
        // Window cuts the first pair member away: window [a, a, a] still 2,
        // window [a, a] gives 1.
        assert_eq!(
            task_oracle(TaskFamily::CountBigram, Some(A), 2, &txt),
            Some(1)
        );
    }

    #[test]
    fn index_of_counts_backward_from_eot() {
        // distances:        6  5  4  3  2  1
        let txt = vec![A, B, A, B, A, B];
        assert_eq!(task_oracle(TaskFamily::IndexOf, Some(A), 1, &txt), Some(2));
        assert_eq!(task_oracle(TaskFamily::IndexOf, Some(A), 2, &txt), Some(4));
        assert_eq!(task_oracle(TaskFamily::IndexOf, Some(A), 3, &txt), Some(6));
        assert_eq!(task_oracle(TaskFamily::IndexOf, Some(A), 4, &txt), None);
    }

    #[test]
    fn index_of_bigram_backward() {
        let txt = vec![A, A, B, A, A];
        // Bigrams aa at second-token distances 4 (positions 0-1) and 1.
        assert_eq!(
            task_oracle(TaskFamily::IndexOfBigram, Some(A), 1, &txt),
            Some(1)
        );
        assert_eq!(
            task_oracle(TaskFamily::IndexOfBigram, Some(A), 2, &txt),
            Some(4)
        );
        assert_eq!(task_oracle(TaskFamily::IndexOfBigram, Some(A), 3, &txt), None);
    }

    #[test]
    fn token_at_reads_from_end() {
        let txt = vec![A, B, C, B];
        assert_eq!(
            task_oracle(TaskFamily::TokenAt, None, 1, &txt),
            Some(B as u32)
        );
        assert_eq!(
            task_oracle(TaskFamily::TokenAt, None, 4, &txt),
            Some(A as u32)
        );
        assert_eq!(task_oracle(TaskFamily::TokenAt, None, 5, &txt), None);
    }

    #[test]
    fn priors_validate() {
        assert!(SamplingPrior::new(vec![0.5, 0.5, 0.1]).is_err());
        assert!(SamplingPrior::new(vec![0.5, -0.5, 1.0]).is_err());
        for p in [
            SamplingPrior::low(),
            SamplingPrior::medium(),
            SamplingPrior::high(),
        ] {
            let sum: f64 = p.probabilities.iter().sum();
            assert!((sum - 1.0).abs() <= PRIOR_TOL);
        }
    }

    #[test]
    fn correlation_holds_detects_offset() {
        let corr = CorrelationSpec::new(A, B, 1, 1.0);
        // In a 6-token window: 2 a's, 3 b's -> diff 1.
        let txt = vec![A, B, A, B, B, C];
        assert!(corr.holds(TaskFamily::Count, 6, &txt));
        let txt2 = vec![A, B, A, B, C, C];
        assert!(!corr.holds(TaskFamily::Count, 6, &txt2));
    }

    #[test]
    fn task_spec_invariants() {
        assert!(TaskSpec {
            family: TaskFamily::TokenAt,
            operand: Some(A),
            operand2: 40,
            alias: FamilyAlias::Plain,
        }
        .validate()
        .is_err());
        assert!(TaskSpec {
            family: TaskFamily::Count,
            operand: None,
            operand2: 40,
            alias: FamilyAlias::Plain,
        }
        .validate()
        .is_err());
        let ok = TaskSpec::new(TaskFamily::Count, Some(A));
        assert_eq!(ok.operand2, 40);
        let idx = TaskSpec::new(TaskFamily::IndexOf, Some(B));
        assert_eq!(idx.operand2, 6);
    }
}
