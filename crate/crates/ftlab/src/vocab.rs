//! Token vocabulary for encoded task samples.
//!
//! Ids are contiguous from 0: special tokens, task-family tokens (including
//! two jailbreak aliases for the counting family), grammar terminals, then
//! numeric tokens 0..=255 so every integer answer is a single token.

use crate::grammar::TerminalId;

pub const PAD: u16 = 0;
pub const SOS: u16 = 1;
pub const SOT: u16 = 2;
pub const EOT: u16 = 3;
pub const ART: u16 = 4;
pub const NULL: u16 = 5;

const N_SPECIAL: u16 = 6;
const N_FAMILY: u16 = 7; // C, CC, I, IC, T, C_J1, C_J2
pub const NUMERIC_RANGE: u16 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    Count,
    CountBigram,
    IndexOf,
    IndexOfBigram,
    TokenAt,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::Count,
        TaskFamily::CountBigram,
        TaskFamily::IndexOf,
        TaskFamily::IndexOfBigram,
        TaskFamily::TokenAt,
    ];

    /// Default second operand: window size 40 for counting-style tasks and
    /// token-at, occurrence rank 6 for indexing tasks.
    pub fn default_operand2(self) -> u16 {
        match self {
            TaskFamily::Count | TaskFamily::CountBigram | TaskFamily::TokenAt => 40,
            TaskFamily::IndexOf | TaskFamily::IndexOfBigram => 6,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            TaskFamily::Count => "C",
            TaskFamily::CountBigram => "CC",
            TaskFamily::IndexOf => "I",
            TaskFamily::IndexOfBigram => "IC",
            TaskFamily::TokenAt => "T",
        }
    }

    pub fn from_code(code: &str) -> Option<TaskFamily> {
        TaskFamily::ALL.iter().copied().find(|f| f.code() == code)
    }

    fn index(self) -> u16 {
        match self {
            TaskFamily::Count => 0,
            TaskFamily::CountBigram => 1,
            TaskFamily::IndexOf => 2,
            TaskFamily::IndexOfBigram => 3,
            TaskFamily::TokenAt => 4,
        }
    }
}

/// Alternate task-family tokens for the counting family, used by the
/// jailbreak protocol. `Plain` is the ordinary family token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FamilyAlias {
    #[default]
    Plain,
    J1,
    J2,
}

impl FamilyAlias {
    pub fn code(self) -> &'static str {
        match self {
            FamilyAlias::Plain => "NJ",
            FamilyAlias::J1 => "J1",
            FamilyAlias::J2 => "J2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terminal_names: Vec<String>,
}

impl Vocabulary {
    pub fn new(terminal_names: Vec<String>) -> Vocabulary {
        assert!(!terminal_names.is_empty());
        Vocabulary { terminal_names }
    }

    pub fn for_grammar(grammar: &crate::grammar::Grammar) -> Vocabulary {
        Vocabulary::new(grammar.spec().terminal_names.clone())
    }

    pub fn n_terminals(&self) -> u16 {
        self.terminal_names.len() as u16
    }

    pub fn size(&self) -> u16 {
        N_SPECIAL + N_FAMILY + self.n_terminals() + NUMERIC_RANGE
    }

    pub fn family_token(&self, family: TaskFamily, alias: FamilyAlias) -> u16 {
        let slot = match (family, alias) {
            (f, FamilyAlias::Plain) => f.index(),
            (TaskFamily::Count, FamilyAlias::J1) => 5,
            (TaskFamily::Count, FamilyAlias::J2) => 6,
            _ => panic!("jailbreak aliases exist only for the counting family"),
        };
        N_SPECIAL + slot
    }

    pub fn family_of_token(&self, id: u16) -> Option<(TaskFamily, FamilyAlias)> {
        if !(N_SPECIAL..N_SPECIAL + N_FAMILY).contains(&id) {
            return None;
        }
        Some(match id - N_SPECIAL {
            0 => (TaskFamily::Count, FamilyAlias::Plain),
            1 => (TaskFamily::CountBigram, FamilyAlias::Plain),
            2 => (TaskFamily::IndexOf, FamilyAlias::Plain),
            3 => (TaskFamily::IndexOfBigram, FamilyAlias::Plain),
            4 => (TaskFamily::TokenAt, FamilyAlias::Plain),
            5 => (TaskFamily::Count, FamilyAlias::J1),
            _ => (TaskFamily::Count, FamilyAlias::J2),
        })
    }

    pub fn terminal_token(&self, t: TerminalId) -> u16 {
        assert!(t < self.n_terminals(), "terminal {t} out of range");
        N_SPECIAL + N_FAMILY + t
    }

    pub fn terminal_of_token(&self, id: u16) -> Option<TerminalId> {
        let base = N_SPECIAL + N_FAMILY;
        if (base..base + self.n_terminals()).contains(&id) {
            Some(id - base)
        } else {
            None
        }
    }

    pub fn numeric_token(&self, v: u16) -> u16 {
        assert!(v < NUMERIC_RANGE, "numeric value {v} out of range");
        N_SPECIAL + N_FAMILY + self.n_terminals() + v
    }

    pub fn numeric_value(&self, id: u16) -> Option<u16> {
        let base = N_SPECIAL + N_FAMILY + self.n_terminals();
        if id >= base && id < base + NUMERIC_RANGE {
            Some(id - base)
        } else {
            None
        }
    }

    /// Human-readable rendering, used for axis labels and vocab tables.
    pub fn display(&self, id: u16) -> String {
        match id {
            PAD => "#".into(),
            SOS => "$".into(),
            SOT => "<".into(),
            EOT => "<".into(),
            ART => "=".into(),
            NULL => "NULL".into(),
            _ => {
                if let Some((f, a)) = self.family_of_token(id) {
                    match a {
                        FamilyAlias::Plain => {
                            if f == TaskFamily::Count {
                                "(".into()
                            } else {
                                f.code().into()
                            }
                        }
                        _ => format!("{}_{}", f.code(), a.code()),
                    }
                } else if let Some(t) = self.terminal_of_token(id) {
                    self.terminal_names[t as usize].clone()
                } else if let Some(v) = self.numeric_value(id) {
                    v.to_string()
                } else {
                    format!("?{id}")
                }
            }
        }
    }

    pub fn terminal_names(&self) -> &[String] {
        &self.terminal_names
    }
}
