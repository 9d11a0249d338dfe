//! Synthetic token alphabet.
//!
//! Ids are dense: the six structural tokens come first, then the two verdict
//! tokens, then objects, concrete descriptors and abstract descriptors in
//! contiguous blocks. Only objects and concrete descriptors can be rendered
//! by the generator.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub type TokenId = usize;

/// Ordered token ids: prompts, instruction aliases and trajectory segments.
pub type TokenSeq = Vec<TokenId>;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const THINK_OPEN: TokenId = 2;
pub const THINK_CLOSE: TokenId = 3;
pub const ANS_OPEN: TokenId = 4;
pub const ANS_CLOSE: TokenId = 5;
pub const YES: TokenId = 6;
pub const NO: TokenId = 7;

const STRUCTURAL: [(TokenId, &str); 6] = [
    (BOS, "BOS"),
    (EOS, "EOS"),
    (THINK_OPEN, "THINK_OPEN"),
    (THINK_CLOSE, "THINK_CLOSE"),
    (ANS_OPEN, "ANS_OPEN"),
    (ANS_CLOSE, "ANS_CLOSE"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Structural,
    Verdict,
    Object,
    ConcreteDescriptor,
    AbstractDescriptor,
}

impl Role {
    /// Membership in the generator's feasible set is decided by role alone.
    pub fn is_feasible(self) -> bool {
        matches!(self, Role::Object | Role::ConcreteDescriptor)
    }

    pub fn is_content(self) -> bool {
        matches!(self, Role::Object | Role::ConcreteDescriptor | Role::AbstractDescriptor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub role: Role,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<Token>,
    n_objects: usize,
    n_concrete: usize,
    n_abstract: usize,
}

impl Vocab {
    pub fn build(config: &RunConfig) -> Result<Self> {
        Self::from_counts(config.n_objects, config.n_concrete, config.n_abstract)
    }

    pub fn from_counts(n_objects: usize, n_concrete: usize, n_abstract: usize) -> Result<Self> {
        if n_objects == 0 || n_concrete == 0 || n_abstract == 0 {
            return Err(Error::Config(format!(
                "role counts must be positive (objects={n_objects}, concrete={n_concrete}, abstract={n_abstract})"
            )));
        }
        let mut tokens: Vec<Token> = STRUCTURAL
            .iter()
            .map(|&(id, name)| Token {
                id,
                role: Role::Structural,
                name: name.to_string(),
            })
            .collect();
        tokens.push(Token {
            id: YES,
            role: Role::Verdict,
            name: "YES".into(),
        });
        tokens.push(Token {
            id: NO,
            role: Role::Verdict,
            name: "NO".into(),
        });
        let blocks = [
            (Role::Object, "obj", n_objects),
            (Role::ConcreteDescriptor, "con", n_concrete),
            (Role::AbstractDescriptor, "abs", n_abstract),
        ];
        for (role, prefix, count) in blocks {
            for k in 0..count {
                tokens.push(Token {
                    id: tokens.len(),
                    role,
                    name: format!("{prefix}{k}"),
                });
            }
        }
        let vocab = Vocab {
            tokens,
            n_objects,
            n_concrete,
            n_abstract,
        };
        vocab.check()?;
        Ok(vocab)
    }

    /// Structural and verdict tokens exist exactly once and ids are dense.
    pub fn check(&self) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            if t.id != i {
                return Err(Error::Config(format!("token id {} at position {i}", t.id)));
            }
        }
        for (id, name) in STRUCTURAL.iter().copied().chain([(YES, "YES"), (NO, "NO")]) {
            let hits = self.tokens.iter().filter(|t| t.name == name).count();
            if hits != 1 {
                return Err(Error::Config(format!("token {name} present {hits} times")));
            }
            let expected = if id == YES || id == NO {
                Role::Verdict
            } else {
                Role::Structural
            };
            if self.tokens[id].role != expected || self.tokens[id].name != name {
                return Err(Error::Config(format!("token {name} misplaced")));
            }
        }
        let count = |r: Role| self.tokens.iter().filter(|t| t.role == r).count();
        if count(Role::Structural) != 6 || count(Role::Verdict) != 2 {
            return Err(Error::Config("wrong number of structural/verdict tokens".into()));
        }
        if count(Role::Object) != self.n_objects
            || count(Role::ConcreteDescriptor) != self.n_concrete
            || count(Role::AbstractDescriptor) != self.n_abstract
        {
            return Err(Error::Config("role partition does not match counts".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn role(&self, id: TokenId) -> Role {
        self.tokens[id].role
    }

    pub fn name(&self, id: TokenId) -> &str {
        &self.tokens[id].name
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.tokens.len()
    }

    pub fn is_feasible(&self, id: TokenId) -> bool {
        self.role(id).is_feasible()
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        self.role(id).is_content()
    }

    pub fn objects(&self) -> std::ops::Range<TokenId> {
        8..8 + self.n_objects
    }

    pub fn concrete(&self) -> std::ops::Range<TokenId> {
        let start = 8 + self.n_objects;
        start..start + self.n_concrete
    }

    pub fn abstract_descriptors(&self) -> std::ops::Range<TokenId> {
        let start = 8 + self.n_objects + self.n_concrete;
        start..start + self.n_abstract
    }

    /// All content ids (objects, concrete, abstract) in id order.
    pub fn content(&self) -> std::ops::Range<TokenId> {
        8..self.tokens.len()
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_concrete(&self) -> usize {
        self.n_concrete
    }

    pub fn n_abstract(&self) -> usize {
        self.n_abstract
    }

    /// Prompts may only carry content tokens.
    pub fn check_prompt(&self, prompt: &[TokenId]) -> Result<()> {
        for &t in prompt {
            if !self.contains(t) {
                return Err(Error::Contract(format!("token id {t} outside vocabulary")));
            }
            if !self.is_content(t) {
                return Err(Error::Contract(format!(
                    "prompt contains non-content token {}",
                    self.name(t)
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, seq: &[TokenId]) -> String {
        seq.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}
