use serde::{Deserialize, Serialize};

use super::{FactTriple, WorldConfig};

/// Bumped whenever the id layout below changes.
pub const VOCAB_VERSION: u32 = 1;

/// Number of organizational-pattern tokens that may open an outline.
pub const NUM_PATTERNS: usize = 4;

/// Token id. The layout is
///
/// ```text
/// 0 BOS | 1 EOS | 2 SENT_END | 3 OUTLINE_END | 4.. patterns | topics (A)
///       | claims (E*A*V, one per fact triple) | query entities (E)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Bos,
    Eos,
    SentEnd,
    OutlineEnd,
    Pattern(usize),
    Topic(usize),
    Claim(FactTriple),
    Entity(usize),
}

impl TokenKind {
    pub fn is_structural(self) -> bool {
        !matches!(self, TokenKind::Claim(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub dims: WorldConfig,
}

pub const BOS: Token = Token(0);
pub const EOS: Token = Token(1);
pub const SENT_END: Token = Token(2);
pub const OUTLINE_END: Token = Token(3);
const PATTERN_BASE: usize = 4;

impl Vocab {
    pub fn new(dims: WorldConfig) -> Self {
        Self { dims }
    }

    fn topic_base(&self) -> usize {
        PATTERN_BASE + NUM_PATTERNS
    }

    fn claim_base(&self) -> usize {
        self.topic_base() + self.dims.attributes
    }

    fn entity_base(&self) -> usize {
        self.claim_base() + self.num_claims()
    }

    pub fn num_claims(&self) -> usize {
        self.dims.entities * self.dims.attributes * self.dims.values
    }

    /// Non-claim tokens that can appear in outlines and answers.
    pub fn num_structural(&self) -> usize {
        self.claim_base()
    }

    pub fn size(&self) -> usize {
        self.entity_base() + self.dims.entities
    }

    pub fn pattern(&self, p: usize) -> Token {
        debug_assert!(p < NUM_PATTERNS);
        Token((PATTERN_BASE + p) as u32)
    }

    pub fn topic(&self, attribute: usize) -> Token {
        debug_assert!(attribute < self.dims.attributes);
        Token((self.topic_base() + attribute) as u32)
    }

    pub fn entity(&self, entity: usize) -> Token {
        debug_assert!(entity < self.dims.entities);
        Token((self.entity_base() + entity) as u32)
    }

    pub fn claim(&self, t: FactTriple) -> Token {
        let d = &self.dims;
        let offset = (t.entity as usize * d.attributes + t.attribute as usize) * d.values + t.value as usize;
        Token((self.claim_base() + offset) as u32)
    }

    pub fn kind(&self, tok: Token) -> Option<TokenKind> {
        let i = tok.index();
        let d = &self.dims;
        Some(match i {
            0 => TokenKind::Bos,
            1 => TokenKind::Eos,
            2 => TokenKind::SentEnd,
            3 => TokenKind::OutlineEnd,
            _ if i < self.topic_base() => TokenKind::Pattern(i - PATTERN_BASE),
            _ if i < self.claim_base() => TokenKind::Topic(i - self.topic_base()),
            _ if i < self.entity_base() => {
                let o = i - self.claim_base();
                let value = o % d.values;
                let rest = o / d.values;
                TokenKind::Claim(FactTriple {
                    entity: (rest / d.attributes) as u16,
                    attribute: (rest % d.attributes) as u16,
                    value: value as u16,
                })
            }
            _ if i < self.size() => TokenKind::Entity(i - self.entity_base()),
            _ => return None,
        })
    }

    pub fn claim_of(&self, tok: Token) -> Option<FactTriple> {
        match self.kind(tok) {
            Some(TokenKind::Claim(t)) => Some(t),
            _ => None,
        }
    }

    pub fn is_pattern(&self, tok: Token) -> bool {
        matches!(self.kind(tok), Some(TokenKind::Pattern(_)))
    }

    pub fn contains(&self, tok: Token) -> bool {
        tok.index() < self.size()
    }
}
