//! Windowed-MLP conditioner shared by the policy, reward and value models.
//!
//! Every row describes one generation state. Its features are
//!
//! * a stage flag (0 while drafting the outline, 1 while answering);
//! * the query entity embedding and the mean query embedding;
//! * the mean of the context claims under a learned nonlinear claim code;
//! * the mean outline embedding and the embedding of the outline topic the
//!   answer is currently expanding (one topic per finished sentence);
//! * embeddings of the last `window` tokens, padded with `BOS`;
//! * optionally, products of the claim codes of the newest token and of the
//!   prefix mean with the context code, which let a scorer test membership.
//!
//! Two tanh layers turn the features into the hidden state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Array, ParamStore, Tape, Var};
use crate::synthworld::{Prompt, Token, TokenKind, Vocab, BOS, OUTLINE_END, SENT_END};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub embed: usize,
    pub hidden: usize,
    pub context_hidden: usize,
    pub window: usize,
    pub interactions: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 256,
            context_hidden: 128,
            window: 4,
            interactions: false,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.context_hidden == 0 || self.window == 0 {
            return Err(Error::Config(format!("architecture sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        let extra = if self.interactions { 2 * self.context_hidden } else { 0 };
        1 + self.embed * (4 + self.window) + self.context_hidden + extra
    }

    pub fn to_header(&self, h: &mut crate::numeric::checkpoint::Header) {
        h.insert("arch.embed".into(), self.embed.to_string());
        h.insert("arch.hidden".into(), self.hidden.to_string());
        h.insert("arch.context_hidden".into(), self.context_hidden.to_string());
        h.insert("arch.window".into(), self.window.to_string());
        h.insert("arch.interactions".into(), self.interactions.to_string());
    }

    pub fn from_header(h: &crate::numeric::checkpoint::Header) -> Result<Self> {
        fn field<T: std::str::FromStr>(h: &crate::numeric::checkpoint::Header, key: &str) -> Result<T> {
            h.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Manifest(format!("checkpoint header lacks a valid `{key}`")))
        }
        Ok(Self {
            embed: field(h, "arch.embed")?,
            hidden: field(h, "arch.hidden")?,
            context_hidden: field(h, "arch.context_hidden")?,
            window: field(h, "arch.window")?,
            interactions: field(h, "arch.interactions")?,
        })
    }
}

/// Which half of the two-stage episode a state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Outline,
    Answer,
}

/// Feature indices for a batch of states, ready for [`forward`].
#[derive(Debug, Clone, Default)]
pub struct Rows {
    stage: Vec<f64>,
    entity: Vec<usize>,
    query: Vec<Vec<usize>>,
    context: Vec<Vec<usize>>,
    outline: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    /// `window[k][i]`: token `k + 1` steps back from row `i`'s next token.
    window: Vec<Vec<usize>>,
    prefix: Vec<Vec<usize>>,
}

fn ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|t| t.index()).collect()
}

/// The outline topic the answer expands after `prefix`: one topic per
/// closed sentence, `OUTLINE_END` once every topic is used.
pub fn cursor_topic(vocab: &Vocab, outline: &[Token], prefix: &[Token]) -> Token {
    let done = prefix.iter().filter(|&&t| t == SENT_END).count();
    outline
        .iter()
        .copied()
        .filter(|&t| matches!(vocab.kind(t), Some(TokenKind::Topic(_))))
        .nth(done)
        .unwrap_or(OUTLINE_END)
}

impl Rows {
    pub fn new(window: usize) -> Self {
        Self {
            window: vec![Vec::new(); window],
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.stage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stage.is_empty()
    }

    /// Appends the state reached after `prefix` within `stage`. In the
    /// outline stage `prefix` is the partial outline and `outline` is
    /// ignored.
    pub fn push(&mut self, vocab: &Vocab, prompt: &Prompt, stage: Stage, outline: &[Token], prefix: &[Token]) {
        self.stage.push(match stage {
            Stage::Outline => 0.0,
            Stage::Answer => 1.0,
        });
        self.entity.push(prompt.query.tokens[0].index());
        self.query.push(ids(&prompt.query.tokens));
        self.context.push(ids(&prompt.context.claim_tokens(vocab)));
        match stage {
            Stage::Outline => {
                self.outline.push(Vec::new());
                self.cursor.push(BOS.index());
            }
            Stage::Answer => {
                self.outline.push(ids(outline));
                self.cursor.push(cursor_topic(vocab, outline, prefix).index());
            }
        }
        for (k, col) in self.window.iter_mut().enumerate() {
            let tok = prefix.len().checked_sub(k + 1).map_or(BOS, |i| prefix[i]);
            col.push(tok.index());
        }
        self.prefix.push(ids(prefix));
    }
}

/// Adds the conditioner parameters to `store`. Weights are scaled by the
/// inverse square root of their fan-in.
pub fn init<R: Rng + ?Sized>(
    store: &mut ParamStore,
    arch: &Architecture,
    vocab_size: usize,
    rng: &mut R,
) -> Result<()> {
    arch.validate()?;
    let d = arch.embed;
    store.insert_normal("embed", vocab_size, d, 1.0, rng)?;
    store.insert_normal("context.w", d, arch.context_hidden, 1.0 / (d as f64).sqrt(), rng)?;
    store.insert("context.b", Array::zeros(&[1, arch.context_hidden]))?;
    let w = arch.input_width();
    store.insert_normal("h1.w", w, arch.hidden, 1.0 / (w as f64).sqrt(), rng)?;
    store.insert("h1.b", Array::zeros(&[1, arch.hidden]))?;
    store.insert_normal("h2.w", arch.hidden, arch.hidden, 1.0 / (arch.hidden as f64).sqrt(), rng)?;
    store.insert("h2.b", Array::zeros(&[1, arch.hidden]))?;
    Ok(())
}

pub fn linear(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.w"))?;
    let b = tape.param(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// Hidden state `[rows, hidden]`.
pub fn forward(tape: &mut Tape<'_>, arch: &Architecture, rows: &Rows) -> Result<Var> {
    let n = rows.len();
    let embed = tape.param("embed")?;
    let code = linear(tape, embed, "context")?;
    let code = tape.tanh(code);

    let mut parts = Vec::with_capacity(8 + arch.window);
    parts.push(tape.constant(Array::column(rows.stage.clone())));
    parts.push(tape.gather(embed, rows.entity.clone())?);
    parts.push(tape.bag_mean(embed, rows.query.clone())?);
    let ctx = tape.bag_mean(code, rows.context.clone())?;
    parts.push(ctx);
    parts.push(tape.bag_mean(embed, rows.outline.clone())?);
    parts.push(tape.gather(embed, rows.cursor.clone())?);
    for col in &rows.window {
        debug_assert_eq!(col.len(), n);
        parts.push(tape.gather(embed, col.clone())?);
    }
    if arch.interactions {
        let newest = tape.gather(code, rows.window[0].clone())?;
        parts.push(tape.mul(newest, ctx)?);
        let seen = tape.bag_mean(code, rows.prefix.clone())?;
        parts.push(tape.mul(seen, ctx)?);
    }
    let x = tape.concat(&parts)?;
    let h1 = linear(tape, x, "h1")?;
    let h1 = tape.tanh(h1);
    let h2 = linear(tape, h1, "h2")?;
    Ok(tape.tanh(h2))
}
