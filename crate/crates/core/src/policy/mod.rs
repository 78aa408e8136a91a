//! The generation policy: a conditioner trunk with a vocabulary head,
//! decoding, teacher-forced log-probabilities and the outline-then-answer
//! pipeline.

pub mod conditioner;
pub mod decode;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::checkpoint::{self, Header};
use crate::numeric::{Array, ParamStore, Tape, Var};
use crate::synthworld::{Prompt, Token, Vocab, WorldConfig, EOS, OUTLINE_END, VOCAB_VERSION};

pub use conditioner::{Architecture, Rows, Stage};
pub use decode::{Decoded, StepModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Beam,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Answer length cap `T`.
    pub max_len: usize,
    pub max_outline_len: usize,
    pub temperature: f64,
    pub beam_width: usize,
    /// Exponent of the length normalization in beam scores.
    pub length_penalty: f64,
    pub mode: DecodeMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            max_outline_len: 8,
            temperature: 1.0,
            beam_width: 3,
            length_penalty: 1.0,
            mode: DecodeMode::Beam,
        }
    }
}

impl GenerationConfig {
    pub fn sampling(temperature: f64) -> Self {
        Self {
            temperature,
            mode: DecodeMode::Sample,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.max_outline_len == 0 {
            return Err(Error::Config("length caps must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// How an episode's answer ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminal {
    Eos,
    LengthCap,
}

/// One sampled two-stage episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: Prompt,
    pub outline: Vec<Token>,
    pub answer: Vec<Token>,
    /// Log-probabilities of the outline tokens followed by the answer
    /// tokens under the generating distribution.
    pub log_probs: Vec<f64>,
    pub outline_truncated: bool,
    pub terminal: Terminal,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.outline.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn answer_log_probs(&self) -> &[f64] {
        &self.log_probs[self.outline.len()..]
    }
}

/// Result of [`Policy::two_stage_generate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub outline: Vec<Token>,
    pub answer: Vec<Token>,
    pub outline_truncated: bool,
}

/// Teacher-forcing rows for whole episodes plus the tokens each row predicts.
#[derive(Debug, Clone, Default)]
pub struct EpisodeBatch {
    pub rows: Rows,
    pub targets: Vec<usize>,
    /// Row range of each episode; outline rows come first.
    pub spans: Vec<std::ops::Range<usize>>,
}

impl EpisodeBatch {
    pub fn new(window: usize) -> Self {
        Self {
            rows: Rows::new(window),
            ..Self::default()
        }
    }

    /// Rows predicting every outline token and then every answer token.
    pub fn push(&mut self, vocab: &Vocab, prompt: &Prompt, outline: &[Token], answer: &[Token]) {
        let start = self.targets.len();
        for i in 0..outline.len() {
            self.rows.push(vocab, prompt, Stage::Outline, &[], &outline[..i]);
            self.targets.push(outline[i].index());
        }
        for i in 0..answer.len() {
            self.rows.push(vocab, prompt, Stage::Answer, outline, &answer[..i]);
            self.targets.push(answer[i].index());
        }
        self.spans.push(start..self.targets.len());
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// `π_θ`: conditioner trunk plus a linear vocabulary head.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub vocab: Vocab,
    pub arch: Architecture,
    pub store: ParamStore,
}

impl Policy {
    /// Random trunk, zero output layer (uniform next-token distribution).
    pub fn new(vocab: Vocab, arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        conditioner::init(&mut store, &arch, vocab.size(), &mut rng)?;
        store.insert("out.w", Array::zeros(&[arch.hidden, vocab.size()]))?;
        store.insert("out.b", Array::zeros(&[1, vocab.size()]))?;
        Ok(Self { vocab, arch, store })
    }

    /// Replaces the output layer with Gaussian weights of deviation `std`,
    /// giving an untrained but non-uniform policy.
    pub fn randomize_head(&mut self, std: f64, seed: u64) -> Result<()> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("head deviation {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["out.w", "out.b"] {
            let layer = self.store.get_mut(name).expect("policy has an output layer");
            for x in layer.data_mut() {
                *x = normal.sample(&mut rng);
            }
        }
        Ok(())
    }

    /// Logits `[rows, vocab]` on `tape`, which must borrow `self.store`.
    pub fn logits_on(&self, tape: &mut Tape<'_>, rows: &Rows) -> Result<Var> {
        let h = conditioner::forward(tape, &self.arch, rows)?;
        conditioner::linear(tape, h, "out")
    }

    /// Per-row log-probability of `targets` at temperature 1, `[rows, 1]`.
    pub fn target_log_probs_on(&self, tape: &mut Tape<'_>, batch: &EpisodeBatch) -> Result<(Var, Var)> {
        let logits = self.logits_on(tape, &batch.rows)?;
        let lp = tape.log_softmax(logits)?;
        let picked = tape.pick(lp, batch.targets.clone())?;
        Ok((picked, lp))
    }

    pub fn logits(&self, rows: &Rows) -> Result<Array> {
        let mut tape = Tape::new(&self.store);
        let v = self.logits_on(&mut tape, rows)?;
        Ok(tape.value(v).clone())
    }

    /// Next-token probabilities after `prefix` within `stage`.
    pub fn next_token_dist(
        &self,
        prompt: &Prompt,
        stage: Stage,
        outline: &[Token],
        prefix: &[Token],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let mut rows = Rows::new(self.arch.window);
        rows.push(&self.vocab, prompt, stage, outline, prefix);
        let logits = self.logits(&rows)?;
        Ok(decode::tempered_log_probs(logits.row(0), temperature)
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| !self.vocab.contains(**t)) {
            Some(t) => Err(Error::Structural(format!(
                "token id {} outside vocabulary of size {}",
                t.0,
                self.vocab.size()
            ))),
            None => Ok(()),
        }
    }

    /// Teacher-forced log-probabilities of the outline tokens followed by
    /// the answer tokens, at temperature 1.
    pub fn logprob_of(&self, prompt: &Prompt, outline: &[Token], answer: &[Token]) -> Result<Vec<f64>> {
        Ok(self.logprob_batch(&[(prompt, outline, answer)])?.remove(0))
    }

    pub fn logprob_batch(&self, episodes: &[(&Prompt, &[Token], &[Token])]) -> Result<Vec<Vec<f64>>> {
        let mut batch = EpisodeBatch::new(self.arch.window);
        for (p, o, a) in episodes {
            self.check_tokens(o)?;
            self.check_tokens(a)?;
            batch.push(&self.vocab, p, o, a);
        }
        if batch.is_empty() {
            return Ok(vec![Vec::new(); episodes.len()]);
        }
        let mut tape = Tape::new(&self.store);
        let (picked, _) = self.target_log_probs_on(&mut tape, &batch)?;
        let values = tape.value(picked).data();
        Ok(batch.spans.iter().map(|r| values[r.clone()].to_vec()).collect())
    }

    fn stepper<'p>(&'p self, prompts: &'p [&'p Prompt], stage: Stage, outlines: &'p [Vec<Token>]) -> PolicyStep<'p> {
        PolicyStep {
            policy: self,
            prompts,
            stage,
            outlines,
        }
    }

    /// Samples one two-stage episode per prompt; episode `i` consumes only
    /// the stream seeded with `seeds[i]`.
    pub fn sample_episodes(&self, prompts: &[&Prompt], cfg: &GenerationConfig, seeds: &[u64]) -> Result<Vec<Rollout>> {
        cfg.validate()?;
        if prompts.len() != seeds.len() {
            return Err(Error::Contract("one seed per prompt required".into()));
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let outlines = decode::sample(
            &self.stepper(prompts, Stage::Outline, &[]),
            &mut rngs,
            OUTLINE_END,
            cfg.max_outline_len,
            cfg.temperature,
        )?;
        let outline_tokens: Vec<Vec<Token>> = outlines.iter().map(|d| d.tokens.clone()).collect();
        let answers = decode::sample(
            &self.stepper(prompts, Stage::Answer, &outline_tokens),
            &mut rngs,
            EOS,
            cfg.max_len,
            cfg.temperature,
        )?;
        Ok(prompts
            .iter()
            .zip(outlines)
            .zip(answers)
            .map(|((p, o), a)| Rollout {
                prompt: (*p).clone(),
                outline_truncated: !o.stopped,
                terminal: if a.stopped { Terminal::Eos } else { Terminal::LengthCap },
                log_probs: o.log_probs.into_iter().chain(a.log_probs).collect(),
                outline: o.tokens,
                answer: a.tokens,
            })
            .collect())
    }

    /// Samples only the answer stage given fixed outlines.
    pub fn sample_answers(
        &self,
        prompts: &[&Prompt],
        outlines: &[Vec<Token>],
        cfg: &GenerationConfig,
        seeds: &[u64],
    ) -> Result<Vec<Decoded>> {
        cfg.validate()?;
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        decode::sample(
            &self.stepper(prompts, Stage::Answer, outlines),
            &mut rngs,
            EOS,
            cfg.max_len,
            cfg.temperature,
        )
    }

    /// Beam-decodes the answer stage given fixed outlines.
    pub fn beam_answers(
        &self,
        prompts: &[&Prompt],
        outlines: &[Vec<Token>],
        cfg: &GenerationConfig,
    ) -> Result<Vec<Decoded>> {
        cfg.validate()?;
        decode::beam_search(
            &self.stepper(prompts, Stage::Answer, outlines),
            prompts.len(),
            cfg.beam_width,
            EOS,
            cfg.max_len,
            cfg.length_penalty,
        )
    }

    /// Outline then answer, each stage by beam search.
    pub fn two_stage_generate(&self, prompt: &Prompt, cfg: &GenerationConfig) -> Result<Generation> {
        Ok(self.two_stage_batch(&[prompt], cfg)?.remove(0))
    }

    pub fn two_stage_batch(&self, prompts: &[&Prompt], cfg: &GenerationConfig) -> Result<Vec<Generation>> {
        cfg.validate()?;
        let outlines = decode::beam_search(
            &self.stepper(prompts, Stage::Outline, &[]),
            prompts.len(),
            cfg.beam_width,
            OUTLINE_END,
            cfg.max_outline_len,
            cfg.length_penalty,
        )?;
        let outline_tokens: Vec<Vec<Token>> = outlines.iter().map(|d| d.tokens.clone()).collect();
        let answers = self.beam_answers(prompts, &outline_tokens, cfg)?;
        Ok(outlines
            .into_iter()
            .zip(answers)
            .map(|(o, a)| Generation {
                outline_truncated: !o.stopped,
                outline: o.tokens,
                answer: a.tokens,
            })
            .collect())
    }

    pub fn header(&self) -> Header {
        let mut h = Header::new();
        h.insert("kind".into(), "policy".into());
        vocab_header(&self.vocab, &mut h);
        self.arch.to_header(&mut h);
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.store, &self.header())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (store, header) = checkpoint::from_bytes(buf)?;
        expect_kind(&header, "policy")?;
        let vocab = vocab_from_header(&header)?;
        let arch = Architecture::from_header(&header)?;
        let policy = Self { vocab, arch, store };
        let probe = Policy::new(vocab, arch, 0)?;
        check_layout(&probe.store, &policy.store)?;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn vocab_header(vocab: &Vocab, h: &mut Header) {
    h.insert("vocab.version".into(), VOCAB_VERSION.to_string());
    h.insert("vocab.entities".into(), vocab.dims.entities.to_string());
    h.insert("vocab.attributes".into(), vocab.dims.attributes.to_string());
    h.insert("vocab.values".into(), vocab.dims.values.to_string());
}

pub fn vocab_from_header(h: &Header) -> Result<Vocab> {
    let get = |k: &str| -> Result<usize> {
        h.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Manifest(format!("checkpoint header lacks a valid `{k}`")))
    };
    let version = get("vocab.version")?;
    if version != VOCAB_VERSION as usize {
        return Err(Error::Manifest(format!(
            "checkpoint vocabulary version {version} differs from {VOCAB_VERSION}"
        )));
    }
    let dims = WorldConfig {
        entities: get("vocab.entities")?,
        attributes: get("vocab.attributes")?,
        values: get("vocab.values")?,
    };
    dims.validate()?;
    Ok(Vocab::new(dims))
}

pub fn expect_kind(h: &Header, kind: &str) -> Result<()> {
    match h.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Manifest(format!(
            "expected a {kind} checkpoint, found {other:?}"
        ))),
    }
}

/// Checks that `loaded` has exactly the parameter names and shapes of
/// `fresh`.
pub fn check_layout(fresh: &ParamStore, loaded: &ParamStore) -> Result<()> {
    let a: Vec<(&str, &[usize])> = fresh
        .params()
        .iter()
        .map(|p| (p.name.as_str(), p.value.shape()))
        .collect();
    let b: Vec<(&str, &[usize])> = loaded
        .params()
        .iter()
        .map(|p| (p.name.as_str(), p.value.shape()))
        .collect();
    if a != b {
        return Err(Error::Manifest(
            "checkpoint parameter layout does not match its header".into(),
        ));
    }
    Ok(())
}

/// Adapter exposing one stage of the policy as a [`StepModel`].
struct PolicyStep<'p> {
    policy: &'p Policy,
    prompts: &'p [&'p Prompt],
    stage: Stage,
    outlines: &'p [Vec<Token>],
}

impl StepModel for PolicyStep<'_> {
    fn vocab_size(&self) -> usize {
        self.policy.vocab.size()
    }

    fn logits(&self, queries: &[(usize, &[Token])]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Rows::new(self.policy.arch.window);
        for &(lane, prefix) in queries {
            let outline = match self.stage {
                Stage::Outline => &[][..],
                Stage::Answer => self.outlines[lane].as_slice(),
            };
            rows.push(&self.policy.vocab, self.prompts[lane], self.stage, outline, prefix);
        }
        let logits = self.policy.logits(&rows)?;
        Ok((0..logits.rows()).map(|r| logits.row(r).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests;
