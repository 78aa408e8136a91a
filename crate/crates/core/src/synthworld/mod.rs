//! Synthetic long-form QA universe.
//!
//! A [`World`] fixes one value for every (entity, attribute) pair. Samples
//! draw a query about one entity, a retrieved [`Context`] that supports some
//! of the queried aspects (possibly with corrupted values) plus distractor
//! facts about other entities, and an outline-first demonstration answer.
//! The oracle judges answers against the context only.

mod dataset;
mod oracle;
mod vocab;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{read_samples, write_samples, DatasetHeader};
pub use oracle::{oracle_labels, oracle_subclaim, FactualityLabels};
pub use vocab::{Token, TokenKind, Vocab, BOS, EOS, NUM_PATTERNS, OUTLINE_END, SENT_END, VOCAB_VERSION};

/// One atomic fact: `attribute` of `entity` has `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub entity: u16,
    pub attribute: u16,
    pub value: u16,
}

impl FactTriple {
    pub fn new(entity: usize, attribute: usize, value: usize) -> Self {
        Self {
            entity: entity as u16,
            attribute: attribute as u16,
            value: value as u16,
        }
    }
}

/// Universe dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub entities: usize,
    pub attributes: usize,
    pub values: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            entities: 6,
            attributes: 4,
            values: 5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities == 0 || self.attributes == 0 || self.values == 0 {
            return Err(Error::Config(format!(
                "universe dimensions must be positive, got E={} A={} V={}",
                self.entities, self.attributes, self.values
            )));
        }
        if self.entities > u16::MAX as usize || self.attributes > u16::MAX as usize || self.values > u16::MAX as usize {
            return Err(Error::Config("universe dimension exceeds 65535".into()));
        }
        Ok(())
    }

    pub fn contains(&self, t: FactTriple) -> bool {
        (t.entity as usize) < self.entities
            && (t.attribute as usize) < self.attributes
            && (t.value as usize) < self.values
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    /// Row-major `entities x attributes` table of value ids.
    truth: Vec<u16>,
}

impl World {
    pub fn truth(&self, entity: usize, attribute: usize) -> usize {
        self.truth[entity * self.config.attributes + attribute] as usize
    }

    pub fn true_triple(&self, entity: usize, attribute: usize) -> FactTriple {
        FactTriple::new(entity, attribute, self.truth(entity, attribute))
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.config)
    }
}

pub fn gen_world(config: WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = (0..config.entities * config.attributes)
        .map(|_| rng.random_range(0..config.values) as u16)
        .collect();
    Ok(World { config, seed, truth })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub entity: u16,
    /// Ascending attribute ids.
    pub aspects: Vec<u16>,
    pub tokens: Vec<Token>,
}

impl Query {
    pub fn new(vocab: &Vocab, entity: usize, mut aspects: Vec<usize>) -> Self {
        aspects.sort_unstable();
        aspects.dedup();
        let mut tokens = vec![vocab.entity(entity)];
        tokens.extend(aspects.iter().map(|&a| vocab.topic(a)));
        Self {
            entity: entity as u16,
            aspects: aspects.into_iter().map(|a| a as u16).collect(),
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub triples: Vec<FactTriple>,
    /// Query aspects the context covers, ascending.
    pub supported_aspects: Vec<u16>,
}

impl Context {
    /// The context triple covering `attribute` of the query entity, if any.
    pub fn supporting_triple(&self, entity: u16, attribute: u16) -> Option<FactTriple> {
        self.triples
            .iter()
            .copied()
            .find(|t| t.entity == entity && t.attribute == attribute)
    }

    pub fn claim_tokens(&self, vocab: &Vocab) -> Vec<Token> {
        self.triples.iter().map(|&t| vocab.claim(t)).collect()
    }
}

/// Query plus retrieved context: the generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub query: Query,
    pub context: Context,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSample {
    pub query: Query,
    pub context: Context,
    pub demo_outline: Vec<Token>,
    pub demo_answer: Vec<Token>,
}

impl EnvSample {
    pub fn prompt(&self) -> Prompt {
        Prompt {
            query: self.query.clone(),
            context: self.context.clone(),
        }
    }
}

/// Per-sample generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Number of aspects each query asks about.
    pub aspects: usize,
    /// Fraction of queried aspects the context covers; rounded to a count.
    pub supported_fraction: f64,
    /// Facts about other entities mixed into the context.
    pub distractors: usize,
    /// Probability that a supporting fact carries a wrong value.
    pub corruption: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            aspects: 3,
            supported_fraction: 1.0,
            distractors: 4,
            corruption: 0.3,
        }
    }
}

impl SampleConfig {
    pub fn supported_count(&self) -> usize {
        ((self.aspects as f64 * self.supported_fraction).round() as usize).min(self.aspects)
    }

    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.aspects == 0 || self.aspects > world.attributes {
            return Err(Error::Config(format!(
                "query aspects k={} must lie in 1..={}",
                self.aspects, world.attributes
            )));
        }
        if !(0.0..=1.0).contains(&self.supported_fraction) || !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::Config("fractions and probabilities must lie in [0, 1]".into()));
        }
        if self.distractors > 0 && world.entities < 2 {
            return Err(Error::Config("distractors need at least two entities".into()));
        }
        Ok(())
    }
}

pub fn gen_sample<R: Rng + ?Sized>(world: &World, cfg: &SampleConfig, rng: &mut R) -> Result<EnvSample> {
    let dims = world.config;
    cfg.validate(&dims)?;
    let vocab = world.vocab();
    let entity = rng.random_range(0..dims.entities);
    let attrs: Vec<usize> = (0..dims.attributes).collect();
    let aspects: Vec<usize> = attrs.choose_multiple(rng, cfg.aspects).copied().collect();
    let query = Query::new(&vocab, entity, aspects);

    let mut supported: Vec<u16> = query
        .aspects
        .choose_multiple(rng, cfg.supported_count())
        .copied()
        .collect();
    supported.sort_unstable();

    let mut triples = Vec::with_capacity(supported.len() + cfg.distractors);
    for &a in &supported {
        let mut t = world.true_triple(entity, a as usize);
        if dims.values > 1 && rng.random_bool(cfg.corruption) {
            let shift = rng.random_range(1..dims.values);
            t.value = ((t.value as usize + shift) % dims.values) as u16;
        }
        triples.push(t);
    }
    for _ in 0..cfg.distractors {
        let mut other = rng.random_range(0..dims.entities - 1);
        if other >= entity {
            other += 1;
        }
        let a = rng.random_range(0..dims.attributes);
        triples.push(world.true_triple(other, a));
    }
    triples.shuffle(rng);

    let context = Context {
        triples,
        supported_aspects: supported,
    };
    let (demo_outline, demo_answer) = make_demonstration(&vocab, &query, &context);
    Ok(EnvSample {
        query,
        context,
        demo_outline,
        demo_answer,
    })
}

/// Draws `n` samples from a stream seeded with `seed`.
pub fn gen_samples(world: &World, cfg: &SampleConfig, n: usize, seed: u64) -> Result<Vec<EnvSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_sample(world, cfg, &mut rng)).collect()
}

/// Pattern chosen for an outline with `topics` perspectives.
pub fn pattern_for(topics: usize) -> usize {
    topics % NUM_PATTERNS
}

/// Outline-first demonstration: `[pattern, topic.., OUTLINE_END]` and one
/// `[claim, SENT_END]` sentence per supported aspect in outline order,
/// closed by `EOS`.
pub fn make_demonstration(vocab: &Vocab, query: &Query, context: &Context) -> (Vec<Token>, Vec<Token>) {
    let covered: Vec<(u16, FactTriple)> = query
        .aspects
        .iter()
        .filter(|a| context.supported_aspects.contains(a))
        .filter_map(|&a| context.supporting_triple(query.entity, a).map(|t| (a, t)))
        .collect();
    let mut outline = vec![vocab.pattern(pattern_for(covered.len()))];
    outline.extend(covered.iter().map(|&(a, _)| vocab.topic(a as usize)));
    outline.push(OUTLINE_END);
    let mut answer = Vec::with_capacity(covered.len() * 2 + 1);
    for &(_, t) in &covered {
        answer.push(vocab.claim(t));
        answer.push(SENT_END);
    }
    answer.push(EOS);
    (outline, answer)
}
