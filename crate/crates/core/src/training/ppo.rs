use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{eval_policy, MetricsRow, OracleJudge};
use crate::numeric::{adam_step, backward, AdamConfig, Array, ParamStore, Tape, Var};
use crate::policy::conditioner::{self, Architecture};
use crate::policy::{check_layout, expect_kind, EpisodeBatch, GenerationConfig, Policy, Rollout};
use crate::reward::{
    normalize_reward, oracle_reward, EvalGranularity, ModelGranularity, NormalizeMode, RewardModel, RewardVector,
    RmGranularity, ScoreItem,
};
use crate::segmentation::{segment_answer, AggKind, SegmentMap};
use crate::synthworld::{oracle_labels, EnvSample, Prompt, Token, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSourceKind {
    #[default]
    Oracle,
    RewardModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    /// KL coefficient `β`.
    pub beta: f64,
    pub gamma: f64,
    pub clip: f64,
    pub lambda: f64,
    pub rollouts: usize,
    pub epochs: usize,
    /// Episodes per gradient step.
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub temperature: f64,
    /// Mean per-token KL from the reference above which an iteration stops
    /// early.
    pub kl_ceiling: f64,
    pub policy_adam: AdamConfig,
    pub value_adam: AdamConfig,
    pub normalize: NormalizeMode,
    pub granularity: RmGranularity,
    pub source: RewardSourceKind,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 1.0,
            clip: 0.2,
            lambda: 0.95,
            rollouts: 128,
            epochs: 4,
            minibatch: 32,
            entropy_coef: 0.01,
            value_coef: 0.5,
            temperature: 1.0,
            kl_ceiling: 5.0,
            policy_adam: AdamConfig {
                max_grad_norm: Some(1.0),
                ..AdamConfig::with_lr(5e-4)
            },
            value_adam: AdamConfig {
                max_grad_norm: Some(1.0),
                ..AdamConfig::with_lr(1e-3)
            },
            normalize: NormalizeMode::Mean,
            granularity: RmGranularity::new(EvalGranularity::Subclaim, ModelGranularity::Sequence),
            source: RewardSourceKind::Oracle,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!(
                "clip ratio must lie in (0, 1), got {}",
                self.clip
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.rollouts == 0 || self.minibatch == 0 {
            return Err(Error::Config("rollouts and minibatch must be positive".into()));
        }
        Ok(())
    }
}

/// Where segment rewards come from.
#[derive(Clone, Copy)]
pub enum RewardSource<'a> {
    Oracle(Vocab),
    Model(&'a RewardModel),
}

impl RewardSource<'_> {
    fn vocab(&self) -> Vocab {
        match self {
            RewardSource::Oracle(v) => *v,
            RewardSource::Model(rm) => rm.vocab,
        }
    }

    /// Raw reward vectors for answers, aligned to `gran`'s segmentation.
    pub fn score(&self, gran: &RmGranularity, items: &[(&Prompt, &[Token])]) -> Result<Vec<RewardVector>> {
        let vocab = self.vocab();
        let maps: Vec<SegmentMap> = items
            .iter()
            .map(|(_, a)| segment_answer(&vocab, a))
            .collect::<Result<_>>()?;
        match self {
            RewardSource::Oracle(_) => items
                .iter()
                .zip(&maps)
                .map(|((p, a), m)| {
                    Ok(oracle_reward(
                        gran,
                        &oracle_labels(&vocab, &p.context, a, m, AggKind::Min)?,
                    ))
                })
                .collect(),
            RewardSource::Model(rm) => {
                let score_items: Vec<ScoreItem<'_>> = items
                    .iter()
                    .zip(&maps)
                    .map(|((p, a), m)| ScoreItem {
                        prompt: p,
                        answer: a,
                        segmap: m,
                    })
                    .collect();
                rm.score_batch(&score_items, gran)
            }
        }
    }
}

/// Per-token reward: every token pays `β (log π − log π_ref)`, and the
/// final token of segment `j` also receives `reward[j]`.
pub fn shape_rewards(
    reward: &RewardVector,
    segmap: &SegmentMap,
    logp_policy: &[f64],
    logp_ref: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    let n = segmap.len;
    if logp_policy.len() != n || logp_ref.len() != n {
        return Err(Error::Structural(format!(
            "log-prob lengths {} and {} do not match episode length {n}",
            logp_policy.len(),
            logp_ref.len()
        )));
    }
    if reward.len() != segmap.num_segments() {
        return Err(Error::Structural(format!(
            "{} segment rewards for {} segments",
            reward.len(),
            segmap.num_segments()
        )));
    }
    let mut shaped: Vec<f64> = logp_policy.iter().zip(logp_ref).map(|(p, q)| -beta * (p - q)).collect();
    for (&t, &r) in segmap.sentence_ends.iter().zip(&reward.scores) {
        shaped[t] += r;
    }
    Ok(shaped)
}

/// GAE over one episode with a zero terminal bootstrap. Returns raw
/// advantages and value targets `advantages + values`.
pub fn compute_advantages(shaped: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if shaped.len() != values.len() {
        return Err(Error::Structural(format!(
            "{} rewards for {} values",
            shaped.len(),
            values.len()
        )));
    }
    let n = shaped.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = shaped[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Zero mean, unit variance across every token of the batch.
pub fn normalize_advantages(adv: &mut [Vec<f64>]) {
    let n: usize = adv.iter().map(Vec::len).sum();
    if n == 0 {
        return;
    }
    let mean = adv.iter().flatten().sum::<f64>() / n as f64;
    let var = adv.iter().flatten().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-8);
    for a in adv.iter_mut().flatten() {
        *a = (*a - mean) / sd;
    }
}

/// Critic: its own conditioner trunk and a linear head per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub arch: Architecture,
    pub store: ParamStore,
}

impl ValueModel {
    pub fn new(vocab_size: usize, arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        conditioner::init(&mut store, &arch, vocab_size, &mut rng)?;
        store.insert("value.w", Array::zeros(&[arch.hidden, 1]))?;
        store.insert("value.b", Array::zeros(&[1, 1]))?;
        Ok(Self { arch, store })
    }

    pub fn values_on(&self, tape: &mut Tape<'_>, batch: &EpisodeBatch) -> Result<Var> {
        let h = conditioner::forward(tape, &self.arch, &batch.rows)?;
        conditioner::linear(tape, h, "value")
    }

    pub fn values(&self, batch: &EpisodeBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let v = self.values_on(&mut tape, batch)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn to_bytes(&self, vocab: &Vocab) -> Vec<u8> {
        let mut h = crate::numeric::checkpoint::Header::new();
        h.insert("kind".into(), "value".into());
        crate::policy::vocab_header(vocab, &mut h);
        self.arch.to_header(&mut h);
        crate::numeric::checkpoint::to_bytes(&self.store, &h)
    }

    pub fn save(&self, vocab: &Vocab, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(vocab))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (store, h) = crate::numeric::checkpoint::from_bytes(buf)?;
        expect_kind(&h, "value")?;
        let vocab = crate::policy::vocab_from_header(&h)?;
        let arch = Architecture::from_header(&h)?;
        check_layout(&ValueModel::new(vocab.size(), arch, 0)?.store, &store)?;
        Ok(Self { arch, store })
    }
}

/// Clipped surrogate, minus the entropy bonus, averaged over rows.
pub fn ppo_policy_loss_on(
    tape: &mut Tape<'_>,
    policy: &Policy,
    batch: &EpisodeBatch,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> Result<Var> {
    let (logp, all) = policy.target_log_probs_on(tape, batch)?;
    let old = tape.constant(Array::column(old_log_probs.to_vec()));
    let adv = tape.constant(Array::column(advantages.to_vec()));
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let objective = tape.mean(surrogate);
    let mut loss = tape.neg(objective);
    if entropy_coef != 0.0 {
        let p = tape.exp(all);
        let plogp = tape.mul(p, all)?;
        let neg_entropy = tape.row_sum(plogp)?;
        let mean_neg_entropy = tape.mean(neg_entropy);
        let bonus = tape.scale(mean_neg_entropy, entropy_coef);
        loss = tape.add(loss, bonus)?;
    }
    Ok(loss)
}

/// `coef/2 * mean((V - target)^2)`.
pub fn value_loss_on(
    tape: &mut Tape<'_>,
    value: &ValueModel,
    batch: &EpisodeBatch,
    targets: &[f64],
    coef: f64,
) -> Result<Var> {
    let v = value.values_on(tape, batch)?;
    let y = tape.constant(Array::column(targets.to_vec()));
    let d = tape.sub(v, y)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean(sq);
    Ok(tape.scale(m, 0.5 * coef))
}

/// Exact mean per-token `KL(π_θ || π_ref)` over full next-token
/// distributions at the positions of `batch`.
pub fn mean_kl(policy: &Policy, reference: &Policy, batch: &EpisodeBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let lp = log_softmax_rows(&policy.logits(&batch.rows)?);
    let lq = log_softmax_rows(&reference.logits(&batch.rows)?);
    let mut total = 0.0;
    for (p, q) in lp.iter().zip(&lq) {
        total += p.iter().zip(q).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
    }
    Ok(total / lp.len() as f64)
}

fn log_softmax_rows(logits: &Array) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| crate::policy::decode::tempered_log_probs(logits.row(r), 1.0))
        .collect()
}

/// RL prompts with the SFT policy's beam answers and their raw rewards,
/// computed once before RLHF starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub prompts: Vec<Prompt>,
    pub sft_answers: Vec<Vec<Token>>,
    pub baselines: Vec<RewardVector>,
}

impl PromptPool {
    pub fn new(
        sft: &Policy,
        prompts: Vec<Prompt>,
        source: &RewardSource<'_>,
        gran: &RmGranularity,
        gen: &GenerationConfig,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Contract("the RL prompt pool is empty".into()));
        }
        let mut sft_answers = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(64) {
            let refs: Vec<&Prompt> = chunk.iter().collect();
            sft_answers.extend(sft.two_stage_batch(&refs, gen)?.into_iter().map(|g| g.answer));
        }
        let items: Vec<(&Prompt, &[Token])> = prompts
            .iter()
            .zip(&sft_answers)
            .map(|(p, a)| (p, a.as_slice()))
            .collect();
        let baselines = source.score(gran, &items)?;
        Ok(Self {
            prompts,
            sft_answers,
            baselines,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Everything that changes during RLHF.
#[derive(Debug, Clone, PartialEq)]
pub struct RlhfState {
    pub policy: Policy,
    pub value: ValueModel,
    /// Iterations completed so far.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_raw_reward: f64,
    pub mean_shaped_return: f64,
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub early_stopped: bool,
    pub probe: Option<MetricsRow>,
}

/// Stream seed for lane `lane` of iteration `iteration`.
pub fn derive_seed(seed: u64, iteration: usize, lane: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul((iteration as u64).wrapping_add(1)))
        .wrapping_add(0xbf58_476d_1ce4_e5b9u64.wrapping_mul((lane as u64).wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Collected {
    rollouts: Vec<Rollout>,
    old_log_probs: Vec<Vec<f64>>,
    advantages: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    mean_raw: f64,
    mean_return: f64,
}

fn episode_batch(policy: &Policy, rollouts: &[&Rollout]) -> EpisodeBatch {
    let mut b = EpisodeBatch::new(policy.arch.window);
    for r in rollouts {
        b.push(&policy.vocab, &r.prompt, &r.outline, &r.answer);
    }
    b
}

fn collect(
    state: &RlhfState,
    reference: &Policy,
    source: &RewardSource<'_>,
    pool: &PromptPool,
    cfg: &PpoConfig,
) -> Result<Collected> {
    let iteration = state.iteration;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, iteration, usize::MAX));
    let picks: Vec<usize> = (0..cfg.rollouts).map(|_| rng.random_range(0..pool.len())).collect();
    let prompts: Vec<&Prompt> = picks.iter().map(|&i| &pool.prompts[i]).collect();
    let seeds: Vec<u64> = (0..cfg.rollouts).map(|l| derive_seed(cfg.seed, iteration, l)).collect();
    let gen = GenerationConfig {
        temperature: cfg.temperature,
        ..GenerationConfig::sampling(cfg.temperature)
    };
    let rollouts = state.policy.sample_episodes(&prompts, &gen, &seeds)?;

    let items: Vec<(&Prompt, &[Token])> = rollouts.iter().map(|r| (&r.prompt, r.answer.as_slice())).collect();
    let raw = source.score(&cfg.granularity, &items)?;
    let refs: Vec<&Rollout> = rollouts.iter().collect();
    let batch = episode_batch(&state.policy, &refs);
    let episodes: Vec<(&Prompt, &[Token], &[Token])> = rollouts
        .iter()
        .map(|r| (&r.prompt, r.outline.as_slice(), r.answer.as_slice()))
        .collect();
    let ref_lp = reference.logprob_batch(&episodes)?;
    let values = state.value.values(&batch)?;

    let mut advantages = Vec::with_capacity(rollouts.len());
    let mut targets = Vec::with_capacity(rollouts.len());
    let mut raw_total = 0.0;
    let mut ret_total = 0.0;
    for (k, r) in rollouts.iter().enumerate() {
        let seg = cfg
            .granularity
            .segments(&segment_answer(&state.policy.vocab, &r.answer)?);
        let normalized = normalize_reward(&raw[k], &pool.baselines[picks[k]], cfg.normalize);
        raw_total += raw[k].scores.iter().sum::<f64>();
        let shaped = shape_rewards(
            &normalized,
            &seg.shifted(r.outline.len()),
            &r.log_probs,
            &ref_lp[k],
            cfg.beta,
        )?;
        ret_total += shaped.iter().sum::<f64>();
        let (a, t) = compute_advantages(&shaped, &values[batch.spans[k].clone()], cfg.gamma, cfg.lambda)?;
        advantages.push(a);
        targets.push(t);
    }
    normalize_advantages(&mut advantages);
    let n = rollouts.len() as f64;
    Ok(Collected {
        old_log_probs: rollouts.iter().map(|r| r.log_probs.clone()).collect(),
        rollouts,
        advantages,
        targets,
        mean_raw: raw_total / n,
        mean_return: ret_total / n,
    })
}

/// Collect, score, shape, and run the clipped-surrogate and value updates.
/// Stops the optimization early, with a flag, once the mean KL from the
/// reference exceeds the ceiling.
pub fn ppo_iteration(
    state: &mut RlhfState,
    reference: &Policy,
    source: &RewardSource<'_>,
    pool: &PromptPool,
    cfg: &PpoConfig,
    probe: Option<&[EnvSample]>,
) -> Result<IterationStats> {
    cfg.validate()?;
    let c = collect(state, reference, source, pool, cfg)?;
    let all: Vec<&Rollout> = c.rollouts.iter().collect();
    let full = episode_batch(&state.policy, &all);
    let mut kl = mean_kl(&state.policy, reference, &full)?;
    let mut early_stopped = kl > cfg.kl_ceiling;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x5151, state.iteration, 0));
    let (mut ploss, mut vloss, mut steps) = (0.0, 0.0, 0usize);

    'epochs: for _ in 0..cfg.epochs {
        if early_stopped {
            break;
        }
        let mut order: Vec<usize> = (0..c.rollouts.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let mb: Vec<&Rollout> = chunk.iter().map(|&i| &c.rollouts[i]).collect();
            let batch = episode_batch(&state.policy, &mb);
            let old: Vec<f64> = chunk.iter().flat_map(|&i| c.old_log_probs[i].iter().copied()).collect();
            let adv: Vec<f64> = chunk.iter().flat_map(|&i| c.advantages[i].iter().copied()).collect();
            let tgt: Vec<f64> = chunk.iter().flat_map(|&i| c.targets[i].iter().copied()).collect();

            let (g, l) = {
                let mut tape = Tape::new(&state.policy.store);
                let loss =
                    ppo_policy_loss_on(&mut tape, &state.policy, &batch, &old, &adv, cfg.clip, cfg.entropy_coef)?;
                (backward(&tape, loss)?, tape.value(loss).item()?)
            };
            if !l.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite policy loss at iteration {}",
                    state.iteration
                )));
            }
            state.policy.store.zero_grads();
            state.policy.store.accumulate(&g);
            adam_step(&mut state.policy.store, &cfg.policy_adam);

            let (g, l2) = {
                let mut tape = Tape::new(&state.value.store);
                let loss = value_loss_on(&mut tape, &state.value, &batch, &tgt, cfg.value_coef)?;
                (backward(&tape, loss)?, tape.value(loss).item()?)
            };
            state.value.store.zero_grads();
            state.value.store.accumulate(&g);
            adam_step(&mut state.value.store, &cfg.value_adam);
            ploss += l;
            vloss += l2;
            steps += 1;
        }
        kl = mean_kl(&state.policy, reference, &full)?;
        if kl > cfg.kl_ceiling {
            early_stopped = true;
            break 'epochs;
        }
    }
    if !state.policy.store.all_finite() || !state.value.store.all_finite() {
        return Err(Error::Diverged(format!(
            "non-finite parameters at iteration {}",
            state.iteration
        )));
    }
    let probe = match probe {
        Some(samples) => Some(
            eval_policy(
                &state.policy,
                samples,
                &OracleJudge {
                    vocab: state.policy.vocab,
                },
                &GenerationConfig::default(),
            )?
            .0,
        ),
        None => None,
    };
    let stats = IterationStats {
        iteration: state.iteration,
        mean_raw_reward: c.mean_raw,
        mean_shaped_return: c.mean_return,
        mean_kl: kl,
        policy_loss: ploss / steps.max(1) as f64,
        value_loss: vloss / steps.max(1) as f64,
        early_stopped,
        probe,
    };
    state.iteration += 1;
    Ok(stats)
}
