use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::error::Error;
use crate::numeric::{backward, finite_diff_check, GradCheck, NumericError, ParamStore, Tape};
use crate::policy::{Architecture, EpisodeBatch, GenerationConfig, Policy};
use crate::reward::{
    generate_rm_dataset, normalize_reward, EvalGranularity, LabeledAnswer, ModelGranularity, NormalizeMode,
    RewardVector, RmDatasetConfig, RmGranularity,
};
use crate::segmentation::segment_answer;
use crate::synthworld::{
    gen_samples, gen_world, EnvSample, Prompt, SampleConfig, World, WorldConfig, EOS, OUTLINE_END,
};

fn small_arch() -> Architecture {
    Architecture {
        embed: 8,
        hidden: 16,
        context_hidden: 8,
        window: 4,
        interactions: false,
    }
}

fn world() -> World {
    gen_world(WorldConfig::default(), 1).unwrap()
}

fn fixture(n: usize) -> (Policy, Vec<EnvSample>) {
    let w = world();
    (
        Policy::new(w.vocab(), small_arch(), 3).unwrap(),
        gen_samples(&w, &SampleConfig::default(), n, 2).unwrap(),
    )
}

fn randomize(store: &mut ParamStore, names: &[&str], scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).unwrap();
    for name in names {
        for x in store.get_mut(name).unwrap().data_mut() {
            *x = normal.sample(&mut rng);
        }
    }
}

fn numeric(e: Error) -> NumericError {
    match e {
        Error::Numeric(n) => n,
        other => panic!("unexpected error {other}"),
    }
}

fn batch_of(
    policy: &Policy,
    eps: &[(&Prompt, &[crate::synthworld::Token], &[crate::synthworld::Token])],
) -> EpisodeBatch {
    let mut b = EpisodeBatch::new(policy.arch.window);
    for (p, o, a) in eps {
        b.push(&policy.vocab, p, o, a);
    }
    b
}

fn labeled(policy: &Policy, samples: &[EnvSample], n: usize, seed: u64) -> Vec<LabeledAnswer> {
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    generate_rm_dataset(
        policy,
        &prompts,
        &RmDatasetConfig {
            size: n,
            temperature: 1.0,
            seed,
        },
    )
    .unwrap()
}

fn small_ppo() -> PpoConfig {
    PpoConfig {
        rollouts: 8,
        minibatch: 4,
        epochs: 2,
        ..PpoConfig::default()
    }
}

#[test]
fn shaped_reward_examples() {
    let w = world();
    let v = w.vocab();
    let claim = v.claim(w.true_triple(0, 0));
    let answer = [claim, crate::synthworld::SENT_END, EOS];
    let seg = segment_answer(&v, &answer).unwrap();
    let r = RewardVector { scores: vec![0.8] };

    let shaped = shape_rewards(&r, &seg, &[-1.0, -0.5, -0.2], &[-1.0, -0.5, -0.2], 0.0).unwrap();
    let end = seg.sentence_ends[0];
    for (t, x) in shaped.iter().enumerate() {
        assert_eq!(*x, if t == end { 0.8 } else { 0.0 });
    }

    let shaped = shape_rewards(&r, &seg, &[-0.5, -0.3, -0.1], &[-1.0, -0.3, -0.1], 0.1).unwrap();
    assert!((shaped[0] + 0.05).abs() < 1e-15);
}

#[test]
fn shaped_reward_rejects_misaligned_inputs() {
    let w = world();
    let seg = segment_answer(&w.vocab(), &[EOS]).unwrap();
    let r = RewardVector { scores: vec![1.0] };
    assert!(matches!(
        shape_rewards(&r, &seg, &[0.0, 0.0], &[0.0], 0.1),
        Err(Error::Structural(_))
    ));
    let two = RewardVector { scores: vec![1.0, 1.0] };
    assert!(matches!(
        shape_rewards(&two, &seg, &[0.0], &[0.0], 0.1),
        Err(Error::Structural(_))
    ));
}

#[test]
fn zero_beta_rewards_sit_exactly_on_segment_ends() {
    let (mut policy, samples) = fixture(20);
    randomize(&mut policy.store, &["out.w", "out.b"], 1.0, 4);
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    let refs: Vec<&Prompt> = prompts.iter().cycle().take(100).collect();
    let seeds: Vec<u64> = (0..100).collect();
    let rollouts = policy
        .sample_episodes(&refs, &GenerationConfig::sampling(1.0), &seeds)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for r in &rollouts {
        let seg = segment_answer(&policy.vocab, &r.answer).unwrap();
        let full = seg.shifted(r.outline.len());
        let scores: Vec<f64> = (0..seg.num_segments()).map(|_| rng.random_range(0.05..1.0)).collect();
        let lp_ref: Vec<f64> = r.log_probs.iter().map(|x| x - rng.random::<f64>()).collect();
        let shaped = shape_rewards(&RewardVector { scores }, &full, &r.log_probs, &lp_ref, 0.0).unwrap();
        for (t, x) in shaped.iter().enumerate() {
            assert_eq!(*x != 0.0, full.sentence_ends.contains(&t), "position {t}");
        }
        let hol = full.holistic();
        let shaped = shape_rewards(&RewardVector { scores: vec![0.5] }, &hol, &r.log_probs, &lp_ref, 0.0).unwrap();
        let nonzero: Vec<usize> = (0..shaped.len()).filter(|&t| shaped[t] != 0.0).collect();
        assert_eq!(nonzero, vec![shaped.len() - 1]);
    }
}

#[test]
fn advantages_telescope_without_discount() {
    let r = [0.5, -1.0, 2.0, 0.25];
    let (adv, targets) = compute_advantages(&r, &[0.0; 4], 1.0, 1.0).unwrap();
    assert_eq!(adv, vec![1.75, 1.25, 2.25, 0.25]);
    assert_eq!(targets, adv);
}

#[test]
fn zero_rewards_and_values_give_zero_advantages() {
    let (adv, targets) = compute_advantages(&[0.0; 6], &[0.0; 6], 0.9, 0.95).unwrap();
    assert!(adv.iter().chain(&targets).all(|&x| x == 0.0));
}

fn gae_by_definition(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let value = |t: usize| if t < n { v[t] } else { 0.0 };
    let delta = |t: usize| r[t] + gamma * value(t + 1) - v[t];
    (0..n)
        .map(|t| (t..n).map(|l| (gamma * lambda).powi((l - t) as i32) * delta(l)).sum())
        .collect()
}

#[test]
fn advantages_match_the_explicit_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (gamma, lambda) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
        let (adv, targets) = compute_advantages(&r, &v, gamma, lambda).unwrap();
        for (t, (a, b)) in adv.iter().zip(gae_by_definition(&r, &v, gamma, lambda)).enumerate() {
            assert!((a - b).abs() < 1e-12);
            assert!((targets[t] - (a + v[t])).abs() < 1e-15);
        }
    }
    assert!(matches!(
        compute_advantages(&[0.0], &[], 1.0, 1.0),
        Err(Error::Structural(_))
    ));
}

#[test]
fn batch_advantages_are_standardized() {
    let mut adv = vec![vec![1.0, 2.0, 3.0], vec![4.0], vec![-5.0, 0.5]];
    normalize_advantages(&mut adv);
    let flat: Vec<f64> = adv.concat();
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let var = flat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / flat.len() as f64;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
}

fn ppo_instance(seed: u64) -> (Policy, EpisodeBatch, Vec<f64>, Vec<f64>) {
    let (mut policy, samples) = fixture(6);
    randomize(&mut policy.store, &["out.w", "out.b"], 0.5, seed);
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    let refs: Vec<&Prompt> = prompts.iter().collect();
    let seeds: Vec<u64> = (0..6).map(|i| seed * 100 + i).collect();
    let rollouts = policy
        .sample_episodes(&refs, &GenerationConfig::sampling(1.0), &seeds)
        .unwrap();
    let eps: Vec<_> = rollouts
        .iter()
        .map(|r| (&r.prompt, r.outline.as_slice(), r.answer.as_slice()))
        .collect();
    let batch = batch_of(&policy, &eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch.len();
    let old: Vec<f64> = rollouts
        .iter()
        .flat_map(|r| r.log_probs.clone())
        .map(|x| x + rng.random_range(-0.15..0.15))
        .collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    (policy, batch, old, adv)
}

#[test]
fn ppo_losses_pass_gradient_checks() {
    for seed in 0..2 {
        let (policy, batch, old, adv) = ppo_instance(seed);
        let check = GradCheck {
            coords_per_param: Some(6),
            seed,
            ..GradCheck::default()
        };
        let err = finite_diff_check(&policy.store, check, |t| {
            ppo_policy_loss_on(t, &policy, &batch, &old, &adv, 0.2, 0.01).map_err(numeric)
        })
        .unwrap();
        assert!(err < 1e-4, "surrogate error {err}");

        let mut value = ValueModel::new(policy.vocab.size(), small_arch(), seed).unwrap();
        randomize(&mut value.store, &["value.w", "value.b"], 0.5, seed + 7);
        let err = finite_diff_check(&value.store, check, |t| {
            value_loss_on(t, &value, &batch, &adv, 0.5).map_err(numeric)
        })
        .unwrap();
        assert!(err < 1e-4, "value error {err}");
    }
}

#[test]
fn clipped_gradient_at_unit_ratio_is_the_policy_gradient() {
    let (policy, batch, _, adv) = ppo_instance(3);
    let (picked, _) = {
        let mut tape = Tape::new(&policy.store);
        let (lp, _) = policy.target_log_probs_on(&mut tape, &batch).unwrap();
        (tape.value(lp).data().to_vec(), ())
    };
    let clipped = {
        let mut tape = Tape::new(&policy.store);
        let loss = ppo_policy_loss_on(&mut tape, &policy, &batch, &picked, &adv, 0.2, 0.0).unwrap();
        backward(&tape, loss).unwrap()
    };
    let plain = {
        let mut tape = Tape::new(&policy.store);
        let (lp, _) = policy.target_log_probs_on(&mut tape, &batch).unwrap();
        let a = tape.constant(crate::numeric::Array::column(adv.clone()));
        let weighted = tape.mul(lp, a).unwrap();
        let m = tape.mean(weighted);
        let loss = tape.neg(m);
        backward(&tape, loss).unwrap()
    };
    let mut x = policy.store.clone();
    x.zero_grads();
    x.accumulate(&clipped);
    let mut y = policy.store.clone();
    y.zero_grads();
    y.accumulate(&plain);
    for (p, q) in x.params().iter().zip(y.params()) {
        for (a, b) in p.grad.data().iter().zip(q.grad.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{}: {a} vs {b}", p.name);
        }
    }
}

#[test]
fn supervised_and_unlikelihood_losses_pass_gradient_checks() {
    let (mut policy, samples) = fixture(8);
    randomize(&mut policy.store, &["out.w", "out.b"], 0.5, 1);
    let data = labeled(&policy, &samples, 8, 2);
    let refs: Vec<&LabeledAnswer> = data.iter().collect();
    let eps: Vec<_> = data
        .iter()
        .map(|d| (&d.prompt, d.outline.as_slice(), d.answer.as_slice()))
        .collect();
    let batch = batch_of(&policy, &eps);
    let check = GradCheck {
        coords_per_param: Some(6),
        ..GradCheck::default()
    };
    let err = finite_diff_check(&policy.store, check, |t| {
        Ok(unlikelihood_loss_on(t, &policy, &batch, &refs, 1.0)
            .map_err(numeric)?
            .loss)
    })
    .unwrap();
    assert!(err < 1e-4, "unlikelihood error {err}");
    let err = finite_diff_check(&policy.store, check, |t| {
        let (lp, _) = policy.target_log_probs_on(t, &batch).map_err(numeric)?;
        let m = t.mean(lp);
        Ok(t.neg(m))
    })
    .unwrap();
    assert!(err < 1e-4, "likelihood error {err}");
}

#[test]
fn unlikelihood_reduces_to_likelihood_without_negatives() {
    let (mut policy, samples) = fixture(30);
    randomize(&mut policy.store, &["out.w", "out.b"], 0.5, 1);
    let data: Vec<LabeledAnswer> = labeled(&policy, &samples, 60, 3)
        .into_iter()
        .filter(|d| d.labels.per_sentence.iter().all(|&r| r))
        .collect();
    assert!(!data.is_empty());
    let refs: Vec<&LabeledAnswer> = data.iter().collect();
    let eps: Vec<_> = data
        .iter()
        .map(|d| (&d.prompt, d.outline.as_slice(), d.answer.as_slice()))
        .collect();
    let batch = batch_of(&policy, &eps);
    let mut tape = Tape::new(&policy.store);
    let ul = unlikelihood_loss_on(&mut tape, &policy, &batch, &refs, 1.0).unwrap();
    let got = tape.value(ul.loss).item().unwrap();

    let (good, bad) = sentence_token_rows(&batch, &refs);
    assert!(bad.is_empty());
    let lps = policy.logprob_batch(&eps).unwrap().concat();
    let want = -good.iter().map(|&r| lps[r]).sum::<f64>() / good.len() as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn unlikelihood_vanishes_without_positives_at_zero_alpha() {
    let (mut policy, samples) = fixture(30);
    randomize(&mut policy.store, &["out.w", "out.b"], 0.5, 1);
    let data: Vec<LabeledAnswer> = labeled(&policy, &samples, 60, 3)
        .into_iter()
        .filter(|d| d.labels.per_sentence.iter().all(|&r| !r))
        .collect();
    let refs: Vec<&LabeledAnswer> = data.iter().collect();
    let eps: Vec<_> = data
        .iter()
        .map(|d| (&d.prompt, d.outline.as_slice(), d.answer.as_slice()))
        .collect();
    let batch = batch_of(&policy, &eps);
    let mut tape = Tape::new(&policy.store);
    let ul = unlikelihood_loss_on(&mut tape, &policy, &batch, &refs, 0.0).unwrap();
    assert_eq!(tape.value(ul.loss).item().unwrap(), 0.0);
}

#[test]
fn certain_penalized_tokens_are_clamped_and_counted() {
    let (mut policy, samples) = fixture(4);
    let prompt = samples[0].prompt();
    let w = world();
    let wrong = {
        let t = w.true_triple(samples[0].query.entity as usize, 0);
        let mut bad = t;
        bad.value = ((t.value as usize + 1) % 5) as u16;
        if prompt.context.triples.contains(&bad) {
            bad.value = ((t.value as usize + 2) % 5) as u16;
        }
        policy.vocab.claim(bad)
    };
    policy.store.get_mut("out.b").unwrap().data_mut()[wrong.index()] = 80.0;
    let answer = vec![wrong, crate::synthworld::SENT_END, EOS];
    let segmap = segment_answer(&policy.vocab, &answer).unwrap();
    let labels = crate::synthworld::oracle_labels(
        &policy.vocab,
        &prompt.context,
        &answer,
        &segmap,
        crate::segmentation::AggKind::Min,
    )
    .unwrap();
    assert_eq!(labels.per_sentence, vec![false]);
    let d = LabeledAnswer {
        prompt: prompt.clone(),
        outline: samples[0].demo_outline.clone(),
        answer,
        segmap,
        labels,
    };
    let batch = batch_of(&policy, &[(&d.prompt, d.outline.as_slice(), d.answer.as_slice())]);
    let mut tape = Tape::new(&policy.store);
    let ul = unlikelihood_loss_on(&mut tape, &policy, &batch, &[&d], 1.0).unwrap();
    assert!(ul.clamped >= 1);
    assert!(tape.value(ul.loss).item().unwrap().is_finite());
}

#[test]
fn factuality_filter_keeps_exactly_the_factual_answers() {
    let (mut policy, samples) = fixture(50);
    randomize(&mut policy.store, &["out.w", "out.b"], 0.3, 1);
    let data = labeled(&policy, &samples, 200, 4);
    let kept = filter_dataset(&data);
    assert_eq!(kept.len(), data.iter().filter(|d| d.labels.holistic).count());
    assert!(kept.iter().all(|d| d.labels.holistic));

    let good: Vec<LabeledAnswer> = data.iter().filter(|d| d.labels.holistic).cloned().collect();
    assert_eq!(filter_dataset(&good), good);
    let bad: Vec<LabeledAnswer> = data.iter().filter(|d| !d.labels.holistic).cloned().collect();
    assert!(!bad.is_empty() && filter_dataset(&bad).is_empty());
    let mut p = policy.clone();
    assert!(matches!(
        mle_filter_train(&mut p, &bad, &SftConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn supervised_training_memorizes_one_sample() {
    let (mut policy, samples) = fixture(1);
    let cfg = SftConfig {
        steps: 2000,
        batch_size: 1,
        ..SftConfig::default()
    };
    let curve = sft_train(&mut policy, &samples, &cfg).unwrap();
    let hit = curve.iter().position(|&l| l < 0.05);
    assert!(hit.is_some(), "final loss {}", curve.last().unwrap());
}

#[test]
fn empty_contexts_teach_the_empty_answer() {
    let w = world();
    let cfg = SampleConfig {
        supported_fraction: 0.0,
        distractors: 0,
        ..SampleConfig::default()
    };
    let samples = gen_samples(&w, &cfg, 20, 3).unwrap();
    let mut policy = Policy::new(w.vocab(), Architecture::default(), 1).unwrap();
    sft_train(
        &mut policy,
        &samples,
        &SftConfig {
            steps: 300,
            ..SftConfig::default()
        },
    )
    .unwrap();
    let g = policy
        .two_stage_generate(&samples[0].prompt(), &GenerationConfig::default())
        .unwrap();
    assert_eq!(
        g.outline,
        vec![w.vocab().pattern(crate::synthworld::pattern_for(0)), OUTLINE_END]
    );
    assert_eq!(g.answer, vec![EOS]);
}

#[test]
fn empty_supervision_is_rejected() {
    let (mut policy, _) = fixture(0);
    assert!(matches!(
        sft_train(&mut policy, &[], &SftConfig::default()),
        Err(Error::Contract(_))
    ));
}

fn rl_setup(n: usize) -> (Policy, Vec<EnvSample>, PromptPool) {
    let (mut policy, samples) = fixture(n);
    randomize(&mut policy.store, &["out.w", "out.b"], 0.3, 8);
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    let gran = RmGranularity::new(EvalGranularity::Subclaim, ModelGranularity::Sequence);
    let gen = GenerationConfig {
        max_len: 8,
        ..GenerationConfig::default()
    };
    let pool = PromptPool::new(&policy, prompts, &RewardSource::Oracle(policy.vocab), &gran, &gen).unwrap();
    (policy, samples, pool)
}

fn fresh_state(policy: &Policy) -> RlhfState {
    RlhfState {
        policy: policy.clone(),
        value: ValueModel::new(policy.vocab.size(), small_arch(), 2).unwrap(),
        iteration: 0,
    }
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let (policy, samples, pool) = rl_setup(10);
    let mut cfg = small_ppo();
    cfg.policy_adam.lr = 0.0;
    cfg.value_adam.lr = 0.0;
    let mut state = fresh_state(&policy);
    let before = (state.policy.store.checksum(), state.value.store.checksum());
    let stats = ppo_iteration(
        &mut state,
        &policy,
        &RewardSource::Oracle(policy.vocab),
        &pool,
        &cfg,
        Some(&samples[..4]),
    )
    .unwrap();
    assert_eq!(before, (state.policy.store.checksum(), state.value.store.checksum()));
    assert!(stats.mean_kl.abs() < 1e-12);
    assert!(stats.probe.is_some() && stats.policy_loss.is_finite() && stats.value_loss.is_finite());
    assert_eq!(state.iteration, 1);
}

#[test]
fn reference_policy_stays_frozen() {
    let (policy, _, pool) = rl_setup(10);
    let reference = policy.clone();
    let sum = reference.store.checksum();
    let mut state = fresh_state(&policy);
    for _ in 0..3 {
        ppo_iteration(
            &mut state,
            &reference,
            &RewardSource::Oracle(policy.vocab),
            &pool,
            &small_ppo(),
            None,
        )
        .unwrap();
    }
    assert_eq!(reference.store.checksum(), sum);
    assert_ne!(state.policy.store.checksum(), sum);
}

#[test]
fn kl_ceiling_stops_the_iteration() {
    let (policy, _, pool) = rl_setup(10);
    let cfg = PpoConfig {
        kl_ceiling: -1.0,
        ..small_ppo()
    };
    let mut state = fresh_state(&policy);
    let before = state.policy.store.checksum();
    let stats = ppo_iteration(
        &mut state,
        &policy,
        &RewardSource::Oracle(policy.vocab),
        &pool,
        &cfg,
        None,
    )
    .unwrap();
    assert!(stats.early_stopped);
    assert_eq!(state.policy.store.checksum(), before);
}

#[test]
fn iterations_resume_exactly_from_checkpoints() {
    let (policy, _, pool) = rl_setup(10);
    let src = RewardSource::Oracle(policy.vocab);
    let cfg = small_ppo();
    let mut straight = fresh_state(&policy);
    let a: Vec<IterationStats> = (0..2)
        .map(|_| ppo_iteration(&mut straight, &policy, &src, &pool, &cfg, None).unwrap())
        .collect();

    let mut first = fresh_state(&policy);
    let b0 = ppo_iteration(&mut first, &policy, &src, &pool, &cfg, None).unwrap();
    let mut resumed = RlhfState {
        policy: Policy::from_bytes(&first.policy.to_bytes()).unwrap(),
        value: ValueModel::from_bytes(&first.value.to_bytes(&policy.vocab)).unwrap(),
        iteration: first.iteration,
    };
    let b1 = ppo_iteration(&mut resumed, &policy, &src, &pool, &cfg, None).unwrap();
    assert_eq!(a, vec![b0, b1]);
    assert_eq!(straight, resumed);
}

#[test]
fn invalid_ppo_settings_are_rejected() {
    for cfg in [
        PpoConfig {
            beta: -0.1,
            ..PpoConfig::default()
        },
        PpoConfig {
            gamma: 0.0,
            ..PpoConfig::default()
        },
        PpoConfig {
            gamma: 1.5,
            ..PpoConfig::default()
        },
        PpoConfig {
            clip: 1.0,
            ..PpoConfig::default()
        },
        PpoConfig {
            rollouts: 0,
            ..PpoConfig::default()
        },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn cached_answer_normalizes_to_zero() {
    let (policy, samples, _) = rl_setup(30);
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    let gran = RmGranularity::new(EvalGranularity::Holistic, ModelGranularity::Sequence);
    let src = RewardSource::Oracle(policy.vocab);
    let pool = PromptPool::new(&policy, prompts, &src, &gran, &GenerationConfig::default()).unwrap();
    for (p, (answer, base)) in pool.prompts.iter().zip(pool.sft_answers.iter().zip(&pool.baselines)) {
        let raw = src.score(&gran, &[(p, answer.as_slice())]).unwrap().remove(0);
        assert_eq!(normalize_reward(&raw, base, NormalizeMode::Mean).scores, vec![0.0]);
    }
}

#[test]
fn value_checkpoint_round_trips() {
    let (policy, _) = fixture(0);
    let mut v = ValueModel::new(policy.vocab.size(), small_arch(), 5).unwrap();
    randomize(&mut v.store, &["value.w"], 1.0, 2);
    let back = ValueModel::from_bytes(&v.to_bytes(&policy.vocab)).unwrap();
    assert_eq!(back, v);
    assert!(matches!(
        ValueModel::from_bytes(&policy.to_bytes()),
        Err(Error::Manifest(_))
    ));
}
