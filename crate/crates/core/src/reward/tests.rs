use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::numeric::{finite_diff_check, GradCheck, NumericError};
use crate::segmentation::segment_answer;
use crate::synthworld::{
    gen_samples, gen_world, oracle_labels, EnvSample, FactTriple, SampleConfig, World, WorldConfig, EOS, SENT_END,
};

fn small_arch() -> Architecture {
    Architecture {
        embed: 8,
        hidden: 16,
        context_hidden: 8,
        window: 4,
        interactions: true,
    }
}

fn world() -> World {
    gen_world(WorldConfig::default(), 1).unwrap()
}

fn randomized(w: &World, seed: u64) -> RewardModel {
    let mut rm = RewardModel::new(w.vocab(), small_arch(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for name in ["seq.w", "seq.b", "tok.w", "tok.b"] {
        for x in rm.store.get_mut(name).unwrap().data_mut() {
            *x = normal.sample(&mut rng);
        }
    }
    rm
}

/// `[claim.., SENT_END]` per sentence, then `EOS`.
fn answer_of(w: &World, sentences: &[Vec<FactTriple>]) -> Vec<Token> {
    let v = w.vocab();
    let mut a = Vec::new();
    for s in sentences {
        a.extend(s.iter().map(|&t| v.claim(t)));
        a.push(SENT_END);
    }
    a.push(EOS);
    a
}

/// Random sentences mixing context claims and arbitrary claims.
fn random_answer<R: Rng>(w: &World, sample: &EnvSample, sentences: usize, rng: &mut R) -> Vec<Token> {
    let d = w.config;
    let body: Vec<Vec<FactTriple>> = (0..sentences)
        .map(|_| {
            (0..rng.random_range(1..=3))
                .map(|_| {
                    if rng.random_bool(0.5) && !sample.context.triples.is_empty() {
                        sample.context.triples[rng.random_range(0..sample.context.triples.len())]
                    } else {
                        FactTriple::new(
                            rng.random_range(0..d.entities),
                            rng.random_range(0..d.attributes),
                            rng.random_range(0..d.values),
                        )
                    }
                })
                .collect()
        })
        .collect();
    answer_of(w, &body)
}

fn labeled_set(w: &World, n: usize, seed: u64) -> Vec<LabeledAnswer> {
    let samples = gen_samples(w, &SampleConfig::default(), n, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let answer = random_answer(w, s, rng.random_range(1..=3), &mut rng);
            let segmap = segment_answer(&w.vocab(), &answer).unwrap();
            let labels = oracle_labels(&w.vocab(), &s.context, &answer, &segmap, AggKind::Min).unwrap();
            LabeledAnswer {
                prompt: s.prompt(),
                outline: s.demo_outline.clone(),
                answer,
                segmap,
                labels,
            }
        })
        .collect()
}

fn numeric(e: Error) -> NumericError {
    match e {
        Error::Numeric(n) => n,
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn zero_heads_score_one_half() {
    let w = world();
    let rm = RewardModel::new(w.vocab(), small_arch(), 0).unwrap();
    let data = labeled_set(&w, 4, 1);
    for gran in RmGranularity::all() {
        for d in &data {
            let items = [ScoreItem {
                prompt: &d.prompt,
                answer: &d.answer,
                segmap: &d.segmap,
            }];
            let r = rm.score_batch(&items, &gran).unwrap().remove(0);
            assert_eq!(r.len(), gran.segments(&d.segmap).num_segments());
            assert!(r.scores.iter().all(|&s| s == 0.5), "{}", gran.label());
        }
    }
}

#[test]
fn holistic_score_is_the_final_position_score() {
    let w = world();
    let rm = randomized(&w, 2);
    for d in labeled_set(&w, 20, 3) {
        let hol = rm
            .rm_seq_scores(&d.prompt, &d.answer, &d.segmap, EvalGranularity::Holistic)
            .unwrap();
        let sen = rm
            .rm_seq_scores(&d.prompt, &d.answer, &d.segmap, EvalGranularity::Sentence)
            .unwrap();
        assert_eq!(hol.len(), 1);
        assert!((hol.scores[0] - sen.scores.last().unwrap()).abs() < 1e-12);
        if d.segmap.num_segments() == 1 {
            assert!((hol.scores[0] - sen.scores[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn segment_scores_ignore_later_tokens() {
    let w = world();
    let rm = randomized(&w, 4);
    let samples = gen_samples(&w, &SampleConfig::default(), 20, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for s in &samples {
        let answer = random_answer(&w, s, 3, &mut rng);
        let segmap = segment_answer(&w.vocab(), &answer).unwrap();
        let first_end = segmap.sentence_ends[0];
        let mut other = answer.clone();
        let d = w.config;
        for t in first_end + 1..answer.len() {
            if w.vocab().claim_of(answer[t]).is_some() {
                other[t] = w.vocab().claim(FactTriple::new(
                    rng.random_range(0..d.entities),
                    rng.random_range(0..d.attributes),
                    rng.random_range(0..d.values),
                ));
            }
        }
        let other_map = segment_answer(&w.vocab(), &other).unwrap();
        assert_eq!(other_map.sentence_ends, segmap.sentence_ends);
        for gran in [
            RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Sequence),
            RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Token),
        ] {
            let prompt = s.prompt();
            let a = rm
                .score_batch(
                    &[ScoreItem {
                        prompt: &prompt,
                        answer: &answer,
                        segmap: &segmap,
                    }],
                    &gran,
                )
                .unwrap();
            let b = rm
                .score_batch(
                    &[ScoreItem {
                        prompt: &prompt,
                        answer: &other,
                        segmap: &other_map,
                    }],
                    &gran,
                )
                .unwrap();
            assert!((a[0].scores[0] - b[0].scores[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn token_scores_aggregate_per_segment() {
    let segmap = SegmentMap {
        len: 2,
        sentence_ends: vec![1],
        spans: vec![vec![0, 1]],
        subclaim_positions: vec![vec![0]],
    };
    let tok = [0.2, 0.8];
    assert!((aggregate_segments(&tok, &segmap, AggKind::Avg).scores[0] - 0.5).abs() < 1e-15);
    assert_eq!(aggregate_segments(&tok, &segmap, AggKind::Min).scores, vec![0.2]);
    assert_eq!(aggregate_segments(&tok, &segmap, AggKind::Max).scores, vec![0.8]);
}

#[test]
fn token_model_segment_score_lies_within_its_tokens() {
    let w = world();
    let rm = randomized(&w, 7);
    for d in labeled_set(&w, 20, 8) {
        for agg in [AggKind::Avg, AggKind::Min, AggKind::Max] {
            let (tok, seg) = rm
                .rm_token_scores(&d.prompt, &d.answer, &d.segmap, EvalGranularity::Sentence, agg)
                .unwrap();
            assert_eq!(tok.len(), d.answer.len());
            assert_eq!(seg, aggregate_segments(&tok, &d.segmap, agg));
            for (span, s) in d.segmap.spans.iter().zip(&seg.scores) {
                let xs: Vec<f64> = span.iter().map(|&t| tok[t]).collect();
                let lo = xs.iter().copied().fold(f64::MAX, f64::min);
                let hi = xs.iter().copied().fold(f64::MIN, f64::max);
                assert!(*s >= lo - 1e-15 && *s <= hi + 1e-15);
            }
        }
    }
}

#[test]
fn log_loss_reference_values() {
    let gran = RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Sequence);
    let one = RewardVector { scores: vec![1.0] };
    assert_eq!(rm_training_loss(&gran, &one, &[1.0]).unwrap(), 0.0);
    let half = RewardVector { scores: vec![0.5] };
    for y in [0.0, 1.0] {
        assert!((rm_training_loss(&gran, &half, &[y]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }
    let sub = RmGranularity::new(EvalGranularity::Subclaim, ModelGranularity::Sequence);
    let p = RewardVector {
        scores: vec![0.25, 1.0],
    };
    assert!((rm_training_loss(&sub, &p, &[0.75, 1.0]).unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn log_loss_is_minimized_at_the_positive_rate() {
    let gran = RmGranularity::new(EvalGranularity::Holistic, ModelGranularity::Sequence);
    let targets: Vec<f64> = (0..20).map(|i| (i % 4 == 0) as u8 as f64).collect();
    let loss = |p: f64| rm_training_loss(&gran, &RewardVector { scores: vec![p; 20] }, &targets).unwrap();
    let best = 0.25;
    for d in [0.01, 0.05, 0.2] {
        assert!(loss(best) < loss(best + d) && loss(best) < loss(best - d));
    }
}

#[test]
fn single_sentence_loss_equals_holistic_loss() {
    let w = world();
    let samples = gen_samples(&w, &SampleConfig::default(), 100, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sentence = RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Sequence);
    let holistic = RmGranularity::new(EvalGranularity::Holistic, ModelGranularity::Sequence);
    for (i, s) in samples.iter().enumerate() {
        let rm = randomized(&w, i as u64);
        let answer = random_answer(&w, s, 1, &mut rng);
        let segmap = segment_answer(&w.vocab(), &answer).unwrap();
        assert_eq!(segmap.num_segments(), 1);
        let labels = oracle_labels(&w.vocab(), &s.context, &answer, &segmap, AggKind::Min).unwrap();
        let prompt = s.prompt();
        let item = [ScoreItem {
            prompt: &prompt,
            answer: &answer,
            segmap: &segmap,
        }];
        let loss = |gran: &RmGranularity| {
            let mut tape = Tape::new(&rm.store);
            let out = rm.score_on(&mut tape, &item, gran).unwrap();
            let l = rm_training_loss_on(&mut tape, gran, out.segment_scores, &gran.targets(&labels)).unwrap();
            tape.value(l).item().unwrap()
        };
        assert!((loss(&sentence) - loss(&holistic)).abs() < 1e-12);
    }
}

#[test]
fn malformed_targets_are_rejected() {
    let gran = RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Sequence);
    let p = RewardVector { scores: vec![0.5, 0.5] };
    assert!(matches!(
        rm_training_loss(&gran, &p, &[1.0, 0.3]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(rm_training_loss(&gran, &p, &[1.0]), Err(Error::Structural(_))));
    let sub = RmGranularity::new(EvalGranularity::Subclaim, ModelGranularity::Token);
    assert!(rm_training_loss(&sub, &p, &[1.0, 0.3]).is_ok());
}

#[test]
fn every_granularity_loss_passes_gradient_checks() {
    let w = world();
    for gran in RmGranularity::all() {
        for seed in 0..2 {
            let rm = RewardModel {
                store: {
                    let mut r = randomized(&w, seed);
                    for x in r.store.get_mut("seq.w").unwrap().data_mut() {
                        *x *= 0.3;
                    }
                    for x in r.store.get_mut("tok.w").unwrap().data_mut() {
                        *x *= 0.3;
                    }
                    r.store
                },
                ..RewardModel::new(w.vocab(), small_arch(), seed).unwrap()
            };
            let data = labeled_set(&w, 4, seed + 20);
            let refs: Vec<&LabeledAnswer> = data.iter().collect();
            let items = items_of(&refs);
            let targets: Vec<f64> = data.iter().flat_map(|d| gran.targets(&d.labels)).collect();
            let check = GradCheck {
                coords_per_param: Some(6),
                seed,
                ..GradCheck::default()
            };
            let err = finite_diff_check(&rm.store, check, |t| {
                let out = rm.score_on(t, &items, &gran).map_err(numeric)?;
                rm_training_loss_on(t, &gran, out.segment_scores, &targets).map_err(numeric)
            })
            .unwrap();
            assert!(err < 1e-4, "{} error {err}", gran.label());
        }
    }
}

#[test]
fn normalization_shifts_by_the_baseline() {
    let raw = RewardVector {
        scores: vec![0.9, 0.2, 0.6],
    };
    let base = RewardVector { scores: vec![0.5, 1.0] };
    let close = |a: &RewardVector, b: &[f64]| a.scores.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
    assert!(close(
        &normalize_reward(&raw, &base, NormalizeMode::Mean),
        &[0.15, -0.55, -0.15]
    ));
    assert!(close(
        &normalize_reward(&raw, &base, NormalizeMode::FinalSegment),
        &[-0.1, -0.8, -0.4]
    ));
    assert_eq!(normalize_reward(&raw, &base, NormalizeMode::Zero), raw);
    let own = RewardVector { scores: vec![0.8] };
    assert_eq!(normalize_reward(&own, &own, NormalizeMode::Mean).scores, vec![0.0]);
}

#[test]
fn normalization_preserves_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let base = RewardVector {
            scores: (0..3).map(|_| rng.random::<f64>()).collect(),
        };
        for mode in [NormalizeMode::Mean, NormalizeMode::FinalSegment, NormalizeMode::Zero] {
            let n = normalize_reward(&RewardVector { scores: raw.clone() }, &base, mode);
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(raw[i] < raw[j], n.scores[i] < n.scores[j]);
                }
            }
        }
    }
}

#[test]
fn small_dataset_is_memorized() {
    let w = world();
    let data = labeled_set(&w, 8, 30);
    let mut rm = RewardModel::new(w.vocab(), RewardModel::default_arch(), 1).unwrap();
    let gran = RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Sequence);
    let cfg = RmTrainConfig {
        steps: 500,
        batch_size: 8,
        holdout_fraction: 0.0,
        ..RmTrainConfig::default()
    };
    let report = train_reward_model(&mut rm, &data, &gran, &cfg).unwrap();
    assert!(
        report.curve.iter().any(|&l| l < 0.01),
        "final {}",
        report.curve.last().unwrap()
    );
    assert_eq!(report.held_out, HeldOut::Accuracy(1.0));
}

#[test]
fn coin_flip_labels_are_not_learnable() {
    let w = world();
    let mut data = labeled_set(&w, 2000, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for d in &mut data {
        for r in &mut d.labels.per_sentence {
            *r = rng.random_bool(0.5);
        }
    }
    let mut rm = RewardModel::new(w.vocab(), small_arch(), 1).unwrap();
    let gran = RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Sequence);
    let cfg = RmTrainConfig {
        steps: 300,
        holdout_fraction: 0.5,
        ..RmTrainConfig::default()
    };
    match train_reward_model(&mut rm, &data, &gran, &cfg).unwrap().held_out {
        HeldOut::Accuracy(a) => assert!((a - 0.5).abs() <= 0.05, "accuracy {a}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_segment_map_is_structural() {
    let w = world();
    let rm = RewardModel::new(w.vocab(), small_arch(), 0).unwrap();
    let d = &labeled_set(&w, 1, 2)[0];
    let short = &d.answer[..d.answer.len() - 1];
    let gran = RmGranularity::new(EvalGranularity::Sentence, ModelGranularity::Sequence);
    let r = rm.score_batch(
        &[ScoreItem {
            prompt: &d.prompt,
            answer: short,
            segmap: &d.segmap,
        }],
        &gran,
    );
    assert!(matches!(r, Err(Error::Structural(_))));
}

#[test]
fn checkpoint_round_trips_with_granularity() {
    let w = world();
    let rm = randomized(&w, 9);
    let gran = RmGranularity {
        agg_t: AggKind::Min,
        ..RmGranularity::new(EvalGranularity::Subclaim, ModelGranularity::Token)
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rm.ckpt");
    rm.save(&gran, &path).unwrap();
    let (back, g) = RewardModel::load(&path).unwrap();
    assert_eq!((back, g), (rm, gran));

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 3);
    assert!(RewardModel::from_bytes(&bytes).is_err());
}

#[test]
fn labeled_dataset_round_trips() {
    let w = world();
    let data = labeled_set(&w, 10, 3);
    let mut buf = Vec::new();
    write_labeled(&mut buf, &data).unwrap();
    assert_eq!(read_labeled(buf.as_slice()).unwrap(), data);

    let text = String::from_utf8(buf).unwrap();
    let dropped: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    assert!(matches!(read_labeled(dropped.as_bytes()), Err(Error::Structural(_))));
    let bumped = text.replacen("\"vocab_version\":", "\"vocab_version\":9", 1);
    assert!(matches!(read_labeled(bumped.as_bytes()), Err(Error::Manifest(_))));
}

#[test]
fn sampled_rm_dataset_carries_oracle_labels() {
    let w = world();
    let policy = crate::policy::Policy::new(w.vocab(), small_arch_policy(), 1).unwrap();
    let samples = gen_samples(&w, &SampleConfig::default(), 5, 1).unwrap();
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    let cfg = RmDatasetConfig {
        size: 12,
        temperature: 1.0,
        seed: 4,
    };
    let data = generate_rm_dataset(&policy, &prompts, &cfg).unwrap();
    assert_eq!(data.len(), 12);
    for (i, d) in data.iter().enumerate() {
        assert_eq!(d.prompt, prompts[i % prompts.len()]);
        let segmap = segment_answer(&w.vocab(), &d.answer).unwrap();
        assert_eq!(segmap, d.segmap);
        assert_eq!(
            oracle_labels(&w.vocab(), &d.prompt.context, &d.answer, &segmap, AggKind::Min).unwrap(),
            d.labels
        );
    }
    assert_eq!(generate_rm_dataset(&policy, &prompts, &cfg).unwrap(), data);
}

fn small_arch_policy() -> Architecture {
    Architecture {
        interactions: false,
        ..small_arch()
    }
}
