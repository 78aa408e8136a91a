//! Pipeline stages over a run directory. Every stage reuses an artifact
//! that the manifest already lists, so an interrupted run resumes where it
//! stopped.
//!
//! Layout:
//!
//! ```text
//! config.toml  manifest.json  report.md  report.csv
//! data/{sft,rl,eval}.jsonl
//! seed-S/sft.ckpt  sft-curve.json  sft-answers.json  rm-data.jsonl
//! seed-S/rm-<gran>.ckpt  rm-<gran>.json
//! seed-S/unlikelihood.ckpt  mle-filter.ckpt
//! seed-S/rlhf-<gran>/{policy,value}.ckpt  progress.json  log.jsonl
//! seed-S/eval/<technique>.json  <technique>.records.jsonl
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::reward::{
    generate_rm_dataset, read_labeled, train_reward_model, write_labeled, LabeledAnswer, RewardModel, RmGranularity,
};
use crate::synthworld::{
    gen_samples, gen_world, read_samples, write_samples, DatasetHeader, EnvSample, Prompt, Token, Vocab,
};
use crate::training::{
    derive_seed, filter_dataset, mle_filter_train, ppo_iteration, sft_train, unlikelihood_train, PromptPool,
    RewardSource, RewardSourceKind, RlhfState, ValueModel,
};

use super::config::{RunConfig, Technique};
use super::metrics::{eval_policy, MetricsRow, OracleJudge};
use super::report::{write_report, MatrixRow, Outcome};
use super::rundir::RunDir;

pub const SFT_DATA: &str = "data/sft.jsonl";
pub const RL_DATA: &str = "data/rl.jsonl";
pub const EVAL_DATA: &str = "data/eval.jsonl";

pub fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

fn gran_slug(g: &RmGranularity) -> String {
    g.label().replace('/', "-")
}

/// Where a technique's final policy lives.
pub fn policy_path(seed: u64, technique: Technique) -> String {
    let s = seed_dir(seed);
    match technique {
        Technique::Sft => format!("{s}/sft.ckpt"),
        Technique::Unlikelihood => format!("{s}/unlikelihood.ckpt"),
        Technique::MleFilter => format!("{s}/mle-filter.ckpt"),
        Technique::Rlhf(g) => format!("{s}/rlhf-{}/policy.ckpt", gran_slug(&g)),
    }
}

pub fn row_path(seed: u64, technique: &str) -> String {
    format!("{}/eval/{technique}.json", seed_dir(seed))
}

/// Samples the three datasets from the configured world.
pub fn gen_data(cfg: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let world = gen_world(cfg.world(), cfg.world_seed)?;
    let sizes = [
        (SFT_DATA, cfg.sft_demos),
        (RL_DATA, cfg.rl_prompts),
        (EVAL_DATA, cfg.eval_samples),
    ];
    for (lane, (rel, n)) in sizes.into_iter().enumerate() {
        let samples = gen_samples(&world, &cfg.sample(), n, derive_seed(cfg.data_seed, 0, lane))?;
        let mut buf = Vec::new();
        write_samples(&mut buf, &DatasetHeader::new(cfg.world(), cfg.world_seed, n), &samples)?;
        dir.write(rel, &buf)?;
    }
    Ok(())
}

pub fn ensure_data(cfg: &RunConfig, dir: &mut RunDir) -> Result<()> {
    if [SFT_DATA, RL_DATA, EVAL_DATA].iter().all(|r| dir.has(r)) {
        return Ok(());
    }
    gen_data(cfg, dir)
}

pub fn load_samples(dir: &RunDir, rel: &str) -> Result<Vec<EnvSample>> {
    let (header, samples) = read_samples(&dir.read(rel)?[..])?;
    if header.vocab_size != Vocab::new(header.world).size() {
        return Err(Error::Manifest(format!("{rel} header disagrees with its vocabulary")));
    }
    Ok(samples)
}

fn rl_prompts(dir: &RunDir) -> Result<Vec<Prompt>> {
    Ok(load_samples(dir, RL_DATA)?.iter().map(|s| s.prompt()).collect())
}

/// A digest mismatch on a file that no longer parses is reported as the
/// corrupt checkpoint it is.
pub fn load_policy(dir: &RunDir, rel: &str) -> Result<Policy> {
    match dir.read(rel) {
        Ok(bytes) => Policy::from_bytes(&bytes),
        Err(Error::Manifest(m)) if dir.path(rel).exists() => {
            Policy::from_bytes(&std::fs::read(dir.path(rel))?)?;
            Err(Error::Manifest(m))
        }
        Err(e) => Err(e),
    }
}

pub fn sft_stage(cfg: &RunConfig, dir: &mut RunDir, seed: u64) -> Result<Policy> {
    let rel = policy_path(seed, Technique::Sft);
    if dir.has(&rel) {
        return load_policy(dir, &rel);
    }
    ensure_data(cfg, dir)?;
    let demos = load_samples(dir, SFT_DATA)?;
    let mut policy = Policy::new(Vocab::new(cfg.world()), cfg.policy_arch(), derive_seed(seed, 0, 0))?;
    if cfg.init_head_std > 0.0 {
        policy.randomize_head(cfg.init_head_std, derive_seed(seed, 0, 1))?;
    }
    let curve = if cfg.sft_steps == 0 {
        Vec::new()
    } else {
        sft_train(&mut policy, &demos, &cfg.sft(seed))?
    };
    log::info!(
        "seed {seed}: supervised loss {:.4}",
        curve.last().copied().unwrap_or(f64::NAN)
    );
    dir.write(&rel, &policy.to_bytes())?;
    dir.write_json(&format!("{}/sft-curve.json", seed_dir(seed)), &curve)?;
    Ok(policy)
}

/// Beam answers of the SFT policy on the RL prompts, shared by every
/// granularity's normalization.
pub fn sft_answers(cfg: &RunConfig, dir: &mut RunDir, seed: u64, sft: &Policy) -> Result<Vec<Vec<Token>>> {
    let rel = format!("{}/sft-answers.json", seed_dir(seed));
    if dir.has(&rel) {
        return dir.read_json(&rel);
    }
    let prompts = rl_prompts(dir)?;
    let mut answers = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(64) {
        let refs: Vec<&Prompt> = chunk.iter().collect();
        answers.extend(
            sft.two_stage_batch(&refs, &cfg.generation())?
                .into_iter()
                .map(|g| g.answer),
        );
    }
    dir.write_json(&rel, &answers)?;
    Ok(answers)
}

/// Oracle-labeled SFT rollouts on the RL prompts.
pub fn rm_data_stage(cfg: &RunConfig, dir: &mut RunDir, seed: u64, sft: &Policy) -> Result<Vec<LabeledAnswer>> {
    let rel = format!("{}/rm-data.jsonl", seed_dir(seed));
    if dir.has(&rel) {
        return read_labeled(&dir.read(&rel)?[..]);
    }
    let data = generate_rm_dataset(sft, &rl_prompts(dir)?, &cfg.rm_dataset(derive_seed(seed, 1, 0)))?;
    let mut buf = Vec::new();
    write_labeled(&mut buf, &data)?;
    dir.write(&rel, &buf)?;
    Ok(data)
}

pub fn rm_stage(
    cfg: &RunConfig,
    dir: &mut RunDir,
    seed: u64,
    gran: RmGranularity,
    sft: &Policy,
) -> Result<RewardModel> {
    let rel = format!("{}/rm-{}.ckpt", seed_dir(seed), gran_slug(&gran));
    if dir.has(&rel) {
        let (rm, stored) = RewardModel::from_bytes(&dir.read(&rel)?)?;
        if stored != gran {
            return Err(Error::Manifest(format!(
                "{rel} holds a {} reward model",
                stored.label()
            )));
        }
        return Ok(rm);
    }
    let data = rm_data_stage(cfg, dir, seed, sft)?;
    let mut rm = RewardModel::new(sft.vocab, cfg.rm_arch(), derive_seed(seed, 1, 1))?;
    let report = train_reward_model(&mut rm, &data, &gran, &cfg.rm_train(seed))?;
    log::info!(
        "seed {seed}: {} reward model held out {:?}",
        gran.label(),
        report.held_out
    );
    dir.write(&rel, &rm.to_bytes(&gran))?;
    dir.write_json(&format!("{}/rm-{}.json", seed_dir(seed), gran_slug(&gran)), &report)?;
    Ok(rm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    iteration: usize,
}

/// PPO from the SFT checkpoint, checkpointing every `checkpoint_every`
/// iterations and at the end. Resumes from the last checkpoint; log
/// records written after it are dropped and regenerated.
pub fn rlhf_stage(cfg: &RunConfig, dir: &mut RunDir, seed: u64, gran: RmGranularity, sft: &Policy) -> Result<Policy> {
    let base = format!("{}/rlhf-{}", seed_dir(seed), gran_slug(&gran));
    let (policy_rel, value_rel) = (format!("{base}/policy.ckpt"), format!("{base}/value.ckpt"));
    let (progress_rel, log_rel) = (format!("{base}/progress.json"), format!("{base}/log.jsonl"));

    let mut state = if dir.has(&progress_rel) {
        let p: Progress = dir.read_json(&progress_rel)?;
        RlhfState {
            policy: load_policy(dir, &policy_rel)?,
            value: ValueModel::from_bytes(&dir.read(&value_rel)?)?,
            iteration: p.iteration,
        }
    } else {
        RlhfState {
            policy: sft.clone(),
            value: ValueModel::new(sft.vocab.size(), cfg.policy_arch(), derive_seed(seed, 2, 0))?,
            iteration: 0,
        }
    };
    if state.iteration >= cfg.iterations {
        return Ok(state.policy);
    }

    let mut ppo = cfg.ppo(seed);
    ppo.granularity = gran;
    let rm = match cfg.reward_source {
        RewardSourceKind::RewardModel => Some(rm_stage(cfg, dir, seed, gran, sft)?),
        RewardSourceKind::Oracle => None,
    };
    let source = match &rm {
        Some(rm) => RewardSource::Model(rm),
        None => RewardSource::Oracle(sft.vocab),
    };
    let prompts = rl_prompts(dir)?;
    let answers = sft_answers(cfg, dir, seed, sft)?;
    let items: Vec<(&Prompt, &[Token])> = prompts.iter().zip(&answers).map(|(p, a)| (p, a.as_slice())).collect();
    let baselines = source.score(&gran, &items)?;
    let pool = PromptPool {
        prompts,
        sft_answers: answers,
        baselines,
    };
    let probe_set = if cfg.probe_every > 0 {
        let mut s = load_samples(dir, EVAL_DATA)?;
        s.truncate(cfg.probe_samples.max(1));
        Some(s)
    } else {
        None
    };

    let mut log = if dir.has(&log_rel) {
        let text = String::from_utf8_lossy(&dir.read(&log_rel)?).into_owned();
        let kept: Vec<&str> = text.lines().take(state.iteration).collect();
        kept.iter().map(|l| format!("{l}\n")).collect::<String>()
    } else {
        String::new()
    };
    while state.iteration < cfg.iterations {
        let probe = match &probe_set {
            Some(s) if (state.iteration + 1) % cfg.probe_every == 0 => Some(&s[..]),
            _ => None,
        };
        let stats = ppo_iteration(&mut state, sft, &source, &pool, &ppo, probe)?;
        log.push_str(&serde_json::to_string(&stats)?);
        log.push('\n');
        dir.write(&log_rel, log.as_bytes())?;
        let every = cfg.checkpoint_every.max(1);
        if state.iteration % every == 0 || state.iteration == cfg.iterations {
            dir.write(&policy_rel, &state.policy.to_bytes())?;
            dir.write(&value_rel, &state.value.to_bytes(&sft.vocab))?;
            dir.write_json(
                &progress_rel,
                &Progress {
                    iteration: state.iteration,
                },
            )?;
        }
    }
    log::info!("seed {seed}: {} finished {} iterations", gran.label(), state.iteration);
    Ok(state.policy)
}

/// Trains (or reloads) the policy a technique produces from the shared SFT
/// checkpoint.
pub fn technique_stage(
    cfg: &RunConfig,
    dir: &mut RunDir,
    seed: u64,
    technique: Technique,
    sft: &Policy,
) -> Result<Policy> {
    let rel = policy_path(seed, technique);
    match technique {
        Technique::Sft => Ok(sft.clone()),
        Technique::Rlhf(g) => rlhf_stage(cfg, dir, seed, g, sft),
        _ if dir.has(&rel) => load_policy(dir, &rel),
        Technique::Unlikelihood => {
            let data = rm_data_stage(cfg, dir, seed, sft)?;
            let mut policy = sft.clone();
            unlikelihood_train(&mut policy, &data, &cfg.unlikelihood(seed))?;
            dir.write(&rel, &policy.to_bytes())?;
            Ok(policy)
        }
        Technique::MleFilter => {
            let data = rm_data_stage(cfg, dir, seed, sft)?;
            log::info!(
                "seed {seed}: filter kept {} of {} answers",
                filter_dataset(&data).len(),
                data.len()
            );
            let mut policy = sft.clone();
            mle_filter_train(&mut policy, &data, &cfg.filter_sft(seed))?;
            dir.write(&rel, &policy.to_bytes())?;
            Ok(policy)
        }
    }
}

/// Beam evaluation on the held-out set; writes the row and per-sample
/// records.
pub fn eval_stage(cfg: &RunConfig, dir: &mut RunDir, seed: u64, name: &str, policy: &Policy) -> Result<MetricsRow> {
    let samples = load_samples(dir, EVAL_DATA)?;
    let judge = OracleJudge { vocab: policy.vocab };
    let (row, records) = eval_policy(policy, &samples, &judge, &cfg.generation())?;
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    dir.write(&format!("{}/eval/{name}.records.jsonl", seed_dir(seed)), &buf)?;
    dir.write_json(&row_path(seed, name), &Outcome::Ok { metrics: row })?;
    Ok(row)
}

fn failed(dir: &mut RunDir, seed: u64, name: &str, err: &Error) -> Result<Outcome> {
    log::warn!("seed {seed}: {name} failed: {err}");
    let outcome = Outcome::Failed { error: err.to_string() };
    dir.write_json(&row_path(seed, name), &outcome)?;
    Ok(outcome)
}

/// Shared SFT per seed, then every configured technique from it. A failing
/// stage marks its row failed and the matrix moves on. Writes the report
/// and returns its rows.
pub fn run_matrix(cfg: &RunConfig, dir: &mut RunDir) -> Result<Vec<MatrixRow>> {
    cfg.validate()?;
    dir.bind_config(cfg)?;
    ensure_data(cfg, dir)?;
    let techniques = cfg.techniques();
    for &seed in &cfg.seeds {
        let sft = match sft_stage(cfg, dir, seed) {
            Ok(p) => Some(p),
            Err(e) => {
                for t in &techniques {
                    failed(dir, seed, &t.name(), &e)?;
                }
                None
            }
        };
        let Some(sft) = sft else { continue };
        for &t in &techniques {
            let name = t.name();
            if dir.has(&row_path(seed, &name)) {
                if let Ok(Outcome::Ok { .. }) = dir.read_json::<Outcome>(&row_path(seed, &name)) {
                    continue;
                }
            }
            let result = technique_stage(cfg, dir, seed, t, &sft).and_then(|p| eval_stage(cfg, dir, seed, &name, &p));
            if let Err(e) = result {
                failed(dir, seed, &name, &e)?;
            }
        }
    }
    write_report(dir)
}
