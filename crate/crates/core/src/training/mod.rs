mod baselines;
mod ppo;
mod sft;

pub use baselines::{
    filter_dataset, mle_filter_train, nonfactual_claim_loglik, sentence_token_rows, unlikelihood_loss_on,
    unlikelihood_train, UnlikelihoodConfig, UnlikelihoodLoss, UnlikelihoodReport, UNLIKELY_CLAMP,
};
pub use ppo::{
    compute_advantages, derive_seed, mean_kl, normalize_advantages, ppo_iteration, ppo_policy_loss_on, shape_rewards,
    value_loss_on, IterationStats, PpoConfig, PromptPool, RewardSource, RewardSourceKind, RlhfState, ValueModel,
};
pub use sft::{fit_targets, nll_gradient, sft_train, SftConfig, Target};

#[cfg(test)]
mod tests;
