//! Bimanual tabletop benchmark: kinematic world, task suite, scripted
//! expert, synthetic observations, datasets and closed-loop evaluation.

mod dataset;
mod eval;
mod observe;
mod tasks;
mod world;

#[cfg(test)]
mod tests;

pub use dataset::{
    episode_seed, exec_noise_rng, expert_episode, generate_dataset, perturb, successful_episode,
    Dataset, Episode, EpisodeEntry, Manifest, DATASET_VERSION, EPISODE_MAGIC, EXEC_NOISE,
    RETRY_BUDGET,
};
pub use eval::{
    evaluate, evaluate_grouped, evaluate_instances, overall_success, run_trial, summarize,
    EvalConfig, ExpertPolicy, ModelPolicy, Policy, TaskResult, TrialOutcome,
};
pub use observe::{image_tokens, language_tokens, observe, state_vector, Observation};
pub use tasks::{
    acting_arms, expert_action, make_task, parse_task_list, score, task_ids, ArmRule, Family, Mode,
    RandomizationConfig, TaskSpec,
};
pub use world::{
    dist, dist_xy, move_toward, ArmState, EntityClass, Object, Target, World, ARM_REACH_X,
    GRASP_RADIUS, GRIP_THRESHOLD, HOME, MAX_ROT, MAX_STEP,
};

/// Per-token image feature width.
pub const IMG_FEAT_DIM: usize = 18;
pub const LANG_FEAT_DIM: usize = 16;
/// Image token slots (arms, objects, targets, then zero padding).
pub const N_IMG_TOKENS: usize = 16;
pub const MAX_LANG_TOKENS: usize = 8;
/// Control steps per trial.
pub const STEP_BUDGET: usize = 120;
