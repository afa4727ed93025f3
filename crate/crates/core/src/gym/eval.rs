//! Closed-loop evaluation with chunked execution and replanning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::observe::observe;
use super::tasks::{expert_action, make_task, score, Mode, TaskSpec};
use super::world::World;
use super::STEP_BUDGET;
use crate::embodiment::{EmbodimentSpec, RobotAction14};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, SamplerConfig};
use crate::model::{ConditioningBundle, HrdtModel};
use crate::params::derive_seed;
use crate::tensor::Tensor;

/// Something that proposes a chunk of robot commands from the current scene.
pub trait Policy: Sync {
    /// Name of the action space the policy emits.
    fn action_space(&self) -> &str;
    fn horizon(&self) -> usize;
    fn plan(
        &self,
        world: &World,
        task: &TaskSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<RobotAction14>>;
}

/// The scripted expert, rolled forward on a copy of the world.
pub struct ExpertPolicy {
    pub horizon: usize,
}

impl Policy for ExpertPolicy {
    fn action_space(&self) -> &str {
        "robot"
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn plan(
        &self,
        world: &World,
        task: &TaskSpec,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<RobotAction14>> {
        let mut sim = world.clone();
        Ok((0..self.horizon)
            .map(|_| {
                let a = expert_action(&sim, task);
                sim.step(&a);
                a
            })
            .collect())
    }
}

/// A trained network sampled with the Euler sampler; outputs are
/// denormalized with the embodiment's statistics.
pub struct ModelPolicy<'a> {
    pub model: &'a HrdtModel<f32>,
    pub spec: &'a EmbodimentSpec,
    pub sampler: SamplerConfig,
}

impl ModelPolicy<'_> {
    pub fn bundle(&self, world: &World, task: &TaskSpec) -> Result<ConditioningBundle<f32>> {
        let obs = observe(world, task, &self.spec.name)?;
        let state = self.spec.norm.normalize(&obs.state);
        let lang_len = obs.lang.rows();
        Ok(ConditioningBundle {
            img_tokens: obs.img,
            lang_tokens: obs.lang,
            lang_len,
            state: Tensor::new(vec![state.len()], state.iter().map(|&v| v as f32).collect())?,
        })
    }
}

impl Policy for ModelPolicy<'_> {
    fn action_space(&self) -> &str {
        &self.spec.name
    }

    fn horizon(&self) -> usize {
        self.model.config().horizon
    }

    fn plan(
        &self,
        world: &World,
        task: &TaskSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<RobotAction14>> {
        let c = self.bundle(world, task)?;
        let chunk = euler_sample(self.model, &c, &self.sampler, rng)?;
        let chunk = self.spec.norm.denormalize_rows(&chunk)?;
        (0..chunk.rows())
            .map(|i| {
                let row: Vec<f64> = chunk.row(i).iter().map(|&v| v as f64).collect();
                RobotAction14::unpack(&row)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub trials: usize,
    pub replan_k: usize,
    pub seed: u64,
    pub mode: Mode,
    pub step_budget: usize,
    /// Worker threads for independent trials.
    pub threads: usize,
}

impl EvalConfig {
    pub fn new(trials: usize, replan_k: usize, seed: u64) -> Self {
        Self {
            trials,
            replan_k,
            seed,
            mode: Mode::Easy,
            step_budget: STEP_BUDGET,
            threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub score: f64,
    pub success: bool,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_score: f64,
}

/// Executes the first `replan_k` actions of each planned chunk until
/// success or the step budget. `noise_seed` drives the sampler noise.
pub fn run_trial(
    policy: &dyn Policy,
    task_id: &str,
    mode: Mode,
    world_seed: u64,
    noise_seed: u64,
    replan_k: usize,
    step_budget: usize,
) -> Result<TrialOutcome> {
    let (mut world, task) = make_task(task_id, mode, world_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut success = false;
    'outer: while world.step_count < step_budget {
        let chunk = policy.plan(&world, &task, &mut rng)?;
        for a in chunk.iter().take(replan_k) {
            world.step(a);
            if score(&world, &task).1 {
                success = true;
                break 'outer;
            }
            if world.step_count >= step_budget {
                break;
            }
        }
    }
    let (s, _) = score(&world, &task);
    Ok(TrialOutcome {
        score: s,
        success,
        steps: world.step_count,
    })
}

fn check(policy: &dyn Policy, replan_k: usize) -> Result<()> {
    if policy.action_space() != "robot" {
        return Err(Error::EmbodimentMismatch {
            expected: "robot".into(),
            found: policy.action_space().into(),
        });
    }
    if replan_k == 0 || replan_k > policy.horizon() {
        return Err(Error::Precondition(format!(
            "replan_k {replan_k} must be in 1..={}",
            policy.horizon()
        )));
    }
    Ok(())
}

/// Runs explicit `(task_id, world_seed)` instantiations; outcomes in input order.
pub fn evaluate_instances(
    policy: &dyn Policy,
    instances: &[(String, u64)],
    cfg: &EvalConfig,
) -> Result<Vec<TrialOutcome>> {
    check(policy, cfg.replan_k)?;
    let run = |(task, seed): &(String, u64)| {
        let noise = derive_seed(cfg.seed, &format!("policy/{task}/{seed}"));
        run_trial(
            policy,
            task,
            cfg.mode,
            *seed,
            noise,
            cfg.replan_k,
            cfg.step_budget,
        )
    };
    if cfg.threads <= 1 || instances.len() < 2 {
        return instances.iter().map(run).collect();
    }
    let per = instances.len().div_ceil(cfg.threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(per)
            .map(|part| s.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(instances.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn summarize(task_id: &str, outcomes: &[TrialOutcome]) -> TaskResult {
    let n = outcomes.len();
    let successes = outcomes.iter().filter(|o| o.success).count();
    let denom = n.max(1) as f64;
    TaskResult {
        task_id: task_id.into(),
        trials: n,
        successes,
        success_rate: successes as f64 / denom,
        mean_score: outcomes.iter().map(|o| o.score).sum::<f64>() / denom,
    }
}

/// `cfg.trials` fresh instantiations per task, seeded by `(cfg.seed, task, trial)`.
pub fn evaluate(
    policy: &dyn Policy,
    tasks: &[String],
    cfg: &EvalConfig,
) -> Result<Vec<TaskResult>> {
    let mut results = Vec::with_capacity(tasks.len());
    for task in tasks {
        TaskSpec::lookup(task, cfg.mode)?;
        let instances: Vec<(String, u64)> = (0..cfg.trials)
            .map(|i| {
                (
                    task.clone(),
                    derive_seed(cfg.seed, &format!("eval/{task}/{i}")),
                )
            })
            .collect();
        let outcomes = evaluate_instances(policy, &instances, cfg)?;
        results.push(summarize(task, &outcomes));
    }
    Ok(results)
}

/// Per-task results for explicit instantiations (e.g. the training episodes).
pub fn evaluate_grouped(
    policy: &dyn Policy,
    instances: &[(String, u64)],
    cfg: &EvalConfig,
) -> Result<Vec<TaskResult>> {
    let outcomes = evaluate_instances(policy, instances, cfg)?;
    let mut tasks: Vec<&String> = Vec::new();
    for (t, _) in instances {
        if !tasks.contains(&t) {
            tasks.push(t);
        }
    }
    Ok(tasks
        .into_iter()
        .map(|t| {
            let mine: Vec<TrialOutcome> = instances
                .iter()
                .zip(&outcomes)
                .filter(|((id, _), _)| id == t)
                .map(|(_, o)| *o)
                .collect();
            summarize(t, &mine)
        })
        .collect())
}

/// Mean success rate over results, weighting tasks by trial count.
pub fn overall_success(results: &[TaskResult]) -> f64 {
    let n: usize = results.iter().map(|r| r.trials).sum();
    let s: usize = results.iter().map(|r| r.successes).sum();
    s as f64 / n.max(1) as f64
}
