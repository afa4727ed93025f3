//! AdamW behaviour cloning on flow-matching targets, checkpoints and metrics.

mod checkpoint;
mod config;
mod optim;


use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use optim::{adamw_step, clip_grad_norm, global_norm, OptState};

use crate::autodiff::{Gradients, Tape};
use crate::embodiment::{transfer_weights, EmbodimentSpec};
use crate::error::{Error, Result};
use crate::flow::{fm_loss_on, make_flow_sample, FlowSample, SamplerConfig};
use crate::gym::{evaluate_grouped, overall_success, Dataset, EvalConfig, ModelPolicy};
use crate::model::{Batch, ConditioningBundle, HrdtModel, ModelConfig};
use crate::params::derive_seed;
use crate::tensor::Tensor;

/// Examples per tape. Fixed so the reduction order, and therefore every
/// result, is independent of the thread count.
pub const SHARD: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    /// Start from a checkpoint; with `transfer` the embodiment-specific
    /// adapters are re-initialised for the dataset's action space.
    Finetune {
        transfer: bool,
    },
    Scratch,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune { transfer: true } => "finetune-transfer",
            Stage::Finetune { transfer: false } => "finetune",
            Stage::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<BTreeMap<String, f64>>,
}

/// Episodes with actions and states already normalised.
struct Prepared {
    actions: Vec<Tensor<f32>>,
    states: Vec<Tensor<f32>>,
}

fn prepare(data: &Dataset) -> Result<Prepared> {
    let spec = data.spec();
    let mut actions = Vec::with_capacity(data.episodes.len());
    let mut states = Vec::with_capacity(data.episodes.len());
    for ep in &data.episodes {
        actions.push(spec.norm.normalize_rows(&ep.actions)?);
        states.push(spec.norm.normalize_rows(&ep.states)?);
    }
    Ok(Prepared { actions, states })
}

/// One training example: a normalised action chunk starting at a random
/// step of a random episode (padded by repeating the last action) and the
/// conditioning observed at that step.
pub struct Example {
    pub chunk: Tensor<f32>,
    pub cond: ConditioningBundle<f32>,
}

fn draw_example(
    data: &Dataset,
    prep: &Prepared,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let e = rng.random_range(0..data.episodes.len());
    let ep = &data.episodes[e];
    let t = rng.random_range(0..ep.len());
    let acts = &prep.actions[e];
    let da = acts.cols();
    let mut chunk = Vec::with_capacity(horizon * da);
    for i in 0..horizon {
        chunk.extend_from_slice(acts.row((t + i).min(ep.len() - 1)));
    }
    let state = prep.states[e].row(t).to_vec();
    Ok(Example {
        chunk: Tensor::new(vec![horizon, da], chunk)?,
        cond: ConditioningBundle {
            img_tokens: ep.img[t].clone(),
            lang_tokens: ep.lang.clone(),
            lang_len: ep.lang.rows(),
            state: Tensor::new(vec![state.len()], state)?,
        },
    })
}

/// Rng stream of one example; depends only on its position in the run.
fn example_rng(seed: u64, step: usize, micro: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("ex/{step}/{micro}/{index}")))
}

/// Loss and gradients of one shard; the loss is scaled by `shard/batch`
/// so shard results sum to the batch mean.
fn shard_grads(
    model: &HrdtModel<f32>,
    samples: &[(FlowSample<f32>, ConditioningBundle<f32>)],
    batch_size: usize,
) -> Result<(f64, Gradients<f32>)> {
    let cfg = model.config();
    let items: Vec<_> = samples.iter().map(|(s, c)| (&s.a_tau, s.tau, c)).collect();
    let batch = Batch::pack(cfg, &items)?;
    let target: Vec<f32> = samples
        .iter()
        .flat_map(|(s, _)| s.u_target.data().iter().copied())
        .collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let v = model.forward_on(&mut tape, &bound, &batch)?;
    let u = tape.constant(Tensor::new(
        vec![samples.len() * cfg.horizon, cfg.action_dim],
        target,
    )?);
    let loss = fm_loss_on(&mut tape, v, u)?;
    let loss = tape.scale(loss, samples.len() as f32 / batch_size as f32);
    let value = tape.value(loss).data()[0] as f64;
    Ok((value, tape.backward(loss)?))
}

fn add_into(acc: &mut Option<Gradients<f32>>, g: Gradients<f32>) -> Result<()> {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (name, t) in g {
                let slot = a
                    .get_mut(&name)
                    .ok_or_else(|| Error::PrefixSet(format!("unexpected gradient `{name}`")))?;
                *slot = slot.zip_map(&t, |x, y| x + y)?;
            }
        }
    }
    Ok(())
}

/// Mean loss and summed gradients of one micro-batch. Shards run on up to
/// `threads` workers and are reduced in shard order.
pub fn batch_gradients(
    model: &HrdtModel<f32>,
    samples: &[(FlowSample<f32>, ConditioningBundle<f32>)],
    threads: usize,
) -> Result<(f64, Gradients<f32>)> {
    let n = samples.len();
    let shards: Vec<_> = samples.chunks(SHARD).collect();
    let results: Vec<Result<(f64, Gradients<f32>)>> = if threads <= 1 || shards.len() == 1 {
        shards.iter().map(|s| shard_grads(model, s, n)).collect()
    } else {
        let per = shards.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .chunks(per)
                .map(|group| {
                    scope.spawn(move || {
                        group
                            .iter()
                            .map(|s| shard_grads(model, s, n))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };
    let mut loss = 0.0;
    let mut grads = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        add_into(&mut grads, g)?;
    }
    Ok((loss, grads.expect("at least one shard")))
}

/// Builds the flow-matching samples of one micro-batch.
pub fn draw_batch(
    data: &Dataset,
    cfg: &ModelConfig,
    seed: u64,
    step: usize,
    micro: usize,
    batch_size: usize,
) -> Result<Vec<(FlowSample<f32>, ConditioningBundle<f32>)>> {
    let prep = prepare(data)?;
    draw_prepared(data, &prep, cfg, seed, step, micro, batch_size)
}

fn draw_prepared(
    data: &Dataset,
    prep: &Prepared,
    cfg: &ModelConfig,
    seed: u64,
    step: usize,
    micro: usize,
    batch_size: usize,
) -> Result<Vec<(FlowSample<f32>, ConditioningBundle<f32>)>> {
    (0..batch_size)
        .map(|b| {
            let mut rng = example_rng(seed, step, micro, b);
            let ex = draw_example(data, prep, cfg.horizon, &mut rng)?;
            Ok((make_flow_sample(&ex.chunk, &mut rng)?, ex.cond))
        })
        .collect()
}

/// Mean over the dataset of `mean((a* − z)²)` for a fresh chunk: the
/// expected loss of a model that predicts zero velocity. Computed in closed
/// form as `E[a*²] + 1` over every chunk start.
pub fn zero_velocity_loss(data: &Dataset, horizon: usize) -> Result<f64> {
    let prep = prepare(data)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (e, ep) in data.episodes.iter().enumerate() {
        let acts = &prep.actions[e];
        for t in 0..ep.len() {
            for i in 0..horizon {
                sum += acts
                    .row((t + i).min(ep.len() - 1))
                    .iter()
                    .map(|&x| (x as f64).powi(2))
                    .sum::<f64>();
                count += acts.cols();
            }
        }
    }
    Ok(sum / count as f64 + 1.0)
}

/// Initial parameters for a stage.
pub fn initial_model(
    stage: Stage,
    init: Option<&Checkpoint>,
    spec: &EmbodimentSpec,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<HrdtModel<f32>> {
    let model_seed = derive_seed(seed, "model");
    match stage {
        Stage::Pretrain | Stage::Scratch => {
            if init.is_some() {
                return Err(Error::Config(format!(
                    "{} does not take an initial checkpoint",
                    stage.name()
                )));
            }
            spec.check_model(model_cfg)?;
            HrdtModel::new(model_cfg.clone(), model_seed)
        }
        Stage::Finetune { transfer } => {
            let ckpt = init
                .ok_or_else(|| Error::Config("fine-tuning needs an initial checkpoint".into()))?;
            if transfer {
                let cfg = ckpt
                    .model_config
                    .with_embodiment(spec.action_dim, spec.state_dim);
                let params = transfer_weights(&ckpt.params, &cfg, spec, model_seed)?;
                HrdtModel::from_parts(cfg, params)
            } else {
                ckpt.require_embodiment(spec)?;
                HrdtModel::from_parts(ckpt.model_config.clone(), ckpt.params.clone())
            }
        }
    }
}

/// Runs `cfg.steps` updates and returns the final checkpoint. `on_row`
/// receives every metrics row as soon as it is produced.
pub fn train(
    stage: Stage,
    init: Option<&Checkpoint>,
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let spec = data.spec().clone();
    let mut model = initial_model(stage, init, &spec, model_cfg, cfg.seed)?;
    spec.check_model(model.config())?;
    let mcfg = model.config().clone();
    let prep = prepare(data)?;
    let mut opt = OptState::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let start = Instant::now();
    let instances = data.instances();
    for step in 0..cfg.steps {
        let mut loss = 0.0;
        let mut grads = None;
        for micro in 0..cfg.accum {
            let samples = draw_prepared(data, &prep, &mcfg, cfg.seed, step, micro, cfg.batch_size)?;
            let (l, g) = batch_gradients(&model, &samples, cfg.threads)?;
            loss += l;
            add_into(&mut grads, g)?;
        }
        let loss = loss / cfg.accum as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                value: loss,
            });
        }
        let mut grads = grads.expect("accum >= 1");
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                value: grad_norm,
            });
        }
        adamw_step(
            model.params_mut(),
            &grads,
            &mut opt,
            cfg.lr,
            cfg.weight_decay,
        )?;

        let done = step + 1;
        let eval = if cfg.eval_every > 0 && done % cfg.eval_every == 0 && spec.name == "robot" {
            let policy = ModelPolicy {
                model: &model,
                spec: &spec,
                sampler: SamplerConfig::default(),
            };
            let ecfg = EvalConfig {
                threads: cfg.threads,
                ..EvalConfig::new(1, (mcfg.horizon / 2).max(1), cfg.seed)
            };
            let res = evaluate_grouped(&policy, &instances, &ecfg)?;
            let mut m: BTreeMap<String, f64> = res
                .iter()
                .map(|r| (r.task_id.clone(), r.success_rate))
                .collect();
            m.insert("overall".into(), overall_success(&res));
            Some(m)
        } else {
            None
        };
        on_row(&MetricsRow {
            step: done,
            loss,
            grad_norm,
            lr: cfg.lr,
            wall_ms: start.elapsed().as_millis() as u64,
            eval,
        })?;
    }
    Ok(Checkpoint {
        model_config: mcfg,
        embodiment: spec,
        params: model.into_params(),
        opt: Some(opt),
        meta: TrainMeta {
            stage: stage.name().into(),
            steps: cfg.steps,
            seed: cfg.seed,
            dataset_hash: data.content_hash()?,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
        },
    })
}
