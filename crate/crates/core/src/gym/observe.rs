//! Synthetic image and language tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tasks::TaskSpec;
use super::world::{EntityClass, World};
use super::{IMG_FEAT_DIM, LANG_FEAT_DIM, MAX_LANG_TOKENS, N_IMG_TOKENS};
use crate::embodiment::{euler_xyz_to_mat, HandPose, HumanAction48, HUMAN_DIM, ROBOT_DIM};
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::tensor::Tensor;

const POS_SCALE: f64 = 0.3;
const NUISANCE: usize = 3;
const POS_COL: usize = EntityClass::COUNT;

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `[N_IMG_TOKENS, IMG_FEAT_DIM]`, zero rows past the last entity.
    pub img: Tensor<f32>,
    /// `[lang_len, LANG_FEAT_DIM]`
    pub lang: Tensor<f32>,
    pub state: Vec<f64>,
}

/// Proprioceptive state in the layout of `embodiment` (`human` or `robot`).
pub fn state_vector(world: &World, embodiment: &str) -> Result<Vec<f64>> {
    match embodiment {
        "robot" => {
            let mut s = Vec::with_capacity(ROBOT_DIM);
            for arm in &world.arms {
                s.extend(arm.ee_pos);
                s.extend(arm.ee_euler);
                s.push(arm.gripper);
            }
            Ok(s)
        }
        "human" => {
            let hand = |k: usize| {
                let a = &world.arms[k];
                HandPose::from_wrist(a.ee_pos, &euler_xyz_to_mat(a.ee_euler), a.gripper)
            };
            let h = HumanAction48 {
                left: hand(0)?,
                right: hand(1)?,
            };
            let v = h.pack();
            debug_assert_eq!(v.len(), HUMAN_DIM);
            Ok(v.to_vec())
        }
        other => Err(Error::Config(format!("unknown embodiment `{other}`"))),
    }
}

fn token(
    class: EntityClass,
    pos: [f64; 3],
    size: f64,
    yaw: f64,
    flag: f64,
    nuisance: [f64; NUISANCE],
) -> [f32; IMG_FEAT_DIM] {
    let mut t = [0f32; IMG_FEAT_DIM];
    t[class.index()] = 1.0;
    for k in 0..3 {
        t[POS_COL + k] = (pos[k] / POS_SCALE) as f32;
    }
    t[POS_COL + 3] = (size * 10.0) as f32;
    t[POS_COL + 4] = yaw as f32;
    t[POS_COL + 5] = flag as f32;
    for k in 0..NUISANCE {
        t[POS_COL + 6 + k] = nuisance[k] as f32;
    }
    t
}

/// One token per arm, object and target (in that order). In hard mode the
/// last three channels carry appearance and per-step background noise,
/// seeded from the world so repeated observation is reproducible.
pub fn image_tokens(world: &World) -> Result<Tensor<f32>> {
    let n = 2 + world.objects.len() + world.targets.len();
    if n > N_IMG_TOKENS {
        return Err(Error::TooMany {
            what: "scene entities",
            got: n,
            limit: N_IMG_TOKENS,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        world.noise_seed ^ (world.step_count as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let std = world.obs_noise_std;
    let mut nuisance = |color: f64| {
        if std > 0.0 {
            [
                color,
                std * rng.sample::<f64, _>(StandardNormal),
                std * rng.sample::<f64, _>(StandardNormal),
            ]
        } else {
            [color, 0.0, 0.0]
        }
    };
    let mut rows: Vec<[f32; IMG_FEAT_DIM]> = Vec::with_capacity(N_IMG_TOKENS);
    for (k, arm) in world.arms.iter().enumerate() {
        let class = if k == 0 {
            EntityClass::LeftArm
        } else {
            EntityClass::RightArm
        };
        rows.push(token(
            class,
            arm.ee_pos,
            0.0,
            arm.ee_euler[2],
            arm.gripper,
            nuisance(0.0),
        ));
    }
    for o in &world.objects {
        let flag = if o.grasped_by.is_some() || o.pressed {
            1.0
        } else {
            0.0
        };
        rows.push(token(
            o.class,
            o.pos,
            o.size,
            o.yaw,
            flag,
            nuisance(o.color),
        ));
    }
    for t in &world.targets {
        rows.push(token(
            EntityClass::Target,
            t.pos,
            t.radius,
            0.0,
            0.0,
            nuisance(0.0),
        ));
    }
    rows.resize(N_IMG_TOKENS, [0.0; IMG_FEAT_DIM]);
    Tensor::new(vec![N_IMG_TOKENS, IMG_FEAT_DIM], rows.concat())
}

/// Fixed random vector for one instruction word.
fn word_vector(word: &str) -> [f32; LANG_FEAT_DIM] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x7a6e, word));
    std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) as f32)
}

/// Instruction embedding: one row per word, looked up in a fixed table, so
/// every episode of a task sees the same tokens.
pub fn language_tokens(task: &TaskSpec) -> Result<Tensor<f32>> {
    let words: Vec<&str> = task.instruction.split_whitespace().collect();
    if words.is_empty() || words.len() > MAX_LANG_TOKENS {
        return Err(Error::TooMany {
            what: "instruction words",
            got: words.len(),
            limit: MAX_LANG_TOKENS,
        });
    }
    let data: Vec<f32> = words.iter().flat_map(|w| word_vector(w)).collect();
    Tensor::new(vec![words.len(), LANG_FEAT_DIM], data)
}

pub fn observe(world: &World, task: &TaskSpec, embodiment: &str) -> Result<Observation> {
    Ok(Observation {
        img: image_tokens(world)?,
        lang: language_tokens(task)?,
        state: state_vector(world, embodiment)?,
    })
}
