//! Action spaces, normalization and cross-embodiment weight transfer.
//!
//! Human actions are 48-d: per hand (left, then right) wrist position (3),
//! wrist rotation in 6D form (6) and fingertip positions thumb→little (15).
//! Robot actions are 14-d: per arm (left, then right) end-effector position
//! (3), XYZ Euler angles (3) and gripper closure in `[0, 1]` (1). In both
//! spaces the proprioceptive state uses the action layout.

mod rotation;

pub use rotation::{
    axis_angle, det, euler_xyz_to_mat, mat_mul, mat_to_euler_xyz, mat_vec, orthonormality_error,
    rot6d_from_mat, rot6d_to_mat, transpose, Mat3, Rot6D, IDENTITY,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_prefixes, check_store, prefix_of, HrdtModel, ModelConfig, SHARED_PREFIXES,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HUMAN_DIM: usize = 48;
pub const ROBOT_DIM: usize = 14;
pub const HAND_DIM: usize = 24;
pub const ARM_DIM: usize = 7;
pub const STD_FLOOR: f64 = 1e-2;

pub const FINGERS: [&str; 5] = ["thumb", "index", "middle", "ring", "little"];
pub const SIDES: [&str; 2] = ["left", "right"];

// Canonical hand in the wrist frame. Thumb and index tips share the same
// reach so their distance equals the pinch width.
const REACH: f64 = 0.07;
const PINCH_OPEN: f64 = 0.09;
const PINCH_CLOSED: f64 = 0.01;
const FINGER_PITCH: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HandPose {
    pub wrist_pos: [f64; 3],
    pub wrist_rot6d: Rot6D,
    /// thumb, index, middle, ring, little
    pub fingertips: [[f64; 3]; 5],
}

impl HandPose {
    /// Checked constructor from loose slices.
    pub fn from_parts(
        wrist_pos: &[f64],
        wrist_rot6d: &[f64],
        fingertips: &[[f64; 3]],
    ) -> Result<Self> {
        if wrist_pos.len() != 3 || wrist_rot6d.len() != 6 || fingertips.len() != 5 {
            return Err(Error::shape(
                "hand_pose",
                &[wrist_pos.len(), wrist_rot6d.len(), fingertips.len()],
                &[3, 6, 5],
            ));
        }
        let mut pose = HandPose::default();
        pose.wrist_pos.copy_from_slice(wrist_pos);
        pose.wrist_rot6d.copy_from_slice(wrist_rot6d);
        pose.fingertips.copy_from_slice(fingertips);
        Ok(pose)
    }

    fn write(&self, out: &mut [f64]) {
        out[..3].copy_from_slice(&self.wrist_pos);
        out[3..9].copy_from_slice(&self.wrist_rot6d);
        for (k, tip) in self.fingertips.iter().enumerate() {
            out[9 + 3 * k..12 + 3 * k].copy_from_slice(tip);
        }
    }

    fn read(v: &[f64]) -> Self {
        let mut pose = HandPose::default();
        pose.wrist_pos.copy_from_slice(&v[..3]);
        pose.wrist_rot6d.copy_from_slice(&v[3..9]);
        for (k, tip) in pose.fingertips.iter_mut().enumerate() {
            tip.copy_from_slice(&v[9 + 3 * k..12 + 3 * k]);
        }
        pose
    }

    /// Hand at a wrist pose with the pinch set from a gripper closure in `[0, 1]`.
    pub fn from_wrist(pos: [f64; 3], rot: &Mat3, closure: f64) -> Result<Self> {
        let g = closure.clamp(0.0, 1.0);
        let width = PINCH_OPEN + (PINCH_CLOSED - PINCH_OPEN) * g;
        let curl = 1.0 - 0.4 * g;
        let local = [
            [REACH, 0.5 * width, 0.0],
            [REACH, -0.5 * width, 0.0],
            [REACH * curl, -0.5 * width - FINGER_PITCH, 0.0],
            [REACH * curl, -0.5 * width - 2.0 * FINGER_PITCH, 0.0],
            [REACH * curl, -0.5 * width - 3.0 * FINGER_PITCH, 0.0],
        ];
        let fingertips = local.map(|l| {
            let w = mat_vec(rot, l);
            [pos[0] + w[0], pos[1] + w[1], pos[2] + w[2]]
        });
        Ok(Self {
            wrist_pos: pos,
            wrist_rot6d: rot6d_from_mat(rot)?,
            fingertips,
        })
    }

    pub fn pinch_width(&self) -> f64 {
        let [t, i] = [self.fingertips[0], self.fingertips[1]];
        ((t[0] - i[0]).powi(2) + (t[1] - i[1]).powi(2) + (t[2] - i[2]).powi(2)).sqrt()
    }

    /// Gripper closure implied by the thumb–index distance.
    pub fn closure(&self) -> f64 {
        ((PINCH_OPEN - self.pinch_width()) / (PINCH_OPEN - PINCH_CLOSED)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HumanAction48 {
    pub left: HandPose,
    pub right: HandPose,
}

impl HumanAction48 {
    pub fn pack(&self) -> [f64; HUMAN_DIM] {
        let mut out = [0.0; HUMAN_DIM];
        self.left.write(&mut out[..HAND_DIM]);
        self.right.write(&mut out[HAND_DIM..]);
        out
    }

    pub fn unpack(v: &[f64]) -> Result<Self> {
        if v.len() != HUMAN_DIM {
            return Err(Error::shape("human_action", &[v.len()], &[HUMAN_DIM]));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("human action must be finite".into()));
        }
        Ok(Self {
            left: HandPose::read(&v[..HAND_DIM]),
            right: HandPose::read(&v[HAND_DIM..]),
        })
    }

    pub fn hand(&self, side: usize) -> &HandPose {
        if side == 0 {
            &self.left
        } else {
            &self.right
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ArmCommand {
    pub ee_pos: [f64; 3],
    pub ee_euler: [f64; 3],
    pub gripper: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RobotAction14 {
    pub arms: [ArmCommand; 2],
}

impl RobotAction14 {
    pub fn pack(&self) -> [f64; ROBOT_DIM] {
        let mut out = [0.0; ROBOT_DIM];
        for (a, arm) in self.arms.iter().enumerate() {
            let o = &mut out[a * ARM_DIM..(a + 1) * ARM_DIM];
            o[..3].copy_from_slice(&arm.ee_pos);
            o[3..6].copy_from_slice(&arm.ee_euler);
            o[6] = arm.gripper;
        }
        out
    }

    /// Reads a 14-vector; the gripper is clamped into `[0, 1]`.
    pub fn unpack(v: &[f64]) -> Result<Self> {
        if v.len() != ROBOT_DIM {
            return Err(Error::shape("robot_action", &[v.len()], &[ROBOT_DIM]));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("robot action must be finite".into()));
        }
        let arm = |o: &[f64]| ArmCommand {
            ee_pos: [o[0], o[1], o[2]],
            ee_euler: [o[3], o[4], o[5]],
            gripper: o[6].clamp(0.0, 1.0),
        };
        Ok(Self {
            arms: [arm(&v[..ARM_DIM]), arm(&v[ARM_DIM..])],
        })
    }

    /// Same end-effector poses expressed as hands: wrist = end effector,
    /// pinch width set by the gripper.
    pub fn to_human(&self) -> Result<HumanAction48> {
        let hand = |a: &ArmCommand| {
            HandPose::from_wrist(a.ee_pos, &euler_xyz_to_mat(a.ee_euler), a.gripper)
        };
        Ok(HumanAction48 {
            left: hand(&self.arms[0])?,
            right: hand(&self.arms[1])?,
        })
    }

    /// Inverse of [`RobotAction14::to_human`]; Euler angles come back in
    /// the principal range.
    pub fn from_human(h: &HumanAction48) -> Result<Self> {
        let arm = |p: &HandPose| -> Result<ArmCommand> {
            Ok(ArmCommand {
                ee_pos: p.wrist_pos,
                ee_euler: mat_to_euler_xyz(&rot6d_to_mat(&p.wrist_rot6d)?),
                gripper: p.closure(),
            })
        };
        Ok(Self {
            arms: [arm(&h.left)?, arm(&h.right)?],
        })
    }
}

/// Per-dimension z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Population mean/std per dimension, std clamped below at [`STD_FLOOR`].
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for row in rows {
            if n == 0 {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            } else if row.len() != sum.len() {
                return Err(Error::shape("fit_norm_stats", &[row.len()], &[sum.len()]));
            }
            for (k, &x) in row.iter().enumerate() {
                sum[k] += x;
                sq[k] += x * x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Precondition(
                "cannot fit normalization on an empty dataset".into(),
            ));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::shape(
                "norm_stats",
                &[self.mean.len()],
                &[self.std.len()],
            ));
        }
        if self.std.iter().any(|&s| !(s >= STD_FLOOR)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Precondition(format!(
                "norm std entries must be >= {STD_FLOOR}"
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Row-wise [`NormStats::normalize`] of a `[rows, dim]` tensor.
    pub fn normalize_rows<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.map_rows(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_rows<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.map_rows(x, |v, m, s| v * s + m)
    }

    fn map_rows<T: Scalar>(
        &self,
        x: &Tensor<T>,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor<T>> {
        let d = *x.shape().last().expect("rank >= 1");
        if d != self.dim() {
            return Err(Error::shape("normalize", x.shape(), &[self.dim()]));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::lit(f(v.as_f64(), self.mean[i % d], self.std[i % d])))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// An action space as recorded in dataset manifests and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub name: String,
    pub action_dim: usize,
    pub state_dim: usize,
    pub labels: Vec<String>,
    /// Shared by actions and states, which use the same layout.
    pub norm: NormStats,
}

impl EmbodimentSpec {
    pub fn human() -> Self {
        let mut labels = Vec::with_capacity(HUMAN_DIM);
        for side in SIDES {
            labels.extend(["x", "y", "z"].map(|a| format!("{side}.wrist_pos.{a}")));
            labels.extend((0..6).map(|k| format!("{side}.wrist_rot6d.{k}")));
            for f in FINGERS {
                labels.extend(["x", "y", "z"].map(|a| format!("{side}.{f}.{a}")));
            }
        }
        Self::with_labels("human", labels)
    }

    pub fn robot() -> Self {
        let mut labels = Vec::with_capacity(ROBOT_DIM);
        for side in SIDES {
            labels.extend(["x", "y", "z"].map(|a| format!("{side}.ee_pos.{a}")));
            labels.extend(["x", "y", "z"].map(|a| format!("{side}.ee_euler.{a}")));
            labels.push(format!("{side}.gripper"));
        }
        Self::with_labels("robot", labels)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "human" => Ok(Self::human()),
            "robot" => Ok(Self::robot()),
            other => Err(Error::Config(format!(
                "unknown embodiment `{other}` (expected human|robot)"
            ))),
        }
    }

    fn with_labels(name: &str, labels: Vec<String>) -> Self {
        let d = labels.len();
        Self {
            name: name.into(),
            action_dim: d,
            state_dim: d,
            labels,
            norm: NormStats::identity(d),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.action_dim {
            return Err(Error::shape(
                "embodiment labels",
                &[self.labels.len()],
                &[self.action_dim],
            ));
        }
        if self.norm.dim() != self.action_dim || self.state_dim != self.action_dim {
            return Err(Error::shape(
                "embodiment norm",
                &[self.norm.dim(), self.state_dim],
                &[self.action_dim],
            ));
        }
        self.norm.validate()
    }

    /// Errors unless `cfg` has this embodiment's action and state sizes.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.action_dim != self.action_dim || cfg.state_dim != self.state_dim {
            return Err(Error::EmbodimentMismatch {
                expected: format!(
                    "{} ({}-d actions, {}-d state)",
                    self.name, self.action_dim, self.state_dim
                ),
                found: format!(
                    "model with {}-d actions, {}-d state",
                    cfg.action_dim, cfg.state_dim
                ),
            });
        }
        Ok(())
    }
}

/// Stage-2 initialization: copies the backbone, image/language adapters and
/// flow-time embedding bit-exactly from `pretrained`, and freshly initializes
/// the state adapter, action adapter and action decoder for `target_cfg`.
pub fn transfer_weights<T: Scalar>(
    pretrained: &ParamStore<T>,
    target_cfg: &ModelConfig,
    target_spec: &EmbodimentSpec,
    seed: u64,
) -> Result<ParamStore<T>> {
    check_prefixes(pretrained)?;
    target_spec.validate()?;
    target_spec.check_model(target_cfg)?;
    let mut out = HrdtModel::<T>::new(target_cfg.clone(), seed)?.into_params();
    let shared = |name: &str| prefix_of(name).is_some_and(|p| SHARED_PREFIXES.contains(&p));
    for name in pretrained.names().filter(|n| shared(n)) {
        if out.get(name).is_none() {
            return Err(Error::PrefixSet(format!(
                "pretrained `{name}` has no counterpart in the target model"
            )));
        }
    }
    for p in out.iter_mut().filter(|p| shared(&p.name)) {
        let src = pretrained
            .get(&p.name)
            .ok_or_else(|| Error::PrefixSet(format!("pretrained store lacks `{}`", p.name)))?;
        if src.tensor.shape() != p.tensor.shape() {
            return Err(Error::shape(
                "transfer",
                src.tensor.shape(),
                p.tensor.shape(),
            ));
        }
        p.tensor = src.tensor.clone();
        p.init = src.init.clone();
    }
    check_store(target_cfg, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests;
