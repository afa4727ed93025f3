//! Kinematic tabletop with two end-effector arms and attachment grasping.

use serde::{Deserialize, Serialize};

use crate::embodiment::{ArmCommand, RobotAction14};

/// Largest end-effector translation per step (m).
pub const MAX_STEP: f64 = 0.05;
/// Largest change of any Euler angle per step (rad).
pub const MAX_ROT: f64 = 0.2;
/// Gripper-to-object-center distance within which closing grasps (m).
pub const GRASP_RADIUS: f64 = 0.03;
pub const GRIP_THRESHOLD: f64 = 0.5;
pub const NOMINAL_TABLE: f64 = 0.0;
pub const BUTTON_HEIGHT: f64 = 0.02;
pub const PRESS_RADIUS: f64 = 0.025;

/// Workspace bounds `[min, max]` per axis, shared by both arms except for x reach.
pub const WORKSPACE_Y: [f64; 2] = [0.0, 0.6];
pub const WORKSPACE_Z: [f64; 2] = [-0.05, 0.5];
/// Each arm reaches 0.10 m past the midline.
pub const ARM_REACH_X: [[f64; 2]; 2] = [[-0.45, 0.10], [-0.10, 0.45]];

pub const HOME: [[f64; 3]; 2] = [[-0.2, 0.15, 0.25], [0.2, 0.15, 0.25]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    LeftArm,
    RightArm,
    Cube,
    Cup,
    Can,
    Block,
    Button,
    Target,
    Distractor,
}

impl EntityClass {
    pub const COUNT: usize = 9;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn graspable(self) -> bool {
        matches!(self, Self::Cube | Self::Cup | Self::Can | Self::Block)
    }

    /// Whether another object can rest on top of this one.
    fn supports(self) -> bool {
        matches!(self, Self::Cube | Self::Block)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub class: EntityClass,
    /// Center (m).
    pub pos: [f64; 3],
    /// Edge length / height (m).
    pub size: f64,
    pub yaw: f64,
    pub grasped_by: Option<usize>,
    pub ever_held: [bool; 2],
    pub pressed: bool,
    /// Appearance channel; nonzero only with color jitter.
    pub color: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub pos: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmState {
    pub ee_pos: [f64; 3],
    pub ee_euler: [f64; 3],
    pub gripper: f64,
}

impl ArmState {
    pub fn home(side: usize) -> Self {
        Self {
            ee_pos: HOME[side],
            ee_euler: [0.0; 3],
            gripper: 0.0,
        }
    }

    pub fn command(&self) -> ArmCommand {
        ArmCommand {
            ee_pos: self.ee_pos,
            ee_euler: self.ee_euler,
            gripper: self.gripper,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub table_height: f64,
    /// Task objects first (primary, then secondary if any), then distractors.
    pub objects: Vec<Object>,
    pub targets: Vec<Target>,
    pub arms: [ArmState; 2],
    pub step_count: usize,
    pub obs_noise_std: f64,
    pub noise_seed: u64,
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn dist_xy(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Moves `from` toward `to` by at most `max` (exact arrival when within reach).
pub fn move_toward(from: [f64; 3], to: [f64; 3], max: f64) -> [f64; 3] {
    let d = dist(from, to);
    if d <= max {
        return to;
    }
    let s = max / d;
    [
        from[0] + (to[0] - from[0]) * s,
        from[1] + (to[1] - from[1]) * s,
        from[2] + (to[2] - from[2]) * s,
    ]
}

fn clamp_pose(side: usize, p: [f64; 3]) -> [f64; 3] {
    [
        p[0].clamp(ARM_REACH_X[side][0], ARM_REACH_X[side][1]),
        p[1].clamp(WORKSPACE_Y[0], WORKSPACE_Y[1]),
        p[2].clamp(WORKSPACE_Z[0], WORKSPACE_Z[1]),
    ]
}

impl World {
    pub fn empty(table_height: f64) -> Self {
        Self {
            table_height,
            objects: Vec::new(),
            targets: Vec::new(),
            arms: [ArmState::home(0), ArmState::home(1)],
            step_count: 0,
            obs_noise_std: 0.0,
            noise_seed: 0,
        }
    }

    /// Center height of an object of `size` resting on the table.
    pub fn rest_z(&self, size: f64) -> f64 {
        self.table_height + 0.5 * size
    }

    pub fn held_by(&self, arm: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.grasped_by == Some(arm))
    }

    /// Command that leaves the arm where it is.
    pub fn hold(&self) -> RobotAction14 {
        RobotAction14 {
            arms: [self.arms[0].command(), self.arms[1].command()],
        }
    }

    /// Advances one control step. Commands are clamped to each arm's reach,
    /// then followed at bounded speed.
    pub fn step(&mut self, action: &RobotAction14) {
        let mut crossed_up = [false; 2];
        let mut crossed_down = [false; 2];
        for (side, cmd) in action.arms.iter().enumerate() {
            let arm = &mut self.arms[side];
            let goal = clamp_pose(
                side,
                cmd.ee_pos.map(|v| if v.is_finite() { v } else { 0.0 }),
            );
            arm.ee_pos = move_toward(arm.ee_pos, goal, MAX_STEP);
            for k in 0..3 {
                let target = if cmd.ee_euler[k].is_finite() {
                    cmd.ee_euler[k].clamp(-std::f64::consts::PI, std::f64::consts::PI)
                } else {
                    arm.ee_euler[k]
                };
                let delta = (target - arm.ee_euler[k]).clamp(-MAX_ROT, MAX_ROT);
                arm.ee_euler[k] += delta;
            }
            let g = if cmd.gripper.is_finite() {
                cmd.gripper.clamp(0.0, 1.0)
            } else {
                arm.gripper
            };
            crossed_up[side] = arm.gripper < GRIP_THRESHOLD && g >= GRIP_THRESHOLD;
            crossed_down[side] = arm.gripper >= GRIP_THRESHOLD && g < GRIP_THRESHOLD;
            arm.gripper = g;
        }
        for side in 0..2 {
            if crossed_down[side] {
                if let Some(i) = self.held_by(side) {
                    self.objects[i].grasped_by = None;
                    self.settle(i);
                }
            }
        }
        for side in 0..2 {
            if crossed_up[side] && self.held_by(side).is_none() {
                self.try_grasp(side);
            }
        }
        for i in 0..self.objects.len() {
            if let Some(side) = self.objects[i].grasped_by {
                self.objects[i].pos = self.arms[side].ee_pos;
                self.objects[i].yaw = self.arms[side].ee_euler[2];
            }
        }
        for side in 0..2 {
            let ee = self.arms[side].ee_pos;
            let table = self.table_height;
            for o in self
                .objects
                .iter_mut()
                .filter(|o| o.class == EntityClass::Button)
            {
                let top = table + BUTTON_HEIGHT;
                if dist_xy(ee, o.pos) <= PRESS_RADIUS && ee[2] <= top + 0.005 {
                    o.pressed = true;
                }
            }
        }
        self.step_count += 1;
    }

    /// Closest graspable object within reach of the gripper; an object held
    /// by the other gripper is taken over (handover).
    fn try_grasp(&mut self, side: usize) {
        let ee = self.arms[side].ee_pos;
        let best = self
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.class.graspable())
            .map(|(i, o)| (i, dist(ee, o.pos)))
            .filter(|&(_, d)| d < GRASP_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            let o = &mut self.objects[i];
            o.grasped_by = Some(side);
            o.ever_held[side] = true;
            o.pos = ee;
        }
    }

    /// Drops a released object onto whatever is below it.
    fn settle(&mut self, i: usize) {
        let me = self.objects[i].clone();
        let support = self
            .objects
            .iter()
            .enumerate()
            .filter(|&(j, o)| {
                j != i
                    && o.grasped_by.is_none()
                    && o.class.supports()
                    && dist_xy(o.pos, me.pos) <= 0.6 * o.size
                    && o.pos[2] < me.pos[2]
            })
            .map(|(_, o)| o.pos[2] + 0.5 * o.size)
            .fold(None, |acc: Option<f64>, top| {
                Some(acc.map_or(top, |a| a.max(top)))
            });
        let base = support.unwrap_or(self.table_height);
        self.objects[i].pos[2] = base + 0.5 * me.size;
    }

    /// Index of the object `i` rests on, if any.
    pub fn resting_on(&self, i: usize) -> Option<usize> {
        let me = &self.objects[i];
        if me.grasped_by.is_some() {
            return None;
        }
        self.objects.iter().enumerate().position(|(j, o)| {
            j != i
                && o.grasped_by.is_none()
                && o.class.supports()
                && dist_xy(o.pos, me.pos) <= 0.6 * o.size
                && (o.pos[2] + 0.5 * (o.size + me.size) - me.pos[2]).abs() < 1e-9
        })
    }
}
