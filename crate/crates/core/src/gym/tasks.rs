//! Task registry, scene sampling, graded scoring and the scripted expert.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{
    dist, dist_xy, move_toward, ArmState, EntityClass, Object, Target, World, BUTTON_HEIGHT, HOME,
    MAX_ROT, MAX_STEP,
};
use crate::embodiment::{ArmCommand, RobotAction14};
use crate::error::{Error, Result};
use crate::params::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Easy,
    Hard,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected easy|hard)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Easy => "easy",
            Self::Hard => "hard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PickPlace,
    Handover,
    Stack,
    Press,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmRule {
    Left,
    Right,
    /// The arm on the object's side of the table.
    Either,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomizationConfig {
    /// Uniform jitter half-width on the table height (m).
    pub table_height_jitter: f64,
    /// Inclusive range of distractor counts.
    pub n_distractors: (usize, usize),
    pub obs_noise_std: f64,
    pub color_jitter: bool,
}

impl RandomizationConfig {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Easy => Self {
                table_height_jitter: 0.0,
                n_distractors: (0, 0),
                obs_noise_std: 0.0,
                color_jitter: false,
            },
            Mode::Hard => Self {
                table_height_jitter: 0.03,
                n_distractors: (2, 5),
                obs_noise_std: 0.05,
                color_jitter: true,
            },
        }
    }
}

struct TaskDef {
    id: &'static str,
    family: Family,
    arm: ArmRule,
    instruction: &'static str,
}

const REGISTRY: [TaskDef; 8] = [
    TaskDef {
        id: "pick_place_cube_left",
        family: Family::PickPlace,
        arm: ArmRule::Left,
        instruction: "left hand pick cube place on target",
    },
    TaskDef {
        id: "pick_place_cube_right",
        family: Family::PickPlace,
        arm: ArmRule::Right,
        instruction: "right hand pick cube place on target",
    },
    TaskDef {
        id: "pick_place_cup_select",
        family: Family::PickPlace,
        arm: ArmRule::Either,
        instruction: "nearest hand pick cup place on target",
    },
    TaskDef {
        id: "pick_place_can_select",
        family: Family::PickPlace,
        arm: ArmRule::Either,
        instruction: "nearest hand pick can place on target",
    },
    TaskDef {
        id: "stack_blocks",
        family: Family::Stack,
        arm: ArmRule::Either,
        instruction: "stack block on other block",
    },
    TaskDef {
        id: "press_button",
        family: Family::Press,
        arm: ArmRule::Either,
        instruction: "nearest hand press button",
    },
    TaskDef {
        id: "press_dual",
        family: Family::Press,
        arm: ArmRule::Both,
        instruction: "both hands press both buttons",
    },
    TaskDef {
        id: "handover",
        family: Family::Handover,
        arm: ArmRule::Both,
        instruction: "pass cube from left hand to right target",
    },
];

pub fn task_ids() -> Vec<&'static str> {
    REGISTRY.iter().map(|t| t.id).collect()
}

/// `all`, a family name, or a comma-separated list of task ids / family names.
pub fn parse_task_list(list: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let matched: Vec<&str> = if item == "all" {
            task_ids()
        } else if let Some(def) = REGISTRY.iter().find(|t| t.id == item) {
            vec![def.id]
        } else {
            let fam: Family = serde_json::from_value(serde_json::Value::String(item.into()))
                .map_err(|_| Error::UnknownTask(item.into()))?;
            REGISTRY
                .iter()
                .filter(|t| t.family == fam)
                .map(|t| t.id)
                .collect()
        };
        for id in matched {
            if !out.iter().any(|o| o == id) {
                out.push(id.into());
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty task list".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub family: Family,
    pub required_arm: ArmRule,
    pub lang_seed: u64,
    pub instruction: String,
    pub mode: Mode,
}

impl TaskSpec {
    pub fn lookup(task_id: &str, mode: Mode) -> Result<Self> {
        let def = REGISTRY
            .iter()
            .find(|t| t.id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.into()))?;
        Ok(Self {
            task_id: def.id.into(),
            family: def.family,
            required_arm: def.arm,
            lang_seed: derive_seed(0x1a6e, def.id),
            instruction: def.instruction.into(),
            mode,
        })
    }
}

const SIZE: [(EntityClass, f64); 5] = [
    (EntityClass::Cube, 0.04),
    (EntityClass::Cup, 0.05),
    (EntityClass::Can, 0.05),
    (EntityClass::Block, 0.04),
    (EntityClass::Button, BUTTON_HEIGHT),
];
const TARGET_RADIUS: f64 = 0.05;
const MIN_SEPARATION: f64 = 0.09;
/// Object sampling region on one side of the table: `x` range for the left
/// side (mirrored for the right) and shared `y` range.
const REGION_X: [f64; 2] = [-0.34, -0.14];
const REGION_Y: [f64; 2] = [0.15, 0.45];
const APPROACH: f64 = 0.08;
const CARRY: f64 = 0.15;
const HANDOVER_POINT: [f64; 2] = [0.0, 0.3];
const HANDOVER_WAIT: f64 = 0.08;
/// Distance at which the expert treats a waypoint as reached.
const NEAR: f64 = 0.01;
/// Horizontal distance over which approach height tapers to zero.
const FUNNEL: f64 = 0.05;

fn size_of(class: EntityClass) -> f64 {
    SIZE.iter().find(|s| s.0 == class).map_or(0.04, |s| s.1)
}

struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
    placed: Vec<[f64; 2]>,
}

impl Sampler<'_> {
    /// Point in the given side's region, separated from everything placed so far.
    fn point(&mut self, side: usize) -> [f64; 2] {
        loop {
            let x = self.rng.random_range(REGION_X[0]..REGION_X[1]);
            let x = if side == 0 { x } else { -x };
            let y = self.rng.random_range(REGION_Y[0]..REGION_Y[1]);
            let ok = self
                .placed
                .iter()
                .all(|p| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt() >= MIN_SEPARATION);
            if ok {
                self.placed.push([x, y]);
                return [x, y];
            }
        }
    }

    /// Distractors go anywhere on the table, including the middle strip.
    fn anywhere(&mut self) -> [f64; 2] {
        for _ in 0..1000 {
            let x = self.rng.random_range(-0.4..0.4);
            let y = self.rng.random_range(0.1..0.55);
            if self
                .placed
                .iter()
                .all(|p| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt() >= MIN_SEPARATION)
            {
                self.placed.push([x, y]);
                return [x, y];
            }
        }
        [0.0, 0.58]
    }
}

fn object(world: &World, class: EntityClass, xy: [f64; 2], yaw: f64, color: f64) -> Object {
    let size = size_of(class);
    Object {
        class,
        pos: [xy[0], xy[1], world.rest_z(size)],
        size,
        yaw,
        grasped_by: None,
        ever_held: [false; 2],
        pressed: false,
        color,
    }
}

/// Samples a scene for `task_id`; fully determined by `(task_id, mode, seed)`.
pub fn make_task(task_id: &str, mode: Mode, seed: u64) -> Result<(World, TaskSpec)> {
    let spec = TaskSpec::lookup(task_id, mode)?;
    let rand_cfg = RandomizationConfig::for_mode(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task_id));
    let jitter = rand_cfg.table_height_jitter;
    let table = super::world::NOMINAL_TABLE
        + if jitter > 0.0 {
            rng.random_range(-jitter..=jitter)
        } else {
            0.0
        };
    let mut world = World::empty(table);
    world.obs_noise_std = rand_cfg.obs_noise_std;
    world.noise_seed = rng.random();
    let color_jitter = rand_cfg.color_jitter;
    let color = |rng: &mut ChaCha8Rng| {
        if color_jitter {
            rng.random_range(0.0..1.0)
        } else {
            0.0
        }
    };

    let side: usize = match spec.required_arm {
        ArmRule::Left | ArmRule::Both => 0,
        ArmRule::Right => 1,
        ArmRule::Either => rng.random_range(0..2),
    };
    let yaw = |rng: &mut ChaCha8Rng| rng.random_range(-0.5..0.5);
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let (y0, y1) = (yaw(&mut rng), yaw(&mut rng));
    let mut s = Sampler {
        rng: &mut rng,
        placed: Vec::new(),
    };
    match task_id {
        "stack_blocks" => {
            let a = s.point(side);
            let b = s.point(side);
            world
                .objects
                .push(object(&world, EntityClass::Block, a, y0, c0));
            world
                .objects
                .push(object(&world, EntityClass::Block, b, y1, c1));
        }
        "press_button" => {
            let a = s.point(side);
            world
                .objects
                .push(object(&world, EntityClass::Button, a, 0.0, c0));
        }
        "press_dual" => {
            let a = s.point(0);
            let b = s.point(1);
            world
                .objects
                .push(object(&world, EntityClass::Button, a, 0.0, c0));
            world
                .objects
                .push(object(&world, EntityClass::Button, b, 0.0, c1));
        }
        "handover" => {
            let a = s.point(0);
            let t = s.point(1);
            world
                .objects
                .push(object(&world, EntityClass::Cube, a, y0, c0));
            world.targets.push(Target {
                pos: [t[0], t[1], table],
                radius: TARGET_RADIUS,
            });
        }
        _ => {
            let class = match task_id {
                "pick_place_cup_select" => EntityClass::Cup,
                "pick_place_can_select" => EntityClass::Can,
                _ => EntityClass::Cube,
            };
            let a = s.point(side);
            let t = s.point(side);
            world.objects.push(object(&world, class, a, y0, c0));
            world.targets.push(Target {
                pos: [t[0], t[1], table],
                radius: TARGET_RADIUS,
            });
        }
    }
    let (lo, hi) = rand_cfg.n_distractors;
    let n_distractors = if hi > 0 {
        s.rng.random_range(lo..=hi)
    } else {
        0
    };
    for _ in 0..n_distractors {
        let p = s.anywhere();
        let (c, y) = (color(s.rng), yaw(s.rng));
        world
            .objects
            .push(object(&world, EntityClass::Distractor, p, y, c));
    }
    Ok((world, spec))
}

/// Arms that the task expects to move.
pub fn acting_arms(world: &World, task: &TaskSpec) -> Vec<usize> {
    match task.required_arm {
        ArmRule::Left => vec![0],
        ArmRule::Right => vec![1],
        ArmRule::Both => vec![0, 1],
        ArmRule::Either => vec![usize::from(world.objects[0].pos[0] > 0.0)],
    }
}

/// Graded score in `[0, 1]` and success flag (score == 1).
pub fn score(world: &World, task: &TaskSpec) -> (f64, bool) {
    let o = &world.objects[0];
    let s = match task.family {
        Family::PickPlace => {
            let t = &world.targets[0];
            if o.grasped_by.is_none()
                && dist_xy(o.pos, t.pos) <= t.radius
                && world.resting_on(0).is_none()
            {
                1.0
            } else if o.ever_held.iter().any(|&h| h) {
                0.4
            } else {
                0.0
            }
        }
        Family::Stack => {
            if world.resting_on(0) == Some(1) {
                1.0
            } else if o.ever_held.iter().any(|&h| h) {
                0.4
            } else {
                0.0
            }
        }
        Family::Press => {
            let buttons = &world.objects[..if task.task_id == "press_dual" { 2 } else { 1 }];
            buttons.iter().filter(|b| b.pressed).count() as f64 / buttons.len() as f64
        }
        Family::Handover => {
            let t = &world.targets[0];
            if o.grasped_by.is_none() && o.ever_held[1] && dist_xy(o.pos, t.pos) <= t.radius {
                1.0
            } else if o.ever_held[1] {
                0.7
            } else if o.ever_held[0] {
                0.4
            } else {
                0.0
            }
        }
    };
    (s, s >= 1.0)
}

fn toward(arm: &ArmState, goal: [f64; 3], yaw: f64, gripper: f64) -> ArmCommand {
    let mut euler = arm.ee_euler;
    let want = [0.0, 0.0, yaw];
    for k in 0..3 {
        euler[k] += (want[k] - euler[k]).clamp(-MAX_ROT, MAX_ROT);
    }
    ArmCommand {
        ee_pos: move_toward(arm.ee_pos, goal, MAX_STEP),
        ee_euler: euler,
        gripper,
    }
}

fn near(a: [f64; 3], b: [f64; 3]) -> bool {
    dist(a, b) < NEAR
}

fn above(p: [f64; 3], h: f64) -> [f64; 3] {
    [p[0], p[1], p[2] + h]
}

/// Point on a funnel above `goal`: the approach height shrinks linearly with
/// horizontal distance, so the commanded pose varies smoothly with the state.
fn funnel(ee: [f64; 3], goal: [f64; 3], height: f64) -> [f64; 3] {
    let lift = height * (dist_xy(ee, goal) / FUNNEL).min(1.0);
    [goal[0], goal[1], goal[2] + lift]
}

/// Approach, descend, close.
fn pick(world: &World, side: usize, obj: usize) -> ArmCommand {
    let arm = &world.arms[side];
    let o = &world.objects[obj];
    if arm.gripper >= 0.5 {
        // closed on nothing: open and back off upwards
        return toward(arm, above(arm.ee_pos, 0.02), arm.ee_euler[2], 0.0);
    }
    let close = near(arm.ee_pos, o.pos);
    toward(
        arm,
        funnel(arm.ee_pos, o.pos, APPROACH),
        o.yaw,
        if close { 1.0 } else { 0.0 },
    )
}

/// Lift, carry, lower onto `place`, open.
fn carry(world: &World, side: usize, place: [f64; 3]) -> ArmCommand {
    let arm = &world.arms[side];
    let yaw = arm.ee_euler[2];
    let carry_z = world.table_height + CARRY;
    if near(arm.ee_pos, place) {
        return toward(arm, place, yaw, 0.0);
    }
    toward(arm, funnel(arm.ee_pos, place, carry_z - place[2]), yaw, 1.0)
}

fn press(world: &World, side: usize, button: usize) -> ArmCommand {
    let arm = &world.arms[side];
    let b = &world.objects[button];
    let top = [b.pos[0], b.pos[1], world.table_height + BUTTON_HEIGHT];
    if b.pressed {
        // stay put: lifting early would mimic a press that has not registered
        toward(arm, arm.ee_pos, 0.0, 0.0)
    } else {
        toward(arm, funnel(arm.ee_pos, top, APPROACH), 0.0, 0.0)
    }
}

fn go_home(world: &World, side: usize) -> ArmCommand {
    toward(&world.arms[side], HOME[side], 0.0, 0.0)
}

/// Next command of the waypoint expert. Stateless: the phase is read off
/// the world, so the expert also recovers from perturbed states. Arms the
/// task does not use hold still, and so does everything once the task is done.
pub fn expert_action(world: &World, task: &TaskSpec) -> RobotAction14 {
    let mut cmd = world.hold();
    if score(world, task).1 {
        return cmd;
    }
    match task.family {
        Family::PickPlace => {
            let side = acting_arms(world, task)[0];
            let o = &world.objects[0];
            let t = &world.targets[0];
            cmd.arms[side] = if o.grasped_by == Some(side) {
                carry(world, side, [t.pos[0], t.pos[1], world.rest_z(o.size)])
            } else {
                pick(world, side, 0)
            };
        }
        Family::Stack => {
            let side = acting_arms(world, task)[0];
            let (a, b) = (&world.objects[0], &world.objects[1]);
            cmd.arms[side] = if a.grasped_by == Some(side) {
                carry(
                    world,
                    side,
                    [b.pos[0], b.pos[1], b.pos[2] + 0.5 * (a.size + b.size)],
                )
            } else {
                pick(world, side, 0)
            };
        }
        Family::Press => {
            if task.task_id == "press_dual" {
                cmd.arms[0] = press(world, 0, 0);
                cmd.arms[1] = press(world, 1, 1);
            } else {
                let side = acting_arms(world, task)[0];
                cmd.arms[side] = press(world, side, 0);
            }
        }
        Family::Handover => {
            let o = &world.objects[0];
            let t = &world.targets[0];
            let meet = [
                HANDOVER_POINT[0],
                HANDOVER_POINT[1],
                world.table_height + CARRY,
            ];
            match o.grasped_by {
                Some(1) => {
                    cmd.arms[0] = go_home(world, 0);
                    cmd.arms[1] = carry(world, 1, [t.pos[0], t.pos[1], world.rest_z(o.size)]);
                }
                Some(_) => {
                    cmd.arms[0] = toward(&world.arms[0], meet, world.arms[0].ee_euler[2], 1.0);
                    let right = &world.arms[1];
                    let yaw = world.arms[0].ee_euler[2];
                    cmd.arms[1] = if !near(world.arms[0].ee_pos, meet) {
                        toward(right, [meet[0] + HANDOVER_WAIT, meet[1], meet[2]], yaw, 0.0)
                    } else {
                        let close = near(right.ee_pos, o.pos);
                        toward(right, o.pos, yaw, if close { 1.0 } else { 0.0 })
                    };
                }
                None => cmd.arms[0] = pick(world, 0, 0),
            }
        }
    }
    cmd
}
