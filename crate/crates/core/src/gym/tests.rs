use super::*;
use crate::embodiment::{ArmCommand, RobotAction14};
use crate::error::Error;
use crate::flow::SamplerConfig;
use crate::model::{HrdtModel, ModelConfig};
use proptest::prelude::*;

/// Execution noise (m) the expert must tolerate while recording.
const SOME_NOISE: f64 = 0.005;

fn family_tasks(f: Family) -> Vec<&'static str> {
    task_ids()
        .into_iter()
        .filter(|id| TaskSpec::lookup(id, Mode::Easy).unwrap().family == f)
        .collect()
}

fn rollout(task_id: &str, mode: Mode, seed: u64) -> (World, TaskSpec, Vec<f64>, bool) {
    let (mut w, t) = make_task(task_id, mode, seed).unwrap();
    let mut scores = vec![score(&w, &t).0];
    let mut ok = false;
    while w.step_count < STEP_BUDGET {
        let a = expert_action(&w, &t);
        w.step(&a);
        let (s, done) = score(&w, &t);
        scores.push(s);
        if done {
            ok = true;
            break;
        }
    }
    (w, t, scores, ok)
}

#[test]
fn expert_solves_every_family() {
    for fam in [
        Family::PickPlace,
        Family::Handover,
        Family::Stack,
        Family::Press,
    ] {
        let tasks = family_tasks(fam);
        assert!(!tasks.is_empty());
        for mode in [Mode::Easy, Mode::Hard] {
            let mut wins = 0;
            for seed in 0..100u64 {
                let id = tasks[seed as usize % tasks.len()];
                let (_, _, _, ok) = rollout(id, mode, seed);
                wins += ok as usize;
                assert!(ok, "{id} {mode} seed {seed}");
            }
            assert_eq!(wins, 100, "{fam:?} {mode}");
        }
    }
}

#[test]
fn expert_score_never_decreases() {
    for id in task_ids() {
        for seed in 0..20 {
            let (_, _, scores, _) = rollout(id, Mode::Hard, seed);
            for w in scores.windows(2) {
                assert!(w[1] >= w[0], "{id} seed {seed}: {scores:?}");
            }
        }
    }
}

#[test]
fn partial_credit_levels() {
    let (_, _, scores, ok) = rollout("handover", Mode::Easy, 3);
    assert!(ok);
    let mut levels: Vec<f64> = scores.clone();
    levels.dedup();
    assert_eq!(levels, vec![0.0, 0.4, 0.7, 1.0]);
    let (_, _, scores, _) = rollout("press_dual", Mode::Easy, 3);
    let mut levels = scores.clone();
    levels.dedup();
    assert_eq!(levels, vec![0.0, 0.5, 1.0]);
}

#[test]
fn arm_selection_follows_object_side() {
    let mut seen = [false; 2];
    for seed in 0..40 {
        let (w0, t) = make_task("pick_place_cup_select", Mode::Easy, seed).unwrap();
        let left = w0.objects[0].pos[0] < 0.0;
        seen[usize::from(!left)] = true;
        let idle = usize::from(left);
        let mut w = w0.clone();
        let mut moved = [false; 2];
        while w.step_count < STEP_BUDGET && !score(&w, &t).1 {
            let before = w.arms;
            w.step(&expert_action(&w, &t));
            for k in 0..2 {
                moved[k] |= before[k] != w.arms[k];
            }
        }
        assert!(moved[1 - idle], "seed {seed}: acting arm never moved");
        assert!(!moved[idle], "seed {seed}: idle arm moved");
        assert_eq!(w.arms[idle], w0.arms[idle]);
    }
    assert!(seen[0] && seen[1], "both sides should be sampled");
}

#[test]
fn scenes_are_deterministic() {
    for id in task_ids() {
        let a = make_task(id, Mode::Hard, 11).unwrap();
        let b = make_task(id, Mode::Hard, 11).unwrap();
        assert_eq!(a, b);
        let c = make_task(id, Mode::Hard, 12).unwrap();
        assert_ne!(a.0, c.0);
    }
}

#[test]
fn easy_and_hard_randomization() {
    let mut heights = Vec::new();
    for seed in 0..50 {
        let (w, _) = make_task("pick_place_cube_left", Mode::Easy, seed).unwrap();
        assert_eq!(w.table_height, 0.0);
        assert_eq!(w.objects.len(), 1);
        assert_eq!(w.obs_noise_std, 0.0);
        let (h, _) = make_task("pick_place_cube_left", Mode::Hard, seed).unwrap();
        assert!(h.table_height.abs() <= 0.03);
        let n = h
            .objects
            .iter()
            .filter(|o| o.class == EntityClass::Distractor)
            .count();
        assert!((2..=5).contains(&n));
        heights.push(h.table_height);
    }
    let spread = heights.iter().cloned().fold(f64::MIN, f64::max)
        - heights.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread > 0.02);
}

#[test]
fn zero_command_changes_only_step_count() {
    for id in task_ids() {
        let (mut w, _) = make_task(id, Mode::Hard, 5).unwrap();
        let before = w.clone();
        let hold = w.hold();
        w.step(&hold);
        assert_eq!(w.step_count, before.step_count + 1);
        w.step_count = before.step_count;
        assert_eq!(w, before);
    }
}

#[test]
fn motion_is_bounded_and_clamped() {
    let (mut w, _) = make_task("press_dual", Mode::Easy, 0).unwrap();
    let far = RobotAction14 {
        arms: [
            ArmCommand {
                ee_pos: [5.0, 5.0, 5.0],
                ee_euler: [3.0, -3.0, 3.0],
                gripper: 7.0,
            },
            ArmCommand {
                ee_pos: [-5.0, -5.0, -5.0],
                ee_euler: [f64::NAN; 3],
                gripper: f64::NAN,
            },
        ],
    };
    for _ in 0..60 {
        let prev = w.arms;
        w.step(&far);
        for k in 0..2 {
            assert!(dist(prev[k].ee_pos, w.arms[k].ee_pos) <= MAX_STEP + 1e-12);
            for j in 0..3 {
                assert!((prev[k].ee_euler[j] - w.arms[k].ee_euler[j]).abs() <= MAX_ROT + 1e-12);
            }
        }
    }
    // Each arm stops at its reach limit.
    assert_eq!(w.arms[0].ee_pos[0], ARM_REACH_X[0][1]);
    assert_eq!(w.arms[1].ee_pos[0], ARM_REACH_X[1][0]);
    assert_eq!(w.arms[0].gripper, 1.0);
    assert_eq!(w.arms[1].gripper, 0.0);
    assert!(w.arms[1].ee_euler.iter().all(|v| *v == 0.0));
}

#[test]
fn commands_within_reach_are_tracked_exactly() {
    let (mut w, _) = make_task("press_button", Mode::Easy, 0).unwrap();
    let mut cmd = w.hold();
    cmd.arms[0].ee_pos[0] += 0.03;
    cmd.arms[0].ee_pos[2] -= 0.02;
    w.step(&cmd);
    assert_eq!(w.arms[0].ee_pos, cmd.arms[0].ee_pos);
}

#[test]
fn grasp_needs_proximity_and_a_closing_edge() {
    let (mut w, _) = make_task("pick_place_cube_left", Mode::Easy, 1).unwrap();
    let obj = w.objects[0].pos;
    // Closing far away does nothing.
    let mut cmd = w.hold();
    cmd.arms[0].gripper = 1.0;
    w.step(&cmd);
    assert_eq!(w.held_by(0), None);
    // Moving onto the object with the gripper already shut does not grasp.
    for _ in 0..20 {
        let mut c = w.hold();
        c.arms[0].ee_pos = move_toward(w.arms[0].ee_pos, obj, MAX_STEP);
        c.arms[0].gripper = 1.0;
        w.step(&c);
    }
    assert_eq!(w.arms[0].ee_pos, obj);
    assert_eq!(w.held_by(0), None);
    let mut c = w.hold();
    c.arms[0].gripper = 0.0;
    w.step(&c);
    c.arms[0].gripper = 1.0;
    w.step(&c);
    assert_eq!(w.held_by(0), Some(0));
    // Held objects follow the gripper and drop back onto the table.
    let mut c = w.hold();
    c.arms[0].ee_pos[2] += 0.05;
    w.step(&c);
    assert_eq!(w.objects[0].pos, w.arms[0].ee_pos);
    c.arms[0].gripper = 0.0;
    w.step(&c);
    assert_eq!(w.held_by(0), None);
    assert!((w.objects[0].pos[2] - w.rest_z(w.objects[0].size)).abs() < 1e-12);
}

#[test]
fn task_list_parsing() {
    assert_eq!(parse_task_list("all").unwrap().len(), 8);
    assert_eq!(parse_task_list("pick_place").unwrap().len(), 4);
    assert_eq!(
        parse_task_list("handover, press_button,handover").unwrap(),
        vec!["handover".to_string(), "press_button".into()]
    );
    assert!(matches!(parse_task_list("fly"), Err(Error::UnknownTask(_))));
    assert!(parse_task_list(" , ").is_err());
    assert!("medium".parse::<Mode>().is_err());
    assert_eq!("hard".parse::<Mode>().unwrap(), Mode::Hard);
}

#[test]
fn observation_layout() {
    for id in task_ids() {
        let (w, t) = make_task(id, Mode::Hard, 2).unwrap();
        let robot = observe(&w, &t, "robot").unwrap();
        assert_eq!(robot.img.shape(), [N_IMG_TOKENS, IMG_FEAT_DIM]);
        assert_eq!(robot.lang.shape()[1], LANG_FEAT_DIM);
        assert!(robot.lang.shape()[0] <= MAX_LANG_TOKENS);
        assert_eq!(robot.state.len(), 14);
        assert_eq!(observe(&w, &t, "human").unwrap().state.len(), 48);
        // Same instruction tokens regardless of scene.
        let (w2, _) = make_task(id, Mode::Hard, 3).unwrap();
        assert_eq!(observe(&w2, &t, "robot").unwrap().lang, robot.lang);
        // Noise is reproducible for a given world.
        assert_eq!(image_tokens(&w).unwrap(), robot.img);
    }
    assert!(matches!(
        state_vector(&World::empty(0.0), "dog"),
        Err(Error::Config(_))
    ));
}

#[test]
fn too_many_entities_is_an_error() {
    let (mut w, _) = make_task("handover", Mode::Easy, 0).unwrap();
    let o = w.objects[0].clone();
    w.objects.resize(20, o);
    assert!(matches!(image_tokens(&w), Err(Error::TooMany { .. })));
}

#[test]
fn dataset_regeneration_is_byte_identical() {
    let tasks = parse_task_list("pick_place_cube_left,press_dual,handover").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(5, "human", Mode::Hard, &tasks, 9, EXEC_NOISE, a.path()).unwrap();
    generate_dataset(5, "human", Mode::Hard, &tasks, 9, EXEC_NOISE, b.path()).unwrap();
    let da = Dataset::load(a.path()).unwrap();
    let db = Dataset::load(b.path()).unwrap();
    assert_eq!(da.content_hash().unwrap(), db.content_hash().unwrap());
    for e in &da.manifest.episodes {
        assert_eq!(
            std::fs::read(a.path().join(&e.file)).unwrap(),
            std::fs::read(b.path().join(&e.file)).unwrap()
        );
    }
    assert_eq!(da.episodes.len(), 5);
    assert!(da
        .episodes
        .iter()
        .all(|e| e.success && e.actions.shape()[1] == 48));
    assert_eq!(da.instances()[1].0, "press_dual");
    let c = tempfile::tempdir().unwrap();
    generate_dataset(5, "human", Mode::Hard, &tasks, 10, EXEC_NOISE, c.path()).unwrap();
    assert_ne!(
        Dataset::load(c.path()).unwrap().content_hash().unwrap(),
        da.content_hash().unwrap()
    );
}

#[test]
fn stored_episodes_replay_the_expert() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = parse_task_list("stack_blocks,handover").unwrap();
    generate_dataset(4, "robot", Mode::Easy, &tasks, 4, SOME_NOISE, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    for (ep, (task, seed)) in ds.episodes.iter().zip(ds.instances()) {
        let (mut w, t) = make_task(&task, Mode::Easy, seed).unwrap();
        let mut noise = exec_noise_rng(seed);
        for k in 0..ep.len() {
            let row: Vec<f64> = ep.actions.row(k).iter().map(|&v| v as f64).collect();
            let label = RobotAction14::unpack(&row).unwrap();
            // labels are the clean expert command at the visited state
            let clean = expert_action(&w, &t).pack();
            for (a, b) in label.pack().iter().zip(clean) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            w.step(&perturb(&label, ds.manifest.exec_noise, &mut noise));
        }
        assert!(score(&w, &t).1);
    }
}

#[test]
fn execution_noise_moves_the_recorded_path() {
    let clean_cmd = expert_action(
        &make_task("press_button", Mode::Easy, 0).unwrap().0,
        &make_task("press_button", Mode::Easy, 0).unwrap().1,
    );
    let mut rng = exec_noise_rng(0);
    assert_eq!(perturb(&clean_cmd, 0.0, &mut rng), clean_cmd);
    let n = 4000;
    let mut sq = 0.0;
    for _ in 0..n {
        let p = perturb(&clean_cmd, SOME_NOISE, &mut rng);
        assert_eq!(p.arms[0].gripper, clean_cmd.arms[0].gripper);
        assert_eq!(p.arms[1].ee_euler, clean_cmd.arms[1].ee_euler);
        sq += (p.arms[0].ee_pos[0] - clean_cmd.arms[0].ee_pos[0]).powi(2);
    }
    let std = (sq / n as f64).sqrt();
    assert!((std - SOME_NOISE).abs() < 0.1 * SOME_NOISE, "{std}");
}

#[test]
fn corrupt_datasets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = parse_task_list("press_button").unwrap();
    generate_dataset(2, "robot", Mode::Easy, &tasks, 0, EXEC_NOISE, dir.path()).unwrap();
    let ep = dir.path().join("episodes/ep_1.bin");
    let bytes = std::fs::read(&ep).unwrap();

    std::fs::write(&ep, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(Error::Corrupt { .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&ep, &extra).unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(Error::Corrupt { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    std::fs::write(&ep, &bad).unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(Error::Corrupt { .. })
    ));
    std::fs::write(&ep, &bytes).unwrap();
    Dataset::load(dir.path()).unwrap();

    let m = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&m).unwrap();
    std::fs::write(
        &m,
        text.replace("\"format_version\": 1", "\"format_version\": 7"),
    )
    .unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(Error::Version { .. })
    ));
    std::fs::write(&m, &text[..text.len() / 2]).unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(Error::Corrupt { .. })
    ));
}

#[test]
fn expert_policy_succeeds_with_chunked_replanning() {
    let expert = ExpertPolicy { horizon: 16 };
    let tasks = parse_task_list("all").unwrap();
    for k in [1, 8, 16] {
        let res = evaluate(&expert, &tasks, &EvalConfig::new(10, k, 3)).unwrap();
        assert!(
            res.iter()
                .all(|r| r.success_rate == 1.0 && r.mean_score == 1.0),
            "k={k}: {res:?}"
        );
    }
    assert!(matches!(
        evaluate(&expert, &tasks, &EvalConfig::new(1, 17, 0)),
        Err(Error::Precondition(_))
    ));
    assert!(evaluate(&expert, &tasks, &EvalConfig::new(1, 0, 0)).is_err());
}

#[test]
fn threaded_evaluation_matches_serial() {
    let expert = ExpertPolicy { horizon: 8 };
    let inst: Vec<(String, u64)> = (0..9)
        .map(|i| (task_ids()[i % 8].to_string(), i as u64))
        .collect();
    let serial = evaluate_instances(&expert, &inst, &EvalConfig::new(0, 4, 0)).unwrap();
    let cfg = EvalConfig {
        threads: 3,
        ..EvalConfig::new(0, 4, 0)
    };
    assert_eq!(evaluate_instances(&expert, &inst, &cfg).unwrap(), serial);
    let grouped = evaluate_grouped(&expert, &inst, &cfg).unwrap();
    assert_eq!(grouped.len(), 8);
    assert_eq!(grouped[0].trials, 2);
    assert_eq!(overall_success(&grouped), 1.0);
}

#[test]
fn untrained_model_rarely_succeeds() {
    let mut cfg = ModelConfig::desk();
    cfg.n_layers = 1;
    let model = HrdtModel::<f32>::new(cfg, 0).unwrap();
    let mut spec = crate::embodiment::EmbodimentSpec::robot();
    // Realistic scale so random outputs land inside the workspace.
    spec.norm.std = vec![0.1; 14];
    let policy = ModelPolicy {
        model: &model,
        spec: &spec,
        sampler: SamplerConfig::default(),
    };
    let res = evaluate(
        &policy,
        &parse_task_list("all").unwrap(),
        &EvalConfig::new(4, 8, 0),
    )
    .unwrap();
    assert!(overall_success(&res) <= 0.1, "{res:?}");

    let human = crate::embodiment::EmbodimentSpec::human();
    let mut hcfg = ModelConfig::desk();
    hcfg.action_dim = 48;
    hcfg.state_dim = 48;
    let hmodel = HrdtModel::<f32>::new(hcfg, 0).unwrap();
    let wrong = ModelPolicy {
        model: &hmodel,
        spec: &human,
        sampler: SamplerConfig::default(),
    };
    assert!(matches!(
        evaluate(&wrong, &["handover".into()], &EvalConfig::new(1, 8, 0)),
        Err(Error::EmbodimentMismatch { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_commands_respect_step_bounds(seed in 0u64..1000, cmds in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 14), 1..20)) {
        let (mut w, _) = make_task(task_ids()[(seed % 8) as usize], Mode::Hard, seed).unwrap();
        for c in cmds {
            let prev = w.clone();
            let a = RobotAction14::unpack(&c).unwrap();
            w.step(&a);
            prop_assert_eq!(w.step_count, prev.step_count + 1);
            for k in 0..2 {
                prop_assert!(dist(prev.arms[k].ee_pos, w.arms[k].ee_pos) <= MAX_STEP + 1e-12);
                prop_assert!(w.arms[k].ee_pos[0] >= ARM_REACH_X[k][0] && w.arms[k].ee_pos[0] <= ARM_REACH_X[k][1]);
                prop_assert!((0.0..=1.0).contains(&w.arms[k].gripper));
            }
            for o in &w.objects {
                prop_assert!(o.pos.iter().all(|v| v.is_finite()));
                if let Some(side) = o.grasped_by {
                    prop_assert_eq!(o.pos, w.arms[side].ee_pos);
                }
            }
        }
    }

    #[test]
    fn expert_recovers_from_random_start_poses(seed in 0u64..500, dx in -0.1f64..0.1, dy in -0.1f64..0.1) {
        let id = task_ids()[(seed % 8) as usize];
        let (mut w, t) = make_task(id, Mode::Easy, seed).unwrap();
        for k in 0..2 {
            w.arms[k].ee_pos[0] += dx;
            w.arms[k].ee_pos[1] += dy;
        }
        while w.step_count < STEP_BUDGET && !score(&w, &t).1 {
            let a = expert_action(&w, &t);
            w.step(&a);
        }
        prop_assert!(score(&w, &t).1, "{} seed {}", id, seed);
    }
}

#[test]
fn expert_stays_reliable_under_execution_noise() {
    for t in task_ids() {
        for mode in [Mode::Easy, Mode::Hard] {
            for s in 0..100 {
                let ep = expert_episode(t, mode, s, "robot", SOME_NOISE).unwrap();
                assert!(ep.success, "{t} {mode:?} seed {s}");
            }
        }
    }
    assert!(expert_episode("press_button", Mode::Easy, 0, "robot", -1.0).is_err());
}
