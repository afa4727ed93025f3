use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ConditioningBundle, REINIT_PREFIXES};

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_robot(rng: &mut ChaCha8Rng) -> RobotAction14 {
    let arm = |rng: &mut ChaCha8Rng| ArmCommand {
        ee_pos: [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.0..0.5),
        ],
        ee_euler: [
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        ],
        gripper: rng.random_range(0.0..=1.0),
    };
    RobotAction14 {
        arms: [arm(rng), arm(rng)],
    }
}

#[test]
fn layout_sizes() {
    assert_eq!(2 * (3 + 6), 18);
    assert_eq!(2 * 5 * 3, 30);
    assert_eq!(HUMAN_DIM, 18 + 30);
    let h = EmbodimentSpec::human();
    assert_eq!((h.action_dim, h.state_dim, h.labels.len()), (48, 48, 48));
    assert_eq!(h.labels[0], "left.wrist_pos.x");
    assert_eq!(h.labels[3], "left.wrist_rot6d.0");
    assert_eq!(h.labels[9], "left.thumb.x");
    assert_eq!(h.labels[24], "right.wrist_pos.x");
    let r = EmbodimentSpec::robot();
    assert_eq!((r.action_dim, r.labels.len()), (14, 14));
    assert_eq!(r.labels[6], "left.gripper");
    assert_eq!(r.labels[13], "right.gripper");
    h.validate().unwrap();
    r.validate().unwrap();
}

#[test]
fn human_pack_roundtrip_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let v = random_vec(48, &mut rng);
        let a = HumanAction48::unpack(&v).unwrap();
        assert_eq!(a.pack().to_vec(), v);
    }
    assert_eq!(HumanAction48::default().pack(), [0.0; 48]);
    assert!(HumanAction48::unpack(&[0.0; 47]).is_err());
    assert!(HumanAction48::unpack(&[f64::NAN; 48]).is_err());
    assert!(HandPose::from_parts(&[0.0; 3], &[0.0; 5], &[[0.0; 3]; 5]).is_err());
    let p = HandPose::from_parts(
        &[1.0, 2.0, 3.0],
        &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        &[[0.5; 3]; 5],
    )
    .unwrap();
    let packed = HumanAction48 { left: p, right: p }.pack();
    assert_eq!(&packed[..3], &[1.0, 2.0, 3.0]);
    assert_eq!(&packed[24..27], &[1.0, 2.0, 3.0]);
}

#[test]
fn robot_pack_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let a = random_robot(&mut rng);
        assert_eq!(RobotAction14::unpack(&a.pack()).unwrap(), a);
    }
    let mut v = [0.0; 14];
    v[6] = 1.7;
    assert_eq!(RobotAction14::unpack(&v).unwrap().arms[0].gripper, 1.0);
    assert!(RobotAction14::unpack(&[0.0; 13]).is_err());
}

#[test]
fn robot_embeds_injectively_into_human() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let r = random_robot(&mut rng);
        let h = r.to_human().unwrap();
        for (arm, hand) in r.arms.iter().zip([&h.left, &h.right]) {
            assert_eq!(hand.wrist_pos, arm.ee_pos);
            let rot = rot6d_to_mat(&hand.wrist_rot6d).unwrap();
            let expect = euler_xyz_to_mat(arm.ee_euler);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((rot[i][j] - expect[i][j]).abs() < 1e-9);
                }
            }
        }
        let back = RobotAction14::from_human(&h).unwrap();
        for (a, b) in r.pack().iter().zip(back.pack()) {
            assert!((a - b).abs() < 1e-9, "{r:?} vs {back:?}");
        }
    }
}

#[test]
fn gripper_maps_to_pinch_width() {
    let open = HandPose::from_wrist([0.0; 3], &IDENTITY, 0.0).unwrap();
    let closed = HandPose::from_wrist([0.0; 3], &IDENTITY, 1.0).unwrap();
    assert!((open.pinch_width() - 0.09).abs() < 1e-12);
    assert!((closed.pinch_width() - 0.01).abs() < 1e-12);
    assert!(open.closure().abs() < 1e-12);
    assert!((closed.closure() - 1.0).abs() < 1e-12);
    let half =
        HandPose::from_wrist([0.1, 0.2, 0.3], &axis_angle([1.0, 1.0, 0.0], 0.7), 0.5).unwrap();
    assert!((half.closure() - 0.5).abs() < 1e-12);
}

#[test]
fn norm_stats_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let mut r = random_vec(5, &mut rng);
            r[0] = r[0] * 3.0 + 7.0;
            r[4] = 0.25;
            r
        })
        .collect();
    let stats = NormStats::fit(rows.iter().map(|r| r.as_slice())).unwrap();
    assert_eq!(stats.std[4], STD_FLOOR);
    assert_eq!(stats.normalize(&rows[0])[4], 0.0);
    let normed: Vec<Vec<f64>> = rows.iter().map(|r| stats.normalize(r)).collect();
    for k in 0..4 {
        let n = normed.len() as f64;
        let mean = normed.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = normed.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-3);
    }
    for r in &rows {
        let back = stats.denormalize(&stats.normalize(r));
        for (a, b) in r.iter().zip(back) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(NormStats::fit(std::iter::empty()).is_err());
    let t = Tensor::<f32>::from_fn(&[3, 5], |i| i as f32);
    let back = stats
        .denormalize_rows(&stats.normalize_rows(&t).unwrap())
        .unwrap();
    assert!(back.max_abs_diff(&t) < 1e-4);
    assert!(stats
        .normalize_rows(&Tensor::<f32>::zeros(&[2, 4]))
        .is_err());
}

#[test]
fn spec_json_roundtrip_is_exact() {
    let mut spec = EmbodimentSpec::robot();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    spec.norm.mean = random_vec(14, &mut rng);
    spec.norm.std = random_vec(14, &mut rng)
        .iter()
        .map(|x| x.abs() + 0.1)
        .collect();
    let back: EmbodimentSpec =
        serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);
    let mut bad = EmbodimentSpec::robot();
    bad.norm.std[0] = 1e-3;
    assert!(bad.validate().is_err());
    assert!(EmbodimentSpec::by_name("octopus").is_err());
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 1,
        horizon: 4,
        ..ModelConfig::desk()
    }
}

#[test]
fn transfer_partition_is_exact() {
    let human_cfg = small_cfg().with_embodiment(48, 48);
    let mut pre = HrdtModel::<f32>::new(human_cfg, 1).unwrap();
    pre.randomize_all(2);
    let robot_cfg = small_cfg();
    let out = transfer_weights(pre.params(), &robot_cfg, &EmbodimentSpec::robot(), 3).unwrap();
    let fresh = HrdtModel::<f32>::new(robot_cfg.clone(), 3).unwrap();
    let mut copied = std::collections::BTreeSet::new();
    let mut reinit = std::collections::BTreeSet::new();
    for p in out.iter() {
        let prefix = prefix_of(&p.name).unwrap();
        if pre
            .params()
            .get(&p.name)
            .is_some_and(|q| q.tensor == p.tensor)
        {
            copied.insert(prefix);
        }
        if fresh.params().tensor(&p.name).unwrap() == &p.tensor {
            reinit.insert(prefix);
        }
    }
    for p in out
        .iter()
        .filter(|p| SHARED_PREFIXES.contains(&prefix_of(&p.name).unwrap()))
    {
        let src = pre.params().tensor(&p.name).unwrap();
        let same_bits = src
            .data()
            .iter()
            .zip(p.tensor.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits, "{}", p.name);
    }
    assert_eq!(copied, SHARED_PREFIXES.into_iter().collect());
    // ones-initialized decoder norm matches in both; everything else of the
    // re-initialized groups must be the fresh draw
    let reinit_names: Vec<_> = out
        .iter()
        .filter(|p| REINIT_PREFIXES.contains(&prefix_of(&p.name).unwrap()))
        .collect();
    assert!(reinit_names
        .iter()
        .all(|p| fresh.params().tensor(&p.name).unwrap() == &p.tensor));
    assert!(reinit.is_superset(&REINIT_PREFIXES.into_iter().collect()));
    let all: std::collections::BTreeSet<_> =
        SHARED_PREFIXES.into_iter().chain(REINIT_PREFIXES).collect();
    assert_eq!(all.len(), crate::model::PREFIXES.len());

    let model = HrdtModel::from_parts(robot_cfg.clone(), out).unwrap();
    let c = ConditioningBundle {
        img_tokens: Tensor::zeros(&[robot_cfg.n_img_tokens, robot_cfg.img_feat_dim]),
        lang_tokens: Tensor::zeros(&[1, robot_cfg.lang_feat_dim]),
        lang_len: 1,
        state: Tensor::zeros(&[14]),
    };
    let v = model.forward(&Tensor::zeros(&[4, 14]), 0.5, &c).unwrap();
    assert_eq!(v.shape(), &[4, 14]);
}

#[test]
fn transfer_rejects_incompatible_sources() {
    let robot_cfg = small_cfg();
    let spec = EmbodimentSpec::robot();
    let deeper = HrdtModel::<f32>::new(
        ModelConfig {
            n_layers: 2,
            ..robot_cfg.clone()
        },
        1,
    )
    .unwrap();
    assert!(transfer_weights(deeper.params(), &robot_cfg, &spec, 0).is_err());
    let wider = HrdtModel::<f32>::new(
        ModelConfig {
            d_model: 64,
            ..robot_cfg.clone()
        },
        1,
    )
    .unwrap();
    assert!(transfer_weights(wider.params(), &robot_cfg, &spec, 0).is_err());
    let mut foreign = HrdtModel::<f32>::new(robot_cfg.clone(), 1)
        .unwrap()
        .into_params();
    foreign
        .init(
            "encoder.x".into(),
            &[1],
            crate::params::InitSpec {
                scheme: crate::params::InitScheme::Zeros,
                seed: 0,
            },
        )
        .unwrap();
    assert!(matches!(
        transfer_weights(&foreign, &robot_cfg, &spec, 0),
        Err(Error::PrefixSet(_))
    ));
    let pre = HrdtModel::<f32>::new(robot_cfg.clone(), 1).unwrap();
    assert!(matches!(
        transfer_weights(pre.params(), &robot_cfg, &EmbodimentSpec::human(), 0),
        Err(Error::EmbodimentMismatch { .. })
    ));
}

proptest! {
    #[test]
    fn normalize_roundtrip(v in proptest::collection::vec(-100.0f64..100.0, 14)) {
        let stats = NormStats { mean: (0..14).map(|k| k as f64 - 7.0).collect(), std: (0..14).map(|k| 0.01 + k as f64).collect() };
        let back = stats.denormalize(&stats.normalize(&v));
        for (a, b) in v.iter().zip(back) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn human_roundtrip(v in proptest::collection::vec(-10.0f64..10.0, 48)) {
        prop_assert_eq!(HumanAction48::unpack(&v).unwrap().pack().to_vec(), v);
    }
}
