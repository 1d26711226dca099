use std::collections::BTreeMap;

use mde_core::archive::{Archive, Entry};
use mde_core::dataio::{synthetic_dataset, ImageDataset, SyntheticKind};
use mde_core::maskgen::Task;
use mde_core::models::{ModelConfig, ParamSet};
use mde_core::optim::{lr_schedule, Adam, AdamConfig};
use mde_core::trainer::{EpochPlan, TrainConfig, Trainer};
use mde_core::{Error, Tensor};
use proptest::prelude::*;

/// 16x16 model small enough for many steps in a test.
fn tiny(task: Task) -> TrainConfig {
    let mut cfg = TrainConfig::for_task(task);
    cfg.model = ModelConfig {
        width: 16,
        height: 16,
        base_width: 8,
        depth: 2,
        bottleneck: 16,
        ..ModelConfig::desk()
    };
    cfg.batch_size = 4;
    cfg.steps = 40;
    cfg.seed = 3;
    cfg
}

fn data(n: usize, size: usize) -> ImageDataset {
    synthetic_dataset(SyntheticKind::Blobs, n, size, 11).unwrap()
}

// ---- optimizer ----

#[test]
fn adam_first_step_moves_each_parameter_by_lr() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![4], vec![1.0f64, -2.0, 0.5, 3.0]).unwrap());
    let g = BTreeMap::from([("w".to_string(), Tensor::new(vec![4], vec![0.3, -7.0, 1e-3, 2.0]).unwrap())]);
    let mut adam = Adam::new(AdamConfig::default(), &p);
    let before = p.get("w").unwrap().clone();
    adam.update(&mut p, &g, 0.01).unwrap();
    for (i, (&a, &b)) in before.data().iter().zip(p.get("w").unwrap().data()).enumerate() {
        let gi = g["w"].data()[i];
        let expect = -0.01 * gi / (gi.abs() + 1e-8);
        assert!(((b - a) - expect).abs() < 1e-9, "entry {i}");
    }
    assert_eq!(adam.t, 1);
}

#[test]
fn adam_matches_closed_form_for_constant_gradient() {
    // With a constant gradient the bias-corrected moments equal g and g^2.
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![1], vec![0.0f64]).unwrap());
    let g = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![0.25]).unwrap())]);
    let mut adam = Adam::new(AdamConfig::default(), &p);
    for _ in 0..10 {
        adam.update(&mut p, &g, 1e-3).unwrap();
    }
    assert!((p.get("w").unwrap().data()[0] + 1e-2).abs() < 1e-9);
}

#[test]
fn adam_rejects_bad_hyperparameters() {
    assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
    assert!(AdamConfig { eps: 0.0, ..AdamConfig::default() }.validate().is_err());
}

proptest! {
    #[test]
    fn schedule_is_monotone_and_bounded(a in 0usize..1000, b in 0usize..1000, total in 1usize..1000, power in 0.5f64..3.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (lr_schedule(lo, total, 1e-3, power), lr_schedule(hi, total, 1e-3, power));
        prop_assert!(x >= y);
        prop_assert!((0.0..=1e-3).contains(&x));
    }
}

// ---- config ----

#[test]
fn hide_and_seek_is_rejected_outside_re_and_rec() {
    for task in [Task::ReverseInpainting, Task::Inpainting, Task::Colorization { visible: 1 }] {
        let cfg = TrainConfig {
            hns: true,
            ..TrainConfig::for_task(task)
        };
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("hns"), "{msg}"),
            other => panic!("{task}: {other:?}"),
        }
    }
    assert!(TrainConfig::for_task(Task::RandomExtrapolation).validate().is_ok());
    assert!(TrainConfig::for_task(Task::Rec).validate().is_ok());
}

#[test]
fn config_text_round_trips() {
    let mut cfg = tiny(Task::Colorization { visible: 2 });
    cfg.weights.lambda_pixel_compl = 0.7;
    cfg.ablation.no_perceptual = true;
    cfg.lr_gen = 3.3e-4;
    let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(TrainConfig::keys().len(), cfg.to_pairs().len());
}

#[test]
fn config_errors_name_the_field() {
    let err = TrainConfig::from_text("steps = many").unwrap_err().to_string();
    assert!(err.contains("steps"), "{err}");
    let err = TrainConfig::from_text("colour = red").unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
    assert!(TrainConfig::from_text("just words").is_err());
}

#[test]
fn config_comments_and_hns_default_follow_task() {
    let cfg = TrainConfig::from_text("# comment\ntask = ri  # trailing\n\nratio = 0.3\n").unwrap();
    assert_eq!(cfg.task, Task::ReverseInpainting);
    assert!(!cfg.hns);
    assert_eq!(cfg.ratio, 0.3);
    assert!(TrainConfig::from_text("task = re").unwrap().hns);
}

// ---- epoch plan ----

#[test]
fn epoch_plan_is_a_permutation_with_one_decoy_per_image() {
    let cfg = tiny(Task::Rec);
    let plan = EpochPlan::new(&cfg, 0, 50).unwrap();
    let mut sorted = plan.order.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(plan.decoys.len(), 50);
    for img in &plan.decoys {
        for b in img {
            let [x0, y0, x1, y1] = b.0;
            assert!(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0);
            let area = (x1 - x0) * (y1 - y0);
            assert!((area - cfg.ratio).abs() < 0.15, "area {area}");
        }
    }
    assert_eq!(plan, EpochPlan::new(&cfg, 0, 50).unwrap());
    let next = EpochPlan::new(&cfg, 1, 50).unwrap();
    assert_ne!(plan.order, next.order);
    assert_ne!(plan.decoys, next.decoys);
}

#[test]
fn decoys_are_fixed_within_an_epoch_and_refreshed_after() {
    let d = data(8, 16);
    let mut tr = Trainer::new(tiny(Task::Rec)).unwrap();
    assert_eq!(tr.steps_per_epoch(d.len()).unwrap(), 2);
    let first = tr.epoch_plan(d.len()).unwrap().clone();
    tr.train_step(&d).unwrap();
    assert_eq!(tr.epoch_plan(d.len()).unwrap(), &first);
    tr.train_step(&d).unwrap();
    let second = tr.epoch_plan(d.len()).unwrap().clone();
    assert_eq!(second.epoch, 1);
    assert_ne!(second.decoys, first.decoys);
}

#[test]
fn no_decoys_without_hide_and_seek() {
    let plan = EpochPlan::new(&tiny(Task::Inpainting), 0, 10).unwrap();
    assert!(plan.decoys.is_empty());
}

// ---- training ----

#[test]
fn dataset_geometry_must_match_model() {
    let mut tr = Trainer::new(tiny(Task::Rec)).unwrap();
    assert!(tr.train_step(&data(8, 32)).is_err());
    assert!(tr.train_step(&data(2, 16)).is_err());
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s[s.len() / 2]
}

#[test]
fn reconstruction_only_training_reduces_loss() {
    let mut cfg = tiny(Task::Rec);
    cfg.weights.lambda_compl = 0.0;
    cfg.weights.lambda_adv = 0.0;
    cfg.hns = false;
    cfg.steps = 200;
    cfg.lr_gen = 1e-3;
    let d = data(64, 16);
    let mut tr = Trainer::new(cfg).unwrap();
    let trace: Vec<f64> = (0..200).map(|_| tr.train_step(&d).unwrap().loss_rec).collect();
    let (head, tail) = (median(&trace[..20]), median(&trace[180..]));
    assert!(tail < 0.5 * head, "median loss {head} -> {tail}");
}

#[test]
fn full_objective_logs_every_active_term() {
    let d = data(8, 16);
    let mut tr = Trainer::new(tiny(Task::Rec)).unwrap();
    let log = tr.train_step(&d).unwrap();
    for v in [log.loss_rec, log.loss_compl_vgg, log.loss_adv_g, log.loss_adv_d, log.loss_hns_g, log.loss_hns_d] {
        assert!(v.is_finite() && v > 0.0, "{log:?}");
    }
    assert_eq!(log.step, 0);
    assert_eq!(tr.step(), 1);
    assert_eq!(log.csv_row().split(',').count(), mde_core::trainer::StepLog::CSV_HEADER.split(',').count());
}

#[test]
fn ablated_terms_are_logged_as_zero() {
    let mut cfg = tiny(Task::Rec);
    cfg.ablation.no_adversarial = true;
    cfg.ablation.no_hns = true;
    let mut tr = Trainer::new(cfg).unwrap();
    let log = tr.train_step(&data(8, 16)).unwrap();
    assert_eq!((log.loss_adv_g, log.loss_adv_d, log.loss_hns_g, log.loss_hns_d), (0.0, 0.0, 0.0, 0.0));
}

fn trace(tr: &mut Trainer, d: &ImageDataset, n: usize) -> Vec<String> {
    (0..n).map(|_| tr.train_step(d).unwrap().csv_row()).collect()
}

#[test]
fn identical_seeds_reproduce_identical_traces() {
    let d = data(12, 16);
    let a = trace(&mut Trainer::new(tiny(Task::Rec)).unwrap(), &d, 6);
    let b = trace(&mut Trainer::new(tiny(Task::Rec)).unwrap(), &d, 6);
    assert_eq!(a, b);
    let mut other = tiny(Task::Rec);
    other.seed = 4;
    assert_ne!(a, trace(&mut Trainer::new(other).unwrap(), &d, 6));
}

#[test]
fn resumed_run_matches_uninterrupted_run_bit_exactly() {
    let d = data(12, 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.mde");
    let mut straight = Trainer::new(tiny(Task::Rec)).unwrap();
    trace(&mut straight, &d, 5);
    straight.save_checkpoint(&path).unwrap();
    let expected = trace(&mut straight, &d, 10);
    let mut resumed = Trainer::load_checkpoint(&path).unwrap();
    assert_eq!(resumed.step(), 5);
    assert_eq!(trace(&mut resumed, &d, 10), expected);
}

#[test]
fn checkpoint_preserves_every_tensor() {
    let d = data(8, 16);
    let mut tr = Trainer::new(tiny(Task::RandomExtrapolation)).unwrap();
    trace(&mut tr, &d, 3);
    let back = Trainer::from_archive(&Archive::decode(&tr.to_archive().unwrap().encode().unwrap()).unwrap()).unwrap();
    assert_eq!(back.config, tr.config);
    assert_eq!(back.gen.params, tr.gen.params);
    assert_eq!(back.gen.buffers, tr.gen.buffers);
    assert_eq!(back.disc.params, tr.disc.params);
    assert_eq!(back.adam_g, tr.adam_g);
    assert_eq!(back.adam_d, tr.adam_d);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let tr = Trainer::new(tiny(Task::Rec)).unwrap();
    let bytes = tr.to_archive().unwrap().encode().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Archive::decode(&bad_magic), Err(Error::Checkpoint(_))));
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(Archive::decode(&bad_version), Err(Error::Checkpoint(_))));
    assert!(matches!(Archive::decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Archive::decode(&trailing), Err(Error::Checkpoint(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mde");
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(Trainer::load_checkpoint(&path).is_err());
}

#[test]
fn checkpoint_with_mismatched_tensors_is_rejected() {
    let tr = Trainer::new(tiny(Task::Rec)).unwrap();
    let mut a = tr.to_archive().unwrap();
    a.entries.retain(|(k, _)| k != "disc.param/box.fc.w");
    assert!(matches!(Trainer::from_archive(&a), Err(Error::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn archive_round_trips(
        tensors in prop::collection::vec((1usize..4, 1usize..5, any::<bool>()), 0..6),
        raw in prop::collection::vec(any::<u8>(), 1..40),
        step in any::<u64>(),
        seed in any::<[u8; 32]>(),
    ) {
        let mut a = Archive::new();
        for (i, &(r, c, wide)) in tensors.iter().enumerate() {
            let data: Vec<f64> = (0..r * c).map(|k| (k as f64 * 0.37 + i as f64).sin()).collect();
            if wide {
                a.push(format!("t{i}"), Tensor::new(vec![r, c], data).unwrap());
            } else {
                let d32 = data.iter().map(|&v| v as f32).collect();
                a.push(format!("t{i}"), Tensor::<f32>::new(vec![r, c], d32).unwrap());
            }
        }
        a.push("raw", Entry::Bytes(raw));
        a.step = step;
        a.rng.seed = seed;
        a.rng.word_pos = 12345;
        let bytes = a.encode().unwrap();
        prop_assert_eq!(Archive::decode(&bytes).unwrap(), a);
        for cut in [0, 3, 7, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(Archive::decode(&bytes[..cut]).is_err());
        }
    }
}
