mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use selfrel::container::{Container, CHECKPOINT_MAGIC};
use selfrel::trainer::{lambda_schedule, lr_schedule, momentum_update, Trainer, LAMBDA_START};
use selfrel::numerics::Array;
use selfrel::Error;

use common::{tiny_config, tiny_data};

#[test]
fn momentum_endpoints_are_exact() {
    for total in [1, 2, 7, 160, 1000] {
        assert_eq!(lambda_schedule(0, total).unwrap(), 0.996);
        assert_eq!(lambda_schedule(total, total).unwrap(), 1.0);
    }
    assert_eq!(LAMBDA_START, 0.996);
    assert!(lambda_schedule(11, 10).is_err());
    assert!(lambda_schedule(0, 0).is_err());
}

#[test]
fn momentum_midpoint() {
    // half way along the cosine the coefficient is the mean of the endpoints
    let mid = lambda_schedule(50, 100).unwrap();
    assert!((mid - 0.998).abs() < 1e-15);
}

#[test]
fn lr_endpoints_are_exact() {
    let (total, peak, floor) = (200, 5e-4, 1e-6);
    assert_eq!(lr_schedule(0, total, peak, floor, 0.05).unwrap(), 0.0);
    assert_eq!(lr_schedule(10, total, peak, floor, 0.05).unwrap(), peak);
    assert_eq!(lr_schedule(total, total, peak, floor, 0.05).unwrap(), floor);
    assert_eq!(lr_schedule(5, total, peak, floor, 0.05).unwrap(), peak * 0.5);
    // cosine phase, computed independently
    let t = (105.0 - 10.0) / 190.0;
    let want = floor + (peak - floor) * 0.5 * (1.0 + (PI * t).cos());
    assert!((lr_schedule(105, total, peak, floor, 0.05).unwrap() - want).abs() < 1e-18);
    assert!(lr_schedule(201, total, peak, floor, 0.05).is_err());
}

proptest! {
    #[test]
    fn momentum_rises_within_bounds(total in 1u64..5000) {
        let mut prev = 0.0;
        for step in 0..=total {
            let l = lambda_schedule(step, total).unwrap();
            prop_assert!((0.996..=1.0).contains(&l));
            prop_assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn lr_stays_between_zero_and_peak(total in 1u64..3000, frac in 0.0f64..0.5, peak in 1e-6f64..1e-2) {
        let floor = peak * 1e-3;
        for step in 0..=total {
            let lr = lr_schedule(step, total, peak, floor, frac).unwrap();
            prop_assert!((0.0..=peak).contains(&lr));
        }
    }
}

#[test]
fn momentum_update_example() {
    let cfg = tiny_config();
    let mut teacher = Trainer::<f64>::new(cfg.clone(), 4).unwrap().state.student;
    let mut other = cfg.clone();
    other.seed = 5;
    let student = Trainer::<f64>::new(other, 4).unwrap().state.student;
    let before = teacher.clone();
    momentum_update(&mut teacher, &student, 0.9).unwrap();
    for ((t, b), s) in teacher.params.arrays().iter().zip(before.params.arrays()).zip(student.params.arrays()) {
        for ((&t, &b), &s) in t.data().iter().zip(b.data()).zip(s.data()) {
            assert!((t - (0.9 * b + 0.1 * s)).abs() < 1e-15);
        }
    }
    assert_eq!(teacher.buffers, student.buffers);

    // λ = 1 leaves the teacher untouched; λ = 0 copies the student
    let mut t1 = before.clone();
    momentum_update(&mut t1, &student, 1.0).unwrap();
    assert_eq!(t1.params, before.params);
    let mut t0 = before;
    momentum_update(&mut t0, &student, 0.0).unwrap();
    assert_eq!(t0.params, student.params);
}

fn run(cfg: &selfrel::config::TrainConfig, images: &[Array<f32>], steps: usize) -> (Trainer<f32>, Vec<String>) {
    let mut tr = Trainer::<f32>::new(cfg.clone(), images.len()).unwrap();
    let logs = (0..steps).map(|_| tr.step(images).unwrap().log_line()).collect();
    (tr, logs)
}

#[test]
fn ten_steps_are_deterministic() {
    let (train, _) = tiny_data(4);
    let cfg = tiny_config();
    let (a, la) = run(&cfg, &train.images, 10);
    let (b, lb) = run(&cfg, &train.images, 10);
    assert_eq!(la, lb);
    assert_eq!(a.state, b.state);
    assert_eq!(a.to_container().to_bytes(), b.to_container().to_bytes());
}

#[test]
fn teacher_moves_only_by_ema() {
    let (train, _) = tiny_data(4);
    let mut tr = Trainer::<f64>::new(tiny_config(), train.images.len()).unwrap();
    for _ in 0..6 {
        let before = tr.state.teacher.clone();
        let rep = tr.step(&train.images).unwrap();
        assert_eq!(rep.teacher_grad_max, 0.0, "step {}", rep.step);
        let l = rep.lambda;
        for ((t, b), s) in tr.state.teacher.params.arrays().iter().zip(before.params.arrays()).zip(tr.state.student.params.arrays()) {
            for ((&t, &b), &s) in t.data().iter().zip(b.data()).zip(s.data()) {
                assert_eq!(t, l * b + (1.0 - l) * s);
            }
        }
        assert_eq!(tr.state.teacher.buffers, tr.state.student.buffers);
    }
}

#[test]
fn zero_momentum_makes_teacher_equal_student() {
    let (train, _) = tiny_data(4);
    let mut cfg = tiny_config();
    cfg.momentum_start = 0.0;
    cfg.loss.enable_pixel = false;
    cfg.loss.enable_channel = false;
    let mut tr = Trainer::<f32>::new(cfg, train.images.len()).unwrap();
    let rep = tr.step(&train.images).unwrap();
    assert_eq!(rep.lambda, 0.0);
    assert_eq!(tr.state.teacher, tr.state.student);
}

#[test]
fn checkpoint_round_trip_and_resume_are_bit_exact() {
    let (train, _) = tiny_data(4);
    let cfg = tiny_config();
    let (full, full_logs) = run(&cfg, &train.images, 10);

    let (half, _) = run(&cfg, &train.images, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.srlt");
    half.save_checkpoint(&path).unwrap();
    let mut resumed = Trainer::<f32>::load_checkpoint(&path, cfg.clone(), train.images.len()).unwrap();
    assert_eq!(resumed.state, half.state);
    let logs: Vec<String> = (0..5).map(|_| resumed.step(&train.images).unwrap().log_line()).collect();
    assert_eq!(logs, full_logs[5..]);
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.to_container().to_bytes(), full.to_container().to_bytes());
}

#[test]
fn mismatched_model_names_the_array() {
    let cfg = tiny_config();
    let tr = Trainer::<f32>::new(cfg.clone(), 8).unwrap();
    let bytes = tr.to_container().to_bytes();
    let c = Container::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap();
    let mut wider = cfg;
    wider.model.vit.embed_dim = 18;
    match Trainer::<f32>::from_container(wider, 8, &c) {
        Err(Error::Checkpoint { field, msg }) => {
            assert!(field.starts_with("student.params.vit."), "{field}");
            assert!(msg.contains("shape"), "{msg}");
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched checkpoint accepted"),
    }
}

#[test]
fn precision_mismatch_is_reported() {
    let cfg = tiny_config();
    let tr = Trainer::<f32>::new(cfg.clone(), 8).unwrap();
    let c = tr.to_container();
    let Err(Error::Checkpoint { msg, .. }) = Trainer::<f64>::from_container(cfg, 8, &c) else {
        panic!("f32 checkpoint loaded as f64");
    };
    assert!(msg.contains("precision"));
}

#[test]
fn non_finite_input_halts_without_touching_state() {
    let (mut train, _) = tiny_data(4);
    let mut tr = Trainer::<f32>::new(tiny_config(), train.images.len()).unwrap();
    tr.step(&train.images).unwrap();
    let before = tr.state.clone();
    for img in &mut train.images {
        img.data_mut().fill(f32::NAN);
    }
    let err = tr.step(&train.images).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_) | Error::InvalidInput(_)), "{err}");
    assert!(err.to_string().contains("finite"), "{err}");
    assert_eq!(tr.state, before);
}

#[test]
fn schedule_length_follows_dataset_and_batch() {
    let cfg = tiny_config();
    let tr = Trainer::<f32>::new(cfg, 10).unwrap();
    assert_eq!(tr.steps_per_epoch(), 3);
    assert_eq!(tr.total_steps(), 9);
    // every image appears exactly once per epoch
    for epoch in 0..3 {
        let mut seen: Vec<usize> = (0..3).flat_map(|s| tr.batch_indices(epoch * 3 + s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
