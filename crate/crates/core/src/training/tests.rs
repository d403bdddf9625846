use super::*;

fn toy_net() -> NetConfig {
    NetConfig {
        base_width: 8,
        mask_width: 8,
        ..NetConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(999, &cfg), 1e-4);
    assert_eq!(lr_at(1000, &cfg), 1e-5);
    let flat = TrainConfig {
        lr_drop_factor: 1.0,
        ..cfg
    };
    assert_eq!(lr_at(5000, &flat), 1e-4);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr0: -1.0, ..Default::default() },
        TrainConfig { beta1: 1.0, ..Default::default() },
        TrainConfig { beta2: 0.0, ..Default::default() },
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { crop_size: 63, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "seed": 7}"#).unwrap();
    assert_eq!((parsed.epochs, parsed.seed, parsed.lr0), (3, 7, 1e-4));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn init_is_deterministic() {
    let a = init_params(&NetConfig::default(), 5).unwrap();
    assert_eq!(a, init_params(&NetConfig::default(), 5).unwrap());
    assert_ne!(a, init_params(&NetConfig::default(), 6).unwrap());
    for (name, t) in a.iter() {
        if name.ends_with(".bias") || name.ends_with(".offset") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
}

fn single(name: &str, values: Vec<f64>) -> NetParams {
    let n = values.len();
    std::iter::once((name.to_string(), Tensor::new(&[n], values).unwrap())).collect()
}

#[test]
fn adam_zero_gradient_on_fresh_state() {
    let cfg = TrainConfig::default();
    let mut p = single("w", vec![0.5, -0.25]);
    let before = p.clone();
    let mut state = AdamState::new(&p);
    adam_step(&mut p, &single("w", vec![0.0, 0.0]), &mut state, 1e-3, &cfg).unwrap();
    assert_eq!(p, before);
    assert_eq!(state.t, 1);

    // existing moments decay geometrically
    state.m = single("w", vec![1.0, -2.0]);
    state.v = single("w", vec![4.0, 8.0]);
    adam_step(&mut p, &single("w", vec![0.0, 0.0]), &mut state, 1e-3, &cfg).unwrap();
    assert_eq!(state.m.get("w").unwrap().data(), &[0.9f32 as f64, -1.8f32 as f64]);
    assert_eq!(state.v.get("w").unwrap().data(), &[(4.0 * 0.999f64) as f32 as f64, (8.0 * 0.999f64) as f32 as f64]);
}

#[test]
fn adam_first_step_closed_form() {
    let cfg = TrainConfig::default();
    let lr = 1e-3;
    let grads = [0.3, -2.0, 1e-6];
    let mut p = single("w", vec![0.0; 3]);
    let mut state = AdamState::new(&p);
    adam_step(&mut p, &single("w", grads.to_vec()), &mut state, lr, &cfg).unwrap();
    for (i, g) in grads.iter().enumerate() {
        // bias correction cancels the (1 − β) factors exactly on step one
        let want = (-lr * g / (g.abs() + cfg.adam_eps)) as f32 as f64;
        assert!((p.get("w").unwrap().data()[i] - want).abs() <= 1e-9 * want.abs());
    }
}

#[test]
fn adam_two_steps_match_loop_oracle() {
    let cfg = TrainConfig::default();
    let lr = 2e-3;
    let g = [0.7, -0.1, 3.0];
    let mut p = single("w", vec![1.0, 2.0, -1.0]);
    let mut state = AdamState::new(&p);
    for _ in 0..2 {
        adam_step(&mut p, &single("w", g.to_vec()), &mut state, lr, &cfg).unwrap();
    }
    let mut want = [1.0f64, 2.0, -1.0];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for t in 1..=2 {
        for i in 0..3 {
            let mi = 0.9 * m[i] + 0.1 * g[i];
            let vi = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = mi / (1.0 - 0.9f64.powi(t));
            let vh = vi / (1.0 - 0.999f64.powi(t));
            want[i] = (want[i] - lr * mh / (vh.sqrt() + 1e-8)) as f32 as f64;
            m[i] = mi as f32 as f64;
            v[i] = vi as f32 as f64;
        }
    }
    for i in 0..3 {
        assert!((p.get("w").unwrap().data()[i] - want[i]).abs() <= 1e-12 * want[i].abs());
    }
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut p = single("layer.weight", vec![1.0, 2.0]);
    let before = p.clone();
    let mut state = AdamState::new(&p);
    let err = adam_step(&mut p, &single("layer.weight", vec![1.0, f64::NAN]), &mut state, 1e-3, &TrainConfig::default())
        .unwrap_err();
    match err {
        Error::Numerical { location } => assert!(location.contains("layer.weight")),
        e => panic!("unexpected {e:?}"),
    }
    assert_eq!(p, before);
    assert_eq!(state.t, 0);
}

#[test]
fn training_lowers_loss_on_one_pair() {
    let net = toy_net();
    let data = synthetic_pairs(1, (16, 16), 11).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        lr0: 1e-3,
        crop_size: 0,
        seed: 3,
        ..TrainConfig::default()
    };
    let init = init_params(&net, cfg.seed).unwrap();
    let before = dataset_loss(&init, &data, &net, cfg.loss_weights).unwrap();
    let (params, history) = train(&data, &net, &cfg).unwrap();
    let after = dataset_loss(&params, &data, &net, cfg.loss_weights).unwrap();
    assert_eq!(history.len(), 200);
    assert!(after.total < before.total, "{before:?} -> {after:?}");
}

#[test]
fn zero_learning_rate_freezes_params() {
    let net = toy_net();
    let data = synthetic_pairs(2, (16, 16), 12).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        lr0: 0.0,
        crop_size: 8,
        ..TrainConfig::default()
    };
    let (params, _) = train(&data, &net, &cfg).unwrap();
    assert_eq!(params, init_params(&net, cfg.seed).unwrap());
}

#[test]
fn resume_is_bit_exact() {
    let net = toy_net();
    let data = synthetic_pairs(3, (24, 16), 13).unwrap();
    let holdout = synthetic_pairs(1, (16, 16), 14).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        lr0: 1e-3,
        crop_size: 8,
        batch_size: 2,
        eval_every: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut straight = TrainState::fresh(&net, &cfg).unwrap();
    run(&mut straight, &data, &net, &cfg, TrainOptions { holdout: &holdout, ..Default::default() }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = TrainState::fresh(&net, &cfg).unwrap();
    let opts = TrainOptions {
        holdout: &holdout,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(1),
        ..Default::default()
    };
    run(&mut first, &data, &net, &cfg, opts).unwrap();
    assert_eq!(first.epoch, 2);
    let mut resumed = load_state(dir.path(), &net, &cfg).unwrap();
    assert_eq!(resumed, first);
    run(&mut resumed, &data, &net, &cfg, TrainOptions { holdout: &holdout, ..Default::default() }).unwrap();

    assert_eq!(resumed, straight);
    assert_eq!(straight.step, 8);
    assert!(straight.history[1].holdout_psnr_mu.is_some() && straight.history[0].holdout_psnr_mu.is_none());

    let other = TrainConfig { seed: 10, ..cfg };
    assert!(load_state(dir.path(), &net, &other).is_err());
}

#[test]
fn training_rejects_empty_dataset() {
    assert!(train(&[], &toy_net(), &TrainConfig::default()).is_err());
}

#[test]
fn pairs_must_match_raw_shape() {
    let p = synthetic_pairs(1, (8, 8), 1).unwrap().remove(0);
    let small = HdrImage::new(Tensor::zeros(&[2, 2, 4])).unwrap();
    assert!(TrainingPair::new("x", p.raw, small).is_err());
}

#[test]
fn quick_gradient_checks() {
    let r = grad_check("log_l2", 1).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
    for op in ["mask_loss", "soft_masks", "w_msa", "leff"] {
        let r = grad_check(op, 2).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{op}: {:?}", r.worst());
    }
    assert!(grad_check("nope", 0).is_err());
}
