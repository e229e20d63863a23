use phyrm_core::synthgen::{stream_rng, DatasetRecord, Split, StreamTag};
use phyrm_core::{BinaryMask, Grid2D, Scene, Transmitter};
use phyrm_model::trainer::{
    load_model, run_training, train_step, write_checkpoint, write_metrics_csv, Batch, ModelConfig, TrainConfig,
    TrainState, Variant,
};
use phyrm_model::{Error, LossWeights};

/// Constant-valued 8×8 maps over an empty floor plan.
fn constant_records(n: usize, value: f64) -> Vec<DatasetRecord> {
    (0..n)
        .map(|index| {
            let tx = Transmitter::new(1.5 + index as f64, 4.5, -20.0, 2.0);
            let scene = Scene::new(BinaryMask::empty(8, 8), None, vec![tx], 1.0).unwrap();
            DatasetRecord {
                index,
                scene,
                truth: Grid2D::filled(8, 8, 1.0, value).unwrap(),
                split: if index + 1 < n { Split::Train } else { Split::Test },
            }
        })
        .collect()
}

fn toy_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        seed: 3,
        eval_interval: steps,
        model: ModelConfig {
            channels: vec![4, 4],
            time_dim: 4,
            diffusion_steps: 20,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn splits(records: &[DatasetRecord]) -> (Vec<&DatasetRecord>, Vec<&DatasetRecord>) {
    (
        records.iter().filter(|r| r.split == Split::Train).collect(),
        records.iter().filter(|r| r.split == Split::Test).collect(),
    )
}

fn batch(records: &[DatasetRecord]) -> Batch {
    let picks: Vec<&DatasetRecord> = records.iter().take(2).collect();
    let masks = vec![BinaryMask::empty(8, 8); 2];
    Batch::assemble(&picks, &masks, false, &Default::default()).unwrap()
}

#[test]
fn identical_seeds_give_identical_traces() {
    let records = constant_records(4, 0.4);
    let (train, test) = splits(&records);
    let cfg = toy_cfg(15);
    let a = run_training(&train, &test, &cfg, |_| Ok(())).unwrap();
    let b = run_training(&train, &test, &cfg, |_| Ok(())).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.state.params, b.state.params);
    let c = run_training(&train, &test, &TrainConfig { seed: 4, ..cfg }, |_| Ok(())).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn total_is_the_weighted_sum_every_step() {
    let records = constant_records(4, 0.6);
    let (train, test) = splits(&records);
    let cfg = TrainConfig {
        weights: LossWeights {
            cond: 0.7,
            diff: 1.3,
            ..LossWeights::default()
        },
        ..toy_cfg(20)
    };
    let out = run_training(&train, &test, &cfg, |_| Ok(())).unwrap();
    assert_eq!(out.trace.len(), 20);
    for r in &out.trace {
        let expect = 0.7 * r.cond.total + 1.3 * r.diff;
        assert!(
            (r.total - expect).abs() < 1e-12,
            "step {}: {} vs {expect}",
            r.step,
            r.total
        );
    }
}

#[test]
fn zero_diffusion_weight_leaves_the_refiner_without_gradient() {
    let records = constant_records(3, 0.5);
    let cfg = TrainConfig {
        weights: LossWeights {
            diff: 0.0,
            ..LossWeights::default()
        },
        ..toy_cfg(1)
    };
    let mut state = TrainState::new(&cfg, false).unwrap();
    let before = state.params.clone();
    let report = train_step(
        &mut state,
        &batch(&records),
        &cfg,
        &mut stream_rng(1, StreamTag::Training, 1),
    )
    .unwrap();
    assert!(report.diff > 0.0);
    for b in state.params.blocks() {
        let name = b.name();
        if name.starts_with("unet2.") {
            assert!(b.grad().data().iter().all(|&g| g == 0.0), "{name} has gradient");
            assert_eq!(b.value(), before.value(name).unwrap(), "{name} moved");
        }
    }
    assert!(state
        .params
        .blocks()
        .iter()
        .any(|b| b.name().starts_with("unet1.") && b.grad().data().iter().any(|&g| g != 0.0)));
}

#[test]
fn diffusion_loss_falls_on_the_constant_toy_set() {
    let records = constant_records(5, 0.5);
    let (train, test) = splits(&records);
    let out = run_training(&train, &test, &toy_cfg(200), |_| Ok(())).unwrap();
    let d: Vec<f64> = out.trace.iter().map(|r| r.diff).collect();
    assert!(d[199] < d[0], "L_diff {} -> {}", d[0], d[199]);
    let head: f64 = d[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = d[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "window means {head} -> {tail}");
}

#[test]
fn long_eval_interval_gives_one_final_row() {
    let records = constant_records(4, 0.3);
    let (train, test) = splits(&records);
    let cfg = TrainConfig {
        eval_interval: 1000,
        ..toy_cfg(7)
    };
    let out = run_training(&train, &test, &cfg, |_| Ok(())).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].step, 7);
    let cfg = TrainConfig {
        eval_interval: 3,
        ..toy_cfg(7)
    };
    let steps: Vec<u64> = run_training(&train, &test, &cfg, |_| Ok(()))
        .unwrap()
        .rows
        .iter()
        .map(|r| r.step)
        .collect();
    assert_eq!(steps, [3, 6, 7]);
}

#[test]
fn non_finite_loss_halts_without_touching_the_state() {
    let records = constant_records(3, 0.5);
    let cfg = toy_cfg(1);
    let mut state = TrainState::new(&cfg, false).unwrap();
    let mut b = batch(&records);
    b.truth.data_mut()[5] = f64::NAN;
    let before = state.params.clone();
    let err = train_step(&mut state, &b, &cfg, &mut stream_rng(1, StreamTag::Training, 1)).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
    assert!(err.to_string().starts_with("divergence at step 1"));
    assert!(err.to_string().contains("mse="));
    assert_eq!(state.step, 0);
    for b in state.params.blocks() {
        assert_eq!(b.value(), before.value(b.name()).unwrap());
    }
}

#[test]
fn divergence_hands_the_last_good_state_to_the_halt_hook() {
    let records = constant_records(4, 0.5);
    let (train, test) = splits(&records);
    // an absurd step size overflows the parameters within a few updates
    let cfg = TrainConfig {
        learning_rate: 1e200,
        ..toy_cfg(50)
    };
    let mut halted = None;
    let err = run_training(&train, &test, &cfg, |s| {
        halted = Some(s.clone());
        Ok(())
    })
    .unwrap_err();
    let Error::Divergence { step, .. } = err else {
        panic!("{err}")
    };
    let state = halted.expect("halt hook not called");
    assert_eq!(state.step + 1, step);
    assert!(state.params.blocks().iter().all(|b| b.value().is_finite()));
}

#[test]
fn checkpoints_round_trip_through_load_model() {
    let records = constant_records(4, 0.45);
    let (train, test) = splits(&records);
    let cfg = TrainConfig {
        disable_rfsa: true,
        ..Variant::NoReg.apply(&toy_cfg(5))
    };
    let out = run_training(&train, &test, &cfg, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), &out.state, &cfg, None).unwrap();
    let (model, params, meta) = load_model(dir.path()).unwrap();
    assert_eq!(model, out.state.model);
    assert!(!model.diff.use_rfsa);
    assert_eq!(meta.train, cfg);
    // blocks are stored as f32
    for b in params.blocks() {
        let orig = out.state.params.value(b.name()).unwrap();
        for (x, y) in b.value().data().iter().zip(orig.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    let mask = BinaryMask::empty(8, 8);
    let a = model.reconstruct(&params, test[0], &mask, 9).unwrap();
    let (model2, params2, _) = load_model(dir.path()).unwrap();
    assert_eq!(a, model2.reconstruct(&params2, test[0], &mask, 9).unwrap());
}

#[test]
fn metrics_csv_has_the_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &[]).unwrap();
    let expect = "step,l_total,l_cond,l_mse,l_pinn,l_pde,l_bc,l_source,l_reg,l_diff,nmse,rmse,ssim,nmse_stage1";
    assert_eq!(std::fs::read_to_string(&path).unwrap().trim_end(), expect);

    let records = constant_records(3, 0.5);
    let (train, test) = splits(&records);
    let out = run_training(&train, &test, &toy_cfg(2), |_| Ok(())).unwrap();
    write_metrics_csv(&path, &out.rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(expect));
    assert_eq!(lines.count(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let records = constant_records(3, 0.5);
    let (train, test) = splits(&records);
    for cfg in [
        TrainConfig { steps: 0, ..toy_cfg(1) },
        TrainConfig {
            learning_rate: 0.0,
            ..toy_cfg(1)
        },
        TrainConfig {
            obs_rate: (0.5, 0.1),
            ..toy_cfg(1)
        },
    ] {
        assert!(matches!(
            run_training(&train, &test, &cfg, |_| Ok(())),
            Err(Error::InvalidConfig(_))
        ));
    }
    assert!(run_training(&[], &test, &toy_cfg(1), |_| Ok(())).is_err());
}
