use phyrm_core::synthgen::{generate_scene, sample_observation_mask, GenConfig};
use phyrm_core::{BinaryMask, Grid2D, HelmholtzSetup, PhysicsConfig, Scene, Transmitter};
use phyrm_model::condmodel::cond_channels;
use phyrm_model::{cond_input, loss_cond, CondNet, LossWeights};
use phyrm_nn::{grad_check, GradCheckConfig, ModelParams, Tape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(size: usize) -> GenConfig {
    GenConfig {
        map_size: size,
        n_maps: 4,
        buildings_range: (2, 3),
        building_size: (2, 4),
        seed: 5,
        ..GenConfig::default()
    }
}

fn net(channels: Vec<usize>, seed: u64) -> (CondNet, ModelParams) {
    let net = CondNet::new(cond_channels(false), channels).unwrap();
    let mut p = ModelParams::new();
    net.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, p)
}

fn random_input(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn forward_is_deterministic() {
    let (net, p) = net(vec![4, 8, 8], 3);
    let input = random_input([2, 4, 32, 32], 1);
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let out = net.forward(&mut tape, &p, x).unwrap();
        let feats: Vec<Tensor4> = out.features.iter().map(|f| tape.value(*f).clone()).collect();
        (tape.value(out.y0).clone(), feats)
    };
    assert_eq!(run(), run());
}

#[test]
fn output_strictly_inside_unit_interval() {
    for seed in 0..5 {
        let (net, p) = net(vec![8, 16, 16], seed);
        let mut tape = Tape::new();
        let x = tape.leaf(random_input([3, 4, 64, 64], seed + 100));
        let out = net.forward(&mut tape, &p, x).unwrap();
        let y = tape.value(out.y0);
        assert_eq!(y.shape(), [3, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn unobserved_pixels_never_reach_the_input() {
    let cfg = small_cfg(32);
    let scene = generate_scene(&cfg, 1).unwrap();
    let truth = Grid2D::from_fn(32, 32, 1.0, |i, j| 0.2 + 0.01 * (i + j) as f64).unwrap();
    let mask = sample_observation_mask(&scene, 0.1, 9).unwrap();
    let zeroed = Grid2D::from_fn(32, 32, 1.0, |i, j| if mask.get(i, j) { truth.get(i, j) } else { 0.0 }).unwrap();
    let a = cond_input(&scene, &truth, &mask, false).unwrap();
    let b = cond_input(&scene, &zeroed, &mask, false).unwrap();
    assert_eq!(a, b);
    assert!(a.plane(0, 1).iter().all(|&m| m == 0.0 || m == 1.0));
    for (v, m) in a.plane(0, 0).iter().zip(a.plane(0, 1)) {
        if *m == 0.0 {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn dynamic_scenes_add_a_vehicle_channel() {
    let cfg = GenConfig {
        drm: true,
        ..small_cfg(16)
    };
    let scene = generate_scene(&cfg, 0).unwrap();
    let truth = Grid2D::filled(16, 16, 1.0, 0.5).unwrap();
    let t = cond_input(&scene, &truth, &BinaryMask::empty(16, 16), true).unwrap();
    assert_eq!(t.c(), 5);
    let vehicles = scene.vehicles().unwrap();
    for (v, &b) in t.plane(0, 4).iter().zip(vehicles.bits()) {
        assert_eq!(*v, if b { 1.0 } else { 0.0 });
    }
}

#[test]
fn conditional_loss_is_positive_on_real_scenes() {
    let mut buildings = BinaryMask::empty(16, 16);
    for i in 4..8 {
        for j in 9..12 {
            buildings.set(i, j, true);
        }
    }
    let scene = Scene::new(buildings, None, vec![Transmitter::new(3.0, 12.0, -20.0, 2.0)], 1.0).unwrap();
    let setup = HelmholtzSetup::from_scene(&scene, &PhysicsConfig::default()).unwrap();
    let truth = Tensor4::from_fn([1, 1, 16, 16], |[_, _, i, j]| 0.3 + 0.02 * i as f64 - 0.01 * j as f64);
    let (net, p) = net(vec![4, 4], 2);
    let input = cond_input(
        &scene,
        &Grid2D::new(16, 16, 1.0, truth.data().to_vec()).unwrap(),
        &BinaryMask::empty(16, 16),
        false,
    )
    .unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(input);
    let out = net.forward(&mut tape, &p, x).unwrap();
    let (_, terms) = loss_cond(&mut tape, out.y0, &truth, &[setup.clone()], &LossWeights::default()).unwrap();
    assert!(terms.total > 0.0);
    assert!(terms.mse > 0.0 && terms.bc > 0.0 && terms.source > 0.0 && terms.tv > 0.0);

    // feeding the truth itself leaves the physics and smoothness terms
    let mut tape = Tape::new();
    let y = tape.leaf(truth.clone());
    let (_, terms) = loss_cond(&mut tape, y, &truth, &[setup], &LossWeights::default()).unwrap();
    assert_eq!(terms.mse, 0.0);
    assert!(terms.total > 0.0);
}

#[test]
fn components_combine_with_the_weights() {
    let cfg = small_cfg(16);
    let scenes: Vec<Scene> = (0..2).map(|k| generate_scene(&cfg, k).unwrap()).collect();
    let setups: Vec<_> = scenes
        .iter()
        .map(|s| HelmholtzSetup::from_scene(s, &PhysicsConfig::default()).unwrap())
        .collect();
    let truth = random_input([2, 1, 16, 16], 4).map(|v| 0.5 + 0.4 * v);
    let pred = random_input([2, 1, 16, 16], 5).map(|v| 0.5 + 0.3 * v);
    let w = LossWeights {
        mse: 0.7,
        reg: 0.3,
        ..LossWeights::default()
    };
    let mut tape = Tape::new();
    let y = tape.leaf(pred);
    let (total, t) = loss_cond(&mut tape, y, &truth, &setups, &w).unwrap();
    let expect = w.mse * t.mse + t.pinn + w.reg * t.tv;
    assert!((tape.value(total).item().unwrap() - expect).abs() < 1e-12);
    assert!((t.total - expect).abs() < 1e-12);
    assert!((t.pinn - (w.pde * t.pde + w.bc * t.bc + w.source * t.source)).abs() < 1e-12);
}

/// First parameter seed whose forward pass keeps every relu input and TV
/// difference at least `margin` away from its kink.
fn kink_free_seed(net_channels: &[usize], mut loss_tape: impl FnMut(&ModelParams) -> Tape, margin: f64) -> ModelParams {
    for seed in 0..200 {
        let (_, p) = net(net_channels.to_vec(), seed);
        if loss_tape(&p).kink_margin() >= margin {
            return p;
        }
    }
    panic!("no kink-free parameter seed");
}

#[test]
fn conditional_loss_gradients_match_finite_differences() {
    let cfg = small_cfg(16);
    let scenes: Vec<Scene> = (0..2).map(|k| generate_scene(&cfg, k).unwrap()).collect();
    let setups: Vec<_> = scenes
        .iter()
        .map(|s| HelmholtzSetup::from_scene(s, &PhysicsConfig::default()).unwrap())
        .collect();
    let truth = random_input([2, 1, 16, 16], 7).map(|v| 0.5 + 0.4 * v);
    let input = random_input([2, 4, 16, 16], 8);
    let channels = [4, 6];
    let (net, _) = net(channels.to_vec(), 0);
    let w = LossWeights::default();
    let build = |tape: &mut Tape, p: &ModelParams| -> phyrm_model::Result<phyrm_nn::Var> {
        let x = tape.leaf(input.clone());
        let out = net.forward(tape, p, x)?;
        Ok(loss_cond(tape, out.y0, &truth, &setups, &w)?.0)
    };
    let mut p = kink_free_seed(
        &channels,
        |p| {
            let mut tape = Tape::new();
            build(&mut tape, p).unwrap();
            tape
        },
        3e-5,
    );
    let nn_err = |e: phyrm_model::Error| phyrm_nn::Error::Invalid(e.to_string());
    let report = grad_check(
        &mut p,
        |p| {
            let mut tape = Tape::new();
            let l = build(&mut tape, p).map_err(nn_err)?;
            tape.value(l).item()
        },
        |p| {
            let mut tape = Tape::new();
            let l = build(&mut tape, p).map_err(nn_err)?;
            tape.backward(l, 1.0, p)
        },
        &GradCheckConfig {
            tol: 1e-4,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
    assert!(report.blocks.iter().all(|b| b.name.starts_with("unet1.")));
    assert_eq!(report.blocks.len(), p.names().count());
}
