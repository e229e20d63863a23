//! The gradient-check suite run by `phyrm gradcheck`: the physics losses on a
//! random field, then every trainable block of both networks on random 16×16
//! inputs.

use phyrm_core::physics::{pinn_losses, pinn_losses_grad, HelmholtzField, PinnWeights};
use phyrm_core::synthgen::{generate_scene, GenConfig};
use phyrm_core::{Grid2D, HelmholtzSetup, PhysicsConfig};
use phyrm_model::condmodel::cond_channels;
use phyrm_model::diffmodel::normal_tensor;
use phyrm_model::{loss_cond, loss_diff, CondNet, DiffNet, LossWeights};
use phyrm_nn::{grad_check, GradCheckConfig, GradCheckReport, ModelParams, Tape, Tensor4, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const SIZE: usize = 16;
/// Tolerance of the physics-loss check.
pub const PHYSICS_TOL: f64 = 1e-6;
/// Default tolerance of the network checks.
pub const NETWORK_TOL: f64 = 1e-4;
/// Full depth of the default model at reduced width.
pub const CHANNELS: [usize; 3] = [4, 6, 8];
/// Closest a relu input or TV difference may sit to its kink: three finite-
/// difference steps.
const KINK_MARGIN: f64 = 3e-5;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn pass(&self) -> bool {
        self.report.max_rel_err < self.tol
    }
}

fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn setups(n: usize) -> Result<Vec<HelmholtzSetup>> {
    let cfg = GenConfig {
        map_size: SIZE,
        n_maps: n,
        buildings_range: (2, 3),
        building_size: (2, 4),
        seed: 11,
        ..GenConfig::default()
    };
    (0..n)
        .map(|k| {
            Ok(HelmholtzSetup::from_scene(
                &generate_scene(&cfg, k)?,
                &PhysicsConfig::default(),
            )?)
        })
        .collect()
}

fn nn_err(e: phyrm_model::Error) -> phyrm_nn::Error {
    phyrm_nn::Error::Invalid(e.to_string())
}

fn check(
    p: &mut ModelParams,
    build: impl Fn(&mut Tape, &ModelParams) -> phyrm_model::Result<Var>,
    tol: f64,
) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        p,
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
        &cfg,
    )?;
    Ok(report)
}

/// First initialisation seed whose forward pass stays `KINK_MARGIN` away from
/// every relu and TV kink, so central differences are meaningful.
fn kink_free(
    init: impl Fn(u64) -> Result<ModelParams>,
    build: impl Fn(&mut Tape, &ModelParams) -> phyrm_model::Result<Var>,
) -> Result<ModelParams> {
    for seed in 0..500 {
        let p = init(seed)?;
        let mut tape = Tape::new();
        build(&mut tape, &p)?;
        if tape.kink_margin() >= KINK_MARGIN {
            return Ok(p);
        }
    }
    Err(CliError::Invalid("no kink-free initialisation within 500 seeds".into()))
}

/// Helmholtz losses against their closed-form gradient.
pub fn physics_check(tol: f64) -> Result<GradCheckReport> {
    let setup = setups(1)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ModelParams::new();
    p.insert("field", uniform([1, 1, SIZE, SIZE], &mut rng, 0.0, 1.0))?;
    let grid = |p: &ModelParams| -> phyrm_nn::Result<Grid2D> {
        Grid2D::new(SIZE, SIZE, 1.0, p.value("field")?.data().to_vec())
            .map_err(|e| phyrm_nn::Error::Invalid(e.to_string()))
    };
    let core_err = |e: phyrm_core::Error| phyrm_nn::Error::Invalid(e.to_string());
    let w = PinnWeights::default();
    let report = grad_check(
        &mut p,
        |p| {
            let u = grid(p)?;
            let field = HelmholtzField::new(&u, &setup).map_err(core_err)?;
            Ok(pinn_losses(&field, w).map_err(core_err)?.total)
        },
        |p| {
            let u = grid(p)?;
            let field = HelmholtzField::new(&u, &setup).map_err(core_err)?;
            let g = pinn_losses_grad(&field, w).map_err(core_err)?;
            p.block_mut("field")?.grad_mut().data_mut().copy_from_slice(g.values());
            Ok(())
        },
        &GradCheckConfig {
            tol,
            ..GradCheckConfig::default()
        },
    )?;
    Ok(report)
}

/// Every `unet1.` block through the full conditional loss.
pub fn conditional_check(tol: f64) -> Result<GradCheckReport> {
    let setups = setups(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = uniform([2, cond_channels(false), SIZE, SIZE], &mut rng, -1.0, 1.0);
    let truth = uniform([2, 1, SIZE, SIZE], &mut rng, 0.1, 0.9);
    let net = CondNet::new(cond_channels(false), CHANNELS.to_vec())?;
    let w = LossWeights::default();
    let build = |tape: &mut Tape, p: &ModelParams| -> phyrm_model::Result<Var> {
        let x = tape.leaf(input.clone());
        let out = net.forward(tape, p, x)?;
        Ok(loss_cond(tape, out.y0, &truth, &setups, &w)?.0)
    };
    let init = |seed| -> Result<ModelParams> {
        let mut p = ModelParams::new();
        net.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(p)
    };
    let mut p = kink_free(init, build)?;
    check(&mut p, build, tol)
}

/// Every `unet2.` block through the noise-prediction loss, with the spectral
/// gate and both anchor junctions active.
pub fn diffusion_check(tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform([2, 1, SIZE, SIZE], &mut rng, -1.0, 1.0);
    let cond = uniform([2, 1, SIZE, SIZE], &mut rng, 0.0, 1.0);
    let anchors: Vec<Tensor4> = (1..=CHANNELS.len())
        .map(|l| {
            let c = if l == CHANNELS.len() {
                CHANNELS[l - 1]
            } else {
                CondNet::dec_out(&CHANNELS, l)
            };
            uniform([2, c, SIZE >> l, SIZE >> l], &mut rng, -1.0, 1.0)
        })
        .collect();
    // a small target keeps the loss, and the round-off in each difference
    // quotient, well below the smallest gradients checked
    let eps = normal_tensor([2, 1, SIZE, SIZE], &mut rng).map(|v| 0.01 * v);
    let ts = [17, 83];
    let net = DiffNet::new(CHANNELS.to_vec(), 8)?;
    let build = |tape: &mut Tape, p: &ModelParams| -> phyrm_model::Result<Var> {
        let (vx, vc) = (tape.leaf(x.clone()), tape.leaf(cond.clone()));
        let za: Vec<Var> = anchors.iter().map(|a| tape.leaf(a.clone())).collect();
        let e = net.predict_noise(tape, p, vx, vc, &ts, &za)?;
        loss_diff(tape, e, &eps)
    };
    let c = CHANNELS[CHANNELS.len() - 1];
    let init = |seed: u64| -> Result<ModelParams> {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.init(&mut p, &mut rng)?;
        // move the spectral gate off its zero initialisation
        p.set_value("unet2.rfsa.scale", uniform([1, c, 1, 1], &mut rng, -0.05, 0.05))?;
        p.set_value("unet2.rfsa.bias", uniform([1, c, 1, 1], &mut rng, -0.5, 0.5))?;
        Ok(p)
    };
    let mut p = kink_free(init, build)?;
    check(&mut p, build, tol)
}

/// Runs all three checks; `network_tol` applies to both networks.
pub fn run_suite(network_tol: f64) -> Result<Vec<SuiteEntry>> {
    Ok(vec![
        SuiteEntry {
            name: "physics",
            tol: PHYSICS_TOL,
            report: physics_check(PHYSICS_TOL)?,
        },
        SuiteEntry {
            name: "conditional",
            tol: network_tol,
            report: conditional_check(network_tol)?,
        },
        SuiteEntry {
            name: "diffusion",
            tol: network_tol,
            report: diffusion_check(network_tol)?,
        },
    ])
}
