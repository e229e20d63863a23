//! Unconditional diffusion on constant-valued maps, a sanity harness for the
//! noise predictor and the sampler.

use phyrm_core::synthgen::{derive_seed, stream_rng, StreamTag};
use phyrm_nn::{ModelParams, Optimizer, OptimizerKind, Tape, Tensor4};
use rand::Rng;

use crate::condmodel::CondNet;
use crate::diffmodel::{
    ancestral_sample, corrupt_batch, loss_diff, make_schedule, normal_tensor, DiffNet, NoiseSchedule,
};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub size: usize,
    pub value: f64,
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            size: 8,
            value: 0.5,
            channels: vec![8, 8],
            time_dim: 8,
            steps: 3000,
            batch_size: 8,
            learning_rate: 2e-3,
            diffusion_steps: 100,
            seed: 0,
        }
    }
}

pub struct ToyModel {
    pub net: DiffNet,
    pub params: ModelParams,
    pub schedule: NoiseSchedule,
    pub losses: Vec<f64>,
    size: usize,
}

/// All-zero conditioning features with the shapes the net expects.
fn zero_anchors(net: &DiffNet, n: usize, size: usize) -> Vec<Tensor4> {
    let c = &net.channels;
    let depth = c.len();
    (1..=depth)
        .map(|l| {
            let ch = if l == depth {
                c[depth - 1]
            } else {
                CondNet::dec_out(c, l)
            };
            Tensor4::zeros([n, ch, size >> l, size >> l])
        })
        .collect()
}

impl ToyModel {
    fn predict(&self, x: &Tensor4, ts: &[usize]) -> Result<(Tape, phyrm_nn::Var)> {
        let n = x.n();
        let mut tape = Tape::new();
        let xt = tape.leaf(x.clone());
        let cond = tape.leaf(Tensor4::zeros(x.shape()));
        let anchors: Vec<_> = zero_anchors(&self.net, n, self.size)
            .into_iter()
            .map(|z| tape.leaf(z))
            .collect();
        let eps = self
            .net
            .predict_noise(&mut tape, &self.params, xt, cond, ts, &anchors)?;
        Ok((tape, eps))
    }

    /// One ancestral sample per seed.
    pub fn sample(&self, seed: u64) -> Result<Tensor4> {
        let predict = |x: &Tensor4, t: usize| {
            let (tape, eps) = self.predict(x, &vec![t; x.n()])?;
            Ok(tape.value(eps).clone())
        };
        ancestral_sample(predict, [1, 1, self.size, self.size], &self.schedule, seed)
    }
}

pub fn train_toy(cfg: &ToyConfig) -> Result<ToyModel> {
    let net = DiffNet::new(cfg.channels.clone(), cfg.time_dim)?;
    let mut params = ModelParams::new();
    net.init(&mut params, &mut stream_rng(cfg.seed, StreamTag::Init, 2))?;
    let schedule = make_schedule(cfg.diffusion_steps, 1e-4, 0.02)?;
    let mut model = ToyModel {
        net,
        params,
        schedule,
        losses: Vec::with_capacity(cfg.steps as usize),
        size: cfg.size,
    };
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate)?;
    let shape = [cfg.batch_size, 1, cfg.size, cfg.size];
    let x0 = Tensor4::filled(shape, cfg.value);
    for step in 1..=cfg.steps {
        let mut rng = stream_rng(derive_seed(cfg.seed, 0x70), StreamTag::Training, step);
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(1..=cfg.diffusion_steps))
            .collect();
        let eps = normal_tensor(shape, &mut rng);
        let xt = corrupt_batch(&x0, &ts, &eps, &model.schedule)?;
        model.params.zero_grad();
        let (mut tape, pred) = model.predict(&xt, &ts)?;
        let loss = loss_diff(&mut tape, pred, &eps)?;
        model.losses.push(tape.value(loss).item()?);
        tape.backward(loss, 1.0, &mut model.params)?;
        opt.step(&mut model.params)?;
    }
    Ok(model)
}
