//! Joint two-stage optimisation, evaluation and ablation runs.

use std::fs;
use std::path::{Path, PathBuf};

use phyrm_core::synthgen::{
    derive_seed, read_dataset, sample_observation_mask, stream_rng, DatasetRecord, Split, StreamTag,
};
use phyrm_core::{BinaryMask, Grid2D, HelmholtzSetup, MetricReport, PhysicsConfig};
use phyrm_nn::{save_checkpoint, ModelParams, Optimizer, OptimizerKind, Tape, Tensor4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condmodel::{cond_channels, cond_input, loss_cond, CondLossTerms, CondNet, LossWeights};
use crate::diffmodel::{ancestral_sample, loss_diff, make_schedule, normal_tensor, DiffNet, NoiseSchedule};
use crate::error::{Error, Result};

/// Architecture and schedule shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            time_dim: 16,
            diffusion_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_interval: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub disable_pinn: bool,
    pub disable_mse: bool,
    pub disable_reg: bool,
    pub disable_rfsa: bool,
    pub disable_anchor: bool,
    /// Let L_Diff back-propagate into the conditional net through ŷ₀ and z_l.
    pub couple_stages: bool,
    pub weights: LossWeights,
    pub physics: PhysicsConfig,
    pub model: ModelConfig,
    /// Per-sample observation rate drawn uniformly from this range; (0, 0)
    /// trains without observations.
    pub obs_rate: (f64, f64),
    pub eval_obs_rate: f64,
    /// Evaluate on at most this many test scenes.
    pub eval_scenes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_interval: 500,
            checkpoint_dir: None,
            disable_pinn: false,
            disable_mse: false,
            disable_reg: false,
            disable_rfsa: false,
            disable_anchor: false,
            couple_stages: false,
            weights: LossWeights::default(),
            physics: PhysicsConfig::default(),
            model: ModelConfig::default(),
            obs_rate: (0.0, 0.0),
            eval_obs_rate: 0.0,
            eval_scenes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidConfig(
                "steps, batch_size and eval_interval must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        let (lo, hi) = self.obs_rate;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) || !(0.0..=1.0).contains(&self.eval_obs_rate) {
            return Err(Error::InvalidConfig(format!(
                "observation rates {:?} / {}",
                self.obs_rate, self.eval_obs_rate
            )));
        }
        self.weights.validate()
    }

    /// Loss weights after the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.disable_pinn {
            w.pde = 0.0;
            w.bc = 0.0;
            w.source = 0.0;
        }
        if self.disable_mse {
            w.mse = 0.0;
        }
        if self.disable_reg {
            w.reg = 0.0;
        }
        w
    }
}

/// Both networks and the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioMapModel {
    pub cond: CondNet,
    pub diff: DiffNet,
    pub schedule: NoiseSchedule,
    pub dynamic: bool,
}

impl RadioMapModel {
    pub fn new(cfg: &ModelConfig, dynamic: bool) -> Result<Self> {
        Ok(Self {
            cond: CondNet::new(cond_channels(dynamic), cfg.channels.clone())?,
            diff: DiffNet::new(cfg.channels.clone(), cfg.time_dim)?,
            schedule: make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)?,
            dynamic,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        let mut params = ModelParams::new();
        self.cond.init(&mut params, &mut stream_rng(seed, StreamTag::Init, 1))?;
        self.diff.init(&mut params, &mut stream_rng(seed, StreamTag::Init, 2))?;
        Ok(params)
    }

    /// Stage 1 only: ŷ₀ and the anchor features for a [N, C, H, W] input.
    pub fn condition(&self, params: &ModelParams, input: &Tensor4) -> Result<(Tensor4, Vec<Tensor4>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let out = self.cond.forward(&mut tape, params, x)?;
        let feats = out.features.iter().map(|f| tape.value(*f).clone()).collect();
        Ok((tape.value(out.y0).clone(), feats))
    }

    /// Full ancestral sampling of one scene conditioned on (ŷ₀, {z_l}).
    pub fn sample(&self, params: &ModelParams, y0: &Tensor4, anchors: &[Tensor4], seed: u64) -> Result<Tensor4> {
        let predict = |x: &Tensor4, t: usize| -> Result<Tensor4> {
            let mut tape = Tape::new();
            let xt = tape.leaf(x.clone());
            let c = tape.leaf(y0.clone());
            let zs: Vec<_> = anchors.iter().map(|z| tape.leaf(z.clone())).collect();
            let eps = self
                .diff
                .predict_noise(&mut tape, params, xt, c, &vec![t; x.n()], &zs)?;
            Ok(tape.value(eps).clone())
        };
        ancestral_sample(predict, y0.shape(), &self.schedule, seed)
    }

    /// Both stages for one scene: (ŷ₀, sampled map).
    pub fn reconstruct(
        &self,
        params: &ModelParams,
        record: &DatasetRecord,
        mask: &BinaryMask,
        seed: u64,
    ) -> Result<(Grid2D, Grid2D)> {
        let input = cond_input(&record.scene, &record.truth, mask, self.dynamic)?;
        let (y0, feats) = self.condition(params, &input)?;
        let y = self.sample(params, &y0, &feats, seed)?;
        let (h, w, dx) = (record.truth.height(), record.truth.width(), record.truth.spacing());
        Ok((
            Grid2D::new(h, w, dx, y0.into_data())?,
            Grid2D::new(h, w, dx, y.into_data())?,
        ))
    }
}

/// Observation mask for `rate`; an empty mask when the rate is zero.
pub fn observation_mask(record: &DatasetRecord, rate: f64, seed: u64) -> Result<BinaryMask> {
    if rate == 0.0 {
        Ok(BinaryMask::empty(record.scene.height(), record.scene.width()))
    } else {
        Ok(sample_observation_mask(&record.scene, rate, seed)?)
    }
}

/// Stacked network inputs, targets and physics setups.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor4,
    pub truth: Tensor4,
    pub setups: Vec<HelmholtzSetup>,
}

impl Batch {
    pub fn assemble(
        records: &[&DatasetRecord],
        masks: &[BinaryMask],
        dynamic: bool,
        physics: &PhysicsConfig,
    ) -> Result<Batch> {
        if records.is_empty() || records.len() != masks.len() {
            return Err(Error::Shape(format!(
                "{} records, {} masks",
                records.len(),
                masks.len()
            )));
        }
        let mut inputs = Vec::with_capacity(records.len());
        let mut truths = Vec::with_capacity(records.len());
        let mut setups = Vec::with_capacity(records.len());
        for (r, m) in records.iter().zip(masks) {
            inputs.push(cond_input(&r.scene, &r.truth, m, dynamic)?);
            let (h, w) = (r.truth.height(), r.truth.width());
            truths.push(Tensor4::new([1, 1, h, w], r.truth.values().to_vec())?);
            setups.push(HelmholtzSetup::from_scene(&r.scene, physics)?);
        }
        Ok(Batch {
            input: Tensor4::stack(&inputs)?,
            truth: Tensor4::stack(&truths)?,
            setups,
        })
    }
}

/// Every loss component of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub total: f64,
    pub cond: CondLossTerms,
    pub diff: f64,
}

/// Networks, parameters and optimiser state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: RadioMapModel,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, dynamic: bool) -> Result<Self> {
        cfg.validate()?;
        let mut model = RadioMapModel::new(&cfg.model, dynamic)?;
        model.diff.use_rfsa = !cfg.disable_rfsa;
        model.diff.use_anchor = !cfg.disable_anchor;
        let params = model.init_params(cfg.seed)?;
        Ok(Self {
            model,
            params,
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate)?,
            step: 0,
        })
    }
}

fn divergence(step: u64, total: f64, cond: &CondLossTerms, diff: f64) -> Error {
    Error::Divergence {
        step,
        detail: format!(
            "total={total} mse={} pde={} bc={} source={} tv={} diff={diff}",
            cond.mse, cond.pde, cond.bc, cond.source, cond.tv
        ),
    }
}

/// One joint update. Parameters are left untouched when the loss or its
/// gradient is non-finite.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<StepReport> {
    let step = state.step + 1;
    let w = cfg.effective_weights();
    let model = &state.model;
    let params = &mut state.params;
    params.zero_grad();

    let mut tape = Tape::new();
    let x = tape.leaf(batch.input.clone());
    let out = model.cond.forward(&mut tape, params, x)?;
    let (l_cond, cond_terms) = loss_cond(&mut tape, out.y0, &batch.truth, &batch.setups, &w)?;

    let (y0, anchors) = if cfg.couple_stages {
        (out.y0, out.features.clone())
    } else {
        (
            tape.detach(out.y0),
            out.features.iter().map(|f| tape.detach(*f)).collect(),
        )
    };
    let shape = tape.value(y0).shape();
    let n = shape[0];
    let t_max = model.schedule.steps();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=t_max)).collect();
    let eps = normal_tensor(shape, rng);
    let per = shape[1] * shape[2] * shape[3];
    let mut signal = Tensor4::zeros(shape);
    let mut noise = eps.clone();
    for (s, &t) in ts.iter().enumerate() {
        let ab = model.schedule.alpha_bar(t)?;
        signal.data_mut()[s * per..(s + 1) * per].fill(ab.sqrt());
        noise.data_mut()[s * per..(s + 1) * per]
            .iter_mut()
            .for_each(|v| *v *= (1.0 - ab).sqrt());
    }
    let signal = tape.leaf(signal);
    let noise = tape.leaf(noise);
    let scaled = tape.mul(y0, signal)?;
    let y_t = tape.add(scaled, noise)?;
    let eps_theta = model.diff.predict_noise(&mut tape, params, y_t, y0, &ts, &anchors)?;
    let l_diff = loss_diff(&mut tape, eps_theta, &eps)?;
    let total = tape.weighted_sum(&[(l_cond, w.cond), (l_diff, w.diff)])?;

    let diff = tape.value(l_diff).item()?;
    let total_v = tape.value(total).item()?;
    if !total_v.is_finite() {
        return Err(divergence(step, total_v, &cond_terms, diff));
    }
    tape.backward(total, 1.0, params)?;
    if params.blocks().iter().any(|b| !b.grad().is_finite()) {
        params.zero_grad();
        return Err(divergence(step, total_v, &cond_terms, diff));
    }
    state.optimizer.step(params)?;
    state.step = step;
    Ok(StepReport {
        step,
        total: total_v,
        cond: cond_terms,
        diff,
    })
}

/// Test-split quality of the sampled maps and of the stage-1 estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub sampled: MetricReport,
    pub stage1: MetricReport,
}

pub fn evaluate(
    model: &RadioMapModel,
    params: &ModelParams,
    records: &[&DatasetRecord],
    rate: f64,
    seed: u64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no test scenes to evaluate".into()));
    }
    let per: Vec<(MetricReport, MetricReport)> = records
        .par_iter()
        .map(|r| {
            let idx = r.index as u64;
            let mask = observation_mask(r, rate, derive_seed(seed, idx))?;
            let (y0, y) = model.reconstruct(params, r, &mask, derive_seed(seed ^ 0x5A5A, idx))?;
            Ok((
                MetricReport::compute(&y, &r.truth)?,
                MetricReport::compute(&y0, &r.truth)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (sampled, stage1): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Ok(EvalReport {
        sampled: MetricReport::mean(&sampled),
        stage1: MetricReport::mean(&stage1),
    })
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub l_total: f64,
    pub l_cond: f64,
    pub l_mse: f64,
    pub l_pinn: f64,
    pub l_pde: f64,
    pub l_bc: f64,
    pub l_source: f64,
    pub l_reg: f64,
    pub l_diff: f64,
    pub nmse: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub nmse_stage1: f64,
}

impl MetricsRow {
    fn new(r: &StepReport, e: &EvalReport) -> Self {
        Self {
            step: r.step,
            l_total: r.total,
            l_cond: r.cond.total,
            l_mse: r.cond.mse,
            l_pinn: r.cond.pinn,
            l_pde: r.cond.pde,
            l_bc: r.cond.bc,
            l_source: r.cond.source,
            l_reg: r.cond.tv,
            l_diff: r.diff,
            nmse: e.sampled.nmse,
            rmse: e.sampled.rmse,
            ssim: e.sampled.ssim,
            nmse_stage1: e.stage1.nmse,
        }
    }
}

/// Everything a training run produced in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub trace: Vec<StepReport>,
    pub rows: Vec<MetricsRow>,
}

/// Fixed-budget training on in-memory records. On divergence the state from
/// before the failing step is handed to `on_halt` and the error returned.
pub fn run_training(
    train: &[&DatasetRecord],
    test: &[&DatasetRecord],
    cfg: &TrainConfig,
    mut on_halt: impl FnMut(&TrainState) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }
    let dynamic = train[0].scene.is_dynamic();
    let mut state = TrainState::new(cfg, dynamic)?;
    let test: Vec<&DatasetRecord> = match cfg.eval_scenes {
        Some(k) => test.iter().take(k).copied().collect(),
        None => test.to_vec(),
    };
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    let mut rows = Vec::new();
    for step in 1..=cfg.steps {
        let mut rng = stream_rng(cfg.seed, StreamTag::Training, step);
        let picks: Vec<&DatasetRecord> = (0..cfg.batch_size)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let masks = picks
            .iter()
            .map(|r| {
                let rate = if cfg.obs_rate.1 > cfg.obs_rate.0 {
                    rng.random_range(cfg.obs_rate.0..=cfg.obs_rate.1)
                } else {
                    cfg.obs_rate.0
                };
                let seed: u64 = rng.random();
                observation_mask(r, rate, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::assemble(&picks, &masks, dynamic, &cfg.physics)?;
        let report = match train_step(&mut state, &batch, cfg, &mut rng) {
            Ok(r) => r,
            Err(e) => {
                on_halt(&state)?;
                return Err(e);
            }
        };
        trace.push(report);
        if (step % cfg.eval_interval == 0 || step == cfg.steps) && !test.is_empty() {
            let eval = evaluate(
                &state.model,
                &state.params,
                &test,
                cfg.eval_obs_rate,
                derive_seed(cfg.seed, 0xE7A1),
            )?;
            rows.push(MetricsRow::new(&report, &eval));
        }
    }
    Ok(RunOutcome { state, trace, rows })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record([
            "step",
            "l_total",
            "l_cond",
            "l_mse",
            "l_pinn",
            "l_pde",
            "l_bc",
            "l_source",
            "l_reg",
            "l_diff",
            "nmse",
            "rmse",
            "ssim",
            "nmse_stage1",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

/// What a checkpoint needs to rebuild the model for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub dynamic: bool,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
}

pub fn write_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig, data_dir: Option<&Path>) -> Result<()> {
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        dynamic: state.model.dynamic,
        train: cfg.clone(),
        data_dir: data_dir.map(Path::to_path_buf),
    };
    let value = serde_json::to_value(&meta).map_err(|source| Error::Json {
        path: dir.join("manifest.json"),
        source,
    })?;
    save_checkpoint(dir, &state.params, state.step, value)?;
    Ok(())
}

/// Rebuilds model and parameters from a checkpoint directory.
pub fn load_model(dir: impl AsRef<Path>) -> Result<(RadioMapModel, ModelParams, CheckpointMeta)> {
    let dir = dir.as_ref();
    let (params, manifest) = phyrm_nn::load_checkpoint(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.meta).map_err(|source| Error::Json {
        path: dir.join("manifest.json"),
        source,
    })?;
    let mut model = RadioMapModel::new(&meta.model, meta.dynamic)?;
    model.diff.use_rfsa = !meta.train.disable_rfsa;
    model.diff.use_anchor = !meta.train.disable_anchor;
    Ok((model, params, meta))
}

/// Reads the dataset, trains, and writes `metrics.csv` and the checkpoint
/// under `out_dir`.
pub fn train(cfg: &TrainConfig, data_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<RunOutcome> {
    let (data_dir, out_dir) = (data_dir.as_ref(), out_dir.as_ref());
    let data = read_dataset(data_dir)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let ckpt = cfg.checkpoint_dir.clone().unwrap_or_else(|| out_dir.join("checkpoint"));
    let train: Vec<&DatasetRecord> = data.split(Split::Train).collect();
    let test: Vec<&DatasetRecord> = data.split(Split::Test).collect();
    let outcome = run_training(&train, &test, cfg, |state| {
        write_checkpoint(&ckpt, state, cfg, Some(data_dir))
    })?;
    write_metrics_csv(out_dir.join("metrics.csv"), &outcome.rows)?;
    write_checkpoint(&ckpt, &outcome.state, cfg, Some(data_dir))?;
    Ok(outcome)
}

/// The four loss combinations of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPinn,
    NoReg,
    NoMse,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoReg, Variant::NoMse, Variant::NoPinn];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "mse+pinn+reg",
            Variant::NoReg => "mse+pinn",
            Variant::NoMse => "pinn+reg",
            Variant::NoPinn => "mse+reg",
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.disable_pinn = *self == Variant::NoPinn;
        c.disable_reg = *self == Variant::NoReg;
        c.disable_mse = *self == Variant::NoMse;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub nmse: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub nmse_stage1: f64,
}

/// Trains every variant for every seed and reports final test metrics.
pub fn ablation(
    train: &[&DatasetRecord],
    test: &[&DatasetRecord],
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &v in variants {
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            cfg.eval_interval = cfg.steps;
            let out = run_training(train, test, &cfg, |_| Ok(()))?;
            let last = out
                .rows
                .last()
                .ok_or_else(|| Error::InvalidConfig("no evaluation row".into()))?;
            rows.push(AblationRow {
                variant: v.label().to_string(),
                seed,
                nmse: last.nmse,
                rmse: last.rmse,
                ssim: last.ssim,
                nmse_stage1: last.nmse_stage1,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}
