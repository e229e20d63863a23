//! Stage 2: noise schedule, corruption, gated fusion, spectral attention and
//! the noise-predicting U-Net.

use phyrm_core::synthgen::{stream_rng, StreamTag};
use phyrm_nn::{ConvGeometry, ModelParams, Tape, Tensor4, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condmodel::CondNet;
use crate::error::{Error, Result};
use crate::layers::{check_channels, check_depth, conv, init_conv};

pub const DIFF_PREFIX: &str = "unet2.";

/// Linear-β DDPM schedule. Index `t` runs 1..=T; ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// ŷ_t = sqrt(ᾱ_t)·ŷ₀ + sqrt(1 − ᾱ_t)·ε for one shared `t`.
pub fn corrupt(y0: &Tensor4, t: usize, eps: &Tensor4, sched: &NoiseSchedule) -> Result<Tensor4> {
    corrupt_batch(y0, &vec![t; y0.n()], eps, sched)
}

/// Per-sample timesteps.
pub fn corrupt_batch(y0: &Tensor4, ts: &[usize], eps: &Tensor4, sched: &NoiseSchedule) -> Result<Tensor4> {
    y0.check_same_shape(eps, "corrupt")
        .map_err(|e| Error::Shape(e.to_string()))?;
    if ts.len() != y0.n() {
        return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), y0.n())));
    }
    let per = y0.len() / y0.n();
    let mut out = y0.clone();
    for (s, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = s * per..(s + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// Standard-normal tensor drawn from `rng`.
pub fn normal_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Registers the two 1×1 gates of an anchor junction.
pub fn init_anchor(params: &mut ModelParams, prefix: &str, c_d: usize, c_c: usize, rng: &mut impl Rng) -> Result<()> {
    init_conv(params, &format!("{prefix}a"), c_d, c_d, 1, rng)?;
    init_conv(params, &format!("{prefix}b"), c_c, c_d, 1, rng)
}

/// sigmoid(conv1x1_a(f_d)) ⊙ tanh(conv1x1_b(f_c)).
pub fn anchor_fuse(tape: &mut Tape, params: &ModelParams, prefix: &str, f_d: Var, f_c: Var) -> Result<Var> {
    let (sd, sc) = (tape.value(f_d).shape(), tape.value(f_c).shape());
    if (sd[0], sd[2], sd[3]) != (sc[0], sc[2], sc[3]) {
        return Err(Error::Shape(format!("anchor inputs {sd:?} and {sc:?}")));
    }
    let a = conv(tape, params, &format!("{prefix}a"), f_d)?;
    let b = conv(tape, params, &format!("{prefix}b"), f_c)?;
    let a = tape.sigmoid(a);
    let b = tape.tanh(b);
    Ok(tape.mul(a, b)?)
}

/// Registers the per-channel spectral gate; zero-initialized so G starts at 0.5.
pub fn init_rfsa(params: &mut ModelParams, prefix: &str, channels: usize) -> Result<()> {
    params.insert(format!("{prefix}scale"), Tensor4::zeros([1, channels, 1, 1]))?;
    params.insert(format!("{prefix}bias"), Tensor4::zeros([1, channels, 1, 1]))?;
    Ok(())
}

/// G ⊙ f_spatial with G = sigmoid(scale·|fft2(f_input)| + bias) per channel.
pub fn rf_sa(tape: &mut Tape, params: &ModelParams, prefix: &str, f_input: Var, f_spatial: Var) -> Result<Var> {
    if tape.value(f_input).shape() != tape.value(f_spatial).shape() {
        return Err(Error::Shape(format!(
            "rf_sa inputs {:?} and {:?}",
            tape.value(f_input).shape(),
            tape.value(f_spatial).shape()
        )));
    }
    let scale = tape.param(params, &format!("{prefix}scale"))?;
    let bias = tape.param(params, &format!("{prefix}bias"))?;
    let mag = tape.spectrum_mag(f_input)?;
    let g = tape.channel_affine(mag, scale, bias)?;
    let g = tape.sigmoid(g);
    Ok(tape.mul(g, f_spatial)?)
}

/// Sinusoidal embedding of integer timesteps, shape [N, dim, 1, 1].
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Result<Tensor4> {
    if dim == 0 || dim % 2 != 0 || ts.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "time embedding dim {dim} for {} steps",
            ts.len()
        )));
    }
    let half = dim / 2;
    Ok(Tensor4::from_fn([ts.len(), dim, 1, 1], |[n, c, _, _]| {
        let k = c % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = ts[n] as f64 * freq;
        if c < half {
            arg.sin()
        } else {
            arg.cos()
        }
    }))
}

/// Noise-predicting U-Net on [ŷ_t, ŷ₀] with time embedding, spectral
/// attention at the bottleneck and anchor junctions at every feature level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffNet {
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub use_rfsa: bool,
    pub use_anchor: bool,
}

impl DiffNet {
    pub const IN_CHANNELS: usize = 2;

    pub fn new(channels: Vec<usize>, time_dim: usize) -> Result<Self> {
        check_channels(&channels)?;
        if time_dim == 0 || time_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!("time embedding dim {time_dim}")));
        }
        Ok(Self {
            channels,
            time_dim,
            use_rfsa: true,
            use_anchor: true,
        })
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    fn name(layer: &str) -> String {
        format!("{DIFF_PREFIX}{layer}")
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        let c = &self.channels;
        let depth = self.depth();
        let e = self.time_dim;
        let mut prev = Self::IN_CHANNELS;
        for (l, &cl) in c.iter().enumerate() {
            init_conv(params, &Self::name(&format!("enc{l}")), prev, cl, 3, rng)?;
            init_conv(params, &Self::name(&format!("temb.enc{l}")), e, cl, 1, rng)?;
            prev = cl;
        }
        init_conv(params, &Self::name("mid"), prev, prev, 3, rng)?;
        init_conv(params, &Self::name("temb.mid"), e, prev, 1, rng)?;
        init_rfsa(params, &Self::name("rfsa."), prev)?;
        init_anchor(params, &Self::name(&format!("anchor{depth}.")), prev, prev, rng)?;
        for l in (0..depth).rev() {
            let out = CondNet::dec_out(c, l);
            init_conv(params, &Self::name(&format!("dec{l}")), prev + c[l], out, 3, rng)?;
            init_conv(params, &Self::name(&format!("temb.dec{l}")), e, out, 1, rng)?;
            if l > 0 {
                init_anchor(params, &Self::name(&format!("anchor{l}.")), out, out, rng)?;
            }
            prev = out;
        }
        init_conv(params, &Self::name("head"), prev, 1, 1, rng)?;
        Ok(())
    }

    /// conv → + time offset → relu
    fn level(&self, tape: &mut Tape, params: &ModelParams, layer: &str, x: Var, temb: Var) -> Result<Var> {
        let h = conv(tape, params, &Self::name(layer), x)?;
        let tw = tape.param(params, &Self::name(&format!("temb.{layer}.w")))?;
        let tb = tape.param(params, &Self::name(&format!("temb.{layer}.b")))?;
        let t = tape.conv2d(temb, tw, Some(tb), ConvGeometry::same(1))?;
        let h = tape.add_channel(h, t)?;
        Ok(tape.relu(h))
    }

    fn anchor(&self, tape: &mut Tape, params: &ModelParams, l: usize, h: Var, z: Var) -> Result<Var> {
        if !self.use_anchor {
            return Ok(h);
        }
        let f = anchor_fuse(tape, params, &Self::name(&format!("anchor{l}.")), h, z)?;
        Ok(tape.add(h, f)?)
    }

    /// ε_θ(ŷ_t, t, ŷ₀, {z_l}). `anchors[l-1]` is z_l from the conditional net.
    pub fn predict_noise(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        x_t: Var,
        cond: Var,
        ts: &[usize],
        anchors: &[Var],
    ) -> Result<Var> {
        let depth = self.depth();
        if anchors.len() != depth {
            return Err(Error::LevelMismatch {
                expected: depth,
                got: anchors.len(),
            });
        }
        let [n, _, h, w] = tape.value(x_t).shape();
        check_depth(h, w, depth)?;
        if ts.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let temb = tape.leaf(timestep_embedding(ts, self.time_dim)?);
        let mut x = tape.concat(x_t, cond)?;
        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            let e = self.level(tape, params, &format!("enc{l}"), x, temb)?;
            skips.push(e);
            x = tape.avg_pool2(e)?;
        }
        let mut x = self.level(tape, params, "mid", x, temb)?;
        if self.use_rfsa {
            x = rf_sa(tape, params, &Self::name("rfsa."), anchors[depth - 1], x)?;
        }
        x = self.anchor(tape, params, depth, x, anchors[depth - 1])?;
        for l in (0..depth).rev() {
            let up = tape.upsample2(x);
            let cat = tape.concat(up, skips[l])?;
            x = self.level(tape, params, &format!("dec{l}"), cat, temb)?;
            if l > 0 {
                x = self.anchor(tape, params, l, x, anchors[l - 1])?;
            }
        }
        conv(tape, params, &Self::name("head"), x)
    }
}

/// Mean squared error between the drawn and the predicted noise.
pub fn loss_diff(tape: &mut Tape, eps_theta: Var, eps: &Tensor4) -> Result<Var> {
    Ok(tape.mse(eps_theta, eps)?)
}

/// DDPM ancestral sampling from x_T ~ N(0, I); `predict(x_t, t)` returns
/// ε_θ. The output is clamped to [0, 1] once, at the end.
pub fn ancestral_sample(
    mut predict: impl FnMut(&Tensor4, usize) -> Result<Tensor4>,
    shape: [usize; 4],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor4> {
    let mut rng = stream_rng(seed, StreamTag::Sampling, 0);
    let mut x = normal_tensor(shape, &mut rng);
    for t in (1..=sched.steps()).rev() {
        let eps = predict(&x, t)?;
        x.check_same_shape(&eps, "predicted noise")
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (beta, alpha, ab) = (sched.beta(t)?, sched.alpha(t)?, sched.alpha_bar(t)?);
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        for (xv, e) in x.data_mut().iter_mut().zip(eps.data()) {
            *xv = inv * (*xv - coef * e);
        }
        if t > 1 {
            for xv in x.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xv += sigma * z;
            }
        }
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}
