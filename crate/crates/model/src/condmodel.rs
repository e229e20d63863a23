//! Stage 1: the conditional U-Net producing ŷ₀ and multi-scale features.

use phyrm_core::{
    pinn_losses, pinn_losses_grad, BinaryMask, Grid2D, HelmholtzField, HelmholtzSetup, PinnWeights, Scene,
};
use phyrm_nn::{ModelParams, Tape, Tensor4, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{check_channels, check_depth, conv, init_conv};

pub const COND_PREFIX: &str = "unet1.";

/// The seven loss coefficients of the conditional, physics and total losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mse: f64,
    pub reg: f64,
    pub pde: f64,
    pub bc: f64,
    pub source: f64,
    pub cond: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            reg: 0.1,
            pde: 1.5,
            bc: 0.5,
            source: 0.2,
            cond: 1.0,
            diff: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mse, self.reg, self.pde, self.bc, self.source, self.cond, self.diff];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn pinn(&self) -> PinnWeights {
        PinnWeights {
            pde: self.pde,
            bc: self.bc,
            source: self.source,
        }
    }
}

/// Number of conditioning channels: observed, mask, buildings, tx one-hot,
/// and vehicles for dynamic scenes.
pub fn cond_channels(dynamic: bool) -> usize {
    if dynamic {
        5
    } else {
        4
    }
}

/// Builds the [1, C, H, W] conditioning tensor for one scene.
pub fn cond_input(scene: &Scene, truth: &Grid2D, mask: &BinaryMask, dynamic: bool) -> Result<Tensor4> {
    let (h, w) = (scene.height(), scene.width());
    if truth.height() != h || truth.width() != w || mask.height() != h || mask.width() != w {
        return Err(Error::Shape(format!(
            "scene {h}x{w}, truth {}x{}, mask {}x{}",
            truth.height(),
            truth.width(),
            mask.height(),
            mask.width()
        )));
    }
    if dynamic != scene.is_dynamic() && dynamic {
        return Err(Error::Shape("vehicle channel requested for a static scene".into()));
    }
    let tx = scene.source_mask();
    let c = cond_channels(dynamic);
    let mut data = Vec::with_capacity(c * h * w);
    let bit = |b: bool| if b { 1.0 } else { 0.0 };
    data.extend(
        truth
            .values()
            .iter()
            .zip(mask.bits())
            .map(|(v, &m)| if m { *v } else { 0.0 }),
    );
    data.extend(mask.bits().iter().map(|&b| bit(b)));
    data.extend(scene.buildings().bits().iter().map(|&b| bit(b)));
    data.extend(tx.bits().iter().map(|&b| bit(b)));
    if dynamic {
        let v = scene.vehicles().expect("dynamic scene has vehicles");
        data.extend(v.bits().iter().map(|&b| bit(b)));
    }
    Ok(Tensor4::new([1, c, h, w], data)?)
}

/// Encoder–decoder with skip connections and a sigmoid head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondNet {
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

/// ŷ₀ and the decoder features, finest first: `features[l-1]` is z_l at
/// 1/2^l of the input resolution.
#[derive(Debug, Clone)]
pub struct CondOutput {
    pub y0: Var,
    pub features: Vec<Var>,
}

impl CondNet {
    pub fn new(in_channels: usize, channels: Vec<usize>) -> Result<Self> {
        check_channels(&channels)?;
        if in_channels == 0 {
            return Err(Error::InvalidConfig("cond net needs input channels".into()));
        }
        Ok(Self { in_channels, channels })
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    fn name(layer: &str) -> String {
        format!("{COND_PREFIX}{layer}")
    }

    /// Output widths of the decoder stage at level `l` (0 = full resolution).
    pub fn dec_out(channels: &[usize], l: usize) -> usize {
        if l == 0 {
            channels[0]
        } else {
            channels[l - 1]
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        let c = &self.channels;
        let depth = self.depth();
        let mut prev = self.in_channels;
        for (l, &cl) in c.iter().enumerate() {
            init_conv(params, &Self::name(&format!("enc{l}")), prev, cl, 3, rng)?;
            prev = cl;
        }
        init_conv(params, &Self::name("mid"), prev, prev, 3, rng)?;
        for l in (0..depth).rev() {
            let out = Self::dec_out(c, l);
            init_conv(params, &Self::name(&format!("dec{l}")), prev + c[l], out, 3, rng)?;
            prev = out;
        }
        init_conv(params, &Self::name("head"), prev, 1, 1, rng)?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, input: Var) -> Result<CondOutput> {
        let [_, c, h, w] = tape.value(input).shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "cond net expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let depth = self.depth();
        check_depth(h, w, depth)?;
        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for l in 0..depth {
            let e = conv(tape, params, &Self::name(&format!("enc{l}")), x)?;
            let e = tape.relu(e);
            skips.push(e);
            x = tape.avg_pool2(e)?;
        }
        let m = conv(tape, params, &Self::name("mid"), x)?;
        let mut x = tape.relu(m);
        let mut features = vec![x];
        for l in (0..depth).rev() {
            let up = tape.upsample2(x);
            let cat = tape.concat(up, skips[l])?;
            let d = conv(tape, params, &Self::name(&format!("dec{l}")), cat)?;
            x = tape.relu(d);
            if l > 0 {
                features.push(x);
            }
        }
        features.reverse();
        let head = conv(tape, params, &Self::name("head"), x)?;
        let y0 = tape.sigmoid(head);
        Ok(CondOutput { y0, features })
    }
}

/// Per-component values of the conditional loss, batch means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CondLossTerms {
    pub mse: f64,
    pub pde: f64,
    pub bc: f64,
    pub source: f64,
    pub pinn: f64,
    pub tv: f64,
    pub total: f64,
}

/// Physics loss of every sample in `y` and its gradient, averaged over the
/// batch.
fn batch_pinn(y: &Tensor4, setups: &[HelmholtzSetup], w: PinnWeights) -> Result<(CondLossTerms, Tensor4)> {
    let [n, _, h, wd] = y.shape();
    let mut terms = CondLossTerms::default();
    let mut grad = Tensor4::zeros(y.shape());
    let active = w.pde > 0.0 || w.bc > 0.0 || w.source > 0.0;
    for (s, setup) in setups.iter().enumerate() {
        let u = Grid2D::new(h, wd, setup.spacing(), y.plane(s, 0).to_vec())?;
        let field = HelmholtzField::new(&u, setup)?;
        let eff = setup.effective_weights(w);
        let l = pinn_losses(&field, eff)?;
        terms.pde += l.pde / n as f64;
        terms.bc += l.bc / n as f64;
        terms.source += l.source / n as f64;
        terms.pinn += l.total / n as f64;
        if active {
            let g = pinn_losses_grad(&field, eff)?;
            for (o, v) in grad.plane_mut(s, 0).iter_mut().zip(g.values()) {
                *o = v / n as f64;
            }
        }
    }
    Ok((terms, grad))
}

/// L_Cond = λ_MSE·L_MSE + L_PINN + λ_Reg·TV, with L_PINN already weighted by
/// (λ_PDE, λ_BC, λ_Source).
pub fn loss_cond(
    tape: &mut Tape,
    y0: Var,
    truth: &Tensor4,
    setups: &[HelmholtzSetup],
    w: &LossWeights,
) -> Result<(Var, CondLossTerms)> {
    w.validate()?;
    let y = tape.value(y0).clone();
    y.check_same_shape(truth, "prediction vs truth")
        .map_err(|e| Error::Shape(e.to_string()))?;
    if y.c() != 1 || setups.len() != y.n() {
        return Err(Error::Shape(format!(
            "{} setups for prediction {:?}",
            setups.len(),
            y.shape()
        )));
    }
    let mse = tape.mse(y0, truth)?;
    let tv = tape.total_variation(y0)?;
    let (mut terms, grad) = batch_pinn(&y, setups, w.pinn())?;
    let pinn = tape.external(y0, terms.pinn, grad)?;
    let total = tape.weighted_sum(&[(mse, w.mse), (pinn, 1.0), (tv, w.reg)])?;
    terms.mse = tape.value(mse).item()?;
    terms.tv = tape.value(tv).item()?;
    terms.total = tape.value(total).item()?;
    Ok((total, terms))
}
