//! Small helpers shared by both U-Nets.

use phyrm_nn::{ConvGeometry, ModelParams, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Registers `{name}.w` (co×ci×k×k) and `{name}.b` (1×co×1×1).
pub(crate) fn init_conv(
    params: &mut ModelParams,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = ci * k * k;
    params.insert_uniform(format!("{name}.w"), [co, ci, k, k], fan_in, rng)?;
    params.insert_uniform(format!("{name}.b"), [1, co, 1, 1], fan_in, rng)?;
    Ok(())
}

/// Shape-preserving convolution with bias.
pub(crate) fn conv(tape: &mut Tape, params: &ModelParams, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    let k = tape.value(w).h();
    Ok(tape.conv2d(x, w, Some(b), ConvGeometry::same(k))?)
}

pub(crate) fn check_depth(h: usize, w: usize, depth: usize) -> Result<()> {
    let m = 1usize << depth;
    if depth == 0 || h % m != 0 || w % m != 0 || h < m || w < m {
        return Err(Error::DepthMismatch(format!(
            "{h}x{w} input is not divisible by 2^{depth}"
        )));
    }
    Ok(())
}

pub(crate) fn check_channels(channels: &[usize]) -> Result<()> {
    if channels.is_empty() || channels.contains(&0) {
        return Err(Error::InvalidConfig(format!("channel widths {channels:?}")));
    }
    Ok(())
}
