//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Blocks larger than this are checked on a random subset of this size.
    pub samples_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            samples_per_block: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub worst_block: Option<String>,
    pub blocks: Vec<BlockCheck>,
    /// Objective at the unperturbed parameters.
    pub value: f64,
    /// Smallest derivative change a central difference can resolve:
    /// one ulp of the objective over twice the step.
    pub resolution: f64,
    /// Largest |analytic − numeric| among coordinates above the tolerance,
    /// zero when none are.
    pub violation_abs_err: f64,
}

impl GradCheckReport {
    /// True when every coordinate above the tolerance still agrees to within
    /// `factor` times the finite-difference resolution.
    pub fn violations_within_resolution(&self, factor: f64) -> bool {
        self.violation_abs_err <= factor * self.resolution
    }
}

fn ulp(x: f64) -> f64 {
    let a = x.abs();
    a.next_up() - a
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradients written by `grad` against central differences of
/// `value`. `grad` must accumulate ∂value/∂θ into `params` (they are zeroed
/// first); `value` must be deterministic.
pub fn grad_check(
    params: &mut ModelParams,
    mut value: impl FnMut(&ModelParams) -> Result<f64>,
    grad: impl FnOnce(&mut ModelParams) -> Result<()>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) || !(cfg.tol > 0.0) || cfg.samples_per_block == 0 {
        return Err(Error::Invalid(format!("grad_check config {cfg:?}")));
    }
    if params.blocks().iter().any(|b| !b.value().is_finite()) {
        return Err(Error::NonFinite("parameters before grad_check".into()));
    }
    let base = value(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }
    params.zero_grad();
    grad(params)?;
    let analytic: Vec<Vec<f64>> = params.blocks().iter().map(|b| b.grad().data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut blocks = Vec::with_capacity(params.len());
    let mut violation_abs_err = 0.0f64;
    for (bi, an) in analytic.iter().enumerate() {
        let len = an.len();
        let coords: Vec<usize> = if len <= cfg.samples_per_block {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.samples_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        for &k in &coords {
            let orig = params.blocks()[bi].value().data()[k];
            params.blocks_mut()[bi].value_mut().data_mut()[k] = orig + cfg.step;
            let fp = value(params)?;
            params.blocks_mut()[bi].value_mut().data_mut()[k] = orig - cfg.step;
            let fm = value(params)?;
            params.blocks_mut()[bi].value_mut().data_mut()[k] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective near {}[{k}]",
                    params.blocks()[bi].name()
                )));
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let e = relative_error(an[k], numeric);
            if e > cfg.tol {
                violation_abs_err = violation_abs_err.max((an[k] - numeric).abs());
            }
            if e > worst.0 {
                worst = (e, k, an[k], numeric);
            }
        }
        blocks.push(BlockCheck {
            name: params.blocks()[bi].name().to_string(),
            checked: coords.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            worst_analytic: worst.2,
            worst_numeric: worst.3,
        });
    }
    let worst_block = blocks
        .iter()
        .filter(|b| b.checked > 0)
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|b| b.name.clone());
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= cfg.tol,
        worst_block,
        blocks,
        value: base,
        resolution: ulp(base) / (2.0 * cfg.step),
        violation_abs_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor4;

    #[test]
    fn exact_quadratic_passes_tight_tolerance() {
        let mut params = ModelParams::new();
        params
            .insert(
                "p",
                Tensor4::from_fn([1, 1, 3, 4], |[_, _, i, j]| 0.3 * i as f64 - 0.2 * j as f64 + 0.1),
            )
            .unwrap();
        let value = |p: &ModelParams| Ok(p.value("p")?.data().iter().map(|v| v * v).sum());
        let grad = |p: &mut ModelParams| {
            let mut tape = Tape::new();
            let v = tape.param(p, "p")?;
            let l = tape.sum_squares(v);
            tape.backward(l, 1.0, p)
        };
        let cfg = GradCheckConfig {
            tol: 1e-7,
            ..Default::default()
        };
        let report = grad_check(&mut params, value, grad, &cfg).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.blocks[0].checked, 12);
    }

    #[test]
    fn large_blocks_are_subsampled() {
        let mut params = ModelParams::new();
        params.insert("p", Tensor4::filled([1, 1, 30, 30], 0.5)).unwrap();
        let value = |p: &ModelParams| Ok(p.value("p")?.data().iter().map(|v| v * v).sum());
        let grad = |p: &mut ModelParams| {
            let mut tape = Tape::new();
            let v = tape.param(p, "p")?;
            let l = tape.sum_squares(v);
            tape.backward(l, 1.0, p)
        };
        let report = grad_check(&mut params, value, grad, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.blocks[0].checked, 200);
    }

    #[test]
    fn round_off_violations_stay_within_resolution() {
        // a large constant offset swamps the tiny gradient of the first entry
        let mut params = ModelParams::new();
        params
            .insert("p", Tensor4::new([1, 1, 1, 2], vec![1e-9, 0.5]).unwrap())
            .unwrap();
        let value = |p: &ModelParams| Ok(1e3 + p.value("p")?.data().iter().map(|v| v * v).sum::<f64>());
        let grad = |p: &mut ModelParams| {
            let mut tape = Tape::new();
            let v = tape.param(p, "p")?;
            let l = tape.sum_squares(v);
            tape.backward(l, 1.0, p)
        };
        let report = grad_check(&mut params, value, grad, &GradCheckConfig::default()).unwrap();
        assert!(!report.pass);
        assert_eq!(report.value, 1e3 + 0.25 + 1e-18);
        assert_eq!(report.resolution, 1.1368683772161603e-13 / 2e-5);
        assert!(report.violation_abs_err > 0.0);
        assert!(report.violations_within_resolution(2.0), "{report:?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut params = ModelParams::new();
        params.insert("p", Tensor4::filled([1, 1, 1, 1], 1.0)).unwrap();
        let err = grad_check(&mut params, |_| Ok(f64::NAN), |_| Ok(()), &GradCheckConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
