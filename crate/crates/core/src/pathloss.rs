//! Log-distance path-loss model and its regularized least-squares fit.
//!
//! Received power at a pixel is the dB sum over transmitters
//!
//! ```text
//! P(a, b) = Σ_k ( α_k − 10 θ_k log10 ‖(a, b) − (a_k, b_k)‖ )
//! ```
//!
//! Contributions are summed in dB, not in linear power. That is not how
//! independent sources combine physically, but it is the model the maps are
//! generated from and the one the fit inverts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normalize_db, BinaryMask, DbRange, Grid2D, Scene, Transmitter};

/// Path-loss power in dB at pixel coordinates `(x, y)`; distances are scaled
/// by `spacing` to meters.
pub fn path_loss_db(x: f64, y: f64, txs: &[Transmitter], spacing: f64) -> Result<f64> {
    let mut total = 0.0;
    for tx in txs {
        let d = ((tx.x - x).powi(2) + (tx.y - y).powi(2)).sqrt() * spacing;
        if d == 0.0 {
            return Err(Error::SingularDistance);
        }
        total += tx.alpha_db - 10.0 * tx.theta * d.log10();
    }
    Ok(total)
}

/// Pixels on the integer line between two pixels, both endpoints included.
/// Coordinates are (row, column).
pub fn bresenham(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let (mut y, mut x) = (from.0 as i64, from.1 as i64);
    let (y1, x1) = (to.0 as i64, to.1 as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push((y as usize, x as usize));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Number of obstacle pixels on the line from the transmitter pixel to
/// `pixel`, excluding the transmitter pixel and including `pixel` itself.
pub fn obstructed_pixels(tx_pixel: (usize, usize), pixel: (usize, usize), obstacles: &BinaryMask) -> usize {
    bresenham(tx_pixel, pixel)
        .into_iter()
        .skip(1)
        .filter(|&(i, j)| obstacles.get(i, j))
        .count()
}

/// Index of the transmitter closest to `(x, y)`; ties go to the lower index.
pub fn nearest_transmitter(x: f64, y: f64, txs: &[Transmitter]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, tx) in txs.iter().enumerate() {
        let d2 = (tx.x - x).powi(2) + (tx.y - y).powi(2);
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best.0
}

/// Normalized path-loss map with straight-line occlusion: each obstacle pixel
/// crossed on the way to the nearest transmitter costs `attn_per_pixel` dB.
/// Transmitter pixels are pinned to 1.
pub fn render_pathloss_map(scene: &Scene, range: DbRange, attn_per_pixel: f64) -> Result<Grid2D> {
    range.validate()?;
    if !(attn_per_pixel.is_finite() && attn_per_pixel >= 0.0) {
        return Err(Error::InvalidConfig(format!("attenuation {attn_per_pixel}")));
    }
    let (h, w) = (scene.height(), scene.width());
    let txs = scene.transmitters();
    let obstacles = scene.obstacles();
    let sources = scene.source_mask();
    let tx_pixels: Vec<_> = txs.iter().map(Transmitter::pixel).collect();
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            if sources.get(i, j) {
                values.push(1.0);
                continue;
            }
            let (x, y) = (j as f64, i as f64);
            let power = match path_loss_db(x, y, txs, scene.spacing()) {
                Ok(p) => p,
                // sub-pixel transmitter exactly on a non-source pixel center cannot happen
                // after rounding, but keep the ceiling as the substitute value
                Err(Error::SingularDistance) => range.ceiling,
                Err(e) => return Err(e),
            };
            let nearest = nearest_transmitter(x, y, txs);
            let blocked = obstructed_pixels(tx_pixels[nearest], (i, j), &obstacles);
            values.push(normalize_db(power - attn_per_pixel * blocked as f64, range)?);
        }
    }
    Grid2D::new(h, w, scene.spacing(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x_px: f64,
    pub y_px: f64,
    pub power_db: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitObservations {
    pub points: Vec<Observation>,
}

impl FitObservations {
    pub fn new(points: Vec<Observation>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads `x_px,y_px,power_db` rows.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
        let headers = rdr
            .headers()
            .map_err(|source| Error::Csv {
                path: path.into(),
                source,
            })?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["x_px", "y_px", "power_db"] {
            return Err(Error::format(path, format!("unexpected header {headers:?}")));
        }
        let points = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Observation>, _>>()
            .map_err(|source| Error::Csv {
                path: path.into(),
                source,
            })?;
        Ok(Self { points })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv {
            path: path.into(),
            source,
        };
        let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
        for p in &self.points {
            wtr.serialize(p).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub reg_strength: f64,
    pub exponent_prior: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            reg_strength: 0.0,
            exponent_prior: 2.0,
            max_iters: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub transmitters: Vec<Transmitter>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
}

struct FitProblem<'a> {
    obs: &'a FitObservations,
    /// −10 log10(d_jk · h), row-major K × N_t
    log_terms: Vec<f64>,
    n_tx: usize,
    cfg: FitConfig,
}

impl FitProblem<'_> {
    /// Parameter layout: [α_0 … α_{N−1}, θ_0 … θ_{N−1}].
    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n_tx;
        self.obs
            .points
            .iter()
            .enumerate()
            .map(|(j, ob)| {
                let row = &self.log_terms[j * n..(j + 1) * n];
                let model: f64 = (0..n).map(|k| p[k] + p[n + k] * row[k]).sum();
                ob.power_db - model
            })
            .collect()
    }

    fn objective(&self, p: &[f64]) -> f64 {
        let data: f64 = self.residuals(p).iter().map(|r| r * r).sum();
        let prior: f64 = p[self.n_tx..]
            .iter()
            .map(|t| (t - self.cfg.exponent_prior).powi(2))
            .sum();
        data + self.cfg.reg_strength * prior
    }

    fn jacobian(&self) -> DMatrix<f64> {
        let n = self.n_tx;
        let k = self.obs.len();
        DMatrix::from_fn(
            k,
            2 * n,
            |j, c| {
                if c < n {
                    1.0
                } else {
                    self.log_terms[j * n + (c - n)]
                }
            },
        )
    }
}

/// Fits (α_k, θ_k) with positions held fixed, using Levenberg–Marquardt on
/// the regularized objective. Only steps that do not increase the objective
/// are accepted.
pub fn fit_pathloss(
    obs: &FitObservations,
    txs_init: &[Transmitter],
    cfg: &FitConfig,
    spacing: f64,
) -> Result<FitOutcome> {
    if !(cfg.tol > 0.0) || cfg.max_iters == 0 || !(cfg.reg_strength >= 0.0) {
        return Err(Error::InvalidConfig(format!("fit config {cfg:?}")));
    }
    let n = txs_init.len();
    if n == 0 {
        return Err(Error::InvalidConfig("no transmitters to fit".into()));
    }
    if obs.len() < 2 * n {
        return Err(Error::RankDeficientFit);
    }
    let first = obs.points[0];
    if obs.points.iter().all(|p| p.x_px == first.x_px && p.y_px == first.y_px) {
        return Err(Error::RankDeficientFit);
    }
    let mut log_terms = Vec::with_capacity(obs.len() * n);
    for p in &obs.points {
        if !p.power_db.is_finite() {
            return Err(Error::NonFiniteDb);
        }
        for tx in txs_init {
            let d = ((tx.x - p.x_px).powi(2) + (tx.y - p.y_px).powi(2)).sqrt() * spacing;
            if d == 0.0 {
                return Err(Error::SingularDistance);
            }
            log_terms.push(-10.0 * d.log10());
        }
    }
    for k in 0..n {
        let col = log_terms.iter().skip(k).step_by(n);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if hi - lo <= 1e-12 {
            return Err(Error::RankDeficientFit);
        }
    }
    let problem = FitProblem {
        obs,
        log_terms,
        n_tx: n,
        cfg: *cfg,
    };

    let mut params: Vec<f64> = txs_init
        .iter()
        .map(|t| t.alpha_db)
        .chain(txs_init.iter().map(|t| t.theta))
        .collect();
    let mut objective = problem.objective(&params);
    if !objective.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let jac = problem.jacobian();
    let mut normal = jac.transpose() * &jac;
    for k in 0..n {
        normal[(n + k, n + k)] += cfg.reg_strength;
    }
    let gradient = |p: &[f64]| -> DVector<f64> {
        let r = DVector::from_vec(problem.residuals(p));
        let mut g = -(jac.transpose() * r);
        for k in 0..n {
            g[n + k] += cfg.reg_strength * (p[n + k] - cfg.exponent_prior);
        }
        g * 2.0
    };

    let mut trace = vec![objective];
    let mut damping = 1e-3;
    let mut grad = gradient(&params);
    let mut iterations = 0;
    while iterations < cfg.max_iters && grad.norm() > cfg.tol {
        iterations += 1;
        let mut lhs = normal.clone();
        for c in 0..2 * n {
            lhs[(c, c)] += damping * normal[(c, c)].max(1e-12);
        }
        let Some(chol) = lhs.cholesky() else {
            damping *= 10.0;
            continue;
        };
        // the Gauss–Newton model is exact here: ½∇²F = JᵀJ + λ I_θ
        let step = chol.solve(&(-&grad * 0.5));
        let candidate: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
        let cand_obj = problem.objective(&candidate);
        if cand_obj.is_finite() && cand_obj <= objective {
            params = candidate;
            objective = cand_obj;
            trace.push(objective);
            grad = gradient(&params);
            damping = (damping * 0.1).max(1e-15);
        } else {
            damping *= 10.0;
            if damping > 1e20 {
                break;
            }
        }
    }
    let transmitters = txs_init
        .iter()
        .enumerate()
        .map(|(k, t)| Transmitter {
            alpha_db: params[k],
            theta: params[n + k],
            ..*t
        })
        .collect();
    Ok(FitOutcome {
        transmitters,
        objective,
        grad_norm: grad.norm(),
        iterations,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn open_scene(n: usize, tx: Transmitter) -> Scene {
        Scene::new(BinaryMask::empty(n, n), None, vec![tx], 1.0).unwrap()
    }

    #[test]
    fn single_transmitter_values() {
        let tx = [Transmitter::new(0.0, 0.0, 0.0, 2.0)];
        assert!((path_loss_db(10.0, 0.0, &tx, 1.0).unwrap() + 20.0).abs() < 1e-12);
        let tx = [Transmitter::new(3.0, 4.0, 5.0, 3.7)];
        assert!((path_loss_db(3.0, 5.0, &tx, 1.0).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_transmitter_sum() {
        let txs = [
            Transmitter::new(10.0, 0.0, 0.0, 2.0),
            Transmitter::new(0.0, 100.0, 0.0, 2.0),
        ];
        let p = path_loss_db(0.0, 0.0, &txs, 1.0).unwrap();
        assert!((p + 60.0).abs() < 1e-12);
    }

    #[test]
    fn spacing_scales_distance() {
        let tx = [Transmitter::new(0.0, 0.0, 0.0, 2.0)];
        let p = path_loss_db(5.0, 0.0, &tx, 2.0).unwrap();
        assert!((p + 20.0).abs() < 1e-12);
    }

    #[test]
    fn singular_distance_error() {
        let tx = [Transmitter::new(2.0, 2.0, 0.0, 2.0)];
        let err = path_loss_db(2.0, 2.0, &tx, 1.0).unwrap_err();
        assert_eq!(err.to_string(), "singular distance");
    }

    #[test]
    fn strictly_decreasing_in_distance() {
        let tx = [Transmitter::new(0.0, 0.0, 23.0, 2.3)];
        let mut prev = f64::INFINITY;
        for d in 1..200 {
            let p = path_loss_db(d as f64 * 0.37, 0.0, &tx, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let line = bresenham((0, 0), (3, 7));
        assert_eq!(line.first(), Some(&(0, 0)));
        assert_eq!(line.last(), Some(&(3, 7)));
        assert_eq!(line.len(), 8);
        for w in line.windows(2) {
            let di = (w[0].0 as i64 - w[1].0 as i64).abs();
            let dj = (w[0].1 as i64 - w[1].1 as i64).abs();
            assert!(di <= 1 && dj <= 1);
        }
        assert_eq!(bresenham((4, 4), (4, 4)), vec![(4, 4)]);
    }

    #[test]
    fn open_map_is_pure_formula() {
        let tx = Transmitter::new(10.0, 12.0, 23.0, 2.0);
        let scene = open_scene(32, tx);
        let range = DbRange::default();
        let map = render_pathloss_map(&scene, range, 2.0).unwrap();
        assert_eq!(map.get(12, 10), 1.0);
        for i in 0..32 {
            for j in 0..32 {
                if (i, j) == (12, 10) {
                    continue;
                }
                let expect = normalize_db(path_loss_db(j as f64, i as f64, &[tx], 1.0).unwrap(), range).unwrap();
                assert_eq!(map.get(i, j), expect);
                assert!(map.get(i, j) <= 1.0);
            }
        }
        let again = render_pathloss_map(&scene, range, 2.0).unwrap();
        assert_eq!(map, again);
    }

    #[test]
    fn wall_attenuation_counts_pixels() {
        // transmitter at column 2, a vertical 3-pixel-thick wall at columns 5..=7, probe at column 12
        let mut b = BinaryMask::empty(16, 16);
        for j in 5..=7 {
            for i in 4..=12 {
                b.set(i, j, true);
            }
        }
        let tx = Transmitter::new(2.0, 8.0, 23.0, 2.0);
        let scene = Scene::new(b, None, vec![tx], 1.0).unwrap();
        let range = DbRange::default();
        let map = render_pathloss_map(&scene, range, 2.0).unwrap();
        let formula = path_loss_db(12.0, 8.0, &[tx], 1.0).unwrap();
        let expect = normalize_db(formula - 6.0, range).unwrap();
        assert!((map.get(8, 12) - expect).abs() < 1e-15);
    }

    fn synthetic_obs(tx: Transmitter, n: usize, noise: f64, seed: u64) -> FitObservations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        while points.len() < n {
            let (x, y) = (rng.random_range(0.0..64.0f64), rng.random_range(0.0..64.0f64));
            if (x - tx.x).hypot(y - tx.y) < 0.5 {
                continue;
            }
            let p = path_loss_db(x, y, &[tx], 1.0).unwrap() + noise * rng.random_range(-1.0..1.0);
            points.push(Observation {
                x_px: x,
                y_px: y,
                power_db: p,
            });
        }
        FitObservations::new(points)
    }

    #[test]
    fn noiseless_fit_recovers_parameters() {
        let truth = Transmitter::new(30.0, 20.0, 10.0, 2.5);
        let obs = synthetic_obs(truth, 60, 0.0, 1);
        let init = Transmitter::new(30.0, 20.0, 0.0, 2.0);
        let out = fit_pathloss(&obs, &[init], &FitConfig::default(), 1.0).unwrap();
        let t = out.transmitters[0];
        assert!((t.alpha_db - 10.0).abs() < 1e-6, "{t:?}");
        assert!((t.theta - 2.5).abs() < 1e-6, "{t:?}");
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn fit_at_optimum_returns_immediately() {
        let truth = Transmitter::new(30.0, 20.0, 10.0, 2.5);
        let obs = synthetic_obs(truth, 40, 0.0, 2);
        let out = fit_pathloss(&obs, &[truth], &FitConfig::default(), 1.0).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.grad_norm <= 1e-8);
    }

    #[test]
    fn heavy_regularizer_pins_exponent() {
        let truth = Transmitter::new(30.0, 20.0, 10.0, 2.5);
        let obs = synthetic_obs(truth, 40, 0.0, 3);
        let cfg = FitConfig {
            reg_strength: 1e9,
            exponent_prior: 3.0,
            ..FitConfig::default()
        };
        let out = fit_pathloss(&obs, &[Transmitter::new(30.0, 20.0, 0.0, 2.0)], &cfg, 1.0).unwrap();
        assert!((out.transmitters[0].theta - 3.0).abs() < 1e-3);
    }

    #[test]
    fn regularizer_never_moves_away_from_prior() {
        let truth = Transmitter::new(30.0, 20.0, 10.0, 2.5);
        let obs = synthetic_obs(truth, 40, 0.0, 4);
        let init = [Transmitter::new(30.0, 20.0, 0.0, 2.0)];
        let free = fit_pathloss(&obs, &init, &FitConfig::default(), 1.0).unwrap();
        for lambda in [0.1, 10.0, 1e3, 1e5] {
            let cfg = FitConfig {
                reg_strength: lambda,
                exponent_prior: 3.2,
                ..FitConfig::default()
            };
            let reg = fit_pathloss(&obs, &init, &cfg, 1.0).unwrap();
            let d_reg = (reg.transmitters[0].theta - 3.2).abs();
            let d_free = (free.transmitters[0].theta - 3.2).abs();
            assert!(d_reg <= d_free + 1e-9);
        }
    }

    #[test]
    fn degenerate_observations_rejected() {
        let p = Observation {
            x_px: 5.0,
            y_px: 5.0,
            power_db: -40.0,
        };
        let obs = FitObservations::new(vec![p; 10]);
        let err = fit_pathloss(
            &obs,
            &[Transmitter::new(1.0, 1.0, 0.0, 2.0)],
            &FitConfig::default(),
            1.0,
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "rank-deficient fit");
    }

    #[test]
    fn observations_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let obs = synthetic_obs(Transmitter::new(3.0, 3.0, 0.0, 2.0), 5, 0.1, 9);
        obs.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x_px,y_px,power_db\n"));
        assert_eq!(FitObservations::read_csv(&path).unwrap(), obs);
    }
}
