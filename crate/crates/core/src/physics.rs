//! Discrete Helmholtz machinery.
//!
//! The field `u` is scored against
//!
//! ```text
//! r(i,j) = Δ_h u(i,j) + k²(i,j) u(i,j) − f(i,j)          on Ω_int
//! Δ_h u  = (u(i+1,j) + u(i−1,j) + u(i,j+1) + u(i,j−1) − 4 u(i,j)) / h²
//! ```
//!
//! and three mean-square penalties: the residual over Ω_int, the Dirichlet
//! mismatch `u − u_BC` over ∂Ω and the source mismatch `u − u_src` over Ω_src.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid2D, Scene};

/// Effective material parameters used to build the wavenumber and source
/// fields of a scene. Wavenumbers are in units of 1/h, the source amplitude
/// in units of 1/h².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub k_free: f64,
    pub k_obstacle: f64,
    pub source_amplitude: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            k_free: 0.5,
            k_obstacle: 2.0,
            source_amplitude: 1.0,
        }
    }
}

/// Weights of the three physics terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinnWeights {
    pub pde: f64,
    pub bc: f64,
    pub source: f64,
}

impl Default for PinnWeights {
    fn default() -> Self {
        Self {
            pde: 1.5,
            bc: 0.5,
            source: 0.2,
        }
    }
}

impl PinnWeights {
    pub fn new(pde: f64, bc: f64, source: f64) -> Result<Self> {
        let w = Self { pde, bc, source };
        w.validate()?;
        Ok(w)
    }

    pub fn zero() -> Self {
        Self {
            pde: 0.0,
            bc: 0.0,
            source: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.pde, self.bc, self.source];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("PINN weights must be >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, pde: f64, bc: f64, source: f64) -> f64 {
        self.pde * pde + self.bc * bc + self.source * source
    }
}

/// Everything about a Helmholtz problem except the field itself.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmholtzSetup {
    k: Grid2D,
    f: Grid2D,
    bc_values: Grid2D,
    src_values: Grid2D,
    interior: BinaryMask,
    boundary: BinaryMask,
    source: BinaryMask,
}

impl HelmholtzSetup {
    pub fn new(
        k: Grid2D,
        f: Grid2D,
        bc_values: Grid2D,
        src_values: Grid2D,
        interior: BinaryMask,
        boundary: BinaryMask,
        source: BinaryMask,
    ) -> Result<Self> {
        for (g, name) in [(&f, "f"), (&bc_values, "u_BC"), (&src_values, "u_src")] {
            k.check_shape(g, name)?;
            if g.spacing() != k.spacing() {
                return Err(Error::Shape(format!("{name} spacing differs from k")));
            }
        }
        for (m, name) in [(&interior, "Ω_int"), (&boundary, "∂Ω"), (&source, "Ω_src")] {
            if !m.matches(&k) {
                return Err(Error::Shape(format!("{name} mask shape")));
            }
        }
        let (h, w) = (k.height(), k.width());
        for (i, j) in interior.iter_set() {
            if i == 0 || j == 0 || i + 1 == h || j + 1 == w {
                return Err(Error::InvalidGrid(format!(
                    "interior point ({i},{j}) lies on the stencil frame"
                )));
            }
        }
        if interior.intersection(&boundary)?.count() > 0 {
            return Err(Error::InvalidGrid("interior and boundary sets overlap".into()));
        }
        if interior.count() == 0 {
            return Err(Error::EmptyConstraintSet);
        }
        Ok(Self {
            k,
            f,
            bc_values,
            src_values,
            interior,
            boundary,
            source,
        })
    }

    /// Setup whose interior is every non-frame pixel, with no boundary or
    /// source constraints.
    pub fn interior_only(k: Grid2D, f: Grid2D) -> Result<Self> {
        let (h, w) = (k.height(), k.width());
        let interior = BinaryMask::from_fn(h, w, |i, j| i > 0 && j > 0 && i + 1 < h && j + 1 < w);
        let zeros = Grid2D::zeros(h, w, k.spacing())?;
        Self::new(
            k,
            f,
            zeros.clone(),
            zeros,
            interior,
            BinaryMask::empty(h, w),
            BinaryMask::empty(h, w),
        )
    }

    /// Builds the problem for a scene: obstacles (buildings, plus vehicles in
    /// dynamic scenes) form ∂Ω with u_BC = 0, transmitter pixels form Ω_src
    /// with u_src = 1, and the interior is every non-frame, non-obstacle pixel.
    pub fn from_scene(scene: &Scene, cfg: &PhysicsConfig) -> Result<Self> {
        let (h, w, dx) = (scene.height(), scene.width(), scene.spacing());
        let obstacles = scene.obstacles();
        let sources = scene.source_mask();
        let k = Grid2D::from_fn(h, w, dx, |i, j| {
            if obstacles.get(i, j) {
                cfg.k_obstacle / dx
            } else {
                cfg.k_free / dx
            }
        })?;
        let amp = cfg.source_amplitude / (dx * dx);
        let f = Grid2D::from_fn(h, w, dx, |i, j| if sources.get(i, j) { amp } else { 0.0 })?;
        let interior = BinaryMask::from_fn(h, w, |i, j| {
            i > 0 && j > 0 && i + 1 < h && j + 1 < w && !obstacles.get(i, j)
        });
        Self::new(
            k,
            f,
            Grid2D::zeros(h, w, dx)?,
            Grid2D::filled(h, w, dx, 1.0)?,
            interior,
            obstacles,
            sources,
        )
    }

    pub fn height(&self) -> usize {
        self.k.height()
    }

    pub fn width(&self) -> usize {
        self.k.width()
    }

    pub fn spacing(&self) -> f64 {
        self.k.spacing()
    }

    pub fn k(&self) -> &Grid2D {
        &self.k
    }

    pub fn f(&self) -> &Grid2D {
        &self.f
    }

    pub fn bc_values(&self) -> &Grid2D {
        &self.bc_values
    }

    pub fn src_values(&self) -> &Grid2D {
        &self.src_values
    }

    pub fn interior(&self) -> &BinaryMask {
        &self.interior
    }

    pub fn boundary(&self) -> &BinaryMask {
        &self.boundary
    }

    pub fn source(&self) -> &BinaryMask {
        &self.source
    }

    /// Zeroes the weight of any constraint whose set is empty, so that a
    /// scene without obstacles can still be scored with the default weights.
    pub fn effective_weights(&self, w: PinnWeights) -> PinnWeights {
        PinnWeights {
            pde: w.pde,
            bc: if self.boundary.count() == 0 { 0.0 } else { w.bc },
            source: if self.source.count() == 0 { 0.0 } else { w.source },
        }
    }

    fn check_field(&self, u: &Grid2D) -> Result<()> {
        self.k.check_shape(u, "u")?;
        if u.spacing() != self.k.spacing() {
            return Err(Error::Shape("u spacing differs from setup".into()));
        }
        Ok(())
    }
}

/// A field paired with the problem it is scored against.
#[derive(Debug, Clone, Copy)]
pub struct HelmholtzField<'a> {
    pub u: &'a Grid2D,
    pub setup: &'a HelmholtzSetup,
}

impl<'a> HelmholtzField<'a> {
    pub fn new(u: &'a Grid2D, setup: &'a HelmholtzSetup) -> Result<Self> {
        setup.check_field(u)?;
        Ok(Self { u, setup })
    }
}

/// Loss terms returned by [`pinn_losses`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PinnLosses {
    pub pde: f64,
    pub bc: f64,
    pub source: f64,
    pub total: f64,
}

/// Five-point Laplacian; the one-pixel frame is left at zero.
pub fn laplacian(u: &Grid2D) -> Result<Grid2D> {
    let (h, w) = (u.height(), u.width());
    if h < 3 || w < 3 {
        return Err(Error::GridTooSmall);
    }
    let inv_h2 = 1.0 / (u.spacing() * u.spacing());
    let v = u.values();
    let mut out = vec![0.0; h * w];
    for i in 1..h - 1 {
        let row = i * w;
        for j in 1..w - 1 {
            let c = row + j;
            out[c] = (v[c + w] + v[c - w] + v[c + 1] + v[c - 1] - 4.0 * v[c]) * inv_h2;
        }
    }
    Grid2D::new(h, w, u.spacing(), out)
}

/// Pointwise residual on Ω_int, zero elsewhere.
pub fn residual(field: &HelmholtzField<'_>) -> Result<Grid2D> {
    let setup = field.setup;
    setup.check_field(field.u)?;
    let lap = laplacian(field.u)?;
    let (u, k, f) = (field.u.values(), setup.k.values(), setup.f.values());
    let lap = lap.values();
    let mut r = vec![0.0; u.len()];
    for (c, &inside) in setup.interior.bits().iter().enumerate() {
        if inside {
            r[c] = lap[c] + k[c] * k[c] * u[c] - f[c];
        }
    }
    Grid2D::new(setup.height(), setup.width(), setup.spacing(), r)
}

fn check_sets(setup: &HelmholtzSetup, w: &PinnWeights) -> Result<()> {
    w.validate()?;
    let empty = |m: &BinaryMask| m.count() == 0;
    if (w.pde > 0.0 && empty(&setup.interior))
        || (w.bc > 0.0 && empty(&setup.boundary))
        || (w.source > 0.0 && empty(&setup.source))
    {
        return Err(Error::EmptyConstraintSet);
    }
    Ok(())
}

fn masked_mse(u: &[f64], target: &[f64], mask: &BinaryMask) -> f64 {
    let n = mask.count();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = mask
        .bits()
        .iter()
        .zip(u.iter().zip(target))
        .filter(|(&m, _)| m)
        .map(|(_, (a, b))| (a - b) * (a - b))
        .sum();
    sum / n as f64
}

/// Physics losses. A term whose constraint set is empty reports 0 and is only
/// an error when its weight is positive.
pub fn pinn_losses(field: &HelmholtzField<'_>, w: PinnWeights) -> Result<PinnLosses> {
    let setup = field.setup;
    check_sets(setup, &w)?;
    let r = residual(field)?;
    let n_int = setup.interior.count() as f64;
    let pde = setup
        .interior
        .bits()
        .iter()
        .zip(r.values())
        .filter(|(&m, _)| m)
        .map(|(_, v)| v * v)
        .sum::<f64>()
        / n_int;
    let u = field.u.values();
    let bc = masked_mse(u, setup.bc_values.values(), &setup.boundary);
    let source = masked_mse(u, setup.src_values.values(), &setup.source);
    Ok(PinnLosses {
        pde,
        bc,
        source,
        total: w.combine(pde, bc, source),
    })
}

/// Gradient of the weighted physics loss with respect to `u`.
///
/// Each `u(i,j)` enters the residual at its own pixel and at its four
/// neighbours, so the PDE part is the adjoint stencil applied to `2 r / N_int`.
pub fn pinn_losses_grad(field: &HelmholtzField<'_>, w: PinnWeights) -> Result<Grid2D> {
    let setup = field.setup;
    check_sets(setup, &w)?;
    let (h, wd) = (setup.height(), setup.width());
    let mut g = vec![0.0; h * wd];
    let u = field.u.values();

    if w.pde > 0.0 {
        let r = residual(field)?;
        let r = r.values();
        let k = setup.k.values();
        let inv_h2 = 1.0 / (setup.spacing() * setup.spacing());
        let scale = 2.0 * w.pde / setup.interior.count() as f64;
        for (c, &inside) in setup.interior.bits().iter().enumerate() {
            if !inside {
                continue;
            }
            let s = scale * r[c];
            g[c] += s * (k[c] * k[c] - 4.0 * inv_h2);
            let nb = s * inv_h2;
            g[c - 1] += nb;
            g[c + 1] += nb;
            g[c - wd] += nb;
            g[c + wd] += nb;
        }
    }
    for (weight, mask, target) in [
        (w.bc, &setup.boundary, setup.bc_values.values()),
        (w.source, &setup.source, setup.src_values.values()),
    ] {
        if weight > 0.0 {
            let scale = 2.0 * weight / mask.count() as f64;
            for (c, &m) in mask.bits().iter().enumerate() {
                if m {
                    g[c] += scale * (u[c] - target[c]);
                }
            }
        }
    }
    Grid2D::new(h, wd, setup.spacing(), g)
}
