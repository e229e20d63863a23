//! Spatial data types: scalar grids, binary masks, transmitters and scenes,
//! plus the dB <-> normalized-unit mapping and the on-disk grid/mask formats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes of the `.f32g` grid format.
pub const F32G_MAGIC: &[u8; 4] = b"PHRM";
/// Size of the `.f32g` header in bytes.
pub const F32G_HEADER_LEN: usize = 16;

/// H×W field of 64-bit reals stored row-major, with uniform spacing `h`
/// (meters per pixel). Row index `i` runs along y, column index `j` along x.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    spacing: f64,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::GridTooSmall);
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing}")));
        }
        if values.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite value".into()));
        }
        Ok(Self {
            height,
            width,
            spacing,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, spacing: f64, value: f64) -> Result<Self> {
        Self::new(height, width, spacing, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize, spacing: f64) -> Result<Self> {
        Self::filled(height, width, spacing, 0.0)
    }

    /// Builds a grid by evaluating `f(i, j)` at every (row, column).
    pub fn from_fn(height: usize, width: usize, spacing: f64, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self::new(height, width, spacing, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Writes one value. Non-finite values are rejected to keep the invariant.
    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::InvalidGrid("non-finite value".into()));
        }
        let k = self.idx(i, j);
        self.values[k] = v;
        Ok(())
    }

    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_shape(&self, other: &Grid2D, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Elementwise map producing a new grid with the same geometry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Grid2D> {
        Grid2D::new(
            self.height,
            self.width,
            self.spacing,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Serializes to the `.f32g` byte layout.
    pub fn to_f32g_bytes(&self) -> Vec<u8> {
        encode_f32g(
            self.height as u32,
            self.width as u32,
            self.spacing as f32,
            self.values.iter().map(|&v| v as f32),
        )
    }

    pub fn from_f32g_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let raw = RawF32Grid::decode(bytes)?;
        Grid2D::new(
            raw.height as usize,
            raw.width as usize,
            raw.spacing as f64,
            raw.values.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| e.to_string())
    }

    pub fn write_f32g(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_f32g_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_f32g(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_f32g_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

pub(crate) fn encode_f32g(height: u32, width: u32, spacing: f32, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(F32G_HEADER_LEN + 4 * (height as usize) * (width as usize));
    out.extend_from_slice(F32G_MAGIC);
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&spacing.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Undecorated contents of a `.f32g` file. Used directly for flat parameter
/// arrays, which do not satisfy the `Grid2D` size invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct RawF32Grid {
    pub height: u32,
    pub width: u32,
    pub spacing: f32,
    pub values: Vec<f32>,
}

impl RawF32Grid {
    pub fn encode(&self) -> Vec<u8> {
        encode_f32g(self.height, self.width, self.spacing, self.values.iter().copied())
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < F32G_HEADER_LEN {
            return Err("truncated header".into());
        }
        if &bytes[0..4] != F32G_MAGIC {
            return Err("bad magic".into());
        }
        let word = |k: usize| [bytes[k], bytes[k + 1], bytes[k + 2], bytes[k + 3]];
        let height = u32::from_le_bytes(word(4));
        let width = u32::from_le_bytes(word(8));
        let spacing = f32::from_le_bytes(word(12));
        let n = height as usize * width as usize;
        let body = &bytes[F32G_HEADER_LEN..];
        if body.len() != 4 * n {
            return Err(format!("expected {} payload bytes, found {}", 4 * n, body.len()));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            height,
            width,
            spacing,
            values,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

/// H×W boolean field. Serves as building/vehicle masks, the Helmholtz
/// interior, boundary and source sets, and the observation mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "mask expects {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                bits.push(f(i, j));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn matches(&self, grid: &Grid2D) -> bool {
        self.height == grid.height() && self.width == grid.width()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Iterates the (row, column) coordinates of set bits in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k / w, k % w))
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if tokens[0] != "P5" {
            return Err(format!("unsupported PGM magic {:?}", tokens[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM field {s:?}"));
        let width = parse(&tokens[1])?;
        let height = parse(&tokens[2])?;
        if parse(&tokens[3])? != 255 {
            return Err("PGM maxval must be 255".into());
        }
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != width * height {
            return Err(format!(
                "expected {} raster bytes, found {}",
                width * height,
                raster.len()
            ));
        }
        let bits = raster
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                255 => Ok(true),
                other => Err(format!("non-binary PGM value {other}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { height, width, bits })
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

/// A transmitter at sub-pixel position `(x, y)` = (a_k, b_k) with reference
/// power `alpha_db` and path-loss exponent `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmitter {
    pub x: f64,
    pub y: f64,
    pub alpha_db: f64,
    pub theta: f64,
}

impl Transmitter {
    pub fn new(x: f64, y: f64, alpha_db: f64, theta: f64) -> Self {
        Self { x, y, alpha_db, theta }
    }

    /// Nearest grid pixel as (row, column).
    pub fn pixel(&self) -> (usize, usize) {
        (self.y.round() as usize, self.x.round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    buildings: BinaryMask,
    vehicles: Option<BinaryMask>,
    transmitters: Vec<Transmitter>,
    spacing: f64,
}

impl Scene {
    pub fn new(
        buildings: BinaryMask,
        vehicles: Option<BinaryMask>,
        transmitters: Vec<Transmitter>,
        spacing: f64,
    ) -> Result<Self> {
        let (h, w) = (buildings.height(), buildings.width());
        if h < 3 || w < 3 {
            return Err(Error::GridTooSmall);
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidScene(format!("spacing {spacing}")));
        }
        if let Some(v) = &vehicles {
            if !v.same_shape(&buildings) {
                return Err(Error::InvalidScene("vehicle mask shape".into()));
            }
            if v.intersection(&buildings)?.count() > 0 {
                return Err(Error::InvalidScene("vehicles overlap buildings".into()));
            }
        }
        if transmitters.is_empty() {
            return Err(Error::InvalidScene("no transmitters".into()));
        }
        for (k, tx) in transmitters.iter().enumerate() {
            let inside = tx.x >= 0.0 && tx.x < w as f64 && tx.y >= 0.0 && tx.y < h as f64;
            if !inside || !(tx.theta > 0.0) || !tx.alpha_db.is_finite() {
                return Err(Error::InvalidScene(format!("transmitter {k} invalid: {tx:?}")));
            }
            let (i, j) = tx.pixel();
            if i >= h || j >= w {
                return Err(Error::InvalidScene(format!("transmitter {k} rounds off-grid")));
            }
            if buildings.get(i, j) {
                return Err(Error::InvalidScene(format!("transmitter {k} inside a building")));
            }
        }
        Ok(Self {
            buildings,
            vehicles,
            transmitters,
            spacing,
        })
    }

    pub fn height(&self) -> usize {
        self.buildings.height()
    }

    pub fn width(&self) -> usize {
        self.buildings.width()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn buildings(&self) -> &BinaryMask {
        &self.buildings
    }

    pub fn vehicles(&self) -> Option<&BinaryMask> {
        self.vehicles.as_ref()
    }

    pub fn transmitters(&self) -> &[Transmitter] {
        &self.transmitters
    }

    pub fn is_dynamic(&self) -> bool {
        self.vehicles.is_some()
    }

    /// Buildings, plus vehicles for dynamic scenes.
    pub fn obstacles(&self) -> BinaryMask {
        match &self.vehicles {
            Some(v) => self.buildings.union(v).expect("shapes validated"),
            None => self.buildings.clone(),
        }
    }

    /// Transmitter centers rounded to pixels.
    pub fn source_mask(&self) -> BinaryMask {
        let mut m = BinaryMask::empty(self.height(), self.width());
        for tx in &self.transmitters {
            let (i, j) = tx.pixel();
            m.set(i, j, true);
        }
        m
    }

    /// Same geometry with the vehicle layer removed.
    pub fn without_vehicles(&self) -> Scene {
        Scene {
            vehicles: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbRange {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for DbRange {
    fn default() -> Self {
        Self {
            floor: -100.0,
            ceiling: 23.0,
        }
    }
}

impl DbRange {
    pub fn new(floor: f64, ceiling: f64) -> Result<Self> {
        let r = Self { floor, ceiling };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.floor.is_finite() && self.ceiling.is_finite() && self.floor < self.ceiling {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "dB range needs floor < ceiling, got ({}, {})",
                self.floor, self.ceiling
            )))
        }
    }

    pub fn span(&self) -> f64 {
        self.ceiling - self.floor
    }
}

/// Maps a dB value to [0, 1] with the affine floor/ceiling map, clamped.
pub fn normalize_db(p: f64, range: DbRange) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::NonFiniteDb);
    }
    range.validate()?;
    Ok(((p - range.floor) / range.span()).clamp(0.0, 1.0))
}

/// Inverse of [`normalize_db`] on [0, 1]; extrapolates linearly outside it.
pub fn denormalize(v: f64, range: DbRange) -> f64 {
    range.floor + v * range.span()
}
