//! Procedural scenes and on-disk datasets.
//!
//! Every random draw comes from a ChaCha stream keyed by the master seed, a
//! purpose tag and an index, so a dataset is a pure function of its
//! [`GenConfig`] regardless of how many threads build it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, DbRange, Grid2D, Scene, Transmitter};
use crate::pathloss::render_pathloss_map;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MANIFEST: &str = "manifest.json";

/// Purpose tags for derived random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Scene = 1,
    ObservationMask = 2,
    Training = 3,
    Evaluation = 4,
    Sampling = 5,
    Init = 6,
}

/// Independent ChaCha stream for `(seed, tag, index)`.
pub fn stream_rng(seed: u64, tag: StreamTag, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 48) ^ index);
    rng
}

/// Mixes a seed with an index into a new seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub map_size: usize,
    pub n_maps: usize,
    pub buildings_range: (usize, usize),
    pub building_size: (usize, usize),
    pub n_tx_per_map: usize,
    pub alpha_db: f64,
    pub theta_range: (f64, f64),
    pub drm: bool,
    pub vehicles_range: (usize, usize),
    pub vehicle_size: (usize, usize),
    pub seed: u64,
    pub spacing: f64,
    pub db_range: DbRange,
    /// dB lost per obstacle pixel on the line to the nearest transmitter.
    pub attn_per_pixel: f64,
    /// Writes the Dirichlet floor (0) into obstacle pixels of the ground truth.
    pub zero_obstacles: bool,
    /// Train records per `train_ratio.0 + train_ratio.1` records.
    pub train_ratio: (usize, usize),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            map_size: 64,
            n_maps: 40,
            buildings_range: (6, 18),
            building_size: (3, 12),
            n_tx_per_map: 2,
            alpha_db: 23.0,
            theta_range: (1.8, 3.5),
            drm: false,
            vehicles_range: (3, 8),
            vehicle_size: (1, 4),
            seed: 0,
            spacing: 1.0,
            db_range: DbRange::default(),
            attn_per_pixel: 2.0,
            zero_obstacles: true,
            train_ratio: (5, 2),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.map_size < 16 {
            return bad("map_size must be >= 16");
        }
        if self.buildings_range.0 > self.buildings_range.1 {
            return bad("buildings_range min > max");
        }
        if self.vehicles_range.0 > self.vehicles_range.1 {
            return bad("vehicles_range min > max");
        }
        if self.building_size.0 == 0 || self.building_size.0 > self.building_size.1 {
            return bad("building_size must be 1 <= min <= max");
        }
        if self.vehicle_size.0 == 0 || self.vehicle_size.0 > self.vehicle_size.1 {
            return bad("vehicle_size must be 1 <= min <= max");
        }
        if self.n_tx_per_map == 0 {
            return bad("n_tx_per_map must be >= 1");
        }
        if !(self.theta_range.0 > 0.0 && self.theta_range.0 <= self.theta_range.1) {
            return bad("theta_range must be 0 < min <= max");
        }
        if !(self.spacing > 0.0) {
            return bad("spacing must be positive");
        }
        if self.train_ratio.0 + self.train_ratio.1 == 0 {
            return bad("train_ratio must not be 0:0");
        }
        self.db_range.validate()
    }

    /// Number of train records; indices below it are train, the rest test.
    pub fn n_train(&self) -> usize {
        let (a, b) = self.train_ratio;
        self.n_maps * a / (a + b)
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.n_train() {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub index: usize,
    pub scene: Scene,
    pub truth: Grid2D,
    pub split: Split,
}

fn try_place_rect(rng: &mut ChaCha8Rng, n: usize, size: (usize, usize), blocked: &BinaryMask) -> Option<Rect> {
    let lo = size.0.min(n);
    let hi = size.1.min(n);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let rh = rng.random_range(lo..=hi);
        let rw = rng.random_range(lo..=hi);
        let top = rng.random_range(0..=n - rh);
        let left = rng.random_range(0..=n - rw);
        let clear = (top..top + rh).all(|i| (left..left + rw).all(|j| !blocked.get(i, j)));
        if clear {
            return Some((top, left, rh, rw));
        }
    }
    None
}

fn fill_rect(mask: &mut BinaryMask, (top, left, rh, rw): Rect) {
    for i in top..top + rh {
        for j in left..left + rw {
            mask.set(i, j, true);
        }
    }
}

/// Axis-aligned rectangle as (top, left, height, width) in pixels.
pub type Rect = (usize, usize, usize, usize);

/// A generated scene together with the rectangles it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub scene: Scene,
    pub buildings: Vec<Rect>,
    pub vehicles: Vec<Rect>,
}

/// Rectangular buildings without overlap, transmitters on free pixels and,
/// for dynamic maps, small vehicle rectangles on the remaining free pixels.
pub fn generate_scene(cfg: &GenConfig, map_index: usize) -> Result<Scene> {
    generate_layout(cfg, map_index).map(|l| l.scene)
}

pub fn generate_layout(cfg: &GenConfig, map_index: usize) -> Result<SceneLayout> {
    cfg.validate()?;
    if map_index >= cfg.n_maps {
        return Err(Error::InvalidConfig(format!(
            "map index {map_index} out of range for {} maps",
            cfg.n_maps
        )));
    }
    let n = cfg.map_size;
    let mut rng = stream_rng(cfg.seed, StreamTag::Scene, map_index as u64);

    let mut buildings = BinaryMask::empty(n, n);
    let mut building_rects = Vec::new();
    let n_buildings = rng.random_range(cfg.buildings_range.0..=cfg.buildings_range.1);
    for _ in 0..n_buildings {
        let rect = try_place_rect(&mut rng, n, cfg.building_size, &buildings).ok_or(Error::SceneTooDense)?;
        fill_rect(&mut buildings, rect);
        building_rects.push(rect);
    }

    let mut occupied = buildings.clone();
    let mut transmitters = Vec::with_capacity(cfg.n_tx_per_map);
    for _ in 0..cfg.n_tx_per_map {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if !occupied.get(i, j) {
                occupied.set(i, j, true);
                let theta = rng.random_range(cfg.theta_range.0..=cfg.theta_range.1);
                transmitters.push(Transmitter::new(j as f64, i as f64, cfg.alpha_db, theta));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SceneTooDense);
        }
    }

    let mut vehicle_rects = Vec::new();
    let vehicles = if cfg.drm {
        let mut vehicles = BinaryMask::empty(n, n);
        let count = rng.random_range(cfg.vehicles_range.0..=cfg.vehicles_range.1);
        for _ in 0..count {
            let blocked = occupied.union(&vehicles)?;
            let rect = try_place_rect(&mut rng, n, cfg.vehicle_size, &blocked).ok_or(Error::SceneTooDense)?;
            fill_rect(&mut vehicles, rect);
            vehicle_rects.push(rect);
        }
        Some(vehicles)
    } else {
        None
    };
    Ok(SceneLayout {
        scene: Scene::new(buildings, vehicles, transmitters, cfg.spacing)?,
        buildings: building_rects,
        vehicles: vehicle_rects,
    })
}

/// Ground-truth map: the occluded path-loss render, with obstacle pixels set
/// to the Dirichlet floor when `cfg.zero_obstacles` is on.
pub fn render_ground_truth(scene: &Scene, cfg: &GenConfig) -> Result<Grid2D> {
    let map = render_pathloss_map(scene, cfg.db_range, cfg.attn_per_pixel)?;
    if !cfg.zero_obstacles {
        return Ok(map);
    }
    let obstacles = scene.obstacles();
    let values = map
        .values()
        .iter()
        .zip(obstacles.bits())
        .map(|(&v, &o)| if o { 0.0 } else { v })
        .collect();
    Grid2D::new(map.height(), map.width(), map.spacing(), values)
}

/// Picks `round(rate·H·W)` distinct non-building pixels uniformly at random.
pub fn sample_observation_mask(scene: &Scene, rate: f64, seed: u64) -> Result<BinaryMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("observation rate {rate} outside (0, 1]")));
    }
    let (h, w) = (scene.height(), scene.width());
    let count = (rate * (h * w) as f64).round() as usize;
    let free: Vec<usize> = scene
        .buildings()
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| !b)
        .map(|(k, _)| k)
        .collect();
    if count > free.len() {
        return Err(Error::RateUnsatisfiable);
    }
    let mut rng = stream_rng(seed, StreamTag::ObservationMask, 0);
    let mut bits = vec![false; h * w];
    for pick in sample(&mut rng, free.len(), count) {
        bits[free[pick]] = true;
    }
    BinaryMask::new(h, w, bits)
}

/// Generates and renders every record of the configured dataset.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    (0..cfg.n_maps)
        .into_par_iter()
        .map(|index| {
            let scene = generate_scene(cfg, index)?;
            let truth = render_ground_truth(&scene, cfg)?;
            Ok(DatasetRecord {
                index,
                scene,
                truth,
                split: cfg.split_of(index),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TxFile {
    height: usize,
    width: usize,
    spacing: f64,
    transmitters: Vec<Transmitter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub name: String,
    pub split: Split,
    pub dynamic: bool,
    /// SHA-256 of every file in the record directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: GenConfig,
    pub splits: BTreeMap<Split, usize>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GenConfig,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record_name(index: usize) -> String {
    format!("scene_{index:04}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

/// Writes `dir/manifest.json` and one `scene_XXXX/` directory per record.
pub fn write_dataset(records: &[DatasetRecord], cfg: &GenConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    let mut splits = BTreeMap::from([(Split::Train, 0), (Split::Test, 0)]);
    for rec in records {
        let name = record_name(rec.index);
        let rdir = dir.join(&name);
        fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
        let mut files = BTreeMap::new();
        let scene = &rec.scene;
        files.insert(
            "buildings.pgm".to_string(),
            write_file(&rdir.join("buildings.pgm"), &scene.buildings().to_pgm_bytes())?,
        );
        if let Some(v) = scene.vehicles() {
            files.insert(
                "vehicles.pgm".to_string(),
                write_file(&rdir.join("vehicles.pgm"), &v.to_pgm_bytes())?,
            );
        }
        let tx = TxFile {
            height: scene.height(),
            width: scene.width(),
            spacing: scene.spacing(),
            transmitters: scene.transmitters().to_vec(),
        };
        let tx_bytes = serde_json::to_vec_pretty(&tx).map_err(|source| Error::Json {
            path: rdir.join("tx.json"),
            source,
        })?;
        files.insert("tx.json".to_string(), write_file(&rdir.join("tx.json"), &tx_bytes)?);
        files.insert(
            "truth.f32g".to_string(),
            write_file(&rdir.join("truth.f32g"), &rec.truth.to_f32g_bytes())?,
        );
        *splits.get_mut(&rec.split).expect("both splits present") += 1;
        entries.push(ManifestRecord {
            index: rec.index,
            name,
            split: rec.split,
            dynamic: scene.is_dynamic(),
            files,
        });
    }
    let manifest = Manifest {
        format_version: 1,
        config: cfg.clone(),
        splits,
        records: entries,
    };
    let path = dir.join(MANIFEST);
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_checked(rdir: &Path, file: &str, expected: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = rdir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != expected {
        return Err(Error::HashMismatch(path));
    }
    Ok((path, bytes))
}

/// Reads a dataset written by [`write_dataset`], verifying every file hash.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let rdir = dir.join(&entry.name);
        if !rdir.is_dir() {
            return Err(Error::MissingRecord {
                name: entry.name.clone(),
                path: rdir,
            });
        }
        let hash = |file: &str| {
            entry
                .files
                .get(file)
                .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("{} lacks {file}", entry.name)))
        };
        let (path, bytes) = read_checked(&rdir, "buildings.pgm", hash("buildings.pgm")?)?;
        let buildings = BinaryMask::from_pgm_bytes(&bytes).map_err(|m| Error::format(path, m))?;
        let vehicles = if entry.dynamic {
            let (path, bytes) = read_checked(&rdir, "vehicles.pgm", hash("vehicles.pgm")?)?;
            Some(BinaryMask::from_pgm_bytes(&bytes).map_err(|m| Error::format(path, m))?)
        } else {
            None
        };
        let (path, bytes) = read_checked(&rdir, "tx.json", hash("tx.json")?)?;
        let tx: TxFile = serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })?;
        let (path, bytes) = read_checked(&rdir, "truth.f32g", hash("truth.f32g")?)?;
        let truth = Grid2D::from_f32g_bytes(&bytes).map_err(|m| Error::format(path, m))?;
        let scene = Scene::new(buildings, vehicles, tx.transmitters, tx.spacing)?;
        if !(truth.height() == scene.height() && truth.width() == scene.width()) {
            return Err(Error::Shape(format!("{}: truth does not match scene", entry.name)));
        }
        records.push(DatasetRecord {
            index: entry.index,
            scene,
            truth,
            split: entry.split,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        records,
    })
}
