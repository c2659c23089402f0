//! Gray encoding of pathloss, prompt assembly, and dataset I/O.
//!
//! Gray orientation: 1.0 is the strongest received signal (lowest loss),
//! 0.0 is the truncation loss `max_db`.
//!
//! Synthetic dataset layout:
//!
//! ```text
//! <root>/manifest.txt
//! <root>/scenes/<map_id>/static.png    8-bit, 0 or 1 per cell
//! <root>/scenes/<map_id>/dynamic.png
//! <root>/gains/<map_id>_<tx>.png       8-bit quantization level index
//! ```
//!
//! The manifest is UTF-8: `key=value` header lines (`version`, `n`, `levels`,
//! `min_db`, `max_db`, `train_maps`) followed by one record per line,
//! `map_id,tx_index,bs_row,bs_col,scene_file,gain_file`, paths relative to
//! the root.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

use crate::domain::{BaseStation, EnvironmentScene, PromptTensor, SceneError};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("non-finite input {value} at ({row}, {col})")]
    NonFiniteInput { row: usize, col: usize, value: f64 },
    #[error("gray value {value} at ({row}, {col}) is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("invalid encode config: {0}")]
    InvalidConfig(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("map {map_id} has {found} transmitter records, expected {expected}")]
    CountMismatch {
        map_id: u32,
        found: usize,
        expected: usize,
    },
    #[error("corrupt raster {}: {reason}", path.display())]
    CorruptRaster { path: PathBuf, reason: String },
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest schema version {found}, expected {expected}")]
    SchemaVersionMismatch { found: String, expected: u32 },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("record {record}: {source}")]
    Scene {
        record: String,
        #[source]
        source: SceneError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Affine dB-to-gray mapping followed by uniform quantization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncodeConfig {
    /// Loss mapped to gray 0 (truncation).
    pub max_db: f64,
    /// Loss mapped to gray 1 (strongest signal).
    pub min_db: f64,
    pub levels: u32,
}

impl EncodeConfig {
    /// Published dynamic range of the RadioMapSeer gain rasters.
    pub fn radiomapseer() -> Self {
        Self {
            max_db: 147.0,
            min_db: 47.0,
            levels: 256,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.max_db.is_finite() && self.min_db.is_finite() && self.max_db > self.min_db) {
            return Err(IngestError::InvalidConfig(format!(
                "need finite max_db > min_db, got max_db={} min_db={}",
                self.max_db, self.min_db
            )));
        }
        if self.levels < 2 {
            return Err(IngestError::InvalidConfig(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Quantization level index of one value.
    pub fn level_of(&self, value_db: f64) -> u32 {
        let unit = ((self.max_db - value_db) / (self.max_db - self.min_db)).clamp(0.0, 1.0);
        (unit * f64::from(self.levels - 1)).round() as u32
    }

    pub fn gray_of_level(&self, level: u32) -> f64 {
        f64::from(level) / f64::from(self.levels - 1)
    }

    /// Largest round-trip error of `decode(encode(x))` against `clamp(x)`.
    pub fn half_step_db(&self) -> f64 {
        (self.max_db - self.min_db) / (2.0 * f64::from(self.levels - 1))
    }
}

pub fn encode_gray(pathloss_db: &Array2<f64>, cfg: &EncodeConfig) -> Result<Array2<f64>, IngestError> {
    cfg.validate()?;
    if let Some(((row, col), &value)) = pathloss_db.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(IngestError::NonFiniteInput { row, col, value });
    }
    Ok(pathloss_db.mapv(|v| cfg.gray_of_level(cfg.level_of(v))))
}

/// Affine inverse of [`encode_gray`]; does not re-quantize.
pub fn decode_gray(gray: &Array2<f64>, cfg: &EncodeConfig) -> Result<Array2<f64>, IngestError> {
    cfg.validate()?;
    if let Some(((row, col), &value)) = gray
        .indexed_iter()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(IngestError::OutOfRange { row, col, value });
    }
    Ok(gray.mapv(|g| cfg.max_db - g * (cfg.max_db - cfg.min_db)))
}

/// `[static, dynamic, one-hot(bs)]` as a `3 x n x n` tensor.
pub fn build_prompt(scene: &EnvironmentScene) -> PromptTensor {
    let n = scene.size();
    let mut channels = Array3::<f32>::zeros((3, n, n));
    channels
        .index_axis_mut(Axis(0), 0)
        .assign(&scene.static_mask().mapv(f32::from));
    channels
        .index_axis_mut(Axis(0), 1)
        .assign(&scene.dynamic_mask().mapv(f32::from));
    channels[[2, scene.bs().row, scene.bs().col]] = 1.0;
    PromptTensor::new(channels).expect("a validated scene yields a valid prompt")
}

/// Reads `static.png` and `dynamic.png` from a scene directory and places
/// the transmitter. Masks may be stored as 0/1 or as 0/255.
pub fn read_scene_dir(dir: &Path, bs: BaseStation) -> Result<EnvironmentScene, IngestError> {
    // 0/1 rasters pass through; anything brighter is thresholded at mid-gray.
    let mask = |a: Array2<u8>| {
        if a.iter().all(|&v| v <= 1) {
            a
        } else {
            a.mapv(|v| u8::from(v > 127))
        }
    };
    let s = mask(read_gray_png(&dir.join("static.png"))?);
    let d = mask(read_gray_png(&dir.join("dynamic.png"))?);
    EnvironmentScene::new(s, d, bs).map_err(|source| IngestError::Scene {
        record: dir.display().to_string(),
        source,
    })
}

pub fn read_gray_png(path: &Path) -> Result<Array2<u8>, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| IngestError::CorruptRaster {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), luma.into_raw()).map_err(|e| {
        IngestError::CorruptRaster {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

pub fn write_gray_png(path: &Path, data: &Array2<u8>) -> Result<(), IngestError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let (h, w) = data.dim();
    let buf: Vec<u8> = data.iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => IngestError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => IngestError::CorruptRaster {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(format!("unknown split '{other}' (train|test|all)")),
        }
    }
}

/// Where the records of an index come from and how to read them.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic,
    RadioMapSeer(RadioMapSeerLayout),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub map_id: u32,
    pub tx_index: usize,
    pub bs_row: usize,
    pub bs_col: usize,
    /// Scene directory (synthetic) or building raster (RadioMapSeer).
    pub scene_path: PathBuf,
    pub gain_path: PathBuf,
    /// Vehicle raster for RadioMapSeer layouts that ship one.
    pub dynamic_path: Option<PathBuf>,
}

impl DatasetRecord {
    pub fn id(&self) -> String {
        format!("{}_{}", self.map_id, self.tx_index)
    }
}

/// One scene and its gray ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record_id: String,
    pub scene: EnvironmentScene,
    pub gray: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub source: DatasetSource,
    pub split: Split,
    pub n: usize,
    pub encode: EncodeConfig,
    /// Sorted ids of the maps in the training split.
    pub train_map_ids: Vec<u32>,
    /// Sorted ids of the maps in the test split; disjoint from the train ids.
    pub test_map_ids: Vec<u32>,
    pub records: Vec<DatasetRecord>,
}

impl DatasetIndex {
    /// Map ids covered by the current split.
    pub fn map_ids(&self) -> Vec<u32> {
        match self.split {
            Split::Train => self.train_map_ids.clone(),
            Split::Test => self.test_map_ids.clone(),
            Split::All => {
                let mut ids: Vec<u32> = self
                    .train_map_ids
                    .iter()
                    .chain(&self.test_map_ids)
                    .copied()
                    .collect();
                ids.sort_unstable();
                ids
            }
        }
    }

    /// Restricts the records to one split.
    pub fn select(&self, split: Split) -> DatasetIndex {
        let keep: BTreeSet<u32> = match split {
            Split::Train => self.train_map_ids.iter().copied().collect(),
            Split::Test => self.test_map_ids.iter().copied().collect(),
            Split::All => self
                .train_map_ids
                .iter()
                .chain(&self.test_map_ids)
                .copied()
                .collect(),
        };
        DatasetIndex {
            split,
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.map_id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads the scene and gray map of one record.
    pub fn load_sample(&self, record: &DatasetRecord) -> Result<Sample, IngestError> {
        let (static_mask, dynamic_mask, gray) = match &self.source {
            DatasetSource::Synthetic => {
                let s = read_gray_png(&record.scene_path.join("static.png"))?;
                let d = read_gray_png(&record.scene_path.join("dynamic.png"))?;
                let levels = read_gray_png(&record.gain_path)?;
                if let Some(&bad) = levels.iter().find(|&&l| u32::from(l) >= self.encode.levels) {
                    return Err(IngestError::CorruptRaster {
                        path: record.gain_path.clone(),
                        reason: format!("level {bad} exceeds {} levels", self.encode.levels),
                    });
                }
                let gray = levels.mapv(|l| self.encode.gray_of_level(u32::from(l)));
                (s, d, gray)
            }
            DatasetSource::RadioMapSeer(_) => {
                let s = read_gray_png(&record.scene_path)?.mapv(|v| u8::from(v > 127));
                let d = match &record.dynamic_path {
                    Some(p) => {
                        let d = read_gray_png(p)?.mapv(|v| u8::from(v > 127));
                        // Vehicles never sit inside buildings.
                        &d * &s.mapv(|v| 1 - v)
                    }
                    None => Array2::zeros(s.dim()),
                };
                let gain = read_gray_png(&record.gain_path)?;
                (s, d, gain.mapv(|v| f64::from(v) / 255.0))
            }
        };
        for (path, dim) in [
            (&record.scene_path, static_mask.dim()),
            (&record.gain_path, gray.dim()),
        ] {
            if dim != (self.n, self.n) {
                return Err(IngestError::CorruptRaster {
                    path: path.clone(),
                    reason: format!("expected {0}x{0}, got {1}x{2}", self.n, dim.0, dim.1),
                });
            }
        }
        let scene = EnvironmentScene::new(
            static_mask,
            dynamic_mask,
            BaseStation::at(record.bs_row, record.bs_col),
        )
        .map_err(|source| IngestError::Scene {
            record: record.id(),
            source,
        })?;
        Ok(Sample {
            record_id: record.id(),
            scene,
            gray,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>, IngestError> {
        self.records.iter().map(|r| self.load_sample(r)).collect()
    }
}

/// Path templates for a RadioMapSeer mirror. `{map}` and `{tx}` are
/// substituted with the decimal map id and transmitter index.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RadioMapSeerLayout {
    pub buildings: String,
    pub cars: Option<String>,
    pub gain: String,
    /// JSON array of `[x, y]` pairs, `x` the column and `y` the row.
    pub antenna: String,
    pub n: usize,
    pub tx_per_map: usize,
    pub train_maps: usize,
    pub encode: EncodeConfig,
}

impl Default for RadioMapSeerLayout {
    fn default() -> Self {
        Self {
            buildings: "png/buildings_complete/{map}.png".into(),
            cars: None,
            gain: "gain/DPM/{map}_{tx}.png".into(),
            antenna: "antenna/{map}.json".into(),
            n: 256,
            tx_per_map: 80,
            train_maps: 500,
            encode: EncodeConfig::radiomapseer(),
        }
    }
}

impl RadioMapSeerLayout {
    /// Layout of the dynamic (vehicle) variant.
    pub fn with_cars() -> Self {
        Self {
            cars: Some("png/cars/{map}.png".into()),
            gain: "gain/carsDPM/{map}_{tx}.png".into(),
            ..Self::default()
        }
    }

    fn path(template: &str, map: u32, tx: Option<usize>) -> PathBuf {
        let mut s = template.replace("{map}", &map.to_string());
        if let Some(tx) = tx {
            s = s.replace("{tx}", &tx.to_string());
        }
        PathBuf::from(s)
    }

    /// Enumerates map ids by matching the building template in its directory.
    fn discover_maps(&self, root: &Path) -> Result<Vec<u32>, IngestError> {
        let template = Path::new(&self.buildings);
        let dir = root.join(template.parent().unwrap_or(Path::new("")));
        let file_tmpl = template
            .file_name()
            .and_then(|f| f.to_str())
            .ok_or_else(|| IngestError::InvalidConfig("empty buildings template".into()))?;
        let (prefix, suffix) = file_tmpl
            .split_once("{map}")
            .ok_or_else(|| IngestError::InvalidConfig("buildings template lacks {map}".into()))?;
        if !dir.is_dir() {
            return Err(IngestError::MissingFile(dir));
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(id) = name
                .strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(suffix))
                .and_then(|id| id.parse::<u32>().ok())
            {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }
}

/// Indexes a RadioMapSeer directory and selects one split.
///
/// Maps are sorted by id; the first `train_maps` form the training split.
pub fn load_radiomapseer(
    root: &Path,
    split: Split,
    layout: &RadioMapSeerLayout,
) -> Result<DatasetIndex, IngestError> {
    layout.encode.validate()?;
    let ids = layout.discover_maps(root)?;
    let cut = layout.train_maps.min(ids.len());
    let (train, test) = ids.split_at(cut);
    let mut records = Vec::with_capacity(ids.len() * layout.tx_per_map);
    for &map_id in &ids {
        let antenna_path = root.join(RadioMapSeerLayout::path(&layout.antenna, map_id, None));
        let text = fs::read_to_string(&antenna_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                IngestError::MissingFile(antenna_path.clone())
            } else {
                IngestError::Io {
                    path: antenna_path.clone(),
                    source: e,
                }
            }
        })?;
        let coords: Vec<[f64; 2]> =
            serde_json::from_str(&text).map_err(|e| IngestError::CorruptRaster {
                path: antenna_path.clone(),
                reason: e.to_string(),
            })?;
        if coords.len() != layout.tx_per_map {
            return Err(IngestError::CountMismatch {
                map_id,
                found: coords.len(),
                expected: layout.tx_per_map,
            });
        }
        let scene_path = root.join(RadioMapSeerLayout::path(&layout.buildings, map_id, None));
        let dynamic_path = layout
            .cars
            .as_ref()
            .map(|t| root.join(RadioMapSeerLayout::path(t, map_id, None)));
        for p in std::iter::once(&scene_path).chain(dynamic_path.as_ref()) {
            if !p.is_file() {
                return Err(IngestError::MissingFile(p.clone()));
            }
        }
        for (tx_index, [x, y]) in coords.into_iter().enumerate() {
            let gain_path = root.join(RadioMapSeerLayout::path(&layout.gain, map_id, Some(tx_index)));
            if !gain_path.is_file() {
                return Err(IngestError::MissingFile(gain_path));
            }
            let (bs_row, bs_col) = (y.round(), x.round());
            if bs_row < 0.0 || bs_col < 0.0 {
                return Err(IngestError::CorruptRaster {
                    path: antenna_path.clone(),
                    reason: format!("negative coordinate ({x}, {y})"),
                });
            }
            records.push(DatasetRecord {
                map_id,
                tx_index,
                bs_row: bs_row as usize,
                bs_col: bs_col as usize,
                scene_path: scene_path.clone(),
                gain_path,
                dynamic_path: dynamic_path.clone(),
            });
        }
    }
    let index = DatasetIndex {
        root: root.to_path_buf(),
        source: DatasetSource::RadioMapSeer(layout.clone()),
        split: Split::All,
        n: layout.n,
        encode: layout.encode,
        train_map_ids: train.to_vec(),
        test_map_ids: test.to_vec(),
        records,
    };
    Ok(index.select(split))
}

/// One synthetic record to persist.
#[derive(Debug, Clone)]
pub struct SyntheticEntry {
    pub map_id: u32,
    pub tx_index: usize,
    pub scene: EnvironmentScene,
    pub gray: Array2<f64>,
}

fn scene_rel(map_id: u32) -> String {
    format!("scenes/{map_id:04}")
}

fn gain_rel(map_id: u32, tx: usize) -> String {
    format!("gains/{map_id:04}_{tx:02}.png")
}

/// Writes entries under `root` and returns the index of everything written.
///
/// Maps with the `train_maps` smallest ids form the training split.
pub fn save_synthetic_dataset(
    root: &Path,
    entries: &[SyntheticEntry],
    encode: &EncodeConfig,
    train_maps: usize,
) -> Result<DatasetIndex, IngestError> {
    encode.validate()?;
    if encode.levels > 256 {
        return Err(IngestError::InvalidConfig(format!(
            "8-bit rasters hold at most 256 levels, got {}",
            encode.levels
        )));
    }
    let n = entries.first().map(|e| e.scene.size()).unwrap_or(0);
    let mut sorted: Vec<&SyntheticEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| (e.map_id, e.tx_index));

    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut written = BTreeSet::new();
    let mut manifest = String::new();
    writeln!(manifest, "version={MANIFEST_VERSION}").unwrap();
    writeln!(manifest, "n={n}").unwrap();
    writeln!(manifest, "levels={}", encode.levels).unwrap();
    writeln!(manifest, "min_db={}", encode.min_db).unwrap();
    writeln!(manifest, "max_db={}", encode.max_db).unwrap();
    writeln!(manifest, "train_maps={train_maps}").unwrap();
    for e in sorted {
        if e.scene.size() != n || e.gray.dim() != (n, n) {
            return Err(IngestError::InvalidConfig(format!(
                "entry {}_{} is not {n}x{n}",
                e.map_id, e.tx_index
            )));
        }
        let scene_rel = scene_rel(e.map_id);
        if written.insert(e.map_id) {
            let dir = root.join(&scene_rel);
            write_gray_png(&dir.join("static.png"), e.scene.static_mask())?;
            write_gray_png(&dir.join("dynamic.png"), e.scene.dynamic_mask())?;
        }
        let levels = e.gray.mapv(|g| {
            let g = g.clamp(0.0, 1.0);
            (g * f64::from(encode.levels - 1)).round() as u8
        });
        let gain_rel = gain_rel(e.map_id, e.tx_index);
        write_gray_png(&root.join(&gain_rel), &levels)?;
        writeln!(
            manifest,
            "{},{},{},{},{},{}",
            e.map_id,
            e.tx_index,
            e.scene.bs().row,
            e.scene.bs().col,
            scene_rel,
            gain_rel
        )
        .unwrap();
    }
    let manifest_path = root.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    load_synthetic_dataset(root)
}

/// Reads a synthetic dataset manifest. The returned index covers all maps.
pub fn load_synthetic_dataset(root: &Path) -> Result<DatasetIndex, IngestError> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IngestError::MissingFile(manifest_path.clone())
        } else {
            IngestError::Io {
                path: manifest_path.clone(),
                source: e,
            }
        }
    })?;
    let mut header = std::collections::BTreeMap::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if records.is_empty() {
            if let Some((k, v)) = line.split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(IngestError::Manifest {
                line: line_no,
                reason: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<usize, IngestError> {
            s.parse().map_err(|_| IngestError::Manifest {
                line: line_no,
                reason: format!("'{s}' is not a non-negative integer"),
            })
        };
        records.push(DatasetRecord {
            map_id: num(fields[0])? as u32,
            tx_index: num(fields[1])?,
            bs_row: num(fields[2])?,
            bs_col: num(fields[3])?,
            scene_path: root.join(fields[4]),
            gain_path: root.join(fields[5]),
            dynamic_path: None,
        });
    }
    let get = |key: &str| -> Result<&String, IngestError> {
        header.get(key).ok_or_else(|| IngestError::Manifest {
            line: 0,
            reason: format!("missing header key '{key}'"),
        })
    };
    let version = get("version")?;
    if version.parse::<u32>().ok() != Some(MANIFEST_VERSION) {
        return Err(IngestError::SchemaVersionMismatch {
            found: version.clone(),
            expected: MANIFEST_VERSION,
        });
    }
    let parse = |key: &str| -> Result<f64, IngestError> {
        get(key)?.parse().map_err(|_| IngestError::Manifest {
            line: 0,
            reason: format!("header key '{key}' is not numeric"),
        })
    };
    let encode = EncodeConfig {
        max_db: parse("max_db")?,
        min_db: parse("min_db")?,
        levels: parse("levels")? as u32,
    };
    encode.validate()?;
    let n = parse("n")? as usize;
    let train_maps = parse("train_maps")? as usize;
    records.sort_by_key(|r| (r.map_id, r.tx_index));
    let ids: Vec<u32> = records
        .iter()
        .map(|r| r.map_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cut = train_maps.min(ids.len());
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        source: DatasetSource::Synthetic,
        split: Split::All,
        n,
        encode,
        train_map_ids: ids[..cut].to_vec(),
        test_map_ids: ids[cut..].to_vec(),
        records,
    })
}
