//! Core data types shared by the rest of the crate.
//!
//! Grids are row-major with the origin at the top-left cell. Every type is
//! parametric in the grid side `n`; the real dataset uses 256.

use ndarray::{Array2, Array3};
use thiserror::Error;

/// Grid side of the real dataset rasters.
pub const DEFAULT_GRID_SIZE: usize = 256;

/// Number of latent channels produced by the autoencoder.
pub const LATENT_CHANNELS: usize = 3;

/// Number of prompt channels: static mask, dynamic mask, base-station one-hot.
pub const PROMPT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Static,
    Dynamic,
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskKind::Static => f.write_str("static"),
            MaskKind::Dynamic => f.write_str("dynamic"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("{kind} mask value {value} at ({row}, {col}) is not binary")]
    MaskNotBinary {
        kind: MaskKind,
        row: usize,
        col: usize,
        value: u8,
    },
    #[error("base station at ({row}, {col}) lies inside a static building")]
    BsInsideBuilding { row: usize, col: usize },
    #[error("static and dynamic masks overlap at ({row}, {col})")]
    MaskOverlap { row: usize, col: usize },
    #[error("base station ({row}, {col}) is outside the {n}x{n} grid")]
    BsOutOfBounds { row: usize, col: usize, n: usize },
    #[error("base station {field} must be finite and positive, got {value}")]
    InvalidBsParameter { field: &'static str, value: f64 },
    #[error("mask shapes {static_shape:?} and {dynamic_shape:?} are not equal squares")]
    ShapeMismatch {
        static_shape: (usize, usize),
        dynamic_shape: (usize, usize),
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("prompt channel 2 must be one-hot, found {ones} ones and {other} other nonzero entries")]
    PromptNotOneHot { ones: usize, other: usize },
    #[error("prompt channel {channel} has non-binary value {value} at ({row}, {col})")]
    PromptNotBinary {
        channel: usize,
        row: usize,
        col: usize,
        value: f32,
    },
    #[error("expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("gray value {value} at ({row}, {col}) is outside [0, 1]")]
    GrayOutOfRange { row: usize, col: usize, value: f64 },
    #[error("cell ({row}, {col}) is inside a building but has gray value {value}")]
    BuildingNotDark { row: usize, col: usize, value: f64 },
}

/// Transmitter record: grid position plus radio parameters.
///
/// The antenna height is carried for completeness; the 2-D pipeline never
/// reads it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseStation {
    pub row: usize,
    pub col: usize,
    pub height_m: f64,
    pub power_dbm: f64,
    pub carrier_hz: f64,
}

impl BaseStation {
    pub const DEFAULT_HEIGHT_M: f64 = 1.5;
    pub const DEFAULT_POWER_DBM: f64 = 23.0;
    pub const DEFAULT_CARRIER_HZ: f64 = 5.9e9;

    pub fn at(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            height_m: Self::DEFAULT_HEIGHT_M,
            power_dbm: Self::DEFAULT_POWER_DBM,
            carrier_hz: Self::DEFAULT_CARRIER_HZ,
        }
    }

    fn check(&self, n: usize) -> Result<(), SceneError> {
        if self.row >= n || self.col >= n {
            return Err(SceneError::BsOutOfBounds {
                row: self.row,
                col: self.col,
                n,
            });
        }
        for (field, value) in [("power_dbm", self.power_dbm), ("carrier_hz", self.carrier_hz)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(SceneError::InvalidBsParameter { field, value });
            }
        }
        Ok(())
    }
}

/// Static buildings, dynamic vehicles and the transmitter on an `n x n` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentScene {
    static_mask: Array2<u8>,
    dynamic_mask: Array2<u8>,
    bs: BaseStation,
}

impl EnvironmentScene {
    /// Builds a scene and validates it.
    pub fn new(
        static_mask: Array2<u8>,
        dynamic_mask: Array2<u8>,
        bs: BaseStation,
    ) -> Result<Self, SceneError> {
        validate_scene(Self::from_parts_unchecked(static_mask, dynamic_mask, bs))
    }

    /// Builds a scene without checking any invariant.
    pub fn from_parts_unchecked(
        static_mask: Array2<u8>,
        dynamic_mask: Array2<u8>,
        bs: BaseStation,
    ) -> Self {
        Self {
            static_mask,
            dynamic_mask,
            bs,
        }
    }

    /// All-zero masks with the transmitter at `bs`.
    pub fn empty(n: usize, bs: BaseStation) -> Result<Self, SceneError> {
        Self::new(Array2::zeros((n, n)), Array2::zeros((n, n)), bs)
    }

    pub fn size(&self) -> usize {
        self.static_mask.nrows()
    }

    pub fn static_mask(&self) -> &Array2<u8> {
        &self.static_mask
    }

    pub fn dynamic_mask(&self) -> &Array2<u8> {
        &self.dynamic_mask
    }

    pub fn bs(&self) -> &BaseStation {
        &self.bs
    }

    /// Same obstacles, different transmitter.
    pub fn with_bs(&self, bs: BaseStation) -> Result<Self, SceneError> {
        Self::new(self.static_mask.clone(), self.dynamic_mask.clone(), bs)
    }

    pub fn is_building(&self, row: usize, col: usize) -> bool {
        self.static_mask[[row, col]] == 1
    }

    pub fn is_vehicle(&self, row: usize, col: usize) -> bool {
        self.dynamic_mask[[row, col]] == 1
    }
}

/// Returns the scene unchanged iff every structural invariant holds.
///
/// Errors name the first offending cell in row-major order.
pub fn validate_scene(scene: EnvironmentScene) -> Result<EnvironmentScene, SceneError> {
    let s_shape = scene.static_mask.dim();
    let d_shape = scene.dynamic_mask.dim();
    if s_shape != d_shape || s_shape.0 != s_shape.1 {
        return Err(SceneError::ShapeMismatch {
            static_shape: s_shape,
            dynamic_shape: d_shape,
        });
    }
    let n = s_shape.0;
    for ((row, col), &value) in scene.static_mask.indexed_iter() {
        if value > 1 {
            return Err(SceneError::MaskNotBinary {
                kind: MaskKind::Static,
                row,
                col,
                value,
            });
        }
    }
    for ((row, col), &value) in scene.dynamic_mask.indexed_iter() {
        if value > 1 {
            return Err(SceneError::MaskNotBinary {
                kind: MaskKind::Dynamic,
                row,
                col,
                value,
            });
        }
    }
    scene.bs.check(n)?;
    if scene.static_mask[[scene.bs.row, scene.bs.col]] == 1 {
        return Err(SceneError::BsInsideBuilding {
            row: scene.bs.row,
            col: scene.bs.col,
        });
    }
    for ((row, col), &value) in scene.static_mask.indexed_iter() {
        if value == 1 && scene.dynamic_mask[[row, col]] == 1 {
            return Err(SceneError::MaskOverlap { row, col });
        }
    }
    Ok(scene)
}

/// A pathloss grid in dB together with its gray encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioMap {
    pub pathloss_db: Array2<f64>,
    pub gray: Array2<f64>,
}

impl RadioMap {
    pub fn size(&self) -> usize {
        self.gray.nrows()
    }

    /// Checks the gray range and the dark-building rule against `scene`.
    pub fn check_against(&self, scene: &EnvironmentScene) -> Result<(), TensorError> {
        let n = scene.size();
        if self.gray.dim() != (n, n) || self.pathloss_db.dim() != (n, n) {
            return Err(TensorError::ShapeMismatch {
                expected: vec![n, n],
                actual: self.gray.shape().to_vec(),
            });
        }
        for ((row, col), &value) in self.gray.indexed_iter() {
            if !(0.0..=1.0).contains(&value) {
                return Err(TensorError::GrayOutOfRange { row, col, value });
            }
            if scene.is_building(row, col) && value != 0.0 {
                return Err(TensorError::BuildingNotDark { row, col, value });
            }
        }
        Ok(())
    }
}

/// Three-channel conditioning tensor `[static, dynamic, bs one-hot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTensor {
    channels: Array3<f32>,
}

impl PromptTensor {
    /// Wraps `channels` after checking the binary and one-hot invariants.
    pub fn new(channels: Array3<f32>) -> Result<Self, TensorError> {
        let (c, h, w) = channels.dim();
        if c != PROMPT_CHANNELS || h != w {
            return Err(TensorError::ShapeMismatch {
                expected: vec![PROMPT_CHANNELS, h, h],
                actual: vec![c, h, w],
            });
        }
        for channel in 0..2 {
            for ((row, col), &value) in channels.index_axis(ndarray::Axis(0), channel).indexed_iter() {
                if value != 0.0 && value != 1.0 {
                    return Err(TensorError::PromptNotBinary {
                        channel,
                        row,
                        col,
                        value,
                    });
                }
            }
        }
        let onehot = channels.index_axis(ndarray::Axis(0), 2);
        let ones = onehot.iter().filter(|&&v| v == 1.0).count();
        let other = onehot.iter().filter(|&&v| v != 0.0 && v != 1.0).count();
        if ones != 1 || other != 0 {
            return Err(TensorError::PromptNotOneHot { ones, other });
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &Array3<f32> {
        &self.channels
    }

    pub fn size(&self) -> usize {
        self.channels.dim().1
    }
}

/// Autoencoder latent: `3 x h x w` with `h = w = n / spatial_factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array3<f64>,
    spatial_factor: usize,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>, spatial_factor: usize) -> Result<Self, TensorError> {
        let (c, h, w) = data.dim();
        if c != LATENT_CHANNELS || h != w || spatial_factor == 0 {
            return Err(TensorError::ShapeMismatch {
                expected: vec![LATENT_CHANNELS, h, h],
                actual: vec![c, h, w],
            });
        }
        Ok(Self {
            data,
            spatial_factor,
        })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn spatial_factor(&self) -> usize {
        self.spatial_factor
    }

    /// Side of the pixel grid this latent decodes to.
    pub fn image_size(&self) -> usize {
        self.data.dim().1 * self.spatial_factor
    }
}
