//! Deterministic synthetic city scenes and a log-distance pathloss model
//! with ray-marched shadowing.
//!
//! Buildings block rays completely. Vehicles only add a finite loss per
//! crossed cell, so they shadow partially.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{BaseStation, EnvironmentScene, RadioMap, SceneError};
use crate::ingest::{encode_gray, EncodeConfig, IngestError};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place {what} #{index} after {attempts} attempts")]
    PlacementFailure {
        what: &'static str,
        index: usize,
        attempts: usize,
    },
    #[error("grid size {0} is below the minimum of 16")]
    GridTooSmall(usize),
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encode(#[from] IngestError),
}

/// Parameters of the propagation oracle.
///
/// `floor_db` is the absolute loss at which values are truncated; the default
/// sits 147 dB above the reference loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OracleConfig {
    pub exponent_n: f64,
    pub ref_loss_db: f64,
    pub static_atten_db_per_cell: f64,
    pub dynamic_atten_db_per_cell: f64,
    pub floor_db: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            exponent_n: 2.0,
            ref_loss_db: 40.0,
            static_atten_db_per_cell: f64::INFINITY,
            dynamic_atten_db_per_cell: 3.0,
            floor_db: 40.0 + 147.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.exponent_n > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "exponent_n must be > 0, got {}",
                self.exponent_n
            )));
        }
        // Vehicles attenuate but never fully block.
        if !(self.dynamic_atten_db_per_cell.is_finite() && self.dynamic_atten_db_per_cell > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "dynamic_atten_db_per_cell must be finite and > 0, got {}",
                self.dynamic_atten_db_per_cell
            )));
        }
        if !(self.static_atten_db_per_cell > 0.0) {
            return Err(SimError::InvalidConfig(
                "static_atten_db_per_cell must be > 0".into(),
            ));
        }
        if !(self.floor_db.is_finite() && self.floor_db > self.ref_loss_db) {
            return Err(SimError::InvalidConfig(format!(
                "floor_db ({}) must be finite and above ref_loss_db ({})",
                self.floor_db, self.ref_loss_db
            )));
        }
        Ok(())
    }

    /// Gray encoding spanning the transmitter-cell loss to the floor.
    pub fn encode_config(&self) -> EncodeConfig {
        EncodeConfig {
            min_db: self.ref_loss_db,
            max_db: self.floor_db,
            levels: 256,
        }
    }
}

/// Random rectangles for buildings, 1-2 cell vehicles on free cells, and a
/// uniformly placed transmitter. Deterministic in `seed`.
pub fn generate_scene(
    seed: u64,
    n: usize,
    building_count: usize,
    vehicle_count: usize,
) -> Result<EnvironmentScene, SimError> {
    if n < 16 {
        return Err(SimError::GridTooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut static_mask = Array2::<u8>::zeros((n, n));
    let mut dynamic_mask = Array2::<u8>::zeros((n, n));

    let max_side = (n / 6).max(3);
    for index in 0..building_count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let h = rng.random_range(2..=max_side);
            let w = rng.random_range(2..=max_side);
            let r0 = rng.random_range(0..=n - h);
            let c0 = rng.random_range(0..=n - w);
            // Keep a one-cell street around every building.
            let clear = (r0.saturating_sub(1)..(r0 + h + 1).min(n)).all(|r| {
                (c0.saturating_sub(1)..(c0 + w + 1).min(n)).all(|c| static_mask[[r, c]] == 0)
            });
            if clear {
                static_mask
                    .slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w])
                    .fill(1);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SimError::PlacementFailure {
                what: "building",
                index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let free = |s: &Array2<u8>, d: &Array2<u8>, r: usize, c: usize| s[[r, c]] == 0 && d[[r, c]] == 0;
    for index in 0..vehicle_count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = rng.random_range(0..n);
            let c = rng.random_range(0..n);
            if !free(&static_mask, &dynamic_mask, r, c) {
                continue;
            }
            dynamic_mask[[r, c]] = 1;
            if rng.random_bool(0.5) {
                let (r2, c2) = if rng.random_bool(0.5) { (r, c + 1) } else { (r + 1, c) };
                if r2 < n && c2 < n && free(&static_mask, &dynamic_mask, r2, c2) {
                    dynamic_mask[[r2, c2]] = 1;
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(SimError::PlacementFailure {
                what: "vehicle",
                index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let (row, col) = sample_free_cell(&mut rng, &static_mask, &dynamic_mask)?;
    Ok(EnvironmentScene::new(
        static_mask,
        dynamic_mask,
        BaseStation::at(row, col),
    )?)
}

/// Draws a cell that is neither building nor vehicle.
pub fn sample_free_cell<R: Rng>(
    rng: &mut R,
    static_mask: &Array2<u8>,
    dynamic_mask: &Array2<u8>,
) -> Result<(usize, usize), SimError> {
    let n = static_mask.nrows();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let r = rng.random_range(0..n);
        let c = rng.random_range(0..n);
        if static_mask[[r, c]] == 0 && dynamic_mask[[r, c]] == 0 {
            return Ok((r, c));
        }
    }
    Err(SimError::PlacementFailure {
        what: "base station",
        index: 0,
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

/// Cells strictly between `from` and `to` on the rasterized segment.
///
/// One cell per step along the major axis; the minor coordinate is the
/// segment's value at that step rounded half up.
pub fn ray_cells(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let (r0, c0) = (from.0 as i64, from.1 as i64);
    let dr = to.0 as i64 - r0;
    let dc = to.1 as i64 - c0;
    let major = dr.abs().max(dc.abs());
    if major <= 1 {
        return Vec::new();
    }
    let row_major = dr.abs() >= dc.abs();
    let (d_major, d_minor) = if row_major { (dr, dc) } else { (dc, dr) };
    let dir = d_major.signum();
    (1..major)
        .map(|i| {
            // floor(d_minor * i / major + 1/2) in exact integer arithmetic
            let minor = (2 * d_minor * i + major).div_euclid(2 * major);
            let along = dir * i;
            let (r, c) = if row_major {
                (r0 + along, c0 + minor)
            } else {
                (r0 + minor, c0 + along)
            };
            (r as usize, c as usize)
        })
        .collect()
}

/// Unclipped loss in dB from the transmitter to `(row, col)`.
pub fn raw_loss_db(scene: &EnvironmentScene, cfg: &OracleConfig, row: usize, col: usize) -> f64 {
    let bs = scene.bs();
    let dist = ((row as f64 - bs.row as f64).powi(2) + (col as f64 - bs.col as f64).powi(2)).sqrt();
    let mut loss = cfg.ref_loss_db + 10.0 * cfg.exponent_n * dist.max(1.0).log10();
    for (r, c) in ray_cells((bs.row, bs.col), (row, col)) {
        if scene.is_building(r, c) {
            loss += cfg.static_atten_db_per_cell;
        } else if scene.is_vehicle(r, c) {
            loss += cfg.dynamic_atten_db_per_cell;
        }
    }
    loss
}

/// Ground-truth radio map for `scene`.
pub fn compute_pathloss(scene: &EnvironmentScene, cfg: &OracleConfig) -> Result<RadioMap, SimError> {
    cfg.validate()?;
    let n = scene.size();
    let pathloss_db = Array2::from_shape_fn((n, n), |(r, c)| {
        if scene.is_building(r, c) {
            cfg.floor_db
        } else {
            raw_loss_db(scene, cfg, r, c).min(cfg.floor_db)
        }
    });
    let mut gray = encode_gray(&pathloss_db, &cfg.encode_config())?;
    for ((r, c), g) in gray.indexed_iter_mut() {
        if scene.is_building(r, c) {
            *g = 0.0;
        }
    }
    Ok(RadioMap { pathloss_db, gray })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_excludes_endpoints() {
        assert!(ray_cells((3, 3), (3, 4)).is_empty());
        assert_eq!(ray_cells((0, 0), (0, 3)), vec![(0, 1), (0, 2)]);
        assert_eq!(ray_cells((0, 0), (3, 3)), vec![(1, 1), (2, 2)]);
        assert_eq!(ray_cells((4, 4), (0, 4)), vec![(3, 4), (2, 4), (1, 4)]);
    }

    #[test]
    fn ray_ties_round_up() {
        // minor offset 0.5 at i = 1 rounds to 1
        assert_eq!(ray_cells((0, 0), (1, 2)), vec![(1, 1)]);
        assert_eq!(ray_cells((1, 0), (0, 2)), vec![(1, 1)]);
    }

    #[test]
    fn generator_rejects_tiny_grids() {
        assert!(matches!(generate_scene(0, 8, 0, 0), Err(SimError::GridTooSmall(8))));
    }

    #[test]
    fn crowded_grid_fails_placement() {
        let err = generate_scene(3, 16, 500, 0).unwrap_err();
        assert!(matches!(err, SimError::PlacementFailure { what: "building", .. }));
    }

    #[test]
    fn config_rejects_full_vehicle_blockage() {
        let cfg = OracleConfig {
            dynamic_atten_db_per_cell: f64::INFINITY,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
