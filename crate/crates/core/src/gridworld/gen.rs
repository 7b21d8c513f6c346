//! Synthetic neighborhood generation and block carving.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corner, GridError, GridMap, LandmarkCategory, NUM_CATEGORIES};

/// Configuration for synthetic neighborhood maps.
///
/// Each corner independently draws a landmark count from `count_weights`
/// (index = count) and then that many categories from `category_weights`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MapGenConfig {
    pub width: usize,
    pub height: usize,
    /// Unnormalized weights over per-corner landmark counts 0, 1, 2, ...
    pub count_weights: Vec<f64>,
    /// Unnormalized weights per category, in [`LandmarkCategory::ALL`] order.
    pub category_weights: Vec<f64>,
}

impl Default for MapGenConfig {
    fn default() -> MapGenConfig {
        // Weights skewed toward shops and restaurants; roughly half the
        // corners stay empty so single observations rarely identify a cell.
        let mut category_weights = vec![1.0; NUM_CATEGORIES];
        category_weights[LandmarkCategory::Shop.index()] = 4.0;
        category_weights[LandmarkCategory::Restaurant.index()] = 3.0;
        MapGenConfig {
            width: 10,
            height: 10,
            count_weights: vec![0.45, 0.45, 0.10],
            category_weights,
        }
    }
}

impl MapGenConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.width == 0 || self.height == 0 {
            return Err(GridError::InvalidGenConfig("zero-sized grid".into()));
        }
        for (name, w) in [("count_weights", &self.count_weights), ("category_weights", &self.category_weights)] {
            if w.is_empty() {
                return Err(GridError::InvalidGenConfig(format!("{name} is empty")));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(GridError::InvalidGenConfig(format!("{name} has a negative or non-finite entry")));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(GridError::InvalidGenConfig(format!("{name} has zero total mass")));
            }
        }
        if self.category_weights.len() != NUM_CATEGORIES {
            return Err(GridError::InvalidGenConfig(format!(
                "category_weights must have {NUM_CATEGORIES} entries, got {}",
                self.category_weights.len()
            )));
        }
        Ok(())
    }
}

fn draw_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn short_hash(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates one synthetic neighborhood. The map id hashes the seed, the
/// dims and the distributions, so regenerating with the same inputs yields
/// the same id and splits can check disjointness by id alone.
pub fn generate_neighborhood(cfg: &MapGenConfig, seed: u64) -> Result<GridMap, GridError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let cells = cfg.width * cfg.height;
    let mut corners = Vec::with_capacity(cells);
    for _ in 0..cells {
        let count = draw_weighted(&cfg.count_weights, &mut rng);
        let landmarks = (0..count)
            .map(|_| LandmarkCategory::ALL[draw_weighted(&cfg.category_weights, &mut rng)])
            .collect();
        corners.push(Corner::new(landmarks));
    }
    let cfg_bytes = serde_json::to_vec(cfg).expect("config serializes");
    let map_id = format!("m{}", short_hash(&[&seed.to_le_bytes(), &cfg_bytes]));
    GridMap::new(map_id, cfg.width, cfg.height, corners)
}

/// Carves all intersection-aligned `bw x bh` blocks out of a neighborhood.
///
/// Corners pair into 2x2 intersections at even offsets, so block origins
/// advance in steps of two and every block covers whole intersections.
pub fn carve_blocks(neighborhood: &GridMap, bw: usize, bh: usize) -> Result<Vec<GridMap>, GridError> {
    if bw == 0 || bh == 0 || bw % 2 != 0 || bh % 2 != 0 {
        return Err(GridError::InvalidGenConfig(format!(
            "block dims must be positive and even, got {bw}x{bh}"
        )));
    }
    if bw > neighborhood.width() || bh > neighborhood.height() {
        return Err(GridError::InvalidGenConfig(format!(
            "block {bw}x{bh} exceeds neighborhood {}x{}",
            neighborhood.width(),
            neighborhood.height()
        )));
    }
    let mut blocks = Vec::new();
    for x0 in (0..=neighborhood.width() - bw).step_by(2) {
        for y0 in (0..=neighborhood.height() - bh).step_by(2) {
            let mut corners = Vec::with_capacity(bw * bh);
            for x in x0..x0 + bw {
                for y in y0..y0 + bh {
                    corners.push(neighborhood.corner(x, y)?.clone());
                }
            }
            let map_id = format!(
                "b{}",
                short_hash(&[
                    neighborhood.map_id().as_bytes(),
                    &(x0 as u64).to_le_bytes(),
                    &(y0 as u64).to_le_bytes(),
                ])
            );
            let block = GridMap::new(map_id, bw, bh, corners)?.with_origin(super::BlockOrigin {
                neighborhood: neighborhood.map_id().to_string(),
                x0,
                y0,
            });
            blocks.push(block);
        }
    }
    Ok(blocks)
}
