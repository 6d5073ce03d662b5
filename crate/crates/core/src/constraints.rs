//! Per-pixel constraint rewards `J_i(ŷ)`.
//!
//! A [`Constraint`] scores a sampled segmentation with a binary map: 1 where
//! the constraint is satisfied, 0 where it is violated. The shipped
//! constraint is local connectivity: each `k × k` window must not contain
//! foreground that lies outside the reference component grown from a seed
//! chosen among the densest foreground pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    box_count, flood_fill_mask, is_connected, Adjacency, BinaryMask, Coord, DiscreteMask, Grid,
    GridError, RngState,
};

/// Binary per-pixel satisfaction map; `true` means `J_i = 1`.
pub type RewardMap = Grid<bool>;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("invalid constraint configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// How the seed-selection randomness is shared across Monte-Carlo samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Every sample draws its own tie-break stream.
    #[default]
    PerSample,
    /// All samples of one image reuse the same tie-break stream.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityConfig {
    /// Seed-selection window `l`.
    pub seed_window: usize,
    /// Violation window `k`.
    pub violation_window: usize,
    pub adjacency: Adjacency,
}

impl Default for ConnectivityConfig {
    fn default() -> Self {
        ConnectivityConfig {
            seed_window: 5,
            violation_window: 3,
            adjacency: Adjacency::Four,
        }
    }
}

impl ConnectivityConfig {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        for (name, v) in [("l", self.seed_window), ("k", self.violation_window)] {
            if v == 0 || v % 2 == 0 {
                return Err(ConstraintError::InvalidConfig(format!(
                    "{name} must be odd and >= 1, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Foreground pixel with the largest `l × l` foreground count, ties broken
/// uniformly at random. `None` for an empty mask.
pub fn select_seed(
    mask: &BinaryMask,
    cfg: &ConnectivityConfig,
    rng: &mut RngState,
) -> Result<Option<Coord>, ConstraintError> {
    cfg.validate()?;
    let counts = box_count(mask, cfg.seed_window)?;
    let mut best = 0u32;
    let mut ties: Vec<Coord> = Vec::new();
    for p in mask.foreground() {
        let v = counts[p];
        if v > best {
            best = v;
            ties.clear();
        }
        if v == best {
            ties.push(p);
        }
    }
    Ok(match ties.len() {
        0 => None,
        1 => Some(ties[0]),
        n => Some(ties[rng.below(n)]),
    })
}

/// Local connectivity reward for a fixed seed: `J_i = 1` iff the `k × k`
/// window at `i` holds no foreground outside the seed's component.
pub fn connectivity_reward_from_seed(
    mask: &BinaryMask,
    seed: Coord,
    cfg: &ConnectivityConfig,
) -> Result<RewardMap, ConstraintError> {
    cfg.validate()?;
    let component = flood_fill_mask(mask, seed, cfg.adjacency)?;
    let stray = mask.difference(&component);
    let violations = box_count(&stray, cfg.violation_window)?;
    Ok(violations.map(|&s| s == 0))
}

/// Seed selection, flood fill and windowed violation count in one step.
/// An empty foreground is vacuously satisfied.
pub fn connectivity_reward(
    mask: &BinaryMask,
    cfg: &ConnectivityConfig,
    rng: &mut RngState,
) -> Result<RewardMap, ConstraintError> {
    match select_seed(mask, cfg, rng)? {
        Some(seed) => connectivity_reward_from_seed(mask, seed, cfg),
        None => Ok(Grid::filled(mask.height(), mask.width(), true)),
    }
}

/// A per-pixel, possibly non-differentiable constraint on sampled masks.
pub trait Constraint: Send + Sync {
    fn name(&self) -> &str;

    /// Binary map shaped like `mask`.
    fn evaluate(&self, mask: &DiscreteMask, rng: &mut RngState) -> Result<RewardMap, ConstraintError>;
}

/// Always satisfied; used for ablations.
#[derive(Clone, Debug, Default)]
pub struct AlwaysSatisfied;

impl Constraint for AlwaysSatisfied {
    fn name(&self) -> &str {
        "always"
    }

    fn evaluate(&self, mask: &DiscreteMask, _rng: &mut RngState) -> Result<RewardMap, ConstraintError> {
        Ok(Grid::filled(mask.height(), mask.width(), true))
    }
}

/// Local connectivity of one designated foreground class.
#[derive(Clone, Debug)]
pub struct LocalConnectivity {
    pub config: ConnectivityConfig,
    pub foreground: u32,
}

impl LocalConnectivity {
    pub fn new(config: ConnectivityConfig) -> Result<Self, ConstraintError> {
        config.validate()?;
        Ok(LocalConnectivity {
            config,
            foreground: 1,
        })
    }
}

impl Constraint for LocalConnectivity {
    fn name(&self) -> &str {
        "connectivity"
    }

    fn evaluate(&self, mask: &DiscreteMask, rng: &mut RngState) -> Result<RewardMap, ConstraintError> {
        connectivity_reward(&mask.binary(self.foreground), &self.config, rng)
    }
}

/// Whole-image connectivity: one scalar reward broadcast to every pixel.
#[derive(Clone, Debug)]
pub struct GlobalConnectivity {
    pub adjacency: Adjacency,
    pub foreground: u32,
}

impl Default for GlobalConnectivity {
    fn default() -> Self {
        GlobalConnectivity {
            adjacency: Adjacency::Four,
            foreground: 1,
        }
    }
}

impl Constraint for GlobalConnectivity {
    fn name(&self) -> &str {
        "global_connectivity"
    }

    fn evaluate(&self, mask: &DiscreteMask, _rng: &mut RngState) -> Result<RewardMap, ConstraintError> {
        let ok = is_connected(&mask.binary(self.foreground), self.adjacency);
        Ok(Grid::filled(mask.height(), mask.width(), ok))
    }
}

/// Constraint selector used by configuration files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    #[default]
    Connectivity,
    GlobalConnectivity,
    Always,
}

impl ConstraintKind {
    pub fn build(self, config: &ConnectivityConfig) -> Result<Box<dyn Constraint>, ConstraintError> {
        Ok(match self {
            ConstraintKind::Connectivity => Box::new(LocalConnectivity::new(config.clone())?),
            ConstraintKind::GlobalConnectivity => Box::new(GlobalConnectivity {
                adjacency: config.adjacency,
                foreground: 1,
            }),
            ConstraintKind::Always => Box::new(AlwaysSatisfied),
        })
    }
}
