//! Grid environments: landmarked corner grids, movement semantics, episode
//! sampling, synthetic map generation and dataset splits.
//!
//! Coordinates are `(x, y)` with `0 <= x < width`, `0 <= y < height`.
//! Flat storage is x-major: index `x * height + y`.

mod gen;
mod split;

pub use gen::{carve_blocks, generate_neighborhood, MapGenConfig};
pub use split::{check_split, make_splits, SplitRule, SplitSpec};

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("coordinates ({0}, {1}) outside {2}x{3} map")]
    OutOfBounds(usize, usize, usize, usize),
    #[error("invalid map generator config: {0}")]
    InvalidGenConfig(String),
    #[error("split infeasible: {0}")]
    SplitInfeasible(String),
    #[error("split invariant violated: {0}")]
    SplitInvariant(String),
    #[error("malformed map: {0}")]
    MalformedMap(String),
    #[error("unknown landmark category {0:?}")]
    UnknownCategory(String),
}

/// Compass orientation of the oriented tourist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::North,
        Orientation::East,
        Orientation::South,
        Orientation::West,
    ];

    /// Forward displacement for this heading.
    pub fn forward_delta(self) -> (i64, i64) {
        match self {
            Orientation::North => (0, 1),
            Orientation::East => (1, 0),
            Orientation::South => (0, -1),
            Orientation::West => (-1, 0),
        }
    }

    fn turned(self, d: i64) -> Orientation {
        Orientation::ALL[(self as i64 + d).rem_euclid(4) as usize]
    }
}

/// Action set of the oriented tourist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrientedAction {
    TurnLeft,
    TurnRight,
    Forward,
}

/// Orientation-agnostic action set used by the localization task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgnosticAction {
    Left,
    Right,
    Up,
    Down,
}

impl AgnosticAction {
    pub const ALL: [AgnosticAction; 4] = [
        AgnosticAction::Left,
        AgnosticAction::Right,
        AgnosticAction::Up,
        AgnosticAction::Down,
    ];

    /// Coordinate displacement of this action.
    pub fn delta(self) -> (i64, i64) {
        match self {
            AgnosticAction::Left => (-1, 0),
            AgnosticAction::Right => (1, 0),
            AgnosticAction::Up => (0, 1),
            AgnosticAction::Down => (0, -1),
        }
    }

    /// Embedding-table row for this action.
    pub fn index(self) -> usize {
        match self {
            AgnosticAction::Left => 0,
            AgnosticAction::Right => 1,
            AgnosticAction::Up => 2,
            AgnosticAction::Down => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<AgnosticAction> {
        AgnosticAction::ALL.get(i).copied()
    }

    /// The action undoing this one.
    pub fn inverse(self) -> AgnosticAction {
        match self {
            AgnosticAction::Left => AgnosticAction::Right,
            AgnosticAction::Right => AgnosticAction::Left,
            AgnosticAction::Up => AgnosticAction::Down,
            AgnosticAction::Down => AgnosticAction::Up,
        }
    }
}

/// The nine landmark categories a corner may carry.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum LandmarkCategory {
    Bar,
    Playfield,
    Bank,
    Hotel,
    Shop,
    Subway,
    CoffeeShop,
    Restaurant,
    Theater,
}

pub const NUM_CATEGORIES: usize = 9;

impl LandmarkCategory {
    pub const ALL: [LandmarkCategory; NUM_CATEGORIES] = [
        LandmarkCategory::Bar,
        LandmarkCategory::Playfield,
        LandmarkCategory::Bank,
        LandmarkCategory::Hotel,
        LandmarkCategory::Shop,
        LandmarkCategory::Subway,
        LandmarkCategory::CoffeeShop,
        LandmarkCategory::Restaurant,
        LandmarkCategory::Theater,
    ];

    /// Embedding-table row for this category.
    pub fn index(self) -> usize {
        LandmarkCategory::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LandmarkCategory::Bar => "Bar",
            LandmarkCategory::Playfield => "Playfield",
            LandmarkCategory::Bank => "Bank",
            LandmarkCategory::Hotel => "Hotel",
            LandmarkCategory::Shop => "Shop",
            LandmarkCategory::Subway => "Subway",
            LandmarkCategory::CoffeeShop => "CoffeeShop",
            LandmarkCategory::Restaurant => "Restaurant",
            LandmarkCategory::Theater => "Theater",
        }
    }

    pub fn parse(s: &str) -> Result<LandmarkCategory, GridError> {
        LandmarkCategory::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| GridError::UnknownCategory(s.to_string()))
    }
}

/// One perceivable symbol: a landmark category or the distinguished marker
/// emitted when a corner has no landmarks at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObsSymbol {
    Landmark(LandmarkCategory),
    EmptyCorner,
}

/// Total number of distinct observation symbols (9 categories + EmptyCorner).
pub const NUM_SYMBOLS: usize = NUM_CATEGORIES + 1;

impl ObsSymbol {
    /// Embedding-table row: categories at 0..9, EmptyCorner at 9.
    pub fn index(self) -> usize {
        match self {
            ObsSymbol::Landmark(c) => c.index(),
            ObsSymbol::EmptyCorner => NUM_CATEGORIES,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObsSymbol::Landmark(c) => c.as_str(),
            ObsSymbol::EmptyCorner => "EmptyCorner",
        }
    }
}

impl fmt::Display for ObsSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A multiset of observation symbols, kept sorted so that equality and
/// hashing see multiset semantics (duplicates allowed, order irrelevant).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Observation(Vec<ObsSymbol>);

impl Observation {
    pub fn new(mut symbols: Vec<ObsSymbol>) -> Observation {
        symbols.sort_unstable();
        Observation(symbols)
    }

    pub fn symbols(&self) -> &[ObsSymbol] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One street corner: a multiset of landmark categories, possibly empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Corner {
    landmarks: Vec<LandmarkCategory>,
}

impl Corner {
    pub fn new(mut landmarks: Vec<LandmarkCategory>) -> Corner {
        landmarks.sort_unstable();
        Corner { landmarks }
    }

    pub fn landmarks(&self) -> &[LandmarkCategory] {
        &self.landmarks
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// What the tourist perceives standing here: the landmark multiset, or
    /// the single EmptyCorner symbol when there is none.
    pub fn observation(&self) -> Observation {
        if self.landmarks.is_empty() {
            Observation::new(vec![ObsSymbol::EmptyCorner])
        } else {
            Observation::new(
                self.landmarks.iter().map(|&c| ObsSymbol::Landmark(c)).collect(),
            )
        }
    }
}

/// Grid extent, used by the step functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    pub width: usize,
    pub height: usize,
}

impl Bounds {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

/// Pose of the oriented tourist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrientedPose {
    pub x: usize,
    pub y: usize,
    pub o: Orientation,
}

/// Oriented step: turns rotate in place, Forward moves along the heading.
/// A Forward that would leave the grid keeps the pose and reports
/// `moved = false`.
pub fn step_oriented(pose: OrientedPose, action: OrientedAction, bounds: Bounds) -> (OrientedPose, bool) {
    match action {
        OrientedAction::TurnLeft => (OrientedPose { o: pose.o.turned(-1), ..pose }, true),
        OrientedAction::TurnRight => (OrientedPose { o: pose.o.turned(1), ..pose }, true),
        OrientedAction::Forward => {
            let (dx, dy) = pose.o.forward_delta();
            let (nx, ny) = (pose.x as i64 + dx, pose.y as i64 + dy);
            if bounds.contains(nx, ny) {
                (OrientedPose { x: nx as usize, y: ny as usize, o: pose.o }, true)
            } else {
                (pose, false)
            }
        }
    }
}

/// Agnostic step: adds the action delta, or stays put at a wall.
pub fn step_agnostic(loc: (usize, usize), action: AgnosticAction, bounds: Bounds) -> (usize, usize) {
    let (dx, dy) = action.delta();
    let (nx, ny) = (loc.0 as i64 + dx, loc.1 as i64 + dy);
    if bounds.contains(nx, ny) {
        (nx as usize, ny as usize)
    } else {
        loc
    }
}

/// Where a carved block sits inside its parent neighborhood. Blocks from
/// the same neighborhood can cover the same physical intersections; split
/// novelty checks use this identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOrigin {
    pub neighborhood: String,
    pub x0: usize,
    pub y0: usize,
}

/// The guide's world: a `width x height` grid of landmarked corners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    map_id: String,
    width: usize,
    height: usize,
    corners: Vec<Corner>, // x-major: index x * height + y
    origin: Option<BlockOrigin>,
}

impl GridMap {
    pub fn new(map_id: String, width: usize, height: usize, corners: Vec<Corner>) -> Result<GridMap, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::MalformedMap("zero-sized grid".into()));
        }
        if corners.len() != width * height {
            return Err(GridError::MalformedMap(format!(
                "expected {} corners, got {}",
                width * height,
                corners.len()
            )));
        }
        Ok(GridMap { map_id, width, height, corners, origin: None })
    }

    pub fn with_origin(mut self, origin: BlockOrigin) -> GridMap {
        self.origin = Some(origin);
        self
    }

    /// Provenance of a carved block, if any. Independently generated maps
    /// have none and never share intersections with other maps.
    pub fn origin(&self) -> Option<&BlockOrigin> {
        self.origin.as_ref()
    }

    pub fn map_id(&self) -> &str {
        &self.map_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bounds(&self) -> Bounds {
        Bounds { width: self.width, height: self.height }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Flat index of `(x, y)`; x-major.
    pub fn cell_index(&self, x: usize, y: usize) -> usize {
        x * self.height + y
    }

    pub fn cell_coords(&self, index: usize) -> (usize, usize) {
        (index / self.height, index % self.height)
    }

    pub fn corner(&self, x: usize, y: usize) -> Result<&Corner, GridError> {
        if x >= self.width || y >= self.height {
            return Err(GridError::OutOfBounds(x, y, self.width, self.height));
        }
        Ok(&self.corners[self.cell_index(x, y)])
    }

    pub fn corners(&self) -> &[Corner] {
        &self.corners
    }

    /// The landmark multiset visible at `(x, y)`, with the EmptyCorner
    /// symbol substituted for landmark-free corners.
    pub fn observe(&self, x: usize, y: usize) -> Result<Observation, GridError> {
        Ok(self.corner(x, y)?.observation())
    }
}

/// One sampled trajectory: start, agnostic actions, per-step observations
/// (before each action and after the last), and the final location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub map_id: String,
    pub start: (usize, usize),
    pub actions: Vec<AgnosticAction>,
    pub observations: Vec<Observation>,
    pub target: (usize, usize),
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Builds the episode obtained by replaying `actions` from `start`.
pub fn replay_episode(
    map: &GridMap,
    start: (usize, usize),
    actions: &[AgnosticAction],
) -> Result<Episode, GridError> {
    let bounds = map.bounds();
    if !bounds.contains(start.0 as i64, start.1 as i64) {
        return Err(GridError::OutOfBounds(start.0, start.1, map.width, map.height));
    }
    let mut loc = start;
    let mut observations = Vec::with_capacity(actions.len() + 1);
    observations.push(map.observe(loc.0, loc.1)?);
    for &a in actions {
        loc = step_agnostic(loc, a, bounds);
        observations.push(map.observe(loc.0, loc.1)?);
    }
    Ok(Episode {
        map_id: map.map_id.clone(),
        start,
        actions: actions.to_vec(),
        observations,
        target: loc,
    })
}

/// Samples an episode: uniform start, `t` uniform agnostic actions
/// (wall-bound moves become positional no-ops but stay recorded).
pub fn sample_episode<R: Rng>(map: &GridMap, t: usize, rng: &mut R) -> Episode {
    let start = (rng.gen_range(0..map.width), rng.gen_range(0..map.height));
    let actions: Vec<AgnosticAction> =
        (0..t).map(|_| AgnosticAction::ALL[rng.gen_range(0..4)]).collect();
    replay_episode(map, start, &actions).expect("sampled start is in bounds")
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MapFile {
    map_id: String,
    width: usize,
    height: usize,
    corners: Vec<Vec<String>>,
}

impl GridMap {
    /// Map file payload: corner landmark lists in x-major order; an empty
    /// corner serializes as an empty list (EmptyCorner never appears).
    pub fn to_json(&self) -> serde_json::Value {
        let corners = self
            .corners
            .iter()
            .map(|c| c.landmarks.iter().map(|l| l.as_str().to_string()).collect())
            .collect();
        serde_json::to_value(MapFile {
            map_id: self.map_id.clone(),
            width: self.width,
            height: self.height,
            corners,
        })
        .expect("map serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<GridMap, GridError> {
        let file: MapFile = serde_json::from_value(value.clone())
            .map_err(|e| GridError::MalformedMap(e.to_string()))?;
        let corners = file
            .corners
            .iter()
            .map(|ls| {
                let parsed: Result<Vec<_>, _> =
                    ls.iter().map(|s| LandmarkCategory::parse(s)).collect();
                Ok(Corner::new(parsed?))
            })
            .collect::<Result<Vec<_>, GridError>>()?;
        GridMap::new(file.map_id, file.width, file.height, corners)
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    map_id: String,
    start: (usize, usize),
    actions: Vec<AgnosticAction>,
    observations: Vec<Vec<String>>,
    target: (usize, usize),
}

impl Episode {
    /// One JSON-lines record. Observations keep the EmptyCorner symbol:
    /// they record what the tourist actually perceived.
    pub fn to_json_line(&self) -> String {
        let line = EpisodeLine {
            map_id: self.map_id.clone(),
            start: self.start,
            actions: self.actions.clone(),
            observations: self
                .observations
                .iter()
                .map(|o| o.symbols().iter().map(|s| s.as_str().to_string()).collect())
                .collect(),
            target: self.target,
        };
        serde_json::to_string(&line).expect("episode serialization cannot fail")
    }

    pub fn from_json_line(line: &str) -> Result<Episode, GridError> {
        let parsed: EpisodeLine =
            serde_json::from_str(line).map_err(|e| GridError::MalformedMap(e.to_string()))?;
        let observations = parsed
            .observations
            .iter()
            .map(|symbols| {
                let syms: Result<Vec<_>, GridError> = symbols
                    .iter()
                    .map(|s| {
                        if s == "EmptyCorner" {
                            Ok(ObsSymbol::EmptyCorner)
                        } else {
                            LandmarkCategory::parse(s).map(ObsSymbol::Landmark)
                        }
                    })
                    .collect();
                Ok(Observation::new(syms?))
            })
            .collect::<Result<Vec<_>, GridError>>()?;
        Ok(Episode {
            map_id: parsed.map_id,
            start: parsed.start,
            actions: parsed.actions,
            observations,
            target: parsed.target,
        })
    }
}
