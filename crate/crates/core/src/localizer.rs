//! Interchangeable guide strategies for the full-task protocol, behind one
//! trait and registered by name: trained checkpoints, the exact Bayes
//! oracle, and the two random baselines.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::diffcore::ParamStore;
use crate::gridworld::GridMap;
use crate::oracle::{ChannelContent, Evidence, PosteriorTable};
use crate::protocol::{ProtocolError, Window};
use crate::trainer::{argmax, predict_distribution, sample_index, ModelSpec, PredictionMode};

/// How a prediction interacts with the episode's attempt budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringRule {
    /// Standard protocol: predicting the target triggers an evaluation of
    /// the tourist's actual location.
    EvaluateLocation,
    /// Baseline convention: every guess is itself an attempt, scored
    /// directly against the target.
    GuessIsAttempt,
}

/// A guide strategy the protocol can drive.
pub trait Localizer {
    fn name(&self) -> &str;

    /// Resets per-episode state.
    fn begin_episode(&mut self, map: &GridMap);

    /// Predicts the tourist's location from the communicated window.
    fn predict(
        &mut self,
        window: &Window,
        map: &GridMap,
        mode: PredictionMode,
        rng: &mut ChaCha12Rng,
    ) -> Result<(usize, usize), ProtocolError>;

    fn scoring(&self) -> ScoringRule {
        ScoringRule::EvaluateLocation
    }
}

/// Trained tourist+guide pair loaded from a parameter store.
pub struct ModelLocalizer {
    name: String,
    store: ParamStore,
    spec: ModelSpec,
}

impl ModelLocalizer {
    pub fn new(name: impl Into<String>, store: ParamStore, spec: ModelSpec) -> ModelLocalizer {
        ModelLocalizer { name: name.into(), store, spec }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

impl Localizer for ModelLocalizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn begin_episode(&mut self, _map: &GridMap) {}

    fn predict(
        &mut self,
        window: &Window,
        map: &GridMap,
        mode: PredictionMode,
        rng: &mut ChaCha12Rng,
    ) -> Result<(usize, usize), ProtocolError> {
        let (dist, _) = predict_distribution(
            &self.store,
            &self.spec,
            &window.observations,
            &window.actions,
            map,
            rng,
        )?;
        let cell = match mode {
            PredictionMode::Argmax => argmax(&dist),
            PredictionMode::Sample => sample_index(&dist, rng),
        };
        Ok(map.cell_coords(cell))
    }
}

/// Exact posterior over the window's end location, by enumeration.
/// Posterior tables are built once per map and cached.
pub struct BayesLocalizer {
    t: usize,
    content: ChannelContent,
    tables: HashMap<String, PosteriorTable>,
}

impl BayesLocalizer {
    pub fn new(t: usize, content: ChannelContent) -> BayesLocalizer {
        BayesLocalizer { t, content, tables: HashMap::new() }
    }
}

impl Localizer for BayesLocalizer {
    fn name(&self) -> &str {
        match self.content {
            ChannelContent::ObsAndActions => "bayes",
            ChannelContent::ObsOnly => "bayes-obs",
        }
    }

    fn begin_episode(&mut self, map: &GridMap) {
        if !self.tables.contains_key(map.map_id()) {
            let table = PosteriorTable::build(map, self.t, self.content)
                .expect("maps used in the protocol stay within the enumeration guard");
            self.tables.insert(map.map_id().to_string(), table);
        }
    }

    fn predict(
        &mut self,
        window: &Window,
        map: &GridMap,
        mode: PredictionMode,
        rng: &mut ChaCha12Rng,
    ) -> Result<(usize, usize), ProtocolError> {
        let table = self
            .tables
            .get(map.map_id())
            .ok_or_else(|| ProtocolError::Localizer("begin_episode was not called".into()))?;
        let evidence = Evidence {
            observations: window.observations.clone(),
            actions: match self.content {
                ChannelContent::ObsOnly => None,
                ChannelContent::ObsAndActions => Some(window.actions.clone()),
            },
        };
        let posterior = table.lookup(&evidence)?;
        let cell = match mode {
            PredictionMode::Argmax => posterior.argmax(),
            PredictionMode::Sample => sample_index(&posterior.probabilities(), rng),
        };
        Ok(map.cell_coords(cell))
    }
}

/// Uniform random guess each round, scored by the standard protocol.
#[derive(Default)]
pub struct RandomLocalizer;

impl Localizer for RandomLocalizer {
    fn name(&self) -> &str {
        "random"
    }

    fn begin_episode(&mut self, _map: &GridMap) {}

    fn predict(
        &mut self,
        _window: &Window,
        map: &GridMap,
        _mode: PredictionMode,
        rng: &mut ChaCha12Rng,
    ) -> Result<(usize, usize), ProtocolError> {
        Ok((rng.gen_range(0..map.width()), rng.gen_range(0..map.height())))
    }
}

/// The analytic random baseline: up to `attempts` distinct uniform
/// guesses, each consuming an attempt and compared directly against the
/// target (success probability `attempts / cells`).
#[derive(Default)]
pub struct RandomDistinctLocalizer {
    guessed: Vec<usize>,
}

impl Localizer for RandomDistinctLocalizer {
    fn name(&self) -> &str {
        "random-distinct"
    }

    fn begin_episode(&mut self, _map: &GridMap) {
        self.guessed.clear();
    }

    fn predict(
        &mut self,
        _window: &Window,
        map: &GridMap,
        _mode: PredictionMode,
        rng: &mut ChaCha12Rng,
    ) -> Result<(usize, usize), ProtocolError> {
        let remaining: Vec<usize> =
            (0..map.cells()).filter(|c| !self.guessed.contains(c)).collect();
        if remaining.is_empty() {
            return Err(ProtocolError::Localizer("all cells already guessed".into()));
        }
        let cell = remaining[rng.gen_range(0..remaining.len())];
        self.guessed.push(cell);
        Ok(map.cell_coords(cell))
    }

    fn scoring(&self) -> ScoringRule {
        ScoringRule::GuessIsAttempt
    }
}

/// What a registry builder may draw on.
pub struct LocalizerContext {
    /// Window length of the protocol run.
    pub t: usize,
    /// Model parameters and architecture, for checkpoint-backed strategies.
    pub model: Option<(ParamStore, ModelSpec)>,
}

type BuilderFn = fn(&mut LocalizerContext) -> Result<Box<dyn Localizer>, ProtocolError>;

/// Name-indexed strategy registry; `full-task` rows select from here.
pub const REGISTRY: &[(&str, BuilderFn)] = &[
    ("model", |ctx| {
        let (store, spec) = ctx.model.take().ok_or_else(|| {
            ProtocolError::Localizer("the model strategy needs a checkpoint".into())
        })?;
        Ok(Box::new(ModelLocalizer::new("model", store, spec)))
    }),
    ("bayes", |ctx| Ok(Box::new(BayesLocalizer::new(ctx.t, ChannelContent::ObsAndActions)))),
    ("bayes-obs", |ctx| Ok(Box::new(BayesLocalizer::new(ctx.t, ChannelContent::ObsOnly)))),
    ("random", |_| Ok(Box::new(RandomLocalizer))),
    ("random-distinct", |_| Ok(Box::new(RandomDistinctLocalizer::default()))),
];

pub fn available_localizers() -> Vec<&'static str> {
    REGISTRY.iter().map(|(name, _)| *name).collect()
}

/// Builds a registered strategy by name.
pub fn build_localizer(
    kind: &str,
    ctx: &mut LocalizerContext,
) -> Result<Box<dyn Localizer>, ProtocolError> {
    for (name, builder) in REGISTRY {
        if *name == kind {
            return builder(ctx);
        }
    }
    Err(ProtocolError::Localizer(format!(
        "unknown localizer {kind:?}; available: {}",
        available_localizers().join(", ")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Corner, LandmarkCategory};
    use crate::tourist::Channel;
    use rand::SeedableRng;

    fn map() -> GridMap {
        let corners = (0..16)
            .map(|i| {
                if i % 2 == 0 {
                    Corner::default()
                } else {
                    Corner::new(vec![LandmarkCategory::ALL[i % 9]])
                }
            })
            .collect();
        GridMap::new("m".into(), 4, 4, corners).unwrap()
    }

    #[test]
    fn registry_finds_all_names_and_rejects_unknown() {
        for kind in available_localizers() {
            let mut ctx = LocalizerContext { t: 1, model: None };
            if kind == "model" {
                let mut store = ParamStore::new();
                let spec =
                    ModelSpec { channel: Channel::Continuous, masc_on: true, t: 1, dim: 4 };
                let mut rng = ChaCha12Rng::seed_from_u64(1);
                spec.init_params(&mut store, &mut rng).unwrap();
                ctx.model = Some((store, spec));
            }
            let built = build_localizer(kind, &mut ctx).unwrap();
            assert_eq!(built.name(), kind);
        }
        let mut ctx = LocalizerContext { t: 1, model: None };
        assert!(build_localizer("nope", &mut ctx).is_err());
        assert!(build_localizer("model", &mut ctx).is_err());
    }

    #[test]
    fn random_distinct_never_repeats_within_an_episode() {
        let map = map();
        let mut loc = RandomDistinctLocalizer::default();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let window = Window { observations: vec![map.observe(0, 0).unwrap()], actions: vec![] };
        loc.begin_episode(&map);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..16 {
            let guess = loc.predict(&window, &map, PredictionMode::Sample, &mut rng).unwrap();
            assert!(seen.insert(guess));
        }
        assert!(loc.predict(&window, &map, PredictionMode::Sample, &mut rng).is_err());
        loc.begin_episode(&map);
        assert!(loc.predict(&window, &map, PredictionMode::Sample, &mut rng).is_ok());
    }

    #[test]
    fn model_localizer_returns_in_bounds_cells() {
        let map = map();
        let spec = ModelSpec { channel: Channel::Discrete, masc_on: false, t: 1, dim: 4 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        spec.init_params(&mut store, &mut rng).unwrap();
        let mut loc = ModelLocalizer::new("model", store, spec);
        let window = Window {
            observations: vec![map.observe(0, 0).unwrap(), map.observe(0, 1).unwrap()],
            actions: vec![crate::gridworld::AgnosticAction::Up],
        };
        loc.begin_episode(&map);
        for _ in 0..10 {
            let (x, y) = loc.predict(&window, &map, PredictionMode::Sample, &mut rng).unwrap();
            assert!(x < 4 && y < 4);
        }
    }
}
