//! Exact Bayes-optimal localization by exhaustive enumeration.
//!
//! For small walk lengths every (start, action sequence) pair can be
//! enumerated, so the posterior over targets given the communicated
//! content is a ratio of integer counts and the best achievable accuracy
//! is exact. No learned model evaluated on the same episode distribution
//! can beat it.

use std::collections::HashMap;

use thiserror::Error;

use crate::gridworld::{replay_episode, AgnosticAction, Episode, GridMap, Observation};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration too large: {0} episodes exceeds guard of {1}")]
    TooLarge(u64, u64),
    #[error("evidence has empty support: no enumerated episode communicates it")]
    EmptySupport,
    #[error("grid error: {0}")]
    Grid(#[from] crate::gridworld::GridError),
}

/// What the channel carries: the observation sequence alone, or
/// observations plus the action sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChannelContent {
    ObsOnly,
    ObsAndActions,
}

impl ChannelContent {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelContent::ObsOnly => "obs",
            ChannelContent::ObsAndActions => "obs+act",
        }
    }
}

/// Hard cap on enumeration size.
pub const ENUMERATION_GUARD: u64 = 10_000_000;

/// Every episode of a map for a fixed walk length, uniformly weighted and
/// duplicate-free over (start, action sequence).
pub struct EpisodeEnsemble {
    pub episodes: Vec<Episode>,
}

/// The evidence a tourist message could reveal exactly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Evidence {
    pub observations: Vec<Observation>,
    pub actions: Option<Vec<AgnosticAction>>,
}

impl Evidence {
    pub fn from_episode(ep: &Episode, content: ChannelContent) -> Evidence {
        Evidence {
            observations: ep.observations.clone(),
            actions: match content {
                ChannelContent::ObsOnly => None,
                ChannelContent::ObsAndActions => Some(ep.actions.clone()),
            },
        }
    }
}

/// Exact posterior over target cells: integer counts, divided only on
/// demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posterior {
    /// Count per target cell, x-major.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Posterior {
    pub fn probabilities(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    /// Smallest-index argmax, matching the deterministic decision rule.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }
}

/// Exact accuracy as a ratio of counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactAccuracy {
    pub numer: u64,
    pub denom: u64,
}

impl ExactAccuracy {
    pub fn value(self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

/// Enumerates all `cells * 4^T` episodes of a map.
pub fn enumerate_episodes(map: &GridMap, t: usize) -> Result<EpisodeEnsemble, OracleError> {
    let count = (map.cells() as u64)
        .checked_mul(4u64.checked_pow(t as u32).unwrap_or(u64::MAX))
        .unwrap_or(u64::MAX);
    if count > ENUMERATION_GUARD {
        return Err(OracleError::TooLarge(count, ENUMERATION_GUARD));
    }
    let mut episodes = Vec::with_capacity(count as usize);
    let mut actions = vec![AgnosticAction::Left; t];
    for x in 0..map.width() {
        for y in 0..map.height() {
            enumerate_actions(map, (x, y), &mut actions, 0, &mut episodes)?;
        }
    }
    Ok(EpisodeEnsemble { episodes })
}

fn enumerate_actions(
    map: &GridMap,
    start: (usize, usize),
    actions: &mut Vec<AgnosticAction>,
    depth: usize,
    out: &mut Vec<Episode>,
) -> Result<(), OracleError> {
    if depth == actions.len() {
        out.push(replay_episode(map, start, actions)?);
        return Ok(());
    }
    for a in AgnosticAction::ALL {
        actions[depth] = a;
        enumerate_actions(map, start, actions, depth + 1, out)?;
    }
    Ok(())
}

/// Groups an ensemble by communicated evidence; values are per-target
/// count vectors (x-major cells).
fn evidence_table(
    ensemble: &EpisodeEnsemble,
    map: &GridMap,
    content: ChannelContent,
) -> HashMap<Evidence, Vec<u64>> {
    let cells = map.cells();
    let mut table: HashMap<Evidence, Vec<u64>> = HashMap::new();
    for ep in &ensemble.episodes {
        let key = Evidence::from_episode(ep, content);
        let counts = table.entry(key).or_insert_with(|| vec![0; cells]);
        counts[map.cell_index(ep.target.0, ep.target.1)] += 1;
    }
    table
}

/// Exact posterior over targets given communicated evidence: uniform over
/// the targets of all enumerated episodes whose content matches, weighted
/// by multiplicity.
pub fn posterior(
    map: &GridMap,
    t: usize,
    evidence: &Evidence,
    content: ChannelContent,
) -> Result<Posterior, OracleError> {
    let ensemble = enumerate_episodes(map, t)?;
    let table = evidence_table(&ensemble, map, content);
    let counts = table.get(evidence).ok_or(OracleError::EmptySupport)?;
    let total = counts.iter().sum();
    if total == 0 {
        return Err(OracleError::EmptySupport);
    }
    Ok(Posterior { counts: counts.clone(), total })
}

/// Precomputed posteriors for every realizable evidence value of a map.
pub struct PosteriorTable {
    table: HashMap<Evidence, Posterior>,
    pub content: ChannelContent,
}

impl PosteriorTable {
    pub fn build(map: &GridMap, t: usize, content: ChannelContent) -> Result<PosteriorTable, OracleError> {
        let ensemble = enumerate_episodes(map, t)?;
        let table = evidence_table(&ensemble, map, content)
            .into_iter()
            .map(|(k, counts)| {
                let total = counts.iter().sum();
                (k, Posterior { counts, total })
            })
            .collect();
        Ok(PosteriorTable { table, content })
    }

    pub fn lookup(&self, evidence: &Evidence) -> Result<&Posterior, OracleError> {
        self.table.get(evidence).ok_or(OracleError::EmptySupport)
    }

    pub fn lookup_episode(&self, ep: &Episode) -> Result<&Posterior, OracleError> {
        self.lookup(&Evidence::from_episode(ep, self.content))
    }
}

/// Best achievable localization accuracy on (map, T, content): the
/// Bayes-optimal decision rule answers the max-count target per evidence
/// class, so the accuracy is the sum of per-class maxima over the total.
pub fn bayes_accuracy(
    map: &GridMap,
    t: usize,
    content: ChannelContent,
) -> Result<ExactAccuracy, OracleError> {
    let ensemble = enumerate_episodes(map, t)?;
    let table = evidence_table(&ensemble, map, content);
    let numer = table.values().map(|counts| counts.iter().copied().max().unwrap_or(0)).sum();
    Ok(ExactAccuracy { numer, denom: ensemble.episodes.len() as u64 })
}

/// Mean Bayes accuracy over a map set (maps weighted equally, as episode
/// pools sample maps uniformly).
pub fn mean_bayes_accuracy(
    maps: &[GridMap],
    t: usize,
    content: ChannelContent,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for m in maps {
        total += bayes_accuracy(m, t, content)?.value();
    }
    Ok(total / maps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{
        generate_neighborhood, sample_episode, Corner, GridMap, LandmarkCategory, MapGenConfig,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::HashSet;

    fn uniform_map() -> GridMap {
        let corners = vec![Corner::new(vec![LandmarkCategory::Shop]); 16];
        GridMap::new("uniform".into(), 4, 4, corners).unwrap()
    }

    fn distinct_map() -> GridMap {
        let cats = LandmarkCategory::ALL;
        let corners: Vec<Corner> = (0..16)
            .map(|i| {
                if i < 9 {
                    Corner::new(vec![cats[i]])
                } else {
                    Corner::new(vec![cats[0], cats[i - 9]])
                }
            })
            .collect();
        GridMap::new("distinct".into(), 4, 4, corners).unwrap()
    }

    fn random_map(seed: u64) -> GridMap {
        let cfg = MapGenConfig { width: 4, height: 4, ..MapGenConfig::default() };
        generate_neighborhood(&cfg, seed).unwrap()
    }

    #[test]
    fn enumeration_counts() {
        let map = distinct_map();
        assert_eq!(enumerate_episodes(&map, 0).unwrap().episodes.len(), 16);
        assert_eq!(enumerate_episodes(&map, 3).unwrap().episodes.len(), 1024);
    }

    #[test]
    fn enumeration_guard_triggers() {
        let map = distinct_map();
        assert!(matches!(enumerate_episodes(&map, 12), Err(OracleError::TooLarge(_, _))));
    }

    #[test]
    fn enumeration_is_duplicate_free() {
        let map = distinct_map();
        let ens = enumerate_episodes(&map, 2).unwrap();
        let keys: HashSet<_> = ens.episodes.iter().map(|e| (e.start, e.actions.clone())).collect();
        assert_eq!(keys.len(), ens.episodes.len());
    }

    #[test]
    fn sampling_support_matches_enumeration() {
        let map = random_map(3);
        let ens = enumerate_episodes(&map, 3).unwrap();
        let support: HashSet<_> =
            ens.episodes.iter().map(|e| (e.start, e.actions.clone())).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut seen = HashSet::new();
        for _ in 0..60_000 {
            let ep = sample_episode(&map, 3, &mut rng);
            assert!(support.contains(&(ep.start, ep.actions.clone())));
            seen.insert((ep.start, ep.actions));
        }
        // Coupon collector: 60k draws over 1024 outcomes covers the support.
        assert_eq!(seen.len(), support.len());
    }

    #[test]
    fn posterior_uniform_map_t0() {
        let map = uniform_map();
        let ep = enumerate_episodes(&map, 0).unwrap().episodes[0].clone();
        let evidence = Evidence::from_episode(&ep, ChannelContent::ObsOnly);
        let post = posterior(&map, 0, &evidence, ChannelContent::ObsOnly).unwrap();
        assert_eq!(post.total, 16);
        assert!(post.counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn posterior_distinct_map_t0_is_one_hot() {
        let map = distinct_map();
        for ep in enumerate_episodes(&map, 0).unwrap().episodes {
            let evidence = Evidence::from_episode(&ep, ChannelContent::ObsOnly);
            let post = posterior(&map, 0, &evidence, ChannelContent::ObsOnly).unwrap();
            assert_eq!(post.total, 1);
            assert_eq!(post.counts[map.cell_index(ep.target.0, ep.target.1)], 1);
        }
    }

    #[test]
    fn posterior_rejects_unseen_evidence() {
        let map = uniform_map();
        let distinct = distinct_map();
        let ep = enumerate_episodes(&distinct, 0).unwrap().episodes[1].clone();
        let evidence = Evidence::from_episode(&ep, ChannelContent::ObsOnly);
        assert!(matches!(
            posterior(&map, 0, &evidence, ChannelContent::ObsOnly),
            Err(OracleError::EmptySupport)
        ));
    }

    #[test]
    fn law_of_total_probability() {
        // Sum of per-evidence counts over targets equals the uniform prior:
        // every target cell ends exactly 4^T walks (start uniform, the
        // boundary no-op walk is doubly stochastic).
        let map = random_map(17);
        for t in 0..=2 {
            let ens = enumerate_episodes(&map, t).unwrap();
            let table = evidence_table(&ens, &map, ChannelContent::ObsAndActions);
            let mut per_target = vec![0u64; map.cells()];
            for counts in table.values() {
                for (acc, c) in per_target.iter_mut().zip(counts) {
                    *acc += c;
                }
            }
            assert!(per_target.iter().all(|&c| c == 4u64.pow(t as u32)));
        }
    }

    #[test]
    fn bayes_accuracy_uniform_and_distinct() {
        assert_eq!(
            bayes_accuracy(&distinct_map(), 0, ChannelContent::ObsOnly).unwrap(),
            ExactAccuracy { numer: 16, denom: 16 }
        );
        assert_eq!(
            bayes_accuracy(&uniform_map(), 0, ChannelContent::ObsOnly).unwrap(),
            ExactAccuracy { numer: 1, denom: 16 }
        );
    }

    #[test]
    fn t0_accuracy_counts_distinct_signatures() {
        // With T=0 the optimal rule answers one cell per distinct corner
        // signature, so accuracy = (#distinct signatures) / cells.
        for seed in 0..10 {
            let map = random_map(seed);
            let mut signatures = HashSet::new();
            for x in 0..map.width() {
                for y in 0..map.height() {
                    signatures.insert(map.observe(x, y).unwrap());
                }
            }
            let acc = bayes_accuracy(&map, 0, ChannelContent::ObsOnly).unwrap();
            assert_eq!(acc.numer as usize, signatures.len());
            assert_eq!(acc.denom as usize, map.cells());
        }
    }

    #[test]
    fn actions_never_hurt() {
        for seed in 0..12 {
            let map = random_map(seed);
            for t in 1..=3 {
                let with = bayes_accuracy(&map, t, ChannelContent::ObsAndActions).unwrap();
                let without = bayes_accuracy(&map, t, ChannelContent::ObsOnly).unwrap();
                // Same denominator: compare numerators exactly.
                assert_eq!(with.denom, without.denom);
                assert!(with.numer >= without.numer, "map {seed} t {t}");
            }
        }
    }

    #[test]
    fn torus_free_monotonicity_not_assumed_on_walls() {
        // On bounded maps only content-monotonicity is guaranteed; this
        // pins that accuracy for obs+actions is monotone across T on a
        // fully distinguishable map, where longer walks cannot hurt.
        let map = distinct_map();
        let mut last = 0.0;
        for t in 0..=3 {
            let acc = bayes_accuracy(&map, t, ChannelContent::ObsAndActions).unwrap().value();
            assert!(acc >= last - 1e-12);
            last = acc;
        }
    }

    #[test]
    fn posterior_table_matches_posterior() {
        let map = random_map(5);
        let table = PosteriorTable::build(&map, 2, ChannelContent::ObsAndActions).unwrap();
        let ens = enumerate_episodes(&map, 2).unwrap();
        for ep in ens.episodes.iter().step_by(67) {
            let evidence = Evidence::from_episode(ep, ChannelContent::ObsAndActions);
            let direct = posterior(&map, 2, &evidence, ChannelContent::ObsAndActions).unwrap();
            assert_eq!(table.lookup(&evidence).unwrap(), &direct);
        }
    }
}
