//! Dataset splits over whole maps, honoring intersection novelty.
//!
//! Intersections are 2x2 corner blocks at even offsets. Two maps share an
//! intersection only if both were carved from the same neighborhood and
//! their footprints overlap on it; independently generated maps never
//! share anything. Splits must keep test maps free of any intersection
//! seen in training, and give every validation map at least one
//! intersection unseen in training.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GridError, GridMap};

/// Requested split sizes; assignment is seeded-deterministic.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SplitRule {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

/// Disjoint train/valid/test map sets.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train: Vec<GridMap>,
    pub valid: Vec<GridMap>,
    pub test: Vec<GridMap>,
}

impl SplitSpec {
    pub fn all_maps(&self) -> impl Iterator<Item = &GridMap> {
        self.train.iter().chain(self.valid.iter()).chain(self.test.iter())
    }
}

/// Identity of one physical intersection: parent neighborhood plus the
/// intersection's absolute origin there.
type IntersectionId = (String, usize, usize);

/// Physical intersections covered by a map; empty for maps without
/// provenance (they cannot share intersections with anything).
fn intersections(map: &GridMap) -> Vec<IntersectionId> {
    let Some(origin) = map.origin() else {
        return Vec::new();
    };
    let mut keys = Vec::new();
    if map.width() < 2 || map.height() < 2 {
        return keys;
    }
    for dx in (0..=map.width() - 2).step_by(2) {
        for dy in (0..=map.height() - 2).step_by(2) {
            keys.push((origin.neighborhood.clone(), origin.x0 + dx, origin.y0 + dy));
        }
    }
    keys
}

/// Splits maps into train/valid/test of the requested sizes.
///
/// Maps that share intersections are grouped into connected components and
/// whole components go to one side, which keeps test content fully novel
/// and makes every validation intersection unseen in training. Assignment
/// is deterministic given the rng state.
pub fn make_splits<R: Rng>(
    maps: &[GridMap],
    rule: SplitRule,
    rng: &mut R,
) -> Result<SplitSpec, GridError> {
    if maps.len() < 3 {
        return Err(GridError::SplitInfeasible(format!(
            "need at least 3 maps, got {}",
            maps.len()
        )));
    }
    if rule.n_train + rule.n_valid + rule.n_test > maps.len() {
        return Err(GridError::SplitInfeasible(format!(
            "rule asks for {} maps but only {} exist",
            rule.n_train + rule.n_valid + rule.n_test,
            maps.len()
        )));
    }
    if rule.n_train == 0 || rule.n_valid == 0 || rule.n_test == 0 {
        return Err(GridError::SplitInfeasible("every split must be nonempty".into()));
    }
    {
        let mut ids = HashSet::new();
        for m in maps {
            if !ids.insert(m.map_id()) {
                return Err(GridError::SplitInfeasible(format!(
                    "duplicate map_id {}",
                    m.map_id()
                )));
            }
        }
    }

    // Union-find over maps linked by shared intersections.
    let keys: Vec<Vec<IntersectionId>> = maps.iter().map(intersections).collect();
    let mut parent: Vec<usize> = (0..maps.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    let mut seen: HashMap<&IntersectionId, usize> = HashMap::new();
    for (i, ks) in keys.iter().enumerate() {
        for k in ks {
            if let Some(&j) = seen.get(k) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            } else {
                seen.insert(k, i);
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..maps.len() {
        let root = find(&mut parent, i);
        components.entry(root).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = components.into_values().collect();
    groups.shuffle(rng);
    for g in groups.iter_mut() {
        g.shuffle(rng);
    }

    // Fill test, then valid, then train, taking whole components so the
    // novelty invariants hold by construction. Test-component leftovers
    // may serve as validation maps (they share content with test only);
    // leftovers of valid components are dropped rather than trained on.
    let mut test = Vec::new();
    let mut valid = Vec::new();
    let mut train = Vec::new();
    let mut spill = Vec::new();
    let mut iter = groups.into_iter();
    while test.len() < rule.n_test {
        let Some(g) = iter.next() else { break };
        let room = rule.n_test - test.len();
        if g.len() <= room {
            test.extend(g);
        } else {
            test.extend(g.iter().take(room).copied());
            spill.extend(g.into_iter().skip(room));
        }
    }
    valid.extend(spill.iter().take(rule.n_valid).copied());
    while valid.len() < rule.n_valid {
        let Some(g) = iter.next() else { break };
        valid.extend(g.iter().take(rule.n_valid - valid.len()).copied());
    }
    for g in iter {
        train.extend(g);
    }
    if test.len() < rule.n_test || valid.len() < rule.n_valid || train.len() < rule.n_train {
        return Err(GridError::SplitInfeasible(format!(
            "could not satisfy rule {}/{}/{} with the given map overlap structure \
             (reached {}/{}/{})",
            rule.n_train,
            rule.n_valid,
            rule.n_test,
            train.len(),
            valid.len(),
            test.len()
        )));
    }
    train.truncate(rule.n_train);

    let pick = |idx: &[usize]| idx.iter().map(|&i| maps[i].clone()).collect::<Vec<_>>();
    let spec = SplitSpec { train: pick(&train), valid: pick(&valid), test: pick(&test) };
    check_split(&spec)?;
    Ok(spec)
}

/// Verifies the split invariants: pairwise id-disjoint sets, test content
/// sharing no intersection with training, and every validation map holding
/// at least one intersection absent from training.
pub fn check_split(spec: &SplitSpec) -> Result<(), GridError> {
    let mut ids = HashSet::new();
    for m in spec.all_maps() {
        if !ids.insert(m.map_id().to_string()) {
            return Err(GridError::SplitInvariant(format!(
                "map {} appears in more than one split",
                m.map_id()
            )));
        }
    }
    let train_keys: HashSet<IntersectionId> =
        spec.train.iter().flat_map(|m| intersections(m)).collect();
    for m in &spec.test {
        for k in intersections(m) {
            if train_keys.contains(&k) {
                return Err(GridError::SplitInvariant(format!(
                    "test map {} shares an intersection with training",
                    m.map_id()
                )));
            }
        }
    }
    for m in &spec.valid {
        let ks = intersections(m);
        if !ks.is_empty() && ks.iter().all(|k| train_keys.contains(k)) {
            return Err(GridError::SplitInvariant(format!(
                "valid map {} has no intersection unseen in training",
                m.map_id()
            )));
        }
    }
    Ok(())
}
