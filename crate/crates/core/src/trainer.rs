//! Optimization loops for both channels, localization evaluation, early
//! stopping and the score-function gradient estimator for the discrete
//! channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{
    adam_step, clip_global_norm, AdamParams, DiffError, Graph, NodeId, ParamStore, Tensor,
};
use crate::gridworld::{sample_episode, Episode, GridError, GridMap, SplitSpec};
use crate::guide::{guide_forward, init_guide_params};
use crate::oracle::{mean_bayes_accuracy, ChannelContent, OracleError};
use crate::tourist::{
    baseline_value, continuous_message, discrete_message, init_tourist_params, Channel,
    ModelDims,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("diff error: {0}")]
    Diff(#[from] DiffError),
    #[error("grid error: {0}")]
    Grid(#[from] GridError),
    #[error("oracle error: {0}")]
    Oracle(#[from] OracleError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} ({channel} channel)")]
    NonFiniteLoss { epoch: usize, batch: usize, channel: &'static str },
    #[error(
        "measured test accuracy {acc:.4} exceeds the information-theoretic bound \
         {bound:.4} + 3*CI {ci:.4}; the evaluation is broken"
    )]
    BoundViolated { acc: f64, bound: f64, ci: f64 },
    #[error("invalid training settings: {0}")]
    BadSettings(String),
}

/// Architecture selection shared by training, evaluation and the full-task
/// protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub channel: Channel,
    pub masc_on: bool,
    pub t: usize,
    pub dim: usize,
}

impl ModelSpec {
    pub fn dims(&self) -> ModelDims {
        ModelDims { dim: self.dim, t_max: self.t }
    }

    /// The message content this architecture can actually use: without
    /// masking the decoded actions never touch the output, so only the
    /// observation half carries information.
    pub fn content(&self) -> ChannelContent {
        if self.masc_on {
            ChannelContent::ObsAndActions
        } else {
            ChannelContent::ObsOnly
        }
    }

    /// Registers tourist and guide parameters for this architecture.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), DiffError> {
        init_tourist_params(store, self.dims(), self.channel, rng)?;
        init_guide_params(store, self.dims(), self.channel, self.masc_on, rng)
    }
}

fn default_epochs() -> usize {
    200
}
fn default_batches_per_epoch() -> usize {
    100
}
fn default_batch_size() -> usize {
    64
}
fn default_pool() -> usize {
    1000
}

/// Full training configuration. "Epoch" means `batches_per_epoch` freshly
/// sampled batches; validation and test pools are fixed up front.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batches_per_epoch")]
    pub batches_per_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamParams,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Optional global-norm cap on each batch gradient.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_pool")]
    pub valid_episodes: usize,
    #[serde(default = "default_pool")]
    pub test_episodes: usize,
}

impl TrainSettings {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(TrainError::BadSettings(
                "epochs, batches_per_epoch and batch_size must be positive".into(),
            ));
        }
        if self.valid_episodes == 0 || self.test_episodes == 0 {
            return Err(TrainError::BadSettings("evaluation pools must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_acc: f64,
}

/// Outcome of one training run. Test accuracy is computed exactly once, at
/// the best-validation checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub settings: TrainSettings,
    pub curves: Vec<EpochRow>,
    pub best_epoch: usize,
    pub train_acc: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
    /// Exact Bayes accuracy of the test maps for this architecture's
    /// usable content.
    pub bayes_bound: f64,
    /// Binomial standard error of the measured test accuracy.
    pub test_ci: f64,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters at the best-validation checkpoint.
    pub store: ParamStore,
}

/// Fixed evaluation pool: episodes paired with indices into its map set.
pub struct EvalSet {
    pub maps: Vec<GridMap>,
    pub episodes: Vec<(usize, Episode)>,
}

impl EvalSet {
    pub fn sample(maps: &[GridMap], n: usize, t: usize, rng: &mut ChaCha12Rng) -> EvalSet {
        let episodes = (0..n)
            .map(|_| {
                let mi = rng.gen_range(0..maps.len());
                (mi, sample_episode(&maps[mi], t, rng))
            })
            .collect();
        EvalSet { maps: maps.to_vec(), episodes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Argmax,
    Sample,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.gen::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// One forward pass of the full tourist+guide pipeline; returns the
/// location distribution (x-major) and the per-step masks.
pub fn predict_distribution<R: Rng>(
    store: &ParamStore,
    spec: &ModelSpec,
    observations: &[crate::gridworld::Observation],
    actions: &[crate::gridworld::AgnosticAction],
    map: &GridMap,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<[f64; 9]>), DiffError> {
    let mut g = Graph::new(store);
    let msg = match spec.channel {
        Channel::Continuous => continuous_message(&mut g, observations, actions)?,
        Channel::Discrete => discrete_message(&mut g, observations, actions, rng)?,
    };
    let out = guide_forward(&mut g, &msg, map, spec.masc_on, actions.len())?;
    let dist = g.value(out.dist).data().to_vec();
    let masks = out
        .masks
        .iter()
        .map(|&m| {
            let mut a = [0.0; 9];
            a.copy_from_slice(g.value(m).data());
            a
        })
        .collect();
    Ok((dist, masks))
}

/// Fraction of episodes whose predicted cell equals the target.
pub fn evaluate_localization(
    store: &ParamStore,
    spec: &ModelSpec,
    set: &EvalSet,
    mode: PredictionMode,
    rng: &mut ChaCha12Rng,
) -> Result<f64, DiffError> {
    let mut hits = 0usize;
    for (mi, ep) in &set.episodes {
        let map = &set.maps[*mi];
        let (dist, _) = predict_distribution(store, spec, &ep.observations, &ep.actions, map, rng)?;
        let pred = match mode {
            PredictionMode::Argmax => argmax(&dist),
            PredictionMode::Sample => sample_index(&dist, rng),
        };
        if pred == map.cell_index(ep.target.0, ep.target.1) {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.episodes.len() as f64)
}

/// Per-episode pieces of the discrete-channel objective.
struct DiscreteTerms {
    loss: NodeId,
    correct: bool,
    ce_value: f64,
}

/// Builds the joint discrete objective for one episode: guide
/// cross-entropy, the score-function surrogate for the tourist (advantage
/// times negative log-probability, advantage treated as a constant), and
/// the baseline regression. Guide gradients never flow through the
/// sampled bits.
fn discrete_episode_terms(
    g: &mut Graph<'_>,
    ep: &Episode,
    map: &GridMap,
    spec: &ModelSpec,
    rng: &mut ChaCha12Rng,
) -> Result<DiscreteTerms, DiffError> {
    let msg = discrete_message(g, &ep.observations, &ep.actions, rng)?;
    let out = guide_forward(g, &msg, map, spec.masc_on, ep.actions.len())?;
    let target = map.cell_index(ep.target.0, ep.target.1);
    let ce = g.cross_entropy(out.dist, target)?;
    let ce_value = g.scalar(ce);
    let correct = argmax(g.value(out.dist).data()) == target;

    // Reward is the negative guide loss for this very sample.
    let reward = -ce_value;
    let b = baseline_value(g, msg.aux.expect("discrete message carries aux"))?;
    let advantage = reward - g.scalar(b);
    let log_prob = msg.log_prob.expect("discrete message carries log_prob");
    let surrogate = g.scale(log_prob, -advantage);

    let reward_const = g.input(Tensor::scalar(reward));
    let baseline_loss = g.mse(b, reward_const)?;

    let partial = g.add(ce, surrogate)?;
    let loss = g.add(partial, baseline_loss)?;
    Ok(DiscreteTerms { loss, correct, ce_value })
}

struct BatchStats {
    loss: f64,
    acc: f64,
}

fn run_batch(
    store: &mut ParamStore,
    settings: &TrainSettings,
    train_maps: &[GridMap],
    episode_rng: &mut ChaCha12Rng,
    epoch: usize,
    batch: usize,
) -> Result<BatchStats, TrainError> {
    let spec = &settings.model;
    let mut ce_total = 0.0;
    let mut hits = 0usize;
    let grads = {
        let mut g = Graph::new(store);
        let mut losses = Vec::with_capacity(settings.batch_size);
        for _ in 0..settings.batch_size {
            let map = &train_maps[episode_rng.gen_range(0..train_maps.len())];
            let ep = sample_episode(map, spec.t, episode_rng);
            match spec.channel {
                Channel::Continuous => {
                    let msg = continuous_message(&mut g, &ep.observations, &ep.actions)?;
                    let out = guide_forward(&mut g, &msg, map, spec.masc_on, ep.actions.len())?;
                    let target = map.cell_index(ep.target.0, ep.target.1);
                    let ce = g.cross_entropy(out.dist, target)?;
                    ce_total += g.scalar(ce);
                    if argmax(g.value(out.dist).data()) == target {
                        hits += 1;
                    }
                    losses.push(ce);
                }
                Channel::Discrete => {
                    let terms = discrete_episode_terms(&mut g, &ep, map, spec, episode_rng)?;
                    ce_total += terms.ce_value;
                    if terms.correct {
                        hits += 1;
                    }
                    losses.push(terms.loss);
                }
            }
        }
        let total = g.sum_list(&losses)?;
        let mean = g.scale(total, 1.0 / settings.batch_size as f64);
        if !g.scalar(mean).is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch,
                channel: spec.channel.as_str(),
            });
        }
        g.backward(mean)?
    };
    store.accumulate(&grads);
    if let Some(max_norm) = settings.clip_norm {
        clip_global_norm(store, max_norm);
    }
    adam_step(store, &settings.adam)?;
    Ok(BatchStats {
        loss: ce_total / settings.batch_size as f64,
        acc: hits as f64 / settings.batch_size as f64,
    })
}

/// Trains one model on the split's training maps, early-stops on
/// validation accuracy, and reports train/valid/test accuracy at the best
/// checkpoint. Works for either channel; the discrete channel trains the
/// guide by cross-entropy and the tourist by the baseline-corrected
/// score-function estimator on the same batches.
pub fn train(settings: &TrainSettings, split: &SplitSpec) -> Result<TrainOutcome, TrainError> {
    settings.validate()?;
    let spec = settings.model;

    let mut init_rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(settings.seed, "init"));
    let mut episode_rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(settings.seed, "episodes"));
    let mut valid_rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(settings.seed, "valid-pool"));
    let mut test_rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(settings.seed, "test-pool"));
    let mut eval_rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(settings.seed, "eval"));

    let mut store = ParamStore::new();
    spec.init_params(&mut store, &mut init_rng)?;

    let valid_set = EvalSet::sample(&split.valid, settings.valid_episodes, spec.t, &mut valid_rng);
    let test_set = EvalSet::sample(&split.test, settings.test_episodes, spec.t, &mut test_rng);

    let mut curves = Vec::with_capacity(settings.epochs);
    let mut best_epoch = 0usize;
    let mut best_valid = f64::NEG_INFINITY;
    let mut best_snapshot = store.snapshot();

    for epoch in 0..settings.epochs {
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for batch in 0..settings.batches_per_epoch {
            let stats =
                run_batch(&mut store, settings, &split.train, &mut episode_rng, epoch, batch)?;
            loss_sum += stats.loss;
            acc_sum += stats.acc;
        }
        let valid_acc =
            evaluate_localization(&store, &spec, &valid_set, PredictionMode::Argmax, &mut eval_rng)?;
        curves.push(EpochRow {
            epoch,
            train_loss: loss_sum / settings.batches_per_epoch as f64,
            train_acc: acc_sum / settings.batches_per_epoch as f64,
            valid_acc,
        });
        // Strict improvement keeps the earliest epoch on ties.
        if valid_acc > best_valid {
            best_valid = valid_acc;
            best_epoch = epoch;
            best_snapshot = store.snapshot();
        }
        if let Some(patience) = settings.patience {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }

    store.restore(&best_snapshot);
    let test_acc =
        evaluate_localization(&store, &spec, &test_set, PredictionMode::Argmax, &mut eval_rng)?;

    let bayes_bound = mean_bayes_accuracy(&split.test, spec.t, spec.content())?;
    let test_ci =
        (test_acc * (1.0 - test_acc) / settings.test_episodes as f64).sqrt();
    if test_acc > bayes_bound + 3.0 * test_ci {
        return Err(TrainError::BoundViolated { acc: test_acc, bound: bayes_bound, ci: test_ci });
    }

    let report = TrainReport {
        settings: settings.clone(),
        best_epoch,
        train_acc: curves[best_epoch].train_acc,
        valid_acc: curves[best_epoch].valid_acc,
        test_acc,
        bayes_bound,
        test_ci,
        curves,
    };
    Ok(TrainOutcome { report, store })
}

#[cfg(test)]
mod tests;
