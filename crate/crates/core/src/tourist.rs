//! The tourist: compresses an episode's observations and actions into a
//! message for the guide.
//!
//! Both channels share the positionally-gated sums
//! `h = sum_t sigmoid(g_t) (.) x_t`; the continuous channel sends `h`
//! directly while the discrete channel samples one Bernoulli bit per
//! coordinate from `sigmoid(h)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, NodeId, ParamStore, Tensor};
use crate::gridworld::{AgnosticAction, Observation, NUM_SYMBOLS};

/// Message channel selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Continuous,
    Discrete,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Continuous => "continuous",
            Channel::Discrete => "discrete",
        }
    }
}

/// Embedding width and the longest supported walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub t_max: usize,
}

pub mod names {
    pub const LANDMARKS: &str = "tourist.landmarks";
    pub const ACTIONS: &str = "tourist.actions";
    pub const OBS_GATES: &str = "tourist.obs_gates";
    pub const ACT_GATES: &str = "tourist.act_gates";
    pub const BASELINE_W: &str = "tourist.baseline_w";
    pub const BASELINE_B: &str = "tourist.baseline_b";
}

fn uniform_tensor<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Registers all tourist parameters. Gates start at zero (half-open), and
/// the discrete channel adds the state-value baseline head.
///
/// Embedding rows start at unit scale: the discrete channel needs
/// pre-sample activations away from zero, or every bit opens as a fair
/// coin and the guide has nothing to latch onto.
pub fn init_tourist_params<R: Rng>(
    store: &mut ParamStore,
    dims: ModelDims,
    channel: Channel,
    rng: &mut R,
) -> Result<(), DiffError> {
    let l = dims.dim;
    store.register(names::LANDMARKS, uniform_tensor(vec![NUM_SYMBOLS, l], 2.0, rng))?;
    store.register(names::ACTIONS, uniform_tensor(vec![4, l], 2.0, rng))?;
    store.register(names::OBS_GATES, Tensor::zeros(vec![dims.t_max + 1, l]))?;
    store.register(names::ACT_GATES, Tensor::zeros(vec![dims.t_max.max(1), l]))?;
    if channel == Channel::Discrete {
        store.register(names::BASELINE_W, Tensor::zeros(vec![1, 2 * l]))?;
        store.register(names::BASELINE_B, Tensor::zeros(vec![1]))?;
    }
    Ok(())
}

/// The tourist's payload, as graph nodes. Discrete messages carry the exact
/// log-probability of their sampled bits and keep the pre-sample
/// activations for the baseline.
pub struct Message {
    pub kind: Channel,
    pub obs_part: NodeId,
    pub act_part: NodeId,
    pub log_prob: Option<NodeId>,
    pub aux: Option<(NodeId, NodeId)>,
}

/// Per-step observation embeddings: each is the sum of the landmark
/// embeddings in that step's multiset (duplicates contribute twice).
pub fn encode_observations(
    g: &mut Graph<'_>,
    observations: &[Observation],
) -> Result<Vec<NodeId>, DiffError> {
    let table = g.param(names::LANDMARKS)?;
    observations
        .iter()
        .map(|obs| {
            let rows: Vec<NodeId> = obs
                .symbols()
                .iter()
                .map(|s| g.embed_row(table, s.index()))
                .collect::<Result<_, _>>()?;
            g.sum_list(&rows)
        })
        .collect()
}

fn check_lengths(
    g: &Graph<'_>,
    observations: &[Observation],
    actions: &[AgnosticAction],
) -> Result<(), DiffError> {
    if observations.len() != actions.len() + 1 {
        return Err(DiffError::Shape {
            op: "tourist_message",
            detail: format!(
                "need one more observation than actions, got {} observations and {} actions",
                observations.len(),
                actions.len()
            ),
        });
    }
    let t_max = g.store().get(names::OBS_GATES)?.shape()[0] - 1;
    if actions.len() > t_max {
        return Err(DiffError::Shape {
            op: "tourist_message",
            detail: format!("walk length {} exceeds configured maximum {}", actions.len(), t_max),
        });
    }
    Ok(())
}

/// Gated sums over observations and actions; the action half is the zero
/// vector when there are no actions.
fn gated_halves(
    g: &mut Graph<'_>,
    observations: &[Observation],
    actions: &[AgnosticAction],
) -> Result<(NodeId, NodeId), DiffError> {
    let dim = g.store().get(names::LANDMARKS)?.shape()[1];
    let obs_embeds = encode_observations(g, observations)?;
    let obs_gates = g.param(names::OBS_GATES)?;
    let mut obs_terms = Vec::with_capacity(obs_embeds.len());
    for (t, &o) in obs_embeds.iter().enumerate() {
        let gate = g.embed_row(obs_gates, t)?;
        let gate = g.sigmoid(gate);
        obs_terms.push(g.hadamard(gate, o)?);
    }
    let h_obs = g.sum_list(&obs_terms)?;

    let h_act = if actions.is_empty() {
        g.zeros(vec![dim])
    } else {
        let action_table = g.param(names::ACTIONS)?;
        let act_gates = g.param(names::ACT_GATES)?;
        let mut act_terms = Vec::with_capacity(actions.len());
        for (t, a) in actions.iter().enumerate() {
            let emb = g.embed_row(action_table, a.index())?;
            let gate = g.embed_row(act_gates, t)?;
            let gate = g.sigmoid(gate);
            act_terms.push(g.hadamard(gate, emb)?);
        }
        g.sum_list(&act_terms)?
    };
    Ok((h_obs, h_act))
}

/// The pre-sample activations `(h_obs, h_act)` both channels share.
pub fn message_activations(
    g: &mut Graph<'_>,
    observations: &[Observation],
    actions: &[AgnosticAction],
) -> Result<(NodeId, NodeId), DiffError> {
    check_lengths(g, observations, actions)?;
    gated_halves(g, observations, actions)
}

/// Continuous message: the gated sums themselves, end-to-end
/// differentiable.
pub fn continuous_message(
    g: &mut Graph<'_>,
    observations: &[Observation],
    actions: &[AgnosticAction],
) -> Result<Message, DiffError> {
    check_lengths(g, observations, actions)?;
    let (h_obs, h_act) = gated_halves(g, observations, actions)?;
    Ok(Message {
        kind: Channel::Continuous,
        obs_part: h_obs,
        act_part: h_act,
        log_prob: None,
        aux: None,
    })
}

/// Discrete message: one Bernoulli bit per coordinate, sampled from
/// `sigmoid(h)`. The returned log-probability is exact for the sampled
/// bits and differentiable in the tourist parameters.
pub fn discrete_message<R: Rng>(
    g: &mut Graph<'_>,
    observations: &[Observation],
    actions: &[AgnosticAction],
    rng: &mut R,
) -> Result<Message, DiffError> {
    check_lengths(g, observations, actions)?;
    let (h_obs, h_act) = gated_halves(g, observations, actions)?;
    let sample = |g: &Graph<'_>, h: NodeId, rng: &mut R| -> Vec<f64> {
        g.value(h)
            .data()
            .iter()
            .map(|&hi| {
                let p = 1.0 / (1.0 + (-hi).exp());
                if rng.gen::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let obs_bits = sample(g, h_obs, rng);
    let act_bits = sample(g, h_act, rng);

    let h_full = g.concat(h_obs, h_act)?;
    let mut bits = obs_bits.clone();
    bits.extend_from_slice(&act_bits);
    let log_prob = g.bernoulli_log_prob(h_full, &bits)?;

    let dim = obs_bits.len();
    let obs_part = g.input(Tensor::new(vec![dim], obs_bits).expect("bits"));
    let act_part = g.input(Tensor::new(vec![dim], act_bits).expect("bits"));
    Ok(Message {
        kind: Channel::Discrete,
        obs_part,
        act_part,
        log_prob: Some(log_prob),
        aux: Some((h_obs, h_act)),
    })
}

/// State-value baseline: a linear readout of the concatenated pre-sample
/// activations. The activations are detached so the regression loss
/// trains only the readout head.
pub fn baseline_value(g: &mut Graph<'_>, aux: (NodeId, NodeId)) -> Result<NodeId, DiffError> {
    let h_obs = g.detach(aux.0);
    let h_act = g.detach(aux.1);
    let h = g.concat(h_obs, h_act)?;
    let w = g.param(names::BASELINE_W)?;
    let b = g.param(names::BASELINE_B)?;
    g.linear(w, b, h)
}
