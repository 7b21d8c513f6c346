//! The guide: decodes the tourist's message, grounds it on the overhead
//! map and outputs a distribution over locations.
//!
//! The map lives as a `[G1, G2, L]` embedding whose cells sum the guide's
//! landmark embeddings. Each communicated action becomes a softmax 3x3
//! mask multiplying a shared convolution kernel, so the action can realize
//! a translation of the whole map embedding; with masking off the same
//! kernel is applied unmodified at every step.

use rand::Rng;

use crate::diffcore::{DiffError, Graph, NodeId, ParamStore, Tensor};
use crate::gridworld::{GridMap, NUM_SYMBOLS};
use crate::tourist::{Channel, Message, ModelDims};

pub mod names {
    pub const LANDMARKS: &str = "guide.landmarks";
    pub const OBS_W: &str = "guide.obs_w";
    pub const OBS_B: &str = "guide.obs_b";
    pub const MASK_W: &str = "guide.mask_w";
    pub const MASK_B: &str = "guide.mask_b";
    pub const KERNEL: &str = "guide.kernel";
    pub const PRED_GATES: &str = "guide.pred_gates";

    pub fn act_w(t: usize) -> String {
        format!("guide.act_w.{t}")
    }

    pub fn act_b(t: usize) -> String {
        format!("guide.act_b.{t}")
    }
}

fn uniform_tensor<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Registers all guide parameters.
///
/// The kernel starts small-uniform (+- 1 / sqrt(9 L)); the mask head starts
/// at zero so every initial mask is the maximum-entropy uniform one.
pub fn init_guide_params<R: Rng>(
    store: &mut ParamStore,
    dims: ModelDims,
    channel: Channel,
    masc_on: bool,
    rng: &mut R,
) -> Result<(), DiffError> {
    let l = dims.dim;
    let wscale = 1.0 / (l as f64).sqrt();
    store.register(names::LANDMARKS, uniform_tensor(vec![NUM_SYMBOLS, l], 0.1, rng))?;
    if channel == Channel::Discrete {
        store.register(names::OBS_W, uniform_tensor(vec![l, l], wscale, rng))?;
        store.register(names::OBS_B, Tensor::zeros(vec![l]))?;
    }
    for t in 0..dims.t_max {
        store.register(&names::act_w(t), uniform_tensor(vec![l, l], wscale, rng))?;
        store.register(&names::act_b(t), Tensor::zeros(vec![l]))?;
    }
    if masc_on {
        store.register(names::MASK_W, Tensor::zeros(vec![9, l]))?;
        store.register(names::MASK_B, Tensor::zeros(vec![9]))?;
    }
    store.register(names::KERNEL, uniform_tensor(vec![3, 3, l, l], 1.0 / (9.0 * l as f64).sqrt(), rng))?;
    store.register(names::PRED_GATES, Tensor::zeros(vec![dims.t_max + 1, l]))?;
    Ok(())
}

fn extractor_bank_size(store: &ParamStore) -> usize {
    (0..).take_while(|&t| store.contains(&names::act_w(t))).count()
}

/// Splits the message into the observation embedding `e` and per-step
/// action embeddings.
///
/// Continuous: `e` is the observation half verbatim. Discrete: `e` is a
/// linear decode of the observation bits. Either way each action embedding
/// has its own per-step linear layer over the action half.
pub fn decode_message(
    g: &mut Graph<'_>,
    msg: &Message,
    t: usize,
) -> Result<(NodeId, Vec<NodeId>), DiffError> {
    let bank = extractor_bank_size(g.store());
    if t > bank {
        return Err(DiffError::Shape {
            op: "decode_message",
            detail: format!("walk length {t} exceeds the {bank} per-step action extractors"),
        });
    }
    let e = match msg.kind {
        Channel::Continuous => msg.obs_part,
        Channel::Discrete => {
            let w = g.param(names::OBS_W)?;
            let b = g.param(names::OBS_B)?;
            g.linear(w, b, msg.obs_part)?
        }
    };
    let mut acts = Vec::with_capacity(t);
    for step in 0..t {
        let w = g.param(&names::act_w(step))?;
        let b = g.param(&names::act_b(step))?;
        acts.push(g.linear(w, b, msg.act_part)?);
    }
    Ok((e, acts))
}

/// Projects an action embedding to a nonnegative 3x3 mask summing to one
/// (row-major softmax of a 9-way projection).
pub fn mask_from_action(g: &mut Graph<'_>, action_embed: NodeId) -> Result<NodeId, DiffError> {
    let w = g.param(names::MASK_W)?;
    let b = g.param(names::MASK_B)?;
    let z = g.linear(w, b, action_embed)?;
    Ok(g.softmax(z))
}

/// One masked-convolution step: the mask gates the kernel's spatial cells,
/// then a zero-padded 3x3 convolution evolves the map embedding.
pub fn masc_step(g: &mut Graph<'_>, u: NodeId, mask: NodeId, kernel: NodeId) -> Result<NodeId, DiffError> {
    g.conv3x3(u, kernel, Some(mask))
}

/// Ablation step: the plain shared kernel, ignoring communicated actions.
pub fn no_masc_step(g: &mut Graph<'_>, u: NodeId, kernel: NodeId) -> Result<NodeId, DiffError> {
    g.conv3x3(u, kernel, None)
}

/// Initial map embedding: per-cell sums of the guide's landmark
/// embeddings, with the empty-corner embedding for bare corners.
pub fn map_embedding(g: &mut Graph<'_>, map: &GridMap) -> Result<NodeId, DiffError> {
    let table = g.param(names::LANDMARKS)?;
    let cells: Vec<Vec<usize>> = map
        .corners()
        .iter()
        .map(|c| c.observation().symbols().iter().map(|s| s.index()).collect())
        .collect();
    g.map_embed(table, cells, map.width(), map.height())
}

/// Aggregates the per-step map embeddings with positional gates, scores
/// every cell against `e` and normalizes over the whole grid.
pub fn predict_location(
    g: &mut Graph<'_>,
    e: NodeId,
    map_embeddings: &[NodeId],
) -> Result<NodeId, DiffError> {
    let gates = g.param(names::PRED_GATES)?;
    let mut terms = Vec::with_capacity(map_embeddings.len());
    for (t, &u) in map_embeddings.iter().enumerate() {
        let gate = g.embed_row(gates, t)?;
        let gate = g.sigmoid(gate);
        terms.push(g.gate_map(u, gate)?);
    }
    let agg = g.sum_list(&terms)?;
    let scores = g.map_scores(agg, e)?;
    Ok(g.softmax(scores))
}

/// Full guide forward pass: distribution over the map's cells (x-major),
/// plus the per-step masks when masking is on.
pub struct GuideOutput {
    pub dist: NodeId,
    pub masks: Vec<NodeId>,
}

pub fn guide_forward(
    g: &mut Graph<'_>,
    msg: &Message,
    map: &GridMap,
    masc_on: bool,
    t: usize,
) -> Result<GuideOutput, DiffError> {
    let (e, acts) = decode_message(g, msg, t)?;
    let kernel = g.param(names::KERNEL)?;
    let mut us = Vec::with_capacity(t + 1);
    us.push(map_embedding(g, map)?);
    let mut masks = Vec::new();
    for step in 0..t {
        let u_next = if masc_on {
            let mask = mask_from_action(g, acts[step])?;
            masks.push(mask);
            masc_step(g, us[step], mask, kernel)?
        } else {
            no_masc_step(g, us[step], kernel)?
        };
        us.push(u_next);
    }
    let dist = predict_location(g, e, &us)?;
    Ok(GuideOutput { dist, masks })
}
