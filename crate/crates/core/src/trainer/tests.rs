use super::*;

use crate::diffcore::Graph;
use crate::gridworld::{replay_episode, AgnosticAction, Corner, GridMap, LandmarkCategory};
use crate::oracle::{bayes_accuracy, enumerate_episodes, ChannelContent, PosteriorTable};
use crate::tourist::{message_activations, names as tnames, Message};

fn distinct_corners() -> Vec<Corner> {
    let cats = LandmarkCategory::ALL;
    (0..16)
        .map(|i| {
            if i < 9 {
                Corner::new(vec![cats[i]])
            } else {
                Corner::new(vec![cats[0], cats[i - 9]])
            }
        })
        .collect()
}

/// One map cloned under three ids: an overfit split where train, valid and
/// test all look at the same world.
fn single_map_split(corners: Vec<Corner>) -> SplitSpec {
    let mk = |id: &str| GridMap::new(id.into(), 4, 4, corners.clone()).unwrap();
    SplitSpec { train: vec![mk("m-train")], valid: vec![mk("m-valid")], test: vec![mk("m-test")] }
}

fn quick_settings(model: ModelSpec, seed: u64) -> TrainSettings {
    TrainSettings {
        model,
        epochs: 2,
        batches_per_epoch: 3,
        batch_size: 8,
        adam: AdamParams::default(),
        seed,
        patience: None,
        clip_norm: None,
        valid_episodes: 64,
        test_episodes: 64,
    }
}

#[test]
fn initial_loss_is_near_uniform_entropy() {
    let split = single_map_split(distinct_corners());
    let model = ModelSpec { channel: Channel::Continuous, masc_on: true, t: 1, dim: 8 };
    let outcome = train(&quick_settings(model, 1), &split).unwrap();
    let first = &outcome.report.curves[0];
    assert!(
        (first.train_loss - 16.0f64.ln()).abs() < 0.15,
        "initial loss {} vs ln 16 {}",
        first.train_loss,
        16.0f64.ln()
    );
}

#[test]
fn fixed_seed_reproduces_the_report() {
    let split = single_map_split(distinct_corners());
    let model = ModelSpec { channel: Channel::Discrete, masc_on: true, t: 1, dim: 8 };
    let a = train(&quick_settings(model, 7), &split).unwrap();
    let b = train(&quick_settings(model, 7), &split).unwrap();
    assert_eq!(a.report, b.report);
    let c = train(&quick_settings(model, 8), &split).unwrap();
    assert_ne!(a.report.curves, c.report.curves);
}

#[test]
fn continuous_overfits_a_single_distinct_map() {
    let split = single_map_split(distinct_corners());
    let model = ModelSpec { channel: Channel::Continuous, masc_on: true, t: 1, dim: 32 };
    let settings = TrainSettings {
        model,
        epochs: 50,
        batches_per_epoch: 10,
        batch_size: 32,
        adam: AdamParams { lr: 3e-3, ..AdamParams::default() },
        seed: 3,
        patience: None,
        clip_norm: None,
        valid_episodes: 128,
        test_episodes: 128,
    };
    let outcome = train(&settings, &split).unwrap();
    let best_train = outcome
        .report
        .curves
        .iter()
        .map(|r| r.train_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(best_train >= 0.95, "train accuracy peaked at {best_train}");
}

#[test]
fn discrete_t0_approaches_the_bayes_bound() {
    // Fully distinguishable corners at T=0: the bound is 1.0 and the
    // discrete channel must land within 5 points of it.
    let split = single_map_split(distinct_corners());
    let model = ModelSpec { channel: Channel::Discrete, masc_on: true, t: 0, dim: 48 };
    let settings = TrainSettings {
        model,
        epochs: 300,
        batches_per_epoch: 25,
        batch_size: 32,
        adam: AdamParams { lr: 5e-3, ..AdamParams::default() },
        seed: 11,
        patience: None,
        clip_norm: None,
        valid_episodes: 256,
        test_episodes: 256,
    };
    let outcome = train(&settings, &split).unwrap();
    let bound = bayes_accuracy(&split.test[0], 0, ChannelContent::ObsAndActions).unwrap().value();
    assert_eq!(bound, 1.0);
    assert!(
        outcome.report.test_acc >= bound - 0.05,
        "test accuracy {} vs bound {}",
        outcome.report.test_acc,
        bound
    );
}

#[test]
fn zero_advantage_gives_zero_tourist_gradient() {
    let map = GridMap::new("m".into(), 4, 4, distinct_corners()).unwrap();
    let ep = replay_episode(&map, (1, 1), &[AgnosticAction::Up]).unwrap();
    let spec = ModelSpec { channel: Channel::Discrete, masc_on: true, t: 1, dim: 6 };

    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    spec.init_params(&mut store, &mut rng).unwrap();

    // First pass: learn the reward for this exact sampling stream.
    let reward = {
        let mut msg_rng = ChaCha12Rng::seed_from_u64(5);
        let mut g = Graph::new(&store);
        let terms = discrete_episode_terms(&mut g, &ep, &map, &spec, &mut msg_rng).unwrap();
        -terms.ce_value
    };
    // Pin the baseline output to that reward: advantage becomes exactly 0.
    store.get_mut(tnames::BASELINE_B).unwrap().data_mut()[0] = reward;

    let grads = {
        let mut msg_rng = ChaCha12Rng::seed_from_u64(5);
        let mut g = Graph::new(&store);
        let terms = discrete_episode_terms(&mut g, &ep, &map, &spec, &mut msg_rng).unwrap();
        g.backward(terms.loss).unwrap()
    };
    // The guide loss cannot reach the tourist through sampled bits and the
    // baseline regression is detached, so the tourist body sees nothing.
    for name in [tnames::LANDMARKS, tnames::ACTIONS, tnames::OBS_GATES, tnames::ACT_GATES] {
        let idx = store.param_index(name).unwrap();
        if let Some(g) = grads.get(idx) {
            assert!(g.iter().all(|&v| v == 0.0), "{name} got gradient {g:?}");
        }
    }
}

/// Surrogate gradient for one fixed bit pattern, as the training loss
/// builds it: d/dtheta [ -log p(bits) * (reward - baseline) ].
fn surrogate_grad_for_bits(
    store: &ParamStore,
    ep: &Episode,
    map: &GridMap,
    spec: &ModelSpec,
    bits: &[f64],
    baseline: f64,
) -> (Vec<Option<Vec<f64>>>, f64, f64) {
    let mut g = Graph::new(store);
    let (h_obs, h_act) = message_activations(&mut g, &ep.observations, &ep.actions).unwrap();
    let h = g.concat(h_obs, h_act).unwrap();
    let log_prob = g.bernoulli_log_prob(h, bits).unwrap();

    let l = spec.dim;
    let msg = Message {
        kind: Channel::Discrete,
        obs_part: g.input(Tensor::new(vec![l], bits[..l].to_vec()).unwrap()),
        act_part: g.input(Tensor::new(vec![l], bits[l..].to_vec()).unwrap()),
        log_prob: None,
        aux: None,
    };
    let out = guide_forward(&mut g, &msg, map, spec.masc_on, ep.actions.len()).unwrap();
    let ce = g.cross_entropy(out.dist, map.cell_index(ep.target.0, ep.target.1)).unwrap();
    let reward = -g.scalar(ce);

    let loss = g.scale(log_prob, -(reward - baseline));
    let grads = g.backward(loss).unwrap();
    let p = g.scalar(log_prob).exp();
    (grads.by_param().to_vec(), p, reward)
}

/// Hand-sets the dim-1 guide so every message earns a distinct reward;
/// with a near-uniform guide every reward ties and the expected
/// score-function gradient collapses to zero.
fn spread_guide_rewards(store: &mut ParamStore) {
    // Peak the guide map at landmarks the test episode observes, so the
    // observation bit swings the target's score hard in both directions.
    let lm = store.get_mut("guide.landmarks").unwrap().data_mut();
    for (i, v) in lm.iter_mut().enumerate() {
        *v = if i % 2 == 0 { 0.3 } else { -0.3 };
    }
    lm[LandmarkCategory::Bar.index()] = 1.0;
    lm[LandmarkCategory::Playfield.index()] = 4.0;
    store.get_mut("guide.obs_w").unwrap().data_mut()[0] = 2.0;
    store.get_mut("guide.obs_b").unwrap().data_mut()[0] = -1.0;
    store.get_mut("guide.act_w.0").unwrap().data_mut()[0] = 3.0;
    store.get_mut("guide.act_b.0").unwrap().data_mut()[0] = -1.5;
    let mut rng = ChaCha12Rng::seed_from_u64(333);
    for v in store.get_mut("guide.mask_w").unwrap().data_mut() {
        *v = rng.gen::<f64>() * 4.0 - 2.0;
    }
}

#[test]
fn reinforce_estimate_matches_enumeration() {
    // Message width 2 (one observation bit, one action bit): the exact
    // expected surrogate gradient enumerates all four messages.
    let map = GridMap::new("m".into(), 4, 4, distinct_corners()).unwrap();
    let ep = replay_episode(&map, (2, 1), &[AgnosticAction::Up]).unwrap();
    let spec = ModelSpec { channel: Channel::Discrete, masc_on: true, t: 1, dim: 1 };

    let mut rng = ChaCha12Rng::seed_from_u64(33);
    let mut store = ParamStore::new();
    spec.init_params(&mut store, &mut rng).unwrap();
    spread_guide_rewards(&mut store);

    // Mean reward over the message distribution as the baseline value.
    let baseline = {
        let mut total = 0.0;
        for obs_bit in [0.0, 1.0] {
            for act_bit in [0.0, 1.0] {
                let (_, p, r) =
                    surrogate_grad_for_bits(&store, &ep, &map, &spec, &[obs_bit, act_bit], 0.0);
                total += p * r;
            }
        }
        total
    };

    let n_params = store.len();
    let mut exact: Vec<Vec<f64>> =
        store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let mut total_p = 0.0;
    for obs_bit in [0.0, 1.0] {
        for act_bit in [0.0, 1.0] {
            let (grads, p, _r) =
                surrogate_grad_for_bits(&store, &ep, &map, &spec, &[obs_bit, act_bit], baseline);
            total_p += p;
            for i in 0..n_params {
                if let Some(g) = &grads[i] {
                    for (acc, &v) in exact[i].iter_mut().zip(g) {
                        *acc += p * v;
                    }
                }
            }
        }
    }
    assert!((total_p - 1.0).abs() < 1e-9, "message probabilities sum to {total_p}");

    let n = 30_000usize;
    let mut mc: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let mut sample_rng = ChaCha12Rng::seed_from_u64(77);
    for _ in 0..n {
        let mut g = Graph::new(&store);
        let msg = discrete_message(&mut g, &ep.observations, &ep.actions, &mut sample_rng).unwrap();
        let out = guide_forward(&mut g, &msg, &map, spec.masc_on, 1).unwrap();
        let ce = g.cross_entropy(out.dist, map.cell_index(ep.target.0, ep.target.1)).unwrap();
        let reward = -g.scalar(ce);
        let loss = g.scale(msg.log_prob.unwrap(), -(reward - baseline));
        let grads = g.backward(loss).unwrap();
        for i in 0..n_params {
            if let Some(gr) = grads.get(i) {
                for (acc, &v) in mc[i].iter_mut().zip(gr) {
                    *acc += v / n as f64;
                }
            }
        }
    }

    let mut checked = 0;
    for i in 0..n_params {
        for (e, m) in exact[i].iter().zip(&mc[i]) {
            if e.abs() > 0.05 {
                checked += 1;
                let rel = (e - m).abs() / e.abs();
                assert!(rel < 0.1, "param {i}: exact {e} vs mc {m} (rel {rel})");
            }
        }
    }
    assert!(checked >= 4, "too few informative coordinates ({checked})");
}

#[test]
fn baseline_regression_error_shrinks() {
    // Fixed episode distribution: the baseline head's squared error to the
    // reward must trend down (smoothed across a 100-step run).
    let map = GridMap::new("m".into(), 4, 4, distinct_corners()).unwrap();
    let spec = ModelSpec { channel: Channel::Discrete, masc_on: true, t: 1, dim: 8 };
    let mut rng = ChaCha12Rng::seed_from_u64(44);
    let mut store = ParamStore::new();
    spec.init_params(&mut store, &mut rng).unwrap();
    let hp = AdamParams { lr: 5e-3, ..AdamParams::default() };

    let mut errors = Vec::new();
    let mut ep_rng = ChaCha12Rng::seed_from_u64(45);
    for _ in 0..100 {
        let ep = sample_episode(&map, 1, &mut ep_rng);
        let grads = {
            let mut g = Graph::new(&store);
            let terms = discrete_episode_terms(&mut g, &ep, &map, &spec, &mut ep_rng).unwrap();
            errors.push({
                // Recompute the squared error of the baseline against the
                // realized reward for the trend check.
                let b = {
                    let mut g2 = Graph::new(&store);
                    let msg_rng = &mut ChaCha12Rng::seed_from_u64(1);
                    let msg =
                        discrete_message(&mut g2, &ep.observations, &ep.actions, msg_rng).unwrap();
                    let b = baseline_value(&mut g2, msg.aux.unwrap()).unwrap();
                    g2.scalar(b)
                };
                (b - (-terms.ce_value)).powi(2)
            });
            g.backward(terms.loss).unwrap()
        };
        store.accumulate(&grads);
        adam_step(&mut store, &hp).unwrap();
    }
    let head: f64 = errors[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = errors[80..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "baseline error went {head} -> {tail}");
}

#[test]
fn oracle_predictor_scores_exactly_bayes_accuracy() {
    let cfg = crate::gridworld::MapGenConfig {
        width: 4,
        height: 4,
        ..crate::gridworld::MapGenConfig::default()
    };
    let map = crate::gridworld::generate_neighborhood(&cfg, 23).unwrap();
    for content in [ChannelContent::ObsOnly, ChannelContent::ObsAndActions] {
        let table = PosteriorTable::build(&map, 2, content).unwrap();
        let ens = enumerate_episodes(&map, 2).unwrap();
        let hits: u64 = ens
            .episodes
            .iter()
            .filter(|ep| {
                let post = table.lookup_episode(ep).unwrap();
                post.argmax() == map.cell_index(ep.target.0, ep.target.1)
            })
            .count() as u64;
        let exact = bayes_accuracy(&map, 2, content).unwrap();
        assert_eq!(hits, exact.numer);
        assert_eq!(ens.episodes.len() as u64, exact.denom);
    }
}

#[test]
fn argmax_prediction_dominates_sampling() {
    // For a calibrated predictor, answering the mode beats sampling the
    // answer: per evidence class sum_t pi(t)^2 <= max_t pi(t). First the
    // exact statement on the oracle posterior:
    let cfg = crate::gridworld::MapGenConfig {
        width: 4,
        height: 4,
        ..crate::gridworld::MapGenConfig::default()
    };
    let map = crate::gridworld::generate_neighborhood(&cfg, 61).unwrap();
    let table = PosteriorTable::build(&map, 1, ChannelContent::ObsAndActions).unwrap();
    let ens = enumerate_episodes(&map, 1).unwrap();
    let (mut argmax_mass, mut sample_mass) = (0.0, 0.0);
    for ep in &ens.episodes {
        let post = table.lookup_episode(ep).unwrap();
        let probs = post.probabilities();
        argmax_mass += probs[post.argmax()];
        sample_mass += probs.iter().map(|p| p * p).sum::<f64>();
    }
    assert!(argmax_mass >= sample_mass - 1e-12);

    // Then the Monte Carlo comparison for a (briefly) trained model.
    let split = single_map_split(distinct_corners());
    let model = ModelSpec { channel: Channel::Continuous, masc_on: true, t: 1, dim: 8 };
    let settings = TrainSettings {
        epochs: 8,
        batches_per_epoch: 10,
        batch_size: 32,
        adam: AdamParams { lr: 3e-3, ..AdamParams::default() },
        ..quick_settings(model, 55)
    };
    let outcome = train(&settings, &split).unwrap();
    let mut pool_rng = ChaCha12Rng::seed_from_u64(56);
    let set = EvalSet::sample(&split.test, 10_000, 1, &mut pool_rng);
    let mut eval_rng = ChaCha12Rng::seed_from_u64(57);
    let acc_argmax =
        evaluate_localization(&outcome.store, &model, &set, PredictionMode::Argmax, &mut eval_rng)
            .unwrap();
    let acc_sample =
        evaluate_localization(&outcome.store, &model, &set, PredictionMode::Sample, &mut eval_rng)
            .unwrap();
    assert!(
        acc_argmax >= acc_sample - 0.01,
        "argmax {acc_argmax} vs sample {acc_sample}"
    );
}

#[test]
fn diverging_run_reports_an_error() {
    let split = single_map_split(distinct_corners());
    let model = ModelSpec { channel: Channel::Continuous, masc_on: true, t: 1, dim: 8 };
    let settings = TrainSettings {
        adam: AdamParams { lr: 1e300, ..AdamParams::default() },
        ..quick_settings(model, 9)
    };
    assert!(train(&settings, &split).is_err());
}

#[test]
fn settings_validation_rejects_zeroes() {
    let split = single_map_split(distinct_corners());
    let model = ModelSpec { channel: Channel::Continuous, masc_on: true, t: 1, dim: 8 };
    let settings = TrainSettings { epochs: 0, ..quick_settings(model, 1) };
    assert!(matches!(train(&settings, &split), Err(TrainError::BadSettings(_))));
}

