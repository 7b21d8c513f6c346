//! Command implementations.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use gridtalk_core::config::{
    load_map_suite, write_map_suite, ConfigError, ExperimentConfig,
};
use gridtalk_core::diffcore::{
    load_checkpoint, save_checkpoint, CheckpointMeta, DiffError, ParamStore,
};
use gridtalk_core::gridworld::{
    carve_blocks, generate_neighborhood, make_splits, sample_episode, GridError, GridMap,
    SplitSpec,
};
use gridtalk_core::localizer::{build_localizer, LocalizerContext};
use gridtalk_core::oracle::{bayes_accuracy, ChannelContent, OracleError};
use gridtalk_core::protocol::{run_suite, ProtocolConfig, ProtocolError};
use gridtalk_core::report::{assemble, curves_csv, load_run_records, render_csv, render_text, ReportError, RunRecord};
use gridtalk_core::trainer::{
    evaluate_localization, predict_distribution, train as train_model, EvalSet, ModelSpec,
    PredictionMode, TrainError,
};
use gridtalk_core::{derive_seed, TOOL_VERSION};

use crate::CommonArgs;

/// Command failure with the exit code it maps to: 2 for validation
/// problems (bad config, schema, infeasible request), 3 for runtime
/// failures (io, training, evaluation).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        match e {
            ConfigError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::BadSettings(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> CliError {
        match e {
            OracleError::TooLarge(_, _) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> CliError {
        match e {
            ProtocolError::BadConfig(_) | ProtocolError::Localizer(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> CliError {
        match e {
            ReportError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::load(common.config.as_deref(), &common.overrides)?)
}

fn maps_dir(out: &Path) -> PathBuf {
    out.join("maps")
}

fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

fn results_dir(out: &Path) -> PathBuf {
    out.join("results")
}

fn load_suite_checked(out: &Path, cfg: &ExperimentConfig) -> Result<SplitSpec, CliError> {
    let dir = maps_dir(out);
    if !dir.join("splits.json").is_file() {
        return Err(CliError::Validation(format!(
            "no map suite under {}; run `gridtalk gen-maps` first",
            dir.display()
        )));
    }
    let (spec, meta) = load_map_suite(&dir)?;
    if meta.suite_hash != cfg.suite_hash() {
        return Err(CliError::Validation(format!(
            "map suite on disk was generated from a different config \
             (suite hash {} vs {}); regenerate or fix the config",
            meta.suite_hash,
            cfg.suite_hash()
        )));
    }
    Ok(spec)
}

fn split_maps<'s>(spec: &'s SplitSpec, name: &str) -> Result<&'s [GridMap], CliError> {
    match name {
        "train" => Ok(&spec.train),
        "valid" => Ok(&spec.valid),
        "test" => Ok(&spec.test),
        other => Err(CliError::Validation(format!(
            "unknown split {other:?}; expected train, valid or test"
        ))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-maps
// ---------------------------------------------------------------------------

pub fn gen_maps(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let out = common.out_root();

    let mut maps = Vec::new();
    for i in 0..cfg.mapgen.neighborhoods {
        let seed = derive_seed(cfg.seed, &format!("neighborhood-{i}"));
        let neighborhood = generate_neighborhood(&cfg.mapgen.gen, seed)?;
        match cfg.mapgen.blocks {
            Some((bw, bh)) => maps.extend(carve_blocks(&neighborhood, bw, bh)?),
            None => maps.push(neighborhood),
        }
    }
    let mut split_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "split"));
    let spec = make_splits(&maps, cfg.split, &mut split_rng)?;
    write_map_suite(&maps_dir(&out), &spec, &cfg.meta())?;
    println!(
        "generated {} maps ({} train / {} valid / {} test) under {}",
        maps.len(),
        spec.train.len(),
        spec.valid.len(),
        spec.test.len(),
        maps_dir(&out).display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let out = common.out_root();
    let spec = load_suite_checked(&out, &cfg)?;

    let outcome = train_model(&cfg.train, &spec)?;
    let run_id = cfg.run_id();
    let dir = runs_dir(&out).join(&run_id);
    std::fs::create_dir_all(&dir)?;

    let ckpt_meta = CheckpointMeta::new(TOOL_VERSION, &cfg.config_hash(), cfg.train.seed)
        .with_extra(serde_json::json!({ "model": cfg.train.model, "run_id": run_id }));
    save_checkpoint(&outcome.store, &ckpt_meta, &dir.join("checkpoint.bin"))?;

    let record = RunRecord { meta: cfg.meta(), run_id: run_id.clone(), report: outcome.report };
    let mut report_json =
        serde_json::to_string_pretty(&record).map_err(|e| CliError::Runtime(e.to_string()))?;
    report_json.push('\n');
    write_text(&dir.join("report.json"), &report_json)?;
    write_text(&dir.join("curves.csv"), &curves_csv(&record.meta, &record.report))?;

    println!(
        "{run_id}: best epoch {} | train {:.2}% valid {:.2}% test {:.2}% | bound {:.2}%",
        record.report.best_epoch,
        100.0 * record.report.train_acc,
        100.0 * record.report.valid_acc,
        100.0 * record.report.test_acc,
        100.0 * record.report.bayes_bound
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-loc
// ---------------------------------------------------------------------------

/// Loads a checkpoint with the model architecture it was trained as.
fn load_model(path: &Path) -> Result<(ParamStore, ModelSpec, CheckpointMeta), CliError> {
    let (store, meta) = load_checkpoint(path)?;
    let spec: ModelSpec = serde_json::from_value(meta.extra.get("model").cloned().ok_or_else(
        || {
            CliError::Validation(format!(
                "{} carries no model architecture block",
                path.display()
            ))
        },
    )?)
    .map_err(|e| CliError::Validation(format!("bad model block in {}: {e}", path.display())))?;
    Ok((store, spec, meta))
}

pub fn eval_loc(
    common: &CommonArgs,
    checkpoint: &Path,
    split: &str,
    t: Option<usize>,
    episodes: usize,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let out = common.out_root();
    let suite = load_suite_checked(&out, &cfg)?;
    let maps = split_maps(&suite, split)?;
    let (store, mut spec, _meta) = load_model(checkpoint)?;
    if let Some(t) = t {
        if t > spec.t {
            return Err(CliError::Validation(format!(
                "requested T {t} exceeds the checkpoint's maximum {}",
                spec.t
            )));
        }
        spec.t = t;
    }

    let mut pool_rng =
        ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, &format!("eval-loc-{split}")));
    let set = EvalSet::sample(maps, episodes, spec.t, &mut pool_rng);
    let mut eval_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "eval-loc-rng"));
    let acc = evaluate_localization(&store, &spec, &set, PredictionMode::Argmax, &mut eval_rng)?;
    let mut bound = 0.0;
    for map in maps {
        bound += bayes_accuracy(map, spec.t, spec.content())?.value();
    }
    bound /= maps.len() as f64;
    println!(
        "split={split} t={} channel={} masc={} accuracy={:.4} upper={:.4} episodes={episodes}",
        spec.t,
        spec.channel.as_str(),
        spec.masc_on,
        acc,
        bound
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// upper-bound
// ---------------------------------------------------------------------------

pub fn upper_bound(common: &CommonArgs, t_list: &[usize], content: &str) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let out = common.out_root();
    let suite = load_suite_checked(&out, &cfg)?;
    let contents: Vec<ChannelContent> = match content {
        "obs" => vec![ChannelContent::ObsOnly],
        "obs-act" => vec![ChannelContent::ObsAndActions],
        "both" => vec![ChannelContent::ObsOnly, ChannelContent::ObsAndActions],
        other => {
            return Err(CliError::Validation(format!(
                "unknown content {other:?}; expected obs, obs-act or both"
            )))
        }
    };

    let meta = cfg.meta();
    let mut csv = format!(
        "# gridtalk {} config_hash={} suite_hash={} seed={}\n",
        meta.tool_version, meta.config_hash, meta.suite_hash, meta.seed
    );
    csv.push_str("split,map_id,t,content,accuracy\n");
    for (split, maps) in
        [("train", &suite.train), ("valid", &suite.valid), ("test", &suite.test)]
    {
        for map in maps {
            for &t in t_list {
                for &c in &contents {
                    let acc = bayes_accuracy(map, t, c)?;
                    csv.push_str(&format!(
                        "{split},{},{t},{},{:.6}\n",
                        map.map_id(),
                        c.as_str(),
                        acc.value()
                    ));
                }
            }
        }
    }
    let path = results_dir(&out).join("upper_bounds.csv");
    write_text(&path, &csv)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// full-task
// ---------------------------------------------------------------------------

pub fn full_task(common: &CommonArgs, localizers: &[String], split: &str) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let out = common.out_root();
    let suite = load_suite_checked(&out, &cfg)?;
    let maps = split_maps(&suite, split)?;

    let selected: Vec<String> = if localizers.is_empty() {
        cfg.protocol.localizers.clone()
    } else {
        localizers.to_vec()
    };

    let meta = cfg.meta();
    let mut csv = format!(
        "# gridtalk {} config_hash={} suite_hash={} seed={}\n",
        meta.tool_version, meta.config_hash, meta.suite_hash, meta.seed
    );
    csv.push_str(
        "experiment_id,localizer,channel,masc,t,split,success_rate,ci95,mean_steps,n_episodes,seed\n",
    );
    for selector in &selected {
        let (kind, ckpt) = match selector.split_once('=') {
            Some((k, path)) => (k, Some(PathBuf::from(path))),
            None => (selector.as_str(), None),
        };
        let mut t = cfg.train.model.t;
        let mut channel = String::from("-");
        let mut masc = String::from("-");
        let mut ctx = LocalizerContext { t, model: None };
        if kind == "model" {
            let path = ckpt.ok_or_else(|| {
                CliError::Validation(
                    "the model localizer needs a checkpoint: --localizer model=<path>".into(),
                )
            })?;
            let (store, spec, _meta) = load_model(&path)?;
            t = spec.t;
            channel = spec.channel.as_str().to_string();
            masc = spec.masc_on.to_string();
            ctx = LocalizerContext { t, model: Some((store, spec)) };
        } else if ckpt.is_some() {
            return Err(CliError::Validation(format!(
                "localizer {kind:?} does not take a checkpoint"
            )));
        }
        let mut localizer = build_localizer(kind, &mut ctx)?;
        let protocol = ProtocolConfig {
            t,
            maxsteps: cfg.protocol.maxsteps,
            attempts: cfg.protocol.attempts,
            mode: cfg.protocol.mode,
        };
        let row = run_suite(
            localizer.as_mut(),
            maps,
            cfg.protocol.n_episodes,
            &protocol,
            derive_seed(cfg.seed, &format!("full-task-{split}-{selector}")),
        )?;
        let steps = row.mean_steps.map_or(String::from(""), |s| format!("{s:.2}"));
        csv.push_str(&format!(
            "{},{},{channel},{masc},{t},{split},{:.4},{:.4},{steps},{},{}\n",
            cfg.run_id(),
            row.localizer,
            row.success_rate,
            row.ci95,
            row.n_episodes,
            cfg.seed
        ));
        println!(
            "{:<16} split={split} t={t} success={:.2}% +-{:.2} steps={} n={}",
            row.localizer,
            100.0 * row.success_rate,
            100.0 * row.ci95,
            row.mean_steps.map_or("-".into(), |s| format!("{s:.1}")),
            row.n_episodes
        );
    }
    write_text(&results_dir(&out).join("full_task.csv"), &csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-masc
// ---------------------------------------------------------------------------

pub fn dump_masc(common: &CommonArgs, checkpoint: &Path, episodes: usize) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let out = common.out_root();
    let suite = load_suite_checked(&out, &cfg)?;
    let (store, spec, _meta) = load_model(checkpoint)?;
    if !spec.masc_on {
        return Err(CliError::Validation(
            "this checkpoint was trained without masking; nothing to dump".into(),
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "dump-masc"));
    let mut lines = Vec::with_capacity(episodes + 1);
    lines.push(
        serde_json::json!({ "meta": cfg.meta() })
            .to_string(),
    );
    for i in 0..episodes {
        let map = &suite.test[i % suite.test.len()];
        let ep = sample_episode(map, spec.t, &mut rng);
        let (dist, masks) =
            predict_distribution(&store, &spec, &ep.observations, &ep.actions, map, &mut rng)?;
        let predicted = map.cell_coords(gridtalk_core::trainer::argmax(&dist));
        let masks_3x3: Vec<Vec<Vec<f64>>> = masks
            .iter()
            .map(|m| (0..3).map(|i| m[i * 3..(i + 1) * 3].to_vec()).collect())
            .collect();
        lines.push(
            serde_json::json!({
                "episode_id": i,
                "map_id": map.map_id(),
                "actions": ep.actions,
                "masks": masks_3x3,
                "predicted": predicted,
                "target": ep.target,
            })
            .to_string(),
        );
    }
    let path = results_dir(&out).join("masc_dump.jsonl");
    write_text(&path, &(lines.join("\n") + "\n"))?;
    println!("wrote {} mask trajectories to {}", episodes, path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn report(common: &CommonArgs, mixed_ok: bool) -> Result<(), CliError> {
    let out = common.out_root();
    let records = load_run_records(&runs_dir(&out))?;
    let table = assemble(&records, mixed_ok)?;
    write_text(&results_dir(&out).join("report.csv"), &render_csv(&table))?;
    let text = render_text(&table);
    write_text(&results_dir(&out).join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
