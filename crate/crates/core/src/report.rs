//! Combined accuracy tables: collects per-run training reports and
//! renders rows of (walk length x masking x channel) against
//! train/valid/test accuracy and the exact upper bound.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunMeta;
use crate::tourist::Channel;
use crate::trainer::TrainReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed run record {path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error(
        "runs mix incompatible map suites ({0} vs {1}); rerun on one suite or pass --mixed-ok"
    )]
    MixedSuites(String, String),
    #[error("no run records found under {0}")]
    Empty(String),
}

/// What `train` persists per run: provenance plus the full report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub run_id: String,
    pub report: TrainReport,
}

/// Reads every `runs/*/report.json` under `runs_dir`, sorted by run id.
pub fn load_run_records(runs_dir: &Path) -> Result<Vec<RunRecord>, ReportError> {
    let mut records = Vec::new();
    if runs_dir.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(runs_dir)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for entry in entries {
            let path = entry.join("report.json");
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            let record: RunRecord = serde_json::from_str(&text).map_err(|e| {
                ReportError::Malformed { path: path.display().to_string(), detail: e.to_string() }
            })?;
            records.push(record);
        }
    }
    if records.is_empty() {
        return Err(ReportError::Empty(runs_dir.display().to_string()));
    }
    Ok(records)
}

/// One table row: seed-averaged accuracies for an architecture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TableRow {
    pub t: usize,
    pub masc: bool,
    pub channel: Channel,
    pub n_runs: usize,
    pub train_acc: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
    pub upper_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyTable {
    pub meta: RunMeta,
    pub rows: Vec<TableRow>,
}

/// Groups records by (T, masc, channel) and averages across seeds.
/// Records from different map suites are refused unless `allow_mixed`.
pub fn assemble(records: &[RunRecord], allow_mixed: bool) -> Result<AccuracyTable, ReportError> {
    let first = &records[0];
    if !allow_mixed {
        for r in records {
            if r.meta.suite_hash != first.meta.suite_hash {
                return Err(ReportError::MixedSuites(
                    first.meta.suite_hash.clone(),
                    r.meta.suite_hash.clone(),
                ));
            }
        }
    }
    let mut groups: Vec<((usize, bool, Channel), Vec<&RunRecord>)> = Vec::new();
    for r in records {
        let m = &r.report.settings.model;
        let key = (m.t, m.masc_on, m.channel);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups.sort_by_key(|((t, masc, channel), _)| (*t, *masc, *channel == Channel::Discrete));
    let rows = groups
        .into_iter()
        .map(|((t, masc, channel), rs)| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&RunRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            TableRow {
                t,
                masc,
                channel,
                n_runs: rs.len(),
                train_acc: mean(&|r| r.report.train_acc),
                valid_acc: mean(&|r| r.report.valid_acc),
                test_acc: mean(&|r| r.report.test_acc),
                upper_bound: mean(&|r| r.report.bayes_bound),
            }
        })
        .collect();
    Ok(AccuracyTable { meta: first.meta.clone(), rows })
}

fn meta_comment(meta: &RunMeta) -> String {
    format!(
        "# gridtalk {} config_hash={} suite_hash={} seed={}\n",
        meta.tool_version, meta.config_hash, meta.suite_hash, meta.seed
    )
}

pub fn render_csv(table: &AccuracyTable) -> String {
    let mut out = meta_comment(&table.meta);
    out.push_str("t,masc,channel,n_runs,train_acc,valid_acc,test_acc,upper_bound\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.t,
            r.masc,
            r.channel.as_str(),
            r.n_runs,
            r.train_acc,
            r.valid_acc,
            r.test_acc,
            r.upper_bound
        ));
    }
    out
}

pub fn render_text(table: &AccuracyTable) -> String {
    let mut out = meta_comment(&table.meta);
    out.push_str(&format!(
        "{:>3} {:>6} {:>11} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
        "T", "masc", "channel", "runs", "train", "valid", "test", "upper"
    ));
    for r in &table.rows {
        out.push_str(&format!(
            "{:>3} {:>6} {:>11} {:>6} {:>8.2}% {:>8.2}% {:>8.2}% {:>8.2}%\n",
            r.t,
            if r.masc { "yes" } else { "no" },
            r.channel.as_str(),
            r.n_runs,
            100.0 * r.train_acc,
            100.0 * r.valid_acc,
            100.0 * r.test_acc,
            100.0 * r.upper_bound
        ));
    }
    out
}

/// Per-epoch curves as CSV, headed by the provenance comment.
pub fn curves_csv(meta: &RunMeta, report: &TrainReport) -> String {
    let mut out = meta_comment(meta);
    out.push_str("epoch,train_loss,train_acc,valid_acc\n");
    for row in &report.curves {
        out.push_str(&format!(
            "{},{:.6},{:.4},{:.4}\n",
            row.epoch, row.train_loss, row.train_acc, row.valid_acc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::AdamParams;
    use crate::trainer::{EpochRow, ModelSpec, TrainSettings};

    fn record(channel: Channel, masc: bool, t: usize, seed: u64, suite: &str, acc: f64) -> RunRecord {
        let settings = TrainSettings {
            model: ModelSpec { channel, masc_on: masc, t, dim: 8 },
            epochs: 1,
            batches_per_epoch: 1,
            batch_size: 1,
            adam: AdamParams::default(),
            seed,
            patience: None,
            clip_norm: None,
            valid_episodes: 1,
            test_episodes: 1,
        };
        RunRecord {
            meta: RunMeta {
                tool_version: "t".into(),
                config_hash: format!("c{seed}"),
                suite_hash: suite.into(),
                seed: 1,
            },
            run_id: format!("run-{seed}"),
            report: TrainReport {
                settings,
                curves: vec![EpochRow { epoch: 0, train_loss: 1.0, train_acc: acc, valid_acc: acc }],
                best_epoch: 0,
                train_acc: acc,
                valid_acc: acc,
                test_acc: acc,
                bayes_bound: 0.9,
                test_ci: 0.01,
            },
        }
    }

    #[test]
    fn assemble_averages_across_seeds_and_sorts_rows() {
        let records = vec![
            record(Channel::Discrete, true, 1, 1, "s", 0.5),
            record(Channel::Continuous, true, 1, 1, "s", 0.6),
            record(Channel::Continuous, true, 1, 2, "s", 0.8),
            record(Channel::Continuous, false, 1, 1, "s", 0.3),
            record(Channel::Continuous, true, 0, 1, "s", 0.2),
        ];
        let table = assemble(&records, false).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!((table.rows[0].t, table.rows[0].masc), (0, true));
        let cont_masc_t1 = table
            .rows
            .iter()
            .find(|r| r.t == 1 && r.masc && r.channel == Channel::Continuous)
            .unwrap();
        assert_eq!(cont_masc_t1.n_runs, 2);
        assert!((cont_masc_t1.test_acc - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mixed_suites_are_refused_without_override() {
        let records = vec![
            record(Channel::Continuous, true, 1, 1, "suite-a", 0.5),
            record(Channel::Continuous, true, 1, 2, "suite-b", 0.6),
        ];
        assert!(matches!(assemble(&records, false), Err(ReportError::MixedSuites(_, _))));
        assert!(assemble(&records, true).is_ok());
    }

    #[test]
    fn renders_embed_provenance() {
        let records = vec![record(Channel::Continuous, true, 1, 1, "s", 0.5)];
        let table = assemble(&records, false).unwrap();
        for text in [render_csv(&table), render_text(&table)] {
            assert!(text.starts_with("# gridtalk"));
            assert!(text.contains("config_hash="));
            assert!(text.contains("seed=1"));
        }
        let csv = render_csv(&table);
        assert!(csv.contains("1,true,continuous,1,0.5000,0.5000,0.5000,0.9000"));
    }
}
