//! Experiment logs: append-only JSONL records and their aggregation.
//!
//! Each growing run writes one log file per (method, seed). A record is
//! either a phase boundary (the loss and size after that phase's fine-tune)
//! or one candidate's fate inside a grow step. Aggregation keys on
//! (method, phase), uses boundary records only, and reports mean and sample
//! standard deviation of the loss over seeds, which is exactly what the
//! loss-versus-neurons comparison tables plot.
//!
//! Records carry their own `method` and `seed`, so a report can be built
//! from any collection of log files regardless of directory layout. Files
//! are written line by line and flushed per line: a crashed run leaves a
//! parseable prefix.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One line of a growth log.
///
/// Boundary records have `kind: "boundary"` and no candidate fields; their
/// `loss_before` and `loss_after` both hold the boundary loss. Candidate
/// records describe one gate of one grow step, with the step's overall
/// losses.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GrowthRecord {
    pub method: String,
    pub seed: u64,
    pub phase: usize,
    /// What the step could change: "width", "depth", or "both".
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<usize>,
    /// "boundary", "split", "new-neuron", or "layer-neuron".
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<bool>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub neurons: usize,
    pub params: usize,
}

impl GrowthRecord {
    pub fn boundary(
        method: &str,
        seed: u64,
        phase: usize,
        mode: &str,
        loss: f64,
        neurons: usize,
        params: usize,
    ) -> Self {
        GrowthRecord {
            method: method.to_string(),
            seed,
            phase,
            mode: mode.to_string(),
            candidate_id: None,
            kind: "boundary".to_string(),
            score: None,
            selected: None,
            loss_before: loss,
            loss_after: loss,
            neurons,
            params,
        }
    }

    pub fn is_boundary(&self) -> bool {
        self.kind == "boundary"
    }
}

/// One line of a continual-learning log: the state after one growth round
/// of one task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClRecord {
    pub seed: u64,
    pub task_id: usize,
    pub round: usize,
    pub neurons_added_copy: usize,
    pub neurons_added_new: usize,
    pub master_params: usize,
    pub train_acc: f64,
    /// Accuracy on every task seen so far, index = task id.
    pub eval_acc_per_task: Vec<f64>,
}

/// Append-only JSONL writer; one `write` call per record, flushed.
pub struct LogWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(path)?;
        Ok(LogWriter {
            file: std::io::BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = crate::jsonfmt::to_string(record)?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads a JSONL file of `T`, reporting the offending line on corruption.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| {
            Error::contract(format!("{}:{}: corrupt record: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// All growth records under `dir` (any depth), in sorted path order.
pub fn read_growth_logs(dir: &Path) -> Result<Vec<GrowthRecord>> {
    let mut paths = Vec::new();
    collect_jsonl_paths(dir, &mut paths)?;
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_jsonl::<GrowthRecord>(&p)?);
    }
    Ok(records)
}

fn collect_jsonl_paths(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_jsonl_paths(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

/// One aggregate row: loss statistics over seeds at one phase boundary.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub phase: usize,
    /// Mean neuron count over seeds (integral whenever all seeds agree).
    pub neurons: f64,
    pub mean_loss: f64,
    pub stddev_loss: f64,
    pub seeds: usize,
}

/// Mean and sample standard deviation (n - 1 denominator; zero for n = 1).
pub fn mean_stddev(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "no values to aggregate");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates boundary records by (method, phase); candidate records are
/// ignored. Rows come out sorted by method then phase.
pub fn aggregate(records: &[GrowthRecord]) -> Vec<AggregateRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, usize), Vec<&GrowthRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_boundary()) {
        groups
            .entry((r.method.clone(), r.phase))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, phase), group)| {
            let losses: Vec<f64> = group.iter().map(|r| r.loss_after).collect();
            let (mean_loss, stddev_loss) = mean_stddev(&losses);
            let neurons =
                group.iter().map(|r| r.neurons as f64).sum::<f64>() / group.len() as f64;
            AggregateRow {
                method,
                phase,
                neurons,
                mean_loss,
                stddev_loss,
                seeds: group.len(),
            }
        })
        .collect()
}

/// Renders aggregate rows as CSV (header + one row per group).
pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("method,phase,neurons,mean_loss,stddev_loss,seeds\n");
    for r in rows {
        let neurons = if r.neurons.fract() == 0.0 {
            format!("{}", r.neurons as u64)
        } else {
            format!("{:.16e}", r.neurons)
        };
        s.push_str(&format!(
            "{},{},{},{:.16e},{:.16e},{}\n",
            r.method, r.phase, neurons, r.mean_loss, r.stddev_loss, r.seeds
        ));
    }
    s
}

/// Renders aggregate rows as a JSON array.
pub fn aggregate_json(rows: &[AggregateRow]) -> Result<String> {
    let mut s = crate::jsonfmt::to_string_pretty(&rows)?;
    s.push('\n');
    Ok(s)
}
