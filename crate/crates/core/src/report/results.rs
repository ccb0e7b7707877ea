//! Result files of a run and their aggregation.
//!
//! A run directory holds:
//!
//! * `result.json`: configuration echo, accuracy matrix, ACC, FGT, final
//!   per-task accuracies and wall time.
//! * `curves.csv`: one row per training step with the accuracy of every
//!   task seen so far, the running ACC and the running FGT.
//! * `log.ndjson`: one record per batch and one per task boundary.
//! * `attention.evln` (optional): attention maps of the final model on the
//!   first test images, in the binary tensor container.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSequence};
use crate::engine::{run_sequence, LogRecord, RunOutput};
use crate::error::{io_at, Error, Result};
use crate::nn::{encode, IncrementalModel, STAGES};
use crate::tensor::{Rng, Tensor};

use super::config::RunConfig;
use super::metrics::{acc, fgt, AccuracyMatrix, FGT_DEFINITION};

pub const RESULT_FORMAT: &str = "evln-result-1";
pub const RESULT_FILE: &str = "result.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const LOG_FILE: &str = "log.ndjson";
pub const ATTENTION_FILE: &str = "attention.evln";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub format: String,
    /// Groups runs in aggregate reports, e.g. an ablation row or a λ value.
    pub label: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Class ids of every task, in training order.
    pub tasks: Vec<Vec<usize>>,
    pub matrix: AccuracyMatrix,
    pub acc: f64,
    pub fgt: f64,
    pub fgt_definition: String,
    pub final_accuracies: Vec<f64>,
    pub wall_time_s: f64,
}

impl RunResult {
    pub fn new(label: &str, cfg: &RunConfig, tasks: &TaskSequence, matrix: AccuracyMatrix, wall_time_s: f64) -> Self {
        RunResult {
            format: RESULT_FORMAT.into(),
            label: label.into(),
            seed: cfg.seed,
            config: cfg.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            tasks: tasks.tasks().iter().map(|t| t.classes.clone()).collect(),
            acc: acc(&matrix),
            fgt: fgt(&matrix),
            fgt_definition: FGT_DEFINITION.into(),
            final_accuracies: matrix.last_row().map(<[f64]>::to_vec).unwrap_or_default(),
            matrix,
            wall_time_s,
        }
    }

    /// The configuration this result was produced with.
    pub fn run_config(&self) -> Result<RunConfig> {
        let text: String = self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        RunConfig::parse(&text)
    }
}

/// A finished run with everything needed to write its files.
pub struct Experiment {
    pub result: RunResult,
    pub output: RunOutput,
    pub dataset: Dataset,
    pub tasks: TaskSequence,
}

/// Prepares the data, trains the whole sequence and summarizes it.
pub fn run_experiment(cfg: &RunConfig, label: &str) -> Result<Experiment> {
    cfg.validate()?;
    let start = Instant::now();
    let (dataset, tasks) = cfg.prepare()?;
    let output = run_sequence(&dataset, &tasks, &cfg.train, &cfg.optimizer, &mut Rng::new(cfg.seed))?;
    let result = RunResult::new(label, cfg, &tasks, output.matrix.clone(), start.elapsed().as_secs_f64());
    Ok(Experiment {
        result,
        output,
        dataset,
        tasks,
    })
}

/// `curves.csv` text: one row per step.
pub fn curves_csv(matrix: &AccuracyMatrix) -> String {
    let t = matrix.steps();
    let mut out = String::from("step");
    for j in 0..t {
        write!(out, ",task_{}", j + 1).unwrap();
    }
    out.push_str(",acc,fgt\n");
    for (i, row) in matrix.rows().iter().enumerate() {
        write!(out, "{}", i + 1).unwrap();
        for j in 0..t {
            match row.get(j) {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        let prefix = matrix.prefix(i + 1);
        writeln!(out, ",{},{}", acc(&prefix), fgt(&prefix)).unwrap();
    }
    out
}

/// Attention maps of `model` on the first `count` test images, one entry
/// per stage plus the images themselves.
pub fn attention_dump(model: &IncrementalModel, ds: &Dataset, count: usize) -> Result<Vec<(String, Tensor)>> {
    let idx: Vec<usize> = ds.test().iter().copied().take(count).collect();
    let (x, labels) = ds.gather(&idx)?;
    let out = model.infer(&x)?;
    let mut entries = vec![
        ("images".to_string(), x),
        (
            "labels".to_string(),
            Tensor::new(&[labels.len()], labels.iter().map(|&l| l as f64).collect())?,
        ),
    ];
    for (s, a) in out.attn.into_iter().enumerate().take(STAGES) {
        entries.push((format!("stage{}", s + 1), a));
    }
    Ok(entries)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_at(path, e))
}

/// Writes the files of one run into `dir`, creating it if needed.
pub fn write_results(
    dir: &Path,
    result: &RunResult,
    logs: &[LogRecord],
    attention: Option<&[(String, Tensor)]>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    let mut json = serde_json::to_string_pretty(result).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_file(&dir.join(RESULT_FILE), json.as_bytes())?;
    write_file(&dir.join(CURVES_FILE), curves_csv(&result.matrix).as_bytes())?;
    let mut log = String::new();
    for record in logs {
        log.push_str(&serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?);
        log.push('\n');
    }
    write_file(&dir.join(LOG_FILE), log.as_bytes())?;
    if let Some(entries) = attention {
        let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_file(&dir.join(ATTENTION_FILE), &encode(&refs))?;
    }
    Ok(())
}

/// Writes every file of a finished experiment.
pub fn write_experiment(dir: &Path, cfg: &RunConfig, exp: &Experiment) -> Result<()> {
    let attention = match cfg.attention_dump {
        0 => None,
        n => Some(attention_dump(&exp.output.model, &exp.dataset, n)?),
    };
    write_results(dir, &exp.result, &exp.output.logs, attention.as_deref())
}

/// Reads a `result.json` and checks that its summaries match its matrix.
pub fn read_result(path: &Path) -> Result<RunResult> {
    let text = fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    let r: RunResult =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if r.format != RESULT_FORMAT {
        return Err(Error::Format(format!("{}: unknown result format {:?}", path.display(), r.format)));
    }
    AccuracyMatrix::from_rows(r.matrix.rows().to_vec())?;
    Ok(r)
}

/// Every `result.json` below `root`, sorted by path.
pub fn find_results(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(io_at(root, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_type().is_file() && entry.file_name() == RESULT_FILE {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

/// Mean and population standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs sharing a label, summarized.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub label: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub fgt_mean: f64,
    pub fgt_std: f64,
    /// Per step, the running ACC and FGT averaged over runs with that many steps.
    pub curve: Vec<(f64, f64)>,
}

/// Groups results by label, in order of first appearance.
pub fn summarize(results: &[RunResult]) -> Vec<Summary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunResult> = results.iter().filter(|r| r.label == label).collect();
            let accs: Vec<f64> = group.iter().map(|r| r.acc).collect();
            let fgts: Vec<f64> = group.iter().map(|r| r.fgt).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let (fgt_mean, fgt_std) = mean_std(&fgts);
            let steps = group.iter().map(|r| r.matrix.steps()).max().unwrap_or(0);
            let curve = (1..=steps)
                .map(|s| {
                    let at: Vec<AccuracyMatrix> = group
                        .iter()
                        .filter(|r| r.matrix.steps() >= s)
                        .map(|r| r.matrix.prefix(s))
                        .collect();
                    let n = at.len() as f64;
                    (at.iter().map(acc).sum::<f64>() / n, at.iter().map(fgt).sum::<f64>() / n)
                })
                .collect();
            Summary {
                label: label.to_string(),
                runs: group.len(),
                acc_mean,
                acc_std,
                fgt_mean,
                fgt_std,
                curve,
            }
        })
        .collect()
}

pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut out = String::from("label,runs,acc_mean,acc_std,fgt_mean,fgt_std\n");
    for s in summaries {
        writeln!(out, "{},{},{},{},{},{}", s.label, s.runs, s.acc_mean, s.acc_std, s.fgt_mean, s.fgt_std).unwrap();
    }
    out
}

/// Long-format mean curves, one row per label and step.
pub fn summary_curves_csv(summaries: &[Summary]) -> String {
    let mut out = String::from("label,step,acc,fgt\n");
    for s in summaries {
        for (i, (a, f)) in s.curve.iter().enumerate() {
            writeln!(out, "{},{},{a},{f}", s.label, i + 1).unwrap();
        }
    }
    out
}

/// Human-readable table of summaries.
pub fn summary_table(summaries: &[Summary]) -> String {
    let width = summaries.iter().map(|s| s.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  runs  ACC              FGT\n", "label");
    for s in summaries {
        writeln!(
            out,
            "{:<width$}  {:>4}  {:.4} ± {:.4}  {:.4} ± {:.4}",
            s.label, s.runs, s.acc_mean, s.acc_std, s.fgt_mean, s.fgt_std
        )
        .unwrap();
    }
    out
}

/// Reads every result below `root` and writes `summary.csv` and
/// `summary_curves.csv` next to them.
pub fn aggregate(root: &Path) -> Result<Vec<Summary>> {
    let results = find_results(root)?
        .iter()
        .map(|p| read_result(p))
        .collect::<Result<Vec<_>>>()?;
    if results.is_empty() {
        return Err(Error::Data(format!("no {RESULT_FILE} found under {}", root.display())));
    }
    let summaries = summarize(&results);
    write_file(&root.join("summary.csv"), summary_csv(&summaries).as_bytes())?;
    write_file(&root.join("summary_curves.csv"), summary_curves_csv(&summaries).as_bytes())?;
    Ok(summaries)
}
