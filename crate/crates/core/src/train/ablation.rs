use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::trainer::{train, TrainConfig};
use crate::benchmark::{evaluate_encoder, EvalSettings, EvalTasks, MetricsReport, TaskSelection};
use crate::citegraph::{generate_corpus, CorpusGraph, CorpusSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// One row group of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub label: String,
    #[serde(rename = "K")]
    pub num_cls: usize,
    pub lambda: f64,
    pub injections_enabled: bool,
    pub reparam_enabled: bool,
}

impl CellSpec {
    fn new(
        label: &str,
        num_cls: usize,
        lambda: f64,
        injections_enabled: bool,
        reparam_enabled: bool,
    ) -> Self {
        Self {
            label: label.into(),
            num_cls,
            lambda,
            injections_enabled,
            reparam_enabled,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.num_cls == 3 && self.lambda == 0.1 && self.injections_enabled && self.reparam_enabled
    }

    pub fn apply(&self, base: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            num_cls: self.num_cls,
            lambda: self.lambda,
            injections_enabled: self.injections_enabled,
            reparam_enabled: self.reparam_enabled,
            ..base.clone()
        }
    }
}

/// Baseline plus the λ sweep, the K sweep, and the two component ablations.
pub fn default_cells() -> Vec<CellSpec> {
    vec![
        CellSpec::new("baseline", 3, 0.1, true, true),
        CellSpec::new("lambda_0", 3, 0.0, true, true),
        CellSpec::new("lambda_0.5", 3, 0.5, true, true),
        CellSpec::new("lambda_1", 3, 1.0, true, true),
        CellSpec::new("one_cls", 1, 0.1, true, true),
        CellSpec::new("five_cls", 5, 0.1, true, true),
        CellSpec::new("no_injection", 3, 0.1, false, true),
        CellSpec::new("no_reparam", 3, 0.1, true, false),
    ]
}

/// Everything an ablation run needs besides the seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub corpus: CorpusSpec,
    pub corpus_seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    /// Seed for benchmark task construction, shared by every cell.
    pub eval_seed: u64,
    pub cells: Vec<CellSpec>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            corpus_seed: 0,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            eval_seed: 0,
            cells: default_cells(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub err_reduction_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub spec: CellSpec,
    pub reports: Vec<MetricsReport>,
    pub summary: Vec<MetricSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub base_lr: f64,
    pub cells: Vec<AblationCell>,
}

/// Mean and standard error of the mean (sample standard deviation over √n).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `100 · (err_base − err_cell) / err_base` with `err = 1 − metric`.
pub fn error_reduction_pct(baseline: f64, cell: f64) -> f64 {
    let err_base = 1.0 - baseline;
    if err_base == 0.0 {
        return 0.0;
    }
    100.0 * (err_base - (1.0 - cell)) / err_base
}

/// Aggregates per-seed reports of every cell against the baseline cell.
pub fn summarize(
    cells: Vec<(CellSpec, Vec<MetricsReport>)>,
    base_lr: f64,
) -> Result<AblationReport> {
    let base_index = cells
        .iter()
        .position(|(s, _)| s.is_baseline())
        .ok_or_else(|| {
            Error::config("grid has no baseline cell (K=3, lambda=0.1, injections and reparam on)")
        })?;
    let stats = |reports: &[MetricsReport]| -> Result<Vec<(String, String, f64, f64)>> {
        let first = reports
            .first()
            .ok_or_else(|| Error::input("cell without seed reports"))?;
        first
            .values
            .iter()
            .map(|v| {
                let per_seed = reports
                    .iter()
                    .map(|r| r.get(&v.task, &v.metric))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| {
                        Error::input(format!("{} {} missing in a seed report", v.task, v.metric))
                    })?;
                let (mean, se) = mean_stderr(&per_seed);
                Ok((v.task.clone(), v.metric.clone(), mean, se))
            })
            .collect()
    };
    let base_stats = stats(&cells[base_index].1)?;
    let mut out = Vec::with_capacity(cells.len());
    for (spec, reports) in cells {
        let summary = stats(&reports)?
            .into_iter()
            .map(|(task, metric, mean, stderr)| {
                let base = base_stats
                    .iter()
                    .find(|b| b.0 == task && b.1 == metric)
                    .map(|b| b.2)
                    .ok_or_else(|| Error::input(format!("baseline lacks {task} {metric}")))?;
                Ok(MetricSummary {
                    err_reduction_pct: error_reduction_pct(base, mean),
                    task,
                    metric,
                    mean,
                    stderr,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(AblationCell {
            spec,
            reports,
            summary,
        });
    }
    Ok(AblationReport {
        base_lr,
        cells: out,
    })
}

/// Reference optimizer learning rate that desk-scale runs override.
pub const REFERENCE_LR: f64 = 2e-5;

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.base_lr != REFERENCE_LR {
            writeln!(
                out,
                "# desk-scale override: base_lr={} (reference {REFERENCE_LR})",
                self.base_lr
            )
            .unwrap();
        }
        out.push_str("variant,K,lambda,metric,mean,stderr,err_reduction_pct\n");
        for cell in &self.cells {
            for m in &cell.summary {
                writeln!(
                    out,
                    "{},{},{},{}_{},{:.6},{:.6},{:.2}",
                    cell.spec.label,
                    cell.spec.num_cls,
                    cell.spec.lambda,
                    m.task,
                    m.metric,
                    m.mean,
                    m.stderr,
                    m.err_reduction_pct
                )
                .unwrap();
            }
        }
        out
    }

    pub fn cell(&self, label: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.spec.label == label)
    }
}

/// Trains and evaluates every (cell, seed) pair sequentially.
///
/// `progress` is called after each run with the cell label, seed, and report.
pub fn run_ablation(
    grid: &AblationGrid,
    seeds: &[u64],
    selection: TaskSelection,
    mut progress: impl FnMut(&CellSpec, u64, &MetricsReport),
) -> Result<AblationReport> {
    if grid.cells.is_empty() || seeds.is_empty() {
        return Err(Error::config(
            "ablation needs at least one cell and one seed",
        ));
    }
    let graph = generate_corpus(&grid.corpus, grid.corpus_seed)?;
    let tasks = EvalTasks::build(&graph, selection, &grid.eval, grid.eval_seed)?;
    let mut cells = Vec::with_capacity(grid.cells.len());
    for spec in &grid.cells {
        let encoder = spec.apply(&grid.encoder);
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let report = train_and_evaluate(&encoder, &grid.train, &graph, &tasks, seed)?;
            progress(spec, seed, &report);
            reports.push(report);
        }
        cells.push((spec.clone(), reports));
    }
    summarize(cells, grid.train.base_lr)
}

/// One training run followed by evaluation on prebuilt tasks.
pub fn train_and_evaluate(
    encoder: &EncoderConfig,
    train_config: &TrainConfig,
    graph: &CorpusGraph,
    tasks: &EvalTasks,
    seed: u64,
) -> Result<MetricsReport> {
    let outcome = train(encoder, train_config, graph, seed)?;
    evaluate_encoder(&outcome.params, encoder, graph, tasks, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::MetricValue;

    fn report(seed: u64, map: f64) -> MetricsReport {
        MetricsReport {
            seed,
            fingerprint: String::new(),
            values: vec![MetricValue {
                task: "cite".into(),
                metric: "map".into(),
                value: map,
            }],
        }
    }

    #[test]
    fn error_reduction_example() {
        assert!((error_reduction_pct(0.75, 0.80) - 20.0).abs() < 1e-9);
        assert_eq!(error_reduction_pct(0.6, 0.6), 0.0);
    }

    #[test]
    fn mean_stderr_matches_direct_computation() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn summary_aggregates_every_seed_and_baseline_is_zero() {
        let cells = default_cells();
        let input: Vec<(CellSpec, Vec<MetricsReport>)> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    c.clone(),
                    (0..4)
                        .map(|s| report(s, 0.5 + 0.01 * (i as f64 + s as f64)))
                        .collect(),
                )
            })
            .collect();
        let r = summarize(input, 3e-4).unwrap();
        assert_eq!(r.cells.len(), 8);
        assert!(r.cells.iter().all(|c| c.reports.len() == 4));
        assert_eq!(
            r.cell("baseline").unwrap().summary[0].err_reduction_pct,
            0.0
        );
        let csv = r.to_csv();
        assert!(csv.starts_with("# desk-scale override: base_lr=0.0003"));
        assert!(csv.contains("\nbaseline,3,0.1,cite_map,0.515000,"));
        assert_eq!(csv.lines().count(), 2 + 8);
    }

    #[test]
    fn missing_baseline_rejected() {
        let spec = CellSpec::new("only", 1, 0.1, true, true);
        assert!(summarize(vec![(spec, vec![report(1, 0.5)])], 3e-4).is_err());
    }

    #[test]
    fn grid_json_defaults() {
        let g: AblationGrid = serde_json::from_str(r#"{"corpus_seed": 4}"#).unwrap();
        assert_eq!(g.corpus_seed, 4);
        assert_eq!(g.cells.len(), 8);
        assert!(serde_json::from_str::<AblationGrid>(r#"{"bogus": 1}"#).is_err());
    }
}
