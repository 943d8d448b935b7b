use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{
    average_precision, macro_f1, mean_defined, ndcg, rank_candidates, sort_by_score,
};
use super::probe::fit_linear_probe;
use super::tasks::{
    build_classification_task, build_retrieval_task, ClassificationTask, RetrievalTask, TaskKind,
};
use crate::citegraph::CorpusGraph;
use crate::encoder::{encode, EmbeddingSet, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::simloss::pair_similarity;

/// Sizes and probe settings used to build and score the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub num_queries: usize,
    pub max_pos: usize,
    pub n_neg: usize,
    pub test_fraction: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Also rank retrieval pools by the blended multi-CLS similarity with this weight.
    pub diagnostic_lambda: Option<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            num_queries: 100,
            max_pos: 5,
            n_neg: 50,
            test_fraction: 0.5,
            probe_epochs: 200,
            probe_lr: 0.5,
            diagnostic_lambda: None,
        }
    }
}

/// Which benchmark tasks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSelection {
    pub cite: bool,
    pub cocite: bool,
    pub clf: bool,
}

impl TaskSelection {
    pub const ALL: Self = Self {
        cite: true,
        cocite: true,
        clf: true,
    };

    pub const RETRIEVAL: Self = Self {
        cite: true,
        cocite: true,
        clf: false,
    };

    /// Parses a comma-separated list such as `cite,cocite,clf`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut sel = Self {
            cite: false,
            cocite: false,
            clf: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "cite" => sel.cite = true,
                "cocite" => sel.cocite = true,
                "clf" => sel.clf = true,
                other => return Err(Error::input(format!("unknown task {other:?}"))),
            }
        }
        if !(sel.cite || sel.cocite || sel.clf) {
            return Err(Error::input("no tasks selected"));
        }
        Ok(sel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTasks {
    pub retrieval: Vec<RetrievalTask>,
    pub classification: Option<ClassificationTask>,
    pub settings: EvalSettings,
}

impl EvalTasks {
    pub fn build(
        graph: &CorpusGraph,
        selection: TaskSelection,
        settings: &EvalSettings,
        seed: u64,
    ) -> Result<Self> {
        let mut retrieval = Vec::new();
        for (on, kind) in [
            (selection.cite, TaskKind::Cite),
            (selection.cocite, TaskKind::Cocite),
        ] {
            if on {
                retrieval.push(build_retrieval_task(
                    graph,
                    kind,
                    settings.num_queries,
                    settings.max_pos,
                    settings.n_neg,
                    seed,
                )?);
            }
        }
        let classification = if selection.clf {
            Some(build_classification_task(
                graph,
                settings.test_fraction,
                seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            retrieval,
            classification,
            settings: settings.clone(),
        })
    }

    fn paper_ids(&self) -> BTreeSet<usize> {
        let mut ids = BTreeSet::new();
        for task in &self.retrieval {
            for q in &task.queries {
                ids.insert(q.query_id);
                ids.extend(q.positives.iter().chain(&q.negatives));
            }
        }
        if let Some(c) = &self.classification {
            ids.extend(c.train.iter().chain(&c.test).map(|x| x.0));
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricValue {
    pub task: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    /// Hex digest of the encoder configuration.
    pub fingerprint: String,
    pub values: Vec<MetricValue>,
}

impl MetricsReport {
    pub fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|v| v.task == task && v.metric == metric)
            .map(|v| v.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,seed,value\n");
        for v in &self.values {
            writeln!(out, "{},{},{},{:.6}", v.task, v.metric, self.seed, v.value).unwrap();
        }
        out
    }
}

/// FNV-1a over the JSON form of the config.
pub fn config_fingerprint(config: &EncoderConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let hash = json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    });
    format!("{hash:016x}")
}

/// Encodes every paper the tasks touch, with tokens truncated to `max_seq_len`.
pub fn encode_papers(
    params: &EncoderParams,
    config: &EncoderConfig,
    graph: &CorpusGraph,
    ids: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, EmbeddingSet>> {
    ids.into_iter()
        .map(|id| {
            if id >= graph.len() {
                return Err(Error::input(format!("paper {id} not in corpus")));
            }
            let tokens = &graph.paper(id).tokens;
            let tokens = &tokens[..tokens.len().min(config.max_seq_len)];
            Ok((id, encode(params, config, tokens)?))
        })
        .collect()
}

fn rank_blended(
    sets: &BTreeMap<usize, EmbeddingSet>,
    query_id: usize,
    pool: &[usize],
    lambda: f64,
) -> Result<Vec<usize>> {
    let q = &sets[&query_id];
    let mut scored = Vec::with_capacity(pool.len());
    for &id in pool {
        scored.push((pair_similarity(q, &sets[&id], lambda)?.value, id));
    }
    sort_by_score(&mut scored);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Scores retrieval tasks from precomputed pooled embeddings.
pub fn retrieval_metrics(
    pooled: &BTreeMap<usize, Vec<f64>>,
    task: &RetrievalTask,
) -> Result<(f64, f64)> {
    let mut aps = Vec::with_capacity(task.queries.len());
    let mut ndcgs = Vec::with_capacity(task.queries.len());
    for q in &task.queries {
        let ranking = rank_candidates(pooled, q.query_id, &q.pool())?;
        let pos: BTreeSet<usize> = q.positives.iter().copied().collect();
        aps.push(average_precision(&ranking, &pos));
        ndcgs.push(ndcg(&ranking, &pos));
    }
    match (mean_defined(aps), mean_defined(ndcgs)) {
        (Some(m), Some(n)) => Ok((m, n)),
        _ => Err(Error::input(format!(
            "{} task has no scorable queries",
            task.kind
        ))),
    }
}

/// Runs every task in `tasks` against one encoder.
pub fn evaluate_encoder(
    params: &EncoderParams,
    config: &EncoderConfig,
    graph: &CorpusGraph,
    tasks: &EvalTasks,
    seed: u64,
) -> Result<MetricsReport> {
    let sets = encode_papers(params, config, graph, tasks.paper_ids())?;
    let pooled: BTreeMap<usize, Vec<f64>> =
        sets.iter().map(|(id, s)| (*id, s.pooled.clone())).collect();
    let mut values = Vec::new();
    let mut push = |task: &str, metric: &str, value: f64| {
        values.push(MetricValue {
            task: task.to_string(),
            metric: metric.to_string(),
            value,
        })
    };
    for task in &tasks.retrieval {
        let (m, n) = retrieval_metrics(&pooled, task)?;
        push(task.kind.name(), "map", m);
        push(task.kind.name(), "ndcg", n);
        if let Some(lambda) = tasks.settings.diagnostic_lambda {
            let mut aps = Vec::new();
            let mut ndcgs = Vec::new();
            for q in &task.queries {
                let ranking = rank_blended(&sets, q.query_id, &q.pool(), lambda)?;
                let pos: BTreeSet<usize> = q.positives.iter().copied().collect();
                aps.push(average_precision(&ranking, &pos));
                ndcgs.push(ndcg(&ranking, &pos));
            }
            push(
                task.kind.name(),
                "map_lambda",
                mean_defined(aps).unwrap_or(0.0),
            );
            push(
                task.kind.name(),
                "ndcg_lambda",
                mean_defined(ndcgs).unwrap_or(0.0),
            );
        }
    }
    if let Some(c) = &tasks.classification {
        let features = |split: &[(usize, usize)]| {
            split
                .iter()
                .map(|(id, _)| pooled[id].clone())
                .collect::<Vec<_>>()
        };
        let labels =
            |split: &[(usize, usize)]| split.iter().map(|(_, d)| d - 1).collect::<Vec<_>>();
        let probe = fit_linear_probe(
            &features(&c.train),
            &labels(&c.train),
            c.num_classes,
            tasks.settings.probe_epochs,
            tasks.settings.probe_lr,
        )?;
        let predicted = probe.predict(&features(&c.test))?;
        push(
            "clf",
            "macro_f1",
            macro_f1(&predicted, &labels(&c.test), c.num_classes)?,
        );
    }
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(&v.value)) {
        return Err(Error::NonFinite(format!(
            "{} {} = {}",
            bad.task, bad.metric, bad.value
        )));
    }
    Ok(MetricsReport {
        seed,
        fingerprint: config_fingerprint(config),
        values,
    })
}
