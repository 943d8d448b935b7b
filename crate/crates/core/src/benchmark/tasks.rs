use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::citegraph::CorpusGraph;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Positives are papers the query cites.
    Cite,
    /// Positives share at least one citing paper with the query.
    Cocite,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Cite => "cite",
            TaskKind::Cocite => "cocite",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cite" => Ok(TaskKind::Cite),
            "cocite" => Ok(TaskKind::Cocite),
            other => Err(Error::input(format!("unknown retrieval task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalQuery {
    pub query_id: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl RetrievalQuery {
    /// Positives followed by negatives.
    pub fn pool(&self) -> Vec<usize> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .copied()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalTask {
    pub kind: TaskKind,
    pub queries: Vec<RetrievalQuery>,
}

/// Papers that count as positives for `id` under `kind`.
pub fn related_papers(
    graph: &CorpusGraph,
    kind: TaskKind,
    id: usize,
    in_citations: &[BTreeSet<usize>],
) -> BTreeSet<usize> {
    match kind {
        TaskKind::Cite => graph.paper(id).out_citations.clone(),
        TaskKind::Cocite => graph.co_cited_with(id, in_citations),
    }
}

/// Builds a retrieval task with queries stratified evenly across domains.
///
/// Each domain contributes `num_queries / D` queries (the remainder goes to
/// the lowest domain labels). Papers without any related paper are skipped.
/// Negatives are drawn uniformly from papers that are neither the query, nor
/// related to it under `kind`, nor cited by it, so no negative is a hidden
/// positive under either relation.
pub fn build_retrieval_task(
    graph: &CorpusGraph,
    kind: TaskKind,
    num_queries: usize,
    max_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<RetrievalTask> {
    if max_pos == 0 || n_neg == 0 || num_queries == 0 {
        return Err(Error::input(
            "num_queries, max_pos and n_neg must all be positive",
        ));
    }
    if n_neg + 2 > graph.len() {
        return Err(Error::input(format!(
            "{n_neg} negatives cannot be drawn from {} papers",
            graph.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_citations = graph.in_citations();
    let domains = graph.num_domains.max(1);
    let mut queries = Vec::with_capacity(num_queries);
    for d in 1..=domains {
        let quota = num_queries / domains + usize::from(d <= num_queries % domains);
        let mut members: Vec<usize> = graph
            .papers
            .iter()
            .filter(|p| p.domain == d)
            .map(|p| p.id)
            .collect();
        members.shuffle(&mut rng);
        let mut taken = 0;
        for q in members {
            if taken == quota {
                break;
            }
            let related = related_papers(graph, kind, q, &in_citations);
            if related.is_empty() {
                continue;
            }
            let cited = &graph.paper(q).out_citations;
            let candidates: Vec<usize> = (0..graph.len())
                .filter(|c| *c != q && !related.contains(c) && !cited.contains(c))
                .collect();
            if candidates.len() < n_neg {
                continue;
            }
            let related: Vec<usize> = related.into_iter().collect();
            let mut positives: Vec<usize> = related
                .choose_multiple(&mut rng, max_pos.min(related.len()))
                .copied()
                .collect();
            positives.sort_unstable();
            let mut negatives: Vec<usize> = candidates
                .choose_multiple(&mut rng, n_neg)
                .copied()
                .collect();
            negatives.sort_unstable();
            queries.push(RetrievalQuery {
                query_id: q,
                positives,
                negatives,
            });
            taken += 1;
        }
    }
    Ok(RetrievalTask { kind, queries })
}

/// Stratified train/test split of papers by domain label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationTask {
    pub num_classes: usize,
    /// `(paper_id, domain)` pairs, domain in `1..=D`.
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

pub fn build_classification_task(
    graph: &CorpusGraph,
    test_fraction: f64,
    seed: u64,
) -> Result<ClassificationTask> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::input(format!(
            "test_fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in 1..=graph.num_domains {
        let mut members: Vec<usize> = graph
            .papers
            .iter()
            .filter(|p| p.domain == d)
            .map(|p| p.id)
            .collect();
        if members.len() < 2 {
            return Err(Error::input(format!("domain {d} has fewer than 2 papers")));
        }
        members.shuffle(&mut rng);
        let n_test =
            ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        let (te, tr) = members.split_at(n_test);
        test.extend(te.iter().map(|&id| (id, d)));
        train.extend(tr.iter().map(|&id| (id, d)));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ClassificationTask {
        num_classes: graph.num_domains,
        train,
        test,
    })
}
