//! Synthetic multi-domain corpus with a citation graph, and the triplet
//! sampler used for contrastive training.
//!
//! Every domain owns a skewed categorical distribution over a shared
//! vocabulary, so token statistics carry a learnable domain signal. Citations
//! stay inside the citing paper's domain with probability `1 − p_cross`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_HEADER_PREFIX: &str = "#M2SPE-CORPUS v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paper {
    pub id: usize,
    /// Domain label in `1..=D`.
    pub domain: usize,
    pub tokens: Vec<usize>,
    pub out_citations: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_domains: usize,
    pub papers_per_domain: usize,
    /// Poisson mean of each paper's citation count.
    pub citations_per_paper: f64,
    pub p_cross: f64,
    pub vocab_size: usize,
    /// Log-scale spread of each domain's token weights; 0 gives identical uniform domains.
    pub domain_token_skew: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    /// Ids `0..reserved_ids` are kept free for CLS tokens.
    pub reserved_ids: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_domains: 3,
            papers_per_domain: 200,
            citations_per_paper: 5.0,
            p_cross: 0.15,
            vocab_size: 512,
            domain_token_skew: 1.5,
            min_seq_len: 16,
            max_seq_len: 48,
            reserved_ids: 8,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_domains == 0 || self.papers_per_domain == 0 {
            return fail("need at least one domain and one paper per domain".into());
        }
        if !(0.0..=1.0).contains(&self.p_cross) {
            return fail(format!("p_cross {} outside [0, 1]", self.p_cross));
        }
        if self.num_domains == 1 && self.p_cross > 0.0 {
            return fail("cross-domain citations need at least two domains".into());
        }
        if self.citations_per_paper.is_nan()
            || self.citations_per_paper <= 0.0
            || self.citations_per_paper >= self.papers_per_domain as f64
        {
            return fail(format!(
                "citations_per_paper {} must lie in (0, papers_per_domain)",
                self.citations_per_paper
            ));
        }
        if self.vocab_size <= self.reserved_ids {
            return fail("vocab_size must exceed reserved_ids".into());
        }
        if self.min_seq_len == 0 || self.min_seq_len > self.max_seq_len {
            return fail("need 1 <= min_seq_len <= max_seq_len".into());
        }
        if !self.domain_token_skew.is_finite() || self.domain_token_skew < 0.0 {
            return fail("domain_token_skew must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Papers indexed by id; domain `d` owns the contiguous id block
/// `(d−1)·N .. d·N` when produced by [`generate_corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusGraph {
    pub num_domains: usize,
    pub vocab_size: usize,
    pub papers: Vec<Paper>,
}

impl CorpusGraph {
    pub fn len(&self) -> usize {
        self.papers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.papers.is_empty()
    }

    pub fn paper(&self, id: usize) -> &Paper {
        &self.papers[id]
    }

    pub fn cites(&self, from: usize, to: usize) -> bool {
        self.papers[from].out_citations.contains(&to)
    }

    /// For each paper, the papers citing it.
    pub fn in_citations(&self) -> Vec<BTreeSet<usize>> {
        let mut inc = vec![BTreeSet::new(); self.papers.len()];
        for p in &self.papers {
            for &c in &p.out_citations {
                inc[c].insert(p.id);
            }
        }
        inc
    }

    /// Papers cited by something `id` cites, minus `id` and its direct citations.
    pub fn two_hop_uncited(&self, id: usize) -> BTreeSet<usize> {
        let direct = &self.papers[id].out_citations;
        direct
            .iter()
            .flat_map(|&c| self.papers[c].out_citations.iter().copied())
            .filter(|c| *c != id && !direct.contains(c))
            .collect()
    }

    /// Papers sharing at least one citing paper with `id`.
    pub fn co_cited_with(&self, id: usize, in_citations: &[BTreeSet<usize>]) -> BTreeSet<usize> {
        in_citations[id]
            .iter()
            .flat_map(|&citer| self.papers[citer].out_citations.iter().copied())
            .filter(|&c| c != id)
            .collect()
    }

    /// Fraction of citation edges joining papers of different domains.
    pub fn cross_domain_fraction(&self) -> f64 {
        let (mut cross, mut total) = (0usize, 0usize);
        for p in &self.papers {
            for &c in &p.out_citations {
                total += 1;
                if self.papers[c].domain != p.domain {
                    cross += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            cross as f64 / total as f64
        }
    }

    fn check(&self) -> Result<()> {
        for (i, p) in self.papers.iter().enumerate() {
            let bad = |m: String| {
                Err(Error::Format {
                    what: "corpus",
                    detail: format!("paper {i}: {m}"),
                })
            };
            if p.id != i {
                return bad(format!("id {} out of order", p.id));
            }
            if p.domain == 0 || p.domain > self.num_domains {
                return bad(format!(
                    "domain {} outside 1..={}",
                    p.domain, self.num_domains
                ));
            }
            if p.tokens.is_empty() {
                return bad("no tokens".into());
            }
            if let Some(t) = p.tokens.iter().find(|&&t| t >= self.vocab_size) {
                return bad(format!("token {t} outside vocabulary"));
            }
            if p.out_citations.contains(&i) {
                return bad("self-citation".into());
            }
            if let Some(c) = p.out_citations.iter().find(|&&c| c >= self.papers.len()) {
                return bad(format!("citation {c} to unknown paper"));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "{CORPUS_HEADER_PREFIX} D={} V={}\n",
            self.num_domains, self.vocab_size
        );
        let join = |it: &mut dyn Iterator<Item = usize>| {
            it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        };
        for p in &self.papers {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                p.id,
                p.domain,
                join(&mut p.tokens.iter().copied()),
                join(&mut p.out_citations.iter().copied())
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format {
            what: "corpus",
            detail: m,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rest = header
            .strip_prefix(CORPUS_HEADER_PREFIX)
            .ok_or_else(|| bad(format!("unexpected header {header:?}")))?;
        let mut num_domains = None;
        let mut vocab_size = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("D", v)) => num_domains = v.parse().ok(),
                Some(("V", v)) => vocab_size = v.parse().ok(),
                _ => return Err(bad(format!("unexpected header field {field:?}"))),
            }
        }
        let num_domains = num_domains.ok_or_else(|| bad("header lacks D".into()))?;
        let vocab_size = vocab_size.ok_or_else(|| bad("header lacks V".into()))?;
        let parse_list = |s: &str, line: usize| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| bad(format!("line {line}: bad integer {t:?}")))
                })
                .collect()
        };
        let mut papers = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let lineno = n + 2;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(format!(
                    "line {lineno}: expected 4 tab-separated fields"
                )));
            }
            let id = fields[0]
                .parse()
                .map_err(|_| bad(format!("line {lineno}: bad id")))?;
            let domain = fields[1]
                .parse()
                .map_err(|_| bad(format!("line {lineno}: bad domain")))?;
            papers.push(Paper {
                id,
                domain,
                tokens: parse_list(fields[2], lineno)?,
                out_citations: parse_list(fields[3], lineno)?.into_iter().collect(),
            });
        }
        let g = CorpusGraph {
            num_domains,
            vocab_size,
            papers,
        };
        g.check()?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

fn domain_token_weights(
    spec: &CorpusSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WeightedIndex<f64>>> {
    let free = spec.vocab_size - spec.reserved_ids;
    (0..spec.num_domains)
        .map(|_| {
            let w: Vec<f64> = (0..free)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (spec.domain_token_skew * z).exp()
                })
                .collect();
            WeightedIndex::new(w).map_err(|e| Error::config(format!("token weights: {e}")))
        })
        .collect()
}

/// Builds `D·N` papers, deterministic in `seed`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<CorpusGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.papers_per_domain;
    let total = spec.num_domains * n;
    let token_dists = domain_token_weights(spec, &mut rng)?;
    let poisson =
        Poisson::new(spec.citations_per_paper).map_err(|e| Error::config(e.to_string()))?;
    let mut papers = Vec::with_capacity(total);
    for id in 0..total {
        let domain_idx = id / n;
        let len = rng.random_range(spec.min_seq_len..=spec.max_seq_len);
        let tokens = (0..len)
            .map(|_| spec.reserved_ids + token_dists[domain_idx].sample(&mut rng))
            .collect();
        let count = (poisson.sample(&mut rng) as usize).clamp(1, n - 1);
        let mut out_citations = BTreeSet::new();
        let block = domain_idx * n..(domain_idx + 1) * n;
        for _ in 0..count {
            // Redraw on self or duplicate targets; give up after a bounded number of tries.
            for _ in 0..64 {
                let target = if rng.random_bool(spec.p_cross) {
                    let other = rng.random_range(0..total - n);
                    if other >= block.start {
                        other + n
                    } else {
                        other
                    }
                } else {
                    rng.random_range(block.clone())
                };
                if target != id && out_citations.insert(target) {
                    break;
                }
            }
        }
        papers.push(Paper {
            id,
            domain: domain_idx + 1,
            tokens,
            out_citations,
        });
    }
    Ok(CorpusGraph {
        num_domains: spec.num_domains,
        vocab_size: spec.vocab_size,
        papers,
    })
}

/// Contrastive training unit. `hard` negatives are citations of citations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub query_id: usize,
    pub positive_id: usize,
    pub negative_id: usize,
    pub hard: bool,
}

/// Samples training triplets for one epoch.
///
/// Queries are drawn without replacement from papers that cite something,
/// reshuffling whenever the pool runs out. Each query yields `easy_per_query`
/// triplets with a uniformly random uncited negative and up to
/// `hard_per_query` triplets whose negative is two citation hops away.
pub fn sample_triplets(
    graph: &CorpusGraph,
    queries_per_epoch: usize,
    easy_per_query: usize,
    hard_per_query: usize,
    seed: u64,
) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = graph
        .papers
        .iter()
        .filter(|p| !p.out_citations.is_empty())
        .map(|p| p.id)
        .collect();
    let mut out = Vec::new();
    if pool.is_empty() {
        return out;
    }
    let mut order = Vec::new();
    for _ in 0..queries_per_epoch {
        if order.is_empty() {
            order = pool.clone();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let q = order.pop().expect("refilled above");
        let cited: Vec<usize> = graph.papers[q].out_citations.iter().copied().collect();
        let uncited = graph.len() - 1 - cited.len();
        for _ in 0..easy_per_query {
            if uncited == 0 {
                break;
            }
            let positive_id = *cited.choose(&mut rng).expect("query has citations");
            let negative_id = loop {
                let c = rng.random_range(0..graph.len());
                if c != q && !graph.cites(q, c) {
                    break c;
                }
            };
            out.push(Triplet {
                query_id: q,
                positive_id,
                negative_id,
                hard: false,
            });
        }
        if hard_per_query > 0 {
            let hard: Vec<usize> = graph.two_hop_uncited(q).into_iter().collect();
            if hard.is_empty() {
                continue;
            }
            for _ in 0..hard_per_query {
                out.push(Triplet {
                    query_id: q,
                    positive_id: *cited.choose(&mut rng).expect("query has citations"),
                    negative_id: *hard.choose(&mut rng).expect("non-empty"),
                    hard: true,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_domains: 3,
            papers_per_domain: 100,
            citations_per_paper: 4.0,
            vocab_size: 64,
            min_seq_len: 4,
            max_seq_len: 10,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_determinism() {
        let g = generate_corpus(&small_spec(), 7).unwrap();
        assert_eq!(g.len(), 300);
        assert_eq!(g, generate_corpus(&small_spec(), 7).unwrap());
        assert_ne!(g, generate_corpus(&small_spec(), 8).unwrap());
        g.check().unwrap();
        for p in &g.papers {
            assert!(!p.out_citations.is_empty());
            assert!((4..=10).contains(&p.tokens.len()));
            assert!(p.tokens.iter().all(|&t| (8..64).contains(&t)));
        }
    }

    #[test]
    fn zero_cross_probability_keeps_citations_in_domain() {
        let spec = CorpusSpec {
            p_cross: 0.0,
            ..small_spec()
        };
        let g = generate_corpus(&spec, 1).unwrap();
        assert_eq!(g.cross_domain_fraction(), 0.0);
    }

    #[test]
    fn realized_cross_fraction_tracks_knob() {
        for (p, seed) in [(0.15, 1783), (0.3, 1918), (0.5, 1945)] {
            let spec = CorpusSpec {
                p_cross: p,
                ..small_spec()
            };
            let f = generate_corpus(&spec, seed)
                .unwrap()
                .cross_domain_fraction();
            assert!((f - p).abs() <= 0.05, "p={p} realized {f}");
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let bad = [
            CorpusSpec {
                citations_per_paper: 100.0,
                ..small_spec()
            },
            CorpusSpec {
                p_cross: 1.2,
                ..small_spec()
            },
            CorpusSpec {
                num_domains: 1,
                ..small_spec()
            },
            CorpusSpec {
                vocab_size: 8,
                ..small_spec()
            },
        ];
        for s in bad {
            assert!(generate_corpus(&s, 0).is_err(), "{s:?}");
        }
    }

    #[test]
    fn tsv_roundtrip_and_header() {
        let g = generate_corpus(&small_spec(), 3).unwrap();
        let text = g.to_tsv();
        assert!(text.starts_with("#M2SPE-CORPUS v1 D=3 V=64\n"));
        let second = text.lines().nth(1).unwrap();
        assert_eq!(second.split('\t').count(), 4);
        assert_eq!(CorpusGraph::from_tsv(&text).unwrap(), g);
    }

    #[test]
    fn tsv_rejects_garbage() {
        assert!(CorpusGraph::from_tsv("").is_err());
        assert!(CorpusGraph::from_tsv("#OTHER v1 D=1 V=4\n").is_err());
        assert!(CorpusGraph::from_tsv("#M2SPE-CORPUS v1 D=1 V=4\n0\t1\t2 3\t0\n").is_err());
        assert!(CorpusGraph::from_tsv("#M2SPE-CORPUS v1 D=1 V=4\n0\t1\t9\t\n").is_err());
        let ok =
            CorpusGraph::from_tsv("#M2SPE-CORPUS v1 D=1 V=4\n0\t1\t2 3\t1\n1\t1\t3\t\n").unwrap();
        assert_eq!(ok.papers[1].out_citations.len(), 0);
    }

    #[test]
    fn triplets_are_deterministic_and_valid() {
        let g = generate_corpus(&small_spec(), 2).unwrap();
        let t = sample_triplets(&g, 120, 1, 1, 9);
        assert_eq!(t, sample_triplets(&g, 120, 1, 1, 9));
        assert!(t.iter().any(|x| x.hard) && t.iter().any(|x| !x.hard));
        for x in &t {
            assert!(g.cites(x.query_id, x.positive_id));
            assert!(!g.cites(x.query_id, x.negative_id));
            assert_ne!(x.negative_id, x.query_id);
        }
    }
}
