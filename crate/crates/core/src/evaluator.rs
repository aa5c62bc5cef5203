//! Filtered ranking of the true enzyme among all enzymes, and the MR / MRR /
//! Hit@k summaries.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::hypergraph::Hypergraph;
use crate::kg::{canonical_set, CompoundId, EnzymeId, EquationKG, HyperedgeId, HyperedgeKey, Role, TripleKey};
use crate::model::{substream, Model, ModelError, ScoreOrder};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("enzyme {0} is not in the scorer's {1} enzymes")]
    UnknownEnzyme(EnzymeId, usize),
    #[error("scorer returned {got} scores for {want} enzymes")]
    ScoreCount { got: usize, want: usize },
    #[error("non-finite score for enzyme {0}")]
    NonFinite(usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const HIT_LEVELS: [usize; 3] = [1, 3, 10];

/// Every true `(educt, enzyme, product)` triple, grouped by hyperedge pair.
#[derive(Debug, Clone, Default)]
pub struct FilterSet {
    by_pair: HashMap<(HyperedgeId, HyperedgeId), Vec<EnzymeId>>,
}

impl FilterSet {
    pub fn new(triples: impl IntoIterator<Item = TripleKey>) -> Self {
        let mut by_pair: HashMap<_, Vec<EnzymeId>> = HashMap::new();
        for t in triples {
            let v = by_pair.entry((t.educt_edge, t.product_edge)).or_default();
            if !v.contains(&t.enzyme) {
                v.push(t.enzyme);
            }
        }
        Self { by_pair }
    }

    /// All complete equations of `kg`, whatever split they belong to.
    pub fn from_kg(kg: &EquationKG) -> Self {
        Self::new(kg.complete.iter().filter_map(|t| t.key()))
    }

    pub fn contains(&self, t: &TripleKey) -> bool {
        self.true_enzymes(t.educt_edge, t.product_edge).contains(&t.enzyme)
    }

    pub fn true_enzymes(&self, educt: HyperedgeId, product: HyperedgeId) -> &[EnzymeId] {
        self.by_pair.get(&(educt, product)).map_or(&[], Vec::as_slice)
    }
}

/// Anything that scores every enzyme for a hyperedge pair.
pub trait RelationScorer: Sync {
    fn order(&self) -> ScoreOrder;
    fn num_enzymes(&self) -> usize;
    fn score_pair(&self, educt: HyperedgeId, product: HyperedgeId) -> Result<Vec<f64>, EvalError>;
}

/// Rank of `truth` in `scores`, skipping the enzymes in `filtered` other
/// than `truth`. Ties count as the mean of the optimistic and pessimistic
/// ranks.
pub fn rank_from_scores(scores: &[f64], truth: EnzymeId, filtered: &[EnzymeId], order: ScoreOrder) -> Result<f64, EvalError> {
    let t = truth.index();
    if t >= scores.len() {
        return Err(EvalError::UnknownEnzyme(truth, scores.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    let target = scores[t];
    let (mut better, mut tied) = (0usize, 0usize);
    for (m, &s) in scores.iter().enumerate() {
        if m == t || filtered.contains(&EnzymeId(m as u32)) {
            continue;
        }
        let wins = match order {
            ScoreOrder::LowerIsBetter => s < target,
            ScoreOrder::HigherIsBetter => s > target,
        };
        if wins {
            better += 1;
        } else if s == target {
            tied += 1;
        }
    }
    Ok(better as f64 + 1.0 + tied as f64 / 2.0)
}

pub fn rank_relation<S: RelationScorer + ?Sized>(triple: &TripleKey, scorer: &S, filter: &FilterSet) -> Result<f64, EvalError> {
    let m = scorer.num_enzymes();
    if triple.enzyme.index() >= m {
        return Err(EvalError::UnknownEnzyme(triple.enzyme, m));
    }
    let scores = scorer.score_pair(triple.educt_edge, triple.product_edge)?;
    if scores.len() != m {
        return Err(EvalError::ScoreCount { got: scores.len(), want: m });
    }
    rank_from_scores(
        &scores,
        triple.enzyme,
        filter.true_enzymes(triple.educt_edge, triple.product_edge),
        scorer.order(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub triples: Vec<TripleKey>,
    pub ranks: Vec<f64>,
    pub mr: f64,
    pub mrr: f64,
    /// Hit@1, Hit@3, Hit@10.
    pub hits: [f64; 3],
}

impl RankingReport {
    pub fn from_ranks(triples: Vec<TripleKey>, ranks: Vec<f64>) -> Result<Self, EvalError> {
        if ranks.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = ranks.len() as f64;
        let mr = ranks.iter().sum::<f64>() / n;
        let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
        let hits = HIT_LEVELS.map(|k| ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n);
        Ok(Self {
            triples,
            ranks,
            mr,
            mrr,
            hits,
        })
    }

    pub fn count(&self) -> usize {
        self.ranks.len()
    }

    pub fn hit(&self, k: usize) -> Option<f64> {
        HIT_LEVELS.iter().position(|&l| l == k).map(|i| self.hits[i])
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "triples", "MR", "MRR", "H@1", "H@3", "H@10");
        let _ = writeln!(
            out,
            "{:>8} {:>8.3} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            self.count(),
            self.mr,
            self.mrr,
            self.hits[0],
            self.hits[1],
            self.hits[2]
        );
        out
    }

    /// One `key=value` line per metric.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "triples={}", self.count());
        let _ = writeln!(out, "mr={}", self.mr);
        let _ = writeln!(out, "mrr={}", self.mrr);
        for (k, h) in HIT_LEVELS.iter().zip(self.hits) {
            let _ = writeln!(out, "hit@{k}={h}");
        }
        out
    }

    /// `educts<TAB>enzyme<TAB>products<TAB>rank` per evaluated triple.
    pub fn per_triple_tsv(&self, kg: &EquationKG) -> String {
        let names = |e: HyperedgeId| {
            kg.hyperedges
                .compounds(e)
                .iter()
                .map(|c| kg.compound_name(*c))
                .collect::<Vec<_>>()
                .join(";")
        };
        let mut out = String::from("educts\tenzyme\tproducts\trank\n");
        for (t, r) in self.triples.iter().zip(&self.ranks) {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                names(t.educt_edge),
                kg.enzyme_name(t.enzyme),
                names(t.product_edge),
                r
            );
        }
        out
    }
}

/// Ranks every triple in parallel; the result order follows `triples`.
pub fn evaluate<S: RelationScorer + ?Sized>(triples: &[TripleKey], scorer: &S, filter: &FilterSet) -> Result<RankingReport, EvalError> {
    let ranks = triples
        .par_iter()
        .map(|t| rank_relation(t, scorer, filter))
        .collect::<Result<Vec<_>, _>>()?;
    RankingReport::from_ranks(triples.to_vec(), ranks)
}

const EVAL_STREAM: u64 = 3;
const ATTACH_STREAM: u64 = 4;

/// A trained model over a fixed hypergraph. Neighbor sampling uses a stream
/// derived from `seed` and the hyperedge (or compound set), so scores do not
/// depend on the order in which queries are made.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub kg: &'a EquationKG,
    pub graph: &'a Hypergraph,
    pub seed: u64,
}

impl ModelScorer<'_> {
    pub fn embedding(&self, e: HyperedgeId) -> Result<Vec<f64>, ModelError> {
        let mut rng = substream(self.seed, EVAL_STREAM, e.0 as u64);
        let input = self.model.prepare(self.graph, e, &mut rng)?;
        self.model.embed(&input)
    }

    /// Embedding of any compound set in `role`; sets that are not hyperedges
    /// of the graph are attached to it.
    pub fn set_embedding(&self, role: Role, compounds: &[CompoundId]) -> Result<Vec<f64>, ModelError> {
        let key = HyperedgeKey {
            role,
            compounds: canonical_set(compounds.iter().copied()),
        };
        if let Some(e) = self.kg.hyperedges.get(&key) {
            return self.embedding(e);
        }
        // FNV-1a over the canonical set and role
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in std::iter::once(role as u64).chain(key.compounds.iter().map(|c| c.0 as u64)) {
            h = (h ^ x).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = substream(self.seed, ATTACH_STREAM, h);
        let input = self.model.prepare_set(self.graph, self.kg, role, &key.compounds, &mut rng)?;
        self.model.embed(&input)
    }

    /// Scores of every enzyme for `⟨educts, ?, products⟩`.
    pub fn score_sets(&self, educts: &[CompoundId], products: &[CompoundId]) -> Result<Vec<f64>, ModelError> {
        let s = self.set_embedding(Role::Educt, educts)?;
        let p = self.set_embedding(Role::Product, products)?;
        self.model.score_all(&s, &p)
    }
}

impl RelationScorer for ModelScorer<'_> {
    fn order(&self) -> ScoreOrder {
        self.model.order()
    }

    fn num_enzymes(&self) -> usize {
        self.model.num_enzymes
    }

    fn score_pair(&self, educt: HyperedgeId, product: HyperedgeId) -> Result<Vec<f64>, EvalError> {
        let s = self.embedding(educt)?;
        let p = self.embedding(product)?;
        Ok(self.model.score_all(&s, &p)?)
    }
}
