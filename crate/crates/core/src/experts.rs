//! Pair-level enzyme retrieval from three sources (knowledge-base lookup,
//! the trained relation model, external classifier logits), scenario
//! routing, and z-score fusion.
//!
//! Logit conventions: the KB expert emits match counts, the model expert
//! emits negated distances (logits for the MLP decoder) maximized over all
//! matched equations, and the external expert passes its table through.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{ModelScorer, RelationScorer};
use crate::kg::{CompoundId, EnzymeId, EquationKG, EquationTriple, Interner};
use crate::hypergraph::GraphError;
use crate::model::{ModelError, ScoreOrder};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("no expert fired")]
    NoExpertFired,
    #[error("invalid fusion weights: {0}")]
    Weights(String),
    #[error("logit table line {line}: {reason}")]
    Table { line: usize, reason: String },
    #[error("logit table i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("relation model unavailable")]
    ModelMissing,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpertId {
    Kb,
    HyperEnz,
    Ml,
}

impl ExpertId {
    pub const ALL: [ExpertId; 3] = [ExpertId::Kb, ExpertId::HyperEnz, ExpertId::Ml];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertId::Kb => "kb",
            ExpertId::HyperEnz => "hyperenz",
            ExpertId::Ml => "ml",
        })
    }
}

/// Logits one expert produced for one substrate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput {
    pub expert: ExpertId,
    pub logits: BTreeMap<EnzymeId, f64>,
}

impl ExpertOutput {
    pub fn empty(expert: ExpertId) -> Self {
        Self {
            expert,
            logits: BTreeMap::new(),
        }
    }

    /// Whether the expert fired for this substrate.
    pub fn covered(&self) -> bool {
        !self.logits.is_empty()
    }
}

/// Non-negative expert weights `(w1, w2, w3)` for KB, model and ML.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights(pub [f64; 3]);

impl FusionWeights {
    /// Combinations searched during tuning.
    pub const GRID: [[f64; 3]; 6] = [
        [0.1, 0.1, 0.8],
        [0.1, 0.3, 0.6],
        [0.1, 0.7, 0.2],
        [0.3, 0.1, 0.6],
        [0.4, 0.1, 0.5],
        [0.7, 0.1, 0.2],
    ];

    pub fn new(w: [f64; 3]) -> Result<Self, ExpertError> {
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ExpertError::Weights(format!("{w:?} has a negative or non-finite entry")));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(ExpertError::Weights("all weights are zero".into()));
        }
        Ok(Self(w))
    }

    pub fn weight(&self, e: ExpertId) -> f64 {
        self.0[e.index()]
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self(Self::GRID[5])
    }
}

impl std::str::FromStr for FusionWeights {
    type Err = ExpertError;

    /// Parses `w1,w2,w3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ExpertError::Weights(format!("{s:?}: {e}")))?;
        let arr: [f64; 3] = parts
            .try_into()
            .map_err(|_| ExpertError::Weights(format!("{s:?}: expected three comma-separated numbers")))?;
        Self::new(arr)
    }
}

fn mentions(t: &EquationTriple, c: CompoundId) -> bool {
    t.educts.contains(&c) || t.products.contains(&c)
}

/// Counts, per enzyme, the complete equations that contain `substrate` on
/// either side.
pub fn kb_expert(substrate: &str, kg: &EquationKG) -> ExpertOutput {
    let mut out = ExpertOutput::empty(ExpertId::Kb);
    let Some(c) = kg.compound_id(substrate) else {
        return out;
    };
    for t in kg.complete.iter().filter(|t| mentions(t, c)) {
        if let Some(m) = t.enzyme {
            *out.logits.entry(m).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// Runs relation prediction on every equation of `kb` (complete or not)
/// containing `substrate` and keeps, per enzyme, the best logit over those
/// equations. Distances become logits by negation. Compound names are
/// resolved through the scorer's own graph; sets it has never seen are
/// attached to it. Enzyme ids in the output are the scorer's.
pub fn hyperenz_expert(substrate: &str, kb: &EquationKG, scorer: Option<&ModelScorer>) -> Result<ExpertOutput, ExpertError> {
    let scorer = scorer.ok_or(ExpertError::ModelMissing)?;
    let mut out = ExpertOutput::empty(ExpertId::HyperEnz);
    let Some(c) = kb.compound_id(substrate) else {
        return Ok(out);
    };
    let sign = match scorer.order() {
        ScoreOrder::LowerIsBetter => -1.0,
        ScoreOrder::HigherIsBetter => 1.0,
    };
    let resolve = |cs: &[CompoundId]| -> Vec<CompoundId> {
        cs.iter()
            .filter_map(|c| scorer.kg.compound_id(kb.compound_name(*c)))
            .collect()
    };
    for t in kb.complete.iter().chain(&kb.incomplete).filter(|t| mentions(t, c)) {
        let scores = match scorer.score_sets(&resolve(&t.educts), &resolve(&t.products)) {
            Ok(s) => s,
            Err(ModelError::Graph(GraphError::OutOfVocabulary)) => {
                log::warn!("skipping {}: no compound known to the model", kb.describe(t));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for (m, s) in scores.into_iter().enumerate() {
            let logit = sign * s;
            out.logits
                .entry(EnzymeId(m as u32))
                .and_modify(|v| *v = v.max(logit))
                .or_insert(logit);
        }
    }
    Ok(out)
}

/// Re-keys `out` from the enzyme ids of `from` to those of `to`, interning
/// names `to` lacks.
pub fn remap(out: &ExpertOutput, from: &Interner, to: &mut Interner) -> ExpertOutput {
    ExpertOutput {
        expert: out.expert,
        logits: out
            .logits
            .iter()
            .filter_map(|(m, z)| from.name(m.0).map(|n| (EnzymeId(to.intern(n)), *z)))
            .collect(),
    }
}

/// External `(substrate, enzyme, logit)` table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitTable {
    rows: BTreeMap<String, BTreeMap<EnzymeId, f64>>,
    pub duplicates: usize,
}

impl LogitTable {
    /// Parses the TSV. Enzymes are resolved through `enzymes`, interning
    /// names the knowledge graph has never seen. A header line starting with
    /// `substrate` is skipped. Duplicate `(substrate, enzyme)` rows keep the
    /// last value.
    pub fn parse(text: &str, enzymes: &mut Interner) -> Result<Self, ExpertError> {
        let mut table = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let row = raw.trim_end_matches('\r');
            if row.trim().is_empty() || row.starts_with('#') || (line == 1 && row.starts_with("substrate\t")) {
                continue;
            }
            let cols: Vec<&str> = row.split('\t').collect();
            if cols.len() != 3 {
                return Err(ExpertError::Table {
                    line,
                    reason: format!("expected 3 columns, found {}", cols.len()),
                });
            }
            let logit: f64 = cols[2].trim().parse().map_err(|e| ExpertError::Table {
                line,
                reason: format!("bad logit {:?}: {e}", cols[2]),
            })?;
            if !logit.is_finite() {
                return Err(ExpertError::Table {
                    line,
                    reason: "logit is not finite".into(),
                });
            }
            let m = EnzymeId(enzymes.intern(cols[1].trim()));
            let substrate = cols[0].trim().to_string();
            if table.rows.entry(substrate.clone()).or_default().insert(m, logit).is_some() {
                table.duplicates += 1;
                log::warn!("logit table line {line}: duplicate ({substrate}, {}); keeping the last row", cols[1].trim());
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path, enzymes: &mut Interner) -> Result<Self, ExpertError> {
        Self::parse(&fs::read_to_string(path)?, enzymes)
    }

    pub fn get(&self, substrate: &str) -> Option<&BTreeMap<EnzymeId, f64>> {
        self.rows.get(substrate)
    }
}

pub fn ml_expert(substrate: &str, table: &LogitTable) -> ExpertOutput {
    ExpertOutput {
        expert: ExpertId::Ml,
        logits: table.get(substrate).cloned().unwrap_or_default(),
    }
}

/// Experts consulted for `substrate`, by where it occurs.
pub fn route(substrate: &str, kg: &EquationKG) -> Vec<ExpertId> {
    let (mut in_q, mut in_q_prime) = (false, false);
    if let Some(c) = kg.compound_id(substrate) {
        in_q = kg.complete.iter().any(|t| mentions(t, c));
        in_q_prime = kg.incomplete.iter().any(|t| mentions(t, c));
    }
    match (in_q, in_q_prime) {
        (true, true) => vec![ExpertId::Kb, ExpertId::HyperEnz, ExpertId::Ml],
        (false, true) => vec![ExpertId::HyperEnz, ExpertId::Ml],
        (true, false) => vec![ExpertId::Kb, ExpertId::Ml],
        (false, false) => vec![ExpertId::Ml],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub enzyme: EnzymeId,
    pub probability: f64,
    /// Weighted sum of normalized logits.
    pub score: f64,
    /// Normalized logit per expert, `None` where that expert was inactive or
    /// did not score this enzyme.
    pub normalized: [Option<f64>; 3],
}

/// `(z - μ) / σ` over one expert's logits, with population σ. A spread that
/// is numerically zero maps every logit to 0.
pub fn z_scores(logits: &BTreeMap<EnzymeId, f64>) -> BTreeMap<EnzymeId, f64> {
    let n = logits.len() as f64;
    let mu = logits.values().sum::<f64>() / n;
    let var = logits.values().map(|z| (z - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let degenerate = sigma.is_nan() || sigma <= 1e-12 * mu.abs().max(1.0);
    logits
        .iter()
        .map(|(m, z)| (*m, if degenerate { 0.0 } else { (z - mu) / sigma }))
        .collect()
}

/// Fuses the covered outputs: z-score each, weight, softmax over every enzyme
/// any of them scored, and return the top `k`. Weights are renormalized over
/// the covered experts.
pub fn fuse(outputs: &[ExpertOutput], weights: &FusionWeights, k: usize) -> Result<Vec<FusedPrediction>, ExpertError> {
    let active: Vec<&ExpertOutput> = outputs.iter().filter(|o| o.covered()).collect();
    if active.is_empty() {
        return Err(ExpertError::NoExpertFired);
    }
    let mut w: Vec<f64> = active.iter().map(|o| weights.weight(o.expert)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        log::warn!("all covered experts have zero weight; weighting them equally");
        let n = w.len() as f64;
        w.iter_mut().for_each(|x| *x = 1.0 / n);
    }

    let mut fused: BTreeMap<EnzymeId, ([Option<f64>; 3], f64)> = BTreeMap::new();
    for (o, wi) in active.iter().zip(&w) {
        for (m, z) in z_scores(&o.logits) {
            let entry = fused.entry(m).or_insert(([None; 3], 0.0));
            entry.0[o.expert.index()] = Some(z);
            entry.1 += wi * z;
        }
    }
    let mut probs: Vec<f64> = fused.values().map(|(_, s)| *s).collect();
    crate::diffmath::softmax_in_place(&mut probs);
    let mut out: Vec<FusedPrediction> = fused
        .into_iter()
        .zip(probs)
        .map(|((enzyme, (normalized, score)), probability)| FusedPrediction {
            enzyme,
            probability,
            score,
            normalized,
        })
        .collect();
    // stable sort keeps ascending EnzymeId among equal probabilities
    out.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    out.truncate(k);
    Ok(out)
}
