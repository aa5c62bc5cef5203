//! Relation-aware scoring and the self-adversarial negative-sampling loss.
//!
//! PairRE scores a triple by `‖S ∘ m_head − P ∘ m_tail‖₁`; TransE by
//! `‖S + m − P‖₁`. Both are distances: lower means more plausible.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{log_sigmoid, DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::kg::{EnzymeId, EquationKG, HyperedgeId, Role, TripleKey};

#[derive(Debug, Error, PartialEq)]
pub enum KgeError {
    #[error("dimension mismatch: {0:?}")]
    Dimension(Vec<usize>),
    #[error("loss needs at least one negative sample")]
    NoNegatives,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Which triple component a negative replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Swap the educt or product hyperedge for another of the same role.
    Entity,
    /// Swap the enzyme.
    Relation,
}

/// How negatives are weighted inside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialDirection {
    /// `p ∝ exp(−α·d)`: negatives closer to the margin (harder) weigh more.
    Hard,
    /// `p ∝ exp(α·d)`: farther (easier) negatives weigh more.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub n_neg: usize,
    pub adv_temperature: f64,
    pub corruption: CorruptionMode,
    pub direction: AdversarialDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 6.0,
            n_neg: 100,
            adv_temperature: 1.0,
            corruption: CorruptionMode::Relation,
            direction: AdversarialDirection::Hard,
        }
    }
}

/// Per-enzyme relation vectors. PairRE uses a head table and a tail table
/// (`[|M|, n]` each); TransE uses only the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEmbedding {
    pub head: ParamId,
    pub tail: Option<ParamId>,
    pub dim: usize,
}

impl RelationEmbedding {
    pub fn init_pairre<R: Rng + ?Sized>(store: &mut ParamStore, enzymes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let head = store.add("relations.head", Tensor::uniform(&[enzymes, dim], bound, rng));
        let tail = store.add("relations.tail", Tensor::uniform(&[enzymes, dim], bound, rng));
        Self { head, tail: Some(tail), dim }
    }

    pub fn init_transe<R: Rng + ?Sized>(store: &mut ParamStore, enzymes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let head = store.add("relations.translation", Tensor::uniform(&[enzymes, dim], bound, rng));
        Self { head, tail: None, dim }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.head).chain(self.tail).collect()
    }

    pub fn head<'s>(&self, store: &'s ParamStore, m: EnzymeId) -> &'s [f64] {
        store.get(self.head).row_slice(m.index())
    }

    /// Tail half; the translation vector for TransE.
    pub fn tail<'s>(&self, store: &'s ParamStore, m: EnzymeId) -> &'s [f64] {
        store.get(self.tail.unwrap_or(self.head)).row_slice(m.index())
    }

    pub fn vector<'s>(&self, store: &'s ParamStore, m: EnzymeId) -> &'s [f64] {
        self.head(store, m)
    }
}

fn check_dims(lens: &[usize]) -> Result<(), KgeError> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(KgeError::Dimension(lens.to_vec()));
    }
    Ok(())
}

/// `‖S ∘ m_head − P ∘ m_tail‖₁`.
pub fn pairre_score(s: &[f64], p: &[f64], head: &[f64], tail: &[f64]) -> Result<f64, KgeError> {
    check_dims(&[s.len(), p.len(), head.len(), tail.len()])?;
    Ok(s.iter()
        .zip(p)
        .zip(head.iter().zip(tail))
        .map(|((s, p), (h, t))| (s * h - p * t).abs())
        .sum())
}

/// `‖S + m − P‖₁`.
pub fn transe_score(s: &[f64], p: &[f64], m: &[f64]) -> Result<f64, KgeError> {
    check_dims(&[s.len(), p.len(), m.len()])?;
    Ok(s.iter().zip(p).zip(m).map(|((s, p), m)| (s + m - p).abs()).sum())
}

/// PairRE distances of `(s, p)` under each listed enzyme, as a `[k]` node.
pub fn pairre_scores(g: &mut Graph, s: Var, p: Var, rel: &RelationEmbedding, enzymes: &[usize]) -> Result<Var, DiffError> {
    let k = enzymes.len();
    let heads = g.embedding_lookup(rel.head, enzymes)?;
    let tails = g.embedding_lookup(rel.tail.unwrap_or(rel.head), enzymes)?;
    let s_rep = g.gather_rows(s, &vec![0; k])?;
    let p_rep = g.gather_rows(p, &vec![0; k])?;
    let a = g.mul(s_rep, heads)?;
    let b = g.mul(p_rep, tails)?;
    let d = g.sub(a, b)?;
    g.l1_norm(d)
}

/// TransE distances of `(s, p)` under each listed enzyme, as a `[k]` node.
pub fn transe_scores(g: &mut Graph, s: Var, p: Var, rel: &RelationEmbedding, enzymes: &[usize]) -> Result<Var, DiffError> {
    let k = enzymes.len();
    let m = g.embedding_lookup(rel.head, enzymes)?;
    let s_rep = g.gather_rows(s, &vec![0; k])?;
    let p_rep = g.gather_rows(p, &vec![0; k])?;
    let sm = g.add(s_rep, m)?;
    let d = g.sub(sm, p_rep)?;
    g.l1_norm(d)
}

/// Softmax weights over negative distances. Treated as constants by the loss.
pub fn adversarial_weights(neg: &[f64], cfg: &LossConfig) -> Vec<f64> {
    let sign = match cfg.direction {
        AdversarialDirection::Hard => -1.0,
        AdversarialDirection::PaperLiteral => 1.0,
    };
    let mut w: Vec<f64> = neg.iter().map(|d| sign * cfg.adv_temperature * d).collect();
    crate::diffmath::softmax_in_place(&mut w);
    w
}

/// `−log σ(γ − d⁺) − Σ pᵢ log σ(dᵢ⁻ − γ)` on plain numbers.
pub fn self_adversarial_loss_value(pos: f64, neg: &[f64], cfg: &LossConfig) -> Result<f64, KgeError> {
    if neg.is_empty() {
        return Err(KgeError::NoNegatives);
    }
    let w = adversarial_weights(neg, cfg);
    let neg_term: f64 = w.iter().zip(neg).map(|(p, d)| p * log_sigmoid(d - cfg.margin)).sum();
    Ok(-log_sigmoid(cfg.margin - pos) - neg_term)
}

/// Recorded version of [`self_adversarial_loss_value`]; gradients do not
/// flow through the negative weights.
pub fn self_adversarial_loss(g: &mut Graph, pos: Var, neg: Var, cfg: &LossConfig) -> Result<Var, KgeError> {
    let w = adversarial_weights(g.value(neg).data(), cfg);
    weighted_margin_loss(g, pos, neg, w, cfg)
}

/// The same loss with the negative weights supplied by the caller.
pub fn weighted_margin_loss(g: &mut Graph, pos: Var, neg: Var, w: Vec<f64>, cfg: &LossConfig) -> Result<Var, KgeError> {
    if g.value(neg).is_empty() {
        return Err(KgeError::NoNegatives);
    }
    let pos_arg = g.scale(pos, -1.0);
    let pos_arg = g.add_scalar(pos_arg, cfg.margin);
    let pos_term = g.log_sigmoid(pos_arg);
    let neg_arg = g.add_scalar(neg, -cfg.margin);
    let neg_ls = g.log_sigmoid(neg_arg);
    let neg_term = g.weighted_sum(neg_ls, w)?;
    let pos_term = g.reshape(pos_term, &[])?;
    let total = g.add(pos_term, neg_term)?;
    Ok(g.scale(total, -1.0))
}

const MAX_TRIES: usize = 64;

/// Draws filtered negatives for training triples.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    known: HashSet<TripleKey>,
    educt_edges: Vec<HyperedgeId>,
    product_edges: Vec<HyperedgeId>,
    num_enzymes: usize,
}

impl NegativeSampler {
    /// `known` should hold every true triple (train, valid and test).
    pub fn new(kg: &EquationKG) -> Self {
        let known = kg.complete.iter().filter_map(|t| t.key()).collect();
        let mut educt_edges = Vec::new();
        let mut product_edges = Vec::new();
        for (id, key) in kg.hyperedges.iter() {
            match key.role {
                Role::Educt => educt_edges.push(id),
                Role::Product => product_edges.push(id),
            }
        }
        Self {
            known,
            educt_edges,
            product_edges,
            num_enzymes: kg.num_enzymes(),
        }
    }

    pub fn is_known(&self, t: &TripleKey) -> bool {
        self.known.contains(t)
    }

    /// Up to `cfg.n_neg` corruptions of `triple`, none of them a known true
    /// triple. Fewer are returned only when the candidate pool runs dry.
    pub fn sample<R: Rng + ?Sized>(&self, triple: &TripleKey, cfg: &LossConfig, rng: &mut R) -> Vec<TripleKey> {
        let mut out = Vec::with_capacity(cfg.n_neg);
        for _ in 0..cfg.n_neg {
            let neg = match cfg.corruption {
                CorruptionMode::Relation => self.corrupt_relation(triple, rng),
                CorruptionMode::Entity => self.corrupt_entity(triple, rng),
            };
            match neg {
                Some(n) => out.push(n),
                None => break,
            }
        }
        out
    }

    fn corrupt_relation<R: Rng + ?Sized>(&self, t: &TripleKey, rng: &mut R) -> Option<TripleKey> {
        if self.num_enzymes < 2 {
            return None;
        }
        for _ in 0..MAX_TRIES {
            // uniform over the other enzymes
            let mut m = rng.gen_range(0..self.num_enzymes - 1) as u32;
            if m >= t.enzyme.0 {
                m += 1;
            }
            let cand = TripleKey { enzyme: EnzymeId(m), ..*t };
            if !self.known.contains(&cand) {
                return Some(cand);
            }
        }
        // exhaustive fallback for small, densely filtered pools
        let free: Vec<u32> = (0..self.num_enzymes as u32)
            .filter(|&m| m != t.enzyme.0 && !self.known.contains(&TripleKey { enzyme: EnzymeId(m), ..*t }))
            .collect();
        if free.is_empty() {
            return None;
        }
        Some(TripleKey {
            enzyme: EnzymeId(free[rng.gen_range(0..free.len())]),
            ..*t
        })
    }

    fn corrupt_entity<R: Rng + ?Sized>(&self, t: &TripleKey, rng: &mut R) -> Option<TripleKey> {
        let head_first = rng.gen_bool(0.5);
        let sides = if head_first { [Role::Educt, Role::Product] } else { [Role::Product, Role::Educt] };
        for side in sides {
            let pool = match side {
                Role::Educt => &self.educt_edges,
                Role::Product => &self.product_edges,
            };
            if pool.len() < 2 {
                continue;
            }
            for _ in 0..MAX_TRIES {
                let e = pool[rng.gen_range(0..pool.len())];
                let cand = match side {
                    Role::Educt => TripleKey { educt_edge: e, ..*t },
                    Role::Product => TripleKey { product_edge: e, ..*t },
                };
                if cand != *t && !self.known.contains(&cand) {
                    return Some(cand);
                }
            }
        }
        None
    }
}
