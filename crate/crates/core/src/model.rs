//! Encoder plus decoder, with the forward paths used by training,
//! evaluation and prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::encoder::{self, Dropout, EncoderError, EncoderParams};
use crate::hypergraph::{GraphError, Hypergraph, SampleLimits, SubHypergraph};
use crate::kg::{CompoundId, EnzymeId, EquationKG, HyperedgeId, HyperedgeKey, Role};
use crate::kge::{self, RelationEmbedding};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Kge(#[from] kge::KgeError),
    #[error("enzyme index {0} outside the model's {1} enzymes")]
    UnknownEnzyme(usize, usize),
    #[error("{0} is only available with the {1} decoder")]
    Unavailable(&'static str, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Transformer over sampled hyperedge neighborhoods.
    Hyper,
    /// Mean of member compound features.
    #[value(name = "meanpool")]
    #[serde(rename = "meanpool")]
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    #[value(name = "pairre")]
    PairRE,
    #[value(name = "transe")]
    TransE,
    Mlp,
}

/// Whether smaller or larger scores mean "more plausible".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreOrder {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub limits: SampleLimits,
}

/// Feed-forward head over `[S, P]` producing one logit per enzyme.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Decoder {
    PairRE(RelationEmbedding),
    TransE(RelationEmbedding),
    Mlp(MlpParams),
}

/// What the encoder consumes for one hyperedge.
#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    Sub(SubHypergraph),
    Members(Vec<CompoundId>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub num_enzymes: usize,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: Decoder,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, num_compounds: usize, num_enzymes: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let encoder = encoder::init_params(&mut store, num_compounds, config.dim, config.hidden, config.layers, rng);
        let n = config.dim;
        let decoder = match config.decoder {
            DecoderKind::PairRE => Decoder::PairRE(RelationEmbedding::init_pairre(&mut store, num_enzymes, n, rng)),
            DecoderKind::TransE => Decoder::TransE(RelationEmbedding::init_transe(&mut store, num_enzymes, n, rng)),
            DecoderKind::Mlp => {
                let b_in = 1.0 / ((2 * n) as f64).sqrt();
                let b_hid = 1.0 / (config.hidden as f64).sqrt();
                Decoder::Mlp(MlpParams {
                    w1: store.add("mlp.w1", Tensor::uniform(&[2 * n, config.hidden], b_in, rng)),
                    b1: store.add("mlp.b1", Tensor::uniform(&[config.hidden], b_in, rng)),
                    w2: store.add("mlp.w2", Tensor::uniform(&[config.hidden, num_enzymes], b_hid, rng)),
                    b2: store.add("mlp.b2", Tensor::uniform(&[num_enzymes], b_hid, rng)),
                })
            }
        };
        Self {
            config,
            num_enzymes,
            store,
            encoder,
            decoder,
        }
    }

    pub fn order(&self) -> ScoreOrder {
        match self.decoder {
            Decoder::Mlp(_) => ScoreOrder::HigherIsBetter,
            _ => ScoreOrder::LowerIsBetter,
        }
    }

    /// Parameters subject to L2 regularization: compound features and
    /// relation embeddings.
    pub fn regularized_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.encoder.compounds];
        match &self.decoder {
            Decoder::PairRE(r) | Decoder::TransE(r) => ids.extend(r.ids()),
            Decoder::Mlp(_) => {}
        }
        ids
    }

    /// Builds the encoder input for a hyperedge of `graph`.
    pub fn prepare<R: Rng + ?Sized>(&self, graph: &Hypergraph, e: HyperedgeId, rng: &mut R) -> Result<Prepared, ModelError> {
        Ok(match self.config.encoder {
            EncoderKind::Hyper => Prepared::Sub(graph.sample_neighborhood(e, self.config.limits, rng)?),
            EncoderKind::MeanPool => {
                if e.index() >= graph.num_hyperedges() {
                    return Err(GraphError::UnknownHyperedge(e).into());
                }
                Prepared::Members(graph.incidence.members(e).to_vec())
            }
        })
    }

    /// Encoder input for an arbitrary compound set. Sets that already exist
    /// as hyperedges of `kg` use their own neighborhood; others are attached.
    pub fn prepare_set<R: Rng + ?Sized>(
        &self,
        graph: &Hypergraph,
        kg: &EquationKG,
        role: Role,
        compounds: &[CompoundId],
        rng: &mut R,
    ) -> Result<Prepared, ModelError> {
        let key = HyperedgeKey {
            role,
            compounds: crate::kg::canonical_set(compounds.iter().copied()),
        };
        if let Some(e) = kg.hyperedges.get(&key) {
            return self.prepare(graph, e, rng);
        }
        Ok(match self.config.encoder {
            EncoderKind::Hyper => Prepared::Sub(graph.attach_test_hyperedge(compounds, role, self.config.limits, rng)?),
            EncoderKind::MeanPool => {
                let known: Vec<CompoundId> = key
                    .compounds
                    .iter()
                    .copied()
                    .filter(|c| c.index() < self.store.get(self.encoder.compounds).rows())
                    .collect();
                if known.is_empty() {
                    return Err(GraphError::OutOfVocabulary.into());
                }
                Prepared::Members(known)
            }
        })
    }

    /// Records the encoder on `g`, returning a `[1, n]` node.
    pub fn encode(&self, g: &mut Graph, input: &Prepared, dropout: Option<&mut Dropout>) -> Result<Var, ModelError> {
        Ok(match input {
            Prepared::Sub(sub) => encoder::encode(g, &self.encoder, sub, dropout)?,
            Prepared::Members(m) => encoder::mean_pool(g, &self.encoder, m)?,
        })
    }

    /// Distances for the listed enzymes, or logits of all enzymes when the
    /// decoder is the MLP (then `enzymes` selects entries of the logit row).
    pub fn score_nodes(&self, g: &mut Graph, s: Var, p: Var, enzymes: &[usize]) -> Result<Var, ModelError> {
        self.check_enzymes(enzymes)?;
        Ok(match &self.decoder {
            Decoder::PairRE(r) => kge::pairre_scores(g, s, p, r, enzymes)?,
            Decoder::TransE(r) => kge::transe_scores(g, s, p, r, enzymes)?,
            Decoder::Mlp(_) => {
                let logits = self.mlp_logits(g, s, p, None)?;
                let flat = g.reshape(logits, &[self.num_enzymes, 1])?;
                let picked = g.gather_rows(flat, enzymes)?;
                g.reshape(picked, &[enzymes.len()])?
            }
        })
    }

    /// `[1, |M|]` logits of the MLP decoder.
    pub fn mlp_logits(&self, g: &mut Graph, s: Var, p: Var, dropout: Option<&mut Dropout>) -> Result<Var, ModelError> {
        let Decoder::Mlp(mlp) = &self.decoder else {
            return Err(ModelError::Unavailable("mlp logits", "mlp"));
        };
        let x = g.concat(&[s, p])?;
        let x = g.reshape(x, &[1, 2 * self.config.dim])?;
        let w1 = g.param(mlp.w1)?;
        let b1 = g.param(mlp.b1)?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let mut h = g.relu(h);
        if let Some(d) = dropout {
            if let Some(mask) = d.mask(self.config.hidden) {
                h = g.dropout(h, mask)?;
            }
        }
        let w2 = g.param(mlp.w2)?;
        let b2 = g.param(mlp.b2)?;
        let o = g.matmul(h, w2)?;
        Ok(g.add_row(o, b2)?)
    }

    fn check_enzymes(&self, enzymes: &[usize]) -> Result<(), ModelError> {
        match enzymes.iter().find(|&&m| m >= self.num_enzymes) {
            Some(&m) => Err(ModelError::UnknownEnzyme(m, self.num_enzymes)),
            None => Ok(()),
        }
    }

    /// Forward-only embedding of a prepared hyperedge.
    pub fn embed(&self, input: &Prepared) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::with_params(&self.store);
        let v = self.encode(&mut g, input, None)?;
        let out = g.value(v).data().to_vec();
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > encoder::DEFAULT_NORM_CAP {
            return Err(EncoderError::Degenerate {
                cap: encoder::DEFAULT_NORM_CAP,
            }
            .into());
        }
        Ok(out)
    }

    /// Scores of every enzyme for already computed `S` and `P` embeddings.
    /// Distances for PairRE/TransE, logits for the MLP.
    pub fn score_all(&self, s: &[f64], p: &[f64]) -> Result<Vec<f64>, ModelError> {
        let ids = 0..self.num_enzymes as u32;
        Ok(match &self.decoder {
            Decoder::PairRE(r) => ids
                .map(|m| {
                    let m = EnzymeId(m);
                    kge::pairre_score(s, p, r.head(&self.store, m), r.tail(&self.store, m))
                })
                .collect::<Result<_, _>>()?,
            Decoder::TransE(r) => ids
                .map(|m| kge::transe_score(s, p, r.vector(&self.store, EnzymeId(m))))
                .collect::<Result<_, _>>()?,
            Decoder::Mlp(_) => {
                let mut g = Graph::with_params(&self.store);
                let sv = g.constant(Tensor::row(s.to_vec()));
                let pv = g.constant(Tensor::row(p.to_vec()));
                let l = self.mlp_logits(&mut g, sv, pv, None)?;
                g.value(l).data().to_vec()
            }
        })
    }
}

/// Seeded stream for a named purpose and index, so evaluation and
/// prediction do not depend on visiting order.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::build;
    use crate::kg::{ingest_str, EquationFormat};

    fn toy() -> EquationKG {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "c1;c2\te1\tc3\nc2;c4\te2\tc3;c5\n", EquationFormat::Tsv).unwrap();
        kg
    }

    fn config(decoder: DecoderKind, encoder: EncoderKind) -> ModelConfig {
        ModelConfig {
            dim: 4,
            hidden: 8,
            layers: 1,
            encoder,
            decoder,
            limits: SampleLimits { eta1: 5, eta2: 3 },
        }
    }

    #[test]
    fn graph_and_plain_scores_agree() {
        let kg = toy();
        let graph = build(&kg, false);
        for dec in [DecoderKind::PairRE, DecoderKind::TransE, DecoderKind::Mlp] {
            let model = Model::new(config(dec, EncoderKind::Hyper), kg.num_compounds(), 2, &mut ChaCha8Rng::seed_from_u64(1));
            let t = kg.complete[1].key().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let s_in = model.prepare(&graph, t.educt_edge, &mut rng).unwrap();
            let p_in = model.prepare(&graph, t.product_edge, &mut rng).unwrap();
            let (s, p) = (model.embed(&s_in).unwrap(), model.embed(&p_in).unwrap());
            let plain = model.score_all(&s, &p).unwrap();
            assert_eq!(plain.len(), 2);

            let mut g = Graph::with_params(&model.store);
            let sv = model.encode(&mut g, &s_in, None).unwrap();
            let pv = model.encode(&mut g, &p_in, None).unwrap();
            let rec = model.score_nodes(&mut g, sv, pv, &[1, 0]).unwrap();
            let rec = g.value(rec).data();
            assert!((rec[0] - plain[1]).abs() < 1e-12 && (rec[1] - plain[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_logits_have_one_entry_per_enzyme_and_are_deterministic() {
        let run = || {
            let model = Model::new(config(DecoderKind::Mlp, EncoderKind::MeanPool), 5, 7, &mut ChaCha8Rng::seed_from_u64(9));
            model.score_all(&[0.1, 0.2, -0.3, 0.4], &[0.0, 1.0, 0.5, -0.5]).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 7);
        assert_eq!(a, run());
    }

    #[test]
    fn mlp_logits_unavailable_for_distance_decoders() {
        let model = Model::new(config(DecoderKind::PairRE, EncoderKind::Hyper), 5, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::with_params(&model.store);
        let s = g.constant(Tensor::row(vec![0.0; 4]));
        assert!(matches!(model.mlp_logits(&mut g, s, s, None), Err(ModelError::Unavailable(..))));
        assert!(matches!(model.score_nodes(&mut g, s, s, &[2]), Err(ModelError::UnknownEnzyme(2, 2))));
    }

    #[test]
    fn mean_pool_path_uses_all_members() {
        let kg = toy();
        let graph = build(&kg, false);
        let model = Model::new(config(DecoderKind::TransE, EncoderKind::MeanPool), kg.num_compounds(), 2, &mut ChaCha8Rng::seed_from_u64(3));
        let t = kg.complete[1].key().unwrap();
        let input = model.prepare(&graph, t.product_edge, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let got = model.embed(&input).unwrap();
        let table = model.store.get(model.encoder.compounds);
        let (c3, c5) = (kg.compound_id("c3").unwrap(), kg.compound_id("c5").unwrap());
        for (k, g) in got.iter().enumerate().take(4) {
            let want = (table.row_slice(c3.index())[k] + table.row_slice(c5.index())[k]) / 2.0;
            assert!((g - want).abs() < 1e-15);
        }
    }

    #[test]
    fn known_sets_reuse_their_hyperedge() {
        let kg = toy();
        let graph = build(&kg, false);
        let model = Model::new(config(DecoderKind::PairRE, EncoderKind::Hyper), kg.num_compounds(), 2, &mut ChaCha8Rng::seed_from_u64(3));
        let c = |n: &str| kg.compound_id(n).unwrap();
        let set = model
            .prepare_set(&graph, &kg, Role::Educt, &[c("c2"), c("c1")], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let Prepared::Sub(sub) = set else { panic!() };
        assert_eq!(sub.target, Some(kg.complete[0].educt_edge));
        let fresh = model
            .prepare_set(&graph, &kg, Role::Educt, &[c("c4"), c("c5")], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let Prepared::Sub(sub) = fresh else { panic!() };
        assert_eq!(sub.target, None);
    }
}
