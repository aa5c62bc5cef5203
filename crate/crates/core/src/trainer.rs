//! Optimization of encoder and decoder on the complete equations, with
//! validation-based model selection and checkpoints.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Graph, ParamGrads, ParamStore, Var};
use crate::encoder::Dropout;
use crate::evaluator::{evaluate, EvalError, FilterSet, ModelScorer, RankingReport};
use crate::hypergraph::{self, Hypergraph, SampleLimits};
use crate::kg::{EquationKG, HyperedgeId, Part, Split, TripleKey};
use crate::kge::{self, AdversarialDirection, CorruptionMode, LossConfig, NegativeSampler};
use crate::model::{substream, Decoder, DecoderKind, EncoderKind, Model, ModelConfig, ModelError, Prepared};

pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no training triples")]
    NoTriples,
    #[error("non-finite loss on triple {triple:?}: {detail}")]
    NonFinite { triple: TripleKey, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Kge(#[from] kge::KgeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
}

/// Flat training configuration. Every field can come from a TOML file and be
/// overridden on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    /// Epochs between validation rounds.
    pub eval_every: usize,
    pub eta1: usize,
    pub eta2: usize,
    pub dropout: f64,
    pub reg: f64,
    pub dim: usize,
    /// Feed-forward width; 0 means twice `dim`.
    pub hidden: usize,
    pub layers: usize,
    pub margin: f64,
    pub n_neg: usize,
    pub adv_temperature: f64,
    pub corruption: CorruptionMode,
    pub direction: AdversarialDirection,
    pub homogeneous: bool,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            lr: 1e-3,
            batch_size: 512,
            epochs: 100,
            patience: 10,
            eval_every: 1,
            eta1: 5,
            eta2: 3,
            dropout: 0.1,
            reg: 0.001,
            dim: 64,
            hidden: 0,
            layers: 1,
            margin: loss.margin,
            n_neg: loss.n_neg,
            adv_temperature: loss.adv_temperature,
            corruption: loss.corruption,
            direction: loss.direction,
            homogeneous: false,
            encoder: EncoderKind::Hyper,
            decoder: DecoderKind::PairRE,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 || self.dim == 0 || self.layers == 0 {
            return bad("batch_size, dim and layers must be positive");
        }
        if self.eta1 == 0 || self.eta2 == 0 {
            return bad("eta1 and eta2 must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.reg < 0.0 || self.n_neg == 0 || self.eval_every == 0 || self.threads == 0 {
            return bad("reg >= 0 and n_neg, eval_every, threads > 0 required");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            n_neg: self.n_neg,
            adv_temperature: self.adv_temperature,
            corruption: self.corruption,
            direction: self.direction,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            hidden: if self.hidden == 0 { 2 * self.dim } else { self.hidden },
            layers: self.layers,
            encoder: self.encoder,
            decoder: self.decoder,
            limits: SampleLimits {
                eta1: self.eta1,
                eta2: self.eta2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient see a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let data = store.get_mut(id).data_mut();
            for k in 0..data.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                data[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_valid_mrr: Option<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, kg: &EquationKG) -> Self {
        let mut rng = substream(config.seed, INIT_STREAM, 0);
        let model = Model::new(config.model(), kg.num_compounds(), kg.num_enzymes(), &mut rng);
        let optimizer = Adam::new(&model.store);
        Self {
            model,
            optimizer,
            epoch: 0,
            best_valid_mrr: None,
        }
    }
}

/// Everything one triple needs for its loss term.
struct Job {
    triple: TripleKey,
    negatives: Vec<TripleKey>,
}

/// `0.5 * reg * ||θ||²` over the regularized parameters.
fn l2_penalty(model: &Model, reg: f64) -> f64 {
    if reg == 0.0 {
        return 0.0;
    }
    let sq: f64 = model
        .regularized_ids()
        .iter()
        .map(|id| model.store.get(*id).data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    0.5 * reg * sq
}

fn triple_loss(
    model: &Model,
    g: &mut Graph,
    enc: &HashMap<HyperedgeId, Var>,
    job: &Job,
    loss_cfg: &LossConfig,
    dropout: &mut Dropout,
) -> Result<Var, TrainError> {
    let t = &job.triple;
    let (s, p) = (enc[&t.educt_edge], enc[&t.product_edge]);
    if let Decoder::Mlp(_) = model.decoder {
        let logits = model.mlp_logits(g, s, p, Some(dropout))?;
        return Ok(g.cross_entropy(logits, t.enzyme.index())?);
    }
    let pos = model.score_nodes(g, s, p, &[t.enzyme.index()])?;
    let same_pair = job
        .negatives
        .iter()
        .all(|n| n.educt_edge == t.educt_edge && n.product_edge == t.product_edge);
    let neg = if same_pair {
        let ms: Vec<usize> = job.negatives.iter().map(|n| n.enzyme.index()).collect();
        model.score_nodes(g, s, p, &ms)?
    } else {
        let parts = job
            .negatives
            .iter()
            .map(|n| model.score_nodes(g, enc[&n.educt_edge], enc[&n.product_edge], &[n.enzyme.index()]))
            .collect::<Result<Vec<_>, _>>()?;
        g.concat(&parts)?
    };
    Ok(kge::self_adversarial_loss(g, pos, neg, loss_cfg)?)
}

/// Records the loss of `jobs` on one graph and returns its summed value and
/// parameter gradients.
fn chunk_gradients(
    model: &Model,
    inputs: &HashMap<HyperedgeId, Prepared>,
    jobs: &[Job],
    loss_cfg: &LossConfig,
    dropout_rate: f64,
    dropout_seed: u64,
) -> Result<(f64, ParamGrads), TrainError> {
    let mut g = Graph::with_params(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut dropout = Dropout {
        rate: dropout_rate,
        rng: &mut rng as &mut dyn RngCore,
    };
    let mut enc: HashMap<HyperedgeId, Var> = HashMap::new();
    for job in jobs {
        let t = &job.triple;
        for e in [t.educt_edge, t.product_edge]
            .into_iter()
            .chain(job.negatives.iter().flat_map(|n| [n.educt_edge, n.product_edge]))
        {
            if let Entry::Vacant(slot) = enc.entry(e) {
                slot.insert(model.encode(&mut g, &inputs[&e], Some(&mut dropout))?);
            }
        }
    }
    let mut terms = Vec::with_capacity(jobs.len());
    for job in jobs {
        let l = triple_loss(model, &mut g, &enc, job, loss_cfg, &mut dropout)?;
        let value = g.value(l).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                triple: job.triple,
                detail: format!("loss {value}, {} negatives", job.negatives.len()),
            });
        }
        terms.push(g.reshape(l, &[1])?);
    }
    let stacked = g.concat(&terms)?;
    let total = g.sum(stacked);
    let value = g.value(total).item().unwrap_or(f64::NAN);
    Ok((value, g.backward(total)?.into_params()))
}

/// Trainer bound to one dataset and configuration.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub kg: &'a EquationKG,
    pub graph: Hypergraph,
    pub sampler: NegativeSampler,
    pub filter: FilterSet,
    pool: rayon::ThreadPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub valid_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the best validation round (or the last epoch without a
    /// validation set).
    pub best: TrainState,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, kg: &'a EquationKG) -> Result<Self, TrainError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Self {
            graph: hypergraph::build(kg, config.homogeneous),
            sampler: NegativeSampler::new(kg),
            filter: FilterSet::from_kg(kg),
            config,
            kg,
            pool,
        })
    }

    /// One pass over `train` (indices into the complete equations) in a
    /// shuffled order. Returns the mean per-triple loss including the L2
    /// penalty of each batch.
    pub fn train_epoch<R: Rng + ?Sized>(&self, state: &mut TrainState, train: &[usize], rng: &mut R) -> Result<f64, TrainError> {
        let keys: Vec<TripleKey> = train.iter().filter_map(|&i| self.kg.complete[i].key()).collect();
        if keys.is_empty() {
            return Err(TrainError::NoTriples);
        }
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.shuffle(rng);
        let loss_cfg = self.config.loss();
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let model = &state.model;
            let mut jobs = Vec::with_capacity(batch.len());
            for &i in batch {
                let negatives = match model.decoder {
                    Decoder::Mlp(_) => Vec::new(),
                    _ => self.sampler.sample(&keys[i], &loss_cfg, rng),
                };
                if negatives.is_empty() && !matches!(model.decoder, Decoder::Mlp(_)) {
                    return Err(kge::KgeError::NoNegatives.into());
                }
                jobs.push(Job {
                    triple: keys[i],
                    negatives,
                });
            }
            // one neighborhood sample per distinct hyperedge in the batch
            let mut inputs: HashMap<HyperedgeId, Prepared> = HashMap::new();
            for job in &jobs {
                let t = &job.triple;
                for e in [t.educt_edge, t.product_edge]
                    .into_iter()
                    .chain(job.negatives.iter().flat_map(|n| [n.educt_edge, n.product_edge]))
                {
                    if let Entry::Vacant(slot) = inputs.entry(e) {
                        slot.insert(model.prepare(&self.graph, e, rng)?);
                    }
                }
            }
            let n_chunks = self.config.threads.min(jobs.len());
            let chunk_len = jobs.len().div_ceil(n_chunks);
            let seeds: Vec<u64> = (0..n_chunks).map(|_| rng.next_u64()).collect();
            let results: Vec<Result<(f64, ParamGrads), TrainError>> = self.pool.install(|| {
                jobs.par_chunks(chunk_len)
                    .zip(seeds.par_iter())
                    .map(|(chunk, &seed)| chunk_gradients(model, &inputs, chunk, &loss_cfg, self.config.dropout, seed))
                    .collect()
            });
            let mut grads = ParamGrads::new(model.store.len());
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                grads.accumulate(&g, 1.0);
            }
            let b = jobs.len() as f64;
            grads.scale(1.0 / b);
            let reg_ids = model.regularized_ids();
            grads.add_l2(&model.store, &reg_ids, self.config.reg);
            total += batch_loss + b * l2_penalty(model, self.config.reg);
            let lr = self.config.lr;
            state.optimizer.update(&mut state.model.store, &grads, lr);
        }
        state.epoch += 1;
        Ok(total / keys.len() as f64)
    }

    pub fn scorer<'m>(&'m self, model: &'m Model) -> ModelScorer<'m> {
        ModelScorer {
            model,
            kg: self.kg,
            graph: &self.graph,
            seed: self.config.seed,
        }
    }

    /// Filtered ranking of `part` of `split`.
    pub fn evaluate(&self, model: &Model, split: &Split, part: Part) -> Result<RankingReport, TrainError> {
        let keys: Vec<TripleKey> = split.triples(self.kg, part).iter().filter_map(|t| t.key()).collect();
        let scorer = self.scorer(model);
        Ok(self.pool.install(|| evaluate(&keys, &scorer, &self.filter))?)
    }

    /// Trains from scratch with early stopping on validation MRR.
    pub fn fit(&self, split: &Split) -> Result<TrainOutcome, TrainError> {
        self.fit_from(TrainState::new(&self.config, self.kg), split, |_| {})
    }

    /// Continues from `state`, calling `on_epoch` after every epoch.
    pub fn fit_from(&self, mut state: TrainState, split: &Split, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome, TrainError> {
        let mut rng = substream(self.config.seed, TRAIN_STREAM, state.epoch as u64);
        let mut history = Vec::new();
        let mut best: Option<TrainState> = None;
        let mut stale = 0;
        let mut stopped_early = false;
        let validate = !split.valid.is_empty();
        while state.epoch < self.config.epochs {
            let loss = self.train_epoch(&mut state, &split.train, &mut rng)?;
            let mut log = EpochLog {
                epoch: state.epoch,
                loss,
                valid_mrr: None,
            };
            if validate && (state.epoch.is_multiple_of(self.config.eval_every) || state.epoch == self.config.epochs) {
                let mrr = self.evaluate(&state.model, split, Part::Valid)?.mrr;
                log.valid_mrr = Some(mrr);
                if state.best_valid_mrr.is_none_or(|b| mrr > b) {
                    state.best_valid_mrr = Some(mrr);
                    best = Some(state.clone());
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            log::info!("epoch {} loss {:.6} valid_mrr {:?}", log.epoch, log.loss, log.valid_mrr);
            on_epoch(&log);
            history.push(log);
            if validate && stale >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        let best = match best {
            Some(b) => b,
            None => state,
        };
        Ok(TrainOutcome {
            best,
            history,
            stopped_early,
        })
    }
}

/// Versioned container written by `train` and read by `evaluate`,
/// `predict` and `fuse`. The dataset and split travel with the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub kg: EquationKG,
    pub split: Split,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, kg: EquationKG, split: Split, state: TrainState) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config,
            kg,
            split,
            state,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let text = serde_json::to_string(ckpt).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Corrupt("missing format_version".into()))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(CheckpointError::VersionMismatch {
            found: found as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    ckpt.kg.reindex();
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{ingest_str, EquationFormat};

    fn toy() -> EquationKG {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "c1;c2\te1\tc3\nc2;c4\te2\tc3;c5\n", EquationFormat::Tsv).unwrap();
        kg
    }

    fn small(decoder: DecoderKind) -> TrainConfig {
        TrainConfig {
            dim: 8,
            n_neg: 4,
            batch_size: 2,
            epochs: 3,
            dropout: 0.0,
            decoder,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_the_documented_grid() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.dropout, c.reg), (1e-3, 512, 0.1, 0.001));
        assert_eq!(c.model().hidden, 128);
        c.validate().unwrap();
        assert!(TrainConfig { dropout: 1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { eta2: 0, ..c }.validate().is_err());
    }

    #[test]
    fn config_parses_from_flat_toml() {
        let c: TrainConfig = toml::from_str("lr = 0.01\ndecoder = \"transe\"\nencoder = \"meanpool\"\ncorruption = \"entity\"\n").unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.decoder, DecoderKind::TransE);
        assert_eq!(c.encoder, EncoderKind::MeanPool);
        assert_eq!(c.corruption, CorruptionMode::Entity);
        assert!(toml::from_str::<TrainConfig>("learning_rate = 1").is_err());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let kg = toy();
        let cfg = TrainConfig { lr: 0.0, ..small(DecoderKind::PairRE) };
        let trainer = Trainer::new(cfg.clone(), &kg).unwrap();
        let mut state = TrainState::new(&cfg, &kg);
        let before = state.model.store.clone();
        let split = Split::all_train(&kg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = trainer.train_epoch(&mut state, &split.train, &mut rng).unwrap();
        let b = trainer.train_epoch(&mut state, &split.train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(state.model.store, before);
        assert_eq!(a, b);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", crate::diffmath::Tensor::vector(vec![1.0, -1.0]));
        let mut adam = Adam::new(&store);
        let mut grads = ParamGrads::new(1);
        grads.add_l2(&store, &[id], 1.0);
        adam.update(&mut store, &grads, 0.1);
        // first bias-corrected step has magnitude lr
        let x = store.get(id).data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn every_decoder_trains_deterministically() {
        let kg = toy();
        for dec in [DecoderKind::PairRE, DecoderKind::TransE, DecoderKind::Mlp] {
            let run = || {
                let trainer = Trainer::new(small(dec), &kg).unwrap();
                let out = trainer.fit(&Split::all_train(&kg)).unwrap();
                out.history.iter().map(|h| h.loss).collect::<Vec<_>>()
            };
            let a = run();
            assert_eq!(a.len(), 3);
            assert!(a.iter().all(|l| l.is_finite()));
            assert_eq!(a, run());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let kg = toy();
        let cfg = small(DecoderKind::PairRE);
        let state = TrainState::new(&cfg, &kg);
        let ckpt = Checkpoint::new(cfg, kg.clone(), Split::all_train(&kg), state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.state, ckpt.state);
        assert_eq!(back.config, ckpt.config);

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));

        let old = text.replacen("\"format_version\":1", "\"format_version\":0", 1);
        fs::write(&path, old).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::VersionMismatch { found: 0, expected: 1 }));
        assert!(err.to_string().contains('0') && err.to_string().contains('1'));
    }
}
