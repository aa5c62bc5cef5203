//! Command-line front end: synthetic data, graph construction, training,
//! evaluation, single-pair prediction and three-expert fusion.
//!
//! Failures print one `error[category]: message` line. Usage problems
//! (bad flags, missing inputs, invalid configuration) exit with 2, runtime
//! failures with 1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::evaluator::ModelScorer;
use crate::experts::{self, ExpertError, ExpertId, ExpertOutput, FusionWeights, LogitTable};
use crate::hypergraph::{self, SharingEdgeType};
use crate::kg::{self, CompoundId, EquationFormat, EquationKG, HyperedgeKey, KgError, Part, Role, Split, SplitSpec};
use crate::model::{DecoderKind, EncoderKind, ModelError, ScoreOrder};
use crate::synth::{self, SynthError, SyntheticSpec};
use crate::trainer::{self, Checkpoint, CheckpointError, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) | CliError::Train(TrainError::Config(_)) | CliError::Expert(ExpertError::Weights(_)) => "config",
            CliError::Io { .. } => "io",
            CliError::Kg(_) => "input",
            CliError::Train(TrainError::Eval(_)) => "eval",
            CliError::Train(_) => "train",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Model(_) => "model",
            CliError::Expert(_) => "fusion",
            CliError::Synth(_) => "synth",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" | "config" => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hyperenz", version, about = "Hypergraph knowledge-graph embeddings for enzyme prediction")]
pub struct Cli {
    /// Worker threads; defaults to the configuration value (1).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Master seed; every module draws from named streams derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic equation KG with planted relation patterns.
    GenSynth(GenSynthArgs),
    /// Build the hypergraph and print its statistics.
    BuildGraph(BuildGraphArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Filtered ranking report for one part of the checkpoint's split.
    Evaluate(EvaluateArgs),
    /// Rank enzymes for one educt set and product set.
    Predict(PredictArgs),
    /// Fused pair-level enzyme ranking for substrates.
    Fuse(FuseArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Distinct compounds.
    #[arg(long)]
    pub compounds: Option<usize>,
    /// Distinct enzymes.
    #[arg(long)]
    pub enzymes: Option<usize>,
    /// Complete equations.
    #[arg(long)]
    pub complete: Option<usize>,
    /// Equations without an enzyme.
    #[arg(long)]
    pub incomplete: Option<usize>,
    /// Fraction of symmetric enzymes.
    #[arg(long)]
    pub symmetric: Option<f64>,
    /// Fraction of enzymes in inverse pairs.
    #[arg(long)]
    pub inverse: Option<f64>,
    /// Fraction of pattern-completing triples held out.
    #[arg(long)]
    pub heldout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Equation file (TSV, or JSON by extension).
    #[arg(long)]
    pub data: PathBuf,
    /// Additional file of equations without enzymes.
    #[arg(long)]
    pub incomplete_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Collapse the three sharing types into one.
    #[arg(long)]
    pub homogeneous: bool,
    /// Write the typed edge list here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Complete equations that must land in the test part.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Collapse the three sharing types into one.
    #[arg(long)]
    pub homogeneous: bool,
    /// Entity encoder.
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Relation scorer.
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Triples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Encoder layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Validation rounds without improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

impl From<SplitPart> for Part {
    fn from(p: SplitPart) -> Self {
        match p {
            SplitPart::Train => Part::Train,
            SplitPart::Valid => Part::Valid,
            SplitPart::Test => Part::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Part of the checkpoint's split to rank.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitPart,
    /// Write `(triple, rank)` rows here.
    #[arg(long)]
    pub per_triple: Option<PathBuf>,
    /// Print `key=value` lines instead of the table.
    #[arg(long)]
    pub kv: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated educt names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub educts: Vec<String>,
    /// Comma-separated product names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub products: Vec<String>,
    /// Number of ranked enzymes to print.
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Trained model; without it the relation-model expert is skipped.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Knowledge base equations; defaults to the checkpoint's dataset.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Extra equations without enzymes added to the knowledge base.
    #[arg(long)]
    pub incomplete_data: Option<PathBuf>,
    /// `substrate<TAB>enzyme<TAB>logit` table of the external classifier.
    #[arg(long)]
    pub ml_logits: Option<PathBuf>,
    /// Expert weights for the knowledge base, the relation model and the ML table.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    pub weights: FusionWeights,
    /// Substrate to query; repeatable. Substrates no expert covers are
    /// skipped with a warning.
    #[arg(long, required = true)]
    pub substrate: Vec<String>,
    /// Enzymes per substrate.
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// Append each expert's normalized logit.
    #[arg(long)]
    pub provenance: bool,
}

/// Runs the parsed command and writes its report to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let text = match &cli.command {
        Command::GenSynth(a) => gen_synth(a, cli.seed)?,
        Command::BuildGraph(a) => build_graph(a)?,
        Command::Train(a) => train(a, cli.seed, cli.threads)?,
        Command::Evaluate(a) => evaluate(a, cli.threads)?,
        Command::Predict(a) => predict(a, cli.seed)?,
        Command::Fuse(a) => fuse(a, cli.seed)?,
    };
    out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: "<stdout>".into(),
        source,
    })
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_data(args: &DataArgs) -> Result<EquationKG, CliError> {
    require(&args.data)?;
    let mut kg = kg::parse_equation_file(&args.data, EquationFormat::from_path(&args.data))?;
    if let Some(p) = &args.incomplete_data {
        require(p)?;
        kg::ingest_file(&mut kg, p, EquationFormat::from_path(p))?;
    }
    Ok(kg)
}

fn gen_synth(a: &GenSynthArgs, seed: Option<u64>) -> Result<String, CliError> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_toml(p)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { spec.$field = v; })*
        };
    }
    set!(compounds => compounds, enzymes => enzymes, complete => complete, incomplete => incomplete,
         symmetric => symmetric_fraction, inverse => inverse_fraction, heldout => heldout_fraction);
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = synth::generate(&spec)?;
    let files = data.write(&a.out)?;
    Ok(format!(
        "complete\t{}\t{}\nincomplete\t{}\t{}\nheldout\t{}\t{}\npatterns\t{}\t{}\n",
        data.complete.len(),
        files.complete.display(),
        data.incomplete.len(),
        files.incomplete.display(),
        data.heldout.len(),
        files.heldout.display(),
        data.patterns.len(),
        files.patterns.display(),
    ))
}

fn build_graph(a: &BuildGraphArgs) -> Result<String, CliError> {
    let kg = load_data(&a.data)?;
    let graph = hypergraph::build(&kg, a.homogeneous);
    let mut counts = [0usize; 3];
    for (_, _, t) in graph.adjacency.edges() {
        counts[t.index()] += 1;
    }
    let mut s = String::new();
    let _ = writeln!(s, "compounds\t{}", kg.num_compounds());
    let _ = writeln!(s, "enzymes\t{}", kg.num_enzymes());
    let _ = writeln!(s, "complete\t{}", kg.complete.len());
    let _ = writeln!(s, "incomplete\t{}", kg.incomplete.len());
    let _ = writeln!(s, "hyperedges\t{}", graph.num_hyperedges());
    for t in SharingEdgeType::ALL {
        let _ = writeln!(s, "{t}_edges\t{}", counts[t.index()]);
    }
    if let Some(p) = &a.out {
        write_file(p, &graph.dump())?;
    }
    Ok(s)
}

/// Indices of complete equations listed in `path`.
fn holdout_indices(kg: &EquationKG, path: &Path) -> Result<Vec<usize>, CliError> {
    require(path)?;
    let listed = kg::parse_equation_file(path, EquationFormat::from_path(path))?;
    let mut out = Vec::new();
    for t in &listed.complete {
        let key = |role: Role, cs: &[CompoundId]| {
            let ids: Option<Vec<CompoundId>> = cs.iter().map(|c| kg.compound_id(listed.compound_name(*c))).collect();
            ids.and_then(|ids| kg.hyperedges.get(&HyperedgeKey::new(role, ids)))
        };
        let enzyme = t.enzyme.and_then(|m| kg.enzyme_id(listed.enzyme_name(m)));
        let (s, p) = (key(Role::Educt, &t.educts), key(Role::Product, &t.products));
        let found = kg
            .complete
            .iter()
            .position(|q| q.key().is_some_and(|k| Some(k.educt_edge) == s && Some(k.product_edge) == p && Some(k.enzyme) == enzyme));
        match found {
            Some(i) => out.push(i),
            None => log::warn!("held-out equation {} is not in the data", listed.describe(t)),
        }
    }
    Ok(out)
}

fn train_config(a: &TrainArgs, seed: Option<u64>, threads: Option<usize>) -> Result<TrainConfig, CliError> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident),*) => {
            $(if let Some(v) = a.$flag { c.$flag = v; })*
        };
    }
    set!(encoder, decoder, epochs, lr, batch_size, dim, layers, patience);
    c.homogeneous |= a.homogeneous;
    if let Some(s) = seed {
        c.seed = s;
    }
    if let Some(t) = threads {
        c.threads = t;
    }
    c.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(c)
}

fn train(a: &TrainArgs, seed: Option<u64>, threads: Option<usize>) -> Result<String, CliError> {
    let config = train_config(a, seed, threads)?;
    let kg = load_data(&a.data)?;
    let forced = match &a.holdout {
        Some(p) => holdout_indices(&kg, p)?,
        None => Vec::new(),
    };
    let spec = SplitSpec {
        seed: config.seed,
        ..SplitSpec::default()
    };
    let split = match kg::split_with_holdout(&kg, &spec, &forced) {
        Ok(s) => s,
        Err(KgError::TooFewTriples { found, .. }) => {
            log::warn!("only {found} complete equations; training on all of them without validation");
            Split::all_train(&kg)
        }
        Err(e) => return Err(e.into()),
    };
    let trainer = Trainer::new(config.clone(), &kg)?;
    let outcome = trainer.fit(&split)?;
    let mut s = String::new();
    let _ = writeln!(s, "epochs={}", outcome.history.len());
    let _ = writeln!(s, "stopped_early={}", outcome.stopped_early);
    if let Some(last) = outcome.history.last() {
        let _ = writeln!(s, "final_loss={}", last.loss);
    }
    if let Some(m) = outcome.best.best_valid_mrr {
        let _ = writeln!(s, "best_valid_mrr={m}");
    }
    let state = outcome.best;
    drop(trainer);
    trainer::save_checkpoint(&a.out, &Checkpoint::new(config, kg, split, state))?;
    let _ = writeln!(s, "checkpoint={}", a.out.display());
    Ok(s)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    require(path)?;
    Ok(trainer::load_checkpoint(path)?)
}

fn evaluate(a: &EvaluateArgs, threads: Option<usize>) -> Result<String, CliError> {
    let mut ckpt = load_ckpt(&a.ckpt)?;
    if let Some(t) = threads {
        ckpt.config.threads = t;
    }
    let trainer = Trainer::new(ckpt.config.clone(), &ckpt.kg)?;
    let report = trainer.evaluate(&ckpt.state.model, &ckpt.split, a.split.into())?;
    if let Some(p) = &a.per_triple {
        write_file(p, &report.per_triple_tsv(&ckpt.kg))?;
    }
    Ok(if a.kv { report.to_kv() } else { report.to_table() })
}

/// Ids of the named compounds the checkpoint knows; unknown names are
/// dropped with a warning.
fn known_compounds(kg: &EquationKG, names: &[String]) -> Vec<CompoundId> {
    names
        .iter()
        .filter_map(|n| {
            let id = kg.compound_id(n.trim());
            if id.is_none() {
                log::warn!("unknown compound {n:?} ignored");
            }
            id
        })
        .collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    crate::diffmath::softmax_in_place(&mut v);
    v
}

fn predict(a: &PredictArgs, seed: Option<u64>) -> Result<String, CliError> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let graph = hypergraph::build(&ckpt.kg, ckpt.config.homogeneous);
    let scorer = ModelScorer {
        model: &ckpt.state.model,
        kg: &ckpt.kg,
        graph: &graph,
        seed: seed.unwrap_or(ckpt.config.seed),
    };
    let scores = scorer.score_sets(&known_compounds(&ckpt.kg, &a.educts), &known_compounds(&ckpt.kg, &a.products))?;
    let sign = match ckpt.state.model.order() {
        ScoreOrder::LowerIsBetter => -1.0,
        ScoreOrder::HigherIsBetter => 1.0,
    };
    let logits: Vec<f64> = scores.iter().map(|s| sign * s).collect();
    let probs = softmax(&logits);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]));
    let mut s = String::from("rank\tenzyme\tscore\tprobability\n");
    for (r, &m) in order.iter().take(a.topk).enumerate() {
        let name = ckpt.kg.enzyme_name(kg::EnzymeId(m as u32));
        let _ = writeln!(s, "{}\t{name}\t{}\t{}", r + 1, scores[m], probs[m]);
    }
    Ok(s)
}

fn fuse(a: &FuseArgs, seed: Option<u64>) -> Result<String, CliError> {
    let ckpt = a.ckpt.as_deref().map(load_ckpt).transpose()?;
    let mut kb = match (&a.kb, &ckpt) {
        (Some(p), _) => {
            require(p)?;
            kg::parse_equation_file(p, EquationFormat::from_path(p))?
        }
        (None, Some(c)) => c.kg.clone(),
        (None, None) => return Err(CliError::Usage("fuse needs --kb or --ckpt".into())),
    };
    if let Some(p) = &a.incomplete_data {
        require(p)?;
        kg::ingest_file(&mut kb, p, EquationFormat::from_path(p))?;
    }
    let mut enzymes = match &ckpt {
        Some(c) => c.kg.enzymes.clone(),
        None => kb.enzymes.clone(),
    };
    let table = match &a.ml_logits {
        Some(p) => {
            require(p)?;
            Some(LogitTable::load(p, &mut enzymes)?)
        }
        None => None,
    };
    let graph = ckpt.as_ref().map(|c| hypergraph::build(&c.kg, c.config.homogeneous));
    let scorer = ckpt.as_ref().zip(graph.as_ref()).map(|(c, g)| ModelScorer {
        model: &c.state.model,
        kg: &c.kg,
        graph: g,
        seed: seed.unwrap_or(c.config.seed),
    });

    let mut s = String::from("substrate\trank\tenzyme\tprobability");
    if a.provenance {
        s.push_str("\tkb\thyperenz\tml");
    }
    s.push('\n');
    let mut answered = 0;
    for substrate in &a.substrate {
        let mut outputs: Vec<ExpertOutput> = Vec::new();
        for expert in experts::route(substrate, &kb) {
            match expert {
                ExpertId::Kb => outputs.push(experts::remap(&experts::kb_expert(substrate, &kb), &kb.enzymes, &mut enzymes)),
                ExpertId::HyperEnz => match &scorer {
                    Some(sc) => outputs.push(experts::hyperenz_expert(substrate, &kb, Some(sc))?),
                    None => log::warn!("{substrate}: no checkpoint, relation-model expert skipped"),
                },
                ExpertId::Ml => match &table {
                    Some(t) => outputs.push(experts::ml_expert(substrate, t)),
                    None => log::warn!("{substrate}: no logit table, external expert skipped"),
                },
            }
        }
        let fused = match experts::fuse(&outputs, &a.weights, a.topk) {
            Ok(f) => f,
            Err(ExpertError::NoExpertFired) => {
                log::warn!("{substrate}: no expert fired");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        answered += 1;
        for (r, p) in fused.iter().enumerate() {
            let name = enzymes.name(p.enzyme.0).unwrap_or("?");
            let _ = write!(s, "{substrate}\t{}\t{name}\t{}", r + 1, p.probability);
            if a.provenance {
                for z in p.normalized {
                    match z {
                        Some(z) => {
                            let _ = write!(s, "\t{z}");
                        }
                        None => s.push_str("\t-"),
                    }
                }
            }
            s.push('\n');
        }
    }
    if answered == 0 {
        return Err(ExpertError::NoExpertFired.into());
    }
    Ok(s)
}
