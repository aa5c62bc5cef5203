//! Equation knowledge graph: entity interning, reaction-equation ingestion,
//! hyperedge keying and dataset splits.
//!
//! A reaction `S --m--> P` is stored as an [`EquationTriple`] whose head and
//! tail are compound *sets*. Identical sets with the same role collapse onto
//! one [`HyperedgeId`], shared between complete and incomplete equations.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel used in the enzyme column of an incomplete equation.
pub const MISSING_ENZYME: &str = "?";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("need at least {min} complete equations to split, found {found}")]
    TooFewTriples { found: usize, min: usize },
    #[error("invalid split ratios {0:?}")]
    InvalidRatios([u32; 3]),
    #[error("equation has an empty {0} set")]
    EmptySide(Role),
}

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Index into the compound intern table.
    CompoundId
);
dense_id!(
    /// Index into the enzyme intern table.
    EnzymeId
);
dense_id!(
    /// Index into the hyperedge universe (distinct educt and product sets).
    HyperedgeId
);

/// Bijective string <-> dense index table. Ids are handed out in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Interner {
    names: IndexSet<String>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(i) = self.names.get_index_of(name) {
            return i as u32;
        }
        self.names.insert_full(name.to_string()).0 as u32
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.names.get_index_of(name).map(|i| i as u32)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get_index(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.names.iter().enumerate().map(|(i, s)| (i as u32, s.as_str()))
    }
}

/// Which side of an equation a compound set sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Educt,
    Product,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Educt => f.write_str("educt"),
            Role::Product => f.write_str("product"),
        }
    }
}

/// Canonical key of a hyperedge: role plus the sorted, duplicate-free compound list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HyperedgeKey {
    pub role: Role,
    pub compounds: Vec<CompoundId>,
}

impl HyperedgeKey {
    pub fn new(role: Role, compounds: impl IntoIterator<Item = CompoundId>) -> Self {
        Self {
            role,
            compounds: canonical_set(compounds),
        }
    }
}

/// Sorts and deduplicates a compound list.
pub fn canonical_set(compounds: impl IntoIterator<Item = CompoundId>) -> Vec<CompoundId> {
    let mut v: Vec<CompoundId> = compounds.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// The set of distinct educt and product sets, E = S ∪ P.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperedgeUniverse {
    keys: IndexSet<HyperedgeKey>,
}

impl HyperedgeUniverse {
    fn insert(&mut self, key: HyperedgeKey) -> HyperedgeId {
        HyperedgeId(self.keys.insert_full(key).0 as u32)
    }

    pub fn get(&self, key: &HyperedgeKey) -> Option<HyperedgeId> {
        self.keys.get_index_of(key).map(|i| HyperedgeId(i as u32))
    }

    pub fn key(&self, id: HyperedgeId) -> &HyperedgeKey {
        &self.keys[id.index()]
    }

    pub fn role(&self, id: HyperedgeId) -> Role {
        self.key(id).role
    }

    pub fn compounds(&self, id: HyperedgeId) -> &[CompoundId] {
        &self.key(id).compounds
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (HyperedgeId, &HyperedgeKey)> {
        self.keys
            .iter()
            .enumerate()
            .map(|(i, k)| (HyperedgeId(i as u32), k))
    }
}

/// One reaction ⟨educts, enzyme, products⟩. `enzyme` is `None` for incomplete equations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EquationTriple {
    pub educts: Vec<CompoundId>,
    pub enzyme: Option<EnzymeId>,
    pub products: Vec<CompoundId>,
    pub educt_edge: HyperedgeId,
    pub product_edge: HyperedgeId,
}

impl EquationTriple {
    pub fn contains(&self, c: CompoundId) -> bool {
        self.educts.binary_search(&c).is_ok() || self.products.binary_search(&c).is_ok()
    }

    /// Filter key (educt hyperedge, enzyme, product hyperedge).
    pub fn key(&self) -> Option<TripleKey> {
        self.enzyme.map(|m| TripleKey {
            educt_edge: self.educt_edge,
            enzyme: m,
            product_edge: self.product_edge,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripleKey {
    pub educt_edge: HyperedgeId,
    pub enzyme: EnzymeId,
    pub product_edge: HyperedgeId,
}

/// What happened to an equation handed to [`EquationKG::add_equation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Added {
    Complete(usize),
    Incomplete(usize),
    Duplicate,
}

/// Complete (Q) and incomplete (Q') equations with their intern tables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EquationKG {
    pub compounds: Interner,
    pub enzymes: Interner,
    pub hyperedges: HyperedgeUniverse,
    pub complete: Vec<EquationTriple>,
    pub incomplete: Vec<EquationTriple>,
    /// Number of duplicate equations dropped during ingestion.
    pub duplicates: usize,
    #[serde(skip)]
    seen: HashSet<(HyperedgeId, Option<EnzymeId>, HyperedgeId)>,
}

impl EquationKG {
    pub fn new() -> Self {
        Self::default()
    }

    /// Interns names and records the equation. `enzyme == None` or `Some("?")`
    /// makes it incomplete.
    pub fn add_equation<S: AsRef<str>>(
        &mut self,
        educts: &[S],
        enzyme: Option<&str>,
        products: &[S],
    ) -> Result<Added, KgError> {
        fn clean<S: AsRef<str>>(xs: &[S]) -> Vec<&str> {
            xs.iter()
                .map(|s| s.as_ref().trim())
                .filter(|s| !s.is_empty())
                .collect()
        }
        let (e, p) = (clean(educts), clean(products));
        if e.is_empty() {
            return Err(KgError::EmptySide(Role::Educt));
        }
        if p.is_empty() {
            return Err(KgError::EmptySide(Role::Product));
        }
        let educts = canonical_set(e.iter().map(|s| CompoundId(self.compounds.intern(s))));
        let products = canonical_set(p.iter().map(|s| CompoundId(self.compounds.intern(s))));
        let enzyme = enzyme
            .map(str::trim)
            .filter(|s| *s != MISSING_ENZYME && !s.is_empty())
            .map(|s| EnzymeId(self.enzymes.intern(s)));
        Ok(self.insert_triple(educts, enzyme, products))
    }

    fn insert_triple(
        &mut self,
        educts: Vec<CompoundId>,
        enzyme: Option<EnzymeId>,
        products: Vec<CompoundId>,
    ) -> Added {
        let educt_edge = self.hyperedges.insert(HyperedgeKey {
            role: Role::Educt,
            compounds: educts.clone(),
        });
        let product_edge = self.hyperedges.insert(HyperedgeKey {
            role: Role::Product,
            compounds: products.clone(),
        });
        if !self.seen.insert((educt_edge, enzyme, product_edge)) {
            self.duplicates += 1;
            return Added::Duplicate;
        }
        let t = EquationTriple {
            educts,
            enzyme,
            products,
            educt_edge,
            product_edge,
        };
        if enzyme.is_some() {
            self.complete.push(t);
            Added::Complete(self.complete.len() - 1)
        } else {
            self.incomplete.push(t);
            Added::Incomplete(self.incomplete.len() - 1)
        }
    }

    /// Rebuilds the duplicate index after deserialization.
    pub fn reindex(&mut self) {
        self.seen = self
            .complete
            .iter()
            .chain(&self.incomplete)
            .map(|t| (t.educt_edge, t.enzyme, t.product_edge))
            .collect();
    }

    pub fn compound_name(&self, c: CompoundId) -> &str {
        self.compounds.name(c.0).unwrap_or("<unknown>")
    }

    pub fn enzyme_name(&self, m: EnzymeId) -> &str {
        self.enzymes.name(m.0).unwrap_or("<unknown>")
    }

    pub fn compound_id(&self, name: &str) -> Option<CompoundId> {
        self.compounds.get(name).map(CompoundId)
    }

    pub fn enzyme_id(&self, name: &str) -> Option<EnzymeId> {
        self.enzymes.get(name).map(EnzymeId)
    }

    pub fn num_compounds(&self) -> usize {
        self.compounds.len()
    }

    pub fn num_enzymes(&self) -> usize {
        self.enzymes.len()
    }

    /// Formats an equation as `a;b -> c` for diagnostics.
    pub fn describe(&self, t: &EquationTriple) -> String {
        let side = |cs: &[CompoundId]| {
            cs.iter()
                .map(|c| self.compound_name(*c))
                .collect::<Vec<_>>()
                .join(";")
        };
        let m = t.enzyme.map_or(MISSING_ENZYME, |m| self.enzyme_name(m));
        format!("{}\t{}\t{}", side(&t.educts), m, side(&t.products))
    }
}

/// Map from (role, sorted compound list) to hyperedge id.
pub fn hyperedge_universe(kg: &EquationKG) -> &HyperedgeUniverse {
    &kg.hyperedges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquationFormat {
    Tsv,
    Json,
}

impl EquationFormat {
    /// `.json` selects JSON, anything else TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => EquationFormat::Json,
            _ => EquationFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub complete: usize,
    pub incomplete: usize,
    pub duplicates: usize,
}

#[derive(Deserialize)]
struct JsonEquation {
    educts: Vec<String>,
    enzyme: Option<String>,
    products: Vec<String>,
}

/// Reads an equation file into a fresh knowledge graph.
pub fn parse_equation_file(path: &Path, format: EquationFormat) -> Result<EquationKG, KgError> {
    let mut kg = EquationKG::new();
    ingest_file(&mut kg, path, format)?;
    Ok(kg)
}

/// Appends the equations of a file to an existing graph.
pub fn ingest_file(
    kg: &mut EquationKG,
    path: &Path,
    format: EquationFormat,
) -> Result<IngestStats, KgError> {
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_str(kg, &text, format)
}

pub fn ingest_str(
    kg: &mut EquationKG,
    text: &str,
    format: EquationFormat,
) -> Result<IngestStats, KgError> {
    let mut stats = IngestStats::default();
    let mut tally = |added: Added| match added {
        Added::Complete(_) => stats.complete += 1,
        Added::Incomplete(_) => stats.incomplete += 1,
        Added::Duplicate => stats.duplicates += 1,
    };
    match format {
        EquationFormat::Tsv => {
            for (i, raw) in text.lines().enumerate() {
                let line = i + 1;
                let row = raw.trim_end_matches('\r');
                if row.trim().is_empty() || row.trim_start().starts_with('#') {
                    continue;
                }
                let cols: Vec<&str> = row.split('\t').collect();
                if cols.len() != 3 {
                    return Err(KgError::Malformed {
                        line,
                        reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
                    });
                }
                let educts: Vec<&str> = cols[0].split(';').collect();
                let products: Vec<&str> = cols[2].split(';').collect();
                let added = kg
                    .add_equation(&educts, Some(cols[1]), &products)
                    .map_err(|e| KgError::Malformed {
                        line,
                        reason: e.to_string(),
                    })?;
                tally(added);
            }
        }
        EquationFormat::Json => {
            let rows: Vec<JsonEquation> = serde_json::from_str(text)?;
            for (i, row) in rows.iter().enumerate() {
                let added = kg
                    .add_equation(&row.educts, row.enzyme.as_deref(), &row.products)
                    .map_err(|e| KgError::Malformed {
                        line: i + 1,
                        reason: format!("record {}: {e}", i + 1),
                    })?;
                tally(added);
            }
        }
    }
    if stats.duplicates > 0 {
        log::warn!("dropped {} duplicate equations", stats.duplicates);
    }
    Ok(stats)
}

/// Writes equations back out in the three-column TSV layout.
pub fn write_tsv<'a>(
    kg: &EquationKG,
    triples: impl IntoIterator<Item = &'a EquationTriple>,
) -> String {
    let mut out = String::new();
    for t in triples {
        out.push_str(&kg.describe(t));
        out.push('\n');
    }
    out
}

/// Train:valid:test ratio and shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [u32; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [8, 1, 1],
            seed: 0,
        }
    }
}

/// Indices into `EquationKG::complete` for each part.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn part(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Valid => &self.valid,
            Part::Test => &self.test,
        }
    }

    pub fn triples<'a>(&self, kg: &'a EquationKG, part: Part) -> Vec<&'a EquationTriple> {
        self.part(part).iter().map(|&i| &kg.complete[i]).collect()
    }

    /// Every complete equation in the training part.
    pub fn all_train(kg: &EquationKG) -> Self {
        Self {
            train: (0..kg.complete.len()).collect(),
            ..Default::default()
        }
    }
}

pub const MIN_SPLIT_SIZE: usize = 10;

/// Shuffles complete equations into train/valid/test.
pub fn split(kg: &EquationKG, spec: &SplitSpec) -> Result<Split, KgError> {
    split_with_holdout(kg, spec, &[])
}

/// Like [`split`], but `forced_test` indices always land in the test part.
/// The test quota is filled from the shuffled remainder when the forced set
/// is smaller than it.
pub fn split_with_holdout(
    kg: &EquationKG,
    spec: &SplitSpec,
    forced_test: &[usize],
) -> Result<Split, KgError> {
    let n = kg.complete.len();
    if n < MIN_SPLIT_SIZE {
        return Err(KgError::TooFewTriples {
            found: n,
            min: MIN_SPLIT_SIZE,
        });
    }
    let total: u32 = spec.ratios.iter().sum();
    if spec.ratios.contains(&0) {
        return Err(KgError::InvalidRatios(spec.ratios));
    }
    let quota = |r: u32| ((n as f64) * r as f64 / total as f64).round() as usize;
    let n_valid = quota(spec.ratios[1]);
    let n_test = quota(spec.ratios[2]);

    let forced: HashSet<usize> = forced_test.iter().copied().filter(|&i| i < n).collect();
    let mut forced_sorted: Vec<usize> = forced.iter().copied().collect();
    forced_sorted.sort_unstable();
    let mut rest: Vec<usize> = (0..n).filter(|i| !forced.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rest.shuffle(&mut rng);

    let fill = n_test.saturating_sub(forced_sorted.len()).min(rest.len());
    let mut test = forced_sorted;
    test.extend(rest.drain(..fill));
    let n_valid = n_valid.min(rest.len());
    let valid: Vec<usize> = rest.drain(..n_valid).collect();
    Ok(Split {
        train: rest,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EquationKG {
        let mut kg = EquationKG::new();
        ingest_str(
            &mut kg,
            "c1;c2\te1\tc3;c4\nc2;c3\t?\tc4\n",
            EquationFormat::Tsv,
        )
        .unwrap();
        kg
    }

    #[test]
    fn tsv_row_maps_fields() {
        let kg = toy();
        assert_eq!(kg.complete.len(), 1);
        assert_eq!(kg.incomplete.len(), 1);
        let t = &kg.complete[0];
        let names = |cs: &[CompoundId]| cs.iter().map(|c| kg.compound_name(*c)).collect::<Vec<_>>();
        assert_eq!(names(&t.educts), ["c1", "c2"]);
        assert_eq!(names(&t.products), ["c3", "c4"]);
        assert_eq!(kg.enzyme_name(t.enzyme.unwrap()), "e1");
        let q = &kg.incomplete[0];
        assert_eq!(q.enzyme, None);
        assert_eq!(names(&q.educts), ["c2", "c3"]);
        assert_eq!(names(&q.products), ["c4"]);
    }

    #[test]
    fn repeated_compound_is_deduplicated() {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "c1;c1\te1\tc2\n", EquationFormat::Tsv).unwrap();
        assert_eq!(kg.complete[0].educts, vec![CompoundId(0)]);
    }

    #[test]
    fn interning_is_first_seen_order() {
        let kg = toy();
        let order: Vec<_> = kg.compounds.iter().map(|(_, s)| s).collect();
        assert_eq!(order, ["c1", "c2", "c3", "c4"]);
        for (id, name) in kg.compounds.iter() {
            assert_eq!(kg.compounds.get(name), Some(id));
        }
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let mut kg = EquationKG::new();
        let err = ingest_str(&mut kg, "# header\nc1\te1\tc2\nc1\te1\n", EquationFormat::Tsv)
            .unwrap_err();
        assert!(matches!(err, KgError::Malformed { line: 3, .. }), "{err}");
        let err = ingest_str(&mut kg, "c1\te1\t\n", EquationFormat::Tsv).unwrap_err();
        assert!(matches!(err, KgError::Malformed { line: 1, .. }), "{err}");
        let err = ingest_str(&mut kg, " ; \te1\tc2\n", EquationFormat::Tsv).unwrap_err();
        assert!(matches!(err, KgError::Malformed { line: 1, .. }), "{err}");
    }

    #[test]
    fn duplicate_triples_are_counted_once() {
        let mut kg = EquationKG::new();
        let stats = ingest_str(
            &mut kg,
            "c1;c2\te1\tc3\nc2;c1\te1\tc3\nc1;c2\te2\tc3\n",
            EquationFormat::Tsv,
        )
        .unwrap();
        assert_eq!(stats.duplicates, 1);
        assert_eq!(kg.duplicates, 1);
        assert_eq!(kg.complete.len(), 2);
    }

    #[test]
    fn json_layout() {
        let mut kg = EquationKG::new();
        let text = r#"[{"educts":["c1","c2"],"enzyme":"e1","products":["c3"]},
                       {"educts":["c3"],"enzyme":null,"products":["c1"]}]"#;
        let stats = ingest_str(&mut kg, text, EquationFormat::Json).unwrap();
        assert_eq!((stats.complete, stats.incomplete), (1, 1));
        let err = ingest_str(
            &mut kg,
            r#"[{"educts":[],"enzyme":"e1","products":["c3"]}]"#,
            EquationFormat::Json,
        )
        .unwrap_err();
        assert!(matches!(err, KgError::Malformed { line: 1, .. }));
    }

    #[test]
    fn toy_graph_has_four_hyperedges() {
        let kg = toy();
        let u = hyperedge_universe(&kg);
        assert_eq!(u.len(), 4);
        let t = &kg.complete[0];
        let q = &kg.incomplete[0];
        assert_ne!(t.educt_edge, q.educt_edge);
        assert_ne!(t.product_edge, q.product_edge);
        assert_eq!(u.role(t.educt_edge), Role::Educt);
        assert_eq!(u.role(q.product_edge), Role::Product);
    }

    #[test]
    fn identical_educt_sets_share_a_hyperedge() {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "a;b\te1\tc\nb;a\t?\td\n", EquationFormat::Tsv).unwrap();
        assert_eq!(kg.complete[0].educt_edge, kg.incomplete[0].educt_edge);
        assert_eq!(kg.hyperedges.len(), 3);
    }

    #[test]
    fn role_is_part_of_the_key() {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "c1;c2\te1\tc1;c2\n", EquationFormat::Tsv).unwrap();
        let t = &kg.complete[0];
        assert_ne!(t.educt_edge, t.product_edge);
        assert_eq!(kg.hyperedges.len(), 2);
    }

    fn kg_with(n: usize) -> EquationKG {
        let mut kg = EquationKG::new();
        for i in 0..n {
            kg.add_equation(&[format!("a{i}")], Some("e"), &[format!("b{i}")])
                .unwrap();
        }
        kg
    }

    #[test]
    fn split_sizes() {
        let s = split(&kg_with(100), &SplitSpec { ratios: [8, 1, 1], seed: 7 }).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let s = split(&kg_with(101), &SplitSpec { ratios: [8, 1, 1], seed: 7 }).unwrap();
        let sizes = [s.train.len(), s.valid.len(), s.test.len()];
        assert_eq!(sizes.iter().sum::<usize>(), 101);
        for (got, want) in sizes.iter().zip([80.8, 10.1, 10.1]) {
            assert!((*got as f64 - want).abs() <= 1.0, "{sizes:?}");
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let kg = kg_with(57);
        let spec = SplitSpec { ratios: [8, 1, 1], seed: 3 };
        let a = split(&kg, &spec).unwrap();
        let b = split(&kg, &spec).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
        let c = split(&kg, &SplitSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        assert!(matches!(
            split(&kg_with(9), &SplitSpec::default()),
            Err(KgError::TooFewTriples { found: 9, .. })
        ));
        assert!(matches!(
            split(&kg_with(20), &SplitSpec { ratios: [8, 0, 1], seed: 0 }),
            Err(KgError::InvalidRatios(_))
        ));
    }

    #[test]
    fn holdout_lands_in_test() {
        let kg = kg_with(50);
        let s = split_with_holdout(&kg, &SplitSpec::default(), &[3, 9]).unwrap();
        assert!(s.test.contains(&3) && s.test.contains(&9));
        assert_eq!(s.test.len(), 5);
        assert!(!s.train.contains(&3));
    }
}
