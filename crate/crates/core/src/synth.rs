//! Random equation graphs with planted relation patterns.
//!
//! Every enzyme owns an educt pool and a product pool of compounds and draws
//! its equations from them, so compounds are shared across equations of the
//! same enzyme. Symmetric enzymes emit `⟨P, m, S⟩` next to every
//! `⟨S, m, P⟩`; an inverse pair `(m1, m2)` emits `⟨P, m2, S⟩` next to every
//! `⟨S, m1, P⟩`. A fraction of these completing triples is marked held out.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Added, EquationKG, KgError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Kg(#[from] KgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub compounds: usize,
    pub enzymes: usize,
    pub complete: usize,
    pub incomplete: usize,
    pub educt_size: f64,
    pub product_size: f64,
    /// Fraction of enzymes that are symmetric.
    pub symmetric_fraction: f64,
    /// Fraction of enzymes that belong to an inverse pair.
    pub inverse_fraction: f64,
    /// Compounds in each enzyme's educt and product pools.
    pub pool_size: usize,
    /// Fraction of pattern-completing triples marked held out.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            compounds: 50,
            enzymes: 20,
            complete: 200,
            incomplete: 100,
            educt_size: 2.0,
            product_size: 2.0,
            symmetric_fraction: 0.0,
            inverse_fraction: 0.0,
            pool_size: 8,
            heldout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Plain,
    Symmetric,
    /// Inverse of the enzyme with this index.
    Inverse(usize),
}

/// One generated equation; `enzyme == None` for incomplete ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SynthEquation {
    pub educts: Vec<usize>,
    pub enzyme: Option<usize>,
    pub products: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub patterns: Vec<Pattern>,
    pub complete: Vec<SynthEquation>,
    pub incomplete: Vec<SynthEquation>,
    /// Indices into `complete` of held-out pattern-completing triples.
    pub heldout: Vec<usize>,
    /// Indices into `complete` of every pattern-completing triple.
    pub completing: Vec<usize>,
}

pub fn compound_name(i: usize) -> String {
    format!("c{i}")
}

pub fn enzyme_name(i: usize) -> String {
    format!("e{i}")
}

impl SyntheticSpec {
    fn check(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Infeasible(m));
        if self.compounds == 0 || self.enzymes == 0 || self.complete == 0 || self.pool_size == 0 {
            return bad("compounds, enzymes, complete and pool_size must be positive".into());
        }
        for (name, f) in [
            ("symmetric_fraction", self.symmetric_fraction),
            ("inverse_fraction", self.inverse_fraction),
            ("heldout_fraction", self.heldout_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} is outside [0, 1]"));
            }
        }
        if self.pool_size > self.compounds {
            return bad(format!("pool_size {} exceeds {} compounds", self.pool_size, self.compounds));
        }
        for (name, m) in [("educt_size", self.educt_size), ("product_size", self.product_size)] {
            if m.is_nan() || m < 1.0 || max_size(m) > self.pool_size {
                return bad(format!("{name} = {m} needs sets of 1..={} from a pool of {}", max_size(m), self.pool_size));
            }
        }
        let (sym, pairs) = self.pattern_counts();
        if sym + 2 * pairs > self.enzymes {
            return bad(format!("{sym} symmetric enzymes and {pairs} inverse pairs exceed {} enzymes", self.enzymes));
        }
        if sym + 2 * pairs == self.enzymes && self.complete % 2 == 1 {
            return bad(format!("every enzyme is patterned, so complete = {} must be even", self.complete));
        }
        Ok(())
    }

    fn pattern_counts(&self) -> (usize, usize) {
        let sym = (self.symmetric_fraction * self.enzymes as f64).round() as usize;
        let pairs = ((self.inverse_fraction * self.enzymes as f64).round() as usize) / 2;
        (sym, pairs)
    }
}

/// Set sizes are drawn uniformly from `1..=max_size(mean)`.
fn max_size(mean: f64) -> usize {
    (2.0 * mean - 1.0).round().max(1.0) as usize
}

fn draw_set<R: Rng>(pool: &[usize], mean: f64, rng: &mut R) -> Vec<usize> {
    let k = rng.gen_range(1..=max_size(mean));
    let mut s: Vec<usize> = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    s.sort_unstable();
    s
}

fn draw_pool<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<usize> {
    let mut p = index::sample(rng, spec.compounds, spec.pool_size).into_vec();
    p.sort_unstable();
    p
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, SynthError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (sym, pairs) = spec.pattern_counts();
    let mut patterns = vec![Pattern::Plain; spec.enzymes];
    for p in patterns.iter_mut().take(sym) {
        *p = Pattern::Symmetric;
    }
    for k in 0..pairs {
        let (a, b) = (sym + 2 * k, sym + 2 * k + 1);
        patterns[a] = Pattern::Inverse(b);
        patterns[b] = Pattern::Inverse(a);
    }

    let mut pools: Vec<(Vec<usize>, Vec<usize>)> = (0..spec.enzymes)
        .map(|_| (draw_pool(spec, &mut rng), draw_pool(spec, &mut rng)))
        .collect();
    for k in 0..pairs {
        let (a, b) = (sym + 2 * k, sym + 2 * k + 1);
        pools[b] = (pools[a].1.clone(), pools[a].0.clone());
    }
    let plain: Vec<usize> = (0..spec.enzymes).filter(|&m| patterns[m] == Pattern::Plain).collect();
    // second members of inverse pairs are only reached through their partner
    let sources: Vec<usize> = (0..spec.enzymes)
        .filter(|&m| !matches!(patterns[m], Pattern::Inverse(p) if p < m))
        .collect();

    let mut seen: HashSet<SynthEquation> = HashSet::new();
    let mut complete = Vec::with_capacity(spec.complete);
    let mut completing = Vec::new();
    let mut heldout = Vec::new();
    let budget = 1000 * (spec.complete + spec.incomplete) + 1000;
    let mut attempts = 0;
    while complete.len() < spec.complete {
        attempts += 1;
        if attempts > budget {
            return Err(SynthError::Infeasible(format!(
                "only {} distinct complete equations found; enlarge pools or compounds",
                complete.len()
            )));
        }
        let remaining = spec.complete - complete.len();
        let m = if remaining == 1 {
            plain[rng.gen_range(0..plain.len())]
        } else {
            sources[rng.gen_range(0..sources.len())]
        };
        let (ep, pp) = &pools[m];
        let s = draw_set(ep, spec.educt_size, &mut rng);
        let p = draw_set(pp, spec.product_size, &mut rng);
        if s == p {
            continue;
        }
        let base = SynthEquation {
            educts: s.clone(),
            enzyme: Some(m),
            products: p.clone(),
        };
        let partner = match patterns[m] {
            Pattern::Plain => None,
            Pattern::Symmetric => Some(SynthEquation {
                educts: p,
                enzyme: Some(m),
                products: s,
            }),
            Pattern::Inverse(other) => Some(SynthEquation {
                educts: p,
                enzyme: Some(other),
                products: s,
            }),
        };
        if seen.contains(&base) || partner.as_ref().is_some_and(|q| seen.contains(q)) {
            continue;
        }
        seen.insert(base.clone());
        complete.push(base);
        if let Some(q) = partner {
            seen.insert(q.clone());
            completing.push(complete.len());
            if rng.gen_bool(spec.heldout_fraction) {
                heldout.push(complete.len());
            }
            complete.push(q);
        }
    }

    let mut incomplete = Vec::with_capacity(spec.incomplete);
    let mut pairs_seen: HashSet<(Vec<usize>, Vec<usize>)> =
        complete.iter().map(|e| (e.educts.clone(), e.products.clone())).collect();
    while incomplete.len() < spec.incomplete {
        attempts += 1;
        if attempts > budget {
            return Err(SynthError::Infeasible(format!(
                "only {} distinct incomplete equations found",
                incomplete.len()
            )));
        }
        let m = rng.gen_range(0..spec.enzymes);
        let (ep, pp) = &pools[m];
        let s = draw_set(ep, spec.educt_size, &mut rng);
        let p = draw_set(pp, spec.product_size, &mut rng);
        if s == p || !pairs_seen.insert((s.clone(), p.clone())) {
            continue;
        }
        incomplete.push(SynthEquation {
            educts: s,
            enzyme: None,
            products: p,
        });
    }

    Ok(SyntheticData {
        spec: spec.clone(),
        patterns,
        complete,
        incomplete,
        heldout,
        completing,
    })
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|&i| compound_name(i)).collect::<Vec<_>>().join(";")
}

fn tsv(eqs: impl IntoIterator<Item = impl std::borrow::Borrow<SynthEquation>>) -> String {
    let mut out = String::new();
    for e in eqs {
        let e = e.borrow();
        let enzyme = e.enzyme.map_or_else(|| "?".to_string(), enzyme_name);
        let _ = writeln!(out, "{}\t{}\t{}", join(&e.educts), enzyme, join(&e.products));
    }
    out
}

/// Paths written by [`SyntheticData::write`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub complete: PathBuf,
    pub incomplete: PathBuf,
    pub heldout: PathBuf,
    pub patterns: PathBuf,
}

impl SyntheticData {
    pub fn complete_tsv(&self) -> String {
        tsv(&self.complete)
    }

    pub fn incomplete_tsv(&self) -> String {
        tsv(&self.incomplete)
    }

    pub fn heldout_tsv(&self) -> String {
        tsv(self.heldout.iter().map(|&i| &self.complete[i]))
    }

    /// `enzyme<TAB>pattern<TAB>partner` per enzyme.
    pub fn patterns_tsv(&self) -> String {
        let mut out = String::new();
        for (m, p) in self.patterns.iter().enumerate() {
            let (kind, partner) = match p {
                Pattern::Plain => ("plain", String::new()),
                Pattern::Symmetric => ("symmetric", String::new()),
                Pattern::Inverse(o) => ("inverse", enzyme_name(*o)),
            };
            let _ = writeln!(out, "{}\t{kind}\t{partner}", enzyme_name(m));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<SynthFiles, SynthError> {
        fs::create_dir_all(dir)?;
        let files = SynthFiles {
            complete: dir.join("complete.tsv"),
            incomplete: dir.join("incomplete.tsv"),
            heldout: dir.join("heldout.tsv"),
            patterns: dir.join("patterns.tsv"),
        };
        fs::write(&files.complete, self.complete_tsv())?;
        fs::write(&files.incomplete, self.incomplete_tsv())?;
        fs::write(&files.heldout, self.heldout_tsv())?;
        fs::write(&files.patterns, self.patterns_tsv())?;
        Ok(files)
    }

    /// Loads the data into a graph. Complete equation `i` becomes
    /// `kg.complete[i]`.
    pub fn to_kg(&self) -> Result<EquationKG, SynthError> {
        let mut kg = EquationKG::new();
        let names = |ids: &[usize]| ids.iter().map(|&i| compound_name(i)).collect::<Vec<_>>();
        for e in self.complete.iter().chain(&self.incomplete) {
            let enzyme = e.enzyme.map(enzyme_name);
            if let Added::Duplicate = kg.add_equation(&names(&e.educts), enzyme.as_deref(), &names(&e.products))? {
                return Err(SynthError::Infeasible("generator produced a duplicate equation".into()));
            }
        }
        Ok(kg)
    }
}

/// Checks the planted closures on a set of `(educts, enzyme, products)`
/// triples. Returns the first violation.
pub fn check_closure(triples: &[SynthEquation], patterns: &[Pattern]) -> Result<(), String> {
    let set: HashSet<&SynthEquation> = triples.iter().collect();
    for t in triples {
        let Some(m) = t.enzyme else { continue };
        let want = match patterns[m] {
            Pattern::Plain => continue,
            Pattern::Symmetric => m,
            Pattern::Inverse(o) => o,
        };
        let mirror = SynthEquation {
            educts: t.products.clone(),
            enzyme: Some(want),
            products: t.educts.clone(),
        };
        if !set.contains(&mirror) {
            return Err(format!("{t:?} has no partner {mirror:?}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{parse_equation_file, EquationFormat};

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = SyntheticSpec {
            seed: 11,
            symmetric_fraction: 0.5,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_eq!(a.complete_tsv(), generate(&spec).unwrap().complete_tsv());
    }

    #[test]
    fn fully_symmetric_graph_is_closed() {
        let spec = SyntheticSpec {
            symmetric_fraction: 1.0,
            complete: 120,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        assert_eq!(d.complete.len(), 120);
        check_closure(&d.complete, &d.patterns).unwrap();
        for t in &d.complete {
            assert_eq!(d.patterns[t.enzyme.unwrap()], Pattern::Symmetric);
        }
    }

    #[test]
    fn inverse_pairs_are_closed() {
        let spec = SyntheticSpec {
            inverse_fraction: 0.4,
            symmetric_fraction: 0.2,
            complete: 300,
            seed: 3,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        check_closure(&d.complete, &d.patterns).unwrap();
        assert_eq!(d.patterns.iter().filter(|p| matches!(p, Pattern::Inverse(_))).count(), 8);
        let mut broken = d.complete.clone();
        let victim = d.completing[0];
        broken.remove(victim);
        assert!(check_closure(&broken, &d.patterns).is_err());
    }

    #[test]
    fn files_parse_back_with_matching_counts() {
        let spec = SyntheticSpec {
            compounds: 50,
            enzymes: 20,
            complete: 200,
            incomplete: 100,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = d.write(dir.path()).unwrap();
        let complete = parse_equation_file(&files.complete, EquationFormat::Tsv).unwrap();
        let incomplete = parse_equation_file(&files.incomplete, EquationFormat::Tsv).unwrap();
        assert_eq!(complete.complete.len(), 200);
        assert_eq!(incomplete.incomplete.len(), 100);
        let kg = d.to_kg().unwrap();
        assert_eq!((kg.complete.len(), kg.incomplete.len()), (200, 100));
        assert!(kg.num_compounds() <= 50 && kg.num_enzymes() <= 20);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let too_many = SyntheticSpec {
            symmetric_fraction: 0.8,
            inverse_fraction: 0.4,
            ..Default::default()
        };
        assert!(matches!(generate(&too_many), Err(SynthError::Infeasible(_))));
        let odd = SyntheticSpec {
            symmetric_fraction: 1.0,
            complete: 101,
            ..Default::default()
        };
        assert!(generate(&odd).is_err());
        let crowded = SyntheticSpec {
            compounds: 3,
            pool_size: 2,
            educt_size: 1.0,
            product_size: 1.0,
            complete: 500,
            incomplete: 0,
            ..Default::default()
        };
        assert!(matches!(generate(&crowded), Err(SynthError::Infeasible(_))));
        let bad_fraction = SyntheticSpec {
            heldout_fraction: 1.5,
            ..Default::default()
        };
        assert!(generate(&bad_fraction).is_err());
    }
}
