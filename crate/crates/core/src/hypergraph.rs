//! Two-level equation hypergraph.
//!
//! Level one is the compound/hyperedge incidence H(1). Level two is a typed
//! hyperedge/hyperedge adjacency H(2): two hyperedges are linked when their
//! compound sets intersect, and the link type follows from their roles
//! (educt/educt, product/product, or educt/product).

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{CompoundId, EquationKG, HyperedgeId, Role};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown hyperedge {0}")]
    UnknownHyperedge(HyperedgeId),
    #[error("out-of-vocabulary hyperedge: none of its compounds appear in the training graph")]
    OutOfVocabulary,
    #[error("sampling sizes must be at least 1 (got eta1={eta1}, eta2={eta2})")]
    BadLimits { eta1: usize, eta2: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SharingEdgeType {
    EductSharing,
    ProductSharing,
    CrossSharing,
}

impl SharingEdgeType {
    pub const ALL: [SharingEdgeType; 3] = [
        SharingEdgeType::EductSharing,
        SharingEdgeType::ProductSharing,
        SharingEdgeType::CrossSharing,
    ];

    /// Type of the link between two intersecting hyperedges with the given roles.
    pub fn between(a: Role, b: Role) -> Self {
        match (a, b) {
            (Role::Educt, Role::Educt) => SharingEdgeType::EductSharing,
            (Role::Product, Role::Product) => SharingEdgeType::ProductSharing,
            _ => SharingEdgeType::CrossSharing,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for SharingEdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharingEdgeType::EductSharing => "educt",
            SharingEdgeType::ProductSharing => "product",
            SharingEdgeType::CrossSharing => "cross",
        })
    }
}

/// Small set of sharing types carried by one adjacency entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeTypeSet(u8);

impl EdgeTypeSet {
    pub const EMPTY: EdgeTypeSet = EdgeTypeSet(0);

    pub fn single(t: SharingEdgeType) -> Self {
        EdgeTypeSet(t.bit())
    }

    pub fn insert(&mut self, t: SharingEdgeType) {
        self.0 |= t.bit();
    }

    pub fn contains(self, t: SharingEdgeType) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = SharingEdgeType> {
        SharingEdgeType::ALL
            .into_iter()
            .filter(move |t| self.contains(*t))
    }

    /// Homogeneous view: any sharing collapses to a single type.
    pub fn collapsed(self) -> Self {
        if self.is_empty() {
            self
        } else {
            EdgeTypeSet::single(SharingEdgeType::EductSharing)
        }
    }
}

/// Sparse boolean H(1): members per hyperedge and the transposed view per compound.
#[derive(Debug, Clone, Default)]
pub struct IncidenceMatrix {
    members: Vec<Vec<CompoundId>>,
    memberships: Vec<Vec<HyperedgeId>>,
}

impl IncidenceMatrix {
    pub fn get(&self, c: CompoundId, e: HyperedgeId) -> bool {
        self.members
            .get(e.index())
            .is_some_and(|m| m.binary_search(&c).is_ok())
    }

    pub fn members(&self, e: HyperedgeId) -> &[CompoundId] {
        &self.members[e.index()]
    }

    pub fn memberships(&self, c: CompoundId) -> &[HyperedgeId] {
        self.memberships
            .get(c.index())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn num_compounds(&self) -> usize {
        self.memberships.len()
    }

    pub fn num_hyperedges(&self) -> usize {
        self.members.len()
    }
}

/// Sparse typed H(2). Each row is sorted by neighbor id; the diagonal is empty.
#[derive(Debug, Clone, Default)]
pub struct HyperedgeAdjacency {
    rows: Vec<Vec<(HyperedgeId, EdgeTypeSet)>>,
}

impl HyperedgeAdjacency {
    pub fn neighbors(&self, e: HyperedgeId) -> &[(HyperedgeId, EdgeTypeSet)] {
        &self.rows[e.index()]
    }

    pub fn get(&self, i: HyperedgeId, j: HyperedgeId) -> EdgeTypeSet {
        let row = &self.rows[i.index()];
        match row.binary_search_by_key(&j, |(n, _)| *n) {
            Ok(k) => row[k].1,
            Err(_) => EdgeTypeSet::EMPTY,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// All ordered typed edges `(i, j, type)`.
    pub fn edges(&self) -> impl Iterator<Item = (HyperedgeId, HyperedgeId, SharingEdgeType)> + '_ {
        self.rows.iter().enumerate().flat_map(|(i, row)| {
            row.iter().flat_map(move |(j, set)| {
                set.iter().map(move |t| (HyperedgeId(i as u32), *j, t))
            })
        })
    }
}

/// Neighbor and compound budgets for one sub-hypergraph sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLimits {
    pub eta1: usize,
    pub eta2: usize,
}

impl SampleLimits {
    fn check(self) -> Result<(), GraphError> {
        if self.eta1 == 0 || self.eta2 == 0 {
            return Err(GraphError::BadLimits {
                eta1: self.eta1,
                eta2: self.eta2,
            });
        }
        Ok(())
    }
}

/// Padding marker for unused slots. Never dereferenced when the slot is masked.
pub const PAD_COMPOUND: CompoundId = CompoundId(u32::MAX);
pub const PAD_HYPEREDGE: HyperedgeId = HyperedgeId(u32::MAX);

/// A sampled compound list of fixed width `eta2` with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompoundSlots {
    pub ids: Vec<CompoundId>,
    pub valid: Vec<bool>,
}

impl CompoundSlots {
    pub fn real(&self) -> impl Iterator<Item = CompoundId> + '_ {
        self.ids
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(c, _)| *c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSlot {
    pub hyperedge: HyperedgeId,
    pub types: EdgeTypeSet,
    pub compounds: CompoundSlots,
}

/// The (eta1, eta2)-sampled neighborhood of one target hyperedge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubHypergraph {
    /// `None` when the target was attached at inference time.
    pub target: Option<HyperedgeId>,
    pub target_role: Role,
    pub target_compounds: CompoundSlots,
    pub neighbors: Vec<NeighborSlot>,
    pub neighbor_valid: Vec<bool>,
}

impl SubHypergraph {
    pub fn real_neighbors(&self) -> impl Iterator<Item = &NeighborSlot> {
        self.neighbors
            .iter()
            .zip(&self.neighbor_valid)
            .filter(|(_, v)| **v)
            .map(|(n, _)| n)
    }

    pub fn num_neighbors(&self) -> usize {
        self.neighbor_valid.iter().filter(|v| **v).count()
    }
}

/// Built H(1) and H(2) over every complete and incomplete equation.
#[derive(Debug, Clone, Default)]
pub struct Hypergraph {
    pub incidence: IncidenceMatrix,
    pub adjacency: HyperedgeAdjacency,
    roles: Vec<Role>,
    pub homogeneous: bool,
}

pub fn build(kg: &EquationKG, homogeneous: bool) -> Hypergraph {
    let n_edges = kg.hyperedges.len();
    let mut members = Vec::with_capacity(n_edges);
    let mut roles = Vec::with_capacity(n_edges);
    let mut memberships = vec![Vec::new(); kg.num_compounds()];
    for (id, key) in kg.hyperedges.iter() {
        for c in &key.compounds {
            memberships[c.index()].push(id);
        }
        members.push(key.compounds.clone());
        roles.push(key.role);
    }

    let mut pairs: Vec<(u32, u32, SharingEdgeType)> = Vec::new();
    for edges in &memberships {
        for &i in edges {
            for &j in edges {
                if i != j {
                    let t = SharingEdgeType::between(roles[i.index()], roles[j.index()]);
                    pairs.push((i.0, j.0, t));
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut rows: Vec<Vec<(HyperedgeId, EdgeTypeSet)>> = vec![Vec::new(); n_edges];
    for (i, j, t) in pairs {
        let row = &mut rows[i as usize];
        match row.last_mut() {
            Some((last, set)) if last.0 == j => set.insert(t),
            _ => row.push((HyperedgeId(j), EdgeTypeSet::single(t))),
        }
    }

    Hypergraph {
        incidence: IncidenceMatrix {
            members,
            memberships,
        },
        adjacency: HyperedgeAdjacency { rows },
        roles,
        homogeneous,
    }
}

impl Hypergraph {
    pub fn num_hyperedges(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, e: HyperedgeId) -> Role {
        self.roles[e.index()]
    }

    fn effective(&self, t: EdgeTypeSet) -> EdgeTypeSet {
        if self.homogeneous {
            t.collapsed()
        } else {
            t
        }
    }

    /// Debug dump, one `i<TAB>j<TAB>type` line per typed edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, j, t) in self.adjacency.edges() {
            out.push_str(&format!("{i}\t{j}\t{t}\n"));
        }
        out
    }

    fn sample_compounds<R: Rng + ?Sized>(
        members: &[CompoundId],
        eta2: usize,
        rng: &mut R,
    ) -> CompoundSlots {
        let chosen = take_or_sample(members, eta2, rng);
        pad(chosen, eta2, PAD_COMPOUND)
    }

    fn assemble<R: Rng + ?Sized>(
        &self,
        target: Option<HyperedgeId>,
        role: Role,
        own: &[CompoundId],
        candidates: &[(HyperedgeId, EdgeTypeSet)],
        limits: SampleLimits,
        rng: &mut R,
    ) -> SubHypergraph {
        let target_compounds = Self::sample_compounds(own, limits.eta2, rng);
        let chosen = take_or_sample(candidates, limits.eta1, rng);
        let mut neighbors = Vec::with_capacity(limits.eta1);
        let mut neighbor_valid = Vec::with_capacity(limits.eta1);
        for (e, types) in chosen {
            neighbors.push(NeighborSlot {
                hyperedge: e,
                types: self.effective(types),
                compounds: Self::sample_compounds(self.incidence.members(e), limits.eta2, rng),
            });
            neighbor_valid.push(true);
        }
        while neighbors.len() < limits.eta1 {
            neighbors.push(NeighborSlot {
                hyperedge: PAD_HYPEREDGE,
                types: EdgeTypeSet::EMPTY,
                compounds: pad(Vec::new(), limits.eta2, PAD_COMPOUND),
            });
            neighbor_valid.push(false);
        }
        SubHypergraph {
            target,
            target_role: role,
            target_compounds,
            neighbors,
            neighbor_valid,
        }
    }

    /// Samples up to `eta1` H(2) neighbors of `target`, and up to `eta2`
    /// member compounds for the target and each sampled neighbor.
    pub fn sample_neighborhood<R: Rng + ?Sized>(
        &self,
        target: HyperedgeId,
        limits: SampleLimits,
        rng: &mut R,
    ) -> Result<SubHypergraph, GraphError> {
        limits.check()?;
        if target.index() >= self.num_hyperedges() {
            return Err(GraphError::UnknownHyperedge(target));
        }
        Ok(self.assemble(
            Some(target),
            self.role(target),
            self.incidence.members(target),
            self.adjacency.neighbors(target),
            limits,
            rng,
        ))
    }

    /// Every built hyperedge intersecting `compounds`, typed as if a new
    /// hyperedge with `role` were added. Unknown compounds are ignored.
    pub fn attached_neighbors(
        &self,
        compounds: &[CompoundId],
        role: Role,
    ) -> Vec<(HyperedgeId, EdgeTypeSet)> {
        let mut hits: Vec<HyperedgeId> = compounds
            .iter()
            .flat_map(|c| self.incidence.memberships(*c).iter().copied())
            .collect();
        hits.sort_unstable();
        hits.dedup();
        hits.into_iter()
            .map(|e| (e, EdgeTypeSet::single(SharingEdgeType::between(role, self.role(e)))))
            .collect()
    }

    /// Builds a sub-hypergraph for a compound set that may not be a hyperedge
    /// of the graph. Neighbors are drawn from [`Self::attached_neighbors`].
    pub fn attach_test_hyperedge<R: Rng + ?Sized>(
        &self,
        compounds: &[CompoundId],
        role: Role,
        limits: SampleLimits,
        rng: &mut R,
    ) -> Result<SubHypergraph, GraphError> {
        limits.check()?;
        let known: Vec<CompoundId> = crate::kg::canonical_set(
            compounds
                .iter()
                .copied()
                .filter(|c| !self.incidence.memberships(*c).is_empty()),
        );
        if known.len() < compounds.len() {
            log::warn!(
                "dropped {} unknown compounds from attached hyperedge",
                compounds.len() - known.len()
            );
        }
        if known.is_empty() {
            return Err(GraphError::OutOfVocabulary);
        }
        let candidates = self.attached_neighbors(&known, role);
        Ok(self.assemble(None, role, &known, &candidates, limits, rng))
    }
}

/// Uniform sample without replacement, or everything when under budget.
fn take_or_sample<T: Copy, R: Rng + ?Sized>(items: &[T], budget: usize, rng: &mut R) -> Vec<T> {
    if items.len() <= budget {
        return items.to_vec();
    }
    let mut idx = index::sample(rng, items.len(), budget).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

fn pad(mut ids: Vec<CompoundId>, width: usize, filler: CompoundId) -> CompoundSlots {
    let mut valid = vec![true; ids.len()];
    ids.resize(width, filler);
    valid.resize(width, false);
    CompoundSlots { ids, valid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{ingest_str, EquationFormat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// q1: c1 + c2 -> c3 + c4 ; q2: c2 + c3 -> c4.
    fn toy() -> (EquationKG, [HyperedgeId; 4]) {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "c1;c2\te1\tc3;c4\nc2;c3\t?\tc4\n", EquationFormat::Tsv).unwrap();
        let (q1, q2) = (&kg.complete[0], &kg.incomplete[0]);
        let ids = [q1.educt_edge, q1.product_edge, q2.educt_edge, q2.product_edge];
        (kg, ids)
    }

    fn c(kg: &EquationKG, name: &str) -> CompoundId {
        kg.compound_id(name).unwrap()
    }

    #[test]
    fn toy_adjacency() {
        let (kg, [s1, p1, s2, p2]) = toy();
        let g = build(&kg, false);
        let single = EdgeTypeSet::single;
        assert_eq!(g.adjacency.get(s1, s2), single(SharingEdgeType::EductSharing));
        assert_eq!(g.adjacency.get(p1, p2), single(SharingEdgeType::ProductSharing));
        assert_eq!(g.adjacency.get(s2, p1), single(SharingEdgeType::CrossSharing));
        assert_eq!(g.adjacency.get(p1, s2), single(SharingEdgeType::CrossSharing));
        assert!(g.adjacency.get(s1, p1).is_empty());
        assert!(g.adjacency.get(s1, s1).is_empty());
        // three undirected edges, stored in both directions
        assert_eq!(g.adjacency.edge_count(), 6);
    }

    #[test]
    fn toy_incidence() {
        let (kg, [_, _, _, p2]) = toy();
        let g = build(&kg, false);
        let nonzero: Vec<_> = (0..kg.num_compounds() as u32)
            .map(CompoundId)
            .filter(|cid| g.incidence.get(*cid, p2))
            .collect();
        assert_eq!(nonzero, vec![c(&kg, "c4")]);
        assert_eq!(g.incidence.memberships(c(&kg, "c2")).len(), 2);
    }

    #[test]
    fn disjoint_equations_have_no_links() {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "a\te1\tb\nc\te2\td\n", EquationFormat::Tsv).unwrap();
        assert_eq!(build(&kg, false).adjacency.edge_count(), 0);
    }

    #[test]
    fn neighborhood_of_s1() {
        let (kg, [s1, _, s2, _]) = toy();
        let g = build(&kg, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = g
            .sample_neighborhood(s1, SampleLimits { eta1: 5, eta2: 5 }, &mut rng)
            .unwrap();
        let got: Vec<_> = sub.real_neighbors().map(|n| n.hyperedge).collect();
        assert_eq!(got, vec![s2]);
        assert_eq!(sub.neighbors.len(), 5);
        assert_eq!(sub.target_compounds.real().count(), 2);
    }

    #[test]
    fn isolated_hyperedge_has_no_neighbors() {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "a\te1\tb\n", EquationFormat::Tsv).unwrap();
        let g = build(&kg, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = g
            .sample_neighborhood(kg.complete[0].educt_edge, SampleLimits { eta1: 3, eta2: 2 }, &mut rng)
            .unwrap();
        assert_eq!(sub.num_neighbors(), 0);
        assert_eq!(sub.target_compounds.real().collect::<Vec<_>>(), vec![c(&kg, "a")]);
    }

    #[test]
    fn sampling_errors() {
        let (kg, _) = toy();
        let g = build(&kg, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lim = SampleLimits { eta1: 1, eta2: 1 };
        assert_eq!(
            g.sample_neighborhood(HyperedgeId(99), lim, &mut rng),
            Err(GraphError::UnknownHyperedge(HyperedgeId(99)))
        );
        assert!(g
            .sample_neighborhood(HyperedgeId(0), SampleLimits { eta1: 0, eta2: 1 }, &mut rng)
            .is_err());
    }

    #[test]
    fn attach_an_unseen_educt_set() {
        let (kg, [s1, p1, s2, p2]) = toy();
        let g = build(&kg, false);
        let got = g.attached_neighbors(&[c(&kg, "c2"), c(&kg, "c4")], Role::Educt);
        use SharingEdgeType::*;
        let mut want = vec![
            (s1, EdgeTypeSet::single(EductSharing)),
            (s2, EdgeTypeSet::single(EductSharing)),
            (p1, EdgeTypeSet::single(CrossSharing)),
            (p2, EdgeTypeSet::single(CrossSharing)),
        ];
        want.sort();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        assert_eq!(got_sorted, want);
    }

    #[test]
    fn attach_rejects_unknown_compounds() {
        let (kg, _) = toy();
        let g = build(&kg, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lim = SampleLimits { eta1: 5, eta2: 5 };
        assert_eq!(
            g.attach_test_hyperedge(&[CompoundId(1000)], Role::Educt, lim, &mut rng),
            Err(GraphError::OutOfVocabulary)
        );
        // a known compound alongside an unknown one is fine
        let sub = g
            .attach_test_hyperedge(&[c(&kg, "c1"), CompoundId(1000)], Role::Educt, lim, &mut rng)
            .unwrap();
        assert_eq!(sub.target, None);
        assert_eq!(sub.target_compounds.real().count(), 1);
    }

    #[test]
    fn attaching_an_existing_set_reproduces_its_neighborhood() {
        let (kg, ids) = toy();
        let g = build(&kg, false);
        for e in ids {
            let attached: Vec<_> = g
                .attached_neighbors(g.incidence.members(e), g.role(e))
                .into_iter()
                .filter(|(n, _)| *n != e)
                .collect();
            assert_eq!(attached, g.adjacency.neighbors(e).to_vec());
        }
    }

    #[test]
    fn homogeneous_collapses_types() {
        let (kg, [s1, ..]) = toy();
        let g = build(&kg, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = g
            .sample_neighborhood(s1, SampleLimits { eta1: 5, eta2: 5 }, &mut rng)
            .unwrap();
        for n in sub.real_neighbors() {
            assert_eq!(n.types, EdgeTypeSet::single(SharingEdgeType::EductSharing));
        }
        // the stored adjacency keeps its types
        assert_eq!(g.adjacency.edge_count(), 6);
    }

    #[test]
    fn dump_lists_typed_edges() {
        let (kg, _) = toy();
        let dump = build(&kg, false).dump();
        assert_eq!(dump.lines().count(), 6);
        assert!(dump.lines().all(|l| l.split('\t').count() == 3));
    }
}
