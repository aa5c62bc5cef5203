//! Hypergraph transformer over sampled sub-hypergraphs.
//!
//! A hyperedge starts from the mean of its member compound features. Each
//! layer lets the target attend over its member compounds (membership edges)
//! and its sampled neighbor hyperedges (typed sharing edges); the edge type
//! embedding is added to the neighbor state before the key and value
//! projections. Attention is followed by residual + layer norm, a
//! feed-forward block with bias, and a second residual + layer norm.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::hypergraph::{EdgeTypeSet, SubHypergraph};
use crate::kg::{CompoundId, HyperedgeId};

/// Rows of the edge-type table: the three sharing types, then membership.
pub const NUM_EDGE_TYPES: usize = 4;
pub const MEMBERSHIP_EDGE: usize = 3;

/// Default runtime cap on embedding norms.
pub const DEFAULT_NORM_CAP: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("hyperedge embedding is not finite or exceeds norm cap {cap}")]
    Degenerate { cap: f64 },
    #[error("sub-hypergraph target has no compounds")]
    EmptyTarget,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub norm1_scale: ParamId,
    pub norm1_shift: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
    pub norm2_scale: ParamId,
    pub norm2_shift: ParamId,
}

/// Handles into a [`ParamStore`] for every encoder tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderParams {
    pub dim: usize,
    pub hidden: usize,
    pub compounds: ParamId,
    pub edge_types: ParamId,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// Parameters that are not layer-norm scale/shift.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.compounds, self.edge_types];
        for l in &self.layers {
            ids.extend([
                l.query, l.key, l.value, l.ff_in, l.ff_in_bias, l.ff_out, l.ff_out_bias,
            ]);
        }
        ids
    }
}

/// Registers encoder tensors in `store`. Weights are uniform in
/// `[-1/sqrt(dim), 1/sqrt(dim)]`; layer norms start as the identity.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    num_compounds: usize,
    dim: usize,
    hidden: usize,
    layers: usize,
    rng: &mut R,
) -> EncoderParams {
    let bound = 1.0 / (dim as f64).sqrt();
    let compounds = store.add("encoder.compounds", Tensor::uniform(&[num_compounds, dim], bound, rng));
    let edge_types = store.add("encoder.edge_types", Tensor::uniform(&[NUM_EDGE_TYPES, dim], bound, rng));
    let layers = (0..layers.max(1))
        .map(|l| {
            let mut add = |name: &str, t: Tensor| store.add(format!("encoder.layer{l}.{name}"), t);
            LayerParams {
                query: add("query", Tensor::uniform(&[dim, dim], bound, rng)),
                key: add("key", Tensor::uniform(&[dim, dim], bound, rng)),
                value: add("value", Tensor::uniform(&[dim, dim], bound, rng)),
                norm1_scale: add("norm1.scale", Tensor::full(&[dim], 1.0)),
                norm1_shift: add("norm1.shift", Tensor::zeros(&[dim])),
                ff_in: add("ff.in", Tensor::uniform(&[dim, hidden], bound, rng)),
                ff_in_bias: add("ff.in_bias", Tensor::uniform(&[hidden], bound, rng)),
                ff_out: add("ff.out", Tensor::uniform(&[hidden, dim], bound, rng)),
                ff_out_bias: add("ff.out_bias", Tensor::uniform(&[dim], bound, rng)),
                norm2_scale: add("norm2.scale", Tensor::full(&[dim], 1.0)),
                norm2_shift: add("norm2.shift", Tensor::zeros(&[dim])),
            }
        })
        .collect();
    EncoderParams {
        dim,
        hidden,
        compounds,
        edge_types,
        layers,
    }
}

/// Dropout applied to attention weights and the feed-forward hidden layer.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Dropout<'_> {
    pub(crate) fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        Some(
            (0..len)
                .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }
}

/// Edge label of one context slot seen by the attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Membership,
    Sharing(EdgeTypeSet),
}

impl SlotKind {
    fn selector(self) -> [f64; NUM_EDGE_TYPES] {
        let mut row = [0.0; NUM_EDGE_TYPES];
        match self {
            SlotKind::Membership => row[MEMBERSHIP_EDGE] = 1.0,
            SlotKind::Sharing(set) => {
                for t in set.iter() {
                    row[t.index()] = 1.0;
                }
            }
        }
        row
    }
}

/// One transformer step for a single target state `[1, n]`.
///
/// `context` holds one row per slot; `valid[j] == false` masks slot `j`.
/// With no valid slot the attention term is dropped and only the residual
/// path through both normalizations remains.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    g: &mut Graph,
    enc: &EncoderParams,
    layer: usize,
    target: Var,
    context: Option<Var>,
    kinds: &[SlotKind],
    valid: &[bool],
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, DiffError> {
    let p = &enc.layers[layer];
    let mut residual = target;
    if let Some(ctx) = context.filter(|_| valid.iter().any(|v| *v)) {
        let mut sel = Vec::with_capacity(kinds.len() * NUM_EDGE_TYPES);
        for k in kinds {
            sel.extend_from_slice(&k.selector());
        }
        let sel = g.constant(Tensor::matrix(kinds.len(), NUM_EDGE_TYPES, sel)?);
        let types = g.param(enc.edge_types)?;
        let edge_vecs = g.matmul(sel, types)?;
        let ctx = g.add(ctx, edge_vecs)?;
        let (wq, wk, wv) = (g.param(p.query)?, g.param(p.key)?, g.param(p.value)?);
        let q = g.matmul(target, wq)?;
        let k = g.matmul(ctx, wk)?;
        let v = g.matmul(ctx, wv)?;
        let keep = dropout.as_mut().and_then(|d| d.mask(valid.len()));
        let attended = g.scaled_dot_attention(q, k, v, valid, keep)?;
        residual = g.add(target, attended)?;
    }
    let (s1, b1) = (g.param(p.norm1_scale)?, g.param(p.norm1_shift)?);
    let x1 = g.layer_norm(residual, s1, b1)?;

    let (w_in, b_in) = (g.param(p.ff_in)?, g.param(p.ff_in_bias)?);
    let h = g.matmul(x1, w_in)?;
    let h = g.add_row(h, b_in)?;
    let mut h = g.relu(h);
    if let Some(mask) = dropout.as_mut().and_then(|d| d.mask(enc.hidden)) {
        h = g.dropout(h, mask)?;
    }
    let (w_out, b_out) = (g.param(p.ff_out)?, g.param(p.ff_out_bias)?);
    let f = g.matmul(h, w_out)?;
    let f = g.add_row(f, b_out)?;
    let x2 = g.add(x1, f)?;
    let (s2, b2) = (g.param(p.norm2_scale)?, g.param(p.norm2_shift)?);
    g.layer_norm(x2, s2, b2)
}

/// Averaging matrix over the positions of `groups` within `universe`.
fn mean_selector(groups: &[Vec<usize>], width: usize) -> Result<Tensor, DiffError> {
    let mut data = vec![0.0; groups.len() * width];
    for (r, members) in groups.iter().enumerate() {
        let w = 1.0 / members.len() as f64;
        for &c in members {
            data[r * width + c] += w;
        }
    }
    Tensor::matrix(groups.len(), width, data)
}

/// Encodes the target of `sub`, returning a `[1, n]` node.
pub fn encode(
    g: &mut Graph,
    enc: &EncoderParams,
    sub: &SubHypergraph,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, EncoderError> {
    let target_members: Vec<CompoundId> = sub.target_compounds.real().collect();
    if target_members.is_empty() {
        return Err(EncoderError::EmptyTarget);
    }
    let neighbors: Vec<_> = sub
        .real_neighbors()
        .filter(|n| n.compounds.real().next().is_some())
        .collect();

    // distinct compounds in first-seen order
    let mut universe: Vec<CompoundId> = Vec::new();
    let slot = |c: CompoundId, universe: &mut Vec<CompoundId>| match universe.iter().position(|u| *u == c) {
        Some(i) => i,
        None => {
            universe.push(c);
            universe.len() - 1
        }
    };
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(1 + neighbors.len());
    groups.push(target_members.iter().map(|c| slot(*c, &mut universe)).collect());
    for n in &neighbors {
        groups.push(n.compounds.real().map(|c| slot(c, &mut universe)).collect());
    }
    let rows: Vec<usize> = universe.iter().map(|c| c.index()).collect();
    let features = g.embedding_lookup(enc.compounds, &rows)?;
    let avg = g.constant(mean_selector(&groups, universe.len())?);
    // row 0 is the target, rows 1.. the neighbors
    let mut states = g.matmul(avg, features)?;

    let n_layers = enc.layers.len();
    let n_comp = universe.len();
    for layer in 0..n_layers {
        let all = g.concat(&[features, states])?;
        let target = g.gather_rows(states, &[0])?;

        let mut ctx_rows: Vec<usize> = groups[0].clone();
        let mut kinds = vec![SlotKind::Membership; groups[0].len()];
        for (j, n) in neighbors.iter().enumerate() {
            ctx_rows.push(n_comp + 1 + j);
            kinds.push(SlotKind::Sharing(n.types));
        }
        let ctx = g.gather_rows(all, &ctx_rows)?;
        let valid = vec![true; kinds.len()];
        let new_target = layer_forward(g, enc, layer, target, Some(ctx), &kinds, &valid, dropout.as_deref_mut())?;

        if layer + 1 == n_layers {
            return Ok(new_target);
        }
        let mut next = vec![new_target];
        for j in 0..neighbors.len() {
            let own = g.gather_rows(states, &[1 + j])?;
            let members = &groups[1 + j];
            let ctx = g.gather_rows(features, members)?;
            let kinds = vec![SlotKind::Membership; members.len()];
            let valid = vec![true; members.len()];
            next.push(layer_forward(g, enc, layer, own, Some(ctx), &kinds, &valid, dropout.as_deref_mut())?);
        }
        states = g.concat(&next)?;
    }
    unreachable!("encoder has at least one layer")
}

/// Mean of the member compound features, without any neighbor structure.
pub fn mean_pool(g: &mut Graph, enc: &EncoderParams, compounds: &[CompoundId]) -> Result<Var, EncoderError> {
    if compounds.is_empty() {
        return Err(EncoderError::EmptyTarget);
    }
    let rows: Vec<usize> = compounds.iter().map(|c| c.index()).collect();
    let x = g.embedding_lookup(enc.compounds, &rows)?;
    let avg = g.constant(Tensor::row(vec![1.0 / rows.len() as f64; rows.len()]));
    Ok(g.matmul(avg, x)?)
}

/// A computed hyperedge representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperedgeEmbedding {
    pub hyperedge: Option<HyperedgeId>,
    pub layer: usize,
    pub vector: Vec<f64>,
}

/// Forward-only encoding with a finiteness / norm sanity check.
pub fn embed(
    store: &ParamStore,
    enc: &EncoderParams,
    sub: &SubHypergraph,
    norm_cap: f64,
) -> Result<HyperedgeEmbedding, EncoderError> {
    let mut g = Graph::with_params(store);
    let out = encode(&mut g, enc, sub, None)?;
    let vector = g.value(out).data().to_vec();
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > norm_cap {
        return Err(EncoderError::Degenerate { cap: norm_cap });
    }
    Ok(HyperedgeEmbedding {
        hyperedge: sub.target,
        layer: enc.layers.len(),
        vector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{build, CompoundSlots, NeighborSlot, SampleLimits, SharingEdgeType, PAD_HYPEREDGE};
    use crate::kg::{ingest_str, EquationFormat, EquationKG, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, layers: usize, seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = init_params(&mut store, 4, dim, 2 * dim, layers, &mut rng);
        (store, enc)
    }

    fn toy() -> EquationKG {
        let mut kg = EquationKG::new();
        ingest_str(&mut kg, "c1;c2\te1\tc3;c4\nc2;c3\t?\tc4\n", EquationFormat::Tsv).unwrap();
        kg
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let (a, enc) = setup(64, 1, 11);
        let (b, _) = setup(64, 1, 11);
        assert_eq!(a, b);
        let (c, _) = setup(64, 1, 12);
        assert_ne!(a.get(enc.compounds), c.get(enc.compounds));
        let bound = 1.0 / 8.0;
        for id in enc.weight_ids() {
            assert!(a.get(id).data().iter().all(|x| x.abs() <= bound), "{}", a.name(id));
        }
        assert_eq!(a.get(enc.compounds).shape(), &[4, 64]);
    }

    fn one_layer(
        store: &ParamStore,
        enc: &EncoderParams,
        target: Vec<f64>,
        ctx: Option<(Vec<f64>, Vec<SlotKind>, Vec<bool>)>,
    ) -> Vec<f64> {
        let mut g = Graph::with_params(store);
        let t = g.constant(Tensor::row(target));
        let out = match ctx {
            Some((rows, kinds, valid)) => {
                let c = g.constant(Tensor::matrix(kinds.len(), enc.dim, rows).unwrap());
                layer_forward(&mut g, enc, 0, t, Some(c), &kinds, &valid, None).unwrap()
            }
            None => layer_forward(&mut g, enc, 0, t, None, &[], &[], None).unwrap(),
        };
        g.value(out).data().to_vec()
    }

    #[test]
    fn empty_neighborhood_is_the_residual_path() {
        let (store, enc) = setup(8, 1, 3);
        let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let out = one_layer(&store, &enc, h.clone(), None);
        // LN(FF(LN(h)) + LN(h)) computed by hand with identity norms
        let ln = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect::<Vec<_>>()
        };
        let p = &enc.layers[0];
        let x1 = ln(&h);
        let (w1, b1, w2, b2) = (store.get(p.ff_in), store.get(p.ff_in_bias), store.get(p.ff_out), store.get(p.ff_out_bias));
        let hid: Vec<f64> = (0..16)
            .map(|j| ((0..8).map(|i| x1[i] * w1.data()[i * 16 + j]).sum::<f64>() + b1.data()[j]).max(0.0))
            .collect();
        let ff: Vec<f64> = (0..8)
            .map(|j| (0..16).map(|i| hid[i] * w2.data()[i * 8 + j]).sum::<f64>() + b2.data()[j])
            .collect();
        let want = ln(&x1.iter().zip(&ff).map(|(a, b)| a + b).collect::<Vec<_>>());
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // all-masked context behaves the same
        let masked = one_layer(
            &store,
            &enc,
            h,
            Some((vec![5.0; 16], vec![SlotKind::Membership; 2], vec![false, false])),
        );
        assert_eq!(masked, out);
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (store, enc) = setup(8, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let kinds = [
            SlotKind::Membership,
            SlotKind::Sharing(EdgeTypeSet::single(SharingEdgeType::CrossSharing)),
            SlotKind::Sharing(EdgeTypeSet::single(SharingEdgeType::EductSharing)),
        ];
        let a = one_layer(&store, &enc, h.clone(), Some((rows.concat(), kinds.to_vec(), vec![true; 3])));
        let perm = [2, 0, 1];
        let b = one_layer(
            &store,
            &enc,
            h,
            Some((
                perm.iter().flat_map(|&i| rows[i].clone()).collect(),
                perm.iter().map(|&i| kinds[i]).collect(),
                vec![true; 3],
            )),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn encode_value(store: &ParamStore, enc: &EncoderParams, sub: &SubHypergraph) -> Vec<f64> {
        embed(store, enc, sub, DEFAULT_NORM_CAP).unwrap().vector
    }

    #[test]
    fn singleton_hyperedge_depends_only_on_its_compound() {
        let kg = toy();
        let c4 = kg.compound_id("c4").unwrap();
        let sub = SubHypergraph {
            target: None,
            target_role: Role::Product,
            target_compounds: CompoundSlots { ids: vec![c4], valid: vec![true] },
            neighbors: vec![],
            neighbor_valid: vec![],
        };
        let (mut store, enc) = setup(8, 1, 5);
        let before = encode_value(&store, &enc, &sub);
        let c1 = kg.compound_id("c1").unwrap();
        store.get_mut(enc.compounds).data_mut()[c1.index() * 8] += 0.5;
        assert_eq!(encode_value(&store, &enc, &sub), before);
        store.get_mut(enc.compounds).data_mut()[c4.index() * 8] += 0.5;
        assert_ne!(encode_value(&store, &enc, &sub), before);
    }

    #[test]
    fn neighbor_compounds_influence_the_target() {
        let kg = toy();
        let graph = build(&kg, false);
        let s1 = kg.complete[0].educt_edge;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = graph
            .sample_neighborhood(s1, SampleLimits { eta1: 5, eta2: 5 }, &mut rng)
            .unwrap();
        let (mut store, enc) = setup(8, 1, 6);
        let before = encode_value(&store, &enc, &sub);
        let c3 = kg.compound_id("c3").unwrap();
        for k in 0..8 {
            store.get_mut(enc.compounds).data_mut()[c3.index() * 8 + k] += 0.3;
        }
        let after = encode_value(&store, &enc, &sub);
        let delta: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn padded_slots_are_never_read() {
        let kg = toy();
        let graph = build(&kg, false);
        let s1 = kg.complete[0].educt_edge;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = graph
            .sample_neighborhood(s1, SampleLimits { eta1: 4, eta2: 3 }, &mut rng)
            .unwrap();
        let (store, enc) = setup(8, 2, 7);
        let clean = encode_value(&store, &enc, &sub);
        let mut garbage = sub.clone();
        for (slot, valid) in garbage.neighbors.iter_mut().zip(&garbage.neighbor_valid) {
            if !valid {
                *slot = NeighborSlot {
                    hyperedge: HyperedgeId(3),
                    types: EdgeTypeSet::single(SharingEdgeType::CrossSharing),
                    compounds: CompoundSlots { ids: vec![CompoundId(1); 3], valid: vec![true; 3] },
                };
            } else {
                for (c, v) in slot.compounds.ids.iter_mut().zip(&slot.compounds.valid) {
                    if !v {
                        *c = CompoundId(2);
                    }
                }
            }
        }
        for (c, v) in garbage.target_compounds.ids.iter_mut().zip(&garbage.target_compounds.valid) {
            if !v {
                *c = CompoundId(0);
            }
        }
        assert_ne!(garbage, sub);
        assert_eq!(encode_value(&store, &enc, &garbage), clean);
        assert!(sub.neighbors.iter().any(|n| n.hyperedge == PAD_HYPEREDGE));
    }

    #[test]
    fn homogeneous_outputs_ignore_type_labels() {
        let kg = toy();
        let graph = build(&kg, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = graph
            .sample_neighborhood(kg.complete[0].product_edge, SampleLimits { eta1: 5, eta2: 5 }, &mut rng)
            .unwrap();
        let (store, enc) = setup(8, 1, 8);
        let base = encode_value(&store, &enc, &sub);
        // relabeling the raw types does not change the collapsed view
        let mut relabeled = sub.clone();
        for n in relabeled.neighbors.iter_mut() {
            if !n.types.is_empty() {
                n.types = EdgeTypeSet::single(SharingEdgeType::CrossSharing).collapsed();
            }
        }
        assert_eq!(encode_value(&store, &enc, &relabeled), base);
    }

    #[test]
    fn mean_pool_is_the_feature_average() {
        let (store, enc) = setup(4, 1, 9);
        let x = store.get(enc.compounds);
        let mut g = Graph::with_params(&store);
        let one = mean_pool(&mut g, &enc, &[CompoundId(2)]).unwrap();
        assert_eq!(g.value(one).data(), x.row_slice(2));
        let two = mean_pool(&mut g, &enc, &[CompoundId(0), CompoundId(1)]).unwrap();
        let flipped = mean_pool(&mut g, &enc, &[CompoundId(1), CompoundId(0)]).unwrap();
        for k in 0..4 {
            let want = (x.row_slice(0)[k] + x.row_slice(1)[k]) / 2.0;
            assert!((g.value(two).data()[k] - want).abs() < 1e-15);
        }
        assert_eq!(g.value(two).data(), g.value(flipped).data());
    }
}
