//! Hypergraph-enhanced knowledge-graph embedding for enzyme prediction.
//!
//! Reaction equations become triples `⟨educt set, enzyme, product set⟩`. Each
//! compound set is a hyperedge; a transformer over sampled hyperedge
//! neighborhoods embeds the sets, and a relation-aware decoder ranks enzymes.

pub mod diffmath;
pub mod encoder;
pub mod hypergraph;
pub mod kg;
pub mod kge;
pub mod evaluator;
pub mod model;
pub mod trainer;
pub mod experts;
pub mod synth;
pub mod cli;
