//! Valency-constrained graph generation and genetic optimization of
//! drug-candidate molecules.
//!
//! The pipeline runs in stages: a SMILES corpus is ingested into molecular
//! graphs, a graph variational autoencoder is trained on them, the decoder
//! generates a pool of valid candidate molecules under valency masks, and a
//! graph-based genetic algorithm evolves that pool against a composite
//! docking-affinity fitness score. Every stage is seeded and reproducible.

pub mod fitness;
pub mod ga;
pub mod generator;
pub mod molgraph;
pub mod neural;
pub mod pipeline;
pub mod smiles;
pub mod trainer;

pub use molgraph::{BranchMode, Element, MolecularGraph, ValencyTable};
