pub mod gnn;
pub mod graph;
pub mod harness;
pub mod paillier;
pub mod polyact;
pub mod protocol;
