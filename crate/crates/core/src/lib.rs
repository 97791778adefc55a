//! Elastic information dispersal: erasure-coded message dispersal whose
//! per-node fragment count adapts to the observed responsive quorum, with
//! autonomous pruning once more nodes are known to hold fragments.

pub mod baselines;
pub mod codec;
pub mod kv;
pub mod protocol;
pub mod sim;
