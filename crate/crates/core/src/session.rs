use crate::adversary::Adversary;
use crate::crypto::Nonce;
use crate::net::{AggregationTree, Network};

/// Mutable state shared by the protocol phases of one aggregation session.
pub struct SessionCtx<'a> {
    pub net: &'a mut Network,
    pub tree: &'a AggregationTree,
    pub adversary: &'a mut Adversary,
    pub nonce: Nonce,
}

impl<'a> SessionCtx<'a> {
    pub fn new(
        net: &'a mut Network,
        tree: &'a AggregationTree,
        adversary: &'a mut Adversary,
        nonce: Nonce,
    ) -> Self {
        Self {
            net,
            tree,
            adversary,
            nonce,
        }
    }
}
