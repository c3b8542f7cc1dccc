//! Literal listener and speaker models trained from isolated captions, and a
//! reasoning speaker that samples from the literal speaker and rescores the
//! candidates with the literal listener to produce descriptions that pick out
//! a target scene against a distractor.

pub mod agents;
pub mod corpus;
pub mod diffgraph;
pub mod features;
pub mod harness;
pub mod netmod;
pub mod reasoning;

/// Mix a master seed with a stream index (SplitMix64 finalizer), giving
/// independent seeds for the random streams of one run.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
