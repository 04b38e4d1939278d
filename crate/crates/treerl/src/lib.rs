//! Entropy-guided tree search over token-generation policies, process rewards
//! derived from the resulting trees, and the training and evaluation loops
//! built on them.

pub mod credit;
pub mod evalx;
pub mod gentree;
pub mod mix;
pub mod policy;
pub mod search;
pub mod textfmt;
pub mod theory;
pub mod trainer;
