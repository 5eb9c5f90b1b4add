pub mod action;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod flow;
pub mod harness;
pub mod iar;
pub mod nn;
pub mod policy;
pub mod tape;
pub mod trainer;
pub mod verify;

/// Largest joint action space that may be enumerated explicitly.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;
