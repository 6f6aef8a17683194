//! Synthetic studies of the routing machinery: noise accumulation along
//! deep chains, identity-padded pipelines, and shuffle interventions that
//! test whether feedback lands on the right component.

pub mod depth;
pub mod noise;
pub mod shuffle;
