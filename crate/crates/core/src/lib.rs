#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod ardm;
pub mod error;
pub mod experiment;
pub mod netcore;
pub mod prefdata;
pub mod rewards;
pub mod schedule;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/schedule.md")]
    pub struct Schedule;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/rewards.md")]
    pub struct Rewards;
    #[doc = include_str!("../../../book/src/pairs.md")]
    pub struct Pairs;
    #[doc = include_str!("../../../book/src/dpo.md")]
    pub struct Dpo;
    #[doc = include_str!("../../../book/src/drift.md")]
    pub struct Drift;
    #[doc = include_str!("../../../book/src/baselines.md")]
    pub struct Baselines;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
