//! Candidate generation, best/worst pair selection and the pair store.

pub mod hexfloat;
mod mining;
mod store;

pub use mining::{
    generate_candidates, mine_pairs, prompt_for, select_by_rewards, select_pair, MiningConfig, Selection,
    DEFAULT_TIE_EPSILON,
};
pub use store::{PairStore, PreferencePair, StoreHeader};
