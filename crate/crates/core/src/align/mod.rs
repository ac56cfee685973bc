pub mod baselines;
pub mod bound;
pub mod dpo;
pub mod eval;
pub mod metrics;
pub mod trainer;

pub use baselines::*;
pub use dpo::*;
pub use eval::*;
pub use metrics::*;
pub use trainer::*;
