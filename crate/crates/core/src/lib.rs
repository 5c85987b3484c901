//! End-to-end behavioural cloning for real-time games.
//!
//! The crate covers the whole pipeline: demonstrations are recorded over a
//! small binary protocol ([`protocol`]), stored as raw frame archives
//! ([`store`]), curated and delay-corrected ([`preprocess`]), used to train a
//! convolutional policy from pixels ([`nn`], [`train`]) and finally evaluated
//! as acting agents against deterministic toy games ([`policy`], [`env`],
//! [`eval`]).

pub mod data;
pub mod env;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod preprocess;
pub mod protocol;
pub mod rng;
pub mod store;
pub mod train;

pub use data::{
    Action, ActionSpace, Dataset, DelayOffset, DiscreteVariable, Episode, EpisodeMeta,
    Observation, Violation,
};
pub use nn::{Architecture, LayerSpec, Model, ModelCheckpoint, PolicyModel};
pub use rng::Rng64;

/// Environment variable that forces deterministic (single-threaded) mode.
pub const DETERMINISTIC_ENV: &str = "CLONEBENCH_DETERMINISTIC";

/// True when `CLONEBENCH_DETERMINISTIC=1` is set.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v == "1").unwrap_or(false)
}
