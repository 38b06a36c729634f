//! Parallel decoding over token trees with early pruning and dynamic tree sizing.
//!
//! Draft heads propose Top-k tokens for several future positions. The engine assembles
//! the most promising candidates into a token tree and verifies it in one forward pass
//! against the full model's greedy choices. A cheap early head can drop implausible
//! branches halfway through that pass. An online latency regression and per-head hit-rate
//! estimates pick the tree size that maximizes expected tokens per unit time.

pub mod acceptance_model;
pub mod backends;
pub mod cli;
pub mod cost_model;
pub mod engine;
pub mod pruning;
pub mod scalar;
pub mod scheduler;
pub mod selftest;
pub mod token_tree;
pub mod verification;

pub use acceptance_model::{AcceptanceStats, HeadPredictions};
pub use cost_model::CostModel;
pub use engine::{Engine, EngineConfig, Mode};
pub use scalar::Real;
pub use token_tree::{TokenId, TokenTree, TreeMask};

pub type AcceptanceStatsF32 = AcceptanceStats<f32>;
pub type AcceptanceStatsF64 = AcceptanceStats<f64>;
pub type CostModelF32 = CostModel<f32>;
pub type CostModelF64 = CostModel<f64>;
pub type TinyTransformerF32 = backends::TinyTransformer<f32>;
pub type TinyTransformerF64 = backends::TinyTransformer<f64>;
