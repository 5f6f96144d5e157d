//! Hierarchical reinforcement-learning portfolio engine: price data, a
//! long/short trading simulator, a small dense-network stack, the two-level
//! agents, their training loop and an out-of-sample backtest harness.

pub mod agents;
pub mod backtest;
pub mod market_data;
pub mod neural;
pub mod synthetic;
pub mod trading_env;
pub mod training;
