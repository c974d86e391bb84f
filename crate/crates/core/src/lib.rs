//! Pursuit simulation, state encoding, learning agents and the
//! training / evaluation harness.

pub mod config;
pub mod coordinator;
pub mod dqn_agent;
pub mod error;
pub mod harness;
pub mod iese;
pub mod report;
pub mod rewards;
pub mod road_network;
pub mod seeds;
pub mod selfcheck;
pub mod state_codec;
pub mod traffic_sim;

pub use error::{ConfigError, Error, Result};
