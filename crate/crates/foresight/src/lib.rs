//! Desk-scale testbed for measuring how predictable trained RL agents'
//! future actions and events are.
//!
//! The crate provides:
//! - a deterministic mini-Sokoban gridworld with a blue-tile event and two
//!   dynamics ablations ([`gridworld`]);
//! - a small f64 neural-network core with gradient checking ([`nn`]);
//! - a learned one-step world model with an oracle adapter ([`world_model`]);
//! - three trained policies: an explicit MCTS planner, a recurrent
//!   implicit planner, and a feedforward non-planner ([`agents`]);
//! - auxiliary-information extraction for predictors: inner states and
//!   simulated rollouts, plus an exact enumeration oracle ([`auxinfo`]);
//! - dataset collection and labeling ([`datagen`]);
//! - attention-based action/event predictors and metrics ([`predictor`]);
//! - an experiment harness with caching and reports ([`harness`]).

pub mod agents;
pub mod auxinfo;
pub mod datagen;
pub mod gridworld;
pub mod harness;
pub mod nn;
pub mod predictor;
pub mod world_model;
