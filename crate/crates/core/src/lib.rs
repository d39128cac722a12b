//! Policy iteration and online actor–disturber–critic learning for cooperative
//! and non-cooperative graphical games on discrete-time linear multi-agent systems.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod dynamics;
pub mod experiment;
pub mod error;
pub mod game;
pub mod graph;
pub mod linalg;
pub mod online_learner;
pub mod pi_solver;

pub use error::{Error, Result};
