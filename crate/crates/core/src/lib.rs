//! Simulated desktop robotic arm: kinematics, perception, language
//! understanding, the action state machine, model pruning and the trial
//! harness.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fsm;
pub mod harness;
pub mod kinematics;
pub mod nlu;
pub mod par;
pub mod perception;
pub mod pruning;
pub mod seed;
