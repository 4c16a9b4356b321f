//! Batch (offline) reinforcement learning on discrete action spaces.
//!
//! The library trains Q-functions from a fixed batch of transitions, with no
//! environment interaction during learning. Four families of update rules
//! are provided, all sharing one training loop:
//!
//! * plain batch Q-learning,
//! * batch Q with Monte-Carlo dropout target lower bounds,
//! * batch-constrained Q (action candidates restricted to a behavior prior),
//! * KL-control against a behavior prior, as either Q-learning on an
//!   augmented reward or entropy-regularized Ψ-learning.
//!
//! Priors come from [`prior`]: maximum-likelihood models of the batch's
//! behavior policy, optionally averaged over several candidate models.
//!
//! Everything downstream of a seed is deterministic, so experiment runs can
//! be reproduced byte-for-byte. The [`envs`] module has small exactly
//! solvable MDPs (plus a scripted token-level dialog environment) whose
//! dynamic-programming solutions serve as oracles for the learners, and
//! [`harness`] wires batches, algorithms, and evaluation into experiment
//! grids with CSV reports.

pub mod algos;
pub mod approximator;
pub mod dist;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod prior;
pub mod rewards;

pub use algos::{ActMode, AlgoConfig, OptimConfig, StepMetrics, TrainState, Variant};
pub use harness::{
    emit_reports, run_experiment, CellReport, EvalReport, ExperimentConfig, ExperimentSetup,
};
pub use approximator::{Activation, DropoutMask, FeedforwardQ, QFunction, TabularQ, TargetCopy};
pub use dist::ActionDistribution;
pub use error::BrlError;
pub use mdp::{Batch, StateRef, Trajectory, Transition};
pub use prior::{AveragedPrior, Prior, PriorModel};
pub use rewards::{PhraseLists, RewardSpec, SentimentScorer};
