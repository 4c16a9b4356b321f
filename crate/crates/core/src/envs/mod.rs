//! Synthetic environments the learners are verified against: exactly
//! solvable tabular MDPs with dynamic-programming oracles, a scripted-user
//! token-level dialog environment, and batch generation from behavior
//! policies over both.

pub mod dialog;
pub mod generate;
pub mod tabular;

pub use dialog::{dialog_demonstrations, DialogEnv, DialogState, ScriptedUser, StepOutcome};
pub use generate::{
    coverage, generate_dialog_batch, generate_tabular_batch, BehaviorPolicy, ENV_CHANNEL,
};
pub use tabular::{
    bellman_residual, policy_evaluation, soft_bellman_residual, soft_policy_evaluation,
    soft_value_iteration, value_iteration, TabularMDP,
};
