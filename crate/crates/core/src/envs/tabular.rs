//! Small tabular MDPs with exact dynamic-programming oracles.
//!
//! These are the ground truth the learners are tested against: value
//! iteration for hard-max Q-learning, soft value iteration for the
//! entropy-regularized Ψ fixed point, and exact policy evaluation for
//! overestimation measurements.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::dist::{log_sum_exp, ActionDistribution};
use crate::error::{BrlError, Result};
use crate::mdp::StateRef;
use crate::prior::Prior;

/// Transition-kernel rows must sum to 1 within this.
pub const KERNEL_SUM_TOL: f64 = 1e-9;

/// Sweep cap for every fixed-point iteration in this module.
const MAX_SWEEPS: usize = 200_000;

/// A finite MDP: sparse transition kernel, expected immediate rewards,
/// self-absorbing zero-reward terminal states.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    name: String,
    state_count: usize,
    action_count: usize,
    /// `kernel[s][a]` — (next state, probability) rows, each summing to 1.
    kernel: Vec<Vec<Vec<(usize, f64)>>>,
    /// `rewards[s][a]` — expected immediate reward for taking `a` in `s`.
    rewards: Vec<Vec<f64>>,
    terminals: BTreeSet<usize>,
    gamma: f64,
    start_states: Vec<usize>,
    max_episode_steps: usize,
}

/// The on-disk environment description: dense kernel rows so files are
/// self-describing. Validated on load through [`TabularMDP::new`].
#[derive(Debug, Serialize, Deserialize)]
struct SpecFile {
    name: String,
    gamma: f64,
    start_states: Vec<usize>,
    terminals: Vec<usize>,
    max_episode_steps: usize,
    /// `rewards[s][a]`.
    rewards: Vec<Vec<f64>>,
    /// `kernel[s][a][s']` — dense probability rows.
    kernel: Vec<Vec<Vec<f64>>>,
}

impl TabularMDP {
    /// Validates and assembles an MDP from sparse kernel rows.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        state_count: usize,
        action_count: usize,
        kernel: Vec<Vec<Vec<(usize, f64)>>>,
        rewards: Vec<Vec<f64>>,
        terminals: BTreeSet<usize>,
        gamma: f64,
        start_states: Vec<usize>,
        max_episode_steps: usize,
    ) -> Result<Self> {
        if state_count == 0 || action_count == 0 {
            return Err(BrlError::usage("MDP needs at least one state and action"));
        }
        if kernel.len() != state_count || rewards.len() != state_count {
            return Err(BrlError::usage("kernel/rewards must have one row per state"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(BrlError::usage(format!("gamma {gamma} outside [0, 1]")));
        }
        if start_states.is_empty() {
            return Err(BrlError::usage("MDP needs at least one start state"));
        }
        if max_episode_steps == 0 {
            return Err(BrlError::usage("max_episode_steps must be >= 1"));
        }
        for s in start_states.iter().chain(terminals.iter()) {
            if *s >= state_count {
                return Err(BrlError::usage(format!(
                    "state {s} outside the {state_count}-state space"
                )));
            }
        }
        for s in 0..state_count {
            if kernel[s].len() != action_count || rewards[s].len() != action_count {
                return Err(BrlError::usage(format!(
                    "state {s}: kernel/reward rows must have one entry per action"
                )));
            }
            for a in 0..action_count {
                let row = &kernel[s][a];
                let mut sum = 0.0;
                for &(next, p) in row {
                    if next >= state_count {
                        return Err(BrlError::usage(format!(
                            "kernel[{s}][{a}] targets state {next}, outside the space"
                        )));
                    }
                    if !p.is_finite() || p < 0.0 {
                        return Err(BrlError::usage(format!(
                            "kernel[{s}][{a}] holds invalid probability {p}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > KERNEL_SUM_TOL {
                    return Err(BrlError::usage(format!(
                        "kernel[{s}][{a}] sums to {sum}, expected 1"
                    )));
                }
                if !rewards[s][a].is_finite() {
                    return Err(BrlError::usage(format!("rewards[{s}][{a}] is not finite")));
                }
                if terminals.contains(&s) {
                    // Terminals self-absorb with zero reward so value
                    // backups can treat them as exact zeros.
                    let absorbing = row.iter().all(|&(next, p)| next == s || p == 0.0);
                    if !absorbing || rewards[s][a] != 0.0 {
                        return Err(BrlError::usage(format!(
                            "terminal state {s} must self-absorb with zero reward"
                        )));
                    }
                }
            }
        }
        Ok(TabularMDP {
            name: name.into(),
            state_count,
            action_count,
            kernel,
            rewards,
            terminals,
            gamma,
            start_states,
            max_episode_steps,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start_states(&self) -> &[usize] {
        &self.start_states
    }

    pub fn max_episode_steps(&self) -> usize {
        self.max_episode_steps
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminals.contains(&state)
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[state][action]
    }

    pub fn kernel_row(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.kernel[state][action]
    }

    /// The same dynamics with a different reward matrix (terminal rows are
    /// pinned back to zero — they are never backed up through). This is how
    /// augmented-reward variants get exact policy evaluation: swap in the
    /// augmented reward, evaluate as usual.
    pub fn with_rewards(&self, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let mut rewards = rewards;
        if rewards.len() != self.state_count
            || rewards.iter().any(|row| row.len() != self.action_count)
        {
            return Err(BrlError::usage("replacement rewards must be state x action"));
        }
        for s in self.terminals.iter() {
            rewards[*s] = vec![0.0; self.action_count];
        }
        let mut mdp = self.clone();
        mdp.rewards = rewards;
        TabularMDP::new(
            mdp.name,
            mdp.state_count,
            mdp.action_count,
            mdp.kernel,
            mdp.rewards,
            mdp.terminals,
            mdp.gamma,
            mdp.start_states,
            mdp.max_episode_steps,
        )
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut mdp = self.clone();
        mdp.gamma = gamma;
        TabularMDP::new(
            mdp.name,
            mdp.state_count,
            mdp.action_count,
            mdp.kernel,
            mdp.rewards,
            mdp.terminals,
            mdp.gamma,
            mdp.start_states,
            mdp.max_episode_steps,
        )
    }

    /// Samples a successor state from `kernel[state][action]`.
    pub fn sample_next(&self, state: usize, action: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.kernel[state][action];
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        for &(next, p) in row {
            acc += p;
            if draw < acc {
                return next;
            }
        }
        // Rounding slack: fall back to the last positive-probability entry.
        row.iter()
            .rev()
            .find(|&&(_, p)| p > 0.0)
            .map(|&(next, _)| next)
            .expect("kernel rows sum to 1, so one entry is positive")
    }

    /// States reachable from the start states under any policy, via
    /// breadth-first search over the kernel's support.
    pub fn reachable_states(&self) -> BTreeSet<usize> {
        let mut seen: BTreeSet<usize> = self.start_states.iter().copied().collect();
        let mut frontier: Vec<usize> = seen.iter().copied().collect();
        while let Some(s) = frontier.pop() {
            if self.terminals.contains(&s) {
                continue;
            }
            for a in 0..self.action_count {
                for &(next, p) in &self.kernel[s][a] {
                    if p > 0.0 && seen.insert(next) {
                        frontier.push(next);
                    }
                }
            }
        }
        seen
    }

    /// All (state, action) pairs a batch could in principle contain:
    /// reachable nonterminal states crossed with every action.
    pub fn reachable_pairs(&self) -> BTreeSet<(u64, usize)> {
        self.reachable_states()
            .into_iter()
            .filter(|s| !self.terminals.contains(s))
            .flat_map(|s| (0..self.action_count).map(move |a| (s as u64, a)))
            .collect()
    }

    /// Two states, two actions: staying pays nothing, leaving pays 1 and
    /// ends the episode. With γ = 0.5 the optimal values are [0.5, 1].
    pub fn chain() -> Self {
        TabularMDP::new(
            "chain",
            2,
            2,
            vec![
                vec![vec![(0, 1.0)], vec![(1, 1.0)]],
                vec![vec![(1, 1.0)], vec![(1, 1.0)]],
            ],
            vec![vec![0.0, 1.0], vec![0.0, 0.0]],
            BTreeSet::from([1]),
            0.5,
            vec![0],
            32,
        )
        .expect("chain construction is static")
    }

    /// A deterministic 4×4 gridworld: state `row·4 + col`, actions
    /// up/right/down/left (walls block), reward 1 for stepping onto the
    /// terminal goal at state 15, γ = 0.9.
    pub fn gridworld_4x4() -> Self {
        const SIDE: usize = 4;
        const GOAL: usize = 15;
        let states = SIDE * SIDE;
        let mut kernel = Vec::with_capacity(states);
        let mut rewards = Vec::with_capacity(states);
        for s in 0..states {
            let (row, col) = (s / SIDE, s % SIDE);
            let mut krow = Vec::with_capacity(4);
            let mut rrow = Vec::with_capacity(4);
            for a in 0..4 {
                let (nr, nc) = match a {
                    0 => (row.saturating_sub(1), col),
                    1 => (row, (col + 1).min(SIDE - 1)),
                    2 => ((row + 1).min(SIDE - 1), col),
                    _ => (row, col.saturating_sub(1)),
                };
                let next = if s == GOAL { GOAL } else { nr * SIDE + nc };
                krow.push(vec![(next, 1.0)]);
                rrow.push(if s != GOAL && next == GOAL { 1.0 } else { 0.0 });
            }
            kernel.push(krow);
            rewards.push(rrow);
        }
        TabularMDP::new(
            "gridworld_4x4",
            states,
            4,
            kernel,
            rewards,
            BTreeSet::from([GOAL]),
            0.9,
            vec![0],
            64,
        )
        .expect("gridworld construction is static")
    }

    /// The chain spec shipped with the crate, as written to disk.
    pub fn chain_spec_toml() -> &'static str {
        include_str!("../../envspecs/chain.toml")
    }

    /// The gridworld spec shipped with the crate, as written to disk.
    pub fn gridworld_4x4_spec_toml() -> &'static str {
        include_str!("../../envspecs/gridworld_4x4.toml")
    }

    pub fn to_spec_toml(&self) -> String {
        let kernel = (0..self.state_count)
            .map(|s| {
                (0..self.action_count)
                    .map(|a| {
                        let mut dense = vec![0.0; self.state_count];
                        for &(next, p) in &self.kernel[s][a] {
                            dense[next] += p;
                        }
                        dense
                    })
                    .collect()
            })
            .collect();
        let file = SpecFile {
            name: self.name.clone(),
            gamma: self.gamma,
            start_states: self.start_states.clone(),
            terminals: self.terminals.iter().copied().collect(),
            max_episode_steps: self.max_episode_steps,
            rewards: self.rewards.clone(),
            kernel,
        };
        toml::to_string(&file).expect("spec serialization cannot fail")
    }

    pub fn from_spec_toml(text: &str) -> Result<Self> {
        let file: SpecFile =
            toml::from_str(text).map_err(|e| BrlError::format(format!("bad MDP spec: {e}")))?;
        let state_count = file.kernel.len();
        let action_count = file.kernel.first().map_or(0, Vec::len);
        let kernel = file
            .kernel
            .into_iter()
            .enumerate()
            .map(|(s, row)| {
                if row.iter().any(|a| a.len() != state_count) {
                    return Err(BrlError::format(format!(
                        "kernel[{s}]: dense rows must have one probability per state"
                    )));
                }
                Ok(row
                    .into_iter()
                    .map(|dense| {
                        dense
                            .into_iter()
                            .enumerate()
                            .filter(|&(_, p)| p != 0.0)
                            .collect()
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        TabularMDP::new(
            file.name,
            state_count,
            action_count,
            kernel,
            file.rewards,
            file.terminals.into_iter().collect(),
            file.gamma,
            file.start_states,
            file.max_episode_steps,
        )
    }

    pub fn save_spec(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_spec_toml())?;
        Ok(())
    }

    pub fn load_spec(path: &Path) -> Result<Self> {
        Self::from_spec_toml(&std::fs::read_to_string(path)?)
    }
}

/// Requires γ < 1 or an episodic MDP: with γ = 1, iterate the worst-case
/// survival probability and reject if some state can avoid termination.
fn check_episodic_if_undiscounted(mdp: &TabularMDP) -> Result<()> {
    if mdp.gamma < 1.0 {
        return Ok(());
    }
    let mut survival = vec![1.0; mdp.state_count];
    for s in mdp.terminals.iter() {
        survival[*s] = 0.0;
    }
    for _ in 0..MAX_SWEEPS.min(64 * mdp.state_count) {
        let mut next = vec![0.0; mdp.state_count];
        let mut diff: f64 = 0.0;
        for s in 0..mdp.state_count {
            if mdp.terminals.contains(&s) {
                continue;
            }
            next[s] = (0..mdp.action_count)
                .map(|a| {
                    mdp.kernel[s][a]
                        .iter()
                        .map(|&(sp, p)| p * survival[sp])
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            diff = diff.max((next[s] - survival[s]).abs());
        }
        survival = next;
        if diff <= 1e-12 {
            break;
        }
    }
    if survival.iter().any(|&v| v > 1e-6) {
        return Err(BrlError::usage(
            "gamma = 1 requires an episodic MDP (some state can avoid termination forever)",
        ));
    }
    Ok(())
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Exact Q*: iterates the hard-max Bellman operator until successive sweeps
/// differ by at most `tolerance` in sup norm. Terminal rows stay 0.
pub fn value_iteration(mdp: &TabularMDP, tolerance: f64) -> Result<Vec<Vec<f64>>> {
    if tolerance <= 0.0 {
        return Err(BrlError::usage("tolerance must be > 0"));
    }
    check_episodic_if_undiscounted(mdp)?;
    let mut q = vec![vec![0.0; mdp.action_count]; mdp.state_count];
    for _ in 0..MAX_SWEEPS {
        let value: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(s, row)| {
                if mdp.terminals.contains(&s) {
                    0.0
                } else {
                    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let mut next = vec![vec![0.0; mdp.action_count]; mdp.state_count];
        for s in 0..mdp.state_count {
            if mdp.terminals.contains(&s) {
                continue;
            }
            for a in 0..mdp.action_count {
                let expected: f64 = mdp.kernel[s][a].iter().map(|&(sp, p)| p * value[sp]).sum();
                next[s][a] = mdp.rewards[s][a] + mdp.gamma * expected;
            }
        }
        let diff = sup_diff(&q, &next);
        q = next;
        if diff <= tolerance {
            return Ok(q);
        }
    }
    Err(BrlError::Training(format!(
        "value iteration did not reach tolerance {tolerance} within {MAX_SWEEPS} sweeps"
    )))
}

/// Sup-norm residual of the hard-max Bellman operator at `q` — what
/// [`value_iteration`] guarantees is at most its tolerance.
pub fn bellman_residual(mdp: &TabularMDP, q: &[Vec<f64>]) -> f64 {
    let value: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(s, row)| {
            if mdp.terminals.contains(&s) {
                0.0
            } else {
                row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    let mut residual: f64 = 0.0;
    for s in 0..mdp.state_count {
        if mdp.terminals.contains(&s) {
            continue;
        }
        for a in 0..mdp.action_count {
            let expected: f64 = mdp.kernel[s][a].iter().map(|&(sp, p)| p * value[sp]).sum();
            let backed_up = mdp.rewards[s][a] + mdp.gamma * expected;
            residual = residual.max((backed_up - q[s][a]).abs());
        }
    }
    residual
}

/// Per-state prior log-probabilities, validated strictly positive on
/// nonterminal states.
fn prior_log_probs(mdp: &TabularMDP, prior: &Prior) -> Result<Vec<Vec<f64>>> {
    let mut logs = vec![vec![0.0; mdp.action_count]; mdp.state_count];
    for s in 0..mdp.state_count {
        if mdp.terminals.contains(&s) {
            continue;
        }
        let dist = prior.evaluate_tabular(s as u64, mdp.state_count)?;
        if dist.action_count() != mdp.action_count {
            return Err(BrlError::usage(format!(
                "prior has {} actions, MDP has {}",
                dist.action_count(),
                mdp.action_count
            )));
        }
        for a in 0..mdp.action_count {
            if dist.prob(a) <= 0.0 {
                return Err(BrlError::usage(format!(
                    "prior puts zero mass on action {a} at state {s}; \
                     the soft fixed point needs strictly positive priors"
                )));
            }
            logs[s][a] = dist.log_prob(a);
        }
    }
    Ok(logs)
}

/// Exact Ψ*: iterates the entropy-regularized backup
/// `Ψ(s,a) = r/c + log p(a|s) + γ·E[logΣ_a' exp Ψ(s',a')]`
/// until successive sweeps differ by at most `tolerance`. Terminal next
/// states contribute 0 to the bootstrap; terminal rows stay 0.
pub fn soft_value_iteration(
    mdp: &TabularMDP,
    prior: &Prior,
    c: f64,
    tolerance: f64,
) -> Result<Vec<Vec<f64>>> {
    if tolerance <= 0.0 {
        return Err(BrlError::usage("tolerance must be > 0"));
    }
    if c <= 0.0 || !c.is_finite() {
        return Err(BrlError::usage("reward scale c must be positive and finite"));
    }
    check_episodic_if_undiscounted(mdp)?;
    let logs = prior_log_probs(mdp, prior)?;
    let mut psi = vec![vec![0.0; mdp.action_count]; mdp.state_count];
    for _ in 0..MAX_SWEEPS {
        let value: Vec<f64> = psi
            .iter()
            .enumerate()
            .map(|(s, row)| {
                if mdp.terminals.contains(&s) {
                    Ok(0.0)
                } else {
                    log_sum_exp(row)
                }
            })
            .collect::<Result<_>>()?;
        let mut next = vec![vec![0.0; mdp.action_count]; mdp.state_count];
        for s in 0..mdp.state_count {
            if mdp.terminals.contains(&s) {
                continue;
            }
            for a in 0..mdp.action_count {
                let expected: f64 = mdp.kernel[s][a].iter().map(|&(sp, p)| p * value[sp]).sum();
                next[s][a] = mdp.rewards[s][a] / c + logs[s][a] + mdp.gamma * expected;
            }
        }
        let diff = sup_diff(&psi, &next);
        psi = next;
        if diff <= tolerance {
            return Ok(psi);
        }
    }
    Err(BrlError::Training(format!(
        "soft value iteration did not reach tolerance {tolerance} within {MAX_SWEEPS} sweeps"
    )))
}

/// Sup-norm residual of the soft backup at `psi`.
pub fn soft_bellman_residual(
    mdp: &TabularMDP,
    prior: &Prior,
    c: f64,
    psi: &[Vec<f64>],
) -> Result<f64> {
    let logs = prior_log_probs(mdp, prior)?;
    let value: Vec<f64> = psi
        .iter()
        .enumerate()
        .map(|(s, row)| {
            if mdp.terminals.contains(&s) {
                Ok(0.0)
            } else {
                log_sum_exp(row)
            }
        })
        .collect::<Result<_>>()?;
    let mut residual: f64 = 0.0;
    for s in 0..mdp.state_count {
        if mdp.terminals.contains(&s) {
            continue;
        }
        for a in 0..mdp.action_count {
            let expected: f64 = mdp.kernel[s][a].iter().map(|&(sp, p)| p * value[sp]).sum();
            let backed_up = mdp.rewards[s][a] / c + logs[s][a] + mdp.gamma * expected;
            residual = residual.max((backed_up - psi[s][a]).abs());
        }
    }
    Ok(residual)
}

fn check_policy(mdp: &TabularMDP, policy: &[ActionDistribution]) -> Result<()> {
    if policy.len() != mdp.state_count {
        return Err(BrlError::usage(format!(
            "policy covers {} states, MDP has {}",
            policy.len(),
            mdp.state_count
        )));
    }
    if let Some(d) = policy.iter().find(|d| d.action_count() != mdp.action_count) {
        return Err(BrlError::usage(format!(
            "policy row has {} actions, MDP has {}",
            d.action_count(),
            mdp.action_count
        )));
    }
    Ok(())
}

/// Exact Q^π of a (possibly stochastic) policy under the MDP's own rewards:
/// `Q(s,a) = r + γ·E_{s'}[Σ_a' π(a'|s')·Q(s',a')]`.
pub fn policy_evaluation(
    mdp: &TabularMDP,
    policy: &[ActionDistribution],
    tolerance: f64,
) -> Result<Vec<Vec<f64>>> {
    if tolerance <= 0.0 {
        return Err(BrlError::usage("tolerance must be > 0"));
    }
    check_policy(mdp, policy)?;
    check_episodic_if_undiscounted(mdp)?;
    let mut q = vec![vec![0.0; mdp.action_count]; mdp.state_count];
    for _ in 0..MAX_SWEEPS {
        let value: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(s, row)| {
                if mdp.terminals.contains(&s) {
                    0.0
                } else {
                    row.iter()
                        .enumerate()
                        .map(|(a, qa)| policy[s].prob(a) * qa)
                        .sum()
                }
            })
            .collect();
        let mut next = vec![vec![0.0; mdp.action_count]; mdp.state_count];
        for s in 0..mdp.state_count {
            if mdp.terminals.contains(&s) {
                continue;
            }
            for a in 0..mdp.action_count {
                let expected: f64 = mdp.kernel[s][a].iter().map(|&(sp, p)| p * value[sp]).sum();
                next[s][a] = mdp.rewards[s][a] + mdp.gamma * expected;
            }
        }
        let diff = sup_diff(&q, &next);
        q = next;
        if diff <= tolerance {
            return Ok(q);
        }
    }
    Err(BrlError::Training(format!(
        "policy evaluation did not reach tolerance {tolerance} within {MAX_SWEEPS} sweeps"
    )))
}

/// Exact entropy-regularized Q^π with prior shaping, the policy-evaluation
/// counterpart of [`soft_value_iteration`]:
/// `Q(s,a) = r/c + log p(a|s) + γ·E_{s'}[Σ_a' π(a'|s')·(Q(s',a') − log π(a'|s'))]`
/// (zero-probability actions contribute nothing). At π = softmax(Ψ*) this
/// recovers Ψ*.
pub fn soft_policy_evaluation(
    mdp: &TabularMDP,
    policy: &[ActionDistribution],
    prior: &Prior,
    c: f64,
    tolerance: f64,
) -> Result<Vec<Vec<f64>>> {
    if tolerance <= 0.0 {
        return Err(BrlError::usage("tolerance must be > 0"));
    }
    if c <= 0.0 || !c.is_finite() {
        return Err(BrlError::usage("reward scale c must be positive and finite"));
    }
    check_policy(mdp, policy)?;
    check_episodic_if_undiscounted(mdp)?;
    let logs = prior_log_probs(mdp, prior)?;
    let mut q = vec![vec![0.0; mdp.action_count]; mdp.state_count];
    for _ in 0..MAX_SWEEPS {
        let value: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(s, row)| {
                if mdp.terminals.contains(&s) {
                    0.0
                } else {
                    row.iter()
                        .enumerate()
                        .filter(|&(a, _)| policy[s].prob(a) > 0.0)
                        .map(|(a, qa)| policy[s].prob(a) * (qa - policy[s].log_prob(a)))
                        .sum()
                }
            })
            .collect();
        let mut next = vec![vec![0.0; mdp.action_count]; mdp.state_count];
        for s in 0..mdp.state_count {
            if mdp.terminals.contains(&s) {
                continue;
            }
            for a in 0..mdp.action_count {
                let expected: f64 = mdp.kernel[s][a].iter().map(|&(sp, p)| p * value[sp]).sum();
                next[s][a] = mdp.rewards[s][a] / c + logs[s][a] + mdp.gamma * expected;
            }
        }
        let diff = sup_diff(&q, &next);
        q = next;
        if diff <= tolerance {
            return Ok(q);
        }
    }
    Err(BrlError::Training(format!(
        "soft policy evaluation did not reach tolerance {tolerance} within {MAX_SWEEPS} sweeps"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::softmax;
    use crate::prior::PriorModel;
    use approx::assert_abs_diff_eq;

    /// One nonterminal state, every action self-loops with the given reward.
    fn self_loop(actions: usize, reward: f64, gamma: f64) -> TabularMDP {
        TabularMDP::new(
            "self_loop",
            1,
            actions,
            vec![vec![vec![(0, 1.0)]; actions]],
            vec![vec![reward; actions]],
            BTreeSet::new(),
            gamma,
            vec![0],
            32,
        )
        .unwrap()
    }

    fn uniform_prior(mdp: &TabularMDP) -> Prior {
        Prior::Single(PriorModel::uniform(
            mdp.state_count(),
            mdp.action_count(),
            "uniform",
        ))
    }

    #[test]
    fn chain_value_iteration_matches_hand_fixed_point() {
        let mdp = TabularMDP::chain();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        assert_abs_diff_eq!(q[0][0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(q[0][1], 1.0, epsilon = 1e-9);
        assert_eq!(q[1], vec![0.0, 0.0]);
        assert!(bellman_residual(&mdp, &q) <= 1e-12);
    }

    #[test]
    fn zero_rewards_give_zero_q() {
        let mdp = TabularMDP::chain()
            .with_rewards(vec![vec![0.0, 0.0], vec![0.0, 0.0]])
            .unwrap();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        assert!(q.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_zero_is_myopic() {
        let mdp = TabularMDP::chain().with_gamma(0.0).unwrap();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        assert_eq!(q[0], vec![0.0, 1.0]);
    }

    #[test]
    fn gridworld_optimal_values_track_path_length() {
        let mdp = TabularMDP::gridworld_4x4();
        let q = value_iteration(&mdp, 1e-12).unwrap();
        // One step from the goal.
        assert_abs_diff_eq!(q[14][1], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q[11][2], 1.0, epsilon = 1e-9);
        // Two steps out: 10 → right → 11 → down → goal.
        assert_abs_diff_eq!(q[10][1], 0.9, epsilon = 1e-9);
        // The start corner is six moves away: value 0.9^5.
        let v0 = q[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(v0, 0.9f64.powi(5), epsilon = 1e-9);
        assert!(bellman_residual(&mdp, &q) <= 1e-12);
    }

    #[test]
    fn soft_fixed_point_on_uniform_self_loop_is_minus_log_two() {
        // Ψ = log(1/2) + 0.5·(log 2 + Ψ)  ⇒  Ψ = −log 2.
        let mdp = self_loop(2, 0.0, 0.5);
        let prior = uniform_prior(&mdp);
        let psi = soft_value_iteration(&mdp, &prior, 2.0, 1e-12).unwrap();
        assert_abs_diff_eq!(psi[0][0], -(2.0f64.ln()), epsilon = 1e-9);
        assert_abs_diff_eq!(psi[0][1], -(2.0f64.ln()), epsilon = 1e-9);
        assert!(soft_bellman_residual(&mdp, &prior, 2.0, &psi).unwrap() <= 1e-9);
    }

    #[test]
    fn soft_gamma_zero_is_shaped_myopic() {
        let mdp = TabularMDP::chain().with_gamma(0.0).unwrap();
        let prior = uniform_prior(&mdp);
        let psi = soft_value_iteration(&mdp, &prior, 2.0, 1e-12).unwrap();
        assert_abs_diff_eq!(psi[0][0], 0.5f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(psi[0][1], 0.5 + 0.5f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn soft_single_action_is_discounted_scaled_return() {
        // One action, p = [1]: Ψ = r/c + 0 + γΨ ⇒ Ψ = (r/c)/(1−γ).
        let mdp = self_loop(1, 1.0, 0.5);
        let prior = uniform_prior(&mdp);
        let psi = soft_value_iteration(&mdp, &prior, 2.0, 1e-12).unwrap();
        assert_abs_diff_eq!(psi[0][0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn soft_iteration_rejects_zero_prior_mass() {
        let mdp = TabularMDP::chain();
        // Unsmoothed counts that never take action 1 at state 0.
        let demo = crate::mdp::Trajectory::new(vec![crate::mdp::TrajectoryStep {
            state: StateRef::tabular(0),
            action: 0,
            rewards: Default::default(),
        }]);
        let prior = Prior::Single(
            PriorModel::fit_mle_tabular(&[demo], 2, 2, 0.0, "narrow").unwrap(),
        );
        let err = soft_value_iteration(&mdp, &prior, 2.0, 1e-9).unwrap_err();
        assert!(err.to_string().contains("zero mass"));
    }

    #[test]
    fn undiscounted_needs_episodic_dynamics() {
        let err = value_iteration(&self_loop(2, 0.0, 1.0), 1e-9).unwrap_err();
        assert!(err.to_string().contains("episodic"));
        // The chain always terminates under the exit action... but can loop
        // forever under "stay", so it is rejected too.
        let chain = TabularMDP::chain().with_gamma(1.0).unwrap();
        assert!(value_iteration(&chain, 1e-9).is_err());
    }

    #[test]
    fn policy_evaluation_matches_hand_solutions() {
        let mdp = TabularMDP::chain();
        // Deterministic "leave" policy: Q(s0,a1) = 1, Q(s0,a0) = 0.5.
        let leave = vec![
            ActionDistribution::new(vec![0.0, 1.0]).unwrap(),
            ActionDistribution::uniform(2).unwrap(),
        ];
        let q = policy_evaluation(&mdp, &leave, 1e-12).unwrap();
        assert_abs_diff_eq!(q[0][1], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q[0][0], 0.5, epsilon = 1e-9);
        // Uniform policy: Q(s0,a0) solves q = 0.5·0.5·(q + 1) ⇒ 1/3.
        let uniform = vec![
            ActionDistribution::uniform(2).unwrap(),
            ActionDistribution::uniform(2).unwrap(),
        ];
        let q = policy_evaluation(&mdp, &uniform, 1e-12).unwrap();
        assert_abs_diff_eq!(q[0][0], 1.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q[0][1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn soft_policy_evaluation_at_softmax_of_psi_recovers_psi() {
        let mdp = TabularMDP::chain();
        let prior = uniform_prior(&mdp);
        let psi = soft_value_iteration(&mdp, &prior, 2.0, 1e-13).unwrap();
        let policy: Vec<ActionDistribution> =
            psi.iter().map(|row| softmax(row).unwrap()).collect();
        let q = soft_policy_evaluation(&mdp, &policy, &prior, 2.0, 1e-13).unwrap();
        for s in 0..mdp.state_count() {
            for a in 0..mdp.action_count() {
                assert_abs_diff_eq!(q[s][a], psi[s][a], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn reachable_pairs_cover_the_live_part_of_the_space() {
        let chain = TabularMDP::chain();
        assert_eq!(chain.reachable_pairs(), BTreeSet::from([(0, 0), (0, 1)]));
        let grid = TabularMDP::gridworld_4x4();
        assert_eq!(grid.reachable_pairs().len(), 15 * 4);
    }

    #[test]
    fn constructor_rejects_broken_invariants() {
        // Kernel row not summing to 1.
        assert!(TabularMDP::new(
            "bad",
            1,
            1,
            vec![vec![vec![(0, 0.5)]]],
            vec![vec![0.0]],
            BTreeSet::new(),
            0.5,
            vec![0],
            8,
        )
        .is_err());
        // Terminal with an escape route.
        assert!(TabularMDP::new(
            "bad",
            2,
            1,
            vec![vec![vec![(1, 1.0)]], vec![vec![(0, 1.0)]]],
            vec![vec![0.0], vec![0.0]],
            BTreeSet::from([1]),
            0.5,
            vec![0],
            8,
        )
        .is_err());
        // Terminal with nonzero reward.
        assert!(TabularMDP::new(
            "bad",
            2,
            1,
            vec![vec![vec![(1, 1.0)]], vec![vec![(1, 1.0)]]],
            vec![vec![0.0], vec![1.0]],
            BTreeSet::from([1]),
            0.5,
            vec![0],
            8,
        )
        .is_err());
    }

    #[test]
    fn shipped_specs_parse_to_the_constructors() {
        let chain = TabularMDP::from_spec_toml(TabularMDP::chain_spec_toml()).unwrap();
        assert_eq!(chain, TabularMDP::chain());
        let grid = TabularMDP::from_spec_toml(TabularMDP::gridworld_4x4_spec_toml()).unwrap();
        assert_eq!(grid, TabularMDP::gridworld_4x4());
    }

    #[test]
    fn spec_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.toml");
        let mdp = TabularMDP::chain();
        mdp.save_spec(&path).unwrap();
        assert_eq!(TabularMDP::load_spec(&path).unwrap(), mdp);
    }

    /// Regenerates the shipped spec files. Run manually after changing a
    /// constructor: `cargo test -p batchrl regenerate_env_specs -- --ignored`.
    #[test]
    #[ignore]
    fn regenerate_env_specs() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("envspecs");
        TabularMDP::chain().save_spec(&dir.join("chain.toml")).unwrap();
        TabularMDP::gridworld_4x4()
            .save_spec(&dir.join("gridworld_4x4.toml"))
            .unwrap();
    }
}
