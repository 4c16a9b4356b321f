//! Batch generation: roll behavior policies through an environment and
//! record every transition, tagged with the model that produced it.
//!
//! Behavior policies are priors reshaped by a softmax temperature, with
//! optional support restrictions — the latter is how partial-coverage
//! batches for overestimation experiments are made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

use crate::dist::softmax;
use crate::error::{BrlError, Result};
use crate::mdp::{Batch, StateRef, Transition};
use crate::prior::Prior;

use super::dialog::DialogEnv;
use super::tabular::TabularMDP;

/// Reward channel name used by tabular batches.
pub const ENV_CHANNEL: &str = "env";

/// One data-collecting policy: a prior sharpened or flattened by
/// `temperature` (logits = log p / T), stripped of any excluded support.
#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    pub model_id: String,
    pub prior: Prior,
    /// Softmax temperature over the prior's log-probabilities; 1 plays the
    /// prior as-is, higher is flatter (support never grows).
    pub temperature: f64,
    /// Share of the episode budget this policy collects.
    pub fraction: f64,
    /// (state id, action) pairs this policy refuses — tabular states only.
    pub exclude_pairs: BTreeSet<(u64, usize)>,
    /// Actions this policy refuses everywhere.
    pub excluded_actions: BTreeSet<usize>,
}

impl BehaviorPolicy {
    pub fn new(model_id: impl Into<String>, prior: Prior, temperature: f64, fraction: f64) -> Self {
        BehaviorPolicy {
            model_id: model_id.into(),
            prior,
            temperature,
            fraction,
            exclude_pairs: BTreeSet::new(),
            excluded_actions: BTreeSet::new(),
        }
    }

    pub fn without_pair(mut self, state: u64, action: usize) -> Self {
        self.exclude_pairs.insert((state, action));
        self
    }

    pub fn without_action(mut self, action: usize) -> Self {
        self.excluded_actions.insert(action);
        self
    }

    /// Samples an action at `state` from the tempered, restricted prior.
    pub fn sample(&self, state: &StateRef, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(BrlError::usage("behavior temperature must be positive and finite"));
        }
        let dist = self.prior.evaluate(state)?;
        let logits: Vec<f64> = dist
            .probs()
            .iter()
            .enumerate()
            .map(|(a, &p)| {
                if p <= 0.0
                    || self.excluded_actions.contains(&a)
                    || self.exclude_pairs.contains(&(state.id, a))
                {
                    f64::NEG_INFINITY
                } else {
                    p.ln() / self.temperature
                }
            })
            .collect();
        let dist = softmax(&logits).map_err(|_| {
            BrlError::usage(format!(
                "behavior '{}' has no allowed action at state {}",
                self.model_id, state.id
            ))
        })?;
        Ok(dist.sample(rng))
    }
}

/// Splits an episode budget across policies by their fractions: floor each
/// share, then hand leftovers to the largest remainders (ties by position).
fn allocate_episodes(behaviors: &[BehaviorPolicy], episodes: usize) -> Result<Vec<usize>> {
    if episodes == 0 {
        return Err(BrlError::usage("batch generation needs at least one episode"));
    }
    if behaviors.is_empty() {
        return Err(BrlError::usage("batch generation needs at least one behavior policy"));
    }
    let total: f64 = behaviors.iter().map(|b| b.fraction).sum();
    if behaviors.iter().any(|b| b.fraction < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(BrlError::usage(format!(
            "behavior fractions must be non-negative and sum to 1 (got {total})"
        )));
    }
    let mut counts: Vec<usize> = behaviors
        .iter()
        .map(|b| (b.fraction * episodes as f64).floor() as usize)
        .collect();
    let mut leftovers: Vec<(f64, usize)> = behaviors
        .iter()
        .enumerate()
        .map(|(i, b)| (b.fraction * episodes as f64 - counts[i] as f64, i))
        .collect();
    leftovers.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut missing = episodes - counts.iter().sum::<usize>();
    for (_, i) in leftovers {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    Ok(counts)
}

fn realized_metadata(behaviors: &[BehaviorPolicy], counts: &[usize], episodes: usize) -> BTreeMap<String, f64> {
    behaviors
        .iter()
        .zip(counts)
        .map(|(b, &n)| (b.model_id.clone(), n as f64 / episodes as f64))
        .collect()
}

/// Rolls `episodes` episodes on a tabular MDP, split across behaviors by
/// fraction, and assembles the batch. Rewards land on the single
/// [`ENV_CHANNEL`] channel; metadata records realized per-model
/// proportions. Everything is drawn from one sequential stream, so a seed
/// fixes the batch bit-for-bit.
pub fn generate_tabular_batch(
    mdp: &TabularMDP,
    behaviors: &[BehaviorPolicy],
    episodes: usize,
    seed: u64,
) -> Result<Batch> {
    let counts = allocate_episodes(behaviors, episodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::new();
    for (behavior, &n) in behaviors.iter().zip(&counts) {
        for _ in 0..n {
            let start = mdp.start_states()[rng.random_range(0..mdp.start_states().len())];
            let mut s = start;
            for _ in 0..mdp.max_episode_steps() {
                let state = StateRef::tabular(s as u64);
                let a = behavior.sample(&state, &mut rng)?;
                let next = mdp.sample_next(s, a, &mut rng);
                let terminal = mdp.is_terminal(next);
                transitions.push(Transition {
                    state,
                    action: a,
                    rewards: BTreeMap::from([(ENV_CHANNEL.to_string(), mdp.reward(s, a))]),
                    next_state: StateRef::tabular(next as u64),
                    terminal,
                    behavior_model: Some(behavior.model_id.clone()),
                    context: None,
                });
                if terminal {
                    break;
                }
                s = next;
            }
        }
    }
    Batch::new(
        transitions,
        mdp.action_count(),
        realized_metadata(behaviors, &counts, episodes),
        vec![ENV_CHANNEL.to_string()],
    )
}

/// Rolls dialog conversations under behavior policies. Every transition
/// carries all seven reward channels plus the dialog context needed to
/// relabel them later.
pub fn generate_dialog_batch(
    env: &DialogEnv,
    behaviors: &[BehaviorPolicy],
    episodes: usize,
    seed: u64,
) -> Result<Batch> {
    let counts = allocate_episodes(behaviors, episodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::new();
    for (behavior, &n) in behaviors.iter().zip(&counts) {
        for _ in 0..n {
            let mut state = env.reset(&mut rng);
            while !state.is_done() {
                let state_ref = env.state_ref(&state);
                let a = behavior.sample(&state_ref, &mut rng)?;
                let outcome = env.step(&state, a)?;
                transitions.push(Transition {
                    state: state_ref,
                    action: a,
                    rewards: outcome.rewards,
                    next_state: env.state_ref(&outcome.next),
                    terminal: outcome.conversation_done,
                    behavior_model: Some(behavior.model_id.clone()),
                    context: Some(outcome.context),
                });
                state = outcome.next;
            }
        }
    }
    Batch::new(
        transitions,
        env.action_count(),
        realized_metadata(behaviors, &counts, episodes),
        crate::rewards::CHANNELS.iter().map(|c| c.to_string()).collect(),
    )
}

/// Fraction of the MDP's reachable (state, action) pairs a batch observed.
pub fn coverage(batch: &Batch, mdp: &TabularMDP) -> f64 {
    let reachable = mdp.reachable_pairs();
    if reachable.is_empty() {
        return 1.0;
    }
    let seen = batch.seen_pairs();
    reachable.intersection(&seen).count() as f64 / reachable.len() as f64
}

/// A quick network prior fitted on a handful of demonstrations — shared by
/// tests that need a plausible dialog behavior model without the cost of a
/// full fit.
#[cfg(test)]
pub(crate) fn fitted_dialog_prior(env: &DialogEnv) -> Prior {
    use crate::prior::PriorModel;
    let demos = super::dialog::dialog_demonstrations(env, 4, 2).unwrap();
    let mut net_rng = ChaCha8Rng::seed_from_u64(3);
    let net = crate::approximator::FeedforwardQ::new(
        &[env.feature_dim(), 16, env.action_count()],
        crate::approximator::Activation::Relu,
        0.0,
        &mut net_rng,
    )
    .unwrap();
    Prior::Single(
        PriorModel::fit_mle_network(
            &demos,
            net,
            &crate::prior::NetworkFitConfig {
                max_epochs: 40,
                ..Default::default()
            },
            "demo_net",
        )
        .unwrap(),
    )
}
