//! Grid execution: prepare a shared setup (environment, batch, behavior
//! prior), train every (variant, seed) cell in parallel, evaluate the best
//! checkpoint of each, and collect everything into an [`EvalReport`].

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::algos::{ActMode, StepMetrics, TrainState, Variant};
use crate::approximator::{Activation, FeedforwardQ, QFunction, TabularQ};
use crate::dist::ActionDistribution;
use crate::envs::dialog::{dialog_demonstrations, DialogEnv};
use crate::envs::generate::{
    generate_dialog_batch, generate_tabular_batch, BehaviorPolicy, ENV_CHANNEL,
};
use crate::envs::tabular::{policy_evaluation, soft_policy_evaluation, TabularMDP};
use crate::error::{BrlError, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::reports::check_writable;
use crate::mdp::{Batch, StateRef, Trajectory, TrajectoryStep};
use crate::prior::{AveragedPrior, NetworkFitConfig, Prior, PriorModel};

/// The environment a grid runs against.
#[derive(Debug, Clone)]
pub enum ExperimentEnv {
    Tabular(TabularMDP),
    Dialog(Box<DialogEnv>),
}

impl ExperimentEnv {
    pub fn action_count(&self) -> usize {
        match self {
            ExperimentEnv::Tabular(mdp) => mdp.action_count(),
            ExperimentEnv::Dialog(env) => env.action_count(),
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularMDP> {
        match self {
            ExperimentEnv::Tabular(mdp) => Some(mdp),
            ExperimentEnv::Dialog(_) => None,
        }
    }
}

/// Everything shared across cells, prepared once per experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub env: ExperimentEnv,
    pub batch: Batch,
    /// The behavior prior estimated from the batch — what KL shaping,
    /// candidate filtering, and Q initialization all run against.
    pub prior: Prior,
    pub reward_weights: BTreeMap<String, f64>,
}

/// One trained cell. Numeric fields are NaN when `error` is set.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub variant: Variant,
    pub seed: u64,
    pub error: Option<String>,
    /// Full per-step training trace (loss, policy-prior KL, mean target).
    pub metrics: Vec<StepMetrics>,
    /// Mean of the per-step policy-prior KL over steps that trained.
    pub mean_training_kl: f64,
    pub final_loss: f64,
    /// Step count of the checkpoint the evaluations below come from.
    pub best_checkpoint_step: usize,
    /// Mixture return of greedy rollouts at the best checkpoint.
    pub return_greedy: f64,
    /// Mixture return under the variant's sampling policy.
    pub return_sample: f64,
    pub channels_greedy: BTreeMap<String, f64>,
    pub channels_sample: BTreeMap<String, f64>,
    /// Mean learned-minus-true value gap on under-covered pairs; tabular
    /// environments only.
    pub overestimation_bias: Option<f64>,
    /// Wall-clock spent on this cell. Informational only — reported in a
    /// separate timings file, never in the deterministic reports.
    pub wall_clock_secs: f64,
}

impl CellReport {
    fn failed(variant: Variant, seed: u64, error: String, wall_clock_secs: f64) -> CellReport {
        CellReport {
            variant,
            seed,
            error: Some(error),
            metrics: Vec::new(),
            mean_training_kl: f64::NAN,
            final_loss: f64::NAN,
            best_checkpoint_step: 0,
            return_greedy: f64::NAN,
            return_sample: f64::NAN,
            channels_greedy: BTreeMap::new(),
            channels_sample: BTreeMap::new(),
            overestimation_bias: None,
            wall_clock_secs,
        }
    }
}

/// The result of a full grid: one report per configured (variant, seed)
/// pair, in `variants × seeds` order, present exactly once each — failed
/// cells included, with their error recorded.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub experiment: String,
    pub cells: Vec<CellReport>,
}

impl EvalReport {
    pub fn cell(&self, variant: Variant, seed: u64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.seed == seed)
    }

    /// Checks the exactly-once invariant against the grid that produced it.
    pub fn verify_grid(&self, config: &ExperimentConfig) -> Result<()> {
        let expected = config.cells();
        if self.cells.len() != expected.len() {
            return Err(BrlError::Training(format!(
                "report has {} cells, grid configured {}",
                self.cells.len(),
                expected.len()
            )));
        }
        for ((variant, seed), cell) in expected.iter().zip(&self.cells) {
            if cell.variant != *variant || cell.seed != *seed {
                return Err(BrlError::Training(format!(
                    "report cell ({}, {}) where grid expected ({}, {})",
                    cell.variant, cell.seed, variant, seed
                )));
            }
        }
        Ok(())
    }
}

/// Folds seed components into one stream seed (splitmix64 over the parts),
/// so every rollout context gets its own deterministic generator.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}

fn variant_ordinal(variant: Variant) -> u64 {
    Variant::ALL
        .iter()
        .position(|v| *v == variant)
        .expect("every variant is in ALL") as u64
}

/// Splits a flat batch back into episodes at its terminal flags (a trailing
/// unterminated episode still counts). This is what priors are fitted on.
pub fn batch_trajectories(batch: &Batch) -> Vec<Trajectory> {
    let mut trajectories = Vec::new();
    let mut steps: Vec<TrajectoryStep> = Vec::new();
    for t in batch.transitions() {
        steps.push(TrajectoryStep {
            state: t.state.clone(),
            action: t.action,
            rewards: t.rewards.clone(),
        });
        if t.terminal {
            trajectories.push(Trajectory::new(std::mem::take(&mut steps)));
        }
    }
    if !steps.is_empty() {
        trajectories.push(Trajectory::new(steps));
    }
    trajectories
}

fn resolve_env(config: &ExperimentConfig) -> Result<ExperimentEnv> {
    match config.env.as_str() {
        "chain" => Ok(ExperimentEnv::Tabular(
            TabularMDP::chain().with_gamma(config.gamma)?,
        )),
        "gridworld_4x4" => Ok(ExperimentEnv::Tabular(
            TabularMDP::gridworld_4x4().with_gamma(config.gamma)?,
        )),
        "dialog" => Ok(ExperimentEnv::Dialog(Box::new(DialogEnv::standard()))),
        path => {
            let path = std::path::Path::new(path);
            if !path.exists() {
                return Err(BrlError::usage(format!(
                    "env {:?} is neither a built-in name (chain, gridworld_4x4, dialog) nor an existing spec file",
                    config.env
                )));
            }
            match TabularMDP::load_spec(path) {
                Ok(mdp) => Ok(ExperimentEnv::Tabular(mdp.with_gamma(config.gamma)?)),
                Err(tabular_err) => match DialogEnv::load_spec(path) {
                    Ok(env) => Ok(ExperimentEnv::Dialog(Box::new(env))),
                    Err(dialog_err) => Err(BrlError::format(format!(
                        "{} parses as neither environment kind (as tabular: {tabular_err}; as dialog: {dialog_err})",
                        path.display()
                    ))),
                },
            }
        }
    }
}

/// The behavior that generated batches are rolled under — a tempered prior
/// (uniform for tabular, a demonstration-fitted network for dialog) with the
/// configured coverage hole carved out.
fn behavior_policy(config: &ExperimentConfig, env: &ExperimentEnv) -> Result<BehaviorPolicy> {
    let prior = match env {
        ExperimentEnv::Tabular(mdp) => Prior::Single(PriorModel::uniform(
            mdp.state_count(),
            mdp.action_count(),
            "uniform_behavior",
        )),
        ExperimentEnv::Dialog(env) => {
            let demos = dialog_demonstrations(env, config.demo_episodes, config.batch_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.batch_seed, 0xbe]));
            let net = FeedforwardQ::new(
                &[env.feature_dim(), config.prior_hidden, env.action_count()],
                Activation::Relu,
                0.0,
                &mut rng,
            )?;
            let fit = NetworkFitConfig {
                max_epochs: config.prior_fit_epochs,
                ..NetworkFitConfig::default()
            };
            Prior::Single(PriorModel::fit_mle_network(&demos, net, &fit, "demo_behavior")?)
        }
    };
    let mut behavior = BehaviorPolicy::new(
        "behavior",
        prior,
        config.behavior_temperature,
        1.0,
    );
    match (config.exclude_state, config.exclude_action) {
        (Some(state), Some(action)) => {
            if matches!(env, ExperimentEnv::Dialog(_)) {
                return Err(BrlError::usage(
                    "dialog coverage holes are per-token: set exclude_action alone",
                ));
            }
            behavior = behavior.without_pair(state as u64, action);
        }
        (None, Some(action)) => behavior = behavior.without_action(action),
        _ => {}
    }
    Ok(behavior)
}

fn build_batch(config: &ExperimentConfig, env: &ExperimentEnv) -> Result<Batch> {
    if let Some(path) = &config.batch_path {
        return Batch::load(path);
    }
    let behavior = behavior_policy(config, env)?;
    match env {
        ExperimentEnv::Tabular(mdp) => {
            generate_tabular_batch(mdp, &[behavior], config.batch_episodes, config.batch_seed)
        }
        ExperimentEnv::Dialog(denv) => {
            generate_dialog_batch(denv, &[behavior], config.batch_episodes, config.batch_seed)
        }
    }
}

/// Estimates the behavior prior from the batch itself — the only data an
/// offline run is allowed to see. Model averaging fits several members
/// (smoothing ladder for tabular, init seeds for networks) with equal
/// scores.
fn fit_training_prior(
    config: &ExperimentConfig,
    env: &ExperimentEnv,
    batch: &Batch,
) -> Result<Prior> {
    let trajectories = batch_trajectories(batch);
    match env {
        ExperimentEnv::Tabular(mdp) => {
            if !config.use_model_averaged_prior {
                return Ok(Prior::Single(PriorModel::fit_mle_tabular(
                    &trajectories,
                    mdp.state_count(),
                    mdp.action_count(),
                    config.prior_smoothing,
                    "batch_mle",
                )?));
            }
            let m = config.prior_members;
            let mut members = Vec::with_capacity(m);
            for i in 0..m {
                // Geometric smoothing ladder centered on the configured
                // value: m = 3 gives λ/2, λ, 2λ.
                let exponent = i as f64 - (m as f64 - 1.0) / 2.0;
                let smoothing = config.prior_smoothing * 2f64.powf(exponent);
                members.push(PriorModel::fit_mle_tabular(
                    &trajectories,
                    mdp.state_count(),
                    mdp.action_count(),
                    smoothing,
                    format!("batch_mle_{i}"),
                )?);
            }
            let scores = vec![1.0; m];
            Ok(Prior::Averaged(AveragedPrior::average(members, &scores)?))
        }
        ExperimentEnv::Dialog(denv) => {
            let fit = NetworkFitConfig {
                max_epochs: config.prior_fit_epochs,
                ..NetworkFitConfig::default()
            };
            let dims = [
                denv.feature_dim(),
                config.prior_hidden,
                denv.action_count(),
            ];
            let member_count = if config.use_model_averaged_prior {
                config.prior_members
            } else {
                1
            };
            let mut members = Vec::with_capacity(member_count);
            for i in 0..member_count {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(&[config.batch_seed, 0xf1, i as u64]));
                let net = FeedforwardQ::new(&dims, Activation::Relu, config.q_dropout, &mut rng)?;
                members.push(PriorModel::fit_mle_network(
                    &trajectories,
                    net,
                    &fit,
                    format!("batch_net_{i}"),
                )?);
            }
            if member_count == 1 {
                Ok(Prior::Single(members.pop().expect("one member fitted")))
            } else {
                let scores = vec![1.0; member_count];
                Ok(Prior::Averaged(AveragedPrior::average(members, &scores)?))
            }
        }
    }
}

/// Loads or generates the batch, fits the training prior from it, and
/// resolves the reward mixture. Shared by every cell in the grid.
pub fn prepare(config: &ExperimentConfig) -> Result<ExperimentSetup> {
    config.validate()?;
    let env = resolve_env(config)?;
    match &env {
        ExperimentEnv::Tabular(_) if config.reward != "env" => {
            return Err(BrlError::usage(
                "tabular environments have a single reward channel: set reward = \"env\"",
            ));
        }
        ExperimentEnv::Dialog(_) if config.reward == "env" => {
            return Err(BrlError::usage(
                "dialog rewards come from the implicit channels: set reward = \"mixture\" or a channel name",
            ));
        }
        _ => {}
    }
    let batch = build_batch(config, &env)?;
    if batch.action_count() != env.action_count() {
        return Err(BrlError::usage(format!(
            "batch has {} actions but the environment has {}",
            batch.action_count(),
            env.action_count()
        )));
    }
    let prior = fit_training_prior(config, &env, &batch)?;
    let reward_weights = config.reward_weights()?;
    Ok(ExperimentSetup {
        env,
        batch,
        prior,
        reward_weights,
    })
}

/// Mean undiscounted episode returns of rollouts under the cell's policy:
/// the mixture-weighted scalar plus every channel separately.
pub fn rollout_returns(
    state: &TrainState,
    setup: &ExperimentSetup,
    episodes: usize,
    mode: ActMode,
    seed: u64,
) -> Result<(f64, BTreeMap<String, f64>)> {
    if episodes == 0 {
        return Err(BrlError::usage("rollouts need at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channel_sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut scalar_sum = 0.0;
    for _ in 0..episodes {
        let mut episode: BTreeMap<String, f64> = BTreeMap::new();
        match &setup.env {
            ExperimentEnv::Tabular(mdp) => {
                use rand::Rng;
                let states = crate::algos::tabular_state_refs(state.q(), mdp.state_count())?;
                let starts = mdp.start_states();
                let mut s = starts[rng.random_range(0..starts.len())];
                for _ in 0..mdp.max_episode_steps() {
                    if mdp.is_terminal(s) {
                        break;
                    }
                    let a = state.act_with(&states[s], mode, &mut rng)?;
                    *episode.entry(ENV_CHANNEL.to_string()).or_insert(0.0) += mdp.reward(s, a);
                    s = mdp.sample_next(s, a, &mut rng);
                }
            }
            ExperimentEnv::Dialog(env) => {
                let mut dialog = env.reset(&mut rng);
                loop {
                    let a = state.act_with(&env.state_ref(&dialog), mode, &mut rng)?;
                    let outcome = env.step(&dialog, a)?;
                    for (channel, r) in &outcome.rewards {
                        *episode.entry(channel.clone()).or_insert(0.0) += r;
                    }
                    dialog = outcome.next;
                    if outcome.conversation_done {
                        break;
                    }
                }
            }
        }
        for (channel, weight) in &setup.reward_weights {
            scalar_sum += weight * episode.get(channel).copied().unwrap_or(0.0);
        }
        for (channel, sum) in episode {
            *channel_sums.entry(channel).or_insert(0.0) += sum;
        }
    }
    let n = episodes as f64;
    let channels = channel_sums
        .into_iter()
        .map(|(channel, sum)| (channel, sum / n))
        .collect();
    Ok((scalar_sum / n, channels))
}

/// Reachable (state, action) pairs the batch never observed — where value
/// estimates run on extrapolation alone. Falls back to every reachable pair
/// when the batch covers the MDP completely.
pub fn under_covered_pairs(batch: &Batch, mdp: &TabularMDP) -> Vec<(u64, usize)> {
    let reachable = mdp.reachable_pairs();
    let seen = batch.seen_pairs();
    let missing: Vec<(u64, usize)> = reachable.difference(&seen).copied().collect();
    if missing.is_empty() {
        reachable.into_iter().collect()
    } else {
        missing
    }
}

fn mean_value_gap(q: &QFunction, q_true: &[Vec<f64>], pairs: &[(u64, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(BrlError::usage("bias needs at least one pair"));
    }
    let states = crate::algos::tabular_state_refs(q, q_true.len())?;
    let mut sum = 0.0;
    for &(s, a) in pairs {
        let learned = q.values(&states[s as usize], None)?;
        sum += learned[a] - q_true[s as usize][a];
    }
    Ok(sum / pairs.len() as f64)
}

/// Rewrites a tabular batch's states as one-hot feature vectors so network
/// approximators can train on it. Everything else is carried over intact.
pub fn one_hot_tabular_batch(batch: &Batch, state_count: usize) -> Result<Batch> {
    let encode = |state: &StateRef| -> Result<StateRef> {
        let id = state.id;
        if id as usize >= state_count {
            return Err(BrlError::usage(format!(
                "state id {id} outside the {state_count}-state one-hot encoding"
            )));
        }
        let mut features = vec![0.0; state_count];
        features[id as usize] = 1.0;
        Ok(StateRef::with_features(id, features))
    };
    let transitions = batch
        .transitions()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.state = encode(&t.state)?;
            t.next_state = encode(&t.next_state)?;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::new(
        transitions,
        batch.action_count(),
        batch.metadata().clone(),
        batch.channels().to_vec(),
    )
}

/// Mean learned-minus-true action value over `pairs`, where truth is the
/// exact evaluation of `policy` on `mdp`. Zero means the estimates are
/// calibrated; a learner that overestimates every pair by 1 scores 1.
pub fn overestimation_bias(
    q: &QFunction,
    policy: &[ActionDistribution],
    mdp: &TabularMDP,
    pairs: &[(u64, usize)],
) -> Result<f64> {
    let q_true = policy_evaluation(mdp, policy, 1e-10)?;
    mean_value_gap(q, &q_true, pairs)
}

/// Overestimation bias in the units the cell actually trained in: baselines
/// against their greedy policy's value under the (possibly scaled) env
/// reward, the KL-shaped variant against its softmax policy under the
/// shaped reward, and the soft variant against its entropy-regularized
/// evaluation.
pub fn variant_overestimation_bias(
    state: &TrainState,
    mdp: &TabularMDP,
    pairs: &[(u64, usize)],
) -> Result<f64> {
    let algo = state.algo();
    let s_count = mdp.state_count();
    match algo.variant {
        Variant::BatchQ | Variant::BatchQMc | Variant::Dbcq => {
            let policy = state.tabular_policy(s_count, ActMode::Greedy)?;
            let mdp_eff = if algo.scale_baseline_rewards {
                let rewards = (0..s_count)
                    .map(|s| {
                        (0..mdp.action_count())
                            .map(|a| mdp.reward(s, a) / algo.reward_scale)
                            .collect()
                    })
                    .collect();
                mdp.with_rewards(rewards)?
            } else {
                mdp.clone()
            };
            let q_true = policy_evaluation(&mdp_eff, &policy, 1e-10)?;
            mean_value_gap(state.q(), &q_true, pairs)
        }
        Variant::KlQ => {
            let policy = state.tabular_policy(s_count, ActMode::Sample)?;
            let mut shaped = vec![vec![0.0; mdp.action_count()]; s_count];
            for (s, row) in shaped.iter_mut().enumerate() {
                if mdp.is_terminal(s) {
                    continue;
                }
                let prior = state.prior().evaluate_tabular(s as u64, s_count)?;
                for (a, cell) in row.iter_mut().enumerate() {
                    let p = prior.probs()[a];
                    if p <= 0.0 {
                        return Err(BrlError::usage(
                            "KL-shaped bias needs a strictly positive prior (smooth it)",
                        ));
                    }
                    *cell = mdp.reward(s, a) / algo.reward_scale + p.ln()
                        - policy[s].probs()[a].ln();
                }
            }
            let q_true = policy_evaluation(&mdp.with_rewards(shaped)?, &policy, 1e-10)?;
            mean_value_gap(state.q(), &q_true, pairs)
        }
        Variant::KlPsi => {
            let policy = state.tabular_policy(s_count, ActMode::Sample)?;
            let psi_true =
                soft_policy_evaluation(mdp, &policy, state.prior(), algo.reward_scale, 1e-10)?;
            mean_value_gap(state.q(), &psi_true, pairs)
        }
    }
}

struct TrainedCell {
    state: TrainState,
    metrics: Vec<StepMetrics>,
    best_checkpoint_step: usize,
}

fn train_cell(
    config: &ExperimentConfig,
    setup: &ExperimentSetup,
    variant: Variant,
    seed: u64,
) -> Result<TrainedCell> {
    let algo = config.algo_config(variant, seed);
    let optim = config.optim_config();
    let mut state = if config.prior_smoothing == 0.0 {
        // An unsmoothed prior has zero-probability pairs, so its log-table
        // is no Q initializer; start from zeros instead.
        match &setup.env {
            ExperimentEnv::Tabular(mdp) => TrainState::with_q(
                algo,
                optim,
                setup.prior.clone(),
                QFunction::Tabular(TabularQ::zeros(mdp.state_count(), mdp.action_count())),
                setup.reward_weights.clone(),
            )?,
            ExperimentEnv::Dialog(_) => {
                return Err(BrlError::usage(
                    "dialog priors are networks; prior_smoothing = 0 has no meaning here",
                ))
            }
        }
    } else {
        TrainState::from_prior(
            algo,
            optim,
            setup.prior.clone(),
            setup.reward_weights.clone(),
        )?
    };

    // Early stopping: evaluate a fixed held-out rollout budget at every
    // checkpoint (common random numbers across checkpoints, so scores are
    // comparable) and keep the best-scoring snapshot. Ties keep the
    // earliest.
    let early_seed = derive_seed(&[config.eval_seed, variant_ordinal(variant), seed, 0]);
    let checkpoint_every = (config.training_steps / config.checkpoints).max(1);
    let mut best: Option<(f64, usize, TrainState)> = None;
    for step in 1..=config.training_steps {
        state.step_on_batch(&setup.batch)?;
        if step % checkpoint_every == 0 || step == config.training_steps {
            let (score, _) = rollout_returns(
                &state,
                setup,
                config.early_stop_episodes,
                ActMode::Greedy,
                early_seed,
            )?;
            let improved = match &best {
                Some((best_score, _, _)) => score > *best_score,
                None => true,
            };
            if improved {
                best = Some((score, step, state.clone()));
            }
        }
    }
    let (_, best_checkpoint_step, best_state) = best.expect("at least the final checkpoint ran");
    Ok(TrainedCell {
        metrics: state.metrics().to_vec(),
        state: best_state,
        best_checkpoint_step,
    })
}

fn run_cell(
    config: &ExperimentConfig,
    setup: &ExperimentSetup,
    variant: Variant,
    seed: u64,
) -> CellReport {
    let started = Instant::now();
    let result = (|| -> Result<CellReport> {
        let trained = train_cell(config, setup, variant, seed)?;
        let ordinal = variant_ordinal(variant);
        let (return_greedy, channels_greedy) = rollout_returns(
            &trained.state,
            setup,
            config.eval_episodes,
            ActMode::Greedy,
            derive_seed(&[config.eval_seed, ordinal, seed, 1]),
        )?;
        let (return_sample, channels_sample) = rollout_returns(
            &trained.state,
            setup,
            config.eval_episodes,
            ActMode::Sample,
            derive_seed(&[config.eval_seed, ordinal, seed, 2]),
        )?;
        let overestimation_bias = match &setup.env {
            ExperimentEnv::Tabular(mdp) => {
                let pairs = under_covered_pairs(&setup.batch, mdp);
                Some(variant_overestimation_bias(&trained.state, mdp, &pairs)?)
            }
            ExperimentEnv::Dialog(_) => None,
        };
        let finite_kl: Vec<f64> = trained
            .metrics
            .iter()
            .map(|m| m.mean_kl)
            .filter(|v| v.is_finite())
            .collect();
        let mean_training_kl = if finite_kl.is_empty() {
            f64::NAN
        } else {
            finite_kl.iter().sum::<f64>() / finite_kl.len() as f64
        };
        let final_loss = trained
            .metrics
            .iter()
            .rev()
            .map(|m| m.loss)
            .find(|v| v.is_finite())
            .unwrap_or(f64::NAN);
        Ok(CellReport {
            variant,
            seed,
            error: None,
            metrics: trained.metrics,
            mean_training_kl,
            final_loss,
            best_checkpoint_step: trained.best_checkpoint_step,
            return_greedy,
            return_sample,
            channels_greedy,
            channels_sample,
            overestimation_bias,
            wall_clock_secs: 0.0,
        })
    })();
    let wall_clock_secs = started.elapsed().as_secs_f64();
    match result {
        Ok(mut report) => {
            report.wall_clock_secs = wall_clock_secs;
            report
        }
        Err(e) => {
            log::warn!("cell ({variant}, seed {seed}) failed: {e}");
            CellReport::failed(variant, seed, e.to_string(), wall_clock_secs)
        }
    }
}

/// Trains and evaluates every cell of an already-prepared grid. Cells run
/// in parallel on the configured worker count and fail independently — one
/// bad cell never takes down the grid.
pub fn run_with_setup(config: &ExperimentConfig, setup: &ExperimentSetup) -> Result<EvalReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| BrlError::Training(format!("worker pool: {e}")))?;
    let cells = pool.install(|| {
        config
            .cells()
            .into_par_iter()
            .map(|(variant, seed)| run_cell(config, setup, variant, seed))
            .collect::<Vec<CellReport>>()
    });
    let report = EvalReport {
        experiment: config.name.clone(),
        cells,
    };
    report.verify_grid(config)?;
    Ok(report)
}

/// The full pipeline: validate, check the output directory is writable
/// (before any compute is spent), prepare the shared setup, run the grid.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    check_writable(&config.output_dir)?;
    let setup = prepare(config)?;
    run_with_setup(config, &setup)
}
