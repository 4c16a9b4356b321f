//! The batch RL algorithm family: plain Bellman regression, its
//! dropout-pessimistic variant, prior-restricted greedy (discrete BCQ), and
//! the two KL-regularized variants (Q with an explicit policy correction,
//! and Ψ-learning with a soft backup).
//!
//! Everything stochastic inside a training run — minibatch draws, dropout
//! masks, candidate sampling — is drawn from a single seeded stream owned by
//! `TrainState`, so a (config, seed, batch) triple fully determines the run.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{huber, Gradient, QFunction, TargetCopy};
use crate::dist::{kl_divergence, log_sum_exp, softmax, ActionDistribution};
use crate::envs::dialog::{DialogEnv, DialogState};
use crate::error::{BrlError, Result};
use crate::mdp::{Batch, StateRef};
use crate::prior::{init_q_from_prior, Prior};

/// Which member of the algorithm family a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain Bellman regression on the batch.
    BatchQ,
    /// Bellman regression with dropout-pessimistic bootstrap values.
    BatchQMc,
    /// Greedy over candidates sampled from the behavior prior.
    Dbcq,
    /// Q-learning on the KL-augmented reward `r/c + log p − log π`.
    KlQ,
    /// Ψ-learning: soft backup on the shaped reward `r/c + log p`.
    KlPsi,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::BatchQ,
        Variant::BatchQMc,
        Variant::Dbcq,
        Variant::KlQ,
        Variant::KlPsi,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::BatchQ => "batch_q",
            Variant::BatchQMc => "batch_q_mc",
            Variant::Dbcq => "dbcq",
            Variant::KlQ => "kl_q",
            Variant::KlPsi => "kl_psi",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                BrlError::usage(format!(
                    "unknown variant {name:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }

    /// True for the variants whose targets are built on the KL-shaped
    /// reward (and therefore need the behavior prior at the visited state).
    pub fn is_kl(&self) -> bool {
        matches!(self, Variant::KlQ | Variant::KlPsi)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How an action is selected from the learned values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// Deterministic: argmax (lowest index on ties). For the candidate
    /// variant this means the top-n-by-prior candidate set.
    Greedy,
    /// Stochastic: softmax over values, except the candidate variant which
    /// samples its candidate set from the prior.
    Sample,
}

/// Algorithm-side knobs. `reward_scale` is the KL trade-off `c` (the shaped
/// reward divides the env reward by it), `mc_passes` the number of dropout
/// passes behind the pessimistic bound, `dbcq_candidates` the number of
/// prior draws the candidate variant considers per decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub reward_scale: f64,
    pub mc_passes: usize,
    pub dbcq_candidates: usize,
    /// When true, the prior handed to `TrainState` is expected to be the
    /// model-averaged kind; recorded here so configs round-trip.
    pub use_model_averaged_prior: bool,
    /// Ablation switch: also divide the baseline variants' rewards by
    /// `reward_scale` so returns are comparable across the family.
    pub scale_baseline_rewards: bool,
    pub seed: u64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            variant: Variant::BatchQ,
            gamma: 0.5,
            reward_scale: 2.0,
            mc_passes: 5,
            dbcq_candidates: 10,
            use_model_averaged_prior: false,
            scale_baseline_rewards: false,
            seed: 0,
        }
    }
}

impl AlgoConfig {
    pub fn new(variant: Variant) -> Self {
        AlgoConfig {
            variant,
            ..AlgoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(BrlError::usage(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.reward_scale > 0.0) {
            return Err(BrlError::usage(format!(
                "reward_scale must be positive, got {}",
                self.reward_scale
            )));
        }
        if self.mc_passes == 0 {
            return Err(BrlError::usage("mc_passes must be >= 1"));
        }
        if self.dbcq_candidates == 0 {
            return Err(BrlError::usage("dbcq_candidates must be >= 1"));
        }
        Ok(())
    }
}

/// How per-transition gradients are combined within a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradReduction {
    Mean,
    Sum,
}

/// How minibatches are drawn from the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinibatchMode {
    /// Uniform with replacement (ordinary stochastic training).
    Random,
    /// Consecutive wrapping chunks, so `len/size` steps visit every
    /// transition exactly once.
    Sweep,
}

/// Optimizer-side knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Global L2 clip applied before the step; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Target-network interpolation rate per step, in (0, 1].
    pub polyak_rate: f64,
    /// Smooth-L1 transition point; `f64::INFINITY` selects the pure
    /// quadratic loss.
    pub huber_delta: f64,
    pub minibatch_size: usize,
    pub grad_reduction: GradReduction,
    pub minibatch_mode: MinibatchMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            clip_norm: Some(1.0),
            polyak_rate: 0.005,
            huber_delta: 1.0,
            minibatch_size: 32,
            grad_reduction: GradReduction::Mean,
            minibatch_mode: MinibatchMode::Random,
        }
    }
}

impl OptimConfig {
    /// The exact-assignment preset: quadratic loss, unit learning rate,
    /// single-transition sweeps, no clipping, hard target copies. On a
    /// tabular approximator each step performs the literal assignment
    /// `Q(s,a) ← target`, so sweeping a full-coverage batch is asynchronous
    /// dynamic programming and converges to the oracle fixed point.
    pub fn assignment_sweep() -> Self {
        OptimConfig {
            learning_rate: 1.0,
            clip_norm: None,
            polyak_rate: 1.0,
            huber_delta: f64::INFINITY,
            minibatch_size: 1,
            grad_reduction: GradReduction::Sum,
            minibatch_mode: MinibatchMode::Sweep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(BrlError::usage(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(clip) = self.clip_norm {
            if !(clip > 0.0) {
                return Err(BrlError::usage(format!(
                    "clip_norm must be positive when set, got {clip}"
                )));
            }
        }
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return Err(BrlError::usage(format!(
                "polyak_rate must lie in (0, 1], got {}",
                self.polyak_rate
            )));
        }
        if !(self.huber_delta > 0.0) {
            return Err(BrlError::usage(format!(
                "huber_delta must be positive, got {}",
                self.huber_delta
            )));
        }
        if self.minibatch_size == 0 {
            return Err(BrlError::usage("minibatch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 0-based step ordinal.
    pub step: usize,
    /// Mean smooth-L1 loss over the transitions that contributed.
    pub loss: f64,
    /// Mean KL(π(·|s) ‖ prior(·|s)) over the minibatch states, where π is
    /// the softmax of the current values.
    pub mean_kl: f64,
    /// Mean regression target over the contributing transitions.
    pub mean_target: f64,
}

// ---------------------------------------------------------------------------
// Target construction. Targets are treated as constants: no gradient flows
// through the bootstrap term, which always reads the target copy.
// ---------------------------------------------------------------------------

fn max_value(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// State handles for ids `0..state_count`, encoded the way `q` consumes
/// them: bare ids for tables, one-hot feature vectors for networks (whose
/// input width must then equal the state count — the convention that lets a
/// function approximator stand in for a table on small MDPs).
pub fn tabular_state_refs(q: &QFunction, state_count: usize) -> Result<Vec<StateRef>> {
    match q {
        QFunction::Tabular(_) => Ok((0..state_count)
            .map(|s| StateRef::tabular(s as u64))
            .collect()),
        QFunction::Network(n) => {
            if n.input_dim != state_count {
                return Err(BrlError::usage(format!(
                    "network takes {}-dimensional inputs, so it cannot one-hot encode {} states",
                    n.input_dim, state_count
                )));
            }
            Ok((0..state_count)
                .map(|s| {
                    let mut features = vec![0.0; state_count];
                    features[s] = 1.0;
                    StateRef::with_features(s as u64, features)
                })
                .collect())
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `r` at terminals, else `r + γ·max_a Q_target(s', a)` with a deterministic
/// target pass.
pub fn target_batch_q(
    target: &QFunction,
    reward: f64,
    terminal: bool,
    next_state: &StateRef,
    gamma: f64,
) -> Result<f64> {
    if terminal {
        return Ok(reward);
    }
    Ok(reward + gamma * max_value(&target.values(next_state, None)?))
}

/// Like the plain target, but the bootstrap maximizes the per-action
/// minimum over `passes` dropout passes of the target copy — a pessimistic
/// value for actions the network is uncertain about.
pub fn target_batch_q_mc(
    target: &QFunction,
    reward: f64,
    terminal: bool,
    next_state: &StateRef,
    gamma: f64,
    passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if terminal {
        return Ok(reward);
    }
    Ok(reward + gamma * max_value(&target.mc_lower_bound(next_state, passes, rng)?))
}

/// Candidate-restricted target: the bootstrap maximizes the pessimistic
/// values only over actions drawn from the behavior prior at `s'`
/// (`candidates` draws with replacement, then deduplicated).
pub fn target_dbcq(
    target: &QFunction,
    prior: &Prior,
    reward: f64,
    terminal: bool,
    next_state: &StateRef,
    gamma: f64,
    passes: usize,
    candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if terminal {
        return Ok(reward);
    }
    let dist = prior.evaluate(next_state)?;
    let chosen: BTreeSet<usize> = (0..candidates).map(|_| dist.sample(rng)).collect();
    let values = target.mc_lower_bound(next_state, passes, rng)?;
    let best = chosen
        .into_iter()
        .map(|a| values[a])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(reward + gamma * best)
}

/// Target on the KL-augmented reward
/// `ρ = r/c + log p(a|s) − log π(a|s)`: `ρ` at terminals, else
/// `ρ + γ·max_a` of the pessimistic target values. The caller supplies the
/// two log-probabilities at the taken action; `π` is the softmax of the
/// *current* values and is treated as a constant here.
pub fn target_kl_q(
    target: &QFunction,
    reward: f64,
    terminal: bool,
    next_state: &StateRef,
    gamma: f64,
    passes: usize,
    reward_scale: f64,
    prior_log_prob: f64,
    policy_log_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let shaped = reward / reward_scale + prior_log_prob - policy_log_prob;
    if terminal {
        return Ok(shaped);
    }
    Ok(shaped + gamma * max_value(&target.mc_lower_bound(next_state, passes, rng)?))
}

/// Ψ target: `r/c + log p(a|s)` at terminals, else additionally
/// `γ·logΣexp` of the pessimistic target Ψ values — a soft backup, so the
/// greedy max never appears and the induced policy is the softmax of Ψ.
pub fn target_kl_psi(
    target: &QFunction,
    reward: f64,
    terminal: bool,
    next_state: &StateRef,
    gamma: f64,
    passes: usize,
    reward_scale: f64,
    prior_log_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let shaped = reward / reward_scale + prior_log_prob;
    if terminal {
        return Ok(shaped);
    }
    let psi = target.mc_lower_bound(next_state, passes, rng)?;
    Ok(shaped + gamma * log_sum_exp(&psi)?)
}

// ---------------------------------------------------------------------------
// Train state
// ---------------------------------------------------------------------------

/// Everything one training run owns: the online approximator, its target
/// copy, the behavior prior, the reward mixture, the RNG stream, and the
/// step trace.
#[derive(Debug, Clone)]
pub struct TrainState {
    algo: AlgoConfig,
    optim: OptimConfig,
    q: QFunction,
    target: TargetCopy,
    prior: Prior,
    reward_weights: std::collections::BTreeMap<String, f64>,
    rng: ChaCha8Rng,
    step_count: usize,
    metrics: Vec<StepMetrics>,
}

impl TrainState {
    /// Builds a run whose values start at the prior's log-probabilities
    /// (tabular priors only), the initialization that keeps the initial
    /// policy close to the behavior policy.
    pub fn from_prior(
        algo: AlgoConfig,
        optim: OptimConfig,
        prior: Prior,
        reward_weights: std::collections::BTreeMap<String, f64>,
    ) -> Result<TrainState> {
        algo.validate()?;
        optim.validate()?;
        let (q, target) = init_q_from_prior(&prior, optim.polyak_rate)?;
        Self::assemble(algo, optim, prior, q, target, reward_weights)
    }

    /// Builds a run around an explicit approximator (zero-initialized
    /// tables, fresh networks, loaded checkpoints).
    pub fn with_q(
        algo: AlgoConfig,
        optim: OptimConfig,
        prior: Prior,
        q: QFunction,
        reward_weights: std::collections::BTreeMap<String, f64>,
    ) -> Result<TrainState> {
        algo.validate()?;
        optim.validate()?;
        let target = TargetCopy::new(&q, optim.polyak_rate)?;
        Self::assemble(algo, optim, prior, q, target, reward_weights)
    }

    fn assemble(
        algo: AlgoConfig,
        optim: OptimConfig,
        prior: Prior,
        q: QFunction,
        target: TargetCopy,
        reward_weights: std::collections::BTreeMap<String, f64>,
    ) -> Result<TrainState> {
        if prior.action_count() != q.action_count() {
            return Err(BrlError::usage(format!(
                "prior has {} actions but the approximator has {}",
                prior.action_count(),
                q.action_count()
            )));
        }
        if reward_weights.is_empty() {
            return Err(BrlError::usage("reward_weights must name at least one channel"));
        }
        let rng = ChaCha8Rng::seed_from_u64(algo.seed);
        Ok(TrainState {
            algo,
            optim,
            q,
            target,
            prior,
            reward_weights,
            rng,
            step_count: 0,
            metrics: Vec::new(),
        })
    }

    pub fn algo(&self) -> &AlgoConfig {
        &self.algo
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn q(&self) -> &QFunction {
        &self.q
    }

    pub fn target(&self) -> &QFunction {
        self.target.q()
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn reward_weights(&self) -> &std::collections::BTreeMap<String, f64> {
        &self.reward_weights
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    /// The stochastic policy the current values induce: softmax over the
    /// deterministic forward pass. For the Ψ variant the values *are* Ψ, so
    /// this is the variant's actual sampling policy; for the others it is
    /// the Boltzmann policy used for sampling-mode action selection and for
    /// the KL diagnostic.
    pub fn policy(&self, state: &StateRef) -> Result<ActionDistribution> {
        softmax(&self.q.values(state, None)?)
    }

    /// Selects an action with the run's own RNG stream.
    pub fn act(&mut self, state: &StateRef, mode: ActMode) -> Result<usize> {
        let mut rng = self.rng.clone();
        let action = self.act_with(state, mode, &mut rng)?;
        self.rng = rng;
        Ok(action)
    }

    /// Selects an action with an external RNG — evaluation rollouts use
    /// this so they never perturb the training stream.
    pub fn act_with(&self, state: &StateRef, mode: ActMode, rng: &mut ChaCha8Rng) -> Result<usize> {
        match (self.algo.variant, mode) {
            (Variant::Dbcq, ActMode::Greedy) => {
                let prior = self.prior.evaluate(state)?;
                let candidates = top_candidates_by_prior(&prior, self.algo.dbcq_candidates);
                let values = self.q.values(state, None)?;
                Ok(best_among(&values, candidates.into_iter()))
            }
            (Variant::Dbcq, ActMode::Sample) => {
                let prior = self.prior.evaluate(state)?;
                let chosen: BTreeSet<usize> = (0..self.algo.dbcq_candidates)
                    .map(|_| prior.sample(rng))
                    .collect();
                let values = if self.q.dropout_rate() > 0.0 {
                    self.q.mc_lower_bound(state, self.algo.mc_passes, rng)?
                } else {
                    self.q.values(state, None)?
                };
                Ok(best_among(&values, chosen.into_iter()))
            }
            (_, ActMode::Greedy) => Ok(argmax_lowest(&self.q.values(state, None)?)),
            (_, ActMode::Sample) => Ok(self.policy(state)?.sample(rng)),
        }
    }

    /// The action-selection distribution at every state of a tabular
    /// problem, in the exact form the dynamic-programming evaluators accept.
    /// Greedy mode yields point masses; sample mode yields the softmax
    /// policy (for the candidate variant, the exact law of "best value among
    /// `n` prior draws").
    pub fn tabular_policy(
        &self,
        state_count: usize,
        mode: ActMode,
    ) -> Result<Vec<ActionDistribution>> {
        let a = self.q.action_count();
        tabular_state_refs(&self.q, state_count)?
            .into_iter()
            .map(|state| {
                let values = self.q.values(&state, None)?;
                match (self.algo.variant, mode) {
                    (Variant::Dbcq, ActMode::Greedy) => {
                        let prior = self.prior.evaluate(&state)?;
                        let candidates =
                            top_candidates_by_prior(&prior, self.algo.dbcq_candidates);
                        point_mass(a, best_among(&values, candidates.into_iter()))
                    }
                    (Variant::Dbcq, ActMode::Sample) => {
                        let prior = self.prior.evaluate(&state)?;
                        ActionDistribution::new(dbcq_selection_law(
                            &values,
                            &prior,
                            self.algo.dbcq_candidates,
                        ))
                    }
                    (_, ActMode::Greedy) => point_mass(a, argmax_lowest(&values)),
                    (_, ActMode::Sample) => softmax(&values),
                }
            })
            .collect()
    }

    /// Builds this variant's regression target for one transition. Returns
    /// `None` when the transition must be skipped because the prior puts
    /// zero mass on the taken action (KL variants only — the shaped reward
    /// would be −∞).
    fn target_for(
        &mut self,
        reward: f64,
        terminal: bool,
        state: &StateRef,
        action: usize,
        next_state: &StateRef,
    ) -> Result<Option<f64>> {
        let gamma = self.algo.gamma;
        let passes = self.algo.mc_passes;
        let scale = self.algo.reward_scale;
        let baseline_reward = if self.algo.scale_baseline_rewards {
            reward / scale
        } else {
            reward
        };
        let target = match self.algo.variant {
            Variant::BatchQ => target_batch_q(
                self.target.q(),
                baseline_reward,
                terminal,
                next_state,
                gamma,
            )?,
            Variant::BatchQMc => target_batch_q_mc(
                self.target.q(),
                baseline_reward,
                terminal,
                next_state,
                gamma,
                passes,
                &mut self.rng,
            )?,
            Variant::Dbcq => target_dbcq(
                self.target.q(),
                &self.prior,
                baseline_reward,
                terminal,
                next_state,
                gamma,
                passes,
                self.algo.dbcq_candidates,
                &mut self.rng,
            )?,
            Variant::KlQ => {
                let prior = self.prior.evaluate(state)?;
                if prior.prob(action) == 0.0 {
                    log::warn!(
                        "skipping transition: prior puts zero mass on action {action} at state {}",
                        state.id
                    );
                    return Ok(None);
                }
                let policy_log_prob = self.policy(state)?.log_prob(action);
                target_kl_q(
                    self.target.q(),
                    reward,
                    terminal,
                    next_state,
                    gamma,
                    passes,
                    scale,
                    prior.log_prob(action),
                    policy_log_prob,
                    &mut self.rng,
                )?
            }
            Variant::KlPsi => {
                let prior = self.prior.evaluate(state)?;
                if prior.prob(action) == 0.0 {
                    log::warn!(
                        "skipping transition: prior puts zero mass on action {action} at state {}",
                        state.id
                    );
                    return Ok(None);
                }
                target_kl_psi(
                    self.target.q(),
                    reward,
                    terminal,
                    next_state,
                    gamma,
                    passes,
                    scale,
                    prior.log_prob(action),
                    &mut self.rng,
                )?
            }
        };
        Ok(Some(target))
    }

    /// One optimizer step on a minibatch drawn from `batch`. Targets are
    /// computed first and held constant; the online approximator is then
    /// regressed toward them under the smooth-L1 loss. A non-finite loss or
    /// gradient aborts the parameter update (the step is still recorded).
    pub fn step_on_batch(&mut self, batch: &Batch) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(BrlError::usage("cannot train on an empty batch"));
        }
        if batch.action_count() != self.q.action_count() {
            return Err(BrlError::usage(format!(
                "batch has {} actions but the approximator has {}",
                batch.action_count(),
                self.q.action_count()
            )));
        }
        let size = self.optim.minibatch_size.min(batch.len());
        let indices: Vec<usize> = match self.optim.minibatch_mode {
            MinibatchMode::Random => (0..size)
                .map(|_| self.rng.random_range(0..batch.len()))
                .collect(),
            MinibatchMode::Sweep => {
                let start = (self.step_count * size) % batch.len();
                (0..size).map(|k| (start + k) % batch.len()).collect()
            }
        };

        let mut grad = Gradient::zeros_like(&self.q);
        let mut loss_sum = 0.0;
        let mut target_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut contributing = 0usize;
        for &i in &indices {
            let t = &batch.transitions()[i];
            let reward = t.scalar_reward(&self.reward_weights)?;
            let Some(target) =
                self.target_for(reward, t.terminal, &t.state, t.action, &t.next_state)?
            else {
                continue;
            };
            let mask = self.q.fresh_mask(&mut self.rng);
            let prediction = self.q.values(&t.state, mask.as_ref())?[t.action];
            let (loss, dloss) = huber(prediction, target, self.optim.huber_delta);
            grad.add_assign(&self.q.backward(&t.state, t.action, dloss, mask.as_ref())?)?;
            loss_sum += loss;
            target_sum += target;
            kl_sum += kl_divergence(&self.policy(&t.state)?, &self.prior.evaluate(&t.state)?)?;
            contributing += 1;
        }

        let step = self.step_count;
        self.step_count += 1;
        let metrics = if contributing == 0 {
            log::warn!("step {step}: every minibatch transition was skipped; parameters unchanged");
            StepMetrics {
                step,
                loss: f64::NAN,
                mean_kl: f64::NAN,
                mean_target: f64::NAN,
            }
        } else {
            let n = contributing as f64;
            let loss = loss_sum / n;
            if self.optim.grad_reduction == GradReduction::Mean {
                grad.scale(1.0 / n);
            }
            let metrics = StepMetrics {
                step,
                loss,
                mean_kl: kl_sum / n,
                mean_target: target_sum / n,
            };
            if !loss.is_finite() || !grad.is_finite() {
                log::warn!("step {step}: non-finite loss {loss}; parameters kept");
            } else {
                self.q
                    .clip_and_step(&grad, self.optim.learning_rate, self.optim.clip_norm)?;
                self.target.polyak_update(&self.q)?;
            }
            metrics
        };
        self.metrics.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs `steps` optimizer steps.
    pub fn train(&mut self, batch: &Batch, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step_on_batch(batch)?;
        }
        Ok(())
    }

    /// Number of steps in one full pass over `batch` under the sweep mode.
    pub fn steps_per_sweep(&self, batch: &Batch) -> usize {
        let size = self.optim.minibatch_size.min(batch.len().max(1));
        batch.len().div_ceil(size)
    }

    /// Builds the regression target for a dialog utterance boundary by
    /// replaying the utterance through the environment: the scripted user's
    /// reply is appended to the conversation, the seven reward channels are
    /// computed on the completed exchange, and the variant's bootstrap runs
    /// on the resulting next state. `user_response` is what the caller
    /// believes the user said; a mismatch with the scripted user is an
    /// environment contract violation.
    pub fn utterance_boundary_target(
        &mut self,
        env: &DialogEnv,
        state: &DialogState,
        agent_utterance: &[String],
        user_response: &[String],
    ) -> Result<f64> {
        if state.is_done() {
            return Err(BrlError::usage(
                "cannot build an utterance target: the conversation is over",
            ));
        }
        if !state.partial().is_empty() {
            return Err(BrlError::usage(
                "utterance targets start from a turn boundary, not mid-utterance",
            ));
        }
        if agent_utterance.len() > env.max_utterance_tokens() {
            return Err(BrlError::usage(format!(
                "agent utterance has {} tokens but the cap is {}",
                agent_utterance.len(),
                env.max_utterance_tokens()
            )));
        }

        let mut current = state.clone();
        let mut boundary: Option<(StateRef, usize, crate::envs::dialog::StepOutcome)> = None;
        for token in agent_utterance {
            let id = env.token_id(token)?;
            if id == env.eos_id() {
                return Err(BrlError::usage(
                    "agent utterance must contain content tokens only; the terminator is appended automatically",
                ));
            }
            let before = env.state_ref(&current);
            let outcome = env.step(&current, id)?;
            current = outcome.next.clone();
            if outcome.turn_done {
                boundary = Some((before, id, outcome));
            }
        }
        let (before, action, outcome) = match boundary {
            Some(b) => b,
            None => {
                let before = env.state_ref(&current);
                let eos = env.eos_id();
                let outcome = env.step(&current, eos)?;
                (before, eos, outcome)
            }
        };

        if outcome.context.user_response != user_response {
            return Err(BrlError::EnvContract(format!(
                "scripted user replied {:?} but the caller expected {:?}",
                outcome.context.user_response, user_response
            )));
        }

        let reward = crate::mdp::Transition {
            state: before.clone(),
            action,
            rewards: outcome.rewards.clone(),
            next_state: env.state_ref(&outcome.next),
            terminal: outcome.conversation_done,
            behavior_model: None,
            context: Some(outcome.context.clone()),
        }
        .scalar_reward(&self.reward_weights)?;

        let next_ref = env.state_ref(&outcome.next);
        match self.target_for(reward, outcome.conversation_done, &before, action, &next_ref)? {
            Some(t) => Ok(t),
            None => Err(BrlError::Training(format!(
                "prior puts zero mass on token {action} at the utterance boundary"
            ))),
        }
    }
}

/// Deterministic candidate set: the `n` highest-prior actions (prior
/// probability descending, index ascending on ties), restricted to the
/// prior's support.
fn top_candidates_by_prior(prior: &ActionDistribution, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = prior
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, _)| i)
        .collect();
    order.sort_by(|&a, &b| {
        prior.prob(b)
            .partial_cmp(&prior.prob(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

fn best_among(values: &[f64], candidates: impl Iterator<Item = usize>) -> usize {
    let mut best: Option<usize> = None;
    for c in candidates {
        best = match best {
            None => Some(c),
            Some(b) if values[c] > values[b] => Some(c),
            Some(b) => Some(b),
        };
    }
    // NOTE: a distribution always has support, so `candidates` is never
    // empty in practice; index 0 is a harmless fallback for the impossible
    // case.
    best.unwrap_or(0)
}

fn point_mass(action_count: usize, action: usize) -> Result<ActionDistribution> {
    let mut probs = vec![0.0; action_count];
    probs[action] = 1.0;
    ActionDistribution::new(probs)
}

/// Exact law of "argmax of values over `n` prior draws (with replacement,
/// lowest index on value ties)": the chosen action is `a` iff `a` is drawn
/// and nothing strictly better is, so
/// `P(a) = S(not-better-than-a)^n − S(strictly-without-a)^n` where `S` sums
/// prior mass.
fn dbcq_selection_law(values: &[f64], prior: &ActionDistribution, n: usize) -> Vec<f64> {
    let beats = |b: usize, a: usize| values[b] > values[a] || (values[b] == values[a] && b < a);
    (0..values.len())
        .map(|a| {
            if prior.prob(a) == 0.0 {
                return 0.0;
            }
            let allowed: f64 = (0..values.len())
                .filter(|&b| !beats(b, a))
                .map(|b| prior.prob(b))
                .sum();
            let without_a = allowed - prior.prob(a);
            allowed.powi(n as i32) - without_a.powi(n as i32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::TabularQ;
    use crate::envs::generate::{generate_tabular_batch, BehaviorPolicy, ENV_CHANNEL};
    use crate::envs::tabular::{soft_value_iteration, value_iteration, TabularMDP};
    use crate::mdp::{Trajectory, TrajectoryStep, Transition};
    use crate::prior::PriorModel;
    use std::collections::BTreeMap;

    fn table(rows: Vec<Vec<f64>>) -> QFunction {
        let actions = rows[0].len();
        let mut t = TabularQ::zeros(rows.len(), actions);
        for (s, row) in rows.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                t.set(s, a, *v);
            }
        }
        QFunction::Tabular(t)
    }

    fn env_weights() -> BTreeMap<String, f64> {
        BTreeMap::from([(ENV_CHANNEL.to_string(), 1.0)])
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn env_transition(
        state: u64,
        action: usize,
        reward: f64,
        next: u64,
        terminal: bool,
    ) -> Transition {
        Transition {
            state: StateRef::tabular(state),
            action,
            rewards: BTreeMap::from([(ENV_CHANNEL.to_string(), reward)]),
            next_state: StateRef::tabular(next),
            terminal,
            behavior_model: None,
            context: None,
        }
    }

    #[test]
    fn terminal_target_is_the_reward() {
        let q = table(vec![vec![5.0, 7.0]]);
        let t = target_batch_q(&q, 2.0, true, &StateRef::tabular(0), 0.5).unwrap();
        assert_eq!(t, 2.0);
    }

    #[test]
    fn bootstrap_uses_the_target_max() {
        let q = table(vec![vec![1.0, 3.0]]);
        let t = target_batch_q(&q, 0.0, false, &StateRef::tabular(0), 0.5).unwrap();
        assert!((t - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mc_target_composes_per_action_minima() {
        // On the tabular path every pass returns the exact row, so the
        // pessimistic bound *is* the row; the arithmetic under test is
        // r + γ·max over the per-action minima.
        let q = table(vec![vec![0.8, 0.6]]);
        let t = target_batch_q_mc(
            &q,
            1.0,
            false,
            &StateRef::tabular(0),
            0.5,
            5,
            &mut rng(0),
        )
        .unwrap();
        assert!((t - 1.4).abs() < 1e-12);
    }

    #[test]
    fn mc_target_without_dropout_equals_the_plain_target() {
        let mut r = rng(3);
        let net = crate::approximator::FeedforwardQ::new(
            &[4, 8, 3],
            crate::approximator::Activation::Relu,
            0.0,
            &mut r,
        )
        .unwrap();
        let q = QFunction::Network(net);
        let state = StateRef::with_features(9, vec![0.3, -0.2, 0.8, 0.1]);
        let plain = target_batch_q(&q, 0.7, false, &state, 0.9).unwrap();
        let mc = target_batch_q_mc(&q, 0.7, false, &state, 0.9, 5, &mut rng(11)).unwrap();
        assert!((plain - mc).abs() < 1e-12);
    }

    #[test]
    fn mc_target_with_dropout_never_exceeds_the_plain_bootstrap_per_pass_max() {
        let mut r = rng(5);
        let net = crate::approximator::FeedforwardQ::new(
            &[4, 16, 3],
            crate::approximator::Activation::Relu,
            0.5,
            &mut r,
        )
        .unwrap();
        let q = QFunction::Network(net);
        let state = StateRef::with_features(9, vec![0.5, -0.1, 0.9, 0.2]);
        // The min over passes is ≤ every individual pass, so the bound over
        // many seeds can only shrink as passes are added.
        let mut one = rng(100);
        let mut many = rng(100);
        let few = q.mc_lower_bound(&state, 1, &mut one).unwrap();
        let more = q.mc_lower_bound(&state, 10, &mut many).unwrap();
        for (f, m) in few.iter().zip(&more) {
            assert!(m <= f);
        }
    }

    #[test]
    fn kl_q_terminal_cancels_prior_against_policy() {
        let q = table(vec![vec![0.0, 0.0]]);
        let t = target_kl_q(
            &q,
            2.0,
            true,
            &StateRef::tabular(0),
            0.5,
            5,
            2.0,
            -1.0,
            -1.0,
            &mut rng(0),
        )
        .unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_q_with_matching_prior_and_policy_reduces_to_scaled_bellman() {
        let q = table(vec![vec![0.4, 0.9]]);
        let next = StateRef::tabular(0);
        let log_u = (0.5f64).ln();
        let t = target_kl_q(&q, 1.0, false, &next, 0.5, 5, 2.0, log_u, log_u, &mut rng(0)).unwrap();
        let plain = 1.0 / 2.0 + 0.5 * 0.9;
        assert!((t - plain).abs() < 1e-12);
    }

    #[test]
    fn psi_terminal_target_is_the_shaped_reward() {
        let q = table(vec![vec![0.0, 0.0]]);
        let t = target_kl_psi(
            &q,
            2.0,
            true,
            &StateRef::tabular(0),
            0.5,
            5,
            2.0,
            -1.0,
            &mut rng(0),
        )
        .unwrap();
        assert!(t.abs() < 1e-12);
    }

    #[test]
    fn psi_bootstrap_is_a_soft_maximum() {
        let q = table(vec![vec![0.0, 0.0]]);
        let t = target_kl_psi(
            &q,
            0.0,
            false,
            &StateRef::tabular(0),
            1.0,
            5,
            2.0,
            0.0,
            &mut rng(0),
        )
        .unwrap();
        assert!((t - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dbcq_target_bootstraps_only_over_prior_candidates() {
        // Prior mass sits on actions 1 and 3; the unrestricted max (action
        // 2) must not leak into the bootstrap.
        let q = table(vec![vec![0.0, 0.2, 0.9, 0.7]]);
        let counts = vec![Trajectory::new(vec![
            TrajectoryStep {
                state: StateRef::tabular(0),
                action: 1,
                rewards: BTreeMap::new(),
            },
            TrajectoryStep {
                state: StateRef::tabular(0),
                action: 3,
                rewards: BTreeMap::new(),
            },
        ])];
        let prior = Prior::Single(
            PriorModel::fit_mle_tabular(&counts, 1, 4, 0.0, "behavior").unwrap(),
        );
        let t = target_dbcq(
            &q,
            &prior,
            0.0,
            false,
            &StateRef::tabular(0),
            1.0,
            5,
            64,
            &mut rng(0),
        )
        .unwrap();
        // With 64 draws over a two-action support, both candidates appear
        // with overwhelming probability, so the bootstrap is max(0.2, 0.7).
        assert!((t - 0.7).abs() < 1e-12);
    }

    fn uniform_prior(states: usize, actions: usize) -> Prior {
        Prior::Single(PriorModel::uniform(states, actions, "uniform"))
    }

    #[test]
    fn greedy_ties_break_to_the_lowest_index() {
        let ts = TrainState::with_q(
            AlgoConfig::new(Variant::BatchQ),
            OptimConfig::default(),
            uniform_prior(1, 3),
            table(vec![vec![1.0, 1.0, 0.5]]),
            env_weights(),
        )
        .unwrap();
        let a = ts
            .act_with(&StateRef::tabular(0), ActMode::Greedy, &mut rng(0))
            .unwrap();
        assert_eq!(a, 0);
    }

    #[test]
    fn greedy_choice_is_shift_invariant() {
        let mk = |shift: f64| {
            TrainState::with_q(
                AlgoConfig::new(Variant::BatchQ),
                OptimConfig::default(),
                uniform_prior(1, 3),
                table(vec![vec![0.2 + shift, 1.1 + shift, -0.4 + shift]]),
                env_weights(),
            )
            .unwrap()
        };
        let base = mk(0.0);
        let shifted = mk(100.0);
        let s = StateRef::tabular(0);
        assert_eq!(
            base.act_with(&s, ActMode::Greedy, &mut rng(0)).unwrap(),
            shifted.act_with(&s, ActMode::Greedy, &mut rng(0)).unwrap()
        );
        let p0 = base.policy(&s).unwrap();
        let p1 = shifted.policy(&s).unwrap();
        for (a, b) in p0.probs().iter().zip(p1.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_sampling_matches_the_softmax_of_psi() {
        let ts = TrainState::with_q(
            AlgoConfig::new(Variant::KlPsi),
            OptimConfig::default(),
            uniform_prior(1, 2),
            table(vec![vec![1.0, 0.0]]),
            env_weights(),
        )
        .unwrap();
        let pi = ts.policy(&StateRef::tabular(0)).unwrap();
        let e = std::f64::consts::E;
        assert!((pi.prob(0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((pi.prob(1) - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dbcq_greedy_restricts_to_the_top_prior_candidates() {
        // Prior: actions 1 and 3 carry all the mass; Q prefers action 2.
        let counts = vec![Trajectory::new(vec![
            TrajectoryStep {
                state: StateRef::tabular(0),
                action: 1,
                rewards: BTreeMap::new(),
            },
            TrajectoryStep {
                state: StateRef::tabular(0),
                action: 3,
                rewards: BTreeMap::new(),
            },
        ])];
        let prior =
            Prior::Single(PriorModel::fit_mle_tabular(&counts, 1, 4, 0.0, "behavior").unwrap());
        let mut algo = AlgoConfig::new(Variant::Dbcq);
        algo.dbcq_candidates = 2;
        let ts = TrainState::with_q(
            algo,
            OptimConfig::default(),
            prior,
            table(vec![vec![0.0, 0.2, 0.9, 0.7]]),
            env_weights(),
        )
        .unwrap();
        let s = StateRef::tabular(0);
        assert_eq!(ts.act_with(&s, ActMode::Greedy, &mut rng(0)).unwrap(), 3);
        // Sampling over the same support cannot escape it either.
        for seed in 0..20 {
            let a = ts.act_with(&s, ActMode::Sample, &mut rng(seed)).unwrap();
            assert!(a == 1 || a == 3);
        }
    }

    #[test]
    fn dbcq_point_mass_prior_ignores_better_q_values() {
        let counts = vec![Trajectory::new(vec![TrajectoryStep {
            state: StateRef::tabular(0),
            action: 0,
            rewards: BTreeMap::new(),
        }])];
        let prior =
            Prior::Single(PriorModel::fit_mle_tabular(&counts, 1, 3, 0.0, "behavior").unwrap());
        let ts = TrainState::with_q(
            AlgoConfig::new(Variant::Dbcq),
            OptimConfig::default(),
            prior,
            table(vec![vec![0.0, 5.0, 9.0]]),
            env_weights(),
        )
        .unwrap();
        let s = StateRef::tabular(0);
        for seed in 0..10 {
            assert_eq!(ts.act_with(&s, ActMode::Sample, &mut rng(seed)).unwrap(), 0);
            assert_eq!(ts.act_with(&s, ActMode::Greedy, &mut rng(seed)).unwrap(), 0);
        }
    }

    #[test]
    fn dbcq_selection_law_matches_exhaustive_enumeration() {
        let values = [0.3, 0.9, 0.9];
        let prior = ActionDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let n = 2;
        let law = dbcq_selection_law(&values, &prior, n);
        // Enumerate all n-draw outcomes exactly, deduplicating into sorted
        // order exactly as the selection path does.
        let mut expect = vec![0.0; 3];
        for d0 in 0..3 {
            for d1 in 0..3 {
                let p = prior.prob(d0) * prior.prob(d1);
                let chosen: BTreeSet<usize> = [d0, d1].into_iter().collect();
                let winner = best_among(&values, chosen.into_iter());
                expect[winner] += p;
            }
        }
        for (l, e) in law.iter().zip(&expect) {
            assert!((l - e).abs() < 1e-12, "law {law:?} expected {expect:?}");
        }
        assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_step_moves_the_target_copy_by_the_polyak_fraction() {
        let optim = OptimConfig {
            learning_rate: 0.5,
            clip_norm: None,
            polyak_rate: 0.25,
            huber_delta: f64::INFINITY,
            minibatch_size: 1,
            grad_reduction: GradReduction::Sum,
            minibatch_mode: MinibatchMode::Sweep,
        };
        optim.validate().unwrap();
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::BatchQ),
            optim,
            uniform_prior(2, 2),
            table(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            env_weights(),
        )
        .unwrap();
        let batch = Batch::new(
            vec![env_transition(0, 1, 2.0, 1, true)],
            2,
            BTreeMap::new(),
            vec![ENV_CHANNEL.to_string()],
        )
        .unwrap();
        let m = ts.step_on_batch(&batch).unwrap();
        // Quadratic loss, pred 0, target 2 → dloss −2, lr 0.5 → Q(0,1) = 1.
        assert!((ts.q().values(&StateRef::tabular(0), None).unwrap()[1] - 1.0).abs() < 1e-12);
        // Target copy interpolates a quarter of the way: 0.75·0 + 0.25·1.
        assert!(
            (ts.target().values(&StateRef::tabular(0), None).unwrap()[1] - 0.25).abs() < 1e-12
        );
        assert!((m.loss - 2.0).abs() < 1e-12); // ½·(0−2)²
        assert!((m.mean_target - 2.0).abs() < 1e-12);
        assert_eq!(m.step, 0);
        assert_eq!(ts.step_count(), 1);
    }

    #[test]
    fn non_finite_loss_keeps_parameters_untouched() {
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::BatchQ),
            OptimConfig {
                huber_delta: f64::INFINITY,
                minibatch_size: 1,
                minibatch_mode: MinibatchMode::Sweep,
                ..OptimConfig::default()
            },
            uniform_prior(2, 2),
            table(vec![vec![1e200, 0.0], vec![0.0, 0.0]]),
            env_weights(),
        )
        .unwrap();
        let batch = Batch::new(
            vec![env_transition(0, 0, 0.0, 1, true)],
            2,
            BTreeMap::new(),
            vec![ENV_CHANNEL.to_string()],
        )
        .unwrap();
        // pred 1e200, target 0 → quadratic loss overflows to +inf.
        let m = ts.step_on_batch(&batch).unwrap();
        assert!(m.loss.is_infinite());
        assert_eq!(
            ts.q().values(&StateRef::tabular(0), None).unwrap(),
            vec![1e200, 0.0],
        );
        assert_eq!(ts.step_count(), 1);
    }

    #[test]
    fn zero_prior_mass_skips_the_transition() {
        // Demonstrations cover action 0 at state 0 only; with no smoothing
        // the prior is a point mass, so a logged (s0, a1) transition cannot
        // be shaped and must not contribute.
        let demos = vec![Trajectory::new(vec![TrajectoryStep {
            state: StateRef::tabular(0),
            action: 0,
            rewards: BTreeMap::new(),
        }])];
        let prior =
            Prior::Single(PriorModel::fit_mle_tabular(&demos, 2, 2, 0.0, "behavior").unwrap());
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::KlPsi),
            OptimConfig {
                minibatch_size: 2,
                minibatch_mode: MinibatchMode::Sweep,
                huber_delta: f64::INFINITY,
                clip_norm: None,
                learning_rate: 1.0,
                polyak_rate: 1.0,
                grad_reduction: GradReduction::Sum,
            },
            prior,
            table(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            env_weights(),
        )
        .unwrap();
        let batch = Batch::new(
            vec![
                env_transition(0, 1, 5.0, 1, true), // skipped: zero prior mass
                env_transition(0, 0, 2.0, 1, true), // contributes: r/c + log 1 = 1
            ],
            2,
            BTreeMap::new(),
            vec![ENV_CHANNEL.to_string()],
        )
        .unwrap();
        let m = ts.step_on_batch(&batch).unwrap();
        assert!((m.mean_target - 1.0).abs() < 1e-12);
        // Only Q(0,0) was assigned; the skipped pair is untouched.
        let row = ts.q().values(&StateRef::tabular(0), None).unwrap();
        assert!((row[0] - 1.0).abs() < 1e-12);
        assert_eq!(row[1], 0.0);
    }

    #[test]
    fn same_seed_reproduces_the_training_trace() {
        let mdp = TabularMDP::gridworld_4x4();
        let behavior = BehaviorPolicy::new("uniform", uniform_prior(16, 4), 1.0, 1.0);
        let batch = generate_tabular_batch(&mdp, &[behavior], 40, 7).unwrap();
        let run = |seed: u64| {
            let mut algo = AlgoConfig::new(Variant::BatchQ);
            algo.seed = seed;
            let mut ts = TrainState::with_q(
                algo,
                OptimConfig {
                    learning_rate: 0.1,
                    ..OptimConfig::default()
                },
                uniform_prior(16, 4),
                QFunction::Tabular(TabularQ::zeros(16, 4)),
                env_weights(),
            )
            .unwrap();
            ts.train(&batch, 25).unwrap();
            ts.metrics().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn assignment_sweeps_recover_the_oracle_fixed_point_on_the_chain() {
        let mdp = TabularMDP::chain();
        let behavior = BehaviorPolicy::new("uniform", uniform_prior(2, 2), 1.0, 1.0);
        let batch = generate_tabular_batch(&mdp, &[behavior], 60, 11).unwrap();
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::BatchQ),
            OptimConfig::assignment_sweep(),
            uniform_prior(2, 2),
            QFunction::Tabular(TabularQ::zeros(2, 2)),
            env_weights(),
        )
        .unwrap();
        let q_star = value_iteration(&mdp, 1e-12).unwrap();
        let per_sweep = ts.steps_per_sweep(&batch);
        let mut converged_at = None;
        for sweep in 0..200 {
            ts.train(&batch, per_sweep).unwrap();
            let mut worst = 0.0f64;
            for s in 0..2 {
                if mdp.is_terminal(s) {
                    continue;
                }
                let row = ts.q().values(&StateRef::tabular(s as u64), None).unwrap();
                for a in 0..2 {
                    worst = worst.max((row[a] - q_star[s][a]).abs());
                }
            }
            if worst <= 1e-3 {
                converged_at = Some(sweep);
                break;
            }
        }
        assert!(
            converged_at.is_some(),
            "no convergence to the oracle within 200 sweeps"
        );
    }

    #[test]
    fn psi_assignment_sweeps_recover_the_soft_fixed_point() {
        let mdp = TabularMDP::chain();
        let oracle = soft_value_iteration(&mdp, &uniform_prior(2, 2), 2.0, 1e-12).unwrap();
        let behavior = BehaviorPolicy::new("uniform", uniform_prior(2, 2), 1.0, 1.0);
        let batch = generate_tabular_batch(&mdp, &[behavior], 60, 13).unwrap();
        let mut algo = AlgoConfig::new(Variant::KlPsi);
        algo.reward_scale = 2.0;
        let mut ts = TrainState::with_q(
            algo,
            OptimConfig::assignment_sweep(),
            uniform_prior(2, 2),
            QFunction::Tabular(TabularQ::zeros(2, 2)),
            env_weights(),
        )
        .unwrap();
        let per_sweep = ts.steps_per_sweep(&batch);
        for _ in 0..200 {
            ts.train(&batch, per_sweep).unwrap();
        }
        let row = ts.q().values(&StateRef::tabular(0), None).unwrap();
        for a in 0..2 {
            assert!(
                (row[a] - oracle[0][a]).abs() <= 1e-3,
                "psi({a}) = {} vs oracle {}",
                row[a],
                oracle[0][a]
            );
        }
    }

    #[test]
    fn psi_with_uniform_prior_and_no_reward_learns_the_uniform_policy() {
        // γ = 0 isolates the shaping: Ψ*(s, a) = log p(a|s) = log(1/3), so
        // the softmax policy is exactly uniform — the prior term alone must
        // not bias action choice.
        let transitions = (0..3)
            .map(|a| env_transition(0, a, 0.0, 1, true))
            .collect();
        let batch = Batch::new(
            transitions,
            3,
            BTreeMap::new(),
            vec![ENV_CHANNEL.to_string()],
        )
        .unwrap();
        let mut algo = AlgoConfig::new(Variant::KlPsi);
        algo.gamma = 0.0;
        let mut ts = TrainState::with_q(
            algo,
            OptimConfig::assignment_sweep(),
            uniform_prior(2, 3),
            QFunction::Tabular(TabularQ::zeros(2, 3)),
            env_weights(),
        )
        .unwrap();
        ts.train(&batch, 3).unwrap();
        let row = ts.q().values(&StateRef::tabular(0), None).unwrap();
        for a in 0..3 {
            assert!((row[a] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
        let pi = ts.policy(&StateRef::tabular(0)).unwrap();
        for a in 0..3 {
            assert!((pi.prob(a) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_q_assignment_reaches_a_self_consistent_fixed_point() {
        // The augmented reward depends on the current policy, so this is a
        // fixed-point iteration rather than a contraction with a closed-form
        // oracle; at convergence the target equation must hold exactly.
        let mdp = TabularMDP::chain();
        let behavior = BehaviorPolicy::new("uniform", uniform_prior(2, 2), 1.0, 1.0);
        let batch = generate_tabular_batch(&mdp, &[behavior], 60, 17).unwrap();
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::KlQ),
            OptimConfig::assignment_sweep(),
            uniform_prior(2, 2),
            QFunction::Tabular(TabularQ::zeros(2, 2)),
            env_weights(),
        )
        .unwrap();
        let per_sweep = ts.steps_per_sweep(&batch);
        for _ in 0..400 {
            ts.train(&batch, per_sweep).unwrap();
        }
        let q0 = ts.q().values(&StateRef::tabular(0), None).unwrap();
        let pi = ts.policy(&StateRef::tabular(0)).unwrap();
        let log_u = (0.5f64).ln();
        // a0: r 0, stays at s0 → ρ + γ·max Q(s0); a1: r 1, terminal next.
        let t0 = 0.0 / 2.0 + log_u - pi.log_prob(0) + 0.5 * q0.iter().cloned().fold(f64::MIN, f64::max);
        let t1 = 1.0 / 2.0 + log_u - pi.log_prob(1);
        assert!((q0[0] - t0).abs() < 1e-6, "q {} target {}", q0[0], t0);
        assert!((q0[1] - t1).abs() < 1e-6, "q {} target {}", q0[1], t1);
    }

    #[test]
    fn utterance_boundary_target_matches_direct_computation() {
        let env = DialogEnv::standard();
        let state = env.reset_with_opener(1).unwrap(); // "hello there"
        let utterance: Vec<String> = ["what", "do", "you", "think", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        // A question draws the scripted user's deflecting reply.
        let expected_reply: Vec<String> = [
            "i", "want", "to", "talk", "about", "music", "and", "movies", "today",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();

        let mut r = rng(21);
        let net = crate::approximator::FeedforwardQ::new(
            &[env.feature_dim(), 8, env.action_count()],
            crate::approximator::Activation::Relu,
            0.0,
            &mut r,
        )
        .unwrap();
        let q = QFunction::Network(net);
        let prior = crate::envs::generate::fitted_dialog_prior(&env);
        let mut algo = AlgoConfig::new(Variant::BatchQ);
        algo.gamma = 0.5;
        let mut ts = TrainState::with_q(
            algo,
            OptimConfig::default(),
            prior,
            q,
            env.reward_spec().weights.clone(),
        )
        .unwrap();

        let got = ts
            .utterance_boundary_target(&env, &state, &utterance, &expected_reply)
            .unwrap();

        // Independently: replay the utterance, read the boundary reward and
        // next state, and apply the plain Bellman arithmetic by hand.
        let mut current = state.clone();
        for tok in &utterance {
            let out = env.step(&current, env.token_id(tok).unwrap()).unwrap();
            current = out.next;
        }
        let boundary = env.step(&current, env.eos_id()).unwrap();
        let reward: f64 = env
            .reward_spec()
            .weights
            .iter()
            .map(|(ch, w)| w * boundary.rewards[ch])
            .sum();
        let next_vals = ts
            .q()
            .values(&env.state_ref(&boundary.next), None)
            .unwrap();
        let expect = reward + 0.5 * next_vals.iter().cloned().fold(f64::MIN, f64::max);
        assert!((got - expect).abs() < 1e-9, "got {got} expected {expect}");
    }

    #[test]
    fn utterance_boundary_rejects_a_wrong_user_reply() {
        let env = DialogEnv::standard();
        let state = env.reset_with_opener(1).unwrap();
        let utterance: Vec<String> = ["what", "do", "you", "think", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let wrong: Vec<String> = ["okay", "."].iter().map(|s| s.to_string()).collect();
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::BatchQ),
            OptimConfig::default(),
            crate::envs::generate::fitted_dialog_prior(&env),
            {
                let mut r = rng(2);
                QFunction::Network(
                    crate::approximator::FeedforwardQ::new(
                        &[env.feature_dim(), 8, env.action_count()],
                        crate::approximator::Activation::Relu,
                        0.0,
                        &mut r,
                    )
                    .unwrap(),
                )
            },
            env.reward_spec().weights.clone(),
        )
        .unwrap();
        let err = ts
            .utterance_boundary_target(&env, &state, &utterance, &wrong)
            .unwrap_err();
        assert!(matches!(err, BrlError::EnvContract(_)), "got {err:?}");
    }

    #[test]
    fn utterance_boundary_on_the_last_turn_is_reward_only() {
        let env = DialogEnv::standard();
        let mut state = env.reset_with_opener(0).unwrap();
        // Play two quick turns to land on the final one.
        for _ in 0..2 {
            let out = env.step(&state, env.token_id("okay").unwrap()).unwrap();
            let out = env.step(&out.next, env.eos_id()).unwrap();
            state = out.next;
        }
        assert_eq!(state.turn(), env.max_turns());
        let utterance: Vec<String> = ["have", "a", "great", "day"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let reply: Vec<String> = ["haha", "that", "is", "great", "!"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::BatchQ),
            OptimConfig::default(),
            crate::envs::generate::fitted_dialog_prior(&env),
            {
                let mut r = rng(2);
                QFunction::Network(
                    crate::approximator::FeedforwardQ::new(
                        &[env.feature_dim(), 8, env.action_count()],
                        crate::approximator::Activation::Relu,
                        0.0,
                        &mut r,
                    )
                    .unwrap(),
                )
            },
            env.reward_spec().weights.clone(),
        )
        .unwrap();
        let got = ts
            .utterance_boundary_target(&env, &state, &utterance, &reply)
            .unwrap();
        // Terminal boundary: the target is the mixed reward alone.
        let mut current = state.clone();
        for tok in &utterance {
            current = env.step(&current, env.token_id(tok).unwrap()).unwrap().next;
        }
        let boundary = env.step(&current, env.eos_id()).unwrap();
        assert!(boundary.conversation_done);
        let reward: f64 = env
            .reward_spec()
            .weights
            .iter()
            .map(|(ch, w)| w * boundary.rewards[ch])
            .sum();
        assert!((got - reward).abs() < 1e-9);
    }

    #[test]
    fn utterance_boundary_rejects_mid_utterance_starts_and_over_cap() {
        let env = DialogEnv::standard();
        let state = env.reset_with_opener(0).unwrap();
        let mut ts = TrainState::with_q(
            AlgoConfig::new(Variant::BatchQ),
            OptimConfig::default(),
            crate::envs::generate::fitted_dialog_prior(&env),
            {
                let mut r = rng(2);
                QFunction::Network(
                    crate::approximator::FeedforwardQ::new(
                        &[env.feature_dim(), 8, env.action_count()],
                        crate::approximator::Activation::Relu,
                        0.0,
                        &mut r,
                    )
                    .unwrap(),
                )
            },
            env.reward_spec().weights.clone(),
        )
        .unwrap();
        let too_long: Vec<String> = std::iter::repeat("okay".to_string())
            .take(env.max_utterance_tokens() + 1)
            .collect();
        assert!(matches!(
            ts.utterance_boundary_target(&env, &state, &too_long, &[]),
            Err(BrlError::Usage(_))
        ));
        let mid = env.step(&state, env.token_id("okay").unwrap()).unwrap().next;
        let one = vec!["okay".to_string()];
        assert!(matches!(
            ts.utterance_boundary_target(&env, &mid, &one, &[]),
            Err(BrlError::Usage(_))
        ));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("q_lambda").is_err());
    }

    #[test]
    fn configs_reject_out_of_range_values() {
        let mut algo = AlgoConfig::default();
        algo.gamma = 1.5;
        assert!(algo.validate().is_err());
        algo.gamma = 0.5;
        algo.reward_scale = 0.0;
        assert!(algo.validate().is_err());
        algo.reward_scale = 2.0;
        algo.mc_passes = 0;
        assert!(algo.validate().is_err());

        let mut optim = OptimConfig::default();
        optim.polyak_rate = 0.0;
        assert!(optim.validate().is_err());
        optim.polyak_rate = 0.005;
        optim.minibatch_size = 0;
        assert!(optim.validate().is_err());
        optim.minibatch_size = 32;
        optim.huber_delta = -1.0;
        assert!(optim.validate().is_err());
    }

    #[test]
    fn mismatched_action_counts_are_rejected() {
        let err = TrainState::with_q(
            AlgoConfig::default(),
            OptimConfig::default(),
            uniform_prior(2, 3),
            table(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            env_weights(),
        )
        .unwrap_err();
        assert!(matches!(err, BrlError::Usage(_)));
    }
}
