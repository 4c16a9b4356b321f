//! Behavior priors p(a|s): maximum-likelihood models of whoever generated
//! the data, plus model averaging and Q-initialization from a prior.
//!
//! Two kinds exist. Tabular-counts priors hold λ-smoothed empirical action
//! frequencies per state and need dense state ids (`0..state_count`).
//! Feedforward priors hold a logits network evaluated through a softmax and
//! work on any state with features — the dialog path. Both are immutable
//! once fitted.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::approximator::{FeedforwardQ, QFunction, TabularQ, TargetCopy};
use crate::dist::{log_sum_exp, softmax, ActionDistribution};
use crate::error::{BrlError, Result};
use crate::mdp::{StateRef, Trajectory};

const PRIOR_CHECKPOINT_VERSION: u32 = 1;

/// Default Laplace smoothing for tabular priors: keeps every action's prior
/// probability strictly positive, so KL penalties stay finite (a neural
/// prior never emits exact zeros; the tabular stand-in shouldn't either).
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// λ-smoothed action counts per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularCounts {
    pub state_count: usize,
    pub action_count: usize,
    /// Row-major `[state][action]` observation counts.
    pub counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PriorParams {
    TabularCounts(TabularCounts),
    Feedforward(FeedforwardQ),
}

/// A fitted model of the behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    model_id: String,
    /// Laplace smoothing λ (tabular kind only; 0 disables smoothing).
    smoothing: f64,
    params: PriorParams,
}

/// Convergence knobs for fitting a feedforward prior by cross-entropy.
#[derive(Debug, Clone)]
pub struct NetworkFitConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Stop early once an epoch improves mean loss by less than this.
    pub plateau_tol: f64,
    pub clip_norm: Option<f64>,
}

impl Default for NetworkFitConfig {
    fn default() -> Self {
        NetworkFitConfig {
            max_epochs: 400,
            learning_rate: 0.05,
            plateau_tol: 1e-7,
            clip_norm: None,
        }
    }
}

impl PriorModel {
    /// A uniform tabular prior (zero counts, smoothing 1): every action gets
    /// probability 1/A at every state. Handy as a maximally exploratory
    /// behavior policy.
    pub fn uniform(state_count: usize, action_count: usize, model_id: impl Into<String>) -> Self {
        PriorModel {
            model_id: model_id.into(),
            smoothing: 1.0,
            params: PriorParams::TabularCounts(TabularCounts {
                state_count,
                action_count,
                counts: vec![0.0; state_count * action_count],
            }),
        }
    }

    /// Fits a tabular-counts prior: `p(a|s) = (count(s,a) + λ) / (count(s) +
    /// λ·A)`. Demonstration states must have ids below `state_count`.
    pub fn fit_mle_tabular(
        demonstrations: &[Trajectory],
        state_count: usize,
        action_count: usize,
        smoothing: f64,
        model_id: impl Into<String>,
    ) -> Result<PriorModel> {
        if demonstrations.is_empty() {
            return Err(BrlError::usage("fit_mle needs at least one demonstration"));
        }
        if smoothing < 0.0 {
            return Err(BrlError::usage("smoothing must be >= 0"));
        }
        let mut counts = vec![0.0; state_count * action_count];
        for (ti, traj) in demonstrations.iter().enumerate() {
            for step in traj.steps() {
                let s = step.state.id as usize;
                if s >= state_count {
                    return Err(BrlError::usage(format!(
                        "demonstration {ti} visits state {s}, outside the {state_count}-state table"
                    )));
                }
                if step.action >= action_count {
                    return Err(BrlError::usage(format!(
                        "demonstration {ti} takes action {}, but action_count is {action_count}",
                        step.action
                    )));
                }
                counts[s * action_count + step.action] += 1.0;
            }
        }
        Ok(PriorModel {
            model_id: model_id.into(),
            smoothing,
            params: PriorParams::TabularCounts(TabularCounts {
                state_count,
                action_count,
                counts,
            }),
        })
    }

    /// Fits a feedforward prior by full-batch cross-entropy descent on the
    /// demonstration (state, action) pairs, starting from `net`'s current
    /// parameters. Stops at `max_epochs` or when the loss plateaus.
    ///
    /// The pass is deterministic (no dropout during fitting), so the fit is
    /// a pure function of (`net` init, demonstrations, config).
    pub fn fit_mle_network(
        demonstrations: &[Trajectory],
        net: FeedforwardQ,
        fit: &NetworkFitConfig,
        model_id: impl Into<String>,
    ) -> Result<PriorModel> {
        if demonstrations.is_empty() {
            return Err(BrlError::usage("fit_mle needs at least one demonstration"));
        }
        let mut q = QFunction::Network(net);
        let pairs: Vec<(&StateRef, usize)> = demonstrations
            .iter()
            .flat_map(|t| t.steps().iter().map(|s| (&s.state, s.action)))
            .collect();
        if pairs.is_empty() {
            return Err(BrlError::usage("demonstrations contain no steps"));
        }
        let n = pairs.len() as f64;
        let mut prev_loss = f64::INFINITY;
        for _epoch in 0..fit.max_epochs {
            let mut grad = crate::approximator::Gradient::zeros_like(&q);
            let mut loss = 0.0;
            for (state, action) in &pairs {
                let logits = q.values(state, None)?;
                let p = softmax(&logits)?;
                loss += -p.log_prob(*action);
                // ∂CE/∂logits = softmax(logits) − onehot(action)
                let mut dlogits: Vec<f64> = p.probs().to_vec();
                dlogits[*action] -= 1.0;
                grad.add_assign(&q.backward_vec(state, &dlogits, None)?)?;
            }
            grad.scale(1.0 / n);
            loss /= n;
            q.clip_and_step(&grad, fit.learning_rate, fit.clip_norm)?;
            if prev_loss - loss < fit.plateau_tol {
                break;
            }
            prev_loss = loss;
        }
        // Cross-entropy pins only the softmax of the logits; their overall
        // level is left wherever initialization put it. Recenter the output
        // biases so the mean log-normalizer over the demonstration states is
        // zero: observationally identical (softmax is shift-invariant), but
        // the logits then read as log-probabilities, so anything warm-started
        // from this network begins on the prior's log-prob surface instead of
        // an arbitrary level it must grind away from.
        let mut normalizer = 0.0;
        for (state, _) in &pairs {
            normalizer += log_sum_exp(&q.values(state, None)?)?;
        }
        normalizer /= n;
        let mut net = match q {
            QFunction::Network(n) => n,
            QFunction::Tabular(_) => unreachable!(),
        };
        if let Some(output) = net.layers.last_mut() {
            for b in &mut output.bias {
                *b -= normalizer;
            }
        }
        Ok(PriorModel {
            model_id: model_id.into(),
            smoothing: 0.0,
            params: PriorParams::Feedforward(net),
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn action_count(&self) -> usize {
        match &self.params {
            PriorParams::TabularCounts(t) => t.action_count,
            PriorParams::Feedforward(n) => n.action_count,
        }
    }

    /// `p(·|s)` — always a valid distribution, strictly positive when the
    /// prior is smoothed or feedforward.
    pub fn evaluate(&self, state: &StateRef) -> Result<ActionDistribution> {
        Ok(self.evaluate_flagged(state)?.0)
    }

    /// Like [`Self::evaluate`], also reporting whether the distribution is a
    /// uniform fallback for a never-observed state under λ = 0 (the one case
    /// where the counts say nothing at all).
    pub fn evaluate_flagged(&self, state: &StateRef) -> Result<(ActionDistribution, bool)> {
        match &self.params {
            PriorParams::TabularCounts(t) => {
                let s = state.id as usize;
                if s >= t.state_count {
                    return Err(BrlError::usage(format!(
                        "state id {} outside the {}-state prior",
                        state.id, t.state_count
                    )));
                }
                let row = &t.counts[s * t.action_count..(s + 1) * t.action_count];
                let total: f64 = row.iter().sum();
                if total == 0.0 && self.smoothing == 0.0 {
                    return Ok((ActionDistribution::uniform(t.action_count)?, true));
                }
                let denom = total + self.smoothing * t.action_count as f64;
                let probs = row.iter().map(|c| (c + self.smoothing) / denom).collect();
                Ok((ActionDistribution::new(probs)?, false))
            }
            PriorParams::Feedforward(net) => {
                let features = state.features.as_ref().ok_or_else(|| {
                    BrlError::usage(format!("state {} has no feature vector", state.id))
                })?;
                Ok((softmax(&net.forward(features, None)?)?, false))
            }
        }
    }

    /// Writes the prior checkpoint (versioned JSON; bit-exact round trip).
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct File<'a> {
            version: u32,
            prior: &'a PriorModel,
        }
        std::fs::write(
            path,
            serde_json::to_string(&File {
                version: PRIOR_CHECKPOINT_VERSION,
                prior: self,
            })?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PriorModel> {
        #[derive(Deserialize)]
        struct File {
            version: u32,
            prior: PriorModel,
        }
        let file: File = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != PRIOR_CHECKPOINT_VERSION {
            return Err(BrlError::format(format!(
                "prior checkpoint version {} not supported",
                file.version
            )));
        }
        Ok(file.prior)
    }
}

/// Convex mixture of priors: `p_MA(a|s) = Σ_M S(M)·p(a|s; M)` with
/// normalized non-negative scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedPrior {
    members: Vec<(PriorModel, f64)>,
}

impl AveragedPrior {
    /// Builds the mixture. Scores are normalized internally; they usually
    /// come from batch proportions (each model's share of the data), but any
    /// non-negative quality measure works.
    pub fn average(members: Vec<PriorModel>, scores: &[f64]) -> Result<AveragedPrior> {
        if members.is_empty() {
            return Err(BrlError::usage("model average needs at least one member"));
        }
        if members.len() != scores.len() {
            return Err(BrlError::usage(format!(
                "{} members but {} scores",
                members.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(BrlError::usage("scores must be finite and >= 0"));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Err(BrlError::usage("scores must not all be zero"));
        }
        let a0 = members[0].action_count();
        if members.iter().any(|m| m.action_count() != a0) {
            return Err(BrlError::usage("member action counts disagree"));
        }
        Ok(AveragedPrior {
            members: members
                .into_iter()
                .zip(scores)
                .map(|(m, s)| (m, s / total))
                .collect(),
        })
    }

    pub fn members(&self) -> &[(PriorModel, f64)] {
        &self.members
    }

    pub fn action_count(&self) -> usize {
        self.members[0].0.action_count()
    }

    pub fn evaluate(&self, state: &StateRef) -> Result<ActionDistribution> {
        let mut probs = vec![0.0; self.action_count()];
        for (member, score) in &self.members {
            let p = member.evaluate(state)?;
            for (acc, pv) in probs.iter_mut().zip(p.probs()) {
                *acc += score * pv;
            }
        }
        ActionDistribution::new(probs)
    }
}

/// Either a single prior or a model-averaged mixture — what algorithms
/// actually take.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Single(PriorModel),
    Averaged(AveragedPrior),
}

impl Prior {
    pub fn evaluate(&self, state: &StateRef) -> Result<ActionDistribution> {
        match self {
            Prior::Single(m) => m.evaluate(state),
            Prior::Averaged(a) => a.evaluate(state),
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            Prior::Single(m) => m.action_count(),
            Prior::Averaged(a) => a.action_count(),
        }
    }

    /// Input width of the first network-backed member, if any. `None` means
    /// every member is a counts table and evaluation needs no features.
    pub fn network_input_dim(&self) -> Option<usize> {
        fn of(m: &PriorModel) -> Option<usize> {
            match &m.params {
                PriorParams::Feedforward(n) => Some(n.input_dim),
                PriorParams::TabularCounts(_) => None,
            }
        }
        match self {
            Prior::Single(m) => of(m),
            Prior::Averaged(a) => a.members().iter().find_map(|(m, _)| of(m)),
        }
    }

    /// Evaluates the prior at a tabular state id, synthesizing the one-hot
    /// feature encoding when the model is network-backed (convention:
    /// network input width equals the state count).
    pub fn evaluate_tabular(&self, state_id: u64, state_count: usize) -> Result<ActionDistribution> {
        match self.network_input_dim() {
            None => self.evaluate(&StateRef::tabular(state_id)),
            Some(dim) => {
                if dim != state_count {
                    return Err(BrlError::usage(format!(
                        "network prior expects {dim} features, but the MDP has \
                         {state_count} states (one-hot encoding mismatch)"
                    )));
                }
                let idx = state_id as usize;
                if idx >= state_count {
                    return Err(BrlError::usage(format!(
                        "state id {state_id} outside the {state_count}-state space"
                    )));
                }
                let mut features = vec![0.0; state_count];
                features[idx] = 1.0;
                self.evaluate(&StateRef::with_features(state_id, features))
            }
        }
    }
}

/// Initializes a learner and its target copy from a prior.
///
/// Feedforward priors: the Q-network starts as an exact parameter copy of
/// the prior network (so initial Q values are the prior's logits). Tabular
/// priors: `Q(s,a) = log p_λ(a|s)` row by row, mirroring the view that a
/// Ψ-table exponentiates to a policy. Model averages initialize from the
/// mixture on the tabular path and from the highest-scored member's
/// parameters on the network path (architectures cannot be averaged).
///
/// The target copy starts identical to the learner.
pub fn init_q_from_prior(prior: &Prior, polyak_rate: f64) -> Result<(QFunction, TargetCopy)> {
    let q = match prior {
        Prior::Single(m) => init_single(m)?,
        Prior::Averaged(avg) => {
            let all_tabular = avg
                .members()
                .iter()
                .all(|(m, _)| matches!(m.params, PriorParams::TabularCounts(_)));
            if all_tabular {
                let (state_count, action_count) = match &avg.members()[0].0.params {
                    PriorParams::TabularCounts(t) => (t.state_count, t.action_count),
                    PriorParams::Feedforward(_) => unreachable!(),
                };
                log_prob_table(state_count, action_count, |s| {
                    avg.evaluate(&StateRef::tabular(s as u64))
                })?
            } else {
                // Highest score wins; ties break toward the earliest member.
                let best = avg
                    .members()
                    .iter()
                    .enumerate()
                    .max_by(|(i, (_, sa)), (j, (_, sb))| {
                        sa.partial_cmp(sb)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(j.cmp(i))
                    })
                    .map(|(_, (m, _))| m)
                    .unwrap();
                init_single(best)?
            }
        }
    };
    let target = TargetCopy::new(&q, polyak_rate)?;
    Ok((q, target))
}

fn init_single(m: &PriorModel) -> Result<QFunction> {
    match &m.params {
        PriorParams::TabularCounts(t) => log_prob_table(t.state_count, t.action_count, |s| {
            m.evaluate(&StateRef::tabular(s as u64))
        }),
        PriorParams::Feedforward(net) => Ok(QFunction::Network(net.clone())),
    }
}

fn log_prob_table(
    state_count: usize,
    action_count: usize,
    eval: impl Fn(usize) -> Result<ActionDistribution>,
) -> Result<QFunction> {
    let mut table = TabularQ::zeros(state_count, action_count);
    for s in 0..state_count {
        let p = eval(s)?;
        for a in 0..action_count {
            let lp = p.log_prob(a);
            if !lp.is_finite() {
                return Err(BrlError::usage(format!(
                    "prior gives probability 0 to action {a} at state {s}; \
                     log-prob initialization needs smoothing > 0 (or use a zero init)"
                )));
            }
            table.set(s, a, lp);
        }
    }
    Ok(QFunction::Tabular(table))
}

/// All-zero tabular learner with matching shape — the plain alternative to
/// prior initialization (and the only option when the prior is unsmoothed).
pub fn init_q_zero_tabular(
    state_count: usize,
    action_count: usize,
    polyak_rate: f64,
) -> Result<(QFunction, TargetCopy)> {
    let q = QFunction::Tabular(TabularQ::zeros(state_count, action_count));
    let target = TargetCopy::new(&q, polyak_rate)?;
    Ok((q, target))
}
