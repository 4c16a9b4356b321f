//! Core domain types for discrete-state, discrete-action batch RL:
//! transitions, batches, trajectories, and their on-disk format.
//!
//! A stored batch is a JSON-lines file (one transition per line) plus a
//! `<file>.meta.json` sidecar holding batch-level fields (action count,
//! behavior-model proportions, declared reward channels). Floats survive the
//! round trip bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BrlError, Result};

/// Tolerance for "fractions sum to one" checks on batch metadata.
const META_SUM_TOL: f64 = 1e-9;

/// A state as algorithms see it: an opaque integer id (the tabular path
/// indexes tables by it) plus an optional feature vector (the network path
/// feeds it forward). Environments supply both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRef {
    pub id: u64,
    pub features: Option<Vec<f64>>,
}

impl StateRef {
    /// A purely tabular state with no feature vector.
    pub fn tabular(id: u64) -> Self {
        StateRef { id, features: None }
    }

    pub fn with_features(id: u64, features: Vec<f64>) -> Self {
        StateRef {
            id,
            features: Some(features),
        }
    }
}

/// Dialog-side context a transition carries so reward channels can be
/// recomputed after the fact (post-hoc relabeling). Tabular transitions
/// simply have none.
///
/// Utterance-level rewards land on the final token of each agent utterance,
/// so only transitions with `utterance_final == true` carry text; the rest
/// keep empty fields and score zero on every channel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DialogContext {
    /// 1-based index of the agent utterance this token belongs to.
    pub turn: usize,
    /// Total agent utterances in the finished conversation.
    pub total_turns: usize,
    /// True on the last token of an agent utterance; rewards are granted
    /// here and only here.
    pub utterance_final: bool,
    /// True on the conversation's very last transition (grants the
    /// conversation-level sentiment-transition channel).
    pub conversation_final: bool,
    /// The user utterance the agent was replying to (for coherence scoring).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_user: Vec<String>,
    /// The agent's complete utterance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agent: Vec<String>,
    /// The scripted user's response to that utterance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub user_response: Vec<String>,
    /// Every user response up to and including this turn, oldest first;
    /// populated only when `conversation_final` (the transition metric needs
    /// the whole conversation).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub user_responses: Vec<Vec<String>>,
}

/// One `<s, a, r, s'>` tuple sampled from the batch.
///
/// Rewards are a named multi-channel map rather than a scalar so one stored
/// batch supports relabeling with different reward mixtures later. The
/// scalar a learner trains on is a weighted sum over channels
/// ([`Transition::scalar_reward`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateRef,
    pub action: usize,
    pub rewards: BTreeMap<String, f64>,
    pub next_state: StateRef,
    /// Episode ended here; `next_state` is retained for bookkeeping but
    /// never bootstrapped from.
    pub terminal: bool,
    pub behavior_model: Option<String>,
    pub context: Option<DialogContext>,
}

/// The on-disk line format: one flat object per transition, states spread
/// into id/features field pairs. Field order here is the column order in
/// files, so it is load-bearing for byte-identical reruns.
#[derive(Serialize, Deserialize)]
struct LineRecord {
    state_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_features: Option<Vec<f64>>,
    action: usize,
    rewards: BTreeMap<String, f64>,
    next_state_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next_state_features: Option<Vec<f64>>,
    terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    behavior_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<DialogContext>,
}

impl From<&Transition> for LineRecord {
    fn from(t: &Transition) -> Self {
        LineRecord {
            state_id: t.state.id,
            state_features: t.state.features.clone(),
            action: t.action,
            rewards: t.rewards.clone(),
            next_state_id: t.next_state.id,
            next_state_features: t.next_state.features.clone(),
            terminal: t.terminal,
            behavior_model: t.behavior_model.clone(),
            context: t.context.clone(),
        }
    }
}

impl From<LineRecord> for Transition {
    fn from(r: LineRecord) -> Self {
        Transition {
            state: StateRef {
                id: r.state_id,
                features: r.state_features,
            },
            action: r.action,
            rewards: r.rewards,
            next_state: StateRef {
                id: r.next_state_id,
                features: r.next_state_features,
            },
            terminal: r.terminal,
            behavior_model: r.behavior_model,
            context: r.context,
        }
    }
}

impl Serialize for Transition {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        LineRecord::from(self).serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Transition {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        Ok(LineRecord::deserialize(de)?.into())
    }
}

impl Transition {
    /// Weighted sum of reward channels: `Σ_c w_c · r_c`.
    ///
    /// Every weighted channel must be present on the transition; a missing
    /// channel is a usage error rather than an implicit zero.
    pub fn scalar_reward(&self, weights: &BTreeMap<String, f64>) -> Result<f64> {
        let mut total = 0.0;
        for (channel, w) in weights {
            match self.rewards.get(channel) {
                Some(r) => total += w * r,
                None => {
                    return Err(BrlError::usage(format!(
                        "transition is missing reward channel '{channel}'"
                    )))
                }
            }
        }
        Ok(total)
    }
}

/// Sidecar fields stored next to the transition lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchMeta {
    action_count: usize,
    metadata: BTreeMap<String, f64>,
    channels: Vec<String>,
}

/// A fixed dataset of transitions — the only thing algorithms ever learn
/// from. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    transitions: Vec<Transition>,
    action_count: usize,
    /// Behavior-model id → fraction of the batch that model generated.
    /// Doubles as the model score vector for model-averaged priors.
    metadata: BTreeMap<String, f64>,
    /// Reward channels every transition is guaranteed to carry.
    channels: Vec<String>,
}

impl Batch {
    /// Validates and assembles a batch.
    ///
    /// Checks: non-empty, action indices within `action_count`, metadata
    /// fractions summing to 1 (when present), and every declared channel
    /// present on every transition. Transitions may carry extra channels
    /// (e.g. externally recorded votes); those are preserved untouched.
    pub fn new(
        transitions: Vec<Transition>,
        action_count: usize,
        metadata: BTreeMap<String, f64>,
        channels: Vec<String>,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(BrlError::usage("batch must contain at least one transition"));
        }
        if action_count == 0 {
            return Err(BrlError::usage("batch action_count must be >= 1"));
        }
        if !metadata.is_empty() {
            let sum: f64 = metadata.values().sum();
            if (sum - 1.0).abs() > META_SUM_TOL {
                return Err(BrlError::usage(format!(
                    "batch metadata fractions must sum to 1 (got {sum})"
                )));
            }
            if metadata.values().any(|f| *f < 0.0) {
                return Err(BrlError::usage("batch metadata fractions must be >= 0"));
            }
        }
        for (i, t) in transitions.iter().enumerate() {
            if t.action >= action_count {
                return Err(BrlError::usage(format!(
                    "transition {i}: action {} out of range (action_count {action_count})",
                    t.action
                )));
            }
            for channel in &channels {
                if !t.rewards.contains_key(channel) {
                    return Err(BrlError::usage(format!(
                        "transition {i}: declared reward channel '{channel}' missing"
                    )));
                }
            }
        }
        Ok(Batch {
            transitions,
            action_count,
            metadata,
            channels,
        })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn metadata(&self) -> &BTreeMap<String, f64> {
        &self.metadata
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    /// The set of (state id, action) pairs the batch has evidence for.
    pub fn seen_pairs(&self) -> BTreeSet<(u64, usize)> {
        self.transitions.iter().map(|t| (t.state.id, t.action)).collect()
    }

    /// Writes the batch: one JSON line per transition at `path`, batch-level
    /// fields in a `<path>.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let meta = BatchMeta {
            action_count: self.action_count,
            metadata: self.metadata.clone(),
            channels: self.channels.clone(),
        };
        let meta_path = meta_path_for(path);
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a batch written by [`Batch::save`], re-running full validation.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut transitions = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line).map_err(|e| {
                BrlError::format(format!(
                    "{}:{}: bad transition record: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            transitions.push(t);
        }
        let meta_path = meta_path_for(path);
        let meta: BatchMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
            .map_err(|e| {
                BrlError::format(format!("{}: bad batch sidecar: {e}", meta_path.display()))
            })?;
        Batch::new(transitions, meta.action_count, meta.metadata, meta.channels)
    }

    /// Same transitions with a rewritten rewards map (used by relabeling).
    pub fn with_rewards(
        &self,
        rewards: Vec<BTreeMap<String, f64>>,
        channels: Vec<String>,
    ) -> Result<Self> {
        if rewards.len() != self.transitions.len() {
            return Err(BrlError::usage(format!(
                "rewards for {} transitions supplied, batch has {}",
                rewards.len(),
                self.transitions.len()
            )));
        }
        let transitions = self
            .transitions
            .iter()
            .zip(rewards)
            .map(|(t, r)| Transition {
                rewards: r,
                ..t.clone()
            })
            .collect();
        Batch::new(transitions, self.action_count, self.metadata.clone(), channels)
    }
}

/// Sidecar path: `batch.jsonl` → `batch.jsonl.meta.json`.
fn meta_path_for(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// One step of a demonstration episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: StateRef,
    pub action: usize,
    pub rewards: BTreeMap<String, f64>,
}

/// An ordered episode of (state, action, rewards) steps, with per-channel
/// undiscounted returns computed at construction so the two can never
/// disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<TrajectoryStep>,
    episode_return: BTreeMap<String, f64>,
}

impl Trajectory {
    pub fn new(steps: Vec<TrajectoryStep>) -> Self {
        let mut episode_return: BTreeMap<String, f64> = BTreeMap::new();
        for step in &steps {
            for (channel, r) in &step.rewards {
                *episode_return.entry(channel.clone()).or_insert(0.0) += r;
            }
        }
        Trajectory {
            steps,
            episode_return,
        }
    }

    pub fn steps(&self) -> &[TrajectoryStep] {
        &self.steps
    }

    /// Undiscounted per-channel sum over the episode.
    pub fn episode_return(&self) -> &BTreeMap<String, f64> {
        &self.episode_return
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reward(v: f64) -> BTreeMap<String, f64> {
        BTreeMap::from([("env".to_string(), v)])
    }

    fn transition(s: u64, a: usize, r: f64, s2: u64, terminal: bool) -> Transition {
        Transition {
            state: StateRef::tabular(s),
            action: a,
            rewards: reward(r),
            next_state: StateRef::tabular(s2),
            terminal,
            behavior_model: None,
            context: None,
        }
    }

    #[test]
    fn batch_rejects_out_of_range_actions() {
        let err = Batch::new(vec![transition(0, 3, 1.0, 1, false)], 2, BTreeMap::new(), vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn batch_rejects_bad_metadata_sum() {
        let meta = BTreeMap::from([("m1".to_string(), 0.5), ("m2".to_string(), 0.6)]);
        let err = Batch::new(vec![transition(0, 0, 1.0, 1, false)], 2, meta, vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn batch_rejects_missing_declared_channel() {
        let err = Batch::new(
            vec![transition(0, 0, 1.0, 1, false)],
            2,
            BTreeMap::new(),
            vec!["laughter".to_string()],
        );
        assert!(err.is_err());
    }

    #[test]
    fn scalar_reward_is_weighted_sum() {
        let mut t = transition(0, 0, 0.0, 1, false);
        t.rewards = BTreeMap::from([("a".to_string(), 2.0), ("b".to_string(), 3.0)]);
        let weights = BTreeMap::from([("a".to_string(), 0.5), ("b".to_string(), 1.0)]);
        assert_eq!(t.scalar_reward(&weights).unwrap(), 4.0);
        let missing = BTreeMap::from([("c".to_string(), 1.0)]);
        assert!(t.scalar_reward(&missing).is_err());
    }

    #[test]
    fn line_format_is_flat_and_stable() {
        let t = transition(7, 1, 0.25, 9, true);
        let line = serde_json::to_string(&t).unwrap();
        assert_eq!(
            line,
            r#"{"state_id":7,"action":1,"rewards":{"env":0.25},"next_state_id":9,"terminal":true}"#
        );
        let back: Transition = serde_json::from_str(&line).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn save_load_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.jsonl");
        let mut t = transition(0, 1, 1.0 / 3.0, 1, false);
        t.state.features = Some(vec![0.1, -2.5e-17, 3.0]);
        t.behavior_model = Some("m1".to_string());
        let meta = BTreeMap::from([("m1".to_string(), 1.0)]);
        let batch = Batch::new(vec![t], 2, meta, vec!["env".to_string()]).unwrap();
        batch.save(&path).unwrap();
        let loaded = Batch::load(&path).unwrap();
        assert_eq!(loaded, batch);
        // Writing the loaded batch again produces identical bytes.
        let path2 = dir.path().join("batch2.jsonl");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn trajectory_returns_sum_per_channel() {
        let steps = vec![
            TrajectoryStep {
                state: StateRef::tabular(0),
                action: 0,
                rewards: BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 0.5)]),
            },
            TrajectoryStep {
                state: StateRef::tabular(1),
                action: 1,
                rewards: BTreeMap::from([("a".to_string(), 2.0)]),
            },
        ];
        let traj = Trajectory::new(steps);
        assert_eq!(traj.episode_return()["a"], 3.0);
        assert_eq!(traj.episode_return()["b"], 0.5);
    }
}
