//! A token-level dialog environment with a rule-based user.
//!
//! The agent's action space is the vocabulary: it speaks one token per step,
//! closing an utterance with the end-of-utterance token (or by hitting the
//! per-utterance token cap). At each utterance boundary a scripted user
//! responds deterministically, the implicit reward channels are computed,
//! and the whole bundle lands on that final token's transition — so a
//! learner bootstraps from the state *after* the user reacted.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{BrlError, Result};
use crate::mdp::{DialogContext, StateRef, Trajectory, TrajectoryStep};
use crate::rewards::{contains_question_mark, contains_question_word, is_punctuation, RewardSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speaker {
    User,
    Agent,
}

/// One conversation in progress. Learner-visible state is the utterance
/// window plus the partial utterance and turn index; the full user-response
/// history is environment bookkeeping for the conversation-level reward.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogState {
    /// Completed utterances, oldest first, at most `window_utterances`.
    window: Vec<(Speaker, Vec<String>)>,
    /// Agent tokens of the utterance under construction.
    partial: Vec<String>,
    /// 1-based index of the agent utterance being built.
    turn: usize,
    /// Most recent completed user utterance (what the agent is replying to).
    last_user: Vec<String>,
    /// Every user response so far, opener excluded, oldest first. Not
    /// learner-visible: it exists for the end-of-conversation reward.
    user_responses: Vec<Vec<String>>,
    done: bool,
}

impl DialogState {
    pub fn window(&self) -> &[(Speaker, Vec<String>)] {
        &self.window
    }

    pub fn partial(&self) -> &[String] {
        &self.partial
    }

    pub fn turn(&self) -> usize {
        self.turn
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

/// The rule-based conversation partner. Responses are a pure function of
/// the agent's utterance, so (state, seed) → response trivially holds; the
/// episode seed only ever picks the opener.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedUser {
    cheerful_tokens: BTreeSet<String>,
    repetition_reply: Vec<String>,
    question_reply: Vec<String>,
    cheerful_reply: Vec<String>,
    default_reply: Vec<String>,
}

impl ScriptedUser {
    /// Rule priority: repeated content token → bored complaint; question →
    /// long neutral reply; cheerful token → laughing reply; anything else →
    /// the shrug. Ordering the question rule above the cheerful one keeps
    /// the two reward specializations separable: an utterance that asks
    /// *and* cheers earns the question channel, not the sentiment channel.
    pub fn respond(&self, agent_utterance: &[String]) -> Vec<String> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for token in agent_utterance {
            if !is_punctuation(token) {
                *counts.entry(token.to_lowercase()).or_insert(0) += 1;
            }
        }
        if counts.values().any(|&c| c >= 2) {
            return self.repetition_reply.clone();
        }
        if contains_question_word(agent_utterance) || contains_question_mark(agent_utterance) {
            return self.question_reply.clone();
        }
        if agent_utterance
            .iter()
            .any(|t| self.cheerful_tokens.contains(&t.to_lowercase()))
        {
            return self.cheerful_reply.clone();
        }
        self.default_reply.clone()
    }
}

/// What one environment step produced. `rewards` holds all seven channel
/// values (zeros mid-utterance); `context` carries enough text to recompute
/// them later and is present on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: DialogState,
    pub rewards: BTreeMap<String, f64>,
    pub context: DialogContext,
    pub turn_done: bool,
    pub conversation_done: bool,
}

/// On-disk environment description (see `envspecs/dialog.toml`).
#[derive(Debug, Serialize, Deserialize)]
struct SpecFile {
    name: String,
    eos_token: String,
    max_turns: usize,
    window_utterances: usize,
    max_utterance_tokens: usize,
    vocab: Vec<String>,
    openers: Vec<Vec<String>>,
    cheerful_tokens: Vec<String>,
    replies: SpecReplies,
    demo_templates: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecReplies {
    repetition: Vec<String>,
    question: Vec<String>,
    cheerful: Vec<String>,
    default: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogEnv {
    name: String,
    vocab: Vec<String>,
    token_ids: BTreeMap<String, usize>,
    eos_id: usize,
    max_turns: usize,
    window_utterances: usize,
    max_utterance_tokens: usize,
    openers: Vec<Vec<String>>,
    demo_templates: Vec<Vec<String>>,
    user: ScriptedUser,
    rewards: RewardSpec,
}

impl DialogEnv {
    /// The environment shipped with the crate.
    pub fn standard() -> Self {
        Self::from_spec_toml(include_str!("../../envspecs/dialog.toml"))
            .expect("embedded dialog spec is valid")
    }

    pub fn from_spec_toml(text: &str) -> Result<Self> {
        let spec: SpecFile =
            toml::from_str(text).map_err(|e| BrlError::format(format!("bad dialog spec: {e}")))?;
        let mut token_ids = BTreeMap::new();
        for (i, token) in spec.vocab.iter().enumerate() {
            if token.is_empty() {
                return Err(BrlError::format("vocabulary tokens must be non-empty"));
            }
            if token_ids.insert(token.clone(), i).is_some() {
                return Err(BrlError::format(format!("duplicate vocabulary token '{token}'")));
            }
        }
        let eos_id = *token_ids
            .get(&spec.eos_token)
            .ok_or_else(|| BrlError::format("eos_token missing from the vocabulary"))?;
        if spec.max_turns == 0 || spec.window_utterances == 0 || spec.max_utterance_tokens == 0 {
            return Err(BrlError::format(
                "max_turns, window_utterances, and max_utterance_tokens must be >= 1",
            ));
        }
        if spec.openers.is_empty() || spec.demo_templates.is_empty() {
            return Err(BrlError::format("need at least one opener and one demo template"));
        }
        let check_tokens = |what: &str, utterance: &[String]| -> Result<()> {
            for t in utterance {
                match token_ids.get(t) {
                    None => {
                        return Err(BrlError::format(format!(
                            "{what} uses '{t}', which is not in the vocabulary"
                        )))
                    }
                    Some(&id) if id == eos_id => {
                        return Err(BrlError::format(format!(
                            "{what} may not contain the end-of-utterance token"
                        )))
                    }
                    Some(_) => {}
                }
            }
            Ok(())
        };
        for (i, opener) in spec.openers.iter().enumerate() {
            if opener.is_empty() {
                return Err(BrlError::format("openers must be non-empty"));
            }
            check_tokens(&format!("opener {i}"), opener)?;
        }
        for (i, template) in spec.demo_templates.iter().enumerate() {
            if template.is_empty() || template.len() > spec.max_utterance_tokens {
                return Err(BrlError::format(format!(
                    "demo template {i} must hold 1..={} tokens",
                    spec.max_utterance_tokens
                )));
            }
            check_tokens(&format!("demo template {i}"), template)?;
        }
        for (name, reply) in [
            ("repetition reply", &spec.replies.repetition),
            ("question reply", &spec.replies.question),
            ("cheerful reply", &spec.replies.cheerful),
            ("default reply", &spec.replies.default),
        ] {
            if reply.is_empty() {
                return Err(BrlError::format(format!("{name} must be non-empty")));
            }
            check_tokens(name, reply)?;
        }
        check_tokens("cheerful_tokens", &spec.cheerful_tokens)?;
        Ok(DialogEnv {
            name: spec.name,
            vocab: spec.vocab,
            token_ids,
            eos_id,
            max_turns: spec.max_turns,
            window_utterances: spec.window_utterances,
            max_utterance_tokens: spec.max_utterance_tokens,
            openers: spec.openers,
            demo_templates: spec.demo_templates,
            user: ScriptedUser {
                cheerful_tokens: spec.cheerful_tokens.into_iter().collect(),
                repetition_reply: spec.replies.repetition,
                question_reply: spec.replies.question,
                cheerful_reply: spec.replies.cheerful,
                default_reply: spec.replies.default,
            },
            rewards: RewardSpec::default(),
        })
    }

    pub fn to_spec_toml(&self) -> String {
        let spec = SpecFile {
            name: self.name.clone(),
            eos_token: self.vocab[self.eos_id].clone(),
            max_turns: self.max_turns,
            window_utterances: self.window_utterances,
            max_utterance_tokens: self.max_utterance_tokens,
            vocab: self.vocab.clone(),
            openers: self.openers.clone(),
            cheerful_tokens: self.user.cheerful_tokens.iter().cloned().collect(),
            replies: SpecReplies {
                repetition: self.user.repetition_reply.clone(),
                question: self.user.question_reply.clone(),
                cheerful: self.user.cheerful_reply.clone(),
                default: self.user.default_reply.clone(),
            },
            demo_templates: self.demo_templates.clone(),
        };
        toml::to_string(&spec).expect("spec serialization cannot fail")
    }

    pub fn save_spec(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_spec_toml())?;
        Ok(())
    }

    pub fn load_spec(path: &Path) -> Result<Self> {
        Self::from_spec_toml(&std::fs::read_to_string(path)?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Actions are vocabulary indices (the eos token included).
    pub fn action_count(&self) -> usize {
        self.vocab.len()
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.token_ids
            .get(token)
            .copied()
            .ok_or_else(|| BrlError::usage(format!("token '{token}' is not in the vocabulary")))
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn window_utterances(&self) -> usize {
        self.window_utterances
    }

    pub fn max_utterance_tokens(&self) -> usize {
        self.max_utterance_tokens
    }

    pub fn demo_templates(&self) -> &[Vec<String>] {
        &self.demo_templates
    }

    pub fn opener_count(&self) -> usize {
        self.openers.len()
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.rewards
    }

    /// Feature dimension: bag-of-words counts over the visible text, a
    /// one-hot of the most recent token, and two progress scalars.
    pub fn feature_dim(&self) -> usize {
        2 * self.vocab.len() + 2
    }

    /// Starts a conversation; the seed stream picks the opener.
    pub fn reset(&self, rng: &mut ChaCha8Rng) -> DialogState {
        let opener = rng.random_range(0..self.openers.len());
        self.reset_with_opener(opener)
            .expect("opener index drawn in range")
    }

    pub fn reset_with_opener(&self, opener: usize) -> Result<DialogState> {
        let opener = self
            .openers
            .get(opener)
            .ok_or_else(|| {
                BrlError::usage(format!(
                    "opener {opener} out of range ({} available)",
                    self.openers.len()
                ))
            })?
            .clone();
        Ok(DialogState {
            window: vec![(Speaker::User, opener.clone())],
            partial: Vec::new(),
            turn: 1,
            last_user: opener,
            user_responses: Vec::new(),
            done: false,
        })
    }

    fn push_windowed(&self, window: &mut Vec<(Speaker, Vec<String>)>, entry: (Speaker, Vec<String>)) {
        window.push(entry);
        while window.len() > self.window_utterances {
            window.remove(0);
        }
    }

    /// Emits one agent token. Mid-utterance steps return zero rewards; the
    /// boundary step (eos or token cap) appends the scripted user's response
    /// and carries that utterance's reward channels.
    pub fn step(&self, state: &DialogState, action: usize) -> Result<StepOutcome> {
        if state.done {
            return Err(BrlError::usage("conversation is over; reset the environment"));
        }
        if action >= self.vocab.len() {
            return Err(BrlError::usage(format!(
                "action {action} is not a vocabulary token (vocabulary size {})",
                self.vocab.len()
            )));
        }
        let mut next = state.clone();
        if action != self.eos_id {
            next.partial.push(self.vocab[action].clone());
        }
        let boundary = action == self.eos_id || next.partial.len() >= self.max_utterance_tokens;
        if !boundary {
            let context = DialogContext {
                turn: state.turn,
                total_turns: self.max_turns,
                utterance_final: false,
                conversation_final: false,
                ..DialogContext::default()
            };
            return Ok(StepOutcome {
                next,
                rewards: self.rewards.channel_values(&context)?,
                context,
                turn_done: false,
                conversation_done: false,
            });
        }

        let agent_utterance = std::mem::take(&mut next.partial);
        let user_response = self.user.respond(&agent_utterance);
        let conversation_done = state.turn == self.max_turns;
        next.user_responses.push(user_response.clone());
        let context = DialogContext {
            turn: state.turn,
            total_turns: self.max_turns,
            utterance_final: true,
            conversation_final: conversation_done,
            prior_user: state.last_user.clone(),
            agent: agent_utterance.clone(),
            user_response: user_response.clone(),
            user_responses: if conversation_done {
                next.user_responses.clone()
            } else {
                Vec::new()
            },
        };
        let rewards = self.rewards.channel_values(&context)?;
        self.push_windowed(&mut next.window, (Speaker::Agent, agent_utterance));
        self.push_windowed(&mut next.window, (Speaker::User, user_response.clone()));
        next.last_user = user_response;
        next.done = conversation_done;
        if !conversation_done {
            next.turn += 1;
        }
        Ok(StepOutcome {
            next,
            rewards,
            context,
            turn_done: true,
            conversation_done,
        })
    }

    /// Learner-visible snapshot: FNV-1a id over the canonical encoding of
    /// (window, partial, turn), plus the feature vector.
    pub fn state_ref(&self, state: &DialogState) -> StateRef {
        StateRef::with_features(self.state_id(state), self.features(state))
    }

    fn state_id(&self, state: &DialogState) -> u64 {
        // FNV-1a 64 over an injective byte encoding of the visible state.
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        let mut eat = |byte: u8| {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(PRIME);
        };
        for (speaker, tokens) in &state.window {
            eat(match speaker {
                Speaker::User => 1,
                Speaker::Agent => 2,
            });
            for t in tokens {
                t.bytes().for_each(&mut eat);
                eat(0x1f);
            }
            eat(0x1e);
        }
        eat(0x1d);
        for t in &state.partial {
            t.bytes().for_each(&mut eat);
            eat(0x1f);
        }
        eat(0x1c);
        (state.turn as u64).to_le_bytes().into_iter().for_each(&mut eat);
        eat(u8::from(state.done));
        hash
    }

    fn features(&self, state: &DialogState) -> Vec<f64> {
        let v = self.vocab.len();
        let mut features = vec![0.0; 2 * v + 2];
        let mut last_token: Option<usize> = None;
        let count = |features: &mut Vec<f64>, tokens: &[String], last: &mut Option<usize>| {
            for t in tokens {
                if let Some(&id) = self.token_ids.get(t) {
                    features[id] += 0.1;
                    *last = Some(id);
                }
            }
        };
        for (_, tokens) in &state.window {
            count(&mut features, tokens, &mut last_token);
        }
        count(&mut features, &state.partial, &mut last_token);
        if let Some(id) = last_token {
            features[v + id] = 1.0;
        }
        features[2 * v] = state.turn as f64 / self.max_turns as f64;
        features[2 * v + 1] = state.partial.len() as f64 / self.max_utterance_tokens as f64;
        features
    }
}

/// Rolls conversations where the agent speaks randomly chosen demonstration
/// templates, recording every token-level step. This is the data priors are
/// fitted on.
pub fn dialog_demonstrations(
    env: &DialogEnv,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    use rand::SeedableRng;
    if episodes == 0 {
        return Err(BrlError::usage("demonstrations need at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        let mut steps = Vec::new();
        while !state.is_done() {
            let template = &env.demo_templates[rng.random_range(0..env.demo_templates.len())];
            let mut turn_done = false;
            for token in template.iter() {
                let action = env.token_id(token)?;
                let outcome = env.step(&state, action)?;
                steps.push(TrajectoryStep {
                    state: env.state_ref(&state),
                    action,
                    rewards: outcome.rewards,
                });
                turn_done = outcome.turn_done;
                state = outcome.next;
            }
            if !turn_done {
                let outcome = env.step(&state, env.eos_id())?;
                steps.push(TrajectoryStep {
                    state: env.state_ref(&state),
                    action: env.eos_id(),
                    rewards: outcome.rewards,
                });
                state = outcome.next;
            }
        }
        trajectories.push(Trajectory::new(steps));
    }
    Ok(trajectories)
}
