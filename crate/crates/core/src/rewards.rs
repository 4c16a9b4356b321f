//! Implicit reward channels computed from conversation text, their weighted
//! total, post-hoc phrase metrics, and post-hoc batch relabeling.
//!
//! All scorers are pure functions of their inputs. Utterances are token
//! lists; "text" matching (laughter, phrase lists) happens on the tokens
//! joined with single spaces, lowercased.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{BrlError, Result};
use crate::mdp::{Batch, DialogContext};

/// The seven reward channels, in the order of the total-reward mixture.
pub const CHANNELS: [&str; 7] = [
    "question",
    "semantic_coherence",
    "laughter",
    "sentiment_transition",
    "sentiment",
    "words_elicited",
    "conversation_length",
];

/// Question words granting the first half of the question reward.
pub const QUESTION_WORDS: [&str; 6] = ["how", "what", "where", "why", "when", "who"];

/// Tokens of the punctuation class — excluded from word counts.
pub const PUNCTUATION_TOKENS: [&str; 4] = ["?", "!", ".", ","];

pub fn is_punctuation(token: &str) -> bool {
    PUNCTUATION_TOKENS.contains(&token)
}

/// Whole-token, case-insensitive test for the question words.
pub fn contains_question_word(tokens: &[String]) -> bool {
    tokens
        .iter()
        .any(|t| QUESTION_WORDS.contains(&t.to_lowercase().as_str()))
}

pub fn contains_question_mark(tokens: &[String]) -> bool {
    tokens.iter().any(|t| t.contains('?'))
}

/// Sentiment scoring backends. Only the lexicon scorer ships; richer
/// models (e.g. an emoji-distribution classifier with a weight vector over
/// emojis) would be further variants behind the same `score` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scorer", rename_all = "snake_case")]
pub enum SentimentScorer {
    /// Signed per-token weights in [−1, 1]; utterance score is the sum over
    /// tokens, clamped to [−1, 1]. Empty text scores 0.
    Lexicon { weights: BTreeMap<String, f64> },
}

impl SentimentScorer {
    /// The lexicon shipped with the dialog vocabulary.
    pub fn default_lexicon() -> Self {
        Self::parse_lexicon(include_str!("../data/sentiment_lexicon.txt"))
            .expect("embedded lexicon is well-formed")
    }

    /// Parses `token weight` lines (blank lines and `#` comments ignored).
    pub fn parse_lexicon(text: &str) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, weight) = line.rsplit_once(' ').ok_or_else(|| {
                BrlError::format(format!("lexicon line {}: expected 'token weight'", lineno + 1))
            })?;
            let weight: f64 = weight.parse().map_err(|_| {
                BrlError::format(format!("lexicon line {}: bad weight '{weight}'", lineno + 1))
            })?;
            if !(-1.0..=1.0).contains(&weight) {
                return Err(BrlError::format(format!(
                    "lexicon line {}: weight {weight} outside [-1, 1]",
                    lineno + 1
                )));
            }
            weights.insert(token.to_lowercase(), weight);
        }
        Ok(SentimentScorer::Lexicon { weights })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_lexicon(&std::fs::read_to_string(path)?)
    }

    /// Utterance sentiment in [−1, 1]; empty input scores 0.
    pub fn score(&self, tokens: &[String]) -> f64 {
        match self {
            SentimentScorer::Lexicon { weights } => tokens
                .iter()
                .filter_map(|t| weights.get(&t.to_lowercase()))
                .sum::<f64>()
                .clamp(-1.0, 1.0),
        }
    }
}

/// The reward mixture: per-channel weights, the discount used inside the
/// conversation-length channel, and the pluggable sentiment scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    /// Channel name → mixture weight. Defaults to the seven-coefficient
    /// mixture (weights sum to 1); single-channel specs are how batches get
    /// relabeled for per-reward specialization runs.
    pub weights: BTreeMap<String, f64>,
    /// Discount γ inside the conversation-length channel γ^{N−n}·N.
    pub length_gamma: f64,
    pub sentiment: SentimentScorer,
    /// When true, "ha" is only counted inside pure laughter tokens ("ha",
    /// "haha", ...) instead of anywhere in the text (the default literal
    /// rule counts the "ha" in "that" too).
    pub laughter_whole_word: bool,
}

impl Default for RewardSpec {
    fn default() -> Self {
        let weights = BTreeMap::from(
            [
                ("question", 0.15682657),
                ("semantic_coherence", 0.13837638),
                ("laughter", 0.15313653),
                ("sentiment_transition", 0.14206642),
                ("sentiment", 0.14206642),
                ("words_elicited", 0.14760148),
                ("conversation_length", 0.1199262),
            ]
            .map(|(k, v)| (k.to_string(), v)),
        );
        RewardSpec {
            weights,
            length_gamma: 0.5,
            sentiment: SentimentScorer::default_lexicon(),
            laughter_whole_word: false,
        }
    }
}

impl RewardSpec {
    /// A spec whose mixture is a single channel at weight 1 (all channels
    /// are still computed and stored; only the mixture changes).
    pub fn single_channel(channel: &str) -> Result<Self> {
        if !CHANNELS.contains(&channel) {
            return Err(BrlError::usage(format!("unknown reward channel '{channel}'")));
        }
        Ok(RewardSpec {
            weights: BTreeMap::from([(channel.to_string(), 1.0)]),
            ..RewardSpec::default()
        })
    }

    /// 0.5 for containing a question word, plus 0.5 for containing a
    /// question mark. Question words match whole tokens case-insensitively.
    pub fn question_reward(&self, agent_utterance: &[String]) -> f64 {
        let mut r = 0.0;
        if contains_question_word(agent_utterance) {
            r += 0.5;
        }
        if contains_question_mark(agent_utterance) {
            r += 0.5;
        }
        r
    }

    /// Number of non-overlapping, case-insensitive occurrences of the
    /// literal substring "ha" in the user's response. Deliberately literal:
    /// the "ha" inside "that" counts, exactly as a string count would.
    pub fn laughter_reward(&self, user_response: &[String]) -> f64 {
        if self.laughter_whole_word {
            // Variant rule: count only inside pure laughter tokens made of
            // repeated "ha" ("ha" → 1, "haha" → 2, ...).
            return user_response
                .iter()
                .map(|t| {
                    let t = t.to_lowercase();
                    if !t.is_empty() && t.len() % 2 == 0 && t.as_bytes().chunks(2).all(|c| c == b"ha")
                    {
                        (t.len() / 2) as f64
                    } else {
                        0.0
                    }
                })
                .sum();
        }
        let text = user_response.join(" ").to_lowercase();
        let mut count = 0.0;
        let mut rest = text.as_str();
        while let Some(pos) = rest.find("ha") {
            count += 1.0;
            rest = &rest[pos + 2..];
        }
        count
    }

    /// Engagement: the total conversation length `N` discounted back to
    /// utterance `n` as `γ^{N−n}·N`. The discount is only meaningful for
    /// `n < N`; the formula extends continuously to `n = N` (exponent 0,
    /// value `N`).
    pub fn conversation_length_reward(&self, total_utterances: usize, n: usize) -> Result<f64> {
        if n == 0 || n > total_utterances {
            return Err(BrlError::usage(format!(
                "utterance index {n} outside 1..={total_utterances}"
            )));
        }
        let exponent = (total_utterances - n) as f64;
        Ok(self.length_gamma.powf(exponent) * total_utterances as f64)
    }

    /// Number of words in the user's response (punctuation tokens excluded).
    pub fn words_elicited_reward(&self, user_response: &[String]) -> f64 {
        user_response.iter().filter(|t| !is_punctuation(t)).count() as f64
    }

    pub fn sentiment_reward(&self, user_response: &[String]) -> f64 {
        self.sentiment.score(user_response)
    }

    /// 1 if the user's peak-positive response occurred at a strictly later
    /// utterance than the peak-negative one, else 0. A flat conversation
    /// (all responses equally scored) or any tie scores 0.
    pub fn sentiment_transition_reward(&self, user_responses: &[Vec<String>]) -> f64 {
        if user_responses.len() < 2 {
            return 0.0;
        }
        let scores: Vec<f64> = user_responses.iter().map(|u| self.sentiment.score(u)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        if max == min {
            return 0.0;
        }
        let peak_pos = scores.iter().position(|&s| s == max).unwrap();
        let peak_neg = scores.iter().position(|&s| s == min).unwrap();
        if peak_pos > peak_neg {
            1.0
        } else {
            0.0
        }
    }

    /// Topic coherence between the user's input and the agent's response:
    /// cosine similarity of bag-of-words count vectors, mapped to [0, 1] via
    /// `(cos + 1)/2`. Either side empty → 0.
    pub fn semantic_similarity_reward(&self, user_input: &[String], agent_response: &[String]) -> f64 {
        if user_input.is_empty() || agent_response.is_empty() {
            return 0.0;
        }
        let counts = |tokens: &[String]| {
            let mut m: BTreeMap<String, f64> = BTreeMap::new();
            for t in tokens {
                *m.entry(t.to_lowercase()).or_insert(0.0) += 1.0;
            }
            m
        };
        let a = counts(user_input);
        let b = counts(agent_response);
        let dot: f64 = a
            .iter()
            .filter_map(|(t, ca)| b.get(t).map(|cb| ca * cb))
            .sum();
        let norm = |m: &BTreeMap<String, f64>| m.values().map(|c| c * c).sum::<f64>().sqrt();
        let cos = dot / (norm(&a) * norm(&b));
        (cos + 1.0) / 2.0
    }

    /// All seven channel values for one transition's context.
    ///
    /// Rewards land on the final token of each agent utterance; any other
    /// transition scores 0 everywhere. The sentiment-transition channel is
    /// granted once, on the conversation's final transition.
    pub fn channel_values(&self, ctx: &DialogContext) -> Result<BTreeMap<String, f64>> {
        let mut values: BTreeMap<String, f64> =
            CHANNELS.iter().map(|c| (c.to_string(), 0.0)).collect();
        if !ctx.utterance_final {
            return Ok(values);
        }
        values.insert("question".into(), self.question_reward(&ctx.agent));
        values.insert(
            "semantic_coherence".into(),
            self.semantic_similarity_reward(&ctx.prior_user, &ctx.agent),
        );
        values.insert("laughter".into(), self.laughter_reward(&ctx.user_response));
        values.insert("sentiment".into(), self.sentiment_reward(&ctx.user_response));
        values.insert(
            "words_elicited".into(),
            self.words_elicited_reward(&ctx.user_response),
        );
        values.insert(
            "conversation_length".into(),
            self.conversation_length_reward(ctx.total_turns, ctx.turn)?,
        );
        if ctx.conversation_final {
            values.insert(
                "sentiment_transition".into(),
                self.sentiment_transition_reward(&ctx.user_responses),
            );
        }
        Ok(values)
    }

    /// Weighted sum of channel values under this spec's mixture. Every
    /// weighted channel must be present in `values`.
    pub fn total_reward(&self, values: &BTreeMap<String, f64>) -> Result<f64> {
        let missing: Vec<&str> = self
            .weights
            .keys()
            .filter(|c| !values.contains_key(*c))
            .map(|c| c.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(BrlError::usage(format!(
                "channel values missing for: {}",
                missing.join(", ")
            )));
        }
        Ok(self.weights.iter().map(|(c, w)| w * values[c]).sum())
    }

    /// Recomputes every transition's reward channels from its stored dialog
    /// context under this spec, returning a new batch. The original is
    /// untouched; transition count, order, and all non-reward fields are
    /// preserved, as are any extra channels the spec does not define (e.g.
    /// externally recorded votes).
    ///
    /// Transitions without context (tabular batches) cannot be relabeled:
    /// that is a usage error naming the channels that could not be
    /// recomputed.
    pub fn relabel_batch(&self, batch: &Batch) -> Result<Batch> {
        let mut rewards = Vec::with_capacity(batch.len());
        for (i, t) in batch.transitions().iter().enumerate() {
            let ctx = t.context.as_ref().ok_or_else(|| {
                BrlError::usage(format!(
                    "transition {i} carries no dialog context; cannot recompute channels: {}",
                    CHANNELS.join(", ")
                ))
            })?;
            let mut values = self.channel_values(ctx)?;
            for (name, v) in &t.rewards {
                if !CHANNELS.contains(&name.as_str()) {
                    values.insert(name.clone(), *v);
                }
            }
            rewards.push(values);
        }
        batch.with_rewards(rewards, CHANNELS.iter().map(|c| c.to_string()).collect())
    }
}

/// Post-hoc phrase counts for one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PosthocCounts {
    pub polite: usize,
    pub supportive: usize,
    pub cheerful: usize,
}

/// The three phrase lists behind the post-hoc metrics, one phrase per line
/// per category file.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseLists {
    pub polite: Vec<String>,
    pub supportive: Vec<String>,
    pub cheerful: Vec<String>,
}

fn parse_phrases(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

impl Default for PhraseLists {
    /// The lists shipped with the crate.
    fn default() -> Self {
        PhraseLists {
            polite: parse_phrases(include_str!("../data/politeness_phrases.txt")),
            supportive: parse_phrases(include_str!("../data/supportive_phrases.txt")),
            cheerful: parse_phrases(include_str!("../data/cheerful_phrases.txt")),
        }
    }
}

impl PhraseLists {
    /// Loads `politeness_phrases.txt`, `supportive_phrases.txt`, and
    /// `cheerful_phrases.txt` from a directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<String>> {
            Ok(parse_phrases(&std::fs::read_to_string(dir.join(name))?))
        };
        Ok(PhraseLists {
            polite: read("politeness_phrases.txt")?,
            supportive: read("supportive_phrases.txt")?,
            cheerful: read("cheerful_phrases.txt")?,
        })
    }

    /// Counts how many phrases of each category appear in the utterance
    /// (case-insensitive substring presence; each listed phrase counts at
    /// most once).
    pub fn posthoc_metrics(&self, utterance: &[String]) -> PosthocCounts {
        let text = utterance.join(" ").to_lowercase();
        let count =
            |phrases: &[String]| phrases.iter().filter(|p| text.contains(&p.to_lowercase())).count();
        PosthocCounts {
            polite: count(&self.polite),
            supportive: count(&self.supportive),
            cheerful: count(&self.cheerful),
        }
    }
}
