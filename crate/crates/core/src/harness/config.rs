//! Experiment configuration: one flat, commented key-value file describes a
//! full (variant × seed) grid — environment, batch recipe, algorithm and
//! optimizer knobs, evaluation budget, and output location.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algos::{AlgoConfig, MinibatchMode, OptimConfig, Variant};
use crate::error::{BrlError, Result};
use crate::rewards::{RewardSpec, CHANNELS};

/// Environment variable that overrides `output_dir` at load time — the only
/// environment hook the harness honors.
pub const OUTPUT_DIR_ENV: &str = "BATCHRL_OUTPUT_DIR";

fn default_name() -> String {
    "experiment".to_string()
}
fn default_env() -> String {
    "chain".to_string()
}
fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_training_steps() -> usize {
    800
}
fn default_batch_episodes() -> usize {
    100
}
fn default_batch_seed() -> u64 {
    17
}
fn default_behavior_temperature() -> f64 {
    1.0
}
fn default_reward() -> String {
    "env".to_string()
}
fn default_gamma() -> f64 {
    0.5
}
fn default_reward_scale() -> f64 {
    2.0
}
fn default_mc_passes() -> usize {
    5
}
fn default_dbcq_candidates() -> usize {
    10
}
fn default_prior_smoothing() -> f64 {
    1.0
}
fn default_prior_members() -> usize {
    3
}
fn default_prior_hidden() -> usize {
    16
}
fn default_prior_fit_epochs() -> usize {
    200
}
fn default_demo_episodes() -> usize {
    24
}
fn default_q_dropout() -> f64 {
    0.2
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_clip_norm() -> f64 {
    1.0
}
fn default_polyak_rate() -> f64 {
    0.005
}
fn default_huber_delta() -> f64 {
    1.0
}
fn default_minibatch_size() -> usize {
    32
}
fn default_checkpoints() -> usize {
    10
}
fn default_early_stop_episodes() -> usize {
    8
}
fn default_eval_episodes() -> usize {
    30
}
fn default_eval_seed() -> u64 {
    1234
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/experiment")
}

/// One experiment grid. Serializes to flat TOML (no nested tables) so every
/// key maps 1:1 onto a CLI flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label written into report headers.
    #[serde(default = "default_name")]
    pub name: String,
    /// `chain`, `gridworld_4x4`, `dialog`, or a path to an environment spec
    /// file (tabular and dialog specs are distinguished by their fields).
    #[serde(default = "default_env")]
    pub env: String,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_training_steps")]
    pub training_steps: usize,
    /// When set, the batch is loaded from this file and the generation keys
    /// below are ignored.
    #[serde(default)]
    pub batch_path: Option<PathBuf>,
    #[serde(default = "default_batch_episodes")]
    pub batch_episodes: usize,
    #[serde(default = "default_batch_seed")]
    pub batch_seed: u64,
    /// Softmax temperature applied to the behavior prior during generation.
    #[serde(default = "default_behavior_temperature")]
    pub behavior_temperature: f64,
    /// Carve a coverage hole: the behavior never takes `exclude_action` at
    /// `exclude_state` (tabular; both keys required together).
    #[serde(default)]
    pub exclude_state: Option<usize>,
    /// With `exclude_state`: the excluded action. Alone: the action is
    /// excluded everywhere (dialog: a token id the behavior never says).
    #[serde(default)]
    pub exclude_action: Option<usize>,
    /// Training reward: `env` (tabular), `mixture` (the full seven-channel
    /// blend), or a single dialog channel name.
    #[serde(default = "default_reward")]
    pub reward: String,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// KL trade-off `c`; KL variants divide the env reward by it.
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
    #[serde(default = "default_mc_passes")]
    pub mc_passes: usize,
    #[serde(default = "default_dbcq_candidates")]
    pub dbcq_candidates: usize,
    #[serde(default)]
    pub use_model_averaged_prior: bool,
    /// Ablation: also divide baseline-variant rewards by `reward_scale`.
    #[serde(default)]
    pub scale_baseline_rewards: bool,
    /// Laplace smoothing for tabular priors; 0 disables smoothing (and
    /// forbids KL variants, whose shaping needs full support).
    #[serde(default = "default_prior_smoothing")]
    pub prior_smoothing: f64,
    /// Member count when `use_model_averaged_prior` is set.
    #[serde(default = "default_prior_members")]
    pub prior_members: usize,
    /// Hidden width of dialog prior networks.
    #[serde(default = "default_prior_hidden")]
    pub prior_hidden: usize,
    #[serde(default = "default_prior_fit_epochs")]
    pub prior_fit_epochs: usize,
    /// Scripted demonstration episodes behind the dialog *behavior* prior.
    #[serde(default = "default_demo_episodes")]
    pub demo_episodes: usize,
    /// Dropout rate of dialog Q-networks (inherited from the prior net the
    /// learner is initialized from).
    #[serde(default = "default_q_dropout")]
    pub q_dropout: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Global L2 gradient clip; 0 disables clipping.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_polyak_rate")]
    pub polyak_rate: f64,
    #[serde(default = "default_huber_delta")]
    pub huber_delta: f64,
    #[serde(default = "default_minibatch_size")]
    pub minibatch_size: usize,
    /// Exact-assignment mode: single-transition sweeps with unit learning
    /// rate and hard target copies — tabular runs become asynchronous
    /// dynamic programming (the optimizer keys above are ignored).
    #[serde(default)]
    pub exact_sweeps: bool,
    /// How many early-stopping evaluations to spread over training.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    /// Rollout episodes per early-stopping evaluation.
    #[serde(default = "default_early_stop_episodes")]
    pub early_stop_episodes: usize,
    /// Rollout episodes for the final report.
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    /// Parallel cell workers; 0 uses one thread per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Round-trip through serde so defaults live in exactly one place.
        toml::from_str("").expect("empty config must deserialize")
    }
}

impl ExperimentConfig {
    /// Parses flat TOML, then applies the output-dir environment override.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let mut config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| BrlError::format(format!("experiment config: {e}")))?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                config.output_dir = PathBuf::from(dir);
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let config = Self::from_toml(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// A fully commented starting point with every key at its default.
    pub fn template() -> String {
        let d = ExperimentConfig::default();
        format!(
            r#"# Experiment grid: every (variant, seed) pair becomes one training cell.
# All keys are optional; the values below are the defaults.

name = "{name}"

# Environment: "chain", "gridworld_4x4", "dialog", or a path to a spec file.
env = "{env}"

# Algorithm variants to train.
variants = ["batch_q", "batch_q_mc", "dbcq", "kl_q", "kl_psi"]

# One training cell per variant per seed.
seeds = [0]

# Optimizer steps per cell.
training_steps = {training_steps}

# Batch: leave batch_path unset to generate one from the behavior prior.
# batch_path = "runs/batch.jsonl"
batch_episodes = {batch_episodes}
batch_seed = {batch_seed}
behavior_temperature = {behavior_temperature}
# Coverage hole (tabular): the behavior never takes this pair.
# exclude_state = 5
# exclude_action = 2

# Training reward: "env" (tabular), "mixture", or one dialog channel of
# question, semantic_coherence, laughter, sentiment_transition, sentiment,
# words_elicited, conversation_length.
reward = "{reward}"

# Algorithm knobs.
gamma = {gamma}
reward_scale = {reward_scale}
mc_passes = {mc_passes}
dbcq_candidates = {dbcq_candidates}
use_model_averaged_prior = false
scale_baseline_rewards = false

# Behavior-prior estimation from the batch.
prior_smoothing = {prior_smoothing}
prior_members = {prior_members}
prior_hidden = {prior_hidden}
prior_fit_epochs = {prior_fit_epochs}
demo_episodes = {demo_episodes}
q_dropout = {q_dropout}

# Optimizer.
learning_rate = {learning_rate}
clip_norm = {clip_norm}
polyak_rate = {polyak_rate}
huber_delta = {huber_delta}
minibatch_size = {minibatch_size}
# exact_sweeps = true turns tabular training into asynchronous dynamic
# programming (oracle-equivalence mode); the optimizer keys are then ignored.
exact_sweeps = false

# Early stopping and evaluation.
checkpoints = {checkpoints}
early_stop_episodes = {early_stop_episodes}
eval_episodes = {eval_episodes}
eval_seed = {eval_seed}

# Parallel cell workers; 0 = one per core.
workers = 0

# Reports land here ({env_var} overrides).
output_dir = "{output_dir}"
"#,
            name = d.name,
            env = d.env,
            training_steps = d.training_steps,
            batch_episodes = d.batch_episodes,
            batch_seed = d.batch_seed,
            behavior_temperature = d.behavior_temperature,
            reward = d.reward,
            gamma = d.gamma,
            reward_scale = d.reward_scale,
            mc_passes = d.mc_passes,
            dbcq_candidates = d.dbcq_candidates,
            prior_smoothing = d.prior_smoothing,
            prior_members = d.prior_members,
            prior_hidden = d.prior_hidden,
            prior_fit_epochs = d.prior_fit_epochs,
            demo_episodes = d.demo_episodes,
            q_dropout = d.q_dropout,
            learning_rate = d.learning_rate,
            clip_norm = d.clip_norm,
            polyak_rate = d.polyak_rate,
            huber_delta = d.huber_delta,
            minibatch_size = d.minibatch_size,
            checkpoints = d.checkpoints,
            early_stop_episodes = d.early_stop_episodes,
            eval_episodes = d.eval_episodes,
            eval_seed = d.eval_seed,
            env_var = OUTPUT_DIR_ENV,
            output_dir = d.output_dir.display(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(BrlError::usage("config needs at least one variant"));
        }
        if self.seeds.is_empty() {
            return Err(BrlError::usage("config needs at least one seed"));
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                return Err(BrlError::usage("seeds must be distinct"));
            }
        }
        {
            let mut sorted = self.variants.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.variants.len() {
                return Err(BrlError::usage("variants must be distinct"));
            }
        }
        if self.training_steps == 0 {
            return Err(BrlError::usage("training_steps must be >= 1"));
        }
        if let Some(path) = &self.batch_path {
            if !path.exists() {
                return Err(BrlError::usage(format!(
                    "batch_path {} does not exist",
                    path.display()
                )));
            }
        } else if self.batch_episodes == 0 {
            return Err(BrlError::usage("batch_episodes must be >= 1"));
        }
        if self.exclude_state.is_some() && self.exclude_action.is_none() {
            return Err(BrlError::usage(
                "exclude_state needs exclude_action to name the excluded pair",
            ));
        }
        if !(self.behavior_temperature > 0.0) {
            return Err(BrlError::usage("behavior_temperature must be positive"));
        }
        if self.prior_smoothing < 0.0 {
            return Err(BrlError::usage("prior_smoothing must be >= 0"));
        }
        if self.prior_smoothing == 0.0
            && self
                .variants
                .iter()
                .any(|v| v.is_kl())
        {
            return Err(BrlError::usage(
                "KL variants need prior_smoothing > 0: their reward shaping takes log prior probabilities",
            ));
        }
        if self.use_model_averaged_prior && self.prior_members == 0 {
            return Err(BrlError::usage("prior_members must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.q_dropout) {
            return Err(BrlError::usage("q_dropout must lie in [0, 1)"));
        }
        if self.clip_norm < 0.0 {
            return Err(BrlError::usage("clip_norm must be >= 0 (0 disables)"));
        }
        if self.checkpoints == 0 {
            return Err(BrlError::usage("checkpoints must be >= 1"));
        }
        if self.early_stop_episodes == 0 || self.eval_episodes == 0 {
            return Err(BrlError::usage("evaluation episode counts must be >= 1"));
        }
        if self.reward != "env"
            && self.reward != "mixture"
            && !CHANNELS.contains(&self.reward.as_str())
        {
            return Err(BrlError::usage(format!(
                "reward must be \"env\", \"mixture\", or one of {}; got {:?}",
                CHANNELS.join(", "),
                self.reward
            )));
        }
        // Everything the algorithm layer checks, checked here too so config
        // errors surface before any training.
        self.algo_config(self.variants[0], self.seeds[0]).validate()?;
        self.optim_config().validate()?;
        Ok(())
    }

    pub fn algo_config(&self, variant: Variant, seed: u64) -> AlgoConfig {
        AlgoConfig {
            variant,
            gamma: self.gamma,
            reward_scale: self.reward_scale,
            mc_passes: self.mc_passes,
            dbcq_candidates: self.dbcq_candidates,
            use_model_averaged_prior: self.use_model_averaged_prior,
            scale_baseline_rewards: self.scale_baseline_rewards,
            seed,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        if self.exact_sweeps {
            return OptimConfig {
                minibatch_mode: MinibatchMode::Sweep,
                ..OptimConfig::assignment_sweep()
            };
        }
        OptimConfig {
            learning_rate: self.learning_rate,
            clip_norm: if self.clip_norm == 0.0 {
                None
            } else {
                Some(self.clip_norm)
            },
            polyak_rate: self.polyak_rate,
            huber_delta: self.huber_delta,
            minibatch_size: self.minibatch_size,
            ..OptimConfig::default()
        }
    }

    /// The training reward mixture this config selects.
    pub fn reward_weights(&self) -> Result<BTreeMap<String, f64>> {
        match self.reward.as_str() {
            "env" => Ok(BTreeMap::from([(
                crate::envs::generate::ENV_CHANNEL.to_string(),
                1.0,
            )])),
            "mixture" => Ok(RewardSpec::default().weights),
            channel => Ok(RewardSpec::single_channel(channel)?.weights),
        }
    }

    /// All (variant, seed) cells in report order.
    pub fn cells(&self) -> Vec<(Variant, u64)> {
        self.variants
            .iter()
            .flat_map(|v| self.seeds.iter().map(move |s| (*v, *s)))
            .collect()
    }
}
