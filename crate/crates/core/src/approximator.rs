//! Q/Ψ function approximation: a dense tabular map and a small feedforward
//! network with dropout before every weight layer, exact reverse-mode
//! gradients, Huber-style loss, global-norm gradient clipping, and
//! Polyak-averaged target copies.
//!
//! Both approximators sit behind [`QFunction`] so the algorithms never
//! branch on which one they are training. On the tabular path "stochastic"
//! dropout passes degenerate to the deterministic row lookup.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{BrlError, Result};
use crate::mdp::StateRef;

/// Bumped when the checkpoint layout changes; loaders reject other versions.
const CHECKPOINT_VERSION: u32 = 1;

/// Activation applied after a weight layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `act(W·x + b)`, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(BrlError::usage(format!(
                "layer parameter shapes do not match dims {}x{}",
                self.out_dim, self.in_dim
            )));
        }
        Ok(())
    }
}

/// Dense Q table over `state_count × action_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    pub state_count: usize,
    pub action_count: usize,
    /// Row-major `[state][action]`.
    pub table: Vec<f64>,
}

impl TabularQ {
    pub fn zeros(state_count: usize, action_count: usize) -> Self {
        TabularQ {
            state_count,
            action_count,
            table: vec![0.0; state_count * action_count],
        }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let off = state * self.action_count;
        &self.table[off..off + self.action_count]
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.table[state * self.action_count + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.table[state * self.action_count + action] = value;
    }
}

/// Small fully-connected network producing one value per action.
///
/// Dropout, when a mask is supplied, multiplies the *inputs* of every weight
/// layer (the first included) by mask entries that are either 0 or
/// `1/(1−dropout_rate)` — inverted scaling, so the mask-free pass is the
/// correctly scaled deterministic network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardQ {
    pub input_dim: usize,
    pub action_count: usize,
    pub dropout_rate: f64,
    pub layers: Vec<Layer>,
}

/// Intermediates of one forward pass, kept for the backward sweep.
struct Trace {
    /// Layer inputs after masking (what actually multiplies the weights).
    masked_inputs: Vec<Vec<f64>>,
    /// Pre-activation vectors per layer.
    pre_activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl FeedforwardQ {
    /// Builds a network with the given layer widths (`dims[0]` inputs,
    /// `dims.last()` action values), `hidden` activation on all but the last
    /// layer, and uniform ±1/√fan_in initialization.
    pub fn new(
        dims: &[usize],
        hidden: Activation,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(BrlError::usage("network needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(BrlError::usage("network layer widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(BrlError::usage(format!(
                "dropout_rate must be in [0, 1), got {dropout_rate}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let bound = 1.0 / (in_dim as f64).sqrt();
            let activation = if layers.len() == dims.len() - 2 {
                Activation::Identity
            } else {
                hidden
            };
            let weights = (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(Layer {
                in_dim,
                out_dim,
                activation,
                weights,
                bias,
            });
        }
        Ok(FeedforwardQ {
            input_dim: dims[0],
            action_count: *dims.last().unwrap(),
            dropout_rate,
            layers,
        })
    }

    /// All-zero parameters; useful as a fixed point for tests.
    pub fn zeros(dims: &[usize], hidden: Activation, dropout_rate: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = FeedforwardQ::new(dims, hidden, dropout_rate, &mut rng)?;
        for layer in &mut net.layers {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        Ok(net)
    }

    fn validate_input(&self, features: &[f64], mask: Option<&DropoutMask>) -> Result<()> {
        if features.len() != self.input_dim {
            return Err(BrlError::usage(format!(
                "feature vector length {} does not match network input {}",
                features.len(),
                self.input_dim
            )));
        }
        if let Some(m) = mask {
            if m.layer_keep.len() != self.layers.len()
                || m.layer_keep
                    .iter()
                    .zip(&self.layers)
                    .any(|(v, l)| v.len() != l.in_dim)
            {
                return Err(BrlError::usage("dropout mask shape does not match network"));
            }
            if m.dropout_rate != self.dropout_rate {
                return Err(BrlError::usage(format!(
                    "mask dropout rate {} does not match network rate {}",
                    m.dropout_rate, self.dropout_rate
                )));
            }
        }
        Ok(())
    }

    fn trace(&self, features: &[f64], mask: Option<&DropoutMask>) -> Result<Trace> {
        self.validate_input(features, mask)?;
        let mut masked_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = features.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            if let Some(m) = mask {
                for (x, k) in h.iter_mut().zip(&m.layer_keep[li]) {
                    *x *= k;
                }
            }
            let mut z = layer.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                *zo += row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
            }
            masked_inputs.push(std::mem::replace(&mut h, z.iter().map(|&v| layer.activation.apply(v)).collect()));
            pre_activations.push(z);
        }
        Ok(Trace {
            masked_inputs,
            pre_activations,
            output: h,
        })
    }

    /// One pass: deterministic if `mask` is `None`, the given stochastic
    /// sub-network otherwise. Output is one value per action.
    pub fn forward(&self, features: &[f64], mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
        Ok(self.trace(features, mask)?.output)
    }

    /// Exact reverse-mode gradient of `Σ_a dloss_dvalues[a] · out_a` with
    /// respect to all parameters, under the same mask as the forward pass.
    fn backward_vec(
        &self,
        features: &[f64],
        mask: Option<&DropoutMask>,
        dloss_dvalues: &[f64],
    ) -> Result<Vec<LayerGrad>> {
        if dloss_dvalues.len() != self.action_count {
            return Err(BrlError::usage(format!(
                "dloss vector length {} does not match action count {}",
                dloss_dvalues.len(),
                self.action_count
            )));
        }
        let trace = self.trace(features, mask)?;
        let mut grads: Vec<LayerGrad> = self
            .layers
            .iter()
            .map(|l| LayerGrad {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.out_dim],
            })
            .collect();
        let mut delta = dloss_dvalues.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre_activations[li];
            let a = &trace.masked_inputs[li];
            // dz = delta ⊙ act'(z)
            let dz: Vec<f64> = delta
                .iter()
                .zip(z)
                .map(|(d, zv)| d * layer.activation.derivative(*zv))
                .collect();
            let g = &mut grads[li];
            for (o, dzo) in dz.iter().enumerate() {
                g.bias[o] = *dzo;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, av) in row.iter_mut().zip(a) {
                    *gw = dzo * av;
                }
            }
            if li > 0 {
                // Propagate to the previous layer's output: Wᵀ·dz, then undo
                // this layer's input masking.
                let mut da = vec![0.0; layer.in_dim];
                for (o, dzo) in dz.iter().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (dav, w) in da.iter_mut().zip(row) {
                        *dav += w * dzo;
                    }
                }
                if let Some(m) = mask {
                    for (dav, k) in da.iter_mut().zip(&m.layer_keep[li]) {
                        *dav *= k;
                    }
                }
                delta = da;
            }
        }
        Ok(grads)
    }
}

/// One Bernoulli dropout mask per weight layer, entries pre-scaled to
/// `1/(1−dropout_rate)` (inverted dropout). Fully determined by its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub seed: u64,
    pub dropout_rate: f64,
    /// Per layer, one keep/scale factor per *input* of that layer.
    layer_keep: Vec<Vec<f64>>,
}

impl DropoutMask {
    /// Samples a mask for `net` from the given seed. Each input unit of each
    /// layer is kept independently with probability `1−dropout_rate`.
    pub fn generate(net: &FeedforwardQ, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rate = net.dropout_rate;
        let scale = 1.0 / (1.0 - rate);
        let layer_keep = net
            .layers
            .iter()
            .map(|l| {
                (0..l.in_dim)
                    .map(|_| if rng.random::<f64>() >= rate { scale } else { 0.0 })
                    .collect()
            })
            .collect();
        DropoutMask {
            seed,
            dropout_rate: rate,
            layer_keep,
        }
    }

    pub fn layer_keep(&self) -> &[Vec<f64>] {
        &self.layer_keep
    }
}

/// Gradient of one layer, same shapes as the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A gradient with the same shape as its [`QFunction`].
#[derive(Debug, Clone, PartialEq)]
pub enum Gradient {
    /// Dense `[state][action]` table of partial derivatives.
    Tabular(Vec<f64>),
    Network(Vec<LayerGrad>),
}

impl Gradient {
    pub fn zeros_like(q: &QFunction) -> Gradient {
        match q {
            QFunction::Tabular(t) => Gradient::Tabular(vec![0.0; t.table.len()]),
            QFunction::Network(n) => Gradient::Network(
                n.layers
                    .iter()
                    .map(|l| LayerGrad {
                        weights: vec![0.0; l.weights.len()],
                        bias: vec![0.0; l.out_dim],
                    })
                    .collect(),
            ),
        }
    }

    /// `self += other`. Shapes must agree (they always do when both came
    /// from the same QFunction).
    pub fn add_assign(&mut self, other: &Gradient) -> Result<()> {
        match (self, other) {
            (Gradient::Tabular(a), Gradient::Tabular(b)) if a.len() == b.len() => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(())
            }
            (Gradient::Network(a), Gradient::Network(b)) if a.len() == b.len() => {
                for (ga, gb) in a.iter_mut().zip(b) {
                    if ga.weights.len() != gb.weights.len() || ga.bias.len() != gb.bias.len() {
                        return Err(BrlError::usage("gradient layer shape mismatch"));
                    }
                    for (x, y) in ga.weights.iter_mut().zip(&gb.weights) {
                        *x += y;
                    }
                    for (x, y) in ga.bias.iter_mut().zip(&gb.bias) {
                        *x += y;
                    }
                }
                Ok(())
            }
            _ => Err(BrlError::usage("gradient shape mismatch in accumulation")),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match self {
            Gradient::Tabular(t) => t.iter_mut().for_each(|g| *g *= factor),
            Gradient::Network(layers) => {
                for l in layers {
                    l.weights.iter_mut().for_each(|g| *g *= factor);
                    l.bias.iter_mut().for_each(|g| *g *= factor);
                }
            }
        }
    }

    fn entries(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            Gradient::Tabular(t) => Box::new(t.iter().copied()),
            Gradient::Network(layers) => Box::new(
                layers
                    .iter()
                    .flat_map(|l| l.weights.iter().chain(&l.bias).copied()),
            ),
        }
    }

    /// Global L2 norm across every entry.
    pub fn global_norm(&self) -> f64 {
        self.entries().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().all(|g| g.is_finite())
    }
}

/// The approximator the algorithms train: tabular or feedforward, one
/// operation surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QFunction {
    Tabular(TabularQ),
    Network(FeedforwardQ),
}

impl QFunction {
    pub fn action_count(&self) -> usize {
        match self {
            QFunction::Tabular(t) => t.action_count,
            QFunction::Network(n) => n.action_count,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        match self {
            QFunction::Tabular(_) => 0.0,
            QFunction::Network(n) => n.dropout_rate,
        }
    }

    fn tabular_index(t: &TabularQ, state: &StateRef) -> Result<usize> {
        let idx = state.id as usize;
        if idx >= t.state_count {
            return Err(BrlError::usage(format!(
                "state id {} out of range for {}-state table",
                state.id, t.state_count
            )));
        }
        Ok(idx)
    }

    /// Action values at a state. `mask` selects a stochastic sub-network on
    /// the feedforward path and is ignored on the tabular path.
    pub fn values(&self, state: &StateRef, mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
        match self {
            QFunction::Tabular(t) => Ok(t.row(Self::tabular_index(t, state)?).to_vec()),
            QFunction::Network(n) => {
                let features = state.features.as_ref().ok_or_else(|| {
                    BrlError::usage(format!("state {} has no feature vector", state.id))
                })?;
                n.forward(features, mask)
            }
        }
    }

    /// Samples a fresh dropout mask for the network path. Returns `None` on
    /// the tabular path and for networks without dropout, where a mask would
    /// be the identity anyway.
    pub fn fresh_mask(&self, rng: &mut ChaCha8Rng) -> Option<DropoutMask> {
        match self {
            QFunction::Tabular(_) => None,
            QFunction::Network(n) if n.dropout_rate == 0.0 => None,
            QFunction::Network(n) => Some(DropoutMask::generate(n, rng.next_u64())),
        }
    }

    /// `M` stochastic passes with fresh independent masks (seeds drawn from
    /// `rng`); the tabular path returns `M` copies of the exact row.
    pub fn mc_passes(
        &self,
        state: &StateRef,
        passes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        if passes == 0 {
            return Err(BrlError::usage("mc passes must be >= 1"));
        }
        match self {
            QFunction::Tabular(_) => {
                let row = self.values(state, None)?;
                Ok(vec![row; passes])
            }
            QFunction::Network(n) => (0..passes)
                .map(|_| {
                    let mask = DropoutMask::generate(n, rng.next_u64());
                    n.forward(
                        state.features.as_ref().ok_or_else(|| {
                            BrlError::usage(format!("state {} has no feature vector", state.id))
                        })?,
                        Some(&mask),
                    )
                })
                .collect(),
        }
    }

    /// Per-action minimum over `M` stochastic passes — the pessimistic
    /// value estimate used in bootstrap targets. Each pass uses one mask
    /// shared across all action outputs; the min is taken across passes.
    pub fn mc_lower_bound(
        &self,
        state: &StateRef,
        passes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let all = self.mc_passes(state, passes, rng)?;
        let mut min = all[0].clone();
        for pass in &all[1..] {
            for (m, v) in min.iter_mut().zip(pass) {
                *m = m.min(*v);
            }
        }
        Ok(min)
    }

    /// Gradient of `dloss_dvalue · Q(state, action)` w.r.t. all parameters.
    pub fn backward(
        &self,
        state: &StateRef,
        action: usize,
        dloss_dvalue: f64,
        mask: Option<&DropoutMask>,
    ) -> Result<Gradient> {
        if action >= self.action_count() {
            return Err(BrlError::usage(format!(
                "action {action} out of range ({} actions)",
                self.action_count()
            )));
        }
        let mut dvec = vec![0.0; self.action_count()];
        dvec[action] = dloss_dvalue;
        self.backward_vec(state, &dvec, mask)
    }

    /// Gradient of `Σ_a dloss_dvalues[a] · Q(state, a)` — the general form
    /// needed for cross-entropy prior training.
    pub fn backward_vec(
        &self,
        state: &StateRef,
        dloss_dvalues: &[f64],
        mask: Option<&DropoutMask>,
    ) -> Result<Gradient> {
        match self {
            QFunction::Tabular(t) => {
                let idx = Self::tabular_index(t, state)?;
                if dloss_dvalues.len() != t.action_count {
                    return Err(BrlError::usage("dloss vector length mismatch"));
                }
                let mut table = vec![0.0; t.table.len()];
                for (a, d) in dloss_dvalues.iter().enumerate() {
                    table[idx * t.action_count + a] = *d;
                }
                Ok(Gradient::Tabular(table))
            }
            QFunction::Network(n) => {
                let features = state.features.as_ref().ok_or_else(|| {
                    BrlError::usage(format!("state {} has no feature vector", state.id))
                })?;
                Ok(Gradient::Network(n.backward_vec(features, mask, dloss_dvalues)?))
            }
        }
    }

    /// Clips the gradient to `clip_norm` (global L2), then applies one
    /// gradient-descent step `θ ← θ − lr·g`.
    ///
    /// A non-finite gradient aborts the step with a training error; the
    /// parameters are left exactly as they were.
    pub fn clip_and_step(
        &mut self,
        gradient: &Gradient,
        learning_rate: f64,
        clip_norm: Option<f64>,
    ) -> Result<()> {
        if !gradient.is_finite() {
            return Err(BrlError::Training(
                "non-finite gradient; step aborted, parameters kept".to_string(),
            ));
        }
        let mut scaled;
        let gradient = match clip_norm {
            Some(clip) => {
                let norm = gradient.global_norm();
                if norm > clip {
                    scaled = gradient.clone();
                    scaled.scale(clip / norm);
                    &scaled
                } else {
                    gradient
                }
            }
            None => gradient,
        };
        match (self, gradient) {
            (QFunction::Tabular(t), Gradient::Tabular(g)) => {
                if g.len() != t.table.len() {
                    return Err(BrlError::usage("gradient shape mismatch"));
                }
                for (p, gv) in t.table.iter_mut().zip(g) {
                    *p -= learning_rate * gv;
                }
                Ok(())
            }
            (QFunction::Network(n), Gradient::Network(g)) => {
                if g.len() != n.layers.len() {
                    return Err(BrlError::usage("gradient shape mismatch"));
                }
                for (layer, lg) in n.layers.iter_mut().zip(g) {
                    if lg.weights.len() != layer.weights.len() || lg.bias.len() != layer.bias.len()
                    {
                        return Err(BrlError::usage("gradient layer shape mismatch"));
                    }
                    for (p, gv) in layer.weights.iter_mut().zip(&lg.weights) {
                        *p -= learning_rate * gv;
                    }
                    for (p, gv) in layer.bias.iter_mut().zip(&lg.bias) {
                        *p -= learning_rate * gv;
                    }
                }
                Ok(())
            }
            _ => Err(BrlError::usage("gradient kind does not match approximator")),
        }
    }

    /// Flat number of parameters (for finite-difference oracles).
    pub fn param_count(&self) -> usize {
        match self {
            QFunction::Tabular(t) => t.table.len(),
            QFunction::Network(n) => n
                .layers
                .iter()
                .map(|l| l.weights.len() + l.bias.len())
                .sum(),
        }
    }

    /// Reads parameter `i` in flat order (per layer: weights then bias).
    pub fn get_param(&self, mut i: usize) -> f64 {
        match self {
            QFunction::Tabular(t) => t.table[i],
            QFunction::Network(n) => {
                for l in &n.layers {
                    if i < l.weights.len() {
                        return l.weights[i];
                    }
                    i -= l.weights.len();
                    if i < l.bias.len() {
                        return l.bias[i];
                    }
                    i -= l.bias.len();
                }
                panic!("parameter index out of range");
            }
        }
    }

    /// Writes parameter `i` in the same flat order as [`Self::get_param`].
    pub fn set_param(&mut self, mut i: usize, value: f64) {
        match self {
            QFunction::Tabular(t) => t.table[i] = value,
            QFunction::Network(n) => {
                for l in &mut n.layers {
                    if i < l.weights.len() {
                        l.weights[i] = value;
                        return;
                    }
                    i -= l.weights.len();
                    if i < l.bias.len() {
                        l.bias[i] = value;
                        return;
                    }
                    i -= l.bias.len();
                }
                panic!("parameter index out of range");
            }
        }
    }

    /// Gradient entry `i` in the same flat order (used by test oracles).
    pub fn grad_param(gradient: &Gradient, mut i: usize) -> f64 {
        match gradient {
            Gradient::Tabular(t) => t[i],
            Gradient::Network(layers) => {
                for l in layers {
                    if i < l.weights.len() {
                        return l.weights[i];
                    }
                    i -= l.weights.len();
                    if i < l.bias.len() {
                        return l.bias[i];
                    }
                    i -= l.bias.len();
                }
                panic!("gradient index out of range");
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            QFunction::Tabular(t) => {
                if t.table.len() != t.state_count * t.action_count {
                    return Err(BrlError::format("tabular Q table size mismatch".to_string()));
                }
                if t.table.iter().any(|v| !v.is_finite()) {
                    return Err(BrlError::format("tabular Q contains non-finite entries"));
                }
                Ok(())
            }
            QFunction::Network(n) => {
                if !(0.0..1.0).contains(&n.dropout_rate) {
                    return Err(BrlError::format("network dropout rate out of range"));
                }
                let mut prev = n.input_dim;
                for l in &n.layers {
                    l.validate()?;
                    if l.in_dim != prev {
                        return Err(BrlError::format("network layer dims do not chain"));
                    }
                    prev = l.out_dim;
                }
                if prev != n.action_count {
                    return Err(BrlError::format(
                        "network output width does not equal action count",
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Slow-moving copy of a Q-function used for bootstrap targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCopy {
    q: QFunction,
    polyak_rate: f64,
}

impl TargetCopy {
    /// Starts as an exact copy of `source`. `polyak_rate` is the α of
    /// `θ_T ← (1−α)·θ_T + α·θ_π`, in (0, 1].
    pub fn new(source: &QFunction, polyak_rate: f64) -> Result<Self> {
        if !(polyak_rate > 0.0 && polyak_rate <= 1.0) {
            return Err(BrlError::usage(format!(
                "polyak rate must be in (0, 1], got {polyak_rate}"
            )));
        }
        Ok(TargetCopy {
            q: source.clone(),
            polyak_rate,
        })
    }

    pub fn q(&self) -> &QFunction {
        &self.q
    }

    pub fn polyak_rate(&self) -> f64 {
        self.polyak_rate
    }

    /// Moves every parameter α of the way toward `source`:
    /// `θ_T ← (1−α)·θ_T + α·θ_π`, exactly.
    pub fn polyak_update(&mut self, source: &QFunction) -> Result<()> {
        let a = self.polyak_rate;
        match (&mut self.q, source) {
            (QFunction::Tabular(t), QFunction::Tabular(s)) if t.table.len() == s.table.len() => {
                for (p, sp) in t.table.iter_mut().zip(&s.table) {
                    *p = (1.0 - a) * *p + a * sp;
                }
                Ok(())
            }
            (QFunction::Network(t), QFunction::Network(s)) if t.layers.len() == s.layers.len() => {
                for (tl, sl) in t.layers.iter_mut().zip(&s.layers) {
                    if tl.weights.len() != sl.weights.len() || tl.bias.len() != sl.bias.len() {
                        return Err(BrlError::usage("target/source layer shape mismatch"));
                    }
                    for (p, sp) in tl.weights.iter_mut().zip(&sl.weights) {
                        *p = (1.0 - a) * *p + a * sp;
                    }
                    for (p, sp) in tl.bias.iter_mut().zip(&sl.bias) {
                        *p = (1.0 - a) * *p + a * sp;
                    }
                }
                Ok(())
            }
            _ => Err(BrlError::usage("target/source shape mismatch")),
        }
    }
}

/// Smooth L1 (Huber) loss at the conventional threshold δ = 1:
/// `0.5·d²` inside the threshold, `|d| − 0.5` outside, `d = prediction −
/// target`. Returns `(loss, ∂loss/∂prediction)`.
pub fn smooth_l1(prediction: f64, target: f64) -> (f64, f64) {
    huber(prediction, target, 1.0)
}

/// Huber loss with arbitrary threshold δ: quadratic `0.5·d²` for `|d| ≤ δ`,
/// linear `δ·|d| − 0.5·δ²` beyond it. `δ = +inf` degenerates to plain
/// squared-error loss, which makes a unit-learning-rate tabular step an
/// exact assignment to the target.
pub fn huber(prediction: f64, target: f64, delta: f64) -> (f64, f64) {
    let d = prediction - target;
    if d.abs() <= delta {
        (0.5 * d * d, d)
    } else {
        (delta * d.abs() - 0.5 * delta * delta, delta * d.signum())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    seed: u64,
    q: QFunction,
}

/// Writes a JSON checkpoint: layout version, the RNG seed the owner was
/// using, and all parameters. Floats round-trip bit-exactly.
pub fn save_checkpoint(path: &Path, q: &QFunction, seed: u64) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        seed,
        q: q.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], validating version
/// and parameter shapes.
pub fn load_checkpoint(path: &Path) -> Result<(QFunction, u64)> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(BrlError::format(format!(
            "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    file.q.validate()?;
    Ok((file.q, file.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn feature_state(features: Vec<f64>) -> StateRef {
        StateRef::with_features(0, features)
    }

    fn small_net(seed: u64, rate: f64) -> FeedforwardQ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeedforwardQ::new(&[3, 4, 2], Activation::Tanh, rate, &mut rng).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = FeedforwardQ::zeros(&[3, 4, 2], Activation::Relu, 0.0).unwrap();
        let out = net.forward(&[1.0, -2.0, 0.5], None).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_rate_mask_equals_deterministic_pass() {
        let net = small_net(1, 0.0);
        let mask = DropoutMask::generate(&net, 42);
        let x = [0.3, -0.7, 1.1];
        assert_eq!(net.forward(&x, Some(&mask)).unwrap(), net.forward(&x, None).unwrap());
    }

    #[test]
    fn fixed_mask_is_reproducible() {
        let net = small_net(2, 0.4);
        let m1 = DropoutMask::generate(&net, 7);
        let m2 = DropoutMask::generate(&net, 7);
        assert_eq!(m1, m2);
        let x = [0.5, 0.5, 0.5];
        let o1 = net.forward(&x, Some(&m1)).unwrap();
        let o2 = net.forward(&x, Some(&m2)).unwrap();
        assert_eq!(o1, o2);
        let scale = 1.0 / (1.0 - 0.4);
        for layer in m1.layer_keep() {
            for &k in layer {
                assert!(k == 0.0 || (k - scale).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smooth_l1_matches_hand_values() {
        let (l, g) = smooth_l1(0.5, 0.0);
        assert_abs_diff_eq!(l, 0.125);
        assert_abs_diff_eq!(g, 0.5);
        let (l, g) = smooth_l1(2.0, 0.0);
        assert_abs_diff_eq!(l, 1.5);
        assert_abs_diff_eq!(g, 1.0);
        let (l, g) = smooth_l1(0.0, 0.0);
        assert_eq!((l, g), (0.0, 0.0));
    }

    #[test]
    fn smooth_l1_is_c1_at_threshold() {
        let eps = 1e-10;
        let (l_in, g_in) = smooth_l1(1.0 - eps, 0.0);
        let (l_out, g_out) = smooth_l1(1.0 + eps, 0.0);
        assert_abs_diff_eq!(l_in, l_out, epsilon = 1e-9);
        assert_abs_diff_eq!(g_in, g_out, epsilon = 1e-9);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = small_net(3, 0.0);
        let mut q = QFunction::Network(net);
        let state = feature_state(vec![0.4, -1.2, 0.9]);
        let action = 1;
        let analytic = q.backward(&state, action, 1.0, None).unwrap();
        let h = 1e-5;
        for i in 0..q.param_count() {
            let orig = q.get_param(i);
            q.set_param(i, orig + h);
            let up = q.values(&state, None).unwrap()[action];
            q.set_param(i, orig - h);
            let down = q.values(&state, None).unwrap()[action];
            q.set_param(i, orig);
            let fd = (up - down) / (2.0 * h);
            let an = QFunction::grad_param(&analytic, i);
            assert_abs_diff_eq!(an, fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn backward_respects_dropout_mask() {
        let net = small_net(4, 0.5);
        let mask = DropoutMask::generate(&net, 11);
        let mut q = QFunction::Network(net);
        let state = feature_state(vec![1.0, 2.0, -0.5]);
        let analytic = q.backward(&state, 0, 1.0, Some(&mask)).unwrap();
        let h = 1e-5;
        for i in 0..q.param_count() {
            let orig = q.get_param(i);
            q.set_param(i, orig + h);
            let up = q.values(&state, Some(&mask)).unwrap()[0];
            q.set_param(i, orig - h);
            let down = q.values(&state, Some(&mask)).unwrap()[0];
            q.set_param(i, orig);
            let fd = (up - down) / (2.0 * h);
            assert_abs_diff_eq!(QFunction::grad_param(&analytic, i), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gradient_is_zero() {
        let q = QFunction::Network(small_net(5, 0.0));
        let state = feature_state(vec![0.1, 0.2, 0.3]);
        let g = q.backward(&state, 0, 0.0, None).unwrap();
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn output_bias_gradient_is_direct() {
        // Single identity layer: ∂out_a/∂bias_a = 1, so the bias gradient
        // for the chosen action is exactly dloss_dvalue.
        let net = FeedforwardQ::zeros(&[2, 3], Activation::Relu, 0.0).unwrap();
        let q = QFunction::Network(net);
        let state = feature_state(vec![0.0, 0.0]);
        let g = q.backward(&state, 2, 2.5, None).unwrap();
        match g {
            Gradient::Network(layers) => {
                assert_eq!(layers[0].bias, vec![0.0, 0.0, 2.5]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut q = QFunction::Tabular(TabularQ::zeros(1, 4));
        // Norm 4 gradient: entries (4,0,0,0).
        let g = Gradient::Tabular(vec![4.0, 0.0, 0.0, 0.0]);
        q.clip_and_step(&g, 1.0, Some(1.0)).unwrap();
        match &q {
            QFunction::Tabular(t) => assert_abs_diff_eq!(t.table[0], -1.0),
            _ => unreachable!(),
        }
        // Norm 0.5: unchanged by clipping.
        let mut q = QFunction::Tabular(TabularQ::zeros(1, 4));
        let g = Gradient::Tabular(vec![0.5, 0.0, 0.0, 0.0]);
        q.clip_and_step(&g, 1.0, Some(1.0)).unwrap();
        match &q {
            QFunction::Tabular(t) => assert_abs_diff_eq!(t.table[0], -0.5),
            _ => unreachable!(),
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut q = QFunction::Tabular(TabularQ::zeros(1, 2));
        let g = Gradient::Tabular(vec![f64::NAN, 0.0]);
        let err = q.clip_and_step(&g, 1.0, Some(1.0));
        assert!(matches!(err, Err(BrlError::Training(_))));
        match &q {
            QFunction::Tabular(t) => assert_eq!(t.table, vec![0.0, 0.0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn polyak_update_interpolates_exactly() {
        let zero = QFunction::Tabular(TabularQ::zeros(1, 1));
        let one = QFunction::Tabular(TabularQ {
            state_count: 1,
            action_count: 1,
            table: vec![1.0],
        });
        let mut t = TargetCopy::new(&zero, 0.005).unwrap();
        t.polyak_update(&one).unwrap();
        match t.q() {
            QFunction::Tabular(q) => assert_abs_diff_eq!(q.table[0], 0.005),
            _ => unreachable!(),
        }
        let mut t = TargetCopy::new(&zero, 1.0).unwrap();
        t.polyak_update(&one).unwrap();
        match t.q() {
            QFunction::Tabular(q) => assert_eq!(q.table[0], 1.0),
            _ => unreachable!(),
        }
        let mut t = TargetCopy::new(&zero, 0.5).unwrap();
        t.polyak_update(&one).unwrap();
        t.polyak_update(&one).unwrap();
        match t.q() {
            QFunction::Tabular(q) => assert_abs_diff_eq!(q.table[0], 0.75),
            _ => unreachable!(),
        }
    }

    #[test]
    fn mc_lower_bound_is_min_of_passes() {
        let q = QFunction::Network(small_net(6, 0.3));
        let state = feature_state(vec![0.2, -0.4, 0.6]);
        let mut rng1 = ChaCha8Rng::seed_from_u64(99);
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let passes = q.mc_passes(&state, 5, &mut rng1).unwrap();
        let lb = q.mc_lower_bound(&state, 5, &mut rng2).unwrap();
        for a in 0..q.action_count() {
            let min = passes.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let mean = passes.iter().map(|p| p[a]).sum::<f64>() / 5.0;
            assert_eq!(lb[a], min);
            assert!(lb[a] <= mean);
        }
    }

    #[test]
    fn mc_lower_bound_without_dropout_is_deterministic_pass() {
        let q = QFunction::Network(small_net(7, 0.0));
        let state = feature_state(vec![0.0, 1.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lb = q.mc_lower_bound(&state, 5, &mut rng).unwrap();
        assert_eq!(lb, q.values(&state, None).unwrap());
    }

    #[test]
    fn mc_passes_rejects_zero() {
        let q = QFunction::Network(small_net(8, 0.2));
        let state = feature_state(vec![0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(q.mc_lower_bound(&state, 0, &mut rng).is_err());
    }

    #[test]
    fn tabular_values_ignore_masks() {
        let mut t = TabularQ::zeros(2, 2);
        t.set(1, 0, 3.0);
        let q = QFunction::Tabular(t);
        let state = StateRef::tabular(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(q.values(&state, None).unwrap(), vec![3.0, 0.0]);
        assert_eq!(q.mc_lower_bound(&state, 5, &mut rng).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt.json");
        let q = QFunction::Network(small_net(9, 0.2));
        save_checkpoint(&path, &q, 1234).unwrap();
        let (loaded, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, q);
        assert_eq!(seed, 1234);
        let path2 = dir.path().join("q2.ckpt.json");
        save_checkpoint(&path2, &loaded, seed).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt.json");
        let q = QFunction::Tabular(TabularQ::zeros(1, 1));
        save_checkpoint(&path, &q, 0).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn mismatched_feature_length_is_usage_error() {
        let q = QFunction::Network(small_net(10, 0.0));
        let state = feature_state(vec![1.0, 2.0]);
        assert!(matches!(q.values(&state, None), Err(BrlError::Usage(_))));
    }
}
