use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{evaluate, Gradient, Noise, ObjectiveOptions};
use super::{BTMState, ClassifierParams, VariationalParams};
use crate::corpus::SliceData;
use crate::error::{DbtmError, Result};
use crate::numerics::mix_seed;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAX_CONSECUTIVE_SKIPS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub lr: f64,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_interval: u64,
    pub tau: f64,
    pub supervised: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            batch_size: 256,
            max_steps: 50_000,
            lr: 0.01,
            checkpoint_interval: 1000,
            tau: 0.5,
            supervised: true,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DbtmError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DbtmError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DbtmError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// First and second moments, one block per parameter tensor in the order
/// theta loc/logscale, beta loc/logscale, eta loc/logscale, x loc/logscale,
/// classifier weights, classifier bias. Theta rows are updated lazily and
/// keep their own step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub theta_row_t: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub(crate) const ETA_LOC_BLOCK: usize = 4;
pub(crate) const X_LOC_BLOCK: usize = 6;

fn block_lens(vp: &VariationalParams, clf: &ClassifierParams) -> [usize; 10] {
    let t = vp.theta_loc.as_slice().len();
    let kv = vp.beta_loc.as_slice().len();
    let b = vp.x_loc.len();
    [t, t, kv, kv, kv, kv, b, b, clf.weights.as_slice().len(), clf.bias.len()]
}

impl AdamState {
    pub fn new(vp: &VariationalParams, clf: &ClassifierParams) -> Self {
        let lens = block_lens(vp, clf);
        AdamState {
            t: 0,
            theta_row_t: vec![0; vp.docs()],
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub(crate) fn flip_polarity_moments(&mut self) {
        for b in [ETA_LOC_BLOCK, X_LOC_BLOCK] {
            self.m[b].iter_mut().for_each(|v| *v = -*v);
        }
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
    }
}

/// One Adam step on every parameter touched by `grad`.
pub(crate) fn apply_gradient(state: &mut BTMState, grad: &Gradient) {
    let lr = state.lr;
    let adam = &mut state.adam;
    adam.t += 1;
    let t = adam.t;
    let k = state.vp.topics();
    for (i, &d) in grad.theta_rows.iter().enumerate() {
        adam.theta_row_t[d] += 1;
        let tr = adam.theta_row_t[d];
        let rows = d * k..(d + 1) * k;
        let gi = i * k..(i + 1) * k;
        adam_update(
            state.vp.theta_loc.row_mut(d),
            &grad.theta_loc[gi.clone()],
            &mut adam.m[0][rows.clone()],
            &mut adam.v[0][rows.clone()],
            lr,
            tr,
        );
        adam_update(
            state.vp.theta_logscale.row_mut(d),
            &grad.theta_logscale[gi],
            &mut adam.m[1][rows.clone()],
            &mut adam.v[1][rows],
            lr,
            tr,
        );
    }
    let vp = &mut state.vp;
    let blocks: [(&mut [f64], &[f64]); 8] = [
        (vp.beta_loc.as_mut_slice(), &grad.beta_loc),
        (vp.beta_logscale.as_mut_slice(), &grad.beta_logscale),
        (vp.eta_loc.as_mut_slice(), &grad.eta_loc),
        (vp.eta_logscale.as_mut_slice(), &grad.eta_logscale),
        (&mut vp.x_loc, &grad.x_loc),
        (&mut vp.x_logscale, &grad.x_logscale),
        (state.clf.weights.as_mut_slice(), &grad.clf_weights),
        (&mut state.clf.bias, &grad.clf_bias),
    ];
    for (j, (p, g)) in blocks.into_iter().enumerate() {
        let (m, v) = (&mut adam.m[j + 2], &mut adam.v[j + 2]);
        adam_update(p, g, m, v, lr, t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Break,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizeOutcome {
    /// Steps taken by this call (including skipped ones).
    pub steps: u64,
    pub stopped_early: bool,
    pub skipped: u64,
    pub losses: Vec<f64>,
}

/// Documents and noise of step `step`; a pure function of `(seed, step)` so
/// that a reloaded state replays the same trajectory.
pub(crate) fn step_inputs(state: &BTMState, docs_total: usize, config: &OptimizerConfig) -> (Vec<usize>, Noise) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, state.step));
    let m = config.batch_size.min(docs_total);
    let docs = rand::seq::index::sample(&mut rng, docs_total, m).into_vec();
    let vp = &state.vp;
    let noise = Noise::draw(&mut rng, m, vp.topics(), vp.vocab(), vp.brands());
    (docs, noise)
}

/// Minibatch Adam until `max_steps` (counted on `state.step`) or until the
/// checkpoint callback returns [`Control::Break`].
pub fn optimize_slice<F>(
    state: &mut BTMState,
    data: &SliceData,
    config: &OptimizerConfig,
    mut on_checkpoint: F,
) -> Result<OptimizeOutcome>
where
    F: FnMut(&BTMState) -> Result<Control>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(DbtmError::Domain("cannot train on an empty slice".into()));
    }
    let opts = ObjectiveOptions {
        tau: config.tau,
        supervised: config.supervised,
    };
    let mut outcome = OptimizeOutcome::default();
    while state.step < config.max_steps {
        let (docs, noise) = step_inputs(state, data.len(), config);
        let ev = evaluate(state, data, &docs, &noise, &opts)?;
        if ev.is_finite() {
            apply_gradient(state, &ev.grad);
            state.consecutive_skips = 0;
        } else {
            state.consecutive_skips += 1;
            state.lr *= 0.5;
            outcome.skipped += 1;
            log::warn!(
                "non-finite gradient at step {}; skipping, learning rate now {}",
                state.step,
                state.lr
            );
            if state.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(DbtmError::NonFinite(format!(
                    "gradient for {MAX_CONSECUTIVE_SKIPS} consecutive steps (last at step {})",
                    state.step
                )));
            }
        }
        state.step += 1;
        outcome.steps += 1;
        outcome.losses.push(ev.loss);
        if config.checkpoint_interval > 0
            && state.step.is_multiple_of(config.checkpoint_interval)
            && on_checkpoint(state)? == Control::Break
        {
            outcome.stopped_early = true;
            break;
        }
    }
    Ok(outcome)
}
