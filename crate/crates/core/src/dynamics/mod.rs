//! Training across time slices: slice-0 initialisation, state-space prior
//! chaining, meta-learned topic initialisation and checkpoint-time early
//! stopping.

mod checkpoint;

pub use checkpoint::{
    config_digest, digest_hex, load_slice, load_state, read_manifest, save_slice, save_state, write_manifest, Manifest,
    ManifestSlice, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::btm::{
    infer_brand_scores, optimize_slice, BTMState, BetaPrior, BrandScores, Control, GammaPrior, GaussianPrior,
    OptimizerConfig, PriorSpec,
};
use crate::corpus::SliceData;
use crate::error::{DbtmError, Result};
use crate::evaluation::{ground_truth_rating, paired_scores};
use crate::matrix::Matrix;
use crate::numerics::{
    fisher_z_cdf, gamma_weight, mix_seed, pearson, spearman_rank_correlation, BrandRanking, FisherPoint,
};
use crate::pf::{cavi_fit, cavi_fit_warm, CaviConfig, PFPriors, PFState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionConfig {
    pub sigma_x: f64,
    pub sigma_eta: f64,
    pub sigma_beta: f64,
    /// Prior scale of `eta` at the first slice.
    pub init_eta_scale: f64,
    /// Optimizer steps between meta-controller checkpoints.
    pub checkpoint_interval: u64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            sigma_x: 0.1,
            sigma_eta: 0.1,
            sigma_beta: 0.1,
            init_eta_scale: 1.0,
            checkpoint_interval: 1000,
        }
    }
}

impl TransitionConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [self.sigma_x, self.sigma_eta, self.sigma_beta, self.init_eta_scale];
        if scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(DbtmError::Config(format!("transition scales must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Labels at every slice.
    #[default]
    Dbtm,
    /// Labels only at slice 0; later slices self-supervise the meta weight.
    ODbtm,
}

/// Which tail of the Fisher-z test stops training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakDirection {
    /// Stop when `Phi > 0.95`: the current ranking is significantly worse.
    #[default]
    Upper,
    /// Stop when `Phi < 0.05`: the current ranking is significantly better.
    Lower,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Convex combination of the mean matrices.
    #[default]
    Linear,
    /// Convex combination of their logs.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub topics: usize,
    pub pf_priors: PFPriors,
    pub cavi: CaviConfig,
    /// `checkpoint_interval`, `supervised` and `seed` are set per slice.
    pub optimizer: OptimizerConfig,
    pub transition: TransitionConfig,
    pub mode: Mode,
    pub no_meta: bool,
    pub fisher_point: FisherPoint,
    pub break_direction: BreakDirection,
    pub interpolation: Interpolation,
    /// Centre the lognormal topic-word prior of a new slice on the
    /// interpolated initialisation instead of the previous slice's fit.
    pub meta_prior: bool,
    /// Orient the brand axis after slice 0 so that scores correlate
    /// positively with mean training ratings.
    pub orient_scores: bool,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            topics: 50,
            pf_priors: PFPriors::default(),
            cavi: CaviConfig::default(),
            optimizer: OptimizerConfig::default(),
            transition: TransitionConfig::default(),
            mode: Mode::Dbtm,
            no_meta: false,
            fisher_point: FisherPoint::default(),
            break_direction: BreakDirection::default(),
            interpolation: Interpolation::default(),
            meta_prior: true,
            orient_scores: true,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 {
            return Err(DbtmError::Config("topic count must be at least 1".into()));
        }
        self.pf_priors.validate().map_err(|e| DbtmError::Config(e.to_string()))?;
        self.optimizer.validate()?;
        self.transition.validate()
    }

    fn optimizer_for(&self, t: usize) -> OptimizerConfig {
        OptimizerConfig {
            checkpoint_interval: self.transition.checkpoint_interval,
            supervised: t == 0 || self.mode == Mode::Dbtm,
            seed: mix_seed(self.seed, 300 + t as u64),
            ..self.optimizer
        }
    }

    fn cavi_for(&self, t: usize) -> CaviConfig {
        CaviConfig {
            seed: mix_seed(self.seed, 100 + t as u64),
            ..self.cavi
        }
    }
}

/// Meta-controller histories. `rho_history[t]` is the final ranking
/// correlation of slice `t`; `gamma_history[t]` the weight used to
/// initialise slice `t`, with one extra pending entry for the next slice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub rho_history: Vec<f64>,
    pub gamma_history: Vec<f64>,
    /// Test statistic `Phi` at the last checkpoint of each slice.
    pub phi_history: Vec<f64>,
    pub mode: Mode,
}

impl MetaState {
    pub fn new(mode: Mode) -> Self {
        MetaState {
            rho_history: Vec::new(),
            gamma_history: vec![0.0],
            phi_history: Vec::new(),
            mode,
        }
    }

    fn record(&mut self, t: usize, rho: f64, phi: f64, next_gamma: f64) {
        set_at(&mut self.rho_history, t, rho);
        set_at(&mut self.phi_history, t, phi);
        set_at(&mut self.gamma_history, t + 1, next_gamma);
    }
}

fn set_at(v: &mut Vec<f64>, i: usize, value: f64) {
    if v.len() <= i {
        v.resize(i + 1, f64::NAN);
    }
    v[i] = value;
}

/// Meta-controller settings used at every checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub point: FisherPoint,
    pub direction: BreakDirection,
    pub no_meta: bool,
}

impl From<&StreamConfig> for MetaConfig {
    fn from(c: &StreamConfig) -> Self {
        MetaConfig {
            point: c.fisher_point,
            direction: c.break_direction,
            no_meta: c.no_meta,
        }
    }
}

/// Where the current ranking is compared.
#[derive(Debug, Clone, Copy)]
pub enum RankingTarget<'a> {
    /// Mean validation ratings per brand.
    Validation(&'a SliceData),
    /// Scores predicted at the previous slice (self-supervised surrogate).
    Previous(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointOutcome {
    pub rho: f64,
    pub phi: f64,
    pub next_gamma: f64,
    pub brands: usize,
    pub degenerate: bool,
    pub control: ControlSer,
}

/// Serialisable mirror of [`Control`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSer {
    Continue,
    Break,
}

impl From<ControlSer> for Control {
    fn from(c: ControlSer) -> Self {
        match c {
            ControlSer::Continue => Control::Continue,
            ControlSer::Break => Control::Break,
        }
    }
}

/// `rho^t` and the break/weight decision from `Phi = fisher_z_cdf(rho^t,
/// rho^{t-1}, B)`. Slice 0 compares against 0 and never breaks. With fewer
/// than 4 brands the test is skipped and the next weight is 0.5.
pub fn meta_decision(rho: f64, rho_prev: f64, brands: usize, t: usize, cfg: &MetaConfig) -> Result<CheckpointOutcome> {
    if brands < 4 {
        log::warn!("only {brands} brand(s) available for the meta test; using weight 0.5");
        return Ok(CheckpointOutcome {
            rho,
            phi: 0.5,
            next_gamma: if cfg.no_meta { 0.0 } else { 0.5 },
            brands,
            degenerate: true,
            control: ControlSer::Continue,
        });
    }
    let phi = fisher_z_cdf(rho, rho_prev, brands, cfg.point)?;
    let breaks = t > 0
        && match cfg.direction {
            BreakDirection::Upper => phi > 0.95,
            BreakDirection::Lower => phi < 0.05,
        };
    Ok(CheckpointOutcome {
        rho,
        phi,
        next_gamma: if cfg.no_meta { 0.0 } else { gamma_weight(phi) },
        brands,
        degenerate: false,
        control: if breaks { ControlSer::Break } else { ControlSer::Continue },
    })
}

/// Spearman correlation between current brand scores (times `orientation`)
/// and the ranking target, over the brands the target covers. A constant
/// score vector counts as `rho = 0`.
pub fn current_rho(scores: &[f64], orientation: f64, target: RankingTarget) -> Result<(f64, usize)> {
    let oriented: Vec<f64> = scores.iter().map(|s| s * orientation).collect();
    let (pred, truth) = match target {
        RankingTarget::Validation(data) => paired_scores(&oriented, &ground_truth_rating(data)),
        RankingTarget::Previous(prev) => (oriented, prev.to_vec()),
    };
    if pred.len() < 2 {
        return Ok((0.0, pred.len()));
    }
    let n = pred.len();
    match spearman_rank_correlation(&BrandRanking::from_scores(pred), &BrandRanking::from_scores(truth)) {
        Ok(r) => Ok((r, n)),
        Err(DbtmError::Degenerate(_)) => {
            log::warn!("constant brand ranking at checkpoint; treating rho as 0");
            Ok((0.0, n))
        }
        Err(e) => Err(e),
    }
}

/// Evaluates the state at a checkpoint and records `rho^t` and
/// `gamma^{t+1}` in `meta`.
pub fn checkpoint_evaluate(
    state: &BTMState,
    target: RankingTarget,
    meta: &mut MetaState,
    t: usize,
    orientation: f64,
    cfg: &MetaConfig,
) -> Result<CheckpointOutcome> {
    let (rho, brands) = current_rho(&state.vp.x_loc, orientation, target)?;
    let rho_prev = if t == 0 {
        0.0
    } else {
        meta.rho_history.get(t - 1).copied().unwrap_or(0.0)
    };
    let out = meta_decision(rho, rho_prev, brands, t, cfg)?;
    meta.record(t, out.rho, out.phi, out.next_gamma);
    Ok(out)
}

/// Spearman correlation of two predicted rankings.
pub fn self_supervised_gamma(current: &BrandRanking, previous: &BrandRanking) -> Result<f64> {
    spearman_rank_correlation(current, previous)
}

/// Priors of slice `t` centred on the fitted slice `t - 1`.
pub fn chain_priors(prev: &BTMState, pf_priors: PFPriors, transition: &TransitionConfig) -> PriorSpec {
    PriorSpec {
        theta: GammaPrior {
            shape: pf_priors.a,
            rate: pf_priors.b,
        },
        beta: BetaPrior::LogNormal {
            loc: prev.vp.beta_loc.clone(),
            scale: transition.sigma_beta,
        },
        eta: GaussianPrior {
            mean: prev.vp.eta_loc.as_slice().to_vec(),
            scale: transition.sigma_eta,
        },
        x: GaussianPrior {
            mean: prev.vp.x_loc.clone(),
            scale: transition.sigma_x,
        },
    }
}

/// `(1 - gamma) * prev + gamma * pf`, elementwise (or on logs).
pub fn meta_initialize_beta(prev: &Matrix, pf: &Matrix, gamma: f64, mode: Interpolation) -> Result<Matrix> {
    prev.ensure_same_shape(pf)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DbtmError::Domain(format!("meta weight {gamma} outside [0, 1]")));
    }
    match mode {
        Interpolation::Linear => prev.zip_map(pf, |a, b| (1.0 - gamma) * a + gamma * b),
        Interpolation::Log => prev.zip_map(pf, |a, b| ((1.0 - gamma) * a.ln() + gamma * b.ln()).exp()),
    }
}

/// Training and validation documents of one slice.
#[derive(Debug, Clone)]
pub struct SliceSplit {
    pub train: SliceData,
    pub validation: SliceData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub slice_id: usize,
    pub state: BTMState,
    pub pf: PFState,
    pub scores: BrandScores,
    /// Weight used for this slice's topic initialisation.
    pub gamma_used: f64,
    pub rho: f64,
    pub steps: u64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub slice_id: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedTimeline {
    pub slices: Vec<SliceResult>,
    pub meta: MetaState,
    pub config: StreamConfig,
    pub failure: Option<FailureRecord>,
}

impl TrainedTimeline {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Raw brand scores of every slice.
    pub fn raw_scores(&self) -> Vec<Vec<f64>> {
        self.slices.iter().map(|s| s.scores.raw.clone()).collect()
    }
}

#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
fn stopwatch() -> impl Fn() -> f64 {
    let started = std::time::Instant::now();
    move || started.elapsed().as_secs_f64()
}

// No clock on bare wasm32.
#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

/// Sign that makes brand scores correlate positively with mean ratings.
fn orientation(scores: &[f64], data: &SliceData) -> f64 {
    let (pred, truth) = paired_scores(scores, &ground_truth_rating(data));
    if pred.len() < 2 {
        return 1.0;
    }
    match pearson(&pred, &truth) {
        Some(r) if r < 0.0 => -1.0,
        _ => 1.0,
    }
}

fn check_slice(split: &SliceSplit, t: usize) -> Result<()> {
    if split.train.is_empty() {
        return Err(DbtmError::Domain(format!("slice {t} has no training documents")));
    }
    if split.validation.n_brands != split.train.n_brands || split.validation.counts.cols() != split.train.counts.cols() {
        return Err(DbtmError::Shape(format!("slice {t}: validation and training data disagree")));
    }
    Ok(())
}

fn train_one_slice(
    split: &SliceSplit,
    t: usize,
    prev: Option<&SliceResult>,
    meta: &mut MetaState,
    cfg: &StreamConfig,
) -> Result<SliceResult> {
    check_slice(split, t)?;
    let elapsed = stopwatch();
    let k = cfg.topics;
    let brands = split.train.n_brands;
    let vocab = split.train.counts.cols();
    let meta_cfg = MetaConfig::from(cfg);

    let (pf, mut state, gamma_used) = match prev {
        None => {
            let pf = cavi_fit(&split.train.counts, k, cfg.pf_priors, &cfg.cavi_for(t))?;
            let prior = PriorSpec::initial(cfg.pf_priors, k, vocab, brands, cfg.transition.init_eta_scale);
            let state = BTMState::from_pf(&pf, prior, brands, cfg.optimizer.lr, mix_seed(cfg.seed, 200))?;
            (pf, state, 0.0)
        }
        Some(prev) => {
            if prev.state.vp.vocab() != vocab || prev.state.vp.brands() != brands {
                return Err(DbtmError::Shape(format!(
                    "slice {t} has V={vocab}, B={brands}; previous slice has V={}, B={}",
                    prev.state.vp.vocab(),
                    prev.state.vp.brands()
                )));
            }
            let beta_prev = prev.state.vp.beta_means();
            let pf = cavi_fit_warm(&split.train.counts, k, cfg.pf_priors, &cfg.cavi_for(t), Some(&beta_prev))?;
            let gamma = if cfg.no_meta {
                0.0
            } else {
                meta.gamma_history.get(t).copied().filter(|g| g.is_finite()).unwrap_or(0.5)
            };
            let beta_init = meta_initialize_beta(&beta_prev, &pf.beta_means(), gamma, cfg.interpolation)?;
            let mut prior = chain_priors(&prev.state, cfg.pf_priors, &cfg.transition);
            if cfg.meta_prior {
                prior.beta = BetaPrior::LogNormal {
                    loc: beta_init.map(f64::ln),
                    scale: cfg.transition.sigma_beta,
                };
            }
            let state = BTMState::from_parts(
                &pf.theta_means(),
                &beta_init,
                prior,
                brands,
                Some(prev.state.clf.clone()),
                cfg.optimizer.lr,
                mix_seed(cfg.seed, 200 + t as u64),
            )?;
            (pf, state, gamma)
        }
    };
    if meta.gamma_history.len() <= t {
        set_at(&mut meta.gamma_history, t, gamma_used);
    } else {
        meta.gamma_history[t] = gamma_used;
    }

    let opt = cfg.optimizer_for(t);
    let supervised_target = t == 0 || cfg.mode == Mode::Dbtm;
    let prev_scores: Option<Vec<f64>> = prev.map(|p| p.state.vp.x_loc.clone());
    let target = |_: ()| -> RankingTarget {
        if supervised_target {
            RankingTarget::Validation(&split.validation)
        } else {
            RankingTarget::Previous(prev_scores.as_deref().expect("previous slice present"))
        }
    };
    let orient = |s: &BTMState| {
        if t == 0 && cfg.orient_scores {
            orientation(&s.vp.x_loc, &split.train)
        } else {
            1.0
        }
    };

    let mut last_checkpoint_step = None;
    let outcome = optimize_slice(&mut state, &split.train, &opt, |s| {
        let out = checkpoint_evaluate(s, target(()), meta, t, orient(s), &meta_cfg)?;
        last_checkpoint_step = Some(s.step);
        log::info!(
            "slice {t} step {}: rho {:.4}, Phi {:.4}, next gamma {:.4}",
            s.step,
            out.rho,
            out.phi,
            out.next_gamma
        );
        Ok(out.control.into())
    })?;

    if t == 0 && orient(&state) < 0.0 {
        log::info!("flipping the sign of brand scores and topic offsets after slice 0");
        state.flip_polarity();
    }
    if last_checkpoint_step != Some(state.step) || (t == 0 && cfg.orient_scores) {
        checkpoint_evaluate(&state, target(()), meta, t, 1.0, &meta_cfg)?;
    }

    Ok(SliceResult {
        slice_id: t,
        scores: infer_brand_scores(&state),
        rho: meta.rho_history[t],
        gamma_used,
        steps: outcome.steps,
        stopped_early: outcome.stopped_early,
        wall_seconds: elapsed(),
        state,
        pf,
    })
}

/// Trains slice 0 from a Poisson factorisation and returns it with the
/// meta state holding `gamma = [0, gamma^1]`.
pub fn initialize_time_zero(split: &SliceSplit, cfg: &StreamConfig) -> Result<(SliceResult, MetaState)> {
    cfg.validate()?;
    let mut meta = MetaState::new(cfg.mode);
    let result = train_one_slice(split, 0, None, &mut meta, cfg)?;
    Ok((result, meta))
}

/// Trains the slices in order. Resumes after the slices already in
/// `resume`. `on_slice` runs after every completed slice (for persistence).
/// A failing slice ends training; the timeline up to the last good slice is
/// returned with a failure record.
pub fn train_stream<F>(
    slices: &[SliceSplit],
    cfg: &StreamConfig,
    resume: Option<TrainedTimeline>,
    mut on_slice: F,
) -> Result<TrainedTimeline>
where
    F: FnMut(&TrainedTimeline) -> Result<()>,
{
    cfg.validate()?;
    if slices.is_empty() {
        return Err(DbtmError::Domain("no slices to train".into()));
    }
    let mut timeline = match resume {
        Some(mut tl) => {
            tl.failure = None;
            tl.meta.gamma_history.truncate(tl.slices.len() + 1);
            tl.meta.rho_history.truncate(tl.slices.len());
            tl.meta.phi_history.truncate(tl.slices.len());
            tl
        }
        None => TrainedTimeline {
            slices: Vec::new(),
            meta: MetaState::new(cfg.mode),
            config: cfg.clone(),
            failure: None,
        },
    };
    for t in timeline.slices.len()..slices.len() {
        let prev = timeline.slices.last();
        match train_one_slice(&slices[t], t, prev, &mut timeline.meta, cfg) {
            Ok(result) => {
                log::info!(
                    "slice {t}: rho {:.4}, gamma {:.4}, {} steps in {:.1}s",
                    result.rho,
                    result.gamma_used,
                    result.steps,
                    result.wall_seconds
                );
                timeline.slices.push(result);
                on_slice(&timeline)?;
            }
            Err(e) => {
                log::error!("slice {t} failed: {e}");
                timeline.failure = Some(FailureRecord {
                    slice_id: t,
                    message: e.to_string(),
                });
                timeline.meta.gamma_history.truncate(t + 1);
                timeline.meta.rho_history.truncate(t);
                timeline.meta.phi_history.truncate(t);
                break;
            }
        }
    }
    Ok(timeline)
}

#[cfg(test)]
mod tests;
