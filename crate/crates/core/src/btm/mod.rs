//! Single-slice brand-topic model.
//!
//! Word rates are `lambda_dv = sum_k theta_dk * beta_kv * exp(x_b * eta_kv)`
//! with `b` the brand of document `d`. The posterior over `theta`, `beta`
//! (lognormal), `eta` and `x` (Gaussian) is mean-field and fitted with
//! reparameterised single-sample gradients of the ELBO plus two ordinal
//! Wasserstein classification terms: one on Gumbel-softmax document features
//! and one on features rebuilt with the brand score negated, whose target is
//! the inverted label.

mod objective;
mod optim;

pub use objective::{
    elbo_estimate, evaluate, total_loss, ElboTerms, Evaluation, Gradient, Noise, ObjectiveOptions, EXP_CLAMP,
};
pub use optim::{optimize_slice, AdamState, Control, OptimizeOutcome, OptimizerConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{SentimentLabel, SliceData};
use crate::error::{DbtmError, Result};
use crate::matrix::Matrix;
use crate::numerics::{ClassDistribution, RelaxedCategorical};
use crate::pf::{PFPriors, PFState};

/// Initial log standard deviation of every variational factor.
pub const INIT_LOGSCALE: f64 = -std::f64::consts::LN_10; // ln 0.1

/// Mean-field variational parameters. Positive factors are lognormal,
/// `eta` and `x` Gaussian; all scales are stored as logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub theta_loc: Matrix,
    pub theta_logscale: Matrix,
    pub beta_loc: Matrix,
    pub beta_logscale: Matrix,
    pub eta_loc: Matrix,
    pub eta_logscale: Matrix,
    pub x_loc: Vec<f64>,
    pub x_logscale: Vec<f64>,
}

impl VariationalParams {
    pub fn docs(&self) -> usize {
        self.theta_loc.rows()
    }

    pub fn topics(&self) -> usize {
        self.beta_loc.rows()
    }

    pub fn vocab(&self) -> usize {
        self.beta_loc.cols()
    }

    pub fn brands(&self) -> usize {
        self.x_loc.len()
    }

    /// Posterior means of the lognormal topic-word factor.
    pub fn beta_means(&self) -> Matrix {
        self.beta_loc
            .zip_map(&self.beta_logscale, |m, ls| (m + 0.5 * (2.0 * ls).exp()).exp())
            .expect("same shape")
    }

    pub fn theta_means(&self) -> Matrix {
        self.theta_loc
            .zip_map(&self.theta_logscale, |m, ls| (m + 0.5 * (2.0 * ls).exp()).exp())
            .expect("same shape")
    }

    pub fn is_finite(&self) -> bool {
        self.theta_loc.all_finite()
            && self.theta_logscale.all_finite()
            && self.beta_loc.all_finite()
            && self.beta_logscale.all_finite()
            && self.eta_loc.all_finite()
            && self.eta_logscale.all_finite()
            && self.x_loc.iter().chain(&self.x_logscale).all(|v| v.is_finite())
    }
}

/// Linear softmax classifier over length-normalised document features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// 3 x V.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(vocab: usize) -> Self {
        ClassifierParams {
            weights: Matrix::zeros(3, vocab),
            bias: vec![0.0; 3],
        }
    }

    pub fn logits(&self, features: &[f64]) -> [f64; 3] {
        let mut o = [0.0; 3];
        for (j, oj) in o.iter_mut().enumerate() {
            *oj = self.bias[j] + self.weights.row(j).iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
        }
        o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Prior of the topic-word factor: Gamma at the first slice, lognormal
/// around the previous slice afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaPrior {
    Gamma(GammaPrior),
    LogNormal { loc: Matrix, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    /// Flattened means (K x V row-major for `eta`).
    pub mean: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub theta: GammaPrior,
    pub beta: BetaPrior,
    pub eta: GaussianPrior,
    pub x: GaussianPrior,
}

impl PriorSpec {
    /// First-slice priors: Gamma factors, `eta ~ N(0, eta_scale^2)`, `x ~ N(0, 1)`.
    pub fn initial(priors: PFPriors, topics: usize, vocab: usize, brands: usize, eta_scale: f64) -> Self {
        PriorSpec {
            theta: GammaPrior {
                shape: priors.a,
                rate: priors.b,
            },
            beta: BetaPrior::Gamma(GammaPrior {
                shape: priors.c,
                rate: priors.d,
            }),
            eta: GaussianPrior {
                mean: vec![0.0; topics * vocab],
                scale: eta_scale,
            },
            x: GaussianPrior {
                mean: vec![0.0; brands],
                scale: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut scales = vec![self.theta.shape, self.theta.rate, self.eta.scale, self.x.scale];
        match &self.beta {
            BetaPrior::Gamma(g) => scales.extend([g.shape, g.rate]),
            BetaPrior::LogNormal { scale, .. } => scales.push(*scale),
        }
        if scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(DbtmError::Domain("prior scales and Gamma parameters must be positive".into()))
        }
    }
}

/// Everything needed to continue training a slice bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BTMState {
    pub vp: VariationalParams,
    pub clf: ClassifierParams,
    pub prior: PriorSpec,
    pub adam: AdamState,
    pub step: u64,
    pub lr: f64,
    pub consecutive_skips: u32,
}

impl BTMState {
    /// Starts from a Poisson factorisation: `theta` and `beta` locations are
    /// the logs of the Gamma means, `eta` and `x` locations are drawn from
    /// their priors.
    pub fn from_pf(pf: &PFState, prior: PriorSpec, brands: usize, lr: f64, seed: u64) -> Result<Self> {
        Self::from_parts(&pf.theta_means(), &pf.beta_means(), prior, brands, None, lr, seed)
    }

    /// General initialiser from explicit `theta`/`beta` means.
    pub fn from_parts(
        theta_means: &Matrix,
        beta_means: &Matrix,
        prior: PriorSpec,
        brands: usize,
        clf: Option<ClassifierParams>,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        prior.validate()?;
        let (topics, vocab) = beta_means.shape();
        if theta_means.cols() != topics {
            return Err(DbtmError::Shape(format!(
                "theta has {} topics, beta has {topics}",
                theta_means.cols()
            )));
        }
        if prior.eta.mean.len() != topics * vocab || prior.x.mean.len() != brands {
            return Err(DbtmError::Shape("prior means do not match model dimensions".into()));
        }
        if let BetaPrior::LogNormal { loc, .. } = &prior.beta {
            beta_means.ensure_same_shape(loc)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_of = |m: &Matrix| m.map(|v| v.max(1e-300).ln());
        let eta_loc = Matrix::from_vec(
            topics,
            vocab,
            prior
                .eta
                .mean
                .iter()
                .map(|m| m + prior.eta.scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        let x_loc: Vec<f64> = prior
            .x
            .mean
            .iter()
            .map(|m| m + prior.x.scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let vp = VariationalParams {
            theta_loc: log_of(theta_means),
            theta_logscale: Matrix::filled(theta_means.rows(), topics, INIT_LOGSCALE),
            beta_loc: log_of(beta_means),
            beta_logscale: Matrix::filled(topics, vocab, INIT_LOGSCALE),
            eta_loc,
            eta_logscale: Matrix::filled(topics, vocab, INIT_LOGSCALE),
            x_loc,
            x_logscale: vec![INIT_LOGSCALE; brands],
        };
        let clf = match clf {
            Some(c) if c.weights.shape() == (3, vocab) => c,
            Some(_) => return Err(DbtmError::Shape("classifier width differs from vocabulary".into())),
            None => ClassifierParams::zeros(vocab),
        };
        let adam = AdamState::new(&vp, &clf);
        if !vp.is_finite() {
            return Err(DbtmError::NonFinite("initial variational parameters".into()));
        }
        Ok(BTMState {
            vp,
            clf,
            prior,
            adam,
            step: 0,
            lr,
            consecutive_skips: 0,
        })
    }

    /// All trainable values in one vector: theta loc/logscale, beta
    /// loc/logscale, eta loc/logscale, x loc/logscale, classifier weights, bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let vp = &self.vp;
        let mut out = Vec::new();
        for b in [
            vp.theta_loc.as_slice(),
            vp.theta_logscale.as_slice(),
            vp.beta_loc.as_slice(),
            vp.beta_logscale.as_slice(),
            vp.eta_loc.as_slice(),
            vp.eta_logscale.as_slice(),
            &vp.x_loc,
            &vp.x_logscale,
            self.clf.weights.as_slice(),
            &self.clf.bias,
        ] {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let vp = &mut self.vp;
        let blocks: [&mut [f64]; 10] = [
            vp.theta_loc.as_mut_slice(),
            vp.theta_logscale.as_mut_slice(),
            vp.beta_loc.as_mut_slice(),
            vp.beta_logscale.as_mut_slice(),
            vp.eta_loc.as_mut_slice(),
            vp.eta_logscale.as_mut_slice(),
            &mut vp.x_loc,
            &mut vp.x_logscale,
            self.clf.weights.as_mut_slice(),
            &mut self.clf.bias,
        ];
        let total: usize = blocks.iter().map(|b| b.len()).sum();
        if total != flat.len() {
            return Err(DbtmError::Shape(format!("{} values for {total} parameters", flat.len())));
        }
        let mut at = 0;
        for b in blocks {
            b.copy_from_slice(&flat[at..at + b.len()]);
            at += b.len();
        }
        Ok(())
    }

    /// Negates `x` and `eta` (locations, prior means and first moments).
    /// The objective is invariant under this map.
    pub fn flip_polarity(&mut self) {
        self.vp.x_loc.iter_mut().for_each(|v| *v = -*v);
        self.vp.eta_loc.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
        self.prior.x.mean.iter_mut().for_each(|v| *v = -*v);
        self.prior.eta.mean.iter_mut().for_each(|v| *v = -*v);
        self.adam.flip_polarity_moments();
    }
}

/// Raw brand scores (`x` locations) and their max-abs normalised copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrandScores {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn normalize_max_abs(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v / max).collect()
}

pub fn infer_brand_scores(state: &BTMState) -> BrandScores {
    let raw = state.vp.x_loc.clone();
    let normalized = normalize_max_abs(&raw);
    BrandScores { raw, normalized }
}

/// `lambda_v = sum_k theta_k * beta_kv * exp(clamp(x * eta_kv))`.
pub fn poisson_rate(theta_d: &[f64], beta: &Matrix, eta: &Matrix, x_b: f64) -> Result<Vec<f64>> {
    beta.ensure_same_shape(eta)?;
    if theta_d.len() != beta.rows() {
        return Err(DbtmError::Shape(format!(
            "theta has {} topics, beta has {}",
            theta_d.len(),
            beta.rows()
        )));
    }
    let mut rates = vec![0.0; beta.cols()];
    let mut clamped = 0usize;
    for (k, &t) in theta_d.iter().enumerate() {
        for ((r, &b), &e) in rates.iter_mut().zip(beta.row(k)).zip(eta.row(k)) {
            let s = x_b * e;
            let c = s.clamp(-EXP_CLAMP, EXP_CLAMP);
            if c != s {
                clamped += 1;
            }
            *r += t * b * c.exp();
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} rate exponents clamped to ±{EXP_CLAMP}");
    }
    Ok(rates)
}

/// Sum of `length` relaxed one-hot draws over `log(rates)`.
pub fn document_representation<R: Rng + ?Sized>(rates: &[f64], length: usize, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    if length == 0 {
        return Ok(vec![0.0; rates.len()]);
    }
    let sampler = RelaxedCategorical::from_rates(rates, tau)?;
    let mut z = vec![0.0; rates.len()];
    let mut draw = vec![0.0; rates.len()];
    for _ in 0..length {
        sampler.sample_into(rng, &mut draw);
        z.iter_mut().zip(&draw).for_each(|(a, b)| *a += b);
    }
    Ok(z)
}

/// `softmax(W z / length + bias)`.
pub fn classify_sentiment(z: &[f64], clf: &ClassifierParams) -> Result<ClassDistribution> {
    if z.len() != clf.weights.cols() {
        return Err(DbtmError::Shape(format!(
            "features of length {} for a classifier over {}",
            z.len(),
            clf.weights.cols()
        )));
    }
    let length: f64 = z.iter().sum();
    let features: Vec<f64> = if length > 0.0 {
        z.iter().map(|v| v / length).collect()
    } else {
        z.to_vec()
    };
    Ok(ClassDistribution {
        probs: softmax3(clf.logits(&features)),
    })
}

pub(crate) fn softmax3(o: [f64; 3]) -> [f64; 3] {
    let m = o[0].max(o[1]).max(o[2]);
    let e = o.map(|v| (v - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

/// Features and prediction for a document with its brand score negated,
/// plus the inverted-label target.
#[derive(Debug, Clone)]
pub struct AdversarialView {
    pub features: Vec<f64>,
    pub predicted: ClassDistribution,
    pub target: ClassDistribution,
}

/// Builds the inverted-score view of document `doc` at the posterior
/// locations.
pub fn adversarial_representation<R: Rng + ?Sized>(
    state: &BTMState,
    data: &SliceData,
    doc: usize,
    tau: f64,
    rng: &mut R,
) -> Result<AdversarialView> {
    let vp = &state.vp;
    let theta: Vec<f64> = vp.theta_loc.row(doc).iter().map(|v| v.exp()).collect();
    let beta = vp.beta_loc.map(f64::exp);
    let x = vp.x_loc[data.brands[doc]];
    let rates = poisson_rate(&theta, &beta, &vp.eta_loc, -x)?;
    let length = data.counts.row_sum(doc) as usize;
    let features = document_representation(&rates, length, tau, rng)?;
    let predicted = classify_sentiment(&features, &state.clf)?;
    let target = ClassDistribution::one_hot(inverted_label(data.label(doc)).index());
    Ok(AdversarialView {
        features,
        predicted,
        target,
    })
}

pub fn inverted_label(label: SentimentLabel) -> SentimentLabel {
    label.inverted()
}
