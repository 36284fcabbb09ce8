//! Single-sample objective with analytic reparameterisation gradients.
//!
//! The loss is `-ELBO + (1/M) sum_d [W1(y_hat_d, y_d) + W1(y_tilde_d, y_bar_d)]`.
//! Local terms (theta and the likelihood) are scaled by `D / M`. Entropies
//! are analytic; KL terms are analytic wherever prior and posterior share a
//! family (eta, x, and beta under a lognormal prior), and Monte Carlo for
//! Gamma priors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{softmax3, BTMState, BetaPrior, GaussianPrior};
use crate::corpus::SliceData;
use crate::error::{DbtmError, Result};
use crate::numerics::{mix_seed, wasserstein_3, RelaxedCategorical};
use crate::parallel::map_chunks;

// Relaxed draws of one document kept in memory for the backward pass;
// longer documents regenerate them from the seed instead.
const MAX_STORED_DRAWS: usize = 1 << 20;

pub const EXP_CLAMP: f64 = 30.0;

const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7; // 0.5 * (1 + ln 2π)
const DOC_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub tau: f64,
    /// Include the two Wasserstein classification terms.
    pub supervised: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            tau: 0.5,
            supervised: true,
        }
    }
}

/// Standard-normal noise for one evaluation plus per-document seeds for the
/// relaxed draws. Holding it fixed makes the objective deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub x: Vec<f64>,
    pub doc_seeds: Vec<u64>,
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, topics: usize, vocab: usize, brands: usize) -> Noise {
        let theta = normals(rng, batch * topics);
        let beta = normals(rng, topics * vocab);
        let eta = normals(rng, topics * vocab);
        let x = normals(rng, brands);
        let doc_seeds = (0..batch).map(|_| rng.next_u64()).collect();
        Noise {
            theta,
            beta,
            eta,
            x,
            doc_seeds,
        }
    }

    /// Noise matching a polarity-flipped state: `eta` and `x` draws negated.
    pub fn flip_polarity(&mut self) {
        self.eta.iter_mut().for_each(|v| *v = -*v);
        self.x.iter_mut().for_each(|v| *v = -*v);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub log_likelihood: f64,
    pub theta: f64,
    pub beta: f64,
    pub eta: f64,
    pub x: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.log_likelihood + self.theta + self.beta + self.eta + self.x
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("log-likelihood", self.log_likelihood),
            ("theta prior/entropy", self.theta),
            ("beta prior/entropy", self.beta),
            ("eta KL", self.eta),
            ("x KL", self.x),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Gradient of the loss. `theta_*` rows follow `theta_rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub theta_rows: Vec<usize>,
    pub theta_loc: Vec<f64>,
    pub theta_logscale: Vec<f64>,
    pub beta_loc: Vec<f64>,
    pub beta_logscale: Vec<f64>,
    pub eta_loc: Vec<f64>,
    pub eta_logscale: Vec<f64>,
    pub x_loc: Vec<f64>,
    pub x_logscale: Vec<f64>,
    pub clf_weights: Vec<f64>,
    pub clf_bias: Vec<f64>,
}

impl Gradient {
    pub fn is_finite(&self) -> bool {
        [
            &self.theta_loc,
            &self.theta_logscale,
            &self.beta_loc,
            &self.beta_logscale,
            &self.eta_loc,
            &self.eta_logscale,
            &self.x_loc,
            &self.x_logscale,
            &self.clf_weights,
            &self.clf_bias,
        ]
        .iter()
        .all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Dense layout matching [`BTMState::flat_params`].
    pub fn to_flat(&self, docs: usize) -> Vec<f64> {
        let k = if self.theta_rows.is_empty() {
            0
        } else {
            self.theta_loc.len() / self.theta_rows.len()
        };
        let mut tl = vec![0.0; docs * k];
        let mut ts = vec![0.0; docs * k];
        for (i, &d) in self.theta_rows.iter().enumerate() {
            for j in 0..k {
                tl[d * k + j] += self.theta_loc[i * k + j];
                ts[d * k + j] += self.theta_logscale[i * k + j];
            }
        }
        let mut out = tl;
        out.extend(ts);
        for b in [
            &self.beta_loc,
            &self.beta_logscale,
            &self.eta_loc,
            &self.eta_logscale,
            &self.x_loc,
            &self.x_logscale,
            &self.clf_weights,
            &self.clf_bias,
        ] {
            out.extend_from_slice(b);
        }
        out
    }

    fn negate(&mut self) {
        for b in [
            &mut self.theta_loc,
            &mut self.theta_logscale,
            &mut self.beta_loc,
            &mut self.beta_logscale,
            &mut self.eta_loc,
            &mut self.eta_logscale,
            &mut self.x_loc,
            &mut self.x_logscale,
            &mut self.clf_weights,
            &mut self.clf_bias,
        ] {
            b.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub elbo: f64,
    pub terms: ElboTerms,
    /// Sum over the batch of both Wasserstein terms (before the 1/M factor).
    pub wasserstein: f64,
    pub grad: Gradient,
    /// Rate exponents that hit the clamp.
    pub clamped: usize,
}

impl Evaluation {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad.is_finite()
    }
}

struct BrandCache {
    /// `beta_kv * exp(clamp(x_b eta_kv))`, K x V.
    w: Vec<f64>,
    /// Same with `-x_b`.
    w_adv: Vec<f64>,
    /// Row sums of `w`.
    wsum: Vec<f64>,
}

struct ChunkAcc {
    theta_g: Vec<f64>,
    g_logbeta: Vec<f64>,
    g_eta: Vec<f64>,
    g_x: Vec<f64>,
    t_sum: Vec<f64>,
    clf_w: Vec<f64>,
    clf_b: [f64; 3],
    loglik: f64,
    theta_terms: f64,
    wass: f64,
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn unclamped(s: f64) -> bool {
    s.abs() <= EXP_CLAMP
}

/// Loss, ELBO and loss gradient for the documents `docs` of `data` under
/// fixed `noise`.
pub fn evaluate(
    state: &BTMState,
    data: &SliceData,
    docs: &[usize],
    noise: &Noise,
    opts: &ObjectiveOptions,
) -> Result<Evaluation> {
    let vp = &state.vp;
    let (nk, nv, nb) = (vp.topics(), vp.vocab(), vp.brands());
    if docs.is_empty() {
        return Err(DbtmError::Domain("empty batch".into()));
    }
    if data.len() != vp.docs() || data.counts.cols() != nv || data.n_brands != nb {
        return Err(DbtmError::Shape(format!(
            "data is {}x{} with {} brands, model is {}x{} with {nb} brands",
            data.len(),
            data.counts.cols(),
            data.n_brands,
            vp.docs(),
            nv
        )));
    }
    if docs.iter().any(|&d| d >= data.len()) {
        return Err(DbtmError::Shape("batch index out of range".into()));
    }
    let m = docs.len();
    if noise.theta.len() != m * nk
        || noise.beta.len() != nk * nv
        || noise.eta.len() != nk * nv
        || noise.x.len() != nb
        || noise.doc_seeds.len() != m
    {
        return Err(DbtmError::Shape("noise does not match batch and model".into()));
    }
    if !(opts.tau > 0.0) {
        return Err(DbtmError::Domain(format!("temperature must be positive, got {}", opts.tau)));
    }

    let scale = vp.docs() as f64 / m as f64;
    let inv_m = 1.0 / m as f64;
    let (ta, tb) = (state.prior.theta.shape, state.prior.theta.rate);
    let theta_const = ta * tb.ln() - ln_gamma(ta);

    let beta_sd: Vec<f64> = vp.beta_logscale.as_slice().iter().map(|v| v.exp()).collect();
    let log_beta: Vec<f64> = vp
        .beta_loc
        .as_slice()
        .iter()
        .zip(&beta_sd)
        .zip(&noise.beta)
        .map(|((l, s), e)| l + s * e)
        .collect();
    let beta: Vec<f64> = log_beta.iter().map(|v| v.exp()).collect();
    let eta_sd: Vec<f64> = vp.eta_logscale.as_slice().iter().map(|v| v.exp()).collect();
    let eta: Vec<f64> = vp
        .eta_loc
        .as_slice()
        .iter()
        .zip(&eta_sd)
        .zip(&noise.eta)
        .map(|((l, s), e)| l + s * e)
        .collect();
    let x_sd: Vec<f64> = vp.x_logscale.iter().map(|v| v.exp()).collect();
    let x: Vec<f64> = vp
        .x_loc
        .iter()
        .zip(&x_sd)
        .zip(&noise.x)
        .map(|((l, s), e)| l + s * e)
        .collect();

    let mut present = vec![false; nb];
    for &d in docs {
        present[data.brands[d]] = true;
    }
    let mut clamped = 0usize;
    let caches: Vec<Option<BrandCache>> = (0..nb)
        .map(|b| {
            if !present[b] {
                return None;
            }
            let xb = x[b];
            let mut w = vec![0.0; nk * nv];
            let mut w_adv = if opts.supervised { vec![0.0; nk * nv] } else { Vec::new() };
            let mut wsum = vec![0.0; nk];
            for k in 0..nk {
                let mut s = 0.0;
                for v in 0..nv {
                    let i = k * nv + v;
                    let e = xb * eta[i];
                    if !unclamped(e) {
                        clamped += 1;
                    }
                    let c = e.clamp(-EXP_CLAMP, EXP_CLAMP);
                    w[i] = beta[i] * c.exp();
                    s += w[i];
                    if opts.supervised {
                        w_adv[i] = beta[i] * (-c).exp();
                    }
                }
                wsum[k] = s;
            }
            Some(BrandCache { w, w_adv, wsum })
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} rate exponents clamped to ±{EXP_CLAMP}");
    }

    let theta_sd_of = |d: usize, k: usize| vp.theta_logscale.get(d, k).exp();

    let chunks: Vec<Result<ChunkAcc>> = map_chunks(m, DOC_CHUNK, |range| {
        let mut acc = ChunkAcc {
            theta_g: vec![0.0; range.len() * nk],
            g_logbeta: vec![0.0; nk * nv],
            g_eta: vec![0.0; nk * nv],
            g_x: vec![0.0; nb],
            t_sum: vec![0.0; nb * nk],
            clf_w: vec![0.0; 3 * nv],
            clf_b: [0.0; 3],
            loglik: 0.0,
            theta_terms: 0.0,
            wass: 0.0,
        };
        let mut theta = vec![0.0; nk];
        let mut rates = vec![0.0; nv];
        let mut draw = vec![0.0; nv];
        let mut feat = vec![0.0; nv];
        let mut dlog = vec![0.0; nv];
        let mut stored: Vec<f64> = Vec::new();
        for (local, i) in range.clone().enumerate() {
            let d = docs[i];
            let b = data.brands[d];
            let cache = caches[b].as_ref().expect("brand cache present");
            let xb = x[b];
            let gt = &mut acc.theta_g[local * nk..(local + 1) * nk];
            for k in 0..nk {
                let lt = vp.theta_loc.get(d, k) + theta_sd_of(d, k) * noise.theta[i * nk + k];
                theta[k] = lt.exp();
                acc.theta_terms += (ta - 1.0) * lt - tb * theta[k] + theta_const
                    + vp.theta_loc.get(d, k)
                    + vp.theta_logscale.get(d, k)
                    + HALF_LOG_2PI_E;
                gt[k] = -scale * ((ta - 1.0) - tb * theta[k]);
            }

            let (idx, cnt) = data.counts.row(d);
            for (&v, &c) in idx.iter().zip(cnt) {
                let v = v as usize;
                let c = c as f64;
                let mut lam = 0.0;
                for k in 0..nk {
                    lam += theta[k] * cache.w[k * nv + v];
                }
                acc.loglik += c * lam.ln();
                let r = c / lam;
                for k in 0..nk {
                    let i2 = k * nv + v;
                    let contrib = r * theta[k] * cache.w[i2];
                    gt[k] -= scale * contrib;
                    acc.g_logbeta[i2] -= scale * contrib;
                    if unclamped(xb * eta[i2]) {
                        acc.g_eta[i2] -= scale * xb * contrib;
                        acc.g_x[b] -= scale * contrib * eta[i2];
                    }
                }
            }
            for k in 0..nk {
                let tw = theta[k] * cache.wsum[k];
                acc.loglik -= tw;
                gt[k] += scale * tw;
                acc.t_sum[b * nk + k] += theta[k];
            }

            let length = data.counts.row_sum(d);
            if !opts.supervised || length == 0 {
                continue;
            }
            let label = data.label(d);
            for (branch, sign) in [(0u64, 1.0), (1u64, -1.0)] {
                let w = if branch == 0 { &cache.w } else { &cache.w_adv };
                let target = if branch == 0 { label } else { label.inverted() }.index();
                rates.iter_mut().for_each(|r| *r = 0.0);
                for k in 0..nk {
                    let t = theta[k];
                    for (r, wv) in rates.iter_mut().zip(&w[k * nv..(k + 1) * nv]) {
                        *r += t * wv;
                    }
                }
                // Only non-finite rates can fail here; they poison the loss instead.
                let Ok(sampler) = RelaxedCategorical::from_rates(&rates, opts.tau) else {
                    acc.wass = f64::NAN;
                    continue;
                };
                let draw_seed = mix_seed(noise.doc_seeds[i], branch);
                feat.iter_mut().for_each(|f| *f = 0.0);
                let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
                let keep = (length as usize).saturating_mul(nv) <= MAX_STORED_DRAWS;
                if keep {
                    stored.resize(length as usize * nv, 0.0);
                    for s in stored.chunks_exact_mut(nv) {
                        sampler.sample_into(&mut rng, s);
                        feat.iter_mut().zip(s.iter()).for_each(|(f, s)| *f += s);
                    }
                } else {
                    for _ in 0..length {
                        sampler.sample_into(&mut rng, &mut draw);
                        feat.iter_mut().zip(&draw).for_each(|(f, s)| *f += s);
                    }
                }
                let inv_len = 1.0 / length as f64;
                feat.iter_mut().for_each(|f| *f *= inv_len);
                let yhat = softmax3(state.clf.logits(&feat));
                let mut y = [0.0; 3];
                y[target] = 1.0;
                acc.wass += wasserstein_3(&yhat, &y);
                let f0 = yhat[0] - y[0];
                let f1 = yhat[0] + yhat[1] - y[0] - y[1];
                let gy = [sgn(f0) + sgn(f1), sgn(f1), 0.0];
                let dot: f64 = (0..3).map(|j| yhat[j] * gy[j]).sum();
                let go: [f64; 3] = std::array::from_fn(|j| yhat[j] * (gy[j] - dot) * inv_m);
                for j in 0..3 {
                    acc.clf_b[j] += go[j];
                    for (g, f) in acc.clf_w[j * nv..(j + 1) * nv].iter_mut().zip(&feat) {
                        *g += go[j] * f;
                    }
                }
                // u = W^T go / L, then replay the draws for d loss / d log lambda.
                let w0 = state.clf.weights.row(0);
                let w1 = state.clf.weights.row(1);
                let w2 = state.clf.weights.row(2);
                let u: Vec<f64> = (0..nv)
                    .map(|v| (w0[v] * go[0] + w1[v] * go[1] + w2[v] * go[2]) * inv_len)
                    .collect();
                dlog.iter_mut().for_each(|g| *g = 0.0);
                let inv_tau = sampler.inv_tau();
                let mut accumulate = |draw: &[f64]| {
                    let su: f64 = draw.iter().zip(&u).map(|(s, u)| s * u).sum();
                    for ((g, s), uv) in dlog.iter_mut().zip(draw).zip(&u) {
                        *g += inv_tau * s * (uv - su);
                    }
                };
                if keep {
                    stored.chunks_exact(nv).for_each(&mut accumulate);
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
                    for _ in 0..length {
                        sampler.sample_into(&mut rng, &mut draw);
                        accumulate(&draw);
                    }
                }
                for (g, r) in dlog.iter_mut().zip(&rates) {
                    *g /= r;
                }
                for k in 0..nk {
                    let t = theta[k];
                    let mut tk = 0.0;
                    for v in 0..nv {
                        let i2 = k * nv + v;
                        let c = dlog[v] * t * w[i2];
                        tk += c;
                        acc.g_logbeta[i2] += c;
                        if unclamped(xb * eta[i2]) {
                            acc.g_eta[i2] += sign * xb * c;
                            acc.g_x[b] += sign * c * eta[i2];
                        }
                    }
                    gt[k] += tk;
                }
            }
        }
        Ok(acc)
    });

    let mut g_theta = Vec::with_capacity(m * nk);
    let mut g_logbeta = vec![0.0; nk * nv];
    let mut g_eta = vec![0.0; nk * nv];
    let mut g_x = vec![0.0; nb];
    let mut t_sum = vec![0.0; nb * nk];
    let mut clf_w = vec![0.0; 3 * nv];
    let mut clf_b = vec![0.0; 3];
    let (mut loglik, mut theta_terms, mut wass) = (0.0, 0.0, 0.0);
    for chunk in chunks {
        let c = chunk?;
        g_theta.extend_from_slice(&c.theta_g);
        add_into(&mut g_logbeta, &c.g_logbeta);
        add_into(&mut g_eta, &c.g_eta);
        add_into(&mut g_x, &c.g_x);
        add_into(&mut t_sum, &c.t_sum);
        add_into(&mut clf_w, &c.clf_w);
        add_into(&mut clf_b, &c.clf_b);
        loglik += c.loglik;
        theta_terms += c.theta_terms;
        wass += c.wass;
    }

    // Dense part of the likelihood: -sum_d sum_k theta_dk W_bk.
    for b in 0..nb {
        let Some(cache) = caches[b].as_ref() else { continue };
        let xb = x[b];
        for k in 0..nk {
            let t = t_sum[b * nk + k];
            if t == 0.0 {
                continue;
            }
            for v in 0..nv {
                let i = k * nv + v;
                let c = scale * t * cache.w[i];
                g_logbeta[i] += c;
                if unclamped(xb * eta[i]) {
                    g_eta[i] += xb * c;
                    g_x[b] += c * eta[i];
                }
            }
        }
    }

    // theta: loss gradient w.r.t. the log-sample, then through the reparameterisation.
    let mut theta_loc_g = vec![0.0; m * nk];
    let mut theta_ls_g = vec![0.0; m * nk];
    for (i, &d) in docs.iter().enumerate() {
        for k in 0..nk {
            let g = g_theta[i * nk + k];
            theta_loc_g[i * nk + k] = g - scale;
            theta_ls_g[i * nk + k] = g * theta_sd_of(d, k) * noise.theta[i * nk + k] - scale;
        }
    }

    let mut beta_loc_g = vec![0.0; nk * nv];
    let mut beta_ls_g = vec![0.0; nk * nv];
    let beta_term = match &state.prior.beta {
        BetaPrior::Gamma(g) => {
            let cst = g.shape * g.rate.ln() - ln_gamma(g.shape);
            let mut term = 0.0;
            for i in 0..nk * nv {
                let loc = vp.beta_loc.as_slice()[i];
                let ls = vp.beta_logscale.as_slice()[i];
                term += (g.shape - 1.0) * log_beta[i] - g.rate * beta[i] + cst + loc + ls + HALF_LOG_2PI_E;
                let gs = g_logbeta[i] - ((g.shape - 1.0) - g.rate * beta[i]);
                beta_loc_g[i] = gs - 1.0;
                beta_ls_g[i] = gs * beta_sd[i] * noise.beta[i] - 1.0;
            }
            term
        }
        BetaPrior::LogNormal { loc: prior_loc, scale: s0 } => gaussian_kl_part(
            vp.beta_loc.as_slice(),
            vp.beta_logscale.as_slice(),
            &beta_sd,
            &noise.beta,
            &g_logbeta,
            prior_loc.as_slice(),
            *s0,
            &mut beta_loc_g,
            &mut beta_ls_g,
        ),
    };

    let mut eta_loc_g = vec![0.0; nk * nv];
    let mut eta_ls_g = vec![0.0; nk * nv];
    let eta_term = gaussian_prior_part(
        vp.eta_loc.as_slice(),
        vp.eta_logscale.as_slice(),
        &eta_sd,
        &noise.eta,
        &g_eta,
        &state.prior.eta,
        &mut eta_loc_g,
        &mut eta_ls_g,
    );
    let mut x_loc_g = vec![0.0; nb];
    let mut x_ls_g = vec![0.0; nb];
    let x_term = gaussian_prior_part(
        &vp.x_loc,
        &vp.x_logscale,
        &x_sd,
        &noise.x,
        &g_x,
        &state.prior.x,
        &mut x_loc_g,
        &mut x_ls_g,
    );

    let terms = ElboTerms {
        log_likelihood: scale * loglik,
        theta: scale * theta_terms,
        beta: beta_term,
        eta: eta_term,
        x: x_term,
    };
    let elbo = terms.total();
    let wass_loss = if opts.supervised { wass * inv_m } else { 0.0 };
    Ok(Evaluation {
        loss: -elbo + wass_loss,
        elbo,
        terms,
        wasserstein: wass,
        grad: Gradient {
            theta_rows: docs.to_vec(),
            theta_loc: theta_loc_g,
            theta_logscale: theta_ls_g,
            beta_loc: beta_loc_g,
            beta_logscale: beta_ls_g,
            eta_loc: eta_loc_g,
            eta_logscale: eta_ls_g,
            x_loc: x_loc_g,
            x_logscale: x_ls_g,
            clf_weights: clf_w,
            clf_bias: clf_b,
        },
        clamped,
    })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// `-KL(q || prior)` for diagonal Gaussians; writes loss gradients given the
/// loss gradient `g_sample` w.r.t. the reparameterised sample.
fn gaussian_prior_part(
    loc: &[f64],
    logscale: &[f64],
    sd: &[f64],
    eps: &[f64],
    g_sample: &[f64],
    prior: &GaussianPrior,
    loc_g: &mut [f64],
    ls_g: &mut [f64],
) -> f64 {
    gaussian_kl_part(loc, logscale, sd, eps, g_sample, &prior.mean, prior.scale, loc_g, ls_g)
}

#[allow(clippy::too_many_arguments)]
fn gaussian_kl_part(
    loc: &[f64],
    logscale: &[f64],
    sd: &[f64],
    eps: &[f64],
    g_sample: &[f64],
    prior_mean: &[f64],
    prior_sd: f64,
    loc_g: &mut [f64],
    ls_g: &mut [f64],
) -> f64 {
    let inv_var0 = 1.0 / (prior_sd * prior_sd);
    let ln_s0 = prior_sd.ln();
    let mut neg_kl = 0.0;
    for i in 0..loc.len() {
        let diff = loc[i] - prior_mean[i];
        let var = sd[i] * sd[i];
        neg_kl -= ln_s0 - logscale[i] + 0.5 * (var + diff * diff) * inv_var0 - 0.5;
        loc_g[i] = g_sample[i] + diff * inv_var0;
        ls_g[i] = g_sample[i] * sd[i] * eps[i] + var * inv_var0 - 1.0;
    }
    neg_kl
}

fn draw_noise<R: Rng + ?Sized>(state: &BTMState, batch: usize, rng: &mut R) -> Noise {
    let vp = &state.vp;
    Noise::draw(rng, batch, vp.topics(), vp.vocab(), vp.brands())
}

/// Single-sample ELBO estimate and its gradient (w.r.t. the variational
/// parameters; classifier entries are zero). Fails on a non-finite estimate,
/// naming the offending term.
pub fn elbo_estimate<R: Rng + ?Sized>(
    state: &BTMState,
    data: &SliceData,
    docs: &[usize],
    rng: &mut R,
) -> Result<(f64, Gradient)> {
    let noise = draw_noise(state, docs.len(), rng);
    let opts = ObjectiveOptions {
        supervised: false,
        ..ObjectiveOptions::default()
    };
    let mut ev = evaluate(state, data, docs, &noise, &opts)?;
    if let Some(term) = ev.terms.first_non_finite() {
        return Err(DbtmError::NonFinite(format!("ELBO term `{term}`")));
    }
    ev.grad.negate();
    Ok((ev.elbo, ev.grad))
}

/// Full training loss with fresh noise from `rng`.
pub fn total_loss<R: Rng + ?Sized>(
    state: &BTMState,
    data: &SliceData,
    docs: &[usize],
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<Evaluation> {
    let noise = draw_noise(state, docs.len(), rng);
    let ev = evaluate(state, data, docs, &noise, opts)?;
    if let Some(term) = ev.terms.first_non_finite() {
        return Err(DbtmError::NonFinite(format!("ELBO term `{term}`")));
    }
    if !ev.wasserstein.is_finite() {
        return Err(DbtmError::NonFinite("Wasserstein term".into()));
    }
    Ok(ev)
}
