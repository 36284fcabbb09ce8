//! Poisson factorisation fitted by coordinate-ascent variational inference.
//!
//! `c_dv ~ Poisson(sum_k theta_dk beta_kv)` with Gamma priors on both
//! factors and Gamma variational posteriors. Multinomial auxiliary
//! responsibilities are only formed at nonzero counts; zero entries enter
//! through the rate sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::corpus::CountMatrix;
use crate::error::{DbtmError, Result};
use crate::matrix::Matrix;
use crate::parallel::map_chunks;

/// Gamma shape/rate hyperparameters: `(a, b)` for theta, `(c, d)` for beta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PFPriors {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for PFPriors {
    fn default() -> Self {
        PFPriors {
            a: 0.3,
            b: 0.3,
            c: 0.3,
            d: 0.3,
        }
    }
}

impl PFPriors {
    pub fn validate(&self) -> Result<()> {
        if [self.a, self.b, self.c, self.d].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(DbtmError::Domain(format!("Gamma hyperparameters must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaviConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for CaviConfig {
    fn default() -> Self {
        CaviConfig {
            max_iters: 200,
            rel_tol: 1e-4,
            seed: 0,
        }
    }
}

/// Gamma variational parameters of both factors and the ELBO after each
/// iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFState {
    pub theta_shape: Matrix,
    pub theta_rate: Matrix,
    pub beta_shape: Matrix,
    pub beta_rate: Matrix,
    pub priors: PFPriors,
    pub elbo_trace: Vec<f64>,
}

impl PFState {
    pub fn topics(&self) -> usize {
        self.beta_shape.rows()
    }

    pub fn theta_means(&self) -> Matrix {
        self.theta_shape
            .zip_map(&self.theta_rate, |s, r| s / r)
            .expect("theta shape and rate share dimensions")
    }

    pub fn beta_means(&self) -> Matrix {
        pf_topics(self)
    }
}

/// `E[beta_kv] = shape / rate`.
pub fn pf_topics(state: &PFState) -> Matrix {
    state
        .beta_shape
        .zip_map(&state.beta_rate, |s, r| s / r)
        .expect("beta shape and rate share dimensions")
}

const DOC_CHUNK: usize = 256;

fn expected_logs(shape: &Matrix, rate: &Matrix) -> Matrix {
    shape.zip_map(rate, |s, r| digamma(s) - r.ln()).expect("same shape")
}

/// `E_q[log p(x)] - E_q[log q(x)]` for a Gamma(shape0, rate0) prior and a
/// Gamma(shape, rate) posterior factor.
fn gamma_prior_minus_entropy_term(shape0: f64, rate0: f64, shape: f64, rate: f64) -> f64 {
    let e = shape / rate;
    let elog = digamma(shape) - rate.ln();
    let log_p = shape0 * rate0.ln() - ln_gamma(shape0) + (shape0 - 1.0) * elog - rate0 * e;
    let log_q = shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * elog - rate * e;
    log_p - log_q
}

#[inline]
fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Evidence lower bound at the optimal responsibilities for the current
/// Gamma factors.
pub fn pf_elbo(state: &PFState, counts: &CountMatrix) -> f64 {
    let k = state.topics();
    let p = state.priors;
    let elog_theta = expected_logs(&state.theta_shape, &state.theta_rate);
    let elog_beta = expected_logs(&state.beta_shape, &state.beta_rate);
    let beta_mean = pf_topics(state);
    let beta_row_sums: Vec<f64> = (0..k).map(|t| beta_mean.row(t).iter().sum()).collect();

    let partials = map_chunks(counts.rows(), DOC_CHUNK, |range| {
        let mut acc = 0.0;
        let mut buf = vec![0.0; k];
        for d in range {
            let (idx, cnt) = counts.row(d);
            let et = elog_theta.row(d);
            for (&v, &c) in idx.iter().zip(cnt) {
                for t in 0..k {
                    buf[t] = et[t] + elog_beta.get(t, v as usize);
                }
                let c = c as f64;
                acc += c * log_sum_exp(&buf) - ln_gamma(c + 1.0);
            }
            for t in 0..k {
                let e_theta = state.theta_shape.get(d, t) / state.theta_rate.get(d, t);
                acc -= e_theta * beta_row_sums[t];
                acc += gamma_prior_minus_entropy_term(p.a, p.b, state.theta_shape.get(d, t), state.theta_rate.get(d, t));
            }
        }
        acc
    });
    let mut total: f64 = partials.into_iter().sum();
    for (s, r) in state.beta_shape.as_slice().iter().zip(state.beta_rate.as_slice()) {
        total += gamma_prior_minus_entropy_term(p.c, p.d, *s, *r);
    }
    total
}

/// Cold-start CAVI fit.
pub fn cavi_fit(counts: &CountMatrix, k: usize, priors: PFPriors, config: &CaviConfig) -> Result<PFState> {
    cavi_fit_warm(counts, k, priors, config, None)
}

/// CAVI fit whose topic factor optionally starts at the supplied K x V means,
/// which keeps topic identities aligned with an earlier fit.
pub fn cavi_fit_warm(
    counts: &CountMatrix,
    k: usize,
    priors: PFPriors,
    config: &CaviConfig,
    beta_init: Option<&Matrix>,
) -> Result<PFState> {
    priors.validate()?;
    let (docs, vocab) = (counts.rows(), counts.cols());
    if k == 0 {
        return Err(DbtmError::Domain("topic count must be at least 1".into()));
    }
    if docs == 0 || vocab == 0 {
        return Err(DbtmError::Domain("count matrix is empty".into()));
    }
    if k > vocab || k > docs {
        log::warn!("K = {k} exceeds the vocabulary ({vocab}) or document count ({docs})");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mean_cell = (counts.total() as f64 / (docs * vocab) as f64).max(1e-6);
    let scale = (mean_cell / k as f64).sqrt();

    let theta_rate = Matrix::filled(docs, k, priors.b + 1.0);
    let theta_shape = Matrix::from_fn(docs, k, |_, _| priors.a + (priors.b + 1.0) * scale * rng.random_range(0.5..1.5));
    let (beta_shape, beta_rate) = match beta_init {
        Some(init) => {
            if init.shape() != (k, vocab) {
                return Err(DbtmError::Shape(format!(
                    "warm-start topics {:?}, expected ({k}, {vocab})",
                    init.shape()
                )));
            }
            let concentration = 1.0 + priors.c;
            let shape = Matrix::filled(k, vocab, concentration);
            let rate = init.map(|m| concentration / m.max(1e-12));
            (shape, rate)
        }
        None => {
            let rate = Matrix::filled(k, vocab, priors.d + 1.0);
            let shape = Matrix::from_fn(k, vocab, |_, _| priors.c + (priors.d + 1.0) * scale * rng.random_range(0.5..1.5));
            (shape, rate)
        }
    };

    let mut state = PFState {
        theta_shape,
        theta_rate,
        beta_shape,
        beta_rate,
        priors,
        elbo_trace: Vec::new(),
    };

    let mut previous = f64::NEG_INFINITY;
    for iter in 0..config.max_iters {
        cavi_iteration(&mut state, counts);
        let elbo = pf_elbo(&state, counts);
        if !elbo.is_finite() {
            return Err(DbtmError::NonFinite(format!("Poisson factorisation ELBO at iteration {iter}")));
        }
        state.elbo_trace.push(elbo);
        if previous.is_finite() && ((elbo - previous) / previous.abs().max(1e-300)).abs() < config.rel_tol {
            break;
        }
        previous = elbo;
    }
    Ok(state)
}

/// One sweep: responsibilities, then theta, then beta, all from the same
/// responsibilities.
fn cavi_iteration(state: &mut PFState, counts: &CountMatrix) {
    let k = state.topics();
    let vocab = counts.cols();
    let p = state.priors;
    let elog_theta = expected_logs(&state.theta_shape, &state.theta_rate);
    let elog_beta = expected_logs(&state.beta_shape, &state.beta_rate);
    let beta_mean = pf_topics(state);
    let beta_row_sums: Vec<f64> = (0..k).map(|t| beta_mean.row(t).iter().sum()).collect();

    struct Partial {
        start: usize,
        theta_shape: Vec<f64>,
        beta_shape: Vec<f64>,
    }

    let partials = map_chunks(counts.rows(), DOC_CHUNK, |range| {
        let mut part = Partial {
            start: range.start,
            theta_shape: vec![0.0; range.len() * k],
            beta_shape: vec![0.0; k * vocab],
        };
        let mut phi = vec![0.0; k];
        for d in range.clone() {
            let et = elog_theta.row(d);
            let row = &mut part.theta_shape[(d - range.start) * k..(d - range.start + 1) * k];
            let (idx, cnt) = counts.row(d);
            for (&v, &c) in idx.iter().zip(cnt) {
                let v = v as usize;
                let mut max = f64::NEG_INFINITY;
                for t in 0..k {
                    phi[t] = et[t] + elog_beta.get(t, v);
                    max = max.max(phi[t]);
                }
                let mut sum = 0.0;
                for x in phi.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                let scale = c as f64 / sum;
                for t in 0..k {
                    let w = phi[t] * scale;
                    row[t] += w;
                    part.beta_shape[t * vocab + v] += w;
                }
            }
        }
        part
    });

    let mut beta_shape = vec![p.c; k * vocab];
    for part in &partials {
        let rows = part.theta_shape.len() / k;
        for r in 0..rows {
            let d = part.start + r;
            for t in 0..k {
                state.theta_shape.set(d, t, p.a + part.theta_shape[r * k + t]);
                state.theta_rate.set(d, t, p.b + beta_row_sums[t]);
            }
        }
        for (acc, x) in beta_shape.iter_mut().zip(&part.beta_shape) {
            *acc += x;
        }
    }

    let mut theta_col_sums = vec![0.0; k];
    for d in 0..counts.rows() {
        for (t, s) in theta_col_sums.iter_mut().enumerate() {
            *s += state.theta_shape.get(d, t) / state.theta_rate.get(d, t);
        }
    }
    state.beta_shape = Matrix::from_vec(k, vocab, beta_shape).expect("k x vocab buffer");
    for t in 0..k {
        let rate = p.d + theta_col_sums[t];
        state.beta_rate.row_mut(t).iter_mut().for_each(|r| *r = rate);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Poisson};

    fn block_matrix(seed: u64) -> (CountMatrix, Vec<usize>) {
        // docs 0..40 use words 0..10, docs 40..80 words 10..20
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pois = Poisson::new(1.5).unwrap();
        let mut dense = vec![vec![0u32; 20]; 80];
        let mut block = vec![0; 20];
        for (d, row) in dense.iter_mut().enumerate() {
            let b = d / 40;
            for v in b * 10..(b + 1) * 10 {
                row[v] = pois.sample(&mut rng) as u32;
            }
        }
        for (v, b) in block.iter_mut().enumerate() {
            *b = v / 10;
        }
        (CountMatrix::from_dense(&dense).unwrap(), block)
    }

    #[test]
    fn single_cell_product_matches_count() {
        let m = CountMatrix::from_dense(&[vec![6]]).unwrap();
        let priors = PFPriors {
            a: 0.01,
            b: 0.01,
            c: 0.01,
            d: 0.01,
        };
        let cfg = CaviConfig {
            max_iters: 2000,
            rel_tol: 1e-12,
            seed: 1,
        };
        let s = cavi_fit(&m, 1, priors, &cfg).unwrap();
        let prod = s.theta_means().get(0, 0) * s.beta_means().get(0, 0);
        assert!((5.5..=6.5).contains(&prod), "product {prod}");
    }

    #[test]
    fn all_zero_matrix_is_prior_dominated() {
        let m = CountMatrix::from_dense(&[vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        let priors = PFPriors::default();
        let s = cavi_fit(&m, 2, priors, &CaviConfig::default()).unwrap();
        // With no counts every shape collapses to its prior value.
        assert!(s.theta_shape.as_slice().iter().all(|&v| v == priors.a));
        assert!(s.beta_shape.as_slice().iter().all(|&v| v == priors.c));
        assert!(s.theta_means().all_finite() && s.beta_means().all_finite());
        assert!(s.elbo_trace.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn elbo_trace_nondecreasing() {
        let (m, _) = block_matrix(3);
        let cfg = CaviConfig {
            max_iters: 100,
            rel_tol: 0.0,
            seed: 5,
        };
        let s = cavi_fit(&m, 3, PFPriors::default(), &cfg).unwrap();
        assert_eq!(s.elbo_trace.len(), 100);
        for w in s.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn topic_means_from_shape_and_rate() {
        let s = PFState {
            theta_shape: Matrix::filled(1, 2, 1.0),
            theta_rate: Matrix::filled(1, 2, 1.0),
            beta_shape: Matrix::filled(2, 3, 2.0),
            beta_rate: Matrix::filled(2, 3, 4.0),
            priors: PFPriors::default(),
            elbo_trace: vec![],
        };
        let beta = pf_topics(&s);
        assert!(beta.as_slice().iter().all(|&b| b == 0.5));
    }

    #[test]
    fn recovers_planted_blocks() {
        let (m, block) = block_matrix(11);
        let cfg = CaviConfig {
            max_iters: 300,
            rel_tol: 1e-8,
            seed: 2,
        };
        let s = cavi_fit(&m, 2, PFPriors::default(), &cfg).unwrap();
        let beta = s.beta_means();
        for k in 0..2 {
            assert!(beta.row(k).iter().sum::<f64>() > 0.0);
        }
        let corr = |k: usize, b: usize| {
            let ind: Vec<f64> = block.iter().map(|&x| if x == b { 1.0 } else { 0.0 }).collect();
            crate::numerics::pearson(beta.row(k), &ind).unwrap()
        };
        let direct = corr(0, 0).min(corr(1, 1));
        let swapped = corr(0, 1).min(corr(1, 0));
        assert!(direct.max(swapped) > 0.9, "direct {direct}, swapped {swapped}");
    }

    #[test]
    fn reconstruction_total_close_to_observed() {
        let (m, _) = block_matrix(4);
        let cfg = CaviConfig {
            max_iters: 300,
            rel_tol: 1e-9,
            seed: 8,
        };
        let s = cavi_fit(&m, 2, PFPriors::default(), &cfg).unwrap();
        let (theta, beta) = (s.theta_means(), s.beta_means());
        let mut expected = 0.0;
        for d in 0..m.rows() {
            for k in 0..2 {
                expected += theta.get(d, k) * beta.row(k).iter().sum::<f64>();
            }
        }
        let observed = m.total() as f64;
        assert!(((expected - observed) / observed).abs() < 0.05, "{expected} vs {observed}");
    }

    #[test]
    fn converged_fit_is_local_optimum() {
        let (m, _) = block_matrix(6);
        let cfg = CaviConfig {
            max_iters: 500,
            rel_tol: 1e-12,
            seed: 3,
        };
        let s = cavi_fit(&m, 2, PFPriors::default(), &cfg).unwrap();
        let base = pf_elbo(&s, &m);
        for (d, k) in [(0, 0), (17, 1), (55, 0)] {
            for factor in [0.9, 1.1] {
                let mut p = s.clone();
                let v = p.theta_shape.get(d, k);
                p.theta_shape.set(d, k, v * factor);
                assert!(pf_elbo(&p, &m) < base);
            }
        }
        let mut p = s.clone();
        let v = p.beta_rate.get(1, 12);
        p.beta_rate.set(1, 12, v * 1.1);
        assert!(pf_elbo(&p, &m) < base);
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, _) = block_matrix(1);
        let cfg = CaviConfig {
            max_iters: 20,
            rel_tol: 0.0,
            seed: 42,
        };
        let a = cavi_fit(&m, 3, PFPriors::default(), &cfg).unwrap();
        let b = cavi_fit(&m, 3, PFPriors::default(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rate_is_gauge_invariant() {
        let (m, _) = block_matrix(2);
        let s = cavi_fit(&m, 2, PFPriors::default(), &CaviConfig::default()).unwrap();
        let (theta, beta) = (s.theta_means(), s.beta_means());
        let factor = 3.7;
        for d in [0, 45] {
            for v in [3, 14] {
                let rate: f64 = (0..2).map(|k| theta.get(d, k) * beta.get(k, v)).sum();
                let scaled: f64 = (0..2).map(|k| (theta.get(d, k) * factor) * (beta.get(k, v) / factor)).sum();
                assert!((rate - scaled).abs() < 1e-12 * rate.max(1.0));
            }
        }
    }

    #[test]
    fn warm_start_keeps_topic_order() {
        let (m, block) = block_matrix(9);
        let cfg = CaviConfig {
            max_iters: 200,
            rel_tol: 1e-8,
            seed: 4,
        };
        let init = Matrix::from_fn(2, 20, |k, v| if block[v] == k { 0.3 } else { 0.01 });
        let s = cavi_fit_warm(&m, 2, PFPriors::default(), &cfg, Some(&init)).unwrap();
        let beta = s.beta_means();
        assert!(beta.get(0, 2) > beta.get(1, 2));
        assert!(beta.get(1, 15) > beta.get(0, 15));
        let bad = Matrix::filled(3, 20, 0.1);
        assert!(cavi_fit_warm(&m, 2, PFPriors::default(), &cfg, Some(&bad)).is_err());
    }

    #[test]
    fn rejects_empty_and_bad_priors() {
        let m = CountMatrix::empty(4);
        assert!(cavi_fit(&m, 2, PFPriors::default(), &CaviConfig::default()).is_err());
        let m = CountMatrix::from_dense(&[vec![1, 2]]).unwrap();
        let bad = PFPriors { a: 0.0, ..PFPriors::default() };
        assert!(cavi_fit(&m, 1, bad, &CaviConfig::default()).is_err());
    }
}
