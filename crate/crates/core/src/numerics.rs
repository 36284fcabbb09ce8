//! Deterministic numerical kernels shared by training, the meta-controller
//! and evaluation: rank statistics, the Fisher-z test behind the meta weight,
//! the ordinal Wasserstein distance, relaxed categorical sampling and a
//! central-difference gradient checker.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{DbtmError, Result};

/// Lower bound of the meta interpolation weight.
pub const GAMMA_FLOOR: f64 = 0.05;

/// Correlations at or beyond this magnitude are pulled back before `atanh`.
const RHO_CLAMP: f64 = 1.0 - 1e-6;

/// Average (fractional) ranks, 1-based; tied values share the mean of the
/// positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their average
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Scores of the brands in a ranking together with their average ranks.
/// Brands are identified by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrandRanking {
    pub scores: Vec<f64>,
    pub ranks: Vec<f64>,
}

impl BrandRanking {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let ranks = average_ranks(&scores);
        BrandRanking { scores, ranks }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Pearson correlation of two equally long vectors; `None` when either has
/// zero variance.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return None;
    }
    Some((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation, computed as the Pearson correlation of the
/// two average-rank vectors so that ties are handled.
pub fn spearman_rank_correlation(predicted: &BrandRanking, truth: &BrandRanking) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(DbtmError::Shape(format!(
            "rankings over {} and {} brands",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(DbtmError::Domain(format!(
            "Spearman correlation needs at least 2 brands, got {}",
            predicted.len()
        )));
    }
    pearson(&predicted.ranks, &truth.ranks)
        .ok_or_else(|| DbtmError::Degenerate("constant rank vector".into()))
}

/// Spearman correlation directly from two score vectors.
pub fn spearman_from_scores(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    spearman_rank_correlation(
        &BrandRanking::from_scores(predicted.to_vec()),
        &BrandRanking::from_scores(truth.to_vec()),
    )
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Where the Fisher-z distribution of the current correlation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherPoint {
    /// Evaluate at `atanh(rho_ref)`, comparing both correlations on the z scale.
    #[default]
    FisherZ,
    /// Evaluate at the raw reference correlation.
    Raw,
}

fn clamp_rho(rho: f64, what: &str) -> Result<f64> {
    if !rho.is_finite() {
        return Err(DbtmError::Domain(format!("{what} is not finite")));
    }
    if rho.abs() > 1.0 {
        return Err(DbtmError::Domain(format!("{what} = {rho} outside [-1, 1]")));
    }
    if rho.abs() >= RHO_CLAMP {
        log::warn!("{what} = {rho} clamped to ±{RHO_CLAMP} before Fisher transform");
        return Ok(rho.signum() * RHO_CLAMP);
    }
    Ok(rho)
}

/// `Pr(z <= point)` where `z ~ N(atanh(rho_current), 1/(B-3))`.
///
/// Small values mean the current correlation is well above the reference.
pub fn fisher_z_cdf(rho_current: f64, rho_ref: f64, brands: usize, point: FisherPoint) -> Result<f64> {
    if brands < 4 {
        return Err(DbtmError::Domain(format!(
            "Fisher z test needs at least 4 brands, got {brands}"
        )));
    }
    let current = clamp_rho(rho_current, "current correlation")?;
    let reference = clamp_rho(rho_ref, "reference correlation")?;
    let mean = current.atanh();
    let sd = 1.0 / ((brands - 3) as f64).sqrt();
    let at = match point {
        FisherPoint::FisherZ => reference.atanh(),
        FisherPoint::Raw => reference,
    };
    Ok(normal_cdf((at - mean) / sd))
}

/// Meta interpolation weight: the test probability floored at 0.05.
pub fn gamma_weight(prob: f64) -> f64 {
    prob.max(GAMMA_FLOOR)
}

/// Probability vector over the ordered classes (negative, neutral, positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: [f64; 3],
}

impl ClassDistribution {
    /// Validates a distribution; sums within 1% of one are renormalised with
    /// a warning.
    pub fn new(probs: [f64; 3]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DbtmError::Domain(format!(
                "class probabilities must be finite and nonnegative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() <= 1e-9 {
            return Ok(ClassDistribution { probs });
        }
        if (0.99..=1.01).contains(&sum) {
            log::warn!("class distribution sums to {sum}; renormalising");
            return Ok(ClassDistribution {
                probs: probs.map(|p| p / sum),
            });
        }
        Err(DbtmError::Domain(format!(
            "class distribution sums to {sum}"
        )))
    }

    pub fn one_hot(class: usize) -> Self {
        let mut probs = [0.0; 3];
        probs[class] = 1.0;
        ClassDistribution { probs }
    }
}

/// W1 between two distributions on the class line {0, 1, 2} with unit spacing.
pub fn wasserstein_1d(p: &ClassDistribution, q: &ClassDistribution) -> f64 {
    wasserstein_3(&p.probs, &q.probs)
}

#[inline]
pub(crate) fn wasserstein_3(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let f0 = p[0] - q[0];
    let f1 = f0 + p[1] - q[1];
    f0.abs() + f1.abs()
}

/// Relaxed one-hot sampler for fixed logits and temperature.
///
/// A draw is `softmax((logits + g) / tau)` with `g` i.i.d. standard Gumbel.
/// Writing `g = -ln e` with `e ~ Exp(1)` turns the draw into
/// `w_v * e_v^(-1/tau)` normalised, where `w_v = exp((l_v - max l) / tau)`
/// is fixed per sampler; no logarithm is needed per draw.
#[derive(Debug, Clone)]
pub struct RelaxedCategorical {
    weights: Vec<f64>,
    log_weights: Option<Vec<f64>>,
    inv_tau: f64,
}

// Above this inverse temperature the power form risks overflow.
const FAST_INV_TAU: f64 = 2.0;

impl RelaxedCategorical {
    pub fn from_logits(logits: &[f64], tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(DbtmError::Domain("logits must be finite and nonempty".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let inv_tau = 1.0 / tau;
        let log_weights: Vec<f64> = logits.iter().map(|l| (l - max) * inv_tau).collect();
        Ok(Self::from_log_weights(log_weights, inv_tau))
    }

    /// Sampler over `log(rates)` without taking logarithms on the fast path.
    pub fn from_rates(rates: &[f64], tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if rates.is_empty() || rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(DbtmError::Domain("rates must be positive and finite".into()));
        }
        let max = rates.iter().copied().fold(0.0, f64::max);
        let inv_tau = 1.0 / tau;
        if inv_tau > FAST_INV_TAU {
            let log_weights = rates.iter().map(|r| (r / max).ln() * inv_tau).collect();
            return Ok(Self::from_log_weights(log_weights, inv_tau));
        }
        let weights = if inv_tau == 2.0 {
            rates.iter().map(|r| (r / max) * (r / max)).collect()
        } else if inv_tau == 1.0 {
            rates.iter().map(|r| r / max).collect()
        } else {
            rates.iter().map(|r| (r / max).powf(inv_tau)).collect()
        };
        Ok(RelaxedCategorical {
            weights,
            log_weights: None,
            inv_tau,
        })
    }

    fn from_log_weights(log_weights: Vec<f64>, inv_tau: f64) -> Self {
        if inv_tau > FAST_INV_TAU {
            RelaxedCategorical {
                weights: Vec::new(),
                log_weights: Some(log_weights),
                inv_tau,
            }
        } else {
            RelaxedCategorical {
                weights: log_weights.iter().map(|w| w.exp()).collect(),
                log_weights: None,
                inv_tau,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights
            .as_ref()
            .map_or(self.weights.len(), |w| w.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inv_tau(&self) -> f64 {
        self.inv_tau
    }

    /// Writes one relaxed draw into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        match &self.log_weights {
            None => {
                let mut sum = 0.0;
                if self.inv_tau == 2.0 {
                    for (o, &w) in out.iter_mut().zip(&self.weights) {
                        let e: f64 = rng.sample::<f64, _>(Exp1).max(1e-150);
                        let x = w / (e * e);
                        *o = x;
                        sum += x;
                    }
                } else if self.inv_tau == 1.0 {
                    for (o, &w) in out.iter_mut().zip(&self.weights) {
                        let e: f64 = rng.sample::<f64, _>(Exp1).max(1e-300);
                        let x = w / e;
                        *o = x;
                        sum += x;
                    }
                } else {
                    for (o, &w) in out.iter_mut().zip(&self.weights) {
                        let e: f64 = rng.sample::<f64, _>(Exp1).max(1e-150);
                        let x = w * e.powf(-self.inv_tau);
                        *o = x;
                        sum += x;
                    }
                }
                let inv = 1.0 / sum;
                out.iter_mut().for_each(|o| *o *= inv);
            }
            Some(lw) => {
                let mut max = f64::NEG_INFINITY;
                for (o, &w) in out.iter_mut().zip(lw) {
                    let e: f64 = rng.sample::<f64, _>(Exp1).max(f64::MIN_POSITIVE);
                    let a = w - self.inv_tau * e.ln();
                    *o = a;
                    max = max.max(a);
                }
                let mut sum = 0.0;
                for o in out.iter_mut() {
                    *o = (*o - max).exp();
                    sum += *o;
                }
                let inv = 1.0 / sum;
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.sample_into(rng, &mut out);
        out
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(DbtmError::Domain(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// One Gumbel-softmax draw: `softmax((logits + g) / tau)`.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    Ok(RelaxedCategorical::from_logits(logits, tau)?.sample(rng))
}

/// Compares the analytic gradient returned by `loss` against central
/// differences and returns the largest relative error
/// `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)` over all coordinates.
pub fn finite_difference_check<F>(mut loss: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(DbtmError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let (value, analytic) = loss(params);
    if !value.is_finite() {
        return Err(DbtmError::NonFinite("loss at the base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(DbtmError::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let (up, _) = loss(&probe);
        probe[i] = params[i] - epsilon;
        let (down, _) = loss(&probe);
        probe[i] = params[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(DbtmError::NonFinite(format!("loss around coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// SplitMix64 finaliser used to derive independent stream seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        let r = average_ranks(&[1.0, 1.0, 1.0]);
        assert_eq!(r, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn spearman_examples() {
        let a = BrandRanking::from_scores(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spearman_rank_correlation(&a, &a).unwrap(), 1.0);
        let rev = BrandRanking::from_scores(vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(spearman_rank_correlation(&a, &rev).unwrap(), -1.0);
        // 1 - 6 * 2 / (4 * 15)
        let swapped = BrandRanking::from_scores(vec![1.0, 2.0, 4.0, 3.0]);
        let rho = spearman_rank_correlation(&a, &swapped).unwrap();
        assert!((rho - 0.8).abs() < 1e-15);
    }

    #[test]
    fn spearman_errors() {
        let a = BrandRanking::from_scores(vec![1.0, 2.0, 3.0]);
        let flat = BrandRanking::from_scores(vec![2.0, 2.0, 2.0]);
        assert!(matches!(
            spearman_rank_correlation(&a, &flat),
            Err(DbtmError::Degenerate(_))
        ));
        let short = BrandRanking::from_scores(vec![1.0, 2.0]);
        assert!(matches!(
            spearman_rank_correlation(&a, &short),
            Err(DbtmError::Shape(_))
        ));
        let one = BrandRanking::from_scores(vec![1.0]);
        assert!(spearman_rank_correlation(&one, &one).is_err());
    }

    #[test]
    fn fisher_examples() {
        let p = fisher_z_cdf(0.0, 0.0, 25, FisherPoint::FisherZ).unwrap();
        assert_eq!(p, 0.5);
        let tiny = fisher_z_cdf(0.9, 0.0, 25, FisherPoint::FisherZ).unwrap();
        let huge = fisher_z_cdf(0.0, 0.9, 25, FisherPoint::FisherZ).unwrap();
        assert!(tiny < 1e-11 && tiny > 0.0);
        assert!((1.0 - huge) < 1e-11);
        assert!(fisher_z_cdf(0.1, 0.1, 3, FisherPoint::FisherZ).is_err());
        // |rho| = 1 is clamped rather than rejected
        let clamped = fisher_z_cdf(1.0, 0.5, 10, FisherPoint::FisherZ).unwrap();
        assert!(clamped < 1e-6);
    }

    #[test]
    fn raw_point_agrees_at_zero() {
        let a = fisher_z_cdf(0.3, 0.0, 12, FisherPoint::FisherZ).unwrap();
        let b = fisher_z_cdf(0.3, 0.0, 12, FisherPoint::Raw).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_weight(0.01), 0.05);
        assert_eq!(gamma_weight(0.5), 0.5);
        assert_eq!(gamma_weight(0.95), 0.95);
    }

    #[test]
    fn wasserstein_examples() {
        let a = ClassDistribution::one_hot(0);
        let b = ClassDistribution::one_hot(1);
        let c = ClassDistribution::one_hot(2);
        assert_eq!(wasserstein_1d(&a, &a), 0.0);
        assert_eq!(wasserstein_1d(&a, &c), 2.0);
        assert_eq!(wasserstein_1d(&a, &b), 1.0);
    }

    #[test]
    fn class_distribution_validation() {
        let d = ClassDistribution::new([0.5, 0.3, 0.205]).unwrap();
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ClassDistribution::new([0.5, 0.5, 0.5]).is_err());
        assert!(ClassDistribution::new([-0.1, 0.6, 0.5]).is_err());
    }

    #[test]
    fn gumbel_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flat = gumbel_softmax_sample(&[0.0; 5], 1e4, &mut rng).unwrap();
        for p in &flat {
            assert!((p - 0.2).abs() < 1e-3);
        }
        let peaked = gumbel_softmax_sample(&[50.0, 0.0, 0.0, 0.0], 0.5, &mut rng).unwrap();
        assert!(peaked[0] > 1.0 - 1e-9);

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let logits = [0.3, -1.0, 2.0];
        assert_eq!(
            gumbel_softmax_sample(&logits, 0.7, &mut r1).unwrap(),
            gumbel_softmax_sample(&logits, 0.7, &mut r2).unwrap()
        );
        assert!(gumbel_softmax_sample(&logits, 0.0, &mut r1).is_err());
    }

    #[test]
    fn rates_and_logits_paths_agree() {
        let rates = [0.5, 2.0, 0.01, 7.0];
        let logits: Vec<f64> = rates.iter().map(|r: &f64| r.ln()).collect();
        for tau in [0.5, 1.0, 0.8, 0.2] {
            let a = RelaxedCategorical::from_rates(&rates, tau).unwrap();
            let b = RelaxedCategorical::from_logits(&logits, tau).unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(3);
            let mut r2 = ChaCha8Rng::seed_from_u64(3);
            let (x, y) = (a.sample(&mut r1), b.sample(&mut r2));
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() < 1e-12, "tau {tau}: {x:?} vs {y:?}");
            }
        }
    }

    #[test]
    fn gumbel_argmax_frequencies_follow_softmax() {
        // Gumbel-max: argmax of the relaxed draw is distributed as softmax(logits).
        let logits = [1.0, 0.0, -0.5, 0.7];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let sampler = RelaxedCategorical::from_logits(&logits, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 20_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let s = sampler.sample(&mut rng);
            let arg = (0..4).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            counts[arg] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square with 3 dof, 99.9% quantile
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn finite_difference_examples() {
        let quad = |p: &[f64]| (p.iter().map(|x| x * x).sum(), p.iter().map(|x| 2.0 * x).collect());
        let err = finite_difference_check(quad, &[1.0, 2.0], 1e-5).unwrap();
        assert!(err < 1e-7);

        let wrong = |p: &[f64]| (p.iter().map(|x| x * x).sum(), p.iter().map(|x| 4.0 * x).collect());
        let err = finite_difference_check(wrong, &[1.0, 2.0], 1e-5).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-6);

        assert!(finite_difference_check(quad, &[1.0], 0.0).is_err());
        let nan = |_: &[f64]| (f64::NAN, vec![0.0]);
        assert!(matches!(
            finite_difference_check(nan, &[1.0], 1e-5),
            Err(DbtmError::NonFinite(_))
        ));
    }

    proptest! {
        #[test]
        fn spearman_bounded_and_rank_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 3..20),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            if let Ok(rho) = spearman_from_scores(&xs, &ys) {
                prop_assert!((-1.0..=1.0).contains(&rho));
                let transformed: Vec<f64> = xs.iter().map(|x| (x * 0.7).exp() + 3.0).collect();
                let rho2 = spearman_from_scores(&transformed, &ys).unwrap();
                prop_assert_eq!(rho, rho2);
            }
        }

        #[test]
        fn ranks_sum_to_triangle_number(xs in prop::collection::vec(-3i32..3, 1..30)) {
            let vals: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
            let n = vals.len() as f64;
            let total: f64 = average_ranks(&vals).iter().sum();
            prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn fisher_monotone(a in -0.9f64..0.9, b in -0.9f64..0.9, d in 0.01f64..0.05, brands in 4usize..60) {
            let base = fisher_z_cdf(a, b, brands, FisherPoint::FisherZ).unwrap();
            let higher_current = fisher_z_cdf(a + d, b, brands, FisherPoint::FisherZ).unwrap();
            let higher_ref = fisher_z_cdf(a, b + d, brands, FisherPoint::FisherZ).unwrap();
            prop_assert!(higher_current <= base);
            prop_assert!(higher_ref >= base);
            prop_assert!((fisher_z_cdf(a, a, brands, FisherPoint::FisherZ).unwrap() - 0.5).abs() < 1e-15);
        }

        #[test]
        fn gamma_weight_image(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let g = gamma_weight(p);
            prop_assert!((GAMMA_FLOOR..=1.0).contains(&g));
            if p <= q {
                prop_assert!(g <= gamma_weight(q));
            }
        }

        #[test]
        fn gumbel_output_is_distribution(
            logits in prop::collection::vec(-20.0f64..20.0, 1..30),
            tau in 0.05f64..5.0,
            seed in 0u64..100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = gumbel_softmax_sample(&logits, tau, &mut rng).unwrap();
            prop_assert!(s.iter().all(|p| *p >= 0.0 && p.is_finite()));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
