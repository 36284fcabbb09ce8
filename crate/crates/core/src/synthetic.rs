//! Synthetic data drawn from the model itself, with planted brand polarity
//! trajectories. Used by the test suites, the CLI demo command and the
//! browser demo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::btm::{BTMState, BetaPrior, PriorSpec, INIT_LOGSCALE};
use crate::corpus::{CountMatrix, ReviewRecord, SliceData};
use crate::dynamics::SliceSplit;
use crate::error::{DbtmError, Result};
use crate::matrix::Matrix;
use crate::numerics::mix_seed;
use crate::pf::PFPriors;

/// A small random model state and matching data, with scales perturbed away
/// from their initial values. Meant for gradient and invariance checks.
pub fn random_instance(
    docs: usize,
    vocab: usize,
    topics: usize,
    brands: usize,
    lognormal_beta_prior: bool,
    seed: u64,
) -> Result<(BTMState, SliceData)> {
    if docs == 0 || vocab == 0 || topics == 0 || brands == 0 {
        return Err(DbtmError::Domain("all dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unif = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let theta = Matrix::from_fn(docs, topics, |_, _| unif(0.3, 2.0));
    let beta = Matrix::from_fn(topics, vocab, |_, _| unif(0.05, 1.0));
    let mut prior = PriorSpec::initial(PFPriors::default(), topics, vocab, brands, 1.0);
    if lognormal_beta_prior {
        prior.beta = BetaPrior::LogNormal {
            loc: Matrix::from_fn(topics, vocab, |_, _| unif(-2.0, 0.0)),
            scale: 0.3,
        };
        prior.eta.mean = (0..topics * vocab).map(|_| unif(-0.5, 0.5)).collect();
        prior.eta.scale = 0.4;
        prior.x.mean = (0..brands).map(|_| unif(-0.5, 0.5)).collect();
        prior.x.scale = 0.5;
    }
    let mut state = BTMState::from_parts(&theta, &beta, prior, brands, None, 0.01, mix_seed(seed, 1))?;
    let vp = &mut state.vp;
    for m in [&mut vp.theta_logscale, &mut vp.beta_logscale, &mut vp.eta_logscale] {
        m.as_mut_slice().iter_mut().for_each(|v| *v = INIT_LOGSCALE + unif(-0.5, 0.5));
    }
    vp.x_logscale.iter_mut().for_each(|v| *v = INIT_LOGSCALE + unif(-0.5, 0.5));
    state
        .clf
        .weights
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = unif(-1.0, 1.0));
    state.clf.bias.iter_mut().for_each(|v| *v = unif(-0.5, 0.5));

    let rows: Vec<Vec<(usize, u32)>> = (0..docs)
        .map(|_| {
            let mut row: Vec<(usize, u32)> = (0..vocab)
                .filter_map(|v| {
                    let c = rng.random_range(0..4u32);
                    (c > 0).then_some((v, c))
                })
                .collect();
            if row.is_empty() {
                row.push((rng.random_range(0..vocab), 1));
            }
            row
        })
        .collect();
    let counts = CountMatrix::from_rows(vocab, &rows)?;
    let brand_ids = (0..docs).map(|d| d % brands).collect();
    let ratings = (0..docs).map(|_| rng.random_range(1..=5u8)).collect();
    let data = SliceData::new(counts, brand_ids, ratings, brands)?;
    Ok((state, data))
}

/// Parameters of a synthetic review stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub brands: usize,
    pub slices: usize,
    /// Training documents per slice, spread evenly over brands.
    pub docs_per_slice: usize,
    pub validation_docs: usize,
    pub test_docs: usize,
    pub vocab: usize,
    pub topics: usize,
    /// Content words per topic.
    pub topic_words: usize,
    /// Size of each of the two polarity word blocks; word `i` of a block
    /// belongs to topic `i mod K`.
    pub polarity_words: usize,
    /// Share of content words replaced by unseen words at each new slice.
    pub topic_turnover: f64,
    /// Share of each polarity block replaced at each new slice.
    pub polarity_turnover: f64,
    /// Expected tokens per document at zero polarity.
    pub mean_length: f64,
    /// `|eta|` on polarity words.
    pub eta_strength: f64,
    /// Share of each topic's mass on its polarity words.
    pub polarity_mass: f64,
    /// Noise added to the brand score when drawing a rating.
    pub rating_noise: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            brands: 8,
            slices: 5,
            docs_per_slice: 2000,
            validation_docs: 400,
            test_docs: 1000,
            vocab: 500,
            topics: 10,
            topic_words: 20,
            polarity_words: 20,
            topic_turnover: 0.15,
            polarity_turnover: 0.5,
            mean_length: 30.0,
            eta_strength: 1.5,
            polarity_mass: 0.3,
            rating_noise: 0.4,
            seed: 0,
        }
    }
}

impl StreamSpec {
    fn replaced_per_slice(&self) -> (usize, usize) {
        let content = (self.topic_turnover * self.topic_words as f64).round() as usize;
        let polar = (self.polarity_turnover * self.polarity_words as f64).round() as usize;
        (content, polar)
    }

    /// Distinct word ids the stream uses.
    pub fn words_needed(&self) -> usize {
        let (content, polar) = self.replaced_per_slice();
        let first = self.topics * self.topic_words + 2 * self.polarity_words;
        first + self.slices.saturating_sub(1) * (self.topics * content + 2 * polar)
    }

    pub fn validate(&self) -> Result<()> {
        if self.brands < 2 || self.slices == 0 || self.topics == 0 || self.topic_words == 0 {
            return Err(DbtmError::Config("need at least 2 brands, 1 slice, 1 topic and 1 word per topic".into()));
        }
        if self.polarity_words < self.topics {
            return Err(DbtmError::Config("need at least one polarity word per topic".into()));
        }
        if self.words_needed() > self.vocab {
            return Err(DbtmError::Config(format!(
                "the stream uses {} distinct words but the vocabulary has {}",
                self.words_needed(),
                self.vocab
            )));
        }
        if self.docs_per_slice < self.brands || self.validation_docs < self.brands || self.test_docs < self.brands {
            return Err(DbtmError::Config("every brand needs documents in every split".into()));
        }
        let scales = [self.mean_length, self.eta_strength, self.polarity_mass, self.rating_noise];
        let fractions = [self.topic_turnover, self.polarity_turnover];
        if !scales.iter().all(|v| v.is_finite() && *v >= 0.0)
            || self.mean_length == 0.0
            || self.polarity_mass >= 1.0
            || !fractions.iter().all(|f| (0.0..=1.0).contains(f))
        {
            return Err(DbtmError::Config("invalid synthetic scales".into()));
        }
        Ok(())
    }
}

/// Planted brand scores, `[slice][brand]`. Brands sit evenly in [-1, 1];
/// brand 1 rises and brand `B - 2` falls across the stream so that the two
/// cross, and the others take a small random walk.
pub fn planted_trajectories(brands: usize, slices: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a));
    let walk = Normal::new(0.0, 0.05).expect("valid scale");
    let base: Vec<f64> = (0..brands)
        .map(|b| if brands == 1 { 0.0 } else { -1.0 + 2.0 * b as f64 / (brands - 1) as f64 })
        .collect();
    let mut out = vec![base.clone()];
    for t in 1..slices {
        let prev = &out[t - 1];
        out.push(prev.iter().map(|v| (v + walk.sample(&mut rng)).clamp(-1.0, 1.0)).collect());
    }
    if brands >= 4 {
        let (up, down) = (1, brands - 2);
        for (t, row) in out.iter_mut().enumerate() {
            let f = if slices == 1 { 0.0 } else { t as f64 / (slices - 1) as f64 };
            row[up] = -0.75 + 1.5 * f;
            row[down] = 0.75 - 1.5 * f;
        }
    }
    out
}

/// One generated slice: model inputs, a held-out test set and the truth.
#[derive(Debug, Clone)]
pub struct SyntheticSlice {
    pub split: SliceSplit,
    pub test: SliceData,
    /// Planted brand scores.
    pub x: Vec<f64>,
    pub positive_words: Vec<usize>,
    pub negative_words: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub spec: StreamSpec,
    pub slices: Vec<SyntheticSlice>,
}

impl SyntheticStream {
    pub fn splits(&self) -> Vec<SliceSplit> {
        self.slices.iter().map(|s| s.split.clone()).collect()
    }
}

struct SliceModel {
    /// Topic-word weights, rows sum to one before polarity scaling.
    beta: Matrix,
    /// Sparse polarity offsets: `(word, eta)`.
    eta: Vec<(usize, f64)>,
}

impl SliceModel {
    fn rates(&self, topics: &[(usize, f64)], s: f64) -> Vec<(usize, f64)> {
        let mut rate = vec![0.0; self.beta.cols()];
        for &(k, w) in topics {
            for (r, b) in rate.iter_mut().zip(self.beta.row(k)) {
                *r += w * b;
            }
        }
        for &(v, e) in &self.eta {
            rate[v] *= (s * e).exp();
        }
        rate.into_iter().enumerate().filter(|(_, r)| *r > 0.0).collect()
    }
}

/// Word assignment that drifts from slice to slice.
struct Layout {
    next_id: usize,
    /// `(word, weight)` per topic.
    content: Vec<Vec<(usize, f64)>>,
    positive: Vec<usize>,
    negative: Vec<usize>,
}

impl Layout {
    fn new(spec: &StreamSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut layout = Layout {
            next_id: 0,
            content: Vec::new(),
            positive: Vec::new(),
            negative: Vec::new(),
        };
        layout.positive = (0..spec.polarity_words).map(|_| layout.fresh()).collect();
        layout.negative = (0..spec.polarity_words).map(|_| layout.fresh()).collect();
        let weight = Gamma::new(2.0, 1.0).expect("valid Gamma");
        layout.content = (0..spec.topics)
            .map(|_| (0..spec.topic_words).map(|_| (layout.fresh(), weight.sample(rng))).collect())
            .collect();
        layout
    }

    fn fresh(&mut self) -> usize {
        self.next_id += 1;
        self.next_id - 1
    }

    /// Replaces randomly chosen words by unseen ones.
    fn drift(&mut self, spec: &StreamSpec, rng: &mut ChaCha8Rng) {
        let (content, polar) = spec.replaced_per_slice();
        let weight = Gamma::new(2.0, 1.0).expect("valid Gamma");
        for k in 0..self.content.len() {
            for i in rand::seq::index::sample(rng, spec.topic_words, content).into_vec() {
                let id = self.fresh();
                self.content[k][i] = (id, weight.sample(rng));
            }
        }
        for i in rand::seq::index::sample(rng, spec.polarity_words, polar).into_vec() {
            self.positive[i] = self.fresh();
        }
        for i in rand::seq::index::sample(rng, spec.polarity_words, polar).into_vec() {
            self.negative[i] = self.fresh();
        }
    }

    fn model(&self, spec: &StreamSpec) -> SliceModel {
        let mut beta = Matrix::zeros(spec.topics, spec.vocab);
        for (k, words) in self.content.iter().enumerate() {
            let total: f64 = words.iter().map(|w| w.1).sum();
            for &(v, w) in words {
                beta.set(k, v, (1.0 - spec.polarity_mass) * w / total);
            }
            // Polarity word i belongs to topic i mod K.
            let mine: Vec<usize> = (0..spec.polarity_words).filter(|i| i % spec.topics == k).collect();
            for &i in &mine {
                for v in [self.positive[i], self.negative[i]] {
                    beta.set(k, v, spec.polarity_mass / (2 * mine.len()) as f64);
                }
            }
        }
        let eta = self
            .positive
            .iter()
            .map(|&v| (v, spec.eta_strength))
            .chain(self.negative.iter().map(|&v| (v, -spec.eta_strength)))
            .collect();
        SliceModel { beta, eta }
    }
}

fn rating_from_polarity(s: f64) -> u8 {
    (3.0 + 2.0 * s).round().clamp(1.0, 5.0) as u8
}

fn draw_docs(spec: &StreamSpec, model: &SliceModel, x: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<SliceData> {
    let noise = Normal::new(0.0, spec.rating_noise.max(1e-12)).expect("valid scale");
    // Two active topics per document, Gamma weights with the target mean.
    let share = Gamma::new(2.0, spec.mean_length / 4.0).expect("valid Gamma");
    let mut rows = Vec::with_capacity(n);
    let mut brands = Vec::with_capacity(n);
    let mut ratings = Vec::with_capacity(n);
    for d in 0..n {
        let b = d % spec.brands;
        let s = x[b];
        let k1 = rng.random_range(0..spec.topics);
        let k2 = rng.random_range(0..spec.topics);
        let topics = [(k1, share.sample(rng)), (k2, share.sample(rng))];
        let mut row: Vec<(usize, u32)> = model
            .rates(&topics, s)
            .into_iter()
            .filter_map(|(v, r)| {
                let c = Poisson::new(r).ok()?.sample(rng) as u32;
                (c > 0).then_some((v, c))
            })
            .collect();
        if row.is_empty() {
            row.push((rng.random_range(0..spec.vocab), 1));
        }
        rows.push(row);
        brands.push(b);
        let jitter = if spec.rating_noise > 0.0 { noise.sample(rng) } else { 0.0 };
        ratings.push(rating_from_polarity(s + jitter));
    }
    SliceData::new(CountMatrix::from_rows(spec.vocab, &rows)?, brands, ratings, spec.brands)
}

/// Draws a stream from the generative model: per-document counts are
/// Poisson with rates `sum_k theta_k beta_kv exp(x_b eta_v)`, and ratings
/// are `round(3 + 2 (x_b + noise))` clamped to 1..=5.
pub fn generate_stream(spec: &StreamSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let x = planted_trajectories(spec.brands, spec.slices, spec.seed);
    let mut layout_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x1a));
    let mut layout = Layout::new(spec, &mut layout_rng);
    let mut slices = Vec::with_capacity(spec.slices);
    for (t, xt) in x.into_iter().enumerate() {
        if t > 0 {
            layout.drift(spec, &mut layout_rng);
        }
        let model = layout.model(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1000 + t as u64));
        let train = draw_docs(spec, &model, &xt, spec.docs_per_slice, &mut rng)?;
        let validation = draw_docs(spec, &model, &xt, spec.validation_docs, &mut rng)?;
        let test = draw_docs(spec, &model, &xt, spec.test_docs, &mut rng)?;
        slices.push(SyntheticSlice {
            split: SliceSplit { train, validation },
            test,
            x: xt,
            positive_words: layout.positive.clone(),
            negative_words: layout.negative.clone(),
        });
    }
    Ok(SyntheticStream {
        spec: spec.clone(),
        slices,
    })
}

/// Renders a stream as review records with one year per slice and words
/// spelled `w0001`, for exercising the text pipeline end to end.
pub fn stream_records(stream: &SyntheticStream) -> Vec<ReviewRecord> {
    const YEAR: i64 = 365 * 24 * 3600;
    let width = stream.spec.vocab.saturating_sub(1).to_string().len().max(4);
    let mut out = Vec::new();
    for (t, slice) in stream.slices.iter().enumerate() {
        for data in [&slice.split.train, &slice.split.validation] {
            for d in 0..data.len() {
                let (idx, cnt) = data.counts.row(d);
                let mut words = Vec::new();
                for (&v, &c) in idx.iter().zip(cnt) {
                    for _ in 0..c {
                        words.push(format!("w{v:0width$}"));
                    }
                }
                out.push(ReviewRecord {
                    review_id: format!("s{t}-{}", out.len()),
                    brand: format!("brand{:02}", data.brands[d]),
                    rating: data.ratings[d],
                    timestamp: t as i64 * YEAR + (d as i64 % 1000) * 60,
                    text: words.join(" "),
                });
            }
        }
    }
    out
}
