//! `dbtm` command line: ingest, train, eval, report.
//!
//! Every command reads one JSON [`RunConfig`]. Corpus artifacts go to
//! `<output_dir>/corpus`, each trained configuration to its own
//! `<output_dir>/runs/<digest>` directory holding the config echo, the
//! timeline checkpoints, timings, evaluation files and reports.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocabulary, ingest_reviews, slice_by_time, split_indices, vectorize, BrandIndex, CountMatrix, FieldMapping,
    SliceData, Vocabulary, VocabularyConfig,
};
use crate::dynamics::{
    config_digest, digest_hex, read_manifest, train_stream, write_manifest, Mode, SliceSplit, StreamConfig,
    TrainedTimeline,
};
use crate::error::{DbtmError, Result};
use crate::evaluation::{
    ground_truth_rating, paired_scores, ranking_correlation_or_zero, rating_time_series, series_csv, topic_coherence,
    topic_top_words, topic_uniqueness, CoherenceVariant, MetricReport, MetricRow, PValueMethod, TopicTable,
    DEFAULT_GRID,
};
use crate::io_util::write_atomic;
use crate::numerics::mix_seed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable overriding `model.seed`.
pub const SEED_ENV: &str = "DBTM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// JSON Lines reviews.
    pub input: PathBuf,
    pub schema: FieldMapping,
    pub vocabulary: VocabularyConfig,
    /// Strictly increasing UTC-second boundaries; slice `t` is
    /// `[boundaries[t], boundaries[t+1])`. Empty means calendar years
    /// covering the data.
    pub boundaries: Vec<i64>,
    pub validation_fraction: f64,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            input: PathBuf::new(),
            schema: FieldMapping::default(),
            vocabulary: VocabularyConfig::default(),
            boundaries: Vec::new(),
            validation_fraction: 0.10,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_words: usize,
    pub grid: Vec<f64>,
    pub p_value: PValueMethod,
    pub coherence: CoherenceVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_words: 10,
            grid: DEFAULT_GRID.to_vec(),
            p_value: PValueMethod::default(),
            coherence: CoherenceVariant::default(),
        }
    }
}

/// Everything a run needs. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: StreamConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("dbtm-out"),
            corpus: CorpusConfig::default(),
            model: StreamConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DbtmError::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DbtmError::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.corpus.input.is_relative() {
            cfg.corpus.input = base.join(&cfg.corpus.input);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        config_digest(self)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.output_dir.join("corpus")
    }

    /// Run directory of the model trained on this corpus with this config.
    pub fn run_dir(&self) -> Result<PathBuf> {
        let key = config_digest(&(&self.corpus, &self.model))?;
        Ok(self.output_dir.join("runs").join(&digest_hex(&key)[..12]))
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.corpus.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(DbtmError::Config(format!("validation_fraction {f} outside (0, 1)")));
        }
        if self.eval.top_words < 2 {
            return Err(DbtmError::Config("eval.top_words must be at least 2".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dbtm,
    #[value(name = "o_dbtm")]
    ODbtm,
}

#[derive(Debug, Parser)]
#[command(name = "dbtm", version, about = "Dynamic brand-topic model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Force the meta weight to zero.
    #[arg(long, global = true)]
    pub no_meta: bool,
    /// Discard an existing timeline instead of resuming it.
    #[arg(long, global = true)]
    pub fresh: bool,
    /// Overrides the config seed and DBTM_SEED.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Evaluate on each slice's validation documents instead of the next slice.
    #[arg(long, global = true)]
    pub same_slice: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read reviews, build the vocabulary, slice, vectorise and split.
    Ingest,
    /// Train (or resume) the timeline.
    Train,
    /// Ranking correlation and topic metrics per slice.
    Eval,
    /// Rating time series and topic grids for one brand.
    Report {
        #[arg(long)]
        brand: String,
    },
}

/// Config after applying the environment and command-line overrides.
pub fn effective_config(cli: &Cli, env_seed: Option<&str>) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| DbtmError::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = env_seed {
        cfg.model.seed = s
            .trim()
            .parse()
            .map_err(|_| DbtmError::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
    }
    if let Some(s) = cli.seed {
        cfg.model.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.model.mode = match m {
            ModeArg::Dbtm => Mode::Dbtm,
            ModeArg::ODbtm => Mode::ODbtm,
        };
    }
    if cli.no_meta {
        cfg.model.no_meta = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match dispatch(&cli, env_seed.as_deref()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = if e.is_input_error() { EXIT_USAGE } else { EXIT_INTERNAL };
            eprintln!("error: {e}");
            code
        }
    }
}

fn dispatch(cli: &Cli, env_seed: Option<&str>) -> Result<()> {
    let cfg = effective_config(cli, env_seed)?;
    match &cli.command {
        Command::Ingest => {
            let summary = cmd_ingest(&cfg)?;
            println!(
                "ingested {} records into {} slices ({} malformed, {} outside boundaries), V={}",
                summary.records,
                summary.slices.len(),
                summary.malformed,
                summary.dropped,
                summary.vocab
            );
        }
        Command::Train => {
            let tl = cmd_train(&cfg, cli.fresh)?;
            println!("trained {} slices into {}", tl.len(), cfg.run_dir()?.display());
            if let Some(f) = &tl.failure {
                return Err(DbtmError::Domain(format!("slice {} failed: {}", f.slice_id, f.message)));
            }
        }
        Command::Eval => {
            let report = cmd_eval(&cfg, cli.same_slice)?;
            print!("{}", report.to_csv());
        }
        Command::Report { brand } => {
            let files = cmd_report(&cfg, brand)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| DbtmError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes `config.json` and `config.sha256` into `dir`.
fn echo_config<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    write_json(&dir.join("config.json"), config)?;
    write_text(&dir.join("config.sha256"), &format!("{}\n", digest_hex(&config_digest(config)?)))
}

fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn year_of(ts: i64) -> i64 {
    let days = ts.div_euclid(86_400);
    // civil_from_days, year only
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    yoe + era * 400 + i64::from(m <= 2)
}

/// January-1st boundaries (UTC) from the first to one past the last year.
pub fn yearly_boundaries(min_ts: i64, max_ts: i64) -> Vec<i64> {
    (year_of(min_ts)..=year_of(max_ts) + 1)
        .map(|y| days_from_civil(y, 1, 1) * 86_400)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub slice_id: usize,
    pub start: i64,
    pub end: i64,
    pub documents: usize,
    pub train: usize,
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: usize,
    pub malformed: usize,
    pub dropped: usize,
    pub vocab: usize,
    pub brands: usize,
    pub slices: Vec<SliceSummary>,
    pub errors: Vec<crate::corpus::RecordError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DocEntry {
    review_id: String,
    brand: String,
    rating: u8,
    timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitManifest {
    train: Vec<usize>,
    validation: Vec<usize>,
}

fn slice_dir(corpus_dir: &Path, t: usize) -> PathBuf {
    corpus_dir.join(format!("slice_{t:03}"))
}

/// Writes `vocab.txt`, `brands.txt`, `ingest.json` and per slice
/// `docs.jsonl`, `counts.mtx` and `split.json`.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let cc = &cfg.corpus;
    let report = ingest_reviews(&cc.input, &cc.schema)?;
    if report.records.is_empty() {
        return Err(DbtmError::Config(format!("{} holds no valid reviews", cc.input.display())));
    }
    let boundaries = if cc.boundaries.is_empty() {
        let first = report.records.first().map(|r| r.timestamp).unwrap_or(0);
        let last = report.records.last().map(|r| r.timestamp).unwrap_or(0);
        yearly_boundaries(first, last)
    } else {
        cc.boundaries.clone()
    };
    let sliced = slice_by_time(&report.records, &boundaries).map_err(|e| DbtmError::Config(e.to_string()))?;
    let mut splits = Vec::with_capacity(sliced.slices.len());
    for s in &sliced.slices {
        if s.len() < 2 {
            return Err(DbtmError::Config(format!(
                "slice {} [{}, {}) has {} documents; adjust the boundaries",
                s.slice_id,
                s.start,
                s.end,
                s.len()
            )));
        }
        splits.push(split_indices(s, cc.validation_fraction, mix_seed(cc.split_seed, s.slice_id as u64))?);
    }
    let train_texts: Vec<&str> = sliced
        .slices
        .iter()
        .zip(&splits)
        .flat_map(|(s, (train, _))| train.iter().map(move |&i| s.documents[i].record.text.as_str()))
        .collect();
    let vocab = build_vocabulary(&train_texts, &cc.vocabulary)?;

    let dir = cfg.corpus_dir();
    fs::create_dir_all(&dir).map_err(|e| DbtmError::io(&dir, e))?;
    vocab.write(&dir.join("vocab.txt"))?;
    let brands = sliced.slices[0].brands.clone();
    let mut names = brands.names().join("\n");
    names.push('\n');
    write_text(&dir.join("brands.txt"), &names)?;

    let mut slices = Vec::with_capacity(sliced.slices.len());
    for (s, (train, validation)) in sliced.slices.iter().zip(&splits) {
        let sd = slice_dir(&dir, s.slice_id);
        let mut docs = String::new();
        for d in &s.documents {
            let entry = DocEntry {
                review_id: d.record.review_id.clone(),
                brand: d.record.brand.clone(),
                rating: d.record.rating,
                timestamp: d.record.timestamp,
            };
            docs.push_str(&serde_json::to_string(&entry)?);
            docs.push('\n');
        }
        write_text(&sd.join("docs.jsonl"), &docs)?;
        vectorize(s, &vocab)?.write_matrix_market(&sd.join("counts.mtx"))?;
        write_json(
            &sd.join("split.json"),
            &SplitManifest {
                train: train.clone(),
                validation: validation.clone(),
            },
        )?;
        slices.push(SliceSummary {
            slice_id: s.slice_id,
            start: s.start,
            end: s.end,
            documents: s.len(),
            train: train.len(),
            validation: validation.len(),
        });
    }
    let summary = IngestSummary {
        records: report.records.len(),
        malformed: report.errors.len(),
        dropped: sliced.dropped,
        vocab: vocab.len(),
        brands: brands.len(),
        slices,
        errors: report.errors,
    };
    write_json(&dir.join("ingest.json"), &summary)?;
    echo_config(&dir, &cfg.corpus)?;
    Ok(summary)
}

/// Ingested corpus read back from disk.
pub struct LoadedCorpus {
    pub vocab: Vocabulary,
    pub brands: BrandIndex,
    /// Every document of the slice.
    pub full: Vec<SliceData>,
    pub splits: Vec<SliceSplit>,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<LoadedCorpus> {
    let dir = cfg.corpus_dir();
    let echo = dir.join("config.json");
    if !echo.exists() {
        return Err(DbtmError::Config(format!(
            "no ingested corpus in {}; run `dbtm ingest` first",
            dir.display()
        )));
    }
    let stored: CorpusConfig = read_json(&echo)?;
    if stored != cfg.corpus {
        return Err(DbtmError::Config(format!(
            "corpus in {} was ingested with a different corpus config; rerun `dbtm ingest`",
            dir.display()
        )));
    }
    let vocab = Vocabulary::read(&dir.join("vocab.txt"))?;
    let names_path = dir.join("brands.txt");
    let names = fs::read_to_string(&names_path).map_err(|e| DbtmError::io(&names_path, e))?;
    let brands = BrandIndex::from_names(names.lines().map(str::to_string).collect());
    let summary: IngestSummary = read_json(&dir.join("ingest.json"))?;

    let mut full = Vec::with_capacity(summary.slices.len());
    let mut splits = Vec::with_capacity(summary.slices.len());
    for s in &summary.slices {
        let sd = slice_dir(&dir, s.slice_id);
        let counts = CountMatrix::read_matrix_market(&sd.join("counts.mtx"))?;
        let docs_path = sd.join("docs.jsonl");
        let text = fs::read_to_string(&docs_path).map_err(|e| DbtmError::io(&docs_path, e))?;
        let mut brand_ids = Vec::new();
        let mut ratings = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let d: DocEntry = serde_json::from_str(line).map_err(|e| DbtmError::Record {
                line: i + 1,
                message: format!("{}: {e}", docs_path.display()),
            })?;
            let b = brands
                .id(&d.brand)
                .ok_or_else(|| DbtmError::Config(format!("brand '{}' missing from brands.txt", d.brand)))?;
            brand_ids.push(b);
            ratings.push(d.rating);
        }
        let data = SliceData::new(counts, brand_ids, ratings, brands.len())?;
        let split: SplitManifest = read_json(&sd.join("split.json"))?;
        splits.push(SliceSplit {
            train: data.select(&split.train),
            validation: data.select(&split.validation),
        });
        full.push(data);
    }
    Ok(LoadedCorpus {
        vocab,
        brands,
        full,
        splits,
    })
}

fn timings_csv(tl: &TrainedTimeline) -> String {
    let mut out = String::from("slice,steps,wall_seconds,rho,gamma_used,stopped_early\n");
    for s in &tl.slices {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.6},{:.6},{}",
            s.slice_id, s.steps, s.wall_seconds, s.rho, s.gamma_used, s.stopped_early
        );
    }
    out
}

/// Trains every ingested slice, resuming a timeline already in the run
/// directory unless `fresh`.
pub fn cmd_train(cfg: &RunConfig, fresh: bool) -> Result<TrainedTimeline> {
    let corpus = load_corpus(cfg)?;
    let run = cfg.run_dir()?;
    let tl_dir = run.join("timeline");
    if fresh && tl_dir.exists() {
        fs::remove_dir_all(&tl_dir).map_err(|e| DbtmError::io(&tl_dir, e))?;
    }
    fs::create_dir_all(&tl_dir).map_err(|e| DbtmError::io(&tl_dir, e))?;
    echo_config(&run, cfg)?;

    let resume = read_manifest(&tl_dir, Some(&cfg.model))?;
    if let Some(tl) = &resume {
        if tl.config != cfg.model {
            return Err(DbtmError::Config(format!(
                "timeline in {} was trained with another model config; pass --fresh",
                tl_dir.display()
            )));
        }
        if tl.len() >= corpus.splits.len() && tl.failure.is_none() {
            log::info!("all {} slices already trained", tl.len());
            return Ok(resume.unwrap());
        }
        log::info!("resuming after slice {}", tl.len() as i64 - 1);
    }
    let timings = run.join("timings.csv");
    let tl = train_stream(&corpus.splits, &cfg.model, resume, |tl| {
        write_manifest(&tl_dir, tl)?;
        write_text(&timings, &timings_csv(tl))
    })?;
    write_manifest(&tl_dir, &tl)?;
    Ok(tl)
}

fn load_timeline(cfg: &RunConfig) -> Result<TrainedTimeline> {
    let tl_dir = cfg.run_dir()?.join("timeline");
    match read_manifest(&tl_dir, Some(&cfg.model))? {
        Some(tl) if !tl.is_empty() => Ok(tl),
        _ => Err(DbtmError::Config(format!(
            "no trained timeline in {}; run `dbtm train` first",
            tl_dir.display()
        ))),
    }
}

fn topic_table(tl: &TrainedTimeline, t: usize, grid: &[f64], n: usize) -> Result<TopicTable> {
    let vp = &tl.slices[t].state.vp;
    topic_top_words(&vp.beta_means(), &vp.eta_loc, grid, n)
}

/// One metric row per trained slice. By default slice `t` is scored on all
/// documents of slice `t + 1` (rows without a successor are dropped);
/// `same_slice` scores it on its own validation documents. Coherence uses
/// the slice's training documents as reference.
pub fn evaluate_timeline(
    tl: &TrainedTimeline,
    corpus: &LoadedCorpus,
    eval: &EvalConfig,
    same_slice: bool,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for (t, s) in tl.slices.iter().enumerate() {
        let target = if same_slice {
            Some(&corpus.splits[t].validation)
        } else if t + 1 < corpus.full.len() {
            Some(&corpus.full[t + 1])
        } else if t + 1 == tl.len() {
            // the final slice has no successor
            continue;
        } else {
            None
        };
        let ranking = match target {
            Some(data) => {
                let (pred, truth) = paired_scores(&s.scores.raw, &ground_truth_rating(data));
                if pred.len() < 2 {
                    None
                } else {
                    Some(ranking_correlation_or_zero(&pred, &truth, eval.p_value)?)
                }
            }
            None => None,
        };
        let topics = topic_table(tl, t, &[0.0], eval.top_words)?.at(0.0);
        let coherence = topic_coherence(&topics, &corpus.splits[t].train.counts, eval.coherence)?;
        let uniqueness = topic_uniqueness(&topics)?;
        let coh = coherence.mean.is_finite().then_some(coherence.mean);
        rows.push(MetricRow::new(format!("{t}"), ranking, coh, Some(uniqueness)));
    }
    Ok(MetricReport::from_rows(rows))
}

/// Writes `metrics.csv`, `metrics.json`, topic tables and `series.csv`
/// (every brand) under `<run>/eval`.
pub fn cmd_eval(cfg: &RunConfig, same_slice: bool) -> Result<MetricReport> {
    let corpus = load_corpus(cfg)?;
    let tl = load_timeline(cfg)?;
    let report = evaluate_timeline(&tl, &corpus, &cfg.eval, same_slice)?;
    let dir = cfg.run_dir()?.join(if same_slice { "eval_same_slice" } else { "eval" });
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    write_text(&dir.join("metrics.json"), &report.to_json()?)?;
    for t in 0..tl.len() {
        let table = topic_table(&tl, t, &cfg.eval.grid, cfg.eval.top_words)?;
        write_json(&dir.join(format!("topics_{t:03}.json")), &table.to_json(&corpus.vocab))?;
    }
    let raw = tl.raw_scores();
    let truth: Vec<_> = corpus.full.iter().take(tl.len()).map(ground_truth_rating).collect();
    let mut series = String::from("brand,");
    series.push_str(series_csv(&[]).trim_end());
    series.push('\n');
    for (b, name) in corpus.brands.names().iter().enumerate() {
        let body = series_csv(&rating_time_series(&raw, &truth, b));
        for line in body.lines().skip(1) {
            let _ = writeln!(series, "{},{line}", csv_field(name));
        }
    }
    write_text(&dir.join("series.csv"), &series)?;
    Ok(report)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn file_stem(brand: &str) -> String {
    brand
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Rating time series of one brand plus the plain-text topic grid of every
/// slice, under `<run>/report`. Returns the written paths.
pub fn cmd_report(cfg: &RunConfig, brand: &str) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(cfg)?;
    let Some(b) = corpus.brands.id(brand) else {
        return Err(DbtmError::Config(format!(
            "unknown brand '{brand}'; known brands: {}",
            corpus.brands.names().join(", ")
        )));
    };
    let tl = load_timeline(cfg)?;
    let dir = cfg.run_dir()?.join("report");
    let raw = tl.raw_scores();
    let truth: Vec<_> = corpus.full.iter().take(tl.len()).map(ground_truth_rating).collect();
    let series_path = dir.join(format!("series_{}.csv", file_stem(brand)));
    write_text(&series_path, &series_csv(&rating_time_series(&raw, &truth, b)))?;
    let mut files = vec![series_path];
    for t in 0..tl.len() {
        let table = topic_table(&tl, t, &cfg.eval.grid, cfg.eval.top_words)?;
        let path = dir.join(format!("topics_{t:03}.txt"));
        write_text(&path, &table.render_text(&corpus.vocab))?;
        files.push(path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yearly_boundaries_are_january_first() {
        // 2005-06-01 and 2007-02-03
        let b = yearly_boundaries(1_117_584_000, 1_170_460_800);
        assert_eq!(b, vec![1_104_537_600, 1_136_073_600, 1_167_609_600, 1_199_145_600]);
        assert_eq!(year_of(-1), 1969);
        assert_eq!(year_of(951_782_400), 2000); // 2000-02-29
    }

    #[test]
    fn digest_ignores_field_order() {
        let a = RunConfig::from_json(r#"{"output_dir":"o","model":{"topics":7,"seed":3},"corpus":{"split_seed":1}}"#)
            .unwrap();
        let b = RunConfig::from_json(r#"{"corpus":{"split_seed":1},"model":{"seed":3,"topics":7},"output_dir":"o"}"#)
            .unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.run_dir().unwrap(), b.run_dir().unwrap());
        let c = RunConfig::from_json(r#"{"output_dir":"o","model":{"topics":8,"seed":3},"corpus":{"split_seed":1}}"#)
            .unwrap();
        assert_ne!(a.run_dir().unwrap(), c.run_dir().unwrap());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"topics": 5}"#), Err(DbtmError::Config(_))));
    }

    #[test]
    fn defaults_echo_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.model.topics, 50);
        assert_eq!(c.model.optimizer.batch_size, 256);
        assert_eq!(c.model.optimizer.max_steps, 50_000);
        assert_eq!(c.corpus.validation_fraction, 0.10);
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"model":{"seed":1}}"#).unwrap();
        let cli = Cli::try_parse_from(["dbtm", "train", "--config", path.to_str().unwrap()]).unwrap();
        assert_eq!(effective_config(&cli, None).unwrap().model.seed, 1);
        assert_eq!(effective_config(&cli, Some("9")).unwrap().model.seed, 9);
        assert!(effective_config(&cli, Some("x")).is_err());
        let cli = Cli::try_parse_from([
            "dbtm",
            "train",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "4",
            "--mode",
            "o_dbtm",
            "--no-meta",
        ])
        .unwrap();
        let cfg = effective_config(&cli, Some("9")).unwrap();
        assert_eq!(cfg.model.seed, 4);
        assert_eq!(cfg.model.mode, Mode::ODbtm);
        assert!(cfg.model.no_meta);
        assert_eq!(cfg.output_dir, dir.path().join("dbtm-out"));
    }
}
