//! Review ingestion, rating labels, n-gram vocabulary, time slicing,
//! bag-of-words vectorisation and train/validation splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DbtmError, Result};
use crate::numerics::mix_seed;

/// One review as read from the input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub review_id: String,
    pub brand: String,
    pub rating: u8,
    /// UTC seconds.
    pub timestamp: i64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentimentLabel {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl SentimentLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Label of the inverted rating: positive and negative swap, neutral stays.
    pub fn inverted(self) -> Self {
        match self {
            SentimentLabel::Negative => SentimentLabel::Positive,
            SentimentLabel::Neutral => SentimentLabel::Neutral,
            SentimentLabel::Positive => SentimentLabel::Negative,
        }
    }
}

/// 1, 2 are negative; 3 is neutral; 4, 5 are positive.
pub fn map_rating_to_label(rating: u8) -> Result<SentimentLabel> {
    match rating {
        1 | 2 => Ok(SentimentLabel::Negative),
        3 => Ok(SentimentLabel::Neutral),
        4 | 5 => Ok(SentimentLabel::Positive),
        other => Err(DbtmError::Domain(format!("rating {other} outside [1, 5]"))),
    }
}

/// Names of the JSON fields holding each record attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub review_id: String,
    pub brand: String,
    pub rating: String,
    pub timestamp: String,
    pub text: String,
}

impl Default for FieldMapping {
    fn default() -> Self {
        FieldMapping {
            review_id: "review_id".into(),
            brand: "brand".into(),
            rating: "rating".into(),
            timestamp: "ts".into(),
            text: "text".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<ReviewRecord>,
    pub errors: Vec<RecordError>,
}

fn field_as_i64(value: &serde_json::Value) -> Option<i64> {
    match value {
        serde_json::Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_record(line: &str, lineno: usize, schema: &FieldMapping) -> std::result::Result<ReviewRecord, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("line is not a JSON object")?;
    let get = |name: &str| obj.get(name).filter(|v| !v.is_null());

    let brand = get(&schema.brand)
        .and_then(|v| v.as_str())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| format!("missing or empty field '{}'", schema.brand))?
        .to_string();
    let rating = get(&schema.rating)
        .ok_or_else(|| format!("missing field '{}'", schema.rating))
        .and_then(|v| field_as_i64(v).ok_or_else(|| format!("field '{}' is not an integer", schema.rating)))?;
    if !(1..=5).contains(&rating) {
        return Err(format!("rating {rating} outside [1, 5]"));
    }
    let timestamp = get(&schema.timestamp)
        .ok_or_else(|| format!("missing field '{}'", schema.timestamp))
        .and_then(|v| field_as_i64(v).ok_or_else(|| format!("field '{}' is not an integer", schema.timestamp)))?;
    let text = get(&schema.text)
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("missing field '{}'", schema.text))?
        .to_string();
    let review_id = match get(&schema.review_id) {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
        None => format!("line-{lineno}"),
    };
    Ok(ReviewRecord {
        review_id,
        brand,
        rating: rating as u8,
        timestamp,
        text,
    })
}

/// Reads JSON Lines reviews. Malformed lines are collected in the report;
/// records come back sorted by timestamp.
pub fn ingest_reviews(path: &Path, schema: &FieldMapping) -> Result<IngestReport> {
    let file = File::open(path).map_err(|e| DbtmError::io(path, e))?;
    let mut report = IngestReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DbtmError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, lineno, schema) {
            Ok(r) => report.records.push(r),
            Err(message) => report.errors.push(RecordError { line: lineno, message }),
        }
    }
    report.records.sort_by_key(|r| r.timestamp);
    if !report.errors.is_empty() {
        log::warn!("{}: {} malformed lines skipped", path.display(), report.errors.len());
    }
    Ok(report)
}

/// Lowercased alphanumeric runs of at least two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(|t| t.to_lowercase())
        .collect()
}

/// All contiguous n-grams of the token stream for n = 1..=ngram_max.
pub fn ngrams(tokens: &[String], ngram_max: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in 1..=ngram_max.max(1) {
        if tokens.len() < n {
            break;
        }
        for window in tokens.windows(n) {
            out.push(window.join(" "));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabularyConfig {
    pub min_df: usize,
    pub max_df_frac: f64,
    pub ngram_max: usize,
    #[serde(default)]
    pub stoplist: Vec<String>,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        VocabularyConfig {
            min_df: 20,
            max_df_frac: 0.5,
            ngram_max: 3,
            stoplist: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    df: Vec<usize>,
    ngram_max: usize,
}

impl Vocabulary {
    pub fn from_terms(terms: Vec<String>, ngram_max: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DbtmError::Domain(format!("duplicate vocabulary term '{t}'")));
            }
        }
        let ngram_max = ngram_max.max(terms.iter().map(|t| t.split(' ').count()).max().unwrap_or(1));
        Ok(Vocabulary {
            df: vec![0; terms.len()],
            terms,
            index,
            ngram_max,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: usize) -> &str {
        &self.terms[id]
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn document_frequency(&self, id: usize) -> usize {
        self.df[id]
    }

    pub fn ngram_max(&self) -> usize {
        self.ngram_max
    }

    /// Text form: a `V=<count>` header, then one term per line in index order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("V={}\n", self.terms.len());
        for t in &self.terms {
            out.push_str(t);
            out.push('\n');
        }
        crate::io_util::write_atomic(path, out.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DbtmError::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let count: usize = header
            .strip_prefix("V=")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| DbtmError::Record {
                line: 1,
                message: format!("expected 'V=<count>' header, found '{header}'"),
            })?;
        let terms: Vec<String> = lines.map(str::to_string).collect();
        if terms.len() != count {
            return Err(DbtmError::Shape(format!(
                "vocabulary header says {count} terms, file has {}",
                terms.len()
            )));
        }
        Vocabulary::from_terms(terms, 1)
    }
}

/// Builds the n-gram vocabulary from document texts.
pub fn build_vocabulary<S: AsRef<str>>(texts: &[S], config: &VocabularyConfig) -> Result<Vocabulary> {
    let docs = texts.len();
    if docs == 0 {
        return Err(DbtmError::Domain("cannot build a vocabulary from zero documents".into()));
    }
    if config.min_df > docs {
        return Err(DbtmError::Domain(format!(
            "min_df = {} exceeds the number of documents ({docs})",
            config.min_df
        )));
    }
    let stop: HashSet<String> = config.stoplist.iter().map(|s| s.to_lowercase()).collect();
    let mut df: HashMap<String, usize> = HashMap::new();
    for text in texts {
        let grams: HashSet<String> = ngrams(&tokenize(text.as_ref()), config.ngram_max).into_iter().collect();
        for g in grams {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let max_df = config.max_df_frac * docs as f64;
    let mut kept: Vec<(String, usize)> = df
        .into_iter()
        .filter(|(term, n)| *n >= config.min_df && (*n as f64) <= max_df && !stop.contains(term))
        .collect();
    if kept.is_empty() {
        return Err(DbtmError::EmptyVocabulary {
            min_df: config.min_df,
            max_df: max_df.floor() as usize,
            documents: docs,
        });
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let (terms, dfs): (Vec<String>, Vec<usize>) = kept.into_iter().unzip();
    let mut vocab = Vocabulary::from_terms(terms, config.ngram_max)?;
    vocab.df = dfs;
    vocab.ngram_max = config.ngram_max;
    Ok(vocab)
}

/// Brand names and their integer ids, shared by every slice of a run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BrandIndex {
    names: Vec<String>,
}

impl BrandIndex {
    /// Ids follow lexicographic order of the distinct names.
    pub fn from_records(records: &[ReviewRecord]) -> Self {
        let set: std::collections::BTreeSet<&str> = records.iter().map(|r| r.brand.as_str()).collect();
        BrandIndex {
            names: set.into_iter().map(str::to_string).collect(),
        }
    }

    pub fn from_names(names: Vec<String>) -> Self {
        BrandIndex { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledReview {
    pub record: ReviewRecord,
    pub label: SentimentLabel,
}

/// Documents of one time slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSliceCorpus {
    pub slice_id: usize,
    /// Half-open interval `[start, end)` in UTC seconds.
    pub start: i64,
    pub end: i64,
    pub documents: Vec<LabeledReview>,
    pub brands: BrandIndex,
}

impl TimeSliceCorpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn brand_of(&self, doc: usize) -> usize {
        self.brands
            .id(&self.documents[doc].record.brand)
            .expect("document brand registered in the brand index")
    }

    fn with_documents(&self, documents: Vec<LabeledReview>) -> Self {
        TimeSliceCorpus {
            slice_id: self.slice_id,
            start: self.start,
            end: self.end,
            documents,
            brands: self.brands.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlicedCorpus {
    pub slices: Vec<TimeSliceCorpus>,
    /// Records outside `[first, last)` of the boundaries.
    pub dropped: usize,
}

/// Assigns records to half-open intervals between consecutive boundaries.
pub fn slice_by_time(records: &[ReviewRecord], boundaries: &[i64]) -> Result<SlicedCorpus> {
    if boundaries.len() < 2 {
        return Err(DbtmError::Domain("need at least two slice boundaries".into()));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DbtmError::Domain("slice boundaries must be strictly increasing".into()));
    }
    let brands = BrandIndex::from_records(records);
    let mut slices: Vec<TimeSliceCorpus> = boundaries
        .windows(2)
        .enumerate()
        .map(|(t, w)| TimeSliceCorpus {
            slice_id: t,
            start: w[0],
            end: w[1],
            documents: Vec::new(),
            brands: brands.clone(),
        })
        .collect();
    let mut dropped = 0;
    for r in records {
        // index of the last boundary <= timestamp
        let pos = boundaries.partition_point(|&b| b <= r.timestamp);
        if pos == 0 || pos == boundaries.len() {
            dropped += 1;
            continue;
        }
        let label = map_rating_to_label(r.rating)?;
        slices[pos - 1].documents.push(LabeledReview {
            record: r.clone(),
            label,
        });
    }
    if dropped > 0 {
        log::warn!("{dropped} records fall outside the slice boundaries and were dropped");
    }
    Ok(SlicedCorpus { slices, dropped })
}

/// Sparse document-term counts in compressed-row form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    counts: Vec<u32>,
}

impl CountMatrix {
    pub fn empty(cols: usize) -> Self {
        CountMatrix {
            rows: 0,
            cols,
            indptr: vec![0],
            indices: Vec::new(),
            counts: Vec::new(),
        }
    }

    /// Builds from per-row `(column, count)` lists; duplicate columns are summed
    /// and zero counts discarded.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, u32)>]) -> Result<Self> {
        let mut m = CountMatrix::empty(cols);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, entries: &[(usize, u32)]) -> Result<()> {
        let mut merged: BTreeMap<usize, u32> = BTreeMap::new();
        for &(c, n) in entries {
            if c >= self.cols {
                return Err(DbtmError::Shape(format!("column {c} outside vocabulary of {}", self.cols)));
            }
            *merged.entry(c).or_insert(0) += n;
        }
        for (c, n) in merged {
            if n > 0 {
                self.indices.push(c as u32);
                self.counts.push(n);
            }
        }
        self.indptr.push(self.indices.len());
        self.rows += 1;
        Ok(())
    }

    pub fn from_dense(dense: &[Vec<u32>]) -> Result<Self> {
        let cols = dense.first().map_or(0, |r| r.len());
        let rows: Vec<Vec<(usize, u32)>> = dense
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, &n)| (c, n)).collect())
            .collect();
        if dense.iter().any(|r| r.len() != cols) {
            return Err(DbtmError::Shape("ragged dense matrix".into()));
        }
        CountMatrix::from_rows(cols, &rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Column ids and counts of the nonzero entries of row `d`.
    #[inline]
    pub fn row(&self, d: usize) -> (&[u32], &[u32]) {
        let (a, b) = (self.indptr[d], self.indptr[d + 1]);
        (&self.indices[a..b], &self.counts[a..b])
    }

    pub fn get(&self, d: usize, v: usize) -> u32 {
        let (idx, cnt) = self.row(d);
        idx.binary_search(&(v as u32)).map_or(0, |p| cnt[p])
    }

    /// Token count of document `d`.
    pub fn row_sum(&self, d: usize) -> u64 {
        self.row(d).1.iter().map(|&c| c as u64).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<u32>> {
        (0..self.rows)
            .map(|d| {
                let mut row = vec![0; self.cols];
                let (idx, cnt) = self.row(d);
                for (&c, &n) in idx.iter().zip(cnt) {
                    row[c as usize] = n;
                }
                row
            })
            .collect()
    }

    /// Rows `ids` in the given order.
    pub fn select_rows(&self, ids: &[usize]) -> CountMatrix {
        let mut m = CountMatrix::empty(self.cols);
        for &d in ids {
            let (idx, cnt) = self.row(d);
            m.indices.extend_from_slice(idx);
            m.counts.extend_from_slice(cnt);
            m.indptr.push(m.indices.len());
            m.rows += 1;
        }
        m
    }

    /// MatrixMarket coordinate format, 1-based.
    pub fn write_matrix_market(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "%%MatrixMarket matrix coordinate integer general").unwrap();
        writeln!(out, "{} {} {}", self.rows, self.cols, self.nnz()).unwrap();
        for d in 0..self.rows {
            let (idx, cnt) = self.row(d);
            for (&c, &n) in idx.iter().zip(cnt) {
                writeln!(out, "{} {} {}", d + 1, c + 1, n).unwrap();
            }
        }
        crate::io_util::write_atomic(path, &out)
    }

    pub fn read_matrix_market(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DbtmError::io(path, e))?;
        let bad = |line: usize, message: &str| DbtmError::Record {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('%'));
        let (hline, header) = lines.next().ok_or_else(|| bad(1, "missing size line"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(hline + 1, "bad size line")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(bad(hline + 1, "size line needs rows, cols, nnz"));
        }
        let mut rows = vec![Vec::new(); dims[0]];
        let mut seen = 0;
        for (i, line) in lines {
            let parts: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(i + 1, "bad entry")))
                .collect::<Result<_>>()?;
            if parts.len() != 3 || parts[0] == 0 || parts[0] > dims[0] || parts[1] == 0 || parts[1] > dims[1] {
                return Err(bad(i + 1, "entry outside matrix"));
            }
            rows[parts[0] - 1].push((parts[1] - 1, parts[2] as u32));
            seen += 1;
        }
        if seen != dims[2] {
            return Err(DbtmError::Shape(format!("header declares {} entries, found {seen}", dims[2])));
        }
        CountMatrix::from_rows(dims[1], &rows)
    }
}

/// Counts vocabulary n-grams in one text.
pub fn vectorize_text(text: &str, vocab: &Vocabulary) -> Vec<(usize, u32)> {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for g in ngrams(&tokenize(text), vocab.ngram_max()) {
        if let Some(id) = vocab.id(&g) {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    counts.into_iter().collect()
}

/// Bag-of-words counts for every document of a slice; out-of-vocabulary
/// n-grams are dropped and empty rows kept.
pub fn vectorize(corpus: &TimeSliceCorpus, vocab: &Vocabulary) -> Result<CountMatrix> {
    let mut m = CountMatrix::empty(vocab.len());
    let mut empty_rows = 0;
    for doc in &corpus.documents {
        let row = vectorize_text(&doc.record.text, vocab);
        if row.is_empty() {
            empty_rows += 1;
        }
        m.push_row(&row)?;
    }
    if empty_rows > 0 {
        log::warn!(
            "slice {}: {empty_rows} documents contain no vocabulary terms",
            corpus.slice_id
        );
    }
    Ok(m)
}

/// Brand-stratified split. Brands with at least two documents keep at least
/// one document on each side; the validation total follows `fraction` as
/// closely as that allows.
pub fn split_train_validation(
    corpus: &TimeSliceCorpus,
    fraction: f64,
    seed: u64,
) -> Result<(TimeSliceCorpus, TimeSliceCorpus)> {
    let (train, val) = split_indices(corpus, fraction, seed)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| corpus.documents[i].clone()).collect();
    Ok((corpus.with_documents(pick(&train)), corpus.with_documents(pick(&val))))
}

/// Index form of [`split_train_validation`]; both lists sorted ascending.
pub fn split_indices(corpus: &TimeSliceCorpus, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DbtmError::Domain(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let mut by_brand: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, doc) in corpus.documents.iter().enumerate() {
        by_brand.entry(doc.record.brand.as_str()).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = by_brand.into_iter().collect();

    let target = (corpus.len() as f64 * fraction).round() as usize;
    let mut quota: Vec<usize> = Vec::with_capacity(groups.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for (g, (name, ids)) in groups.iter().enumerate() {
        let n = ids.len();
        if n < 2 {
            log::warn!("brand '{name}' has a single document in slice {}; kept in training", corpus.slice_id);
            quota.push(0);
            continue;
        }
        let exact = n as f64 * fraction;
        let q = (exact.floor() as usize).clamp(1, n - 1);
        remainders.push((exact - exact.floor(), g));
        quota.push(q);
    }
    let mut assigned: usize = quota.iter().sum();
    // hand out or take back single documents, largest remainder first
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    while assigned < target {
        let Some(&(_, g)) = remainders.iter().find(|&&(_, g)| quota[g] < groups[g].1.len() - 1) else {
            break;
        };
        quota[g] += 1;
        assigned += 1;
        remainders.retain(|&(_, h)| h != g);
    }
    let mut by_smallest = remainders.clone();
    by_smallest.reverse();
    while assigned > target {
        let Some(&(_, g)) = by_smallest.iter().find(|&&(_, g)| quota[g] > 1) else {
            break;
        };
        quota[g] -= 1;
        assigned -= 1;
        by_smallest.retain(|&(_, h)| h != g);
    }

    let mut train = Vec::with_capacity(corpus.len());
    let mut val = Vec::with_capacity(assigned);
    for (g, (_, ids)) in groups.iter().enumerate() {
        let mut shuffled = ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, g as u64));
        shuffled.shuffle(&mut rng);
        val.extend_from_slice(&shuffled[..quota[g]]);
        train.extend_from_slice(&shuffled[quota[g]..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Model-ready view of a slice: counts plus per-document brand ids and ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceData {
    pub counts: CountMatrix,
    pub brands: Vec<usize>,
    /// Raw ratings in 1..=5.
    pub ratings: Vec<u8>,
    pub n_brands: usize,
}

impl SliceData {
    pub fn new(counts: CountMatrix, brands: Vec<usize>, ratings: Vec<u8>, n_brands: usize) -> Result<Self> {
        if brands.len() != counts.rows() || ratings.len() != counts.rows() {
            return Err(DbtmError::Shape(format!(
                "{} count rows, {} brand ids, {} ratings",
                counts.rows(),
                brands.len(),
                ratings.len()
            )));
        }
        if let Some(&b) = brands.iter().find(|&&b| b >= n_brands) {
            return Err(DbtmError::Shape(format!("brand id {b} outside [0, {n_brands})")));
        }
        if let Some(&r) = ratings.iter().find(|&&r| !(1..=5).contains(&r)) {
            return Err(DbtmError::Domain(format!("rating {r} outside [1, 5]")));
        }
        Ok(SliceData {
            counts,
            brands,
            ratings,
            n_brands,
        })
    }

    pub fn from_corpus(corpus: &TimeSliceCorpus, vocab: &Vocabulary) -> Result<Self> {
        let counts = vectorize(corpus, vocab)?;
        let brands = (0..corpus.len()).map(|d| corpus.brand_of(d)).collect();
        let ratings = corpus.documents.iter().map(|d| d.record.rating).collect();
        SliceData::new(counts, brands, ratings, corpus.brands.len())
    }

    pub fn len(&self) -> usize {
        self.counts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.rows() == 0
    }

    pub fn label(&self, d: usize) -> SentimentLabel {
        map_rating_to_label(self.ratings[d]).expect("ratings validated on construction")
    }

    pub fn select(&self, ids: &[usize]) -> SliceData {
        SliceData {
            counts: self.counts.select_rows(ids),
            brands: ids.iter().map(|&d| self.brands[d]).collect(),
            ratings: ids.iter().map(|&d| self.ratings[d]).collect(),
            n_brands: self.n_brands,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(brand: &str, rating: u8, ts: i64, text: &str) -> ReviewRecord {
        ReviewRecord {
            review_id: format!("{brand}-{ts}"),
            brand: brand.into(),
            rating,
            timestamp: ts,
            text: text.into(),
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingest_single_line() {
        let f = write_lines(&[r#"{"brand":"A","rating":5,"ts":1,"text":"great"}"#]);
        let rep = ingest_reviews(f.path(), &FieldMapping::default()).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.records[0].rating, 5);
        assert_eq!(rep.records[0].brand, "A");
        assert!(rep.errors.is_empty());
    }

    #[test]
    fn ingest_empty_and_bad_lines() {
        let f = write_lines(&[]);
        let rep = ingest_reviews(f.path(), &FieldMapping::default()).unwrap();
        assert!(rep.records.is_empty() && rep.errors.is_empty());

        let f = write_lines(&[
            r#"{"brand":"A","rating":7,"ts":1,"text":"x"}"#,
            r#"{"brand":"B","ts":2,"text":"x"}"#,
            r#"{"brand":"B","rating":2,"ts":0,"text":"ok"}"#,
        ]);
        let rep = ingest_reviews(f.path(), &FieldMapping::default()).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.errors.len(), 2);
        assert_eq!(rep.errors[0].line, 1);
        assert_eq!(rep.errors[1].line, 2);
        assert!(rep.errors[1].message.contains("rating"));
    }

    #[test]
    fn ingest_sorts_by_time_and_missing_file_is_fatal() {
        let f = write_lines(&[
            r#"{"brand":"A","rating":5,"ts":9,"text":"late"}"#,
            r#"{"brand":"A","rating":1,"ts":3,"text":"early"}"#,
        ]);
        let rep = ingest_reviews(f.path(), &FieldMapping::default()).unwrap();
        assert_eq!(rep.records[0].timestamp, 3);
        assert!(matches!(
            ingest_reviews(Path::new("/nonexistent/reviews.jsonl"), &FieldMapping::default()),
            Err(DbtmError::Io { .. })
        ));
    }

    #[test]
    fn rating_labels() {
        assert_eq!(map_rating_to_label(1).unwrap(), SentimentLabel::Negative);
        assert_eq!(map_rating_to_label(2).unwrap(), SentimentLabel::Negative);
        assert_eq!(map_rating_to_label(3).unwrap(), SentimentLabel::Neutral);
        assert_eq!(map_rating_to_label(4).unwrap(), SentimentLabel::Positive);
        assert_eq!(map_rating_to_label(5).unwrap(), SentimentLabel::Positive);
        assert!(map_rating_to_label(0).is_err());
        assert!(map_rating_to_label(6).is_err());
        for a in 1..=5u8 {
            for b in a..=5u8 {
                assert!(map_rating_to_label(a).unwrap() <= map_rating_to_label(b).unwrap());
            }
        }
    }

    #[test]
    fn vocabulary_examples() {
        let cfg = VocabularyConfig {
            min_df: 1,
            max_df_frac: 1.0,
            ngram_max: 3,
            stoplist: vec![],
        };
        let v = build_vocabulary(&["good skin", "good skin"], &cfg).unwrap();
        let mut terms = v.terms().to_vec();
        terms.sort();
        assert_eq!(terms, vec!["good", "good skin", "skin"]);

        let stop = VocabularyConfig {
            stoplist: vec!["actually bought".into()],
            ..cfg.clone()
        };
        let v = build_vocabulary(&["I actually bought it", "actually bought again"], &stop).unwrap();
        assert!(v.id("actually bought").is_none());
        assert!(v.id("actually").is_some());

        let strict = VocabularyConfig { min_df: 3, ..cfg };
        assert!(build_vocabulary(&["a b", "c d"], &strict).is_err());
    }

    #[test]
    fn vocabulary_order_and_filters() {
        let cfg = VocabularyConfig {
            min_df: 2,
            max_df_frac: 0.75,
            ngram_max: 1,
            stoplist: vec![],
        };
        let texts = ["aa bb cc", "aa bb", "aa dd", "ee bb cc aa"];
        let v = build_vocabulary(&texts, &cfg).unwrap();
        // aa has df 4 > 3 and is removed; bb df 3, cc df 2
        assert_eq!(v.terms(), &["bb".to_string(), "cc".to_string()]);
        assert_eq!(v.document_frequency(0), 3);

        let none = VocabularyConfig { max_df_frac: 0.1, ..cfg };
        assert!(matches!(
            build_vocabulary(&texts, &none),
            Err(DbtmError::EmptyVocabulary { .. })
        ));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::from_terms(vec!["good".into(), "good skin".into()], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("V=2\n"));
        let back = Vocabulary::read(&p).unwrap();
        assert_eq!(back.terms(), v.terms());
        assert_eq!(back.ngram_max(), 2);
    }

    #[test]
    fn slicing_conventions() {
        let recs = vec![
            record("A", 5, 0, "x"),
            record("A", 5, 10, "x"),
            record("B", 1, 15, "x"),
            record("B", 1, 30, "x"),
            record("B", 1, -1, "x"),
        ];
        let out = slice_by_time(&recs, &[0, 10, 20, 30]).unwrap();
        assert_eq!(out.slices.len(), 3);
        assert_eq!(out.slices[0].len(), 1);
        // boundary record goes to the later slice
        assert_eq!(out.slices[1].len(), 2);
        assert_eq!(out.slices[2].len(), 0);
        assert_eq!(out.dropped, 2);

        let empty = slice_by_time(&[], &[0, 1, 2]).unwrap();
        assert!(empty.slices.iter().all(|s| s.is_empty()));
        assert!(slice_by_time(&recs, &[0, 0, 1]).is_err());
    }

    #[test]
    fn yearly_slices() {
        let year = 365 * 24 * 3600;
        let bounds: Vec<i64> = (0..10).map(|y| y * year).collect();
        let recs: Vec<ReviewRecord> = (0..9).map(|y| record("A", 4, y * year + 5, "x")).collect();
        let out = slice_by_time(&recs, &bounds).unwrap();
        assert_eq!(out.slices.len(), 9);
        assert!(out.slices.iter().all(|s| s.len() == 1));
    }

    fn corpus_of(texts: &[(&str, &str)]) -> TimeSliceCorpus {
        let recs: Vec<ReviewRecord> = texts
            .iter()
            .enumerate()
            .map(|(i, (b, t))| record(b, 4, i as i64, t))
            .collect();
        slice_by_time(&recs, &[0, 1_000_000]).unwrap().slices.remove(0)
    }

    #[test]
    fn vectorize_examples() {
        let vocab = Vocabulary::from_terms(vec!["good".into(), "skin".into()], 1).unwrap();
        let c = corpus_of(&[("A", "good good skin"), ("A", "zzz qqq")]);
        let m = vectorize(&c, &vocab).unwrap();
        assert_eq!(m.to_dense(), vec![vec![2, 1], vec![0, 0]]);
        let empty = corpus_of(&[]);
        let m = vectorize(&empty, &vocab).unwrap();
        assert_eq!((m.rows(), m.cols()), (0, 2));
    }

    #[test]
    fn split_examples() {
        let docs: Vec<(&str, &str)> = (0..100).map(|_| ("A", "x")).collect();
        let c = corpus_of(&docs);
        let (tr, va) = split_train_validation(&c, 0.1, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        let (tr2, va2) = split_train_validation(&c, 0.1, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert!(split_train_validation(&c, 1.0, 7).is_err());
    }

    #[test]
    fn split_every_brand_validated() {
        let names: Vec<String> = (0..25).map(|b| format!("brand{b:02}")).collect();
        let docs: Vec<(&str, &str)> = names
            .iter()
            .flat_map(|n| std::iter::repeat_n((n.as_str(), "x"), 8))
            .collect();
        let c = corpus_of(&docs);
        let (tr, va) = split_train_validation(&c, 0.1, 3).unwrap();
        for n in &names {
            assert!(va.documents.iter().any(|d| &d.record.brand == n), "{n} missing in validation");
            assert!(tr.documents.iter().any(|d| &d.record.brand == n));
        }
    }

    #[test]
    fn single_document_brand_stays_in_training() {
        let c = corpus_of(&[("A", "x"), ("B", "x"), ("B", "y"), ("B", "z")]);
        let (tr, va) = split_train_validation(&c, 0.5, 1).unwrap();
        assert!(tr.documents.iter().any(|d| d.record.brand == "A"));
        assert!(va.documents.iter().all(|d| d.record.brand == "B"));
    }

    #[test]
    fn matrix_market_round_trip() {
        let m = CountMatrix::from_dense(&[vec![0, 3, 0], vec![1, 0, 2], vec![0, 0, 0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mtx");
        m.write_matrix_market(&p).unwrap();
        assert_eq!(CountMatrix::read_matrix_market(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn unigram_vectorize_is_additive(
            a in prop::collection::vec(0usize..6, 0..15),
            b in prop::collection::vec(0usize..6, 0..15),
        ) {
            let words = ["aa", "bb", "cc", "dd", "ee", "ff"];
            let vocab = Vocabulary::from_terms(words[..4].iter().map(|s| s.to_string()).collect(), 1).unwrap();
            let ta: Vec<&str> = a.iter().map(|&i| words[i]).collect();
            let tb: Vec<&str> = b.iter().map(|&i| words[i]).collect();
            let (sa, sb) = (ta.join(" "), tb.join(" "));
            let joined = format!("{sa} {sb}");
            let c = corpus_of(&[("A", &sa), ("A", &sb), ("A", &joined)]);
            let m = vectorize(&c, &vocab).unwrap().to_dense();
            for v in 0..4 {
                prop_assert_eq!(m[0][v] + m[1][v], m[2][v]);
            }
        }

        #[test]
        fn slicing_partitions(ts in prop::collection::vec(-50i64..150, 0..60)) {
            let recs: Vec<ReviewRecord> = ts.iter().map(|&t| record("A", 3, t, "x")).collect();
            let out = slice_by_time(&recs, &[0, 25, 50, 100]).unwrap();
            let kept: usize = out.slices.iter().map(|s| s.len()).sum();
            prop_assert_eq!(kept + out.dropped, recs.len());
            for s in &out.slices {
                prop_assert!(s.documents.iter().all(|d| d.record.timestamp >= s.start && d.record.timestamp < s.end));
            }
        }
    }
}
