//! Binary checkpoints: a fixed header followed by named little-endian f64
//! tensors, plus a JSON manifest per timeline.
//!
//! Header layout: `b"DBTM"`, u32 format version, u64 D, K, V, B, T,
//! 32-byte SHA-256 config digest, u32 tensor count. Each tensor is
//! u32 name length, UTF-8 name, u32 rank, u64 dims, then the values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FailureRecord, MetaState, Mode, SliceResult, StreamConfig, TrainedTimeline};
use crate::btm::{
    AdamState, BTMState, BetaPrior, BrandScores, ClassifierParams, GammaPrior, GaussianPrior, PriorSpec,
    VariationalParams,
};
use crate::error::{DbtmError, Result};
use crate::io_util::write_atomic;
use crate::matrix::Matrix;
use crate::pf::{PFPriors, PFState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DBTM";
const MANIFEST: &str = "manifest.json";

/// SHA-256 of the canonical JSON form (object keys sorted).
pub fn config_digest<T: Serialize>(config: &T) -> Result<[u8; 32]> {
    // serde_json::Value keeps object keys in a BTreeMap, so this is sorted.
    let value = serde_json::to_value(config)?;
    let bytes = serde_json::to_vec(&value)?;
    Ok(Sha256::digest(&bytes).into())
}

pub fn digest_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    docs: u64,
    topics: u64,
    vocab: u64,
    brands: u64,
    slices: u64,
    digest: [u8; 32],
}

struct Tensor {
    dims: Vec<u64>,
    data: Vec<f64>,
}

#[derive(Default)]
struct TensorSet {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorSet {
    fn put(&mut self, name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) {
        self.tensors.insert(name.into(), Tensor { dims, data });
    }

    fn vec(&mut self, name: impl Into<String>, data: &[f64]) {
        self.put(name, vec![data.len() as u64], data.to_vec());
    }

    fn matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.put(name, vec![m.rows() as u64, m.cols() as u64], m.as_slice().to_vec());
    }

    fn scalar(&mut self, name: impl Into<String>, v: f64) {
        self.put(name, vec![], vec![v]);
    }

    fn encode(&self, header: &Header) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [header.docs, header.topics, header.vocab, header.brands, header.slices] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&header.digest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> DbtmError {
        DbtmError::Checkpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated at byte {} (wanted {n} more)", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Header, Tensors)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DbtmError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header = Header {
        docs: r.u64()?,
        topics: r.u64()?,
        vocab: r.u64()?,
        brands: r.u64()?,
        slices: r.u64()?,
        digest: r.take(32)?.try_into().expect("32 bytes"),
    };
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| r.fail(format!("tensor {name} has an impossible size")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor { dims, data });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((
        header,
        Tensors {
            map: tensors,
            path: path.to_path_buf(),
        },
    ))
}

struct Tensors {
    map: BTreeMap<String, Tensor>,
    path: PathBuf,
}

impl Tensors {
    fn fail(&self, message: String) -> DbtmError {
        DbtmError::Checkpoint {
            path: self.path.clone(),
            message,
        }
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| self.fail(format!("missing tensor {name}")))
    }

    fn vec(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(self.fail(format!("tensor {name} should be a vector")));
        }
        Ok(t.data.clone())
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        if t.dims.len() != 2 {
            return Err(self.fail(format!("tensor {name} should be a matrix")));
        }
        Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.data.clone())
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if !t.dims.is_empty() {
            return Err(self.fail(format!("tensor {name} should be a scalar")));
        }
        Ok(t.data[0])
    }

    fn count(&self, name: &str) -> Result<u64> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 || v > 2f64.powi(53) {
            return Err(self.fail(format!("tensor {name} should hold a count, got {v}")));
        }
        Ok(v as u64)
    }

    fn counts(&self, name: &str) -> Result<Vec<u64>> {
        self.vec(name)?
            .into_iter()
            .map(|v| {
                if v < 0.0 || v.fract() != 0.0 {
                    Err(self.fail(format!("tensor {name} should hold counts")))
                } else {
                    Ok(v as u64)
                }
            })
            .collect()
    }

    fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.vec(name)?
            .into_iter()
            .map(|v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(self.fail(format!("tensor {name} should hold bytes")))
                }
            })
            .collect()
    }
}

fn put_state(ts: &mut TensorSet, s: &BTMState) {
    let vp = &s.vp;
    ts.matrix("vp.theta_loc", &vp.theta_loc);
    ts.matrix("vp.theta_logscale", &vp.theta_logscale);
    ts.matrix("vp.beta_loc", &vp.beta_loc);
    ts.matrix("vp.beta_logscale", &vp.beta_logscale);
    ts.matrix("vp.eta_loc", &vp.eta_loc);
    ts.matrix("vp.eta_logscale", &vp.eta_logscale);
    ts.vec("vp.x_loc", &vp.x_loc);
    ts.vec("vp.x_logscale", &vp.x_logscale);
    ts.matrix("clf.weights", &s.clf.weights);
    ts.vec("clf.bias", &s.clf.bias);

    ts.vec("prior.theta", &[s.prior.theta.shape, s.prior.theta.rate]);
    match &s.prior.beta {
        BetaPrior::Gamma(g) => ts.vec("prior.beta.gamma", &[g.shape, g.rate]),
        BetaPrior::LogNormal { loc, scale } => {
            ts.matrix("prior.beta.loc", loc);
            ts.scalar("prior.beta.scale", *scale);
        }
    }
    ts.vec("prior.eta.mean", &s.prior.eta.mean);
    ts.scalar("prior.eta.scale", s.prior.eta.scale);
    ts.vec("prior.x.mean", &s.prior.x.mean);
    ts.scalar("prior.x.scale", s.prior.x.scale);

    ts.scalar("adam.t", s.adam.t as f64);
    let rows: Vec<f64> = s.adam.theta_row_t.iter().map(|&t| t as f64).collect();
    ts.vec("adam.theta_row_t", &rows);
    ts.scalar("adam.blocks", s.adam.m.len() as f64);
    for (i, (m, v)) in s.adam.m.iter().zip(&s.adam.v).enumerate() {
        ts.vec(format!("adam.m.{i:02}"), m);
        ts.vec(format!("adam.v.{i:02}"), v);
    }
    ts.scalar("state.step", s.step as f64);
    ts.scalar("state.lr", s.lr);
    ts.scalar("state.consecutive_skips", s.consecutive_skips as f64);
}

fn get_state(ts: &Tensors) -> Result<BTMState> {
    let vp = VariationalParams {
        theta_loc: ts.matrix("vp.theta_loc")?,
        theta_logscale: ts.matrix("vp.theta_logscale")?,
        beta_loc: ts.matrix("vp.beta_loc")?,
        beta_logscale: ts.matrix("vp.beta_logscale")?,
        eta_loc: ts.matrix("vp.eta_loc")?,
        eta_logscale: ts.matrix("vp.eta_logscale")?,
        x_loc: ts.vec("vp.x_loc")?,
        x_logscale: ts.vec("vp.x_logscale")?,
    };
    let clf = ClassifierParams {
        weights: ts.matrix("clf.weights")?,
        bias: ts.vec("clf.bias")?,
    };
    let pair = |name: &str| -> Result<GammaPrior> {
        let v = ts.vec(name)?;
        match v[..] {
            [shape, rate] => Ok(GammaPrior { shape, rate }),
            _ => Err(ts.fail(format!("tensor {name} should have 2 entries"))),
        }
    };
    let beta = if ts.has("prior.beta.gamma") {
        BetaPrior::Gamma(pair("prior.beta.gamma")?)
    } else {
        BetaPrior::LogNormal {
            loc: ts.matrix("prior.beta.loc")?,
            scale: ts.scalar("prior.beta.scale")?,
        }
    };
    let prior = PriorSpec {
        theta: pair("prior.theta")?,
        beta,
        eta: GaussianPrior {
            mean: ts.vec("prior.eta.mean")?,
            scale: ts.scalar("prior.eta.scale")?,
        },
        x: GaussianPrior {
            mean: ts.vec("prior.x.mean")?,
            scale: ts.scalar("prior.x.scale")?,
        },
    };
    let blocks = ts.count("adam.blocks")? as usize;
    let adam = AdamState {
        t: ts.count("adam.t")?,
        theta_row_t: ts.counts("adam.theta_row_t")?,
        m: (0..blocks).map(|i| ts.vec(&format!("adam.m.{i:02}"))).collect::<Result<_>>()?,
        v: (0..blocks).map(|i| ts.vec(&format!("adam.v.{i:02}"))).collect::<Result<_>>()?,
    };
    let skips = ts.count("state.consecutive_skips")?;
    let state = BTMState {
        vp,
        clf,
        prior,
        adam,
        step: ts.count("state.step")?,
        lr: ts.scalar("state.lr")?,
        consecutive_skips: u32::try_from(skips).map_err(|_| ts.fail("skip counter overflows".into()))?,
    };
    check_state_shapes(&state).map_err(|e| ts.fail(e.to_string()))?;
    Ok(state)
}

fn check_state_shapes(s: &BTMState) -> Result<()> {
    let vp = &s.vp;
    let (d, k, v, b) = (vp.docs(), vp.topics(), vp.vocab(), vp.brands());
    let ok = vp.theta_logscale.shape() == (d, k)
        && vp.beta_loc.shape() == (k, v)
        && vp.beta_logscale.shape() == (k, v)
        && vp.eta_loc.shape() == (k, v)
        && vp.eta_logscale.shape() == (k, v)
        && vp.x_logscale.len() == b
        && s.clf.weights.shape() == (3, v)
        && s.clf.bias.len() == 3
        && s.prior.eta.mean.len() == k * v
        && s.prior.x.mean.len() == b
        && s.adam.theta_row_t.len() == d
        && s.adam.m.len() == 10
        && s.adam.v.len() == 10;
    if ok {
        Ok(())
    } else {
        Err(DbtmError::Shape("stored tensors have inconsistent dimensions".into()))
    }
}

fn state_header(s: &BTMState, slices: u64, digest: [u8; 32]) -> Header {
    Header {
        docs: s.vp.docs() as u64,
        topics: s.vp.topics() as u64,
        vocab: s.vp.vocab() as u64,
        brands: s.vp.brands() as u64,
        slices,
        digest,
    }
}

fn check_header(path: &Path, header: &Header, state: &BTMState, expected_digest: Option<&[u8; 32]>) -> Result<()> {
    let dims = state_header(state, header.slices, header.digest);
    if dims != *header {
        return Err(DbtmError::Checkpoint {
            path: path.to_path_buf(),
            message: "header dimensions disagree with the stored tensors".into(),
        });
    }
    if let Some(d) = expected_digest.filter(|d| **d != header.digest) {
        log::warn!(
            "{}: config digest {} differs from the supplied config ({}); using the stored state",
            path.display(),
            digest_hex(&header.digest),
            digest_hex(d)
        );
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DbtmError::io(path, e))
}

/// Writes a bare training state (for mid-slice resumption).
pub fn save_state(path: &Path, state: &BTMState, digest: [u8; 32]) -> Result<()> {
    let mut ts = TensorSet::default();
    put_state(&mut ts, state);
    write_atomic(path, &ts.encode(&state_header(state, 1, digest)))
}

/// Reads a state written by [`save_state`]. A digest differing from
/// `expected_digest` only triggers a warning.
pub fn load_state(path: &Path, expected_digest: Option<&[u8; 32]>) -> Result<BTMState> {
    let bytes = read_file(path)?;
    let (header, ts) = decode(path, &bytes)?;
    let state = get_state(&ts)?;
    check_header(path, &header, &state, expected_digest)?;
    Ok(state)
}

fn mode_code(m: Mode) -> f64 {
    match m {
        Mode::Dbtm => 0.0,
        Mode::ODbtm => 1.0,
    }
}

/// Writes one trained slice together with the meta-controller histories and
/// the config that produced it.
pub fn save_slice(path: &Path, result: &SliceResult, meta: &MetaState, config: &StreamConfig) -> Result<()> {
    let mut ts = TensorSet::default();
    put_state(&mut ts, &result.state);
    let pf = &result.pf;
    ts.matrix("pf.theta_shape", &pf.theta_shape);
    ts.matrix("pf.theta_rate", &pf.theta_rate);
    ts.matrix("pf.beta_shape", &pf.beta_shape);
    ts.matrix("pf.beta_rate", &pf.beta_rate);
    ts.vec("pf.priors", &[pf.priors.a, pf.priors.b, pf.priors.c, pf.priors.d]);
    ts.vec("pf.elbo_trace", &pf.elbo_trace);
    ts.vec("scores.raw", &result.scores.raw);
    ts.vec("scores.normalized", &result.scores.normalized);
    ts.scalar("slice.id", result.slice_id as f64);
    ts.scalar("slice.gamma_used", result.gamma_used);
    ts.scalar("slice.rho", result.rho);
    ts.scalar("slice.steps", result.steps as f64);
    ts.scalar("slice.stopped_early", f64::from(u8::from(result.stopped_early)));
    ts.scalar("slice.wall_seconds", result.wall_seconds);
    ts.vec("meta.rho_history", &meta.rho_history);
    ts.vec("meta.gamma_history", &meta.gamma_history);
    ts.vec("meta.phi_history", &meta.phi_history);
    ts.scalar("meta.mode", mode_code(meta.mode));
    let json = serde_json::to_vec(config)?;
    ts.vec("config.json", &json.iter().map(|&b| f64::from(b)).collect::<Vec<_>>());
    let digest = config_digest(config)?;
    let header = state_header(&result.state, result.slice_id as u64 + 1, digest);
    write_atomic(path, &ts.encode(&header))
}

/// Reads a slice written by [`save_slice`], returning the stored config.
pub fn load_slice(path: &Path, expected: Option<&StreamConfig>) -> Result<(SliceResult, MetaState, StreamConfig)> {
    let bytes = read_file(path)?;
    let (header, ts) = decode(path, &bytes)?;
    let state = get_state(&ts)?;
    let expected_digest = expected.map(config_digest).transpose()?;
    check_header(path, &header, &state, expected_digest.as_ref())?;
    let priors = match ts.vec("pf.priors")?[..] {
        [a, b, c, d] => PFPriors { a, b, c, d },
        _ => return Err(ts.fail("pf.priors should have 4 entries".into())),
    };
    let pf = PFState {
        theta_shape: ts.matrix("pf.theta_shape")?,
        theta_rate: ts.matrix("pf.theta_rate")?,
        beta_shape: ts.matrix("pf.beta_shape")?,
        beta_rate: ts.matrix("pf.beta_rate")?,
        priors,
        elbo_trace: ts.vec("pf.elbo_trace")?,
    };
    let result = SliceResult {
        slice_id: ts.count("slice.id")? as usize,
        pf,
        scores: BrandScores {
            raw: ts.vec("scores.raw")?,
            normalized: ts.vec("scores.normalized")?,
        },
        gamma_used: ts.scalar("slice.gamma_used")?,
        rho: ts.scalar("slice.rho")?,
        steps: ts.count("slice.steps")?,
        stopped_early: ts.scalar("slice.stopped_early")? != 0.0,
        wall_seconds: ts.scalar("slice.wall_seconds")?,
        state,
    };
    let meta = MetaState {
        rho_history: ts.vec("meta.rho_history")?,
        gamma_history: ts.vec("meta.gamma_history")?,
        phi_history: ts.vec("meta.phi_history")?,
        mode: if ts.scalar("meta.mode")? == 0.0 { Mode::Dbtm } else { Mode::ODbtm },
    };
    let config: StreamConfig = serde_json::from_slice(&ts.bytes("config.json")?)?;
    Ok((result, meta, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSlice {
    pub slice_id: usize,
    pub file: String,
    pub rho: f64,
    pub gamma_used: f64,
    pub steps: u64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_digest: String,
    pub config: StreamConfig,
    pub slices: Vec<ManifestSlice>,
    pub rho_history: Vec<f64>,
    pub gamma_history: Vec<f64>,
    pub failure: Option<FailureRecord>,
}

pub(crate) fn slice_file_name(t: usize) -> String {
    format!("slice_{t:03}.ckpt")
}

/// Writes slice files that are not on disk yet and rewrites the manifest.
pub fn write_manifest(dir: &Path, timeline: &TrainedTimeline) -> Result<()> {
    let mut slices = Vec::with_capacity(timeline.len());
    for s in &timeline.slices {
        let file = slice_file_name(s.slice_id);
        let path = dir.join(&file);
        if !path.exists() {
            save_slice(&path, s, &timeline.meta, &timeline.config)?;
        }
        slices.push(ManifestSlice {
            slice_id: s.slice_id,
            file,
            rho: s.rho,
            gamma_used: s.gamma_used,
            steps: s.steps,
            stopped_early: s.stopped_early,
            wall_seconds: s.wall_seconds,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config_digest: digest_hex(&config_digest(&timeline.config)?),
        config: timeline.config.clone(),
        slices,
        rho_history: timeline.meta.rho_history.clone(),
        gamma_history: timeline.meta.gamma_history.clone(),
        failure: timeline.failure.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST), &json)
}

/// Loads a timeline from its manifest and slice files. Returns `None` when
/// the directory holds no manifest.
pub fn read_manifest(dir: &Path, expected: Option<&StreamConfig>) -> Result<Option<TrainedTimeline>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let manifest: Manifest = serde_json::from_slice(&read_file(&path)?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(DbtmError::VersionMismatch {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut slices = Vec::with_capacity(manifest.slices.len());
    let mut meta = MetaState::new(manifest.config.mode);
    for (i, entry) in manifest.slices.iter().enumerate() {
        if entry.slice_id != i {
            return Err(DbtmError::Checkpoint {
                path,
                message: format!("slice {} listed at position {i}", entry.slice_id),
            });
        }
        let (result, slice_meta, _) = load_slice(&dir.join(&entry.file), expected)?;
        meta = slice_meta;
        slices.push(result);
    }
    // The manifest is rewritten after every slice, so its histories are the
    // most recent ones.
    meta.rho_history = manifest.rho_history;
    meta.gamma_history = manifest.gamma_history;
    meta.phi_history.truncate(slices.len());
    Ok(Some(TrainedTimeline {
        slices,
        meta,
        config: manifest.config,
        failure: manifest.failure,
    }))
}
