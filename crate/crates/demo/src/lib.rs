//! Browser bindings: the meta-weight rule, the relaxed categorical sampler
//! and a small synthetic training run. Each operation has a plain Rust form
//! returning JSON text (tested natively) and a `wasm_bindgen` wrapper.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use dbtm_core::btm::OptimizerConfig;
use dbtm_core::dynamics::{meta_decision, train_stream, ControlSer, MetaConfig, Mode, StreamConfig, TransitionConfig};
use dbtm_core::evaluation::topic_top_words;
use dbtm_core::numerics::{gumbel_softmax_sample, spearman_from_scores};
use dbtm_core::synthetic::{generate_stream, StreamSpec};

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Fisher-z test outcome and next meta weight for one checkpoint.
pub fn meta_step_json(rho: f64, rho_prev: f64, brands: u32, slice: u32, no_meta: bool) -> Result<String, String> {
    let cfg = MetaConfig {
        no_meta,
        ..MetaConfig::default()
    };
    let out = meta_decision(rho, rho_prev, brands as usize, slice as usize, &cfg).map_err(err)?;
    Ok(json!({
        "phi": out.phi,
        "gamma": out.next_gamma,
        "break": out.control == ControlSer::Break,
        "degenerate": out.degenerate,
    })
    .to_string())
}

/// `draws` relaxed one-hot samples: their mean, how often each class is the
/// argmax, the softmax of the logits and the first few samples.
pub fn gumbel_json(logits: &[f64], tau: f64, draws: u32, seed: u32) -> Result<String, String> {
    if logits.is_empty() || draws == 0 {
        return Err("need at least one logit and one draw".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let n = logits.len();
    let mut mean = vec![0.0; n];
    let mut wins = vec![0u32; n];
    let mut first = Vec::new();
    for i in 0..draws {
        let s = gumbel_softmax_sample(logits, tau, &mut rng).map_err(err)?;
        let arg = (0..n).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap_or(0);
        wins[arg] += 1;
        for (m, v) in mean.iter_mut().zip(&s) {
            *m += v / f64::from(draws);
        }
        if i < 5 {
            first.push(s);
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let softmax: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
    let freq: Vec<f64> = wins.iter().map(|&w| f64::from(w) / f64::from(draws)).collect();
    Ok(json!({ "mean": mean, "argmax_freq": freq, "softmax": softmax, "samples": first }).to_string())
}

/// Planted stream small enough for a browser tab: 6 brands, 4 slices.
pub fn demo_spec(seed: u32) -> StreamSpec {
    StreamSpec {
        brands: 6,
        slices: 4,
        docs_per_slice: 300,
        validation_docs: 60,
        test_docs: 60,
        vocab: 150,
        topics: 4,
        topic_words: 15,
        polarity_words: 8,
        mean_length: 25.0,
        seed: u64::from(seed),
        ..StreamSpec::default()
    }
}

/// Trains the demo stream and reports planted against recovered brand
/// scores per slice, the meta weights and topic 0 at polarity -1, 0, +1.
pub fn train_json(seed: u32, steps: u32, no_meta: bool, labels_first_only: bool) -> Result<String, String> {
    let stream = generate_stream(&demo_spec(seed)).map_err(err)?;
    let steps = u64::from(steps.max(1));
    let cfg = StreamConfig {
        topics: 4,
        optimizer: OptimizerConfig {
            batch_size: 64,
            max_steps: steps,
            lr: 0.03,
            ..OptimizerConfig::default()
        },
        transition: TransitionConfig {
            checkpoint_interval: steps,
            ..TransitionConfig::default()
        },
        mode: if labels_first_only { Mode::ODbtm } else { Mode::Dbtm },
        no_meta,
        seed: u64::from(seed),
        ..StreamConfig::default()
    };
    let tl = train_stream(&stream.splits(), &cfg, None, |_| Ok(())).map_err(err)?;
    if let Some(f) = &tl.failure {
        return Err(format!("slice {} failed: {}", f.slice_id, f.message));
    }
    let slices: Vec<serde_json::Value> = tl
        .slices
        .iter()
        .zip(&stream.slices)
        .map(|(r, s)| {
            let vp = &r.state.vp;
            let topic0 = topic_top_words(&vp.beta_means(), &vp.eta_loc, &[-1.0, 0.0, 1.0], 6)
                .map(|t| t.cells[0].clone())
                .unwrap_or_default();
            json!({
                "planted": s.x,
                "scores": r.scores.normalized,
                "rho": spearman_from_scores(&r.scores.raw, &s.x).unwrap_or(0.0),
                "gamma": r.gamma_used,
                "topic0": topic0
                    .iter()
                    .map(|ws| ws.iter().map(|w| format!("w{w:03}")).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({ "slices": slices }).to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = metaStep)]
pub fn meta_step(rho: f64, rho_prev: f64, brands: u32, slice: u32, no_meta: bool) -> Result<String, JsValue> {
    js(meta_step_json(rho, rho_prev, brands, slice, no_meta))
}

#[wasm_bindgen(js_name = gumbelDraws)]
pub fn gumbel_draws(logits: &[f64], tau: f64, draws: u32, seed: u32) -> Result<String, JsValue> {
    js(gumbel_json(logits, tau, draws, seed))
}

#[wasm_bindgen(js_name = trainDemo)]
pub fn train_demo(seed: u32, steps: u32, no_meta: bool, labels_first_only: bool) -> Result<String, JsValue> {
    js(train_json(seed, steps, no_meta, labels_first_only))
}
