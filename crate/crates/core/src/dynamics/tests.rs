use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::btm::{evaluate, Noise, ObjectiveOptions};
use crate::numerics::fisher_z_cdf;
use crate::synthetic::{generate_stream, StreamSpec, SyntheticStream};

fn meta_cfg() -> MetaConfig {
    MetaConfig::default()
}

#[test]
fn truth_table() {
    let out = meta_decision(0.3, 0.3, 25, 2, &meta_cfg()).unwrap();
    assert_eq!(out.phi, 0.5);
    assert_eq!(out.next_gamma, 0.5);
    assert_eq!(out.control, ControlSer::Continue);

    let out = meta_decision(0.9, 0.0, 25, 2, &meta_cfg()).unwrap();
    let phi = fisher_z_cdf(0.9, 0.0, 25, FisherPoint::FisherZ).unwrap();
    assert_eq!(out.phi, phi);
    assert_eq!(out.next_gamma, 0.05);
    assert_eq!(out.control, ControlSer::Continue);

    let out = meta_decision(0.0, 0.9, 25, 2, &meta_cfg()).unwrap();
    assert!(out.phi > 0.95);
    assert_eq!(out.control, ControlSer::Break);
}

#[test]
fn first_slice_never_breaks_and_lower_direction_flips() {
    let out = meta_decision(0.0, 0.9, 25, 0, &meta_cfg()).unwrap();
    assert_eq!(out.control, ControlSer::Continue);
    let lower = MetaConfig {
        direction: BreakDirection::Lower,
        ..meta_cfg()
    };
    assert_eq!(meta_decision(0.9, 0.0, 25, 1, &lower).unwrap().control, ControlSer::Break);
    assert_eq!(meta_decision(0.0, 0.9, 25, 1, &lower).unwrap().control, ControlSer::Continue);
}

#[test]
fn degenerate_and_ablated_weights() {
    let out = meta_decision(0.5, 0.1, 3, 1, &meta_cfg()).unwrap();
    assert!(out.degenerate);
    assert_eq!(out.next_gamma, 0.5);
    let ablated = MetaConfig {
        no_meta: true,
        ..meta_cfg()
    };
    assert_eq!(meta_decision(0.9, 0.0, 25, 1, &ablated).unwrap().next_gamma, 0.0);
    // Breaks still fire without the meta weight.
    assert_eq!(meta_decision(0.0, 0.9, 25, 1, &ablated).unwrap().control, ControlSer::Break);
}

#[test]
fn first_weight_from_slice_zero_rho() {
    let mut meta = MetaState::new(Mode::Dbtm);
    let out = meta_decision(0.0, 0.0, 25, 0, &meta_cfg()).unwrap();
    meta.record(0, out.rho, out.phi, out.next_gamma);
    assert_eq!(meta.gamma_history, vec![0.0, 0.5]);
    let out = meta_decision(0.9, 0.0, 25, 0, &meta_cfg()).unwrap();
    meta.record(0, out.rho, out.phi, out.next_gamma);
    assert_eq!(meta.gamma_history, vec![0.0, 0.05]);
}

#[test]
fn self_supervised_surrogate() {
    let a = BrandRanking::from_scores(vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(self_supervised_gamma(&a, &a).unwrap(), 1.0);
    let r = BrandRanking::from_scores(vec![4.0, 3.0, 2.0, 1.0]);
    assert_eq!(self_supervised_gamma(&a, &r).unwrap(), -1.0);
    let b = BrandRanking::from_scores(vec![1.0, 2.0, 4.0, 3.0]);
    assert!((self_supervised_gamma(&b, &a).unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn constant_scores_count_as_zero_correlation() {
    let prev = [0.1, 0.2, 0.3, 0.4];
    let (rho, n) = current_rho(&[0.5; 4], 1.0, RankingTarget::Previous(&prev)).unwrap();
    assert_eq!((rho, n), (0.0, 4));
}

#[test]
fn interpolation_examples() {
    let prev = Matrix::from_vec(1, 3, vec![1.0, 2.0, 4.0]).unwrap();
    let pf = Matrix::from_vec(1, 3, vec![3.0, 2.0, 0.5]).unwrap();
    let mixed = meta_initialize_beta(&prev, &pf, 0.05, Interpolation::Linear).unwrap();
    for v in 0..3 {
        assert_eq!(mixed.get(0, v), 0.95 * prev.get(0, v) + 0.05 * pf.get(0, v));
    }
    assert_eq!(meta_initialize_beta(&prev, &pf, 1.0, Interpolation::Linear).unwrap(), pf);
    assert_eq!(meta_initialize_beta(&prev, &pf, 0.0, Interpolation::Linear).unwrap(), prev);
    for g in [0.05, 0.3, 0.9] {
        assert_eq!(meta_initialize_beta(&prev, &prev, g, Interpolation::Linear).unwrap(), prev);
    }
    let geo = meta_initialize_beta(&prev, &pf, 0.5, Interpolation::Log).unwrap();
    assert!((geo.get(0, 0) - 3f64.sqrt()).abs() < 1e-12);
    let wrong = Matrix::zeros(2, 3);
    assert!(matches!(
        meta_initialize_beta(&prev, &wrong, 0.5, Interpolation::Linear),
        Err(DbtmError::Shape(_))
    ));
}

proptest! {
    #[test]
    fn interpolation_is_convex(
        pairs in prop::collection::vec((0.001f64..10.0, 0.001f64..10.0), 1..20),
        gamma in 0.05f64..=1.0,
        log in any::<bool>(),
    ) {
        let n = pairs.len();
        let prev = Matrix::from_vec(1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
        let pf = Matrix::from_vec(1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
        let mode = if log { Interpolation::Log } else { Interpolation::Linear };
        let out = meta_initialize_beta(&prev, &pf, gamma, mode).unwrap();
        for (v, &(a, b)) in pairs.iter().enumerate() {
            let x = out.get(0, v);
            prop_assert!(x >= a.min(b) * (1.0 - 1e-12) && x <= a.max(b) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn weights_stay_in_range(rho in -0.99f64..0.99, prev in -0.99f64..0.99, brands in 4usize..200) {
        let out = meta_decision(rho, prev, brands, 1, &meta_cfg()).unwrap();
        prop_assert!((0.05..=1.0).contains(&out.next_gamma));
    }

    #[test]
    fn lowering_rho_never_cancels_a_break(
        rho in -0.99f64..0.99, drop in 0.0f64..1.0, prev in -0.99f64..0.99, brands in 4usize..100,
    ) {
        let lower = (rho - drop).max(-0.99);
        let a = meta_decision(rho, prev, brands, 1, &meta_cfg()).unwrap();
        let b = meta_decision(lower, prev, brands, 1, &meta_cfg()).unwrap();
        if a.control == ControlSer::Break {
            prop_assert_eq!(b.control, ControlSer::Break);
        }
    }
}

fn tiny_stream(seed: u64) -> SyntheticStream {
    generate_stream(&StreamSpec {
        brands: 4,
        slices: 3,
        docs_per_slice: 120,
        validation_docs: 40,
        test_docs: 40,
        vocab: 60,
        topics: 3,
        topic_words: 8,
        polarity_words: 4,
        mean_length: 15.0,
        seed,
        ..StreamSpec::default()
    })
    .unwrap()
}

fn tiny_config(seed: u64) -> StreamConfig {
    StreamConfig {
        topics: 3,
        cavi: CaviConfig {
            max_iters: 30,
            ..CaviConfig::default()
        },
        optimizer: OptimizerConfig {
            batch_size: 32,
            max_steps: 20,
            ..OptimizerConfig::default()
        },
        transition: TransitionConfig {
            checkpoint_interval: 10,
            ..TransitionConfig::default()
        },
        seed,
        ..StreamConfig::default()
    }
}

#[test]
fn chained_priors_pass_through_and_zero_kl() {
    let stream = tiny_stream(1);
    let cfg = tiny_config(1);
    let (first, _) = initialize_time_zero(&stream.slices[0].split, &cfg).unwrap();
    let prior = chain_priors(&first.state, cfg.pf_priors, &cfg.transition);
    assert_eq!(prior.x.mean, first.state.vp.x_loc);
    assert_eq!(prior.x.scale, 0.1);
    assert_eq!(prior.eta.mean, first.state.vp.eta_loc.as_slice());

    let mut state = first.state.clone();
    state.prior = prior;
    let vp = &mut state.vp;
    vp.x_logscale.iter_mut().for_each(|v| *v = 0.1f64.ln());
    vp.eta_logscale.as_mut_slice().iter_mut().for_each(|v| *v = 0.1f64.ln());
    vp.beta_logscale.as_mut_slice().iter_mut().for_each(|v| *v = 0.1f64.ln());
    let data = &stream.slices[0].split.train;
    let docs: Vec<usize> = (0..8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Noise::draw(&mut rng, docs.len(), 3, 60, 4);
    let ev = evaluate(&state, data, &docs, &noise, &ObjectiveOptions::default()).unwrap();
    assert!(ev.terms.x.abs() < 1e-9, "{}", ev.terms.x);
    assert!(ev.terms.eta.abs() < 1e-9, "{}", ev.terms.eta);
    assert!(ev.terms.beta.abs() < 1e-9, "{}", ev.terms.beta);
}

#[test]
fn time_zero_sets_the_first_weight() {
    let stream = tiny_stream(2);
    let (result, meta) = initialize_time_zero(&stream.slices[0].split, &tiny_config(2)).unwrap();
    assert_eq!(meta.gamma_history.len(), 2);
    assert_eq!(meta.gamma_history[0], 0.0);
    assert!(meta.gamma_history[1] >= 0.05);
    assert_eq!(result.steps, 20);
    assert_eq!(meta.rho_history.len(), 1);
}

#[test]
fn single_slice_stream_matches_static_training() {
    let stream = tiny_stream(3);
    let cfg = tiny_config(3);
    let (result, meta) = initialize_time_zero(&stream.slices[0].split, &cfg).unwrap();
    let tl = train_stream(&stream.splits()[..1], &cfg, None, |_| Ok(())).unwrap();
    assert_eq!(tl.slices[0].state, result.state);
    assert_eq!(tl.meta, meta);
}

#[test]
fn stream_is_deterministic_and_resumable() {
    let stream = tiny_stream(4);
    let cfg = tiny_config(4);
    let splits = stream.splits();
    let mut calls = 0;
    let a = train_stream(&splits, &cfg, None, |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 3);
    let b = train_stream(&splits, &cfg, None, |_| Ok(())).unwrap();
    assert_eq!(a.meta, b.meta);
    for (x, y) in a.slices.iter().zip(&b.slices) {
        assert_eq!(x.state, y.state);
        assert_eq!(x.pf, y.pf);
    }

    let partial = train_stream(&splits[..2], &cfg, None, |_| Ok(())).unwrap();
    let resumed = train_stream(&splits, &cfg, Some(partial), |_| Ok(())).unwrap();
    assert_eq!(resumed.meta, a.meta);
    assert_eq!(resumed.slices[2].state, a.slices[2].state);
    assert!(a.meta.gamma_history.iter().skip(1).all(|g| (0.05..=1.0).contains(g)));
    assert_eq!(a.meta.gamma_history.len(), 4);
}

#[test]
fn ablation_zeroes_every_weight() {
    let stream = tiny_stream(5);
    let cfg = StreamConfig {
        no_meta: true,
        ..tiny_config(5)
    };
    let tl = train_stream(&stream.splits(), &cfg, None, |_| Ok(())).unwrap();
    assert!(tl.meta.gamma_history.iter().all(|&g| g == 0.0));
    assert!(tl.slices.iter().all(|s| s.gamma_used == 0.0));
}

#[test]
fn unsupervised_mode_trains() {
    let stream = tiny_stream(6);
    let cfg = StreamConfig {
        mode: Mode::ODbtm,
        ..tiny_config(6)
    };
    let tl = train_stream(&stream.splits(), &cfg, None, |_| Ok(())).unwrap();
    assert_eq!(tl.len(), 3);
    assert!(tl.failure.is_none());
    assert!(tl.meta.rho_history.iter().all(|r| (-1.0..=1.0).contains(r)));
}

#[test]
fn failing_slice_keeps_earlier_results() {
    let stream = tiny_stream(7);
    let mut splits = stream.splits();
    let other = generate_stream(&StreamSpec {
        brands: 4,
        slices: 1,
        docs_per_slice: 40,
        validation_docs: 8,
        test_docs: 8,
        vocab: 50,
        topics: 3,
        topic_words: 8,
        polarity_words: 4,
        ..StreamSpec::default()
    })
    .unwrap();
    splits[2] = other.slices[0].split.clone();
    let tl = train_stream(&splits, &tiny_config(7), None, |_| Ok(())).unwrap();
    assert_eq!(tl.len(), 2);
    let failure = tl.failure.unwrap();
    assert_eq!(failure.slice_id, 2);
    assert!(failure.message.contains("V=50"), "{}", failure.message);
    assert_eq!(tl.meta.gamma_history.len(), 3);
}

mod persistence {
    use super::*;
    use std::fs;

    fn trained() -> TrainedTimeline {
        let stream = tiny_stream(8);
        train_stream(&stream.splits()[..2], &tiny_config(8), None, |_| Ok(())).unwrap()
    }

    #[test]
    fn slice_round_trip_is_exact() {
        let tl = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_slice(&path, &tl.slices[1], &tl.meta, &tl.config).unwrap();
        let (result, meta, config) = load_slice(&path, Some(&tl.config)).unwrap();
        assert_eq!(result, tl.slices[1]);
        assert_eq!(meta, tl.meta);
        assert_eq!(config, tl.config);
        let bits = |s: &BTMState| s.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&result.state), bits(&tl.slices[1].state));
    }

    #[test]
    fn state_round_trip_and_digest_policy() {
        let tl = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let digest = config_digest(&tl.config).unwrap();
        save_state(&path, &tl.slices[0].state, digest).unwrap();
        assert_eq!(load_state(&path, Some(&digest)).unwrap(), tl.slices[0].state);
        // A different config only warns.
        let other = config_digest(&tiny_config(99)).unwrap();
        assert_ne!(other, digest);
        assert_eq!(load_state(&path, Some(&other)).unwrap(), tl.slices[0].state);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let tl = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_slice(&path, &tl.slices[0], &tl.meta, &tl.config).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_slice(&path, None).unwrap_err();
            assert!(matches!(err, DbtmError::Checkpoint { .. }), "{err}");
        }
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &bumped).unwrap();
        let err = load_slice(&path, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
        assert!(matches!(err, DbtmError::VersionMismatch { found: 7, expected: 1 }));
    }

    #[test]
    fn manifest_round_trip() {
        let tl = trained();
        let dir = tempfile::tempdir().unwrap();
        assert!(read_manifest(dir.path(), None).unwrap().is_none());
        write_manifest(dir.path(), &tl).unwrap();
        let back = read_manifest(dir.path(), Some(&tl.config)).unwrap().unwrap();
        assert_eq!(back, tl);
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(text.contains(&digest_hex(&config_digest(&tl.config).unwrap())));
    }

    #[test]
    fn digest_ignores_field_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [1, 2], "a": 1}"#).unwrap();
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
    }
}
