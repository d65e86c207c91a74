//! Acceptance suite: the desk-scale overfit experiment and its two
//! directional trends. Trains two full models (with and without the mask
//! distribution term) on one CPU core; expect a multi-hour runtime.

use std::path::PathBuf;
use std::sync::OnceLock;

use avatar_cli::config::RunConfig;
use avatar_cli::ops;
use avatar_cli::scene::{gen_data, load_scene, Scene};
use avatar_cli::train::{load_model, train};
use avatar_core::model::Model;
use avatar_core::optim::ParamStore;

const TRAIN_VIEWS: [usize; 8] = [0, 2, 4, 6, 8, 10, 12, 14];
const HELD_OUT: [usize; 8] = [1, 3, 5, 7, 9, 11, 13, 15];
const INPUTS_4: [usize; 4] = [0, 4, 8, 12];
const SEED: u64 = 7;

fn overfit_config() -> RunConfig {
    RunConfig {
        // single-frame batches are deliberately excluded so that multi-frame
        // conditioning is the trained regime (see the multi-view trend test)
        min_frames: 2,
        max_frames: 4,
        iterations: 2000,
        warmup: 100,
        // at 1e-3 the subject gets memorized into the weights and extra input
        // views stop helping; 1e-4 trains better here and keeps the model
        // dependent on the image tokens
        peak_lr: 1e-4,
        train_views: TRAIN_VIEWS.to_vec(),
        ..RunConfig::default()
    }
}

struct Artifacts {
    scene: Scene,
    /// default weights (lambda_dis = 0.5)
    with_dis: (Model, ParamStore, PathBuf),
    /// identical run with lambda_dis = 0
    without_dis: (Model, ParamStore),
}

fn artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = std::env::temp_dir().join("avatar_acceptance");
        let data = base.join("data");
        let cfg = overfit_config();
        gen_data(&cfg, SEED, &data).expect("gen-data");
        let scene = load_scene(&data).expect("load scene");

        let run_a = base.join("run_dis");
        let report_a = train(&cfg, &scene, SEED, &run_a).expect("train with l_dis");
        let (model_a, store_a) = load_model(&report_a.checkpoint).expect("load");

        let mut cfg_b = cfg.clone();
        cfg_b.weights.dis = 0.0;
        let run_b = base.join("run_nodis");
        let report_b = train(&cfg_b, &scene, SEED, &run_b).expect("train without l_dis");
        let (model_b, store_b) = load_model(&report_b.checkpoint).expect("load");

        Artifacts {
            scene,
            with_dis: (model_a, store_a, report_a.csv),
            without_dis: (model_b, store_b),
        }
    })
}

// ---- criterion 7: overfit experiment ----

#[test]
fn overfit_psnr_targets() {
    let a = artifacts();
    let (model, store, csv) = &a.with_dis;
    let train_res =
        ops::evaluate(model, store, &a.scene, &INPUTS_4, &TRAIN_VIEWS, 0).unwrap();
    assert!(
        train_res.mean_psnr >= 25.0,
        "training-view PSNR {:.3} < 25",
        train_res.mean_psnr
    );
    let held = ops::evaluate(model, store, &a.scene, &INPUTS_4, &HELD_OUT, 0).unwrap();
    assert!(held.mean_psnr >= 20.0, "held-out PSNR {:.3} < 20", held.mean_psnr);

    // smoothed (100-step) training loss decreased over the run
    let text = std::fs::read_to_string(csv).unwrap();
    let totals: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 2000);
    let head: f64 = totals[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = totals[1900..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "smoothed loss did not decrease: {head} -> {tail}");
}

// ---- criterion 8: multi-view trend ----

#[test]
fn multi_view_trend_majority() {
    let a = artifacts();
    let (model, store, _) = &a.with_dis;
    let mut wins = 0;
    for seed in [0u64, 1, 2] {
        let one = ops::evaluate(model, store, &a.scene, &[0], &HELD_OUT, seed).unwrap();
        let four = ops::evaluate(model, store, &a.scene, &INPUTS_4, &HELD_OUT, seed).unwrap();
        if four.mean_psnr >= one.mean_psnr {
            wins += 1;
        }
        eprintln!(
            "seed {seed}: held-out PSNR 1 view {:.4}, 4 views {:.4}",
            one.mean_psnr, four.mean_psnr
        );
    }
    assert!(wins >= 2, "4-view inputs beat 1-view on only {wins}/3 seeds");
}

// ---- criterion 9: mask-distribution trend ----

#[test]
fn mask_distribution_suppresses_scales() {
    let a = artifacts();
    let mean_sigma = |model: &Model, store: &ParamStore| -> f64 {
        let images: Vec<Vec<f64>> =
            INPUTS_4.iter().map(|&v| a.scene.views[v].rgb.clone()).collect();
        let rec = ops::reconstruct(model, store, &images, 0).unwrap();
        let s = rec.canonical.scales.data();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let (model_a, store_a, _) = &a.with_dis;
    let (model_b, store_b) = &a.without_dis;
    let with_dis = mean_sigma(model_a, store_a);
    let without_dis = mean_sigma(model_b, store_b);
    eprintln!("mean sigma with l_dis {with_dis:.6}, without {without_dis:.6}");
    assert!(
        with_dis < without_dis,
        "mean sigma with l_dis ({with_dis}) not below without ({without_dis})"
    );
}
