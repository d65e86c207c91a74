//! Training loop: per iteration, sample input frames and a target view,
//! evaluate the full objective, clip and step AdamW under a cosine schedule.

use std::io::Write;
use std::path::{Path, PathBuf};

use avatar_core::losses::PerceptualPyramid;
use avatar_core::model::{Model, TrainingTarget};
use avatar_core::optim::{clip_grad_norm, cosine_lr, AdamWConfig, LeafCache, ParamStore};
use avatar_core::tensor::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::scene::Scene;
use crate::CliError;

pub const GRAD_CLIP: f64 = 0.1;
pub const LOSS_TERM_NAMES: [&str; 6] = ["rgb", "mask", "perceptual", "dis", "asap", "acap"];

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub csv: PathBuf,
    pub first_loss: f64,
    pub final_loss: f64,
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Trains on `scene`, writing `loss.csv` and checkpoints into `out_dir`.
/// Deterministic per (config, seed, scene).
pub fn train(cfg: &RunConfig, scene: &Scene, seed: u64, out_dir: &Path) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    if scene.meta.width != cfg.image_size || scene.meta.height != cfg.image_size {
        return Err(CliError::Data(format!(
            "scene is {}x{} but config expects {}",
            scene.meta.width, scene.meta.height, cfg.image_size
        )));
    }
    let train_views: Vec<usize> = if cfg.train_views.is_empty() {
        (0..scene.views.len()).collect()
    } else {
        cfg.train_views.clone()
    };
    if let Some(&bad) = train_views.iter().find(|&&v| v >= scene.views.len()) {
        return Err(CliError::Usage(format!("train view index {bad} out of range")));
    }
    std::fs::create_dir_all(out_dir).map_err(data_err)?;

    let model = Model::new(cfg.model_config()).map_err(data_err)?;
    let mut store = model.init_params(seed);
    let pyr = PerceptualPyramid::new(cfg.image_size, cfg.image_size, seed);
    let weights = cfg.weights.to_weights();
    let sched = cfg.lr_schedule();
    let adamw = AdamWConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea1_2a11);

    let csv_path = out_dir.join("loss.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(data_err)?);
    writeln!(csv, "step,lr,{},total", LOSS_TERM_NAMES.join(",")).map_err(data_err)?;

    let ckpt_path = out_dir.join("model.ckpt");
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.iterations {
        let lr = cosine_lr(&sched, step);
        let n_frames = rng.gen_range(cfg.min_frames..=cfg.max_frames).min(train_views.len());
        let mut pool = train_views.clone();
        pool.shuffle(&mut rng);
        let inputs: Vec<Vec<f64>> =
            pool[..n_frames].iter().map(|&v| scene.views[v].rgb.clone()).collect();
        let tgt = &scene.views[*train_views.choose(&mut rng).unwrap()];
        let target = TrainingTarget {
            rgb: tgt.rgb.clone(),
            mask: tgt.mask.clone(),
            camera: tgt.camera.clone(),
            pose: tgt.pose.clone(),
        };

        let mut tape = Tape::new();
        let (total, values, grads) = {
            let mut lv = LeafCache::new(&store);
            let (total_t, terms) = model
                .training_loss(&mut tape, &mut lv, &inputs, &target, &weights, &pyr, &mut rng)
                .map_err(|e| CliError::Numerical(format!("step {step}: {e}")))?;
            let values = terms.values();
            let total = total_t.data()[0];
            if !total.is_finite() {
                let diag: Vec<String> = LOSS_TERM_NAMES
                    .iter()
                    .zip(values)
                    .map(|(n, v)| format!("{n}={v}"))
                    .collect();
                return Err(CliError::Numerical(format!(
                    "non-finite loss at step {step}: total={total} [{}]",
                    diag.join(", ")
                )));
            }
            let gs = tape.backward(&total_t);
            (total, values, store.collect_grads(lv.leaves(), &gs))
        };
        let mut grads = grads;
        clip_grad_norm(&mut grads, GRAD_CLIP);
        store.adamw_step(&grads, lr, &adamw).map_err(|e| CliError::Numerical(e.to_string()))?;

        if step == 0 {
            first_loss = total;
        }
        final_loss = total;
        let vals: Vec<String> = values.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(csv, "{step},{lr:.9e},{},{total:.9e}", vals.join(",")).map_err(data_err)?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            store.save(&ckpt_path).map_err(data_err)?;
        }
    }
    store.save(&ckpt_path).map_err(data_err)?;
    csv.flush().map_err(data_err)?;
    Ok(TrainReport { checkpoint: ckpt_path, csv: csv_path, first_loss, final_loss })
}

/// Loads a checkpoint and rebuilds the model from its embedded config.
pub fn load_model(ckpt: &Path) -> Result<(Model, ParamStore), CliError> {
    let store = ParamStore::load(ckpt).map_err(data_err)?;
    let cfg = avatar_core::model::ModelConfig::from_vec(&store.get("meta.config").data)
        .map_err(data_err)?;
    let model = Model::new(cfg).map_err(data_err)?;
    Ok((model, store))
}
