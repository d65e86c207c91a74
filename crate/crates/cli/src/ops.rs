//! Inference-side operations: reconstruction, posed rendering, evaluation,
//! animation and PLY export.

use std::path::Path;
use std::time::Instant;

use avatar_core::body::{PoseParams, JOINT_COUNT};
use avatar_core::heads::GaussianSet;
use avatar_core::metrics::{psnr, ssim};
use avatar_core::model::{Model, BACKGROUND};
use avatar_core::optim::{LeafCache, ParamStore};
use avatar_core::ply;
use avatar_core::render::{rasterize, read_ppm, write_ppm, Camera, RenderOutput};
use avatar_core::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scene::Scene;
use crate::CliError;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn detach(t: &Tensor) -> Tensor {
    Tensor::constant(t.data().to_vec(), t.shape().to_vec())
}

fn detach_set(g: &GaussianSet) -> GaussianSet {
    GaussianSet {
        centers: detach(&g.centers),
        rotations: detach(&g.rotations),
        scales: detach(&g.scales),
        opacity: detach(&g.opacity),
        colors: detach(&g.colors),
    }
}

pub fn pose_from_flat(v: &[f64]) -> Result<PoseParams, CliError> {
    let dim = 3 * JOINT_COUNT + 3;
    if v.len() != dim {
        return Err(CliError::Data(format!("pose length {} != {dim}", v.len())));
    }
    let mut pose = PoseParams::identity(JOINT_COUNT);
    pose.theta.copy_from_slice(&v[..3 * JOINT_COUNT]);
    pose.root_translation.copy_from_slice(&v[3 * JOINT_COUNT..]);
    Ok(pose)
}

/// Canonical reconstruction detached from its tape so it can be re-posed and
/// rendered any number of times afterwards.
pub struct Reconstruction {
    pub canonical: GaussianSet,
    pub def_mean: Tensor,
    pub tokens: Tensor,
}

pub fn reconstruct(
    model: &Model,
    store: &ParamStore,
    images: &[Vec<f64>],
    seed: u64,
) -> Result<Reconstruction, CliError> {
    if images.is_empty() {
        return Err(CliError::Usage("at least one input image required".into()));
    }
    let px = model.cfg.pit.img_h * model.cfg.pit.img_w * 3;
    if let Some(bad) = images.iter().position(|i| i.len() != px) {
        return Err(CliError::Data(format!(
            "input image {bad} has {} values, model expects {px}",
            images[bad].len()
        )));
    }
    let mut tape = Tape::new();
    let mut lv = LeafCache::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g, def_mean, tokens) = model
        .forward_canonical(&mut tape, &mut lv, images, &mut rng)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    Ok(Reconstruction {
        canonical: detach_set(&g),
        def_mean: detach(&def_mean),
        tokens: detach(&tokens),
    })
}

/// Poses the reconstruction and renders it from `camera`.
pub fn render_posed(
    model: &Model,
    store: &ParamStore,
    rec: &Reconstruction,
    pose: &PoseParams,
    camera: &Camera,
) -> Result<RenderOutput, CliError> {
    let mut tape = Tape::new();
    let mut lv = LeafCache::new(store);
    let posed = model.forward_posed(&mut tape, &mut lv, &rec.canonical, &rec.def_mean, &rec.tokens, pose);
    rasterize(
        &mut tape,
        &posed.centers,
        &posed.rotations,
        &posed.scales,
        &posed.opacity,
        &posed.colors,
        camera,
        BACKGROUND,
    )
    .map_err(|e| CliError::Numerical(e.to_string()))
}

pub fn write_ply(g: &GaussianSet, path: &Path, binary: bool) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(data_err)?);
    if binary {
        ply::write_binary(g, &mut w).map_err(data_err)
    } else {
        ply::write_ascii(g, &mut w).map_err(data_err)
    }
}

/// Single forward pass from image files to a canonical-space PLY; returns
/// the forward wall-clock seconds.
pub fn infer(
    model: &Model,
    store: &ParamStore,
    image_paths: &[std::path::PathBuf],
    out: &Path,
    binary: bool,
    seed: u64,
) -> Result<f64, CliError> {
    if image_paths.is_empty() {
        return Err(CliError::Usage("at least one input image required".into()));
    }
    let mut images = Vec::with_capacity(image_paths.len());
    for p in image_paths {
        let (rgb, w, h) = read_ppm(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        if (w, h) != (model.cfg.pit.img_w, model.cfg.pit.img_h) {
            return Err(CliError::Data(format!(
                "{}: {w}x{h} does not match model input {}x{}",
                p.display(),
                model.cfg.pit.img_w,
                model.cfg.pit.img_h
            )));
        }
        images.push(rgb);
    }
    let t0 = Instant::now();
    let rec = reconstruct(model, store, &images, seed)?;
    let dt = t0.elapsed().as_secs_f64();
    write_ply(&rec.canonical, out, binary)?;
    Ok(dt)
}

/// Renders one PPM frame per pose in the sequence.
pub fn animate(
    model: &Model,
    store: &ParamStore,
    rec: &Reconstruction,
    poses: &[Vec<f64>],
    camera: &Camera,
    out_dir: &Path,
) -> Result<usize, CliError> {
    std::fs::create_dir_all(out_dir).map_err(data_err)?;
    for (i, flat) in poses.iter().enumerate() {
        let pose = pose_from_flat(flat)?;
        let out = render_posed(model, store, rec, &pose, camera)?;
        let path = out_dir.join(format!("frame_{i:04}.ppm"));
        write_ppm(&path, &out.rgb_values(), camera.width, camera.height).map_err(data_err)?;
    }
    Ok(poses.len())
}

pub struct EvalResult {
    pub per_view: Vec<(usize, f64, f64)>, // (view, psnr, ssim)
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Reconstructs from `input_views` of the scene and scores renders against
/// ground truth on `eval_views`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    scene: &Scene,
    input_views: &[usize],
    eval_views: &[usize],
    seed: u64,
) -> Result<EvalResult, CliError> {
    if let Some(&bad) =
        input_views.iter().chain(eval_views).find(|&&v| v >= scene.views.len())
    {
        return Err(CliError::Usage(format!("view index {bad} out of range")));
    }
    if input_views.is_empty() || eval_views.is_empty() {
        return Err(CliError::Usage("need at least one input and one eval view".into()));
    }
    let images: Vec<Vec<f64>> = input_views.iter().map(|&v| scene.views[v].rgb.clone()).collect();
    let rec = reconstruct(model, store, &images, seed)?;
    let mut per_view = Vec::new();
    let (w, h) = (scene.meta.width, scene.meta.height);
    for &v in eval_views {
        let view = &scene.views[v];
        let out = render_posed(model, store, &rec, &view.pose, &view.camera)?;
        let rgb = out.rgb_values();
        per_view.push((v, psnr(&rgb, &view.rgb), ssim(&rgb, &view.rgb, w, h, 3)));
    }
    let n = per_view.len() as f64;
    Ok(EvalResult {
        mean_psnr: per_view.iter().map(|x| x.1).sum::<f64>() / n,
        mean_ssim: per_view.iter().map(|x| x.2).sum::<f64>() / n,
        per_view,
    })
}
