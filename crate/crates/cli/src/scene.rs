//! Synthetic subject generation and dataset loading: a textured proxy body
//! rendered from an orbit of cameras, with one JSON sidecar per image.

use std::path::{Path, PathBuf};

use avatar_core::body::{
    build_proxy_body, lbs_transform, sample_anchors, PoseParams, JOINT_COUNT,
};
use avatar_core::heads::GaussianSet;
use avatar_core::model::BACKGROUND;
use avatar_core::render::{
    rasterize, read_pgm, read_ppm, write_pgm, write_ppm, Camera, SH_C0,
};
use avatar_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// dense surface covering used only for ground-truth rendering
const COVER_POINTS: usize = 12000;
const COVER_SIGMA: f64 = 0.004;
const COVER_RHO: f64 = 0.95;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraMeta {
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraMeta {
    pub fn from_camera(c: &Camera) -> CameraMeta {
        CameraMeta {
            rot: c.rot,
            trans: c.trans,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }

    pub fn to_camera(&self) -> Camera {
        Camera {
            rot: self.rot,
            trans: self.trans,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewMeta {
    pub image: String,
    pub mask: String,
    pub camera: CameraMeta,
    /// flat pose vector [theta; root_translation]
    pub pose: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneMeta {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub body_seed: u64,
}

/// One loaded supervision view.
pub struct View {
    pub rgb: Vec<f64>,  // H*W x 3
    pub mask: Vec<f64>, // H*W, binary
    pub camera: Camera,
    pub pose: PoseParams,
}

pub struct Scene {
    pub meta: SceneMeta,
    pub views: Vec<View>,
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Deterministic position-based vertex color in [0.05, 0.95].
pub fn surface_color(p: [f64; 3]) -> [f64; 3] {
    let c = [
        0.5 + 0.35 * (7.0 * p[0] + 3.0 * p[1] + 1.3).sin(),
        0.5 + 0.35 * ((9.0 * p[1] + 0.7).sin() * (5.0 * p[2]).cos()),
        0.5 + 0.35 * (6.0 * (p[0] + p[2]) + 2.1).sin(),
    ];
    c.map(|v| v.clamp(0.05, 0.95))
}

/// Body bounding-sphere (center, radius) from the canonical mesh.
fn bounding_sphere(verts: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    for v in verts {
        for i in 0..3 {
            c[i] += v[i];
        }
    }
    for x in c.iter_mut() {
        *x /= verts.len() as f64;
    }
    let r = verts
        .iter()
        .map(|v| ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt())
        .fold(0.0_f64, f64::max);
    (c, r)
}

/// Uniform 360-degree azimuth orbit with alternating slight elevation.
pub fn orbit_camera(
    index: usize,
    total: usize,
    center: [f64; 3],
    radius: f64,
    image_size: usize,
) -> Camera {
    let az = 2.0 * std::f64::consts::PI * index as f64 / total as f64;
    let dist = 2.5 * radius;
    let elev = if index % 2 == 0 { 0.35 * radius } else { -0.35 * radius };
    let eye = [
        center[0] + dist * az.sin(),
        center[1] + elev,
        center[2] + dist * az.cos(),
    ];
    // worst-case lateral extent `radius` at depth `dist - radius` stays
    // inside 45% of the half image
    let fx = 0.45 * image_size as f64 * (dist - radius) / radius;
    Camera::look_at(eye, center, [0.0, -1.0, 0.0], fx, image_size, image_size)
}

/// Ground-truth render of the covering for one (pose, camera) sample.
fn render_gt(
    cover: &GaussianSet,
    cover_posed_centers: &Tensor,
    camera: &Camera,
) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut tape = Tape::new();
    let out = rasterize(
        &mut tape,
        cover_posed_centers,
        &cover.rotations,
        &cover.scales,
        &cover.opacity,
        &cover.colors,
        camera,
        BACKGROUND,
    )
    .map_err(data_err)?;
    let rgb = out.rgb_values();
    let mask: Vec<f64> =
        out.alpha_values().iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect();
    Ok((rgb, mask))
}

/// Dense splat covering of the body surface with the procedural texture.
pub fn build_covering(body_seed: u64) -> Result<(avatar_core::body::ProxyBody, avatar_core::body::AnchorSet, GaussianSet), CliError> {
    let body = build_proxy_body(JOINT_COUNT, body_seed).map_err(data_err)?;
    let anchors = sample_anchors(&body, COVER_POINTS, body_seed ^ 0xc0ffee).map_err(data_err)?;
    let n = anchors.len();
    let centers = Tensor::constant(anchors.positions_flat(), vec![n, 3]);
    let rotations =
        Tensor::constant((0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect(), vec![n, 4]);
    let scales = Tensor::constant(vec![COVER_SIGMA; n * 3], vec![n, 3]);
    let opacity = Tensor::constant(vec![COVER_RHO; n], vec![n, 1]);
    let colors: Vec<f64> = anchors
        .positions
        .iter()
        .flat_map(|&p| surface_color(p).map(|c| (c - 0.5) / SH_C0))
        .collect();
    let colors = Tensor::constant(colors, vec![n, 3]);
    let cover = GaussianSet { centers, rotations, scales, opacity, colors };
    Ok((body, anchors, cover))
}

/// Writes `views` (image, mask, sidecar) samples plus scene.json. The same
/// (config, seed) always produces byte-identical output.
pub fn gen_data(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<SceneMeta, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(data_err)?;
    let (body, anchors, cover) = build_covering(seed)?;
    let (center, radius) = bounding_sphere(&body.mesh_vertices);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9e);
    let s = cfg.image_size;
    for i in 0..cfg.views {
        let mut pose = PoseParams::identity(JOINT_COUNT);
        if cfg.pose_amplitude > 0.0 {
            for j in 0..JOINT_COUNT {
                let aa = [
                    rng.gen_range(-cfg.pose_amplitude..cfg.pose_amplitude),
                    rng.gen_range(-cfg.pose_amplitude..cfg.pose_amplitude),
                    rng.gen_range(-cfg.pose_amplitude..cfg.pose_amplitude),
                ];
                pose.set_joint(j, aa);
            }
        }
        let camera = orbit_camera(i, cfg.views, center, radius, s);
        let posed_centers = {
            let mut tape = Tape::new();
            lbs_transform(&mut tape, &cover.centers, &anchors, &pose, &body)
        };
        let (rgb, mask) = render_gt(&cover, &posed_centers, &camera)?;
        if mask.iter().all(|&m| m == 0.0) {
            return Err(CliError::Data(format!("view {i}: empty foreground mask")));
        }
        let img_name = format!("view_{i:03}.ppm");
        let mask_name = format!("mask_{i:03}.pgm");
        write_ppm(&out_dir.join(&img_name), &rgb, s, s).map_err(data_err)?;
        write_pgm(&out_dir.join(&mask_name), &mask, s, s).map_err(data_err)?;
        let meta = ViewMeta {
            image: img_name,
            mask: mask_name,
            camera: CameraMeta::from_camera(&camera),
            pose: pose.flat(),
        };
        let text = serde_json::to_string_pretty(&meta).map_err(data_err)?;
        std::fs::write(out_dir.join(format!("view_{i:03}.json")), text).map_err(data_err)?;
    }
    let meta = SceneMeta { views: cfg.views, width: s, height: s, seed, body_seed: seed };
    let text = serde_json::to_string_pretty(&meta).map_err(data_err)?;
    std::fs::write(out_dir.join("scene.json"), text).map_err(data_err)?;
    Ok(meta)
}

pub fn load_scene(dir: &Path) -> Result<Scene, CliError> {
    let meta_path: PathBuf = dir.join("scene.json");
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(data_err)?;
    let mut views = Vec::with_capacity(meta.views);
    for i in 0..meta.views {
        let side = dir.join(format!("view_{i:03}.json"));
        let text = std::fs::read_to_string(&side)
            .map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?;
        let vm: ViewMeta = serde_json::from_str(&text).map_err(data_err)?;
        let (rgb, w, h) = read_ppm(&dir.join(&vm.image)).map_err(data_err)?;
        let (mask, mw, mh) = read_pgm(&dir.join(&vm.mask)).map_err(data_err)?;
        if (w, h) != (meta.width, meta.height) || (mw, mh) != (w, h) {
            return Err(CliError::Data(format!("view {i}: image size mismatch")));
        }
        let pose_dim = 3 * JOINT_COUNT + 3;
        if vm.pose.len() != pose_dim {
            return Err(CliError::Data(format!(
                "view {i}: pose length {} != {pose_dim}",
                vm.pose.len()
            )));
        }
        let mut pose = PoseParams::identity(JOINT_COUNT);
        pose.theta.copy_from_slice(&vm.pose[..3 * JOINT_COUNT]);
        pose.root_translation.copy_from_slice(&vm.pose[3 * JOINT_COUNT..]);
        let mask: Vec<f64> = mask.iter().map(|&m| if m > 0.5 { 1.0 } else { 0.0 }).collect();
        views.push(View { rgb, mask, camera: vm.camera.to_camera(), pose });
    }
    Ok(Scene { meta, views })
}
