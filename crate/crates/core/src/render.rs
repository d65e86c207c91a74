//! Differentiable pinhole-camera rasterizer for 3D Gaussian splats.
//!
//! Brute-force per-pixel front-to-back alpha compositing with a 3-sigma
//! ellipse cutoff. No tile binning: target images are small and correctness
//! (exact gradients for every Gaussian parameter) is the priority.

use rayon::prelude::*;
use std::io::Write;
use std::rc::Rc;

use crate::tensor::{Tape, Tensor};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_REG: f64 = 0.1;
pub const ALPHA_CLAMP: f64 = 0.999;
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// transmittance below this is treated as opaque and traversal stops
const T_STOP: f64 = 1e-12;
/// 3-sigma ellipse cutoff on the Mahalanobis square distance
const MAHA_CUTOFF: f64 = 9.0;

#[derive(Clone, Debug)]
pub struct Camera {
    pub rot: [[f64; 3]; 3], // world -> camera
    pub trans: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`; +z forward, +y down in image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fx: f64, width: usize, height: usize) -> Camera {
        let fwd = norm3(sub3(target, eye));
        let right = norm3(cross3(fwd, up));
        let down = cross3(fwd, right);
        let rot = [right, down, fwd];
        let trans = [-dot3(rot[0], eye), -dot3(rot[1], eye), -dot3(rot[2], eye)];
        Camera {
            rot,
            trans,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) {
        assert!(self.fx > 0.0 && self.fy > 0.0, "focal lengths must be positive");
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.rot[i][k] * self.rot[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "camera rotation not orthonormal");
            }
        }
    }

    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        [
            dot3(self.rot[0], p) + self.trans[0],
            dot3(self.rot[1], p) + self.trans[1],
            dot3(self.rot[2], p) + self.trans[2],
        ]
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn norm3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("non-finite {what} on gaussian {index}")]
    NonFinite { index: usize, what: &'static str },
}

/// Projected state of one visible gaussian, shared by forward and backward.
#[derive(Clone)]
struct Splat {
    index: usize,
    depth: f64,
    mean: [f64; 2],
    /// inverse 2D covariance
    q: [f64; 3], // xx, xy, yy
    /// pixel-space bbox (inclusive)
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    opacity: f64,
    color: [f64; 3],
    color_clamped: [bool; 3],
    // saved for the backward chain
    t_cam: [f64; 3],
    jac: [[f64; 3]; 2],
    m3: [[f64; 3]; 3], // camera-space 3D covariance
    r3: [[f64; 3]; 3],
    qn: [f64; 4],
    qnorm: f64,
    scale: [f64; 3],
}

#[derive(Debug)]
pub struct RenderOutput {
    /// H*W x 4 (rgb + alpha), row-major
    pub image: Tensor,
    pub width: usize,
    pub height: usize,
}

impl RenderOutput {
    pub fn rgb(&self, tape: &mut Tape) -> Tensor {
        tape.slice_cols(&self.image, 0, 3)
    }

    pub fn alpha(&self, tape: &mut Tape) -> Tensor {
        tape.slice_cols(&self.image, 3, 1)
    }

    pub fn rgb_values(&self) -> Vec<f64> {
        let d = self.image.data();
        (0..self.width * self.height).flat_map(|i| d[i * 4..i * 4 + 3].to_vec()).collect()
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        let d = self.image.data();
        (0..self.width * self.height).map(|i| d[i * 4 + 3]).collect()
    }
}

/// EWA-style projection of a single gaussian; `None` when culled behind the
/// near plane.
pub fn project_gaussian(
    center: [f64; 3],
    rotation: [f64; 4],
    scale: [f64; 3],
    cam: &Camera,
) -> Option<([f64; 2], [[f64; 2]; 2], f64)> {
    let t = cam.world_to_cam(center);
    if t[2] <= NEAR_PLANE {
        return None;
    }
    let mean = [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy];
    let jac = projection_jacobian(t, cam);
    let qn = normalize_quat(rotation).0;
    let r3 = crate::body::quat_to_matrix(qn);
    let sigma3 = cov3d(&r3, scale);
    let m3 = similarity3(&cam.rot, &sigma3);
    let cov2 = cov2d(&jac, &m3);
    Some((mean, cov2, t[2]))
}

fn projection_jacobian(t: [f64; 3], cam: &Camera) -> [[f64; 3]; 2] {
    let z = t[2];
    [
        [cam.fx / z, 0.0, -cam.fx * t[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * t[1] / (z * z)],
    ]
}

fn cov3d(r: &[[f64; 3]; 3], s: [f64; 3]) -> [[f64; 3]; 3] {
    // R diag(s^2) R^T
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += r[i][k] * s[k] * s[k] * r[j][k];
            }
        }
    }
    out
}

fn similarity3(a: &[[f64; 3]; 3], m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    // A M A^T
    let mut am = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                am[i][j] += a[i][k] * m[k][j];
            }
        }
    }
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += am[i][k] * a[j][k];
            }
        }
    }
    out
}

fn cov2d(j: &[[f64; 3]; 2], m3: &[[f64; 3]; 3]) -> [[f64; 2]; 2] {
    // J M J^T + reg I
    let mut jm = [[0.0; 3]; 2];
    for i in 0..2 {
        for a in 0..3 {
            for b in 0..3 {
                jm[i][a] += j[i][b] * m3[b][a];
            }
        }
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            for a in 0..3 {
                out[i][k] += jm[i][a] * j[k][a];
            }
        }
    }
    out[0][0] += COV2D_REG;
    out[1][1] += COV2D_REG;
    out
}

fn normalize_quat(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-300);
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

fn check_finite(data: &[f64], per: usize, what: &'static str) -> Result<(), RenderError> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(RenderError::NonFinite { index: i / per, what });
        }
    }
    Ok(())
}

fn prepare_splats(
    centers: &[f64],
    rotations: &[f64],
    scales: &[f64],
    opacity: &[f64],
    colors: &[f64],
    cam: &Camera,
) -> Vec<Splat> {
    let n = centers.len() / 3;
    let mut splats: Vec<Splat> = (0..n)
        .filter_map(|i| {
            let p = [centers[i * 3], centers[i * 3 + 1], centers[i * 3 + 2]];
            let t = cam.world_to_cam(p);
            if t[2] <= NEAR_PLANE {
                return None;
            }
            let (qn, qnorm) = normalize_quat([
                rotations[i * 4],
                rotations[i * 4 + 1],
                rotations[i * 4 + 2],
                rotations[i * 4 + 3],
            ]);
            let scale = [scales[i * 3], scales[i * 3 + 1], scales[i * 3 + 2]];
            let r3 = crate::body::quat_to_matrix(qn);
            let sigma3 = cov3d(&r3, scale);
            let m3 = similarity3(&cam.rot, &sigma3);
            let jac = projection_jacobian(t, cam);
            let cov = cov2d(&jac, &m3);
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
            if det <= 0.0 {
                return None;
            }
            let q = [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det];
            let mean = [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy];
            // bbox from the largest eigenvalue of the 2D covariance
            let mid = 0.5 * (cov[0][0] + cov[1][1]);
            let d = (0.25 * (cov[0][0] - cov[1][1]).powi(2) + cov[0][1] * cov[0][1]).sqrt();
            let radius = 3.0 * (mid + d).max(0.0).sqrt() + 1.0;
            if mean[0] + radius < 0.0
                || mean[0] - radius > cam.width as f64
                || mean[1] + radius < 0.0
                || mean[1] - radius > cam.height as f64
            {
                return None;
            }
            let x0 = (mean[0] - radius).floor().max(0.0) as usize;
            let x1 = ((mean[0] + radius).ceil() as usize).min(cam.width - 1);
            let y0 = (mean[1] - radius).floor().max(0.0) as usize;
            let y1 = ((mean[1] + radius).ceil() as usize).min(cam.height - 1);
            let mut color = [0.0; 3];
            let mut color_clamped = [false; 3];
            for ch in 0..3 {
                let c = 0.5 + SH_C0 * colors[i * 3 + ch];
                color[ch] = c.clamp(0.0, 1.0);
                color_clamped[ch] = !(0.0..=1.0).contains(&c);
            }
            Some(Splat {
                index: i,
                depth: t[2],
                mean,
                q,
                x0,
                x1,
                y0,
                y1,
                opacity: opacity[i],
                color,
                color_clamped,
                t_cam: t,
                jac,
                m3,
                r3,
                qn,
                qnorm,
                scale,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

fn alpha_at(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, [f64; 2])> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let maha = s.q[0] * dx * dx + 2.0 * s.q[1] * dx * dy + s.q[2] * dy * dy;
    if maha > MAHA_CUTOFF {
        return None;
    }
    let e = (-0.5 * maha).exp();
    let alpha = (s.opacity * e).clamp(0.0, ALPHA_CLAMP);
    Some((alpha, e, [dx, dy]))
}

/// Depth-sorted front-to-back alpha compositing over a constant background.
/// Differentiable w.r.t. every gaussian parameter that is on the tape.
pub fn rasterize(
    tape: &mut Tape,
    centers: &Tensor,   // N x 3
    rotations: &Tensor, // N x 4
    scales: &Tensor,    // N x 3
    opacity: &Tensor,   // N x 1
    colors: &Tensor,    // N x 3 (SH degree-0)
    cam: &Camera,
    background: [f64; 3],
) -> Result<RenderOutput, RenderError> {
    cam.validate();
    let n = centers.rows();
    assert_eq!(centers.cols(), 3);
    assert_eq!(rotations.shape(), &[n, 4]);
    assert_eq!(scales.shape(), &[n, 3]);
    assert_eq!(opacity.shape(), &[n, 1]);
    assert_eq!(colors.shape(), &[n, 3]);
    check_finite(centers.data(), 3, "center")?;
    check_finite(rotations.data(), 4, "rotation")?;
    check_finite(scales.data(), 3, "scale")?;
    check_finite(opacity.data(), 1, "opacity")?;
    check_finite(colors.data(), 3, "color")?;

    let splats = prepare_splats(
        centers.data(),
        rotations.data(),
        scales.data(),
        opacity.data(),
        colors.data(),
        cam,
    );
    let (w, h) = (cam.width, cam.height);

    let mut image = vec![0.0; w * h * 4];
    image
        .par_chunks_mut(w * 4)
        .enumerate()
        .for_each(|(iy, row)| {
            let py = iy as f64 + 0.5;
            for ix in 0..w {
                let px = ix as f64 + 0.5;
                let mut transmit = 1.0;
                let mut rgb = [0.0; 3];
                for s in &splats {
                    if ix < s.x0 || ix > s.x1 || iy < s.y0 || iy > s.y1 {
                        continue;
                    }
                    let Some((alpha, _, _)) = alpha_at(s, px, py) else { continue };
                    for ch in 0..3 {
                        rgb[ch] += s.color[ch] * alpha * transmit;
                    }
                    transmit *= 1.0 - alpha;
                    if transmit < T_STOP {
                        break;
                    }
                }
                for ch in 0..3 {
                    row[ix * 4 + ch] = rgb[ch] + background[ch] * transmit;
                }
                row[ix * 4 + 3] = 1.0 - transmit;
            }
        });

    let ids = [centers.id(), rotations.id(), scales.id(), opacity.id(), colors.id()];
    if ids.iter().all(|id| id.is_none()) {
        return Ok(RenderOutput { image: Tensor::constant(image, vec![w * h, 4]), width: w, height: h });
    }

    let splats: Rc<[Splat]> = splats.into();
    let out_vals: Rc<[f64]> = image.clone().into();
    let cam2 = cam.clone();
    let image = tape.push(
        image,
        vec![w * h, 4],
        Box::new(move |g, gs| {
            let splats_ref: &[Splat] = &splats;
            let out_ref: &[f64] = &out_vals;
            let cam_ref = &cam2;
            let partials: Vec<Vec<f64>> = (0..h)
                .into_par_iter()
                .map(|iy| {
                    // per-splat: d mean (2), d Q sym (3), d rho, d color (3)
                    let mut acc = vec![0.0; splats_ref.len() * 9];
                    backward_row(iy, w, splats_ref, out_ref, g, cam_ref, &mut acc);
                    acc
                })
                .collect();
            let mut acc = vec![0.0; splats.len() * 9];
            for p in partials {
                for (a, b) in acc.iter_mut().zip(p) {
                    *a += b;
                }
            }
            // convert screen-space gradients to parameter gradients
            let mut gp = vec![0.0; n * 3];
            let mut gq = vec![0.0; n * 4];
            let mut gsc = vec![0.0; n * 3];
            let mut gop = vec![0.0; n];
            let mut gco = vec![0.0; n * 3];
            for (k, s) in splats.iter().enumerate() {
                splat_param_grads(
                    s,
                    &acc[k * 9..k * 9 + 9],
                    &cam2,
                    &mut gp[s.index * 3..s.index * 3 + 3],
                    &mut gq[s.index * 4..s.index * 4 + 4],
                    &mut gsc[s.index * 3..s.index * 3 + 3],
                    &mut gop[s.index..s.index + 1],
                    &mut gco[s.index * 3..s.index * 3 + 3],
                );
            }
            gs.accum(ids[0], &gp);
            gs.accum(ids[1], &gq);
            gs.accum(ids[2], &gsc);
            gs.accum(ids[3], &gop);
            gs.accum(ids[4], &gco);
        }),
    );
    Ok(RenderOutput { image, width: w, height: h })
}

#[allow(clippy::too_many_arguments)]
fn backward_row(
    iy: usize,
    w: usize,
    splats: &[Splat],
    out_vals: &[f64],
    g: &[f64],
    cam: &Camera,
    acc: &mut [f64],
) {
    let py = iy as f64 + 0.5;
    for ix in 0..w {
        let px = ix as f64 + 0.5;
        let pix = iy * w + ix;
        let g_rgb = [g[pix * 4], g[pix * 4 + 1], g[pix * 4 + 2]];
        let g_alpha = g[pix * 4 + 3];
        if g_rgb == [0.0; 3] && g_alpha == 0.0 {
            continue;
        }
        let t_final = 1.0 - out_vals[pix * 4 + 3];
        // stored rgb = prefix + suffix + bg*t_final, so the combined
        // "everything occluded by splat i" term (suffix + bg*t_final) that
        // dC/d alpha_i needs is exactly stored rgb minus the running prefix
        let mut prefix = [0.0; 3];
        let mut transmit = 1.0;
        for (k, s) in splats.iter().enumerate() {
            if ix < s.x0 || ix > s.x1 || iy < s.y0 || iy > s.y1 {
                continue;
            }
            let Some((alpha, e, delta)) = alpha_at(s, px, py) else { continue };
            let contrib_t = transmit;
            for ch in 0..3 {
                prefix[ch] += s.color[ch] * alpha * contrib_t;
            }
            // dL/d color
            for ch in 0..3 {
                acc[k * 9 + 6 + ch] += g_rgb[ch] * alpha * contrib_t;
            }
            // dL/d alpha
            let one_minus = 1.0 - alpha;
            let mut dl_dalpha = 0.0;
            if one_minus > 1e-12 {
                for ch in 0..3 {
                    let occluded = out_vals[pix * 4 + ch] - prefix[ch];
                    dl_dalpha +=
                        g_rgb[ch] * (s.color[ch] * contrib_t - occluded / one_minus);
                }
                dl_dalpha += g_alpha * t_final / one_minus;
            } else {
                for ch in 0..3 {
                    dl_dalpha += g_rgb[ch] * s.color[ch] * contrib_t;
                }
            }
            // alpha = clamp(rho * e, 0, 0.999): zero grad when clamped
            if s.opacity * e < ALPHA_CLAMP && s.opacity * e > 0.0 {
                acc[k * 9 + 5] += dl_dalpha * e; // d/d rho
                let dl_dmaha = dl_dalpha * (-0.5 * alpha);
                // maha = d^T Q d
                let qd = [
                    s.q[0] * delta[0] + s.q[1] * delta[1],
                    s.q[1] * delta[0] + s.q[2] * delta[1],
                ];
                // d maha / d mean = -2 Q d
                acc[k * 9] += dl_dmaha * (-2.0 * qd[0]);
                acc[k * 9 + 1] += dl_dmaha * (-2.0 * qd[1]);
                // d maha / d Q = d d^T (sym storage xx, xy, yy; xy counted once
                // with the factor 2 from symmetry)
                acc[k * 9 + 2] += dl_dmaha * delta[0] * delta[0];
                acc[k * 9 + 3] += dl_dmaha * 2.0 * delta[0] * delta[1];
                acc[k * 9 + 4] += dl_dmaha * delta[1] * delta[1];
            }
            transmit *= one_minus;
            if transmit < T_STOP {
                break;
            }
        }
        let _ = cam;
    }
}

#[allow(clippy::too_many_arguments)]
fn splat_param_grads(
    s: &Splat,
    acc: &[f64],
    cam: &Camera,
    gp: &mut [f64],
    gq: &mut [f64],
    gsc: &mut [f64],
    gop: &mut [f64],
    gco: &mut [f64],
) {
    let g_mean = [acc[0], acc[1]];
    // dL/dQ (full symmetric matrix; off-diagonal already carries both halves)
    let gq2 = [[acc[2], acc[3] / 2.0], [acc[3] / 2.0, acc[4]]];
    gop[0] += acc[5];
    for ch in 0..3 {
        if !s.color_clamped[ch] {
            gco[ch] += acc[6 + ch] * SH_C0;
        }
    }

    // dL/dSigma2 = -Q (dL/dQ) Q
    let q = [[s.q[0], s.q[1]], [s.q[1], s.q[2]]];
    let mut qg = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                qg[i][j] += q[i][k] * gq2[k][j];
            }
        }
    }
    let mut g_sigma2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                g_sigma2[i][j] -= qg[i][k] * q[k][j];
            }
        }
    }

    // Sigma2 = J M Jᵀ + reg I
    // dL/dM = Jᵀ g_sigma2 J
    let mut jt_g = [[0.0; 2]; 3];
    for a in 0..3 {
        for i in 0..2 {
            for k in 0..2 {
                jt_g[a][i] += s.jac[k][a] * g_sigma2[k][i];
            }
        }
    }
    let mut g_m3 = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            for i in 0..2 {
                g_m3[a][b] += jt_g[a][i] * s.jac[i][b];
            }
        }
    }
    // dL/dJ = (g_sigma2 + g_sigma2ᵀ) J M = 2 g_sigma2 J M (symmetric)
    let mut jm = [[0.0; 3]; 2];
    for i in 0..2 {
        for a in 0..3 {
            for b in 0..3 {
                jm[i][a] += s.jac[i][b] * s.m3[b][a];
            }
        }
    }
    let mut g_jac = [[0.0; 3]; 2];
    for i in 0..2 {
        for a in 0..3 {
            for k in 0..2 {
                g_jac[i][a] += 2.0 * g_sigma2[i][k] * jm[k][a];
            }
        }
    }

    // mean2d = (fx tx/tz + cx, fy ty/tz + cy): dL/dt from mean + J(t) path
    let (tx, ty, tz) = (s.t_cam[0], s.t_cam[1], s.t_cam[2]);
    let mut g_t = [0.0; 3];
    g_t[0] += g_mean[0] * cam.fx / tz;
    g_t[1] += g_mean[1] * cam.fy / tz;
    g_t[2] += -g_mean[0] * cam.fx * tx / (tz * tz) - g_mean[1] * cam.fy * ty / (tz * tz);
    // J entries: J[0][0]=fx/tz, J[0][2]=-fx tx/tz^2, J[1][1]=fy/tz, J[1][2]=-fy ty/tz^2
    g_t[0] += g_jac[0][2] * (-cam.fx / (tz * tz));
    g_t[1] += g_jac[1][2] * (-cam.fy / (tz * tz));
    g_t[2] += g_jac[0][0] * (-cam.fx / (tz * tz))
        + g_jac[1][1] * (-cam.fy / (tz * tz))
        + g_jac[0][2] * (2.0 * cam.fx * tx / (tz * tz * tz))
        + g_jac[1][2] * (2.0 * cam.fy * ty / (tz * tz * tz));
    // dL/dp = Rᵀ dL/dt
    for b in 0..3 {
        for a in 0..3 {
            gp[b] += cam.rot[a][b] * g_t[a];
        }
    }

    // M = Rc Sigma3 Rcᵀ: dL/dSigma3 = Rcᵀ g_m3 Rc
    let mut rt_g = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            for k in 0..3 {
                rt_g[a][b] += cam.rot[k][a] * g_m3[k][b];
            }
        }
    }
    let mut g_sigma3 = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            for k in 0..3 {
                g_sigma3[a][b] += rt_g[a][k] * cam.rot[k][b];
            }
        }
    }

    // Sigma3 = R D Rᵀ with D = diag(s^2)
    // dL/dR = (G + Gᵀ) R D; dL/ds_k = ((Rᵀ(G+Gᵀ)R)_kk) s_k
    let mut gsym = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gsym[i][j] = g_sigma3[i][j] + g_sigma3[j][i];
        }
    }
    let mut g_r = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            let d = s.scale[k] * s.scale[k];
            for j in 0..3 {
                g_r[i][k] += gsym[i][j] * s.r3[j][k] * d;
            }
        }
    }
    for k in 0..3 {
        let mut rr = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                rr += s.r3[i][k] * gsym[i][j] * s.r3[j][k];
            }
        }
        gsc[k] += rr * s.scale[k];
    }

    // dL/d qn via dR/dq at the normalized quaternion, then through the
    // normalization
    let [w, x, y, z] = s.qn;
    let dr = [
        // dR/dw
        [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]],
        // dR/dx
        [[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]],
        // dR/dy
        [[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]],
        // dR/dz
        [[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]],
    ];
    let mut g_qn = [0.0; 4];
    for c in 0..4 {
        let mut acc_q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc_q += g_r[i][j] * 2.0 * dr[c][i][j];
            }
        }
        g_qn[c] = acc_q;
    }
    let dot: f64 = (0..4).map(|c| g_qn[c] * s.qn[c]).sum();
    for c in 0..4 {
        gq[c] += (g_qn[c] - s.qn[c] * dot) / s.qnorm;
    }
}

/// Auxiliary silhouette render with fixed opacity/scale; gradients reach the
/// centers only.
pub fn render_fixed(
    tape: &mut Tape,
    centers: &Tensor,
    rotations: &Tensor,
    cam: &Camera,
    rho_fix: f64,
    sigma_fix: f64,
) -> Result<Tensor, RenderError> {
    let n = centers.rows();
    let rot = rotations.detach();
    let scales = Tensor::constant(vec![sigma_fix; n * 3], vec![n, 3]);
    let opacity = Tensor::constant(vec![rho_fix; n], vec![n, 1]);
    let colors = Tensor::constant(vec![0.0; n * 3], vec![n, 3]);
    let out = rasterize(tape, centers, &rot, &scales, &opacity, &colors, cam, [0.0; 3])?;
    Ok(out.alpha(tape))
}

pub const RHO_FIX: f64 = 0.95;
pub const SIGMA_FIX: f64 = 0.002;

// ---- image I/O ----

pub fn write_ppm(path: &std::path::Path, rgb: &[f64], w: usize, h: usize) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> =
        rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm(path: &std::path::Path, gray: &[f64], w: usize, h: usize) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> =
        gray.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(path: &std::path::Path) -> std::io::Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    parse_pnm(&bytes, 3)
}

pub fn read_pgm(path: &std::path::Path) -> std::io::Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    parse_pnm(&bytes, 1)
}

fn parse_pnm(bytes: &[u8], channels: usize) -> std::io::Result<(Vec<f64>, usize, usize)> {
    let err = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let magic = if channels == 3 { b"P6" } else { b"P5" };
    if &bytes[..2] != magic {
        return Err(err("bad magic"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if bytes[pos] == b'#' {
            while bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| err("bad header"))?
                .parse::<usize>()
                .map_err(|_| err("bad header"))?,
        );
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    let n = w * h * channels;
    if bytes.len() < pos + n {
        return Err(err("truncated pixel data"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok((data, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_cam(w: usize, h: usize) -> Camera {
        Camera::look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], w as f64, w, h)
    }

    fn unit_quat() -> Vec<f64> {
        vec![1.0, 0.0, 0.0, 0.0]
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let cam = test_cam(32, 32);
        let (mean, _, depth) =
            project_gaussian([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.01; 3], &cam).unwrap();
        assert!((mean[0] - cam.cx).abs() < 1e-9);
        assert!((mean[1] - cam.cy).abs() < 1e-9);
        assert!((depth - 2.0).abs() < 1e-9);
    }

    #[test]
    fn project_isotropic_hand_jacobian() {
        // axis-aligned camera at distance d: cov2d diagonal (fx*sigma/d)^2 + reg
        let cam = test_cam(64, 64);
        let sigma = 0.03;
        let d = 2.0;
        let (_, cov, _) =
            project_gaussian([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [sigma; 3], &cam).unwrap();
        let want = (cam.fx * sigma / d).powi(2) + COV2D_REG;
        assert!((cov[0][0] - want).abs() < 1e-9, "{} vs {want}", cov[0][0]);
        assert!((cov[1][1] - want).abs() < 1e-9);
        assert!(cov[0][1].abs() < 1e-9);
    }

    #[test]
    fn doubling_depth_halves_extent() {
        let cam = test_cam(64, 64);
        let s = 0.05;
        let (_, c1, _) =
            project_gaussian([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [s; 3], &cam).unwrap();
        let (_, c2, _) =
            project_gaussian([0.0, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0], [s; 3], &cam).unwrap();
        let e1 = (c1[0][0] - COV2D_REG).sqrt();
        let e2 = (c2[0][0] - COV2D_REG).sqrt();
        assert!((e1 / e2 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = test_cam(32, 32);
        assert!(project_gaussian([0.0, 0.0, -5.0], [1.0, 0.0, 0.0, 0.0], [0.01; 3], &cam).is_none());
    }

    #[test]
    fn empty_scene_is_background() {
        let mut tape = Tape::new();
        let cam = test_cam(16, 16);
        let out = rasterize(
            &mut tape,
            &Tensor::zeros(vec![0, 3]),
            &Tensor::zeros(vec![0, 4]),
            &Tensor::zeros(vec![0, 3]),
            &Tensor::zeros(vec![0, 1]),
            &Tensor::zeros(vec![0, 3]),
            &cam,
            [0.2, 0.4, 0.6],
        )
        .unwrap();
        for i in 0..16 * 16 {
            assert_eq!(out.image.data()[i * 4], 0.2);
            assert_eq!(out.image.data()[i * 4 + 1], 0.4);
            assert_eq!(out.image.data()[i * 4 + 2], 0.6);
            assert_eq!(out.image.data()[i * 4 + 3], 0.0);
        }
    }

    #[test]
    fn single_onaxis_gaussian_center_alpha() {
        let mut tape = Tape::new();
        // odd image so a pixel center lands exactly on the principal point
        let mut cam = test_cam(17, 17);
        cam.cx = 8.5;
        cam.cy = 8.5;
        let rho = 0.7;
        let out = rasterize(
            &mut tape,
            &Tensor::constant(vec![0.0, 0.0, 0.0], vec![1, 3]),
            &Tensor::constant(unit_quat(), vec![1, 4]),
            &Tensor::constant(vec![0.05; 3], vec![1, 3]),
            &Tensor::constant(vec![rho], vec![1, 1]),
            &Tensor::constant(vec![0.0; 3], vec![1, 3]),
            &cam,
            [0.0; 3],
        )
        .unwrap();
        let center_pix = 8 * 17 + 8;
        let a = out.image.data()[center_pix * 4 + 3];
        assert!((a - rho).abs() < 1e-12, "center alpha {a} vs rho {rho}");
    }

    #[test]
    fn depth_order_input_permutation_invariance() {
        let cam = test_cam(24, 24);
        let run = |perm: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let base_p = [[0.0, 0.0, 0.0], [0.05, 0.02, 0.8]];
            let base_c = [[0.8, 0.1, 0.1], [-0.2, 0.9, 0.4]];
            let p: Vec<f64> = perm.iter().flat_map(|&i| base_p[i].to_vec()).collect();
            let c: Vec<f64> = perm.iter().flat_map(|&i| base_c[i].to_vec()).collect();
            let q: Vec<f64> = perm.iter().flat_map(|_| unit_quat()).collect();
            let out = rasterize(
                &mut tape,
                &Tensor::constant(p, vec![2, 3]),
                &Tensor::constant(q, vec![2, 4]),
                &Tensor::constant(vec![0.05; 6], vec![2, 3]),
                &Tensor::constant(vec![0.6, 0.7], vec![2, 1]),
                &Tensor::constant(c, vec![2, 3]),
                &cam,
                [1.0; 3],
            )
            .unwrap();
            out.image.data().to_vec()
        };
        let a = run(&[0, 1]);
        let mut tape = Tape::new();
        let _ = &mut tape;
        let b = {
            // swapped opacity follows the permutation too
            let mut tape = Tape::new();
            let p = vec![0.05, 0.02, 0.8, 0.0, 0.0, 0.0];
            let c = vec![-0.2, 0.9, 0.4, 0.8, 0.1, 0.1];
            let q = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
            let out = rasterize(
                &mut tape,
                &Tensor::constant(p, vec![2, 3]),
                &Tensor::constant(q, vec![2, 4]),
                &Tensor::constant(vec![0.05; 6], vec![2, 3]),
                &Tensor::constant(vec![0.7, 0.6], vec![2, 1]),
                &Tensor::constant(c, vec![2, 3]),
                &cam,
                [1.0; 3],
            )
            .unwrap();
            out.image.data().to_vec()
        };
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transparent_gaussian_is_noop() {
        let cam = test_cam(24, 24);
        let render = |with_extra: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut p = vec![0.0, 0.0, 0.0];
            let mut q = unit_quat();
            let mut s = vec![0.05; 3];
            let mut o = vec![0.6];
            let mut c = vec![0.3, 0.3, 0.3];
            if with_extra {
                p.extend([0.02, 0.03, -0.5]);
                q.extend(unit_quat());
                s.extend([0.08; 3]);
                o.push(0.0);
                c.extend([0.9, 0.9, 0.9]);
            }
            let n = o.len();
            let out = rasterize(
                &mut tape,
                &Tensor::constant(p, vec![n, 3]),
                &Tensor::constant(q, vec![n, 4]),
                &Tensor::constant(s, vec![n, 3]),
                &Tensor::constant(o, vec![n, 1]),
                &Tensor::constant(c, vec![n, 3]),
                &cam,
                [1.0; 3],
            )
            .unwrap();
            out.image.data().to_vec()
        };
        let a = render(false);
        let b = render(true);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_in_unit_interval_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cam = test_cam(8, 8);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let mut tape = Tape::new();
            let p: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(1e-4..0.5)).collect();
            let o: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = rasterize(
                &mut tape,
                &Tensor::constant(p, vec![n, 3]),
                &Tensor::constant(q, vec![n, 4]),
                &Tensor::constant(s, vec![n, 3]),
                &Tensor::constant(o, vec![n, 1]),
                &Tensor::constant(c, vec![n, 3]),
                &cam,
                [1.0; 3],
            )
            .unwrap();
            for i in 0..64 {
                let a = out.image.data()[i * 4 + 3];
                assert!((0.0..=1.0).contains(&a), "alpha {a}");
                for ch in 0..3 {
                    assert!(out.image.data()[i * 4 + ch].is_finite());
                }
            }
        }
    }

    #[test]
    fn opacity_monotonicity_at_center() {
        let mut cam = test_cam(17, 17);
        cam.cx = 8.5;
        cam.cy = 8.5;
        let alpha_for = |rho: f64| -> f64 {
            let mut tape = Tape::new();
            let out = rasterize(
                &mut tape,
                &Tensor::constant(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.5], vec![2, 3]),
                &Tensor::constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], vec![2, 4]),
                &Tensor::constant(vec![0.05; 6], vec![2, 3]),
                &Tensor::constant(vec![rho, 0.5], vec![2, 1]),
                &Tensor::constant(vec![0.5; 6], vec![2, 3]),
                &cam,
                [0.0; 3],
            )
            .unwrap();
            out.image.data()[(8 * 17 + 8) * 4 + 3]
        };
        let mut prev = alpha_for(0.0);
        for k in 1..=20 {
            let a = alpha_for(k as f64 / 20.0);
            assert!(a >= prev - 1e-15, "alpha decreased: {prev} -> {a}");
            prev = a;
        }
    }

    #[test]
    fn nonfinite_input_names_primitive() {
        let mut tape = Tape::new();
        let cam = test_cam(8, 8);
        let err = rasterize(
            &mut tape,
            &Tensor::constant(vec![0.0, 0.0, 0.0, 0.0, f64::NAN, 0.0], vec![2, 3]),
            &Tensor::constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], vec![2, 4]),
            &Tensor::constant(vec![0.01; 6], vec![2, 3]),
            &Tensor::constant(vec![0.5; 2], vec![2, 1]),
            &Tensor::constant(vec![0.0; 6], vec![2, 3]),
            &cam,
            [0.0; 3],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gaussian 1"), "{msg}");
    }

    #[test]
    fn rasterize_full_gradcheck() {
        // 16x16 image, 3 gaussians, every parameter
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let cam = test_cam(16, 16);
        let n = 3;
        let p: Vec<f64> = (0..n)
            .flat_map(|_| {
                vec![rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]
            })
            .collect();
        let mut q: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..n {
            q[i * 4] += 1.5; // keep away from zero norm
        }
        let s: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.08..0.25)).collect();
        let o: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..0.8)).collect();
        let c: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wsum: Vec<f64> = (0..16 * 16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rel = gradcheck(
            &[
                (p, vec![n, 3]),
                (q, vec![n, 4]),
                (s, vec![n, 3]),
                (o, vec![n, 1]),
                (c, vec![n, 3]),
            ],
            |tape, xs| {
                let out = rasterize(tape, &xs[0], &xs[1], &xs[2], &xs[3], &xs[4], &cam, [1.0, 0.5, 0.25])
                    .unwrap();
                let wt = Tensor::constant(wsum.clone(), vec![16 * 16, 4]);
                let prod = tape.mul(&out.image, &wt);
                tape.sum(&prod)
            },
        );
        assert!(rel < 1e-4, "rasterizer gradcheck rel err {rel}");
    }

    #[test]
    fn render_fixed_overrides_and_detaches() {
        let mut cam = test_cam(17, 17);
        cam.cx = 8.5;
        cam.cy = 8.5;
        let mut tape = Tape::new();
        let centers = tape.leaf(vec![0.0, 0.0, 0.0], vec![1, 3]);
        let rot = tape.leaf(unit_quat(), vec![1, 4]);
        let scales = tape.leaf(vec![0.3; 3], vec![1, 3]);
        let alpha = render_fixed(&mut tape, &centers, &rot, &cam, RHO_FIX, SIGMA_FIX).unwrap();
        // tiny fixed sigma: only pixels right at the center are lit
        let a_center = alpha.data()[8 * 17 + 8];
        assert!(a_center > 0.9, "center alpha {a_center}");
        // gradient w.r.t. learned scales is exactly zero; centers get grads
        let loss = tape.sum(&alpha);
        let gs = tape.backward(&loss);
        assert!(gs.get(scales.id()).is_none());
        assert!(gs.get(rot.id()).is_none());
        assert!(gs.get(centers.id()).is_some());
    }

    #[test]
    fn render_fixed_independent_of_learned_scale_values() {
        let cam = test_cam(16, 16);
        let render = |sc: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let centers = Tensor::constant(vec![0.0, 0.0, 0.0], vec![1, 3]);
            let rot = Tensor::constant(unit_quat(), vec![1, 4]);
            let _learned = Tensor::constant(vec![sc; 3], vec![1, 3]);
            render_fixed(&mut tape, &centers, &rot, &cam, RHO_FIX, SIGMA_FIX)
                .unwrap()
                .data()
                .to_vec()
        };
        assert_eq!(render(0.01), render(0.4));
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = std::env::temp_dir().join("avatar_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let rgb: Vec<f64> = (0..4 * 3 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
        let path = dir.join("t.ppm");
        write_ppm(&path, &rgb, 4, 3).unwrap();
        let (back, w, h) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }
}
