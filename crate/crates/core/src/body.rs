//! Procedural articulated proxy body: a 16-bone capsule humanoid with
//! surface sampling, diffused skinning weights, and linear blend skinning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

use crate::tensor::{Tape, Tensor};

pub const JOINT_COUNT: usize = 16;

#[derive(Clone, Debug)]
pub struct Bone {
    /// -1 for the root.
    pub parent: i32,
    pub head: [f64; 3],
    pub tail: [f64; 3],
    pub radius: f64,
}

#[derive(Clone)]
pub struct ProxyBody {
    pub bones: Vec<Bone>,
    /// capsule tessellation of the canonical surface
    pub mesh_vertices: Vec<[f64; 3]>,
    pub mesh_faces: Vec<[usize; 3]>,
}

/// Per-joint axis-angle rotations plus a root translation, all zeros = rest.
#[derive(Clone, Debug, Default)]
pub struct PoseParams {
    pub theta: Vec<f64>, // 3 * J
    pub root_translation: [f64; 3],
}

impl PoseParams {
    pub fn identity(joints: usize) -> PoseParams {
        PoseParams { theta: vec![0.0; 3 * joints], root_translation: [0.0; 3] }
    }

    pub fn set_joint(&mut self, j: usize, axis_angle: [f64; 3]) {
        self.theta[3 * j..3 * j + 3].copy_from_slice(&axis_angle);
    }

    /// Flat conditioning vector [theta; root_translation], length 3J+3.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.root_translation);
        v
    }
}

/// Canonical-space surface points with per-point skinning weights.
#[derive(Clone)]
pub struct AnchorSet {
    pub positions: Vec<[f64; 3]>,
    /// dense N x J, rows sum to 1
    pub weights: Vec<f64>,
    pub joints: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions_flat(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| p.to_vec()).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BodyError {
    #[error("unsupported joint count {0}; only 16 is implemented")]
    UnsupportedJoints(usize),
    #[error("degenerate surface: total area is zero")]
    DegenerateSurface,
}

/// Rigid/affine transform as rotation-ish 3x3 plus translation.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Affine {
    pub const IDENTITY: Affine =
        Affine { r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.t;
        for i in 0..3 {
            for j in 0..3 {
                out[i] += self.r[i][j] * p[j];
            }
        }
        out
    }

    pub fn compose(&self, other: &Affine) -> Affine {
        // self ∘ other
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] += self.r[i][k] * other.r[k][j];
                }
            }
        }
        Affine { r, t: self.apply(other.t) }
    }
}

pub fn axis_angle_to_matrix(v: [f64; 3]) -> [[f64; 3]; 3] {
    let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if angle < 1e-12 {
        return Affine::IDENTITY.r;
    }
    let (x, y, z) = (v[0] / angle, v[1] / angle, v[2] / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rotation matrix to quaternion (w, x, y, z); tolerates slightly
/// non-orthonormal input and normalizes the result.
pub fn matrix_to_quat(m: &[[f64; 3]; 3]) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let mut q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).max(1e-12).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).max(1e-12).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).max(1e-12).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    for v in q.iter_mut() {
        *v /= n;
    }
    q
}

pub fn quat_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn mirror_x(mut b: Bone, parent: i32) -> Bone {
    b.head[0] = -b.head[0];
    b.tail[0] = -b.tail[0];
    b.parent = parent;
    b
}

/// Deterministic 16-bone capsule humanoid in an A-pose. The seed jitters
/// proportions a few percent so different subjects are distinguishable.
pub fn build_proxy_body(joint_count: usize, seed: u64) -> Result<ProxyBody, BodyError> {
    if joint_count != JOINT_COUNT {
        return Err(BodyError::UnsupportedJoints(joint_count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0d7);
    let mut j = |base: f64| base * rng.gen_range(0.95..1.05);

    let pelvis = Bone { parent: -1, head: [0.0, j(0.95), 0.0], tail: [0.0, j(1.06), 0.0], radius: j(0.11) };
    let spine = Bone { parent: 0, head: [0.0, j(1.06), 0.0], tail: [0.0, j(1.26), 0.0], radius: j(0.10) };
    let chest = Bone { parent: 1, head: [0.0, j(1.26), 0.0], tail: [0.0, j(1.46), 0.0], radius: j(0.11) };
    let head = Bone { parent: 2, head: [0.0, j(1.50), 0.0], tail: [0.0, j(1.68), 0.0], radius: j(0.09) };
    let uarm = Bone { parent: 2, head: [j(0.16), j(1.43), 0.0], tail: [j(0.37), j(1.22), 0.0], radius: j(0.045) };
    let farm = Bone { parent: 4, head: [j(0.37), j(1.22), 0.0], tail: [j(0.55), j(1.03), 0.0], radius: j(0.040) };
    let hand = Bone { parent: 5, head: [j(0.55), j(1.03), 0.0], tail: [j(0.63), j(0.94), 0.0], radius: j(0.035) };
    let uarm_r = mirror_x(uarm.clone(), 2);
    let farm_r = mirror_x(farm.clone(), 7);
    let hand_r = mirror_x(hand.clone(), 8);
    let thigh = Bone { parent: 0, head: [j(0.09), j(0.92), 0.0], tail: [j(0.09), j(0.52), 0.0], radius: j(0.070) };
    let shin = Bone { parent: 10, head: [j(0.09), j(0.52), 0.0], tail: [j(0.09), j(0.12), 0.0], radius: j(0.055) };
    let foot = Bone { parent: 11, head: [j(0.09), j(0.12), 0.0], tail: [j(0.09), j(0.04), j(0.12)], radius: j(0.040) };
    let thigh_r = mirror_x(thigh.clone(), 0);
    let shin_r = mirror_x(shin.clone(), 13);
    let foot_r = mirror_x(foot.clone(), 14);

    let bones = vec![
        pelvis, spine, chest, head, uarm, farm, hand, uarm_r, farm_r, hand_r, thigh, shin, foot,
        thigh_r, shin_r, foot_r,
    ];
    let (mesh_vertices, mesh_faces) = tessellate(&bones);
    Ok(ProxyBody { bones, mesh_vertices, mesh_faces })
}

impl ProxyBody {
    pub fn joints(&self) -> usize {
        self.bones.len()
    }

    pub fn capsule_area(&self, j: usize) -> f64 {
        let b = &self.bones[j];
        let l = dist(b.head, b.tail);
        2.0 * std::f64::consts::PI * b.radius * l + 4.0 * std::f64::consts::PI * b.radius * b.radius
    }

    pub fn total_area(&self) -> f64 {
        (0..self.bones.len()).map(|j| self.capsule_area(j)).sum()
    }

    pub fn bounding_box(&self) -> crate::serial::Bbox {
        let mut pts = Vec::new();
        for b in &self.bones {
            for p in [b.head, b.tail] {
                for (dx, dy, dz) in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
                    pts.push([p[0] + dx * b.radius, p[1] + dy * b.radius, p[2] + dz * b.radius]);
                    pts.push([p[0] - dx * b.radius, p[1] - dy * b.radius, p[2] - dz * b.radius]);
                }
            }
        }
        crate::serial::Bbox::of_points(&pts)
    }

    /// Forward kinematics: world transform per bone, relative to rest
    /// (identity pose gives identities).
    pub fn fk(&self, pose: &PoseParams) -> Vec<Affine> {
        assert_eq!(pose.theta.len(), 3 * self.joints(), "pose dim mismatch");
        let mut out: Vec<Affine> = Vec::with_capacity(self.bones.len());
        for (jn, bone) in self.bones.iter().enumerate() {
            let r = axis_angle_to_matrix([
                pose.theta[3 * jn],
                pose.theta[3 * jn + 1],
                pose.theta[3 * jn + 2],
            ]);
            // rotate about the bone head: T(h) R T(-h)
            let h = bone.head;
            let local = Affine {
                r,
                t: [
                    h[0] - r[0][0] * h[0] - r[0][1] * h[1] - r[0][2] * h[2],
                    h[1] - r[1][0] * h[0] - r[1][1] * h[1] - r[1][2] * h[2],
                    h[2] - r[2][0] * h[0] - r[2][1] * h[1] - r[2][2] * h[2],
                ],
            };
            let world = if bone.parent < 0 {
                let root = Affine { r: Affine::IDENTITY.r, t: pose.root_translation };
                root.compose(&local)
            } else {
                out[bone.parent as usize].compose(&local)
            };
            out.push(world);
        }
        out
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Distance from a point to the bone's core segment.
pub fn segment_distance(p: [f64; 3], head: [f64; 3], tail: [f64; 3]) -> f64 {
    let d = [tail[0] - head[0], tail[1] - head[1], tail[2] - head[2]];
    let v = [p[0] - head[0], p[1] - head[1], p[2] - head[2]];
    let dd: f64 = d.iter().map(|x| x * x).sum();
    let t = if dd > 0.0 {
        ((v[0] * d[0] + v[1] * d[1] + v[2] * d[2]) / dd).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [head[0] + t * d[0], head[1] + t * d[1], head[2] + t * d[2]];
    dist(p, c)
}

/// Softmax of (-distance/temperature) over the k nearest bone segments;
/// all other bones get exactly zero weight. Rows sum to 1.
pub fn diffuse_skinning(body: &ProxyBody, points: &[[f64; 3]], k: usize, temperature: f64) -> Vec<f64> {
    let j = body.joints();
    assert!(k >= 1 && k <= j, "k must be in [1, J]");
    let mut weights = vec![0.0; points.len() * j];
    for (pi, p) in points.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = body
            .bones
            .iter()
            .enumerate()
            .map(|(bi, b)| (segment_distance(*p, b.head, b.tail), bi))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let dmin = d[0].0;
        let mut z = 0.0;
        let mut e = Vec::with_capacity(k);
        for &(di, bi) in d.iter().take(k) {
            let w = (-(di - dmin) / temperature).exp();
            e.push((bi, w));
            z += w;
        }
        for (bi, w) in e {
            weights[pi * j + bi] = w / z;
        }
    }
    weights
}

/// Area-weighted uniform sampling over the canonical capsule surface, with
/// skinning weights attached. Deterministic per seed.
pub fn sample_anchors(body: &ProxyBody, n: usize, seed: u64) -> Result<AnchorSet, BodyError> {
    assert!(n >= 1);
    let total = body.total_area();
    if !(total > 0.0) {
        return Err(BodyError::DegenerateSurface);
    }
    let mut cum = Vec::with_capacity(body.joints());
    let mut acc = 0.0;
    for jn in 0..body.joints() {
        acc += body.capsule_area(jn);
        cum.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa2c4);
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen_range(0.0..total);
        let jn = cum.partition_point(|&c| c < u).min(body.joints() - 1);
        positions.push(sample_capsule_surface(&body.bones[jn], &mut rng));
    }
    let weights = diffuse_skinning(body, &positions, 4, 0.05);
    Ok(AnchorSet { positions, weights, joints: body.joints() })
}

fn orthonormal_frame(axis: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut u = [
        axis[1] * a[2] - axis[2] * a[1],
        axis[2] * a[0] - axis[0] * a[2],
        axis[0] * a[1] - axis[1] * a[0],
    ];
    let nu = (u.iter().map(|x| x * x).sum::<f64>()).sqrt();
    for v in u.iter_mut() {
        *v /= nu;
    }
    let v = [
        axis[1] * u[2] - axis[2] * u[1],
        axis[2] * u[0] - axis[0] * u[2],
        axis[0] * u[1] - axis[1] * u[0],
    ];
    (u, v)
}

fn sample_capsule_surface(b: &Bone, rng: &mut impl Rng) -> [f64; 3] {
    let l = dist(b.head, b.tail);
    let axis = if l > 0.0 {
        [(b.tail[0] - b.head[0]) / l, (b.tail[1] - b.head[1]) / l, (b.tail[2] - b.head[2]) / l]
    } else {
        [0.0, 1.0, 0.0]
    };
    let r = b.radius;
    let cyl_area = 2.0 * std::f64::consts::PI * r * l;
    let cap_area = 4.0 * std::f64::consts::PI * r * r;
    let (u_axis, v_axis) = orthonormal_frame(axis);
    if rng.gen_range(0.0..cyl_area + cap_area) < cyl_area {
        let t = rng.gen_range(0.0..l);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let (s, c) = phi.sin_cos();
        [
            b.head[0] + axis[0] * t + r * (c * u_axis[0] + s * v_axis[0]),
            b.head[1] + axis[1] * t + r * (c * u_axis[1] + s * v_axis[1]),
            b.head[2] + axis[2] * t + r * (c * u_axis[2] + s * v_axis[2]),
        ]
    } else {
        // uniform sphere point; attach to the cap it points toward
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let (s, c) = phi.sin_cos();
        let dir = [
            rho * (c * u_axis[0] + s * v_axis[0]) + z * axis[0],
            rho * (c * u_axis[1] + s * v_axis[1]) + z * axis[1],
            rho * (c * u_axis[2] + s * v_axis[2]) + z * axis[2],
        ];
        let center = if z >= 0.0 { b.tail } else { b.head };
        [center[0] + r * dir[0], center[1] + r * dir[1], center[2] + r * dir[2]]
    }
}

/// Per-point blended bone transforms for a pose: M_i = sum_j w_ij G_j.
pub fn blend_transforms(weights: &[f64], joints: usize, transforms: &[Affine]) -> Vec<Affine> {
    assert_eq!(transforms.len(), joints);
    let n = weights.len() / joints;
    (0..n)
        .map(|i| {
            let mut r = [[0.0; 3]; 3];
            let mut t = [0.0; 3];
            for jn in 0..joints {
                let w = weights[i * joints + jn];
                if w == 0.0 {
                    continue;
                }
                let g = &transforms[jn];
                for a in 0..3 {
                    t[a] += w * g.t[a];
                    for bcol in 0..3 {
                        r[a][bcol] += w * g.r[a][bcol];
                    }
                }
            }
            Affine { r, t }
        })
        .collect()
}

/// Linear blend skinning on the tape: differentiable w.r.t. the input points
/// (the pose and weights are treated as constants).
pub fn lbs_transform(
    tape: &mut Tape,
    points: &Tensor, // N x 3
    anchors: &AnchorSet,
    pose: &PoseParams,
    body: &ProxyBody,
) -> Tensor {
    let n = points.rows();
    assert_eq!(points.cols(), 3);
    assert_eq!(n, anchors.len(), "point/weight count mismatch");
    let blended = blend_transforms(&anchors.weights, anchors.joints, &body.fk(pose));
    lbs_apply(tape, points, &blended)
}

pub fn lbs_apply(tape: &mut Tape, points: &Tensor, blended: &[Affine]) -> Tensor {
    let n = points.rows();
    assert_eq!(blended.len(), n);
    let mut out = vec![0.0; n * 3];
    for i in 0..n {
        let p = [points.data()[i * 3], points.data()[i * 3 + 1], points.data()[i * 3 + 2]];
        out[i * 3..i * 3 + 3].copy_from_slice(&blended[i].apply(p));
    }
    let ip = points.id();
    if ip.is_none() {
        return Tensor::constant(out, vec![n, 3]);
    }
    let rots: Vec<[[f64; 3]; 3]> = blended.iter().map(|a| a.r).collect();
    tape.push(
        out,
        vec![n, 3],
        Box::new(move |g, gs| {
            let mut gp = vec![0.0; n * 3];
            for i in 0..n {
                let r = &rots[i];
                for a in 0..3 {
                    for b in 0..3 {
                        // dL/dp_b += R[a][b] * g_a
                        gp[i * 3 + b] += r[a][b] * g[i * 3 + a];
                    }
                }
            }
            gs.accum(ip, &gp);
        }),
    )
}

/// Left-multiply each learned quaternion by the rotation of its blended bone
/// transform, then renormalize. Differentiable w.r.t. the input quaternions.
pub fn rotate_gaussian_frames(
    tape: &mut Tape,
    rotations: &Tensor, // N x 4, unit
    anchors: &AnchorSet,
    pose: &PoseParams,
    body: &ProxyBody,
) -> Tensor {
    let n = rotations.rows();
    assert_eq!(rotations.cols(), 4);
    assert_eq!(n, anchors.len());
    let blended = blend_transforms(&anchors.weights, anchors.joints, &body.fk(pose));
    let qb: Vec<[f64; 4]> = blended.iter().map(|a| matrix_to_quat(&a.r)).collect();
    let product = quat_leftmul_const(tape, rotations, &qb);
    tape.normalize_rows(&product, 0.0)
}

fn quat_leftmul_const(tape: &mut Tape, q: &Tensor, left: &[[f64; 4]]) -> Tensor {
    let n = q.rows();
    let mut out = vec![0.0; n * 4];
    for i in 0..n {
        let b = [q.data()[i * 4], q.data()[i * 4 + 1], q.data()[i * 4 + 2], q.data()[i * 4 + 3]];
        out[i * 4..i * 4 + 4].copy_from_slice(&quat_mul(left[i], b));
    }
    let iq = q.id();
    if iq.is_none() {
        return Tensor::constant(out, vec![n, 4]);
    }
    let left: Vec<[f64; 4]> = left.to_vec();
    tape.push(
        out,
        vec![n, 4],
        Box::new(move |g, gs| {
            let mut gq = vec![0.0; n * 4];
            for i in 0..n {
                let [aw, ax, ay, az] = left[i];
                // L(a): product = L(a) · b, so grad_b = L(a)ᵀ · grad
                let l = [
                    [aw, -ax, -ay, -az],
                    [ax, aw, -az, ay],
                    [ay, az, aw, -ax],
                    [az, -ay, ax, aw],
                ];
                for col in 0..4 {
                    for row in 0..4 {
                        gq[i * 4 + col] += l[row][col] * g[i * 4 + row];
                    }
                }
            }
            gs.accum(iq, &gq);
        }),
    )
}

fn tessellate(bones: &[Bone]) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let seg = 8usize;
    let stacks = 8usize;
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for b in bones {
        let l = dist(b.head, b.tail);
        let axis = if l > 0.0 {
            [(b.tail[0] - b.head[0]) / l, (b.tail[1] - b.head[1]) / l, (b.tail[2] - b.head[2]) / l]
        } else {
            [0.0, 1.0, 0.0]
        };
        let (u, v) = orthonormal_frame(axis);
        let base = verts.len();
        // stack of rings sweeping head cap, cylinder, tail cap
        for i in 0..=stacks {
            let t = i as f64 / stacks as f64;
            // sphere sweep parameter: polar angle from -pi/2 to +pi/2 plus shaft
            let (center, z, rho) = if t < 0.25 {
                let a = (t / 0.25 - 1.0) * std::f64::consts::FRAC_PI_2;
                (b.head, a.sin() * b.radius, a.cos() * b.radius)
            } else if t > 0.75 {
                let a = ((t - 0.75) / 0.25) * std::f64::consts::FRAC_PI_2;
                (b.tail, a.sin() * b.radius, a.cos() * b.radius)
            } else {
                let s = (t - 0.25) / 0.5;
                let c = [
                    b.head[0] + axis[0] * l * s,
                    b.head[1] + axis[1] * l * s,
                    b.head[2] + axis[2] * l * s,
                ];
                (c, 0.0, b.radius)
            };
            for k in 0..seg {
                let phi = std::f64::consts::TAU * k as f64 / seg as f64;
                let (sp, cp) = phi.sin_cos();
                verts.push([
                    center[0] + rho * (cp * u[0] + sp * v[0]) + z * axis[0],
                    center[1] + rho * (cp * u[1] + sp * v[1]) + z * axis[1],
                    center[2] + rho * (cp * u[2] + sp * v[2]) + z * axis[2],
                ]);
            }
        }
        for i in 0..stacks {
            for k in 0..seg {
                let k1 = (k + 1) % seg;
                let a = base + i * seg + k;
                let bq = base + i * seg + k1;
                let c = base + (i + 1) * seg + k;
                let d = base + (i + 1) * seg + k1;
                faces.push([a, bq, c]);
                faces.push([bq, d, c]);
            }
        }
    }
    (verts, faces)
}

pub fn write_obj(body: &ProxyBody, w: &mut impl Write) -> std::io::Result<()> {
    for v in &body.mesh_vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for f in &body.mesh_faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}
