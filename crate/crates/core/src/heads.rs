//! Decode point tokens into splat parameters and apply pose-conditioned
//! deformation on top of linear blend skinning.

use rand_chacha::ChaCha8Rng;

use crate::body::{lbs_transform, rotate_gaussian_frames, AnchorSet, PoseParams, ProxyBody};
use crate::fusion::randn;
use crate::optim::{LeafCache, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Center offsets and motion deformations are tanh-bounded to this radius (m).
pub const OFFSET_BOUND: f64 = 0.05;
pub const SIGMA_MIN: f64 = 1e-4;
/// Raw-output layout of the regression head.
const RAW_DIM: usize = 14;

#[derive(Clone)]
pub struct GaussianSet {
    pub centers: Tensor,   // N x 3 (m)
    pub rotations: Tensor, // N x 4 unit quaternions
    pub scales: Tensor,    // N x 3 (m, positive)
    pub opacity: Tensor,   // N x 1 in [0,1]
    pub colors: Tensor,    // N x 3 SH degree-0
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.rows() == 0
    }

    /// Panics when a type invariant is broken; used by tests and debug paths.
    pub fn assert_invariants(&self) {
        let n = self.len();
        assert_eq!(self.rotations.shape(), &[n, 4]);
        assert_eq!(self.scales.shape(), &[n, 3]);
        assert_eq!(self.opacity.shape(), &[n, 1]);
        assert_eq!(self.colors.shape(), &[n, 3]);
        for i in 0..n {
            let q = &self.rotations.data()[i * 4..i * 4 + 4];
            let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "rotation {i} norm {norm}");
            for a in 0..3 {
                assert!(self.scales.data()[i * 3 + a] > 0.0, "scale {i} not positive");
            }
            let rho = self.opacity.data()[i];
            assert!((0.0..=1.0).contains(&rho), "opacity {i} = {rho}");
        }
    }
}

/// Conditioning for the pose-dependent deformation head.
pub struct DeformationContext {
    /// mean fused deformation token, 1 x C
    pub def_mean: Tensor,
    /// pose vector [theta; root_translation], 1 x (3J+3)
    pub theta: Tensor,
}

/// `sigma_bias` pre-activation bias of the scale outputs; softplus(sigma_bias)
/// sets the initial splat size.
pub fn init_head_params(store: &mut ParamStore, c_point: usize, c: usize, pose_dim: usize, sigma_bias: f64, rng: &mut ChaCha8Rng) {
    let cp = c_point;
    store.insert("head.reg.fc1.w", randn(rng, cp * cp, 1.0 / (cp as f64).sqrt()), vec![cp, cp]);
    store.insert("head.reg.fc1.b", vec![0.0; cp], vec![cp]);
    // zero weights put every initial splat exactly on its anchor
    store.insert("head.reg.fc2.w", vec![0.0; cp * RAW_DIM], vec![cp, RAW_DIM]);
    let mut b2 = vec![0.0; RAW_DIM];
    for s in 7..10 {
        b2[s] = sigma_bias;
    }
    store.insert("head.reg.fc2.b", b2, vec![RAW_DIM]);

    let cond_in = c + pose_dim;
    store.insert(
        "head.def.cond1.w",
        randn(rng, cond_in * cp, 1.0 / (cond_in as f64).sqrt()),
        vec![cond_in, cp],
    );
    store.insert("head.def.cond1.b", vec![0.0; cp], vec![cp]);
    store.insert(
        "head.def.cond2.w",
        randn(rng, cp * 2 * cp, 1.0 / (cp as f64).sqrt()),
        vec![cp, 2 * cp],
    );
    store.insert("head.def.cond2.b", vec![0.0; 2 * cp], vec![2 * cp]);
    store.insert("head.def.fc1.w", randn(rng, cp * cp, 1.0 / (cp as f64).sqrt()), vec![cp, cp]);
    store.insert("head.def.fc1.b", vec![0.0; cp], vec![cp]);
    // zero final layer: animation starts as pure LBS
    store.insert("head.def.fc2.w", vec![0.0; cp * 3], vec![cp, 3]);
    store.insert("head.def.fc2.b", vec![0.0; 3], vec![3]);
}

fn linear(tape: &mut Tape, lv: &mut LeafCache, x: &Tensor, name: &str) -> Tensor {
    let w = lv.get(tape, &format!("{name}.w"));
    let b = lv.get(tape, &format!("{name}.b"));
    let y = tape.matmul(x, &w);
    tape.add_bias(&y, &b)
}

/// Pointwise MLP from final point tokens to splat parameters. Offsets are
/// bounded, rotations biased toward identity and normalized, scales kept
/// positive, opacity squashed; the activation design enforces every
/// GaussianSet invariant for arbitrary tokens.
pub fn regress_gaussians(
    tape: &mut Tape,
    lv: &mut LeafCache,
    tokens: &Tensor,
    anchors: &AnchorSet,
) -> GaussianSet {
    let n = tokens.rows();
    assert_eq!(n, anchors.len(), "token/anchor count mismatch");
    let h = linear(tape, lv, tokens, "head.reg.fc1");
    let h = tape.gelu(&h);
    let raw = linear(tape, lv, &h, "head.reg.fc2");

    let dp_raw = tape.slice_cols(&raw, 0, 3);
    let dp = tape.tanh(&dp_raw);
    let dp = tape.scale(&dp, OFFSET_BOUND);
    let base = Tensor::constant(anchors.positions_flat(), vec![n, 3]);
    let centers = tape.add(&base, &dp);

    let q_raw = tape.slice_cols(&raw, 3, 4);
    let ident = Tensor::constant(vec![1.0, 0.0, 0.0, 0.0], vec![4]);
    let q = tape.add_bias(&q_raw, &ident);
    let rotations = tape.normalize_rows(&q, 1e-12);

    let s_raw = tape.slice_cols(&raw, 7, 3);
    let s = tape.softplus(&s_raw);
    let scales = tape.add_scalar(&s, SIGMA_MIN);

    let o_raw = tape.slice_cols(&raw, 10, 1);
    let opacity = tape.sigmoid(&o_raw);

    let colors = tape.slice_cols(&raw, 11, 3);
    GaussianSet { centers, rotations, scales, opacity, colors }
}

/// AdaLN-modulated MLP producing bounded per-point motion offsets from the
/// fused deformation token and the pose vector.
pub fn pose_deformation(
    tape: &mut Tape,
    lv: &mut LeafCache,
    tokens: &Tensor,
    ctx: &DeformationContext,
) -> Tensor {
    let cp = tokens.cols();
    let cond = tape.concat_cols(&[&ctx.def_mean, &ctx.theta]);
    let c1 = linear(tape, lv, &cond, "head.def.cond1");
    let c1 = tape.gelu(&c1);
    let gb = linear(tape, lv, &c1, "head.def.cond2"); // 1 x 2Cp
    let gamma_raw = tape.slice_cols(&gb, 0, cp);
    let gamma = tape.add_scalar(&gamma_raw, 1.0);
    let beta = tape.slice_cols(&gb, cp, cp);

    let ones = Tensor::constant(vec![1.0; cp], vec![cp]);
    let zeros = Tensor::constant(vec![0.0; cp], vec![cp]);
    let hn = tape.layernorm(tokens, &ones, &zeros, 1e-6);
    let hn = tape.mul_bias(&hn, &gamma);
    let hn = tape.add_bias(&hn, &beta);

    let h = linear(tape, lv, &hn, "head.def.fc1");
    let h = tape.gelu(&h);
    let raw = linear(tape, lv, &h, "head.def.fc2");
    let t = tape.tanh(&raw);
    tape.scale(&t, OFFSET_BOUND)
}

/// Add canonical offsets and motion deformation first, then skin: centers go
/// through LBS, splat frames are rotated by the blended bone rotation, and
/// the view-independent parameters pass through untouched.
pub fn pose_avatar(
    tape: &mut Tape,
    g: &GaussianSet,
    dp_motion: &Tensor,
    pose: &PoseParams,
    anchors: &AnchorSet,
    body: &ProxyBody,
) -> GaussianSet {
    assert_eq!(dp_motion.shape(), g.centers.shape());
    let p = tape.add(&g.centers, dp_motion);
    let centers = lbs_transform(tape, &p, anchors, pose, body);
    let rotations = rotate_gaussian_frames(tape, &g.rotations, anchors, pose, body);
    GaussianSet {
        centers,
        rotations,
        scales: g.scales.clone(),
        opacity: g.opacity.clone(),
        colors: g.colors.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{build_proxy_body, sample_anchors, JOINT_COUNT};
    use crate::gradcheck::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CP: usize = 8;
    const C: usize = 8;
    const POSE_DIM: usize = 3 * JOINT_COUNT + 3;

    fn setup(seed: u64, sigma_bias: f64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_head_params(&mut store, CP, C, POSE_DIM, sigma_bias, &mut rng);
        store
    }

    fn test_anchors(n: usize) -> AnchorSet {
        let body = build_proxy_body(JOINT_COUNT, 5).unwrap();
        sample_anchors(&body, n, 5).unwrap()
    }

    #[test]
    fn zero_init_puts_splats_on_anchors() {
        let store = setup(1, 0.0);
        let anchors = test_anchors(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let toks: Vec<f64> = (0..6 * CP).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let g = regress_gaussians(&mut tape, &mut lv, &Tensor::constant(toks, vec![6, CP]), &anchors);
        g.assert_invariants();
        for (a, b) in g.centers.data().iter().zip(anchors.positions_flat()) {
            assert!((a - b).abs() < 1e-9, "center off anchor at init");
        }
        for i in 0..6 {
            let q = &g.rotations.data()[i * 4..i * 4 + 4];
            assert!((q[0] - 1.0).abs() < 1e-12 && q[1..].iter().all(|v| v.abs() < 1e-12));
            for a in 0..3 {
                // softplus(0) = ln 2
                let s = g.scales.data()[i * 3 + a];
                assert!((s - (SIGMA_MIN + 2f64.ln())).abs() < 1e-12, "sigma {s}");
            }
            assert!((g.opacity.data()[i] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_bias_controls_initial_size() {
        let bias = -4.0;
        let store = setup(3, bias);
        let anchors = test_anchors(3);
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let g = regress_gaussians(
            &mut tape,
            &mut lv,
            &Tensor::constant(vec![0.3; 3 * CP], vec![3, CP]),
            &anchors,
        );
        let want = SIGMA_MIN + (bias.exp() + 1.0f64).ln();
        for s in g.scales.data() {
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invariants_hold_for_fuzzed_tokens() {
        let store = setup(5, 0.0);
        let anchors = test_anchors(100);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let toks: Vec<f64> = (0..100 * CP).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let mut tape = Tape::new();
            let mut lv = LeafCache::new(&store);
            let g = regress_gaussians(
                &mut tape,
                &mut lv,
                &Tensor::constant(toks, vec![100, CP]),
                &anchors,
            );
            g.assert_invariants();
            // offsets bounded
            for (c, a) in g.centers.data().iter().zip(anchors.positions_flat()) {
                assert!((c - a).abs() <= OFFSET_BOUND + 1e-12);
            }
        }
    }

    #[test]
    fn regress_is_pointwise_permutation_equivariant() {
        let mut store = setup(7, 0.0);
        // nonzero final layer so outputs depend on tokens
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        store.insert(
            "head.reg.fc2.w",
            randn(&mut rng, CP * 14, 0.3),
            vec![CP, 14],
        );
        let anchors = test_anchors(5);
        let toks: Vec<f64> = (0..5 * CP).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted_anchors = anchors.clone();
        permuted_anchors.positions = perm.iter().map(|&i| anchors.positions[i]).collect();
        let ptoks: Vec<f64> =
            perm.iter().flat_map(|&i| toks[i * CP..(i + 1) * CP].to_vec()).collect();
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let g1 = regress_gaussians(&mut tape, &mut lv, &Tensor::constant(toks, vec![5, CP]), &anchors);
        let g2 = regress_gaussians(
            &mut tape,
            &mut lv,
            &Tensor::constant(ptoks, vec![5, CP]),
            &permuted_anchors,
        );
        for (k, &i) in perm.iter().enumerate() {
            for a in 0..3 {
                assert!(
                    (g1.centers.data()[i * 3 + a] - g2.centers.data()[k * 3 + a]).abs() < 1e-12
                );
                assert!((g1.colors.data()[i * 3 + a] - g2.colors.data()[k * 3 + a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regress_gradcheck() {
        let mut store = setup(9, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        store.insert("head.reg.fc2.w", randn(&mut rng, CP * 14, 0.2), vec![CP, 14]);
        let anchors = test_anchors(4);
        let toks: Vec<f64> = (0..4 * CP).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let store = store;
        let rel = gradcheck(&[(toks, vec![4, CP])], |tape, xs| {
            let mut lv = LeafCache::new(&store);
            let g = regress_gaussians(tape, &mut lv, &xs[0], &anchors);
            let parts = [
                tape.sum(&g.centers),
                tape.sum(&g.rotations),
                tape.sum(&g.scales),
                tape.sum(&g.opacity),
                tape.sum(&g.colors),
            ];
            let mut acc = parts[0].clone();
            for p in &parts[1..] {
                acc = tape.add(&acc, p);
            }
            acc
        });
        assert!(rel < 1e-5, "regress gradcheck rel err {rel}");
    }

    #[test]
    fn deformation_zero_at_init_and_bounded() {
        let store = setup(11, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let toks = Tensor::constant((0..7 * CP).map(|_| rng.gen_range(-2.0..2.0)).collect(), vec![7, CP]);
        let ctx = DeformationContext {
            def_mean: Tensor::constant(randn(&mut rng, C, 1.0), vec![1, C]),
            theta: Tensor::constant(randn(&mut rng, POSE_DIM, 0.5), vec![1, POSE_DIM]),
        };
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let dp = pose_deformation(&mut tape, &mut lv, &toks, &ctx);
        assert!(dp.data().iter().all(|&v| v == 0.0), "init deformation must be zero");

        // with a live final layer the bound still holds
        let mut store2 = setup(11, 0.0);
        store2.insert("head.def.fc2.w", randn(&mut rng, CP * 3, 5.0), vec![CP, 3]);
        let mut lv2 = LeafCache::new(&store2);
        let dp2 = pose_deformation(&mut tape, &mut lv2, &toks, &ctx);
        assert!(dp2.data().iter().all(|&v| v.abs() <= OFFSET_BOUND));
        assert!(dp2.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn deformation_theta_gradcheck() {
        let mut store = setup(13, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        store.insert("head.def.fc2.w", randn(&mut rng, CP * 3, 0.3), vec![CP, 3]);
        let toks = Tensor::constant(randn(&mut rng, 4 * CP, 0.8), vec![4, CP]);
        let defm = Tensor::constant(randn(&mut rng, C, 0.8), vec![1, C]);
        let theta: Vec<f64> = randn(&mut rng, POSE_DIM, 0.3);
        let rel = gradcheck(&[(theta, vec![1, POSE_DIM])], |tape, xs| {
            let mut lv = LeafCache::new(&store);
            let ctx = DeformationContext { def_mean: defm.clone(), theta: xs[0].clone() };
            let dp = pose_deformation(tape, &mut lv, &toks, &ctx);
            tape.sum(&dp)
        });
        assert!(rel < 1e-5, "deformation theta gradcheck rel err {rel}");
    }

    #[test]
    fn pose_avatar_identity_pose_is_noop() {
        let store = setup(15, 0.0);
        let body = build_proxy_body(JOINT_COUNT, 5).unwrap();
        let anchors = sample_anchors(&body, 10, 5).unwrap();
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let toks = Tensor::constant(vec![0.1; 10 * CP], vec![10, CP]);
        let g = regress_gaussians(&mut tape, &mut lv, &toks, &anchors);
        let zero_dp = Tensor::zeros(vec![10, 3]);
        let pose = PoseParams::identity(JOINT_COUNT);
        let posed = pose_avatar(&mut tape, &g, &zero_dp, &pose, &anchors, &body);
        for (a, b) in g.centers.data().iter().zip(posed.centers.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in g.rotations.data().iter().zip(posed.rotations.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        posed.assert_invariants();
    }

    #[test]
    fn pose_avatar_root_translation_moves_centers_only() {
        let store = setup(17, 0.0);
        let body = build_proxy_body(JOINT_COUNT, 5).unwrap();
        let anchors = sample_anchors(&body, 8, 5).unwrap();
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let toks = Tensor::constant(vec![0.2; 8 * CP], vec![8, CP]);
        let g = regress_gaussians(&mut tape, &mut lv, &toks, &anchors);
        let zero_dp = Tensor::zeros(vec![8, 3]);
        let mut pose = PoseParams::identity(JOINT_COUNT);
        pose.root_translation = [0.3, -0.2, 0.9];
        let posed = pose_avatar(&mut tape, &g, &zero_dp, &pose, &anchors, &body);
        for i in 0..8 {
            for a in 0..3 {
                let want = g.centers.data()[i * 3 + a] + pose.root_translation[a];
                assert!((posed.centers.data()[i * 3 + a] - want).abs() < 1e-9);
            }
        }
        assert_eq!(g.scales.data(), posed.scales.data());
        assert_eq!(g.opacity.data(), posed.opacity.data());
        assert_eq!(g.colors.data(), posed.colors.data());
    }

    #[test]
    fn offsets_then_lbs_matches_manual_composition() {
        let store = setup(19, 0.0);
        let body = build_proxy_body(JOINT_COUNT, 5).unwrap();
        let anchors = sample_anchors(&body, 5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut pose = PoseParams::identity(JOINT_COUNT);
        for j in 0..JOINT_COUNT {
            pose.set_joint(j, [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
        }
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let toks = Tensor::constant(randn(&mut rng, 5 * CP, 0.5), vec![5, CP]);
        let g = regress_gaussians(&mut tape, &mut lv, &toks, &anchors);
        let dp = Tensor::constant(randn(&mut rng, 15, 0.01), vec![5, 3]);
        let posed = pose_avatar(&mut tape, &g, &dp, &pose, &anchors, &body);
        // manual: add offsets first, then skin the summed positions
        let summed = tape.add(&g.centers, &dp);
        let manual = crate::body::lbs_transform(&mut tape, &summed, &anchors, &pose, &body);
        for (a, b) in manual.data().iter().zip(posed.centers.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
