//! Full pipeline assembly: proxy body and anchors, tokenizers, the fusion
//! stack, regression and deformation heads, and the per-sample training
//! objective. Checkpoints embed the model configuration so inference needs
//! nothing but the checkpoint file.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{build_proxy_body, sample_anchors, AnchorSet, BodyError, PoseParams, ProxyBody, JOINT_COUNT};
use crate::fusion::{
    encoder_decoder_forward, init_pit_params, point_tokenize, tokenize_images, FusionError,
    PitConfig,
};
use crate::heads::{
    init_head_params, pose_deformation, pose_avatar, regress_gaussians, DeformationContext,
    GaussianSet,
};
use crate::losses::{
    acap_neighbors, l_acap, l_asap, l_color, l_dis, l_mask, l_perceptual, total_loss, LossError,
    LossTerms, LossWeights, PerceptualPyramid,
};
use crate::optim::{LeafCache, OptimError, ParamStore};
use crate::render::{rasterize, Camera, RenderError};
use crate::tensor::{Tape, Tensor};

pub const ACAP_K: usize = 8;
pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub pit: PitConfig,
    /// pre-activation bias of the scale head; initial sigma =
    /// SIGMA_MIN + softplus(sigma_bias)
    pub sigma_bias: f64,
    pub body_seed: u64,
    pub anchor_seed: u64,
}

impl ModelConfig {
    /// Small desk-scale model (n_layer = 4).
    pub fn small() -> ModelConfig {
        ModelConfig {
            pit: PitConfig {
                n_layer: 4,
                c_point: 32,
                c: 64,
                heads: 4,
                patch: 8,
                img_h: 64,
                img_w: 64,
                n_points: 2048,
                point_patches: vec![128, 64, 32],
                pool_cells: vec![0.05, 0.1],
                curve_bits: 10,
            },
            sigma_bias: -4.6,
            body_seed: 7,
            anchor_seed: 7,
        }
    }

    pub fn medium() -> ModelConfig {
        let mut c = ModelConfig::small();
        c.pit.n_layer = 6;
        c.pit.point_patches = vec![128, 64, 32, 32];
        c.pit.pool_cells = vec![0.05, 0.1, 0.2];
        c
    }

    pub fn large() -> ModelConfig {
        let mut c = ModelConfig::small();
        c.pit.n_layer = 8;
        c.pit.point_patches = vec![128, 64, 32, 32, 32];
        c.pit.pool_cells = vec![0.05, 0.1, 0.2, 0.4];
        c
    }

    pub fn pose_dim(&self) -> usize {
        3 * JOINT_COUNT + 3
    }

    /// Flat numeric encoding stored inside checkpoints.
    pub fn to_vec(&self) -> Vec<f64> {
        let p = &self.pit;
        let mut v = vec![
            1.0, // encoding version
            p.n_layer as f64,
            p.c_point as f64,
            p.c as f64,
            p.heads as f64,
            p.patch as f64,
            p.img_h as f64,
            p.img_w as f64,
            p.n_points as f64,
            p.curve_bits as f64,
            p.point_patches.len() as f64,
        ];
        v.extend(p.point_patches.iter().map(|&x| x as f64));
        v.push(p.pool_cells.len() as f64);
        v.extend(p.pool_cells.iter().copied());
        v.push(self.sigma_bias);
        v.push(self.body_seed as f64);
        v.push(self.anchor_seed as f64);
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<ModelConfig, ModelError> {
        let bad = || ModelError::BadMeta("malformed embedded model config".into());
        let mut it = v.iter().copied();
        let mut next = || it.next().ok_or_else(bad);
        if next()? != 1.0 {
            return Err(ModelError::BadMeta("unknown config encoding version".into()));
        }
        let n_layer = next()? as usize;
        let c_point = next()? as usize;
        let c = next()? as usize;
        let heads = next()? as usize;
        let patch = next()? as usize;
        let img_h = next()? as usize;
        let img_w = next()? as usize;
        let n_points = next()? as usize;
        let curve_bits = next()? as u32;
        let np = next()? as usize;
        let mut point_patches = Vec::with_capacity(np);
        for _ in 0..np {
            point_patches.push(next()? as usize);
        }
        let nc = next()? as usize;
        let mut pool_cells = Vec::with_capacity(nc);
        for _ in 0..nc {
            pool_cells.push(next()?);
        }
        let sigma_bias = next()?;
        let body_seed = next()? as u64;
        let anchor_seed = next()? as u64;
        Ok(ModelConfig {
            pit: PitConfig {
                n_layer,
                c_point,
                c,
                heads,
                patch,
                img_h,
                img_w,
                n_points,
                point_patches,
                pool_cells,
                curve_bits,
            },
            sigma_bias,
            body_seed,
            anchor_seed,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("bad checkpoint metadata: {0}")]
    BadMeta(String),
}

/// Immutable per-subject state derived from the config.
pub struct Model {
    pub cfg: ModelConfig,
    pub body: ProxyBody,
    pub anchors: AnchorSet,
    /// canonical k-NN graph on the anchors for the coherence regularizer
    pub acap_nb: Vec<usize>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model, ModelError> {
        cfg.pit.validate()?;
        let body = build_proxy_body(JOINT_COUNT, cfg.body_seed)?;
        let anchors = sample_anchors(&body, cfg.pit.n_points, cfg.anchor_seed)?;
        let acap_nb = acap_neighbors(&anchors.positions_flat(), ACAP_K);
        Ok(Model { cfg, body, anchors, acap_nb })
    }

    /// Fresh parameter store with every pipeline parameter initialized.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e55);
        let mut store = ParamStore::new();
        init_pit_params(&mut store, &self.cfg.pit, &mut rng);
        init_head_params(
            &mut store,
            self.cfg.pit.c_point,
            self.cfg.pit.c,
            self.pose_dim(),
            self.cfg.sigma_bias,
            &mut rng,
        );
        store.insert("meta.config", self.cfg.to_vec(), vec![self.cfg.to_vec().len()]);
        store
    }

    pub fn pose_dim(&self) -> usize {
        self.cfg.pose_dim()
    }

    /// Canonical reconstruction from input frames. Returns the splats, the
    /// mean fused deformation token (1 x C) and the final point tokens
    /// (N x C_point).
    pub fn forward_canonical(
        &self,
        tape: &mut Tape,
        lv: &mut LeafCache,
        images: &[Vec<f64>],
        rng: &mut impl Rng,
    ) -> Result<(GaussianSet, Tensor, Tensor), ModelError> {
        assert!(!images.is_empty(), "at least one input frame required");
        let (batch, cls) = tokenize_images(tape, lv, &self.cfg.pit, images)?;
        let grid = point_tokenize(tape, lv, &self.anchors.positions);
        let (grid, def, _) =
            encoder_decoder_forward(tape, lv, &self.cfg.pit, grid, batch, &cls, rng)?;
        let nf = images.len();
        let ones = Tensor::constant(vec![1.0 / nf as f64; nf], vec![nf, 1]);
        let def_mean = tape.matmul_tn(&ones, &def);
        let g = regress_gaussians(tape, lv, &grid.features, &self.anchors);
        Ok((g, def_mean, grid.features))
    }

    /// Pose-conditioned splats: motion deformation plus LBS on top of the
    /// canonical set.
    pub fn forward_posed(
        &self,
        tape: &mut Tape,
        lv: &mut LeafCache,
        canonical: &GaussianSet,
        def_mean: &Tensor,
        tokens: &Tensor,
        pose: &PoseParams,
    ) -> GaussianSet {
        let theta = Tensor::constant(pose.flat(), vec![1, self.pose_dim()]);
        let ctx = DeformationContext { def_mean: def_mean.clone(), theta };
        let dp = pose_deformation(tape, lv, tokens, &ctx);
        pose_avatar(tape, canonical, &dp, pose, &self.anchors, &self.body)
    }

    /// Full objective for one supervision sample: forward from the inputs,
    /// pose and render toward the target view, evaluate every loss term.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        lv: &mut LeafCache,
        images: &[Vec<f64>],
        target: &TrainingTarget,
        weights: &LossWeights,
        pyr: &PerceptualPyramid,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, LossTerms), ModelError> {
        let (g, def_mean, tokens) = self.forward_canonical(tape, lv, images, rng)?;
        let posed = self.forward_posed(tape, lv, &g, &def_mean, &tokens, &target.pose);
        let out = rasterize(
            tape,
            &posed.centers,
            &posed.rotations,
            &posed.scales,
            &posed.opacity,
            &posed.colors,
            &target.camera,
            BACKGROUND,
        )?;
        let hw = target.camera.width * target.camera.height;
        let rgb = out.rgb(tape);
        let alpha = out.alpha(tape);
        let gt_rgb = Tensor::constant(target.rgb.clone(), vec![hw, 3]);
        let gt_mask = Tensor::constant(target.mask.clone(), vec![hw, 1]);
        let anchors_t = Tensor::constant(self.anchors.positions_flat(), vec![self.anchors.len(), 3]);
        let terms = LossTerms {
            color: l_color(tape, &rgb, &gt_rgb)?,
            mask: l_mask(tape, &alpha, &gt_mask)?,
            perceptual: l_perceptual(tape, pyr, &rgb, &gt_rgb)?,
            dis: l_dis(tape, &posed.centers, &posed.rotations, &target.camera, &gt_mask)?,
            asap: l_asap(tape, &g.scales),
            acap: l_acap(tape, &g.centers, &anchors_t, &self.acap_nb),
        };
        let total = total_loss(tape, &terms, weights);
        Ok((total, terms))
    }
}

/// One supervision view: ground-truth image, mask, camera and pose.
pub struct TrainingTarget {
    pub rgb: Vec<f64>,  // H*W x 3 flattened
    pub mask: Vec<f64>, // H*W
    pub camera: Camera,
    pub pose: PoseParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Model {
        let mut cfg = ModelConfig::small();
        cfg.pit.n_layer = 2;
        cfg.pit.c_point = 8;
        cfg.pit.c = 8;
        cfg.pit.heads = 2;
        cfg.pit.patch = 8;
        cfg.pit.img_h = 16;
        cfg.pit.img_w = 16;
        cfg.pit.n_points = 64;
        cfg.pit.point_patches = vec![16, 16];
        cfg.pit.pool_cells = vec![0.2];
        Model::new(cfg).unwrap()
    }

    fn test_cam() -> Camera {
        Camera::look_at([0.0, 0.9, -2.2], [0.0, 0.9, 0.0], [0.0, -1.0, 0.0], 16.0, 16, 16)
    }

    #[test]
    fn config_roundtrip_through_vec() {
        for cfg in [ModelConfig::small(), ModelConfig::medium(), ModelConfig::large()] {
            let v = cfg.to_vec();
            let back = ModelConfig::from_vec(&v).unwrap();
            assert_eq!(format!("{:?}", cfg), format!("{:?}", back));
        }
        assert!(ModelConfig::from_vec(&[2.0, 1.0]).is_err());
    }

    #[test]
    fn forward_deterministic_and_shape() {
        let model = tiny_model();
        let store = model.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let mut lv = LeafCache::new(&store);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (g, dm, toks) =
                model.forward_canonical(&mut tape, &mut lv, &[img.clone()], &mut r).unwrap();
            (g.centers.data().to_vec(), dm.data().to_vec(), toks.data().to_vec())
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a, b);
        let g = {
            let mut tape = Tape::new();
            let mut lv = LeafCache::new(&store);
            let mut r = ChaCha8Rng::seed_from_u64(5);
            model.forward_canonical(&mut tape, &mut lv, &[img.clone()], &mut r).unwrap().0
        };
        assert_eq!(g.centers.shape(), &[64, 3]);
        g.assert_invariants();
    }

    #[test]
    fn multi_frame_inputs_supported() {
        let model = tiny_model();
        let store = model.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for nf in [1usize, 4] {
            let imgs: Vec<Vec<f64>> = (0..nf)
                .map(|_| (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let mut tape = Tape::new();
            let mut lv = LeafCache::new(&store);
            let mut r = ChaCha8Rng::seed_from_u64(6);
            let (g, dm, _) = model.forward_canonical(&mut tape, &mut lv, &imgs, &mut r).unwrap();
            assert_eq!(g.len(), 64);
            assert_eq!(dm.shape(), &[1, 8]);
        }
    }

    #[test]
    fn training_loss_finite_positive_at_init() {
        let model = tiny_model();
        let store = model.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let target = TrainingTarget {
            rgb: (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
            mask: (0..16 * 16).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect(),
            camera: test_cam(),
            pose: PoseParams::identity(JOINT_COUNT),
        };
        let pyr = PerceptualPyramid::new(16, 16, 9);
        let mut tape = Tape::new();
        let mut lv = LeafCache::new(&store);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let (total, terms) = model
            .training_loss(&mut tape, &mut lv, &[img], &target, &LossWeights::default(), &pyr, &mut r)
            .unwrap();
        let t = total.data()[0];
        assert!(t.is_finite() && t > 0.0, "total {t}");
        for v in terms.values() {
            assert!(v.is_finite() && v >= 0.0);
        }
        // gradients exist for parameters on both ends of the pipeline
        let gs = tape.backward(&total);
        let grads = store.collect_grads(lv.leaves(), &gs);
        let gnorm: f64 = grads.values().flat_map(|g| g.iter().map(|v| v * v)).sum::<f64>().sqrt();
        assert!(gnorm.is_finite() && gnorm > 0.0);
    }

    #[test]
    fn checkpoint_embeds_config() {
        let model = tiny_model();
        let store = model.init_params(11);
        let dir = std::env::temp_dir().join("avatar_model_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        let meta = loaded.get("meta.config");
        let cfg = ModelConfig::from_vec(&meta.data).unwrap();
        assert_eq!(cfg.pit.n_points, 64);
        let rebuilt = Model::new(cfg).unwrap();
        assert_eq!(rebuilt.anchors.len(), model.anchors.len());
    }
}
