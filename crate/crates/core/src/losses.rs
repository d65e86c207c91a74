//! Training objective: photometric terms, an auxiliary silhouette term, and
//! geometric regularizers on the predicted splats.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::render::{render_fixed, Camera, RenderError, RHO_FIX, SIGMA_FIX};
use crate::tensor::{Tape, Tensor};

/// The six objective weights. Kept in one table so checks against the
/// documented defaults read from a single place.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub mask: f64,
    pub perceptual: f64,
    pub dis: f64,
    pub asap: f64,
    pub acap: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { rgb: 1.0, mask: 0.5, perceptual: 1.0, dis: 0.5, asap: 20.0, acap: 5.0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Render(#[from] RenderError),
}

fn l1(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let d = tape.sub(a, b);
    let d = tape.abs(&d);
    Ok(tape.mean(&d))
}

/// Mean absolute error on RGB.
pub fn l_color(tape: &mut Tape, pred: &Tensor, gt: &Tensor) -> Result<Tensor, LossError> {
    l1(tape, pred, gt)
}

/// Mean absolute error on alpha.
pub fn l_mask(tape: &mut Tape, pred: &Tensor, gt: &Tensor) -> Result<Tensor, LossError> {
    l1(tape, pred, gt)
}

/// Fixed random-filter convolution pyramid standing in for a pretrained
/// perceptual network. Weights are seeded once and never trained.
pub struct PerceptualPyramid {
    levels: Vec<Level>,
}

struct Level {
    taps: Vec<Vec<usize>>, // 9 gather index maps, each out_h*out_w long
    weight: Tensor,        // 9*c_in x c_out
    out_h: usize,
    out_w: usize,
}

impl PerceptualPyramid {
    pub fn new(width: usize, height: usize, seed: u64) -> PerceptualPyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let mut levels = Vec::new();
        let (mut w, mut h, mut c_in) = (width, height, 3usize);
        for _ in 0..3 {
            let out_w = w.div_ceil(2);
            let out_h = h.div_ceil(2);
            // 3x3 taps, stride 2, clamp-to-edge padding
            let mut taps = Vec::with_capacity(9);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let mut idx = Vec::with_capacity(out_h * out_w);
                    for oy in 0..out_h {
                        let sy = (oy as i64 * 2 + dy).clamp(0, h as i64 - 1) as usize;
                        for ox in 0..out_w {
                            let sx = (ox as i64 * 2 + dx).clamp(0, w as i64 - 1) as usize;
                            idx.push(sy * w + sx);
                        }
                    }
                    taps.push(idx);
                }
            }
            let c_out = 8;
            let fan_in = 9 * c_in;
            let std = 1.0 / (fan_in as f64).sqrt();
            let wdata: Vec<f64> =
                (0..fan_in * c_out).map(|_| std * gauss(&mut rng)).collect();
            levels.push(Level {
                taps,
                weight: Tensor::constant(wdata, vec![fan_in, c_out]),
                out_h,
                out_w,
            });
            w = out_w;
            h = out_h;
            c_in = c_out;
        }
        PerceptualPyramid { levels }
    }

    /// Feature maps at each pyramid level; input is H*W x 3 row-major RGB.
    pub fn features(&self, tape: &mut Tape, img: &Tensor) -> Vec<Tensor> {
        let mut x = img.clone();
        let mut feats = Vec::with_capacity(self.levels.len());
        for lv in &self.levels {
            let cols: Vec<Tensor> = lv.taps.iter().map(|idx| tape.gather_rows(&x, idx)).collect();
            let refs: Vec<&Tensor> = cols.iter().collect();
            let stacked = tape.concat_cols(&refs);
            let pre = tape.matmul(&stacked, &lv.weight);
            x = tape.tanh(&pre);
            debug_assert_eq!(x.rows(), lv.out_h * lv.out_w);
            feats.push(x.clone());
        }
        feats
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// L1 distance between the pyramid features of the two images, averaged over
/// levels.
pub fn l_perceptual(
    tape: &mut Tape,
    pyr: &PerceptualPyramid,
    pred: &Tensor,
    gt: &Tensor,
) -> Result<Tensor, LossError> {
    if pred.shape() != gt.shape() {
        return Err(LossError::ShapeMismatch(pred.shape().to_vec(), gt.shape().to_vec()));
    }
    let fp = pyr.features(tape, pred);
    let fg = pyr.features(tape, gt);
    let mut total = Tensor::constant(vec![0.0], vec![1]);
    for (a, b) in fp.iter().zip(&fg) {
        let t = l1(tape, a, b)?;
        total = tape.add(&total, &t);
    }
    Ok(tape.scale(&total, 1.0 / pyr.levels.len() as f64))
}

/// Silhouette distribution term: L1 between an auxiliary render with fixed
/// opacity/scale and the ground-truth mask. Gradients reach centers only.
pub fn l_dis(
    tape: &mut Tape,
    centers: &Tensor,
    rotations: &Tensor,
    cam: &Camera,
    mask_gt: &Tensor,
) -> Result<Tensor, LossError> {
    let alpha = render_fixed(tape, centers, rotations, cam, RHO_FIX, SIGMA_FIX)?;
    l1(tape, &alpha, mask_gt)
}

/// Isotropy regularizer: per-primitive variance of log scales, averaged over
/// primitives. Zero exactly for isotropic scales, invariant to global
/// rescaling.
pub fn l_asap(tape: &mut Tape, sigma: &Tensor) -> Tensor {
    let logs = tape.ln(sigma);
    let m = tape.row_mean(&logs);
    let dev = tape.sub_colvec(&logs, &m);
    let sq = tape.square(&dev);
    tape.mean(&sq)
}

/// Canonical k-nearest-neighbor index lists, brute force on anchor positions.
/// Computed once per subject; ties broken by index for determinism.
pub fn acap_neighbors(anchors: &[f64], k: usize) -> Vec<usize> {
    let n = anchors.len() / 3;
    let k = k.min(n.saturating_sub(1));
    let mut out = Vec::with_capacity(n * k);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut d = 0.0;
            for a in 0..3 {
                let e = anchors[i * 3 + a] - anchors[j * 3 + a];
                d += e * e;
            }
            dists.push((d, j));
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(dists.iter().take(k).map(|&(_, j)| j));
    }
    out
}

/// Spatial-coherence regularizer: mean over k-NN pairs of the squared
/// difference between neighboring offsets d_i = p_i - x_i. Vanishes for any
/// rigid translation of all points.
pub fn l_acap(
    tape: &mut Tape,
    positions: &Tensor,
    anchors: &Tensor,
    neighbors: &[usize],
) -> Tensor {
    let n = positions.rows();
    let k = neighbors.len() / n;
    let d = tape.sub(positions, anchors);
    let self_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let di = tape.gather_rows(&d, &self_idx);
    let dj = tape.gather_rows(&d, neighbors);
    let diff = tape.sub(&di, &dj);
    let sq = tape.square(&diff);
    let s = tape.sum(&sq);
    tape.scale(&s, 1.0 / (n * k) as f64)
}

/// One evaluated objective with per-term values kept for logging.
pub struct LossTerms {
    pub color: Tensor,
    pub mask: Tensor,
    pub perceptual: Tensor,
    pub dis: Tensor,
    pub asap: Tensor,
    pub acap: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> [f64; 6] {
        [
            self.color.data()[0],
            self.mask.data()[0],
            self.perceptual.data()[0],
            self.dis.data()[0],
            self.asap.data()[0],
            self.acap.data()[0],
        ]
    }
}

pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Tensor {
    let mut acc = tape.scale(&terms.color, w.rgb);
    for (t, lam) in [
        (&terms.mask, w.mask),
        (&terms.perceptual, w.perceptual),
        (&terms.dis, w.dis),
        (&terms.asap, w.asap),
        (&terms.acap, w.acap),
    ] {
        let s = tape.scale(t, lam);
        acc = tape.add(&acc, &s);
    }
    acc
}
