//! Point-image fusion transformer: image tokenizer, serialized patch
//! attention over point tokens, per-frame image attention, dual-stream joint
//! attention conditioned on a class token, assembled into an encoder-decoder
//! stack around grid pooling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::optim::{LeafCache, ParamStore};
use crate::serial::{
    grid_pool, grid_unpool, patch_partition, serialize, Bbox, PatternSchedule, SerialError,
    TokenGrid3D,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct PitConfig {
    pub n_layer: usize,
    pub c_point: usize,
    pub c: usize,
    pub heads: usize,
    /// image patch size
    pub patch: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub n_points: usize,
    /// point-attention patch size per pooling level (index 0 = full res)
    pub point_patches: Vec<usize>,
    /// voxel edge per encoder pooling step (meters)
    pub pool_cells: Vec<f64>,
    /// quantization bits for curve serialization
    pub curve_bits: u32,
}

impl PitConfig {
    pub fn enc_layers(&self) -> usize {
        self.n_layer / 2
    }

    pub fn dec_layers(&self) -> usize {
        self.n_layer - self.enc_layers()
    }

    pub fn tokens_per_side(&self) -> (usize, usize) {
        (self.img_h / self.patch, self.img_w / self.patch)
    }

    pub fn n_image_tokens(&self) -> usize {
        let (th, tw) = self.tokens_per_side();
        th * tw
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.n_layer % 2 != 0 || self.n_layer == 0 {
            return Err(FusionError::BadConfig("n_layer must be even and positive"));
        }
        if self.c % self.heads != 0 || self.c_point % self.heads != 0 {
            return Err(FusionError::BadConfig("widths must divide by head count"));
        }
        if self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            return Err(FusionError::BadConfig("image dims must divide by patch size"));
        }
        if self.point_patches.len() < self.enc_layers() + 1
            || self.pool_cells.len() < self.enc_layers()
        {
            return Err(FusionError::BadConfig("missing per-level patch or cell sizes"));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("bad config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Serial(#[from] SerialError),
}

/// Flattened per-frame token sequences; each frame holds its patch tokens
/// followed by one deformation token in the last slot.
pub struct ImageTokenBatch {
    /// n_frames * tokens_per_frame x C
    pub tokens: Tensor,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
}

pub(crate) fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, zero: bool) {
    let w = if zero {
        vec![0.0; fan_in * fan_out]
    } else {
        randn(rng, fan_in * fan_out, 1.0 / (fan_in as f64).sqrt())
    };
    store.insert(&format!("{name}.w"), w, vec![fan_in, fan_out]);
    store.insert(&format!("{name}.b"), vec![0.0; fan_out], vec![fan_out]);
}

fn init_ln(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(&format!("{name}.g"), vec![1.0; c], vec![c]);
    store.insert(&format!("{name}.b"), vec![0.0; c], vec![c]);
}

fn init_self_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
    init_ln(store, &format!("{prefix}ln1"), c);
    init_linear(store, rng, &format!("{prefix}attn.wq"), c, c, false);
    init_linear(store, rng, &format!("{prefix}attn.wk"), c, c, false);
    init_linear(store, rng, &format!("{prefix}attn.wv"), c, c, false);
    // zero output projection makes the block an identity map at init
    init_linear(store, rng, &format!("{prefix}attn.wo"), c, c, true);
    init_ln(store, &format!("{prefix}ln2"), c);
    init_linear(store, rng, &format!("{prefix}mlp.fc1"), c, 4 * c, false);
    init_linear(store, rng, &format!("{prefix}mlp.fc2"), 4 * c, c, true);
}

pub fn init_pit_params(store: &mut ParamStore, cfg: &PitConfig, rng: &mut ChaCha8Rng) {
    let (cp, c, p) = (cfg.c_point, cfg.c, cfg.patch);
    init_linear(store, rng, "pit.img.embed", p * p * 3, c, false);
    store.insert("pit.img.pos", randn(rng, cfg.n_image_tokens() * c, 0.02), vec![cfg.n_image_tokens(), c]);
    store.insert("pit.img.cls", randn(rng, c, 0.02), vec![1, c]);
    store.insert("pit.img.def", randn(rng, c, 0.02), vec![1, c]);
    init_linear(store, rng, "pit.point.fc1", 3, cp, false);
    init_linear(store, rng, "pit.point.fc2", cp, cp, false);
    for i in 0..cfg.n_layer {
        let b = format!("pit.blk{i}.");
        init_self_attention(store, rng, &format!("{b}pa."), cp);
        init_self_attention(store, rng, &format!("{b}ia."), c);
        init_linear(store, rng, &format!("{b}pi.proj"), cp, c, false);
        init_linear(store, rng, &format!("{b}pi.cond"), c, c, false);
        // AdaLN-zero: modulation heads start at zero so the joint block is an
        // identity map at init while its gates still receive gradient
        init_linear(store, rng, &format!("{b}pi.pmod"), c, 6 * c, true);
        init_linear(store, rng, &format!("{b}pi.imod"), c, 6 * c, true);
        for stream in ["p", "i"] {
            init_linear(store, rng, &format!("{b}pi.{stream}.wq"), c, c, false);
            init_linear(store, rng, &format!("{b}pi.{stream}.wk"), c, c, false);
            init_linear(store, rng, &format!("{b}pi.{stream}.wv"), c, c, false);
            init_linear(store, rng, &format!("{b}pi.{stream}.wo"), c, c, false);
            init_linear(store, rng, &format!("{b}pi.{stream}.fc1"), c, 4 * c, false);
            init_linear(store, rng, &format!("{b}pi.{stream}.fc2"), 4 * c, c, false);
        }
        init_linear(store, rng, &format!("{b}pi.uproj"), c, cp, false);
        // uproj bias stays useful only when learned away from zero; starting
        // at zero keeps x -> x exact at init
        store.insert(&format!("{b}pi.uproj.b"), vec![0.0; cp], vec![cp]);
    }
    for d in 0..cfg.dec_layers() {
        // skip-preserving merge: [coarse | skip] -> skip, init [0 | I]
        let mut w = vec![0.0; 2 * cp * cp];
        for j in 0..cp {
            w[(cp + j) * cp + j] = 1.0;
        }
        store.insert(&format!("pit.unpool{d}.w"), w, vec![2 * cp, cp]);
        store.insert(&format!("pit.unpool{d}.b"), vec![0.0; cp], vec![cp]);
    }
}

fn linear(tape: &mut Tape, lv: &mut LeafCache, x: &Tensor, name: &str) -> Tensor {
    let w = lv.get(tape, &format!("{name}.w"));
    let b = lv.get(tape, &format!("{name}.b"));
    let y = tape.matmul(x, &w);
    tape.add_bias(&y, &b)
}

fn layernorm_named(tape: &mut Tape, lv: &mut LeafCache, x: &Tensor, name: &str) -> Tensor {
    let g = lv.get(tape, &format!("{name}.g"));
    let b = lv.get(tape, &format!("{name}.b"));
    tape.layernorm(x, &g, &b, 1e-6)
}

/// Plain layernorm without learned affine, used under AdaLN modulation.
fn layernorm_plain(tape: &mut Tape, x: &Tensor) -> Tensor {
    let c = x.cols();
    let g = Tensor::constant(vec![1.0; c], vec![c]);
    let b = Tensor::constant(vec![0.0; c], vec![c]);
    tape.layernorm(x, &g, &b, 1e-6)
}

/// Multi-head attention core on pre-normalized inputs. `mask` marks key slots
/// that may be attended to.
fn multihead_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&[bool]>,
) -> Tensor {
    let c = q.cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        outs.push(tape.attention(&qh, &kh, &vh, mask, scale));
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    tape.concat_cols(&refs)
}

fn self_attention_block(
    tape: &mut Tape,
    lv: &mut LeafCache,
    x: &Tensor,
    prefix: &str,
    heads: usize,
    mask: Option<&[bool]>,
) -> Tensor {
    let xn = layernorm_named(tape, lv, x, &format!("{prefix}ln1"));
    let q = linear(tape, lv, &xn, &format!("{prefix}attn.wq"));
    let k = linear(tape, lv, &xn, &format!("{prefix}attn.wk"));
    let v = linear(tape, lv, &xn, &format!("{prefix}attn.wv"));
    let a = multihead_attention(tape, &q, &k, &v, heads, mask);
    let a = linear(tape, lv, &a, &format!("{prefix}attn.wo"));
    let x = tape.add(x, &a);
    let xn = layernorm_named(tape, lv, &x, &format!("{prefix}ln2"));
    let h = linear(tape, lv, &xn, &format!("{prefix}mlp.fc1"));
    let h = tape.gelu(&h);
    let h = linear(tape, lv, &h, &format!("{prefix}mlp.fc2"));
    tape.add(&x, &h)
}

/// Per-patch linear embedding + learned positional table, one deformation
/// token appended per frame. The class token is the learned token plus the
/// mean patch embedding of frame 0.
pub fn tokenize_images(
    tape: &mut Tape,
    lv: &mut LeafCache,
    cfg: &PitConfig,
    images: &[Vec<f64>], // each img_h*img_w*3 row-major rgb
) -> Result<(ImageTokenBatch, Tensor), FusionError> {
    cfg.validate()?;
    let p = cfg.patch;
    let (th, tw) = cfg.tokens_per_side();
    let n_i = th * tw;
    let mut frames = Vec::with_capacity(images.len());
    let mut cls = lv.get(tape, "pit.img.cls");
    let pos = lv.get(tape, "pit.img.pos");
    let def = lv.get(tape, "pit.img.def");
    for (f, img) in images.iter().enumerate() {
        assert_eq!(img.len(), cfg.img_h * cfg.img_w * 3, "frame {f} size");
        let mut patches = Vec::with_capacity(n_i * p * p * 3);
        for ty in 0..th {
            for tx in 0..tw {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = (ty * p + dy) * cfg.img_w + tx * p + dx;
                        patches.extend_from_slice(&img[pix * 3..pix * 3 + 3]);
                    }
                }
            }
        }
        let pm = Tensor::constant(patches, vec![n_i, p * p * 3]);
        let emb = linear(tape, lv, &pm, "pit.img.embed");
        let toks = tape.add(&emb, &pos);
        if f == 0 {
            let ones = Tensor::constant(vec![1.0 / n_i as f64; n_i], vec![n_i, 1]);
            let mean0 = tape.matmul_tn(&ones, &toks);
            cls = tape.add(&cls, &mean0);
        }
        frames.push(tape.concat_rows(&[&toks, &def]));
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    let tokens = tape.concat_rows(&refs);
    Ok((
        ImageTokenBatch { tokens, n_frames: images.len(), tokens_per_frame: n_i + 1 },
        cls,
    ))
}

/// Two-layer MLP lifting anchor positions to point tokens.
pub fn point_tokenize(
    tape: &mut Tape,
    lv: &mut LeafCache,
    positions: &[[f64; 3]],
) -> TokenGrid3D {
    let n = positions.len();
    let flat: Vec<f64> = positions.iter().flat_map(|p| p.to_vec()).collect();
    let x = Tensor::constant(flat, vec![n, 3]);
    let h = linear(tape, lv, &x, "pit.point.fc1");
    let h = tape.gelu(&h);
    let features = linear(tape, lv, &h, "pit.point.fc2");
    TokenGrid3D {
        positions: positions.to_vec(),
        features,
        order: (0..n).collect(),
        level: 0,
        lineage: Vec::new(),
    }
}

/// Serialized patch attention: re-order points along the scheduled curve, run
/// masked self-attention + MLP inside each patch, scatter back to canonical
/// order.
pub fn point_attention_block(
    tape: &mut Tape,
    lv: &mut LeafCache,
    cfg: &PitConfig,
    grid: &TokenGrid3D,
    prefix: &str,
    pattern: crate::serial::CurvePattern,
    patch_size: usize,
) -> TokenGrid3D {
    let n = grid.len();
    let bbox = Bbox::of_points(&grid.positions);
    let order = serialize(&grid.positions, &bbox, pattern, cfg.curve_bits);
    let patches = patch_partition(&order, patch_size);
    let mut parts = Vec::with_capacity(patches.len());
    for patch in &patches {
        let xs = tape.gather_rows(&grid.features, &patch.indices);
        let mask: Vec<bool> = (0..patch.indices.len()).map(|j| j < patch.n_real).collect();
        let m = if patch.n_real == patch.indices.len() { None } else { Some(&mask[..]) };
        let ys = self_attention_block(tape, lv, &xs, prefix, cfg.heads, m);
        parts.push(tape.narrow_rows(&ys, 0, patch.n_real));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let serialized = tape.concat_rows(&refs);
    let mut inv = vec![0usize; n];
    for (slot, &i) in order.iter().enumerate() {
        inv[i] = slot;
    }
    let features = tape.gather_rows(&serialized, &inv);
    TokenGrid3D {
        positions: grid.positions.clone(),
        features,
        order,
        level: grid.level,
        lineage: grid.lineage.clone(),
    }
}

/// Per-frame self-attention; frames never mix.
pub fn image_attention(
    tape: &mut Tape,
    lv: &mut LeafCache,
    cfg: &PitConfig,
    batch: &ImageTokenBatch,
    prefix: &str,
) -> ImageTokenBatch {
    let tpf = batch.tokens_per_frame;
    let mut frames = Vec::with_capacity(batch.n_frames);
    for f in 0..batch.n_frames {
        let xs = tape.narrow_rows(&batch.tokens, f * tpf, tpf);
        frames.push(self_attention_block(tape, lv, &xs, prefix, cfg.heads, None));
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    ImageTokenBatch {
        tokens: tape.concat_rows(&refs),
        n_frames: batch.n_frames,
        tokens_per_frame: tpf,
    }
}

struct Modulation {
    scale1: Tensor,
    shift1: Tensor,
    gate1: Tensor,
    scale2: Tensor,
    shift2: Tensor,
    gate2: Tensor,
}

fn modulation(tape: &mut Tape, lv: &mut LeafCache, cond: &Tensor, name: &str, c: usize) -> Modulation {
    let m = linear(tape, lv, cond, name); // 1 x 6C
    let part = |tape: &mut Tape, k: usize| tape.slice_cols(&m, k * c, c);
    let raw_scale1 = part(tape, 0);
    let shift1 = part(tape, 1);
    let gate1 = part(tape, 2);
    let raw_scale2 = part(tape, 3);
    let shift2 = part(tape, 4);
    let gate2 = part(tape, 5);
    Modulation {
        scale1: tape.add_scalar(&raw_scale1, 1.0),
        shift1,
        gate1,
        scale2: tape.add_scalar(&raw_scale2, 1.0),
        shift2,
        gate2,
    }
}

fn modulate(tape: &mut Tape, x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let n = layernorm_plain(tape, x);
    let s = tape.mul_bias(&n, scale);
    tape.add_bias(&s, shift)
}

/// Dual-stream joint attention over the concatenated point and image token
/// sequences, each stream AdaLN-modulated from the class token. Identity on
/// both streams at init because the modulation heads start at zero.
pub fn point_image_attention(
    tape: &mut Tape,
    lv: &mut LeafCache,
    cfg: &PitConfig,
    grid: &TokenGrid3D,
    batch: &ImageTokenBatch,
    cls: &Tensor,
    prefix: &str,
) -> (TokenGrid3D, ImageTokenBatch) {
    let c = cfg.c;
    let np = grid.len();
    let ni = batch.tokens.rows();
    let h0 = linear(tape, lv, &grid.features, &format!("{prefix}proj"));
    let cond = linear(tape, lv, cls, &format!("{prefix}cond"));
    let cond = tape.gelu(&cond);
    let pm = modulation(tape, lv, &cond, &format!("{prefix}pmod"), c);
    let im = modulation(tape, lv, &cond, &format!("{prefix}imod"), c);

    // joint attention
    let hp = modulate(tape, &h0, &pm.scale1, &pm.shift1);
    let hi = modulate(tape, &batch.tokens, &im.scale1, &im.shift1);
    let qp = linear(tape, lv, &hp, &format!("{prefix}p.wq"));
    let kp = linear(tape, lv, &hp, &format!("{prefix}p.wk"));
    let vp = linear(tape, lv, &hp, &format!("{prefix}p.wv"));
    let qi = linear(tape, lv, &hi, &format!("{prefix}i.wq"));
    let ki = linear(tape, lv, &hi, &format!("{prefix}i.wk"));
    let vi = linear(tape, lv, &hi, &format!("{prefix}i.wv"));
    let q = tape.concat_rows(&[&qp, &qi]);
    let k = tape.concat_rows(&[&kp, &ki]);
    let v = tape.concat_rows(&[&vp, &vi]);
    let joint = multihead_attention(tape, &q, &k, &v, cfg.heads, None);
    let ap = tape.narrow_rows(&joint, 0, np);
    let ai = tape.narrow_rows(&joint, np, ni);
    let ap = linear(tape, lv, &ap, &format!("{prefix}p.wo"));
    let ai = linear(tape, lv, &ai, &format!("{prefix}i.wo"));
    let ap = tape.mul_bias(&ap, &pm.gate1);
    let ai = tape.mul_bias(&ai, &im.gate1);
    let h1p = tape.add(&h0, &ap);
    let h1i = tape.add(&batch.tokens, &ai);

    // per-stream MLP
    let stream_mlp = |tape: &mut Tape, lv: &mut LeafCache, x: &Tensor, m: &Modulation, s: &str| {
        let xn = modulate(tape, x, &m.scale2, &m.shift2);
        let h = linear(tape, lv, &xn, &format!("{prefix}{s}.fc1"));
        let h = tape.gelu(&h);
        let h = linear(tape, lv, &h, &format!("{prefix}{s}.fc2"));
        let h = tape.mul_bias(&h, &m.gate2);
        tape.add(x, &h)
    };
    let h2p = stream_mlp(tape, lv, &h1p, &pm, "p");
    let h2i = stream_mlp(tape, lv, &h1i, &im, "i");

    // point stream folds back through the width-changing projection as a
    // residual on the original features
    let dh = tape.sub(&h2p, &h0);
    let up = linear(tape, lv, &dh, &format!("{prefix}uproj"));
    let features = tape.add(&grid.features, &up);
    (
        TokenGrid3D {
            positions: grid.positions.clone(),
            features,
            order: grid.order.clone(),
            level: grid.level,
            lineage: grid.lineage.clone(),
        },
        ImageTokenBatch { tokens: h2i, n_frames: batch.n_frames, tokens_per_frame: batch.tokens_per_frame },
    )
}

/// One fusion block: point patch attention, per-frame image attention, then
/// joint attention.
#[allow(clippy::too_many_arguments)]
pub fn pit_block(
    tape: &mut Tape,
    lv: &mut LeafCache,
    cfg: &PitConfig,
    grid: &TokenGrid3D,
    batch: &ImageTokenBatch,
    cls: &Tensor,
    block_index: usize,
    pattern: crate::serial::CurvePattern,
    patch_size: usize,
) -> (TokenGrid3D, ImageTokenBatch) {
    let b = format!("pit.blk{block_index}.");
    let grid = point_attention_block(tape, lv, cfg, grid, &format!("{b}pa."), pattern, patch_size);
    let batch = image_attention(tape, lv, cfg, batch, &format!("{b}ia."));
    point_image_attention(tape, lv, cfg, &grid, &batch, cls, &format!("{b}pi."))
}

/// Encoder blocks with pooling, then mirrored decoder blocks with
/// skip-connected unpooling. Returns the full-resolution point grid and the
/// per-frame fused deformation tokens (n_frames x C).
pub fn encoder_decoder_forward(
    tape: &mut Tape,
    lv: &mut LeafCache,
    cfg: &PitConfig,
    grid0: TokenGrid3D,
    batch0: ImageTokenBatch,
    cls: &Tensor,
    rng: &mut impl Rng,
) -> Result<(TokenGrid3D, Tensor, ImageTokenBatch), FusionError> {
    cfg.validate()?;
    let schedule = PatternSchedule::draw(rng);
    let e = cfg.enc_layers();
    let mut grid = grid0;
    let mut batch = batch0;
    let mut skips: Vec<TokenGrid3D> = Vec::with_capacity(e);
    for i in 0..e {
        let (g, b) = pit_block(
            tape,
            lv,
            cfg,
            &grid,
            &batch,
            cls,
            i,
            schedule.pattern(i),
            cfg.point_patches[i],
        );
        batch = b;
        grid = grid_pool(tape, &g, cfg.pool_cells[i]);
        skips.push(g);
    }
    for d in 0..cfg.dec_layers() {
        let skip = skips.pop().expect("skip per decoder block");
        let level = skips.len();
        let mw = lv.get(tape, &format!("pit.unpool{d}.w"));
        let mb = lv.get(tape, &format!("pit.unpool{d}.b"));
        let up = grid_unpool(tape, &grid, &skip, &mw, &mb)?;
        let i = e + d;
        let (g, b) = pit_block(
            tape,
            lv,
            cfg,
            &up,
            &batch,
            cls,
            i,
            schedule.pattern(i),
            cfg.point_patches[level],
        );
        grid = g;
        batch = b;
    }
    let tpf = batch.tokens_per_frame;
    let def_slots: Vec<usize> = (0..batch.n_frames).map(|f| f * tpf + tpf - 1).collect();
    let def = tape.gather_rows(&batch.tokens, &def_slots);
    Ok((grid, def, batch))
}
