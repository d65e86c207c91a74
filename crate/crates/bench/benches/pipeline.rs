//! Benchmarks for the pipeline hot paths: curve encoding, patched point
//! attention, and the differentiable rasterizer.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avatar_core::fusion::{init_pit_params, point_attention_block, point_tokenize, PitConfig};
use avatar_core::optim::{LeafCache, ParamStore};
use avatar_core::render::{rasterize, Camera};
use avatar_core::serial::{hilbert_encode, morton_encode, CurvePattern};
use avatar_core::tensor::Tape;

fn bench_curves(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cells: Vec<[u32; 3]> = (0..4096)
        .map(|_| [rng.gen_range(0..1024), rng.gen_range(0..1024), rng.gen_range(0..1024)])
        .collect();
    c.bench_function("morton_encode_4096_b10", |b| {
        b.iter(|| {
            cells
                .iter()
                .map(|&[x, y, z]| morton_encode(x, y, z, 10))
                .fold(0u64, u64::wrapping_add)
        })
    });
    c.bench_function("hilbert_encode_4096_b10", |b| {
        b.iter(|| {
            cells
                .iter()
                .map(|&[x, y, z]| hilbert_encode(x, y, z, 10))
                .fold(0u64, u64::wrapping_add)
        })
    });
}

fn bench_point_attention(c: &mut Criterion) {
    let cfg = PitConfig {
        n_layer: 2,
        c_point: 32,
        c: 64,
        heads: 4,
        patch: 8,
        img_h: 64,
        img_w: 64,
        n_points: 2048,
        point_patches: vec![128],
        pool_cells: vec![],
        curve_bits: 10,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    init_pit_params(&mut store, &cfg, &mut rng);
    let positions: Vec<[f64; 3]> = (0..cfg.n_points)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    c.bench_function("point_attention_2048_patch128", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut lv = LeafCache::new(&store);
            let grid = point_tokenize(&mut tape, &mut lv, &positions);
            point_attention_block(
                &mut tape,
                &mut lv,
                &cfg,
                &grid,
                "pit.blk0.pa.",
                CurvePattern::Hilbert,
                128,
            )
        })
    });
}

fn bench_rasterize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2048;
    let centers: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let rots: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scales: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.005..0.02)).collect();
    let opac: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..0.9)).collect();
    let cols: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], 48.0, 64, 64);
    c.bench_function("rasterize_2048_64x64_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let c_t = tape.leaf(centers.clone(), vec![n, 3]);
            let r_t = tape.leaf(rots.clone(), vec![n, 4]);
            let s_t = tape.leaf(scales.clone(), vec![n, 3]);
            let o_t = tape.leaf(opac.clone(), vec![n, 1]);
            let f_t = tape.leaf(cols.clone(), vec![n, 3]);
            let out =
                rasterize(&mut tape, &c_t, &r_t, &s_t, &o_t, &f_t, &cam, [1.0, 1.0, 1.0]).unwrap();
            let sq = tape.square(&out.image);
            let loss = tape.sum(&sq);
            tape.backward(&loss)
        })
    });
}

criterion_group!(benches, bench_curves, bench_point_attention, bench_rasterize);
criterion_main!(benches);
