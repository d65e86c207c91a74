//! Space-filling-curve serialization, patch grouping, and grid pooling with
//! skip lineage for the hierarchical point-token path.

use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CurvePattern {
    ZOrder,
    Hilbert,
    TransZOrder,
    TransHilbert,
}

pub const ALL_PATTERNS: [CurvePattern; 4] = [
    CurvePattern::ZOrder,
    CurvePattern::Hilbert,
    CurvePattern::TransZOrder,
    CurvePattern::TransHilbert,
];

/// Axis-aligned bounding box used for quantization.
#[derive(Clone, Copy, Debug)]
pub struct Bbox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bbox {
    pub fn of_points(points: &[[f64; 3]]) -> Bbox {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Bbox { min, max }
    }

    pub fn inflate(mut self, by: f64) -> Bbox {
        for a in 0..3 {
            self.min[a] -= by;
            self.max[a] += by;
        }
        self
    }
}

/// Uniform quantization of a point into [0, 2^b)³, clamped at the edges.
pub fn quantize(p: [f64; 3], bbox: &Bbox, b: u32) -> [u32; 3] {
    let cells = (1u64 << b) as f64;
    let mut q = [0u32; 3];
    for a in 0..3 {
        let ext = bbox.max[a] - bbox.min[a];
        assert!(ext > 0.0, "degenerate bbox on axis {a}");
        let t = (p[a] - bbox.min[a]) / ext;
        q[a] = ((t * cells) as i64).clamp(0, (1i64 << b) - 1) as u32;
    }
    q
}

/// Morton / Z-order: bit interleave with x in bit 0, y in bit 1, z in bit 2.
pub fn morton_encode(x: u32, y: u32, z: u32, b: u32) -> u64 {
    debug_assert!(x < (1 << b) && y < (1 << b) && z < (1 << b));
    let mut code = 0u64;
    for i in 0..b {
        code |= (((x >> i) & 1) as u64) << (3 * i);
        code |= (((y >> i) & 1) as u64) << (3 * i + 1);
        code |= (((z >> i) & 1) as u64) << (3 * i + 2);
    }
    code
}

pub fn morton_decode(code: u64, b: u32) -> [u32; 3] {
    let mut p = [0u32; 3];
    for i in 0..b {
        p[0] |= (((code >> (3 * i)) & 1) as u32) << i;
        p[1] |= (((code >> (3 * i + 1)) & 1) as u32) << i;
        p[2] |= (((code >> (3 * i + 2)) & 1) as u32) << i;
    }
    p
}

/// 3D Hilbert index via Skilling's transform between Hilbert transpose form
/// and ordinary coordinates.
pub fn hilbert_encode(x: u32, y: u32, z: u32, b: u32) -> u64 {
    debug_assert!(x < (1 << b) && y < (1 << b) && z < (1 << b));
    let mut xs = [x, y, z];
    // axes -> transpose
    let m = 1u32 << (b - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if xs[i] & q != 0 {
                xs[0] ^= p; // invert
            } else {
                let t = (xs[0] ^ xs[i]) & p;
                xs[0] ^= t;
                xs[i] ^= t;
            }
        }
        q >>= 1;
    }
    // Gray encode
    for i in 1..3 {
        xs[i] ^= xs[i - 1];
    }
    let mut t = 0u32;
    q = m;
    while q > 1 {
        if xs[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in xs.iter_mut() {
        *v ^= t;
    }
    // interleave transpose bits: bit i of axis a goes to position 3i+(2-a)
    let mut code = 0u64;
    for i in 0..b as u64 {
        for (a, &v) in xs.iter().enumerate() {
            code |= (((v >> i) & 1) as u64) << (3 * i + (2 - a as u64));
        }
    }
    code
}

pub fn hilbert_decode(code: u64, b: u32) -> [u32; 3] {
    let mut xs = [0u32; 3];
    for i in 0..b as u64 {
        for a in 0..3u64 {
            xs[a as usize] |= (((code >> (3 * i + (2 - a))) & 1) as u32) << i;
        }
    }
    // transpose -> axes (inverse of Skilling forward)
    let n = 1u32 << b;
    let mut t = xs[2] >> 1;
    for i in (1..3).rev() {
        xs[i] ^= xs[i - 1];
    }
    xs[0] ^= t;
    let mut q = 2u32;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if xs[i] & q != 0 {
                xs[0] ^= p;
            } else {
                t = (xs[0] ^ xs[i]) & p;
                xs[0] ^= t;
                xs[i] ^= t;
            }
        }
        q <<= 1;
    }
    xs
}

/// Curve code for one point under a pattern. "Trans" variants cycle the axes
/// (x,y,z) -> (y,z,x) before encoding.
pub fn curve_code(q: [u32; 3], pattern: CurvePattern, b: u32) -> u64 {
    match pattern {
        CurvePattern::ZOrder => morton_encode(q[0], q[1], q[2], b),
        CurvePattern::Hilbert => hilbert_encode(q[0], q[1], q[2], b),
        CurvePattern::TransZOrder => morton_encode(q[1], q[2], q[0], b),
        CurvePattern::TransHilbert => hilbert_encode(q[1], q[2], q[0], b),
    }
}

/// Stable sort of point indices by curve code (ties keep original order).
pub fn serialize(points: &[[f64; 3]], bbox: &Bbox, pattern: CurvePattern, b: u32) -> Vec<usize> {
    assert!(!points.is_empty());
    let mut keyed: Vec<(u64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (curve_code(quantize(*p, bbox, b), pattern, b), i))
        .collect();
    keyed.sort_by_key(|&(code, i)| (code, i));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Random permutation of the four patterns, drawn once per forward pass;
/// block i uses entry i mod 4.
#[derive(Clone, Copy, Debug)]
pub struct PatternSchedule {
    perm: [CurvePattern; 4],
}

impl PatternSchedule {
    pub fn draw(rng: &mut impl Rng) -> PatternSchedule {
        let mut perm = ALL_PATTERNS;
        perm.shuffle(rng);
        PatternSchedule { perm }
    }

    pub fn fixed(perm: [CurvePattern; 4]) -> PatternSchedule {
        PatternSchedule { perm }
    }

    pub fn pattern(&self, block_index: usize) -> CurvePattern {
        self.perm[block_index % 4]
    }
}

/// One attention patch: slot -> point index, with `n_real` leading real
/// entries; the rest are cyclic pad duplicates masked out of attention.
#[derive(Clone, Debug)]
pub struct Patch {
    pub indices: Vec<usize>,
    pub n_real: usize,
}

/// Split a serialized order into consecutive patches of `patch_size`. A final
/// short patch is padded by cyclic repetition of its own entries.
pub fn patch_partition(order: &[usize], patch_size: usize) -> Vec<Patch> {
    assert!(patch_size >= 1);
    let n = order.len();
    let mut patches = Vec::new();
    let mut start = 0;
    while start < n {
        let n_real = patch_size.min(n - start);
        let mut indices: Vec<usize> = order[start..start + n_real].to_vec();
        for k in n_real..patch_size {
            indices.push(order[start + (k % n_real)]);
        }
        patches.push(Patch { indices, n_real });
        start += n_real;
    }
    patches
}

/// Ordered geometric tokens with positions and pooling lineage.
pub struct TokenGrid3D {
    pub positions: Vec<[f64; 3]>,
    pub features: Tensor, // N x C_point
    pub order: Vec<usize>,
    pub level: usize,
    /// coarse index -> fine indices of the level this grid was pooled from
    pub lineage: Vec<Vec<usize>>,
}

impl TokenGrid3D {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Bucket points by voxel of `cell_size`. Returns (buckets, pooled positions);
/// bucket order follows the first-seen voxel keyed deterministically.
pub fn voxel_buckets(points: &[[f64; 3]], cell_size: f64) -> (Vec<Vec<usize>>, Vec<[f64; 3]>) {
    assert!(cell_size > 0.0);
    let mut map: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p[0] / cell_size).floor() as i64,
            (p[1] / cell_size).floor() as i64,
            (p[2] / cell_size).floor() as i64,
        );
        map.entry(key).or_default().push(i);
    }
    let buckets: Vec<Vec<usize>> = map.into_values().collect();
    let centers = buckets
        .iter()
        .map(|b| {
            let mut c = [0.0; 3];
            for &i in b {
                for a in 0..3 {
                    c[a] += points[i][a];
                }
            }
            for v in c.iter_mut() {
                *v /= b.len() as f64;
            }
            c
        })
        .collect();
    (buckets, centers)
}

/// Voxel downsampling: pooled feature = per-channel max over the bucket
/// (gradient routes to the argmax), pooled position = bucket mean.
pub fn grid_pool(tape: &mut Tape, grid: &TokenGrid3D, cell_size: f64) -> TokenGrid3D {
    let (buckets, centers) = voxel_buckets(&grid.positions, cell_size);
    let features = tape.pool_rows_max(&grid.features, &buckets);
    let order = (0..buckets.len()).collect();
    TokenGrid3D {
        positions: centers,
        features,
        order,
        level: grid.level + 1,
        lineage: buckets,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SerialError {
    #[error("lineage mismatch: coarse lineage covers {covered} fine tokens, skip has {fine}")]
    LineageMismatch { covered: usize, fine: usize },
}

/// Skip-connected upsampling: each fine token gets its coarse parent feature
/// concatenated with its own skip feature, then a learned linear merge back
/// to the skip width.
pub fn grid_unpool(
    tape: &mut Tape,
    coarse: &TokenGrid3D,
    skip: &TokenGrid3D,
    merge_w: &Tensor, // (C_coarse + C_skip) x C_skip
    merge_b: &Tensor,
) -> Result<TokenGrid3D, SerialError> {
    let fine_n = skip.len();
    let covered: usize = coarse.lineage.iter().map(|v| v.len()).sum();
    if covered != fine_n {
        return Err(SerialError::LineageMismatch { covered, fine: fine_n });
    }
    // parent index for each fine token
    let mut parent = vec![usize::MAX; fine_n];
    for (k, bucket) in coarse.lineage.iter().enumerate() {
        for &i in bucket {
            if i >= fine_n || parent[i] != usize::MAX {
                return Err(SerialError::LineageMismatch { covered, fine: fine_n });
            }
            parent[i] = k;
        }
    }
    let parents = tape.gather_rows(&coarse.features, &parent);
    let cat = tape.concat_cols(&[&parents, &skip.features]);
    let merged = tape.matmul(&cat, merge_w);
    let features = tape.add_bias(&merged, merge_b);
    Ok(TokenGrid3D {
        positions: skip.positions.clone(),
        features,
        order: skip.order.clone(),
        level: skip.level,
        lineage: skip.lineage.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_corners_and_midpoint() {
        let bbox = Bbox { min: [0.0; 3], max: [1.0; 3] };
        assert_eq!(quantize([0.0; 3], &bbox, 4), [0; 3]);
        assert_eq!(quantize([1.0; 3], &bbox, 4), [15; 3]);
        assert_eq!(quantize([0.5; 3], &bbox, 4), [8; 3]);
    }

    #[test]
    fn morton_basis() {
        assert_eq!(morton_encode(0, 0, 0, 4), 0);
        assert_eq!(morton_encode(1, 0, 0, 4), 1);
        assert_eq!(morton_encode(0, 1, 0, 4), 2);
        assert_eq!(morton_encode(0, 0, 1, 4), 4);
    }

    #[test]
    fn morton_roundtrip_exhaustive_b4() {
        for code in 0..(1u64 << 12) {
            let p = morton_decode(code, 4);
            assert_eq!(morton_encode(p[0], p[1], p[2], 4), code);
        }
    }

    #[test]
    fn hilbert_origin_is_zero() {
        assert_eq!(hilbert_encode(0, 0, 0, 4), 0);
    }

    #[test]
    fn hilbert_roundtrip_exhaustive() {
        for b in [2u32, 3, 4] {
            for code in 0..(1u64 << (3 * b)) {
                let p = hilbert_decode(code, b);
                assert_eq!(hilbert_encode(p[0], p[1], p[2], b), code, "b={b} code={code}");
            }
        }
    }

    #[test]
    fn hilbert_adjacency_exhaustive_b4() {
        let mut prev = hilbert_decode(0, 4);
        for code in 1..(1u64 << 12) {
            let cur = hilbert_decode(code, 4);
            let dist: u32 = (0..3).map(|a| prev[a].abs_diff(cur[a])).sum();
            assert_eq!(dist, 1, "codes {} and {} not adjacent", code - 1, code);
            prev = cur;
        }
    }

    #[test]
    fn serialize_single_and_origin_first() {
        let bbox = Bbox { min: [0.0; 3], max: [1.0; 3] };
        assert_eq!(serialize(&[[0.3, 0.4, 0.5]], &bbox, CurvePattern::ZOrder, 4), vec![0]);
        let pts = [[0.9, 0.9, 0.9], [0.01, 0.01, 0.01]];
        let order = serialize(&pts, &bbox, CurvePattern::ZOrder, 4);
        assert_eq!(order[0], 1);
    }

    #[test]
    fn trans_zorder_is_zorder_of_rotated_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> =
            (0..200).map(|_| [rng.gen::<f64>(), rng.gen(), rng.gen()]).collect();
        let bbox = Bbox { min: [0.0; 3], max: [1.0; 3] };
        let a = serialize(&pts, &bbox, CurvePattern::TransZOrder, 6);
        let rotated: Vec<[f64; 3]> = pts.iter().map(|p| [p[1], p[2], p[0]]).collect();
        let bb = Bbox { min: [0.0; 3], max: [1.0; 3] };
        let b = serialize(&rotated, &bb, CurvePattern::ZOrder, 6);
        assert_eq!(a, b);
    }

    #[test]
    fn pattern_schedule_reproducible_and_covering() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let s1 = PatternSchedule::draw(&mut r1);
        let s2 = PatternSchedule::draw(&mut r2);
        for i in 0..8 {
            assert_eq!(s1.pattern(i), s2.pattern(i));
        }
        let mut seen: Vec<CurvePattern> = (0..4).map(|i| s1.pattern(i)).collect();
        seen.sort_by_key(|p| ALL_PATTERNS.iter().position(|q| q == p).unwrap());
        assert_eq!(seen.len(), 4);
        for p in ALL_PATTERNS {
            assert!(seen.contains(&p));
        }
    }

    #[test]
    fn pattern_schedule_first_pattern_frequency() {
        // each pattern first ~250/1000 times, binomial 3 sigma ~ 41
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let s = PatternSchedule::draw(&mut rng);
            let idx = ALL_PATTERNS.iter().position(|&p| p == s.pattern(0)).unwrap();
            counts[idx] += 1;
        }
        for c in counts {
            assert!((c as f64 - 250.0).abs() < 3.0 * (1000.0f64 * 0.25 * 0.75).sqrt(), "{counts:?}");
        }
    }

    #[test]
    fn patch_partition_cases() {
        let order: Vec<usize> = (0..8).collect();
        let p = patch_partition(&order, 4);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].indices, vec![0, 1, 2, 3]);
        assert_eq!(p[1].indices, vec![4, 5, 6, 7]);

        let order: Vec<usize> = (0..5).collect();
        let p = patch_partition(&order, 4);
        assert_eq!(p[1].n_real, 1);
        assert_eq!(p[1].indices, vec![4, 4, 4, 4]);

        let p = patch_partition(&order, 16);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].n_real, 5);
    }

    fn toy_grid(tape: &mut Tape, pts: Vec<[f64; 3]>, c: usize, seed: u64) -> TokenGrid3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = pts.len();
        let feats: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = tape.leaf(feats, vec![n, c]);
        TokenGrid3D { positions: pts, features, order: (0..n).collect(), level: 0, lineage: vec![] }
    }

    #[test]
    fn grid_pool_one_voxel_and_singletons() {
        let mut tape = Tape::new();
        let g = toy_grid(&mut tape, vec![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], 3, 1);
        let pooled = grid_pool(&mut tape, &g, 10.0);
        assert_eq!(pooled.len(), 1);

        let mut tape = Tape::new();
        let g = toy_grid(&mut tape, vec![[0.1, 0.1, 0.1], [5.0, 5.0, 5.0]], 3, 1);
        let f0 = g.features.data().to_vec();
        let pooled = grid_pool(&mut tape, &g, 1.0);
        assert_eq!(pooled.len(), 2);
        let mut got = pooled.features.data().to_vec();
        let mut want = f0;
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
    }

    #[test]
    fn grid_pool_matches_hash_oracle() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..1000)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let cell = 0.23;
            let (buckets, _) = voxel_buckets(&pts, cell);
            // brute-force oracle with a plain hash map
            let mut oracle: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
                std::collections::HashMap::new();
            for (i, p) in pts.iter().enumerate() {
                let k = (
                    (p[0] / cell).floor() as i64,
                    (p[1] / cell).floor() as i64,
                    (p[2] / cell).floor() as i64,
                );
                oracle.entry(k).or_default().push(i);
            }
            let mut got: Vec<Vec<usize>> = buckets;
            let mut want: Vec<Vec<usize>> = oracle.into_values().collect();
            got.sort();
            want.sort();
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn grid_pool_permutation_invariant_as_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let c = 4;
        let feats: Vec<f64> = (0..200 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |pts: &[[f64; 3]], feats: &[f64]| -> Vec<(Vec<i64>, Vec<f64>)> {
            let mut tape = Tape::new();
            let features = tape.leaf(feats.to_vec(), vec![pts.len(), c]);
            let g = TokenGrid3D {
                positions: pts.to_vec(),
                features,
                order: (0..pts.len()).collect(),
                level: 0,
                lineage: vec![],
            };
            let pooled = grid_pool(&mut tape, &g, 0.31);
            let mut out: Vec<(Vec<i64>, Vec<f64>)> = (0..pooled.len())
                .map(|k| {
                    let key: Vec<i64> =
                        pooled.positions[k].iter().map(|v| (v * 1e12).round() as i64).collect();
                    (key, pooled.features.data()[k * c..(k + 1) * c].to_vec())
                })
                .collect();
            out.sort_by(|a, b| a.0.cmp(&b.0));
            out
        };

        let base = run(&pts, &feats);
        let mut perm: Vec<usize> = (0..200).collect();
        perm.shuffle(&mut rng);
        let pts2: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let feats2: Vec<f64> = perm
            .iter()
            .flat_map(|&i| feats[i * c..(i + 1) * c].to_vec())
            .collect();
        let permuted = run(&pts2, &feats2);
        assert_eq!(base.len(), permuted.len());
        for (a, b) in base.iter().zip(&permuted) {
            assert_eq!(a.0, b.0);
            for (x, y) in a.1.iter().zip(&b.1) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unpool_restores_singleton_parent_identity_and_count() {
        let mut tape = Tape::new();
        let pts = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0]];
        let g = toy_grid(&mut tape, pts, 2, 3);
        let fine_len = g.len();
        let pooled = grid_pool(&mut tape, &g, 1.0);
        assert_eq!(pooled.len(), 3);
        // merge = [I_coarse | 0_skip] exposes the parent feature
        let c = 2;
        let mut w = vec![0.0; (c + c) * c];
        for j in 0..c {
            w[j * c + j] = 1.0;
        }
        let merge_w = Tensor::constant(w, vec![2 * c, c]);
        let merge_b = Tensor::constant(vec![0.0; c], vec![c]);
        let fine = grid_unpool(&mut tape, &pooled, &g, &merge_w, &merge_b).unwrap();
        assert_eq!(fine.len(), fine_len);
        // singleton buckets: parent feature equals own feature (max of one)
        for k in 0..pooled.len() {
            let i = pooled.lineage[k][0];
            for j in 0..c {
                assert_eq!(fine.features.data()[i * c + j], g.features.data()[i * c + j]);
            }
        }
    }

    #[test]
    fn unpool_lineage_mismatch_errors() {
        let mut tape = Tape::new();
        let g1 = toy_grid(&mut tape, vec![[0.0; 3], [5.0, 0.0, 0.0]], 2, 4);
        let g2 = toy_grid(&mut tape, vec![[0.0; 3], [5.0, 0.0, 0.0], [9.0, 0.0, 0.0]], 2, 5);
        let pooled = grid_pool(&mut tape, &g1, 1.0);
        let merge_w = Tensor::constant(vec![0.0; 4 * 2], vec![4, 2]);
        let merge_b = Tensor::constant(vec![0.0; 2], vec![2]);
        assert!(grid_unpool(&mut tape, &pooled, &g2, &merge_w, &merge_b).is_err());
    }

    #[test]
    fn unpool_gradient_flows_to_both_inputs() {
        use crate::gradcheck::gradcheck;
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 3;
        let fine_feats: Vec<f64> = (0..pts.len() * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..2 * c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rel = gradcheck(
            &[(fine_feats, vec![pts.len(), c]), (w, vec![2 * c, c]), (b, vec![c])],
            |tape, xs| {
                let g = TokenGrid3D {
                    positions: pts.clone(),
                    features: xs[0].clone(),
                    order: (0..pts.len()).collect(),
                    level: 0,
                    lineage: vec![],
                };
                let pooled = grid_pool(tape, &g, 1.0);
                let fine = grid_unpool(tape, &pooled, &g, &xs[1], &xs[2]).unwrap();
                let sq = tape.square(&fine.features);
                tape.sum(&sq)
            },
        );
        assert!(rel < 1e-6, "rel err {rel}");
    }

    proptest! {
        #[test]
        fn morton_roundtrip_prop(x in 0u32..1024, y in 0u32..1024, z in 0u32..1024) {
            let code = morton_encode(x, y, z, 10);
            prop_assert_eq!(morton_decode(code, 10), [x, y, z]);
        }

        #[test]
        fn hilbert_roundtrip_prop(x in 0u32..1024, y in 0u32..1024, z in 0u32..1024) {
            let code = hilbert_encode(x, y, z, 10);
            prop_assert_eq!(hilbert_decode(code, 10), [x, y, z]);
        }
    }
}
