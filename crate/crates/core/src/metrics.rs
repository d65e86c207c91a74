//! Image quality metrics used for evaluation only (never trained on).

/// Peak signal-to-noise ratio in dB for images in [0,1]. Identical images
/// report +inf.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean SSIM over channels with an 11x11 gaussian window (sigma 1.5),
/// K1=0.01, K2=0.03, dynamic range 1. Inputs are H*W x channels row-major.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> f64 {
    assert_eq!(a.len(), width * height * channels);
    assert_eq!(a.len(), b.len());
    let win = 11usize;
    let half = win / 2;
    let mut kernel = vec![0.0; win * win];
    let sigma = 1.5;
    let mut ksum = 0.0;
    for dy in 0..win {
        for dx in 0..win {
            let y = dy as f64 - half as f64;
            let x = dx as f64 - half as f64;
            let v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            kernel[dy * win + dx] = v;
            ksum += v;
        }
    }
    for v in &mut kernel {
        *v /= ksum;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for cy in half..height.saturating_sub(half) {
            for cx in half..width.saturating_sub(half) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let k = kernel[dy * win + dx];
                        let pix = (cy + dy - half) * width + cx + dx - half;
                        let xa = a[pix * channels + ch];
                        let xb = b[pix * channels + ch];
                        ma += k * xa;
                        mb += k * xb;
                        va += k * xa * xa;
                        vb += k * xb * xb;
                        cov += k * xa * xb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

/// Intersection-over-union of two binary masks obtained by thresholding.
pub fn mask_iou(a: &[f64], b: &[f64], threshold: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        let (xa, xb) = (*x > threshold, *y > threshold);
        if xa && xb {
            inter += 1;
        }
        if xa || xb {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_known_values() {
        let a = vec![0.5; 100];
        assert!(psnr(&a, &a).is_infinite());
        // constant offset 0.1: mse = 0.01 -> exactly 20 dB
        let b = vec![0.6; 100];
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-12);
        // offset 0.01 -> 40 dB
        let c = vec![0.51; 100];
        assert!((psnr(&a, &c) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_bounds_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (16, 16);
        let img: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!((ssim(&img, &img, w, h, 1) - 1.0).abs() < 1e-12);
        let slight: Vec<f64> =
            img.iter().map(|v| (v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)).collect();
        let heavy: Vec<f64> =
            img.iter().map(|v| (v + rng.gen_range(-0.4..0.4)).clamp(0.0, 1.0)).collect();
        let s1 = ssim(&img, &slight, w, h, 1);
        let s2 = ssim(&img, &heavy, w, h, 1);
        assert!(s1 > s2, "{s1} vs {s2}");
        assert!(s1 <= 1.0 && s2 >= -1.0);
    }

    #[test]
    fn iou_known_values() {
        let a = vec![1.0, 1.0, 0.0, 0.0];
        let b = vec![1.0, 0.0, 1.0, 0.0];
        assert!((mask_iou(&a, &b, 0.5) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&a, &a, 0.5), 1.0);
    }
}
