use objscale_core::evalbench::*;
use objscale_core::scalenet::ScaleMlp;
use objscale_core::scenegen::OracleGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn checker(w: usize, h: usize) -> ImageBuf {
    let data = (0..w * h)
        .flat_map(|i| {
            let v = if ((i / w) / 4 + (i % w) / 4).is_multiple_of(2) { 0.9 } else { 0.1 };
            [v, v, v]
        })
        .collect();
    ImageBuf::new(w, h, 3, data).unwrap()
}

#[test]
fn psnr_examples() {
    let a = checker(16, 16);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let z = ImageBuf::constant(16, 16, 3, 0.0);
    let b = ImageBuf::constant(16, 16, 3, 0.1);
    assert!((psnr(&z, &b).unwrap() - 20.0).abs() < 1e-9);
    let one = ImageBuf::constant(16, 16, 3, 1.0);
    assert!(psnr(&z, &one).unwrap().abs() < 1e-12);
    assert!(psnr(&z, &ImageBuf::constant(8, 16, 3, 0.0)).is_err());
}

#[test]
fn ssim_examples() {
    let a = checker(32, 32);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let inv = ImageBuf::new(32, 32, 3, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(ssim(&a, &inv).unwrap() < 0.5);
    // Zero variances leave only the luminance term.
    let (x, y) = (0.2, 0.7);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let expected = (2.0 * x * y + c1) / (x * x + y * y + c1);
    let s = ssim(&ImageBuf::constant(16, 16, 1, x), &ImageBuf::constant(16, 16, 1, y)).unwrap();
    assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    assert!(ssim(&ImageBuf::constant(8, 8, 1, 0.0), &ImageBuf::constant(8, 8, 1, 0.0)).is_err());
}

#[test]
fn ssimae_examples() {
    let gt: Vec<f64> = (0..100).map(|i| 1.0 + (i as f64 * 0.37).sin().abs() * 3.0).collect();
    let valid = vec![true; gt.len()];
    assert!(ssimae(&gt, &gt, &valid).unwrap() < 1e-12);
    let affine: Vec<f64> = gt.iter().map(|d| 3.0 * d + 7.0).collect();
    assert!(ssimae(&affine, &gt, &valid).unwrap() < 1e-9);
    // Alternating noise is orthogonal to the affine fit when paired symmetrically.
    let eps = 0.01;
    let paired: Vec<f64> = (0..100).map(|i| 1.0 + (i / 2) as f64 * 0.05).collect();
    let noisy: Vec<f64> = paired
        .iter()
        .enumerate()
        .map(|(i, d)| d + if i % 2 == 0 { eps } else { -eps })
        .collect();
    let e = ssimae(&noisy, &paired, &valid).unwrap();
    assert!((e - eps).abs() < 1e-3 * eps, "{e}");
    let constant = vec![2.0; 100];
    let mean = gt.iter().sum::<f64>() / 100.0;
    let mae = gt.iter().map(|g| (g - mean).abs()).sum::<f64>() / 100.0;
    assert!((ssimae(&constant, &gt, &valid).unwrap() - mae).abs() < 1e-12);
    assert!(ssimae(&gt[..1], &gt[..1], &valid[..1]).is_err());
}

fn square(w: usize, x0: usize, y0: usize, size: usize, id: usize, out: &mut [usize]) {
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            out[y * w + x] = id;
        }
    }
}

#[test]
fn seg_metrics_examples() {
    let w = 20;
    let mut gt = vec![0; w * w];
    square(w, 2, 2, 6, 1, &mut gt);
    let perfect = seg_metrics(&gt, &gt, 2, None).unwrap();
    assert_eq!(perfect.miou, 1.0);
    assert_eq!(perfect.pq, 100.0);

    let a = vec![0; 64];
    let b = vec![1; 64];
    assert_eq!(seg_metrics(&b, &a, 2, None).unwrap().miou, 0.0);

    // Two squares each shifted by half their width: IoU 1/3 for both.
    let (mut g, mut p) = (vec![0; w * w], vec![0; w * w]);
    square(w, 0, 0, 4, 1, &mut g);
    square(w, 2, 0, 4, 1, &mut p);
    square(w, 10, 10, 4, 2, &mut g);
    square(w, 12, 10, 4, 2, &mut p);
    let ious: Vec<f64> = (1..3)
        .map(|id| {
            let inter = (0..w * w).filter(|&i| g[i] == id && p[i] == id).count();
            let union = (0..w * w).filter(|&i| g[i] == id || p[i] == id).count();
            inter as f64 / union as f64
        })
        .collect();
    assert!(ious.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    let m = seg_metrics(&p, &g, 3, None).unwrap();
    let bg_inter = (0..w * w).filter(|&i| g[i] == 0 && p[i] == 0).count() as f64;
    let bg_union = (0..w * w).filter(|&i| g[i] == 0 || p[i] == 0).count() as f64;
    assert!((m.miou - (bg_inter / bg_union + 2.0 / 3.0) / 3.0).abs() < 1e-12);
}

#[test]
fn scale_mse_examples() {
    assert_eq!(scale_mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    assert!((scale_mse(&[1.0, 2.5, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 0.125).abs() < 1e-15);
    assert!(scale_mse(&[2.0, 1.0], &[1.0, 1.0]).is_err());
}

#[test]
fn roc_auc_examples() {
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
    assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
    assert_eq!(roc_auc(&[0.3, 0.4], &[true, true]), None);
}

fn interval_oracle(res: usize, lo: f64, hi: f64) -> OracleGrid {
    let valid: Vec<bool> = (0..res)
        .map(|i| {
            let s = i as f64 / (res - 1) as f64;
            (lo..=hi).contains(&s)
        })
        .collect();
    OracleGrid {
        resolution: res,
        num_free: 1,
        theta: 0.999,
        agreement: valid.iter().map(|&v| f64::from(u8::from(v))).collect(),
        valid,
        truth: vec![(lo + hi) / 2.0],
    }
}

/// Network `sigmoid(sharp * (r - |s - c|))`, the indicator of `[c - r, c + r]`.
fn sharp_interval_net(c: f64, r: f64, sharp: f64) -> ScaleMlp {
    let mut net = ScaleMlp::constant(2, 0.5);
    let l = &mut net.net.layers;
    // Hidden units: relu(s - c) and relu(c - s) carried through identity layers.
    l[0].weight[[0, 0]] = 1.0;
    l[0].bias[0] = -c;
    l[0].weight[[0, 1]] = -1.0;
    l[0].bias[1] = c;
    for layer in l.iter_mut().take(4).skip(1) {
        layer.weight[[0, 0]] = 1.0;
        layer.weight[[1, 1]] = 1.0;
    }
    l[4].weight[[0, 0]] = -sharp;
    l[4].weight[[1, 0]] = -sharp;
    l[4].bias[0] = sharp * r;
    net
}

#[test]
fn perfect_and_uninformative_networks_against_the_oracle() {
    let oracle = interval_oracle(101, 0.3, 0.6);
    let net = sharp_interval_net(0.45, 0.15 + 0.004, 1e4);
    let cmp = scalenet_vs_oracle(&net, &oracle, 0.95).unwrap();
    assert_eq!(cmp.iou, 1.0);
    assert_eq!(cmp.auc, Some(1.0));

    let flat = scalenet_vs_oracle(&ScaleMlp::constant(2, 0.5), &oracle, 0.95).unwrap();
    assert_eq!(flat.auc, Some(0.5));
    assert_eq!(flat.iou, 0.0);

    assert!(scalenet_vs_oracle(&ScaleMlp::constant(3, 0.5), &oracle, 0.95).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssimae_is_affine_invariant(seed in 0u64..10_000, a in 0.01f64..50.0, b in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..8.0)).collect();
        let valid = vec![true; 64];
        let pred: Vec<f64> = gt.iter().map(|d| a * d + b).collect();
        prop_assert!(ssimae(&pred, &gt, &valid).unwrap() <= 1e-6);
    }

    #[test]
    fn psnr_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ImageBuf::new(12, 12, 3, (0..432).map(|_| rng.random::<f64>()).collect()).unwrap();
        let b = ImageBuf::new(12, 12, 3, (0..432).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (x, y) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=PSNR_CAP).contains(&x));
    }

    #[test]
    fn ssim_lies_in_range(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ImageBuf::new(16, 16, 1, (0..256).map(|_| rng.random::<f64>()).collect()).unwrap();
        let b = ImageBuf::new(16, 16, 1, (0..256).map(|_| rng.random::<f64>()).collect()).unwrap();
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
