//! ROI Align against a brute-force bilinear sampler written from the definition: every bin
//! averages `n × n` point samples at sub-cell centers, each sample read by weighting the four
//! surrounding cell centers, with coordinates clamped to the outermost centers.

use proptest::prelude::*;
use soilseg::model::{roi_align, FeatureMap};

fn oracle(fm: &FeatureMap, roi: [f64; 4], s: usize, n: usize) -> Vec<f64> {
    let (h, w) = (fm.height(), fm.width());
    let sample = |c: usize, py: f64, px: f64| -> f64 {
        // pixel-space point to index space, where cell (i, j) has its center at (i, j)
        let y = (py - 0.5).clamp(0.0, (h - 1) as f64);
        let x = (px - 0.5).clamp(0.0, (w - 1) as f64);
        let mut acc = 0.0;
        for iy in 0..h {
            for ix in 0..w {
                let wy = (1.0 - (y - iy as f64).abs()).max(0.0);
                let wx = (1.0 - (x - ix as f64).abs()).max(0.0);
                acc += wy * wx * fm.get(c, iy, ix) as f64;
            }
        }
        acc
    };
    let bin_w = (roi[2] - roi[0]) / s as f64;
    let bin_h = (roi[3] - roi[1]) / s as f64;
    let mut out = Vec::new();
    for c in 0..fm.channels() {
        for by in 0..s {
            for bx in 0..s {
                let mut sum = 0.0;
                for sy in 0..n {
                    for sx in 0..n {
                        let py = roi[1] + bin_h * (by as f64 + (sy as f64 + 0.5) / n as f64);
                        let px = roi[0] + bin_w * (bx as f64 + (sx as f64 + 0.5) / n as f64);
                        sum += sample(c, py, px);
                    }
                }
                out.push(sum / (n * n) as f64);
            }
        }
    }
    out
}

fn feature_map(h: usize, w: usize, seed: u64) -> FeatureMap {
    // cheap deterministic pseudo-random values
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut vals = Vec::new();
    for _ in 0..2 * h * w {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        vals.push(((state >> 33) as f64 / (1u64 << 31) as f64 * 4.0 - 2.0) as f32);
    }
    FeatureMap::new(2, h, w, 1, vals).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_bilinear_oracle(
        side in prop::sample::select(vec![4usize, 8]),
        seed in any::<u64>(),
        x1 in -1.0f64..8.0, y1 in -1.0f64..8.0,
        w in 0.1f64..9.0, h in 0.1f64..9.0,
        s in 1usize..=4, n in 1usize..=3,
    ) {
        let fm = feature_map(side, side, seed);
        let roi = [x1, y1, x1 + w, y1 + h];
        let got = roi_align(&fm, roi, s, n).unwrap();
        let want = oracle(&fm, roi, s, n);
        for (g, e) in got.data.iter().zip(&want) {
            prop_assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn linear_in_the_features(seed in any::<u64>(), a in -3.0f32..3.0, x1 in 0.0f64..3.0, y1 in 0.0f64..3.0) {
        let f = feature_map(4, 4, seed);
        let g = feature_map(4, 4, seed ^ 0x5555);
        let mix = FeatureMap::from_fn(2, 4, 4, 1, |c, y, x| a * f.get(c, y, x) + g.get(c, y, x));
        let roi = [x1, y1, x1 + 1.5, y1 + 0.75];
        let (pf, pg, pm) = (roi_align(&f, roi, 2, 2).unwrap(), roi_align(&g, roi, 2, 2).unwrap(), roi_align(&mix, roi, 2, 2).unwrap());
        for i in 0..pm.data.len() {
            prop_assert!((pm.data[i] - (a * pf.data[i] + pg.data[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_map_stays_constant(v in -100.0f32..100.0, x1 in -2.0f64..6.0, y1 in -2.0f64..6.0, w in 0.05f64..6.0) {
        let fm = FeatureMap::from_fn(1, 4, 4, 1, |_, _, _| v);
        let out = roi_align(&fm, [x1, y1, x1 + w, y1 + w], 3, 2).unwrap();
        prop_assert!(out.data.iter().all(|&o| o == v));
    }
}

#[test]
fn degenerate_boxes_are_rejected() {
    let fm = feature_map(4, 4, 1);
    assert!(roi_align(&fm, [1.0, 1.0, 1.0, 2.0], 2, 2).is_err());
    assert!(roi_align(&fm, [1.0, 2.0, 3.0, 1.0], 2, 2).is_err());
    assert!(roi_align(&fm, [f64::NAN, 0.0, 1.0, 1.0], 2, 2).is_err());
}
