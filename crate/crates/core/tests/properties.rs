//! Randomized invariants across tiling, fusion, the MIL model and folds.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use wsimil::embedding::fusion::extractor_block;
use wsimil::embedding::{attention_fuse, concat_fuse, AttentionFusionParams, SlideEmbeddingSet};
use wsimil::mil::{attention_weights, pool, softmax, Bag, GatedAttentionParams, MilModel, ModelShape};
use wsimil::rng::SplitMix64;
use wsimil::tiling::{extract_patches, hsv_to_rgb_pixel, rgb_pixel_to_hsv, RasterImage, TissueMask};
use wsimil::training::{make_folds, subsample_patches};

fn matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.standard_normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hsv_round_trip(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
        let back = hsv_to_rgb_pixel(rgb_pixel_to_hsv([r, g, b]));
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((*x as i32 - y as i32).abs() <= 1);
        }
    }

    #[test]
    fn patches_tile_without_overlap(
        w in 1usize..80, h in 1usize..80, p in 1usize..24, density in 0.0f64..1.0, seed in any::<u64>()
    ) {
        let mut rng = SplitMix64::new(seed);
        let bits: Vec<bool> = (0..w * h).map(|_| rng.next_f64() < density).collect();
        let mask = TissueMask::new(w, h, bits).unwrap();
        let image = RasterImage::filled(w, h, [10, 20, 30]).unwrap();
        let patches = extract_patches(&image, &mask, p, 0.5).unwrap();
        prop_assert!(patches.len() <= (w / p) * (h / p));
        let mut cells = BTreeSet::new();
        let mut last = None;
        for q in &patches {
            prop_assert_eq!(q.origin_x % p, 0);
            prop_assert_eq!(q.origin_y % p, 0);
            prop_assert_eq!((q.origin_x / p, q.origin_y / p), (q.col, q.row));
            prop_assert!(cells.insert((q.row, q.col)));
            prop_assert!(last < Some((q.row, q.col)));
            last = Some((q.row, q.col));
            let count = mask.count_window(q.origin_x, q.origin_y, p);
            prop_assert_eq!(q.coverage, count as f64 / (p * p) as f64);
            prop_assert!(q.coverage >= 0.5);
        }
    }

    #[test]
    fn attention_is_a_distribution(k in 1usize..12, m in 1usize..6, spread in 0.0f64..500.0, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let l = 4;
        let params = GatedAttentionParams {
            v: matrix(&mut rng, l, m, 1.0),
            u: matrix(&mut rng, l, m, 1.0),
            w: Array1::from_shape_simple_fn(l, || spread * rng.standard_normal()),
        };
        let x = matrix(&mut rng, k, m, 3.0);
        let alpha = attention_weights(&params, x.view()).unwrap();
        prop_assert!((alpha.sum() - 1.0).abs() <= 1e-10);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));

        let z = pool(alpha.view(), x.view()).unwrap();
        for (j, col) in x.columns().into_iter().enumerate() {
            let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            prop_assert!(z[j] >= lo - 1e-12 && z[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn stable_softmax_matches_naive(logits in proptest::collection::vec(-30.0f64..30.0, 1..20)) {
        let stable = softmax(Array1::from(logits.clone()).view());
        let exps: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (s, e) in stable.iter().zip(&exps) {
            prop_assert!((s - e / total).abs() <= 1e-10);
        }
    }

    #[test]
    fn permutation_and_duplication(k in 1usize..10, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let model = MilModel::new(&ModelShape { attention_dim: 6, head_widths: vec![5], ..ModelShape::concat(vec![7]) }, seed).unwrap();
        let x = matrix(&mut rng, k, 7, 1.0);
        let base = model.forward(x.view()).unwrap();

        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let xp = x.select(ndarray::Axis(0), &perm);
        let permuted = model.forward(xp.view()).unwrap();
        prop_assert!((permuted.probability - base.probability).abs() <= 1e-12);
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((permuted.alpha[i] - base.alpha[src]).abs() <= 1e-12);
        }

        let doubled: Vec<usize> = (0..k).chain(0..k).collect();
        let xd = x.select(ndarray::Axis(0), &doubled);
        let dup = model.forward(xd.view()).unwrap();
        for (a, b) in dup.pooled.iter().zip(&base.pooled) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn fusion_is_per_patch(k in 1usize..8, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let dims = [3usize, 5];
        let keys: Vec<(u32, u32)> = (0..k as u32).map(|i| (0, i)).collect();
        let mut set = SlideEmbeddingSet::new("s", keys.clone());
        let blocks: Vec<Array2<f32>> = dims.iter().map(|&d| matrix(&mut rng, k, d, 1.0).mapv(|v| v as f32)).collect();
        for (j, b) in blocks.iter().enumerate() {
            set.insert(format!("e{j}"), b.clone()).unwrap();
        }
        let order = ["e0", "e1"];
        let fused = concat_fuse(&set, &order).unwrap();
        for (j, b) in blocks.iter().enumerate() {
            prop_assert_eq!(extractor_block(&fused, &dims, j), b.mapv(f64::from));
        }

        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let mut shuffled = SlideEmbeddingSet::new("s", perm.iter().map(|&i| keys[i]).collect());
        for (j, b) in blocks.iter().enumerate() {
            shuffled.insert(format!("e{j}"), b.select(ndarray::Axis(0), &perm)).unwrap();
        }
        let fused_after = concat_fuse(&shuffled, &order).unwrap();
        prop_assert_eq!(&fused_after.matrix, &fused.matrix.select(ndarray::Axis(0), &perm));

        let params = AttentionFusionParams::new(&dims, 4, 3, &mut rng);
        let (a, wa) = attention_fuse(&set, &order, &params).unwrap();
        let (b, _) = attention_fuse(&shuffled, &order, &params).unwrap();
        prop_assert_eq!(&b.matrix, &a.matrix.select(ndarray::Axis(0), &perm));
        for row in wa.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn folds_partition_patients(n_pos in 4usize..30, n_neg in 4usize..30, k in 2usize..5, seed in any::<u64>()) {
        let mut patients: Vec<(String, u8)> = (0..n_pos).map(|i| (format!("p{i}"), 1)).collect();
        patients.extend((0..n_neg).map(|i| (format!("n{i}"), 0)));
        let split = make_folds(&patients, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        for fold in &split.folds {
            for p in fold {
                prop_assert!(seen.insert(p.clone()));
            }
            let pos = fold.iter().filter(|p| p.starts_with('p')).count();
            let neg = fold.len() - pos;
            prop_assert!(pos == n_pos / k || pos == n_pos.div_ceil(k));
            prop_assert!(neg == n_neg / k || neg == n_neg.div_ceil(k));
        }
        prop_assert_eq!(seen.len(), n_pos + n_neg);
    }

    #[test]
    fn subsample_size(k in 1usize..300, cap in 1usize..200, seed in any::<u64>()) {
        let x = Array2::from_shape_fn((k, 2), |(i, j)| (i * 2 + j) as f64);
        let bag = Bag::from_features("s", "p", 0, x).unwrap();
        let out = subsample_patches(&bag, cap, seed);
        prop_assert_eq!(out.len(), k.min(cap));
        let rows: Vec<u32> = out.keys.iter().map(|key| key.1).collect();
        prop_assert!(rows.windows(2).all(|w| w[0] < w[1]));
    }
}
