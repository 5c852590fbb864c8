use paconv::equivalence::{random_instance, InstanceShape};
use paconv::geometry::{knn_build, PointCloud, RelationMode};
use paconv::paconv::{aggregate, normalize_row, AggMode, ExecPath, NormMode, PAConvLayer, ScoreNet, WeightBank};
use paconv::regularize::{corr_loss, pearson_r_pairs};
use paconv::FeatureMap;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn coords(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..max)
}

fn agg_mode() -> impl Strategy<Value = AggMode> {
    prop::sample::select(AggMode::ALL.to_vec())
}

fn norm_mode() -> impl Strategy<Value = NormMode> {
    prop::sample::select(NormMode::ALL.to_vec())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Permuting the cloud relabels neighbor lists and nothing else.
    #[test]
    fn knn_is_permutation_covariant(pts in coords(40), seed in any::<u64>(), kf in 0.0f64..1.0, include_self in any::<bool>()) {
        let n = pts.len();
        let kmax = if include_self { n } else { n - 1 };
        let k = 1 + ((kmax - 1) as f64 * kf) as usize;
        let cloud = PointCloud::new(pts).unwrap();
        let order = shuffled(n, seed);
        let a = knn_build(&cloud, k, include_self).unwrap();
        let b = knn_build(&cloud.permuted(&order), k, include_self).unwrap();
        for (new_i, &old_i) in order.iter().enumerate() {
            let mapped: Vec<usize> = b.row(new_i).iter().map(|&j| order[j]).collect();
            // continuous random coordinates make distance ties impossible in practice
            prop_assert_eq!(&mapped[..], a.row(old_i));
        }
    }

    #[test]
    fn aggregation_ignores_neighbor_order(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..12),
        mode in agg_mode(),
        seed in any::<u64>(),
    ) {
        let flat: Vec<f64> = rows.concat();
        let order = shuffled(rows.len(), seed);
        let permuted: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
        let (a, _) = aggregate(&flat, 3, mode).unwrap();
        let (b, _) = aggregate(&permuted, 3, mode).unwrap();
        for (x, y) in a.iter().zip(&b) {
            match mode {
                AggMode::Max => prop_assert_eq!(x, y),
                _ => prop_assert!(close(*x, *y, 1e-13)),
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-30.0f64..30.0, 1..24)) {
        let mut out = vec![0.0; logits.len()];
        normalize_row(&logits, &mut out, NormMode::Softmax);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|&s| (0.0..=1.0).contains(&s)));
        let single: Vec<f32> = logits.iter().map(|&v| v as f32).collect();
        let mut out32 = vec![0.0f32; single.len()];
        normalize_row(&single, &mut out32, NormMode::Softmax);
        prop_assert!((out32.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalized_scores_respect_their_range(logits in prop::collection::vec(-800.0f64..800.0, 1..24), mode in norm_mode()) {
        let mut out = vec![0.0; logits.len()];
        normalize_row(&logits, &mut out, mode);
        for (&z, &s) in logits.iter().zip(&out) {
            let ok = match mode {
                NormMode::Softmax => (0.0..=1.0).contains(&s),
                NormMode::Sigmoid => s > 0.0 && s < 1.0,
                NormMode::TanhClamped => (0.0..1.0).contains(&s),
                NormMode::None => s == z,
            };
            prop_assert!(ok, "{:?}: {} -> {}", mode, z, s);
        }
    }

    /// With SUM (or AVG) aggregation the layer is linear in the input features
    /// for fixed geometry, on both paths.
    #[test]
    fn sum_aggregation_is_linear_in_features(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, norm in norm_mode()) {
        let shape = InstanceShape { n: 10, k: 4, c_in: 3, c_out: 4, m: 5 };
        let inst = random_instance(seed, shape, AggMode::Sum, norm, RelationMode::Full7, &[8]).unwrap();
        let f = inst.cloud.features().unwrap().clone();
        let g = f.map(|v| (v * 7.3).sin());
        let combo = FeatureMap::from_vec(
            10,
            3,
            f.as_slice().iter().zip(g.as_slice()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        let run = |feats: FeatureMap<f64>, path| {
            let mut c = inst.cloud.clone();
            c.set_features(feats).unwrap();
            inst.layer.forward(&c, &inst.nbrs, path).unwrap().0
        };
        for path in ExecPath::ALL {
            let (of, og, oc) = (run(f.clone(), path), run(g.clone(), path), run(combo.clone(), path));
            for ((a, b), c) in of.as_slice().iter().zip(og.as_slice()).zip(oc.as_slice()) {
                prop_assert!(close(alpha * a + beta * b, *c, 1e-12));
            }
        }
    }

    /// One-hot scores select a single bank matrix, so the layer reduces to a
    /// fixed-weight convolution with that matrix.
    #[test]
    fn one_hot_scores_degenerate_to_fixed_kernel(seed in 0u64..1000, pick in 0usize..4, agg in agg_mode()) {
        let (m, ci, co) = (4, 3, 2);
        let shape = InstanceShape { n: 9, k: 3, c_in: ci, c_out: co, m };
        let inst = random_instance(seed, shape, agg, NormMode::None, RelationMode::Full7, &[5]).unwrap();
        let mut net = ScoreNet::zeros(7, &[5], m, NormMode::None).unwrap();
        let last = net.layers().len() - 1;
        net.layers_mut()[last].bias[pick] = 1.0;
        let layer = PAConvLayer::new(inst.layer.bank.clone(), net, agg, RelationMode::Full7).unwrap();
        let b = layer.bank.matrix(pick);
        let feats = inst.cloud.features().unwrap();
        for path in ExecPath::ALL {
            let (out, _) = layer.forward(&inst.cloud, &inst.nbrs, path).unwrap();
            for i in 0..9 {
                let per_nbr: Vec<f64> = inst.nbrs.row(i).iter().flat_map(|&j| {
                    let f = feats.row(j);
                    (0..co).map(move |c| (0..ci).map(|a| f[a] * b[a * co + c]).sum::<f64>())
                }).collect();
                let (want, _) = aggregate(&per_nbr, co, agg).unwrap();
                for (x, y) in out.row(i).iter().zip(&want) {
                    prop_assert!(close(*x, *y, 1e-13));
                }
            }
        }
    }

    /// `rel7` drops absolute positions, so shifting the cloud while holding
    /// features fixed changes the output only by rounding.
    #[test]
    fn rel7_is_translation_invariant(seed in 0u64..1000, shift in prop::array::uniform3(-3.0f64..3.0), agg in agg_mode(), norm in norm_mode()) {
        let shape = InstanceShape { n: 12, k: 4, c_in: 2, c_out: 3, m: 4 };
        let inst = random_instance(seed, shape, agg, norm, RelationMode::Relative7, &[8, 8]).unwrap();
        let moved = inst.cloud.map_coords(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]);
        let moved = PointCloud::with_features(moved.coords().to_vec(), inst.cloud.features().unwrap().clone()).unwrap();
        let (a, _) = inst.layer.forward_fused(&inst.cloud, &inst.nbrs).unwrap();
        let (b, _) = inst.layer.forward_fused(&moved, &inst.nbrs).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn corr_loss_ignores_positive_matrix_scales(
        values in prop::collection::vec(-1.0f64..1.0, 4 * 6),
        scales in prop::collection::vec(0.01f64..100.0, 4),
    ) {
        let bank = WeightBank::from_vec(4, 2, 3, values.clone()).unwrap();
        let scaled: Vec<f64> = values.chunks(6).zip(&scales).flat_map(|(m, s)| m.iter().map(move |v| v * s)).collect();
        let scaled = WeightBank::from_vec(4, 2, 3, scaled).unwrap();
        prop_assert!(close(corr_loss(&bank).value, corr_loss(&scaled).value, 1e-12));
    }

    #[test]
    fn pearson_is_affine_invariant(
        values in prop::collection::vec(-1.0f64..1.0, 3 * 8),
        gain in prop::collection::vec(0.01f64..50.0, 3),
        offset in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        let bank = WeightBank::from_vec(3, 2, 4, values.clone()).unwrap();
        let moved: Vec<f64> = values
            .chunks(8)
            .enumerate()
            .flat_map(|(i, m)| m.iter().map(|v| gain[i] * v + offset[i]).collect::<Vec<_>>())
            .collect();
        let a = pearson_r_pairs(&bank);
        let b = pearson_r_pairs(&WeightBank::from_vec(3, 2, 4, moved).unwrap());
        for (x, y) in a.pearson.iter().zip(&b.pearson) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
