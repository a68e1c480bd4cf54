use lgefuse::fusion::{consistency_refine, ensemble_fuse, largest_component, majority_vote};
use lgefuse::metrics::{dice, jaccard, soft_dice_loss, surface_distances};
use lgefuse::objective::{bending_energy, build_joint_histogram, inconsistency_penalty, nmi};
use lgefuse::phantom::{generate_phantom, random_smooth_deformation, Modality, PhantomSpec};
use lgefuse::transform::{warp_volume, AffineTransform, BSplineTransform};
use lgefuse::volume::nifti::{encode_labels, encode_volume, parse_nifti};
use lgefuse::volume::{resample, resample_labels, sample_trilinear};
use lgefuse::{Geometry, LabelVolume, ProbabilityVolume, Volume};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

fn dims_strategy(max: usize) -> impl Strategy<Value = [usize; 3]> {
    [1..=max, 1..=max, 1..=max]
}

fn geometry_strategy(max: usize) -> impl Strategy<Value = Geometry> {
    (dims_strategy(max), [0.3f64..3.0, 0.3f64..3.0, 0.3f64..3.0], [-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0], [-3.1f64..3.1, -1.5f64..1.5, -3.1f64..3.1])
        .prop_map(|(dims, spacing, origin, angles)| {
            let r = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
            Geometry::new(dims, spacing, Vector3::from(origin), *r.matrix()).unwrap()
        })
}

fn volume_strategy(max: usize) -> impl Strategy<Value = Volume> {
    geometry_strategy(max).prop_flat_map(|g| {
        let n = g.voxel_count();
        proptest::collection::vec(-1000.0f32..1000.0, n).prop_map(move |data| Volume::new(g.clone(), data).unwrap())
    })
}

fn labels_in(dims: [usize; 3]) -> impl Strategy<Value = LabelVolume> {
    let g = Geometry::with_spacing(dims, [1.0; 3]).unwrap();
    proptest::collection::vec(0u8..4, g.voxel_count()).prop_map(move |d| LabelVolume::new(g.clone(), d).unwrap())
}

fn label_pair(max: usize) -> impl Strategy<Value = (LabelVolume, LabelVolume)> {
    dims_strategy(max).prop_flat_map(|d| (labels_in(d), labels_in(d)))
}

fn coefficients(n: usize, scale: f64) -> impl Strategy<Value = Vec<[f64; 3]>> {
    proptest::collection::vec([-scale..scale, -scale..scale, -scale..scale], n)
}

fn lattice() -> BSplineTransform {
    BSplineTransform::new(Geometry::with_spacing([10, 9, 8], [1.0, 1.2, 0.8]).unwrap(), [4.0; 3]).unwrap()
}

fn field_pair(scale: f64) -> impl Strategy<Value = (BSplineTransform, BSplineTransform)> {
    let t = lattice();
    let n = t.node_count();
    (coefficients(n, scale), coefficients(n, scale)).prop_map(move |(a, b)| {
        (t.with_same_lattice(a).unwrap(), t.with_same_lattice(b).unwrap())
    })
}

fn textured(dims: [usize; 3], seed: u32) -> Volume {
    let g = Geometry::with_spacing(dims, [1.0; 3]).unwrap();
    Volume::from_fn(g, |i, j, k| {
        let h = (i as u32).wrapping_mul(73856093) ^ (j as u32).wrapping_mul(19349663) ^ (k as u32).wrapping_mul(83492791) ^ seed;
        ((h % 1000) as f32) / 10.0 + (i + j) as f32
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nifti_round_trip(vol in volume_strategy(6)) {
        let back = parse_nifti(&encode_volume(&vol)).unwrap();
        prop_assert_eq!(&back.data[..], vol.data());
        let (a, b) = (&back.geometry, vol.geometry());
        prop_assert_eq!(a.dims(), b.dims());
        for i in 0..3 {
            prop_assert!((a.spacing()[i] - b.spacing()[i]).abs() <= 1e-5 * b.spacing()[i]);
            prop_assert!((a.origin()[i] - b.origin()[i]).abs() <= 1e-5 * b.origin()[i].abs().max(1.0));
        }
        prop_assert!((a.direction() - b.direction()).abs().max() <= 1e-5);
    }

    #[test]
    fn label_nifti_round_trip((labels, _) in label_pair(5)) {
        let back = parse_nifti(&encode_labels(&labels)).unwrap();
        prop_assert!(back.data.iter().zip(labels.data()).all(|(&a, &b)| a == b as f32));
    }

    #[test]
    fn trilinear_is_exact_and_bounded(vol in volume_strategy(5), p in [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0]) {
        let d = vol.dims();
        for idx in 0..vol.data().len() {
            let c = vol.geometry().coords(idx);
            prop_assert_eq!(sample_trilinear(&vol, c.map(|v| v as f64)), vol.data()[idx] as f64);
        }
        let x: [f64; 3] = std::array::from_fn(|a| p[a] * (d[a] - 1) as f64);
        let lo: [usize; 3] = std::array::from_fn(|a| (x[a].floor() as usize).min(d[a].saturating_sub(2)));
        let mut neighbours = Vec::new();
        for k in 0..2 { for j in 0..2 { for i in 0..2 {
            let c = [lo[0] + i, lo[1] + j, lo[2] + k];
            if c.iter().zip(d).all(|(&c, n)| c < n) {
                neighbours.push(vol.get(c[0], c[1], c[2]) as f64);
            }
        }}}
        let v = sample_trilinear(&vol, x);
        let min = neighbours.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = neighbours.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= min - 1e-3 && v <= max + 1e-3, "{v} outside [{min}, {max}]");
    }

    #[test]
    fn resample_same_spacing_is_identity(vol in volume_strategy(5)) {
        let out = resample(&vol, vol.geometry().spacing()).unwrap();
        prop_assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn label_resampling_keeps_class_set((labels, _) in label_pair(6), s in [0.4f64..2.5, 0.4f64..2.5, 0.4f64..2.5]) {
        let out = resample_labels(&labels, s).unwrap();
        let present = labels.classes();
        prop_assert!(out.classes().iter().all(|c| present.contains(c)));
    }

    #[test]
    fn bspline_weights_sum_to_one(x in [0.0f64..9.0, 0.0f64..8.0, 0.0f64..7.0]) {
        let t = lattice();
        let mut sum = 0.0;
        t.for_each_weight(x, |_, w| sum += w);
        prop_assert!((sum - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn displacement_is_linear_in_coefficients((f, g) in field_pair(3.0), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mix: Vec<[f64; 3]> = f.coefficients().iter().zip(g.coefficients())
            .map(|(p, q)| std::array::from_fn(|i| a * p[i] + b * q[i])).collect();
        let m = f.with_same_lattice(mix).unwrap();
        let (df, dg, dm) = (f.dense_field(), g.dense_field(), m.dense_field());
        for idx in 0..dm.len() {
            for c in 0..3 {
                prop_assert!((dm[idx][c] - (a * df[idx][c] + b * dg[idx][c])).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn identity_warp_is_identity(vol in volume_strategy(5)) {
        let zero = BSplineTransform::new(vol.geometry().clone(), [3.0; 3]).unwrap();
        let out = warp_volume(&vol, vol.geometry(), &AffineTransform::identity(), Some(&zero)).unwrap();
        for (a, b) in out.data().iter().zip(vol.data()) {
            prop_assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0));
        }
    }

    #[test]
    fn bending_and_inconsistency_are_non_negative((f, g) in field_pair(2.0)) {
        prop_assert!(bending_energy(&f) >= 0.0);
        let fg = inconsistency_penalty(&f, &g).unwrap();
        let gf = inconsistency_penalty(&g, &f).unwrap();
        prop_assert!(fg >= 0.0);
        prop_assert!((fg - gf).abs() <= 1e-12 * fg.max(1.0));
    }

    #[test]
    fn dice_jaccard_properties((a, b) in label_pair(6)) {
        for c in 1..=3u8 {
            let d = dice(&a, &b, c).unwrap();
            let j = jaccard(&a, &b, c).unwrap();
            prop_assert_eq!(d, dice(&b, &a, c).unwrap());
            prop_assert_eq!(j, jaccard(&b, &a, c).unwrap());
            prop_assert!((0.0..=1.0).contains(&d) && j <= d);
            prop_assert!((j - d / (2.0 - d)).abs() <= 1e-12);
            if let Ok((asd, hd)) = surface_distances(&a, &b, c) {
                prop_assert!(hd >= asd && asd >= 0.0);
                let (asd2, hd2) = surface_distances(&b, &a, c).unwrap();
                prop_assert!((asd - asd2).abs() <= 1e-12 && hd == hd2);
            }
            let onehot = ProbabilityVolume::one_hot(&a, 4).unwrap();
            prop_assert!((soft_dice_loss(&onehot, &b, c).unwrap() - (1.0 - d)).abs() <= 1e-9);
        }
    }

    #[test]
    fn vote_is_permutation_invariant_and_picks_a_cast_vote(
        inputs in dims_strategy(4).prop_flat_map(|d| proptest::collection::vec(labels_in(d), 1..5)),
        rotate in 0usize..4,
    ) {
        let fused = majority_vote(&inputs).unwrap();
        let mut shuffled = inputs.clone();
        shuffled.rotate_left(rotate % inputs.len());
        shuffled.reverse();
        prop_assert_eq!(&majority_vote(&shuffled).unwrap(), &fused);
        for (idx, &v) in fused.data().iter().enumerate() {
            prop_assert!(inputs.iter().any(|l| l.data()[idx] == v));
        }
    }

    #[test]
    fn consistency_rule(t in labels_in([3, 3, 2]), b in labels_in([3, 3, 2]), c in labels_in([3, 3, 2])) {
        let out = consistency_refine(&t, &b, &c).unwrap();
        for idx in 0..out.data().len() {
            let want = if b.data()[idx] == c.data()[idx] { b.data()[idx] } else { t.data()[idx] };
            prop_assert_eq!(out.data()[idx], want);
        }
    }

    #[test]
    fn ensemble_permutation_and_identical_models(
        raw in proptest::collection::vec(proptest::collection::vec(0.01f32..1.0, 4 * 6), 1..5),
    ) {
        let g = Geometry::with_spacing([6, 1, 1], [1.0; 3]).unwrap();
        let models: Vec<ProbabilityVolume> = raw.iter().map(|r| {
            let channels = (0..4).map(|c| (0..6).map(|v| {
                let total: f32 = (0..4).map(|k| r[k * 6 + v]).sum();
                r[c * 6 + v] / total
            }).collect()).collect();
            ProbabilityVolume::new(g.clone(), channels).unwrap()
        }).collect();
        let fused = ensemble_fuse(&models).unwrap();
        let mut reversed = models.clone();
        reversed.reverse();
        prop_assert_eq!(&ensemble_fuse(&reversed).unwrap(), &fused);
        let single = ensemble_fuse(&models[..1]).unwrap();
        let repeated = ensemble_fuse(&vec![models[0].clone(); 3]).unwrap();
        prop_assert_eq!(single, repeated);
    }

    #[test]
    fn largest_component_only_clears(labels in labels_in([5, 4, 3])) {
        let out = largest_component(&labels);
        let fg = |l: &LabelVolume| l.data().iter().filter(|&&v| v != 0).count();
        prop_assert!(fg(&out) <= fg(&labels));
        for (a, b) in out.data().iter().zip(labels.data()) {
            prop_assert!(a == b || *a == 0);
        }
    }

    #[test]
    fn nmi_bounds_symmetry_and_scaling(seed in 0u32..1000, other in 0u32..1000, scale in 0.5f32..4.0) {
        let a = textured([7, 6, 5], seed);
        let b = textured([7, 6, 5], other);
        let ab = nmi(&build_joint_histogram(&a, &b, None).unwrap()).unwrap();
        let ba = nmi(&build_joint_histogram(&b, &a, None).unwrap()).unwrap();
        prop_assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() <= 1e-12);
        let a2 = a.map(|v| v * scale).unwrap();
        let b2 = b.map(|v| v * scale).unwrap();
        let scaled = nmi(&build_joint_histogram(&a2, &b2, None).unwrap()).unwrap();
        prop_assert!((scaled - ab).abs() <= 1e-6, "{scaled} vs {ab}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn phantom_is_a_function_of_its_seed(seed in any::<u64>()) {
        let spec = PhantomSpec::cardiac([32, 32, 32], Modality::Bssfp, seed).with_noise(5.0);
        let (a, la) = generate_phantom(&spec).unwrap();
        let (b, lb) = generate_phantom(&spec).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(la, lb);
        let g = Geometry::with_spacing([32, 32, 32], [1.0; 3]).unwrap();
        let t1 = random_smooth_deformation(&g, 3.0, [8.0; 3], seed).unwrap();
        let t2 = random_smooth_deformation(&g, 3.0, [8.0; 3], seed).unwrap();
        prop_assert_eq!(t1.coefficients(), t2.coefficients());
    }
}
