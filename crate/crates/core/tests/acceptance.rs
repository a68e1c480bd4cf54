//! End-to-end acceptance checks on synthetic phantoms. Prints one line per
//! criterion and fails if any criterion fails.

use std::time::{Duration, Instant};

use lgefuse::fusion::{build_pseudo_labels, ensemble_fuse, majority_vote, Atlas, PseudoLabelOptions, SamePatient};
use lgefuse::metrics::{dice, jaccard, soft_dice_loss, surface_distances};
use lgefuse::objective::{
    bending_energy, bending_energy_gradient, inconsistency_gradient, inconsistency_penalty, similarity_gradient,
};
use lgefuse::phantom::{
    add_noise, deform_phantom, generate_phantom, random_smooth_deformation, ContextStructure, Modality, PhantomSpec,
    Tissue,
};
use lgefuse::registration::{default_config, register, RegistrationKind, RegistrationResult};
use lgefuse::transform::BSplineTransform;
use lgefuse::volume::nifti::{encode_labels, encode_volume, parse_nifti, write_volume, read_volume};
use lgefuse::{Error, Geometry, LabelVolume, ProbabilityVolume, Volume};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Everything a registration-based criterion produced, for the rerun
/// comparison.
#[derive(Default, Clone)]
struct Snapshot {
    traces: Vec<Vec<Vec<f64>>>,
    affines: Vec<Vec<f64>>,
    coefficients: Vec<Vec<[f64; 3]>>,
    labels: Vec<Vec<u8>>,
}

impl Snapshot {
    fn record(&mut self, r: &RegistrationResult) {
        self.traces.push(r.objective_trace.clone());
        self.affines.push(r.affine.matrix().as_slice().to_vec());
        self.coefficients.push(r.fwd.coefficients().to_vec());
        self.coefficients.push(r.bwd.coefficients().to_vec());
    }

    fn bitwise_eq(&self, other: &Snapshot) -> bool {
        let bits = |v: &[Vec<Vec<f64>>]| -> Vec<u64> { v.iter().flatten().flatten().map(|x| x.to_bits()).collect() };
        let cbits = |v: &[Vec<[f64; 3]>]| -> Vec<u64> { v.iter().flatten().flatten().map(|x| x.to_bits()).collect() };
        bits(&self.traces) == bits(&other.traces)
            && bits(std::slice::from_ref(&self.affines)) == bits(std::slice::from_ref(&other.affines))
            && cbits(&self.coefficients) == cbits(&other.coefficients)
            && self.labels == other.labels
    }

    /// Largest relative difference between final objective values.
    fn objective_gap(&self, other: &Snapshot) -> f64 {
        let finals = |s: &Snapshot| -> Vec<f64> {
            s.traces.iter().flat_map(|r| r.iter().map(|level| *level.last().unwrap())).collect()
        };
        let (a, b) = (finals(self), finals(other));
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter().zip(&b).map(|(x, y)| (x - y).abs() / x.abs().max(1e-12)).fold(0.0, f64::max)
    }
}

fn relative_errors(analytic: &[[f64; 3]], numeric: &[[f64; 3]]) -> Vec<f64> {
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut errs: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| (0..3).map(move |c| (a[c] - n[c]).abs() / a[c].abs().max(n[c].abs()).max(1e-3 * scale)))
        .collect();
    errs.sort_by(f64::total_cmp);
    errs
}

fn quantile_99(sorted: &[f64]) -> f64 {
    sorted[((sorted.len() * 99).div_ceil(100)).max(1) - 1]
}

fn small_phantom(seed: u64) -> PhantomSpec {
    let mut s = PhantomSpec::cardiac([16, 16, 16], Modality::Lge, seed);
    s.lv_center = [7.5; 3];
    s.lv_radius = 1.5;
    s.myocardium_thickness = 1.0;
    s.rv_offset = [-1.5, -1.5, 0.0];
    s.rv_radius = 2.0;
    s.body_radii = [7.0, 6.5, 9.0];
    s.context = vec![ContextStructure::new(Tissue::Lung, [12.0, 9.0, 8.0], [2.0, 3.0, 4.0])];
    s.noise_sigma = 4.0;
    s
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (reference, _) = generate_phantom(&small_phantom(5)).unwrap();
    let (floating, _) = generate_phantom(&small_phantom(6)).unwrap();
    let lattice = BSplineTransform::new(reference.geometry().clone(), [5.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
        (0..lattice.node_count()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
    };
    let fwd = lattice.with_same_lattice(random(&mut rng)).unwrap();
    let bwd = lattice.with_same_lattice(random(&mut rng)).unwrap();

    let (_, nmi_grad) = similarity_gradient(&reference, &floating, &fwd).unwrap();
    let (_, bend_grad) = bending_energy_gradient(&fwd);
    let (_, inc_grad_f, inc_grad_b) = inconsistency_gradient(&fwd, &bwd).unwrap();

    let h = 1e-3;
    let n = fwd.node_count();
    let mut nmi_fd = vec![[0.0; 3]; n];
    let mut bend_fd = nmi_fd.clone();
    let mut inc_fd_f = nmi_fd.clone();
    let mut inc_fd_b = nmi_fd.clone();
    let shift = |t: &BSplineTransform, node: usize, c: usize, d: f64| {
        let mut v = t.coefficients().to_vec();
        v[node][c] += d;
        t.with_same_lattice(v).unwrap()
    };
    for node in 0..n {
        for c in 0..3 {
            let (fp, fm) = (shift(&fwd, node, c, h), shift(&fwd, node, c, -h));
            let nmi = |t: &BSplineTransform| similarity_gradient(&reference, &floating, t).unwrap().0;
            nmi_fd[node][c] = (nmi(&fp) - nmi(&fm)) / (2.0 * h);
            bend_fd[node][c] = (bending_energy(&fp) - bending_energy(&fm)) / (2.0 * h);
            inc_fd_f[node][c] =
                (inconsistency_penalty(&fp, &bwd).unwrap() - inconsistency_penalty(&fm, &bwd).unwrap()) / (2.0 * h);
            let (bp, bm) = (shift(&bwd, node, c, h), shift(&bwd, node, c, -h));
            inc_fd_b[node][c] =
                (inconsistency_penalty(&fwd, &bp).unwrap() - inconsistency_penalty(&fwd, &bm).unwrap()) / (2.0 * h);
        }
    }
    let nmi = quantile_99(&relative_errors(&nmi_grad, &nmi_fd));
    let bend = quantile_99(&relative_errors(&bend_grad, &bend_fd));
    let inc_f = quantile_99(&relative_errors(&inc_grad_f, &inc_fd_f));
    let inc_b = quantile_99(&relative_errors(&inc_grad_b, &inc_fd_b));
    let elapsed = start.elapsed();
    let pass = nmi <= 5e-2 && bend <= 1e-2 && inc_f <= 1e-2 && inc_b <= 1e-2 && elapsed < Duration::from_secs(60);
    Outcome::new(
        pass,
        format!(
            "99th pct rel. error NMI {nmi:.2e}, bending {bend:.2e}, inconsistency {inc_f:.2e}/{inc_b:.2e}; {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn base_phantom(noise: f64) -> (Volume, LabelVolume) {
    generate_phantom(&PhantomSpec::cardiac([64, 64, 64], Modality::Lge, 1).with_noise(noise)).unwrap()
}

fn criterion_2(snap: &mut Snapshot) -> Outcome {
    let (image, _) = base_phantom(3.0);
    let start = Instant::now();
    let r = register(&image, &image, &default_config(RegistrationKind::Type1)).unwrap();
    let elapsed = start.elapsed();
    snap.record(&r);
    let g = image.geometry();
    let field = r.fwd.dense_field();
    let spacing = g.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let max_disp = (0..g.voxel_count())
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            let x = g.voxel_to_world([i as f64, j as f64, k as f64]);
            (r.affine.apply(&(x + Vector3::from(field[idx]))) - x).norm() / spacing
        })
        .fold(0.0, f64::max);
    let monotone = r.objective_trace.iter().all(|t| t.windows(2).all(|w| w[1] >= w[0]));
    let pass = max_disp <= 0.1 && monotone && elapsed < Duration::from_secs(120);
    Outcome::new(
        pass,
        format!(
            "max displacement {max_disp:.4} voxel, monotone traces {monotone}; {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Registers `floating` to the phantom warped by a known field and measures
/// how far the recovered mapping is from the truth, in voxels.
fn recovery(floating: &Volume, snap: &mut Snapshot) -> Outcome {
    let (image, labels) = base_phantom(3.0);
    let g = image.geometry().clone();
    let truth = random_smooth_deformation(&g, 5.0, [32.0; 3], 88).unwrap();
    let (reference, _) = deform_phantom(&image, &labels, &truth).unwrap();
    let start = Instant::now();
    let r = register(&reference, floating, &default_config(RegistrationKind::Type1)).unwrap();
    let elapsed = start.elapsed();
    snap.record(&r);

    let body = image.map(|v| if v > 30.0 { 1.0 } else { 0.0 }).unwrap();
    let (body, _) = deform_phantom(&body, &labels, &truth).unwrap();
    let spacing = g.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let u = truth.dense_field();
    let v = r.fwd.dense_field();
    let (mut before, mut after, mut body_after, mut body_n) = (0.0, 0.0, 0.0, 0usize);
    for idx in 0..g.voxel_count() {
        let [i, j, k] = g.coords(idx);
        let x = g.voxel_to_world([i as f64, j as f64, k as f64]);
        let want = x + Vector3::from(u[idx]);
        let got = r.affine.apply(&(x + Vector3::from(v[idx])));
        before += (want - x).norm() / spacing;
        let e = (want - got).norm() / spacing;
        after += e;
        if body.data()[idx] >= 0.5 {
            body_after += e;
            body_n += 1;
        }
    }
    let n = g.voxel_count() as f64;
    let (before, after, body_after) = (before / n, after / n, body_after / body_n as f64);
    let pass = before >= 3.0 && after <= 1.0 && elapsed < Duration::from_secs(300);
    Outcome::new(
        pass,
        format!(
            "mean error {before:.3} -> {after:.3} voxel (inside body {body_after:.3}); {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3(snap: &mut Snapshot) -> Outcome {
    let (image, _) = base_phantom(3.0);
    recovery(&image, snap)
}

fn criterion_4(snap: &mut Snapshot) -> Outcome {
    let (image, _) = base_phantom(3.0);
    let remapped = image.map(|v| (v.max(0.0) / 40.0).sqrt() * 100.0 + 10.0).unwrap();
    recovery(&remapped, snap)
}

fn deformed(image: &Volume, labels: &LabelVolume, max_mm: f64, seed: u64, noise: f64) -> (Volume, LabelVolume) {
    let t = random_smooth_deformation(image.geometry(), max_mm, [32.0; 3], seed).unwrap();
    let (img, lbl) = deform_phantom(image, labels, &t).unwrap();
    (add_noise(&img, noise, seed + 1000).unwrap(), lbl)
}

fn criterion_5(snap: &mut Snapshot) -> Outcome {
    let (base, labels) = base_phantom(0.0);
    let (target, truth) = deformed(&base, &labels, 5.0, 500, 3.0);
    let atlases: Vec<Atlas> = (0..5)
        .map(|i| {
            let (img, lbl) = deformed(&base, &labels, 5.0, 600 + i, 3.0);
            Atlas::new(img, lbl).unwrap()
        })
        .collect();
    let sequence = |modality: Modality, seed: u64| {
        let (img, lbl) = generate_phantom(&PhantomSpec::cardiac([64, 64, 64], modality, 1)).unwrap();
        let (img, lbl) = deformed(&img, &lbl, 3.0, seed, 3.0);
        Atlas::new(img, lbl).unwrap()
    };
    let same = SamePatient {
        bssfp: sequence(Modality::Bssfp, 700),
        t2: sequence(Modality::T2, 701),
    };
    let start = Instant::now();
    let result = build_pseudo_labels(&target, &atlases, Some(&same), &PseudoLabelOptions::default()).unwrap();
    let elapsed = start.elapsed();
    for p in &result.atlases {
        snap.record(&p.registration);
    }
    if let Some((b, t)) = &result.same_patient {
        snap.record(&b.registration);
        snap.record(&t.registration);
    }
    snap.labels.push(result.majority.data().to_vec());
    snap.labels.push(result.labels.data().to_vec());

    let vote: Vec<f64> = (1..=3).map(|c| dice(&result.majority, &truth, c).unwrap()).collect();
    let refined: Vec<f64> = (1..=3).map(|c| dice(&result.labels, &truth, c).unwrap()).collect();
    let pass = vote.iter().all(|&d| d >= 0.80) && vote.iter().zip(&refined).all(|(v, r)| r >= &(v - 0.01));
    Outcome::new(
        pass,
        format!(
            "vote Dice {:.3}/{:.3}/{:.3}, refined {:.3}/{:.3}/{:.3}; {:.1} s",
            vote[0],
            vote[1],
            vote[2],
            refined[0],
            refined[1],
            refined[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn line_geometry(n: usize) -> Geometry {
    Geometry::with_spacing([n, 1, 1], [1.0; 3]).unwrap()
}

fn vote_oracle(votes: &[u8]) -> u8 {
    let mut counts = [0usize; 4];
    for &v in votes {
        counts[v as usize] += 1;
    }
    let best = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == best).unwrap() as u8
}

fn median_oracle(mut values: Vec<f32>) -> f64 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0
    }
}

/// All probability vectors over four classes with entries in quarters.
fn quarter_distributions() -> Vec<[f32; 4]> {
    let mut out = Vec::new();
    for a in 0..=4 {
        for b in 0..=4 - a {
            for c in 0..=4 - a - b {
                let d = 4 - a - b - c;
                out.push([a, b, c, d].map(|q| q as f32 / 4.0));
            }
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for voters in 1..=3u32 {
        let combos: Vec<Vec<u8>> = (0..4usize.pow(voters))
            .map(|code| (0..voters).map(|v| ((code / 4usize.pow(v)) % 4) as u8).collect())
            .collect();
        for chunk in combos.chunks(8) {
            let g = line_geometry(chunk.len());
            let inputs: Vec<LabelVolume> = (0..voters as usize)
                .map(|v| LabelVolume::new(g.clone(), chunk.iter().map(|c| c[v]).collect()).unwrap())
                .collect();
            let fused = majority_vote(&inputs).unwrap();
            for (voxel, votes) in chunk.iter().enumerate() {
                checked += 1;
                mismatches += (fused.data()[voxel] != vote_oracle(votes)) as usize;
            }
        }
    }

    let dists = quarter_distributions();
    for models in 1..=3u32 {
        let count = dists.len().pow(models);
        let combos: Vec<Vec<[f32; 4]>> = (0..count)
            .map(|code| (0..models).map(|m| dists[(code / dists.len().pow(m)) % dists.len()]).collect())
            .collect();
        for chunk in combos.chunks(8) {
            let g = line_geometry(chunk.len());
            let probs: Vec<ProbabilityVolume> = (0..models as usize)
                .map(|m| {
                    let channels = (0..4).map(|c| chunk.iter().map(|voxel| voxel[m][c]).collect()).collect();
                    ProbabilityVolume::new(g.clone(), channels).unwrap()
                })
                .collect();
            let fused = ensemble_fuse(&probs).unwrap();
            for (voxel, per_model) in chunk.iter().enumerate() {
                let medians: Vec<f64> = (0..4).map(|c| median_oracle(per_model.iter().map(|p| p[c]).collect())).collect();
                let best = medians.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let want = medians.iter().position(|&m| m == best).unwrap() as u8;
                checked += 1;
                mismatches += (fused.data()[voxel] != want) as usize;
            }
        }
    }
    Outcome::new(mismatches == 0, format!("{checked} voxel cases, {mismatches} mismatches"))
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> LabelVolume {
    let g = Geometry::with_spacing(dims, spacing).unwrap();
    let n = g.voxel_count();
    // blobs rather than salt and pepper so surfaces are non-trivial
    let seeds: Vec<([f64; 3], u8)> = (0..4)
        .map(|_| {
            (
                std::array::from_fn(|a| rng.random_range(0.0..dims[a] as f64)),
                rng.random_range(0..4u8),
            )
        })
        .collect();
    let data = (0..n)
        .map(|idx| {
            let c = g.coords(idx);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let d = |s: &[f64; 3]| (0..3).map(|i| (c[i] as f64 - s[i]).powi(2)).sum::<f64>();
                    d(&a.0).total_cmp(&d(&b.0))
                })
                .unwrap();
            if rng.random_bool(0.1) {
                rng.random_range(0..4u8)
            } else {
                nearest.1
            }
        })
        .collect();
    LabelVolume::new(g, data).unwrap()
}

fn brute_surface(l: &LabelVolume, class_id: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = l.dims();
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if l.get(i, j, k) != class_id {
                    continue;
                }
                let c = [i as i64, j as i64, k as i64];
                let boundary = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|d| {
                    let p = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
                    p.iter().zip(l.dims()).any(|(&x, n)| x < 0 || x >= n as i64)
                        || l.get(p[0] as usize, p[1] as usize, p[2] as usize) != class_id
                });
                if boundary {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn brute_distances(a: &LabelVolume, b: &LabelVolume, class_id: u8) -> Option<(f64, f64)> {
    let sa = brute_surface(a, class_id);
    let sb = brute_surface(b, class_id);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let s = a.geometry().spacing();
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * s[i]).powi(2)).sum::<f64>().sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let d: Vec<f64> = from
            .iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect();
        (d.iter().sum::<f64>() / d.len() as f64, d.iter().cloned().fold(0.0, f64::max))
    };
    let (ma, xa) = directed(&sa, &sb);
    let (mb, xb) = directed(&sb, &sa);
    Some(((ma + mb) / 2.0, xa.max(xb)))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    let mut worst_distance = 0.0f64;
    let fixtures = 24;
    for f in 0..fixtures {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..=8));
        let spacing: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..2.5));
        let a = random_labels(&mut rng, dims, spacing);
        let b = random_labels(&mut rng, dims, spacing);
        for c in 1..=3u8 {
            let (pa, pb) = (a.data().iter().map(|&v| v == c), b.data().iter().map(|&v| v == c));
            let both = pa.clone().zip(pb.clone()).filter(|(x, y)| *x && *y).count();
            let (na, nb) = (pa.filter(|&x| x).count(), pb.filter(|&x| x).count());
            let want_dice = if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 };
            let union = na + nb - both;
            let want_jaccard = if union == 0 { 1.0 } else { both as f64 / union as f64 };
            let (d, j) = (dice(&a, &b, c).unwrap(), jaccard(&a, &b, c).unwrap());
            if d != want_dice || j != want_jaccard {
                failures.push(format!("fixture {f} class {c}: overlap"));
            }
            if (j - d / (2.0 - d)).abs() > 1e-12 {
                failures.push(format!("fixture {f} class {c}: jaccard identity"));
            }
            match (surface_distances(&a, &b, c), brute_distances(&a, &b, c)) {
                (Ok((asd, hd)), Some((want_asd, want_hd))) => {
                    let err = (asd - want_asd).abs().max((hd - want_hd).abs());
                    worst_distance = worst_distance.max(err);
                    if err > 1e-9 {
                        failures.push(format!("fixture {f} class {c}: distance error {err:e}"));
                    }
                }
                (Err(Error::UndefinedMetric(_)), None) => {}
                _ => failures.push(format!("fixture {f} class {c}: definedness")),
            }
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{fixtures} fixtures, worst distance error {worst_distance:.1e} mm{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..=8));
        let pred = random_labels(&mut rng, dims, [1.0; 3]);
        let target = random_labels(&mut rng, dims, [1.0; 3]);
        let prob = ProbabilityVolume::one_hot(&pred, 4).unwrap();
        for c in 1..=3u8 {
            let loss = soft_dice_loss(&prob, &target, c).unwrap();
            let hard = dice(&pred, &target, c).unwrap();
            // both empty: the hard score is 1, the loss 0
            worst = worst.max((loss - (1.0 - hard)).abs());
        }
    }
    Outcome::new(worst <= 1e-9, format!("30 fixtures, worst |loss - (1 - Dice)| {worst:.1e}"))
}

/// A 2x2x2 float32 volume laid out field by field, 1.5 mm spacing on x.
fn hand_built_nifti() -> Vec<u8> {
    let mut b = vec![0u8; 352];
    b[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, d) in [3i16, 2, 2, 2, 1, 1, 1, 1].iter().enumerate() {
        b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    b[70..72].copy_from_slice(&16i16.to_le_bytes());
    b[72..74].copy_from_slice(&32i16.to_le_bytes());
    for (i, p) in [1.0f32, 1.5, 1.0, 1.0].iter().enumerate() {
        b[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    b[108..112].copy_from_slice(&352f32.to_le_bytes());
    b[344..348].copy_from_slice(b"n+1\0");
    for v in 0..8 {
        b.extend_from_slice(&(v as f32 * 10.0 - 5.0).to_le_bytes());
    }
    b
}

fn criterion_9() -> Outcome {
    let mut problems = Vec::new();
    let (image, labels) = generate_phantom(&PhantomSpec::cardiac([32, 32, 32], Modality::T2, 4).with_noise(2.0)).unwrap();
    match parse_nifti(&encode_volume(&image)) {
        Ok(img) if img.data == image.data() && img.geometry == *image.geometry() => {}
        _ => problems.push("volume round trip"),
    }
    match parse_nifti(&encode_labels(&labels)) {
        Ok(img) if img.data.iter().zip(labels.data()).all(|(&a, &b)| a == b as f32) => {}
        _ => problems.push("label round trip"),
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.nii");
    write_volume(&image, &path).unwrap();
    if read_volume(&path).ok().as_ref() != Some(&image) {
        problems.push("file round trip");
    }

    let fixture = hand_built_nifti();
    match parse_nifti(&fixture) {
        Ok(img)
            if img.geometry.dims() == [2, 2, 2]
                && img.geometry.spacing() == [1.5, 1.0, 1.0]
                && img.data == (0..8).map(|v| v as f32 * 10.0 - 5.0).collect::<Vec<_>>() => {}
        _ => problems.push("hand-built fixture"),
    }
    let mut bad_magic = fixture.clone();
    bad_magic[344..348].copy_from_slice(b"ni1\0");
    if !matches!(parse_nifti(&bad_magic), Err(Error::Format(_))) {
        problems.push("bad magic");
    }
    let mut bad_type = fixture.clone();
    bad_type[70..72].copy_from_slice(&64i16.to_le_bytes());
    if !matches!(parse_nifti(&bad_type), Err(Error::UnsupportedDatatype(64))) {
        problems.push("bad datatype");
    }
    let mut four_d = fixture.clone();
    four_d[40..42].copy_from_slice(&4i16.to_le_bytes());
    if !matches!(parse_nifti(&four_d), Err(Error::UnsupportedDimensionality(4))) {
        problems.push("4D input");
    }
    if !matches!(parse_nifti(&fixture[..360]), Err(Error::Truncated { .. })) {
        problems.push("truncated payload");
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() { "round trips, fixture and error classes as declared".to_string() } else { problems.join(", ") },
    )
}

type Registered = fn(&mut Snapshot) -> Outcome;

const REGISTERED: [(usize, Registered); 4] = [(2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn rerun(threads: usize) -> Snapshot {
    in_pool(threads, || {
        let mut snap = Snapshot::default();
        for (_, run) in REGISTERED {
            run(&mut snap);
        }
        snap
    })
}

fn criterion_10(primary: &Snapshot) -> Outcome {
    let serial = rerun(1);
    let parallel = rerun(4);
    let identical = primary.bitwise_eq(&serial);
    let gap = primary.objective_gap(&parallel);
    Outcome::new(
        identical && gap <= 1e-6,
        format!("single-thread rerun bitwise identical {identical}; 4-thread rerun max relative objective gap {gap:.1e}"),
    )
}

fn report(id: usize, title: &str, o: &Outcome) {
    println!("criterion {id:>2} {title:<28} {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| filter.is_empty() || filter.contains(&id);
    let titles = [
        "",
        "gradient correctness",
        "identity registration",
        "deformation recovery",
        "cross-modality recovery",
        "pipeline Dice",
        "fusion oracles",
        "metric oracles",
        "soft Dice vs hard Dice",
        "NIfTI fidelity",
        "determinism",
    ];
    let mut all_pass = true;
    let mut run = |id: usize, f: &mut dyn FnMut() -> Outcome| {
        if wanted(id) {
            let o = f();
            report(id, titles[id], &o);
            all_pass &= o.pass;
        }
    };
    run(1, &mut criterion_1);
    let mut primary = Snapshot::default();
    for (id, criterion) in REGISTERED {
        run(id, &mut || in_pool(1, || criterion(&mut primary)));
    }
    run(6, &mut criterion_6);
    run(7, &mut criterion_7);
    run(8, &mut criterion_8);
    run(9, &mut criterion_9);
    if filter.is_empty() || (filter.contains(&10) && (2..=5).all(|id| filter.contains(&id))) {
        run(10, &mut || criterion_10(&primary));
    }
    if !all_pass {
        std::process::exit(1);
    }
}
