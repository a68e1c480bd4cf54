//! Overlap and surface-distance metrics for label maps, and the soft Dice
//! loss on probability maps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{class, Geometry, LabelVolume, ProbabilityVolume};

struct Overlap {
    pred: usize,
    gt: usize,
    both: usize,
}

fn overlap(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<Overlap> {
    pred.geometry().ensure_matches(gt.geometry())?;
    let mut o = Overlap { pred: 0, gt: 0, both: 0 };
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == class_id, g == class_id);
        o.pred += p as usize;
        o.gt += g as usize;
        o.both += (p && g) as usize;
    }
    Ok(o)
}

/// `2|P ∩ G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<f64> {
    let o = overlap(pred, gt, class_id)?;
    if o.pred + o.gt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * o.both as f64 / (o.pred + o.gt) as f64)
}

/// `|P ∩ G| / |P ∪ G|`; 1 when both are empty.
pub fn jaccard(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<f64> {
    let o = overlap(pred, gt, class_id)?;
    let union = o.pred + o.gt - o.both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(o.both as f64 / union as f64)
}

/// `1 - 2 Σ y ŷ / (Σ y² + Σ ŷ²)` with `y` the predicted channel and `ŷ` the
/// one-hot target. Zero when both are identically zero.
pub fn soft_dice_loss(prob: &ProbabilityVolume, target: &LabelVolume, class_id: u8) -> Result<f64> {
    prob.geometry().ensure_matches(target.geometry())?;
    if class_id as usize >= prob.channel_count() {
        return Err(Error::InvalidInput(format!(
            "class {class_id} has no channel among {}",
            prob.channel_count()
        )));
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&y, &t) in prob.channel(class_id as usize).iter().zip(target.data()) {
        let y = y as f64;
        let t = if t == class_id { 1.0 } else { 0.0 };
        num += y * t;
        den += y * y + t * t;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * num / den)
}

/// Soft Dice loss averaged over the foreground classes.
pub fn mean_soft_dice_loss(prob: &ProbabilityVolume, target: &LabelVolume) -> Result<f64> {
    let classes: Vec<u8> = (1..prob.channel_count() as u8).collect();
    if classes.is_empty() {
        return Err(Error::InvalidInput("no foreground channel".into()));
    }
    let mut total = 0.0;
    for &c in &classes {
        total += soft_dice_loss(prob, target, c)?;
    }
    Ok(total / classes.len() as f64)
}

/// Voxels of `class_id` with at least one 6-neighbour outside the class;
/// the volume border counts as outside.
pub fn surface_voxels(labels: &LabelVolume, class_id: u8) -> Vec<bool> {
    let dims = labels.dims();
    let data = labels.data();
    let mut out = vec![false; data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        if data[idx] != class_id {
            continue;
        }
        let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
        let strides = [1, dims[0], dims[0] * dims[1]];
        *o = (0..3).any(|a| {
            c[a] == 0 || c[a] + 1 == dims[a] || data[idx - strides[a]] != class_id || data[idx + strides[a]] != class_id
        });
    }
    out
}

/// Squared distance (mm²) from every voxel to the nearest `true` voxel of
/// `mask`, exact, via separable lower envelopes of parabolas.
pub fn squared_distance_transform(geometry: &Geometry, mask: &[bool]) -> Vec<f64> {
    let dims = geometry.dims();
    let spacing = geometry.spacing();
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..d.len() {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (t, l) in line.iter_mut().enumerate() {
                *l = d[start + t * stride];
            }
            envelope(&line, spacing[axis], &mut out);
            for (t, o) in out.iter().enumerate() {
                d[start + t * stride] = *o;
            }
        }
    }
    d
}

/// 1-D transform `out[p] = min_q f[q] + (s (p - q))²`.
fn envelope(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let x = |q: usize| q as f64 * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&last) => {
                    let inter = ((f[q] + x(q) * x(q)) - (f[last] + x(last) * x(last))) / (2.0 * (x(q) - x(last)));
                    if inter <= z[z.len() - 1] {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(inter);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x(p) {
            k += 1;
        }
        let dx = x(p) - x(v[k]);
        *o = f[v[k]] + dx * dx;
    }
}

/// Symmetric average surface distance and Hausdorff distance (mm) between
/// the boundaries of `class_id` in the two maps.
pub fn surface_distances(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<(f64, f64)> {
    pred.geometry().ensure_matches(gt.geometry())?;
    let sp = surface_voxels(pred, class_id);
    let sg = surface_voxels(gt, class_id);
    if !sp.iter().any(|&b| b) || !sg.iter().any(|&b| b) {
        return Err(Error::UndefinedMetric(format!(
            "class {class_id} is empty in {}",
            if sp.iter().any(|&b| b) { "the reference" } else { "the prediction" }
        )));
    }
    let to_g = squared_distance_transform(gt.geometry(), &sg);
    let to_p = squared_distance_transform(pred.geometry(), &sp);
    let directed = |from: &[bool], dist: &[f64]| -> (f64, f64) {
        let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
        for (&f, &d) in from.iter().zip(dist) {
            if f {
                let d = d.sqrt();
                sum += d;
                max = max.max(d);
                n += 1;
            }
        }
        (sum / n as f64, max)
    };
    let (mean_pg, max_pg) = directed(&sp, &to_g);
    let (mean_gp, max_gp) = directed(&sg, &to_p);
    Ok(((mean_pg + mean_gp) / 2.0, max_pg.max(max_gp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either map lacks the class.
    pub asd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub classes: Vec<ClassMetrics>,
    pub average: ClassMetrics,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    let v = v?;
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// All metrics for the three foreground classes plus their averages; an
/// average is missing when any class value is.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<EvaluationReport> {
    pred.geometry().ensure_matches(gt.geometry())?;
    let mut classes = Vec::new();
    for c in class::FOREGROUND {
        let (asd, hd) = match surface_distances(pred, gt, c) {
            Ok((a, h)) => (Some(a), Some(h)),
            Err(Error::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        };
        classes.push(ClassMetrics {
            class_id: c,
            dice: dice(pred, gt, c)?,
            jaccard: jaccard(pred, gt, c)?,
            asd_mm: asd,
            hd_mm: hd,
        });
    }
    let average = ClassMetrics {
        class_id: 0,
        dice: mean(classes.iter().map(|m| Some(m.dice))).unwrap_or(f64::NAN),
        jaccard: mean(classes.iter().map(|m| Some(m.jaccard))).unwrap_or(f64::NAN),
        asd_mm: mean(classes.iter().map(|m| m.asd_mm)),
        hd_mm: mean(classes.iter().map(|m| m.hd_mm)),
    };
    Ok(EvaluationReport { classes, average })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn short(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"))
}

impl EvaluationReport {
    pub const CSV_HEADER: &'static str = "class,dice,jaccard,asd_mm,hd_mm";

    /// One row per class plus an `Average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let rows = self.classes.iter().map(|m| (class::name(m.class_id), m)).chain([("Average", &self.average)]);
        for (name, m) in rows {
            let _ = writeln!(
                out,
                "{name},{},{},{},{}",
                cell(Some(m.dice)),
                cell(Some(m.jaccard)),
                cell(m.asd_mm),
                cell(m.hd_mm)
            );
        }
        out
    }

    /// Metrics as rows, classes as columns.
    pub fn to_table(&self) -> String {
        let all: Vec<&ClassMetrics> = self.classes.iter().chain([&self.average]).collect();
        let mut out = String::new();
        let _ = writeln!(out, "{:<26} LV Cavity | LV Myocardium | RV Cavity | Average", "");
        let rows: [(&str, Box<dyn Fn(&ClassMetrics) -> Option<f64>>); 4] = [
            ("Dice", Box::new(|m| Some(m.dice))),
            ("Jaccard", Box::new(|m| Some(m.jaccard))),
            ("Surface distance [mm]", Box::new(|m| m.asd_mm)),
            ("Hausdorff distance [mm]", Box::new(|m| m.hd_mm)),
        ];
        for (name, get) in rows {
            let values: Vec<String> = all.iter().map(|m| short(get(m))).collect();
            let _ = writeln!(out, "{name:<26} {}", values.join(" "));
        }
        out
    }
}
