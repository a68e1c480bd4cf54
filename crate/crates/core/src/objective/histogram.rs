//! Parzen-window joint intensity histogram with a cubic B-spline kernel on
//! both axes, and the normalised mutual information derived from it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::transform::bspline_kernel;
use crate::transform::basis;

pub const DEFAULT_BINS: usize = 64;
/// Robust intensity range: these percentiles of an image map to the ends of
/// the histogram axis.
pub const LOW_PERCENTILE: f64 = 0.1;
pub const HIGH_PERCENTILE: f64 = 99.9;

/// Voxels per histogram partial sum. Fixed so that reductions do not depend
/// on the thread count.
pub(crate) const CHUNK: usize = 8192;

/// Affine map from intensity to continuous bin position.
///
/// `[lo, hi]` maps onto `[1, bins - 3]`, so the four-bin kernel footprint
/// always stays inside `0..bins`. Values outside the range are clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityRange {
    lo: f64,
    hi: f64,
    scale: f64,
}

impl IntensityRange {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins < 5 {
            return Err(Error::InvalidInput(format!("need at least 5 histogram bins, got {bins}")));
        }
        if !(hi - lo > 0.0) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "intensity range [{lo}, {hi}] is empty"
            )));
        }
        Ok(Self {
            lo,
            hi,
            scale: (bins - 4) as f64 / (hi - lo),
        })
    }

    /// Range spanning the robust percentiles of `values`.
    pub fn robust(values: &[f32], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateInput("no voxels to derive an intensity range".into()));
        }
        let lo = percentile(values, LOW_PERCENTILE);
        let hi = percentile(values, HIGH_PERCENTILE);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            // heavy ties at one end: fall back to the full range
            let (mn, mx) = values
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            (mn as f64, mx as f64)
        };
        Self::new(lo, hi, bins)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Bin position of `v` and its derivative with respect to `v`.
    #[inline]
    pub fn position(&self, v: f64) -> (f64, f64) {
        if v <= self.lo {
            (1.0, 0.0)
        } else if v >= self.hi {
            (1.0 + (self.hi - self.lo) * self.scale, 0.0)
        } else {
            (1.0 + (v - self.lo) * self.scale, self.scale)
        }
    }
}

/// Linear-interpolated percentile (`pct` in 0..=100).
pub fn percentile(values: &[f32], pct: f64) -> f64 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let f = rank - lo as f64;
    sorted[lo] as f64 * (1.0 - f) + sorted[hi] as f64 * f
}

/// `bins x bins` joint histogram; row index is the reference bin, column
/// the floating bin.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<f64>,
}

impl JointHistogram {
    pub fn empty(bins: usize) -> Self {
        Self {
            bins,
            counts: vec![0.0; bins * bins],
        }
    }

    /// Wraps raw counts (row-major, reference bins as rows).
    pub fn from_counts(bins: usize, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != bins * bins {
            return Err(Error::InvalidInput(format!(
                "{} counts do not form a {bins}x{bins} histogram",
                counts.len()
            )));
        }
        if counts.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput("histogram counts must be finite and non-negative".into()));
        }
        Ok(Self { bins, counts })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, ref_bin: usize, float_bin: usize) -> f64 {
        self.counts[ref_bin * self.bins + float_bin]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn ref_marginal(&self) -> Vec<f64> {
        self.counts.chunks(self.bins).map(|row| row.iter().sum()).collect()
    }

    pub fn float_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.bins];
        for row in self.counts.chunks(self.bins) {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m
    }

    /// Adds one voxel pair's kernel footprint.
    #[inline]
    pub fn deposit(&mut self, ref_pos: f64, float_pos: f64) {
        let (ra, rw) = basis(ref_pos);
        let (fb, fw) = basis(float_pos);
        for p in 0..4 {
            let row = (ra + p as isize) as usize * self.bins;
            for q in 0..4 {
                self.counts[row + (fb + q as isize) as usize] += rw[0][p] * fw[0][q];
            }
        }
    }

    fn add(&mut self, other: &JointHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `(H(R), H(F), H(R, F))`, natural log, with `0 log 0 = 0`.
    pub fn entropies(&self) -> Result<(f64, f64, f64)> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(Error::DegenerateInput("joint histogram has no mass".into()));
        }
        let h = |it: &mut dyn Iterator<Item = f64>| -> f64 {
            it.filter(|&c| c > 0.0)
                .map(|c| {
                    let p = c / total;
                    -p * p.ln()
                })
                .sum()
        };
        let hr = h(&mut self.ref_marginal().into_iter());
        let hf = h(&mut self.float_marginal().into_iter());
        let hj = h(&mut self.counts.iter().copied());
        Ok((hr, hf, hj))
    }
}

/// Builds a joint histogram from bin positions, skipping pairs whose
/// floating position is `None`. Deterministic for any thread count.
pub(crate) fn accumulate(bins: usize, ref_pos: &[f64], float_pos: &[Option<f64>]) -> JointHistogram {
    let partials: Vec<JointHistogram> = ref_pos
        .par_chunks(CHUNK)
        .zip(float_pos.par_chunks(CHUNK))
        .map(|(r, f)| {
            let mut h = JointHistogram::empty(bins);
            for (&rp, fp) in r.iter().zip(f) {
                if let Some(fp) = fp {
                    h.deposit(rp, *fp);
                }
            }
            h
        })
        .collect();
    let mut total = JointHistogram::empty(bins);
    for p in &partials {
        total.add(p);
    }
    total
}

/// Normalised mutual information `(H(R) + H(F)) / H(R, F)`.
pub fn nmi(h: &JointHistogram) -> Result<f64> {
    let (hr, hf, hj) = h.entropies()?;
    if hj <= 0.0 {
        // single occupied cell: both images constant, perfectly predictive
        return Ok(2.0);
    }
    Ok((hr + hf) / hj)
}

/// NMI together with the table needed for its derivative with respect to a
/// floating bin position.
pub(crate) struct NmiDerivative {
    pub value: f64,
    bins: usize,
    /// d NMI / d count[a][b], up to a constant that cancels because the
    /// kernel derivative sums to zero.
    table: Vec<f64>,
}

impl NmiDerivative {
    pub fn new(h: &JointHistogram) -> Result<Self> {
        let (hr, hf, hj) = h.entropies()?;
        let total = h.total();
        let bins = h.bins;
        if hj <= 0.0 {
            return Ok(Self {
                value: 2.0,
                bins,
                table: vec![0.0; bins * bins],
            });
        }
        let value = (hr + hf) / hj;
        let fm = h.float_marginal();
        let ln_f: Vec<f64> = fm.iter().map(|&c| if c > 0.0 { (c / total).ln() } else { 0.0 }).collect();
        let norm = 1.0 / (total * hj);
        let table = h
            .counts
            .iter()
            .enumerate()
            .map(|(idx, &c)| {
                if c > 0.0 {
                    let b = idx % bins;
                    (-ln_f[b] + value * (c / total).ln()) * norm
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self { value, bins, table })
    }

    /// d NMI / d (floating bin position) for one voxel pair.
    #[inline]
    pub fn d_float_pos(&self, ref_pos: f64, float_pos: f64) -> f64 {
        let (ra, rw) = basis(ref_pos);
        let (fb, fw) = basis(float_pos);
        let mut acc = 0.0;
        for p in 0..4 {
            let row = (ra + p as isize) as usize * self.bins;
            for q in 0..4 {
                acc += self.table[row + (fb + q as isize) as usize] * rw[0][p] * fw[1][q];
            }
        }
        acc
    }
}

/// Kernel footprint weight for a single bin; test helper for hand checks.
pub fn parzen_weight(bin: usize, pos: f64) -> f64 {
    bspline_kernel(pos - bin as f64)
}
