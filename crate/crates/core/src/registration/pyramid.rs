use crate::error::Result;
use crate::objective::engine::LevelGrid;
use crate::volume::{gaussian_smooth, Volume};

/// Pre-smoothing width in voxels of the coarser grid.
pub const SMOOTHING_SIGMA: f64 = 0.7;

/// Downsampling stops once an axis would drop below this many samples.
pub const MIN_LEVEL_DIM: usize = 16;

/// Per-axis subsampling factor for a nominal factor `nominal` (a power of
/// two), reduced where the level grid would get too small.
pub fn level_factors(dims: [usize; 3], nominal: usize) -> [usize; 3] {
    dims.map(|n| {
        let mut f = nominal.max(1);
        while f > 1 && (n - 1) / f + 1 < MIN_LEVEL_DIM {
            f /= 2;
        }
        f
    })
}

/// Smoothed and decimated copy of `vol` on `grid`.
pub fn level_image(vol: &Volume, grid: &LevelGrid) -> Result<Vec<f32>> {
    let f = grid.factors();
    if f == [1, 1, 1] {
        return Ok(vol.data().to_vec());
    }
    let sigma = f.map(|f| if f > 1 { SMOOTHING_SIGMA * f as f64 } else { 0.0 });
    let smooth = gaussian_smooth(vol, sigma)?;
    Ok(grid.decimate(vol.dims(), smooth.data()))
}
