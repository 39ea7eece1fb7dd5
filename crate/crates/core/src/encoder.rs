//! Dense patch features and pooled global descriptors.
//!
//! The built-in encoder is a deterministic patch-statistics extractor. It
//! z-scores the volume, tiles it into non-overlapping `P^3` patches (edge
//! patches are truncated) and emits, per patch:
//!
//! | channel | content                                  |
//! |---------|------------------------------------------|
//! | 0       | mean                                     |
//! | 1       | population standard deviation            |
//! | 2       | minimum                                  |
//! | 3       | maximum                                  |
//! | 4       | median (mean of the two middle values)   |
//! | 5..=7   | mean absolute gradient along x, y, z     |
//! | 8..=10  | weighted patch-center position (d, h, w) |
//!
//! Here x is the `w` axis, y the `h` axis and z the `d` axis. Gradients are
//! central differences on the whole volume, one-sided at the borders.
//! Grids produced elsewhere can be ingested through [`FeatureGrid::from_external`].

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{l2_norm, sqrt};
use crate::volume::{IntensityVolume, Shape3};
use crate::{Error, Result};

pub const STAT_CHANNELS: usize = 8;
pub const POSITION_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EncoderParams {
    pub patch_size: usize,
    pub include_position: bool,
    pub position_weight: f64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        EncoderParams {
            patch_size: 8,
            include_position: true,
            position_weight: 0.25,
        }
    }
}

impl EncoderParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::InvalidParameter("patch size must be at least 2"));
        }
        if !(self.position_weight >= 0.0 && self.position_weight.is_finite()) {
            return Err(Error::InvalidParameter("position weight must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        if self.include_position {
            STAT_CHANNELS + POSITION_CHANNELS
        } else {
            STAT_CHANNELS
        }
    }
}

/// `C` channels over a `D' x H' x W'` lattice, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    grid_shape: Shape3,
    patch_size: [usize; 3],
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        channels: usize,
        grid_shape: Shape3,
        patch_size: [usize; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        grid_shape.validate()?;
        if channels == 0 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                found: 0,
            });
        }
        if patch_size.contains(&0) {
            return Err(Error::InvalidParameter("patch size must be positive"));
        }
        let expected = channels * grid_shape.len();
        if data.len() != expected {
            return Err(Error::PayloadMismatch {
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(FeatureGrid {
            channels,
            grid_shape,
            patch_size,
            data,
        })
    }

    /// Wraps a grid computed outside this crate. The patch size is inferred
    /// per axis as `ceil(volume extent / grid extent)`.
    pub fn from_external(
        channels: usize,
        grid_shape: Shape3,
        data: Vec<f32>,
        volume_shape: Shape3,
    ) -> Result<Self> {
        grid_shape.validate()?;
        volume_shape.validate()?;
        if !volume_shape.contains(&grid_shape) {
            return Err(Error::GridLargerThanVolume {
                grid: grid_shape,
                volume: volume_shape,
            });
        }
        let v = volume_shape.dims();
        let g = grid_shape.dims();
        let patch = [
            v[0].div_ceil(g[0]),
            v[1].div_ceil(g[1]),
            v[2].div_ceil(g[2]),
        ];
        Self::new(channels, grid_shape, patch, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid_shape(&self) -> Shape3 {
        self.grid_shape
    }

    pub fn patch_size(&self) -> [usize; 3] {
        self.patch_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn value(&self, channel: usize, cell: usize) -> f32 {
        self.data[channel * self.grid_shape.len() + cell]
    }

    /// Copies the feature vector of `cell` into `out[..channels]`.
    #[inline]
    pub fn cell_vector(&self, cell: usize, out: &mut [f64]) {
        let n = self.grid_shape.len();
        for (c, o) in out[..self.channels].iter_mut().enumerate() {
            *o = self.data[c * n + cell] as f64;
        }
    }
}

/// Checks that all grids share one channel count and returns it.
pub fn check_channel_consistency<'a>(
    grids: impl IntoIterator<Item = &'a FeatureGrid>,
) -> Result<Option<usize>> {
    let mut seen = None;
    for g in grids {
        match seen {
            None => seen = Some(g.channels),
            Some(c) if c != g.channels => {
                return Err(Error::ChannelMismatch {
                    expected: c,
                    found: g.channels,
                })
            }
            _ => {}
        }
    }
    Ok(seen)
}

/// Per-volume z-scored intensities; a constant volume maps to all zeros.
pub fn zscore(vol: &IntensityVolume) -> Vec<f64> {
    let (mean, std) = vol.mean_std();
    if std > 0.0 {
        vol.data().iter().map(|&v| (v as f64 - mean) / std).collect()
    } else {
        vec![0.0; vol.data().len()]
    }
}

fn abs_gradient(z: &[f64], shape: Shape3, axis: usize) -> Vec<f64> {
    let dims = shape.dims();
    let n = dims[axis];
    let stride = match axis {
        0 => shape.h * shape.w,
        1 => shape.w,
        _ => 1,
    };
    let mut out = vec![0.0; z.len()];
    if n == 1 {
        return out;
    }
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = shape.coords(idx)[axis];
        let g = if pos == 0 {
            z[idx + stride] - z[idx]
        } else if pos == n - 1 {
            z[idx] - z[idx - stride]
        } else {
            (z[idx + stride] - z[idx - stride]) * 0.5
        };
        *o = g.abs();
    }
    out
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) * 0.5
    }
}

/// Built-in deterministic encoder.
pub fn extract_feature_grid(vol: &IntensityVolume, params: &EncoderParams) -> Result<FeatureGrid> {
    params.validate()?;
    let shape = vol.shape();
    let p = params.patch_size;
    let grid_shape = Shape3::new(shape.d.div_ceil(p), shape.h.div_ceil(p), shape.w.div_ceil(p))?;
    let z = zscore(vol);
    // gradient channel order is x (w), y (h), z (d)
    let grads = [
        abs_gradient(&z, shape, 2),
        abs_gradient(&z, shape, 1),
        abs_gradient(&z, shape, 0),
    ];

    let channels = params.channels();
    let cells = grid_shape.len();
    let mut data = vec![0.0f32; channels * cells];
    let mut patch = Vec::with_capacity(p * p * p);
    let mut members = Vec::with_capacity(p * p * p);

    for cell in 0..cells {
        let [gi, gj, gk] = grid_shape.coords(cell);
        let lo = [gi * p, gj * p, gk * p];
        let hi = [
            (lo[0] + p).min(shape.d),
            (lo[1] + p).min(shape.h),
            (lo[2] + p).min(shape.w),
        ];
        patch.clear();
        members.clear();
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    let idx = shape.index(i, j, k);
                    members.push(idx);
                    patch.push(z[idx]);
                }
            }
        }
        let n = patch.len() as f64;
        let mean = patch.iter().sum::<f64>() / n;
        let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        patch.sort_by(f64::total_cmp);
        let min = patch[0];
        let max = patch[patch.len() - 1];
        let median = median_sorted(&patch);
        let mut stats = [mean, sqrt(var), min, max, median, 0.0, 0.0, 0.0];
        for (a, g) in grads.iter().enumerate() {
            stats[5 + a] = members.iter().map(|&m| g[m]).sum::<f64>() / n;
        }
        for (c, s) in stats.iter().enumerate() {
            data[c * cells + cell] = *s as f32;
        }
        if params.include_position {
            let extents = shape.dims();
            for a in 0..3 {
                let center = (lo[a] + hi[a]) as f64 * 0.5;
                let v = params.position_weight * center / extents[a] as f64;
                data[(STAT_CHANNELS + a) * cells + cell] = v as f32;
            }
        }
    }
    FeatureGrid::new(channels, grid_shape, [p, p, p], data)
}

/// Unit-norm pooled descriptor of one volume.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GlobalFeature {
    pub vector: Vec<f64>,
    /// Set when the pooled vector was exactly zero and could not be normalized.
    pub degenerate: bool,
}

impl GlobalFeature {
    pub fn dot(&self, other: &GlobalFeature) -> f64 {
        crate::math::dot(&self.vector, &other.vector)
    }
}

/// Global average pooling over all cells followed by L2 normalization.
pub fn global_feature(grid: &FeatureGrid) -> GlobalFeature {
    let cells = grid.grid_shape.len();
    let mut vector: Vec<f64> = (0..grid.channels)
        .map(|c| {
            grid.data[c * cells..(c + 1) * cells]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / cells as f64
        })
        .collect();
    let norm = l2_norm(&vector);
    if norm == 0.0 {
        return GlobalFeature {
            vector,
            degenerate: true,
        };
    }
    for v in vector.iter_mut() {
        *v /= norm;
    }
    GlobalFeature {
        vector,
        degenerate: false,
    }
}
