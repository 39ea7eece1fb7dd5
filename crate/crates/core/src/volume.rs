//! Volumetric containers and nearest-neighbour resampling.
//!
//! Every tensor is stored row-major with `d` as the slowest axis and `w` the
//! fastest. Per-class tensors are class-major: all voxels of class 0, then
//! class 1, and so on.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

/// Voxel extents along the depth, height and width axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape3 { d, h, w };
        s.validate()?;
        Ok(s)
    }

    pub const fn cube(n: usize) -> Self {
        Shape3 { d: n, h: n, w: n }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::EmptyExtent);
        }
        Ok(())
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn from_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims[0], dims[1], dims[2])
    }

    #[inline]
    pub const fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.h + j) * self.w + k
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.w;
        let j = (idx / self.w) % self.h;
        let i = idx / (self.w * self.h);
        [i, j, k]
    }

    pub fn contains(&self, other: &Shape3) -> bool {
        other.d <= self.d && other.h <= self.h && other.w <= self.w
    }

    /// Euclidean length of the volume diagonal in voxel units.
    pub fn diagonal(&self) -> f64 {
        let (d, h, w) = (self.d as f64, self.h as f64, self.w as f64);
        crate::math::sqrt(d * d + h * h + w * w)
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Center-aligned nearest-neighbour source index: `floor((i + 0.5) * src / dst)`,
/// evaluated in exact integer arithmetic and clamped to `src - 1`.
#[inline]
pub fn center_index(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Per-axis lookup tables mapping destination coordinates to source coordinates.
pub(crate) fn axis_tables(src: Shape3, dst: Shape3) -> [Vec<usize>; 3] {
    let table = |s: usize, t: usize| (0..t).map(|i| center_index(i, s, t)).collect::<Vec<_>>();
    [table(src.d, dst.d), table(src.h, dst.h), table(src.w, dst.w)]
}

/// Maps each destination voxel to its nearest source voxel (flat indices).
pub(crate) fn resample_map(src: Shape3, dst: Shape3) -> Vec<usize> {
    let [td, th, tw] = axis_tables(src, dst);
    let mut out = Vec::with_capacity(dst.len());
    for &si in &td {
        for &sj in &th {
            for &sk in &tw {
                out.push(src.index(si, sj, sk));
            }
        }
    }
    out
}

/// Real-valued scalar volume (image intensities).
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVolume {
    shape: Shape3,
    data: Vec<f32>,
}

impl IntensityVolume {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::PayloadMismatch {
                expected: shape.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(IntensityVolume { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> f32) -> Result<Self> {
        shape.validate()?;
        let data = (0..shape.len()).map(|i| f(shape.coords(i))).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.shape.index(i, j, k)]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Population mean and standard deviation, accumulated in `f64`.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, crate::math::sqrt(var))
    }
}

/// Integer class map with ids in `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    num_classes: usize,
    data: Vec<u8>,
}

pub(crate) fn check_num_classes(n: usize) -> Result<()> {
    if !(2..=256).contains(&n) {
        return Err(Error::InvalidNumClasses(n));
    }
    Ok(())
}

impl LabelVolume {
    pub fn new(shape: Shape3, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        shape.validate()?;
        check_num_classes(num_classes)?;
        if data.len() != shape.len() {
            return Err(Error::PayloadMismatch {
                expected: shape.len(),
                found: data.len(),
            });
        }
        if let Some(&value) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { value, num_classes });
        }
        Ok(LabelVolume {
            shape,
            num_classes,
            data,
        })
    }

    pub fn filled(shape: Shape3, num_classes: usize, class: u8) -> Result<Self> {
        shape.validate()?;
        Self::new(shape, num_classes, vec![class; shape.len()])
    }

    pub fn from_fn(
        shape: Shape3,
        num_classes: usize,
        mut f: impl FnMut([usize; 3]) -> u8,
    ) -> Result<Self> {
        shape.validate()?;
        let data = (0..shape.len()).map(|i| f(shape.coords(i))).collect();
        Self::new(shape, num_classes, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.shape.index(i, j, k)]
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Binary mask of voxels carrying `class`.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// Fraction of voxels with a non-zero class.
    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64
    }

    /// Voxel count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Per-voxel class probabilities, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    shape: Shape3,
    num_classes: usize,
    data: Vec<f64>,
}

/// Tolerance for the per-voxel sum-to-one check.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

impl ProbVolume {
    pub fn new(shape: Shape3, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        check_num_classes(num_classes)?;
        let n = shape.len();
        if data.len() != n * num_classes {
            return Err(Error::PayloadMismatch {
                expected: n * num_classes,
                found: data.len(),
            });
        }
        for &p in &data {
            if !p.is_finite() {
                return Err(Error::NonFinite);
            }
            if !(-PROB_SUM_TOLERANCE..=1.0 + PROB_SUM_TOLERANCE).contains(&p) {
                return Err(Error::ProbabilityOutOfRange(p));
            }
        }
        for v in 0..n {
            let s: f64 = (0..num_classes).map(|c| data[c * n + v]).sum();
            if (s - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::ProbabilityNotNormalized(s));
            }
        }
        Ok(ProbVolume {
            shape,
            num_classes,
            data,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn prob(&self, class: usize, voxel: usize) -> f64 {
        self.data[class * self.shape.len() + voxel]
    }

    /// Copies the class distribution at `voxel` into `out`.
    pub fn voxel(&self, voxel: usize, out: &mut [f64]) {
        let n = self.shape.len();
        for (c, o) in out.iter_mut().enumerate().take(self.num_classes) {
            *o = self.data[c * n + voxel];
        }
    }

    /// Hard labels by per-voxel argmax (lowest class wins ties).
    pub fn argmax_labels(&self) -> LabelVolume {
        let n = self.shape.len();
        let mut buf = vec![0.0; self.num_classes];
        let data = (0..n)
            .map(|v| {
                self.voxel(v, &mut buf);
                crate::math::argmax(&buf) as u8
            })
            .collect();
        LabelVolume {
            shape: self.shape,
            num_classes: self.num_classes,
            data,
        }
    }
}

/// Per-class real field (e.g. similarity maps), class-major. Values may be
/// `-inf` for classes that must never win.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMaps {
    shape: Shape3,
    num_classes: usize,
    data: Vec<f64>,
}

impl ClassMaps {
    pub fn new(shape: Shape3, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if num_classes == 0 {
            return Err(Error::InvalidNumClasses(0));
        }
        if data.len() != shape.len() * num_classes {
            return Err(Error::PayloadMismatch {
                expected: shape.len() * num_classes,
                found: data.len(),
            });
        }
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite);
        }
        Ok(ClassMaps {
            shape,
            num_classes,
            data,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn value(&self, class: usize, voxel: usize) -> f64 {
        self.data[class * self.shape.len() + voxel]
    }
}

/// Nearest-neighbour label downsampling onto a coarser lattice.
pub fn nearest_downsample_labels(labels: &LabelVolume, target: Shape3) -> Result<LabelVolume> {
    target.validate()?;
    let source = labels.shape;
    if !source.contains(&target) {
        return Err(Error::TargetLarger { source, target });
    }
    Ok(resample_labels_unchecked(labels, target))
}

/// Nearest-neighbour resampling of a label volume to any shape.
pub fn resample_labels(labels: &LabelVolume, target: Shape3) -> Result<LabelVolume> {
    target.validate()?;
    Ok(resample_labels_unchecked(labels, target))
}

fn resample_labels_unchecked(labels: &LabelVolume, target: Shape3) -> LabelVolume {
    let data = resample_map(labels.shape, target)
        .into_iter()
        .map(|s| labels.data[s])
        .collect();
    LabelVolume {
        shape: target,
        num_classes: labels.num_classes,
        data,
    }
}

/// Nearest-neighbour upsampling of per-class maps onto a finer lattice.
pub fn nearest_upsample_maps(maps: &ClassMaps, target: Shape3) -> Result<ClassMaps> {
    target.validate()?;
    let source = maps.shape;
    if !target.contains(&source) {
        return Err(Error::TargetSmaller { source, target });
    }
    let map = resample_map(source, target);
    let n_src = source.len();
    let mut data = Vec::with_capacity(target.len() * maps.num_classes);
    for c in 0..maps.num_classes {
        let plane = &maps.data[c * n_src..(c + 1) * n_src];
        data.extend(map.iter().map(|&s| plane[s]));
    }
    Ok(ClassMaps {
        shape: target,
        num_classes: maps.num_classes,
        data,
    })
}
