//! Slice-wise tumor detection and the volume-level incumbent search.
//!
//! Each axial slice is (optionally) histogram-equalized, thresholded, dilated
//! with a square structuring element and split into 8-connected objects;
//! objects under `area_thresh` pixels are discarded and the bounding boxes of
//! the survivors become candidates. Candidates are then folded in slice order:
//! a candidate replaces the incumbent only if its box area is larger *and* its
//! box contains the incumbent's box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{
    minmax_normalize, BoundingBox3D, LabelVolume, Modality, MultiModalVolume, Volume3D, VolumeError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error("histogram is degenerate: the slice is constant")]
    DegenerateHistogram,
    #[error("no slice produced a tumor candidate")]
    NoTumor,
    #[error("invalid detection parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Slice2D {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, VolumeError> {
        if height * width != data.len() {
            return Err(VolumeError::DataLength {
                len: data.len(),
                dims: [1, height, width],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask2D {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask2D {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self, VolumeError> {
        if height * width != bits.len() {
            return Err(VolumeError::DataLength {
                len: bits.len(),
                dims: [1, height, width],
            });
        }
        Ok(Self {
            height,
            width,
            bits: bits.into_iter().map(|b| (b != 0) as u8).collect(),
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

/// Inclusive `(row, col)` extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub min: [usize; 2],
    pub max: [usize; 2],
}

impl BoundingBox2D {
    pub fn area(&self) -> usize {
        (self.max[0] + 1 - self.min[0]) * (self.max[1] + 1 - self.min[1])
    }

    pub fn contains(&self, other: &BoundingBox2D) -> bool {
        self.min[0] <= other.min[0]
            && self.min[1] <= other.min[1]
            && self.max[0] >= other.max[0]
            && self.max[1] >= other.max[1]
    }

    pub fn intersects(&self, other: &BoundingBox2D) -> bool {
        self.min[0] <= other.max[0]
            && other.min[0] <= self.max[0]
            && self.min[1] <= other.max[1]
            && other.min[1] <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectedObject {
    /// 1-based label in the component map.
    pub label: u32,
    pub area: usize,
    pub bbox: BoundingBox2D,
}

/// Component map (0 = background) and the objects it contains, in scanline order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub height: usize,
    pub width: usize,
    pub map: Vec<u32>,
    pub objects: Vec<DetectedObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Fixed,
    Otsu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub mode: ThresholdMode,
    /// Fixed-mode threshold on the normalized (or equalized) intensity scale.
    pub thresh: f32,
    pub area_thresh: usize,
    pub dilation_radius: usize,
    pub bins: usize,
    /// Histogram-equalize each slice before thresholding.
    pub equalize: bool,
    /// Modality the detector runs on.
    pub modality: Modality,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Fixed,
            thresh: 0.65,
            area_thresh: 64,
            dilation_radius: 1,
            bins: 256,
            equalize: false,
            modality: Modality::Flair,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.area_thresh < 1 {
            return Err(DetectError::InvalidParams(
                "area_thresh must be at least 1".into(),
            ));
        }
        if self.bins < 2 {
            return Err(DetectError::InvalidParams("bins must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.thresh) {
            return Err(DetectError::InvalidParams(format!(
                "thresh {} outside [0, 1]",
                self.thresh
            )));
        }
        Ok(())
    }
}

struct Histogram {
    lo: f32,
    width: f32,
    counts: Vec<usize>,
}

impl Histogram {
    /// `None` for constant or empty slices.
    fn of(s: &Slice2D, bins: usize) -> Option<Self> {
        let (lo, hi) = s.range();
        if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            return None;
        }
        let width = (hi - lo) / bins as f32;
        let mut counts = vec![0usize; bins];
        for &v in &s.data {
            counts[Self::bin(v, lo, hi, bins)] += 1;
        }
        Some(Self { lo, width, counts })
    }

    #[inline]
    fn bin(v: f32, lo: f32, hi: f32, bins: usize) -> usize {
        (((v - lo) / (hi - lo) * bins as f32) as usize).min(bins - 1)
    }
}

/// Maps each pixel to the cumulative histogram of its bin, rescaled so the
/// lowest occupied bin maps to 0 and the highest to 1. Constant slices map to 0.
pub fn equalize_histogram(s: &Slice2D, bins: usize) -> Slice2D {
    let Some(hist) = Histogram::of(s, bins.max(2)) else {
        return Slice2D {
            data: vec![0.0; s.data.len()],
            ..s.clone()
        };
    };
    let bins = hist.counts.len();
    let mut cdf = Vec::with_capacity(bins);
    let mut acc = 0usize;
    for &c in &hist.counts {
        acc += c;
        cdf.push(acc);
    }
    let total = acc;
    let cdf_min = cdf[0];
    let (lo, hi) = s.range();
    let data = if total == cdf_min {
        vec![0.0; s.data.len()]
    } else {
        let denom = (total - cdf_min) as f64;
        s.data
            .iter()
            .map(|&v| ((cdf[Histogram::bin(v, lo, hi, bins)] - cdf_min) as f64 / denom) as f32)
            .collect()
    };
    Slice2D { data, ..s.clone() }
}

/// Bin boundary maximizing the between-class variance of the slice histogram.
pub fn otsu_threshold(s: &Slice2D, bins: usize) -> Result<f32, DetectError> {
    let hist = Histogram::of(s, bins.max(2)).ok_or(DetectError::DegenerateHistogram)?;
    let total = s.data.len() as f64;
    let centers: Vec<f64> = (0..hist.counts.len())
        .map(|k| hist.lo as f64 + (k as f64 + 0.5) * hist.width as f64)
        .collect();
    let grand: f64 = hist
        .counts
        .iter()
        .zip(&centers)
        .map(|(&c, &m)| c as f64 * m)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_k, mut best_var) = (1, f64::NEG_INFINITY);
    for k in 1..hist.counts.len() {
        w0 += hist.counts[k - 1] as f64;
        sum0 += hist.counts[k - 1] as f64 * centers[k - 1];
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (grand - sum0) / w1);
        let var = (w0 / total) * (w1 / total) * (m0 - m1).powi(2);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    Ok(hist.lo + best_k as f32 * hist.width)
}

/// Pixels strictly brighter than `t`.
pub fn threshold_slice(s: &Slice2D, t: f32) -> BinaryMask2D {
    BinaryMask2D {
        height: s.height,
        width: s.width,
        bits: s.data.iter().map(|&v| (v > t) as u8).collect(),
    }
}

/// Dilation by a `(2r+1) × (2r+1)` square, applied as separable row and column max filters.
pub fn dilate(m: &BinaryMask2D, radius: usize) -> BinaryMask2D {
    if radius == 0 {
        return m.clone();
    }
    let (h, w) = (m.height, m.width);
    let mut rows = vec![0u8; h * w];
    for r in 0..h {
        let src = &m.bits[r * w..(r + 1) * w];
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows[r * w + c] = src[lo..=hi].iter().copied().max().unwrap_or(0);
        }
    }
    let mut bits = vec![0u8; h * w];
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            bits[r * w + c] = (lo..=hi).map(|rr| rows[rr * w + c]).max().unwrap_or(0);
        }
    }
    BinaryMask2D {
        height: h,
        width: w,
        bits,
    }
}

/// 8-connected components, labeled in order of each component's first pixel in raster scan.
pub fn connected_components(m: &BinaryMask2D) -> Labeling {
    let (h, w) = (m.height, m.width);
    let mut map = vec![0u32; h * w];
    let mut objects = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if m.bits[start] == 0 || map[start] != 0 {
            continue;
        }
        let label = objects.len() as u32 + 1;
        let (sr, sc) = (start / w, start % w);
        let mut obj = DetectedObject {
            label,
            area: 0,
            bbox: BoundingBox2D {
                min: [sr, sc],
                max: [sr, sc],
            },
        };
        map[start] = label;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            obj.area += 1;
            obj.bbox.min = [obj.bbox.min[0].min(r), obj.bbox.min[1].min(c)];
            obj.bbox.max = [obj.bbox.max[0].max(r), obj.bbox.max[1].max(c)];
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let q = rr * w + cc;
                    if m.bits[q] != 0 && map[q] == 0 {
                        map[q] = label;
                        stack.push(q);
                    }
                }
            }
        }
        objects.push(obj);
    }
    Labeling {
        height: h,
        width: w,
        map,
        objects,
    }
}

/// Clears every object whose area is strictly below `area_thresh`.
pub fn remove_small_objects(
    labeling: &Labeling,
    mask: &BinaryMask2D,
    area_thresh: usize,
) -> BinaryMask2D {
    let small: Vec<bool> = std::iter::once(false)
        .chain(labeling.objects.iter().map(|o| o.area < area_thresh))
        .collect();
    let mut out = mask.clone();
    for (bit, &label) in out.bits.iter_mut().zip(&labeling.map) {
        if label != 0 && small[label as usize] {
            *bit = 0;
        }
    }
    out
}

/// Candidate boxes of one slice. Otsu mode on a constant slice yields no candidates.
pub fn detect_slice(s: &Slice2D, p: &DetectParams) -> Vec<BoundingBox2D> {
    let prepared = if p.equalize {
        equalize_histogram(s, p.bins)
    } else {
        s.clone()
    };
    let t = match p.mode {
        ThresholdMode::Fixed => p.thresh,
        ThresholdMode::Otsu => match otsu_threshold(&prepared, p.bins) {
            Ok(t) => t,
            Err(_) => return Vec::new(),
        },
    };
    let mask = dilate(&threshold_slice(&prepared, t), p.dilation_radius);
    let labeling = connected_components(&mask);
    labeling
        .objects
        .iter()
        .filter(|o| o.area >= p.area_thresh)
        .map(|o| o.bbox)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeDetection {
    pub bbox: BoundingBox3D,
    pub per_slice_candidates: Vec<usize>,
}

/// Folds slice candidates `(z, box)` in order with the larger-and-containing rule.
pub fn select_incumbent(candidates: &[(usize, BoundingBox2D)]) -> Option<BoundingBox2D> {
    let (_, first) = candidates.first()?;
    let mut incumbent = *first;
    for (_, cand) in &candidates[1..] {
        if cand.area() > incumbent.area() && cand.contains(&incumbent) {
            incumbent = *cand;
        }
    }
    Some(incumbent)
}

/// Runs detection on every axial slice of the min-max normalized volume and
/// lifts the final incumbent to 3D, spanning the slices whose candidates
/// intersect it.
pub fn detect_tumor_volume(v: &Volume3D, p: &DetectParams) -> Result<VolumeDetection, DetectError> {
    p.validate()?;
    let norm = minmax_normalize(v);
    let [d, h, w] = norm.dims();
    let per_slice: Vec<Vec<BoundingBox2D>> = (0..d)
        .into_par_iter()
        .map(|z| {
            let s = Slice2D::new(h, w, norm.slice_z(z).to_vec()).expect("slice dims");
            detect_slice(&s, p)
        })
        .collect();
    let candidates: Vec<(usize, BoundingBox2D)> = per_slice
        .iter()
        .enumerate()
        .flat_map(|(z, boxes)| boxes.iter().map(move |b| (z, *b)))
        .collect();
    let incumbent = select_incumbent(&candidates).ok_or(DetectError::NoTumor)?;
    let slices: Vec<usize> = candidates
        .iter()
        .filter(|(_, b)| b.intersects(&incumbent))
        .map(|(z, _)| *z)
        .collect();
    let z_min = *slices.iter().min().expect("incumbent intersects itself");
    let z_max = *slices.iter().max().expect("incumbent intersects itself");
    Ok(VolumeDetection {
        bbox: BoundingBox3D {
            min: [z_min, incumbent.min[0], incumbent.min[1]],
            max: [z_max, incumbent.max[0], incumbent.max[1]],
        },
        per_slice_candidates: per_slice.iter().map(Vec::len).collect(),
    })
}

/// Crops all modalities and the mask to `bbox` grown by `margin` voxels per face.
pub fn crop_to_tumor(
    m: &MultiModalVolume,
    l: &LabelVolume,
    bbox: &BoundingBox3D,
    margin: usize,
) -> Result<(MultiModalVolume, LabelVolume), VolumeError> {
    let dims = m.dims();
    if !bbox.fits(dims) || l.dims() != dims {
        return Err(VolumeError::OutOfBounds { bbox: *bbox, dims });
    }
    let grown = bbox.expand(margin, dims);
    let cropped = m.try_map(|v| crate::volume::crop(v, &grown))?;
    Ok((cropped, l.crop(&grown)?))
}

/// Per-case detection record emitted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub case: String,
    pub bbox: BoundingBox3D,
    pub per_slice_candidates: Vec<usize>,
    pub params: DetectParams,
}
