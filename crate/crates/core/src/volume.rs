//! Dense 3D volumes and the preprocessing primitives applied to them.
//!
//! Voxels are stored z-major with x fastest: index `(z * height + y) * width + x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp;
use crate::tensor::Tensor;

pub const NUM_MODALITIES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VolumeError {
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { len: usize, dims: [usize; 3] },
    #[error("bounding box {bbox:?} is outside volume dims {dims:?}")]
    OutOfBounds {
        bbox: BoundingBox3D,
        dims: [usize; 3],
    },
    #[error("volume has no nonzero voxels")]
    EmptyContent,
    #[error("modality dims differ: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("label {label} at voxel {index} is not a valid class (< {num_classes})")]
    InvalidLabel {
        label: u32,
        index: usize,
        num_classes: usize,
    },
    #[error("target dims {0:?} must be positive")]
    InvalidTarget([usize; 3]),
}

/// Inclusive voxel extents, `(z, y, x)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox3D {
    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            min: [0; 3],
            max: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] + 1 - self.min[a])
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= self.max[a] && self.max[a] < dims[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    /// Grows every face by `margin` voxels, clamped to `[0, dims - 1]`.
    pub fn expand(&self, margin: usize, dims: [usize; 3]) -> Self {
        Self {
            min: self.min.map(|m| m.saturating_sub(margin)),
            max: [0, 1, 2].map(|a| (self.max[a] + margin).min(dims[a] - 1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    data: Vec<f32>,
    spacing: Option<[f32; 3]>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(VolumeError::DataLength {
                len: data.len(),
                dims,
            });
        }
        Ok(Self {
            dims,
            data,
            spacing: None,
        })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
            spacing: None,
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self {
            dims,
            data,
            spacing: None,
        }
    }

    pub fn with_spacing(mut self, spacing: Option<[f32; 3]>) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Option<[f32; 3]> {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Axial slice `z` as a row-major `height × width` buffer.
    pub fn slice_z(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

fn crop_buffer<V: Copy>(data: &[V], dims: [usize; 3], bbox: &BoundingBox3D) -> Vec<V> {
    let [ed, eh, ew] = bbox.extent();
    let mut out = Vec::with_capacity(ed * eh * ew);
    for z in bbox.min[0]..=bbox.max[0] {
        for y in bbox.min[1]..=bbox.max[1] {
            let row = (z * dims[1] + y) * dims[2];
            out.extend_from_slice(&data[row + bbox.min[2]..=row + bbox.max[2]]);
        }
    }
    out
}

pub fn crop(v: &Volume3D, bbox: &BoundingBox3D) -> Result<Volume3D, VolumeError> {
    if !bbox.fits(v.dims) {
        return Err(VolumeError::OutOfBounds {
            bbox: *bbox,
            dims: v.dims,
        });
    }
    Ok(Volume3D {
        dims: bbox.extent(),
        data: crop_buffer(&v.data, v.dims, bbox),
        spacing: v.spacing,
    })
}

/// `(v − min) / (max − min)`; a constant volume maps to all zeros.
pub fn minmax_normalize(v: &Volume3D) -> Volume3D {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        v.data.iter().map(|&x| (x - lo) / range).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume3D { data, ..v.clone() }
}

pub const ZSCORE_EPS: f64 = 1e-8;

/// `(v − μ) / (σ + ε)`; moments come from nonzero voxels only when `nonzero_only` is set.
pub fn zscore_normalize(v: &Volume3D, nonzero_only: bool) -> Volume3D {
    let sample: Vec<f64> = v
        .data
        .iter()
        .filter(|&&x| !nonzero_only || x != 0.0)
        .map(|&x| x as f64)
        .collect();
    let (mean, std) = if sample.is_empty() {
        (0.0, 0.0)
    } else {
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - mean) / (std + ZSCORE_EPS)) as f32)
        .collect();
    Volume3D { data, ..v.clone() }
}

/// Align-corners trilinear resampling to `target` dims.
pub fn resize_trilinear(v: &Volume3D, target: [usize; 3]) -> Result<Volume3D, VolumeError> {
    if target.contains(&0) {
        return Err(VolumeError::InvalidTarget(target));
    }
    let data = if target == v.dims {
        v.data.clone()
    } else {
        interp::resize_block(&v.data, v.dims, target)
    };
    Ok(Volume3D {
        dims: target,
        data,
        spacing: v
            .spacing
            .map(|s| [0, 1, 2].map(|a| s[a] * v.dims[a] as f32 / target[a] as f32)),
    })
}

/// The four co-registered modalities of one case, in `[T1, T1ce, T2, FLAIR]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    modalities: [Volume3D; NUM_MODALITIES],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] =
        [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

impl MultiModalVolume {
    pub fn new(modalities: [Volume3D; NUM_MODALITIES]) -> Result<Self, VolumeError> {
        let dims = modalities[0].dims();
        for m in &modalities[1..] {
            if m.dims() != dims {
                return Err(VolumeError::DimsMismatch(dims, m.dims()));
            }
        }
        Ok(Self { modalities })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims()
    }

    pub fn modality(&self, m: Modality) -> &Volume3D {
        &self.modalities[m.index()]
    }

    pub fn modalities(&self) -> &[Volume3D; NUM_MODALITIES] {
        &self.modalities
    }

    pub fn map(&self, f: impl Fn(&Volume3D) -> Volume3D) -> Result<Self, VolumeError> {
        Self::new(self.modalities.each_ref().map(f))
    }

    pub fn try_map(
        &self,
        f: impl Fn(&Volume3D) -> Result<Volume3D, VolumeError>,
    ) -> Result<Self, VolumeError> {
        let [a, b, c, d] = self.modalities.each_ref().map(f);
        Self::new([a?, b?, c?, d?])
    }

    /// Channel stack of shape `(4, D, H, W)`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims();
        let mut data = Vec::with_capacity(NUM_MODALITIES * d * h * w);
        for m in &self.modalities {
            data.extend_from_slice(m.data());
        }
        Tensor::new(vec![NUM_MODALITIES, d, h, w], data).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, VolumeError> {
        let &[c, d, h, w] = t.shape() else {
            return Err(VolumeError::DataLength {
                len: t.len(),
                dims: [0; 3],
            });
        };
        if c != NUM_MODALITIES {
            return Err(VolumeError::DataLength {
                len: t.len(),
                dims: [d, h, w],
            });
        }
        let plane = d * h * w;
        let vols = [0, 1, 2, 3].map(|i| {
            Volume3D::new([d, h, w], t.data()[i * plane..(i + 1) * plane].to_vec()).expect("dims")
        });
        Self::new(vols)
    }
}

/// Tight box around voxels that are nonzero in any modality.
pub fn nonzero_bbox(m: &MultiModalVolume) -> Result<BoundingBox3D, VolumeError> {
    let [d, h, w] = m.dims();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for z in 0..d {
        for y in 0..h {
            let row = (z * h + y) * w;
            for x in 0..w {
                if m.modalities.iter().any(|v| v.data[row + x] != 0.0) {
                    any = true;
                    for (a, c) in [z, y, x].into_iter().enumerate() {
                        min[a] = min[a].min(c);
                        max[a] = max[a].max(c);
                    }
                }
            }
        }
    }
    if !any {
        return Err(VolumeError::EmptyContent);
    }
    Ok(BoundingBox3D { min, max })
}

pub const NUM_CLASSES: usize = 4;

/// Per-voxel class ids: 0 background, 1 necrotic/non-enhancing core, 2 edema,
/// 3 enhancing tumor (stored as 4 in BraTS files).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self, VolumeError> {
        if dims.iter().product::<usize>() != labels.len() {
            return Err(VolumeError::DataLength {
                len: labels.len(),
                dims,
            });
        }
        if let Some((index, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= NUM_CLASSES)
        {
            return Err(VolumeError::InvalidLabel {
                label: l as u32,
                index,
                num_classes: NUM_CLASSES,
            });
        }
        Ok(Self { dims, labels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            labels: vec![0; dims.iter().product()],
        }
    }

    /// Converts raw BraTS label values `{0, 1, 2, 4}` to contiguous ids, mapping 4 to 3.
    pub fn from_brats(dims: [usize; 3], raw: &[f32]) -> Result<Self, VolumeError> {
        let labels = raw
            .iter()
            .enumerate()
            .map(|(index, &v)| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                2.0 => Ok(2),
                3.0 | 4.0 => Ok(3),
                v => Err(VolumeError::InvalidLabel {
                    label: v as u32,
                    index,
                    num_classes: NUM_CLASSES,
                }),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Self::new(dims, labels)
    }

    /// Raw BraTS values (3 written back as 4).
    pub fn to_brats(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|&l| if l == 3 { 4 } else { l })
            .collect()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn crop(&self, bbox: &BoundingBox3D) -> Result<Self, VolumeError> {
        if !bbox.fits(self.dims) {
            return Err(VolumeError::OutOfBounds {
                bbox: *bbox,
                dims: self.dims,
            });
        }
        Ok(Self {
            dims: bbox.extent(),
            labels: crop_buffer(&self.labels, self.dims, bbox),
        })
    }

    /// Nearest-neighbour resampling on the same align-corners grid as [`resize_trilinear`].
    pub fn resize_nearest(&self, target: [usize; 3]) -> Result<Self, VolumeError> {
        if target.contains(&0) {
            return Err(VolumeError::InvalidTarget(target));
        }
        let src = |a: usize| -> Vec<usize> {
            (0..target[a])
                .map(|i| {
                    if target[a] == 1 || self.dims[a] == 1 {
                        0
                    } else {
                        let c = i as f64 * (self.dims[a] - 1) as f64 / (target[a] - 1) as f64;
                        (c.round() as usize).min(self.dims[a] - 1)
                    }
                })
                .collect()
        };
        let (zs, ys, xs) = (src(0), src(1), src(2));
        let mut labels = Vec::with_capacity(target.iter().product());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    labels.push(self.get(z, y, x));
                }
            }
        }
        Ok(Self {
            dims: target,
            labels,
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims;
        Tensor::new(
            vec![1, d, h, w],
            self.labels.iter().map(|&l| l as f32).collect(),
        )
        .expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, VolumeError> {
        let dims = match t.shape() {
            &[1, d, h, w] | &[d, h, w] => [d, h, w],
            _ => {
                return Err(VolumeError::DataLength {
                    len: t.len(),
                    dims: [0; 3],
                })
            }
        };
        let labels = t
            .data()
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                if v >= 0.0 && v < NUM_CLASSES as f32 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(VolumeError::InvalidLabel {
                        label: v as u32,
                        index,
                        num_classes: NUM_CLASSES,
                    })
                }
            })
            .collect::<Result<_, _>>()?;
        Self::new(dims, labels)
    }
}

/// Channel stack `(num_classes, D, H, W)` with channel `c` = 1 where the label equals `c`.
pub fn one_hot(l: &LabelVolume, num_classes: usize) -> Result<Tensor<f32>, VolumeError> {
    let plane = l.labels.len();
    let mut data = vec![0.0f32; num_classes * plane];
    for (i, &lab) in l.labels.iter().enumerate() {
        let c = lab as usize;
        if c >= num_classes {
            return Err(VolumeError::InvalidLabel {
                label: lab as u32,
                index: i,
                num_classes,
            });
        }
        data[c * plane + i] = 1.0;
    }
    let [d, h, w] = l.dims;
    Ok(Tensor::new(vec![num_classes, d, h, w], data).expect("consistent dims"))
}

/// Per-voxel argmax over the channel axis of a `(C, D, H, W)` or `(1, C, D, H, W)`
/// tensor; ties resolve to the lowest class id.
pub fn argmax_channels(t: &Tensor<f32>) -> Result<LabelVolume, VolumeError> {
    let (c, dims) = match t.shape() {
        &[c, d, h, w] | &[1, c, d, h, w] => (c, [d, h, w]),
        _ => {
            return Err(VolumeError::DataLength {
                len: t.len(),
                dims: [0; 3],
            })
        }
    };
    let plane: usize = dims.iter().product();
    let data = t.data();
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if data[ch * plane + i] > data[best * plane + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(dims, labels)
}
