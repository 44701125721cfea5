//! Seeded synthetic cases: one spherical tumor with nested subregions plus
//! bright distractor specks on a low-intensity noisy background.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::nifti::{write_nifti, write_nifti_labels, NiftiError};
use crate::volume::{LabelVolume, Modality, MultiModalVolume, Volume3D};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("blob radius {radius} does not fit inside dims {dims:?}")]
    RadiusTooLarge { radius: f64, dims: [usize; 3] },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub blob_radius: f64,
    pub num_specks: usize,
}

/// Inner radius fractions of the necrotic core and the enhancing ring; edema fills the rest.
const CORE_FRACTION: f64 = 0.4;
const ENHANCING_FRACTION: f64 = 0.65;
/// Minimum gap, in voxels, between a speck and the tumor surface.
const SPECK_CLEARANCE: f64 = 4.0;
const NOISE: f32 = 0.05;

/// Mean intensity per class and modality, `[T1, T1ce, T2, FLAIR]`.
const CLASS_MEANS: [[f32; 4]; 4] = [
    [0.10, 0.10, 0.10, 0.10], // background
    [0.25, 0.35, 0.95, 0.75], // necrotic / non-enhancing core
    [0.35, 0.30, 0.80, 0.90], // edema
    [0.30, 0.95, 0.55, 0.80], // enhancing tumor
];
const SPECK_MEAN: f32 = 0.85;

pub fn generate_phantom(
    cfg: &PhantomConfig,
) -> Result<(MultiModalVolume, LabelVolume), PhantomError> {
    let r = cfg.blob_radius;
    let margin = r.ceil() as usize + 1;
    if r.is_nan() || r <= 0.0 || cfg.dims.iter().any(|&d| d < 2 * margin + 1) {
        return Err(PhantomError::RadiusTooLarge {
            radius: r,
            dims: cfg.dims,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center: [f64; 3] = [0, 1, 2].map(|a| rng.gen_range(margin..cfg.dims[a] - margin) as f64);
    let [d, h, w] = cfg.dims;
    let n = d * h * w;

    let mut labels = vec![0u8; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dist = ((z as f64 - center[0]).powi(2)
                    + (y as f64 - center[1]).powi(2)
                    + (x as f64 - center[2]).powi(2))
                .sqrt();
                if dist <= r {
                    labels[(z * h + y) * w + x] = if dist <= CORE_FRACTION * r {
                        1
                    } else if dist <= ENHANCING_FRACTION * r {
                        3
                    } else {
                        2
                    };
                }
            }
        }
    }

    let mut speck = vec![false; n];
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.num_specks && attempts < 10_000 {
        attempts += 1;
        let p = [
            rng.gen_range(0..d),
            rng.gen_range(1..h - 1),
            rng.gen_range(1..w - 1),
        ];
        let dist = (0..3)
            .map(|a| (p[a] as f64 - center[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if dist <= r + SPECK_CLEARANCE {
            continue;
        }
        // 1 to 3 voxels, in-plane
        let size = rng.gen_range(1..=3);
        let offsets = [(0i64, 0i64), (0, 1), (1, 0), (1, 1), (-1, 0), (0, -1)];
        let mut voxels = vec![(p[1] as i64, p[2] as i64)];
        while voxels.len() < size {
            let (dy, dx) = offsets[rng.gen_range(1..offsets.len())];
            let last = voxels[voxels.len() - 1];
            let next = (last.0 + dy, last.1 + dx);
            if next.0 >= 0
                && (next.0 as usize) < h
                && next.1 >= 0
                && (next.1 as usize) < w
                && !voxels.contains(&next)
            {
                voxels.push(next);
            }
        }
        for (y, x) in voxels {
            speck[(p[0] * h + y as usize) * w + x as usize] = true;
        }
        placed += 1;
    }

    let modalities = Modality::ALL.map(|m| {
        let data = (0..n)
            .map(|i| {
                let mean = if speck[i] {
                    SPECK_MEAN
                } else {
                    CLASS_MEANS[labels[i] as usize][m.index()]
                };
                mean + rng.gen_range(-NOISE..NOISE)
            })
            .collect();
        Volume3D::new(cfg.dims, data)
            .expect("dims")
            .with_spacing(Some([1.0; 3]))
    });
    let mm = MultiModalVolume::new(modalities).expect("shared dims");
    let lv = LabelVolume::new(cfg.dims, labels).expect("valid labels");
    Ok((mm, lv))
}

/// Writes a case in BraTS folder layout: `<root>/<id>/<id>_{t1,t1ce,t2,flair,seg}.nii`.
pub fn write_case(
    root: impl AsRef<Path>,
    id: &str,
    mm: &MultiModalVolume,
    labels: &LabelVolume,
) -> Result<PathBuf, PhantomError> {
    let dir = root.as_ref().join(id);
    fs::create_dir_all(&dir).map_err(|source| PhantomError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for m in Modality::ALL {
        write_nifti(mm.modality(m), dir.join(format!("{id}_{}.nii", m.name())))?;
    }
    write_nifti_labels(labels, dir.join(format!("{id}_seg.nii")))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_must_fit() {
        let cfg = PhantomConfig {
            seed: 1,
            dims: [10, 32, 32],
            blob_radius: 5.0,
            num_specks: 0,
        };
        assert!(matches!(
            generate_phantom(&cfg),
            Err(PhantomError::RadiusTooLarge { .. })
        ));
    }

    #[test]
    fn nested_shells_present() {
        let cfg = PhantomConfig {
            seed: 4,
            dims: [24, 24, 24],
            blob_radius: 8.0,
            num_specks: 5,
        };
        let (_, l) = generate_phantom(&cfg).unwrap();
        for class in 1..=3u8 {
            assert!(l.labels().contains(&class), "class {class} missing");
        }
    }
}
