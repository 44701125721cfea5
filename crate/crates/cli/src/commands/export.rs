use std::fs;
use std::path::Path;

use log::info;

use segkit::dataset::{read_nifti, read_raw};
use segkit::volume::Volume3D;

use crate::cli::{Axis, ExportArgs};
use crate::config::RunConfig;
use crate::error::{Classify, CliError, CliResult};

/// Binary PGM with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Maps the volume's global range onto 0..=255. A constant volume maps to 0.
pub fn to_gray(v: &Volume3D) -> Vec<u8> {
    let (lo, hi) = v.min_max();
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0; v.data().len()];
    }
    let scale = 255.0 / (hi as f64 - lo as f64);
    v.data()
        .iter()
        .map(|&x| ((x as f64 - lo as f64) * scale).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Slices as `(width, height, pixels)` in row-major order.
pub fn slices(v: &Volume3D, axis: Axis) -> Vec<(usize, usize, Vec<u8>)> {
    let gray = to_gray(v);
    let [d, h, w] = v.dims();
    let at = |z: usize, y: usize, x: usize| gray[(z * h + y) * w + x];
    match axis {
        Axis::Axial => (0..d)
            .map(|z| {
                (
                    w,
                    h,
                    (0..h)
                        .flat_map(|y| (0..w).map(move |x| (y, x)))
                        .map(|(y, x)| at(z, y, x))
                        .collect(),
                )
            })
            .collect(),
        Axis::Coronal => (0..h)
            .map(|y| {
                (
                    w,
                    d,
                    (0..d)
                        .flat_map(|z| (0..w).map(move |x| (z, x)))
                        .map(|(z, x)| at(z, y, x))
                        .collect(),
                )
            })
            .collect(),
        Axis::Sagittal => (0..w)
            .map(|x| {
                (
                    h,
                    d,
                    (0..d)
                        .flat_map(|z| (0..h).map(move |y| (z, y)))
                        .map(|(z, y)| at(z, y, x))
                        .collect(),
                )
            })
            .collect(),
    }
}

fn read_volume(path: &Path, channel: usize) -> CliResult<Volume3D> {
    let is_nifti = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("nii"));
    if is_nifti {
        return read_nifti(path)
            .map(|(v, _)| v)
            .or_data(format!("reading {}", path.display()));
    }
    let t = read_raw(path).or_data(format!("reading {}", path.display()))?;
    let (channels, dims) = match *t.shape() {
        [c, d, h, w] => (c, [d, h, w]),
        [d, h, w] => (1, [d, h, w]),
        ref s => {
            return Err(CliError::data(format!(
                "{}: cannot slice a tensor of shape {s:?}",
                path.display()
            )))
        }
    };
    if channel >= channels {
        return Err(CliError::usage(format!(
            "channel {channel} out of range; volume has {channels}"
        )));
    }
    let n = dims.iter().product::<usize>();
    Volume3D::new(dims, t.data()[channel * n..(channel + 1) * n].to_vec())
        .or_internal("slicing channel")
}

pub fn run_export(cfg: &RunConfig, args: &ExportArgs) -> CliResult<()> {
    let v = read_volume(&args.volume, args.channel)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("slices"));
    fs::create_dir_all(&out).or_data(format!("creating {}", out.display()))?;
    let all = slices(&v, args.axis);
    let digits = all.len().saturating_sub(1).to_string().len().max(3);
    for (i, (w, h, px)) in all.iter().enumerate() {
        let path = out.join(format!("slice_{i:0digits$}.pgm"));
        fs::write(&path, encode_pgm(*w, *h, px)).or_data(format!("writing {}", path.display()))?;
    }
    info!("wrote {} slices to {}", all.len(), out.display());
    Ok(())
}
