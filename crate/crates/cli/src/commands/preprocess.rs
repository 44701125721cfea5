use std::fs;
use std::path::Path;

use anyhow::Context;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use segkit::dataset::{
    read_nifti, read_nifti_labels, scan_dataset, split_train_val, write_raw, CaseEntry,
    DatasetManifest,
};
use segkit::detect::{crop_to_tumor, detect_tumor_volume, DetectionReport};
use segkit::volume::{
    crop, minmax_normalize, nonzero_bbox, resize_trilinear, BoundingBox3D, LabelVolume, Modality,
    MultiModalVolume,
};

use crate::config::RunConfig;
use crate::error::{Classify, CliError, CliResult};
use crate::index::{IndexEntry, PreprocessedIndex};

pub const DETECTIONS_FILE: &str = "detections.json";
pub const FAILURES_FILE: &str = "failures.json";

/// Detection result in the coordinates of the original volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseDetection {
    pub brain_bbox: BoundingBox3D,
    #[serde(flatten)]
    pub report: DetectionReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct FailureReport {
    pub failed: Vec<CaseFailure>,
}

fn fail(case: &str, stage: &str, e: impl Into<anyhow::Error>) -> CaseFailure {
    CaseFailure {
        case: case.to_string(),
        stage: stage.to_string(),
        error: format!("{:#}", e.into()),
    }
}

struct LoadedRaw {
    mm: MultiModalVolume,
    labels: LabelVolume,
}

fn read_case(entry: &CaseEntry) -> Result<LoadedRaw, CaseFailure> {
    let read = |m: Modality| {
        let path = entry.modality_path(m);
        read_nifti(path)
            .map(|(v, _)| v)
            .with_context(|| format!("{} ({})", path.display(), m.name()))
    };
    let vols = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair]
        .map(read)
        .into_iter()
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(|e| fail(&entry.id, "read", e))?;
    let vols: [_; 4] = vols.try_into().expect("four modalities");
    let mm = MultiModalVolume::new(vols).map_err(|e| fail(&entry.id, "read", e))?;
    let (labels, _) = read_nifti_labels(&entry.seg)
        .with_context(|| entry.seg.display().to_string())
        .map_err(|e| fail(&entry.id, "read", e))?;
    if labels.dims() != mm.dims() {
        return Err(fail(
            &entry.id,
            "read",
            anyhow::anyhow!(
                "mask dims {:?} differ from image dims {:?}",
                labels.dims(),
                mm.dims()
            ),
        ));
    }
    Ok(LoadedRaw { mm, labels })
}

/// Brain crop then tumor detection. Returns the brain-cropped case and the detection.
fn detect_case(
    cfg: &RunConfig,
    entry: &CaseEntry,
) -> Result<(LoadedRaw, CaseDetection), CaseFailure> {
    let raw = read_case(entry)?;
    let brain = nonzero_bbox(&raw.mm).map_err(|e| fail(&entry.id, "brain-crop", e))?;
    let mm = raw
        .mm
        .try_map(|v| crop(v, &brain))
        .map_err(|e| fail(&entry.id, "brain-crop", e))?;
    let labels = raw
        .labels
        .crop(&brain)
        .map_err(|e| fail(&entry.id, "brain-crop", e))?;
    let det = detect_tumor_volume(mm.modality(cfg.detect.modality), &cfg.detect)
        .map_err(|e| fail(&entry.id, "detect", e))?;
    let shift = |p: [usize; 3]| [0, 1, 2].map(|a| p[a] + brain.min[a]);
    let report = DetectionReport {
        case: entry.id.clone(),
        bbox: BoundingBox3D {
            min: shift(det.bbox.min),
            max: shift(det.bbox.max),
        },
        per_slice_candidates: det.per_slice_candidates,
        params: cfg.detect.clone(),
    };
    Ok((
        LoadedRaw { mm, labels },
        CaseDetection {
            brain_bbox: brain,
            report,
        },
    ))
}

impl CaseDetection {
    /// Tumor box relative to the brain crop.
    fn local_bbox(&self) -> BoundingBox3D {
        let unshift = |p: [usize; 3]| [0, 1, 2].map(|a| p[a] - self.brain_bbox.min[a]);
        BoundingBox3D {
            min: unshift(self.report.bbox.min),
            max: unshift(self.report.bbox.max),
        }
    }
}

fn prepare_case(
    cfg: &RunConfig,
    entry: &CaseEntry,
    out_dir: &Path,
) -> Result<(IndexEntry, CaseDetection), CaseFailure> {
    let (raw, det) = detect_case(cfg, entry)?;
    let (mm, labels) = crop_to_tumor(&raw.mm, &raw.labels, &det.local_bbox(), cfg.crop_margin)
        .map_err(|e| fail(&entry.id, "tumor-crop", e))?;
    let mm = mm
        .try_map(|v| resize_trilinear(v, cfg.target_size).map(|r| minmax_normalize(&r)))
        .map_err(|e| fail(&entry.id, "resize", e))?;
    let labels = labels
        .resize_nearest(cfg.target_size)
        .map_err(|e| fail(&entry.id, "resize", e))?;

    let image = format!("{}_image.vol", entry.id);
    let mask = format!("{}_mask.vol", entry.id);
    write_raw(&mm.to_tensor(), out_dir.join(&image)).map_err(|e| fail(&entry.id, "write", e))?;
    write_raw(&labels.to_tensor(), out_dir.join(&mask)).map_err(|e| fail(&entry.id, "write", e))?;
    let split = entry.split.expect("split assigned before preprocessing");
    Ok((
        IndexEntry {
            id: entry.id.clone(),
            image: image.into(),
            mask: mask.into(),
            split,
        },
        det,
    ))
}

pub fn pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .or_internal("building thread pool")
}

fn scan(cfg: &RunConfig) -> CliResult<(DatasetManifest, Vec<CaseFailure>)> {
    let report = scan_dataset(&cfg.dataset_root, &cfg.suffixes)
        .or_usage(format!("scanning dataset {}", cfg.dataset_root.display()))?;
    let incomplete = report
        .incomplete
        .iter()
        .map(|c| CaseFailure {
            case: c.id.clone(),
            stage: "scan".into(),
            error: format!("missing files: {}", c.missing.join(", ")),
        })
        .collect::<Vec<_>>();
    for f in &incomplete {
        warn!("case {}: {}", f.case, f.error);
    }
    Ok((report.manifest, incomplete))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).or_internal("serializing report")? + "\n";
    fs::write(path, text).or_data(format!("writing {}", path.display()))
}

fn finish(failures: Vec<CaseFailure>, succeeded: usize, out: &Path) -> CliResult<()> {
    for f in &failures {
        warn!("case {} failed at {}: {}", f.case, f.stage, f.error);
    }
    let n_failed = failures.len();
    write_json(
        &out.join(FAILURES_FILE),
        &FailureReport { failed: failures },
    )?;
    if succeeded == 0 {
        return Err(CliError::data(format!("all {n_failed} cases failed")));
    }
    Ok(())
}

pub fn run_preprocess(cfg: &RunConfig) -> CliResult<()> {
    let (manifest, mut failures) = scan(cfg)?;
    let manifest =
        split_train_val(&manifest, cfg.train_fraction, cfg.seed).or_usage("splitting cases")?;
    let out = cfg.preprocessed_dir();
    fs::create_dir_all(&out).or_data(format!("creating {}", out.display()))?;
    info!(
        "preprocessing {} cases into {}",
        manifest.cases.len(),
        out.display()
    );

    let results: Vec<_> = pool(cfg.threads)?.install(|| {
        manifest
            .cases
            .par_iter()
            .map(|c| prepare_case(cfg, c, &out))
            .collect()
    });
    let mut entries = Vec::new();
    let mut detections = Vec::new();
    for r in results {
        match r {
            Ok((entry, det)) => {
                entries.push(entry);
                detections.push(det);
            }
            Err(f) => failures.push(f),
        }
    }
    info!("{} cases written, {} failed", entries.len(), failures.len());
    manifest
        .save(out.join("manifest.json"))
        .or_data("writing manifest")?;
    write_json(&out.join(DETECTIONS_FILE), &detections)?;
    let n = entries.len();
    PreprocessedIndex {
        target_size: cfg.target_size,
        cases: entries,
    }
    .save(&out)?;
    finish(failures, n, &out)
}

pub fn run_detect(cfg: &RunConfig) -> CliResult<()> {
    let (manifest, mut failures) = scan(cfg)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).or_data(format!("creating {}", out.display()))?;
    let results: Vec<_> = pool(cfg.threads)?.install(|| {
        manifest
            .cases
            .par_iter()
            .map(|c| detect_case(cfg, c).map(|(_, d)| d))
            .collect()
    });
    let mut detections = Vec::new();
    for r in results {
        match r {
            Ok(d) => {
                info!(
                    "case {}: tumor box {:?}..{:?}",
                    d.report.case, d.report.bbox.min, d.report.bbox.max
                );
                detections.push(d);
            }
            Err(f) => failures.push(f),
        }
    }
    write_json(&out.join(DETECTIONS_FILE), &detections)?;
    let n = detections.len();
    finish(failures, n, &out)
}
