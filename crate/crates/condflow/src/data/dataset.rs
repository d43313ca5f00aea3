//! On-disk dataset layout and resolution reduction.
//!
//! A dataset root holds `images/<id>.ppm`, `depth/<id>.pfm`,
//! `labels/<id>.pgm` and a `manifest.tsv` of tab-separated `id origin`
//! rows. The manifest is the source of truth for membership and order and
//! is written last, atomically, so a crashed writer never leaves a
//! readable-but-wrong dataset behind.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::DataError;
use crate::tensor::Tensor;

use super::formats::{read_pfm, read_pgm, read_ppm, write_atomic, write_pfm, write_pgm, write_ppm};
use super::{LabelMap, Origin, Sample};

fn ingest(root: &Path, detail: impl Into<String>) -> DataError {
    DataError::Ingestion {
        root: root.display().to_string(),
        detail: detail.into(),
    }
}

/// Write samples under `root`, manifest last. Every sample must satisfy
/// the supervision contract; ids must be unique.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for s in samples {
        s.check_contract()?;
        if !seen.insert(s.id.as_str()) {
            return Err(ingest(root, format!("duplicate sample id {}", s.id)));
        }
    }
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| DataError::Io {
        path: images.display().to_string(),
        source: e,
    })?;
    let mut manifest = String::new();
    for s in samples {
        write_ppm(&images.join(format!("{}.ppm", s.id)), &s.rgb)?;
        if let Some(depth) = &s.depth_gt {
            let dir = root.join("depth");
            fs::create_dir_all(&dir).map_err(|e| DataError::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
            write_pfm(&dir.join(format!("{}.pfm", s.id)), depth)?;
        }
        if let Some(labels) = &s.labels_gt {
            let dir = root.join("labels");
            fs::create_dir_all(&dir).map_err(|e| DataError::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
            write_pgm(&dir.join(format!("{}.pgm", s.id)), labels)?;
        }
        manifest.push_str(&s.id);
        manifest.push('\t');
        manifest.push_str(s.origin.as_str());
        manifest.push('\n');
    }
    write_atomic(&root.join("manifest.tsv"), manifest.as_bytes())
}

/// Load a dataset in manifest order. A sample whose files disagree with
/// its declared origin (missing ground truth, or a stray file from the
/// other corpus) is an ingestion error naming the offending file.
pub fn load_dataset_dir(root: &Path) -> Result<Vec<Sample>, DataError> {
    let manifest_path = root.join("manifest.tsv");
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| DataError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, origin_str) = line.split_once('\t').ok_or_else(|| {
            ingest(root, format!("manifest.tsv line {}: expected id<TAB>origin", lineno + 1))
        })?;
        let origin = Origin::parse(origin_str).ok_or_else(|| {
            ingest(
                root,
                format!("manifest.tsv line {}: unknown origin {origin_str:?}", lineno + 1),
            )
        })?;
        if !seen.insert(id.to_string()) {
            return Err(ingest(root, format!("manifest.tsv line {}: duplicate id {id}", lineno + 1)));
        }

        let rgb = read_ppm(&root.join("images").join(format!("{id}.ppm")))?;
        let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
        let depth_path = root.join("depth").join(format!("{id}.pfm"));
        let labels_path = root.join("labels").join(format!("{id}.pgm"));
        let (depth_gt, labels_gt) = match origin {
            Origin::Depth => {
                if labels_path.exists() {
                    return Err(ingest(
                        root,
                        format!("{}: label file present for depth-origin sample {id}", labels_path.display()),
                    ));
                }
                if !depth_path.exists() {
                    return Err(ingest(
                        root,
                        format!("{}: depth file missing for depth-origin sample {id}", depth_path.display()),
                    ));
                }
                let depth = read_pfm(&depth_path)?;
                if depth.shape()[1..] != [h, w] {
                    return Err(ingest(
                        root,
                        format!(
                            "{}: depth geometry {:?} does not match image {h}x{w}",
                            depth_path.display(),
                            &depth.shape()[1..]
                        ),
                    ));
                }
                (Some(depth), None)
            }
            Origin::Semantic => {
                if depth_path.exists() {
                    return Err(ingest(
                        root,
                        format!("{}: depth file present for semantic-origin sample {id}", depth_path.display()),
                    ));
                }
                if !labels_path.exists() {
                    return Err(ingest(
                        root,
                        format!("{}: label file missing for semantic-origin sample {id}", labels_path.display()),
                    ));
                }
                let labels = read_pgm(&labels_path)?;
                if (labels.h, labels.w) != (h, w) {
                    return Err(ingest(
                        root,
                        format!(
                            "{}: label geometry {}x{} does not match image {h}x{w}",
                            labels_path.display(),
                            labels.h,
                            labels.w
                        ),
                    ));
                }
                (None, Some(labels))
            }
        };
        samples.push(Sample {
            id: id.to_string(),
            rgb,
            depth_gt,
            labels_gt,
            origin,
        });
    }
    Ok(samples)
}

/// Reduce resolution by an integer factor: rgb averages each window,
/// depth averages only measured (> 0) pixels so sparse maps do not bleed
/// zeros into neighbours, labels take the window's center pixel.
pub fn downsample(sample: &Sample, factor: usize) -> Result<Sample, DataError> {
    if factor == 0 {
        return Err(DataError::Contract("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(sample.clone());
    }
    let (h, w) = sample.hw();
    if h % factor != 0 || w % factor != 0 {
        return Err(DataError::Contract(format!(
            "geometry {h}x{w} not divisible by downsample factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);

    let mut rgb = vec![0f32; 3 * oh * ow];
    let src = sample.rgb.data();
    let inv = 1.0 / (factor * factor) as f64;
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(c * h + y * factor + dy) * w + x * factor + dx] as f64;
                    }
                }
                rgb[(c * oh + y) * ow + x] = (acc * inv) as f32;
            }
        }
    }

    let depth_gt = match &sample.depth_gt {
        Some(d) => {
            let src = d.data();
            let mut out = vec![0f32; oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0f64;
                    let mut n = 0u32;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let v = src[(y * factor + dy) * w + x * factor + dx];
                            if v > 0.0 {
                                acc += v as f64;
                                n += 1;
                            }
                        }
                    }
                    out[y * ow + x] = if n > 0 { (acc / n as f64) as f32 } else { 0.0 };
                }
            }
            Some(Tensor::from_vec(vec![1, oh, ow], out)?)
        }
        None => None,
    };

    let labels_gt = match &sample.labels_gt {
        Some(l) => {
            // center pixel; the upper-left candidate when the factor is even
            let off = (factor - 1) / 2;
            let mut out = vec![0u8; oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    out[y * ow + x] = l.data[(y * factor + off) * w + x * factor + off];
                }
            }
            Some(LabelMap::new(oh, ow, out)?)
        }
        None => None,
    };

    Ok(Sample {
        id: sample.id.clone(),
        rgb: Tensor::from_vec(vec![3, oh, ow], rgb)?,
        depth_gt,
        labels_gt,
        origin: sample.origin,
    })
}
