//! Dataset directory format.
//!
//! `manifest.json` lists the samples, the image size and the label space; each
//! sample lives in `<sample_id>.json` with its image as base64 little-endian
//! `f32` (`H*W*3`) and its masks run-length encoded. Runs alternate values
//! starting at `starts_with` and sum to exactly `H*W`.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Instance, Sample};
use crate::error::{Error, Result};
use crate::labels::{Domain, InstanceLabel, LabelSpace};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "albert-synth";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub label_space: LabelSpace,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    label_space: LabelSpace,
    samples: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    sample_id: String,
    image: String,
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    domain: Domain,
    class_id: usize,
    rle: Vec<usize>,
    starts_with: u8,
}

pub fn rle_encode(mask: &[bool]) -> (u8, Vec<usize>) {
    let Some(&first) = mask.first() else {
        return (0, Vec::new());
    };
    let mut runs = Vec::new();
    let mut current = first;
    let mut len = 0;
    for &b in mask {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    (u8::from(first), runs)
}

/// Decodes runs, requiring them to cover exactly `n` pixels.
pub fn rle_decode(starts_with: u8, runs: &[usize], n: usize) -> std::result::Result<Vec<bool>, String> {
    if starts_with > 1 {
        return Err(format!("starts_with must be 0 or 1, got {starts_with}"));
    }
    let total: usize = runs.iter().sum();
    if total != n {
        return Err(format!("RLE covers {total} pixels, expected {n}"));
    }
    let mut mask = Vec::with_capacity(n);
    let mut value = starts_with == 1;
    for &r in runs {
        mask.extend(std::iter::repeat_n(value, r));
        value = !value;
    }
    Ok(mask)
}

fn encode_image(image: &[f32]) -> String {
    let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        height: dataset.height,
        width: dataset.width,
        label_space: dataset.label_space.clone(),
        samples: dataset.samples.iter().map(|s| s.sample_id.clone()).collect(),
    };
    write(&dir.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;
    for s in &dataset.samples {
        let file = SampleFile {
            sample_id: s.sample_id.clone(),
            image: encode_image(&s.image),
            instances: s
                .instances
                .iter()
                .map(|inst| {
                    let (starts_with, rle) = rle_encode(&inst.mask);
                    InstanceRecord {
                        domain: inst.label.domain,
                        class_id: inst.label.class_id,
                        rle,
                        starts_with,
                    }
                })
                .collect(),
        };
        write(
            &dir.join(format!("{}.json", s.sample_id)),
            &serde_json::to_string(&file)?,
        )?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::Dataset(format!("missing manifest in {}", dir.display())));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::file(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("malformed manifest {}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Dataset(format!(
            "malformed manifest: unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    manifest.label_space.validate()?;
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for id in &manifest.samples {
        let path = dir.join(format!("{id}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let file: SampleFile =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("sample {id}: malformed file: {e}")))?;
        if &file.sample_id != id {
            return Err(Error::Dataset(format!(
                "sample {id}: file declares sample_id {}",
                file.sample_id
            )));
        }
        let bytes = B64
            .decode(file.image.as_bytes())
            .map_err(|e| Error::Dataset(format!("sample {id}: bad image encoding: {e}")))?;
        if bytes.len() != h * w * 3 * 4 {
            return Err(Error::Dataset(format!(
                "sample {id}: image has {} bytes, expected {}",
                bytes.len(),
                h * w * 12
            )));
        }
        let image = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut instances = Vec::with_capacity(file.instances.len());
        for (k, rec) in file.instances.iter().enumerate() {
            let label = InstanceLabel::new(rec.domain, rec.class_id);
            manifest
                .label_space
                .check(label)
                .map_err(|e| Error::Dataset(format!("sample {id}: instance {k}: unknown class id: {e}")))?;
            let mask = rle_decode(rec.starts_with, &rec.rle, h * w)
                .map_err(|e| Error::Dataset(format!("sample {id}: instance {k}: {e}")))?;
            if !mask.iter().any(|&b| b) {
                return Err(Error::Dataset(format!("sample {id}: instance {k}: empty mask")));
            }
            instances.push(Instance { mask, label });
        }
        samples.push(Sample {
            sample_id: id.clone(),
            height: h,
            width: w,
            image,
            instances,
        });
    }
    Ok(Dataset {
        label_space: manifest.label_space,
        height: h,
        width: w,
        samples,
    })
}
