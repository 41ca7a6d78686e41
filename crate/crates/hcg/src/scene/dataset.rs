//! On-disk dataset layout: `records.jsonl` (one JSON object per line),
//! binary PPM images (`img_{id}.ppm`, P6 maxval 255), and `manifest.json`.
//! Reading back what was written and writing it again is byte identical.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    make_hallucination_probe, make_query, record_rng, render_with_boxes, sample_scene_spec,
    GenConfig, Image, QueryRecord, Result, SceneError, SceneSpec, Task,
};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetCounts {
    pub vqa: usize,
    pub rec: usize,
    pub probe: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: String,
    pub seed: u64,
    pub config: GenConfig,
    pub num_records: usize,
    pub counts: DatasetCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<QueryRecord>,
    /// Parallel to `records`.
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn image_for(&self, record: &QueryRecord) -> &Image {
        &self.images[record.id as usize]
    }
}

/// Generate `count` records. Each record derives its own RNG stream from
/// (seed, index), so the dataset does not depend on generation order.
pub fn generate_dataset(config: &GenConfig, seed: u64, count: usize) -> Result<Dataset> {
    config.validate()?;
    if count == 0 {
        return Err(SceneError::InvalidConfig("record count must be positive".into()));
    }
    let mut records = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    let mut counts = DatasetCounts { vqa: 0, rec: 0, probe: 0 };
    for i in 0..count {
        let mut rng = record_rng(seed, i as u64);
        let task = if rng.gen::<f64>() < config.rec_frac { Task::Rec } else { Task::Vqa };
        let probe = task == Task::Vqa && rng.gen::<f64>() < config.probe_frac;
        let mut result = None;
        for _ in 0..100 {
            let scene_seed = rng.gen::<u64>();
            let spec: SceneSpec = match sample_scene_spec(&mut rng, scene_seed, config) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let (img, boxes) = render_with_boxes(&spec, config.image_side);
            let content = if probe {
                make_hallucination_probe(&spec, &mut rng)
            } else {
                make_query(&spec, &boxes, task, &mut rng)
            };
            if let Ok(c) = content {
                result = Some((img, c));
                break;
            }
        }
        let Some((img, content)) = result else {
            return Err(SceneError::NoQuery);
        };
        match task {
            Task::Vqa => counts.vqa += 1,
            Task::Rec => counts.rec += 1,
        }
        if content.probe {
            counts.probe += 1;
        }
        records.push(QueryRecord {
            id: i as u64,
            tokens: content.tokens,
            task,
            answer_label: content.answer_label,
            bbox: content.bbox.map(|b| b.to_array()),
            probe: content.probe,
            image_file: format!("img_{i}.ppm"),
        });
        images.push(img);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        seed,
        config: config.clone(),
        num_records: count,
        counts,
    };
    Ok(Dataset { manifest, records, images })
}

pub fn dataset_write(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)
        .map_err(|e| SceneError::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), manifest + "\n")?;
    let mut jsonl = String::new();
    for r in &ds.records {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| SceneError::Format(e.to_string()))?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("records.jsonl"), jsonl)?;
    for (r, img) in ds.records.iter().zip(&ds.images) {
        let mut f = std::fs::File::create(dir.join(&r.image_file))?;
        write!(f, "P6\n{} {}\n255\n", img.side, img.side)?;
        f.write_all(&img.to_bytes())?;
    }
    Ok(())
}

pub fn dataset_read(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| SceneError::Format(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(SceneError::Format(format!(
            "unsupported format version {:?}",
            manifest.format_version
        )));
    }
    let mut records = Vec::new();
    for (ln, line) in std::fs::read_to_string(dir.join("records.jsonl"))?.lines().enumerate() {
        let r: QueryRecord = serde_json::from_str(line)
            .map_err(|e| SceneError::Format(format!("record line {}: {e}", ln + 1)))?;
        records.push(r);
    }
    if records.len() != manifest.num_records {
        return Err(SceneError::Format(format!(
            "manifest declares {} records, found {}",
            manifest.num_records,
            records.len()
        )));
    }
    let mut images = Vec::with_capacity(records.len());
    for r in &records {
        images.push(read_ppm(&dir.join(&r.image_file), manifest.config.image_side)?);
    }
    Ok(Dataset { manifest, records, images })
}

fn read_ppm(path: &Path, expected_side: usize) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let header_err = || SceneError::Format(format!("{}: bad PPM header", path.display()));
    // header: P6\n<w> <h>\n255\n
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P6" || fields[3] != b"255" {
        return Err(header_err());
    }
    let parse = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(header_err)
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    if w != expected_side || h != expected_side {
        return Err(SceneError::Format(format!(
            "{}: image is {w}x{h}, manifest says {expected_side}",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(SceneError::Format(format!("{}: truncated pixel data", path.display())));
    }
    Ok(Image::from_bytes(w, &bytes[pos..pos + need]))
}

/// SHA-256 over manifest, records, and all images in id order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(dir.join("manifest.json"))?);
    hasher.update(std::fs::read(dir.join("records.jsonl"))?);
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| SceneError::Format(e.to_string()))?;
    for i in 0..manifest.num_records {
        hasher.update(std::fs::read(dir.join(format!("img_{i}.ppm")))?);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
