//! Dataset persistence.
//!
//! A dataset directory holds `manifest.json` (config, split, count, sha256
//! checksums), `annotations.jsonl` (one record per sample), and
//! `images/NNNNNN.png`. Masks are not stored: records carry the shape
//! parameters, and readers rebuild masks, boxes, and centers from them, so a
//! reloaded sample compares equal to the generated one. Every file is
//! checksummed and verified on read, and load errors name the offending file
//! or record.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    mask_bbox, mask_centroid, GenConfig, Grounding, QaPair, SceneObject, SceneSample, ShapeSpec,
    SizeBucket, Split, Color,
};
use crate::error::{Error, Result};

const MANIFEST_VERSION: u32 = 1;

/// Dataset-level metadata plus per-file sha256 checksums (hex).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: GenConfig,
    pub split: Split,
    pub count: usize,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ObjectRecord {
    shape: ShapeSpec,
    color: Color,
    size_bucket: SizeBucket,
    bbox: [f64; 4],
    center: [f64; 2],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct Record {
    index: usize,
    seed: u64,
    retries: u32,
    canvas: usize,
    image: String,
    objects: Vec<ObjectRecord>,
    caption: String,
    groundings: Vec<Grounding>,
    qa: Vec<QaPair>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_png(sample: &SceneSample) -> Result<Vec<u8>> {
    let c = sample.canvas as u32;
    let img = image::RgbImage::from_raw(c, c, sample.pixels.clone())
        .ok_or_else(|| Error::Data("pixel buffer does not match canvas".into()))?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Incrementally writes a dataset directory.
pub struct DatasetWriter {
    root: PathBuf,
    manifest: DatasetManifest,
    annotations: BufWriter<File>,
    hasher: Sha256,
}

impl DatasetWriter {
    pub fn create(root: &Path, config: &GenConfig, split: Split) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(root.join("images"))?;
        let annotations = BufWriter::new(File::create(root.join("annotations.jsonl"))?);
        Ok(DatasetWriter {
            root: root.to_path_buf(),
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                config: config.clone(),
                split,
                count: 0,
                checksums: BTreeMap::new(),
            },
            annotations,
            hasher: Sha256::new(),
        })
    }

    pub fn push(&mut self, sample: &SceneSample) -> Result<()> {
        let index = self.manifest.count;
        let image = format!("images/{index:06}.png");
        let png = encode_png(sample)?;
        self.manifest
            .checksums
            .insert(image.clone(), sha256_hex(&png));
        fs::write(self.root.join(&image), &png)?;

        let record = Record {
            index,
            seed: sample.seed,
            retries: sample.retries,
            canvas: sample.canvas,
            image,
            objects: sample
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    shape: o.shape,
                    color: o.color,
                    size_bucket: o.size_bucket,
                    bbox: [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2],
                    center: [o.center.0, o.center.1],
                })
                .collect(),
            caption: sample.caption.clone(),
            groundings: sample.groundings.clone(),
            qa: sample.qa.clone(),
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        self.annotations.write_all(line.as_bytes())?;
        self.hasher.update(line.as_bytes());
        self.manifest.count += 1;
        Ok(())
    }

    /// Flushes annotations and writes `manifest.json`.
    pub fn finish(mut self) -> Result<DatasetManifest> {
        self.annotations.flush()?;
        let digest = self.hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.manifest
            .checksums
            .insert("annotations.jsonl".into(), hex);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.root.join("manifest.json"), json)?;
        Ok(self.manifest)
    }
}

/// Generates and writes a whole split in one call.
pub fn write_dataset(
    root: &Path,
    config: &GenConfig,
    split: Split,
    count: usize,
) -> Result<DatasetManifest> {
    let mut writer = DatasetWriter::create(root, config, split)?;
    for sample in super::generate_split(config, split, count) {
        writer.push(&sample?)?;
    }
    writer.finish()
}

/// A verified, lazily-loading view of a dataset directory.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
    records: Vec<Record>,
}

impl Dataset {
    /// Opens a dataset, verifying the annotations checksum and parsing every
    /// record. Image bytes are verified on access ([`Dataset::get`]) or all
    /// at once ([`Dataset::verify`]).
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_bytes = fs::read(root.join("manifest.json"))
            .map_err(|e| Error::Data(format!("manifest.json: {e}")))?;
        let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::Data(format!("manifest.json: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset version {}",
                manifest.version
            )));
        }
        manifest.config.validate()?;

        let ann_bytes = fs::read(root.join("annotations.jsonl"))?;
        let expected = manifest
            .checksums
            .get("annotations.jsonl")
            .ok_or_else(|| Error::Data("manifest lacks annotations checksum".into()))?;
        if &sha256_hex(&ann_bytes) != expected {
            return Err(Error::Data("checksum mismatch for annotations.jsonl".into()));
        }

        let mut records = Vec::with_capacity(manifest.count);
        for (lineno, line) in BufReader::new(&ann_bytes[..]).lines().enumerate() {
            let line = line?;
            let record: Record = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("annotations.jsonl line {}: {e}", lineno + 1))
            })?;
            if record.index != lineno {
                return Err(Error::Data(format!(
                    "annotations.jsonl line {}: index {} out of order",
                    lineno + 1,
                    record.index
                )));
            }
            records.push(record);
        }
        if records.len() != manifest.count {
            return Err(Error::Data(format!(
                "manifest promises {} records, found {}",
                manifest.count,
                records.len()
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads one sample: reads and checksums its PNG, rebuilds masks from the
    /// stored shape parameters, and cross-checks the stored box and center.
    pub fn get(&self, index: usize) -> Result<SceneSample> {
        let record = self
            .records
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample {index} out of range")))?;
        let png = fs::read(self.root.join(&record.image))
            .map_err(|e| Error::Data(format!("{}: {e}", record.image)))?;
        let expected = self
            .manifest
            .checksums
            .get(&record.image)
            .ok_or_else(|| Error::Data(format!("manifest lacks checksum for {}", record.image)))?;
        if &sha256_hex(&png) != expected {
            return Err(Error::Data(format!("checksum mismatch for {}", record.image)));
        }
        let img = image::load_from_memory_with_format(&png, image::ImageFormat::Png)?.to_rgb8();
        if img.width() as usize != record.canvas || img.height() as usize != record.canvas {
            return Err(Error::Data(format!(
                "{}: image is {}x{}, record says {}",
                record.image,
                img.width(),
                img.height(),
                record.canvas
            )));
        }
        let pixels = img.into_raw();

        let mut objects = Vec::with_capacity(record.objects.len());
        for (i, o) in record.objects.iter().enumerate() {
            let mask = o.shape.mask(record.canvas);
            let bbox = mask_bbox(&mask).map_err(|_| {
                Error::Data(format!("record {index} object {i}: empty rebuilt mask"))
            })?;
            let center = mask_centroid(&mask).expect("non-empty mask");
            if [bbox.x1, bbox.y1, bbox.x2, bbox.y2] != o.bbox || [center.0, center.1] != o.center {
                return Err(Error::Data(format!(
                    "record {index} object {i}: stored box/center disagree with shape"
                )));
            }
            objects.push(SceneObject {
                shape: o.shape,
                color: o.color,
                size_bucket: o.size_bucket,
                bbox,
                center,
                mask,
            });
        }

        Ok(SceneSample {
            seed: record.seed,
            retries: record.retries,
            canvas: record.canvas,
            pixels,
            objects,
            caption: record.caption.clone(),
            groundings: record.groundings.clone(),
            qa: record.qa.clone(),
        })
    }

    /// Checks every file against the manifest checksums.
    pub fn verify(&self) -> Result<()> {
        for (path, expected) in &self.manifest.checksums {
            let bytes = fs::read(self.root.join(path))
                .map_err(|e| Error::Data(format!("{path}: {e}")))?;
            if &sha256_hex(&bytes) != expected {
                return Err(Error::Data(format!("checksum mismatch for {path}")));
            }
        }
        Ok(())
    }
}
