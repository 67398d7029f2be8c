//! JSONL record schema shared by the generator and the build pipeline.
//!
//! One record per line:
//! `{id, image: {height_patches, width_patches, seed | features, region,
//! category}, query, response, provenance: {backend, prompt_version, raw,
//! reflected, review_status}, split_tags}`.
//!
//! Images generated by the synthetic world store only their feature seed;
//! hand-built images store features inline.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{BBox, GridImage};
use crate::sample::Sample;
use crate::synthworld::{rebuild_image, WorldConfig};
use crate::vocab::Vocab;

use super::BuildError;

pub const STATUS_PENDING: &str = "pending";
pub const STATUS_ACCEPTED: &str = "accepted";
pub const STATUS_CORRECTED: &str = "corrected";
pub const STATUS_REJECTED: &str = "rejected";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub height_patches: usize,
    pub width_patches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    pub region: [f64; 4],
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub prompt_version: String,
    pub raw: String,
    pub reflected: String,
    pub review_status: String,
}

impl Provenance {
    pub fn generator() -> Self {
        Self {
            backend: "generator".into(),
            prompt_version: "-".into(),
            raw: String::new(),
            reflected: String::new(),
            review_status: STATUS_ACCEPTED.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: ImageRecord,
    pub query: String,
    pub response: String,
    pub provenance: Provenance,
    pub split_tags: Vec<String>,
}

impl SampleRecord {
    pub fn from_sample(sample: &Sample, vocab: &Vocab, provenance: Provenance) -> Self {
        let image = &sample.image;
        Self {
            id: sample.id.clone(),
            image: ImageRecord {
                height_patches: image.height_patches,
                width_patches: image.width_patches,
                seed: image.gen_seed,
                features: image.gen_seed.is_none().then(|| image.patch_features.clone()),
                region: [
                    image.abnormal_region.x1,
                    image.abnormal_region.y1,
                    image.abnormal_region.x2,
                    image.abnormal_region.y2,
                ],
                category: image.category_id,
            },
            query: vocab.decode_text(&sample.query),
            response: vocab.decode_text(&sample.reference_response),
            provenance,
            split_tags: sample.split_tags.iter().cloned().collect(),
        }
    }

    pub fn to_sample(&self, cfg: &WorldConfig, vocab: &Vocab) -> Result<Sample, BuildError> {
        let region = BBox::new(
            self.image.region[0],
            self.image.region[1],
            self.image.region[2],
            self.image.region[3],
        )
        .map_err(|e| BuildError::Record(format!("record {}: {e}", self.id)))?;
        let image = match (self.image.seed, &self.image.features) {
            (Some(seed), _) => rebuild_image(cfg, seed, region, self.image.category)
                .map_err(|e| BuildError::Record(format!("record {}: {e}", self.id)))?,
            (None, Some(features)) => GridImage::new(
                self.image.height_patches,
                self.image.width_patches,
                cfg.feature_dim(),
                features.clone(),
                region,
                self.image.category,
            )
            .map_err(|e| BuildError::Record(format!("record {}: {e}", self.id)))?,
            (None, None) => {
                return Err(BuildError::Record(format!(
                    "record {}: neither seed nor features present",
                    self.id
                )))
            }
        };
        let query = vocab
            .encode_text(&self.query)
            .map_err(|e| BuildError::Record(format!("record {}: query: {e}", self.id)))?;
        let reference_response = vocab
            .encode_text(&self.response)
            .map_err(|e| BuildError::Record(format!("record {}: response: {e}", self.id)))?;
        Ok(Sample {
            id: self.id.clone(),
            image,
            query,
            reference_response,
            gt_category: self.image.category,
            gt_bbox: region,
            split_tags: self.split_tags.iter().cloned().collect(),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<(), BuildError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(file, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>, BuildError> {
    let file = std::fs::File::open(path)?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line)
                .map_err(|e| BuildError::Record(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Write a dataset of generated samples in the shared JSONL format.
pub fn write_samples(path: &Path, samples: &[Sample], vocab: &Vocab) -> Result<(), BuildError> {
    let records: Vec<SampleRecord> = samples
        .iter()
        .map(|s| SampleRecord::from_sample(s, vocab, Provenance::generator()))
        .collect();
    write_records(path, &records)
}

/// Load samples back; images are rebuilt from their stored seeds.
pub fn read_samples(path: &Path, cfg: &WorldConfig, vocab: &Vocab) -> Result<Vec<Sample>, BuildError> {
    read_records(path)?
        .iter()
        .map(|r| r.to_sample(cfg, vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{apply_split, generate_dataset, SplitPlan};

    #[test]
    fn jsonl_round_trip_preserves_samples() {
        let cfg = WorldConfig {
            seed: 31,
            ..WorldConfig::default()
        };
        let vocab = cfg.vocab();
        let samples = generate_dataset(&cfg, 12).unwrap();
        let samples = apply_split(&samples, &SplitPlan::default(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        write_samples(&path, &samples, &vocab).unwrap();
        let loaded = read_samples(&path, &cfg, &vocab).unwrap();
        assert_eq!(samples, loaded);
        // Writing again is byte-identical.
        let bytes_a = std::fs::read(&path).unwrap();
        write_samples(&path, &loaded, &vocab).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn inline_features_round_trip_when_seed_missing() {
        let cfg = WorldConfig {
            seed: 32,
            ..WorldConfig::default()
        };
        let vocab = cfg.vocab();
        let mut sample = generate_dataset(&cfg, 1).unwrap().remove(0);
        sample.image.gen_seed = None;
        let rec = SampleRecord::from_sample(&sample, &vocab, Provenance::generator());
        assert!(rec.image.features.is_some());
        let back = rec.to_sample(&cfg, &vocab).unwrap();
        assert_eq!(back, sample);
    }
}
