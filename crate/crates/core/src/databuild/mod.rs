//! Dataset construction pipeline: prompt assembly, a generate-then-reflect
//! pass over a text backend, rule-based review filtering, and JSONL
//! persistence. Ground truth (category and bbox) is supplied to the
//! generator; the backend's job is producing the explanation text, not the
//! diagnosis itself.

pub mod backend;
pub mod record;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{GenerationRequest, HttpTextBackend, MockTextBackend, TextBackend};
pub use record::{
    read_records, read_samples, write_records, write_samples, ImageRecord, Provenance,
    SampleRecord, STATUS_ACCEPTED, STATUS_CORRECTED, STATUS_PENDING, STATUS_REJECTED,
};

use crate::geom::{iou, BBox};
use crate::sample::Sample;
use crate::synthworld::{generate_dataset, WorldConfig};
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("prompt template error: {0}")]
    Template(String),
    #[error("record error: {0}")]
    Record(String),
    #[error("world error: {0}")]
    World(#[from] crate::synthworld::WorldError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown record id {0:?}")]
    UnknownId(String),
}

/// Versioned prompt templates. Slots use `{name}` syntax; every slot must be
/// filled before dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub diagnosis_template: String,
    pub reflection_template: String,
    pub version: String,
}

impl Default for PromptBundle {
    fn default() -> Self {
        Self {
            diagnosis_template: "write a diagnosis explanation for the annotated study. \
                                 image={image}; category={category}; bbox={bbox};"
                .into(),
            reflection_template: "rewrite the diagnosis in canonical order: detection, then \
                                  bbox, then category. prior: {prior}"
                .into(),
            version: "v1".into(),
        }
    }
}

fn render(template: &str, slots: &[(&str, &str)]) -> Result<String, BuildError> {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    if let (Some(a), Some(b)) = (out.find('{'), out.find('}')) {
        if a < b {
            return Err(BuildError::Template(format!(
                "unfilled slot {:?} in template",
                &out[a..=b]
            )));
        }
    }
    Ok(out)
}

/// Inputs the pipeline feeds the generation backend; ground truth included.
#[derive(Debug, Clone)]
pub struct BuildInputs {
    pub image_descriptor: String,
    pub category_name: String,
    pub bbox_text: String,
}

impl BuildInputs {
    pub fn for_sample(sample: &Sample, cfg: &WorldConfig, vocab: &Vocab) -> Self {
        let [x1, y1, x2, y2] = vocab.quantize_bbox(&sample.gt_bbox);
        Self {
            image_descriptor: format!(
                "grid {}x{} {}",
                sample.image.height_patches,
                sample.image.width_patches,
                cfg.dataset_family(sample.gt_category)
            ),
            category_name: vocab.category_name(sample.gt_category).expect("valid category"),
            bbox_text: format!("{x1} {y1} {x2} {y2}"),
        }
    }
}

/// First pass: ask the backend for a diagnosis text given ground truth.
/// An empty reply is a contract violation.
pub fn build_diagnosis(
    inputs: &BuildInputs,
    bundle: &PromptBundle,
    backend: &dyn TextBackend,
) -> Result<String, BuildError> {
    let prompt = render(
        &bundle.diagnosis_template,
        &[
            ("image", inputs.image_descriptor.as_str()),
            ("category", inputs.category_name.as_str()),
            ("bbox", inputs.bbox_text.as_str()),
        ],
    )?;
    let text = backend.generate(&GenerationRequest {
        prompt,
        attachments: vec![],
    })?;
    if text.trim().is_empty() {
        return Err(BuildError::Backend("backend returned an empty response".into()));
    }
    Ok(text)
}

/// Second pass: restructure a raw diagnosis into the canonical
/// detection -> bbox -> category order.
pub fn reflect(
    raw: &str,
    bundle: &PromptBundle,
    backend: &dyn TextBackend,
) -> Result<String, BuildError> {
    if raw.trim().is_empty() {
        return Err(BuildError::Backend("raw response must be non-empty".into()));
    }
    let prompt = render(&bundle.reflection_template, &[("prior", raw)])?;
    backend.generate(&GenerationRequest {
        prompt,
        attachments: vec![],
    })
}

/// Review rules: an accepted record must parse under the schema with the
/// right category and a bbox whose IoU with ground truth clears the
/// threshold (generation is conditioned on ground truth, so the default is
/// strict).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRules {
    pub min_bbox_iou: f64,
    pub require_category_match: bool,
}

impl Default for ReviewRules {
    fn default() -> Self {
        Self {
            min_bbox_iou: 0.99,
            require_category_match: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: String,
    pub decision: String,
    pub reason: String,
}

/// Apply the review rules to every record, rewriting review statuses in
/// place (pending records stay pending). Returns the audit log.
pub fn review_filter(
    records: &mut [SampleRecord],
    rules: &ReviewRules,
    vocab: &Vocab,
) -> Vec<AuditEntry> {
    let mut audit = Vec::with_capacity(records.len());
    for rec in records.iter_mut() {
        let tokens: Vec<u32> = rec
            .response
            .split_whitespace()
            .filter_map(|w| vocab.token(w).ok())
            .collect();
        let parsed = vocab.parse_response(&tokens);
        let gt_region = BBox::new(
            rec.image.region[0],
            rec.image.region[1],
            rec.image.region[2],
            rec.image.region[3],
        )
        .expect("record regions are valid boxes");
        let (decision, reason) = if !parsed.schema_valid {
            (STATUS_PENDING, "response does not parse under the schema".to_string())
        } else if rules.require_category_match && parsed.parsed_category != Some(rec.image.category)
        {
            (STATUS_REJECTED, "parsed category does not match ground truth".to_string())
        } else {
            let got = iou(&parsed.parsed_bbox.expect("valid implies bbox"), &gt_region);
            if got < rules.min_bbox_iou {
                (
                    STATUS_REJECTED,
                    format!("bbox iou {got:.4} below threshold {:.4}", rules.min_bbox_iou),
                )
            } else {
                (STATUS_ACCEPTED, "matches ground truth".to_string())
            }
        };
        rec.provenance.review_status = decision.to_string();
        audit.push(AuditEntry {
            id: rec.id.clone(),
            decision: decision.to_string(),
            reason,
        });
    }
    audit
}

/// Run the whole pipeline over a fresh synthetic dataset: generate ground
/// truth, build raw diagnoses, reflect them into canonical form, validate,
/// and filter. Returns the records (all statuses) plus the audit log.
pub fn run_pipeline(
    world: &WorldConfig,
    n: usize,
    bundle: &PromptBundle,
    backend: &dyn TextBackend,
    rules: &ReviewRules,
) -> Result<(Vec<SampleRecord>, Vec<AuditEntry>), BuildError> {
    let vocab = world.vocab();
    let samples = generate_dataset(world, n)?;
    let mut records = Vec::with_capacity(samples.len());
    for sample in &samples {
        let inputs = BuildInputs::for_sample(sample, world, &vocab);
        let mut provenance = Provenance {
            backend: backend.id().to_string(),
            prompt_version: bundle.version.clone(),
            raw: String::new(),
            reflected: String::new(),
            review_status: STATUS_PENDING.into(),
        };
        let mut record = SampleRecord::from_sample(sample, &vocab, provenance.clone());
        match build_diagnosis(&inputs, bundle, backend) {
            Ok(raw) => {
                provenance.raw = raw.clone();
                match reflect(&raw, bundle, backend) {
                    Ok(reflected) => {
                        provenance.reflected = reflected.clone();
                        record.response = reflected;
                    }
                    Err(BuildError::Transport(e)) => return Err(BuildError::Transport(e)),
                    Err(_) => {}
                }
            }
            Err(BuildError::Transport(e)) => return Err(BuildError::Transport(e)),
            Err(_) => {}
        }
        record.provenance = provenance;
        records.push(record);
    }
    let audit = review_filter(&mut records, rules, &vocab);
    Ok((records, audit))
}

/// Keep only records a downstream trainer may consume.
pub fn exportable(records: &[SampleRecord]) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| {
            r.provenance.review_status == STATUS_ACCEPTED
                || r.provenance.review_status == STATUS_CORRECTED
        })
        .cloned()
        .collect()
}
