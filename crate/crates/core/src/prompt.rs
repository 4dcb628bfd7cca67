//! System and user prompt assembly.
//!
//! Templates live in `templates/` as UTF-8 text, one per dataset and kind.
//! Few-shot templates carry a single `<<SHOTS>>` line where the example
//! images are inserted.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetId, LabelVocabulary};

pub const SHOTS_MARKER: &str = "<<SHOTS>>";
pub const SHOT_PREFACE: &str = "The following image contains";

const CRC100K_SYSTEM: &str = include_str!("../templates/crc100k_system.txt");
const CRC100K_ZERO: &str = include_str!("../templates/crc100k_zero.txt");
const CRC100K_FEW: &str = include_str!("../templates/crc100k_few.txt");
const PCAM_SYSTEM: &str = include_str!("../templates/pcam_system.txt");
const PCAM_ZERO: &str = include_str!("../templates/pcam_zero.txt");
const PCAM_FEW: &str = include_str!("../templates/pcam_few.txt");
const MHIST_SYSTEM: &str = include_str!("../templates/mhist_system.txt");
const MHIST_ZERO: &str = include_str!("../templates/mhist_zero.txt");
const MHIST_FEW: &str = include_str!("../templates/mhist_few.txt");

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";
const JPEG_SIGNATURE: &[u8] = &[0xFF, 0xD8, 0xFF];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("label {0:?} has no answer string")]
    EmptyLabelString(String),
    #[error("image file missing: {0}")]
    MissingFile(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no image for tile {0:?}")]
    UnknownTile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    System,
    Zero,
    Few,
}

/// Which option list the CRC100K user prompt shows when a label subset is
/// active. `Full` keeps the template untouched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    #[default]
    Full,
    Subset,
}

pub fn template(dataset: DatasetId, kind: TemplateKind) -> &'static str {
    use DatasetId::*;
    use TemplateKind::*;
    match (dataset, kind) {
        (Crc100k, System) => CRC100K_SYSTEM,
        (Crc100k, Zero) => CRC100K_ZERO,
        (Crc100k, Few) => CRC100K_FEW,
        (Pcam, System) => PCAM_SYSTEM,
        (Pcam, Zero) => PCAM_ZERO,
        (Pcam, Few) => PCAM_FEW,
        (Mhist, System) => MHIST_SYSTEM,
        (Mhist, Zero) => MHIST_ZERO,
        (Mhist, Few) => MHIST_FEW,
    }
}

pub fn system_prompt(dataset: &str) -> Result<&'static str, PromptError> {
    let id: DatasetId = dataset
        .parse()
        .map_err(|_| PromptError::UnknownDataset(dataset.to_string()))?;
    Ok(template(id, TemplateKind::System))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub media_type: String,
    /// `data:<media_type>;base64,<bytes>`
    pub data_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text {
        text: String,
    },
    Image {
        tile_id: String,
        #[serde(flatten)]
        payload: ImagePayload,
    },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text { text: s.into() }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Part::Image { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub dataset: DatasetId,
    pub k: usize,
    pub system_text: String,
    pub parts: Vec<Part>,
    /// Interleaved `(tile_id, label_key)` shots, in prompt order.
    pub shots: Vec<(String, String)>,
    pub target_tile_id: String,
}

impl PromptBundle {
    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| p.is_image()).count()
    }
}

/// Reads an image file and encodes it as a base64 data URL. The media type
/// comes from the file signature, not the extension.
pub fn render_image_part(path: impl AsRef<Path>) -> Result<ImagePayload, PromptError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            PromptError::MissingFile(path.display().to_string())
        } else {
            PromptError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    let media_type = if bytes.starts_with(PNG_SIGNATURE) {
        "image/png"
    } else if bytes.starts_with(JPEG_SIGNATURE) {
        "image/jpeg"
    } else {
        return Err(PromptError::UnsupportedFormat(path.display().to_string()));
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
    Ok(ImagePayload {
        media_type: media_type.to_string(),
        data_url: format!("data:{media_type};base64,{encoded}"),
    })
}

/// Drops option bullets for answers outside `vocab` from the
/// "Available tissue options are:" list. Other text is left untouched.
fn restrict_options(text: &str, vocab: &LabelVocabulary) -> String {
    let mut out = Vec::new();
    let mut in_options = false;
    for line in text.split('\n') {
        if line == "Available tissue options are:" {
            in_options = true;
            out.push(line);
            continue;
        }
        if in_options {
            if let Some(answer) = line
                .strip_prefix("- ")
                .and_then(|l| l.rsplit_once('('))
                .and_then(|(_, a)| a.strip_suffix(')'))
            {
                if vocab.labels.iter().any(|l| l.answer == answer) {
                    out.push(line);
                }
                continue;
            }
            in_options = false;
        }
        out.push(line);
    }
    out.join("\n")
}

/// Builds the user message. With no shots the zero-shot template is used;
/// otherwise each shot contributes `preface, image, answer` at the marker.
/// The target image is always the final part.
pub fn user_prompt<F>(
    vocab: &LabelVocabulary,
    interleaved_shots: &[(String, String)],
    target_tile_id: &str,
    variant: PromptVariant,
    mut resolve_image: F,
) -> Result<PromptBundle, PromptError>
where
    F: FnMut(&str) -> Result<ImagePayload, PromptError>,
{
    let dataset = vocab.dataset;
    let adapt = |t: &str| match variant {
        PromptVariant::Full => t.to_string(),
        PromptVariant::Subset => restrict_options(t, vocab),
    };

    let mut parts = Vec::with_capacity(interleaved_shots.len() * 3 + 3);
    if interleaved_shots.is_empty() {
        parts.push(Part::text(adapt(template(dataset, TemplateKind::Zero))));
    } else {
        let few = adapt(template(dataset, TemplateKind::Few));
        let (before, after) = few
            .split_once(SHOTS_MARKER)
            .expect("few-shot templates contain the shots marker");
        parts.push(Part::text(before.trim_end()));
        for (tile_id, label) in interleaved_shots {
            let answer = vocab
                .answer_for(label)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| PromptError::EmptyLabelString(label.clone()))?;
            parts.push(Part::text(SHOT_PREFACE));
            parts.push(Part::Image {
                tile_id: tile_id.clone(),
                payload: resolve_image(tile_id)?,
            });
            parts.push(Part::text(answer));
        }
        parts.push(Part::text(after.trim_start()));
    }
    parts.push(Part::Image {
        tile_id: target_tile_id.to_string(),
        payload: resolve_image(target_tile_id)?,
    });

    let labels = vocab.len().max(1);
    Ok(PromptBundle {
        dataset,
        k: interleaved_shots.len() / labels,
        system_text: template(dataset, TemplateKind::System).to_string(),
        parts,
        shots: interleaved_shots.to_vec(),
        target_tile_id: target_tile_id.to_string(),
    })
}
