//! Object extraction from captions and CHAIR / recall / removal metrics.
//!
//! All report values are exact rationals evaluated in floating point, so
//! fixtures assert equality rather than tolerance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical objects, each with its synonym surface forms. The canonical
/// name is always one of its own surface forms; surface forms are unique
/// across the lexicon.
#[derive(Debug, Clone)]
pub struct ObjectLexicon {
    entries: BTreeMap<String, Vec<String>>,
    /// (surface lowercased, canonical), longest surface first.
    surfaces: Vec<(String, String)>,
}

impl ObjectLexicon {
    pub fn new(map: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::Invalid("empty object lexicon".into()));
        }
        let mut entries = BTreeMap::new();
        let mut surfaces: Vec<(String, String)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (canonical, mut forms) in map {
            if !forms.iter().any(|f| f == &canonical) {
                forms.insert(0, canonical.clone());
            }
            for form in &forms {
                let lower = form.to_lowercase();
                if !seen.insert(lower.clone()) {
                    return Err(Error::Invalid(format!(
                        "surface form {form:?} appears under more than one object"
                    )));
                }
                surfaces.push((lower, canonical.clone()));
            }
            entries.insert(canonical, forms);
        }
        // Longest-match scan: longer surfaces take precedence.
        surfaces.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(Self { entries, surfaces })
    }

    pub fn canonicals(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn surfaces_of(&self, canonical: &str) -> Option<&[String]> {
        self.entries.get(canonical).map(Vec::as_slice)
    }

    /// Load a JSON map canonical -> [surface forms].
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&raw)?;
        Self::new(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(&self.entries)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// Ground-truth annotations for one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub present_objects: BTreeSet<String>,
    /// Optional per-object ground-truth mask files (relative paths).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub masks: BTreeMap<String, String>,
}

/// One dataset line: an image file plus its annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image_file: String,
    pub annotations: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub masks: BTreeMap<String, String>,
}

impl DatasetRecord {
    pub fn annotation(&self) -> AnnotationRecord {
        AnnotationRecord {
            image_id: self.image_id.clone(),
            present_objects: self.annotations.iter().cloned().collect(),
            masks: self.masks.clone(),
        }
    }
}

/// Load a JSON-lines dataset, one record per image.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

/// Case-insensitive, word-boundary-respecting longest-match scan. Each
/// canonical object is reported at most once.
pub fn parse_objects(caption: &str, lex: &ObjectLexicon) -> BTreeSet<String> {
    let lower = caption.to_lowercase();
    let bytes = lower.as_bytes();
    let mut found = BTreeSet::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let at_word_start = is_word_byte(bytes[i]) && (i == 0 || !is_word_byte(bytes[i - 1]));
        if !at_word_start {
            i += 1;
            continue;
        }
        let mut matched = None;
        for (surface, canonical) in &lex.surfaces {
            let end = i + surface.len();
            if end <= bytes.len()
                && &lower[i..end] == surface
                && (end == bytes.len() || !is_word_byte(bytes[end]))
            {
                matched = Some((canonical.clone(), surface.len()));
                break;
            }
        }
        match matched {
            Some((canonical, len)) => {
                found.insert(canonical);
                i += len;
            }
            None => {
                // Skip the rest of this word.
                while i < bytes.len() && is_word_byte(bytes[i]) {
                    i += 1;
                }
            }
        }
    }
    found
}

/// CHAIR metric bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub n_hallucinated: usize,
    pub n_cd: usize,
    pub n_captions: usize,
}

/// Sentence- and instance-level hallucination rates plus recall.
///
/// Object mentions are unique per caption: a repeated hallucinated word
/// counts once for its caption.
pub fn chair_scores(
    captions: &[(String, AnnotationRecord)],
    lex: &ObjectLexicon,
) -> Result<ChairReport> {
    if captions.is_empty() {
        return Err(Error::UndefinedMetric("chair over zero captions".into()));
    }
    let mut n_hallucinated = 0usize;
    let mut n_cd = 0usize;
    let mut captions_with_hallucination = 0usize;
    let mut n_annotated = 0usize;
    for (text, ann) in captions {
        let mentioned = parse_objects(text, lex);
        let halluc = mentioned.difference(&ann.present_objects).count();
        let cd = mentioned.len() - halluc;
        if halluc > 0 {
            captions_with_hallucination += 1;
        }
        n_hallucinated += halluc;
        n_cd += cd;
        n_annotated += ann.present_objects.len();
    }
    let n_mentions = n_hallucinated + n_cd;
    Ok(ChairReport {
        chair_s: captions_with_hallucination as f64 / captions.len() as f64,
        chair_i: if n_mentions > 0 {
            n_hallucinated as f64 / n_mentions as f64
        } else {
            0.0
        },
        recall: if n_annotated > 0 {
            n_cd as f64 / n_annotated as f64
        } else {
            0.0
        },
        n_hallucinated,
        n_cd,
        n_captions: captions.len(),
    })
}

/// One per-object individual edit outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndividualEdit {
    pub image_id: String,
    pub object: String,
    pub caption_after: String,
}

/// One mass-edit outcome over a set of target objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassEdit {
    pub image_id: String,
    pub targets: Vec<String>,
    pub caption_after: String,
}

/// Removal-rate bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub individual_rr: f64,
    pub mass_rr: f64,
    pub cd_change: f64,
}

/// Removal rates for individual and mass edits, plus the relative change in
/// correctly-detected object count between the before and mass-edited runs.
pub fn removal_report(
    before: &[(String, AnnotationRecord)],
    after_individual: &[IndividualEdit],
    after_mass: &[MassEdit],
    lex: &ObjectLexicon,
) -> Result<RemovalReport> {
    let by_id: BTreeMap<&str, &AnnotationRecord> = before
        .iter()
        .map(|(_, ann)| (ann.image_id.as_str(), ann))
        .collect();

    let mut individual_removed = 0usize;
    for edit in after_individual {
        if !by_id.contains_key(edit.image_id.as_str()) {
            return Err(Error::MisalignedRuns(format!(
                "individual edit for unknown image {:?}",
                edit.image_id
            )));
        }
        if !parse_objects(&edit.caption_after, lex).contains(&edit.object) {
            individual_removed += 1;
        }
    }

    let mut mass_targets = 0usize;
    let mut mass_removed = 0usize;
    let mut cd_after = 0usize;
    for edit in after_mass {
        let ann = by_id.get(edit.image_id.as_str()).ok_or_else(|| {
            Error::MisalignedRuns(format!("mass edit for unknown image {:?}", edit.image_id))
        })?;
        let mentioned = parse_objects(&edit.caption_after, lex);
        for target in &edit.targets {
            mass_targets += 1;
            if !mentioned.contains(target) {
                mass_removed += 1;
            }
        }
        cd_after += mentioned.intersection(&ann.present_objects).count();
    }
    if after_mass.len() != before.len() {
        return Err(Error::MisalignedRuns(format!(
            "mass run covers {} images, before run {}",
            after_mass.len(),
            before.len()
        )));
    }

    let mut cd_before = 0usize;
    for (text, ann) in before {
        cd_before += parse_objects(text, lex)
            .intersection(&ann.present_objects)
            .count();
    }

    Ok(RemovalReport {
        individual_rr: ratio(individual_removed, after_individual.len()),
        mass_rr: ratio(mass_removed, mass_targets),
        cd_change: if cd_before > 0 {
            (cd_after as f64 - cd_before as f64) / cd_before as f64
        } else {
            0.0
        },
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
