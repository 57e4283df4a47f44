//! Hallucination classification from internal confidence, the
//! output-probability baseline, and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::chair::{parse_objects, AnnotationRecord, ObjectLexicon};
use crate::decode::Caption;
use crate::error::{Error, Result};
use crate::lens::{LensScan, ObjectQuery};
use crate::model::{ImageInput, Model, TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Internal,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Present,
    Hallucinated,
}

/// One (image, object) scored for presence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredObject {
    pub image_id: String,
    pub object: String,
    pub score: f64,
    pub scorer: Scorer,
    pub label: Label,
}

/// Ranking metrics over scored objects; present is the positive class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub map: f64,
    pub roc_auc: f64,
    /// (recall, precision) at each distinct threshold, descending scores.
    pub pr_points: Vec<(f64, f64)>,
    /// (fpr, tpr) at each distinct threshold, descending scores.
    pub roc_points: Vec<(f64, f64)>,
    pub threshold_used: Option<f64>,
}

/// Score every object parsed from a caption.
///
/// Internal mode reads the image's lens scan (internal confidence).
/// Baseline mode takes the maximum output probability over the steps at
/// which any of the object's tokens were emitted; if the object's text was
/// parsed from the caption but none of its tokens were emitted directly,
/// the fallback is the probability of the object's first token at the step
/// covering the object's first occurrence in the caption text.
#[allow(clippy::too_many_arguments)]
pub fn score_caption_objects(
    model: &Model,
    img: &ImageInput,
    prompt: &[TokenId],
    caption: &Caption,
    lex: &ObjectLexicon,
    tokenizer: &Tokenizer,
    annotation: &AnnotationRecord,
    scorer: Scorer,
) -> Result<Vec<ScoredObject>> {
    let mentioned = parse_objects(&caption.text, lex);
    let mut queries = Vec::with_capacity(mentioned.len());
    for name in &mentioned {
        let surfaces = lex.surfaces_of(name).unwrap_or(&[]);
        queries.push(ObjectQuery::from_surfaces(name, surfaces, tokenizer)?);
    }

    let scan = match scorer {
        Scorer::Internal => {
            let out = model.forward_prefill(img, prompt, None)?;
            Some(LensScan::new(model, &out.trace)?)
        }
        Scorer::Baseline => None,
    };

    let mut out = Vec::with_capacity(queries.len());
    for q in &queries {
        let score = match scorer {
            Scorer::Internal => scan.as_ref().expect("scan built").confidence(q)?.c_o,
            Scorer::Baseline => baseline_score(caption, q, tokenizer)?,
        };
        let label = if annotation.present_objects.contains(&q.canonical_name) {
            Label::Present
        } else {
            Label::Hallucinated
        };
        out.push(ScoredObject {
            image_id: annotation.image_id.clone(),
            object: q.canonical_name.clone(),
            score,
            scorer,
            label,
        });
    }
    Ok(out)
}

fn baseline_score(caption: &Caption, obj: &ObjectQuery, tokenizer: &Tokenizer) -> Result<f64> {
    let mut best: Option<f64> = None;
    for (step, tok) in caption.token_ids.iter().enumerate() {
        if obj.token_ids.contains(tok) {
            let p = caption.per_step_probs[step][*tok as usize];
            best = Some(best.map_or(p, |b: f64| b.max(p)));
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    // Fallback: the object's text occurs in the caption under a different
    // segmentation. Score the first object token at the step covering the
    // first occurrence.
    let lower = caption.text.to_lowercase();
    let needle = obj.surface_form.trim_start().to_lowercase();
    let byte = lower.find(&needle).ok_or_else(|| {
        Error::Invalid(format!(
            "object {:?} neither emitted nor present in caption text",
            obj.canonical_name
        ))
    })?;
    let step = caption
        .step_covering_byte(tokenizer, byte)
        .ok_or_else(|| Error::Invalid("caption text/token misalignment".into()))?;
    caption
        .token_prob_at_step(step, obj.token_ids[0])
        .ok_or_else(|| Error::Invalid("missing per-step probabilities".into()))
}

/// Threshold rule: hallucinated iff score < threshold (strict).
pub fn classify(scored: &ScoredObject, threshold: f64) -> Label {
    if scored.score < threshold {
        Label::Hallucinated
    } else {
        Label::Present
    }
}

/// Average precision by the step-function sum over positives in
/// descending-score order, ties grouped and credited at the group's
/// precision. Matches an all-thresholds brute-force oracle exactly.
pub fn average_precision(scores_labels: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores_labels.iter().filter(|(_, l)| *l).count();
    let n_neg = scores_labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs both classes".into(),
        ));
    }
    let groups = tie_groups(scores_labels);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (gtp, gfp) in groups {
        tp += gtp;
        fp += gfp;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// ROC AUC by the rank-statistic formula with half-credit for ties.
pub fn roc_auc(scores_labels: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores_labels.iter().filter(|(_, l)| *l).count();
    let n_neg = scores_labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut wins = 0.0f64;
    for (sp, lp) in scores_labels.iter().filter(|(_, l)| *l) {
        for (sn, _) in scores_labels.iter().filter(|(_, l)| !*l) {
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
            let _ = lp;
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Cumulative (tp, fp) contributions per distinct score, descending.
fn tie_groups(scores_labels: &[(f64, bool)]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<(f64, bool)> = scores_labels.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut groups = Vec::new();
    let mut i = 0usize;
    while i < sorted.len() {
        let score = sorted[i].0;
        let mut tp = 0;
        let mut fp = 0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        groups.push((tp, fp));
    }
    groups
}

/// Full ranking report over scored objects. Requires at least one present
/// and one hallucinated example.
pub fn ranking_metrics(scored: &[ScoredObject]) -> Result<DetectionReport> {
    let pairs: Vec<(f64, bool)> = scored
        .iter()
        .map(|s| (s.score, s.label == Label::Present))
        .collect();
    let map = average_precision(&pairs)?;
    let auc = roc_auc(&pairs)?;

    let n_pos = pairs.iter().filter(|(_, l)| *l).count();
    let n_neg = pairs.len() - n_pos;
    let mut pr_points = Vec::new();
    let mut roc_points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (gtp, gfp) in tie_groups(&pairs) {
        tp += gtp;
        fp += gfp;
        pr_points.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
        roc_points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(DetectionReport {
        map,
        roc_auc: auc,
        pr_points,
        roc_points,
        threshold_used: None,
    })
}
