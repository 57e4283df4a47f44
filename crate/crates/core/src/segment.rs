//! Zero-shot foreground/background segmentation from confidence maps,
//! its metrics, and per-patch top-k class accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chair::ObjectLexicon;
use crate::detect::average_precision;
use crate::error::{Error, Result};
use crate::lens::{object_probability, ConfidenceMap, LensScan, ObjectQuery};
use crate::model::{ImageInput, Model, TokenId, Tokenizer};
use crate::numkernel::{resize_bilinear, Matrix};

/// Binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub fg: Vec<bool>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, fg: Vec<bool>) -> Result<Self> {
        if fg.len() != height * width {
            return Err(Error::Shape(format!(
                "mask length {} != {}x{}",
                fg.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, fg })
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.fg[r * self.width + c]
    }
}

/// Segmentation quality bundle. `map` is present only when per-pixel
/// scores were supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub pixel_acc: f64,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

/// Resize the confidence grid bilinearly to the output size, then threshold:
/// foreground iff value >= threshold.
pub fn confidence_to_mask(
    map: &ConfidenceMap,
    out_h: usize,
    out_w: usize,
    threshold: f64,
) -> Result<SegMask> {
    let resized = resize_bilinear(&map.grid, out_h, out_w)?;
    let fg = resized.data().iter().map(|&v| v >= threshold).collect();
    SegMask::new(out_h, out_w, fg)
}

/// The resized per-pixel score field used for mask mAP.
pub fn resized_scores(map: &ConfidenceMap, out_h: usize, out_w: usize) -> Result<Matrix> {
    resize_bilinear(&map.grid, out_h, out_w)
}

fn iou(pred: &SegMask, gt: &SegMask, target: bool) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.fg.iter().zip(gt.fg.iter()) {
        let p = *p == target;
        let g = *g == target;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixel accuracy, mean IoU over {foreground, background}, and (when
/// scores are given) average precision of per-pixel scores against the
/// ground-truth labels.
pub fn segmentation_metrics(
    pred: &SegMask,
    gt: &SegMask,
    scores: Option<&Matrix>,
) -> Result<SegReport> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "mask dims {}x{} != {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let total = pred.fg.len();
    let correct = pred
        .fg
        .iter()
        .zip(gt.fg.iter())
        .filter(|(p, g)| p == g)
        .count();
    let miou = (iou(pred, gt, true) + iou(pred, gt, false)) / 2.0;
    let map = match scores {
        Some(s) => {
            if s.rows() != gt.height || s.cols() != gt.width {
                return Err(Error::Shape("score field dims mismatch".into()));
            }
            let pairs: Vec<(f64, bool)> = s
                .data()
                .iter()
                .zip(gt.fg.iter())
                .map(|(&v, &g)| (v, g))
                .collect();
            Some(average_precision(&pairs)?)
        }
        None => None,
    };
    Ok(SegReport {
        pixel_acc: correct as f64 / total as f64,
        miou,
        map,
    })
}

/// Per-class and overall top-k accuracy report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopkReport {
    pub k: usize,
    /// class -> (hits, labeled patches).
    pub per_class: BTreeMap<String, (usize, usize)>,
    pub overall: f64,
}

/// For each labeled patch, rank lexicon objects by their max-over-layers,
/// max-over-tokens lens probability at that patch; a hit means the
/// ground-truth class ranks within the top k.
pub fn patch_topk_accuracy(
    model: &Model,
    img: &ImageInput,
    prompt: &[TokenId],
    gt_classes: &BTreeMap<usize, String>,
    lex: &ObjectLexicon,
    tokenizer: &Tokenizer,
    k: usize,
) -> Result<TopkReport> {
    if gt_classes.is_empty() {
        return Err(Error::Invalid("empty patch ground truth".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let out = model.forward_prefill(img, prompt, None)?;
    let scan = LensScan::new(model, &out.trace)?;
    let queries: Vec<ObjectQuery> = lex
        .canonicals()
        .map(|c| ObjectQuery::from_surfaces(c, lex.surfaces_of(c).unwrap_or(&[]), tokenizer))
        .collect::<Result<_>>()?;

    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0usize;
    for (&patch, class) in gt_classes {
        if patch >= scan.n_patches() {
            return Err(Error::Invalid(format!(
                "labeled patch {patch} outside image range"
            )));
        }
        // Score every object at this patch: max over layers of the
        // per-layer object probability.
        let mut scores: Vec<(f64, &str)> = Vec::with_capacity(queries.len());
        for q in &queries {
            let mut best = f64::NEG_INFINITY;
            for l in 1..=scan.n_layers() {
                best = best.max(object_probability(scan.probs_at(l, patch), q)?);
            }
            scores.push((best, q.canonical_name.as_str()));
        }
        scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let hit = scores.iter().take(k).any(|(_, name)| *name == class);
        let entry = per_class.entry(class.clone()).or_insert((0, 0));
        entry.1 += 1;
        if hit {
            entry.0 += 1;
            hits += 1;
        }
    }
    Ok(TopkReport {
        k,
        per_class,
        overall: hits as f64 / gt_classes.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, ones: &[(usize, usize)]) -> SegMask {
        let mut fg = vec![false; h * w];
        for &(r, c) in ones {
            fg[r * w + c] = true;
        }
        SegMask::new(h, w, fg).unwrap()
    }

    fn const_map(h: usize, w: usize, v: f64) -> ConfidenceMap {
        ConfidenceMap {
            grid: Matrix::new(h, w, vec![v; h * w]).unwrap(),
        }
    }

    #[test]
    fn constant_map_thresholds() {
        let m = const_map(2, 2, 0.8);
        let all = confidence_to_mask(&m, 3, 3, 0.5).unwrap();
        assert!(all.fg.iter().all(|&b| b));
        let none = confidence_to_mask(&m, 3, 3, 0.81).unwrap();
        assert!(none.fg.iter().all(|&b| !b));
        let zero = confidence_to_mask(&m, 3, 3, 0.0).unwrap();
        assert!(zero.fg.iter().all(|&b| b));
    }

    #[test]
    fn hand_evaluated_bilinear_threshold() {
        // 2x2 [[1,0],[0,0]] to 4x4 at threshold 0.5. Corner-aligned sample
        // coordinates are i/3; the value at (i,j) is (1-i/3)(1-j/3).
        let m = ConfidenceMap {
            grid: Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        };
        let got = confidence_to_mask(&m, 4, 4, 0.5).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let v = (1.0 - r as f64 / 3.0) * (1.0 - c as f64 / 3.0);
                assert_eq!(got.get(r, c), v >= 0.5, "pixel ({r},{c}) value {v}");
            }
        }
        // Explicitly: only (0,0) at 1.0 and (0,1)/(1,0) at 2/3 pass.
        assert_eq!(
            got,
            mask(4, 4, &[(0, 0), (0, 1), (1, 0)]),
        );
    }

    #[test]
    fn metrics_identity() {
        let a = mask(2, 2, &[(0, 0), (1, 1)]);
        let r = segmentation_metrics(&a, &a, None).unwrap();
        assert_eq!(r.pixel_acc, 1.0);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn metrics_hand_counts() {
        // pred [[1,0],[0,0]] vs gt [[1,1],[0,0]]: acc 0.75, fg IoU 0.5,
        // bg IoU 2/3, mIoU 7/12.
        let pred = mask(2, 2, &[(0, 0)]);
        let gt = mask(2, 2, &[(0, 0), (0, 1)]);
        let r = segmentation_metrics(&pred, &gt, None).unwrap();
        assert_eq!(r.pixel_acc, 0.75);
        assert_eq!(r.miou, (0.5 + 2.0 / 3.0) / 2.0);
        assert_eq!(r.miou, 7.0 / 12.0);
    }

    #[test]
    fn metrics_scores_perfect_ranking() {
        let gt = mask(2, 2, &[(0, 0), (0, 1)]);
        let pred = gt.clone();
        let scores = Matrix::new(2, 2, vec![0.9, 0.8, 0.1, 0.2]).unwrap();
        let r = segmentation_metrics(&pred, &gt, Some(&scores)).unwrap();
        assert_eq!(r.map, Some(1.0));
    }

    #[test]
    fn metrics_dim_mismatch() {
        let a = mask(2, 2, &[]);
        let b = mask(2, 3, &[]);
        assert!(segmentation_metrics(&a, &b, None).is_err());
    }

    #[test]
    fn mask_monotone_in_threshold() {
        let grid = Matrix::new(3, 3, (0..9).map(|i| i as f64 / 8.0).collect()).unwrap();
        let m = ConfidenceMap { grid };
        let low = confidence_to_mask(&m, 6, 6, 0.3).unwrap();
        let high = confidence_to_mask(&m, 6, 6, 0.6).unwrap();
        for (l, h) in low.fg.iter().zip(high.fg.iter()) {
            // Raising the threshold never turns a 0 into a 1.
            assert!(!(*h && !*l));
        }
    }

    #[test]
    fn metrics_symmetric_under_relabel() {
        let pred = mask(2, 3, &[(0, 0), (1, 2)]);
        let gt = mask(2, 3, &[(0, 0), (0, 1)]);
        let flip = |m: &SegMask| SegMask {
            height: m.height,
            width: m.width,
            fg: m.fg.iter().map(|b| !b).collect(),
        };
        let r1 = segmentation_metrics(&pred, &gt, None).unwrap();
        let r2 = segmentation_metrics(&flip(&pred), &flip(&gt), None).unwrap();
        assert_eq!(r1.pixel_acc, r2.pixel_acc);
        assert_eq!(r1.miou, r2.miou);
    }
}
