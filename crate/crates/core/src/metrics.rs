//! Page-level AR*/CR*, line AR/CR on concatenated pages, detection
//! precision/recall, and pseudo-label quality.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, GridShape};
use crate::matching::{ar, cr, edit_counts, match_lines, ClassId, PageAnnotation};
use crate::pseudolabels::PseudoLabelStore;
use crate::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub n_ie: usize,
    pub n_de: usize,
    pub n_se: usize,
    /// Annotated characters.
    pub n_total: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, other: &ErrorCounts) {
        self.n_ie += other.n_ie;
        self.n_de += other.n_de;
        self.n_se += other.n_se;
        self.n_total += other.n_total;
    }

    /// `(N - Ie - De - Se) / N`; may be negative.
    pub fn ar(&self) -> f64 {
        (self.n_total as f64 - (self.n_ie + self.n_de + self.n_se) as f64) / self.n_total as f64
    }

    /// `(N - De - Se) / N`.
    pub fn cr(&self) -> f64 {
        (self.n_total as f64 - (self.n_de + self.n_se) as f64) / self.n_total as f64
    }
}

/// Errors of one page after unthresholded greedy line matching. Unmatched
/// result lines are all insertions, unmatched annotation lines all deletions.
pub fn page_error_counts(results: &[Vec<ClassId>], annots: &[Vec<ClassId>]) -> ErrorCounts {
    let m_l = match_lines(results, annots, f64::NEG_INFINITY);
    let mut counts = ErrorCounts {
        n_total: annots.iter().map(Vec::len).sum(),
        ..ErrorCounts::default()
    };
    let matched_p: BTreeSet<usize> = m_l.iter().map(|l| l.p).collect();
    let matched_q: BTreeSet<usize> = m_l.iter().map(|l| l.q).collect();
    for pair in &m_l {
        let e = edit_counts(&results[pair.p], &annots[pair.q]);
        counts.n_ie += e.insertions;
        counts.n_de += e.deletions;
        counts.n_se += e.substitutions;
    }
    for (p, line) in results.iter().enumerate() {
        if !matched_p.contains(&p) {
            counts.n_ie += line.len();
        }
    }
    for (q, line) in annots.iter().enumerate() {
        if !matched_q.contains(&q) {
            counts.n_de += line.len();
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArStar {
    pub ar_star: f64,
    pub cr_star: f64,
    pub counts: ErrorCounts,
    pub per_page: Vec<ErrorCounts>,
}

/// AR* and CR* over pages; `results[k]` and `annots[k]` hold the lines of
/// page `k`.
pub fn ar_star(results: &[Vec<Vec<ClassId>>], annots: &[Vec<Vec<ClassId>>]) -> Result<ArStar> {
    if results.len() != annots.len() {
        return Err(Error::Domain(format!(
            "{} result pages for {} annotated pages",
            results.len(),
            annots.len()
        )));
    }
    let per_page: Vec<ErrorCounts> = results
        .iter()
        .zip(annots)
        .map(|(r, a)| page_error_counts(r, a))
        .collect();
    let mut counts = ErrorCounts::default();
    for c in &per_page {
        counts.add(c);
    }
    if counts.n_total == 0 {
        return Err(Error::Domain("annotations contain no characters".into()));
    }
    Ok(ArStar {
        ar_star: counts.ar(),
        cr_star: counts.cr(),
        counts,
        per_page,
    })
}

/// AR and CR of one page read as a single sequence.
pub fn page_ar_cr(result: &[ClassId], annot: &[ClassId]) -> Result<(f64, f64)> {
    Ok((ar(result, annot)?, cr(result, annot)?))
}

/// A detected or ground-truth character.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox<f64>,
    pub cls: ClassId,
    /// Ignored for ground truth.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Some ratio had a zero denominator and was set to 0.
    pub degenerate: bool,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                degenerate = true;
                0.0
            } else {
                num / den
            }
        };
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        let f = ratio(2.0 * precision * recall, precision + recall);
        Self {
            precision,
            recall,
            f,
            tp,
            fp,
            fn_,
            degenerate,
        }
    }
}

/// Greedy one-to-one matching of detections to ground truth, by descending
/// detection score (input order on ties). Each detection takes the unmatched
/// ground truth of highest IoU that reaches `iou_th` and, if
/// `require_class`, has the same class.
pub fn det_prf(results: &[Detection], gts: &[Detection], shape: &GridShape, iou_th: f64, require_class: bool) -> Prf {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[b].score.total_cmp(&results[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for k in order {
        let r = &results[k];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || (require_class && gt.cls != r.cls) {
                continue;
            }
            let v = iou(&r.bbox, &gt.bbox, shape);
            if v >= iou_th && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp += 1;
        }
    }
    Prf::from_counts(tp, results.len() - tp, gts.len() - tp)
}

/// Coverage and mean IoU of pseudo-labels against ground-truth boxes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    /// Annotated characters that have a pseudo-label, over all annotated
    /// characters.
    pub coverage: f64,
    /// Mean IoU between each existing pseudo-label and its ground-truth box;
    /// 0 when there are none.
    pub mean_iou: f64,
    pub labeled: usize,
    pub total: usize,
}

/// Label quality over pages given as annotations with boxes and their grid
/// shapes. Labels on characters without a ground-truth box count toward
/// coverage but not toward the mean IoU.
pub fn label_quality<T: Scalar>(store: &PseudoLabelStore<T>, pages: &[(&PageAnnotation, GridShape)]) -> LabelQuality {
    let mut labeled = 0;
    let mut total = 0;
    let mut iou_sum = 0.0;
    let mut iou_n = 0;
    for (annot, shape) in pages {
        for (q, line) in annot.lines.iter().enumerate() {
            for n in 0..line.len() {
                total += 1;
                if let Some(label) = store.get(&annot.page_id, q, n) {
                    labeled += 1;
                    if let Some(gt) = annot.gt_box(q, n) {
                        iou_sum += iou(&label.bbox.cast::<f64>(), &gt, shape);
                        iou_n += 1;
                    }
                }
            }
        }
    }
    LabelQuality {
        coverage: if total == 0 { 0.0 } else { labeled as f64 / total as f64 },
        mean_iou: if iou_n == 0 { 0.0 } else { iou_sum / iou_n as f64 },
        labeled,
        total,
    }
}
