//! The six training losses evaluated as numbers against possibly incomplete
//! targets. Nothing here is differentiated.

use serde::{Deserialize, Serialize};

use crate::geometry::{abs_to_rel, GridCoord};
use crate::matching::PageAnnotation;
use crate::predictions::PredictionMaps;
use crate::pseudolabels::{LossTargets, PseudoLabelStore};
use crate::Scalar;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Diagonal weights of the box error: x, y, w, h.
pub const BOX_WEIGHTS: [f64; 4] = [1.0, 1.0, 0.1, 0.1];

/// One loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub value: f64,
    pub samples: usize,
    /// No samples contributed; `value` is 0.
    pub empty: bool,
    /// Probabilities that had to be clamped.
    pub clamped: usize,
}

#[derive(Default)]
struct LogAcc {
    sum: f64,
    n: usize,
    clamped: usize,
}

impl LogAcc {
    fn push(&mut self, p: f64) {
        let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if c != p {
            self.clamped += 1;
        }
        self.sum -= c.ln();
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// `mean(-log p)` over positives and `mean(-log(1 - p))` over negatives, each
/// weighted by one half. An empty half contributes 0.
fn balanced_bce<T: Scalar>(
    pos: impl Iterator<Item = GridCoord>,
    neg: impl Iterator<Item = GridCoord>,
    prob: impl Fn(GridCoord) -> T,
) -> Term {
    let mut p_acc = LogAcc::default();
    let mut n_acc = LogAcc::default();
    for g in pos {
        p_acc.push(prob(g).as_f64());
    }
    for g in neg {
        n_acc.push(1.0 - prob(g).as_f64());
    }
    let samples = p_acc.n + n_acc.n;
    Term {
        value: 0.5 * p_acc.mean() + 0.5 * n_acc.mean(),
        samples,
        empty: samples == 0,
        clamped: p_acc.clamped + n_acc.clamped,
    }
}

pub fn loss_dis<T: Scalar>(maps: &PredictionMaps<T>, targets: &LossTargets) -> Term {
    balanced_bce(targets.s_c.keys().copied(), targets.s_d_neg.iter().copied(), |g| {
        maps.dis(g)
    })
}

pub fn loss_sol<T: Scalar>(maps: &PredictionMaps<T>, targets: &LossTargets) -> Term {
    balanced_bce(targets.s_s_pos.iter().copied(), targets.s_s_neg.iter().copied(), |g| {
        maps.sol(g)
    })
}

pub fn loss_eol<T: Scalar>(maps: &PredictionMaps<T>, targets: &LossTargets) -> Term {
    balanced_bce(targets.s_e_pos.iter().copied(), targets.s_e_neg.iter().copied(), |g| {
        maps.eol(g)
    })
}

/// Weighted squared error between predicted relative boxes and the stored
/// pseudo-labels converted to relative boxes at their grids.
pub fn loss_box<T: Scalar>(
    maps: &PredictionMaps<T>,
    targets: &LossTargets,
    store: &PseudoLabelStore<T>,
    page_id: &str,
) -> Term {
    let mut sum = 0.0;
    let mut n = 0;
    for (&g, &(q, k)) in &targets.s_c {
        let Some(label) = store.get(page_id, q, k) else {
            continue;
        };
        let target = abs_to_rel(&label.bbox, g, &maps.shape).to_array();
        let predicted = maps.rel_box(g).to_array();
        sum += (0..4)
            .map(|c| {
                let d = predicted[c].as_f64() - target[c].as_f64();
                BOX_WEIGHTS[c] * d * d
            })
            .sum::<f64>();
        n += 1;
    }
    Term {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        samples: n,
        empty: n == 0,
        clamped: 0,
    }
}

/// Cross entropy of the annotated class at every pseudo-labeled grid.
pub fn loss_cls<T: Scalar>(maps: &PredictionMaps<T>, targets: &LossTargets, annot: &PageAnnotation) -> Term {
    let mut acc = LogAcc::default();
    for (&g, &(q, n)) in &targets.s_c {
        if let Some(&c) = annot.lines.get(q).and_then(|l| l.get(n)) {
            acc.push(maps.cls_prob(g, c).as_f64());
        }
    }
    Term {
        value: acc.mean(),
        samples: acc.n,
        empty: acc.n == 0,
        clamped: acc.clamped,
    }
}

pub fn loss_rd<T: Scalar>(maps: &PredictionMaps<T>, targets: &LossTargets) -> Term {
    let mut acc = LogAcc::default();
    for &(g, d) in &targets.s_rd {
        if maps.shape.contains(g) {
            acc.push(maps.rd_prob(g, d).as_f64());
        }
    }
    Term {
        value: acc.mean(),
        samples: acc.n,
        empty: acc.n == 0,
        clamped: acc.clamped,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_dis: Term,
    pub l_box: Term,
    pub l_cls: Term,
    pub l_sol: Term,
    pub l_eol: Term,
    pub l_rd: Term,
    /// Unweighted sum of the six term values.
    pub l_total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, &Term); 6] {
        [
            ("l_dis", &self.l_dis),
            ("l_box", &self.l_box),
            ("l_cls", &self.l_cls),
            ("l_sol", &self.l_sol),
            ("l_eol", &self.l_eol),
            ("l_rd", &self.l_rd),
        ]
    }

    /// Sum of the term values.
    pub fn sum(&self) -> f64 {
        self.terms().iter().map(|(_, t)| t.value).sum()
    }
}

/// All six terms of one page and their sum.
pub fn loss_total<T: Scalar>(
    maps: &PredictionMaps<T>,
    targets: &LossTargets,
    store: &PseudoLabelStore<T>,
    annot: &PageAnnotation,
) -> LossReport {
    let mut report = LossReport {
        l_dis: loss_dis(maps, targets),
        l_box: loss_box(maps, targets, store, &annot.page_id),
        l_cls: loss_cls(maps, targets, annot),
        l_sol: loss_sol(maps, targets),
        l_eol: loss_eol(maps, targets),
        l_rd: loss_rd(maps, targets),
        l_total: 0.0,
    };
    report.l_total = report.sum();
    report
}
