//! Semantic matching of predicted lines to line transcripts (accurate-rate
//! line matching, edit-distance character matching) and the IoU veto of
//! spatial matching.
//!
//! Line and character indices are 0-based throughout.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::PageResult;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::pseudolabels::PseudoLabelStore;
use crate::Scalar;

/// Category id; valid ids are `1..=n_cls`.
pub type ClassId = u32;

/// Line transcripts of one page, optionally with ground-truth boxes. Matching
/// never looks at the boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageAnnotation {
    pub page_id: String,
    pub lines: Vec<Vec<ClassId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<Vec<[f64; 4]>>>,
}

impl PageAnnotation {
    pub fn new(page_id: impl Into<String>, lines: Vec<Vec<ClassId>>) -> Self {
        Self {
            page_id: page_id.into(),
            lines,
            boxes: None,
        }
    }

    pub fn n_chars(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }

    /// Ground-truth box of character `n` on line `q`, when boxes are present.
    pub fn gt_box(&self, q: usize, n: usize) -> Option<BBox<f64>> {
        self.boxes
            .as_ref()
            .and_then(|b| b.get(q))
            .and_then(|line| line.get(n))
            .map(|a| BBox::from_array(*a))
    }

    pub fn validate(&self, n_cls: Option<u32>) -> Result<()> {
        for (q, line) in self.lines.iter().enumerate() {
            if line.is_empty() {
                return Err(Error::format("lines", format!("{}: line {q} is empty", self.page_id)));
            }
            if let Some(&bad) = line.iter().find(|&&c| c == 0 || n_cls.is_some_and(|n| c > n)) {
                return Err(Error::format(
                    "lines",
                    format!("{}: class id {bad} out of range on line {q}", self.page_id),
                ));
            }
        }
        if let Some(boxes) = &self.boxes {
            let shape_ok =
                boxes.len() == self.lines.len() && boxes.iter().zip(&self.lines).all(|(b, l)| b.len() == l.len());
            if !shape_ok {
                return Err(Error::format(
                    "boxes",
                    format!("{}: not parallel to lines", self.page_id),
                ));
            }
        }
        Ok(())
    }
}

/// Reads annotation JSON lines, one page per line.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<PageAnnotation>> {
    let text = std::fs::read_to_string(path)?;
    let mut pages = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let page: PageAnnotation =
            serde_json::from_str(line).map_err(|e| Error::format("annotation", format!("line {}: {e}", k + 1)))?;
        page.validate(None)?;
        pages.push(page);
    }
    Ok(pages)
}

pub fn write_annotations<'a>(
    path: impl AsRef<Path>,
    pages: impl IntoIterator<Item = &'a PageAnnotation>,
) -> Result<()> {
    let mut out = String::new();
    for page in pages {
        out.push_str(&serde_json::to_string(page)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One step of an edit script from a reference to a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditOp {
    Equal,
    Substitute,
    /// Extra hypothesis symbol.
    Insert,
    /// Reference symbol missing from the hypothesis.
    Delete,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

/// A minimum edit script together with the index pairs it aligns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// Script in forward order.
    pub ops: Vec<EditOp>,
    /// `(hyp_index, ref_index)` for every `Equal` or `Substitute` step.
    pub pairs: Vec<(usize, usize, EditOp)>,
    pub counts: EditCounts,
}

impl Alignment {
    /// States of the hypothesis symbols only (deletions dropped), in order.
    pub fn hyp_states(&self) -> Vec<EditOp> {
        self.ops.iter().copied().filter(|op| *op != EditOp::Delete).collect()
    }
}

/// Levenshtein alignment with unit costs.
///
/// Minimum scripts are not unique; the backtrace walks from the end of the
/// table and prefers Equal, then Substitute, then Delete, then Insert.
pub fn align<S: PartialEq>(hyp: &[S], reference: &[S]) -> Alignment {
    let n = reference.len();
    let m = hyp.len();
    let width = m + 1;
    let mut table = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        table[i * width] = i;
    }
    for (j, cell) in table[..width].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = table[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = table[(i - 1) * width + j] + 1;
            let ins = table[i * width + j - 1] + 1;
            table[i * width + j] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let mut pairs = Vec::new();
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = table[i * width + j];
        if i > 0 && j > 0 {
            let diag = table[(i - 1) * width + j - 1];
            if reference[i - 1] == hyp[j - 1] && here == diag {
                ops.push(EditOp::Equal);
                pairs.push((j - 1, i - 1, EditOp::Equal));
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 {
                ops.push(EditOp::Substitute);
                pairs.push((j - 1, i - 1, EditOp::Substitute));
                counts.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == table[(i - 1) * width + j] + 1 {
            ops.push(EditOp::Delete);
            counts.deletions += 1;
            i -= 1;
            continue;
        }
        ops.push(EditOp::Insert);
        counts.insertions += 1;
        j -= 1;
    }
    ops.reverse();
    pairs.reverse();
    Alignment { ops, pairs, counts }
}

/// Edit error counts of `hyp` against `reference`.
pub fn edit_counts<S: PartialEq>(hyp: &[S], reference: &[S]) -> EditCounts {
    align(hyp, reference).counts
}

/// Accurate rate `(N - Ie - De - Se) / N`, `N = |reference|`. May be negative.
pub fn ar<S: PartialEq>(hyp: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("accurate rate of an empty reference".into()));
    }
    let c = edit_counts(hyp, reference);
    let n = reference.len() as f64;
    Ok((n - c.total() as f64) / n)
}

/// Correct rate `(N - De - Se) / N`.
pub fn cr<S: PartialEq>(hyp: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("correct rate of an empty reference".into()));
    }
    let c = edit_counts(hyp, reference);
    let n = reference.len() as f64;
    Ok((n - (c.deletions + c.substitutions) as f64) / n)
}

/// `(p, q)`: result line `p` is matched to transcript `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinePair {
    pub p: usize,
    pub q: usize,
}

/// `(p, m, q, n)`: character `m` of result line `p` equals character `n` of
/// transcript `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CharPair {
    pub p: usize,
    pub m: usize,
    pub q: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    pub m_l: BTreeSet<LinePair>,
    pub m_c: BTreeSet<CharPair>,
    /// `(p, m)` equal result characters followed by another equal one or by
    /// the end of the line.
    pub m_ce: BTreeSet<(usize, usize)>,
}

/// Greedy one-to-one line matching by descending accurate rate.
///
/// Pairs with AR below `th_ar` are skipped; equal ARs are visited in
/// `(p, q)` order. Pass `f64::NEG_INFINITY` to disable the threshold.
pub fn match_lines(results: &[Vec<ClassId>], annots: &[Vec<ClassId>], th_ar: f64) -> BTreeSet<LinePair> {
    let mut scored = Vec::with_capacity(results.len() * annots.len());
    for (p, hyp) in results.iter().enumerate() {
        for (q, reference) in annots.iter().enumerate() {
            if let Ok(rate) = ar(hyp, reference) {
                scored.push((rate, LinePair { p, q }));
            }
        }
    }
    // stable: (p, q) order survives among equal rates
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut used_p = vec![false; results.len()];
    let mut used_q = vec![false; annots.len()];
    let mut out = BTreeSet::new();
    for (rate, pair) in scored {
        if rate >= th_ar && !used_p[pair.p] && !used_q[pair.q] {
            used_p[pair.p] = true;
            used_q[pair.q] = true;
            out.insert(pair);
        }
    }
    out
}

/// Character matches and consecutive equals for every matched line pair.
pub fn match_chars(
    m_l: &BTreeSet<LinePair>,
    results: &[Vec<ClassId>],
    annots: &[Vec<ClassId>],
) -> (BTreeSet<CharPair>, BTreeSet<(usize, usize)>) {
    let mut m_c = BTreeSet::new();
    let mut m_ce = BTreeSet::new();
    for &LinePair { p, q } in m_l {
        let alignment = align(&results[p], &annots[q]);
        let states = alignment.hyp_states();
        let equal_at: Vec<Option<usize>> = {
            let mut v = vec![None; results[p].len()];
            for &(m, n, op) in &alignment.pairs {
                if op == EditOp::Equal {
                    v[m] = Some(n);
                }
            }
            v
        };
        for (m, state) in states.iter().enumerate() {
            if *state != EditOp::Equal {
                continue;
            }
            let n = equal_at[m].expect("equal state has a reference index");
            m_c.insert(CharPair { p, m, q, n });
            if m + 1 == states.len() || states[m + 1] == EditOp::Equal {
                m_ce.insert((p, m));
            }
        }
    }
    (m_c, m_ce)
}

/// Runs line and character matching.
pub fn semantic_match(results: &[Vec<ClassId>], annots: &[Vec<ClassId>], th_ar: f64) -> MatchSet {
    let m_l = match_lines(results, annots, th_ar);
    let (m_c, m_ce) = match_chars(&m_l, results, annots);
    MatchSet { m_l, m_c, m_ce }
}

/// Drops character pairs whose predicted box overlaps the stored pseudo-label
/// by less than `th_iou`. Pairs without a pseudo-label pass through.
pub fn spatial_filter<T: Scalar>(
    m_c: &BTreeSet<CharPair>,
    result: &PageResult<T>,
    store: &PseudoLabelStore<T>,
    page_id: &str,
    th_iou: T,
) -> BTreeSet<CharPair> {
    m_c.iter()
        .copied()
        .filter(|pair| match store.get(page_id, pair.q, pair.n) {
            None => true,
            Some(label) => {
                let predicted = &result.lines[pair.p].chars[pair.m].bbox;
                iou(predicted, &label.bbox, &result.shape) >= th_iou
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    #[test]
    fn ar_examples() {
        assert_eq!(ar(&s("ab"), &s("ab")).unwrap(), 1.0);
        assert!((ar(&s("axc"), &s("abc")).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((ar(&s("abcd"), &s("abc")).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(cr(&s("abcd"), &s("abc")).unwrap(), 1.0);
        assert!(ar(&s("a"), &[]).is_err());
        assert_eq!(ar(&s("xyzw"), &s("a")).unwrap(), -3.0);
    }

    #[test]
    fn canonical_script_prefers_substitution_over_indel() {
        // "ba" vs "ab": S,S and I,E,D both cost 2.
        let a = align(&s("ba"), &s("ab"));
        assert_eq!(a.ops, vec![EditOp::Substitute, EditOp::Substitute]);
        assert_eq!(
            a.counts,
            EditCounts {
                insertions: 0,
                deletions: 0,
                substitutions: 2
            }
        );
    }

    #[test]
    fn match_lines_examples() {
        let m = match_lines(&[s("abc")], &[s("abc"), s("xyz")], 0.3);
        assert_eq!(m.into_iter().collect::<Vec<_>>(), vec![LinePair { p: 0, q: 0 }]);

        let m = match_lines(&[s("abc"), s("abd")], &[s("abd")], 0.3);
        assert_eq!(m.into_iter().collect::<Vec<_>>(), vec![LinePair { p: 1, q: 0 }]);

        let m = match_lines(&[s("abc")], &[s("xyz")], 0.3);
        assert!(m.is_empty());
    }

    #[test]
    fn match_lines_ties_break_lexicographically() {
        let m = match_lines(&[s("ab"), s("ab")], &[s("ab"), s("ab")], 0.3);
        assert_eq!(
            m.into_iter().collect::<Vec<_>>(),
            vec![LinePair { p: 0, q: 0 }, LinePair { p: 1, q: 1 }]
        );
    }

    fn chars_of(l: &str, a: &str) -> (Vec<(usize, usize)>, Vec<usize>) {
        let m_l: BTreeSet<_> = [LinePair { p: 0, q: 0 }].into();
        let (m_c, m_ce) = match_chars(&m_l, &[s(l)], &[s(a)]);
        (
            m_c.iter().map(|c| (c.m, c.n)).collect(),
            m_ce.iter().map(|&(_, m)| m).collect(),
        )
    }

    #[test]
    fn match_chars_examples() {
        assert_eq!(chars_of("abc", "abc"), (vec![(0, 0), (1, 1), (2, 2)], vec![0, 1, 2]));
        assert_eq!(chars_of("abc", "axc"), (vec![(0, 0), (2, 2)], vec![2]));
        assert_eq!(chars_of("ab", "acb"), (vec![(0, 0), (1, 2)], vec![0, 1]));
    }

    #[test]
    fn match_chars_insertion_breaks_consecutive_run() {
        // result has an extra 'x' between the matched characters
        assert_eq!(chars_of("axb", "ab"), (vec![(0, 0), (2, 1)], vec![2]));
    }

    #[test]
    fn annotation_validation() {
        let mut a = PageAnnotation::new("p", vec![vec![1, 2], vec![3]]);
        a.validate(Some(3)).unwrap();
        assert!(a.validate(Some(2)).is_err());
        a.lines.push(vec![]);
        assert!(a.validate(None).is_err());
        let mut b = PageAnnotation::new("p", vec![vec![1, 2]]);
        b.boxes = Some(vec![vec![[1.0, 1.0, 0.1, 0.1]]]);
        assert!(b.validate(None).is_err());
    }

    #[test]
    fn annotation_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let mut a = PageAnnotation::new("p1", vec![vec![1, 2]]);
        a.boxes = Some(vec![vec![[1.0, 2.0, 0.1, 0.2], [3.0, 2.0, 0.1, 0.2]]]);
        let b = PageAnnotation::new("p2", vec![vec![5]]);
        write_annotations(&path, [&a, &b]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with(r#"{"page_id":"p2","lines":[[5]]}"#));
        assert_eq!(read_annotations(&path).unwrap(), vec![a, b]);
    }
}
