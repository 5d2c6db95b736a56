use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::result::{Line, PageResult};
use crate::geometry::GridCoord;
use crate::matching::ClassId;
use crate::predictions::PredictionMaps;
use crate::Scalar;

/// Conditional class model over a line's class sequence.
pub trait LanguageModel {
    /// `P(next | history)`, with `history` holding the preceding classes of
    /// the line, most recent last.
    fn prob(&self, history: &[ClassId], next: ClassId) -> f64;
}

/// Every class equally likely in every context.
#[derive(Debug, Clone, Copy)]
pub struct UniformLm {
    pub n_cls: usize,
}

impl LanguageModel for UniformLm {
    fn prob(&self, _history: &[ClassId], next: ClassId) -> f64 {
        if next >= 1 && next as usize <= self.n_cls {
            1.0 / self.n_cls as f64
        } else {
            0.0
        }
    }
}

/// Count-based n-gram model with add-k smoothing. Contexts never seen in the
/// corpus back off to the longest shorter context that was seen.
#[derive(Debug, Clone)]
pub struct NGramLm {
    order: usize,
    n_cls: usize,
    add_k: f64,
    counts: HashMap<Vec<ClassId>, (f64, HashMap<ClassId, f64>)>,
}

impl NGramLm {
    pub fn from_corpus(order: usize, n_cls: usize, corpus: &[Vec<ClassId>], add_k: f64) -> Self {
        let order = order.max(1);
        let mut counts: HashMap<Vec<ClassId>, (f64, HashMap<ClassId, f64>)> = HashMap::new();
        for line in corpus {
            for k in 0..line.len() {
                for ctx_len in 0..order.min(k + 1) {
                    let entry = counts.entry(line[k - ctx_len..k].to_vec()).or_default();
                    entry.0 += 1.0;
                    *entry.1.entry(line[k]).or_default() += 1.0;
                }
            }
        }
        Self {
            order,
            n_cls,
            add_k,
            counts,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

impl LanguageModel for NGramLm {
    fn prob(&self, history: &[ClassId], next: ClassId) -> f64 {
        if next < 1 || next as usize > self.n_cls {
            return 0.0;
        }
        let longest = (self.order - 1).min(history.len());
        for ctx_len in (0..=longest).rev() {
            let ctx = &history[history.len() - ctx_len..];
            if let Some((total, next_counts)) = self.counts.get(ctx) {
                if *total > 0.0 {
                    let c = next_counts.get(&next).copied().unwrap_or(0.0);
                    let denom = total + self.add_k * self.n_cls as f64;
                    return if denom > 0.0 { (c + self.add_k) / denom } else { 0.0 };
                }
            }
        }
        1.0 / self.n_cls as f64
    }
}

/// One time step of a line: blank probability plus candidate labels.
///
/// A boundary frame sits on a character node. A label emitted there always
/// starts a new token, even when it repeats the previous frame's label, so two
/// adjacent characters of the same class are not merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub grid: GridCoord,
    pub blank: f64,
    pub labels: Vec<(ClassId, f64)>,
    pub boundary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// LM exponent.
    pub alpha: f64,
    /// Labels below this frame probability are not expanded.
    pub min_label_prob: f64,
    /// At most this many labels are expanded per frame.
    pub top_k: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            alpha: 1.0,
            min_label_prob: 1e-3,
            top_k: 8,
        }
    }
}

fn frame_at<T: Scalar>(maps: &PredictionMaps<T>, g: GridCoord, boundary: bool, config: &BeamConfig) -> Frame {
    let dis = maps.dis(g).as_f64();
    let mut labels: Vec<(ClassId, f64)> = maps
        .cls_row(g)
        .iter()
        .enumerate()
        .map(|(c, p)| (c as ClassId + 1, dis * p.as_f64()))
        .filter(|&(_, p)| p >= config.min_label_prob && p > 0.0)
        .collect();
    labels.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    labels.truncate(config.top_k.max(1));
    Frame {
        grid: g,
        blank: 1.0 - dis,
        labels,
        boundary,
    }
}

/// Frames of a line: each character's node grid followed by the grids its
/// search walked through.
pub fn line_frames<T: Scalar>(maps: &PredictionMaps<T>, line: &Line<T>, config: &BeamConfig) -> Vec<Frame> {
    let mut frames = Vec::new();
    for (ch, trace) in line.chars.iter().zip(&line.traces) {
        frames.push(frame_at(maps, ch.grid, true, config));
        for &g in trace.path() {
            frames.push(frame_at(maps, g, false, config));
        }
    }
    frames
}

/// Most probable label per frame, collapsed with the boundary rule.
pub fn best_path_frames(frames: &[Frame]) -> Vec<ClassId> {
    let mut out = Vec::new();
    let mut prev: Option<ClassId> = None;
    for f in frames {
        let best = f
            .labels
            .iter()
            .copied()
            .fold(None, |b: Option<(ClassId, f64)>, (c, p)| match b {
                Some((_, bp)) if bp >= p => b,
                _ => Some((c, p)),
            });
        match best {
            Some((c, p)) if p > f.blank => {
                if f.boundary || prev != Some(c) {
                    out.push(c);
                }
                prev = Some(c);
            }
            _ => prev = None,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
struct BeamEntry {
    blank: f64,
    label: f64,
}

impl BeamEntry {
    fn total(&self) -> f64 {
        self.blank + self.label
    }
}

/// CTC prefix beam search over `frames`, weighting each new token by the LM
/// probability raised to `alpha`. Returns the best labeling and its score.
pub fn prefix_beam_search(frames: &[Frame], lm: &dyn LanguageModel, config: &BeamConfig) -> (Vec<ClassId>, f64) {
    let width = config.beam_width.max(1);
    let mut beams: BTreeMap<Vec<ClassId>, BeamEntry> = BTreeMap::new();
    beams.insert(Vec::new(), BeamEntry { blank: 1.0, label: 0.0 });

    for f in frames {
        let mut next: BTreeMap<Vec<ClassId>, BeamEntry> = BTreeMap::new();
        for (prefix, entry) in &beams {
            next.entry(prefix.clone()).or_default().blank += entry.total() * f.blank;
            for &(c, p) in &f.labels {
                if !f.boundary && prefix.last() == Some(&c) {
                    next.entry(prefix.clone()).or_default().label += entry.label * p;
                    if entry.blank > 0.0 {
                        let w = lm_weight(lm, prefix, c, config.alpha);
                        if w > 0.0 {
                            let mut ext = prefix.clone();
                            ext.push(c);
                            next.entry(ext).or_default().label += entry.blank * p * w;
                        }
                    }
                } else {
                    let w = lm_weight(lm, prefix, c, config.alpha);
                    if w > 0.0 {
                        let mut ext = prefix.clone();
                        ext.push(c);
                        next.entry(ext).or_default().label += entry.total() * p * w;
                    }
                }
            }
        }
        let mut ranked: Vec<_> = next.into_iter().collect();
        // ties keep the lexicographically smaller prefix
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(width);
        beams = ranked.into_iter().collect();
    }

    beams
        .into_iter()
        .map(|(k, v)| (k, v.total()))
        .reduce(|best, cand| if cand.1 > best.1 { cand } else { best })
        .unwrap_or((Vec::new(), 0.0))
}

fn lm_weight(lm: &dyn LanguageModel, history: &[ClassId], next: ClassId, alpha: f64) -> f64 {
    let p = lm.prob(history, next);
    if p <= 0.0 {
        0.0
    } else {
        p.powf(alpha)
    }
}

/// Re-reads every line with an LM-weighted beam search over its frames.
///
/// Boxes and reading order are kept. When the revised transcript has one class
/// per character the classes are written back to the characters; otherwise it
/// is stored as the line's transcript.
pub fn rescore_with_lm<T: Scalar>(
    maps: &PredictionMaps<T>,
    result: &PageResult<T>,
    lm: &dyn LanguageModel,
    config: &BeamConfig,
) -> PageResult<T> {
    let mut out = result.clone();
    for line in &mut out.lines {
        if line.chars.is_empty() {
            continue;
        }
        let frames = line_frames(maps, line, config);
        let (labels, _) = prefix_beam_search(&frames, lm, config);
        if labels.len() == line.chars.len() {
            for (ch, &c) in line.chars.iter_mut().zip(&labels) {
                ch.cls_id = c;
                ch.cls_prob = maps.cls_prob(ch.grid, c);
            }
            line.transcript = None;
        } else {
            line.transcript = Some(labels);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(blank: f64, labels: &[(ClassId, f64)], boundary: bool) -> Frame {
        Frame {
            grid: GridCoord::new(1, 1),
            blank,
            labels: labels.to_vec(),
            boundary,
        }
    }

    /// Sums every per-frame path with the same collapse rule and picks the
    /// best labeling.
    fn exhaustive(frames: &[Frame], lm: &dyn LanguageModel, alpha: f64) -> (Vec<ClassId>, f64) {
        let mut totals: BTreeMap<Vec<ClassId>, f64> = BTreeMap::new();
        let choices: Vec<Vec<Option<(ClassId, f64)>>> = frames
            .iter()
            .map(|f| {
                let mut v = vec![None];
                v.extend(f.labels.iter().copied().map(Some));
                v
            })
            .collect();
        let mut idx = vec![0usize; frames.len()];
        loop {
            let mut p = 1.0;
            let mut tokens = Vec::new();
            let mut prev: Option<ClassId> = None;
            for (t, f) in frames.iter().enumerate() {
                match choices[t][idx[t]] {
                    None => {
                        p *= f.blank;
                        prev = None;
                    }
                    Some((c, q)) => {
                        p *= q;
                        if f.boundary || prev != Some(c) {
                            tokens.push(c);
                        }
                        prev = Some(c);
                    }
                }
            }
            let mut lm_p = 1.0;
            for k in 0..tokens.len() {
                lm_p *= lm.prob(&tokens[..k], tokens[k]).powf(alpha);
            }
            *totals.entry(tokens).or_default() += p * lm_p;
            let mut t = 0;
            loop {
                if t == frames.len() {
                    return totals.into_iter().reduce(|b, c| if c.1 > b.1 { c } else { b }).unwrap();
                }
                idx[t] += 1;
                if idx[t] < choices[t].len() {
                    break;
                }
                idx[t] = 0;
                t += 1;
            }
        }
    }

    #[test]
    fn lm_overrides_weak_frame_preference() {
        // classes: a=1, b=2, c=3
        let frames = vec![frame(0.0, &[(1, 1.0)], true), frame(0.0, &[(2, 0.51), (3, 0.49)], true)];
        let uniform = UniformLm { n_cls: 3 };
        let cfg = BeamConfig::default();
        assert_eq!(prefix_beam_search(&frames, &uniform, &cfg).0, vec![1, 2]);

        let mut corpus = vec![vec![1, 3]; 9];
        corpus.push(vec![1, 2]);
        let lm = NGramLm::from_corpus(2, 3, &corpus, 0.0);
        assert!((lm.prob(&[1], 3) - 0.9).abs() < 1e-12);
        let (best, score) = prefix_beam_search(&frames, &lm, &cfg);
        assert_eq!(best, vec![1, 3]);
        let (oracle, oracle_score) = exhaustive(&frames, &lm, 1.0);
        assert_eq!(best, oracle);
        assert!((score - oracle_score).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_class_never_emitted() {
        let lm = NGramLm::from_corpus(1, 3, &[vec![1, 2, 1, 2]], 0.0);
        assert_eq!(lm.prob(&[], 3), 0.0);
        let frames = vec![frame(0.1, &[(3, 0.9)], true), frame(0.2, &[(3, 0.6), (2, 0.2)], true)];
        let (best, _) = prefix_beam_search(&frames, &lm, &BeamConfig::default());
        assert!(!best.contains(&3));
    }

    #[test]
    fn repeated_class_at_adjacent_nodes_is_kept() {
        let frames = vec![frame(0.0, &[(2, 1.0)], true), frame(0.0, &[(2, 1.0)], true)];
        assert_eq!(
            prefix_beam_search(&frames, &UniformLm { n_cls: 4 }, &BeamConfig::default()).0,
            vec![2, 2]
        );
        assert_eq!(best_path_frames(&frames), vec![2, 2]);
        let path = vec![frame(0.0, &[(2, 1.0)], true), frame(0.0, &[(2, 1.0)], false)];
        assert_eq!(best_path_frames(&path), vec![2]);
    }

    #[test]
    fn backoff_to_shorter_context() {
        let lm = NGramLm::from_corpus(3, 4, &[vec![1, 2, 3], vec![2, 2]], 0.0);
        // context (4, 1) unseen, (1,) seen once followed by 2
        assert_eq!(lm.prob(&[4, 1], 2), 1.0);
        assert!((lm.prob(&[], 2) - 3.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn beam_matches_exhaustive_on_small_lattices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let lm = NGramLm::from_corpus(2, 3, &[vec![1, 2, 3, 1], vec![3, 3, 2], vec![2, 1]], 0.5);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let frames: Vec<Frame> = (0..n)
                .map(|t| {
                    let dis: f64 = rng.gen_range(0.05..0.95);
                    let a: f64 = rng.gen_range(0.0..1.0);
                    let b: f64 = rng.gen_range(0.0..(1.0 - a));
                    frame(
                        1.0 - dis,
                        &[(1, dis * a), (2, dis * b), (3, dis * (1.0 - a - b))],
                        t == 0 || rng.gen_bool(0.5),
                    )
                })
                .collect();
            let cfg = BeamConfig {
                beam_width: 10_000,
                ..BeamConfig::default()
            };
            let (best, score) = prefix_beam_search(&frames, &lm, &cfg);
            let (oracle, oracle_score) = exhaustive(&frames, &lm, 1.0);
            assert!((score - oracle_score).abs() < 1e-12 * oracle_score.max(1.0));
            if best != oracle {
                // only acceptable when two labelings score the same
                assert!((score - oracle_score).abs() < 1e-15);
            }
        }
    }
}
