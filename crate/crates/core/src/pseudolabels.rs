//! Per-character pseudo-label boxes, their score-weighted updating, and the
//! loss targets derived from them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::PageResult;
use crate::error::{Error, Result};
use crate::geometry::{grid_of, BBox, Direction, GridCoord, GridShape};
use crate::matching::{CharPair, PageAnnotation};
use crate::Scalar;

/// Temperature of the update weight.
pub const DEFAULT_EPSILON: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel<T> {
    pub bbox: BBox<T>,
    pub gamma: T,
    /// Number of times the label was written.
    pub count: u32,
}

/// Pseudo-labels keyed by `(page_id, q, n)`: line `q`, character `n` of the
/// page's transcripts, both 0-based.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelStore<T> {
    labels: BTreeMap<(String, usize, usize), PseudoLabel<T>>,
}

impl<T: Scalar> PseudoLabelStore<T> {
    pub fn new() -> Self {
        Self {
            labels: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, page_id: &str, q: usize, n: usize) -> Option<&PseudoLabel<T>> {
        self.labels.get(&(page_id.to_string(), q, n))
    }

    pub fn insert(&mut self, page_id: &str, q: usize, n: usize, label: PseudoLabel<T>) {
        self.labels.insert((page_id.to_string(), q, n), label);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, usize, usize), &PseudoLabel<T>)> {
        self.labels.iter()
    }

    /// Labels of one page as `((q, n), label)` in `(q, n)` order.
    pub fn page(&self, page_id: &str) -> impl Iterator<Item = ((usize, usize), &PseudoLabel<T>)> + '_ {
        let lo = (page_id.to_string(), 0, 0);
        let hi = (page_id.to_string(), usize::MAX, usize::MAX);
        self.labels.range(lo..=hi).map(|((_, q, n), l)| ((*q, *n), l))
    }

    pub fn page_ids(&self) -> BTreeSet<&str> {
        self.labels.keys().map(|(p, _, _)| p.as_str()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for ((page_id, q, n), l) in &self.labels {
            let rec = LabelRecord {
                page_id: page_id.clone(),
                q: *q,
                n: *n,
                x: l.bbox.x.as_f64(),
                y: l.bbox.y.as_f64(),
                w: l.bbox.w.as_f64(),
                h: l.bbox.h.as_f64(),
                gamma: l.gamma.as_f64(),
                count: l.count,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut store = Self::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: LabelRecord = serde_json::from_str(line)
                .map_err(|e| Error::format("pseudo-label", format!("line {}: {e}", k + 1)))?;
            let bbox = BBox::new(T::lit(r.x), T::lit(r.y), T::lit(r.w), T::lit(r.h));
            if !bbox.is_valid() {
                return Err(Error::format("pseudo-label", format!("line {}: invalid box", k + 1)));
            }
            if !(r.gamma > 0.0 && r.gamma <= 1.0) {
                return Err(Error::format(
                    "gamma",
                    format!("line {}: {} outside (0, 1]", k + 1, r.gamma),
                ));
            }
            store.insert(
                &r.page_id,
                r.q,
                r.n,
                PseudoLabel {
                    bbox,
                    gamma: T::lit(r.gamma),
                    count: r.count,
                },
            );
        }
        Ok(store)
    }
}

/// One line of the store file; also the automatic-labeling export format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub page_id: String,
    pub q: usize,
    pub n: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub gamma: f64,
    pub count: u32,
}

/// Weight kept by the old label: `e^{eps*gamma} / (e^{eps*gamma} + e^{eps*score})`.
pub fn update_weight<T: Scalar>(gamma: T, score: T, epsilon: T) -> T {
    // same quantity, written so that large epsilon cannot overflow
    T::one() / (T::one() + (epsilon * (score - gamma)).exp())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub created: usize,
    pub updated: usize,
}

/// Writes every matched character into the store: absent labels copy the
/// predicted box and score; present ones move toward it by `1 - lambda`.
pub fn update<T: Scalar>(
    store: &mut PseudoLabelStore<T>,
    page_id: &str,
    m_c: &BTreeSet<CharPair>,
    result: &PageResult<T>,
    epsilon: T,
) -> UpdateStats {
    let mut stats = UpdateStats::default();
    for pair in m_c {
        let ch = &result.lines[pair.p].chars[pair.m];
        let key = (page_id.to_string(), pair.q, pair.n);
        match store.labels.get_mut(&key) {
            None => {
                store.labels.insert(
                    key,
                    PseudoLabel {
                        bbox: ch.bbox,
                        gamma: ch.score,
                        count: 1,
                    },
                );
                stats.created += 1;
            }
            Some(label) => {
                let lambda = update_weight(label.gamma, ch.score, epsilon);
                label.bbox = label.bbox.lerp(&ch.bbox, lambda);
                label.gamma = lambda * label.gamma + (T::one() - lambda) * ch.score;
                label.count += 1;
                stats.updated += 1;
            }
        }
    }
    stats
}

/// Random monotone staircase from `from` to `to`: the cross-row moves are
/// placed at uniformly chosen steps. Returns one `(grid, direction)` per step.
pub fn random_staircase<R: Rng + ?Sized>(from: GridCoord, to: GridCoord, rng: &mut R) -> Vec<(GridCoord, Direction)> {
    let di = to.i as i64 - from.i as i64;
    let dj = to.j as i64 - from.j as i64;
    let zeta = (di.unsigned_abs() + dj.unsigned_abs()) as usize;
    if zeta == 0 {
        return Vec::new();
    }
    let mut moves = vec![(di.signum(), 0i64); zeta];
    for k in sample(rng, zeta, dj.unsigned_abs() as usize) {
        moves[k] = (0, dj.signum());
    }
    let mut out = Vec::with_capacity(zeta);
    let (mut i, mut j) = (from.i as i64, from.j as i64);
    for (mx, my) in moves {
        let d = Direction::from_delta(mx, my).expect("unit move");
        out.push((GridCoord::new(i as usize, j as usize), d));
        i += mx;
        j += my;
    }
    out
}

/// Reading-order paths between the grids of consecutive pseudo-labels of a
/// page, in `(q, n)` order.
pub fn gen_paths<T: Scalar, R: Rng + ?Sized>(
    store: &PseudoLabelStore<T>,
    page_id: &str,
    shape: &GridShape,
    rng: &mut R,
) -> Vec<(GridCoord, Direction)> {
    let labels: BTreeMap<(usize, usize), &PseudoLabel<T>> = store.page(page_id).collect();
    let mut out = Vec::new();
    for (&(q, n), label) in &labels {
        if let Some(next) = labels.get(&(q, n + 1)) {
            let from = grid_of(&label.bbox, shape);
            let to = grid_of(&next.bbox, shape);
            out.extend(random_staircase(from, to, rng));
        }
    }
    out
}

/// Sample sets for the six losses of one page.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTargets {
    /// Grid of every pseudo-label, mapped to its `(q, n)`.
    pub s_c: BTreeMap<GridCoord, (usize, usize)>,
    /// Empty grids crossed by searches between consecutive equal characters.
    pub s_d_neg: BTreeSet<GridCoord>,
    pub s_s_pos: BTreeSet<GridCoord>,
    pub s_s_neg: BTreeSet<GridCoord>,
    pub s_e_pos: BTreeSet<GridCoord>,
    pub s_e_neg: BTreeSet<GridCoord>,
    pub s_rd: BTreeSet<(GridCoord, Direction)>,
}

/// Builds the loss targets of one page.
///
/// When two pseudo-labels fall in one grid, the one with the higher score
/// keeps it. Negative presence samples are the grids walked by the searches
/// of `m_ce` characters, without the characters' own grids.
pub fn build_targets<T: Scalar, R: Rng + ?Sized>(
    store: &PseudoLabelStore<T>,
    annot: &PageAnnotation,
    result: &PageResult<T>,
    m_ce: &BTreeSet<(usize, usize)>,
    shape: &GridShape,
    rng: &mut R,
) -> LossTargets {
    let page_id = annot.page_id.as_str();
    let mut t = LossTargets::default();
    let mut best_gamma: BTreeMap<GridCoord, T> = BTreeMap::new();
    for ((q, n), label) in store.page(page_id) {
        let g = grid_of(&label.bbox, shape);
        match best_gamma.get(&g) {
            Some(&other) => {
                log::warn!(
                    "{page_id}: pseudo-labels {:?} and ({q}, {n}) share grid ({}, {})",
                    t.s_c[&g],
                    g.i,
                    g.j
                );
                if label.gamma > other {
                    best_gamma.insert(g, label.gamma);
                    t.s_c.insert(g, (q, n));
                }
            }
            None => {
                best_gamma.insert(g, label.gamma);
                t.s_c.insert(g, (q, n));
            }
        }
    }

    for (&g, &(q, n)) in &t.s_c {
        let last = annot.lines.get(q).map_or(0, |l| l.len().saturating_sub(1));
        if n == 0 {
            t.s_s_pos.insert(g);
        }
        if n == last {
            t.s_e_pos.insert(g);
        }
    }
    for &g in t.s_c.keys() {
        if !t.s_s_pos.contains(&g) {
            t.s_s_neg.insert(g);
        }
        if !t.s_e_pos.contains(&g) {
            t.s_e_neg.insert(g);
        }
    }

    for &(p, m) in m_ce {
        if let Some(trace) = result.lines.get(p).and_then(|l| l.traces.get(m)) {
            t.s_d_neg.extend(trace.path().iter().copied());
        }
    }

    t.s_rd = gen_paths(store, page_id, shape, rng).into_iter().collect();
    t
}
