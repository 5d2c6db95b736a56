use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GridCoord, GridShape};
use crate::matching::ClassId;
use crate::Scalar;

/// One decoded character.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharInstance<T> {
    pub grid: GridCoord,
    pub bbox: BBox<T>,
    /// Fused presence/class confidence.
    pub score: T,
    pub cls_id: ClassId,
    /// Maximum class probability at the grid.
    pub cls_prob: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutcome {
    Reached(GridCoord),
    Boundary,
    Cycle,
    MaxSteps,
}

/// Grid walk from one node toward its successor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub origin: GridCoord,
    /// Grids walked, starting with `origin`.
    pub visited: Vec<GridCoord>,
    pub outcome: TraceOutcome,
}

impl SearchTrace {
    /// Walked grids after the origin.
    pub fn path(&self) -> &[GridCoord] {
        self.visited.get(1..).unwrap_or(&[])
    }

    pub fn target(&self) -> Option<GridCoord> {
        match self.outcome {
            TraceOutcome::Reached(g) => Some(g),
            _ => None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.visited.first() != Some(&self.origin) {
            return Err(Error::Invariant(format!(
                "trace from {:?} does not start at its origin",
                self.origin
            )));
        }
        if self.visited.windows(2).any(|w| !w[0].is_adjacent(w[1])) {
            return Err(Error::Invariant(format!(
                "trace from {:?} has non-adjacent steps",
                self.origin
            )));
        }
        if self.outcome != TraceOutcome::Cycle {
            let unique: HashSet<_> = self.visited.iter().collect();
            if unique.len() != self.visited.len() {
                return Err(Error::Invariant(format!(
                    "trace from {:?} revisits a grid without reporting a cycle",
                    self.origin
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line<T> {
    pub chars: Vec<CharInstance<T>>,
    /// Search trace of each character, parallel to `chars`.
    pub traces: Vec<SearchTrace>,
    pub sol_conf: T,
    pub eol_conf: T,
    /// Transcript revised by language-model rescoring, when it could not be
    /// written back one class per character.
    pub transcript: Option<Vec<ClassId>>,
}

impl<T: Scalar> Line<T> {
    /// Class sequence of the line, preferring a rescored transcript.
    pub fn classes(&self) -> Vec<ClassId> {
        match &self.transcript {
            Some(t) => t.clone(),
            None => self.chars.iter().map(|c| c.cls_id).collect(),
        }
    }
}

/// Ordered lines of one page. Nodes that belong to no line are kept in
/// `unassigned` for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PageResult<T> {
    pub shape: GridShape,
    pub lines: Vec<Line<T>>,
    pub unassigned: Vec<CharInstance<T>>,
}

impl<T: Scalar> PageResult<T> {
    pub fn empty(shape: GridShape) -> Self {
        Self {
            shape,
            lines: Vec::new(),
            unassigned: Vec::new(),
        }
    }

    pub fn transcripts(&self) -> Vec<Vec<ClassId>> {
        self.lines.iter().map(Line::classes).collect()
    }

    pub fn n_chars(&self) -> usize {
        self.lines.iter().map(|l| l.chars.len()).sum()
    }

    pub fn chars(&self) -> impl Iterator<Item = &CharInstance<T>> {
        self.lines.iter().flat_map(|l| l.chars.iter())
    }

    /// Checks that lines are vertex-disjoint simple paths whose consecutive
    /// characters are linked by reached searches.
    pub fn check_structure(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (p, line) in self.lines.iter().enumerate() {
            if line.chars.is_empty() {
                return Err(Error::Invariant(format!("line {p} is empty")));
            }
            if line.traces.len() != line.chars.len() {
                return Err(Error::Invariant(format!("line {p}: traces not parallel to characters")));
            }
            for (c, t) in line.chars.iter().zip(&line.traces) {
                if !seen.insert(c.grid) {
                    return Err(Error::Invariant(format!(
                        "grid ({}, {}) appears in more than one place",
                        c.grid.i, c.grid.j
                    )));
                }
                if t.origin != c.grid {
                    return Err(Error::Invariant(format!(
                        "line {p}: trace origin differs from its character"
                    )));
                }
                t.check()?;
            }
            for (m, pair) in line.chars.windows(2).enumerate() {
                if line.traces[m].target() != Some(pair[1].grid) {
                    return Err(Error::Invariant(format!(
                        "line {p}: characters {m} and {} are not linked by an edge",
                        m + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharRecord {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub cls: ClassId,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<SearchTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub chars: Vec<CharRecord>,
    pub sol_conf: f64,
    pub eol_conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<ClassId>>,
}

impl LineRecord {
    pub fn classes(&self) -> Vec<ClassId> {
        match &self.transcript {
            Some(t) => t.clone(),
            None => self.chars.iter().map(|c| c.cls).collect(),
        }
    }
}

/// Serialized decode output of one page: one JSON line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub page_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<GridShape>,
    pub lines: Vec<LineRecord>,
}

impl PageRecord {
    pub fn from_result<T: Scalar>(page_id: impl Into<String>, result: &PageResult<T>) -> Self {
        let lines = result
            .lines
            .iter()
            .map(|line| LineRecord {
                chars: line
                    .chars
                    .iter()
                    .zip(&line.traces)
                    .map(|(c, t)| CharRecord {
                        i: c.grid.i,
                        j: c.grid.j,
                        x: c.bbox.x.as_f64(),
                        y: c.bbox.y.as_f64(),
                        w: c.bbox.w.as_f64(),
                        h: c.bbox.h.as_f64(),
                        cls: c.cls_id,
                        score: c.score.as_f64(),
                        cls_prob: Some(c.cls_prob.as_f64()),
                        trace: Some(t.clone()),
                    })
                    .collect(),
                sol_conf: line.sol_conf.as_f64(),
                eol_conf: line.eol_conf.as_f64(),
                transcript: line.transcript.clone(),
            })
            .collect();
        Self {
            page_id: page_id.into(),
            shape: Some(result.shape),
            lines,
        }
    }

    /// Rebuilds a result. Characters without a stored trace get a one-grid
    /// trace linking them to their successor in the line.
    pub fn to_result<T: Scalar>(&self) -> Result<PageResult<T>> {
        let shape = self
            .shape
            .ok_or_else(|| Error::format("shape", format!("{}: page shape missing", self.page_id)))?;
        let mut lines = Vec::with_capacity(self.lines.len());
        for line in &self.lines {
            let chars: Vec<CharInstance<T>> = line
                .chars
                .iter()
                .map(|c| CharInstance {
                    grid: GridCoord::new(c.i, c.j),
                    bbox: BBox::new(T::lit(c.x), T::lit(c.y), T::lit(c.w), T::lit(c.h)),
                    score: T::lit(c.score),
                    cls_id: c.cls,
                    cls_prob: T::lit(c.cls_prob.unwrap_or(c.score)),
                })
                .collect();
            let traces = line
                .chars
                .iter()
                .enumerate()
                .map(|(m, c)| {
                    c.trace.clone().unwrap_or_else(|| {
                        let origin = GridCoord::new(c.i, c.j);
                        SearchTrace {
                            origin,
                            visited: vec![origin],
                            outcome: match line.chars.get(m + 1) {
                                Some(n) => TraceOutcome::Reached(GridCoord::new(n.i, n.j)),
                                None => TraceOutcome::Boundary,
                            },
                        }
                    })
                })
                .collect();
            lines.push(Line {
                chars,
                traces,
                sol_conf: T::lit(line.sol_conf),
                eol_conf: T::lit(line.eol_conf),
                transcript: line.transcript.clone(),
            });
        }
        Ok(PageResult {
            shape,
            lines,
            unassigned: Vec::new(),
        })
    }

    pub fn transcripts(&self) -> Vec<Vec<ClassId>> {
        self.lines.iter().map(LineRecord::classes).collect()
    }
}

/// Reads a results file: JSON lines of [`PageRecord`].
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<PageRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| Error::format("result", format!("line {}: {e}", k + 1))))
        .collect()
}

pub fn write_results<'a>(path: impl AsRef<Path>, pages: impl IntoIterator<Item = &'a PageRecord>) -> Result<()> {
    let mut out = String::new();
    for p in pages {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
