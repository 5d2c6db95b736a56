//! Grid/image coordinates, bounding boxes, IoU and non-maximum suppression.
//!
//! Grid coordinates are **1-based** in every public signature: column `i` runs
//! from 1 to `w_g` and row `j` from 1 to `h_g`. Internal tensor storage is
//! 0-based and row-major, but that never leaks out of [`crate::predictions`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Pixel stride between adjacent grid cells.
pub const GRID_STRIDE: u32 = 16;

/// Grid lattice laid over a page image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub w_g: usize,
    pub h_g: usize,
    pub img_w: u32,
    pub img_h: u32,
}

impl GridShape {
    pub fn new(w_g: usize, h_g: usize, img_w: u32, img_h: u32) -> Result<Self> {
        if w_g == 0 || h_g == 0 || img_w == 0 || img_h == 0 {
            return Err(Error::Domain(format!(
                "grid shape must be positive, got {w_g}x{h_g} over {img_w}x{img_h} px"
            )));
        }
        Ok(Self { w_g, h_g, img_w, img_h })
    }

    /// Shape whose image is exactly `GRID_STRIDE` pixels per cell.
    pub fn with_stride(w_g: usize, h_g: usize) -> Result<Self> {
        Self::new(w_g, h_g, (w_g as u32) * GRID_STRIDE, (h_g as u32) * GRID_STRIDE)
    }

    pub fn n_grids(&self) -> usize {
        self.w_g * self.h_g
    }

    pub fn contains(&self, g: GridCoord) -> bool {
        g.i >= 1 && g.j >= 1 && g.i <= self.w_g && g.j <= self.h_g
    }

    /// Row-major offset of a 1-based grid coordinate.
    pub(crate) fn offset(&self, g: GridCoord) -> usize {
        debug_assert!(self.contains(g));
        (g.j - 1) * self.w_g + (g.i - 1)
    }

    /// All grid coordinates in row-major order.
    pub fn grids(&self) -> impl Iterator<Item = GridCoord> + '_ {
        (1..=self.h_g).flat_map(move |j| (1..=self.w_g).map(move |i| GridCoord { i, j }))
    }

    /// Applies a direction step; `None` when the step leaves the lattice.
    pub fn step(&self, g: GridCoord, dir: Direction) -> Option<GridCoord> {
        let (dx, dy) = dir.delta();
        let i = g.i as i64 + dx;
        let j = g.j as i64 + dy;
        if i < 1 || j < 1 || i > self.w_g as i64 || j > self.h_g as i64 {
            None
        } else {
            Some(GridCoord {
                i: i as usize,
                j: j as usize,
            })
        }
    }

    /// In-bounds 4-neighbours of `g`, in direction order (up, right, down, left).
    pub fn neighbours(&self, g: GridCoord) -> impl Iterator<Item = GridCoord> + '_ {
        Direction::ALL.into_iter().filter_map(move |d| self.step(g, d))
    }
}

/// 1-based grid coordinate: column `i`, row `j`.
///
/// Ordering is row-major (by `j`, then `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub i: usize,
    pub j: usize,
}

impl GridCoord {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    pub fn manhattan(&self, other: GridCoord) -> usize {
        self.i.abs_diff(other.i) + self.j.abs_diff(other.j)
    }

    pub fn is_adjacent(&self, other: GridCoord) -> bool {
        self.manhattan(other) == 1
    }
}

impl Ord for GridCoord {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.j, self.i).cmp(&(other.j, other.i))
    }
}

impl PartialOrd for GridCoord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One of the four reading-order directions. The discriminant is the channel
/// index in the reading-order map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Right, Direction::Down, Direction::Left];

    /// Grid delta `(di, dj)`.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Right => (1, 0),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Direction> {
        Direction::ALL.get(idx).copied()
    }

    /// Inverse of [`Direction::delta`] for unit steps.
    pub fn from_delta(di: i64, dj: i64) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| d.delta() == (di, dj))
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Right => Direction::Left,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
        }
    }
}

/// Absolute bounding box: centre in pixels, width/height as fractions of the
/// image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > T::zero()
            && self.h > T::zero()
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Width and height in pixels.
    pub fn size_px(&self, shape: &GridShape) -> (T, T) {
        (
            self.w * T::from_u32(shape.img_w).unwrap(),
            self.h * T::from_u32(shape.img_h).unwrap(),
        )
    }

    /// `(x0, y0, x1, y1)` corners in pixels.
    pub fn corners_px(&self, shape: &GridShape) -> (T, T, T, T) {
        let (w, h) = self.size_px(shape);
        let half = T::lit(0.5);
        (
            self.x - w * half,
            self.y - h * half,
            self.x + w * half,
            self.y + h * half,
        )
    }

    /// Componentwise `lambda * self + (1 - lambda) * other`.
    pub fn lerp(&self, other: &BBox<T>, lambda: T) -> BBox<T> {
        let mu = T::one() - lambda;
        BBox::new(
            lambda * self.x + mu * other.x,
            lambda * self.y + mu * other.y,
            lambda * self.w + mu * other.w,
            lambda * self.h + mu * other.h,
        )
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.w.as_f64()),
            U::lit(self.h.as_f64()),
        )
    }
}

/// Box relative to its grid cell: centre offsets within the cell and
/// width/height fractions of the image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RelBox<T> {
    pub x_o: T,
    pub y_o: T,
    pub w_o: T,
    pub h_o: T,
}

impl<T: Scalar> RelBox<T> {
    pub fn new(x_o: T, y_o: T, w_o: T, h_o: T) -> Self {
        Self { x_o, y_o, w_o, h_o }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x_o, self.y_o, self.w_o, self.h_o]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

fn check_grid(g: GridCoord, shape: &GridShape) -> Result<()> {
    if shape.contains(g) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "grid ({}, {}) outside 1..={} x 1..={}",
            g.i, g.j, shape.w_g, shape.h_g
        )))
    }
}

/// Converts a cell-relative box predicted at grid `g` into an absolute box.
pub fn rel_to_abs<T: Scalar>(rel: &RelBox<T>, g: GridCoord, shape: &GridShape) -> Result<BBox<T>> {
    check_grid(g, shape)?;
    let w_g = T::from_usize(shape.w_g).unwrap();
    let h_g = T::from_usize(shape.h_g).unwrap();
    let img_w = T::from_u32(shape.img_w).unwrap();
    let img_h = T::from_u32(shape.img_h).unwrap();
    let col = T::from_usize(g.i - 1).unwrap();
    let row = T::from_usize(g.j - 1).unwrap();
    Ok(BBox {
        x: (col + rel.x_o) / w_g * img_w,
        y: (row + rel.y_o) / h_g * img_h,
        w: rel.w_o,
        h: rel.h_o,
    })
}

/// Inverse of [`rel_to_abs`]. Offsets are not clamped: a box whose centre
/// lies outside cell `g` yields offsets outside `[0, 1]`.
pub fn abs_to_rel<T: Scalar>(b: &BBox<T>, g: GridCoord, shape: &GridShape) -> RelBox<T> {
    let w_g = T::from_usize(shape.w_g).unwrap();
    let h_g = T::from_usize(shape.h_g).unwrap();
    let img_w = T::from_u32(shape.img_w).unwrap();
    let img_h = T::from_u32(shape.img_h).unwrap();
    RelBox {
        x_o: b.x * w_g / img_w - T::from_usize(g.i - 1).unwrap(),
        y_o: b.y * h_g / img_h - T::from_usize(g.j - 1).unwrap(),
        w_o: b.w,
        h_o: b.h,
    }
}

/// Grid cell containing the centre of `b` (ceil rule), clamped into the lattice.
pub fn grid_of<T: Scalar>(b: &BBox<T>, shape: &GridShape) -> GridCoord {
    let to_cell = |v: T, n: usize, extent: u32| -> usize {
        let scaled = (v * T::from_usize(n).unwrap() / T::from_u32(extent).unwrap()).ceil();
        let idx = scaled.to_i64().unwrap_or(1);
        idx.clamp(1, n as i64) as usize
    };
    GridCoord {
        i: to_cell(b.x, shape.w_g, shape.img_w),
        j: to_cell(b.y, shape.h_g, shape.img_h),
    }
}

/// Intersection over union measured in pixel space.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>, shape: &GridShape) -> T {
    let (ax0, ay0, ax1, ay1) = a.corners_px(shape);
    let (bx0, by0, bx1, by1) = b.corners_px(shape);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(T::zero());
    let ih = (ay1.min(by1) - ay0.max(by0)).max(T::zero());
    let inter = iw * ih;
    if inter <= T::zero() {
        return T::zero();
    }
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    let union = area_a + area_b - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score; equal scores keep input order,
/// so callers that list candidates row-major get the lower grid index first.
/// A candidate is suppressed when its IoU with a kept box exceeds
/// `iou_threshold`. Returns surviving indices in ascending order.
pub fn nms<T: Scalar>(candidates: &[(BBox<T>, T)], iou_threshold: T, shape: &GridShape) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let cand = &candidates[idx].0;
        if kept
            .iter()
            .all(|&k| iou(&candidates[k].0, cand, shape) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept.sort_unstable();
    kept
}
