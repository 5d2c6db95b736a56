//! The six per-grid output maps of one page and the noisy oracle that
//! synthesizes them from ground truth.

mod io;
mod oracle;

pub use io::{load_maps, maps_from_json, maps_to_json, read_maps, save_maps, save_maps_json, write_maps};
pub(crate) use oracle::staircase;
pub use oracle::{oracle_predict, OracleNoise};

use crate::error::{Error, Result};
use crate::geometry::{Direction, GridCoord, GridShape, RelBox};
use crate::Scalar;

/// Floor used instead of exact 0/1 probabilities in synthesized maps.
pub const EPS_HAT: f64 = 1e-6;

/// Prediction maps for one page.
///
/// Every tensor is stored row-major (row `j`, then column `i`, then channel).
/// Class channel `c - 1` holds the probability of class id `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps<T> {
    pub shape: GridShape,
    pub n_cls: usize,
    pub(crate) boxes: Vec<T>,
    pub(crate) dis: Vec<T>,
    pub(crate) cls: Vec<T>,
    pub(crate) sol: Vec<T>,
    pub(crate) eol: Vec<T>,
    pub(crate) rd: Vec<T>,
}

impl<T: Scalar> PredictionMaps<T> {
    /// Maps describing an empty page: every grid is background.
    pub fn background(shape: GridShape, n_cls: usize) -> Self {
        let n = shape.n_grids();
        let eps = T::lit(EPS_HAT);
        let uniform_cls = T::one() / T::from_usize(n_cls.max(1)).unwrap();
        let quarter = T::lit(0.25);
        let mut boxes = Vec::with_capacity(n * 4);
        for _ in 0..n {
            boxes.extend_from_slice(&[T::lit(0.5), T::lit(0.5), T::lit(0.01), T::lit(0.01)]);
        }
        Self {
            shape,
            n_cls,
            boxes,
            dis: vec![eps; n],
            cls: vec![uniform_cls; n * n_cls],
            sol: vec![eps; n],
            eol: vec![eps; n],
            rd: vec![quarter; n * 4],
        }
    }

    /// Builds maps from raw row-major tensors, checking every extent.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        shape: GridShape,
        n_cls: usize,
        boxes: Vec<T>,
        dis: Vec<T>,
        cls: Vec<T>,
        sol: Vec<T>,
        eol: Vec<T>,
        rd: Vec<T>,
    ) -> Result<Self> {
        let n = shape.n_grids();
        for (name, len, want) in [
            ("box", boxes.len(), n * 4),
            ("dis", dis.len(), n),
            ("cls", cls.len(), n * n_cls),
            ("sol", sol.len(), n),
            ("eol", eol.len(), n),
            ("rd", rd.len(), n * 4),
        ] {
            if len != want {
                return Err(Error::format(name, format!("expected {want} values, found {len}")));
            }
        }
        let maps = Self {
            shape,
            n_cls,
            boxes,
            dis,
            cls,
            sol,
            eol,
            rd,
        };
        maps.check_finite()?;
        Ok(maps)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        for (name, data) in self.tensors() {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::format(name, format!("non-finite value at index {pos}")));
            }
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &[T]); 6] {
        [
            ("box", &self.boxes),
            ("dis", &self.dis),
            ("cls", &self.cls),
            ("sol", &self.sol),
            ("eol", &self.eol),
            ("rd", &self.rd),
        ]
    }

    /// Checks probability ranges and row normalization to `tol`.
    pub fn validate(&self, tol: T) -> Result<()> {
        self.check_finite()?;
        let in_unit = |v: &T| *v >= T::zero() && *v <= T::one();
        for (name, data) in [
            ("dis", &self.dis),
            ("sol", &self.sol),
            ("eol", &self.eol),
            ("cls", &self.cls),
            ("rd", &self.rd),
        ] {
            if let Some(pos) = data.iter().position(|v| !in_unit(v)) {
                return Err(Error::format(name, format!("probability outside [0,1] at index {pos}")));
            }
        }
        for (name, data, width) in [("cls", &self.cls, self.n_cls), ("rd", &self.rd, 4)] {
            for (row, chunk) in data.chunks(width.max(1)).enumerate() {
                let s: T = chunk.iter().copied().sum();
                if (s - T::one()).abs() > tol {
                    return Err(Error::format(name, format!("row {row} sums to {s}")));
                }
            }
        }
        Ok(())
    }

    pub fn dis(&self, g: GridCoord) -> T {
        self.dis[self.shape.offset(g)]
    }

    pub fn sol(&self, g: GridCoord) -> T {
        self.sol[self.shape.offset(g)]
    }

    pub fn eol(&self, g: GridCoord) -> T {
        self.eol[self.shape.offset(g)]
    }

    pub fn rel_box(&self, g: GridCoord) -> RelBox<T> {
        let o = self.shape.offset(g) * 4;
        RelBox::new(self.boxes[o], self.boxes[o + 1], self.boxes[o + 2], self.boxes[o + 3])
    }

    /// Class probability row; index `c - 1` for class id `c`.
    pub fn cls_row(&self, g: GridCoord) -> &[T] {
        let o = self.shape.offset(g) * self.n_cls;
        &self.cls[o..o + self.n_cls]
    }

    /// Probability of class id `class_id` (1-based).
    pub fn cls_prob(&self, g: GridCoord, class_id: u32) -> T {
        self.cls_row(g)[class_id as usize - 1]
    }

    /// Most probable class id (1-based) and its probability; ties pick the
    /// lowest id.
    pub fn argmax_cls(&self, g: GridCoord) -> (u32, T) {
        argmax(self.cls_row(g))
            .map(|(k, p)| (k as u32 + 1, p))
            .unwrap_or((1, T::zero()))
    }

    pub fn rd_row(&self, g: GridCoord) -> [T; 4] {
        let o = self.shape.offset(g) * 4;
        [self.rd[o], self.rd[o + 1], self.rd[o + 2], self.rd[o + 3]]
    }

    pub fn rd_prob(&self, g: GridCoord, d: Direction) -> T {
        self.rd[self.shape.offset(g) * 4 + d.index()]
    }

    /// Most probable reading direction; ties pick the lower channel.
    pub fn argmax_rd(&self, g: GridCoord) -> Direction {
        let row = self.rd_row(g);
        let (k, _) = argmax(&row).expect("four directions");
        Direction::from_index(k).expect("direction channel")
    }

    pub fn set_dis(&mut self, g: GridCoord, v: T) {
        let o = self.shape.offset(g);
        self.dis[o] = v;
    }

    pub fn set_sol(&mut self, g: GridCoord, v: T) {
        let o = self.shape.offset(g);
        self.sol[o] = v;
    }

    pub fn set_eol(&mut self, g: GridCoord, v: T) {
        let o = self.shape.offset(g);
        self.eol[o] = v;
    }

    pub fn set_rel_box(&mut self, g: GridCoord, b: RelBox<T>) {
        let o = self.shape.offset(g) * 4;
        self.boxes[o..o + 4].copy_from_slice(&b.to_array());
    }

    pub fn set_cls_row(&mut self, g: GridCoord, row: &[T]) {
        assert_eq!(row.len(), self.n_cls, "class row length");
        let o = self.shape.offset(g) * self.n_cls;
        self.cls[o..o + self.n_cls].copy_from_slice(row);
    }

    /// Puts all class mass on `class_id`.
    pub fn set_cls_onehot(&mut self, g: GridCoord, class_id: u32) {
        let o = self.shape.offset(g) * self.n_cls;
        for v in &mut self.cls[o..o + self.n_cls] {
            *v = T::zero();
        }
        self.cls[o + class_id as usize - 1] = T::one();
    }

    pub fn set_rd_row(&mut self, g: GridCoord, row: [T; 4]) {
        let o = self.shape.offset(g) * 4;
        self.rd[o..o + 4].copy_from_slice(&row);
    }

    /// Points grid `g` at `d` with mass `1 - 3 * EPS_HAT`.
    pub fn point_rd(&mut self, g: GridCoord, d: Direction) {
        let eps = T::lit(EPS_HAT);
        let mut row = [eps; 4];
        row[d.index()] = T::one() - eps * T::lit(3.0);
        self.set_rd_row(g, row);
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> PredictionMaps<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        PredictionMaps {
            shape: self.shape,
            n_cls: self.n_cls,
            boxes: conv(&self.boxes),
            dis: conv(&self.dis),
            cls: conv(&self.cls),
            sol: conv(&self.sol),
            eol: conv(&self.eol),
            rd: conv(&self.rd),
        }
    }
}

/// First index of the maximum of a slice.
pub(crate) fn argmax<T: Scalar>(values: &[T]) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (k, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((k, v)),
        }
    }
    best
}
