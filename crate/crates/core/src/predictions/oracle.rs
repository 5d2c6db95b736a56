use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{PredictionMaps, EPS_HAT};
use crate::error::{Error, Result};
use crate::geometry::{abs_to_rel, Direction, GridCoord, GridShape, RelBox, GRID_STRIDE};
use crate::synth::SyntheticPage;
use crate::Scalar;

/// Corruption applied by [`oracle_predict`]. The default is noiseless.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoise {
    /// Centre jitter standard deviation, as a fraction of the character size.
    pub jitter_sigma: f64,
    /// Standard deviation of the log-size jitter.
    pub size_sigma: f64,
    /// Probability that a character's class row is corrupted.
    pub label_swap_p: f64,
    /// Probability that a character is missing from the maps.
    pub drop_p: f64,
    /// Per-grid probability of a false character on an empty grid.
    pub spurious_p: f64,
    /// Per-grid probability that the reading direction is re-pointed at random.
    pub dir_flip_p: f64,
    pub seed: u64,
}

impl OracleNoise {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.label_swap_p, self.drop_p, self.spurious_p, self.dir_flip_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "oracle noise probabilities must lie in [0, 1]: {self:?}"
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.size_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "oracle noise sigmas must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Every rate and sigma multiplied by `factor`; the seed is kept.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            jitter_sigma: self.jitter_sigma * factor,
            size_sigma: self.size_sigma * factor,
            label_swap_p: (self.label_swap_p * factor).clamp(0.0, 1.0),
            drop_p: (self.drop_p * factor).clamp(0.0, 1.0),
            spurious_p: (self.spurious_p * factor).clamp(0.0, 1.0),
            dir_flip_p: (self.dir_flip_p * factor).clamp(0.0, 1.0),
            seed: self.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Direction toward the closest page edge; ties go to the earlier direction
/// in `Up, Right, Down, Left` order.
fn outward(g: GridCoord, shape: &GridShape) -> Direction {
    let dist = [g.j - 1, shape.w_g - g.i, shape.h_g - g.j, g.i - 1];
    let k = (0..4).min_by_key(|&k| dist[k]).unwrap();
    Direction::from_index(k).unwrap()
}

/// Moves from `a` to `b`: first along the reading axis, then across it.
pub(crate) fn staircase(a: GridCoord, b: GridCoord, reading: Direction) -> Vec<Direction> {
    let di = b.i as i64 - a.i as i64;
    let dj = b.j as i64 - a.j as i64;
    let horiz = std::iter::repeat_n(
        if di > 0 { Direction::Right } else { Direction::Left },
        di.unsigned_abs() as usize,
    );
    let vert = std::iter::repeat_n(
        if dj > 0 { Direction::Down } else { Direction::Up },
        dj.unsigned_abs() as usize,
    );
    match reading {
        Direction::Left | Direction::Right => horiz.chain(vert).collect(),
        Direction::Up | Direction::Down => vert.chain(horiz).collect(),
    }
}

/// Synthesizes the six maps of `page` as a network would predict them,
/// then corrupts them according to `noise`.
///
/// Without noise, every character grid carries presence `1 - EPS_HAT`, a
/// one-hot class row, and the exact ground-truth box; the first and last
/// character of each line carry start/end-of-line confidence `1 - EPS_HAT`.
/// Reading directions follow a staircase between consecutive characters and
/// continue past the last character to the page edge; all other grids point
/// at their nearest edge.
pub fn oracle_predict<T: Scalar>(page: &SyntheticPage, noise: &OracleNoise) -> Result<PredictionMaps<T>> {
    noise.validate()?;
    let shape = page.shape;
    let n_cls = page.n_cls as usize;
    let mut maps = PredictionMaps::<T>::background(shape, n_cls);
    let one = T::one() - T::lit(EPS_HAT);

    let grids: Vec<GridCoord> = page.chars.iter().map(|c| page.grid(c)).collect();
    let mut owner: HashMap<GridCoord, usize> = HashMap::new();
    for (k, &g) in grids.iter().enumerate() {
        if let Some(prev) = owner.insert(g, k) {
            return Err(Error::Generation(format!(
                "characters {prev} and {k} of {} share grid ({}, {})",
                page.page_id, g.i, g.j
            )));
        }
    }

    for g in shape.grids().collect::<Vec<_>>() {
        maps.point_rd(g, outward(g, &shape));
    }

    let reading = page.reading_direction();
    let lines: Vec<Vec<usize>> = (0..page.n_lines())
        .map(|q| (0..page.chars.len()).filter(|&k| page.chars[k].line == q).collect())
        .collect();
    for line in &lines {
        if let Some(&last) = line.last() {
            let mut g = Some(grids[last]);
            while let Some(cur) = g {
                maps.point_rd(cur, reading);
                g = shape.step(cur, reading);
            }
        }
    }
    for line in &lines {
        for pair in line.windows(2) {
            let mut cur = grids[pair[0]];
            for d in staircase(cur, grids[pair[1]], reading) {
                maps.point_rd(cur, d);
                cur = shape.step(cur, d).expect("staircase stays on the page");
            }
        }
    }

    for line in &lines {
        for (pos, &k) in line.iter().enumerate() {
            let c = &page.chars[k];
            let g = grids[k];
            maps.set_dis(g, one);
            maps.set_cls_onehot(g, c.cls_id);
            maps.set_rel_box(g, abs_to_rel(&c.bbox.cast::<T>(), g, &shape));
            if pos == 0 {
                maps.set_sol(g, one);
            }
            if pos + 1 == line.len() {
                maps.set_eol(g, one);
            }
        }
    }

    apply_noise(&mut maps, page, &grids, noise);
    Ok(maps)
}

fn apply_noise<T: Scalar>(
    maps: &mut PredictionMaps<T>,
    page: &SyntheticPage,
    grids: &[GridCoord],
    noise: &OracleNoise,
) {
    // Every draw happens regardless of the rates, so scaling the noise keeps
    // the same random stream.
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let shape = maps.shape;
    let n_cls = maps.n_cls;
    let eps = T::lit(EPS_HAT);
    let uniform = vec![T::one() / T::from_usize(n_cls).unwrap(); n_cls];
    let (img_w, img_h) = (shape.img_w as f64, shape.img_h as f64);

    for (c, &g) in page.chars.iter().zip(grids) {
        let drop = rng.gen::<f64>() < noise.drop_p;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let nw: f64 = rng.sample(StandardNormal);
        let nh: f64 = rng.sample(StandardNormal);
        let swap = rng.gen::<f64>() < noise.label_swap_p;
        let wrong_offset = rng.gen_range(1..n_cls.max(2));
        let wrong_p: f64 = rng.gen_range(0.5..0.9);

        if drop {
            maps.set_dis(g, eps);
            maps.set_sol(g, eps);
            maps.set_eol(g, eps);
            maps.set_cls_row(g, &uniform);
            continue;
        }

        let b = c.bbox;
        let (w_px, h_px) = (b.w * img_w, b.h * img_h);
        let mut jittered = b;
        jittered.x += nx * noise.jitter_sigma * w_px;
        jittered.y += ny * noise.jitter_sigma * h_px;
        jittered.w = (b.w * (nw * noise.size_sigma).exp()).min(1.0);
        jittered.h = (b.h * (nh * noise.size_sigma).exp()).min(1.0);
        let rel = abs_to_rel(&jittered, g, &shape);
        maps.set_rel_box(
            g,
            RelBox::new(
                T::lit(rel.x_o.clamp(0.0, 1.0)),
                T::lit(rel.y_o.clamp(0.0, 1.0)),
                T::lit(rel.w_o),
                T::lit(rel.h_o),
            ),
        );

        if swap && n_cls > 1 {
            let true_idx = c.cls_id as usize - 1;
            let wrong_idx = (true_idx + wrong_offset) % n_cls;
            let mut row = vec![T::zero(); n_cls];
            row[wrong_idx] = T::lit(wrong_p);
            row[true_idx] = T::lit(1.0 - wrong_p);
            maps.set_cls_row(g, &row);
        }
    }

    let occupied: std::collections::HashSet<GridCoord> = grids.iter().copied().collect();
    let cell = GRID_STRIDE as f64;
    for g in shape.grids().collect::<Vec<_>>() {
        let hit = rng.gen::<f64>() < noise.spurious_p;
        let dis: f64 = rng.gen_range(0.5..0.95);
        let cls = rng.gen_range(1..=n_cls as u32);
        let (x_o, y_o): (f64, f64) = (rng.gen(), rng.gen());
        let (w, h): (f64, f64) = (rng.gen_range(0.6..0.9), rng.gen_range(0.6..0.9));
        if hit && !occupied.contains(&g) {
            maps.set_dis(g, T::lit(dis));
            maps.set_cls_onehot(g, cls);
            maps.set_rel_box(
                g,
                RelBox::new(
                    T::lit(x_o),
                    T::lit(y_o),
                    T::lit(w * cell / img_w),
                    T::lit(h * cell / img_h),
                ),
            );
        }
    }

    for g in shape.grids().collect::<Vec<_>>() {
        let flip = rng.gen::<f64>() < noise.dir_flip_p;
        let d = Direction::from_index(rng.gen_range(0..4)).unwrap();
        if flip {
            maps.point_rd(g, d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{grid_of, rel_to_abs};
    use crate::synth::{gen_page, Layout, SynthConfig};

    fn page(layout: Layout, seed: u64) -> SyntheticPage {
        gen_page(&SynthConfig {
            layout,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn noiseless_maps_are_exact() {
        let p = page(Layout::Horizontal, 1);
        let m = oracle_predict::<f64>(&p, &OracleNoise::default()).unwrap();
        m.validate(1e-6).unwrap();
        for c in &p.chars {
            let g = p.grid(c);
            assert_eq!(m.dis(g), 1.0 - EPS_HAT);
            assert_eq!(m.argmax_cls(g).0, c.cls_id);
            let b = rel_to_abs(&m.rel_box(g), g, &p.shape).unwrap();
            assert!((b.x - c.bbox.x).abs() < 1e-9 && (b.y - c.bbox.y).abs() < 1e-9);
            assert_eq!(grid_of(&b, &p.shape), g);
        }
        let line0: Vec<_> = p.line_chars(0).collect();
        assert!(m.sol(p.grid(line0[0])) > 0.9);
        assert!(m.eol(p.grid(line0[line0.len() - 1])) > 0.9);
        assert!(m.sol(p.grid(line0[1])) < 0.1);
    }

    #[test]
    fn same_seed_same_maps() {
        let p = page(Layout::DEFAULT_SINE, 2);
        let noise = OracleNoise {
            jitter_sigma: 0.1,
            size_sigma: 0.1,
            label_swap_p: 0.05,
            drop_p: 0.02,
            spurious_p: 0.01,
            dir_flip_p: 0.01,
            seed: 5,
        };
        let a = oracle_predict::<f64>(&p, &noise).unwrap();
        let b = oracle_predict::<f64>(&p, &noise).unwrap();
        assert_eq!(a, b);
        let c = oracle_predict::<f64>(&p, &noise.with_seed(6)).unwrap();
        assert_ne!(a, c);
        a.validate(1e-6).unwrap();
    }

    #[test]
    fn collision_is_a_generation_error() {
        let mut p = page(Layout::Horizontal, 3);
        let first = p.chars[0].bbox;
        p.chars[1].bbox = first;
        assert!(matches!(
            oracle_predict::<f64>(&p, &OracleNoise::default()),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn outward_prefers_nearest_edge() {
        let s = GridShape::with_stride(10, 6).unwrap();
        assert_eq!(outward(GridCoord::new(1, 1), &s), Direction::Up);
        assert_eq!(outward(GridCoord::new(9, 3), &s), Direction::Right);
        assert_eq!(outward(GridCoord::new(5, 6), &s), Direction::Down);
        assert_eq!(outward(GridCoord::new(2, 3), &s), Direction::Left);
    }

    #[test]
    fn staircase_reading_axis_first() {
        let a = GridCoord::new(2, 2);
        let b = GridCoord::new(3, 4);
        assert_eq!(
            staircase(a, b, Direction::Right),
            vec![Direction::Right, Direction::Down, Direction::Down]
        );
        assert_eq!(
            staircase(a, b, Direction::Down),
            vec![Direction::Down, Direction::Down, Direction::Right]
        );
    }
}
