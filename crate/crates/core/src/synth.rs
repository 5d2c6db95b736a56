//! Synthetic pages: straight, rotated, and sine-curved lines of geometric
//! characters with full ground truth.
//!
//! Pages are laid out in a canonical frame where lines run left to right,
//! one character per column, then rotated onto the page. Every generated page
//! is checked to survive the noiseless oracle and decoder round trip.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::geometry::{grid_of, BBox, Direction, GridCoord, GridShape, GRID_STRIDE};
use crate::matching::{ClassId, PageAnnotation};
use crate::predictions::{oracle_predict, OracleNoise};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Horizontal,
    /// Rotated clockwise by 90 degrees.
    Rotated90,
    Rotated180,
    Rotated270,
    /// Baseline displaced by `amplitude * sin(2 pi x / period)`, both in grid
    /// units.
    SineCurve {
        amplitude: f64,
        period: f64,
    },
}

impl Layout {
    pub const DEFAULT_SINE: Layout = Layout::SineCurve {
        amplitude: 1.5,
        period: 12.0,
    };

    /// Reading direction of every line on the page.
    pub fn reading_direction(&self) -> Direction {
        match self {
            Layout::Rotated90 => Direction::Down,
            Layout::Rotated180 => Direction::Left,
            Layout::Rotated270 => Direction::Up,
            _ => Direction::Right,
        }
    }

    fn amplitude(&self) -> f64 {
        match self {
            Layout::SineCurve { amplitude, .. } => *amplitude,
            _ => 0.0,
        }
    }

    fn is_transposed(&self) -> bool {
        matches!(self, Layout::Rotated90 | Layout::Rotated270)
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" | "straight" => Ok(Layout::Horizontal),
            "rot90" | "rotated90" => Ok(Layout::Rotated90),
            "rot180" | "rotated180" => Ok(Layout::Rotated180),
            "rot270" | "rotated270" => Ok(Layout::Rotated270),
            "sine" => Ok(Layout::DEFAULT_SINE),
            other => Err(Error::Config(format!(
                "unknown layout `{other}` (horizontal, rot90, rot180, rot270, sine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_lines: usize,
    /// Inclusive range of characters per line.
    pub chars_per_line: (usize, usize),
    pub n_cls: u32,
    pub layout: Layout,
    /// Inclusive range of character width and height, as a fraction of a cell.
    pub char_size: (f64, f64),
    /// Grid columns of the page.
    pub w_g: usize,
    /// Grid rows of the page.
    pub h_g: usize,
    /// Rows between consecutive baselines in the unrotated frame.
    pub line_spacing: usize,
    /// Empty cells kept free along each page edge.
    pub margin: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_lines: 5,
            chars_per_line: (10, 10),
            n_cls: 100,
            layout: Layout::Horizontal,
            char_size: (0.6, 0.9),
            w_g: 32,
            h_g: 32,
            line_spacing: 5,
            margin: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Checks that the requested content fits on the page without lines
    /// sharing rows.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Generation(m));
        let (lo, hi) = self.chars_per_line;
        if self.n_lines == 0 || lo == 0 || lo > hi {
            return err(format!(
                "need n_lines >= 1 and 1 <= chars_per_line.0 <= chars_per_line.1, got {} and {:?}",
                self.n_lines, self.chars_per_line
            ));
        }
        if self.n_cls == 0 {
            return err("n_cls must be positive".into());
        }
        let (s_lo, s_hi) = self.char_size;
        if !(s_lo > 0.0 && s_lo <= s_hi && s_hi <= 1.0) {
            return err(format!("char_size {:?} must satisfy 0 < lo <= hi <= 1", self.char_size));
        }
        if self.margin == 0 {
            return err("margin must be at least 1".into());
        }
        if let Layout::SineCurve { amplitude, period } = self.layout {
            if !(amplitude >= 0.0 && amplitude.is_finite() && period > 0.0 && period.is_finite()) {
                return err(format!("sine amplitude {amplitude} / period {period} invalid"));
            }
        }
        let band = self.layout.amplitude().ceil() as usize;
        if self.n_lines > 1 && self.line_spacing <= 2 * band {
            return err(format!(
                "line_spacing {} must exceed twice the rounded amplitude ({})",
                self.line_spacing,
                2 * band
            ));
        }
        let (cw, ch) = self.canonical_dims();
        if self.margin * 2 + hi > cw {
            return err(format!(
                "{hi} characters per line do not fit in {cw} columns with margin {}",
                self.margin
            ));
        }
        let last_row = self.margin + band + 1 + (self.n_lines - 1) * self.line_spacing + band;
        if last_row + self.margin > ch {
            return err(format!(
                "{} lines need {} rows, page has {ch}",
                self.n_lines,
                last_row + self.margin
            ));
        }
        Ok(())
    }

    fn canonical_dims(&self) -> (usize, usize) {
        if self.layout.is_transposed() {
            (self.h_g, self.w_g)
        } else {
            (self.w_g, self.h_g)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthChar {
    pub line: usize,
    pub pos: usize,
    pub cls_id: ClassId,
    pub bbox: BBox<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPage {
    pub page_id: String,
    pub shape: GridShape,
    pub n_cls: u32,
    pub layout: Layout,
    /// Characters ordered by line, then position.
    pub chars: Vec<SynthChar>,
}

impl SyntheticPage {
    pub fn n_lines(&self) -> usize {
        self.chars.iter().map(|c| c.line + 1).max().unwrap_or(0)
    }

    pub fn reading_direction(&self) -> Direction {
        self.layout.reading_direction()
    }

    pub fn line_chars(&self, line: usize) -> impl Iterator<Item = &SynthChar> {
        self.chars.iter().filter(move |c| c.line == line)
    }

    pub fn grid(&self, c: &SynthChar) -> GridCoord {
        grid_of(&c.bbox, &self.shape)
    }

    /// Transcripts and boxes of the page.
    pub fn annotation(&self) -> PageAnnotation {
        let n = self.n_lines();
        let mut lines = vec![Vec::new(); n];
        let mut boxes = vec![Vec::new(); n];
        for c in &self.chars {
            lines[c.line].push(c.cls_id);
            boxes[c.line].push(c.bbox.to_array());
        }
        PageAnnotation {
            page_id: self.page_id.clone(),
            lines,
            boxes: Some(boxes),
        }
    }

    /// Transcript-only annotation, as weak supervision sees it.
    pub fn transcripts(&self) -> PageAnnotation {
        let mut a = self.annotation();
        a.boxes = None;
        a
    }
}

/// Generates one page from `config.seed`.
pub fn gen_page(config: &SynthConfig) -> Result<SyntheticPage> {
    gen_page_with_id(config, config.seed, format!("page-{:016x}", config.seed))
}

fn gen_page_with_id(config: &SynthConfig, seed: u64, page_id: String) -> Result<SyntheticPage> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = GridShape::with_stride(config.w_g, config.h_g)?;
    let (cw, ch) = config.canonical_dims();
    let (cw, ch) = (cw as f64, ch as f64);
    let amplitude = config.layout.amplitude();
    let band = amplitude.ceil() as usize;
    let cell = GRID_STRIDE as f64;

    let mut chars = Vec::new();
    for line in 0..config.n_lines {
        let len = rng.gen_range(config.chars_per_line.0..=config.chars_per_line.1);
        let base_row = config.margin + band + 1 + line * config.line_spacing;
        for pos in 0..len {
            let col = config.margin + 1 + pos;
            let u = (col - 1) as f64 + rng.gen_range(0.3..0.7);
            let mut v = (base_row - 1) as f64 + rng.gen_range(0.3..0.7);
            if let Layout::SineCurve { period, .. } = config.layout {
                v += amplitude * (std::f64::consts::TAU * u / period).sin();
            }
            let size_u = rng.gen_range(config.char_size.0..=config.char_size.1) * cell;
            let size_v = rng.gen_range(config.char_size.0..=config.char_size.1) * cell;
            let cls_id = rng.gen_range(1..=config.n_cls);

            // canonical cell units to page cell units
            let (x, y, w_px, h_px) = match config.layout {
                Layout::Rotated90 => (ch - v, u, size_v, size_u),
                Layout::Rotated180 => (cw - u, ch - v, size_u, size_v),
                Layout::Rotated270 => (v, cw - u, size_v, size_u),
                _ => (u, v, size_u, size_v),
            };
            let bbox = BBox::new(x * cell, y * cell, w_px / shape.img_w as f64, h_px / shape.img_h as f64);
            chars.push(SynthChar {
                line,
                pos,
                cls_id,
                bbox,
            });
        }
    }

    let page = SyntheticPage {
        page_id,
        shape,
        n_cls: config.n_cls,
        layout: config.layout,
        chars,
    };
    check_round_trip(&page)?;
    Ok(page)
}

/// Decodes the noiseless oracle maps of `page` and compares lines, grids, and
/// classes with the ground truth.
pub fn check_round_trip(page: &SyntheticPage) -> Result<()> {
    let maps = oracle_predict::<f64>(page, &OracleNoise::default())?;
    let result = decode(&maps, &DecodeConfig::default())?;
    let expected: Vec<Vec<(GridCoord, ClassId)>> = (0..page.n_lines())
        .map(|q| page.line_chars(q).map(|c| (page.grid(c), c.cls_id)).collect())
        .collect();
    let got: Vec<Vec<(GridCoord, ClassId)>> = result
        .lines
        .iter()
        .map(|l| l.chars.iter().map(|c| (c.grid, c.cls_id)).collect())
        .collect();
    let mut got_sorted = got.clone();
    got_sorted.sort();
    let mut expected_sorted = expected.clone();
    expected_sorted.sort();
    if got_sorted != expected_sorted || !result.unassigned.is_empty() {
        return Err(Error::Generation(format!(
            "page {} does not survive the noiseless round trip",
            page.page_id
        )));
    }
    Ok(())
}

/// Seed of page `index` under master seed `seed`.
pub fn page_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen()
}

/// `n_pages` pages named `page-0000`, `page-0001`, ... with per-page seeds
/// derived from `config.seed`.
pub fn gen_dataset(config: &SynthConfig, n_pages: usize) -> impl Iterator<Item = Result<SyntheticPage>> + '_ {
    (0..n_pages).map(move |idx| gen_page_with_id(config, page_seed(config.seed, idx), format!("page-{idx:04}")))
}

pub fn write_pages<'a>(path: impl AsRef<Path>, pages: impl IntoIterator<Item = &'a SyntheticPage>) -> Result<()> {
    let mut out = String::new();
    for page in pages {
        out.push_str(&serde_json::to_string(page)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pages(path: impl AsRef<Path>) -> Result<Vec<SyntheticPage>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| Error::format("page", format!("line {}: {e}", k + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn all_layouts() -> [Layout; 5] {
        [
            Layout::Horizontal,
            Layout::Rotated90,
            Layout::Rotated180,
            Layout::Rotated270,
            Layout::DEFAULT_SINE,
        ]
    }

    #[test]
    fn single_char_page() {
        let cfg = SynthConfig {
            n_lines: 1,
            chars_per_line: (1, 1),
            ..SynthConfig::default()
        };
        let page = gen_page(&cfg).unwrap();
        assert_eq!(page.chars.len(), 1);
        assert_eq!(page.annotation().lines, vec![vec![page.chars[0].cls_id]]);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        for layout in all_layouts() {
            let cfg = SynthConfig {
                layout,
                seed: 42,
                ..SynthConfig::default()
            };
            assert_eq!(gen_page(&cfg).unwrap(), gen_page(&cfg).unwrap());
        }
    }

    #[test]
    fn zero_amplitude_sine_matches_horizontal() {
        let flat = SynthConfig {
            layout: Layout::SineCurve {
                amplitude: 0.0,
                period: 12.0,
            },
            seed: 9,
            ..SynthConfig::default()
        };
        let straight = SynthConfig {
            layout: Layout::Horizontal,
            ..flat.clone()
        };
        assert_eq!(gen_page(&flat).unwrap().chars, gen_page(&straight).unwrap().chars);
    }

    #[test]
    fn one_character_per_grid() {
        for layout in all_layouts() {
            for seed in 0..10 {
                let cfg = SynthConfig {
                    layout,
                    seed,
                    chars_per_line: (3, 20),
                    ..SynthConfig::default()
                };
                let page = gen_page(&cfg).unwrap();
                let grids: HashSet<_> = page.chars.iter().map(|c| page.grid(c)).collect();
                assert_eq!(grids.len(), page.chars.len());
            }
        }
    }

    #[test]
    fn rotation_moves_reading_direction() {
        for layout in [Layout::Rotated90, Layout::Rotated180, Layout::Rotated270] {
            let page = gen_page(&SynthConfig {
                layout,
                seed: 3,
                ..SynthConfig::default()
            })
            .unwrap();
            let (di, dj) = layout.reading_direction().delta();
            let line: Vec<_> = page.line_chars(0).map(|c| page.grid(c)).collect();
            for w in line.windows(2) {
                assert_eq!((w[1].i as i64 - w[0].i as i64, w[1].j as i64 - w[0].j as i64), (di, dj));
            }
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let too_long = SynthConfig {
            chars_per_line: (31, 31),
            ..SynthConfig::default()
        };
        assert!(matches!(gen_page(&too_long), Err(Error::Generation(_))));
        let too_many = SynthConfig {
            n_lines: 7,
            ..SynthConfig::default()
        };
        assert!(matches!(gen_page(&too_many), Err(Error::Generation(_))));
        let tight = SynthConfig {
            layout: Layout::DEFAULT_SINE,
            line_spacing: 4,
            n_lines: 2,
            ..SynthConfig::default()
        };
        assert!(matches!(gen_page(&tight), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_seeds_and_ids() {
        let cfg = SynthConfig::default();
        let pages: Vec<_> = gen_dataset(&cfg, 4).collect::<Result<_>>().unwrap();
        assert_eq!(pages.len(), 4);
        assert_eq!(pages[2].page_id, "page-0002");
        assert_ne!(pages[0].chars, pages[1].chars);
        let again: Vec<_> = gen_dataset(&cfg, 4).collect::<Result<_>>().unwrap();
        assert_eq!(pages, again);
    }

    #[test]
    fn pages_round_trip_through_jsonl() {
        let cfg = SynthConfig {
            layout: Layout::DEFAULT_SINE,
            ..SynthConfig::default()
        };
        let pages: Vec<_> = gen_dataset(&cfg, 3).collect::<Result<_>>().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pages.jsonl");
        write_pages(&path, &pages).unwrap();
        assert_eq!(read_pages(&path).unwrap(), pages);
    }
}
