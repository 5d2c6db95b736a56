//! Map file format.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic   b"PGNM"
//! version u16 (= 1)
//! w_g     u32
//! h_g     u32
//! n_cls   u32
//! box, dis, cls, sol, eol, rd   as f32, row-major (row, column, channel)
//! ```
//!
//! The binary header carries no pixel size; the image is taken to be
//! `GRID_STRIDE` pixels per cell. A JSON mirror with the same field names
//! (nested `[row][column]` or `[row][column][channel]` arrays) is accepted
//! for hand-written fixtures and may carry explicit `img_w`/`img_h`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PredictionMaps;
use crate::error::{Error, Result};
use crate::geometry::{GridShape, GRID_STRIDE};
use crate::Scalar;

const MAGIC: &[u8; 4] = b"PGNM";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 3;

/// Writes maps in the binary format. Values are narrowed to `f32`.
pub fn write_maps<T: Scalar, W: Write>(maps: &PredictionMaps<T>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * total_len(maps.shape.n_grids(), maps.n_cls));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(maps.shape.w_g as u32).to_le_bytes());
    buf.extend_from_slice(&(maps.shape.h_g as u32).to_le_bytes());
    buf.extend_from_slice(&(maps.n_cls as u32).to_le_bytes());
    for (_, data) in maps.tensors() {
        for v in data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn total_len(n: usize, n_cls: usize) -> usize {
    n * (4 + 1 + n_cls + 1 + 1 + 4)
}

/// Reads binary maps.
pub fn read_maps<T: Scalar, R: Read>(mut r: R) -> Result<PredictionMaps<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_binary(&bytes)
}

fn decode_binary<T: Scalar>(bytes: &[u8]) -> Result<PredictionMaps<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("{} bytes, need {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("magic", "expected PGNM"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let w_g = u32_at(6) as usize;
    let h_g = u32_at(10) as usize;
    let n_cls = u32_at(14) as usize;
    if w_g == 0 || h_g == 0 {
        return Err(Error::format("header", format!("empty grid {w_g}x{h_g}")));
    }
    if n_cls == 0 {
        return Err(Error::format("n_cls", "must be at least 1"));
    }
    let shape = GridShape::with_stride(w_g, h_g).map_err(|e| Error::format("header", e.to_string()))?;
    let n = shape.n_grids();

    let payload = &bytes[HEADER_LEN..];
    let mut cursor = 0usize;
    let mut take = |name: &str, count: usize| -> Result<Vec<T>> {
        let need = count * 4;
        if payload.len() < cursor + need {
            return Err(Error::format(
                name,
                format!(
                    "truncated: need {need} bytes at offset {}, {} available",
                    HEADER_LEN + cursor,
                    payload.len().saturating_sub(cursor)
                ),
            ));
        }
        let out = payload[cursor..cursor + need]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        cursor += need;
        Ok(out)
    };
    let boxes = take("box", n * 4)?;
    let dis = take("dis", n)?;
    let cls = take("cls", n * n_cls)?;
    let sol = take("sol", n)?;
    let eol = take("eol", n)?;
    let rd = take("rd", n * 4)?;
    if cursor != payload.len() {
        return Err(Error::format(
            "n_cls",
            format!(
                "{} trailing bytes; header dimensions {w_g}x{h_g}x{n_cls} disagree with payload",
                payload.len() - cursor
            ),
        ));
    }
    PredictionMaps::from_parts(shape, n_cls, boxes, dis, cls, sol, eol, rd)
}

/// JSON mirror of the binary format.
#[derive(Debug, Serialize, Deserialize)]
struct MapsJson {
    w_g: usize,
    h_g: usize,
    n_cls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    img_w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    img_h: Option<u32>,
    #[serde(rename = "box")]
    boxes: Vec<Vec<Vec<f64>>>,
    dis: Vec<Vec<f64>>,
    cls: Vec<Vec<Vec<f64>>>,
    sol: Vec<Vec<f64>>,
    eol: Vec<Vec<f64>>,
    rd: Vec<Vec<Vec<f64>>>,
}

pub fn maps_to_json<T: Scalar>(maps: &PredictionMaps<T>) -> serde_json::Value {
    let s = maps.shape;
    let grid2 = |data: &[T]| -> Vec<Vec<f64>> {
        data.chunks(s.w_g)
            .map(|row| row.iter().map(|v| v.as_f64()).collect())
            .collect()
    };
    let grid3 = |data: &[T], k: usize| -> Vec<Vec<Vec<f64>>> {
        data.chunks(s.w_g * k)
            .map(|row| {
                row.chunks(k)
                    .map(|cell| cell.iter().map(|v| v.as_f64()).collect())
                    .collect()
            })
            .collect()
    };
    let doc = MapsJson {
        w_g: s.w_g,
        h_g: s.h_g,
        n_cls: maps.n_cls,
        img_w: Some(s.img_w),
        img_h: Some(s.img_h),
        boxes: grid3(&maps.boxes, 4),
        dis: grid2(&maps.dis),
        cls: grid3(&maps.cls, maps.n_cls),
        sol: grid2(&maps.sol),
        eol: grid2(&maps.eol),
        rd: grid3(&maps.rd, 4),
    };
    serde_json::to_value(doc).expect("maps serialize")
}

pub fn maps_from_json<T: Scalar>(text: &str) -> Result<PredictionMaps<T>> {
    let doc: MapsJson = serde_json::from_str(text).map_err(|e| Error::format("json", e.to_string()))?;
    if doc.n_cls == 0 {
        return Err(Error::format("n_cls", "must be at least 1"));
    }
    let shape = GridShape::new(
        doc.w_g,
        doc.h_g,
        doc.img_w.unwrap_or(doc.w_g as u32 * GRID_STRIDE),
        doc.img_h.unwrap_or(doc.h_g as u32 * GRID_STRIDE),
    )
    .map_err(|e| Error::format("header", e.to_string()))?;

    let flat2 = |name: &str, rows: &[Vec<f64>]| -> Result<Vec<T>> {
        if rows.len() != shape.h_g || rows.iter().any(|r| r.len() != shape.w_g) {
            return Err(Error::format(
                name,
                format!("expected {}x{} grid", shape.h_g, shape.w_g),
            ));
        }
        Ok(rows.iter().flatten().map(|&v| T::lit(v)).collect())
    };
    let flat3 = |name: &str, rows: &[Vec<Vec<f64>>], k: usize| -> Result<Vec<T>> {
        if rows.len() != shape.h_g || rows.iter().any(|r| r.len() != shape.w_g) {
            return Err(Error::format(
                name,
                format!("expected {}x{} grid", shape.h_g, shape.w_g),
            ));
        }
        if let Some(bad) = rows.iter().flatten().find(|cell| cell.len() != k) {
            return Err(Error::format(
                name,
                format!("expected {k} channels per grid, found {}", bad.len()),
            ));
        }
        Ok(rows.iter().flatten().flatten().map(|&v| T::lit(v)).collect())
    };

    PredictionMaps::from_parts(
        shape,
        doc.n_cls,
        flat3("box", &doc.boxes, 4)?,
        flat2("dis", &doc.dis)?,
        flat3("cls", &doc.cls, doc.n_cls)?,
        flat2("sol", &doc.sol)?,
        flat2("eol", &doc.eol)?,
        flat3("rd", &doc.rd, 4)?,
    )
}

pub fn save_maps<T: Scalar>(maps: &PredictionMaps<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_maps(maps, std::io::BufWriter::new(file))
}

pub fn save_maps_json<T: Scalar>(maps: &PredictionMaps<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec(&maps_to_json(maps))?)?;
    Ok(())
}

/// Loads maps from either the binary format or its JSON mirror, chosen by
/// the leading magic bytes.
pub fn load_maps<T: Scalar>(path: impl AsRef<Path>) -> Result<PredictionMaps<T>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        let text =
            std::str::from_utf8(&bytes).map_err(|_| Error::format("magic", "neither PGNM binary nor UTF-8 JSON"))?;
        maps_from_json(text)
    }
}
