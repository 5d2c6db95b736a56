//! SVG overlays of decoded pages: character boxes, one polyline per line
//! through the character centres, and start/end-of-line markers.

use std::fmt::Write;

use crate::decoder::PageResult;
use crate::matching::PageAnnotation;
use crate::Scalar;

pub const SOL_COLOR: &str = "orange";
pub const EOL_COLOR: &str = "green";

/// Renders `result`. Ground-truth boxes of `annot`, when present, are drawn
/// dashed underneath.
pub fn render_svg<T: Scalar>(result: &PageResult<T>, annot: Option<&PageAnnotation>) -> String {
    let shape = &result.shape;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = shape.img_w,
        h = shape.img_h
    );
    let _ = writeln!(
        out,
        r#"<rect class="page" x="0" y="0" width="{}" height="{}" fill="white"/>"#,
        shape.img_w, shape.img_h
    );

    if let Some(boxes) = annot.and_then(|a| a.boxes.as_ref()) {
        for b in boxes.iter().flatten() {
            let (x0, y0, w, h) = px_rect(b[0], b[1], b[2], b[3], shape.img_w, shape.img_h);
            let _ = writeln!(
                out,
                r#"<rect class="gt" x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="gray" stroke-dasharray="2,2"/>"#
            );
        }
    }

    for (p, line) in result.lines.iter().enumerate() {
        for c in &line.chars {
            let b = c.bbox;
            let (x0, y0, w, h) = px_rect(
                b.x.as_f64(),
                b.y.as_f64(),
                b.w.as_f64(),
                b.h.as_f64(),
                shape.img_w,
                shape.img_h,
            );
            let _ = writeln!(
                out,
                r#"<rect class="char" data-line="{p}" data-cls="{}" x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="blue"/>"#,
                c.cls_id
            );
        }
        let points: Vec<String> = line
            .chars
            .iter()
            .map(|c| format!("{:.2},{:.2}", c.bbox.x.as_f64(), c.bbox.y.as_f64()))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="line" data-line="{p}" points="{}" fill="none" stroke="red"/>"#,
            points.join(" ")
        );
        if let (Some(first), Some(last)) = (line.chars.first(), line.chars.last()) {
            let _ = writeln!(
                out,
                r#"<circle class="sol" cx="{:.2}" cy="{:.2}" r="3" fill="{SOL_COLOR}"/>"#,
                first.bbox.x.as_f64(),
                first.bbox.y.as_f64()
            );
            let _ = writeln!(
                out,
                r#"<circle class="eol" cx="{:.2}" cy="{:.2}" r="2" fill="{EOL_COLOR}"/>"#,
                last.bbox.x.as_f64(),
                last.bbox.y.as_f64()
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn px_rect(x: f64, y: f64, w: f64, h: f64, img_w: u32, img_h: u32) -> (f64, f64, f64, f64) {
    let (w, h) = (w * img_w as f64, h * img_h as f64);
    (x - w / 2.0, y - h / 2.0, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{decode, DecodeConfig};
    use crate::geometry::GridShape;
    use crate::predictions::{oracle_predict, OracleNoise};
    use crate::synth::{gen_page, Layout, SynthConfig};

    #[test]
    fn empty_page_is_svg() {
        let svg = render_svg(&PageResult::<f64>::empty(GridShape::with_stride(4, 4).unwrap()), None);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn one_polyline_per_line() {
        let page = gen_page(&SynthConfig {
            n_lines: 1,
            layout: Layout::Rotated90,
            ..SynthConfig::default()
        })
        .unwrap();
        let maps = oracle_predict::<f64>(&page, &OracleNoise::default()).unwrap();
        let r = decode(&maps, &DecodeConfig::default()).unwrap();
        let svg = render_svg(&r, Some(&page.annotation()));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches(r#"class="char""#).count(), page.chars.len());
        let first = r.lines[0].chars[0].bbox;
        assert!(svg.contains(&format!(
            r#"cx="{:.2}" cy="{:.2}" r="3" fill="orange""#,
            first.x, first.y
        )));
        assert_eq!(svg, render_svg(&r, Some(&page.annotation())));
    }
}
