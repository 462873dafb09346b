//! SVG figures: a density field as an embedded grayscale PNG with graph
//! overlays drawn as polylines.

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::error::{Error, Result};
use crate::netgraph::{chains, GeoGraph};
use crate::raster::{quantize8, DensityField};

/// Stroke colors, cycled when there are more layers.
pub const PALETTE: [&str; 6] = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub stroke_width: f64,
    pub opacity: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            stroke_width: 1.5,
            opacity: 0.9,
        }
    }
}

/// 8-bit grayscale PNG of the field.
pub fn encode_png(field: &DensityField) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, field.width() as u32, field.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::format(e.to_string()))?;
        w.write_image_data(&gray8(field))
            .map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(out)
}

fn gray8(field: &DensityField) -> Vec<u8> {
    field.values().iter().map(|&v| quantize8(v)).collect()
}

/// One `<g>` per non-empty graph, in the order given. Pixel centers sit at
/// half-integer SVG coordinates.
pub fn render_svg(field: &DensityField, graphs: &[&GeoGraph], opts: &RenderOptions) -> Result<String> {
    let (w, h) = (field.width(), field.height());
    let png = STANDARD.encode(encode_png(field)?);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<image x="0" y="0" width="{w}" height="{h}" style="image-rendering:pixelated" href="data:image/png;base64,{png}"/>"#
    );
    for (k, g) in graphs.iter().enumerate() {
        if g.edge_count() == 0 {
            continue;
        }
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<g id="layer{k}" fill="none" stroke="{color}" stroke-width="{}" stroke-opacity="{}" stroke-linecap="round" stroke-linejoin="round">"#,
            opts.stroke_width, opts.opacity
        );
        for chain in chains(g, |v| v as f64) {
            s.push_str("<polyline points=\"");
            for (i, &v) in chain.iter().enumerate() {
                let p = g.point(v);
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{},{}", p.x + 0.5, p.y + 0.5);
            }
            s.push_str("\"/>\n");
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn save_svg(field: &DensityField, graphs: &[&GeoGraph], opts: &RenderOptions, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_svg(field, graphs, opts)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field() -> DensityField {
        DensityField::from_fn(8, 6, |x, y| ((x + y) % 4) as f32 / 3.0)
    }

    fn path_graph(offset: f64) -> GeoGraph {
        let mut g = GeoGraph::new();
        let a = g.add_vertex(1.0, offset);
        let b = g.add_vertex(5.0, offset);
        let c = g.add_vertex(5.0, offset + 3.0);
        g.add_edge(a, b).unwrap();
        g.add_edge(b, c).unwrap();
        g
    }

    #[test]
    fn empty_overlay_is_just_the_image() {
        let s = render_svg(&field(), &[&GeoGraph::new()], &RenderOptions::default()).unwrap();
        assert_eq!(s.matches("<image").count(), 1);
        assert!(!s.contains("<g") && !s.contains("<polyline"));
    }

    #[test]
    fn layers_keep_declaration_order() {
        let (a, b) = (path_graph(1.0), path_graph(2.0));
        let s = render_svg(&field(), &[&a, &b], &RenderOptions::default()).unwrap();
        let (i, j) = (s.find(r#"id="layer0""#).unwrap(), s.find(r#"id="layer1""#).unwrap());
        assert!(i < j);
        assert!(s.contains(PALETTE[0]) && s.contains(PALETTE[1]));
        assert!(s.contains("1.5,1.5 5.5,1.5 5.5,4.5"));
        assert_eq!(s, render_svg(&field(), &[&a, &b], &RenderOptions::default()).unwrap());
    }

    #[test]
    fn png_round_trips() {
        let f = field();
        let bytes = encode_png(&f).unwrap();
        let dec = png::Decoder::new(bytes.as_slice());
        let mut r = dec.read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size()];
        let info = r.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (8, 6));
        assert_eq!(&buf[..info.buffer_size()], gray8(&f).as_slice());
    }
}
