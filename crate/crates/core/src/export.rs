//! Fabrication outputs from an argmax index grid: cross-stitch charts (SVG
//! and CSV) and tile mosaics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::generator;
use crate::imaging::{to_byte, Image};
use crate::palette::Palette;

/// Chart symbols, handed out in order of descending color frequency.
pub const GLYPHS: [char; 64] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', 'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L',
    'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T', 'U', 'V', 'W', 'X', 'Y', 'Z', '■', '□', '▲', '△', '●', '○', '◆', '◇',
    '★', '☆', '♦', '♥', '♠', '♣', '▼', '▽', '◀', '▶', '◐', '◑', '◒', '◓', '⬟', '⬢', '✚', '✖', '✦', '✱',
];

pub const CELL: usize = 20;
pub const DEFAULT_TITLE: &str = "Cross-stitch chart";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LegendEntry {
    pub symbol: char,
    pub palette_index: usize,
    pub hex: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StitchChart {
    pub height: usize,
    pub width: usize,
    /// Row-major legend positions.
    pub grid: Vec<usize>,
    pub legend: Vec<LegendEntry>,
    pub title: String,
}

fn hex_color(rgb: [f64; 3]) -> String {
    format!("#{:02X}{:02X}{:02X}", to_byte(rgb[0]), to_byte(rgb[1]), to_byte(rgb[2]))
}

fn check_indices(indices: &[usize], height: usize, width: usize, n: usize) -> Result<()> {
    if indices.len() != height * width {
        return Err(Error::shape("index grid", format!("{}", height * width), indices.len()));
    }
    if let Some(&bad) = indices.iter().find(|&&k| k >= n) {
        return Err(Error::InvalidArgument(format!("palette index {bad} out of range for {n} colors")));
    }
    Ok(())
}

pub fn make_chart(indices: &[usize], height: usize, width: usize, palette: &Palette, title: &str) -> Result<StitchChart> {
    let n = palette.len();
    if n > GLYPHS.len() {
        return Err(Error::InvalidArgument(format!(
            "charts support at most {} colors, palette has {n}",
            GLYPHS.len()
        )));
    }
    check_indices(indices, height, width, n)?;
    let mut counts = vec![0usize; n];
    for &k in indices {
        counts[k] += 1;
    }
    let mut used: Vec<usize> = (0..n).filter(|&k| counts[k] > 0).collect();
    used.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let colors = palette.mean_colors();
    let mut position = vec![usize::MAX; n];
    let legend = used
        .iter()
        .enumerate()
        .map(|(pos, &k)| {
            position[k] = pos;
            LegendEntry {
                symbol: GLYPHS[pos],
                palette_index: k,
                hex: hex_color(colors[k]),
                count: counts[k],
            }
        })
        .collect();
    Ok(StitchChart {
        height,
        width,
        grid: indices.iter().map(|&k| position[k]).collect(),
        legend,
        title: title.to_string(),
    })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Black or white, whichever reads better on `hex`.
fn ink_for(hex: &str) -> &'static str {
    let c = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).unwrap_or(0) as f64;
    if 0.299 * c(1) + 0.587 * c(3) + 0.114 * c(5) > 140.0 {
        "#000000"
    } else {
        "#FFFFFF"
    }
}

/// SVG 1.1 chart: colored cells with symbols, thin lines between cells,
/// bold lines every 10 cells, a bold frame, and a legend underneath.
pub fn render_chart_svg(chart: &StitchChart) -> String {
    let margin = CELL;
    let grid_w = chart.width * CELL;
    let grid_h = chart.height * CELL;
    let top = margin * 2;
    let legend_top = top + grid_h + margin;
    let total_w = (grid_w + 2 * margin).max(12 * CELL);
    let total_h = legend_top + chart.legend.len() * CELL + margin;
    let title = if chart.title.trim().is_empty() {
        DEFAULT_TITLE
    } else {
        chart.title.as_str()
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{total_w}" height="{total_h}" viewBox="0 0 {total_w} {total_h}">"#
    );
    let _ = writeln!(s, r##"<rect width="{total_w}" height="{total_h}" fill="#FFFFFF"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{margin}" y="{}" font-family="sans-serif" font-size="16">{}</text>"#,
        margin + 4,
        escape(title)
    );

    let _ = writeln!(s, r#"<g font-family="monospace" font-size="14" text-anchor="middle">"#);
    for y in 0..chart.height {
        for x in 0..chart.width {
            let entry = &chart.legend[chart.grid[y * chart.width + x]];
            let (px, py) = (margin + x * CELL, top + y * CELL);
            let _ = writeln!(
                s,
                r#"<rect x="{px}" y="{py}" width="{CELL}" height="{CELL}" fill="{}"/><text x="{}" y="{}" fill="{}">{}</text>"#,
                entry.hex,
                px + CELL / 2,
                py + CELL - 5,
                ink_for(&entry.hex),
                escape(&entry.symbol.to_string())
            );
        }
    }
    let _ = writeln!(s, "</g>");

    let line = |s: &mut String, x1: usize, y1: usize, x2: usize, y2: usize, bold: bool| {
        let class = if bold { "bold" } else { "thin" };
        let width = if bold { 2 } else { 1 };
        let _ = writeln!(
            s,
            r##"<line class="{class}" x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="#000000" stroke-width="{width}"/>"##
        );
    };
    for x in 1..chart.width {
        let px = margin + x * CELL;
        line(&mut s, px, top, px, top + grid_h, x % 10 == 0);
    }
    for y in 1..chart.height {
        let py = top + y * CELL;
        line(&mut s, margin, py, margin + grid_w, py, y % 10 == 0);
    }
    let _ = writeln!(
        s,
        r##"<rect class="frame" x="{margin}" y="{top}" width="{grid_w}" height="{grid_h}" fill="none" stroke="#000000" stroke-width="2"/>"##
    );

    let _ = writeln!(s, r#"<g font-family="monospace" font-size="14">"#);
    for (i, e) in chart.legend.iter().enumerate() {
        let py = legend_top + i * CELL;
        let _ = writeln!(
            s,
            r##"<rect x="{margin}" y="{py}" width="{CELL}" height="{CELL}" fill="{}" stroke="#000000"/><text x="{}" y="{}" text-anchor="middle" fill="{}">{}</text><text x="{}" y="{}">color {} {} x{}</text>"##,
            e.hex,
            margin + CELL / 2,
            py + CELL - 5,
            ink_for(&e.hex),
            escape(&e.symbol.to_string()),
            margin + CELL + 8,
            py + CELL - 5,
            e.palette_index,
            e.hex,
            e.count
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

/// One row per cell: `i,j,index` with `i` the row.
pub fn chart_csv(indices: &[usize], height: usize, width: usize) -> Result<String> {
    check_indices(indices, height, width, usize::MAX)?;
    let mut s = String::from("i,j,index\n");
    for i in 0..height {
        for j in 0..width {
            let _ = writeln!(s, "{i},{j},{}", indices[i * width + j]);
        }
    }
    Ok(s)
}

/// Replaces each cell by its palette tile, `(H*h) x (W*w)`.
pub fn render_mosaic(indices: &[usize], height: usize, width: usize, palette: &Palette) -> Result<Image> {
    check_indices(indices, height, width, palette.len())?;
    generator::render_indices(indices, height, width, palette)
}

/// Recovers palette indices from an argmax render by exact byte match of
/// every tile-sized cell.
pub fn indices_from_render(img: &Image, palette: &Palette) -> Result<(Vec<usize>, usize, usize)> {
    let (th, tw) = palette.tile_dims();
    let img = img.to_rgb();
    if img.height() % th != 0 || img.width() % tw != 0 {
        return Err(Error::shape(
            "render vs tile size",
            format!("multiple of {th}x{tw}"),
            img.shape_string(),
        ));
    }
    let (h, w) = (img.height() / th, img.width() / tw);
    let bytes = |p: &[f64]| [to_byte(p[0]), to_byte(p[1]), to_byte(p[2])];
    let tiles: Vec<Vec<[u8; 3]>> = palette
        .elements()
        .iter()
        .map(|e| e.pixels().iter().map(|p| bytes(p)).collect())
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cell: Vec<[u8; 3]> = (0..th)
                .flat_map(|dy| (0..tw).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| bytes(img.pixel(y * th + dy, x * tw + dx)))
                .collect();
            let k = tiles.iter().position(|t| *t == cell).ok_or_else(|| {
                Error::InvalidArgument(format!("cell ({y}, {x}) matches no palette element"))
            })?;
            out.push(k);
        }
    }
    Ok((out, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{init_random, render, RenderMode};
    use proptest::prelude::*;

    #[test]
    fn glyphs_are_distinct() {
        let mut g = GLYPHS.to_vec();
        g.sort_unstable();
        g.dedup();
        assert_eq!(g.len(), 64);
    }

    #[test]
    fn uniform_field_has_one_row() {
        let p = Palette::hue_wheel(3).unwrap();
        let chart = make_chart(&[2; 12], 3, 4, &p, "").unwrap();
        assert_eq!(chart.legend.len(), 1);
        assert_eq!(chart.legend[0].count, 12);
        assert_eq!(chart.legend[0].palette_index, 2);
        assert!(render_chart_svg(&chart).contains(DEFAULT_TITLE));
    }

    #[test]
    fn checker_counts() {
        let p = Palette::hue_wheel(3).unwrap();
        let chart = make_chart(&[0, 1, 1, 0], 2, 2, &p, "t").unwrap();
        let counts: Vec<(usize, usize)> = chart.legend.iter().map(|e| (e.palette_index, e.count)).collect();
        assert_eq!(counts, vec![(0, 2), (1, 2)]);
        assert_eq!(chart.legend[0].hex, "#FF0000");
    }

    #[test]
    fn frequency_order() {
        let p = Palette::hue_wheel(4).unwrap();
        let chart = make_chart(&[3, 3, 3, 1, 1, 0], 2, 3, &p, "t").unwrap();
        let order: Vec<usize> = chart.legend.iter().map(|e| e.palette_index).collect();
        assert_eq!(order, vec![3, 1, 0]);
        assert_eq!(chart.grid, vec![0, 0, 0, 1, 1, 2]);
        assert_eq!(chart.legend[0].symbol, '0');
    }

    #[test]
    fn too_many_colors() {
        let p = Palette::hue_wheel(65).unwrap();
        assert!(make_chart(&[0], 1, 1, &p, "").is_err());
        assert!(make_chart(&[5], 1, 1, &Palette::hue_wheel(3).unwrap(), "").is_err());
    }

    fn bold_lines(svg: &str) -> (usize, usize) {
        let bold: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="bold""#)).collect();
        let vertical = bold
            .iter()
            .filter(|l| {
                let x1 = l.split("x1=\"").nth(1).unwrap().split('"').next().unwrap();
                let x2 = l.split("x2=\"").nth(1).unwrap().split('"').next().unwrap();
                x1 == x2
            })
            .count();
        (vertical, bold.len() - vertical)
    }

    #[test]
    fn bold_lines_every_ten_cells() {
        let p = Palette::hue_wheel(3).unwrap();
        let count = |h: usize, w: usize| {
            let idx: Vec<usize> = (0..h * w).map(|i| i % 3).collect();
            bold_lines(&render_chart_svg(&make_chart(&idx, h, w, &p, "x").unwrap()))
        };
        assert_eq!(count(10, 10), (0, 0));
        assert_eq!(count(11, 11), (1, 1));
        assert_eq!(count(20, 20), (1, 1));
        assert_eq!(count(25, 31), (3, 2));
    }

    #[test]
    fn title_is_escaped() {
        let p = Palette::hue_wheel(2).unwrap();
        let svg = render_chart_svg(&make_chart(&[0, 1], 1, 2, &p, "a<b & c").unwrap());
        assert!(svg.contains("a&lt;b &amp; c"));
    }

    #[test]
    fn csv_rows() {
        let csv = chart_csv(&[0, 1, 2, 0], 2, 2).unwrap();
        assert_eq!(csv, "i,j,index\n0,0,0\n0,1,1\n1,0,2\n1,1,0\n");
    }

    #[test]
    fn mosaic_of_single_tile() {
        let tile = crate::palette::PaletteElement::tile(2, 2, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        let other = crate::palette::PaletteElement::tile(2, 2, vec![[0.0; 3]; 4]).unwrap();
        let p = Palette::new("t", vec![tile, other]).unwrap();
        let m = render_mosaic(&[0; 6], 2, 3, &p).unwrap();
        assert_eq!(m.dims(), (4, 6, 3));
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(m.pixel(y, x), m.pixel(y % 2, x % 2));
            }
        }
        assert_eq!(indices_from_render(&m, &p).unwrap(), (vec![0; 6], 2, 3));
    }

    #[test]
    fn mosaic_equals_argmax_render() {
        let p = Palette::hue_wheel(5).unwrap();
        let theta = init_random(6, 7, 5, 3, 1.0).unwrap();
        let idx = theta.argmax();
        let a = render(&theta, &p, RenderMode::Argmax).unwrap();
        assert_eq!(render_mosaic(&idx, 6, 7, &p).unwrap(), a);
        assert_eq!(indices_from_render(&a, &p).unwrap().0, idx);
    }

    proptest! {
        #[test]
        fn counts_match_histogram(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let p = Palette::hue_wheel(6).unwrap();
            let idx = init_random(h, w, 6, seed, 1.0).unwrap().argmax();
            let chart = make_chart(&idx, h, w, &p, "").unwrap();
            prop_assert_eq!(chart.legend.iter().map(|e| e.count).sum::<usize>(), h * w);
            for e in &chart.legend {
                prop_assert_eq!(e.count, idx.iter().filter(|&&k| k == e.palette_index).count());
            }
            for (pos, &k) in chart.grid.iter().zip(&idx) {
                prop_assert_eq!(chart.legend[*pos].palette_index, k);
            }
        }
    }
}
