// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static SVG heatmaps over a layer x head grid, plus the matching CSV.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    /// Blue-white-red over `[-1, 1]`, values clipped.
    Diverging,
    /// White to blue over `[0, 1]`, values clipped.
    Sequential,
}

const CELL: usize = 28;
const MARGIN_LEFT: usize = 56;
const MARGIN_TOP: usize = 36;
const LEGEND: usize = 40;
const BLUE: (f64, f64, f64) = (33.0, 102.0, 172.0);
const RED: (f64, f64, f64) = (178.0, 24.0, 43.0);
const MISSING: &str = "#bdbdbd";

fn mix(to: (f64, f64, f64), t: f64) -> String {
    let c = |target: f64| (255.0 + (target - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(to.0), c(to.1), c(to.2))
}

/// Fill color of a value under `palette`.
pub fn color(palette: Palette, v: f64) -> String {
    match palette {
        Palette::Diverging => {
            let v = v.clamp(-1.0, 1.0);
            if v < 0.0 {
                mix(BLUE, -v)
            } else {
                mix(RED, v)
            }
        }
        Palette::Sequential => mix(BLUE, v.clamp(0.0, 1.0)),
    }
}

fn check(grid: &Array2<Option<f64>>) -> Result<()> {
    if let Some(i) = grid.iter().position(|v| v.is_some_and(|v| !v.is_finite())) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(())
}

/// Renders `grid` (rows = layers, columns = heads). `None` cells are drawn
/// grey. Output depends only on the inputs.
pub fn render_svg(grid: &Array2<Option<f64>>, palette: Palette, title: &str) -> Result<String> {
    check(grid)?;
    let (rows, cols) = grid.dim();
    let width = MARGIN_LEFT + cols * CELL + 16;
    let height = MARGIN_TOP + rows * CELL + LEGEND;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN_LEFT}" y="14" font-size="12">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle">head</text>"#,
        MARGIN_LEFT + cols * CELL / 2
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">layer</text>"#,
        MARGIN_TOP + rows * CELL / 2,
        MARGIN_TOP + rows * CELL / 2
    );
    for h in 0..cols {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{h}</text>"#,
            MARGIN_LEFT + h * CELL + CELL / 2,
            MARGIN_TOP - 2
        );
    }
    for ((l, h), v) in grid.indexed_iter() {
        if h == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{l}</text>"#,
                MARGIN_LEFT - 4,
                MARGIN_TOP + l * CELL + CELL / 2 + 3
            );
        }
        let (fill, label) = match v {
            Some(v) => (color(palette, *v), format!("{v:.4}")),
            None => (MISSING.to_string(), "failed".to_string()),
        };
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}"><title>layer {l}, head {h}: {label}</title></rect>"#,
            MARGIN_LEFT + h * CELL,
            MARGIN_TOP + l * CELL
        );
    }
    let present: Vec<f64> = grid.iter().flatten().copied().collect();
    let legend_y = MARGIN_TOP + rows * CELL + 24;
    let legend = match (present.iter().copied().reduce(f64::min), present.iter().copied().reduce(f64::max)) {
        (Some(lo), Some(hi)) if lo == hi => format!("value {lo:.4}"),
        (Some(lo), Some(hi)) => format!("min {lo:.4}  max {hi:.4}"),
        _ => "no values".to_string(),
    };
    let scale = match palette {
        Palette::Diverging => "scale -1 (blue) to 1 (red)",
        Palette::Sequential => "scale 0 (white) to 1 (blue)",
    };
    let _ = writeln!(s, r#"<text x="{MARGIN_LEFT}" y="{legend_y}">{legend}; {scale}</text>"#);
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One line of a grid CSV; empty `value` marks a failed cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub layer: usize,
    pub head: usize,
    pub value: Option<f64>,
}

pub fn write_grid_csv<W: Write>(grid: &Array2<Option<f64>>, out: W) -> Result<()> {
    check(grid)?;
    let mut w = csv::Writer::from_writer(out);
    for ((layer, head), &value) in grid.indexed_iter() {
        w.serialize(GridRow { layer, head, value })?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a grid CSV back into the grid it was written from.
pub fn read_grid_csv<R: Read>(input: R) -> Result<Array2<Option<f64>>> {
    let rows: Vec<GridRow> = csv::Reader::from_reader(input).deserialize().collect::<std::result::Result<_, _>>()?;
    let n_layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let n_heads = rows.iter().map(|r| r.head + 1).max().unwrap_or(0);
    if rows.len() != n_layers * n_heads {
        return Err(Error::GridMismatch(format!(
            "{} rows for a {n_layers}x{n_heads} grid",
            rows.len()
        )));
    }
    let mut grid = Array2::from_elem((n_layers, n_heads), None);
    for r in rows {
        grid[[r.layer, r.head]] = r.value;
    }
    Ok(grid)
}

/// Writes `<stem>.svg` and `<stem>.csv` next to each other.
pub fn emit_heatmap(grid: &Array2<Option<f64>>, palette: Palette, title: &str, svg_path: &Path, csv_path: &Path) -> Result<()> {
    let svg = render_svg(grid, palette, title)?;
    std::fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    let file = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    write_grid_csv(grid, file)
}
