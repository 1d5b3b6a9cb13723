// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparisons, generation-based evaluation, and file emission.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::probe_engine::{SelectionMetric, SweepResult};

mod compare;
mod generation;
mod heatmap;

pub use compare::{average_ranks, compare_runs, spearman, CellDelta, RunComparison, MAX_PEAK_SHIFT, MIN_STRUCTURE_RHO};
pub use generation::{generation_eval, GenerationEval, GenerationRow, LabeledReview, ReviewClassifier, VariantEval};
pub use heatmap::{color, emit_heatmap, read_grid_csv, render_svg, write_grid_csv, GridRow, Palette};

/// One point of a per-layer curve: best value over heads at `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurveRow {
    pub run: String,
    pub construct: String,
    pub tap: String,
    pub layer: usize,
    pub value: Option<f64>,
}

/// Writes the per-layer best `metric` of every `(run name, sweep)` pair.
pub fn write_layer_curves<W: Write>(runs: &[(&str, &SweepResult)], metric: SelectionMetric, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (name, sweep) in runs {
        for (layer, value) in sweep.layer_curve(metric).into_iter().enumerate() {
            w.serialize(LayerCurveRow {
                run: name.to_string(),
                construct: sweep.target.clone(),
                tap: sweep.tap.as_str().to_string(),
                layer,
                value,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per line.
pub fn write_comparisons<W: Write>(comparisons: &[RunComparison], mut out: W) -> Result<()> {
    for c in comparisons {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_comparisons(text: &str) -> Result<Vec<RunComparison>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
