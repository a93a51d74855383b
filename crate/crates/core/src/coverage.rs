//! Paint deposition on a discretized wall and the coverage statistics built
//! on top of it.
//!
//! The wall is a row-major grid of square cells. Row 0 is the bottom of the
//! wall; exports flip this so the top row comes first, as an image would.
//! A cell belongs to a painted rectangle when its *center* lies inside the
//! half-open rectangle, so two strokes that exactly abut neither leave a gap
//! nor double-count a column.

use std::fmt;
use std::io::{self, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoverageError {
    #[error("stroke width must be positive, got {0} mm")]
    Width(f64),
    #[error("stroke spacing must be non-negative, got {0} mm")]
    Spacing(f64),
    #[error("overlap ratio must lie in [0, 1], got {0}")]
    Ratio(f64),
    #[error("stroke time must be positive, got {0} s")]
    StrokeTime(f64),
    #[error("{what} ({value} mm) is not a positive multiple of the {cell} mm cell size")]
    GridDims { what: &'static str, value: f64, cell: f64 },
    #[error("planned and realized center lists differ in length ({planned} vs {realized})")]
    CenterCount { planned: usize, realized: usize },
}

/// Width, center-to-center spacing and nominal duration of a vertical stroke.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeSpec {
    pub width: f64,
    pub spacing: f64,
    pub stroke_time: f64,
}

impl StrokeSpec {
    pub fn validate(&self) -> Result<(), CoverageError> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(CoverageError::Width(self.width));
        }
        if !(self.spacing >= 0.0 && self.spacing.is_finite()) {
            return Err(CoverageError::Spacing(self.spacing));
        }
        if !(self.stroke_time > 0.0 && self.stroke_time.is_finite()) {
            return Err(CoverageError::StrokeTime(self.stroke_time));
        }
        Ok(())
    }

    pub fn overlap(&self) -> Result<Overlap, CoverageError> {
        overlap_ratio(self.width, self.spacing)
    }
}

/// Overlap between neighbouring strokes. `gapped` is set when the spacing
/// exceeds the width, in which case `ratio` is negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub ratio: f64,
    pub gapped: bool,
}

/// (width − spacing) / width.
pub fn overlap_ratio(width: f64, spacing: f64) -> Result<Overlap, CoverageError> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(CoverageError::Width(width));
    }
    if !(spacing >= 0.0 && spacing.is_finite()) {
        return Err(CoverageError::Spacing(spacing));
    }
    Ok(Overlap {
        ratio: ((width - spacing) / width).min(1.0),
        gapped: spacing > width,
    })
}

/// Spacing that yields `ratio` for strokes of `width`.
pub fn spacing_for_overlap(width: f64, ratio: f64) -> Result<f64, CoverageError> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(CoverageError::Width(width));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CoverageError::Ratio(ratio));
    }
    Ok(width * (1.0 - ratio))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallGrid {
    width: f64,
    height: f64,
    cell_size: f64,
    cols: usize,
    rows: usize,
    coats: Vec<u32>,
    painted: usize,
}

fn whole_cells(what: &'static str, value: f64, cell: f64) -> Result<usize, CoverageError> {
    let err = CoverageError::GridDims { what, value, cell };
    if !(value > 0.0 && cell > 0.0 && value.is_finite() && cell.is_finite()) {
        return Err(err);
    }
    let n = (value / cell).round();
    if n < 1.0 || (n * cell - value).abs() > 1e-9 * value.max(1.0) {
        return Err(err);
    }
    Ok(n as usize)
}

impl WallGrid {
    pub fn new(width: f64, height: f64, cell_size: f64) -> Result<Self, CoverageError> {
        let cols = whole_cells("wall width", width, cell_size)?;
        let rows = whole_cells("wall height", height, cell_size)?;
        Ok(Self {
            width,
            height,
            cell_size,
            cols,
            rows,
            coats: vec![0; cols * rows],
            painted: 0,
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Coat count of the cell at column `col`, row `row` (row 0 at the bottom).
    pub fn coats_at(&self, col: usize, row: usize) -> u32 {
        self.coats[row * self.cols + col]
    }

    pub fn coats(&self) -> &[u32] {
        &self.coats
    }

    pub fn painted_cells(&self) -> usize {
        self.painted
    }

    pub fn total_coats(&self) -> u64 {
        self.coats.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn painted_fraction(&self) -> f64 {
        self.painted as f64 / self.coats.len() as f64
    }

    /// Indices of cells whose centers fall in `[lo, hi)` along an axis.
    fn center_range(&self, lo: f64, hi: f64, n: usize) -> Range<usize> {
        let cell = self.cell_size;
        let inside_lo = |i: usize| (i as f64 + 0.5) * cell >= lo;
        let below_hi = |i: usize| (i as f64 + 0.5) * cell < hi;
        if !(lo < hi) {
            return 0..0;
        }
        let guess = |v: f64| ((v / cell - 0.5).ceil().max(0.0) as usize).min(n);
        let mut start = guess(lo);
        while start > 0 && inside_lo(start - 1) {
            start -= 1;
        }
        while start < n && !inside_lo(start) {
            start += 1;
        }
        let mut end = guess(hi).max(start);
        while end > start && !below_hi(end - 1) {
            end -= 1;
        }
        while end < n && below_hi(end) {
            end += 1;
        }
        start..end
    }

    /// Cells covered by the clipped rectangle `[x_lo, x_hi) × [y_lo, y_hi)`.
    pub fn footprint(&self, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> (Range<usize>, Range<usize>) {
        (
            self.center_range(x_lo, x_hi, self.cols),
            self.center_range(y_lo, y_hi, self.rows),
        )
    }

    /// Adds one coat to every cell of the rectangle. Returns the number of
    /// cells coated.
    pub fn paint_rect(&mut self, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> usize {
        let (cols, rows) = self.footprint(x_lo, x_hi, y_lo, y_hi);
        let mut count = 0;
        for row in rows {
            let base = row * self.cols;
            for cell in &mut self.coats[base + cols.start..base + cols.end] {
                if *cell == 0 {
                    self.painted += 1;
                }
                *cell = cell.saturating_add(1);
                count += 1;
            }
        }
        count
    }

    /// Deposits one vertical stroke segment centered on `x_center`.
    pub fn apply_stroke(&mut self, x_center: f64, y_from: f64, y_to: f64, width: f64) -> usize {
        let half = width / 2.0;
        self.paint_rect(x_center - half, x_center + half, y_from, y_to)
    }

    /// Rows whose every cell is unpainted, merged into maximal bands.
    pub fn unpainted_bands(&self) -> Vec<Band> {
        let mut bands = Vec::new();
        let mut open: Option<usize> = None;
        for row in 0..=self.rows {
            let empty = row < self.rows
                && self.coats[row * self.cols..(row + 1) * self.cols]
                    .iter()
                    .all(|&c| c == 0);
            match (empty, open) {
                (true, None) => open = Some(row),
                (false, Some(start)) => {
                    bands.push(Band {
                        y_from: start as f64 * self.cell_size,
                        y_to: row as f64 * self.cell_size,
                    });
                    open = None;
                }
                _ => {}
            }
        }
        bands
    }

    /// Plain PGM (P2) image, top row first, coat counts clamped to 255.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.cols, self.rows)?;
        writeln!(out, "255")?;
        for row in (0..self.rows).rev() {
            let line = self.coats[row * self.cols..(row + 1) * self.cols]
                .iter()
                .map(|&c| c.min(255).to_string())
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// One CSV line of coat counts per grid row, top row first.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for row in (0..self.rows).rev() {
            let line = self.coats[row * self.cols..(row + 1) * self.cols]
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Horizontal band `[y_from, y_to)` in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub y_from: f64,
    pub y_to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub painted_fraction: f64,
    pub mean_coats: f64,
    pub max_coats: u32,
    pub unpainted_bands: Vec<Band>,
    /// Population standard deviation of realized − planned stroke centers, mm.
    pub deviation: f64,
}

pub fn coverage_report(
    grid: &WallGrid,
    planned_centers: &[f64],
    realized_centers: &[f64],
) -> Result<CoverageReport, CoverageError> {
    if planned_centers.len() != realized_centers.len() {
        return Err(CoverageError::CenterCount {
            planned: planned_centers.len(),
            realized: realized_centers.len(),
        });
    }
    let n = planned_centers.len();
    let deviation = if n == 0 {
        0.0
    } else {
        let diffs: Vec<f64> = realized_centers
            .iter()
            .zip(planned_centers)
            .map(|(r, p)| r - p)
            .collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    Ok(CoverageReport {
        painted_fraction: grid.painted_fraction(),
        mean_coats: grid.total_coats() as f64 / grid.coats().len() as f64,
        max_coats: grid.coats().iter().copied().max().unwrap_or(0),
        unpainted_bands: grid.unpainted_bands(),
        deviation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quality {
    Medium,
    ModerateHigh,
    High,
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quality::Medium => "Medium",
            Quality::ModerateHigh => "Moderate-High",
            Quality::High => "High",
        })
    }
}

pub const MODERATE_HIGH_FROM: f64 = 0.30;
pub const HIGH_FROM: f64 = 0.45;
// Ratios computed from a spacing that was itself derived from a ratio can
// land one ulp under the threshold they were meant to hit.
const THRESHOLD_EPS: f64 = 1e-9;

/// Paint quality band for an overlap ratio. Stroke time is validated but
/// does not move the band.
pub fn classify_quality(ratio: f64, stroke_time: f64) -> Result<Quality, CoverageError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CoverageError::Ratio(ratio));
    }
    if !(stroke_time > 0.0 && stroke_time.is_finite()) {
        return Err(CoverageError::StrokeTime(stroke_time));
    }
    Ok(if ratio + THRESHOLD_EPS >= HIGH_FROM {
        Quality::High
    } else if ratio + THRESHOLD_EPS >= MODERATE_HIGH_FROM {
        Quality::ModerateHigh
    } else {
        Quality::Medium
    })
}
