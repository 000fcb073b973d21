//! Region ranking by instruction similarity, adaptive selection until the
//! enclosing region reaches the coverage ratio, and token-grid cropping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignError, AlignmentModel};
use crate::boxes::{union_box, BoxPx};
use crate::grid::{extract_region, window_to_px, GridError, RegionWindow, TokenGrid};
use crate::text::InstructionEmbedding;
use tokenlens_autograd::Tape;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("no ranked windows to select from")]
    EmptyRanking,
    #[error("coverage ratio must be in (0, 1], got {0}")]
    BadRatio(f64),
}

/// How the covered area of a selected set is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// Area of the axis-aligned hull of the selected windows (a single crop).
    #[default]
    Hull,
    /// Exact area of the union of the selected windows' boxes.
    UnionArea,
}

/// Outcome of adaptive selection. `ranked` is every window ordered by
/// descending similarity; `selected` is the stopping prefix of that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ranked: Vec<(usize, f64)>,
    pub selected: Vec<usize>,
    pub hull: BoxPx,
    pub coverage: f64,
}

impl SelectionResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("selection result serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Score every window against the instruction and sort descending, ties
/// broken by ascending window index. The instruction is encoded once.
pub fn rank_regions(
    model: &AlignmentModel,
    grid: &TokenGrid,
    wins: &[RegionWindow],
    instr: &InstructionEmbedding,
) -> Result<Vec<(usize, f64)>, SelectError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let text = tape.leaf(instr.tokens.clone());
    let et = bound.encode_text(&mut tape, text)?;
    let mut scored = Vec::with_capacity(wins.len());
    for win in wins {
        let tokens = extract_region(grid, win)?;
        let region = tape.leaf(tokens);
        let ev = bound.encode_region(&mut tape, region)?;
        let sim = bound.similarity(&mut tape, ev, et)?;
        scored.push((win.index, tape.value(sim).item()));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("similarities are finite")
            .then(a.0.cmp(&b.0))
    });
    Ok(scored)
}

/// Exact union area of a set of boxes via coordinate compression.
pub fn union_area(boxes: &[BoxPx]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x0, b.x1]).collect();
    let mut ys: Vec<f64> = boxes.iter().flat_map(|b| [b.y0, b.y1]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.dedup();
    let mut area = 0.0;
    for xi in 0..xs.len() - 1 {
        for yi in 0..ys.len() - 1 {
            let (cx, cy) = ((xs[xi] + xs[xi + 1]) / 2.0, (ys[yi] + ys[yi + 1]) / 2.0);
            if boxes
                .iter()
                .any(|b| b.x0 <= cx && cx <= b.x1 && b.y0 <= cy && cy <= b.y1)
            {
                area += (xs[xi + 1] - xs[xi]) * (ys[yi + 1] - ys[yi]);
            }
        }
    }
    area
}

/// Walk the ranking, accumulating windows until the covered area reaches
/// `r · image_area_px`; select everything if the threshold is never met.
pub fn adaptive_select(
    ranked: &[(usize, f64)],
    wins: &[RegionWindow],
    px_per_token: f64,
    image_area_px: f64,
    r: f64,
    mode: CoverageMode,
) -> Result<SelectionResult, SelectError> {
    if ranked.is_empty() {
        return Err(SelectError::EmptyRanking);
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(SelectError::BadRatio(r));
    }
    let target = r * image_area_px;
    let mut selected = Vec::new();
    let mut boxes = Vec::new();
    for &(idx, _) in ranked {
        selected.push(idx);
        boxes.push(window_to_px(&wins[idx], px_per_token));
        let covered = match mode {
            CoverageMode::Hull => union_box(&boxes).expect("nonempty").area(),
            CoverageMode::UnionArea => union_area(&boxes),
        };
        if covered >= target {
            break;
        }
    }
    let hull = union_box(&boxes).expect("nonempty");
    let covered = match mode {
        CoverageMode::Hull => hull.area(),
        CoverageMode::UnionArea => union_area(&boxes),
    };
    Ok(SelectionResult {
        ranked: ranked.to_vec(),
        selected,
        hull,
        coverage: covered / image_area_px,
    })
}

/// Inclusive-exclusive cell rectangle: rows `r0..r1`, cols `c0..c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl CellRect {
    pub fn height(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0
    }

    pub fn cell_count(&self) -> usize {
        self.height() * self.width()
    }

    /// Flat indices (r·gw + c) of the rectangle's cells.
    pub fn flat_indices(&self, gw: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cell_count());
        for r in self.r0..self.r1 {
            for c in self.c0..self.c1 {
                out.push(r * gw + c);
            }
        }
        out
    }

    /// Pixel origin of the rectangle at the given pitch.
    pub fn origin_px(&self, px_per_token: f64) -> (f64, f64) {
        (self.c0 as f64 * px_per_token, self.r0 as f64 * px_per_token)
    }
}

/// Cells whose pixel footprint overlaps the hull with positive area.
pub fn crop_cells(grid: &TokenGrid, hull: &BoxPx) -> Result<CellRect, GridError> {
    let p = grid.px_per_token();
    let (iw, ih) = (grid.image_width_px(), grid.image_height_px());
    if hull.x0 < 0.0 || hull.y0 < 0.0 || hull.x1 > iw || hull.y1 > ih {
        return Err(GridError::HullOutOfImage {
            hull: [hull.x0, hull.y0, hull.x1, hull.y1],
            w: iw,
            h: ih,
        });
    }
    // floor/ceil map the hull to the cells it strictly overlaps; an edge
    // exactly on a cell boundary does not pull in the neighbour.
    let c0 = (hull.x0 / p).floor() as usize;
    let r0 = (hull.y0 / p).floor() as usize;
    let c1 = ((hull.x1 / p).ceil() as usize).min(grid.width());
    let r1 = ((hull.y1 / p).ceil() as usize).min(grid.height());
    debug_assert!(c0 < c1 && r0 < r1, "hull maps to an empty cell range");
    Ok(CellRect { r0, c0, r1, c1 })
}

/// Copy the sub-grid under the hull. The crop keeps the pixel pitch; its
/// origin within the source image is reported through the returned rect.
pub fn crop_grid(grid: &TokenGrid, hull: &BoxPx) -> Result<(TokenGrid, CellRect), GridError> {
    let rect = crop_cells(grid, hull)?;
    let d = grid.embed_dim();
    let mut data = Vec::with_capacity(rect.cell_count() * d);
    for r in rect.r0..rect.r1 {
        for c in rect.c0..rect.c1 {
            data.extend_from_slice(grid.cell(r, c));
        }
    }
    let crop = TokenGrid::new(rect.height(), rect.width(), d, data, grid.px_per_token())?;
    Ok((crop, rect))
}
