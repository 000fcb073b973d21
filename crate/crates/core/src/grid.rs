//! The 2-d visual token grid, sliding-window region enumeration, grid↔pixel
//! conversion, and positive/negative region assignment against ground truth.

use thiserror::Error;
use tokenlens_autograd::Tensor;

use crate::boxes::{BoxPx, GtAnnotation};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("window {w}×{h} does not fit a {gw}×{gh} grid")]
    WindowTooLarge {
        w: usize,
        h: usize,
        gw: usize,
        gh: usize,
    },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("window at ({top}, {left}) size {w}×{h} is out of bounds for a {gw}×{gh} grid")]
    WindowOutOfBounds {
        top: usize,
        left: usize,
        w: usize,
        h: usize,
        gw: usize,
        gh: usize,
    },
    #[error("token data has {actual} values, expected {expected} for {gh}×{gw}×{d}")]
    BadTokenData {
        actual: usize,
        expected: usize,
        gh: usize,
        gw: usize,
        d: usize,
    },
    #[error("hull {hull:?} lies outside the {w}×{h} px image")]
    HullOutOfImage { hull: [f64; 4], w: f64, h: f64 },
    #[error("no windows to assign against")]
    NoWindows,
}

/// Gh×Gw grid of d-dimensional token embeddings with a pixel pitch that maps
/// token cells onto image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    gh: usize,
    gw: usize,
    d: usize,
    /// Row-major cell-major storage: cell (r, c) occupies
    /// `[(r*gw + c)*d .. (r*gw + c + 1)*d]`.
    data: Vec<f64>,
    px_per_token: f64,
}

impl TokenGrid {
    pub fn new(
        gh: usize,
        gw: usize,
        d: usize,
        data: Vec<f64>,
        px_per_token: f64,
    ) -> Result<Self, GridError> {
        let expected = gh * gw * d;
        if data.len() != expected {
            return Err(GridError::BadTokenData {
                actual: data.len(),
                expected,
                gh,
                gw,
                d,
            });
        }
        Ok(TokenGrid {
            gh,
            gw,
            d,
            data,
            px_per_token,
        })
    }

    pub fn zeros(gh: usize, gw: usize, d: usize, px_per_token: f64) -> Self {
        TokenGrid {
            gh,
            gw,
            d,
            data: vec![0.0; gh * gw * d],
            px_per_token,
        }
    }

    pub fn height(&self) -> usize {
        self.gh
    }

    pub fn width(&self) -> usize {
        self.gw
    }

    pub fn embed_dim(&self) -> usize {
        self.d
    }

    pub fn px_per_token(&self) -> f64 {
        self.px_per_token
    }

    pub fn token_count(&self) -> usize {
        self.gh * self.gw
    }

    pub fn image_width_px(&self) -> f64 {
        self.gw as f64 * self.px_per_token
    }

    pub fn image_height_px(&self) -> f64 {
        self.gh as f64 * self.px_per_token
    }

    pub fn image_area_px(&self) -> f64 {
        self.image_width_px() * self.image_height_px()
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let base = (r * self.gw + c) * self.d;
        &self.data[base..base + self.d]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let base = (r * self.gw + c) * self.d;
        &mut self.data[base..base + self.d]
    }

    pub fn raw_data(&self) -> &[f64] {
        &self.data
    }

    /// Flat T×d view of the grid (cells in row-major order).
    pub fn flatten(&self) -> Tensor {
        Tensor::new(vec![self.gh * self.gw, self.d], self.data.clone())
            .expect("grid data is consistent")
    }

    /// Rebuild a grid from its flat T×d form; inverse of [`flatten`].
    pub fn from_flat(
        gh: usize,
        gw: usize,
        flat: &Tensor,
        px_per_token: f64,
    ) -> Result<Self, GridError> {
        let d = if flat.rank() == 2 { flat.cols() } else { 0 };
        TokenGrid::new(gh, gw, d, flat.data().to_vec(), px_per_token)
    }

    /// Pixel footprint of the cell at (r, c).
    pub fn cell_box_px(&self, r: usize, c: usize) -> BoxPx {
        let p = self.px_per_token;
        BoxPx {
            x0: c as f64 * p,
            y0: r as f64 * p,
            x1: (c + 1) as f64 * p,
            y1: (r + 1) as f64 * p,
        }
    }
}

/// One sliding-window placement on the token grid. `clamped` marks windows
/// whose offset was pulled back so the window ends at the grid edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionWindow {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub w: usize,
    pub h: usize,
    pub clamped: bool,
}

impl RegionWindow {
    pub fn token_count(&self) -> usize {
        self.w * self.h
    }

    /// Flat grid indices (r*gw + c) covered by this window, row-major.
    pub fn token_indices(&self, gw: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.w * self.h);
        for r in self.top..self.top + self.h {
            for c in self.left..self.left + self.w {
                out.push(r * gw + c);
            }
        }
        out
    }
}

/// Offsets {0, S, 2S, …} along one axis, plus one clamped offset at G−W when
/// the last stride does not land flush on the edge.
fn axis_offsets(g: usize, w: usize, s: usize) -> Vec<(usize, bool)> {
    let mut offs = Vec::new();
    let last = g - w;
    let mut o = 0;
    loop {
        offs.push((o, false));
        if o == last {
            return offs;
        }
        o += s;
        if o > last {
            offs.push((last, true));
            return offs;
        }
    }
}

/// Enumerate W×H windows with stride S over the grid, row-major, appending an
/// edge-clamped window per axis when the stride does not tile the grid.
pub fn slide_windows(
    grid: &TokenGrid,
    w: usize,
    h: usize,
    s: usize,
) -> Result<Vec<RegionWindow>, GridError> {
    if s == 0 {
        return Err(GridError::ZeroStride);
    }
    if w == 0 || h == 0 || w > grid.gw || h > grid.gh {
        return Err(GridError::WindowTooLarge {
            w,
            h,
            gw: grid.gw,
            gh: grid.gh,
        });
    }
    let rows = axis_offsets(grid.gh, h, s);
    let cols = axis_offsets(grid.gw, w, s);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &(top, rc) in &rows {
        for &(left, cc) in &cols {
            out.push(RegionWindow {
                index: out.len(),
                top,
                left,
                w,
                h,
                clamped: rc || cc,
            });
        }
    }
    Ok(out)
}

/// Per-axis window count: floor((G−W)/S) + 1, plus 1 iff (G−W) mod S ≠ 0.
pub fn axis_window_count(g: usize, w: usize, s: usize) -> usize {
    let span = g - w;
    span / s + 1 + usize::from(span % s != 0)
}

/// Copy a window's tokens into a fresh (w·h)×d tensor, row-major within the
/// window. The grid is never aliased.
pub fn extract_region(grid: &TokenGrid, win: &RegionWindow) -> Result<Tensor, GridError> {
    if win.top + win.h > grid.gh || win.left + win.w > grid.gw {
        return Err(GridError::WindowOutOfBounds {
            top: win.top,
            left: win.left,
            w: win.w,
            h: win.h,
            gw: grid.gw,
            gh: grid.gh,
        });
    }
    let mut data = Vec::with_capacity(win.w * win.h * grid.d);
    for r in win.top..win.top + win.h {
        for c in win.left..win.left + win.w {
            data.extend_from_slice(grid.cell(r, c));
        }
    }
    Ok(Tensor::new(vec![win.w * win.h, grid.d], data).expect("region data consistent"))
}

/// Pixel box of a window at the given pitch.
pub fn window_to_px(win: &RegionWindow, px_per_token: f64) -> BoxPx {
    let p = px_per_token;
    BoxPx {
        x0: win.left as f64 * p,
        y0: win.top as f64 * p,
        x1: (win.left + win.w) as f64 * p,
        y1: (win.top + win.h) as f64 * p,
    }
}

/// Positive = window whose center is closest (Euclidean, pixel space) to the
/// encompass center, ties to the lowest index. Negatives = windows with zero
/// pixel overlap with the encompass box; the positive is never listed.
pub fn assign_pos_neg(
    wins: &[RegionWindow],
    gt: &GtAnnotation,
    px_per_token: f64,
) -> Result<(usize, Vec<usize>), GridError> {
    if wins.is_empty() {
        return Err(GridError::NoWindows);
    }
    let (gx, gy) = gt.encompass.center();
    let mut pos = 0;
    let mut best = f64::INFINITY;
    for (i, win) in wins.iter().enumerate() {
        let (cx, cy) = window_to_px(win, px_per_token).center();
        let d2 = (cx - gx).powi(2) + (cy - gy).powi(2);
        if d2 < best {
            best = d2;
            pos = i;
        }
    }
    let neg = wins
        .iter()
        .enumerate()
        .filter(|(i, win)| {
            *i != pos
                && window_to_px(win, px_per_token).intersection_area(&gt.encompass) == 0.0
        })
        .map(|(i, _)| i)
        .collect();
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BoxPx;

    fn indexed_grid(gh: usize, gw: usize, d: usize) -> TokenGrid {
        // Token (r, c) stores its flat index r*gw + c in dim 0.
        let mut g = TokenGrid::zeros(gh, gw, d, 1.0);
        for r in 0..gh {
            for c in 0..gw {
                g.cell_mut(r, c)[0] = (r * gw + c) as f64;
            }
        }
        g
    }

    #[test]
    fn offsets_24_10_7_have_no_clamp() {
        let grid = TokenGrid::zeros(24, 24, 1, 1.0);
        let wins = slide_windows(&grid, 10, 10, 7).unwrap();
        assert_eq!(wins.len(), 9);
        assert!(wins.iter().all(|w| !w.clamped));
        let offs: Vec<usize> = wins.iter().take(3).map(|w| w.left).collect();
        assert_eq!(offs, vec![0, 7, 14]);
    }

    #[test]
    fn offsets_20_10_7_clamp_at_edge() {
        let grid = TokenGrid::zeros(20, 20, 1, 1.0);
        let wins = slide_windows(&grid, 10, 10, 7).unwrap();
        assert_eq!(wins.len(), 9);
        let row0: Vec<(usize, bool)> = wins
            .iter()
            .take(3)
            .map(|w| (w.left, w.clamped))
            .collect();
        assert_eq!(row0, vec![(0, false), (7, false), (10, true)]);
        // Exactly the windows at an axis-max offset are flagged.
        for w in &wins {
            assert_eq!(w.clamped, w.top == 10 || w.left == 10);
        }
    }

    #[test]
    fn window_equal_to_grid_yields_single_window() {
        let grid = TokenGrid::zeros(10, 10, 1, 1.0);
        let wins = slide_windows(&grid, 10, 10, 7).unwrap();
        assert_eq!(wins.len(), 1);
        assert_eq!(wins[0].token_count(), 100);
    }

    #[test]
    fn oversized_window_is_a_configuration_error() {
        let grid = TokenGrid::zeros(8, 8, 1, 1.0);
        assert!(matches!(
            slide_windows(&grid, 10, 10, 7),
            Err(GridError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn extract_single_cell_window() {
        let grid = indexed_grid(4, 5, 2);
        let win = RegionWindow {
            index: 0,
            top: 2,
            left: 3,
            w: 1,
            h: 1,
            clamped: false,
        };
        let t = extract_region(&grid, &win).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
        assert_eq!(t.data()[0], 13.0);
    }

    #[test]
    fn extract_full_grid_window_equals_flatten() {
        let grid = indexed_grid(3, 4, 2);
        let win = RegionWindow {
            index: 0,
            top: 0,
            left: 0,
            w: 4,
            h: 3,
            clamped: false,
        };
        let t = extract_region(&grid, &win).unwrap();
        assert_eq!(t, grid.flatten());
    }

    #[test]
    fn extract_window_row_major_order() {
        let grid = indexed_grid(6, 7, 3);
        let win = RegionWindow {
            index: 0,
            top: 0,
            left: 0,
            w: 2,
            h: 2,
            clamped: false,
        };
        let t = extract_region(&grid, &win).unwrap();
        let dim0: Vec<f64> = (0..4).map(|r| t.row(r)[0]).collect();
        assert_eq!(dim0, vec![0.0, 1.0, 7.0, 8.0]);
    }

    #[test]
    fn extract_does_not_alias_grid() {
        let grid = indexed_grid(3, 3, 1);
        let win = RegionWindow {
            index: 0,
            top: 0,
            left: 0,
            w: 1,
            h: 1,
            clamped: false,
        };
        let mut t = extract_region(&grid, &win).unwrap();
        t.data_mut()[0] = 99.0;
        assert_eq!(grid.cell(0, 0)[0], 0.0);
    }

    #[test]
    fn window_to_px_scaling() {
        let win = RegionWindow {
            index: 0,
            top: 0,
            left: 0,
            w: 10,
            h: 10,
            clamped: false,
        };
        assert_eq!(
            window_to_px(&win, 14.0),
            BoxPx::new(0.0, 0.0, 140.0, 140.0).unwrap()
        );
        let win2 = RegionWindow {
            index: 1,
            top: 7,
            left: 14,
            w: 10,
            h: 10,
            clamped: false,
        };
        assert_eq!(
            window_to_px(&win2, 1.0),
            BoxPx::new(14.0, 7.0, 24.0, 17.0).unwrap()
        );
    }

    #[test]
    fn positive_is_center_closest_window() {
        let grid = TokenGrid::zeros(24, 24, 1, 1.0);
        let wins = slide_windows(&grid, 10, 10, 7).unwrap();
        let gt = GtAnnotation::from_boxes(
            "q",
            "i",
            vec![BoxPx::new(11.0, 11.0, 13.0, 13.0).unwrap()],
            vec![],
        )
        .unwrap();
        let (pos, _) = assign_pos_neg(&wins, &gt, 1.0).unwrap();
        // Center (12, 12) → window at (top 7, left 7) has center exactly there.
        assert_eq!(wins[pos].top, 7);
        assert_eq!(wins[pos].left, 7);
    }

    #[test]
    fn whole_image_gt_leaves_no_negatives() {
        let grid = TokenGrid::zeros(24, 24, 1, 1.0);
        let wins = slide_windows(&grid, 10, 10, 7).unwrap();
        let gt = GtAnnotation::from_boxes(
            "q",
            "i",
            vec![BoxPx::new(0.0, 0.0, 24.0, 24.0).unwrap()],
            vec![],
        )
        .unwrap();
        let (_, neg) = assign_pos_neg(&wins, &gt, 1.0).unwrap();
        assert!(neg.is_empty());
    }

    #[test]
    fn disjoint_windows_are_negatives() {
        let grid = TokenGrid::zeros(24, 24, 1, 1.0);
        let wins = slide_windows(&grid, 10, 10, 7).unwrap();
        // GT tucked into the top-left corner window only.
        let gt = GtAnnotation::from_boxes(
            "q",
            "i",
            vec![BoxPx::new(1.0, 1.0, 5.0, 5.0).unwrap()],
            vec![],
        )
        .unwrap();
        let (pos, neg) = assign_pos_neg(&wins, &gt, 1.0).unwrap();
        assert_eq!(pos, 0);
        assert!(!neg.contains(&pos));
        for (i, w) in wins.iter().enumerate() {
            let disjoint = window_to_px(w, 1.0).intersection_area(&gt.encompass) == 0.0;
            assert_eq!(neg.contains(&i), disjoint && i != pos);
        }
        // Windows starting at offset ≥ 7 on both axes cannot touch (1,1,5,5).
        assert!(neg.contains(&4));
        assert!(neg.contains(&8));
    }
}
