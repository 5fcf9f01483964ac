//! Rectified-view reprojection, left-right consistency, and positive pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Shifts `(u, v)` left by `disparity` along its row. `None` when the
/// result falls left of the image.
pub fn reproject(coord: (f64, f64), disparity: f64) -> Option<(f64, f64)> {
    let u = coord.0 - disparity;
    (u >= 0.0).then_some((u, coord.1))
}

/// Per-pixel left-right disparity disagreement.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectionField {
    pub r: Grid<f64>,
    pub valid: Grid<bool>,
    /// Set when validity came from the left-only uniqueness fallback.
    pub left_only: bool,
}

/// `R[u,v] = |dL[u,v] - dR[u - round(dL[u,v]), v]|` where the lookup is in bounds.
pub fn reprojection_error(disparity_left: &Grid<f64>, disparity_right: &Grid<f64>) -> Result<ReprojectionField> {
    if !disparity_left.same_dims(disparity_right) {
        return Err(Error::shape(
            format!("{:?}", disparity_left.dims()),
            format!("{:?}", disparity_right.dims()),
        ));
    }
    let (w, h) = disparity_left.dims();
    let mut r = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            let d = *disparity_left.get(u, v);
            if !d.is_finite() {
                continue;
            }
            let x = u as f64 - d.round();
            if x < 0.0 || x >= w as f64 {
                continue;
            }
            let dr = *disparity_right.get(x as usize, v);
            if !dr.is_finite() {
                continue;
            }
            r.set(u, v, (d - dr).abs());
            valid.set(u, v, true);
        }
    }
    Ok(ReprojectionField {
        r,
        valid,
        left_only: false,
    })
}

/// Fallback when no right disparity exists: a pixel is invalid if another
/// pixel in its row lands on the same right column with a larger disparity,
/// or if its match leaves the image. Valid pixels get `R = 0`.
pub fn uniqueness_check(disparity_left: &Grid<f64>, valid_gt: Option<&Grid<bool>>) -> ReprojectionField {
    let (w, h) = disparity_left.dims();
    let mut r = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for v in 0..h {
        let mut best: Vec<Option<f64>> = vec![None; w];
        let target = |u: usize| -> Option<usize> {
            if valid_gt.map(|m| !*m.get(u, v)).unwrap_or(false) {
                return None;
            }
            let d = *disparity_left.get(u, v);
            let x = u as f64 - d.round();
            (d.is_finite() && x >= 0.0 && x < w as f64).then_some(x as usize)
        };
        for u in 0..w {
            if let Some(x) = target(u) {
                let d = *disparity_left.get(u, v);
                best[x] = Some(best[x].map_or(d, |b: f64| b.max(d)));
            }
        }
        for u in 0..w {
            if let Some(x) = target(u) {
                let d = *disparity_left.get(u, v);
                valid.set(u, v, best[x] == Some(d));
            }
        }
        for u in 0..w {
            if !*valid.get(u, v) {
                r.set(u, v, f64::INFINITY);
            }
        }
    }
    ReprojectionField {
        r,
        valid,
        left_only: true,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchMask {
    pub m: Grid<bool>,
    pub delta: f64,
}

pub const DEFAULT_DELTA: f64 = 3.0;

/// `M = valid && R < delta` (strict).
pub fn matching_mask(field: &ReprojectionField, delta: f64) -> Result<MatchMask> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    let (w, h) = field.r.dims();
    let m = Grid::from_fn(w, h, |u, v| *field.valid.get(u, v) && *field.r.get(u, v) < delta);
    Ok(MatchMask { m, delta })
}

/// How a full-resolution mask gates a stride cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellRule {
    /// The cell's center pixel decides.
    #[default]
    Center,
    /// Every pixel in the cell must be masked in.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositivePair {
    pub query: (usize, usize),
    pub key: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositivePairSet {
    pub pairs: Vec<PositivePair>,
    pub stride: usize,
}

impl PositivePairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairOptions {
    pub cell_rule: CellRule,
    /// Pairs whose rounded key offset differs from `d / stride` by more
    /// than this many cells are dropped.
    pub max_offset_error: f64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            cell_rule: CellRule::Center,
            max_offset_error: 0.5,
        }
    }
}

#[inline]
pub fn cell_center(index: usize, stride: usize) -> usize {
    index * stride + stride / 2
}

pub fn collect_positive_pairs(
    disparity_left: &Grid<f64>,
    mask: &MatchMask,
    stride: usize,
) -> Result<PositivePairSet> {
    collect_positive_pairs_with(disparity_left, mask, stride, &PairOptions::default())
}

pub fn collect_positive_pairs_with(
    disparity_left: &Grid<f64>,
    mask: &MatchMask,
    stride: usize,
    options: &PairOptions,
) -> Result<PositivePairSet> {
    let (w, h) = disparity_left.dims();
    if stride == 0 || w % stride != 0 || h % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} must divide image size {w}x{h}"
        )));
    }
    if !mask.m.same_dims(disparity_left) {
        return Err(Error::shape(format!("{:?}", disparity_left.dims()), format!("{:?}", mask.m.dims())));
    }
    let (fw, fh) = (w / stride, h / stride);
    let mut pairs = Vec::new();
    for qv in 0..fh {
        for qu in 0..fw {
            let (cu, cv) = (cell_center(qu, stride), cell_center(qv, stride));
            let masked_in = match options.cell_rule {
                CellRule::Center => *mask.m.get(cu, cv),
                CellRule::All => (0..stride)
                    .all(|dv| (0..stride).all(|du| *mask.m.get(qu * stride + du, qv * stride + dv))),
            };
            if !masked_in {
                continue;
            }
            let offset = *disparity_left.get(cu, cv) / stride as f64;
            let rounded = offset.round();
            if (rounded - offset).abs() > options.max_offset_error {
                continue;
            }
            let ku = qu as f64 - rounded;
            if ku < 0.0 || ku >= fw as f64 {
                continue;
            }
            pairs.push(PositivePair {
                query: (qu, qv),
                key: (ku as usize, qv),
            });
        }
    }
    Ok(PositivePairSet { pairs, stride })
}

/// Mask from a sample's ground truth: two-view check when the right
/// disparity exists, uniqueness fallback otherwise.
pub fn mask_for(
    disparity_left: &Grid<f64>,
    disparity_right: Option<&Grid<f64>>,
    delta: f64,
) -> Result<(MatchMask, bool)> {
    let field = match disparity_right {
        Some(dr) => reprojection_error(disparity_left, dr)?,
        None => uniqueness_check(disparity_left, None),
    };
    Ok((matching_mask(&field, delta)?, field.left_only))
}
