//! Overlap, contour distance and folding statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::image_io::Mask2D;
use crate::warp::{jacobian_det, DeformationField};

/// Which pixels count as the region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Label(u8),
    /// Any nonzero label.
    Foreground,
}

impl Region {
    fn contains(self, v: u8) -> bool {
        match self {
            Region::Label(l) => v == l,
            Region::Foreground => v != 0,
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Label(l) => write!(f, "label {l}"),
            Region::Foreground => f.write_str("foreground"),
        }
    }
}

fn same_extents(a: &Mask2D, b: &Mask2D, op: &'static str) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(contract(
            op,
            format!("mask extents {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty regions agree perfectly.
pub fn dice(a: &Mask2D, b: &Mask2D, region: Region) -> Result<f64> {
    same_extents(a, b, "dice")?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (region.contains(x), region.contains(y));
        na += ia as u64;
        nb += ib as u64;
        both += (ia && ib) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Region pixels with at least one 4-neighbor outside the region (the
/// image border counts as outside).
pub fn contour(m: &Mask2D, region: Region) -> Vec<(usize, usize)> {
    let (w, h) = (m.width(), m.height());
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && region.contains(m.get(x as usize, y as usize))
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(x, y) && !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1)) {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    from.iter()
        .map(|&(x, y)| {
            to.iter()
                .map(|&(u, v)| {
                    let (dx, dy) = (x as f64 - u as f64, y as f64 - v as f64);
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between region contours, in pixels.
pub fn hausdorff(a: &Mask2D, b: &Mask2D, region: Region) -> Result<f64> {
    same_extents(a, b, "hausdorff")?;
    let (ca, cb) = (contour(a, region), contour(b, region));
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "Hausdorff distance needs both masks to contain {region}"
        )));
    }
    Ok(directed(&ca, &cb).max(directed(&cb, &ca)))
}

/// Fraction of Dice scores strictly above `d`.
pub fn reliability(dices: &[f64], d: f64) -> Result<f64> {
    if dices.is_empty() {
        return Err(contract("reliability", "empty list of scores"));
    }
    Ok(dices.iter().filter(|&&x| x > d).count() as f64 / dices.len() as f64)
}

/// Pixels whose Jacobian determinant is zero or negative.
pub fn count_nonpositive_jacobian(d: &DeformationField) -> Result<usize> {
    Ok(jacobian_det(d)?.iter().filter(|&&j| j <= 0.0).count())
}

/// Registration quality of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Dice of the selected label (or all foreground).
    pub dice: f64,
    pub hausdorff_px: f64,
    pub nonpositive_jacobian: usize,
    pub dice_per_label: BTreeMap<u8, f64>,
    pub hausdorff_per_label: BTreeMap<u8, f64>,
    pub jacobian_min: f64,
    pub jacobian_p01: f64,
    pub jacobian_median: f64,
}

/// Compares the warped moving mask with the fixed mask.
pub fn evaluate(warped_moving: &Mask2D, fixed: &Mask2D, field: &DeformationField, region: Region) -> Result<EvalReport> {
    same_extents(warped_moving, fixed, "evaluate")?;
    let mut dice_per_label = BTreeMap::new();
    let mut hausdorff_per_label = BTreeMap::new();
    let labels: std::collections::BTreeSet<u8> = fixed.label_set().into_iter().chain(warped_moving.label_set()).collect();
    for l in labels.into_iter().filter(|&l| l != 0) {
        dice_per_label.insert(l, dice(warped_moving, fixed, Region::Label(l))?);
        if let Ok(hd) = hausdorff(warped_moving, fixed, Region::Label(l)) {
            hausdorff_per_label.insert(l, hd);
        }
    }
    let mut det = jacobian_det(field)?;
    det.sort_by(f64::total_cmp);
    let pick = |q: f64| det[((det.len() - 1) as f64 * q).round() as usize];
    Ok(EvalReport {
        dice: dice(warped_moving, fixed, region)?,
        hausdorff_px: hausdorff(warped_moving, fixed, region)?,
        nonpositive_jacobian: det.iter().filter(|&&j| j <= 0.0).count(),
        dice_per_label,
        hausdorff_per_label,
        jacobian_min: det[0],
        jacobian_p01: pick(0.01),
        jacobian_median: pick(0.5),
    })
}
