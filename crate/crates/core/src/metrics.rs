//! Overlap and surface-distance scores for class grids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Pred,
    Gt,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("grid shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("class mask is empty on the {0:?} side")]
    EmptyMask(Side),
}

fn check_dims(pred: &Grid<u8>, gt: &Grid<u8>) -> Result<(), MetricError> {
    if pred.dims() != gt.dims() {
        return Err(MetricError::ShapeMismatch(pred.dims(), gt.dims()));
    }
    Ok(())
}

/// Dice and Jaccard of class `class`; both are 1 when neither grid holds it.
pub fn dice_jaccard(pred: &Grid<u8>, gt: &Grid<u8>, class: u8) -> Result<(f64, f64), MetricError> {
    check_dims(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * both as f64 / (p + g) as f64;
    let jaccard = both as f64 / (p + g - both) as f64;
    Ok((dice, jaccard))
}

/// Mask cells with at least one 4-neighbour outside the mask; cells on the
/// image edge always qualify.
pub fn boundary(grid: &Grid<u8>, class: u8) -> Vec<(usize, usize)> {
    let (w, h) = grid.dims();
    let inside = |x: usize, y: usize| grid.at(x, y) == class;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !inside(x, y) {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if edge
                || !inside(x - 1, y)
                || !inside(x + 1, y)
                || !inside(x, y - 1)
                || !inside(x, y + 1)
            {
                out.push((x, y));
            }
        }
    }
    out
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>) {
    for &(ax, ay) in from {
        let mut best = f64::INFINITY;
        for &(bx, by) in to {
            let dx = ax as f64 - bx as f64;
            let dy = ay as f64 - by as f64;
            best = best.min(dx * dx + dy * dy);
        }
        out.push(best.sqrt());
    }
}

/// Linear-interpolation percentile of an ascending slice, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95th-percentile Hausdorff and average surface distance in pixels, pooled
/// over the nearest-boundary distances taken in both directions.
pub fn surface_distances(
    pred: &Grid<u8>,
    gt: &Grid<u8>,
    class: u8,
) -> Result<(f64, f64), MetricError> {
    check_dims(pred, gt)?;
    let bp = boundary(pred, class);
    if bp.is_empty() {
        return Err(MetricError::EmptyMask(Side::Pred));
    }
    let bg = boundary(gt, class);
    if bg.is_empty() {
        return Err(MetricError::EmptyMask(Side::Gt));
    }
    let mut d = Vec::with_capacity(bp.len() + bg.len());
    directed(&bp, &bg, &mut d);
    directed(&bg, &bp, &mut d);
    d.sort_by(f64::total_cmp);
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    Ok((percentile(&d, 0.95), asd))
}

/// Scores for one class; distances are `None` when either mask is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Means over whichever entries are defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Foreground classes present in the prediction or the ground truth.
    pub per_class: BTreeMap<u8, ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn macro_of<'a>(entries: impl Iterator<Item = &'a ClassMetrics>) -> MacroMetrics {
    let mut m: [Mean; 4] = Default::default();
    for e in entries {
        m[0].push(Some(e.dice));
        m[1].push(Some(e.jaccard));
        m[2].push(e.hd95);
        m[3].push(e.asd);
    }
    MacroMetrics {
        dice: m[0].get(),
        jaccard: m[1].get(),
        hd95: m[2].get(),
        asd: m[3].get(),
    }
}

/// Scores every foreground class `1..num_classes` that appears in either grid.
pub fn evaluate(
    pred: &Grid<u8>,
    gt: &Grid<u8>,
    num_classes: usize,
) -> Result<MetricReport, MetricError> {
    check_dims(pred, gt)?;
    let mut per_class = BTreeMap::new();
    for c in 1..num_classes as u8 {
        let present = pred.data().iter().chain(gt.data()).any(|&v| v == c);
        if !present {
            continue;
        }
        let (dice, jaccard) = dice_jaccard(pred, gt, c)?;
        let (hd95, asd) = match surface_distances(pred, gt, c) {
            Ok((h, a)) => (Some(h), Some(a)),
            Err(MetricError::EmptyMask(_)) => (None, None),
            Err(e) => return Err(e),
        };
        per_class.insert(
            c,
            ClassMetrics {
                dice,
                jaccard,
                hd95,
                asd,
            },
        );
    }
    let macro_avg = macro_of(per_class.values());
    Ok(MetricReport {
        per_class,
        macro_avg,
    })
}

/// Dataset summary: each class is averaged over the samples where it is
/// defined, then the class means are averaged.
pub fn aggregate(reports: &[MetricReport]) -> MacroMetrics {
    let mut classes: BTreeMap<u8, Vec<ClassMetrics>> = BTreeMap::new();
    for r in reports {
        for (&c, m) in &r.per_class {
            classes.entry(c).or_default().push(*m);
        }
    }
    let class_means: Vec<MacroMetrics> = classes.values().map(|v| macro_of(v.iter())).collect();
    let mut m: [Mean; 4] = Default::default();
    for c in &class_means {
        m[0].push(c.dice);
        m[1].push(c.jaccard);
        m[2].push(c.hd95);
        m[3].push(c.asd);
    }
    MacroMetrics {
        dice: m[0].get(),
        jaccard: m[1].get(),
        hd95: m[2].get(),
        asd: m[3].get(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize, cells: &[(usize, usize)]) -> Grid<u8> {
        let mut g = Grid::filled(w, h, 0);
        for &(x, y) in cells {
            g.set(x, y, 1);
        }
        g
    }

    #[test]
    fn identical_masks() {
        let g = grid(8, 8, &[(2, 2), (3, 2), (2, 3), (3, 3)]);
        assert_eq!(dice_jaccard(&g, &g, 1).unwrap(), (1.0, 1.0));
        assert_eq!(surface_distances(&g, &g, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn disjoint_and_half_overlap() {
        let a = grid(8, 8, &[(0, 0), (1, 0), (2, 0), (3, 0)]);
        let b = grid(8, 8, &[(0, 5), (1, 5), (2, 5), (3, 5)]);
        assert_eq!(dice_jaccard(&a, &b, 1).unwrap(), (0.0, 0.0));
        let c = grid(8, 8, &[(2, 0), (3, 0), (4, 0), (5, 0)]);
        let (d, j) = dice_jaccard(&a, &c, 1).unwrap();
        assert_eq!(d, 0.5);
        assert!((j - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_scores_one() {
        let z = Grid::filled(4, 4, 0u8);
        assert_eq!(dice_jaccard(&z, &z, 2).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn three_four_five() {
        let a = grid(6, 6, &[(0, 0)]);
        let b = grid(6, 6, &[(3, 4)]);
        assert_eq!(surface_distances(&a, &b, 1).unwrap(), (5.0, 5.0));
    }

    #[test]
    fn empty_side_is_reported() {
        let a = grid(6, 6, &[(0, 0)]);
        let z = Grid::filled(6, 6, 0u8);
        assert_eq!(
            surface_distances(&z, &a, 1),
            Err(MetricError::EmptyMask(Side::Pred))
        );
        assert_eq!(
            surface_distances(&a, &z, 1),
            Err(MetricError::EmptyMask(Side::Gt))
        );
    }

    #[test]
    fn shape_mismatch() {
        let a = Grid::filled(4, 4, 0u8);
        let b = Grid::filled(4, 5, 0u8);
        assert!(matches!(
            dice_jaccard(&a, &b, 1),
            Err(MetricError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn interior_cells_are_not_boundary() {
        let cells: Vec<_> = (1..4).flat_map(|y| (1..4).map(move |x| (x, y))).collect();
        let g = grid(5, 5, &cells);
        let b = boundary(&g, 1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn evaluate_skips_absent_classes() {
        let a = grid(6, 6, &[(1, 1)]);
        let r = evaluate(&a, &a, 3).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.macro_avg.dice, Some(1.0));
        let z = Grid::filled(6, 6, 0u8);
        let r = evaluate(&z, &a, 3).unwrap();
        assert_eq!(r.per_class[&1].dice, 0.0);
        assert_eq!(r.macro_avg.hd95, None);
    }
}
