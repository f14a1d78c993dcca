//! Gaze traces: velocity-threshold fixation filtering and fixation-density
//! heatmaps.
//!
//! A point is a fixation when every available neighbour velocity lies strictly
//! below the threshold. A velocity equal to the threshold counts as fast, a
//! point with one fast and one slow neighbour is a saccade, and the two trace
//! endpoints are judged on their single neighbour.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

pub const CSV_HEADER: &str = "t_ms,x,y";

/// Default velocity threshold in pixels per second.
pub const DEFAULT_V_TH: f64 = 300.0;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("trace has {0} points; at least 2 are required")]
    TraceTooShort(usize),
    #[error("timestamps must strictly increase (point {index})")]
    NonMonotoneTimestamps { index: usize },
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("empty gaze file")]
    EmptyFile,
    #[error("no fixations to render")]
    EmptyFixationSet,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazePoint {
    pub x: f64,
    pub y: f64,
    /// Milliseconds since the start of the recording.
    pub t_ms: f64,
}

impl GazePoint {
    pub fn new(x: f64, y: f64, t_ms: f64) -> Self {
        Self { x, y, t_ms }
    }

    fn distance(&self, other: &GazePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GazeLabel {
    Fixation,
    Saccade,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeTrace {
    points: Vec<GazePoint>,
    labels: Option<Vec<GazeLabel>>,
    dims: (usize, usize),
}

impl GazeTrace {
    /// Builds a trace over a `W×H` image. Coordinates are clamped into
    /// `[0, W) × [0, H)`; timestamps must strictly increase.
    pub fn new(points: Vec<GazePoint>, dims: (usize, usize)) -> Result<Self, GazeError> {
        if dims.0 == 0 || dims.1 == 0 {
            return Err(GazeError::InvalidParameter(format!("image dims {dims:?}")));
        }
        check_monotone(&points)?;
        let (xmax, ymax) = ((dims.0 as f64).next_down(), (dims.1 as f64).next_down());
        let points = points
            .into_iter()
            .map(|p| GazePoint::new(p.x.clamp(0.0, xmax), p.y.clamp(0.0, ymax), p.t_ms))
            .collect();
        Ok(Self {
            points,
            labels: None,
            dims,
        })
    }

    pub fn points(&self) -> &[GazePoint] {
        &self.points
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-point labels, present once [`classify_points`] has run.
    pub fn labels(&self) -> Option<&[GazeLabel]> {
        self.labels.as_deref()
    }

    pub fn fixations(&self) -> Vec<GazePoint> {
        self.with_label(GazeLabel::Fixation)
    }

    pub fn saccades(&self) -> Vec<GazePoint> {
        self.with_label(GazeLabel::Saccade)
    }

    fn with_label(&self, label: GazeLabel) -> Vec<GazePoint> {
        match &self.labels {
            Some(labels) => self
                .points
                .iter()
                .zip(labels)
                .filter(|(_, l)| **l == label)
                .map(|(p, _)| *p)
                .collect(),
            None => Vec::new(),
        }
    }
}

fn check_monotone(points: &[GazePoint]) -> Result<(), GazeError> {
    match points.windows(2).position(|w| !(w[1].t_ms > w[0].t_ms)) {
        Some(i) => Err(GazeError::NonMonotoneTimestamps { index: i + 1 }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Velocity threshold in pixels per second.
    pub v_th: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { v_th: DEFAULT_V_TH }
    }
}

/// Speed in px/s between consecutive points `i` and `i + 1`.
pub fn step_velocities(points: &[GazePoint]) -> Vec<f64> {
    points
        .windows(2)
        .map(|w| w[0].distance(&w[1]) / ((w[1].t_ms - w[0].t_ms) / 1000.0))
        .collect()
}

/// Labels every point of `trace` as fixation or saccade.
pub fn classify_points(trace: &GazeTrace, cfg: &FilterConfig) -> Result<GazeTrace, GazeError> {
    if !(cfg.v_th > 0.0) {
        return Err(GazeError::InvalidParameter(format!("v_th = {}", cfg.v_th)));
    }
    let n = trace.points.len();
    if n < 2 {
        return Err(GazeError::TraceTooShort(n));
    }
    check_monotone(&trace.points)?;
    let v = step_velocities(&trace.points);
    let slow = |i: usize| v[i] < cfg.v_th;
    let labels = (0..n)
        .map(|i| {
            let before = (i > 0).then(|| slow(i - 1));
            let after = (i + 1 < n).then(|| slow(i));
            if before.unwrap_or(true) && after.unwrap_or(true) {
                GazeLabel::Fixation
            } else {
                GazeLabel::Saccade
            }
        })
        .collect();
    Ok(GazeTrace {
        labels: Some(labels),
        ..trace.clone()
    })
}

/// Fixation-density map, max-normalised so the densest cell is exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeHeatmap {
    pub values: Grid<f64>,
    pub sigma_px: f64,
}

/// Default kernel width: 5% of the image width.
pub fn default_sigma(width: usize) -> f64 {
    0.05 * width as f64
}

/// Sums an isotropic Gaussian per fixation over the cell grid (cell `(x, y)`
/// sits at coordinate `(x, y)`) and rescales the result to a unit maximum.
pub fn render_heatmap(
    fixations: &[GazePoint],
    dims: (usize, usize),
    sigma_px: f64,
) -> Result<GazeHeatmap, GazeError> {
    if fixations.is_empty() {
        return Err(GazeError::EmptyFixationSet);
    }
    if !(sigma_px > 0.0) {
        return Err(GazeError::InvalidParameter(format!(
            "sigma_px = {sigma_px}"
        )));
    }
    let (w, h) = dims;
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut acc = vec![0.0; w * h];
    let mut gx = vec![0.0; w];
    let mut gy = vec![0.0; h];
    // exp(-(dx² + dy²)/2σ²) factorises into a row and a column profile
    for f in fixations {
        gx.iter_mut()
            .enumerate()
            .for_each(|(x, g)| *g = (-(x as f64 - f.x).powi(2) * inv).exp());
        gy.iter_mut()
            .enumerate()
            .for_each(|(y, g)| *g = (-(y as f64 - f.y).powi(2) * inv).exp());
        for (y, row) in acc.chunks_mut(w).enumerate() {
            let ky = gy[y];
            row.iter_mut().zip(&gx).for_each(|(a, kx)| *a += ky * kx);
        }
    }
    let max = acc.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        acc.iter_mut().for_each(|v| *v /= max);
    }
    Ok(GazeHeatmap {
        values: Grid::from_vec(w, h, acc).expect("dims"),
        sigma_px,
    })
}

/// Parses `t_ms,x,y` lines. A leading `t_ms,x,y` header is optional; line
/// numbers in errors are 1-based physical lines.
pub fn parse_trace_str(text: &str, dims: (usize, usize)) -> Result<GazeTrace, GazeError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == CSV_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = match fields.as_slice() {
            [_, _, _] => fields.iter().map(|f| f.parse::<f64>().ok()).collect(),
            _ => None,
        };
        match parsed.as_deref() {
            Some(&[t, x, y]) if t.is_finite() && x.is_finite() && y.is_finite() => {
                points.push(GazePoint::new(x, y, t))
            }
            _ => return Err(GazeError::MalformedLine(i + 1)),
        }
    }
    if points.is_empty() {
        return Err(GazeError::EmptyFile);
    }
    GazeTrace::new(points, dims)
}

pub fn parse_trace_csv(path: &Path, dims: (usize, usize)) -> Result<GazeTrace, GazeError> {
    parse_trace_str(&fs::read_to_string(path)?, dims)
}

pub fn format_trace_csv(trace: &GazeTrace) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in &trace.points {
        let _ = writeln!(out, "{},{},{}", p.t_ms, p.x, p.y);
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &GazeTrace) -> Result<(), GazeError> {
    fs::write(path, format_trace_csv(trace))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct HeatmapSidecar {
    w: usize,
    h: usize,
    sigma_px: f64,
}

/// Writes `<stem>.f32` (little-endian float32, row-major) and `<stem>.json`.
pub fn write_heatmap(stem: &Path, heatmap: &GazeHeatmap) -> Result<(), GazeError> {
    let bytes: Vec<u8> = heatmap
        .values
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(stem.with_extension("f32"), bytes)?;
    let side = HeatmapSidecar {
        w: heatmap.values.width(),
        h: heatmap.values.height(),
        sigma_px: heatmap.sigma_px,
    };
    fs::write(
        stem.with_extension("json"),
        serde_json::to_string(&side).expect("sidecar serialises"),
    )?;
    Ok(())
}

pub fn read_heatmap(stem: &Path) -> Result<GazeHeatmap, GazeError> {
    let side: HeatmapSidecar =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)
            .map_err(|e| GazeError::InvalidParameter(e.to_string()))?;
    let bytes = fs::read(stem.with_extension("f32"))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Grid::from_vec(side.w, side.h, values)
        .ok_or_else(|| GazeError::InvalidParameter("heatmap size".into()))?;
    Ok(GazeHeatmap {
        values,
        sigma_px: side.sigma_px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(pts: &[(f64, f64, f64)]) -> GazeTrace {
        GazeTrace::new(
            pts.iter()
                .map(|&(x, y, t)| GazePoint::new(x, y, t))
                .collect(),
            (256, 256),
        )
        .unwrap()
    }

    #[test]
    fn slow_middle_point_is_fixation() {
        // 1 px per 16.67 ms ≈ 60 px/s on both sides
        let t = trace(&[(0.0, 0.0, 0.0), (0.0, 1.0, 16.67), (0.0, 2.0, 33.33)]);
        let v = step_velocities(t.points());
        assert!((v[0] - 59.988).abs() < 0.01, "{v:?}");
        let c = classify_points(&t, &FilterConfig { v_th: 100.0 }).unwrap();
        assert_eq!(c.labels().unwrap()[1], GazeLabel::Fixation);
    }

    #[test]
    fn fast_middle_point_is_saccade() {
        // 100·√2 px per 16.67 ms ≈ 8484 px/s
        let t = trace(&[
            (0.0, 0.0, 0.0),
            (100.0, 100.0, 16.67),
            (200.0, 200.0, 33.33),
        ]);
        let v = step_velocities(t.points());
        assert!((v[0] - 8483.6).abs() < 1.0, "{v:?}");
        let c = classify_points(&t, &FilterConfig { v_th: 100.0 }).unwrap();
        assert_eq!(c.labels().unwrap(), &[GazeLabel::Saccade; 3]);
    }

    #[test]
    fn stationary_trace_is_all_fixation() {
        let t = trace(&[
            (5.0, 5.0, 0.0),
            (5.0, 5.0, 10.0),
            (5.0, 5.0, 20.0),
            (5.0, 5.0, 30.0),
        ]);
        let c = classify_points(&t, &FilterConfig { v_th: 1e-9 }).unwrap();
        assert_eq!(c.fixations().len(), 4);
        assert!(c.saccades().is_empty());
    }

    #[test]
    fn mixed_neighbours_and_threshold_ties_are_saccades() {
        // steps: 1 px, 10 px, 1 px per second-long interval → 1, 10, 1 px/s
        let t = trace(&[
            (0.0, 0.0, 0.0),
            (1.0, 0.0, 1000.0),
            (11.0, 0.0, 2000.0),
            (12.0, 0.0, 3000.0),
        ]);
        let c = classify_points(&t, &FilterConfig { v_th: 5.0 }).unwrap();
        use GazeLabel::*;
        assert_eq!(c.labels().unwrap(), &[Fixation, Saccade, Saccade, Fixation]);
        let tie = classify_points(&t, &FilterConfig { v_th: 1.0 }).unwrap();
        assert_eq!(tie.labels().unwrap(), &[Saccade; 4]);
    }

    #[test]
    fn short_and_non_monotone_traces_are_rejected() {
        let one = trace(&[(0.0, 0.0, 0.0)]);
        assert!(matches!(
            classify_points(&one, &FilterConfig::default()),
            Err(GazeError::TraceTooShort(1))
        ));
        let dup = GazeTrace::new(
            vec![GazePoint::new(0.0, 0.0, 5.0), GazePoint::new(1.0, 1.0, 5.0)],
            (8, 8),
        );
        assert!(matches!(
            dup,
            Err(GazeError::NonMonotoneTimestamps { index: 1 })
        ));
    }

    #[test]
    fn coordinates_are_clamped_into_the_image() {
        let t = GazeTrace::new(
            vec![
                GazePoint::new(-3.0, 40.0, 0.0),
                GazePoint::new(16.0, 2.0, 1.0),
            ],
            (16, 32),
        )
        .unwrap();
        let p = t.points();
        assert_eq!(p[0].x, 0.0);
        assert!(p[0].y < 32.0 && p[0].y > 31.99);
        assert!(p[1].x < 16.0 && p[1].x > 15.99);
    }

    #[test]
    fn centred_fixation_peaks_at_centre_and_decays_radially() {
        let hm = render_heatmap(&[GazePoint::new(16.0, 16.0, 0.0)], (32, 32), 3.0).unwrap();
        assert_eq!(hm.values.at(16, 16), 1.0);
        for r in 1..10 {
            assert!(hm.values.at(16 + r, 16) < hm.values.at(16 + r - 1, 16));
            assert_eq!(hm.values.at(16 + r, 16), hm.values.at(16, 16 + r));
        }
        assert!(hm.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn duplicate_fixations_render_like_one() {
        let p = GazePoint::new(7.0, 9.0, 0.0);
        let one = render_heatmap(&[p], (20, 20), 2.0).unwrap();
        let two = render_heatmap(&[p, p], (20, 20), 2.0).unwrap();
        for (a, b) in one.values.data().iter().zip(two.values.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn heatmap_matches_dense_double_loop() {
        let fx = [GazePoint::new(2.0, 2.0, 0.0), GazePoint::new(5.0, 5.0, 1.0)];
        let hm = render_heatmap(&fx, (8, 8), 1.0).unwrap();
        let mut dense = [[0.0f64; 8]; 8];
        for (y, row) in dense.iter_mut().enumerate() {
            for (x, cell) in row.iter_mut().enumerate() {
                for f in &fx {
                    let d2 = (x as f64 - f.x).powi(2) + (y as f64 - f.y).powi(2);
                    *cell += (-d2 / 2.0).exp();
                }
            }
        }
        let max = dense.iter().flatten().copied().fold(0.0, f64::max);
        for y in 0..8 {
            for x in 0..8 {
                assert!((hm.values.at(x, y) - dense[y][x] / max).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_fixations_are_an_error() {
        assert!(matches!(
            render_heatmap(&[], (8, 8), 1.0),
            Err(GazeError::EmptyFixationSet)
        ));
    }

    #[test]
    fn csv_parsing_cases() {
        let t = parse_trace_str("0,1.0,2.0\n16.7,1.5,2.5", (8, 8)).unwrap();
        assert_eq!(
            t.points(),
            &[
                GazePoint::new(1.0, 2.0, 0.0),
                GazePoint::new(1.5, 2.5, 16.7)
            ]
        );
        assert!(matches!(
            parse_trace_str("", (8, 8)),
            Err(GazeError::EmptyFile)
        ));
        assert!(matches!(
            parse_trace_str("t_ms,x,y\n", (8, 8)),
            Err(GazeError::EmptyFile)
        ));
        assert!(matches!(
            parse_trace_str("abc,1,2", (8, 8)),
            Err(GazeError::MalformedLine(1))
        ));
        assert!(matches!(
            parse_trace_str("t_ms,x,y\n0,1,2\n1,2", (8, 8)),
            Err(GazeError::MalformedLine(3))
        ));
    }

    #[test]
    fn heatmap_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let hm = render_heatmap(&[GazePoint::new(3.0, 4.0, 0.0)], (10, 6), 1.5).unwrap();
        let stem = dir.path().join("hm");
        write_heatmap(&stem, &hm).unwrap();
        let back = read_heatmap(&stem).unwrap();
        assert_eq!(back.values.dims(), (10, 6));
        assert_eq!(back.sigma_px, 1.5);
        for (a, b) in back.values.data().iter().zip(hm.values.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
