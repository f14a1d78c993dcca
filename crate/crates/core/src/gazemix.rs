//! GazeMix: crop the gaze-bounded rectangle of a foreground image, resize it
//! to the background's gaze rectangle and paste it there. Image, heatmap and
//! label receive the same geometric transform; labels use nearest-neighbour
//! sampling, images and heatmaps bilinear (half-pixel centres).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::{GazePoint, GazeTrace};
use crate::grid::Grid;
use crate::ndnet::kernels::{bilinear_taps, nearest_index};

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("no fixations to bound")]
    NoFixations,
    #[error("foreground {fg:?} and background {bg:?} differ in size")]
    DimMismatch {
        fg: (usize, usize),
        bg: (usize, usize),
    },
    #[error("rectangle {0:?} is empty or outside the image")]
    InvalidRect(GazeRect),
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl GazeRect {
    pub fn full(dims: (usize, usize)) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: dims.0,
            y1: dims.1,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn validate(&self, dims: (usize, usize)) -> Result<(), MixError> {
        if self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= dims.0 && self.y1 <= dims.1 {
            Ok(())
        } else {
            Err(MixError::InvalidRect(*self))
        }
    }

    /// The binary mask `M` of the rectangle.
    pub fn mask(&self, dims: (usize, usize)) -> Grid<u8> {
        Grid::from_fn(dims.0, dims.1, |x, y| u8::from(self.contains(x, y)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectOptions {
    pub margin_px: usize,
    pub min_side: usize,
    /// Bound every gaze point instead of fixations only.
    pub all_points: bool,
}

impl Default for RectOptions {
    fn default() -> Self {
        Self {
            margin_px: 2,
            min_side: 4,
            all_points: false,
        }
    }
}

fn enforce_min_side(lo: usize, hi: usize, len: usize, min_side: usize) -> (usize, usize) {
    if hi - lo >= min_side {
        return (lo, hi);
    }
    if len <= min_side {
        return (0, len);
    }
    let deficit = min_side - (hi - lo);
    let lo = lo.saturating_sub(deficit.div_ceil(2));
    let hi = lo + min_side;
    if hi > len {
        (len - min_side, len)
    } else {
        (lo, hi)
    }
}

/// Tightest integer rectangle holding every point (pixel `floor(x)`),
/// grown by `margin_px`, clipped to the image and widened symmetrically to
/// at least `min_side` pixels per axis.
pub fn gaze_rect(
    points: &[GazePoint],
    dims: (usize, usize),
    opts: &RectOptions,
) -> Result<GazeRect, MixError> {
    if points.is_empty() {
        return Err(MixError::NoFixations);
    }
    let px = |v: f64, len: usize| (v.floor().max(0.0) as usize).min(len - 1);
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for p in points {
        let (x, y) = (px(p.x, dims.0), px(p.y, dims.1));
        x0 = x0.min(x);
        x1 = x1.max(x + 1);
        y0 = y0.min(y);
        y1 = y1.max(y + 1);
    }
    let m = opts.margin_px;
    let (x0, x1) = (x0.saturating_sub(m), (x1 + m).min(dims.0));
    let (y0, y1) = (y0.saturating_sub(m), (y1 + m).min(dims.1));
    let (x0, x1) = enforce_min_side(x0, x1, dims.0, opts.min_side);
    let (y0, y1) = enforce_min_side(y0, y1, dims.1, opts.min_side);
    Ok(GazeRect { x0, y0, x1, y1 })
}

/// [`gaze_rect`] over a classified trace's fixations (or all its points).
pub fn trace_rect(trace: &GazeTrace, opts: &RectOptions) -> Result<GazeRect, MixError> {
    if opts.all_points {
        gaze_rect(trace.points(), trace.dims(), opts)
    } else {
        gaze_rect(&trace.fixations(), trace.dims(), opts)
    }
}

/// One side of a mix: the image with its heatmap and optional label.
#[derive(Clone, Copy, Debug)]
pub struct MixInput<'a> {
    pub id: &'a str,
    pub image: &'a Grid<f64>,
    pub heatmap: &'a Grid<f64>,
    pub label: Option<&'a Grid<u8>>,
}

/// Ground truth carried by a mix whose foreground was labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedLabel {
    /// Resized foreground label inside `rect`; outside it holds the
    /// background label when known, else 0.
    pub label: Grid<u8>,
    pub rect: GazeRect,
    /// True when the background was labeled too, so every pixel is valid.
    pub full_field: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Grid<f64>,
    pub heatmap: Grid<f64>,
    pub supervision: Option<MixedLabel>,
    pub paste_rect: GazeRect,
    pub provenance: (String, String),
}

/// Bilinear resize of `src`'s `from` window, written into `dst`'s `to` window.
pub fn paste_bilinear(src: &Grid<f64>, from: GazeRect, dst: &mut Grid<f64>, to: GazeRect) {
    let tx = bilinear_taps(from.width(), to.width());
    let ty = bilinear_taps(from.height(), to.height());
    for (oy, t) in ty.iter().enumerate() {
        let (ylo, yhi) = (from.y0 + t.lo, from.y0 + t.hi);
        for (ox, s) in tx.iter().enumerate() {
            let (xlo, xhi) = (from.x0 + s.lo, from.x0 + s.hi);
            let top = src.at(xlo, ylo) * (1.0 - s.frac) + src.at(xhi, ylo) * s.frac;
            let bot = src.at(xlo, yhi) * (1.0 - s.frac) + src.at(xhi, yhi) * s.frac;
            dst.set(to.x0 + ox, to.y0 + oy, top * (1.0 - t.frac) + bot * t.frac);
        }
    }
}

/// Nearest-neighbour counterpart of [`paste_bilinear`] for class grids.
pub fn paste_nearest<T: Copy>(src: &Grid<T>, from: GazeRect, dst: &mut Grid<T>, to: GazeRect) {
    for oy in 0..to.height() {
        let sy = from.y0 + nearest_index(from.height(), to.height(), oy);
        for ox in 0..to.width() {
            let sx = from.x0 + nearest_index(from.width(), to.width(), ox);
            dst.set(to.x0 + ox, to.y0 + oy, src.at(sx, sy));
        }
    }
}

/// Pastes the `fg_rect` crop of `fg` over `bg`, resized into `bg_rect`.
pub fn mix(
    fg: &MixInput<'_>,
    bg: &MixInput<'_>,
    fg_rect: GazeRect,
    bg_rect: GazeRect,
) -> Result<MixedSample, MixError> {
    let dims = bg.image.dims();
    for g in [fg.image.dims(), fg.heatmap.dims(), bg.heatmap.dims()]
        .into_iter()
        .chain(fg.label.map(Grid::dims))
        .chain(bg.label.map(Grid::dims))
    {
        if g != dims {
            return Err(MixError::DimMismatch { fg: g, bg: dims });
        }
    }
    fg_rect.validate(dims)?;
    bg_rect.validate(dims)?;

    let mut image = bg.image.clone();
    paste_bilinear(fg.image, fg_rect, &mut image, bg_rect);
    let mut heatmap = bg.heatmap.clone();
    paste_bilinear(fg.heatmap, fg_rect, &mut heatmap, bg_rect);
    let supervision = fg.label.map(|fl| {
        let mut label = bg
            .label
            .cloned()
            .unwrap_or_else(|| Grid::filled(dims.0, dims.1, 0));
        paste_nearest(fl, fg_rect, &mut label, bg_rect);
        MixedLabel {
            label,
            rect: bg_rect,
            full_field: bg.label.is_some(),
        }
    });
    Ok(MixedSample {
        image,
        heatmap,
        supervision,
        paste_rect: bg_rect,
        provenance: (fg.id.to_string(), bg.id.to_string()),
    })
}
