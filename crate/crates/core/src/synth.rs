//! Deterministic synthetic segmentation world.
//!
//! Every image is a weakly textured background carrying one or more filled
//! shapes; each shape kind is its own class. Gaze traces are simulated from
//! the true mask: jittered fixation clusters on each target's centre and
//! extremities joined by fast saccadic hops. Sample `i` draws from its own
//! RNG streams keyed by `(seed, i)`, so any subset regenerates identically.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::{self, GazeError, GazeLabel, GazePoint, GazeTrace};
use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("labeling ratio must lie in (0, 1], got {0}")]
    BadRatio(f64),
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("sample has no target pixels")]
    NoTargetInSample,
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Gaze(#[from] GazeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    /// Class count including background (class 0).
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape radius range as a fraction of the shorter image side.
    pub min_radius_frac: f64,
    pub max_radius_frac: f64,
    /// Std-dev of additive Gaussian intensity noise.
    pub noise_level: f64,
    /// Period in pixels of the sinusoidal background texture.
    pub texture_period: f64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    /// Intensity offset of class 1; class `c` adds `c` times this.
    pub class_contrast: f64,
    pub seed: u64,
    /// Training samples generated by [`generate_world`].
    pub samples: usize,
    pub labeling_ratio: f64,
    pub validation_samples: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_classes: 3,
            min_shapes: 1,
            max_shapes: 2,
            min_radius_frac: 0.10,
            max_radius_frac: 0.20,
            noise_level: 0.08,
            texture_period: 12.0,
            background_level: 0.35,
            texture_amplitude: 0.12,
            class_contrast: 0.12,
            seed: 0,
            samples: 200,
            labeling_ratio: 0.1,
            validation_samples: 50,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("num_classes must be in 2..=255");
        }
        if self.width < 16 || self.height < 16 {
            return bad("width and height must be at least 16");
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad("need 1 <= min_shapes <= max_shapes");
        }
        if !(self.min_radius_frac > 0.0 && self.min_radius_frac <= self.max_radius_frac)
            || self.max_radius_frac > 0.45
        {
            return bad("need 0 < min_radius_frac <= max_radius_frac <= 0.45");
        }
        if !(self.noise_level >= 0.0) || !(self.texture_period > 0.0) {
            return bad("noise_level must be >= 0 and texture_period > 0");
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Highest intensity the noiseless background texture reaches.
    pub fn texture_ceiling(&self) -> f64 {
        self.background_level + self.texture_amplitude
    }

    fn texture(&self, x: usize, y: usize) -> f64 {
        let k = 2.0 * PI / self.texture_period;
        self.background_level
            + self.texture_amplitude * (k * x as f64).sin() * (k * y as f64 + 0.7).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazeSimConfig {
    pub rate_hz: f64,
    pub min_points: usize,
    pub max_points: usize,
    /// Std-dev of fixation jitter in pixels.
    pub jitter_px: f64,
    /// Insert fast hops between fixation clusters; when false the gaze
    /// glides slowly from one cluster to the next.
    pub saccades: bool,
    /// Distance covered per sample during a saccadic hop.
    pub saccade_step_px: f64,
    /// Distance covered per sample while gliding.
    pub glide_step_px: f64,
    /// Extra fixation clusters per target at random interior pixels.
    pub interior_clusters: usize,
}

impl Default for GazeSimConfig {
    fn default() -> Self {
        Self {
            rate_hz: 60.0,
            min_points: 800,
            max_points: 1200,
            jitter_px: 1.0,
            saccades: true,
            saccade_step_px: 12.0,
            glide_step_px: 1.0,
            interior_clusters: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Grid<f64>,
    /// Present only for samples of the labeled (or validation) split.
    pub label: Option<Grid<u8>>,
    pub trace: GazeTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dims: (usize, usize),
    pub num_classes: usize,
    pub seed: u64,
    pub labeling_ratio: f64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
    pub world: WorldConfig,
    pub gaze: GazeSimConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    /// Ground truth of `unlabeled`, index-aligned; evaluation only.
    pub hidden_labels: Vec<Grid<u8>>,
    /// Held-out labeled samples for validation.
    pub validation: Vec<Sample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn labeling_ratio(&self) -> f64 {
        self.labeled.len() as f64 / (self.labeled.len() + self.unlabeled.len()) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ShapeKind {
    Circle,
    Rectangle,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    class: u8,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle | ShapeKind::Ellipse => {
                (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0
            }
            ShapeKind::Rectangle => dx.abs() <= self.rx && dy.abs() <= self.ry,
        }
    }

    /// Bounding boxes separated by at least `gap` pixels.
    fn clear_of(&self, other: &Shape, gap: f64) -> bool {
        (self.cx - other.cx).abs() > self.rx + other.rx + gap
            || (self.cy - other.cy).abs() > self.ry + other.ry + gap
    }
}

fn kind_of(class: u8) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Ellipse,
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_shapes(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let side = w.min(h);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count && attempts < 200 {
        attempts += 1;
        let class = rng.random_range(1..cfg.num_classes) as u8;
        let kind = kind_of(class);
        let r = side * rng.random_range(cfg.min_radius_frac..=cfg.max_radius_frac);
        let (rx, ry) = match kind {
            ShapeKind::Circle => (r, r),
            ShapeKind::Rectangle => (r, r * rng.random_range(0.6..=1.0)),
            ShapeKind::Ellipse => (r, r * rng.random_range(0.45..=0.7)),
        };
        let (rx, ry) = if rng.random_bool(0.5) {
            (rx, ry)
        } else {
            (ry, rx)
        };
        let margin_x = rx + 1.0;
        let margin_y = ry + 1.0;
        if 2.0 * margin_x >= w || 2.0 * margin_y >= h {
            continue;
        }
        let shape = Shape {
            kind,
            class,
            cx: rng.random_range(margin_x..w - margin_x),
            cy: rng.random_range(margin_y..h - margin_y),
            rx,
            ry,
        };
        if shapes.iter().all(|s| s.clear_of(&shape, 3.0)) {
            shapes.push(shape);
        }
    }
    shapes
}

fn render(cfg: &WorldConfig, shapes: &[Shape], rng: &mut ChaCha8Rng) -> (Grid<f64>, Grid<u8>) {
    let label = Grid::from_fn(cfg.width, cfg.height, |x, y| {
        shapes
            .iter()
            .find(|s| s.contains(x as f64, y as f64))
            .map_or(0, |s| s.class)
    });
    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE)).expect("finite std");
    let image = Grid::from_fn(cfg.width, cfg.height, |x, y| {
        let mut v = cfg.texture(x, y) + cfg.class_contrast * f64::from(label.at(x, y));
        if cfg.noise_level > 0.0 {
            v += noise.sample(rng);
        }
        // stored as float32 on disk; keep the in-memory copy identical
        v.clamp(0.0, 1.0) as f32 as f64
    });
    (image, label)
}

/// 4-connected foreground components of `mask`, as pixel lists.
fn components(mask: &Grid<u8>) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || mask.data()[start] == 0 {
            continue;
        }
        let class = mask.data()[start];
        let mut stack = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            comp.push((x, y));
            let mut visit = |j: usize| {
                if !seen[j] && mask.data()[j] == class {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        comp.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(comp);
    }
    out
}

/// Fixation-cluster centres for one target: the centroid, `interior`
/// random target pixels, then the four extreme pixels.
fn cluster_centres(
    comp: &[(usize, usize)],
    interior: usize,
    rng: &mut impl Rng,
) -> Vec<(f64, f64)> {
    let n = comp.len() as f64;
    let cx = comp.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = comp.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let pick = |key: fn(&(usize, usize)) -> i64| {
        let p = comp
            .iter()
            .min_by_key(|p| key(p))
            .expect("non-empty component");
        (p.0 as f64, p.1 as f64)
    };
    let mut out = vec![(cx, cy)];
    for _ in 0..interior {
        let p = comp[rng.random_range(0..comp.len())];
        out.push((p.0 as f64, p.1 as f64));
    }
    out.extend([
        pick(|p| p.0 as i64),
        pick(|p| p.1 as i64),
        pick(|p| -(p.0 as i64)),
        pick(|p| -(p.1 as i64)),
    ]);
    out
}

/// A simulated trace with the label each point was generated under.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedGaze {
    pub trace: GazeTrace,
    pub intended: Vec<GazeLabel>,
}

/// Simulates a 60 Hz reading of the targets in `mask`.
pub fn simulate_gaze(
    mask: &Grid<u8>,
    cfg: &GazeSimConfig,
    rng: &mut impl Rng,
) -> Result<SimulatedGaze, SynthError> {
    if cfg.min_points < 2 || cfg.min_points > cfg.max_points || !(cfg.rate_hz > 0.0) {
        return Err(SynthError::InvalidConfig("gaze sampling parameters".into()));
    }
    let centres: Vec<(f64, f64)> = components(mask)
        .iter()
        .flat_map(|c| cluster_centres(c, cfg.interior_clusters, rng))
        .collect();
    if centres.is_empty() {
        return Err(SynthError::NoTargetInSample);
    }
    let total = rng.random_range(cfg.min_points..=cfg.max_points);

    // transition paths between consecutive cluster centres
    let step = if cfg.saccades {
        cfg.saccade_step_px
    } else {
        cfg.glide_step_px
    };
    let paths: Vec<Vec<(f64, f64)>> = centres
        .windows(2)
        .map(|pair| {
            let (a, b) = (pair[0], pair[1]);
            let dist = (b.0 - a.0).hypot(b.1 - a.1);
            let m = if cfg.saccades && dist <= 2.0 * step {
                0
            } else {
                (dist / step).ceil() as usize - 1
            };
            (1..=m)
                .map(|k| {
                    let f = k as f64 / (m + 1) as f64;
                    (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
                })
                .collect()
        })
        .collect();
    let transit: usize = paths.iter().map(Vec::len).sum();
    let fix_total = total.saturating_sub(transit).max(centres.len());
    let per = fix_total / centres.len();
    let extra = fix_total % centres.len();

    let jitter = Normal::new(0.0, cfg.jitter_px.max(f64::MIN_POSITIVE)).expect("finite std");
    let dt = 1000.0 / cfg.rate_hz;
    let mut points = Vec::with_capacity(fix_total + transit);
    let mut intended = Vec::with_capacity(fix_total + transit);
    let transit_label = if cfg.saccades {
        GazeLabel::Saccade
    } else {
        GazeLabel::Fixation
    };
    for (i, &(cx, cy)) in centres.iter().enumerate() {
        let count = per + usize::from(i < extra);
        for _ in 0..count {
            let (jx, jy) = if cfg.jitter_px > 0.0 {
                (jitter.sample(rng), jitter.sample(rng))
            } else {
                (0.0, 0.0)
            };
            points.push((cx + jx, cy + jy));
            intended.push(GazeLabel::Fixation);
        }
        if let Some(path) = paths.get(i) {
            for &p in path {
                points.push(p);
                intended.push(transit_label);
            }
        }
    }
    let pts = points
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| GazePoint::new(x, y, i as f64 * dt))
        .collect();
    Ok(SimulatedGaze {
        trace: GazeTrace::new(pts, mask.dims())?,
        intended,
    })
}

/// Renders sample `index` of the world: image, full mask, and gaze trace.
pub fn generate_sample(
    world: &WorldConfig,
    gaze_cfg: &GazeSimConfig,
    index: u64,
) -> Result<(Sample, Grid<u8>), SynthError> {
    world.validate()?;
    let mut rng = stream_rng(world.seed, 2 * index);
    let mut shapes = sample_shapes(world, &mut rng);
    if shapes.is_empty() {
        // radius range always admits one centred shape
        let class = 1;
        let r = world.min_radius_frac * world.width.min(world.height) as f64;
        shapes.push(Shape {
            kind: kind_of(class),
            class,
            cx: world.width as f64 / 2.0,
            cy: world.height as f64 / 2.0,
            rx: r,
            ry: r,
        });
    }
    let (image, mask) = render(world, &shapes, &mut rng);
    let mut gaze_rng = stream_rng(world.seed, 2 * index + 1);
    let sim = simulate_gaze(&mask, gaze_cfg, &mut gaze_rng)?;
    Ok((
        Sample {
            id: format!("{index:05}"),
            image,
            label: Some(mask.clone()),
            trace: sim.trace,
        },
        mask,
    ))
}

/// Generates `n_samples` training samples, the first `round(ratio·n)` of
/// which keep their labels, plus `n_validation` held-out labeled samples.
pub fn generate_dataset(
    world: &WorldConfig,
    gaze_cfg: &GazeSimConfig,
    n_samples: usize,
    labeling_ratio: f64,
    n_validation: usize,
) -> Result<Dataset, SynthError> {
    if !(labeling_ratio > 0.0 && labeling_ratio <= 1.0) {
        return Err(SynthError::BadRatio(labeling_ratio));
    }
    if n_samples < 2 {
        return Err(SynthError::InvalidConfig("need at least 2 samples".into()));
    }
    world.validate()?;
    let n_labeled = ((labeling_ratio * n_samples as f64).round() as usize).clamp(1, n_samples);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut hidden_labels = Vec::new();
    for i in 0..n_samples {
        let (mut s, mask) = generate_sample(world, gaze_cfg, i as u64)?;
        if i < n_labeled {
            labeled.push(s);
        } else {
            s.label = None;
            unlabeled.push(s);
            hidden_labels.push(mask);
        }
    }
    let validation = (n_samples..n_samples + n_validation)
        .map(|i| generate_sample(world, gaze_cfg, i as u64).map(|(s, _)| s))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        dims: world.dims(),
        num_classes: world.num_classes,
        seed: world.seed,
        labeling_ratio,
        labeled: labeled.iter().map(|s| s.id.clone()).collect(),
        unlabeled: unlabeled.iter().map(|s| s.id.clone()).collect(),
        validation: validation.iter().map(|s| s.id.clone()).collect(),
        world: world.clone(),
        gaze: gaze_cfg.clone(),
    };
    Ok(Dataset {
        labeled,
        unlabeled,
        hidden_labels,
        validation,
        manifest,
    })
}

/// [`generate_dataset`] with the split sizes taken from `world`.
pub fn generate_world(
    world: &WorldConfig,
    gaze_cfg: &GazeSimConfig,
) -> Result<Dataset, SynthError> {
    generate_dataset(
        world,
        gaze_cfg,
        world.samples,
        world.labeling_ratio,
        world.validation_samples,
    )
}

pub fn write_f32_grid(path: &Path, grid: &Grid<f64>) -> std::io::Result<()> {
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes)
}

pub fn read_f32_grid(path: &Path, dims: (usize, usize)) -> Result<Grid<f64>, SynthError> {
    let bytes = fs::read(path)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Grid::from_vec(dims.0, dims.1, values)
        .ok_or_else(|| SynthError::Format(format!("{} has the wrong size", path.display())))
}

pub fn read_u8_grid(path: &Path, dims: (usize, usize)) -> Result<Grid<u8>, SynthError> {
    Grid::from_vec(dims.0, dims.1, fs::read(path)?)
        .ok_or_else(|| SynthError::Format(format!("{} has the wrong size", path.display())))
}

fn write_sample(dir: &Path, s: &Sample, label_prefix: &str) -> Result<(), SynthError> {
    write_f32_grid(&dir.join(format!("img_{}.f32", s.id)), &s.image)?;
    if let Some(label) = &s.label {
        fs::write(
            dir.join(format!("{label_prefix}_{}.u8", s.id)),
            label.data(),
        )?;
    }
    gaze::write_trace_csv(&dir.join(format!("gaze_{}.csv", s.id)), &s.trace)?;
    Ok(())
}

/// Writes `manifest.json` and the per-sample files into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)
        .map_err(|e| SynthError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    for s in ds.labeled.iter().chain(&ds.validation) {
        write_sample(dir, s, "lbl")?;
    }
    for (s, hidden) in ds.unlabeled.iter().zip(&ds.hidden_labels) {
        write_sample(dir, s, "lbl")?;
        fs::write(dir.join(format!("hidden_lbl_{}.u8", s.id)), hidden.data())?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| SynthError::Format(format!("manifest.json: {e}")))?;
    let dims = manifest.dims;
    let load = |id: &str, labeled: bool| -> Result<Sample, SynthError> {
        let image = read_f32_grid(&dir.join(format!("img_{id}.f32")), dims)?;
        let label = if labeled {
            Some(read_u8_grid(&dir.join(format!("lbl_{id}.u8")), dims)?)
        } else {
            None
        };
        let trace = gaze::parse_trace_csv(&dir.join(format!("gaze_{id}.csv")), dims)?;
        Ok(Sample {
            id: id.to_string(),
            image,
            label,
            trace,
        })
    };
    let labeled = manifest
        .labeled
        .iter()
        .map(|id| load(id, true))
        .collect::<Result<Vec<_>, _>>()?;
    let unlabeled = manifest
        .unlabeled
        .iter()
        .map(|id| load(id, false))
        .collect::<Result<Vec<_>, _>>()?;
    let hidden_labels = manifest
        .unlabeled
        .iter()
        .map(|id| read_u8_grid(&dir.join(format!("hidden_lbl_{id}.u8")), dims))
        .collect::<Result<Vec<_>, _>>()?;
    let validation = manifest
        .validation
        .iter()
        .map(|id| load(id, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        labeled,
        unlabeled,
        hidden_labels,
        validation,
        manifest,
    })
}
