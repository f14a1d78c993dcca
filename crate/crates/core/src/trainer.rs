//! Mean-teacher training with gaze-guided mixing.
//!
//! A teacher is first fit on the labeled split alone. The student starts as
//! a copy of it; every iteration the student sees two mixed batches
//! (labeled-onto-unlabeled and unlabeled-onto-unlabeled), is supervised by
//! ground truth where it exists and by the teacher's argmax elsewhere, and
//! optionally aligns its perception map with the human heatmaps. The teacher
//! then follows the student as an exponential moving average.
//!
//! Randomness is drawn from a fresh stream per (phase, iteration), so a run
//! is a pure function of its data and config.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::{classify_points, default_sigma, render_heatmap, FilterConfig, GazeError};
use crate::gazemix::{gaze_rect, mix, GazeRect, MixError, MixInput, RectOptions};
use crate::grid::Grid;
use crate::losses::{dice_ce_loss, gaze_loss, total_loss, total_loss_node, LossReport};
use crate::metrics::{aggregate, evaluate, MetricError};
use crate::model::{
    argmax_classes, forward, init_params, predict, save_checkpoint, ModelError, ModelParams, Role,
    UNetConfig,
};
use crate::ndnet::{Backend, ClassTarget, Graph, Tensor, TensorError};
use crate::synth::{Dataset, Sample, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {need} labeled samples, have {have}")]
    InsufficientLabeledData { need: usize, have: usize },
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in {phase} at iteration {iteration}; batch ids {batch_ids:?}")]
    NonFinite {
        phase: &'static str,
        iteration: usize,
        batch_ids: Vec<String>,
    },
    #[error("sample {id}: {source}")]
    Gaze { id: String, source: GazeError },
    #[error("sample {id}: {source}")]
    Rect { id: String, source: MixError },
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Teacher EMA decay γ.
    pub ema_decay: f64,
    /// Gaze loss weight λ.
    pub lambda: f64,
    pub pretrain_iterations: usize,
    pub seed: u64,
    /// Gaze-bounded mixing; when off, batches only get random flips.
    pub gazemix: bool,
    /// Compute the perception map at all.
    pub mgp: bool,
    /// Train the perception map against the human heatmap.
    pub gaze_loss: bool,
    /// Validation cadence in iterations; 0 validates only at the end.
    pub val_every: usize,
    /// Checkpoint cadence in iterations; 0 saves only the final pair.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 2000,
            learning_rate: 0.01,
            ema_decay: 0.99,
            lambda: crate::losses::DEFAULT_LAMBDA,
            pretrain_iterations: 500,
            seed: 0,
            gazemix: true,
            mgp: true,
            gaze_loss: true,
            val_every: 200,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        Ok(())
    }

    /// λ as applied: zero unless the perception map is both computed and
    /// trained.
    pub fn effective_lambda(&self) -> f64 {
        if self.mgp && self.gaze_loss {
            self.lambda
        } else {
            0.0
        }
    }
}

/// How raw traces become heatmaps and paste rectangles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazePrep {
    pub filter: FilterConfig,
    /// Heatmap kernel width; `None` uses 5% of the image width.
    pub sigma_px: Option<f64>,
    pub rect: RectOptions,
}

/// A sample with its gaze already reduced to a heatmap and a rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub image: Grid<f64>,
    pub label: Option<Grid<u8>>,
    pub heatmap: Grid<f64>,
    pub rect: GazeRect,
}

impl Item {
    pub fn flipped(&self, fx: bool, fy: bool) -> Item {
        let (w, h) = self.image.dims();
        let flip_f = |g: &Grid<f64>| match (fx, fy) {
            (true, true) => g.flip_x().flip_y(),
            (true, false) => g.flip_x(),
            (false, true) => g.flip_y(),
            (false, false) => g.clone(),
        };
        let flip_u = |g: &Grid<u8>| match (fx, fy) {
            (true, true) => g.flip_x().flip_y(),
            (true, false) => g.flip_x(),
            (false, true) => g.flip_y(),
            (false, false) => g.clone(),
        };
        let r = self.rect;
        let (x0, x1) = if fx {
            (w - r.x1, w - r.x0)
        } else {
            (r.x0, r.x1)
        };
        let (y0, y1) = if fy {
            (h - r.y1, h - r.y0)
        } else {
            (r.y0, r.y1)
        };
        Item {
            id: self.id.clone(),
            image: flip_f(&self.image),
            label: self.label.as_ref().map(flip_u),
            heatmap: flip_f(&self.heatmap),
            rect: GazeRect { x0, y0, x1, y1 },
        }
    }

    fn as_mix_input(&self) -> MixInput<'_> {
        MixInput {
            id: &self.id,
            image: &self.image,
            heatmap: &self.heatmap,
            label: self.label.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub labeled: Vec<Item>,
    pub unlabeled: Vec<Item>,
    pub validation: Vec<Item>,
    pub dims: (usize, usize),
    pub num_classes: usize,
}

pub fn prepare_item(s: &Sample, prep: &GazePrep) -> Result<Item, TrainError> {
    let dims = s.image.dims();
    let gaze_err = |source| TrainError::Gaze {
        id: s.id.clone(),
        source,
    };
    let classified = classify_points(&s.trace, &prep.filter).map_err(gaze_err)?;
    let fixations = classified.fixations();
    let sigma = prep.sigma_px.unwrap_or_else(|| default_sigma(dims.0));
    let heatmap = render_heatmap(&fixations, dims, sigma).map_err(gaze_err)?;
    let rect = gaze_rect(&fixations, dims, &prep.rect).map_err(|source| TrainError::Rect {
        id: s.id.clone(),
        source,
    })?;
    Ok(Item {
        id: s.id.clone(),
        image: s.image.clone(),
        label: s.label.clone(),
        heatmap: heatmap.values,
        rect,
    })
}

pub fn prepare(ds: &Dataset, prep: &GazePrep) -> Result<Prepared, TrainError> {
    let all = |v: &[Sample]| {
        v.iter()
            .map(|s| prepare_item(s, prep))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(Prepared {
        labeled: all(&ds.labeled)?,
        unlabeled: all(&ds.unlabeled)?,
        validation: all(&ds.validation)?,
        dims: ds.manifest.dims,
        num_classes: ds.manifest.num_classes,
    })
}

/// One JSON line of the training log. Iteration 0 carries only the
/// validation score of the pre-trained starting point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_gaze: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_gt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_pse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_seg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_all: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<f64>,
}

impl LogRecord {
    fn from_report(iter: usize, r: &LossReport, val_dice: Option<f64>) -> Self {
        Self {
            iter,
            l_gaze: Some(r.l_gaze),
            l_gt: Some(r.l_gt),
            l_pse: Some(r.l_pse),
            l_seg: Some(r.l_seg),
            l_all: Some(r.l_all),
            val_dice,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub student: ModelParams<Tensor>,
    pub teacher: ModelParams<Tensor>,
    /// Completed training iterations.
    pub iteration: usize,
    pub history: Vec<LogRecord>,
}

impl TrainerState {
    /// Student and teacher both start from `teacher`.
    pub fn new(teacher: ModelParams<Tensor>) -> Self {
        Self {
            student: teacher.clone(),
            teacher,
            iteration: 0,
            history: Vec::new(),
        }
    }
}

const PRETRAIN_STREAM: u64 = 1 << 40;
const TRAIN_STREAM: u64 = 2 << 40;

fn step_rng(seed: u64, phase: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase | iteration as u64);
    rng
}

fn draw(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n >= k {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

fn draw_items(rng: &mut ChaCha8Rng, pool: &[Item], k: usize) -> Vec<Item> {
    draw(rng, pool.len(), k)
        .into_iter()
        .map(|i| {
            let fx = rng.random_bool(0.5);
            let fy = rng.random_bool(0.5);
            pool[i].flipped(fx, fy)
        })
        .collect()
}

/// Stacks single-channel grids into a `B×1×H×W` tensor.
pub fn grid_batch(grids: &[&Grid<f64>]) -> Tensor {
    let (w, h) = grids[0].dims();
    let mut data = Vec::with_capacity(grids.len() * w * h);
    for g in grids {
        data.extend_from_slice(g.data());
    }
    Tensor::new(&[grids.len(), 1, h, w], data).expect("uniform grids")
}

fn class_vec(grids: &[&Grid<u8>]) -> Vec<usize> {
    grids
        .iter()
        .flat_map(|g| g.data().iter().map(|&c| c as usize))
        .collect()
}

fn sgd_on_graph(
    params: &mut ModelParams<Tensor>,
    vars: &ModelParams<crate::ndnet::Var>,
    g: &Graph,
    lr: f64,
) {
    for (p, v) in params.tensors_mut().into_iter().zip(vars.tensors()) {
        if let Some(grad) = g.grad(*v) {
            p.data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(w, d)| *w -= lr * d);
        }
    }
}

/// `teacher ← γ·teacher + (1 − γ)·student`, elementwise.
pub fn ema_update(teacher: &mut ModelParams<Tensor>, student: &ModelParams<Tensor>, gamma: f64) {
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        t.data_mut()
            .iter_mut()
            .zip(s.data())
            .for_each(|(t, s)| *t = gamma * *t + (1.0 - gamma) * s);
    }
}

fn pretrain_step(
    params: &mut ModelParams<Tensor>,
    data: &Prepared,
    model: &UNetConfig,
    cfg: &TrainerConfig,
    iteration: usize,
) -> Result<f64, TrainError> {
    let mut rng = step_rng(cfg.seed, PRETRAIN_STREAM, iteration);
    let xs = draw_items(&mut rng, &data.labeled, cfg.batch_size);
    let mut g = Graph::new();
    let vars = params.map(|t| g.param(t));
    let supervised = |g: &mut Graph, images: Vec<&Grid<f64>>, labels: Vec<&Grid<u8>>| {
        let x = g.constant(grid_batch(&images));
        let out = forward(g, model, &vars, &x, false)?;
        let target = ClassTarget {
            classes: class_vec(&labels),
            mask: None,
        };
        Ok::<_, TrainError>(dice_ce_loss(g, &out.logits, &target)?)
    };
    let direct = supervised(
        &mut g,
        xs.iter().map(|i| &i.image).collect(),
        xs.iter()
            .map(|i| i.label.as_ref().expect("labeled"))
            .collect(),
    )?;
    let mut ids: Vec<String> = xs.iter().map(|i| i.id.clone()).collect();
    let loss = if cfg.gazemix {
        let bgs = draw_items(&mut rng, &data.labeled, cfg.batch_size);
        let mixes = xs
            .iter()
            .zip(&bgs)
            .map(|(f, b)| mix(&f.as_mix_input(), &b.as_mix_input(), f.rect, b.rect))
            .collect::<Result<Vec<_>, _>>()?;
        ids.extend(bgs.iter().map(|i| i.id.clone()));
        let mixed = supervised(
            &mut g,
            mixes.iter().map(|m| &m.image).collect(),
            mixes
                .iter()
                .map(|m| &m.supervision.as_ref().expect("labeled fg").label)
                .collect(),
        )?;
        let sum = g.add(&direct, &mixed)?;
        g.scale(&sum, 0.5)
    } else {
        direct
    };
    let value = g.get(loss).item().expect("scalar loss");
    if !value.is_finite() {
        return Err(TrainError::NonFinite {
            phase: "pretrain",
            iteration,
            batch_ids: ids,
        });
    }
    g.backward(loss)?;
    sgd_on_graph(params, &vars, &g, cfg.learning_rate);
    Ok(value)
}

/// Supervised fit of a fresh network on the labeled split. Returns the
/// parameters and the loss of every iteration.
pub fn pretrain_teacher(
    data: &Prepared,
    model: &UNetConfig,
    cfg: &TrainerConfig,
) -> Result<(ModelParams<Tensor>, Vec<f64>), TrainError> {
    cfg.validate()?;
    if data.labeled.len() < 2 {
        return Err(TrainError::InsufficientLabeledData {
            need: 2,
            have: data.labeled.len(),
        });
    }
    let mut params = init_params(model, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.pretrain_iterations);
    for it in 1..=cfg.pretrain_iterations {
        losses.push(pretrain_step(&mut params, data, model, cfg, it)?);
    }
    Ok((params, losses))
}

/// Inputs and targets of one training iteration, pseudo-labels included.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images_l: Tensor,
    pub heat_l: Tensor,
    pub target_l: ClassTarget,
    pub images_u: Tensor,
    pub heat_u: Tensor,
    pub target_u: ClassTarget,
}

fn pseudo_labels(
    teacher: &ModelParams<Tensor>,
    model: &UNetConfig,
    images: &Tensor,
) -> Result<Vec<usize>, TrainError> {
    let out = predict(model, teacher, images.clone(), false)?;
    Ok(argmax_classes(&out.logits)?)
}

/// Draws the batches for `iteration` and labels them with `teacher`.
pub fn sample_batch(
    teacher: &ModelParams<Tensor>,
    data: &Prepared,
    model: &UNetConfig,
    cfg: &TrainerConfig,
    iteration: usize,
) -> Result<Batch, TrainError> {
    if data.labeled.is_empty() {
        return Err(TrainError::EmptyBatch("labeled split is empty".into()));
    }
    if data.unlabeled.len() < 2 {
        return Err(TrainError::EmptyBatch(
            "unlabeled split needs at least 2 samples".into(),
        ));
    }
    let b = cfg.batch_size;
    let mut rng = step_rng(cfg.seed, TRAIN_STREAM, iteration);
    let xl = draw_items(&mut rng, &data.labeled, b);
    let xbu = draw_items(&mut rng, &data.unlabeled, b);
    let xfu = draw_items(&mut rng, &data.unlabeled, b);
    let mut ids: Vec<String> = xl.iter().chain(&xbu).map(|i| i.id.clone()).collect();

    if !cfg.gazemix {
        let images_u = grid_batch(&xbu.iter().map(|i| &i.image).collect::<Vec<_>>());
        let target_u = ClassTarget {
            classes: pseudo_labels(teacher, model, &images_u)?,
            mask: None,
        };
        return Ok(Batch {
            ids,
            images_l: grid_batch(&xl.iter().map(|i| &i.image).collect::<Vec<_>>()),
            heat_l: grid_batch(&xl.iter().map(|i| &i.heatmap).collect::<Vec<_>>()),
            target_l: ClassTarget {
                classes: class_vec(
                    &xl.iter()
                        .map(|i| i.label.as_ref().expect("labeled"))
                        .collect::<Vec<_>>(),
                ),
                mask: None,
            },
            images_u,
            heat_u: grid_batch(&xbu.iter().map(|i| &i.heatmap).collect::<Vec<_>>()),
            target_u,
        });
    }

    ids.extend(xfu.iter().map(|i| i.id.clone()));
    let mix_l = xl
        .iter()
        .zip(&xbu)
        .map(|(f, bg)| mix(&f.as_mix_input(), &bg.as_mix_input(), f.rect, bg.rect))
        .collect::<Result<Vec<_>, _>>()?;
    let mix_u = xfu
        .iter()
        .zip(&xbu)
        .map(|(f, bg)| mix(&f.as_mix_input(), &bg.as_mix_input(), f.rect, bg.rect))
        .collect::<Result<Vec<_>, _>>()?;
    let images_l = grid_batch(&mix_l.iter().map(|m| &m.image).collect::<Vec<_>>());
    let images_u = grid_batch(&mix_u.iter().map(|m| &m.image).collect::<Vec<_>>());
    // ground truth inside the pasted rectangle, teacher's guess around it
    let mut classes_l = pseudo_labels(teacher, model, &images_l)?;
    let (w, h) = data.dims;
    for (k, m) in mix_l.iter().enumerate() {
        let sup = m.supervision.as_ref().expect("labeled fg");
        for y in sup.rect.y0..sup.rect.y1 {
            for x in sup.rect.x0..sup.rect.x1 {
                classes_l[k * w * h + y * w + x] = sup.label.at(x, y) as usize;
            }
        }
    }
    let target_u = ClassTarget {
        classes: pseudo_labels(teacher, model, &images_u)?,
        mask: None,
    };
    Ok(Batch {
        ids,
        images_l,
        heat_l: grid_batch(&mix_l.iter().map(|m| &m.heatmap).collect::<Vec<_>>()),
        target_l: ClassTarget {
            classes: classes_l,
            mask: None,
        },
        images_u,
        heat_u: grid_batch(&mix_u.iter().map(|m| &m.heatmap).collect::<Vec<_>>()),
        target_u,
    })
}

/// Student loss on `batch`; with `lr` set, also applies one SGD step.
pub fn batch_loss(
    student: &mut ModelParams<Tensor>,
    batch: &Batch,
    model: &UNetConfig,
    cfg: &TrainerConfig,
    lr: Option<f64>,
) -> Result<LossReport, TrainError> {
    let mut g = Graph::new();
    let vars = student.map(|t| g.param(t));
    let xl = g.constant(batch.images_l.clone());
    let xu = g.constant(batch.images_u.clone());
    let out_l = forward(&mut g, model, &vars, &xl, cfg.mgp)?;
    let out_u = forward(&mut g, model, &vars, &xu, cfg.mgp)?;
    let l_gt = dice_ce_loss(&mut g, &out_l.logits, &batch.target_l)?;
    let l_pse = dice_ce_loss(&mut g, &out_u.logits, &batch.target_u)?;
    let l_gaze = match (&out_l.g_net, &out_u.g_net) {
        (Some(gl), Some(gu)) => {
            let hl = g.constant(batch.heat_l.clone());
            let hu = g.constant(batch.heat_u.clone());
            let a = gaze_loss(&mut g, gl, &hl)?;
            let b = gaze_loss(&mut g, gu, &hu)?;
            let sum = g.add(&a, &b)?;
            Some(g.scale(&sum, 0.5))
        }
        _ => None,
    };
    let lambda = cfg.effective_lambda();
    let total = total_loss_node(&mut g, &l_gt, &l_pse, l_gaze.as_ref(), lambda)?;
    let scalar = |v| g.get(v).item().expect("scalar loss");
    let report = total_loss(
        scalar(l_gt),
        scalar(l_pse),
        l_gaze.map(scalar).unwrap_or(0.0),
        lambda,
    );
    debug_assert_eq!(report.l_all, scalar(total));
    if let Some(lr) = lr {
        if report.is_finite() {
            g.backward(total)?;
            sgd_on_graph(student, &vars, &g, lr);
        }
    }
    Ok(report)
}

/// One iteration: sample, update the student by SGD, then move the teacher.
pub fn train_step(
    state: &mut TrainerState,
    data: &Prepared,
    model: &UNetConfig,
    cfg: &TrainerConfig,
) -> Result<LossReport, TrainError> {
    let iteration = state.iteration + 1;
    let batch = sample_batch(&state.teacher, data, model, cfg, iteration)?;
    let report = batch_loss(
        &mut state.student,
        &batch,
        model,
        cfg,
        Some(cfg.learning_rate),
    )?;
    if !report.is_finite() {
        return Err(TrainError::NonFinite {
            phase: "train",
            iteration,
            batch_ids: batch.ids,
        });
    }
    ema_update(&mut state.teacher, &state.student, cfg.ema_decay);
    state.iteration = iteration;
    Ok(report)
}

/// Class predictions of `params` for each item, as grids.
pub fn predict_items(
    params: &ModelParams<Tensor>,
    model: &UNetConfig,
    items: &[Item],
) -> Result<Vec<Grid<u8>>, TrainError> {
    predict_grids(
        params,
        model,
        &items.iter().map(|i| &i.image).collect::<Vec<_>>(),
    )
}

/// Class predictions for same-sized images, evaluated in chunks.
pub fn predict_grids(
    params: &ModelParams<Tensor>,
    model: &UNetConfig,
    images: &[&Grid<f64>],
) -> Result<Vec<Grid<u8>>, TrainError> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let logits = predict(model, params, grid_batch(chunk), false)?.logits;
        let classes = argmax_classes(&logits)?;
        let (w, h) = chunk[0].dims();
        for c in classes.chunks(w * h) {
            out.push(Grid::from_vec(w, h, c.iter().map(|&k| k as u8).collect()).expect("dims"));
        }
    }
    Ok(out)
}

/// Macro foreground Dice of `params` over labeled `items`.
pub fn validation_dice(
    params: &ModelParams<Tensor>,
    model: &UNetConfig,
    items: &[Item],
) -> Result<Option<f64>, TrainError> {
    let labeled: Vec<Item> = items
        .iter()
        .filter(|i| i.label.is_some())
        .cloned()
        .collect();
    if labeled.is_empty() {
        return Ok(None);
    }
    let preds = predict_items(params, model, &labeled)?;
    let reports = preds
        .iter()
        .zip(&labeled)
        .map(|(p, i)| evaluate(p, i.label.as_ref().expect("filtered"), model.num_classes))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(&reports).dice)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: ModelParams<Tensor>,
    pub teacher: ModelParams<Tensor>,
    pub pretrain_losses: Vec<f64>,
    pub history: Vec<LogRecord>,
    /// Validation Dice right after pre-training.
    pub initial_val_dice: Option<f64>,
    pub final_val_dice: Option<f64>,
}

/// Where [`train`] writes its log and checkpoints.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
}

impl RunOutput<'_> {
    fn checkpoint(
        &self,
        model: &UNetConfig,
        iteration: usize,
        state: &TrainerState,
    ) -> Result<(), TrainError> {
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir)?;
        for (role, name, params) in [
            (Role::Student, "student", &state.student),
            (Role::Teacher, "teacher", &state.teacher),
        ] {
            let path = dir.join(format!("{name}_{iteration:06}.ckpt"));
            save_checkpoint(&path, model, iteration, role, params)?;
        }
        Ok(())
    }
}

/// Pre-trains the teacher, then runs the semi-supervised loop.
pub fn train(
    data: &Prepared,
    model: &UNetConfig,
    cfg: &TrainerConfig,
    out: Option<&RunOutput<'_>>,
) -> Result<TrainOutcome, TrainError> {
    let (teacher, losses) = pretrain_teacher(data, model, cfg)?;
    train_from(data, model, cfg, teacher, losses, out)
}

/// The semi-supervised loop starting from an already pre-trained teacher.
pub fn train_from(
    data: &Prepared,
    model: &UNetConfig,
    cfg: &TrainerConfig,
    teacher: ModelParams<Tensor>,
    pretrain_losses: Vec<f64>,
    out: Option<&RunOutput<'_>>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(o.dir)?;
            if !pretrain_losses.is_empty() {
                let mut text = String::new();
                for (i, l) in pretrain_losses.iter().enumerate() {
                    text.push_str(&format!(
                        "{{\"iter\":{},\"loss\":{}}}\n",
                        i + 1,
                        json_f64(*l)
                    ));
                }
                fs::write(o.dir.join("pretrain_log.jsonl"), text)?;
            }
            Some(fs::File::create(o.dir.join("train_log.jsonl"))?)
        }
        None => None,
    };
    let mut emit = |rec: &LogRecord| -> Result<(), TrainError> {
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(rec).expect("record serialises");
            writeln!(f, "{line}")?;
        }
        Ok(())
    };

    let mut state = TrainerState::new(teacher);
    let initial = validation_dice(&state.teacher, model, &data.validation)?;
    let first = LogRecord {
        iter: 0,
        l_gaze: None,
        l_gt: None,
        l_pse: None,
        l_seg: None,
        l_all: None,
        val_dice: initial,
    };
    emit(&first)?;
    state.history.push(first);
    let mut last_val = initial;
    for it in 1..=cfg.iterations {
        let report = train_step(&mut state, data, model, cfg)?;
        let validate = it == cfg.iterations || (cfg.val_every > 0 && it % cfg.val_every == 0);
        let val = if validate {
            let v = validation_dice(&state.teacher, model, &data.validation)?;
            last_val = v;
            v
        } else {
            None
        };
        let rec = LogRecord::from_report(it, &report, val);
        emit(&rec)?;
        state.history.push(rec);
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != cfg.iterations {
                o.checkpoint(model, it, &state)?;
            }
        }
    }
    if let Some(o) = out {
        o.checkpoint(model, state.iteration, &state)?;
    }
    Ok(TrainOutcome {
        student: state.student,
        teacher: state.teacher,
        pretrain_losses,
        history: state.history,
        initial_val_dice: initial,
        final_val_dice: last_val,
    })
}

fn json_f64(v: f64) -> String {
    serde_json::to_string(&v).expect("f64 serialises")
}
