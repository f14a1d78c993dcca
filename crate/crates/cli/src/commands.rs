use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gazeseg::ablation::run_ablation;
use gazeseg::config::{EvalSplit, RunConfig};
use gazeseg::gaze::{
    classify_points, default_sigma, parse_trace_csv, render_heatmap, write_heatmap, FilterConfig,
    GazeHeatmap, CSV_HEADER,
};
use gazeseg::gazemix::{mix as gaze_mix, MixInput};
use gazeseg::grid::Grid;
use gazeseg::metrics::{aggregate, evaluate};
use gazeseg::model::{load_checkpoint, save_checkpoint, Role};
use gazeseg::plot::{lambda_chart, loss_curves};
use gazeseg::synth::{generate_world, load_dataset, save_dataset, write_f32_grid, Dataset};
use gazeseg::trainer::{
    predict_grids, prepare, prepare_item, pretrain_teacher, train as run_train, train_from, Item,
    LogRecord, RunOutput,
};
use serde_json::{json, Map, Value};

use crate::error::CliError;
use crate::provenance::{write_run_json, Inputs};
use crate::{
    AblationArgs, EvalArgs, FilterArgs, GenArgs, HeatmapArgs, MixArgs, PlotArgs, SplitArg,
    TrainArgs, TrainOverrides, WorldOverrides,
};

pub const SEED_ENV: &str = "GAZESEG_SEED";

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

/// Config file, then environment seed, then flags.
fn resolve(
    w: &WorldOverrides,
    t: Option<&TrainOverrides>,
    inputs: &mut Inputs,
) -> Result<RunConfig, CliError> {
    let mut cfg = match &w.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            inputs.add(p)?;
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = w.seed.or(env_seed()?) {
        cfg.world.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(n) = w.samples {
        cfg.world.samples = n;
    }
    if let Some(r) = w.ratio {
        cfg.world.labeling_ratio = r;
    }
    if let Some(t) = t {
        let c = &mut cfg.train;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = t.$flag { c.$field = v; })*
            };
        }
        set!(
            iterations => iterations,
            pretrain_iterations => pretrain_iterations,
            batch_size => batch_size,
            lr => learning_rate,
            lambda => lambda,
            ema_decay => ema_decay,
            val_every => val_every,
            checkpoint_every => checkpoint_every
        );
        c.gazemix &= !t.no_gazemix;
        c.mgp &= !t.no_mgp;
        c.gaze_loss &= !t.no_gaze_loss;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `data` (adopting its world description) or generates the world.
fn dataset(
    cfg: &mut RunConfig,
    data: Option<&Path>,
    inputs: &mut Inputs,
) -> Result<Dataset, CliError> {
    match data {
        Some(dir) => {
            let ds = load_dataset(dir).map_err(|e| CliError::data(dir.display(), e))?;
            inputs.add(dir)?;
            cfg.world = ds.manifest.world.clone();
            cfg.gaze.simulation = ds.manifest.gaze.clone();
            cfg.validate()?;
            Ok(ds)
        }
        None => Ok(generate_world(&cfg.world, &cfg.gaze.simulation)?),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::data(path.display(), e))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json") + "\n"
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let cfg = resolve(&a.world, None, &mut inputs)?;
    let ds = generate_world(&cfg.world, &cfg.gaze.simulation)?;
    save_dataset(&a.out, &ds)?;
    write_run_json(&a.out, "gen", &cfg, &inputs, Map::new())?;
    println!(
        "wrote {} labeled, {} unlabeled, {} validation samples to {}",
        ds.labeled.len(),
        ds.unlabeled.len(),
        ds.validation.len(),
        a.out.display()
    );
    Ok(())
}

pub fn filter_gaze(a: FilterArgs) -> Result<(), CliError> {
    let trace = parse_trace_csv(&a.input, (a.width, a.height))
        .map_err(|e| CliError::data(a.input.display(), e))?;
    let classified = classify_points(&trace, &FilterConfig { v_th: a.v_th })?;
    let fixations = classified.fixations();
    let mut text = format!("{CSV_HEADER}\n");
    for p in &fixations {
        let _ = writeln!(text, "{},{},{}", p.t_ms, p.x, p.y);
    }
    write(&a.output, &text)?;
    println!(
        "{} of {} points are fixations",
        fixations.len(),
        trace.len()
    );
    Ok(())
}

pub fn heatmap(a: HeatmapArgs) -> Result<(), CliError> {
    let trace = parse_trace_csv(&a.input, (a.width, a.height))
        .map_err(|e| CliError::data(a.input.display(), e))?;
    let sigma = a.sigma.unwrap_or_else(|| default_sigma(a.width));
    let map = render_heatmap(trace.points(), (a.width, a.height), sigma)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_heatmap(&a.output, &map)?;
    Ok(())
}

pub fn mix(a: MixArgs) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let mut cfg = match &a.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            inputs.add(p)?;
            cfg
        }
        None => RunConfig::default(),
    };
    let ds = dataset(&mut cfg, Some(&a.data), &mut inputs)?;
    let prep = cfg.gaze_prep();
    let find = |id: &str| {
        ds.labeled
            .iter()
            .chain(&ds.unlabeled)
            .chain(&ds.validation)
            .find(|s| s.id == id)
            .ok_or_else(|| CliError::Data(format!("no sample {id:?} in {}", a.data.display())))
    };
    let fg = prepare_item(find(&a.fg)?, &prep)?;
    let bg = prepare_item(find(&a.bg)?, &prep)?;
    fn side(i: &Item) -> MixInput<'_> {
        MixInput {
            id: &i.id,
            image: &i.image,
            heatmap: &i.heatmap,
            label: i.label.as_ref(),
        }
    }
    let m = gaze_mix(&side(&fg), &side(&bg), fg.rect, bg.rect)?;
    fs::create_dir_all(&a.out)?;
    write_f32_grid(&a.out.join("image.f32"), &m.image)?;
    let (w, _) = m.image.dims();
    write_heatmap(
        &a.out.join("heatmap"),
        &GazeHeatmap {
            values: m.heatmap.clone(),
            sigma_px: prep.sigma_px.unwrap_or_else(|| default_sigma(w)),
        },
    )?;
    if let Some(s) = &m.supervision {
        fs::write(a.out.join("label.u8"), s.label.data())?;
    }
    let meta = json!({
        "dims": m.image.dims(),
        "fg": a.fg,
        "bg": a.bg,
        "fg_rect": fg.rect,
        "paste_rect": m.paste_rect,
        "labeled": m.supervision.is_some(),
        "full_field": m.supervision.as_ref().is_some_and(|s| s.full_field),
    });
    write(&a.out.join("mix.json"), &pretty(&meta))?;
    write_run_json(&a.out, "mix", &cfg, &inputs, Map::new())?;
    Ok(())
}

pub fn pretrain(a: TrainArgs) -> Result<(), CliError> {
    if a.teacher.is_some() {
        return Err(CliError::Config("--teacher only applies to `train`".into()));
    }
    let mut inputs = Inputs::default();
    let mut cfg = resolve(&a.world, Some(&a.train), &mut inputs)?;
    let ds = dataset(&mut cfg, a.data.as_deref(), &mut inputs)?;
    let data = prepare(&ds, &cfg.gaze_prep())?;
    let (teacher, losses) = pretrain_teacher(&data, &cfg.model, &cfg.train)?;
    let mut log = String::new();
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(log, "{}", json!({"iter": i + 1, "loss": l}));
    }
    write(&a.out.join("pretrain_log.jsonl"), &log)?;
    let ckpt = a.out.join("checkpoints").join("teacher_pretrained.ckpt");
    fs::create_dir_all(ckpt.parent().expect("parent"))?;
    save_checkpoint(&ckpt, &cfg.model, 0, Role::Teacher, &teacher)?;
    write_run_json(&a.out, "pretrain", &cfg, &inputs, Map::new())?;
    match (losses.first(), losses.last()) {
        (Some(f), Some(l)) => println!(
            "pretrain loss {f:.4} -> {l:.4}; teacher at {}",
            ckpt.display()
        ),
        _ => println!("no pretraining iterations; teacher at {}", ckpt.display()),
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let mut cfg = resolve(&a.world, Some(&a.train), &mut inputs)?;
    let ds = dataset(&mut cfg, a.data.as_deref(), &mut inputs)?;
    let data = prepare(&ds, &cfg.gaze_prep())?;
    let out = RunOutput { dir: &a.out };
    let outcome = match &a.teacher {
        Some(path) => {
            inputs.add(path)?;
            let (header, teacher) =
                load_checkpoint(path).map_err(|e| CliError::data(path.display(), e))?;
            if header.config != cfg.model {
                return Err(CliError::Config(format!(
                    "{} was saved with a different model section",
                    path.display()
                )));
            }
            train_from(
                &data,
                &cfg.model,
                &cfg.train,
                teacher,
                Vec::new(),
                Some(&out),
            )?
        }
        None => run_train(&data, &cfg.model, &cfg.train, Some(&out))?,
    };
    let summary = json!({
        "initial_val_dice": outcome.initial_val_dice,
        "final_val_dice": outcome.final_val_dice,
        "iterations": cfg.train.iterations,
    });
    write(&a.out.join("summary.json"), &pretty(&summary))?;
    write_run_json(&a.out, "train", &cfg, &inputs, Map::new())?;
    println!("{}", serde_json::to_string(&summary).expect("json"));
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let mut cfg = resolve(&a.world, None, &mut inputs)?;
    if let Some(s) = a.split {
        cfg.eval.split = match s {
            SplitArg::Validation => EvalSplit::Validation,
            SplitArg::Unlabeled => EvalSplit::Unlabeled,
        };
    }
    inputs.add(&a.checkpoint)?;
    let (header, params) =
        load_checkpoint(&a.checkpoint).map_err(|e| CliError::data(a.checkpoint.display(), e))?;
    cfg.model = header.config.clone();
    let ds = dataset(&mut cfg, a.data.as_deref(), &mut inputs)?;
    let (ids, images, labels): (Vec<&str>, Vec<&Grid<f64>>, Vec<&Grid<u8>>) = match cfg.eval.split {
        EvalSplit::Validation => ds
            .validation
            .iter()
            .filter_map(|s| s.label.as_ref().map(|l| (s.id.as_str(), &s.image, l)))
            .collect(),
        EvalSplit::Unlabeled => ds
            .unlabeled
            .iter()
            .zip(&ds.hidden_labels)
            .map(|(s, l)| (s.id.as_str(), &s.image, l))
            .collect(),
    };
    if ids.is_empty() {
        return Err(CliError::Data("the chosen split is empty".into()));
    }
    let preds = predict_grids(&params, &header.config, &images)?;
    let mut csv = String::from("sample_id,class,dice,jaccard,hd95,asd\n");
    let mut reports = Vec::with_capacity(ids.len());
    for ((id, pred), gt) in ids.iter().zip(&preds).zip(&labels) {
        let r = evaluate(pred, gt, header.config.num_classes)?;
        for (class, m) in &r.per_class {
            let _ = writeln!(
                csv,
                "{id},{class},{:.6},{:.6},{},{}",
                m.dice,
                m.jaccard,
                cell(m.hd95),
                cell(m.asd)
            );
        }
        reports.push(r);
    }
    let summary = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "iteration": header.iteration,
        "role": header.role,
        "split": cfg.eval.split,
        "samples": ids.len(),
        "macro": aggregate(&reports),
    });
    write(&a.out.join("per_sample.csv"), &csv)?;
    write(&a.out.join("macro.json"), &pretty(&summary))?;
    write_run_json(&a.out, "eval", &cfg, &inputs, Map::new())?;
    println!(
        "{}",
        serde_json::to_string(&summary["macro"]).expect("json")
    );
    Ok(())
}

pub fn ablation(a: AblationArgs) -> Result<(), CliError> {
    if a.seeds.is_empty() {
        return Err(CliError::Config("--seeds is empty".into()));
    }
    let mut inputs = Inputs::default();
    let cfg = resolve(&a.world, Some(&a.train), &mut inputs)?;
    let report = run_ablation(&cfg, &a.seeds, &a.lambdas, &mut |line| eprintln!("{line}"))?;
    write(&a.out.join("ablation_summary.csv"), &report.summary_csv())?;
    write(&a.out.join("lambda_sweep.csv"), &report.lambda_csv())?;
    write(
        &a.out.join("ablation.json"),
        &pretty(&serde_json::to_value(&report).expect("json")),
    )?;
    let table = report.table();
    write(&a.out.join("ablation_table.txt"), &table)?;
    let points: Vec<(f64, f64)> = report
        .lambdas
        .iter()
        .zip(&report.lambda_sweep)
        .filter_map(|(l, r)| r.mean.dice.map(|d| (*l, d)))
        .collect();
    write(
        &a.out.join("lambda_dice.svg"),
        &lambda_chart("dice", &points),
    )?;
    let mut extra = Map::new();
    extra.insert("seeds".into(), json!(a.seeds));
    extra.insert("lambdas".into(), json!(a.lambdas));
    write_run_json(&a.out, "ablation", &cfg, &inputs, extra)?;
    print!("{table}");
    Ok(())
}

/// `lambda,dice,...` rows as `(lambda, dice)` points.
fn parse_sweep(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    if !header.starts_with("lambda,dice") {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut f = line.split(',');
        let parse = |s: Option<&str>| s.and_then(|s| s.trim().parse::<f64>().ok());
        match (parse(f.next()), parse(f.next())) {
            (Some(l), Some(d)) => out.push((l, d)),
            (Some(_), None) => {}
            _ => return Err(format!("malformed line {}", i + 2)),
        }
    }
    Ok(out)
}

pub fn plot(a: PlotArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.input).map_err(|e| CliError::data(a.input.display(), e))?;
    let svg = match a.input.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => {
            let records = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<LogRecord>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::data(a.input.display(), e))?;
            loss_curves(&records)
        }
        Some("csv") => {
            let points = parse_sweep(&text).map_err(|e| CliError::data(a.input.display(), e))?;
            lambda_chart("dice", &points)
        }
        _ => {
            return Err(CliError::Data(format!(
                "{}: expected a .jsonl training log or a .csv sweep",
                a.input.display()
            )))
        }
    };
    write(&a.out, &svg)
}
