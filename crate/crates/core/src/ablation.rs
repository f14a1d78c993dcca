//! Component ablation and gaze-weight sweep over several seeds.
//!
//! The perception head is a side branch: with a zero gaze weight it never
//! touches the segmentation path, so runs that differ only in whether that
//! idle branch is computed produce identical networks. Such runs are trained
//! once and shared between the rows that need them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::metrics::{aggregate, evaluate, MacroMetrics};
use crate::model::ModelParams;
use crate::ndnet::Tensor;
use crate::synth::generate_world;
use crate::trainer::{
    predict_items, prepare, pretrain_teacher, train_from, Prepared, TrainError, TrainerConfig,
};

/// The six component configurations, from plain mean teacher to the full
/// method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Variant {
    Baseline,
    GazeMix,
    Mgp,
    MgpGazeLoss,
    GazeMixMgp,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::GazeMix,
        Variant::Mgp,
        Variant::MgpGazeLoss,
        Variant::GazeMixMgp,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GazeMix => "+GazeMix",
            Variant::Mgp => "+MGP",
            Variant::MgpGazeLoss => "+MGP+L_gaze",
            Variant::GazeMixMgp => "+GazeMix+MGP",
            Variant::Full => "+GazeMix+MGP+L_gaze",
        }
    }

    /// `(gazemix, mgp, gaze_loss)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::GazeMix => (true, false, false),
            Variant::Mgp => (false, true, false),
            Variant::MgpGazeLoss => (false, true, true),
            Variant::GazeMixMgp => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }

    pub fn apply(self, train: &TrainerConfig) -> TrainerConfig {
        let (gazemix, mgp, gaze_loss) = self.flags();
        TrainerConfig {
            gazemix,
            mgp,
            gaze_loss,
            ..train.clone()
        }
    }
}

/// What actually shapes the trained network: mixing on/off and the applied
/// gaze weight (bit pattern, so it can key a map).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    seed: u64,
    gazemix: bool,
    lambda_bits: u64,
}

impl RunKey {
    fn of(seed: u64, cfg: &TrainerConfig) -> Self {
        Self {
            seed,
            gazemix: cfg.gazemix,
            lambda_bits: cfg.effective_lambda().to_bits(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub gazemix: bool,
    pub lambda: f64,
    pub initial_val_dice: Option<f64>,
    pub metrics: MacroMetrics,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowSummary {
    pub config: String,
    pub per_seed_dice: Vec<Option<f64>>,
    pub mean: MacroMetrics,
}

/// One directional comparison `lhs > rhs` (or `>=`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendCheck {
    pub claim: String,
    pub gap: f64,
    pub holds: bool,
    /// Holds, but by less than one Dice point.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowSummary>,
    pub lambda_sweep: Vec<RowSummary>,
    pub lambdas: Vec<f64>,
    pub trend: Vec<TrendCheck>,
    pub lambda_trend: Option<TrendCheck>,
    pub runs: Vec<RunResult>,
    pub trained_runs: usize,
}

impl AblationReport {
    pub fn row_dice(&self, v: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.config == v.label())
            .and_then(|r| r.mean.dice)
    }

    /// `config,dice,jaccard,hd95,asd` with one line per variant.
    pub fn summary_csv(&self) -> String {
        csv_rows(
            "config",
            self.rows.iter().map(|r| (r.config.clone(), &r.mean)),
        )
    }

    /// `lambda,dice,jaccard,hd95,asd`.
    pub fn lambda_csv(&self) -> String {
        csv_rows(
            "lambda",
            self.lambdas
                .iter()
                .zip(&self.lambda_sweep)
                .map(|(l, r)| (format!("{l}"), &r.mean)),
        )
    }

    /// Human-readable comparison table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>8} {:>8} {:>8}",
            "config", "dice", "jaccard", "hd95", "asd"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>8} {:>8} {:>8} {:>8}",
                r.config,
                fmt(r.mean.dice),
                fmt(r.mean.jaccard),
                fmt(r.mean.hd95),
                fmt(r.mean.asd)
            );
        }
        for t in self.trend.iter().chain(&self.lambda_trend) {
            let status = match (t.holds, t.flagged) {
                (false, _) => "VIOLATED",
                (true, true) => "holds (<1 pt, flagged)",
                (true, false) => "holds",
            };
            let _ = writeln!(s, "{}: gap {:+.4} {status}", t.claim, t.gap);
        }
        s
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn csv_rows<'a>(head: &str, rows: impl Iterator<Item = (String, &'a MacroMetrics)>) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
    let mut s = format!("{head},dice,jaccard,hd95,asd\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{},{}",
            cell(m.dice),
            cell(m.jaccard),
            cell(m.hd95),
            cell(m.asd)
        );
    }
    s
}

/// Validation metrics of `params`, pooled over samples then classes.
pub fn score(
    params: &ModelParams<Tensor>,
    cfg: &RunConfig,
    data: &Prepared,
) -> Result<MacroMetrics, TrainError> {
    let preds = predict_items(params, &cfg.model, &data.validation)?;
    let reports = preds
        .iter()
        .zip(&data.validation)
        .map(|(p, i)| {
            let gt = i.label.as_ref().expect("validation is labeled");
            evaluate(p, gt, cfg.model.num_classes)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(&reports))
}

fn mean_metrics<'a>(items: impl Iterator<Item = &'a MacroMetrics>) -> MacroMetrics {
    let items: Vec<&MacroMetrics> = items.collect();
    let avg = |f: fn(&MacroMetrics) -> Option<f64>| {
        let v: Vec<f64> = items.iter().filter_map(|m| f(m)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    MacroMetrics {
        dice: avg(|m| m.dice),
        jaccard: avg(|m| m.jaccard),
        hd95: avg(|m| m.hd95),
        asd: avg(|m| m.asd),
    }
}

fn check(claim: String, lhs: f64, rhs: f64, strict: bool) -> TrendCheck {
    let gap = lhs - rhs;
    let holds = if strict { gap > 0.0 } else { gap >= 0.0 };
    TrendCheck {
        claim,
        gap,
        holds,
        flagged: holds && gap < 0.01,
    }
}

/// Expected ordering of the component rows.
pub fn trend_checks(dice: &BTreeMap<Variant, f64>) -> Vec<TrendCheck> {
    let d = |v: Variant| dice[&v];
    let mut out = vec![
        check(
            "baseline < +GazeMix".into(),
            d(Variant::GazeMix),
            d(Variant::Baseline),
            true,
        ),
        check(
            "baseline < +MGP+L_gaze".into(),
            d(Variant::MgpGazeLoss),
            d(Variant::Baseline),
            true,
        ),
    ];
    for v in Variant::ALL.into_iter().filter(|&v| v != Variant::Full) {
        out.push(check(
            format!("full >= {}", v.label()),
            d(Variant::Full),
            d(v),
            false,
        ));
    }
    out
}

/// Trains every distinct configuration for every seed and summarises the
/// component rows and the gaze-weight sweep. `progress` receives one line
/// per finished run.
pub fn run_ablation(
    cfg: &RunConfig,
    seeds: &[u64],
    lambdas: &[f64],
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport, TrainError> {
    let mut results: BTreeMap<RunKey, RunResult> = BTreeMap::new();
    let mut row_keys: BTreeMap<Variant, Vec<RunKey>> = BTreeMap::new();
    let mut sweep_keys: Vec<Vec<RunKey>> = vec![Vec::new(); lambdas.len()];
    for &seed in seeds {
        let mut c = cfg.clone();
        c.world.seed = seed;
        c.train.seed = seed;
        let ds = generate_world(&c.world, &c.gaze.simulation)?;
        let data = prepare(&ds, &c.gaze_prep())?;

        let mut jobs: Vec<TrainerConfig> = Vec::new();
        for v in Variant::ALL {
            let t = v.apply(&c.train);
            row_keys.entry(v).or_default().push(RunKey::of(seed, &t));
            jobs.push(t);
        }
        for (i, &lambda) in lambdas.iter().enumerate() {
            let t = TrainerConfig {
                lambda,
                ..Variant::Full.apply(&c.train)
            };
            sweep_keys[i].push(RunKey::of(seed, &t));
            jobs.push(t);
        }

        let mut pretrained: BTreeMap<bool, (ModelParams<Tensor>, Vec<f64>)> = BTreeMap::new();
        for t in jobs {
            let key = RunKey::of(seed, &t);
            if results.contains_key(&key) {
                continue;
            }
            let start = std::time::Instant::now();
            if let std::collections::btree_map::Entry::Vacant(e) = pretrained.entry(t.gazemix) {
                e.insert(pretrain_teacher(&data, &c.model, &t)?);
            }
            let (teacher, losses) = pretrained[&t.gazemix].clone();
            let out = train_from(&data, &c.model, &t, teacher, losses, None)?;
            let metrics = score(&out.teacher, &c, &data)?;
            let r = RunResult {
                seed,
                gazemix: t.gazemix,
                lambda: t.effective_lambda(),
                initial_val_dice: out.initial_val_dice,
                metrics,
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&format!(
                "seed {seed} gazemix={} lambda={}: dice {} ({:.0}s)",
                r.gazemix,
                r.lambda,
                fmt(r.metrics.dice),
                r.seconds
            ));
            results.insert(key, r);
        }
    }

    let summarise = |name: String, keys: &[RunKey]| RowSummary {
        config: name,
        per_seed_dice: keys.iter().map(|k| results[k].metrics.dice).collect(),
        mean: mean_metrics(keys.iter().map(|k| &results[k].metrics)),
    };
    let rows: Vec<RowSummary> = Variant::ALL
        .iter()
        .map(|v| summarise(v.label().to_string(), &row_keys[v]))
        .collect();
    let lambda_sweep: Vec<RowSummary> = lambdas
        .iter()
        .zip(&sweep_keys)
        .map(|(l, keys)| summarise(format!("lambda={l}"), keys))
        .collect();

    let dice: BTreeMap<Variant, f64> = Variant::ALL
        .iter()
        .zip(&rows)
        .map(|(&v, r)| (v, r.mean.dice.unwrap_or(0.0)))
        .collect();
    let trend = trend_checks(&dice);
    let lambda_dice = |l: f64| {
        lambdas
            .iter()
            .position(|&x| x == l)
            .and_then(|i| lambda_sweep[i].mean.dice)
    };
    let lambda_trend = match (lambda_dice(0.5), lambda_dice(0.0)) {
        (Some(half), Some(zero)) => Some(check("lambda=0.5 >= lambda=0".into(), half, zero, false)),
        _ => None,
    };
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
        lambda_sweep,
        lambdas: lambdas.to_vec(),
        trend,
        lambda_trend,
        trained_runs: results.len(),
        runs: results.into_values().collect(),
    })
}
