//! One function per acceptance property. Each returns a short summary on
//! success and the first violation otherwise.

use gazeseg::config::RunConfig;
use gazeseg::gaze::{classify_points, FilterConfig, GazeLabel, GazePoint, GazeTrace};
use gazeseg::gazemix::{mix, GazeRect, MixInput};
use gazeseg::grid::Grid;
use gazeseg::losses::{total_loss, total_loss_node};
use gazeseg::metrics::{dice_jaccard, surface_distances};
use gazeseg::model::{init_params, mgp, ConvParams, MgpParams, ModelParams, UNetConfig};
use gazeseg::ndnet::{Backend, ClassTarget, DiceCeSpec, Eval, Graph, Tensor};
use gazeseg::synth::generate_world;
use gazeseg::trainer::{prepare, train_step, Prepared, TrainerConfig, TrainerState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)+)),
        }
    };
}

pub fn gradients() -> Check {
    let start = std::time::Instant::now();
    let mut worst = ("", 0.0f64);
    let mut ops = 0;
    for seed in 0..20 {
        let suite = gradient_suite(seed);
        ops = suite.len();
        for (name, err) in suite {
            ensure!(
                err.is_finite() && err < 1e-3,
                "{name}, seed {seed}: relative error {err:e}"
            );
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "{ops} ops x 20 seeds, worst {:.2e} ({}), {secs:.1} s",
        worst.1, worst.0
    ))
}

fn raw_of(p: &MgpParams<Tensor>, c: usize, r: usize) -> MgpRaw {
    let v = |t: &Tensor| t.data().to_vec();
    let f = p.fuse.weight.data();
    MgpRaw {
        c,
        r,
        fc1: v(&p.fc1),
        fc2: v(&p.fc2),
        spatial: [
            (v(&p.spatial1.weight), p.spatial1.bias.data()[0]),
            (v(&p.spatial3.weight), p.spatial3.bias.data()[0]),
            (v(&p.spatial7.weight), p.spatial7.bias.data()[0]),
        ],
        fuse: ([f[0], f[1], f[2]], p.fuse.bias.data()[0]),
    }
}

pub fn mgp_matches_oracle() -> Check {
    let mut r = rng(0x6d67);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let red = [1, 2, 4][case % 3];
        let c = red * r.random_range(1..=3usize);
        let (h, w) = (r.random_range(3..10usize), r.random_range(3..10usize));
        let b = 2;
        let t = mgp_tensors(c, red, &mut r);
        let conv = |i: usize| ConvParams {
            weight: t[i].clone(),
            bias: t[i + 1].clone(),
        };
        let params = MgpParams {
            fc1: t[0].clone(),
            fc2: t[1].clone(),
            spatial1: conv(2),
            spatial3: conv(4),
            spatial7: conv(6),
            fuse: conv(8),
        };
        let feat = uniform(&[b, c, h, w], -2.0, 2.0, &mut r);
        let got = mgp(&mut Eval, &params, &feat).map_err(|e| e.to_string())?;
        ensure!(
            got.shape() == [b, 1, h, w],
            "case {case}: shape {:?}",
            got.shape()
        );
        let raw = raw_of(&params, c, red);
        for bi in 0..b {
            let img = &feat.data()[bi * c * h * w..(bi + 1) * c * h * w];
            let want = mgp_oracle(img, c, h, w, &raw);
            for (q, wv) in want.iter().enumerate() {
                let d = (got.data()[bi * h * w + q] - wv).abs();
                worst = worst.max(d);
                ensure!(
                    d <= 1e-9,
                    "case {case}, image {bi}, pixel {q}: off by {d:e}"
                );
            }
        }
    }
    Ok(format!("10 parameterizations, max abs diff {worst:.1e}"))
}

/// Trace of fixation clusters joined by saccade runs. A run leaves its
/// cluster with one slow step and then only hops fast, so cluster points
/// have two slow neighbours and every run point has a fast one.
pub fn labelled_trace(rng: &mut ChaCha8Rng, v_th: f64) -> (GazeTrace, Vec<GazeLabel>) {
    let (w, h) = (8192usize, 8192usize);
    let dt = 1000.0 / 60.0;
    let slow = v_th / 10.0 * dt / 1000.0;
    let fast = v_th * 10.0 * dt / 1000.0;
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    let mut cursor = (4096.0f64, 4096.0f64);
    let mut push = |p: (f64, f64), l: GazeLabel, pts: &mut Vec<GazePoint>| {
        let t = pts.len() as f64 * dt;
        pts.push(GazePoint::new(p.0, p.1, t));
        truth.push(l);
    };
    let wiggle = |c: (f64, f64), rng: &mut ChaCha8Rng, reach: f64| {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let d = rng.random_range(0.0..reach);
        (c.0 + d * a.cos(), c.1 + d * a.sin())
    };
    let clusters = rng.random_range(2..6);
    for k in 0..clusters {
        let n = rng.random_range(3..12);
        for _ in 0..n {
            cursor = wiggle(cursor, rng, slow);
            push(cursor, GazeLabel::Fixation, &mut pts);
        }
        if k + 1 == clusters {
            break;
        }
        cursor = wiggle(cursor, rng, slow);
        push(cursor, GazeLabel::Saccade, &mut pts);
        let hops = rng.random_range(1..4);
        for _ in 0..hops {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            cursor = (cursor.0 + fast * a.cos(), cursor.1 + fast * a.sin());
            push(cursor, GazeLabel::Saccade, &mut pts);
        }
    }
    let trace = GazeTrace::new(pts, (w, h)).expect("valid trace");
    (trace, truth)
}

fn random_trace(rng: &mut ChaCha8Rng) -> GazeTrace {
    let n = rng.random_range(2..60);
    let mut t = 0.0;
    let mut p = (32.0f64, 32.0f64);
    let pts = (0..n)
        .map(|_| {
            t += rng.random_range(5.0..30.0);
            p = (
                (p.0 + rng.random_range(-8.0..8.0)).clamp(0.0, 63.0),
                (p.1 + rng.random_range(-8.0..8.0)).clamp(0.0, 63.0),
            );
            GazePoint::new(p.0, p.1, t)
        })
        .collect();
    GazeTrace::new(pts, (64, 64)).expect("valid trace")
}

pub fn filter_is_exact_and_monotone() -> Check {
    let mut r = rng(0xf11);
    let mut points = 0;
    for case in 0..100 {
        let v_th = r.random_range(50.0..1000.0);
        let (trace, truth) = labelled_trace(&mut r, v_th);
        let got = classify_points(&trace, &FilterConfig { v_th }).map_err(|e| e.to_string())?;
        let labels = got.labels().expect("classified");
        for (i, (g, t)) in labels.iter().zip(&truth).enumerate() {
            ensure!(g == t, "trace {case}, point {i}: got {g:?}, expected {t:?}");
        }
        points += labels.len();
    }
    for case in 0..100 {
        let trace = random_trace(&mut r);
        let lo = r.random_range(10.0..800.0);
        let hi = lo + r.random_range(0.0..800.0);
        let a = classify_points(&trace, &FilterConfig { v_th: lo }).map_err(|e| e.to_string())?;
        let b = classify_points(&trace, &FilterConfig { v_th: hi }).map_err(|e| e.to_string())?;
        for (i, (la, lb)) in a
            .labels()
            .unwrap()
            .iter()
            .zip(b.labels().unwrap())
            .enumerate()
        {
            ensure!(
                !(*la == GazeLabel::Fixation && *lb == GazeLabel::Saccade),
                "trace {case}, point {i}: fixation at v_th {lo} became saccade at {hi}"
            );
        }
    }
    Ok(format!(
        "100 traces ({points} points) classified exactly, 100 monotone"
    ))
}

fn random_rect(r: &mut ChaCha8Rng, dims: (usize, usize)) -> GazeRect {
    let x0 = r.random_range(0..dims.0);
    let y0 = r.random_range(0..dims.1);
    GazeRect {
        x0,
        y0,
        x1: r.random_range(x0 + 1..=dims.0),
        y1: r.random_range(y0 + 1..=dims.1),
    }
}

fn random_field(r: &mut ChaCha8Rng, dims: (usize, usize)) -> Grid<f64> {
    Grid::from_fn(dims.0, dims.1, |_, _| r.random_range(-1.0..1.0))
}

fn random_classes(r: &mut ChaCha8Rng, dims: (usize, usize)) -> Grid<u8> {
    Grid::from_fn(dims.0, dims.1, |_, _| r.random_range(0..4))
}

fn near(n_in: usize, n_out: usize, o: usize) -> usize {
    let s = ((2 * o + 1) * n_in) / (2 * n_out);
    s.min(n_in - 1)
}

fn same_bits(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

pub fn gazemix_invariants() -> Check {
    let mut r = rng(0x313);
    for case in 0..100 {
        let dims = (r.random_range(4..24usize), r.random_range(4..24usize));
        let fg_img = random_field(&mut r, dims);
        let fg_heat = random_field(&mut r, dims);
        let fg_lab = random_classes(&mut r, dims);
        let bg_img = random_field(&mut r, dims);
        let bg_heat = random_field(&mut r, dims);
        let bg_lab = random_classes(&mut r, dims);
        let fg = MixInput {
            id: "f",
            image: &fg_img,
            heatmap: &fg_heat,
            label: Some(&fg_lab),
        };
        let bg = MixInput {
            id: "b",
            image: &bg_img,
            heatmap: &bg_heat,
            label: if case % 2 == 0 { Some(&bg_lab) } else { None },
        };
        let (fr, br) = (random_rect(&mut r, dims), random_rect(&mut r, dims));
        let m = mix(&fg, &bg, fr, br).map_err(|e| e.to_string())?;
        let sup = m.supervision.as_ref().ok_or("labeled fg lost its label")?;
        ensure!(
            m.paste_rect == br,
            "case {case}: paste rect {:?}",
            m.paste_rect
        );
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if br.contains(x, y) {
                    let sx = fr.x0 + near(fr.width(), br.width(), x - br.x0);
                    let sy = fr.y0 + near(fr.height(), br.height(), y - br.y0);
                    ensure!(
                        sup.label.at(x, y) == fg_lab.at(sx, sy),
                        "case {case}: label at ({x},{y}) is not fg ({sx},{sy})"
                    );
                } else {
                    ensure!(
                        same_bits(m.image.at(x, y), bg_img.at(x, y))
                            && same_bits(m.heatmap.at(x, y), bg_heat.at(x, y)),
                        "case {case}: background changed at ({x},{y})"
                    );
                    if let Some(bl) = bg.label {
                        ensure!(
                            sup.label.at(x, y) == bl.at(x, y),
                            "case {case}: background label changed at ({x},{y})"
                        );
                    }
                }
            }
        }
        for rect in [GazeRect::full(dims), fr] {
            let id = mix(&fg, &fg, rect, rect).map_err(|e| e.to_string())?;
            let same = id
                .image
                .data()
                .iter()
                .zip(fg_img.data())
                .chain(id.heatmap.data().iter().zip(fg_heat.data()))
                .all(|(a, b)| same_bits(*a, *b));
            ensure!(
                same,
                "case {case}: identity mix over {rect:?} changed pixels"
            );
            ensure!(
                id.supervision.as_ref().map(|s| &s.label) == Some(&fg_lab),
                "case {case}: identity mix changed the label"
            );
        }
    }

    let crop = [[1.0, 2.0], [3.0, 4.0]];
    let hand = [
        [1.0, 1.25, 1.75, 2.0],
        [1.5, 1.75, 2.25, 2.5],
        [2.5, 2.75, 3.25, 3.5],
        [3.0, 3.25, 3.75, 4.0],
    ];
    let fg_img = Grid::from_fn(8, 8, |x, y| {
        if (3..5).contains(&x) && (4..6).contains(&y) {
            crop[y - 4][x - 3]
        } else {
            -9.0
        }
    });
    let bg_img = Grid::filled(8, 8, 0.5);
    let flat = Grid::filled(8, 8, 0.0);
    let side = |img| MixInput {
        id: "s",
        image: img,
        heatmap: &flat,
        label: None,
    };
    let from = GazeRect {
        x0: 3,
        y0: 4,
        x1: 5,
        y1: 6,
    };
    let to = GazeRect {
        x0: 2,
        y0: 1,
        x1: 6,
        y1: 5,
    };
    let m = mix(&side(&fg_img), &side(&bg_img), from, to).map_err(|e| e.to_string())?;
    for (j, row) in hand.iter().enumerate() {
        for (i, want) in row.iter().enumerate() {
            let got = m.image.at(to.x0 + i, to.y0 + j);
            ensure!(
                (got - want).abs() <= 1e-12,
                "2x2 -> 4x4 at ({i},{j}): {got} vs {want}"
            );
        }
    }
    Ok("100 pairs bit-exact, 2x2 -> 4x4 bilinear matches".into())
}

pub fn loss_algebra() -> Check {
    let mut r = rng(0x1055);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (gt, pse, gaze) = (
            r.random_range(0.0..5.0),
            r.random_range(0.0..5.0),
            r.random_range(0.0..1.0),
        );
        let lambda = r.random_range(0.0..2.0);
        let rep = total_loss(gt, pse, gaze, lambda);
        let d1 = (rep.l_seg - (gt + pse) / 2.0).abs();
        let d2 = (rep.l_all - (rep.l_seg + lambda * gaze)).abs();
        let mut e = Eval;
        let node = total_loss_node(
            &mut e,
            &Tensor::scalar(gt),
            &Tensor::scalar(pse),
            Some(&Tensor::scalar(gaze)),
            lambda,
        )
        .map_err(|e| e.to_string())?;
        let d3 = (node.item().unwrap() - rep.l_all).abs();
        worst = worst.max(d1).max(d2).max(d3);
    }
    ensure!(worst <= 1e-12, "combination off by {worst:e}");

    let ce_only = DiceCeSpec {
        dice_weight: 0.0,
        ce_weight: 1.0,
        smooth: 1e-5,
    };
    let mut ce_worst = 0.0f64;
    for k in 2..=8usize {
        let (b, h, w) = (2, 3, 5);
        let logits = Tensor::full(&[b, k, h, w], r.random_range(-3.0..3.0));
        let target = ClassTarget {
            classes: (0..b * h * w).map(|_| r.random_range(0..k)).collect(),
            mask: None,
        };
        let mut g = Graph::new();
        let x = g.leaf(logits.clone(), true);
        let ce = g.dice_ce(&x, &target, ce_only).map_err(|e| e.to_string())?;
        let v = g.get(ce).item().unwrap();
        let v_eval = Eval
            .dice_ce(&logits, &target, ce_only)
            .map_err(|e| e.to_string())?
            .item()
            .unwrap();
        for got in [v, v_eval] {
            ce_worst = ce_worst.max((got - (k as f64).ln()).abs());
        }
    }
    ensure!(
        ce_worst <= 1e-10,
        "uniform cross-entropy off ln K by {ce_worst:e}"
    );
    Ok(format!(
        "combination max diff {worst:.1e}, uniform CE max diff {ce_worst:.1e}"
    ))
}

/// A small labeled/unlabeled world and a matching network for loop tests.
pub fn small_world(seed: u64) -> (Prepared, UNetConfig) {
    let mut cfg = RunConfig::default();
    cfg.world.width = 16;
    cfg.world.height = 16;
    cfg.world.samples = 16;
    cfg.world.labeling_ratio = 0.25;
    cfg.world.validation_samples = 4;
    cfg.world.seed = seed;
    let ds = generate_world(&cfg.world, &cfg.gaze.simulation).expect("world");
    let data = prepare(&ds, &cfg.gaze_prep()).expect("prepared");
    let model = UNetConfig {
        base_channels: 4,
        depth: 2,
        reduction: 2,
        ..UNetConfig::default()
    };
    (data, model)
}

fn flat(p: &ModelParams<Tensor>) -> Vec<f64> {
    p.tensors()
        .into_iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

pub fn ema_contract() -> Check {
    let (data, model) = small_world(3);
    let start = init_params(&model, 11).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (gamma, steps) in [(0.99, 50), (0.0, 5), (1.0, 5)] {
        let cfg = TrainerConfig {
            batch_size: 2,
            learning_rate: 0.05,
            ema_decay: gamma,
            ..TrainerConfig::default()
        };
        let mut state = TrainerState::new(start.clone());
        for step in 1..=steps {
            let before = flat(&state.teacher);
            train_step(&mut state, &data, &model, &cfg).map_err(|e| e.to_string())?;
            let (t, s) = (flat(&state.teacher), flat(&state.student));
            for (i, ((t, s), b)) in t.iter().zip(&s).zip(&before).enumerate() {
                let want = gamma * b + (1.0 - gamma) * s;
                let d = (t - want).abs();
                if gamma == 0.0 || gamma == 1.0 {
                    let exact = if gamma == 0.0 { *s } else { *b };
                    ensure!(
                        same_bits(*t, exact),
                        "gamma {gamma}, step {step}, parameter {i}: {t} vs {exact}"
                    );
                } else {
                    worst = worst.max(d);
                    ensure!(
                        d <= 1e-12,
                        "gamma {gamma}, step {step}, parameter {i}: off by {d:e}"
                    );
                }
            }
            ensure!(
                state.iteration == step,
                "iteration counter {}",
                state.iteration
            );
        }
        if gamma == 0.99 {
            ensure!(
                flat(&state.teacher) != flat(&start),
                "teacher never moved in {steps} steps"
            );
        }
    }
    Ok(format!(
        "50 steps at gamma 0.99 (max diff {worst:.1e}), gamma 0 and 1 exact"
    ))
}

pub fn metrics_match_oracle() -> Check {
    let mut r = rng(0x3e7);
    let mut pairs = 0;
    while pairs < 50 {
        let a = random_mask(16, 16, r.random_range(0.05..0.7), &mut r);
        let b = random_mask(16, 16, r.random_range(0.05..0.7), &mut r);
        if !a.data().contains(&1) || !b.data().contains(&1) {
            continue;
        }
        let (d, j) = dice_jaccard(&a, &b, 1).map_err(|e| e.to_string())?;
        let (od, oj) = oracle_overlap(&a, &b);
        ensure!(
            d == od && j == oj,
            "pair {pairs}: dice/jaccard {d}/{j} vs {od}/{oj}"
        );
        let (hd, asd) = surface_distances(&a, &b, 1).map_err(|e| e.to_string())?;
        let mut dist = oracle_distances(&a, &b);
        let ohd = oracle_percentile(&dist, 95.0);
        dist.sort_by(f64::total_cmp);
        let oasd = dist.iter().sum::<f64>() / dist.len() as f64;
        ensure!(hd == ohd, "pair {pairs}: hd95 {hd} vs {ohd}");
        ensure!(asd == oasd, "pair {pairs}: asd {asd} vs {oasd}");
        pairs += 1;
    }
    let mut p = Grid::filled(16, 16, 0u8);
    let mut g = Grid::filled(16, 16, 0u8);
    p.set(2, 3, 1);
    g.set(5, 7, 1);
    let (hd, asd) = surface_distances(&p, &g, 1).map_err(|e| e.to_string())?;
    ensure!(
        hd == 5.0 && asd == 5.0,
        "3-4-5 case gave hd95 {hd}, asd {asd}"
    );
    Ok("50 random pairs exact, 3-4-5 case = 5.0".into())
}
