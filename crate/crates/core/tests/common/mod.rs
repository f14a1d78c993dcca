//! Independent oracles shared by the integration tests. Nothing here calls
//! into the kernels it is used to check.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod checks;

use gazeseg::grid::Grid;
use gazeseg::model::{mgp, ConvParams, MgpParams};
use gazeseg::ndnet::{
    Backend, ClassTarget, ConvSpec, DiceCeSpec, Graph, Padding, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so relu kinks sit outside the FD stencil.
pub fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so max-pool winners are stable
/// under a 1e-4 perturbation.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| idx[i] as f64 * 0.01 - 0.3)
}

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

/// Scalar value of `build` at `inputs`.
fn value(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.get(out).item().expect("scalar loss")
}

/// Largest `|analytic − fd| / max(1, |fd|)` over every input element, with
/// central differences of step `eps`.
pub fn fd_max_rel_error(build: &Build, inputs: &[Tensor], eps: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let fd = (value(build, &plus) - value(build, &minus)) / (2.0 * eps);
            let err = (analytic[k].data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces any tensor to a scalar with a non-trivial gradient everywhere.
pub fn probe(g: &mut Graph, x: &Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.get(*x).shape().to_vec();
    let target = uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    let t = g.constant(target);
    g.mse_mean(x, &t)
}

/// Direct quadruple-loop cross-correlation with zero padding.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let s = x.shape();
    let (b, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xa = |bi: usize, ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((bi * c + ci) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[oc]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((oc * c + ci) * kh + ky) * kw + kx]
                                    * xa(bi, ci, y, xx);
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, o, ho, wo], out).unwrap()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Plain parameter arrays for the perception-head oracle.
pub struct MgpRaw {
    pub c: usize,
    pub r: usize,
    /// `(C/r) × C`, row-major.
    pub fc1: Vec<f64>,
    /// `C × (C/r)`, row-major.
    pub fc2: Vec<f64>,
    /// `(weights k×k, bias)` for k = 1, 3, 7.
    pub spatial: [(Vec<f64>, f64); 3],
    /// Three fuse weights and a bias.
    pub fuse: ([f64; 3], f64),
}

/// Channel attention, channel-mean squeeze, three same-padded spatial
/// attentions and a sigmoid fuse, written out for one image.
pub fn mgp_oracle(feat: &[f64], c: usize, h: usize, w: usize, p: &MgpRaw) -> Vec<f64> {
    let hw = h * w;
    let hidden_n = c / p.r;
    let gap: Vec<f64> = (0..c)
        .map(|ch| feat[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let mut hidden = vec![0.0; hidden_n];
    for (j, hv) in hidden.iter_mut().enumerate() {
        let mut s = 0.0;
        for ch in 0..c {
            s += p.fc1[j * c + ch] * gap[ch];
        }
        *hv = s.max(0.0);
    }
    let mut alpha = vec![0.0; c];
    for (ch, a) in alpha.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..hidden_n {
            s += p.fc2[ch * hidden_n + j] * hidden[j];
        }
        *a = sig(s);
    }
    let mut squeezed = vec![0.0; hw];
    for (q, sq) in squeezed.iter_mut().enumerate() {
        let mut s = 0.0;
        for ch in 0..c {
            s += alpha[ch] * feat[ch * hw + q];
        }
        *sq = s / c as f64;
    }
    let mut betas = Vec::new();
    for (k, (kernel, bias)) in [1usize, 3, 7].iter().zip(&p.spatial) {
        let half = (*k as isize - 1) / 2;
        let mut beta = vec![0.0; hw];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = *bias;
                for ky in 0..*k as isize {
                    for kx in 0..*k as isize {
                        let (yy, xx) = (y + ky - half, x + kx - half);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            s += kernel[(ky as usize) * k + kx as usize]
                                * squeezed[yy as usize * w + xx as usize];
                        }
                    }
                }
                beta[y as usize * w + x as usize] = sig(s.max(0.0));
            }
        }
        betas.push(beta);
    }
    (0..hw)
        .map(|q| {
            sig(p.fuse.0[0] * betas[0][q]
                + p.fuse.0[1] * betas[1][q]
                + p.fuse.0[2] * betas[2][q]
                + p.fuse.1)
        })
        .collect()
}

pub fn random_mask(w: usize, h: usize, density: f64, rng: &mut ChaCha8Rng) -> Grid<u8> {
    Grid::from_fn(w, h, |_, _| u8::from(rng.random_bool(density)))
}

/// Cells of `m` with at least one 4-neighbour outside the mask or the image.
pub fn oracle_boundary(m: &Grid<u8>) -> Vec<(usize, usize)> {
    let (w, h) = m.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m.at(x, y) == 0 {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || m.at(x - 1, y) == 0
                || m.at(x + 1, y) == 0
                || m.at(x, y - 1) == 0
                || m.at(x, y + 1) == 0;
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Pooled directed nearest-boundary distances, both directions.
pub fn oracle_distances(a: &Grid<u8>, b: &Grid<u8>) -> Vec<f64> {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    let nearest = |p: &(usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|q| {
                let dx = p.0 as f64 - q.0 as f64;
                let dy = p.1 as f64 - q.1 as f64;
                (dx * dx + dy * dy).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    d.extend(bb.iter().map(|p| nearest(p, &ba)));
    d
}

/// Linear-interpolation percentile of `v` (sorted copy), `q` in [0, 100].
pub fn oracle_percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// `(dice, jaccard)` by counting.
pub fn oracle_overlap(a: &Grid<u8>, b: &Grid<u8>) -> (f64, f64) {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        na += usize::from(*x != 0);
        nb += usize::from(*y != 0);
        inter += usize::from(*x != 0 && *y != 0);
    }
    if na + nb == 0 {
        return (1.0, 1.0);
    }
    let union = na + nb - inter;
    (
        2.0 * inter as f64 / (na + nb) as f64,
        inter as f64 / union as f64,
    )
}

fn mgp_vars(v: &[Var]) -> MgpParams<Var> {
    let conv = |i: usize| ConvParams {
        weight: v[i],
        bias: v[i + 1],
    };
    MgpParams {
        fc1: v[0],
        fc2: v[1],
        spatial1: conv(2),
        spatial3: conv(4),
        spatial7: conv(6),
        fuse: conv(8),
    }
}

/// Perception-head parameter tensors for `c` channels and reduction `r`,
/// in the order [`mgp_vars`] expects.
pub fn mgp_tensors(c: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut u = |shape: &[usize]| uniform(shape, -0.8, 0.8, rng);
    vec![
        u(&[c / r, c]),
        u(&[c, c / r]),
        u(&[1, 1, 1, 1]),
        u(&[1]),
        u(&[1, 1, 3, 3]),
        u(&[1]),
        u(&[1, 1, 7, 7]),
        u(&[1]),
        u(&[1, 3, 1, 1]),
        u(&[1]),
    ]
}

/// Worst relative FD error per operation for one seed.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    const EPS: f64 = 1e-4;
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, build: Box<Build>, inputs: Vec<Tensor>| {
        out.push((name, fd_max_rel_error(&*build, &inputs, EPS)));
    };
    let s = seed;

    let x = uniform(&[2, 2, 5, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = uniform(&[3], -0.5, 0.5, &mut r);
    check(
        "conv2d same",
        Box::new(move |g, v| {
            let y = g.conv2d(&v[0], &v[1], Some(&v[2]), ConvSpec::default())?;
            probe(g, &y, s)
        }),
        vec![x.clone(), w.clone(), b],
    );
    check(
        "conv2d stride 2 pad 1",
        Box::new(move |g, v| {
            let spec = ConvSpec {
                stride: 2,
                padding: Padding::Explicit(1),
            };
            let y = g.conv2d(&v[0], &v[1], None, spec)?;
            probe(g, &y, s)
        }),
        vec![x.clone(), w],
    );
    check(
        "maxpool2d",
        Box::new(move |g, v| {
            let y = g.maxpool2d(&v[0], 2)?;
            probe(g, &y, s)
        }),
        vec![distinct(&[2, 2, 4, 6], &mut r)],
    );
    check(
        "upsample_bilinear2d",
        Box::new(move |g, v| {
            let y = g.upsample_bilinear2d(&v[0], 7, 6)?;
            probe(g, &y, s)
        }),
        vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r)],
    );
    check(
        "relu",
        Box::new(move |g, v| {
            let y = g.relu(&v[0]);
            probe(g, &y, s)
        }),
        vec![off_zero(&[1, 2, 3, 3], &mut r)],
    );
    check(
        "sigmoid",
        Box::new(move |g, v| {
            let y = g.sigmoid(&v[0]);
            probe(g, &y, s)
        }),
        vec![uniform(&[1, 2, 3, 3], -3.0, 3.0, &mut r)],
    );
    check(
        "log",
        Box::new(move |g, v| {
            let y = g.log(&v[0]);
            probe(g, &y, s)
        }),
        vec![uniform(&[1, 2, 3, 3], 0.5, 2.0, &mut r)],
    );
    check(
        "softmax_channel",
        Box::new(move |g, v| {
            let y = g.softmax_channel(&v[0])?;
            probe(g, &y, s)
        }),
        vec![uniform(&[2, 3, 2, 3], -2.0, 2.0, &mut r)],
    );
    check(
        "concat_channel",
        Box::new(move |g, v| {
            let y = g.concat_channel(&[&v[0], &v[1]])?;
            probe(g, &y, s)
        }),
        vec![
            uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r),
            uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r),
        ],
    );
    check(
        "add",
        Box::new(move |g, v| {
            let y = g.add(&v[0], &v[1])?;
            probe(g, &y, s)
        }),
        vec![
            uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r),
            uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r),
        ],
    );
    check(
        "mul",
        Box::new(move |g, v| {
            let y = g.mul(&v[0], &v[1])?;
            probe(g, &y, s)
        }),
        vec![
            uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r),
            uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r),
        ],
    );
    check(
        "scale",
        Box::new(move |g, v| {
            let y = g.scale(&v[0], -1.7);
            probe(g, &y, s)
        }),
        vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r)],
    );
    check(
        "mul_channelwise",
        Box::new(move |g, v| {
            let y = g.mul_channelwise(&v[0], &v[1])?;
            probe(g, &y, s)
        }),
        vec![
            uniform(&[2, 3], -1.0, 1.0, &mut r),
            uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut r),
        ],
    );
    check(
        "global_avg_pool_spatial",
        Box::new(move |g, v| {
            let y = g.global_avg_pool_spatial(&v[0])?;
            probe(g, &y, s)
        }),
        vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut r)],
    );
    check(
        "channel_mean_pool",
        Box::new(move |g, v| {
            let y = g.channel_mean_pool(&v[0])?;
            probe(g, &y, s)
        }),
        vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut r)],
    );
    check(
        "linear",
        Box::new(move |g, v| {
            let y = g.linear(&v[0], &v[1], Some(&v[2]))?;
            probe(g, &y, s)
        }),
        vec![
            uniform(&[3, 4], -1.0, 1.0, &mut r),
            uniform(&[2, 4], -1.0, 1.0, &mut r),
            uniform(&[2], -1.0, 1.0, &mut r),
        ],
    );
    check(
        "mse_mean",
        Box::new(|g, v| g.mse_mean(&v[0], &v[1])),
        vec![
            uniform(&[1, 1, 3, 4], -1.0, 1.0, &mut r),
            uniform(&[1, 1, 3, 4], -1.0, 1.0, &mut r),
        ],
    );
    let classes: Vec<usize> = (0..2 * 3 * 4).map(|_| r.random_range(0..3)).collect();
    let mask: Vec<bool> = (0..2 * 3 * 4).map(|_| r.random_bool(0.7)).collect();
    let target = ClassTarget {
        classes,
        mask: Some(mask),
    };
    check(
        "dice_ce",
        Box::new(move |g, v| g.dice_ce(&v[0], &target, DiceCeSpec::default())),
        vec![uniform(&[2, 3, 3, 4], -2.0, 2.0, &mut r)],
    );

    let feat = off_zero(&[2, 4, 5, 5], &mut r);
    let mut inputs = vec![feat];
    inputs.extend(mgp_tensors(4, 2, &mut r));
    check(
        "mgp head",
        Box::new(move |g, v| {
            let p = mgp_vars(&v[1..]);
            let y = mgp(g, &p, &v[0])?;
            probe(g, &y, s)
        }),
        inputs,
    );
    out
}
