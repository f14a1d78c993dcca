//! Segmentation network: a plain 2-D U-Net whose final decoder features feed
//! both a 1×1 segmentation head and the multi-scale gaze perception (MGP)
//! head.
//!
//! MGP recalibrates the features with squeeze-excitation channel attention,
//! mean-pools the result across channels, runs parallel 1×1 / 3×3 / 7×7
//! spatial attention branches over that map and fuses them with a 1×1
//! convolution into the perception map `g_net`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndnet::{Backend, ConvSpec, Eval, Padding, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {h}×{w} is not divisible by 2^{depth}")]
    BadSpatialDims { h: usize, w: usize, depth: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up-sampling stages.
    pub depth: usize,
    pub num_classes: usize,
    /// Bottleneck reduction of the MGP channel-attention MLP.
    pub reduction: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 3,
            num_classes: 3,
            reduction: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.depth < 1 {
            return bad("depth must be >= 1");
        }
        if self.base_channels < 4 {
            return bad("base_channels must be >= 4");
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need in_channels >= 1 and num_classes >= 2");
        }
        if self.reduction == 0 || !self.base_channels.is_multiple_of(self.reduction) {
            return bad("base_channels must be divisible by reduction");
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> ConvParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvParams<U> {
        ConvParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

/// Learnable tensors of the MGP head.
#[derive(Clone, Debug, PartialEq)]
pub struct MgpParams<T> {
    /// `C/r × C`, no bias.
    pub fc1: T,
    /// `C × C/r`, no bias.
    pub fc2: T,
    pub spatial1: ConvParams<T>,
    pub spatial3: ConvParams<T>,
    pub spatial7: ConvParams<T>,
    /// 1×1 fusion over the three concatenated attention maps.
    pub fuse: ConvParams<T>,
}

impl<T> MgpParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MgpParams<U> {
        MgpParams {
            fc1: f(&self.fc1),
            fc2: f(&self.fc2),
            spatial1: self.spatial1.map(f),
            spatial3: self.spatial3.map(f),
            spatial7: self.spatial7.map(f),
            fuse: self.fuse.map(f),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        vec![
            &self.fc1,
            &self.fc2,
            &self.spatial1.weight,
            &self.spatial1.bias,
            &self.spatial3.weight,
            &self.spatial3.bias,
            &self.spatial7.weight,
            &self.spatial7.bias,
            &self.fuse.weight,
            &self.fuse.bias,
        ]
    }
}

/// Every learnable tensor of the network, generic over its carrier so the
/// same layout serves plain tensors, graph handles and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Vec<[ConvParams<T>; 2]>,
    pub bottleneck: [ConvParams<T>; 2],
    /// `decoder[i]` restores level `i` (0 = full resolution).
    pub decoder: Vec<[ConvParams<T>; 2]>,
    pub head: ConvParams<T>,
    pub mgp: MgpParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        fn pair<T, U>(p: &[ConvParams<T>; 2], f: &mut impl FnMut(&T) -> U) -> [ConvParams<U>; 2] {
            [p[0].map(f), p[1].map(f)]
        }
        let f = &mut f;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for p in &self.encoder {
            encoder.push(pair(p, f));
        }
        let bottleneck = pair(&self.bottleneck, f);
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for p in &self.decoder {
            decoder.push(pair(p, f));
        }
        ModelParams {
            encoder,
            bottleneck,
            decoder,
            head: self.head.map(f),
            mgp: self.mgp.map(f),
        }
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = Vec::new();
        for p in &self.encoder {
            out.extend([&p[0].weight, &p[0].bias, &p[1].weight, &p[1].bias]);
        }
        let b = &self.bottleneck;
        out.extend([&b[0].weight, &b[0].bias, &b[1].weight, &b[1].bias]);
        for p in &self.decoder {
            out.extend([&p[0].weight, &p[0].bias, &p[1].weight, &p[1].bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out.extend(self.mgp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        let pairs = self
            .encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoder.iter_mut());
        for [a, b] in pairs {
            out.extend([&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        let m = &mut self.mgp;
        out.extend([
            &mut m.fc1,
            &mut m.fc2,
            &mut m.spatial1.weight,
            &mut m.spatial1.bias,
            &mut m.spatial3.weight,
            &mut m.spatial3.bias,
            &mut m.spatial7.weight,
            &mut m.spatial7.bias,
            &mut m.fuse.weight,
            &mut m.fuse.bias,
        ]);
        out
    }

    /// Parameter names, index-aligned with [`ModelParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let conv = |prefix: String, out: &mut Vec<String>| {
            out.push(format!("{prefix}.weight"));
            out.push(format!("{prefix}.bias"));
        };
        for i in 0..self.encoder.len() {
            conv(format!("encoder.{i}.0"), &mut out);
            conv(format!("encoder.{i}.1"), &mut out);
        }
        conv("bottleneck.0".into(), &mut out);
        conv("bottleneck.1".into(), &mut out);
        for i in 0..self.decoder.len() {
            conv(format!("decoder.{i}.0"), &mut out);
            conv(format!("decoder.{i}.1"), &mut out);
        }
        conv("head".into(), &mut out);
        out.push("mgp.fc1".into());
        out.push("mgp.fc2".into());
        for s in ["mgp.spatial1", "mgp.spatial3", "mgp.spatial7", "mgp.fuse"] {
            conv(s.into(), &mut out);
        }
        out
    }
}

impl ModelParams<Tensor> {
    /// Rebuilds a parameter set with this layout from tensors in declaration
    /// order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self, ModelError> {
        if values.len() != self.tensors().len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.tensors().len(),
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let mut bad = None;
        let out = self.map(|t| {
            let v = it.next().expect("length checked");
            if v.shape() != t.shape() && bad.is_none() {
                bad = Some((t.shape().to_vec(), v.shape().to_vec()));
            }
            v
        });
        match bad {
            Some((want, got)) => Err(ModelError::Checkpoint(format!(
                "tensor shape {got:?}, expected {want:?}"
            ))),
            None => Ok(out),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn conv_init(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams<Tensor> {
    ConvParams {
        weight: he_normal(&[c_out, c_in, k, k], c_in * k * k, rng),
        bias: Tensor::zeros(&[c_out]),
    }
}

/// Spatial attention branches read a non-negative map, so a branch whose
/// weights start negative would sit below its ReLU for good.
fn spatial_init(k: usize, rng: &mut ChaCha8Rng) -> ConvParams<Tensor> {
    let mut p = conv_init(1, 1, k, rng);
    p.weight.data_mut().iter_mut().for_each(|w| *w = w.abs());
    p
}

/// He (fan-in) normal weights and zero biases, deterministic per seed.
pub fn init_params(cfg: &UNetConfig, seed: u64) -> Result<ModelParams<Tensor>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut c_prev = cfg.in_channels;
    for level in 0..cfg.depth {
        let c = cfg.channels(level);
        encoder.push([conv_init(c, c_prev, 3, rng), conv_init(c, c, 3, rng)]);
        c_prev = c;
    }
    let cb = cfg.channels(cfg.depth);
    let bottleneck = [conv_init(cb, c_prev, 3, rng), conv_init(cb, cb, 3, rng)];
    let mut decoder: Vec<[ConvParams<Tensor>; 2]> = Vec::with_capacity(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let c = cfg.channels(level);
        let c_in = cfg.channels(level + 1) + c;
        decoder.push([conv_init(c, c_in, 3, rng), conv_init(c, c, 3, rng)]);
    }
    decoder.reverse();
    let c0 = cfg.base_channels;
    let head = conv_init(cfg.num_classes, c0, 1, rng);
    let hidden = c0 / cfg.reduction;
    let mgp = MgpParams {
        fc1: he_normal(&[hidden, c0], c0, rng),
        fc2: he_normal(&[c0, hidden], hidden, rng),
        spatial1: spatial_init(1, rng),
        spatial3: spatial_init(3, rng),
        spatial7: spatial_init(7, rng),
        fuse: conv_init(1, 3, 1, rng),
    };
    Ok(ModelParams {
        encoder,
        bottleneck,
        decoder,
        head,
        mgp,
    })
}

/// Network outputs for a batch.
#[derive(Clone, Debug)]
pub struct ModelOutput<V> {
    /// `B×K×H×W` class scores.
    pub logits: V,
    /// `B×1×H×W` perception map in (0, 1); absent when MGP is disabled.
    pub g_net: Option<V>,
}

const SAME: ConvSpec = ConvSpec {
    stride: 1,
    padding: Padding::Same,
};

fn conv_relu<B: Backend>(
    b: &mut B,
    x: &B::Value,
    p: &ConvParams<B::Value>,
) -> Result<B::Value, TensorError> {
    let y = b.conv2d(x, &p.weight, Some(&p.bias), SAME)?;
    Ok(b.relu(&y))
}

/// MGP head over `feat` (`B×C×h×w`), returning `B×1×h×w`.
pub fn mgp<B: Backend>(
    b: &mut B,
    p: &MgpParams<B::Value>,
    feat: &B::Value,
) -> Result<B::Value, TensorError> {
    // channel attention
    let pooled = b.global_avg_pool_spatial(feat)?;
    let hidden = b.linear(&pooled, &p.fc1, None)?;
    let hidden = b.relu(&hidden);
    let alpha = b.linear(&hidden, &p.fc2, None)?;
    let alpha = b.sigmoid(&alpha);
    let feat_c = b.mul_channelwise(&alpha, feat)?;
    // multi-scale spatial attention over the channel-mean map
    let squeezed = b.channel_mean_pool(&feat_c)?;
    let mut betas = Vec::with_capacity(3);
    for branch in [&p.spatial1, &p.spatial3, &p.spatial7] {
        let s = b.conv2d(&squeezed, &branch.weight, Some(&branch.bias), SAME)?;
        let s = b.relu(&s);
        betas.push(b.sigmoid(&s));
    }
    let stacked = b.concat_channel(&[&betas[0], &betas[1], &betas[2]])?;
    let fused = b.conv2d(&stacked, &p.fuse.weight, Some(&p.fuse.bias), SAME)?;
    Ok(b.sigmoid(&fused))
}

/// Runs the network on `images` (`B×C_in×H×W`).
pub fn forward<B: Backend>(
    b: &mut B,
    cfg: &UNetConfig,
    params: &ModelParams<B::Value>,
    images: &B::Value,
    with_mgp: bool,
) -> Result<ModelOutput<B::Value>, ModelError> {
    let (_, _, h, w) = b.value(images).dims4()?;
    let unit = 1usize << cfg.depth;
    if h % unit != 0 || w % unit != 0 {
        return Err(ModelError::BadSpatialDims {
            h,
            w,
            depth: cfg.depth,
        });
    }
    let mut x = images.clone();
    let mut skips = Vec::with_capacity(cfg.depth);
    for stage in &params.encoder {
        x = conv_relu(b, &x, &stage[0])?;
        x = conv_relu(b, &x, &stage[1])?;
        skips.push(x.clone());
        x = b.maxpool2d(&x, 2)?;
    }
    x = conv_relu(b, &x, &params.bottleneck[0])?;
    x = conv_relu(b, &x, &params.bottleneck[1])?;
    for (stage, skip) in params.decoder.iter().zip(&skips).rev() {
        let (_, _, sh, sw) = b.value(skip).dims4()?;
        let up = b.upsample_bilinear2d(&x, sh, sw)?;
        let cat = b.concat_channel(&[&up, skip])?;
        x = conv_relu(b, &cat, &stage[0])?;
        x = conv_relu(b, &x, &stage[1])?;
    }
    let feat = x;
    let logits = b.conv2d(&feat, &params.head.weight, Some(&params.head.bias), SAME)?;
    let g_net = if with_mgp {
        let g = mgp(b, &params.mgp, &feat)?;
        let (_, _, gh, gw) = b.value(&g).dims4()?;
        Some(if (gh, gw) == (h, w) {
            g
        } else {
            b.upsample_bilinear2d(&g, h, w)?
        })
    } else {
        None
    };
    Ok(ModelOutput { logits, g_net })
}

/// Graph-free forward pass.
pub fn predict(
    cfg: &UNetConfig,
    params: &ModelParams<Tensor>,
    images: Tensor,
    with_mgp: bool,
) -> Result<ModelOutput<Tensor>, ModelError> {
    forward(&mut Eval, cfg, params, &images, with_mgp)
}

/// Per-pixel argmax over the class axis of `B×K×H×W` logits, batch-major.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<usize>, TensorError> {
    let (b, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for q in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if x[(bi * k + c) * hw + q] > x[(bi * k + best) * hw + q] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: UNetConfig,
    pub iteration: usize,
    pub role: Role,
    pub tensors: Vec<TensorInfo>,
}

/// Layout: `u64` little-endian header length, the JSON header, then every
/// tensor as little-endian `f64` in declaration order.
pub fn encode_checkpoint(
    cfg: &UNetConfig,
    iteration: usize,
    role: Role,
    params: &ModelParams<Tensor>,
) -> Vec<u8> {
    let header = CheckpointHeader {
        config: cfg.clone(),
        iteration,
        role,
        tensors: params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorInfo {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(8 + json.len() + 8 * params.num_values());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(
    bytes: &[u8],
) -> Result<(CheckpointHeader, ModelParams<Tensor>), ModelError> {
    let err = |m: &str| ModelError::Checkpoint(m.to_string());
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| err("truncated"))?
        .try_into()
        .unwrap();
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| err("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let template = init_params(&header.config, 0)?;
    let mut offset = 8 + len;
    let mut values = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| err("truncated tensor data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(&info.shape, data)?);
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(err("trailing bytes"));
    }
    let params = template.with_values(values)?;
    Ok((header, params))
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &UNetConfig,
    iteration: usize,
    role: Role,
    params: &ModelParams<Tensor>,
) -> Result<(), ModelError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(cfg, iteration, role, params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams<Tensor>), ModelError> {
    decode_checkpoint(&fs::read(path)?)
}
