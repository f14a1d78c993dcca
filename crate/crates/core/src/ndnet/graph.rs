use super::kernels::{self, ClassTarget, ConvGeom, ConvSpec, DiceCeSpec};
use super::{Backend, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulChannel {
        scale: Var,
        x: Var,
    },
    Gap(Var),
    ChannelMean(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Mse(Var, Var),
    DiceCe {
        logits: Var,
        target: ClassTarget,
        spec: DiceCeSpec,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation tape. Nodes are appended in execution order, which is a
/// topological order; [`Graph::backward`] walks it once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; `None` for leaves that do not
    /// require a gradient or did not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`. Populates gradients on every
    /// leaf that requires one. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = g.map(|d| Tensor::new(node.value.shape(), d).expect("grad shape"));
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contribution)
                    .for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let need = [
                    self.requires_grad(*x),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                ];
                let r = kernels::conv2d_backward(geom, self.get(*x), self.get(*weight), g, need);
                if let Some(d) = r.input {
                    acc(*x, d);
                }
                if let Some(d) = r.weight {
                    acc(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, r.bias) {
                    acc(*b, d);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![0.0; self.get(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
                acc(*x, d);
            }
            Op::Upsample(x) => {
                let shape = node.value.shape();
                let d = kernels::upsample_bilinear2d_backward(
                    self.get(*x).shape(),
                    shape[2],
                    shape[3],
                    g,
                );
                acc(*x, d);
            }
            Op::Relu(x) => {
                let xv = self.get(*x).data();
                acc(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                acc(
                    *x,
                    out.iter().zip(g).map(|(y, d)| d * y * (1.0 - y)).collect(),
                );
            }
            Op::Log(x) => {
                let xv = self.get(*x).data();
                acc(*x, xv.iter().zip(g).map(|(v, d)| d / v).collect());
            }
            Op::Softmax(x) => {
                let (b, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut d = vec![0.0; out.len()];
                for bi in 0..b {
                    for q in 0..hw {
                        let dot: f64 = (0..c)
                            .map(|k| g[(bi * c + k) * hw + q] * out[(bi * c + k) * hw + q])
                            .sum();
                        for k in 0..c {
                            let i = (bi * c + k) * hw + q;
                            d[i] = out[i] * (g[i] - dot);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Concat(parts) => {
                let (b, c_total, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = self.get(*p).shape()[1];
                    let mut d = Vec::with_capacity(b * pc * hw);
                    for bi in 0..b {
                        let start = (bi * c_total + offset) * hw;
                        d.extend_from_slice(&g[start..start + pc * hw]);
                    }
                    acc(*p, d);
                    offset += pc;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.get(*a).data();
                let bv = self.get(*b).data();
                acc(*a, g.iter().zip(bv).map(|(d, y)| d * y).collect());
                acc(*b, g.iter().zip(av).map(|(d, x)| d * x).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|d| d * f).collect()),
            Op::MulChannel { scale, x } => {
                let xv = self.get(*x);
                let (_, _, h, w) = xv.dims4()?;
                let hw = h * w;
                let sv = self.get(*scale).data();
                let mut ds = vec![0.0; sv.len()];
                let mut dx = vec![0.0; xv.numel()];
                for (plane, s) in sv.iter().enumerate() {
                    let r = plane * hw..(plane + 1) * hw;
                    ds[plane] = g[r.clone()]
                        .iter()
                        .zip(&xv.data()[r.clone()])
                        .map(|(d, v)| d * v)
                        .sum();
                    dx[r.clone()]
                        .iter_mut()
                        .zip(&g[r])
                        .for_each(|(o, d)| *o = d * s);
                }
                acc(*scale, ds);
                acc(*x, dx);
            }
            Op::Gap(x) => {
                let (_, _, h, w) = self.get(*x).dims4()?;
                let hw = h * w;
                let mut d = Vec::with_capacity(g.len() * hw);
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc(*x, d);
            }
            Op::ChannelMean(x) => {
                let (b, c, h, w) = self.get(*x).dims4()?;
                let hw = h * w;
                let mut d = Vec::with_capacity(b * c * hw);
                for bi in 0..b {
                    for _ in 0..c {
                        d.extend(g[bi * hw..(bi + 1) * hw].iter().map(|v| v / c as f64));
                    }
                }
                acc(*x, d);
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.get(*x);
                let wv = self.get(*weight);
                let (b, n_in) = xv.dims2()?;
                let (n_out, _) = wv.dims2()?;
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; b * n_in];
                    for r in 0..b {
                        for o in 0..n_out {
                            let d = g[r * n_out + o];
                            for i in 0..n_in {
                                dx[r * n_in + i] += d * wv.data()[o * n_in + i];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; n_out * n_in];
                    for r in 0..b {
                        for o in 0..n_out {
                            let d = g[r * n_out + o];
                            for i in 0..n_in {
                                dw[o * n_in + i] += d * xv.data()[r * n_in + i];
                            }
                        }
                    }
                    acc(*weight, dw);
                }
                if let Some(bias) = bias {
                    let mut db = vec![0.0; n_out];
                    for r in 0..b {
                        for o in 0..n_out {
                            db[o] += g[r * n_out + o];
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Mse(a, b) => {
                let av = self.get(*a).data();
                let bv = self.get(*b).data();
                let k = 2.0 * g[0] / av.len() as f64;
                acc(*a, av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect());
                acc(*b, av.iter().zip(bv).map(|(x, y)| k * (y - x)).collect());
            }
            Op::DiceCe {
                logits,
                target,
                spec,
            } => {
                let d = kernels::dice_ce_backward(self.get(*logits), target, *spec, g[0])?;
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

impl Backend for Graph {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.get(*v)
    }

    fn conv2d(
        &mut self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        spec: ConvSpec,
    ) -> Result<Var, TensorError> {
        let bias_t = bias.map(|b| self.get(*b));
        let geom = kernels::conv_geom(self.get(*x), self.get(*weight), bias_t, spec)?;
        let value = kernels::conv2d(self.get(*x), self.get(*weight), bias_t, spec)?;
        let mut inputs = vec![*x, *weight];
        inputs.extend(bias.copied());
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: *x,
                weight: *weight,
                bias: bias.copied(),
                geom,
            },
            rg,
        ))
    }

    fn maxpool2d(&mut self, x: &Var, k: usize) -> Result<Var, TensorError> {
        let (value, argmax) = kernels::maxpool2d(self.get(*x), k)?;
        Ok(self.unary(*x, value, Op::MaxPool2d { x: *x, argmax }))
    }

    fn upsample_bilinear2d(
        &mut self,
        x: &Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let value = kernels::upsample_bilinear2d(self.get(*x), out_h, out_w)?;
        Ok(self.unary(*x, value, Op::Upsample(*x)))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let value = kernels::map(self.get(*x), |v| v.max(0.0));
        self.unary(*x, value, Op::Relu(*x))
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let value = kernels::map(self.get(*x), kernels::sigmoid);
        self.unary(*x, value, Op::Sigmoid(*x))
    }

    fn log(&mut self, x: &Var) -> Var {
        let value = kernels::map(self.get(*x), f64::ln);
        self.unary(*x, value, Op::Log(*x))
    }

    fn softmax_channel(&mut self, x: &Var) -> Result<Var, TensorError> {
        let value = kernels::softmax_channel(self.get(*x))?;
        Ok(self.unary(*x, value, Op::Softmax(*x)))
    }

    fn concat_channel(&mut self, parts: &[&Var]) -> Result<Var, TensorError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.get(**v)).collect();
        let value = kernels::concat_channel(&tensors)?;
        let vars: Vec<Var> = parts.iter().map(|v| **v).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(value, Op::Concat(vars), rg))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let value = kernels::zip_map(self.get(*a), self.get(*b), |x, y| x + y)?;
        let rg = self.any_grad(&[*a, *b]);
        Ok(self.push(value, Op::Add(*a, *b), rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let value = kernels::zip_map(self.get(*a), self.get(*b), |x, y| x * y)?;
        let rg = self.any_grad(&[*a, *b]);
        Ok(self.push(value, Op::Mul(*a, *b), rg))
    }

    fn scale(&mut self, x: &Var, factor: f64) -> Var {
        let value = kernels::map(self.get(*x), |v| v * factor);
        self.unary(*x, value, Op::Scale(*x, factor))
    }

    fn mul_channelwise(&mut self, scale: &Var, x: &Var) -> Result<Var, TensorError> {
        let value = kernels::mul_channelwise(self.get(*scale), self.get(*x))?;
        let rg = self.any_grad(&[*scale, *x]);
        Ok(self.push(
            value,
            Op::MulChannel {
                scale: *scale,
                x: *x,
            },
            rg,
        ))
    }

    fn global_avg_pool_spatial(&mut self, x: &Var) -> Result<Var, TensorError> {
        let value = kernels::global_avg_pool_spatial(self.get(*x))?;
        Ok(self.unary(*x, value, Op::Gap(*x)))
    }

    fn channel_mean_pool(&mut self, x: &Var) -> Result<Var, TensorError> {
        let value = kernels::channel_mean_pool(self.get(*x))?;
        Ok(self.unary(*x, value, Op::ChannelMean(*x)))
    }

    fn linear(&mut self, x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var, TensorError> {
        let value = kernels::linear(self.get(*x), self.get(*weight), bias.map(|b| self.get(*b)))?;
        let mut inputs = vec![*x, *weight];
        inputs.extend(bias.copied());
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            value,
            Op::Linear {
                x: *x,
                weight: *weight,
                bias: bias.copied(),
            },
            rg,
        ))
    }

    fn mse_mean(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(kernels::mse_mean(self.get(*a), self.get(*b))?);
        let rg = self.any_grad(&[*a, *b]);
        Ok(self.push(value, Op::Mse(*a, *b), rg))
    }

    fn dice_ce(
        &mut self,
        logits: &Var,
        target: &ClassTarget,
        spec: DiceCeSpec,
    ) -> Result<Var, TensorError> {
        let value = Tensor::scalar(kernels::dice_ce(self.get(*logits), target, spec)?);
        Ok(self.unary(
            *logits,
            value,
            Op::DiceCe {
                logits: *logits,
                target: target.clone(),
                spec,
            },
        ))
    }
}
