use rand::Rng;

use super::conv::{conv_backward, conv_forward, gemm, ConvGeom};
use super::{Mode, Parameter, RunningStats, Tensor, BN_EPSILON, BN_MOMENTUM, DICE_EPSILON};
use crate::error::{param_err, shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cout: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Flatten {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Upsample2 {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    SoftDice {
        pred: Var,
        target: Vec<f64>,
        overlap: f64,
        total: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of one forward computation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and the backward sweep is a reverse scan.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(usize, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Copies a parameter in as a leaf. Unfrozen parameters require a
    /// gradient and are remembered under `id` for [`Graph::param_grads`].
    pub fn param(&mut self, id: usize, p: &Parameter) -> Var {
        let v = self.push(p.value.clone(), !p.frozen, Op::Leaf);
        if !p.frozen {
            self.bindings.push((id, v));
        }
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; all zeros when no backward pass reached `v`,
    /// `None` when `v` does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        })
    }

    /// Gradients of the parameters bound with [`Graph::param`], by id.
    /// Parameters no backward pass reached are skipped.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.bindings
            .iter()
            .filter_map(|&(id, v)| self.nodes[v.0].grad.as_deref().map(|g| (id, g)))
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, k: usize, pad: usize) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if kh != k || kw != k {
            return Err(shape_err!("expected a {k}x{k} kernel, got {kh}x{kw}"));
        }
        if wcin != cin {
            return Err(shape_err!(
                "input has {cin} channels but the kernel expects {wcin}"
            ));
        }
        if self.value(b).shape() != [cout] {
            return Err(shape_err!(
                "bias shape {:?} does not match {cout} output channels",
                self.value(b).shape()
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            pad,
        };
        let out = conv_forward(
            self.value(x).data(),
            batch,
            geom,
            self.value(w).data(),
            self.value(b).data(),
            cout,
        );
        let value = Tensor::new(vec![batch, cout, geom.out_h(), geom.out_w()], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                input: x,
                weight: w,
                bias: b,
                geom,
                cout,
            },
        ))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.conv(x, weight, bias, 3, 1)
    }

    /// Per-pixel linear map across channels.
    pub fn conv1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.conv(x, weight, bias, 1, 0)
    }

    /// Non-overlapping 2×2 max. Ties go to the first element in row-major
    /// window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for idx in [
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::MaxPool2 { input: x, argmax }))
    }

    /// Per-channel batch normalization with affine `gamma`, `beta`.
    ///
    /// Train mode normalizes with the batch mean and population variance and
    /// folds them into `stats` with momentum 0.1 (the running variance takes
    /// the unbiased batch estimate). Eval mode normalizes with `stats` and
    /// leaves them untouched.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err!(
                "batch norm affine parameters must have {c} entries"
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err!("batch norm running stats must have {c} entries"));
        }
        let hw = h * w;
        let n = b * hw;
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(shape_err!(
                "train-mode batch norm needs at least 2 values per channel, got {n}"
            ));
        }
        let src = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let idx = |bi: usize| (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
            let (mean, var) = if train {
                let mut sum = 0.0;
                for bi in 0..b {
                    sum += src[idx(bi)].iter().sum::<f64>();
                }
                let mean = sum / n as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    ss += src[idx(bi)].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                }
                let var = ss / n as f64;
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                stats.var[ch] =
                    (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * ss / (n - 1) as f64;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std[ch] = is;
            for bi in 0..b {
                for i in idx(bi) {
                    let xh = (src[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Relu { input: x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Sigmoid { input: x })
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Eval mode and `rate == 0` return `x` itself without drawing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(param_err!("dropout rate must lie in [0, 1), got {rate}"));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Dropout { input: x, mask }))
    }

    /// Collapses every axis after the first: `[B, ...] -> [B, F]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let b = v.shape().first().copied().unwrap_or(1);
        let f = v.numel() / b.max(1);
        let value = v.clone().reshaped(vec![b, f]);
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Flatten { input: x })
    }

    /// `x · weightᵀ + bias` for `x: [B, F]`, `weight: [O, F]`, `bias: [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, f) = match self.value(x).shape() {
            &[b, f] => (b, f),
            s => return Err(shape_err!("linear expects [B, F] input, got {s:?}")),
        };
        let o = match self.value(weight).shape() {
            &[o, wf] if wf == f => o,
            s => {
                return Err(shape_err!(
                    "linear weight {s:?} does not accept {f} features"
                ))
            }
        };
        if self.value(bias).shape() != [o] {
            return Err(shape_err!("linear bias must have {o} entries"));
        }
        let mut out = vec![0.0; b * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(
            b,
            f,
            o,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            1.0,
        );
        let rg = self.needs(&[x, weight, bias]);
        let value = Tensor::new(vec![b, o], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
        ))
    }

    /// Nearest-neighbour 2× spatial replication.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    out[plane * oh * ow + i * ow + j] = src[plane * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::Upsample2 { input: x }))
    }

    /// Joins two `[B, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err!(
                "cannot concatenate {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let hw = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.needs(&[a, b]);
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "cannot multiply {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a * factor).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Scale { input: x, factor })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { input: x })
    }

    /// Mean of squared differences over every entry.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err!(
                "prediction {:?} and target {:?} differ in shape",
                p.shape(),
                target.shape()
            ));
        }
        let n = p.numel().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// `-ln((2·Σpg + ε) / (Σp + Σg + ε))`, pooled over the whole batch.
    pub fn neg_log_soft_dice(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err!(
                "prediction {:?} and target {:?} differ in shape",
                p.shape(),
                target.shape()
            ));
        }
        let overlap: f64 = p.data().iter().zip(target.data()).map(|(a, b)| a * b).sum();
        let total = p.data().iter().sum::<f64>() + target.data().iter().sum::<f64>();
        let dice = (2.0 * overlap + DICE_EPSILON) / (total + DICE_EPSILON);
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(-dice.ln()),
            rg,
            Op::SoftDice {
                pred,
                target: target.data().to_vec(),
                overlap,
                total,
            },
        ))
    }

    /// Reverse-mode sweep from a one-element `loss`. Gradients are added to
    /// whatever earlier passes left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Pushes the adjoint `g` of node `i` onto its inputs.
    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let take = |adj: &mut [Option<Vec<f64>>], v: Var| -> Option<Vec<f64>> {
            let n = &nodes[v.0];
            n.requires_grad.then(|| {
                adj[v.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; n.value.numel()])
            })
        };
        let put = |adj: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>| {
            if buf.is_some() {
                adj[v.0] = buf;
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Conv {
                input,
                weight,
                bias,
                geom,
                cout,
            } => {
                let batch = val(input).shape()[0];
                let mut dx = take(adj, input);
                let mut dw = take(adj, weight);
                let mut db = take(adj, bias);
                conv_backward(
                    val(input).data(),
                    batch,
                    geom,
                    val(weight).data(),
                    cout,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(adj, input, dx);
                put(adj, weight, dw);
                put(adj, bias, db);
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(mut dx) = take(adj, *input) {
                    for (&src, gi) in argmax.iter().zip(g) {
                        dx[src] += gi;
                    }
                    put(adj, *input, Some(dx));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = val(*input).dims4().expect("checked in forward");
                let hw = h * w;
                let n = (b * hw) as f64;
                let gv = val(*gamma).data();
                let mut dx = take(adj, *input);
                let mut dgamma = take(adj, *gamma);
                let mut dbeta = take(adj, *beta);
                for ch in 0..c {
                    let ranges = (0..b).map(|bi| (bi * c + ch) * hw..(bi * c + ch + 1) * hw);
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                    for r in ranges.clone() {
                        for k in r {
                            sum_dy += g[k];
                            sum_dy_xhat += g[k] * xhat[k];
                        }
                    }
                    if let Some(dg) = dgamma.as_mut() {
                        dg[ch] += sum_dy_xhat;
                    }
                    if let Some(dbt) = dbeta.as_mut() {
                        dbt[ch] += sum_dy;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let scale = gv[ch] * inv_std[ch];
                        for r in ranges {
                            for k in r {
                                dx[k] += if *train {
                                    scale * (g[k] - sum_dy / n - xhat[k] * sum_dy_xhat / n)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                }
                put(adj, *input, dx);
                put(adj, *gamma, dgamma);
                put(adj, *beta, dbeta);
            }
            Op::Relu { input } => {
                if let Some(mut dx) = take(adj, *input) {
                    for ((d, &x), gi) in dx.iter_mut().zip(val(*input).data()).zip(g) {
                        if x > 0.0 {
                            *d += gi;
                        }
                    }
                    put(adj, *input, Some(dx));
                }
            }
            Op::Sigmoid { input } => {
                if let Some(mut dx) = take(adj, *input) {
                    for ((d, &s), gi) in dx.iter_mut().zip(nodes[i].value.data()).zip(g) {
                        *d += gi * s * (1.0 - s);
                    }
                    put(adj, *input, Some(dx));
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(mut dx) = take(adj, *input) {
                    for ((d, m), gi) in dx.iter_mut().zip(mask).zip(g) {
                        *d += gi * m;
                    }
                    put(adj, *input, Some(dx));
                }
            }
            Op::Flatten { input } => {
                if let Some(mut dx) = take(adj, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    put(adj, *input, Some(dx));
                }
            }
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (b, f) = (val(input).shape()[0], val(input).shape()[1]);
                let o = val(weight).shape()[0];
                if let Some(mut dx) = take(adj, input) {
                    gemm(b, o, f, g, false, val(weight).data(), false, &mut dx, 1.0);
                    put(adj, input, Some(dx));
                }
                if let Some(mut dw) = take(adj, weight) {
                    gemm(o, b, f, g, true, val(input).data(), false, &mut dw, 1.0);
                    put(adj, weight, Some(dw));
                }
                if let Some(mut db) = take(adj, bias) {
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                    put(adj, bias, Some(db));
                }
            }
            Op::Upsample2 { input } => {
                let [b, c, h, w] = val(*input).dims4().expect("checked in forward");
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(mut dx) = take(adj, *input) {
                    for plane in 0..b * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[plane * h * w + (i / 2) * w + j / 2] +=
                                    g[plane * oh * ow + i * ow + j];
                            }
                        }
                    }
                    put(adj, *input, Some(dx));
                }
            }
            &Op::Concat { a, b } => {
                let [batch, ca, h, w] = val(a).dims4().expect("checked in forward");
                let cb = val(b).shape()[1];
                let hw = h * w;
                let stride = (ca + cb) * hw;
                if let Some(mut da) = take(adj, a) {
                    for i in 0..batch {
                        let src = &g[i * stride..i * stride + ca * hw];
                        da[i * ca * hw..(i + 1) * ca * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, gi)| *d += gi);
                    }
                    put(adj, a, Some(da));
                }
                if let Some(mut db) = take(adj, b) {
                    for i in 0..batch {
                        let src = &g[i * stride + ca * hw..(i + 1) * stride];
                        db[i * cb * hw..(i + 1) * cb * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, gi)| *d += gi);
                    }
                    put(adj, b, Some(db));
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(mut d) = take(adj, v) {
                        d.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                        put(adj, v, Some(d));
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if let Some(mut d) = take(adj, v) {
                        for ((x, o), gi) in d.iter_mut().zip(val(other).data()).zip(g) {
                            *x += gi * o;
                        }
                        put(adj, v, Some(d));
                    }
                }
            }
            &Op::Scale { input, factor } => {
                if let Some(mut dx) = take(adj, input) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi);
                    put(adj, input, Some(dx));
                }
            }
            &Op::Sum { input } => {
                if let Some(mut dx) = take(adj, input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                    put(adj, input, Some(dx));
                }
            }
            Op::Mse { pred, target } => {
                if let Some(mut dp) = take(adj, *pred) {
                    let scale = 2.0 * g[0] / target.len().max(1) as f64;
                    for ((d, p), t) in dp.iter_mut().zip(val(*pred).data()).zip(target) {
                        *d += scale * (p - t);
                    }
                    put(adj, *pred, Some(dp));
                }
            }
            Op::SoftDice {
                pred,
                target,
                overlap,
                total,
            } => {
                if let Some(mut dp) = take(adj, *pred) {
                    let a = 1.0 / (total + DICE_EPSILON);
                    let b = 2.0 / (2.0 * overlap + DICE_EPSILON);
                    for (d, t) in dp.iter_mut().zip(target) {
                        *d += g[0] * (a - b * t);
                    }
                    put(adj, *pred, Some(dp));
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
