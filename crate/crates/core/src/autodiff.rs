//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value. Nodes whose inputs
//! require gradients also keep the op record used by [`Tape::backward`].
//! Node ids grow monotonically, so the node list is already topologically
//! ordered and the backward sweep is a single reverse pass.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    Linear { x: Var, w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    ChannelAdd { x: Var, c: Var },
    ChannelSub { x: Var, c: Var },
    ChannelMul { x: Var, c: Var },
    ChannelDiv { x: Var, c: Var },
    ChannelMean(Var),
    ChannelVar(Var),
    Heaviside { v: Var, alpha: f64 },
    Logistic { v: Var, alpha: f64 },
    Reshape(Var),
    AvgPool { x: Var, k: usize },
    Sum(Var),
    Mean(Var),
    MeanOf(Vec<Var>),
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Entropy { logits: Var, probs: Vec<f64>, log_probs: Vec<f64>, row_h: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the surrogate `σ(αv)` used in place of the Heaviside step.
pub fn surrogate_grad(v: f64, alpha: f64) -> f64 {
    let s = sigmoid(alpha * v);
    alpha * s * (1.0 - s)
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never records backward rules; parameters are treated as constants.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            op.as_ref().map(std::mem::discriminant)
        );
        let requires_grad = op.is_some();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let tracked = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, tracked.then_some(op))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        debug_assert!(value.all_finite());
        self.nodes.push(Node {
            value,
            requires_grad: !self.no_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Copies a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = tensor::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.record(out, &[x, w], Op::Conv2d { x, w, geom }))
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = tensor::linear(self.value(x), self.value(w))?;
        Ok(self.record(out, &[x, w], Op::Linear { x, w }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.record(out, &[a, b], Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.record(out, &[a], Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.record(out, &[a], Op::AddScalar(a))
    }

    /// `k - a`, elementwise.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, k)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::DegenerateVariance { channel: i });
        }
        let out = self.value(a).map(f64::sqrt);
        Ok(self.record(out, &[a], Op::Sqrt(a)))
    }

    fn channel_check(&self, x: Var, c: Var) -> Result<(usize, usize)> {
        let xs = self.value(x);
        let cs = self.value(c);
        if xs.shape().len() < 2 || cs.shape() != [xs.channels()] {
            return Err(Error::ShapeMismatch(format!(
                "per-channel op on {:?} with {:?}",
                xs.shape(),
                cs.shape()
            )));
        }
        Ok((xs.channels(), xs.spatial()))
    }

    fn channel_map(&self, x: Var, c: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ch, sp) = self.channel_check(x, c)?;
        let xs = self.value(x);
        let cv = self.value(c).data();
        let data = xs
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, cv[(i / sp) % ch]))
            .collect();
        Ok(Tensor::from_parts(xs.shape().to_vec(), data))
    }

    /// Broadcasts a `[C]` vector over `[N, C, ...]` and adds.
    pub fn channel_add(&mut self, x: Var, c: Var) -> Result<Var> {
        let out = self.channel_map(x, c, |a, b| a + b)?;
        Ok(self.record(out, &[x, c], Op::ChannelAdd { x, c }))
    }

    pub fn channel_sub(&mut self, x: Var, c: Var) -> Result<Var> {
        let out = self.channel_map(x, c, |a, b| a - b)?;
        Ok(self.record(out, &[x, c], Op::ChannelSub { x, c }))
    }

    pub fn channel_mul(&mut self, x: Var, c: Var) -> Result<Var> {
        let out = self.channel_map(x, c, |a, b| a * b)?;
        Ok(self.record(out, &[x, c], Op::ChannelMul { x, c }))
    }

    pub fn channel_div(&mut self, x: Var, c: Var) -> Result<Var> {
        let out = self.channel_map(x, c, |a, b| a / b)?;
        Ok(self.record(out, &[x, c], Op::ChannelDiv { x, c }))
    }

    /// Per-channel mean and biased variance, both differentiable.
    pub fn batch_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        let (mean, var) = tensor::batch_stats(self.value(x))?;
        let m = self.record(mean, &[x], Op::ChannelMean(x));
        let v = self.record(var, &[x], Op::ChannelVar(x));
        Ok((m, v))
    }

    /// Unit step with strict `v > 0`; backward uses the logistic surrogate of slope `alpha`.
    pub fn heaviside_sg(&mut self, v: Var, alpha: f64) -> Var {
        let out = self.value(v).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.record(out, &[v], Op::Heaviside { v, alpha })
    }

    /// Smooth twin of [`Tape::heaviside_sg`]: `σ(alpha·v)` in the forward pass too.
    pub fn logistic(&mut self, v: Var, alpha: f64) -> Var {
        let out = self.value(v).map(|x| sigmoid(alpha * x));
        self.record(out, &[v], Op::Logistic { v, alpha })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(out, &[x], Op::Reshape(x)))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = tensor::avg_pool2d(self.value(x), k)?;
        Ok(self.record(out, &[x], Op::AvgPool { x, k }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.record(out, &[x], Op::Mean(x))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidConfig("mean_of needs at least one input".into()))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            self.same_shape(first, x, "mean_of")?;
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(x).data()) {
                *a += b;
            }
        }
        let inv = 1.0 / xs.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a *= inv);
        Ok(self.record(acc, xs, Op::MeanOf(xs.to_vec())))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = logits_dims(z)?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let log_p = log_softmax_rows(z.data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -log_p[i * k + l])
            .sum::<f64>()
            / n as f64;
        let probs = log_p.iter().map(|v| v.exp()).collect();
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean Shannon entropy (natural log) of `softmax(logits)` rows.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = logits_dims(z)?;
        let log_probs = log_softmax_rows(z.data(), k);
        let probs: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
        let row_h: Vec<f64> = (0..n)
            .map(|i| {
                -(0..k)
                    .map(|j| {
                        let p = probs[i * k + j];
                        if p > 0.0 {
                            p * log_probs[i * k + j]
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        let h = row_h.iter().sum::<f64>() / n as f64;
        Ok(self.record(
            Tensor::scalar(h),
            &[logits],
            Op::Entropy {
                logits,
                probs,
                log_probs,
                row_h,
            },
        ))
    }

    /// Populates gradients of every gradient-requiring node reachable from `loss`.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                node.value.shape()
            )));
        }
        if node.op.is_none() {
            return Err(Error::DisconnectedGraph);
        }
        self.grads.resize(self.nodes.len(), None);
        let seed = Tensor::scalar(1.0);
        accumulate(&mut self.grads[loss.0], seed);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            let Some(op) = self.nodes[i].op.as_ref() else { continue };
            backprop(op, g, &self.nodes[i].value, &self.nodes, before);
        }
        Ok(())
    }
}

fn logits_dims(z: &Tensor) -> Result<(usize, usize)> {
    match z.shape() {
        [n, k] if *k >= 2 => Ok((*n, *k)),
        s => Err(Error::ShapeMismatch(format!(
            "expected [N, K>=2] logits, got {s:?}"
        ))),
    }
}

pub(crate) fn log_softmax_rows(z: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn send(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if nodes[v.0].requires_grad {
        accumulate(&mut grads[v.0], g);
    }
}

fn channel_reduce(x: &Tensor, ch: usize, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let sp = x.spatial();
    let mut acc = vec![0.0; ch];
    for (i, &v) in x.data().iter().enumerate() {
        acc[(i / sp) % ch] += f(i, v);
    }
    Tensor::from_parts(vec![ch], acc)
}

fn backprop(op: &Op, g: &Tensor, out: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) {
    let val = |v: &Var| &nodes[v.0].value;
    let gd = g.data();
    match op {
        Op::Conv2d { x, w, geom } => {
            if nodes[x.0].requires_grad {
                send(grads, nodes, *x, tensor::conv2d_grad_input(g, val(w), geom));
            }
            if nodes[w.0].requires_grad {
                send(grads, nodes, *w, tensor::conv2d_grad_weight(g, val(x), geom));
            }
        }
        Op::Linear { x, w } => {
            let (gx, gw) = tensor::linear_grads(g, val(x), val(w));
            send(grads, nodes, *x, gx);
            send(grads, nodes, *w, gw);
        }
        Op::Add(a, b) => {
            send(grads, nodes, *a, g.clone());
            send(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            send(grads, nodes, *a, g.clone());
            send(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            send(grads, nodes, *a, g.zip_map(bv, |g, y| g * y).unwrap());
            send(grads, nodes, *b, g.zip_map(av, |g, x| g * x).unwrap());
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            send(grads, nodes, *a, g.zip_map(bv, |g, y| g / y).unwrap());
            let gb: Vec<f64> = gd
                .iter()
                .zip(av.data().iter().zip(bv.data()))
                .map(|(g, (x, y))| -g * x / (y * y))
                .collect();
            send(grads, nodes, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
        }
        Op::Scale(a, k) => send(grads, nodes, *a, g.map(|v| v * k)),
        Op::AddScalar(a) => send(grads, nodes, *a, g.clone()),
        Op::Sqrt(a) => send(grads, nodes, *a, g.zip_map(out, |g, y| 0.5 * g / y).unwrap()),
        Op::ChannelAdd { x, c } | Op::ChannelSub { x, c } => {
            let sign = if matches!(op, Op::ChannelAdd { .. }) { 1.0 } else { -1.0 };
            send(grads, nodes, *x, g.clone());
            if nodes[c.0].requires_grad {
                let ch = val(c).len();
                send(grads, nodes, *c, channel_reduce(g, ch, |_, v| sign * v));
            }
        }
        Op::ChannelMul { x, c } => {
            let (xv, cv) = (val(x), val(c));
            let ch = cv.len();
            let sp = xv.spatial();
            if nodes[x.0].requires_grad {
                let gx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * cv.data()[(i / sp) % ch])
                    .collect();
                send(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            if nodes[c.0].requires_grad {
                let xd = xv.data();
                send(grads, nodes, *c, channel_reduce(g, ch, |i, g| g * xd[i]));
            }
        }
        Op::ChannelDiv { x, c } => {
            let (xv, cv) = (val(x), val(c));
            let ch = cv.len();
            let sp = xv.spatial();
            if nodes[x.0].requires_grad {
                let gx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g / cv.data()[(i / sp) % ch])
                    .collect();
                send(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            if nodes[c.0].requires_grad {
                let xd = xv.data();
                let cd = cv.data();
                send(
                    grads,
                    nodes,
                    *c,
                    channel_reduce(g, ch, |i, g| {
                        let cval = cd[(i / sp) % ch];
                        -g * xd[i] / (cval * cval)
                    }),
                );
            }
        }
        Op::ChannelMean(x) => {
            let xv = val(x);
            let (ch, sp) = (xv.channels(), xv.spatial());
            let count = (xv.len() / ch) as f64;
            let gx = (0..xv.len()).map(|i| gd[(i / sp) % ch] / count).collect();
            send(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::ChannelVar(x) => {
            let xv = val(x);
            let (ch, sp) = (xv.channels(), xv.spatial());
            let count = (xv.len() / ch) as f64;
            let (mean, _) = tensor::batch_stats(xv).expect("stats of recorded input");
            let md = mean.data();
            let gx = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = (i / sp) % ch;
                    gd[c] * 2.0 * (v - md[c]) / count
                })
                .collect();
            send(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::Heaviside { v, alpha } => {
            let gv = g.zip_map(val(v), |g, x| g * surrogate_grad(x, *alpha)).unwrap();
            send(grads, nodes, *v, gv);
        }
        Op::Logistic { v, alpha } => {
            let gv = g.zip_map(out, |g, y| g * alpha * y * (1.0 - y)).unwrap();
            send(grads, nodes, *v, gv);
        }
        Op::Reshape(x) => {
            let shape = val(x).shape().to_vec();
            send(grads, nodes, *x, Tensor::from_parts(shape, gd.to_vec()));
        }
        Op::AvgPool { x, k } => {
            send(grads, nodes, *x, tensor::avg_pool2d_grad(g, val(x).shape(), *k));
        }
        Op::Sum(x) => send(grads, nodes, *x, Tensor::full(val(x).shape(), g.item())),
        Op::Mean(x) => {
            let n = val(x).len() as f64;
            send(grads, nodes, *x, Tensor::full(val(x).shape(), g.item() / n));
        }
        Op::MeanOf(xs) => {
            let inv = 1.0 / xs.len() as f64;
            for x in xs {
                send(grads, nodes, *x, g.map(|v| v * inv));
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let shape = val(logits).shape().to_vec();
            let (n, k) = (shape[0], shape[1]);
            let scale = g.item() / n as f64;
            let mut gz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                gz[i * k + l] -= scale;
            }
            send(grads, nodes, *logits, Tensor::from_parts(shape, gz));
        }
        Op::Entropy {
            logits,
            probs,
            log_probs,
            row_h,
        } => {
            let shape = val(logits).shape().to_vec();
            let (n, k) = (shape[0], shape[1]);
            let scale = g.item() / n as f64;
            let gz = (0..n * k)
                .map(|idx| -scale * probs[idx] * (log_probs[idx] + row_h[idx / k]))
                .collect();
            send(grads, nodes, *logits, Tensor::from_parts(shape, gz));
        }
    }
}
