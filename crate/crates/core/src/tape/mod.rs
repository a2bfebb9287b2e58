//! Reverse-mode differentiation over batched `[batch, rows, cols]` planes.
//!
//! Parameters live in one flat vector owned by the tape; ops refer to them by
//! offset, so the gradient comes back as a vector of the same layout.

mod fd;

use thiserror::Error;

use crate::mesh::{avg_pool_raw, max_pool_raw, upsample_raw};
use crate::potts::open_sigmoid;
use crate::stencil::{conv_accumulate, conv_adjoint_input, conv_adjoint_kernel, Kernel};

pub use fd::fd_check;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("backward needs a scalar loss, node has {0} entries")]
    NotScalar(usize),
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    Shape { op: &'static str, a: Shape, b: Shape },
    #[error("parameter range {offset}+{len} exceeds {total}")]
    ParamRange { offset: usize, len: usize, total: usize },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    Step(f64),
    #[error("{0}")]
    Usage(String),
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(batch: usize, rows: usize, cols: usize) -> Self {
        Self { batch, rows, cols }
    }

    pub const SCALAR: Shape = Shape { batch: 1, rows: 1, cols: 1 };

    pub fn len(&self) -> usize {
        self.batch * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn plane(&self) -> usize {
        self.rows * self.cols
    }
}

/// One convolution term `K * x` with the kernel stored at `θ[offset..]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvTerm {
    pub input: Var,
    pub offset: usize,
    pub radius: usize,
}

/// `Σ aᵢ xᵢ + conv_scale · Σ K_s * x_s + coeff · θ[param]`, all operands of one shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Combine {
    pub linear: Vec<(Var, f64)>,
    pub convs: Vec<ConvTerm>,
    pub conv_scale: f64,
    pub scalar: Option<(usize, f64)>,
}

/// What the activation node exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActOutput {
    /// The last iterate `p^K`.
    Prob,
    /// The last pre-sigmoid argument `z^K` (so `p^K = Sig(z^K)`).
    Logit,
}

/// Unrolled sigmoid fixed point started from `p⁰ = ū`:
/// `z^{k} = −((p^{k−1} − ū)/c1dt + c2 · G*(1 − 2p^{k−1}))/ε`, `p^k = Sig(z^k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub c1dt: f64,
    pub c2: f64,
    pub epsilon: f64,
    pub iters: usize,
    pub gauss: Option<Kernel>,
    pub output: ActOutput,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Combine(Combine),
    Mix { a: Var, b: Var, param: usize },
    Sigmoid(Var),
    Activation { ubar: Var, spec: Activation, iterates: Vec<Vec<f64>> },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool(Var),
    Upsample(Var),
    BatchNorm { x: Var, scale: usize, shift: usize, eps: f64, xhat: Vec<f64>, inv_std: f64, mean: f64, var: f64 },
    BatchNormInfer { x: Var, scale: usize, shift: usize, eps: f64, mean: f64, var: f64 },
    CrossEntropy { pred: Var, target: Vec<f64> },
    CrossEntropyLogits { logits: Var, target: Vec<f64> },
    Sum(Var),
    Scale(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
}

/// Clamp applied to probabilities inside the cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

/// A recorded computation.
#[derive(Debug, Clone)]
pub struct Tape {
    params: Vec<f64>,
    nodes: Vec<Node>,
}

/// Gradients of a scalar node.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of an arbitrary node (zero if it does not reach the loss).
    pub fn node(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }
}

impl Tape {
    pub fn new(params: Vec<f64>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Batch mean and variance recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(f64, f64)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((*mean, *var)),
            _ => None,
        }
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn check_param(&self, offset: usize, len: usize) -> Result<(), TapeError> {
        if offset + len > self.params.len() {
            return Err(TapeError::ParamRange { offset, len, total: self.params.len() });
        }
        Ok(())
    }

    fn same(&self, op: &'static str, a: Var, b: Var) -> Result<Shape, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TapeError::Shape { op, a: sa, b: sb });
        }
        Ok(sa)
    }

    pub fn input(&mut self, shape: Shape, values: Vec<f64>) -> Var {
        assert_eq!(shape.len(), values.len(), "input length must match its shape");
        self.push(shape, values, Op::Input)
    }

    pub fn combine(&mut self, spec: Combine) -> Result<Var, TapeError> {
        let first = spec
            .linear
            .first()
            .map(|t| t.0)
            .or_else(|| spec.convs.first().map(|c| c.input))
            .ok_or_else(|| TapeError::Usage("combine needs at least one operand".into()))?;
        let shape = self.shape(first);
        for v in spec.linear.iter().map(|t| t.0).chain(spec.convs.iter().map(|c| c.input)) {
            self.same("combine", first, v)?;
        }
        for c in &spec.convs {
            let side = 2 * c.radius + 1;
            self.check_param(c.offset, side * side)?;
        }
        if let Some((p, _)) = spec.scalar {
            self.check_param(p, 1)?;
        }
        let value = eval_combine(&self.nodes, &self.params, &spec, shape);
        Ok(self.push(shape, value, Op::Combine(spec)))
    }

    /// `w a + (1 − w) b` with `w = θ[param]`.
    pub fn mix(&mut self, a: Var, b: Var, param: usize) -> Result<Var, TapeError> {
        let shape = self.same("mix", a, b)?;
        self.check_param(param, 1)?;
        let w = self.params[param];
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        Ok(self.push(shape, value, Op::Mix { a, b, param }))
    }

    /// Sigmoid kept inside the open unit interval.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&z| open_sigmoid(z)).collect();
        self.push(self.shape(x), value, Op::Sigmoid(x))
    }

    pub fn activation(&mut self, ubar: Var, spec: Activation) -> Result<Var, TapeError> {
        if spec.iters == 0 || !(spec.c1dt > 0.0) || !(spec.epsilon > 0.0) {
            return Err(TapeError::Usage("activation needs iters >= 1, c1dt > 0, epsilon > 0".into()));
        }
        if spec.c2 != 0.0 && spec.gauss.is_none() {
            return Err(TapeError::Usage("length term needs a Gaussian kernel".into()));
        }
        let shape = self.shape(ubar);
        let (value, iterates) = eval_activation(self.value(ubar), shape, &spec);
        Ok(self.push(shape, value, Op::Activation { ubar, spec, iterates }))
    }

    pub fn max_pool(&mut self, x: Var) -> Result<Var, TapeError> {
        let s = self.pool_shape(x)?;
        let (value, argmax) = eval_max_pool(self.value(x), self.shape(x));
        Ok(self.push(s, value, Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool(&mut self, x: Var) -> Result<Var, TapeError> {
        let s = self.pool_shape(x)?;
        let value = eval_avg_pool(self.value(x), self.shape(x));
        Ok(self.push(s, value, Op::AvgPool(x)))
    }

    fn pool_shape(&self, x: Var) -> Result<Shape, TapeError> {
        let s = self.shape(x);
        if !s.rows.is_multiple_of(2) || !s.cols.is_multiple_of(2) || s.rows == 0 || s.cols == 0 {
            return Err(TapeError::Usage(format!("cannot pool a {}x{} plane", s.rows, s.cols)));
        }
        Ok(Shape::new(s.batch, s.rows / 2, s.cols / 2))
    }

    pub fn upsample(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let value = eval_upsample(self.value(x), s);
        self.push(Shape::new(s.batch, 2 * s.rows, 2 * s.cols), value, Op::Upsample(x))
    }

    /// Batch normalization of one channel over batch and space with
    /// trainable scale `θ[scale]` and shift `θ[shift]`.
    pub fn batch_norm(&mut self, x: Var, scale: usize, shift: usize, eps: f64) -> Result<Var, TapeError> {
        self.check_param(scale, 1)?;
        self.check_param(shift, 1)?;
        let (value, xhat, inv_std, mean, var) = eval_batch_norm(self.value(x), self.params[scale], self.params[shift], eps);
        Ok(self.push(self.shape(x), value, Op::BatchNorm { x, scale, shift, eps, xhat, inv_std, mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        scale: usize,
        shift: usize,
        eps: f64,
        mean: f64,
        var: f64,
    ) -> Result<Var, TapeError> {
        self.check_param(scale, 1)?;
        self.check_param(shift, 1)?;
        let value = eval_bn_infer(self.value(x), self.params[scale], self.params[shift], eps, mean, var);
        Ok(self.push(self.shape(x), value, Op::BatchNormInfer { x, scale, shift, eps, mean, var }))
    }

    /// Mean clamped cross-entropy of probabilities against targets.
    pub fn cross_entropy(&mut self, pred: Var, target: Vec<f64>) -> Result<Var, TapeError> {
        self.check_target(pred, &target)?;
        let value = vec![eval_ce(self.value(pred), &target)];
        Ok(self.push(Shape::SCALAR, value, Op::CrossEntropy { pred, target }))
    }

    /// Mean cross-entropy of `Sig(logits)` against targets, evaluated without clamping.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: Vec<f64>) -> Result<Var, TapeError> {
        self.check_target(logits, &target)?;
        let value = vec![eval_ce_logits(self.value(logits), &target)];
        Ok(self.push(Shape::SCALAR, value, Op::CrossEntropyLogits { logits, target }))
    }

    fn check_target(&self, v: Var, target: &[f64]) -> Result<(), TapeError> {
        if target.len() != self.shape(v).len() {
            return Err(TapeError::Usage(format!("target has {} entries, prediction {}", target.len(), self.shape(v).len())));
        }
        Ok(())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = vec![self.value(x).iter().sum()];
        self.push(Shape::SCALAR, value, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x), value, Op::Scale(x, c))
    }

    /// Recomputes every node from the inputs and parameters.
    pub fn replay(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Input => node.value.clone(),
                Op::Combine(c) => eval_combine(&out, &self.params, c, node.shape),
                Op::Mix { a, b, param } => {
                    let w = self.params[*param];
                    out[a.0].value.iter().zip(&out[b.0].value).map(|(x, y)| w * x + (1.0 - w) * y).collect()
                }
                Op::Sigmoid(x) => out[x.0].value.iter().map(|&z| open_sigmoid(z)).collect(),
                Op::Activation { ubar, spec, .. } => eval_activation(&out[ubar.0].value, node.shape, spec).0,
                Op::MaxPool { x, .. } => eval_max_pool(&out[x.0].value, out[x.0].shape).0,
                Op::AvgPool(x) => eval_avg_pool(&out[x.0].value, out[x.0].shape),
                Op::Upsample(x) => eval_upsample(&out[x.0].value, out[x.0].shape),
                Op::BatchNorm { x, scale, shift, eps, .. } => {
                    eval_batch_norm(&out[x.0].value, self.params[*scale], self.params[*shift], *eps).0
                }
                Op::BatchNormInfer { x, scale, shift, eps, mean, var } => {
                    eval_bn_infer(&out[x.0].value, self.params[*scale], self.params[*shift], *eps, *mean, *var)
                }
                Op::CrossEntropy { pred, target } => vec![eval_ce(&out[pred.0].value, target)],
                Op::CrossEntropyLogits { logits, target } => vec![eval_ce_logits(&out[logits.0].value, target)],
                Op::Sum(x) => vec![out[x.0].value.iter().sum()],
                Op::Scale(x, c) => out[x.0].value.iter().map(|v| v * c).collect(),
            };
            out.push(Node { shape: node.shape, value, op: Op::Input });
        }
        out.into_iter().map(|n| n.value).collect()
    }

    /// Whether [`Tape::replay`] reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> bool {
        self.replay()
            .iter()
            .zip(&self.nodes)
            .all(|(a, n)| a.len() == n.value.len() && a.iter().zip(&n.value).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Gradient of the scalar node `loss` with respect to the parameters.
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>, TapeError> {
        Ok(self.backward_full(loss, 1.0)?.params)
    }

    /// Adjoints of every node and parameter for the scalar node `loss`, seeded with `seed`.
    pub fn backward_full(&self, loss: Var, seed: f64) -> Result<Gradients, TapeError> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(TapeError::NotScalar(n));
        }
        let mut gp = vec![0.0; self.params.len()];
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &gi, &mut g, &mut gp);
            g[i] = Some(gi);
        }
        Ok(Gradients { params: gp, nodes: g })
    }

    fn backprop(&self, node: &Node, gy: &[f64], g: &mut [Option<Vec<f64>>], gp: &mut [f64]) {
        let shape = node.shape;
        match &node.op {
            Op::Input => {}
            Op::Combine(c) => {
                for &(v, a) in &c.linear {
                    axpy(acc(g, v, shape.len()), a, gy);
                }
                let plane = shape.plane();
                for t in &c.convs {
                    let side = 2 * t.radius + 1;
                    let k = &self.params[t.offset..t.offset + side * side];
                    let x = &self.nodes[t.input.0].value;
                    let gk = &mut gp[t.offset..t.offset + side * side];
                    for b in 0..shape.batch {
                        let r = b * plane..(b + 1) * plane;
                        conv_adjoint_kernel(&gy[r.clone()], &x[r], shape.rows, shape.cols, t.radius, c.conv_scale, gk);
                    }
                    let gx = acc(g, t.input, shape.len());
                    for b in 0..shape.batch {
                        let r = b * plane..(b + 1) * plane;
                        conv_adjoint_input(&gy[r.clone()], shape.rows, shape.cols, k, t.radius, c.conv_scale, &mut gx[r]);
                    }
                }
                if let Some((p, coeff)) = c.scalar {
                    gp[p] += coeff * gy.iter().sum::<f64>();
                }
            }
            Op::Mix { a, b, param } => {
                let w = self.params[*param];
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                gp[*param] += gy.iter().zip(va.iter().zip(vb)).map(|(gi, (x, y))| gi * (x - y)).sum::<f64>();
                axpy(acc(g, *a, shape.len()), w, gy);
                axpy(acc(g, *b, shape.len()), 1.0 - w, gy);
            }
            Op::Sigmoid(x) => {
                let gx = acc(g, *x, shape.len());
                for ((d, gi), p) in gx.iter_mut().zip(gy).zip(&node.value) {
                    *d += gi * p * (1.0 - p);
                }
            }
            Op::Activation { ubar, spec, iterates } => {
                let gu = backprop_activation(gy, iterates, shape, spec);
                axpy(acc(g, *ubar, shape.len()), 1.0, &gu);
            }
            Op::MaxPool { x, argmax } => {
                let gx = acc(g, *x, self.nodes[x.0].value.len());
                for (gi, &src) in gy.iter().zip(argmax) {
                    gx[src as usize] += gi;
                }
            }
            Op::AvgPool(x) => {
                let xs = self.nodes[x.0].shape;
                let gx = acc(g, *x, xs.len());
                let (pr, pc) = (shape.rows, shape.cols);
                for b in 0..shape.batch {
                    for i in 0..pr {
                        for j in 0..pc {
                            let v = 0.25 * gy[b * pr * pc + i * pc + j];
                            let base = b * xs.plane() + 2 * i * xs.cols + 2 * j;
                            gx[base] += v;
                            gx[base + 1] += v;
                            gx[base + xs.cols] += v;
                            gx[base + xs.cols + 1] += v;
                        }
                    }
                }
            }
            Op::Upsample(x) => {
                let xs = self.nodes[x.0].shape;
                let gx = acc(g, *x, xs.len());
                for b in 0..shape.batch {
                    for i in 0..shape.rows {
                        for j in 0..shape.cols {
                            gx[b * xs.plane() + (i / 2) * xs.cols + j / 2] += gy[b * shape.plane() + i * shape.cols + j];
                        }
                    }
                }
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, .. } => {
                let gamma = self.params[*scale];
                let n = gy.len() as f64;
                let sum_g: f64 = gy.iter().sum();
                let sum_gx: f64 = gy.iter().zip(xhat).map(|(a, b)| a * b).sum();
                gp[*scale] += sum_gx;
                gp[*shift] += sum_g;
                let gx = acc(g, *x, shape.len());
                let k = gamma * inv_std / n;
                for ((d, gi), xh) in gx.iter_mut().zip(gy).zip(xhat) {
                    *d += k * (n * gi - sum_g - xh * sum_gx);
                }
            }
            Op::BatchNormInfer { x, scale, shift, eps, mean, var } => {
                let inv = 1.0 / (var + eps).sqrt();
                let gamma = self.params[*scale];
                let xv = &self.nodes[x.0].value;
                gp[*scale] += gy.iter().zip(xv).map(|(gi, xi)| gi * (xi - mean) * inv).sum::<f64>();
                gp[*shift] += gy.iter().sum::<f64>();
                axpy(acc(g, *x, shape.len()), gamma * inv, gy);
            }
            Op::CrossEntropy { pred, target } => {
                let p = &self.nodes[pred.0].value;
                let n = p.len() as f64;
                let gx = acc(g, *pred, p.len());
                for ((d, &pi), &t) in gx.iter_mut().zip(p).zip(target) {
                    if pi > CE_CLAMP && pi < 1.0 - CE_CLAMP {
                        *d += gy[0] * (-(t / pi) + (1.0 - t) / (1.0 - pi)) / n;
                    }
                }
            }
            Op::CrossEntropyLogits { logits, target } => {
                let z = &self.nodes[logits.0].value;
                let n = z.len() as f64;
                let gx = acc(g, *logits, z.len());
                for ((d, &zi), &t) in gx.iter_mut().zip(z).zip(target) {
                    *d += gy[0] * (crate::potts::sigmoid(zi) - t) / n;
                }
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.len();
                acc(g, *x, len).iter_mut().for_each(|d| *d += gy[0]);
            }
            Op::Scale(x, c) => axpy(acc(g, *x, shape.len()), *c, gy),
        }
    }
}

fn acc(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn eval_combine(nodes: &[Node], params: &[f64], c: &Combine, shape: Shape) -> Vec<f64> {
    let mut out = vec![0.0; shape.len()];
    for &(v, a) in &c.linear {
        axpy(&mut out, a, &nodes[v.0].value);
    }
    let plane = shape.plane();
    for t in &c.convs {
        let side = 2 * t.radius + 1;
        let k = &params[t.offset..t.offset + side * side];
        let x = &nodes[t.input.0].value;
        for b in 0..shape.batch {
            let r = b * plane..(b + 1) * plane;
            conv_accumulate(&x[r.clone()], shape.rows, shape.cols, k, t.radius, c.conv_scale, &mut out[r]);
        }
    }
    if let Some((p, coeff)) = c.scalar {
        let s = coeff * params[p];
        out.iter_mut().for_each(|v| *v += s);
    }
    out
}

/// Applies the symmetric Gaussian plane by plane: `out = G * x`.
fn gauss_planes(x: &[f64], shape: Shape, k: &Kernel) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let plane = shape.plane();
    for b in 0..shape.batch {
        let r = b * plane..(b + 1) * plane;
        conv_accumulate(&x[r.clone()], shape.rows, shape.cols, k.weights(), k.radius(), 1.0, &mut out[r]);
    }
    out
}

/// Returns the node value and the stored iterates `p⁰ … p^{K−1}` plus `z^K`.
fn eval_activation(ubar: &[f64], shape: Shape, spec: &Activation) -> (Vec<f64>, Vec<Vec<f64>>) {
    let inv = 1.0 / spec.c1dt;
    let mut iterates = Vec::with_capacity(spec.iters + 1);
    let mut p = ubar.to_vec();
    let mut z = Vec::new();
    for _ in 0..spec.iters {
        let length = match (&spec.gauss, spec.c2 != 0.0) {
            (Some(gk), true) => Some(gauss_planes(&p.iter().map(|v| 1.0 - 2.0 * v).collect::<Vec<_>>(), shape, gk)),
            _ => None,
        };
        z = p
            .iter()
            .zip(ubar)
            .enumerate()
            .map(|(i, (&pk, &u))| {
                let mut a = (pk - u) * inv;
                if let Some(l) = &length {
                    a += spec.c2 * l[i];
                }
                -a / spec.epsilon
            })
            .collect();
        let next: Vec<f64> = z.iter().map(|&zi| open_sigmoid(zi)).collect();
        iterates.push(std::mem::replace(&mut p, next));
    }
    iterates.push(z.clone());
    let value = match spec.output {
        ActOutput::Prob => p,
        ActOutput::Logit => z,
    };
    (value, iterates)
}

fn backprop_activation(gy: &[f64], iterates: &[Vec<f64>], shape: Shape, spec: &Activation) -> Vec<f64> {
    let k_max = spec.iters;
    let z_last = &iterates[k_max];
    let inv = 1.0 / (spec.c1dt * spec.epsilon);
    let length = spec.c2 != 0.0 && spec.gauss.is_some();
    let mut gz: Vec<f64> = match spec.output {
        ActOutput::Logit => gy.to_vec(),
        ActOutput::Prob => gy
            .iter()
            .zip(z_last)
            .map(|(g, &z)| {
                let p = open_sigmoid(z);
                g * p * (1.0 - p)
            })
            .collect(),
    };
    let mut gu = vec![0.0; gy.len()];
    for k in (1..=k_max).rev() {
        // z^k depends on p^{k−1} and ū.
        axpy(&mut gu, inv, &gz);
        let mut gp: Vec<f64> = gz.iter().map(|g| -g * inv).collect();
        if length {
            let gk = spec.gauss.as_ref().expect("checked");
            let conv = gauss_planes(&gz, shape, gk);
            axpy(&mut gp, 2.0 * spec.c2 / spec.epsilon, &conv);
        }
        if k == 1 {
            axpy(&mut gu, 1.0, &gp);
        } else {
            let prev = &iterates[k - 1];
            gz = gp.iter().zip(prev).map(|(g, p)| g * p * (1.0 - p)).collect();
        }
    }
    gu
}

fn eval_max_pool(x: &[f64], s: Shape) -> (Vec<f64>, Vec<u32>) {
    let (plane, half) = (s.plane(), s.plane() / 4);
    let mut out = vec![0.0; s.batch * half];
    let mut argmax = vec![0u32; s.batch * half];
    for b in 0..s.batch {
        max_pool_raw(&x[b * plane..(b + 1) * plane], s.rows, s.cols, &mut out[b * half..(b + 1) * half], Some(&mut argmax[b * half..(b + 1) * half]));
        for a in &mut argmax[b * half..(b + 1) * half] {
            *a += (b * plane) as u32;
        }
    }
    (out, argmax)
}

fn eval_avg_pool(x: &[f64], s: Shape) -> Vec<f64> {
    let (plane, half) = (s.plane(), s.plane() / 4);
    let mut out = vec![0.0; s.batch * half];
    for b in 0..s.batch {
        avg_pool_raw(&x[b * plane..(b + 1) * plane], s.rows, s.cols, &mut out[b * half..(b + 1) * half]);
    }
    out
}

fn eval_upsample(x: &[f64], s: Shape) -> Vec<f64> {
    let plane = s.plane();
    let mut out = vec![0.0; 4 * x.len()];
    for b in 0..s.batch {
        upsample_raw(&x[b * plane..(b + 1) * plane], s.rows, s.cols, &mut out[4 * b * plane..4 * (b + 1) * plane]);
    }
    out
}

fn eval_batch_norm(x: &[f64], gamma: f64, beta: f64, eps: f64) -> (Vec<f64>, Vec<f64>, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat.iter().map(|h| gamma * h + beta).collect();
    (y, xhat, inv_std, mean, var)
}

fn eval_bn_infer(x: &[f64], gamma: f64, beta: f64, eps: f64, mean: f64, var: f64) -> Vec<f64> {
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().map(|v| gamma * (v - mean) * inv + beta).collect()
}

fn eval_ce(p: &[f64], t: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&pi, &ti)| {
            let q = pi.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            -(ti * q.ln() + (1.0 - ti) * (1.0 - q).ln())
        })
        .sum();
    total / p.len() as f64
}

fn eval_ce_logits(z: &[f64], t: &[f64]) -> f64 {
    let total: f64 = z.iter().zip(t).map(|(&zi, &ti)| zi.max(0.0) - ti * zi + (-zi.abs()).exp().ln_1p()).sum();
    total / z.len() as f64
}
