//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records one forward pass. Every node stores its value and the
//! primitive that produced it; [`Tape::backward`] walks the nodes in reverse
//! creation order exactly once and returns the gradient of a scalar root with
//! respect to every node. Gradient contributions are accumulated in node order,
//! and batched kernels reduce per-sample partials in sample order, so results
//! do not depend on the rayon thread count.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectral::fft2_in_place;
use crate::swd::SlicePlan;
use crate::tensor::{elementwise, ElementwiseOp, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Square(usize),
    Exp(usize),
    Relu(usize),
    ClampMax(usize, f64),
    Sum(usize),
    SumSquares(usize),
    DivScalar(usize, usize),
    Dft2Re(usize),
    Dft2Im(usize),
    SumChannels(usize),
    Swd(usize, usize, Arc<SlicePlan>),
    SwdTargets { p: usize, plan: Arc<SlicePlan>, vp: Arc<Vec<f64>>, targets: Vec<Arc<Vec<f64>>> },
    Select(usize, usize),
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Linear { input: usize, weight: usize, bias: usize },
    SoftmaxCe { logits: usize, labels: Arc<Vec<usize>> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one root, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    /// A constant copy of `v`'s current value; gradient does not flow back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn push_derived(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let value = elementwise(op, self.value(a), b.map(|b| self.value(b)))?;
        let (node_op, inputs) = match (op, b) {
            (ElementwiseOp::Add, Some(b)) => (Op::Add(a.0, b.0), vec![a.0, b.0]),
            (ElementwiseOp::Sub, Some(b)) => (Op::Sub(a.0, b.0), vec![a.0, b.0]),
            (ElementwiseOp::Mul, Some(b)) => (Op::Mul(a.0, b.0), vec![a.0, b.0]),
            (ElementwiseOp::Square, None) => (Op::Square(a.0), vec![a.0]),
            (ElementwiseOp::Scale(s), None) => (Op::Scale(a.0, s), vec![a.0]),
            (ElementwiseOp::Exp, None) => (Op::Exp(a.0), vec![a.0]),
            (ElementwiseOp::Relu, None) => (Op::Relu(a.0), vec![a.0]),
            _ => unreachable!("operand arity checked by elementwise"),
        };
        Ok(self.push_derived(value, node_op, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push_derived(value, Op::Square(a.0), &[a.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| s * x);
        self.push_derived(value, Op::Scale(a.0, s), &[a.0])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push_derived(value, Op::AddConst(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push_derived(value, Op::Exp(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push_derived(value, Op::Relu(a.0), &[a.0])
    }

    /// `min(a, limit)`; zero gradient where clamped.
    pub fn clamp_max(&mut self, a: Var, limit: f64) -> Var {
        let value = self.value(a).map(|x| x.min(limit));
        self.push_derived(value, Op::ClampMax(a.0, limit), &[a.0])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_derived(value, Op::Sum(a.0), &[a.0])
    }

    /// Σ values², as a scalar.
    pub fn frobenius_norm_sq(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(crate::tensor::frobenius_norm_sq(self.value(a)));
        self.push_derived(value, Op::SumSquares(a.0), &[a.0])
    }

    /// Divides every element of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Contract("divisor must be a scalar node".into()));
        }
        let d = self.value(s).item();
        let value = self.value(a).map(|x| x / d);
        Ok(self.push_derived(value, Op::DivScalar(a.0, s.0), &[a.0, s.0]))
    }

    /// Real part of the per-channel 2-D DFT of a `C×W×H` node.
    pub fn dft2_re(&mut self, a: Var) -> Result<Var> {
        let spec = crate::spectral::dft2_per_channel(self.value(a))?;
        Ok(self.push_derived(spec.real_part(), Op::Dft2Re(a.0), &[a.0]))
    }

    /// Imaginary part of the per-channel 2-D DFT of a `C×W×H` node.
    pub fn dft2_im(&mut self, a: Var) -> Result<Var> {
        let spec = crate::spectral::dft2_per_channel(self.value(a))?;
        Ok(self.push_derived(spec.imag_part(), Op::Dft2Im(a.0), &[a.0]))
    }

    /// Sums a `C×W×H` node over channels, giving `W×H`.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let (c, w, h) = self.value(a).dims3()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; w * h];
        for ch in 0..c {
            for (o, s) in out.iter_mut().zip(&src[ch * w * h..(ch + 1) * w * h]) {
                *o += s;
            }
        }
        let value = Tensor::new(vec![w, h], out)?;
        Ok(self.push_derived(value, Op::SumChannels(a.0), &[a.0]))
    }

    /// Sliced Wasserstein distance between two density nodes under a fixed plan.
    pub fn swd(&mut self, p: Var, q: Var, plan: Arc<SlicePlan>) -> Result<Var> {
        let value = Tensor::scalar(plan.distance(self.value(p), self.value(q))?);
        Ok(self.push_derived(value, Op::Swd(p.0, q.0, plan), &[p.0, q.0]))
    }

    /// Distances from density `p` to several constant targets given as
    /// flattened attention vectors ([`SlicePlan::flat_vectors`]); returns a
    /// `[m]` node. The vectors of `p` are computed once and reused.
    pub fn swd_to_targets(&mut self, p: Var, targets: &[Arc<Vec<f64>>], plan: &Arc<SlicePlan>) -> Result<Var> {
        let vp = Arc::new(plan.flat_vectors(self.value(p))?);
        let d = targets
            .iter()
            .map(|t| plan.distance_between_vectors(&vp, t))
            .collect::<Result<Vec<_>>>()?;
        let op = Op::SwdTargets { p: p.0, plan: plan.clone(), vp, targets: targets.to_vec() };
        Ok(self.push_derived(Tensor::from_vec(d), op, &[p.0]))
    }

    /// Slice `index` along the leading (batch) axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let (&n, rest) = t
            .shape()
            .split_first()
            .ok_or_else(|| Error::dim("cannot select from a scalar"))?;
        if index >= n {
            return Err(Error::dim(format!("index {index} out of range for batch of {n}")));
        }
        let stride: usize = rest.iter().product();
        let value = Tensor::new(rest.to_vec(), t.data()[index * stride..(index + 1) * stride].to_vec())?;
        Ok(self.push_derived(value, Op::Select(a.0, index), &[a.0]))
    }

    /// 3×3 convolution with zero padding 1 over `[N, Cin, R, Q]` input.
    /// `weight` is `[Cout, Cin·9]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input), self.value(weight), self.value(bias), stride)?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; geom.n * geom.out_len()];
        out.par_chunks_mut(geom.out_len()).enumerate().for_each(|(i, o)| {
            let col = geom.im2col(&x[i * geom.in_len()..(i + 1) * geom.in_len()]);
            geom.forward_sample(&col, w, b, o);
        });
        let value = Tensor::new(vec![geom.n, geom.cout, geom.ro, geom.qo], out)?;
        Ok(self.push_derived(
            value,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride },
            &[input.0, weight.0, bias.0],
        ))
    }

    /// 2×2 average pooling with stride 2 over `[N, C, R, Q]`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, r, q) = dims4(t)?;
        if r % 2 != 0 || q % 2 != 0 {
            return Err(Error::dim(format!("avg_pool2 needs even spatial dims, got {r}x{q}")));
        }
        let (ro, qo) = (r / 2, q / 2);
        let src = t.data();
        let mut out = vec![0.0; n * c * ro * qo];
        for plane in 0..n * c {
            let s = &src[plane * r * q..];
            let o = &mut out[plane * ro * qo..];
            for y in 0..ro {
                for x in 0..qo {
                    let base = 2 * y * q + 2 * x;
                    o[y * qo + x] = 0.25 * (s[base] + s[base + 1] + s[base + q] + s[base + q + 1]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ro, qo], out)?;
        Ok(self.push_derived(value, Op::AvgPool2(a.0), &[a.0]))
    }

    /// Mean over spatial positions: `[N, C, R, Q] → [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, r, q) = dims4(t)?;
        let area = (r * q) as f64;
        let out = t.data().chunks_exact(r * q).map(|p| p.iter().sum::<f64>() / area).collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push_derived(value, Op::GlobalAvgPool(a.0), &[a.0]))
    }

    /// Affine map `[N, F] → [N, O]` with `weight` `[O, F]` and `bias` `[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, f) = dims2(x)?;
        let (o, fw) = dims2(w)?;
        if f != fw || b.shape() != [o] {
            return Err(Error::dim(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let xi = &x.data()[i * f..(i + 1) * f];
            for j in 0..o {
                let wj = &w.data()[j * f..(j + 1) * f];
                out[i * o + j] = b.data()[j] + dot(xi, wj);
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push_derived(
            value,
            Op::Linear { input: input.0, weight: weight.0, bias: bias.0 },
            &[input.0, weight.0, bias.0],
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = dims2(self.value(logits))?;
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows of logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::data(format!("label {bad} outside 0..{k}")));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            total += log_sum_exp(row) - row[label];
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push_derived(
            value,
            Op::SoftmaxCe { logits: logits.0, labels: Arc::new(labels.to_vec()) },
            &[logits.0],
        ))
    }

    /// Gradient of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |dst| add_into(dst, gd));
                self.accum(grads, *b, |dst| add_into(dst, gd));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |dst| add_into(dst, gd));
                self.accum(grads, *b, |dst| {
                    for (d, s) in dst.iter_mut().zip(gd) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                self.accum(grads, *a, |dst| {
                    for ((d, s), y) in dst.iter_mut().zip(gd).zip(vb) {
                        *d += s * y;
                    }
                });
                self.accum(grads, *b, |dst| {
                    for ((d, s), x) in dst.iter_mut().zip(gd).zip(va) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accum(grads, *a, |dst| {
                for (d, x) in dst.iter_mut().zip(gd) {
                    *d += s * x;
                }
            }),
            Op::AddConst(a) => self.accum(grads, *a, |dst| add_into(dst, gd)),
            Op::Square(a) => {
                let va = val(*a).data();
                self.accum(grads, *a, |dst| {
                    for ((d, s), x) in dst.iter_mut().zip(gd).zip(va) {
                        *d += 2.0 * x * s;
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.accum(grads, *a, |dst| {
                    for ((d, s), y) in dst.iter_mut().zip(gd).zip(out) {
                        *d += s * y;
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a).data();
                self.accum(grads, *a, |dst| {
                    for ((d, s), x) in dst.iter_mut().zip(gd).zip(va) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::ClampMax(a, limit) => {
                let va = val(*a).data();
                self.accum(grads, *a, |dst| {
                    for ((d, s), x) in dst.iter_mut().zip(gd).zip(va) {
                        if *x < *limit {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accum(grads, *a, |dst| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::SumSquares(a) => {
                let s = gd[0];
                let va = val(*a).data();
                self.accum(grads, *a, |dst| {
                    for (d, x) in dst.iter_mut().zip(va) {
                        *d += 2.0 * s * x;
                    }
                });
            }
            Op::DivScalar(a, s) => {
                let d = val(*s).item();
                let va = val(*a).data();
                self.accum(grads, *a, |dst| {
                    for (o, x) in dst.iter_mut().zip(gd) {
                        *o += x / d;
                    }
                });
                let ds: f64 = -gd.iter().zip(va).map(|(x, y)| x * y).sum::<f64>() / (d * d);
                self.accum(grads, *s, |dst| dst[0] += ds);
            }
            Op::Dft2Re(a) | Op::Dft2Im(a) => {
                let (c, w, h) = g.dims3()?;
                let mut buf: Vec<Complex64> = gd.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                fft2_in_place(&mut buf, c, w, h);
                let take_re = matches!(node.op, Op::Dft2Re(_));
                self.accum(grads, *a, |dst| {
                    for (d, z) in dst.iter_mut().zip(&buf) {
                        *d += if take_re { z.re } else { z.im };
                    }
                });
            }
            Op::SumChannels(a) => {
                let plane = gd.len();
                self.accum(grads, *a, |dst| {
                    for chunk in dst.chunks_exact_mut(plane) {
                        add_into(chunk, gd);
                    }
                });
            }
            Op::Swd(p, q, plan) => {
                let grad_p = plan.distance_grad(val(*p), val(*q))?;
                let s = gd[0];
                self.accum(grads, *p, |dst| {
                    for (d, x) in dst.iter_mut().zip(&grad_p) {
                        *d += s * x;
                    }
                });
                self.accum(grads, *q, |dst| {
                    for (d, x) in dst.iter_mut().zip(&grad_p) {
                        *d -= s * x;
                    }
                });
            }
            Op::SwdTargets { p, plan, vp, targets } => {
                let mut coef = vec![0.0; vp.len()];
                for (t, &g) in targets.iter().zip(gd) {
                    for ((c, a), b) in coef.iter_mut().zip(vp.iter()).zip(t.iter()) {
                        *c += 2.0 * g * (a - b);
                    }
                }
                let grad = plan.scatter_bins(&coef);
                self.accum(grads, *p, |dst| add_into(dst, &grad));
            }
            Op::Select(a, index) => {
                let stride = gd.len();
                self.accum(grads, *a, |dst| add_into(&mut dst[index * stride..(index + 1) * stride], gd));
            }
            Op::Conv2d { input, weight, bias, stride } => {
                let geom = ConvGeom::new(val(*input), val(*weight), val(*bias), *stride)?;
                let x = val(*input).data();
                let w = val(*weight).data();
                let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..geom.n)
                    .into_par_iter()
                    .map(|i| {
                        let xi = &x[i * geom.in_len()..(i + 1) * geom.in_len()];
                        let gi = &gd[i * geom.out_len()..(i + 1) * geom.out_len()];
                        geom.backward_sample(xi, w, gi)
                    })
                    .collect();
                let in_len = geom.in_len();
                self.accum(grads, *input, |dst| {
                    for (i, (dx, _, _)) in parts.iter().enumerate() {
                        add_into(&mut dst[i * in_len..(i + 1) * in_len], dx);
                    }
                });
                self.accum(grads, *weight, |dst| parts.iter().for_each(|(_, dw, _)| add_into(dst, dw)));
                self.accum(grads, *bias, |dst| parts.iter().for_each(|(_, _, db)| add_into(dst, db)));
            }
            Op::AvgPool2(a) => {
                let (n, c, r, q) = dims4(val(*a))?;
                let (ro, qo) = (r / 2, q / 2);
                self.accum(grads, *a, |dst| {
                    for plane in 0..n * c {
                        let d = &mut dst[plane * r * q..(plane + 1) * r * q];
                        let s = &gd[plane * ro * qo..(plane + 1) * ro * qo];
                        for y in 0..ro {
                            for x in 0..qo {
                                let v = 0.25 * s[y * qo + x];
                                let base = 2 * y * q + 2 * x;
                                d[base] += v;
                                d[base + 1] += v;
                                d[base + q] += v;
                                d[base + q + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, r, q) = dims4(val(*a))?;
                let area = (r * q) as f64;
                self.accum(grads, *a, |dst| {
                    for (plane, s) in dst.chunks_exact_mut(r * q).zip(gd) {
                        plane.iter_mut().for_each(|d| *d += s / area);
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = dims2(val(*input))?;
                let o = val(*bias).len();
                let (x, w) = (val(*input).data(), val(*weight).data());
                self.accum(grads, *input, |dst| {
                    for i in 0..n {
                        for j in 0..o {
                            let s = gd[i * o + j];
                            for (d, wv) in dst[i * f..(i + 1) * f].iter_mut().zip(&w[j * f..(j + 1) * f]) {
                                *d += s * wv;
                            }
                        }
                    }
                });
                self.accum(grads, *weight, |dst| {
                    for i in 0..n {
                        for j in 0..o {
                            let s = gd[i * o + j];
                            for (d, xv) in dst[j * f..(j + 1) * f].iter_mut().zip(&x[i * f..(i + 1) * f]) {
                                *d += s * xv;
                            }
                        }
                    }
                });
                self.accum(grads, *bias, |dst| {
                    for i in 0..n {
                        add_into(dst, &gd[i * o..(i + 1) * o]);
                    }
                });
            }
            Op::SoftmaxCe { logits, labels } => {
                let (n, k) = dims2(val(*logits))?;
                let z = val(*logits).data();
                let s = gd[0] / n as f64;
                self.accum(grads, *logits, |dst| {
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &z[i * k..(i + 1) * k];
                        let lse = log_sum_exp(row);
                        for j in 0..k {
                            let p = (row[j] - lse).exp();
                            let target = if j == label { 1.0 } else { 0.0 };
                            dst[i * k + j] += s * (p - target);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], input: usize, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[input];
        if !node.needs_grad {
            return;
        }
        let slot = grads[input].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(Error::dim(format!("expected rank-2 tensor, got {s:?}"))),
    }
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(Error::dim(format!("expected rank-4 tensor, got {s:?}"))),
    }
}

/// Shape bookkeeping for a 3×3, padding-1 convolution.
struct ConvGeom {
    n: usize,
    cin: usize,
    r: usize,
    q: usize,
    cout: usize,
    stride: usize,
    ro: usize,
    qo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Self> {
        let (n, cin, r, q) = dims4(x)?;
        let (cout, k) = dims2(w)?;
        if stride == 0 || k != cin * 9 || b.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}, stride {stride}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let ro = (r - 1) / stride + 1;
        let qo = (q - 1) / stride + 1;
        Ok(Self { n, cin, r, q, cout, stride, ro, qo })
    }

    fn in_len(&self) -> usize {
        self.cin * self.r * self.q
    }

    fn out_len(&self) -> usize {
        self.cout * self.ro * self.qo
    }

    fn positions(&self) -> usize {
        self.ro * self.qo
    }

    /// Column matrix `[Cin·9, Ro·Qo]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut col = vec![0.0; self.cin * 9 * p];
        for ci in 0..self.cin {
            let plane = &x[ci * self.r * self.q..(ci + 1) * self.r * self.q];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                    for oy in 0..self.ro {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.r as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.q..(iy as usize + 1) * self.q];
                        for ox in 0..self.qo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < self.q as isize {
                                row[oy * self.qo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im_add(&self, dcol: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.r * self.q..(ci + 1) * self.r * self.q];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcol[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                    for oy in 0..self.ro {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.r as isize {
                            continue;
                        }
                        for ox in 0..self.qo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < self.q as isize {
                                plane[iy as usize * self.q + ix as usize] += row[oy * self.qo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward_sample(&self, col: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
        let p = self.positions();
        let k = self.cin * 9;
        for co in 0..self.cout {
            let o = &mut out[co * p..(co + 1) * p];
            o.iter_mut().for_each(|v| *v = b[co]);
            for kk in 0..k {
                let wv = w[co * k + kk];
                if wv == 0.0 {
                    continue;
                }
                for (ov, cv) in o.iter_mut().zip(&col[kk * p..(kk + 1) * p]) {
                    *ov += wv * cv;
                }
            }
        }
    }

    /// Returns `(dx, dw, db)` for one sample.
    fn backward_sample(&self, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = self.positions();
        let k = self.cin * 9;
        let col = self.im2col(x);
        let mut dw = vec![0.0; self.cout * k];
        let mut db = vec![0.0; self.cout];
        let mut dcol = vec![0.0; k * p];
        for co in 0..self.cout {
            let gc = &g[co * p..(co + 1) * p];
            db[co] = gc.iter().sum();
            for kk in 0..k {
                let crow = &col[kk * p..(kk + 1) * p];
                dw[co * k + kk] = dot(gc, crow);
                let wv = w[co * k + kk];
                for (d, gv) in dcol[kk * p..(kk + 1) * p].iter_mut().zip(gc) {
                    *d += wv * gv;
                }
            }
        }
        let mut dx = vec![0.0; self.in_len()];
        self.col2im_add(&dcol, &mut dx);
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, finite_difference_check_many};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.square(x);
        let root = tape.sum(sq);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
        let root = tape.frobenius_norm_sq(x);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.0, 0.0, 0.0]);
        let _ = tape.value(y);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn composite_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[1, 4, 4]);
        let other = rand_tensor(&mut rng, &[1, 4, 4]);
        let report = finite_difference_check(
            |tape, v| {
                let o = tape.constant(other.clone());
                let prod = tape.mul(v, o)?;
                let e = tape.exp(prod);
                let r = tape.relu(v);
                let s = tape.add(e, r)?;
                let d = tape.sub(s, o)?;
                let sq = tape.square(d);
                let sc = tape.scale(sq, 0.7);
                Ok(tape.sum(sc))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        type Build = fn(&mut Tape, Var) -> Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("square", |t, v| {
                let a = t.square(v);
                Ok(t.sum(a))
            }),
            ("exp", |t, v| {
                let a = t.exp(v);
                Ok(t.sum(a))
            }),
            ("relu", |t, v| {
                let a = t.relu(v);
                let b = t.square(a);
                Ok(t.sum(b))
            }),
            ("frobenius", |t, v| Ok(t.frobenius_norm_sq(v))),
            ("div_scalar", |t, v| {
                let s = t.frobenius_norm_sq(v);
                let sq = t.square(v);
                let p = t.div_scalar(sq, s)?;
                let p2 = t.square(p);
                Ok(t.sum(p2))
            }),
            ("dft_re", |t, v| {
                let a = t.dft2_re(v)?;
                let b = t.square(a);
                Ok(t.sum(b))
            }),
            ("dft_im", |t, v| {
                let a = t.dft2_im(v)?;
                let b = t.add_const(a, 0.3);
                let c = t.square(b);
                Ok(t.sum(c))
            }),
            ("sum_channels", |t, v| {
                let a = t.sum_channels(v)?;
                let b = t.square(a);
                Ok(t.sum(b))
            }),
            ("clamp", |t, v| {
                let a = t.clamp_max(v, 0.1);
                let b = t.square(a);
                Ok(t.sum(b))
            }),
        ];
        for (name, f) in cases {
            let report = finite_difference_check(f, &x, 1e-5).unwrap();
            assert!(report.max_relative_error < 1e-6, "{name}: {report:?}");
        }
    }

    #[test]
    fn network_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let w = rand_tensor(&mut rng, &[3, 18]);
        let b = rand_tensor(&mut rng, &[3]);
        let lw = rand_tensor(&mut rng, &[2, 3]);
        let lb = rand_tensor(&mut rng, &[2]);
        for stride in [1, 2] {
            let report = finite_difference_check_many(
                |tape, vs| {
                    let c = tape.conv2d(vs[0], vs[1], vs[2], stride)?;
                    let c = if stride == 1 { tape.avg_pool2(c)? } else { c };
                    let g = tape.global_avg_pool(c)?;
                    let logits = tape.linear(g, vs[3], vs[4])?;
                    let s = tape.select(c, 1)?;
                    let s = tape.frobenius_norm_sq(s);
                    let ce = tape.softmax_cross_entropy(logits, &[1, 0])?;
                    let s = tape.scale(s, 0.01);
                    tape.add(ce, s)
                },
                &[x.clone(), w.clone(), b.clone(), lw.clone(), lb.clone()],
                1e-5,
                None,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-6, "stride {stride}: {report:?}");
        }
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_tensor(&mut rng, &[1, 4, 4]);
        let grad_of = |ka: f64, kb: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let f = tape.frobenius_norm_sq(x);
            let e = tape.exp(x);
            let g = tape.sum(e);
            let fa = tape.scale(f, ka);
            let gb = tape.scale(g, kb);
            let root = tape.add(fa, gb).unwrap();
            tape.backward(root).unwrap().wrt(x)
        };
        let (a, b) = (1.7, -0.4);
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn replaying_backward_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[4, 1, 8, 8]));
        let w = tape.leaf(rand_tensor(&mut rng, &[3, 9]));
        let b = tape.leaf(rand_tensor(&mut rng, &[3]));
        let c = tape.conv2d(x, w, b, 1).unwrap();
        let r = tape.relu(c);
        let root = tape.frobenius_norm_sq(r);
        let g1 = tape.backward(root).unwrap();
        let g2 = tape.backward(root).unwrap();
        for v in [x, w, b] {
            let (a, b) = (g1.wrt(v), g2.wrt(v));
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0]));
        let d = tape.detach(x);
        let prod = tape.mul(x, d).unwrap();
        let root = tape.sum(prod);
        assert_eq!(tape.backward(root).unwrap().wrt(x).data(), &[3.0]);
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        assert!(tape.elementwise(ElementwiseOp::Add, x, None).is_err());
        assert!(tape.elementwise(ElementwiseOp::Exp, x, Some(x)).is_err());
        let y = tape.elementwise(ElementwiseOp::Scale(2.0), x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(matches!(tape.softmax_cross_entropy(z, &[2]), Err(Error::Data(_))));
    }
}
