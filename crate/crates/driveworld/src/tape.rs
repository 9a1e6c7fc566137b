//! Reverse-mode automatic differentiation over `ArrayD<f64>`.
//!
//! A [`Graph`] is a flat tape of eagerly evaluated nodes. Forward calls build
//! nodes and compute values immediately; [`Graph::backward_seeded`] walks the
//! tape in reverse and accumulates gradients. Everything is `f64`: the spec's
//! finite-difference gradient oracles need double precision, and toy-scale
//! shapes make the memory cost irrelevant.
//!
//! Masked attention stays exactly causal here: additive `-inf` masks are
//! applied before the softmax max-subtraction, so entries of disallowed frames
//! never influence allowed outputs, not even through rounding.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Id(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    /// rhs is broadcast to lhs's shape.
    AddB(Id, Id),
    /// rhs is broadcast to lhs's shape.
    MulB(Id, Id),
    Neg(Id),
    Scale(Id, f64),
    AddConst(Id, f64),
    MatMul(Id, Id),
    BatchMatMul(Id, Id),
    SoftmaxLast(Id),
    LayerNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        eps: f64,
    },
    Exp(Id),
    Ln(Id),
    SqrtGuard(Id),
    Abs(Id),
    Square(Id),
    Sigmoid(Id),
    SoftplusShift(Id, f64),
    Tanh(Id),
    Gelu(Id),
    WrapAngle(Id),
    Reshape(Id),
    Permute(Id, Vec<usize>),
    SliceAxis {
        x: Id,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<Id>,
        axis: usize,
    },
    SumAll(Id),
    MeanAll(Id),
    EppsPulley {
        y: Id,
        beta: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Flat autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn std_layout(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if g.shape()[ax] != s {
            debug_assert_eq!(s, 1, "broadcast mismatch");
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn mat2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

fn gelu_val(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    0.5 * x * (1.0 + (A * (x + C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const C: f64 = 0.044_715;
    let u = A * (x + C * x * x * x);
    let t = u.tanh();
    let du = A * (1.0 + 3.0 * C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    x.sin().atan2(x.cos())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar_value(&self, id: Id) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        v.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Id {
        self.nodes.push(Node {
            value: std_layout(value),
            op,
        });
        Id(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Id {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Id {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros_like(&mut self, id: Id) -> Id {
        let z = ArrayD::zeros(IxDyn(self.shape(id)));
        self.leaf(z)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    /// `a + b` with `b` broadcast to `a`'s shape.
    pub fn add_b(&mut self, a: Id, b: Id) -> Id {
        let v = {
            let bv = self.nodes[b.0]
                .value
                .broadcast(IxDyn(self.shape(a)))
                .expect("add_b: rhs must broadcast to lhs shape");
            &self.nodes[a.0].value + &bv
        };
        self.push(v, Op::AddB(a, b))
    }

    /// `a * b` with `b` broadcast to `a`'s shape.
    pub fn mul_b(&mut self, a: Id, b: Id) -> Id {
        let v = {
            let bv = self.nodes[b.0]
                .value
                .broadcast(IxDyn(self.shape(a)))
                .expect("mul_b: rhs must broadcast to lhs shape");
            &self.nodes[a.0].value * &bv
        };
        self.push(v, Op::MulB(a, b))
    }

    pub fn neg(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Id, k: f64) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Id, k: f64) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        self.push(v, Op::AddConst(a, k))
    }

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = mat2(&self.nodes[a.0].value)
            .dot(&mat2(&self.nodes[b.0].value))
            .into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    /// Batched matrix product over 3-d operands `(B,m,k) x (B,k,n)`.
    pub fn bmm(&mut self, a: Id, b: Id) -> Id {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs 3-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs 3-d");
        let (bs, m, k) = av.dim();
        let (bs2, k2, n) = bv.dim();
        assert_eq!(bs, bs2, "bmm batch mismatch");
        assert_eq!(k, k2, "bmm inner dim mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        self.push(out.into_dyn(), Op::BatchMatMul(a, b))
    }

    /// Softmax over the last axis. `-inf` entries get weight exactly 0.
    pub fn softmax_last(&mut self, a: Id) -> Id {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        self.push(v, Op::SoftmaxLast(a))
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta` (1-d).
    pub fn layer_norm(&mut self, x: Id, gamma: Id, beta: Id, eps: f64) -> Id {
        let c = *self.shape(x).last().expect("layer_norm input");
        debug_assert_eq!(self.shape(gamma), [c]);
        debug_assert_eq!(self.shape(beta), [c]);
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gamma.0].value.clone();
        let b = self.nodes[beta.0].value.clone();
        let mut v = xv.clone();
        let last = v.ndim() - 1;
        let gv = g.view().into_dimensionality::<Ix1>().unwrap();
        let bv = b.view().into_dimensionality::<Ix1>().unwrap();
        for mut row in v.lanes_mut(Axis(last)) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mu) * inv * gv[j] + bv[j];
            }
        }
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// `sqrt(x)` with subgradient 0 at `x = 0`, so exact zeros stay exact.
    pub fn sqrt_guard(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0).sqrt());
        self.push(v, Op::SqrtGuard(a))
    }

    pub fn abs(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `softplus(x) + shift`; strictly positive for `shift > 0`.
    pub fn softplus_shift(&mut self, a: Id, shift: f64) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| softplus(x) + shift);
        self.push(v, Op::SoftplusShift(a, shift))
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(gelu_val);
        self.push(v, Op::Gelu(a))
    }

    /// Wrap angles to (-pi, pi]; derivative 1 almost everywhere.
    pub fn wrap_angle(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(wrap_angle);
        self.push(v, Op::WrapAngle(a))
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Id, axes: &[usize]) -> Id {
        let v = self.nodes[a.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .to_owned();
        self.push(v, Op::Permute(a, axes.to_vec()))
    }

    pub fn slice_axis(&mut self, x: Id, axis: usize, start: usize, len: usize) -> Id {
        let v = self.nodes[x.0]
            .value
            .slice_axis(
                Axis(axis),
                ndarray::Slice::from(start as isize..(start + len) as isize),
            )
            .to_owned();
        self.push(v, Op::SliceAxis { x, axis, start, len })
    }

    pub fn concat(&mut self, xs: &[Id], axis: usize) -> Id {
        let views: Vec<_> = xs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.nodes[a.0].value.len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum() / n);
        self.push(v, Op::MeanAll(a))
    }

    /// Epps-Pulley / BHEP normality statistic of a 1-d sample, fused so the
    /// m x m pair matrix is never materialized on the tape.
    ///
    /// `T = (1/m) sum_{j,k} exp(-b^2 (y_j-y_k)^2 / 2)
    ///      - 2 (1+b^2)^{-1/2} sum_j exp(-b^2 y_j^2 / (2 (1+b^2)))
    ///      + m (1+2 b^2)^{-1/2}`
    pub fn epps_pulley(&mut self, y: Id, beta: f64) -> Id {
        assert_eq!(self.nodes[y.0].value.ndim(), 1, "epps_pulley wants 1-d");
        let yv = self.nodes[y.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let t = epps_pulley_value(yv.as_slice().unwrap(), beta);
        let v = ArrayD::from_elem(IxDyn(&[]), t);
        self.push(v, Op::EppsPulley { y, beta })
    }

    /// Backward from a single scalar node with seed 1.
    pub fn backward_scalar(&mut self, loss: Id) -> Gradients {
        let seed = ArrayD::from_elem(IxDyn(self.shape(loss)), 1.0);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Backward pass with explicit output seeds; gradients of several outputs
    /// accumulate linearly.
    pub fn backward_seeded(&mut self, seeds: &[(Id, ArrayD<f64>)]) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            debug_assert_eq!(self.shape(*id), g.shape());
            accumulate(&mut grads[id.0], g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, gy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], gy.clone());
                accumulate(&mut grads[b.0], gy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], gy.clone());
                accumulate(&mut grads[b.0], gy.mapv(|g| -g));
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a.0], gy * &self.nodes[b.0].value);
                accumulate(&mut grads[b.0], gy * &self.nodes[a.0].value);
            }
            Op::AddB(a, b) => {
                accumulate(&mut grads[a.0], gy.clone());
                accumulate(
                    &mut grads[b.0],
                    reduce_to_shape(gy, self.nodes[b.0].value.shape()),
                );
            }
            Op::MulB(a, b) => {
                let bshape = self.nodes[b.0].value.shape().to_vec();
                let bb = self.nodes[b.0]
                    .value
                    .broadcast(IxDyn(self.nodes[a.0].value.shape()))
                    .unwrap();
                accumulate(&mut grads[a.0], gy * &bb);
                let gb = gy * &self.nodes[a.0].value;
                accumulate(&mut grads[b.0], reduce_to_shape(&gb, &bshape));
            }
            Op::Neg(a) => accumulate(&mut grads[a.0], gy.mapv(|g| -g)),
            Op::Scale(a, k) => accumulate(&mut grads[a.0], gy.mapv(|g| g * k)),
            Op::AddConst(a, _) => accumulate(&mut grads[a.0], gy.clone()),
            Op::MatMul(a, b) => {
                let gy2 = mat2(gy);
                let av = mat2(&self.nodes[a.0].value);
                let bv = mat2(&self.nodes[b.0].value);
                accumulate(&mut grads[a.0], gy2.dot(&bv.t()).into_dyn());
                accumulate(&mut grads[b.0], av.t().dot(&gy2).into_dyn());
            }
            Op::BatchMatMul(a, b) => {
                let gy3 = gy.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.nodes[a.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let bv = self.nodes[b.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let (bs, m, k) = av.dim();
                let n = bv.dim().2;
                let mut ga = ndarray::Array3::<f64>::zeros((bs, m, k));
                let mut gb = ndarray::Array3::<f64>::zeros((bs, k, n));
                for x in 0..bs {
                    let gslice = gy3.index_axis(Axis(0), x);
                    ga.index_axis_mut(Axis(0), x)
                        .assign(&gslice.dot(&bv.index_axis(Axis(0), x).t()));
                    gb.index_axis_mut(Axis(0), x)
                        .assign(&av.index_axis(Axis(0), x).t().dot(&gslice));
                }
                accumulate(&mut grads[a.0], ga.into_dyn());
                accumulate(&mut grads[b.0], gb.into_dyn());
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let last = y.ndim() - 1;
                let mut gx = gy * y;
                // gx = y * (gy - sum(gy * y))
                let dot = gx.sum_axis(Axis(last)).insert_axis(Axis(last));
                let dotb = dot.broadcast(IxDyn(y.shape())).unwrap().to_owned();
                gx = (gy - &dotb) * y;
                accumulate(&mut grads[a.0], gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value;
                let c = *xv.shape().last().unwrap();
                let last = xv.ndim() - 1;
                let gvec = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(xv.shape()));
                let mut ggamma = ndarray::Array1::<f64>::zeros(c);
                let mut gbeta = ndarray::Array1::<f64>::zeros(c);
                for (row, (gyrow, mut gxrow)) in xv
                    .lanes(Axis(last))
                    .into_iter()
                    .zip(gy.lanes(Axis(last)).into_iter().zip(gx.lanes_mut(Axis(last))))
                {
                    let cf = c as f64;
                    let mu = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|e| (e - mu) * inv).collect();
                    let dxhat: Vec<f64> = gyrow
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * gvec[j])
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cf;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        gxrow[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        ggamma[j] += gyrow[j] * xhat[j];
                        gbeta[j] += gyrow[j];
                    }
                }
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[gamma.0], ggamma.into_dyn());
                accumulate(&mut grads[beta.0], gbeta.into_dyn());
            }
            Op::Exp(a) => accumulate(&mut grads[a.0], gy * &self.nodes[i].value),
            Op::Ln(a) => {
                let gx = gy / &self.nodes[a.0].value;
                accumulate(&mut grads[a.0], gx);
            }
            Op::SqrtGuard(a) => {
                let x = &self.nodes[a.0].value;
                let mut gx = gy.clone();
                ndarray::Zip::from(&mut gx).and(x).for_each(|g, &xv| {
                    *g = if xv > 1e-300 { *g * 0.5 / xv.sqrt() } else { 0.0 };
                });
                accumulate(&mut grads[a.0], gx);
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value;
                let gx = gy * &x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                accumulate(&mut grads[a.0], gx);
            }
            Op::Square(a) => {
                let gx = gy * &self.nodes[a.0].value.mapv(|v| 2.0 * v);
                accumulate(&mut grads[a.0], gx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                accumulate(&mut grads[a.0], gy * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::SoftplusShift(a, _) => {
                let gx = gy * &self.nodes[a.0].value.mapv(sigmoid);
                accumulate(&mut grads[a.0], gx);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                accumulate(&mut grads[a.0], gy * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Gelu(a) => {
                let gx = gy * &self.nodes[a.0].value.mapv(gelu_grad);
                accumulate(&mut grads[a.0], gx);
            }
            Op::WrapAngle(a) => accumulate(&mut grads[a.0], gy.clone()),
            Op::Reshape(a) => {
                let gx = gy
                    .clone()
                    .into_shape_with_order(IxDyn(self.nodes[a.0].value.shape()))
                    .unwrap();
                accumulate(&mut grads[a.0], gx);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (pos, &ax) in axes.iter().enumerate() {
                    inv[ax] = pos;
                }
                let gx = gy.clone().permuted_axes(IxDyn(&inv)).to_owned();
                accumulate(&mut grads[a.0], std_layout(gx));
            }
            Op::SliceAxis { x, axis, start, len } => {
                let mut gx = ArrayD::<f64>::zeros(IxDyn(self.nodes[x.0].value.shape()));
                gx.slice_axis_mut(
                    Axis(*axis),
                    ndarray::Slice::from(*start as isize..(*start + *len) as isize),
                )
                .assign(gy);
                accumulate(&mut grads[x.0], gx);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0usize;
                for id in xs {
                    let len = self.nodes[id.0].value.shape()[*axis];
                    let part = gy
                        .slice_axis(
                            Axis(*axis),
                            ndarray::Slice::from(offset as isize..(offset + len) as isize),
                        )
                        .to_owned();
                    accumulate(&mut grads[id.0], part);
                    offset += len;
                }
            }
            Op::SumAll(a) => {
                let g = gy.iter().copied().next().unwrap();
                accumulate(
                    &mut grads[a.0],
                    ArrayD::from_elem(IxDyn(self.nodes[a.0].value.shape()), g),
                );
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let g = gy.iter().copied().next().unwrap() / n;
                accumulate(
                    &mut grads[a.0],
                    ArrayD::from_elem(IxDyn(self.nodes[a.0].value.shape()), g),
                );
            }
            Op::EppsPulley { y, beta } => {
                let g = gy.iter().copied().next().unwrap();
                let yv = self.nodes[y.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let gx = epps_pulley_grad(yv.as_slice().unwrap(), *beta)
                    .mapv(|d| d * g)
                    .into_dyn();
                accumulate(&mut grads[y.0], gx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(std_layout(g)),
    }
}

/// Gradients produced by a backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: Id) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, or zeros if the node never received one.
    pub fn get_or_zeros(&self, g: &Graph, id: Id) -> ArrayD<f64> {
        match self.get(id) {
            Some(a) => a.clone(),
            None => ArrayD::zeros(IxDyn(g.shape(id))),
        }
    }
}

/// Closed-form Epps-Pulley statistic of a 1-d sample.
pub fn epps_pulley_value(y: &[f64], beta: f64) -> f64 {
    let m = y.len();
    assert!(m >= 1, "epps_pulley: empty sample");
    let b2 = beta * beta;
    // Pair sum: diagonal contributes exactly m, off-diagonal pairs twice.
    let mut s1 = m as f64;
    for j in 0..m {
        for k in (j + 1)..m {
            let d = y[j] - y[k];
            s1 += 2.0 * (-b2 * d * d / 2.0).exp();
        }
    }
    let s2: f64 = y
        .iter()
        .map(|&v| (-b2 * v * v / (2.0 * (1.0 + b2))).exp())
        .sum();
    s1 / m as f64 - 2.0 / (1.0 + b2).sqrt() * s2 + m as f64 / (1.0 + 2.0 * b2).sqrt()
}

/// Analytic gradient of [`epps_pulley_value`] w.r.t. each sample point.
pub fn epps_pulley_grad(y: &[f64], beta: f64) -> ndarray::Array1<f64> {
    let m = y.len();
    let b2 = beta * beta;
    let mf = m as f64;
    let c2 = 2.0 * b2 / (1.0 + b2).powf(1.5);
    let mut g = ndarray::Array1::<f64>::zeros(m);
    for j in 0..m {
        let mut pair = 0.0;
        for k in 0..m {
            let d = y[j] - y[k];
            pair += -b2 * d * (-b2 * d * d / 2.0).exp();
        }
        let own = c2 * y[j] * (-b2 * y[j] * y[j] / (2.0 * (1.0 + b2))).exp();
        g[j] = 2.0 * pair / mf + own;
    }
    g
}

/// Central-difference gradient of a scalar function of one array, for checking
/// analytic gradients on micro shapes.
pub fn central_difference<F>(f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::<f64>::zeros(IxDyn(x.shape()));
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error between analytic and numeric gradients, with an absolute
/// floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = rand_arr(&[3, 4], &mut rng);
        let b0 = rand_arr(&[4, 2], &mut rng);
        let f = |a: &ArrayD<f64>| {
            let mut g = Graph::new();
            let ai = g.leaf(a.clone());
            let bi = g.leaf(b0.clone());
            let y = g.matmul(ai, bi);
            let s = g.square(y);
            let l = g.sum_all(s);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let ai = g.leaf(a0.clone());
        let bi = g.leaf(b0.clone());
        let y = g.matmul(ai, bi);
        let s = g.square(y);
        let l = g.sum_all(s);
        let grads = g.backward_scalar(l);
        let num = central_difference(f, &a0, 1e-6);
        assert!(max_rel_err(grads.get(ai).unwrap(), &num) < 1e-7);
    }

    #[test]
    fn softmax_layernorm_gelu_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_arr(&[2, 5], &mut rng);
        let gamma0 = rand_arr(&[5], &mut rng);
        let beta0 = rand_arr(&[5], &mut rng);
        let run = |x: &ArrayD<f64>, gm: &ArrayD<f64>, bt: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let gi = g.leaf(gm.clone());
            let bi = g.leaf(bt.clone());
            let ln = g.layer_norm(xi, gi, bi, 1e-5);
            let ge = g.gelu(ln);
            let sm = g.softmax_last(ge);
            let sq = g.square(sm);
            let l = g.sum_all(sq);
            (g, xi, gi, bi, l)
        };
        let (mut g, xi, gi, bi, l) = run(&x0, &gamma0, &beta0);
        let grads = g.backward_scalar(l);
        let fx = |x: &ArrayD<f64>| {
            let (g, _, _, _, l) = run(x, &gamma0, &beta0);
            g.scalar_value(l)
        };
        let fg = |gm: &ArrayD<f64>| {
            let (g, _, _, _, l) = run(&x0, gm, &beta0);
            g.scalar_value(l)
        };
        let fb = |bt: &ArrayD<f64>| {
            let (g, _, _, _, l) = run(&x0, &gamma0, bt);
            g.scalar_value(l)
        };
        assert!(max_rel_err(grads.get(xi).unwrap(), &central_difference(fx, &x0, 1e-6)) < 1e-6);
        assert!(max_rel_err(grads.get(gi).unwrap(), &central_difference(fg, &gamma0, 1e-6)) < 1e-6);
        assert!(max_rel_err(grads.get(bi).unwrap(), &central_difference(fb, &beta0, 1e-6)) < 1e-6);
    }

    #[test]
    fn slice_concat_permute_roundtrip_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_arr(&[2, 3, 4], &mut rng);
        let run = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let p = g.permute(xi, &[1, 0, 2]);
            let a = g.slice_axis(p, 0, 0, 2);
            let b = g.slice_axis(p, 0, 2, 1);
            let c = g.concat(&[a, b], 0);
            let r = g.reshape(c, &[6, 4]);
            let s = g.square(r);
            let l = g.sum_all(s);
            (g, xi, l)
        };
        let (mut g, xi, l) = run(&x0);
        let grads = g.backward_scalar(l);
        let f = |x: &ArrayD<f64>| {
            let (g, _, l) = run(x);
            g.scalar_value(l)
        };
        assert!(max_rel_err(grads.get(xi).unwrap(), &central_difference(f, &x0, 1e-6)) < 1e-7);
    }

    #[test]
    fn masked_softmax_gives_disallowed_entries_zero_weight() {
        let mut g = Graph::new();
        let scores = g.leaf(arr2(&[[1.0, f64::NEG_INFINITY], [0.5, 2.0]]).into_dyn());
        let sm = g.softmax_last(scores);
        let v = g.value(sm);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[0, 0]], 1.0);
        assert!((v[[1, 0]] + v[[1, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn epps_pulley_matches_tape_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y0 = rand_arr(&[7], &mut rng);
        let beta = 1.3;
        let mut g = Graph::new();
        let yi = g.leaf(y0.clone());
        let t = g.epps_pulley(yi, beta);
        assert!(
            (g.scalar_value(t)
                - epps_pulley_value(y0.as_slice().unwrap(), beta))
            .abs()
                < 1e-14
        );
        let grads = g.backward_scalar(t);
        let f = |y: &ArrayD<f64>| epps_pulley_value(y.as_slice().unwrap(), beta);
        let num = central_difference(f, &y0, 1e-6);
        assert!(max_rel_err(grads.get(yi).unwrap(), &num) < 1e-7);
    }

    #[test]
    fn wrap_angle_wraps_into_pi_range() {
        let x = arr1(&[3.5, -3.5, 0.25]).into_dyn();
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let w = g.wrap_angle(xi);
        let v = g.value(w);
        assert!((v[[0]] - (3.5 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((v[[1]] - (2.0 * std::f64::consts::PI - 3.5)).abs() < 1e-12);
        assert!((v[[2]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn multi_seed_backward_accumulates_linearly() {
        let x0 = arr1(&[1.0, 2.0]).into_dyn();
        let mut g = Graph::new();
        let xi = g.leaf(x0);
        let a = g.square(xi);
        let la = g.sum_all(a);
        let lb = g.mean_all(xi);
        let seeds = vec![
            (la, ArrayD::from_elem(IxDyn(&[]), 1.0)),
            (lb, ArrayD::from_elem(IxDyn(&[]), 2.0)),
        ];
        let grads = g.backward_seeded(&seeds);
        let gx = grads.get(xi).unwrap();
        // d(sum x^2)/dx + 2 * d(mean x)/dx = 2x + 2*(1/2)
        assert!((gx[[0]] - (2.0 + 1.0)).abs() < 1e-14);
        assert!((gx[[1]] - (4.0 + 1.0)).abs() < 1e-14);
    }
}
