//! Tape-based reverse-mode differentiation over rank-5 tensors.
//!
//! A [`Graph`] borrows the parameter store read-only, records every op as it
//! is applied, and [`Graph::backward`] replays the tape in reverse to produce
//! [`Gradients`] for the parameters.

use crate::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use crate::{Gradients, ParamId, ParamStore, Scalar, Shape5, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: ParamId, b: Option<ParamId>, spec: ConvSpec },
    Norm { x: Var, gamma: ParamId, beta: ParamId, batch_stats: bool, mean: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Gate { x: Var, e: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample { x: Var, factor: [usize; 3] },
    Concat(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = !matches!(op, Op::Leaf);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape5 {
        self.nodes[v.0].value.shape()
    }

    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, spec: ConvSpec) -> Var {
        let y = conv3d_forward(self.value(x), self.params.get(w), b.map(|b| self.params.get(b)), &spec);
        self.push(y, Op::Conv { x, w, b, spec })
    }

    /// Per-channel normalization with affine `gamma`/`beta` (`[1, c, 1, 1, 1]`).
    /// Statistics pool over the batch when it holds more than one item and
    /// over each item alone otherwise.
    pub fn norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let batch_stats = s.n > 1;
        let groups = if batch_stats { s.c } else { s.n * s.c };
        let mut mean = Vec::with_capacity(groups);
        let mut inv_std = Vec::with_capacity(groups);
        for gi in 0..groups {
            let planes = group_planes(s, gi, batch_stats);
            let count = (planes.len() * s.plane()) as f64;
            let mut sum = 0.0;
            for &(n, c) in &planes {
                sum += xv.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = sum / count;
            let mut sq = 0.0;
            for &(n, c) in &planes {
                sq += xv.plane(n, c).iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
            }
            mean.push(T::of(mu));
            inv_std.push(T::of(1.0 / (sq / count + NORM_EPS).sqrt()));
        }
        let g = self.params.get(gamma).data();
        let b = self.params.get(beta).data();
        let mut y = Tensor::zeros(s);
        let p = s.plane();
        for n in 0..s.n {
            for c in 0..s.c {
                let gi = if batch_stats { c } else { n * s.c + c };
                let (mu, is) = (mean[gi], inv_std[gi]);
                let (gc, bc) = (g[c], b[c]);
                let start = (n * s.c + c) * p;
                let src = &xv.data()[start..start + p];
                for (o, &v) in y.data_mut()[start..start + p].iter_mut().zip(src) {
                    *o = gc * ((v - mu) * is) + bc;
                }
            }
        }
        self.push(y, Op::Norm { x, gamma, beta, batch_stats, mean, inv_std })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let y = Tensor::from_vec(av.shape(), av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect());
        self.push(y, Op::Mul(a, b))
    }

    /// `x ⊙ (1 + e)` with a single-channel `e` broadcast over the channels of `x`.
    pub fn gate(&mut self, x: Var, e: Var) -> Var {
        let (xv, ev) = (self.value(x), self.value(e));
        let s = xv.shape();
        assert_eq!(ev.shape(), s.with_channels(1), "gate map must be single-channel at the feature shape");
        let mut y = xv.clone();
        let p = s.plane();
        for n in 0..s.n {
            let gate = ev.plane(n, 0);
            for c in 0..s.c {
                let start = (n * s.c + c) * p;
                for (o, &g) in y.data_mut()[start..start + p].iter_mut().zip(gate) {
                    *o *= T::one() + g;
                }
            }
        }
        self.push(y, Op::Gate { x, e })
    }

    /// Max pooling with a cubic window; padded positions never win.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: [usize; 3], padding: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert!(s.len() < u32::MAX as usize, "max_pool tensor too large for u32 indices");
        let outs: [usize; 3] =
            std::array::from_fn(|a| (s.spatial()[a] + 2 * padding - kernel) / stride[a] + 1);
        let ys = s.with_spatial(outs);
        let mut y = Tensor::zeros(ys);
        let mut argmax = vec![0u32; ys.len()];
        let ins = s.spatial();
        let range = |o: usize, a: usize| {
            let start = (o * stride[a]) as isize - padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize) as usize).min(ins[a]);
            lo..hi
        };
        for n in 0..s.n {
            for c in 0..s.c {
                for oz in 0..outs[2] {
                    for oy in 0..outs[1] {
                        for ox in 0..outs[0] {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for iz in range(oz, 2) {
                                for iy in range(oy, 1) {
                                    for ix in range(ox, 0) {
                                        let idx = s.index(n, c, ix, iy, iz);
                                        let v = xv.data()[idx];
                                        if v > best {
                                            best = v;
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            let oi = ys.index(n, c, ox, oy, oz);
                            y.data_mut()[oi] = best;
                            argmax[oi] = best_idx as u32;
                        }
                    }
                }
            }
        }
        self.push(y, Op::MaxPool { x, argmax })
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let y = upsample_nearest(self.value(x), factor);
        self.push(y, Op::Upsample { x, factor })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let shapes: Vec<Shape5> = parts.iter().map(|&v| self.shape(v)).collect();
        let first = shapes[0];
        for s in &shapes {
            assert_eq!(s.with_channels(first.c), first, "concat operands differ outside the channel axis");
        }
        let c_total: usize = shapes.iter().map(|s| s.c).sum();
        let ys = first.with_channels(c_total);
        let mut data = Vec::with_capacity(ys.len());
        for n in 0..first.n {
            for &v in parts {
                data.extend_from_slice(self.value(v).item(n));
            }
        }
        self.push(Tensor::from_vec(ys, data), Op::Concat(parts.to_vec()))
    }

    /// Reverse pass from the given output cotangents.
    pub fn backward(self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let Graph { params, nodes } = self;
        let mut grads = Gradients::empty(params.len());
        let mut adj: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(nodes[v.0].value.shape(), g.shape(), "seed gradient shape mismatch");
            add_into(&mut adj[v.0], g.clone());
        }
        for i in (0..nodes.len()).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &nodes[i];
            let wants = |v: &Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, spec } => {
                    let g = conv3d_backward(&nodes[x.0].value, params.get(*w), b.is_some(), spec, &dy, wants(x));
                    grads.accumulate(*w, g.dw);
                    if let (Some(b), Some(db)) = (b, g.db) {
                        grads.accumulate(*b, db);
                    }
                    if let Some(dx) = g.dx {
                        add_into(&mut adj[x.0], dx);
                    }
                }
                Op::Norm { x, gamma, beta, batch_stats, mean, inv_std } => {
                    let (dx, dg, db) =
                        norm_backward(&nodes[x.0].value, params.get(*gamma), *batch_stats, mean, inv_std, &dy);
                    grads.accumulate(*gamma, dg);
                    grads.accumulate(*beta, db);
                    if wants(x) {
                        add_into(&mut adj[x.0], dx);
                    }
                }
                Op::Relu(x) => {
                    if wants(x) {
                        let y = &node.value;
                        let dx = Tensor::from_vec(
                            y.shape(),
                            y.data().iter().zip(dy.data()).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect(),
                        );
                        add_into(&mut adj[x.0], dx);
                    }
                }
                Op::Sigmoid(x) => {
                    if wants(x) {
                        let y = &node.value;
                        let dx = Tensor::from_vec(
                            y.shape(),
                            y.data().iter().zip(dy.data()).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                        );
                        add_into(&mut adj[x.0], dx);
                    }
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        add_into(&mut adj[a.0], dy.clone());
                    }
                    if wants(b) {
                        add_into(&mut adj[b.0], dy);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if wants(a) {
                        let da = Tensor::from_vec(av.shape(), dy.data().iter().zip(bv.data()).map(|(&g, &q)| g * q).collect());
                        add_into(&mut adj[a.0], da);
                    }
                    if wants(b) {
                        let db = Tensor::from_vec(bv.shape(), dy.data().iter().zip(av.data()).map(|(&g, &p)| g * p).collect());
                        add_into(&mut adj[b.0], db);
                    }
                }
                Op::Gate { x, e } => {
                    let (xv, ev) = (&nodes[x.0].value, &nodes[e.0].value);
                    let s = xv.shape();
                    let p = s.plane();
                    let mut dx = Tensor::zeros(s);
                    let mut de = Tensor::zeros(ev.shape());
                    for n in 0..s.n {
                        let gate = ev.plane(n, 0);
                        for c in 0..s.c {
                            let start = (n * s.c + c) * p;
                            let dyp = &dy.data()[start..start + p];
                            let xp = &xv.data()[start..start + p];
                            for (j, o) in dx.data_mut()[start..start + p].iter_mut().enumerate() {
                                *o = dyp[j] * (T::one() + gate[j]);
                            }
                            let dep = &mut de.data_mut()[n * p..(n + 1) * p];
                            for j in 0..p {
                                dep[j] += dyp[j] * xp[j];
                            }
                        }
                    }
                    if wants(x) {
                        add_into(&mut adj[x.0], dx);
                    }
                    if wants(e) {
                        add_into(&mut adj[e.0], de);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if wants(x) {
                        let mut dx = Tensor::zeros(nodes[x.0].value.shape());
                        for (&src, &g) in argmax.iter().zip(dy.data()) {
                            dx.data_mut()[src as usize] += g;
                        }
                        add_into(&mut adj[x.0], dx);
                    }
                }
                Op::Upsample { x, factor } => {
                    if wants(x) {
                        add_into(&mut adj[x.0], downsample_sum(&dy, nodes[x.0].value.shape(), *factor));
                    }
                }
                Op::Concat(parts) => {
                    let s = dy.shape();
                    let mut offset = 0;
                    for v in parts {
                        let ps = nodes[v.0].value.shape();
                        if wants(v) {
                            let mut d = Vec::with_capacity(ps.len());
                            let item = s.c * s.plane();
                            for n in 0..s.n {
                                let start = n * item + offset * s.plane();
                                d.extend_from_slice(&dy.data()[start..start + ps.c * s.plane()]);
                            }
                            add_into(&mut adj[v.0], Tensor::from_vec(ps, d));
                        }
                        offset += ps.c;
                    }
                }
            }
        }
        grads
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `(n, c)` planes that share the statistics of normalization group `gi`.
fn group_planes(s: Shape5, gi: usize, batch_stats: bool) -> Vec<(usize, usize)> {
    if batch_stats {
        (0..s.n).map(|n| (n, gi)).collect()
    } else {
        vec![(gi / s.c, gi % s.c)]
    }
}

fn norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    batch_stats: bool,
    mean: &[T],
    inv_std: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let p = s.plane();
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for (gi, (&mu, &is)) in mean.iter().zip(inv_std).enumerate() {
        let planes = group_planes(s, gi, batch_stats);
        let c = planes[0].1;
        let gc = gamma.data()[c];
        let count = (planes.len() * p) as f64;
        // sums of dy and dy * x̂ over the group
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for &(n, c) in &planes {
            let start = (n * s.c + c) * p;
            for j in start..start + p {
                let xh = ((x.data()[j] - mu) * is).as_f64();
                let g = dy.data()[j].as_f64();
                sdy += g;
                sdyx += g * xh;
            }
        }
        dgamma.data_mut()[c] += T::of(sdyx);
        dbeta.data_mut()[c] += T::of(sdy);
        let m1 = T::of(sdy / count);
        let m2 = T::of(sdyx / count);
        for &(n, c) in &planes {
            let start = (n * s.c + c) * p;
            for j in start..start + p {
                let xh = (x.data()[j] - mu) * is;
                dx.data_mut()[j] = gc * is * (dy.data()[j] - m1 - xh * m2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: [usize; 3]) -> Tensor<T> {
    let s = x.shape();
    let ys = s.with_spatial([s.x * factor[0], s.y * factor[1], s.z * factor[2]]);
    let mut data = Vec::with_capacity(ys.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for z in 0..ys.z {
                for y in 0..ys.y {
                    let row = &plane[(z / factor[2] * s.y + y / factor[1]) * s.x..][..s.x];
                    for &v in row {
                        for _ in 0..factor[0] {
                            data.push(v);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(ys, data)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor` block.
fn downsample_sum<T: Scalar>(dy: &Tensor<T>, xs: Shape5, factor: [usize; 3]) -> Tensor<T> {
    let ys = dy.shape();
    let mut dx = Tensor::zeros(xs);
    for n in 0..ys.n {
        for c in 0..ys.c {
            for z in 0..ys.z {
                for y in 0..ys.y {
                    for x in 0..ys.x {
                        let v = dy.data()[ys.index(n, c, x, y, z)];
                        dx.data_mut()[xs.index(n, c, x / factor[0], y / factor[1], z / factor[2])] += v;
                    }
                }
            }
        }
    }
    dx
}
