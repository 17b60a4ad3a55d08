//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its output value
//! and whatever it needs for the backward pass. Nodes are only ever appended,
//! so the tape is already in topological order and [`Graph::backward`] is a
//! single reverse sweep.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        source: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Select {
        x: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A recorded computation. One graph is built per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(true);
        self.push_raw(t, Op::Leaf)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.push_raw(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last `backward` loss with respect to `v`; `None` when
    /// `v` does not depend on any parameter.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        value.set_requires_grad(inputs.iter().any(|&v| self.req(v)));
        Ok(self.push_raw(value, op))
    }

    /// Batched matrix product `[.., M, K] x [.., K, N]`. The right operand may
    /// instead be a plain `[K, N]` matrix shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && &sb[..sb.len() - 2] != lead) {
            return Err(mismatch());
        }
        let batch = numel(lead);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            let boff = if shared_rhs { 0 } else { i * k * n };
            T::gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                (k, 1),
                &bd[boff..],
                (n, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        self.push(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (biases, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.data(b);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bd.len()])
            .collect();
        self.push(sa.to_vec(), out, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), &[a])
    }

    /// Softmax along `axis`, shifted by the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for rank-{} tensor",
                shape.len()
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let out = kernels::softmax_forward(self.data(x), outer, len, inner);
        self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::InvalidShape {
            shape: shape.clone(),
            reason: "layernorm on a scalar".into(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(shape, out, op, &[x, gain, bias])
    }

    /// 2-D cross-correlation (kernels are not flipped).
    ///
    /// `x` is `[B, C, H, W]`, `w` is `[D, C, k, k]`, `bias` is `[D]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let k = sw[2];
        let (ph, pw) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
        if k > ph || k > pw {
            return Err(Error::Geometry(format!(
                "kernel {k} larger than padded input {ph}x{pw}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw.clone(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel: k,
            stride,
            padding,
            out_height: (ph - k) / stride + 1,
            out_width: (pw - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let shape = vec![
            geom.batch,
            geom.out_channels,
            geom.out_height,
            geom.out_width,
        ];
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(shape, out, Op::Conv2d { x, w, bias, geom }, &inputs)
    }

    /// Max pooling without padding over the last two axes of `[B, D, H, W]`.
    /// Ties resolve to the first position in row-major order.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "maxpool2d expects [B, D, H, W]".into(),
            });
        }
        if window == 0 || stride == 0 || window > s[2] || window > s[3] {
            return Err(Error::Geometry(format!(
                "pool window {window} (stride {stride}) does not fit {}x{} input",
                s[2], s[3]
            )));
        }
        let (out, argmax, oh, ow) =
            kernels::maxpool_forward(self.data(x), s[0] * s[1], s[2], s[3], window, stride);
        self.push(
            vec![s[0], s[1], oh, ow],
            out,
            Op::MaxPool { x, argmax },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        self.push(shape, data, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} for shape {shape:?}"
            )));
        }
        let source = kernels::permute_index(&shape, perm);
        let xd = self.data(x);
        let out = source.iter().map(|&i| xd[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(out_shape, out, Op::Permute { x, source }, &[x])
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. `p == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let n = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: n,
            });
        }
        let probs = kernels::softmax_forward(self.data(logits), s[0], n, 1);
        let mut total = T::zero();
        for (row, &label) in self.data(logits).chunks(n).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
        let loss = total / T::of(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Vec::new(), vec![loss], op, &[logits])
    }

    /// The element at flat `index`, as a scalar node.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .data(x)
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("select index {index} out of range")))?;
        self.push(Vec::new(), vec![v], Op::Select { x, index }, &[x])
    }

    /// Populates the gradient of `loss` on every node that depends on a
    /// parameter. Fan-out contributions add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.req(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let n = node.value.len();
                node.value.set_grad(g.unwrap_or_else(|| vec![T::zero(); n]));
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.req(a) {
                    let da = slot(grads, a, len(a));
                    for bi in 0..batch {
                        let boff = if shared_rhs { 0 } else { bi * k * n };
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n, 1),
                            &bd[boff..],
                            (1, n),
                            T::one(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            (k, 1),
                        );
                    }
                }
                if self.req(b) {
                    let db = slot(grads, b, len(b));
                    for bi in 0..batch {
                        let boff = if shared_rhs { 0 } else { bi * k * n };
                        T::gemm(
                            k,
                            m,
                            n,
                            &ad[bi * m * k..],
                            (1, k),
                            &g[bi * m * n..],
                            (n, 1),
                            T::one(),
                            &mut db[boff..boff + k * n],
                            (n, 1),
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.req(v) {
                        let d = slot(grads, v, len(v));
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::AddBroadcast(a, b) => {
                if self.req(a) {
                    let d = slot(grads, a, len(a));
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if self.req(b) {
                    let n = len(b);
                    let d = slot(grads, b, n);
                    for (j, &gv) in g.iter().enumerate() {
                        d[j % n] += gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.req(v) {
                        let od = self.data(other);
                        let d = slot(grads, v, len(v));
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(od) {
                            *d += g * o;
                        }
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.req(a) {
                    let d = slot(grads, a, len(a));
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c);
                }
            }
            &Op::Relu(a) => {
                if self.req(a) {
                    let xd = self.data(a);
                    let d = slot(grads, a, len(a));
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xd) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if self.req(a) {
                    let xd = self.data(a);
                    let d = slot(grads, a, len(a));
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xd) {
                        *d += g * kernels::gelu_grad(x);
                    }
                }
            }
            &Op::Softmax {
                x,
                outer,
                len: l,
                inner,
            } => {
                if self.req(x) {
                    let y = self.nodes[i].value.data();
                    let d = slot(grads, x, len(x));
                    kernels::softmax_backward(y, g, d, outer, l, inner);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let dim = len(*gain);
                let gd = self.data(*gain);
                if self.req(*gain) {
                    let d = slot(grads, *gain, dim);
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.req(*bias) {
                    let d = slot(grads, *bias, dim);
                    for gr in g.chunks(dim) {
                        for j in 0..dim {
                            d[j] += gr[j];
                        }
                    }
                }
                if self.req(*x) {
                    let d = slot(grads, *x, len(*x));
                    let dn = T::of(dim as f64);
                    for (row, ((gr, hr), &r)) in
                        g.chunks(dim).zip(xhat.chunks(dim)).zip(rstd).enumerate()
                    {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..dim {
                            let dh = gr[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..dim {
                            let dh = gr[j] * gd[j];
                            d[row * dim + j] += r / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, bias, geom } => {
                let (xd, wd) = (self.data(x), self.data(w));
                if self.req(x) {
                    let d = slot(grads, x, len(x));
                    kernels::conv2d_backward(xd, wd, g, &geom, Some(d), None, None);
                }
                if self.req(w) {
                    let d = slot(grads, w, len(w));
                    kernels::conv2d_backward(xd, wd, g, &geom, None, Some(d), None);
                }
                if let Some(b) = bias.filter(|&b| self.req(b)) {
                    let d = slot(grads, b, len(b));
                    kernels::conv2d_backward(xd, wd, g, &geom, None, None, Some(d));
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.req(*x) {
                    let d = slot(grads, *x, len(*x));
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] += gv;
                    }
                }
            }
            &Op::Reshape(x) => {
                if self.req(x) {
                    let d = slot(grads, x, len(x));
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Permute { x, source } => {
                if self.req(*x) {
                    let d = slot(grads, *x, len(*x));
                    for (&src, &gv) in source.iter().zip(g) {
                        d[src] += gv;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.req(*x) {
                    let d = slot(grads, *x, len(*x));
                    for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            &Op::Sum(x) => {
                if self.req(x) {
                    slot(grads, x, len(x)).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if self.req(x) {
                    let n = len(x);
                    let share = g[0] / T::of(n as f64);
                    slot(grads, x, n).iter_mut().for_each(|d| *d += share);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.req(*logits) {
                    let n = probs.len() / labels.len();
                    let scale = g[0] / T::of(labels.len() as f64);
                    let d = slot(grads, *logits, len(*logits));
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..n {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            d[r * n + c] += scale * (probs[r * n + c] - onehot);
                        }
                    }
                }
            }
            &Op::Select { x, index } => {
                if self.req(x) {
                    slot(grads, x, len(x))[index] += g[0];
                }
            }
        }
    }

    /// Which side of every non-differentiable point the current values sit
    /// on: ReLU input signs and max-pool winners. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                &Op::Relu(x) => {
                    sig.extend(self.data(x).iter().map(|&v| usize::from(v > T::zero())))
                }
                Op::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates_and_rejects_bad_shapes() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([2, 3]));
        let r = g.constant(t(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let out = g.matmul(z, r).unwrap();
        assert_eq!(g.shape(out), &[2, 4]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let err = g.matmul(r, z).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[2, 1], &[10.0, 1.0]));
        let y = g.matmul(a, w).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 1]);
        assert_eq!(g.value(y).data(), &[12.0, 34.0]);
    }

    #[test]
    fn conv2d_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let id = g.conv2d(x, one, None, 1, 0).unwrap();
        assert_eq!(g.value(id).data(), g.value(x).data());
        let diag = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, diag, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let zeros = g.constant(Tensor::zeros([3, 1, 2, 2]));
        let z = g.conv2d(x, zeros, None, 1, 1).unwrap();
        assert_eq!(g.shape(z), &[1, 3, 3, 3]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let big = g.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(matches!(
            g.conv2d(x, big, None, 1, 1),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn maxpool_examples_and_tie_routing() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = g.maxpool2d(x, 1, 1).unwrap();
        assert_eq!(g.value(id).data(), g.value(x).data());
        let m = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        assert!(matches!(g.maxpool2d(x, 3, 1), Err(Error::Geometry(_))));

        let mut g = Graph::new();
        let c = g.param(Tensor::full([1, 1, 2, 2], 7.0));
        let m = g.maxpool2d(c, 2, 2).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(m).data(), &[7.0]);
        assert_eq!(g.grad(c).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (v, w) in g.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-5);
        }
        let a = g.constant(t(&[2], &[0.3, 1.1]));
        let b = g.constant(t(&[2], &[100.3, 101.1]));
        let (ya, yb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
        // non-last axis
        let m = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = g.softmax(m, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] + d[3] - 1.0).abs() < 1e-15);
        assert!(g.softmax(m, 2).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[3.0, 3.0, 3.0, 3.0]));
        let ones = g.constant(Tensor::ones([4]));
        let zeros = g.constant(Tensor::zeros([4]));
        let y = g.layernorm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let x = g.constant(t(&[4], &[1.0, -2.0, 0.5, 4.0]));
        let bias = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.layernorm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
        let unused = g.param(t(&[2], &[1.0, 1.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(3x) + sum(relu(x)); each use contributes
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.relu(x).unwrap();
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let l = g.add(sa, sb).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn cross_entropy_anchor_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1, 2]));
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let z = g.constant(t(&[1, 2], &[2.0, 0.0]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.value(l).item() - want).abs() < 1e-15);
        assert!((want - 0.1269).abs() < 1e-4);
        let z = g.constant(t(&[1, 2], &[800.0, 0.0]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-300);
        assert!(matches!(
            g.cross_entropy(z, &[2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }
}
