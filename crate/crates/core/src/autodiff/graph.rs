use crate::interp;
use crate::tensor::{Scalar, ShapeError, Tensor};

use super::kernels::{self, ConvGeometry};
use super::loss::{self, DiceSums};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied operation: receives the input values, the
/// output value and the upstream gradient, and returns one gradient buffer per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T: Scalar> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        src: [usize; 3],
        dst: [usize; 3],
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulBroadcast {
        x: Var,
        alpha: Var,
    },
    Concat(Var, Var),
    Softmax(Var),
    Sum(Var),
    Dice {
        p: Var,
        t: Var,
        sums: DiceSums,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool3d { .. } => "maxpool3d",
            Op::Resize { .. } => "resize_trilinear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::Concat(..) => "concat_channels",
            Op::Softmax(_) => "softmax_channels",
            Op::Sum(_) => "sum",
            Op::Dice { .. } => "dice_loss",
            Op::Custom { .. } => "custom",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(*b);
                p
            }
            Op::MaxPool3d { x, .. } | Op::Resize { x, .. } => vec![*x],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Softmax(x) | Op::Sum(x) => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::MulBroadcast { x, alpha } => vec![*x, *alpha],
            Op::Dice { p, t, .. } => vec![*p, *t],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only computation record. Nodes are stored in creation order, which
/// is a topological order: every parent precedes its children.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn spatial_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize), ShapeError> {
    if shape.len() < 2 {
        return Err(ShapeError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            op => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (parameters, checked inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf excluded from differentiation (data, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, ShapeError> {
        let geom = ConvGeometry::new(
            self.value(x).shape(),
            self.value(w).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.out_channels] {
                return Err(ShapeError::Incompatible {
                    op: "conv3d",
                    lhs: self.value(w).shape().to_vec(),
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }))
    }

    pub fn maxpool3d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var, ShapeError> {
        let shape = self.value(x).dims5("maxpool3d")?;
        let extent = |len| {
            kernels::pool_extent(len, window, stride).ok_or_else(|| ShapeError::Invalid {
                op: "maxpool3d",
                reason: format!("window {window} / stride {stride} do not fit extent {len}"),
            })
        };
        let out_dims = [extent(shape[2])?, extent(shape[3])?, extent(shape[4])?];
        let (values, argmax) =
            kernels::maxpool3d_forward(self.value(x).data(), shape, window, stride, out_dims);
        let value = Tensor::new(
            vec![shape[0], shape[1], out_dims[0], out_dims[1], out_dims[2]],
            values,
        )?;
        Ok(self.push(value, Op::MaxPool3d { x, argmax }))
    }

    /// Align-corners trilinear resampling of every `(n, c)` block to `dst` spatial dims.
    pub fn resize_trilinear(&mut self, x: Var, dst: [usize; 3]) -> Result<Var, ShapeError> {
        let [n, c, d, h, w] = self.value(x).dims5("resize_trilinear")?;
        if dst.contains(&0) {
            return Err(ShapeError::Invalid {
                op: "resize_trilinear",
                reason: format!("target dims {dst:?} must be positive"),
            });
        }
        let src = [d, h, w];
        let (sp, dp) = (d * h * w, dst.iter().product::<usize>());
        let mut out = Vec::with_capacity(n * c * dp);
        for block in self.value(x).data().chunks_exact(sp) {
            out.extend(interp::resize_block(block, src, dst));
        }
        let value = Tensor::new(vec![n, c, dst[0], dst[1], dst[2]], out)?;
        Ok(self.push(value, Op::Resize { x, src, dst }))
    }

    pub fn upsample_trilinear(&mut self, x: Var, scale: usize) -> Result<Var, ShapeError> {
        let [_, _, d, h, w] = self.value(x).dims5("upsample_trilinear")?;
        self.resize_trilinear(x, [d * scale, h * scale, w * scale])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(ShapeError::Incompatible {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `x ⊙ α` with a single-channel `α` of shape `(N, 1, ...)` broadcast over x's channels.
    pub fn mul_broadcast(&mut self, x: Var, alpha: Var) -> Result<Var, ShapeError> {
        let (xs, als) = (self.value(x).shape(), self.value(alpha).shape());
        let compatible = xs.len() >= 2
            && als.len() == xs.len()
            && als[0] == xs[0]
            && als[1] == 1
            && als[2..] == xs[2..];
        if !compatible {
            return Err(ShapeError::Incompatible {
                op: "mul_broadcast",
                lhs: xs.to_vec(),
                rhs: als.to_vec(),
            });
        }
        let (n, c, s) = spatial_layout(xs, "mul_broadcast")?;
        let (xd, ad) = (self.value(x).data(), self.value(alpha).data());
        let mut data = Vec::with_capacity(xd.len());
        for b in 0..n {
            let a = &ad[b * s..(b + 1) * s];
            for ch in 0..c {
                let off = (b * c + ch) * s;
                data.extend(xd[off..off + s].iter().zip(a).map(|(&v, &w)| v * w));
            }
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::MulBroadcast { x, alpha }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(ShapeError::Incompatible {
                op: "concat_channels",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, ca, s) = spatial_layout(sa, "concat_channels")?;
        let cb = sb[1];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for i in 0..n {
            data.extend_from_slice(&ad[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&bd[i * cb * s..(i + 1) * cb * s]);
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Softmax across the channel axis (axis 1) at every spatial position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, ShapeError> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = spatial_layout(&shape, "softmax_channels")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            let base = b * c * s;
            for i in 0..s {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(xd[base + ch * s + i]);
                }
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (xd[base + ch * s + i] - m).exp();
                    out[base + ch * s + i] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[base + ch * s + i] = out[base + ch * s + i] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Soft dice loss of probabilities `p` against one-hot targets `t`, both `(N, C, ...)`.
    pub fn dice_loss(&mut self, p: Var, t: Var, foreground_only: bool) -> Result<Var, ShapeError> {
        let sums = loss::dice_sums(self.value(p), self.value(t), foreground_only)?;
        let value = Tensor::scalar(T::from_f64_lossy(sums.loss()));
        Ok(self.push(value, Op::Dice { p, t, sums }))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse-mode accumulation from a scalar `loss`. Gradients add onto any
    /// left by earlier passes until [`Graph::zero_grad`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<(), ShapeError> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(ShapeError::Invalid {
                op: "backward",
                reason: format!("loss must be a scalar, got shape {shape:?}"),
            });
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = pending[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (parent, g) in self.local_grads(idx, &upstream) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut pending[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot => *slot = Some(g),
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&upstream).for_each(|(a, &v)| *a += v),
                slot => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, up: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, geom } => {
                let grads = kernels::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    up,
                    geom,
                    self.wants(*x),
                );
                let mut res = vec![(*w, grads.w)];
                if let Some(gx) = grads.x {
                    res.push((*x, gx));
                }
                if let Some(b) = b {
                    res.push((*b, grads.b));
                }
                res
            }
            Op::MaxPool3d { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&i, &g) in argmax.iter().zip(up) {
                    gx[i] += g;
                }
                vec![(*x, gx)]
            }
            Op::Resize { x, src, dst } => {
                let dp: usize = dst.iter().product();
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for block in up.chunks_exact(dp) {
                    gx.extend(interp::resize_block_backward(block, *src, *dst));
                }
                vec![(*x, gx)]
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = out
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let ga = bd.iter().zip(up).map(|(&v, &g)| v * g).collect();
                let gb = ad.iter().zip(up).map(|(&v, &g)| v * g).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::MulBroadcast { x, alpha } => {
                let (n, c, s) = spatial_layout(out.shape(), "mul_broadcast").expect("validated");
                let (xd, ad) = (self.value(*x).data(), self.value(*alpha).data());
                let mut gx = vec![T::zero(); xd.len()];
                let mut ga = vec![T::zero(); ad.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for i in 0..s {
                            gx[off + i] = up[off + i] * ad[b * s + i];
                            ga[b * s + i] += up[off + i] * xd[off + i];
                        }
                    }
                }
                vec![(*x, gx), (*alpha, ga)]
            }
            Op::Concat(a, b) => {
                let (n, ca, s) =
                    spatial_layout(self.value(*a).shape(), "concat").expect("validated");
                let cb = self.value(*b).shape()[1];
                let mut ga = Vec::with_capacity(n * ca * s);
                let mut gb = Vec::with_capacity(n * cb * s);
                for chunk in up.chunks_exact((ca + cb) * s) {
                    ga.extend_from_slice(&chunk[..ca * s]);
                    gb.extend_from_slice(&chunk[ca * s..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax(x) => {
                let (n, c, s) = spatial_layout(out.shape(), "softmax").expect("validated");
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * c * s;
                    for i in 0..s {
                        let mut dotp = T::zero();
                        for ch in 0..c {
                            let k = base + ch * s + i;
                            dotp += y[k] * up[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * s + i;
                            gx[k] = y[k] * (up[k] - dotp);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![up[0]; self.value(*x).len()])],
            Op::Dice { p, t, sums } => {
                let (gp, gt) =
                    loss::dice_backward(self.value(*p), self.value(*t), sums, up[0].to_f64_lossy());
                vec![(*p, gp), (*t, gt)]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&values, out, up);
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}
