//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value and the operation
//! that produced it. Nodes are appended in evaluation order, so replaying them
//! from the end is a valid reverse topological order. Gradients are only
//! propagated into nodes that transitively depend on a parameter or on an
//! input registered with `requires_grad`.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{s, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Square(Var),
    Abs(Var),
    Sum(Var),
    ClampLog {
        x: Var,
        lo: T,
        hi: T,
    },
    GroupL2 {
        x: Var,
        group: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::BatchNormTrain { .. } => "batchnorm2d(train)",
            Op::BatchNormEval { .. } => "batchnorm2d(eval)",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "fully_connected",
            Op::Reshape(_) => "reshape",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::ClampLog { .. } => "clamp_log",
            Op::GroupL2 { .. } => "group_l2",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics observed by a train-mode batch norm, used by
/// the caller to update running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable tensor whose gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let name = name.into();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name, v);
        v
    }

    /// A leaf that gradients flow *through* but are not collected for.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input leaf; with `requires_grad` its gradient is available via [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [f, wc, k, k2] = self.value(w).dims4("conv2d")?;
        if wc != c || k != k2 {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {c} vs weight {:?}", self.shape(w)),
            ));
        }
        if self.shape(b) != [f] {
            return Err(Error::dim("conv2d", format!("bias {:?} for {f} filters", self.shape(b))));
        }
        let (ho, wo) = match (
            ConvGeom::out_size(h, k, stride, pad),
            ConvGeom::out_size(wd, k, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"),
                ))
            }
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(vec![n, f, ho, wo], out)?;
        let rg = self.needs(&[x, w, b]);
        self.push(value, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Transposed convolution with weight `[in_channels, out_channels, k, k]`.
    /// The output size is `(h - 1) * stride - 2 * pad + k + output_padding`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv2d_transpose")?;
        let [wcin, cout, k, k2] = self.value(w).dims4("conv2d_transpose")?;
        if wcin != cin || k != k2 {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input channels {cin} vs weight {:?}", self.shape(w)),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("bias {:?} for {cout} outputs", self.shape(b)),
            ));
        }
        if stride == 0 || output_padding >= stride.max(1) {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("output_padding {output_padding} must be below stride {stride}"),
            ));
        }
        let grow = |size: usize| -> Option<usize> {
            ((size - 1) * stride + k + output_padding).checked_sub(2 * pad).filter(|&v| v > 0)
        };
        let (ho, wo) = match (grow(h), grow(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::dim(
                    "conv2d_transpose",
                    format!("padding {pad} too large for kernel {k}"),
                ))
            }
        };
        let geom = ConvGeom {
            n,
            c: cout,
            h: ho,
            w: wo,
            f: cin,
            k,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        debug_assert_eq!(ConvGeom::out_size(ho, k, stride, pad), Some(h));
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        let rg = self.needs(&[x, w, b]);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = self.value(x).dims4("batchnorm2d")?;
        if self.shape(gamma) != [dims[1]] || self.shape(beta) != [dims[1]] {
            return Err(Error::dim(
                "batchnorm2d",
                format!(
                    "gamma {:?} / beta {:?} for {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    dims[1]
                ),
            ));
        }
        Ok(dims)
    }

    /// Batch norm with batch statistics.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let [n, c, h, w] = self.check_bn(x, gamma, beta)?;
        let plane = h * w;
        let count = n * plane;
        if count < 2 {
            return Err(Error::Contract(
                "batchnorm2d in train mode needs at least 2 values per channel".into(),
            ));
        }
        let xs = self.value(x).data();
        let cnt: T = s(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                for &v in &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    acc = acc + v;
                }
            }
            let m = acc / cnt;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    sq = sq + (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = sq / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + s(eps)).sqrt().recip()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std, [n, c, h, w]);
        let unbiased = var
            .iter()
            .map(|&v| v * cnt / (cnt - T::one()))
            .collect();
        let rg = self.needs(&[x, gamma, beta]);
        let var_node = self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((
            var_node,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != dims[1] || running_var.len() != dims[1] {
            return Err(Error::dim("batchnorm2d", "running statistics length"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| (v + s(eps)).sqrt().recip())
            .collect();
        let (xhat, out) = self.normalize(x, gamma, beta, running_mean, &inv_std, dims);
        let rg = self.needs(&[x, gamma, beta]);
        self.push(
            Tensor::new(dims.to_vec(), out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        [n, c, h, w]: [usize; 4],
    ) -> (Vec<T>, Vec<T>) {
        let plane = h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        (xhat, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.needs(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Parameter(format!("leaky relu slope {alpha} outside (0,1)")));
        }
        let a: T = s(alpha);
        let v = self.value(x).map(|u| if u > T::zero() { u } else { a * u });
        let rg = self.needs(&[x]);
        self.push(v, Op::LeakyRelu(x, a), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        let rg = self.needs(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let denom: T = s(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        let rg = self.needs(&[x]);
        self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(x), rg)
    }

    /// `x [n, d] @ w [d, e] + b [e]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            &[n, d] => (n, d),
            other => return Err(Error::dim("fully_connected", format!("input {other:?} is not 2-d"))),
        };
        let e = match self.shape(w) {
            &[wd, e] if wd == d => e,
            other => {
                return Err(Error::dim(
                    "fully_connected",
                    format!("weight {other:?} for input width {d}"),
                ))
            }
        };
        if self.shape(b) != [e] {
            return Err(Error::dim(
                "fully_connected",
                format!("bias {:?} for width {e}", self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); n * e];
        for row in out.chunks_mut(e) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            d,
            e,
            T::one(),
            self.value(x).data(),
            (d as isize, 1),
            self.value(w).data(),
            (e as isize, 1),
            T::one(),
            &mut out,
            (e as isize, 1),
        );
        let rg = self.needs(&[x, w, b]);
        self.push(Tensor::new(vec![n, e], out)?, Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Concatenate `[n, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::dim("concat_channels", "nothing to concatenate"))?;
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let [xn, xc, xh, xw] = self.value(x).dims4("concat_channels")?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(x), self.shape(first)),
                ));
            }
            chans.push(xc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = self.needs(xs);
        self.push(
            Tensor::new(vec![n, total, h, w], out)?,
            Op::ConcatChannels(xs.to_vec()),
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (a, c): (T, T) = (s(scale), s(shift));
        let v = self.value(x).map(|u| a * u + c);
        let rg = self.needs(&[x]);
        self.push(v, Op::Affine(x, a), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.affine(x, k, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|u| u * u);
        let rg = self.needs(&[x]);
        self.push(v, Op::Square(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|u| u.abs());
        let rg = self.needs(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// `ln(clamp(x, lo, hi))`; zero gradient where the clamp is active.
    pub fn clamp_log(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Parameter(format!("clamp_log bounds [{lo}, {hi}]")));
        }
        let (l, h): (T, T) = (s(lo), s(hi));
        let v = self.value(x).map(|u| u.max(l).min(h).ln());
        let rg = self.needs(&[x]);
        self.push(v, Op::ClampLog { x, lo: l, hi: h }, rg)
    }

    /// Euclidean norm of each consecutive group of `group` entries.
    pub fn group_l2(&mut self, x: Var, group: usize) -> Result<Var> {
        let len = self.value(x).len();
        if group == 0 || len % group != 0 {
            return Err(Error::dim("group_l2", format!("{len} entries in groups of {group}")));
        }
        let data = self
            .value(x)
            .data()
            .chunks(group)
            .map(|g| g.iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        let rg = self.needs(&[x]);
        self.push(Tensor::new(vec![len / group], data)?, Op::GroupL2 { x, group }, rg)
    }

    /// Replays the tape backwards from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), self.shape(*v).to_vec()))
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let g = if g.shape() == self.shape(v) {
            g
        } else {
            g.reshape(self.shape(v).to_vec())?
        };
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(T::one(), &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    geom,
                    g.data(),
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                );
                self.apply_conv_grads(grads, cg, *x, *w, *b)?;
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let cg = kernels::conv_transpose_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    geom,
                    g.data(),
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                );
                self.apply_conv_grads(grads, cg, *x, *w, *b)?;
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = out.dims4("batchnorm2d")?;
                let plane = h * w;
                let count: T = s((n * plane) as f64);
                let gd = g.data();
                let (sum_dy, sum_dy_xhat) = channel_sums(gd, xhat, n, c, plane);
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / count;
                            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                dx[i] = k * (count * gd[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_dy_xhat)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], sum_dy)?)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = out.dims4("batchnorm2d")?;
                let plane = h * w;
                let gd = g.data();
                let (sum_dy, sum_dy_xhat) = channel_sums(gd, xhat, n, c, plane);
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = (i / plane) % c;
                        *d = gd[i] * gam[ch] * inv_std[ch];
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_dy_xhat)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], sum_dy)?)?;
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::LeakyRelu(x, a) => {
                let a = *a;
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { a * gv })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(out, |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x).to_vec();
                let plane = shape[2] * shape[3];
                let denom: T = s(plane as f64);
                let gd = g.data();
                let d = Tensor::from_fn(shape, |i| gd[i / plane] / denom);
                self.accumulate(grads, *x, d)?;
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let e = self.shape(*w)[1];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        e,
                        d,
                        T::one(),
                        g.data(),
                        (e as isize, 1),
                        self.value(*w).data(),
                        (1, e as isize),
                        T::zero(),
                        &mut dx,
                        (d as isize, 1),
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); d * e];
                    T::gemm(
                        d,
                        n,
                        e,
                        T::one(),
                        self.value(*x).data(),
                        (1, d as isize),
                        g.data(),
                        (e as isize, 1),
                        T::zero(),
                        &mut dw,
                        (e as isize, 1),
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![d, e], dw)?)?;
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); e];
                    for row in g.data().chunks(e) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![e], db)?)?;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::ConcatChannels(xs) => {
                let [n, total, h, w] = out.dims4("concat_channels")?;
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.rg(x) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            d.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        self.accumulate(grads, x, Tensor::new(vec![n, c, h, w], d)?)?;
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Affine(x, k) => {
                let k = *k;
                self.accumulate(grads, *x, g.map(|v| v * k))?;
            }
            Op::Square(x) => {
                let two: T = s(2.0);
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| two * xv * gv)?)?;
            }
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv))?;
            }
            Op::ClampLog { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    if xv >= lo && xv <= hi {
                        gv / xv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::GroupL2 { x, group } => {
                let xv = self.value(*x);
                let gd = g.data();
                let od = out.data();
                let d = Tensor::from_fn(xv.shape().to_vec(), |i| {
                    let norm = od[i / group];
                    if norm > T::zero() {
                        gd[i / group] * xv.data()[i] / norm
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d)?;
            }
        }
        Ok(())
    }

    fn apply_conv_grads(
        &self,
        grads: &mut [Option<Tensor<T>>],
        cg: kernels::ConvGrads<T>,
        x: Var,
        w: Var,
        b: Var,
    ) -> Result<()> {
        if let Some(dx) = cg.input {
            self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), dx)?)?;
        }
        if let Some(dw) = cg.weight {
            self.accumulate(grads, w, Tensor::new(self.shape(w).to_vec(), dw)?)?;
        }
        if let Some(db) = cg.bias {
            self.accumulate(grads, b, Tensor::new(self.shape(b).to_vec(), db)?)?;
        }
        Ok(())
    }
}

fn channel_sums<T: Scalar>(gd: &[T], xhat: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                sum_dy[ch] = sum_dy[ch] + gd[i];
                sum_dy_xhat[ch] = sum_dy_xhat[ch] + gd[i] * xhat[i];
            }
        }
    }
    (sum_dy, sum_dy_xhat)
}

pub(crate) fn sigmoid<T: Scalar>(u: T) -> T {
    // Split on sign so exp never overflows.
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
    shapes: HashMap<String, Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter; zeros when the loss does not depend on it.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let v = self.params.get(name)?;
        Some(
            self.wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shapes[name].clone())),
        )
    }

    /// Every named parameter's gradient, in name order.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .keys()
            .map(|k| (k.clone(), self.param(k).expect("registered parameter")))
            .collect()
    }
}
