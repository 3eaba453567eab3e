use crate::autodiff::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::penalty::PenaltyKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::texture::{box_mean_replicate, box_mean_replicate_transpose};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Clamp01(Var),
    BroadcastChannels(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geometry: ConvGeometry,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    VarPool2d {
        x: Var,
        kernel: usize,
        /// Plane means subtracted before pooling (variance is shift invariant).
        shifts: Vec<T>,
        /// Box mean of the shifted input.
        mean: Vec<T>,
    },
    MeanAll(Var),
    MeanPerSample(Var),
    Penalty(Var, PenaltyKind),
    Reshape(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert tape for reverse-mode differentiation of tensor programs.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node
/// list is a valid topological order for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar root with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::AddScalar(a, s))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.unary(a, v, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(a, v, Op::LeakyRelu(a, slope))
    }

    /// Clip to `[0, 1]`; the gradient is passed through strictly inside.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()).min(T::one()));
        self.unary(a, v, Op::Clamp01(a))
    }

    /// `[N, 1, H, W]` -> `[N, C, H, W]` by repetition.
    pub fn broadcast_channels(&mut self, a: Var, channels: usize) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        assert_eq!(c, 1, "broadcast_channels expects a single channel");
        let src = self.value(a).data();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for i in 0..n {
            for _ in 0..channels {
                data.extend_from_slice(&src[i * plane..(i + 1) * plane]);
            }
        }
        let v = Tensor::new(vec![n, channels, h, w], data).unwrap();
        self.unary(a, v, Op::BroadcastChannels(a))
    }

    /// Zero-padded convolution. `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], ci, "conv input channels mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geometry = ConvGeometry {
            in_channels: ci,
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
            in_h: h,
            in_w: wd,
        };
        let out = conv2d_forward(
            &geometry,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, ws[0], geometry.out_h(), geometry.out_w()], out).unwrap();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv2d { x, w, b, geometry }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    data[(p * oh + y) * ow + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let v = Tensor::new(vec![n, c, oh, ow], data).unwrap();
        self.unary(a, v, Op::Upsample2x(a))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let v = Tensor::new(vec![n, ca + cb, h, w], data).unwrap();
        self.binary(a, b, v, Op::ConcatChannels(a, b))
    }

    /// Local variance over a `kernel x kernel` window (replicate padding),
    /// computed independently on every `[H, W]` plane.
    pub fn var_pool2d(&mut self, x: Var, kernel: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let plane = h * w;
        let mut out = vec![T::zero(); src.len()];
        let mut mean = vec![T::zero(); src.len()];
        let mut shifts = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let raw = &src[p * plane..(p + 1) * plane];
            let shift = raw.iter().copied().sum::<T>() / T::from_usize(plane).unwrap();
            shifts.push(shift);
            let xs: Vec<T> = raw.iter().map(|&v| v - shift).collect();
            let sq: Vec<T> = xs.iter().map(|&v| v * v).collect();
            let m = box_mean_replicate(&xs, h, w, kernel);
            let m2 = box_mean_replicate(&sq, h, w, kernel);
            for i in 0..plane {
                out[p * plane + i] = (m2[i] - m[i] * m[i]).max(T::zero());
            }
            mean[p * plane..(p + 1) * plane].copy_from_slice(&m);
        }
        let v = Tensor::new(vec![n, c, h, w], out).unwrap();
        self.unary(
            x,
            v,
            Op::VarPool2d {
                x,
                kernel,
                shifts,
                mean,
            },
        )
    }

    /// Mean over every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, v, Op::MeanAll(a))
    }

    /// `[N, ...]` -> `[N]` means.
    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let per = t.len() / n;
        let data = t
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().sum::<T>() / T::from_usize(per).unwrap())
            .collect();
        let v = Tensor::new(vec![n], data).unwrap();
        self.unary(a, v, Op::MeanPerSample(a))
    }

    /// Elementwise soft area penalty.
    pub fn penalty(&mut self, a: Var, kind: PenaltyKind) -> Var {
        let v = self.value(a).map(|e| kind.value(e));
        self.unary(a, v, Op::Penalty(a, kind))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape).expect("reshape size");
        self.unary(a, v, Op::Reshape(a))
    }

    /// `[N, C, H, W]` -> `[N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let plane = h * w;
        let denom = T::from_usize(plane).unwrap();
        let data = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let v = Tensor::new(vec![n, c], data).unwrap();
        self.unary(a, v, Op::GlobalAvgPool(a))
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` -> `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let v = Tensor::new(vec![n, o], out).unwrap();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(v, Op::Linear { x, w, b }, rg)
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.value(logits).shape().to_vec();
        let (n, k) = (s[0], s[1]);
        assert_eq!(labels.len(), n);
        let lg = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lg[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        loss /= T::from_usize(n).unwrap();
        let v = Tensor::scalar(loss);
        self.unary(
            logits,
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => {
                let two = T::lit(2.0);
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gx, x| two * x * gx));
            }
            Op::Abs(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gx, x| gx * sign(x)));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(&node.value, |gx, y| gx * y * (T::one() - y)));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gx, x| if x > T::zero() { gx } else { gx * slope }),
                );
            }
            Op::Clamp01(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gx, x| {
                        if x > T::zero() && x < T::one() {
                            gx
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::BroadcastChannels(a) => {
                let (n, _, h, w) = self.value(*a).dims4();
                let c = node.value.shape()[1];
                let plane = h * w;
                let mut out = Tensor::zeros(&[n, 1, h, w]);
                let od = out.data_mut();
                for i in 0..n {
                    for ch in 0..c {
                        let src = &g.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        for (o, &s) in od[i * plane..(i + 1) * plane].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Conv2d { x, w, b, geometry } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let n = self.value(*x).shape()[0];
                let cg = conv2d_backward(
                    geometry,
                    n,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    need,
                );
                if let Some(dx) = cg.dx {
                    let t = Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap();
                    self.accumulate(grads, *x, t);
                }
                if let Some(dw) = cg.dw {
                    let t = Tensor::new(self.value(*w).shape().to_vec(), dw).unwrap();
                    self.accumulate(grads, *w, t);
                }
                if let (Some(db), Some(b)) = (cg.db, b) {
                    let t = Tensor::new(self.value(*b).shape().to_vec(), db).unwrap();
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let (oh, ow) = (2 * h, 2 * w);
                let mut out = Tensor::zeros(&[n, c, h, w]);
                let od = out.data_mut();
                for p in 0..n * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            od[(p * h + y / 2) * w + x / 2] += g.data()[(p * oh + y) * ow + x];
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    ga.extend_from_slice(&g.data()[base..base + ca * plane]);
                    gb.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], gb).unwrap());
            }
            Op::VarPool2d {
                x,
                kernel,
                shifts,
                mean,
            } => {
                // out = B(x^2) - B(x)^2 with B the replicate-padded box mean.
                // dx = 2x * B^T(g) - 2 B^T(g * B(x))
                let (n, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let xs = self.value(*x).data();
                let two = T::lit(2.0);
                let mut out = vec![T::zero(); xs.len()];
                for p in 0..n * c {
                    let r = p * plane..(p + 1) * plane;
                    let gp = &g.data()[r.clone()];
                    let mp = &mean[r.clone()];
                    let bt_g = box_mean_replicate_transpose(gp, h, w, *kernel);
                    let gm: Vec<T> = gp.iter().zip(mp).map(|(&a, &b)| a * b).collect();
                    let bt_gm = box_mean_replicate_transpose(&gm, h, w, *kernel);
                    for i in 0..plane {
                        let xc = xs[p * plane + i] - shifts[p];
                        out[p * plane + i] = two * xc * bt_g[i] - two * bt_gm[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], out).unwrap());
            }
            Op::MeanAll(a) => {
                let len = self.value(*a).len();
                let s = g.data()[0] / T::from_usize(len).unwrap();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::MeanPerSample(a) => {
                let t = self.value(*a);
                let n = t.shape()[0];
                let per = t.len() / n;
                let denom = T::from_usize(per).unwrap();
                let data = (0..t.len()).map(|i| g.data()[i / per] / denom).collect();
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Penalty(a, kind) => {
                let kind = *kind;
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gx, e| gx * kind.derivative(e)));
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.value(*a).shape()).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let plane = h * w;
                let denom = T::from_usize(plane).unwrap();
                let data = (0..n * c * plane).map(|i| g.data()[i / plane] / denom).collect();
                self.accumulate(grads, *a, Tensor::new(vec![n, c, h, w], data).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(n, o, i, T::one(), g.data(), o as isize, 1, self.value(*w).data(), i as isize, 1, T::zero(), &mut dx, i as isize, 1);
                    self.accumulate(grads, *x, Tensor::new(vec![n, i], dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(o, n, i, T::one(), g.data(), 1, o as isize, self.value(*x).data(), i as isize, 1, T::zero(), &mut dw, i as isize, 1);
                    self.accumulate(grads, *w, Tensor::new(vec![o, i], dw).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db).unwrap());
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let s = self.value(*logits).shape().to_vec();
                let (n, k) = (s[0], s[1]);
                let scale = g.data()[0] / T::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(s, d).unwrap());
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `d f(x) / dx` for a graph program `f`.
    fn check_grad(shape: &[usize], seed: u64, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        let x0 = Tensor::from_fn(shape, |_| next() * 0.8 + 0.1);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = f(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).unwrap().clone();
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.variable(t);
            let y = f(&mut g, x);
            g.scalar_value(y)
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                "element {i}: analytic {an} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn conv_chain_gradient() {
        check_grad(&[2, 2, 6, 6], 1, |g, x| {
            let w = g.variable(Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.1));
            let b = g.variable(Tensor::from_fn(&[3], |i| i as f64 * 0.05));
            let y = g.conv2d(x, w, Some(b), 2, 1);
            let y = g.leaky_relu(y, 0.1);
            let y = g.upsample2x(y);
            let y = g.square(y);
            g.mean_all(y)
        });
    }

    #[test]
    fn var_pool_gradient() {
        check_grad(&[1, 2, 8, 8], 2, |g, x| {
            let v = g.var_pool2d(x, 3);
            g.mean_all(v)
        });
    }

    #[test]
    fn broadcast_concat_sigmoid_gradient() {
        check_grad(&[2, 1, 4, 4], 3, |g, x| {
            let b = g.broadcast_channels(x, 3);
            let s = g.sigmoid(b);
            let c = g.concat_channels(s, x);
            let m = g.mul(c, c);
            let ps = g.mean_per_sample(m);
            let p = g.penalty(ps, PenaltyKind::Itc);
            g.mean_all(p)
        });
    }

    #[test]
    fn linear_softmax_gradient() {
        check_grad(&[3, 2, 2, 2], 4, |g, x| {
            let p = g.global_avg_pool(x);
            let w = g.constant(Tensor::from_fn(&[4, 2], |i| (i as f64 - 3.0) * 0.3));
            let b = g.constant(Tensor::from_fn(&[4], |i| i as f64 * 0.1));
            let l = g.linear(p, w, b);
            g.softmax_cross_entropy(l, &[0, 3, 1])
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let v = g.variable(Tensor::full(&[1, 1, 2, 2], 0.25));
        let s = g.mul(c, v);
        let m = g.mean_all(s);
        let grads = g.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().data(), &[0.125; 4]);
    }
}
