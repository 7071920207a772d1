//! Minimal reverse-mode differentiation over channel-first image tensors.
//!
//! A [`Graph`] records every operation of one forward pass in an arena;
//! [`Graph::backward`] walks it in reverse and returns the gradient of a
//! scalar node with respect to every parameter. The graph is generic over the
//! float type so the same network code runs in f32 for training and in f64 for
//! finite-difference checks.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::ops;

/// Float type a graph can run in.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: the strided views must stay
    /// inside the buffers behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major GEMM `c (m x n) = op(a) * op(b) + beta * c`, where `op` optionally
/// transposes a contiguous row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe exactly those buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[c, h, w]` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [c, h, w], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    AddScalar { x: Var },
    Add { a: Var, b: Var },
    Concat { a: Var, b: Var },
    AdaptiveAvgPool { x: Var },
    SoftmaxDim1 { x: Var },
    Mode3 { v: Var, u: Var },
    Upsample { x: Var, factor: usize },
    Downsample { x: Var, factor: usize },
    L1Mean { a: Var, b: Var },
    MseMean { a: Var, b: Var },
    SobelL1 { a: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Arena of recorded operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node; `None` for nodes the loss does not depend on.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize) -> Self {
        let (cin, h, wd) = (x[0], x[1], x[2]);
        assert_eq!(w.len(), 4, "conv weight must be [cout, cin, k, k]");
        assert_eq!(w[1], cin, "conv expects {} input channels, got {cin}", w[1]);
        assert_eq!(w[2], w[3]);
        let k = w[2];
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w: wd,
            cout: w[0],
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    // Source index for output (oy, ox) and tap (ky, kx); None when in padding.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let n = self.cols();
        let mut col = vec![T::zero(); self.rows() * n];
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.src(oy, ox, ky, kx) {
                                dst[oy * self.wo + ox] = x[(ci * self.h + y) * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T]) -> Vec<T> {
        let n = self.cols();
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.src(oy, ox, ky, kx) {
                                let i = (ci * self.h + y) * self.w + xx;
                                x[i] = x[i] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn pool_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Tensor<T>>, shape: &[usize], src: Vec<T>) {
    match dst {
        Some(t) => t.data.iter_mut().zip(src).for_each(|(d, s)| *d = *d + s),
        None => *dst = Some(Tensor::new(shape.to_vec(), src)),
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// 3x3-style convolution with zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let g = ConvGeom::new(&self.value(x).shape, &self.value(w).shape, stride);
        let col = g.im2col(&self.value(x).data);
        let n = g.cols();
        let bias = &self.value(b).data;
        assert_eq!(bias.len(), g.cout);
        let mut out = vec![T::zero(); g.cout * n];
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        gemm(g.cout, g.rows(), n, &self.value(w).data, false, &col, false, T::one(), &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::new(vec![g.cout, g.ho, g.wo], out),
            Op::Conv2d { x, w, b, stride },
            ng,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let data = self
            .value(x)
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let t = Tensor::new(self.value(x).shape.clone(), data);
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let t = Tensor::new(self.value(x).shape.clone(), data);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid { x }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data.iter().map(|&v| v + c).collect();
        let t = Tensor::new(self.value(x).shape.clone(), data);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add { a, b }, ng)
    }

    /// Sum of several scalar (or same-shape) nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let mut it = terms.iter().copied();
        let first = it.next().expect("sum of at least one term");
        it.fold(first, |acc, t| self.add(acc, t))
    }

    /// Channel concatenation of two `[c, h, w]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![ca + cb, h, w], data), Op::Concat { a, b }, ng)
    }

    /// Adaptive average pooling of `[c, h, w]` to `[c, out_h, out_w]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let rb = pool_bins(h, out_h);
        let cb = pool_bins(w, out_w);
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for &(r0, r1) in &rb {
                for &(c0, c1) in &cb {
                    let mut acc = T::zero();
                    for r in r0..r1 {
                        for col in c0..c1 {
                            acc = acc + src[(ch * h + r) * w + col];
                        }
                    }
                    out.push(acc / T::c(((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, out_h, out_w], out), Op::AdaptiveAvgPool { x }, ng)
    }

    /// Softmax over the middle axis of a `[c, r, w]` tensor.
    pub fn softmax_dim1(&mut self, x: Var) -> Var {
        let (c, r, w) = self.value(x).chw();
        let src = &self.value(x).data;
        let mut out = vec![T::zero(); src.len()];
        for ch in 0..c {
            for j in 0..w {
                let idx = |k: usize| (ch * r + k) * w + j;
                let m = (0..r).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..r {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z = z + e;
                }
                for k in 0..r {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, r, w], out), Op::SoftmaxDim1 { x }, ng)
    }

    /// `v: [r, h, w]`, `u: [b, r, 1]` -> `[b, h, w]` with band `i = sum_k u[i,k] v[k]`.
    pub fn mode3(&mut self, v: Var, u: Var) -> Var {
        let (r, h, w) = self.value(v).chw();
        let (b, ru, one) = self.value(u).chw();
        assert_eq!((ru, one), (r, 1), "mode-3 rank mismatch");
        let mut out = vec![T::zero(); b * h * w];
        gemm(b, r, h * w, &self.value(u).data, false, &self.value(v).data, false, T::zero(), &mut out);
        let ng = self.ng(v) || self.ng(u);
        self.push(Tensor::new(vec![b, h, w], out), Op::Mode3 { v, u }, ng)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let out = ops::upsample(&self.value(x).data, c, h, w, factor);
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![c, h * factor, w * factor], out),
            Op::Upsample { x, factor },
            ng,
        )
    }

    pub fn downsample(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(h % factor == 0 && w % factor == 0, "downsample needs divisible dims");
        let out = ops::downsample(&self.value(x).data, c, h, w, factor);
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![c, h / factor, w / factor], out),
            Op::Downsample { x, factor },
            ng,
        )
    }

    /// `mean |a - b|`
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "l1 shape mismatch");
        let n = self.value(a).len();
        let s = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s / T::c(n as f64)), Op::L1Mean { a, b }, ng)
    }

    /// `mean (a - b)^2`
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "mse shape mismatch");
        let n = self.value(a).len();
        let s = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s / T::c(n as f64)), Op::MseMean { a, b }, ng)
    }

    /// Average of `mean |Sx(a) - Sx(b)|` and `mean |Sy(a) - Sy(b)|` with the
    /// 3x3 Sobel pair under replicate padding.
    pub fn sobel_l1(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "sobel shape mismatch");
        let (c, h, w) = self.value(a).chw();
        let diff: Vec<T> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x - y)
            .collect();
        let n = T::c((c * h * w) as f64);
        let mut total = T::zero();
        for k in [&ops::SOBEL_X, &ops::SOBEL_Y] {
            let resp = ops::filter3_replicate(&diff, c, h, w, k);
            total = total + resp.iter().fold(T::zero(), |acc, v| acc + v.abs()) / n;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::scalar(total * T::c(0.5)),
            Op::SobelL1 { a, b },
            ng,
        )
    }

    /// Signs of every kink argument in recording order: leaky-ReLU inputs and
    /// the residuals inside L1 and Sobel-L1 losses. Two recordings of the same
    /// program with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu { x, .. } => sig.extend(self.value(x).data.iter().map(|&v| v > T::zero())),
                Op::L1Mean { a, b } => sig.extend(
                    self.value(a)
                        .data
                        .iter()
                        .zip(&self.value(b).data)
                        .map(|(&x, &y)| x > y),
                ),
                Op::SobelL1 { a, b } => {
                    let (c, h, w) = self.value(a).chw();
                    let diff: Vec<T> = self
                        .value(a)
                        .data
                        .iter()
                        .zip(&self.value(b).data)
                        .map(|(&x, &y)| x - y)
                        .collect();
                    for k in [&ops::SOBEL_X, &ops::SOBEL_Y] {
                        sig.extend(ops::filter3_replicate(&diff, c, h, w, k).iter().map(|&v| v > T::zero()));
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = &g.data;
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride } => {
                let geom = ConvGeom::new(&self.value(x).shape, &self.value(w).shape, stride);
                let n = geom.cols();
                let col = geom.im2col(&self.value(x).data);
                if self.ng(w) {
                    let mut dw = vec![T::zero(); geom.cout * geom.rows()];
                    gemm(geom.cout, n, geom.rows(), gd, false, &col, true, T::zero(), &mut dw);
                    add_into(&mut grads[w.0], &self.value(w).shape, dw);
                }
                if self.ng(b) {
                    let db = gd
                        .chunks(n)
                        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    add_into(&mut grads[b.0], &self.value(b).shape, db);
                }
                if self.ng(x) {
                    let mut dcol = vec![T::zero(); geom.rows() * n];
                    gemm(geom.rows(), geom.cout, n, &self.value(w).data, true, gd, false, T::zero(), &mut dcol);
                    add_into(&mut grads[x.0], &self.value(x).shape, geom.col2im(&dcol));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(x)
                    .data
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * slope })
                    .collect();
                add_into(&mut grads[x.0], &self.value(x).shape, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                add_into(&mut grads[x.0], &self.value(x).shape, dx);
            }
            Op::AddScalar { x } => add_into(&mut grads[x.0], &self.value(x).shape, gd.clone()),
            Op::Add { a, b } => {
                if self.ng(a) {
                    add_into(&mut grads[a.0], &self.value(a).shape, gd.clone());
                }
                if self.ng(b) {
                    add_into(&mut grads[b.0], &self.value(b).shape, gd.clone());
                }
            }
            Op::Concat { a, b } => {
                let split = self.value(a).len();
                if self.ng(a) {
                    add_into(&mut grads[a.0], &self.value(a).shape, gd[..split].to_vec());
                }
                if self.ng(b) {
                    add_into(&mut grads[b.0], &self.value(b).shape, gd[split..].to_vec());
                }
            }
            Op::AdaptiveAvgPool { x } => {
                let (c, h, w) = self.value(x).chw();
                let (_, oh, ow) = g.chw();
                let rb = pool_bins(h, oh);
                let cb = pool_bins(w, ow);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for (i, &(r0, r1)) in rb.iter().enumerate() {
                        for (j, &(c0, c1)) in cb.iter().enumerate() {
                            let share = gd[(ch * oh + i) * ow + j]
                                / T::c(((r1 - r0) * (c1 - c0)) as f64);
                            for r in r0..r1 {
                                for col in c0..c1 {
                                    let k = (ch * h + r) * w + col;
                                    dx[k] = dx[k] + share;
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], &self.value(x).shape, dx);
            }
            Op::SoftmaxDim1 { x } => {
                let (c, r, w) = node.value.chw();
                let y = &node.value.data;
                let mut dx = vec![T::zero(); y.len()];
                for ch in 0..c {
                    for j in 0..w {
                        let idx = |k: usize| (ch * r + k) * w + j;
                        let dot = (0..r).fold(T::zero(), |a, k| a + y[idx(k)] * gd[idx(k)]);
                        for k in 0..r {
                            dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], &self.value(x).shape, dx);
            }
            Op::Mode3 { v, u } => {
                let (r, h, w) = self.value(v).chw();
                let b = self.value(u).shape[0];
                let n = h * w;
                if self.ng(u) {
                    let mut du = vec![T::zero(); b * r];
                    gemm(b, n, r, gd, false, &self.value(v).data, true, T::zero(), &mut du);
                    add_into(&mut grads[u.0], &self.value(u).shape, du);
                }
                if self.ng(v) {
                    let mut dv = vec![T::zero(); r * n];
                    gemm(r, b, n, &self.value(u).data, true, gd, false, T::zero(), &mut dv);
                    add_into(&mut grads[v.0], &self.value(v).shape, dv);
                }
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = self.value(x).chw();
                let dx = ops::upsample_adjoint(gd, c, h, w, factor);
                add_into(&mut grads[x.0], &self.value(x).shape, dx);
            }
            Op::Downsample { x, factor } => {
                let (c, h, w) = self.value(x).chw();
                let dx = ops::downsample_adjoint(gd, c, h, w, factor);
                add_into(&mut grads[x.0], &self.value(x).shape, dx);
            }
            Op::L1Mean { a, b } => {
                let up = g.item() / T::c(self.value(a).len() as f64);
                let da: Vec<T> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(&self.value(b).data)
                    .map(|(&x, &y)| sign(x - y) * up)
                    .collect();
                self.scatter_pair(a, b, da, grads);
            }
            Op::MseMean { a, b } => {
                let up = g.item() * T::c(2.0) / T::c(self.value(a).len() as f64);
                let da: Vec<T> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(&self.value(b).data)
                    .map(|(&x, &y)| (x - y) * up)
                    .collect();
                self.scatter_pair(a, b, da, grads);
            }
            Op::SobelL1 { a, b } => {
                let (c, h, w) = self.value(a).chw();
                let diff: Vec<T> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(&self.value(b).data)
                    .map(|(&x, &y)| x - y)
                    .collect();
                let up = g.item() * T::c(0.5) / T::c((c * h * w) as f64);
                let mut da = vec![T::zero(); diff.len()];
                for k in [&ops::SOBEL_X, &ops::SOBEL_Y] {
                    let resp: Vec<T> = ops::filter3_replicate(&diff, c, h, w, k)
                        .into_iter()
                        .map(|v| sign(v) * up)
                        .collect();
                    let back = ops::filter3_replicate_adjoint(&resp, c, h, w, k);
                    da.iter_mut().zip(back).for_each(|(d, v)| *d = *d + v);
                }
                self.scatter_pair(a, b, da, grads);
            }
        }
    }

    // d/da = da, d/db = -da
    fn scatter_pair(&self, a: Var, b: Var, da: Vec<T>, grads: &mut [Option<Tensor<T>>]) {
        if self.ng(b) {
            let db = da.iter().map(|&v| -v).collect();
            add_into(&mut grads[b.0], &self.value(b).shape, db);
        }
        if self.ng(a) {
            add_into(&mut grads[a.0], &self.value(a).shape, da);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    // Builds a scalar from a single parameter, compares backward with central differences.
    fn check_op(
        shape: Vec<usize>,
        seed: u64,
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p0 = rand_tensor(shape, &mut rng);
        let eval = |p: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.parameter(p.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.parameter(p0.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).expect("gradient").data.clone();
        let h = 1e-5;
        for i in 0..p0.len() {
            let mut plus = p0.clone();
            plus.data[i] += h;
            let mut minus = p0.clone();
            minus.data[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(vec![2, 5, 6], &mut rng);
        let w = rand_tensor(vec![3, 2, 3, 3], &mut rng);
        for stride in [1usize, 2] {
            let (x, w) = (x.clone(), w.clone());
            check_op(vec![3], 2, move |g, b| {
                let xv = g.parameter(x.clone());
                let wv = g.constant(w.clone());
                let y = g.conv2d(xv, wv, b, stride);
                let z = g.constant(Tensor::zeros(g.value(y).shape.clone()));
                g.mse_mean(y, z)
            });
        }
        // gradient with respect to weights and input
        let t2 = rand_tensor(vec![3, 5, 6], &mut rng);
        let bias = rand_tensor(vec![3], &mut rng);
        let xc = x.clone();
        check_op(vec![3, 2, 3, 3], 3, move |g, w| {
            let xv = g.constant(xc.clone());
            let bv = g.constant(bias.clone());
            let y = g.conv2d(xv, w, bv, 1);
            let tgt = g.constant(t2.clone());
            g.mse_mean(y, tgt)
        });
        let wc = w.clone();
        check_op(vec![2, 5, 6], 4, move |g, x| {
            let wv = g.constant(wc.clone());
            let bv = g.constant(Tensor::zeros(vec![3]));
            let y = g.conv2d(x, wv, bv, 2);
            let s = g.sigmoid(y);
            let z = g.constant(Tensor::zeros(g.value(s).shape.clone()));
            g.mse_mean(s, z)
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let other = rand_tensor(vec![2, 4, 4], &mut rng);
        let o2 = other.clone();
        check_op(vec![2, 4, 4], 8, move |g, x| {
            let a = g.leaky_relu(x, 0.2);
            let b = g.constant(o2.clone());
            let c = g.concat(a, b);
            let p = g.adaptive_avg_pool(c, 3, 1);
            let s = g.softmax_dim1(p);
            let z = g.constant(Tensor::zeros(vec![4, 3, 1]));
            let sq = g.mse_mean(s, z);
            let shifted = g.add_scalar(x, 0.3);
            let l1 = g.l1_mean(shifted, b);
            g.sum(&[sq, l1])
        });
    }

    #[test]
    fn mode3_resample_and_sobel_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = rand_tensor(vec![5, 2, 1], &mut rng);
        let tgt = rand_tensor(vec![1, 8, 8], &mut rng);
        check_op(vec![2, 4, 4], 12, move |g, v| {
            let uv = g.constant(u.clone());
            let m = g.mode3(v, uv);
            let up = g.upsample(m, 2);
            let down = g.downsample(up, 4);
            let z = g.constant(Tensor::zeros(vec![5, 2, 2]));
            let a = g.mse_mean(down, z);
            let pool = g.adaptive_avg_pool(up, 8, 8);
            let w = g.constant(Tensor::new(vec![1, 5, 1, 1], vec![0.2; 5]));
            let b = g.constant(Tensor::zeros(vec![1]));
            let pan = g.conv2d(pool, w, b, 1);
            let t = g.constant(tgt.clone());
            let s = g.sobel_l1(pan, t);
            g.sum(&[a, s])
        });
    }

    #[test]
    fn pool_bins_cover_input() {
        assert_eq!(pool_bins(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(pool_bins(5, 3), vec![(0, 2), (1, 4), (3, 5)]);
        // more outputs than inputs repeats cells
        assert_eq!(pool_bins(1, 3), vec![(0, 1), (0, 1), (0, 1)]);
    }

    #[test]
    fn detached_nodes_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter(Tensor::new(vec![1, 1, 2], vec![0.1, 0.2]));
        let d = g.detach(p);
        let loss = g.mse_mean(p, d);
        let grads = g.backward(loss);
        assert!(grads.get(d).is_none());
        assert!(grads.get(p).unwrap().data.iter().all(|&v| v == 0.0));
    }
}
