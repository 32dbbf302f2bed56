use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{invalid, ParamId, ParamStore, Real, Tensor, TensorError};
use crate::rng::rng_from_seed;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleChannels(Var, Var),
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    Depthwise { x: Var, w: Var, stride: usize, padding: usize },
    MeanAxis1(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Gelu { x: Var, dydx: Vec<T> },
    Silu { x: Var, sig: Vec<T> },
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Sum(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward/backward tape. Confined to one thread.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Gradients of every gradient-requiring leaf after [`Graph::backward`].
pub struct Grads<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// Parameter gradients ordered by parameter id.
    pub fn param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> =
            self.params.iter().filter_map(|(id, v)| self.leaves.remove(v).map(|g| (*id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let one = T::one();
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into a new buffer laid out as the axes
/// permutation `perm`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Real>(x: &[T], b: usize, l: usize, c: usize, k: usize, stride: usize, pad: usize, lout: usize) -> Vec<T> {
    let width = k * c;
    let mut cols = vec![T::zero(); b * lout * width];
    for bi in 0..b {
        for o in 0..lout {
            let row = &mut cols[(bi * lout + o) * width..][..width];
            for kk in 0..k {
                let pos = (o * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l {
                    let src = &x[(bi * l + pos as usize) * c..][..c];
                    row[kk * c..(kk + 1) * c].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

impl<T: Real> Graph<T> {
    /// `train` enables dropout; `seed` drives the dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), train, rng: rng_from_seed(seed) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(t), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(t), op: Op::Input, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: store.shared(id), op: Op::Param, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `a[..., K] · w[K, N]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sw.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sw[0] {
            return Err(mismatch("matmul", sa, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(w).data(), false, &mut out, T::zero());
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, w), &[a, w]))
    }

    /// Batched `a[..., M, K] · b[..., K, N]`, or `a · bᵀ` for `b[..., N, K]`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(m, k, n, &da[i * m * k..], false, &db[i * k * n..], trans_b, &mut out[i * m * n..], T::zero());
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor { shape, data: out }, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Scale(a, s), &[a])
    }

    /// `x[B, L, C] * s[B, C]`, broadcasting `s` along the middle axis.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 3 || ss != [sx[0], sx[2]] {
            return Err(mismatch("scale_channels", sx, ss));
        }
        let (l, c) = (sx[1], sx[2]);
        let sv = self.value(s).data();
        let mut data = Vec::with_capacity(sx.iter().product());
        for (bi, sample) in self.value(x).data().chunks(l * c).enumerate() {
            let scale = &sv[bi * c..][..c];
            for row in sample.chunks(c) {
                data.extend(row.iter().zip(scale).map(|(&v, &k)| v * k));
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Tensor { shape, data }, Op::ScaleChannels(x, s), &[x, s]))
    }

    /// Channels-last convolution: `x[B, L, Cin]`, `w[K, Cin, Cout]` → `[B, Lout, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] {
            return Err(mismatch("conv1d", sx, sw));
        }
        let (b, l, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let lout = conv_out_len(l, k, stride, padding)
            .ok_or_else(|| invalid("conv1d", format!("length {l} too short for kernel {k}")))?;
        let cols = im2col(self.value(x).data(), b, l, cin, k, stride, padding, lout);
        let mut out = vec![T::zero(); b * lout * cout];
        T::gemm(b * lout, k * cin, cout, &cols, false, self.value(w).data(), false, &mut out, T::zero());
        let t = Tensor { shape: vec![b, lout, cout], data: out };
        Ok(self.push(t, Op::Conv1d { x, w, stride, padding }, &[x, w]))
    }

    /// Depthwise convolution: `x[B, L, C]`, `w[K, C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[2] {
            return Err(mismatch("depthwise_conv1d", sx, sw));
        }
        let (b, l, c) = (sx[0], sx[1], sx[2]);
        let k = sw[0];
        let lout = conv_out_len(l, k, stride, padding)
            .ok_or_else(|| invalid("depthwise_conv1d", format!("length {l} too short for kernel {k}")))?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); b * lout * c];
        for bi in 0..b {
            for o in 0..lout {
                let dst = &mut out[(bi * lout + o) * c..][..c];
                for kk in 0..k {
                    let pos = (o * stride + kk) as isize - padding as isize;
                    if pos < 0 || pos as usize >= l {
                        continue;
                    }
                    let src = &xv[(bi * l + pos as usize) * c..][..c];
                    let wk = &wv[kk * c..][..c];
                    for ((d, &s), &wgt) in dst.iter_mut().zip(src).zip(wk) {
                        *d += s * wgt;
                    }
                }
            }
        }
        let t = Tensor { shape: vec![b, lout, c], data: out };
        Ok(self.push(t, Op::Depthwise { x, w, stride, padding }, &[x, w]))
    }

    /// Mean over axis 1 of a rank-3 tensor: `[B, L, C]` → `[B, C]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] == 0 {
            return Err(invalid("mean_axis1", format!("expected [B, L>0, C], got {sx:?}")));
        }
        let (b, l, c) = (sx[0], sx[1], sx[2]);
        let inv = T::one() / T::from_usize(l).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let dst = &mut out[bi * c..][..c];
            for li in 0..l {
                for (d, &v) in dst.iter_mut().zip(&xv[(bi * l + li) * c..][..c]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok(self.push(Tensor { shape: vec![b, c], data: out }, Op::MeanAxis1(x), &[x]))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layernorm", sx, self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv[i] + bv[i];
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.shape().last().copied().unwrap_or(1).max(1);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - mx).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / z);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data: out }, Op::Softmax(x), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, op, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (data, dydx): (Vec<T>, Vec<T>) = t.data().iter().map(|&v| gelu_parts(v)).unzip();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Gelu { x, dydx }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let sig: Vec<T> = t.data().iter().map(|&v| sigmoid(v)).collect();
        let data = t.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Silu { x, sig }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Inverted dropout; the identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n).map(|_| if self.rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean cross-entropy of `logits[B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(invalid("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        let c = s[1];
        if labels.iter().any(|&l| l >= c) {
            return Err(invalid("cross_entropy", format!("label out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(self.value(logits).numel());
        let mut loss = T::zero();
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln();
            loss += lz - (row[y] - mx);
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let b = T::from_usize(labels.len()).unwrap();
        let t = Tensor::scalar(loss / b);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: lt.shape().to_vec(), data: vec![T::one()] });
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param => {
                    leaves.insert(Var(i), g);
                }
                op => self.backprop(op, &node.value, g, &mut grads),
            }
        }
        let params = self.params.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Grads { leaves, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.data.iter_mut().zip(data).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(Tensor { shape: self.shape(v).to_vec(), data }),
        }
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Input | Op::Param => unreachable!(),
            Op::MatMul(a, w) => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let m = gd.len() / n.max(1);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, self.value(*w).data(), true, &mut da, T::zero());
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut dw, T::zero());
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = out.shape()[r - 1];
                let batch: usize = sa[..r - 2].iter().product();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // da = g · bᵀ (b stored K×N) or g · b (b stored N×K)
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            false,
                            &bv[i * k * n..],
                            !trans_b,
                            &mut da[i * m * k..],
                            T::zero(),
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        if *trans_b {
                            T::gemm(
                                n,
                                m,
                                k,
                                &gd[i * m * n..],
                                true,
                                &av[i * m * k..],
                                false,
                                &mut db[i * k * n..],
                                T::zero(),
                            );
                        } else {
                            T::gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..],
                                true,
                                &gd[i * m * n..],
                                false,
                                &mut db[i * k * n..],
                                T::zero(),
                            );
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.wants(*b) {
                    let n = self.value(*b).numel().max(1);
                    let mut db = vec![T::zero(); n];
                    for (i, &v) in gd.iter().enumerate() {
                        db[i % n] += v;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gd.iter().map(|&g| g * *s).collect()),
            Op::ScaleChannels(x, s) => {
                let sx = self.shape(*x);
                let (b, l, c) = (sx[0], sx[1], sx[2]);
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for (bi, sample) in gd.chunks(l * c).enumerate() {
                        let scale = &sv[bi * c..][..c];
                        for row in sample.chunks(c) {
                            dx.extend(row.iter().zip(scale).map(|(&g, &k)| g * k));
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let mut ds = vec![T::zero(); b * c];
                    for (bi, (gs, xs)) in gd.chunks(l * c).zip(xv.chunks(l * c)).enumerate() {
                        let dst = &mut ds[bi * c..][..c];
                        for (gr, xr) in gs.chunks(c).zip(xs.chunks(c)) {
                            for ((d, &g), &v) in dst.iter_mut().zip(gr).zip(xr) {
                                *d += g * v;
                            }
                        }
                    }
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let sx = self.shape(*x);
                let (b, l, cin) = (sx[0], sx[1], sx[2]);
                let sw = self.shape(*w);
                let (k, cout) = (sw[0], sw[2]);
                let lout = out.shape()[1];
                let width = k * cin;
                let cols = im2col(self.value(*x).data(), b, l, cin, k, *stride, *padding, lout);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); width * cout];
                    T::gemm(width, b * lout, cout, &cols, true, gd, false, &mut dw, T::zero());
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); b * lout * width];
                    T::gemm(b * lout, cout, width, gd, false, self.value(*w).data(), true, &mut dcols, T::zero());
                    let mut dx = vec![T::zero(); b * l * cin];
                    for bi in 0..b {
                        for o in 0..lout {
                            let row = &dcols[(bi * lout + o) * width..][..width];
                            for kk in 0..k {
                                let pos = (o * stride + kk) as isize - *padding as isize;
                                if pos >= 0 && (pos as usize) < l {
                                    let dst = &mut dx[(bi * l + pos as usize) * cin..][..cin];
                                    for (d, &v) in dst.iter_mut().zip(&row[kk * cin..(kk + 1) * cin]) {
                                        *d += v;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Depthwise { x, w, stride, padding } => {
                let sx = self.shape(*x);
                let (b, l, c) = (sx[0], sx[1], sx[2]);
                let k = self.shape(*w)[0];
                let lout = out.shape()[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for bi in 0..b {
                    for o in 0..lout {
                        let go = &gd[(bi * lout + o) * c..][..c];
                        for kk in 0..k {
                            let pos = (o * stride + kk) as isize - *padding as isize;
                            if pos < 0 || pos as usize >= l {
                                continue;
                            }
                            let base = (bi * l + pos as usize) * c;
                            for ch in 0..c {
                                dx[base + ch] += go[ch] * wv[kk * c + ch];
                                dw[kk * c + ch] += go[ch] * xv[base + ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::MeanAxis1(x) => {
                let sx = self.shape(*x);
                let (b, l, c) = (sx[0], sx[1], sx[2]);
                let inv = T::one() / T::from_usize(l).unwrap();
                let mut dx = vec![T::zero(); b * l * c];
                for bi in 0..b {
                    for li in 0..l {
                        for ch in 0..c {
                            dx[(bi * l + li) * c + ch] = gd[bi * c + ch] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                let dn = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dg = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let go = &gd[r * d..][..d];
                    let xh = &xhat[r * d..][..d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for i in 0..d {
                        let dxh = go[i] * gv[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                        dg[i] += go[i] * xh[i];
                        dbeta[i] += go[i];
                    }
                    mean_dxh = mean_dxh / dn;
                    mean_dxh_xh = mean_dxh_xh / dn;
                    for i in 0..d {
                        dx[r * d + i] = rs * (go[i] * gv[i] - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Softmax(x) => {
                let d = out.shape().last().copied().unwrap_or(1).max(1);
                let mut dx = Vec::with_capacity(gd.len());
                for (yr, gr) in out.data().chunks(d).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu { x, dydx } => {
                let dx = gd.iter().zip(dydx).map(|(&g, &d)| g * d).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Silu { x, sig } => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(sig)
                    .map(|((&g, &v), &s)| g * s * (T::one() + v * (T::one() - s)))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = gd.iter().zip(out.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / T::from_usize(labels.len()).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * c + y] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (dx, _) = permute_data(gd, out.shape(), &inverse);
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
        }
    }
}
