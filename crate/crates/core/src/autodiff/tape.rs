use std::sync::Arc;

use super::{gemm, ParamId, ParamStore, Real, SplineGraph, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics observed in training mode, to be folded into the
/// running averages with [`ParamStore::apply_bn_updates`].
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Conv3d {
        x: usize,
        w: usize,
        cols: Vec<T>,
        in_dims: [usize; 3],
        k: usize,
        cin: usize,
    },
    Gather(usize, Arc<Vec<u32>>),
    ScatterAdd(usize, Arc<Vec<u32>>),
    LeakyRelu(usize, T),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    BceLogits(usize, Vec<T>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    RowMean(usize),
    Spline {
        x: usize,
        w: usize,
        graph: Arc<SplineGraph<T>>,
        cin: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one reverse pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Gradients of leaves and parameters after [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape {
        context: op.to_string(),
        detail,
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            bn_updates: Vec::new(),
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
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        if p.trainable {
            self.push(p.value.clone(), Op::Param(id), &[])
        } else {
            self.constant(p.value.clone())
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds `b` (length C) to every row of `x` viewed as `[R, C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(b));
        let c = tb.numel();
        if tx.shape.last() != Some(&c) {
            return Err(shape_err("add_bias", format!("{:?} + [{c}]", tx.shape)));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::AddBias(x.0, b.0), &[x.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let ta = self.val(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x * s).collect(),
        };
        self.push(t, Op::Scale(a.0, s), &[a.0])
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, &ta.data, &tb.data, T::zero(), &mut data);
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Valid 3D convolution, channels last.
    /// `x: [B, D, H, W, Cin]`, `w: [K, K, K, Cin, Cout]` -> `[B, D-K+1, H-K+1, W-K+1, Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        let bad = || shape_err("conv3d", format!("input {:?} weight {:?}", tx.shape, tw.shape));
        if tx.shape.len() != 5 || tw.shape.len() != 5 {
            return Err(bad());
        }
        let k = tw.shape[0];
        let cin = tx.shape[4];
        let cout = tw.shape[4];
        if tw.shape[1] != k || tw.shape[2] != k || tw.shape[3] != cin || k == 0 {
            return Err(bad());
        }
        let b = tx.shape[0];
        let in_dims = [tx.shape[1], tx.shape[2], tx.shape[3]];
        if in_dims.iter().any(|&d| d < k) {
            return Err(bad());
        }
        let od = in_dims.map(|d| d - k + 1);
        let rows = b * od[0] * od[1] * od[2];
        let width = k * k * k * cin;
        let mut cols = vec![T::zero(); rows * width];
        im2col(&tx.data, b, in_dims, cin, k, &mut cols);
        let mut data = vec![T::zero(); rows * cout];
        gemm(false, false, rows, cout, width, &cols, &tw.data, T::zero(), &mut data);
        let t = Tensor {
            shape: vec![b, od[0], od[1], od[2], cout],
            data,
        };
        let needs_cols = self.nodes[w.0].needs_grad;
        let op = Op::Conv3d {
            x: x.0,
            w: w.0,
            cols: if needs_cols { cols } else { Vec::new() },
            in_dims,
            k,
            cin,
        };
        Ok(self.push(t, op, &[x.0, w.0]))
    }

    /// Rows of `x: [N, C]` selected by `index`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>) -> Result<Var> {
        let tx = self.val(x);
        let n = tx.rows();
        let c = tx.row_len();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i as usize >= n {
                return Err(Error::Index {
                    context: "gather",
                    index: i as usize,
                    len: n,
                });
            }
            data.extend_from_slice(&tx.data[i as usize * c..][..c]);
        }
        let mut shape = tx.shape.clone();
        shape[0] = index.len();
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::Gather(x.0, index), &[x.0]))
    }

    /// Row `e` of `x: [E, C]` is added into output row `index[e]` of `[n, C]`.
    pub fn scatter_add(&mut self, x: Var, index: Arc<Vec<u32>>, n: usize) -> Result<Var> {
        let tx = self.val(x);
        if tx.rows() != index.len() {
            return Err(shape_err("scatter_add", format!("{} rows, {} indices", tx.rows(), index.len())));
        }
        let c = tx.row_len();
        let mut data = vec![T::zero(); n * c];
        for (e, &i) in index.iter().enumerate() {
            if i as usize >= n {
                return Err(Error::Index {
                    context: "scatter_add",
                    index: i as usize,
                    len: n,
                });
            }
            for (d, &v) in data[i as usize * c..][..c].iter_mut().zip(&tx.data[e * c..][..c]) {
                *d += v;
            }
        }
        let mut shape = tx.shape.clone();
        shape[0] = n;
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::ScatterAdd(x.0, index), &[x.0]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let tx = self.val(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx
                .data
                .iter()
                .map(|&v| if v > T::zero() { v } else { v * slope })
                .collect(),
        };
        self.push(t, Op::LeakyRelu(x.0, slope), &[x.0])
    }

    /// Per-channel normalization of `x` viewed as `[R, C]`.
    ///
    /// Training mode uses batch statistics and records a [`BnUpdate`];
    /// inference mode uses the running statistics in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        store: &ParamStore<T>,
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let c = tg.numel();
        if tx.shape.last() != Some(&c) || tb.numel() != c || tx.numel() == 0 {
            return Err(shape_err("batch_norm", format!("{:?} with {c} channels", tx.shape)));
        }
        let r = tx.numel() / c;
        let eps = T::of(eps);
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            for row in tx.data.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let inv_r = T::one() / T::of(r as f64);
            mean.iter_mut().for_each(|m| *m *= inv_r);
            let mut var = vec![T::zero(); c];
            for row in tx.data.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let unbiased = T::one() / T::of((r.max(2) - 1) as f64);
            self.bn_updates.push(BnUpdate {
                running_mean: running.0,
                running_var: running.1,
                batch_mean: mean.clone(),
                batch_var: var.iter().map(|&s| s * unbiased).collect(),
            });
            var.iter_mut().for_each(|s| *s *= inv_r);
            (mean, var)
        } else {
            let m = &store.get(running.0).value;
            let v = &store.get(running.1).value;
            if m.numel() != c || v.numel() != c {
                return Err(shape_err("batch_norm", "running statistics size".into()));
            }
            (m.data.clone(), v.data.clone())
        };
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = tx.data.clone();
        let mut data = tx.data.clone();
        for (hrow, yrow) in xhat.chunks_exact_mut(c).zip(data.chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (hrow[j] - mean[j]) * inv_std[j];
                hrow[j] = h;
                yrow[j] = tg.data[j] * h + tb.data[j];
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
            train,
        };
        Ok(self.push(t, op, &[x.0, gamma.0, beta.0]))
    }

    /// `sum_i w[y_i] * -log softmax(logits_i)[y_i] / N` over `logits: [N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let tl = self.val(logits);
        if tl.shape.len() != 2 || tl.shape[0] != targets.len() || tl.shape[1] != weights.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {:?}, {} targets, {} weights", tl.shape, targets.len(), weights.len()),
            ));
        }
        let (n, k) = (tl.shape[0], tl.shape[1]);
        if n == 0 {
            return Err(shape_err("softmax_cross_entropy", "empty batch".into()));
        }
        let mut probs = tl.data.clone();
        let mut loss = 0.0f64;
        for (row, &y) in probs.chunks_exact_mut(k).zip(targets) {
            if y >= k {
                return Err(Error::Index {
                    context: "softmax_cross_entropy target",
                    index: y,
                    len: k,
                });
            }
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
            let logp = (row[y].f64()).ln();
            loss -= weights[y].f64() * logp;
        }
        let t = Tensor::scalar(T::of(loss / n as f64));
        let op = Op::SoftmaxCe {
            logits: logits.0,
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(t, op, &[logits.0]))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let tl = self.val(logits);
        if tl.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{} logits, {} targets", tl.numel(), targets.len())));
        }
        let mut loss = 0.0;
        for (&z, &t) in tl.data.iter().zip(targets) {
            let (z, t) = (z.f64(), t.f64());
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let t = Tensor::scalar(T::of(loss / targets.len() as f64));
        Ok(self.push(t, Op::BceLogits(logits.0, targets.to_vec()), &[logits.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.val(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", tx.shape)));
        }
        let t = Tensor {
            shape,
            data: tx.data.clone(),
        };
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data.iter().cloned().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let s: T = tx.data.iter().cloned().sum();
        let m = s / T::of(tx.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(x.0), &[x.0])
    }

    /// Mean over all but the first axis: `[R, ...] -> [R]`.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let c = tx.row_len().max(1);
        let inv = T::one() / T::of(c as f64);
        let data = tx.data.chunks_exact(c).map(|r| r.iter().cloned().sum::<T>() * inv).collect();
        let t = Tensor {
            shape: vec![tx.rows()],
            data,
        };
        self.push(t, Op::RowMean(x.0), &[x.0])
    }

    /// Spline-weighted message passing: `x: [N, Cin]`, `w: [K * Cin, Cout]`.
    pub fn spline_conv(&mut self, x: Var, w: Var, graph: Arc<SplineGraph<T>>) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        if tx.shape.len() != 2 || tx.shape[0] != graph.num_nodes {
            return Err(shape_err("spline_conv", format!("input {:?} for {} nodes", tx.shape, graph.num_nodes)));
        }
        let cin = tx.shape[1];
        if tw.shape.len() != 2 || tw.shape[0] != graph.num_kernels * cin {
            return Err(shape_err(
                "spline_conv",
                format!("weight {:?} for {} kernels x {cin} channels", tw.shape, graph.num_kernels),
            ));
        }
        let cout = tw.shape[1];
        let data = graph.forward(&tx.data, cin, &tw.data, cout);
        let t = Tensor {
            shape: vec![graph.num_nodes, cout],
            data,
        };
        Ok(self.push(t, Op::Spline { x: x.0, w: w.0, graph, cin }, &[x.0, w.0]))
    }

    /// Reverse pass from a scalar. The recorded graph is released afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Autodiff("backward called twice on the same tape; run the forward pass again".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let want = |j: usize| nodes[j].needs_grad;
            let len = |j: usize| nodes[j].value.numel();
            match &node.op {
                Op::Constant => {}
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => params.push((*id, g)),
                Op::Add(a, b) => {
                    for &j in &[*a, *b] {
                        if want(j) {
                            add_into(acc(&mut grads, j, len(j)), &g);
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    if want(*x) {
                        add_into(acc(&mut grads, *x, len(*x)), &g);
                    }
                    if want(*b) {
                        let c = len(*b);
                        let gb = acc(&mut grads, *b, c);
                        for row in g.chunks_exact(c) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value.data, &nodes[*b].value.data);
                    if want(*a) {
                        let ga = acc(&mut grads, *a, len(*a));
                        for ((d, &gg), &y) in ga.iter_mut().zip(&g).zip(vb) {
                            *d += gg * y;
                        }
                    }
                    if want(*b) {
                        let gb = acc(&mut grads, *b, len(*b));
                        for ((d, &gg), &y) in gb.iter_mut().zip(&g).zip(va) {
                            *d += gg * y;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if want(*a) {
                        let ga = acc(&mut grads, *a, len(*a));
                        for (d, &gg) in ga.iter_mut().zip(&g) {
                            *d += gg * *s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if want(*a) {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm(false, true, m, k, n, &g, &tb.data, T::one(), ga);
                    }
                    if want(*b) {
                        let gb = acc(&mut grads, *b, k * n);
                        gemm(true, false, k, n, m, &ta.data, &g, T::one(), gb);
                    }
                }
                Op::Conv3d {
                    x,
                    w,
                    cols,
                    in_dims,
                    k,
                    cin,
                } => {
                    let tw = &nodes[*w].value;
                    let cout = tw.shape[4];
                    let width = k * k * k * cin;
                    let rows = g.len() / cout;
                    if want(*w) {
                        let gw = acc(&mut grads, *w, len(*w));
                        gemm(true, false, width, cout, rows, cols, &g, T::one(), gw);
                    }
                    if want(*x) {
                        let mut dcols = vec![T::zero(); rows * width];
                        gemm(false, true, rows, width, cout, &g, &tw.data, T::zero(), &mut dcols);
                        let b = nodes[*x].value.shape[0];
                        let gx = acc(&mut grads, *x, len(*x));
                        col2im(&dcols, b, *in_dims, *cin, *k, gx);
                    }
                }
                Op::Gather(x, index) => {
                    if want(*x) {
                        let c = nodes[*x].value.row_len();
                        let gx = acc(&mut grads, *x, len(*x));
                        for (e, &src) in index.iter().enumerate() {
                            add_into(&mut gx[src as usize * c..][..c], &g[e * c..][..c]);
                        }
                    }
                }
                Op::ScatterAdd(x, index) => {
                    if want(*x) {
                        let c = nodes[*x].value.row_len();
                        let gx = acc(&mut grads, *x, len(*x));
                        for (e, &dst) in index.iter().enumerate() {
                            add_into(&mut gx[e * c..][..c], &g[dst as usize * c..][..c]);
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    if want(*x) {
                        let vx = &nodes[*x].value.data;
                        let gx = acc(&mut grads, *x, len(*x));
                        for ((d, &gg), &v) in gx.iter_mut().zip(&g).zip(vx) {
                            *d += if v > T::zero() { gg } else { gg * *slope };
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let c = inv_std.len();
                    let r = g.len() / c;
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gh = vec![T::zero(); c];
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            sum_g[j] += grow[j];
                            sum_gh[j] += grow[j] * hrow[j];
                        }
                    }
                    if want(*gamma) {
                        add_into(acc(&mut grads, *gamma, c), &sum_gh);
                    }
                    if want(*beta) {
                        add_into(acc(&mut grads, *beta, c), &sum_g);
                    }
                    if want(*x) {
                        let gm = &nodes[*gamma].value.data;
                        let gx = acc(&mut grads, *x, len(*x));
                        let inv_r = T::one() / T::of(r as f64);
                        for ((dxr, grow), hrow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let s = gm[j] * inv_std[j];
                                dxr[j] += if *train {
                                    s * (grow[j] - inv_r * sum_g[j] - hrow[j] * inv_r * sum_gh[j])
                                } else {
                                    s * grow[j]
                                };
                            }
                        }
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    targets,
                    weights,
                } => {
                    if want(*logits) {
                        let k = weights.len();
                        let n = targets.len();
                        let scale = g[0] / T::of(n as f64);
                        let gl = acc(&mut grads, *logits, len(*logits));
                        for ((dr, pr), &y) in gl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(targets) {
                            let s = scale * weights[y];
                            for j in 0..k {
                                let t = if j == y { T::one() } else { T::zero() };
                                dr[j] += s * (pr[j] - t);
                            }
                        }
                    }
                }
                Op::BceLogits(logits, targets) => {
                    if want(*logits) {
                        let vz = &nodes[*logits].value.data;
                        let scale = g[0] / T::of(targets.len() as f64);
                        let gl = acc(&mut grads, *logits, len(*logits));
                        for ((d, &z), &t) in gl.iter_mut().zip(vz).zip(targets) {
                            let sig = T::one() / (T::one() + (-z).exp());
                            *d += scale * (sig - t);
                        }
                    }
                }
                Op::Reshape(x) => {
                    if want(*x) {
                        add_into(acc(&mut grads, *x, len(*x)), &g);
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    if want(*x) {
                        let n = len(*x);
                        let s = if matches!(node.op, Op::Mean(_)) {
                            g[0] / T::of(n.max(1) as f64)
                        } else {
                            g[0]
                        };
                        acc(&mut grads, *x, n).iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::RowMean(x) => {
                    if want(*x) {
                        let c = nodes[*x].value.row_len().max(1);
                        let inv = T::one() / T::of(c as f64);
                        let gx = acc(&mut grads, *x, len(*x));
                        for (row, &gg) in gx.chunks_exact_mut(c).zip(&g) {
                            row.iter_mut().for_each(|d| *d += gg * inv);
                        }
                    }
                }
                Op::Spline { x, w, graph, cin } => {
                    let tw = &nodes[*w].value;
                    let cout = tw.shape[1];
                    let mut dx = vec![T::zero(); len(*x)];
                    let mut dw = vec![T::zero(); len(*w)];
                    graph.backward(&nodes[*x].value.data, *cin, &tw.data, cout, &g, &mut dx, &mut dw);
                    if want(*x) {
                        add_into(acc(&mut grads, *x, dx.len()), &dx);
                    }
                    if want(*w) {
                        add_into(acc(&mut grads, *w, dw.len()), &dw);
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Real>(x: &[T], b: usize, dims: [usize; 3], cin: usize, k: usize, cols: &mut [T]) {
    let od = dims.map(|d| d - k + 1);
    let width = k * k * k * cin;
    let mut r = 0;
    for bi in 0..b {
        for oz in 0..od[0] {
            for oy in 0..od[1] {
                for ox in 0..od[2] {
                    let row = &mut cols[r * width..(r + 1) * width];
                    let mut o = 0;
                    for kz in 0..k {
                        for ky in 0..k {
                            let base = (((bi * dims[0] + oz + kz) * dims[1] + oy + ky) * dims[2] + ox) * cin;
                            let len = k * cin;
                            row[o..o + len].copy_from_slice(&x[base..base + len]);
                            o += len;
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], b: usize, dims: [usize; 3], cin: usize, k: usize, gx: &mut [T]) {
    let od = dims.map(|d| d - k + 1);
    let width = k * k * k * cin;
    let mut r = 0;
    for bi in 0..b {
        for oz in 0..od[0] {
            for oy in 0..od[1] {
                for ox in 0..od[2] {
                    let row = &cols[r * width..(r + 1) * width];
                    let mut o = 0;
                    for kz in 0..k {
                        for ky in 0..k {
                            let base = (((bi * dims[0] + oz + kz) * dims[1] + oy + ky) * dims[2] + ox) * cin;
                            let len = k * cin;
                            add_into(&mut gx[base..base + len], &row[o..o + len]);
                            o += len;
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
                let p = self.get_mut(id);
                for (r, &b) in p.value.data.iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}
