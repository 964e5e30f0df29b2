//! Reverse-mode automatic differentiation over small dense f64 matrices.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and returns gradients for every node that
//! depends on a bound parameter. Everything is row-major `rows x cols`.
//! Convolution inputs are stored one image per row, channels concatenated.

use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(1, n, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row_slice(r).to_vec()).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::new(self.cols, self.rows, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,m] += a[n,k] * b[m,k]^T`
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,m] += a[n,k]^T * b[n,m]`
fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub side: usize,
    pub kernel: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Cosine(Var, Var),
    SoftIou(Var, Var, f64),
    Conv2d(Var, Var, Var, ConvShape),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Bce(Var, Vec<f64>, f64),
    SoftmaxXent(Var, Vec<Option<usize>>),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    zero_norm_events: usize,
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

    /// Number of cosine evaluations that hit a zero-norm operand.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds parameter `id` to the tape. Returns the existing node if `id`
    /// was already bound, so each parameter has a single gradient slot.
    pub fn param_or_insert_with(&mut self, id: usize, make: impl FnOnce() -> Tensor) -> (Var, bool) {
        if let Some(&v) = self.params.get(&id) {
            return (v, false);
        }
        let v = self.push(make(), Op::Leaf, true);
        self.params.insert(id, v);
        (v, true)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension");
        let (n, k, m) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; n * m];
        matmul_acc(&ta.data, &tb.data, &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(n, m, out), Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_bt inner dimension");
        let (n, k, m) = (ta.rows, ta.cols, tb.rows);
        let mut out = vec![0.0; n * m];
        matmul_bt_acc(&ta.data, &tb.data, &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(n, m, out), Op::MatMulBt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!(tb.data.len(), ta.cols, "bias length");
        let mut data = ta.data.clone();
        for row in data.chunks_mut(ta.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(bias);
        self.push(t, Op::AddRow(a, bias), rg)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(a);
        self.push(t, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Pairwise cosine similarity between the rows of `a` (`n x d`) and the
    /// rows of `b` (`m x d`). A zero-norm row yields 0 and is counted.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "cosine dimension");
        let (n, m, d) = (ta.rows, tb.rows, ta.cols);
        let na: Vec<f64> = (0..n).map(|i| norm(ta.row_slice(i))).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(tb.row_slice(j))).collect();
        let mut out = vec![0.0; n * m];
        let mut zero_events = 0;
        for i in 0..n {
            let ar = &ta.data[i * d..(i + 1) * d];
            for j in 0..m {
                if na[i] == 0.0 || nb[j] == 0.0 {
                    zero_events += 1;
                    continue;
                }
                let br = &tb.data[j * d..(j + 1) * d];
                let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                out[i * m + j] = dot / (na[i] * nb[j]);
            }
        }
        self.zero_norm_events += zero_events;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(n, m, out), Op::Cosine(a, b), rg)
    }

    /// Pairwise soft IoU `sum(A*B) / (sum A + sum B - sum(A*B) + eps)`
    /// between the rows of `a` (`n x p`) and `b` (`m x p`).
    pub fn soft_iou(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "soft_iou dimension");
        let (n, m, p) = (ta.rows, tb.rows, ta.cols);
        let sa: Vec<f64> = (0..n).map(|i| ta.row_slice(i).iter().sum()).collect();
        let sb: Vec<f64> = (0..m).map(|j| tb.row_slice(j).iter().sum()).collect();
        let mut inter = vec![0.0; n * m];
        matmul_bt_acc(&ta.data, &tb.data, &mut inter, n, p, m);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let x = inter[i * m + j];
                out[i * m + j] = x / (sa[i] + sb[j] - x + eps);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(n, m, out), Op::SoftIou(a, b, eps), rg)
    }

    /// Same-padded stride-1 convolution. `x` is `n x (cin*side*side)`,
    /// `w` is `cout x (cin*k*k)`, `b` is `1 x cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, shape: ConvShape) -> Var {
        let ConvShape {
            in_channels: cin,
            out_channels: cout,
            side,
            kernel: k,
        } = shape;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.cols, cin * side * side, "conv input width");
        assert_eq!((tw.rows, tw.cols), (cout, cin * k * k), "conv weight shape");
        assert_eq!(tb.data.len(), cout, "conv bias length");
        let n = tx.rows;
        let plane = side * side;
        let r = (k / 2) as isize;
        let s = side as isize;
        let mut out = vec![0.0; n * cout * plane];
        for img in 0..n {
            let xin = &tx.data[img * cin * plane..(img + 1) * cin * plane];
            let xout = &mut out[img * cout * plane..(img + 1) * cout * plane];
            for co in 0..cout {
                let o = &mut xout[co * plane..(co + 1) * plane];
                o.iter_mut().for_each(|v| *v = tb.data[co]);
                for ci in 0..cin {
                    let inp = &xin[ci * plane..(ci + 1) * plane];
                    let wk = &tw.data[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                    for ky in 0..k {
                        let dy = ky as isize - r;
                        for kx in 0..k {
                            let dx = kx as isize - r;
                            let wv = wk[ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let y0 = (-dy).max(0);
                            let y1 = (s - dy).min(s);
                            let x0 = (-dx).max(0);
                            let x1 = (s - dx).min(s);
                            for y in y0..y1 {
                                let orow = (y * s) as usize;
                                let irow = ((y + dy) * s) as usize;
                                for xx in x0..x1 {
                                    o[orow + xx as usize] += wv * inp[irow + (xx + dx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(n, cout * plane, out),
            Op::Conv2d(x, w, b, shape),
            rg,
        )
    }

    /// Flattens and concatenates all inputs into a single `1 x total` row.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
            rg |= self.rg(p);
        }
        self.push(Tensor::row(data), Op::Concat(parts.to_vec()), rg)
    }

    /// Picks flat indices of `a` into a `1 x k` row.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ta = self.value(a);
        let data = idx.iter().map(|&i| ta.data[i]).collect();
        let rg = self.rg(a);
        self.push(Tensor::row(data), Op::Gather(a, idx), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` (any shape) against
    /// `targets`, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce_mean(&mut self, p: Var, targets: Vec<f64>, eps: f64) -> Var {
        let tp = self.value(p);
        assert_eq!(tp.data.len(), targets.len(), "bce target length");
        let n = targets.len();
        let loss = if n == 0 {
            0.0
        } else {
            tp.data
                .iter()
                .zip(&targets)
                .map(|(&x, &y)| bce_term(x, y, eps))
                .sum::<f64>()
                / n as f64
        };
        let rg = self.rg(p);
        self.push(Tensor::scalar(loss), Op::Bce(p, targets, eps), rg)
    }

    /// Mean softmax cross-entropy over the rows of `logits` that carry a target.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.rows, targets.len(), "xent target count");
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let ls = log_softmax(tl.row_slice(r));
                total -= ls[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent(logits, targets), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).data.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows, ta.cols, tb.cols);
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_bt_acc(g, &tb.data, ga, n, m, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_at_acc(&ta.data, g, gb, n, k, m);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows, ta.cols, tb.rows);
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_acc(g, &tb.data, ga, n, m, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_at_acc(g, &ta.data, gb, n, m, k);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let (r, c) = (out.rows, out.cols);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gv), bv) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *x += gv * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gv), av) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *x += gv * av;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let cols = out.cols;
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Affine(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gv), av) in ga.iter_mut().zip(g).zip(&ta.data) {
                        if *av > 0.0 {
                            *x += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gv), y) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Cosine(a, b) => self.cosine_backward(*a, *b, out, g, grads),
            Op::SoftIou(a, b, eps) => self.soft_iou_backward(*a, *b, *eps, g, grads),
            Op::Conv2d(x, w, b, shape) => self.conv_backward(*x, *w, *b, *shape, g, grads),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).data.len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (&i, gv) in idx.iter().zip(g) {
                        ga[i] += gv;
                    }
                }
            }
            Op::Bce(p, targets, eps) => {
                let tp = self.value(*p);
                let n = targets.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for ((x, &pv), &y) in gp.iter_mut().zip(&tp.data).zip(targets) {
                        if pv <= *eps || pv >= 1.0 - eps {
                            continue;
                        }
                        *x += g[0] * (-y / pv + (1.0 - y) / (1.0 - pv)) / n;
                    }
                }
            }
            Op::SoftmaxXent(logits, targets) => {
                let tl = self.value(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let cols = tl.cols;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let sm = softmax(tl.row_slice(r));
                        for c in 0..cols {
                            let y = if c == t { 1.0 } else { 0.0 };
                            gl[r * cols + c] += g[0] * (sm[c] - y) / count as f64;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }

    fn cosine_backward(&self, a: Var, b: Var, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m, d) = (ta.rows, tb.rows, ta.cols);
        let na: Vec<f64> = (0..n).map(|i| norm(ta.row_slice(i))).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(tb.row_slice(j))).collect();
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..n {
                if na[i] == 0.0 {
                    continue;
                }
                let ar = ta.row_slice(i);
                for j in 0..m {
                    if nb[j] == 0.0 {
                        continue;
                    }
                    let gv = g[i * m + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let c = out.data[i * m + j];
                    let br = tb.row_slice(j);
                    let inv = 1.0 / (na[i] * nb[j]);
                    let cs = c / (na[i] * na[i]);
                    for t in 0..d {
                        ga[i * d + t] += gv * (br[t] * inv - cs * ar[t]);
                    }
                }
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for j in 0..m {
                if nb[j] == 0.0 {
                    continue;
                }
                let br = tb.row_slice(j);
                for i in 0..n {
                    if na[i] == 0.0 {
                        continue;
                    }
                    let gv = g[i * m + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let c = out.data[i * m + j];
                    let ar = ta.row_slice(i);
                    let inv = 1.0 / (na[i] * nb[j]);
                    let cs = c / (nb[j] * nb[j]);
                    for t in 0..d {
                        gb[j * d + t] += gv * (ar[t] * inv - cs * br[t]);
                    }
                }
            }
        }
    }

    fn soft_iou_backward(&self, a: Var, b: Var, eps: f64, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m, p) = (ta.rows, tb.rows, ta.cols);
        let sa: Vec<f64> = (0..n).map(|i| ta.row_slice(i).iter().sum()).collect();
        let sb: Vec<f64> = (0..m).map(|j| tb.row_slice(j).iter().sum()).collect();
        let mut inter = vec![0.0; n * m];
        matmul_bt_acc(&ta.data, &tb.data, &mut inter, n, p, m);
        // d/dA_k of I/U with U = sa + sb - I + eps:
        //   (B_k * U - I * (1 - B_k)) / U^2 = (B_k * (U + I) - I) / U^2
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..n {
                for j in 0..m {
                    let gv = g[i * m + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let x = inter[i * m + j];
                    let u = sa[i] + sb[j] - x + eps;
                    let u2 = u * u;
                    let br = tb.row_slice(j);
                    for t in 0..p {
                        ga[i * p + t] += gv * (br[t] * (u + x) - x) / u2;
                    }
                }
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for i in 0..n {
                let ar = ta.row_slice(i);
                for j in 0..m {
                    let gv = g[i * m + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let x = inter[i * m + j];
                    let u = sa[i] + sb[j] - x + eps;
                    let u2 = u * u;
                    for t in 0..p {
                        gb[j * p + t] += gv * (ar[t] * (u + x) - x) / u2;
                    }
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ConvShape {
            in_channels: cin,
            out_channels: cout,
            side,
            kernel: k,
        } = shape;
        let (tx, tw) = (self.value(x), self.value(w));
        let n = tx.rows;
        let plane = side * side;
        let r = (k / 2) as isize;
        let s = side as isize;
        if let Some(gb) = self.acc(grads, b) {
            for img in 0..n {
                for co in 0..cout {
                    let off = (img * cout + co) * plane;
                    gb[co] += g[off..off + plane].iter().sum::<f64>();
                }
            }
        }
        let want_x = self.rg(x);
        let want_w = self.rg(w);
        if !want_x && !want_w {
            return;
        }
        let mut gx = if want_x { Some(vec![0.0; tx.data.len()]) } else { None };
        let mut gw = if want_w { Some(vec![0.0; tw.data.len()]) } else { None };
        for img in 0..n {
            let xin = &tx.data[img * cin * plane..(img + 1) * cin * plane];
            for co in 0..cout {
                let go = &g[(img * cout + co) * plane..(img * cout + co + 1) * plane];
                for ci in 0..cin {
                    let inp = &xin[ci * plane..(ci + 1) * plane];
                    let wbase = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let dy = ky as isize - r;
                        for kx in 0..k {
                            let dx = kx as isize - r;
                            let y0 = (-dy).max(0);
                            let y1 = (s - dy).min(s);
                            let x0 = (-dx).max(0);
                            let x1 = (s - dx).min(s);
                            let wv = tw.data[wbase + ky * k + kx];
                            let mut wacc = 0.0;
                            for y in y0..y1 {
                                let orow = (y * s) as usize;
                                let irow = ((y + dy) * s) as usize;
                                for xx in x0..x1 {
                                    let gv = go[orow + xx as usize];
                                    let ii = irow + (xx + dx) as usize;
                                    wacc += gv * inp[ii];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[img * cin * plane + ci * plane + ii] += gv * wv;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[wbase + ky * k + kx] += wacc;
                            }
                        }
                    }
                }
            }
        }
        if let (Some(src), Some(dst)) = (gx, self.acc(grads, x)) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        if let (Some(src), Some(dst)) = (gw, self.acc(grads, w)) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

/// Binary cross-entropy of one prediction with clamping to `[eps, 1 - eps]`.
pub fn bce_term(p: f64, y: f64, eps: f64) -> f64 {
    let pc = p.clamp(eps, 1.0 - eps);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}
