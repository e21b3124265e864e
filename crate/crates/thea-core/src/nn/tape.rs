//! A small reverse-mode autodiff tape over `ndarray` tensors.
//!
//! Operations execute eagerly and append a node per result; `backward`
//! walks the node list in reverse. Everything is single-threaded and
//! evaluation order is fixed, so results are bit-stable for fixed inputs.
//!
//! Shape conventions: the last axis is the feature axis; batched matrix
//! products treat the last two axes as the matrix and everything before
//! them as batch dimensions.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice};

pub type Arr = ArrayD<f32>;
pub type Id = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = x @ w (+ b); x: [.., k], w: [k, m], b: [m]
    Linear { x: Id, w: Id, b: Option<Id> },
    /// y = a @ b^T over the last two axes; a: [.., m, k], b: [.., n, k]
    BatMatNT { a: Id, b: Id },
    /// y = a @ b over the last two axes; a: [.., m, k], b: [.., k, n]
    BatMatNN { a: Id, b: Id },
    Add { a: Id, b: Id },
    /// y = a + b with b's shape a suffix of a's (bias-style broadcast)
    AddBroadcast { a: Id, b: Id },
    /// y = x + c for a constant tensor (broadcast like AddBroadcast)
    AddConst { x: Id },
    Scale { x: Id, c: f32 },
    SoftmaxLast { x: Id },
    LogSoftmaxLast { x: Id },
    /// y = g * (x - mean)/sqrt(var + eps) + b over the last axis
    LayerNorm { x: Id, g: Id, b: Id, eps: f32 },
    Relu { x: Id },
    /// [B, T, H*dh] -> [B, H, T, dh]
    SplitHeads { x: Id, heads: usize },
    /// [B, H, T, dh] -> [B, T, H*dh]
    MergeHeads { x: Id },
    Concat { a: Id, b: Id, axis: usize },
    Narrow { x: Id, axis: usize, start: usize, len: usize },
    /// y = x * c for a constant tensor of the same shape
    MulConst { x: Id, c: Arr },
    Mul { a: Id, b: Id },
    /// y = ln(max(x, eps))
    LogClamp { x: Id, eps: f32 },
    /// scalar sum of all entries, shape [1]
    SumAll { x: Id },
}

struct Node {
    value: Arr,
    op: Op,
    requires_grad: bool,
}

/// Gradients per node id, populated by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, if it was tracked.
    pub fn get(&self, id: Id) -> Option<&Arr> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: Id) -> Option<Arr> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: Id) -> &Arr {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: Id) -> f32 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: Arr, op: Op, requires_grad: bool) -> Id {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes[id].requires_grad
    }

    /// Inserts a leaf tensor. `track` marks it as a gradient target
    /// (parameters being trained, or inputs being probed).
    pub fn leaf(&mut self, value: Arr, track: bool) -> Id {
        self.push(value, Op::Leaf, track)
    }

    pub fn constant(&mut self, value: Arr) -> Id {
        self.push(value, Op::Leaf, false)
    }

    pub fn linear(&mut self, x: Id, w: Id, b: Option<Id>) -> Id {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let k = wv.shape()[0];
        let m = wv.shape()[1];
        debug_assert_eq!(*xv.shape().last().unwrap(), k);
        let lead: Vec<usize> = xv.shape()[..xv.ndim() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let x2 = as_2d(xv, rows, k);
        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
        let mut y2 = x2.dot(&w2);
        if let Some(b) = b {
            let bv = self.nodes[b].value.view();
            let b1 = bv.into_dimensionality::<ndarray::Ix1>().unwrap();
            y2 += &b1;
        }
        let mut shape = lead;
        shape.push(m);
        let y = y2.into_shape_with_order(IxDyn(&shape)).unwrap();
        let track = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        self.push(y, Op::Linear { x, w, b }, track)
    }

    pub fn bat_mat_nt(&mut self, a: Id, b: Id) -> Id {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let (batch, m, k) = split_batched(av);
        let (batch_b, n, kb) = split_batched(bv);
        debug_assert_eq!(batch, batch_b);
        debug_assert_eq!(k, kb);
        let nb: usize = batch.iter().product();
        let a3 = as_3d(av, nb, m, k);
        let b3 = as_3d(bv, nb, n, k);
        let mut y = ndarray::Array3::<f32>::zeros((nb, m, n));
        for i in 0..nb {
            let yi = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i).t());
            y.index_axis_mut(Axis(0), i).assign(&yi);
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let track = self.rg(a) || self.rg(b);
        self.push(y, Op::BatMatNT { a, b }, track)
    }

    pub fn bat_mat_nn(&mut self, a: Id, b: Id) -> Id {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let (batch, m, k) = split_batched(av);
        let (batch_b, kb, n) = split_batched(bv);
        debug_assert_eq!(batch, batch_b);
        debug_assert_eq!(k, kb);
        let nb: usize = batch.iter().product();
        let a3 = as_3d(av, nb, m, k);
        let b3 = as_3d(bv, nb, k, n);
        let mut y = ndarray::Array3::<f32>::zeros((nb, m, n));
        for i in 0..nb {
            let yi = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
            y.index_axis_mut(Axis(0), i).assign(&yi);
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let track = self.rg(a) || self.rg(b);
        self.push(y, Op::BatMatNN { a, b }, track)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        debug_assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let y = &self.nodes[a].value + &self.nodes[b].value;
        let track = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, track)
    }

    /// `b`'s shape must be a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Id, b: Id) -> Id {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        debug_assert!(suffix_of(bv.shape(), av.shape()));
        let y = av + bv;
        let track = self.rg(a) || self.rg(b);
        self.push(y, Op::AddBroadcast { a, b }, track)
    }

    /// Adds an untracked constant tensor (shape equal or suffix).
    pub fn add_const(&mut self, x: Id, c: &Arr) -> Id {
        let xv = &self.nodes[x].value;
        debug_assert!(suffix_of(c.shape(), xv.shape()));
        let y = xv + c;
        let track = self.rg(x);
        self.push(y, Op::AddConst { x }, track)
    }

    pub fn scale(&mut self, x: Id, c: f32) -> Id {
        let y = &self.nodes[x].value * c;
        let track = self.rg(x);
        self.push(y, Op::Scale { x, c }, track)
    }

    pub fn softmax_last(&mut self, x: Id) -> Id {
        let y = softmax_last_arr(&self.nodes[x].value);
        let track = self.rg(x);
        self.push(y, Op::SoftmaxLast { x }, track)
    }

    pub fn log_softmax_last(&mut self, x: Id) -> Id {
        let xv = &self.nodes[x].value;
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in row.iter() {
                sum += ((v - max) as f64).exp();
            }
            let lse = max + (sum as f32).ln();
            row.mapv_inplace(|v| v - lse);
        }
        let track = self.rg(x);
        self.push(y, Op::LogSoftmaxLast { x }, track)
    }

    pub fn layer_norm(&mut self, x: Id, g: Id, b: Id, eps: f32) -> Id {
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[g].value;
        let bv = &self.nodes[b].value;
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let istd = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = gv[[i]] * (*v - mean) * istd + bv[[i]];
            }
        }
        let track = self.rg(x) || self.rg(g) || self.rg(b);
        self.push(y, Op::LayerNorm { x, g, b, eps }, track)
    }

    pub fn relu(&mut self, x: Id) -> Id {
        let y = self.nodes[x].value.mapv(|v| v.max(0.0));
        let track = self.rg(x);
        self.push(y, Op::Relu { x }, track)
    }

    pub fn split_heads(&mut self, x: Id, heads: usize) -> Id {
        let xv = &self.nodes[x].value;
        debug_assert_eq!(xv.ndim(), 3);
        let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        debug_assert_eq!(d % heads, 0);
        let dh = d / heads;
        let x4 = xv
            .view()
            .into_shape_with_order(IxDyn(&[b, t, heads, dh]))
            .unwrap();
        let y = x4
            .permuted_axes(IxDyn(&[0, 2, 1, 3]))
            .as_standard_layout()
            .to_owned();
        let track = self.rg(x);
        self.push(y, Op::SplitHeads { x, heads }, track)
    }

    pub fn merge_heads(&mut self, x: Id) -> Id {
        let xv = &self.nodes[x].value;
        debug_assert_eq!(xv.ndim(), 4);
        let (b, h, t, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let y = xv
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1, 3]))
            .as_standard_layout()
            .into_shape_with_order(IxDyn(&[b, t, h * dh]))
            .unwrap()
            .to_owned();
        let track = self.rg(x);
        self.push(y, Op::MergeHeads { x }, track)
    }

    pub fn concat(&mut self, a: Id, b: Id, axis: usize) -> Id {
        let av = self.nodes[a].value.view();
        let bv = self.nodes[b].value.view();
        let y = ndarray::concatenate(Axis(axis), &[av, bv]).expect("concat shapes");
        let y = y.as_standard_layout().to_owned();
        let track = self.rg(a) || self.rg(b);
        self.push(y, Op::Concat { a, b, axis }, track)
    }

    pub fn narrow(&mut self, x: Id, axis: usize, start: usize, len: usize) -> Id {
        let y = self.nodes[x]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let track = self.rg(x);
        self.push(y, Op::Narrow { x, axis, start, len }, track)
    }

    pub fn mul_const(&mut self, x: Id, c: Arr) -> Id {
        debug_assert_eq!(self.nodes[x].value.shape(), c.shape());
        let y = &self.nodes[x].value * &c;
        let track = self.rg(x);
        self.push(y, Op::MulConst { x, c }, track)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        debug_assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let y = &self.nodes[a].value * &self.nodes[b].value;
        let track = self.rg(a) || self.rg(b);
        self.push(y, Op::Mul { a, b }, track)
    }

    pub fn log_clamp(&mut self, x: Id, eps: f32) -> Id {
        let y = self.nodes[x].value.mapv(|v| v.max(eps).ln());
        let track = self.rg(x);
        self.push(y, Op::LogClamp { x, eps }, track)
    }

    pub fn sum_all(&mut self, x: Id) -> Id {
        let s: f64 = self.nodes[x].value.iter().map(|&v| v as f64).sum();
        let y = ndarray::arr1(&[s as f32]).into_dyn();
        let track = self.rg(x);
        self.push(y, Op::SumAll { x }, track)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients for
    /// every tracked node reachable from the root.
    pub fn backward(&self, root: Id) -> Gradients {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Arr::ones(self.nodes[root].value.raw_dim()));
        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g); // keep leaf gradients for the caller
            }
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: Id, g: &Arr, grads: &mut [Option<Arr>]) {
        let add_to = |grads: &mut [Option<Arr>], pid: Id, delta: Arr| {
            if !self.nodes[pid].requires_grad {
                return;
            }
            match &mut grads[pid] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let k = wv.shape()[0];
                let m = wv.shape()[1];
                let rows: usize = xv.len() / k;
                let x2 = as_2d(xv, rows, k);
                let g2 = as_2d(g, rows, m);
                let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
                if self.nodes[*x].requires_grad {
                    let dx = g2.dot(&w2.t());
                    add_to(
                        grads,
                        *x,
                        dx.into_shape_with_order(xv.raw_dim()).unwrap(),
                    );
                }
                if self.nodes[*w].requires_grad {
                    let dw = x2.t().dot(&g2);
                    add_to(grads, *w, dw.into_dyn());
                }
                if let Some(b) = b {
                    if self.nodes[*b].requires_grad {
                        let db = g2.sum_axis(Axis(0));
                        add_to(grads, *b, db.into_dyn());
                    }
                }
            }
            Op::BatMatNT { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (batch, m, k) = split_batched(av);
                let (_, n, _) = split_batched(bv);
                let nb: usize = batch.iter().product();
                let a3 = as_3d(av, nb, m, k);
                let b3 = as_3d(bv, nb, n, k);
                let g3 = as_3d(g, nb, m, n);
                if self.nodes[*a].requires_grad {
                    let mut da = ndarray::Array3::<f32>::zeros((nb, m, k));
                    for i in 0..nb {
                        let d = g3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
                        da.index_axis_mut(Axis(0), i).assign(&d);
                    }
                    add_to(grads, *a, da.into_shape_with_order(av.raw_dim()).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    let mut db = ndarray::Array3::<f32>::zeros((nb, n, k));
                    for i in 0..nb {
                        let d = g3
                            .index_axis(Axis(0), i)
                            .t()
                            .dot(&a3.index_axis(Axis(0), i));
                        db.index_axis_mut(Axis(0), i).assign(&d);
                    }
                    add_to(grads, *b, db.into_shape_with_order(bv.raw_dim()).unwrap());
                }
            }
            Op::BatMatNN { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (batch, m, k) = split_batched(av);
                let (_, _, n) = split_batched(bv);
                let nb: usize = batch.iter().product();
                let a3 = as_3d(av, nb, m, k);
                let b3 = as_3d(bv, nb, k, n);
                let g3 = as_3d(g, nb, m, n);
                if self.nodes[*a].requires_grad {
                    let mut da = ndarray::Array3::<f32>::zeros((nb, m, k));
                    for i in 0..nb {
                        let d = g3
                            .index_axis(Axis(0), i)
                            .dot(&b3.index_axis(Axis(0), i).t());
                        da.index_axis_mut(Axis(0), i).assign(&d);
                    }
                    add_to(grads, *a, da.into_shape_with_order(av.raw_dim()).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    let mut db = ndarray::Array3::<f32>::zeros((nb, k, n));
                    for i in 0..nb {
                        let d = a3
                            .index_axis(Axis(0), i)
                            .t()
                            .dot(&g3.index_axis(Axis(0), i));
                        db.index_axis_mut(Axis(0), i).assign(&d);
                    }
                    add_to(grads, *b, db.into_shape_with_order(bv.raw_dim()).unwrap());
                }
            }
            Op::Add { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddBroadcast { a, b } => {
                add_to(grads, *a, g.clone());
                if self.nodes[*b].requires_grad {
                    let db = reduce_to_suffix(g, self.nodes[*b].value.shape());
                    add_to(grads, *b, db);
                }
            }
            Op::AddConst { x } => add_to(grads, *x, g.clone()),
            Op::Scale { x, c } => add_to(grads, *x, g * *c),
            Op::SoftmaxLast { x } => {
                let y = &self.nodes[id].value;
                let mut dx = g.clone();
                let last = y.ndim() - 1;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f32 = drow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&d, &yv)| d * yv)
                        .sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d = yv * (*d - dot);
                    }
                }
                let _ = last;
                add_to(grads, *x, dx);
            }
            Op::LogSoftmaxLast { x } => {
                let xv = &self.nodes[*x].value;
                let sm = softmax_last_arr(xv);
                let mut dx = g.clone();
                for (mut drow, srow) in dx.rows_mut().into_iter().zip(sm.rows()) {
                    let gsum: f32 = drow.iter().sum();
                    for (d, &s) in drow.iter_mut().zip(srow.iter()) {
                        *d -= s * gsum;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::LayerNorm { x, g: gain, b, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let n = *xv.shape().last().unwrap();
                let nf = n as f32;
                let mut dx = Arr::zeros(xv.raw_dim());
                let mut dgain = ndarray::Array1::<f32>::zeros(n);
                let mut dbias = ndarray::Array1::<f32>::zeros(n);
                for ((xrow, grow), mut dxrow) in xv
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(dx.rows_mut())
                {
                    let mean = xrow.sum() / nf;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / nf;
                    let istd = 1.0 / (var + eps).sqrt();
                    // xhat_i = (x_i - mean) * istd
                    let mut sum_dy_g = 0.0f32;
                    let mut sum_dy_g_xhat = 0.0f32;
                    for i in 0..n {
                        let xhat = (xrow[i] - mean) * istd;
                        let dyg = grow[i] * gv[[i]];
                        sum_dy_g += dyg;
                        sum_dy_g_xhat += dyg * xhat;
                        dgain[i] += grow[i] * xhat;
                        dbias[i] += grow[i];
                    }
                    for i in 0..n {
                        let xhat = (xrow[i] - mean) * istd;
                        let dyg = grow[i] * gv[[i]];
                        dxrow[i] = istd * (dyg - sum_dy_g / nf - xhat * sum_dy_g_xhat / nf);
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gain, dgain.into_dyn());
                add_to(grads, *b, dbias.into_dyn());
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                add_to(grads, *x, dx);
            }
            Op::SplitHeads { x, heads } => {
                let xv = &self.nodes[*x].value;
                let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let dh = d / heads;
                let dx = g
                    .view()
                    .permuted_axes(IxDyn(&[0, 2, 1, 3]))
                    .as_standard_layout()
                    .into_shape_with_order(IxDyn(&[b, t, d]))
                    .unwrap()
                    .to_owned();
                let _ = dh;
                add_to(grads, *x, dx);
            }
            Op::MergeHeads { x } => {
                let xv = &self.nodes[*x].value;
                let (b, h, t, dh) = (
                    xv.shape()[0],
                    xv.shape()[1],
                    xv.shape()[2],
                    xv.shape()[3],
                );
                let dx = g
                    .view()
                    .into_shape_with_order(IxDyn(&[b, t, h, dh]))
                    .unwrap()
                    .permuted_axes(IxDyn(&[0, 2, 1, 3]))
                    .as_standard_layout()
                    .to_owned();
                add_to(grads, *x, dx);
            }
            Op::Concat { a, b, axis } => {
                let alen = self.nodes[*a].value.shape()[*axis];
                let blen = self.nodes[*b].value.shape()[*axis];
                let da = g
                    .slice_axis(Axis(*axis), Slice::from(0..alen))
                    .to_owned();
                let db = g
                    .slice_axis(Axis(*axis), Slice::from(alen..alen + blen))
                    .to_owned();
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Narrow { x, axis, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Arr::zeros(xv.raw_dim());
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                add_to(grads, *x, dx);
            }
            Op::MulConst { x, c } => add_to(grads, *x, g * c),
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    add_to(grads, *a, g * &self.nodes[*b].value);
                }
                if self.nodes[*b].requires_grad {
                    add_to(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::LogClamp { x, eps } => {
                let xv = &self.nodes[*x].value;
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &v| {
                    if v > *eps {
                        *d /= v;
                    } else {
                        *d = 0.0;
                    }
                });
                add_to(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let scalar = g.iter().copied().next().unwrap();
                let dx = Arr::from_elem(self.nodes[*x].value.raw_dim(), scalar);
                add_to(grads, *x, dx);
            }
        }
    }
}

fn softmax_last_arr(x: &Arr) -> Arr {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        row.mapv_inplace(|v| v * inv);
    }
    y
}

fn as_2d<'a>(x: &'a Arr, rows: usize, cols: usize) -> ndarray::ArrayView2<'a, f32> {
    x.view()
        .into_shape_with_order((rows, cols))
        .expect("standard layout")
}

fn as_3d<'a>(x: &'a Arr, b: usize, m: usize, n: usize) -> ndarray::ArrayView3<'a, f32> {
    x.view()
        .into_shape_with_order((b, m, n))
        .expect("standard layout")
}

fn split_batched(x: &Arr) -> (Vec<usize>, usize, usize) {
    let nd = x.ndim();
    debug_assert!(nd >= 2);
    (
        x.shape()[..nd - 2].to_vec(),
        x.shape()[nd - 2],
        x.shape()[nd - 1],
    )
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums `g` down to the given suffix shape.
fn reduce_to_suffix(g: &Arr, shape: &[usize]) -> Arr {
    let mut acc = g.clone();
    while acc.ndim() > shape.len() {
        acc = acc.sum_axis(Axis(0));
    }
    debug_assert_eq!(acc.shape(), shape);
    acc
}

/// View helper used by model code.
pub fn view4(x: &Arr) -> ArrayViewD<'_, f32> {
    x.view()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on a scalar-valued tape builder.
    fn fd_check<F>(build: F, inputs: &[Arr], step: f32, tol: f32)
    where
        F: Fn(&mut Tape, &[Id]) -> Id,
    {
        let run = |inputs: &[Arr]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<Id> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
            let loss = build(&mut t, &ids);
            t.scalar(loss) as f64
        };
        let mut t = Tape::new();
        let ids: Vec<Id> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let loss = build(&mut t, &ids);
        let grads = t.backward(loss);
        for (arg, (input, &id)) in inputs.iter().zip(ids.iter()).enumerate() {
            let analytic = grads.get(id).expect("tracked input");
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[arg].as_slice_mut().unwrap()[idx] += step;
                let mut minus = inputs.to_vec();
                minus[arg].as_slice_mut().unwrap()[idx] -= step;
                let fd = (run(&plus) - run(&minus)) / (2.0 * step as f64);
                let an = analytic.as_slice().unwrap()[idx] as f64;
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    ((fd - an) / denom).abs() < tol as f64,
                    "arg {arg} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn linear_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_arr(&[2, 3, 4], &mut rng);
        let w = rand_arr(&[4, 5], &mut rng);
        let b = rand_arr(&[5], &mut rng);
        fd_check(
            |t, ids| {
                let y = t.linear(ids[0], ids[1], Some(ids[2]));
                let y = t.relu(y);
                t.sum_all(y)
            },
            &[x, w, b],
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn batmat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_arr(&[2, 2, 3, 4], &mut rng);
        let b = rand_arr(&[2, 2, 5, 4], &mut rng);
        fd_check(
            |t, ids| {
                let s = t.bat_mat_nt(ids[0], ids[1]);
                let s = t.softmax_last(s);
                t.sum_all(s)
            },
            &[a.clone(), b.clone()],
            1e-2,
            2e-2,
        );
        let v = rand_arr(&[2, 2, 4, 3], &mut rng);
        fd_check(
            |t, ids| {
                let s = t.bat_mat_nn(ids[0], ids[1]);
                t.sum_all(s)
            },
            &[a, v],
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn softmax_logsoftmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr(&[3, 4], &mut rng);
        let weights = rand_arr(&[3, 4], &mut rng);
        let w2 = weights.clone();
        fd_check(
            move |t, ids| {
                let y = t.softmax_last(ids[0]);
                let y = t.mul_const(y, w2.clone());
                t.sum_all(y)
            },
            &[x.clone()],
            1e-2,
            2e-2,
        );
        let w3 = weights.clone();
        fd_check(
            move |t, ids| {
                let y = t.log_softmax_last(ids[0]);
                let y = t.mul_const(y, w3.clone());
                t.sum_all(y)
            },
            &[x],
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&[2, 3, 6], &mut rng);
        let g = rand_arr(&[6], &mut rng);
        let b = rand_arr(&[6], &mut rng);
        let probe = rand_arr(&[2, 3, 6], &mut rng);
        fd_check(
            move |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
                let y = t.mul_const(y, probe.clone());
                t.sum_all(y)
            },
            &[x, g, b],
            1e-2,
            3e-2,
        );
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_arr(&[2, 4, 6], &mut rng);
        let b = rand_arr(&[2, 2, 6], &mut rng);
        let probe = rand_arr(&[2, 3, 6], &mut rng);
        fd_check(
            move |t, ids| {
                let cat = t.concat(ids[0], ids[1], 1); // [2,6,6]
                let narrowed = t.narrow(cat, 1, 1, 3); // [2,3,6]
                let h = t.split_heads(narrowed, 2);
                let m = t.merge_heads(h);
                let m = t.mul_const(m, probe.clone());
                t.sum_all(m)
            },
            &[a, b],
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Arr::from_shape_fn(IxDyn(&[3, 4]), |_| rng.random_range(0.05f32..1.0));
        let b = rand_arr(&[3, 4], &mut rng);
        let bias = rand_arr(&[4], &mut rng);
        fd_check(
            |t, ids| {
                let l = t.log_clamp(ids[0], 1e-8);
                let m = t.mul(l, ids[1]);
                let m = t.add_broadcast(m, ids[2]);
                let m = t.scale(m, 0.5);
                t.sum_all(m)
            },
            &[a, b, bias],
            1e-3,
            2e-2,
        );
    }

    #[test]
    fn add_variants() {
        let a = arr2(&[[1.0f32, 2.0], [3.0, 4.0]]).into_dyn();
        let b = arr2(&[[10.0f32, 20.0], [30.0, 40.0]]).into_dyn();
        let c = arr1(&[100.0f32, 200.0]).into_dyn();
        let mut t = Tape::new();
        let ia = t.leaf(a, true);
        let ib = t.leaf(b, true);
        let sum = t.add(ia, ib);
        let with_const = t.add_const(sum, &c);
        let total = t.sum_all(with_const);
        assert_eq!(t.scalar(total), 11.0 + 22.0 + 33.0 + 44.0 + 600.0);
        let grads = t.backward(total);
        assert_eq!(grads.get(ia).unwrap().sum(), 4.0);
        assert_eq!(grads.get(ib).unwrap().sum(), 4.0);
    }

    #[test]
    fn untracked_branches_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(arr1(&[1.0f32, 2.0]).into_dyn(), true);
        let frozen = t.constant(arr2(&[[1.0f32], [1.0]]).into_dyn());
        let y = t.linear(x, frozen, None);
        let loss = t.sum_all(y);
        let grads = t.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(x).is_some());
    }
}
