use super::{NumError, Tensor};

/// Handle into a [`Graph`]. Parents always have smaller indices, so insertion
/// order is a topological order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// (m x k) . (k x n) -> (m x n), or (m x k) . (k) -> (m)
    MatMul(NodeId, NodeId),
    /// (k) . (k x n) -> (n); realizes weighted sums of matrix rows
    VecMat(NodeId, NodeId),
    /// w (m x n) . x (n) + b (m) -> (m)
    Affine { w: NodeId, x: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    /// (k x n) + (n) added to every row
    AddRowBroadcast(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRow(NodeId),
    LogSoftmaxRow(NodeId),
    Hadamard(NodeId, NodeId),
    /// 1-D concatenation; scalars count as length-1 vectors
    Concat(Vec<NodeId>),
    /// (m x n) -> (n x m)
    Transpose(NodeId),
    /// (k x n) -> (n), mean over rows
    MeanRows(NodeId),
    /// (r x c), i -> (c)
    RowLookup(NodeId, usize),
    ScalarMul(NodeId, f64),
    /// (n), i -> scalar
    Pick(NodeId, usize),
    /// all elements -> scalar
    Sum(NodeId),
    /// mean over components of the stable binary cross entropy between
    /// sigmoid(logits) and fixed targets -> scalar
    BceWithLogits { logits: NodeId, targets: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::VecMat(..) => "vecmat",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRow(..) => "softmax_row",
            Op::LogSoftmaxRow(..) => "log_softmax_row",
            Op::Hadamard(..) => "hadamard",
            Op::Concat(..) => "concat_rows",
            Op::Transpose(..) => "transpose",
            Op::MeanRows(..) => "mean_rows",
            Op::RowLookup(..) => "row_lookup",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Pick(..) => "pick",
            Op::Sum(..) => "sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct NodeData {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Computation tape. Built fresh for every forward pass; `backward` fills the
/// `grad` slot of every node that the root depends on.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: String) -> NumError {
    NumError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op.name() });
        }
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(NodeData { value, grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Insert an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, NumError> {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match (av.rank(), bv.rank()) {
            (2, 2) if av.cols() == bv.rows() => {
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let arow = av.row(i);
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (p, &aval) in arow.iter().enumerate().take(k) {
                        let brow = bv.row(p);
                        for (o, &bval) in orow.iter_mut().zip(brow.iter()) {
                            *o += aval * bval;
                        }
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            (2, 1) if av.cols() == bv.numel() => {
                let (m, k) = (av.rows(), av.cols());
                let bd = bv.data();
                let mut out = vec![0.0; m];
                for (i, o) in out.iter_mut().enumerate() {
                    let arow = av.row(i);
                    *o = (0..k).map(|p| arow[p] * bd[p]).sum();
                }
                Tensor::vector(out)
            }
            _ => {
                return Err(shape_err(
                    "matmul",
                    format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
                ))
            }
        };
        self.push(Op::MatMul(a, b), value)
    }

    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> Result<NodeId, NumError> {
        let (vv, mv) = (&self.nodes[v.0].value, &self.nodes[m.0].value);
        if vv.rank() != 1 || mv.rank() != 2 || vv.numel() != mv.rows() {
            return Err(shape_err(
                "vecmat",
                format!("cannot multiply {:?} by {:?}", vv.shape(), mv.shape()),
            ));
        }
        let n = mv.cols();
        let mut out = vec![0.0; n];
        for (i, &w) in vv.data().iter().enumerate() {
            for (o, &mval) in out.iter_mut().zip(mv.row(i).iter()) {
                *o += w * mval;
            }
        }
        self.push(Op::VecMat(v, m), Tensor::vector(out))
    }

    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (wv, xv, bv) = (
            &self.nodes[w.0].value,
            &self.nodes[x.0].value,
            &self.nodes[b.0].value,
        );
        if wv.rank() != 2 || xv.rank() != 1 || bv.rank() != 1 || wv.cols() != xv.numel() || wv.rows() != bv.numel()
        {
            return Err(shape_err(
                "affine",
                format!("w {:?}, x {:?}, b {:?}", wv.shape(), xv.shape(), bv.shape()),
            ));
        }
        let xd = xv.data();
        let out: Vec<f64> = (0..wv.rows())
            .map(|i| {
                let wrow = wv.row(i);
                bv.data()[i] + wrow.iter().zip(xd.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push(Op::Affine { w, x, b }, Tensor::vector(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !av.same_shape(bv) {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, NumError> {
        let (mv, vv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if mv.rank() != 2 || vv.rank() != 1 || mv.cols() != vv.numel() {
            return Err(shape_err(
                "add_row_broadcast",
                format!("{:?} vs {:?}", mv.shape(), vv.shape()),
            ));
        }
        let cols = mv.cols();
        let data: Vec<f64> = mv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vv.data()[i % cols])
            .collect();
        let value = Tensor::new(mv.shape().to_vec(), data)?;
        self.push(Op::AddRowBroadcast(m, v), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let value = self.nodes[x.0].value.map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let value = self.nodes[x.0].value.map(sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    /// Row-wise softmax (plain softmax for rank 1), stabilized by row-max
    /// subtraction.
    pub fn softmax_row(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let value = rowwise(&self.nodes[x.0].value, softmax_slice, "softmax_row")?;
        self.push(Op::SoftmaxRow(x), value)
    }

    pub fn log_softmax_row(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let value = rowwise(&self.nodes[x.0].value, log_softmax_slice, "log_softmax_row")?;
        self.push(Op::LogSoftmaxRow(x), value)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !av.same_shape(bv) {
            return Err(shape_err("hadamard", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Hadamard(a, b), value)
    }

    /// Concatenate rank-0/rank-1 nodes into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rank() > 1 {
                return Err(shape_err("concat_rows", format!("rank-{} input", pv.rank())));
            }
            data.extend_from_slice(pv.data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data))
    }

    pub fn transpose(&mut self, m: NodeId) -> Result<NodeId, NumError> {
        let mv = &self.nodes[m.0].value;
        if mv.rank() != 2 {
            return Err(shape_err("transpose", format!("{:?}", mv.shape())));
        }
        let (rows, cols) = (mv.rows(), mv.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = mv.at2(r, c);
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        self.push(Op::Transpose(m), value)
    }

    pub fn mean_rows(&mut self, m: NodeId) -> Result<NodeId, NumError> {
        let mv = &self.nodes[m.0].value;
        if mv.rank() != 2 || mv.rows() == 0 {
            return Err(shape_err("mean_rows", format!("{:?}", mv.shape())));
        }
        let (k, n) = (mv.rows(), mv.cols());
        let mut out = vec![0.0; n];
        for i in 0..k {
            for (o, &x) in out.iter_mut().zip(mv.row(i).iter()) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= k as f64;
        }
        self.push(Op::MeanRows(m), Tensor::vector(out))
    }

    pub fn row_lookup(&mut self, table: NodeId, row: usize) -> Result<NodeId, NumError> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 || row >= tv.rows() {
            return Err(shape_err(
                "row_lookup",
                format!("row {} of {:?}", row, tv.shape()),
            ));
        }
        let value = Tensor::vector(tv.row(row).to_vec());
        self.push(Op::RowLookup(table, row), value)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId, NumError> {
        let value = self.nodes[x.0].value.map(|v| v * c);
        self.push(Op::ScalarMul(x, c), value)
    }

    pub fn pick(&mut self, v: NodeId, index: usize) -> Result<NodeId, NumError> {
        let vv = &self.nodes[v.0].value;
        if vv.rank() != 1 || index >= vv.numel() {
            return Err(shape_err("pick", format!("index {} of {:?}", index, vv.shape())));
        }
        let value = Tensor::scalar(vv.data()[index]);
        self.push(Op::Pick(v, index), value)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let value = Tensor::scalar(self.nodes[x.0].value.data().iter().sum());
        self.push(Op::Sum(x), value)
    }

    /// Mean binary cross entropy between sigmoid(logits) and fixed soft
    /// targets, computed in the numerically stable logits form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId, NumError> {
        let lv = &self.nodes[logits.0].value;
        if !lv.same_shape(&targets) {
            return Err(shape_err(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", lv.shape(), targets.shape()),
            ));
        }
        if targets.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(NumError::InvalidArgument {
                op: "bce_with_logits",
                detail: "targets must lie in [0, 1]".into(),
            });
        }
        let n = lv.numel() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        self.push(Op::BceWithLogits { logits, targets }, value)
    }

    /// Clear accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = Tensor::zeros(node.value.shape());
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar root; fills `grad` for every node the
    /// root depends on. A second call without `reset_grads` is rejected.
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumError> {
        if self.backward_done {
            return Err(NumError::BackwardTwice);
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(NumError::NonScalarRoot { shape: root_value.shape().to_vec() });
        }
        self.backward_done = true;
        self.nodes[root.0].grad.data_mut()[0] = 1.0;

        let mut reached = vec![false; root.0 + 1];
        reached[root.0] = true;

        for i in (0..=root.0).rev() {
            if !reached[i] {
                continue;
            }
            if !self.nodes[i].grad.is_finite() {
                return Err(NumError::BackwardNonFinite { op: self.nodes[i].op.name() });
            }
            for parent in self.parents(i) {
                reached[parent.0] = true;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn parents(&self, i: usize) -> Vec<NodeId> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::VecMat(a, b) | Op::Add(a, b) | Op::AddRowBroadcast(a, b) | Op::Hadamard(a, b) => {
                vec![*a, *b]
            }
            Op::Affine { w, x, b } => vec![*w, *x, *b],
            Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::SoftmaxRow(x)
            | Op::LogSoftmaxRow(x)
            | Op::Transpose(x)
            | Op::MeanRows(x)
            | Op::RowLookup(x, _)
            | Op::ScalarMul(x, _)
            | Op::Pick(x, _)
            | Op::Sum(x)
            | Op::BceWithLogits { logits: x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
        }
    }

    /// Compute each parent's gradient contribution from the node's output
    /// gradient, then accumulate. Contributions are built against immutable
    /// values first so the borrow structure stays trivial.
    fn propagate(&mut self, i: usize) {
        let gy = self.nodes[i].grad.clone();
        let val = |id: NodeId| &self.nodes[id.0].value;
        let yval = &self.nodes[i].value;

        let contributions: Vec<(NodeId, Tensor)> = match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                match bv.rank() {
                    2 => {
                        let n = bv.cols();
                        // ga = gy . b^T ; gb = a^T . gy
                        for r in 0..m {
                            for c in 0..k {
                                let mut acc = 0.0;
                                for p in 0..n {
                                    acc += gy.at2(r, p) * bv.at2(c, p);
                                }
                                ga.data_mut()[r * k + c] = acc;
                            }
                        }
                        for r in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for p in 0..m {
                                    acc += av.at2(p, r) * gy.at2(p, c);
                                }
                                gb.data_mut()[r * n + c] = acc;
                            }
                        }
                    }
                    _ => {
                        // ga = outer(gy, b) ; gb = a^T . gy
                        for r in 0..m {
                            let g = gy.data()[r];
                            for c in 0..k {
                                ga.data_mut()[r * k + c] = g * bv.data()[c];
                            }
                        }
                        for c in 0..k {
                            gb.data_mut()[c] =
                                (0..m).map(|r| av.at2(r, c) * gy.data()[r]).sum();
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::VecMat(v, m) => {
                let (vv, mv) = (val(*v), val(*m));
                let n = mv.cols();
                let mut gv = Tensor::zeros(vv.shape());
                let mut gm = Tensor::zeros(mv.shape());
                for (r, g) in gv.data_mut().iter_mut().enumerate() {
                    *g = mv.row(r).iter().zip(gy.data()).map(|(a, b)| a * b).sum();
                }
                for (r, &w) in vv.data().iter().enumerate() {
                    for (c, &g) in gy.data().iter().enumerate() {
                        gm.data_mut()[r * n + c] = w * g;
                    }
                }
                vec![(*v, gv), (*m, gm)]
            }
            Op::Affine { w, x, b } => {
                let (wv, xv) = (val(*w), val(*x));
                let n = xv.numel();
                let mut gw = Tensor::zeros(wv.shape());
                let mut gx = Tensor::zeros(xv.shape());
                for (r, &g) in gy.data().iter().enumerate() {
                    for (c, &x0) in xv.data().iter().enumerate() {
                        gw.data_mut()[r * n + c] = g * x0;
                    }
                }
                for (c, g) in gx.data_mut().iter_mut().enumerate() {
                    *g = (0..wv.rows()).map(|r| wv.at2(r, c) * gy.data()[r]).sum();
                }
                vec![(*w, gw), (*x, gx), (*b, gy.clone())]
            }
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::AddRowBroadcast(m, v) => {
                let cols = val(*v).numel();
                let mut gv = Tensor::zeros(&[cols]);
                for (idx, &g) in gy.data().iter().enumerate() {
                    gv.data_mut()[idx % cols] += g;
                }
                vec![(*m, gy.clone()), (*v, gv)]
            }
            Op::Tanh(x) => {
                let g = tensor_zip(&gy, yval, |g, y| g * (1.0 - y * y));
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let g = tensor_zip(&gy, yval, |g, y| g * y * (1.0 - y));
                vec![(*x, g)]
            }
            Op::SoftmaxRow(x) => {
                // per row: gx = y o (gy - <gy, y>)
                let cols = if yval.rank() == 2 { yval.cols() } else { yval.numel() };
                let mut gx = Tensor::zeros(yval.shape());
                for r in 0..yval.numel() / cols {
                    let y = &yval.data()[r * cols..(r + 1) * cols];
                    let g = &gy.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    let out = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmaxRow(x) => {
                // per row: gx = gy - exp(y) * sum(gy)
                let cols = if yval.rank() == 2 { yval.cols() } else { yval.numel() };
                let mut gx = Tensor::zeros(yval.shape());
                for r in 0..yval.numel() / cols {
                    let y = &yval.data()[r * cols..(r + 1) * cols];
                    let g = &gy.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = g.iter().sum();
                    let out = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Hadamard(a, b) => {
                let ga = tensor_zip(&gy, val(*b), |g, b| g * b);
                let gb = tensor_zip(&gy, val(*a), |g, a| g * a);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.numel();
                    let mut gp = Tensor::zeros(pv.shape());
                    gp.data_mut().copy_from_slice(&gy.data()[offset..offset + len]);
                    out.push((p, gp));
                    offset += len;
                }
                out
            }
            Op::Transpose(m) => {
                let mv = val(*m);
                let (rows, cols) = (mv.rows(), mv.cols());
                let mut gm = Tensor::zeros(mv.shape());
                for r in 0..rows {
                    for c in 0..cols {
                        gm.data_mut()[r * cols + c] = gy.at2(c, r);
                    }
                }
                vec![(*m, gm)]
            }
            Op::MeanRows(m) => {
                let mv = val(*m);
                let (k, n) = (mv.rows(), mv.cols());
                let mut gm = Tensor::zeros(mv.shape());
                for r in 0..k {
                    for (c, &g) in gy.data().iter().enumerate().take(n) {
                        gm.data_mut()[r * n + c] = g / k as f64;
                    }
                }
                vec![(*m, gm)]
            }
            Op::RowLookup(table, row) => {
                let tv = val(*table);
                let n = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                gt.data_mut()[row * n..(row + 1) * n].copy_from_slice(gy.data());
                vec![(*table, gt)]
            }
            Op::ScalarMul(x, c) => {
                let c = *c;
                vec![(*x, gy.map(|g| g * c))]
            }
            Op::Pick(v, index) => {
                let mut gv = Tensor::zeros(val(*v).shape());
                gv.data_mut()[*index] = gy.data()[0];
                vec![(*v, gv)]
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                let mut gx = Tensor::zeros(val(*x).shape());
                gx.data_mut().fill(g);
                vec![(*x, gx)]
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits);
                let g = gy.data()[0];
                let n = lv.numel() as f64;
                let data = lv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| g * (sigmoid(x) - t) / n)
                    .collect();
                vec![(*logits, Tensor::new(lv.shape().to_vec(), data).expect("shape"))]
            }
        };

        for (parent, contribution) in contributions {
            let gp = self.nodes[parent.0].grad.data_mut();
            for (g, &c) in gp.iter_mut().zip(contribution.data()) {
                *g += c;
            }
        }
    }
}

fn tensor_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - max - log_sum;
    }
}

fn rowwise(
    x: &Tensor,
    f: impl Fn(&[f64], &mut [f64]),
    op: &'static str,
) -> Result<Tensor, NumError> {
    match x.rank() {
        1 => {
            let mut out = vec![0.0; x.numel()];
            f(x.data(), &mut out);
            Ok(Tensor::vector(out))
        }
        2 => {
            let (rows, cols) = (x.rows(), x.cols());
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                f(x.row(r), &mut out[r * cols..(r + 1) * cols]);
            }
            Tensor::new(vec![rows, cols], out)
        }
        _ => Err(shape_err(op, format!("{:?}", x.shape()))),
    }
}

/// Max-over-coordinates relative error between analytic gradients of a scalar
/// function and central finite differences at `point`.
pub fn grad_check<F>(build: F, point: &Tensor, eps: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, NumError>,
{
    if eps <= 0.0 {
        return Err(NumError::InvalidArgument { op: "grad_check", detail: "eps must be positive".into() });
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone())?;
    let root = build(&mut g, x)?;
    g.backward(root)?;
    let analytic = g.grad(x).clone();

    let eval = |p: &Tensor| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone())?;
        let root = build(&mut g, x)?;
        let v = g.value(root);
        if !v.is_scalar() {
            return Err(NumError::NonScalarRoot { shape: v.shape().to_vec() });
        }
        Ok(v.scalar_value())
    };

    let mut max_rel = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if !rel.is_finite() {
            return Err(NumError::GradCheckNonFinite { index: i });
        }
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let s = g.softmax_row(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let big = g.leaf(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        let s = g.softmax_row(big).unwrap();
        assert!(g.value(s).is_finite());
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn hadamard_definition() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let b = g.leaf(Tensor::vector(vec![4.0, 0.0, -1.0])).unwrap();
        let h = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(h).data(), &[4.0, 0.0, -3.0]);
    }

    #[test]
    fn backward_tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0])).unwrap();
        let t = g.tanh(x).unwrap();
        let root = g.sum(t).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0]);
    }

    #[test]
    fn backward_softmax_sum_is_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let s = g.softmax_row(x).unwrap();
        let root = g.sum(s).unwrap();
        g.backward(root).unwrap();
        for &v in g.grad(x).data() {
            assert!(close(v, 0.0, 1e-12), "expected zero grad, got {v}");
        }
    }

    #[test]
    fn backward_rejects_second_call_and_nonscalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumError::NonScalarRoot { .. })));
        let root = g.sum(y).unwrap();
        g.backward(root).unwrap();
        assert!(matches!(g.backward(root), Err(NumError::BackwardTwice)));
        g.reset_grads();
        g.backward(root).unwrap();
    }

    #[test]
    fn five_layer_composite_matches_finite_differences() {
        // matmul . tanh . hadamard . affine-ish . softmax chain
        let w = Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap();
        let b = Tensor::vector(vec![0.2, -0.1, 0.05]);
        let m = Tensor::matrix(4, 4, (0..16).map(|i| ((i * 7) % 5) as f64 * 0.2 - 0.3).collect()).unwrap();
        let point = Tensor::vector(vec![0.4, -0.7, 1.1, 0.3]);
        let err = grad_check(
            move |g, x| {
                let mnode = g.leaf(m.clone())?;
                let wnode = g.leaf(w.clone())?;
                let bnode = g.leaf(b.clone())?;
                let h0 = g.matmul(mnode, x)?;
                let h1 = g.affine(wnode, h0, bnode)?;
                let h2 = g.tanh(h1)?;
                let h3 = g.hadamard(h2, h2)?;
                let h4 = g.softmax_row(h3)?;
                let h5 = g.log_softmax_row(h4)?;
                g.sum(h5)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let err = grad_check(
            |g, x| {
                let sq = g.hadamard(x, x)?;
                g.sum(sq)
            },
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "max relative error {err}");
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn nonfinite_forward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1e308])).unwrap();
        let doubled = g.scalar_mul(x, 10.0);
        assert!(matches!(doubled, Err(NumError::NonFinite { op: "scalar_mul" })));
    }

    #[test]
    fn concat_and_pick_roundtrip_gradients() {
        let err = grad_check(
            |g, x| {
                let a = g.pick(x, 0)?;
                let b = g.pick(x, 2)?;
                let joined = g.concat(&[a, b, x])?;
                let sq = g.hadamard(joined, joined)?;
                g.sum(sq)
            },
            &Tensor::vector(vec![0.5, -1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn bce_with_logits_matches_plain_formula_and_grad() {
        let logits = Tensor::vector(vec![0.7, -1.3, 2.2]);
        let targets = Tensor::vector(vec![1.0, 0.0, 0.5]);
        let mut g = Graph::new();
        let l = g.leaf(logits.clone()).unwrap();
        let loss = g.bce_with_logits(l, targets.clone()).unwrap();
        let expected: f64 = logits
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| {
                let s = 1.0 / (1.0 + (-x).exp());
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!(close(g.value(loss).scalar_value(), expected, 1e-12));

        let t2 = targets.clone();
        let err = grad_check(move |g, x| g.bce_with_logits(x, t2.clone()), &logits, 1e-6).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }
}
