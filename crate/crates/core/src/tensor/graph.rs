use super::{sigmoid, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Var, Var),
    AddBias(Var, Var),
    Conv1dCausal {
        x: Var,
        w: Var,
        b: Var,
    },
    Glu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        denom: T,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    StackRows(Vec<Var>),
    Sum(Var),
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of operations in the order they were executed.
///
/// Every op runs eagerly; the tape keeps whatever each op needs for its
/// gradient. All reductions use a fixed sequential order so a replay with
/// identical inputs is bitwise identical.
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call, if `v` participated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got {}", shape_str(s))));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.is_scalar() {
            Ok(sa.shape().to_vec())
        } else if sa.is_scalar() {
            Ok(sb.shape().to_vec())
        } else {
            Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(sa.shape()), shape_str(sb.shape())),
            ))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len().max(bv.len());
        (0..n)
            .map(|i| {
                let x = if av.len() == 1 { av[0] } else { av[i] };
                let y = if bv.len() == 1 { bv[0] } else { bv[i] };
                f(x, y)
            })
            .collect()
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x + y);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; one side may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x * y);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| v * s).collect(),
        };
        self.push(value, Op::Scale(a, s), &[a])
    }

    fn map_unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(a);
        Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, T::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Concatenates two matrices along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims("concat", a)?;
        let (rb, cb) = self.matrix_dims("concat", b)?;
        if ra != rb {
            return Err(Error::dim("concat", format!("row counts {ra} and {rb} differ")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Adds a bias vector `[C]` to every row of `x: [T×C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("add_bias", x)?;
        if self.shape(b) != [cols] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {} for {cols} columns", shape_str(self.shape(b))),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (d, &bb) in data[r * cols..(r + 1) * cols].iter_mut().zip(&bv) {
                *d = *d + bb;
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    /// Causal 1-D convolution over time.
    ///
    /// `x: [T×C_in]`, `w: [K×C_in×C_out]`, `b: [C_out]`. The input is
    /// left-padded with `K−1` zero frames, so `y[t]` reads `x[t−K+1..=t]`;
    /// kernel tap `K−1` multiplies the current frame.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t_len, c_in) = self.matrix_dims("conv1d_causal", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] == 0 {
            return Err(Error::dim("conv1d_causal", format!("kernel shape {}", shape_str(&ws))));
        }
        let (k, wc_in, c_out) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(Error::dim(
                "conv1d_causal",
                format!("input has {c_in} channels, kernel expects {wc_in}"),
            ));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::dim(
                "conv1d_causal",
                format!("bias {} for {c_out} output channels", shape_str(self.shape(b))),
            ));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); t_len * c_out];
        for t in 0..t_len {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            orow.copy_from_slice(bv);
            for tap in 0..k {
                // padded index t + tap maps to x[t + tap - (k - 1)]
                let Some(src) = (t + tap).checked_sub(k - 1) else {
                    continue;
                };
                let xrow = &xv[src * c_in..(src + 1) * c_in];
                for (i, &xi) in xrow.iter().enumerate() {
                    let wrow = &wv[(tap * c_in + i) * c_out..(tap * c_in + i + 1) * c_out];
                    for (o, &wo) in orow.iter_mut().zip(wrow) {
                        *o = *o + xi * wo;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_len, c_out], out)?;
        Ok(self.push(value, Op::Conv1dCausal { x, w, b }, &[x, w, b]))
    }

    /// Gated linear unit: splits the last axis into `[a; g]` and returns
    /// `a ⊙ sigmoid(g)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("glu", x)?;
        if cols % 2 != 0 {
            return Err(Error::dim("glu", format!("odd channel count {cols}")));
        }
        let h = cols / 2;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows * h);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            for c in 0..h {
                data.push(row[c] * sigmoid(row[h + c]));
            }
        }
        let value = Tensor::new(vec![rows, h], data)?;
        Ok(self.push(value, Op::Glu(x), &[x]))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.numel());
        for r in 0..src.rows() {
            data.extend(softmax_row(src.row(r)));
        }
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood over unmasked positions.
    ///
    /// `logits: [T×V]`; `targets` and `mask` have length `T`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims("cross_entropy_masked", logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim(
                "cross_entropy_masked",
                format!(
                    "{rows} rows but {} targets and {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::Degenerate("cross entropy with an empty mask".into()));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .find(|&&t| t >= vocab)
        {
            return Err(Error::Range { index: bad, len: vocab });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = lv.row(r);
            let lse = super::log_sum_exp(row);
            total = total + (lse - row[targets[r]]);
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let denom = T::from_f64(active as f64);
        let value = Tensor::scalar(total / denom);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            denom,
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Row lookup `table[ids[t]]`, i.e. an embedding layer.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, cols) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no indices"));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= n {
                return Err(Error::Range { index: id, len: n });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Repeats a `[1×C]` row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, cols) = self.matrix_dims("repeat_rows", x)?;
        if r != 1 || n == 0 {
            return Err(Error::dim("repeat_rows", format!("{r} rows repeated {n} times")));
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let value = Tensor::new(vec![n, cols], data)?;
        Ok(self.push(value, Op::RepeatRows(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + len),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("stack_rows", "nothing to stack"));
        };
        let (_, cols) = self.matrix_dims("stack_rows", first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("stack_rows", p)?;
            if c != cols {
                return Err(Error::dim("stack_rows", format!("{c} columns, expected {cols}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(x), &[x])
    }

    /// Inverted dropout with an explicit keep mask (already scaled by `1/(1−p)`).
    pub fn dropout(&mut self, x: Var, keep: Vec<T>) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::dim("dropout", "mask length differs from input"));
        }
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect(),
        };
        Ok(self.push(value, Op::Dropout { x, keep }, &[x]))
    }

    /// Back-propagates from a scalar `loss`, populating the gradient of
    /// every node that depends on a parameter.
    ///
    /// A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss does not depend on any parameter".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.grad = Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                });
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Accumulator for input `v`, or None when it needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for (&g, &bb) in grow.iter().zip(brow) {
                                s = s + g * bb;
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (o, &g) in gbrow.iter_mut().zip(grow) {
                                *o = *o + aip * g;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + gy[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = acc!(v) {
                        accumulate_broadcast(g, gy, |_| T::one());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                if let Some(g) = acc!(*a) {
                    accumulate_broadcast(g, gy, |i| pick(bv, i));
                }
                if let Some(g) = acc!(*b) {
                    accumulate_broadcast(g, gy, |i| pick(av, i));
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = acc!(*a) {
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o = *o + d * *s;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(g) = acc!(*a) {
                    for ((o, &d), &yy) in g.iter_mut().zip(gy).zip(y) {
                        *o = *o + d * yy * (T::one() - yy);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(g) = acc!(*a) {
                    for ((o, &d), &yy) in g.iter_mut().zip(gy).zip(y) {
                        *o = *o + d * (T::one() - yy * yy);
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let rows = self.shape(*a)[0];
                if let Some(g) = acc!(*a) {
                    for r in 0..rows {
                        for c in 0..ca {
                            g[r * ca + c] = g[r * ca + c] + gy[r * (ca + cb) + c];
                        }
                    }
                }
                if let Some(g) = acc!(*b) {
                    for r in 0..rows {
                        for c in 0..cb {
                            g[r * cb + c] = g[r * cb + c] + gy[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let cols = self.shape(*b)[0];
                if let Some(g) = acc!(*x) {
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o = *o + d;
                    }
                }
                if let Some(g) = acc!(*b) {
                    for row in gy.chunks(cols) {
                        for (o, &d) in g.iter_mut().zip(row) {
                            *o = *o + d;
                        }
                    }
                }
            }
            Op::Conv1dCausal { x, w, b } => {
                let (t_len, c_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (k, c_out) = (self.shape(*w)[0], self.shape(*w)[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(gb) = acc!(*b) {
                    for row in gy.chunks(c_out) {
                        for (o, &d) in gb.iter_mut().zip(row) {
                            *o = *o + d;
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for t in 0..t_len {
                        let grow = &gy[t * c_out..(t + 1) * c_out];
                        for tap in 0..k {
                            let Some(src) = (t + tap).checked_sub(k - 1) else {
                                continue;
                            };
                            for i in 0..c_in {
                                let xi = xv[src * c_in + i];
                                let base = (tap * c_in + i) * c_out;
                                for (o, &d) in gw[base..base + c_out].iter_mut().zip(grow) {
                                    *o = *o + xi * d;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    for t in 0..t_len {
                        let grow = &gy[t * c_out..(t + 1) * c_out];
                        for tap in 0..k {
                            let Some(src) = (t + tap).checked_sub(k - 1) else {
                                continue;
                            };
                            for i in 0..c_in {
                                let base = (tap * c_in + i) * c_out;
                                let mut s = T::zero();
                                for (&wo, &d) in wv[base..base + c_out].iter().zip(grow) {
                                    s = s + wo * d;
                                }
                                gx[src * c_in + i] = gx[src * c_in + i] + s;
                            }
                        }
                    }
                }
            }
            Op::Glu(x) => {
                let cols = self.shape(*x)[1];
                let h = cols / 2;
                let xv = self.value(*x).data();
                if let Some(g) = acc!(*x) {
                    for r in 0..xv.len() / cols {
                        for c in 0..h {
                            let a = xv[r * cols + c];
                            let s = sigmoid(xv[r * cols + h + c]);
                            let d = gy[r * h + c];
                            g[r * cols + c] = g[r * cols + c] + d * s;
                            g[r * cols + h + c] = g[r * cols + h + c] + d * a * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.last_dim();
                let y = node.value.data();
                if let Some(g) = acc!(*x) {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gy[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for (&a, &b) in yr.iter().zip(gr) {
                            dot = dot + a * b;
                        }
                        for c in 0..cols {
                            g[r * cols + c] = g[r * cols + c] + yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                denom,
            } => {
                let vocab = self.shape(*logits)[1];
                let scale = gy[0] / *denom;
                if let Some(g) = acc!(*logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..vocab {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            let i = r * vocab + c;
                            g[i] = g[i] + scale * (probs[i] - onehot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.shape(*table)[1];
                if let Some(g) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            g[id * cols + c] = g[id * cols + c] + gy[r * cols + c];
                        }
                    }
                }
            }
            Op::RepeatRows(x) => {
                let cols = self.shape(*x)[1];
                if let Some(g) = acc!(*x) {
                    for row in gy.chunks(cols) {
                        for (o, &d) in g.iter_mut().zip(row) {
                            *o = *o + d;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let len = node.value.last_dim();
                if let Some(g) = acc!(*x) {
                    for (r, row) in gy.chunks(len).enumerate() {
                        for (c, &d) in row.iter().enumerate() {
                            let i = r * cols + start + c;
                            g[i] = g[i] + d;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.shape(*x)[1];
                if let Some(g) = acc!(*x) {
                    let off = start * cols;
                    for (i, &d) in gy.iter().enumerate() {
                        g[off + i] = g[off + i] + d;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(g) = acc!(p) {
                        for (o, &d) in g.iter_mut().zip(&gy[off..off + n]) {
                            *o = *o + d;
                        }
                    }
                    off += n;
                }
            }
            Op::Sum(x) => {
                if let Some(g) = acc!(*x) {
                    for o in g.iter_mut() {
                        *o = *o + gy[0];
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(g) = acc!(*x) {
                    for ((o, &d), &k) in g.iter_mut().zip(gy).zip(keep) {
                        *o = *o + d * k;
                    }
                }
            }
        }
    }
}

/// Adds `gy[i] * factor(i)` into `g`, summing everything when `g` is the
/// scalar side of a broadcast.
fn accumulate_broadcast<T: Element>(g: &mut [T], gy: &[T], factor: impl Fn(usize) -> T) {
    if g.len() == gy.len() {
        for (i, (o, &d)) in g.iter_mut().zip(gy).enumerate() {
            *o = *o + d * factor(i);
        }
    } else {
        let mut s = T::zero();
        for (i, &d) in gy.iter().enumerate() {
            s = s + d * factor(i);
        }
        g[0] = g[0] + s;
    }
}

pub(crate) fn softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let mut total = T::zero();
    for &e in &exps {
        total = total + e;
    }
    exps.into_iter().map(|e| e / total).collect()
}
