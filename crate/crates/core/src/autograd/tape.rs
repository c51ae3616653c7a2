//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! exact reverse order and accumulates partials additively.

use super::kernels::{self, ConvGeom, Mat};
use super::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ToCells {
        x: Var,
        batch: usize,
        channels: usize,
        cells: usize,
    },
    AddGrouped {
        a: Var,
        s: Var,
        group: usize,
    },
    RowSelect {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    AttentionPool {
        alpha: Var,
        cells: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        divisor: f64,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of executed ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::dim(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        )),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

/// Splits a conv/pool input shape into `(batch, channels, h, w)`.
fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::dim(
            op,
            format!("expected C×H×W or N×C×H×W, got {:?}", shape),
        )),
    }
}

fn with_spatial(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![shape[0], c, h, w]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (a parameter or a gradient-checked input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner dimensions differ: {m}×{k} · {k2}×{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            Mat::row_major(self.value(a).data(), m, k),
            Mat::row_major(self.value(b).data(), k, n),
            &mut out,
            n,
            0.0,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul", &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Add(a, b), "add", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Scale(a, factor), "scale", &[a])
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "add_row_bias")?;
        if self.shape(bias) != [n] {
            return Err(TensorError::dim(
                "add_row_bias",
                format!("bias {:?} for {m}×{n} input", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        self.push(value, Op::AddRowBias(x, bias), "add_row_bias", &[x, bias])
    }

    /// Adds a per-channel bias to a `C×H×W` or `N×C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = image_dims(self.shape(x), "add_channel_bias")?;
        if self.shape(bias) != [c] {
            return Err(TensorError::dim(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (i, plane) in data.chunks_exact_mut(h * w).enumerate() {
            let bv = b[i % c];
            for v in plane {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::AddChannelBias(x, bias), "add_channel_bias", &[x, bias])
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, op, name, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    /// Columns `start..start+len` of an `m × n` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(TensorError::dim(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for row in src.chunks_exact(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(&[m, len], data)?;
        self.push(value, Op::SliceCols { x, start }, "slice_cols", &[x])
    }

    /// Cross-correlation with zero padding. `input` is `C×H×W` or
    /// `N×C×H×W`; `filters` is `C_out×C_in×kh×kw`.
    pub fn conv2d(&mut self, input: Var, filters: Var, stride: usize, pad: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (batch, c_in, h, w) = image_dims(&in_shape, "conv2d")?;
        let (c_out, fc, kh, kw) = match *self.shape(filters) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("filters must be 4-D, got {s:?}"),
                ))
            }
        };
        if fc != c_in {
            return Err(TensorError::dim(
                "conv2d",
                format!("input has {c_in} channels, filters expect {fc}"),
            ));
        }
        let (out_h, out_w) = conv_extent(h, w, kh, kw, stride, pad)?;
        let geom = ConvGeom {
            in_channels: c_in,
            in_h: h,
            in_w: w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let (k, p) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![0.0; batch * k * p];
        let mut out = vec![0.0; batch * c_out * p];
        {
            let x = self.value(input).data();
            let wdata = self.value(filters).data();
            for n in 0..batch {
                let col = &mut cols[n * k * p..(n + 1) * k * p];
                kernels::im2col(&x[n * c_in * h * w..(n + 1) * c_in * h * w], &geom, col);
                kernels::gemm(
                    Mat::row_major(wdata, c_out, k),
                    Mat::row_major(col, k, p),
                    &mut out[n * c_out * p..(n + 1) * c_out * p],
                    p,
                    0.0,
                );
            }
        }
        let value = Tensor::new(&with_spatial(&in_shape, c_out, out_h, out_w), out)?;
        let op = Op::Conv2d {
            x: input,
            w: filters,
            geom,
            batch,
            cols,
        };
        self.push(value, op, "conv2d", &[input, filters])
    }

    /// Max pooling without padding; output extents use floor division.
    pub fn maxpool2d(
        &mut self,
        input: Var,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (batch, c, h, w) = image_dims(&in_shape, "maxpool2d")?;
        let (out_h, out_w) = pool_extent(h, w, kh, kw, sh, sw)?;
        let planes = batch * c;
        let mut out = vec![0.0; planes * out_h * out_w];
        let mut argmax = vec![0; out.len()];
        kernels::maxpool_forward(
            self.value(input).data(),
            planes,
            (h, w),
            (kh, kw),
            (sh, sw),
            (out_h, out_w),
            &mut out,
            &mut argmax,
        );
        let value = Tensor::new(&with_spatial(&in_shape, c, out_h, out_w), out)?;
        self.push(value, Op::MaxPool { x: input, argmax }, "maxpool2d", &[input])
    }

    /// Rearranges `N×C×H×W` features into an `(N·H·W) × C` matrix of grid
    /// cells, cell `(i, j)` of sample `n` at row `n·H·W + i·W + j`.
    pub fn to_cells(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = image_dims(self.shape(x), "to_cells")?;
        let cells = h * w;
        let src = self.value(x).data();
        let mut data = vec![0.0; batch * cells * c];
        for n in 0..batch {
            for ch in 0..c {
                let plane = &src[(n * c + ch) * cells..(n * c + ch + 1) * cells];
                for (p, v) in plane.iter().enumerate() {
                    data[(n * cells + p) * c + ch] = *v;
                }
            }
        }
        let value = Tensor::new(&[batch * cells, c], data)?;
        let op = Op::ToCells {
            x,
            batch,
            channels: c,
            cells,
        };
        self.push(value, op, "to_cells", &[x])
    }

    /// Adds row `n` of `s` (`N × D`) to rows `n·G .. (n+1)·G` of `a`
    /// (`(N·G) × D`).
    pub fn add_grouped(&mut self, a: Var, s: Var) -> Result<Var> {
        let (rows, d) = matrix_dims(self.value(a), "add_grouped")?;
        let (n, d2) = matrix_dims(self.value(s), "add_grouped")?;
        if d != d2 || n == 0 || rows % n != 0 {
            return Err(TensorError::dim(
                "add_grouped",
                format!("{rows}×{d} grouped by {n}×{d2}"),
            ));
        }
        let group = rows / n;
        let sv = self.value(s).data();
        let mut data = self.value(a).data().to_vec();
        for (r, row) in data.chunks_exact_mut(d).enumerate() {
            let add = &sv[(r / group) * d..(r / group + 1) * d];
            for (v, x) in row.iter_mut().zip(add) {
                *v += x;
            }
        }
        let value = Tensor::new(&[rows, d], data)?;
        self.push(value, Op::AddGrouped { a, s, group }, "add_grouped", &[a, s])
    }

    /// Row `r` of the result is row `r` of `a` when `mask[r]`, else of `b`.
    /// The unselected operand's value never reaches the output.
    pub fn row_select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_select")?;
        let (m, n) = matrix_dims(self.value(a), "row_select")?;
        if mask.len() != m {
            return Err(TensorError::dim(
                "row_select",
                format!("mask of {} for {m} rows", mask.len()),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * n);
        for (r, &pick_a) in mask.iter().enumerate() {
            let src = if pick_a { av } else { bv };
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(&[m, n], data)?;
        let op = Op::RowSelect {
            mask: mask.to_vec(),
            a,
            b,
        };
        self.push(value, op, "row_select", &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape(x), "reshape", &[x])
    }

    /// Softmax along the last axis, computed max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.value(x));
        if n == 0 {
            return Err(TensorError::dim("softmax", "empty rows"));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::SoftmaxRows(x), "softmax", &[x])
    }

    /// `out[n] = Σ_p alpha[n, p] · cells[n·P + p]` for `alpha: N × P` and
    /// `cells: (N·P) × C`.
    pub fn attention_pool(&mut self, alpha: Var, cells: Var) -> Result<Var> {
        let (n, p) = matrix_dims(self.value(alpha), "attention_pool")?;
        let (rows, c) = matrix_dims(self.value(cells), "attention_pool")?;
        if rows != n * p {
            return Err(TensorError::dim(
                "attention_pool",
                format!("alpha {n}×{p} against {rows} cells"),
            ));
        }
        let av = self.value(alpha).data();
        let cv = self.value(cells).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            // 1×P · P×C
            kernels::gemm(
                Mat::row_major(&av[b * p..(b + 1) * p], 1, p),
                Mat::row_major(&cv[b * p * c..(b + 1) * p * c], p, c),
                &mut out[b * c..(b + 1) * c],
                c,
                0.0,
            );
        }
        let value = Tensor::new(&[n, c], out)?;
        self.push(value, Op::AttentionPool { alpha, cells }, "attention_pool", &[alpha, cells])
    }

    /// Gathers rows of `table` (equivalent to one-hot · table).
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = matrix_dims(self.value(table), "embedding")?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[indices.len(), d], data)?;
        let op = Op::Embedding {
            table,
            indices: indices.to_vec(),
        };
        self.push(value, op, "embedding", &[table])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&i| Some(i)).collect();
        self.cross_entropy_sum(logits, &t, targets.len() as f64)
    }

    /// `Σ_rows -log softmax(logits)[target] / divisor`, skipping rows whose
    /// target is `None` (padding).
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        divisor: f64,
    ) -> Result<Var> {
        let (m, v) = matrix_dims(self.value(logits), "cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                extent: v,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, (p, target)) in probs.chunks_exact_mut(v).zip(targets).enumerate() {
            let logits_row = &self.nodes[logits.0].value.data()[row * v..(row + 1) * v];
            if let Some(t) = target {
                total += -log_softmax_at(logits_row, *t);
            }
            softmax_in_place(p);
        }
        let value = Tensor::scalar(total / divisor);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            divisor,
        };
        self.push(value, op, "cross_entropy", &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), "sum", &[x])
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(TensorError::dim(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let seed = Tensor::new(self.shape(output), vec![1.0])?;
        Ok(self.backward_with(output, seed))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(output), "seed shape");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|d| Tensor::new(node.value.shape(), d).expect("gradient shape"))
            })
            .collect();
        Gradients { grads }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(self.value(*a), "matmul").unwrap();
                let n = last_dim(self.value(*b));
                if let Some(da) = self.grad_buf(grads, *a) {
                    // dA += dC · Bᵀ
                    kernels::gemm(
                        Mat::row_major(g, m, n),
                        Mat::transposed(self.value(*b).data(), k, n),
                        da,
                        k,
                        1.0,
                    );
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    // dB += Aᵀ · dC
                    kernels::gemm(
                        Mat::transposed(self.value(*a).data(), m, k),
                        Mat::row_major(g, m, n),
                        db,
                        n,
                        1.0,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * f;
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, g);
                }
                let (_, c, h, w) = image_dims(self.shape(*x), "add_channel_bias").unwrap();
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (i, plane) in g.chunks_exact(h * w).enumerate() {
                        db[i % c] += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = last_dim(self.value(*x));
                let len = last_dim(&node.value);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (row, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                        add_into(&mut row[*start..*start + len], grow);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                batch,
                cols,
            } => {
                let c_out = self.shape(*w)[0];
                let (k, p) = (geom.patch_len(), geom.out_len());
                if let Some(dw) = self.grad_buf(grads, *w) {
                    for n in 0..*batch {
                        // dW += dY_n · cols_nᵀ
                        kernels::gemm(
                            Mat::row_major(&g[n * c_out * p..(n + 1) * c_out * p], c_out, p),
                            Mat::transposed(&cols[n * k * p..(n + 1) * k * p], k, p),
                            dw,
                            k,
                            1.0,
                        );
                    }
                }
                let wdata = self.value(*w).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let img = geom.in_channels * geom.in_h * geom.in_w;
                    let mut dcols = vec![0.0; k * p];
                    for n in 0..*batch {
                        kernels::gemm(
                            Mat::transposed(wdata, c_out, k),
                            Mat::row_major(&g[n * c_out * p..(n + 1) * c_out * p], c_out, p),
                            &mut dcols,
                            p,
                            0.0,
                        );
                        kernels::col2im_add(&dcols, geom, &mut dx[n * img..(n + 1) * img]);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                }
            }
            Op::ToCells {
                x,
                batch,
                channels,
                cells,
            } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let c = *channels;
                    for n in 0..*batch {
                        for ch in 0..c {
                            let plane = &mut dx[(n * c + ch) * cells..(n * c + ch + 1) * cells];
                            for (p, d) in plane.iter_mut().enumerate() {
                                *d += g[(n * cells + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::AddGrouped { a, s, group } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_into(da, g);
                }
                let d = last_dim(&node.value);
                if let Some(ds) = self.grad_buf(grads, *s) {
                    for (r, row) in g.chunks_exact(d).enumerate() {
                        let n = r / group;
                        add_into(&mut ds[n * d..(n + 1) * d], row);
                    }
                }
            }
            Op::RowSelect { mask, a, b } => {
                let n = last_dim(&node.value);
                for (v, pick) in [(*a, true), (*b, false)] {
                    if let Some(dv) = self.grad_buf(grads, v) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == pick {
                                add_into(&mut dv[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = last_dim(&node.value);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::AttentionPool { alpha, cells } => {
                let (n, p) = matrix_dims(self.value(*alpha), "attention_pool").unwrap();
                let c = last_dim(self.value(*cells));
                if let Some(da) = self.grad_buf(grads, *alpha) {
                    let cv = self.value(*cells).data();
                    for b in 0..n {
                        // dα[b] += cells_b (P×C) · dout[b] (C)
                        kernels::gemm(
                            Mat::row_major(&cv[b * p * c..(b + 1) * p * c], p, c),
                            Mat::transposed(&g[b * c..(b + 1) * c], 1, c),
                            &mut da[b * p..(b + 1) * p],
                            1,
                            1.0,
                        );
                    }
                }
                if let Some(dc) = self.grad_buf(grads, *cells) {
                    let av = self.value(*alpha).data();
                    for b in 0..n {
                        // dcells_b += α[b]ᵀ (P×1) · dout[b] (1×C)
                        kernels::gemm(
                            Mat::transposed(&av[b * p..(b + 1) * p], 1, p),
                            Mat::row_major(&g[b * c..(b + 1) * c], 1, c),
                            &mut dc[b * p * c..(b + 1) * p * c],
                            c,
                            1.0,
                        );
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = last_dim(&node.value);
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                divisor,
            } => {
                let v = last_dim(self.value(*logits));
                let scale = g[0] / divisor;
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    for ((drow, prow), t) in dl
                        .chunks_exact_mut(v)
                        .zip(probs.chunks_exact(v))
                        .zip(targets)
                    {
                        let Some(t) = t else { continue };
                        for (j, (d, p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == *t { 1.0 } else { 0.0 };
                            *d += scale * (p - target);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

/// Output extent of a padded convolution; errors when the window does not
/// fit or the stride does not divide the span.
pub fn conv_extent(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(TensorError::dim("conv2d", "zero kernel or stride"));
    }
    let span = |extent: usize, k: usize| -> Result<usize> {
        let padded = extent + 2 * pad;
        if k > padded {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel {k} exceeds padded extent {padded}"),
            ));
        }
        if !(padded - k).is_multiple_of(stride) {
            return Err(TensorError::dim(
                "conv2d",
                format!("non-integral output extent: ({padded} - {k}) / {stride}"),
            ));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((span(h, kh)?, span(w, kw)?))
}

/// Output extent of an unpadded pooling window (floor division).
pub fn pool_extent(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> Result<(usize, usize)> {
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(TensorError::dim("maxpool2d", "zero window or stride"));
    }
    if kh > h || kw > w {
        return Err(TensorError::dim(
            "maxpool2d",
            format!("window {kh}×{kw} larger than input {h}×{w}"),
        ));
    }
    Ok(((h - kh) / sh + 1, (w - kw) / sw + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let col = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let out = tape.matmul(eye, col).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let row = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 1]);
        assert_eq!(tape.value(out).item(), 11.0);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn conv_pointwise_scaling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_averaging_filter_matches_direct_sum() {
        // Identity-like 3×3 input against a 3×3 averaging filter: one output,
        // equal to the mean of the overlap times nine, i.e. the plain sum.
        let input = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3, 3], input.to_vec()).unwrap());
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        let direct: f64 = input.iter().map(|v| v / 9.0).sum();
        assert!((tape.value(y).item() - direct).abs() < 1e-15);
        assert!((tape.value(y).item() * 9.0 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn conv_non_integral_extent_is_error() {
        assert!(conv_extent(6, 6, 3, 3, 2, 0).is_err());
        assert_eq!(conv_extent(7, 7, 3, 3, 2, 0).unwrap(), (3, 3));
        assert!(conv_extent(2, 2, 5, 5, 1, 1).is_err());
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::full(&[1, 4, 4], 7.0));
        let y = tape.maxpool2d(c, (2, 2), (2, 2)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.get(c).unwrap().data();
        // First row-major position of each window gets the full unit.
        let mut expected = vec![0.0; 16];
        for idx in [0, 2, 8, 10] {
            expected[idx] = 1.0;
        }
        assert_eq!(g, expected.as_slice());
    }

    #[test]
    fn maxpool_window_too_large() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(tape.maxpool2d(x, (3, 3), (1, 1)).is_err());
        assert_eq!(pool_extent(7, 7, 2, 2, 2, 2).unwrap(), (3, 3));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && d[1].abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 36]));
        let loss = tape.cross_entropy(logits, &[0, 5, 35]).unwrap();
        assert!((tape.value(loss).item() - 36f64.ln()).abs() < 1e-12);
        assert!((tape.value(loss).item() - 3.5835).abs() < 1e-4);

        let mut data = vec![0.0; 2 * 4];
        data[1] = 100.0;
        data[4 + 3] = 100.0;
        let logits = tape.constant(Tensor::new(&[2, 4], data).unwrap());
        let loss = tape.cross_entropy(logits, &[1, 3]).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[4]),
            Err(TensorError::Index { index: 4, extent: 4, .. })
        ));
    }

    #[test]
    fn padded_rows_do_not_contribute() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::uniform(&[3, 5], 1.0, &mut rand::rng()));
        let loss = tape.cross_entropy_sum(logits, &[Some(1), None, Some(0)], 2.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(logits).unwrap().data()[5..10].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_input_accumulates_partials() {
        // y = sum(x ⊙ x) + sum(3x): x feeds two consumers.
        let x0 = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let a = tape.sum(sq).unwrap();
        let b = tape.sum(lin).unwrap();
        let y = tape.add(a, b).unwrap();
        let g = tape.backward(y).unwrap();

        let single = |build: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let out = build(&mut t, x);
            t.backward(out).unwrap().get(x).unwrap().clone()
        };
        let ga = single(&|t, x| {
            let sq = t.mul(x, x).unwrap();
            t.sum(sq).unwrap()
        });
        let gb = single(&|t, x| {
            let lin = t.scale(x, 3.0).unwrap();
            t.sum(lin).unwrap()
        });
        for ((total, p), q) in g.get(x).unwrap().data().iter().zip(ga.data()).zip(gb.data()) {
            assert_eq!(*total, p + q);
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![f64::MAX]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn row_select_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 2], 1.0));
        let b = tape.leaf(Tensor::full(&[2, 2], 2.0));
        let s = tape.row_select(&[true, false], a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 1.0, 2.0, 2.0]);
        let y = tape.sum(s).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 1.0));
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
