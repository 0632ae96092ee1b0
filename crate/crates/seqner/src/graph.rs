//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only tape of operations; [`Var`] is an index
//! into it. The graph is rebuilt for every forward pass. `backward`
//! traverses nodes in exact reverse append order and accumulates (never
//! overwrites) gradient contributions; calling it repeatedly without a
//! reset keeps accumulating, so the gradient of a sum of losses equals
//! the sum of the separate passes.
//!
//! Every operation validates its output for NaN/Inf and fails fast:
//! silent non-finite propagation is the hardest bug class in a hand-built
//! training loop.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    AddScalar { x: Var },
    RsubScalar { x: Var },
    Scale { x: Var, c: f64 },
    PowConst { x: Var, e: f64 },
    Log { x: Var },
    Exp { x: Var },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    NormalizeRows { x: Var, eps: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    GatherCells { x: Var, cols: Vec<usize> },
    RepeatRowsInterleave { x: Var, k: usize },
    TileRows { x: Var, k: usize },
    Conv2dSame { x: Var, kernel: Var },
    MaxPoolAxis0 { x: Var },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Append-only operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(data: &[f64], op: &'static str) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf. Gradients are only retained for leaves
    /// (and nodes derived from them) with `requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> Var {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(id)
    }

    /// Inserts a non-trainable constant.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].tensor.numel(), 1);
        self.nodes[v.0].tensor.data[0]
    }

    /// Accumulated gradient, if this node required one and `backward` ran.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        op_name: &'static str,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        check_finite(&data, op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                grad: None,
                requires_grad,
            },
            op,
        });
        Ok(Var(id))
    }

    fn shapes2(&self, a: Var, b: Var) -> (Vec<usize>, Vec<usize>) {
        (
            self.nodes[a.0].tensor.shape.clone(),
            self.nodes[b.0].tensor.shape.clone(),
        )
    }

    // ── binary elementwise ──────────────────────────────────────────

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = self.shapes2(a, b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .tensor
            .data
            .iter()
            .zip(&self.nodes[b.0].tensor.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(sa, data, op, op_name, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    // ── broadcasting against a row vector ───────────────────────────

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (sx, sr) = self.shapes2(x, row);
        let cols = *sx.last().unwrap_or(&0);
        let row_len: usize = sr.iter().product();
        if row_len != cols {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sx,
                rhs: sr,
            });
        }
        let rdata = &self.nodes[row.0].tensor.data;
        let data: Vec<f64> = self.nodes[x.0]
            .tensor
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, rdata[i % cols]))
            .collect();
        self.push(sx, data, op, op_name, &[x, row])
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow { x, row })
    }

    /// Multiplies every row of `x` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow { x, row })
    }

    // ── scalar broadcast ────────────────────────────────────────────

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|&v| v + c).collect();
        self.push(shape, data, Op::AddScalar { x }, "add_scalar", &[x])
    }

    /// `c - x` elementwise.
    pub fn rsub_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|&v| c - v).collect();
        self.push(shape, data, Op::RsubScalar { x }, "rsub_scalar", &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        self.push(shape, data, Op::Scale { x, c }, "scale", &[x])
    }

    pub fn div_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        if c == 0.0 {
            return Err(TensorError::Invalid("division by zero scalar".into()));
        }
        self.scale(x, 1.0 / c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.scale(x, -1.0)
    }

    // ── unary elementwise ───────────────────────────────────────────

    fn unary(
        &mut self,
        x: Var,
        op_name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(shape, data, op, op_name, &[x])
    }

    pub fn pow_const(&mut self, x: Var, e: f64) -> Result<Var, TensorError> {
        self.unary(x, "pow_const", |v| v.powf(e), Op::PowConst { x, e })
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "log", |v| v.ln(), Op::Log { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu { x })
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = self.shapes2(a, b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(
            &self.nodes[a.0].tensor.data,
            &self.nodes[b.0].tensor.data,
            m,
            k,
            n,
        );
        self.push(vec![m, n], data, Op::Matmul { a, b }, "matmul", &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects 2-D, got {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[x.0].tensor.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(vec![n, m], data, Op::Transpose { x }, "transpose", &[x])
    }

    // ── softmax and normalization ───────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let src = &self.nodes[x.0].tensor.data;
        let mut data = vec![0.0; src.len()];
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(src[base + a * inner]);
                }
                let mut sum = 0.0;
                for a in 0..axis_len {
                    let e = (src[base + a * inner] - max).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    data[base + a * inner] /= sum;
                }
            }
        }
        self.push(shape, data, Op::Softmax { x, axis }, "softmax", &[x])
    }

    /// Per-row layer normalization without affine parameters:
    /// `(x - mu) / (sigma + eps)` with population sigma over the last axis.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            TensorError::Invalid("normalize_rows expects at least one axis".into())
        })?;
        let src = &self.nodes[x.0].tensor.data;
        let mut data = vec![0.0; src.len()];
        for (r, row) in src.chunks(d).enumerate() {
            let (mu, sigma) = crate::tensor::layer_norm_stats(row);
            let inv = 1.0 / (sigma + eps);
            for (j, &v) in row.iter().enumerate() {
                data[r * d + j] = (v - mu) * inv;
            }
        }
        self.push(
            shape,
            data,
            Op::NormalizeRows { x, eps },
            "normalize_rows",
            &[x],
        )
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let src = &self.nodes[p.0].tensor.data;
            for o in 0..outer {
                let dst = o * out_stride + offset * inner;
                let from = o * s_axis * inner;
                data[dst..dst + s_axis * inner]
                    .copy_from_slice(&src[from..from + s_axis * inner]);
            }
            offset += s_axis;
        }
        self.push(
            out_shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(TensorError::Invalid(format!(
                "slice_rows [{start}, {start}+{len}) out of range for shape {s:?}"
            )));
        }
        let cols = s[1];
        let data = self.nodes[x.0].tensor.data[start * cols..(start + len) * cols].to_vec();
        self.push(
            vec![len, cols],
            data,
            Op::SliceRows { x, start },
            "slice_rows",
            &[x],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::Invalid(format!(
                "slice_cols [{start}, {start}+{len}) out of range for shape {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.nodes[x.0].tensor.data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        self.push(
            vec![rows, len],
            data,
            Op::SliceCols { x, start },
            "slice_cols",
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].tensor.numel() {
            return Err(TensorError::Invalid(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                new_shape
            )));
        }
        let data = self.nodes[x.0].tensor.data.clone();
        self.push(new_shape, data, Op::Reshape { x }, "reshape", &[x])
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f64 = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, "sum", &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.nodes[x.0].tensor.numel() as f64;
        let s: f64 = self.data(x).iter().sum();
        self.push(vec![1], vec![s / n], Op::Mean { x }, "mean", &[x])
    }

    // ── indexing ────────────────────────────────────────────────────

    /// Looks up rows of a 2-D table (embedding lookup). Ids may repeat.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "gather_rows expects 2-D table, got {s:?}"
            )));
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Invalid(format!(
                "gather_rows id {bad} out of range for {} rows",
                s[0]
            )));
        }
        let cols = s[1];
        let src = &self.nodes[table.0].tensor.data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.push(
            vec![ids.len(), cols],
            data,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            "gather_rows",
            &[table],
        )
    }

    /// Picks one element per row of a 2-D tensor: `out[i] = x[i, cols[i]]`.
    pub fn gather_cells(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || cols.len() != s[0] {
            return Err(TensorError::Invalid(format!(
                "gather_cells needs one column per row: shape {s:?}, {} cols",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= s[1]) {
            return Err(TensorError::Invalid(format!(
                "gather_cells column {bad} out of range for {} columns",
                s[1]
            )));
        }
        let n_cols = s[1];
        let src = &self.nodes[x.0].tensor.data;
        let data: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| src[i * n_cols + c])
            .collect();
        self.push(
            vec![cols.len()],
            data,
            Op::GatherCells {
                x,
                cols: cols.to_vec(),
            },
            "gather_cells",
            &[x],
        )
    }

    /// Repeats each row `k` times consecutively: row order i0 i0 .. i1 i1 ..
    pub fn repeat_rows_interleave(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || k == 0 {
            return Err(TensorError::Invalid(format!(
                "repeat_rows_interleave expects 2-D and k > 0, got {s:?} k={k}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let src = &self.nodes[x.0].tensor.data;
        let mut data = Vec::with_capacity(n * k * d);
        for i in 0..n {
            for _ in 0..k {
                data.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        self.push(
            vec![n * k, d],
            data,
            Op::RepeatRowsInterleave { x, k },
            "repeat_rows_interleave",
            &[x],
        )
    }

    /// Stacks the whole matrix `k` times: row order i0 i1 .. i0 i1 ..
    pub fn tile_rows(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || k == 0 {
            return Err(TensorError::Invalid(format!(
                "tile_rows expects 2-D and k > 0, got {s:?} k={k}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let src = &self.nodes[x.0].tensor.data;
        let mut data = Vec::with_capacity(n * k * d);
        for _ in 0..k {
            data.extend_from_slice(src);
        }
        self.push(
            vec![n * k, d],
            data,
            Op::TileRows { x, k },
            "tile_rows",
            &[x],
        )
    }

    // ── grid ops for the relation feature path ──────────────────────

    /// Same-padded 2-D cross-correlation over an `[n, n, c_in]` grid with an
    /// `[k, k, c_in, c_out]` kernel; kernel size must be odd.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || xs[0] != xs[1] {
            return Err(TensorError::Invalid(format!(
                "conv2d_same expects [n, n, c_in] input, got {xs:?}"
            )));
        }
        if ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_same",
                lhs: xs,
                rhs: ks,
            });
        }
        if ks[0] % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d_same kernel size must be odd, got {}",
                ks[0]
            )));
        }
        let (n, ci, k, co) = (xs[0], xs[2], ks[0], ks[3]);
        let data = conv2d_same_raw(
            &self.nodes[x.0].tensor.data,
            &self.nodes[kernel.0].tensor.data,
            n,
            ci,
            k,
            co,
        );
        self.push(
            vec![n, n, co],
            data,
            Op::Conv2dSame { x, kernel },
            "conv2d_same",
            &[x, kernel],
        )
    }

    /// Max over the first grid axis: `[n, m, c] -> [m, c]`. Ties resolve to
    /// the lowest row index, which keeps backward deterministic.
    pub fn max_pool_axis0(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Invalid(format!(
                "max_pool_axis0 expects 3-D grid, got {s:?}"
            )));
        }
        let (n, m, c) = (s[0], s[1], s[2]);
        let src = &self.nodes[x.0].tensor.data;
        let mut data = vec![f64::NEG_INFINITY; m * c];
        for i in 0..n {
            for j in 0..m {
                for ch in 0..c {
                    let v = src[(i * m + j) * c + ch];
                    if v > data[j * c + ch] {
                        data[j * c + ch] = v;
                    }
                }
            }
        }
        self.push(
            vec![m, c],
            data,
            Op::MaxPoolAxis0 { x },
            "max_pool_axis0",
            &[x],
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients are summed into the
    /// `grad` buffers of every node that requires one; repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Scratch gradients for this pass only; persisted at the end so
        // that two backward calls equal one backward of the summed loss.
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(grad) = scratch[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut scratch);
            let node = &mut self.nodes[id];
            if node.tensor.requires_grad {
                let buf = node
                    .tensor
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.tensor.data.len()]);
                for (g, s) in buf.iter_mut().zip(&grad) {
                    *g += s;
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn propagate(&self, id: usize, grad: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let add_to = |scratch: &mut [Option<Vec<f64>>],
                      nodes: &[Node],
                      v: Var,
                      f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tensor.requires_grad {
                return;
            }
            let buf = scratch[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].tensor.numel()]);
            f(buf);
        };
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (nodes[a.0].tensor.shape[0], nodes[a.0].tensor.shape[1]);
                let n = nodes[b.0].tensor.shape[1];
                let a_data = &nodes[a.0].tensor.data;
                let b_data = &nodes[b.0].tensor.data;
                add_to(scratch, nodes, *a, &mut |buf| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grad[i * n + j] * b_data[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                add_to(scratch, nodes, *b, &mut |buf| {
                    // dB = Aᵀ · dC
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += a_data[i * k + p] * grad[i * n + j];
                            }
                            buf[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (n, m) = (nodes[id].tensor.shape[0], nodes[id].tensor.shape[1]);
                add_to(scratch, nodes, *x, &mut |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j * n + i] += grad[i * m + j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                add_to(scratch, nodes, *a, &mut |buf| {
                    for (g, &u) in buf.iter_mut().zip(grad) {
                        *g += u;
                    }
                });
                add_to(scratch, nodes, *b, &mut |buf| {
                    for (g, &u) in buf.iter_mut().zip(grad) {
                        *g += u;
                    }
                });
            }
            Op::Sub { a, b } => {
                add_to(scratch, nodes, *a, &mut |buf| {
                    for (g, &u) in buf.iter_mut().zip(grad) {
                        *g += u;
                    }
                });
                add_to(scratch, nodes, *b, &mut |buf| {
                    for (g, &u) in buf.iter_mut().zip(grad) {
                        *g -= u;
                    }
                });
            }
            Op::Mul { a, b } => {
                let a_data = &nodes[a.0].tensor.data;
                let b_data = &nodes[b.0].tensor.data;
                add_to(scratch, nodes, *a, &mut |buf| {
                    for i in 0..grad.len() {
                        buf[i] += grad[i] * b_data[i];
                    }
                });
                add_to(scratch, nodes, *b, &mut |buf| {
                    for i in 0..grad.len() {
                        buf[i] += grad[i] * a_data[i];
                    }
                });
            }
            Op::AddRow { x, row } => {
                let cols = nodes[row.0].tensor.numel();
                add_to(scratch, nodes, *x, &mut |buf| {
                    for (g, &u) in buf.iter_mut().zip(grad) {
                        *g += u;
                    }
                });
                add_to(scratch, nodes, *row, &mut |buf| {
                    for (i, &u) in grad.iter().enumerate() {
                        buf[i % cols] += u;
                    }
                });
            }
            Op::MulRow { x, row } => {
                let cols = nodes[row.0].tensor.numel();
                let x_data = &nodes[x.0].tensor.data;
                let r_data = &nodes[row.0].tensor.data;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for i in 0..grad.len() {
                        buf[i] += grad[i] * r_data[i % cols];
                    }
                });
                add_to(scratch, nodes, *row, &mut |buf| {
                    for i in 0..grad.len() {
                        buf[i % cols] += grad[i] * x_data[i];
                    }
                });
            }
            Op::AddScalar { x } => add_to(scratch, nodes, *x, &mut |buf| {
                for (g, &u) in buf.iter_mut().zip(grad) {
                    *g += u;
                }
            }),
            Op::RsubScalar { x } => add_to(scratch, nodes, *x, &mut |buf| {
                for (g, &u) in buf.iter_mut().zip(grad) {
                    *g -= u;
                }
            }),
            Op::Scale { x, c } => {
                let c = *c;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for (g, &u) in buf.iter_mut().zip(grad) {
                        *g += c * u;
                    }
                });
            }
            Op::PowConst { x, e } => {
                let e = *e;
                let x_data = &nodes[x.0].tensor.data;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for i in 0..grad.len() {
                        // Subgradient 0 at the x=0, e<1 kink avoids inf.
                        let d = if e == 0.0 {
                            0.0
                        } else if x_data[i] == 0.0 && e < 1.0 {
                            0.0
                        } else {
                            e * x_data[i].powf(e - 1.0)
                        };
                        buf[i] += grad[i] * d;
                    }
                });
            }
            Op::Log { x } => {
                let x_data = &nodes[x.0].tensor.data;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for i in 0..grad.len() {
                        buf[i] += grad[i] / x_data[i];
                    }
                });
            }
            Op::Exp { x } => {
                let out = &nodes[id].tensor.data;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for i in 0..grad.len() {
                        buf[i] += grad[i] * out[i];
                    }
                });
            }
            Op::Relu { x } => {
                let x_data = &nodes[x.0].tensor.data;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for i in 0..grad.len() {
                        if x_data[i] > 0.0 {
                            buf[i] += grad[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let out = &nodes[id].tensor.data;
                let shape = &nodes[id].tensor.shape;
                let axis_len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                add_to(scratch, nodes, *x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * axis_len * inner + i;
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                let f = base + a * inner;
                                dot += grad[f] * out[f];
                            }
                            for a in 0..axis_len {
                                let f = base + a * inner;
                                buf[f] += out[f] * (grad[f] - dot);
                            }
                        }
                    }
                });
            }
            Op::NormalizeRows { x, eps } => {
                let x_data = &nodes[x.0].tensor.data;
                let d = *nodes[x.0].tensor.shape.last().unwrap();
                let eps = *eps;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for (r, row) in x_data.chunks(d).enumerate() {
                        let (mu, sigma) = crate::tensor::layer_norm_stats(row);
                        let inv = 1.0 / (sigma + eps);
                        let g = &grad[r * d..(r + 1) * d];
                        let s1: f64 = g.iter().sum();
                        let s2: f64 = g
                            .iter()
                            .zip(row)
                            .map(|(&gv, &xv)| gv * (xv - mu) * inv)
                            .sum();
                        let df = d as f64;
                        for jj in 0..d {
                            // dsigma/dx vanishes at sigma = 0 (constant row).
                            let sig_term = if sigma > 0.0 {
                                (row[jj] - mu) / (df * sigma) * s2 * inv
                            } else {
                                0.0
                            };
                            buf[r * d + jj] += inv * (g[jj] - s1 / df) - sig_term;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = &nodes[id].tensor.shape;
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let s_axis = nodes[p.0].tensor.shape[*axis];
                    add_to(scratch, nodes, p, &mut |buf| {
                        for o in 0..outer {
                            let from = o * out_stride + offset * inner;
                            let dst = o * s_axis * inner;
                            for t in 0..s_axis * inner {
                                buf[dst + t] += grad[from + t];
                            }
                        }
                    });
                    offset += s_axis;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = nodes[x.0].tensor.shape[1];
                let from = start * cols;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for (t, &u) in grad.iter().enumerate() {
                        buf[from + t] += u;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].tensor.shape[1];
                let len = nodes[id].tensor.shape[1];
                add_to(scratch, nodes, *x, &mut |buf| {
                    for r in 0..nodes[id].tensor.shape[0] {
                        for j in 0..len {
                            buf[r * cols + start + j] += grad[r * len + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => add_to(scratch, nodes, *x, &mut |buf| {
                for (g, &u) in buf.iter_mut().zip(grad) {
                    *g += u;
                }
            }),
            Op::Sum { x } => add_to(scratch, nodes, *x, &mut |buf| {
                for g in buf.iter_mut() {
                    *g += grad[0];
                }
            }),
            Op::Mean { x } => {
                let n = nodes[x.0].tensor.numel() as f64;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for g in buf.iter_mut() {
                        *g += grad[0] / n;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let cols = nodes[table.0].tensor.shape[1];
                add_to(scratch, nodes, *table, &mut |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..cols {
                            buf[i * cols + j] += grad[r * cols + j];
                        }
                    }
                });
            }
            Op::GatherCells { x, cols } => {
                let n_cols = nodes[x.0].tensor.shape[1];
                add_to(scratch, nodes, *x, &mut |buf| {
                    for (i, &c) in cols.iter().enumerate() {
                        buf[i * n_cols + c] += grad[i];
                    }
                });
            }
            Op::RepeatRowsInterleave { x, k } => {
                let d = nodes[x.0].tensor.shape[1];
                let k = *k;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for i in 0..nodes[x.0].tensor.shape[0] {
                        for t in 0..k {
                            let from = (i * k + t) * d;
                            for j in 0..d {
                                buf[i * d + j] += grad[from + j];
                            }
                        }
                    }
                });
            }
            Op::TileRows { x, k } => {
                let n = nodes[x.0].tensor.shape[0];
                let d = nodes[x.0].tensor.shape[1];
                let k = *k;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for t in 0..k {
                        for i in 0..n {
                            let from = (t * n + i) * d;
                            for j in 0..d {
                                buf[i * d + j] += grad[from + j];
                            }
                        }
                    }
                });
            }
            Op::Conv2dSame { x, kernel } => {
                let n = nodes[x.0].tensor.shape[0];
                let ci = nodes[x.0].tensor.shape[2];
                let k = nodes[kernel.0].tensor.shape[0];
                let co = nodes[kernel.0].tensor.shape[3];
                let r = k / 2;
                let x_data = &nodes[x.0].tensor.data;
                let k_data = &nodes[kernel.0].tensor.data;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for y in 0..n {
                        for xx in 0..n {
                            for o in 0..co {
                                let g = grad[(y * n + xx) * co + o];
                                if g == 0.0 {
                                    continue;
                                }
                                for dy in 0..k {
                                    let sy = y as isize + dy as isize - r as isize;
                                    if sy < 0 || sy >= n as isize {
                                        continue;
                                    }
                                    for dx in 0..k {
                                        let sx = xx as isize + dx as isize - r as isize;
                                        if sx < 0 || sx >= n as isize {
                                            continue;
                                        }
                                        let src = (sy as usize * n + sx as usize) * ci;
                                        let kb = ((dy * k + dx) * ci) * co + o;
                                        for i in 0..ci {
                                            buf[src + i] += g * k_data[kb + i * co];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                add_to(scratch, nodes, *kernel, &mut |buf| {
                    for y in 0..n {
                        for xx in 0..n {
                            for o in 0..co {
                                let g = grad[(y * n + xx) * co + o];
                                if g == 0.0 {
                                    continue;
                                }
                                for dy in 0..k {
                                    let sy = y as isize + dy as isize - r as isize;
                                    if sy < 0 || sy >= n as isize {
                                        continue;
                                    }
                                    for dx in 0..k {
                                        let sx = xx as isize + dx as isize - r as isize;
                                        if sx < 0 || sx >= n as isize {
                                            continue;
                                        }
                                        let src = (sy as usize * n + sx as usize) * ci;
                                        let kb = ((dy * k + dx) * ci) * co + o;
                                        for i in 0..ci {
                                            buf[kb + i * co] += g * x_data[src + i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPoolAxis0 { x } => {
                let s = &nodes[x.0].tensor.shape;
                let (n, m, c) = (s[0], s[1], s[2]);
                let src = &nodes[x.0].tensor.data;
                add_to(scratch, nodes, *x, &mut |buf| {
                    for j in 0..m {
                        for ch in 0..c {
                            let mut best = 0usize;
                            let mut best_v = f64::NEG_INFINITY;
                            for i in 0..n {
                                let v = src[(i * m + j) * c + ch];
                                if v > best_v {
                                    best_v = v;
                                    best = i;
                                }
                            }
                            buf[(best * m + j) * c + ch] += grad[j * c + ch];
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
    c
}

fn conv2d_same_raw(x: &[f64], kernel: &[f64], n: usize, ci: usize, k: usize, co: usize) -> Vec<f64> {
    let r = k / 2;
    let mut out = vec![0.0; n * n * co];
    for y in 0..n {
        for xx in 0..n {
            for dy in 0..k {
                let sy = y as isize + dy as isize - r as isize;
                if sy < 0 || sy >= n as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - r as isize;
                    if sx < 0 || sx >= n as isize {
                        continue;
                    }
                    let src = (sy as usize * n + sx as usize) * ci;
                    let out_base = (y * n + xx) * co;
                    let k_base = (dy * k + dx) * ci * co;
                    for i in 0..ci {
                        let xv = x[src + i];
                        if xv == 0.0 {
                            continue;
                        }
                        let k_row = &kernel[k_base + i * co..k_base + (i + 1) * co];
                        for o in 0..co {
                            out[out_base + o] += xv * k_row[o];
                        }
                    }
                }
            }
        }
    }
    out
}
