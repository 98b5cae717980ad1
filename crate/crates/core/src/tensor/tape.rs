use rand::Rng;

use super::{gemm, strides, window_output_len, Result, Tensor, TensorError};

/// Batch-norm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each train-mode update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Residual tolerance of the power iteration behind [`Tape::lambda_max`].
pub const LAMBDA_MAX_TOL: f64 = 1e-9;
pub const LAMBDA_MAX_ITERS: usize = 10_000;
/// Eigenvalues below this are treated as an edgeless graph.
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_FALLBACK: f64 = 2.0;
/// Probability floor inside the cross-entropy logarithm.
const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running ones.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy)]
enum Map {
    Relu,
    Sigmoid,
    Abs,
    Square,
    Exp,
    Recip,
    Scale(f64),
    Shift(f64),
}

#[derive(Debug, Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
struct BmmGeom {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Debug)]
struct ConvGeom {
    batch: usize,
    l_in: usize,
    c_in: usize,
    l_out: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Map(Var, Map),
    Binary(Var, Var, Bin),
    /// `out[i] = x[map[i]]`; covers broadcasting, permutation, gathers and
    /// slices.
    Index { x: Var, map: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Bmm { a: Var, b: Var, geom: BmmGeom },
    Softmax(Var),
    CrossEntropy { probs: Var, onehot: Var },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Grl { x: Var, scale: f64 },
    LambdaMax {
        x: Var,
        vecs: Vec<f64>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass and replays them backwards.
///
/// A tape is single-threaded and is meant to be rebuilt for every forward
/// pass; parameters are re-registered as leaves each time.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Resets all accumulated gradients to zero.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Tape::backward`]. Nodes that
    /// require grad but were not reached report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; node.value.numel()],
        };
        Some(Tensor {
            shape: node.value.shape().to_vec(),
            data,
        })
    }

    /// Fails if any value of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, op: &'static str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn map(&mut self, x: Var, kind: Map) -> Var {
        let f = |v: f64| match kind {
            Map::Relu => v.max(0.0),
            Map::Sigmoid => {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            }
            Map::Abs => v.abs(),
            Map::Square => v * v,
            Map::Exp => v.exp(),
            Map::Recip => 1.0 / v,
            Map::Scale(c) => v * c,
            Map::Shift(c) => v + c,
        };
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, rg, Op::Map(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Map::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Map::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Map::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Map::Square)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Map::Exp)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map(x, Map::Recip)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Map::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map(x, Map::Scale(-1.0))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Map::Shift(c))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Bin, name: &'static str) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(shape_err(name, &va.shape, &vb.shape));
        }
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| match kind {
                Bin::Add => x + y,
                Bin::Sub => x - y,
                Bin::Mul => x * y,
                Bin::Div => x / y,
            })
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Binary(a, b, kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Div, "div")
    }

    // ------------------------------------------------------------------
    // Structural
    // ------------------------------------------------------------------

    fn index_op(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = &self.nodes[x.0].value.data;
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        let map = if rg { map } else { Vec::new() };
        self.push(Tensor { shape, data }, rg, Op::Index { x, map })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Expands `x` to `shape`. Shapes are right-aligned; every source
    /// dimension must equal the target one or be 1.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if src.len() > shape.len() {
            return Err(shape_err("broadcast_to", &src, shape));
        }
        let offset = shape.len() - src.len();
        let mut padded = vec![1; offset];
        padded.extend_from_slice(&src);
        let src_strides = strides(&padded);
        let mut eff = vec![0; shape.len()];
        for i in 0..shape.len() {
            if padded[i] == shape[i] {
                eff[i] = src_strides[i];
            } else if padded[i] != 1 {
                return Err(shape_err("broadcast_to", &src, shape));
            }
        }
        let map = strided_map(shape, &eff);
        Ok(self.index_op(x, shape.to_vec(), map))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let mut seen = vec![false; src.len()];
        if perm.len() != src.len() || perm.iter().any(|&p| p >= src.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {src:?}"),
            });
        }
        let src_strides = strides(&src);
        let shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let map = strided_map(&shape, &eff);
        Ok(self.index_op(x, shape, map))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", self.shape(x)),
            });
        }
        self.permute(x, &[1, 0])
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Invalid {
                op: "transpose_last",
                msg: format!("rank {r} has no two trailing axes"),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Selects rows along axis 0.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let row: usize = src[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src[0]) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for axis of length {}", src[0]),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::EmptyOutput {
                op: "gather",
                msg: "no indices".into(),
            });
        }
        let map = indices
            .iter()
            .flat_map(|&i| (i * row)..((i + 1) * row))
            .collect();
        let mut shape = src;
        shape[0] = indices.len();
        Ok(self.index_op(x, shape, map))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if axis >= src.len() || len == 0 || start + len > src[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}+{len} on axis {axis} of {src:?}"),
            });
        }
        let mut shape = src.clone();
        shape[axis] = len;
        let src_strides = strides(&src);
        let base = start * src_strides[axis];
        let map = strided_map(&shape, &src_strides)
            .into_iter()
            .map(|i| i + base)
            .collect();
        Ok(self.index_op(x, shape, map))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => {
                return Err(TensorError::EmptyOutput {
                    op: "concat",
                    msg: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape (a rank-1 input yields
    /// shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if axis >= src.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {src:?}"),
            });
        }
        let outer: usize = src[..axis].iter().product();
        let inner: usize = src[axis + 1..].iter().product();
        let len = src[axis];
        let xs = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += xs[base + i];
                }
            }
        }
        let mut shape = src;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, rg, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len))
    }

    /// Adds a per-channel bias `b` (`[C]`) to `x` (`[..., C]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(x, bb)
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        self.bmm(a, b, false, false)
    }

    /// Batched product `op(a) · op(b)`. Operands are rank 2 or rank 3; a
    /// rank-2 operand is shared across the batch of the other. `ta`/`tb`
    /// transpose the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok_rank = |s: &[usize]| s.len() == 2 || s.len() == 3;
        if !ok_rank(&sa) || !ok_rank(&sb) {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let a_batched = sa.len() == 3;
        let b_batched = sb.len() == 3;
        let batch = match (a_batched, b_batched) {
            (true, true) if sa[0] != sb[0] => return Err(shape_err("bmm", &sa, &sb)),
            (true, _) => sa[0],
            (false, true) => sb[0],
            (false, false) => 1,
        };
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
            for i in 0..batch {
                let oa = if a_batched { i * m * k } else { 0 };
                let ob = if b_batched { i * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &da[oa..oa + m * k],
                    ta,
                    &db[ob..ob + k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if a_batched || b_batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        let geom = BmmGeom {
            batch,
            a_batched,
            b_batched,
            ta,
            tb,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Bmm { a, b, geom }))
    }

    // ------------------------------------------------------------------
    // Probabilistic
    // ------------------------------------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let cols = *src.shape.last().expect("tensor has at least one axis");
        let mut data = src.data.clone();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(value, rg, Op::Softmax(x))
    }

    /// Mean categorical cross-entropy `−(1/L) Σᵢ Σᵣ yᵢᵣ log ŷᵢᵣ` of
    /// probability rows against one-hot rows, with the logarithm clamped at
    /// a floor probability of 1e-12.
    pub fn cross_entropy(&mut self, probs: Var, onehot: Var) -> Result<Var> {
        let (p, y) = (&self.nodes[probs.0].value, &self.nodes[onehot.0].value);
        if p.shape.len() != 2 || p.shape != y.shape {
            return Err(shape_err("cross_entropy", &p.shape, &y.shape));
        }
        let cols = p.shape[1];
        for (row, (pr, yr)) in p.data.chunks(cols).zip(y.data.chunks(cols)).enumerate() {
            let sum: f64 = pr.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::Normalization { row, sum });
            }
            let ones = yr.iter().filter(|&&v| v == 1.0).count();
            let zeros = yr.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != cols {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("row {row} of the targets is not one-hot"),
                });
            }
        }
        let rows = p.shape[0] as f64;
        let loss = -p
            .data
            .iter()
            .zip(&y.data)
            .map(|(&pv, &yv)| if yv == 0.0 { 0.0 } else { yv * pv.max(LOG_FLOOR).ln() })
            .sum::<f64>()
            / rows;
        let rg = self.rg(probs) || self.rg(onehot);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { probs, onehot }))
    }

    // ------------------------------------------------------------------
    // Convolution and pooling (channels-last)
    // ------------------------------------------------------------------

    /// 1-D convolution (cross-correlation) over `x: [B, L, C_in]` with
    /// `w: [kernel·C_in, C_out]` (row index `j·C_in + c`), optional bias
    /// `[C_out]`, and zero padding. Output `[B, L_out, C_out]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || kernel == 0 || sw[0] != kernel * sx[2] {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: "stride must be at least 1".into(),
            });
        }
        let (batch, l_in, c_in) = (sx[0], sx[1], sx[2]);
        let c_out = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d", &sw, self.shape(b)));
            }
        }
        let l_out = window_output_len(l_in, pad_left + pad_right, kernel, stride).ok_or_else(|| {
            TensorError::EmptyOutput {
                op: "conv1d",
                msg: format!("kernel {kernel} longer than padded signal {}", l_in + pad_left + pad_right),
            }
        })?;
        let geom = ConvGeom {
            batch,
            l_in,
            c_in,
            l_out,
            c_out,
            kernel,
            stride,
            pad_left,
        };
        let cols = im2col(&self.nodes[x.0].value.data, &geom);
        let rows = batch * l_out;
        let mut out = vec![0.0; rows * c_out];
        gemm(
            rows,
            kernel * c_in,
            c_out,
            &cols,
            false,
            &self.nodes[w.0].value.data,
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value.data;
            for row in out.chunks_mut(c_out) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.map(|b| self.rg(b)).unwrap_or(false);
        let cols = if self.rg(w) { cols } else { Vec::new() };
        let value = Tensor {
            shape: vec![batch, l_out, c_out],
            data: out,
        };
        Ok(self.push(
            value,
            rg,
            Op::Conv1d {
                x,
                w,
                bias,
                cols,
                geom,
            },
        ))
    }

    /// Valid cross-correlation of a single signal with a single kernel;
    /// output length `floor((L − k)/stride) + 1`.
    pub fn conv1d_valid(&mut self, signal: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (ss, sk) = (self.shape(signal).to_vec(), self.shape(kernel).to_vec());
        if ss.len() != 1 || sk.len() != 1 {
            return Err(shape_err("conv1d_valid", &ss, &sk));
        }
        if sk[0] > ss[0] {
            return Err(TensorError::EmptyOutput {
                op: "conv1d_valid",
                msg: format!("kernel length {} exceeds signal length {}", sk[0], ss[0]),
            });
        }
        let x = self.reshape(signal, &[1, ss[0], 1])?;
        let w = self.reshape(kernel, &[sk[0], 1])?;
        let y = self.conv1d(x, w, None, sk[0], stride, 0, 0)?;
        let len = self.shape(y)[1];
        self.reshape(y, &[len])
    }

    /// Max pooling over the length axis of `x: [B, L, C]`. Ties go to the
    /// first index in the window.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(TensorError::Invalid {
                op: "maxpool1d",
                msg: format!("expected [B, L, C], got {sx:?}"),
            });
        }
        let (batch, len, ch) = (sx[0], sx[1], sx[2]);
        let l_out = window_output_len(len, 0, window, stride).ok_or_else(|| TensorError::EmptyOutput {
            op: "maxpool1d",
            msg: format!("window {window} exceeds length {len}"),
        })?;
        let xs = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; batch * l_out * ch];
        let mut argmax = vec![0usize; batch * l_out * ch];
        for b in 0..batch {
            for p in 0..l_out {
                for c in 0..ch {
                    let mut best = (b * len + p * stride) * ch + c;
                    for j in 1..window {
                        let idx = (b * len + p * stride + j) * ch + c;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = (b * l_out + p) * ch + c;
                    data[o] = xs[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor {
            shape: vec![batch, l_out, ch],
            data,
        };
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    /// Max pooling of a single rank-1 signal.
    pub fn maxpool1d_signal(&mut self, signal: Var, window: usize, stride: usize) -> Result<Var> {
        let len = match self.shape(signal) {
            [l] => *l,
            s => {
                return Err(TensorError::Invalid {
                    op: "maxpool1d",
                    msg: format!("expected a rank-1 signal, got {s:?}"),
                })
            }
        };
        let x = self.reshape(signal, &[1, len, 1])?;
        let y = self.maxpool1d(x, window, stride)?;
        let out = self.shape(y)[1];
        self.reshape(y, &[out])
    }

    // ------------------------------------------------------------------
    // Regularization and normalization
    // ------------------------------------------------------------------

    /// Inverted dropout. Identity in eval mode (returns `x` itself); in
    /// train mode zeroes each element with probability `rate` and scales
    /// survivors by `1/(1 − rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let src = &self.nodes[x.0].value;
        let mask: Vec<f64> = (0..src.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = src.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    /// Batch normalization over every axis but the last (channels-last).
    /// Train mode normalizes with biased batch statistics and folds them
    /// into the running ones with [`BN_MOMENTUM`]; eval mode uses the
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ch = *sx.last().unwrap_or(&0);
        for (_name, s) in [
            ("gamma", self.shape(gamma).to_vec()),
            ("beta", self.shape(beta).to_vec()),
            ("running_mean", running_mean.shape().to_vec()),
            ("running_var", running_var.shape().to_vec()),
        ] {
            if s != [ch] {
                
                return Err(shape_err("batch_norm", &sx, &s));
            }
        }
        let xs = &self.nodes[x.0].value.data;
        let rows = xs.len() / ch;
        let train = mode == BatchNormMode::Train;
        let (mean, var) = if train {
            let mut mean = vec![0.0; ch];
            for row in xs.chunks(ch) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; ch];
            for row in xs.chunks(ch) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = &self.nodes[gamma.0].value.data;
        let bt = &self.nodes[beta.0].value.data;
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            for c in 0..ch {
                let i = r * ch + c;
                xhat[i] = (xs[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + bt[c];
            }
        }
        if train {
            for c in 0..ch {
                let rm = &mut running_mean.data_mut()[c];
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean[c];
                let rv = &mut running_var.data_mut()[c];
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor { shape: sx, data: out };
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Special
    // ------------------------------------------------------------------

    /// Gradient reversal: identity forward, upstream gradient multiplied by
    /// `−scale` backward.
    pub fn grl(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale >= 0.0) {
            return Err(TensorError::Invalid {
                op: "grl",
                msg: format!("reversal scale {scale} must be non-negative"),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Grl { x, scale }))
    }

    /// Largest eigenvalue of each symmetric positive semi-definite matrix in
    /// `x` (`[N, N]` or `[B, N, N]`), found by power iteration. Output shape
    /// is `[B]` (`[1]` for a single matrix). Matrices whose largest
    /// eigenvalue is below 1e-12 yield 2 and receive no gradient; their
    /// batch positions are returned in the second value.
    ///
    /// The gradient of a simple eigenvalue is `v vᵀ` for its unit
    /// eigenvector `v`.
    pub fn lambda_max(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let sx = self.shape(x).to_vec();
        let (batch, n) = match sx.as_slice() {
            [r, c] if r == c => (1, *r),
            [b, r, c] if r == c => (*b, *r),
            _ => {
                return Err(TensorError::Invalid {
                    op: "lambda_max",
                    msg: format!("expected square matrices, got {sx:?}"),
                })
            }
        };
        let xs = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; batch];
        let mut vecs = vec![0.0; batch * n];
        let mut active = vec![true; batch];
        let mut degenerate = Vec::new();
        for b in 0..batch {
            let (lam, v) = largest_eigenpair(&xs[b * n * n..(b + 1) * n * n], n);
            if lam < LAMBDA_MIN {
                out[b] = LAMBDA_FALLBACK;
                active[b] = false;
                degenerate.push(b);
            } else {
                out[b] = lam;
                vecs[b * n..(b + 1) * n].copy_from_slice(&v);
            }
        }
        let rg = self.rg(x);
        let value = Tensor {
            shape: vec![batch],
            data: out,
        };
        Ok((self.push(value, rg, Op::LambdaMax { x, vecs, active }), degenerate))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Accumulates gradients of the one-element `loss` into every node that
    /// requires grad. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be a scalar, got {:?}", self.shape(loss)),
            });
        }
        self.zero_grad();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let g = match upper[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            backward_node(&self.nodes, i, g, lower);
        }
        Ok(())
    }
}

/// Flat source index for every element of `shape`, given per-axis source
/// strides.
fn strided_map(shape: &[usize], eff_strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            flat += eff_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            flat -= eff_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.kernel * g.c_in;
    let mut cols = vec![0.0; g.batch * g.l_out * width];
    for b in 0..g.batch {
        for p in 0..g.l_out {
            let row = &mut cols[(b * g.l_out + p) * width..(b * g.l_out + p + 1) * width];
            for j in 0..g.kernel {
                let pos = (p * g.stride + j) as isize - g.pad_left as isize;
                if pos >= 0 && (pos as usize) < g.l_in {
                    let src = (b * g.l_in + pos as usize) * g.c_in;
                    row[j * g.c_in..(j + 1) * g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let width = g.kernel * g.c_in;
    for b in 0..g.batch {
        for p in 0..g.l_out {
            let row = &dcols[(b * g.l_out + p) * width..(b * g.l_out + p + 1) * width];
            for j in 0..g.kernel {
                let pos = (p * g.stride + j) as isize - g.pad_left as isize;
                if pos >= 0 && (pos as usize) < g.l_in {
                    let dst = (b * g.l_in + pos as usize) * g.c_in;
                    for (d, s) in dx[dst..dst + g.c_in].iter_mut().zip(&row[j * g.c_in..(j + 1) * g.c_in]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Dominant eigenpair of a symmetric positive semi-definite `n × n` matrix.
/// Iterates until the residual `‖Mv − λv‖` drops below
/// `LAMBDA_MAX_TOL · max(1, λ)` or [`LAMBDA_MAX_ITERS`] is reached.
pub(crate) fn largest_eigenpair(m: &[f64], n: usize) -> (f64, Vec<f64>) {
    // Irregular start so it is not orthogonal to structured eigenvectors
    // (the all-ones vector is in the null space of every Laplacian).
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_894_9).fract())
        .collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut lam = 0.0;
    for _ in 0..LAMBDA_MAX_ITERS {
        matvec(m, &v, &mut w, n);
        lam = dot(&v, &w);
        let resid = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lam * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = dot(&w, &w).sqrt();
        if norm < 1e-300 {
            return (0.0, v);
        }
        if resid <= LAMBDA_MAX_TOL * lam.abs().max(1.0) {
            break;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    (lam, v)
}

fn matvec(m: &[f64], v: &[f64], out: &mut [f64], n: usize) {
    for i in 0..n {
        out[i] = dot(&m[i * n..(i + 1) * n], v);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let len = |v: Var| nodes[v.0].value.numel();
    let val = |v: Var| &nodes[v.0].value.data;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Map(x, kind) => {
            let xs = val(*x);
            let ys = &node.value.data;
            let dx = accumulate(&mut grads[x.0], xs.len());
            for j in 0..xs.len() {
                dx[j] += g[j]
                    * match kind {
                        Map::Relu => {
                            if xs[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Map::Sigmoid => ys[j] * (1.0 - ys[j]),
                        Map::Abs => {
                            if xs[j] > 0.0 {
                                1.0
                            } else if xs[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Map::Square => 2.0 * xs[j],
                        Map::Exp => ys[j],
                        Map::Recip => -ys[j] * ys[j],
                        Map::Scale(c) => *c,
                        Map::Shift(_) => 1.0,
                    };
            }
        }
        Op::Binary(a, b, kind) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let da = accumulate(&mut grads[a.0], av.len());
                for j in 0..av.len() {
                    da[j] += match kind {
                        Bin::Add | Bin::Sub => g[j],
                        Bin::Mul => g[j] * bv[j],
                        Bin::Div => g[j] / bv[j],
                    };
                }
            }
            if rg(*b) {
                let db = accumulate(&mut grads[b.0], bv.len());
                for j in 0..bv.len() {
                    db[j] += match kind {
                        Bin::Add => g[j],
                        Bin::Sub => -g[j],
                        Bin::Mul => g[j] * av[j],
                        Bin::Div => -g[j] * av[j] / (bv[j] * bv[j]),
                    };
                }
            }
        }
        Op::Index { x, map } => {
            let dx = accumulate(&mut grads[x.0], len(*x));
            for (gj, &src) in g.iter().zip(map) {
                dx[src] += gj;
            }
        }
        Op::Reshape(x) => {
            let dx = accumulate(&mut grads[x.0], len(*x));
            for (d, gj) in dx.iter_mut().zip(g) {
                *d += gj;
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut offset = 0;
            for o in 0..outer {
                for v in inputs {
                    let chunk = nodes[v.0].value.shape()[*axis] * inner;
                    if rg(*v) {
                        let dv = accumulate(&mut grads[v.0], len(*v));
                        for (d, gj) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[offset..offset + chunk]) {
                            *d += gj;
                        }
                    }
                    offset += chunk;
                }
            }
        }
        Op::SumAll(x) => {
            let dx = accumulate(&mut grads[x.0], len(*x));
            for d in dx.iter_mut() {
                *d += g[0];
            }
        }
        Op::SumAxis { x, axis } => {
            let src = nodes[x.0].value.shape();
            let outer: usize = src[..*axis].iter().product();
            let inner: usize = src[axis + 1..].iter().product();
            let n = src[*axis];
            let dx = accumulate(&mut grads[x.0], len(*x));
            for o in 0..outer {
                for a in 0..n {
                    for k in 0..inner {
                        dx[(o * n + a) * inner + k] += g[o * inner + k];
                    }
                }
            }
        }
        Op::Bmm { a, b, geom } => bmm_backward(nodes, *a, *b, geom, g, grads),
        Op::Softmax(x) => {
            let ys = &node.value.data;
            let cols = *node.value.shape().last().unwrap();
            let dx = accumulate(&mut grads[x.0], ys.len());
            for ((yr, gr), dr) in ys.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                let s: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                for j in 0..cols {
                    dr[j] += yr[j] * (gr[j] - s);
                }
            }
        }
        Op::CrossEntropy { probs, onehot } => {
            let (p, y) = (val(*probs), val(*onehot));
            let rows = nodes[probs.0].value.shape()[0] as f64;
            if rg(*probs) {
                let dp = accumulate(&mut grads[probs.0], p.len());
                for j in 0..p.len() {
                    if y[j] != 0.0 && p[j] > LOG_FLOOR {
                        dp[j] -= g[0] * y[j] / (p[j] * rows);
                    }
                }
            }
            if rg(*onehot) {
                let dy = accumulate(&mut grads[onehot.0], y.len());
                for j in 0..y.len() {
                    dy[j] -= g[0] * p[j].max(LOG_FLOOR).ln() / rows;
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            bias,
            cols,
            geom,
        } => {
            let rows = geom.batch * geom.l_out;
            let width = geom.kernel * geom.c_in;
            if rg(*w) {
                let dw = accumulate(&mut grads[w.0], width * geom.c_out);
                gemm(width, rows, geom.c_out, cols, true, g, false, dw, 1.0);
            }
            if let Some(b) = bias {
                if rg(*b) {
                    let db = accumulate(&mut grads[b.0], geom.c_out);
                    for row in g.chunks(geom.c_out) {
                        for (d, gj) in db.iter_mut().zip(row) {
                            *d += gj;
                        }
                    }
                }
            }
            if rg(*x) {
                let mut dcols = vec![0.0; rows * width];
                gemm(rows, geom.c_out, width, g, false, val(*w), true, &mut dcols, 0.0);
                let dx = accumulate(&mut grads[x.0], len(*x));
                col2im_add(&dcols, geom, dx);
            }
        }
        Op::MaxPool { x, argmax } => {
            let dx = accumulate(&mut grads[x.0], len(*x));
            for (gj, &src) in g.iter().zip(argmax) {
                dx[src] += gj;
            }
        }
        Op::Dropout { x, mask } => {
            let dx = accumulate(&mut grads[x.0], mask.len());
            for j in 0..mask.len() {
                dx[j] += g[j] * mask[j];
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
            let ch = inv_std.len();
            let rows = xhat.len() / ch;
            let gm = val(*gamma);
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for r in 0..rows {
                for c in 0..ch {
                    let i = r * ch + c;
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * xhat[i];
                }
            }
            if rg(*gamma) {
                let dg = accumulate(&mut grads[gamma.0], ch);
                for c in 0..ch {
                    dg[c] += sum_gx[c];
                }
            }
            if rg(*beta) {
                let db = accumulate(&mut grads[beta.0], ch);
                for c in 0..ch {
                    db[c] += sum_g[c];
                }
            }
            if rg(*x) {
                let dx = accumulate(&mut grads[x.0], xhat.len());
                let nr = rows as f64;
                for r in 0..rows {
                    for c in 0..ch {
                        let i = r * ch + c;
                        dx[i] += if *train {
                            gm[c] * inv_std[c] * (g[i] - sum_g[c] / nr - xhat[i] * sum_gx[c] / nr)
                        } else {
                            gm[c] * inv_std[c] * g[i]
                        };
                    }
                }
            }
        }
        Op::Grl { x, scale } => {
            let dx = accumulate(&mut grads[x.0], g.len());
            for (d, gj) in dx.iter_mut().zip(g) {
                *d -= scale * gj;
            }
        }
        Op::LambdaMax { x, vecs, active } => {
            let n = nodes[x.0].value.shape().last().copied().unwrap();
            let dx = accumulate(&mut grads[x.0], len(*x));
            for (b, &on) in active.iter().enumerate() {
                if !on {
                    continue;
                }
                let v = &vecs[b * n..(b + 1) * n];
                for r in 0..n {
                    for c in 0..n {
                        dx[b * n * n + r * n + c] += g[b] * v[r] * v[c];
                    }
                }
            }
        }
    }
}

fn bmm_backward(nodes: &[Node], a: Var, b: Var, geom: &BmmGeom, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let BmmGeom {
        batch,
        a_batched,
        b_batched,
        ta,
        tb,
        m,
        k,
        n,
    } = *geom;
    let av = &nodes[a.0].value.data;
    let bv = &nodes[b.0].value.data;
    if nodes[a.0].requires_grad {
        let da = accumulate(&mut grads[a.0], av.len());
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ob = if b_batched { i * k * n } else { 0 };
            let bi = &bv[ob..ob + k * n];
            let oa = if a_batched { i * m * k } else { 0 };
            let dai = &mut da[oa..oa + m * k];
            if ta {
                // stored [k, m]: d = op(B) · Gᵀ
                gemm(k, n, m, bi, tb, gi, true, dai, 1.0);
            } else {
                // stored [m, k]: d = G · op(B)ᵀ
                gemm(m, n, k, gi, false, bi, !tb, dai, 1.0);
            }
        }
    }
    if nodes[b.0].requires_grad {
        let db = accumulate(&mut grads[b.0], bv.len());
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let oa = if a_batched { i * m * k } else { 0 };
            let ai = &av[oa..oa + m * k];
            let ob = if b_batched { i * k * n } else { 0 };
            let dbi = &mut db[ob..ob + k * n];
            if tb {
                // stored [n, k]: d = Gᵀ · op(A)
                gemm(n, m, k, gi, true, ai, ta, dbi, 1.0);
            } else {
                // stored [k, n]: d = op(A)ᵀ · G
                gemm(k, m, n, ai, !ta, gi, false, dbi, 1.0);
            }
        }
    }
}
