use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    NarrowCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, flat: Vec<usize> },
    BceWithLogits { x: Var, target: Vec<f32> },
    Upsample { x: Var, plan: UpsamplePlan },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Node order is a topological
/// order, so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<usize>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled when unreachable from the loss.
    pub fn wrt(&self, var: Var) -> Vec<f32> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[var.0]],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    // 0.5 * (1 + tanh(u)) == sigmoid(2u)
    let u = C * (x + A * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    let y = x * s;
    let dy = s + 2.0 * x * s * (1.0 - s) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis_len, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Precomputed bilinear interpolation weights (half-pixel centers, edge clamp).
#[derive(Debug, Clone)]
struct UpsamplePlan {
    in_h: usize,
    in_w: usize,
    rows: Vec<(usize, usize, f32)>,
    cols: Vec<(usize, usize, f32)>,
}

impl UpsamplePlan {
    fn axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
        let scale = input as f32 / output as f32;
        (0..output)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let w = (src - i0 as f32).clamp(0.0, 1.0);
                (i0, i1, w)
            })
            .collect()
    }

    fn out_len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} for {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: false, grad: None }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---- elementwise binary, scalar broadcast only ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, value) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else if vb.len() == 1 {
            let y = vb[0];
            (sa, va.iter().map(|&x| f(x, y)).collect())
        } else if va.len() == 1 {
            let x = va[0];
            (sb, vb.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(name, format!("lhs {sa:?} vs rhs {sb:?}")));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let value = self.value(a).iter().map(|&x| x + s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::AddScalar(a), rg)
    }

    /// Adds a length-`c` row vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row", x)?;
        if self.shape(row) != [c] {
            return Err(Error::shape(
                "add_row",
                format!("matrix {:?} vs row {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let (vx, vr) = (self.value(x), self.value(row));
        let mut value = vx[..r * c].to_vec();
        if c > 0 {
            for out in value.chunks_exact_mut(c) {
                for (o, &b) in out.iter_mut().zip(vr) {
                    *o += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(vec![r, c], value, Op::AddRow(x, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let value = transpose_raw(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a))
    }

    // ---- normalizations ----

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let value = softmax_raw(self.value(a), &shape, axis, false);
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Softmax { x: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let value = softmax_raw(self.value(a), &shape, axis, true);
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::LogSoftmax { x: a, axis }, rg))
    }

    /// Layer normalization over the last axis of an `r×c` matrix with
    /// learned per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; r * c];
        let mut rstd = vec![0.0f32; r];
        let mut value = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &vx[i * c..(i + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[i] = rs as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[i * c + j] = h;
                value[i * c + j] = h * vg[j] + vb[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(vec![r, c], value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    // ---- reductions and structural ops ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let m = (vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len().max(1) as f64) as f32;
        let rg = self.rg(a);
        self.push(vec![], vec![m], Op::Mean(a), rg)
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out_shape, value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("narrow_cols", x)?;
        if start + len > c {
            return Err(Error::shape(
                "narrow_cols",
                format!("columns {start}..{} of {:?}", start + len, self.shape(x)),
            ));
        }
        let vx = self.value(x);
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&vx[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], value, Op::NarrowCols { x, start }, rg))
    }

    /// Embedding-row lookup: selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {:?}", self.shape(x))));
        }
        let vx = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            value.extend_from_slice(&vx[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len(), c], value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Selects individual elements by row-major flat index into a 1-D result.
    pub fn pick(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(Error::shape("pick", format!("index {bad} of {:?}", self.shape(x))));
        }
        let value = flat.iter().map(|&i| self.value(x)[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![flat.len()], value, Op::Pick { x, flat: flat.to_vec() }, rg))
    }

    /// Elementwise numerically stable binary cross-entropy on logits against
    /// constant targets in [0, 1].
    pub fn bce_with_logits(&mut self, x: Var, target: &[f32]) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs {} targets", self.shape(x), target.len()),
            ));
        }
        let value = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::BceWithLogits { x, target: target.to_vec() },
            rg,
        ))
    }

    /// Bilinear resize of each row of `x`, interpreted as an `in_h×in_w`
    /// grid, to `out_h×out_w`. Input shape `[rows, in_h*in_w]`.
    pub fn upsample_bilinear(
        &mut self,
        x: Var,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (r, c) = self.dims2("upsample_bilinear", x)?;
        if c != in_h * in_w || in_h == 0 || in_w == 0 {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("{:?} is not rows x {in_h}*{in_w}", self.shape(x)),
            ));
        }
        let plan = UpsamplePlan {
            in_h,
            in_w,
            rows: UpsamplePlan::axis(in_h, out_h),
            cols: UpsamplePlan::axis(in_w, out_w),
        };
        let vx = self.value(x);
        let out = plan.out_len();
        let mut value = vec![0.0f32; r * out];
        for q in 0..r {
            let src = &vx[q * c..(q + 1) * c];
            let dst = &mut value[q * out..(q + 1) * out];
            for (oy, &(y0, y1, wy)) in plan.rows.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in plan.cols.iter().enumerate() {
                    let top = src[y0 * in_w + x0] * (1.0 - wx) + src[y0 * in_w + x1] * wx;
                    let bot = src[y1 * in_w + x0] * (1.0 - wx) + src[y1 * in_w + x1] * wx;
                    dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, out_h * out_w], value, Op::Upsample { x, plan }, rg))
    }

    // ---- reverse pass ----

    /// Reverse sweep from a single-element loss. Every node is visited at
    /// most once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |_| 1.0);
                self.acc_broadcast(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |_| 1.0);
                self.acc_broadcast(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_broadcast(grads, *a, g, |k| bget(vb, k));
                self.acc_broadcast(grads, *b, g, |k| bget(va, k));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_broadcast(grads, *a, g, |k| 1.0 / bget(vb, k));
                self.acc_broadcast(grads, *b, g, |k| {
                    let d = bget(vb, k);
                    -bget(va, k) / (d * d)
                });
            }
            Op::Scale(a, s) => self.acc_map(grads, *a, |k| g[k] * s),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc_map(grads, *a, |k| g[k]),
            Op::AddRow(x, row) => {
                let c = self.shape(*row)[0];
                self.acc_map(grads, *x, |k| g[k]);
                if self.rg(*row) {
                    let mut gr = vec![0.0f32; c];
                    for (k, &gv) in g.iter().enumerate() {
                        gr[k % c] += gv;
                    }
                    accumulate(grads, *row, &gr);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    accumulate(grads, *a, &matmul_raw(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    accumulate(grads, *b, &matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                if self.rg(*a) {
                    accumulate(grads, *a, &transpose_raw(g, r, c));
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc_map(grads, *a, |k| if va[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                self.acc_map(grads, *a, |k| g[k] * gelu_parts(va[k]).1);
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, |k| g[k] * y[k] * (1.0 - y[k])),
            Op::Log(a) => {
                let va = self.value(*a);
                self.acc_map(grads, *a, |k| g[k] / va[k]);
            }
            Op::Exp(a) => self.acc_map(grads, *a, |k| g[k] * y[k]),
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let mut gx = vec![0.0f32; y.len()];
                    for o in 0..outer {
                        for n in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + n;
                            let dot: f32 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::LogSoftmax { x, axis } => {
                if self.rg(*x) {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let mut gx = vec![0.0f32; y.len()];
                    for o in 0..outer {
                        for n in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + n;
                            let total: f32 = (0..len).map(|a| g[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] = g[idx(a)] - y[idx(a)].exp() * total;
                            }
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let vg = self.value(*gamma);
                if self.rg(*beta) {
                    let mut gb = vec![0.0f32; c];
                    for k in 0..r * c {
                        gb[k % c] += g[k];
                    }
                    accumulate(grads, *beta, &gb);
                }
                if self.rg(*gamma) {
                    let mut gg = vec![0.0f32; c];
                    for k in 0..r * c {
                        gg[k % c] += g[k] * xhat[k];
                    }
                    accumulate(grads, *gamma, &gg);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0f32; r * c];
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dxhat: Vec<f32> =
                            g[row.clone()].iter().zip(vg).map(|(&a, &b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f32>() / c as f32;
                        let m2 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum::<f32>()
                            / c as f32;
                        for j in 0..c {
                            gx[i * c + j] = rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Sum(a) => self.acc_map(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f32;
                self.acc_map(grads, *a, |_| g[0] / n);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(grads, v, &gv);
                    }
                    offset += chunk;
                }
            }
            Op::NarrowCols { x, start } => {
                if self.rg(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = node.shape[1];
                    let mut gx = vec![0.0f32; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.rg(*x) {
                    let c = node.shape[1];
                    let mut gx = vec![0.0f32; self.value(*x).len()];
                    for (out_row, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g[out_row * c + j];
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Pick { x, flat } => {
                if self.rg(*x) {
                    let mut gx = vec![0.0f32; self.value(*x).len()];
                    for (k, &src) in flat.iter().enumerate() {
                        gx[src] += g[k];
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::BceWithLogits { x, target } => {
                let vx = self.value(*x);
                self.acc_map(grads, *x, |k| g[k] * (sigmoid(vx[k]) - target[k]));
            }
            Op::Upsample { x, plan } => {
                if self.rg(*x) {
                    let c = plan.in_h * plan.in_w;
                    let out = plan.out_len();
                    let out_w = plan.cols.len();
                    let rows = node.shape[0];
                    let mut gx = vec![0.0f32; rows * c];
                    for q in 0..rows {
                        let gq = &g[q * out..(q + 1) * out];
                        let dst = &mut gx[q * c..(q + 1) * c];
                        for (oy, &(y0, y1, wy)) in plan.rows.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in plan.cols.iter().enumerate() {
                                let gv = gq[oy * out_w + ox];
                                let (w, iw) = (wx, plan.in_w);
                                dst[y0 * iw + x0] += gv * (1.0 - wy) * (1.0 - w);
                                dst[y0 * iw + x1] += gv * (1.0 - wy) * w;
                                dst[y1 * iw + x0] += gv * wy * (1.0 - w);
                                dst[y1 * iw + x1] += gv * wy * w;
                            }
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl Fn(usize) -> f32) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).len();
        let contribution: Vec<f32> = (0..n).map(f).collect();
        accumulate(grads, v, &contribution);
    }

    /// Accumulates `g[k] * local(k)` into `v`, summing when `v` was a
    /// broadcast scalar.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f32>>],
        v: Var,
        g: &[f32],
        local: impl Fn(usize) -> f32,
    ) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).len();
        if n == g.len() {
            let c: Vec<f32> = (0..n).map(|k| g[k] * local(k)).collect();
            accumulate(grads, v, &c);
        } else {
            let total: f32 = (0..g.len()).map(|k| g[k] * local(k)).sum();
            accumulate(grads, v, &[total]);
        }
    }
}

/// Value at `k` for a possibly broadcast scalar operand.
fn bget(v: &[f32], k: usize) -> f32 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: &[f32]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut j = 0;
    while j + 16 <= n {
        column_block::<16>(a, b, &mut out, m, k, n, j);
        j += 16;
    }
    while j + 4 <= n {
        column_block::<4>(a, b, &mut out, m, k, n, j);
        j += 4;
    }
    while j < n {
        column_block::<1>(a, b, &mut out, m, k, n, j);
        j += 1;
    }
    out
}

/// Columns `j..j + W` of the product, accumulated in registers. Each output
/// still sums over the inner dimension in ascending order.
fn column_block<const W: usize>(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    j: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let mut acc = [0.0f32; W];
        for (p, &av) in arow.iter().enumerate() {
            let brow: &[f32; W] = b[p * n + j..p * n + j + W].try_into().unwrap();
            for w in 0..W {
                acc[w] += av * brow[w];
            }
        }
        out[i * n + j..i * n + j + W].copy_from_slice(&acc);
    }
}

fn transpose_raw(a: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * c];
    if c == 0 {
        return out;
    }
    for (i, row) in a.chunks_exact(c).enumerate().take(r) {
        for (j, &v) in row.iter().enumerate() {
            out[j * r + i] = v;
        }
    }
    out
}

fn softmax_raw(x: &[f32], shape: &[usize], axis: usize, log: bool) -> Vec<f32> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0f32; x.len()];
    let mut exps = vec![0.0f64; len];
    for o in 0..outer {
        for n in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + n;
            let max = (0..len).map(|a| x[idx(a)]).fold(f32::NEG_INFINITY, f32::max);
            for (a, e) in exps.iter_mut().enumerate() {
                *e = ((x[idx(a)] - max) as f64).exp();
            }
            let denom: f64 = exps.iter().sum();
            let log_denom = denom.ln();
            for (a, &e) in exps.iter().enumerate() {
                out[idx(a)] = if log {
                    ((x[idx(a)] - max) as f64 - log_denom) as f32
                } else {
                    (e / denom) as f32
                };
            }
        }
    }
    out
}
