use super::tensor::Tensor;
use super::AutodiffError;

/// Index of a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives. Shape rules are listed per variant; `[n,k]`
/// denotes a row-major matrix and `[k]` a vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Elementwise `a + b`, identical shapes.
    Add,
    /// Elementwise `a - b`, identical shapes.
    Sub,
    /// Elementwise `a * b`, identical shapes.
    Mul,
    /// Elementwise `a / b`, identical shapes.
    Div,
    /// `[.., k] + [k]`: adds a row vector to every row (bias).
    AddRow,
    /// `[k] -> [n, k]` by repeating the vector `n` times.
    BroadcastRows(usize),
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant to every element.
    AddScalar(f64),
    /// `tensor * s` where `s` is a one-element node.
    MulScalar,
    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    MatMul,
    Relu,
    /// Softmax over the last axis, max-subtracted.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    Ln,
    Sin,
    Cos,
    Sqrt,
    /// Sum of all elements -> scalar.
    Sum,
    /// Mean of all elements -> scalar.
    Mean,
    /// `[n, k] -> [k]` column sums.
    SumRows,
    /// Concatenate along the last axis; leading dimensions must agree.
    Concat,
    Reshape(Vec<usize>),
    /// Cross product of two 3-vectors.
    Cross,
    /// `v / |v|` for a 3-vector.
    Normalize,
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddRow => "add_row",
            Primitive::BroadcastRows(_) => "broadcast_rows",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MulScalar => "mul_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Ln => "ln",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Sqrt => "sqrt",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumRows => "sum_rows",
            Primitive::Concat => "concat",
            Primitive::Reshape(_) => "reshape",
            Primitive::Cross => "cross",
            Primitive::Normalize => "normalize",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::AddRow
            | Primitive::MulScalar
            | Primitive::MatMul
            | Primitive::Cross => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone)]
enum Source {
    Param,
    Constant,
    Op(Primitive, Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    source: Source,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape. Values are computed eagerly when a
/// node is recorded, so nodes are always in topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the parameter leaves after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf. `None` for non-leaf or constant nodes.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Source::Param, value, true)
    }

    /// Record a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Source::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, source: Source, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            source,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Append `op(inputs)` to the tape, computing its value immediately.
    pub fn record(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(id.0));
            }
        }
        match op.arity() {
            Some(n) if n != inputs.len() => {
                return Err(AutodiffError::Arity {
                    op: op.name(),
                    expected: n,
                    got: inputs.len(),
                })
            }
            None if inputs.is_empty() => {
                return Err(AutodiffError::Arity {
                    op: op.name(),
                    expected: 1,
                    got: 0,
                })
            }
            _ => {}
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Source::Op(op, inputs.to_vec()), value, requires_grad))
    }

    /// Reverse sweep from a scalar root. Every parameter leaf gets an entry;
    /// leaves the root does not depend on receive zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AutodiffError> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or(AutodiffError::UnknownNode(root.0))?;
        if root_node.value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Source::Op(op, inputs) = &node.source else {
                continue;
            };
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            self.propagate(op, inputs, &node.value, &adj, &mut adjoints);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(idx, node)| match node.source {
                Source::Param => {
                    let shape = node.value.shape();
                    Some(match adjoints.get_mut(idx).and_then(|a| a.take()) {
                        Some(data) => Tensor::from_vec(shape, data),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Primitive,
        inputs: &[NodeId],
        out: &Tensor,
        adj: &[f64],
        adjoints: &mut [Option<Vec<f64>>],
    ) {
        let val = |k: usize| &self.nodes[inputs[k].0].value;
        let wants = |k: usize| self.nodes[inputs[k].0].requires_grad;
        // Adjoint buffers are allocated lazily so unused inputs cost nothing.
        macro_rules! grad_of {
            ($k:expr) => {{
                let id = inputs[$k].0;
                let len = self.nodes[id].value.len();
                adjoints[id].get_or_insert_with(|| vec![0.0; len])
            }};
        }

        match op {
            Primitive::Add => {
                for k in 0..2 {
                    if wants(k) {
                        axpy(grad_of!(k), 1.0, adj);
                    }
                }
            }
            Primitive::Sub => {
                if wants(0) {
                    axpy(grad_of!(0), 1.0, adj);
                }
                if wants(1) {
                    axpy(grad_of!(1), -1.0, adj);
                }
            }
            Primitive::Mul => {
                if wants(0) {
                    let g = grad_of!(0);
                    for ((g, a), b) in g.iter_mut().zip(adj).zip(val(1).data()) {
                        *g += a * b;
                    }
                }
                if wants(1) {
                    let g = grad_of!(1);
                    for ((g, a), b) in g.iter_mut().zip(adj).zip(val(0).data()) {
                        *g += a * b;
                    }
                }
            }
            Primitive::Div => {
                let b = val(1).data();
                if wants(0) {
                    let g = grad_of!(0);
                    for ((g, a), b) in g.iter_mut().zip(adj).zip(b) {
                        *g += a / b;
                    }
                }
                if wants(1) {
                    let g = grad_of!(1);
                    for (((g, a), b), y) in g.iter_mut().zip(adj).zip(b).zip(out.data()) {
                        *g -= a * y / b;
                    }
                }
            }
            Primitive::AddRow => {
                if wants(0) {
                    axpy(grad_of!(0), 1.0, adj);
                }
                if wants(1) {
                    let g = grad_of!(1);
                    let k = g.len();
                    for row in adj.chunks_exact(k) {
                        axpy(g, 1.0, row);
                    }
                }
            }
            Primitive::BroadcastRows(_) => {
                if wants(0) {
                    let g = grad_of!(0);
                    let k = g.len();
                    for row in adj.chunks_exact(k) {
                        axpy(g, 1.0, row);
                    }
                }
            }
            Primitive::Scale(c) => {
                if wants(0) {
                    axpy(grad_of!(0), *c, adj);
                }
            }
            Primitive::AddScalar(_) => {
                if wants(0) {
                    axpy(grad_of!(0), 1.0, adj);
                }
            }
            Primitive::MulScalar => {
                let s = val(1).item();
                if wants(0) {
                    axpy(grad_of!(0), s, adj);
                }
                if wants(1) {
                    let dot: f64 = adj.iter().zip(val(0).data()).map(|(a, x)| a * x).sum();
                    grad_of!(1)[0] += dot;
                }
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, kdim) = (a.shape()[0], a.shape()[1]);
                let n = if b.rank() == 1 { 1 } else { b.shape()[1] };
                if wants(0) {
                    // dA[m,k] += dC[m,n] * B^T
                    gemm(m, n, kdim, adj, false, b.data(), true, grad_of!(0), 1.0);
                }
                if wants(1) {
                    // dB[k,n] += A^T * dC[m,n]
                    gemm(kdim, m, n, a.data(), true, adj, false, grad_of!(1), 1.0);
                }
            }
            Primitive::Relu => {
                if wants(0) {
                    let g = grad_of!(0);
                    // Subgradient at exactly zero is taken as zero.
                    for ((g, a), x) in g.iter_mut().zip(adj).zip(val(0).data()) {
                        if *x > 0.0 {
                            *g += a;
                        }
                    }
                }
            }
            Primitive::Softmax => {
                if wants(0) {
                    let g = grad_of!(0);
                    let k = out.last_dim();
                    for ((g, a), y) in g
                        .chunks_exact_mut(k)
                        .zip(adj.chunks_exact(k))
                        .zip(out.data().chunks_exact(k))
                    {
                        let dot: f64 = a.iter().zip(y).map(|(a, y)| a * y).sum();
                        for ((g, a), y) in g.iter_mut().zip(a).zip(y) {
                            *g += y * (a - dot);
                        }
                    }
                }
            }
            Primitive::LogSoftmax => {
                if wants(0) {
                    let g = grad_of!(0);
                    let k = out.last_dim();
                    for ((g, a), y) in g
                        .chunks_exact_mut(k)
                        .zip(adj.chunks_exact(k))
                        .zip(out.data().chunks_exact(k))
                    {
                        let total: f64 = a.iter().sum();
                        for ((g, a), y) in g.iter_mut().zip(a).zip(y) {
                            *g += a - y.exp() * total;
                        }
                    }
                }
            }
            Primitive::Ln => {
                if wants(0) {
                    let g = grad_of!(0);
                    for ((g, a), x) in g.iter_mut().zip(adj).zip(val(0).data()) {
                        *g += a / x;
                    }
                }
            }
            Primitive::Sin => {
                if wants(0) {
                    let g = grad_of!(0);
                    for ((g, a), x) in g.iter_mut().zip(adj).zip(val(0).data()) {
                        *g += a * x.cos();
                    }
                }
            }
            Primitive::Cos => {
                if wants(0) {
                    let g = grad_of!(0);
                    for ((g, a), x) in g.iter_mut().zip(adj).zip(val(0).data()) {
                        *g -= a * x.sin();
                    }
                }
            }
            Primitive::Sqrt => {
                if wants(0) {
                    let g = grad_of!(0);
                    for ((g, a), y) in g.iter_mut().zip(adj).zip(out.data()) {
                        *g += a * 0.5 / y;
                    }
                }
            }
            Primitive::Sum => {
                if wants(0) {
                    let a = adj[0];
                    for g in grad_of!(0).iter_mut() {
                        *g += a;
                    }
                }
            }
            Primitive::Mean => {
                if wants(0) {
                    let g = grad_of!(0);
                    let a = adj[0] / g.len() as f64;
                    for g in g.iter_mut() {
                        *g += a;
                    }
                }
            }
            Primitive::SumRows => {
                if wants(0) {
                    let g = grad_of!(0);
                    let k = adj.len();
                    for row in g.chunks_exact_mut(k) {
                        axpy(row, 1.0, adj);
                    }
                }
            }
            Primitive::Concat => {
                let total = out.last_dim();
                let mut offset = 0;
                for k in 0..inputs.len() {
                    let width = val(k).last_dim();
                    if wants(k) {
                        let g = grad_of!(k);
                        for (g, a) in g.chunks_exact_mut(width).zip(adj.chunks_exact(total)) {
                            axpy(g, 1.0, &a[offset..offset + width]);
                        }
                    }
                    offset += width;
                }
            }
            Primitive::Reshape(_) => {
                if wants(0) {
                    axpy(grad_of!(0), 1.0, adj);
                }
            }
            Primitive::Cross => {
                let (a, b) = (val(0).data(), val(1).data());
                let adj3 = [adj[0], adj[1], adj[2]];
                if wants(0) {
                    // d(a x b)/da applied to adj: b x adj
                    let c = cross3([b[0], b[1], b[2]], adj3);
                    axpy(grad_of!(0), 1.0, &c);
                }
                if wants(1) {
                    let c = cross3(adj3, [a[0], a[1], a[2]]);
                    axpy(grad_of!(1), 1.0, &c);
                }
            }
            Primitive::Normalize => {
                if wants(0) {
                    let x = val(0).data();
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.data();
                    let dot: f64 = adj.iter().zip(y).map(|(a, y)| a * y).sum();
                    let g = grad_of!(0);
                    for ((g, a), y) in g.iter_mut().zip(adj).zip(y) {
                        *g += (a - y * dot) / norm;
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `C[m,n] = A[m,k] * B[k,n] + beta * C`, where a transposed flag means the
/// operand is stored as its transpose in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn mismatch(op: &Primitive, values: &[&Tensor]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        shapes: values.iter().map(|v| v.shape().to_vec()).collect(),
    }
}

fn elementwise(
    op: &Primitive,
    values: &[&Tensor],
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AutodiffError> {
    let (a, b) = (values[0], values[1]);
    if a.shape() != b.shape() {
        return Err(mismatch(op, values));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Ok(Tensor::from_vec(a.shape(), data))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| f(*v)).collect())
}

fn forward(op: &Primitive, values: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let x = values[0];
    let out = match op {
        Primitive::Add => elementwise(op, values, |a, b| a + b)?,
        Primitive::Sub => elementwise(op, values, |a, b| a - b)?,
        Primitive::Mul => elementwise(op, values, |a, b| a * b)?,
        Primitive::Div => elementwise(op, values, |a, b| a / b)?,
        Primitive::AddRow => {
            let row = values[1];
            if row.rank() != 1 || x.rank() == 0 || x.last_dim() != row.len() {
                return Err(mismatch(op, values));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_exact_mut(row.len()) {
                axpy(chunk, 1.0, row.data());
            }
            out
        }
        Primitive::BroadcastRows(n) => {
            if x.rank() != 1 {
                return Err(mismatch(op, values));
            }
            let mut data = Vec::with_capacity(n * x.len());
            for _ in 0..*n {
                data.extend_from_slice(x.data());
            }
            Tensor::from_vec(&[*n, x.len()], data)
        }
        Primitive::Scale(c) => unary(x, |v| v * c),
        Primitive::AddScalar(c) => unary(x, |v| v + c),
        Primitive::MulScalar => {
            if values[1].len() != 1 {
                return Err(mismatch(op, values));
            }
            let s = values[1].item();
            unary(x, |v| v * s)
        }
        Primitive::MatMul => {
            let b = values[1];
            if x.rank() != 2 || !(b.rank() == 1 || b.rank() == 2) || x.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, values));
            }
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = if b.rank() == 1 { 1 } else { b.shape()[1] };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, x.data(), false, b.data(), false, &mut c, 0.0);
            if b.rank() == 1 {
                Tensor::from_vec(&[m], c)
            } else {
                Tensor::from_vec(&[m, n], c)
            }
        }
        Primitive::Relu => unary(x, |v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Softmax | Primitive::LogSoftmax => {
            if x.rank() == 0 || x.last_dim() == 0 {
                return Err(mismatch(op, values));
            }
            let k = x.last_dim();
            let log = matches!(op, Primitive::LogSoftmax);
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(k) {
                softmax_row(row, log);
            }
            out
        }
        Primitive::Ln => unary(x, f64::ln),
        Primitive::Sin => unary(x, f64::sin),
        Primitive::Cos => unary(x, f64::cos),
        Primitive::Sqrt => unary(x, f64::sqrt),
        Primitive::Sum => Tensor::scalar(x.data().iter().sum()),
        Primitive::Mean => {
            if x.is_empty() {
                return Err(mismatch(op, values));
            }
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Primitive::SumRows => {
            if x.rank() != 2 {
                return Err(mismatch(op, values));
            }
            let k = x.shape()[1];
            let mut out = vec![0.0; k];
            for row in x.data().chunks_exact(k) {
                axpy(&mut out, 1.0, row);
            }
            Tensor::vector(out)
        }
        Primitive::Concat => {
            let lead = &x.shape()[..x.rank().saturating_sub(1)];
            if x.rank() == 0
                || values
                    .iter()
                    .any(|v| v.rank() != x.rank() || &v.shape()[..v.rank() - 1] != lead)
            {
                return Err(mismatch(op, values));
            }
            let rows = x.leading();
            let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, w) in values.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_vec(&shape, data)
        }
        Primitive::Reshape(shape) => {
            if shape.iter().product::<usize>() != x.len() {
                return Err(mismatch(op, values));
            }
            x.clone().reshaped(shape)
        }
        Primitive::Cross => {
            let b = values[1];
            if x.shape() != [3] || b.shape() != [3] {
                return Err(mismatch(op, values));
            }
            let (a, b) = (x.data(), b.data());
            Tensor::vector(cross3([a[0], a[1], a[2]], [b[0], b[1], b[2]]).to_vec())
        }
        Primitive::Normalize => {
            if x.shape() != [3] {
                return Err(mismatch(op, values));
            }
            let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AutodiffError::Domain {
                    op: op.name(),
                    detail: "zero-length vector".into(),
                });
            }
            unary(x, |v| v / norm)
        }
    };
    Ok(out)
}

/// In-place (log-)softmax of one row, max-subtracted.
pub(crate) fn softmax_row(row: &mut [f64], log: bool) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v -= max;
        total += v.exp();
    }
    if log {
        let log_total = total.ln();
        for v in row.iter_mut() {
            *v -= log_total;
        }
    } else {
        for v in row.iter_mut() {
            *v = v.exp() / total;
        }
    }
}
