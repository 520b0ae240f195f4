use super::{AutodiffError, NodeId, Primitive, Tape};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Shorthands for [`Tape::record`].
impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Div, &[a, b])
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        self.record(Primitive::AddRow, &[m, row])
    }

    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        self.record(Primitive::BroadcastRows(rows), &[v])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Primitive::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Primitive::AddScalar(c), &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.record(Primitive::MulScalar, &[a, s])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Relu, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::LogSoftmax, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Ln, &[a])
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sin, &[a])
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Cos, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sqrt, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Mean, &[a])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::SumRows, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(Primitive::Concat, parts)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn cross(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Cross, &[a, b])
    }

    pub fn normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Normalize, &[a])
    }

    /// `sum(a * b)` for equal shapes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }
}
