use crate::error::{Error, Result};

use super::Array2;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Originating operation of a node. Parents always precede the node.
#[derive(Clone, Debug)]
pub enum Op {
    Constant,
    Parameter,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    ExpandRows(NodeId, usize),
    Relu(NodeId),
    /// Elementwise product with a constant mask (dropout).
    ApplyMask(NodeId, Array2),
    Transpose(NodeId),
    MeanRows(NodeId),
    Sum(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Inverse(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Softplus(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    /// `1×n` (or `n×1`) to `n×n` diagonal matrix.
    Diag(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::AddRow(..) => "add-row",
            Op::SubRow(..) => "subtract-row",
            Op::MulRow(..) => "multiply-row",
            Op::ExpandRows(..) => "expand-rows",
            Op::Relu(_) => "relu",
            Op::ApplyMask(..) => "dropout-mask-apply",
            Op::Transpose(_) => "transpose",
            Op::MeanRows(_) => "row-mean",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Scale(..) => "scalar-scale",
            Op::Inverse(_) => "matrix-inverse",
            Op::ConcatCols(_) => "concat-columns",
            Op::ConcatRows(_) => "concat-rows",
            Op::SliceCols(..) => "slice-columns",
            Op::Softplus(_) => "softplus",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Diag(_) => "diag",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::ExpandRows(a, _)
            | Op::Relu(a)
            | Op::ApplyMask(a, _)
            | Op::Transpose(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::Inverse(a)
            | Op::SliceCols(a, _, _)
            | Op::Softplus(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Diag(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Array2,
    pub op: Op,
    pub requires_grad: bool,
}

/// Eagerly evaluated computation graph.
///
/// Each operation computes its value at insertion, so nodes are stored in a
/// valid topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Array2 {
        self.get(id).cloned().unwrap_or_else(|| Array2::zeros(shape.0, shape.1))
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Array2 {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Values of the requested roots.
    pub fn evaluate(&self, roots: &[NodeId]) -> Vec<Array2> {
        roots.iter().map(|&r| self.value(r).clone()).collect()
    }

    fn push(&mut self, value: Array2, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Parameter => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// A leaf that receives a gradient.
    pub fn parameter(&mut self, value: Array2) -> NodeId {
        self.push(value, Op::Parameter)
    }

    fn mismatch(&self, op: &str, ids: &[NodeId]) -> Error {
        let shapes: Vec<String> = ids
            .iter()
            .map(|&i| {
                let (r, c) = self.shape(i);
                format!("{r}x{c}")
            })
            .collect();
        Error::structural(format!("shape mismatch in {op}: [{}]", shapes.join(", ")))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, &[a, b]));
        }
        Ok(())
    }

    fn row_of(&self, op: &str, a: NodeId, row: NodeId) -> Result<()> {
        if self.shape(row) != (1, self.shape(a).1) {
            return Err(self.mismatch(op, &[a, row]));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("subtract", a, b)?;
        let v = self.value(a).sub(self.value(b));
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("multiply", a, b)?;
        let v = self.value(a).hadamard(self.value(b));
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_of("add-row", a, row)?;
        let v = self.value(a).add_row(self.value(row));
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_of("subtract-row", a, row)?;
        let v = self.value(a).sub_row(self.value(row));
        Ok(self.push(v, Op::SubRow(a, row)))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_of("multiply-row", a, row)?;
        let v = self.value(a).mul_row(self.value(row));
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn expand_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        if self.shape(a).0 != 1 || rows == 0 {
            return Err(self.mismatch("expand-rows", &[a]));
        }
        let v = self.value(a).expand_rows(rows);
        Ok(self.push(v, Op::ExpandRows(a, rows)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn apply_mask(&mut self, a: NodeId, mask: Array2) -> Result<NodeId> {
        if mask.shape() != self.shape(a) {
            let (r, c) = mask.shape();
            let (ar, ac) = self.shape(a);
            return Err(Error::structural(format!(
                "shape mismatch in dropout-mask-apply: [{ar}x{ac}, mask {r}x{c}]"
            )));
        }
        let v = self.value(a).hadamard(&mask);
        Ok(self.push(v, Op::ApplyMask(a, mask)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Mean over rows, giving a `1×c` row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).0 == 0 {
            return Err(self.mismatch("row-mean", &[a]));
        }
        let v = self.value(a).mean_rows();
        Ok(self.push(v, Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).inverse()?;
        Ok(self.push(v, Op::Inverse(a)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.shape(p).0);
        if parts.is_empty() || parts.iter().any(|&p| Some(self.shape(p).0) != rows) {
            return Err(self.mismatch("concat-columns", parts));
        }
        let arrays: Vec<&Array2> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Array2::concat_cols(&arrays);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map(|&p| self.shape(p).1);
        if parts.is_empty() || parts.iter().any(|&p| Some(self.shape(p).1) != cols) {
            return Err(self.mismatch("concat-rows", parts));
        }
        let arrays: Vec<&Array2> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Array2::concat_rows(&arrays);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        if start > end || end > self.shape(a).1 {
            return Err(Error::structural(format!(
                "slice-columns {start}..{end} out of range for {} columns",
                self.shape(a).1
            )));
        }
        let v = self.value(a).slice_cols(start, end);
        Ok(self.push(v, Op::SliceCols(a, start, end)))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != 1 && c != 1 {
            return Err(self.mismatch("diag", &[a]));
        }
        let v = Array2::diag_from(self.value(a));
        Ok(self.push(v, Op::Diag(a)))
    }

    /// Convenience: `a + constant`.
    pub fn add_const(&mut self, a: NodeId, c: Array2) -> Result<NodeId> {
        let c = self.constant(c);
        self.add(a, c)
    }

    /// Reverse sweep from a `1×1` loss.
    ///
    /// Every node that depends on a parameter receives the sum over all paths
    /// of its contribution to the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::contract(format!("backward needs a 1x1 loss, got {r}x{c}")));
        }
        if let Some((i, n)) = self.nodes[..=loss.0].iter().enumerate().find(|(_, n)| !n.value.is_finite()) {
            return Err(Error::numeric(format!("non-finite value at node {i} ({})", n.op.name())));
        }
        let mut grads: Vec<Option<Array2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, contribution) in self.local_gradients(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_gradients(&self, node: &Node, g: &Array2) -> Vec<(NodeId, Array2)> {
        let val = |id: NodeId| self.value(id);
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Constant | Op::Parameter => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    out.push((*a, g.matmul_t(val(*b))));
                }
                if needs(*b) {
                    out.push((*b, val(*a).t_matmul(g)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))), (*b, g.hadamard(val(*a)))],
            Op::AddRow(a, r) => vec![(*a, g.clone()), (*r, g.sum_rows())],
            Op::SubRow(a, r) => vec![(*a, g.clone()), (*r, g.sum_rows().scale(-1.0))],
            Op::MulRow(a, r) => vec![(*a, g.mul_row(val(*r))), (*r, g.hadamard(val(*a)).sum_rows())],
            Op::ExpandRows(a, _) => vec![(*a, g.sum_rows())],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }))],
            Op::ApplyMask(a, mask) => vec![(*a, g.hadamard(mask))],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::MeanRows(a) => {
                let rows = self.shape(*a).0;
                vec![(*a, g.scale(1.0 / rows as f64).expand_rows(rows))]
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, Array2::filled(r, c, g.item()))]
            }
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |gi, x| 2.0 * x * gi))],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Inverse(a) => {
                // d(X⁻¹) = -X⁻¹ dX X⁻¹, so dL/dX = -X⁻ᵀ G X⁻ᵀ
                let inv_t = node.value.transpose();
                vec![(*a, inv_t.matmul(g).matmul(&inv_t).scale(-1.0))]
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = self.shape(p).1;
                        let piece = g.slice_cols(start, start + w);
                        start += w;
                        (p, piece)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let h = self.shape(p).0;
                        let data = g.as_slice()[start * cols..(start + h) * cols].to_vec();
                        start += h;
                        (p, Array2::from_vec(h, cols, data).expect("row block"))
                    })
                    .collect()
            }
            Op::SliceCols(a, s, _) => {
                let (r, c) = self.shape(*a);
                let mut full = Array2::zeros(r, c);
                for row in 0..r {
                    full.row_mut(row)[*s..*s + g.cols()].copy_from_slice(g.row(row));
                }
                vec![(*a, full)]
            }
            Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |gi, x| gi * sigmoid(x)))],
            Op::Sin(a) => vec![(*a, g.zip_map(val(*a), |gi, x| gi * x.cos()))],
            Op::Cos(a) => vec![(*a, g.zip_map(val(*a), |gi, x| -gi * x.sin()))],
            Op::Diag(a) => {
                let (r, c) = self.shape(*a);
                let d = g.diagonal();
                vec![(*a, Array2::from_vec(r, c, d).expect("diagonal length"))]
            }
        }
    }
}
