//! Minimal reverse-mode differentiation over a fixed, closed op set.
//!
//! A `Graph` is a flat list of nodes in topological order (inputs always
//! precede their consumers, enforced by the builder API). Loss graphs end in a
//! single 1x1 output node. Leaves are named and bound at evaluation time;
//! constants are embedded in the graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::matrix::{col_softmax, log_sum_exp, softmax_vec, Matrix};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Const(Matrix),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    /// Broadcast-multiply by a 1x1 node.
    ScaleNode(NodeId, NodeId),
    Exp(NodeId),
    ColSoftmax(NodeId),
    /// log-sum-exp over all entries, producing 1x1.
    LogSumExp(NodeId),
    /// Sum over all entries, producing 1x1.
    ReduceSum(NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Transpose(NodeId),
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, name: &str) -> NodeId {
        self.push(Op::Leaf(name.to_string()))
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Const(m))
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Hadamard(a, b))
    }

    pub fn scale_const(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::ScaleConst(a, s))
    }

    pub fn scale_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        self.push(Op::ScaleNode(a, s))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn col_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ColSoftmax(a))
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceSum(a))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn leaf_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Leaf(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn forward(&self, bindings: &HashMap<String, Matrix>) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for (idx, op) in self.nodes.iter().enumerate() {
            let v = match op {
                Op::Leaf(name) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundLeaf(name.clone()))?,
                Op::Const(m) => m.clone(),
                Op::MatMul(a, b) => values[*a].matmul(&values[*b]).map_err(|e| at(idx, e))?,
                Op::Add(a, b) => values[*a].add(&values[*b]).map_err(|e| at(idx, e))?,
                Op::Sub(a, b) => values[*a].sub(&values[*b]).map_err(|e| at(idx, e))?,
                Op::Hadamard(a, b) => values[*a].hadamard(&values[*b]).map_err(|e| at(idx, e))?,
                Op::ScaleConst(a, s) => values[*a].scale(*s),
                Op::ScaleNode(a, s) => {
                    let sv = &values[*s];
                    if sv.shape() != (1, 1) {
                        return Err(Error::InvalidArgument(format!(
                            "node {idx}: scale operand must be 1x1, got {:?}",
                            sv.shape()
                        )));
                    }
                    values[*a].scale(sv.get(0, 0))
                }
                Op::Exp(a) => values[*a].map(f64::exp),
                Op::ColSoftmax(a) => col_softmax(&values[*a]),
                Op::LogSumExp(a) => Matrix::scalar(log_sum_exp(values[*a].data())),
                Op::ReduceSum(a) => Matrix::scalar(values[*a].sum()),
                Op::SliceRows(a, start, len) => values[*a].slice_rows(*start, *len),
                Op::SliceCols(a, start, len) => values[*a].slice_cols(*start, *len),
                Op::ConcatRows(a, b) => {
                    values[*a].concat_rows(&values[*b]).map_err(|e| at(idx, e))?
                }
                Op::ConcatCols(a, b) => {
                    values[*a].concat_cols(&values[*b]).map_err(|e| at(idx, e))?
                }
                Op::Transpose(a) => values[*a].transpose(),
            };
            v.check_finite(&format!("graph node {idx} ({})", op_name(op)))?;
            values.push(v);
        }
        Ok(values)
    }

    fn output_id(&self) -> Result<NodeId> {
        self.output
            .ok_or_else(|| Error::InvalidArgument("graph has no output node".into()))
    }

    /// Forward-evaluate the scalar output.
    pub fn evaluate(&self, bindings: &HashMap<String, Matrix>) -> Result<f64> {
        let out = self.output_id()?;
        let values = self.forward(bindings)?;
        let v = &values[out];
        if v.shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "output node must be 1x1, got {:?}",
                v.shape()
            )));
        }
        Ok(v.get(0, 0))
    }

    /// Exact reverse-mode gradient of the scalar output with respect to the
    /// named leaves. Leaves absent from the graph yield zero matrices.
    pub fn gradient(
        &self,
        bindings: &HashMap<String, Matrix>,
        wrt: &[&str],
    ) -> Result<HashMap<String, Matrix>> {
        for name in wrt {
            if !bindings.contains_key(*name) {
                return Err(Error::NotALeaf((*name).to_string()));
            }
        }
        let out = self.output_id()?;
        let values = self.forward(bindings)?;

        let mut adjoints: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adjoints[out] = Some(Matrix::scalar(1.0));

        let mut grads: HashMap<String, Matrix> = HashMap::new();
        for name in wrt {
            let shape = bindings[*name].shape();
            grads.insert((*name).to_string(), Matrix::zeros(shape.0, shape.1));
        }

        for idx in (0..self.nodes.len()).rev() {
            let g = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx] {
                Op::Leaf(name) => {
                    if let Some(acc) = grads.get_mut(name) {
                        *acc = acc.add(&g)?;
                    }
                }
                Op::Const(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&values[*b].transpose())?;
                    let gb = values[*a].transpose().matmul(&g)?;
                    accumulate(&mut adjoints, *a, ga)?;
                    accumulate(&mut adjoints, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, g.clone())?;
                    accumulate(&mut adjoints, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, *a, g.clone())?;
                    accumulate(&mut adjoints, *b, g.scale(-1.0))?;
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(&values[*b])?;
                    let gb = g.hadamard(&values[*a])?;
                    accumulate(&mut adjoints, *a, ga)?;
                    accumulate(&mut adjoints, *b, gb)?;
                }
                Op::ScaleConst(a, s) => {
                    accumulate(&mut adjoints, *a, g.scale(*s))?;
                }
                Op::ScaleNode(a, s) => {
                    let sv = values[*s].get(0, 0);
                    let gs = Matrix::scalar(g.hadamard(&values[*a])?.sum());
                    accumulate(&mut adjoints, *a, g.scale(sv))?;
                    accumulate(&mut adjoints, *s, gs)?;
                }
                Op::Exp(a) => {
                    accumulate(&mut adjoints, *a, g.hadamard(&values[idx])?)?;
                }
                Op::ColSoftmax(a) => {
                    let s = &values[idx];
                    let mut gx = Matrix::zeros(s.rows, s.cols);
                    for c in 0..s.cols {
                        let dot: f64 = (0..s.rows).map(|r| s.get(r, c) * g.get(r, c)).sum();
                        for r in 0..s.rows {
                            gx.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut adjoints, *a, gx)?;
                }
                Op::LogSumExp(a) => {
                    let gs = g.get(0, 0);
                    let sm = softmax_vec(values[*a].data());
                    let src = &values[*a];
                    let gx = Matrix::from_vec(
                        src.rows,
                        src.cols,
                        sm.into_iter().map(|p| p * gs).collect(),
                    );
                    accumulate(&mut adjoints, *a, gx)?;
                }
                Op::ReduceSum(a) => {
                    let gs = g.get(0, 0);
                    let src = &values[*a];
                    accumulate(
                        &mut adjoints,
                        *a,
                        Matrix::from_vec(src.rows, src.cols, vec![gs; src.rows * src.cols]),
                    )?;
                }
                Op::SliceRows(a, start, _) => {
                    let src = &values[*a];
                    let mut gx = Matrix::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gx.set(start + r, c, g.get(r, c));
                        }
                    }
                    accumulate(&mut adjoints, *a, gx)?;
                }
                Op::SliceCols(a, start, _) => {
                    let src = &values[*a];
                    let mut gx = Matrix::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gx.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut adjoints, *a, gx)?;
                }
                Op::ConcatRows(a, b) => {
                    let ra = values[*a].rows;
                    accumulate(&mut adjoints, *a, g.slice_rows(0, ra))?;
                    accumulate(&mut adjoints, *b, g.slice_rows(ra, g.rows - ra))?;
                }
                Op::ConcatCols(a, b) => {
                    let ca = values[*a].cols;
                    accumulate(&mut adjoints, *a, g.slice_cols(0, ca))?;
                    accumulate(&mut adjoints, *b, g.slice_cols(ca, g.cols - ca))?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut adjoints, *a, g.transpose())?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut adjoints[id] {
        Some(acc) => {
            *acc = acc.add(&g)?;
        }
        slot @ None => {
            *slot = Some(g);
        }
    }
    Ok(())
}

fn at(idx: usize, e: Error) -> Error {
    match e {
        Error::DimMismatch { context, lhs, rhs } => Error::DimMismatch {
            context: format!("node {idx}: {context}"),
            lhs,
            rhs,
        },
        other => other,
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf(_) => "leaf",
        Op::Const(_) => "const",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Hadamard(..) => "hadamard",
        Op::ScaleConst(..) => "scale",
        Op::ScaleNode(..) => "scale",
        Op::Exp(_) => "exp",
        Op::ColSoftmax(_) => "col_softmax",
        Op::LogSumExp(_) => "log_sum_exp",
        Op::ReduceSum(_) => "reduce_sum",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Transpose(_) => "transpose",
    }
}

/// Compare the reverse-mode gradient to central finite differences, entry by
/// entry, over the named leaves. Returns the max relative error with
/// denominator max(|analytic|, |numeric|, 1e-6); the floor keeps f64
/// round-off in the difference quotient (~1e-16/step in absolute terms) from
/// registering as a large relative error on near-zero entries.
pub fn check_gradient(
    graph: &Graph,
    bindings: &HashMap<String, Matrix>,
    wrt: &[&str],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be in (0, 1e-2], got {step}"
        )));
    }
    let analytic = graph.gradient(bindings, wrt)?;
    let mut max_rel = 0.0f64;
    let mut perturbed = bindings.clone();
    for name in wrt {
        let base = bindings[*name].clone();
        let (rows, cols) = base.shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = base.get(r, c);
                let m = perturbed.get_mut(*name).unwrap();
                m.set(r, c, orig + step);
                let plus = graph.evaluate(&perturbed)?;
                let m = perturbed.get_mut(*name).unwrap();
                m.set(r, c, orig - step);
                let minus = graph.evaluate(&perturbed)?;
                let m = perturbed.get_mut(*name).unwrap();
                m.set(r, c, orig);
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[*name].get(r, c);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Matrix)]) -> HashMap<String, Matrix> {
        pairs
            .iter()
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect()
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let sq = g.hadamard(x, x);
        let out = g.reduce_sum(sq);
        g.set_output(out);
        let b = bind(&[("x", Matrix::scalar(3.0))]);
        assert_eq!(g.evaluate(&b).unwrap(), 9.0);
        let grads = g.gradient(&b, &["x"]).unwrap();
        assert_eq!(grads["x"].get(0, 0), 6.0);
    }

    #[test]
    fn lse_of_zeros() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(2, 1));
        let out = g.log_sum_exp(x);
        g.set_output(out);
        let v = g.evaluate(&HashMap::new()).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_unused_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let out = g.reduce_sum(x);
        g.set_output(out);
        let b = bind(&[("x", Matrix::scalar(1.0)), ("y", Matrix::zeros(2, 2))]);
        let grads = g.gradient(&b, &["x", "y"]).unwrap();
        assert_eq!(grads["y"], Matrix::zeros(2, 2));
    }

    #[test]
    fn gradient_of_unbound_name_errors() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let out = g.reduce_sum(x);
        g.set_output(out);
        let b = bind(&[("x", Matrix::scalar(1.0))]);
        assert!(g.gradient(&b, &["nope"]).is_err());
    }

    #[test]
    fn quadratic_check_gradient_near_exact() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let sq = g.hadamard(x, x);
        let out = g.reduce_sum(sq);
        g.set_output(out);
        let b = bind(&[("x", Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]))]);
        let err = check_gradient(&g, &b, &["x"], 1e-4).unwrap();
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn constant_graph_check_gradient_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let c = g.scalar_const(5.0);
        let _ = x;
        let out = g.reduce_sum(c);
        g.set_output(out);
        let b = bind(&[("x", Matrix::scalar(1.0))]);
        let err = check_gradient(&g, &b, &["x"], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn dimension_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 3));
        let m = g.matmul(a, b);
        let out = g.reduce_sum(m);
        g.set_output(out);
        let err = g.evaluate(&HashMap::new()).unwrap_err();
        assert!(err.to_string().contains("node 2"));
    }

    #[test]
    fn softmax_and_lse_gradients_match_fd() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let s = g.col_softmax(x);
        let w = g.constant(Matrix::from_vec(3, 1, vec![0.3, -1.2, 2.0]));
        let wx = g.hadamard(s, w);
        let t = g.reduce_sum(wx);
        let l = g.log_sum_exp(x);
        let out = g.add(t, l);
        g.set_output(out);
        let b = bind(&[("x", Matrix::from_vec(3, 1, vec![0.1, 0.7, -0.4]))]);
        let err = check_gradient(&g, &b, &["x"], 1e-4).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }
}
