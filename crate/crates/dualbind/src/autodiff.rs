//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded on a [`Tape`] in insertion order, so topological
//! order is free. Backward rules are themselves expressed through the public
//! op functions; when [`gradient`] is called with `create_graph = true` the
//! produced gradients are recorded on the same tape, which makes a second
//! backward pass through them valid. This is the path the DSM loss needs:
//! the loss depends on a coordinate gradient of the energy and is then
//! differentiated again with respect to the parameters.
//!
//! Tensors are 2-D throughout (scalars are `[1, 1]`). Elementwise ops accept
//! equal shapes or a scalar on either side.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("cannot differentiate through a gradient computed with create_graph = false")]
    TaintedGradient,
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("index {index} out of bounds for {len} elements in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("op {0} has no second-order backward rule")]
    NoSecondOrder(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// The closed op set. Every op has a backward rule written in terms of the
/// ops below, so every op is second-order safe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Transpose,
    Sum,
    Mean,
    Square,
    Sqrt,
    Exp,
    Tanh,
    Gather,
    ScatterAdd,
    Concat,
}

pub const ALL_OPS: &[OpKind] = &[
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Neg,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Square,
    OpKind::Sqrt,
    OpKind::Exp,
    OpKind::Tanh,
    OpKind::Gather,
    OpKind::ScatterAdd,
    OpKind::Concat,
];

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Exp => "exp",
            OpKind::Tanh => "tanh",
            OpKind::Gather => "gather",
            OpKind::ScatterAdd => "scatter_add",
            OpKind::Concat => "concat",
        }
    }

    fn supports_create_graph(self) -> bool {
        // Every rule below is written via recorded ops.
        true
    }
}

#[derive(Clone)]
struct Arg {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<usize>,
}

#[derive(Clone)]
enum NodeOp {
    Leaf,
    Simple(OpKind),
    Gather { indices: Rc<Vec<usize>> },
    ScatterAdd { indices: Rc<Vec<usize>> },
    Concat { axis: usize },
}

impl NodeOp {
    fn kind(&self) -> Option<OpKind> {
        match self {
            NodeOp::Leaf => None,
            NodeOp::Simple(k) => Some(*k),
            NodeOp::Gather { .. } => Some(OpKind::Gather),
            NodeOp::ScatterAdd { .. } => Some(OpKind::ScatterAdd),
            NodeOp::Concat { .. } => Some(OpKind::Concat),
        }
    }
}

struct Node {
    op: NodeOp,
    args: Vec<Arg>,
    out_shape: Vec<usize>,
    out_data: Rc<Vec<f64>>,
}

/// Append-only record of one forward pass. Dropped after the optimizer step.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers a tracked leaf (input/parameter) tensor.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "leaf shape/data mismatch");
        let data = Rc::new(data);
        let id = self.push(Node {
            op: NodeOp::Leaf,
            args: vec![],
            out_shape: shape.to_vec(),
            out_data: Rc::clone(&data),
        });
        Tensor {
            shape: shape.to_vec(),
            data,
            tape: Some(self.clone()),
            node: Some(id),
            tainted: false,
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut v = self.inner.borrow_mut();
        v.push(node);
        v.len() - 1
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense tensor, optionally linked into a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    tape: Option<Tape>,
    node: Option<usize>,
    tainted: bool,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "constant shape/data mismatch");
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            tape: None,
            node: None,
            tainted: false,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1, 1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![1.0; numel(shape)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_tainted(&self) -> bool {
        self.tainted
    }

    /// Copy with no graph linkage. Detached tensors contribute zero gradient.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            tape: None,
            node: None,
            tainted: self.tainted,
        }
    }

    fn taint(mut self) -> Tensor {
        self.tainted = true;
        self
    }
}

// ---------------------------------------------------------------------------
// recording
// ---------------------------------------------------------------------------

fn shared_tape<'a>(inputs: &[&'a Tensor]) -> Result<Option<Tape>> {
    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some(tt) = &t.tape {
            match &tape {
                None => tape = Some(tt.clone()),
                Some(existing) => {
                    if !existing.same(tt) {
                        return Err(AutodiffError::TapeMismatch);
                    }
                }
            }
        }
    }
    Ok(tape)
}

fn record(op: NodeOp, inputs: &[&Tensor], out_shape: Vec<usize>, out_data: Vec<f64>) -> Result<Tensor> {
    let tape = shared_tape(inputs)?;
    let tainted = inputs.iter().any(|t| t.tainted);
    let data = Rc::new(out_data);
    match tape {
        Some(tape) => {
            let args = inputs
                .iter()
                .map(|t| Arg {
                    shape: t.shape.clone(),
                    data: Rc::clone(&t.data),
                    node: if t.tape.as_ref().map(|tt| tt.same(&tape)).unwrap_or(false) {
                        t.node
                    } else {
                        None
                    },
                })
                .collect();
            let id = tape.push(Node {
                op,
                args,
                out_shape: out_shape.clone(),
                out_data: Rc::clone(&data),
            });
            Ok(Tensor {
                shape: out_shape,
                data,
                tape: Some(tape),
                node: Some(id),
                tainted,
            })
        }
        None => Ok(Tensor {
            shape: out_shape,
            data,
            tape: None,
            node: None,
            tainted,
        }),
    }
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

fn binary_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape {
        Ok(a.shape.clone())
    } else if b.is_scalar() {
        Ok(a.shape.clone())
    } else if a.is_scalar() {
        Ok(b.shape.clone())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn elementwise(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    let (ad, bd) = (&a.data, &b.data);
    if a.data.len() == n && b.data.len() == n {
        for i in 0..n {
            out.push(f(ad[i], bd[i]));
        }
    } else if b.is_scalar() {
        let bv = bd[0];
        for i in 0..n {
            out.push(f(ad[i], bv));
        }
    } else {
        let av = ad[0];
        for i in 0..n {
            out.push(f(av, bd[i]));
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("add", self, other)?;
        let data = elementwise(self, other, &shape, |a, b| a + b);
        record(NodeOp::Simple(OpKind::Add), &[self, other], shape, data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("sub", self, other)?;
        let data = elementwise(self, other, &shape, |a, b| a - b);
        record(NodeOp::Simple(OpKind::Sub), &[self, other], shape, data)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("mul", self, other)?;
        let data = elementwise(self, other, &shape, |a, b| a * b);
        record(NodeOp::Simple(OpKind::Mul), &[self, other], shape, data)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shapes("div", self, other)?;
        let data = elementwise(self, other, &shape, |a, b| a / b);
        record(NodeOp::Simple(OpKind::Div), &[self, other], shape, data)
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|v| -v).collect();
        record(NodeOp::Simple(OpKind::Neg), &[self], self.shape.clone(), data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * c];
        let (ad, bd) = (&self.data, &other.data);
        for i in 0..r {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * c..(p + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += av * brow[j];
                }
            }
        }
        record(NodeOp::Simple(OpKind::MatMul), &[self, other], vec![r, c], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        record(NodeOp::Simple(OpKind::Transpose), &[self], vec![c, r], out)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        record(NodeOp::Simple(OpKind::Sum), &[self], vec![1, 1], vec![s])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        let n = self.data.len() as f64;
        record(NodeOp::Simple(OpKind::Mean), &[self], vec![1, 1], vec![s / n])
    }

    pub fn square(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|v| v * v).collect();
        record(NodeOp::Simple(OpKind::Square), &[self], self.shape.clone(), data)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|v| v.sqrt()).collect();
        record(NodeOp::Simple(OpKind::Sqrt), &[self], self.shape.clone(), data)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|v| v.exp()).collect();
        record(NodeOp::Simple(OpKind::Exp), &[self], self.shape.clone(), data)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|v| v.tanh()).collect();
        record(NodeOp::Simple(OpKind::Tanh), &[self], self.shape.clone(), data)
    }

    /// Gathers flat indices of `self` into a tensor of shape `out_shape`.
    pub fn gather(&self, indices: &[usize], out_shape: &[usize]) -> Result<Tensor> {
        if numel(out_shape) != indices.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: out_shape.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(indices.len());
        for &ix in indices {
            if ix >= self.data.len() {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "gather",
                    index: ix,
                    len: self.data.len(),
                });
            }
            out.push(self.data[ix]);
        }
        record(
            NodeOp::Gather {
                indices: Rc::new(indices.to_vec()),
            },
            &[self],
            out_shape.to_vec(),
            out,
        )
    }

    /// Scatter-adds the flat elements of `self` into a zero tensor of shape
    /// `out_shape`: `out[indices[k]] += self[k]`.
    pub fn scatter_add(&self, indices: &[usize], out_shape: &[usize]) -> Result<Tensor> {
        if indices.len() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add",
                lhs: self.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let n = numel(out_shape);
        let mut out = vec![0.0; n];
        for (k, &ix) in indices.iter().enumerate() {
            if ix >= n {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "scatter_add",
                    index: ix,
                    len: n,
                });
            }
            out[ix] += self.data[k];
        }
        record(
            NodeOp::ScatterAdd {
                indices: Rc::new(indices.to_vec()),
            },
            &[self],
            out_shape.to_vec(),
            out,
        )
    }

    /// Gathers whole rows of a 2-D tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let c = self.shape[1];
        let mut flat = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            for j in 0..c {
                flat.push(r * c + j);
            }
        }
        self.gather(&flat, &[rows.len(), c])
    }

    /// Scatter-adds rows of `self` into a zero `[n_rows, c]` tensor.
    pub fn scatter_add_rows(&self, rows: &[usize], n_rows: usize) -> Result<Tensor> {
        let c = self.shape[1];
        let mut flat = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            for j in 0..c {
                flat.push(r * c + j);
            }
        }
        self.scatter_add(&flat, &[n_rows, c])
    }
}

/// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    assert!(axis < 2, "concat axis must be 0 or 1");
    let other = 1 - axis;
    let base = parts[0].shape.clone();
    for p in parts.iter().skip(1) {
        if p.shape.len() != 2 || p.shape[other] != base[other] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let out_shape = if axis == 0 {
        vec![total, base[1]]
    } else {
        vec![base[0], total]
    };
    let mut out = vec![0.0; numel(&out_shape)];
    if axis == 0 {
        let mut off = 0;
        for p in parts {
            out[off..off + p.data.len()].copy_from_slice(&p.data);
            off += p.data.len();
        }
    } else {
        let rows = base[0];
        let mut col_off = 0;
        for p in parts {
            let pc = p.shape[1];
            for i in 0..rows {
                out[i * total + col_off..i * total + col_off + pc]
                    .copy_from_slice(&p.data[i * pc..(i + 1) * pc]);
            }
            col_off += pc;
        }
    }
    record(NodeOp::Concat { axis }, parts, out_shape, out)
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

fn arg_tensor(tape: &Tape, arg: &Arg, create_graph: bool) -> Tensor {
    Tensor {
        shape: arg.shape.clone(),
        data: Rc::clone(&arg.data),
        tape: if create_graph && arg.node.is_some() {
            Some(tape.clone())
        } else {
            None
        },
        node: if create_graph { arg.node } else { None },
        tainted: false,
    }
}

fn out_tensor(tape: &Tape, id: usize, node: &Node, create_graph: bool) -> Tensor {
    Tensor {
        shape: node.out_shape.clone(),
        data: Rc::clone(&node.out_data),
        tape: if create_graph { Some(tape.clone()) } else { None },
        node: if create_graph { Some(id) } else { None },
        tainted: false,
    }
}

/// Reduces gradient `g` to `shape` (handles the scalar-broadcast case).
fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g.clone())
    } else if numel(shape) == 1 {
        let s = g.sum()?;
        if s.shape() == shape {
            Ok(s)
        } else {
            // sum yields [1,1]; reshape via gather if the target scalar shape differs
            s.gather(&[0], shape)
        }
    } else {
        // g scalar broadcast up to `shape`
        Tensor::ones(shape).mul(g)
    }
}

/// Computes d(output)/d(wrt) for a scalar `output`.
///
/// With `create_graph = true` the returned gradients stay on the tape and can
/// be differentiated again. With `create_graph = false` they are detached and
/// flagged: asking for their gradient later is an error, never silent zeros.
/// Tensors that do not participate in the graph get zero gradients.
pub fn gradient(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.tainted {
        return Err(AutodiffError::TaintedGradient);
    }
    if !output.is_scalar() {
        return Err(AutodiffError::NonScalarOutput(output.shape.clone()));
    }

    let zero_like = |t: &Tensor| {
        let z = Tensor::zeros(t.shape());
        if create_graph {
            z
        } else {
            z.taint()
        }
    };

    let (tape, out_id) = match (&output.tape, output.node) {
        (Some(t), Some(id)) => (t.clone(), id),
        _ => return Ok(wrt.iter().map(|t| zero_like(t)).collect()),
    };

    let node_count = tape.len();
    let mut grads: Vec<Option<Tensor>> = (0..node_count).map(|_| None).collect();
    grads[out_id] = Some(Tensor::ones(&output.shape));

    for id in (0..=out_id).rev() {
        let Some(g) = grads[id].clone() else { continue };
        // Clone out what we need from the node, then release the borrow:
        // backward rules may record new nodes on this same tape.
        let (op, args, out_shape, out_data) = {
            let nodes = tape.inner.borrow();
            let n = &nodes[id];
            (n.op.clone(), n.args.clone(), n.out_shape.clone(), Rc::clone(&n.out_data))
        };
        if let Some(kind) = op.kind() {
            if create_graph && !kind.supports_create_graph() {
                return Err(AutodiffError::NoSecondOrder(kind.name()));
            }
        }
        let node_view = Node {
            op: op.clone(),
            args: args.clone(),
            out_shape,
            out_data,
        };
        let contribs = vjp(&tape, id, &node_view, &g, create_graph)?;
        for (arg, contrib) in args.iter().zip(contribs) {
            let (Some(nid), Some(c)) = (arg.node, contrib) else { continue };
            grads[nid] = Some(match grads[nid].take() {
                Some(existing) => existing.add(&c)?,
                None => c,
            });
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for t in wrt {
        let on_tape = t.tape.as_ref().map(|tt| tt.same(&tape)).unwrap_or(false);
        let g = match (on_tape, t.node) {
            (true, Some(id)) if id < node_count => grads[id].clone(),
            _ => None,
        };
        out.push(match g {
            Some(g) => {
                if create_graph {
                    g
                } else {
                    g.detach().taint()
                }
            }
            None => zero_like(t),
        });
    }
    Ok(out)
}

fn vjp(tape: &Tape, id: usize, node: &Node, g: &Tensor, cg: bool) -> Result<Vec<Option<Tensor>>> {
    let g = if cg { g.clone() } else { g.detach() };
    let arg = |i: usize| arg_tensor(tape, &node.args[i], cg);
    let out = || out_tensor(tape, id, node, cg);
    Ok(match &node.op {
        NodeOp::Leaf => vec![],
        NodeOp::Simple(OpKind::Add) => {
            let (a, b) = (arg(0), arg(1));
            vec![
                Some(reduce_to(&g, a.shape())?),
                Some(reduce_to(&g, b.shape())?),
            ]
        }
        NodeOp::Simple(OpKind::Sub) => {
            let (a, b) = (arg(0), arg(1));
            vec![
                Some(reduce_to(&g, a.shape())?),
                Some(reduce_to(&g.neg()?, b.shape())?),
            ]
        }
        NodeOp::Simple(OpKind::Mul) => {
            let (a, b) = (arg(0), arg(1));
            vec![
                Some(reduce_to(&g.mul(&b)?, a.shape())?),
                Some(reduce_to(&g.mul(&a)?, b.shape())?),
            ]
        }
        NodeOp::Simple(OpKind::Div) => {
            let (a, b) = (arg(0), arg(1));
            let da = reduce_to(&g.div(&b)?, a.shape())?;
            let db = reduce_to(&g.mul(&a.div(&b)?.div(&b)?)?.neg()?, b.shape())?;
            vec![Some(da), Some(db)]
        }
        NodeOp::Simple(OpKind::Neg) => vec![Some(g.neg()?)],
        NodeOp::Simple(OpKind::MatMul) => {
            let (a, b) = (arg(0), arg(1));
            vec![
                Some(g.matmul(&b.transpose()?)?),
                Some(a.transpose()?.matmul(&g)?),
            ]
        }
        NodeOp::Simple(OpKind::Transpose) => vec![Some(g.transpose()?)],
        NodeOp::Simple(OpKind::Sum) => {
            let a = arg(0);
            vec![Some(Tensor::ones(a.shape()).mul(&g)?)]
        }
        NodeOp::Simple(OpKind::Mean) => {
            let a = arg(0);
            let n = a.numel() as f64;
            vec![Some(Tensor::ones(a.shape()).mul(&g.div(&Tensor::scalar(n))?)?)]
        }
        NodeOp::Simple(OpKind::Square) => {
            let a = arg(0);
            vec![Some(g.mul(&a)?.mul(&Tensor::scalar(2.0))?)]
        }
        NodeOp::Simple(OpKind::Sqrt) => {
            let o = out();
            vec![Some(g.div(&o.mul(&Tensor::scalar(2.0))?)?)]
        }
        NodeOp::Simple(OpKind::Exp) => {
            let o = out();
            vec![Some(g.mul(&o)?)]
        }
        NodeOp::Simple(OpKind::Tanh) => {
            let o = out();
            let one_minus = Tensor::ones(o.shape()).sub(&o.square()?)?;
            vec![Some(g.mul(&one_minus)?)]
        }
        NodeOp::Gather { indices } => {
            let a = arg(0);
            vec![Some(g.scatter_add(indices, a.shape())?)]
        }
        NodeOp::ScatterAdd { indices } => {
            let a = arg(0);
            vec![Some(g.gather(indices, a.shape())?)]
        }
        NodeOp::Concat { axis } => {
            let mut grads = Vec::with_capacity(node.args.len());
            let total = node.out_shape[1];
            let mut off = 0;
            for a in &node.args {
                let part = if *axis == 0 {
                    let flat: Vec<usize> = (off..off + numel(&a.shape)).collect();
                    let res = g.gather(&flat, &a.shape)?;
                    off += numel(&a.shape);
                    res
                } else {
                    let rows = node.out_shape[0];
                    let pc = a.shape[1];
                    let mut flat = Vec::with_capacity(rows * pc);
                    for i in 0..rows {
                        for j in 0..pc {
                            flat.push(i * total + off + j);
                        }
                    }
                    let res = g.gather(&flat, &a.shape)?;
                    off += pc;
                    res
                };
                grads.push(Some(part));
            }
            grads
        }
        NodeOp::Simple(k) => unreachable!("op {} handled above", k.name()),
    })
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Compares the analytic gradient of `f` at `point` against central finite
/// differences. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let tape = Tape::new();
    let x = tape.leaf(point.shape(), point.data().to_vec());
    let y = f(&x)?;
    if !y.is_scalar() {
        return Err(AutodiffError::NonScalarOutput(y.shape().to_vec()));
    }
    if !y.item().is_finite() {
        return Err(AutodiffError::NonFinite("finite_difference_check"));
    }
    let analytic = gradient(&y, &[&x], false)?.remove(0);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let p = Tensor::constant(point.shape(), data);
        let v = f(&p)?;
        if !v.item().is_finite() {
            return Err(AutodiffError::NonFinite("finite_difference_check"));
        }
        Ok(v.item())
    };

    let mut max_err = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
