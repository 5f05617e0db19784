//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] owns every value computed during one forward pass. Handles
//! ([`Var`]) are cheap copies that index into it. [`Graph::backward`]
//! walks the tape in reverse once; dropping the graph frees it.
//!
//! Shape mismatches inside graph ops are programming errors and panic; the
//! public module entry points validate user-facing shapes first and return
//! [`crate::Error::Contract`].

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::OnceLock;

use super::kernels::{self, ConvGeom};
use super::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Silu(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Sum(usize),
    RowSum(usize),
    ColSum(usize),
    BroadcastRows(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    Concat(Vec<usize>, usize),
    Softmax(usize, usize),
    RowNormalize(usize, f64),
    GroupMax(usize, Vec<usize>),
    SegmentMean(usize, Rc<Vec<Option<usize>>>, Vec<usize>),
    Expand(usize, Rc<Vec<f64>>, usize),
    Conv3d(usize, usize, usize),
    AvgPool2(usize),
    Upsample2(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Silu(..) => "silu",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::ColSum(..) => "col_sum",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::Concat(..) => "concat",
            Op::Softmax(..) => "softmax",
            Op::RowNormalize(..) => "row_normalize",
            Op::GroupMax(..) => "group_max",
            Op::SegmentMean(..) => "segment_mean",
            Op::Expand(..) => "expand",
            Op::Conv3d(..) => "conv3d",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Upsample2(..) => "upsample2",
        }
    }
}

/// Test fixture: `SCKAN_CORRUPT_BACKWARD=<op name>` scales that op's
/// backward rule by 1.5 so the gradient checker can be shown to catch it.
fn corrupted_op() -> Option<&'static str> {
    static CORRUPT: OnceLock<Option<String>> = OnceLock::new();
    CORRUPT.get_or_init(|| std::env::var("SCKAN_CORRUPT_BACKWARD").ok().filter(|s| !s.is_empty())).as_deref()
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Computation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` is not tracked
    /// or the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a 2-D value, got shape {shape:?}");
    (shape[0], shape[1])
}

fn dims_vol(shape: &[usize]) -> (usize, [usize; 3]) {
    assert_eq!(shape.len(), 4, "expected [C, H, W, Z], got {shape:?}");
    (shape[0], [shape[1], shape[2], shape[3]])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, tracked });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, shape: &[usize], data: Vec<f64>) -> Var<'_> {
        assert_eq!(numel(shape), data.len(), "param shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Var<'_> {
        assert_eq!(numel(shape), data.len(), "constant shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(&[1], vec![v])
    }

    /// Leaf mirroring `t`; tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Concatenates 2-D values along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        assert!(axis < 2);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let shapes: Vec<(usize, usize)> = ids.iter().map(|&i| dims2(&nodes[i].shape)).collect();
            if axis == 0 {
                let cols = shapes[0].1;
                assert!(shapes.iter().all(|s| s.1 == cols), "concat rows: column mismatch");
                let rows = shapes.iter().map(|s| s.0).sum();
                let mut v = Vec::with_capacity(rows * cols);
                for &i in &ids {
                    v.extend_from_slice(&nodes[i].value);
                }
                (vec![rows, cols], v)
            } else {
                let rows = shapes[0].0;
                assert!(shapes.iter().all(|s| s.0 == rows), "concat cols: row mismatch");
                let cols: usize = shapes.iter().map(|s| s.1).sum();
                let mut v = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for (&i, s) in ids.iter().zip(&shapes) {
                        v.extend_from_slice(&nodes[i].value[r * s.1..(r + 1) * s.1]);
                    }
                }
                (vec![rows, cols], v)
            }
        };
        let tracked = self.tracked(&ids);
        self.push(shape, value, Op::Concat(ids, axis), tracked)
    }

    /// Lifts an externally evaluated map `x ↦ y ∈ R^{numel(x)·width}` with
    /// known local derivatives `∂y[j, b] / ∂x[j] = derivs[j·width + b]`.
    /// Output shape is `x.shape ++ [width]`.
    pub fn expand<'g>(&'g self, x: Var<'g>, values: Vec<f64>, derivs: Vec<f64>, width: usize) -> Var<'g> {
        let mut shape = x.shape();
        assert_eq!(values.len(), numel(&shape) * width);
        assert_eq!(derivs.len(), values.len());
        shape.push(width);
        let tracked = self.tracked(&[x.id]);
        self.push(shape, values, Op::Expand(x.id, Rc::new(derivs), width), tracked)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[loss.id].tracked {
            return Grads { grads };
        }
        grads[loss.id] = Some(vec![1.0]);
        let corrupt = corrupted_op();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[id].take() else { continue };
            if corrupt == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            backward_node(&nodes, id, &g, &mut grads);
        }
        Grads { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].tracked {
        return;
    }
    debug_assert_eq!(contrib.len(), nodes[id].value.len());
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot => *slot = Some(contrib),
    }
}

fn accumulate_with(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce() -> Vec<f64>) {
    if nodes[id].tracked {
        let c = f();
        accumulate(nodes, grads, id, c);
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| -> &[f64] { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate_with(nodes, grads, *b, || g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate_with(nodes, grads, *a, || g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate_with(nodes, grads, *b, || g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate_with(nodes, grads, *a, || g.iter().zip(bv).map(|(g, b)| g / b).collect());
            accumulate_with(nodes, grads, *b, || g.iter().zip(av).zip(bv).map(|((g, a), b)| -g * a / (b * b)).collect());
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MulScalar(a, c) => accumulate(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::Exp(a) => accumulate(nodes, grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
        Op::Log(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, g.iter().zip(av).map(|(g, x)| g / x).collect())
        }
        Op::Sqrt(a) => accumulate(nodes, grads, *a, g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect()),
        Op::Silu(a) => {
            let av = val(*a);
            // σ(x) recovered from the stored output y = x·σ(x) away from 0
            let d = g
                .iter()
                .zip(av)
                .zip(y)
                .map(|((g, &x), &yv)| {
                    let s = if x.abs() > 1e-3 { yv / x } else { sigmoid(x) };
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accumulate(nodes, grads, *a, d)
        }
        Op::Relu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())
        }
        Op::ClampMin(a, lo) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, g.iter().zip(av).map(|(g, &x)| if x >= *lo { *g } else { 0.0 }).collect())
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).len()]),
        Op::RowSum(a) => {
            let (m, n) = dims2(&nodes[*a].shape);
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                d[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = g[r]);
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::ColSum(a) => {
            let (m, n) = dims2(&nodes[*a].shape);
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                d[r * n..(r + 1) * n].copy_from_slice(g);
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::BroadcastRows(a) => {
            let (m, n) = dims2(&node.shape);
            let mut d = vec![0.0; n];
            for r in 0..m {
                d.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(d, g)| *d += g);
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::MatMul(a, b) => {
            let (m, k) = dims2(&nodes[*a].shape);
            let (_, n) = dims2(&nodes[*b].shape);
            let (av, bv) = (val(*a), val(*b));
            accumulate_with(nodes, grads, *a, || {
                // dA[m,k] = G[m,n] · Bᵀ[n,k]
                let mut d = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, (n, 1), bv, (1, n), 0.0, &mut d);
                d
            });
            accumulate_with(nodes, grads, *b, || {
                // dB[k,n] = Aᵀ[k,m] · G[m,n]
                let mut d = vec![0.0; k * n];
                kernels::gemm(k, m, n, av, (1, k), g, (n, 1), 0.0, &mut d);
                d
            });
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(&nodes[*a].shape);
            // output is [n, m]
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] = g[j * m + i];
                }
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Gather(a, idx) => {
            accumulate_with(nodes, grads, *a, || {
                let mut d = vec![0.0; val(*a).len()];
                for (o, &i) in idx.iter().enumerate() {
                    d[i] += g[o];
                }
                d
            });
        }
        Op::Concat(ids, axis) => {
            let (_, total_cols) = dims2(&node.shape);
            let mut row_off = 0;
            let mut col_off = 0;
            for &p in ids {
                let (pr, pc) = dims2(&nodes[p].shape);
                if *axis == 0 {
                    let start = row_off * pc;
                    accumulate_with(nodes, grads, p, || g[start..start + pr * pc].to_vec());
                    row_off += pr;
                } else {
                    accumulate_with(nodes, grads, p, || {
                        let mut d = Vec::with_capacity(pr * pc);
                        for r in 0..pr {
                            let s = r * total_cols + col_off;
                            d.extend_from_slice(&g[s..s + pc]);
                        }
                        d
                    });
                    col_off += pc;
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (m, n) = dims2(&node.shape);
            let mut d = vec![0.0; m * n];
            if *axis == 1 {
                for r in 0..m {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        d[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
            } else {
                for c in 0..n {
                    let dot: f64 = (0..m).map(|r| y[r * n + c] * g[r * n + c]).sum();
                    for r in 0..m {
                        d[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::RowNormalize(a, eps) => {
            let (m, n) = dims2(&node.shape);
            let xv = val(*a);
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                let xs = &xv[r * n..(r + 1) * n];
                let ys = &y[r * n..(r + 1) * n];
                let gs = &g[r * n..(r + 1) * n];
                let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > *eps {
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        d[r * n + j] = (gs[j] - ys[j] * dot) / norm;
                    }
                } else {
                    for j in 0..n {
                        d[r * n + j] = gs[j] / eps;
                    }
                }
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::GroupMax(a, arg) => {
            accumulate_with(nodes, grads, *a, || {
                let mut d = vec![0.0; val(*a).len()];
                for (o, &i) in arg.iter().enumerate() {
                    d[i] += g[o];
                }
                d
            });
        }
        Op::SegmentMean(a, seg, counts) => {
            let (rows, dim) = dims2(&nodes[*a].shape);
            let mut d = vec![0.0; rows * dim];
            for (r, s) in seg.iter().enumerate() {
                if let Some(k) = *s {
                    let inv = 1.0 / counts[k] as f64;
                    for j in 0..dim {
                        d[r * dim + j] = g[k * dim + j] * inv;
                    }
                }
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::Expand(a, derivs, width) => {
            let n = val(*a).len();
            let d = (0..n).map(|j| (0..*width).map(|b| g[j * width + b] * derivs[j * width + b]).sum()).collect();
            accumulate(nodes, grads, *a, d)
        }
        Op::Conv3d(x, w, b) => {
            let (cin, dims) = dims_vol(&nodes[*x].shape);
            let ws = &nodes[*w].shape;
            let geom = ConvGeom { cin, cout: ws[0], ks: ws[2], dims };
            let want = (nodes[*x].tracked, nodes[*w].tracked, nodes[*b].tracked);
            let (dx, dw, db) = kernels::conv3d_backward(val(*x), val(*w), g, &geom, want);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let Some(db) = db {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::AvgPool2(a) => {
            let (c, dims) = dims_vol(&nodes[*a].shape);
            accumulate(nodes, grads, *a, kernels::avg_pool2_backward(g, c, dims));
        }
        Op::Upsample2(a) => {
            let (c, dims) = dims_vol(&nodes[*a].shape);
            accumulate(nodes, grads, *a, kernels::upsample2_backward(g, c, dims));
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    /// Borrow of the recorded value. Do not hold it across op calls.
    pub fn value_ref(&self) -> Ref<'g, [f64]> {
        Ref::map(self.graph.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn value(&self) -> Vec<f64> {
        self.value_ref().to_vec()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.value_ref()[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id].tracked
    }

    /// Same value as an untracked constant: no gradient flows back through it.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant(&self.shape(), self.value())
    }

    /// Copies the value into a standalone tensor (no gradient).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape(), self.value()).expect("graph values are shape-consistent")
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        let tracked = self.is_tracked();
        self.graph.push(shape, value, op, tracked)
    }

    fn binary(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        debug_assert!(std::ptr::eq(self.graph, other.graph));
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert_eq!(a.value.len(), b.value.len(), "{}: shape mismatch {:?} vs {:?}", op.name(), a.shape, b.shape);
            (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
        };
        let tracked = self.graph.tracked(&[self.id, other.id]);
        self.graph.push(shape, value, op, tracked)
    }

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn div(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, Op::Div(self.id, o.id), |a, b| a / b)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::MulScalar(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'g> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// `max(x, lo)`; gradient passes only where `x >= lo`.
    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        self.unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value_ref().iter().sum();
        let tracked = self.is_tracked();
        self.graph.push(vec![1], vec![s], Op::Sum(self.id), tracked)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// `[m, n] -> [m, 1]`.
    pub fn row_sum(self) -> Var<'g> {
        let (m, n) = dims2(&self.shape());
        let v: Vec<f64> = {
            let x = self.value_ref();
            (0..m).map(|r| x[r * n..(r + 1) * n].iter().sum()).collect()
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![m, 1], v, Op::RowSum(self.id), tracked)
    }

    /// `[m, n] -> [1, n]`.
    pub fn col_sum(self) -> Var<'g> {
        let (m, n) = dims2(&self.shape());
        let v: Vec<f64> = {
            let x = self.value_ref();
            let mut acc = vec![0.0; n];
            for r in 0..m {
                acc.iter_mut().zip(&x[r * n..(r + 1) * n]).for_each(|(a, v)| *a += v);
            }
            acc
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![1, n], v, Op::ColSum(self.id), tracked)
    }

    /// `[1, n] -> [m, n]` by repeating the row.
    pub fn broadcast_rows(self, m: usize) -> Var<'g> {
        let (r, n) = dims2(&self.shape());
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let v = {
            let x = self.value_ref();
            let mut v = Vec::with_capacity(m * n);
            for _ in 0..m {
                v.extend_from_slice(&x);
            }
            v
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![m, n], v, Op::BroadcastRows(self.id), tracked)
    }

    pub fn matmul(self, o: Var<'g>) -> Var<'g> {
        let (m, k) = dims2(&self.shape());
        let (k2, n) = dims2(&o.shape());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        {
            let a = self.value_ref();
            let b = o.value_ref();
            kernels::gemm(m, k, n, &a, (k, 1), &b, (n, 1), 0.0, &mut out);
        }
        let tracked = self.graph.tracked(&[self.id, o.id]);
        self.graph.push(vec![m, n], out, Op::MatMul(self.id, o.id), tracked)
    }

    pub fn t(self) -> Var<'g> {
        let (m, n) = dims2(&self.shape());
        let v = {
            let x = self.value_ref();
            let mut v = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    v[j * m + i] = x[i * n + j];
                }
            }
            v
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![n, m], v, Op::Transpose(self.id), tracked)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        let v = self.value();
        let tracked = self.is_tracked();
        self.graph.push(shape.to_vec(), v, Op::Reshape(self.id), tracked)
    }

    /// Picks flat elements `idx`; result has shape `shape`.
    pub fn gather(self, idx: Vec<usize>, shape: &[usize]) -> Var<'g> {
        assert_eq!(numel(shape), idx.len());
        let v = {
            let x = self.value_ref();
            idx.iter().map(|&i| x[i]).collect()
        };
        let tracked = self.is_tracked();
        self.graph.push(shape.to_vec(), v, Op::Gather(self.id, Rc::new(idx)), tracked)
    }

    /// Rows `rows` of a 2-D value, in the given order.
    pub fn select_rows(self, rows: &[usize]) -> Var<'g> {
        let (_, n) = dims2(&self.shape());
        let idx = rows.iter().flat_map(|&r| (r * n)..(r + 1) * n).collect();
        self.gather(idx, &[rows.len(), n])
    }

    /// Softmax of a 2-D value along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'g> {
        let (m, n) = dims2(&self.shape());
        assert!(axis < 2);
        let v = {
            let x = self.value_ref();
            let mut v = x.to_vec();
            let (outer, inner, so, si) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
            for o in 0..outer {
                let mx = (0..inner).map(|i| x[o * so + i * si]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..inner {
                    let e = (x[o * so + i * si] - mx).exp();
                    v[o * so + i * si] = e;
                    z += e;
                }
                for i in 0..inner {
                    v[o * so + i * si] /= z;
                }
            }
            v
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![m, n], v, Op::Softmax(self.id, axis), tracked)
    }

    /// Each row divided by `max(‖row‖, eps)`.
    pub fn row_normalize(self, eps: f64) -> Var<'g> {
        let (m, n) = dims2(&self.shape());
        let v = {
            let x = self.value_ref();
            let mut v = x.to_vec();
            for r in 0..m {
                let row = &mut v[r * n..(r + 1) * n];
                let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
                row.iter_mut().for_each(|a| *a /= norm);
            }
            v
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![m, n], v, Op::RowNormalize(self.id, eps), tracked)
    }

    /// `[m, G·k] -> [m, G]`: max over each consecutive block of `k`
    /// columns (first maximum wins ties).
    pub fn group_max(self, k: usize) -> Var<'g> {
        let (m, n) = dims2(&self.shape());
        assert!(k > 0 && n % k == 0, "group_max: {n} columns not divisible by {k}");
        let groups = n / k;
        let (v, arg) = {
            let x = self.value_ref();
            let mut v = Vec::with_capacity(m * groups);
            let mut arg = Vec::with_capacity(m * groups);
            for r in 0..m {
                for gi in 0..groups {
                    let base = r * n + gi * k;
                    let mut best = base;
                    for j in base + 1..base + k {
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    v.push(x[best]);
                    arg.push(best);
                }
            }
            (v, arg)
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![m, groups], v, Op::GroupMax(self.id, arg), tracked)
    }

    /// Mean of the rows assigned to each of `k` segments: `[N, D] -> [k, D]`.
    /// Rows with `None` are ignored. Every segment must be non-empty.
    pub fn segment_mean(self, segments: Rc<Vec<Option<usize>>>, k: usize) -> Var<'g> {
        let (rows, dim) = dims2(&self.shape());
        assert_eq!(segments.len(), rows, "segment_mean: one label per row");
        let mut counts = vec![0usize; k];
        for s in segments.iter().flatten() {
            counts[*s] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "segment_mean: empty segment");
        let v = {
            let x = self.value_ref();
            let mut v = vec![0.0; k * dim];
            for (r, s) in segments.iter().enumerate() {
                if let Some(s) = *s {
                    for j in 0..dim {
                        v[s * dim + j] += x[r * dim + j];
                    }
                }
            }
            for (s, &c) in counts.iter().enumerate() {
                v[s * dim..(s + 1) * dim].iter_mut().for_each(|a| *a /= c as f64);
            }
            v
        };
        let tracked = self.is_tracked();
        self.graph.push(vec![k, dim], v, Op::SegmentMean(self.id, segments, counts), tracked)
    }

    /// Same-padded 3D convolution: `self` is `[Cin, H, W, Z]`, `weight` is
    /// `[Cout, Cin, k, k, k]` (odd `k`), `bias` is `[Cout]`.
    pub fn conv3d(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        let (cin, dims) = dims_vol(&self.shape());
        let ws = weight.shape();
        assert_eq!(ws.len(), 5, "conv weight must be 5-D");
        assert_eq!(ws[1], cin, "conv input channels");
        assert!(ws[2] % 2 == 1 && ws[2] == ws[3] && ws[3] == ws[4], "odd cubic kernel");
        assert_eq!(bias.numel(), ws[0], "conv bias length");
        let geom = ConvGeom { cin, cout: ws[0], ks: ws[2], dims };
        let out = {
            let x = self.value_ref();
            let w = weight.value_ref();
            let b = bias.value_ref();
            kernels::conv3d_forward(&x, &w, &b, &geom)
        };
        let tracked = self.graph.tracked(&[self.id, weight.id, bias.id]);
        self.graph.push(vec![geom.cout, dims[0], dims[1], dims[2]], out, Op::Conv3d(self.id, weight.id, bias.id), tracked)
    }

    /// 2×2×2 average pooling (equals trilinear ×½ resampling).
    pub fn avg_pool2(self) -> Var<'g> {
        let (c, dims) = dims_vol(&self.shape());
        assert!(dims.iter().all(|d| d % 2 == 0), "avg_pool2 needs even dims");
        let out = kernels::avg_pool2_forward(&self.value_ref(), c, dims);
        let tracked = self.is_tracked();
        self.graph.push(vec![c, dims[0] / 2, dims[1] / 2, dims[2] / 2], out, Op::AvgPool2(self.id), tracked)
    }

    /// Trilinear ×2 upsampling with half-pixel centers.
    pub fn upsample2(self) -> Var<'g> {
        let (c, dims) = dims_vol(&self.shape());
        let out = kernels::upsample2_forward(&self.value_ref(), c, dims);
        let tracked = self.is_tracked();
        self.graph.push(vec![c, dims[0] * 2, dims[1] * 2, dims[2] * 2], out, Op::Upsample2(self.id), tracked)
    }
}
