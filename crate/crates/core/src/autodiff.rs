//! Minimal reverse-mode automatic differentiation on f64 tensors.
//!
//! A `Tape` records every operation; `backward` walks the record in
//! reverse and accumulates gradients. The op set is exactly what the
//! models need — dense linear algebra on scalars, vectors, and matrices,
//! with no broadcasting beyond matrix-vector products and scalar ops.
//! Desk-scale on purpose: clarity and checkability over throughput.

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Index of a node on its tape. Ids are only meaningful on the tape that
/// produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    MaskedLinear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        mask: NodeId,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and differentiates through it. One tape per
/// forward pass; create leaves, compose ops, call `backward` on a scalar.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    swept: RefCell<bool>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        NodeId(nodes.len() - 1)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    /// A differentiable leaf (a model parameter during training).
    pub fn param(&self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar_const(&self, v: f64) -> NodeId {
        self.constant(vec![], vec![v])
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].shape.clone()
    }

    pub fn value(&self, id: NodeId) -> Vec<f64> {
        self.nodes.borrow()[id.0].data.clone()
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        if numel(&n.shape) != 1 {
            return Err(Error::Model(format!(
                "expected scalar, found shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].shape != nodes[b.0].shape {
            return Err(Error::Model(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                nodes[a.0].shape, nodes[b.0].shape
            )));
        }
        Ok(nodes[a.0].shape.clone())
    }

    // -- elementwise binary ------------------------------------------------

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "add")?;
        let data = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .data
                .iter()
                .zip(&nodes[b.0].data)
                .map(|(x, y)| x + y)
                .collect()
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, data, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "sub")?;
        let data = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .data
                .iter()
                .zip(&nodes[b.0].data)
                .map(|(x, y)| x - y)
                .collect()
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, data, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "mul")?;
        let data = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .data
                .iter()
                .zip(&nodes[b.0].data)
                .map(|(x, y)| x * y)
                .collect()
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, data, Op::Mul(a, b), rg))
    }

    pub fn div(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "div")?;
        let data = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .data
                .iter()
                .zip(&nodes[b.0].data)
                .map(|(x, y)| x / y)
                .collect()
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, data, Op::Div(a, b), rg))
    }

    // -- scalar broadcast --------------------------------------------------

    pub fn add_scalar(&self, a: NodeId, c: f64) -> NodeId {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.data.iter().map(|x| x + c).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, data, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&self, a: NodeId, c: f64) -> NodeId {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.data.iter().map(|x| x * c).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, data, Op::MulScalar(a, c), rg)
    }

    // -- linear algebra ----------------------------------------------------

    /// Matrix product. Accepts [m,k]x[k,n] -> [m,n], [k]x[k,n] -> [n]
    /// (row vector times matrix) and [m,k]x[k] -> [m] (matrix times
    /// column vector). No other broadcasting.
    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].shape.clone(), nodes[b.0].shape.clone())
        };
        let ((m, k1), (k2, n), out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => ((sa[0], sa[1]), (sb[0], sb[1]), vec![sa[0], sb[1]]),
            (1, 2) => ((1, sa[0]), (sb[0], sb[1]), vec![sb[1]]),
            (2, 1) => ((sa[0], sa[1]), (sb[0], 1), vec![sa[0]]),
            _ => {
                return Err(Error::Model(format!(
                    "matmul: unsupported shapes {sa:?} x {sb:?}"
                )))
            }
        };
        if k1 != k2 {
            return Err(Error::Model(format!(
                "matmul: inner dimensions differ ({sa:?} x {sb:?})"
            )));
        }
        let data = {
            let nodes = self.nodes.borrow();
            mat_mul_raw(&nodes[a.0].data, m, k1, &nodes[b.0].data, n)
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out_shape, data, Op::MatMul(a, b), rg))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&self, a: NodeId) -> NodeId {
        let (data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (vec![n.data.iter().sum()], n.requires_grad)
        };
        self.push(vec![], data, Op::Sum(a), rg)
    }

    // -- elementwise unary -------------------------------------------------

    pub fn log(&self, a: NodeId) -> Result<NodeId> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if let Some(bad) = n.data.iter().find(|v| **v <= 0.0) {
                return Err(Error::Model(format!("log of non-positive value {bad}")));
            }
            (
                n.shape.clone(),
                n.data.iter().map(|x| x.ln()).collect(),
                n.requires_grad,
            )
        };
        Ok(self.push(shape, data, Op::Log(a), rg))
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.data.iter().map(|x| x.exp()).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, data, Op::Exp(a), rg)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self, a: NodeId) -> NodeId {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.data.iter().map(|&x| softplus_scalar(x)).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, data, Op::Softplus(a), rg)
    }

    pub fn sigmoid(&self, a: NodeId) -> NodeId {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.data.iter().map(|&x| sigmoid_scalar(x)).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, data, Op::Sigmoid(a), rg)
    }

    /// Softmax over a vector (max-shifted for stability).
    pub fn softmax(&self, a: NodeId) -> Result<NodeId> {
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape.len() != 1 {
                return Err(Error::Model(format!(
                    "softmax expects a vector, found shape {:?}",
                    n.shape
                )));
            }
            let max = n.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = n.data.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            (
                n.shape.clone(),
                exps.iter().map(|e| e / total).collect::<Vec<f64>>(),
                n.requires_grad,
            )
        };
        Ok(self.push(shape, data, Op::Softmax(a), rg))
    }

    /// Concatenation of vectors into one vector.
    pub fn concat(&self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Model("concat of zero vectors".into()));
        }
        let mut data = Vec::new();
        let mut rg = false;
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let n = &nodes[p.0];
                if n.shape.len() != 1 {
                    return Err(Error::Model(format!(
                        "concat expects vectors, found shape {:?}",
                        n.shape
                    )));
                }
                data.extend_from_slice(&n.data);
                rg |= n.requires_grad;
            }
        }
        let len = data.len();
        Ok(self.push(vec![len], data, Op::Concat(parts.to_vec()), rg))
    }

    /// Picks elements of a vector by index, in order, duplicates allowed.
    pub fn gather(&self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (data, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape.len() != 1 {
                return Err(Error::Model(format!(
                    "gather expects a vector, found shape {:?}",
                    n.shape
                )));
            }
            for &i in indices {
                if i >= n.data.len() {
                    return Err(Error::Model(format!(
                        "gather index {i} out of range for length {}",
                        n.data.len()
                    )));
                }
            }
            (
                indices.iter().map(|&i| n.data[i]).collect::<Vec<f64>>(),
                n.requires_grad,
            )
        };
        Ok(self.push(vec![indices.len()], data, Op::Gather(a, indices.to_vec()), rg))
    }

    /// y = x (W ⊙ M) + b for vector x. The mask M is a constant 0/1
    /// matrix deciding which weights exist at all; gradients respect it.
    pub fn masked_linear(&self, x: NodeId, w: NodeId, b: NodeId, mask: NodeId) -> Result<NodeId> {
        let (k, n) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            let sw = &nodes[w.0].shape;
            let sb = &nodes[b.0].shape;
            let sm = &nodes[mask.0].shape;
            if sx.len() != 1 || sw.len() != 2 || sb.len() != 1 || sm != sw {
                return Err(Error::Model(format!(
                    "masked_linear: bad shapes x{sx:?} w{sw:?} b{sb:?} mask{sm:?}"
                )));
            }
            if sx[0] != sw[0] || sb[0] != sw[1] {
                return Err(Error::Model(format!(
                    "masked_linear: dimension mismatch x{sx:?} w{sw:?} b{sb:?}"
                )));
            }
            if nodes[mask.0].requires_grad {
                return Err(Error::Model("masked_linear: mask must be constant".into()));
            }
            (sw[0], sw[1])
        };
        let data = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].data;
            let wv = &nodes[w.0].data;
            let bv = &nodes[b.0].data;
            let mv = &nodes[mask.0].data;
            let mut out = bv.clone();
            for i in 0..k {
                let xi = xv[i];
                if xi == 0.0 {
                    continue;
                }
                let row = i * n;
                for j in 0..n {
                    out[j] += xi * wv[row + j] * mv[row + j];
                }
            }
            out
        };
        let rg = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(vec![n], data, Op::MaskedLinear { x, w, b, mask }, rg))
    }

    // -- reverse sweep -----------------------------------------------------

    /// Accumulates gradients of a scalar `loss` into every node that
    /// requires them. May be called once per tape.
    pub fn backward(&self, loss: NodeId) -> Result<()> {
        if *self.swept.borrow() {
            return Err(Error::Model(
                "backward called twice on one tape; build a fresh tape per step".into(),
            ));
        }
        *self.swept.borrow_mut() = true;

        let nodes = self.nodes.borrow();
        if numel(&nodes[loss.0].shape) != 1 {
            return Err(Error::Model(format!(
                "backward needs a scalar, found shape {:?}",
                nodes[loss.0].shape
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let send = |id: NodeId, contribution: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    None => grads[id.0] = Some(contribution),
                }
            };
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for readout
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.iter().map(|v| -v).collect(), &mut grads);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(&nodes[b.0].data).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(&nodes[a.0].data).map(|(g, x)| g * x).collect();
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Div(a, b) => {
                    let da: Vec<f64> = g.iter().zip(&nodes[b.0].data).map(|(g, y)| g / y).collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(nodes[a.0].data.iter().zip(&nodes[b.0].data))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::AddScalar(a) => send(*a, g.clone(), &mut grads),
                Op::MulScalar(a, c) => {
                    send(*a, g.iter().map(|v| v * c).collect(), &mut grads)
                }
                Op::MatMul(a, b) => {
                    let sa = &nodes[a.0].shape;
                    let sb = &nodes[b.0].shape;
                    let (m, k) = if sa.len() == 2 { (sa[0], sa[1]) } else { (1, sa[0]) };
                    let n = if sb.len() == 2 { sb[1] } else { 1 };
                    let av = &nodes[a.0].data;
                    let bv = &nodes[b.0].data;
                    // dA = g Bᵀ ; dB = Aᵀ g
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                da[r * k + t] += gv * bv[t * n + c];
                                db[t * n + c] += av[r * k + t] * gv;
                            }
                        }
                    }
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Sum(a) => {
                    let len = nodes[a.0].data.len();
                    send(*a, vec![g[0]; len], &mut grads);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g.iter().zip(&nodes[a.0].data).map(|(g, x)| g / x).collect();
                    send(*a, da, &mut grads);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = g.iter().zip(&nodes[i].data).map(|(g, y)| g * y).collect();
                    send(*a, da, &mut grads);
                }
                Op::Softplus(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[a.0].data)
                        .map(|(g, x)| g * sigmoid_scalar(*x))
                        .collect();
                    send(*a, da, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[i].data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    send(*a, da, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = &nodes[i].data;
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| (g - dot) * y).collect();
                    send(*a, da, &mut grads);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].data.len();
                        send(*p, g[offset..offset + len].to_vec(), &mut grads);
                        offset += len;
                    }
                }
                Op::Gather(a, indices) => {
                    let mut da = vec![0.0; nodes[a.0].data.len()];
                    for (slot, &idx) in indices.iter().enumerate() {
                        da[idx] += g[slot];
                    }
                    send(*a, da, &mut grads);
                }
                Op::MaskedLinear { x, w, b, mask } => {
                    let k = nodes[x.0].data.len();
                    let n = g.len();
                    let xv = &nodes[x.0].data;
                    let wv = &nodes[w.0].data;
                    let mv = &nodes[mask.0].data;
                    let mut dx = vec![0.0; k];
                    let mut dw = vec![0.0; k * n];
                    for r in 0..k {
                        let row = r * n;
                        let mut acc = 0.0;
                        for j in 0..n {
                            let masked = wv[row + j] * mv[row + j];
                            acc += masked * g[j];
                            dw[row + j] = xv[r] * g[j] * mv[row + j];
                        }
                        dx[r] = acc;
                    }
                    send(*x, dx, &mut grads);
                    send(*w, dw, &mut grads);
                    send(*b, g.clone(), &mut grads);
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient accumulated at a node by the last `backward`, if any.
    pub fn grad(&self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.borrow().get(id.0).and_then(|g| g.clone())
    }
}

fn mat_mul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for t in 0..k {
            let av = a[r * k + t];
            if av == 0.0 {
                continue;
            }
            let row = t * n;
            for c in 0..n {
                out[r * n + c] += av * b[row + c];
            }
        }
    }
    out
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compares analytic gradients against central finite differences of `f`
/// at `params`, returning the worst relative error. Coordinates where both
/// sides are below 1e-8 in magnitude compare as equal.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut point = params.to_vec();
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + step;
        let hi = f(&point);
        point[i] = orig - step;
        let lo = f(&point);
        point[i] = orig;
        let fd = (hi - lo) / (2.0 * step);
        let an = analytic[i];
        let scale = fd.abs().max(an.abs());
        if scale > 1e-8 {
            worst = worst.max((fd - an).abs() / scale);
        }
    }
    worst
}
