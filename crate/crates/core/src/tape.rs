//! A small reverse-mode differentiation engine over a closed set of
//! matrix primitives.
//!
//! Graphs are built node by node (shape rules are checked at construction
//! time), evaluated against named input bindings, and differentiated with
//! [`Graph::backward`]. Scalars are 1×1 matrices. Constants carry their value
//! from construction and are never rebound, which is how dropout masks and
//! selection matrices enter a graph.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{Lu, Matrix};

pub type Bindings = BTreeMap<String, Matrix>;
pub type Gradients = BTreeMap<String, Matrix>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Input { name: String },
    Constant,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Matmul { a: Var, b: Var },
    Hadamard { a: Var, b: Var },
    Transpose { a: Var },
    DiagExtract { a: Var },
    DiagEmbed { a: Var },
    Reciprocal { a: Var },
    Log { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    FrobeniusNorm { a: Var },
    /// `M⁻¹ B`.
    LinearSolve { m: Var, b: Var },
    /// Mean over rows of `−Σ_c t_c log softmax(z)_c`.
    SoftmaxCrossEntropy { logits: Var, targets: Var },
    /// 1×1 node times a matrix.
    ScalarMul { s: Var, a: Var },
    Reshape { a: Var },
    ConcatCols { parts: Vec<Var> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
    value: Option<Matrix>,
}

/// A computation graph with one designated scalar output.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<Var>,
    evaluated: bool,
    adjoint_fault: bool,
}

#[derive(Serialize)]
struct NodeDump<'a> {
    id: usize,
    #[serde(flatten)]
    op: &'a Op,
    shape: (usize, usize),
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    /// Forward value of a node, available after [`Graph::evaluate`]
    /// (constants always).
    pub fn value(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].value.as_ref()
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    /// Names of the bindable inputs, in creation order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Debug dump of the node list as JSON.
    pub fn to_json(&self) -> String {
        let nodes: Vec<NodeDump<'_>> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| NodeDump {
                id,
                op: &n.op,
                shape: n.shape,
            })
            .collect();
        serde_json::to_string_pretty(&nodes).expect("graph dump serialises")
    }

    /// Negative control for the gradient checker: when set, the left-hand
    /// matmul adjoint is perturbed by 1%.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, on: bool) {
        self.adjoint_fault = on;
    }

    fn push(&mut self, op: Op, shape: (usize, usize), value: Option<Matrix>) -> Var {
        self.nodes.push(Node { op, shape, value });
        self.evaluated = false;
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes
            .get(v.0)
            .map(|n| n.shape)
            .ok_or_else(|| shape_err("graph", format!("unknown node {}", v.0)))
    }

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<Var> {
        let name = name.into();
        if self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Input { name: existing } if *existing == name))
        {
            return Err(Error::InvalidValue(format!("duplicate input name `{name}`")));
        }
        if rows == 0 || cols == 0 {
            return Err(shape_err("input", format!("empty shape for `{name}`")));
        }
        Ok(self.push(Op::Input { name }, (rows, cols), None))
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        let shape = value.shape();
        self.push(Op::Constant, shape, Some(value))
    }

    fn same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add { a, b }, s, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub { a, b }, s, None))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("hadamard", a, b)?;
        Ok(self.push(Op::Hadamard { a, b }, s, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", format!("{sa:?} by {sb:?}")));
        }
        Ok(self.push(Op::Matmul { a, b }, (sa.0, sb.1), None))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?;
        Ok(self.push(Op::Transpose { a }, (s.1, s.0), None))
    }

    /// d×d → d×1.
    pub fn diag_extract(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?;
        if s.0 != s.1 {
            return Err(shape_err("diag-extract", format!("non-square {s:?}")));
        }
        Ok(self.push(Op::DiagExtract { a }, (s.0, 1), None))
    }

    /// d×1 → d×d.
    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?;
        if s.1 != 1 {
            return Err(shape_err("diag-embed", format!("expected column, got {s:?}")));
        }
        Ok(self.push(Op::DiagEmbed { a }, (s.0, s.0), None))
    }

    fn unary(&mut self, a: Var, make: impl FnOnce(Var) -> Op) -> Result<Var> {
        let s = self.check(a)?;
        Ok(self.push(make(a), s, None))
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |a| Op::Reciprocal { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |a| Op::Log { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |a| Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |a| Op::Relu { a })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, |a| Op::Scale { a, factor })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::Sum { a }, (1, 1), None))
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::FrobeniusNorm { a }, (1, 1), None))
    }

    /// `M⁻¹ B` by partial-pivot LU.
    pub fn linear_solve(&mut self, m: Var, b: Var) -> Result<Var> {
        let (sm, sb) = (self.check(m)?, self.check(b)?);
        if sm.0 != sm.1 || sm.1 != sb.0 {
            return Err(shape_err("linear-solve", format!("lhs {sm:?}, rhs {sb:?}")));
        }
        Ok(self.push(Op::LinearSolve { m, b }, sb, None))
    }

    /// Row-averaged cross-entropy of `softmax(logits)` against soft targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape("softmax-cross-entropy", logits, targets)?;
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, targets }, (1, 1), None))
    }

    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Result<Var> {
        let (ss, sa) = (self.check(s)?, self.check(a)?);
        if ss != (1, 1) {
            return Err(shape_err("scalar-mul", format!("scalar operand is {ss:?}")));
        }
        Ok(self.push(Op::ScalarMul { s, a }, sa, None))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.check(a)?;
        if s.0 * s.1 != rows * cols {
            return Err(shape_err("reshape", format!("{s:?} to ({rows}, {cols})")));
        }
        Ok(self.push(Op::Reshape { a }, (rows, cols), None))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat-cols", "no parts"));
        };
        let rows = self.check(first)?.0;
        let mut cols = 0;
        for &p in parts {
            let s = self.check(p)?;
            if s.0 != rows {
                return Err(shape_err("concat-cols", format!("row count {} vs {rows}", s.0)));
            }
            cols += s.1;
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            (rows, cols),
            None,
        ))
    }

    /// Designates the scalar output.
    pub fn set_output(&mut self, v: Var) -> Result<()> {
        let s = self.check(v)?;
        if s != (1, 1) {
            return Err(shape_err("output", format!("output must be 1x1, got {s:?}")));
        }
        self.output = Some(v);
        Ok(())
    }

    /// Runs the forward pass, caching every node value, and returns the
    /// output scalar.
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<f64> {
        let out = self
            .output
            .ok_or_else(|| shape_err("evaluate", "graph has no output"))?;
        for i in 0..self.nodes.len() {
            let value = self.forward_node(i, bindings)?;
            if let Some(v) = value {
                self.nodes[i].value = Some(v);
            }
        }
        self.evaluated = true;
        Ok(self.nodes[out.0].value.as_ref().expect("evaluated").as_scalar())
    }

    fn val(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.as_ref().expect("parent evaluated first")
    }

    fn forward_node(&self, i: usize, bindings: &Bindings) -> Result<Option<Matrix>> {
        use Op::*;
        let node = &self.nodes[i];
        let out = match &node.op {
            Input { name } => {
                let m = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if m.shape() != node.shape {
                    return Err(shape_err(
                        "bind",
                        format!("`{name}` bound to {:?}, declared {:?}", m.shape(), node.shape),
                    ));
                }
                m.clone()
            }
            Constant => return Ok(None),
            Add { a, b } => self.val(*a).add(self.val(*b)),
            Sub { a, b } => self.val(*a).sub(self.val(*b)),
            Matmul { a, b } => self.val(*a).matmul(self.val(*b)),
            Hadamard { a, b } => self.val(*a).hadamard(self.val(*b)),
            Transpose { a } => self.val(*a).transpose(),
            DiagExtract { a } => Matrix::column(&self.val(*a).diag()),
            DiagEmbed { a } => Matrix::diag_from(self.val(*a).as_slice()),
            Reciprocal { a } => self.val(*a).map(|x| 1.0 / x),
            Log { a } => self.val(*a).map(f64::ln),
            Sigmoid { a } => self.val(*a).map(sigmoid),
            Relu { a } => self.val(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Scale { a, factor } => self.val(*a).scale(*factor),
            Sum { a } => Matrix::scalar(self.val(*a).sum()),
            FrobeniusNorm { a } => Matrix::scalar(self.val(*a).frobenius_norm()),
            LinearSolve { m, b } => Lu::factor(self.val(*m))?.solve(self.val(*b)),
            SoftmaxCrossEntropy { logits, targets } => {
                let (loss, _) = softmax_xent(self.val(*logits), self.val(*targets));
                Matrix::scalar(loss)
            }
            ScalarMul { s, a } => self.val(*a).scale(self.val(*s).as_scalar()),
            Reshape { a } => self.val(*a).reshape(node.shape.0, node.shape.1),
            ConcatCols { parts } => {
                let (rows, cols) = node.shape;
                let mut out = Matrix::zeros(rows, cols);
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    for r in 0..rows {
                        for c in 0..pv.cols() {
                            out[(r, offset + c)] = pv[(r, c)];
                        }
                    }
                    offset += pv.cols();
                }
                out
            }
        };
        Ok(Some(out))
    }

    /// Reverse sweep from the output; returns `∂output/∂input` for every
    /// named input (zeros where the output does not depend on it).
    pub fn backward(&self) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let out = self.output.ok_or(Error::NotEvaluated)?;
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(Matrix::scalar(1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Input { .. } = node.op {
                adj[i] = Some(g);
                continue;
            }
            for (parent, contrib) in self.local_adjoints(i, &g)? {
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut grads = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name } = &node.op {
                let g = adj[i]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(node.shape.0, node.shape.1));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }

    fn local_adjoints(&self, i: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        use Op::*;
        let node = &self.nodes[i];
        let y = node.value.as_ref().expect("evaluated");
        let out = match &node.op {
            Input { .. } | Constant => vec![],
            Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Sub { a, b } => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Matmul { a, b } => {
                let mut ga = g.matmul_tr(self.val(*b));
                if self.adjoint_fault {
                    ga = ga.scale(1.01);
                }
                vec![(*a, ga), (*b, self.val(*a).tr_matmul(g))]
            }
            Hadamard { a, b } => vec![
                (*a, g.hadamard(self.val(*b))),
                (*b, g.hadamard(self.val(*a))),
            ],
            Transpose { a } => vec![(*a, g.transpose())],
            DiagExtract { a } => vec![(*a, Matrix::diag_from(g.as_slice()))],
            DiagEmbed { a } => vec![(*a, Matrix::column(&g.diag()))],
            Reciprocal { a } => vec![(*a, g.hadamard(&y.map(|v| -v * v)))],
            Log { a } => vec![(*a, g.hadamard(&self.val(*a).map(|x| 1.0 / x)))],
            Sigmoid { a } => vec![(*a, g.hadamard(&y.map(|s| s * (1.0 - s))))],
            Relu { a } => vec![(
                *a,
                g.hadamard(&self.val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            )],
            Scale { a, factor } => vec![(*a, g.scale(*factor))],
            Sum { a } => {
                let (r, c) = self.shape(*a);
                vec![(*a, Matrix::filled(r, c, g.as_scalar()))]
            }
            FrobeniusNorm { a } => {
                let norm = y.as_scalar();
                let (r, c) = self.shape(*a);
                let ga = if norm > 0.0 {
                    self.val(*a).scale(g.as_scalar() / norm)
                } else {
                    Matrix::zeros(r, c)
                };
                vec![(*a, ga)]
            }
            LinearSolve { m, b } => {
                // X = M⁻¹B: B̄ = M⁻ᵀ X̄, M̄ = −B̄ Xᵀ.
                let lu = Lu::factor(self.val(*m))?;
                let gb = lu.solve_transpose(g);
                let gm = gb.matmul_tr(y).scale(-1.0);
                vec![(*m, gm), (*b, gb)]
            }
            SoftmaxCrossEntropy { logits, targets } => {
                let z = self.val(*logits);
                let t = self.val(*targets);
                let (_, logp) = softmax_xent(z, t);
                let n = z.rows() as f64;
                let scale = g.as_scalar() / n;
                // ∂/∂z = (softmax − t · rowsum(t)) / N; rows of t sum to 1 in
                // practice but the general form keeps the check exact.
                let mut gz = Matrix::zeros(z.rows(), z.cols());
                for r in 0..z.rows() {
                    let tsum: f64 = t.row(r).iter().sum();
                    for c in 0..z.cols() {
                        gz[(r, c)] = scale * (logp[(r, c)].exp() * tsum - t[(r, c)]);
                    }
                }
                let gt = logp.scale(-scale);
                vec![(*logits, gz), (*targets, gt)]
            }
            ScalarMul { s, a } => {
                let sv = self.val(*s).as_scalar();
                let gs = g.hadamard(self.val(*a)).sum();
                vec![(*s, Matrix::scalar(gs)), (*a, g.scale(sv))]
            }
            Reshape { a } => {
                let (r, c) = self.shape(*a);
                vec![(*a, g.reshape(r, c))]
            }
            ConcatCols { parts } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = self.shape(*p);
                    out.push((*p, Matrix::from_fn(r, c, |i, j| g[(i, offset + j)])));
                    offset += c;
                }
                out
            }
        };
        Ok(out)
    }
}

/// Normalised off-diagonal energy `(‖M‖_F² − ‖diag M‖²)/(d(d−1))` as a
/// graph fragment.
pub fn offdiag_energy_node(g: &mut Graph, m: Var) -> Result<Var> {
    let (d, c) = g.shape(m);
    if d != c {
        return Err(shape_err("offdiag-energy", format!("non-square ({d}, {c})")));
    }
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d, min: 2 });
    }
    let sq = g.hadamard(m, m)?;
    let total = g.sum(sq)?;
    let diag = g.diag_extract(m)?;
    let dsq = g.hadamard(diag, diag)?;
    let dtotal = g.sum(dsq)?;
    let off = g.sub(total, dtotal)?;
    g.scale(off, 1.0 / (d * (d - 1)) as f64)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns the mean loss and the row-wise log-softmax.
fn softmax_xent(z: &Matrix, t: &Matrix) -> (f64, Matrix) {
    let mut logp = Matrix::zeros(z.rows(), z.cols());
    let mut total = 0.0;
    for r in 0..z.rows() {
        let row = z.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for c in 0..z.cols() {
            let lp = row[c] - lse;
            logp[(r, c)] = lp;
            total -= t[(r, c)] * lp;
        }
    }
    (total / z.rows() as f64, logp)
}

/// Worst relative gradient error, overall and per input.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub per_input: BTreeMap<String, f64>,
    /// Graph output at the unperturbed bindings.
    pub output: f64,
    pub h: f64,
    /// Probed `(analytic, numeric)` pairs per input.
    #[serde(skip)]
    pub samples: BTreeMap<String, Vec<(f64, f64)>>,
}

impl GradCheck {
    /// Size of one output ulp seen through a central difference,
    /// `ε·max(1, |f|)/h`; numeric derivatives carry noise of this order.
    pub fn roundoff_scale(&self) -> f64 {
        f64::EPSILON * self.output.abs().max(1.0) / self.h
    }

    /// Per-input worst relative error with the denominator floored at `floor`.
    pub fn per_input_floored(&self, floor: f64) -> BTreeMap<String, f64> {
        self.samples
            .iter()
            .map(|(name, pairs)| {
                let worst = pairs
                    .iter()
                    .map(|&(a, n)| rel_error(a, n, floor))
                    .fold(0.0, f64::max);
                (name.clone(), worst)
            })
            .collect()
    }

    pub fn max_rel_error_floored(&self, floor: f64) -> f64 {
        self.per_input_floored(floor).values().copied().fold(0.0, f64::max)
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares [`Graph::backward`] against central differences
/// `(f(x+h) − f(x−h))/2h` for every coordinate of every input.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-12)` as denominator.
pub fn gradcheck(graph: &mut Graph, bindings: &Bindings, h: f64) -> Result<GradCheck> {
    gradcheck_strided(graph, bindings, h, usize::MAX)
}

/// Like [`gradcheck`], but probes at most `max_coords` evenly strided
/// coordinates of each input.
pub fn gradcheck_strided(graph: &mut Graph, bindings: &Bindings, h: f64, max_coords: usize) -> Result<GradCheck> {
    if max_coords == 0 {
        return Err(Error::InvalidValue("need at least one coordinate per input".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidValue(format!("step h must be positive, got {h}")));
    }
    let output = graph.evaluate(bindings)?;
    let analytic = graph.backward()?;
    let mut work = bindings.clone();
    let mut per_input = BTreeMap::new();
    let mut samples = BTreeMap::new();
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        let mut input_worst = 0.0f64;
        let mut pairs = Vec::new();
        let len = grad.as_slice().len();
        let stride = len.div_ceil(max_coords.min(len).max(1));
        for idx in (0..len).step_by(stride.max(1)) {
            let orig = bindings[name].as_slice()[idx];
            work.get_mut(name).unwrap().as_mut_slice()[idx] = orig + h;
            let up = graph.evaluate(&work)?;
            work.get_mut(name).unwrap().as_mut_slice()[idx] = orig - h;
            let down = graph.evaluate(&work)?;
            work.get_mut(name).unwrap().as_mut_slice()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_slice()[idx];
            input_worst = input_worst.max(rel_error(a, numeric, 1e-12));
            pairs.push((a, numeric));
        }
        samples.insert(name.clone(), pairs);
        worst = worst.max(input_worst);
        per_input.insert(name.clone(), input_worst);
    }
    // leave cached values consistent with the caller's bindings
    graph.evaluate(bindings)?;
    Ok(GradCheck {
        max_rel_error: worst,
        per_input,
        output,
        h,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::offdiag_energy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bind(pairs: &[(&str, Matrix)]) -> Bindings {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn sq_norm_graph(r: usize, c: usize) -> Graph {
        let mut g = Graph::new();
        let x = g.input("X", r, c).unwrap();
        let xx = g.hadamard(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        g.set_output(s).unwrap();
        g
    }

    #[test]
    fn squared_norm_value_and_gradient() {
        let mut g = sq_norm_graph(2, 2);
        let v = g.evaluate(&bind(&[("X", Matrix::filled(2, 2, 1.0))])).unwrap();
        assert_eq!(v, 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(3, 3, |_, _| rng.sample(StandardNormal));
        let mut g = sq_norm_graph(3, 3);
        g.evaluate(&bind(&[("X", x.clone())])).unwrap();
        let grads = g.backward().unwrap();
        assert!(grads["X"].max_abs_diff(&x.scale(2.0)) < 1e-12);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x", 3, 1).unwrap();
        let s = g.sigmoid(x).unwrap();
        let t = g.sum(s).unwrap();
        g.set_output(t).unwrap();
        assert_eq!(g.evaluate(&bind(&[("x", Matrix::zeros(3, 1))])).unwrap(), 1.5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input("X", 2, 5).unwrap();
        let s = g.sum(x).unwrap();
        g.set_output(s).unwrap();
        g.evaluate(&bind(&[("X", Matrix::from_fn(2, 5, |i, j| (i * j) as f64 - 3.0))]))
            .unwrap();
        assert_eq!(g.backward().unwrap()["X"], Matrix::filled(2, 5, 1.0));
    }

    #[test]
    fn offdiag_energy_graph_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let d = 5;
        for _ in 0..20 {
            let mut skew = Matrix::zeros(d, d);
            for i in 0..d {
                for j in i + 1..d {
                    let v: f64 = rng.sample(StandardNormal);
                    skew[(i, j)] = v;
                    skew[(j, i)] = -v;
                }
            }
            let beta = crate::linalg::cayley(&crate::linalg::SkewMatrix::new(skew).unwrap());
            let x = Matrix::from_fn(d + 3, d, |_, _| rng.sample(StandardNormal));
            let s = x.tr_matmul(&x);

            let mut g = Graph::new();
            let b = g.input("beta", d, d).unwrap();
            let sv = g.input("S", d, d).unwrap();
            let bt = g.transpose(b).unwrap();
            let sb = g.matmul(sv, b).unwrap();
            let hat = g.matmul(bt, sb).unwrap();
            let e = offdiag_energy_node(&mut g, hat).unwrap();
            g.set_output(e).unwrap();
            let v = g
                .evaluate(&bind(&[("beta", beta.as_matrix().clone()), ("S", s.clone())]))
                .unwrap();
            let direct = offdiag_energy(&beta.tr_matmul(&s.matmul(&beta))).unwrap();
            assert!((v - direct).abs() < 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn linear_graph_gradcheck_exact() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        g.set_output(y).unwrap();
        let report = gradcheck(&mut g, &bind(&[("x", Matrix::scalar(0.7))]), 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn errors_are_reported() {
        let mut g = sq_norm_graph(2, 2);
        assert!(matches!(g.backward(), Err(Error::NotEvaluated)));
        assert!(matches!(g.evaluate(&Bindings::new()), Err(Error::UnboundInput(_))));
        assert!(matches!(
            g.evaluate(&bind(&[("X", Matrix::zeros(3, 2))])),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut g = Graph::new();
        let a = g.input("a", 2, 3).unwrap();
        let b = g.input("b", 2, 3).unwrap();
        assert!(g.matmul(a, b).is_err());
        assert!(g.set_output(a).is_err());
        assert!(g.input("a", 1, 1).is_err());
    }

    #[test]
    fn backward_is_linear_in_output_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_fn(3, 3, |_, _| rng.sample(StandardNormal));
        let build = |c: f64| {
            let mut g = Graph::new();
            let xv = g.input("X", 3, 3).unwrap();
            let s = g.sigmoid(xv).unwrap();
            let p = g.matmul(s, xv).unwrap();
            let n = g.frobenius_norm(p).unwrap();
            let out = g.scale(n, c).unwrap();
            g.set_output(out).unwrap();
            g
        };
        let mut g1 = build(1.0);
        let mut g4 = build(4.0);
        g1.evaluate(&bind(&[("X", x.clone())])).unwrap();
        g4.evaluate(&bind(&[("X", x.clone())])).unwrap();
        let a = &g1.backward().unwrap()["X"];
        let b = &g4.backward().unwrap()["X"];
        assert!(a.scale(4.0).max_abs_diff(b) <= 1e-15 * b.max_abs().max(1.0));
    }

    #[test]
    fn evaluation_is_repeatable_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::from_fn(4, 4, |_, _| rng.sample(StandardNormal));
        let mut g = Graph::new();
        let xv = g.input("X", 4, 4).unwrap();
        let m = g.constant(Matrix::identity(4).scale(3.0));
        let m2 = g.add(m, xv).unwrap();
        let sol = g.linear_solve(m2, xv).unwrap();
        let s = g.sum(sol).unwrap();
        g.set_output(s).unwrap();
        let b = bind(&[("X", x)]);
        let v1 = g.evaluate(&b).unwrap();
        let v2 = g.evaluate(&b).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    #[test]
    fn graph_dump_lists_nodes() {
        let g = sq_norm_graph(2, 2);
        let dump: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        assert_eq!(dump.as_array().unwrap().len(), 3);
        assert_eq!(dump[0]["op"], "input");
        assert_eq!(dump[1]["op"], "hadamard");
    }
}
