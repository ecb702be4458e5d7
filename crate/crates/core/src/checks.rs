//! Finite-difference gradient checks over three scopes: each tape
//! primitive in isolation, the unfolded solver, and the full CPCANet loss.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{gen_toy_dg, rng_from_seed, ToyDgParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{build_cpcanet_graph, Architecture, Dense, LossConfig, ModelParams};
use crate::tape::{gradcheck, offdiag_energy_node, Bindings, GradCheck, Graph, Var};
use crate::unfold::{transform_node, unfold_graph, CovNode, UnfoldConfig};

/// Central-difference step used by every scope.
pub const STEP: f64 = 1e-6;
/// Multiple of [`GradCheck::roundoff_scale`] used as the relative-error
/// denominator floor in [`ScopeReport::floored`].
pub const ROUNDOFF_FLOOR_FACTOR: f64 = 5e5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitive,
    Unfold,
    Full,
}

impl Scope {
    pub fn threshold(self) -> f64 {
        match self {
            Scope::Primitive | Scope::Unfold => 1e-5,
            Scope::Full => 1e-4,
        }
    }
}

/// Dimensions of the unfold and full scopes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckDims {
    pub d: usize,
    pub stages: usize,
    pub domains: usize,
}

impl Default for CheckDims {
    fn default() -> Self {
        CheckDims {
            d: 6,
            stages: 3,
            domains: 3,
        }
    }
}

/// Worst relative errors per group (primitive name or graph input).
#[derive(Clone, Debug, Serialize)]
pub struct ScopeReport {
    pub scope: Scope,
    pub threshold: f64,
    /// Denominator `max(|a|, |n|, 1e-12)`.
    pub strict: BTreeMap<String, f64>,
    /// Denominator floored at [`ROUNDOFF_FLOOR_FACTOR`] output ulps per step.
    pub floored: BTreeMap<String, f64>,
}

impl ScopeReport {
    pub fn worst_strict(&self) -> f64 {
        self.strict.values().copied().fold(0.0, f64::max)
    }

    pub fn worst_floored(&self) -> f64 {
        self.floored.values().copied().fold(0.0, f64::max)
    }

    pub fn strict_pass(&self) -> bool {
        self.worst_strict() < self.threshold
    }

    pub fn floored_pass(&self) -> bool {
        self.worst_floored() < self.threshold
    }

    fn absorb(&mut self, prefix: &str, check: &GradCheck) {
        let floor = ROUNDOFF_FLOOR_FACTOR * check.roundoff_scale();
        for (name, v) in &check.per_input {
            let key = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
            self.strict.insert(key, *v);
        }
        for (name, v) in check.per_input_floored(floor) {
            let key = if prefix.is_empty() { name } else { format!("{prefix}/{name}") };
            self.floored.insert(key, v);
        }
    }

    fn new(scope: Scope) -> Self {
        ScopeReport {
            scope,
            threshold: scope.threshold(),
            strict: BTreeMap::new(),
            floored: BTreeMap::new(),
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniform magnitudes in [0.5, 2] with random signs, keeping inputs away
/// from the kink of the rectifier.
fn off_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let m: f64 = rng.random_range(0.5..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.5..2.0))
}

/// `Σ op(...) ⊙ W` with a fixed random weight so no entry of the adjoint is
/// trivially uniform.
fn weighted_sum(g: &mut Graph, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = g.shape(v);
    let w = g.constant(gaussian(r, c, rng));
    let p = g.hadamard(v, w)?;
    g.sum(p)
}

type Case = (&'static str, Graph, Bindings);

fn case(
    name: &'static str,
    inputs: Vec<(&'static str, Matrix)>,
    rng: &mut ChaCha8Rng,
    body: impl FnOnce(&mut Graph, &[Var], &mut ChaCha8Rng) -> Result<Var>,
) -> Result<Case> {
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut vars = Vec::new();
    for (n, m) in inputs {
        vars.push(g.input(n, m.rows(), m.cols())?);
        bindings.insert(n.to_string(), m);
    }
    let out = body(&mut g, &vars, rng)?;
    let out = if g.shape(out) == (1, 1) {
        out
    } else {
        weighted_sum(&mut g, out, rng)?
    };
    g.set_output(out)?;
    Ok((name, g, bindings))
}

/// One small randomized graph per primitive.
pub fn primitive_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = rng_from_seed(seed);
    let r = &mut rng;
    let (a34, b34) = (gaussian(3, 4, r), gaussian(3, 4, r));
    let mut out = vec![
        case("add", vec![("A", a34.clone()), ("B", b34.clone())], r, |g, v, _| g.add(v[0], v[1]))?,
        case("sub", vec![("A", a34.clone()), ("B", b34.clone())], r, |g, v, _| g.sub(v[0], v[1]))?,
        case("hadamard", vec![("A", a34.clone()), ("B", b34)], r, |g, v, _| g.hadamard(v[0], v[1]))?,
    ];
    let (a, b) = (gaussian(3, 4, r), gaussian(4, 2, r));
    out.push(case("matmul", vec![("A", a), ("B", b)], r, |g, v, _| g.matmul(v[0], v[1]))?);
    out.push(case("transpose", vec![("A", a34.clone())], r, |g, v, _| g.transpose(v[0]))?);
    let sq = gaussian(4, 4, r);
    out.push(case("diag-extract", vec![("A", sq)], r, |g, v, _| g.diag_extract(v[0]))?);
    let col = gaussian(4, 1, r);
    out.push(case("diag-embed", vec![("v", col)], r, |g, v, _| g.diag_embed(v[0]))?);
    let pos = positive(3, 3, r);
    out.push(case("reciprocal", vec![("A", pos.clone())], r, |g, v, _| g.reciprocal(v[0]))?);
    out.push(case("log", vec![("A", pos)], r, |g, v, _| g.log(v[0]))?);
    out.push(case("sigmoid", vec![("A", gaussian(3, 3, r))], r, |g, v, _| g.sigmoid(v[0]))?);
    out.push(case("relu", vec![("A", off_zero(3, 3, r))], r, |g, v, _| g.relu(v[0]))?);
    out.push(case("scale", vec![("A", a34.clone())], r, |g, v, _| g.scale(v[0], -1.7))?);
    out.push(case("sum", vec![("A", a34)], r, |g, v, _| {
        let s = g.sum(v[0])?;
        let q = g.hadamard(s, s)?;
        Ok(q)
    })?);
    out.push(case("frobenius-norm", vec![("A", gaussian(3, 3, r))], r, |g, v, _| g.frobenius_norm(v[0]))?);
    let m = Matrix::identity(4).scale(3.0).add(&gaussian(4, 4, r).scale(0.5));
    out.push(case("linear-solve", vec![("M", m), ("B", gaussian(4, 2, r))], r, |g, v, _| g.linear_solve(v[0], v[1]))?);
    let targets = {
        let raw = positive(5, 3, r);
        Matrix::from_fn(5, 3, |i, j| raw[(i, j)] / raw.row(i).iter().sum::<f64>())
    };
    out.push(case("softmax-cross-entropy", vec![("Z", gaussian(5, 3, r))], r, move |g, v, _| {
        let t = g.constant(targets);
        g.softmax_cross_entropy(v[0], t)
    })?);
    out.push(case("scalar-mul", vec![("s", gaussian(1, 1, r)), ("A", gaussian(2, 3, r))], r, |g, v, _| {
        g.scalar_mul(v[0], v[1])
    })?);
    out.push(case("reshape", vec![("A", gaussian(2, 6, r))], r, |g, v, _| g.reshape(v[0], 4, 3))?);
    out.push(case("concat-cols", vec![("A", gaussian(2, 3, r)), ("B", gaussian(2, 2, r))], r, |g, v, _| {
        g.concat_cols(&[v[0], v[1]])
    })?);
    Ok(out)
}

fn random_covariance(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let x = gaussian(3 * d, d, rng);
    let scales: Vec<f64> = (0..d).map(|j| 0.5 + j as f64 * 0.3).collect();
    let x = x.matmul(&Matrix::diag_from(&scales));
    x.tr_matmul(&x).scale(1.0 / (3 * d - 1) as f64)
}

/// Graph of `offdiag_energy(β_Tᵀ S_1 β_T)` with every `S_k` and the step
/// sizes as inputs.
pub fn unfold_case(dims: &CheckDims, seed: u64) -> Result<(Graph, Bindings)> {
    let mut rng = rng_from_seed(seed);
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut covs = Vec::new();
    for k in 0..dims.domains {
        let name = format!("S{}", k + 1);
        covs.push(CovNode {
            cov: g.input(&name, dims.d, dims.d)?,
            weight: (3 * dims.d - 1) as f64,
        });
        bindings.insert(name, random_covariance(dims.d, &mut rng));
    }
    let etas = g.input("eta", 1, dims.stages)?;
    let eta_values: Vec<f64> = (0..dims.stages).map(|_| rng.random_range(0.05..0.45)).collect();
    bindings.insert("eta".into(), Matrix::row_vector(&eta_values));
    let cfg = UnfoldConfig {
        stages: dims.stages,
        dim: dims.d,
        ..UnfoldConfig::default()
    };
    let out = unfold_graph(&mut g, &covs, etas, &cfg)?;
    let hat = transform_node(&mut g, out.beta, covs[0].cov)?;
    let e = offdiag_energy_node(&mut g, hat)?;
    g.set_output(e)?;
    Ok((g, bindings))
}

/// Full CPCANet `L_total` graph on a toy batch, with every parameter tensor
/// as an input. The modulation output layers are randomised so that every
/// path carries gradient.
pub fn full_case(dims: &CheckDims, seed: u64) -> Result<(Graph, Bindings)> {
    if dims.d > 16 {
        return Err(Error::InvalidValue(format!("full-scope check needs d ≤ 16, got {}", dims.d)));
    }
    let arch = Architecture {
        input_dim: 20,
        feature_dim: 32,
        proj_dim: dims.d,
        stages: dims.stages,
        domains: dims.domains,
        classes: 4,
    };
    let mut shared = rng_from_seed(seed);
    let mut own = rng_from_seed(seed ^ 0x5eed);
    let mut params = ModelParams::init(&arch, &mut shared, &mut own);
    params.gamma.out = Dense::init(arch.feature_dim, arch.feature_dim, &mut own);
    params.shift.out = Dense::init(arch.feature_dim, arch.feature_dim, &mut own);
    let data = gen_toy_dg(
        &ToyDgParams {
            p: arch.input_dim,
            k: dims.domains + 1,
            c: arch.classes,
            n_per_domain: 50,
            ..ToyDgParams::default()
        },
        seed,
    )?;
    let per_domain = (2 * dims.d).max(20);
    let batch = data
        .train_data()
        .sampler(per_domain, seed)?
        .next()
        .expect("sampler is infinite");
    let loss = LossConfig {
        lambda_cpca: 5e-3,
        smoothing: 0.1,
    };
    let net = build_cpcanet_graph(&params, &batch, &arch, &loss, None)?;
    Ok((net.graph, net.bindings))
}

/// Runs one scope. `fault` corrupts one matmul adjoint as a negative control.
pub fn run_scope(scope: Scope, dims: &CheckDims, seed: u64, fault: bool) -> Result<ScopeReport> {
    let mut report = ScopeReport::new(scope);
    let mut run = |prefix: &str, mut g: Graph, b: Bindings| -> Result<()> {
        g.inject_adjoint_fault(fault);
        let check = gradcheck(&mut g, &b, STEP)?;
        report.absorb(prefix, &check);
        Ok(())
    };
    match scope {
        Scope::Primitive => {
            for (name, g, b) in primitive_cases(seed)? {
                run(name, g, b)?;
            }
        }
        Scope::Unfold => {
            let (g, b) = unfold_case(dims, seed)?;
            run("", g, b)?;
        }
        Scope::Full => {
            let (g, b) = full_case(dims, seed)?;
            run("", g, b)?;
        }
    }
    Ok(report)
}
