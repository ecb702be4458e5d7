use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Width of the backbone's hidden layer.
pub const BACKBONE_HIDDEN: usize = 64;
/// Width of the step-size hypernetwork's hidden layer.
pub const HYPERNET_HIDDEN: usize = 64;

/// Shape of a CPCANet model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Raw input dimension `p`.
    pub input_dim: usize,
    /// Backbone feature dimension `D`.
    pub feature_dim: usize,
    /// Bottleneck / projection dimension `d`.
    pub proj_dim: usize,
    /// Unfolding stages `T`.
    pub stages: usize,
    /// Training domains `K`.
    pub domains: usize,
    /// Classes `C`.
    pub classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("p", self.input_dim, 1),
            ("D", self.feature_dim, 1),
            ("d", self.proj_dim, 2),
            ("T", self.stages, 1),
            ("K", self.domains, 1),
            ("C", self.classes, 2),
        ];
        for (name, value, min) in fields {
            if value < min {
                return Err(Error::InvalidValue(format!("{name} = {value}, need at least {min}")));
            }
        }
        Ok(())
    }
}

/// Affine layer `x ↦ xW + b` acting on row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    /// Uniform in `±1/√fan_in`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        let b = self.bias.as_slice();
        for i in 0..out.rows() {
            for (j, bj) in b.iter().enumerate() {
                out[(i, j)] += bj;
            }
        }
        out
    }
}

/// Two affine layers with a rectifier between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn init(fan_in: usize, width: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            hidden: Dense::init(fan_in, width, rng),
            out: Dense::init(width, fan_out, rng),
        }
    }

    /// Random hidden layer, zero output layer.
    pub fn init_zero_output(fan_in: usize, width: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            hidden: Dense::init(fan_in, width, rng),
            out: Dense::zeros(width, fan_out),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        self.out.apply(&self.hidden.apply(x).map(|v| v.max(0.0)))
    }
}

/// Which learning rate a tensor trains under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature extractor and classifier.
    Backbone,
    /// Bottleneck, hypernetwork and modulation heads.
    CpcaNet,
}

/// Named tensor access used by the optimizer, graph binding and checkpoints.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("backbone.") || name.starts_with("classifier.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::CpcaNet
        }
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }
}

/// Backbone and classifier, the whole of the ERM baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErmParams {
    pub backbone: Mlp,
    pub classifier: Dense,
}

impl ErmParams {
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Self {
        ErmParams {
            backbone: Mlp::init(arch.input_dim, BACKBONE_HIDDEN, arch.feature_dim, rng),
            classifier: Dense::init(arch.feature_dim, arch.classes, rng),
        }
    }

    pub fn features(&self, x: &Matrix) -> Matrix {
        self.backbone.apply(x)
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        self.classifier.apply(&self.features(x))
    }
}

impl ParamSet for ErmParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("backbone.hidden.weight", &self.backbone.hidden.weight),
            ("backbone.hidden.bias", &self.backbone.hidden.bias),
            ("backbone.out.weight", &self.backbone.out.weight),
            ("backbone.out.bias", &self.backbone.out.bias),
            ("classifier.weight", &self.classifier.weight),
            ("classifier.bias", &self.classifier.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("backbone.hidden.weight", &mut self.backbone.hidden.weight),
            ("backbone.hidden.bias", &mut self.backbone.hidden.bias),
            ("backbone.out.weight", &mut self.backbone.out.weight),
            ("backbone.out.bias", &mut self.backbone.out.bias),
            ("classifier.weight", &mut self.classifier.weight),
            ("classifier.bias", &mut self.classifier.bias),
        ]
    }
}

/// All learnable CPCANet tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub base: ErmParams,
    pub bottleneck: Dense,
    pub hypernet: Mlp,
    pub gamma: Mlp,
    pub shift: Mlp,
}

impl ModelParams {
    /// Backbone and classifier come from `shared` exactly as
    /// [`ErmParams::init`] would draw them; everything else from `own`.
    pub fn init(arch: &Architecture, shared: &mut impl Rng, own: &mut impl Rng) -> Self {
        let base = ErmParams::init(arch, shared);
        let (d, big_d) = (arch.proj_dim, arch.feature_dim);
        ModelParams {
            base,
            bottleneck: Dense::init(big_d, d, own),
            hypernet: Mlp::init(arch.domains * d * d, HYPERNET_HIDDEN, arch.stages, own),
            gamma: Mlp::init_zero_output(d, big_d, big_d, own),
            shift: Mlp::init_zero_output(d, big_d, big_d, own),
        }
    }

    /// Checks every tensor against `arch`.
    pub fn check_shapes(&self, arch: &Architecture) -> Result<()> {
        let want = expected_shapes(arch);
        for ((name, m), (wname, shape)) in self.tensors().iter().zip(&want) {
            debug_assert_eq!(name, wname);
            if m.shape() != *shape {
                return Err(crate::error::shape_err(
                    "model params",
                    format!("{name} is {:?}, expected {shape:?}", m.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn modulation_is_zero(&self) -> bool {
        [&self.gamma.out, &self.shift.out]
            .iter()
            .all(|l| l.weight.max_abs() == 0.0 && l.bias.max_abs() == 0.0)
    }

    /// Rebuilds parameters from named tensors, as produced by [`ParamSet::tensors`].
    pub fn from_named(arch: &Architecture, mut named: impl FnMut(&str) -> Option<Matrix>) -> Result<Self> {
        let mut params = ModelParams::zeroed(arch);
        for (name, slot) in params.tensors_mut() {
            let m = named(name).ok_or_else(|| Error::InvalidValue(format!("missing tensor {name}")))?;
            if m.shape() != slot.shape() {
                return Err(crate::error::shape_err(
                    "model params",
                    format!("{name} is {:?}, expected {:?}", m.shape(), slot.shape()),
                ));
            }
            *slot = m;
        }
        Ok(params)
    }

    pub(crate) fn zeroed(arch: &Architecture) -> Self {
        let (p, big_d, d) = (arch.input_dim, arch.feature_dim, arch.proj_dim);
        ModelParams {
            base: ErmParams {
                backbone: Mlp {
                    hidden: Dense::zeros(p, BACKBONE_HIDDEN),
                    out: Dense::zeros(BACKBONE_HIDDEN, big_d),
                },
                classifier: Dense::zeros(big_d, arch.classes),
            },
            bottleneck: Dense::zeros(big_d, d),
            hypernet: Mlp {
                hidden: Dense::zeros(arch.domains * d * d, HYPERNET_HIDDEN),
                out: Dense::zeros(HYPERNET_HIDDEN, arch.stages),
            },
            gamma: Mlp {
                hidden: Dense::zeros(d, big_d),
                out: Dense::zeros(big_d, big_d),
            },
            shift: Mlp {
                hidden: Dense::zeros(d, big_d),
                out: Dense::zeros(big_d, big_d),
            },
        }
    }
}

fn expected_shapes(arch: &Architecture) -> Vec<(&'static str, (usize, usize))> {
    ModelParams::zeroed(arch)
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect()
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = self.base.tensors();
        out.extend([
            ("bottleneck.weight", &self.bottleneck.weight),
            ("bottleneck.bias", &self.bottleneck.bias),
            ("hypernet.hidden.weight", &self.hypernet.hidden.weight),
            ("hypernet.hidden.bias", &self.hypernet.hidden.bias),
            ("hypernet.out.weight", &self.hypernet.out.weight),
            ("hypernet.out.bias", &self.hypernet.out.bias),
            ("gamma.hidden.weight", &self.gamma.hidden.weight),
            ("gamma.hidden.bias", &self.gamma.hidden.bias),
            ("gamma.out.weight", &self.gamma.out.weight),
            ("gamma.out.bias", &self.gamma.out.bias),
            ("shift.hidden.weight", &self.shift.hidden.weight),
            ("shift.hidden.bias", &self.shift.hidden.bias),
            ("shift.out.weight", &self.shift.out.weight),
            ("shift.out.bias", &self.shift.out.bias),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = self.base.tensors_mut();
        out.extend([
            ("bottleneck.weight", &mut self.bottleneck.weight),
            ("bottleneck.bias", &mut self.bottleneck.bias),
            ("hypernet.hidden.weight", &mut self.hypernet.hidden.weight),
            ("hypernet.hidden.bias", &mut self.hypernet.hidden.bias),
            ("hypernet.out.weight", &mut self.hypernet.out.weight),
            ("hypernet.out.bias", &mut self.hypernet.out.bias),
            ("gamma.hidden.weight", &mut self.gamma.hidden.weight),
            ("gamma.hidden.bias", &mut self.gamma.hidden.bias),
            ("gamma.out.weight", &mut self.gamma.out.weight),
            ("gamma.out.bias", &mut self.gamma.out.bias),
            ("shift.hidden.weight", &mut self.shift.hidden.weight),
            ("shift.hidden.bias", &mut self.shift.hidden.bias),
            ("shift.out.weight", &mut self.shift.out.weight),
            ("shift.out.bias", &mut self.shift.out.bias),
        ]);
        out
    }
}
