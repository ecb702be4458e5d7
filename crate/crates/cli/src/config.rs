use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cpca_core::checks::Scope;
use cpca_core::data::{EnsembleParams, ToyDgParams};
use cpca_core::fg::FgConfig;
use cpca_core::net::{SweepConfig, TrainerConfig};
use serde::Deserialize;

/// Everything a command may read from `--config`. Each command uses its own
/// section; flags given on the command line win over file values.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub fg: FgConfig,
    pub unfold: UnfoldSection,
    pub gradcheck: GradcheckSection,
    pub ensemble: EnsembleParams,
    pub toy: ToyDgParams,
    pub train: TrainerConfig,
    pub sweep: SweepConfig,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct UnfoldSection {
    pub stages: usize,
    pub eps: f64,
    pub eps_norm: f64,
    pub etas: Option<Vec<f64>>,
}

impl Default for UnfoldSection {
    fn default() -> Self {
        let c = cpca_core::unfold::UnfoldConfig::default();
        UnfoldSection {
            stages: c.stages,
            eps: c.eps,
            eps_norm: c.eps_norm,
            etas: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct GradcheckSection {
    pub scope: Scope,
    pub d: usize,
    pub stages: usize,
    pub domains: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let dims = cpca_core::checks::CheckDims::default();
        GradcheckSection {
            scope: Scope::Primitive,
            d: dims.d,
            stages: dims.stages,
            domains: dims.domains,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct BenchSection {
    /// Unfolded stages and their constant step size.
    pub stages: usize,
    pub eta: f64,
    /// Timing repetitions per solver.
    pub reps: usize,
    /// Training steps before the naive-classifier diagnostic.
    pub naive_train_steps: usize,
    pub naive_fit_steps: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            stages: 50,
            eta: 0.1,
            reps: 5,
            naive_train_steps: 500,
            naive_fit_steps: 300,
        }
    }
}

impl RunConfig {
    /// Reads TOML or JSON, picked by extension; other extensions try both.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        let parsed = match ext {
            "toml" => toml::from_str(&text).map_err(anyhow::Error::from),
            "json" => serde_json::from_str(&text).map_err(anyhow::Error::from),
            _ => toml::from_str(&text)
                .map_err(anyhow::Error::from)
                .or_else(|_| serde_json::from_str(&text).map_err(anyhow::Error::from)),
        };
        parsed.with_context(|| format!("parsing config {}", path.display()))
    }

    /// The effective seed: flag, then file top level, then `fallback`.
    pub fn seed(&self, flag: Option<u64>, fallback: u64) -> u64 {
        flag.or(self.seed).unwrap_or(fallback)
    }
}

/// Parses `"0.1,0.2"` style lists.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad list item `{s}`: {e}")))
        .collect::<anyhow::Result<_>>()?;
    if items.is_empty() {
        bail!("empty list `{text}`");
    }
    Ok(items)
}
