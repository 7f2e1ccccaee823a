//! Experiment configuration: a JSON document with nested sections.

use ethlab_core::moments::match_moments;
use ethlab_core::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensembles::{EnsembleParams, EntryLaw, EntryLawSpec};
use crate::observables::ObservableRecipe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentTag {
    LocalLaw,
    EthScaling,
    FlowDrift,
    GftCompare,
    GlobalLaw,
    Ward,
    MIdentity,
}

impl ExperimentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentTag::LocalLaw => "local-law",
            ExperimentTag::EthScaling => "eth-scaling",
            ExperimentTag::FlowDrift => "flow-drift",
            ExperimentTag::GftCompare => "gft-compare",
            ExperimentTag::GlobalLaw => "global-law",
            ExperimentTag::Ward => "ward",
            ExperimentTag::MIdentity => "m-identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Threads {
    #[default]
    #[serde(rename = "auto")]
    Auto,
    #[serde(untagged)]
    Fixed(usize),
}

/// Moment targets `(m02, m03, m12)` as `[re, im]` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentTargets {
    pub m02: [f64; 2],
    pub m03: [f64; 2],
    pub m12: [f64; 2],
}

fn cplx(v: [f64; 2]) -> Complex64 {
    Complex64::new(v[0], v[1])
}

impl MomentTargets {
    pub fn complex(&self) -> (Complex64, Complex64, Complex64) {
        (cplx(self.m02), cplx(self.m03), cplx(self.m12))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// `E χ_od^2` as `[re, im]`.
    pub sigma: [f64; 2],
    /// `E χ_d^2`; defaults to `1 + Re σ`.
    pub diag_second_moment: Option<f64>,
    pub offdiag_law: EntryLawSpec,
    pub diag_law: EntryLawSpec,
    /// Build the off-diagonal law with the eleven-point moment matching
    /// instead of `offdiag_law`; `sigma` is then `m02`.
    pub matched: Option<MomentTargets>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            sigma: [0.0, 0.0],
            diag_second_moment: None,
            offdiag_law: EntryLawSpec::Gaussian,
            diag_law: EntryLawSpec::Gaussian,
            matched: None,
        }
    }
}

impl EnsembleConfig {
    pub fn params(&self, n: usize, seed: u64) -> Result<EnsembleParams, String> {
        let (sigma, offdiag_law) = match &self.matched {
            Some(t) => {
                let (m02, m03, m12) = t.complex();
                let law = match_moments(m02, m03, m12).map_err(|e| e.to_string())?;
                (m02, EntryLaw::Atomic(law))
            }
            None => (cplx(self.sigma), self.offdiag_law.build().map_err(|e| e.to_string())?),
        };
        let p = EnsembleParams {
            n,
            sigma,
            diag_second_moment: self.diag_second_moment.unwrap_or(1.0 + sigma.re),
            offdiag_law,
            diag_law: self.diag_law.build().map_err(|e| e.to_string())?,
            seed,
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EtaRule {
    /// One `η` for every factor, or one per factor.
    Explicit { eta: Vec<f64> },
    /// `N η ρ(E + iη) = N^ε`.
    EtaOfE { epsilon: f64 },
    /// `η = N^{-exponent}`.
    Power { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    /// Number of resolvents `k`.
    pub k: usize,
    /// 1-based indices of `Im G` factors.
    pub imag: Vec<usize>,
    pub energies: Vec<f64>,
    pub eta_rule: EtaRule,
    /// Explicit spectral parameters `[re, im]`, used instead of
    /// `energies` and `eta_rule` when present.
    pub points: Option<Vec<[f64; 2]>>,
    pub observable: ObservableRecipe,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            imag: vec![],
            energies: vec![0.0],
            eta_rule: EtaRule::EtaOfE { epsilon: 0.3 },
            points: None,
            observable: ObservableRecipe::RandomTraceless,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Flow time `T`.
    pub time: f64,
    /// Local error tolerance of the characteristic ODE.
    pub tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { time: 0.3, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GftConfig {
    pub targets: MomentTargets,
    /// Variance of the Gaussian component, `γ = 1 - e^{-T}`.
    pub gamma: f64,
    /// Third moments for the directly matched ensemble when they should
    /// deliberately differ from `targets`.
    pub mismatch: Option<MomentTargets>,
}

impl Default for GftConfig {
    fn default() -> Self {
        Self {
            targets: MomentTargets {
                m02: [0.0, 0.0],
                m03: [0.3, 0.1],
                m12: [0.2, -0.1],
            },
            gamma: 0.3,
            mismatch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssertionConfig {
    /// `ξ` in the quantile test `q-quantile of X / Y ≤ N^ξ`.
    pub xi: f64,
    pub quantile: f64,
    /// Minimal distance of global-law spectral parameters from `[-2, 2]`.
    pub global_delta: f64,
    pub slope_range: [f64; 2],
    pub gft_quantile: f64,
    pub gft_ratio: f64,
    pub flow_factor: f64,
    pub flow_offset: f64,
    pub ward_tol: f64,
    /// Time step of the finite-difference `∂_t M` check.
    pub dt: f64,
}

impl Default for AssertionConfig {
    fn default() -> Self {
        Self {
            xi: 0.1,
            quantile: 0.99,
            global_delta: 0.5,
            slope_range: [-0.65, -0.35],
            gft_quantile: 0.9,
            gft_ratio: 3.0,
            flow_factor: 10.0,
            flow_offset: 1.0,
            ward_tol: 1e-10,
            dt: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentTag,
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub gft: GftConfig,
    #[serde(default)]
    pub assertions: AssertionConfig,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub format: OutputFormat,
    #[serde(default)]
    pub threads: Threads,
    /// Record per-task wall time; off by default so that output files are
    /// reproducible byte for byte.
    #[serde(default)]
    pub wall_time: bool,
}

/// A configuration problem, located in the source text when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError {
            line: Some(e.line()),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError {
            line: line_of(text, key),
            message: format!("{key}: {message}"),
        })?;
        Ok(cfg)
    }

    /// Checks the cross-field invariants; the error names the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.samples == 0 {
            return Err(("samples", "must be at least 1".into()));
        }
        if self.n_list.is_empty() {
            return Err(("N_list", "must not be empty".into()));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(("N_list", "must be strictly ascending".into()));
        }
        if self.n_list[0] < 2 {
            return Err(("N_list", "N must be at least 2".into()));
        }
        if let Threads::Fixed(0) = self.threads {
            return Err(("threads", "must be positive or \"auto\"".into()));
        }
        for &n in &self.n_list {
            self.ensemble.params(n, 0).map_err(|e| ("ensemble", e))?;
            self.chain.observable.validate(n).map_err(|e| ("observable", e))?;
        }
        let c = &self.chain;
        if c.k == 0 || c.k > ethlab_core::det_approx::MAX_CHAIN {
            return Err(("k", format!("chain length {} outside 1..={}", c.k, ethlab_core::det_approx::MAX_CHAIN)));
        }
        if c.imag.iter().any(|&i| i == 0 || i > c.k) {
            return Err(("imag", format!("indices must lie in 1..={}", c.k)));
        }
        match &c.points {
            Some(p) if p.is_empty() => return Err(("points", "must not be empty".into())),
            Some(p) if p.iter().any(|z| z[1] == 0.0) => {
                return Err(("points", "spectral parameters must be off the real axis".into()))
            }
            Some(_) => {}
            None => {
                if c.energies.is_empty() {
                    return Err(("energies", "must not be empty".into()));
                }
                match &c.eta_rule {
                    EtaRule::Explicit { eta } => {
                        if eta.len() != 1 && eta.len() != c.k {
                            return Err(("eta", format!("needs 1 or k = {} values", c.k)));
                        }
                        if eta.iter().any(|e| !(*e > 0.0)) {
                            return Err(("eta", "must be positive".into()));
                        }
                    }
                    EtaRule::EtaOfE { epsilon } if !(*epsilon > 0.0 && *epsilon < 1.0) => {
                        return Err(("epsilon", "must lie in (0, 1)".into()))
                    }
                    EtaRule::Power { exponent } if !(*exponent > 0.0 && *exponent < 1.0) => {
                        return Err(("exponent", "must lie in (0, 1)".into()))
                    }
                    _ => {}
                }
                if c.energies.iter().any(|e| !(-2.0..=2.0).contains(e)) && matches!(c.eta_rule, EtaRule::EtaOfE { .. }) {
                    return Err(("energies", "eta-of-e needs energies in [-2, 2]".into()));
                }
            }
        }
        let a = &self.assertions;
        if !(a.quantile > 0.0 && a.quantile <= 1.0) {
            return Err(("quantile", "must lie in (0, 1]".into()));
        }
        match self.experiment {
            ExperimentTag::EthScaling => {
                if self.n_list.len() < 3 {
                    return Err(("N_list", "the slope fit needs at least 3 values of N".into()));
                }
                if self.n_list[self.n_list.len() - 1] < 8 * self.n_list[0] {
                    return Err(("N_list", "the slope fit needs N to span a factor of at least 8".into()));
                }
            }
            ExperimentTag::FlowDrift => {
                if !(0.0..=0.5).contains(&self.flow.time) {
                    return Err(("time", "flow time must lie in [0, 0.5]".into()));
                }
                if c.imag.len() != c.k {
                    return Err(("imag", "flow-drift needs every factor Im-decorated".into()));
                }
                if c.points.is_some() {
                    return Err(("points", "flow-drift places its points through energies and eta_rule".into()));
                }
            }
            ExperimentTag::GftCompare => {
                let g = &self.gft;
                if !(g.gamma > 0.0 && g.gamma <= 1.0 - (-1.0f64).exp()) {
                    return Err(("gamma", "must lie in (0, 1 - 1/e]".into()));
                }
                if g.targets.m02[1] != 0.0 {
                    return Err(("m02", "the Gaussian component of the flow needs real m02".into()));
                }
            }
            ExperimentTag::GlobalLaw => {
                let Some(points) = &c.points else {
                    return Err(("points", "global-law needs explicit spectral parameters".into()));
                };
                for z in points {
                    let d = dist_to_support(z[0], z[1]);
                    if d < a.global_delta {
                        return Err(("points", format!("{}{:+}i lies within {} of [-2, 2]", z[0], z[1], a.global_delta)));
                    }
                }
            }
            ExperimentTag::MIdentity => {
                if c.k > 3 {
                    return Err(("k", "the derivative identities are checked for k <= 3".into()));
                }
                if !c.imag.is_empty() && c.imag.len() != c.k {
                    return Err(("imag", "needs all or none of the factors Im-decorated".into()));
                }
            }
            ExperimentTag::LocalLaw | ExperimentTag::Ward => {}
        }
        Ok(())
    }

    pub fn effective_threads(&self) -> usize {
        match self.threads {
            Threads::Fixed(n) => n,
            Threads::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

fn dist_to_support(re: f64, im: f64) -> f64 {
    let dx = if re < -2.0 {
        -2.0 - re
    } else if re > 2.0 {
        re - 2.0
    } else {
        0.0
    };
    (dx * dx + im * im).sqrt()
}
