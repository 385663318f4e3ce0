//! TOML model files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::coefficients::{Builtin, CoefficientSet, GrowthConstants};
use super::hypotheses::HypothesisParams;
use super::regime::{RegimeEntry, RegimeSchedule};
use super::SlowFastModel;
use crate::error::{Error, Result};
use crate::spectral::{Boundary, Coupling, CovarianceSpec, EigenSystem, SpectralField, DEFAULT_NEUMANN_SHIFT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub boundary: Boundary,
    #[serde(default = "default_length")]
    pub length: f64,
    /// Mass shift `c₀` for Neumann conditions.
    #[serde(default)]
    pub neumann_shift: Option<f64>,
}

fn default_length() -> f64 {
    std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigensystemSection {
    pub modes: usize,
    #[serde(default)]
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    /// Per-mode `λ_k`; missing trailing modes repeat the last value.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    /// Same `λ` for every mode (white noise when 1).
    #[serde(default)]
    pub uniform: Option<f64>,
    #[serde(default)]
    pub coupling: Coupling,
}

impl CovarianceSection {
    fn build(&self, modes: usize, which: &str) -> Result<CovarianceSpec> {
        let lambdas = match (&self.lambdas, self.uniform) {
            (Some(_), Some(_)) => {
                return Err(Error::config(format!("[{which}]: give either `lambdas` or `uniform`, not both")))
            }
            (Some(l), None) if l.is_empty() => return Err(Error::config(format!("[{which}]: empty `lambdas`"))),
            (Some(l), None) => (0..modes).map(|k| l[k.min(l.len() - 1)]).collect(),
            (None, Some(u)) => vec![u; modes],
            (None, None) => vec![1.0; modes],
        };
        CovarianceSpec::new(lambdas, self.coupling).map_err(|e| Error::config(format!("[{which}]: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    pub b1: Builtin,
    pub b2: Builtin,
    pub sigma1: Builtin,
    pub sigma2: Builtin,
    #[serde(default)]
    pub growth_c: Option<f64>,
    #[serde(default)]
    pub growth_zeta: Option<f64>,
    #[serde(default)]
    pub sigma1_bounds: Option<(f64, f64)>,
    #[serde(default)]
    pub sigma2_bound: Option<f64>,
}

/// Diagonal schedule generator, see [`RegimeSchedule::diagonal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalSchedule {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_window_scale")]
    pub window_scale: f64,
    #[serde(default = "default_record_dt")]
    pub stride: f64,
}

fn default_window_scale() -> f64 {
    0.05
}

fn default_record_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    #[serde(default)]
    pub entries: Vec<RegimeEntry>,
    #[serde(default)]
    pub diagonal: Option<DiagonalSchedule>,
}

impl RegimeSection {
    pub fn schedule(&self) -> Result<Option<RegimeSchedule>> {
        match (&self.diagonal, self.entries.is_empty()) {
            (Some(_), false) => Err(Error::config("[regime]: give either `entries` or `diagonal`, not both")),
            (Some(d), true) => Ok(Some(RegimeSchedule::diagonal(&d.epsilons, d.window_scale, d.stride))),
            (None, false) => Ok(Some(RegimeSchedule::new(self.entries.clone()))),
            (None, true) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Leading coefficients of `X₀`; the rest are zero.
    #[serde(default)]
    pub slow: Vec<f64>,
    #[serde(default)]
    pub fast: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_record_dt")]
    pub record_dt: f64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_blowup")]
    pub blowup_threshold: f64,
    /// Control budget `N`.
    #[serde(default)]
    pub budget: Option<f64>,
    /// Step for single-scale runs (frozen fast process, averaged path).
    #[serde(default = "default_natural_dt")]
    pub natural_dt: f64,
    /// Length of ergodic runs in fast natural time.
    #[serde(default = "default_ergodic_horizon")]
    pub ergodic_horizon: f64,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_replicas() -> usize {
    32
}
fn default_blowup() -> f64 {
    1e6
}
fn default_natural_dt() -> f64 {
    0.01
}
fn default_ergodic_horizon() -> f64 {
    500.0
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            record_dt: default_record_dt(),
            replicas: default_replicas(),
            blowup_threshold: default_blowup(),
            budget: None,
            natural_dt: default_natural_dt(),
            ergodic_horizon: default_ergodic_horizon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RngSection {
    pub seed: u64,
}


/// Study-specific knobs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Laplace functional `h(φ) = min(cap, scale·⟨φ(T), e₀⟩²)`.
    #[serde(default = "default_h_scale")]
    pub h_scale: f64,
    #[serde(default = "default_h_cap")]
    pub h_cap: f64,
    /// Fitting window for mixing-rate studies.
    #[serde(default = "default_mixing_times")]
    pub mixing_times: Vec<f64>,
    /// Number of time bins in marginal tests.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Shift of the negative-control path in mode 0.
    #[serde(default = "default_shift")]
    pub shifted_path: f64,
}

fn default_h_scale() -> f64 {
    1.1565
}
fn default_h_cap() -> f64 {
    10.0
}
fn default_mixing_times() -> Vec<f64> {
    vec![4.0, 16.0, 64.0, 256.0]
}
fn default_bins() -> usize {
    4
}
fn default_shift() -> f64 {
    1.0
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            h_scale: default_h_scale(),
            h_cap: default_h_cap(),
            mixing_times: default_mixing_times(),
            bins: default_bins(),
            shifted_path: default_shift(),
        }
    }
}

/// Contents of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub domain: DomainSection,
    pub eigensystem: EigensystemSection,
    #[serde(default = "white_section")]
    pub covariance1: CovarianceSection,
    #[serde(default = "white_section")]
    pub covariance2: CovarianceSection,
    pub coefficients: CoefficientsSection,
    #[serde(default)]
    pub hypotheses: HypothesisParams,
    #[serde(default)]
    pub regime: RegimeSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default)]
    pub rng: RngSection,
}

fn white_section() -> CovarianceSection {
    CovarianceSection { lambdas: None, uniform: Some(1.0), coupling: Coupling::Independent }
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("model spec always serialises")
    }

    pub fn eigensystem(&self) -> Result<EigenSystem> {
        let d = &self.domain;
        let shift = match d.boundary {
            Boundary::Dirichlet => d.neumann_shift.unwrap_or(0.0),
            Boundary::Neumann => d.neumann_shift.unwrap_or(DEFAULT_NEUMANN_SHIFT),
        };
        EigenSystem::laplacian_with_shift(d.boundary, d.length, self.eigensystem.modes, shift)
            .map_err(|e| Error::config(e.to_string()))
    }

    pub fn coefficient_set(&self) -> CoefficientSet {
        let c = &self.coefficients;
        let set = CoefficientSet::new(c.b1.clone(), c.b2.clone(), c.sigma1.clone(), c.sigma2.clone());
        let derived = set.constants.clone();
        set.with_constants(GrowthConstants {
            growth_c: c.growth_c.unwrap_or(derived.growth_c),
            growth_zeta: c.growth_zeta.unwrap_or(derived.growth_zeta),
            sigma1_bounds: c.sigma1_bounds.or(derived.sigma1_bounds),
            sigma2_bound: c.sigma2_bound.unwrap_or(derived.sigma2_bound),
        })
    }

    pub fn model(&self) -> Result<SlowFastModel> {
        let sys = self.eigensystem()?;
        let m = sys.modes();
        let cov1 = self.covariance1.build(m, "covariance1")?;
        let cov2 = self.covariance2.build(m, "covariance2")?;
        let mut model = SlowFastModel::new(sys, cov1, cov2, self.coefficient_set())?;
        if let Some(n) = self.eigensystem.grid_points {
            model = model.with_grid_points(n)?;
        }
        Ok(model)
    }

    pub fn schedule(&self) -> Result<Option<RegimeSchedule>> {
        self.regime.schedule()
    }

    pub fn initial_slow(&self) -> Result<SpectralField> {
        pad("initial.slow", &self.initial.slow, self.eigensystem.modes)
    }

    pub fn initial_fast(&self) -> Result<SpectralField> {
        pad("initial.fast", &self.initial.fast, self.eigensystem.modes)
    }
}

fn pad(name: &str, values: &[f64], modes: usize) -> Result<SpectralField> {
    if values.len() > modes {
        return Err(Error::config(format!("{name} has {} entries but only {modes} modes", values.len())));
    }
    let mut c = values.to_vec();
    c.resize(modes, 0.0);
    Ok(SpectralField::new(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[domain]
boundary = "dirichlet"
length = 3.141592653589793

[eigensystem]
modes = 8

[covariance1]
uniform = 1.0
coupling = "identical"

[covariance2]
lambdas = [1.0, 0.5]
coupling = "identical"

[coefficients]
b1 = { kind = "tanh", fast_gain = 1.0 }
b2 = { kind = "linear", slow = 1.0 }
sigma1 = { kind = "constant", value = 1.0 }
sigma2 = { kind = "constant", value = 1.0 }

[regime]
diagonal = { epsilons = [0.1, 0.01, 0.001] }

[initial]
slow = [2.0, 1.0]

[rng]
seed = 2024
"#;

    #[test]
    fn loads_example() {
        let spec = ModelSpec::from_toml(EXAMPLE).unwrap();
        let model = spec.model().unwrap();
        assert_eq!(model.modes(), 8);
        assert_eq!(model.fast_cov.lambdas()[5], 0.5);
        assert_eq!(model.fast_cov.coupling(), Coupling::Identical);
        assert_eq!(spec.initial_slow().unwrap().coeffs()[..3], [2.0, 1.0, 0.0]);
        assert_eq!(spec.schedule().unwrap().unwrap().entries.len(), 3);
        assert_eq!(spec.rng.seed, 2024);
        let again = ModelSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn rejects_unknown_keys_and_coefficients() {
        let bad = EXAMPLE.replace("modes = 8", "modes = 8\nfoo = 1");
        assert!(matches!(ModelSpec::from_toml(&bad), Err(Error::Config(_))));
        let bad = EXAMPLE.replace("kind = \"tanh\"", "kind = \"cubic\"");
        assert!(ModelSpec::from_toml(&bad).is_err());
        let bad = EXAMPLE.replace("slow = [2.0, 1.0]", "slow = [1,2,3,4,5,6,7,8,9.0]");
        assert!(ModelSpec::from_toml(&bad).unwrap().initial_slow().is_err());
    }
}
