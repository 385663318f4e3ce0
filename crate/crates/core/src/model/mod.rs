//! Model specification: coefficients, standing hypotheses and regime schedules.

mod coefficients;
mod config;
mod hypotheses;
mod lift;
mod regime;

pub use coefficients::{Affine, Builtin, Coefficient, CoefficientSet, FnCoefficient, GrowthConstants};
pub use config::{
    CoefficientsSection, CovarianceSection, DiagonalSchedule, DomainSection, EigensystemSection, InitialSection,
    ModelSpec, RegimeSection, RngSection, RunSection, StudySection,
};
pub use hypotheses::{
    check_hypotheses, probe_lipschitz, singular_laplace_closed_form, singular_laplace_integral, zeta_series,
    Argument, HypothesisCheck, HypothesisParams, HypothesisReport, LipschitzProbe, ProbeEntry, SampleBox,
    SeriesEstimate, ViolatingPair,
};
pub use lift::Lift;
pub use regime::{check_regime, RegimeEntry, RegimeReport, RegimeSchedule, FAST_SUBSTEPS};

use crate::error::{Error, Result};
use crate::spectral::{Collocation, CovarianceSpec, EigenSystem};

/// Everything the integrators need: eigensystems, covariances, coefficients.
///
/// Both components live on the same domain and truncation so the pointwise
/// lifts `B_i(X, Y)(x) = b_i(x, X(x), Y(x))` share one collocation grid.
#[derive(Debug, Clone)]
pub struct SlowFastModel {
    pub slow_sys: EigenSystem,
    pub fast_sys: EigenSystem,
    pub slow_cov: CovarianceSpec,
    pub fast_cov: CovarianceSpec,
    pub coeffs: CoefficientSet,
    grid_points: usize,
}

impl SlowFastModel {
    pub fn new(sys: EigenSystem, slow_cov: CovarianceSpec, fast_cov: CovarianceSpec, coeffs: CoefficientSet) -> Result<Self> {
        Self::with_systems(sys.clone(), sys, slow_cov, fast_cov, coeffs)
    }

    /// Distinct operators `A₁`, `A₂` sharing a boundary kind, length and truncation.
    pub fn with_systems(
        slow_sys: EigenSystem,
        fast_sys: EigenSystem,
        slow_cov: CovarianceSpec,
        fast_cov: CovarianceSpec,
        coeffs: CoefficientSet,
    ) -> Result<Self> {
        let m = slow_sys.modes();
        if fast_sys.modes() != m || fast_sys.boundary() != slow_sys.boundary() || fast_sys.length() != slow_sys.length() {
            return Err(Error::invalid("slow and fast eigensystems must share boundary, length and mode count"));
        }
        if slow_cov.modes() != m || fast_cov.modes() != m {
            return Err(Error::invalid(format!("covariances must have {m} eigenvalues")));
        }
        if slow_cov.coupling() != fast_cov.coupling() {
            return Err(Error::invalid("slow and fast covariances disagree on the noise coupling"));
        }
        let grid_points = slow_sys.default_grid_points();
        Ok(Self { slow_sys, fast_sys, slow_cov, fast_cov, coeffs, grid_points })
    }

    pub fn with_grid_points(mut self, n: usize) -> Result<Self> {
        if n < self.modes() {
            return Err(Error::invalid(format!("grid_points = {n} is below the mode count {}", self.modes())));
        }
        self.grid_points = n;
        Ok(self)
    }

    pub fn modes(&self) -> usize {
        self.slow_sys.modes()
    }

    pub fn grid_points(&self) -> usize {
        self.grid_points
    }

    pub fn lambda(&self) -> f64 {
        self.slow_sys.lambda().min(self.fast_sys.lambda())
    }

    pub fn collocation(&self) -> Collocation {
        Collocation::new(&self.slow_sys, self.grid_points).expect("grid size validated at construction")
    }

    pub fn lift(&self) -> Lift {
        Lift::new(self.collocation())
    }

    pub fn check_hypotheses(&self, params: &HypothesisParams) -> Result<HypothesisReport> {
        check_hypotheses(&self.coeffs, &self.slow_sys, &self.fast_sys, &self.slow_cov, &self.fast_cov, params)
    }
}
