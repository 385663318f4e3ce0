//! Field-valued paths on a uniform time grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralField;

/// `ψ(t_i)` at `t_i = i·dt`, `i = 0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    dt: f64,
    fields: Vec<SpectralField>,
}

impl PathSpec {
    pub fn new(dt: f64, fields: Vec<SpectralField>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("path step must be positive, got {dt}")));
        }
        let Some(first) = fields.first() else {
            return Err(Error::invalid("a path needs at least one point"));
        };
        let m = first.modes();
        if fields.iter().any(|f| f.modes() != m) {
            return Err(Error::invalid("path fields have inconsistent mode counts"));
        }
        Ok(Self { dt, fields })
    }

    /// Samples `f` at `i·dt` for `i = 0..=round(horizon/dt)`.
    pub fn from_fn(dt: f64, horizon: f64, f: impl Fn(f64) -> SpectralField) -> Result<Self> {
        let n = steps_for(horizon, dt)?;
        Self::new(dt, (0..=n).map(|i| f(i as f64 * dt)).collect())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.fields[0].modes()
    }

    pub fn horizon(&self) -> f64 {
        (self.fields.len() - 1) as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.fields.len()).map(|i| i as f64 * self.dt).collect()
    }

    pub fn fields(&self) -> &[SpectralField] {
        &self.fields
    }

    pub fn field(&self, i: usize) -> &SpectralField {
        &self.fields[i]
    }

    pub fn start(&self) -> &SpectralField {
        &self.fields[0]
    }

    pub fn end(&self) -> &SpectralField {
        self.fields.last().expect("non-empty")
    }

    /// Whether `ψ(0)` equals `x0` to within `tol` in `H`.
    pub fn starts_at(&self, x0: &SpectralField, tol: f64) -> bool {
        self.fields[0].distance(x0) <= tol
    }

    /// Linear interpolation, clamped to `[0, horizon]`. Exact on grid points.
    pub fn at(&self, t: f64) -> SpectralField {
        let s = (t / self.dt).clamp(0.0, (self.fields.len() - 1) as f64);
        let i = s.floor() as usize;
        let frac = s - i as f64;
        if frac < 1e-12 || i + 1 >= self.fields.len() {
            return self.fields[i.min(self.fields.len() - 1)].clone();
        }
        let mut out = self.fields[i].scaled(1.0 - frac);
        out.axpy(frac, &self.fields[i + 1]);
        out
    }

    /// `sup_i |ψ(t_i) - φ(t_i)|_H` over a common grid.
    pub fn sup_distance(&self, other: &PathSpec) -> Result<f64> {
        if self.len() != other.len() || (self.dt - other.dt).abs() > 1e-12 * self.dt {
            return Err(Error::invalid("paths live on different grids"));
        }
        Ok(self.fields.iter().zip(&other.fields).map(|(a, b)| a.distance(b)).fold(0.0, f64::max))
    }
}

/// Number of steps of size `dt` in `horizon`, which must be a whole multiple.
pub fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon >= 0.0) || !(dt > 0.0) {
        return Err(Error::invalid(format!("need horizon ≥ 0 and dt > 0, got {horizon}, {dt}")));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(dt) {
        return Err(Error::invalid(format!("horizon {horizon} is not a multiple of the step {dt}")));
    }
    Ok(n as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_and_grid() {
        let p = PathSpec::from_fn(0.25, 1.0, |t| SpectralField::new(vec![t, 2.0 * t])).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p.at(0.5).coeffs(), &[0.5, 1.0]);
        assert!((p.at(0.6).coeffs()[1] - 1.2).abs() < 1e-14);
        assert_eq!(p.at(7.0).coeffs(), &[1.0, 2.0]);
        assert!(p.starts_at(&SpectralField::zeros(2), 0.0));
        assert!(steps_for(1.0, 0.3).is_err());
        assert_eq!(steps_for(1.0, 1e-3).unwrap(), 1000);
    }
}
