//! Pointwise lifts `B(X, Y)(x) = b(x, X(x), Y(x))` and `Σ(X, Y)Z = σ·Z`.

use super::coefficients::Coefficient;
use crate::spectral::Collocation;

/// Collocation workspace for evaluating coefficients on spectral fields.
///
/// Affine coefficients bypass the grid: their projection is exact in
/// coefficient space, and agrees with the collocated result to rounding.
#[derive(Debug, Clone)]
pub struct Lift {
    col: Collocation,
    unit: Vec<f64>,
    slow_grid: Vec<f64>,
    fast_grid: Vec<f64>,
    values: Vec<f64>,
    aux: Vec<f64>,
    weighted: Vec<f64>,
}

impl Lift {
    pub fn new(col: Collocation) -> Self {
        let n = col.len();
        let m = col.modes();
        let unit = col.from_grid(&vec![1.0; n]).into_coeffs();
        Self {
            col,
            unit,
            slow_grid: vec![0.0; n],
            fast_grid: vec![0.0; n],
            values: vec![0.0; n],
            aux: vec![0.0; n],
            weighted: vec![0.0; m],
        }
    }

    pub fn collocation(&self) -> &Collocation {
        &self.col
    }

    /// Coefficients of the constant function 1.
    pub fn unit(&self) -> &[f64] {
        &self.unit
    }

    /// Grid values of `f(x, X(x), Y(x))`.
    pub fn values(&mut self, coef: &dyn Coefficient, slow: &[f64], fast: &[f64]) -> &[f64] {
        self.fill_values(coef, slow, fast);
        &self.values
    }

    fn fill_values(&mut self, coef: &dyn Coefficient, slow: &[f64], fast: &[f64]) {
        let use_slow = coef.depends_on_slow();
        let use_fast = coef.depends_on_fast();
        if use_slow {
            self.col.to_grid_into(slow, &mut self.slow_grid);
        }
        if use_fast {
            self.col.to_grid_into(fast, &mut self.fast_grid);
        }
        let pts = self.col.points();
        for j in 0..pts.len() {
            let s = if use_slow { self.slow_grid[j] } else { 0.0 };
            let f = if use_fast { self.fast_grid[j] } else { 0.0 };
            self.values[j] = coef.eval(pts[j], s, f);
        }
    }

    /// `out = B(X, Y)` in coefficient space.
    pub fn drift(&mut self, coef: &dyn Coefficient, slow: &[f64], fast: &[f64], out: &mut [f64]) {
        if let Some(a) = coef.affine() {
            for k in 0..out.len() {
                out[k] = a.slow * slow[k] + a.fast * fast[k] + a.offset * self.unit[k];
            }
            return;
        }
        self.fill_values(coef, slow, fast);
        self.col.from_grid_into(&self.values, out);
    }

    /// `out = Σ(X, Y) Q z` with `Q e_k = λ_k e_k`, in coefficient space.
    pub fn multiply(
        &mut self,
        coef: &dyn Coefficient,
        slow: &[f64],
        fast: &[f64],
        lambdas: &[f64],
        z: &[f64],
        out: &mut [f64],
    ) {
        if let Some(c) = coef.affine().and_then(|a| a.constant()) {
            for k in 0..out.len() {
                out[k] = c * lambdas[k] * z[k];
            }
            return;
        }
        for k in 0..self.weighted.len() {
            self.weighted[k] = lambdas[k] * z[k];
        }
        self.fill_values(coef, slow, fast);
        self.col.to_grid_into(&self.weighted, &mut self.aux);
        for (v, a) in self.values.iter_mut().zip(&self.aux) {
            *v *= a;
        }
        self.col.from_grid_into(&self.values, out);
    }
}
