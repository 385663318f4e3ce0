//! Eigenbasis representation of fields on the interval `D = (0, L)`.
//!
//! Every field lives in the orthonormal eigenbasis `{e_k}` of the (shifted)
//! Laplacian, so the semigroup `S(t) = exp(tA)` and the fractional powers
//! `(-A)^{θ/2}` act diagonally. Pointwise nonlinearities are evaluated by
//! collocation on a uniform grid whose quadrature inverts the basis exactly
//! for every retained mode.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary operator of the elliptic realisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Dirichlet,
    Neumann,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dirichlet" => Ok(Boundary::Dirichlet),
            "neumann" => Ok(Boundary::Neumann),
            other => Err(Error::config(format!("unknown boundary kind `{other}`"))),
        }
    }
}

/// Default mass shift `c₀` added to `-A` under Neumann conditions.
pub const DEFAULT_NEUMANN_SHIFT: f64 = 1.0;

/// Eigenpairs `A e_k = -α_k e_k` of a self-adjoint realisation on `(0, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    boundary: Boundary,
    length: f64,
    alphas: Vec<f64>,
    sup_norms: Vec<f64>,
    shift: f64,
}

impl EigenSystem {
    /// Closed-form eigenpairs of `d²/dx²` on `(0, L)`.
    ///
    /// Neumann conditions use [`DEFAULT_NEUMANN_SHIFT`]; see
    /// [`EigenSystem::laplacian_with_shift`].
    pub fn laplacian(boundary: Boundary, length: f64, modes: usize) -> Result<Self> {
        let shift = match boundary {
            Boundary::Dirichlet => 0.0,
            Boundary::Neumann => DEFAULT_NEUMANN_SHIFT,
        };
        Self::laplacian_with_shift(boundary, length, modes, shift)
    }

    /// Eigenpairs of `d²/dx² - c₀` on `(0, L)`.
    ///
    /// The Neumann Laplacian has a zero eigenvalue, which the strict
    /// dissipativity `inf α_k > 0` rules out, so a positive `shift` is
    /// required there. For Dirichlet conditions any `shift ≥ 0` is accepted.
    pub fn laplacian_with_shift(
        boundary: Boundary,
        length: f64,
        modes: usize,
        shift: f64,
    ) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::invalid(format!("domain length must be positive, got {length}")));
        }
        if modes == 0 {
            return Err(Error::invalid("mode count must be at least 1"));
        }
        if !(shift >= 0.0) || (boundary == Boundary::Neumann && shift <= 0.0) {
            return Err(Error::invalid(format!(
                "shift {shift} not admissible for {boundary:?} conditions"
            )));
        }
        let wave = PI / length;
        let (alphas, sup_norms) = match boundary {
            Boundary::Dirichlet => (0..modes)
                .map(|k| {
                    let n = (k + 1) as f64;
                    (n * n * wave * wave + shift, (2.0 / length).sqrt())
                })
                .unzip(),
            Boundary::Neumann => (0..modes)
                .map(|k| {
                    let n = k as f64;
                    let sup = if k == 0 { (1.0 / length).sqrt() } else { (2.0 / length).sqrt() };
                    (n * n * wave * wave + shift, sup)
                })
                .unzip(),
        };
        Ok(Self { boundary, length, alphas, sup_norms, shift })
    }

    /// Plug in externally computed eigenvalues and sup norms.
    ///
    /// Basis functions are still the sine/cosine family of `boundary`, which
    /// is what collocation uses.
    pub fn from_parts(
        boundary: Boundary,
        length: f64,
        alphas: Vec<f64>,
        sup_norms: Vec<f64>,
    ) -> Result<Self> {
        if alphas.is_empty() || alphas.len() != sup_norms.len() {
            return Err(Error::invalid("alphas and sup_norms must be non-empty and equally long"));
        }
        if !(length > 0.0) {
            return Err(Error::invalid("domain length must be positive"));
        }
        if alphas.iter().any(|a| !(*a > 0.0)) || sup_norms.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("alphas and sup_norms must be strictly positive"));
        }
        if alphas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("alphas must be non-decreasing"));
        }
        Ok(Self { boundary, length, alphas, sup_norms, shift: 0.0 })
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn modes(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sup_norms(&self) -> &[f64] {
        &self.sup_norms
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// `λ = inf_k α_k`.
    pub fn lambda(&self) -> f64 {
        self.alphas[0]
    }

    /// Value of the `k`-th L²-normalised eigenfunction at `x`.
    pub fn eigenfunction(&self, k: usize, x: f64) -> f64 {
        let wave = PI / self.length;
        match self.boundary {
            Boundary::Dirichlet => (2.0 / self.length).sqrt() * ((k + 1) as f64 * wave * x).sin(),
            Boundary::Neumann if k == 0 => (1.0 / self.length).sqrt(),
            Boundary::Neumann => (2.0 / self.length).sqrt() * (k as f64 * wave * x).cos(),
        }
    }

    /// Smallest power of two that is at least `4 · modes`.
    pub fn default_grid_points(&self) -> usize {
        (4 * self.modes()).next_power_of_two()
    }

    /// Same basis truncated to the first `modes` eigenpairs.
    pub fn truncated(&self, modes: usize) -> Result<Self> {
        if modes == 0 || modes > self.modes() {
            return Err(Error::invalid(format!("cannot truncate {} modes to {modes}", self.modes())));
        }
        Ok(Self {
            alphas: self.alphas[..modes].to_vec(),
            sup_norms: self.sup_norms[..modes].to_vec(),
            ..self.clone()
        })
    }
}

/// Coordinates `⟨X, e_k⟩_H` of a field in the eigenbasis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(modes: usize) -> Self {
        Self { coeffs: vec![0.0; modes] }
    }

    /// Unit mass on mode `k`.
    pub fn unit(modes: usize, k: usize) -> Self {
        let mut f = Self::zeros(modes);
        f.coeffs[k] = 1.0;
        f
    }

    pub fn modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// `|X|_H`, by Parseval.
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale · other`.
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self { coeffs: self.coeffs.iter().map(|c| c * scale).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Evaluates `Σ_k c_k e_k` on `grid_points` collocation nodes of `sys`.
    pub fn to_grid(&self, sys: &EigenSystem, grid_points: usize) -> Result<Vec<f64>> {
        Ok(Collocation::new(sys, grid_points)?.to_grid(self))
    }

    /// Inverse of [`SpectralField::to_grid`] on retained modes.
    pub fn from_grid(values: &[f64], sys: &EigenSystem) -> Result<Self> {
        Ok(Collocation::new(sys, values.len())?.from_grid(values))
    }
}

impl From<Vec<f64>> for SpectralField {
    fn from(coeffs: Vec<f64>) -> Self {
        Self::new(coeffs)
    }
}

/// `S(t)f`: multiplies mode `k` by `exp(-α_k t)`.
pub fn apply_semigroup(field: &SpectralField, t: f64, sys: &EigenSystem) -> Result<SpectralField> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("semigroup time must be non-negative, got {t}")));
    }
    check_modes(field, sys)?;
    Ok(SpectralField::new(
        field.coeffs.iter().zip(&sys.alphas).map(|(c, a)| c * (-a * t).exp()).collect(),
    ))
}

/// `|f|_θ = |(-A)^{θ/2} f|_H`.
pub fn sobolev_norm(field: &SpectralField, theta: f64, sys: &EigenSystem) -> Result<f64> {
    check_modes(field, sys)?;
    Ok(field
        .coeffs
        .iter()
        .zip(&sys.alphas)
        .map(|(c, a)| a.powf(theta) * c * c)
        .sum::<f64>()
        .sqrt())
}

fn check_modes(field: &SpectralField, sys: &EigenSystem) -> Result<()> {
    if field.modes() != sys.modes() {
        return Err(Error::invalid(format!(
            "field has {} modes but the eigensystem has {}",
            field.modes(),
            sys.modes()
        )));
    }
    Ok(())
}

/// Uniform collocation grid with an exactly inverting quadrature.
///
/// Dirichlet fields are sampled on the interior nodes `x_j = (j+1)L/(n+1)`
/// (the trapezoid rule, boundary values vanish); Neumann fields on the cell
/// centres `x_j = (j+½)L/n`. In both cases the discrete sine/cosine
/// orthogonality makes `from_grid ∘ to_grid` the identity on the first `n`
/// modes.
#[derive(Debug, Clone)]
pub struct Collocation {
    points: Vec<f64>,
    weight: f64,
    modes: usize,
    // basis[k * n + j] = e_k(x_j)
    basis: Vec<f64>,
}

impl Collocation {
    pub fn new(sys: &EigenSystem, grid_points: usize) -> Result<Self> {
        let m = sys.modes();
        if grid_points < m {
            return Err(Error::invalid(format!(
                "grid_points = {grid_points} is below the mode count {m}"
            )));
        }
        let n = grid_points;
        let l = sys.length();
        let (points, weight): (Vec<f64>, f64) = match sys.boundary() {
            Boundary::Dirichlet => {
                let h = l / (n + 1) as f64;
                ((0..n).map(|j| (j + 1) as f64 * h).collect(), h)
            }
            Boundary::Neumann => {
                let h = l / n as f64;
                ((0..n).map(|j| (j as f64 + 0.5) * h).collect(), h)
            }
        };
        let mut basis = Vec::with_capacity(m * n);
        for k in 0..m {
            basis.extend(points.iter().map(|&x| sys.eigenfunction(k, x)));
        }
        Ok(Self { points, weight, modes: m, basis })
    }

    /// Grid sized by [`EigenSystem::default_grid_points`].
    pub fn with_default_size(sys: &EigenSystem) -> Self {
        Self::new(sys, sys.default_grid_points()).expect("default grid always exceeds mode count")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Quadrature weight shared by every node.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn to_grid(&self, field: &SpectralField) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.to_grid_into(field.coeffs(), &mut out);
        out
    }

    pub fn to_grid_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &c) in coeffs.iter().enumerate().take(self.modes) {
            if c == 0.0 {
                continue;
            }
            let row = &self.basis[k * n..(k + 1) * n];
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
    }

    pub fn from_grid(&self, values: &[f64]) -> SpectralField {
        let mut coeffs = vec![0.0; self.modes];
        self.from_grid_into(values, &mut coeffs);
        SpectralField::new(coeffs)
    }

    pub fn from_grid_into(&self, values: &[f64], coeffs: &mut [f64]) {
        let n = self.len();
        for (k, c) in coeffs.iter_mut().enumerate().take(self.modes) {
            let row = &self.basis[k * n..(k + 1) * n];
            *c = self.weight * row.iter().zip(values).map(|(b, v)| b * v).sum::<f64>();
        }
    }

    /// Quadrature approximation of `⟨f, g⟩_H` for grid functions.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weight * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm_sq(&self, f: &[f64]) -> f64 {
        self.inner(f, f)
    }
}

/// Diagonal covariance `Q f_k = λ_k e_k` together with the noise coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    lambdas: Vec<f64>,
    coupling: Coupling,
}

/// Whether the slow and fast Wiener processes share their Brownian drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    #[default]
    Independent,
    Identical,
}

impl CovarianceSpec {
    pub fn new(lambdas: Vec<f64>, coupling: Coupling) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::invalid("covariance needs at least one eigenvalue"));
        }
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("covariance eigenvalues must be finite and non-negative"));
        }
        Ok(Self { lambdas, coupling })
    }

    /// Space-time white noise (`λ_k ≡ 1`), admissible in one dimension.
    pub fn white(modes: usize) -> Self {
        Self { lambdas: vec![1.0; modes], coupling: Coupling::Independent }
    }

    pub fn zero(modes: usize) -> Self {
        Self { lambdas: vec![0.0; modes], coupling: Coupling::Independent }
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    pub fn modes(&self) -> usize {
        self.lambdas.len()
    }

    /// `κ = sup_k λ_k |e_k|_0`.
    pub fn kappa(&self, sys: &EigenSystem) -> f64 {
        self.lambdas.iter().zip(sys.sup_norms()).map(|(l, s)| l * s).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.lambdas.iter().all(|l| *l == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirichlet(m: usize) -> EigenSystem {
        EigenSystem::laplacian(Boundary::Dirichlet, PI, m).unwrap()
    }

    #[test]
    fn dirichlet_eigenvalues_on_pi() {
        let sys = dirichlet(3);
        assert_eq!(sys.alphas().len(), 3);
        for (a, want) in sys.alphas().iter().zip([1.0, 4.0, 9.0]) {
            assert!((a - want).abs() < 1e-12);
        }
        let one = dirichlet(1);
        assert!((one.sup_norms()[0] - (2.0 / PI).sqrt()).abs() < 1e-15);
    }

    /// Lowest eigenvalues of `-u'' + c u` with `u'(0) = u'(L) = 0` from the
    /// standard second-order finite-difference matrix (ghost-point reflection
    /// at both ends), by bisection on the Sturm sequence of the tridiagonal.
    fn neumann_fd_eigs(length: f64, shift: f64, points: usize, count: usize) -> Vec<f64> {
        let h = length / (points - 1) as f64;
        let n = points;
        // Symmetrised: D^{1/2} T D^{-1/2} with the boundary rows scaled by 2.
        let diag: Vec<f64> = vec![2.0 / (h * h) + shift; n];
        let mut off = vec![-1.0 / (h * h); n - 1];
        off[0] *= 2f64.sqrt();
        off[n - 2] *= 2f64.sqrt();
        let count_below = |x: f64| -> usize {
            let mut c = 0;
            let mut q = diag[0] - x;
            if q < 0.0 {
                c += 1;
            }
            for i in 1..n {
                let q_prev = if q == 0.0 { 1e-300 } else { q };
                q = diag[i] - x - off[i - 1] * off[i - 1] / q_prev;
                if q < 0.0 {
                    c += 1;
                }
            }
            c
        };
        (0..count)
            .map(|k| {
                let (mut lo, mut hi) = (-1.0, 1e3);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if count_below(mid) > k {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect()
    }

    #[test]
    fn neumann_eigenvalues_match_finite_differences() {
        let sys = EigenSystem::laplacian(Boundary::Neumann, PI, 2).unwrap();
        let fd = neumann_fd_eigs(PI, DEFAULT_NEUMANN_SHIFT, 2048, 2);
        // Second-order FD: error ~ h² α² / 12 ≈ 2e-7 for α = 1.
        assert!((sys.alphas()[0] - fd[0]).abs() < 1e-6, "{:?} vs {fd:?}", sys.alphas());
        assert!((sys.alphas()[1] - fd[1]).abs() < 1e-6, "{:?} vs {fd:?}", sys.alphas());
        assert!((sys.alphas()[0] - 1.0).abs() < 1e-12);
        assert!((sys.alphas()[1] - 2.0).abs() < 1e-12);
        assert!(sys.lambda() > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(EigenSystem::laplacian(Boundary::Dirichlet, 0.0, 3).is_err());
        assert!(EigenSystem::laplacian(Boundary::Dirichlet, -1.0, 3).is_err());
        assert!(EigenSystem::laplacian(Boundary::Dirichlet, 1.0, 0).is_err());
        assert!(EigenSystem::laplacian_with_shift(Boundary::Neumann, 1.0, 2, 0.0).is_err());
        assert!(EigenSystem::from_parts(Boundary::Dirichlet, 1.0, vec![2.0, 1.0], vec![1.0, 1.0])
            .is_err());
    }

    #[test]
    fn semigroup_examples() {
        let sys = EigenSystem::from_parts(Boundary::Dirichlet, PI, vec![1.0, 4.0], vec![1.0, 1.0])
            .unwrap();
        let f = SpectralField::new(vec![1.0, 1.0]);
        let g = apply_semigroup(&f, 2f64.ln(), &sys).unwrap();
        assert!((g.coeffs()[0] - 0.5).abs() < 1e-15);
        assert!((g.coeffs()[1] - 1.0 / 16.0).abs() < 1e-15);
        assert_eq!(apply_semigroup(&f, 0.0, &sys).unwrap(), f);
        assert!(apply_semigroup(&f, -1.0, &sys).is_err());

        let e1 = SpectralField::unit(2, 1);
        let decayed = apply_semigroup(&e1, 0.3, &sys).unwrap();
        assert!((decayed.coeffs()[1] - (-4.0 * 0.3f64).exp()).abs() < 1e-15);
        assert_eq!(decayed.coeffs()[0], 0.0);
    }

    #[test]
    fn sobolev_norm_examples() {
        let sys = EigenSystem::from_parts(Boundary::Dirichlet, PI, vec![1.0, 4.0], vec![1.0, 1.0])
            .unwrap();
        let f = SpectralField::new(vec![3.0, 4.0]);
        assert!((sobolev_norm(&f, 0.0, &sys).unwrap() - 5.0).abs() < 1e-15);
        let g = SpectralField::new(vec![1.0, 1.0]);
        assert!((sobolev_norm(&g, 0.5, &sys).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        let single = EigenSystem::from_parts(Boundary::Dirichlet, PI, vec![4.0], vec![1.0]).unwrap();
        let h = SpectralField::new(vec![1.0]);
        assert!((sobolev_norm(&h, 1.0, &single).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn grid_examples() {
        let sys = dirichlet(4);
        let zero = SpectralField::zeros(4).to_grid(&sys, 16).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let col = Collocation::new(&sys, 16).unwrap();
        let vals = col.to_grid(&SpectralField::unit(4, 0));
        for (x, v) in col.points().iter().zip(&vals) {
            assert!((v - (2.0 / PI).sqrt() * x.sin()).abs() < 1e-14);
        }
        assert!(SpectralField::zeros(4).to_grid(&sys, 3).is_err());
    }

    /// Independent oracle: project by composite Simpson quadrature on a fine
    /// grid of the analytic eigenfunctions, not the collocation matrix.
    #[test]
    fn random_round_trip_against_quadrature_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for boundary in [Boundary::Dirichlet, Boundary::Neumann] {
            let sys = EigenSystem::laplacian(boundary, 2.5, 8).unwrap();
            let f = SpectralField::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            for n in [8, 13, 32] {
                let col = Collocation::new(&sys, n).unwrap();
                let back = col.from_grid(&col.to_grid(&f));
                let rel = back.distance(&f) / f.norm();
                assert!(rel < 1e-10, "{boundary:?} n={n} rel={rel}");
            }
            let fine = 4000;
            let h = sys.length() / fine as f64;
            let value = |x: f64| (0..8).map(|k| f.coeffs()[k] * sys.eigenfunction(k, x)).sum::<f64>();
            for k in 0..8 {
                let mut acc = 0.0;
                for i in 0..=fine {
                    let x = i as f64 * h;
                    let w = if i == 0 || i == fine { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * value(x) * sys.eigenfunction(k, x);
                }
                acc *= h / 3.0;
                assert!((acc - f.coeffs()[k]).abs() < 1e-9, "mode {k}: {acc} vs {}", f.coeffs()[k]);
            }
        }
    }

    #[test]
    fn covariance_kappa() {
        let sys = dirichlet(4);
        let cov = CovarianceSpec::white(4);
        assert!((cov.kappa(&sys) - (2.0 / PI).sqrt()).abs() < 1e-15);
        assert!(CovarianceSpec::new(vec![-1.0], Coupling::Independent).is_err());
    }
}
