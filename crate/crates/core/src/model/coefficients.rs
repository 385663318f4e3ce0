//! Reaction and diffusion coefficients `b_i(x, X, Y)`, `σ_i(x, X, Y)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// A scalar coefficient evaluated pointwise as `f(x, X(x), Y(x))`.
///
/// Implementations must be stateless: the simulator calls `eval` from many
/// threads at once. The declared Lipschitz constants are trusted by the
/// hypothesis checker and verified empirically by
/// [`probe_lipschitz`](crate::model::probe_lipschitz).
pub trait Coefficient: Send + Sync + fmt::Debug {
    fn eval(&self, x: f64, slow: f64, fast: f64) -> f64;

    /// Declared `L^X`.
    fn lipschitz_slow(&self) -> f64;

    /// Declared `L^Y`.
    fn lipschitz_fast(&self) -> f64;

    /// `Some` when the coefficient is `a·X + b·Y + c` with constant `a, b, c`,
    /// which lets the integrator skip collocation.
    fn affine(&self) -> Option<Affine> {
        None
    }

    /// Declared `(inf f², sup f²)` over the whole state space, if bounded.
    fn square_bounds(&self) -> Option<(f64, f64)> {
        None
    }

    fn depends_on_slow(&self) -> bool {
        self.lipschitz_slow() > 0.0
    }

    fn depends_on_fast(&self) -> bool {
        self.lipschitz_fast() > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub slow: f64,
    pub fast: f64,
    pub offset: f64,
}

impl Affine {
    pub fn constant(&self) -> Option<f64> {
        (self.slow == 0.0 && self.fast == 0.0).then_some(self.offset)
    }
}

/// Built-in coefficient families selectable from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Builtin {
    /// `value`
    Constant { value: f64 },
    /// `slow·X + fast·Y + offset`
    Linear {
        #[serde(default)]
        slow: f64,
        #[serde(default)]
        fast: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `amplitude·tanh(slow_gain·X + fast_gain·Y) + slow_linear·X + offset`
    Tanh {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        slow_gain: f64,
        #[serde(default)]
        fast_gain: f64,
        #[serde(default)]
        slow_linear: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `base + amplitude·sin(slow_gain·X + fast_gain·Y + spatial·x)`
    SineMultiplicative {
        base: f64,
        amplitude: f64,
        #[serde(default)]
        slow_gain: f64,
        #[serde(default)]
        fast_gain: f64,
        #[serde(default)]
        spatial: f64,
    },
}

fn one() -> f64 {
    1.0
}

// About three times cheaper than libm; absolute error below 1e-15.
fn tanh(z: f64) -> f64 {
    let a = z.abs();
    if a > 20.0 {
        return z.signum();
    }
    let r = 1.0 - 2.0 / ((2.0 * a).exp() + 1.0);
    r.copysign(z)
}

impl Coefficient for Builtin {
    fn eval(&self, x: f64, slow: f64, fast: f64) -> f64 {
        match *self {
            Builtin::Constant { value } => value,
            Builtin::Linear { slow: a, fast: b, offset } => a * slow + b * fast + offset,
            Builtin::Tanh { amplitude, slow_gain, fast_gain, slow_linear, offset } => {
                amplitude * tanh(slow_gain * slow + fast_gain * fast) + slow_linear * slow + offset
            }
            Builtin::SineMultiplicative { base, amplitude, slow_gain, fast_gain, spatial } => {
                base + amplitude * (slow_gain * slow + fast_gain * fast + spatial * x).sin()
            }
        }
    }

    fn lipschitz_slow(&self) -> f64 {
        match *self {
            Builtin::Constant { .. } => 0.0,
            Builtin::Linear { slow, .. } => slow.abs(),
            Builtin::Tanh { amplitude, slow_gain, slow_linear, .. } => {
                (amplitude * slow_gain).abs() + slow_linear.abs()
            }
            Builtin::SineMultiplicative { amplitude, slow_gain, .. } => (amplitude * slow_gain).abs(),
        }
    }

    fn lipschitz_fast(&self) -> f64 {
        match *self {
            Builtin::Constant { .. } => 0.0,
            Builtin::Linear { fast, .. } => fast.abs(),
            Builtin::Tanh { amplitude, fast_gain, .. } => (amplitude * fast_gain).abs(),
            Builtin::SineMultiplicative { amplitude, fast_gain, .. } => (amplitude * fast_gain).abs(),
        }
    }

    fn affine(&self) -> Option<Affine> {
        match *self {
            Builtin::Constant { value } => Some(Affine { slow: 0.0, fast: 0.0, offset: value }),
            Builtin::Linear { slow, fast, offset } => Some(Affine { slow, fast, offset }),
            Builtin::Tanh { amplitude, slow_gain, fast_gain, slow_linear, offset }
                if amplitude == 0.0 || (slow_gain == 0.0 && fast_gain == 0.0) =>
            {
                Some(Affine { slow: slow_linear, fast: 0.0, offset })
            }
            _ => None,
        }
    }

    fn square_bounds(&self) -> Option<(f64, f64)> {
        let interval = |lo: f64, hi: f64| {
            let sup = lo.abs().max(hi.abs());
            let inf = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
            (inf * inf, sup * sup)
        };
        match *self {
            Builtin::Constant { value } => Some((value * value, value * value)),
            Builtin::Linear { slow, fast, offset } if slow == 0.0 && fast == 0.0 => {
                Some((offset * offset, offset * offset))
            }
            Builtin::Tanh { amplitude, slow_linear, offset, .. } if slow_linear == 0.0 => {
                Some(interval(offset - amplitude.abs(), offset + amplitude.abs()))
            }
            Builtin::SineMultiplicative { base, amplitude, .. } => {
                Some(interval(base - amplitude.abs(), base + amplitude.abs()))
            }
            _ => None,
        }
    }
}

/// Wraps a closure with declared constants, for models outside the registry.
pub struct FnCoefficient<F> {
    f: F,
    lipschitz_slow: f64,
    lipschitz_fast: f64,
    name: &'static str,
}

impl<F> FnCoefficient<F>
where
    F: Fn(f64, f64, f64) -> f64 + Send + Sync,
{
    pub fn new(name: &'static str, lipschitz_slow: f64, lipschitz_fast: f64, f: F) -> Self {
        Self { f, lipschitz_slow, lipschitz_fast, name }
    }
}

impl<F> fmt::Debug for FnCoefficient<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnCoefficient")
            .field("name", &self.name)
            .field("lipschitz_slow", &self.lipschitz_slow)
            .field("lipschitz_fast", &self.lipschitz_fast)
            .finish()
    }
}

impl<F> Coefficient for FnCoefficient<F>
where
    F: Fn(f64, f64, f64) -> f64 + Send + Sync,
{
    fn eval(&self, x: f64, slow: f64, fast: f64) -> f64 {
        (self.f)(x, slow, fast)
    }

    fn lipschitz_slow(&self) -> f64 {
        self.lipschitz_slow
    }

    fn lipschitz_fast(&self) -> f64 {
        self.lipschitz_fast
    }
}

/// Constants that only enter the standing hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    /// `C` in `|b₁| + |σ₁| ≤ C(1 + |X| + |Y|^ζ)`.
    pub growth_c: f64,
    /// `ζ` in the same bound.
    pub growth_zeta: f64,
    /// `(c₀, c₁)` with `c₀ ≤ σ₁² ≤ c₁`, needed by the one-dimensional rate path.
    pub sigma1_bounds: Option<(f64, f64)>,
    /// `c` in `|σ₂(x, X, Y)| ≤ c(1 + |X|)`.
    pub sigma2_bound: f64,
}

impl Default for GrowthConstants {
    fn default() -> Self {
        Self { growth_c: 1.0, growth_zeta: 0.0, sigma1_bounds: None, sigma2_bound: 1.0 }
    }
}

/// The four coefficients of the slow-fast system with their constants.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub b1: Arc<dyn Coefficient>,
    pub b2: Arc<dyn Coefficient>,
    pub sigma1: Arc<dyn Coefficient>,
    pub sigma2: Arc<dyn Coefficient>,
    pub constants: GrowthConstants,
}

impl CoefficientSet {
    pub fn new(
        b1: impl Coefficient + 'static,
        b2: impl Coefficient + 'static,
        sigma1: impl Coefficient + 'static,
        sigma2: impl Coefficient + 'static,
    ) -> Self {
        let mut set = Self {
            b1: Arc::new(b1),
            b2: Arc::new(b2),
            sigma1: Arc::new(sigma1),
            sigma2: Arc::new(sigma2),
            constants: GrowthConstants::default(),
        };
        set.constants.sigma1_bounds = set.sigma1.square_bounds();
        if let Some((_, hi)) = set.sigma2.square_bounds() {
            set.constants.sigma2_bound = hi.sqrt().max(f64::MIN_POSITIVE);
        }
        set.constants.growth_c = set.default_growth_c();
        set
    }

    pub fn with_constants(mut self, constants: GrowthConstants) -> Self {
        self.constants = constants;
        self
    }

    /// `(c₀, c₁)` for `σ₁²`: declared, else derived from the coefficient.
    pub fn sigma1_bounds(&self) -> Option<(f64, f64)> {
        self.constants.sigma1_bounds.or_else(|| self.sigma1.square_bounds())
    }

    /// Slow equation independent of the fast variable.
    pub fn slow_decoupled(&self) -> bool {
        !self.b1.depends_on_fast() && !self.sigma1.depends_on_fast()
    }

    // Conservative C from Lipschitz constants and the values at the origin.
    fn default_growth_c(&self) -> f64 {
        let at_origin = (self.b1.eval(0.0, 0.0, 0.0).abs() + self.sigma1.eval(0.0, 0.0, 0.0).abs())
            .max(self.sigma1.square_bounds().map_or(0.0, |(_, hi)| hi.sqrt()));
        let lx = self.b1.lipschitz_slow() + self.sigma1.lipschitz_slow();
        let ly = self.b1.lipschitz_fast() + self.sigma1.lipschitz_fast();
        (at_origin + lx + ly).max(1.0) + 2.0 * self.b1.square_bounds().map_or(0.0, |(_, hi)| hi.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_evaluation_and_constants() {
        let lin = Builtin::Linear { slow: 2.0, fast: -0.5, offset: 1.0 };
        assert_eq!(lin.eval(0.3, 1.0, 2.0), 2.0);
        assert_eq!(lin.lipschitz_slow(), 2.0);
        assert_eq!(lin.lipschitz_fast(), 0.5);
        assert!(lin.affine().is_some());

        let th = Builtin::Tanh { amplitude: 1.0, slow_gain: 0.0, fast_gain: 1.0, slow_linear: 0.0, offset: 0.0 };
        assert!((th.eval(0.0, 5.0, 0.5) - 0.5f64.tanh()).abs() < 1e-15);
        assert_eq!(th.lipschitz_fast(), 1.0);
        assert!(!th.depends_on_slow());
        assert_eq!(th.square_bounds(), Some((0.0, 1.0)));

        for z in [-30.0, -3.0, -0.2, -1e-9, 0.0, 1e-12, 0.7, 19.9, 25.0] {
            assert!((tanh(z) - f64::tanh(z)).abs() < 1e-15, "{z}");
        }

        let s = Builtin::SineMultiplicative { base: 1.0, amplitude: 0.5, slow_gain: 0.0, fast_gain: 1.0, spatial: 0.0 };
        assert_eq!(s.square_bounds(), Some((0.25, 2.25)));
    }

    #[test]
    fn parses_from_toml() {
        let b: Builtin = toml::from_str("kind = \"tanh\"\nfast_gain = 1.0").unwrap();
        assert_eq!(b, Builtin::Tanh { amplitude: 1.0, slow_gain: 0.0, fast_gain: 1.0, slow_linear: 0.0, offset: 0.0 });
        let c: Builtin = toml::from_str("kind = \"constant\"\nvalue = 2.0").unwrap();
        assert_eq!(c, Builtin::Constant { value: 2.0 });
    }
}
