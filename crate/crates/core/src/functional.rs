//! Bounded Lipschitz test functionals on `H`.
//!
//! Cylinder functionals `g(⟨Y, e_k⟩)` are cheap to evaluate on coefficient
//! vectors and have Gaussian oracles in the linear models.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar profile `g` of a cylinder functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Profile {
    /// Identity clipped to `[-bound, bound]`.
    Clipped { bound: f64 },
    Tanh,
    /// Logistic step `1/(1 + e^{-(y - center)/width})`.
    SmoothStep { center: f64, width: f64 },
}

impl Profile {
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            Profile::Clipped { bound } => y.clamp(-bound, bound),
            Profile::Tanh => y.tanh(),
            Profile::SmoothStep { center, width } => 1.0 / (1.0 + (-(y - center) / width).exp()),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Profile::Clipped { .. } | Profile::Tanh => 1.0,
            Profile::SmoothStep { width, .. } => 0.25 / width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    Constant { value: f64 },
    /// `scale · g(⟨Y, e_mode⟩)`
    Cylinder {
        mode: usize,
        #[serde(flatten)]
        profile: Profile,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `scale · min(|Y|_H, cap)`
    ClippedNorm {
        cap: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Functional {
    pub fn cylinder(mode: usize, profile: Profile) -> Self {
        Functional::Cylinder { mode, profile, scale: 1.0 }
    }

    /// The clipped coordinate `clip(⟨Y, e_mode⟩, -10, 10)`.
    pub fn coordinate(mode: usize) -> Self {
        Self::cylinder(mode, Profile::Clipped { bound: 10.0 })
    }

    /// Cylinders on modes `0..4` with the three registry profiles.
    pub fn registry() -> Vec<Functional> {
        let mut out = Vec::with_capacity(12);
        for mode in 0..4 {
            out.push(Self::coordinate(mode));
            out.push(Self::cylinder(mode, Profile::Tanh));
            out.push(Self::cylinder(mode, Profile::SmoothStep { center: 0.0, width: 0.5 }));
        }
        out
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match *self {
            Functional::Constant { value } => value,
            Functional::Cylinder { mode, profile, scale } => scale * profile.eval(y.get(mode).copied().unwrap_or(0.0)),
            Functional::ClippedNorm { cap, scale } => scale * y.iter().map(|v| v * v).sum::<f64>().sqrt().min(cap),
        }
    }

    /// Lipschitz constant with respect to `|·|_H`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Functional::Constant { .. } => 0.0,
            Functional::Cylinder { profile, scale, .. } => scale.abs() * profile.lipschitz(),
            Functional::ClippedNorm { scale, .. } => scale.abs(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            Functional::Constant { value } => Functional::Constant { value: value * factor },
            Functional::Cylinder { mode, profile, scale } => Functional::Cylinder { mode, profile, scale: scale * factor },
            Functional::ClippedNorm { cap, scale } => Functional::ClippedNorm { cap, scale: scale * factor },
        }
    }

    /// Scalar projection `y ↦ g(y)` of a cylinder, for one-dimensional oracles.
    pub fn profile(&self) -> Option<(usize, Profile, f64)> {
        match *self {
            Functional::Cylinder { mode, profile, scale } => Some((mode, profile, scale)),
            _ => None,
        }
    }

    pub fn validate(&self, modes: usize) -> Result<()> {
        match *self {
            Functional::Cylinder { mode, .. } if mode >= modes => {
                Err(Error::Invalid(format!("functional uses mode {mode} but only {modes} are retained")))
            }
            Functional::Cylinder { profile: Profile::SmoothStep { width, .. }, .. } if !(width > 0.0) => {
                Err(Error::Invalid("smooth step width must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scale = |s: f64| if s == 1.0 { String::new() } else { format!("{s}*") };
        match *self {
            Functional::Constant { value } => write!(f, "const({value})"),
            Functional::Cylinder { mode, profile: Profile::Clipped { bound }, scale: s } => {
                write!(f, "{}clip{bound}(y{mode})", scale(s))
            }
            Functional::Cylinder { mode, profile: Profile::Tanh, scale: s } => write!(f, "{}tanh(y{mode})", scale(s)),
            Functional::Cylinder { mode, profile: Profile::SmoothStep { center, width }, scale: s } => {
                write!(f, "{}step{center}/{width}(y{mode})", scale(s))
            }
            Functional::ClippedNorm { cap, scale: s } => write!(f, "{}min(|y|,{cap})", scale(s)),
        }
    }
}
