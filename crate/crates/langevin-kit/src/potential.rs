//! Potentials and drift fields.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_positive, Error, Result};

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum()
}

/// A smooth potential with `U(0) = 0` and `grad U(0) = 0`.
pub trait Potential: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Lipschitz constant of the gradient.
    fn gradient_lipschitz(&self) -> f64;
}

/// `U(x) = c |x|^2 / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadratic {
    pub curvature: f64,
}

impl Potential for Quadratic {
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * self.curvature * norm_sq(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.curvature * xi;
        }
    }

    fn gradient_lipschitz(&self) -> f64 {
        self.curvature
    }
}

/// Double-well-like potential with globally Lipschitz gradient:
/// `U(x) = a/4 (r^2 - 1 + 1/(1 + r^2)) + c r^2 / 2`, `r = |x|`.
///
/// The quartic part flattens to quadratic growth far out, so the gradient stays
/// Lipschitz with constant `5a/8 + c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuarticWell {
    pub quartic: f64,
    pub quadratic: f64,
}

impl Potential for QuarticWell {
    fn value(&self, x: &[f64]) -> f64 {
        let r2 = norm_sq(x);
        // r^2 - 1 + 1/(1+r^2) = r^4 / (1 + r^2)
        0.25 * self.quartic * r2 * r2 / (1.0 + r2) + 0.5 * self.quadratic * r2
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let r2 = norm_sq(x);
        let s = 1.0 + r2;
        // 1 - 1/s^2 = r2 (2 + r2) / s^2
        let radial = 0.5 * self.quartic * r2 * (2.0 + r2) / (s * s) + self.quadratic;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = radial * xi;
        }
    }

    fn gradient_lipschitz(&self) -> f64 {
        0.625 * self.quartic + self.quadratic
    }
}

/// Radial potential whose gradient vanishes beyond `2 * radius`.
///
/// Quadratic inside `radius`, then the radial slope decreases linearly to zero.
/// Far out `<grad U(x), x> = 0`, so confinement by the potential is lost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatTail {
    pub radius: f64,
}

impl FlatTail {
    fn radial_slope(&self, r: f64) -> f64 {
        let big_r = self.radius;
        if r <= big_r {
            r
        } else if r < 2.0 * big_r {
            2.0 * big_r - r
        } else {
            0.0
        }
    }
}

impl Potential for FlatTail {
    fn value(&self, x: &[f64]) -> f64 {
        let r = norm_sq(x).sqrt();
        let big_r = self.radius;
        if r <= big_r {
            0.5 * r * r
        } else if r < 2.0 * big_r {
            0.5 * big_r * big_r + 2.0 * big_r * (r - big_r) - 0.5 * (r * r - big_r * big_r)
        } else {
            big_r * big_r
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let r = norm_sq(x).sqrt();
        let scale = if r > 0.0 { self.radial_slope(r) / r } else { 1.0 };
        for (o, xi) in out.iter_mut().zip(x) {
            *o = scale * xi;
        }
    }

    fn gradient_lipschitz(&self) -> f64 {
        1.0
    }
}

/// Serializable description of the built-in potentials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialSpec {
    Quadratic {
        #[serde(default = "one")]
        curvature: f64,
    },
    QuarticWell {
        #[serde(default = "one")]
        quartic: f64,
        #[serde(default = "one")]
        quadratic: f64,
    },
    FlatTailCounterexample {
        #[serde(default = "one")]
        radius: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PotentialSpec::Quadratic { curvature } => ensure_positive("potential.curvature", curvature),
            PotentialSpec::QuarticWell { quartic, quadratic } => {
                ensure(quartic.is_finite() && quartic >= 0.0, || {
                    format!("potential.quartic must be nonnegative, got {quartic}")
                })?;
                ensure_positive("potential.quadratic", quadratic)
            }
            PotentialSpec::FlatTailCounterexample { radius } => ensure_positive("potential.radius", radius),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Potential>> {
        self.validate()?;
        Ok(match *self {
            PotentialSpec::Quadratic { curvature } => Arc::new(Quadratic { curvature }),
            PotentialSpec::QuarticWell { quartic, quadratic } => Arc::new(QuarticWell { quartic, quadratic }),
            PotentialSpec::FlatTailCounterexample { radius } => Arc::new(FlatTail { radius }),
        })
    }
}

pub type DriftField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// The drift `b` of the dynamics, optionally tied to a potential.
#[derive(Clone)]
pub struct ForceModel {
    drift: DriftField,
    lipschitz: f64,
    potential: Option<Arc<dyn Potential>>,
}

impl fmt::Debug for ForceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForceModel")
            .field("lipschitz", &self.lipschitz)
            .field("potential", &self.potential)
            .finish_non_exhaustive()
    }
}

impl ForceModel {
    /// Gradient force `b = -grad U`.
    pub fn from_potential(potential: Arc<dyn Potential>) -> Self {
        let lipschitz = potential.gradient_lipschitz();
        let pot = Arc::clone(&potential);
        let drift: DriftField = Arc::new(move |x: &[f64], out: &mut [f64]| {
            pot.gradient(x, out);
            for o in out.iter_mut() {
                *o = -*o;
            }
        });
        Self { drift, lipschitz, potential: Some(potential) }
    }

    pub fn custom(drift: DriftField, lipschitz: f64) -> Self {
        Self { drift, lipschitz, potential: None }
    }

    /// Linear drift `b(x) = -c x`.
    pub fn linear(curvature: f64) -> Self {
        Self::from_potential(Arc::new(Quadratic { curvature }))
    }

    pub fn zero() -> Self {
        let drift: DriftField = Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0));
        Self { drift, lipschitz: 0.0, potential: None }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn potential(&self) -> Option<&Arc<dyn Potential>> {
        self.potential.as_ref()
    }

    pub fn require_potential(&self) -> Result<&Arc<dyn Potential>> {
        self.potential
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("force model carries no potential".into()))
    }

    /// Checks the normalization and sign conditions of the potential on sample points,
    /// and that `b = -grad U` there.
    pub fn check_potential(&self, samples: &[Vec<f64>]) -> Result<()> {
        let pot = self.require_potential()?;
        let d = samples.first().map_or(1, Vec::len);
        let origin = vec![0.0; d];
        let mut grad = vec![0.0; d];
        pot.gradient(&origin, &mut grad);
        ensure(pot.value(&origin) == 0.0 && grad.iter().all(|g| *g == 0.0), || {
            "potential must vanish with zero gradient at the origin".into()
        })?;
        let mut b = vec![0.0; d];
        for x in samples {
            ensure(pot.value(x) >= 0.0, || format!("potential negative at {x:?}"))?;
            pot.gradient(x, &mut grad);
            self.eval(x, &mut b);
            for (bi, gi) in b.iter().zip(&grad) {
                ensure((bi + gi).abs() <= 1e-12 * gi.abs().max(1e-300), || {
                    format!("drift is not minus the gradient at {x:?}")
                })?;
            }
        }
        Ok(())
    }
}
