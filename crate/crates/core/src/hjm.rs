//! The infinite-dimensional side: factor volatility fields, the no-arbitrage
//! drift, the Stratonovich correction via directional derivatives, and an
//! explicit Euler simulator of the curve dynamics used as a test oracle.
//!
//! The drift in time-to-maturity coordinates is
//!
//! ```text
//! mu~(r, x) = dr/dx + sum_i sigma_i(r, x) * integral_0^x sigma_i(r, u) du
//! ```
//!
//! and the Stratonovich form subtracts `(1/2) sum_i sigma_i'_r(r)[sigma_i(r)]`.
//! Time stepping is explicit Euler, method of lines in `x` with one-sided
//! stencils at the right boundary; no artificial boundary condition is
//! imposed, so transport comparisons restrict to `[0, T0 - t]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::function_space::{grid_norm, Curve};
use crate::noise::NoiseStream;
use crate::scalar::Scalar;

pub type SigmaFn<T> = Arc<dyn Fn(&Curve<T>) -> Curve<T> + Send + Sync>;
pub type FrechetFn<T> = Arc<dyn Fn(&Curve<T>, &Curve<T>) -> Curve<T> + Send + Sync>;

/// One factor of the volatility field.
pub enum FactorVol<T> {
    /// `sigma0`, independent of the curve and of maturity.
    Constant { sigma0: T },
    /// `sigma0 * exp(-decay x)`, independent of the curve.
    ExpDecay { sigma0: T, decay: T },
    /// `sigma0 * r(x)`: level-proportional.
    Proportional { sigma0: T },
    /// `sigma0 * r(x) * exp(-decay x)`.
    ProportionalExp { sigma0: T, decay: T },
    /// User-supplied field with optional analytic directional derivative.
    Custom {
        sigma: SigmaFn<T>,
        frechet: Option<FrechetFn<T>>,
        r_independent: bool,
    },
}

impl<T: Clone> Clone for FactorVol<T> {
    fn clone(&self) -> Self {
        match self {
            FactorVol::Constant { sigma0 } => FactorVol::Constant {
                sigma0: sigma0.clone(),
            },
            FactorVol::ExpDecay { sigma0, decay } => FactorVol::ExpDecay {
                sigma0: sigma0.clone(),
                decay: decay.clone(),
            },
            FactorVol::Proportional { sigma0 } => FactorVol::Proportional {
                sigma0: sigma0.clone(),
            },
            FactorVol::ProportionalExp { sigma0, decay } => FactorVol::ProportionalExp {
                sigma0: sigma0.clone(),
                decay: decay.clone(),
            },
            FactorVol::Custom {
                sigma,
                frechet,
                r_independent,
            } => FactorVol::Custom {
                sigma: Arc::clone(sigma),
                frechet: frechet.as_ref().map(Arc::clone),
                r_independent: *r_independent,
            },
        }
    }
}

impl<T: Scalar> FactorVol<T> {
    fn sigma(&self, r: &Curve<T>) -> Curve<T> {
        match self {
            FactorVol::Constant { sigma0 } => Curve::constant(r.grid(), *sigma0),
            FactorVol::ExpDecay { sigma0, decay } => {
                let (s, a) = (*sigma0, *decay);
                Curve::from_fn(r.grid(), |x| s * (-a * x).exp())
            }
            FactorVol::Proportional { sigma0 } => r.scale(*sigma0),
            FactorVol::ProportionalExp { sigma0, decay } => {
                let (s, a) = (*sigma0, *decay);
                let env = Curve::from_fn(r.grid(), |x| s * (-a * x).exp());
                Curve::mul(&env, r).expect("shared grid")
            }
            FactorVol::Custom { sigma, .. } => sigma(r),
        }
    }

    /// Analytic directional derivative where the field is built in.
    fn analytic_frechet(&self, r: &Curve<T>, h: &Curve<T>) -> Option<Curve<T>> {
        match self {
            FactorVol::Constant { .. } | FactorVol::ExpDecay { .. } => {
                Some(Curve::zeros(r.grid()))
            }
            FactorVol::Proportional { sigma0 } => Some(h.scale(*sigma0)),
            FactorVol::ProportionalExp { sigma0, decay } => {
                let (s, a) = (*sigma0, *decay);
                let env = Curve::from_fn(r.grid(), |x| s * (-a * x).exp());
                Some(Curve::mul(&env, h).expect("shared grid"))
            }
            FactorVol::Custom { frechet, .. } => frechet.as_ref().map(|f| f(r, h)),
        }
    }

    fn is_r_independent(&self) -> bool {
        match self {
            FactorVol::Constant { .. } | FactorVol::ExpDecay { .. } => true,
            FactorVol::Proportional { .. } | FactorVol::ProportionalExp { .. } => false,
            FactorVol::Custom { r_independent, .. } => *r_independent,
        }
    }

    fn theta_names(&self) -> Vec<&'static str> {
        match self {
            FactorVol::Constant { .. } | FactorVol::Proportional { .. } => vec!["sigma0"],
            FactorVol::ExpDecay { .. } | FactorVol::ProportionalExp { .. } => {
                vec!["sigma0", "decay"]
            }
            FactorVol::Custom { .. } => vec![],
        }
    }

    fn theta_values(&self) -> Vec<T> {
        match self {
            FactorVol::Constant { sigma0 } | FactorVol::Proportional { sigma0 } => vec![*sigma0],
            FactorVol::ExpDecay { sigma0, decay }
            | FactorVol::ProportionalExp { sigma0, decay } => vec![*sigma0, *decay],
            FactorVol::Custom { .. } => vec![],
        }
    }

    fn rebind(&self, theta: &[T]) -> FactorVol<T> {
        match self {
            FactorVol::Constant { .. } => FactorVol::Constant { sigma0: theta[0] },
            FactorVol::ExpDecay { .. } => FactorVol::ExpDecay {
                sigma0: theta[0],
                decay: theta[1],
            },
            FactorVol::Proportional { .. } => FactorVol::Proportional { sigma0: theta[0] },
            FactorVol::ProportionalExp { .. } => FactorVol::ProportionalExp {
                sigma0: theta[0],
                decay: theta[1],
            },
            FactorVol::Custom { .. } => self.clone(),
        }
    }
}

/// The `m`-factor volatility specification of a forward-curve model.
#[derive(Clone)]
pub struct VolatilitySpec<T> {
    factors: Vec<FactorVol<T>>,
}

impl<T: Scalar> std::fmt::Debug for VolatilitySpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VolatilitySpec")
            .field("m", &self.factors.len())
            .finish()
    }
}

impl<T: Scalar> VolatilitySpec<T> {
    pub fn from_factors(factors: Vec<FactorVol<T>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::invalid("volatility needs at least one factor"));
        }
        Ok(VolatilitySpec { factors })
    }

    pub fn constant(sigma0: T, m: usize) -> Result<Self> {
        Self::from_factors(vec![FactorVol::Constant { sigma0 }; m.max(1)])
    }

    pub fn exp_decay(sigma0: T, decay: T, m: usize) -> Result<Self> {
        Self::from_factors(vec![FactorVol::ExpDecay { sigma0, decay }; m.max(1)])
    }

    pub fn proportional(sigma0: T, m: usize) -> Result<Self> {
        Self::from_factors(vec![FactorVol::Proportional { sigma0 }; m.max(1)])
    }

    pub fn proportional_exp(sigma0: T, decay: T, m: usize) -> Result<Self> {
        Self::from_factors(vec![FactorVol::ProportionalExp { sigma0, decay }; m.max(1)])
    }

    pub fn m(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[FactorVol<T>] {
        &self.factors
    }

    /// `sigma_i(r, ·)` sampled on the grid of `r`.
    pub fn sigma(&self, r: &Curve<T>, i: usize) -> Curve<T> {
        self.factors[i].sigma(r)
    }

    /// True when no factor depends on the curve argument.
    pub fn is_r_independent(&self) -> bool {
        self.factors.iter().all(|f| f.is_r_independent())
    }

    /// Flat parameter labels, suffixed by factor index when `m > 1`.
    pub fn theta_names(&self) -> Vec<String> {
        let m = self.factors.len();
        let mut out = Vec::new();
        for (i, f) in self.factors.iter().enumerate() {
            for name in f.theta_names() {
                out.push(if m == 1 {
                    name.to_string()
                } else {
                    format!("{name}_{}", i + 1)
                });
            }
        }
        out
    }

    pub fn theta_values(&self) -> Vec<T> {
        self.factors.iter().flat_map(|f| f.theta_values()).collect()
    }

    /// Rebinds the catalog parameters to a new flat vector.
    pub fn with_theta(&self, theta: &[T]) -> Result<Self> {
        let expect: usize = self.factors.iter().map(|f| f.theta_names().len()).sum();
        if theta.len() != expect {
            return Err(Error::invalid(format!(
                "theta length {} does not match the {} catalog parameters",
                theta.len(),
                expect
            )));
        }
        let mut offset = 0;
        let factors = self
            .factors
            .iter()
            .map(|f| {
                let k = f.theta_names().len();
                let out = f.rebind(&theta[offset..offset + k]);
                offset += k;
                out
            })
            .collect();
        Ok(VolatilitySpec { factors })
    }
}

/// Directional derivative of factor `i` at `r` in direction `h`: analytic
/// when the factor provides one, otherwise a symmetric difference quotient.
pub fn frechet_directional<T: Scalar>(
    vol: &VolatilitySpec<T>,
    r: &Curve<T>,
    h: &Curve<T>,
    i: usize,
) -> Curve<T> {
    vol.factors[i]
        .analytic_frechet(r, h)
        .unwrap_or_else(|| frechet_directional_numeric(vol, r, h, i))
}

/// The finite-difference route, also used as an oracle against the analytic
/// one. The step is normalized by the curve magnitudes to keep cancellation
/// in check.
pub fn frechet_directional_numeric<T: Scalar>(
    vol: &VolatilitySpec<T>,
    r: &Curve<T>,
    h: &Curve<T>,
    i: usize,
) -> Curve<T> {
    if h.max_abs() == T::zero() {
        return Curve::zeros(r.grid());
    }
    let eps = T::of(1e-5) * (T::one() + grid_norm(r)) / (T::one() + grid_norm(h));
    let rp = Curve::axpy(eps, h, r).expect("shared grid");
    let rm = Curve::axpy(-eps, h, r).expect("shared grid");
    let sp = vol.sigma(&rp, i);
    let sm = vol.sigma(&rm, i);
    sp.sub(&sm)
        .expect("shared grid")
        .scale(T::one() / (T::of(2.0) * eps))
}

/// No-arbitrage drift `dr/dx + sum_i sigma_i ⊙ integral(sigma_i)`.
pub fn ito_drift<T: Scalar>(r: &Curve<T>, vol: &VolatilitySpec<T>) -> Curve<T> {
    let mut drift = r.derivative_x();
    for i in 0..vol.m() {
        let sigma = vol.sigma(r, i);
        let hjm_term = Curve::mul(&sigma, &sigma.antiderivative()).expect("shared grid");
        drift = drift.add(&hjm_term).expect("shared grid");
    }
    drift
}

/// `(1/2) sum_i sigma_i'_r(r)[sigma_i(r)]`.
pub fn strat_correction<T: Scalar>(vol: &VolatilitySpec<T>, r: &Curve<T>) -> Curve<T> {
    strat_correction_impl(vol, r, false)
}

/// Same sum evaluated through the finite-difference route only.
pub fn strat_correction_numeric<T: Scalar>(vol: &VolatilitySpec<T>, r: &Curve<T>) -> Curve<T> {
    strat_correction_impl(vol, r, true)
}

fn strat_correction_impl<T: Scalar>(
    vol: &VolatilitySpec<T>,
    r: &Curve<T>,
    force_numeric: bool,
) -> Curve<T> {
    let mut acc = Curve::zeros(r.grid());
    for i in 0..vol.m() {
        let sigma = vol.sigma(r, i);
        let term = if force_numeric {
            frechet_directional_numeric(vol, r, &sigma, i)
        } else {
            frechet_directional(vol, r, &sigma, i)
        };
        acc = acc.add(&term).expect("shared grid");
    }
    acc.scale(T::of(0.5))
}

/// Stratonovich-form drift: the no-arbitrage drift minus the correction.
pub fn strat_drift<T: Scalar>(r: &Curve<T>, vol: &VolatilitySpec<T>) -> Curve<T> {
    ito_drift(r, vol)
        .sub(&strat_correction(vol, r))
        .expect("shared grid")
}

/// Which drift enters an Euler step of the curve dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriftForm {
    /// The no-arbitrage drift of the Itô form.
    Ito,
    /// The corrected drift of the Stratonovich form.
    Stratonovich,
}

/// One explicit Euler step `r + mu dt + sum_i sigma_i dW_i` with scalar
/// increments `dw[i]`.
pub fn euler_step<T: Scalar>(
    r: &Curve<T>,
    vol: &VolatilitySpec<T>,
    dt: T,
    dw: &[T],
    form: DriftForm,
) -> Curve<T> {
    debug_assert_eq!(dw.len(), vol.m());
    let drift = match form {
        DriftForm::Ito => ito_drift(r, vol),
        DriftForm::Stratonovich => strat_drift(r, vol),
    };
    let mut next = Curve::axpy(dt, &drift, r).expect("shared grid");
    for i in 0..vol.m() {
        next = Curve::axpy(dw[i], &vol.sigma(r, i), &next).expect("shared grid");
    }
    next
}

/// A simulated grid-level path with the Gaussian increments that drove it.
#[derive(Clone, Debug)]
pub struct HjmPath<T> {
    pub times: Vec<T>,
    pub curves: Vec<Curve<T>>,
    /// `noise[k][i]` is the increment of factor `i` over step `k`.
    pub noise: Vec<Vec<T>>,
}

/// Euler simulation of the curve dynamics in Itô form, `steps` steps of
/// length `dt`, driven by the counter-based stream.
pub fn simulate_hjm<T: Scalar>(
    r0: &Curve<T>,
    vol: &VolatilitySpec<T>,
    dt: T,
    steps: usize,
    noise: &NoiseStream,
) -> Result<HjmPath<T>> {
    simulate_hjm_with(r0, vol, dt, steps, noise, DriftForm::Ito)
}

pub fn simulate_hjm_with<T: Scalar>(
    r0: &Curve<T>,
    vol: &VolatilitySpec<T>,
    dt: T,
    steps: usize,
    noise: &NoiseStream,
    form: DriftForm,
) -> Result<HjmPath<T>> {
    if dt <= T::zero() || !dt.is_finite() {
        return Err(Error::invalid("time step must be positive"));
    }
    if steps == 0 {
        return Err(Error::invalid("need at least one step"));
    }
    let m = vol.m();
    let mut curves = Vec::with_capacity(steps + 1);
    let mut increments = Vec::with_capacity(steps);
    let mut times = Vec::with_capacity(steps + 1);
    curves.push(r0.clone());
    times.push(T::zero());
    let mut r = r0.clone();
    for k in 0..steps {
        let dw = noise.increments(k as u64, m, dt);
        r = euler_step(&r, vol, dt, &dw, form);
        if !r.is_finite() {
            return Err(Error::NumericalBlowup { step: k });
        }
        times.push(dt * T::from_usize(k + 1).unwrap());
        curves.push(r.clone());
        increments.push(dw);
    }
    Ok(HjmPath {
        times,
        curves,
        noise: increments,
    })
}
