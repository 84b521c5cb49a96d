//! Parametrized curve families, their tangent bases and the weighted
//! orthogonal projection onto the tangent space.
//!
//! A family is the map `z -> G(z, ·)` for coordinates `z` in an admissible
//! box. The projection of a curve `v` onto the tangent space at `z` solves
//! the Gram system `Lambda c = <v, dG/dz_j>` by Cholesky; the inverse Gram
//! matrix is never materialized.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::function_space::{grid_norm, inner_product, norm_h, Curve, Grid, WeightFunction};
use crate::linalg::{self, Mat};
use crate::scalar::Scalar;

/// Gram condition estimate above which the tangent basis is treated as
/// violating the linear-independence assumption.
pub const GRAM_COND_LIMIT: f64 = 1e12;

/// Relative step for finite-difference tangents in `z`.
fn fd_step<T: Scalar>(zk: T) -> T {
    T::of(1e-5) * (T::one() + zk.abs())
}

pub type EvalFn<T> = Arc<dyn Fn(&[T], &Arc<Grid<T>>) -> Curve<T> + Send + Sync>;
pub type TangentFn<T> = Arc<dyn Fn(&[T], usize, &Arc<Grid<T>>) -> Curve<T> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyKind {
    Affine,
    NelsonSiegel,
    ExpBasis,
    Custom,
}

enum Repr<T> {
    /// `G(z) = g0 + sum_k z_k g_k`.
    Affine { g0: Curve<T>, basis: Vec<Curve<T>> },
    /// `G(z) = z1 + z2 exp(-l x) + z3 x exp(-l x)` with fixed `l`.
    NelsonSiegel { lambda: T },
    /// `G(z) = sum_k z_k exp(-a_k x)` with distinct rates.
    ExpBasis { rates: Vec<T> },
    Custom {
        eval: EvalFn<T>,
        tangent: Option<TangentFn<T>>,
        linear_in_z: bool,
    },
}

impl<T> Clone for Repr<T>
where
    Curve<T>: Clone,
    T: Clone,
{
    fn clone(&self) -> Self {
        match self {
            Repr::Affine { g0, basis } => Repr::Affine {
                g0: g0.clone(),
                basis: basis.clone(),
            },
            Repr::NelsonSiegel { lambda } => Repr::NelsonSiegel {
                lambda: lambda.clone(),
            },
            Repr::ExpBasis { rates } => Repr::ExpBasis {
                rates: rates.clone(),
            },
            Repr::Custom {
                eval,
                tangent,
                linear_in_z,
            } => Repr::Custom {
                eval: Arc::clone(eval),
                tangent: tangent.as_ref().map(Arc::clone),
                linear_in_z: *linear_in_z,
            },
        }
    }
}

/// Finite-dimensional curve family with tangent structure.
#[derive(Clone)]
pub struct ManifoldFamily<T> {
    n: usize,
    kind: FamilyKind,
    z_bounds: Vec<(T, T)>,
    repr: Repr<T>,
}

impl<T: Scalar> std::fmt::Debug for ManifoldFamily<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManifoldFamily")
            .field("n", &self.n)
            .field("kind", &self.kind)
            .finish()
    }
}

fn unbounded<T: Scalar>(n: usize) -> Vec<(T, T)> {
    vec![(T::neg_infinity(), T::infinity()); n]
}

impl<T: Scalar> ManifoldFamily<T> {
    /// Affine family `g0 + sum z_k g_k`. The basis must be linearly
    /// independent under the plain grid product.
    pub fn affine(g0: Curve<T>, basis: Vec<Curve<T>>) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::invalid("affine family needs a nonempty basis"));
        }
        for b in &basis {
            if !Grid::same(g0.grid(), b.grid()) {
                return Err(Error::IncompatibleGrid);
            }
        }
        let w = WeightFunction::constant(g0.grid());
        GramMatrix::new(&basis, &w)?; // degenerate-basis check
        let n = basis.len();
        Ok(ManifoldFamily {
            n,
            kind: FamilyKind::Affine,
            z_bounds: unbounded(n),
            repr: Repr::Affine { g0, basis },
        })
    }

    /// Level / slope / curvature family with a fixed decay hyperparameter.
    pub fn nelson_siegel(lambda: T) -> Result<Self> {
        if lambda <= T::zero() || !lambda.is_finite() {
            return Err(Error::invalid("nelson-siegel lambda must be positive"));
        }
        Ok(ManifoldFamily {
            n: 3,
            kind: FamilyKind::NelsonSiegel,
            z_bounds: unbounded(3),
            repr: Repr::NelsonSiegel { lambda },
        })
    }

    /// Span of `exp(-a_k x)` for distinct positive rates.
    pub fn exp_basis(rates: Vec<T>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("exp basis needs at least one rate"));
        }
        if !rates.iter().all(|a| *a > T::zero() && a.is_finite()) {
            return Err(Error::invalid("exp basis rates must be positive"));
        }
        for i in 0..rates.len() {
            for j in (i + 1)..rates.len() {
                if rates[i] == rates[j] {
                    return Err(Error::invalid("exp basis rates must be distinct"));
                }
            }
        }
        let n = rates.len();
        Ok(ManifoldFamily {
            n,
            kind: FamilyKind::ExpBasis,
            z_bounds: unbounded(n),
            repr: Repr::ExpBasis { rates },
        })
    }

    /// User-supplied family. `tangent = None` falls back to central finite
    /// differences in `z`. `linear_in_z` declares that `G` is affine in `z`
    /// with coordinate-independent tangents.
    pub fn custom(
        n: usize,
        eval: EvalFn<T>,
        tangent: Option<TangentFn<T>>,
        linear_in_z: bool,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("family dimension must be positive"));
        }
        Ok(ManifoldFamily {
            n,
            kind: FamilyKind::Custom,
            z_bounds: unbounded(n),
            repr: Repr::Custom {
                eval,
                tangent,
                linear_in_z,
            },
        })
    }

    /// Restricts the admissible coordinate box.
    pub fn with_bounds(mut self, bounds: Vec<(T, T)>) -> Result<Self> {
        if bounds.len() != self.n {
            return Err(Error::invalid("bounds length must match dimension"));
        }
        if !bounds.iter().all(|(l, u)| l < u) {
            return Err(Error::invalid("each bound must satisfy lower < upper"));
        }
        self.z_bounds = bounds;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn z_bounds(&self) -> &[(T, T)] {
        &self.z_bounds
    }

    /// True when tangents are coordinate-independent and
    /// `G(z + d) - G(z) = sum d_k dG/dz_k` holds exactly.
    pub fn is_linear_in_z(&self) -> bool {
        match &self.repr {
            Repr::Affine { .. } | Repr::NelsonSiegel { .. } | Repr::ExpBasis { .. } => true,
            Repr::Custom { linear_in_z, .. } => *linear_in_z,
        }
    }

    pub fn contains(&self, z: &[T]) -> bool {
        z.len() == self.n
            && z.iter()
                .zip(&self.z_bounds)
                .all(|(zi, (l, u))| *zi >= *l && *zi <= *u && zi.is_finite())
    }

    pub fn check_in_domain(&self, z: &[T]) -> Result<()> {
        if self.contains(z) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { step: None })
        }
    }

    /// Evaluates `G(z, ·)` on the grid.
    pub fn eval(&self, z: &[T], grid: &Arc<Grid<T>>) -> Result<Curve<T>> {
        self.check_in_domain(z)?;
        Ok(self.eval_unchecked(z, grid))
    }

    /// Evaluation without the domain check; finite-difference probes use it.
    pub(crate) fn eval_unchecked(&self, z: &[T], grid: &Arc<Grid<T>>) -> Curve<T> {
        debug_assert_eq!(z.len(), self.n);
        match &self.repr {
            Repr::Affine { g0, basis } => {
                debug_assert!(Grid::same(g0.grid(), grid));
                let mut acc = g0.clone();
                for (k, b) in basis.iter().enumerate() {
                    acc = Curve::axpy(z[k], b, &acc).expect("shared grid");
                }
                acc
            }
            Repr::NelsonSiegel { lambda } => {
                let l = *lambda;
                Curve::from_fn(grid, |x| {
                    let e = (-l * x).exp();
                    z[0] + z[1] * e + z[2] * x * e
                })
            }
            Repr::ExpBasis { rates } => Curve::from_fn(grid, |x| {
                let mut acc = T::zero();
                for (k, &a) in rates.iter().enumerate() {
                    acc = acc + z[k] * (-a * x).exp();
                }
                acc
            }),
            Repr::Custom { eval, .. } => eval(z, grid),
        }
    }

    /// `dG/dz_k` at `z`, analytic where available, otherwise a central
    /// difference with relative step `1e-5 (1 + |z_k|)`.
    pub fn tangent(&self, z: &[T], k: usize, grid: &Arc<Grid<T>>) -> Result<Curve<T>> {
        self.check_in_domain(z)?;
        if k >= self.n {
            return Err(Error::invalid("tangent index out of range"));
        }
        Ok(self.tangent_unchecked(z, k, grid))
    }

    pub(crate) fn tangent_unchecked(&self, z: &[T], k: usize, grid: &Arc<Grid<T>>) -> Curve<T> {
        match &self.repr {
            Repr::Affine { basis, .. } => basis[k].clone(),
            Repr::NelsonSiegel { lambda } => {
                let l = *lambda;
                match k {
                    0 => Curve::constant(grid, T::one()),
                    1 => Curve::from_fn(grid, |x| (-l * x).exp()),
                    _ => Curve::from_fn(grid, |x| x * (-l * x).exp()),
                }
            }
            Repr::ExpBasis { rates } => {
                let a = rates[k];
                Curve::from_fn(grid, |x| (-a * x).exp())
            }
            Repr::Custom { eval, tangent, .. } => {
                if let Some(tangent) = tangent {
                    tangent(z, k, grid)
                } else {
                    let h = fd_step(z[k]);
                    let mut zp = z.to_vec();
                    let mut zm = z.to_vec();
                    zp[k] = zp[k] + h;
                    zm[k] = zm[k] - h;
                    let up = eval(&zp, grid);
                    let um = eval(&zm, grid);
                    up.sub(&um)
                        .expect("shared grid")
                        .scale(T::one() / (T::of(2.0) * h))
                }
            }
        }
    }

    /// The full tangent basis at `z`.
    pub fn tangent_basis(&self, z: &[T], grid: &Arc<Grid<T>>) -> Result<Vec<Curve<T>>> {
        self.check_in_domain(z)?;
        Ok((0..self.n)
            .map(|k| self.tangent_unchecked(z, k, grid))
            .collect())
    }
}

/// Pairwise weighted inner products of a tangent basis, with its Cholesky
/// factor and a condition estimate.
#[derive(Clone, Debug)]
pub struct GramMatrix<T> {
    lambda: Mat<T>,
    chol: Mat<T>,
    cond_estimate: T,
}

impl<T: Scalar> GramMatrix<T> {
    pub fn new(basis: &[Curve<T>], w: &WeightFunction<T>) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::invalid("gram matrix needs a nonempty basis"));
        }
        let n = basis.len();
        let mut lambda = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = inner_product(&basis[i], &basis[j], w)?;
                lambda[(i, j)] = v;
                lambda[(j, i)] = v;
            }
        }
        let ev = linalg::sym_eigenvalues(&lambda);
        let (min_ev, max_ev) = (ev[0], ev[n - 1]);
        let cond_estimate = if min_ev <= T::zero() {
            T::infinity()
        } else {
            max_ev / min_ev
        };
        let chol = match linalg::cholesky(&lambda) {
            Some(l) if cond_estimate <= T::of(GRAM_COND_LIMIT) => l,
            _ => {
                return Err(Error::DegenerateBasis {
                    cond: cond_estimate.as_f64(),
                })
            }
        };
        Ok(GramMatrix {
            lambda,
            chol,
            cond_estimate,
        })
    }

    pub fn lambda(&self) -> &Mat<T> {
        &self.lambda
    }

    pub fn chol(&self) -> &Mat<T> {
        &self.chol
    }

    pub fn cond_estimate(&self) -> T {
        self.cond_estimate
    }

    pub fn n(&self) -> usize {
        self.lambda.rows()
    }

    /// Solves `Lambda x = b` through the Cholesky factor.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        linalg::chol_solve(&self.chol, b)
    }
}

/// Result of projecting a curve onto a tangent space.
#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub coords: Vec<T>,
    pub curve: Curve<T>,
}

/// Orthogonal projection of `v` onto the tangent space of `fam` at `z`:
/// coordinates solve the Gram system, the curve is their combination with
/// the tangent basis.
pub fn project<T: Scalar>(
    v: &Curve<T>,
    fam: &ManifoldFamily<T>,
    z: &[T],
    w: &WeightFunction<T>,
) -> Result<Projection<T>> {
    let basis = fam.tangent_basis(z, v.grid())?;
    project_onto_basis(v, &basis, w)
}

/// Projection onto an explicit basis, reused wherever the tangent curves are
/// already at hand.
pub fn project_onto_basis<T: Scalar>(
    v: &Curve<T>,
    basis: &[Curve<T>],
    w: &WeightFunction<T>,
) -> Result<Projection<T>> {
    let gram = GramMatrix::new(basis, w)?;
    let rhs: Vec<T> = basis
        .iter()
        .map(|b| inner_product(v, b, w))
        .collect::<Result<_>>()?;
    let coords = gram.solve(&rhs);
    let curve = combine(basis, &coords)?;
    Ok(Projection { coords, curve })
}

/// `sum_k c_k basis_k`.
pub fn combine<T: Scalar>(basis: &[Curve<T>], coords: &[T]) -> Result<Curve<T>> {
    if basis.len() != coords.len() {
        return Err(Error::invalid("coordinate/basis length mismatch"));
    }
    let mut acc = Curve::zeros(basis[0].grid());
    for (c, b) in coords.iter().zip(basis) {
        acc = Curve::axpy(*c, b, &acc)?;
    }
    Ok(acc)
}

/// Modified Gram–Schmidt under the weighted inner product.
pub fn orthonormalize<T: Scalar>(
    curves: &[Curve<T>],
    w: &WeightFunction<T>,
) -> Result<Vec<Curve<T>>> {
    let mut out: Vec<Curve<T>> = Vec::with_capacity(curves.len());
    for c in curves {
        let mut v = c.clone();
        for q in &out {
            let coeff = inner_product(&v, q, w)?;
            v = Curve::axpy(-coeff, q, &v)?;
        }
        let n = norm_h(&v, w)?;
        if n <= T::of(1e-12) * (T::one() + grid_norm(c)) {
            return Err(Error::DegenerateBasis {
                cond: f64::INFINITY,
            });
        }
        out.push(v.scale(T::one() / n));
    }
    Ok(out)
}

/// Options for the nonlinear least-squares fit.
#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iters: usize,
    pub step_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 200,
            step_tol: 1e-10,
        }
    }
}

/// Weighted least-squares fit of `target` by the family: the minimizer of
/// `|| target - G(z) ||_H`.
///
/// Linear-in-z families solve the normal equations in closed form (the
/// minimizer is unique there); otherwise Gauss–Newton with Levenberg damping
/// runs from `z_init`, converging when the step norm drops below `step_tol`.
pub fn fit_curve<T: Scalar>(
    target: &Curve<T>,
    fam: &ManifoldFamily<T>,
    z_init: &[T],
    w: &WeightFunction<T>,
) -> Result<Vec<T>> {
    fit_curve_with(target, fam, z_init, w, FitOptions::default())
}

pub fn fit_curve_with<T: Scalar>(
    target: &Curve<T>,
    fam: &ManifoldFamily<T>,
    z_init: &[T],
    w: &WeightFunction<T>,
    opts: FitOptions,
) -> Result<Vec<T>> {
    fam.check_in_domain(z_init)?;
    let grid = target.grid();

    if fam.is_linear_in_z() {
        // G(z) = G(0) + sum z_k t_k: normal equations, solved once.
        let basis = fam.tangent_basis(z_init, grid)?;
        let origin = fam.eval_unchecked(&vec![T::zero(); fam.n()], grid);
        let shifted = target.sub(&origin)?;
        let proj = project_onto_basis(&shifted, &basis, w)?;
        return Ok(proj.coords);
    }

    let mut z = z_init.to_vec();
    let mut residual = target.sub(&fam.eval_unchecked(&z, grid))?;
    let mut res_norm = norm_h(&residual, w)?;
    let mut mu = T::of(1e-3);
    let step_tol = T::of(opts.step_tol);

    for _ in 0..opts.max_iters {
        let basis: Vec<Curve<T>> = (0..fam.n())
            .map(|k| fam.tangent_unchecked(&z, k, grid))
            .collect();
        let gram = GramMatrix::new(&basis, w)?;
        let rhs: Vec<T> = basis
            .iter()
            .map(|b| inner_product(&residual, b, w))
            .collect::<Result<_>>()?;

        // Levenberg: damp the normal matrix until the step reduces the
        // residual.
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = gram.lambda().clone();
            for i in 0..fam.n() {
                damped[(i, i)] = damped[(i, i)] * (T::one() + mu);
            }
            let Some(l) = linalg::cholesky(&damped) else {
                mu = mu * T::of(4.0);
                continue;
            };
            let step = linalg::chol_solve(&l, &rhs);
            let mut z_try: Vec<T> = z.iter().zip(&step).map(|(&zi, &si)| zi + si).collect();
            clamp_into(&mut z_try, fam.z_bounds());
            let res_try = target.sub(&fam.eval_unchecked(&z_try, grid))?;
            let norm_try = norm_h(&res_try, w)?;
            if norm_try <= res_norm && res_try.is_finite() {
                let step_norm = linalg::vec_norm(&step);
                z = z_try;
                residual = res_try;
                res_norm = norm_try;
                mu = (mu * T::of(0.25)).max(T::of(1e-12));
                accepted = true;
                if step_norm < step_tol {
                    return Ok(z);
                }
                break;
            }
            mu = mu * T::of(4.0);
        }
        if !accepted {
            // Damping saturated: the iterate is already a local minimum to
            // working precision.
            return Ok(z);
        }
    }

    Err(Error::FitFailed {
        iters: opts.max_iters,
        best: z.iter().map(|v| v.as_f64()).collect(),
        residual_norm: res_norm.as_f64(),
    })
}

fn clamp_into<T: Scalar>(z: &mut [T], bounds: &[(T, T)]) {
    for (zi, (l, u)) in z.iter_mut().zip(bounds) {
        if *zi < *l {
            *zi = *l;
        }
        if *zi > *u {
            *zi = *u;
        }
    }
}
