//! Discretized weighted Hilbert space of real-valued curves on `[0, T0]`.
//!
//! Curves are nodal samples on a shared quadrature grid. The weighted inner
//! product `<u, v> = integral of u*v*w over [0, T0]` is evaluated with the
//! grid's quadrature weights, and the norm is `sqrt(<v, v>)` so that it is a
//! genuine Hilbert norm compatible with the inner product. The curve calculus
//! needed by the no-arbitrage drift (`d/dx` and the running integral from 0)
//! lives here as well.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Quadrature rule used to build a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuadRule {
    /// Uniform nodes, trapezoid weights. Second-order, positive, composable
    /// with the cumulative integral.
    TrapezoidUniform,
    /// Composite 4-point Gauss–Lobatto panels. Gaussian accuracy (degree-5
    /// exactness per panel) while keeping both interval endpoints as nodes,
    /// which the grid contract requires; plain Gauss–Legendre nodes exclude
    /// the endpoints.
    CompositeGauss4,
}

impl QuadRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trapezoid-uniform" => Ok(QuadRule::TrapezoidUniform),
            "composite-gauss-4" => Ok(QuadRule::CompositeGauss4),
            other => Err(Error::invalid(format!(
                "unknown quadrature rule `{other}` (expected trapezoid-uniform or composite-gauss-4)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QuadRule::TrapezoidUniform => "trapezoid-uniform",
            QuadRule::CompositeGauss4 => "composite-gauss-4",
        }
    }
}

/// Quadrature grid on `[0, t_max]`: strictly increasing nodes containing both
/// endpoints, with positive weights that integrate constants exactly.
#[derive(Debug, PartialEq)]
pub struct Grid<T> {
    t_max: T,
    nodes: Vec<T>,
    quad_weights: Vec<T>,
    rule: QuadRule,
}

impl<T: Scalar> Grid<T> {
    /// Builds a grid with `p` requested nodes. For the composite Gauss rule
    /// the node count is rounded up to the nearest `3k + 1` so panels tile
    /// the interval.
    pub fn new(t_max: T, p: usize, rule: QuadRule) -> Result<Arc<Self>> {
        if t_max <= T::zero() || !t_max.is_finite() {
            return Err(Error::invalid("grid horizon t_max must be positive"));
        }
        if p < 4 {
            return Err(Error::invalid("grid needs at least 4 nodes"));
        }
        let (nodes, quad_weights) = match rule {
            QuadRule::TrapezoidUniform => {
                let h = t_max / T::from_usize(p - 1).unwrap();
                let nodes: Vec<T> = (0..p)
                    .map(|i| {
                        if i + 1 == p {
                            t_max
                        } else {
                            h * T::from_usize(i).unwrap()
                        }
                    })
                    .collect();
                let mut w = vec![h; p];
                w[0] = h * T::of(0.5);
                w[p - 1] = h * T::of(0.5);
                (nodes, w)
            }
            QuadRule::CompositeGauss4 => {
                let panels = (p - 1).div_ceil(3);
                let mut nodes = Vec::with_capacity(3 * panels + 1);
                let mut weights = vec![T::zero(); 3 * panels + 1];
                // 4-point Lobatto on [-1, 1]: nodes +-1, +-1/sqrt(5),
                // weights 1/6, 5/6, 5/6, 1/6.
                let r = T::of(1.0 / 5f64.sqrt());
                let w_end = T::of(1.0 / 6.0);
                let w_int = T::of(5.0 / 6.0);
                let panel_len = t_max / T::from_usize(panels).unwrap();
                nodes.push(T::zero());
                for k in 0..panels {
                    let a = panel_len * T::from_usize(k).unwrap();
                    let b = if k + 1 == panels {
                        t_max
                    } else {
                        panel_len * T::from_usize(k + 1).unwrap()
                    };
                    let half = (b - a) * T::of(0.5);
                    let mid = (a + b) * T::of(0.5);
                    let base = 3 * k;
                    weights[base] = weights[base] + w_end * half;
                    nodes.push(mid - r * half);
                    weights[base + 1] = w_int * half;
                    nodes.push(mid + r * half);
                    weights[base + 2] = w_int * half;
                    nodes.push(b);
                    weights[base + 3] = weights[base + 3] + w_end * half;
                }
                (nodes, weights)
            }
        };
        let grid = Grid {
            t_max,
            nodes,
            quad_weights,
            rule,
        };
        grid.validate()?;
        Ok(Arc::new(grid))
    }

    fn validate(&self) -> Result<()> {
        let p = self.nodes.len();
        if p != self.quad_weights.len() {
            return Err(Error::invalid("node/weight length mismatch"));
        }
        if self.nodes[0] != T::zero() || self.nodes[p - 1] != self.t_max {
            return Err(Error::invalid("grid must contain 0 and t_max as nodes"));
        }
        if !self.nodes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("grid nodes must be strictly increasing"));
        }
        if !self.quad_weights.iter().all(|w| *w > T::zero() && w.is_finite()) {
            return Err(Error::invalid("quadrature weights must be positive"));
        }
        let total: T = self.quad_weights.iter().copied().sum();
        let rel = ((total - self.t_max) / self.t_max).abs();
        // 1e-12 relative in f64; scaled by the accumulation bound for
        // narrower scalars.
        let tol = T::of(1e-12).max(T::epsilon() * T::from_usize(4 * p).unwrap());
        if rel > tol {
            return Err(Error::invalid(
                "quadrature weights must integrate constants exactly",
            ));
        }
        Ok(())
    }

    pub fn t_max(&self) -> T {
        self.t_max
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn quad_weights(&self) -> &[T] {
        &self.quad_weights
    }

    pub fn rule(&self) -> QuadRule {
        self.rule
    }

    /// Largest node spacing.
    pub fn max_spacing(&self) -> T {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(T::zero(), |m, h| if h > m { h } else { m })
    }

    /// Two grids are interchangeable when they hold identical nodes and
    /// weights; the `Arc` identity is the fast path.
    pub fn same(a: &Arc<Grid<T>>, b: &Arc<Grid<T>>) -> bool {
        Arc::ptr_eq(a, b)
            || (a.t_max == b.t_max && a.nodes == b.nodes && a.quad_weights == b.quad_weights)
    }
}

fn check_same_grid<T: Scalar>(a: &Arc<Grid<T>>, b: &Arc<Grid<T>>) -> Result<()> {
    if Grid::same(a, b) {
        Ok(())
    } else {
        Err(Error::IncompatibleGrid)
    }
}

/// Real-valued function sampled on a grid.
#[derive(Clone, Debug)]
pub struct Curve<T> {
    grid: Arc<Grid<T>>,
    values: Vec<T>,
}

impl<T: Scalar> Curve<T> {
    pub fn from_values(grid: Arc<Grid<T>>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("curve sample count must match the grid"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("curve samples must be finite"));
        }
        Ok(Curve { grid, values })
    }

    /// Samples a closed-form function onto the grid.
    pub fn from_fn(grid: &Arc<Grid<T>>, f: impl Fn(T) -> T) -> Self {
        let values = grid.nodes().iter().map(|&x| f(x)).collect();
        Curve {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn zeros(grid: &Arc<Grid<T>>) -> Self {
        Curve {
            grid: Arc::clone(grid),
            values: vec![T::zero(); grid.len()],
        }
    }

    pub fn constant(grid: &Arc<Grid<T>>, c: T) -> Self {
        Curve {
            grid: Arc::clone(grid),
            values: vec![c; grid.len()],
        }
    }

    pub fn grid(&self) -> &Arc<Grid<T>> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Pointwise `a*x + y`.
    pub fn axpy(a: T, x: &Curve<T>, y: &Curve<T>) -> Result<Curve<T>> {
        check_same_grid(&x.grid, &y.grid)?;
        let values = x
            .values
            .iter()
            .zip(&y.values)
            .map(|(&xi, &yi)| a * xi + yi)
            .collect();
        Ok(Curve {
            grid: Arc::clone(&x.grid),
            values,
        })
    }

    /// Pointwise product.
    pub fn mul(u: &Curve<T>, v: &Curve<T>) -> Result<Curve<T>> {
        check_same_grid(&u.grid, &v.grid)?;
        let values = u
            .values
            .iter()
            .zip(&v.values)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Curve {
            grid: Arc::clone(&u.grid),
            values,
        })
    }

    pub fn scale(&self, a: T) -> Curve<T> {
        Curve {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| a * v).collect(),
        }
    }

    pub fn add(&self, other: &Curve<T>) -> Result<Curve<T>> {
        Curve::axpy(T::one(), self, other)
    }

    pub fn sub(&self, other: &Curve<T>) -> Result<Curve<T>> {
        Curve::axpy(-T::one(), other, self)
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Spatial derivative: 3-point stencils, central at interior nodes and
    /// one-sided at the endpoints, all exact on quadratics (hence on affine
    /// curves) for arbitrary node spacing.
    pub fn derivative_x(&self) -> Curve<T> {
        let x = self.grid.nodes();
        let v = &self.values;
        let p = v.len();
        debug_assert!(p >= 4);
        let mut d = vec![T::zero(); p];
        for i in 1..p - 1 {
            let hl = x[i] - x[i - 1];
            let hr = x[i + 1] - x[i];
            d[i] = (hl * hl * v[i + 1] - hr * hr * v[i - 1]
                + (hr * hr - hl * hl) * v[i])
                / (hl * hr * (hl + hr));
        }
        {
            let h1 = x[1] - x[0];
            let h2 = x[2] - x[1];
            d[0] = -(T::of(2.0) * h1 + h2) / (h1 * (h1 + h2)) * v[0]
                + (h1 + h2) / (h1 * h2) * v[1]
                - h1 / (h2 * (h1 + h2)) * v[2];
        }
        {
            let h1 = x[p - 1] - x[p - 2];
            let h2 = x[p - 2] - x[p - 3];
            d[p - 1] = (T::of(2.0) * h1 + h2) / (h1 * (h1 + h2)) * v[p - 1]
                - (h1 + h2) / (h1 * h2) * v[p - 2]
                + h1 / (h2 * (h1 + h2)) * v[p - 3];
        }
        Curve {
            grid: Arc::clone(&self.grid),
            values: d,
        }
    }

    /// Running integral from 0, cumulative trapezoid on the node intervals.
    /// The first sample is exactly 0.
    pub fn antiderivative(&self) -> Curve<T> {
        let x = self.grid.nodes();
        let v = &self.values;
        let mut out = vec![T::zero(); v.len()];
        let half = T::of(0.5);
        for i in 1..v.len() {
            out[i] = out[i - 1] + (v[i - 1] + v[i]) * half * (x[i] - x[i - 1]);
        }
        Curve {
            grid: Arc::clone(&self.grid),
            values: out,
        }
    }
}

/// Positive bounded weight entering the inner product.
#[derive(Clone, Debug)]
pub struct WeightFunction<T> {
    grid: Arc<Grid<T>>,
    values: Vec<T>,
    kind: WeightKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Constant,
    ExpIncreasing,
    ExpDecreasing,
    Custom,
}

impl<T: Scalar> WeightFunction<T> {
    /// Unit weight: the plain `L^2` product on the grid.
    pub fn constant(grid: &Arc<Grid<T>>) -> Self {
        WeightFunction {
            grid: Arc::clone(grid),
            values: vec![T::one(); grid.len()],
            kind: WeightKind::Constant,
        }
    }

    /// `exp(+gamma x)` — emphasizes the long end.
    pub fn exp_increasing(grid: &Arc<Grid<T>>, gamma: T) -> Result<Self> {
        Self::exponential(grid, gamma, WeightKind::ExpIncreasing)
    }

    /// `exp(-gamma x)` — emphasizes the short end.
    pub fn exp_decreasing(grid: &Arc<Grid<T>>, gamma: T) -> Result<Self> {
        Self::exponential(grid, -gamma, WeightKind::ExpDecreasing)
    }

    fn exponential(grid: &Arc<Grid<T>>, rate: T, kind: WeightKind) -> Result<Self> {
        if rate.abs() <= T::zero() || !rate.is_finite() {
            return Err(Error::invalid("weight decay gamma must be positive"));
        }
        let values: Vec<T> = grid.nodes().iter().map(|&x| (rate * x).exp()).collect();
        if !values.iter().all(|v| *v > T::zero() && v.is_finite()) {
            return Err(Error::invalid(
                "exponential weight overflows or underflows on this grid",
            ));
        }
        Ok(WeightFunction {
            grid: Arc::clone(grid),
            values,
            kind,
        })
    }

    pub fn custom(grid: &Arc<Grid<T>>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("weight sample count must match the grid"));
        }
        if !values.iter().all(|v| *v > T::zero() && v.is_finite()) {
            return Err(Error::invalid("weight must be positive and bounded"));
        }
        Ok(WeightFunction {
            grid: Arc::clone(grid),
            values,
            kind: WeightKind::Custom,
        })
    }

    pub fn grid(&self) -> &Arc<Grid<T>> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }
}

/// Weighted inner product `integral of u*v*w`, by the grid quadrature.
/// Summation runs in ascending node order, so the result is symmetric in
/// `u, v` down to the last bit.
pub fn inner_product<T: Scalar>(
    u: &Curve<T>,
    v: &Curve<T>,
    w: &WeightFunction<T>,
) -> Result<T> {
    check_same_grid(u.grid(), v.grid())?;
    check_same_grid(u.grid(), w.grid())?;
    let qw = u.grid().quad_weights();
    let mut acc = T::zero();
    // (u*v) first: IEEE multiplication commutes bitwise, so swapping u and v
    // reproduces identical floats term by term.
    for i in 0..qw.len() {
        acc = acc + (u.values[i] * v.values[i]) * (qw[i] * w.values[i]);
    }
    Ok(acc)
}

/// Hilbert norm `sqrt(<v, v>)`.
pub fn norm_h<T: Scalar>(v: &Curve<T>, w: &WeightFunction<T>) -> Result<T> {
    Ok(inner_product(v, v, w)?.sqrt())
}

/// Unweighted grid norm, used internally to scale finite-difference steps.
pub fn grid_norm<T: Scalar>(v: &Curve<T>) -> T {
    let qw = v.grid().quad_weights();
    let mut acc = T::zero();
    for i in 0..qw.len() {
        acc = acc + qw[i] * v.values[i] * v.values[i];
    }
    acc.sqrt()
}
