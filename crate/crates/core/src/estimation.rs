//! GMM calibration of volatility parameters from coordinate time series.
//!
//! The discrete-time model `z_{k+1} - z_k = (A + corr)(z_k; theta) D + B eps_k`
//! yields mean-zero moment functions
//!
//! ```text
//! h_k(theta) = z_{k+1} - z_k - (A(z_k; theta) + corr(z_k; theta)) D
//! ```
//!
//! whose sample average is driven to zero, first in the Euclidean norm
//! (least squares), then in the metric of an estimated long-run covariance
//! (iterated optimal GMM with a Bartlett/Newey–West estimate of `S`).
//!
//! Parameters that enter only the diffusion are weakly identified by these
//! mean-type moments; the drift carries the identifying information through
//! the no-arbitrage coupling of drift and volatility.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::function_space::{Grid, WeightFunction};
use crate::hjm::VolatilitySpec;
use crate::linalg::{self, Mat};
use crate::manifold::ManifoldFamily;
use crate::optim::{nelder_mead_bounded, NelderMeadOptions, NelderMeadResult};
use crate::projection_dynamics::{CoordSde, CoordSeries};
use crate::scalar::Scalar;

/// Default bounds for catalog parameters keyed by base name.
fn default_bounds<T: Scalar>(name: &str) -> (T, T) {
    match name {
        n if n.starts_with("sigma0") => (T::of(1e-8), T::of(10.0)),
        n if n.starts_with("decay") => (T::of(1e-8), T::of(50.0)),
        _ => (T::of(-1e6), T::of(1e6)),
    }
}

/// Rebinds a flat parameter vector into a volatility specification.
pub type ThetaBuildFn<T> = Arc<dyn Fn(&[T]) -> Result<VolatilitySpec<T>> + Send + Sync>;

/// Admissible box for the volatility parameters together with the map that
/// rebinds them into a volatility specification.
pub struct ThetaSpace<T> {
    names: Vec<String>,
    lower: Vec<T>,
    upper: Vec<T>,
    build: ThetaBuildFn<T>,
}

impl<T: Scalar> std::fmt::Debug for ThetaSpace<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThetaSpace")
            .field("names", &self.names)
            .finish()
    }
}

impl<T: Scalar> Clone for ThetaSpace<T> {
    fn clone(&self) -> Self {
        ThetaSpace {
            names: self.names.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            build: Arc::clone(&self.build),
        }
    }
}

impl<T: Scalar> ThetaSpace<T> {
    /// Derives names, default bounds and the rebinding map from a template
    /// volatility specification.
    pub fn from_template(template: &VolatilitySpec<T>) -> Result<Self> {
        let names = template.theta_names();
        if names.is_empty() {
            return Err(Error::invalid(
                "template volatility exposes no catalog parameters",
            ));
        }
        let (lower, upper) = names
            .iter()
            .map(|n| default_bounds::<T>(n))
            .unzip::<T, T, Vec<T>, Vec<T>>();
        let template = template.clone();
        Ok(ThetaSpace {
            names,
            lower,
            upper,
            build: Arc::new(move |theta| template.with_theta(theta)),
        })
    }

    pub fn with_bounds(mut self, lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.len() != self.dim() || upper.len() != self.dim() {
            return Err(Error::invalid("bound length must match theta dimension"));
        }
        if !lower.iter().zip(&upper).all(|(l, u)| l < u) {
            return Err(Error::invalid("bounds must satisfy lower < upper"));
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn contains(&self, theta: &[T]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| t.is_finite() && *t >= *l && *t <= *u)
    }

    /// Rebinds `theta` into a volatility specification, rejecting points
    /// outside the box.
    pub fn build(&self, theta: &[T]) -> Result<VolatilitySpec<T>> {
        if !self.contains(theta) {
            return Err(Error::InvalidTheta);
        }
        (self.build)(theta)
    }
}

/// Moment vectors evaluated at one parameter point.
#[derive(Clone, Debug)]
pub struct MomentSeries<T> {
    pub h: Vec<Vec<T>>,
    pub theta: Vec<T>,
}

/// Bartlett-weighted long-run covariance estimate.
#[derive(Clone, Debug)]
pub struct LongRunCov<T> {
    s: Mat<T>,
    q: usize,
}

impl<T: Scalar> LongRunCov<T> {
    /// Validates symmetry and positive semidefiniteness up to round-off.
    pub fn new(s: Mat<T>, q: usize) -> Result<Self> {
        let n = s.rows();
        if n != s.cols() || !s.is_finite() {
            return Err(Error::invalid("long-run covariance must be square and finite"));
        }
        let scale = s.max_abs() + T::of(1e-300);
        if s.asymmetry() > T::of(1e-12) * scale {
            return Err(Error::invalid("long-run covariance lost symmetry"));
        }
        let ev = linalg::sym_eigenvalues(&s);
        let trace = s.trace();
        if ev[0] < -T::of(1e-10) * trace.abs().max(T::of(1e-300)) {
            return Err(Error::invalid(
                "long-run covariance lost positive semidefiniteness",
            ));
        }
        Ok(LongRunCov { s, q })
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.s
    }

    pub fn lag(&self) -> usize {
        self.q
    }
}

/// One optimizer run inside the GMM pipeline.
#[derive(Clone, Debug)]
pub struct Estimate<T> {
    pub theta: Vec<T>,
    pub objective: T,
    pub evals: usize,
    pub converged: bool,
}

/// Record of one weighted round, for run logs.
#[derive(Clone, Debug)]
pub struct RoundRecord<T> {
    pub round: usize,
    pub theta: Vec<T>,
    pub objective: T,
    pub evals: usize,
    pub converged: bool,
}

/// Full result of the iterated optimal estimator.
#[derive(Clone, Debug)]
pub struct GmmRun<T> {
    pub theta: Vec<T>,
    pub round0: Estimate<T>,
    pub s: LongRunCov<T>,
    pub rounds_used: usize,
    pub converged: bool,
    pub trace: Vec<RoundRecord<T>>,
}

/// Lag-`nu` sample autocovariance of explicit moment vectors:
/// `(1/M) sum_{k >= nu} h_k h_{k-nu}^T`.
pub fn gamma_hat_of<T: Scalar>(h: &[Vec<T>], nu: usize) -> Result<Mat<T>> {
    let m_len = h.len();
    if m_len == 0 {
        return Err(Error::invalid("no moment vectors"));
    }
    if nu > m_len - 1 {
        return Err(Error::invalid(format!(
            "lag {nu} exceeds the {} available moments",
            m_len
        )));
    }
    let n = h[0].len();
    let mut g = Mat::zeros(n, n);
    for k in nu..m_len {
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] = g[(i, j)] + h[k][i] * h[k - nu][j];
            }
        }
    }
    let inv = T::one() / T::from_usize(m_len).unwrap();
    Ok(g.scale(inv))
}

/// Newey–West estimate from explicit moment vectors:
/// `Gamma_0 + sum_{nu=1}^q (1 - nu/(q+1)) (Gamma_nu + Gamma_nu^T)`.
pub fn newey_west_of<T: Scalar>(h: &[Vec<T>], q: usize) -> Result<LongRunCov<T>> {
    let mut s = gamma_hat_of(h, 0)?;
    // Symmetrize the lag-0 term exactly; it is symmetric up to summation
    // order already.
    s = s.add(&s.transpose()).scale(T::of(0.5));
    let qp1 = T::from_usize(q + 1).unwrap();
    for nu in 1..=q {
        let g = gamma_hat_of(h, nu)?;
        let weight = T::one() - T::from_usize(nu).unwrap() / qp1;
        s = s.add(&g.add(&g.transpose()).scale(weight));
    }
    LongRunCov::new(s, q)
}

/// Newey–West estimate of demeaned moment vectors. Away from the optimum the
/// moments have a nonzero sample mean whose outer product would otherwise
/// swamp the autocovariances and cripple the weighting; at the optimum the
/// mean is negligible and this coincides with [`newey_west_of`].
pub fn newey_west_centered_of<T: Scalar>(h: &[Vec<T>], q: usize) -> Result<LongRunCov<T>> {
    if h.is_empty() {
        return Err(Error::invalid("no moment vectors"));
    }
    let mean = mean_of(h);
    let centered: Vec<Vec<T>> = h
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(&a, &m)| a - m).collect())
        .collect();
    newey_west_of(&centered, q)
}

/// Conventional truncation-lag rule `floor(4 (M/100)^{2/9})` for `M` moments.
pub fn default_lag(moment_count: usize) -> usize {
    (4.0 * (moment_count as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// A calibration problem: the family/weight/grid the series was observed
/// through, the parameter space, and the series itself.
pub struct GmmProblem<T> {
    theta_space: ThetaSpace<T>,
    fam: ManifoldFamily<T>,
    w: WeightFunction<T>,
    grid: Arc<Grid<T>>,
    series: CoordSeries<T>,
}

impl<T: Scalar> GmmProblem<T> {
    pub fn new(
        theta_space: ThetaSpace<T>,
        fam: ManifoldFamily<T>,
        w: WeightFunction<T>,
        grid: Arc<Grid<T>>,
        series: CoordSeries<T>,
    ) -> Result<Self> {
        if series.n() != fam.n() {
            return Err(Error::invalid(format!(
                "series dimension {} does not match the family dimension {}",
                series.n(),
                fam.n()
            )));
        }
        if series.len() < 2 {
            return Err(Error::invalid("series needs at least two points"));
        }
        Ok(GmmProblem {
            theta_space,
            fam,
            w,
            grid,
            series,
        })
    }

    pub fn theta_space(&self) -> &ThetaSpace<T> {
        &self.theta_space
    }

    pub fn series(&self) -> &CoordSeries<T> {
        &self.series
    }

    /// Number of moment vectors (`series length - 1`).
    pub fn moment_count(&self) -> usize {
        self.series.len() - 1
    }

    pub fn default_lag(&self) -> usize {
        default_lag(self.moment_count())
    }

    fn sde_at(&self, theta: &[T]) -> Result<CoordSde<T>> {
        let vol = self.theta_space.build(theta)?;
        CoordSde::new(
            self.fam.clone(),
            vol,
            self.w.clone(),
            Arc::clone(&self.grid),
        )
    }

    /// Single moment vector `h_k`, `k` indexing the step from point `k` to
    /// `k + 1` (0-based, `k < moment_count()`).
    pub fn moment(&self, theta: &[T], k: usize) -> Result<Vec<T>> {
        if k >= self.moment_count() {
            return Err(Error::invalid(format!(
                "moment index {k} out of range ({} moments)",
                self.moment_count()
            )));
        }
        let sde = self.sde_at(theta)?;
        self.moment_with(&sde, k)
    }

    fn moment_with(&self, sde: &CoordSde<T>, k: usize) -> Result<Vec<T>> {
        let delta = self.series.delta();
        let z = &self.series.points()[k];
        let z_next = &self.series.points()[k + 1];
        let drift = sde.ito_drift_total(z)?;
        Ok((0..self.series.n())
            .map(|i| (z_next[i] - z[i]) - drift[i] * delta)
            .collect())
    }

    /// All moment vectors at `theta`.
    pub fn moment_series(&self, theta: &[T]) -> Result<MomentSeries<T>> {
        let sde = self.sde_at(theta)?;
        let h = (0..self.moment_count())
            .map(|k| self.moment_with(&sde, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(MomentSeries {
            h,
            theta: theta.to_vec(),
        })
    }

    /// Sample average of the moments.
    pub fn sample_average(&self, theta: &[T]) -> Result<Vec<T>> {
        let ms = self.moment_series(theta)?;
        Ok(mean_of(&ms.h))
    }

    /// Euclidean GMM objective `<f_N, f_N>`.
    pub fn ls_objective(&self, theta: &[T]) -> Result<T> {
        let f = self.sample_average(theta)?;
        Ok(linalg::dot(&f, &f))
    }

    /// Lag-`nu` autocovariance of the moments at `theta`.
    pub fn gamma_hat(&self, theta: &[T], nu: usize) -> Result<Mat<T>> {
        let ms = self.moment_series(theta)?;
        gamma_hat_of(&ms.h, nu)
    }

    /// Newey–West long-run covariance of the moments at `theta`.
    pub fn newey_west(&self, theta: &[T], q: usize) -> Result<LongRunCov<T>> {
        let ms = self.moment_series(theta)?;
        newey_west_of(&ms.h, q)
    }

    /// Centered variant used for the optimal-GMM weighting; see
    /// [`newey_west_centered_of`].
    pub fn newey_west_centered(&self, theta: &[T], q: usize) -> Result<LongRunCov<T>> {
        let ms = self.moment_series(theta)?;
        newey_west_centered_of(&ms.h, q)
    }

    /// Least-squares estimator: bounded Nelder–Mead on `<f_N, f_N>`.
    pub fn ls_estimate(&self, theta_init: &[T], opts: &NelderMeadOptions) -> Result<Estimate<T>> {
        if !self.theta_space.contains(theta_init) {
            return Err(Error::InvalidTheta);
        }
        let r = self.minimize(theta_init, None, opts);
        Ok(estimate_from(r))
    }

    /// Weighted estimator `f_N S^-1 f_N^T` for an explicit weighting matrix,
    /// factorized once up front. `SingularWeighting` when the Cholesky fails.
    pub fn weighted_estimate(
        &self,
        theta_init: &[T],
        s: &Mat<T>,
        opts: &NelderMeadOptions,
    ) -> Result<Estimate<T>> {
        if !self.theta_space.contains(theta_init) {
            return Err(Error::InvalidTheta);
        }
        let l = linalg::cholesky(s).ok_or(Error::SingularWeighting)?;
        let r = self.minimize(theta_init, Some(&l), opts);
        Ok(estimate_from(r))
    }

    fn minimize(
        &self,
        theta_init: &[T],
        weight_chol: Option<&Mat<T>>,
        opts: &NelderMeadOptions,
    ) -> NelderMeadResult<T> {
        let objective = |theta: &[T]| -> T {
            let Ok(f) = self.sample_average(theta) else {
                return T::max_value();
            };
            match weight_chol {
                None => linalg::dot(&f, &f),
                Some(l) => {
                    let y = linalg::forward_solve(l, &f);
                    linalg::dot(&y, &y)
                }
            }
        };
        nelder_mead_bounded(
            objective,
            theta_init,
            self.theta_space.lower(),
            self.theta_space.upper(),
            opts,
        )
    }

    /// Iterated optimal GMM: a least-squares round fixes the first `S`
    /// estimate, then each round re-weights by the Newey–West covariance at
    /// the previous estimate (regularized by `1e-12 trace I` before the
    /// Cholesky) until the estimate stabilizes or `max_rounds` is hit.
    ///
    /// Every weighted round restarts the simplex at `theta_init`: the
    /// previous estimate enters only through the weighting. Restarting from
    /// the previous estimate instead can trap the search at a parameter
    /// bound, where the relative simplex spread degenerates. The weighting
    /// itself uses the centered covariance so that a biased earlier round
    /// cannot downweight its own bias direction.
    pub fn optimal_gmm(
        &self,
        theta_init: &[T],
        q: Option<usize>,
        max_rounds: usize,
        opts: &NelderMeadOptions,
    ) -> Result<GmmRun<T>> {
        if max_rounds == 0 {
            return Err(Error::invalid("need at least one optimal round"));
        }
        let q = q.unwrap_or_else(|| self.default_lag());
        let round0 = self.ls_estimate(theta_init, opts)?;
        let mut theta_prev = round0.theta.clone();
        let mut trace = Vec::new();
        let mut last_round_converged = round0.converged;
        let mut s_used: Option<LongRunCov<T>> = None;
        let mut rounds_used = 0;
        let mut stabilized = false;

        for round in 1..=max_rounds {
            let s = self.newey_west_centered(&theta_prev, q)?;
            let regularized = regularize(s.matrix());
            let est = self.weighted_estimate(theta_init, &regularized, opts)?;
            last_round_converged = est.converged;
            trace.push(RoundRecord {
                round,
                theta: est.theta.clone(),
                objective: est.objective,
                evals: est.evals,
                converged: est.converged,
            });
            rounds_used = round;
            let step = linalg::vec_norm(&linalg::vec_sub(&est.theta, &theta_prev));
            let scale = T::one() + linalg::vec_norm(&est.theta);
            theta_prev = est.theta;
            s_used = Some(s);
            if step < T::of(1e-6) * scale {
                stabilized = true;
                break;
            }
        }

        Ok(GmmRun {
            theta: theta_prev,
            round0,
            s: s_used.expect("at least one round ran"),
            rounds_used,
            converged: last_round_converged && stabilized,
            trace,
        })
    }
}

/// `S + 1e-12 trace(S) I`, the jitter applied before inverting a long-run
/// covariance.
pub fn regularize<T: Scalar>(s: &Mat<T>) -> Mat<T> {
    let n = s.rows();
    let jitter = T::of(1e-12) * s.trace();
    let mut out = s.clone();
    for i in 0..n {
        out[(i, i)] = out[(i, i)] + jitter;
    }
    out
}

fn mean_of<T: Scalar>(h: &[Vec<T>]) -> Vec<T> {
    let n = h[0].len();
    let mut acc = vec![T::zero(); n];
    for v in h {
        for i in 0..n {
            acc[i] = acc[i] + v[i];
        }
    }
    let inv = T::one() / T::from_usize(h.len()).unwrap();
    acc.into_iter().map(|v| v * inv).collect()
}

fn estimate_from<T: Scalar>(r: NelderMeadResult<T>) -> Estimate<T> {
    Estimate {
        theta: r.x,
        objective: r.value,
        evals: r.evals,
        converged: r.converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_space::{Curve, QuadRule};
    use crate::noise::NoiseStream;
    use crate::projection_dynamics::{Scheme, SeriesSource};

    fn grid(t_max: f64, p: usize) -> Arc<Grid<f64>> {
        Grid::new(t_max, p, QuadRule::TrapezoidUniform).unwrap()
    }

    /// Nelson-Siegel family observed under an exp-decay one-factor vol.
    fn ns_problem(
        theta0: [f64; 2],
        n_points: usize,
        seed: u64,
        zero_noise: bool,
    ) -> (GmmProblem<f64>, CoordSde<f64>) {
        let g = grid(10.0, 101);
        let w = WeightFunction::constant(&g);
        let fam = ManifoldFamily::nelson_siegel(0.5).unwrap();
        let vol = VolatilitySpec::exp_decay(theta0[0], theta0[1], 1).unwrap();
        let sde = CoordSde::new(fam.clone(), vol.clone(), w.clone(), Arc::clone(&g)).unwrap();
        let delta = 1.0 / 252.0;
        let z0 = vec![0.04, -0.01, 0.01];
        let series = if zero_noise {
            let mut points = vec![z0.clone()];
            let mut z = z0;
            for _ in 0..n_points - 1 {
                z = sde.step_euler_ito(&z, delta, &[0.0]).unwrap();
                points.push(z.clone());
            }
            CoordSeries::new(delta, points, SeriesSource::Synthetic).unwrap()
        } else {
            sde.simulate(
                &z0,
                delta,
                n_points - 1,
                &NoiseStream::new(seed),
                Scheme::EulerIto,
            )
            .unwrap()
        };
        let theta_space = ThetaSpace::from_template(&vol).unwrap();
        let problem = GmmProblem::new(theta_space, fam, w, g, series).unwrap();
        (problem, sde)
    }

    #[test]
    fn theta_space_roundtrip_and_bounds() {
        let vol = VolatilitySpec::exp_decay(0.01, 0.5, 1).unwrap();
        let space = ThetaSpace::from_template(&vol).unwrap();
        assert_eq!(space.names(), &["sigma0", "decay"]);
        assert!(space.contains(&[0.01, 0.5]));
        assert!(!space.contains(&[-0.01, 0.5]));
        assert!(matches!(
            space.build(&[0.01, -1.0]),
            Err(Error::InvalidTheta)
        ));
        let rebuilt = space.build(&[0.02, 0.7]).unwrap();
        assert_eq!(rebuilt.theta_values(), vec![0.02, 0.7]);
    }

    #[test]
    fn moments_vanish_on_zero_noise_data_at_the_true_theta() {
        let theta0 = [0.01, 0.5];
        let (problem, _) = ns_problem(theta0, 200, 0, true);
        let ms = problem.moment_series(&theta0).unwrap();
        for h in &ms.h {
            for v in h {
                assert!(v.abs() <= 1e-10, "{v}");
            }
        }
    }

    #[test]
    fn moments_reconstruct_the_noise_exactly() {
        let theta0 = [0.01, 0.5];
        let (problem, sde) = ns_problem(theta0, 400, 3, false);
        let delta = problem.series().delta();
        let noise = NoiseStream::new(3);
        let ms = problem.moment_series(&theta0).unwrap();
        for (k, h) in ms.h.iter().enumerate() {
            let z = &problem.series().points()[k];
            let b = sde.diffusion_coeff(z).unwrap();
            let eps = noise.increments(k as u64, 1, delta);
            let be = b.matvec(&eps);
            for i in 0..h.len() {
                let err = (h[i] - be[i]).abs();
                assert!(err <= 1e-10 * (1.0 + be[i].abs()), "k={k} i={i}: {err}");
            }
        }
    }

    #[test]
    fn constant_series_under_zero_drift_has_zero_moments() {
        let g = grid(2.0, 101);
        let w = WeightFunction::constant(&g);
        let fam =
            ManifoldFamily::affine(Curve::zeros(&g), vec![Curve::constant(&g, 1.0)]).unwrap();
        let vol = VolatilitySpec::constant(0.01, 1).unwrap();
        let series = CoordSeries::new(
            0.1,
            vec![vec![0.04]; 20],
            SeriesSource::Synthetic,
        )
        .unwrap();
        let space = ThetaSpace::from_template(&vol).unwrap();
        let problem = GmmProblem::new(space, fam, w, g, series).unwrap();
        // Flat family: transport drift vanishes; constant vol: the
        // no-arbitrage term projects onto the constant as a tiny but fixed
        // drift, so evaluate at near-zero sigma0 where the drift is zero.
        let ms = problem.moment_series(&[1e-8]).unwrap();
        for h in &ms.h {
            assert!(h[0].abs() <= 1e-12);
        }
    }

    #[test]
    fn sample_average_basics() {
        let zeros = vec![vec![0.0, 0.0]; 7];
        assert_eq!(mean_of(&zeros), vec![0.0, 0.0]);
        let single = vec![vec![1.5, -2.0]];
        assert_eq!(mean_of(&single), vec![1.5, -2.0]);
    }

    #[test]
    fn sample_average_obeys_the_clt_envelope() {
        // Reconstructed moments are B eps_k; their mean over N steps should
        // fall inside 4 ||B|| sqrt(delta / N) essentially always.
        let theta0 = [0.01, 0.5];
        let n_points = 2001;
        let delta = 1.0 / 252.0;
        let mut hits = 0;
        let reps = 120;
        for seed in 0..reps {
            let (problem, sde) = ns_problem(theta0, n_points, 1000 + seed, false);
            let f = problem.sample_average(&theta0).unwrap();
            let b = sde.diffusion_coeff(&problem.series().points()[0]).unwrap();
            let b_norm = (0..3).map(|i| b[(i, 0)].powi(2)).sum::<f64>().sqrt();
            let bound = 4.0 * b_norm * (delta / (n_points - 1) as f64).sqrt();
            if linalg::vec_norm(&f) <= bound {
                hits += 1;
            }
        }
        assert!(hits * 100 >= reps * 99, "only {hits}/{reps} inside the envelope");
    }

    #[test]
    fn gamma_hat_examples() {
        let v = vec![1.0, -2.0];
        let g = gamma_hat_of(std::slice::from_ref(&v), 0).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert_eq!(g[(0, 1)], -2.0);
        assert_eq!(g[(1, 1)], 4.0);

        // All moments identical: Gamma_nu = (M - nu)/M v v^T.
        let m_len = 10;
        let h = vec![v.clone(); m_len];
        for nu in [0usize, 1, 3, 9] {
            let g = gamma_hat_of(&h, nu).unwrap();
            let scale = (m_len - nu) as f64 / m_len as f64;
            assert!((g[(0, 0)] - scale * 1.0).abs() < 1e-14, "nu={nu}");
            assert!((g[(1, 0)] + scale * 2.0).abs() < 1e-14, "nu={nu}");
        }

        assert!(gamma_hat_of(&h, 10).is_err());
    }

    #[test]
    fn gamma_hat_of_white_noise_is_small_at_lag_one() {
        let noise = NoiseStream::new(17);
        let n = 100_000;
        let h: Vec<Vec<f64>> = (0..n)
            .map(|k| vec![noise.standard_normal(k, 0), noise.standard_normal(k, 1)])
            .collect();
        let g1 = gamma_hat_of(&h, 1).unwrap();
        assert!(g1.max_abs() <= 0.02, "{}", g1.max_abs());
    }

    #[test]
    fn newey_west_reduces_to_gamma0_at_q0() {
        let noise = NoiseStream::new(4);
        let h: Vec<Vec<f64>> = (0..500)
            .map(|k| vec![noise.standard_normal(k, 0), noise.standard_normal(k, 1)])
            .collect();
        let s = newey_west_of(&h, 0).unwrap();
        let g0 = gamma_hat_of(&h, 0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                // Gamma_0 is symmetrized exactly once inside newey_west_of.
                let sym = 0.5 * (g0[(i, j)] + g0[(j, i)]);
                assert_eq!(s.matrix()[(i, j)], sym);
            }
        }
        assert_eq!(s.lag(), 0);
    }

    #[test]
    fn newey_west_recovers_iid_covariance() {
        // h ~ iid with covariance C = L L^T.
        let l = [[0.5, 0.0], [0.3, 0.2]];
        let c = [[0.25, 0.15], [0.15, 0.13]];
        let noise = NoiseStream::new(8);
        let n = 100_000;
        let h: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let z0 = noise.standard_normal(k, 0);
                let z1 = noise.standard_normal(k, 1);
                vec![l[0][0] * z0, l[1][0] * z0 + l[1][1] * z1]
            })
            .collect();
        let s = newey_west_of(&h, 5).unwrap();
        let mut worst = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((s.matrix()[(i, j)] - c[i][j]).abs());
            }
        }
        let scale = 0.25f64;
        assert!(worst / scale <= 0.10, "max-norm error {worst}");
    }

    #[test]
    fn newey_west_stays_psd_on_random_series() {
        for seed in 0..100u64 {
            let noise = NoiseStream::new(seed);
            // Correlated, heteroskedastic junk.
            let h: Vec<Vec<f64>> = (0..120)
                .map(|k| {
                    let a = noise.standard_normal(k, 0);
                    let b = noise.standard_normal(k, 1);
                    let s = 1.0 + 0.5 * (k as f64 / 20.0).sin();
                    vec![s * a, s * (0.8 * a + 0.2 * b), 0.3 * b - 0.1 * a]
                })
                .collect();
            let s = newey_west_of(&h, 6).unwrap();
            let ev = linalg::sym_eigenvalues(s.matrix());
            assert!(ev[0] >= -1e-10 * s.matrix().trace(), "seed {seed}: {ev:?}");
        }
    }

    #[test]
    fn zero_noise_least_squares_identifies_theta() {
        let theta0 = [0.01, 0.5];
        let (problem, _) = ns_problem(theta0, 500, 0, true);
        let est = problem
            .ls_estimate(&[0.015, 0.75], &NelderMeadOptions::default())
            .unwrap();
        assert!(est.converged);
        assert!(est.objective <= 1e-20);
        assert!((est.theta[0] - theta0[0]).abs() <= 1e-4, "{:?}", est.theta);
        assert!((est.theta[1] - theta0[1]).abs() <= 1e-4, "{:?}", est.theta);
    }

    #[test]
    fn objective_prefers_the_truth_on_noisy_data() {
        // Large vol and a long sample so the drift signal dominates the
        // noise floor of the mean moments.
        let theta0 = [1.2, 0.5];
        let mut wins = 0;
        let seeds = 100;
        for seed in 0..seeds {
            let (problem, _) = ns_problem(theta0, 20_001, 400 + seed, false);
            let at_truth = problem.ls_objective(&theta0).unwrap();
            let at_off = problem.ls_objective(&[1.5 * theta0[0], 1.5 * theta0[1]]).unwrap();
            if at_truth <= at_off {
                wins += 1;
            }
        }
        assert!(wins * 100 >= seeds * 95, "{wins}/{seeds}");
    }

    #[test]
    fn weighting_by_the_identity_reproduces_least_squares_exactly() {
        let theta0 = [0.01, 0.5];
        let (problem, _) = ns_problem(theta0, 300, 5, false);
        let init = [0.012, 0.6];
        let opts = NelderMeadOptions::default();
        let ls = problem.ls_estimate(&init, &opts).unwrap();
        let eye = Mat::identity(3);
        let weighted = problem.weighted_estimate(&init, &eye, &opts).unwrap();
        assert_eq!(ls.theta, weighted.theta);
        assert_eq!(ls.objective, weighted.objective);
    }

    #[test]
    fn argmin_is_invariant_under_positive_scaling_of_the_weight() {
        let theta0 = [0.01, 0.5];
        let (problem, _) = ns_problem(theta0, 300, 6, false);
        let init = [0.012, 0.6];
        let opts = NelderMeadOptions::default();
        let s = problem.newey_west(&init, 3).unwrap();
        let base = regularize(s.matrix());
        let a = problem.weighted_estimate(&init, &base, &opts).unwrap();
        // Scaling by powers of two keeps every float comparison identical.
        for c in [0.25, 4.0] {
            let b = problem
                .weighted_estimate(&init, &base.scale(c), &opts)
                .unwrap();
            assert_eq!(a.theta, b.theta, "c={c}");
        }
    }

    #[test]
    fn optimal_gmm_zero_noise_is_a_fixed_point_of_round_one() {
        let theta0 = [0.01, 0.5];
        let (problem, _) = ns_problem(theta0, 300, 0, true);
        let run = problem
            .optimal_gmm(&[0.013, 0.65], None, 5, &NelderMeadOptions::default())
            .unwrap();
        assert_eq!(run.rounds_used, 1);
        let step: f64 = linalg::vec_norm(&linalg::vec_sub(&run.theta, &run.round0.theta));
        assert!(step <= 1e-6 * (1.0 + linalg::vec_norm(&run.theta)));
        assert!(run.converged);
    }

    #[test]
    fn singular_weighting_is_reported() {
        let theta0 = [0.01, 0.5];
        let (problem, _) = ns_problem(theta0, 120, 2, false);
        let singular = Mat::zeros(3, 3);
        assert!(matches!(
            problem.weighted_estimate(&[0.01, 0.5], &singular, &NelderMeadOptions::default()),
            Err(Error::SingularWeighting)
        ));
    }

    #[test]
    fn estimator_error_shrinks_with_the_sample() {
        // Median absolute error of the least-squares estimate over 50 seeds
        // must fall monotonically as N quadruples.
        use rayon::prelude::*;
        let theta0 = [0.6, 0.5];
        let seeds = 50u64;
        let mut medians = Vec::new();
        for n_points in [501usize, 2001, 8001] {
            let mut errs: Vec<f64> = (0..seeds)
                .into_par_iter()
                .map(|seed| {
                    let (problem, _) = ns_problem(theta0, n_points, 7000 + seed, false);
                    let est = problem
                        .ls_estimate(&[0.8, 0.7], &NelderMeadOptions::default())
                        .unwrap();
                    (est.theta[0] - theta0[0]).abs() / theta0[0]
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(errs[errs.len() / 2]);
        }
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "medians must fall across the ladder: {medians:?}"
        );
    }

    #[test]
    fn invalid_theta_is_rejected_everywhere() {
        let theta0 = [0.01, 0.5];
        let (problem, _) = ns_problem(theta0, 50, 1, true);
        assert!(matches!(
            problem.sample_average(&[-1.0, 0.5]),
            Err(Error::InvalidTheta)
        ));
        assert!(matches!(
            problem.ls_estimate(&[-1.0, 0.5], &NelderMeadOptions::default()),
            Err(Error::InvalidTheta)
        ));
    }
}
