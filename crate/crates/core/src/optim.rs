//! Bounded Nelder–Mead simplex minimizer.
//!
//! Derivative-free, with the standard reflection/expansion/contraction/shrink
//! coefficients (1, 2, 1/2, 1/2). Candidate vertices are clamped into the
//! box, the initial simplex spreads each coordinate by 5% (absolute 2.5e-4
//! when a coordinate starts at zero), and the search stops when the simplex
//! diameter — the largest distance from the best vertex — falls below the
//! tolerance or the evaluation budget runs out.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct NelderMeadOptions {
    /// Evaluation budget; 0 means `500 * dim`.
    pub max_evals: usize,
    /// Simplex diameter at which the search counts as converged.
    pub diameter_tol: f64,
    /// Relative spread of the initial simplex.
    pub initial_spread: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 0,
            diameter_tol: 1e-8,
            initial_spread: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NelderMeadResult<T> {
    pub x: Vec<T>,
    pub value: T,
    pub evals: usize,
    pub converged: bool,
}

struct Vertex<T> {
    x: Vec<T>,
    f: T,
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
pub fn nelder_mead_bounded<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    x0: &[T],
    lower: &[T],
    upper: &[T],
    opts: &NelderMeadOptions,
) -> NelderMeadResult<T> {
    let dim = x0.len();
    assert!(dim > 0 && lower.len() == dim && upper.len() == dim);
    let budget = if opts.max_evals == 0 {
        500 * dim
    } else {
        opts.max_evals
    };
    let diameter_tol = T::of(opts.diameter_tol);
    let spread = T::of(opts.initial_spread);
    let zero_step = T::of(2.5e-4);

    let clamp = |x: &mut Vec<T>| {
        for i in 0..dim {
            if x[i] < lower[i] {
                x[i] = lower[i];
            }
            if x[i] > upper[i] {
                x[i] = upper[i];
            }
        }
    };

    let mut evals = 0usize;
    let mut eval = |x: &[T], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            T::max_value()
        }
    };

    let mut simplex: Vec<Vertex<T>> = Vec::with_capacity(dim + 1);
    {
        let mut base = x0.to_vec();
        clamp(&mut base);
        let fb = eval(&base, &mut evals);
        simplex.push(Vertex { x: base.clone(), f: fb });
        for i in 0..dim {
            let mut x = base.clone();
            let step = if x[i] == T::zero() {
                zero_step
            } else {
                x[i] * spread
            };
            x[i] = x[i] + step;
            clamp(&mut x);
            if x[i] == base[i] {
                // Clamping collapsed the vertex; push inward instead.
                x[i] = base[i] - step;
                clamp(&mut x);
            }
            let fx = eval(&x, &mut evals);
            simplex.push(Vertex { x, f: fx });
        }
    }

    let alpha = T::one(); // reflection
    let gamma = T::of(2.0); // expansion
    let rho = T::of(0.5); // contraction
    let sigma = T::of(0.5); // shrink

    let mut converged = false;
    while evals < budget {
        simplex.sort_by(|a, b| a.f.partial_cmp(&b.f).expect("finite objective"));

        let diameter = simplex[1..]
            .iter()
            .map(|v| {
                v.x.iter()
                    .zip(&simplex[0].x)
                    .map(|(&a, &b)| (a - b).abs())
                    .fold(T::zero(), |m, d| if d > m { d } else { m })
            })
            .fold(T::zero(), |m, d| if d > m { d } else { m });
        if diameter < diameter_tol {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![T::zero(); dim];
        for v in &simplex[..dim] {
            for i in 0..dim {
                centroid[i] = centroid[i] + v.x[i];
            }
        }
        let inv = T::one() / T::from_usize(dim).unwrap();
        for c in centroid.iter_mut() {
            *c = *c * inv;
        }

        let worst = simplex[dim].f;
        let second_worst = simplex[dim - 1].f;
        let best = simplex[0].f;

        let mut reflected: Vec<T> = (0..dim)
            .map(|i| centroid[i] + alpha * (centroid[i] - simplex[dim].x[i]))
            .collect();
        clamp(&mut reflected);
        let fr = eval(&reflected, &mut evals);

        if fr < best {
            let mut expanded: Vec<T> = (0..dim)
                .map(|i| centroid[i] + gamma * (reflected[i] - centroid[i]))
                .collect();
            clamp(&mut expanded);
            let fe = eval(&expanded, &mut evals);
            simplex[dim] = if fe < fr {
                Vertex { x: expanded, f: fe }
            } else {
                Vertex { x: reflected, f: fr }
            };
            continue;
        }
        if fr < second_worst {
            simplex[dim] = Vertex { x: reflected, f: fr };
            continue;
        }

        // Contraction, outside or inside of the worst vertex.
        let (mut contracted, towards): (Vec<T>, T) = if fr < worst {
            (
                (0..dim)
                    .map(|i| centroid[i] + rho * (reflected[i] - centroid[i]))
                    .collect(),
                fr,
            )
        } else {
            (
                (0..dim)
                    .map(|i| centroid[i] - rho * (centroid[i] - simplex[dim].x[i]))
                    .collect(),
                worst,
            )
        };
        clamp(&mut contracted);
        let fc = eval(&contracted, &mut evals);
        if fc <= towards {
            simplex[dim] = Vertex { x: contracted, f: fc };
            continue;
        }

        // Shrink towards the best vertex.
        let best_x = simplex[0].x.clone();
        for v in simplex.iter_mut().skip(1) {
            for i in 0..dim {
                v.x[i] = best_x[i] + sigma * (v.x[i] - best_x[i]);
            }
            clamp(&mut v.x);
            v.f = eval(&v.x, &mut evals);
            if evals >= budget {
                break;
            }
        }
    }

    simplex.sort_by(|a, b| a.f.partial_cmp(&b.f).expect("finite objective"));
    NelderMeadResult {
        x: simplex[0].x.clone(),
        value: simplex[0].f,
        evals,
        converged,
    }
}
