//! One-dimensional minimization over `λ ∈ [0, ∞]`: a coarse log grid
//! followed by golden-section refinement inside the winning bracket.

use crate::error::{Result, ShrinkError};
use crate::model::Lambda;

pub const GRID_POINTS: usize = 201;
pub const GRID_SPAN: f64 = 1e4;
const REL_TOL: f64 = 1e-10;
const MAX_GOLDEN_STEPS: usize = 400;
const REFINED_BRACKETS: usize = 3;

/// Log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Geometric mean of positive numbers; the natural scale of `λ`.
pub fn geometric_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v.ln(), n + 1));
    (sum / n as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub lambda: Lambda,
    pub value: f64,
}

/// Minimizes `f` over `{0} ∪ grid(scale) ∪ {∞}` and refines the best bracket.
/// Points where `f` fails or is not finite are skipped.
pub fn minimize_lambda<F>(mut f: F, scale: f64, include_infinity: bool) -> Result<Minimum>
where
    F: FnMut(Lambda) -> Result<f64>,
{
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(ShrinkError::NonFinite("lambda search scale"));
    }
    let mut candidates = vec![Lambda::ZERO];
    candidates.extend(
        log_grid(scale / GRID_SPAN, scale * GRID_SPAN, GRID_POINTS)
            .into_iter()
            .map(Lambda::Finite),
    );
    if include_infinity {
        candidates.push(Lambda::Infinite);
    }

    let mut eval = |l: Lambda| match f(l) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    };
    let values: Vec<f64> = candidates.iter().map(|&l| eval(l)).collect();
    let best_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !best_value.is_finite() {
        return Err(ShrinkError::NonFinite("profile objective"));
    }

    // The profile need not be unimodal, so every grid-local minimum among the
    // best few gets its own refinement.
    let n = values.len();
    let mut local: Vec<usize> = (0..n)
        .filter(|&i| {
            values[i].is_finite()
                && (i == 0 || values[i] <= values[i - 1])
                && (i + 1 == n || values[i] <= values[i + 1])
        })
        .collect();
    local.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    local.truncate(REFINED_BRACKETS);

    let mut result = Minimum {
        lambda: candidates[local[0]],
        value: values[local[0]],
    };
    for &i in &local {
        let refined = refine(&mut eval, candidates[i.saturating_sub(1)], candidates[(i + 1).min(n - 1)]);
        if refined.1 < result.value {
            result = Minimum {
                lambda: refined.0,
                value: refined.1,
            };
        }
    }
    Ok(result)
}

fn refine<F: FnMut(Lambda) -> f64>(eval: &mut F, lo: Lambda, hi: Lambda) -> (Lambda, f64) {
    match (lo, hi) {
        (Lambda::Finite(a), Lambda::Infinite) => {
            let (t, v) = golden(|t| eval(from_inverse(t)), 0.0, 1.0 / a, REL_TOL / a);
            (from_inverse(t), v)
        }
        (Lambda::Finite(a), Lambda::Finite(b)) if a == 0.0 => {
            let (t, v) = golden(|t| eval(Lambda::Finite(t)), 0.0, b, REL_TOL * b);
            (Lambda::Finite(t), v)
        }
        (Lambda::Finite(a), Lambda::Finite(b)) => {
            let (t, v) = golden(|t| eval(Lambda::Finite(t.exp())), a.ln(), b.ln(), REL_TOL);
            (Lambda::Finite(t.exp()), v)
        }
        (Lambda::Infinite, _) => unreachable!("infinity is always the last candidate"),
    }
}

fn from_inverse(t: f64) -> Lambda {
    if t <= 0.0 {
        Lambda::Infinite
    } else {
        Lambda::Finite(1.0 / t)
    }
}

/// Golden-section search on `[a, b]`; returns the best point it evaluated.
fn golden<F: FnMut(f64) -> f64>(mut h: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (h(c), h(d));
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for _ in 0..MAX_GOLDEN_STEPS {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = h(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = h(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_log_spaced_and_inclusive() {
        let g = log_grid(1e-2, 1e2, 5);
        assert!((g[0] - 1e-2).abs() < 1e-16);
        assert!((g[2] - 1.0).abs() < 1e-14);
        assert!((g[4] - 1e2).abs() < 1e-12);
    }

    #[test]
    fn finds_interior_minimum_in_log_coordinates() {
        let target: f64 = 3.7;
        let m = minimize_lambda(|l| Ok((l.as_f64().ln() - target.ln()).powi(2)), 1.0, true).unwrap();
        assert!((m.lambda.as_f64() - target).abs() < 1e-6 * target);
    }

    #[test]
    fn finds_minimum_near_zero_in_linear_coordinates() {
        // minimum at 1e-6, well below the smallest grid point 1e-4
        let m = minimize_lambda(|l| Ok((l.as_f64() - 1e-6).powi(2)), 1.0, true).unwrap();
        assert!((m.lambda.as_f64() - 1e-6).abs() < 1e-9);
    }

    #[test]
    fn endpoints() {
        let zero = minimize_lambda(|l| Ok(l.as_f64().min(1e300)), 1.0, true).unwrap();
        assert_eq!(zero.lambda, Lambda::ZERO);
        let inf = minimize_lambda(|l| Ok(1.0 / (1.0 + l.as_f64())), 1.0, true).unwrap();
        assert_eq!(inf.lambda, Lambda::Infinite);
        let no_inf = minimize_lambda(|l| Ok(1.0 / (1.0 + l.as_f64())), 1.0, false).unwrap();
        assert!((no_inf.lambda.as_f64() - 1e4).abs() < 1e-6);
    }

    #[test]
    fn beyond_the_grid_towards_infinity() {
        // minimum at λ = 1e6, past the largest grid point
        let m = minimize_lambda(|l| Ok((1.0 / l.as_f64() - 1e-6).powi(2)), 1.0, true).unwrap();
        assert!((m.lambda.as_f64() / 1e6 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn failed_points_are_skipped() {
        let m = minimize_lambda(
            |l| {
                if l.as_f64() < 1.0 {
                    Err(ShrinkError::NonFinite("test"))
                } else {
                    Ok(l.as_f64())
                }
            },
            1.0,
            false,
        )
        .unwrap();
        assert!((m.value - 1.0).abs() < 1e-6);
        assert!(minimize_lambda(|_| Ok(f64::NAN), 1.0, true).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn never_worse_than_a_dense_grid(c in -3.0f64..3.0, w in 0.1f64..4.0, s in 0.01f64..10.0) {
                // bumpy objective with several local minima
                let f = |x: f64| (x.ln() - c).powi(2) + 0.3 * (w * x.ln()).sin();
                let m = minimize_lambda(|l| Ok(f(l.as_f64())), s, false).unwrap();
                let best = log_grid(s / GRID_SPAN, s * GRID_SPAN, 10_000)
                    .into_iter()
                    .map(f)
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(m.value <= best + 1e-2);
            }
        }
    }
}
