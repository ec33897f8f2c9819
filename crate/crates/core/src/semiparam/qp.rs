//! The Model II b-step: a convex quadratic over the monotone box, solved by
//! projected gradient with step `1/L`.

use nalgebra::{DMatrix, DVector};

use super::pava::project_monotone_box;

pub(crate) const MAX_ITER: usize = 100_000;
const TOL: f64 = 1e-10;

/// `q(b) = (1/p)‖r0 + Zᵀ(b∘e)‖² − (2/p)Σ b_i d_i n_i`, up to a constant.
pub(crate) struct MonotoneQp<'a> {
    pub zt: &'a DMatrix<f64>,
    pub zzt: &'a DMatrix<f64>,
    pub r0: &'a DVector<f64>,
    pub e: DVector<f64>,
    /// `d_i n_i`, the linear reward for shrinking.
    pub reward: DVector<f64>,
    pub key: &'a DVector<f64>,
    pub p: f64,
}

pub(crate) struct QpResult {
    pub b: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl MonotoneQp<'_> {
    fn gradient(&self, b: &DVector<f64>) -> DVector<f64> {
        let fitted = self.r0 + self.zt * b.component_mul(&self.e);
        let back = self.zt.tr_mul(&fitted);
        DVector::from_fn(b.len(), |i, _| 2.0 / self.p * (self.e[i] * back[i] - self.reward[i]))
    }

    fn lipschitz(&self) -> f64 {
        let h = DMatrix::from_fn(self.e.len(), self.e.len(), |i, j| self.e[i] * self.zzt[(i, j)] * self.e[j]);
        2.0 / self.p * h.symmetric_eigenvalues().max().max(0.0)
    }

    #[cfg(test)]
    pub fn value(&self, b: &DVector<f64>) -> f64 {
        let fitted = self.r0 + self.zt * b.component_mul(&self.e);
        (fitted.norm_squared() - 2.0 * b.dot(&self.reward)) / self.p
    }

    pub fn solve(&self, start: &DVector<f64>) -> QpResult {
        let l = self.lipschitz();
        if !(l > 0.0) {
            // linear objective with nonnegative reward: shrink fully
            let b = project_monotone_box(&self.reward.map(|r| if r >= 0.0 { 1.0 } else { 0.0 }), self.key);
            return QpResult {
                b,
                iterations: 0,
                converged: true,
            };
        }
        let mut b = project_monotone_box(start, self.key);
        for it in 1..=MAX_ITER {
            let g = self.gradient(&b);
            let next = project_monotone_box(&(&b - g / l), self.key);
            let moved = (&next - &b).norm() * l;
            b = next;
            if moved < TOL {
                return QpResult {
                    b,
                    iterations: it,
                    converged: true,
                };
            }
        }
        QpResult {
            b,
            iterations: MAX_ITER,
            converged: false,
        }
    }
}
