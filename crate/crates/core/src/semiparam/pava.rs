//! Weighted isotonic regression by pool-adjacent-violators.

use nalgebra::DVector;

use crate::error::{check_len, Result, ShrinkError};

/// A pooled block: minimizes `w·x² − 2·n·x`, so its value is `n / w`.
#[derive(Debug, Clone, Copy)]
struct Block {
    num: f64,
    weight: f64,
    /// Range of groups (in key order) covered by the block.
    first: usize,
    last: usize,
}

impl Block {
    fn value(&self) -> f64 {
        if self.weight > 0.0 {
            self.num / self.weight
        } else if self.num > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Indices sorted by key, split into runs of equal keys.
fn tie_groups(key: &DVector<f64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if key[g[0]] == key[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Minimizes `Σ (w_i x_i² − 2 n_i x_i)` over `x` nondecreasing in `key`
/// (equal keys forced equal). Groups with `w = 0` and `n > 0` want `+∞`
/// and pool upward; groups with `w = n = 0` are free and copy the next block
/// above them, or the nearest below when nothing lies above.
pub(crate) fn isotonic_sufficient(num: &DVector<f64>, weight: &DVector<f64>, key: &DVector<f64>) -> DVector<f64> {
    let groups = tie_groups(key);
    let stats: Vec<(f64, f64)> = groups
        .iter()
        .map(|g| g.iter().fold((0.0, 0.0), |(n, w), &i| (n + num[i], w + weight[i])))
        .collect();

    let mut stack: Vec<Block> = Vec::new();
    for (gi, &(n, w)) in stats.iter().enumerate() {
        if w == 0.0 && n == 0.0 {
            continue;
        }
        let mut cur = Block {
            num: n,
            weight: w,
            first: gi,
            last: gi,
        };
        while let Some(prev) = stack.last() {
            if prev.value() >= cur.value() {
                cur = Block {
                    num: prev.num + cur.num,
                    weight: prev.weight + cur.weight,
                    first: prev.first,
                    last: cur.last,
                };
                stack.pop();
            } else {
                break;
            }
        }
        stack.push(cur);
    }

    let mut group_value = vec![f64::NAN; groups.len()];
    for b in &stack {
        let v = b.value();
        for slot in &mut group_value[b.first..=b.last] {
            *slot = v;
        }
    }
    // free groups: next assigned value above, else the last one below
    let mut above = f64::NAN;
    for gi in (0..groups.len()).rev() {
        if group_value[gi].is_nan() {
            group_value[gi] = above;
        } else {
            above = group_value[gi];
        }
    }
    let mut below = f64::NAN;
    for v in group_value.iter_mut() {
        if v.is_nan() {
            *v = below;
        } else {
            below = *v;
        }
    }

    let mut out = DVector::zeros(key.len());
    for (g, v) in groups.iter().zip(group_value) {
        for &i in g {
            out[i] = v;
        }
    }
    out
}

/// `argmin Σ w_i (x_i − t_i)²` subject to `x` nondecreasing in `order_key`,
/// with equal keys forced to equal values. Zero-weight entries take the
/// value of the block above them (or below, at the top end).
pub fn pava_weighted(targets: &DVector<f64>, weights: &DVector<f64>, order_key: &DVector<f64>) -> Result<DVector<f64>> {
    let n = targets.len();
    check_len("weights", n, weights.len())?;
    check_len("order key", n, order_key.len())?;
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(ShrinkError::invalid("weights must be nonnegative and finite"));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(ShrinkError::invalid("at least one weight must be positive"));
    }
    if order_key.iter().any(|k| !k.is_finite()) {
        return Err(ShrinkError::invalid("order key must be finite"));
    }
    if (0..n).any(|i| weights[i] > 0.0 && !targets[i].is_finite()) {
        return Err(ShrinkError::invalid("targets with positive weight must be finite"));
    }
    let num = DVector::from_fn(n, |i, _| if weights[i] > 0.0 { weights[i] * targets[i] } else { 0.0 });
    Ok(isotonic_sufficient(&num, weights, order_key))
}

/// Euclidean projection onto `{x ∈ [0,1]ⁿ : x nondecreasing in key}`.
pub(crate) fn project_monotone_box(v: &DVector<f64>, key: &DVector<f64>) -> DVector<f64> {
    let ones = DVector::from_element(v.len(), 1.0);
    isotonic_sufficient(v, &ones, key).map(|x| x.clamp(0.0, 1.0))
}
