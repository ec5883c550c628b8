//! Exact squared 2-Wasserstein distance between uniform empirical measures on
//! the real line, and its closed-form gradient.
//!
//! In one dimension the optimal plan between `(1/n) Σ δ_{U_i}` and
//! `(1/m) Σ δ_{V_j}` is the quantile coupling: the `r`-th smallest `U` and the
//! `c`-th smallest `V` share mass `R[r, c]`, the length of the overlap of
//! `(r/n, (r+1)/n]` and `(c/m, (c+1)/m]`. That matrix has at most `n + m - 1`
//! non-zero entries, so everything here is `O((n + m) log(n + m))`.

use crate::error::{invalid, Result};

/// A validated, non-empty list of finite reals carrying uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSample1D(Vec<f64>);

impl EmpiricalSample1D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_sample(&values)?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_sample(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(invalid("empirical sample must be non-empty"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!(
            "empirical sample has non-finite value {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// Ranks of a sample under a stable sort by `(value, original index)`.
///
/// Ranks are 0-based: `ranks[i]` is the position of element `i` in sorted
/// order, and `order[r]` is the element holding rank `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankPermutation {
    ranks: Vec<usize>,
    order: Vec<usize>,
}

impl RankPermutation {
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// Inverse permutation: indices of the elements in ascending order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

pub fn rank_permutation(values: &[f64]) -> Result<RankPermutation> {
    check_sample(values)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable, so equal values keep their index order
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    Ok(RankPermutation { ranks, order })
}

/// One non-zero cell of the quantile coupling, indexed by ranks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingEntry {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// Sparse quantile coupling between uniform measures on `n` and `m` atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileCoupling {
    n: usize,
    m: usize,
    entries: Vec<CouplingEntry>,
}

impl QuantileCoupling {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Entries in increasing order of quantile level.
    pub fn entries(&self) -> &[CouplingEntry] {
        &self.entries
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for e in &self.entries {
            sums[e.row] += e.weight;
        }
        sums
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.m];
        for e in &self.entries {
            sums[e.col] += e.weight;
        }
        sums
    }
}

/// Builds the coupling by merging the breakpoints `{i/n}` and `{j/m}`.
///
/// Breakpoints are compared exactly as integers over the common denominator
/// `n * m`, so each weight is a single rounding of an exact rational.
pub fn quantile_coupling(n: usize, m: usize) -> Result<QuantileCoupling> {
    if n == 0 || m == 0 {
        return Err(invalid(format!("coupling sizes must be positive, got ({n}, {m})")));
    }
    let (n64, m64) = (n as u128, m as u128);
    let denom = (n64 * m64) as f64;
    let mut entries = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev: u128 = 0;
    while i < n && j < m {
        let row_end = (i as u128 + 1) * m64;
        let col_end = (j as u128 + 1) * n64;
        let next = row_end.min(col_end);
        entries.push(CouplingEntry {
            row: i,
            col: j,
            weight: (next - prev) as f64 / denom,
        });
        if row_end <= col_end {
            i += 1;
        }
        if col_end <= row_end {
            j += 1;
        }
        prev = next;
    }
    Ok(QuantileCoupling { n, m, entries })
}

/// `W_2^2` between the uniform empirical measures on `u` and `v`.
pub fn w2_squared(u: &[f64], v: &[f64]) -> Result<f64> {
    let su = rank_permutation(u)?;
    let sv = rank_permutation(v)?;
    let coupling = quantile_coupling(u.len(), v.len())?;
    Ok(coupling
        .entries()
        .iter()
        .map(|e| {
            let diff = u[su.order[e.row]] - v[sv.order[e.col]];
            e.weight * diff * diff
        })
        .sum())
}

/// Distance and gradients with respect to every atom of `u` and `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct W2Gradient {
    pub value: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

/// Closed-form gradient of `W_2^2` in both arguments.
///
/// `grad_u[i] = 2 Σ_j R[σ(i), τ(j)] (u_i - v_j)` and symmetrically for `v`.
/// At tied values the tie-broken permutation of [`rank_permutation`] is used.
pub fn w2_grad(u: &[f64], v: &[f64]) -> Result<W2Gradient> {
    let su = rank_permutation(u)?;
    let sv = rank_permutation(v)?;
    let coupling = quantile_coupling(u.len(), v.len())?;
    let mut grad_u = vec![0.0; u.len()];
    let mut grad_v = vec![0.0; v.len()];
    let mut value = 0.0;
    for e in coupling.entries() {
        let (i, j) = (su.order[e.row], sv.order[e.col]);
        let diff = u[i] - v[j];
        value += e.weight * diff * diff;
        let g = 2.0 * e.weight * diff;
        grad_u[i] += g;
        grad_v[j] -= g;
    }
    Ok(W2Gradient {
        value,
        grad_u,
        grad_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn to_one_based(p: &RankPermutation) -> Vec<usize> {
        p.ranks().iter().map(|r| r + 1).collect()
    }

    #[test]
    fn ranks_of_small_samples() {
        assert_eq!(to_one_based(&rank_permutation(&[3.0, 1.0, 2.0]).unwrap()), vec![3, 1, 2]);
        assert_eq!(to_one_based(&rank_permutation(&[5.0]).unwrap()), vec![1]);
        assert_eq!(to_one_based(&rank_permutation(&[1.0, 1.0]).unwrap()), vec![1, 2]);
    }

    #[test]
    fn rank_rejects_bad_input() {
        assert!(rank_permutation(&[]).is_err());
        assert!(rank_permutation(&[1.0, f64::NAN]).is_err());
        assert!(rank_permutation(&[f64::INFINITY]).is_err());
        assert!(EmpiricalSample1D::new(vec![]).is_err());
    }

    #[test]
    fn tie_break_does_not_change_distance() {
        // any permutation of tied atoms is an optimal rank assignment
        let u = [1.0, 1.0, 0.0, 1.0];
        let v = [0.5, 2.0, 1.0];
        let stable = w2_squared(&u, &v).unwrap();
        let permuted = w2_squared(&[1.0, 0.0, 1.0, 1.0], &[2.0, 1.0, 0.5]).unwrap();
        assert!((stable - permuted).abs() < 1e-15);
    }

    /// Interval intersection computed in exact rational arithmetic.
    fn rational_coupling(n: i64, m: i64) -> Vec<(usize, usize, Ratio<i64>)> {
        let mut out = Vec::new();
        for i in 1..=n {
            for j in 1..=m {
                let lo = Ratio::new(i - 1, n).max(Ratio::new(j - 1, m));
                let hi = Ratio::new(i, n).min(Ratio::new(j, m));
                if hi > lo {
                    out.push((i as usize, j as usize, hi - lo));
                }
            }
        }
        out
    }

    fn one_based_entries(c: &QuantileCoupling) -> Vec<(usize, usize, f64)> {
        c.entries().iter().map(|e| (e.row + 1, e.col + 1, e.weight)).collect()
    }

    #[test]
    fn coupling_examples() {
        assert_eq!(
            one_based_entries(&quantile_coupling(2, 2).unwrap()),
            vec![(1, 1, 0.5), (2, 2, 0.5)]
        );
        let c23 = one_based_entries(&quantile_coupling(2, 3).unwrap());
        let expected = rational_coupling(2, 3);
        assert_eq!(c23.len(), expected.len());
        for (got, want) in c23.iter().zip(&expected) {
            assert_eq!((got.0, got.1), (want.0, want.1));
            let w = *want.2.numer() as f64 / *want.2.denom() as f64;
            assert!((got.2 - w).abs() < 1e-15);
        }
        // frozen from the rational oracle
        let frozen = [(1, 1, 1.0 / 3.0), (1, 2, 1.0 / 6.0), (2, 2, 1.0 / 6.0), (2, 3, 1.0 / 3.0)];
        for (got, want) in c23.iter().zip(frozen) {
            assert_eq!((got.0, got.1), (want.0, want.1));
            assert!((got.2 - want.2).abs() < 1e-15);
        }
        let c15 = one_based_entries(&quantile_coupling(1, 5).unwrap());
        assert_eq!(c15.len(), 5);
        for (k, e) in c15.iter().enumerate() {
            assert_eq!((e.0, e.1), (1, k + 1));
            assert!((e.2 - 0.2).abs() < 1e-16);
        }
    }

    #[test]
    fn coupling_matches_rational_oracle() {
        for n in 1..=12 {
            for m in 1..=12 {
                let got = one_based_entries(&quantile_coupling(n, m).unwrap());
                let want = rational_coupling(n as i64, m as i64);
                assert_eq!(got.len(), want.len(), "n={n} m={m}");
                assert!(got.len() <= n + m - 1);
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!((g.0, g.1), (w.0, w.1));
                    let wf = *w.2.numer() as f64 / *w.2.denom() as f64;
                    assert!((g.2 - wf).abs() <= 1e-16);
                }
            }
        }
    }

    #[test]
    fn coupling_rejects_zero() {
        assert!(quantile_coupling(0, 3).is_err());
        assert!(quantile_coupling(3, 0).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(w2_squared(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(w2_squared(&[0.0], &[1.0]).unwrap(), 1.0);
        // quantile integral: F_U^{-1} = 0 on (0, 1/2], 1 on (1/2, 1]; F_V^{-1} = 0.5
        assert!((w2_squared(&[0.0, 1.0], &[0.5]).unwrap() - 0.25).abs() < 1e-15);
        assert!(w2_squared(&[], &[1.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = w2_grad(&[0.3, -1.0, 2.0], &[2.0, 0.3, -1.0]).unwrap();
        assert!(g.grad_u.iter().chain(&g.grad_v).all(|x| x.abs() < 1e-15));

        let g = w2_grad(&[0.0, 1.0], &[0.5]).unwrap();
        assert!((g.grad_u[0] + 0.5).abs() < 1e-15);
        assert!((g.grad_u[1] - 0.5).abs() < 1e-15);
        assert!(g.grad_v[0].abs() < 1e-15);
        assert!((g.value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences_on_small_case() {
        let u = [0.0, 1.0];
        let v = [0.5];
        let h = 1e-6;
        let g = w2_grad(&u, &v).unwrap();
        for i in 0..2 {
            let mut up = u;
            let mut dn = u;
            up[i] += h;
            dn[i] -= h;
            let fd = (w2_squared(&up, &v).unwrap() - w2_squared(&dn, &v).unwrap()) / (2.0 * h);
            assert!((fd - g.grad_u[i]).abs() < 1e-8);
        }
        let fd = (w2_squared(&u, &[0.5 + h]).unwrap() - w2_squared(&u, &[0.5 - h]).unwrap()) / (2.0 * h);
        assert!((fd - g.grad_v[0]).abs() < 1e-8);
    }
}
