//! Seeded probe vectors and operator generators.
//!
//! Every random quantity in the crate comes from `ChaCha8Rng::seed_from_u64`,
//! so a seed fully determines the output on every platform.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomposition::Decomposition;
use crate::space::{SeqVector, SparseOperator};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random finitely supported vectors with up to `max_support` entries at
/// indices below `index_bound`. With `integer` set, entries are non-zero
/// integers in [-9, 9], which keeps permutation arithmetic exact under
/// any summation order.
pub fn random_probes(
    seed: u64,
    count: usize,
    index_bound: usize,
    max_support: usize,
    integer: bool,
) -> Vec<SeqVector> {
    let mut rng = rng(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=max_support.max(1));
            let mut pairs = Vec::with_capacity(n);
            for _ in 0..n {
                let k = rng.random_range(0..index_bound.max(1));
                pairs.push((k, random_entry(&mut rng, integer)));
            }
            SeqVector::accumulate(pairs)
        })
        .collect()
}

pub(crate) fn random_entry(rng: &mut ChaCha8Rng, integer: bool) -> f64 {
    if integer {
        let v: i32 = rng.random_range(1..=9);
        if rng.random_bool(0.5) {
            -v as f64
        } else {
            v as f64
        }
    } else {
        rng.random_range(-1.0..1.0)
    }
}

/// Sparse operator whose rows and columns lie in blocks `0..=max_block` of
/// `decomp`, with global indices below `index_bound`.
pub fn block_sparse_operator(
    seed: u64,
    decomp: &Decomposition,
    max_block: usize,
    index_bound: usize,
    nnz: usize,
    integer: bool,
) -> SparseOperator {
    let mut rng = rng(seed);
    let admissible: Vec<usize> = (0..index_bound)
        .filter(|&k| decomp.block_of(k) <= max_block)
        .collect();
    if admissible.is_empty() {
        return SparseOperator::zero();
    }
    let mut triplets = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let r = admissible[rng.random_range(0..admissible.len())];
        let c = admissible[rng.random_range(0..admissible.len())];
        triplets.push((r, c, random_entry(&mut rng, integer)));
    }
    SparseOperator::accumulate(triplets)
}

/// Sparse operator whose rows and columns are model coordinates of `decomp`
/// in blocks `0..=max_block` and slots `< block_dim`.
pub fn model_sparse_operator(
    seed: u64,
    decomp: &Decomposition,
    block_dim: usize,
    max_block: usize,
    nnz: usize,
    integer: bool,
) -> SparseOperator {
    let mut rng = rng(seed);
    let mut triplets = Vec::with_capacity(nnz);
    let pick = |rng: &mut ChaCha8Rng| decomp.pair(rng.random_range(0..=max_block), rng.random_range(0..block_dim.max(1)));
    for _ in 0..nnz {
        let r = pick(&mut rng);
        let c = pick(&mut rng);
        triplets.push((r, c, random_entry(&mut rng, integer)));
    }
    SparseOperator::accumulate(triplets)
}

/// Operator on indices `< support` whose column `j` has ℓ₁ norm at most
/// `decay^j`.
pub fn compactlike_operator(seed: u64, decay: f64, support: usize) -> SparseOperator {
    let mut rng = rng(seed);
    let mut triplets = Vec::new();
    for j in 0..support {
        let budget = decay.powi(j as i32);
        let k = rng.random_range(1..=3usize.min(support.max(1)));
        let mut raw = Vec::with_capacity(k);
        for _ in 0..k {
            let r = rng.random_range(0..support.max(1));
            let w: f64 = rng.random_range(0.1..1.0);
            let s = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            raw.push((r, s * w));
        }
        let total: f64 = raw.iter().map(|(_, w)| w.abs()).sum();
        for (r, w) in raw {
            // fractions of the budget, rounded down so the sum stays below it
            let v = budget * w / total * (1.0 - 1e-12);
            triplets.push((r, j, v));
        }
    }
    SparseOperator::accumulate(triplets)
}

/// Dense `n × m` matrix with entries uniform in [-1, 1).
pub fn random_dense(seed: u64, n: usize, m: usize) -> DMatrix<f64> {
    let mut rng = rng(seed);
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
}

/// A random permutation matrix on indices `< support`.
pub fn permutation_operator(seed: u64, support: usize) -> SparseOperator {
    let mut rng = rng(seed);
    let mut perm: Vec<usize> = (0..support).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    SparseOperator::accumulate(perm.into_iter().enumerate().map(|(c, r)| (r, c, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::PNorm;

    #[test]
    fn same_seed_same_probes() {
        let a = random_probes(3, 8, 100, 5, false);
        let b = random_probes(3, 8, 100, 5, false);
        assert_eq!(a, b);
        assert_ne!(a, random_probes(4, 8, 100, 5, false));
    }

    #[test]
    fn compactlike_columns_decay() {
        let t = compactlike_operator(1, 0.5, 32);
        for j in 0..32 {
            assert!(t.column(j).norm(PNorm::One) <= 0.5f64.powi(j as i32));
        }
    }

    #[test]
    fn permutation_has_unit_norm() {
        let t = permutation_operator(1, 20);
        assert_eq!(t.max_col_sum(), 1.0);
        assert_eq!(t.max_row_sum(), 1.0);
        assert_eq!(t.nnz(), 20);
    }
}
