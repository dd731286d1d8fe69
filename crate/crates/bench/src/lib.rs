//! Fixtures shared by the benchmarks.

use commutant_core::probe::{compactlike_operator, model_sparse_operator};
use commutant_core::{Decomposition, OperatorExpr, SparseOperator};

/// The 16-column geometric-decay operator used by the compact pipeline.
pub fn decay_fixture() -> SparseOperator {
    compactlike_operator(1, 0.5, 16)
}

/// Three small model-restricted blocks for the shift-corner construction.
pub fn corner_blocks(seed: u64, d: &Decomposition) -> [OperatorExpr; 3] {
    let t = |k: u64| OperatorExpr::sparse(model_sparse_operator(3 * seed + k, d, 2, 2, 6, false).scaled(0.2));
    [t(0), t(1), t(2)]
}
