//! Explicit commutator factorizations on sequence spaces.

pub mod decomposition;
pub mod error;
pub mod expr;
pub mod factorize;
pub mod matrix2x2;
pub mod probe;
pub mod similarity;
pub mod space;

pub use nalgebra;

pub use decomposition::{verify_shift_identities, Cuts, Decomposition, FiniteModel, ShiftIdentityReport};
pub use error::{Error, Result};
pub use space::{
    op_add, op_apply, op_compose, op_norm_bound, op_norm_exact, op_scale, vec_norm, PNorm,
    SeqVector, SparseOperator,
};
pub use expr::{neumann_apply, BlockRange, NeumannResult, NeumannTerm, NormCertificate, OperatorExpr};
pub use factorize::{
    coarsen_and_factor, compact_factor, compact_side_factor, corner_factor, easy_factor,
    ideal_inclusion_check, select_blocks, small_norm_block_basis, tail_profile, CommutatorWitness,
    CompactSide, CornerSide, DecayProfile, EasyVariant, WitnessKind,
};
pub use matrix2x2::{
    assemble_direct_sum, shift_corner_factor, sylvester_dense_oracle, sylvester_neumann,
    trace_obstruction, Block2x2, DenseWitness, DiagonalCommutator, TraceVerdict,
};
pub use similarity::{
    corner_shift_similarity, ell1_main_pipeline, offdiag_transform, preserve_subspace_heuristic,
    swap_involution, Certificate, Involution, SimilarityChain,
};
