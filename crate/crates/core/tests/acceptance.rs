//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p commutant-core --test acceptance`.

use std::time::{Duration, Instant};

use commutant_core::factorize::{corner_factor, easy_factor, CornerSide, EasyVariant};
use commutant_core::matrix2x2::{
    assemble_direct_sum, commutator_trace_check, dense_commutator, dense_norm, pair_window, shift_corner_factor,
    sylvester_dense_oracle, sylvester_neumann, trace_obstruction, DenseWitness, DiagonalCommutator,
};
use commutant_core::probe::{block_sparse_operator, compactlike_operator, model_sparse_operator, random_probes, rng};
use commutant_core::similarity::{
    corner_fixture, corner_shift_similarity, offdiag_transform, pairing_swap, swap_involution,
};
use commutant_core::{
    compact_factor, op_norm_exact, select_blocks, verify_shift_identities, Decomposition, FiniteModel,
    OperatorExpr, PNorm, SeqVector, SparseOperator,
};
use nalgebra::DMatrix;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn shift_identities() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for d in [Decomposition::dyadic(), Decomposition::cantor()] {
        let rep = verify_shift_identities(&d, 256, 16, 1);
        let exact = rep.lr_identity == 0.0
            && rep.rl_identity == 0.0
            && rep.right_intertwining == 0.0
            && rep.left_intertwining == 0.0;
        pass &= exact && rep.passed() && rep.left_power_ratio <= 4.0 && rep.support_exhaustion_failures == 0;
        notes.push(format!("{}: max |L^n x|/|x| = {:.3}", d.scheme_name(), rep.left_power_ratio));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(5);
    outcome(pass, format!("{}; {:.2?}", notes.join(", "), elapsed))
}

fn factorization_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst_int = 0.0f64;
    let mut worst_float = 0.0f64;
    for seed in 0..50u64 {
        let d = if seed % 2 == 0 { Decomposition::dyadic() } else { Decomposition::cantor() };
        let integer = seed < 25;
        let t = OperatorExpr::sparse(block_sparse_operator(seed, &d, 2, 256, 30, integer));
        let mut ws = Vec::new();
        for v in [EasyVariant::Left, EasyVariant::Right] {
            ws.push(easy_factor(&t, &d, v).expect("easy factor"));
        }
        for side in [CornerSide::Right, CornerSide::Left] {
            ws.push(corner_factor(&t, &d, side).expect("corner factor"));
        }
        for mut w in ws {
            let r = w.verify(0..256);
            if integer {
                worst_int = worst_int.max(r);
            } else {
                worst_float = worst_float.max(r);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_int == 0.0 && worst_float <= 1e-12 && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!("integer max {worst_int:e}, real max {worst_float:e}; {elapsed:.2?}"),
    )
}

fn series_constant() -> Outcome {
    let d = Decomposition::dyadic();
    let mut sharp = 0.0f64;
    let mut pass = true;
    for seed in 0..20u64 {
        let t = block_sparse_operator(seed, &d, 3, 256, 30, false);
        for i in 0..=3 {
            for j in 0..=3 {
                let piece = t.filter(|r, c| d.block_of(r) == i && d.block_of(c) == j);
                let norm = op_norm_exact(&piece, PNorm::One).unwrap();
                if norm == 0.0 {
                    continue;
                }
                let series = OperatorExpr::shift_series(&d, &OperatorExpr::sparse(piece)).unwrap();
                let col = (0..256).map(|k| series.column(k).norm(PNorm::One)).fold(0.0, f64::max);
                sharp = sharp.max(col / norm);
                pass &= col <= 32.0 * norm;
            }
        }
    }
    outcome(pass, format!("sharp ratio {sharp:.4} against C = 32"))
}

// every (i, j) term of the three tail sums, computed from scratch
fn tail_sums(t: &SparseOperator, d: &Decomposition, m: &[usize]) -> f64 {
    let norm = |s: SparseOperator| op_norm_exact(&s, PNorm::One).unwrap();
    let mut total = 0.0;
    for &a in m {
        total += norm(t.filter(|r, _| d.block_of(r) > a));
        total += norm(t.filter(|_, c| d.block_of(c) > a));
        for &b in m {
            total += norm(t.filter(|r, c| d.block_of(r) > a && d.block_of(c) > b));
        }
    }
    total
}

fn block_selection() -> Outcome {
    let d = Decomposition::dyadic();
    let mut pass = true;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let t = compactlike_operator(seed, 0.5, 32);
        for eps in [0.1, 0.01] {
            let s = select_blocks(&t, &d, PNorm::One, eps).unwrap();
            let total = tail_sums(&t, &d, &s.m);
            worst = worst.max(total / eps);
            pass &= total < eps;
        }
    }
    let diag = SparseOperator::accumulate((0..=5).map(|i| {
        let k = d.pair(i, 0);
        (k, k, 2f64.powi(-(i as i32)))
    }));
    let s = select_blocks(&diag, &d, PNorm::One, 0.1).unwrap();
    let minimal = (0..=32).find(|&m0| tail_sums(&diag, &d, &[m0]) < 0.1).unwrap();
    let valid = tail_sums(&diag, &d, &s.m) < 0.1;
    pass &= valid && s.m[0] >= minimal;
    let relation = if s.m[0] == minimal { "matches" } else { "valid with slack over" };
    outcome(
        pass,
        format!(
            "worst total/eps {worst:.3}; diagonal fixture greedy m0 = {} {relation} minimal m0 = {minimal}",
            s.m[0]
        ),
    )
}

fn compact_pipeline() -> Outcome {
    let t = SparseOperator::accumulate(
        (0..16).flat_map(|i| (0..16).map(move |j| (i, j, 2f64.powi(-(i as i32 + j as i32))))),
    );
    let mut pass = true;
    let mut notes = Vec::new();
    for p in [PNorm::One, PNorm::Inf] {
        let out = compact_factor(&t, p, 0.01, 256).unwrap();
        let r = out.witness().max_residual;
        pass &= r <= 1e-9 && out.witness().probes_checked == 256;
        if p == PNorm::One {
            pass &= !out.block_norms.is_empty() && out.block_norms_ok();
        }
        notes.push(format!("p = {p}: residual {r:e}"));
    }
    outcome(pass, format!("{}; Case II block norms below eps/2^i", notes.join(", ")))
}

fn random_matrix(g: &mut impl Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| g.random_range(-1.0..1.0))
}

fn sylvester() -> Outcome {
    let mut pass = true;
    let mut worst_rel = 0.0f64;
    let mut worst_res = 0.0f64;
    for seed in 0..50u64 {
        let mut g = rng(1000 + seed);
        let n = g.random_range(1..=8usize);
        let m = g.random_range(1..=8usize);
        let na = g.random_range(0.01..0.24);
        let nd = g.random_range(0.01..0.24);
        let a = random_matrix(&mut g, n, n);
        let a = &a * (na / dense_norm(&a, PNorm::One));
        let d = random_matrix(&mut g, m, m);
        let d = &d * (nd / dense_norm(&d, PNorm::One));
        let b = random_matrix(&mut g, n, m);
        let c = random_matrix(&mut g, m, n);
        let s = sylvester_neumann(&a, &d, &b, &c, PNorm::One, 1e-13, 10_000).unwrap();
        let (e1, e2) = sylvester_dense_oracle(&a, &d, &b, &c).unwrap();
        let rel = ((&s.e1 - &e1).norm() / e1.norm()).max((&s.e2 - &e2).norm() / e2.norm());
        worst_rel = worst_rel.max(rel);
        worst_res = worst_res.max(s.residuals.0).max(s.residuals.1);
        pass &= rel <= 1e-9
            && s.residuals.0 <= 1e-10
            && s.residuals.1 <= 1e-10
            && s.iters.0 <= s.iteration_bounds.0
            && s.iters.1 <= s.iteration_bounds.1;
    }
    outcome(pass, format!("max relative gap {worst_rel:e}, max residual {worst_res:e}"))
}

fn shift_corner() -> Outcome {
    let d = Decomposition::dyadic();
    let m12 = FiniteModel::new(12, 2).unwrap();
    let m16 = FiniteModel::new(16, 2).unwrap();
    let z = OperatorExpr::zero();
    let zero = shift_corner_factor(&z, &z, &z, &m12, &d, 1e-8).unwrap();
    let mut pass = zero.witness.max_residual == 0.0;
    let mut worst = 0.0f64;
    let mut drift = 0.0f64;
    for seed in 0..20u64 {
        let t = |k: u64| OperatorExpr::sparse(model_sparse_operator(3 * seed + k, &d, 2, 2, 6, false).scaled(0.2));
        let (t1, t2, t3) = (t(0), t(1), t(2));
        let a = shift_corner_factor(&t1, &t2, &t3, &m12, &d, 1e-8).unwrap();
        let b = shift_corner_factor(&t1, &t2, &t3, &m16, &d, 1e-8).unwrap();
        worst = worst.max(a.witness.max_residual);
        for &k in &a.window {
            let e = SeqVector::unit(k);
            let gap = a.witness.residual_vector(&e).minus(&b.witness.residual_vector(&e)).norm(PNorm::Inf);
            drift = drift.max(gap);
        }
    }
    pass &= worst <= 1e-8 && drift <= 1e-10;
    let window = pair_window(&m12, &d, m12.margin_block(7).unwrap()).len();
    outcome(
        pass,
        format!("zero fixture exact; max residual {worst:e} on {window} columns; B 12 -> 16 drift {drift:e}"),
    )
}

fn involution() -> Outcome {
    let d = Decomposition::dyadic();
    let (p, v, vp) = pairing_swap(&d);
    let probes = random_probes(77, 128, 256, 8, true);
    let inv = swap_involution(&p, &v, &vp, &probes).unwrap();
    let square = inv.square_deviation(&probes);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let t = OperatorExpr::sparse(block_sparse_operator(seed, &d, 3, 256, 40, true));
        let out = offdiag_transform(&t, &inv, &probes).unwrap();
        worst = worst.max(out.identity_deviation);
    }
    outcome(
        square == 0.0 && worst == 0.0,
        format!("S^2 deviation {square:e}; off-diagonal identity max deviation {worst:e} on 128 probes"),
    )
}

fn corner_similarity() -> Outcome {
    let d1 = Decomposition::dyadic();
    let model = FiniteModel::new(12, 2).unwrap();
    let mut inv_dev = 0.0f64;
    let mut corner = 0.0f64;
    let mut active = 0;
    for seed in 0..10u64 {
        let y = vec![d1.pair(0, (seed % 3) as usize), d1.pair(0, 4 + (seed % 2) as usize)];
        let e = model_sparse_operator(seed, &d1, model.block_dim, 2, 6, false).scaled(0.1);
        let t = corner_fixture(&d1, &y, &e);
        let cs = corner_shift_similarity(&t, &d1, &y, &model, 1e-10).unwrap();
        inv_dev = inv_dev.max(cs.inverse_deviation.0).max(cs.inverse_deviation.1);
        corner = corner.max(cs.corner_residual);
        active += usize::from(!cs.active_window.is_empty());
    }
    outcome(
        inv_dev <= 1e-10 && corner <= 1e-10,
        format!(
            "G(A+P), (A+P)G max deviation {inv_dev:e}; corner vs L max deviation {corner:e}; \
             {active} of 10 fixtures with a non-trivial window"
        ),
    )
}

fn trace_analogue() -> Outcome {
    let mut witnesses: Vec<DenseWitness> = Vec::new();
    let mut g = rng(4242);
    for blocks in [2usize, 3] {
        let diag: Vec<DiagonalCommutator> = (0..blocks)
            .map(|_| DiagonalCommutator {
                a: random_matrix(&mut g, 8, 8),
                b: random_matrix(&mut g, 8, 8),
            })
            .collect();
        let n = 8 * blocks;
        let mut t = random_matrix(&mut g, n, n);
        for (i, w) in diag.iter().enumerate() {
            t.view_mut((8 * i, 8 * i), (8, 8)).copy_from(&dense_commutator(&w.a, &w.b));
        }
        witnesses.push(assemble_direct_sum(&diag, &t, PNorm::One, 1e-13).unwrap());
    }
    let mut pass = true;
    let mut worst = 0.0f64;
    for w in &witnesses {
        let v = commutator_trace_check(&w.x, &w.y);
        let scale = dense_norm(&w.x, PNorm::One) * dense_norm(&w.y, PNorm::One) * w.x.nrows() as f64;
        worst = worst.max(v.trace.abs() / scale);
        pass &= v.trace.abs() <= 1e-12 * scale;
    }
    let id = trace_obstruction(&DMatrix::identity(2, 2));
    pass &= id.obstructed;
    outcome(
        pass,
        format!(
            "{} finite witnesses, max |tr|/(|S||U|dim) = {worst:e}; identity obstructed",
            witnesses.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("shift identities", shift_identities),
        ("factorization exactness", factorization_exactness),
        ("series constant", series_constant),
        ("block selection", block_selection),
        ("compact pipeline", compact_pipeline),
        ("Sylvester solver", sylvester),
        ("2x2 shift-corner factorization", shift_corner),
        ("swap involution", involution),
        ("corner-shift similarity", corner_similarity),
        ("trace obstruction", trace_analogue),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("[{tag}] {:>2}. {name}: {}", i + 1, o.detail);
    }
    println!("acceptance: {} of 10 passed in {:.2?}", 10 - failed, start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
