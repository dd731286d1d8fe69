use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use commutant_bench::{corner_blocks, decay_fixture};
use commutant_core::probe::block_sparse_operator;
use commutant_core::{
    compact_factor, easy_factor, shift_corner_factor, verify_shift_identities, Decomposition, EasyVariant,
    FiniteModel, OperatorExpr, PNorm,
};

fn identities(c: &mut Criterion) {
    let d = Decomposition::dyadic();
    c.bench_function("verify_shift_identities/64", |b| {
        b.iter(|| verify_shift_identities(black_box(&d), 64, 16, 0))
    });
}

fn easy(c: &mut Criterion) {
    let d = Decomposition::dyadic();
    let t = OperatorExpr::sparse(block_sparse_operator(0, &d, 2, 256, 40, false));
    c.bench_function("easy_factor/verify-256", |b| {
        b.iter(|| {
            let mut w = easy_factor(&t, &d, EasyVariant::Right).unwrap();
            w.verify(0..256)
        })
    });
}

fn compact(c: &mut Criterion) {
    let t = decay_fixture();
    c.bench_function("compact_factor/p1", |b| {
        b.iter(|| compact_factor(black_box(&t), PNorm::One, 0.01, 256).unwrap())
    });
}

fn shift_corner(c: &mut Criterion) {
    let d = Decomposition::dyadic();
    let model = FiniteModel::new(12, 2).unwrap();
    let [t1, t2, t3] = corner_blocks(7, &d);
    c.bench_function("shift_corner_factor/B12", |b| {
        b.iter(|| shift_corner_factor(&t1, &t2, &t3, &model, &d, 1e-8).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = identities, easy, compact, shift_corner
}
criterion_main!(benches);
