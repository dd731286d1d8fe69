use commutant_bench::{corner_blocks, decay_fixture};
use commutant_core::{Decomposition, PNorm};

#[test]
fn decay_fixture_columns_shrink_geometrically() {
    let t = decay_fixture();
    for j in 0..16 {
        assert!(t.column(j).norm(PNorm::One) <= 0.5f64.powi(j as i32));
    }
}

#[test]
fn corner_blocks_are_deterministic() {
    let d = Decomposition::dyadic();
    let a = corner_blocks(3, &d);
    let b = corner_blocks(3, &d);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_json(), y.to_json());
    }
}
