//! Block-matrix constructions: the Sylvester pair behind direct sums of
//! commutators, direct-sum assembly, the 2×2 shift-corner factorization and
//! the finite trace obstruction.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::decomposition::{Decomposition, FiniteModel};
use crate::error::{Error, Result};
use crate::expr::{neumann_apply, BlockRange, OperatorExpr};
use crate::factorize::{CommutatorWitness, WitnessKind};
use crate::space::{expect_format, parse_value, PNorm};

/// Induced p-norm of a dense matrix (largest singular value at p = 2).
pub fn dense_norm(m: &DMatrix<f64>, p: PNorm) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    match p {
        PNorm::One => (0..m.ncols())
            .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        PNorm::Inf => (0..m.nrows())
            .map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        PNorm::Two => m.singular_values().max(),
    }
}

/// `XY − YX`
pub fn dense_commutator(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x * y - y * x
}

#[derive(Clone, Debug)]
pub struct SylvesterSolution {
    pub e1: DMatrix<f64>,
    pub e2: DMatrix<f64>,
    /// terms summed for `E₁` and `E₂`
    pub iters: (usize, usize),
    /// `‖E₁D₂ − (A₂+I)E₁ − B‖` and `‖E₂(A₂+I) − D₂E₂ − C‖`
    pub residuals: (f64, f64),
    /// certified bound `‖A₂‖ + ‖D₂‖` on both `F` and `G`
    pub theta: f64,
    /// geometric iteration bounds `⌈log(tol(1−θ)/‖rhs‖)/log θ⌉ + 1`
    pub iteration_bounds: (usize, usize),
}

fn iteration_bound(theta: f64, tol: f64, rhs: f64) -> usize {
    if rhs == 0.0 || theta == 0.0 {
        return 1;
    }
    let k = ((tol * (1.0 - theta) / rhs).ln() / theta.ln()).ceil();
    k.max(0.0) as usize + 1
}

/// Solves `B = E₁D₂ − (A₂+I)E₁` and `C = E₂(A₂+I) − D₂E₂` by Neumann series
/// for `F(S) = −A₂S + SD₂` and `G(S) = −SA₂ + D₂S`.
pub fn sylvester_neumann(
    a2: &DMatrix<f64>,
    d2: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: PNorm,
    tol: f64,
    max_iter: usize,
) -> Result<SylvesterSolution> {
    const STAGE: &str = "sylvester_neumann";
    check_sylvester_shapes(a2, d2, b, c)?;
    let na = dense_norm(a2, p);
    let nd = dense_norm(d2, p);
    if na >= 0.25 || nd >= 0.25 {
        return Err(Error::precondition(
            STAGE,
            format!("need max(|A2|, |D2|) < 1/4 at p = {p}, measured |A2| = {na:.6}, |D2| = {nd:.6}"),
        ));
    }
    let theta = na + nd;
    let f = |s: &DMatrix<f64>| -(a2 * s) + s * d2;
    let g = |s: &DMatrix<f64>| -(s * a2) + d2 * s;
    let neg_b = -b;
    let nb = dense_norm(b, p);
    let nc = dense_norm(c, p);
    let r1 = neumann_apply(f, &neg_b, nb, theta, tol, max_iter)?;
    let r2 = neumann_apply(g, c, nc, theta, tol, max_iter)?;
    if !r1.converged || !r2.converged {
        return Err(Error::NotConverged {
            stage: STAGE.into(),
            achieved: r1.residual_bound.max(r2.residual_bound),
        });
    }
    let id = DMatrix::<f64>::identity(a2.nrows(), a2.ncols());
    let a2i = a2 + &id;
    let res1 = dense_norm(&(&r1.value * d2 - &a2i * &r1.value - b), p);
    let res2 = dense_norm(&(&r2.value * &a2i - d2 * &r2.value - c), p);
    Ok(SylvesterSolution {
        e1: r1.value,
        e2: r2.value,
        iters: (r1.iters, r2.iters),
        residuals: (res1, res2),
        theta,
        iteration_bounds: (iteration_bound(theta, tol, nb), iteration_bound(theta, tol, nc)),
    })
}

fn check_sylvester_shapes(a2: &DMatrix<f64>, d2: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<()> {
    let (n, m) = (a2.nrows(), d2.nrows());
    if !a2.is_square() || !d2.is_square() || b.shape() != (n, m) || c.shape() != (m, n) {
        return Err(Error::InvalidInput(format!(
            "Sylvester shapes: A2 {:?}, D2 {:?}, B {:?}, C {:?}",
            a2.shape(),
            d2.shape(),
            b.shape(),
            c.shape()
        )));
    }
    Ok(())
}

/// Solves both Sylvester equations directly by vectorizing each into an
/// `nm × nm` linear system.
pub fn sylvester_dense_oracle(
    a2: &DMatrix<f64>,
    d2: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_sylvester_shapes(a2, d2, b, c)?;
    let (n, m) = (a2.nrows(), d2.nrows());
    let a2i = a2 + DMatrix::<f64>::identity(n, n);
    let (in_, im) = (DMatrix::<f64>::identity(n, n), DMatrix::<f64>::identity(m, m));
    // vec(AXB) = (Bᵀ ⊗ A) vec(X), column-major
    let k1 = d2.transpose().kronecker(&in_) - im.kronecker(&a2i);
    let k2 = a2i.transpose().kronecker(&im) - in_.kronecker(d2);
    let solve = |k: DMatrix<f64>, rhs: &DMatrix<f64>, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let v = DVector::from_column_slice(rhs.as_slice());
        let lu = k.lu();
        let x = lu.solve(&v).ok_or_else(|| Error::Singular {
            stage: "sylvester_dense_oracle".into(),
            message: "vectorized system is singular".into(),
        })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular {
                stage: "sylvester_dense_oracle".into(),
                message: "vectorized system is numerically singular".into(),
            });
        }
        Ok(DMatrix::from_column_slice(rows, cols, x.as_slice()))
    };
    Ok((solve(k1, b, n, m)?, solve(k2, c, m, n)?))
}

/// A finite commutator witness `T = XY − YX`.
#[derive(Clone, Debug)]
pub struct DenseWitness {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub target: DMatrix<f64>,
    /// `max |([X, Y] − T)_{ij}|`
    pub residual: f64,
    pub trace: TraceVerdict,
}

impl DenseWitness {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, target: DMatrix<f64>) -> Self {
        let comm = dense_commutator(&x, &y);
        let residual = (&comm - &target).amax();
        let trace = commutator_trace_check(&x, &y);
        DenseWitness {
            x,
            y,
            target,
            residual,
            trace,
        }
    }
}

/// Trace of a matrix measured against `tol · scale · dim`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceVerdict {
    pub trace: f64,
    pub threshold: f64,
    pub obstructed: bool,
}

const TRACE_TOL: f64 = 1e-12;

/// Finite analogue of the fact that the identity is not a commutator: a
/// matrix with `|tr T| > tol·‖T‖₁·dim` is not of the form `XY − YX`.
pub fn trace_obstruction(t: &DMatrix<f64>) -> TraceVerdict {
    let threshold = TRACE_TOL * dense_norm(t, PNorm::One) * t.nrows() as f64;
    let trace = t.trace();
    TraceVerdict {
        trace,
        threshold,
        obstructed: trace.abs() > threshold,
    }
}

/// `|tr [X, Y]|` against `tol·‖X‖₁‖Y‖₁·dim`.
pub fn commutator_trace_check(x: &DMatrix<f64>, y: &DMatrix<f64>) -> TraceVerdict {
    let trace = dense_commutator(x, y).trace();
    let threshold = TRACE_TOL * dense_norm(x, PNorm::One) * dense_norm(y, PNorm::One) * x.nrows() as f64;
    TraceVerdict {
        trace,
        threshold,
        obstructed: trace.abs() > threshold,
    }
}

/// One diagonal block `T_ii = [A_i, B_i]` of a direct sum.
#[derive(Clone, Debug)]
pub struct DiagonalCommutator {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Assembles a witness for `target` on `X₁ ⊕ … ⊕ X_n` (block sizes from the
/// diagonal witnesses) from commutator witnesses of its diagonal blocks,
/// pairing the first block against the sum of the rest.
pub fn assemble_direct_sum(
    diag: &[DiagonalCommutator],
    target: &DMatrix<f64>,
    p: PNorm,
    tol: f64,
) -> Result<DenseWitness> {
    const STAGE: &str = "assemble_direct_sum";
    let sizes: Vec<usize> = diag.iter().map(|w| w.a.nrows()).collect();
    let n: usize = sizes.iter().sum();
    if diag.is_empty() || target.shape() != (n, n) {
        return Err(Error::InvalidInput(format!(
            "target is {:?} but diagonal blocks sum to {n}",
            target.shape()
        )));
    }
    let mut offset = 0;
    for (i, w) in diag.iter().enumerate() {
        let s = sizes[i];
        if w.a.shape() != (s, s) || w.b.shape() != (s, s) {
            return Err(Error::InvalidInput(format!("diagonal witness {i} is not square")));
        }
        let block = target.view((offset, offset), (s, s));
        let dev = (dense_commutator(&w.a, &w.b) - block).amax();
        let scale = 1.0 + block.amax();
        if dev > 1e-9 * scale {
            return Err(Error::precondition(
                STAGE,
                format!("diagonal block {i} differs from [A, B] by {dev:e}"),
            ));
        }
        offset += s;
    }
    let (x, y) = assemble_rec(diag, target, p, tol)?;
    Ok(DenseWitness::new(x, y, target.clone()))
}

fn assemble_rec(
    diag: &[DiagonalCommutator],
    target: &DMatrix<f64>,
    p: PNorm,
    tol: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if diag.len() == 1 {
        return Ok((diag[0].a.clone(), diag[0].b.clone()));
    }
    let s = diag[0].a.nrows();
    let n = target.nrows();
    let rest = target.view((s, s), (n - s, n - s)).into_owned();
    let (d1, d2) = assemble_rec(&diag[1..], &rest, p, tol)?;
    let (mut a1, mut a2) = (diag[0].a.clone(), diag[0].b.clone());
    let (mut d1, mut d2) = (d1, d2);
    let big = dense_norm(&a2, p).max(dense_norm(&d2, p));
    if big >= 0.25 {
        let beta = 1.0 / (5.0 * big);
        a2 *= beta;
        a1 /= beta;
        d2 *= beta;
        d1 /= beta;
    }
    let b = target.view((0, s), (s, n - s)).into_owned();
    let c = target.view((s, 0), (n - s, s)).into_owned();
    let sol = sylvester_neumann(&a2, &d2, &b, &c, p, tol, 10_000).map_err(|e| e.with_stage("assemble_direct_sum"))?;
    let mut x = DMatrix::zeros(n, n);
    x.view_mut((0, 0), (s, s)).copy_from(&a1);
    x.view_mut((0, s), (s, n - s)).copy_from(&sol.e1);
    x.view_mut((s, 0), (n - s, s)).copy_from(&sol.e2);
    x.view_mut((s, s), (n - s, n - s)).copy_from(&d1);
    let mut y = DMatrix::zeros(n, n);
    y.view_mut((0, 0), (s, s))
        .copy_from(&(&a2 + DMatrix::<f64>::identity(s, s)));
    y.view_mut((s, s), (n - s, n - s)).copy_from(&d2);
    Ok((x, y))
}

/// Dense `[[A, B], [C, D]]` over a finite model.
#[derive(Clone, Debug, PartialEq)]
pub struct Block2x2 {
    pub model: FiniteModel,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl Block2x2 {
    pub fn new(model: FiniteModel, a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = model.dim();
        for (name, m) in [("A", &a), ("B", &b), ("C", &c), ("D", &d)] {
            if m.shape() != (n, n) {
                return Err(Error::InvalidInput(format!(
                    "block {name} is {:?}, model needs {n}x{n}",
                    m.shape()
                )));
            }
        }
        Ok(Block2x2 { model, a, b, c, d })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.model.dim();
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.a);
        m.view_mut((0, n), (n, n)).copy_from(&self.b);
        m.view_mut((n, 0), (n, n)).copy_from(&self.c);
        m.view_mut((n, n), (n, n)).copy_from(&self.d);
        m
    }

    pub fn from_dense(model: FiniteModel, m: &DMatrix<f64>) -> Result<Self> {
        let n = model.dim();
        if m.shape() != (2 * n, 2 * n) {
            return Err(Error::InvalidInput("dense matrix does not match the model".into()));
        }
        Self::new(
            model,
            m.view((0, 0), (n, n)).into_owned(),
            m.view((0, n), (n, n)).into_owned(),
            m.view((n, 0), (n, n)).into_owned(),
            m.view((n, n), (n, n)).into_owned(),
        )
    }

    pub fn apply(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.a * x1 + &self.b * x2, &self.c * x1 + &self.d * x2)
    }

    pub fn mul(&self, o: &Block2x2) -> Block2x2 {
        Block2x2 {
            model: self.model,
            a: &self.a * &o.a + &self.b * &o.c,
            b: &self.a * &o.b + &self.b * &o.d,
            c: &self.c * &o.a + &self.d * &o.c,
            d: &self.c * &o.b + &self.d * &o.d,
        }
    }

    pub fn to_json(&self) -> Value {
        let rows = |m: &DMatrix<f64>| -> Value {
            Value::Array(
                (0..m.nrows())
                    .map(|r| Value::Array(m.row(r).iter().map(|&v| json!(v)).collect()))
                    .collect(),
            )
        };
        json!({
            "format": "block2x2/v1",
            "model": self.model.to_json(),
            "A": rows(&self.a),
            "B": rows(&self.b),
            "C": rows(&self.c),
            "D": rows(&self.d),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "block2x2/v1")?;
        let model = FiniteModel::from_json(v.get("model").unwrap_or(&Value::Null))?;
        let n = model.dim();
        let block = |key: &str| -> Result<DMatrix<f64>> {
            let rows = v
                .get(key)
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Parse(format!("block2x2 needs `{key}` rows")))?;
            if rows.len() != n {
                return Err(Error::Parse(format!("block {key} has {} rows, expected {n}", rows.len())));
            }
            let mut m = DMatrix::zeros(n, n);
            for (r, row) in rows.iter().enumerate() {
                let row = row
                    .as_array()
                    .filter(|row| row.len() == n)
                    .ok_or_else(|| Error::Parse(format!("block {key} row {r} must have {n} entries")))?;
                for (c, x) in row.iter().enumerate() {
                    m[(r, c)] = parse_value(x)?;
                }
            }
            Ok(m)
        };
        Self::new(model, block("A")?, block("B")?, block("C")?, block("D")?)
            .map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Number of Neumann terms kept in the shift-corner construction.
pub const CORNER_NEUMANN_TERMS: usize = 4;

/// Length of the longest shift word in the shift-corner witness.
pub fn corner_depth() -> usize {
    CORNER_NEUMANN_TERMS + 3
}

#[derive(Clone, Debug)]
pub struct ShiftCornerOutcome {
    pub witness: CommutatorWitness,
    /// scaling of the `A` factor; `2α‖R‖ < 1`
    pub alpha: f64,
    pub neumann_terms: usize,
    pub required_blocks: usize,
    /// encoded columns of the in-margin probe window
    pub window: Vec<usize>,
}

impl ShiftCornerOutcome {
    pub fn report(&self) -> Value {
        json!({
            "alpha": self.alpha,
            "neumann_terms": self.neumann_terms,
            "required_blocks": self.required_blocks,
            "window_columns": self.window.len(),
            "residual_cert": self.witness.residual_cert,
            "max_residual": self.witness.max_residual,
        })
    }
}

fn top_of(e: &OperatorExpr, d: &Decomposition) -> usize {
    let r = e.row_blocks(d).union(e.col_blocks(d));
    match r {
        BlockRange::Range { hi: Some(h), .. } => h,
        _ => 0,
    }
}

/// Encoded columns `2k, 2k+1` for the model coordinates in blocks `≤ top`.
pub fn pair_window(model: &FiniteModel, d: &Decomposition, top: usize) -> Vec<usize> {
    let mut cols = Vec::new();
    for b in 0..=top.min(model.blocks - 1) {
        for j in 0..model.block_dim {
            let g = d.pair(b, j);
            cols.push(2 * g);
            cols.push(2 * g + 1);
        }
    }
    cols.sort_unstable();
    cols
}

/// Witness `(X, Y)` for `[[T₁, L], [T₂, T₃]]` on `𝒳 ⊕ 𝒳`.
///
/// `G = −P₀MR + R(P₀MP₀)_D` with `M = T₁ + T₃` conjugates the target to one
/// whose diagonal sum `W = (I − P₀)M` equals `[L₁, B₀]` over the interleaved
/// decomposition `D₁`; then `A = αL₁`, `B = B₀/α` and `T₀` is the Neumann sum
/// for `(I − R D_A)T₀ = R(T₃B − T₂)`. The construction runs on the exact
/// backend; `model` fixes the in-margin probe window.
pub fn shift_corner_factor(
    t1: &OperatorExpr,
    t2: &OperatorExpr,
    t3: &OperatorExpr,
    model: &FiniteModel,
    d: &Decomposition,
    tol: f64,
) -> Result<ShiftCornerOutcome> {
    const STAGE: &str = "shift_corner_factor";
    let depth = corner_depth();
    let top = [t1, t2, t3].iter().map(|t| top_of(t, d)).max().unwrap_or(0);
    let required_blocks = top + depth + 1;
    if model.blocks < required_blocks {
        return Err(Error::Margin {
            stage: STAGE.into(),
            required_blocks,
            message: format!(
                "inputs reach block {top} and the witness uses shift words of length {depth}; \
                 the model has {} blocks",
                model.blocks
            ),
        });
    }
    let l = OperatorExpr::left_shift(d);
    let r = OperatorExpr::right_shift(d);
    let id = OperatorExpr::identity();
    let zero = OperatorExpr::zero();
    let target = OperatorExpr::block2x2(t1, &l, t2, t3);
    let m = t1.plus(t3);
    let trivial = t1.is_structurally_zero() && t3.is_structurally_zero();

    let (g, tt1, tt2, tt3, a, b, alpha, k_terms, cert) = if trivial {
        // A = B = 0 and T₀ = −R T₂ solve the identity exactly
        let t0_rhs = OperatorExpr::compose(&r, t2).neg();
        (None, t1.clone(), t2.clone(), t3.clone(), zero.clone(), zero.clone(), 0.0, 1, t0_rhs)
    } else {
        let p0 = OperatorExpr::proj(d, 0);
        let corner = OperatorExpr::chain(&[p0.clone(), m.clone(), p0.clone()]);
        let corner_d = OperatorExpr::shift_series(d, &corner).map_err(|e| e.with_stage(STAGE))?;
        let g = OperatorExpr::chain(&[p0.clone(), m.clone(), r.clone()])
            .neg()
            .plus(&OperatorExpr::compose(&r, &corner_d));
        let tt1 = t1.minus(&OperatorExpr::compose(&l, &g));
        let tt3 = t3.plus(&OperatorExpr::compose(&g, &l));
        let tt2 = OperatorExpr::add(vec![
            OperatorExpr::compose(&g, t1),
            t2.clone(),
            OperatorExpr::chain(&[g.clone(), l.clone(), g.clone()]).neg(),
            OperatorExpr::compose(t3, &g).neg(),
        ]);
        let d1 = d.interleave();
        let l1 = OperatorExpr::left_shift(&d1);
        let r1 = OperatorExpr::right_shift(&d1);
        let q0 = OperatorExpr::proj(&d1, 0);
        let w = tt1.plus(&tt3);
        let wc = OperatorExpr::chain(&[q0.clone(), w.clone(), q0.clone()]);
        let wc_d = OperatorExpr::shift_series(&d1, &wc).map_err(|e| e.with_stage(STAGE))?;
        let b0 = OperatorExpr::chain(&[q0.clone(), w.clone(), r1.clone()])
            .neg()
            .plus(&OperatorExpr::compose(&r1, &wc_d));
        let nb0 = b0.norm_bound(PNorm::One);
        let nt3 = tt3.norm_bound(PNorm::One);
        let nt2 = tt2.norm_bound(PNorm::One);
        if !(nb0.is_finite() && nt3.is_finite() && nt2.is_finite()) {
            return Err(Error::precondition(STAGE, "no finite norm certificate for the blocks"));
        }
        // remainder of K terms: (2α)^{K+1} ‖T₃B − T₂‖ ≤ (2α)^{K+1} (‖T₃‖‖B₀‖/α + ‖T₂‖)
        let k = CORNER_NEUMANN_TERMS;
        let remainder = |alpha: f64| {
            (2.0 * alpha).powi(k as i32 + 1) * (nt3 * nb0 / alpha + nt2)
        };
        let mut alpha = 0.25;
        while remainder(alpha) > 0.01 * tol {
            alpha /= 2.0;
            if alpha < 1e-30 {
                return Err(Error::NotConverged {
                    stage: STAGE.into(),
                    achieved: remainder(alpha),
                });
            }
        }
        let a = OperatorExpr::scale(alpha, &l1);
        let b = OperatorExpr::scale(1.0 / alpha, &b0);
        let rhs = OperatorExpr::compose(&r, &OperatorExpr::compose(&tt3, &b).minus(&tt2));
        (Some(g), tt1, tt2, tt3, a, b, alpha, k, rhs)
    };

    // T₀ = Σ_k (R D_A)^k R(T₃B − T₂)
    let t0 = if trivial {
        cert.clone()
    } else {
        let map = |z: &OperatorExpr| OperatorExpr::compose(&r, &OperatorExpr::commutator(&a, z));
        // Z₀ … Z_K, a fixed number of terms
        let res = neumann_apply(map, &cert, 1.0, 2.0 * alpha, 0.0, k_terms + 1)?;
        res.value
    };
    let residual_cert = if trivial {
        0.0
    } else {
        let f_norm = tt3.norm_bound(PNorm::One) * b.norm_bound(PNorm::One) + tt2.norm_bound(PNorm::One);
        (2.0 * alpha).powi(k_terms as i32 + 1) * f_norm
    };
    let _ = tt1;
    let xt = OperatorExpr::block2x2(&a, &zero, &tt3, &a.minus(&l));
    let yt = OperatorExpr::block2x2(&b, &id, &t0, &zero);
    let (x, y) = match g {
        Some(g) => {
            let q = OperatorExpr::block2x2(&id, &zero, &g, &id);
            let qinv = OperatorExpr::block2x2(&id, &zero, &g.neg(), &id);
            (
                OperatorExpr::chain(&[qinv.clone(), xt, q.clone()]),
                OperatorExpr::chain(&[qinv, yt, q]),
            )
        }
        None => (xt, yt),
    };
    let kind = if residual_cert == 0.0 {
        WitnessKind::Exact
    } else {
        WitnessKind::CertifiedApprox
    };
    let mut witness = CommutatorWitness::new(x, y, target, kind, residual_cert);
    let margin = model
        .margin_block(depth)
        .expect("margin checked against required blocks");
    let window = pair_window(model, d, margin);
    witness.verify(window.iter().copied());
    if witness.max_residual > tol + residual_cert {
        return Err(Error::NotConverged {
            stage: STAGE.into(),
            achieved: witness.max_residual,
        });
    }
    Ok(ShiftCornerOutcome {
        witness,
        alpha,
        neumann_terms: k_terms,
        required_blocks,
        window,
    })
}
