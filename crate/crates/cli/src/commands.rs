use std::path::{Path, PathBuf};
use std::time::Instant;

use commutant_core::matrix2x2::{corner_depth, dense_norm};
use commutant_core::nalgebra::DMatrix;
use commutant_core::probe::{
    block_sparse_operator, compactlike_operator, model_sparse_operator, permutation_operator,
    random_dense, random_probes,
};
use commutant_core::similarity::{
    corner_fixture, model_columns, pairing_swap, CORNER_SIMILARITY_DEPTH,
};
use commutant_core::{
    assemble_direct_sum, coarsen_and_factor, compact_factor, compact_side_factor, corner_factor,
    corner_shift_similarity, easy_factor, ell1_main_pipeline, shift_corner_factor, swap_involution,
    sylvester_dense_oracle, sylvester_neumann, trace_obstruction, verify_shift_identities,
    Certificate, CommutatorWitness, CompactSide, CornerSide, Decomposition, DiagonalCommutator,
    EasyVariant, Error, FiniteModel, OperatorExpr, PNorm, SeqVector, SparseOperator,
};
use serde_json::{json, Value};

use crate::report::{read_json, write_json, CliError, CliResult, RunReport};
use crate::{DemoName, GenKind, Method, OracleName};

fn load_decomp(arg: &str, report: &mut RunReport) -> CliResult<Decomposition> {
    match arg {
        "dyadic" | "cantor" => Ok(Decomposition::from_scheme(arg)?),
        path => {
            let v = read_json(Path::new(path), report)?;
            Ok(Decomposition::from_json(&v)?)
        }
    }
}

fn load_op(path: &Path, report: &mut RunReport) -> CliResult<SparseOperator> {
    let v = read_json(path, report)?;
    Ok(SparseOperator::from_json(&v)?)
}

/// Prints the summary, writes the report file and maps a failed verdict to
/// exit code 1.
fn finish(title: &str, report: &RunReport, path: Option<&Path>, start: Instant) -> CliResult<()> {
    println!("{title}");
    report.print_summary();
    println!("elapsed: {:.3} s", start.elapsed().as_secs_f64());
    if let Some(p) = path {
        write_json(p, &report.to_json())?;
    }
    if report.verdict == "fail" {
        return Err(CliError::Verification(format!(
            "max residual {:e} exceeds {:e}",
            report.max_residual(),
            report.tolerance
        )));
    }
    Ok(())
}

fn column_residuals<I: IntoIterator<Item = usize>>(
    w: &mut CommutatorWitness,
    cols: I,
) -> Vec<(usize, f64)> {
    let table: Vec<(usize, f64)> = cols
        .into_iter()
        .map(|k| (k, w.residual_vector(&SeqVector::unit(k)).norm(PNorm::Inf)))
        .collect();
    w.probes_checked = table.len();
    w.max_residual = table.iter().map(|r| r.1).fold(0.0, f64::max);
    table
}

pub fn verify_identities(
    argv: Vec<String>,
    decomp: &str,
    probes: usize,
    nmax: usize,
    seed: u64,
    report_path: Option<&Path>,
) -> CliResult<()> {
    let start = Instant::now();
    let mut report = RunReport::new(argv);
    let d = load_decomp(decomp, &mut report)?;
    let rep = verify_shift_identities(&d, probes, nmax, seed);
    report.stage(
        "verify_shift_identities",
        serde_json::to_value(&rep).expect("report serializes"),
    );
    report.tolerance = 0.0;
    report.verdict = if rep.passed() { "pass" } else { "fail" }.into();
    let max_dev = rep
        .lr_identity
        .max(rep.rl_identity)
        .max(rep.right_intertwining)
        .max(rep.left_intertwining);
    let title = format!(
        "verify-identities: {} decomposition, {} probes, n <= {nmax}, max deviation {max_dev:e}, power ratio {:.3} (bound {})",
        d.scheme_name(),
        rep.probes,
        rep.left_power_ratio.max(rep.right_power_ratio),
        rep.power_bound
    );
    finish(&title, &report, report_path, start)?;
    if !rep.passed() {
        return Err(CliError::Verification(rep.failures.join("; ")));
    }
    Ok(())
}

pub struct FactorArgs {
    pub argv: Vec<String>,
    pub op: PathBuf,
    pub decomp: String,
    pub method: Method,
    pub side: Option<String>,
    pub eps: f64,
    pub tol: f64,
    pub p: String,
    pub probes: usize,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

fn bad_side(method: &str, side: &str, allowed: &str) -> CliError {
    CliError::Usage(format!(
        "--side {side} is not valid for {method}; use {allowed}"
    ))
}

pub fn factor(a: FactorArgs) -> CliResult<()> {
    let start = Instant::now();
    let mut report = RunReport::new(a.argv);
    let t = load_op(&a.op, &mut report)?;
    let d = load_decomp(&a.decomp, &mut report)?;
    let p = PNorm::parse(&a.p)?;
    let te = OperatorExpr::sparse(t.clone());
    let side = a.side.as_deref();
    let mut witness = match a.method {
        Method::Easy => {
            let variant = match side.unwrap_or("right") {
                "left" => EasyVariant::Left,
                "right" => EasyVariant::Right,
                s => return Err(bad_side("easy", s, "left or right")),
            };
            let w = easy_factor(&te, &d, variant)?;
            report.stage("easy_factor", json!({"variant": format!("{variant:?}")}));
            w
        }
        Method::Coarsen => {
            let out = coarsen_and_factor(&t, &d, p, a.eps, a.probes)?;
            report.stage("coarsen_and_factor", out.report());
            out.witness
        }
        Method::Compact => {
            let out = compact_factor(&t, p, a.eps, a.probes)?;
            report.stage(
                "compact_factor",
                json!({
                    "case": format!("{:?}", out.case),
                    "block_norms": out.block_norms,
                    "block_norms_ok": out.block_norms_ok(),
                    "small_norm_bases": out.bases.len(),
                    "coarsen": out.coarsen.report(),
                }),
            );
            if !out.block_norms_ok() {
                return Err(CliError::Verification(
                    "a block norm reached its limit eps/2^i".into(),
                ));
            }
            out.coarsen.witness
        }
        Method::Corner => {
            let cs = match side.unwrap_or("left") {
                "left" => CornerSide::Left,
                "right" => CornerSide::Right,
                s => return Err(bad_side("corner", s, "left or right")),
            };
            let w = corner_factor(&te, &d, cs)?;
            report.stage("corner_factor", json!({"side": format!("{cs:?}")}));
            w
        }
        Method::Side => {
            let cs = match side.unwrap_or("tp") {
                "tp" => CompactSide::TP,
                "pt" => CompactSide::PT,
                s => return Err(bad_side("side", s, "tp or pt")),
            };
            let w = compact_side_factor(&te, &d, cs)?;
            report.stage("compact_side_factor", json!({"side": format!("{cs:?}")}));
            w
        }
    };
    report.residuals = column_residuals(&mut witness, 0..a.probes);
    report.judge(a.tol);
    if let Some(out) = &a.out {
        write_json(out, &witness.to_json())?;
    }
    let title = format!(
        "factor: method {:?}, {} nonzeros, witness {:?}, |S| <= {:.4}, |U| <= {:.4}",
        a.method,
        t.nnz(),
        witness.kind,
        witness.norm_s,
        witness.norm_u
    );
    finish(&title, &report, a.report.as_deref(), start)
}

#[allow(clippy::too_many_arguments)]
pub fn demo(
    argv: Vec<String>,
    name: DemoName,
    blocks: usize,
    block_dim: usize,
    seed: u64,
    tol: f64,
    out: Option<&Path>,
    report_path: Option<&Path>,
) -> CliResult<()> {
    let start = Instant::now();
    let mut report = RunReport::new(argv);
    let d = Decomposition::dyadic();
    let title = match name {
        DemoName::Diagcomm => {
            let model = FiniteModel::new(blocks, block_dim)?;
            let t = |k: u64| {
                OperatorExpr::sparse(
                    model_sparse_operator(3 * seed + k, &d, block_dim, 2, 6, false).scaled(0.2),
                )
            };
            let (t1, t2, t3) = (t(0), t(1), t(2));
            let mut sc = shift_corner_factor(&t1, &t2, &t3, &model, &d, tol)?;
            report.stage("shift_corner_factor", sc.report());
            report.residuals = column_residuals(&mut sc.witness, sc.window.iter().copied());
            if let Some(o) = out {
                write_json(o, &sc.witness.to_json())?;
            }
            format!(
                "demo diagcomm: B = {blocks}, s = {block_dim}, seed {seed}, alpha {}, {} in-margin columns",
                sc.alpha,
                sc.window.len()
            )
        }
        DemoName::Mainaux => {
            let model = FiniteModel::new(blocks, block_dim)?;
            let y = vec![d.pair(0, 2), d.pair(0, 5)];
            let e = model_sparse_operator(seed, &d, block_dim, 2, 6, false).scaled(0.1);
            let t = corner_fixture(&d, &y, &e);
            let cs = corner_shift_similarity(&t, &d, &y, &model, tol)?;
            report.stage("corner_shift_similarity", cs.report());
            // both one-sided inverse identities of G, column by column
            report.residuals = cs
                .probe_columns
                .iter()
                .map(|&k| {
                    let x = SeqVector::unit(k);
                    let r1 = cs.g.apply(&cs.g_inv.apply(&x)).max_abs_diff(&x);
                    let r2 = cs.g_inv.apply(&cs.g.apply(&x)).max_abs_diff(&x);
                    (k, r1.max(r2))
                })
                .collect();
            if let Some(o) = out {
                write_json(o, &cs.chain.to_json())?;
            }
            if cs.corner_residual > tol {
                report.judge(tol);
                report.verdict = "fail".into();
                finish("demo mainaux", &report, report_path, start)?;
                return Err(CliError::Verification(format!(
                    "corner differs from the shift by {:e}",
                    cs.corner_residual
                )));
            }
            format!(
                "demo mainaux: permutation fixture, seed {seed}, corner equals L_D1 to {:e}, {} active coordinates",
                cs.corner_residual,
                cs.active_window.len()
            )
        }
        DemoName::Ell1Pipeline => {
            let model = FiniteModel::new(blocks, block_dim)?;
            let y = vec![d.pair(0, 2), d.pair(0, 5)];
            let e = model_sparse_operator(seed, &d, block_dim, 2, 6, false).scaled(0.1);
            let (p, v, vp) = pairing_swap(&d);
            let inv = swap_involution(&p, &v, &vp, &random_probes(seed, 16, 64, 4, true))?;
            // S is an involution, so S T S is the corner fixture
            let t = inv.conjugate(&corner_fixture(&d, &y, &e));
            let cert = Certificate::NonCompact {
                lambda: 0.5,
                p: d.clone(),
                v,
                vp,
                y: Some(y),
                theta: 0.1,
            };
            report.certificates = Some(cert.to_json());
            let mut out_p = ell1_main_pipeline(&t, &model, &cert, tol)?;
            for (name, s) in &out_p.stages {
                report.stage(name, s.clone());
            }
            let top = model
                .margin_block(corner_depth() + CORNER_SIMILARITY_DEPTH)
                .unwrap_or(0);
            report.residuals = column_residuals(&mut out_p.witness, model_columns(&model, &d, top));
            if let Some(o) = out {
                write_json(o, &out_p.witness.to_json())?;
            }
            format!("demo ell1-pipeline: route {}, seed {seed}", out_p.route)
        }
        DemoName::DirectSum => {
            let n = block_dim.max(1);
            let diag: Vec<DiagonalCommutator> = (0..blocks.max(1) as u64)
                .map(|i| DiagonalCommutator {
                    a: random_dense(seed.wrapping_mul(1000) + 2 * i, n, n),
                    b: random_dense(seed.wrapping_mul(1000) + 2 * i + 1, n, n),
                })
                .collect();
            let total = n * diag.len();
            let mut target = random_dense(seed.wrapping_mul(1000) + 999, total, total);
            for (i, w) in diag.iter().enumerate() {
                target
                    .view_mut((n * i, n * i), (n, n))
                    .copy_from(&(&w.a * &w.b - &w.b * &w.a));
            }
            let w = assemble_direct_sum(&diag, &target, PNorm::One, 1e-14)?;
            let comm = &w.x * &w.y - &w.y * &w.x - &w.target;
            report.residuals = (0..total).map(|j| (j, comm.column(j).amax())).collect();
            report.stage(
                "assemble_direct_sum",
                json!({
                    "dim": total,
                    "norm_x": dense_norm(&w.x, PNorm::One),
                    "norm_y": dense_norm(&w.y, PNorm::One),
                    "trace": w.trace,
                }),
            );
            if let Some(o) = out {
                write_json(
                    o,
                    &json!({
                        "format": "dense-witness/v1",
                        "X": rows(&w.x),
                        "Y": rows(&w.y),
                        "target": rows(&w.target),
                    }),
                )?;
            }
            format!(
                "demo direct-sum: {} summands of size {n}, seed {seed}",
                diag.len()
            )
        }
    };
    report.judge(tol);
    finish(&title, &report, report_path, start)
}

fn rows(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect::<Vec<f64>>())
        .collect::<Vec<_>>())
}

fn parse_rows(v: &Value, key: &str) -> CliResult<DMatrix<f64>> {
    let bad = || {
        CliError::Core(Error::Parse(format!(
            "`{key}` must be a non-empty array of equal-length rows"
        )))
    };
    let rows = v.get(key).and_then(Value::as_array).ok_or_else(bad)?;
    let mut data = Vec::new();
    let mut width = None;
    for r in rows {
        let r = r.as_array().ok_or_else(bad)?;
        if *width.get_or_insert(r.len()) != r.len() {
            return Err(bad());
        }
        for x in r {
            data.push(x.as_f64().filter(|x| x.is_finite()).ok_or_else(bad)?);
        }
    }
    match width {
        Some(w) if w > 0 => Ok(DMatrix::from_row_slice(rows.len(), w, &data)),
        _ => Err(bad()),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gen(
    kind: GenKind,
    seed: u64,
    decay: f64,
    support: usize,
    nnz: usize,
    integer: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    let t = match kind {
        GenKind::Compactlike => compactlike_operator(seed, decay, support),
        GenKind::Blocksparse => {
            block_sparse_operator(seed, &Decomposition::dyadic(), 2, support, nnz, integer)
        }
        GenKind::Permutation => permutation_operator(seed, support),
    };
    let v = t.to_json();
    match out {
        Some(p) => {
            write_json(p, &v)?;
            println!(
                "gen: {kind:?} seed {seed}, {} nonzeros written to {}",
                t.nnz(),
                p.display()
            );
        }
        None => println!(
            "{}",
            serde_json::to_string_pretty(&v).expect("json values serialize")
        ),
    }
    Ok(())
}

/// `Σ_n Rⁿ T Lⁿ x` summed until `Lⁿ x` vanishes.
fn direct_series(d: &Decomposition, t: &SparseOperator, x: &SeqVector) -> SeqVector {
    let mut acc = SeqVector::new();
    let mut lx = x.clone();
    let mut n = 0;
    while !lx.is_empty() {
        let mut y = t.apply(&lx);
        for _ in 0..n {
            y = d.shift_right(&y);
        }
        acc = acc.plus(&y);
        lx = d.shift_left(&lx);
        n += 1;
    }
    acc
}

pub fn oracle(
    argv: Vec<String>,
    name: OracleName,
    op: Option<&Path>,
    input: Option<&Path>,
    decomp: &str,
    probes: usize,
    report_path: Option<&Path>,
) -> CliResult<()> {
    let start = Instant::now();
    let mut report = RunReport::new(argv);
    let title = match name {
        OracleName::SylvesterDense => {
            let (a2, d2, b, c) = match input {
                Some(path) => {
                    let v = read_json(path, &mut report)?;
                    (
                        parse_rows(&v, "A2")?,
                        parse_rows(&v, "D2")?,
                        parse_rows(&v, "B")?,
                        parse_rows(&v, "C")?,
                    )
                }
                // the scalar example: E₁ = 1/(-0.1 - 1.2) = -1/1.3
                None => (
                    DMatrix::from_element(1, 1, 0.2),
                    DMatrix::from_element(1, 1, -0.1),
                    DMatrix::from_element(1, 1, 1.0),
                    DMatrix::from_element(1, 1, 0.0),
                ),
            };
            let (e1, e2) = sylvester_dense_oracle(&a2, &d2, &b, &c)?;
            let id = DMatrix::<f64>::identity(a2.nrows(), a2.nrows());
            let res1 = (&e1 * &d2 - (&a2 + &id) * &e1 - &b).amax();
            let res2 = (&e2 * (&a2 + &id) - &d2 * &e2 - &c).amax();
            report.residuals = vec![(0, res1), (1, res2)];
            let mut summary = json!({"E1": rows(&e1), "E2": rows(&e2)});
            match sylvester_neumann(&a2, &d2, &b, &c, PNorm::One, 1e-14, 10_000) {
                Ok(s) => {
                    let gap = (&s.e1 - &e1).amax().max((&s.e2 - &e2).amax());
                    summary["neumann_gap"] = json!(gap);
                    summary["neumann_iters"] = json!([s.iters.0, s.iters.1]);
                }
                Err(e) => summary["neumann"] = json!(e.to_string()),
            }
            report.stage("sylvester_dense_oracle", summary);
            for (label, m) in [("E1", &e1), ("E2", &e2)] {
                for i in 0..m.nrows() {
                    let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.6}")).collect();
                    println!("{label}[{i}] = {}", row.join(" "));
                }
            }
            report.judge(1e-10);
            format!(
                "oracle sylvester-dense: {}x{} system",
                a2.nrows(),
                d2.nrows()
            )
        }
        OracleName::SeriesDirect => {
            let d = load_decomp(decomp, &mut report)?;
            let t = match op {
                Some(p) => load_op(p, &mut report)?,
                None => SparseOperator::rank_one(1, 2, 1.0),
            };
            let series = OperatorExpr::shift_series(&d, &OperatorExpr::sparse(t.clone()))?;
            report.residuals = (0..probes)
                .map(|k| {
                    let x = SeqVector::unit(k);
                    (k, series.apply(&x).max_abs_diff(&direct_series(&d, &t, &x)))
                })
                .collect();
            report.stage("series_direct", json!({"columns": probes, "nnz": t.nnz()}));
            report.judge(1e-12);
            format!(
                "oracle series-direct: {} columns against the direct sum",
                probes
            )
        }
        OracleName::Trace => {
            let t = match op {
                Some(p) => load_op(p, &mut report)?,
                None => SparseOperator::identity_on(0..2),
            };
            let dim = t.max_index().map(|k| k + 1).ok_or_else(|| {
                CliError::Core(Error::InvalidInput("trace of an empty operator".into()))
            })?;
            let idx: Vec<usize> = (0..dim).collect();
            let m = OperatorExpr::sparse(t).compress(&idx);
            let v = trace_obstruction(&m);
            report.stage(
                "trace_obstruction",
                serde_json::to_value(v).expect("verdict serializes"),
            );
            report.verdict = if v.obstructed {
                "obstructed"
            } else {
                "unobstructed"
            }
            .into();
            format!(
                "oracle trace: dim {dim}, trace {:e}, threshold {:e}, {}",
                v.trace, v.threshold, report.verdict
            )
        }
    };
    finish(&title, &report, report_path, start)
}
