//! Commutator witnesses built from shift series: the direct factorization
//! of members of A(D), corner formulas, tail-driven block selection and
//! coarsening, and the compact-operator pipeline.

use serde::Serialize;
use serde_json::{json, Value};

use crate::decomposition::{Cuts, Decomposition};
use crate::error::{Error, Result};
use crate::expr::{series_apply, OperatorExpr};
use crate::space::{expect_format, op_norm_exact, parse_index, parse_value, PNorm, SeqVector, SparseOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WitnessKind {
    /// `[S, U] = T` holds algebraically; measured deviations are rounding only.
    Exact,
    /// `[S, U] = T` up to a certified remainder `residual_cert`.
    CertifiedApprox,
}

impl WitnessKind {
    fn as_str(&self) -> &'static str {
        match self {
            WitnessKind::Exact => "exact",
            WitnessKind::CertifiedApprox => "certified-approx",
        }
    }
}

/// A pair `(S, U)` with `SU − US = target`.
#[derive(Clone, Debug)]
pub struct CommutatorWitness {
    pub s: OperatorExpr,
    pub u: OperatorExpr,
    pub target: OperatorExpr,
    pub kind: WitnessKind,
    pub residual_cert: f64,
    pub norm_s: f64,
    pub norm_u: f64,
    pub probes_checked: usize,
    pub max_residual: f64,
}

impl CommutatorWitness {
    pub fn new(s: OperatorExpr, u: OperatorExpr, target: OperatorExpr, kind: WitnessKind, residual_cert: f64) -> Self {
        let norm_s = s.norm_bound(PNorm::One);
        let norm_u = u.norm_bound(PNorm::One);
        CommutatorWitness {
            s,
            u,
            target,
            kind,
            residual_cert,
            norm_s,
            norm_u,
            probes_checked: 0,
            max_residual: 0.0,
        }
    }

    /// `([S, U] − T) x`
    pub fn residual_vector(&self, x: &SeqVector) -> SeqVector {
        let su = self.s.apply(&self.u.apply(x));
        let us = self.u.apply(&self.s.apply(x));
        su.minus(&us).minus(&self.target.apply(x))
    }

    /// Largest sup-norm deviation over the given columns.
    pub fn measure<I: IntoIterator<Item = usize>>(&self, columns: I) -> (usize, f64) {
        let mut count = 0;
        let mut worst = 0.0f64;
        for k in columns {
            let r = self.residual_vector(&SeqVector::unit(k));
            worst = worst.max(r.norm(PNorm::Inf));
            count += 1;
        }
        (count, worst)
    }

    /// Measures the residual on the given columns and records the result.
    pub fn verify<I: IntoIterator<Item = usize>>(&mut self, columns: I) -> f64 {
        let (count, worst) = self.measure(columns);
        self.probes_checked = count;
        self.max_residual = worst;
        worst
    }

    pub fn to_json(&self) -> Value {
        json!({
            "format": "witness/v1",
            "S": self.s.to_json(),
            "U": self.u.to_json(),
            "target": self.target.to_json(),
            "kind": self.kind.as_str(),
            "residual_cert": self.residual_cert,
            "norm_S": self.norm_s,
            "norm_U": self.norm_u,
            "probes_checked": self.probes_checked,
            "max_residual": self.max_residual,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "witness/v1")?;
        let get = |k: &str| v.get(k).ok_or_else(|| Error::Parse(format!("witness needs `{k}`")));
        let kind = match get("kind")?.as_str() {
            Some("exact") => WitnessKind::Exact,
            Some("certified-approx") => WitnessKind::CertifiedApprox,
            _ => return Err(Error::Parse("witness kind must be exact or certified-approx".into())),
        };
        let mut w = CommutatorWitness::new(
            OperatorExpr::from_json(get("S")?)?,
            OperatorExpr::from_json(get("U")?)?,
            OperatorExpr::from_json(get("target")?)?,
            kind,
            parse_value(get("residual_cert")?)?,
        );
        w.probes_checked = v.get("probes_checked").map(parse_index).transpose()?.unwrap_or(0);
        w.max_residual = v.get("max_residual").map(parse_value).transpose()?.unwrap_or(0.0);
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EasyVariant {
    /// `T = [L, R T_D]`
    Left,
    /// `T = [R, −T_D L]`
    Right,
}

/// Factors `T ∈ A(D)` through its shift series.
pub fn easy_factor(t: &OperatorExpr, d: &Decomposition, variant: EasyVariant) -> Result<CommutatorWitness> {
    let td = OperatorExpr::shift_series(d, t).map_err(|e| e.with_stage("easy_factor"))?;
    let l = OperatorExpr::left_shift(d);
    let r = OperatorExpr::right_shift(d);
    let (s, u) = match variant {
        EasyVariant::Left => {
            let u = if t.is_structurally_zero() {
                OperatorExpr::zero()
            } else {
                OperatorExpr::compose(&r, &td)
            };
            (l, u)
        }
        EasyVariant::Right => (r, OperatorExpr::compose(&td, &l).neg()),
    };
    Ok(CommutatorWitness::new(s, u, t.clone(), WitnessKind::Exact, 0.0))
}

/// Measured deviations of the two identities behind `A(D) = D_R(L(𝒳)RL)`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct IdealReport {
    pub probes: usize,
    pub depth: usize,
    /// max over probes and `m ≤ depth` of the telescoping deviation
    pub telescoping: f64,
    /// max over probes of `‖(D_R T)_D L x + T x‖_∞`
    pub series_identity: f64,
    pub failures: Vec<String>,
}

impl IdealReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// For `T = S R L`, checks `Σ_{n≤m} Rⁿ(D_R T)Lⁿx = R^{m+1}TL^m x − TRx` for
/// `m ≤ depth` and `(D_R T)_D L x = −T x` on the given probes.
pub fn ideal_inclusion_check(s: &OperatorExpr, d: &Decomposition, probes: &[SeqVector], depth: usize) -> IdealReport {
    let l = OperatorExpr::left_shift(d);
    let r = OperatorExpr::right_shift(d);
    let t = OperatorExpr::chain(&[s.clone(), r.clone(), l.clone()]);
    let drt = OperatorExpr::commutator(&r, &t);
    let mut rep = IdealReport {
        probes: probes.len(),
        depth,
        ..Default::default()
    };
    let tol = 1e-12;
    for (idx, x) in probes.iter().enumerate() {
        let scale = 1.0 + x.norm(PNorm::One);
        let trx = t.apply(&r.apply(x));
        let mut lm = x.clone();
        for m in 0..=depth {
            let lhs = series_apply(d, &drt, x, None, m);
            let mut rhs = t.apply(&lm);
            for _ in 0..=m {
                rhs = d.shift_right(&rhs);
            }
            let dev = lhs.max_abs_diff(&rhs.minus(&trx));
            rep.telescoping = rep.telescoping.max(dev);
            if dev > tol * scale {
                rep.failures.push(format!("telescoping at m = {m} on probe {idx}: {dev:e}"));
            }
            lm = d.shift_left(&lm);
        }
        // beyond the top block of x every remaining term vanishes
        let lx = l.apply(x);
        let upto = d.max_block(x).unwrap_or(0) + 1;
        let lhs = series_apply(d, &drt, &lx, None, upto);
        let dev = lhs.max_abs_diff(&t.apply(x).scaled(-1.0));
        rep.series_identity = rep.series_identity.max(dev);
        if dev > tol * scale {
            rep.failures.push(format!("(D_R T)_D L = -T on probe {idx}: {dev:e}"));
        }
    }
    rep
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CornerSide {
    /// `T P₀ = [R, L T P₀ − (P₀TP₀)_D L]`
    Right,
    /// `P₀ T = [L, −P₀TR + R(P₀TP₀)_D]`
    Left,
}

pub fn corner_factor(t: &OperatorExpr, d: &Decomposition, side: CornerSide) -> Result<CommutatorWitness> {
    let l = OperatorExpr::left_shift(d);
    let r = OperatorExpr::right_shift(d);
    let p0 = OperatorExpr::proj(d, 0);
    let corner = OperatorExpr::chain(&[p0.clone(), t.clone(), p0.clone()]);
    let series = OperatorExpr::shift_series(d, &corner).map_err(|e| e.with_stage("corner_factor"))?;
    Ok(match side {
        CornerSide::Right => {
            let u = OperatorExpr::chain(&[l.clone(), t.clone(), p0.clone()])
                .minus(&OperatorExpr::compose(&series, &l));
            CommutatorWitness::new(r, u, OperatorExpr::compose(t, &p0), WitnessKind::Exact, 0.0)
        }
        CornerSide::Left => {
            let u = OperatorExpr::chain(&[p0.clone(), t.clone(), r.clone()])
                .neg()
                .plus(&OperatorExpr::compose(&r, &series));
            CommutatorWitness::new(l, u, OperatorExpr::compose(&p0, t), WitnessKind::Exact, 0.0)
        }
    })
}

/// Tail norms `‖(I − P̃_n)T‖` and `‖T(I − P̃_n)‖` for `n = 0..=N`.
#[derive(Clone, Debug, Serialize)]
pub struct DecayProfile {
    pub p: PNorm,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// Block of `d` holding the highest row or column of `t`, if any.
pub fn top_block(t: &SparseOperator, d: &Decomposition) -> Option<usize> {
    t.entries()
        .map(|(r, c, _)| d.block_of(r).max(d.block_of(c)))
        .max()
}

fn left_tail(t: &SparseOperator, d: &Decomposition, n: usize, p: PNorm) -> f64 {
    op_norm_exact(&t.filter(|r, _| d.block_of(r) > n), p).unwrap_or(f64::INFINITY)
}

fn right_tail(t: &SparseOperator, d: &Decomposition, n: usize, p: PNorm) -> f64 {
    op_norm_exact(&t.filter(|_, c| d.block_of(c) > n), p).unwrap_or(f64::INFINITY)
}

fn double_tail(t: &SparseOperator, d: &Decomposition, a: usize, b: usize, p: PNorm) -> f64 {
    op_norm_exact(&t.filter(|r, c| d.block_of(r) > a && d.block_of(c) > b), p).unwrap_or(f64::INFINITY)
}

fn require_exact_norm(p: PNorm, stage: &str) -> Result<()> {
    if p == PNorm::Two {
        Err(Error::precondition(stage, "exact tail norms need p = 1 or p = inf"))
    } else {
        Ok(())
    }
}

pub fn tail_profile(t: &SparseOperator, d: &Decomposition, p: PNorm, n_max: usize) -> Result<DecayProfile> {
    require_exact_norm(p, "tail_profile")?;
    Ok(DecayProfile {
        p,
        left: (0..=n_max).map(|n| left_tail(t, d, n, p)).collect(),
        right: (0..=n_max).map(|n| right_tail(t, d, n, p)).collect(),
    })
}

/// Output of [`select_blocks`]. The sequence continues past `m` with
/// stride one; every further term of the three sums is exactly zero.
#[derive(Clone, Debug, Serialize)]
pub struct BlockSelection {
    pub eps: f64,
    pub p: PNorm,
    /// first pass
    pub n: Vec<usize>,
    /// second pass, `m_j ≥ n_j`
    pub m: Vec<usize>,
    pub left_sum: f64,
    pub right_sum: f64,
    pub double_sum: f64,
    pub total: f64,
}

impl BlockSelection {
    pub fn valid(&self) -> bool {
        self.total < self.eps
    }

    pub fn cuts(&self) -> Cuts {
        Cuts::new(self.m.clone()).expect("selection is strictly increasing")
    }
}

/// Sum of the three tail series for a finite prefix `m`, assuming every
/// term past the prefix vanishes.
pub fn selection_total(t: &SparseOperator, d: &Decomposition, p: PNorm, m: &[usize]) -> (f64, f64, f64) {
    let left = m.iter().map(|&a| left_tail(t, d, a, p)).sum();
    let right = m.iter().map(|&a| right_tail(t, d, a, p)).sum();
    let mut double = 0.0;
    for &a in m {
        for &b in m {
            double += double_tail(t, d, a, b, p);
        }
    }
    (left, right, double)
}

/// Chooses `m_0 < m_1 < …` so that the single tail sums and the double sum
/// of `‖(I − P̃_{m_i})T(I − P̃_{m_j})‖` total less than `eps`.
pub fn select_blocks(t: &SparseOperator, d: &Decomposition, p: PNorm, eps: f64) -> Result<BlockSelection> {
    require_exact_norm(p, "select_blocks")?;
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::precondition("select_blocks", "eps must be positive"));
    }
    let c1 = d.c1();
    let top = top_block(t, d).unwrap_or(0);
    // first pass: per-term budget eps / (3 C₁ 2^{j+1})
    let mut n = Vec::new();
    let mut next = 0usize;
    loop {
        let j = n.len() as i32;
        let budget = eps / (3.0 * c1 * 2f64.powi(j + 1));
        let mut k = next;
        while !(left_tail(t, d, k, p) < budget && right_tail(t, d, k, p) < budget) {
            k += 1;
        }
        n.push(k);
        next = k + 1;
        if k >= top {
            break;
        }
    }
    // second pass: pairwise budget eps / (3 · 2^{i+j+2})
    let mut m: Vec<usize> = Vec::with_capacity(n.len());
    for (j, &nj) in n.iter().enumerate() {
        let mut k = nj.max(m.last().map_or(0, |&v| v + 1));
        loop {
            let ok = (0..=j).all(|i| {
                let mi = if i == j { k } else { m[i] };
                let budget = eps / (3.0 * 2f64.powi((i + j) as i32 + 2));
                double_tail(t, d, mi, k, p) < budget && double_tail(t, d, k, mi, p) < budget
            });
            if ok {
                break;
            }
            k += 1;
        }
        m.push(k);
    }
    let (left_sum, right_sum, double_sum) = selection_total(t, d, p, &m);
    Ok(BlockSelection {
        eps,
        p,
        n,
        m,
        left_sum,
        right_sum,
        double_sum,
        total: left_sum + right_sum + double_sum,
    })
}

#[derive(Clone, Debug)]
pub struct CoarsenOutcome {
    pub witness: CommutatorWitness,
    pub selection: BlockSelection,
    pub decomposition: Decomposition,
    /// largest p-norm of a probed column of `T_D`
    pub max_column_norm: f64,
    /// `C‖T‖ + eps` with `C = 4λ²C₁³`
    pub column_bound: f64,
}

impl CoarsenOutcome {
    pub fn within_bound(&self) -> bool {
        self.max_column_norm <= self.column_bound
    }

    pub fn report(&self) -> Value {
        json!({
            "selection": self.selection,
            "decomposition": self.decomposition.to_json(),
            "max_column_norm": self.max_column_norm,
            "column_bound": self.column_bound,
            "within_bound": self.within_bound(),
        })
    }
}

/// Coarsens `d` along [`select_blocks`] and factors `T = [R, −T_D L]` over
/// the coarsened decomposition, probing columns `0..probe_columns`.
pub fn coarsen_and_factor(
    t: &SparseOperator,
    d: &Decomposition,
    p: PNorm,
    eps: f64,
    probe_columns: usize,
) -> Result<CoarsenOutcome> {
    let selection = select_blocks(t, d, p, eps).map_err(|e| e.with_stage("coarsen_and_factor"))?;
    let coarse = d.coarsen(selection.cuts());
    let te = OperatorExpr::sparse(t.clone());
    let td = OperatorExpr::shift_series(&coarse, &te).map_err(|e| e.with_stage("coarsen_and_factor"))?;
    let max_column_norm = (0..probe_columns)
        .map(|k| td.column(k).norm(p))
        .fold(0.0, f64::max);
    let c = coarse.series_constant();
    let column_bound = c * op_norm_exact(t, p)? + eps;
    let mut witness = easy_factor(&te, &coarse, EasyVariant::Right)?;
    witness.verify(0..probe_columns);
    Ok(CoarsenOutcome {
        witness,
        selection,
        decomposition: coarse,
        max_column_norm,
        column_bound,
    })
}

/// Normalized block basis with small images and its norm-one projection.
#[derive(Clone, Debug)]
pub struct SmallNormBasis {
    /// positions in the supplied `ψ` list, in pairs `(2i, 2i+1)`
    pub selected: Vec<usize>,
    pub phi: Vec<SeqVector>,
    /// `g_i(x) = Σ_{k ∈ supp φ_i} sign(φ_i(k)) x_k`, stored as the vector of signs
    pub duals: Vec<SeqVector>,
    /// `P = Σ φ_i ⊗ g_i`
    pub projection: SparseOperator,
    /// `max_i ‖Tφ_i‖₁`
    pub max_image_norm: f64,
}

/// Extracts `count` vectors `φ_i = (ψ_a − ψ_b)/2` with `‖Tφ_i‖₁ < delta`
/// from disjointly supported unit vectors `ψ_j`, by greedy clustering of
/// the images `Tψ_j` with ball radius `delta/2`.
pub fn small_norm_block_basis(t: &SparseOperator, psi: &[SeqVector], delta: f64, count: usize) -> Result<SmallNormBasis> {
    const STAGE: &str = "small_norm_block_basis";
    if delta <= 0.0 {
        return Err(Error::precondition(STAGE, "delta must be positive"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (j, v) in psi.iter().enumerate() {
        if (v.norm(PNorm::One) - 1.0).abs() > 1e-12 {
            return Err(Error::precondition(STAGE, format!("psi[{j}] does not have unit l1 norm")));
        }
        for k in v.support() {
            if !seen.insert(k) {
                return Err(Error::precondition(STAGE, format!("psi[{j}] overlaps an earlier vector at index {k}")));
            }
        }
    }
    let images: Vec<SeqVector> = psi.iter().map(|v| t.apply(v)).collect();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for j in 0..psi.len() {
        let home = clusters
            .iter_mut()
            .find(|c| images[c[0]].minus(&images[j]).norm(PNorm::One) <= delta / 2.0);
        match home {
            Some(c) => c.push(j),
            None => clusters.push(vec![j]),
        }
    }
    // largest cluster; ties go to the one with the lowest first index
    let best = clusters
        .iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .cloned()
        .unwrap_or_default();
    if best.len() < 2 * count.max(1) {
        return Err(Error::precondition(
            STAGE,
            format!(
                "largest cluster of images within {:e} has {} members, need {}",
                delta / 2.0,
                best.len(),
                2 * count.max(1)
            ),
        ));
    }
    let selected: Vec<usize> = best[..2 * count].to_vec();
    let mut phi = Vec::with_capacity(count);
    let mut duals = Vec::with_capacity(count);
    let mut triplets = Vec::new();
    let mut max_image_norm = 0.0f64;
    for pair in selected.chunks(2) {
        let f = psi[pair[0]].minus(&psi[pair[1]]).scaled(0.5);
        let g = SeqVector::accumulate(f.iter().map(|(k, v)| (k, v.signum())));
        for (k, s) in g.iter() {
            for (r, v) in f.iter() {
                triplets.push((r, k, s * v));
            }
        }
        max_image_norm = max_image_norm.max(t.apply(&f).norm(PNorm::One));
        phi.push(f);
        duals.push(g);
    }
    if max_image_norm >= delta {
        return Err(Error::precondition(
            STAGE,
            format!("achieved image norm {max_image_norm:e} is not below {delta:e}"),
        ));
    }
    Ok(SmallNormBasis {
        selected,
        phi,
        duals,
        projection: SparseOperator::accumulate(triplets),
        max_image_norm,
    })
}

/// Which construction [`compact_factor`] ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CompactCase {
    /// arbitrary decomposition, then coarsening
    CaseI,
    /// blocks with small restricted norm, then coarsening
    CaseII,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockNorm {
    pub block: usize,
    pub norm: f64,
    pub limit: f64,
}

#[derive(Clone, Debug)]
pub struct CompactOutcome {
    pub case: CompactCase,
    /// decomposition `{Y_i}` before coarsening
    pub base: Decomposition,
    pub coarsen: CoarsenOutcome,
    /// `‖T|_{Y_i}‖₁` against `eps / 2^i` (Case II only)
    pub block_norms: Vec<BlockNorm>,
    /// per-block small-norm bases found inside `Y_i` (Case II only)
    pub bases: Vec<(usize, SmallNormBasis)>,
}

impl CompactOutcome {
    pub fn witness(&self) -> &CommutatorWitness {
        &self.coarsen.witness
    }

    pub fn block_norms_ok(&self) -> bool {
        self.block_norms.iter().all(|b| b.norm < b.limit)
    }
}

/// Largest index (exclusive) accepted by [`compact_factor`]; the exact tail
/// norms scan every row and column block up to it.
pub const COMPACT_SUPPORT_CAP: usize = 1 << 16;

/// Factors a finitely supported `T`. At p = ∞ the dyadic decomposition is
/// coarsened directly; at p = 1 each block `X_i`, `i ≥ 1`, first sheds the
/// coordinates `k` with `‖Te_k‖₁ ≥ eps/2^i` into block 0, so that
/// `‖T|_{Y_i}‖₁ < eps/2^i`.
pub fn compact_factor(t: &SparseOperator, p: PNorm, eps: f64, probe_columns: usize) -> Result<CompactOutcome> {
    const STAGE: &str = "compact_factor";
    if eps <= 0.0 {
        return Err(Error::precondition(STAGE, "eps must be positive"));
    }
    if let Some(k) = t.max_index().filter(|&k| k >= COMPACT_SUPPORT_CAP) {
        return Err(Error::precondition(
            STAGE,
            format!("index {k} exceeds the support cap {COMPACT_SUPPORT_CAP}"),
        ));
    }
    let d = Decomposition::dyadic();
    match p {
        PNorm::Inf => {
            let coarsen = coarsen_and_factor(t, &d, p, eps, probe_columns).map_err(|e| e.with_stage(STAGE))?;
            Ok(CompactOutcome {
                case: CompactCase::CaseI,
                base: d,
                coarsen,
                block_norms: vec![],
                bases: vec![],
            })
        }
        PNorm::One => {
            let limit = |i: usize| eps / 2f64.powi(i as i32);
            let moved: Vec<usize> = t
                .col_indices()
                .filter(|&k| {
                    let b = d.block_of(k);
                    b >= 1 && t.column(k).norm(PNorm::One) >= limit(b)
                })
                .collect();
            let base = d.reassign(0, moved);
            let top = top_block(t, &base).unwrap_or(0);
            let mut block_norms = Vec::new();
            let mut bases = Vec::new();
            for i in 1..=top + 1 {
                let restricted = t.filter(|_, c| base.block_of(c) == i);
                block_norms.push(BlockNorm {
                    block: i,
                    norm: restricted.max_col_sum(),
                    limit: limit(i),
                });
                // a two-element block basis drawn from the first slots of Y_i
                let psi: Vec<SeqVector> = (0..8).map(|j| SeqVector::unit(base.pair(i, j))).collect();
                if let Ok(b) = small_norm_block_basis(t, &psi, limit(i), 2) {
                    bases.push((i, b));
                }
            }
            let coarsen = coarsen_and_factor(t, &base, p, eps, probe_columns).map_err(|e| e.with_stage(STAGE))?;
            Ok(CompactOutcome {
                case: CompactCase::CaseII,
                base,
                coarsen,
                block_norms,
                bases,
            })
        }
        PNorm::Two => Err(Error::precondition(STAGE, "compact pipeline runs at p = 1 or p = inf")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompactSide {
    /// `T(I − P₀)` finitely supported
    TP,
    /// `(I − P₀)T` finitely supported
    PT,
}

/// Factors `T` when one side of `T` against `P = I − P₀` is finitely
/// supported, using `I − P = P₀`.
pub fn compact_side_factor(t: &OperatorExpr, d: &Decomposition, side: CompactSide) -> Result<CommutatorWitness> {
    const STAGE: &str = "compact_side_factor";
    let l = OperatorExpr::left_shift(d);
    let r = OperatorExpr::right_shift(d);
    let p0 = OperatorExpr::proj(d, 0);
    let p = OperatorExpr::identity().minus(&p0);
    let corner = OperatorExpr::chain(&[p0.clone(), t.clone(), p0.clone()]);
    let corner_d = OperatorExpr::shift_series(d, &corner).map_err(|e| e.with_stage(STAGE))?;
    match side {
        CompactSide::TP => {
            let tp = OperatorExpr::compose(t, &p);
            let tp_d = OperatorExpr::shift_series(d, &tp).map_err(|e| e.with_stage(STAGE))?;
            let u = OperatorExpr::add(vec![
                OperatorExpr::chain(&[l.clone(), t.clone(), p0.clone()]),
                OperatorExpr::compose(&corner_d, &l).neg(),
                OperatorExpr::compose(&tp_d, &l).neg(),
            ]);
            Ok(CommutatorWitness::new(r, u, t.clone(), WitnessKind::Exact, 0.0))
        }
        CompactSide::PT => {
            let pt = OperatorExpr::compose(&p, t);
            let pt_d = OperatorExpr::shift_series(d, &pt).map_err(|e| e.with_stage(STAGE))?;
            let u = OperatorExpr::add(vec![
                OperatorExpr::chain(&[p0.clone(), t.clone(), r.clone()]).neg(),
                OperatorExpr::compose(&r, &corner_d),
                OperatorExpr::compose(&r, &pt_d),
            ]);
            Ok(CommutatorWitness::new(l, u, t.clone(), WitnessKind::Exact, 0.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{block_sparse_operator, random_probes};

    fn dy() -> Decomposition {
        Decomposition::dyadic()
    }

    fn diagonal_fixture(d: &Decomposition) -> SparseOperator {
        SparseOperator::accumulate((0..=5).map(|i| {
            let k = d.pair(i, 0);
            (k, k, 2f64.powi(-(i as i32)))
        }))
    }

    #[test]
    fn easy_factor_zero() {
        let d = dy();
        let mut w = easy_factor(&OperatorExpr::zero(), &d, EasyVariant::Left).unwrap();
        assert_eq!(w.verify(0..256), 0.0);
        assert!(w.u.is_structurally_zero());
    }

    #[test]
    fn easy_factor_rank_one() {
        let d = dy();
        let t = OperatorExpr::sparse(SparseOperator::rank_one(0, 0, 1.0));
        for v in [EasyVariant::Left, EasyVariant::Right] {
            let mut w = easy_factor(&t, &d, v).unwrap();
            assert_eq!(w.verify(0..256), 0.0);
        }
    }

    #[test]
    fn easy_factor_random_integer() {
        let d = Decomposition::cantor();
        for seed in 0..5 {
            let t = OperatorExpr::sparse(block_sparse_operator(seed, &d, 2, 256, 20, true));
            for v in [EasyVariant::Left, EasyVariant::Right] {
                let mut w = easy_factor(&t, &d, v).unwrap();
                assert_eq!(w.verify(0..256), 0.0);
            }
        }
    }

    #[test]
    fn easy_factor_rejects_uncertified() {
        let d = dy();
        let err = easy_factor(&OperatorExpr::identity(), &d, EasyVariant::Left).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }));
    }

    #[test]
    fn ideal_identities() {
        let d = dy();
        let probes = random_probes(1, 64, 256, 6, true);
        let rep = ideal_inclusion_check(&OperatorExpr::identity(), &d, &probes, 6);
        assert!(rep.passed(), "{:?}", rep.failures);
        assert_eq!(rep.telescoping, 0.0);
        let rep = ideal_inclusion_check(&OperatorExpr::zero(), &d, &probes, 6);
        assert_eq!((rep.telescoping, rep.series_identity), (0.0, 0.0));
        let s = OperatorExpr::sparse(block_sparse_operator(3, &d, 3, 256, 30, true));
        let rep = ideal_inclusion_check(&s, &d, &probes, 6);
        assert!(rep.passed(), "{:?}", rep.failures);
        assert_eq!(rep.series_identity, 0.0);
    }

    #[test]
    fn corner_factors() {
        let d = dy();
        let t = OperatorExpr::sparse(SparseOperator::rank_one(0, 0, 1.0));
        let mut w = corner_factor(&t, &d, CornerSide::Right).unwrap();
        assert_eq!(w.verify(0..256), 0.0);
        // no block-0 columns: T P0 = 0
        let t = OperatorExpr::sparse(SparseOperator::rank_one(0, 1, 3.0));
        let mut w = corner_factor(&t, &d, CornerSide::Right).unwrap();
        assert_eq!(w.verify(0..256), 0.0);
        assert!(w.target.column(1).is_empty());
        for seed in 0..4 {
            let t = OperatorExpr::sparse(block_sparse_operator(seed, &d, 2, 256, 25, true));
            for side in [CornerSide::Right, CornerSide::Left] {
                let mut w = corner_factor(&t, &d, side).unwrap();
                assert_eq!(w.verify(0..128), 0.0);
            }
        }
    }

    #[test]
    fn tail_profile_examples() {
        let d = dy();
        let prof = tail_profile(&SparseOperator::zero(), &d, PNorm::One, 4).unwrap();
        assert!(prof.left.iter().chain(&prof.right).all(|&v| v == 0.0));
        let t = diagonal_fixture(&d);
        let prof = tail_profile(&t, &d, PNorm::One, 8).unwrap();
        for n in 0..=8 {
            let expect = if n < 5 { 2f64.powi(-(n as i32 + 1)) } else { 0.0 };
            assert_eq!(prof.left[n], expect);
            assert_eq!(prof.right[n], expect);
        }
        assert!(tail_profile(&t, &d, PNorm::Two, 3).is_err());
    }

    #[test]
    fn selection_zero_operator() {
        let d = dy();
        let s = select_blocks(&SparseOperator::zero(), &d, PNorm::One, 0.1).unwrap();
        assert_eq!(s.m, vec![0]);
        assert_eq!(s.total, 0.0);
    }

    #[test]
    fn selection_diagonal_fixture() {
        let d = dy();
        let t = diagonal_fixture(&d);
        let s = select_blocks(&t, &d, PNorm::One, 0.1).unwrap();
        assert!(s.valid());
        assert_eq!(s.m[0], 5);
        // exhaustive oracle over m0 with every later term zero
        let oracle = (0..=32)
            .find(|&m0| {
                let l = left_tail(&t, &d, m0, PNorm::One);
                let r = right_tail(&t, &d, m0, PNorm::One);
                let dd = double_tail(&t, &d, m0, m0, PNorm::One);
                l + r + dd < 0.1
            })
            .unwrap();
        assert_eq!(oracle, 4);
        assert!(s.m[0] >= oracle);
    }

    #[test]
    fn coarsen_and_factor_fixtures() {
        let d = dy();
        let out = coarsen_and_factor(&SparseOperator::rank_one(0, 0, 1.0), &d, PNorm::One, 0.1, 256).unwrap();
        assert_eq!(out.selection.m, vec![0]);
        assert_eq!(out.witness.max_residual, 0.0);
        let t = diagonal_fixture(&d);
        let out = coarsen_and_factor(&t, &d, PNorm::One, 0.1, 256).unwrap();
        assert!(out.witness.max_residual <= 1e-15);
        assert!(out.within_bound());
        assert!(out.max_column_norm <= 32.0 + 0.1);
    }

    #[test]
    fn small_norm_zero_columns() {
        let t = SparseOperator::accumulate((0..100).map(|k| (k, k, 1.0)));
        let psi: Vec<SeqVector> = (0..8).map(|j| SeqVector::unit(100 + j)).collect();
        let b = small_norm_block_basis(&t, &psi, 0.1, 3).unwrap();
        assert_eq!(b.phi[0], SeqVector::from_pairs([(100, 0.5), (101, -0.5)]).unwrap());
        assert_eq!(b.max_image_norm, 0.0);
        assert_eq!(b.projection.max_col_sum(), 1.0);
        let p = &b.projection;
        assert_eq!(p.compose(p), *p);
        for f in &b.phi {
            assert_eq!(p.apply(f), *f);
        }
    }

    #[test]
    fn small_norm_decaying_columns() {
        let t = SparseOperator::accumulate((0..40).map(|k| (k, k, 2f64.powi(-(k as i32)))));
        let psi: Vec<SeqVector> = (0..40).map(SeqVector::unit).collect();
        let b = small_norm_block_basis(&t, &psi, 0.1, 4).unwrap();
        assert!(b.max_image_norm <= 2f64.powi(-4));
        assert_eq!(b.projection.max_col_sum(), 1.0);
        let err = small_norm_block_basis(&t, &psi[..3], 0.1, 4).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }));
    }

    #[test]
    fn compact_geometric_fixture() {
        let t = SparseOperator::accumulate(
            (0..16).flat_map(|i| (0..16).map(move |j| (i, j, 2f64.powi(-(i as i32 + j as i32))))),
        );
        for p in [PNorm::One, PNorm::Inf] {
            let out = compact_factor(&t, p, 0.01, 256).unwrap();
            assert!(out.witness().max_residual <= 1e-9, "{p}: {}", out.witness().max_residual);
            assert!(out.block_norms_ok());
            assert!(out.coarsen.selection.valid());
        }
        let out = compact_factor(&SparseOperator::zero(), PNorm::One, 0.01, 64).unwrap();
        assert_eq!(out.witness().max_residual, 0.0);
    }

    #[test]
    fn side_factors() {
        let d = dy();
        // T P = 0: every column lives in block 0
        let t = OperatorExpr::sparse(SparseOperator::accumulate([(0, 0, 2.0), (1, 2, -1.0)]));
        let mut w = compact_side_factor(&t, &d, CompactSide::TP).unwrap();
        assert_eq!(w.verify(0..256), 0.0);
        for seed in 0..4 {
            let t = OperatorExpr::sparse(block_sparse_operator(seed, &d, 3, 256, 30, true));
            for side in [CompactSide::TP, CompactSide::PT] {
                let mut w = compact_side_factor(&t, &d, side).unwrap();
                assert_eq!(w.verify(0..256), 0.0);
            }
        }
    }

    #[test]
    fn witness_json_round_trip() {
        let d = dy();
        let t = OperatorExpr::sparse(block_sparse_operator(8, &d, 2, 128, 15, false));
        let mut w = corner_factor(&t, &d, CornerSide::Left).unwrap();
        w.verify(0..64);
        let back = CommutatorWitness::from_json(&w.to_json()).unwrap();
        for k in 0..64 {
            let a = w.residual_vector(&SeqVector::unit(k));
            let b = back.residual_vector(&SeqVector::unit(k));
            assert_eq!(a, b);
        }
        assert_eq!(back.probes_checked, 64);
    }
}
