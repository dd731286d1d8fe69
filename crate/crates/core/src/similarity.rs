//! Similarities used on ℓ₁: the swap involution, the off-diagonal transform,
//! subspace selection, and the similarity that puts a left shift in the
//! upper-right corner of a 2×2 block operator.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::decomposition::{Decomposition, FiniteModel};
use crate::error::{Error, Result};
use crate::expr::OperatorExpr;
use crate::factorize::{compact_factor, CommutatorWitness, WitnessKind};
use crate::matrix2x2::{corner_depth, shift_corner_factor};
use crate::probe::random_probes;
use crate::space::{expect_format, parse_index, parse_value, PNorm, SeqVector, SparseOperator};

/// One invertible factor with its explicit inverse.
#[derive(Clone, Debug)]
pub struct ChainFactor {
    pub label: String,
    pub forward: OperatorExpr,
    pub inverse: OperatorExpr,
}

/// `Φ = F_n ∘ … ∘ F₁`; a target `T` becomes `ΦTΦ⁻¹`.
#[derive(Clone, Debug, Default)]
pub struct SimilarityChain {
    pub factors: Vec<ChainFactor>,
}

impl SimilarityChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: &str, forward: OperatorExpr, inverse: OperatorExpr) {
        self.factors.push(ChainFactor {
            label: label.to_string(),
            forward,
            inverse,
        });
    }

    pub fn forward(&self) -> OperatorExpr {
        if self.factors.is_empty() {
            return OperatorExpr::identity();
        }
        let fs: Vec<OperatorExpr> = self.factors.iter().rev().map(|f| f.forward.clone()).collect();
        OperatorExpr::chain(&fs)
    }

    pub fn inverse(&self) -> OperatorExpr {
        if self.factors.is_empty() {
            return OperatorExpr::identity();
        }
        let fs: Vec<OperatorExpr> = self.factors.iter().map(|f| f.inverse.clone()).collect();
        OperatorExpr::chain(&fs)
    }

    /// `ΦTΦ⁻¹`
    pub fn conjugate(&self, t: &OperatorExpr) -> OperatorExpr {
        OperatorExpr::chain(&[self.forward(), t.clone(), self.inverse()])
    }

    /// `Φ⁻¹XΦ`
    pub fn pull_back(&self, x: &OperatorExpr) -> OperatorExpr {
        OperatorExpr::chain(&[self.inverse(), x.clone(), self.forward()])
    }

    /// `‖Φ‖·‖Φ⁻¹‖` from the ℓ₁ norm certificates.
    pub fn condition_bound(&self) -> f64 {
        self.forward().norm_bound(PNorm::One) * self.inverse().norm_bound(PNorm::One)
    }

    /// Largest sup-norm of `Φ⁻¹Φx − x` over the probes.
    pub fn round_trip_deviation(&self, probes: &[SeqVector]) -> f64 {
        let (f, g) = (self.forward(), self.inverse());
        probes
            .iter()
            .map(|x| g.apply(&f.apply(x)).minus(x).norm(PNorm::Inf))
            .fold(0.0, f64::max)
    }

    /// Transfers a witness for `ΦTΦ⁻¹` to one for `target = T`.
    pub fn pull_back_witness(&self, w: &CommutatorWitness, target: &OperatorExpr) -> CommutatorWitness {
        let cert = if w.residual_cert == 0.0 {
            0.0
        } else {
            w.residual_cert * self.condition_bound()
        };
        CommutatorWitness::new(self.pull_back(&w.s), self.pull_back(&w.u), target.clone(), w.kind, cert)
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.factors
                .iter()
                .map(|f| json!({"label": f.label, "forward": f.forward.to_json(), "inverse": f.inverse.to_json()}))
                .collect(),
        )
    }
}

fn check_relation(name: &str, e: &OperatorExpr, rhs: Option<&OperatorExpr>, probes: &[SeqVector]) -> Result<()> {
    for (i, x) in probes.iter().enumerate() {
        let lhs = e.apply(x);
        let r = match rhs {
            Some(r) => r.apply(x),
            None => SeqVector::new(),
        };
        let dev = lhs.minus(&r).norm(PNorm::Inf);
        if dev > 1e-12 * (1.0 + x.norm(PNorm::Inf)) {
            return Err(Error::Relation {
                identity: name.to_string(),
                probe: i,
                deviation: dev,
            });
        }
    }
    Ok(())
}

/// `√2 S = P − (I−P) + V + V′`, kept as the unscaled `M = √2 S` so that
/// `M² = 2I` can be checked without rounding.
#[derive(Clone, Debug)]
pub struct Involution {
    pub p: OperatorExpr,
    pub v: OperatorExpr,
    pub vp: OperatorExpr,
    pub m: OperatorExpr,
}

impl Involution {
    /// `S = M/√2`
    pub fn s(&self) -> OperatorExpr {
        OperatorExpr::scale(std::f64::consts::FRAC_1_SQRT_2, &self.m)
    }

    /// `S T S = ½ M T M`; the halving is exact.
    pub fn conjugate(&self, t: &OperatorExpr) -> OperatorExpr {
        OperatorExpr::scale(0.5, &OperatorExpr::chain(&[self.m.clone(), t.clone(), self.m.clone()]))
    }

    /// Largest sup-norm of `M(Mx) − 2x`.
    pub fn square_deviation(&self, probes: &[SeqVector]) -> f64 {
        probes
            .iter()
            .map(|x| self.m.apply(&self.m.apply(x)).minus(&x.scaled(2.0)).norm(PNorm::Inf))
            .fold(0.0, f64::max)
    }

    pub fn chain(&self) -> SimilarityChain {
        let mut c = SimilarityChain::new();
        c.push("swap-involution", self.s(), self.s());
        c
    }
}

/// Checks the swap relations on `probes` and builds the involution.
pub fn swap_involution(p: &OperatorExpr, v: &OperatorExpr, vp: &OperatorExpr, probes: &[SeqVector]) -> Result<Involution> {
    let id = OperatorExpr::identity();
    let q = id.minus(p);
    let c = OperatorExpr::compose;
    check_relation("PV = 0", &c(p, v), None, probes)?;
    check_relation("V(I-P) = 0", &c(v, &q), None, probes)?;
    check_relation("V'P = 0", &c(vp, p), None, probes)?;
    check_relation("(I-P)V' = 0", &c(&q, vp), None, probes)?;
    check_relation("V^2 = 0", &c(v, v), None, probes)?;
    check_relation("V'^2 = 0", &c(vp, vp), None, probes)?;
    check_relation("VV' + V'V = I", &c(v, vp).plus(&c(vp, v)), Some(&id), probes)?;
    let m = OperatorExpr::add(vec![p.clone(), q.neg(), v.clone(), vp.clone()]);
    let inv = Involution {
        p: p.clone(),
        v: v.clone(),
        vp: vp.clone(),
        m,
    };
    let dev = inv.square_deviation(probes);
    if dev > 1e-12 {
        return Err(Error::Relation {
            identity: "2S^2 = 2".into(),
            probe: 0,
            deviation: dev,
        });
    }
    Ok(inv)
}

/// Coordinate swap between block 0 of `d` and the union of its other
/// blocks, matching slot `j` of block 0 with the `j`-th index outside it.
pub fn pairing_swap(d: &Decomposition) -> (OperatorExpr, OperatorExpr, OperatorExpr) {
    let rest = d.interleave();
    let p = OperatorExpr::proj(d, 0);
    let v = OperatorExpr::transfer((d, 0), (&rest, 0));
    let vp = OperatorExpr::transfer((&rest, 0), (d, 0));
    (p, v, vp)
}

#[derive(Clone, Debug)]
pub struct OffDiagOutcome {
    /// `T′ = S⁻¹TS`
    pub t_prime: OperatorExpr,
    pub k: OperatorExpr,
    /// largest deviation of `2(I−P)T′P = VPTP + K` over the probes
    pub identity_deviation: f64,
    /// largest probe-column norm of `(I−P)T′P`
    pub lower_witness: f64,
    pub probes_checked: usize,
}

impl OffDiagOutcome {
    pub fn report(&self) -> Value {
        json!({
            "identity_deviation": self.identity_deviation,
            "lower_witness": self.lower_witness,
            "probes_checked": self.probes_checked,
        })
    }
}

/// Conjugates by the involution and checks `2(I−P)T′P = VPTP + K` with
/// `K = −(I−P)TP − (I−P)T(I−P)VP + VT(I−P)VP`.
pub fn offdiag_transform(t: &OperatorExpr, inv: &Involution, probes: &[SeqVector]) -> Result<OffDiagOutcome> {
    let (p, v) = (&inv.p, &inv.v);
    let q = OperatorExpr::identity().minus(p);
    let ch = |fs: &[&OperatorExpr]| OperatorExpr::chain(&fs.iter().map(|e| (*e).clone()).collect::<Vec<_>>());
    let k = OperatorExpr::add(vec![
        ch(&[&q, t, p]).neg(),
        ch(&[&q, t, &q, v, p]).neg(),
        ch(&[v, t, &q, v, p]),
    ]);
    let t_prime = inv.conjugate(t);
    // 2(I−P)T′P = (I−P)MTMP exactly
    let lhs = ch(&[&q, &inv.m, t, &inv.m, p]);
    let rhs = ch(&[v, p, t, p]).plus(&k);
    let qtp = ch(&[&q, &t_prime, p]);
    let mut identity_deviation = 0.0f64;
    let mut lower_witness = 0.0f64;
    for x in probes {
        identity_deviation = identity_deviation.max(lhs.apply(x).minus(&rhs.apply(x)).norm(PNorm::Inf));
        let xn = x.norm(PNorm::One);
        if xn > 0.0 {
            lower_witness = lower_witness.max(qtp.apply(x).norm(PNorm::One) / xn);
        }
    }
    Ok(OffDiagOutcome {
        t_prime,
        k,
        identity_deviation,
        lower_witness,
        probes_checked: probes.len(),
    })
}

/// Coordinate subspace `Y ⊆ range(P)` picked by [`preserve_subspace_heuristic`].
#[derive(Clone, Debug)]
pub struct SubspaceChoice {
    /// global indices spanning `Y`
    pub y: Vec<usize>,
    /// global indices supporting `(I−P)TP(Y)`
    pub x: Vec<usize>,
    /// smallest singular value of `(I−P)TP` compressed to `Y`
    pub lower_bound: f64,
}

/// Greedy coordinate selection: walks the model coordinates of
/// `range(P)` (P = block 0 of `d`) by decreasing column norm of `(I−P)TP`
/// and keeps each one that leaves the smallest singular value `≥ theta`.
pub fn preserve_subspace_heuristic(
    t: &OperatorExpr,
    d: &Decomposition,
    theta: f64,
    model: &FiniteModel,
) -> Result<SubspaceChoice> {
    const STAGE: &str = "preserve_subspace_heuristic";
    // negated so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(theta > 0.0) {
        return Err(Error::InvalidInput("theta must be positive".into()));
    }
    let p = OperatorExpr::proj(d, 0);
    let qtp = OperatorExpr::chain(&[OperatorExpr::identity().minus(&p), t.clone(), p]);
    let mut cands: Vec<(usize, SeqVector, f64)> = (0..model.block_dim)
        .map(|j| {
            let k = d.pair(0, j);
            let col = qtp.column(k);
            let n = col.norm(PNorm::Two);
            (k, col, n)
        })
        .collect();
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let best = cands.first().map_or(0.0, |c| c.2);
    let mut chosen: Vec<&(usize, SeqVector, f64)> = Vec::new();
    let mut lower = f64::INFINITY;
    for c in &cands {
        let mut trial = chosen.clone();
        trial.push(c);
        let s = smallest_singular(&trial);
        if s >= theta {
            chosen = trial;
            lower = s;
        }
    }
    if chosen.is_empty() {
        return Err(Error::precondition(
            STAGE,
            format!("no coordinate subspace reaches theta = {theta}; best achievable {best:.6e}"),
        ));
    }
    let mut y: Vec<usize> = chosen.iter().map(|c| c.0).collect();
    y.sort_unstable();
    let x: BTreeSet<usize> = chosen.iter().flat_map(|c| c.1.support()).collect();
    Ok(SubspaceChoice {
        y,
        x: x.into_iter().collect(),
        lower_bound: lower,
    })
}

fn smallest_singular(cols: &[&(usize, SeqVector, f64)]) -> f64 {
    let rows: BTreeSet<usize> = cols.iter().flat_map(|c| c.1.support()).collect();
    let rows: Vec<usize> = rows.into_iter().collect();
    if rows.len() < cols.len() {
        return 0.0;
    }
    let m = DMatrix::from_fn(rows.len(), cols.len(), |r, c| cols[c].1.get(rows[r]));
    m.singular_values().min()
}

/// `D₂ = interleave(D₁)` with `y` moved into block 1, so block 0 of `D₂`
/// is `range(I−P)` and block 1 contains `Y`.
pub fn corner_decomposition(d1: &Decomposition, y: &[usize]) -> Decomposition {
    d1.interleave().reassign(1, y.iter().copied())
}

/// Depth of shift words in the corner similarity (`L₁ T R₂`).
pub const CORNER_SIMILARITY_DEPTH: usize = 2;

#[derive(Clone, Debug)]
pub struct CornerSimilarity {
    pub chain: SimilarityChain,
    /// `ΦTΦ⁻¹`
    pub conjugated: OperatorExpr,
    /// `[T₁, corner, T₂, T₃]`, with `corner = L₁TR₂G`
    pub blocks: [OperatorExpr; 4],
    pub d2: Decomposition,
    pub a: OperatorExpr,
    pub g: OperatorExpr,
    pub g_inv: OperatorExpr,
    /// coordinates of `(I−P)𝒳` where `A` differs from the identity
    pub active_window: Vec<usize>,
    pub condition: f64,
    /// `‖G(A+P) − I‖` and `‖(A+P)G − I‖` on in-margin probes
    pub inverse_deviation: (f64, f64),
    /// largest `‖(corner − L₁)e_k‖` on in-margin probes
    pub corner_residual: f64,
    pub probe_columns: Vec<usize>,
}

impl CornerSimilarity {
    pub fn report(&self) -> Value {
        json!({
            "active_window": self.active_window.len(),
            "condition": self.condition,
            "g_times_inverse": self.inverse_deviation.0,
            "inverse_times_g": self.inverse_deviation.1,
            "corner_residual": self.corner_residual,
            "probe_columns": self.probe_columns.len(),
        })
    }
}

/// Model coordinates of `d` in blocks `≤ top`.
pub fn model_columns(model: &FiniteModel, d: &Decomposition, top: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=top.min(model.blocks - 1))
        .flat_map(|b| (0..model.block_dim).map(move |j| (b, j)))
        .map(|(b, j)| d.pair(b, j))
        .collect();
    v.sort_unstable();
    v
}

/// Similarity taking `T` to `[[*, L₁], [*, *]]` on `𝒳 ⊕ 𝒳`, with
/// `P` the projection onto block 0 of `d1`.
///
/// `A = (I−P)TR₂` must equal the identity on `(I−P)𝒳` away from a finite
/// window inside the model; `T₀` is the dense inverse there and the
/// identity elsewhere, so `G = I + T₀(I−P) − T₀A` has inverse `A + P`.
pub fn corner_shift_similarity(
    t: &OperatorExpr,
    d1: &Decomposition,
    y: &[usize],
    model: &FiniteModel,
    tol: f64,
) -> Result<CornerSimilarity> {
    const STAGE: &str = "corner_shift_similarity";
    if y.is_empty() {
        return Err(Error::precondition(STAGE, "Y is empty"));
    }
    if let Some(&k) = y.iter().find(|&&k| d1.block_of(k) != 0) {
        return Err(Error::precondition(STAGE, format!("index {k} of Y is outside range(P)")));
    }
    let p = OperatorExpr::proj(d1, 0);
    let q = OperatorExpr::identity().minus(&p);
    // (I−P)TP restricted to Y must be injective
    let qtp = OperatorExpr::chain(&[q.clone(), t.clone(), p.clone()]);
    let cols: Vec<(usize, SeqVector, f64)> = y.iter().map(|&k| (k, qtp.column(k), 0.0)).collect();
    let refs: Vec<&(usize, SeqVector, f64)> = cols.iter().collect();
    let sigma = smallest_singular(&refs);
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(sigma > tol) {
        return Err(Error::precondition(
            STAGE,
            format!("(I-P)TP restricted to Y is degenerate: smallest singular value {sigma:.3e}"),
        ));
    }
    let d2 = corner_decomposition(d1, y);
    let l1 = OperatorExpr::left_shift(d1);
    let r1 = OperatorExpr::right_shift(d1);
    let l2 = OperatorExpr::left_shift(&d2);
    let r2 = OperatorExpr::right_shift(&d2);
    let q2 = OperatorExpr::proj(&d2, 0);
    let a = OperatorExpr::chain(&[q2.clone(), t.clone(), r2.clone()]);

    // closure of the set where A e_k ≠ e_k on (I−P)𝒳
    let in_model = |k: usize| model.local_of(d1, k).is_some();
    let mut window: BTreeSet<usize> = BTreeSet::new();
    let mut queue: VecDeque<usize> = model_columns(model, d1, model.blocks - 1)
        .into_iter()
        .filter(|&k| d1.block_of(k) != 0)
        .collect();
    let mut seen: BTreeSet<usize> = queue.iter().copied().collect();
    while let Some(k) = queue.pop_front() {
        let dev = a.column(k).minus(&SeqVector::unit(k));
        if dev.is_empty() || dev.norm(PNorm::Inf) == 0.0 {
            continue;
        }
        window.insert(k);
        for r in dev.support() {
            if !in_model(r) {
                let (b, j) = d1.unpair(r);
                return Err(Error::Margin {
                    stage: STAGE.into(),
                    required_blocks: (b + 1 + CORNER_SIMILARITY_DEPTH).max(model.blocks),
                    message: format!(
                        "A moves mass to index {r} (block {b}, slot {j}) outside the window of \
                         {} slots per block",
                        model.block_dim
                    ),
                });
            }
            window.insert(r);
            if seen.insert(r) {
                queue.push_back(r);
            }
        }
    }
    let w: Vec<usize> = window.into_iter().collect();
    let n = w.len();
    let (t0, condition) = if n == 0 {
        (q2.clone(), 1.0)
    } else {
        let mw = a.compress(&w);
        let norm = crate::matrix2x2::dense_norm(&mw, PNorm::One);
        let inv = mw.clone().lu().try_inverse().ok_or_else(|| Error::Singular {
            stage: STAGE.into(),
            message: "A restricted to its active window is singular".into(),
        })?;
        let cond = norm * crate::matrix2x2::dense_norm(&inv, PNorm::One);
        if !cond.is_finite() || cond > 1.0 / tol {
            return Err(Error::Singular {
                stage: STAGE.into(),
                message: format!("condition estimate {cond:.3e} exceeds 1/tol"),
            });
        }
        let mut trip = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let v = inv[(r, c)] - if r == c { 1.0 } else { 0.0 };
                if v != 0.0 {
                    trip.push((w[r], w[c], v));
                }
            }
        }
        let corr = OperatorExpr::sparse(SparseOperator::from_triplets(trip)?);
        (q2.plus(&corr), cond)
    };
    let id = OperatorExpr::identity();
    let g = OperatorExpr::add(vec![
        id.clone(),
        OperatorExpr::compose(&t0, &q2),
        OperatorExpr::compose(&t0, &a).neg(),
    ]);
    let g_inv = a.plus(&p);

    let margin = model.margin_block(CORNER_SIMILARITY_DEPTH).ok_or_else(|| Error::Margin {
        stage: STAGE.into(),
        required_blocks: CORNER_SIMILARITY_DEPTH + 1,
        message: "no in-margin probes".into(),
    })?;
    let probe_columns = model_columns(model, d1, margin);
    let gl = OperatorExpr::compose(&g, &g_inv);
    let gr = OperatorExpr::compose(&g_inv, &g);
    let corner = OperatorExpr::chain(&[l1.clone(), t.clone(), r2.clone(), g.clone()]);
    let mut dev = (0.0f64, 0.0f64);
    let mut corner_residual = 0.0f64;
    for &k in &probe_columns {
        let e = SeqVector::unit(k);
        dev.0 = dev.0.max(gl.apply(&e).minus(&e).norm(PNorm::Inf));
        dev.1 = dev.1.max(gr.apply(&e).minus(&e).norm(PNorm::Inf));
        corner_residual = corner_residual.max(corner.apply(&e).minus(&l1.apply(&e)).norm(PNorm::Inf));
    }
    if dev.0 > tol || dev.1 > tol {
        return Err(Error::Relation {
            identity: "G(A+P) = (A+P)G = I".into(),
            probe: 0,
            deviation: dev.0.max(dev.1),
        });
    }
    if corner_residual > tol {
        return Err(Error::Relation {
            identity: "L1 T R2 G = L1".into(),
            probe: 0,
            deviation: corner_residual,
        });
    }

    let mut chain = SimilarityChain::new();
    chain.push("split", OperatorExpr::split(&l1, &l2), OperatorExpr::merge(&r1, &r2));
    let zero = OperatorExpr::zero();
    chain.push(
        "g-conjugation",
        OperatorExpr::block2x2(&id, &zero, &zero, &g_inv),
        OperatorExpr::block2x2(&id, &zero, &zero, &g),
    );
    let conjugated = chain.conjugate(t);
    let blocks = [
        OperatorExpr::chain(&[l1.clone(), t.clone(), r1.clone()]),
        corner,
        OperatorExpr::chain(&[g_inv.clone(), l2.clone(), t.clone(), r1]),
        OperatorExpr::chain(&[g_inv.clone(), l2, t.clone(), r2, g.clone()]),
    ];
    Ok(CornerSimilarity {
        chain,
        conjugated,
        blocks,
        d2,
        a,
        g,
        g_inv,
        active_window: w,
        condition,
        inverse_deviation: dev,
        corner_residual,
        probe_columns,
    })
}

/// Caller-supplied answer to the compact / non-compact dichotomy.
#[derive(Clone, Debug)]
pub enum Certificate {
    Compact,
    NonCompact {
        lambda: f64,
        /// `P` is the projection onto block 0 of this decomposition
        p: Decomposition,
        v: OperatorExpr,
        vp: OperatorExpr,
        y: Option<Vec<usize>>,
        theta: f64,
    },
}

const NONCOMPACT_FIELDS: &str = "lambda, P, V, Vp, theta (Y optional)";

impl Certificate {
    pub fn to_json(&self) -> Value {
        match self {
            Certificate::Compact => json!({"format": "cert/v1", "route": "compact"}),
            Certificate::NonCompact {
                lambda,
                p,
                v,
                vp,
                y,
                theta,
            } => {
                let mut o = json!({
                    "format": "cert/v1",
                    "route": "noncompact",
                    "lambda": lambda,
                    "P": p.to_json(),
                    "V": v.to_json(),
                    "Vp": vp.to_json(),
                    "theta": theta,
                });
                if let Some(y) = y {
                    o["Y"] = json!(y);
                }
                o
            }
        }
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "cert/v1")?;
        match v.get("route").and_then(Value::as_str) {
            Some("compact") => Ok(Certificate::Compact),
            Some("noncompact") => {
                let field = |k: &str| {
                    v.get(k).ok_or_else(|| {
                        Error::precondition(
                            "certificate",
                            format!("non-compact route is missing `{k}`; required inputs: {NONCOMPACT_FIELDS}"),
                        )
                    })
                };
                let y = match v.get("Y") {
                    None | Some(Value::Null) => None,
                    Some(Value::Array(a)) => Some(a.iter().map(parse_index).collect::<Result<Vec<_>>>()?),
                    Some(_) => return Err(Error::Parse("`Y` must be an array of indices".into())),
                };
                Ok(Certificate::NonCompact {
                    lambda: parse_value(field("lambda")?)?,
                    p: Decomposition::from_json(field("P")?)?,
                    v: OperatorExpr::from_json(field("V")?)?,
                    vp: OperatorExpr::from_json(field("Vp")?)?,
                    y,
                    theta: parse_value(field("theta")?)?,
                })
            }
            _ => Err(Error::precondition(
                "certificate",
                format!("route must be `compact` or `noncompact`; the non-compact route needs {NONCOMPACT_FIELDS}"),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub route: &'static str,
    pub witness: CommutatorWitness,
    /// per-stage summaries, in execution order
    pub stages: Vec<(String, Value)>,
}

impl PipelineOutcome {
    pub fn report(&self) -> Value {
        let stages: serde_json::Map<String, Value> = self.stages.iter().cloned().collect();
        json!({
            "route": self.route,
            "stages": stages,
            "probes_checked": self.witness.probes_checked,
            "max_residual": self.witness.max_residual,
            "residual_cert": self.witness.residual_cert,
        })
    }
}

/// Number of probe vectors for the involution relations.
const RELATION_PROBES: usize = 128;

/// Commutator witness for `T` on ℓ₁. The compact route hands a finitely
/// supported `T` to the compact pipeline. The non-compact route conjugates
/// by the swap involution, picks `Y`, moves `L` into the corner, factors the
/// resulting 2×2 operator and pulls the witness back through every
/// similarity.
pub fn ell1_main_pipeline(
    t: &OperatorExpr,
    model: &FiniteModel,
    cert: &Certificate,
    tol: f64,
) -> Result<PipelineOutcome> {
    match cert {
        Certificate::Compact => {
            let sparse = match t.node() {
                crate::expr::Node::Sparse(s) => s.clone(),
                _ if t.is_structurally_zero() => SparseOperator::zero(),
                _ => {
                    return Err(Error::precondition(
                        "ell1_main_pipeline",
                        "the compact route needs a finitely supported operator",
                    ))
                }
            };
            let out = compact_factor(&sparse, PNorm::One, 0.01, 256).map_err(|e| e.with_stage("compact_factor"))?;
            let mut stages = vec![("compact_factor".to_string(), json!({"case": format!("{:?}", out.case)}))];
            let witness = out.witness().clone();
            stages.push(("verify".into(), json!({"max_residual": witness.max_residual})));
            Ok(PipelineOutcome {
                route: "compact",
                witness,
                stages,
            })
        }
        Certificate::NonCompact {
            lambda,
            p,
            v,
            vp,
            y,
            theta,
        } => {
            let mut stages = Vec::new();
            let probes = random_probes(0x5eed, RELATION_PROBES, 256, 8, true);
            let pe = OperatorExpr::proj(p, 0);
            let inv = swap_involution(&pe, v, vp, &probes).map_err(|e| e.with_stage("swap_involution"))?;
            stages.push(("swap_involution".into(), json!({"square_deviation": inv.square_deviation(&probes)})));
            let shifted = t.minus(&OperatorExpr::scale(*lambda, &OperatorExpr::identity()));
            let off = offdiag_transform(&shifted, &inv, &probes)?;
            stages.push(("offdiag_transform".into(), off.report()));
            // the involution commutes with λI, so T itself is carried forward
            let t_prime = inv.conjugate(t);
            let y = match y {
                Some(y) => y.clone(),
                None => {
                    let choice = preserve_subspace_heuristic(&t_prime, p, *theta, model)
                        .map_err(|e| e.with_stage("ell1_main_pipeline"))?;
                    stages.push((
                        "preserve_subspace_heuristic".into(),
                        json!({"dim_y": choice.y.len(), "lower_bound": choice.lower_bound}),
                    ));
                    choice.y
                }
            };
            let cs = corner_shift_similarity(&t_prime, p, &y, model, tol).map_err(|e| e.with_stage("ell1_main_pipeline"))?;
            stages.push(("corner_shift_similarity".into(), cs.report()));
            let [t1, _, t2, t3] = &cs.blocks;
            let sc = shift_corner_factor(t1, t2, t3, model, p, tol).map_err(|e| e.with_stage("ell1_main_pipeline"))?;
            stages.push(("shift_corner_factor".into(), sc.report()));
            let mut chain = inv.chain();
            chain.factors.extend(cs.chain.factors.iter().cloned());
            let mut witness = chain.pull_back_witness(&sc.witness, t);
            witness.kind = if witness.residual_cert == 0.0 {
                WitnessKind::Exact
            } else {
                WitnessKind::CertifiedApprox
            };
            let depth = corner_depth() + CORNER_SIMILARITY_DEPTH;
            let top = model.margin_block(depth).unwrap_or(0);
            let cols = model_columns(model, p, top);
            witness.verify(cols.iter().copied());
            stages.push(("verify".into(), json!({"max_residual": witness.max_residual, "columns": cols.len()})));
            if witness.max_residual > tol {
                return Err(Error::NotConverged {
                    stage: "ell1_main_pipeline".into(),
                    achieved: witness.max_residual,
                });
            }
            Ok(PipelineOutcome {
                route: "noncompact",
                witness,
                stages,
            })
        }
    }
}

/// `T = Transfer(D₂:1 → D₂:0) + E`: maps block 1 of `D₂` onto `range(I−P)`
/// slot by slot, perturbed by `E`.
pub fn corner_fixture(d1: &Decomposition, y: &[usize], e: &SparseOperator) -> OperatorExpr {
    let d2 = corner_decomposition(d1, y);
    OperatorExpr::transfer((&d2, 1), (&d2, 0)).plus(&OperatorExpr::sparse(e.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{block_sparse_operator, model_sparse_operator};

    fn dense2(entries: &[(usize, usize, f64)]) -> OperatorExpr {
        OperatorExpr::sparse(SparseOperator::from_triplets(entries.to_vec()).unwrap())
    }

    #[test]
    fn two_dimensional_involution() {
        let p = dense2(&[(0, 0, 1.0)]);
        let v = dense2(&[(1, 0, 1.0)]);
        let vp = dense2(&[(0, 1, 1.0)]);
        // the model space is span{e0, e1}
        let probes = vec![SeqVector::unit(0), SeqVector::unit(1), SeqVector::from_pairs([(0, 2.0), (1, -3.0)]).unwrap()];
        // I − P acts on the ambient sequence space, so restrict it to the model
        let id2 = dense2(&[(0, 0, 1.0), (1, 1, 1.0)]);
        let inv = swap_involution(&p, &v, &vp, &probes).unwrap();
        let s = OperatorExpr::compose(&inv.s(), &id2).compress(&[0, 1]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = DMatrix::from_row_slice(2, 2, &[h, h, h, -h]);
        assert!((s - expect).amax() <= 1e-15);
        assert_eq!(inv.square_deviation(&probes), 0.0);
    }

    #[test]
    fn pairing_swap_is_exact() {
        let d = Decomposition::dyadic();
        let (p, v, vp) = pairing_swap(&d);
        let probes = random_probes(3, 64, 256, 8, true);
        let inv = swap_involution(&p, &v, &vp, &probes).unwrap();
        assert_eq!(inv.square_deviation(&probes), 0.0);
    }

    #[test]
    fn missing_swap_rejected() {
        let d = Decomposition::dyadic();
        let p = OperatorExpr::proj(&d, 0);
        let z = OperatorExpr::zero();
        let probes = random_probes(3, 16, 64, 4, true);
        let err = swap_involution(&p, &z, &z, &probes).unwrap_err();
        assert!(matches!(err, Error::Relation { ref identity, .. } if identity == "VV' + V'V = I"));
    }

    #[test]
    fn offdiag_identity_exact() {
        let d = Decomposition::dyadic();
        let (p, v, vp) = pairing_swap(&d);
        let probes = random_probes(4, 128, 256, 8, true);
        let inv = swap_involution(&p, &v, &vp, &probes).unwrap();
        let zero = offdiag_transform(&OperatorExpr::zero(), &inv, &probes).unwrap();
        assert_eq!(zero.identity_deviation, 0.0);
        assert_eq!(zero.lower_witness, 0.0);
        for seed in 0..5 {
            let t = OperatorExpr::sparse(block_sparse_operator(seed, &d, 3, 256, 40, true));
            let out = offdiag_transform(&t, &inv, &probes).unwrap();
            assert_eq!(out.identity_deviation, 0.0);
        }
    }

    #[test]
    fn offdiag_rank_one_inside_p() {
        let d = Decomposition::dyadic();
        let (p, v, vp) = pairing_swap(&d);
        let probes = random_probes(5, 64, 256, 8, true);
        let inv = swap_involution(&p, &v, &vp, &probes).unwrap();
        // e0 and e2 lie in block 0
        let t = dense2(&[(0, 2, 3.0)]);
        let out = offdiag_transform(&t, &inv, &probes).unwrap();
        for x in &probes {
            assert!(out.k.apply(x).is_empty() || out.k.apply(x).norm(PNorm::Inf) == 0.0);
        }
        assert_eq!(out.identity_deviation, 0.0);
    }

    #[test]
    fn heuristic_examples() {
        let d = Decomposition::dyadic();
        let model = FiniteModel::new(4, 3).unwrap();
        let (a, b, c) = (d.pair(0, 0), d.pair(0, 1), d.pair(0, 2));
        let (u, v, w) = (d.pair(1, 0), d.pair(1, 1), d.pair(1, 2));
        let t = dense2(&[(u, a, 1.0), (v, b, 0.5), (w, c, 0.01)]);
        let ch = preserve_subspace_heuristic(&t, &d, 0.1, &model).unwrap();
        assert_eq!(ch.y.len(), 2);
        assert!((ch.lower_bound - 0.5).abs() <= 1e-15);
        let perm = dense2(&[(u, b, 1.0), (v, a, 1.0)]);
        let ch = preserve_subspace_heuristic(&perm, &d, 0.5, &model).unwrap();
        assert_eq!(ch.y, {
            let mut y = vec![a, b];
            y.sort();
            y
        });
        assert!((ch.lower_bound - 1.0).abs() <= 1e-15);
        let err = preserve_subspace_heuristic(&OperatorExpr::zero(), &d, 0.1, &model).unwrap_err();
        assert!(err.to_string().contains("best achievable 0"));
    }

    fn fixture(seed: u64) -> (Decomposition, Vec<usize>, OperatorExpr, FiniteModel) {
        let d1 = Decomposition::dyadic();
        let model = FiniteModel::new(12, 2).unwrap();
        let y = vec![d1.pair(0, 2), d1.pair(0, 5)];
        let e = model_sparse_operator(seed, &d1, model.block_dim, 2, 6, false).scaled(0.1);
        let t = corner_fixture(&d1, &y, &e);
        (d1, y, t, model)
    }

    #[test]
    fn corner_similarity_permutation_fixture() {
        for seed in 0..4 {
            let (d1, y, t, model) = fixture(seed);
            let cs = corner_shift_similarity(&t, &d1, &y, &model, 1e-10).unwrap();
            assert!(cs.inverse_deviation.0 <= 1e-10 && cs.inverse_deviation.1 <= 1e-10);
            assert!(cs.corner_residual <= 1e-10);
            assert!(cs.d2.block_of(y[0]) == 1 && cs.d2.block_of(y[1]) == 1);
            let probes = random_probes(seed, 16, 128, 4, false);
            assert!(cs.chain.round_trip_deviation(&probes) <= 1e-10);
        }
    }

    #[test]
    fn corner_similarity_rejects_degenerate() {
        let d1 = Decomposition::dyadic();
        let model = FiniteModel::new(12, 2).unwrap();
        let err = corner_shift_similarity(&OperatorExpr::zero(), &d1, &[0], &model, 1e-10).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }));
    }

    #[test]
    fn certificate_round_trip() {
        let d = Decomposition::dyadic();
        let (_, v, vp) = pairing_swap(&d);
        let c = Certificate::NonCompact {
            lambda: 0.5,
            p: d,
            v,
            vp,
            y: Some(vec![0, 2]),
            theta: 0.1,
        };
        let back = Certificate::from_json(&c.to_json()).unwrap();
        assert_eq!(back.to_json(), c.to_json());
        let err = Certificate::from_json(&json!({"format": "cert/v1", "route": "noncompact"})).unwrap_err();
        assert!(err.to_string().contains("required inputs"));
    }

    #[test]
    fn pipeline_compact_route() {
        let t = OperatorExpr::sparse(crate::probe::compactlike_operator(2, 0.5, 16));
        let model = FiniteModel::new(12, 2).unwrap();
        let out = ell1_main_pipeline(&t, &model, &Certificate::Compact, 1e-9).unwrap();
        assert!(out.witness.max_residual <= 1e-9);
    }

    #[test]
    fn pipeline_noncompact_route() {
        let d = Decomposition::dyadic();
        let (_, y, t_fix, model) = fixture(9);
        let (p, v, vp) = pairing_swap(&d);
        let probes = random_probes(1, 8, 64, 4, true);
        let inv = swap_involution(&p, &v, &vp, &probes).unwrap();
        // S T S lands back on the fixture
        let t = inv.conjugate(&t_fix);
        let cert = Certificate::NonCompact {
            lambda: 0.5,
            p: d,
            v,
            vp,
            y: Some(y),
            theta: 0.1,
        };
        let out = ell1_main_pipeline(&t, &model, &cert, 1e-8).unwrap();
        assert!(out.witness.max_residual <= 1e-8, "{}", out.witness.max_residual);
    }
}
