//! Lazy operator expressions over the unbounded index set.
//!
//! An [`OperatorExpr`] is an immutable DAG. Applying it to a finitely
//! supported vector is exact up to floating-point rounding in the sparse
//! leaves; shifts, projections and transfers move coordinates without
//! arithmetic. Shift series `T_D = Σ RⁿTLⁿ` are only built for inner
//! operators whose column blocks are structurally bounded, so evaluation on
//! a finitely supported vector is a finite sum.
//!
//! Pairs `(a, b) ∈ 𝒳 ⊕ 𝒳` are encoded on a single copy of ℕ by
//! `a_k ↦ 2k`, `b_k ↦ 2k + 1`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::decomposition::Decomposition;
use crate::error::{Error, Result};
use crate::space::{expect_format, parse_index, parse_value, op_norm_bound, PNorm, SeqVector, SparseOperator};

#[derive(Clone, PartialEq)]
pub struct OperatorExpr {
    node: Arc<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Sparse(SparseOperator),
    Identity,
    LeftShift(Decomposition),
    RightShift(Decomposition),
    Proj(Decomposition, usize),
    PartialSumProj(Decomposition, usize),
    Scale(f64, OperatorExpr),
    Add(Vec<OperatorExpr>),
    /// `left ∘ right`
    Compose(OperatorExpr, OperatorExpr),
    /// `Σₙ RⁿTLⁿ`; `cols` is the certified column-block range of the inner operator.
    ShiftSeries {
        decomp: Decomposition,
        inner: OperatorExpr,
        cols: (usize, usize),
    },
    /// Slot-preserving map from block `src.1` of `src.0` onto block `dst.1`
    /// of `dst.0`, zero on every other block.
    Transfer {
        src: (Decomposition, usize),
        dst: (Decomposition, usize),
    },
    /// `[[a, b], [c, d]]` on the encoded sum.
    Block2x2(Box<[OperatorExpr; 4]>),
    /// `x ↦ (E₁x, E₂x)`
    Split(OperatorExpr, OperatorExpr),
    /// `(a, b) ↦ E₁a + E₂b`
    Merge(OperatorExpr, OperatorExpr),
}

impl std::fmt::Debug for OperatorExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.node.fmt(f)
    }
}

/// Set of blocks `lo..=hi` (`hi = None` for unbounded), or nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BlockRange {
    Empty,
    Range { lo: usize, hi: Option<usize> },
}

impl BlockRange {
    pub const ALL: BlockRange = BlockRange::Range { lo: 0, hi: None };

    pub fn single(i: usize) -> Self {
        BlockRange::Range { lo: i, hi: Some(i) }
    }

    pub fn bounded(lo: usize, hi: usize) -> Self {
        if lo > hi {
            BlockRange::Empty
        } else {
            BlockRange::Range { lo, hi: Some(hi) }
        }
    }

    fn from_blocks<I: IntoIterator<Item = usize>>(blocks: I) -> Self {
        blocks
            .into_iter()
            .fold(BlockRange::Empty, |acc, b| acc.union(BlockRange::single(b)))
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, BlockRange::Empty)
    }

    /// Upper end, `None` if empty or unbounded.
    pub fn upper(&self) -> Option<usize> {
        match self {
            BlockRange::Range { hi, .. } => *hi,
            BlockRange::Empty => None,
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            BlockRange::Empty => true,
            BlockRange::Range { hi, .. } => hi.is_some(),
        }
    }

    pub fn contains(&self, b: usize) -> bool {
        match *self {
            BlockRange::Empty => false,
            BlockRange::Range { lo, hi } => b >= lo && hi.is_none_or(|h| b <= h),
        }
    }

    pub fn union(self, other: Self) -> Self {
        match (self, other) {
            (BlockRange::Empty, x) | (x, BlockRange::Empty) => x,
            (BlockRange::Range { lo: a, hi: b }, BlockRange::Range { lo: c, hi: d }) => {
                BlockRange::Range {
                    lo: a.min(c),
                    hi: b.zip(d).map(|(x, y)| x.max(y)),
                }
            }
        }
    }

    pub fn intersect(self, other: Self) -> Self {
        match (self, other) {
            (BlockRange::Empty, _) | (_, BlockRange::Empty) => BlockRange::Empty,
            (BlockRange::Range { lo: a, hi: b }, BlockRange::Range { lo: c, hi: d }) => {
                let lo = a.max(c);
                let hi = match (b, d) {
                    (Some(x), Some(y)) => Some(x.min(y)),
                    (x, None) => x,
                    (None, y) => y,
                };
                match hi {
                    Some(h) if h < lo => BlockRange::Empty,
                    _ => BlockRange::Range { lo, hi },
                }
            }
        }
    }

    pub fn shift_up(self, n: usize) -> Self {
        match self {
            BlockRange::Empty => BlockRange::Empty,
            BlockRange::Range { lo, hi } => BlockRange::Range {
                lo: lo + n,
                hi: hi.map(|h| h + n),
            },
        }
    }

    pub fn shift_down(self, n: usize) -> Self {
        match self {
            BlockRange::Empty => BlockRange::Empty,
            BlockRange::Range { lo, hi } => match hi {
                Some(h) if h < n => BlockRange::Empty,
                _ => BlockRange::Range {
                    lo: lo.saturating_sub(n),
                    hi: hi.map(|h| h - n),
                },
            },
        }
    }

    fn span(&self) -> Option<usize> {
        match *self {
            BlockRange::Empty => Some(0),
            BlockRange::Range { lo, hi } => hi.map(|h| h - lo + 1),
        }
    }
}

// Block sweeps beyond this fall back to the coarse unbounded rule.
const SERIES_SWEEP_LIMIT: usize = 4096;

fn encode(a: &SeqVector, b: &SeqVector) -> SeqVector {
    SeqVector::accumulate(
        a.iter()
            .map(|(k, v)| (2 * k, v))
            .chain(b.iter().map(|(k, v)| (2 * k + 1, v))),
    )
}

fn decode(x: &SeqVector) -> (SeqVector, SeqVector) {
    let a = SeqVector::accumulate(x.iter().filter(|(k, _)| k % 2 == 0).map(|(k, v)| (k / 2, v)));
    let b = SeqVector::accumulate(x.iter().filter(|(k, _)| k % 2 == 1).map(|(k, v)| (k / 2, v)));
    (a, b)
}

/// Encodes a pair of vectors into the single-sequence model of `𝒳 ⊕ 𝒳`.
pub fn encode_pair(a: &SeqVector, b: &SeqVector) -> SeqVector {
    encode(a, b)
}

/// Inverse of [`encode_pair`].
pub fn decode_pair(x: &SeqVector) -> (SeqVector, SeqVector) {
    decode(x)
}

impl OperatorExpr {
    fn from_node(node: Node) -> Self {
        OperatorExpr { node: Arc::new(node) }
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    pub fn sparse(t: SparseOperator) -> Self {
        Self::from_node(Node::Sparse(t))
    }

    pub fn zero() -> Self {
        Self::sparse(SparseOperator::zero())
    }

    pub fn identity() -> Self {
        Self::from_node(Node::Identity)
    }

    pub fn left_shift(d: &Decomposition) -> Self {
        Self::from_node(Node::LeftShift(d.clone()))
    }

    pub fn right_shift(d: &Decomposition) -> Self {
        Self::from_node(Node::RightShift(d.clone()))
    }

    pub fn proj(d: &Decomposition, i: usize) -> Self {
        Self::from_node(Node::Proj(d.clone(), i))
    }

    /// `P̃_n = Σ_{i ≤ n} P_i`
    pub fn partial_sum_proj(d: &Decomposition, n: usize) -> Self {
        Self::from_node(Node::PartialSumProj(d.clone(), n))
    }

    pub fn scale(c: f64, e: &OperatorExpr) -> Self {
        Self::from_node(Node::Scale(c, e.clone()))
    }

    pub fn add(terms: Vec<OperatorExpr>) -> Self {
        match terms.len() {
            0 => Self::zero(),
            1 => terms.into_iter().next().unwrap(),
            _ => Self::from_node(Node::Add(terms)),
        }
    }

    /// `left ∘ right`
    pub fn compose(left: &OperatorExpr, right: &OperatorExpr) -> Self {
        Self::from_node(Node::Compose(left.clone(), right.clone()))
    }

    /// Composition of a chain, applied right to left.
    pub fn chain(factors: &[OperatorExpr]) -> Self {
        let mut it = factors.iter().rev();
        let first = it.next().cloned().unwrap_or_else(Self::identity);
        it.fold(first, |acc, f| Self::compose(f, &acc))
    }

    pub fn plus(&self, other: &OperatorExpr) -> Self {
        Self::add(vec![self.clone(), other.clone()])
    }

    pub fn minus(&self, other: &OperatorExpr) -> Self {
        Self::add(vec![self.clone(), Self::scale(-1.0, other)])
    }

    pub fn neg(&self) -> Self {
        Self::scale(-1.0, self)
    }

    /// `[a, b] = a∘b − b∘a`
    pub fn commutator(a: &OperatorExpr, b: &OperatorExpr) -> Self {
        Self::compose(a, b).minus(&Self::compose(b, a))
    }

    pub fn transfer(src: (&Decomposition, usize), dst: (&Decomposition, usize)) -> Self {
        Self::from_node(Node::Transfer {
            src: (src.0.clone(), src.1),
            dst: (dst.0.clone(), dst.1),
        })
    }

    pub fn block2x2(a: &OperatorExpr, b: &OperatorExpr, c: &OperatorExpr, d: &OperatorExpr) -> Self {
        Self::from_node(Node::Block2x2(Box::new([a.clone(), b.clone(), c.clone(), d.clone()])))
    }

    pub fn split(e1: &OperatorExpr, e2: &OperatorExpr) -> Self {
        Self::from_node(Node::Split(e1.clone(), e2.clone()))
    }

    pub fn merge(e1: &OperatorExpr, e2: &OperatorExpr) -> Self {
        Self::from_node(Node::Merge(e1.clone(), e2.clone()))
    }

    /// `T_D = Σ RⁿTLⁿ`. The inner operator must annihilate every block of
    /// `d` above some finite `m`, as established by [`col_blocks`](Self::col_blocks).
    pub fn shift_series(d: &Decomposition, inner: &OperatorExpr) -> Result<Self> {
        let cols = inner.col_blocks(d);
        let range = match cols {
            BlockRange::Empty => (1, 0),
            BlockRange::Range { lo, hi: Some(hi) } => (lo, hi),
            BlockRange::Range { lo, hi: None } => {
                return Err(Error::MissingSeriesCertificate(format!(
                    "inner operator may act on every block from {lo} upwards; \
                     the series need not converge strongly"
                )))
            }
        };
        Ok(Self::from_node(Node::ShiftSeries {
            decomp: d.clone(),
            inner: inner.clone(),
            cols: range,
        }))
    }

    /// Structurally zero (empty sparse leaf, zero scale, or built from such).
    pub fn is_structurally_zero(&self) -> bool {
        match &*self.node {
            Node::Sparse(t) => t.is_zero(),
            Node::Scale(c, e) => *c == 0.0 || e.is_structurally_zero(),
            Node::Add(v) => v.iter().all(|e| e.is_structurally_zero()),
            Node::Compose(a, b) => a.is_structurally_zero() || b.is_structurally_zero(),
            Node::ShiftSeries { inner, .. } => inner.is_structurally_zero(),
            Node::Block2x2(b) => b.iter().all(|e| e.is_structurally_zero()),
            Node::Split(a, b) | Node::Merge(a, b) => {
                a.is_structurally_zero() && b.is_structurally_zero()
            }
            _ => false,
        }
    }

    pub fn apply(&self, x: &SeqVector) -> SeqVector {
        if x.is_empty() {
            return SeqVector::new();
        }
        match &*self.node {
            Node::Sparse(t) => t.apply(x),
            Node::Identity => x.clone(),
            Node::LeftShift(d) => d.shift_left(x),
            Node::RightShift(d) => d.shift_right(x),
            Node::Proj(d, i) => d.project(*i, x),
            Node::PartialSumProj(d, n) => d.project_partial(*n, x),
            Node::Scale(c, e) => e.apply(x).scaled(*c),
            Node::Add(terms) => {
                let mut acc = SeqVector::new();
                for t in terms {
                    acc.axpy(1.0, &t.apply(x));
                }
                acc
            }
            Node::Compose(a, b) => a.apply(&b.apply(x)),
            Node::ShiftSeries { decomp, inner, cols } => {
                series_apply(decomp, inner, x, Some(*cols), decomp.max_block(x).unwrap_or(0))
            }
            Node::Transfer { src, dst } => SeqVector::accumulate(x.iter().filter_map(|(k, v)| {
                let (i, j) = src.0.unpair(k);
                (i == src.1).then(|| (dst.0.pair(dst.1, j), v))
            })),
            Node::Block2x2(b) => {
                let (x1, x2) = decode(x);
                let y1 = b[0].apply(&x1).plus(&b[1].apply(&x2));
                let y2 = b[2].apply(&x1).plus(&b[3].apply(&x2));
                encode(&y1, &y2)
            }
            Node::Split(e1, e2) => encode(&e1.apply(x), &e2.apply(x)),
            Node::Merge(e1, e2) => {
                let (a, b) = decode(x);
                e1.apply(&a).plus(&e2.apply(&b))
            }
        }
    }

    /// Column `k`, i.e. the image of `e_k`.
    pub fn column(&self, k: usize) -> SeqVector {
        self.apply(&SeqVector::unit(k))
    }

    /// Blocks of `d` in which the range of this operator may lie.
    pub fn row_blocks(&self, d: &Decomposition) -> BlockRange {
        self.push(d, BlockRange::ALL)
    }

    /// Blocks of `d` that this operator does not structurally annihilate.
    pub fn col_blocks(&self, d: &Decomposition) -> BlockRange {
        self.pull(d, BlockRange::ALL)
    }

    /// Output blocks reachable from inputs supported in `s`.
    pub fn push(&self, d: &Decomposition, s: BlockRange) -> BlockRange {
        if s.is_empty() {
            return BlockRange::Empty;
        }
        match &*self.node {
            Node::Sparse(t) => BlockRange::from_blocks(
                t.entries()
                    .filter(|&(_, c, _)| s.contains(d.block_of(c)))
                    .map(|(r, _, _)| d.block_of(r)),
            ),
            Node::Identity => s,
            Node::LeftShift(e) if e == d => s.shift_down(1),
            Node::RightShift(e) if e == d => s.shift_up(1),
            Node::LeftShift(_) | Node::RightShift(_) => BlockRange::ALL,
            Node::Proj(e, i) if e == d => s.intersect(BlockRange::single(*i)),
            Node::PartialSumProj(e, n) if e == d => s.intersect(BlockRange::bounded(0, *n)),
            // coordinate projections never move an index
            Node::Proj(..) | Node::PartialSumProj(..) => s,
            Node::Scale(c, e) => {
                if *c == 0.0 {
                    BlockRange::Empty
                } else {
                    e.push(d, s)
                }
            }
            Node::Add(v) => v
                .iter()
                .fold(BlockRange::Empty, |acc, e| acc.union(e.push(d, s))),
            Node::Compose(a, b) => a.push(d, b.push(d, s)),
            Node::ShiftSeries { decomp, inner, .. } if decomp == d => match s.upper() {
                Some(hi) if hi <= SERIES_SWEEP_LIMIT => (0..=hi).fold(BlockRange::Empty, |acc, n| {
                    acc.union(inner.push(d, s.shift_down(n)).shift_up(n))
                }),
                _ => match inner.push(d, BlockRange::ALL) {
                    BlockRange::Empty => BlockRange::Empty,
                    BlockRange::Range { lo, .. } => BlockRange::Range { lo, hi: None },
                },
            },
            Node::ShiftSeries { .. } => BlockRange::ALL,
            Node::Transfer { src, dst } => {
                if src.0 == *d && !s.contains(src.1) {
                    BlockRange::Empty
                } else if dst.0 == *d {
                    BlockRange::single(dst.1)
                } else {
                    BlockRange::ALL
                }
            }
            Node::Block2x2(_) | Node::Split(..) | Node::Merge(..) => {
                if self.is_structurally_zero() {
                    BlockRange::Empty
                } else {
                    BlockRange::ALL
                }
            }
        }
    }

    /// Input blocks whose image may meet the output blocks `s`.
    pub fn pull(&self, d: &Decomposition, s: BlockRange) -> BlockRange {
        if s.is_empty() {
            return BlockRange::Empty;
        }
        match &*self.node {
            Node::Sparse(t) => BlockRange::from_blocks(
                t.entries()
                    .filter(|&(r, _, _)| s.contains(d.block_of(r)))
                    .map(|(_, c, _)| d.block_of(c)),
            ),
            Node::Identity => s,
            Node::LeftShift(e) if e == d => s.shift_up(1),
            Node::RightShift(e) if e == d => s.shift_down(1),
            Node::LeftShift(_) | Node::RightShift(_) => BlockRange::ALL,
            Node::Proj(e, i) if e == d => s.intersect(BlockRange::single(*i)),
            Node::PartialSumProj(e, n) if e == d => s.intersect(BlockRange::bounded(0, *n)),
            Node::Proj(..) | Node::PartialSumProj(..) => s,
            Node::Scale(c, e) => {
                if *c == 0.0 {
                    BlockRange::Empty
                } else {
                    e.pull(d, s)
                }
            }
            Node::Add(v) => v
                .iter()
                .fold(BlockRange::Empty, |acc, e| acc.union(e.pull(d, s))),
            Node::Compose(a, b) => b.pull(d, a.pull(d, s)),
            Node::ShiftSeries { decomp, inner, .. } if decomp == d => match s.upper() {
                Some(hi) if hi <= SERIES_SWEEP_LIMIT => (0..=hi).fold(BlockRange::Empty, |acc, n| {
                    acc.union(inner.pull(d, s.shift_down(n)).shift_up(n))
                }),
                _ => match inner.pull(d, BlockRange::ALL) {
                    BlockRange::Empty => BlockRange::Empty,
                    BlockRange::Range { lo, .. } => BlockRange::Range { lo, hi: None },
                },
            },
            Node::ShiftSeries { .. } => BlockRange::ALL,
            Node::Transfer { src, dst } => {
                if dst.0 == *d && !s.contains(dst.1) {
                    BlockRange::Empty
                } else if src.0 == *d {
                    BlockRange::single(src.1)
                } else {
                    BlockRange::ALL
                }
            }
            Node::Block2x2(_) | Node::Split(..) | Node::Merge(..) => {
                if self.is_structurally_zero() {
                    BlockRange::Empty
                } else {
                    BlockRange::ALL
                }
            }
        }
    }

    /// Certified bound on the induced p-norm, with its derivation.
    pub fn norm_upper(&self, p: PNorm) -> NormCertificate {
        let mut builder = CertBuilder {
            p,
            steps: Vec::new(),
            memo: HashMap::new(),
        };
        let root = builder.visit(self);
        NormCertificate {
            p,
            bound: builder.steps[root].bound,
            root,
            derivation: builder.steps,
        }
    }

    /// Shorthand for `norm_upper(p).bound`.
    pub fn norm_bound(&self, p: PNorm) -> f64 {
        self.norm_upper(p).bound
    }

    /// Dense matrix of the compression to the given global indices.
    pub fn compress(&self, indices: &[usize]) -> DMatrix<f64> {
        let pos: HashMap<usize, usize> = indices.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let mut m = DMatrix::zeros(indices.len(), indices.len());
        for (c, &k) in indices.iter().enumerate() {
            for (r, v) in self.column(k).iter() {
                if let Some(&row) = pos.get(&r) {
                    m[(row, c)] = v;
                }
            }
        }
        m
    }

    pub fn to_json(&self) -> Value {
        let mut counts: HashMap<*const Node, usize> = HashMap::new();
        count_refs(self, &mut counts);
        let mut ser = Serializer {
            counts,
            ids: HashMap::new(),
            shared: Vec::new(),
        };
        let root = ser.visit(self);
        json!({"format": "expr/v1", "root": root, "shared": ser.shared})
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "expr/v1")?;
        let mut shared = Vec::new();
        if let Some(list) = v.get("shared") {
            let list = list
                .as_array()
                .ok_or_else(|| Error::Parse("`shared` must be an array".into()))?;
            for item in list {
                let e = parse_node(item, &shared)?;
                shared.push(e);
            }
        }
        parse_node(v.get("root").unwrap_or(&Value::Null), &shared)
    }
}

/// `Σ_{n ≤ upto} RⁿTLⁿ x` for any inner `T`. With `cols` given, terms where
/// `Lⁿx` misses the inner operator's column blocks are skipped.
pub fn series_apply(
    d: &Decomposition,
    inner: &OperatorExpr,
    x: &SeqVector,
    cols: Option<(usize, usize)>,
    upto: usize,
) -> SeqVector {
    let mut acc = SeqVector::new();
    let mut lx = x.clone();
    for n in 0..=upto {
        if lx.is_empty() {
            break;
        }
        let y = match cols {
            Some((lo, hi)) => {
                let r = lx.restrict(|k| {
                    let b = d.block_of(k);
                    b >= lo && b <= hi
                });
                inner.apply(&r)
            }
            None => inner.apply(&lx),
        };
        if !y.is_empty() {
            let mut z = y;
            for _ in 0..n {
                z = d.shift_right(&z);
            }
            acc.axpy(1.0, &z);
        }
        lx = d.shift_left(&lx);
    }
    acc
}

/// One node of a norm derivation.
#[derive(Clone, Debug, Serialize)]
pub struct DerivationStep {
    pub rule: String,
    pub bound: f64,
    /// Value of the general constant the sharp leaf bound replaces, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub general_bound: Option<f64>,
    pub children: Vec<usize>,
}

/// Compositional upper bound on an induced norm. `derivation` lists the
/// rule applied at each DAG node once; `root` indexes the top step.
#[derive(Clone, Debug, Serialize)]
pub struct NormCertificate {
    pub p: PNorm,
    pub bound: f64,
    pub root: usize,
    pub derivation: Vec<DerivationStep>,
}

struct CertBuilder {
    p: PNorm,
    steps: Vec<DerivationStep>,
    memo: HashMap<*const Node, usize>,
}

impl CertBuilder {
    fn push(&mut self, rule: impl Into<String>, bound: f64, general: Option<f64>, children: Vec<usize>) -> usize {
        self.steps.push(DerivationStep {
            rule: rule.into(),
            bound,
            general_bound: general,
            children,
        });
        self.steps.len() - 1
    }

    fn combine(&self, p: PNorm, a: f64, b: f64, rows: bool) -> f64 {
        // block norm of a 2-entry row or column of operator norms
        match (p, rows) {
            (PNorm::Two, _) => (a * a + b * b).sqrt(),
            (PNorm::One, false) | (PNorm::Inf, true) => a + b,
            _ => a.max(b),
        }
    }

    fn visit(&mut self, e: &OperatorExpr) -> usize {
        let key = Arc::as_ptr(&e.node);
        if let Some(&id) = self.memo.get(&key) {
            return id;
        }
        let p = self.p;
        let id = match &*e.node {
            Node::Sparse(t) => {
                let rule = match p {
                    PNorm::One => "sparse: max column sum",
                    PNorm::Inf => "sparse: max row sum",
                    PNorm::Two => "sparse: sqrt(colsum * rowsum)",
                };
                self.push(rule, op_norm_bound(t, p), None, vec![])
            }
            Node::Identity => self.push("identity", 1.0, None, vec![]),
            Node::LeftShift(d) | Node::RightShift(d) => self.push(
                "shift: partial permutation",
                1.0,
                Some(d.shift_power_bound()),
                vec![],
            ),
            Node::Proj(d, _) | Node::PartialSumProj(d, _) => {
                self.push("coordinate projection", 1.0, Some(d.c1()), vec![])
            }
            Node::Transfer { .. } => self.push("transfer: partial permutation", 1.0, None, vec![]),
            Node::Scale(c, inner) => {
                let ch = self.visit(inner);
                let b = c.abs() * self.steps[ch].bound;
                self.push("homogeneity", b, None, vec![ch])
            }
            Node::Add(v) => {
                let ch: Vec<usize> = v.iter().map(|t| self.visit(t)).collect();
                let b = ch.iter().map(|&i| self.steps[i].bound).sum();
                self.push("triangle inequality", b, None, ch)
            }
            Node::Compose(a, b) => {
                let ca = self.visit(a);
                let cb = self.visit(b);
                let bound = self.steps[ca].bound * self.steps[cb].bound;
                self.push("submultiplicativity", bound, None, vec![ca, cb])
            }
            Node::ShiftSeries { decomp, inner, cols } => {
                let ch = self.visit(inner);
                let inner_bound = self.steps[ch].bound;
                let col_span = if cols.0 > cols.1 { 0 } else { cols.1 - cols.0 + 1 } as f64;
                let row_span = inner.row_blocks(decomp).span().map_or(f64::INFINITY, |s| s as f64);
                let factor = match p {
                    PNorm::One => col_span,
                    PNorm::Inf => row_span,
                    PNorm::Two => (col_span * row_span).sqrt(),
                };
                let bound = if inner_bound == 0.0 || col_span == 0.0 {
                    0.0
                } else {
                    factor * inner_bound
                };
                let general = decomp.series_constant() * inner_bound;
                self.push(
                    format!("shift series: {factor} overlapping terms per coordinate"),
                    bound,
                    Some(general),
                    vec![ch],
                )
            }
            Node::Block2x2(b) => {
                let ch: Vec<usize> = b.iter().map(|t| self.visit(t)).collect();
                let n: Vec<f64> = ch.iter().map(|&i| self.steps[i].bound).collect();
                let bound = match p {
                    PNorm::One => (n[0] + n[2]).max(n[1] + n[3]),
                    PNorm::Inf => (n[0] + n[1]).max(n[2] + n[3]),
                    PNorm::Two => n.iter().map(|v| v * v).sum::<f64>().sqrt(),
                };
                self.push("block matrix of norms", bound, None, ch)
            }
            Node::Split(a, b) => {
                let ca = self.visit(a);
                let cb = self.visit(b);
                let bound = self.combine(p, self.steps[ca].bound, self.steps[cb].bound, false);
                self.push("block column of norms", bound, None, vec![ca, cb])
            }
            Node::Merge(a, b) => {
                let ca = self.visit(a);
                let cb = self.visit(b);
                let bound = self.combine(p, self.steps[ca].bound, self.steps[cb].bound, true);
                self.push("block row of norms", bound, None, vec![ca, cb])
            }
        };
        self.memo.insert(key, id);
        id
    }
}

/// Values the Neumann iteration can sum.
pub trait NeumannTerm: Clone {
    fn sum(&self, other: &Self) -> Self;
}

impl NeumannTerm for f64 {
    fn sum(&self, other: &Self) -> Self {
        self + other
    }
}

impl NeumannTerm for DMatrix<f64> {
    fn sum(&self, other: &Self) -> Self {
        self + other
    }
}

impl NeumannTerm for OperatorExpr {
    fn sum(&self, other: &Self) -> Self {
        self.plus(other)
    }
}

#[derive(Clone, Debug)]
pub struct NeumannResult<T> {
    pub value: T,
    pub residual_bound: f64,
    /// number of terms summed
    pub iters: usize,
    pub converged: bool,
}

/// Partial sums of `Σ_k Mᵏ(rhs)`, stopping once
/// `θ^{K+1}/(1−θ)·‖rhs‖ ≤ tol` or after `max_iter` terms.
pub fn neumann_apply<T: NeumannTerm>(
    map: impl Fn(&T) -> T,
    rhs: &T,
    rhs_norm: f64,
    theta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<NeumannResult<T>> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::precondition(
            "neumann",
            format!("contraction bound {theta} is not in [0, 1)"),
        ));
    }
    let mut value = rhs.clone();
    let mut term = rhs.clone();
    let mut iters = 1;
    let mut factor = theta;
    loop {
        let residual_bound = factor / (1.0 - theta) * rhs_norm;
        if residual_bound <= tol || iters >= max_iter.max(1) {
            return Ok(NeumannResult {
                value,
                residual_bound,
                iters,
                converged: residual_bound <= tol,
            });
        }
        term = map(&term);
        value = value.sum(&term);
        iters += 1;
        factor *= theta;
    }
}

fn count_refs(e: &OperatorExpr, counts: &mut HashMap<*const Node, usize>) {
    let c = counts.entry(Arc::as_ptr(&e.node)).or_insert(0);
    *c += 1;
    if *c > 1 {
        return;
    }
    for ch in children(e) {
        count_refs(ch, counts);
    }
}

fn children(e: &OperatorExpr) -> Vec<&OperatorExpr> {
    match &*e.node {
        Node::Scale(_, a) => vec![a],
        Node::Add(v) => v.iter().collect(),
        Node::Compose(a, b) | Node::Split(a, b) | Node::Merge(a, b) => vec![a, b],
        Node::ShiftSeries { inner, .. } => vec![inner],
        Node::Block2x2(b) => b.iter().collect(),
        _ => vec![],
    }
}

struct Serializer {
    counts: HashMap<*const Node, usize>,
    ids: HashMap<*const Node, usize>,
    shared: Vec<Value>,
}

impl Serializer {
    fn visit(&mut self, e: &OperatorExpr) -> Value {
        let key = Arc::as_ptr(&e.node);
        if let Some(&id) = self.ids.get(&key) {
            return json!({"node": "ref", "id": id});
        }
        let body = self.body(e);
        if self.counts.get(&key).copied().unwrap_or(0) > 1 {
            let id = self.shared.len();
            self.shared.push(body);
            self.ids.insert(key, id);
            json!({"node": "ref", "id": id})
        } else {
            body
        }
    }

    fn args(&mut self, v: &[&OperatorExpr]) -> Value {
        Value::Array(v.iter().map(|e| self.visit(e)).collect())
    }

    fn body(&mut self, e: &OperatorExpr) -> Value {
        match &*e.node {
            Node::Sparse(t) => json!({"node": "sparse", "op": t.to_json()}),
            Node::Identity => json!({"node": "identity"}),
            Node::LeftShift(d) => json!({"node": "left_shift", "decomp": d.to_json()}),
            Node::RightShift(d) => json!({"node": "right_shift", "decomp": d.to_json()}),
            Node::Proj(d, i) => json!({"node": "proj", "decomp": d.to_json(), "block": i}),
            Node::PartialSumProj(d, n) => {
                json!({"node": "partial_sum_proj", "decomp": d.to_json(), "n": n})
            }
            Node::Scale(c, a) => json!({"node": "scale", "c": c, "args": self.args(&[a])}),
            Node::Add(v) => {
                let refs: Vec<&OperatorExpr> = v.iter().collect();
                json!({"node": "add", "args": self.args(&refs)})
            }
            Node::Compose(a, b) => json!({"node": "compose", "args": self.args(&[a, b])}),
            Node::ShiftSeries { decomp, inner, .. } => {
                json!({"node": "shift_series", "decomp": decomp.to_json(), "args": self.args(&[inner])})
            }
            Node::Transfer { src, dst } => json!({
                "node": "transfer",
                "src": {"decomp": src.0.to_json(), "block": src.1},
                "dst": {"decomp": dst.0.to_json(), "block": dst.1},
            }),
            Node::Block2x2(b) => {
                let refs: Vec<&OperatorExpr> = b.iter().collect();
                json!({"node": "block2x2", "args": self.args(&refs)})
            }
            Node::Split(a, b) => json!({"node": "split", "args": self.args(&[a, b])}),
            Node::Merge(a, b) => json!({"node": "merge", "args": self.args(&[a, b])}),
        }
    }
}

fn parse_node(v: &Value, shared: &[OperatorExpr]) -> Result<OperatorExpr> {
    let tag = v
        .get("node")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse("expression node needs a `node` tag".into()))?;
    let decomp = |key: &str| -> Result<Decomposition> {
        Decomposition::from_json(
            v.get(key)
                .ok_or_else(|| Error::Parse(format!("`{tag}` node needs `{key}`")))?,
        )
    };
    let args = |n: usize| -> Result<Vec<OperatorExpr>> {
        let list = v
            .get("args")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse(format!("`{tag}` node needs `args`")))?;
        if n != usize::MAX && list.len() != n {
            return Err(Error::Parse(format!(
                "`{tag}` node takes {n} arguments, got {}",
                list.len()
            )));
        }
        list.iter().map(|a| parse_node(a, shared)).collect()
    };
    let field = |key: &str| v.get(key).unwrap_or(&Value::Null);
    Ok(match tag {
        "ref" => {
            let id = parse_index(field("id"))?;
            shared
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("reference to unknown shared node {id}")))?
        }
        "sparse" => OperatorExpr::sparse(SparseOperator::from_json(field("op"))?),
        "identity" => OperatorExpr::identity(),
        "left_shift" => OperatorExpr::left_shift(&decomp("decomp")?),
        "right_shift" => OperatorExpr::right_shift(&decomp("decomp")?),
        "proj" => OperatorExpr::proj(&decomp("decomp")?, parse_index(field("block"))?),
        "partial_sum_proj" => {
            OperatorExpr::partial_sum_proj(&decomp("decomp")?, parse_index(field("n"))?)
        }
        "scale" => OperatorExpr::scale(parse_value(field("c"))?, &args(1)?[0]),
        "add" => OperatorExpr::from_node(Node::Add(args(usize::MAX)?)),
        "compose" => {
            let a = args(2)?;
            OperatorExpr::compose(&a[0], &a[1])
        }
        "shift_series" => OperatorExpr::shift_series(&decomp("decomp")?, &args(1)?[0])?,
        "transfer" => {
            let end = |key: &str| -> Result<(Decomposition, usize)> {
                let e = field(key);
                let d = Decomposition::from_json(e.get("decomp").unwrap_or(&Value::Null))?;
                Ok((d, parse_index(e.get("block").unwrap_or(&Value::Null))?))
            };
            let (sd, si) = end("src")?;
            let (dd, di) = end("dst")?;
            OperatorExpr::transfer((&sd, si), (&dd, di))
        }
        "block2x2" => {
            let a = args(4)?;
            OperatorExpr::block2x2(&a[0], &a[1], &a[2], &a[3])
        }
        "split" => {
            let a = args(2)?;
            OperatorExpr::split(&a[0], &a[1])
        }
        "merge" => {
            let a = args(2)?;
            OperatorExpr::merge(&a[0], &a[1])
        }
        other => return Err(Error::Parse(format!("unknown expression node `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{block_sparse_operator, random_probes};
    use proptest::prelude::*;

    fn dy() -> Decomposition {
        Decomposition::dyadic()
    }

    fn e00() -> OperatorExpr {
        OperatorExpr::sparse(SparseOperator::rank_one(0, 0, 1.0))
    }

    #[test]
    fn series_of_corner_unit_is_block_zero_diagonal() {
        let d = dy();
        let td = OperatorExpr::shift_series(&d, &e00()).unwrap();
        for n in 0..4 {
            let k = d.pair(n, 0);
            assert_eq!(td.column(k), SeqVector::unit(k));
        }
        assert_eq!(td.column(3), SeqVector::unit(3));
        assert!(td.column(2).is_empty());
    }

    #[test]
    fn series_of_zero_is_zero() {
        let td = OperatorExpr::shift_series(&dy(), &OperatorExpr::zero()).unwrap();
        for k in 0..64 {
            assert!(td.column(k).is_empty());
        }
        assert_eq!(td.norm_bound(PNorm::One), 0.0);
    }

    #[test]
    fn series_needs_certificate() {
        let d = dy();
        let err = OperatorExpr::shift_series(&d, &OperatorExpr::identity()).unwrap_err();
        assert!(matches!(err, Error::MissingSeriesCertificate(_)));
        let rl = OperatorExpr::compose(&OperatorExpr::right_shift(&d), &OperatorExpr::left_shift(&d));
        assert!(OperatorExpr::shift_series(&d, &rl).is_err());
        // a projection on either side certifies
        let p = OperatorExpr::compose(&rl, &OperatorExpr::partial_sum_proj(&d, 3));
        assert!(OperatorExpr::shift_series(&d, &p).is_ok());
    }

    #[test]
    fn column_examples() {
        let d = dy();
        assert_eq!(OperatorExpr::identity().column(7), SeqVector::unit(7));
        assert_eq!(OperatorExpr::right_shift(&d).column(0), SeqVector::unit(1));
        let p0 = OperatorExpr::proj(&d, 0);
        for k in 0..64 {
            let c = p0.column(k);
            if d.block_of(k) == 0 {
                assert_eq!(c, SeqVector::unit(k));
            } else {
                assert!(c.is_empty());
            }
        }
    }

    #[test]
    fn left_after_right_is_identity() {
        let d = Decomposition::cantor();
        let lr = OperatorExpr::compose(&OperatorExpr::left_shift(&d), &OperatorExpr::right_shift(&d));
        for x in random_probes(5, 32, 300, 6, false) {
            assert_eq!(lr.apply(&x), x);
        }
        assert!(lr.apply(&SeqVector::new()).is_empty());
    }

    #[test]
    fn projections() {
        let d = dy();
        let p = OperatorExpr::proj(&d, 0);
        let pp = OperatorExpr::compose(&p, &p);
        let q = OperatorExpr::partial_sum_proj(&d, 2);
        let comp = OperatorExpr::identity().minus(&q);
        for x in random_probes(6, 32, 300, 6, true) {
            assert_eq!(pp.apply(&x), p.apply(&x));
            assert_eq!(q.apply(&x).plus(&comp.apply(&x)), x);
        }
    }

    #[test]
    fn norm_examples() {
        let d = dy();
        let l = OperatorExpr::left_shift(&d);
        let r = OperatorExpr::right_shift(&d);
        let c = l.norm_upper(PNorm::One);
        assert_eq!(c.bound, 1.0);
        assert_eq!(c.derivation[c.root].general_bound, Some(4.0));
        assert_eq!(OperatorExpr::compose(&l, &r).norm_bound(PNorm::One), 1.0);
        assert_eq!(
            OperatorExpr::scale(-2.0, &OperatorExpr::identity()).norm_bound(PNorm::One),
            2.0
        );
    }

    #[test]
    fn series_column_norms_within_constant() {
        let d = dy();
        for seed in 0..10 {
            let t = block_sparse_operator(seed, &d, 2, 256, 20, false);
            let e = OperatorExpr::sparse(t.clone());
            let td = OperatorExpr::shift_series(&d, &e).unwrap();
            let norm = t.max_col_sum();
            let cert = td.norm_upper(PNorm::One);
            let worst = (0..256).map(|k| td.column(k).norm(PNorm::One)).fold(0.0, f64::max);
            assert!(worst <= cert.bound * (1.0 + 1e-12));
            assert!(worst <= 32.0 * norm * (1.0 + 1e-12));
        }
    }

    #[test]
    fn certificates_dominate_columns() {
        let d = dy();
        let t = OperatorExpr::sparse(block_sparse_operator(4, &d, 2, 128, 30, false));
        let td = OperatorExpr::shift_series(&d, &t).unwrap();
        let l = OperatorExpr::left_shift(&d);
        let e = OperatorExpr::compose(&OperatorExpr::right_shift(&d), &td).minus(&OperatorExpr::compose(&td, &l));
        for p in [PNorm::One, PNorm::Inf, PNorm::Two] {
            let b = e.norm_bound(p);
            let worst = (0..1000).map(|k| e.column(k).norm(p)).fold(0.0, f64::max);
            assert!(worst <= b * (1.0 + 1e-12), "p = {p}: {worst} > {b}");
        }
    }

    #[test]
    fn series_recursion() {
        let d = dy();
        let t = OperatorExpr::sparse(block_sparse_operator(9, &d, 2, 128, 25, true));
        let td = OperatorExpr::shift_series(&d, &t).unwrap();
        let rtl = OperatorExpr::chain(&[
            OperatorExpr::right_shift(&d),
            td.clone(),
            OperatorExpr::left_shift(&d),
        ]);
        for x in random_probes(10, 64, 512, 6, true) {
            assert_eq!(td.apply(&x), t.apply(&x).plus(&rtl.apply(&x)));
        }
    }

    #[test]
    fn block_inference() {
        let d = dy();
        let e = OperatorExpr::sparse(SparseOperator::rank_one(d.pair(2, 0), d.pair(1, 3), 1.0));
        assert_eq!(e.col_blocks(&d), BlockRange::single(1));
        assert_eq!(e.row_blocks(&d), BlockRange::single(2));
        let le = OperatorExpr::compose(&OperatorExpr::left_shift(&d), &e);
        assert_eq!(le.row_blocks(&d), BlockRange::single(1));
        let el = OperatorExpr::compose(&e, &OperatorExpr::left_shift(&d));
        assert_eq!(el.col_blocks(&d), BlockRange::single(2));
        let er = OperatorExpr::compose(&e, &OperatorExpr::right_shift(&d));
        assert_eq!(er.col_blocks(&d), BlockRange::single(0));
        let td = OperatorExpr::shift_series(&d, &e).unwrap();
        assert_eq!(td.col_blocks(&d), BlockRange::Range { lo: 1, hi: None });
    }

    #[test]
    fn neumann_examples() {
        let r = neumann_apply(|_: &f64| 0.0, &3.0, 3.0, 0.0, 1e-12, 100).unwrap();
        assert_eq!((r.value, r.residual_bound, r.iters), (3.0, 0.0, 1));
        let r = neumann_apply(|x: &f64| x / 2.0, &1.0, 1.0, 0.5, 1e-6, 100).unwrap();
        assert!((r.value - 2.0).abs() <= 1e-6);
        assert_eq!(r.iters, 21);
        assert!(r.converged);
        assert!(neumann_apply(|x: &f64| *x, &1.0, 1.0, 1.0, 1e-6, 10).is_err());
        let r = neumann_apply(|x: &f64| x * 0.9, &1.0, 1.0, 0.9, 1e-12, 5).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iters, 5);
    }

    #[test]
    fn neumann_matches_dense_solve() {
        let mut rng = crate::probe::rng(3);
        use rand::Rng;
        let n = 6;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.05..0.05));
        let rhs = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let theta = m.norm();
        let r = neumann_apply(|x: &DMatrix<f64>| &m * x, &rhs, rhs.norm(), theta, 1e-14, 500).unwrap();
        let direct = (DMatrix::identity(n, n) - &m).lu().solve(&rhs).unwrap();
        assert!((&r.value - &direct).norm() <= 1e-10 * direct.norm());
    }

    #[test]
    fn json_round_trip_with_sharing() {
        let d = dy();
        let t = OperatorExpr::sparse(block_sparse_operator(2, &d, 1, 64, 8, false));
        let shared = OperatorExpr::compose(&OperatorExpr::right_shift(&d), &t);
        let e = OperatorExpr::add(vec![
            shared.clone(),
            OperatorExpr::compose(&shared, &OperatorExpr::left_shift(&d)),
            OperatorExpr::shift_series(&d, &t).unwrap(),
            OperatorExpr::block2x2(&t, &OperatorExpr::identity(), &OperatorExpr::zero(), &shared),
        ]);
        let v = e.to_json();
        assert_eq!(v["shared"].as_array().unwrap().len(), 2);
        let back = OperatorExpr::from_json(&v).unwrap();
        for k in 0..128 {
            assert_eq!(back.column(k), e.column(k));
        }
        assert!(OperatorExpr::from_json(&json!({"format": "expr/v1", "root": {"node": "wat"}})).is_err());
    }

    #[test]
    fn pair_encoding() {
        let a = SeqVector::from_pairs([(0, 1.0), (3, 2.0)]).unwrap();
        let b = SeqVector::from_pairs([(1, -1.0)]).unwrap();
        let x = encode_pair(&a, &b);
        assert_eq!(x, SeqVector::from_pairs([(0, 1.0), (6, 2.0), (3, -1.0)]).unwrap());
        assert_eq!(decode_pair(&x), (a, b));
    }

    proptest! {
        #[test]
        fn apply_is_linear(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let d = dy();
            let t = OperatorExpr::sparse(block_sparse_operator(seed, &d, 2, 128, 12, false));
            let e = OperatorExpr::add(vec![
                OperatorExpr::shift_series(&d, &t).unwrap(),
                OperatorExpr::compose(&OperatorExpr::left_shift(&d), &t),
            ]);
            let probes = random_probes(seed + 1, 2, 256, 5, false);
            let (x, y) = (&probes[0], &probes[1]);
            let lhs = e.apply(&x.scaled(a).plus(&y.scaled(b)));
            let rhs = e.apply(x).scaled(a).plus(&e.apply(y).scaled(b));
            let scale = 1.0 + rhs.norm(PNorm::Inf);
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * scale);
        }
    }
}
