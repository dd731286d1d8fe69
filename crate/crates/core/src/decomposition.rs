//! Decompositions of ℕ into infinitely many infinite blocks.
//!
//! A decomposition is a bijection ℕ × ℕ → ℕ, `(block, slot) ↦ index`. The
//! block isomorphisms are slot-preserving, so the right shift sends
//! `e_{pair(i, j)}` to `e_{pair(i + 1, j)}` and the left shift undoes it,
//! annihilating block 0. Both are partial permutations, hence λ = 1 and
//! every identity between them holds with zero rounding.
//!
//! Derived decompositions (coarsening, interleaving, reassignment of a
//! finite set of indices) enumerate each of their blocks in ascending
//! index order.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::probe::random_probes;
use crate::space::{expect_format, parse_index, PNorm, SeqVector};

#[derive(Clone, PartialEq, Eq)]
pub struct Decomposition {
    node: Arc<Node>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Node {
    Dyadic,
    Cantor,
    Coarsened { parent: Decomposition, cuts: Cuts },
    Interleaved { parent: Decomposition },
    Reassigned {
        parent: Decomposition,
        block: usize,
        moved: BTreeSet<usize>,
    },
}

/// Strictly increasing cut sequence `m_0 < m_1 < …`, extended past its
/// stored prefix by the final stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cuts {
    prefix: Vec<usize>,
}

impl Cuts {
    pub fn new(prefix: Vec<usize>) -> Result<Self> {
        if prefix.is_empty() {
            return Err(Error::InvalidInput("cut sequence is empty".into()));
        }
        if let Some(w) = prefix.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "cuts must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Cuts { prefix })
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    fn stride(&self) -> usize {
        match self.prefix.len() {
            1 => 1,
            n => self.prefix[n - 1] - self.prefix[n - 2],
        }
    }

    /// `m_b`
    pub fn cut(&self, b: usize) -> usize {
        let last = self.prefix.len() - 1;
        if b <= last {
            self.prefix[b]
        } else {
            self.prefix[last] + self.stride() * (b - last)
        }
    }

    /// Parent blocks merged into coarse block `b`, as an inclusive range.
    pub fn parent_range(&self, b: usize) -> (usize, usize) {
        let start = if b == 0 { 0 } else { self.cut(b - 1) + 1 };
        (start, self.cut(b))
    }

    /// The coarse block containing parent block `i`.
    pub fn coarse_of(&self, i: usize) -> usize {
        let last = self.prefix.len() - 1;
        if i <= self.prefix[last] {
            self.prefix.partition_point(|&c| c < i)
        } else {
            let s = self.stride();
            last + (i - self.prefix[last]).div_ceil(s)
        }
    }
}

impl fmt::Debug for Decomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Decomposition({})", self.to_json())
    }
}

fn dyadic_try_pair(i: usize, j: usize) -> Option<usize> {
    let base = 1usize.checked_shl(i as u32).filter(|_| i < usize::BITS as usize)?;
    j.checked_mul(2)?
        .checked_add(1)?
        .checked_mul(base)
        .map(|v| v - 1)
}

fn dyadic_unpair(k: usize) -> (usize, usize) {
    let t = k.checked_add(1).expect("index overflow in dyadic unpair");
    let i = t.trailing_zeros() as usize;
    (i, ((t >> i) - 1) / 2)
}

fn dyadic_rank(i: usize, k: usize) -> usize {
    if i >= usize::BITS as usize {
        return 0;
    }
    let q = k >> i;
    q.div_ceil(2)
}

fn cantor_try_pair(i: usize, j: usize) -> Option<usize> {
    let w = i.checked_add(j)?;
    let t = w.checked_mul(w.checked_add(1)?)? / 2;
    t.checked_add(j)
}

fn isqrt(n: usize) -> usize {
    if n < 2 {
        return n;
    }
    let mut x = (n as f64).sqrt() as usize;
    while x.checked_mul(x).is_none_or(|v| v > n) {
        x -= 1;
    }
    while (x + 1).checked_mul(x + 1).is_some_and(|v| v <= n) {
        x += 1;
    }
    x
}

fn cantor_unpair(k: usize) -> (usize, usize) {
    let w = (isqrt(8 * k + 1) - 1) / 2;
    let t = w * (w + 1) / 2;
    let j = k - t;
    (w - j, j)
}

impl Decomposition {
    /// `pair(i, j) = 2^i (2j + 1) − 1`
    pub fn dyadic() -> Self {
        Self::from_node(Node::Dyadic)
    }

    /// Diagonal pairing `pair(i, j) = (i + j)(i + j + 1)/2 + j`.
    pub fn cantor() -> Self {
        Self::from_node(Node::Cantor)
    }

    pub fn from_scheme(scheme: &str) -> Result<Self> {
        match scheme {
            "dyadic" => Ok(Self::dyadic()),
            "cantor" => Ok(Self::cantor()),
            other => Err(Error::Parse(format!("unknown pairing scheme `{other}`"))),
        }
    }

    fn from_node(node: Node) -> Self {
        Decomposition { node: Arc::new(node) }
    }

    /// Merges consecutive parent blocks: new block `b` is the union of parent
    /// blocks `m_{b-1}+1 ..= m_b`.
    pub fn coarsen(&self, cuts: Cuts) -> Self {
        Self::from_node(Node::Coarsened {
            parent: self.clone(),
            cuts,
        })
    }

    /// New decomposition whose block 0 is the union of this one's blocks
    /// `1, 2, …`, and whose blocks `1, 2, …` split this one's block 0 by a
    /// dyadic sub-pairing of its slots.
    pub fn interleave(&self) -> Self {
        Self::from_node(Node::Interleaved { parent: self.clone() })
    }

    /// Moves a finite set of indices into `block`. Every block stays
    /// infinite since only finitely many indices move.
    pub fn reassign<I: IntoIterator<Item = usize>>(&self, block: usize, indices: I) -> Self {
        let moved: BTreeSet<usize> = indices
            .into_iter()
            .filter(|&k| self.block_of(k) != block)
            .collect();
        if moved.is_empty() {
            return self.clone();
        }
        Self::from_node(Node::Reassigned {
            parent: self.clone(),
            block,
            moved,
        })
    }

    pub fn scheme_name(&self) -> &'static str {
        match &*self.node {
            Node::Dyadic => "dyadic",
            Node::Cantor => "cantor",
            Node::Coarsened { parent, .. }
            | Node::Interleaved { parent }
            | Node::Reassigned { parent, .. } => parent.scheme_name(),
        }
    }

    pub fn is_derived(&self) -> bool {
        !matches!(&*self.node, Node::Dyadic | Node::Cantor)
    }

    /// Sup of the block isomorphism norms; slot-preserving maps give 1.
    pub fn lambda_bound(&self) -> f64 {
        1.0
    }

    /// `‖P_0‖ + 1`; coordinate projections have norm 1 in every p.
    pub fn c1(&self) -> f64 {
        2.0
    }

    /// Constant `4λ²C₁³` bounding the shift series of a single block pair.
    pub fn series_constant(&self) -> f64 {
        4.0 * self.lambda_bound().powi(2) * self.c1().powi(3)
    }

    /// `2λC₁`, the uniform bound on powers of the shifts.
    pub fn shift_power_bound(&self) -> f64 {
        2.0 * self.lambda_bound() * self.c1()
    }

    pub fn try_pair(&self, i: usize, j: usize) -> Option<usize> {
        match &*self.node {
            Node::Dyadic => dyadic_try_pair(i, j),
            Node::Cantor => cantor_try_pair(i, j),
            Node::Coarsened { parent, cuts } => {
                let (s, _) = cuts.parent_range(i);
                let hi = parent.try_pair(s, j)?;
                Some(self.select(i, j, j, hi))
            }
            Node::Interleaved { parent } => {
                if i == 0 {
                    let hi = parent.try_pair(1, j)?;
                    Some(self.select(0, j, j, hi))
                } else {
                    parent.try_pair(0, dyadic_try_pair(i - 1, j)?)
                }
            }
            Node::Reassigned { parent, block, moved } => {
                let hi = if i == *block {
                    parent.try_pair(i, j)?
                } else {
                    let removed = moved.iter().filter(|&&m| parent.block_of(m) == i).count();
                    parent.try_pair(i, j + removed)?
                };
                Some(self.select(i, j, j, hi))
            }
        }
    }

    /// Global index of slot `j` in block `i`.
    ///
    /// Panics if the index does not fit in `usize`.
    pub fn pair(&self, i: usize, j: usize) -> usize {
        self.try_pair(i, j)
            .unwrap_or_else(|| panic!("index overflow pairing block {i}, slot {j}"))
    }

    /// Inverse of [`pair`](Self::pair).
    pub fn unpair(&self, k: usize) -> (usize, usize) {
        match &*self.node {
            Node::Dyadic => dyadic_unpair(k),
            Node::Cantor => cantor_unpair(k),
            Node::Coarsened { parent, cuts } => {
                let (pi, _) = parent.unpair(k);
                let b = cuts.coarse_of(pi);
                (b, self.rank(b, k))
            }
            Node::Interleaved { parent } => {
                let (pi, pj) = parent.unpair(k);
                if pi != 0 {
                    (0, self.rank(0, k))
                } else {
                    let (a, b) = dyadic_unpair(pj);
                    (a + 1, b)
                }
            }
            Node::Reassigned { parent, block, moved } => {
                let i = if moved.contains(&k) {
                    *block
                } else {
                    parent.unpair(k).0
                };
                (i, self.rank(i, k))
            }
        }
    }

    pub fn block_of(&self, k: usize) -> usize {
        match &*self.node {
            Node::Dyadic => (k + 1).trailing_zeros() as usize,
            Node::Cantor => cantor_unpair(k).0,
            Node::Coarsened { parent, cuts } => cuts.coarse_of(parent.block_of(k)),
            Node::Interleaved { parent } => {
                let (pi, pj) = parent.unpair(k);
                if pi != 0 {
                    0
                } else {
                    dyadic_unpair(pj).0 + 1
                }
            }
            Node::Reassigned { parent, block, moved } => {
                if moved.contains(&k) {
                    *block
                } else {
                    parent.block_of(k)
                }
            }
        }
    }

    /// Number of indices `< k` in block `i`.
    pub fn rank(&self, i: usize, k: usize) -> usize {
        match &*self.node {
            Node::Dyadic => dyadic_rank(i, k),
            Node::Cantor => {
                // pair(i, ·) is increasing and pair(i, k) ≥ k
                let (mut lo, mut hi) = (0usize, k);
                while lo < hi {
                    let mid = lo + (hi - lo) / 2;
                    if cantor_try_pair(i, mid).is_none_or(|p| p >= k) {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                lo
            }
            Node::Coarsened { parent, cuts } => {
                let (s, e) = cuts.parent_range(i);
                (s..=e).map(|pi| parent.rank(pi, k)).sum()
            }
            Node::Interleaved { parent } => {
                let r0 = parent.rank(0, k);
                if i == 0 {
                    k - r0
                } else {
                    dyadic_rank(i - 1, r0)
                }
            }
            Node::Reassigned { parent, block, moved } => {
                let below = moved.range(..k);
                let mut r = parent.rank(i, k);
                if i == *block {
                    r += below.count();
                } else {
                    r -= below.filter(|&&m| parent.block_of(m) == i).count();
                }
                r
            }
        }
    }

    // Smallest x in [lo, hi] holding at least j + 1 elements of block i in [0, x].
    fn select(&self, i: usize, j: usize, lo: usize, hi: usize) -> usize {
        let (mut lo, mut hi) = (lo, hi);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if self.rank(i, mid + 1) > j {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    /// Right shift: slot `j` of block `i` to slot `j` of block `i + 1`.
    pub fn shift_right(&self, x: &SeqVector) -> SeqVector {
        x.map_indices(|k| {
            let (i, j) = self.unpair(k);
            self.pair(i + 1, j)
        })
    }

    /// Left shift: slot `j` of block `i + 1` to slot `j` of block `i`; block 0 is annihilated.
    pub fn shift_left(&self, x: &SeqVector) -> SeqVector {
        SeqVector::accumulate(x.iter().filter_map(|(k, v)| {
            let (i, j) = self.unpair(k);
            (i > 0).then(|| (self.pair(i - 1, j), v))
        }))
    }

    /// `P_i x`
    pub fn project(&self, i: usize, x: &SeqVector) -> SeqVector {
        x.restrict(|k| self.block_of(k) == i)
    }

    /// `P̃_n x = Σ_{i ≤ n} P_i x`
    pub fn project_partial(&self, n: usize, x: &SeqVector) -> SeqVector {
        x.restrict(|k| self.block_of(k) <= n)
    }

    /// Largest block index met by the support of `x`.
    pub fn max_block(&self, x: &SeqVector) -> Option<usize> {
        x.support().map(|k| self.block_of(k)).max()
    }

    pub fn to_json(&self) -> Value {
        let mut chain = Vec::new();
        let mut cur = self;
        loop {
            match &*cur.node {
                Node::Dyadic | Node::Cantor => break,
                Node::Coarsened { parent, cuts } => {
                    chain.push(json!({"op": "coarsen", "cuts": cuts.prefix}));
                    cur = parent;
                }
                Node::Interleaved { parent } => {
                    chain.push(json!({"op": "interleave"}));
                    cur = parent;
                }
                Node::Reassigned { parent, block, moved } => {
                    chain.push(json!({"op": "reassign", "block": block, "indices": moved}));
                    cur = parent;
                }
            }
        }
        chain.reverse();
        let mut v = json!({"format": "decomp/v1", "scheme": self.scheme_name()});
        if !chain.is_empty() {
            v["derived"] = Value::Array(chain);
        }
        v
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "decomp/v1")?;
        let scheme = v
            .get("scheme")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Parse("decomp/v1 needs a `scheme` string".into()))?;
        let mut d = Self::from_scheme(scheme)?;
        if let Some(chain) = v.get("derived") {
            let chain = chain
                .as_array()
                .ok_or_else(|| Error::Parse("`derived` must be an array".into()))?;
            for step in chain {
                let op = step
                    .get("op")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Parse("derived step needs an `op`".into()))?;
                d = match op {
                    "coarsen" => {
                        let cuts = parse_index_list(step.get("cuts"), "cuts")?;
                        d.coarsen(Cuts::new(cuts).map_err(|e| Error::Parse(e.to_string()))?)
                    }
                    "interleave" => d.interleave(),
                    "reassign" => {
                        let block = parse_index(step.get("block").unwrap_or(&Value::Null))?;
                        let indices = parse_index_list(step.get("indices"), "indices")?;
                        d.reassign(block, indices)
                    }
                    other => return Err(Error::Parse(format!("unknown derived op `{other}`"))),
                };
            }
        }
        Ok(d)
    }
}

fn parse_index_list(v: Option<&Value>, what: &str) -> Result<Vec<usize>> {
    v.and_then(Value::as_array)
        .ok_or_else(|| Error::Parse(format!("`{what}` must be an array")))?
        .iter()
        .map(parse_index)
        .collect()
}

/// Truncated backend: `blocks × block_dim` coordinates, block-major, with
/// shifts that annihilate the block they would push out of range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FiniteModel {
    pub blocks: usize,
    pub block_dim: usize,
}

impl FiniteModel {
    pub fn new(blocks: usize, block_dim: usize) -> Result<Self> {
        if blocks == 0 || block_dim == 0 {
            return Err(Error::InvalidInput(
                "finite model needs at least one block and one slot".into(),
            ));
        }
        Ok(FiniteModel { blocks, block_dim })
    }

    pub fn dim(&self) -> usize {
        self.blocks * self.block_dim
    }

    pub fn local(&self, block: usize, slot: usize) -> usize {
        block * self.block_dim + slot
    }

    pub fn block_of_local(&self, k: usize) -> usize {
        k / self.block_dim
    }

    /// Global index of local coordinate `k` under `decomp`.
    pub fn global(&self, decomp: &Decomposition, k: usize) -> usize {
        decomp.pair(k / self.block_dim, k % self.block_dim)
    }

    /// Local coordinate of a global index, if it lies in the model window.
    pub fn local_of(&self, decomp: &Decomposition, k: usize) -> Option<usize> {
        let (i, j) = decomp.unpair(k);
        (i < self.blocks && j < self.block_dim).then(|| self.local(i, j))
    }

    pub fn truncated_left(&self) -> DMatrix<f64> {
        let n = self.dim();
        let s = self.block_dim;
        DMatrix::from_fn(n, n, |r, c| if c >= s && r + s == c { 1.0 } else { 0.0 })
    }

    pub fn truncated_right(&self) -> DMatrix<f64> {
        self.truncated_left().transpose()
    }

    /// Coordinate projection onto block `i`.
    pub fn block_projection(&self, i: usize) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |r, c| {
            if r == c && self.block_of_local(r) == i {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Largest block for which any length-`depth` shift word stays exact.
    pub fn margin_block(&self, depth: usize) -> Option<usize> {
        (self.blocks - 1).checked_sub(depth)
    }

    pub fn embed(&self, decomp: &Decomposition, x: &DVector<f64>) -> SeqVector {
        SeqVector::accumulate(
            x.iter()
                .enumerate()
                .map(|(k, &v)| (self.global(decomp, k), v)),
        )
    }

    /// Restricts a global vector to the window; also returns the ℓ₁ mass left outside.
    pub fn restrict(&self, decomp: &Decomposition, x: &SeqVector) -> (DVector<f64>, f64) {
        let mut out = DVector::zeros(self.dim());
        let mut leak = 0.0;
        for (k, v) in x.iter() {
            match self.local_of(decomp, k) {
                Some(l) => out[l] += v,
                None => leak += v.abs(),
            }
        }
        (out, leak)
    }

    pub fn to_json(&self) -> Value {
        json!({"format": "finmodel/v1", "blocks": self.blocks, "block_dim": self.block_dim})
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "finmodel/v1")?;
        let blocks = parse_index(v.get("blocks").unwrap_or(&Value::Null))?;
        let block_dim = parse_index(v.get("block_dim").unwrap_or(&Value::Null))?;
        Self::new(blocks, block_dim).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Outcome of [`verify_shift_identities`].
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct ShiftIdentityReport {
    pub probes: usize,
    pub n_max: usize,
    /// max deviation of `LRx − x`
    pub lr_identity: f64,
    /// max deviation of `RLx − (I − P₀)x`
    pub rl_identity: f64,
    /// max deviation of `RP_i x − P_{i+1}Rx`
    pub right_intertwining: f64,
    /// max deviation of `P_i L x − L P_{i+1} x`
    pub left_intertwining: f64,
    /// max over n, p of `‖Lⁿx‖_p / ‖x‖_p`
    pub left_power_ratio: f64,
    /// max over n, p of `‖Rⁿx‖_p / ‖x‖_p`
    pub right_power_ratio: f64,
    /// the bound `2λC₁`
    pub power_bound: f64,
    /// probes where `Lⁿx ≠ 0` although n exceeds the top block of supp x
    pub support_exhaustion_failures: usize,
    pub failures: Vec<String>,
}

impl ShiftIdentityReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks `LR = I`, `RL = I − P₀`, `RP_i = P_{i+1}R`, `P_iL = LP_{i+1}`
/// exactly, the power bound `‖Lⁿ‖, ‖Rⁿ‖ ≤ 2λC₁` for `n ≤ n_max`, and that
/// `Lⁿx = 0` once `n` exceeds the highest block in the support of `x`.
pub fn verify_shift_identities(
    decomp: &Decomposition,
    num_probes: usize,
    n_max: usize,
    seed: u64,
) -> ShiftIdentityReport {
    let probes = random_probes(seed, num_probes, 256, 8, false);
    let bound = decomp.shift_power_bound();
    let mut rep = ShiftIdentityReport {
        probes: probes.len(),
        n_max,
        power_bound: bound,
        ..Default::default()
    };
    for (idx, x) in probes.iter().enumerate() {
        let rx = decomp.shift_right(x);
        let lx = decomp.shift_left(x);
        let d = decomp.shift_left(&rx).max_abs_diff(x);
        rep.lr_identity = rep.lr_identity.max(d);
        if d != 0.0 {
            rep.failures.push(format!("LR = I on probe {idx}: {d:e}"));
        }
        let d = decomp
            .shift_right(&lx)
            .max_abs_diff(&x.minus(&decomp.project(0, x)));
        rep.rl_identity = rep.rl_identity.max(d);
        if d != 0.0 {
            rep.failures.push(format!("RL = I - P0 on probe {idx}: {d:e}"));
        }
        let top = decomp.max_block(x).unwrap_or(0);
        for i in 0..=top + 1 {
            let lhs = decomp.shift_right(&decomp.project(i, x));
            let rhs = decomp.project(i + 1, &rx);
            let d = lhs.max_abs_diff(&rhs);
            rep.right_intertwining = rep.right_intertwining.max(d);
            if d != 0.0 {
                rep.failures.push(format!("R P_{i} = P_{} R on probe {idx}: {d:e}", i + 1));
            }
            let lhs = decomp.project(i, &lx);
            let rhs = decomp.shift_left(&decomp.project(i + 1, x));
            let d = lhs.max_abs_diff(&rhs);
            rep.left_intertwining = rep.left_intertwining.max(d);
            if d != 0.0 {
                rep.failures.push(format!("P_{i} L = L P_{} on probe {idx}: {d:e}", i + 1));
            }
        }
        let mut ln = x.clone();
        let mut rn = x.clone();
        for n in 1..=n_max {
            ln = decomp.shift_left(&ln);
            rn = decomp.shift_right(&rn);
            for p in [PNorm::One, PNorm::Two, PNorm::Inf] {
                let nx = x.norm(p);
                if nx == 0.0 {
                    continue;
                }
                let (lr, rr) = (ln.norm(p) / nx, rn.norm(p) / nx);
                rep.left_power_ratio = rep.left_power_ratio.max(lr);
                rep.right_power_ratio = rep.right_power_ratio.max(rr);
                if lr > bound || rr > bound {
                    rep.failures
                        .push(format!("power bound at n = {n}, p = {p} on probe {idx}"));
                }
            }
            if n > top && !ln.is_empty() {
                rep.support_exhaustion_failures += 1;
                rep.failures
                    .push(format!("L^{n} x != 0 beyond support on probe {idx}"));
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_schemes() -> Vec<Decomposition> {
        let d = Decomposition::dyadic();
        let c = Decomposition::cantor();
        vec![
            d.clone(),
            c.clone(),
            d.coarsen(Cuts::new(vec![1, 3, 5]).unwrap()),
            c.coarsen(Cuts::new(vec![0, 2, 3, 7]).unwrap()),
            d.interleave(),
            c.interleave(),
            d.interleave().interleave(),
            d.reassign(0, [1, 3, 7, 100]),
            d.interleave().reassign(1, [1, 5, 9]),
            d.coarsen(Cuts::new(vec![2, 4]).unwrap()).interleave(),
        ]
    }

    #[test]
    fn dyadic_examples() {
        let d = Decomposition::dyadic();
        assert_eq!(d.pair(0, 0), 0);
        assert_eq!(d.pair(1, 0), 1);
        assert_eq!(d.pair(0, 1), 2);
        assert_eq!(d.pair(2, 0), 3);
        assert_eq!(d.unpair(11), (2, 1));
        assert_eq!(d.block_of(6), 0);
        assert_eq!(Decomposition::cantor().pair(0, 0), 0);
    }

    #[test]
    fn constants() {
        let d = Decomposition::dyadic();
        assert_eq!(d.lambda_bound(), 1.0);
        assert_eq!(d.c1(), 2.0);
        assert_eq!(d.shift_power_bound(), 4.0);
        assert_eq!(d.series_constant(), 32.0);
    }

    #[test]
    fn pair_unpair_are_inverse() {
        for d in all_schemes() {
            for i in 0..40 {
                for j in 0..40 {
                    let k = d.pair(i.min(20), j);
                    assert_eq!(d.unpair(k), (i.min(20), j), "{d:?}");
                }
            }
            for k in 0..2_000 {
                let (i, j) = d.unpair(k);
                assert_eq!(d.pair(i, j), k, "{d:?}");
                assert_eq!(d.block_of(k), i);
            }
        }
    }

    #[test]
    fn base_schemes_biject_on_ten_thousand() {
        for d in [Decomposition::dyadic(), Decomposition::cantor()] {
            for i in 0..100 {
                for j in 0..100 {
                    if let Some(k) = d.try_pair(i, j) {
                        assert_eq!(d.unpair(k), (i, j));
                    }
                }
            }
            for k in 0..=10_000 {
                let (i, j) = d.unpair(k);
                assert_eq!(d.pair(i, j), k);
            }
        }
    }

    #[test]
    fn rank_counts_block_members() {
        for d in all_schemes() {
            let mut counts = vec![0usize; 64];
            for k in 0..600 {
                for (i, &c) in counts.iter().enumerate().take(12) {
                    assert_eq!(d.rank(i, k), c, "{d:?} block {i} below {k}");
                }
                counts[d.block_of(k)] += 1;
            }
        }
    }

    #[test]
    fn identity_coarsening_is_a_no_op() {
        let d = Decomposition::dyadic();
        let c = d.coarsen(Cuts::new(vec![0, 1]).unwrap());
        for k in 0..10_000 {
            assert_eq!(c.block_of(k), d.block_of(k));
            assert_eq!(c.unpair(k), d.unpair(k));
        }
    }

    #[test]
    fn coarsen_merges_blocks() {
        let d = Decomposition::dyadic();
        let c = d.coarsen(Cuts::new(vec![1, 3, 5]).unwrap());
        assert_eq!(c.block_of(1), 0);
        assert_eq!(c.block_of(0), 0);
        assert_eq!(c.block_of(3), 1);
        // extension by the final stride: blocks 6, 7 form coarse block 3
        assert_eq!(c.block_of(d.pair(6, 0)), 3);
        assert_eq!(c.block_of(d.pair(7, 4)), 3);
        assert_eq!(c.block_of(d.pair(8, 0)), 4);
        for k in 0..10_000 {
            let b = d.block_of(k);
            assert_eq!(c.block_of(k), b / 2);
        }
        assert!(Cuts::new(vec![3, 3]).is_err());
        assert!(Cuts::new(vec![4, 2]).is_err());
    }

    #[test]
    fn interleave_splits_block_zero() {
        let d1 = Decomposition::dyadic();
        let d2 = d1.interleave();
        for k in 0..10_000 {
            let in_y0 = d2.block_of(k) == 0;
            assert_eq!(in_y0, d1.block_of(k) >= 1);
            if !in_y0 {
                assert_eq!(d1.block_of(k), 0);
            }
        }
        // blocks 1..=8 of d2 are disjoint subsets of X0
        let mut seen = BTreeSet::new();
        for i in 1..=8 {
            for j in 0..50 {
                let k = d2.pair(i, j);
                assert_eq!(d1.block_of(k), 0);
                assert!(seen.insert(k));
            }
        }
    }

    #[test]
    fn reassign_moves_finite_sets() {
        let d = Decomposition::dyadic().reassign(0, [1, 3, 5]);
        assert_eq!(d.block_of(1), 0);
        assert_eq!(d.block_of(3), 0);
        assert_eq!(d.block_of(7), 3);
        // ascending enumeration of block 0 = {0, 1, 2, 3, 4, 5, 6, 8, ...}
        let first: Vec<usize> = (0..8).map(|j| d.pair(0, j)).collect();
        assert_eq!(first, vec![0, 1, 2, 3, 4, 5, 6, 8]);
        // block 1 lost 1 and 5: {9, 13, ...}
        assert_eq!(d.pair(1, 0), 9);
    }

    #[test]
    fn shift_examples() {
        let d = Decomposition::dyadic();
        assert_eq!(d.shift_right(&SeqVector::unit(0)), SeqVector::unit(1));
        assert!(d.shift_left(&SeqVector::unit(0)).is_empty());
        let x = SeqVector::from_pairs([(0, 1.5), (3, -2.0), (17, 0.25)]).unwrap();
        assert_eq!(d.shift_left(&d.shift_right(&x)), x);
    }

    #[test]
    fn shift_identities_hold_exactly() {
        for d in all_schemes() {
            let rep = verify_shift_identities(&d, 32, 8, 11);
            assert!(rep.passed(), "{d:?}: {:?}", rep.failures);
            assert_eq!(rep.lr_identity, 0.0);
            assert_eq!(rep.rl_identity, 0.0);
            assert!(rep.left_power_ratio <= 1.0 + 1e-12 && rep.right_power_ratio <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn left_power_exhausts_support() {
        let d = Decomposition::dyadic();
        let x = SeqVector::from_pairs([(d.pair(3, 2), 1.0), (d.pair(1, 0), 2.0)]).unwrap();
        let mut v = x.clone();
        for _ in 0..4 {
            v = d.shift_left(&v);
        }
        assert!(v.is_empty());
    }

    #[test]
    fn json_round_trip() {
        for d in all_schemes() {
            let back = Decomposition::from_json(&d.to_json()).unwrap();
            assert_eq!(back, d);
        }
        let bad = json!({"format": "decomp/v1", "scheme": "zigzag"});
        assert!(Decomposition::from_json(&bad).is_err());
        let bad = json!({"format": "decomp/v1", "scheme": "dyadic",
                         "derived": [{"op": "coarsen", "cuts": [2, 1]}]});
        assert!(Decomposition::from_json(&bad).is_err());
        let m = FiniteModel::new(12, 2).unwrap();
        assert_eq!(FiniteModel::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn truncated_shift_identities() {
        let m = FiniteModel::new(5, 3).unwrap();
        let l = m.truncated_left();
        let r = m.truncated_right();
        let id = DMatrix::<f64>::identity(m.dim(), m.dim());
        assert_eq!(&l * &r, &id - m.block_projection(m.blocks - 1));
        assert_eq!(&r * &l, &id - m.block_projection(0));
    }

    #[test]
    fn finite_model_agrees_inside_margin() {
        let d = Decomposition::dyadic();
        let m = FiniteModel::new(6, 2).unwrap();
        let l = m.truncated_left();
        let r = m.truncated_right();
        // every word of length `depth` over {L, R}
        for depth in 0..m.blocks {
            let top = m.margin_block(depth).unwrap();
            for word in 0..(1u32 << depth) {
                for k in 0..m.local(top + 1, 0) {
                    let mut xf = DVector::zeros(m.dim());
                    xf[k] = 1.0;
                    let mut xg = m.embed(&d, &xf);
                    for step in 0..depth {
                        if word >> step & 1 == 1 {
                            xf = &r * xf;
                            xg = d.shift_right(&xg);
                        } else {
                            xf = &l * xf;
                            xg = d.shift_left(&xg);
                        }
                    }
                    let (back, leak) = m.restrict(&d, &xg);
                    assert_eq!(leak, 0.0);
                    assert_eq!(back, xf);
                }
            }
        }
    }
}
