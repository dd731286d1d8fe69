//! Finitely supported vectors and operators over the index set ℕ, with
//! exact p-norms for p ∈ {1, ∞} and a certified upper bound at p = 2.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Norm exponent. `Inf` stands for the sup norm, which is also the norm of
/// c₀ restricted to finitely supported sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PNorm {
    One,
    Two,
    Inf,
}

impl PNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "one" => Ok(PNorm::One),
            "2" | "two" => Ok(PNorm::Two),
            "inf" | "infinity" | "0" | "c0" => Ok(PNorm::Inf),
            other => Err(Error::Parse(format!("unknown norm `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PNorm::One => "1",
            PNorm::Two => "2",
            PNorm::Inf => "inf",
        }
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for PNorm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for PNorm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        let s = match &v {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(serde::de::Error::custom("norm must be 1, 2 or \"inf\"")),
        };
        PNorm::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A finitely supported real sequence. Zero entries are never stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqVector {
    entries: BTreeMap<usize, f64>,
}

impl SeqVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Canonical basis vector e_k.
    pub fn unit(k: usize) -> Self {
        let mut v = Self::new();
        v.entries.insert(k, 1.0);
        v
    }

    /// Builds a vector from `(index, value)` pairs, rejecting repeated
    /// indices and non-finite values.
    pub fn from_pairs<I: IntoIterator<Item = (usize, f64)>>(pairs: I) -> Result<Self> {
        let mut v = Self::new();
        for (k, x) in pairs {
            if !x.is_finite() {
                return Err(Error::Parse(format!("non-finite value at index {k}")));
            }
            if v.entries.insert(k, x).is_some() {
                return Err(Error::Parse(format!("duplicate index {k}")));
            }
        }
        v.entries.retain(|_, x| *x != 0.0);
        Ok(v)
    }

    /// Sums duplicate indices instead of rejecting them.
    pub fn accumulate<I: IntoIterator<Item = (usize, f64)>>(pairs: I) -> Self {
        let mut v = Self::new();
        for (k, x) in pairs {
            v.add_at(k, x);
        }
        v
    }

    pub fn get(&self, k: usize) -> f64 {
        self.entries.get(&k).copied().unwrap_or(0.0)
    }

    /// Adds `x` at index `k`, dropping the entry if it cancels to zero.
    pub fn add_at(&mut self, k: usize, x: f64) {
        if x == 0.0 {
            return;
        }
        let slot = self.entries.entry(k).or_insert(0.0);
        *slot += x;
        if *slot == 0.0 {
            self.entries.remove(&k);
        }
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &SeqVector) {
        if c == 0.0 {
            return;
        }
        for (&k, &x) in &other.entries {
            self.add_at(k, c * x);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&k, &x)| (k, x))
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.keys().next_back().copied()
    }

    pub fn scaled(&self, c: f64) -> SeqVector {
        if c == 0.0 {
            return SeqVector::new();
        }
        let mut out = SeqVector::new();
        for (&k, &x) in &self.entries {
            out.add_at(k, c * x);
        }
        out
    }

    pub fn plus(&self, other: &SeqVector) -> SeqVector {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn minus(&self, other: &SeqVector) -> SeqVector {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Keeps the entries whose index satisfies `keep`.
    pub fn restrict(&self, mut keep: impl FnMut(usize) -> bool) -> SeqVector {
        SeqVector {
            entries: self
                .entries
                .iter()
                .filter(|(&k, _)| keep(k))
                .map(|(&k, &x)| (k, x))
                .collect(),
        }
    }

    /// Relabels indices through an injective map.
    pub fn map_indices(&self, mut f: impl FnMut(usize) -> usize) -> SeqVector {
        SeqVector::accumulate(self.entries.iter().map(|(&k, &x)| (f(k), x)))
    }

    pub fn norm(&self, p: PNorm) -> f64 {
        vec_norm(self, p)
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &SeqVector) -> f64 {
        self.minus(other).norm(PNorm::Inf)
    }

    pub fn to_json(&self) -> Value {
        let entries: Vec<Value> = self.iter().map(|(k, x)| json!([k, x])).collect();
        json!({ "format": "seq-vec/v1", "entries": entries })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "seq-vec/v1")?;
        let entries = v
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse("seq-vec/v1 needs an `entries` array".into()))?;
        let mut pairs = Vec::with_capacity(entries.len());
        for e in entries {
            let arr = e
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| Error::Parse("vector entry must be [index, value]".into()))?;
            pairs.push((parse_index(&arr[0])?, parse_value(&arr[1])?));
        }
        SeqVector::from_pairs(pairs)
    }
}

impl FromIterator<(usize, f64)> for SeqVector {
    fn from_iter<I: IntoIterator<Item = (usize, f64)>>(iter: I) -> Self {
        SeqVector::accumulate(iter)
    }
}

/// `(Σ|x_k|^p)^{1/p}` for p ∈ {1, 2}, `max|x_k|` for ∞; zero on empty support.
pub fn vec_norm(x: &SeqVector, p: PNorm) -> f64 {
    match p {
        PNorm::One => x.entries.values().map(|v| v.abs()).sum(),
        PNorm::Two => {
            // scaled to avoid overflow in the squares
            let m = x.entries.values().fold(0.0f64, |a, v| a.max(v.abs()));
            if m == 0.0 {
                return 0.0;
            }
            m * x
                .entries
                .values()
                .map(|v| (v / m) * (v / m))
                .sum::<f64>()
                .sqrt()
        }
        PNorm::Inf => x.entries.values().fold(0.0f64, |a, v| a.max(v.abs())),
    }
}

/// Finitely supported matrix over ℕ × ℕ, stored column-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseOperator {
    cols: BTreeMap<usize, SeqVector>,
    rows: BTreeSet<usize>,
}

impl SparseOperator {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Identity on the listed indices.
    pub fn identity_on<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        Self::accumulate(indices.into_iter().map(|k| (k, k, 1.0)))
    }

    /// The rank-one operator `value · e_row ⊗ e_col` (maps e_col to value·e_row).
    pub fn rank_one(row: usize, col: usize, value: f64) -> Self {
        Self::accumulate([(row, col, value)])
    }

    /// Builds from `(row, col, value)` triplets; duplicates and non-finite
    /// values are rejected, zeros dropped.
    pub fn from_triplets<I: IntoIterator<Item = (usize, usize, f64)>>(triplets: I) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::new();
        for (r, c, v) in triplets {
            if !v.is_finite() {
                return Err(Error::Parse(format!("non-finite value at ({r}, {c})")));
            }
            if !seen.insert((r, c)) {
                return Err(Error::Parse(format!("duplicate coordinate ({r}, {c})")));
            }
            kept.push((r, c, v));
        }
        Ok(Self::accumulate(kept))
    }

    /// Builds from triplets, summing duplicates.
    pub fn accumulate<I: IntoIterator<Item = (usize, usize, f64)>>(triplets: I) -> Self {
        let mut cols: BTreeMap<usize, SeqVector> = BTreeMap::new();
        for (r, c, v) in triplets {
            cols.entry(c).or_default().add_at(r, v);
        }
        Self::from_columns(cols)
    }

    fn from_columns(mut cols: BTreeMap<usize, SeqVector>) -> Self {
        cols.retain(|_, c| !c.is_empty());
        let rows = cols.values().flat_map(|c| c.support()).collect();
        SparseOperator { cols, rows }
    }

    /// Entries as `(row, col, value)`, sorted by `(col, row)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.cols
            .iter()
            .flat_map(|(&c, col)| col.iter().map(move |(r, v)| (r, c, v)))
    }

    pub fn nnz(&self) -> usize {
        self.cols.values().map(SeqVector::len).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cols.get(&col).map_or(0.0, |c| c.get(row))
    }

    pub fn col_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.cols.keys().copied()
    }

    pub fn row_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().copied()
    }

    pub fn column(&self, k: usize) -> SeqVector {
        self.cols.get(&k).cloned().unwrap_or_default()
    }

    /// Largest row or column index touched, if any.
    pub fn max_index(&self) -> Option<usize> {
        let c = self.cols.keys().next_back().copied();
        let r = self.rows.iter().next_back().copied();
        c.max(r)
    }

    pub fn apply(&self, x: &SeqVector) -> SeqVector {
        op_apply(self, x)
    }

    pub fn scaled(&self, c: f64) -> SparseOperator {
        op_scale(self, c)
    }

    pub fn plus(&self, other: &SparseOperator) -> SparseOperator {
        op_add(self, other)
    }

    pub fn minus(&self, other: &SparseOperator) -> SparseOperator {
        op_add(self, &other.scaled(-1.0))
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &SparseOperator) -> SparseOperator {
        op_compose(self, other)
    }

    pub fn transpose(&self) -> SparseOperator {
        Self::accumulate(self.entries().map(|(r, c, v)| (c, r, v)))
    }

    /// Keeps the entries for which `keep(row, col)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize) -> bool) -> SparseOperator {
        Self::accumulate(self.entries().filter(|&(r, c, _)| keep(r, c)))
    }

    /// Maximum absolute column sum.
    pub fn max_col_sum(&self) -> f64 {
        self.cols
            .values()
            .map(|c| c.norm(PNorm::One))
            .fold(0.0, f64::max)
    }

    /// Maximum absolute row sum.
    pub fn max_row_sum(&self) -> f64 {
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (r, _, v) in self.entries() {
            *sums.entry(r).or_insert(0.0) += v.abs();
        }
        sums.values().copied().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Value {
        let entries: Vec<Value> = self.entries().map(|(r, c, v)| json!([r, c, v])).collect();
        json!({ "format": "sparse-op/v1", "entries": entries })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        expect_format(v, "sparse-op/v1")?;
        let entries = v
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse("sparse-op/v1 needs an `entries` array".into()))?;
        let mut triplets = Vec::with_capacity(entries.len());
        for e in entries {
            let arr = e
                .as_array()
                .filter(|a| a.len() == 3)
                .ok_or_else(|| Error::Parse("operator entry must be [row, col, value]".into()))?;
            triplets.push((
                parse_index(&arr[0])?,
                parse_index(&arr[1])?,
                parse_value(&arr[2])?,
            ));
        }
        Self::from_triplets(triplets)
    }
}

pub fn op_apply(t: &SparseOperator, x: &SeqVector) -> SeqVector {
    let mut out = SeqVector::new();
    for (k, xk) in x.iter() {
        if let Some(col) = t.cols.get(&k) {
            out.axpy(xk, col);
        }
    }
    out
}

pub fn op_add(a: &SparseOperator, b: &SparseOperator) -> SparseOperator {
    let mut cols = a.cols.clone();
    for (&k, col) in &b.cols {
        cols.entry(k).or_default().axpy(1.0, col);
    }
    SparseOperator::from_columns(cols)
}

pub fn op_scale(a: &SparseOperator, c: f64) -> SparseOperator {
    SparseOperator::from_columns(a.cols.iter().map(|(&k, col)| (k, col.scaled(c))).collect())
}

/// `a ∘ b`
pub fn op_compose(a: &SparseOperator, b: &SparseOperator) -> SparseOperator {
    SparseOperator::from_columns(b.cols.iter().map(|(&k, col)| (k, a.apply(col))).collect())
}

/// Exact induced norm: max column sum for p = 1, max row sum for p = ∞.
pub fn op_norm_exact(t: &SparseOperator, p: PNorm) -> Result<f64> {
    match p {
        PNorm::One => Ok(t.max_col_sum()),
        PNorm::Inf => Ok(t.max_row_sum()),
        PNorm::Two => Err(Error::UnsupportedNorm(p.to_string())),
    }
}

/// Certified upper bound on the induced norm; exact at p ∈ {1, ∞} and
/// `√(colsum · rowsum)` at p = 2.
pub fn op_norm_bound(t: &SparseOperator, p: PNorm) -> f64 {
    match p {
        PNorm::One => t.max_col_sum(),
        PNorm::Inf => t.max_row_sum(),
        PNorm::Two => (t.max_col_sum() * t.max_row_sum()).sqrt(),
    }
}

pub(crate) fn expect_format(v: &Value, format: &str) -> Result<()> {
    match v.get("format").and_then(Value::as_str) {
        Some(f) if f == format => Ok(()),
        Some(f) => Err(Error::Parse(format!("expected format `{format}`, found `{f}`"))),
        None => Err(Error::Parse(format!("missing `format` (expected `{format}`)"))),
    }
}

pub(crate) fn parse_index(v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|k| k as usize)
        .ok_or_else(|| Error::Parse(format!("index must be a non-negative integer, got {v}")))
}

pub(crate) fn parse_value(v: &Value) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::Parse(format!("value must be a number, got {v}")))?;
    if !x.is_finite() {
        return Err(Error::Parse("non-finite value".into()));
    }
    Ok(x)
}
