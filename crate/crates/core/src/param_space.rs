//! Flat parameter vectors and task-vector arithmetic.
//!
//! Every model parameter set is a [`ParamVector`] of fixed length `d`. A
//! [`TaskVector`] is the delta between a fine-tuned vector and its base, and
//! [`combine`] rebuilds a model as `base + Σ λ_i τ_i`. Summation is performed
//! entry by entry in declared term order, so results are bit-reproducible.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point (or direction) in model parameter space.
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 6;
        write!(f, "ParamVector(d={}, [", self.values.len())?;
        for (i, v) in self.values.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.values.len() > SHOWN {
            write!(f, ", ..")?;
        }
        write!(f, "])")
    }
}

impl ParamVector {
    /// Wraps `values`, rejecting empty vectors and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("parameter vector must be non-empty".into()));
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d > 0, "parameter vector must be non-empty");
        Self {
            values: vec![0.0; d],
        }
    }

    /// Builds a vector from values produced by an arithmetic kernel,
    /// reporting a numeric error if anything overflowed.
    pub(crate) fn from_computed(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_len(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_len(other)?;
        if !scale.is_finite() {
            return Err(Error::Argument(format!("non-finite coefficient {scale}")));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        ParamVector::from_computed(values)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_len(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector::from_computed(values)
    }

    pub fn scale(&self, factor: f64) -> Result<ParamVector> {
        ParamVector::from_computed(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub(crate) fn check_same_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim(self.len(), other.len()));
        }
        Ok(())
    }

    /// Encodes as a little-endian `u64` length followed by `len` little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.values.len() + 1));
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Argument(format!(
                "parameter blob too short: {} bytes",
                bytes.len()
            )));
        }
        let (head, body) = bytes.split_at(8);
        let len = u64::from_le_bytes(head.try_into().expect("8-byte header")) as usize;
        if body.len() != len.saturating_mul(8) {
            return Err(Error::Argument(format!(
                "parameter blob declares {len} values but carries {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ParamVector::new(values)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::io("<reader>", e))?;
        ParamVector::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamVector::from_bytes(&bytes)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite parameter value {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// How a task vector was trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Ordinary training of the full nonlinear network.
    Standard,
    /// Training of the first-order Taylor expansion around an anchor point.
    #[serde(alias = "ntk_linearized", alias = "linearized")]
    Ntk,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Standard => f.write_str("standard"),
            Regime::Ntk => f.write_str("ntk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Global,
    Client(usize),
}

/// A parameter-space delta `θ_t − θ_0`, tagged with its provenance.
///
/// Vectors built by [`task_vector`] also carry the exact rounding error of
/// the subtraction, so that [`combine`] can undo it and land back on `θ_t`
/// bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    delta: ParamVector,
    residual: Option<Vec<f64>>,
    pub owner: Owner,
    pub regime: Regime,
    /// Set for vectors that have never been fed into a global aggregation.
    pub standalone: bool,
}

impl TaskVector {
    pub fn new(delta: ParamVector, owner: Owner, regime: Regime, standalone: bool) -> Self {
        Self {
            delta,
            residual: None,
            owner,
            regime,
            standalone,
        }
    }

    pub fn zeros(d: usize, owner: Owner, regime: Regime, standalone: bool) -> Self {
        Self::new(ParamVector::zeros(d), owner, regime, standalone)
    }

    pub fn with_owner(mut self, owner: Owner) -> Self {
        self.owner = owner;
        self
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn standalone(mut self) -> Self {
        self.standalone = true;
        self
    }

    pub fn delta(&self) -> &ParamVector {
        &self.delta
    }

    /// Replaces the delta and drops any subtraction residual, which would no
    /// longer describe it.
    pub fn set_delta(&mut self, delta: ParamVector) {
        self.delta = delta;
        self.residual = None;
    }

    /// Rounding error left by [`task_vector`]'s subtraction, if any.
    pub fn residual(&self) -> Option<&[f64]> {
        self.residual.as_deref()
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn negated(&self) -> TaskVector {
        let delta = ParamVector {
            values: self.delta.values.iter().map(|v| -v).collect(),
        };
        TaskVector {
            delta,
            residual: self.residual.as_ref().map(|r| r.iter().map(|v| -v).collect()),
            ..*self
        }
    }
}

// Knuth's error-free addition: s + e == a + b exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `τ = θ_t − θ_0`, entry by entry, keeping the rounding error on the side.
pub fn task_vector(theta_t: &ParamVector, theta_0: &ParamVector) -> Result<TaskVector> {
    theta_t.check_same_len(theta_0)?;
    let (hi, lo): (Vec<f64>, Vec<f64>) = theta_t
        .values
        .iter()
        .zip(&theta_0.values)
        .map(|(&t, &b)| two_sum(t, -b))
        .unzip();
    let mut tau = TaskVector::new(ParamVector::from_computed(hi)?, Owner::Global, Regime::Standard, false);
    if lo.iter().any(|&e| e != 0.0) {
        tau.residual = Some(lo);
    }
    Ok(tau)
}

/// `θ_0 + Σ λ_i τ_i`, accumulated in term order with compensated summation
/// and rounded once at the end.
pub fn combine(theta_0: &ParamVector, terms: &[(f64, &TaskVector)]) -> Result<ParamVector> {
    for (lambda, tau) in terms {
        if !lambda.is_finite() {
            return Err(Error::Argument(format!("non-finite coefficient {lambda}")));
        }
        theta_0.check_same_len(&tau.delta)?;
    }
    let mut hi = theta_0.values.clone();
    let mut lo = vec![0.0; hi.len()];
    for (lambda, tau) in terms {
        // a zero weight contributes nothing, not even a signed zero
        if *lambda == 0.0 {
            continue;
        }
        let l = *lambda;
        for (i, &t) in tau.delta.values.iter().enumerate() {
            let p = l * t;
            let p_err = l.mul_add(t, -p);
            let (s, e) = two_sum(hi[i], p);
            hi[i] = s;
            lo[i] += e + p_err;
        }
        if let Some(r) = &tau.residual {
            for (c, &v) in lo.iter_mut().zip(r) {
                *c += l * v;
            }
        }
    }
    for (h, &c) in hi.iter_mut().zip(&lo) {
        if c != 0.0 {
            *h += c;
        }
    }
    ParamVector::from_computed(hi)
}

/// Cosine similarity of two task vectors, a diagnostic for how much they interfere.
pub fn cosine_interference(tau_a: &TaskVector, tau_b: &TaskVector) -> Result<f64> {
    let dot = tau_a.delta.dot(&tau_b.delta)?;
    let na = tau_a.delta.norm();
    let nb = tau_b.delta.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine of a zero-norm task vector is undefined".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One contiguous block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps flat index ranges to named model tensors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a `rows × cols` block and returns its range.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Range<usize> {
        let offset = self.len();
        let seg = Segment {
            name: name.into(),
            offset,
            rows,
            cols,
        };
        let range = seg.range();
        self.segments.push(seg);
        range
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Total parameter count `d`.
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
