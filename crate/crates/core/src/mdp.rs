//! Tabular MDP tables and the linear operators built on them.
//!
//! Every state-action table is stored densely in row-major order with index
//! `s * n_actions + a`; kernels use `(s * n_actions + a) * n_states + s'`.
//! Operators on state-action functions are reduced to `n_states x n_states`
//! systems where possible: with `M(s, s') = sum_a pi(a|s) P(s'|s,a)`,
//! `(I - g P^pi)^{-1} f = f + g P (I - g M)^{-1} Pi_pi f`.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// States above which the resolvent switches from a dense solve to Neumann iteration.
pub const DENSE_STATE_LIMIT: usize = 256;

fn check_dims(n_states: usize, n_actions: usize) -> Result<()> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::Shape(format!(
            "need positive counts, got {n_states} states and {n_actions} actions"
        )));
    }
    Ok(())
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

// ---------------------------------------------------------------------------
// Kernel
// ---------------------------------------------------------------------------

/// Transition kernel `P(s'|s,a)`.
///
/// Rows are either probability vectors or, for empirical kernels, all-zero
/// rows marking unvisited pairs (see [`Kernel::new_substochastic`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Kernel<T> {
    n_states: usize,
    n_actions: usize,
    probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    RowSum(f64),
    Range { next_state: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelViolation {
    pub state: usize,
    pub action: usize,
    pub kind: ViolationKind,
}

impl<T: Real> Kernel<T> {
    /// Build a kernel, rejecting any row that is not a probability vector.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<T>) -> Result<Self> {
        let k = Self::raw(n_states, n_actions, probs)?;
        let report = validate_kernel(&k);
        if let Some(v) = report.first() {
            return Err(Error::InvalidProbability(format!(
                "{} bad kernel rows, first at (s={}, a={}): {:?}",
                report.len(),
                v.state,
                v.action,
                v.kind
            )));
        }
        Ok(k)
    }

    /// Like [`Kernel::new`] but all-zero rows are accepted.
    pub fn new_substochastic(n_states: usize, n_actions: usize, probs: Vec<T>) -> Result<Self> {
        let k = Self::raw(n_states, n_actions, probs)?;
        for v in validate_kernel(&k) {
            let zero_row = matches!(v.kind, ViolationKind::RowSum(s) if s == 0.0)
                && k.row(v.state, v.action).iter().all(|p| *p == T::zero());
            if !zero_row {
                return Err(Error::InvalidProbability(format!(
                    "row (s={}, a={}): {:?}",
                    v.state, v.action, v.kind
                )));
            }
        }
        Ok(k)
    }

    /// Renormalize each row to sum to one. Rows with nonpositive mass are an error.
    pub fn normalized(n_states: usize, n_actions: usize, mut probs: Vec<T>) -> Result<Self> {
        check_dims(n_states, n_actions)?;
        for (i, row) in probs.chunks_mut(n_states).enumerate() {
            let z: T = row.iter().copied().sum();
            if !(z > T::zero()) || row.iter().any(|p| *p < T::zero()) {
                return Err(Error::InvalidProbability(format!(
                    "row (s={}, a={}) cannot be normalized",
                    i / n_actions,
                    i % n_actions
                )));
            }
            row.iter_mut().for_each(|p| *p = *p / z);
        }
        Self::new(n_states, n_actions, probs)
    }

    fn raw(n_states: usize, n_actions: usize, probs: Vec<T>) -> Result<Self> {
        check_dims(n_states, n_actions)?;
        if probs.len() != n_states * n_actions * n_states {
            return Err(Error::Shape(format!(
                "kernel table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions * n_states
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
        for s in 0..n_states {
            for a in 0..n_actions {
                for sn in 0..n_states {
                    probs.push(f(s, a, sn));
                }
            }
        }
        Self::new(n_states, n_actions, probs)
    }

    /// Kernel from nonnegative row weights, normalized per row.
    pub fn from_weights_fn(
        n_states: usize,
        n_actions: usize,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
        for s in 0..n_states {
            for a in 0..n_actions {
                for sn in 0..n_states {
                    probs.push(f(s, a, sn));
                }
            }
        }
        Self::normalized(n_states, n_actions, probs)
    }

    /// Deterministic kernel from a successor map.
    pub fn deterministic(
        n_states: usize,
        n_actions: usize,
        next: impl Fn(usize, usize) -> usize,
    ) -> Result<Self> {
        Self::from_fn(n_states, n_actions, |s, a, sn| {
            if next(s, a) == sn {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, next: usize) -> T {
        self.probs[(s * self.n_actions + a) * self.n_states + next]
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[T] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    pub fn is_zero_row(&self, s: usize, a: usize) -> bool {
        self.row(s, a).iter().all(|p| *p == T::zero())
    }

    /// `(P v)(s,a) = sum_s' P(s'|s,a) v(s')`.
    pub fn expect(&self, v: &SFn<T>) -> Result<SAFn<T>> {
        if v.len() != self.n_states {
            return Err(Error::Shape(format!(
                "state function has {} entries, kernel has {} states",
                v.len(),
                self.n_states
            )));
        }
        let values = self
            .probs
            .chunks(self.n_states)
            .map(|row| dot(row, v.values()))
            .collect();
        Ok(SAFn {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values,
        })
    }

    /// `w(s') = sum_{s,a} P(s'|s,a) x(s,a)`.
    pub fn pushforward(&self, x: &SAFn<T>) -> SFn<T> {
        let mut w = vec![T::zero(); self.n_states];
        for (row, &xv) in self.probs.chunks(self.n_states).zip(&x.values) {
            if xv != T::zero() {
                for (wi, &p) in w.iter_mut().zip(row) {
                    *wi = *wi + p * xv;
                }
            }
        }
        SFn::from_vec(w)
    }

    /// State-to-state matrix `M(s,s') = sum_a pi(a|s) P(s'|s,a)`, row-major.
    pub fn state_matrix(&self, pi: &Policy<T>) -> Vec<T> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut m = vec![T::zero(); ns * ns];
        for s in 0..ns {
            let out = &mut m[s * ns..(s + 1) * ns];
            for a in 0..na {
                let w = pi.get(s, a);
                if w == T::zero() {
                    continue;
                }
                for (o, &p) in out.iter_mut().zip(self.row(s, a)) {
                    *o = *o + w * p;
                }
            }
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parse and validate (empty rows are accepted, as for empirical kernels).
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s)?;
        Self::new_substochastic(raw.n_states, raw.n_actions, raw.probs)
    }
}

/// Rows violating row-stochasticity or the `[0,1]` range. Empty means valid.
pub fn validate_kernel<T: Real>(p: &Kernel<T>) -> Vec<KernelViolation> {
    let tol = T::PROB_TOL;
    let mut out = Vec::new();
    for s in 0..p.n_states {
        for a in 0..p.n_actions {
            let row = p.row(s, a);
            for (next, &v) in row.iter().enumerate() {
                if !(v >= T::zero() && v <= T::one()) {
                    out.push(KernelViolation {
                        state: s,
                        action: a,
                        kind: ViolationKind::Range {
                            next_state: next,
                            value: v.to_f64().unwrap_or(f64::NAN),
                        },
                    });
                }
            }
            let sum: T = row.iter().copied().sum();
            let sum = sum.to_f64().unwrap_or(f64::NAN);
            if !((sum - 1.0).abs() <= tol) {
                out.push(KernelViolation {
                    state: s,
                    action: a,
                    kind: ViolationKind::RowSum(sum),
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

/// Conditional action distribution `pi(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Policy<T> {
    n_states: usize,
    n_actions: usize,
    probs: Vec<T>,
}

impl<T: Real> Policy<T> {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<T>) -> Result<Self> {
        check_dims(n_states, n_actions)?;
        if probs.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if let Some(a) = row
                .iter()
                .position(|p| !(*p >= T::zero() && *p <= T::one()))
            {
                return Err(Error::InvalidProbability(format!(
                    "policy entry (s={s}, a={a}) = {} outside [0,1]",
                    row[a]
                )));
            }
            let z: T = row.iter().copied().sum();
            if !((z.as_f64() - 1.0).abs() <= T::PROB_TOL) {
                return Err(Error::InvalidProbability(format!(
                    "policy row {s} sums to {z}"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Renormalize each row (opt-in; construction via [`Policy::new`] never normalizes).
    pub fn normalized(n_states: usize, n_actions: usize, mut probs: Vec<T>) -> Result<Self> {
        check_dims(n_states, n_actions)?;
        if probs.len() != n_states * n_actions {
            return Err(Error::Shape("policy table size".into()));
        }
        for (s, row) in probs.chunks_mut(n_actions).enumerate() {
            let z: T = row.iter().copied().sum();
            if !(z > T::zero()) || row.iter().any(|p| *p < T::zero()) {
                return Err(Error::InvalidProbability(format!(
                    "policy row {s} cannot be normalized"
                )));
            }
            row.iter_mut().for_each(|p| *p = *p / z);
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = T::one() / T::from_usize_lossy(n_actions);
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    /// Per-state point mass on `action`.
    pub fn point_mass(n_states: usize, n_actions: usize, action: usize) -> Result<Self> {
        Self::point_mass_per_state(n_states, n_actions, |_| action)
    }

    pub fn point_mass_per_state(
        n_states: usize,
        n_actions: usize,
        action: impl Fn(usize) -> usize,
    ) -> Result<Self> {
        check_dims(n_states, n_actions)?;
        let mut probs = vec![T::zero(); n_states * n_actions];
        for s in 0..n_states {
            let a = action(s);
            if a >= n_actions {
                return Err(Error::Shape(format!("anchor action {a} out of range")));
            }
            probs[s * n_actions + a] = T::one();
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }
    pub fn probs(&self) -> &[T] {
        &self.probs
    }
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> T {
        self.probs[s * self.n_actions + a]
    }
    #[inline]
    pub fn row(&self, s: usize) -> &[T] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn min_prob(&self) -> T {
        self.probs.iter().copied().fold(T::infinity(), T::min)
    }

    /// The single supported action of each state, if this is a point-mass policy.
    pub fn point_mass_actions(&self) -> Option<Vec<usize>> {
        (0..self.n_states)
            .map(|s| {
                let row = self.row(s);
                let a = row.iter().position(|p| *p == T::one())?;
                row.iter()
                    .enumerate()
                    .all(|(b, p)| b == a || *p == T::zero())
                    .then_some(a)
            })
            .collect()
    }

    pub fn as_safn(&self) -> SAFn<T> {
        SAFn {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.probs.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s)?;
        Self::new(raw.n_states, raw.n_actions, raw.probs)
    }
}

// ---------------------------------------------------------------------------
// State-action and state functions
// ---------------------------------------------------------------------------

/// Real-valued state-action table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SAFn<T> {
    n_states: usize,
    n_actions: usize,
    values: Vec<T>,
}

impl<T: Real> SAFn<T> {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::constant(n_states, n_actions, T::zero())
    }

    pub fn constant(n_states: usize, n_actions: usize, c: T) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![c; n_states * n_actions],
        }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, values: Vec<T>) -> Result<Self> {
        check_dims(n_states, n_actions)?;
        if values.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "state-action table has {} entries, expected {}",
                values.len(),
                n_states * n_actions
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite entry at (s={}, a={})",
                i / n_actions,
                i % n_actions
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn from_fn(n_states: usize, n_actions: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                values.push(f(s, a));
            }
        }
        Self {
            n_states,
            n_actions,
            values,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> T {
        self.values[s * self.n_actions + a]
    }
    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: T) {
        self.values[s * self.n_actions + a] = v;
    }
    #[inline]
    pub fn row(&self, s: usize) -> &[T] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "state-action shape mismatch");
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sup_norm(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `<f, g>_rho = sum rho f g`.
    pub fn inner(&self, other: &Self, rho: &SADist<T>) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .zip(&rho.weights)
            .map(|((&a, &b), &w)| w * a * b)
            .sum()
    }

    /// Squared weighted norm `||f||_rho^2`.
    pub fn norm_sq(&self, rho: &SADist<T>) -> T {
        self.inner(self, rho)
    }

    pub fn norm(&self, rho: &SADist<T>) -> T {
        self.norm_sq(rho).sqrt()
    }

    /// Statewise broadcast `(s,a) -> v(s)`.
    pub fn broadcast(v: &SFn<T>, n_actions: usize) -> Self {
        Self::from_fn(v.len(), n_actions, |s, _| v.get(s))
    }
}

macro_rules! impl_elementwise {
    ($ty:ident, $tr:ident, $method:ident, $op:tt) => {
        impl<'a, T: Real> $tr<&'a $ty<T>> for &'a $ty<T> {
            type Output = $ty<T>;
            fn $method(self, rhs: &'a $ty<T>) -> $ty<T> {
                assert_eq!(self.values.len(), rhs.values.len(), "table size mismatch");
                let mut out = self.clone();
                out.values
                    .iter_mut()
                    .zip(&rhs.values)
                    .for_each(|(a, &b)| *a = *a $op b);
                out
            }
        }
        impl<T: Real> $tr<$ty<T>> for $ty<T> {
            type Output = $ty<T>;
            fn $method(self, rhs: $ty<T>) -> $ty<T> {
                (&self).$method(&rhs)
            }
        }
    };
}

impl_elementwise!(SAFn, Add, add, +);
impl_elementwise!(SAFn, Sub, sub, -);
impl_elementwise!(SFn, Add, add, +);
impl_elementwise!(SFn, Sub, sub, -);

impl<T: Real> Mul<T> for &SAFn<T> {
    type Output = SAFn<T>;
    fn mul(self, c: T) -> SAFn<T> {
        self.map(|v| v * c)
    }
}

impl<T: Real> Neg for &SAFn<T> {
    type Output = SAFn<T>;
    fn neg(self) -> SAFn<T> {
        self.map(|v| -v)
    }
}

/// Real-valued state table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SFn<T> {
    values: Vec<T>,
}

impl<T: Real> SFn<T> {
    pub fn from_vec(values: Vec<T>) -> Self {
        Self { values }
    }
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![T::zero(); n],
        }
    }
    pub fn constant(n: usize, c: T) -> Self {
        Self { values: vec![c; n] }
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    #[inline]
    pub fn get(&self, s: usize) -> T {
        self.values[s]
    }
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
    pub fn sup_norm(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Nonnegative state-action weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SADist<T> {
    n_states: usize,
    n_actions: usize,
    #[serde(rename = "probs")]
    weights: Vec<T>,
}

impl<T: Real> SADist<T> {
    pub fn new(n_states: usize, n_actions: usize, weights: Vec<T>) -> Result<Self> {
        check_dims(n_states, n_actions)?;
        if weights.len() != n_states * n_actions {
            return Err(Error::Shape("distribution table size".into()));
        }
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return Err(Error::InvalidProbability("negative weight".into()));
        }
        let z: T = weights.iter().copied().sum();
        if !((z.as_f64() - 1.0).abs() <= T::PROB_TOL) {
            return Err(Error::InvalidProbability(format!(
                "weights sum to {z}, expected 1"
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            weights,
        })
    }

    /// Normalize nonnegative weights with positive total mass (opt-in).
    pub fn normalized(n_states: usize, n_actions: usize, mut weights: Vec<T>) -> Result<Self> {
        let z: T = weights.iter().copied().sum();
        if !(z > T::zero()) {
            return Err(Error::InvalidProbability("zero total mass".into()));
        }
        weights.iter_mut().for_each(|w| *w = *w / z);
        Self::new(n_states, n_actions, weights)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let w = T::one() / T::from_usize_lossy(n_states * n_actions);
        Self {
            n_states,
            n_actions,
            weights: vec![w; n_states * n_actions],
        }
    }

    /// `rho(s,a) = nu(s) pi(a|s)`.
    pub fn product(state_dist: &SFn<T>, pi: &Policy<T>) -> Result<Self> {
        if state_dist.len() != pi.n_states() {
            return Err(Error::Shape("state distribution vs policy".into()));
        }
        let w = (0..pi.n_states())
            .flat_map(|s| (0..pi.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| state_dist.get(s) * pi.get(s, a))
            .collect();
        Self::new(pi.n_states(), pi.n_actions(), w)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }
    pub fn weights(&self) -> &[T] {
        &self.weights
    }
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> T {
        self.weights[s * self.n_actions + a]
    }

    pub fn state_marginal(&self) -> SFn<T> {
        SFn::from_vec(
            self.weights
                .chunks(self.n_actions)
                .map(|r| r.iter().copied().sum())
                .collect(),
        )
    }

    pub fn min_weight(&self) -> T {
        self.weights.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn as_safn(&self) -> SAFn<T> {
        SAFn {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.weights.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s)?;
        Self::new(raw.n_states, raw.n_actions, raw.weights)
    }
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `(Pi_pi f)(s) = sum_a pi(a|s) f(s,a)`.
pub fn policy_average<T: Real>(pi: &Policy<T>, f: &SAFn<T>) -> Result<SFn<T>> {
    if pi.shape() != f.shape() {
        return Err(shape_err("policy_average", pi.shape(), f.shape()));
    }
    Ok(SFn::from_vec(
        (0..pi.n_states())
            .map(|s| dot(pi.row(s), f.row(s)))
            .collect(),
    ))
}

/// `(P^pi f)(s,a) = sum_s' P(s'|s,a) sum_a' pi(a'|s') f(s',a')`.
pub fn compose_policy_kernel<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    f: &SAFn<T>,
) -> Result<SAFn<T>> {
    if p.shape() != pi.shape() {
        return Err(shape_err("compose_policy_kernel", p.shape(), pi.shape()));
    }
    p.expect(&policy_average(pi, f)?)
}

/// `((P^pi)^T x)(s',a') = pi(a'|s') sum_{s,a} P(s'|s,a) x(s,a)`.
pub fn compose_policy_kernel_transpose<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    x: &SAFn<T>,
) -> Result<SAFn<T>> {
    if p.shape() != pi.shape() || p.shape() != x.shape() {
        return Err(shape_err("transpose composition", p.shape(), x.shape()));
    }
    let w = p.pushforward(x);
    Ok(SAFn::from_fn(p.n_states(), p.n_actions(), |s, a| {
        pi.get(s, a) * w.get(s)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResolventMethod {
    /// Dense solve up to [`DENSE_STATE_LIMIT`] states, Neumann iteration above.
    #[default]
    Auto,
    Dense,
    Neumann,
}

fn check_gamma<T: Real>(gamma: T) -> Result<()> {
    if !(gamma >= T::zero() && gamma < T::one()) {
        return Err(Error::InvalidParameter(format!(
            "discount {gamma} outside [0,1)"
        )));
    }
    Ok(())
}

fn neumann_cap<T: Real>(gamma: T, tol: T, scale: T) -> usize {
    let g = gamma.as_f64();
    let ratio = (tol.as_f64() / scale.as_f64().max(f64::MIN_POSITIVE)).min(0.5);
    ((ratio.ln() / g.ln()).ceil().max(1.0) as usize).saturating_add(1000)
}

/// `h = (I - gamma P^pi)^{-1} f`, with `||h - (f + gamma P^pi h)||_inf <= tol`.
pub fn resolvent_apply<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    gamma: T,
    f: &SAFn<T>,
    tol: T,
) -> Result<SAFn<T>> {
    resolvent_apply_with(p, pi, gamma, f, tol, ResolventMethod::Auto)
}

pub fn resolvent_apply_with<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    gamma: T,
    f: &SAFn<T>,
    tol: T,
    method: ResolventMethod,
) -> Result<SAFn<T>> {
    check_gamma(gamma)?;
    if p.shape() != pi.shape() || p.shape() != f.shape() {
        return Err(shape_err("resolvent_apply", p.shape(), f.shape()));
    }
    if gamma == T::zero() {
        return Ok(f.clone());
    }
    let dense = match method {
        ResolventMethod::Auto => p.n_states() <= DENSE_STATE_LIMIT,
        ResolventMethod::Dense => true,
        ResolventMethod::Neumann => false,
    };
    if dense {
        let ns = p.n_states();
        let m = p.state_matrix(pi);
        let mut a: Vec<T> = m.iter().map(|&v| -gamma * v).collect();
        for i in 0..ns {
            a[i * ns + i] = a[i * ns + i] + T::one();
        }
        let lu = linalg::Lu::factor(ns, a)?;
        let rhs = policy_average(pi, f)?;
        let v = SFn::from_vec(lu.solve(rhs.values()));
        let pv = p.expect(&v)?;
        let mut h = f.zip_map(&pv, |fv, x| fv + gamma * x);
        // one step of iterative refinement
        let r = &(f + &(&compose_policy_kernel(p, pi, &h)? * gamma)) - &h;
        if r.sup_norm() > T::zero() {
            let dv = SFn::from_vec(lu.solve(policy_average(pi, &r)?.values()));
            let pdv = p.expect(&dv)?;
            let dh = r.zip_map(&pdv, |rv, x| rv + gamma * x);
            h = &h + &dh;
        }
        Ok(h)
    } else {
        let cap = neumann_cap(gamma, tol, f.sup_norm());
        let mut h = f.clone();
        for _ in 0..cap {
            let next = &compose_policy_kernel(p, pi, &h)? * gamma + f.clone();
            let diff = (&next - &h).sup_norm();
            h = next;
            if gamma * diff <= tol {
                return Ok(h);
            }
        }
        let residual = (&(f + &(&compose_policy_kernel(p, pi, &h)? * gamma)) - &h).sup_norm();
        Err(Error::NoConvergence {
            what: "Neumann resolvent",
            iters: cap,
            residual: residual.as_f64(),
        })
    }
}

/// `x = (I - gamma (P^pi)^T)^{-1} y`.
pub fn transpose_resolvent_apply<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    gamma: T,
    y: &SAFn<T>,
    tol: T,
    method: ResolventMethod,
) -> Result<SAFn<T>> {
    check_gamma(gamma)?;
    if p.shape() != pi.shape() || p.shape() != y.shape() {
        return Err(shape_err("transpose resolvent", p.shape(), y.shape()));
    }
    if gamma == T::zero() {
        return Ok(y.clone());
    }
    let dense = match method {
        ResolventMethod::Auto => p.n_states() <= DENSE_STATE_LIMIT,
        ResolventMethod::Dense => true,
        ResolventMethod::Neumann => false,
    };
    if dense {
        let ns = p.n_states();
        let mt = linalg::transpose(ns, &p.state_matrix(pi));
        let mut a: Vec<T> = mt.iter().map(|&v| -gamma * v).collect();
        for i in 0..ns {
            a[i * ns + i] = a[i * ns + i] + T::one();
        }
        let lu = linalg::Lu::factor(ns, a)?;
        let lift = |rhs: &SAFn<T>| -> SAFn<T> {
            let w = lu.solve(p.pushforward(rhs).values());
            SAFn::from_fn(ns, p.n_actions(), |s, a| {
                rhs.get(s, a) + gamma * pi.get(s, a) * w[s]
            })
        };
        let mut x = lift(y);
        // one step of iterative refinement
        let r = &(y + &(&compose_policy_kernel_transpose(p, pi, &x)? * gamma)) - &x;
        if r.sup_norm() > T::zero() {
            x = &x + &lift(&r);
        }
        Ok(x)
    } else {
        let cap = neumann_cap(gamma, tol, y.sup_norm());
        let mut x = y.clone();
        for _ in 0..cap {
            let next = &compose_policy_kernel_transpose(p, pi, &x)? * gamma + y.clone();
            let diff = (&next - &x).sup_norm();
            x = next;
            if gamma * diff <= tol {
                return Ok(x);
            }
        }
        Err(Error::NoConvergence {
            what: "Neumann transpose resolvent",
            iters: cap,
            residual: f64::NAN,
        })
    }
}

/// Normalized discounted occupancy `(1-g) sum_t g^t ((P^pi)^T)^t rho`.
pub fn discounted_occupancy<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    rho: &SADist<T>,
    gamma: T,
) -> Result<SADist<T>> {
    let x = transpose_resolvent_apply(
        p,
        pi,
        gamma,
        &rho.as_safn(),
        T::lit(T::SOLVE_TOL),
        ResolventMethod::Auto,
    )?;
    let scale = T::one() - gamma;
    let w: Vec<T> = x
        .values()
        .iter()
        .map(|&v| (v * scale).max(T::zero()))
        .collect();
    // renormalize away rounding; substochastic kernels leak mass and are rescaled
    SADist::normalized(p.n_states(), p.n_actions(), w)
}

/// Occupancy started from a state distribution with actions drawn from `pi`.
pub fn discounted_occupancy_from_states<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    nu: &SFn<T>,
    gamma: T,
) -> Result<SADist<T>> {
    discounted_occupancy(p, pi, &SADist::product(nu, pi)?, gamma)
}

/// Average and worst per-row total variation `1/2 sum_s' |P1 - P2|`.
pub fn tv_shift_stats<T: Real>(p1: &Kernel<T>, p2: &Kernel<T>) -> Result<(T, T)> {
    if p1.shape() != p2.shape() {
        return Err(shape_err("tv_shift_stats", p1.shape(), p2.shape()));
    }
    let half = T::lit(0.5);
    let mut sum = T::zero();
    let mut max = T::zero();
    let ns = p1.n_states();
    for (r1, r2) in p1.probs().chunks(ns).zip(p2.probs().chunks(ns)) {
        let tv = half * r1.iter().zip(r2).map(|(&a, &b)| (a - b).abs()).sum::<T>();
        sum = sum + tv;
        max = max.max(tv);
    }
    let rows = T::from_usize_lossy(p1.n_states() * p1.n_actions());
    Ok((sum / rows, max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain2() -> Kernel<f64> {
        Kernel::new(2, 2, vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1]).unwrap()
    }

    #[test]
    fn identity_kernel_validates() {
        let p = Kernel::<f64>::deterministic(3, 2, |s, _| s).unwrap();
        assert!(validate_kernel(&p).is_empty());
    }

    #[test]
    fn short_row_is_reported() {
        let mut probs = Kernel::<f64>::deterministic(2, 2, |s, _| s)
            .unwrap()
            .probs()
            .to_vec();
        probs[2 * 2 + 1] = 0.9; // row (s=1, a=0), next state 1
        let k = Kernel::raw(2, 2, probs).unwrap();
        let report = validate_kernel(&k);
        assert_eq!(report.len(), 1);
        assert_eq!((report[0].state, report[0].action), (1, 0));
        assert!(matches!(report[0].kind, ViolationKind::RowSum(s) if (s - 0.9).abs() < 1e-12));
    }

    #[test]
    fn negative_entry_is_range_violation() {
        let k = Kernel::raw(2, 1, vec![1.2, -0.2, 0.0, 1.0]).unwrap();
        let report = validate_kernel(&k);
        assert!(report
            .iter()
            .any(|v| matches!(v.kind, ViolationKind::Range { next_state: 1, .. })));
        assert!(Kernel::new(2, 1, vec![1.2, -0.2, 0.0, 1.0]).is_err());
    }

    #[test]
    fn policy_average_examples() {
        let f = SAFn::from_vec(2, 2, vec![1.0, 3.0, -2.0, 5.0]).unwrap();
        let mu = Policy::point_mass(2, 2, 0).unwrap();
        assert_eq!(policy_average(&mu, &f).unwrap().values(), &[1.0, -2.0]);
        let unif = Policy::uniform(2, 2);
        assert_eq!(policy_average(&unif, &f).unwrap().get(0), 2.0);
        let c = SAFn::<f64>::constant(2, 2, 4.5);
        let pi = Policy::new(2, 2, vec![0.3, 0.7, 0.9, 0.1]).unwrap();
        for v in policy_average(&pi, &c).unwrap().values() {
            assert!((v - 4.5).abs() < 1e-15);
        }
    }

    #[test]
    fn policy_average_shape_mismatch() {
        let f = SAFn::<f64>::zeros(3, 2);
        assert!(policy_average(&Policy::uniform(2, 2), &f).is_err());
    }

    #[test]
    fn compose_examples() {
        let p = chain2();
        let pi = Policy::uniform(2, 2);
        let c = SAFn::constant(2, 2, -1.25);
        for v in compose_policy_kernel(&p, &pi, &c).unwrap().values() {
            assert!((v + 1.25).abs() < 1e-15);
        }
        let det = Kernel::<f64>::deterministic(3, 2, |_, _| 1).unwrap();
        let mu = Policy::point_mass(3, 2, 0).unwrap();
        let f = SAFn::from_fn(3, 2, |s, a| (10 * s + a) as f64);
        for v in compose_policy_kernel(&det, &mu, &f).unwrap().values() {
            assert_eq!(*v, 10.0);
        }
        // dense matrix product oracle
        let f = SAFn::from_vec(2, 2, vec![1.0, -1.0, 2.0, 4.0]).unwrap();
        let got = compose_policy_kernel(&p, &pi, &f).unwrap();
        let mut dense = [[0.0; 4]; 4];
        for s in 0..2 {
            for a in 0..2 {
                for sn in 0..2 {
                    for an in 0..2 {
                        dense[s * 2 + a][sn * 2 + an] = p.get(s, a, sn) * 0.5;
                    }
                }
            }
        }
        for i in 0..4 {
            let want: f64 = (0..4).map(|j| dense[i][j] * f.values()[j]).sum();
            assert!((got.values()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn resolvent_trivial_cases() {
        let p = chain2();
        let pi = Policy::uniform(2, 2);
        let f = SAFn::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resolvent_apply(&p, &pi, 0.0, &f, 1e-12).unwrap(), f);
        let one = Kernel::<f64>::new(1, 1, vec![1.0]).unwrap();
        let pi1 = Policy::uniform(1, 1);
        for method in [ResolventMethod::Dense, ResolventMethod::Neumann] {
            let h =
                resolvent_apply_with(&one, &pi1, 0.9, &SAFn::constant(1, 1, 2.0), 1e-11, method)
                    .unwrap();
            assert!((h.get(0, 0) - 20.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tv_stats_examples() {
        let p = chain2();
        assert_eq!(tv_shift_stats(&p, &p).unwrap(), (0.0, 0.0));
        let mut probs = p.probs().to_vec();
        // row 0: 0.7,0.3 -> 0.6,0.4 (tv 0.1); row 3: 0.9,0.1 -> 0.6,0.4 (tv 0.3)
        probs[0] = 0.6;
        probs[1] = 0.4;
        probs[6] = 0.6;
        probs[7] = 0.4;
        let q = Kernel::new(2, 2, probs).unwrap();
        let (avg, max) = tv_shift_stats(&p, &q).unwrap();
        assert!((avg - 0.1).abs() < 1e-12);
        assert!((max - 0.3).abs() < 1e-12);
    }

    #[test]
    fn occupancy_trivial_cases() {
        let p = chain2();
        let pi = Policy::uniform(2, 2);
        let rho = SADist::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d0 = discounted_occupancy(&p, &pi, &rho, 0.0).unwrap();
        for (a, b) in d0.weights().iter().zip(rho.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        let absorbing = Kernel::<f64>::new(1, 1, vec![1.0]).unwrap();
        let d = discounted_occupancy(
            &absorbing,
            &Policy::uniform(1, 1),
            &SADist::uniform(1, 1),
            0.95,
        )
        .unwrap();
        assert!((d.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_has_fixed_field_order() {
        let p = Kernel::<f64>::deterministic(1, 1, |_, _| 0).unwrap();
        assert_eq!(
            p.to_json().unwrap(),
            r#"{"n_states":1,"n_actions":1,"probs":[1.0]}"#
        );
        let d = SADist::<f64>::uniform(1, 2);
        assert_eq!(
            d.to_json().unwrap(),
            r#"{"n_states":1,"n_actions":2,"probs":[0.5,0.5]}"#
        );
        let back = Kernel::<f64>::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(
            Policy::<f64>::from_json(r#"{"n_states":1,"n_actions":2,"probs":[0.5,0.6]}"#).is_err()
        );
    }
}
