//! The population reward-transfer system.
//!
//! Source side: `u_g = log(pi_b1 / pi_ref1) - g`, `q1 = (I - g1 P1^mu)^{-1} u_g` and
//! the anchor-normalized reward `r = (I - Pi_mu) q1 + g`. Target side: the soft
//! Bellman equation `q2 = r + C + g2 P2 Omega(q2)`. The residuals
//!
//! ```text
//! b1(q1)     = u_g + g1 P1^mu q1 - q1
//! b2(q1, q2) = (I - Pi_mu) q1 + g + C + g2 P2 Omega(q2) - q2
//! ```
//!
//! vanish at the truth. The profiled residual
//! `b2 + (I - Pi_mu)(I - g1 P1^mu)^{-1} b1` does not depend on `q1` at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    compose_policy_kernel, policy_average, resolvent_apply, Kernel, Policy, SAFn, SFn,
};
use crate::scalar::Real;
use crate::soft::{omega, soft_value_iteration, softmax_policy, state_value, SoftSpec};

/// Normalization `(mu r)(s) = g(s)` selecting one reward from the IRL class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AnchorSpec<T> {
    pub mu: Policy<T>,
    pub g: SFn<T>,
}

impl<T: Real> AnchorSpec<T> {
    pub fn new(mu: Policy<T>, g: SFn<T>) -> Result<Self> {
        if g.len() != mu.n_states() {
            return Err(Error::Shape("anchor function length".into()));
        }
        if g.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("anchor function not finite".into()));
        }
        Ok(Self { mu, g })
    }

    /// Point mass on `action` in every state.
    pub fn anchor_action(action: usize, g: SFn<T>, n_actions: usize) -> Result<Self> {
        Self::new(Policy::point_mass(g.len(), n_actions, action)?, g)
    }

    /// `(I - Pi_mu) f`.
    pub fn contrast(&self, f: &SAFn<T>) -> Result<SAFn<T>> {
        let avg = policy_average(&self.mu, f)?;
        Ok(SAFn::from_fn(f.n_states(), f.n_actions(), |s, a| {
            f.get(s, a) - avg.get(s)
        }))
    }

    /// `(I - Pi_mu)^T x`, the adjoint under the unweighted inner product.
    pub fn contrast_adjoint(&self, x: &SAFn<T>) -> SAFn<T> {
        let totals: Vec<T> = (0..x.n_states())
            .map(|s| x.row(s).iter().copied().sum())
            .collect();
        SAFn::from_fn(x.n_states(), x.n_actions(), |s, a| {
            x.get(s, a) - self.mu.get(s, a) * totals[s]
        })
    }
}

/// Source demonstrations environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SourceEnv<T> {
    pub p1: Kernel<T>,
    pub gamma1: T,
    pub pi_b1: Policy<T>,
    pub pi_ref1: Policy<T>,
}

/// Target control environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TargetEnv<T> {
    pub p2: Kernel<T>,
    pub spec2: SoftSpec<T>,
}

/// Source, target, anchor and reward shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TransferProblem<T> {
    pub source: SourceEnv<T>,
    pub target: TargetEnv<T>,
    pub anchor: AnchorSpec<T>,
    /// Reward shift; `None` until chosen by [`oracle_transfer`] or the caller.
    pub c: Option<T>,
}

impl<T: Real> TransferProblem<T> {
    pub fn new(
        source: SourceEnv<T>,
        target: TargetEnv<T>,
        anchor: AnchorSpec<T>,
        c: Option<T>,
    ) -> Result<Self> {
        let pr = Self {
            source,
            target,
            anchor,
            c,
        };
        pr.validate()?;
        Ok(pr)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.source.p1.shape();
        for (what, sh) in [
            ("target kernel", self.target.p2.shape()),
            ("behavior policy", self.source.pi_b1.shape()),
            ("source reference", self.source.pi_ref1.shape()),
            ("target reference", self.target.spec2.pi_ref.shape()),
            ("anchor policy", self.anchor.mu.shape()),
        ] {
            if sh != shape {
                return Err(Error::Shape(format!("{what}: {sh:?} vs {shape:?}")));
            }
        }
        let g1 = self.source.gamma1;
        if !(g1 >= T::zero() && g1 < T::one()) {
            return Err(Error::InvalidParameter(format!(
                "source discount {g1} outside [0,1)"
            )));
        }
        self.target.spec2.validate()?;
        if let Some(c) = self.c {
            if !(c >= T::zero()) {
                return Err(Error::InvalidParameter(format!(
                    "shift must be nonnegative, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.source.p1.shape()
    }

    pub fn shift(&self) -> Result<T> {
        self.c
            .ok_or_else(|| Error::Config("reward shift C has not been chosen".into()))
    }

    pub fn with_shift(mut self, c: T) -> Self {
        self.c = Some(c);
        self
    }

    /// Population source signal.
    pub fn u_g(&self) -> Result<SAFn<T>> {
        source_signal(&self.source.pi_b1, &self.source.pi_ref1, &self.anchor.g)
    }

    /// `b1(q1) = u + g1 P^mu q1 - q1` for a given (population or empirical) kernel.
    pub fn source_residual_with(
        &self,
        p1: &Kernel<T>,
        u_g: &SAFn<T>,
        q1: &SAFn<T>,
    ) -> Result<SAFn<T>> {
        let pq = compose_policy_kernel(p1, &self.anchor.mu, q1)?;
        let g1 = self.source.gamma1;
        Ok(SAFn::from_fn(q1.n_states(), q1.n_actions(), |s, a| {
            u_g.get(s, a) + g1 * pq.get(s, a) - q1.get(s, a)
        }))
    }

    pub fn source_residual(&self, q1: &SAFn<T>) -> Result<SAFn<T>> {
        self.source_residual_with(&self.source.p1, &self.u_g()?, q1)
    }

    /// Shifted reward `(I - Pi_mu) q1 + g + C`.
    pub fn shifted_reward(&self, q1: &SAFn<T>) -> Result<SAFn<T>> {
        let c = self.shift()?;
        let r = recover_reward(q1, &self.anchor)?;
        Ok(r.map(|v| v + c))
    }

    /// `b2(q1, q2) = (I - Pi_mu) q1 + g + C + g2 P Omega(q2) - q2` for a given kernel.
    pub fn target_residual_with(
        &self,
        p2: &Kernel<T>,
        q1: &SAFn<T>,
        q2: &SAFn<T>,
    ) -> Result<SAFn<T>> {
        let rc = self.shifted_reward(q1)?;
        let pv = p2.expect(&omega(q2, &self.target.spec2))?;
        let g2 = self.target.spec2.gamma;
        Ok(SAFn::from_fn(q2.n_states(), q2.n_actions(), |s, a| {
            rc.get(s, a) + g2 * pv.get(s, a) - q2.get(s, a)
        }))
    }

    pub fn target_residual(&self, q1: &SAFn<T>, q2: &SAFn<T>) -> Result<SAFn<T>> {
        self.target_residual_with(&self.target.p2, q1, q2)
    }
}

/// `u_g(s,a) = log pi_b1(a|s) - log pi_ref1(a|s) - g(s)`.
pub fn source_signal<T: Real>(
    pi_b1: &Policy<T>,
    pi_ref1: &Policy<T>,
    g: &SFn<T>,
) -> Result<SAFn<T>> {
    if pi_b1.shape() != pi_ref1.shape() || g.len() != pi_b1.n_states() {
        return Err(Error::Shape("source_signal: shapes differ".into()));
    }
    let (ns, na) = pi_b1.shape();
    let mut values = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let pb = pi_b1.get(s, a);
            let pr = pi_ref1.get(s, a);
            if !(pb > T::zero()) {
                return Err(Error::ZeroProbability {
                    what: "behavior policy",
                    state: s,
                    action: a,
                });
            }
            if !(pr > T::zero()) {
                return Err(Error::ZeroProbability {
                    what: "reference policy",
                    state: s,
                    action: a,
                });
            }
            values.push(pb.ln() - pr.ln() - g.get(s));
        }
    }
    SAFn::from_vec(ns, na, values)
}

/// `q1 = (I - g1 P1^mu)^{-1} u_g`.
pub fn source_fixed_point<T: Real>(
    u_g: &SAFn<T>,
    p1: &Kernel<T>,
    mu: &Policy<T>,
    gamma1: T,
    tol: T,
) -> Result<SAFn<T>> {
    resolvent_apply(p1, mu, gamma1, u_g, tol)
}

/// `r(s,a) = q1(s,a) - (mu q1)(s) + g(s)`.
pub fn recover_reward<T: Real>(q1: &SAFn<T>, anchor: &AnchorSpec<T>) -> Result<SAFn<T>> {
    if q1.n_states() != anchor.g.len() {
        return Err(Error::Shape("recover_reward: anchor length".into()));
    }
    let contrast = anchor.contrast(q1)?;
    Ok(SAFn::from_fn(q1.n_states(), q1.n_actions(), |s, a| {
        contrast.get(s, a) + anchor.g.get(s)
    }))
}

/// Smallest nonnegative shift making `r + C >= 0`.
pub fn choose_shift<T: Real>(r: &SAFn<T>) -> T {
    T::zero().max(-r.min())
}

/// Population solution of the transfer system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Oracle<T> {
    pub u_g: SAFn<T>,
    pub q1: SAFn<T>,
    /// Unshifted anchor-normalized reward.
    pub r: SAFn<T>,
    pub c: T,
    pub q2: SAFn<T>,
    pub pi2: Policy<T>,
    pub v2: SFn<T>,
}

impl<T: Real> Oracle<T> {
    pub fn shifted_reward(&self) -> SAFn<T> {
        self.r.map(|v| v + self.c)
    }
}

/// Source fixed point, reward recovery, shift, target soft fixed point and policy.
///
/// Uses `problem.c` when set (it must make the reward nonnegative), otherwise
/// [`choose_shift`].
pub fn oracle_transfer<T: Real>(problem: &TransferProblem<T>, tol: T) -> Result<Oracle<T>> {
    problem.validate()?;
    let u_g = problem.u_g()?;
    let q1 = source_fixed_point(
        &u_g,
        &problem.source.p1,
        &problem.anchor.mu,
        problem.source.gamma1,
        tol,
    )?;
    let r = recover_reward(&q1, &problem.anchor)?;
    let c = match problem.c {
        Some(c) => {
            let slack = T::lit(T::PROB_TOL) * (T::one() + r.sup_norm());
            if r.min() + c < -slack {
                return Err(Error::InvalidParameter(format!(
                    "shift {c} leaves negative reward {}",
                    r.min() + c
                )));
            }
            c
        }
        None => choose_shift(&r),
    };
    let rc = r.map(|v| v + c);
    let q2 = soft_value_iteration(&rc, &problem.target.p2, &problem.target.spec2, tol)?.q;
    let pi2 = softmax_policy(&q2, &problem.target.spec2);
    let v2 = state_value(&q2, &pi2)?;
    Ok(Oracle {
        u_g,
        q1,
        r,
        c,
        q2,
        pi2,
        v2,
    })
}

/// Coupled population route: iterate both blocks of the residual system
/// simultaneously until `b1` and `b2` vanish to `tol`.
pub fn solve_coupled_population<T: Real>(
    problem: &TransferProblem<T>,
    tol: T,
) -> Result<(SAFn<T>, SAFn<T>)> {
    let (ns, na) = problem.shape();
    let u_g = problem.u_g()?;
    let mut q1 = SAFn::zeros(ns, na);
    let mut q2 = SAFn::zeros(ns, na);
    let g1 = problem.source.gamma1.as_f64();
    let g2 = problem.target.spec2.gamma.as_f64();
    let cap = 20 * crate::soft::soft_iteration_cap(g1.max(g2), tol.as_f64());
    for _ in 0..cap {
        let b1 = problem.source_residual_with(&problem.source.p1, &u_g, &q1)?;
        let b2 = problem.target_residual(&q1, &q2)?;
        if b1.sup_norm() <= tol && b2.sup_norm() <= tol {
            return Ok((q1, q2));
        }
        q1 = &q1 + &b1;
        q2 = &q2 + &b2;
    }
    Err(Error::NoConvergence {
        what: "coupled population iteration",
        iters: cap,
        residual: f64::NAN,
    })
}

/// Which source kernel the profiling correction uses.
#[derive(Debug, Clone, Copy)]
pub enum SourceOperator<'a, T> {
    Population,
    Empirical(&'a Kernel<T>),
}

/// `(I - Pi_mu)(I - g1 P1^mu)^{-1} x`.
pub fn source_correction<T: Real>(
    problem: &TransferProblem<T>,
    operator: SourceOperator<'_, T>,
    x: &SAFn<T>,
    tol: T,
) -> Result<SAFn<T>> {
    let p1 = match operator {
        SourceOperator::Population => &problem.source.p1,
        SourceOperator::Empirical(k) => k,
    };
    let h = resolvent_apply(p1, &problem.anchor.mu, problem.source.gamma1, x, tol)?;
    problem.anchor.contrast(&h)
}

/// Profiled target residual `b2 + (I - Pi_mu)(I - g1 P1^mu)^{-1} b1` with
/// population operators.
pub fn profiled_target_residual<T: Real>(
    q1: &SAFn<T>,
    q2: &SAFn<T>,
    problem: &TransferProblem<T>,
    tol: T,
) -> Result<SAFn<T>> {
    let b1 = problem.source_residual(q1)?;
    let b2 = problem.target_residual(q1, q2)?;
    let corr = source_correction(problem, SourceOperator::Population, &b1, tol)?;
    Ok(&b2 + &corr)
}

/// Empirical counterpart: `b^2 + (I - Pi_mu)(I - g1 P^1^mu)^{-1} b^1` with
/// empirical kernels and source signal.
pub fn profiled_target_residual_empirical<T: Real>(
    q1: &SAFn<T>,
    q2: &SAFn<T>,
    problem: &TransferProblem<T>,
    p1_hat: &Kernel<T>,
    p2_hat: &Kernel<T>,
    u_hat: &SAFn<T>,
    tol: T,
) -> Result<SAFn<T>> {
    let b1 = problem.source_residual_with(p1_hat, u_hat, q1)?;
    let b2 = problem.target_residual_with(p2_hat, q1, q2)?;
    let corr = source_correction(problem, SourceOperator::Empirical(p1_hat), &b1, tol)?;
    Ok(&b2 + &corr)
}

/// Profiled residual that also treats the behavior policy as a nuisance
/// (nonparametric normalization `S(pi) = pi - pi_b1`):
///
/// `b2 + corr(b1(q1, pi)) - corr((pi - pi_b1) / pi_b1)`.
pub fn augmented_profiled_residual<T: Real>(
    q1: &SAFn<T>,
    q2: &SAFn<T>,
    pi: &Policy<T>,
    problem: &TransferProblem<T>,
    tol: T,
) -> Result<SAFn<T>> {
    let pi_b1 = &problem.source.pi_b1;
    let u_pi = source_signal(pi, &problem.source.pi_ref1, &problem.anchor.g)?;
    let b1 = problem.source_residual_with(&problem.source.p1, &u_pi, q1)?;
    let b2 = problem.target_residual(q1, q2)?;
    let (ns, na) = problem.shape();
    let mut score = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let pb = pi_b1.get(s, a);
            if !(pb > T::zero()) {
                return Err(Error::ZeroProbability {
                    what: "behavior policy",
                    state: s,
                    action: a,
                });
            }
            score.push((pi.get(s, a) - pb) / pb);
        }
    }
    let score = SAFn::from_vec(ns, na, score)?;
    let diff = &b1 - &score;
    let corr = source_correction(problem, SourceOperator::Population, &diff, tol)?;
    Ok(&b2 + &corr)
}

/// The two terms of the exact source error decomposition
/// `q^1 - q1* = g1 (I - g1 P^)^{-1}(P^ - P) q1* - (I - g1 P^)^{-1} b^1(q^1)`.
#[derive(Debug, Clone)]
pub struct SourceErrorTerms<T> {
    pub operator_term: SAFn<T>,
    pub residual_term: SAFn<T>,
}

pub fn source_error_terms<T: Real>(
    problem: &TransferProblem<T>,
    q1_hat: &SAFn<T>,
    q1_star: &SAFn<T>,
    p1_hat: &Kernel<T>,
    u_g: &SAFn<T>,
    tol: T,
) -> Result<SourceErrorTerms<T>> {
    let mu = &problem.anchor.mu;
    let g1 = problem.source.gamma1;
    let ph = compose_policy_kernel(p1_hat, mu, q1_star)?;
    let pp = compose_policy_kernel(&problem.source.p1, mu, q1_star)?;
    let op = (&ph - &pp).map(|v| v * g1);
    let operator_term = resolvent_apply(p1_hat, mu, g1, &op, tol)?;
    let b1_hat = problem.source_residual_with(p1_hat, u_g, q1_hat)?;
    let residual_term = resolvent_apply(p1_hat, mu, g1, &b1_hat, tol)?.map(|v| -v);
    Ok(SourceErrorTerms {
        operator_term,
        residual_term,
    })
}
