//! KL-regularized ("soft") control: log-sum-exp values, softmax policies,
//! soft value iteration and exact regularized returns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    discounted_occupancy_from_states, policy_average, resolvent_apply, Kernel, Policy, SADist,
    SAFn, SFn,
};
use crate::scalar::Real;

/// Discount, temperature and full-support reference policy of one soft control problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SoftSpec<T> {
    pub gamma: T,
    pub tau: T,
    pub pi_ref: Policy<T>,
}

impl<T: Real> SoftSpec<T> {
    pub fn new(gamma: T, tau: T, pi_ref: Policy<T>) -> Result<Self> {
        let spec = Self { gamma, tau, pi_ref };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(n_states: usize, n_actions: usize, gamma: T, tau: T) -> Result<Self> {
        Self::new(gamma, tau, Policy::uniform(n_states, n_actions))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= T::zero() && self.gamma < T::one()) {
            return Err(Error::InvalidParameter(format!(
                "discount {} outside [0,1)",
                self.gamma
            )));
        }
        if !(self.tau > T::zero()) || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !(self.pi_ref.min_prob() > T::zero()) {
            return Err(Error::InvalidParameter(
                "reference policy must have full support".into(),
            ));
        }
        Ok(())
    }
}

/// `Omega(q)(s) = tau log sum_a pi_ref(a|s) exp(q(s,a)/tau)`, max-shifted.
pub fn omega<T: Real>(q: &SAFn<T>, spec: &SoftSpec<T>) -> SFn<T> {
    assert_eq!(q.shape(), spec.pi_ref.shape(), "omega: shape mismatch");
    SFn::from_vec(
        (0..q.n_states())
            .map(|s| log_sum_exp_row(q.row(s), spec.pi_ref.row(s), spec.tau))
            .collect(),
    )
}

#[inline]
pub(crate) fn log_sum_exp_row<T: Real>(q: &[T], reference: &[T], tau: T) -> T {
    let m = q.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = q
        .iter()
        .zip(reference)
        .map(|(&v, &w)| w * ((v - m) / tau).exp())
        .sum();
    m + tau * z.ln()
}

/// Writes the softmax row `pi_ref exp(q/tau) / Z` into `out`.
#[inline]
pub(crate) fn softmax_row<T: Real>(q: &[T], reference: &[T], tau: T, out: &mut [T]) {
    let m = q.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for ((o, &v), &w) in out.iter_mut().zip(q).zip(reference) {
        *o = w * ((v - m) / tau).exp();
        z = z + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / z);
}

pub fn softmax_policy<T: Real>(q: &SAFn<T>, spec: &SoftSpec<T>) -> Policy<T> {
    assert_eq!(
        q.shape(),
        spec.pi_ref.shape(),
        "softmax_policy: shape mismatch"
    );
    let na = q.n_actions();
    let mut probs = vec![T::zero(); q.values().len()];
    for (s, out) in probs.chunks_mut(na).enumerate() {
        softmax_row(q.row(s), spec.pi_ref.row(s), spec.tau, out);
    }
    Policy::new(q.n_states(), na, probs).expect("softmax rows are normalized")
}

/// Result of [`soft_value_iteration`].
#[derive(Debug, Clone)]
pub struct SoftSolution<T> {
    pub q: SAFn<T>,
    pub iters: usize,
    /// Largest observed ratio of successive sup-norm updates.
    pub max_contraction_ratio: f64,
}

/// Iteration cap `10 * ceil(log(tol) / log(gamma))`.
pub fn soft_iteration_cap(gamma: f64, tol: f64) -> usize {
    if gamma <= 0.0 {
        return 10;
    }
    10 * ((tol.ln() / gamma.ln()).ceil().max(1.0) as usize)
}

/// Solves `q = r + gamma P Omega(q)` by fixed-point iteration from `q = r`.
pub fn soft_value_iteration<T: Real>(
    r: &SAFn<T>,
    p: &Kernel<T>,
    spec: &SoftSpec<T>,
    tol: T,
) -> Result<SoftSolution<T>> {
    spec.validate()?;
    if r.shape() != p.shape() || p.shape() != spec.pi_ref.shape() {
        return Err(Error::Shape(
            "soft_value_iteration: table shapes differ".into(),
        ));
    }
    let gamma = spec.gamma;
    let mut q = r.clone();
    let mut prev_diff: Option<T> = None;
    let mut max_ratio = 0.0f64;
    let cap = soft_iteration_cap(gamma.as_f64(), tol.as_f64());
    let noise_floor = T::lit(1e3) * T::epsilon();
    for it in 1..=cap {
        let next = r + &(&p.expect(&omega(&q, spec))? * gamma);
        let diff = (&next - &q).sup_norm();
        if let Some(pd) = prev_diff {
            let scale = T::one() + next.sup_norm();
            if pd > noise_floor * scale && diff > noise_floor * scale {
                max_ratio = max_ratio.max((diff / pd).as_f64());
            }
        }
        prev_diff = Some(diff);
        q = next;
        // residual of the new iterate is at most gamma * diff
        if gamma * diff <= tol {
            return Ok(SoftSolution {
                q,
                iters: it,
                max_contraction_ratio: max_ratio,
            });
        }
    }
    let residual = soft_bellman_residual(&q, r, p, spec)?.sup_norm();
    Err(Error::NoConvergence {
        what: "soft value iteration",
        iters: cap,
        residual: residual.as_f64(),
    })
}

/// `r + gamma P Omega(q) - q`.
pub fn soft_bellman_residual<T: Real>(
    q: &SAFn<T>,
    r: &SAFn<T>,
    p: &Kernel<T>,
    spec: &SoftSpec<T>,
) -> Result<SAFn<T>> {
    let pv = p.expect(&omega(q, spec))?;
    Ok(&(r + &(&pv * spec.gamma)) - q)
}

/// `V(s) = sum_a pi(a|s) q(s,a)`.
pub fn state_value<T: Real>(q: &SAFn<T>, pi: &Policy<T>) -> Result<SFn<T>> {
    policy_average(pi, q)
}

/// One-step regularized reward `r(s,a) - tau log(pi(a|s)/pi_ref(a|s))`.
/// Entries where `pi` is zero are set to zero; callers must check support.
fn regularized_reward<T: Real>(pi: &Policy<T>, r: &SAFn<T>, spec: &SoftSpec<T>) -> SAFn<T> {
    SAFn::from_fn(r.n_states(), r.n_actions(), |s, a| {
        let p = pi.get(s, a);
        if p > T::zero() {
            r.get(s, a) - spec.tau * (p / spec.pi_ref.get(s, a)).ln()
        } else {
            T::zero()
        }
    })
}

/// Regularized action value of `pi`:
/// `q^pi = r - tau log(pi/pi_ref) + gamma P V^pi`, `V^pi = Pi_pi q^pi`.
pub fn regularized_q<T: Real>(
    pi: &Policy<T>,
    r: &SAFn<T>,
    p: &Kernel<T>,
    spec: &SoftSpec<T>,
) -> Result<SAFn<T>> {
    let c = regularized_reward(pi, r, spec);
    resolvent_apply(p, pi, spec.gamma, &c, T::lit(T::SOLVE_TOL))
}

/// `J(pi) = (1-gamma)^{-1} E_d[r - tau log(pi/pi_ref)]`, with `d` the discounted
/// occupancy of `pi` started from the state marginal of `rho`.
pub fn regularized_return<T: Real>(
    pi: &Policy<T>,
    r: &SAFn<T>,
    p: &Kernel<T>,
    spec: &SoftSpec<T>,
    rho: &SADist<T>,
) -> Result<T> {
    spec.validate()?;
    let d = discounted_occupancy_from_states(p, pi, &rho.state_marginal(), spec.gamma)?;
    for s in 0..pi.n_states() {
        for a in 0..pi.n_actions() {
            if pi.get(s, a) == T::zero() && d.get(s, a) > T::zero() {
                return Err(Error::UndefinedPenalty {
                    state: s,
                    action: a,
                });
            }
        }
    }
    let c = regularized_reward(pi, r, spec);
    let total: T = d
        .weights()
        .iter()
        .zip(c.values())
        .map(|(&w, &v)| w * v)
        .sum();
    Ok(total / (T::one() - spec.gamma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(ns: usize, na: usize, gamma: f64, tau: f64) -> SoftSpec<f64> {
        SoftSpec::uniform(ns, na, gamma, tau).unwrap()
    }

    #[test]
    fn omega_examples() {
        let sp = spec(2, 2, 0.9, 1.0);
        let zero = SAFn::zeros(2, 2);
        assert!(omega(&zero, &sp).sup_norm() < 1e-15);
        let q = SAFn::from_vec(2, 2, vec![0.0, 3f64.ln(), 1.0, -2.0]).unwrap();
        let w = omega(&q, &sp);
        assert!((w.get(0) - 2f64.ln()).abs() < 1e-14);
        let shifted = omega(&q.map(|v| v + 7.5), &sp);
        for s in 0..2 {
            assert!((shifted.get(s) - w.get(s) - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_handles_huge_logits() {
        let sp = spec(1, 2, 0.9, 1e-3);
        let q = SAFn::from_vec(1, 2, vec![1e3, 0.0]).unwrap();
        let w = omega(&q, &sp);
        assert!(w.get(0).is_finite());
        assert!((w.get(0) - (1e3 - 1e-3 * 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let sp = spec(2, 2, 0.9, 1.0);
        let pi = softmax_policy(&SAFn::zeros(2, 2), &sp);
        assert_eq!(pi, sp.pi_ref);
        let q = SAFn::from_vec(2, 2, vec![0.0, 3f64.ln(), 50.0, 0.0]).unwrap();
        let pi = softmax_policy(&q, &sp);
        assert!((pi.get(0, 0) - 0.25).abs() < 1e-14);
        assert!((pi.get(0, 1) - 0.75).abs() < 1e-14);
        assert!(pi.get(1, 0) >= 1.0 - 1e-12);
    }

    #[test]
    fn soft_vi_trivial_cases() {
        let p = Kernel::new(1, 1, vec![1.0]).unwrap();
        let sp = spec(1, 1, 0.9, 0.5);
        let sol = soft_value_iteration(&SAFn::constant(1, 1, 2.0), &p, &sp, 1e-10).unwrap();
        assert!((sol.q.get(0, 0) - 20.0).abs() < 1e-8);

        let p = Kernel::<f64>::deterministic(3, 2, |s, a| (s + a) % 3).unwrap();
        let r = SAFn::from_fn(3, 2, |s, a| (s as f64) - (a as f64));
        let sol = soft_value_iteration(&r, &p, &spec(3, 2, 0.0, 1.0), 1e-10).unwrap();
        assert_eq!(sol.iters, 1);
        assert_eq!(sol.q, r);
    }

    #[test]
    fn zero_temperature_rejected() {
        assert!(SoftSpec::<f64>::uniform(2, 2, 0.9, 0.0).is_err());
        assert!(SoftSpec::<f64>::uniform(2, 2, 1.0, 0.1).is_err());
    }

    #[test]
    fn return_examples() {
        let p = Kernel::<f64>::deterministic(3, 2, |s, a| (s + a + 1) % 3).unwrap();
        let sp = spec(3, 2, 0.8, 0.7);
        let rho = SADist::uniform(3, 2);
        let j = regularized_return(&sp.pi_ref, &SAFn::zeros(3, 2), &p, &sp, &rho).unwrap();
        assert!(j.abs() < 1e-12);

        let one = Kernel::new(1, 1, vec![1.0]).unwrap();
        let sp1 = spec(1, 1, 0.75, 0.3);
        let j = regularized_return(
            &sp1.pi_ref,
            &SAFn::constant(1, 1, 3.0),
            &one,
            &sp1,
            &SADist::uniform(1, 1),
        )
        .unwrap();
        assert!((j - 12.0).abs() < 1e-10);
    }

    #[test]
    fn zero_prob_actions_carry_no_penalty() {
        let p = Kernel::<f64>::deterministic(2, 2, |s, _| s).unwrap();
        let sp = SoftSpec::uniform(2, 2, 0.9, 0.5).unwrap();
        let pi = Policy::new(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let r = SAFn::zeros(2, 2);
        // action 1 in state 0 never taken under pi: fine
        assert!(regularized_return(&pi, &r, &p, &sp, &SADist::uniform(2, 2)).is_ok());
    }
}
