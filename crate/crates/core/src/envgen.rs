//! Structured random environment pairs: sparse source kernels with outcome
//! labels, support-preserving target perturbations calibrated to a total
//! variation level, and soft-optimal expert behavior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{tv_shift_stats, Kernel, Policy, SAFn, SFn};
use crate::scalar::Real;
use crate::soft::{soft_value_iteration, softmax_policy, SoftSpec};
use crate::transfer::{oracle_transfer, AnchorSpec, SourceEnv, TargetEnv, TransferProblem};

/// Synthetic physiological label of a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLabel {
    /// Number of abnormal variables, `0..=4`.
    pub abnormal: u8,
    pub discharge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n_states: usize,
    pub n_actions: usize,
    /// Next states per `(s, a)`.
    pub support_degree: usize,
    /// Strength of the action-dependent tilt toward better outcomes.
    pub treatment_tilt: f64,
    pub seed: u64,
    /// Start states for reachability and rollouts; empty means all states.
    pub start_states: Vec<usize>,
    /// Regeneration attempts when some state is unreachable.
    pub max_attempts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_states: 128,
            n_actions: 8,
            support_degree: 4,
            treatment_tilt: 1.0,
            seed: 0,
            start_states: Vec::new(),
            max_attempts: 100,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::Config("environment needs states and actions".into()));
        }
        if self.support_degree == 0 || self.support_degree > self.n_states {
            return Err(Error::Config(format!(
                "support_degree {} outside 1..={}",
                self.support_degree, self.n_states
            )));
        }
        if !(self.treatment_tilt >= 0.0 && self.treatment_tilt.is_finite()) {
            return Err(Error::Config(
                "treatment_tilt must be finite and nonnegative".into(),
            ));
        }
        if self.start_states.iter().any(|&s| s >= self.n_states) {
            return Err(Error::Config("start state out of range".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// `+1` for discharge, `-1` for two or more abnormal variables, `0` otherwise.
pub fn outcome_value(label: &StateLabel) -> f64 {
    if label.discharge {
        1.0
    } else if label.abnormal >= 2 {
        -1.0
    } else {
        0.0
    }
}

/// Next-state outcome reward.
pub fn outcome_reward<T: Real>(labels: &[StateLabel]) -> SFn<T> {
    SFn::from_vec(labels.iter().map(|l| T::lit(outcome_value(l))).collect())
}

fn assign_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<StateLabel> {
    const ABNORMAL_WEIGHTS: [f64; 5] = [0.3, 0.3, 0.2, 0.12, 0.08];
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut abnormal = 4u8;
            for (k, w) in ABNORMAL_WEIGHTS.iter().enumerate() {
                acc += w;
                if u < acc {
                    abnormal = k as u8;
                    break;
                }
            }
            let discharge = abnormal == 0 && rng.random::<f64>() < 0.5;
            StateLabel {
                abnormal,
                discharge,
            }
        })
        .collect()
}

fn reachable_from(probs: &[f64], ns: usize, na: usize, starts: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; ns];
    let mut stack: Vec<usize> = Vec::new();
    for &s in starts {
        if !seen[s] {
            seen[s] = true;
            stack.push(s);
        }
    }
    while let Some(s) = stack.pop() {
        for a in 0..na {
            let row = &probs[(s * na + a) * ns..(s * na + a + 1) * ns];
            for (next, &p) in row.iter().enumerate() {
                if p > 0.0 && !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
    }
    seen
}

/// Random sparse kernel and state labels, deterministic in `cfg.seed`.
///
/// Each `(s, a)` row puts Dirichlet(1) weights on `support_degree` distinct
/// next states, tilted by `exp(tilt * e_sa * outcome(s'))` where `e_sa` is a
/// per-pair standard normal effect. Every state must be reachable from the
/// start set; otherwise the draw is repeated up to `max_attempts` times.
pub fn generate_mdp<T: Real>(cfg: &EnvConfig) -> Result<(Kernel<T>, Vec<StateLabel>)> {
    cfg.validate()?;
    let (ns, na, k) = (cfg.n_states, cfg.n_actions, cfg.support_degree);
    let starts: Vec<usize> = if cfg.start_states.is_empty() {
        (0..ns).collect()
    } else {
        cfg.start_states.clone()
    };
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(attempt as u64);
        let labels = assign_labels(&mut rng, ns);
        let outcomes: Vec<f64> = labels.iter().map(outcome_value).collect();
        let mut probs = vec![0.0f64; ns * na * ns];
        let mut pool: Vec<usize> = (0..ns).collect();
        for s in 0..ns {
            for a in 0..na {
                let effect: f64 = StandardNormal.sample(&mut rng);
                // partial Fisher-Yates for k distinct successors
                for i in 0..k {
                    let j = rng.random_range(i..ns);
                    pool.swap(i, j);
                }
                let row = &mut probs[(s * na + a) * ns..(s * na + a + 1) * ns];
                for &next in &pool[..k] {
                    let w: f64 = Exp1.sample(&mut rng);
                    row[next] = w.max(1e-12) * (cfg.treatment_tilt * effect * outcomes[next]).exp();
                }
            }
        }
        if reachable_from(&probs, ns, na, &starts).iter().all(|&r| r) {
            let kernel = Kernel::normalized(ns, na, probs.into_iter().map(T::lit).collect())?;
            return Ok((kernel, labels));
        }
    }
    Err(Error::Generation(format!(
        "no draw with every state reachable after {} attempts",
        cfg.max_attempts
    )))
}

/// Multiply every supported entry by `exp(magnitude * xi)`, `xi ~ N(0,1)`, and
/// renormalize. Zero entries stay zero.
pub fn perturb_kernel<T: Real>(p1: &Kernel<T>, magnitude: f64, seed: u64) -> Result<Kernel<T>> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "shift magnitude {magnitude}"
        )));
    }
    if magnitude == 0.0 {
        return Ok(p1.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs: Vec<T> = p1
        .probs()
        .iter()
        .map(|&p| {
            let xi: f64 = StandardNormal.sample(&mut rng);
            if p > T::zero() {
                p * T::lit((magnitude * xi).exp())
            } else {
                T::zero()
            }
        })
        .collect();
    Kernel::normalized(p1.n_states(), p1.n_actions(), probs)
}

/// Outcome of [`calibrate_shift`].
#[derive(Debug, Clone)]
pub struct CalibratedShift<T> {
    pub p2: Kernel<T>,
    pub magnitude: f64,
    pub tv_avg: f64,
    pub tv_max: f64,
}

/// Bisection on the perturbation magnitude in `[0, 1)` so the average row
/// total variation matches `target_avg`.
pub fn calibrate_shift<T: Real>(
    p1: &Kernel<T>,
    target_avg: f64,
    seed: u64,
) -> Result<CalibratedShift<T>> {
    if !(target_avg >= 0.0) {
        return Err(Error::InvalidParameter(format!("target TV {target_avg}")));
    }
    let eval = |m: f64| -> Result<(Kernel<T>, f64, f64)> {
        let p2 = perturb_kernel(p1, m, seed)?;
        let (avg, max) = tv_shift_stats(p1, &p2)?;
        Ok((p2, avg.as_f64(), max.as_f64()))
    };
    if target_avg == 0.0 {
        return Ok(CalibratedShift {
            p2: p1.clone(),
            magnitude: 0.0,
            tv_avg: 0.0,
            tv_max: 0.0,
        });
    }
    let (mut lo, mut hi) = (0.0f64, 0.999f64);
    let (_, top, _) = eval(hi)?;
    if top < target_avg {
        return Err(Error::Generation(format!(
            "average TV {top:.4} at the largest magnitude is below the target {target_avg}"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (_, avg, _) = eval(mid)?;
        if avg < target_avg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let magnitude = 0.5 * (lo + hi);
    let (p2, tv_avg, tv_max) = eval(magnitude)?;
    Ok(CalibratedShift {
        p2,
        magnitude,
        tv_avg,
        tv_max,
    })
}

/// `R1(s,a) = sum_s' P1(s'|s,a) R(s')`.
pub fn expected_reward<T: Real>(p1: &Kernel<T>, reward: &SFn<T>) -> Result<SAFn<T>> {
    p1.expect(reward)
}

/// Soft-optimal policy for the expected outcome reward under a uniform
/// reference.
pub fn build_expert_policy<T: Real>(
    p1: &Kernel<T>,
    reward: &SFn<T>,
    gamma_b: T,
    tau_b: T,
    tol: T,
) -> Result<Policy<T>> {
    let (ns, na) = p1.shape();
    let spec = SoftSpec::uniform(ns, na, gamma_b, tau_b)?;
    let rbar = expected_reward(p1, reward)?;
    let q = soft_value_iteration(&rbar, p1, &spec, tol)?.q;
    Ok(softmax_policy(&q, &spec))
}

/// Average over states of the largest action probability.
pub fn mean_top_action_probability<T: Real>(pi: &Policy<T>) -> f64 {
    let ns = pi.n_states();
    (0..ns)
        .map(|s| pi.row(s).iter().fold(0.0f64, |m, p| m.max(p.as_f64())))
        .sum::<f64>()
        / ns as f64
}

/// Expert temperature whose policy has the requested mean top-action
/// probability (bisection in `log tau`). Returns the temperature and policy.
pub fn calibrate_expert_temperature<T: Real>(
    p1: &Kernel<T>,
    reward: &SFn<T>,
    gamma_b: T,
    target_top: f64,
    tol: T,
) -> Result<(T, Policy<T>)> {
    check_top_target(target_top, p1.n_actions())?;
    let log_tau = bisect_log_temperature(
        |lt| {
            Ok(mean_top_action_probability(&build_expert_policy(
                p1,
                reward,
                gamma_b,
                T::lit(lt.exp()),
                tol,
            )?))
        },
        target_top,
        (1e-4, 1e3),
    )?;
    let tau = T::lit(log_tau.exp());
    let pi = build_expert_policy(p1, reward, gamma_b, tau, tol)?;
    Ok((tau, pi))
}

fn check_top_target(target_top: f64, na: usize) -> Result<()> {
    let na = na as f64;
    if !(target_top > 1.0 / na && target_top < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target top-action probability {target_top} outside (1/{na}, 1)"
        )));
    }
    Ok(())
}

// Top-action probability decreases in the temperature.
fn bisect_log_temperature(
    mut top: impl FnMut(f64) -> Result<f64>,
    target_top: f64,
    range: (f64, f64),
) -> Result<f64> {
    let (mut lo, mut hi) = (range.0.ln(), range.1.ln());
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if top(mid)? > target_top {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Named target shift levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ShiftSetting {
    /// Average row TV 0.015.
    Mild,
    /// Average row TV 0.088.
    Large,
    /// Calibrate to this average row TV.
    TargetTv(f64),
    /// Use this perturbation magnitude directly.
    Magnitude(f64),
}

impl ShiftSetting {
    pub const MILD_TV: f64 = 0.015;
    pub const LARGE_TV: f64 = 0.088;

    pub fn target_tv(&self) -> Option<f64> {
        match *self {
            ShiftSetting::Mild => Some(Self::MILD_TV),
            ShiftSetting::Large => Some(Self::LARGE_TV),
            ShiftSetting::TargetTv(t) => Some(t),
            ShiftSetting::Magnitude(_) => None,
        }
    }
}

/// Policy whose mean top-action probability the expert temperature is
/// calibrated against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CalibrationTarget {
    /// The expert policy itself.
    Expert,
    /// The oracle target policy of the transfer problem with these settings.
    TargetOracle {
        gamma1: f64,
        gamma2: f64,
        tau2: f64,
        anchor_action: usize,
    },
}

impl Default for CalibrationTarget {
    fn default() -> Self {
        CalibrationTarget::TargetOracle {
            gamma1: 0.95,
            gamma2: 0.975,
            tau2: 0.05,
            anchor_action: 0,
        }
    }
}

/// Expert construction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub gamma_b: f64,
    /// Fixed temperature; when absent it is calibrated to `target_top_prob`.
    pub tau_b: Option<f64>,
    pub target_top_prob: f64,
    pub calibrate_on: CalibrationTarget,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            gamma_b: 0.95,
            tau_b: None,
            target_top_prob: 0.844,
            calibrate_on: CalibrationTarget::default(),
        }
    }
}

/// A generated (or imported) source/target pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Environment<T> {
    pub p1: Kernel<T>,
    pub p2: Kernel<T>,
    pub labels: Vec<StateLabel>,
    pub expert: Policy<T>,
    pub tau_b: f64,
    pub shift_magnitude: f64,
    pub tv_avg: f64,
    pub tv_max: f64,
    pub start_states: Vec<usize>,
}

impl<T: Real> Environment<T> {
    pub fn build(
        cfg: &EnvConfig,
        shift: ShiftSetting,
        expert: &ExpertConfig,
        tol: T,
    ) -> Result<Self> {
        let (p1, labels) = generate_mdp::<T>(cfg)?;
        let shift_seed = cfg.seed ^ 0x5eed_5eed_0000_0001;
        let calibrated = match shift {
            ShiftSetting::Magnitude(m) => {
                let p2 = perturb_kernel(&p1, m, shift_seed)?;
                let (avg, max) = tv_shift_stats(&p1, &p2)?;
                CalibratedShift {
                    p2,
                    magnitude: m,
                    tv_avg: avg.as_f64(),
                    tv_max: max.as_f64(),
                }
            }
            other => calibrate_shift(&p1, other.target_tv().unwrap_or(0.0), shift_seed)?,
        };
        let reward = outcome_reward::<T>(&labels);
        let gamma_b = T::lit(expert.gamma_b);
        let mut env = Self {
            expert: Policy::uniform(p1.n_states(), p1.n_actions()),
            p1,
            p2: calibrated.p2,
            labels,
            tau_b: 1.0,
            shift_magnitude: calibrated.magnitude,
            tv_avg: calibrated.tv_avg,
            tv_max: calibrated.tv_max,
            start_states: cfg.start_states.clone(),
        };
        let (tau_b, pi) = match (expert.tau_b, expert.calibrate_on) {
            (Some(t), _) => (
                T::lit(t),
                build_expert_policy(&env.p1, &reward, gamma_b, T::lit(t), tol)?,
            ),
            (None, CalibrationTarget::Expert) => calibrate_expert_temperature(
                &env.p1,
                &reward,
                gamma_b,
                expert.target_top_prob,
                tol,
            )?,
            (
                None,
                CalibrationTarget::TargetOracle {
                    gamma1,
                    gamma2,
                    tau2,
                    anchor_action,
                },
            ) => {
                check_top_target(expert.target_top_prob, env.p1.n_actions())?;
                let target_top = |env: &mut Self, log_tau: f64| -> Result<f64> {
                    env.expert =
                        build_expert_policy(&env.p1, &reward, gamma_b, T::lit(log_tau.exp()), tol)?;
                    let problem = env.transfer_problem(
                        T::lit(gamma1),
                        T::lit(gamma2),
                        T::lit(tau2),
                        anchor_action,
                    )?;
                    Ok(mean_top_action_probability(
                        &oracle_transfer(&problem, tol)?.pi2,
                    ))
                };
                let log_tau = bisect_log_temperature(
                    |lt| target_top(&mut env, lt),
                    expert.target_top_prob,
                    (1e-2, 1e2),
                )?;
                let tau = T::lit(log_tau.exp());
                (
                    tau,
                    build_expert_policy(&env.p1, &reward, gamma_b, tau, tol)?,
                )
            }
        };
        env.expert = pi;
        env.tau_b = tau_b.as_f64();
        Ok(env)
    }

    pub fn reward(&self) -> SFn<T> {
        outcome_reward(&self.labels)
    }

    pub fn expected_reward(&self) -> Result<SAFn<T>> {
        expected_reward(&self.p1, &self.reward())
    }

    /// Transfer problem with the expert as source behavior, uniform
    /// references, and the anchor `g(s) = R1(s, anchor_action)`.
    pub fn transfer_problem(
        &self,
        gamma1: T,
        gamma2: T,
        tau2: T,
        anchor_action: usize,
    ) -> Result<TransferProblem<T>> {
        let (ns, na) = self.p1.shape();
        if anchor_action >= na {
            return Err(Error::InvalidParameter(format!(
                "anchor action {anchor_action} out of range"
            )));
        }
        let rbar = self.expected_reward()?;
        let g = SFn::from_vec((0..ns).map(|s| rbar.get(s, anchor_action)).collect());
        TransferProblem::new(
            SourceEnv {
                p1: self.p1.clone(),
                gamma1,
                pi_b1: self.expert.clone(),
                pi_ref1: Policy::uniform(ns, na),
            },
            TargetEnv {
                p2: self.p2.clone(),
                spec2: SoftSpec::uniform(ns, na, gamma2, tau2)?,
            },
            AnchorSpec::anchor_action(anchor_action, g, na)?,
            None,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and validates an exported environment.
    pub fn from_json(s: &str) -> Result<Self> {
        let env: Self = serde_json::from_str(s)?;
        let p1 = Kernel::new(
            env.p1.n_states(),
            env.p1.n_actions(),
            env.p1.probs().to_vec(),
        )?;
        let p2 = Kernel::new(
            env.p2.n_states(),
            env.p2.n_actions(),
            env.p2.probs().to_vec(),
        )?;
        let expert = Policy::new(
            env.expert.n_states(),
            env.expert.n_actions(),
            env.expert.probs().to_vec(),
        )?;
        if p1.shape() != p2.shape()
            || p1.shape() != expert.shape()
            || env.labels.len() != p1.n_states()
        {
            return Err(Error::Shape("environment tables disagree".into()));
        }
        if env.start_states.iter().any(|&s| s >= p1.n_states()) {
            return Err(Error::Shape("start state out of range".into()));
        }
        Ok(Self {
            p1,
            p2,
            expert,
            ..env
        })
    }
}

/// Small dense random transfer problem: Dirichlet kernels with full support,
/// a softmax-of-noise behavior policy, uniform references, anchor action 0 and
/// a random anchor function. The shift is left unset.
pub fn random_transfer_problem<T: Real>(
    n_states: usize,
    n_actions: usize,
    gamma1: f64,
    gamma2: f64,
    tau2: f64,
    seed: u64,
) -> Result<TransferProblem<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = |rng: &mut ChaCha8Rng| -> Result<Kernel<T>> {
        let w: Vec<T> = (0..n_states * n_actions * n_states)
            .map(|_| {
                let e: f64 = Exp1.sample(rng);
                T::lit(e + 1e-3)
            })
            .collect();
        Kernel::normalized(n_states, n_actions, w)
    };
    let p1 = kernel(&mut rng)?;
    let p2 = kernel(&mut rng)?;
    let logits: Vec<T> = (0..n_states * n_actions)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z.exp())
        })
        .collect();
    let pi_b1 = Policy::normalized(n_states, n_actions, logits)?;
    let g = SFn::from_vec(
        (0..n_states)
            .map(|_| T::lit(rng.random_range(-1.0..1.0)))
            .collect(),
    );
    TransferProblem::new(
        SourceEnv {
            p1,
            gamma1: T::lit(gamma1),
            pi_b1,
            pi_ref1: Policy::uniform(n_states, n_actions),
        },
        TargetEnv {
            p2,
            spec2: SoftSpec::uniform(n_states, n_actions, T::lit(gamma2), T::lit(tau2))?,
        },
        AnchorSpec::anchor_action(0, g, n_actions)?,
        None,
    )
}
