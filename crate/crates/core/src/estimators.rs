//! Empirical saddle objectives and the Modular, Coupled and Coupled-Offset
//! transfer estimators.
//!
//! Source block per transition `(s, a, s')`:
//! `(beta/2) q1(s,a)^2 + l1(s,a) (u(s,a) + g1 (mu q1)(s') - q1(s,a))`.
//! Target block:
//! `(1/2) q2(s,a)^2 + l2(s,a) ((I - Pi_mu) q1 (s,a) + g(s) + C + g2 Omega(q2)(s') - q2(s,a))`.
//! The empirical Lagrangian is the weighted average of these over a
//! [`WeightedTransitions`] support. Optimization is full batch with Adam:
//! each round takes `dual_steps` ascent steps on the multipliers, then
//! `primal_steps` descent steps on the value tables. Entries whose `(s, a)`
//! is not visited in the table's own dataset receive no gradient.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{estimate_behavior_policy_weighted, WeightedTransition, WeightedTransitions};
use crate::error::{Error, Result};
use crate::mdp::{resolvent_apply, Policy, SAFn};
use crate::scalar::Real;
use crate::soft::{log_sum_exp_row, soft_value_iteration, softmax_policy, softmax_row, SoftSpec};
use crate::transfer::{recover_reward, source_signal, TransferProblem};

/// Optimizer settings. Defaults are the full-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_q: f64,
    pub lr_l: f64,
    pub dual_steps: usize,
    pub primal_steps: usize,
    pub beta: f64,
    pub init_noise_sd: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub source_rounds: usize,
    pub target_rounds: usize,
    pub joint_rounds: usize,
    /// Joint rounds of the Coupled-Offset correction stage.
    pub offset_rounds: usize,
    pub checkpoint_interval: usize,
    /// Coupled-Offset starts its multipliers from the Modular ones instead of
    /// fresh noise.
    pub warm_start_duals: bool,
    /// Learning rates decay geometrically within each stage down to this
    /// fraction of their initial value; `1.0` keeps them constant.
    pub lr_final_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_q: 1e-3,
            lr_l: 1e-4,
            dual_steps: 10,
            primal_steps: 1,
            beta: 100.0,
            init_noise_sd: 1.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            source_rounds: 40_000,
            target_rounds: 70_000,
            joint_rounds: 40_000,
            offset_rounds: 40_000,
            checkpoint_interval: 1_000,
            warm_start_duals: false,
            lr_final_ratio: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_q >= 0.0 && self.lr_l >= 0.0 && self.lr_q.is_finite() && self.lr_l.is_finite())
        {
            return bad("learning rates must be finite and nonnegative");
        }
        if self.primal_steps == 0 || self.dual_steps < self.primal_steps {
            return bad("need primal_steps >= 1 and dual_steps >= primal_steps");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative");
        }
        if !(self.init_noise_sd >= 0.0 && self.init_noise_sd.is_finite()) {
            return bad("init_noise_sd must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam moments must lie in [0,1) and eps must be positive");
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad("lr_final_ratio must lie in (0, 1]");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be positive");
        }
        Ok(())
    }
}

/// Trainable tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SaddleVars<T> {
    pub q1: SAFn<T>,
    pub l1: SAFn<T>,
    pub q2: SAFn<T>,
    pub l2: SAFn<T>,
}

/// Per-table ChaCha streams shared by every method for the same seed.
const STREAM_Q1: u64 = 0;
const STREAM_L1: u64 = 1;
const STREAM_Q2: u64 = 2;
const STREAM_L2: u64 = 3;

fn noise_table<T: Real>(ns: usize, na: usize, sd: f64, seed: u64, stream: u64) -> SAFn<T> {
    if sd == 0.0 {
        return SAFn::zeros(ns, na);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let mut v = Vec::with_capacity(ns * na);
    for _ in 0..ns * na {
        v.push(T::lit(normal.sample(&mut rng)));
    }
    SAFn::from_vec(ns, na, v).expect("finite noise")
}

impl<T: Real> SaddleVars<T> {
    pub fn zeros(ns: usize, na: usize) -> Self {
        Self {
            q1: SAFn::zeros(ns, na),
            l1: SAFn::zeros(ns, na),
            q2: SAFn::zeros(ns, na),
            l2: SAFn::zeros(ns, na),
        }
    }

    /// Independent `N(0, sd^2)` tables, one stream per table.
    pub fn noise(ns: usize, na: usize, sd: f64, seed: u64) -> Self {
        Self {
            q1: noise_table(ns, na, sd, seed, STREAM_Q1),
            l1: noise_table(ns, na, sd, seed, STREAM_L1),
            q2: noise_table(ns, na, sd, seed, STREAM_Q2),
            l2: noise_table(ns, na, sd, seed, STREAM_L2),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q1.is_finite() && self.l1.is_finite() && self.q2.is_finite() && self.l2.is_finite()
    }
}

/// `(beta/2) q1(s,a)^2 + l1(s,a) (u(s,a) + g1 (mu q1)(s') - q1(s,a))`.
pub fn sample_source_objective<T: Real>(
    vars: &SaddleVars<T>,
    sample: (usize, usize, usize),
    u_g: &SAFn<T>,
    mu: &Policy<T>,
    gamma1: T,
    beta: T,
) -> T {
    let (s, a, next) = sample;
    let q = vars.q1.get(s, a);
    let mu_next = crate::mdp::dot(mu.row(next), vars.q1.row(next));
    let resid = u_g.get(s, a) + gamma1 * mu_next - q;
    beta * q * q / T::lit(2.0) + vars.l1.get(s, a) * resid
}

/// `(1/2) q2(s,a)^2 + l2(s,a) ((I - Pi_mu) q1 (s,a) + g(s) + C + g2 Omega(q2)(s') - q2(s,a))`.
pub fn sample_target_objective<T: Real>(
    vars: &SaddleVars<T>,
    sample: (usize, usize, usize),
    mu: &Policy<T>,
    g: &crate::mdp::SFn<T>,
    c: T,
    spec2: &SoftSpec<T>,
) -> T {
    let (s, a, next) = sample;
    let q = vars.q2.get(s, a);
    let contrast = vars.q1.get(s, a) - crate::mdp::dot(mu.row(s), vars.q1.row(s));
    let omega = log_sum_exp_row(vars.q2.row(next), spec2.pi_ref.row(next), spec2.tau);
    let resid = contrast + g.get(s) + c + spec2.gamma * omega - q;
    q * q / T::lit(2.0) + vars.l2.get(s, a) * resid
}

/// Which blocks are trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SaddleMode {
    /// `(q1, l1)` on the source block with the given quadratic weight.
    Source { beta: f64 },
    /// `(q2, l2)` on the target block with `q1` frozen.
    Target,
    /// All four tables on source plus target blocks.
    Joint { beta: f64 },
}

/// Inputs shared by all estimators.
#[derive(Debug, Clone)]
pub struct TransferData<'a, T> {
    pub problem: &'a TransferProblem<T>,
    pub source: &'a WeightedTransitions<T>,
    pub target: &'a WeightedTransitions<T>,
    /// Source signal used by the estimators (from the estimated or known behavior).
    pub u_hat: SAFn<T>,
}

/// How the estimators obtain the source behavior policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorInput {
    /// Clipped action frequencies of the source data.
    Estimated { eps_clip: f64 },
    /// The true behavior policy of the problem.
    Known,
}

impl<'a, T: Real> TransferData<'a, T> {
    pub fn new(
        problem: &'a TransferProblem<T>,
        source: &'a WeightedTransitions<T>,
        target: &'a WeightedTransitions<T>,
        behavior: BehaviorInput,
    ) -> Result<Self> {
        if source.shape() != problem.shape() || target.shape() != problem.shape() {
            return Err(Error::Shape("datasets and problem differ in shape".into()));
        }
        if source.n_visited() == 0 || target.n_visited() == 0 {
            return Err(Error::Config(
                "a dataset has no visited state-action pairs".into(),
            ));
        }
        let pi_b = match behavior {
            BehaviorInput::Estimated { eps_clip } => {
                estimate_behavior_policy_weighted(source, T::lit(eps_clip))?
            }
            BehaviorInput::Known => problem.source.pi_b1.clone(),
        };
        let u_hat = source_signal(&pi_b, &problem.source.pi_ref1, &problem.anchor.g)?;
        Ok(Self {
            problem,
            source,
            target,
            u_hat,
        })
    }

    /// Empirical Lagrangian: weighted average of the sample objectives.
    pub fn lagrangian(&self, vars: &SaddleVars<T>, mode: SaddleMode) -> Result<T> {
        let pr = self.problem;
        let c = pr.shift()?;
        let mut total = T::zero();
        let source_beta = match mode {
            SaddleMode::Source { beta } | SaddleMode::Joint { beta } => Some(T::lit(beta)),
            SaddleMode::Target => None,
        };
        if let Some(beta) = source_beta {
            for e in &self.source.entries {
                total = total
                    + e.w
                        * sample_source_objective(
                            vars,
                            (e.s, e.a, e.next),
                            &self.u_hat,
                            &pr.anchor.mu,
                            pr.source.gamma1,
                            beta,
                        );
            }
        }
        if !matches!(mode, SaddleMode::Source { .. }) {
            for e in &self.target.entries {
                total = total
                    + e.w
                        * sample_target_objective(
                            vars,
                            (e.s, e.a, e.next),
                            &pr.anchor.mu,
                            &pr.anchor.g,
                            c,
                            &pr.target.spec2,
                        );
            }
        }
        Ok(total)
    }

    /// `rho_hat`-weighted residual of each block, as SA tables
    /// `sum_s' w(s,a,s') b(s,a,s')`.
    fn weighted_residuals(&self, vars: &SaddleVars<T>, c: T) -> (Vec<T>, Vec<T>) {
        let pr = self.problem;
        let (ns, na) = pr.shape();
        let mu = &pr.anchor.mu;
        let g1 = pr.source.gamma1;
        let mu_q1: Vec<T> = (0..ns)
            .map(|s| crate::mdp::dot(mu.row(s), vars.q1.row(s)))
            .collect();
        let mut r1 = vec![T::zero(); ns * na];
        for e in &self.source.entries {
            let i = e.s * na + e.a;
            r1[i] =
                r1[i] + e.w * (self.u_hat.values()[i] + g1 * mu_q1[e.next] - vars.q1.values()[i]);
        }
        let spec2 = &pr.target.spec2;
        let omega: Vec<T> = (0..ns)
            .map(|s| log_sum_exp_row(vars.q2.row(s), spec2.pi_ref.row(s), spec2.tau))
            .collect();
        let mut r2 = vec![T::zero(); ns * na];
        for e in &self.target.entries {
            let i = e.s * na + e.a;
            let rew = vars.q1.values()[i] - mu_q1[e.s] + pr.anchor.g.get(e.s) + c;
            r2[i] = r2[i] + e.w * (rew + spec2.gamma * omega[e.next] - vars.q2.values()[i]);
        }
        (r1, r2)
    }

    /// Weighted L2 norms `||b^1||_{rho^1}` and `||b^2||_{rho^2}` of the empirical
    /// residuals on visited pairs.
    pub fn residual_norms(&self, vars: &SaddleVars<T>) -> Result<(f64, f64)> {
        let c = self.problem.shift()?;
        let (r1, r2) = self.weighted_residuals(vars, c);
        let norm = |r: &[T], rho: &[T]| -> f64 {
            r.iter()
                .zip(rho)
                .filter(|(_, &w)| w > T::zero())
                .map(|(&x, &w)| {
                    let b = x.as_f64() / w.as_f64();
                    w.as_f64() * b * b
                })
                .sum::<f64>()
                .sqrt()
        };
        Ok((
            norm(&r1, self.source.rho.weights()),
            norm(&r2, self.target.rho.weights()),
        ))
    }
}

/// Gradients of the empirical Lagrangian.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub q1: Vec<T>,
    pub l1: Vec<T>,
    pub q2: Vec<T>,
    pub l2: Vec<T>,
}

fn incoming<T: Real>(entries: &[WeightedTransition<T>], l: &SAFn<T>, ns: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); ns];
    for e in entries {
        acc[e.next] = acc[e.next] + e.w * l.get(e.s, e.a);
    }
    acc
}

impl<T: Real> TransferData<'_, T> {
    /// Multiplier gradients; they depend on the value tables only.
    pub fn dual_gradient(
        &self,
        vars: &SaddleVars<T>,
        mode: SaddleMode,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let c = self.problem.shift()?;
        let (r1, r2) = self.weighted_residuals(vars, c);
        let n = r1.len();
        let zeros = || vec![T::zero(); n];
        Ok(match mode {
            SaddleMode::Source { .. } => (r1, zeros()),
            SaddleMode::Target => (zeros(), r2),
            SaddleMode::Joint { .. } => (r1, r2),
        })
    }

    /// Value-table gradients.
    pub fn primal_gradient(
        &self,
        vars: &SaddleVars<T>,
        mode: SaddleMode,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let pr = self.problem;
        let (ns, na) = pr.shape();
        let mu = &pr.anchor.mu;
        let mut gq1 = vec![T::zero(); ns * na];
        let mut gq2 = vec![T::zero(); ns * na];
        let source_beta = match mode {
            SaddleMode::Source { beta } | SaddleMode::Joint { beta } => Some(T::lit(beta)),
            SaddleMode::Target => None,
        };
        if let Some(beta) = source_beta {
            let rho1 = self.source.rho.weights();
            let inc = incoming(&self.source.entries, &vars.l1, ns);
            let g1 = pr.source.gamma1;
            for s in 0..ns {
                for a in 0..na {
                    let i = s * na + a;
                    gq1[i] = rho1[i] * (beta * vars.q1.values()[i] - vars.l1.values()[i])
                        + g1 * mu.get(s, a) * inc[s];
                }
            }
        }
        if !matches!(mode, SaddleMode::Source { .. }) {
            let rho2 = self.target.rho.weights();
            let spec2 = &pr.target.spec2;
            let inc = incoming(&self.target.entries, &vars.l2, ns);
            let mut pi_row = vec![T::zero(); na];
            for s in 0..ns {
                softmax_row(vars.q2.row(s), spec2.pi_ref.row(s), spec2.tau, &mut pi_row);
                for a in 0..na {
                    let i = s * na + a;
                    gq2[i] = rho2[i] * (vars.q2.values()[i] - vars.l2.values()[i])
                        + spec2.gamma * pi_row[a] * inc[s];
                }
            }
            if matches!(mode, SaddleMode::Joint { .. }) {
                // (I - Pi_mu)^T (rho2 l2)
                for s in 0..ns {
                    let tot = (0..na)
                        .map(|a| rho2[s * na + a] * vars.l2.get(s, a))
                        .fold(T::zero(), |x, y| x + y);
                    for a in 0..na {
                        let i = s * na + a;
                        gq1[i] = gq1[i] + rho2[i] * vars.l2.values()[i] - mu.get(s, a) * tot;
                    }
                }
            }
        }
        Ok((gq1, gq2))
    }

    /// All four gradients, unmasked.
    pub fn gradients(&self, vars: &SaddleVars<T>, mode: SaddleMode) -> Result<Gradients<T>> {
        let (l1, l2) = self.dual_gradient(vars, mode)?;
        let (q1, q2) = self.primal_gradient(vars, mode)?;
        Ok(Gradients { q1, l1, q2, l2 })
    }
}

#[derive(Debug, Clone)]
struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: T,
    b1: T,
    b2: T,
    eps: T,
}

impl<T: Real> Adam<T> {
    fn new(n: usize, lr: f64, cfg: &OptimConfig) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            lr: T::lit(lr),
            b1: T::lit(cfg.adam_beta1),
            b2: T::lit(cfg.adam_beta2),
            eps: T::lit(cfg.adam_eps),
        }
    }

    /// Moves `x` along `sign * grad` (sign `+1` ascends, `-1` descends); masked
    /// entries are left untouched.
    fn step(&mut self, x: &mut [T], grad: &[T], mask: &[bool], sign: T) {
        self.t += 1;
        let c1 = T::one() - self.b1.powi(self.t);
        let c2 = T::one() - self.b2.powi(self.t);
        for i in 0..x.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.b1 * self.m[i] + (T::one() - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (T::one() - self.b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] = x[i] + sign * self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Checkpoint of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub stage: String,
    pub round: usize,
    pub objective: f64,
    pub source_residual: f64,
    pub target_residual: f64,
}

fn stage_name(mode: SaddleMode, offset: bool) -> &'static str {
    match (mode, offset) {
        (SaddleMode::Source { .. }, _) => "source",
        (SaddleMode::Target, _) => "target",
        (SaddleMode::Joint { .. }, false) => "joint",
        (SaddleMode::Joint { .. }, true) => "offset",
    }
}

/// Runs `rounds` rounds of Adam descent-ascent from `vars`, appending a trace
/// point every `checkpoint_interval` rounds.
pub fn saddle_optimize<T: Real>(
    data: &TransferData<'_, T>,
    vars: &mut SaddleVars<T>,
    mode: SaddleMode,
    rounds: usize,
    cfg: &OptimConfig,
    trace: &mut Vec<TracePoint>,
) -> Result<()> {
    saddle_optimize_stage(
        data,
        vars,
        mode,
        rounds,
        cfg,
        trace,
        stage_name(mode, false),
    )
}

fn saddle_optimize_stage<T: Real>(
    data: &TransferData<'_, T>,
    vars: &mut SaddleVars<T>,
    mode: SaddleMode,
    rounds: usize,
    cfg: &OptimConfig,
    trace: &mut Vec<TracePoint>,
    stage: &str,
) -> Result<()> {
    cfg.validate()?;
    let n = vars.q1.values().len();
    let src_mask = data.source.visited.clone();
    let tgt_mask = data.target.visited.clone();
    let none = vec![false; n];
    let (m_q1, m_l1, m_q2, m_l2) = match mode {
        SaddleMode::Source { .. } => (&src_mask, &src_mask, &none, &none),
        SaddleMode::Target => (&none, &none, &tgt_mask, &tgt_mask),
        SaddleMode::Joint { .. } => (&src_mask, &src_mask, &tgt_mask, &tgt_mask),
    };
    let mut adam_q1 = Adam::new(n, cfg.lr_q, cfg);
    let mut adam_q2 = Adam::new(n, cfg.lr_q, cfg);
    let mut adam_l1 = Adam::new(n, cfg.lr_l, cfg);
    let mut adam_l2 = Adam::new(n, cfg.lr_l, cfg);
    let up = T::one();
    let down = -T::one();
    let decay = if rounds > 1 && cfg.lr_final_ratio < 1.0 {
        T::lit(cfg.lr_final_ratio.powf(1.0 / (rounds - 1) as f64))
    } else {
        T::one()
    };
    for round in 1..=rounds {
        if round > 1 && decay < T::one() {
            for adam in [&mut adam_q1, &mut adam_q2, &mut adam_l1, &mut adam_l2] {
                adam.lr = adam.lr * decay;
            }
        }
        let (gl1, gl2) = data.dual_gradient(vars, mode)?;
        for _ in 0..cfg.dual_steps {
            adam_l1.step(vars.l1.values_mut(), &gl1, m_l1, up);
            adam_l2.step(vars.l2.values_mut(), &gl2, m_l2, up);
        }
        for _ in 0..cfg.primal_steps {
            let (gq1, gq2) = data.primal_gradient(vars, mode)?;
            if gq1.iter().chain(&gq2).any(|g| !g.is_finite()) {
                return Err(Error::Divergence { round });
            }
            adam_q1.step(vars.q1.values_mut(), &gq1, m_q1, down);
            adam_q2.step(vars.q2.values_mut(), &gq2, m_q2, down);
        }
        if round % cfg.checkpoint_interval == 0 {
            if !vars.is_finite() {
                return Err(Error::Divergence { round });
            }
            let objective = data.lagrangian(vars, mode)?.as_f64();
            let (b1, b2) = data.residual_norms(vars)?;
            if !objective.is_finite() {
                return Err(Error::Divergence { round });
            }
            trace.push(TracePoint {
                stage: stage.to_string(),
                round,
                objective,
                source_residual: b1,
                target_residual: b2,
            });
        }
    }
    if !vars.is_finite() {
        return Err(Error::Divergence { round: rounds });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Modular,
    Coupled,
    CoupledOffset,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Modular, Method::Coupled, Method::CoupledOffset];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Modular => "modular",
            Method::Coupled => "coupled",
            Method::CoupledOffset => "coupled_offset",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "modular" => Ok(Method::Modular),
            "coupled" => Ok(Method::Coupled),
            "coupled_offset" | "coupled-offset" => Ok(Method::CoupledOffset),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fitted tables and derived quantities.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EstimatorOutput<T> {
    pub method: Method,
    pub q1_hat: SAFn<T>,
    pub r_hat: SAFn<T>,
    pub c_used: T,
    pub q2_hat: SAFn<T>,
    pub pi2_hat: Policy<T>,
    pub l1_hat: SAFn<T>,
    pub l2_hat: SAFn<T>,
    pub trace: Vec<TracePoint>,
}

impl<T: Real> EstimatorOutput<T> {
    /// Output for the given tables; the reward and policy are derived from them.
    pub fn assemble(
        method: Method,
        problem: &TransferProblem<T>,
        vars: SaddleVars<T>,
        trace: Vec<TracePoint>,
    ) -> Result<Self> {
        let r_hat = recover_reward(&vars.q1, &problem.anchor)?;
        let pi2_hat = softmax_policy(&vars.q2, &problem.target.spec2);
        Ok(Self {
            method,
            q1_hat: vars.q1,
            r_hat,
            c_used: problem.shift()?,
            q2_hat: vars.q2,
            pi2_hat,
            l1_hat: vars.l1,
            l2_hat: vars.l2,
            trace,
        })
    }

    pub fn vars(&self) -> SaddleVars<T> {
        SaddleVars {
            q1: self.q1_hat.clone(),
            l1: self.l1_hat.clone(),
            q2: self.q2_hat.clone(),
            l2: self.l2_hat.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// `stage,round,objective,source_residual,target_residual` rows.
    pub fn write_trace_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "stage,round,objective,source_residual,target_residual")?;
        for p in &self.trace {
            writeln!(
                w,
                "{},{},{},{},{}",
                p.stage, p.round, p.objective, p.source_residual, p.target_residual
            )?;
        }
        Ok(())
    }
}

/// Two-stage plug-in: the source saddle with quadratic weight one, then the
/// target saddle with the recovered reward frozen.
pub fn fit_modular<T: Real>(
    data: &TransferData<'_, T>,
    cfg: &OptimConfig,
) -> Result<EstimatorOutput<T>> {
    cfg.validate()?;
    data.problem.shift()?;
    let (ns, na) = data.problem.shape();
    let mut vars = SaddleVars::noise(ns, na, cfg.init_noise_sd, cfg.seed);
    let mut trace = Vec::new();
    saddle_optimize(
        data,
        &mut vars,
        SaddleMode::Source { beta: 1.0 },
        cfg.source_rounds,
        cfg,
        &mut trace,
    )?;
    saddle_optimize(
        data,
        &mut vars,
        SaddleMode::Target,
        cfg.target_rounds,
        cfg,
        &mut trace,
    )?;
    EstimatorOutput::assemble(Method::Modular, data.problem, vars, trace)
}

/// Single joint saddle over all four tables with source weight `cfg.beta`.
pub fn fit_coupled<T: Real>(
    data: &TransferData<'_, T>,
    cfg: &OptimConfig,
) -> Result<EstimatorOutput<T>> {
    cfg.validate()?;
    data.problem.shift()?;
    let (ns, na) = data.problem.shape();
    let mut vars = SaddleVars::noise(ns, na, cfg.init_noise_sd, cfg.seed);
    let mut trace = Vec::new();
    saddle_optimize(
        data,
        &mut vars,
        SaddleMode::Joint { beta: cfg.beta },
        cfg.joint_rounds,
        cfg,
        &mut trace,
    )?;
    EstimatorOutput::assemble(Method::Coupled, data.problem, vars, trace)
}

/// Modular fit followed by a joint correction `q = q_mod + delta` with the
/// offsets starting at zero. Multipliers restart from the same noise as
/// [`fit_coupled`] unless `warm_start_duals` is set.
pub fn fit_coupled_offset<T: Real>(
    data: &TransferData<'_, T>,
    cfg: &OptimConfig,
) -> Result<EstimatorOutput<T>> {
    let modular = fit_modular(data, cfg)?;
    fit_coupled_offset_from(data, &modular, cfg)
}

/// The correction stage of [`fit_coupled_offset`] on top of a given Modular fit.
pub fn fit_coupled_offset_from<T: Real>(
    data: &TransferData<'_, T>,
    modular: &EstimatorOutput<T>,
    cfg: &OptimConfig,
) -> Result<EstimatorOutput<T>> {
    cfg.validate()?;
    let (ns, na) = data.problem.shape();
    let mut vars = modular.vars();
    if !cfg.warm_start_duals {
        let fresh = SaddleVars::<T>::noise(ns, na, cfg.init_noise_sd, cfg.seed);
        vars.l1 = fresh.l1;
        vars.l2 = fresh.l2;
    }
    let mut trace = modular.trace.clone();
    saddle_optimize_stage(
        data,
        &mut vars,
        SaddleMode::Joint { beta: cfg.beta },
        cfg.offset_rounds,
        cfg,
        &mut trace,
        "offset",
    )?;
    EstimatorOutput::assemble(Method::CoupledOffset, data.problem, vars, trace)
}

pub fn fit<T: Real>(
    method: Method,
    data: &TransferData<'_, T>,
    cfg: &OptimConfig,
) -> Result<EstimatorOutput<T>> {
    match method {
        Method::Modular => fit_modular(data, cfg),
        Method::Coupled => fit_coupled(data, cfg),
        Method::CoupledOffset => fit_coupled_offset(data, cfg),
    }
}

/// Exact solution of the empirical equations: `q1 = (I - g1 P^1^mu)^{-1} u^`
/// followed by soft value iteration on `P^2` with reward `(I - Pi_mu) q1 + g + C`.
pub fn plug_in_solution<T: Real>(data: &TransferData<'_, T>, tol: T) -> Result<(SAFn<T>, SAFn<T>)> {
    let pr = data.problem;
    let q1 = resolvent_apply(
        &data.source.p_hat,
        &pr.anchor.mu,
        pr.source.gamma1,
        &data.u_hat,
        tol,
    )?;
    let rc = pr.shifted_reward(&q1)?;
    let q2 = soft_value_iteration(&rc, &data.target.p_hat, &pr.target.spec2, tol)?.q;
    Ok((q1, q2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Kernel, SADist, SFn};
    use crate::transfer::{oracle_transfer, AnchorSpec, SourceEnv, TargetEnv};

    fn tiny_problem() -> TransferProblem<f64> {
        let p1 =
            Kernel::from_weights_fn(3, 2, |s, a, n| 1.0 + ((s + 2 * a + n) % 3) as f64).unwrap();
        let p2 =
            Kernel::from_weights_fn(3, 2, |s, a, n| 1.0 + ((2 * s + a + n) % 3) as f64).unwrap();
        let pi_b = Policy::new(3, 2, vec![0.7, 0.3, 0.4, 0.6, 0.2, 0.8]).unwrap();
        let g = SFn::from_vec(vec![0.1, -0.2, 0.3]);
        TransferProblem::new(
            SourceEnv {
                p1,
                gamma1: 0.8,
                pi_b1: pi_b,
                pi_ref1: Policy::uniform(3, 2),
            },
            TargetEnv {
                p2,
                spec2: SoftSpec::uniform(3, 2, 0.7, 0.5).unwrap(),
            },
            AnchorSpec::anchor_action(0, g, 2).unwrap(),
            None,
        )
        .unwrap()
    }

    fn with_shift(pr: TransferProblem<f64>) -> TransferProblem<f64> {
        let c = oracle_transfer(&pr, 1e-12).unwrap().c;
        pr.with_shift(c)
    }

    #[test]
    fn zero_tables_give_zero_objective() {
        let pr = with_shift(tiny_problem());
        let z = SaddleVars::zeros(3, 2);
        let u = pr.u_g().unwrap();
        let mu = &pr.anchor.mu;
        assert_eq!(
            sample_source_objective(&z, (0, 1, 2), &u, mu, 0.8, 100.0),
            0.0
        );
        let z2 = SaddleVars {
            q1: SAFn::constant(3, 2, 4.0),
            ..z
        };
        assert_eq!(
            sample_target_objective(&z2, (0, 1, 2), mu, &pr.anchor.g, 2.5, &pr.target.spec2),
            0.0
        );
    }

    #[test]
    fn lagrangian_gradients_match_finite_differences() {
        let pr = with_shift(tiny_problem());
        let rho = SADist::uniform(3, 2);
        let src = WeightedTransitions::population(&pr.source.p1, &rho).unwrap();
        let tgt = WeightedTransitions::population(&pr.target.p2, &rho).unwrap();
        let data = TransferData::new(&pr, &src, &tgt, BehaviorInput::Known).unwrap();
        let vars = SaddleVars::<f64>::noise(3, 2, 1.0, 4);
        for mode in [
            SaddleMode::Source { beta: 3.0 },
            SaddleMode::Target,
            SaddleMode::Joint { beta: 3.0 },
        ] {
            let g = data.gradients(&vars, mode).unwrap();
            let h = 1e-6;
            // the target stage treats q1 as data, so its q1 gradient is not tracked
            let tables = if mode == SaddleMode::Target {
                1..4
            } else {
                0..4
            };
            for which in tables {
                for i in 0..6 {
                    let mut plus = vars.clone();
                    let mut minus = vars.clone();
                    let (tp, tm) = match which {
                        0 => (plus.q1.values_mut(), minus.q1.values_mut()),
                        1 => (plus.l1.values_mut(), minus.l1.values_mut()),
                        2 => (plus.q2.values_mut(), minus.q2.values_mut()),
                        _ => (plus.l2.values_mut(), minus.l2.values_mut()),
                    };
                    tp[i] += h;
                    tm[i] -= h;
                    let fd = (data.lagrangian(&plus, mode).unwrap()
                        - data.lagrangian(&minus, mode).unwrap())
                        / (2.0 * h);
                    let an = [&g.q1, &g.l1, &g.q2, &g.l2][which][i];
                    assert!(
                        (fd - an).abs() < 1e-6,
                        "mode {mode:?} table {which} entry {i}: {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_learning_rates_leave_tables() {
        let pr = with_shift(tiny_problem());
        let rho = SADist::uniform(3, 2);
        let src = WeightedTransitions::population(&pr.source.p1, &rho).unwrap();
        let tgt = WeightedTransitions::population(&pr.target.p2, &rho).unwrap();
        let data = TransferData::new(&pr, &src, &tgt, BehaviorInput::Known).unwrap();
        let cfg = OptimConfig {
            lr_q: 0.0,
            lr_l: 0.0,
            ..OptimConfig::default()
        };
        let start = SaddleVars::<f64>::noise(3, 2, 1.5, 1);
        let mut vars = start.clone();
        let mut trace = Vec::new();
        saddle_optimize(
            &data,
            &mut vars,
            SaddleMode::Joint { beta: 100.0 },
            50,
            &cfg,
            &mut trace,
        )
        .unwrap();
        assert_eq!(vars, start);
    }

    #[test]
    fn zero_offset_rounds_reproduce_modular() {
        let pr = with_shift(tiny_problem());
        let rho = SADist::uniform(3, 2);
        let src = WeightedTransitions::population(&pr.source.p1, &rho).unwrap();
        let tgt = WeightedTransitions::population(&pr.target.p2, &rho).unwrap();
        let data = TransferData::new(&pr, &src, &tgt, BehaviorInput::Known).unwrap();
        let cfg = OptimConfig {
            source_rounds: 300,
            target_rounds: 300,
            offset_rounds: 0,
            checkpoint_interval: 100,
            ..OptimConfig::default()
        };
        let m = fit_modular(&data, &cfg).unwrap();
        let o = fit_coupled_offset(&data, &cfg).unwrap();
        assert_eq!(m.q1_hat, o.q1_hat);
        assert_eq!(m.q2_hat, o.q2_hat);
        assert_eq!(m.trace.len(), 6);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }
}
