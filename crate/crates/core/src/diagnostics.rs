//! Evaluation metrics for fitted transfers and numerical certificates for the
//! structural results: dual representations, quadratic growth, orthogonality
//! of the profiled residual, first-order error channels and bound constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{sampling_distribution, WeightedTransitions};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorOutput, Method};
use crate::mdp::{
    compose_policy_kernel, discounted_occupancy, policy_average, resolvent_apply,
    transpose_resolvent_apply, Kernel, Policy, ResolventMethod, SADist, SAFn, SFn,
};
use crate::scalar::Real;
use crate::soft::{log_sum_exp_row, omega, regularized_return, softmax_policy, state_value};
use crate::transfer::{
    recover_reward, solve_coupled_population, source_correction, source_error_terms, AnchorSpec,
    Oracle, SourceOperator, TransferProblem,
};

/// Inflation applied to observed sup-norms when a value bound `B_Q` is needed.
pub const B_Q_INFLATION: f64 = 1.5;

/// Weights of the `rho1`/`rho2` norms used by metrics and certificates.
#[derive(Debug, Clone)]
pub struct EvalWeights<T> {
    pub rho1: SADist<T>,
    pub rho2: SADist<T>,
}

impl<T: Real> EvalWeights<T> {
    pub fn new(rho1: SADist<T>, rho2: SADist<T>) -> Result<Self> {
        if rho1.shape() != rho2.shape() {
            return Err(Error::Shape(format!(
                "eval weights {:?} vs {:?}",
                rho1.shape(),
                rho2.shape()
            )));
        }
        Ok(Self { rho1, rho2 })
    }

    /// Population visitation of the logging setup: source data from the
    /// behavior policy on `P1`, target data from `target_logging` on `P2`.
    pub fn logging(
        problem: &TransferProblem<T>,
        rho0: &SFn<T>,
        target_logging: &Policy<T>,
        horizon: usize,
    ) -> Result<Self> {
        let rho1 = sampling_distribution(&problem.source.p1, &problem.source.pi_b1, rho0, horizon)?;
        let rho2 = sampling_distribution(&problem.target.p2, target_logging, rho0, horizon)?;
        Self::new(rho1, rho2)
    }

    /// Realized weights of the two datasets.
    pub fn empirical(
        source: &WeightedTransitions<T>,
        target: &WeightedTransitions<T>,
    ) -> Result<Self> {
        Self::new(source.rho.clone(), target.rho.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct V2Decomposition {
    pub policy_weighted_q2_term: f64,
    pub policy_mismatch_term: f64,
    /// Worst per-state gap between the summed pieces and `V^2 - V2*`.
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub regret: f64,
    pub q2_mse_rho2: f64,
    pub v2_mse_unif: f64,
    pub r_mse_rho1: f64,
    pub q1_mse_rho1: f64,
    pub v2_decomposition: V2Decomposition,
    pub anchor_action_q1_mse: f64,
}

impl MetricReport {
    pub const CSV_FIELDS: [&'static str; 8] = [
        "regret",
        "q2_mse_rho2",
        "v2_mse_unif",
        "r_mse_rho1",
        "q1_mse_rho1",
        "v2_policy_weighted_q2_term",
        "v2_policy_mismatch_term",
        "anchor_action_q1_mse",
    ];

    pub fn csv_values(&self) -> [f64; 8] {
        [
            self.regret,
            self.q2_mse_rho2,
            self.v2_mse_unif,
            self.r_mse_rho1,
            self.q1_mse_rho1,
            self.v2_decomposition.policy_weighted_q2_term,
            self.v2_decomposition.policy_mismatch_term,
            self.anchor_action_q1_mse,
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn check_shape(name: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{name}: {got:?} vs {want:?}")));
    }
    Ok(())
}

fn mean_sq<T: Real>(v: &SFn<T>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.values().iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / v.len() as f64
}

fn sfn_diff<T: Real>(a: &SFn<T>, b: &SFn<T>) -> SFn<T> {
    SFn::from_vec(
        a.values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x - y)
            .collect(),
    )
}

fn check_output_shapes<T: Real>(
    out: &EstimatorOutput<T>,
    oracle: &Oracle<T>,
    shape: (usize, usize),
) -> Result<()> {
    check_shape("q1_hat", out.q1_hat.shape(), shape)?;
    check_shape("q2_hat", out.q2_hat.shape(), shape)?;
    check_shape("r_hat", out.r_hat.shape(), shape)?;
    check_shape("pi2_hat", out.pi2_hat.shape(), shape)?;
    check_shape("oracle q1", oracle.q1.shape(), shape)?;
    check_shape("oracle q2", oracle.q2.shape(), shape)
}

/// Regret, weighted and unweighted errors, the `V2` split and the anchor-action
/// error of one fitted output against the oracle.
pub fn evaluate_output<T: Real>(
    out: &EstimatorOutput<T>,
    oracle: &Oracle<T>,
    problem: &TransferProblem<T>,
    weights: &EvalWeights<T>,
) -> Result<MetricReport> {
    let shape = problem.shape();
    check_output_shapes(out, oracle, shape)?;
    check_shape("rho1", weights.rho1.shape(), shape)?;
    check_shape("rho2", weights.rho2.shape(), shape)?;
    let regret = target_regret(problem, oracle, &out.pi2_hat, &weights.rho2)?;
    let dq1 = &out.q1_hat - &oracle.q1;
    let dq2 = &out.q2_hat - &oracle.q2;
    let dr = &out.r_hat - &oracle.r;
    let v_hat = state_value(&out.q2_hat, &out.pi2_hat)?;
    Ok(MetricReport {
        regret,
        q2_mse_rho2: dq2.norm_sq(&weights.rho2).as_f64(),
        v2_mse_unif: mean_sq(&sfn_diff(&v_hat, &oracle.v2)),
        r_mse_rho1: dr.norm_sq(&weights.rho1).as_f64(),
        q1_mse_rho1: dq1.norm_sq(&weights.rho1).as_f64(),
        v2_decomposition: v2_error_decomposition(out, oracle)?,
        anchor_action_q1_mse: mean_sq(&policy_average(&problem.anchor.mu, &dq1)?),
    })
}

/// `J2(pi2*) - J2(pi)` for the shifted oracle reward, started from the state
/// marginal of `rho2`.
pub fn target_regret<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    pi: &Policy<T>,
    rho2: &SADist<T>,
) -> Result<f64> {
    let rc = oracle.shifted_reward();
    let p2 = &problem.target.p2;
    let spec2 = &problem.target.spec2;
    let j_star = regularized_return(&oracle.pi2, &rc, p2, spec2, rho2)?;
    let j_hat = regularized_return(pi, &rc, p2, spec2, rho2)?;
    Ok((j_star - j_hat).as_f64())
}

/// `V^2 - V2* = sum_a pi^2 (q^2 - q2*) + sum_a (pi^2 - pi2*) q2*`, each piece
/// squared and averaged uniformly over states.
pub fn v2_error_decomposition<T: Real>(
    out: &EstimatorOutput<T>,
    oracle: &Oracle<T>,
) -> Result<V2Decomposition> {
    let weighted = policy_average(&out.pi2_hat, &(&out.q2_hat - &oracle.q2))?;
    let mismatch = sfn_diff(&state_value(&oracle.q2, &out.pi2_hat)?, &oracle.v2);
    let direct = sfn_diff(&state_value(&out.q2_hat, &out.pi2_hat)?, &oracle.v2);
    let reconstruction_error = (0..direct.len())
        .map(|s| {
            (weighted.get(s) + mismatch.get(s) - direct.get(s))
                .as_f64()
                .abs()
        })
        .fold(0.0, f64::max);
    Ok(V2Decomposition {
        policy_weighted_q2_term: mean_sq(&weighted),
        policy_mismatch_term: mean_sq(&mismatch),
        reconstruction_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorContrastReport {
    pub anchor_action_q1_mse: f64,
    pub q1_mse_rho1: f64,
    pub r_mse_rho1: f64,
    /// `sup |(r^ - r*) - ((q^1 - q1*) - (q^1 - q1*)(., a0))|`.
    pub identity_error: f64,
}

/// Reward error as a contrast of the source value error against the anchor action.
pub fn anchor_contrast_diagnostic<T: Real>(
    out: &EstimatorOutput<T>,
    oracle: &Oracle<T>,
    anchor: &AnchorSpec<T>,
    rho1: &SADist<T>,
) -> Result<AnchorContrastReport> {
    let actions = anchor.mu.point_mass_actions().ok_or_else(|| {
        Error::InvalidParameter("anchor contrast diagnostic needs a point-mass anchor".into())
    })?;
    check_shape("q1_hat", out.q1_hat.shape(), oracle.q1.shape())?;
    check_shape("rho1", rho1.shape(), oracle.q1.shape())?;
    let dq1 = &out.q1_hat - &oracle.q1;
    let dr = &out.r_hat - &oracle.r;
    let (ns, na) = dq1.shape();
    let mut identity_error = 0.0f64;
    let mut anchor_sq = 0.0;
    for (s, &a0) in actions.iter().enumerate() {
        let base = dq1.get(s, a0);
        anchor_sq += base.as_f64().powi(2);
        for a in 0..na {
            let err = (dr.get(s, a) - (dq1.get(s, a) - base)).as_f64().abs();
            identity_error = identity_error.max(err);
        }
    }
    Ok(AnchorContrastReport {
        anchor_action_q1_mse: anchor_sq / ns as f64,
        q1_mse_rho1: dq1.norm_sq(rho1).as_f64(),
        r_mse_rho1: dr.norm_sq(rho1).as_f64(),
        identity_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Passes when `|lhs - rhs| <= tol`.
    Identity,
    /// Passes when `lhs <= rhs + tol`.
    Inequality,
    /// Recorded value only; always passes.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub name: String,
    pub kind: CheckKind,
    pub lhs: f64,
    pub rhs: f64,
    pub tol: f64,
    /// Number of randomized trials folded into this entry (worst case kept).
    pub trials: usize,
    pub pass: bool,
}

impl Certificate {
    pub fn identity(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64, trials: usize) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Identity,
            lhs,
            rhs,
            tol,
            trials,
            pass: (lhs - rhs).abs() <= tol,
        }
    }

    pub fn inequality(
        name: impl Into<String>,
        lhs: f64,
        rhs: f64,
        tol: f64,
        trials: usize,
    ) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Inequality,
            lhs,
            rhs,
            tol,
            trials,
            pass: lhs <= rhs + tol,
        }
    }

    pub fn report(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Report,
            lhs: value,
            rhs: 0.0,
            tol: 0.0,
            trials: 1,
            pass: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub checks: Vec<Certificate>,
}

impl CertificateReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, c: Certificate) {
        self.checks.push(c);
    }

    pub fn extend(&mut self, other: CertificateReport) {
        self.checks.extend(other.checks);
    }

    /// Prefix every check name, e.g. with an instance label.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for c in &mut self.checks {
            c.name = format!("{prefix}{}", c.name);
        }
        self
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Certificate> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Certificate> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Worst `(lhs, rhs)` pair of an inequality family, by `lhs - rhs`.
fn worst_inequality(
    name: &str,
    tol: f64,
    pairs: impl IntoIterator<Item = (f64, f64)>,
) -> Certificate {
    let mut worst: Option<(f64, f64)> = None;
    let mut n = 0;
    for (l, r) in pairs {
        n += 1;
        let keep = match worst {
            None => true,
            Some((wl, wr)) => !(wl - wr).is_nan() && !(l - r <= wl - wr),
        };
        if keep {
            worst = Some((l, r));
        }
    }
    let (l, r) = worst.unwrap_or((0.0, 0.0));
    Certificate::inequality(name, l, r, tol, n)
}

/// Worst `(lhs, rhs, tol)` triple of an identity family, by `|lhs - rhs| / tol`.
fn worst_identity(name: &str, triples: impl IntoIterator<Item = (f64, f64, f64)>) -> Certificate {
    let mut worst: Option<(f64, f64, f64, f64)> = None;
    let mut n = 0;
    for (l, r, t) in triples {
        n += 1;
        let score = (l - r).abs() / t.max(f64::MIN_POSITIVE);
        let keep = match worst {
            None => true,
            Some((_, _, _, ws)) => !ws.is_nan() && !(score <= ws),
        };
        if keep {
            worst = Some((l, r, t, score));
        }
    }
    let (l, r, t, _) = worst.unwrap_or((0.0, 0.0, 0.0, 0.0));
    Certificate::identity(name, l, r, t, n)
}

fn normal_safn<T: Real>(ns: usize, na: usize, scale: f64, rng: &mut ChaCha8Rng) -> SAFn<T> {
    SAFn::from_vec(
        ns,
        na,
        (0..ns * na)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(scale * z)
            })
            .collect(),
    )
    .expect("shape is consistent")
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo.log10()..hi.log10()))
}

fn weighted<T: Real>(rho: &SADist<T>, x: &SAFn<T>) -> SAFn<T> {
    x.zip_map(&rho.as_safn(), |v, w| v * w)
}

fn abs_inner<T: Real>(x: &SAFn<T>, y: &SAFn<T>, rho: &SADist<T>) -> f64 {
    x.values()
        .iter()
        .zip(y.values())
        .zip(rho.weights())
        .map(|((&a, &b), &w)| (w * a * b).as_f64().abs())
        .sum()
}

/// `(I - gamma P^pi) h`.
fn bellman_difference<T: Real>(
    p: &Kernel<T>,
    pi: &Policy<T>,
    gamma: T,
    h: &SAFn<T>,
) -> Result<SAFn<T>> {
    Ok(h - &(&compose_policy_kernel(p, pi, h)? * gamma))
}

fn with_oracle_shift<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
) -> TransferProblem<T> {
    problem.clone().with_shift(oracle.c)
}

/// Multipliers of the population saddle problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DualCertificates<T> {
    pub beta: T,
    pub l2: SAFn<T>,
    pub l1_self: SAFn<T>,
    pub l1_cross: SAFn<T>,
    pub l1_coup: SAFn<T>,
}

impl<T: Real> DualCertificates<T> {
    /// Source multiplier of the stand-alone (modular) source problem.
    pub fn l1_mod(&self) -> &SAFn<T> {
        &self.l1_self
    }
}

/// `x / rho`, allowing zero weight only where `x` vanishes as well.
fn divide_by_weights<T: Real>(x: &SAFn<T>, rho: &SADist<T>, what: &str) -> Result<SAFn<T>> {
    let tiny = T::lit(1e-12) * (T::one() + x.sup_norm());
    let (ns, na) = x.shape();
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let w = rho.get(s, a);
            let v = x.get(s, a);
            if w > T::zero() {
                out.push(v / w);
            } else if v.abs() <= tiny {
                out.push(T::zero());
            } else {
                return Err(Error::InvalidParameter(format!(
                    "{what}: zero weight at (s={s}, a={a}) on the dual support"
                )));
            }
        }
    }
    SAFn::from_vec(ns, na, out)
}

/// Transpose-resolvent representation of the population multipliers.
pub fn dual_certificates<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
    beta: T,
) -> Result<DualCertificates<T>> {
    if !(beta >= T::zero()) {
        return Err(Error::InvalidParameter(format!("beta {beta} must be >= 0")));
    }
    let shape = problem.shape();
    check_shape("rho1", weights.rho1.shape(), shape)?;
    check_shape("rho2", weights.rho2.shape(), shape)?;
    let tol = T::lit(T::SOLVE_TOL);
    let method = ResolventMethod::Auto;
    let (rho1, rho2) = (&weights.rho1, &weights.rho2);
    let g1 = problem.source.gamma1;
    let g2 = problem.target.spec2.gamma;
    let mu = &problem.anchor.mu;

    let x2 = transpose_resolvent_apply(
        &problem.target.p2,
        &oracle.pi2,
        g2,
        &weighted(rho2, &oracle.q2),
        tol,
        method,
    )?;
    let l2 = divide_by_weights(&x2, rho2, "l2")?;
    let x1 = transpose_resolvent_apply(
        &problem.source.p1,
        mu,
        g1,
        &weighted(rho1, &oracle.q1),
        tol,
        method,
    )?;
    let l1_self = divide_by_weights(&x1, rho1, "l1_self")?;
    let feedback = problem.anchor.contrast_adjoint(&weighted(rho2, &l2));
    let xc = transpose_resolvent_apply(&problem.source.p1, mu, g1, &feedback, tol, method)?;
    let l1_cross = divide_by_weights(&xc, rho1, "l1_cross")?;
    let l1_coup = &(&l1_self * beta) + &l1_cross;
    Ok(DualCertificates {
        beta,
        l2,
        l1_self,
        l1_cross,
        l1_coup,
    })
}

/// Weak-form adjoint identities of the multipliers over random directions,
/// each to `1e-7` relative to the absolute size of the inner products.
pub fn check_dual_adjoints<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
    duals: &DualCertificates<T>,
    directions: usize,
    seed: u64,
) -> Result<CertificateReport> {
    const REL: f64 = 1e-7;
    let (ns, na) = problem.shape();
    let (rho1, rho2) = (&weights.rho1, &weights.rho2);
    let g1 = problem.source.gamma1;
    let g2 = problem.target.spec2.gamma;
    let beta = duals.beta;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l2_rows = Vec::new();
    let mut self_rows = Vec::new();
    let mut coup_rows = Vec::new();
    for _ in 0..directions {
        let h = normal_safn::<T>(ns, na, 1.0, &mut rng);
        let k2 = bellman_difference(&problem.target.p2, &oracle.pi2, g2, &h)?;
        let lhs = duals.l2.inner(&k2, rho2).as_f64();
        let rhs = oracle.q2.inner(&h, rho2).as_f64();
        let scale = abs_inner(&duals.l2, &k2, rho2) + abs_inner(&oracle.q2, &h, rho2);
        l2_rows.push((lhs, rhs, REL * scale.max(f64::MIN_POSITIVE)));

        let k1 = bellman_difference(&problem.source.p1, &problem.anchor.mu, g1, &h)?;
        let ch = problem.anchor.contrast(&h)?;
        let lhs = duals.l1_self.inner(&k1, rho1).as_f64();
        let rhs = oracle.q1.inner(&h, rho1).as_f64();
        let scale = abs_inner(&duals.l1_self, &k1, rho1) + abs_inner(&oracle.q1, &h, rho1);
        self_rows.push((lhs, rhs, REL * scale.max(f64::MIN_POSITIVE)));

        let lhs = duals.l1_coup.inner(&k1, rho1).as_f64();
        let rhs = (beta * oracle.q1.inner(&h, rho1) + duals.l2.inner(&ch, rho2)).as_f64();
        let scale = abs_inner(&duals.l1_coup, &k1, rho1)
            + beta.as_f64() * abs_inner(&oracle.q1, &h, rho1)
            + abs_inner(&duals.l2, &ch, rho2);
        coup_rows.push((lhs, rhs, REL * scale.max(f64::MIN_POSITIVE)));
    }
    let mut report = CertificateReport::new();
    report.push(worst_identity("dual_adjoint_l2", l2_rows));
    report.push(worst_identity("dual_adjoint_l1_mod", self_rows));
    report.push(worst_identity("dual_adjoint_l1_coup", coup_rows));
    Ok(report)
}

/// Occupancy-to-sampling ratios that control resolvent norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentrability {
    /// `|| d^{P1}_{mu, rho1} / rho1 ||_inf`.
    pub kappa1: f64,
    /// `|| d^{P2}_{pi2*, rho2} / rho2 ||_inf`.
    pub kappa2: f64,
    /// `|| d^{P2}_{pi2*, rho2} / rho1 ||_inf`.
    pub kappa12: f64,
    /// State-marginal version of `kappa12`.
    pub kappa12_states: f64,
    /// `|| mu / pi_b1 ||_inf`.
    pub kappa_mu_b1: f64,
}

fn sup_ratio<T: Real>(num: &[T], den: &[T]) -> f64 {
    num.iter().zip(den).fold(0.0, |acc, (&n, &d)| {
        let (n, d) = (n.as_f64(), d.as_f64());
        let r = if d > 0.0 {
            n / d
        } else if n > 1e-14 {
            f64::INFINITY
        } else {
            0.0
        };
        acc.max(r)
    })
}

pub fn concentrability<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
) -> Result<Concentrability> {
    let (rho1, rho2) = (&weights.rho1, &weights.rho2);
    let d2 = discounted_occupancy(
        &problem.target.p2,
        &oracle.pi2,
        rho2,
        problem.target.spec2.gamma,
    )?;
    let d1 = discounted_occupancy(
        &problem.source.p1,
        &problem.anchor.mu,
        rho1,
        problem.source.gamma1,
    )?;
    Ok(Concentrability {
        kappa1: sup_ratio(d1.weights(), rho1.weights()),
        kappa2: sup_ratio(d2.weights(), rho2.weights()),
        kappa12: sup_ratio(d2.weights(), rho1.weights()),
        kappa12_states: sup_ratio(d2.state_marginal().values(), rho1.state_marginal().values()),
        kappa_mu_b1: sup_ratio(problem.anchor.mu.probs(), problem.source.pi_b1.probs()),
    })
}

/// Constants entering the dual radii and the regret conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub kappa: Concentrability,
    pub b_q1: f64,
    pub b_q2: f64,
    /// `min pi2*`.
    pub eps_pi2_star: f64,
    /// Regret-per-unit-`rho2`-error constant.
    pub c_pi: f64,
    pub l2_bound: f64,
    pub l1_mod_bound: f64,
    pub l1_coup_bound: f64,
}

pub fn bound_constants<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
    beta: f64,
) -> Result<BoundConstants> {
    let kappa = concentrability(problem, oracle, weights)?;
    let g1 = problem.source.gamma1.as_f64();
    let g2 = problem.target.spec2.gamma.as_f64();
    let tau2 = problem.target.spec2.tau.as_f64();
    let na = problem.shape().1 as f64;
    let b_q1 = B_Q_INFLATION * oracle.q1.sup_norm().as_f64();
    let b_q2 = B_Q_INFLATION * oracle.q2.sup_norm().as_f64();
    let eps_pi2_star = oracle.pi2.min_prob().as_f64();
    let c_pi = b_q2 * (na * kappa.kappa2).sqrt() / ((1.0 - g2) * tau2 * eps_pi2_star.sqrt());
    let l2_bound = kappa.kappa2 * b_q2 / (1.0 - g2);
    let l1_mod_bound = kappa.kappa1 * b_q1 / (1.0 - g1);
    let l1_coup_bound = beta * l1_mod_bound
        + kappa.kappa1 * (kappa.kappa12 + kappa.kappa_mu_b1 * kappa.kappa12_states) * b_q2
            / ((1.0 - g1) * (1.0 - g2));
    Ok(BoundConstants {
        kappa,
        b_q1,
        b_q2,
        eps_pi2_star,
        c_pi,
        l2_bound,
        l1_mod_bound,
        l1_coup_bound,
    })
}

/// Sup-norms of the multipliers against their concentrability radii.
pub fn check_dual_bounds<T: Real>(
    duals: &DualCertificates<T>,
    constants: &BoundConstants,
) -> CertificateReport {
    let mut report = CertificateReport::new();
    report.push(Certificate::inequality(
        "dual_bound_l2",
        duals.l2.sup_norm().as_f64(),
        constants.l2_bound,
        0.0,
        1,
    ));
    report.push(Certificate::inequality(
        "dual_bound_l1_mod",
        duals.l1_self.sup_norm().as_f64(),
        constants.l1_mod_bound,
        0.0,
        1,
    ));
    report.push(Certificate::inequality(
        "dual_bound_l1_coup",
        duals.l1_coup.sup_norm().as_f64(),
        constants.l1_coup_bound,
        0.0,
        1,
    ));
    report
}

/// Population coupled Lagrangian `L(q1* + d1, q2* + d2) - L(q1*, q2*)` at fixed
/// multipliers, assembled from residual increments to avoid cancellation.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_gap<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
    l1: &SAFn<T>,
    l2: &SAFn<T>,
    beta: T,
    d1: &SAFn<T>,
    d2: &SAFn<T>,
) -> Result<f64> {
    let (rho1, rho2) = (&weights.rho1, &weights.rho2);
    let spec2 = &problem.target.spec2;
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let quad = half * beta * d1.inner(&(&(&oracle.q1 * two) + d1), rho1)
        + half * d2.inner(&(&(&oracle.q2 * two) + d2), rho2);
    let db1 = bellman_difference(
        &problem.source.p1,
        &problem.anchor.mu,
        problem.source.gamma1,
        d1,
    )?
    .map(|v| -v);
    // Omega(q2* + d2) - Omega(q2*) = tau log E_{pi2*} exp(d2 / tau)
    let domega = SFn::from_vec(
        (0..d2.n_states())
            .map(|s| log_sum_exp_row(d2.row(s), oracle.pi2.row(s), spec2.tau))
            .collect(),
    );
    let db2 = &(&problem.anchor.contrast(d1)?
        + &(&problem.target.p2.expect(&domega)? * spec2.gamma))
        - d2;
    Ok((quad + l1.inner(&db1, rho1) + l2.inner(&db2, rho2)).as_f64())
}

/// Quadratic growth of the population Lagrangian at the coupled multipliers,
/// and the first-order slope along a source direction with the modular source
/// multiplier substituted.
pub fn check_quadratic_growth<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
    duals: &DualCertificates<T>,
    trials: usize,
    seed: u64,
) -> Result<CertificateReport> {
    const SLACK: f64 = 1e-9;
    let pb = with_oracle_shift(problem, oracle);
    let (ns, na) = pb.shape();
    let (rho1, rho2) = (&weights.rho1, &weights.rho2);
    let beta = duals.beta;
    let b = beta.as_f64();
    let mut report = CertificateReport::new();
    report.push(Certificate::inequality(
        "dual_l2_nonnegative",
        -duals.l2.min().as_f64(),
        0.0,
        1e-10 * (1.0 + duals.l2.sup_norm().as_f64()),
        1,
    ));
    let zero = SAFn::zeros(ns, na);
    let gap0 = lagrangian_gap(
        &pb,
        oracle,
        weights,
        &duals.l1_coup,
        &duals.l2,
        beta,
        &zero,
        &zero,
    )?;
    report.push(Certificate::identity(
        "quadratic_growth_zero",
        gap0,
        0.0,
        1e-12,
        1,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut joint = Vec::with_capacity(trials);
    let mut target_only = Vec::with_capacity(trials);
    for _ in 0..trials {
        let s1 = log_uniform(&mut rng, 1e-3, 10.0);
        let s2 = log_uniform(&mut rng, 1e-3, 10.0);
        let d1 = normal_safn::<T>(ns, na, s1, &mut rng);
        let d2 = normal_safn::<T>(ns, na, s2, &mut rng);
        let gap = lagrangian_gap(
            &pb,
            oracle,
            weights,
            &duals.l1_coup,
            &duals.l2,
            beta,
            &d1,
            &d2,
        )?;
        let bound = 0.5 * b * d1.norm_sq(rho1).as_f64() + 0.5 * d2.norm_sq(rho2).as_f64();
        joint.push((bound, gap));
        let gap = lagrangian_gap(
            &pb,
            oracle,
            weights,
            &duals.l1_coup,
            &duals.l2,
            beta,
            &zero,
            &d2,
        )?;
        target_only.push((0.5 * d2.norm_sq(rho2).as_f64(), gap));
    }
    report.push(worst_inequality("quadratic_growth_joint", SLACK, joint));
    report.push(worst_inequality(
        "quadratic_growth_q2_only",
        SLACK,
        target_only,
    ));

    // steepest direction of the surviving term <l2*, (I - Pi_mu) d1>_rho2
    let v = pb.anchor.contrast_adjoint(&weighted(rho2, &duals.l2));
    let vn = v.sup_norm();
    let dir = if vn > T::zero() {
        v.map(|x| x / vn)
    } else {
        SAFn::constant(ns, na, T::one())
    };
    let step = T::lit(1e-5) * (T::one() + oracle.q1.sup_norm());
    let slope = |l1: &SAFn<T>| -> Result<f64> {
        let up = lagrangian_gap(
            &pb,
            oracle,
            weights,
            l1,
            &duals.l2,
            beta,
            &(&dir * step),
            &zero,
        )?;
        let down = lagrangian_gap(
            &pb,
            oracle,
            weights,
            l1,
            &duals.l2,
            beta,
            &(&dir * -step),
            &zero,
        )?;
        Ok((up - down) / (2.0 * step.as_f64()))
    };
    let l1_mod_scaled = &duals.l1_self * beta;
    let slope_mod = slope(&l1_mod_scaled)?;
    let slope_coup = slope(&duals.l1_coup)?;
    let surviving = duals.l2.inner(&pb.anchor.contrast(&dir)?, rho2).as_f64();
    report.push(Certificate::report("first_order_surviving_term", surviving));
    report.push(Certificate::identity(
        "first_order_modular_slope_matches_surviving_term",
        slope_mod,
        surviving,
        1e-6 * (1.0 + surviving.abs()),
        1,
    ));
    report.push(Certificate::inequality(
        "first_order_modular_slope_nonzero",
        1e-3,
        slope_mod.abs(),
        0.0,
        1,
    ));
    report.push(Certificate::inequality(
        "first_order_coupled_slope_zero",
        slope_coup.abs(),
        0.0,
        1e-8,
        1,
    ));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityMeasure {
    /// Largest `||D_q1 b~2 [h]||_inf / ||h||_inf` over the directions.
    pub profiled_max: f64,
    /// Smallest `||D_q1 b2 [h]||_inf / ||h||_inf` over the same directions.
    pub unprofiled_min: f64,
    pub directions: usize,
}

/// Central finite differences in `q1` of the profiled and plain target
/// residuals at the population solution. `correction_sign` multiplies the
/// profiling correction (`1` is the correct residual).
pub fn orthogonality_measure<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    directions: usize,
    seed: u64,
    correction_sign: T,
) -> Result<OrthogonalityMeasure> {
    let pb = with_oracle_shift(problem, oracle);
    let (ns, na) = pb.shape();
    let tol = T::lit(T::SOLVE_TOL);
    let p1 = &pb.source.p1;
    let profiled = |q1: &SAFn<T>| -> Result<(SAFn<T>, SAFn<T>)> {
        let b1 = pb.source_residual_with(p1, &oracle.u_g, q1)?;
        let b2 = pb.target_residual(q1, &oracle.q2)?;
        let corr = source_correction(&pb, SourceOperator::Population, &b1, tol)?;
        Ok((&b2 + &(&corr * correction_sign), b2))
    };
    let step = T::lit(1e-5) * (T::one() + oracle.q1.sup_norm());
    let two_t = (T::lit(2.0) * step).as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profiled_max = 0.0f64;
    let mut unprofiled_min = f64::INFINITY;
    for _ in 0..directions {
        let h = normal_safn::<T>(ns, na, 1.0, &mut rng);
        let hn = h.sup_norm().as_f64();
        let (pu, bu) = profiled(&(&oracle.q1 + &(&h * step)))?;
        let (pd, bd) = profiled(&(&oracle.q1 - &(&h * step)))?;
        let dp = (&pu - &pd).sup_norm().as_f64() / two_t / hn;
        let du = (&bu - &bd).sup_norm().as_f64() / two_t / hn;
        profiled_max = if dp.is_nan() {
            f64::NAN
        } else {
            profiled_max.max(dp)
        };
        unprofiled_min = if du.is_nan() {
            f64::NAN
        } else {
            unprofiled_min.min(du)
        };
    }
    Ok(OrthogonalityMeasure {
        profiled_max,
        unprofiled_min,
        directions,
    })
}

pub fn check_orthogonality<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    directions: usize,
    seed: u64,
    correction_sign: T,
) -> Result<CertificateReport> {
    let m = orthogonality_measure(problem, oracle, directions, seed, correction_sign)?;
    let mut report = CertificateReport::new();
    report.push(Certificate::inequality(
        "orthogonality_profiled",
        m.profiled_max,
        0.0,
        1e-6,
        directions,
    ));
    report.push(Certificate::inequality(
        "orthogonality_unprofiled_contrast",
        0.1,
        m.unprofiled_min,
        0.0,
        directions,
    ));
    Ok(report)
}

/// Modular and coupled population routes agree.
pub fn check_population_equivalence<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    tol: f64,
) -> Result<CertificateReport> {
    let pb = with_oracle_shift(problem, oracle);
    let (q1, q2) = solve_coupled_population(&pb, T::lit(T::SOLVE_TOL))?;
    let mut report = CertificateReport::new();
    report.push(Certificate::identity(
        "population_equivalence_q1",
        (&q1 - &oracle.q1).sup_norm().as_f64(),
        0.0,
        tol,
        1,
    ));
    report.push(Certificate::identity(
        "population_equivalence_q2",
        (&q2 - &oracle.q2).sup_norm().as_f64(),
        0.0,
        tol,
        1,
    ));
    Ok(report)
}

/// Empirical operators the fitted tables were computed from.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalOperators<'a, T> {
    pub p1_hat: &'a Kernel<T>,
    pub p2_hat: &'a Kernel<T>,
    pub u_hat: &'a SAFn<T>,
}

/// Sup-norms of the linearized error channels of a fitted `(q^1, q^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderTerms {
    /// Gap in the exact source error decomposition.
    pub decomposition_error: f64,
    pub source_operator_term: f64,
    pub source_signal_term: f64,
    pub source_residual_term: f64,
    pub target_operator_term: f64,
    /// `(I - g2 P2^{pi2*})(q^2 - q2*)` minus all leading terms.
    pub modular_remainder: f64,
    /// Same, without the source residual channel.
    pub coupled_remainder: f64,
}

pub fn first_order_terms<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    ops: &EmpiricalOperators<'_, T>,
    q1_hat: &SAFn<T>,
    q2_hat: &SAFn<T>,
) -> Result<FirstOrderTerms> {
    let tol = T::lit(T::SOLVE_TOL);
    let mu = &problem.anchor.mu;
    let g1 = problem.source.gamma1;
    let g2 = problem.target.spec2.gamma;
    let terms = source_error_terms(problem, q1_hat, &oracle.q1, ops.p1_hat, ops.u_hat, tol)?;
    let signal = resolvent_apply(ops.p1_hat, mu, g1, &(ops.u_hat - &oracle.u_g), tol)?;
    let dq1 = q1_hat - &oracle.q1;
    let decomposition = &(&(&terms.operator_term + &signal) + &terms.residual_term) - &dq1;

    let c_op = problem.anchor.contrast(&terms.operator_term)?;
    let c_sig = problem.anchor.contrast(&signal)?;
    let c_res = problem.anchor.contrast(&terms.residual_term)?;
    let v2 = omega(&oracle.q2, &problem.target.spec2);
    let t3 = &(&ops.p2_hat.expect(&v2)? - &problem.target.p2.expect(&v2)?) * g2;
    let lhs = bellman_difference(&problem.target.p2, &oracle.pi2, g2, &(q2_hat - &oracle.q2))?;
    let coupled_lead = &(&c_op + &c_sig) + &t3;
    let modular_lead = &coupled_lead + &c_res;
    Ok(FirstOrderTerms {
        decomposition_error: decomposition.sup_norm().as_f64(),
        source_operator_term: c_op.sup_norm().as_f64(),
        source_signal_term: c_sig.sup_norm().as_f64(),
        source_residual_term: c_res.sup_norm().as_f64(),
        target_operator_term: t3.sup_norm().as_f64(),
        modular_remainder: (&lhs - &modular_lead).sup_norm().as_f64(),
        coupled_remainder: (&lhs - &coupled_lead).sup_norm().as_f64(),
    })
}

/// Exact source decomposition per output (hard) plus the remainder left by
/// each estimator's own leading terms (recorded).
pub fn check_first_order_channels<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    ops: &EmpiricalOperators<'_, T>,
    outputs: &[EstimatorOutput<T>],
) -> Result<CertificateReport> {
    let mut report = CertificateReport::new();
    let tol = 1e-9 * (1.0 + oracle.q1.sup_norm().as_f64());
    for out in outputs {
        let t = first_order_terms(problem, oracle, ops, &out.q1_hat, &out.q2_hat)?;
        let name = out.method.name();
        report.push(Certificate::identity(
            format!("source_decomposition_{name}"),
            t.decomposition_error,
            0.0,
            tol,
            1,
        ));
        let remainder = match out.method {
            Method::Modular => t.modular_remainder,
            Method::Coupled | Method::CoupledOffset => t.coupled_remainder,
        };
        report.push(Certificate::report(
            format!("first_order_remainder_{name}"),
            remainder,
        ));
        report.push(Certificate::report(
            format!("source_residual_channel_{name}"),
            t.source_residual_term,
        ));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Clipping level of the random policy pairs in the KL check.
    pub kl_eps: f64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            kl_eps: 0.05,
        }
    }
}

fn clipped_random_policy<T: Real>(
    ns: usize,
    na: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Policy<T> {
    let free = 1.0 - eps * na as f64;
    let mut probs = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let raw: Vec<f64> = (0..na)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (2.0 * z).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|w| T::lit(eps + free * w / total)));
    }
    Policy::normalized(ns, na, probs).expect("positive rows")
}

/// Regret conversion, resolvent stability, KL-to-L2 and softmax sensitivity.
pub fn check_bound_constants<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
    outputs: &[EstimatorOutput<T>],
    beta: f64,
    cfg: &BoundCheckConfig,
) -> Result<(BoundConstants, CertificateReport)> {
    let consts = bound_constants(problem, oracle, weights, beta)?;
    let (ns, na) = problem.shape();
    let (rho1, rho2) = (&weights.rho1, &weights.rho2);
    let spec2 = &problem.target.spec2;
    let tol = T::lit(T::SOLVE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CertificateReport::new();

    let regret_rhs = |q2: &SAFn<T>| consts.c_pi * (q2 - &oracle.q2).norm(rho2).as_f64();
    let mut fitted = Vec::new();
    for out in outputs {
        let regret = target_regret(problem, oracle, &out.pi2_hat, rho2)?;
        fitted.push((regret, regret_rhs(&out.q2_hat)));
    }
    if !fitted.is_empty() {
        report.push(worst_inequality("regret_bound_fitted", 1e-9, fitted));
    }
    let mut random = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let scale = log_uniform(&mut rng, 1e-3, 10.0);
        let q2 = &oracle.q2 + &normal_safn::<T>(ns, na, scale, &mut rng);
        let pi = softmax_policy(&q2, spec2);
        random.push((target_regret(problem, oracle, &pi, rho2)?, regret_rhs(&q2)));
    }
    report.push(worst_inequality("regret_bound_random", 1e-9, random));

    let kernels = [
        (
            "resolvent_stability_target",
            &problem.target.p2,
            &oracle.pi2,
            spec2.gamma,
            rho2,
            consts.kappa.kappa2,
        ),
        (
            "resolvent_stability_source",
            &problem.source.p1,
            &problem.anchor.mu,
            problem.source.gamma1,
            rho1,
            consts.kappa.kappa1,
        ),
    ];
    for (name, p, pi, gamma, rho, kappa) in kernels {
        let factor = kappa.sqrt() / (1.0 - gamma.as_f64());
        let mut rows = Vec::with_capacity(cfg.trials + 1);
        let c = SAFn::constant(ns, na, T::one());
        for i in 0..=cfg.trials {
            let f = if i == 0 {
                c.clone()
            } else {
                normal_safn::<T>(ns, na, 1.0, &mut rng)
            };
            let h = resolvent_apply(p, pi, gamma, &f, tol)?;
            let fnorm = f.norm(rho).as_f64();
            rows.push((h.norm(rho).as_f64(), factor * fnorm + 1e-12 * fnorm));
        }
        report.push(worst_inequality(name, 0.0, rows));
    }

    let eps = cfg.kl_eps;
    if !(eps > 0.0 && eps * na as f64 <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "kl_eps {eps} must be in (0, 1/|A|]"
        )));
    }
    let rho1_states = rho1.state_marginal();
    let mut kl_rows = Vec::with_capacity(cfg.trials + 1);
    for i in 0..=cfg.trials {
        let p = clipped_random_policy::<T>(ns, na, eps, &mut rng);
        let p_hat = if i == 0 {
            p.clone()
        } else {
            clipped_random_policy::<T>(ns, na, eps, &mut rng)
        };
        let mut lhs = 0.0;
        let mut kl = 0.0;
        for s in 0..ns {
            let w = rho1_states.get(s).as_f64();
            for a in 0..na {
                let pa = p.get(s, a).as_f64();
                let ph = p_hat.get(s, a).as_f64();
                let du = ph.ln() - pa.ln();
                lhs += w * pa * du * du;
                kl += w * pa * (pa / ph).ln();
            }
        }
        kl_rows.push((lhs, 2.0 / eps * kl));
    }
    report.push(worst_inequality("kl_to_l2", 1e-12, kl_rows));

    let tau = spec2.tau.as_f64();
    let lip = (na as f64).sqrt() / tau;
    let mut soft_rows = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let scale = log_uniform(&mut rng, 1e-3 * tau, 10.0 * tau);
        let q = normal_safn::<T>(ns, na, 1.0 + oracle.q2.sup_norm().as_f64(), &mut rng);
        let q_alt = &q + &normal_safn::<T>(ns, na, scale, &mut rng);
        let pa = softmax_policy(&q, spec2);
        let pb = softmax_policy(&q_alt, spec2);
        for s in 0..ns {
            let l1: f64 = (0..na)
                .map(|a| (pa.get(s, a) - pb.get(s, a)).as_f64().abs())
                .sum();
            let l2: f64 = (0..na)
                .map(|a| (q.get(s, a) - q_alt.get(s, a)).as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            soft_rows.push((l1, lip * l2));
        }
    }
    report.push(worst_inequality("softmax_sensitivity", 1e-12, soft_rows));
    Ok((consts, report))
}

/// Source reward recovery reproduces the anchor values: `mu r = g`.
pub fn check_anchor_normalization<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
) -> Result<Certificate> {
    let r = recover_reward(&oracle.q1, &problem.anchor)?;
    let mr = policy_average(&problem.anchor.mu, &r)?;
    let err = sfn_diff(&mr, &problem.anchor.g).sup_norm().as_f64();
    Ok(Certificate::identity(
        "anchor_normalization",
        err,
        0.0,
        1e-12 * (1.0 + oracle.q1.sup_norm().as_f64()),
        1,
    ))
}

/// Settings of the population certificate suite on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub beta: f64,
    pub trials: usize,
    pub directions: usize,
    pub seed: u64,
    pub kl_eps: f64,
    /// Sign applied to the profiling correction; anything but `1` is a mutation.
    pub correction_sign: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            beta: 100.0,
            trials: 100,
            directions: 50,
            seed: 0,
            kl_eps: 0.05,
            correction_sign: 1.0,
        }
    }
}

/// Every population-level certificate on one instance.
pub fn certify_instance<T: Real>(
    problem: &TransferProblem<T>,
    oracle: &Oracle<T>,
    weights: &EvalWeights<T>,
    cfg: &CertifyConfig,
) -> Result<(BoundConstants, CertificateReport)> {
    let mut report = CertificateReport::new();
    report.push(check_anchor_normalization(problem, oracle)?);
    report.extend(check_population_equivalence(problem, oracle, 1e-8)?);
    let duals = dual_certificates(problem, oracle, weights, T::lit(cfg.beta))?;
    report.extend(check_dual_adjoints(
        problem,
        oracle,
        weights,
        &duals,
        cfg.directions,
        cfg.seed,
    )?);
    report.extend(check_quadratic_growth(
        problem,
        oracle,
        weights,
        &duals,
        cfg.trials,
        cfg.seed ^ 1,
    )?);
    report.extend(check_orthogonality(
        problem,
        oracle,
        cfg.directions,
        cfg.seed ^ 2,
        T::lit(cfg.correction_sign),
    )?);
    let bcfg = BoundCheckConfig {
        trials: cfg.trials,
        seed: cfg.seed ^ 3,
        kl_eps: cfg.kl_eps,
    };
    let (consts, bounds) = check_bound_constants(problem, oracle, weights, &[], cfg.beta, &bcfg)?;
    report.extend(check_dual_bounds(&duals, &consts));
    report.extend(bounds);
    Ok((consts, report))
}
