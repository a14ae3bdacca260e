//! Population certificates on the configured environment and on small random
//! instances.

use reward_transfer::data::{mixture_policy, start_distribution};
use reward_transfer::diagnostics::{
    certify_instance, BoundConstants, CertificateReport, CertifyConfig, EvalWeights,
};
use reward_transfer::envgen::random_transfer_problem;
use reward_transfer::mdp::SFn;
use reward_transfer::transfer::{oracle_transfer, TransferProblem};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

/// States and actions of the random property instances.
pub const PROPERTY_SHAPE: (usize, usize) = (4, 2);

#[derive(Debug, Clone, Serialize)]
pub struct InstanceConstants {
    pub instance: String,
    pub constants: BoundConstants,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyOutcome {
    pub constants: Vec<InstanceConstants>,
    pub report: CertificateReport,
}

impl CertifyOutcome {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Certifies every `tau2` of the configured environment plus
/// `cfg.certify.property_instances` random instances. A `correction_sign`
/// other than `1` corrupts the profiled residual on purpose.
pub fn certify(cfg: &ExperimentConfig, correction_sign: f64) -> Result<CertifyOutcome> {
    cfg.validate()?;
    let ccfg = CertifyConfig {
        beta: cfg.certify.beta,
        trials: cfg.certify.trials,
        directions: cfg.certify.directions,
        seed: cfg.root_seed,
        kl_eps: cfg.certify.kl_eps,
        correction_sign,
    };
    let mut outcome = CertifyOutcome {
        constants: Vec::new(),
        report: CertificateReport::new(),
    };
    let env = cfg.env.build()?;
    let rho0 = start_distribution::<f64>(env.p1.n_states(), &env.start_states)?;
    for &tau2 in &cfg.tau2 {
        let problem = env.transfer_problem(cfg.gamma1, cfg.gamma2, tau2, cfg.anchor_action)?;
        run_instance(
            &mut outcome,
            &format!("env_tau{tau2}"),
            problem,
            &rho0,
            cfg,
            &ccfg,
        )?;
    }
    let (ns, na) = PROPERTY_SHAPE;
    let rho0 = SFn::constant(ns, 1.0 / ns as f64);
    for i in 0..cfg.certify.property_instances {
        let seed = cfg.root_seed.wrapping_add(i as u64);
        let problem =
            random_transfer_problem::<f64>(ns, na, cfg.gamma1, cfg.gamma2, cfg.tau2[0], seed)?;
        run_instance(
            &mut outcome,
            &format!("prop{i}"),
            problem,
            &rho0,
            cfg,
            &ccfg,
        )?;
    }
    Ok(outcome)
}

fn run_instance(
    outcome: &mut CertifyOutcome,
    name: &str,
    problem: TransferProblem<f64>,
    rho0: &SFn<f64>,
    cfg: &ExperimentConfig,
    ccfg: &CertifyConfig,
) -> Result<()> {
    let oracle = oracle_transfer(&problem, cfg.env.tol)?;
    let problem = problem.with_shift(oracle.c);
    let logging = mixture_policy(&problem.source.pi_b1, cfg.eps2)?;
    let weights = EvalWeights::logging(&problem, rho0, &logging, cfg.horizon)?;
    let (constants, report) = certify_instance(&problem, &oracle, &weights, ccfg)?;
    outcome.constants.push(InstanceConstants {
        instance: name.to_string(),
        constants,
    });
    outcome.report.extend(report.prefixed(&format!("{name}/")));
    Ok(())
}
