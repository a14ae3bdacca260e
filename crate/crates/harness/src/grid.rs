//! The experiment grid: method x tau2 x source fraction x dataset draw x
//! optimizer seed.
//!
//! One job covers a (tau2, fraction, draw, optimizer seed) cell and fits every
//! configured method on the same datasets. Jobs write their rows to a file of
//! their own under `cells/`, and the files are concatenated in job order once
//! all workers finish, so `results.csv` does not depend on scheduling.
//! Wall-clock runtimes go to `timings.csv`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use reward_transfer::data::{
    empirical_model, mixture_policy, rollout, start_distribution, TransitionDataset,
    WeightedTransitions,
};
use reward_transfer::diagnostics::{evaluate_output, EvalWeights, MetricReport};
use reward_transfer::envgen::Environment;
use reward_transfer::estimators::{
    fit_coupled, fit_coupled_offset_from, fit_modular, EstimatorOutput, Method, OptimConfig,
    TransferData,
};
use reward_transfer::transfer::{oracle_transfer, Oracle, TransferProblem};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::seeds::{derive_seed, Stream};

pub const KEY_FIELDS: [&str; 7] = [
    "method",
    "tau2",
    "d1_fraction",
    "dataset_draw",
    "opt_seed",
    "beta",
    "status",
];
pub const TIMING_FIELDS: [&str; 6] = [
    "method",
    "tau2",
    "d1_fraction",
    "dataset_draw",
    "opt_seed",
    "runtime_s",
];
pub const STATUS_OK: &str = "ok";

pub fn result_header() -> Vec<&'static str> {
    KEY_FIELDS
        .iter()
        .chain(MetricReport::CSV_FIELDS.iter())
        .copied()
        .collect()
}

/// Per-temperature quantities shared read-only by all cells.
pub struct TauContext {
    pub tau2: f64,
    pub problem: TransferProblem<f64>,
    pub oracle: Oracle<f64>,
    pub weights: EvalWeights<f64>,
}

/// Datasets of one draw; each source fraction takes leading episodes of `d1`.
pub struct DrawData {
    pub d1: TransitionDataset,
    pub d2: TransitionDataset,
}

pub struct GridSetup {
    pub env: Environment<f64>,
    pub taus: Vec<TauContext>,
    pub draws: Vec<DrawData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey {
    pub tau_idx: usize,
    pub frac_idx: usize,
    pub draw: usize,
    pub opt_seed: usize,
}

#[derive(Debug, Clone)]
pub struct CellRow {
    pub method: Method,
    pub tau2: f64,
    pub d1_fraction: f64,
    pub dataset_draw: usize,
    pub opt_seed: usize,
    pub beta: f64,
    pub outcome: std::result::Result<MetricReport, String>,
    pub runtime_s: f64,
}

impl CellRow {
    pub fn record(&self) -> Vec<String> {
        let mut rec = vec![
            self.method.name().to_string(),
            self.tau2.to_string(),
            self.d1_fraction.to_string(),
            self.dataset_draw.to_string(),
            self.opt_seed.to_string(),
            self.beta.to_string(),
        ];
        match &self.outcome {
            Ok(m) => {
                rec.push(STATUS_OK.into());
                rec.extend(m.csv_values().iter().map(|v| v.to_string()));
            }
            Err(e) => {
                rec.push(format!("error: {e}"));
                rec.extend(MetricReport::CSV_FIELDS.iter().map(|_| String::new()));
            }
        }
        rec
    }

    pub fn timing_record(&self) -> Vec<String> {
        vec![
            self.method.name().to_string(),
            self.tau2.to_string(),
            self.d1_fraction.to_string(),
            self.dataset_draw.to_string(),
            self.opt_seed.to_string(),
            format!("{:.3}", self.runtime_s),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub results: PathBuf,
    pub timings: PathBuf,
    pub rows: usize,
    pub failures: usize,
}

/// Builds the environment, the per-temperature oracles and every dataset.
pub fn setup(cfg: &ExperimentConfig) -> Result<GridSetup> {
    cfg.validate()?;
    let env = cfg.env.build()?;
    let ns = env.p1.n_states();
    let rho0 = start_distribution::<f64>(ns, &env.start_states)?;
    let logging2 = mixture_policy(&env.expert, cfg.eps2)?;
    let mut taus = Vec::with_capacity(cfg.tau2.len());
    for &tau2 in &cfg.tau2 {
        let problem = env.transfer_problem(cfg.gamma1, cfg.gamma2, tau2, cfg.anchor_action)?;
        let oracle = oracle_transfer(&problem, cfg.env.tol)?;
        let problem = problem.with_shift(oracle.c);
        let weights = EvalWeights::logging(&problem, &rho0, &logging2, cfg.horizon)?;
        taus.push(TauContext {
            tau2,
            problem,
            oracle,
            weights,
        });
    }
    let draws = (0..cfg.n_dataset_draws)
        .map(|draw| {
            let d = draw as u64;
            let s1 = derive_seed(cfg.root_seed, Stream::SourceData, d, 0);
            let s2 = derive_seed(cfg.root_seed, Stream::TargetData, d, 0);
            Ok(DrawData {
                d1: rollout(
                    &env.p1,
                    &env.expert,
                    &rho0,
                    cfg.horizon,
                    cfg.d1_reference_episodes,
                    s1,
                )?,
                d2: rollout(&env.p2, &logging2, &rho0, cfg.horizon, cfg.d2_episodes, s2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridSetup { env, taus, draws })
}

/// Cells in output order.
pub fn cell_keys(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for tau_idx in 0..cfg.tau2.len() {
        for frac_idx in 0..cfg.d1_fractions.len() {
            for draw in 0..cfg.n_dataset_draws {
                for opt_seed in 0..cfg.n_opt_seeds {
                    keys.push(CellKey {
                        tau_idx,
                        frac_idx,
                        draw,
                        opt_seed,
                    });
                }
            }
        }
    }
    keys
}

/// Fits every configured method on one cell. Failures become rows with an
/// error status.
pub fn run_cell(cfg: &ExperimentConfig, setup: &GridSetup, key: CellKey) -> Vec<CellRow> {
    let tau = &setup.taus[key.tau_idx];
    let fraction = cfg.d1_fractions[key.frac_idx];
    let row = |method: Method, outcome, runtime_s| CellRow {
        method,
        tau2: tau.tau2,
        d1_fraction: fraction,
        dataset_draw: key.draw,
        opt_seed: key.opt_seed,
        beta: cfg.optim.beta,
        outcome,
        runtime_s,
    };
    let draw = &setup.draws[key.draw];
    let models = weighted_pair(draw, cfg.source_episodes(fraction));
    let (src, tgt) = match models {
        Ok(m) => m,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|&m| row(m, Err(e.to_string()), 0.0))
                .collect()
        }
    };
    let data = match TransferData::new(&tau.problem, &src, &tgt, cfg.behavior) {
        Ok(d) => d,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|&m| row(m, Err(e.to_string()), 0.0))
                .collect()
        }
    };
    let optim = OptimConfig {
        seed: derive_seed(
            cfg.root_seed,
            Stream::Optimizer,
            key.draw as u64,
            key.opt_seed as u64,
        ),
        ..cfg.optim.clone()
    };
    let evaluate = |fit: std::result::Result<&EstimatorOutput<f64>, String>| -> std::result::Result<MetricReport, String> {
        let report = evaluate_output(fit?, &tau.oracle, &tau.problem, &tau.weights).map_err(|e| e.to_string())?;
        if report.csv_values().iter().all(|v| v.is_finite()) {
            Ok(report)
        } else {
            Err("non-finite metrics".into())
        }
    };

    let needs_modular = cfg
        .methods
        .iter()
        .any(|m| matches!(m, Method::Modular | Method::CoupledOffset));
    let (modular, modular_time) = if needs_modular {
        let t = Instant::now();
        let fit = fit_modular(&data, &optim).map_err(|e| e.to_string());
        (fit, t.elapsed().as_secs_f64())
    } else {
        (Err("not fitted".to_string()), 0.0)
    };
    cfg.methods
        .iter()
        .map(|&method| match method {
            Method::Modular => row(
                method,
                evaluate(modular.as_ref().map_err(Clone::clone)),
                modular_time,
            ),
            Method::Coupled => {
                let t = Instant::now();
                let out = fit_coupled(&data, &optim).map_err(|e| e.to_string());
                row(
                    method,
                    evaluate(out.as_ref().map_err(Clone::clone)),
                    t.elapsed().as_secs_f64(),
                )
            }
            Method::CoupledOffset => {
                let t = Instant::now();
                let out = match &modular {
                    Ok(m) => fit_coupled_offset_from(&data, m, &optim).map_err(|e| e.to_string()),
                    Err(e) => Err(e.clone()),
                };
                let elapsed = modular_time + t.elapsed().as_secs_f64();
                row(
                    method,
                    evaluate(out.as_ref().map_err(Clone::clone)),
                    elapsed,
                )
            }
        })
        .collect()
}

fn weighted_pair(
    draw: &DrawData,
    source_episodes: usize,
) -> reward_transfer::Result<(WeightedTransitions<f64>, WeightedTransitions<f64>)> {
    let d1 = draw.d1.first_episodes(source_episodes);
    Ok((
        empirical_model::<f64>(&d1)?.weighted(),
        empirical_model::<f64>(&draw.d2)?.weighted(),
    ))
}

/// Runs the whole grid into `cfg.out_dir`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutput> {
    let setup = setup(cfg)?;
    let out_dir = &cfg.out_dir;
    let cells_dir = out_dir.join("cells");
    if cells_dir.exists() {
        std::fs::remove_dir_all(&cells_dir)?;
    }
    std::fs::create_dir_all(&cells_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    std::fs::write(out_dir.join("environment.json"), setup.env.to_json()?)?;

    let keys = cell_keys(cfg);
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let workers = cfg.n_workers().min(keys.len()).max(1);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| -> Result<()> {
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&key) = keys.get(i) else {
                            return Ok(());
                        };
                        let rows = run_cell(cfg, &setup, key);
                        write_cell(&cells_dir, i, &rows)?;
                        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                        eprintln!("cell {n}/{}", keys.len());
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().expect("grid worker panicked")?;
        }
        Ok(())
    })?;

    let results = out_dir.join("results.csv");
    let timings = out_dir.join("timings.csv");
    let (rows, failures) = merge_cells(&cells_dir, keys.len(), &results, &timings)?;
    Ok(GridOutput {
        results,
        timings,
        rows,
        failures,
    })
}

fn cell_path(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("cell_{i:06}.{ext}"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_cell(dir: &Path, i: usize, rows: &[CellRow]) -> Result<()> {
    let mut res = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let mut tim = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for r in rows {
        res.write_record(r.record())?;
        tim.write_record(r.timing_record())?;
    }
    write_atomic(
        &cell_path(dir, i, "csv"),
        &res.into_inner().map_err(|e| e.into_error())?,
    )?;
    write_atomic(
        &cell_path(dir, i, "timing"),
        &tim.into_inner().map_err(|e| e.into_error())?,
    )?;
    Ok(())
}

fn merge_cells(dir: &Path, n: usize, results: &Path, timings: &Path) -> Result<(usize, usize)> {
    let mut res = csv::Writer::from_writer(Vec::new());
    res.write_record(result_header())?;
    let mut tim = csv::Writer::from_writer(Vec::new());
    tim.write_record(TIMING_FIELDS)?;
    let (mut rows, mut failures) = (0, 0);
    for i in 0..n {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(cell_path(dir, i, "csv"))?;
        for rec in rdr.records() {
            let rec = rec?;
            rows += 1;
            if rec.get(KEY_FIELDS.len() - 1) != Some(STATUS_OK) {
                failures += 1;
            }
            res.write_record(&rec)?;
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(cell_path(dir, i, "timing"))?;
        for rec in rdr.records() {
            tim.write_record(&rec?)?;
        }
    }
    write_atomic(results, &res.into_inner().map_err(|e| e.into_error())?)?;
    write_atomic(timings, &tim.into_inner().map_err(|e| e.into_error())?)?;
    Ok((rows, failures))
}

/// Parsed row of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub tau2: f64,
    pub d1_fraction: f64,
    pub dataset_draw: usize,
    pub opt_seed: usize,
    pub beta: f64,
    pub status: String,
    /// Values in [`MetricReport::CSV_FIELDS`] order; `None` for failed rows.
    pub metrics: Option<[f64; 8]>,
}

impl ResultRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        let i = MetricReport::CSV_FIELDS.iter().position(|f| *f == name)?;
        self.metrics.map(|m| m[i])
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != result_header() {
        return Err(crate::error::HarnessError::Summary(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let bad =
        |what: &str| crate::error::HarnessError::Summary(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(KEY_FIELDS[i]));
        let status = rec[6].to_string();
        let metrics = if status == STATUS_OK {
            let mut m = [0.0; 8];
            for (j, slot) in m.iter_mut().enumerate() {
                *slot = rec[KEY_FIELDS.len() + j]
                    .parse()
                    .map_err(|_| bad(MetricReport::CSV_FIELDS[j]))?;
            }
            Some(m)
        } else {
            None
        };
        out.push(ResultRow {
            method: rec[0].parse().map_err(|_| bad("method"))?,
            tau2: num(1)?,
            d1_fraction: num(2)?,
            dataset_draw: rec[3].parse().map_err(|_| bad("dataset_draw"))?,
            opt_seed: rec[4].parse().map_err(|_| bad("opt_seed"))?,
            beta: num(5)?,
            status,
            metrics,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out_dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.env.n_states = 4;
        cfg.env.n_actions = 2;
        cfg.env.support_degree = 2;
        cfg.env.expert.tau_b = Some(1.0);
        cfg.d1_fractions = vec![0.5, 1.0];
        cfg.d1_reference_episodes = 20;
        cfg.d2_episodes = 20;
        cfg.horizon = 5;
        cfg.n_dataset_draws = 2;
        cfg.n_opt_seeds = 1;
        cfg.optim.source_rounds = 50;
        cfg.optim.target_rounds = 50;
        cfg.optim.joint_rounds = 50;
        cfg.optim.offset_rounds = 50;
        cfg.optim.checkpoint_interval = 25;
        cfg.out_dir = out_dir.to_path_buf();
        cfg
    }

    #[test]
    fn one_cell_gives_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.methods = vec![Method::Coupled];
        cfg.d1_fractions = vec![1.0];
        cfg.n_dataset_draws = 1;
        let out = run_grid(&cfg).unwrap();
        assert_eq!(out.rows, 1);
        let rows = read_results(&out.results).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].status, STATUS_OK);
    }

    #[test]
    fn rows_follow_cell_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let out = run_grid(&cfg).unwrap();
        let rows = read_results(&out.results).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        assert_eq!(out.failures, 0);
        let order: Vec<(f64, usize, Method)> = rows
            .iter()
            .map(|r| (r.d1_fraction, r.dataset_draw, r.method))
            .collect();
        assert_eq!(order[0], (0.5, 0, Method::Modular));
        assert_eq!(order[3], (0.5, 1, Method::Modular));
        assert_eq!(order[11], (1.0, 1, Method::CoupledOffset));
        assert!(rows
            .iter()
            .all(|r| r.metrics.unwrap().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn rerun_is_bitwise_identical_and_workers_do_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(&dir.path().join("a"));
        let first = std::fs::read(run_grid(&cfg).unwrap().results).unwrap();
        cfg.out_dir = dir.path().join("b");
        cfg.workers = 3;
        let second = std::fs::read(run_grid(&cfg).unwrap().results).unwrap();
        assert_eq!(first, second);
        cfg.root_seed = 1;
        cfg.out_dir = dir.path().join("c");
        let third = std::fs::read(run_grid(&cfg).unwrap().results).unwrap();
        assert_ne!(first, third);
    }

    #[test]
    fn failures_are_recorded_not_written_as_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.n_dataset_draws = 1;
        cfg.d1_fractions = vec![1.0];
        cfg.optim.lr_q = 1e300;
        cfg.optim.lr_l = 1e300;
        cfg.optim.lr_final_ratio = 1.0;
        let out = run_grid(&cfg).unwrap();
        let text = std::fs::read_to_string(&out.results).unwrap();
        assert!(!text.to_lowercase().contains("nan"));
        assert_eq!(out.failures, 3);
        let rows = read_results(&out.results).unwrap();
        for r in rows.iter().filter(|r| r.status != STATUS_OK) {
            assert!(r.status.starts_with("error"));
            assert!(r.metrics.is_none());
        }
    }

    #[test]
    fn methods_in_a_cell_see_the_same_data() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let s = setup(&cfg).unwrap();
        let (a1, a2) = weighted_pair(&s.draws[0], 10).unwrap();
        let (b1, b2) = weighted_pair(&s.draws[0], 10).unwrap();
        assert_eq!(format!("{a1:?}{a2:?}"), format!("{b1:?}{b2:?}"));
        let again = setup(&cfg).unwrap();
        assert_eq!(s.draws[1].d1.samples, again.draws[1].d1.samples);
        assert_ne!(s.draws[0].d1.samples, s.draws[1].d1.samples);
    }
}
