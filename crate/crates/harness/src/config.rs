//! Experiment configuration.
//!
//! A config file is TOML. It is merged key by key over one of the built-in
//! profiles, so a file only needs the entries it changes; keys the schema
//! does not know are rejected.

use std::path::{Path, PathBuf};

use reward_transfer::envgen::{EnvConfig, Environment, ExpertConfig, ShiftSetting};
use reward_transfer::estimators::{BehaviorInput, Method, OptimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 32 states, smaller datasets, one optimizer seed per draw.
    Desk,
    /// Full dataset sizes and the 10 x 10 seed grid.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub n_states: usize,
    pub n_actions: usize,
    pub support_degree: usize,
    pub treatment_tilt: f64,
    pub seed: u64,
    pub start_states: Vec<usize>,
    pub max_attempts: usize,
    pub shift: ShiftSetting,
    pub expert: ExpertConfig,
    pub tol: f64,
}

impl EnvSection {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            n_states: self.n_states,
            n_actions: self.n_actions,
            support_degree: self.support_degree,
            treatment_tilt: self.treatment_tilt,
            seed: self.seed,
            start_states: self.start_states.clone(),
            max_attempts: self.max_attempts,
        }
    }

    pub fn build(&self) -> Result<Environment<f64>> {
        Ok(Environment::build(
            &self.env_config(),
            self.shift,
            &self.expert,
            self.tol,
        )?)
    }
}

/// Settings of the `certify` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    pub beta: f64,
    pub trials: usize,
    pub directions: usize,
    pub kl_eps: f64,
    /// Extra random 4-state instances certified alongside the configured one.
    pub property_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau2: Vec<f64>,
    pub d1_fractions: Vec<f64>,
    pub d1_reference_episodes: usize,
    pub d2_episodes: usize,
    pub horizon: usize,
    /// Uniform mixing weight of the target logging policy.
    pub eps2: f64,
    pub behavior: BehaviorInput,
    pub anchor_action: usize,
    pub methods: Vec<Method>,
    pub optim: OptimConfig,
    pub n_dataset_draws: usize,
    pub n_opt_seeds: usize,
    pub root_seed: u64,
    /// Worker threads for grid cells; `0` uses every available core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub certify: CertifySection,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        Self {
            env: EnvSection {
                n_states: 32,
                n_actions: 8,
                support_degree: 4,
                treatment_tilt: 1.0,
                seed: 7,
                start_states: Vec::new(),
                max_attempts: 100,
                shift: ShiftSetting::Mild,
                expert: ExpertConfig::default(),
                tol: 1e-10,
            },
            gamma1: 0.95,
            gamma2: 0.975,
            tau2: vec![0.05],
            d1_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            d1_reference_episodes: 1250,
            d2_episodes: 2500,
            horizon: 20,
            eps2: 0.2,
            behavior: BehaviorInput::Estimated { eps_clip: 1e-3 },
            anchor_action: 0,
            methods: Method::ALL.to_vec(),
            optim: OptimConfig {
                lr_q: 0.1,
                lr_l: 1.0,
                lr_final_ratio: 1e-3,
                ..OptimConfig::default()
            },
            n_dataset_draws: 10,
            n_opt_seeds: 1,
            root_seed: 0,
            workers: 1,
            out_dir: PathBuf::from("results/desk"),
            certify: CertifySection {
                beta: 100.0,
                trials: 100,
                directions: 50,
                kl_eps: 0.05,
                property_instances: 10,
            },
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            env: EnvSection {
                n_states: 128,
                ..desk.env
            },
            tau2: vec![0.05, 0.2, 0.4],
            d1_reference_episodes: 12_500,
            d2_episodes: 25_000,
            optim: OptimConfig::default(),
            n_opt_seeds: 10,
            workers: 0,
            out_dir: PathBuf::from("results/paper"),
            ..desk
        }
    }

    /// Reads `path` over the profile named by `profile`, else by a top-level
    /// `profile` key in the file, else the desk profile.
    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, profile)
    }

    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let named = match table.remove("profile") {
            Some(v) => Some(v.try_into::<Profile>()?),
            None => None,
        };
        let base = Self::profile(profile.or(named).unwrap_or(Profile::Desk));
        let mut merged = toml::Value::try_from(&base)?;
        merge(&mut merged, toml::Value::Table(table));
        let cfg: Self = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        self.env.env_config().validate()?;
        self.optim.validate()?;
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(0.0..1.0).contains(&g) {
                return bad(format!("{name} = {g} outside [0, 1)"));
            }
        }
        if self.tau2.is_empty() || self.d1_fractions.is_empty() || self.methods.is_empty() {
            return bad("tau2, d1_fractions and methods must be nonempty".into());
        }
        if let Some(t) = self.tau2.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return bad(format!("temperature {t} must be positive"));
        }
        if let Some(f) = self
            .d1_fractions
            .iter()
            .find(|f| !(**f > 0.0 && **f <= 1.0))
        {
            return bad(format!("source fraction {f} outside (0, 1]"));
        }
        if self
            .d1_fractions
            .iter()
            .any(|f| self.source_episodes(*f) == 0)
        {
            return bad("a source fraction selects no episodes".into());
        }
        if self.d1_reference_episodes == 0 || self.d2_episodes == 0 || self.horizon == 0 {
            return bad("episode counts and horizon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eps2) {
            return bad(format!("eps2 = {} outside [0, 1]", self.eps2));
        }
        if self.anchor_action >= self.env.n_actions {
            return bad(format!("anchor action {} out of range", self.anchor_action));
        }
        if self.n_dataset_draws == 0 || self.n_opt_seeds == 0 {
            return bad("n_dataset_draws and n_opt_seeds must be positive".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods are listed twice".into());
        }
        Ok(())
    }

    /// Leading episodes of the reference source dataset used at `fraction`.
    pub fn source_episodes(&self, fraction: f64) -> usize {
        (fraction * self.d1_reference_episodes as f64).round() as usize
    }

    pub fn n_workers(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

// Tables carrying a `kind` tag select an enum variant and replace the base
// value whole.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_profile() {
        assert_eq!(
            ExperimentConfig::from_toml_str("", None).unwrap(),
            ExperimentConfig::desk()
        );
    }

    #[test]
    fn profiles_round_trip() {
        for p in [Profile::Desk, Profile::Paper] {
            let cfg = ExperimentConfig::profile(p);
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(
                ExperimentConfig::from_toml_str(&text, Some(Profile::Desk)).unwrap(),
                cfg
            );
        }
    }

    #[test]
    fn nested_keys_override_only_themselves() {
        let cfg = ExperimentConfig::from_toml_str(
            "profile = \"paper\"\ntau2 = [0.1]\n[env]\nn_states = 16\n[optim]\nbeta = 5.0\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.tau2, vec![0.1]);
        assert_eq!(cfg.env.n_states, 16);
        assert_eq!(cfg.env.support_degree, 4);
        assert_eq!(cfg.optim.beta, 5.0);
        assert_eq!(cfg.optim.lr_q, OptimConfig::default().lr_q);
        assert_eq!(cfg.d2_episodes, 25_000);
    }

    #[test]
    fn command_line_profile_wins() {
        let cfg =
            ExperimentConfig::from_toml_str("profile = \"paper\"", Some(Profile::Desk)).unwrap();
        assert_eq!(cfg.d2_episodes, ExperimentConfig::desk().d2_episodes);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("gamma3 = 0.5", None).is_err());
        assert!(ExperimentConfig::from_toml_str("[env]\nstates = 5", None).is_err());
        assert!(ExperimentConfig::from_toml_str("[optim]\nlearning_rate = 5", None).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "tau2 = [0.0]",
            "tau2 = []",
            "d1_fractions = [1.5]",
            "d1_fractions = [0.0]",
            "gamma2 = 1.0",
            "methods = [\"modular\", \"modular\"]",
            "anchor_action = 8",
            "n_opt_seeds = 0",
        ] {
            assert!(
                ExperimentConfig::from_toml_str(text, None).is_err(),
                "{text}"
            );
        }
    }

    #[test]
    fn method_and_behavior_syntax() {
        let cfg = ExperimentConfig::from_toml_str(
            "methods = [\"coupled_offset\"]\nbehavior = \"known\"\n[env.shift]\nkind = \"target_tv\"\nvalue = 0.05\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::CoupledOffset]);
        assert_eq!(cfg.behavior, BehaviorInput::Known);
        assert_eq!(cfg.env.shift, ShiftSetting::TargetTv(0.05));
        let cfg = ExperimentConfig::from_toml_str(
            "[env.shift]\nkind = \"magnitude\"\nvalue = 0.1\n",
            Some(Profile::Desk),
        )
        .unwrap();
        assert_eq!(cfg.env.shift, ShiftSetting::Magnitude(0.1));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap(), None).unwrap();
        assert_eq!(back, cfg);
    }
}
