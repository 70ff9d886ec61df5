//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ScenarioConfig;
use crate::coalition::{GameConfig, SwitchOrder, UtilityConstant};
use crate::drl::CfflConfig;
use crate::estimator::ModelSpec;
use crate::hfl::{DistillTarget, HflConfig, TrainSchedule};
use crate::pipeline::PipelineConfig;
use crate::{Error, Result};

/// Where per-user coalition errors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// `1 −` mean channel correlation to the coalition peers.
    Surrogate,
    /// Train every group with FL and measure test NMSE.
    Fl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameBackend {
    Switch,
    Dqn,
    Qmix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fl")]
    Fl,
    #[serde(rename = "fl+dis")]
    FlDis,
    #[serde(rename = "fl+rsrp+dis")]
    FlRsrpDis,
    #[serde(rename = "solo")]
    Solo,
    /// Potential-maximizing partition of the correlation game.
    #[serde(rename = "coalition")]
    Coalition,
    /// Best partition found by the RL coalition learner.
    #[serde(rename = "cffl")]
    Cffl,
    #[serde(rename = "hfl")]
    Hfl,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Fl,
        Strategy::FlDis,
        Strategy::FlRsrpDis,
        Strategy::Solo,
        Strategy::Coalition,
        Strategy::Cffl,
        Strategy::Hfl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Fl => "fl",
            Strategy::FlDis => "fl+dis",
            Strategy::FlRsrpDis => "fl+rsrp+dis",
            Strategy::Solo => "solo",
            Strategy::Coalition => "coalition",
            Strategy::Cffl => "cffl",
            Strategy::Hfl => "hfl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPartition {
    Solo,
    Grand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameSettings {
    /// Utility constant `A`; the coalition size when absent.
    pub fixed_constant: Option<f64>,
    /// Weight payoff shares by dataset size instead of equally.
    pub volume_by_samples: bool,
    pub solo_error: f64,
    /// Samples per user entering the correlation estimate.
    pub correlation_samples: usize,
    pub order: SwitchOrder,
    pub initial: InitialPartition,
    pub tolerance: f64,
}

impl Default for GameSettings {
    fn default() -> Self {
        Self {
            fixed_constant: None,
            volume_by_samples: false,
            solo_error: crate::coalition::SurrogateOracle::DEFAULT_SOLO_ERROR,
            correlation_samples: 400,
            order: SwitchOrder::RoundRobin,
            initial: InitialPartition::Grand,
            tolerance: 1e-12,
        }
    }
}

impl GameSettings {
    pub fn game_config(&self, sample_counts: &[usize]) -> Result<GameConfig> {
        let constant = match self.fixed_constant {
            Some(a) => UtilityConstant::Fixed(a),
            None => UtilityConstant::GroupSize,
        };
        let volumes = if self.volume_by_samples {
            sample_counts.iter().map(|&n| n as f64).collect()
        } else {
            vec![1.0; sample_counts.len()]
        };
        let mut cfg = GameConfig::new(constant, volumes)?;
        cfg.tolerance = self.tolerance;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HflSettings {
    /// Run HFL instead of plain FL for the `train` verb.
    pub enabled: bool,
    pub local_model: ModelSpec,
    pub global_model: ModelSpec,
    pub local: TrainSchedule,
    pub server: TrainSchedule,
    pub distill: TrainSchedule,
    pub target: DistillTarget,
}

impl Default for HflSettings {
    fn default() -> Self {
        let d = HflConfig::default();
        Self {
            enabled: false,
            local_model: ModelSpec::local(),
            global_model: ModelSpec::global(),
            local: d.local,
            server: d.server,
            distill: d.distill,
            target: d.target,
        }
    }
}

impl HflSettings {
    /// Schedules with every seed replaced by `seed`.
    pub fn hfl_config(&self, seed: u64) -> HflConfig {
        let with = |s: &TrainSchedule| TrainSchedule { seed, ..s.clone() };
        HflConfig {
            local: with(&self.local),
            server: with(&self.server),
            distill: with(&self.distill),
            target: self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSettings {
    pub strategies: Vec<Strategy>,
    pub seeds: usize,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            strategies: vec![
                Strategy::Fl,
                Strategy::FlDis,
                Strategy::FlRsrpDis,
                Strategy::Coalition,
            ],
            seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub snr_db: Vec<f64>,
    pub oracle: OracleKind,
    pub backend: GameBackend,
    pub scenario: ScenarioConfig,
    pub pipeline: PipelineConfig,
    pub hfl: HflSettings,
    pub game: GameSettings,
    /// `rounds` and `model_params` are taken from the pipeline at run time.
    pub cffl: CfflConfig,
    pub compare: CompareSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            snr_db: vec![0.0, 5.0, 10.0, 15.0],
            oracle: OracleKind::Surrogate,
            backend: GameBackend::Switch,
            scenario: ScenarioConfig::default(),
            pipeline: PipelineConfig::default(),
            hfl: HflSettings::default(),
            game: GameSettings::default(),
            cffl: CfflConfig::default(),
            compare: CompareSettings::default(),
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Parses and validates. Parse errors carry the line, column and key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit integer"));
        }
        self.scenario
            .validate()
            .map_err(|e| invalid("scenario", e))?;
        if self.scenario.samples_per_user < 2 {
            return Err(invalid("scenario.samples_per_user", "must be at least 2"));
        }
        if self.snr_db.is_empty() {
            return Err(invalid("snr_db", "must list at least one value"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(invalid("snr_db", "values must be finite"));
        }
        self.pipeline
            .validate()
            .map_err(|e| invalid("pipeline", e))?;
        if self.pipeline.rounds == 0 {
            return Err(invalid("pipeline.rounds", "must be positive"));
        }
        if self.cffl.epochs == 0 {
            return Err(invalid("cffl.epochs", "must be positive"));
        }
        if self.cffl.max_coalitions == 0 {
            return Err(invalid("cffl.max_coalitions", "must be positive"));
        }
        if self.cffl.batch_size == 0 || self.cffl.replay_capacity < self.cffl.batch_size {
            return Err(invalid(
                "cffl.batch_size",
                "must be positive and fit in the replay buffer",
            ));
        }
        if !(0.0..=1.0).contains(&self.cffl.eps_start) || !(0.0..=1.0).contains(&self.cffl.eps_end)
        {
            return Err(invalid(
                "cffl.eps_start",
                "exploration rates must lie in [0, 1]",
            ));
        }
        if self.game.correlation_samples == 0 {
            return Err(invalid("game.correlation_samples", "must be positive"));
        }
        if let Some(a) = self.game.fixed_constant {
            if !(a > 0.0) {
                return Err(invalid("game.fixed_constant", "must be positive"));
            }
        }
        if self.compare.seeds == 0 {
            return Err(invalid("compare.seeds", "must be positive"));
        }
        if self.hfl.global_model.shared_blocks != self.hfl.local_model.shared_blocks {
            return Err(invalid(
                "hfl.global_model.shared_blocks",
                "must match the local model",
            ));
        }
        Ok(())
    }

    /// Learner settings with the traffic fields filled from the pipeline.
    pub fn cffl_config(&self, model_params: usize) -> CfflConfig {
        CfflConfig {
            rounds: self.pipeline.rounds,
            model_params,
            ..self.cffl.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 9\nbackend = \"qmix\"\n[scenario]\nusers = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.backend, GameBackend::Qmix);
        assert_eq!(cfg.scenario.users, 4);
        assert_eq!(
            cfg.scenario.pilot_length,
            ScenarioConfig::default().pilot_length
        );
    }

    #[test]
    fn unknown_key_reports_line_and_field() {
        let err =
            ExperimentConfig::from_toml_str("seed = 1\n\n[scenario]\nuserz = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("userz"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[scenario]\nusers = 0\n").unwrap_err();
        assert!(err.to_string().contains("users"), "{err}");
        let err = ExperimentConfig::from_toml_str("snr_db = []\n").unwrap_err();
        assert!(err.to_string().contains("snr_db"), "{err}");
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
        }
        let cfg =
            ExperimentConfig::from_toml_str("[compare]\nstrategies = [\"fl+dis\", \"hfl\"]\n")
                .unwrap();
        assert_eq!(cfg.compare.strategies, vec![Strategy::FlDis, Strategy::Hfl]);
        assert!(Strategy::parse("fedavg").is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
