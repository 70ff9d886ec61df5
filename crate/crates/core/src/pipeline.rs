//! The FL-pipeline utility oracle: every group trains a fresh estimator for
//! `E` rounds on its members' data and reports per-user test NMSE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channel::Scenario;
use crate::coalition::UtilityOracle;
use crate::estimator::{evaluate_nmse, LayeredModel, ModelSpec, TrainSet};
use crate::federation::{
    run_fl_round, FlGroup, RoundConfig, RoundReport, TransferContext, WeightStrategy,
};
use crate::seed::{derive_seed, rng_for, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelSpec,
    /// `E`, FL rounds per group evaluation.
    pub rounds: usize,
    pub learning_rate: f64,
    pub local_steps: usize,
    /// Mini-batch size for local steps; full batch when absent.
    pub batch_size: Option<usize>,
    pub strategy: WeightStrategy,
    /// `L` in the distance weight, meters.
    pub reference_distance: f64,
    /// `Δ` in the RSRP window, dB.
    pub power_band_db: f64,
    /// Training samples per held-out test sample.
    pub train_ratio: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::linear(),
            rounds: 20,
            learning_rate: 1e-3,
            local_steps: 5,
            batch_size: Some(32),
            strategy: WeightStrategy::Plain,
            reference_distance: 100.0,
            power_band_db: 3.0,
            train_ratio: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_ratio == 0 {
            return Err(Error::InvalidArgument(
                "train_ratio must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GroupOutcome {
    pub model: LayeredModel,
    pub reports: Vec<RoundReport>,
    /// Unclipped linear test NMSE per member, in member order.
    pub errors: Vec<f64>,
}

pub struct FlPipelineOracle {
    cfg: PipelineConfig,
    seed: u64,
    pilot_length: usize,
    target_dim: usize,
    train: BTreeMap<usize, TrainSet>,
    test: Vec<TrainSet>,
    positions: BTreeMap<usize, [f64; 2]>,
    /// Mean received pilot power in dB.
    powers: BTreeMap<usize, f64>,
}

impl FlPipelineOracle {
    pub fn from_scenario(scenario: &Scenario, cfg: PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut train = BTreeMap::new();
        let mut test = Vec::with_capacity(scenario.users.len());
        let mut positions = BTreeMap::new();
        let mut powers = BTreeMap::new();
        for u in &scenario.users {
            let (tr, te) = u.dataset.split(cfg.train_ratio);
            if tr.is_empty() || te.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "user {} has too few samples for a train/test split",
                    u.id
                )));
            }
            powers.insert(
                u.id,
                10.0 * u.dataset.mean_received_power().max(1e-300).log10(),
            );
            positions.insert(u.id, u.position);
            train.insert(u.id, TrainSet::from_dataset(&tr));
            test.push(TrainSet::from_dataset(&te));
        }
        Ok(Self {
            cfg,
            seed,
            pilot_length: scenario.config.pilot_length,
            target_dim: scenario.config.target_dim(),
            train,
            test,
            positions,
            powers,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Fresh model with the same initial parameters for every group.
    pub fn initial_model(&self) -> Result<LayeredModel> {
        let mut rng = rng_for(self.seed, stream::MODEL_INIT, 0);
        self.cfg
            .model
            .build(self.pilot_length, self.target_dim, &mut rng)
    }

    pub fn test_set(&self, user: usize) -> Result<&TrainSet> {
        self.test.get(user).ok_or(Error::MissingMember(user))
    }

    pub fn context(&self, members: &[usize]) -> Result<(usize, TransferContext)> {
        TransferContext::around_best_center(
            members,
            &self.positions,
            &self.powers,
            self.cfg.reference_distance,
            self.cfg.power_band_db,
        )
    }

    /// Trains one group for `E` rounds under `strategy`.
    pub fn train_group_with(
        &self,
        members: &[usize],
        strategy: WeightStrategy,
    ) -> Result<GroupOutcome> {
        let (center, ctx) = self.context(members)?;
        let group = FlGroup::new(0, members.to_vec(), center)?;
        let mut model = self.initial_model()?;
        let mut reports = Vec::with_capacity(self.cfg.rounds);
        for round in 0..self.cfg.rounds {
            let rc = RoundConfig {
                learning_rate: self.cfg.learning_rate,
                local_steps: self.cfg.local_steps,
                batch_size: self.cfg.batch_size.unwrap_or(usize::MAX),
                seed: derive_seed(self.seed, stream::TRAINING, round as u64),
            };
            let (next, report) = run_fl_round(&group, &model, &self.train, strategy, &ctx, &rc)?;
            model = next;
            reports.push(report);
        }
        let errors = group
            .members
            .iter()
            .map(|&m| evaluate_nmse(&model, self.test_set(m)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupOutcome {
            model,
            reports,
            errors,
        })
    }

    pub fn train_group(&self, members: &[usize]) -> Result<GroupOutcome> {
        self.train_group_with(members, self.cfg.strategy)
    }
}

impl UtilityOracle for FlPipelineOracle {
    fn users(&self) -> usize {
        self.test.len()
    }

    fn group_errors(&self, group: &[usize]) -> Result<Vec<f64>> {
        let mut sorted = group.to_vec();
        sorted.sort_unstable();
        let out = self.train_group(&sorted)?;
        let by_user: BTreeMap<usize, f64> = sorted.iter().copied().zip(out.errors).collect();
        Ok(group.iter().map(|m| by_user[m].clamp(0.0, 1.0)).collect())
    }
}
