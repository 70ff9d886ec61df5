//! The outer coalition-formation loop: pick a joint coalition choice, let
//! every group train (or ask a surrogate), reward the mean error, learn.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    dqn_select, dqn_train_step, epsilon, mean_clipped_error, reward, AgentObservation, DqnAgent,
    QmixConfig, QmixLearner, ReplayBuffer, RlState, Transition,
};
use crate::coalition::{Game, GameConfig, Partition, UtilityOracle};
use crate::seed::{rng_for, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Dqn,
    Qmix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfflConfig {
    /// `T`.
    pub epochs: usize,
    /// `E`, FL rounds per epoch (used for traffic accounting; the oracle
    /// runs them).
    pub rounds: usize,
    pub max_coalitions: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync: usize,
    pub hidden: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_fraction: f64,
    pub updates_per_epoch: usize,
    /// Parameters per exchanged model.
    pub model_params: usize,
    /// Observation payload `O` per user.
    pub observation: usize,
    pub qmix: QmixConfig,
}

impl Default for CfflConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            rounds: 5,
            max_coalitions: 3,
            gamma: 0.9,
            learning_rate: 1e-2,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync: 50,
            hidden: 64,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.6,
            updates_per_epoch: 8,
            model_params: 0,
            observation: 0,
            qmix: QmixConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub action: Vec<usize>,
    pub reward: f64,
    pub mean_error: f64,
    pub potential: f64,
    pub errors: Vec<f64>,
    pub epsilon: f64,
    pub loss: Option<f64>,
    pub params_exchanged: u128,
}

enum Learner {
    Dqn(Box<DqnAgent>),
    Qmix(Box<QmixLearner>),
}

/// Per-user errors of every group in `p`.
fn evaluate(p: &Partition, oracle: &dyn UtilityOracle) -> Result<Vec<f64>> {
    let mut errors = vec![f64::NAN; p.users()];
    for g in p.groups() {
        let e = oracle.group_errors(&g)?;
        if e.len() != g.len() {
            return Err(Error::shape("group_errors", g.len(), e.len()));
        }
        for (m, v) in g.iter().zip(e) {
            errors[*m] = v;
        }
    }
    Ok(errors)
}

/// `E · 2 · (users in coalitions) · W + K[(O + A) + P]`.
fn epoch_traffic(p: &Partition, cfg: &CfflConfig, backend: Backend) -> u128 {
    let k = p.users() as u128;
    let grouped = p.assignment().iter().filter(|&&c| c > 0).count() as u128;
    let j1 = cfg.max_coalitions as u128 + 1;
    let (a, pol) = match backend {
        Backend::Dqn => (j1 * k, j1 * k),
        Backend::Qmix => (j1, j1),
    };
    cfg.rounds as u128 * 2 * grouped * cfg.model_params as u128
        + k * ((cfg.observation as u128 + a) + pol)
}

/// Runs `cfg.epochs` epochs starting from the all-solo partition.
pub fn run_cffl(
    cfg: &CfflConfig,
    backend: Backend,
    oracle: &dyn UtilityOracle,
    game: &GameConfig,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    let k = oracle.users();
    let j = cfg.max_coalitions;
    if k == 0 {
        return Err(Error::InvalidArgument("no users".into()));
    }
    let mut init_rng = rng_for(seed, stream::MODEL_INIT, 0x40);
    let mut act_rng = rng_for(seed, stream::AGENT, 0);
    let mut train_rng = rng_for(seed, stream::AGENT, 1);
    let mut learner = match backend {
        Backend::Dqn => {
            let mut a = DqnAgent::new(k, j, cfg.hidden, &mut init_rng)?;
            a.gamma = cfg.gamma;
            a.learning_rate = cfg.learning_rate;
            a.batch_size = cfg.batch_size;
            a.target_sync = cfg.target_sync;
            Learner::Dqn(Box::new(a))
        }
        Backend::Qmix => {
            let mut l = QmixLearner::new(k, j, cfg.qmix.clone(), &mut init_rng)?;
            l.gamma = cfg.gamma;
            l.learning_rate = cfg.learning_rate;
            l.batch_size = cfg.batch_size;
            l.target_sync = cfg.target_sync;
            Learner::Qmix(Box::new(l))
        }
    };
    let evaluator = Game::new(oracle, game)?;
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut state = RlState::from_partition(&Partition::all_solo(k, j));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let eps = epsilon(
            epoch,
            cfg.epochs,
            cfg.eps_start,
            cfg.eps_end,
            cfg.eps_decay_fraction,
        );
        let action = match &learner {
            Learner::Dqn(a) => dqn_select(&a.online, &state, eps, &mut act_rng)?,
            Learner::Qmix(l) => {
                let current = state.partition()?;
                (0..k)
                    .map(|u| {
                        l.act(
                            &AgentObservation::observe(&current, u, &l.cfg),
                            eps,
                            &mut act_rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let partition = Partition::new(action.clone(), j)?;
        let errors = evaluate(&partition, oracle)?;
        let mean_error = mean_clipped_error(&errors)?;
        let r = reward(mean_error);
        let next = RlState::from_partition(&partition);
        buffer.push(Transition {
            state: state.clone(),
            action: action.clone(),
            reward: r,
            next_state: next.clone(),
            done: false,
        })?;
        let mut loss = None;
        if buffer.len() >= cfg.batch_size {
            for _ in 0..cfg.updates_per_epoch {
                loss = Some(match &mut learner {
                    Learner::Dqn(a) => dqn_train_step(&buffer, a, &mut train_rng)?,
                    Learner::Qmix(l) => l.train_step(&buffer, &mut train_rng)?,
                });
            }
        }
        history.push(EpochRecord {
            epoch,
            potential: evaluator.potential(&partition)?,
            action,
            reward: r,
            mean_error,
            errors,
            epsilon: eps,
            loss,
            params_exchanged: epoch_traffic(&partition, cfg, backend),
        });
        state = next;
    }
    Ok(history)
}

/// SHA-256 over the bit patterns of every record.
pub fn history_hash(history: &[EpochRecord]) -> String {
    let mut h = Sha256::new();
    for r in history {
        h.update((r.epoch as u64).to_le_bytes());
        for a in &r.action {
            h.update((*a as u64).to_le_bytes());
        }
        for v in [
            r.reward,
            r.mean_error,
            r.potential,
            r.epsilon,
            r.loss.unwrap_or(f64::NAN),
        ] {
            h.update(v.to_bits().to_le_bytes());
        }
        for e in &r.errors {
            h.update(e.to_bits().to_le_bytes());
        }
        h.update(r.params_exchanged.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out =
        String::from("epoch,reward,mean_error,phi,epsilon,loss,params_exchanged,action\n");
    for r in history {
        let action: Vec<String> = r.action.iter().map(|a| a.to_string()).collect();
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.6},{},{},{}\n",
            r.epoch,
            r.reward,
            r.mean_error,
            r.potential,
            r.epsilon,
            r.loss.map(|l| format!("{l:.8e}")).unwrap_or_default(),
            r.params_exchanged,
            action.join(";")
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
