//! Heterogeneous FL: a large global model and a small local model share a
//! structurally identical prefix. Members upload only the shared prefix;
//! the server trains its own suffix and distills back into the local suffix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::{
    evaluate_nmse, forward, local_train, mse_loss_with, Layer, LayerOp, LayeredModel,
    LocalTrainConfig, NormMode, TrainSet,
};
use crate::seed::{derive_seed, rng_for, stream};
use crate::{Error, Result};

/// Global model, local template and the server's own data.
#[derive(Debug, Clone)]
pub struct HflPair {
    pub global: LayeredModel,
    pub local: LayeredModel,
    pub server: TrainSet,
}

impl HflPair {
    pub fn new(global: LayeredModel, local: LayeredModel, server: TrainSet) -> Result<Self> {
        if !global.shared_structure_matches(&local) {
            return Err(Error::StructureMismatch(
                "shared parts of global and local models differ".into(),
            ));
        }
        if global.layers().len() <= local.layers().len() {
            return Err(Error::StructureMismatch(format!(
                "global model must be deeper than the local one ({} vs {} layers)",
                global.layers().len(),
                local.layers().len()
            )));
        }
        if server.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            global,
            local,
            server,
        })
    }
}

fn check_congruent(a: &[Layer], b: &[Layer]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_structure(y)) {
        return Err(Error::shape(
            "aggregate_shared",
            "congruent shared parts",
            "mismatched layers",
        ));
    }
    Ok(())
}

/// `W_g¹ = (Σ β_l W_l¹) / L`. Batch-norm running statistics are combined
/// with the same formula.
pub fn aggregate_shared(parts: &[&[Layer]], beta: &[f64]) -> Result<Vec<Layer>> {
    let first = *parts.first().ok_or(Error::EmptyBatch)?;
    if beta.len() != parts.len() {
        return Err(Error::shape("aggregate_shared", parts.len(), beta.len()));
    }
    if beta.iter().any(|b| *b < 0.0 || !b.is_finite()) {
        return Err(Error::InvalidArgument(
            "β must be finite and nonnegative".into(),
        ));
    }
    for p in parts {
        check_congruent(first, p)?;
    }
    let l = parts.len() as f64;
    let mut out: Vec<Layer> = first.to_vec();
    for (idx, layer) in out.iter_mut().enumerate() {
        layer.weights.iter_mut().for_each(|v| *v = 0.0);
        layer.biases.iter_mut().for_each(|v| *v = 0.0);
        if let Some(s) = layer.norm_stats_mut() {
            s.running_mean.iter_mut().for_each(|v| *v = 0.0);
            s.running_var.iter_mut().for_each(|v| *v = 0.0);
        }
        for (part, b) in parts.iter().zip(beta) {
            let src = &part[idx];
            for (a, x) in layer.weights.iter_mut().zip(&src.weights) {
                *a += b * x;
            }
            for (a, x) in layer.biases.iter_mut().zip(&src.biases) {
                *a += b * x;
            }
            if let (LayerOp::BatchNorm { stats, .. }, Some(s)) = (&mut layer.op, src.norm_stats()) {
                for (a, x) in stats.running_mean.iter_mut().zip(&s.running_mean) {
                    *a += b * x;
                }
                for (a, x) in stats.running_var.iter_mut().zip(&s.running_var) {
                    *a += b * x;
                }
            }
        }
        layer.weights.iter_mut().for_each(|v| *v /= l);
        layer.biases.iter_mut().for_each(|v| *v /= l);
        if let Some(s) = layer.norm_stats_mut() {
            s.running_mean.iter_mut().for_each(|v| *v /= l);
            s.running_var.iter_mut().for_each(|v| *v /= l);
        }
    }
    Ok(out)
}

/// Overwrites the shared prefix of `model` with `shared`.
pub fn set_shared(model: &mut LayeredModel, shared: &[Layer]) -> Result<()> {
    let split = model.shared_split();
    check_congruent(&model.layers()[..split], shared)?;
    model.layers_mut()[..split].clone_from_slice(shared);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    fn frozen(&self, split: usize, epochs: usize, seed: u64) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            frozen_below: split,
            ..LocalTrainConfig::default()
        }
    }
}

/// Trains only the global distillation suffix on server data.
pub fn train_distill_global(
    global: &LayeredModel,
    server: &TrainSet,
    schedule: &TrainSchedule,
) -> Result<LayeredModel> {
    if server.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if schedule.epochs == 0 {
        return Ok(global.clone());
    }
    let cfg = schedule.frozen(
        global.shared_split(),
        schedule.epochs,
        derive_seed(schedule.seed, stream::DISTILL, 0),
    );
    local_train(global, server, &[], &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillTarget {
    TeacherOutputs,
    TrueLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub converged: bool,
}

pub const DISTILL_PATIENCE: usize = 10;
pub const DISTILL_TOLERANCE: f64 = 1e-5;

/// Copies `W_g¹` into the local template, re-draws `W_f²` and trains it
/// against teacher outputs or true labels until the relative loss change
/// over [`DISTILL_PATIENCE`] epochs drops below [`DISTILL_TOLERANCE`] or
/// `schedule.epochs` is reached.
pub fn distill_to_local(
    global: &LayeredModel,
    template: &LayeredModel,
    server: &TrainSet,
    schedule: &TrainSchedule,
    target: DistillTarget,
) -> Result<(LayeredModel, DistillReport)> {
    if !global.shared_structure_matches(template) {
        return Err(Error::StructureMismatch(
            "shared parts of global and local models differ".into(),
        ));
    }
    if server.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut local = template.clone();
    set_shared(&mut local, global.shared_layers())?;
    let mut rng = rng_for(schedule.seed, stream::DISTILL, 1);
    local.reinitialize_distill(&mut rng);

    let data = match target {
        DistillTarget::TrueLabels => server.clone(),
        DistillTarget::TeacherOutputs => {
            server.with_targets(forward(global, server.inputs(), server.len())?)?
        }
    };
    let full = data.full()?;
    let split = local.shared_split();
    let mut history = vec![mse_loss_with(&local, &full, NormMode::Inference)?];
    let mut converged = false;
    for epoch in 0..schedule.epochs {
        let cfg = schedule.frozen(
            split,
            1,
            derive_seed(schedule.seed, stream::DISTILL, 2 + epoch as u64),
        );
        local = local_train(&local, &data, &[], &cfg)?;
        let loss = mse_loss_with(&local, &full, NormMode::Inference)?;
        history.push(loss);
        if loss == 0.0 {
            converged = true;
            break;
        }
        if history.len() > DISTILL_PATIENCE {
            let past = history[history.len() - 1 - DISTILL_PATIENCE];
            if (past - loss).abs() / past.max(f64::MIN_POSITIVE) < DISTILL_TOLERANCE {
                converged = true;
                break;
            }
        }
    }
    Ok((
        local,
        DistillReport {
            epochs_run: history.len() - 1,
            final_loss: *history.last().unwrap(),
            converged,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HflConfig {
    /// Member-side training of the full local model.
    pub local: TrainSchedule,
    /// Server-side training of the global suffix.
    pub server: TrainSchedule,
    /// Cap on distillation epochs.
    pub distill: TrainSchedule,
    pub target: DistillTarget,
}

impl Default for HflConfig {
    fn default() -> Self {
        Self {
            local: TrainSchedule::default(),
            server: TrainSchedule::default(),
            distill: TrainSchedule {
                epochs: 200,
                ..TrainSchedule::default()
            },
            target: DistillTarget::TeacherOutputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HflRoundReport {
    pub members: Vec<usize>,
    pub uplink_params: usize,
    pub downlink_params: usize,
    pub distill: DistillReport,
    pub member_nmse_before: Vec<f64>,
    pub member_nmse_after: Vec<f64>,
}

/// Broadcast `W_f` → member training → shared uplink → aggregation →
/// server suffix training → distillation → broadcast.
pub fn run_hfl_round(
    pair: &HflPair,
    members: &[usize],
    datasets: &std::collections::BTreeMap<usize, TrainSet>,
    beta: &[f64],
    cfg: &HflConfig,
) -> Result<(HflPair, HflRoundReport)> {
    if members.is_empty() {
        return Err(Error::InvalidArgument(
            "HFL round needs at least one member".into(),
        ));
    }
    let sets = members
        .iter()
        .map(|m| datasets.get(m).ok_or(Error::MissingMember(*m)))
        .collect::<Result<Vec<_>>>()?;
    let before = sets
        .iter()
        .map(|s| evaluate_nmse(&pair.local, s))
        .collect::<Result<Vec<_>>>()?;

    let trained = members
        .par_iter()
        .zip(sets.par_iter())
        .map(|(&m, set)| {
            local_train(
                &pair.local,
                set,
                &[],
                &LocalTrainConfig {
                    epochs: cfg.local.epochs,
                    learning_rate: cfg.local.learning_rate,
                    batch_size: cfg.local.batch_size,
                    seed: derive_seed(cfg.local.seed, stream::TRAINING, m as u64),
                    ..LocalTrainConfig::default()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let uploads: Vec<&[Layer]> = trained.iter().map(|m| m.shared_layers()).collect();
    let shared = aggregate_shared(&uploads, beta)?;

    let mut global = pair.global.clone();
    set_shared(&mut global, &shared)?;
    let global = train_distill_global(&global, &pair.server, &cfg.server)?;
    let (local, distill) =
        distill_to_local(&global, &pair.local, &pair.server, &cfg.distill, cfg.target)?;

    let after = sets
        .iter()
        .map(|s| evaluate_nmse(&local, s))
        .collect::<Result<Vec<_>>>()?;
    let report = HflRoundReport {
        members: members.to_vec(),
        uplink_params: members.len() * local.shared_param_count(),
        downlink_params: members.len() * local.param_count(),
        distill,
        member_nmse_before: before,
        member_nmse_after: after,
    };
    Ok((
        HflPair {
            global,
            local,
            server: pair.server.clone(),
        },
        report,
    ))
}
