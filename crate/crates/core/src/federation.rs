//! Homogeneous federated learning: group rounds with normalised weighted
//! gradient aggregation and the distance / RSRP transfer weights.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::{
    apply_gradient, backward, forward_trace, local_train, update_running_stats, Gradient, LayerOp,
    LayeredModel, LocalTrainConfig, NormMode, TrainSet,
};
use crate::{Error, Result};

/// Distance weight: `1 − L_m / L` inside the reference radius, else 0.
pub fn dis_weight(distance: f64, reference: f64) -> Result<f64> {
    if distance < 0.0 || distance.is_nan() {
        return Err(Error::NegativeDistance(distance));
    }
    if !(reference > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference distance must be positive, got {reference}"
        )));
    }
    Ok(if distance <= reference {
        1.0 - distance / reference
    } else {
        0.0
    })
}

/// Power-and-distance weight: `(1 − |P_m − P_c| / 2Δ) · α′` strictly inside
/// the `(P_c − Δ, P_c + Δ)` window, else 0.
pub fn rsrp_dis_weight(power: f64, center_power: f64, band: f64, dis: f64) -> Result<f64> {
    if !(band > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "power band must be positive, got {band}"
        )));
    }
    let inside = center_power - band < power && power < center_power + band;
    Ok(if inside {
        (1.0 - (power - center_power).abs() / (2.0 * band)) * dis
    } else {
        0.0
    })
}

/// Normalises raw weights to sum to one.
pub fn normalized_weights(weights: &BTreeMap<usize, f64>) -> Result<BTreeMap<usize, f64>> {
    if weights.values().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument(
            "aggregation weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = weights.values().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(weights.iter().map(|(&k, &w)| (k, w / total)).collect())
}

/// `r = Σ_m (α_m / Σα) g_m`, summed in member-id order.
pub fn aggregate_gradients(
    grads: &BTreeMap<usize, Gradient>,
    weights: &BTreeMap<usize, f64>,
) -> Result<Gradient> {
    let first = grads.values().next().ok_or(Error::DegenerateWeights)?;
    for member in grads.keys() {
        if !weights.contains_key(member) {
            return Err(Error::MissingMember(*member));
        }
    }
    let subset: BTreeMap<usize, f64> = grads.keys().map(|k| (*k, weights[k])).collect();
    let norm = normalized_weights(&subset)?;
    let mut out = first.clone();
    out.scale(0.0);
    for (member, g) in grads {
        if !g.same_shape(first) {
            return Err(Error::shape(
                "aggregate_gradients",
                "congruent gradients",
                format!("member {member}"),
            ));
        }
        out.add_scaled(g, norm[member])?;
    }
    Ok(out)
}

/// `ω ← ω − η r`.
pub fn global_update(
    model: &LayeredModel,
    aggregated: &Gradient,
    learning_rate: f64,
) -> Result<LayeredModel> {
    crate::estimator::sgd_step(model, aggregated, learning_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    /// `α ≡ 1`.
    Plain,
    /// Distance weights.
    Dis,
    /// Distance weights scaled by RSRP similarity.
    RsrpDis,
}

impl WeightStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            WeightStrategy::Plain => "fl",
            WeightStrategy::Dis => "fl+dis",
            WeightStrategy::RsrpDis => "fl+rsrp+dis",
        }
    }
}

/// Per-member distances to the aggregating node and received powers.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferContext {
    pub distances: BTreeMap<usize, f64>,
    pub reference_distance: f64,
    pub powers: BTreeMap<usize, f64>,
    pub center_power: f64,
    pub band: f64,
}

impl TransferContext {
    /// Builds the context around the member with the largest summed distance
    /// weight towards the others (lowest id on ties).
    pub fn around_best_center(
        members: &[usize],
        positions: &BTreeMap<usize, [f64; 2]>,
        powers: &BTreeMap<usize, f64>,
        reference_distance: f64,
        band: f64,
    ) -> Result<(usize, Self)> {
        let dist = |a: usize, b: usize| -> Result<f64> {
            let pa = positions.get(&a).ok_or(Error::MissingMember(a))?;
            let pb = positions.get(&b).ok_or(Error::MissingMember(b))?;
            Ok(((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt())
        };
        let mut best: Option<(usize, f64)> = None;
        for &c in members {
            let mut score = 0.0;
            for &m in members {
                score += dis_weight(dist(c, m)?, reference_distance)?;
            }
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((c, score));
            }
        }
        let (center, _) =
            best.ok_or_else(|| Error::InvalidArgument("group has no members".into()))?;
        let distances = members
            .iter()
            .map(|&m| Ok((m, dist(center, m)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let member_powers = members
            .iter()
            .map(|&m| {
                powers
                    .get(&m)
                    .map(|p| (m, *p))
                    .ok_or(Error::MissingMember(m))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let center_power = member_powers[&center];
        Ok((
            center,
            Self {
                distances,
                reference_distance,
                powers: member_powers,
                center_power,
                band,
            },
        ))
    }

    /// Raw `α_m` for every member under `strategy`.
    pub fn weights(
        &self,
        members: &[usize],
        strategy: WeightStrategy,
    ) -> Result<BTreeMap<usize, f64>> {
        members
            .iter()
            .map(|&m| {
                let w = match strategy {
                    WeightStrategy::Plain => 1.0,
                    WeightStrategy::Dis => self.dis(m)?,
                    WeightStrategy::RsrpDis => {
                        let p = *self.powers.get(&m).ok_or(Error::MissingMember(m))?;
                        rsrp_dis_weight(p, self.center_power, self.band, self.dis(m)?)?
                    }
                };
                Ok((m, w))
            })
            .collect()
    }

    fn dis(&self, m: usize) -> Result<f64> {
        dis_weight(
            *self.distances.get(&m).ok_or(Error::MissingMember(m))?,
            self.reference_distance,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlGroup {
    pub id: usize,
    pub members: Vec<usize>,
    pub center: usize,
}

impl FlGroup {
    pub fn new(id: usize, mut members: Vec<usize>, center: usize) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::InvalidArgument("FL group must have members".into()));
        }
        if !members.contains(&center) {
            return Err(Error::InvalidArgument(format!(
                "center {center} is not a group member"
            )));
        }
        Ok(Self {
            id,
            members,
            center,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub learning_rate: f64,
    /// Local SGD steps before upload; 1 means a single gradient at the
    /// broadcast parameters.
    pub local_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            local_steps: 1,
            batch_size: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub group: usize,
    pub strategy: WeightStrategy,
    pub center: usize,
    pub weights: BTreeMap<usize, f64>,
    /// Broadcasts plus uploads.
    pub model_transfers: usize,
    pub params_exchanged: usize,
    pub bytes_exchanged: usize,
}

/// Gradient a member reports for the broadcast model, plus its locally
/// updated copy (which carries refreshed batch-norm statistics).
fn member_update(
    global: &LayeredModel,
    data: &TrainSet,
    cfg: &RoundConfig,
    member: usize,
) -> Result<(Gradient, LayeredModel)> {
    if cfg.local_steps <= 1 && cfg.batch_size >= data.len() {
        let batch = data.full()?;
        let trace = forward_trace(global, &batch.inputs, batch.batch, NormMode::Training)?;
        let grad = backward(global, &batch)?;
        let mut local = global.clone();
        update_running_stats(&mut local, &trace);
        return Ok((grad, local));
    }
    let local = local_train(
        global,
        data,
        &[],
        &LocalTrainConfig {
            epochs: cfg.local_steps.max(1),
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size.min(data.len()),
            seed: crate::seed::derive_seed(cfg.seed, crate::seed::stream::TRAINING, member as u64),
            ..LocalTrainConfig::default()
        },
    )?;
    // pseudo-gradient (ω_g − ω_local) / η
    let mut grad = Gradient::zeros_for(global);
    for ((g, a), b) in grad
        .values_mut()
        .zip(global.params_flat())
        .zip(local.params_flat())
    {
        *g = (a - b) / cfg.learning_rate;
    }
    Ok((grad, local))
}

/// Weighted average of the members' batch-norm running statistics.
fn merge_norm_stats(
    target: &mut LayeredModel,
    locals: &BTreeMap<usize, LayeredModel>,
    weights: &BTreeMap<usize, f64>,
) {
    for (idx, layer) in target.layers_mut().iter_mut().enumerate() {
        let LayerOp::BatchNorm { stats, .. } = &mut layer.op else {
            continue;
        };
        stats.running_mean.iter_mut().for_each(|v| *v = 0.0);
        stats.running_var.iter_mut().for_each(|v| *v = 0.0);
        for (m, local) in locals {
            let w = weights[m];
            let s = local.layers()[idx].norm_stats().expect("congruent models");
            for (a, b) in stats.running_mean.iter_mut().zip(&s.running_mean) {
                *a += w * b;
            }
            for (a, b) in stats.running_var.iter_mut().zip(&s.running_var) {
                *a += w * b;
            }
        }
    }
}

/// One FL round: broadcast, local gradients in parallel at the broadcast
/// parameters, weighted aggregation at the center node, global update.
pub fn run_fl_round(
    group: &FlGroup,
    global: &LayeredModel,
    datasets: &BTreeMap<usize, TrainSet>,
    strategy: WeightStrategy,
    ctx: &TransferContext,
    cfg: &RoundConfig,
) -> Result<(LayeredModel, RoundReport)> {
    let raw = ctx.weights(&group.members, strategy)?;
    let weights = normalized_weights(&raw)?;
    let updates = group
        .members
        .par_iter()
        .map(|&m| {
            let data = datasets.get(&m).ok_or(Error::MissingMember(m))?;
            if data.is_empty() {
                return Err(Error::EmptyBatch);
            }
            member_update(global, data, cfg, m).map(|u| (m, u))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = BTreeMap::new();
    let mut locals = BTreeMap::new();
    for (m, (g, local)) in updates {
        grads.insert(m, g);
        locals.insert(m, local);
    }
    let r = aggregate_gradients(&grads, &weights)?;
    let mut next = global.clone();
    apply_gradient(&mut next, &r, cfg.learning_rate)?;
    merge_norm_stats(&mut next, &locals, &weights);

    let k = group.members.len();
    let params = 2 * k * global.param_count();
    Ok((
        next,
        RoundReport {
            group: group.id,
            strategy,
            center: group.center,
            weights,
            model_transfers: 2 * k,
            params_exchanged: params,
            bytes_exchanged: params * std::mem::size_of::<f64>(),
        },
    ))
}

/// Uniform-weight context for groups where distances and powers are unused.
pub fn plain_context(members: &[usize]) -> TransferContext {
    TransferContext {
        distances: members.iter().map(|&m| (m, 0.0)).collect(),
        reference_distance: 1.0,
        powers: members.iter().map(|&m| (m, 0.0)).collect(),
        center_power: 0.0,
        band: 1.0,
    }
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLogRow {
    pub epoch: usize,
    pub round: usize,
    pub group: usize,
    pub strategy: String,
    pub member_nmse: BTreeMap<usize, f64>,
    pub bytes_exchanged: usize,
    /// Extra trailing columns (HFL adds uplink and downlink counts).
    pub extra: Vec<(String, String)>,
}

/// Appends rows to a CSV log, writing the header when the file is new.
/// Member NMSE values are packed as `id:value` pairs separated by `;`.
pub fn append_round_log(path: &std::path::Path, rows: &[RoundLogRow]) -> Result<()> {
    use std::io::Write as _;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        let mut header = String::from("epoch,round,group,strategy,member_nmse,bytes_exchanged");
        if let Some(first) = rows.first() {
            for (k, _) in &first.extra {
                header.push(',');
                header.push_str(k);
            }
        }
        writeln!(f, "{header}")?;
    }
    for r in rows {
        let nmse: Vec<String> = r
            .member_nmse
            .iter()
            .map(|(m, v)| format!("{m}:{v:.6e}"))
            .collect();
        write!(
            f,
            "{},{},{},{},{},{}",
            r.epoch,
            r.round,
            r.group,
            r.strategy,
            nmse.join(";"),
            r.bytes_exchanged
        )?;
        for (_, v) in &r.extra {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}
