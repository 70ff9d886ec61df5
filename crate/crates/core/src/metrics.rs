//! Channel correlation, communication accounting and model size / flop
//! accounting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::PilotDataset;
use crate::estimator::{LayerDescriptor, LayerKind};
use crate::{Error, Result, C64};

/// `|⟨h_i, h_j⟩| / (‖h_i‖ ‖h_j‖)` over vectorised channels.
pub fn channel_correlation(hi: &[C64], hj: &[C64]) -> Result<f64> {
    if hi.len() != hj.len() {
        return Err(Error::shape("channel_correlation", hi.len(), hj.len()));
    }
    let ni: f64 = hi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let nj: f64 = hj.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let inner: C64 = hi.iter().zip(hj).map(|(a, b)| a.conj() * b).sum();
    Ok((inner.norm() / (ni * nj)).min(1.0))
}

/// Symmetric matrix of pairwise correlations with a unit diagonal.
pub fn correlation_matrix(channels: &[Vec<C64>]) -> Result<Vec<Vec<f64>>> {
    let k = channels.len();
    let mut m = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let c = channel_correlation(&channels[i], &channels[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Pairwise correlation averaged over the first `samples` true channels of
/// each dataset, sample `s` of user `i` paired with sample `s` of user `j`.
pub fn dataset_correlation_matrix(
    datasets: &[&PilotDataset],
    samples: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = datasets
        .iter()
        .map(|d| d.len())
        .min()
        .unwrap_or(0)
        .min(samples);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let k = datasets.len();
    let mut m = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let mut total = 0.0;
            for s in 0..n {
                total += channel_correlation(
                    datasets[i].samples[s].truth.as_slice(),
                    datasets[j].samples[s].truth.as_slice(),
                )?;
            }
            m[i][j] = total / n as f64;
            m[j][i] = m[i][j];
        }
    }
    Ok(m)
}

pub fn write_matrix_csv(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    let k = m.len();
    out.push_str("user");
    for j in 0..k {
        out.push_str(&format!(",u{j}"));
    }
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        out.push_str(&format!("u{i}"));
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverheadAlgo {
    DqnFl,
    DqnHfl,
    QmixFl,
    QmixHfl,
}

impl OverheadAlgo {
    pub const ALL: [OverheadAlgo; 4] = [
        OverheadAlgo::DqnFl,
        OverheadAlgo::DqnHfl,
        OverheadAlgo::QmixFl,
        OverheadAlgo::QmixHfl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OverheadAlgo::DqnFl => "dqn_fl",
            OverheadAlgo::DqnHfl => "dqn_hfl",
            OverheadAlgo::QmixFl => "qmix_fl",
            OverheadAlgo::QmixHfl => "qmix_hfl",
        }
    }
}

/// Counts are in parameters (model traffic) or scalar values (RL traffic).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadInputs {
    pub users: u64,
    pub w_fl: u64,
    pub w_hfl: u64,
    /// Rounds per epoch `E`.
    pub rounds: u64,
    /// Converged epochs `T`.
    pub epochs: u64,
    pub observation: u64,
    pub action: u64,
    pub policy: u64,
    pub max_coalitions: u64,
}

impl OverheadInputs {
    /// Centralized action and policy payloads `A = P = (C_max + 1) K`.
    pub fn with_centralized_payloads(mut self) -> Self {
        self.action = (self.max_coalitions + 1) * self.users;
        self.policy = self.action;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overhead {
    pub per_round: u128,
    pub per_epoch: u128,
    pub total: u128,
}

/// Per-round `2K·W`, per-epoch `E·2K·W + K[(O + A) + P]` and total
/// `T · per-epoch`. Qmix variants use `C_max + 1` for both `A` and `P`.
pub fn comm_overhead(algo: OverheadAlgo, inp: &OverheadInputs) -> Overhead {
    let k = inp.users as u128;
    let w = match algo {
        OverheadAlgo::DqnFl | OverheadAlgo::QmixFl => inp.w_fl,
        OverheadAlgo::DqnHfl | OverheadAlgo::QmixHfl => inp.w_hfl,
    } as u128;
    let (a, p) = match algo {
        OverheadAlgo::DqnFl | OverheadAlgo::DqnHfl => (inp.action as u128, inp.policy as u128),
        OverheadAlgo::QmixFl | OverheadAlgo::QmixHfl => {
            let c = inp.max_coalitions as u128 + 1;
            (c, c)
        }
    };
    let per_round = 2 * k * w;
    let per_epoch = inp.rounds as u128 * per_round + k * ((inp.observation as u128 + a) + p);
    Overhead {
        per_round,
        per_epoch,
        total: inp.epochs as u128 * per_epoch,
    }
}

pub fn write_overhead_csv(path: &Path, inp: &OverheadInputs) -> Result<()> {
    let mut out = String::from("algorithm,one_round,one_epoch,total\n");
    for algo in OverheadAlgo::ALL {
        let o = comm_overhead(algo, inp);
        out.push_str(&format!(
            "{},{},{},{}\n",
            algo.name(),
            o.per_round,
            o.per_epoch,
            o.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAccounting {
    pub params: u64,
    /// Multiply-accumulates per forward pass of one sample.
    pub macs: u64,
    /// `2 · macs`.
    pub flops: u64,
}

/// Batch norm counts one multiply-add per activation (scale and shift).
pub fn model_accounting(layers: &[LayerDescriptor]) -> ModelAccounting {
    let mut params = 0u64;
    let mut macs = 0u64;
    for d in layers {
        let [a, b, c, e] = d.dims.map(|v| v as u64);
        match d.kind {
            LayerKind::Dense => {
                params += a * b + b;
                macs += a * b;
            }
            LayerKind::Conv1d => {
                params += b * a * c + b;
                macs += b * a * c * e;
            }
            LayerKind::BatchNorm => {
                params += 2 * a;
                macs += a * b;
            }
        }
    }
    ModelAccounting {
        params,
        macs,
        flops: 2 * macs,
    }
}

/// Relative reduction `(baseline − candidate) / baseline`.
pub fn improvement(baseline: f64, candidate: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::InvalidArgument("baseline must be nonzero".into()));
    }
    Ok((baseline - candidate) / baseline)
}

/// Total flops of one global model plus `users` local models.
pub fn system_flops(global: &ModelAccounting, local: &ModelAccounting, users: u64) -> u64 {
    global.flops + users * local.flops
}
