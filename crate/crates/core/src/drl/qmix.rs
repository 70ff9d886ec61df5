//! Qmix: per-agent value networks that see only their own observation,
//! mixed into a joint value by a monotone, state-conditioned network.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{argmax, ReplayBuffer, RlState, Transition};
use crate::coalition::Partition;
use crate::estimator::{
    apply_gradient, backprop, forward, forward_trace, Activation, Gradient, LayeredModel, NormMode,
    Trace,
};
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QmixConfig {
    /// Mixing embedding width.
    pub embed: usize,
    pub hidden: usize,
    /// One network for all agents; the observation then carries the agent index.
    pub shared: bool,
    /// Observe every coalition size instead of only the own one.
    pub full_sizes: bool,
}

impl Default for QmixConfig {
    fn default() -> Self {
        Self {
            embed: 16,
            hidden: 32,
            shared: true,
            full_sizes: false,
        }
    }
}

/// What one agent sees when acting.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    agent: usize,
    agents: usize,
    coalition: usize,
    max_coalitions: usize,
    own_size: f64,
    sizes: Option<Vec<f64>>,
    with_index: bool,
}

impl AgentObservation {
    /// Builds `user`'s view of `p`: its own label and its coalition's size.
    pub fn observe(p: &Partition, user: usize, cfg: &QmixConfig) -> Self {
        let k = p.users();
        let label = p.label(user);
        let own = if label == 0 { 1 } else { p.sizes()[label - 1] };
        Self {
            agent: user,
            agents: k,
            coalition: label,
            max_coalitions: p.max_coalitions(),
            own_size: own as f64 / k as f64,
            sizes: cfg
                .full_sizes
                .then(|| p.sizes().iter().map(|&d| d as f64 / k as f64).collect()),
            with_index: cfg.shared,
        }
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn coalition(&self) -> usize {
        self.coalition
    }

    pub fn own_size(&self) -> f64 {
        self.own_size
    }

    pub fn encoded_len(agents: usize, max_coalitions: usize, cfg: &QmixConfig) -> usize {
        max_coalitions
            + 2
            + if cfg.full_sizes { max_coalitions } else { 0 }
            + if cfg.shared { agents } else { 0 }
    }

    /// One-hot label, own size, optional size vector, optional agent one-hot.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.max_coalitions + 1];
        v[self.coalition] = 1.0;
        v.push(self.own_size);
        if let Some(s) = &self.sizes {
            v.extend(s);
        }
        if self.with_index {
            let mut id = vec![0.0; self.agents];
            id[self.agent] = 1.0;
            v.extend(id);
        }
        v
    }
}

/// Values of all `J + 1` actions for one observation.
pub fn qmix_agent_q(net: &LayeredModel, obs: &AgentObservation) -> Result<Vec<f64>> {
    forward(net, &obs.encode(), 1)
}

/// Hypernetwork mixer. Weights applied to agent values pass through `|·|`.
///
/// `Q_tot = |W₂(s)| · elu(qᵀ |W₁(s)| + b₁(s)) + b₂(s)` with every `W(s)`
/// and `b(s)` affine in the state.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingNetwork {
    agents: usize,
    state_dim: usize,
    embed: usize,
    params: Vec<f64>,
}

/// Forward intermediates for [`MixingNetwork::backward`].
#[derive(Debug, Clone)]
pub struct MixCache {
    q: Vec<f64>,
    state: Vec<f64>,
    w1_raw: Vec<f64>,
    z: Vec<f64>,
    h: Vec<f64>,
    w2_raw: Vec<f64>,
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_prime(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl MixingNetwork {
    pub fn new(agents: usize, state_dim: usize, embed: usize, rng: &mut Rng) -> Self {
        let mut m = Self {
            agents,
            state_dim,
            embed,
            params: Vec::new(),
        };
        let bound = 1.0 / (state_dim.max(1) as f64).sqrt();
        m.params = (0..m.param_count())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        m
    }

    pub fn zeros(agents: usize, state_dim: usize, embed: usize) -> Self {
        let mut m = Self {
            agents,
            state_dim,
            embed,
            params: Vec::new(),
        };
        m.params = vec![0.0; m.param_count()];
        m
    }

    fn km(&self) -> usize {
        self.agents * self.embed
    }

    pub fn param_count(&self) -> usize {
        let s = self.state_dim;
        let km = self.km();
        let m = self.embed;
        km * s + km + m * s + m + m * s + m + s + 1
    }

    // layout: hw1 | bw1 | hb1 | bb1 | hw2 | bw2 | hv | bv
    fn offsets(&self) -> [usize; 8] {
        let s = self.state_dim;
        let km = self.km();
        let m = self.embed;
        let hw1 = 0;
        let bw1 = hw1 + km * s;
        let hb1 = bw1 + km;
        let bb1 = hb1 + m * s;
        let hw2 = bb1 + m;
        let bw2 = hw2 + m * s;
        let hv = bw2 + m;
        let bv = hv + s;
        [hw1, bw1, hb1, bb1, hw2, bw2, hv, bv]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn affine(&self, w: usize, b: usize, rows: usize, state: &[f64]) -> Vec<f64> {
        let s = self.state_dim;
        (0..rows)
            .map(|r| {
                self.params[b + r]
                    + self.params[w + r * s..w + (r + 1) * s]
                        .iter()
                        .zip(state)
                        .map(|(a, x)| a * x)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Nonnegative first-stage weights, `agents × embed`.
    pub fn first_weights(&self, state: &[f64]) -> Vec<f64> {
        let [hw1, bw1, ..] = self.offsets();
        self.affine(hw1, bw1, self.km(), state)
            .into_iter()
            .map(f64::abs)
            .collect()
    }

    pub fn second_weights(&self, state: &[f64]) -> Vec<f64> {
        let [.., hw2, bw2, _, _] = self.offsets();
        self.affine(hw2, bw2, self.embed, state)
            .into_iter()
            .map(f64::abs)
            .collect()
    }

    pub fn forward(&self, q: &[f64], state: &[f64]) -> Result<(f64, MixCache)> {
        if q.len() != self.agents {
            return Err(Error::shape("qmix_mix", self.agents, q.len()));
        }
        if state.len() != self.state_dim {
            return Err(Error::shape("qmix_mix state", self.state_dim, state.len()));
        }
        let [hw1, bw1, hb1, bb1, hw2, bw2, hv, bv] = self.offsets();
        let m = self.embed;
        let w1_raw = self.affine(hw1, bw1, self.km(), state);
        let b1 = self.affine(hb1, bb1, m, state);
        let z: Vec<f64> = (0..m)
            .map(|e| {
                b1[e]
                    + (0..self.agents)
                        .map(|k| q[k] * w1_raw[k * m + e].abs())
                        .sum::<f64>()
            })
            .collect();
        let h: Vec<f64> = z.iter().map(|&v| elu(v)).collect();
        let w2_raw = self.affine(hw2, bw2, m, state);
        let b2 = self.affine(hv, bv, 1, state)[0];
        let q_tot = h.iter().zip(&w2_raw).map(|(a, w)| a * w.abs()).sum::<f64>() + b2;
        Ok((
            q_tot,
            MixCache {
                q: q.to_vec(),
                state: state.to_vec(),
                w1_raw,
                z,
                h,
                w2_raw,
            },
        ))
    }

    pub fn mix(&self, q: &[f64], state: &[f64]) -> Result<f64> {
        Ok(self.forward(q, state)?.0)
    }

    /// Adds `g · ∂Q_tot/∂params` into `d_params` and returns `g · ∂Q_tot/∂q`.
    pub fn backward(&self, cache: &MixCache, g: f64, d_params: &mut [f64]) -> Vec<f64> {
        let [hw1, bw1, hb1, bb1, hw2, bw2, hv, bv] = self.offsets();
        let s = self.state_dim;
        let m = self.embed;
        let mut outer = |w: usize, b: usize, row: usize, d: f64| {
            d_params[b + row] += d;
            for (i, x) in cache.state.iter().enumerate() {
                d_params[w + row * s + i] += d * x;
            }
        };
        outer(hv, bv, 0, g);
        let mut dz = vec![0.0; m];
        for e in 0..m {
            let dw2 = g * cache.h[e] * sign(cache.w2_raw[e]);
            outer(hw2, bw2, e, dw2);
            dz[e] = g * cache.w2_raw[e].abs() * elu_prime(cache.z[e]);
            outer(hb1, bb1, e, dz[e]);
        }
        let mut dq = vec![0.0; self.agents];
        for k in 0..self.agents {
            for e in 0..m {
                let raw = cache.w1_raw[k * m + e];
                dq[k] += dz[e] * raw.abs();
                outer(hw1, bw1, k * m + e, dz[e] * cache.q[k] * sign(raw));
            }
        }
        dq
    }
}

/// Agent networks, mixer and their targets.
#[derive(Debug, Clone)]
pub struct QmixLearner {
    pub cfg: QmixConfig,
    pub users: usize,
    pub max_coalitions: usize,
    pub agents: Vec<LayeredModel>,
    pub mixer: MixingNetwork,
    pub target_agents: Vec<LayeredModel>,
    pub target_mixer: MixingNetwork,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub target_sync: usize,
    pub steps: usize,
}

impl QmixLearner {
    pub fn new(
        users: usize,
        max_coalitions: usize,
        cfg: QmixConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let obs = AgentObservation::encoded_len(users, max_coalitions, &cfg);
        let nets = if cfg.shared { 1 } else { users };
        let agents = (0..nets)
            .map(|_| {
                LayeredModel::mlp(
                    &[obs, cfg.hidden, max_coalitions + 1],
                    Activation::Relu,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mixer = MixingNetwork::new(
            users,
            RlState::encoded_len(users, max_coalitions),
            cfg.embed,
            rng,
        );
        Ok(Self {
            cfg,
            users,
            max_coalitions,
            target_agents: agents.clone(),
            agents,
            target_mixer: mixer.clone(),
            mixer,
            gamma: 0.9,
            learning_rate: 1e-2,
            batch_size: 32,
            target_sync: 50,
            steps: 0,
        })
    }

    pub fn agent_net(&self, agent: usize) -> &LayeredModel {
        &self.agents[if self.cfg.shared { 0 } else { agent }]
    }

    /// Decentralized execution: ε-greedy from the observation alone.
    pub fn act(&self, obs: &AgentObservation, eps: f64, rng: &mut Rng) -> Result<usize> {
        let q = qmix_agent_q(self.agent_net(obs.agent()), obs)?;
        let explore = rng.random::<f64>() < eps;
        Ok(if explore {
            rng.random_range(0..q.len())
        } else {
            argmax(&q)
        })
    }

    pub fn sync_target(&mut self) {
        self.target_agents = self.agents.clone();
        self.target_mixer = self.mixer.clone();
    }

    fn observations(&self, state: &RlState) -> Result<Vec<AgentObservation>> {
        let p = state.partition()?;
        Ok((0..self.users)
            .map(|u| AgentObservation::observe(&p, u, &self.cfg))
            .collect())
    }

    /// Traced agent values for every (sample, agent). With shared parameters
    /// one trace covers all rows in `b * K + k` order; otherwise one trace
    /// per agent in sample order.
    fn agent_traces(&self, nets: &[LayeredModel], states: &[&RlState]) -> Result<Vec<Trace>> {
        let obs: Vec<Vec<AgentObservation>> = states
            .iter()
            .map(|s| self.observations(s))
            .collect::<Result<_>>()?;
        if self.cfg.shared {
            let rows: Vec<f64> = obs.iter().flatten().flat_map(|o| o.encode()).collect();
            Ok(vec![forward_trace(
                &nets[0],
                &rows,
                states.len() * self.users,
                NormMode::Training,
            )?])
        } else {
            (0..self.users)
                .map(|k| {
                    let rows: Vec<f64> = obs.iter().flat_map(|o| o[k].encode()).collect();
                    forward_trace(&nets[k], &rows, states.len(), NormMode::Training)
                })
                .collect()
        }
    }

    fn value_at<'t>(&self, traces: &'t [Trace], b: usize, k: usize) -> &'t [f64] {
        let j1 = self.max_coalitions + 1;
        let (t, row) = if self.cfg.shared {
            (&traces[0], b * self.users + k)
        } else {
            (&traces[k], b)
        };
        &t.output()[row * j1..(row + 1) * j1]
    }
}

/// Loss `(1/B) Σ (y − Q_tot)²` over `batch` with gradients for every agent
/// network and for the mixer.
pub fn qmix_gradients(
    learner: &QmixLearner,
    batch: &[&Transition],
) -> Result<(f64, Vec<Gradient>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = batch.len();
    let k = learner.users;
    let j1 = learner.max_coalitions + 1;
    let states: Vec<&RlState> = batch.iter().map(|t| &t.state).collect();
    let nexts: Vec<&RlState> = batch.iter().map(|t| &t.next_state).collect();
    let traces = learner.agent_traces(&learner.agents, &states)?;
    let target_traces = learner.agent_traces(&learner.target_agents, &nexts)?;

    let mut d_mix = vec![0.0; learner.mixer.param_count()];
    let mut d_agent_out: Vec<Vec<f64>> =
        traces.iter().map(|t| vec![0.0; t.output().len()]).collect();
    let mut loss = 0.0;
    for (i, t) in batch.iter().enumerate() {
        if t.action.len() != k {
            return Err(Error::shape("qmix_train_step", k, t.action.len()));
        }
        let chosen: Vec<f64> = (0..k)
            .map(|a| learner.value_at(&traces, i, a)[t.action[a]])
            .collect();
        let s = t.state.encode();
        let (q_tot, cache) = learner.mixer.forward(&chosen, &s)?;
        let y = if t.done {
            t.reward
        } else {
            let greedy: Vec<f64> = (0..k)
                .map(|a| {
                    learner
                        .value_at(&target_traces, i, a)
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            t.reward + learner.gamma * learner.target_mixer.mix(&greedy, &t.next_state.encode())?
        };
        let diff = q_tot - y;
        loss += diff * diff;
        let dq = learner
            .mixer
            .backward(&cache, 2.0 * diff / b as f64, &mut d_mix);
        for a in 0..k {
            let (slot, row) = if learner.cfg.shared {
                (0, i * k + a)
            } else {
                (a, i)
            };
            d_agent_out[slot][row * j1 + t.action[a]] += dq[a];
        }
    }
    let grads = traces
        .iter()
        .zip(&d_agent_out)
        .enumerate()
        .map(|(n, (tr, d))| Ok(backprop(&learner.agents[n], tr, d)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss / b as f64, grads, d_mix))
}

impl QmixLearner {
    /// One SGD step on the mixed TD loss; gradients reach the agent
    /// networks through the mixer.
    pub fn train_step(&mut self, buffer: &ReplayBuffer, rng: &mut Rng) -> Result<f64> {
        let batch = buffer.sample(self.batch_size, rng)?;
        let (loss, grads, d_mix) = qmix_gradients(self, &batch)?;
        for (net, g) in self.agents.iter_mut().zip(&grads) {
            apply_gradient(net, g, self.learning_rate)?;
        }
        for (p, g) in self.mixer.params.iter_mut().zip(&d_mix) {
            *p -= self.learning_rate * g;
        }
        self.steps += 1;
        if self.target_sync > 0 && self.steps % self.target_sync == 0 {
            self.sync_target();
        }
        Ok(loss)
    }
}
