//! Centralized DQN with one `J + 1`-valued head per user, trained with the
//! sum of per-head temporal-difference errors.

use rand::Rng as _;

use super::{argmax, ReplayBuffer, RlState};
use crate::estimator::{
    apply_gradient, backprop, forward, forward_trace, Activation, LayeredModel, NormMode,
};
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub online: LayeredModel,
    pub target: LayeredModel,
    pub users: usize,
    pub max_coalitions: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Target network copy period in train steps.
    pub target_sync: usize,
    pub steps: usize,
}

impl DqnAgent {
    pub fn new(users: usize, max_coalitions: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let input = RlState::encoded_len(users, max_coalitions);
        let online = LayeredModel::mlp(
            &[input, hidden, hidden, users * (max_coalitions + 1)],
            Activation::Relu,
            rng,
        )?;
        Ok(Self {
            target: online.clone(),
            online,
            users,
            max_coalitions,
            gamma: 0.9,
            learning_rate: 1e-2,
            batch_size: 32,
            target_sync: 50,
            steps: 0,
        })
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }
}

/// Per-user head values, `K` rows of `J + 1`.
pub fn dqn_q_values(net: &LayeredModel, state: &RlState) -> Result<Vec<Vec<f64>>> {
    let out = forward(net, &state.encode(), 1)?;
    let j1 = state.max_coalitions() + 1;
    if out.len() != state.users() * j1 {
        return Err(Error::shape("dqn_q_values", state.users() * j1, out.len()));
    }
    Ok(out.chunks(j1).map(|c| c.to_vec()).collect())
}

/// ε-greedy per user: one coin per user, then either a uniform label or
/// the head's argmax.
pub fn dqn_select(
    net: &LayeredModel,
    state: &RlState,
    eps: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "ε must lie in [0, 1], got {eps}"
        )));
    }
    let q = dqn_q_values(net, state)?;
    let j1 = state.max_coalitions() + 1;
    Ok(q.iter()
        .map(|head| {
            let explore = rng.random::<f64>() < eps;
            if explore {
                rng.random_range(0..j1)
            } else {
                argmax(head)
            }
        })
        .collect())
}

/// One SGD step on `(1/B) Σ_b Σ_k (r + γ max_a′ Q̄_k(s′, a′) − Q_k(s, a_k))²`.
pub fn dqn_train_step(buffer: &ReplayBuffer, agent: &mut DqnAgent, rng: &mut Rng) -> Result<f64> {
    let batch = buffer.sample(agent.batch_size, rng)?;
    let b = batch.len();
    let k = agent.users;
    let j1 = agent.max_coalitions + 1;
    let dim = RlState::encoded_len(k, agent.max_coalitions);
    let mut inputs = Vec::with_capacity(b * dim);
    let mut next_inputs = Vec::with_capacity(b * dim);
    for t in &batch {
        inputs.extend(t.state.encode());
        next_inputs.extend(t.next_state.encode());
    }
    let trace = forward_trace(&agent.online, &inputs, b, NormMode::Training)?;
    let next_q = forward(&agent.target, &next_inputs, b)?;
    let q = trace.output();
    let mut d_out = vec![0.0; q.len()];
    let mut loss = 0.0;
    for (i, t) in batch.iter().enumerate() {
        if t.action.len() != k {
            return Err(Error::shape("dqn_train_step", k, t.action.len()));
        }
        for (u, &a) in t.action.iter().enumerate() {
            let row = i * k * j1 + u * j1;
            let bootstrap = if t.done {
                0.0
            } else {
                next_q[row..row + j1]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let y = t.reward + agent.gamma * bootstrap;
            let diff = q[row + a] - y;
            loss += diff * diff;
            d_out[row + a] = 2.0 * diff / b as f64;
        }
    }
    let (grad, _) = backprop(&agent.online, &trace, &d_out)?;
    apply_gradient(&mut agent.online, &grad, agent.learning_rate)?;
    agent.steps += 1;
    if agent.target_sync > 0 && agent.steps % agent.target_sync == 0 {
        agent.sync_target();
    }
    Ok(loss / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coalition::Partition;
    use crate::drl::Transition;
    use crate::estimator::Layer;
    use crate::seed::rng_for;

    #[test]
    fn greedy_selection_is_per_head_argmax() {
        let mut rng = rng_for(1, 0, 0);
        for _ in 0..20 {
            let agent = DqnAgent::new(4, 3, 16, &mut rng).unwrap();
            let s = RlState::from_partition(&Partition::new(vec![0, 1, 3, 1], 3).unwrap());
            let q = dqn_q_values(&agent.online, &s).unwrap();
            let a = dqn_select(&agent.online, &s, 0.0, &mut rng).unwrap();
            let a2 = dqn_select(&agent.online, &s, 0.0, &mut rng).unwrap();
            assert_eq!(a, a2);
            for (u, head) in q.iter().enumerate() {
                assert_eq!(a[u], argmax(head));
            }
        }
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = rng_for(2, 0, 0);
        let agent = DqnAgent::new(2, 3, 8, &mut rng).unwrap();
        let s = RlState::from_partition(&Partition::all_solo(2, 3));
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[dqn_select(&agent.online, &s, 1.0, &mut rng).unwrap()[0]] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn single_user_single_coalition_picks_larger_value() {
        let mut rng = rng_for(3, 0, 0);
        let input = RlState::encoded_len(1, 1);
        let mut layer = Layer::dense(input, 2, Activation::Identity, &mut rng);
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        layer.biases = vec![0.2, 0.7];
        let net = LayeredModel::new(vec![layer], 0).unwrap();
        let s = RlState::from_partition(&Partition::all_solo(1, 1));
        assert_eq!(dqn_select(&net, &s, 0.0, &mut rng).unwrap(), vec![1]);
    }

    #[test]
    fn zero_discount_regresses_onto_rewards() {
        let mut rng = rng_for(4, 0, 0);
        let mut agent = DqnAgent::new(3, 2, 32, &mut rng).unwrap();
        agent.gamma = 0.0;
        agent.learning_rate = 0.02;
        agent.batch_size = 3;
        let mut buffer = ReplayBuffer::new(100);
        let data: Vec<(Vec<usize>, Vec<usize>, f64)> = vec![
            (vec![0, 0, 0], vec![1, 1, 0], 0.8),
            (vec![1, 1, 0], vec![2, 1, 1], 0.3),
            (vec![2, 0, 1], vec![0, 2, 2], 0.55),
        ];
        for (s, a, r) in &data {
            let st = RlState::from_partition(&Partition::new(s.clone(), 2).unwrap());
            let nx = RlState::from_partition(&Partition::new(a.clone(), 2).unwrap());
            buffer
                .push(Transition {
                    state: st,
                    action: a.clone(),
                    reward: *r,
                    next_state: nx,
                    done: false,
                })
                .unwrap();
        }
        for _ in 0..3000 {
            let loss = dqn_train_step(&buffer, &mut agent, &mut rng).unwrap();
            assert!(loss.is_finite());
        }
        for (s, a, r) in &data {
            let st = RlState::from_partition(&Partition::new(s.clone(), 2).unwrap());
            let q = dqn_q_values(&agent.online, &st).unwrap();
            for (u, &au) in a.iter().enumerate() {
                assert!((q[u][au] - r).abs() < 1e-2, "{} vs {r}", q[u][au]);
            }
        }
    }

    #[test]
    fn target_sync_copies_exactly() {
        let mut rng = rng_for(5, 0, 0);
        let mut agent = DqnAgent::new(2, 1, 8, &mut rng).unwrap();
        agent.online.layers_mut()[0].weights[0] += 1.0;
        assert_ne!(agent.online, agent.target);
        agent.sync_target();
        assert_eq!(agent.online, agent.target);
    }

    #[test]
    fn train_step_needs_a_full_batch() {
        let mut rng = rng_for(6, 0, 0);
        let mut agent = DqnAgent::new(2, 1, 8, &mut rng).unwrap();
        let buffer = ReplayBuffer::new(10);
        assert!(matches!(
            dqn_train_step(&buffer, &mut agent, &mut rng),
            Err(Error::InsufficientBuffer { .. })
        ));
    }
}
