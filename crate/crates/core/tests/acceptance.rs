//! Acceptance criteria, one test per criterion. Each test prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use cffl::coalition::{
    brute_force_stability, switch_dynamics, Game, GameConfig, Partition, SurrogateOracle,
    SwitchConfig, SwitchOrder, UtilityConstant, UtilityOracle,
};
use cffl::config::{ExperimentConfig, Strategy};
use cffl::drl::{run_cffl, Backend, CfflConfig, MixingNetwork};
use cffl::estimator::{
    backward, mse_loss, Activation, Layer, LayeredModel, ModelSpec, TrainBatch, TrainSet,
};
use cffl::experiment::{compare_strategies, run_experiment, ARTIFACTS};
use cffl::federation::{
    dis_weight, normalized_weights, plain_context, rsrp_dis_weight, run_fl_round, FlGroup,
    RoundConfig, WeightStrategy,
};
use cffl::hfl::{
    distill_to_local, run_hfl_round, train_distill_global, HflConfig, HflPair, TrainSchedule,
};
use cffl::metrics::{
    comm_overhead, dataset_correlation_matrix, improvement, OverheadAlgo, OverheadInputs,
};
use cffl::seed::{rng_for, Rng};

fn report(n: usize, ok: bool, detail: impl std::fmt::Display) {
    println!(
        "criterion {n}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Errors drawn from a hash of (seed, group, member), so every group has its
/// own arbitrary error profile.
struct HashOracle {
    users: usize,
    seed: u64,
}

impl UtilityOracle for HashOracle {
    fn users(&self) -> usize {
        self.users
    }

    fn group_errors(&self, group: &[usize]) -> cffl::Result<Vec<f64>> {
        let mut sorted = group.to_vec();
        sorted.sort_unstable();
        Ok(group
            .iter()
            .map(|&m| {
                let mut h = DefaultHasher::new();
                (self.seed, &sorted, m).hash(&mut h);
                (h.finish() >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect())
    }
}

fn random_game(rng: &mut Rng, users: usize) -> (HashOracle, GameConfig) {
    let oracle = HashOracle {
        users,
        seed: rng.random(),
    };
    let constant = if rng.random_bool(0.5) {
        UtilityConstant::GroupSize
    } else {
        UtilityConstant::Fixed(rng.random_range(0.5..4.0))
    };
    let volumes = (0..users).map(|_| rng.random_range(1.0..500.0)).collect();
    (oracle, GameConfig::new(constant, volumes).unwrap())
}

fn random_partition(rng: &mut Rng, users: usize, j: usize) -> Partition {
    Partition::new((0..users).map(|_| rng.random_range(0..=j)).collect(), j).unwrap()
}

/// Independent `Σ_S (A − Σ_{p∈S} e_p)`, with label 0 meaning singleton.
fn oracle_potential(p: &Partition, oracle: &dyn UtilityOracle, cfg: &GameConfig) -> f64 {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (u, &c) in p.assignment().iter().enumerate() {
        if c == 0 {
            groups.push(vec![u]);
        } else {
            by_label.entry(c).or_default().push(u);
        }
    }
    groups.extend(by_label.into_values());
    groups
        .iter()
        .map(|g| {
            let a = match cfg.constant {
                UtilityConstant::GroupSize => g.len() as f64,
                UtilityConstant::Fixed(a) => a,
            };
            let e: f64 = oracle
                .group_errors(g)
                .unwrap()
                .iter()
                .map(|e| e.clamp(0.0, 1.0))
                .sum();
            a - e
        })
        .sum()
}

#[test]
fn criterion_01_altruistic_gain_equals_potential_difference() {
    let mut rng = rng_for(101, 0, 0);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 1200 {
        let users = rng.random_range(2..=8);
        let j = rng.random_range(1..=3);
        let (oracle, cfg) = random_game(&mut rng, users);
        let game = Game::new(&oracle, &cfg).unwrap();
        for _ in 0..20 {
            let p = random_partition(&mut rng, users, j);
            let u = rng.random_range(0..users);
            let t = rng.random_range(0..=j);
            if t == p.label(u) {
                continue;
            }
            let q = p.with_move(u, t).unwrap();
            let expected =
                oracle_potential(&q, &oracle, &cfg) - oracle_potential(&p, &oracle, &cfg);
            let gain = game.altruistic_gain(&p, u, t).unwrap();
            worst = worst.max((gain - expected).abs());
            checked += 1;
        }
    }
    report(
        1,
        worst <= 1e-9,
        format!("{checked} switches, max |gain - dphi| = {worst:.2e}"),
    );
}

#[test]
fn criterion_02_shares_sum_to_utility_and_potential_equals_total() {
    let mut rng = rng_for(102, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let users = rng.random_range(1..=8);
        let j = rng.random_range(1..=3);
        let (oracle, cfg) = random_game(&mut rng, users);
        let game = Game::new(&oracle, &cfg).unwrap();
        let p = random_partition(&mut rng, users, j);
        for g in p.groups() {
            let (u, shares) = game.group_payoffs(&g).unwrap();
            worst = worst.max((shares.iter().sum::<f64>() - u).abs());
        }
        let phi = game.potential(&p).unwrap();
        worst = worst.max((phi - game.total_utility(&p).unwrap()).abs());
        worst = worst.max((phi - oracle_potential(&p, &oracle, &cfg)).abs());
    }
    report(
        2,
        worst <= 1e-12,
        format!("100 partitions, max deviation {worst:.2e}"),
    );
}

#[test]
fn criterion_03_switch_dynamics_end_in_the_stable_set() {
    let mut rng = rng_for(103, 0, 0);
    let mut failures = Vec::new();
    for instance in 0..20 {
        let (oracle, cfg) = random_game(&mut rng, 5);
        let stability = brute_force_stability(&oracle, &cfg, 5, 2).unwrap();
        let start = random_partition(&mut rng, 5, 2);
        let switch = SwitchConfig {
            order: if instance % 2 == 0 {
                SwitchOrder::RoundRobin
            } else {
                SwitchOrder::Random
            },
            seed: instance,
            max_switches: None,
        };
        let (end, _) = switch_dynamics(&start, &oracle, &cfg, &switch).unwrap();
        if !stability.contains(&end) {
            failures.push(format!("instance {instance}: end not stable"));
        }
        if !stability.contains(&stability.argmax) {
            failures.push(format!("instance {instance}: argmax not stable"));
        }
    }
    report(
        3,
        failures.is_empty(),
        format!("20 instances K=5 J=2 {failures:?}"),
    );
}

fn finite_difference(model: &LayeredModel, batch: &TrainBatch, step: f64) -> Vec<f64> {
    let base = model.params_flat();
    let mut probe = model.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + step;
            probe.set_params_flat(&p).unwrap();
            let up = mse_loss(&probe, batch).unwrap();
            p[i] = base[i] - step;
            probe.set_params_flat(&p).unwrap();
            let down = mse_loss(&probe, batch).unwrap();
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[test]
fn criterion_04_gradients_match_finite_differences() {
    let mut rng = rng_for(104, 0, 0);
    let mut worst = 0.0f64;
    let mut kinds = [0usize; 3];
    for i in 0..20 {
        let pilot = rng.random_range(2..=4);
        let out = rng.random_range(2..=5);
        let model = if i % 4 == 3 {
            let a = Layer::dense(2 * pilot, 6, Activation::Relu, &mut rng);
            let b = Layer::dense(6, out, Activation::Identity, &mut rng);
            LayeredModel::new(vec![a, b], 1).unwrap()
        } else {
            ModelSpec {
                conv_layers: rng.random_range(1..=2),
                channels: rng.random_range(1..=3),
                kernel: 3,
                batch_norm: i % 2 == 0,
                shared_blocks: 1,
            }
            .build(pilot, out, &mut rng)
            .unwrap()
        };
        for d in model.descriptors() {
            kinds[d.kind as usize] += 1;
        }
        let n = rng.random_range(3..=5);
        let batch = TrainBatch::new(
            (0..n * model.input_size())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            (0..n * out).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n,
        )
        .unwrap();
        let analytic = backward(&model, &batch).unwrap().flat();
        let numeric = finite_difference(&model, &batch, 1e-5);
        for (a, b) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
        }
    }
    let all_kinds = kinds.iter().all(|&k| k > 0);
    report(
        4,
        worst < 1e-4 && all_kinds,
        format!("20 models, layer counts {kinds:?}, max relative error {worst:.2e}"),
    );
}

#[test]
fn criterion_05_aggregation_contracts() {
    let mut rng = rng_for(105, 0, 0);
    let mut problems = Vec::new();
    for _ in 0..100 {
        let w: BTreeMap<usize, f64> = (0..rng.random_range(1..10))
            .map(|k| (k, rng.random_range(0.01..5.0)))
            .collect();
        let s: f64 = normalized_weights(&w).unwrap().values().sum();
        if (s - 1.0).abs() > 1e-12 {
            problems.push(format!("weights sum {s}"));
        }
    }

    let model = LayeredModel::mlp(&[6, 5, 4], Activation::Relu, &mut rng).unwrap();
    let batch = TrainBatch::new(
        (0..10 * 6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..10 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        10,
    )
    .unwrap();
    let sets = BTreeMap::from([(3, TrainSet::from_batch(&batch))]);
    let group = FlGroup::new(0, vec![3], 3).unwrap();
    let cfg = RoundConfig {
        learning_rate: 0.05,
        ..RoundConfig::default()
    };
    let (next, _) = run_fl_round(
        &group,
        &model,
        &sets,
        WeightStrategy::Plain,
        &plain_context(&[3]),
        &cfg,
    )
    .unwrap();
    let g = backward(&model, &batch).unwrap().flat();
    let solo: Vec<f64> = model
        .params_flat()
        .iter()
        .zip(&g)
        .map(|(p, g)| p - 0.05 * g)
        .collect();
    let same = next
        .params_flat()
        .iter()
        .zip(&solo)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        problems.push("single-member round differs from a solo step".into());
    }

    let l = 80.0;
    let dis: Vec<f64> = [0.0, l, 1.5 * l]
        .iter()
        .map(|&d| dis_weight(d, l).unwrap())
        .collect();
    if dis != [1.0, 0.0, 0.0] {
        problems.push(format!("dis weights {dis:?}"));
    }
    let (pc, band, alpha) = (-71.0, 3.0, 0.6);
    let rsrp: Vec<f64> = [pc, pc + band, pc - band]
        .iter()
        .map(|&p| rsrp_dis_weight(p, pc, band, alpha).unwrap())
        .collect();
    if rsrp != [alpha, 0.0, 0.0] {
        problems.push(format!("rsrp weights {rsrp:?}"));
    }
    report(5, problems.is_empty(), format!("{problems:?}"));
}

fn layers_hash(layers: &[Layer]) -> String {
    let mut h = Sha256::new();
    for l in layers {
        for v in l.weights.iter().chain(&l.biases) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn criterion_06_hfl_contracts() {
    let mut rng = rng_for(106, 0, 0);
    let pilot = 6;
    let out = 4;
    let local = ModelSpec {
        conv_layers: 1,
        channels: 3,
        kernel: 3,
        batch_norm: true,
        shared_blocks: 1,
    }
    .build(pilot, out, &mut rng)
    .unwrap();
    let global = ModelSpec {
        conv_layers: 3,
        channels: 3,
        kernel: 3,
        batch_norm: true,
        shared_blocks: 1,
    }
    .build(pilot, out, &mut rng)
    .unwrap();
    let mut set = |n: usize| {
        TrainSet::from_batch(
            &TrainBatch::new(
                (0..n * 2 * pilot)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
                (0..n * out).map(|_| rng.random_range(-1.0..1.0)).collect(),
                n,
            )
            .unwrap(),
        )
    };
    let server = set(40);
    let datasets: BTreeMap<usize, TrainSet> = (0..3).map(|m| (m, set(30))).collect();
    let pair = HflPair::new(global, local, server.clone()).unwrap();
    let schedule = TrainSchedule {
        epochs: 2,
        learning_rate: 1e-2,
        batch_size: 8,
        seed: 4,
    };
    let cfg = HflConfig {
        local: schedule.clone(),
        server: schedule.clone(),
        distill: TrainSchedule {
            epochs: 5,
            ..schedule.clone()
        },
        ..HflConfig::default()
    };
    let mut problems = Vec::new();

    let before = layers_hash(pair.global.shared_layers());
    let trained = train_distill_global(&pair.global, &server, &schedule).unwrap();
    if layers_hash(trained.shared_layers()) != before {
        problems.push("server training changed the shared part".to_string());
    }
    if layers_hash(trained.distill_layers()) == layers_hash(pair.global.distill_layers()) {
        problems.push("server training left the suffix untouched".to_string());
    }

    let (distilled, _) =
        distill_to_local(&trained, &pair.local, &server, &cfg.distill, cfg.target).unwrap();
    if layers_hash(distilled.shared_layers()) != before {
        problems.push("distillation changed the shared part".to_string());
    }

    let members = [0, 1, 2];
    let (next, rep) = run_hfl_round(&pair, &members, &datasets, &[1.0; 3], &cfg).unwrap();
    if next.global.shared_layers() != next.local.shared_layers() {
        problems.push("shared parts differ after the round".to_string());
    }
    let expected_uplink = members.len() * pair.local.shared_param_count();
    if rep.uplink_params != expected_uplink {
        problems.push(format!("uplink {} != {expected_uplink}", rep.uplink_params));
    }
    report(
        6,
        problems.is_empty(),
        format!("uplink {} params {problems:?}", rep.uplink_params),
    );
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join("desk.toml")).unwrap()
}

#[test]
fn criterion_07_coalitions_beat_grand_fl() {
    let mut cfg = desk();
    cfg.seed = 0;
    cfg.snr_db = vec![10.0];
    cfg.compare.seeds = 5;
    let rows = compare_strategies(&cfg, &[Strategy::Fl, Strategy::Coalition]).unwrap();
    let fl = rows
        .iter()
        .find(|r| r.strategy == Strategy::Fl)
        .unwrap()
        .mean_nmse;
    let co = rows
        .iter()
        .find(|r| r.strategy == Strategy::Coalition)
        .unwrap()
        .mean_nmse;
    report(
        7,
        co <= 0.9 * fl,
        format!(
            "mean NMSE fl {fl:.4} coalition {co:.4} ratio {:.3}",
            co / fl
        ),
    );
}

#[test]
fn criterion_08_mixer_is_monotone_in_every_agent() {
    let mut rng = rng_for(108, 0, 0);
    let mut violations = 0;
    let mut checks = 0;
    for _ in 0..100 {
        let agents = rng.random_range(2..=8);
        let state_dim = rng.random_range(1..=12);
        let embed = rng.random_range(1..=8);
        let mixer = MixingNetwork::new(agents, state_dim, embed, &mut rng);
        let state: Vec<f64> = (0..state_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let q: Vec<f64> = (0..agents).map(|_| rng.random_range(-2.0..2.0)).collect();
        let base = mixer.mix(&q, &state).unwrap();
        for a in 0..agents {
            let mut up = q.clone();
            up[a] += 1e-3;
            checks += 1;
            if mixer.mix(&up, &state).unwrap() < base {
                violations += 1;
            }
        }
    }
    report(
        8,
        violations == 0,
        format!("{checks} perturbations, {violations} decreases"),
    );
}

#[test]
fn criterion_09_rl_reward_improves() {
    let cfg = desk();
    let scenario = cffl::experiment::scenario_at(&cfg, cfg.scenario.snr_db, 0).unwrap();
    let correlation = dataset_correlation_matrix(&scenario.datasets(), 400).unwrap();
    let oracle = SurrogateOracle::new(correlation, 0.5).unwrap();
    let game = GameConfig::uniform(oracle.users());
    let mut lines = Vec::new();
    let mut ok = true;
    for backend in [Backend::Dqn, Backend::Qmix] {
        let history = run_cffl(&CfflConfig::default(), backend, &oracle, &game, 0).unwrap();
        let mean =
            |r: &[cffl::drl::EpochRecord]| r.iter().map(|e| e.reward).sum::<f64>() / r.len() as f64;
        let first = mean(&history[..50]);
        let last = mean(&history[history.len() - 50..]);
        ok &= last > first;
        lines.push(format!("{backend:?} first50 {first:.4} last50 {last:.4}"));
    }
    report(9, ok, lines.join("; "));
}

#[test]
fn criterion_10_overhead_and_model_accounting() {
    let inputs = OverheadInputs {
        users: 10,
        w_fl: 8_428_416,
        w_hfl: 8_428_416,
        rounds: 1,
        epochs: 1,
        observation: 0,
        action: 0,
        policy: 0,
        max_coalitions: 3,
    }
    .with_centralized_payloads();
    let mut problems = Vec::new();
    for algo in OverheadAlgo::ALL {
        let o = comm_overhead(algo, &inputs);
        if o.per_round != 168_568_320 {
            problems.push(format!("{} per round {}", algo.name(), o.per_round));
        }
    }
    if (inputs.action, inputs.policy) != (40, 40) {
        problems.push(format!("DQN payloads {} {}", inputs.action, inputs.policy));
    }
    // per epoch minus one round leaves K[(O + A) + P]
    let rl = |algo| comm_overhead(algo, &inputs).per_epoch - 168_568_320;
    if rl(OverheadAlgo::DqnFl) != 10 * (40 + 40) {
        problems.push(format!("DQN RL traffic {}", rl(OverheadAlgo::DqnFl)));
    }
    if rl(OverheadAlgo::QmixFl) != 10 * (4 + 4) {
        problems.push(format!("Qmix RL traffic {}", rl(OverheadAlgo::QmixFl)));
    }
    let gain = 100.0 * improvement(9.337044992e9, 7.806124032e9).unwrap();
    if (gain - 16.40).abs() > 0.01 {
        problems.push(format!("improvement {gain}"));
    }
    report(
        10,
        problems.is_empty(),
        format!("improvement {gain:.3}% {problems:?}"),
    );
}

#[test]
fn criterion_11_smoke_runs_are_byte_identical() {
    let cfg = ExperimentConfig::load(&configs_dir().join("smoke.toml")).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let differing: Vec<&str> = ARTIFACTS
        .iter()
        .copied()
        .filter(|f| {
            std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap()
        })
        .collect();
    report(
        11,
        differing.is_empty(),
        format!("{} artifacts, differing {differing:?}", ARTIFACTS.len()),
    );
}
