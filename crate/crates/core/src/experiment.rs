//! End-to-end runs: coalition formation on a generated scenario, the
//! NMSE-versus-SNR sweep, strategy comparisons and artifact files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::channel::{generate_scenario, write_dataset, Scenario};
use crate::coalition::{
    brute_force_stability, switch_dynamics, write_trace, Game, GameConfig, MemoOracle, Partition,
    SurrogateOracle, SwitchConfig, TraceRow, UtilityOracle, ENUMERATION_LIMIT,
};
use crate::config::{ExperimentConfig, GameBackend, InitialPartition, OracleKind, Strategy};
use crate::drl::{mean_clipped_error, reward, run_cffl, write_history_csv, Backend, EpochRecord};
use crate::estimator::{evaluate_nmse, linear_to_db, TrainSet};
use crate::federation::WeightStrategy;
use crate::hfl::{run_hfl_round, set_shared, HflPair, HflRoundReport};
use crate::metrics::{
    comm_overhead, dataset_correlation_matrix, write_matrix_csv, write_overhead_csv, OverheadInputs,
};
use crate::pipeline::FlPipelineOracle;
use crate::seed::{rng_for, stream};
use crate::{Error, Result};

pub const NMSE_FILE: &str = "nmse_vs_snr.csv";
pub const REWARD_FILE: &str = "reward_vs_epoch.csv";
pub const CORRELATION_FILE: &str = "correlation_matrix.csv";
pub const OVERHEAD_FILE: &str = "overhead.csv";
pub const TRACE_FILE: &str = "partition_trace.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

pub const ARTIFACTS: [&str; 5] = [
    NMSE_FILE,
    REWARD_FILE,
    CORRELATION_FILE,
    OVERHEAD_FILE,
    TRACE_FILE,
];

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// The configured scenario with its SNR replaced.
pub fn scenario_at(cfg: &ExperimentConfig, snr_db: f64, seed: u64) -> Result<Scenario> {
    let mut sc = cfg.scenario.clone();
    sc.snr_db = snr_db;
    generate_scenario(&sc, seed)
}

pub fn correlation_of(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<Vec<Vec<f64>>> {
    dataset_correlation_matrix(&scenario.datasets(), cfg.game.correlation_samples)
}

fn game_config(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<GameConfig> {
    let counts: Vec<usize> = scenario.users.iter().map(|u| u.dataset.len()).collect();
    cfg.game.game_config(&counts)
}

fn initial_partition(cfg: &ExperimentConfig, users: usize) -> Result<Partition> {
    match cfg.game.initial {
        InitialPartition::Solo => Ok(Partition::all_solo(users, cfg.cffl.max_coalitions)),
        InitialPartition::Grand => Partition::grand(users, cfg.cffl.max_coalitions),
    }
}

/// Potential maximizer when the assignment space is enumerable, otherwise
/// the end point of switch dynamics.
pub fn best_partition(
    cfg: &ExperimentConfig,
    oracle: &dyn UtilityOracle,
    game: &GameConfig,
) -> Result<Partition> {
    let k = oracle.users();
    let j = cfg.cffl.max_coalitions;
    if Partition::space_size(k, j) <= ENUMERATION_LIMIT {
        return Ok(brute_force_stability(oracle, game, k, j)?.argmax);
    }
    let switch = SwitchConfig {
        order: cfg.game.order,
        seed: cfg.seed,
        max_switches: None,
    };
    Ok(switch_dynamics(&initial_partition(cfg, k)?, oracle, game, &switch)?.0)
}

/// Result of one coalition-formation run.
#[derive(Debug, Clone)]
pub struct Formation {
    pub partition: Partition,
    pub history: Vec<EpochRecord>,
    pub trace: Vec<TraceRow>,
}

fn errors_of(p: &Partition, oracle: &dyn UtilityOracle) -> Result<Vec<f64>> {
    let mut errors = vec![0.0; p.users()];
    for g in p.groups() {
        for (m, e) in g.iter().zip(oracle.group_errors(&g)?) {
            errors[*m] = e;
        }
    }
    Ok(errors)
}

fn model_traffic(p: &Partition, rounds: usize, params: usize) -> u128 {
    let grouped = p.assignment().iter().filter(|&&c| c > 0).count() as u128;
    rounds as u128 * 2 * grouped * params as u128
}

fn switch_formation(
    cfg: &ExperimentConfig,
    oracle: &dyn UtilityOracle,
    game: &GameConfig,
    model_params: usize,
) -> Result<Formation> {
    let initial = initial_partition(cfg, oracle.users())?;
    let switch = SwitchConfig {
        order: cfg.game.order,
        seed: cfg.seed,
        max_switches: None,
    };
    let (partition, trace) = switch_dynamics(&initial, oracle, game, &switch)?;
    let evaluator = Game::new(oracle, game)?;
    let mut history = Vec::with_capacity(trace.len() + 1);
    let mut p = initial;
    for step in 0..=trace.len() {
        if step > 0 {
            let row = &trace[step - 1];
            p = p.with_move(row.user, row.to)?;
        }
        let errors = errors_of(&p, oracle)?;
        let mean_error = mean_clipped_error(&errors)?;
        history.push(EpochRecord {
            epoch: step,
            action: p.assignment().to_vec(),
            reward: reward(mean_error),
            mean_error,
            potential: evaluator.potential(&p)?,
            errors,
            epsilon: 0.0,
            loss: None,
            params_exchanged: model_traffic(&p, cfg.pipeline.rounds, model_params),
        });
    }
    Ok(Formation {
        partition,
        history,
        trace,
    })
}

/// Label changes between consecutive epochs as trace rows.
fn history_trace(
    history: &[EpochRecord],
    oracle: &dyn UtilityOracle,
    game: &GameConfig,
    j: usize,
) -> Result<Vec<TraceRow>> {
    let evaluator = Game::new(oracle, game)?;
    let mut rows = Vec::new();
    for pair in history.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let p = Partition::new(next.action.clone(), j)?;
        let utility = evaluator.total_utility(&p)?;
        for (u, (&from, &to)) in prev.action.iter().zip(&next.action).enumerate() {
            if from != to {
                rows.push(TraceRow {
                    step: next.epoch,
                    user: u,
                    from,
                    to,
                    potential: next.potential,
                    utility,
                });
            }
        }
    }
    Ok(rows)
}

/// Runs the configured backend against `oracle`.
pub fn form_coalitions(
    cfg: &ExperimentConfig,
    backend: GameBackend,
    oracle: &dyn UtilityOracle,
    game: &GameConfig,
    model_params: usize,
) -> Result<Formation> {
    let rl = match backend {
        GameBackend::Switch => return switch_formation(cfg, oracle, game, model_params),
        GameBackend::Dqn => Backend::Dqn,
        GameBackend::Qmix => Backend::Qmix,
    };
    let history = run_cffl(&cfg.cffl_config(model_params), rl, oracle, game, cfg.seed)?;
    let best = history
        .iter()
        .fold(None::<&EpochRecord>, |acc, r| match acc {
            Some(b) if b.reward >= r.reward => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| Error::InvalidArgument("no epochs were run".into()))?;
    let partition = Partition::new(best.action.clone(), cfg.cffl.max_coalitions)?;
    let trace = history_trace(&history, oracle, game, cfg.cffl.max_coalitions)?;
    Ok(Formation {
        partition,
        history,
        trace,
    })
}

/// Per-user test NMSE after training every group of `p` with FL.
pub fn partition_nmse(oracle: &FlPipelineOracle, p: &Partition) -> Result<Vec<f64>> {
    let mut out = vec![0.0; p.users()];
    for g in p.groups() {
        let outcome = oracle.train_group(&g)?;
        for (m, e) in g.iter().zip(outcome.errors) {
            out[*m] = e;
        }
    }
    Ok(out)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrRow {
    pub snr_db: f64,
    pub mean_nmse: f64,
    pub nmse_db: f64,
}

pub fn write_snr_csv(path: &Path, rows: &[SnrRow]) -> Result<()> {
    let mut out = String::from("snr_db,mean_nmse,nmse_db\n");
    for r in rows {
        writeln!(out, "{},{:.8e},{:.6}", r.snr_db, r.mean_nmse, r.nmse_db).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean test NMSE of `p` trained at every configured SNR.
pub fn nmse_sweep(cfg: &ExperimentConfig, p: &Partition, seed: u64) -> Result<Vec<SnrRow>> {
    cfg.snr_db
        .iter()
        .map(|&snr| {
            let scenario = scenario_at(cfg, snr, seed)?;
            let oracle = FlPipelineOracle::from_scenario(&scenario, cfg.pipeline.clone(), seed)?;
            let m = mean(&partition_nmse(&oracle, p)?);
            Ok(SnrRow {
                snr_db: snr,
                mean_nmse: m,
                nmse_db: linear_to_db(m),
            })
        })
        .collect()
}

fn local_param_count(cfg: &ExperimentConfig) -> Result<usize> {
    let mut rng = rng_for(cfg.seed, stream::MODEL_INIT, 0);
    Ok(cfg
        .pipeline
        .model
        .build(
            cfg.scenario.pilot_length,
            cfg.scenario.target_dim(),
            &mut rng,
        )?
        .param_count())
}

fn hfl_pair(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64) -> Result<HflPair> {
    let mut rng = rng_for(seed, stream::MODEL_INIT, 1);
    let (p, t) = (cfg.scenario.pilot_length, cfg.scenario.target_dim());
    let local = cfg.hfl.local_model.build(p, t, &mut rng)?;
    let mut global = cfg.hfl.global_model.build(p, t, &mut rng)?;
    set_shared(&mut global, local.shared_layers())?;
    HflPair::new(global, local, TrainSet::from_dataset(&scenario.server))
}

pub fn overhead_inputs(cfg: &ExperimentConfig) -> Result<OverheadInputs> {
    let mut rng = rng_for(cfg.seed, stream::MODEL_INIT, 1);
    let w_hfl = cfg
        .hfl
        .local_model
        .build(
            cfg.scenario.pilot_length,
            cfg.scenario.target_dim(),
            &mut rng,
        )?
        .param_count();
    Ok(OverheadInputs {
        users: cfg.scenario.users as u64,
        w_fl: local_param_count(cfg)? as u64,
        w_hfl: w_hfl as u64,
        rounds: cfg.pipeline.rounds as u64,
        epochs: cfg.cffl.epochs as u64,
        observation: cfg.cffl.observation as u64,
        action: 0,
        policy: 0,
        max_coalitions: cfg.cffl.max_coalitions as u64,
    }
    .with_centralized_payloads())
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub partition: Partition,
    pub nmse: Vec<SnrRow>,
    pub history: Vec<EpochRecord>,
    pub manifest: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Records config hash, seed, code version and output digests.
pub fn write_manifest(out_dir: &Path, cfg: &ExperimentConfig, files: &[&str]) -> Result<PathBuf> {
    let mut digests = BTreeMap::new();
    for f in files {
        digests.insert(f.to_string(), sha256_file(&out_dir.join(f))?);
    }
    let mut text = String::new();
    writeln!(text, "code_version = \"{CODE_VERSION}\"").expect("string write");
    writeln!(text, "config_hash = \"{}\"", cfg.hash()?).expect("string write");
    writeln!(text, "seed = {}", cfg.seed).expect("string write");
    writeln!(text, "\n[files]").expect("string write");
    for (name, digest) in digests {
        writeln!(text, "\"{name}\" = \"{digest}\"").expect("string write");
    }
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Scenario at the configured SNR, the coalition oracle and its game.
pub struct Setup {
    pub scenario: Scenario,
    pub correlation: Vec<Vec<f64>>,
    pub game: GameConfig,
    pub pipeline: FlPipelineOracle,
}

pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    let scenario = scenario_at(cfg, cfg.scenario.snr_db, seed)?;
    let correlation = correlation_of(cfg, &scenario)?;
    let game = game_config(cfg, &scenario)?;
    let pipeline = FlPipelineOracle::from_scenario(&scenario, cfg.pipeline.clone(), seed)?;
    Ok(Setup {
        scenario,
        correlation,
        game,
        pipeline,
    })
}

/// Coalition formation with the configured oracle and backend.
pub fn run_game(cfg: &ExperimentConfig, s: &Setup, backend: GameBackend) -> Result<Formation> {
    let params = local_param_count(cfg)?;
    match cfg.oracle {
        OracleKind::Surrogate => {
            let oracle = SurrogateOracle::new(s.correlation.clone(), cfg.game.solo_error)?;
            form_coalitions(cfg, backend, &oracle, &s.game, params)
        }
        OracleKind::Fl => {
            let oracle = MemoOracle::new(&s.pipeline);
            form_coalitions(cfg, backend, &oracle, &s.game, params)
        }
    }
}

/// Writes the five analysis CSVs and the manifest into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    prepare_dir(out_dir)?;
    let s = setup(cfg, cfg.seed)?;
    write_matrix_csv(&out_dir.join(CORRELATION_FILE), &s.correlation)?;
    let formation = run_game(cfg, &s, cfg.backend)?;
    write_history_csv(&out_dir.join(REWARD_FILE), &formation.history)?;
    write_trace(&out_dir.join(TRACE_FILE), &formation.trace)?;
    let nmse = nmse_sweep(cfg, &formation.partition, cfg.seed)?;
    write_snr_csv(&out_dir.join(NMSE_FILE), &nmse)?;
    write_overhead_csv(&out_dir.join(OVERHEAD_FILE), &overhead_inputs(cfg)?)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let manifest = write_manifest(out_dir, cfg, &ARTIFACTS)?;
    Ok(ExperimentSummary {
        partition: formation.partition,
        nmse,
        history: formation.history,
        manifest,
    })
}

/// Coalition formation only: correlation matrix, reward curve, trace and
/// manifest.
pub fn run_coalition_game(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Formation> {
    cfg.validate()?;
    prepare_dir(out_dir)?;
    let s = setup(cfg, cfg.seed)?;
    write_matrix_csv(&out_dir.join(CORRELATION_FILE), &s.correlation)?;
    let formation = run_game(cfg, &s, cfg.backend)?;
    write_history_csv(&out_dir.join(REWARD_FILE), &formation.history)?;
    write_trace(&out_dir.join(TRACE_FILE), &formation.trace)?;
    write_manifest(out_dir, cfg, &[CORRELATION_FILE, REWARD_FILE, TRACE_FILE])?;
    Ok(formation)
}

/// Writes every user's dataset and the server dataset as binary plus manifest.
pub fn generate_datasets(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    prepare_dir(out_dir)?;
    let scenario = generate_scenario(&cfg.scenario, cfg.seed)?;
    let mut written = Vec::new();
    let sets = scenario
        .users
        .iter()
        .map(|u| (format!("user{}", u.id), &u.dataset))
        .chain(std::iter::once(("server".to_string(), &scenario.server)));
    for (name, ds) in sets {
        if ds.is_empty() {
            continue;
        }
        let bin = out_dir.join(format!("{name}.bin"));
        write_dataset(ds, &bin, &out_dir.join(format!("{name}.manifest")))?;
        written.push(bin);
    }
    Ok(written)
}

/// Per-round member NMSE of one group containing every user.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub round: usize,
    pub member_nmse: Vec<f64>,
    pub uplink_params: usize,
    pub downlink_params: usize,
}

/// Single-group FL (or HFL when enabled) over all users.
pub fn run_training(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<TrainRow>> {
    cfg.validate()?;
    prepare_dir(out_dir)?;
    let s = setup(cfg, cfg.seed)?;
    let members: Vec<usize> = (0..cfg.scenario.users).collect();
    let rows = if cfg.hfl.enabled {
        hfl_rounds(cfg, &s, &members, cfg.seed)?
            .into_iter()
            .enumerate()
            .map(|(round, r)| TrainRow {
                round,
                member_nmse: r.member_nmse_after,
                uplink_params: r.uplink_params,
                downlink_params: r.downlink_params,
            })
            .collect()
    } else {
        let mut rows = Vec::with_capacity(cfg.pipeline.rounds);
        for round in 1..=cfg.pipeline.rounds {
            let mut pc = cfg.pipeline.clone();
            pc.rounds = round;
            let oracle = FlPipelineOracle::from_scenario(&s.scenario, pc, cfg.seed)?;
            let out = oracle.train_group(&members)?;
            let last = out.reports.last().expect("at least one round");
            rows.push(TrainRow {
                round: round - 1,
                member_nmse: out.errors,
                uplink_params: last.params_exchanged / 2,
                downlink_params: last.params_exchanged / 2,
            });
        }
        rows
    };
    let mut text = String::from("round,mode,mean_nmse,uplink_params,downlink_params,member_nmse\n");
    let mode = if cfg.hfl.enabled {
        "hfl"
    } else {
        cfg.pipeline.strategy.name()
    };
    for r in &rows {
        let members: Vec<String> = r.member_nmse.iter().map(|e| format!("{e:.8e}")).collect();
        writeln!(
            text,
            "{},{mode},{:.8e},{},{},{}",
            r.round,
            mean(&r.member_nmse),
            r.uplink_params,
            r.downlink_params,
            members.join(";")
        )
        .expect("string write");
    }
    std::fs::write(out_dir.join(ROUNDS_FILE), text)?;
    Ok(rows)
}

fn hfl_rounds(
    cfg: &ExperimentConfig,
    s: &Setup,
    members: &[usize],
    seed: u64,
) -> Result<Vec<HflRoundReport>> {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for u in &s.scenario.users {
        let (tr, te) = u.dataset.split(cfg.pipeline.train_ratio);
        train.insert(u.id, TrainSet::from_dataset(&tr));
        test.insert(u.id, TrainSet::from_dataset(&te));
    }
    let mut pair = hfl_pair(cfg, &s.scenario, seed)?;
    let beta = vec![1.0; members.len()];
    let mut reports = Vec::with_capacity(cfg.pipeline.rounds);
    for round in 0..cfg.pipeline.rounds {
        let hc = cfg.hfl.hfl_config(crate::seed::derive_seed(
            seed,
            stream::DISTILL,
            round as u64,
        ));
        let (next, mut report) = run_hfl_round(&pair, members, &train, &beta, &hc)?;
        report.member_nmse_after = members
            .iter()
            .map(|m| evaluate_nmse(&next.local, &test[m]))
            .collect::<Result<Vec<_>>>()?;
        pair = next;
        reports.push(report);
    }
    Ok(reports)
}

/// Mean test NMSE per user under one strategy.
pub fn strategy_nmse(
    cfg: &ExperimentConfig,
    s: &Setup,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<f64>> {
    let k = cfg.scenario.users;
    let all: Vec<usize> = (0..k).collect();
    match strategy {
        Strategy::Fl => Ok(s
            .pipeline
            .train_group_with(&all, WeightStrategy::Plain)?
            .errors),
        Strategy::FlDis => Ok(s
            .pipeline
            .train_group_with(&all, WeightStrategy::Dis)?
            .errors),
        Strategy::FlRsrpDis => Ok(s
            .pipeline
            .train_group_with(&all, WeightStrategy::RsrpDis)?
            .errors),
        Strategy::Solo => partition_nmse(
            &s.pipeline,
            &Partition::all_solo(k, cfg.cffl.max_coalitions),
        ),
        Strategy::Coalition => {
            let oracle = SurrogateOracle::new(s.correlation.clone(), cfg.game.solo_error)?;
            partition_nmse(&s.pipeline, &best_partition(cfg, &oracle, &s.game)?)
        }
        Strategy::Cffl => {
            let backend = match cfg.backend {
                GameBackend::Qmix => GameBackend::Qmix,
                _ => GameBackend::Dqn,
            };
            let run_cfg = ExperimentConfig {
                seed,
                oracle: OracleKind::Surrogate,
                ..cfg.clone()
            };
            let formation = run_game(&run_cfg, s, backend)?;
            partition_nmse(&s.pipeline, &formation.partition)
        }
        Strategy::Hfl => {
            let reports = hfl_rounds(cfg, s, &all, seed)?;
            match reports.last() {
                Some(r) => Ok(r.member_nmse_after.clone()),
                None => {
                    let pair = hfl_pair(cfg, &s.scenario, seed)?;
                    all.iter()
                        .map(|&m| evaluate_nmse(&pair.local, s.pipeline.test_set(m)?))
                        .collect()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub snr_db: f64,
    pub mean_nmse: f64,
    pub std_nmse: f64,
    pub seeds: usize,
}

/// Sample standard deviation; zero for a single value.
fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// One row per (strategy, SNR): mean ± std over seeds of the per-seed mean
/// user NMSE. Seeds are `cfg.seed, cfg.seed + 1, …`.
pub fn compare_strategies(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    if strategies.len() < 2 {
        return Err(Error::InvalidArgument(
            "comparison needs at least two strategies".into(),
        ));
    }
    let seeds: Vec<u64> = (0..cfg.compare.seeds as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let mut samples: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for &seed in &seeds {
        for (si, &snr) in cfg.snr_db.iter().enumerate() {
            let run_cfg = ExperimentConfig {
                seed,
                scenario: crate::channel::ScenarioConfig {
                    snr_db: snr,
                    ..cfg.scenario.clone()
                },
                ..cfg.clone()
            };
            let s = setup(&run_cfg, seed)?;
            let mut cache: BTreeMap<Strategy, f64> = BTreeMap::new();
            for (ti, &strategy) in strategies.iter().enumerate() {
                let value = match cache.get(&strategy) {
                    Some(v) => *v,
                    None => {
                        let v = mean(&strategy_nmse(&run_cfg, &s, strategy, seed)?);
                        cache.insert(strategy, v);
                        v
                    }
                };
                samples.entry((ti, si)).or_default().push(value);
            }
        }
    }
    let mut rows = Vec::with_capacity(strategies.len() * cfg.snr_db.len());
    for (ti, &strategy) in strategies.iter().enumerate() {
        for (si, &snr) in cfg.snr_db.iter().enumerate() {
            let v = &samples[&(ti, si)];
            rows.push(CompareRow {
                strategy,
                snr_db: snr,
                mean_nmse: mean(v),
                std_nmse: std_dev(v),
                seeds: v.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_comparison_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut out = String::from("strategy,snr_db,mean_nmse,std_nmse,mean_nmse_db,seeds\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.8e},{:.8e},{:.6},{}",
            r.strategy.name(),
            r.snr_db,
            r.mean_nmse,
            r.std_nmse,
            linear_to_db(r.mean_nmse),
            r.seeds
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes one overhead table for the configured sizes.
pub fn write_overhead(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<(String, crate::metrics::Overhead)>> {
    prepare_dir(out_dir)?;
    let inputs = overhead_inputs(cfg)?;
    write_overhead_csv(&out_dir.join(OVERHEAD_FILE), &inputs)?;
    Ok(crate::metrics::OverheadAlgo::ALL
        .iter()
        .map(|a| (a.name().to_string(), comm_overhead(*a, &inputs)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.samples_per_user = 60;
        cfg.scenario.server_samples = 30;
        cfg.pipeline.rounds = 1;
        cfg.cffl.epochs = 1;
        cfg.cffl.batch_size = 1;
        cfg.compare.seeds = 2;
        cfg
    }

    #[test]
    fn smoke_run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke();
        let summary = run_experiment(&cfg, dir.path()).unwrap();
        for f in ARTIFACTS {
            assert!(dir.path().join(f).is_file(), "{f} missing");
        }
        assert_eq!(summary.nmse.len(), 4);
        let manifest = std::fs::read_to_string(&summary.manifest).unwrap();
        assert!(manifest.contains(&cfg.hash().unwrap()));
    }

    #[test]
    fn rl_backends_produce_history_and_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke();
        cfg.cffl.epochs = 5;
        cfg.snr_db = vec![10.0];
        for backend in [GameBackend::Dqn, GameBackend::Qmix] {
            cfg.backend = backend;
            let s = run_experiment(&cfg, dir.path()).unwrap();
            assert_eq!(s.history.len(), 5);
            let text = std::fs::read_to_string(dir.path().join(REWARD_FILE)).unwrap();
            assert_eq!(text.lines().count(), 6);
        }
    }

    #[test]
    fn duplicate_strategy_gives_identical_rows() {
        let mut cfg = smoke();
        cfg.snr_db = vec![5.0, 10.0];
        let rows =
            compare_strategies(&cfg, &[Strategy::Fl, Strategy::FlDis, Strategy::Fl]).unwrap();
        assert_eq!(rows.len(), 6);
        for i in 0..2 {
            assert_eq!(rows[i].mean_nmse, rows[4 + i].mean_nmse);
            assert_eq!(rows[i].std_nmse, rows[4 + i].std_nmse);
        }
        assert!(rows.iter().all(|r| r.seeds == 2));
        assert!(compare_strategies(&cfg, &[Strategy::Fl]).is_err());
    }

    #[test]
    fn std_dev_matches_hand_value() {
        assert_eq!(std_dev(&[3.0]), 0.0);
        assert!((std_dev(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hfl_training_reports_shared_uplink() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke();
        cfg.hfl.enabled = true;
        cfg.hfl.distill.epochs = 2;
        cfg.hfl.local_model.channels = 4;
        cfg.hfl.global_model.channels = 4;
        let rows = run_training(&cfg, dir.path()).unwrap();
        assert_eq!(rows.len(), 1);
        let s = setup(&cfg, cfg.seed).unwrap();
        let pair = hfl_pair(&cfg, &s.scenario, cfg.seed).unwrap();
        assert_eq!(
            rows[0].uplink_params,
            cfg.scenario.users * pair.local.shared_param_count()
        );
        assert!(dir.path().join(ROUNDS_FILE).is_file());
    }
}
