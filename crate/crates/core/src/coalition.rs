//! Coalition formation among FL users: group utilities, proportional payoff
//! division, altruistic switching and exhaustive stability checks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seed::{rng_for, stream};
use crate::{Error, Result};

/// Largest number of assignments enumerated by [`brute_force_stability`].
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Assignment of `K` users to coalitions `1..=J`, with `0` meaning solo.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    max_coalitions: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, max_coalitions: usize) -> Result<Self> {
        if let Some(bad) = assignment.iter().find(|&&c| c > max_coalitions) {
            return Err(Error::InvalidArgument(format!(
                "coalition label {bad} exceeds the maximum {max_coalitions}"
            )));
        }
        Ok(Self {
            assignment,
            max_coalitions,
        })
    }

    pub fn all_solo(users: usize, max_coalitions: usize) -> Self {
        Self {
            assignment: vec![0; users],
            max_coalitions,
        }
    }

    /// Every user in coalition 1.
    pub fn grand(users: usize, max_coalitions: usize) -> Result<Self> {
        Self::new(vec![1; users], max_coalitions.max(1))
    }

    pub fn users(&self) -> usize {
        self.assignment.len()
    }

    pub fn max_coalitions(&self) -> usize {
        self.max_coalitions
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn label(&self, user: usize) -> usize {
        self.assignment[user]
    }

    /// Members of coalition `j ≥ 1`; empty for `j = 0`.
    pub fn members(&self, j: usize) -> Vec<usize> {
        if j == 0 {
            return Vec::new();
        }
        (0..self.users())
            .filter(|&u| self.assignment[u] == j)
            .collect()
    }

    /// Coalition sizes `D`, one entry per label `1..=J`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut d = vec![0; self.max_coalitions];
        for &c in &self.assignment {
            if c > 0 {
                d[c - 1] += 1;
            }
        }
        d
    }

    /// Utility groups: nonempty coalitions in label order, then one
    /// singleton per solo user.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = (1..=self.max_coalitions)
            .map(|j| self.members(j))
            .filter(|m| !m.is_empty())
            .collect();
        out.extend(
            (0..self.users())
                .filter(|&u| self.assignment[u] == 0)
                .map(|u| vec![u]),
        );
        out
    }

    /// The utility group containing `user`.
    pub fn group_of(&self, user: usize) -> Vec<usize> {
        match self.assignment[user] {
            0 => vec![user],
            j => self.members(j),
        }
    }

    pub fn with_move(&self, user: usize, target: usize) -> Result<Self> {
        if user >= self.users() {
            return Err(Error::MissingMember(user));
        }
        let mut next = self.assignment.clone();
        next[user] = target;
        Self::new(next, self.max_coalitions)
    }

    /// Number of assignments `(J + 1)^K`, saturating.
    pub fn space_size(users: usize, max_coalitions: usize) -> u128 {
        (max_coalitions as u128 + 1).saturating_pow(users as u32)
    }

    /// Mixed-radix decoding used by enumeration; user 0 is the least
    /// significant digit.
    pub fn from_index(mut index: u128, users: usize, max_coalitions: usize) -> Self {
        let base = max_coalitions as u128 + 1;
        let assignment = (0..users)
            .map(|_| {
                let d = (index % base) as usize;
                index /= base;
                d
            })
            .collect();
        Self {
            assignment,
            max_coalitions,
        }
    }

    /// Same as [`Partition::groups`] but with coalition labels erased, for
    /// comparing partitions that differ only by relabelling.
    pub fn canonical_groups(&self) -> Vec<Vec<usize>> {
        let mut g = self.groups();
        g.sort();
        g
    }
}

/// Supplies per-member errors `e_p ∈ [0, 1]` for a training group.
pub trait UtilityOracle: Sync {
    fn users(&self) -> usize;

    /// Errors for each member of `group` (sorted ids), in the same order.
    fn group_errors(&self, group: &[usize]) -> Result<Vec<f64>>;
}

/// `e_p = 1 − mean correlation to the rest of the group`, clipped to
/// `[0, 1]`; a lone user gets `solo_error`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOracle {
    correlation: Vec<Vec<f64>>,
    solo_error: f64,
}

impl SurrogateOracle {
    pub const DEFAULT_SOLO_ERROR: f64 = 0.5;

    pub fn new(correlation: Vec<Vec<f64>>, solo_error: f64) -> Result<Self> {
        let k = correlation.len();
        if correlation.iter().any(|r| r.len() != k) {
            return Err(Error::shape(
                "SurrogateOracle",
                format!("{k}×{k}"),
                "ragged matrix",
            ));
        }
        if correlation.iter().flatten().any(|v| !v.is_finite()) || !solo_error.is_finite() {
            return Err(Error::InvalidArgument("correlations must be finite".into()));
        }
        Ok(Self {
            correlation,
            solo_error,
        })
    }

    pub fn correlation(&self) -> &[Vec<f64>] {
        &self.correlation
    }
}

impl UtilityOracle for SurrogateOracle {
    fn users(&self) -> usize {
        self.correlation.len()
    }

    fn group_errors(&self, group: &[usize]) -> Result<Vec<f64>> {
        if let Some(&bad) = group.iter().find(|&&u| u >= self.users()) {
            return Err(Error::MissingMember(bad));
        }
        if group.len() == 1 {
            return Ok(vec![self.solo_error.clamp(0.0, 1.0)]);
        }
        Ok(group
            .iter()
            .map(|&p| {
                let peers: f64 = group
                    .iter()
                    .filter(|&&q| q != p)
                    .map(|&q| self.correlation[p][q])
                    .sum();
                (1.0 - peers / (group.len() - 1) as f64).clamp(0.0, 1.0)
            })
            .collect())
    }
}

impl<T: UtilityOracle + ?Sized> UtilityOracle for &T {
    fn users(&self) -> usize {
        (**self).users()
    }

    fn group_errors(&self, group: &[usize]) -> Result<Vec<f64>> {
        (**self).group_errors(group)
    }
}

/// Same errors for everyone regardless of grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantOracle {
    pub users: usize,
    pub error: f64,
}

impl UtilityOracle for ConstantOracle {
    fn users(&self) -> usize {
        self.users
    }

    fn group_errors(&self, group: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![self.error; group.len()])
    }
}

/// Caches another oracle's answers by group.
pub struct MemoOracle<O> {
    inner: O,
    cache: Mutex<HashMap<Vec<usize>, Vec<f64>>>,
}

impl<O: UtilityOracle> MemoOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn cached_groups(&self) -> usize {
        self.cache.lock().expect("oracle cache poisoned").len()
    }
}

impl<O: UtilityOracle> UtilityOracle for MemoOracle<O> {
    fn users(&self) -> usize {
        self.inner.users()
    }

    fn group_errors(&self, group: &[usize]) -> Result<Vec<f64>> {
        if let Some(hit) = self.cache.lock().expect("oracle cache poisoned").get(group) {
            return Ok(hit.clone());
        }
        let e = self.inner.group_errors(group)?;
        self.cache
            .lock()
            .expect("oracle cache poisoned")
            .insert(group.to_vec(), e.clone());
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum UtilityConstant {
    /// `A = |S_j|`.
    GroupSize,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    pub constant: UtilityConstant,
    /// Data volume `|a_p|` per user.
    pub volumes: Vec<f64>,
    /// Gains at or below this count as ties.
    pub tolerance: f64,
}

impl GameConfig {
    pub fn new(constant: UtilityConstant, volumes: Vec<f64>) -> Result<Self> {
        if let UtilityConstant::Fixed(a) = constant {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "utility constant must be positive, got {a}"
                )));
            }
        }
        if volumes.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "data volumes must be positive".into(),
            ));
        }
        Ok(Self {
            constant,
            volumes,
            tolerance: 1e-12,
        })
    }

    pub fn uniform(users: usize) -> Self {
        Self {
            constant: UtilityConstant::GroupSize,
            volumes: vec![1.0; users],
            tolerance: 1e-12,
        }
    }

    pub fn constant_for(&self, group_len: usize) -> f64 {
        match self.constant {
            UtilityConstant::GroupSize => group_len as f64,
            UtilityConstant::Fixed(a) => a,
        }
    }
}

/// `U(S_j) = A − Σ_p e_p`.
pub fn coalition_utility(members: &[usize], errors: &HashMap<usize, f64>, a: f64) -> Result<f64> {
    let mut sum = 0.0;
    for m in members {
        sum += errors.get(m).ok_or(Error::MissingMember(*m))?;
    }
    Ok(a - sum)
}

/// `u_p = (|a_p| / Σ_q |a_q|) · U(S_j)`.
pub fn member_payoff(member: usize, group: &[usize], volumes: &[f64], utility: f64) -> Result<f64> {
    if !group.contains(&member) {
        return Err(Error::MissingMember(member));
    }
    let mut total = 0.0;
    for &q in group {
        total += volumes.get(q).ok_or(Error::MissingMember(q))?.abs();
    }
    if total <= 0.0 {
        return Err(Error::ZeroVolume);
    }
    Ok(volumes[member].abs() / total * utility)
}

/// Game evaluator with a per-group payoff cache.
pub struct Game<'a> {
    oracle: &'a dyn UtilityOracle,
    cfg: &'a GameConfig,
    payoffs: RefCell<HashMap<Vec<usize>, (f64, Vec<f64>)>>,
}

impl<'a> Game<'a> {
    pub fn new(oracle: &'a dyn UtilityOracle, cfg: &'a GameConfig) -> Result<Self> {
        if cfg.volumes.len() != oracle.users() {
            return Err(Error::shape("Game::new", oracle.users(), cfg.volumes.len()));
        }
        Ok(Self {
            oracle,
            cfg,
            payoffs: RefCell::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &GameConfig {
        self.cfg
    }

    /// `(U(S), [u_p for p in S])` for a sorted group; the empty group is worth 0.
    pub fn group_payoffs(&self, group: &[usize]) -> Result<(f64, Vec<f64>)> {
        if group.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        if let Some(hit) = self.payoffs.borrow().get(group) {
            return Ok(hit.clone());
        }
        let raw = self.oracle.group_errors(group)?;
        if raw.len() != group.len() {
            return Err(Error::shape("group_errors", group.len(), raw.len()));
        }
        if raw.iter().any(|e| e.is_nan()) {
            return Err(Error::InvalidArgument("oracle returned NaN error".into()));
        }
        let errors: HashMap<usize, f64> = group
            .iter()
            .zip(&raw)
            .map(|(&m, e)| (m, e.clamp(0.0, 1.0)))
            .collect();
        let u = coalition_utility(group, &errors, self.cfg.constant_for(group.len()))?;
        let shares = group
            .iter()
            .map(|&p| member_payoff(p, group, &self.cfg.volumes, u))
            .collect::<Result<Vec<_>>>()?;
        self.payoffs
            .borrow_mut()
            .insert(group.to_vec(), (u, shares.clone()));
        Ok((u, shares))
    }

    pub fn utility(&self, group: &[usize]) -> Result<f64> {
        Ok(self.group_payoffs(group)?.0)
    }

    fn payoff_sum(&self, group: &[usize], over: impl Fn(usize) -> bool) -> Result<f64> {
        let (_, shares) = self.group_payoffs(group)?;
        Ok(group
            .iter()
            .zip(&shares)
            .filter(|(m, _)| over(**m))
            .map(|(_, s)| s)
            .sum())
    }

    /// `U = Σ_j U(S_j)`.
    pub fn total_utility(&self, p: &Partition) -> Result<f64> {
        let mut sum = 0.0;
        for g in p.groups() {
            sum += self.utility(&g)?;
        }
        Ok(sum)
    }

    /// `φ = Σ` of every member's payoff.
    pub fn potential(&self, p: &Partition) -> Result<f64> {
        let mut sum = 0.0;
        for g in p.groups() {
            sum += self.group_payoffs(&g)?.1.iter().sum::<f64>();
        }
        Ok(sum)
    }

    /// Left side minus right side of the altruistic criterion for moving
    /// `user` to coalition label `target`.
    pub fn altruistic_gain(&self, p: &Partition, user: usize, target: usize) -> Result<f64> {
        if user >= p.users() {
            return Err(Error::MissingMember(user));
        }
        if target > p.max_coalitions() {
            return Err(Error::InvalidArgument(format!(
                "coalition label {target} out of range"
            )));
        }
        let from = p.label(user);
        if target == from {
            return Ok(0.0);
        }
        let s2 = p.group_of(user);
        let s2_rest: Vec<usize> = s2.iter().copied().filter(|&k| k != user).collect();
        let s1 = p.members(target);
        let mut s1_join = s1.clone();
        s1_join.push(user);
        s1_join.sort_unstable();

        let lhs = self.payoff_sum(&s1_join, |_| true)? + self.payoff_sum(&s2_rest, |_| true)?;
        let rhs = self.payoff_sum(&s2, |k| k == user)?
            + self.payoff_sum(&s1, |_| true)?
            + self.payoff_sum(&s2, |k| k != user)?;
        Ok(lhs - rhs)
    }

    pub fn altruistic_prefers(&self, p: &Partition, user: usize, target: usize) -> Result<bool> {
        Ok(self.altruistic_gain(p, user, target)? > self.cfg.tolerance)
    }

    /// Best strictly improving target for `user`, lowest label on ties.
    pub fn best_switch(&self, p: &Partition, user: usize) -> Result<Option<(usize, f64)>> {
        let mut best: Option<(usize, f64)> = None;
        for t in 0..=p.max_coalitions() {
            if t == p.label(user) {
                continue;
            }
            let g = self.altruistic_gain(p, user, t)?;
            if g > self.cfg.tolerance && best.is_none_or(|(_, b)| g > b) {
                best = Some((t, g));
            }
        }
        Ok(best)
    }

    pub fn is_stable(&self, p: &Partition) -> Result<bool> {
        for u in 0..p.users() {
            if self.best_switch(p, u)?.is_some() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub fn total_utility(p: &Partition, oracle: &dyn UtilityOracle, cfg: &GameConfig) -> Result<f64> {
    Game::new(oracle, cfg)?.total_utility(p)
}

pub fn potential(p: &Partition, oracle: &dyn UtilityOracle, cfg: &GameConfig) -> Result<f64> {
    Game::new(oracle, cfg)?.potential(p)
}

pub fn altruistic_prefers(
    p: &Partition,
    user: usize,
    target: usize,
    oracle: &dyn UtilityOracle,
    cfg: &GameConfig,
) -> Result<bool> {
    Game::new(oracle, cfg)?.altruistic_prefers(p, user, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchOrder {
    RoundRobin,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchConfig {
    pub order: SwitchOrder,
    pub seed: u64,
    /// Defaults to `10 · (J + 1)^K`.
    pub max_switches: Option<usize>,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            order: SwitchOrder::RoundRobin,
            seed: 0,
            max_switches: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub user: usize,
    pub from: usize,
    pub to: usize,
    pub potential: f64,
    pub utility: f64,
}

/// Lets users take their best altruistically improving switch until no
/// user has one. The trace holds one row per switch.
pub fn switch_dynamics(
    initial: &Partition,
    oracle: &dyn UtilityOracle,
    cfg: &GameConfig,
    switch: &SwitchConfig,
) -> Result<(Partition, Vec<TraceRow>)> {
    let game = Game::new(oracle, cfg)?;
    if initial.users() != oracle.users() {
        return Err(Error::shape(
            "switch_dynamics",
            oracle.users(),
            initial.users(),
        ));
    }
    let limit = switch.max_switches.unwrap_or_else(|| {
        Partition::space_size(initial.users(), initial.max_coalitions())
            .saturating_mul(10)
            .min(usize::MAX as u128) as usize
    });
    let mut rng = rng_for(switch.seed, stream::GAME, 0);
    let mut p = initial.clone();
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..p.users()).collect();
    loop {
        if switch.order == SwitchOrder::Random {
            order.shuffle(&mut rng);
        }
        let mut moved = false;
        for &u in &order {
            if let Some((t, _)) = game.best_switch(&p, u)? {
                if trace.len() >= limit {
                    return Err(Error::NoConvergence(limit));
                }
                let from = p.label(u);
                p = p.with_move(u, t)?;
                trace.push(TraceRow {
                    step: trace.len() + 1,
                    user: u,
                    from,
                    to: t,
                    potential: game.potential(&p)?,
                    utility: game.total_utility(&p)?,
                });
                moved = true;
            }
        }
        if !moved {
            return Ok((p, trace));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub stable: Vec<Partition>,
    pub argmax: Partition,
    pub argmax_potential: f64,
    pub enumerated: u128,
}

impl StabilityReport {
    pub fn contains(&self, p: &Partition) -> bool {
        self.stable.iter().any(|s| s == p)
    }
}

/// Enumerates all `(J + 1)^K` assignments, keeping those with no improving
/// altruistic switch, and the first assignment of maximal potential.
pub fn brute_force_stability(
    oracle: &dyn UtilityOracle,
    cfg: &GameConfig,
    users: usize,
    max_coalitions: usize,
) -> Result<StabilityReport> {
    let n = Partition::space_size(users, max_coalitions);
    if n > ENUMERATION_LIMIT {
        return Err(Error::InstanceTooLarge {
            assignments: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    if users != oracle.users() {
        return Err(Error::shape("brute_force_stability", oracle.users(), users));
    }
    let game = Game::new(oracle, cfg)?;
    let mut stable = Vec::new();
    let mut best: Option<(Partition, f64)> = None;
    for i in 0..n {
        let p = Partition::from_index(i, users, max_coalitions);
        let phi = game.potential(&p)?;
        if best.as_ref().is_none_or(|(_, b)| phi > *b) {
            best = Some((p.clone(), phi));
        }
        if game.is_stable(&p)? {
            stable.push(p);
        }
    }
    let (argmax, argmax_potential) = best.expect("at least one assignment");
    Ok(StabilityReport {
        stable,
        argmax,
        argmax_potential,
        enumerated: n,
    })
}

/// Writes `step,user,from,to,phi,utility` rows.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,user,from,to,phi,utility\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.12},{:.12}\n",
            r.step, r.user, r.from, r.to, r.potential, r.utility
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
