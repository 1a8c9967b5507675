//! Device association: best-channel initialisation, the coalition game over
//! HRD and CSD partitions, and the alternating driver.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{coalition_utility, csd_block, hrd_block, oracle_solve_p3, AllocationRule, Kind, Utility};
use crate::delay::{audit_constraints, evaluate, storage_load, Allocation, DelayReport, Instance, Partition, Violation};
use crate::error::{Error, Result};
use crate::scenario::{stream_rng, Stream};

/// A move must lower the summed utility by more than this to be accepted.
pub const IMPROVEMENT_MARGIN: f64 = 1e-12;

/// How the best-channel initialiser decides whether a CSD offloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadRule {
    /// Offload only when the edge is at least as fast and the task input
    /// still fits in SBS storage; otherwise compute locally.
    #[default]
    FasterAndFits,
    /// Compute locally only when the edge is slower and the SBS storage
    /// constraint holds with the task included; otherwise offload.
    LocalWhenSlowerAndFits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameParams {
    /// Outer alternations.
    pub outer_iterations: usize,
    /// Random proposals per game.
    pub move_iterations: usize,
    /// Consecutive rejections that end a game early; `None` means
    /// 50 times the number of devices.
    pub patience: Option<usize>,
    pub rule: AllocationRule,
    /// Finish every game with exhaustive sweeps over all transfers and swaps.
    pub polish: bool,
    pub offload_rule: OffloadRule,
}

impl Default for GameParams {
    fn default() -> Self {
        GameParams {
            outer_iterations: 3,
            move_iterations: 5000,
            patience: None,
            rule: AllocationRule::ClosedForm,
            polish: true,
            offload_rule: OffloadRule::FasterAndFits,
        }
    }
}

impl GameParams {
    pub fn patience_for(&self, inst: &Instance) -> usize {
        self.patience.unwrap_or(50 * (inst.n_hrd() + inst.n_csd()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Random,
    Polish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    Infeasible,
    NotImproving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoveRecord {
    pub outer: usize,
    pub iteration: usize,
    pub kind: &'static str,
    pub phase: Phase,
    pub outcome: Outcome,
    pub delta_v: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    /// Device `who` leaves coalition `from` for `to`.
    Transfer { who: usize, from: usize, to: usize },
    /// Devices `a` (in `from_a`) and `b` (in `from_b`) trade coalitions.
    Swap {
        a: usize,
        from_a: usize,
        b: usize,
        from_b: usize,
    },
}

impl Move {
    fn coalitions(&self) -> (usize, usize) {
        match *self {
            Move::Transfer { from, to, .. } => (from, to),
            Move::Swap { from_a, from_b, .. } => (from_a, from_b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoveProposal {
    pub kind: Kind,
    pub mv: Move,
    pub m: usize,
    pub n: usize,
    pub tentative_m: Vec<usize>,
    pub tentative_n: Vec<usize>,
}

/// Coalition index to SBS. CSD coalition `n_sbs` is local computing.
pub fn coalition_sbs(kind: Kind, c: usize, n_sbs: usize) -> Option<usize> {
    match kind {
        Kind::Csd if c == n_sbs => None,
        _ => Some(c),
    }
}

fn n_coalitions(kind: Kind, n_sbs: usize) -> usize {
    match kind {
        Kind::Hrd => n_sbs,
        Kind::Csd => n_sbs + 1,
    }
}

fn kind_name(kind: Kind) -> &'static str {
    match kind {
        Kind::Hrd => "hrd",
        Kind::Csd => "csd",
    }
}

/// Partition, allocation and cached coalition utilities of one run.
#[derive(Debug, Clone)]
pub struct GameState {
    pub partition: Partition,
    pub allocation: Allocation,
    pub objective: f64,
    hrd_sets: Vec<Vec<usize>>,
    csd_sets: Vec<Vec<usize>>,
    pub hrd_value: Vec<f64>,
    pub csd_value: Vec<f64>,
    pub hrd_feasible: Vec<bool>,
    pub csd_feasible: Vec<bool>,
    pub t1: usize,
    pub t2: usize,
    rng: ChaCha8Rng,
    pub log: Vec<MoveRecord>,
    /// Objective after initialisation and after every accepted move.
    pub trace: Vec<f64>,
    /// Objective after initialisation and after every outer iteration.
    pub outer_trace: Vec<f64>,
    /// HRDs for which no SBS met the backhaul rate condition.
    pub fallback_hrds: Vec<usize>,
    pub accepted_moves: usize,
}

impl GameState {
    fn empty(inst: &Instance) -> Self {
        let ns = inst.n_sbs();
        GameState {
            partition: Partition {
                hrd_of: vec![0; inst.n_hrd()],
                csd_of: vec![None; inst.n_csd()],
            },
            allocation: Allocation::for_instance(inst),
            objective: 0.0,
            hrd_sets: vec![Vec::new(); ns],
            csd_sets: vec![Vec::new(); ns + 1],
            hrd_value: vec![0.0; ns],
            csd_value: vec![0.0; ns + 1],
            hrd_feasible: vec![true; ns],
            csd_feasible: vec![true; ns + 1],
            t1: 0,
            t2: 0,
            rng: stream_rng(inst.scenario.params.seed, Stream::Moves),
            log: Vec::new(),
            trace: Vec::new(),
            outer_trace: Vec::new(),
            fallback_hrds: Vec::new(),
            accepted_moves: 0,
        }
    }

    pub fn members(&self, kind: Kind, c: usize) -> &[usize] {
        match kind {
            Kind::Hrd => &self.hrd_sets[c],
            Kind::Csd => &self.csd_sets[c],
        }
    }

    pub fn value(&self, kind: Kind, c: usize) -> f64 {
        match kind {
            Kind::Hrd => self.hrd_value[c],
            Kind::Csd => self.csd_value[c],
        }
    }

    pub fn all_feasible(&self) -> bool {
        self.hrd_feasible.iter().chain(&self.csd_feasible).all(|&f| f)
    }

    fn recompute_objective(&mut self) {
        self.objective = self.hrd_value.iter().chain(&self.csd_value).sum();
    }

    /// Install `members` with utility `u` as coalition `c`.
    fn set_coalition(&mut self, inst: &Instance, kind: Kind, c: usize, mut members: Vec<usize>, u: Utility) {
        members.sort_unstable();
        let n = coalition_sbs(kind, c, inst.n_sbs());
        u.shares.write_into(kind, n, &mut self.allocation);
        match kind {
            Kind::Hrd => {
                for &k in &members {
                    self.partition.hrd_of[k] = c;
                }
                self.hrd_sets[c] = members;
                self.hrd_value[c] = u.value;
                self.hrd_feasible[c] = u.feasible;
            }
            Kind::Csd => {
                for &k in &members {
                    self.partition.csd_of[k] = n;
                }
                self.csd_sets[c] = members;
                self.csd_value[c] = u.value;
                self.csd_feasible[c] = u.feasible;
            }
        }
    }
}

fn best_by_gain(gains: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    gains
        .fold(None, |best: Option<(usize, f64)>, (n, g)| match best {
            Some((_, bg)) if bg >= g => best,
            _ => Some((n, g)),
        })
        .map(|(n, _)| n)
}

/// Best-channel association with equal shares.
pub fn abcg_init(inst: &Instance, params: &GameParams) -> Result<GameState> {
    let ns = inst.n_sbs();
    let mut st = GameState::empty(inst);
    let s = &inst.scenario;
    let t = &inst.rates;

    let mut hrd_sets = vec![Vec::new(); ns];
    for k in 0..inst.n_hrd() {
        let filtered = best_by_gain(
            (0..ns)
                .filter(|&n| t.theta_lb[(n, k)] <= 1.0)
                .map(|n| (n, s.gain_sbs_hrd[(n, k)])),
        );
        let n = match filtered {
            Some(n) => n,
            None => {
                st.fallback_hrds.push(k);
                best_by_gain((0..ns).map(|n| (n, s.gain_sbs_hrd[(n, k)]))).unwrap()
            }
        };
        hrd_sets[n].push(k);
    }
    for (n, members) in hrd_sets.into_iter().enumerate() {
        let u = coalition_utility(inst, Kind::Hrd, Some(n), &members, AllocationRule::EqualShare);
        st.set_coalition(inst, Kind::Hrd, n, members, u);
    }

    let mut csd_sets = vec![Vec::new(); ns + 1];
    for k in 0..inst.n_csd() {
        let n = best_by_gain((0..ns).map(|n| (n, s.gain_sbs_csd[(n, k)]))).unwrap();
        csd_sets[n].push(k);
    }
    let d = &inst.demand;
    for n in 0..ns {
        let initial = std::mem::take(&mut csd_sets[n]);
        if initial.is_empty() {
            continue;
        }
        let share = 1.0 / initial.len() as f64;
        let mut load = storage_load(inst, n, std::iter::empty());
        for k in initial {
            let edge = crate::delay::csd_delay(inst, Some(n), k, share, share).t_cs;
            let t_lc = d.task_cycles[k] / d.local_cycles_per_s[k];
            let fits = load + d.task_input_bytes[k] <= d.storage_bytes[n];
            let offload = match params.offload_rule {
                OffloadRule::FasterAndFits => edge <= t_lc && fits,
                OffloadRule::LocalWhenSlowerAndFits => !(edge > t_lc && fits),
            };
            if offload {
                load += d.task_input_bytes[k];
                csd_sets[n].push(k);
            } else {
                csd_sets[ns].push(k);
            }
        }
    }
    for (c, members) in csd_sets.into_iter().enumerate() {
        let n = coalition_sbs(Kind::Csd, c, ns);
        let u = coalition_utility(inst, Kind::Csd, n, &members, AllocationRule::EqualShare);
        st.set_coalition(inst, Kind::Csd, c, members, u);
    }

    st.recompute_objective();
    st.trace.push(st.objective);
    st.outer_trace.push(st.objective);
    Ok(st)
}

fn tentative(sets_m: &[usize], sets_n: &[usize], mv: Move) -> (Vec<usize>, Vec<usize>) {
    match mv {
        Move::Transfer { who, .. } => {
            let m: Vec<usize> = sets_m.iter().copied().filter(|&k| k != who).collect();
            let mut n = sets_n.to_vec();
            n.push(who);
            (m, n)
        }
        Move::Swap { a, b, .. } => {
            let mut m: Vec<usize> = sets_m.iter().copied().filter(|&k| k != a).collect();
            let mut n: Vec<usize> = sets_n.iter().copied().filter(|&k| k != b).collect();
            m.push(b);
            n.push(a);
            (m, n)
        }
    }
}

fn proposal(st: &GameState, kind: Kind, mv: Move) -> MoveProposal {
    let (m, n) = mv.coalitions();
    let (tm, tn) = tentative(st.members(kind, m), st.members(kind, n), mv);
    MoveProposal {
        kind,
        mv,
        m,
        n,
        tentative_m: tm,
        tentative_n: tn,
    }
}

/// Pick two distinct coalitions uniformly. If one is empty a random member of
/// the other moves into it, otherwise a random member of each is swapped.
/// Returns `None` when repeated draws only find empty pairs.
pub fn propose_move(st: &mut GameState, inst: &Instance, kind: Kind) -> Option<MoveProposal> {
    let nc = n_coalitions(kind, inst.n_sbs());
    if nc < 2 {
        return None;
    }
    for _ in 0..1000 {
        let m = st.rng.random_range(0..nc);
        let mut n = st.rng.random_range(0..nc - 1);
        if n >= m {
            n += 1;
        }
        let sets = match kind {
            Kind::Hrd => &st.hrd_sets,
            Kind::Csd => &st.csd_sets,
        };
        let (sm, sn) = (&sets[m], &sets[n]);
        let mv = match (sm.is_empty(), sn.is_empty()) {
            (true, true) => continue,
            (false, true) => Move::Transfer {
                who: sm[st.rng.random_range(0..sm.len())],
                from: m,
                to: n,
            },
            (true, false) => Move::Transfer {
                who: sn[st.rng.random_range(0..sn.len())],
                from: n,
                to: m,
            },
            (false, false) => {
                let a = sm[st.rng.random_range(0..sm.len())];
                let b = sn[st.rng.random_range(0..sn.len())];
                Move::Swap {
                    a,
                    from_a: m,
                    b,
                    from_b: n,
                }
            }
        };
        return Some(proposal(st, kind, mv));
    }
    None
}

/// Accept the proposal iff both tentative coalitions are feasible and their
/// summed utility drops by more than the margin.
pub fn evaluate_and_apply(
    st: &mut GameState,
    inst: &Instance,
    p: MoveProposal,
    rule: AllocationRule,
    phase: Phase,
) -> Outcome {
    let ns = inst.n_sbs();
    let um = coalition_utility(inst, p.kind, coalition_sbs(p.kind, p.m, ns), &p.tentative_m, rule);
    let un = coalition_utility(inst, p.kind, coalition_sbs(p.kind, p.n, ns), &p.tentative_n, rule);
    let delta = um.value + un.value - st.value(p.kind, p.m) - st.value(p.kind, p.n);
    let outcome = if !(um.feasible && un.feasible) {
        Outcome::Infeasible
    } else if delta < -IMPROVEMENT_MARGIN {
        Outcome::Accepted
    } else {
        Outcome::NotImproving
    };
    if outcome == Outcome::Accepted {
        st.set_coalition(inst, p.kind, p.m, p.tentative_m, um);
        st.set_coalition(inst, p.kind, p.n, p.tentative_n, un);
        st.recompute_objective();
        st.accepted_moves += 1;
        st.trace.push(st.objective);
    }
    st.log.push(MoveRecord {
        outer: st.t1,
        iteration: st.t2,
        kind: kind_name(p.kind),
        phase,
        outcome,
        delta_v: delta,
        f: st.objective,
    });
    outcome
}

/// Every single transfer and every swap between two coalitions of one class.
fn all_moves(st: &GameState, kind: Kind, nc: usize) -> Vec<Move> {
    let mut out = Vec::new();
    for from in 0..nc {
        for &who in st.members(kind, from) {
            for to in (0..nc).filter(|&to| to != from) {
                out.push(Move::Transfer { who, from, to });
            }
        }
    }
    for from_a in 0..nc {
        for from_b in from_a + 1..nc {
            for &a in st.members(kind, from_a) {
                for &b in st.members(kind, from_b) {
                    out.push(Move::Swap { a, from_a, b, from_b });
                }
            }
        }
    }
    out
}

/// Apply improving moves from exhaustive sweeps until a sweep finds none.
fn polish(st: &mut GameState, inst: &Instance, kind: Kind, rule: AllocationRule) {
    let nc = n_coalitions(kind, inst.n_sbs());
    loop {
        let mut improved = false;
        for mv in all_moves(st, kind, nc) {
            // Earlier moves in this sweep may have relocated the devices.
            let still_valid = match mv {
                Move::Transfer { who, from, .. } => st.members(kind, from).contains(&who),
                Move::Swap { a, from_a, b, from_b } => {
                    st.members(kind, from_a).contains(&a) && st.members(kind, from_b).contains(&b)
                }
            };
            if !still_valid {
                continue;
            }
            let p = proposal(st, kind, mv);
            if evaluate_and_apply(st, inst, p, rule, Phase::Polish) == Outcome::Accepted {
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}

/// Random proposals until `move_iterations` or the patience limit, then the
/// optional exhaustive polish.
pub fn run_coalition_game(st: &mut GameState, inst: &Instance, kind: Kind, params: &GameParams) -> Result<()> {
    if params.move_iterations == 0 {
        return Err(Error::Precondition("move_iterations must be at least 1".into()));
    }
    let patience = params.patience_for(inst);
    let mut rejections = 0;
    st.t2 = 0;
    while st.t2 < params.move_iterations && rejections < patience {
        let Some(p) = propose_move(st, inst, kind) else { break };
        if evaluate_and_apply(st, inst, p, params.rule, Phase::Random) == Outcome::Accepted {
            rejections = 0;
        } else {
            rejections += 1;
        }
        st.t2 += 1;
    }
    if params.polish {
        polish(st, inst, kind, params.rule);
    }
    Ok(())
}

/// Recompute every coalition's allocation under `rule`, keeping the new
/// allocation only where it is feasible and no worse.
pub fn reallocate(st: &mut GameState, inst: &Instance, rule: AllocationRule) {
    let ns = inst.n_sbs();
    for kind in [Kind::Hrd, Kind::Csd] {
        for c in 0..n_coalitions(kind, ns) {
            let members = st.members(kind, c).to_vec();
            let u = coalition_utility(inst, kind, coalition_sbs(kind, c, ns), &members, rule);
            if u.feasible && u.value <= st.value(kind, c) {
                st.set_coalition(inst, kind, c, members, u);
            }
        }
    }
    st.recompute_objective();
}

/// Best-channel start, then alternating CSD game, HRD game and reallocation.
pub fn run_amnd(inst: &Instance, params: &GameParams) -> Result<GameState> {
    run_amnd_observed(inst, params, |_, _| {})
}

/// Where a state handed to an observer was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initial,
    CsdGame,
    HrdGame,
    Reallocated,
}

/// [`run_amnd`], calling `observe` after initialisation, after every game and
/// after every reallocation.
pub fn run_amnd_observed(
    inst: &Instance,
    params: &GameParams,
    mut observe: impl FnMut(Stage, &GameState),
) -> Result<GameState> {
    if params.outer_iterations == 0 {
        return Err(Error::Precondition("outer_iterations must be at least 1".into()));
    }
    let mut st = abcg_init(inst, params)?;
    observe(Stage::Initial, &st);
    for t1 in 0..params.outer_iterations {
        st.t1 = t1;
        run_coalition_game(&mut st, inst, Kind::Csd, params)?;
        observe(Stage::CsdGame, &st);
        run_coalition_game(&mut st, inst, Kind::Hrd, params)?;
        observe(Stage::HrdGame, &st);
        reallocate(&mut st, inst, params.rule);
        st.trace.push(st.objective);
        st.outer_trace.push(st.objective);
        observe(Stage::Reallocated, &st);
    }
    Ok(st)
}

/// Weighted delay per HRD coalition and per CSD coalition (local last).
fn coalition_values(inst: &Instance, report: &DelayReport) -> (Vec<f64>, Vec<f64>) {
    let ns = inst.n_sbs();
    let d = &inst.demand;
    let mut hrd_v = vec![0.0; ns];
    for (k, h) in report.hrd.iter().enumerate() {
        hrd_v[h.sbs] += d.hrd_weight[k] * h.total;
    }
    let mut csd_v = vec![0.0; ns + 1];
    for (k, c) in report.csd.iter().enumerate() {
        csd_v[c.sbs.unwrap_or(ns)] += d.csd_weight[k] * c.delay.t_cs;
    }
    (hrd_v, csd_v)
}

/// A move found by [`nash_audit`] that would lower the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovingMove {
    pub kind: Kind,
    pub mv: Move,
    pub delta_v: f64,
}

/// Scan every single transfer and every same-class swap. Current coalition
/// utilities come from a fresh delay evaluation of `partition` and
/// `allocation`; tentative coalitions are priced under `rule`.
pub fn nash_audit(
    inst: &Instance,
    partition: &Partition,
    allocation: &Allocation,
    rule: AllocationRule,
) -> Result<Vec<ImprovingMove>> {
    let ns = inst.n_sbs();
    let (hrd_v, csd_v) = coalition_values(inst, &evaluate(inst, partition, allocation)?);

    let mut out = Vec::new();
    for kind in [Kind::Hrd, Kind::Csd] {
        let nc = n_coalitions(kind, ns);
        let sets: Vec<Vec<usize>> = match kind {
            Kind::Hrd => (0..ns).map(|n| partition.hrd_members(n)).collect(),
            Kind::Csd => (0..=ns)
                .map(|c| partition.csd_members(coalition_sbs(kind, c, ns)))
                .collect(),
        };
        let current = |c: usize| match kind {
            Kind::Hrd => hrd_v[c],
            Kind::Csd => csd_v[c],
        };
        let mut moves = Vec::new();
        for from in 0..nc {
            for &who in &sets[from] {
                for to in (0..nc).filter(|&to| to != from) {
                    moves.push(Move::Transfer { who, from, to });
                }
            }
            for from_b in from + 1..nc {
                for &a in &sets[from] {
                    for &b in &sets[from_b] {
                        moves.push(Move::Swap {
                            a,
                            from_a: from,
                            b,
                            from_b,
                        });
                    }
                }
            }
        }
        for mv in moves {
            let (m, n) = mv.coalitions();
            let (tm, tn) = tentative(&sets[m], &sets[n], mv);
            let um = coalition_utility(inst, kind, coalition_sbs(kind, m, ns), &tm, rule);
            let un = coalition_utility(inst, kind, coalition_sbs(kind, n, ns), &tn, rule);
            let delta = um.value + un.value - current(m) - current(n);
            if um.feasible && un.feasible && delta < -IMPROVEMENT_MARGIN {
                out.push(ImprovingMove {
                    kind,
                    mv,
                    delta_v: delta,
                });
            }
        }
    }
    Ok(out)
}

/// Per-SBS comparison of the allocated delay with the numerical optimum for
/// the same members.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGap {
    pub sbs: usize,
    pub value: f64,
    /// `None` when the members admit no feasible allocation at all.
    pub oracle: Option<f64>,
}

impl OracleGap {
    /// `(value - oracle) / oracle`; zero when the SBS is idle.
    pub fn relative_gap(&self) -> Option<f64> {
        self.oracle
            .map(|o| if o > 0.0 { (self.value - o) / o } else { self.value - o })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunAudit {
    pub improving_moves: Vec<ImprovingMove>,
    pub violations: Vec<Violation>,
    pub oracle: Vec<OracleGap>,
}

impl RunAudit {
    /// No improving move, no violated constraint, and no SBS below its oracle
    /// optimum by more than `tol` relative.
    pub fn clean(&self, tol: f64) -> bool {
        self.improving_moves.is_empty()
            && self.violations.is_empty()
            && self
                .oracle
                .iter()
                .all(|g| g.relative_gap().is_some_and(|r| r >= -tol))
    }
}

/// Exhaustive move scan, constraint audit and per-SBS oracle comparison of a
/// finished run.
pub fn audit_run(
    inst: &Instance,
    partition: &Partition,
    allocation: &Allocation,
    rule: AllocationRule,
    tol: f64,
) -> Result<RunAudit> {
    let report = evaluate(inst, partition, allocation)?;
    let (hrd_v, csd_v) = coalition_values(inst, &report);
    let oracle = (0..inst.n_sbs())
        .map(|n| {
            let hb = hrd_block(inst, n, &partition.hrd_members(n));
            let cb = csd_block(inst, n, &partition.csd_members(Some(n)));
            OracleGap {
                sbs: n,
                value: hrd_v[n] + csd_v[n],
                oracle: oracle_solve_p3(&hb, &cb, 1e-12).ok().map(|o| o.objective),
            }
        })
        .collect();
    Ok(RunAudit {
        improving_moves: nash_audit(inst, partition, allocation, rule)?,
        violations: audit_constraints(inst, partition, allocation, tol)?,
        oracle,
    })
}

/// Feasibility of every coalition of `partition` under `rule`.
pub fn partition_feasible(inst: &Instance, partition: &Partition, rule: AllocationRule) -> bool {
    let ns = inst.n_sbs();
    (0..ns).all(|n| coalition_utility(inst, Kind::Hrd, Some(n), &partition.hrd_members(n), rule).feasible)
        && (0..=ns).all(|c| {
            let n = coalition_sbs(Kind::Csd, c, ns);
            coalition_utility(inst, Kind::Csd, n, &partition.csd_members(n), rule).feasible
        })
}

/// Optimum of one class by enumerating every assignment, pricing coalitions
/// under `rule`. Returns `None` if no assignment is feasible.
fn enumerate_class(inst: &Instance, kind: Kind, n_dev: usize, rule: AllocationRule) -> Option<(Vec<usize>, f64)> {
    let ns = inst.n_sbs();
    let nc = n_coalitions(kind, ns);
    let mut memo: HashMap<(usize, u64), Utility> = HashMap::new();
    let mut assign = vec![0usize; n_dev];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let mut masks = vec![0u64; nc];
        for (k, &c) in assign.iter().enumerate() {
            masks[c] |= 1 << k;
        }
        let mut total = 0.0;
        let mut feasible = true;
        for (c, &mask) in masks.iter().enumerate() {
            let u = memo.entry((c, mask)).or_insert_with(|| {
                let members: Vec<usize> = (0..n_dev).filter(|k| mask >> k & 1 == 1).collect();
                coalition_utility(inst, kind, coalition_sbs(kind, c, ns), &members, rule)
            });
            feasible &= u.feasible;
            total += u.value;
        }
        if feasible && best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((assign.clone(), total));
        }
        // Advance the mixed-radix counter.
        let mut k = 0;
        loop {
            if k == n_dev {
                return best;
            }
            assign[k] += 1;
            if assign[k] < nc {
                break;
            }
            assign[k] = 0;
            k += 1;
        }
    }
}

/// Global optimum over all partitions (HRD and CSD classes are independent).
/// Refuses instances with more than a million assignments per class.
pub fn brute_force(inst: &Instance, rule: AllocationRule) -> Result<Option<(Partition, f64)>> {
    let ns = inst.n_sbs();
    let too_big = |base: usize, exp: usize| (base as f64).powi(exp as i32) > 1e6 || exp > 63;
    if too_big(ns, inst.n_hrd()) || too_big(ns + 1, inst.n_csd()) {
        return Err(Error::Precondition("instance too large to enumerate".into()));
    }
    let Some((hrd, fh)) = enumerate_class(inst, Kind::Hrd, inst.n_hrd(), rule) else {
        return Ok(None);
    };
    let Some((csd, fc)) = enumerate_class(inst, Kind::Csd, inst.n_csd(), rule) else {
        return Ok(None);
    };
    let partition = Partition {
        hrd_of: hrd,
        csd_of: csd.iter().map(|&c| coalition_sbs(Kind::Csd, c, ns)).collect(),
    };
    Ok(Some((partition, fh + fc)))
}

/// Move log as CSV: `outer,iteration,kind,phase,outcome,delta_v,f`.
pub fn write_move_log<W: Write>(log: &[MoveRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("move log", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::DemandConfig;
    use crate::delay::{audit_constraints, objective, tests::instance, FEAS_TOL};
    use crate::scenario::Counts;
    use approx::assert_relative_eq;

    fn tiny(seed: u64) -> Instance {
        let cfg = DemandConfig {
            storage_bytes: 27e6,
            ..DemandConfig::default()
        };
        instance(
            Counts {
                sbs_per_cell: 1,
                n_hrd: 3,
                n_csd: 3,
            },
            seed,
            &cfg,
        )
    }

    fn desk(seed: u64) -> Instance {
        let cfg = DemandConfig {
            storage_bytes: 27e6,
            ..DemandConfig::default()
        };
        instance(Counts::default(), seed, &cfg)
    }

    fn cached_values_match(st: &GameState, inst: &Instance) {
        let f = objective(inst, &st.partition, &st.allocation).unwrap();
        assert_relative_eq!(f, st.objective, max_relative = 1e-9);
    }

    #[test]
    fn abcg_state_is_consistent() {
        let inst = desk(4);
        let st = abcg_init(&inst, &GameParams::default()).unwrap();
        cached_values_match(&st, &inst);
        for k in 0..inst.n_hrd() {
            let n = st.partition.hrd_of[k];
            if !st.fallback_hrds.contains(&k) {
                assert!(inst.rates.theta_lb[(n, k)] <= 1.0);
            }
        }
        let v = audit_constraints(&inst, &st.partition, &st.allocation, FEAS_TOL).unwrap();
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn abcg_equal_shares() {
        let inst = desk(4);
        let st = abcg_init(&inst, &GameParams::default()).unwrap();
        for n in 0..inst.n_sbs() {
            let m = st.members(Kind::Hrd, n);
            let pairs: usize = m.iter().map(|&k| inst.demand.requested(k).count()).sum();
            for &k in m {
                for i in inst.demand.requested(k) {
                    assert_relative_eq!(st.allocation.beta[(n, k, i)], 1.0 / pairs as f64);
                }
            }
        }
    }

    #[test]
    fn abcg_offload_predicate() {
        let inst = desk(6);
        let st = abcg_init(&inst, &GameParams::default()).unwrap();
        let r = evaluate(&inst, &st.partition, &st.allocation).unwrap();
        for c in &r.csd {
            if c.sbs.is_some() {
                assert!(c.delay.t_ul + c.delay.t_ed <= c.delay.t_lc * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn proposals_are_deterministic() {
        let inst = desk(2);
        let mut a = abcg_init(&inst, &GameParams::default()).unwrap();
        let mut b = abcg_init(&inst, &GameParams::default()).unwrap();
        for _ in 0..50 {
            assert_eq!(propose_move(&mut a, &inst, Kind::Csd), propose_move(&mut b, &inst, Kind::Csd));
        }
    }

    #[test]
    fn proposals_follow_the_emptiness_rule() {
        let inst = desk(2);
        let mut st = abcg_init(&inst, &GameParams::default()).unwrap();
        for _ in 0..200 {
            let p = propose_move(&mut st, &inst, Kind::Hrd).unwrap();
            let (em, en) = (st.members(Kind::Hrd, p.m).is_empty(), st.members(Kind::Hrd, p.n).is_empty());
            match p.mv {
                Move::Transfer { from, to, .. } => {
                    assert!(em || en);
                    assert!(st.members(Kind::Hrd, to).is_empty());
                    assert!(!st.members(Kind::Hrd, from).is_empty());
                }
                Move::Swap { .. } => assert!(!em && !en),
            }
        }
    }

    #[test]
    fn rejected_move_leaves_state_alone() {
        // Five cached files plus room for five task inputs.
        let cfg = DemandConfig {
            storage_bytes: 25.5e6,
            ..DemandConfig::default()
        };
        let inst = instance(Counts::default(), 3, &cfg);
        let mut st = abcg_init(&inst, &GameParams::default()).unwrap();
        // Cram every CSD into one SBS: storage overflows.
        let all: Vec<usize> = (0..inst.n_csd()).collect();
        let from = st.partition.csd_of[0].unwrap_or(inst.n_sbs());
        let to = (from + 1) % inst.n_sbs();
        let p = MoveProposal {
            kind: Kind::Csd,
            mv: Move::Transfer { who: 0, from, to },
            m: from,
            n: to,
            tentative_m: vec![],
            tentative_n: all,
        };
        let before = (st.partition.clone(), st.allocation.clone(), st.objective);
        let out = evaluate_and_apply(&mut st, &inst, p, AllocationRule::ClosedForm, Phase::Random);
        assert_eq!(out, Outcome::Infeasible);
        assert_eq!(before, (st.partition.clone(), st.allocation.clone(), st.objective));
    }

    #[test]
    fn accepted_move_lowers_f_by_delta() {
        let inst = desk(5);
        let mut st = abcg_init(&inst, &GameParams::default()).unwrap();
        let mut seen = 0;
        for _ in 0..500 {
            let p = propose_move(&mut st, &inst, Kind::Hrd).unwrap();
            let f0 = st.objective;
            if evaluate_and_apply(&mut st, &inst, p, AllocationRule::ClosedForm, Phase::Random) == Outcome::Accepted {
                let dv = st.log.last().unwrap().delta_v;
                assert_relative_eq!(st.objective - f0, dv, max_relative = 1e-9, epsilon = 1e-12);
                cached_values_match(&st, &inst);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn zero_iterations_rejected() {
        let inst = tiny(1);
        let mut st = abcg_init(&inst, &GameParams::default()).unwrap();
        let p = GameParams {
            move_iterations: 0,
            ..GameParams::default()
        };
        assert!(matches!(
            run_coalition_game(&mut st, &inst, Kind::Hrd, &p),
            Err(Error::Precondition(_))
        ));
        let p = GameParams {
            outer_iterations: 0,
            ..GameParams::default()
        };
        assert!(run_amnd(&inst, &p).is_err());
    }

    #[test]
    fn amnd_trace_nonincreasing_and_below_abcg() {
        for seed in 1..4 {
            let inst = desk(seed);
            let p = GameParams::default();
            let st = run_amnd(&inst, &p).unwrap();
            let abcg = abcg_init(&inst, &p).unwrap();
            assert!(st.objective <= abcg.objective + 1e-9);
            assert!(st.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            cached_values_match(&st, &inst);
        }
    }

    #[test]
    fn no_proposals_means_single_reallocation() {
        let inst = desk(7);
        let p = GameParams {
            outer_iterations: 1,
            patience: Some(0),
            polish: false,
            ..GameParams::default()
        };
        let st = run_amnd(&inst, &p).unwrap();
        let mut abcg = abcg_init(&inst, &p).unwrap();
        assert_eq!(st.partition, abcg.partition);
        reallocate(&mut abcg, &inst, p.rule);
        assert_eq!(st.objective, abcg.objective);
        assert!(st.objective <= st.outer_trace[0]);
    }

    #[test]
    fn more_outer_iterations_never_hurt() {
        let inst = desk(8);
        let short = run_amnd(&inst, &GameParams { outer_iterations: 2, ..GameParams::default() }).unwrap();
        let long = run_amnd(&inst, &GameParams { outer_iterations: 4, ..GameParams::default() }).unwrap();
        assert!(long.objective <= short.objective + 1e-12);
        assert_eq!(&long.outer_trace[..3], &short.outer_trace[..]);
    }

    #[test]
    fn polished_partition_is_nash_stable() {
        let inst = desk(9);
        let p = GameParams::default();
        let st = run_amnd(&inst, &p).unwrap();
        let found = nash_audit(&inst, &st.partition, &st.allocation, p.rule).unwrap();
        assert!(found.is_empty(), "{found:?}");
    }

    #[test]
    fn tiny_game_reaches_exhaustive_stability() {
        let cfg = DemandConfig {
            storage_bytes: 27e6,
            ..DemandConfig::default()
        };
        let inst = crate::delay::tests::instance(
            Counts {
                sbs_per_cell: 1,
                n_hrd: 3,
                n_csd: 0,
            },
            11,
            &cfg,
        );
        let p = GameParams {
            polish: false,
            move_iterations: 20_000,
            patience: Some(20_000),
            ..GameParams::default()
        };
        let mut st = abcg_init(&inst, &p).unwrap();
        run_coalition_game(&mut st, &inst, Kind::Hrd, &p).unwrap();
        // Transfers into non-empty coalitions are never proposed, so check
        // only what the random phase can reach: swaps and moves into empty
        // coalitions.
        let found = nash_audit(&inst, &st.partition, &st.allocation, p.rule).unwrap();
        for m in found {
            if let Move::Transfer { to, .. } = m.mv {
                assert!(!st.members(Kind::Hrd, to).is_empty(), "{m:?}");
            } else {
                panic!("improving swap left: {m:?}");
            }
        }
    }

    #[test]
    fn brute_force_is_a_floor() {
        for seed in 1..6 {
            let inst = tiny(seed);
            let p = GameParams::default();
            let st = run_amnd(&inst, &p).unwrap();
            let (best, f_opt) = brute_force(&inst, p.rule).unwrap().unwrap();
            assert!(st.objective >= f_opt - 1e-9 * f_opt);
            assert!(partition_feasible(&inst, &best, p.rule));
            assert_eq!(partition_feasible(&inst, &st.partition, p.rule), st.all_feasible());
        }
    }

    #[test]
    fn move_log_csv() {
        let inst = tiny(2);
        let st = run_amnd(&inst, &GameParams::default()).unwrap();
        let mut buf = Vec::new();
        write_move_log(&st.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "outer,iteration,kind,phase,outcome,delta_v,f");
        assert_eq!(lines.count(), st.log.len());
    }
}
