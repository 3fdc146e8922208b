//! The matching-for-balance integer program.
//!
//! Balance depends on the binary match matrix only through the per-target
//! match counts `c_j`, and any count vector with `sum c_j = M * S` and
//! `c_j <= S` can be turned back into a matrix by greedy assignment. The
//! search therefore runs over integer count vectors:
//!
//! 1. an LP bound on the largest multiplicity whose relaxation is feasible
//!    prunes every `M` above it;
//! 2. each remaining `M` is probed in descending order, exactly by
//!    depth-first branch-and-bound on small instances, or by LP rounding
//!    plus local repair above `exact_limit` targets;
//! 3. the first feasible count vector is realized as pairs.
//!
//! Balance inequalities are strict: `|imbalance_k| < delta_k - STRICT_TOLERANCE`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BasisMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lp::{self, ScaledRows};

/// Absolute slack subtracted from every tolerance before the strict comparison.
pub const STRICT_TOLERANCE: f64 = 1e-12;

/// Relaxation values above `1 + LP_SLACK` are treated as proofs of infeasibility.
const LP_SLACK: f64 = 1e-7;

/// Per-basis-function imbalance tolerances `delta_k`; `+inf` disables a constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub delta: Vec<f64>,
}

impl BalanceSpec {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        if delta.iter().any(|d| d.is_nan() || *d < 0.0) {
            return Err(Error::InvalidArgument("tolerances must be nonnegative".into()));
        }
        Ok(Self { delta })
    }

    pub fn uniform(k: usize, delta: f64) -> Result<Self> {
        Self::new(vec![delta; k])
    }

    pub fn unconstrained(k: usize) -> Self {
        Self { delta: vec![f64::INFINITY; k] }
    }

    /// `delta_k = c * n^{-1/2} * sd(B_k)`, with constant columns left
    /// unconstrained (their imbalance is identically zero).
    pub fn schedule(bm: &BasisMatrix, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument("schedule constant must be positive".into()));
        }
        let scale = c / (bm.n() as f64).sqrt();
        let delta = bm
            .column_sd()
            .into_iter()
            .map(|sd| if sd > 0.0 { scale * sd } else { f64::INFINITY })
            .collect();
        Self::new(delta)
    }

    pub fn k(&self) -> usize {
        self.delta.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Each treated unit is matched to `M` controls.
    TreatedToControl,
    /// Each control unit is matched to `M` treated units.
    ControlToTreated,
}

impl Direction {
    pub fn source_is_treated(self) -> bool {
        matches!(self, Direction::TreatedToControl)
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::TreatedToControl => "treated_to_control",
            Direction::ControlToTreated => "control_to_treated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "treated_to_control" | "t2c" => Ok(Direction::TreatedToControl),
            "control_to_treated" | "c2t" => Ok(Direction::ControlToTreated),
            _ => Err(Error::InvalidArgument(format!("unknown direction '{s}'"))),
        }
    }

    /// `(sources, targets)` unit indices in row order.
    pub fn split(self, arms: &[bool]) -> (Vec<usize>, Vec<usize>) {
        let src = self.source_is_treated();
        let sources = (0..arms.len()).filter(|&i| arms[i] == src).collect();
        let targets = (0..arms.len()).filter(|&i| arms[i] != src).collect();
        (sources, targets)
    }
}

/// One ordered match, as unit indices into the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MatchPair {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSolution {
    pub m: u32,
    /// Sorted by `(source, target)`.
    pub pairs: Vec<MatchPair>,
    pub direction: Direction,
    pub with_replacement: bool,
}

impl MatchSolution {
    /// Number of pairs each unit appears in as a target, indexed by unit.
    pub fn target_counts(&self, n: usize) -> Vec<u32> {
        let mut c = vec![0u32; n];
        for p in &self.pairs {
            c[p.target] += 1;
        }
        c
    }

    /// Matched targets of every source, indexed by unit (empty for non-sources).
    pub fn targets_by_source(&self, n: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n];
        for p in &self.pairs {
            out[p.source].push(p.target);
        }
        out
    }

    /// Checks the structural constraints: row sums exactly `M`, distinct
    /// targets per source, cross-arm pairs only, and at most one use per
    /// target without replacement.
    pub fn validate(&self, arms: &[bool]) -> Result<()> {
        let n = arms.len();
        if self.m == 0 {
            return Err(Error::InvalidArgument("multiplicity must be >= 1".into()));
        }
        let src_arm = self.direction.source_is_treated();
        // Strictly sorted pairs cannot repeat; only unsorted input needs a set.
        let sorted = self.pairs.windows(2).all(|w| w[0] < w[1]);
        let mut seen = HashSet::with_capacity(if sorted { 0 } else { self.pairs.len() });
        let mut row = vec![0u32; n];
        let mut col = vec![0u32; n];
        for p in &self.pairs {
            if p.source >= n || p.target >= n {
                return Err(Error::IdMismatch(format!("pair {p:?} outside dataset of {n} units")));
            }
            if arms[p.source] != src_arm || arms[p.target] == src_arm {
                return Err(Error::InvalidArgument(format!("pair {p:?} is not cross-arm in the stated direction")));
            }
            if !sorted && !seen.insert(*p) {
                return Err(Error::InvalidArgument(format!("duplicate pair {p:?}")));
            }
            row[p.source] += 1;
            col[p.target] += 1;
        }
        for i in 0..n {
            if arms[i] == src_arm && row[i] != self.m {
                return Err(Error::InvalidArgument(format!(
                    "unit {i} has {} matches, expected {}",
                    row[i], self.m
                )));
            }
            if !self.with_replacement && col[i] > 1 {
                return Err(Error::InvalidArgument(format!("unit {i} reused without replacement")));
            }
        }
        Ok(())
    }
}

/// Per-target match counts, aligned with the target list of a direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountVector {
    pub counts: Vec<u32>,
    pub total: u64,
}

impl CountVector {
    pub fn new(counts: Vec<u32>) -> Self {
        let total = counts.iter().map(|&c| c as u64).sum();
        Self { counts, total }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exact,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ProbeOutcome {
    Feasible { counts: CountVector },
    /// Proven infeasible (relaxation infeasible or exhaustive search).
    Infeasible,
    /// The heuristic (or an exhausted node budget) found nothing; feasibility unknown.
    HeuristicInfeasible,
}

impl ProbeOutcome {
    pub fn counts(&self) -> Option<&CountVector> {
        match self {
            ProbeOutcome::Feasible { counts } => Some(counts),
            _ => None,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            ProbeOutcome::Feasible { .. } => "feasible",
            ProbeOutcome::Infeasible => "infeasible",
            ProbeOutcome::HeuristicInfeasible => "heuristic_infeasible",
        }
    }
}

/// Which multiplicities to try.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "m", rename_all = "snake_case")]
pub enum MPolicy {
    /// Largest feasible `M` (the objective of the program).
    Maximize,
    /// Only the given `M`.
    Fixed(u32),
    /// Largest feasible `M` not exceeding the given value.
    LargestFeasibleBelow(u32),
}

impl MPolicy {
    /// Parses `max`, `fixed:<m>` or `below:<m>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown m policy '{s}'"));
        match s.split_once(':') {
            None if s == "max" || s == "maximize" => Ok(MPolicy::Maximize),
            Some(("fixed", m)) => Ok(MPolicy::Fixed(m.parse().map_err(|_| bad())?)),
            Some(("below", m)) => Ok(MPolicy::LargestFeasibleBelow(m.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Instances with at most this many targets are solved exactly.
    pub exact_limit: usize,
    /// Seed for randomized rounding.
    pub seed: u64,
    /// Rounding attempts per multiplicity in heuristic mode.
    pub rounding_attempts: usize,
    /// Local-repair move budget per rounding attempt.
    pub repair_iterations: usize,
    /// Branch-and-bound node budget per multiplicity.
    pub node_limit: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { exact_limit: 16, seed: 0, rounding_attempts: 6, repair_iterations: 400, node_limit: 200_000 }
    }
}

/// Preprocessed one-direction problem.
struct Instance {
    sources: Vec<usize>,
    targets: Vec<usize>,
    /// Active constraint indices (finite tolerance).
    active: Vec<usize>,
    /// `delta_k - STRICT_TOLERANCE` for active constraints.
    bound: Vec<f64>,
    /// Target rows centered at the source mean, active columns only.
    centered: Vec<f64>,
    scaled: ScaledRows,
    cap: u32,
    /// Some tolerance is too small to ever hold strictly.
    impossible: bool,
    relaxed_mass: Option<f64>,
}

impl Instance {
    fn build(
        bm: &BasisMatrix,
        arms: &[bool],
        spec: &BalanceSpec,
        dir: Direction,
        with_replacement: bool,
    ) -> Result<Self> {
        if bm.n() != arms.len() {
            return Err(Error::Dimension(format!("basis has {} rows, arms has {}", bm.n(), arms.len())));
        }
        if spec.k() != bm.k() {
            return Err(Error::Dimension(format!("{} tolerances for K = {}", spec.k(), bm.k())));
        }
        if !with_replacement && dir == Direction::ControlToTreated {
            return Err(Error::Unsupported(
                "matching without replacement is implemented for treated_to_control only".into(),
            ));
        }
        let (sources, targets) = dir.split(arms);
        if sources.is_empty() || targets.is_empty() {
            return Err(Error::EmptyArm(format!("{} needs nonempty source and target arms", dir.label())));
        }
        let mean = bm.mean_over(&sources);
        let active: Vec<usize> = (0..bm.k()).filter(|&k| spec.delta[k].is_finite()).collect();
        let bound: Vec<f64> = active.iter().map(|&k| spec.delta[k] - STRICT_TOLERANCE).collect();
        let impossible = bound.iter().any(|&b| b <= 0.0);
        let ka = active.len();
        let mut centered = Vec::with_capacity(targets.len() * ka);
        let mut scaled = Vec::with_capacity(targets.len() * ka);
        for &j in &targets {
            for (a, &k) in active.iter().enumerate() {
                let v = bm.get(j, k) - mean[k];
                centered.push(v);
                scaled.push(if impossible { 0.0 } else { v / bound[a] });
            }
        }
        let cap = if with_replacement { sources.len() as u32 } else { 1 };
        let scaled = ScaledRows { a: scaled, n: targets.len(), k: ka };
        Ok(Self { sources, targets, active, bound, centered, scaled, cap, impossible, relaxed_mass: None })
    }

    fn s(&self) -> u64 {
        self.sources.len() as u64
    }

    fn structural_max(&self) -> u32 {
        if self.cap == 1 {
            (self.targets.len() / self.sources.len()) as u32
        } else {
            self.targets.len() as u32
        }
    }

    /// Largest `M` whose LP relaxation is feasible (0 if none).
    fn relaxation_bound(&mut self) -> u32 {
        if self.impossible {
            return 0;
        }
        let mass = *self.relaxed_mass.get_or_insert_with(|| lp::max_balanced_mass(&self.scaled));
        let m = (mass * self.cap as f64 / self.s() as f64 + 1e-7).floor();
        (m.max(0.0) as u32).min(self.structural_max())
    }

    /// Worst imbalance of integer counts in tolerance units (raw, unscaled
    /// arithmetic) and whether every strict inequality holds.
    fn evaluate(&self, counts: &[u32], m: u32) -> (f64, bool) {
        let ka = self.active.len();
        let mut acc = vec![0.0; ka];
        for (j, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let row = &self.centered[j * ka..(j + 1) * ka];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += c as f64 * v;
            }
        }
        let denom = m as f64 * self.s() as f64;
        let mut worst = 0.0f64;
        let mut ok = !self.impossible;
        for (a, &b) in acc.iter().zip(&self.bound) {
            let imb = (a / denom).abs();
            if !(imb < b) {
                ok = false;
            }
            worst = worst.max(if b > 0.0 { imb / b } else { f64::INFINITY });
        }
        (worst, ok)
    }

    fn probe(&mut self, m: u32, cfg: &SolverConfig, dir: Direction) -> ProbeOutcome {
        if m == 0 || m > self.structural_max() || self.impossible {
            return ProbeOutcome::Infeasible;
        }
        if m > self.relaxation_bound() {
            return ProbeOutcome::Infeasible;
        }
        let found = if self.targets.len() <= cfg.exact_limit {
            self.exact(m, cfg.node_limit)
        } else {
            self.heuristic(m, cfg, dir)
        };
        match found {
            Search::Found(c) => ProbeOutcome::Feasible { counts: CountVector::new(c) },
            Search::Infeasible => ProbeOutcome::Infeasible,
            Search::GaveUp => ProbeOutcome::HeuristicInfeasible,
        }
    }

    /// Depth-first branch-and-bound on the counts with LP bounds.
    fn exact(&self, m: u32, node_limit: usize) -> Search {
        let c = self.targets.len();
        let total = m as u64 * self.s();
        let scale = total as f64;
        let mut stack = vec![(vec![0u32; c], vec![self.cap; c])];
        let mut nodes = 0usize;
        while let Some((lo, hi)) = stack.pop() {
            nodes += 1;
            if nodes > node_limit {
                return Search::GaveUp;
            }
            let lo_sum: u64 = lo.iter().map(|&v| v as u64).sum();
            let hi_sum: u64 = hi.iter().map(|&v| v as u64).sum();
            if lo_sum > total || hi_sum < total {
                continue;
            }
            if lo == hi {
                if self.evaluate(&lo, m).1 {
                    return Search::Found(lo);
                }
                continue;
            }
            let lower: Vec<f64> = lo.iter().map(|&v| v as f64 / scale).collect();
            let upper: Vec<f64> = hi.iter().map(|&v| v as f64 / scale).collect();
            let Some(relaxed) = lp::min_violation(&self.scaled, &lower, &upper) else {
                continue;
            };
            if relaxed.violation > 1.0 + LP_SLACK {
                continue;
            }
            let values: Vec<f64> = relaxed.weights.iter().map(|w| w * scale).collect();
            let integral = values.iter().all(|v| (v - v.round()).abs() < 1e-6);
            if integral {
                let cand: Vec<u32> = values
                    .iter()
                    .zip(lo.iter().zip(&hi))
                    .map(|(v, (&l, &h))| (v.round().max(0.0) as u32).clamp(l, h))
                    .collect();
                let sum: u64 = cand.iter().map(|&v| v as u64).sum();
                if sum == total && self.evaluate(&cand, m).1 {
                    return Search::Found(cand);
                }
            }
            // Branch on the most fractional free variable; fall back to a
            // three-way split on a free variable when the LP point is integral.
            let mut pick: Option<(usize, f64)> = None;
            for j in 0..c {
                if lo[j] == hi[j] {
                    continue;
                }
                let f = values[j] - values[j].floor();
                let dist = (f - 0.5).abs();
                if f > 1e-6 && f < 1.0 - 1e-6 && pick.is_none_or(|(_, d)| dist < d) {
                    pick = Some((j, dist));
                }
            }
            match pick {
                Some((j, _)) => {
                    let v = values[j];
                    let fl = (v.floor().max(0.0) as u32).clamp(lo[j], hi[j]);
                    let mut left = (lo.clone(), hi.clone());
                    left.1[j] = fl;
                    let mut right = (lo, hi);
                    right.0[j] = (fl + 1).min(right.1[j]);
                    if v - v.floor() < 0.5 {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
                None => {
                    let j = (0..c).find(|&j| lo[j] < hi[j]).expect("some variable is free");
                    let v = (values[j].round().max(0.0) as u32).clamp(lo[j], hi[j]);
                    if v > lo[j] {
                        let mut below = (lo.clone(), hi.clone());
                        below.1[j] = v - 1;
                        stack.push(below);
                    }
                    if v < hi[j] {
                        let mut above = (lo.clone(), hi.clone());
                        above.0[j] = v + 1;
                        stack.push(above);
                    }
                    let mut at = (lo, hi);
                    at.0[j] = v;
                    at.1[j] = v;
                    stack.push(at);
                }
            }
        }
        Search::Infeasible
    }

    /// LP relaxation, randomized rounding, then greedy +/-1 repair moves.
    fn heuristic(&self, m: u32, cfg: &SolverConfig, dir: Direction) -> Search {
        let c = self.targets.len();
        let total = m as u64 * self.s();
        let scale = total as f64;
        let upper = vec![self.cap as f64 / scale; c];
        let Some(relaxed) = lp::min_violation(&self.scaled, &vec![0.0; c], &upper) else {
            return Search::Infeasible;
        };
        if relaxed.violation > 1.0 + LP_SLACK {
            return Search::Infeasible;
        }
        let base: Vec<f64> = relaxed.weights.iter().map(|w| (w * scale).clamp(0.0, self.cap as f64)).collect();
        let stream = ((m as u64) << 1) | u64::from(dir == Direction::ControlToTreated);
        for attempt in 0..cfg.rounding_attempts.max(1) {
            let mut counts: Vec<u32> = if attempt == 0 {
                base.iter().map(|v| v.round() as u32).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream.wrapping_mul(1024).wrapping_add(attempt as u64));
                base.iter()
                    .map(|v| {
                        let f = v.floor();
                        f as u32 + u32::from(rng.gen::<f64>() < v - f)
                    })
                    .collect()
            };
            for x in counts.iter_mut() {
                *x = (*x).min(self.cap);
            }
            let mut state = RepairState::new(self, &counts, scale);
            state.fix_total(self, &mut counts, total);
            state.repair(self, &mut counts, cfg.repair_iterations);
            if self.evaluate(&counts, m).1 {
                return Search::Found(counts);
            }
        }
        Search::GaveUp
    }
}

enum Search {
    Found(Vec<u32>),
    Infeasible,
    GaveUp,
}

/// Running scaled imbalance `sum_j c_j a_j / (M S)` for local moves.
struct RepairState {
    viol: Vec<f64>,
    scale: f64,
}

impl RepairState {
    fn new(inst: &Instance, counts: &[u32], scale: f64) -> Self {
        let k = inst.scaled.k;
        let mut viol = vec![0.0; k];
        for (j, &c) in counts.iter().enumerate() {
            for (v, a) in viol.iter_mut().zip(inst.scaled.row(j)) {
                *v += c as f64 * a;
            }
        }
        viol.iter_mut().for_each(|v| *v /= scale);
        Self { viol, scale }
    }

    fn worst_after(&self, add: Option<&[f64]>, sub: Option<&[f64]>) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.viol.len() {
            let mut v = self.viol[k];
            if let Some(a) = add {
                v += a[k] / self.scale;
            }
            if let Some(s) = sub {
                v -= s[k] / self.scale;
            }
            worst = worst.max(v.abs());
        }
        worst
    }

    fn apply(&mut self, add: Option<&[f64]>, sub: Option<&[f64]>) {
        for k in 0..self.viol.len() {
            if let Some(a) = add {
                self.viol[k] += a[k] / self.scale;
            }
            if let Some(s) = sub {
                self.viol[k] -= s[k] / self.scale;
            }
        }
    }

    /// Adds or removes single units until the counts sum to `total`.
    fn fix_total(&mut self, inst: &Instance, counts: &mut [u32], total: u64) {
        let mut sum: u64 = counts.iter().map(|&c| c as u64).sum();
        while sum != total {
            let grow = sum < total;
            let best = (0..counts.len())
                .filter(|&j| if grow { counts[j] < inst.cap } else { counts[j] > 0 })
                .map(|j| {
                    let row = inst.scaled.row(j);
                    let w = if grow { self.worst_after(Some(row), None) } else { self.worst_after(None, Some(row)) };
                    (j, w)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let Some((j, _)) = best else { return };
            let row = inst.scaled.row(j);
            if grow {
                counts[j] += 1;
                sum += 1;
                self.apply(Some(row), None);
            } else {
                counts[j] -= 1;
                sum -= 1;
                self.apply(None, Some(row));
            }
        }
    }

    /// Greedy pair moves (+1 on one target, -1 on another) that reduce the
    /// worst scaled imbalance, until it drops below one or no move helps.
    fn repair(&mut self, inst: &Instance, counts: &mut [u32], iterations: usize) {
        const CANDIDATES: usize = 16;
        let k = inst.scaled.k;
        if k == 0 {
            return;
        }
        for _ in 0..iterations {
            let current = self.worst_after(None, None);
            if current < 1.0 - 1e-9 {
                return;
            }
            // Direction that shrinks the largest components fastest.
            let grad: Vec<f64> = self.viol.iter().map(|v| v.signum() * (v.abs() / current).powi(8)).collect();
            let score = |j: usize| -> f64 { inst.scaled.row(j).iter().zip(&grad).map(|(a, g)| a * g).sum() };
            let mut inc: Vec<(usize, f64)> =
                (0..counts.len()).filter(|&j| counts[j] < inst.cap).map(|j| (j, score(j))).collect();
            let mut dec: Vec<(usize, f64)> =
                (0..counts.len()).filter(|&j| counts[j] > 0).map(|j| (j, -score(j))).collect();
            let top = |v: &mut Vec<(usize, f64)>| {
                if v.len() > CANDIDATES {
                    v.select_nth_unstable_by(CANDIDATES, |a, b| a.1.total_cmp(&b.1));
                    v.truncate(CANDIDATES);
                }
            };
            top(&mut inc);
            top(&mut dec);
            let mut best: Option<(usize, usize, f64)> = None;
            for &(p, _) in &inc {
                for &(q, _) in &dec {
                    if p == q {
                        continue;
                    }
                    let w = self.worst_after(Some(inst.scaled.row(p)), Some(inst.scaled.row(q)));
                    if best.is_none_or(|(_, _, b)| w < b) {
                        best = Some((p, q, w));
                    }
                }
            }
            match best {
                Some((p, q, w)) if w < current - 1e-15 => {
                    counts[p] += 1;
                    counts[q] -= 1;
                    self.apply(Some(inst.scaled.row(p)), Some(inst.scaled.row(q)));
                }
                _ => return,
            }
            debug_assert_eq!(self.viol.len(), k);
        }
    }
}

/// Finds per-target counts meeting every balance inequality at multiplicity `m`.
pub fn feasible_counts(
    bm: &BasisMatrix,
    arms: &[bool],
    spec: &BalanceSpec,
    dir: Direction,
    m: u32,
    with_replacement: bool,
    cfg: &SolverConfig,
) -> Result<ProbeOutcome> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    let mut inst = Instance::build(bm, arms, spec, dir, with_replacement)?;
    Ok(inst.probe(m, cfg, dir))
}

/// Builds the binary assignment for a count vector.
///
/// Targets are visited in order and each is given to the first `c_j`
/// sources that still have fewer than `M` matches. When that rule runs out
/// of open sources for some target (possible for valid counts, e.g.
/// `S = 2, M = 2, c = (1, 1, 2)`), the construction switches to filling
/// source slots cyclically, which always succeeds because `c_j <= S`.
pub fn realize_assignment(
    cv: &CountVector,
    sources: &[usize],
    targets: &[usize],
    m: u32,
    direction: Direction,
    with_replacement: bool,
) -> Result<MatchSolution> {
    let s = sources.len();
    if m == 0 || s == 0 {
        return Err(Error::InvalidCounts("need M >= 1 and at least one source".into()));
    }
    if cv.counts.len() != targets.len() {
        return Err(Error::InvalidCounts(format!(
            "{} counts for {} targets",
            cv.counts.len(),
            targets.len()
        )));
    }
    let total: u64 = cv.counts.iter().map(|&c| c as u64).sum();
    if total != cv.total || total != m as u64 * s as u64 {
        return Err(Error::InvalidCounts(format!("counts sum to {total}, expected M * S = {}", m as u64 * s as u64)));
    }
    let cap = if with_replacement { s as u32 } else { 1 };
    if let Some(j) = cv.counts.iter().position(|&c| c > cap) {
        return Err(Error::InvalidCounts(format!("target {j} has count {} above {cap}", cv.counts[j])));
    }

    let raw = greedy_first_open(&cv.counts, s, m).unwrap_or_else(|| cyclic_fill(&cv.counts, s));
    // Bucket by source; within a bucket targets arrive in increasing order,
    // and both index lists are ascending, so the result is sorted.
    let mut start = vec![0usize; s + 1];
    for &(si, _) in &raw {
        start[si + 1] += 1;
    }
    for i in 0..s {
        start[i + 1] += start[i];
    }
    let mut pairs = vec![MatchPair { source: 0, target: 0 }; raw.len()];
    for (si, tj) in raw {
        pairs[start[si]] = MatchPair { source: sources[si], target: targets[tj] };
        start[si] += 1;
    }
    if sources.windows(2).any(|w| w[0] > w[1]) || targets.windows(2).any(|w| w[0] > w[1]) {
        pairs.sort_unstable();
    }
    Ok(MatchSolution { m, pairs, direction, with_replacement })
}

/// Loads stay nonincreasing in source order under this rule, so the open
/// sources always form a suffix and each target takes the next `c_j` of them.
fn greedy_first_open(counts: &[u32], s: usize, m: u32) -> Option<Vec<(usize, usize)>> {
    let mut load = vec![0u32; s];
    let mut first_open = 0usize;
    let mut out = Vec::with_capacity(counts.iter().map(|&c| c as usize).sum());
    for (j, &c) in counts.iter().enumerate() {
        let c = c as usize;
        if first_open + c > s {
            return None;
        }
        for (i, l) in load.iter_mut().enumerate().skip(first_open).take(c) {
            *l += 1;
            out.push((i, j));
        }
        while first_open < s && load[first_open] >= m {
            first_open += 1;
        }
    }
    Some(out)
}

fn cyclic_fill(counts: &[u32], s: usize) -> Vec<(usize, usize)> {
    let mut slot = 0usize;
    let mut out = Vec::with_capacity(counts.iter().map(|&c| c as usize).sum());
    for (j, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            out.push((slot % s, j));
            slot += 1;
        }
    }
    out
}

/// One probe in a multiplicity search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub m: u32,
    pub outcome: String,
}

/// Diagnostics for one direction of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: Direction,
    pub with_replacement: bool,
    pub mode: SearchMode,
    pub sources: usize,
    pub targets: usize,
    /// Structural maximum of `M`.
    pub m_max: u32,
    /// Largest `M` with a feasible LP relaxation; larger values are skipped.
    pub m_relaxation_bound: u32,
    pub probes: Vec<ProbeRecord>,
    pub chosen_m: Option<u32>,
    /// Worst imbalance in tolerance units: of the returned solution, or the
    /// smallest achievable by the relaxation when nothing was found.
    pub worst_violation: f64,
    /// Basis column attaining `worst_violation`.
    pub worst_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub solution: Option<MatchSolution>,
    pub report: DirectionReport,
}

/// Solves one direction of the program under the given multiplicity policy.
pub fn solve_balance_match(
    bm: &BasisMatrix,
    arms: &[bool],
    spec: &BalanceSpec,
    dir: Direction,
    with_replacement: bool,
    policy: MPolicy,
    cfg: &SolverConfig,
) -> Result<SolveOutcome> {
    let mut inst = Instance::build(bm, arms, spec, dir, with_replacement)?;
    let m_max = inst.structural_max();
    let bound = inst.relaxation_bound();
    let (hi, single) = match policy {
        MPolicy::Maximize => (m_max, false),
        MPolicy::Fixed(m) => (m, true),
        MPolicy::LargestFeasibleBelow(m) => (m.min(m_max), false),
    };
    if hi == 0 && policy != MPolicy::Maximize {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    let mode = if inst.targets.len() <= cfg.exact_limit { SearchMode::Exact } else { SearchMode::Heuristic };
    let mut probes = Vec::new();
    let mut found = None;
    let start = if single { hi } else { hi.min(bound) };
    let stop = if single { hi } else { 1 };
    let mut m = start;
    while m >= stop && m >= 1 {
        let outcome = inst.probe(m, cfg, dir);
        probes.push(ProbeRecord { m, outcome: outcome.label().to_string() });
        if let ProbeOutcome::Feasible { counts } = outcome {
            found = Some((m, counts));
            break;
        }
        m -= 1;
    }

    let names = &bm.column_names;
    let (solution, worst_violation, worst_column) = match found {
        Some((m, counts)) => {
            let (worst, _) = inst.evaluate(&counts.counts, m);
            let column = worst_active_column(&inst, &counts.counts, m).map(|a| names[inst.active[a]].clone());
            let sol = realize_assignment(&counts, &inst.sources, &inst.targets, m, dir, with_replacement)?;
            (Some(sol), worst, column)
        }
        None => {
            let (worst, col) = relaxed_floor(&inst);
            (None, worst, col.map(|a| names[inst.active[a]].clone()))
        }
    };
    let report = DirectionReport {
        direction: dir,
        with_replacement,
        mode,
        sources: inst.sources.len(),
        targets: inst.targets.len(),
        m_max,
        m_relaxation_bound: bound,
        probes,
        chosen_m: solution.as_ref().map(|s| s.m),
        worst_violation,
        worst_column,
    };
    Ok(SolveOutcome { solution, report })
}

fn worst_active_column(inst: &Instance, counts: &[u32], m: u32) -> Option<usize> {
    let ka = inst.active.len();
    let denom = m as f64 * inst.s() as f64;
    (0..ka)
        .map(|a| {
            let s: f64 = counts.iter().enumerate().map(|(j, &c)| c as f64 * inst.centered[j * ka + a]).sum();
            (a, (s / denom).abs() / inst.bound[a].max(f64::MIN_POSITIVE))
        })
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(a, _)| a)
}

/// Smallest worst-case scaled imbalance reachable by the relaxation at
/// `M = 1`, the loosest multiplicity.
fn relaxed_floor(inst: &Instance) -> (f64, Option<usize>) {
    if inst.active.is_empty() {
        return (0.0, None);
    }
    if inst.impossible {
        return (f64::INFINITY, inst.bound.iter().position(|&b| b <= 0.0));
    }
    let scale = inst.s() as f64;
    let upper = vec![inst.cap as f64 / scale; inst.targets.len()];
    match lp::min_violation(&inst.scaled, &vec![0.0; inst.targets.len()], &upper) {
        Some(r) => {
            let k = inst.scaled.k;
            let col = (0..k)
                .map(|a| (a, r.weights.iter().enumerate().map(|(j, w)| w * inst.scaled.a[j * k + a]).sum::<f64>().abs()))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(a, _)| a);
            (r.violation, col)
        }
        None => (f64::INFINITY, None),
    }
}

/// Both directions of the ATE program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BothDirections {
    pub treated_to_control: SolveOutcome,
    pub control_to_treated: SolveOutcome,
}

impl BothDirections {
    pub fn solutions(&self) -> Option<(&MatchSolution, &MatchSolution)> {
        Some((self.treated_to_control.solution.as_ref()?, self.control_to_treated.solution.as_ref()?))
    }

    pub fn failing_directions(&self) -> Vec<Direction> {
        [&self.treated_to_control, &self.control_to_treated]
            .into_iter()
            .filter(|o| o.solution.is_none())
            .map(|o| o.report.direction)
            .collect()
    }
}

/// Solves the two one-directional subproblems independently, each with its
/// own multiplicity.
pub fn solve_both_directions(
    bm: &BasisMatrix,
    arms: &[bool],
    spec: &BalanceSpec,
    with_replacement: bool,
    policy: MPolicy,
    cfg: &SolverConfig,
) -> Result<BothDirections> {
    if !with_replacement {
        return Err(Error::Unsupported("the two-direction program requires matching with replacement".into()));
    }
    Ok(BothDirections {
        treated_to_control: solve_balance_match(bm, arms, spec, Direction::TreatedToControl, true, policy, cfg)?,
        control_to_treated: solve_balance_match(bm, arms, spec, Direction::ControlToTreated, true, policy, cfg)?,
    })
}

/// Writes `direction,source_id,target_id` rows, solutions in the given order.
pub fn write_matches<W: std::io::Write>(sols: &[&MatchSolution], ds: &Dataset, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["direction", "source_id", "target_id"])?;
    let units = ds.units();
    for sol in sols {
        for p in &sol.pairs {
            if p.source >= units.len() || p.target >= units.len() {
                return Err(Error::IdMismatch(format!("pair {p:?} outside dataset")));
            }
            out.write_record([sol.direction.label(), units[p.source].id.as_str(), units[p.target].id.as_str()])?;
        }
    }
    out.flush().map_err(|source| Error::Io { path: "<matches>".into(), source })?;
    Ok(())
}

/// Reads a match CSV back into one solution per direction present. The
/// multiplicity is the common number of matches per source.
pub fn read_matches<R: std::io::Read>(reader: R, ds: &Dataset, with_replacement: bool) -> Result<Vec<MatchSolution>> {
    let index: std::collections::HashMap<&str, usize> =
        ds.units().iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["direction", "source_id", "target_id"] {
        return Err(Error::Header("match file must have columns direction,source_id,target_id".into()));
    }
    let mut by_dir: Vec<(Direction, Vec<MatchPair>)> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let dir = Direction::parse(&rec[0]).map_err(|e| Error::Row { row, message: e.to_string() })?;
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::IdMismatch(format!("row {row}: unknown unit id '{id}'")))
        };
        let pair = MatchPair { source: lookup(&rec[1])?, target: lookup(&rec[2])? };
        match by_dir.iter_mut().find(|(d, _)| *d == dir) {
            Some((_, v)) => v.push(pair),
            None => by_dir.push((dir, vec![pair])),
        }
    }
    let arms = ds.arms();
    let mut out = Vec::with_capacity(by_dir.len());
    for (direction, mut pairs) in by_dir {
        pairs.sort_unstable();
        let first = pairs[0].source;
        let m = pairs.iter().filter(|p| p.source == first).count() as u32;
        let sol = MatchSolution { m, pairs, direction, with_replacement };
        sol.validate(&arms)?;
        out.push(sol);
    }
    Ok(out)
}

/// Imbalance of a solution evaluated pair by pair:
/// `sum_pairs (B_k(source) - B_k(target)) / #pairs` for every `k`.
pub fn pairwise_imbalance(bm: &BasisMatrix, sol: &MatchSolution) -> Vec<f64> {
    let mut acc = vec![0.0; bm.k()];
    for p in &sol.pairs {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += bm.get(p.source, k) - bm.get(p.target, k);
        }
    }
    let len = sol.pairs.len().max(1) as f64;
    acc.into_iter().map(|a| a / len).collect()
}

/// Strict check of imbalances against tolerances.
pub fn within_tolerance(imbalance: &[f64], spec: &BalanceSpec) -> bool {
    imbalance.iter().zip(&spec.delta).all(|(v, d)| d.is_infinite() || v.abs() < d - STRICT_TOLERANCE)
}

/// Largest number of sources/targets accepted by [`oracle_max_m`].
pub const ORACLE_LIMIT: usize = 8;

/// Exhaustive ground truth: the largest `M` for which some binary match
/// matrix satisfies the structural constraints and the pairwise balance
/// inequalities. Matrices are enumerated row by row; partial matrices that
/// reach the same row with the same column sums are expanded once.
pub fn oracle_max_m(
    bm: &BasisMatrix,
    arms: &[bool],
    spec: &BalanceSpec,
    dir: Direction,
    with_replacement: bool,
) -> Result<Option<u32>> {
    if bm.n() != arms.len() || spec.k() != bm.k() {
        return Err(Error::Dimension("basis, arms and tolerances disagree".into()));
    }
    let (sources, targets) = dir.split(arms);
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::EmptyArm(dir.label().into()));
    }
    if sources.len() > ORACLE_LIMIT || targets.len() > ORACLE_LIMIT {
        return Err(Error::TooLarge(format!(
            "{} sources x {} targets exceeds {ORACLE_LIMIT} x {ORACLE_LIMIT}",
            sources.len(),
            targets.len()
        )));
    }
    let t = targets.len();
    let m_max = if with_replacement { t } else { t / sources.len() };
    for m in (1..=m_max as u32).rev() {
        let rows: Vec<u32> = (0u32..(1 << t)).filter(|r| r.count_ones() == m).collect();
        let mut search = OracleSearch {
            bm,
            spec,
            sources: &sources,
            targets: &targets,
            rows: &rows,
            with_replacement,
            chosen: Vec::with_capacity(sources.len()),
            cols: vec![0u8; t],
            visited: HashSet::new(),
        };
        if search.dfs() {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

struct OracleSearch<'a> {
    bm: &'a BasisMatrix,
    spec: &'a BalanceSpec,
    sources: &'a [usize],
    targets: &'a [usize],
    rows: &'a [u32],
    with_replacement: bool,
    chosen: Vec<u32>,
    cols: Vec<u8>,
    visited: HashSet<u64>,
}

impl OracleSearch<'_> {
    fn key(&self) -> u64 {
        let mut k = self.chosen.len() as u64;
        for &c in &self.cols {
            k = (k << 4) | c as u64;
        }
        k
    }

    fn dfs(&mut self) -> bool {
        if self.chosen.len() == self.sources.len() {
            return self.leaf_balanced();
        }
        if !self.visited.insert(self.key()) {
            return false;
        }
        for &row in self.rows {
            if !self.with_replacement && (0..self.targets.len()).any(|j| row >> j & 1 == 1 && self.cols[j] > 0) {
                continue;
            }
            for j in 0..self.targets.len() {
                self.cols[j] += (row >> j & 1) as u8;
            }
            self.chosen.push(row);
            let ok = self.dfs();
            self.chosen.pop();
            for j in 0..self.targets.len() {
                self.cols[j] -= (row >> j & 1) as u8;
            }
            if ok {
                return true;
            }
        }
        false
    }

    fn leaf_balanced(&self) -> bool {
        let k = self.bm.k();
        let mut acc = vec![0.0; k];
        let mut pairs = 0usize;
        for (r, &row) in self.chosen.iter().enumerate() {
            let i = self.sources[r];
            for (jj, &j) in self.targets.iter().enumerate() {
                if row >> jj & 1 == 1 {
                    pairs += 1;
                    for (kk, a) in acc.iter_mut().enumerate() {
                        *a += self.bm.get(i, kk) - self.bm.get(j, kk);
                    }
                }
            }
        }
        let imbalance: Vec<f64> = acc.iter().map(|a| a / pairs as f64).collect();
        within_tolerance(&imbalance, self.spec)
    }
}
