//! Parameter vectors and the two training drivers: full-batch L-BFGS ascent
//! with an Armijo line search, and Adadelta on minibatches.

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    /// Variational mean `m`.
    Mean,
    /// Lower triangle of `L`, diagonal on log scale.
    Chol,
    /// Inducing inputs `Z`.
    Inducing,
    /// Log kernel hyperparameters.
    Kernel,
    /// Log noise variance.
    Noise,
}

/// Flat unconstrained parameters with a block layout and freeze flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<(Block, Range<usize>)>,
    frozen: Vec<Block>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block; a block name may appear once.
    pub fn push_block(&mut self, block: Block, values: &[f64]) {
        assert!(self.range(block).is_none(), "block {block:?} already present");
        let start = self.values.len();
        self.values.extend_from_slice(values);
        self.layout.push((block, start..self.values.len()));
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.values.len());
        self.values.copy_from_slice(values);
    }

    pub fn range(&self, block: Block) -> Option<Range<usize>> {
        self.layout.iter().find(|(b, _)| *b == block).map(|(_, r)| r.clone())
    }

    pub fn block(&self, block: Block) -> &[f64] {
        self.range(block).map_or(&[], |r| &self.values[r])
    }

    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        self.layout.iter().map(|(b, _)| *b)
    }

    pub fn set_frozen(&mut self, block: Block, frozen: bool) {
        self.frozen.retain(|b| *b != block);
        if frozen {
            self.frozen.push(block);
        }
    }

    pub fn is_frozen(&self, block: Block) -> bool {
        self.frozen.contains(&block)
    }

    /// Zeroes the entries of frozen blocks.
    pub fn mask(&self, grad: &mut [f64]) {
        for (b, r) in &self.layout {
            if self.frozen.contains(b) {
                grad[r.clone()].fill(0.0);
            }
        }
    }
}

/// Value and gradient of the quantity being maximized.
pub trait Objective {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)>;

    /// Optional held-out `(nlp, error)` at the current parameters.
    fn holdout(&mut self, _params: &ParamVector) -> Option<(f64, f64)> {
        None
    }
}

/// An objective that can be evaluated on a subset of the data, scaled to the full set.
pub trait StochasticObjective {
    fn num_data(&self) -> usize;

    fn evaluate_batch(&mut self, params: &ParamVector, batch: &[usize]) -> Result<(f64, Vec<f64>)>;

    fn holdout(&mut self, _params: &ParamVector) -> Option<(f64, f64)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lbfgs,
    Adadelta,
}

/// Two-phase training plan. Phase 1 holds the kernel and noise fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub optimizer: OptimizerKind,
    pub step_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Trace cadence in iterations.
    pub trace_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            phase1_iters: 50,
            phase2_iters: 200,
            optimizer: OptimizerKind::Lbfgs,
            step_rate: 0.1,
            batch_size: 10,
            seed: 0,
            trace_every: 10,
        }
    }
}

/// Time source for traces. `Logical` counts objective evaluations, which
/// makes traces reproducible byte for byte.
#[derive(Debug, Clone)]
pub enum Clock {
    Wall(Instant),
    Logical(u64),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn logical() -> Self {
        Clock::Logical(0)
    }

    fn tick(&mut self) {
        if let Clock::Logical(n) = self {
            *n += 1;
        }
    }

    pub fn seconds(&self) -> f64 {
        match self {
            Clock::Wall(start) => start.elapsed().as_secs_f64(),
            Clock::Logical(n) => *n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub wall_clock_seconds: f64,
    pub iteration: usize,
    pub elbo_or_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_nlp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_error: Option<f64>,
}

/// One JSON object per line.
pub fn write_trace(records: &[TraceRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    RelativeImprovement,
    IterationLimit,
    LineSearchFailed,
    NonFiniteObjective,
    Completed,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub params: ParamVector,
    pub value: f64,
    pub trace: Vec<TraceRecord>,
    pub stop: StopReason,
    pub iterations: usize,
    pub evaluations: usize,
    /// Minibatches dropped because the objective was not finite.
    pub skipped_batches: usize,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const RELATIVE_TOLERANCE: f64 = 1e-9;
/// Relative improvement is measured over this many accepted steps.
pub const RELATIVE_WINDOW: usize = 10;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const LBFGS_MEMORY: usize = 30;
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

struct Tracer<'a> {
    clock: &'a mut Clock,
    every: usize,
    records: Vec<TraceRecord>,
    offset: usize,
}

impl Tracer<'_> {
    fn push(&mut self, iteration: usize, value: f64, holdout: Option<(f64, f64)>) {
        let rec = TraceRecord {
            wall_clock_seconds: self.clock.seconds(),
            iteration: self.offset + iteration,
            elbo_or_bound: value,
            holdout_nlp: holdout.map(|h| h.0),
            holdout_error: holdout.map(|h| h.1),
        };
        if self.records.last().is_some_and(|r| r.iteration == rec.iteration) {
            self.records.pop();
        }
        self.records.push(rec);
    }

    fn due(&self, iteration: usize) -> bool {
        iteration.is_multiple_of(self.every.max(1))
    }
}

fn finite_eval(
    objective: &mut dyn Objective,
    params: &ParamVector,
    clock: &mut Clock,
    evaluations: &mut usize,
) -> Option<(f64, Vec<f64>)> {
    clock.tick();
    *evaluations += 1;
    match objective.evaluate(params) {
        Ok((f, mut g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
            params.mask(&mut g);
            Some((f, g))
        }
        _ => None,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// L-BFGS ascent direction from the stored pairs (`y` is the change of the
/// negated gradient).
fn lbfgs_direction(grad: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push((a, rho));
    }
    if let Some((s, y)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), (a, rho)) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

/// One phase of full-batch ascent with the current freeze flags.
fn lbfgs_phase(
    objective: &mut dyn Objective,
    mut params: ParamVector,
    max_iters: usize,
    tracer: &mut Tracer,
    evaluations: &mut usize,
) -> Result<(ParamVector, f64, StopReason, usize)> {
    let Some((mut f, mut g)) = finite_eval(objective, &params, tracer.clock, evaluations) else {
        return Err(Error::NonFinite("objective at the initial parameters".into()));
    };
    let holdout = objective.holdout(&params);
    tracer.push(0, f, holdout);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut history = VecDeque::from([f]);
    let mut stop = StopReason::IterationLimit;
    let mut iter = 0;
    while iter < max_iters {
        if inf_norm(&g) < GRADIENT_TOLERANCE {
            stop = StopReason::GradientTolerance;
            break;
        }
        let mut dir = lbfgs_direction(&g, &pairs);
        params.mask(&mut dir);
        let mut slope = dot(&g, &dir);
        if !(slope > 0.0) {
            pairs.clear();
            dir = g.clone();
            slope = dot(&g, &g);
        }
        let mut step = if pairs.is_empty() { (1.0 / inf_norm(&dir)).min(1.0) } else { 1.0 };
        let x0 = params.values().to_vec();
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x0.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            let mut candidate = params.clone();
            candidate.set_values(&trial);
            if let Some((f_new, g_new)) = finite_eval(objective, &candidate, tracer.clock, evaluations) {
                if f_new >= f + ARMIJO_C * step * slope {
                    accepted = Some((candidate, f_new, g_new));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((candidate, f_new, g_new)) = accepted else {
            if pairs.is_empty() {
                stop = StopReason::LineSearchFailed;
                break;
            }
            // stale curvature; retry along the gradient
            pairs.clear();
            continue;
        };
        let s: Vec<f64> = candidate.values().iter().zip(&x0).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == LBFGS_MEMORY {
                pairs.pop_front();
            }
            pairs.push_back((s, y));
        }
        params = candidate;
        f = f_new;
        g = g_new;
        iter += 1;
        if tracer.due(iter) {
            let holdout = objective.holdout(&params);
            tracer.push(iter, f, holdout);
        }
        history.push_back(f);
        if history.len() > RELATIVE_WINDOW + 1 {
            history.pop_front();
        }
        let gain = f - history[0];
        if history.len() == RELATIVE_WINDOW + 1 && gain <= RELATIVE_TOLERANCE * f.abs() {
            stop = StopReason::RelativeImprovement;
            break;
        }
    }
    if !tracer.due(iter) || iter == 0 {
        let holdout = objective.holdout(&params);
        tracer.push(iter, f, holdout);
    }
    Ok((params, f, stop, iter))
}

fn phases(schedule: &TrainSchedule) -> [(usize, bool); 2] {
    [(schedule.phase1_iters, true), (schedule.phase2_iters, false)]
}

/// Phase 1 freezes the hyperparameters on top of whatever the caller froze.
fn apply_phase(params: &mut ParamVector, phase1: bool, user: (bool, bool)) {
    params.set_frozen(Block::Kernel, phase1 || user.0);
    params.set_frozen(Block::Noise, phase1 || user.1);
}

/// Full-batch ascent over both phases of `schedule`.
pub fn full_batch_optimize(
    objective: &mut dyn Objective,
    init: ParamVector,
    schedule: &TrainSchedule,
    clock: &mut Clock,
) -> Result<OptimizeResult> {
    let mut tracer = Tracer {
        clock,
        every: schedule.trace_every,
        records: Vec::new(),
        offset: 0,
    };
    let mut params = init;
    let mut evaluations = 0;
    let mut value = f64::NAN;
    let mut stop = StopReason::Completed;
    let mut total = 0;
    let user_frozen = (params.is_frozen(Block::Kernel), params.is_frozen(Block::Noise));
    for (iters, freeze) in phases(schedule) {
        if iters == 0 {
            continue;
        }
        apply_phase(&mut params, freeze, user_frozen);
        tracer.offset = total;
        let (p, f, s, it) = lbfgs_phase(objective, params, iters, &mut tracer, &mut evaluations)?;
        params = p;
        value = f;
        stop = s;
        total += it;
    }
    apply_phase(&mut params, false, user_frozen);
    if value.is_nan() {
        // nothing scheduled; report the starting point
        if let Some((f, _)) = finite_eval(objective, &params, tracer.clock, &mut evaluations) {
            value = f;
        }
        let holdout = objective.holdout(&params);
        tracer.push(0, value, holdout);
    }
    Ok(OptimizeResult {
        params,
        value,
        trace: tracer.records,
        stop,
        iterations: total,
        evaluations,
        skipped_batches: 0,
    })
}

/// Seeded epoch-wise shuffles cut into batches; the last batch of an
/// epoch may be short.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl MinibatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::InvalidConfig(format!("batch size {batch_size} for {n} points")));
        }
        Ok(Self {
            batch_size,
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        })
    }

    /// Completed passes over the data.
    pub fn epochs_started(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for MinibatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

pub fn minibatch_sampler(n: usize, batch_size: usize, seed: u64) -> Result<MinibatchSampler> {
    MinibatchSampler::new(n, batch_size, seed)
}

pub const ADADELTA_DECAY: f64 = 0.95;
pub const ADADELTA_EPSILON: f64 = 1e-6;

/// Adadelta state. The accumulators track the unscaled update; `step_rate`
/// multiplies what is applied.
#[derive(Debug, Clone)]
pub struct Adadelta {
    pub step_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    grad_sq: Vec<f64>,
    step_sq: Vec<f64>,
}

impl Adadelta {
    pub fn new(dim: usize, step_rate: f64) -> Self {
        Self {
            step_rate,
            decay: ADADELTA_DECAY,
            epsilon: ADADELTA_EPSILON,
            grad_sq: vec![0.0; dim],
            step_sq: vec![0.0; dim],
        }
    }

    /// Ascent step in place.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        let (rho, eps) = (self.decay, self.epsilon);
        for i in 0..x.len() {
            self.grad_sq[i] = rho * self.grad_sq[i] + (1.0 - rho) * grad[i] * grad[i];
            let delta = ((self.step_sq[i] + eps) / (self.grad_sq[i] + eps)).sqrt() * grad[i];
            self.step_sq[i] = rho * self.step_sq[i] + (1.0 - rho) * delta * delta;
            x[i] += self.step_rate * delta;
        }
    }
}

/// Minibatch Adadelta over both phases of `schedule`; one iteration is one batch.
pub fn adadelta_optimize(
    objective: &mut dyn StochasticObjective,
    init: ParamVector,
    schedule: &TrainSchedule,
    clock: &mut Clock,
) -> Result<OptimizeResult> {
    if !(schedule.step_rate > 0.0 && schedule.step_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!("step rate {}", schedule.step_rate)));
    }
    let mut sampler = MinibatchSampler::new(objective.num_data(), schedule.batch_size, schedule.seed)?;
    let mut tracer = Tracer {
        clock,
        every: schedule.trace_every,
        records: Vec::new(),
        offset: 0,
    };
    let mut params = init;
    let user_frozen = (params.is_frozen(Block::Kernel), params.is_frozen(Block::Noise));
    let mut opt = Adadelta::new(params.len(), schedule.step_rate);
    let mut evaluations = 0;
    let mut skipped = 0;
    let mut consecutive = 0;
    let mut last_value = f64::NAN;
    let mut iter = 0;
    let mut stop = StopReason::Completed;
    let mut x = params.values().to_vec();
    'phases: for (iters, freeze) in phases(schedule) {
        apply_phase(&mut params, freeze, user_frozen);
        for _ in 0..iters {
            let batch = sampler.next().expect("sampler is endless");
            tracer.clock.tick();
            evaluations += 1;
            let eval = objective.evaluate_batch(&params, &batch);
            let (f, mut g) = match eval {
                Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
                _ => {
                    skipped += 1;
                    consecutive += 1;
                    if consecutive >= MAX_CONSECUTIVE_SKIPS {
                        stop = StopReason::NonFiniteObjective;
                        break 'phases;
                    }
                    continue;
                }
            };
            consecutive = 0;
            if iter == 0 {
                let holdout = objective.holdout(&params);
                tracer.push(0, f, holdout);
            }
            params.mask(&mut g);
            opt.step(&mut x, &g);
            params.set_values(&x);
            last_value = f;
            iter += 1;
            if tracer.due(iter) {
                let holdout = objective.holdout(&params);
                tracer.push(iter, f, holdout);
            }
        }
    }
    if !tracer.due(iter) {
        let holdout = objective.holdout(&params);
        tracer.push(iter, last_value, holdout);
    }
    apply_phase(&mut params, false, user_frozen);
    Ok(OptimizeResult {
        params,
        value: last_value,
        trace: tracer.records,
        stop,
        iterations: iter,
        evaluations,
        skipped_batches: skipped,
    })
}
