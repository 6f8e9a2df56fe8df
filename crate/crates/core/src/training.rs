//! Optimizers, masked-LM training, and the EWC-regularized objective
//!
//! `L(θ) = L_task(θ) + Σ_i (λ/2) · F_i · (θ_i − θ*_i)²`
//!
//! where `θ*` is the reference (general-task) solution and `F` its
//! diagonal Fisher information.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherVector;
use crate::graph::{Graph, Var};
use crate::model::{batch_loss, BoundParams, ModelParams, TokenSeq};
use crate::tensor::Tensor;
use crate::util::{par_map, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            algorithm: Algorithm::Adam,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self, n_params: usize) -> Box<dyn Optimizer> {
        match self.algorithm {
            Algorithm::Adam => Box::new(Adam::new(self, n_params)),
            Algorithm::Sgd => Box::new(Sgd { lr: self.lr }),
        }
    }
}

pub trait Optimizer: Send {
    fn step(&mut self, params: &mut [f64], grad: &[f64]);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &OptConfig, n_params: usize) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Anchor and per-coordinate weights for the consolidation penalty.
#[derive(Debug, Clone)]
pub struct EwcConfig {
    pub lambda: f64,
    pub ref_params: ModelParams,
    pub fisher: FisherVector,
}

impl EwcConfig {
    pub fn new(lambda: f64, ref_params: ModelParams, fisher: FisherVector) -> Result<Self> {
        let cfg = EwcConfig {
            lambda,
            ref_params,
            fisher,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        if self.fisher.values.len() != self.ref_params.flat_len() {
            return Err(Error::InvalidInput(format!(
                "fisher has {} entries, reference params {}",
                self.fisher.values.len(),
                self.ref_params.flat_len()
            )));
        }
        Ok(())
    }
}

/// Penalty node over bound parameter leaves.
pub fn ewc_penalty_node(graph: &mut Graph, params: &BoundParams, ewc: &EwcConfig) -> Result<Var> {
    ewc.validate()?;
    let vars = params.vars();
    let anchors = ewc.ref_params.tensors();
    if vars.len() != anchors.len() {
        return Err(Error::InvalidInput("parameter layout differs from the EWC anchor".into()));
    }
    let mut offset = 0;
    let mut terms = Vec::with_capacity(vars.len());
    for (&var, (_, anchor)) in vars.iter().zip(anchors) {
        if graph.value(var).shape() != anchor.shape() {
            return Err(Error::InvalidShape(format!(
                "parameter {:?} vs anchor {:?}",
                graph.value(var).shape(),
                anchor.shape()
            )));
        }
        let n = anchor.len();
        let weights = Tensor::new(anchor.shape().to_vec(), ewc.fisher.values[offset..offset + n].to_vec())?;
        offset += n;
        let anchor = graph.constant(anchor.clone());
        let weights = graph.constant(weights);
        let diff = graph.sub(var, anchor)?;
        let sq = graph.mul(diff, diff)?;
        let weighted = graph.mul(sq, weights)?;
        terms.push(graph.sum(weighted));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = graph.add(total, t)?;
    }
    Ok(graph.scale(total, ewc.lambda / 2.0))
}

/// `Σ_i (λ/2) F_i (θ_i − θ*_i)²` and its gradient by automatic
/// differentiation.
pub fn ewc_penalty(params: &ModelParams, ewc: &EwcConfig) -> Result<(f64, Vec<f64>)> {
    if params.flat_len() != ewc.ref_params.flat_len() {
        return Err(Error::InvalidInput(format!(
            "params have {} entries, anchor {}",
            params.flat_len(),
            ewc.ref_params.flat_len()
        )));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, true);
    let pen = ewc_penalty_node(&mut graph, &bound, ewc)?;
    graph.backward(pen)?;
    Ok((graph.value(pen).item()?, bound.flat_grad(&graph)))
}

/// Fisher-weighted squared displacement `Σ_i F_i (θ_i − θ*_i)²`.
pub fn weighted_displacement(params: &[f64], anchor: &[f64], fisher: &[f64]) -> f64 {
    params
        .iter()
        .zip(anchor)
        .zip(fisher)
        .map(|((p, a), f)| f * (p - a) * (p - a))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub ce_loss: f64,
    pub ewc_penalty: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub lambda: Option<f64>,
    pub seed: u64,
    pub dataset_id: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
    pub meta: TraceMeta,
}

impl LossTrace {
    pub fn ce(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.ce_loss)
    }

    pub fn ewc(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.ewc_penalty)
    }

    /// Mean CE over the last `window` iterations.
    pub fn final_ce(&self, window: usize) -> f64 {
        tail_mean(self.ce(), self.records.len(), window)
    }

    pub fn final_ewc(&self, window: usize) -> f64 {
        tail_mean(self.ewc(), self.records.len(), window)
    }

    /// Mean CE over the first `window` iterations.
    pub fn initial_ce(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.records.len().max(1));
        self.ce().take(w).sum::<f64>() / w as f64
    }
}

fn tail_mean(values: impl Iterator<Item = f64>, len: usize, window: usize) -> f64 {
    let w = window.clamp(1, len.max(1));
    values.skip(len.saturating_sub(w)).sum::<f64>() / w as f64
}

/// Train on `dataset` with the plain masked-LM loss.
pub fn train(params: &ModelParams, dataset: &[TokenSeq], opt: &OptConfig) -> Result<(ModelParams, LossTrace)> {
    run_training(params, dataset, opt, None, &mut |_, _| {})
}

/// Train with the EWC penalty added to the masked-LM loss.
pub fn train_ewc(
    params: &ModelParams,
    dataset: &[TokenSeq],
    opt: &OptConfig,
    ewc: &EwcConfig,
) -> Result<(ModelParams, LossTrace)> {
    run_training(params, dataset, opt, Some(ewc), &mut |_, _| {})
}

/// Shared loop. `observe` sees the flat parameters after every step.
pub fn run_training(
    params: &ModelParams,
    dataset: &[TokenSeq],
    opt: &OptConfig,
    ewc: Option<&EwcConfig>,
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Result<(ModelParams, LossTrace)> {
    opt.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    if let Some(e) = ewc {
        e.validate()?;
        if e.ref_params.flat_len() != params.flat_len() {
            return Err(Error::InvalidInput("EWC anchor does not match the trained model".into()));
        }
    }
    let started = Instant::now();
    let mut current = params.clone();
    let mut flat = current.flatten();
    let mut optimizer = opt.optimizer(flat.len());
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut iteration = 0;

    for epoch in 0..opt.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(opt.seed, epoch as u64));
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<&TokenSeq> = chunk.iter().map(|&i| &dataset[i]).collect();
            let mut graph = Graph::new();
            let bound = current.bind(&mut graph, true);
            let ce = batch_loss(&mut graph, &bound, current.config(), &batch)?;
            let (pen, total) = match ewc {
                Some(e) => {
                    let pen = ewc_penalty_node(&mut graph, &bound, e)?;
                    (Some(pen), graph.add(ce, pen)?)
                }
                None => (None, ce),
            };
            graph.backward(total)?;
            let grad = bound.flat_grad(&graph);

            let ce_loss = graph.value(ce).item()?;
            let ewc_penalty = pen.map_or(Ok(0.0), |p| graph.value(p).item())?;
            let total_loss = graph.value(total).item()?;
            if !total_loss.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at iteration {iteration}")));
            }
            records.push(TraceRecord {
                iteration,
                ce_loss,
                ewc_penalty,
                total_loss,
            });

            optimizer.step(&mut flat, &grad);
            current.assign_flat(&flat)?;
            observe(iteration, &flat);
            iteration += 1;
        }
    }

    let trace = LossTrace {
        records,
        meta: TraceMeta {
            lambda: ewc.map(|e| e.lambda),
            seed: opt.seed,
            dataset_id: String::new(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    };
    Ok((current, trace))
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lambda: f64,
    pub trace: LossTrace,
    pub params: ModelParams,
}

/// Independent EWC runs, one per grid value, each from the same initial
/// parameters and seed.
pub fn lambda_sweep(
    params: &ModelParams,
    dataset: &[TokenSeq],
    opt: &OptConfig,
    ref_params: &ModelParams,
    fisher: &FisherVector,
    grid: &[f64],
) -> Result<Vec<SweepRun>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("lambda grid is empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative lambda {l} in grid")));
    }
    par_map(grid, |_, &lambda| {
        let ewc = EwcConfig::new(lambda, ref_params.clone(), fisher.clone())?;
        let (params, trace) = train_ewc(params, dataset, opt, &ewc)?;
        Ok(SweepRun { lambda, trace, params })
    })
    .into_iter()
    .collect()
}

/// Iterations averaged when judging the end of a trace.
pub const CONVERGENCE_WINDOW: usize = 20;

/// A run converges when its CE tail falls below half of the first CE value
/// and both loss components peak before the tail and end below the peak.
pub fn converged(trace: &LossTrace) -> bool {
    let Some(first) = trace.records.first() else {
        return false;
    };
    let window = CONVERGENCE_WINDOW.min(trace.records.len() / 2).max(1);
    let ce: Vec<f64> = trace.ce().collect();
    let ewc: Vec<f64> = trace.ewc().collect();
    let ewc_ok = ewc.iter().all(|&e| e == 0.0) || fell_from_peak(&ewc, window);
    trace.final_ce(window) < 0.5 * first.ce_loss && fell_from_peak(&ce, window) && ewc_ok
}

fn fell_from_peak(values: &[f64], window: usize) -> bool {
    let Some((peak_at, &peak)) = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return false;
    };
    let tail_start = values.len().saturating_sub(window);
    let tail = values[tail_start..].iter().sum::<f64>() / (values.len() - tail_start) as f64;
    peak_at < tail_start && tail < peak
}

/// The largest grid value whose run converges.
pub fn select_lambda(runs: &[SweepRun]) -> Result<f64> {
    runs.iter()
        .filter(|r| converged(&r.trace))
        .map(|r| r.lambda)
        .max_by(f64::total_cmp)
        .ok_or_else(|| Error::Degenerate("no lambda in the sweep grid converged".into()))
}

/// Log-uniform grid from `hi` down to `lo` with `points` values.
pub fn log_grid(hi: f64, lo: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![hi];
    }
    let (a, b) = (hi.log10(), lo.log10());
    (0..points)
        .map(|i| {
            let e = a + (b - a) * i as f64 / (points - 1) as f64;
            let v = 10f64.powf(e);
            // snap to the nearest representable decade value when exact
            let r = 10f64.powi(e.round() as i32);
            if (e - e.round()).abs() < 1e-9 {
                r
            } else {
                v
            }
        })
        .collect()
}

/// Mean and population standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetric {
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

impl std::fmt::Display for AggregateMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}_{:.3}", self.mean, self.std)
    }
}

pub fn aggregate(values: &[f64]) -> Result<AggregateMetric> {
    if values.is_empty() {
        return Err(Error::InvalidInput("aggregate of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    Ok(AggregateMetric {
        mean,
        std,
        n_runs: values.len(),
    })
}
