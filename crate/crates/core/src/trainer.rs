//! Deterministic minibatch training with Adam and a warmup + cosine schedule.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceTriple;
use crate::error::{Error, Result};
use crate::objectives::{self, ObjectiveConfig, ObjectiveKind, TripleEval};
use crate::policy::{GradTable, TabularPolicy};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::config(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm cap on the batch gradient.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 128,
            epochs: 1,
            warmup_frac: 0.10,
            schedule: Schedule::Cosine,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config(format!("warmup_frac must be in [0, 1), got {}", self.warmup_frac)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// `ceil(n / batch_size) * epochs`.
    pub fn total_steps(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size) * self.epochs
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_frac * total_steps as f64).floor() as usize
    }
}

/// Learning rate at a 0-based step: linear ramp from 0 over the warmup steps,
/// then half-cosine decay reaching 0 at the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::input("total_steps must be >= 1"));
    }
    if step >= total_steps {
        return Err(Error::input(format!("step {step} outside 0..{total_steps}")));
    }
    if cfg.schedule == Schedule::Constant {
        return Ok(cfg.lr);
    }
    let warmup = cfg.warmup_steps(total_steps);
    if step < warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    let decay_span = total_steps - 1 - warmup;
    if decay_span == 0 {
        return Ok(cfg.lr);
    }
    let progress = (step - warmup) as f64 / decay_span as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with bias correction; parameters are updated in index order.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean sigmoid gradient weight; absent for kinds without one.
    pub grad_weight: Option<f64>,
    pub margin: f64,
}

/// Number of sequence-scoring calls made against each model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub policy_passes: u64,
    pub reference_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub passes: PassCounts,
}

impl TrainTrace {
    pub fn forward_pass_counter(&self) -> PassCounts {
        self.passes
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,grad_weight,margin\n");
        for r in &self.records {
            let gw = r.grad_weight.map(|g| g.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.lr, r.loss, gw, r.margin);
        }
        out
    }
}

/// Rejects a reference for reference-free objectives and requires one for
/// the others.
pub fn check_reference(kind: ObjectiveKind, reference: Option<&TabularPolicy>) -> Result<()> {
    match (kind.uses_reference(), reference.is_some()) {
        (true, false) => Err(Error::config(format!("objective '{kind}' requires a reference policy"))),
        (false, true) => Err(Error::config(format!(
            "objective '{kind}' is reference-free; do not supply a reference policy"
        ))),
        _ => Ok(()),
    }
}

struct BatchResult {
    loss: f64,
    grad_weight: Option<f64>,
    margin: f64,
    grad: GradTable,
}

fn evaluate_batch(
    obj: &ObjectiveConfig,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    batch: &[&PreferenceTriple],
    passes: &mut PassCounts,
) -> Result<BatchResult> {
    let evals: Vec<TripleEval> = batch
        .par_iter()
        .map(|t| objectives::evaluate_triple(obj.kind, policy, reference, t))
        .collect::<Result<_>>()?;
    passes.policy_passes += 2 * batch.len() as u64;
    if obj.kind.uses_reference() {
        passes.reference_passes += 2 * batch.len() as u64;
    }
    let z_ref = if obj.kind == ObjectiveKind::Kto {
        let scored: Vec<_> = evals.iter().map(|e| e.scored).collect();
        Some(objectives::kto_zref(&scored, obj.beta)?)
    } else {
        None
    };
    let n = batch.len() as f64;
    let mut grad = GradTable::zeros_for(policy);
    let (mut loss, mut margin, mut gw_sum, mut gw_count) = (0.0, 0.0, 0.0, 0usize);
    // reduction in example order keeps runs bitwise reproducible
    for e in &evals {
        let report = objectives::loss(obj, &e.scored, z_ref)?;
        loss += report.loss;
        margin += report.margin();
        if let Some(w) = report.grad_weight {
            gw_sum += w;
            gw_count += 1;
        }
        grad.add_scaled(&objectives::combine_gradient(&report, e), 1.0 / n);
    }
    Ok(BatchResult {
        loss: loss / n,
        grad_weight: (gw_count > 0).then(|| gw_sum / gw_count as f64),
        margin: margin / n,
        grad,
    })
}

/// Mean loss over a dataset (KTO's `z_ref` taken over the whole set).
pub fn evaluate_loss(
    obj: &ObjectiveConfig,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    data: &[PreferenceTriple],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let batch: Vec<&PreferenceTriple> = data.iter().collect();
    Ok(evaluate_batch(obj, policy, reference, &batch, &mut PassCounts::default())?.loss)
}

/// Shuffled minibatch training. The reference is never modified.
pub fn train(
    init: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    data: &[PreferenceTriple],
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<(TabularPolicy, TrainTrace)> {
    obj.validate()?;
    cfg.validate()?;
    check_reference(obj.kind, reference)?;
    if let Some(r) = reference {
        init.check_compatible(r)?;
    }
    if data.is_empty() {
        return Err(Error::input("training data is empty"));
    }
    for (i, t) in data.iter().enumerate() {
        t.validate(init.vocab())
            .map_err(|e| Error::input(format!("example {i}: {e}")))?;
    }

    let mut policy = init.clone();
    let mut adam = Adam::new(policy.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let total = cfg.total_steps(data.len());
    let mut trace = TrainTrace {
        records: Vec::with_capacity(total),
        passes: PassCounts::default(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreferenceTriple> = chunk.iter().map(|&i| &data[i]).collect();
            let mut result = evaluate_batch(obj, &policy, reference, &batch, &mut trace.passes)?;
            if !result.loss.is_finite() || !result.grad.all_finite() {
                return Err(Error::Numerical {
                    step,
                    message: format!("non-finite loss {} or gradient", result.loss),
                });
            }
            if let Some(cap) = cfg.grad_clip {
                let norm = result.grad.l2_norm();
                if norm > cap {
                    result.grad.scale(cap / norm);
                }
            }
            let lr = lr_at(step, total, cfg)?;
            adam.step(policy.logits_mut(), result.grad.values(), lr);
            trace.records.push(StepRecord {
                step,
                lr,
                loss: result.loss,
                grad_weight: result.grad_weight,
                margin: result.margin,
            });
            step += 1;
        }
    }
    Ok((policy, trace))
}
