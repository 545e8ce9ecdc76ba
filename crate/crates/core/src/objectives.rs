//! Offline preference-optimization losses.
//!
//! Every objective is a pure function of the policy log-probabilities
//! `u = log pi_theta(y|x)`, the reference log-probabilities
//! `v = log pi_ref(y|x)` and the response lengths. Losses return their exact
//! partial derivatives with respect to `u_w` and `u_l`; parameter gradients
//! follow by the chain rule through [`TabularPolicy::log_prob_grad`].
//!
//! Hyperparameters consulted per kind (everything else is ignored):
//!
//! | kind        | beta | gamma | lambda | tau | alpha | lambda_w/l | delta |
//! |-------------|------|-------|--------|-----|-------|------------|-------|
//! | `simpo`     |  x   |   x   |        |     |       |            |       |
//! | `dpo`       |  x   |       |        |     |       |            |       |
//! | `ipo`       |      |       |        |  x  |       |            |       |
//! | `cpo`       |  x   |       |   x    |     |       |            |       |
//! | `kto`       |  x   |       |        |     |       |     x      |       |
//! | `orpo`      |      |       |   x    |     |       |            |       |
//! | `rdpo`      |  x   |       |        |     |   x   |            |       |
//! | `rrhf`      |      |       |   x    |     |       |            |       |
//! | `slic_hf`   |      |       |   x    |     |       |            |   x   |
//! | `simpo_sft` |  x   |   x   |   x    |     |       |            |       |
//! | `dpo_ln`    |  x   |       |        |     |       |            |       |
//! | `dpo_gamma` |  x   |   x   |        |     |       |            |       |
//!
//! `orpo_sft_sum` switches ORPO's likelihood term from the length-averaged
//! `-u_w/|y_w|` to the summed `-u_w`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PreferenceTriple;
use crate::error::{Error, Result};
use crate::policy::{GradTable, TabularPolicy};

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Simpo,
    Dpo,
    Ipo,
    Cpo,
    Kto,
    Orpo,
    Rdpo,
    Rrhf,
    SlicHf,
    SimpoSft,
    DpoLn,
    DpoGamma,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 12] = [
        ObjectiveKind::Simpo,
        ObjectiveKind::Dpo,
        ObjectiveKind::Ipo,
        ObjectiveKind::Cpo,
        ObjectiveKind::Kto,
        ObjectiveKind::Orpo,
        ObjectiveKind::Rdpo,
        ObjectiveKind::Rrhf,
        ObjectiveKind::SlicHf,
        ObjectiveKind::SimpoSft,
        ObjectiveKind::DpoLn,
        ObjectiveKind::DpoGamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Simpo => "simpo",
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::Ipo => "ipo",
            ObjectiveKind::Cpo => "cpo",
            ObjectiveKind::Kto => "kto",
            ObjectiveKind::Orpo => "orpo",
            ObjectiveKind::Rdpo => "rdpo",
            ObjectiveKind::Rrhf => "rrhf",
            ObjectiveKind::SlicHf => "slic_hf",
            ObjectiveKind::SimpoSft => "simpo_sft",
            ObjectiveKind::DpoLn => "dpo_ln",
            ObjectiveKind::DpoGamma => "dpo_gamma",
        }
    }

    /// Whether the loss reads `log pi_ref`.
    pub fn uses_reference(self) -> bool {
        matches!(
            self,
            ObjectiveKind::Dpo
                | ObjectiveKind::Ipo
                | ObjectiveKind::Kto
                | ObjectiveKind::Rdpo
                | ObjectiveKind::DpoLn
                | ObjectiveKind::DpoGamma
        )
    }

    /// Loss is exactly `-log sigmoid(arg)` with no extra terms.
    pub fn is_pure_sigmoid(self) -> bool {
        matches!(
            self,
            ObjectiveKind::Simpo
                | ObjectiveKind::Dpo
                | ObjectiveKind::Rdpo
                | ObjectiveKind::DpoLn
                | ObjectiveKind::DpoGamma
        )
    }

    /// Loss contains a `max(0, .)` kink.
    pub fn has_hinge(self) -> bool {
        matches!(self, ObjectiveKind::Rrhf | ObjectiveKind::SlicHf)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown objective kind '{s}'")))
    }
}

/// An objective together with its scalar hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lambda_w: f64,
    pub lambda_l: f64,
    pub delta: f64,
    pub orpo_sft_sum: bool,
}

impl ObjectiveConfig {
    /// Per-kind defaults taken from the tuned values and search ranges
    /// reported for each method.
    pub fn new(kind: ObjectiveKind) -> Self {
        let mut cfg = ObjectiveConfig {
            kind,
            beta: 0.1,
            gamma: 0.0,
            lambda: 1.0,
            tau: 0.1,
            alpha: 0.05,
            lambda_w: 1.0,
            lambda_l: 1.0,
            delta: 1.0,
            orpo_sft_sum: false,
        };
        match kind {
            ObjectiveKind::Simpo | ObjectiveKind::SimpoSft => {
                cfg.beta = 2.0;
                cfg.gamma = 1.6;
            }
            ObjectiveKind::DpoLn => cfg.beta = 2.0,
            ObjectiveKind::DpoGamma => cfg.gamma = 0.5,
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("lambda_w", self.lambda_w),
            ("lambda_l", self.lambda_l),
            ("delta", self.delta),
        ];
        for (name, value) in named {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Sets one hyperparameter by its flag name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let number = || -> Result<f64> {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("'{key}' expects a number, got '{value}'")))
        };
        match key.as_str() {
            "objective" | "kind" => self.kind = value.parse()?,
            "beta" => self.beta = number()?,
            "gamma" => self.gamma = number()?,
            "lambda" => self.lambda = number()?,
            "tau" => self.tau = number()?,
            "alpha" => self.alpha = number()?,
            "lambda_w" => self.lambda_w = number()?,
            "lambda_l" => self.lambda_l = number()?,
            "delta" => self.delta = number()?,
            "orpo_sft_sum" => {
                self.orpo_sft_sum = value.trim().parse::<bool>().map_err(|_| {
                    Error::config(format!("'orpo_sft_sum' expects true/false, got '{value}'"))
                })?
            }
            other => return Err(Error::config(format!("unknown objective key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment). The `objective`
    /// key is required; its defaults are applied before the other keys.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim().replace('-', "_");
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key '{key}'", i + 1)));
            }
        }
        let kind = entries
            .remove("objective")
            .or_else(|| entries.remove("kind"))
            .ok_or_else(|| Error::config("missing 'objective' key"))?;
        let mut cfg = ObjectiveConfig::new(kind.parse()?);
        for (key, value) in &entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything an objective needs about one preference triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriple {
    pub u_w: f64,
    pub u_l: f64,
    pub v_w: f64,
    pub v_l: f64,
    pub len_w: usize,
    pub len_l: usize,
    /// Summed per-context KL to the reference along `y_w` (KTO only).
    pub kl_w: Option<f64>,
}

impl ScoredTriple {
    pub fn reference_free(u_w: f64, u_l: f64, len_w: usize, len_l: usize) -> Self {
        Self {
            u_w,
            u_l,
            v_w: 0.0,
            v_l: 0.0,
            len_w,
            len_l,
            kl_w: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len_w == 0 || self.len_l == 0 {
            return Err(Error::input("response lengths must be >= 1"));
        }
        for (name, x) in [("u_w", self.u_w), ("u_l", self.u_l), ("v_w", self.v_w), ("v_l", self.v_l)] {
            if !x.is_finite() {
                return Err(Error::input(format!("{name} is not finite: {x}")));
            }
        }
        if let Some(kl) = self.kl_w {
            if !(kl.is_finite() && kl >= 0.0) {
                return Err(Error::input(format!("kl_w must be finite and >= 0, got {kl}")));
            }
        }
        Ok(())
    }

    /// Triple with winner and loser exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            u_w: self.u_l,
            u_l: self.u_w,
            v_w: self.v_l,
            v_l: self.v_w,
            len_w: self.len_l,
            len_l: self.len_w,
            kl_w: self.kl_w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub reward_w: f64,
    pub reward_l: f64,
    /// Sigmoid weight multiplying the likelihood-gradient difference, for
    /// kinds built on a Bradley-Terry sigmoid.
    pub grad_weight: Option<f64>,
    pub dl_du_w: f64,
    pub dl_du_l: f64,
}

impl LossReport {
    pub fn margin(&self) -> f64 {
        self.reward_w - self.reward_l
    }
}

/// Length-normalized reward `beta * u / len`.
pub fn simpo_reward(u: f64, len: usize, beta: f64) -> Result<f64> {
    if len == 0 {
        return Err(Error::input("response length must be >= 1"));
    }
    Ok(beta * u / len as f64)
}

/// Reference-relative reward `beta * (u - v)`; the partition term cancels in
/// every pairwise comparison and is never computed.
pub fn dpo_implicit_reward(u: f64, v: f64, beta: f64) -> f64 {
    beta * (u - v)
}

/// The reward an objective implicitly assigns to one response.
///
/// DPO-style kinds use `beta (u - v)` (length-normalized for `dpo_ln`, unscaled
/// for `ipo`); SimPO-style kinds use `beta u / len`; CPO uses `beta u`; ORPO and
/// RRHF use the average log-likelihood; SLiC-HF uses `u`.
pub fn reward(cfg: &ObjectiveConfig, u: f64, v: f64, len: usize) -> f64 {
    let n = len.max(1) as f64;
    match cfg.kind {
        ObjectiveKind::Simpo | ObjectiveKind::SimpoSft => cfg.beta * u / n,
        ObjectiveKind::Dpo | ObjectiveKind::Rdpo | ObjectiveKind::DpoGamma | ObjectiveKind::Kto => {
            cfg.beta * (u - v)
        }
        ObjectiveKind::DpoLn => cfg.beta * (u - v) / n,
        ObjectiveKind::Ipo => u - v,
        ObjectiveKind::Cpo => cfg.beta * u,
        ObjectiveKind::Orpo | ObjectiveKind::Rrhf => u / n,
        ObjectiveKind::SlicHf => u,
    }
}

/// Log-odds of `p = exp(a)` for an average log-likelihood `a < 0`, and its
/// derivative `1 / (1 - p)` with respect to `a`.
fn log_odds(a: f64) -> Result<(f64, f64)> {
    if !(a < 0.0) {
        return Err(Error::Domain(format!(
            "log-odds needs average log-likelihood < 0, got {a}"
        )));
    }
    let one_minus_p = -a.exp_m1();
    Ok((a - one_minus_p.ln(), 1.0 / one_minus_p))
}

/// Argument `z` of the Bradley-Terry sigmoid for sigmoid-based kinds
/// (`-log sigmoid(z)` is their preference term).
pub fn bt_argument(cfg: &ObjectiveConfig, s: &ScoredTriple) -> Result<f64> {
    let (nw, nl) = (s.len_w as f64, s.len_l as f64);
    let b = cfg.beta;
    let dpo = b * (s.u_w - s.v_w) - b * (s.u_l - s.v_l);
    Ok(match cfg.kind {
        ObjectiveKind::Simpo | ObjectiveKind::SimpoSft => b * s.u_w / nw - b * s.u_l / nl - cfg.gamma,
        ObjectiveKind::Dpo => dpo,
        ObjectiveKind::DpoGamma => dpo - cfg.gamma,
        ObjectiveKind::Rdpo => dpo + (cfg.alpha * nw - cfg.alpha * nl),
        ObjectiveKind::DpoLn => (b / nw) * (s.u_w - s.v_w) - (b / nl) * (s.u_l - s.v_l),
        ObjectiveKind::Cpo => b * s.u_w - b * s.u_l,
        ObjectiveKind::Orpo => log_odds(s.u_w / nw)?.0 - log_odds(s.u_l / nl)?.0,
        other => {
            return Err(Error::config(format!(
                "objective '{other}' has no Bradley-Terry sigmoid argument"
            )))
        }
    })
}

/// Per-triple loss with exact partials.
///
/// `z_ref` is required for KTO (see [`kto_zref`]) and ignored otherwise; it
/// is treated as a constant.
pub fn loss(cfg: &ObjectiveConfig, s: &ScoredTriple, z_ref: Option<f64>) -> Result<LossReport> {
    cfg.validate()?;
    s.validate()?;
    let (nw, nl) = (s.len_w as f64, s.len_l as f64);
    let b = cfg.beta;
    let reward_w = reward(cfg, s.u_w, s.v_w, s.len_w);
    let reward_l = reward(cfg, s.u_l, s.v_l, s.len_l);
    let report = |loss: f64, grad_weight: Option<f64>, dl_du_w: f64, dl_du_l: f64| LossReport {
        loss,
        reward_w,
        reward_l,
        grad_weight,
        dl_du_w,
        dl_du_l,
    };

    let out = match cfg.kind {
        ObjectiveKind::Simpo | ObjectiveKind::SimpoSft => {
            let z = bt_argument(cfg, s)?;
            let w = sigmoid(-z);
            let (mut l, mut dw) = (neg_log_sigmoid(z), -w * b / nw);
            if cfg.kind == ObjectiveKind::SimpoSft {
                l -= cfg.lambda * s.u_w;
                dw -= cfg.lambda;
            }
            report(l, Some(w), dw, w * b / nl)
        }
        ObjectiveKind::Dpo | ObjectiveKind::DpoGamma | ObjectiveKind::Rdpo => {
            let z = bt_argument(cfg, s)?;
            let w = sigmoid(-z);
            report(neg_log_sigmoid(z), Some(w), -w * b, w * b)
        }
        ObjectiveKind::DpoLn => {
            let z = bt_argument(cfg, s)?;
            let w = sigmoid(-z);
            report(neg_log_sigmoid(z), Some(w), -w * b / nw, w * b / nl)
        }
        ObjectiveKind::Cpo => {
            let z = bt_argument(cfg, s)?;
            let w = sigmoid(-z);
            report(
                neg_log_sigmoid(z) - cfg.lambda * s.u_w,
                Some(w),
                -w * b - cfg.lambda,
                w * b,
            )
        }
        ObjectiveKind::Ipo => {
            let h = (s.u_w - s.v_w) - (s.u_l - s.v_l) - 1.0 / (2.0 * cfg.tau);
            report(h * h, None, 2.0 * h, -2.0 * h)
        }
        ObjectiveKind::Kto => {
            let z = z_ref.ok_or_else(|| Error::config("kto requires a batch z_ref"))?;
            if !z.is_finite() {
                return Err(Error::input(format!("z_ref is not finite: {z}")));
            }
            let sw = sigmoid(b * (s.u_w - s.v_w) - z);
            let sl = sigmoid(z - b * (s.u_l - s.v_l));
            report(
                -cfg.lambda_w * sw + cfg.lambda_l * sl,
                None,
                -cfg.lambda_w * sw * (1.0 - sw) * b,
                -cfg.lambda_l * sl * (1.0 - sl) * b,
            )
        }
        ObjectiveKind::Orpo => {
            let (aw, al) = (s.u_w / nw, s.u_l / nl);
            let (lo_w, dlo_w) = log_odds(aw)?;
            let (lo_l, dlo_l) = log_odds(al)?;
            let z = lo_w - lo_l;
            let w = sigmoid(-z);
            let (sft, dsft) = if cfg.orpo_sft_sum {
                (-s.u_w, -1.0)
            } else {
                (-aw, -1.0 / nw)
            };
            report(
                sft + cfg.lambda * neg_log_sigmoid(z),
                Some(w),
                dsft - cfg.lambda * w * dlo_w / nw,
                cfg.lambda * w * dlo_l / nl,
            )
        }
        ObjectiveKind::Rrhf => {
            let h = -s.u_w / nw + s.u_l / nl;
            // subgradient 0 at the kink
            let (hinge, dw, dl) = if h > 0.0 { (h, -1.0 / nw, 1.0 / nl) } else { (0.0, 0.0, 0.0) };
            report(hinge - cfg.lambda * s.u_w, None, dw - cfg.lambda, dl)
        }
        ObjectiveKind::SlicHf => {
            let h = cfg.delta - s.u_w + s.u_l;
            let (hinge, dw, dl) = if h > 0.0 { (h, -1.0, 1.0) } else { (0.0, 0.0, 0.0) };
            report(hinge - cfg.lambda * s.u_w, None, dw - cfg.lambda, dl)
        }
    };
    if !out.loss.is_finite() {
        return Err(Error::Domain(format!("{} loss is not finite", cfg.kind)));
    }
    Ok(out)
}

/// Sigmoid gradient weight: `s_theta` for SimPO, `d_theta` for DPO.
pub fn gradient_weight(cfg: &ObjectiveConfig, s: &ScoredTriple) -> Result<f64> {
    let (nw, nl) = (s.len_w as f64, s.len_l as f64);
    let b = cfg.beta;
    match cfg.kind {
        ObjectiveKind::Simpo => Ok(sigmoid(b / nl * s.u_l - b / nw * s.u_w + cfg.gamma)),
        ObjectiveKind::Dpo => Ok(sigmoid(b * (s.u_l - s.v_l) - b * (s.u_w - s.v_w))),
        other => Err(Error::config(format!(
            "gradient weight is defined for simpo and dpo only, not '{other}'"
        ))),
    }
}

/// `z_ref = mean(beta * kl_w)` over a batch, clamped at 0 and used as a
/// constant by [`loss`].
pub fn kto_zref(batch: &[ScoredTriple], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("z_ref needs a non-empty batch"));
    }
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let kl = s
            .kl_w
            .ok_or_else(|| Error::input(format!("triple {i} carries no kl_w")))?;
        if !(kl.is_finite() && kl >= 0.0) {
            return Err(Error::input(format!("triple {i}: kl_w must be >= 0, got {kl}")));
        }
        total += beta * kl;
    }
    Ok((total / batch.len() as f64).max(0.0))
}

/// Instance-wise margin `beta (v_w - v_l)` that DPO receives from the
/// reference model.
pub fn dpo_implicit_margin(s: &ScoredTriple, beta: f64) -> f64 {
    beta * (s.v_w - s.v_l)
}

/// DPO loss written as a reference-free sigmoid loss with margin
/// [`dpo_implicit_margin`].
pub fn dpo_margin_form_loss(s: &ScoredTriple, beta: f64) -> f64 {
    neg_log_sigmoid(beta * s.u_w - beta * s.u_l - dpo_implicit_margin(s, beta))
}

/// Checked mode: recomputes DPO both ways and fails if they disagree by more
/// than `tol`.
pub fn check_implicit_margin(s: &ScoredTriple, beta: f64, tol: f64) -> Result<f64> {
    let mut cfg = ObjectiveConfig::new(ObjectiveKind::Dpo);
    cfg.beta = beta;
    let direct = loss(&cfg, s, None)?.loss;
    let margin = dpo_margin_form_loss(s, beta);
    let gap = (direct - margin).abs();
    if gap > tol {
        return Err(Error::Domain(format!(
            "implicit-margin identity violated: {direct} vs {margin} (gap {gap:e})"
        )));
    }
    Ok(gap)
}

/// Log-probabilities and per-sequence gradients of one triple.
#[derive(Debug, Clone)]
pub struct TripleEval {
    pub scored: ScoredTriple,
    pub grad_w: GradTable,
    pub grad_l: GradTable,
}

/// Scores a triple under the policy (with gradients) and, when the objective
/// needs it, under the reference. KL along `y_w` is attached for KTO.
pub fn evaluate_triple(
    kind: ObjectiveKind,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    triple: &PreferenceTriple,
) -> Result<TripleEval> {
    let mut grad_w = GradTable::zeros_for(policy);
    let mut grad_l = GradTable::zeros_for(policy);
    let u_w = policy.accumulate_log_prob_grad(&triple.prompt, &triple.chosen, 1.0, &mut grad_w)?;
    let u_l = policy.accumulate_log_prob_grad(&triple.prompt, &triple.rejected, 1.0, &mut grad_l)?;
    let mut scored = ScoredTriple::reference_free(u_w, u_l, triple.chosen.len(), triple.rejected.len());
    if kind.uses_reference() {
        let reference = reference
            .ok_or_else(|| Error::config(format!("objective '{kind}' requires a reference policy")))?;
        policy.check_compatible(reference)?;
        scored.v_w = reference.seq_log_prob(&triple.prompt, &triple.chosen)?;
        scored.v_l = reference.seq_log_prob(&triple.prompt, &triple.rejected)?;
        if kind == ObjectiveKind::Kto {
            scored.kl_w = Some(policy.seq_kl(reference, &triple.prompt, &triple.chosen)?);
        }
    }
    Ok(TripleEval { scored, grad_w, grad_l })
}

/// `dL/du_w * grad u_w + dL/du_l * grad u_l`.
pub fn combine_gradient(report: &LossReport, eval: &TripleEval) -> GradTable {
    let mut grad = eval.grad_w.clone();
    grad.scale(report.dl_du_w);
    grad.add_scaled(&eval.grad_l, report.dl_du_l);
    grad
}

/// Loss and parameter gradient of one triple. The reference only supplies
/// constants.
pub fn loss_grad(
    cfg: &ObjectiveConfig,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    triple: &PreferenceTriple,
    z_ref: Option<f64>,
) -> Result<(LossReport, GradTable)> {
    if let Some(r) = reference {
        policy.check_compatible(r)?;
    }
    let eval = evaluate_triple(cfg.kind, policy, reference, triple)?;
    let report = loss(cfg, &eval.scored, z_ref)?;
    let grad = combine_gradient(&report, &eval);
    Ok((report, grad))
}
