//! Order-k tabular autoregressive policy.
//!
//! The next-token distribution is `softmax(logits[context])`, where the
//! context is the last `k` tokens of `BOS^k ++ prompt ++ response_prefix`.
//! Because the table is the whole parameter vector, sequence log-probabilities
//! have exact closed-form gradients and short sequences can be enumerated.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Largest table (rows x columns) a policy may allocate.
const MAX_PARAMS: usize = 1 << 24;

/// Budget for exhaustive enumeration in [`TabularPolicy::enumerate_mass`].
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Finite vocabulary. Ordinary tokens are `0..size`; the begin marker sits at
/// `size` and can only appear as context padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos_id: Option<Token>,
}

impl Vocab {
    pub fn new(size: usize, eos_id: Option<Token>) -> Result<Self> {
        if size < 2 {
            return Err(Error::input(format!("vocab size must be >= 2, got {size}")));
        }
        if size >= Token::MAX as usize {
            return Err(Error::input(format!("vocab size {size} too large")));
        }
        if let Some(eos) = eos_id {
            if eos as usize >= size {
                return Err(Error::input(format!(
                    "eos id {eos} outside ordinary range 0..{size}"
                )));
            }
        }
        Ok(Self { size, eos_id })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos_id(&self) -> Token {
        self.size as Token
    }

    pub fn eos_id(&self) -> Option<Token> {
        self.eos_id
    }

    pub fn check_token(&self, token: Token) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::input(format!(
                "token {token} outside vocabulary 0..{}",
                self.size
            )))
        }
    }
}

/// Log-softmax of one logit row, computed with max subtraction.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&z| z - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Exact `KL(softmax(p_logits) || softmax(q_logits))`.
pub fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    debug_assert_eq!(p_logits.len(), q_logits.len());
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    // rounding can leave a -1e-17 residue for identical rows
    kl.max(0.0)
}

/// Gradient of a scalar with respect to every logit of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    order: usize,
    vocab_size: usize,
    values: Vec<f64>,
}

impl GradTable {
    pub fn zeros_for(policy: &TabularPolicy) -> Self {
        Self {
            order: policy.order,
            vocab_size: policy.vocab.size,
            values: vec![0.0; policy.logits.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        &self.values[ctx * self.vocab_size..(ctx + 1) * self.vocab_size]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn matches(&self, policy: &TabularPolicy) -> bool {
        self.order == policy.order
            && self.vocab_size == policy.vocab.size
            && self.values.len() == policy.logits.len()
    }

    /// `self += scale * other`, entry by entry in index order.
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        assert_eq!(self.values.len(), other.values.len(), "gradient shape mismatch");
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    order: usize,
    vocab_size: usize,
    bos_id: Token,
    eos_id: Option<Token>,
    logits: Vec<f64>,
}

/// Dense logit table indexed by `(context, next token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    order: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    fn shape(vocab: &Vocab, order: usize) -> Result<(usize, usize)> {
        if order == 0 {
            return Err(Error::input("policy order must be >= 1"));
        }
        let base = vocab.size + 1;
        let rows = u32::try_from(order)
            .ok()
            .and_then(|k| base.checked_pow(k))
            .filter(|rows| rows.saturating_mul(vocab.size) <= MAX_PARAMS)
            .ok_or_else(|| {
                Error::input(format!(
                    "table for vocab {} and order {order} exceeds {MAX_PARAMS} parameters",
                    vocab.size
                ))
            })?;
        Ok((rows, vocab.size))
    }

    /// All-zero logits, i.e. uniform next-token distributions.
    pub fn uniform(vocab: Vocab, order: usize) -> Result<Self> {
        let (rows, cols) = Self::shape(&vocab, order)?;
        Ok(Self {
            vocab,
            order,
            logits: vec![0.0; rows * cols],
        })
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, order: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::input(format!("init scale must be finite and >= 0, got {scale}")));
        }
        let mut policy = Self::uniform(vocab, order)?;
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).expect("validated scale");
            for z in policy.logits.iter_mut() {
                *z = normal.sample(rng);
            }
        }
        Ok(policy)
    }

    pub fn from_logits(vocab: Vocab, order: usize, logits: Vec<f64>) -> Result<Self> {
        let (rows, cols) = Self::shape(&vocab, order)?;
        if logits.len() != rows * cols {
            return Err(Error::input(format!(
                "expected {} logits, got {}",
                rows * cols,
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::input(format!("logit {i} is not finite")));
        }
        Ok(Self { vocab, order, logits })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab.size
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        let v = self.vocab.size;
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    pub fn row_mut(&mut self, ctx: usize) -> &mut [f64] {
        let v = self.vocab.size;
        &mut self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Row index of a context window of exactly `order` tokens (BOS allowed).
    pub fn context_index(&self, window: &[Token]) -> usize {
        debug_assert_eq!(window.len(), self.order);
        let base = self.vocab.size + 1;
        window
            .iter()
            .fold(0usize, |acc, &t| acc * base + t as usize)
    }

    /// Row index of the context that follows `history`, which must already
    /// include the BOS padding (see [`TabularPolicy::padded_history`]).
    pub fn next_context(&self, history: &[Token]) -> usize {
        self.context_index(&history[history.len() - self.order..])
    }

    /// `BOS^k ++ prompt`, validating prompt tokens.
    pub fn padded_history(&self, prompt: &[Token]) -> Result<Vec<Token>> {
        let mut history = vec![self.vocab.bos_id(); self.order];
        for &t in prompt {
            self.vocab.check_token(t)?;
            history.push(t);
        }
        Ok(history)
    }

    /// Teacher-forced `(context row, emitted token)` pairs of a response.
    pub fn visits(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<(usize, Token)>> {
        if response.is_empty() {
            return Err(Error::input("response must be non-empty"));
        }
        let mut history = self.padded_history(prompt)?;
        let mut out = Vec::with_capacity(response.len());
        for &t in response {
            self.vocab.check_token(t)?;
            out.push((self.next_context(&history), t));
            history.push(t);
        }
        Ok(out)
    }

    /// `log pi(y | x)`: sum of per-position log-softmax terms.
    pub fn seq_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        let visits = self.visits(prompt, response)?;
        Ok(visits
            .iter()
            .map(|&(ctx, t)| log_softmax(self.row(ctx))[t as usize])
            .sum())
    }

    /// Length-normalized log-likelihood `log pi(y | x) / |y|`.
    pub fn avg_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        Ok(self.seq_log_prob(prompt, response)? / response.len() as f64)
    }

    /// `grad log pi(y | x)` with respect to the logit table.
    pub fn log_prob_grad(&self, prompt: &[Token], response: &[Token]) -> Result<GradTable> {
        let mut grad = GradTable::zeros_for(self);
        self.accumulate_log_prob_grad(prompt, response, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * grad log pi(y | x)` into `grad` and returns `log pi(y | x)`.
    ///
    /// Each visited row `c` with emitted token `t` receives
    /// `scale * (onehot(t) - softmax(logits[c]))`.
    pub fn accumulate_log_prob_grad(
        &self,
        prompt: &[Token],
        response: &[Token],
        scale: f64,
        grad: &mut GradTable,
    ) -> Result<f64> {
        if !grad.matches(self) {
            return Err(Error::config("gradient table does not match policy shape"));
        }
        let v = self.vocab.size;
        let mut total = 0.0;
        for (ctx, t) in self.visits(prompt, response)? {
            let logp = log_softmax(self.row(ctx));
            total += logp[t as usize];
            let out = &mut grad.values[ctx * v..(ctx + 1) * v];
            for (j, (g, lp)) in out.iter_mut().zip(&logp).enumerate() {
                let onehot = if j == t as usize { 1.0 } else { 0.0 };
                *g += scale * (onehot - lp.exp());
            }
        }
        Ok(total)
    }

    /// Next-token distribution at a context row.
    pub fn next_token_probs(&self, ctx: usize) -> Vec<f64> {
        softmax(self.row(ctx))
    }

    /// Ancestral sampling; stops after emitting EOS (if the vocabulary has
    /// one) or after `max_len` tokens.
    pub fn sample(&self, prompt: &[Token], max_len: usize, seed: u64) -> Result<Vec<Token>> {
        let mut rng = crate::seed::rng_for(seed, "sample", 0);
        self.sample_with(prompt, max_len, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        prompt: &[Token],
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<Token>> {
        if max_len == 0 {
            return Err(Error::input("max_len must be >= 1"));
        }
        let mut history = self.padded_history(prompt)?;
        let mut out = Vec::new();
        while out.len() < max_len {
            let probs = self.next_token_probs(self.next_context(&history));
            let t = draw_categorical(&probs, rng.random::<f64>());
            out.push(t);
            history.push(t);
            if Some(t) == self.vocab.eos_id {
                break;
            }
        }
        Ok(out)
    }

    /// Sum of `exp(seq_log_prob)` over every response in `V^len`.
    pub fn enumerate_mass(&self, prompt: &[Token], len: usize) -> Result<f64> {
        if len == 0 {
            return Err(Error::input("enumeration length must be >= 1"));
        }
        let v = self.vocab.size as u64;
        let count = u32::try_from(len)
            .ok()
            .and_then(|l| v.checked_pow(l))
            .filter(|&c| c <= ENUMERATION_LIMIT)
            .ok_or_else(|| {
                Error::Refused(format!(
                    "{v}^{len} sequences exceeds enumeration limit {ENUMERATION_LIMIT}"
                ))
            })?;
        let mut seq = vec![0 as Token; len];
        let mut mass = 0.0;
        for _ in 0..count {
            mass += self.seq_log_prob(prompt, &seq)?.exp();
            // odometer increment, last position fastest
            for pos in (0..len).rev() {
                seq[pos] += 1;
                if (seq[pos] as u64) < v {
                    break;
                }
                seq[pos] = 0;
            }
        }
        Ok(mass)
    }

    pub fn check_compatible(&self, other: &TabularPolicy) -> Result<()> {
        if self.vocab != other.vocab || self.order != other.order {
            return Err(Error::config(format!(
                "policy shapes differ: vocab {:?}/order {} vs vocab {:?}/order {}",
                self.vocab, self.order, other.vocab, other.order
            )));
        }
        Ok(())
    }

    /// Sum over the teacher-forced contexts of `response` of the exact
    /// `KL(self row || reference row)`.
    pub fn seq_kl(&self, reference: &TabularPolicy, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.check_compatible(reference)?;
        let visits = self.visits(prompt, response)?;
        Ok(visits
            .iter()
            .map(|&(ctx, _)| categorical_kl(self.row(ctx), reference.row(ctx)))
            .sum())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            order: self.order,
            vocab_size: self.vocab.size,
            bos_id: self.vocab.bos_id(),
            eos_id: self.vocab.eos_id,
            logits: self.logits.clone(),
        };
        let mut text = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::input(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        let vocab = Vocab::new(ckpt.vocab_size, ckpt.eos_id)?;
        if ckpt.bos_id != vocab.bos_id() {
            return Err(Error::input(format!(
                "bos_id {} must equal vocab size {}",
                ckpt.bos_id, ckpt.vocab_size
            )));
        }
        Self::from_logits(vocab, ckpt.order, ckpt.logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text).map_err(|e| Error::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Inverse-CDF draw from a probability vector with a uniform `u` in [0, 1).
pub fn draw_categorical(probs: &[f64], u: f64) -> Token {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as Token;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1) as Token
}
