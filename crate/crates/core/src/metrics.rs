//! Diagnostics: reward accuracy, likelihood/length rank correlation,
//! reward-vs-likelihood contingency tables, KL to the reference and
//! reward-margin summaries.
//!
//! Ties always count against the winner: a pair is "correct" only when the
//! winner's score is strictly higher.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::PreferenceTriple;
use crate::error::{Error, Result};
use crate::objectives::{self, ObjectiveConfig};
use crate::policy::TabularPolicy;

fn require_data(data: &[PreferenceTriple]) -> Result<()> {
    if data.is_empty() {
        Err(Error::input("empty dataset"))
    } else {
        Ok(())
    }
}

/// `(reward_w, reward_l)` of every triple under the objective's reward form.
pub fn rewards(
    obj: &ObjectiveConfig,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    data: &[PreferenceTriple],
) -> Result<Vec<(f64, f64)>> {
    let reference = if obj.kind.uses_reference() {
        let r = reference
            .ok_or_else(|| Error::config(format!("'{}' rewards need a reference policy", obj.kind)))?;
        policy.check_compatible(r)?;
        Some(r)
    } else {
        None
    };
    data.iter()
        .map(|t| {
            let u_w = policy.seq_log_prob(&t.prompt, &t.chosen)?;
            let u_l = policy.seq_log_prob(&t.prompt, &t.rejected)?;
            let (v_w, v_l) = match reference {
                Some(r) => (
                    r.seq_log_prob(&t.prompt, &t.chosen)?,
                    r.seq_log_prob(&t.prompt, &t.rejected)?,
                ),
                None => (0.0, 0.0),
            };
            Ok((
                objectives::reward(obj, u_w, v_w, t.chosen.len()),
                objectives::reward(obj, u_l, v_l, t.rejected.len()),
            ))
        })
        .collect()
}

/// Fraction of triples whose winner gets a strictly higher reward.
pub fn reward_accuracy(
    obj: &ObjectiveConfig,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    data: &[PreferenceTriple],
) -> Result<f64> {
    require_data(data)?;
    let pairs = rewards(obj, policy, reference, data)?;
    let correct = pairs.iter().filter(|(w, l)| w > l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// 1-based ranks with ties sharing the mean of the positions they occupy.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("rank correlation with zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of mean-tie ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::input(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::input("spearman_rho needs at least 2 points"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::input("spearman_rho inputs must be finite"));
    }
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Chosen,
    Rejected,
    Both,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chosen" => Ok(Side::Chosen),
            "rejected" => Ok(Side::Rejected),
            "both" => Ok(Side::Both),
            other => Err(Error::config(format!("unknown side '{other}'"))),
        }
    }
}

/// `(avg log-prob, length)` for the selected responses.
pub fn likelihood_length_points(
    policy: &TabularPolicy,
    data: &[PreferenceTriple],
    side: Side,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for t in data {
        if matches!(side, Side::Chosen | Side::Both) {
            out.push((policy.avg_log_prob(&t.prompt, &t.chosen)?, t.chosen.len() as f64));
        }
        if matches!(side, Side::Rejected | Side::Both) {
            out.push((policy.avg_log_prob(&t.prompt, &t.rejected)?, t.rejected.len() as f64));
        }
    }
    Ok(out)
}

/// Spearman correlation between average log-likelihood and response length.
pub fn likelihood_length_correlation(
    policy: &TabularPolicy,
    data: &[PreferenceTriple],
    side: Side,
) -> Result<f64> {
    let points = likelihood_length_points(policy, data, side)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
    spearman_rho(&xs, &ys)
}

/// Reward used to rank the two responses in a contingency table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// `beta (u - v)`, needs the reference.
    Dpo { beta: f64 },
    /// `beta u / |y|`.
    Simpo { beta: f64 },
}

/// 2x2 cross-classification: rows = reward ranks the winner higher (yes, no),
/// columns = average log-likelihood ranks the winner higher (yes, no).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub counts: [[u64; 2]; 2],
}

impl Contingency {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn off_diagonal(&self) -> u64 {
        self.counts[0][1] + self.counts[1][0]
    }

    pub fn to_csv(&self) -> String {
        format!(
            "reward_higher,likelihood_higher,likelihood_not_higher\nyes,{},{}\nno,{},{}\n",
            self.counts[0][0], self.counts[0][1], self.counts[1][0], self.counts[1][1]
        )
    }
}

pub fn contingency_with(
    form: RewardForm,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    data: &[PreferenceTriple],
) -> Result<Contingency> {
    require_data(data)?;
    let mut table = Contingency::default();
    for t in data {
        let u_w = policy.seq_log_prob(&t.prompt, &t.chosen)?;
        let u_l = policy.seq_log_prob(&t.prompt, &t.rejected)?;
        let (n_w, n_l) = (t.chosen.len(), t.rejected.len());
        let reward_higher = match form {
            RewardForm::Dpo { beta } => {
                let r = reference.ok_or_else(|| Error::config("DPO-reward contingency needs a reference"))?;
                policy.check_compatible(r)?;
                let v_w = r.seq_log_prob(&t.prompt, &t.chosen)?;
                let v_l = r.seq_log_prob(&t.prompt, &t.rejected)?;
                objectives::dpo_implicit_reward(u_w, v_w, beta) > objectives::dpo_implicit_reward(u_l, v_l, beta)
            }
            RewardForm::Simpo { beta } => {
                objectives::simpo_reward(u_w, n_w, beta)? > objectives::simpo_reward(u_l, n_l, beta)?
            }
        };
        let likelihood_higher = u_w / n_w as f64 > u_l / n_l as f64;
        table.counts[usize::from(!reward_higher)][usize::from(!likelihood_higher)] += 1;
    }
    Ok(table)
}

/// DPO-reward ranking versus average-likelihood ranking.
pub fn contingency(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    data: &[PreferenceTriple],
    beta: f64,
) -> Result<Contingency> {
    contingency_with(RewardForm::Dpo { beta }, policy, Some(reference), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    /// Mean over examples of the summed per-context KL along `y_w`.
    pub per_sequence: f64,
    /// Total KL divided by total `y_w` tokens.
    pub per_token: f64,
}

/// Exact KL from the policy to the reference along the winners' contexts.
pub fn mean_kl_to_ref(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    data: &[PreferenceTriple],
) -> Result<KlSummary> {
    policy.check_compatible(reference)?;
    require_data(data)?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for t in data {
        total += policy.seq_kl(reference, &t.prompt, &t.chosen)?;
        tokens += t.chosen.len();
    }
    Ok(KlSummary {
        per_sequence: total / data.len() as f64,
        per_token: total / tokens as f64,
    })
}

/// Closed-open bin `[lo, hi)` over the length difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean reward margin; `None` marks an empty bin.
    pub mean_margin: Option<f64>,
}

/// Mean reward margin `r(y_w) - r(y_l)` binned by `|y_w| - |y_l|`. Bins split
/// `[min dl, max dl + 1)` into equal closed-open intervals.
pub fn margin_length_profile(
    obj: &ObjectiveConfig,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    data: &[PreferenceTriple],
    bins: usize,
) -> Result<Vec<LengthBin>> {
    if bins == 0 {
        return Err(Error::input("bins must be >= 1"));
    }
    require_data(data)?;
    let margins: Vec<f64> = rewards(obj, policy, reference, data)?
        .into_iter()
        .map(|(w, l)| w - l)
        .collect();
    let dls: Vec<i64> = data.iter().map(|t| t.length_difference()).collect();
    let lo = *dls.iter().min().expect("non-empty") as f64;
    let hi = *dls.iter().max().expect("non-empty") as f64 + 1.0;
    let width = (hi - lo) / bins as f64;
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (&dl, &m) in dls.iter().zip(&margins) {
        let b = (((dl as f64 - lo) / width).floor() as usize).min(bins - 1);
        sums[b] += m;
        counts[b] += 1;
    }
    Ok((0..bins)
        .map(|b| LengthBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count: counts[b],
            mean_margin: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub mean: f64,
    pub stddev: f64,
    pub histogram: Vec<HistBin>,
}

/// Mean, population standard deviation and an equal-width histogram over
/// `[min, max]` (last bin closed).
pub fn margin_stats(margins: &[f64], bins: usize) -> Result<MarginStats> {
    if margins.is_empty() || bins == 0 {
        return Err(Error::input("margin_stats needs data and >= 1 bin"));
    }
    let n = margins.len() as f64;
    let mean = margins.iter().sum::<f64>() / n;
    let stddev = (margins.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &m in margins {
        let b = if width > 0.0 {
            (((m - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Ok(MarginStats {
        mean,
        stddev,
        histogram: counts
            .into_iter()
            .enumerate()
            .map(|(b, count)| HistBin {
                lo: lo + b as f64 * width,
                hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
                count,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub length_bins: usize,
    pub hist_bins: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            length_bins: 8,
            hist_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub objective: ObjectiveConfig,
    pub n: usize,
    pub reward_accuracy: f64,
    /// Spearman rho of average log-likelihood vs length over both sides;
    /// `None` when undefined (zero rank variance).
    pub spearman_rho: Option<f64>,
    /// DPO-reward vs likelihood ranking (requires a reference).
    pub contingency: Option<Contingency>,
    /// Same table with the length-normalized reward in place of DPO's.
    pub simpo_contingency: Contingency,
    pub mean_kl_w: Option<KlSummary>,
    pub margin_stats: MarginStats,
    pub length_profile: Vec<LengthBin>,
}

pub fn analyze(
    obj: &ObjectiveConfig,
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    data: &[PreferenceTriple],
    opts: &AnalysisOptions,
) -> Result<AnalysisReport> {
    require_data(data)?;
    let pairs = rewards(obj, policy, reference, data)?;
    let margins: Vec<f64> = pairs.iter().map(|(w, l)| w - l).collect();
    let spearman_rho = match likelihood_length_correlation(policy, data, Side::Both) {
        Ok(rho) => Some(rho),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    // scale is irrelevant to rankings as long as it is positive
    let beta = if obj.beta > 0.0 { obj.beta } else { 1.0 };
    Ok(AnalysisReport {
        objective: *obj,
        n: data.len(),
        reward_accuracy: pairs.iter().filter(|(w, l)| w > l).count() as f64 / data.len() as f64,
        spearman_rho,
        contingency: reference
            .map(|r| contingency(policy, r, data, beta))
            .transpose()?,
        simpo_contingency: contingency_with(RewardForm::Simpo { beta }, policy, None, data)?,
        mean_kl_w: reference.map(|r| mean_kl_to_ref(policy, r, data)).transpose()?,
        margin_stats: margin_stats(&margins, opts.hist_bins)?,
        length_profile: margin_length_profile(obj, policy, reference, data, opts.length_bins)?,
    })
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat CSV tables keyed by file name.
    pub fn tables(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();

        let mut summary = String::from("metric,value\n");
        let _ = writeln!(summary, "n,{}", self.n);
        let _ = writeln!(summary, "reward_accuracy,{}", self.reward_accuracy);
        let _ = writeln!(summary, "spearman_rho,{}", opt(self.spearman_rho));
        let _ = writeln!(summary, "mean_kl_w,{}", opt(self.mean_kl_w.map(|k| k.per_sequence)));
        let _ = writeln!(summary, "mean_kl_w_per_token,{}", opt(self.mean_kl_w.map(|k| k.per_token)));
        let _ = writeln!(summary, "margin_mean,{}", self.margin_stats.mean);
        let _ = writeln!(summary, "margin_stddev,{}", self.margin_stats.stddev);
        out.push(("summary.csv".to_string(), summary));

        if let Some(c) = &self.contingency {
            out.push(("contingency_dpo.csv".to_string(), c.to_csv()));
        }
        out.push(("contingency_simpo.csv".to_string(), self.simpo_contingency.to_csv()));

        let mut hist = String::from("lo,hi,count\n");
        for b in &self.margin_stats.histogram {
            let _ = writeln!(hist, "{},{},{}", b.lo, b.hi, b.count);
        }
        out.push(("margin_histogram.csv".to_string(), hist));

        let mut profile = String::from("dl_lo,dl_hi,count,mean_margin\n");
        for b in &self.length_profile {
            let _ = writeln!(profile, "{},{},{},{}", b.lo, b.hi, b.count, opt(b.mean_margin));
        }
        out.push(("length_profile.csv".to_string(), profile));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveKind;
    use crate::policy::Vocab;
    use crate::seed::rng_for;
    use rand::Rng;

    fn random_data(n: usize, vocab: usize, seed: u64) -> Vec<PreferenceTriple> {
        let mut rng = rng_for(seed, "data", 0);
        let seq = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
            let len = rng.random_range(1..7);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        };
        let mut out = Vec::new();
        while out.len() < n {
            let (p, c, r) = (seq(&mut rng), seq(&mut rng), seq(&mut rng));
            if c != r {
                out.push(PreferenceTriple::new(p, c, r));
            }
        }
        out
    }

    fn policy(vocab: usize, seed: u64) -> TabularPolicy {
        TabularPolicy::random(Vocab::new(vocab, None).unwrap(), 1, 1.0, &mut rng_for(seed, "p", 0)).unwrap()
    }

    /// Mean-rank Spearman computed straight from the definition.
    fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|x| {
                    let below = v.iter().filter(|y| *y < x).count() as f64;
                    let equal = v.iter().filter(|y| *y == x).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(xs), rank(ys));
        let n = xs.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_examples() {
        let xs = [0.3, 1.5, -2.0, 4.0, 0.9];
        assert!((spearman_rho(&xs, &xs).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((spearman_rho(&xs, &rev).unwrap() + 1.0).abs() < 1e-15);
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let expected = brute_spearman(&a, &b);
        assert!((spearman_rho(&a, &b).unwrap() - expected).abs() < 1e-15);
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4)
        assert!((expected - 0.948_683_298_050_513_8).abs() < 1e-12);
        assert!(matches!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
        assert!(spearman_rho(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn reward_accuracy_examples() {
        let v = Vocab::new(4, None).unwrap();
        // ranks any response made of token 0 above anything containing 3
        let mut p = TabularPolicy::uniform(v, 1).unwrap();
        for ctx in 0..p.num_contexts() {
            p.row_mut(ctx)[0] = 3.0;
        }
        let data = vec![
            PreferenceTriple::new(vec![1], vec![0, 0], vec![3]),
            PreferenceTriple::new(vec![2], vec![0], vec![3, 3, 1]),
        ];
        for kind in [ObjectiveKind::Simpo, ObjectiveKind::Orpo, ObjectiveKind::Cpo] {
            assert_eq!(reward_accuracy(&ObjectiveConfig::new(kind), &p, None, &data).unwrap(), 1.0);
        }
        let dpo = ObjectiveConfig::new(ObjectiveKind::Dpo);
        assert_eq!(reward_accuracy(&dpo, &p, Some(&p), &data).unwrap(), 0.0);
        assert!(reward_accuracy(&dpo, &p, None, &data).is_err());
        assert!(reward_accuracy(&dpo, &p, Some(&p), &[]).is_err());
    }

    #[test]
    fn reward_accuracy_matches_recount() {
        let data = random_data(200, 5, 1);
        let p = policy(5, 2);
        let r = policy(5, 3);
        for kind in ObjectiveKind::ALL {
            let obj = ObjectiveConfig::new(kind);
            let acc = reward_accuracy(&obj, &p, Some(&r), &data).unwrap();
            let recount = data
                .iter()
                .filter(|t| {
                    let score = |y: &[u32]| {
                        let u = p.seq_log_prob(&t.prompt, y).unwrap();
                        let v = r.seq_log_prob(&t.prompt, y).unwrap();
                        objectives::reward(&obj, u, v, y.len())
                    };
                    score(&t.chosen) > score(&t.rejected)
                })
                .count();
            assert_eq!(acc, recount as f64 / 200.0, "{kind}");
        }
    }

    #[test]
    fn contingency_examples() {
        let data = random_data(300, 4, 7);
        let p = policy(4, 8);
        let r = policy(4, 9);
        let at_ref = contingency(&r, &r, &data, 0.1).unwrap();
        assert_eq!(at_ref.counts[0], [0, 0]);
        assert_eq!(at_ref.total(), 300);

        let simpo = contingency_with(RewardForm::Simpo { beta: 2.0 }, &p, None, &data).unwrap();
        assert_eq!(simpo.off_diagonal(), 0);

        let table = contingency(&p, &r, &data, 0.1).unwrap();
        let mut recount = [[0u64; 2]; 2];
        for t in &data {
            let dw = p.seq_log_prob(&t.prompt, &t.chosen).unwrap() - r.seq_log_prob(&t.prompt, &t.chosen).unwrap();
            let dl = p.seq_log_prob(&t.prompt, &t.rejected).unwrap() - r.seq_log_prob(&t.prompt, &t.rejected).unwrap();
            let lik = p.avg_log_prob(&t.prompt, &t.chosen).unwrap() > p.avg_log_prob(&t.prompt, &t.rejected).unwrap();
            let rew = dw > dl;
            recount[if rew { 0 } else { 1 }][if lik { 0 } else { 1 }] += 1;
        }
        assert_eq!(table.counts, recount);
    }

    #[test]
    fn kl_examples() {
        let data = random_data(50, 4, 4);
        let p = policy(4, 1);
        let r = policy(4, 2);
        assert_eq!(mean_kl_to_ref(&r, &r, &data).unwrap().per_sequence, 0.0);
        assert!(mean_kl_to_ref(&p, &r, &data).unwrap().per_sequence > 0.0);

        // single context: empty prompt, one-token response -> BOS row only
        let one = vec![PreferenceTriple::new(vec![], vec![2], vec![1])];
        let ctx = p.context_index(&[4]);
        let (pp, qq) = (p.next_token_probs(ctx), r.next_token_probs(ctx));
        let direct: f64 = pp.iter().zip(&qq).map(|(a, b)| a * (a / b).ln()).sum();
        let kl = mean_kl_to_ref(&p, &r, &one).unwrap();
        assert!((kl.per_sequence - direct).abs() < 1e-14);
        assert!((kl.per_token - direct).abs() < 1e-14);
    }

    #[test]
    fn length_profile_examples() {
        let p = policy(4, 5);
        let obj = ObjectiveConfig::new(ObjectiveKind::Simpo);
        let equal = vec![
            PreferenceTriple::new(vec![1], vec![0, 1], vec![2, 3]),
            PreferenceTriple::new(vec![2], vec![1], vec![3]),
        ];
        let bins = margin_length_profile(&obj, &p, None, &equal, 3).unwrap();
        let filled: Vec<_> = bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(filled.len(), 1);
        assert!(filled[0].lo <= 0.0 && 0.0 < filled[0].hi);
        assert!(bins.iter().filter(|b| b.count == 0).all(|b| b.mean_margin.is_none()));

        let data = random_data(100, 4, 12);
        let bins = margin_length_profile(&obj, &p, None, &data, 4).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 100);
        let lo = data.iter().map(|t| t.length_difference()).min().unwrap() as f64;
        let hi = data.iter().map(|t| t.length_difference()).max().unwrap() as f64;
        assert_eq!(bins[0].lo, lo);
        assert!(bins[3].hi > hi);
        for w in bins.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
        }
        // recompute the first non-empty bin's mean from the reward op
        let b = bins.iter().find(|b| b.count > 0).unwrap();
        let members: Vec<f64> = data
            .iter()
            .filter(|t| {
                let dl = t.length_difference() as f64;
                b.lo <= dl && dl < b.hi
            })
            .map(|t| {
                let r = |y: &[u32]| objectives::simpo_reward(p.seq_log_prob(&t.prompt, y).unwrap(), y.len(), obj.beta).unwrap();
                r(&t.chosen) - r(&t.rejected)
            })
            .collect();
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        assert!((b.mean_margin.unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn likelihood_length_undefined_cases() {
        let u = TabularPolicy::uniform(Vocab::new(4, None).unwrap(), 1).unwrap();
        let data = random_data(30, 4, 3);
        assert!(matches!(
            likelihood_length_correlation(&u, &data, Side::Both),
            Err(Error::Undefined(_))
        ));
        let p = policy(4, 1);
        let same_len = vec![
            PreferenceTriple::new(vec![1], vec![0, 1], vec![2, 3]),
            PreferenceTriple::new(vec![2], vec![1, 1], vec![3, 0]),
        ];
        assert!(matches!(
            likelihood_length_correlation(&p, &same_len, Side::Both),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn analysis_report_is_consistent() {
        let data = random_data(120, 5, 21);
        let p = policy(5, 1);
        let r = policy(5, 2);
        let obj = ObjectiveConfig::new(ObjectiveKind::Dpo);
        let rep = analyze(&obj, &p, Some(&r), &data, &AnalysisOptions::default()).unwrap();
        assert_eq!(rep.contingency.unwrap().total(), 120);
        assert_eq!(rep.simpo_contingency.off_diagonal(), 0);
        assert_eq!(rep.margin_stats.histogram.iter().map(|b| b.count).sum::<usize>(), 120);
        let rho = rep.spearman_rho.unwrap();
        assert!((-1.0..=1.0).contains(&rho));
        let back: AnalysisReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back.n, 120);
        assert!(rep.tables().iter().any(|(name, _)| name == "contingency_dpo.csv"));
    }
}
