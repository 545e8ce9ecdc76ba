//! Synthetic preference data with a planted reward, JSONL I/O and splitting.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{draw_categorical, TabularPolicy, Token, Vocab};
use crate::seed::rng_for;

/// One `(x, y_w, y_l)` example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    /// Planted rewards of `(chosen, rejected)` when the triple was generated.
    #[serde(default, rename = "true_rewards", skip_serializing_if = "Option::is_none")]
    pub meta: Option<[f64; 2]>,
}

impl PreferenceTriple {
    pub fn new(prompt: Vec<Token>, chosen: Vec<Token>, rejected: Vec<Token>) -> Self {
        Self {
            prompt,
            chosen,
            rejected,
            meta: None,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.chosen.is_empty() {
            return Err(Error::input("chosen response is empty"));
        }
        if self.rejected.is_empty() {
            return Err(Error::input("rejected response is empty"));
        }
        if self.chosen == self.rejected {
            return Err(Error::input("chosen and rejected responses are identical"));
        }
        for &t in self.prompt.iter().chain(&self.chosen).chain(&self.rejected) {
            vocab.check_token(t)?;
        }
        Ok(())
    }

    /// `|y_w| - |y_l|`.
    pub fn length_difference(&self) -> i64 {
        self.chosen.len() as i64 - self.rejected.len() as i64
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub vocab_size: usize,
    /// Reserve the last token as end-of-sequence; every response then ends
    /// with it.
    pub eos: bool,
    pub prompt_len: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_examples: usize,
    pub candidates_per_prompt: usize,
    /// `b`: planted reward per response token.
    pub length_bias: f64,
    /// `w`: planted reward per good token minus per bad token.
    pub good_token_weight: f64,
    pub seed: u64,
    #[serde(default)]
    pub length_mode: LengthMode,
}

/// How response lengths are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Length uniform in `[min_len, max_len]`, EOS forced at the end.
    #[default]
    Uniform,
    /// Sample until the policy emits EOS, with EOS masked before `min_len`
    /// and forced at `max_len`.
    Natural,
}

impl std::str::FromStr for LengthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LengthMode::Uniform),
            "natural" => Ok(LengthMode::Natural),
            other => Err(Error::config(format!("unknown length mode '{other}'"))),
        }
    }
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            eos: true,
            prompt_len: 4,
            min_len: 2,
            max_len: 12,
            n_examples: 1000,
            candidates_per_prompt: 2,
            length_bias: 0.0,
            good_token_weight: 1.0,
            seed: 0,
            length_mode: LengthMode::Uniform,
        }
    }
}

impl GenSpec {
    pub fn vocab(&self) -> Result<Vocab> {
        let eos = self.eos.then(|| self.vocab_size.saturating_sub(1) as Token);
        Vocab::new(self.vocab_size, eos)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        if self.eos && self.vocab_size < 3 {
            return Err(Error::config("an EOS vocabulary needs at least 3 tokens"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "response length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if self.length_mode == LengthMode::Natural && !self.eos {
            return Err(Error::config("natural response lengths need an EOS token"));
        }
        if self.candidates_per_prompt < 2 {
            return Err(Error::config("candidates_per_prompt must be >= 2"));
        }
        if !self.length_bias.is_finite() || !self.good_token_weight.is_finite() {
            return Err(Error::config("length_bias and good_token_weight must be finite"));
        }
        Ok(())
    }

    /// Planted reward `w * (#good - #bad) + b * |y|`. Good tokens are the
    /// lower half of the vocabulary, bad tokens the upper half; EOS counts as
    /// neither.
    pub fn planted_reward(&self, response: &[Token]) -> f64 {
        let eos = self.eos.then(|| self.vocab_size as Token - 1);
        let half = (self.vocab_size / 2) as Token;
        let score: i64 = response
            .iter()
            .filter(|&&t| Some(t) != eos)
            .map(|&t| if t < half { 1 } else { -1 })
            .sum();
        self.good_token_weight * score as f64 + self.length_bias * response.len() as f64
    }

    /// Orders candidates by planted reward, breaking ties lexicographically;
    /// returns `(chosen, rejected)` indices (max, min).
    pub fn rank_candidates(&self, candidates: &[Vec<Token>]) -> (usize, usize) {
        let rewards: Vec<f64> = candidates.iter().map(|c| self.planted_reward(c)).collect();
        let cmp = |a: &usize, b: &usize| {
            rewards[*a]
                .total_cmp(&rewards[*b])
                .then_with(|| candidates[*a].cmp(&candidates[*b]))
        };
        let idx: Vec<usize> = (0..candidates.len()).collect();
        let best = *idx.iter().max_by(|a, b| cmp(a, b)).expect("non-empty");
        let worst = *idx.iter().min_by(|a, b| cmp(a, b)).expect("non-empty");
        (best, worst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub triples: Vec<PreferenceTriple>,
    /// Prompts dropped because every resampled candidate set was identical.
    pub skipped: usize,
}

const MAX_RESAMPLES: usize = 16;

/// Samples a response of exactly `len` tokens. With an EOS vocabulary the
/// first `len - 1` tokens are drawn with EOS masked out and the last one is
/// EOS.
pub fn sample_fixed_length<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    prompt: &[Token],
    len: usize,
    rng: &mut R,
) -> Result<Vec<Token>> {
    let eos = policy.vocab().eos_id();
    let mut history = policy.padded_history(prompt)?;
    let mut out = Vec::with_capacity(len);
    for pos in 0..len {
        let t = match eos {
            Some(e) if pos + 1 == len => e,
            _ => {
                let mut probs = policy.next_token_probs(policy.next_context(&history));
                if let Some(e) = eos {
                    probs[e as usize] = 0.0;
                    let total: f64 = probs.iter().sum();
                    probs.iter_mut().for_each(|p| *p /= total);
                }
                draw_categorical(&probs, rng.random::<f64>())
            }
        };
        out.push(t);
        history.push(t);
    }
    Ok(out)
}

/// Samples until EOS; EOS is masked while the response is shorter than
/// `min_len` and forced once it reaches `max_len`.
pub fn sample_natural_length<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    prompt: &[Token],
    min_len: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Token>> {
    let eos = policy
        .vocab()
        .eos_id()
        .ok_or_else(|| Error::config("natural sampling needs an EOS token"))?;
    let mut history = policy.padded_history(prompt)?;
    let mut out = Vec::with_capacity(max_len);
    loop {
        let t = if out.len() + 1 >= max_len {
            eos
        } else {
            let mut probs = policy.next_token_probs(policy.next_context(&history));
            if out.len() + 1 < min_len {
                probs[eos as usize] = 0.0;
                let total: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= total);
            }
            draw_categorical(&probs, rng.random::<f64>())
        };
        out.push(t);
        history.push(t);
        if t == eos {
            return Ok(out);
        }
    }
}

/// Draws a prompt, samples candidates from `ref_policy` and keeps the best
/// and worst under the planted reward. Each prompt uses its own sub-seed, so
/// the result does not depend on evaluation order.
pub fn generate(spec: &GenSpec, ref_policy: &TabularPolicy) -> Result<Generated> {
    spec.validate()?;
    if *ref_policy.vocab() != spec.vocab()? {
        return Err(Error::config(format!(
            "reference vocab {:?} does not match generator vocab {:?}",
            ref_policy.vocab(),
            spec.vocab()?
        )));
    }
    let prompt_tokens = spec.vocab_size - usize::from(spec.eos);
    let per_prompt: Vec<Option<PreferenceTriple>> = (0..spec.n_examples)
        .into_par_iter()
        .map(|i| -> Result<Option<PreferenceTriple>> {
            let mut rng = rng_for(spec.seed, "prompt", i as u64);
            let prompt: Vec<Token> = (0..spec.prompt_len)
                .map(|_| rng.random_range(0..prompt_tokens) as Token)
                .collect();
            for _ in 0..MAX_RESAMPLES {
                let mut candidates = Vec::with_capacity(spec.candidates_per_prompt);
                for _ in 0..spec.candidates_per_prompt {
                    let y = match spec.length_mode {
                        LengthMode::Uniform => {
                            let len = rng.random_range(spec.min_len..=spec.max_len);
                            sample_fixed_length(ref_policy, &prompt, len, &mut rng)?
                        }
                        LengthMode::Natural => {
                            sample_natural_length(ref_policy, &prompt, spec.min_len, spec.max_len, &mut rng)?
                        }
                    };
                    candidates.push(y);
                }
                let (best, worst) = spec.rank_candidates(&candidates);
                if candidates[best] != candidates[worst] {
                    let meta = [
                        spec.planted_reward(&candidates[best]),
                        spec.planted_reward(&candidates[worst]),
                    ];
                    return Ok(Some(PreferenceTriple {
                        prompt,
                        chosen: candidates[best].clone(),
                        rejected: candidates[worst].clone(),
                        meta: Some(meta),
                    }));
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    let skipped = per_prompt.iter().filter(|t| t.is_none()).count();
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} prompts with identical candidates");
    }
    Ok(Generated {
        triples: per_prompt.into_iter().flatten().collect(),
        skipped,
    })
}

/// Deterministic shuffled split into `(train, holdout)`; each part keeps
/// the original relative order.
pub fn split(
    data: &[PreferenceTriple],
    holdout_frac: f64,
    seed: u64,
) -> Result<(Vec<PreferenceTriple>, Vec<PreferenceTriple>)> {
    if data.len() < 2 {
        return Err(Error::input("split needs at least 2 examples"));
    }
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::input(format!("holdout_frac must be in (0, 1), got {holdout_frac}")));
    }
    let n = data.len();
    let n_hold = ((holdout_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "split", 0));
    let mut hold = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((
        train.into_iter().map(|i| data[i].clone()).collect(),
        hold.into_iter().map(|i| data[i].clone()).collect(),
    ))
}

/// Writes one JSON object per line.
pub fn write_jsonl(data: &[PreferenceTriple], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in data {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSONL preference file, validating every triple against `vocab`.
/// Blank lines are skipped; unknown fields are dropped.
pub fn read_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<PreferenceTriple>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at_line = |message: String| Error::Line {
            path: name.clone(),
            line: i + 1,
            message,
        };
        let triple: PreferenceTriple =
            serde_json::from_str(&line).map_err(|e| at_line(e.to_string()))?;
        triple.validate(vocab).map_err(|e| at_line(e.to_string()))?;
        out.push(triple);
    }
    Ok(out)
}

/// Mean `|y_w| - |y_l|` and its standard error.
pub fn length_gap(data: &[PreferenceTriple]) -> (f64, f64) {
    let n = data.len() as f64;
    let diffs: Vec<f64> = data.iter().map(|t| t.length_difference() as f64).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(spec: &GenSpec) -> TabularPolicy {
        TabularPolicy::random(spec.vocab().unwrap(), 1, 1.0, &mut rng_for(spec.seed, "ref", 0)).unwrap()
    }

    #[test]
    fn tie_break_is_lexicographic() {
        let spec = GenSpec {
            eos: false,
            ..GenSpec::default()
        };
        // both candidates: one good token, one bad token
        let a = vec![1, 9];
        let b = vec![2, 9];
        assert_eq!(spec.planted_reward(&a), spec.planted_reward(&b));
        let (best, worst) = spec.rank_candidates(&[a.clone(), b.clone()]);
        assert_eq!((best, worst), (1, 0));
        let (best, worst) = spec.rank_candidates(&[b, a]);
        assert_eq!((best, worst), (0, 1));
    }

    #[test]
    fn length_bias_prefers_longer() {
        let spec = GenSpec {
            eos: false,
            length_bias: 1.0,
            ..GenSpec::default()
        };
        let short = vec![1, 9, 3];
        let long = vec![1, 9, 1, 9, 1, 9, 1, 9, 3];
        assert_eq!(spec.planted_reward(&short) - 3.0, spec.planted_reward(&long) - 9.0);
        let (best, _) = spec.rank_candidates(&[short, long]);
        assert_eq!(best, 1);
    }

    #[test]
    fn eos_is_excluded_from_token_score() {
        let spec = GenSpec::default();
        assert_eq!(spec.planted_reward(&[0, 15]), 1.0);
        assert_eq!(spec.planted_reward(&[8, 15]), -1.0);
    }

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let spec = GenSpec {
            n_examples: 200,
            seed: 3,
            ..GenSpec::default()
        };
        let r = reference(&spec);
        let a = generate(&spec, &r).unwrap();
        let b = generate(&spec, &r).unwrap();
        assert_eq!(a, b);
        let vocab = spec.vocab().unwrap();
        for t in &a.triples {
            t.validate(&vocab).unwrap();
            assert_eq!(t.prompt.len(), 4);
            assert_eq!(*t.chosen.last().unwrap(), 15);
            assert!((2..=12).contains(&t.chosen.len()));
            let [rw, rl] = t.meta.unwrap();
            assert!(rw >= rl);
            assert!(!t.chosen[..t.chosen.len() - 1].contains(&15));
        }
        assert_eq!(a.triples.len() + a.skipped, 200);
    }

    #[test]
    fn planted_length_bias_is_realized() {
        let spec = GenSpec {
            n_examples: 1000,
            length_bias: 1.0,
            good_token_weight: 0.0,
            seed: 5,
            ..GenSpec::default()
        };
        let data = generate(&spec, &reference(&spec)).unwrap().triples;
        assert!(length_gap(&data).0 > 0.0);

        let spec = GenSpec {
            n_examples: 2000,
            length_bias: 0.0,
            seed: 6,
            ..GenSpec::default()
        };
        let data = generate(&spec, &reference(&spec)).unwrap().triples;
        let (mean, se) = length_gap(&data);
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let spec = GenSpec::default();
        let wrong = TabularPolicy::uniform(Vocab::new(16, None).unwrap(), 1).unwrap();
        assert!(matches!(generate(&spec, &wrong), Err(Error::Config(_))));
    }

    fn toy(n: usize) -> Vec<PreferenceTriple> {
        (0..n)
            .map(|i| PreferenceTriple::new(vec![i as Token % 4], vec![1, (i % 3) as Token], vec![2]))
            .collect()
    }

    #[test]
    fn split_examples() {
        let data = toy(10);
        let (train, hold) = split(&data, 0.5, 1).unwrap();
        assert_eq!((train.len(), hold.len()), (5, 5));
        assert_eq!(split(&data, 0.5, 1).unwrap(), (train.clone(), hold.clone()));
        let mut union: Vec<_> = train.into_iter().chain(hold).collect();
        let mut orig = data.clone();
        let key = |t: &PreferenceTriple| (t.prompt.clone(), t.chosen.clone(), t.rejected.clone());
        union.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(union, orig);
        assert!(split(&data[..1], 0.5, 1).is_err());
        assert!(split(&data, 1.0, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            n_examples: 50,
            ..GenSpec::default()
        };
        let data = generate(&spec, &reference(&spec)).unwrap().triples;
        let path = dir.path().join("d.jsonl");
        write_jsonl(&data, &path).unwrap();
        let vocab = spec.vocab().unwrap();
        assert_eq!(read_jsonl(&path, &vocab).unwrap(), data);

        let bad = dir.path().join("bad.jsonl");
        fs::write(
            &bad,
            "{\"prompt\":[1],\"chosen\":[2],\"rejected\":[3]}\n{\"prompt\":[1],\"chosen\":[],\"rejected\":[3]}\n",
        )
        .unwrap();
        match read_jsonl(&bad, &vocab) {
            Err(Error::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }

        fs::write(
            &bad,
            "{\"prompt\":[1],\"chosen\":[2],\"rejected\":[3]}\n{\"prompt\":[1],\"chosen\":[2],\n{\"prompt\":[1],\"chosen\":[2],\"rejected\":[3],\"extra\":1}\n",
        )
        .unwrap();
        assert!(matches!(read_jsonl(&bad, &vocab), Err(Error::Line { line: 2, .. })));

        fs::write(&bad, "{\"prompt\":[1],\"chosen\":[99],\"rejected\":[3]}\n").unwrap();
        assert!(matches!(read_jsonl(&bad, &vocab), Err(Error::Line { line: 1, .. })));

        // unknown fields are accepted and dropped
        fs::write(&bad, "{\"prompt\":[1],\"chosen\":[2],\"rejected\":[3],\"source\":\"x\"}\n").unwrap();
        assert_eq!(read_jsonl(&bad, &vocab).unwrap().len(), 1);
    }

    #[test]
    fn natural_lengths_respect_bounds() {
        let spec = GenSpec {
            n_examples: 300,
            length_mode: LengthMode::Natural,
            ..GenSpec::default()
        };
        let eos = spec.vocab().unwrap().eos_id().unwrap();
        for t in generate(&spec, &reference(&spec)).unwrap().triples {
            for y in [&t.chosen, &t.rejected] {
                assert!((spec.min_len..=spec.max_len).contains(&y.len()), "{y:?}");
                assert_eq!(y.iter().position(|&x| x == eos), Some(y.len() - 1));
            }
        }
        let no_eos = GenSpec { eos: false, ..spec };
        assert!(no_eos.validate().is_err());
    }
}
