//! Command-line front end.
//!
//! Every command writes into `--out` and finishes by writing `manifest.json`
//! there. `replay` re-executes a manifest into a fresh directory and checks
//! that every output is byte-identical.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{self, GenSpec, PreferenceTriple};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions};
use crate::manifest::{self, RunDir, RunManifest};
use crate::metrics::{self, AnalysisOptions};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::policy::TabularPolicy;
use crate::seed::rng_for;
use crate::trainer::{self, Schedule, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "preflab", version, about = "Tabular preference-optimization lab")]
#[command(args_override_self = true)]
pub struct Cli {
    /// `key = value` file with defaults for the command's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic preference dataset from a random reference policy.
    Generate(GenerateArgs),
    /// Train a policy on preference triples.
    Train(TrainArgs),
    /// Loss and reward accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Full diagnostic report for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every objective's gradient.
    Gradcheck(GradcheckArgs),
    /// Re-run a manifest and compare outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Number of prompts.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab_size: usize,
    /// Use the full vocabulary for content (no end-of-sequence token).
    #[arg(long)]
    pub no_eos: bool,
    #[arg(long, default_value_t = 4)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub candidates: usize,
    /// `uniform` (fixed length then EOS) or `natural` (stop at sampled EOS).
    #[arg(long, default_value = "uniform")]
    pub length_mode: String,
    #[arg(long, default_value_t = 0.0)]
    pub length_bias: f64,
    #[arg(long, default_value_t = 1.0)]
    pub good_weight: f64,
    /// Context order of the random reference policy.
    #[arg(long, default_value_t = 1)]
    pub ref_order: usize,
    /// Standard deviation of the reference logits.
    #[arg(long, default_value_t = 1.0)]
    pub ref_scale: f64,
    /// Use an existing checkpoint as the sampling policy.
    #[arg(long)]
    pub ref_policy: Option<PathBuf>,
    /// Fraction of triples written to data/holdout.jsonl.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ObjectiveArgs {
    #[arg(long, default_value = "simpo")]
    pub objective: String,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda_w: Option<f64>,
    #[arg(long)]
    pub lambda_l: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// ORPO: use the summed instead of the length-averaged likelihood term.
    #[arg(long)]
    pub orpo_sft_sum: bool,
}

impl ObjectiveArgs {
    pub fn resolve(&self) -> Result<ObjectiveConfig> {
        let kind: ObjectiveKind = self.objective.parse()?;
        let mut cfg = ObjectiveConfig::new(kind);
        let overrides = [
            (&mut cfg.beta, self.beta),
            (&mut cfg.gamma, self.gamma),
            (&mut cfg.lambda, self.lambda),
            (&mut cfg.tau, self.tau),
            (&mut cfg.alpha, self.alpha),
            (&mut cfg.lambda_w, self.lambda_w),
            (&mut cfg.lambda_l, self.lambda_l),
            (&mut cfg.delta, self.delta),
        ];
        for (slot, value) in overrides {
            if let Some(v) = value {
                *slot = v;
            }
        }
        cfg.orpo_sft_sum = self.orpo_sft_sum;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Training triples (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out triples; when given, report.json and tables/ are written.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Frozen reference checkpoint. Required by reference-based objectives;
    /// for the others it only serves as the initialization.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Initial policy (defaults to the reference).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    #[arg(long, default_value = "cosine")]
    pub schedule: String,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    pub adam_beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub adam_beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Retrain once per value, e.g. `gamma=0,0.5,1.0,1.6`; needs --holdout.
    #[arg(long)]
    pub sweep: Option<String>,
}

impl TrainArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_frac: self.warmup,
            schedule: self.schedule.parse::<Schedule>()?,
            seed: self.seed,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            grad_clip: self.grad_clip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Reference checkpoint; enables KL and the DPO-reward contingency table.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[arg(long, default_value_t = 8)]
    pub length_bins: usize,
    #[arg(long, default_value_t = 20)]
    pub hist_bins: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Comma-separated objective kinds (default: all).
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest of the run to reproduce.
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Splits `key = value` lines into `--key value` flags (`true` booleans
/// become bare flags, `false` ones are dropped).
pub fn config_flags(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut flags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Line {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match value {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            _ => {
                flags.push(format!("--{key}"));
                flags.push(value.to_string());
            }
        }
    }
    Ok(flags)
}

/// Inserts flags from `--config` right after the subcommand, so explicit
/// command-line flags (which come later) take precedence.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    let mut sub_pos = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if arg == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if arg == "--threads" {
            i += 2;
            continue;
        } else if sub_pos.is_none() && !arg.starts_with('-') {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(pos)) = (config, sub_pos) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let flags = config_flags(&text, &path)?;
    let mut merged: Vec<OsString> = argv[..=pos].to_vec();
    merged.extend(flags.into_iter().map(OsString::from));
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(merged)
}

fn load_policy(path: &Path) -> Result<TabularPolicy> {
    TabularPolicy::load(path)
}

fn write_json<T: Serialize>(dir: &mut RunDir, rel: &str, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    dir.write(rel, &s)?;
    Ok(())
}

struct Finished {
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    summary: serde_json::Value,
}

fn finish(command: &str, args: serde_json::Value, dir: &RunDir, done: Finished) -> Result<RunManifest> {
    let inputs = done
        .inputs
        .iter()
        .map(|p| manifest::input_artifact(p))
        .collect::<Result<Vec<_>>>()?;
    let m = RunManifest {
        tool: manifest::tool_version(),
        command: command.to_string(),
        args,
        config: done.config,
        seeds: done.seeds,
        inputs,
        outputs: dir.outputs(),
        summary: done.summary,
    };
    m.write(dir.root())?;
    Ok(m)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<RunManifest> {
    if !(a.holdout > 0.0 && a.holdout < 1.0) {
        return Err(Error::config(format!("--holdout must be in (0, 1), got {}", a.holdout)));
    }
    let spec = GenSpec {
        vocab_size: a.vocab_size,
        eos: !a.no_eos,
        prompt_len: a.prompt_len,
        min_len: a.min_len,
        max_len: a.max_len,
        n_examples: a.n,
        candidates_per_prompt: a.candidates,
        length_bias: a.length_bias,
        good_token_weight: a.good_weight,
        seed: a.seed,
        length_mode: a.length_mode.parse()?,
    };
    spec.validate()?;
    let mut inputs = Vec::new();
    let reference = match &a.ref_policy {
        Some(p) => {
            inputs.push(p.clone());
            load_policy(p)?
        }
        None => {
            if !(a.ref_scale.is_finite() && a.ref_scale >= 0.0) {
                return Err(Error::config("--ref-scale must be finite and >= 0"));
            }
            TabularPolicy::random(spec.vocab()?, a.ref_order, a.ref_scale, &mut rng_for(a.seed, "ref", 0))?
        }
    };
    let generated = data::generate(&spec, &reference)?;
    let (train, holdout) = data::split(&generated.triples, a.holdout, a.seed)?;

    let mut dir = RunDir::create(&a.out)?;
    dir.write("ref.json", &reference.to_checkpoint_string())?;
    data::write_jsonl(&train, &dir.path("data/train.jsonl"))?;
    dir.record("data/train.jsonl")?;
    data::write_jsonl(&holdout, &dir.path("data/holdout.jsonl"))?;
    dir.record("data/holdout.jsonl")?;

    let (gap, gap_se) = data::length_gap(&generated.triples);
    let summary = json!({
        "triples": generated.triples.len(),
        "skipped": generated.skipped,
        "train": train.len(),
        "holdout": holdout.len(),
        "mean_length_gap": gap,
        "mean_length_gap_se": gap_se,
    });
    write_json(&mut dir, "report.json", &summary)?;
    finish(
        "generate",
        serde_json::to_value(a)?,
        &dir,
        Finished {
            config: json!({ "gen_spec": spec }),
            seeds: BTreeMap::from([("seed".to_string(), a.seed)]),
            inputs,
            summary,
        },
    )
}

/// Initial policy and (for reference-based kinds) the frozen reference.
fn train_models(a: &TrainArgs, kind: ObjectiveKind) -> Result<(TabularPolicy, Option<TabularPolicy>, Vec<PathBuf>)> {
    if kind.uses_reference() && a.reference.is_none() {
        return Err(Error::config(format!("objective '{kind}' requires --ref")));
    }
    let init_path = a
        .init
        .as_ref()
        .or(a.reference.as_ref())
        .ok_or_else(|| Error::config("train needs --init or --ref"))?;
    let mut inputs = vec![init_path.clone()];
    let init = load_policy(init_path)?;
    let reference = if kind.uses_reference() {
        let p = a.reference.as_ref().expect("checked above");
        if !inputs.contains(p) {
            inputs.push(p.clone());
        }
        Some(load_policy(p)?)
    } else {
        None
    };
    Ok((init, reference, inputs))
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<String>)> {
    let (param, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--sweep expects param=v1,v2,..., got '{spec}'")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::config("--sweep needs at least one value"));
    }
    Ok((param.trim().replace('-', "_"), values))
}

fn read_data(path: &Path, policy: &TabularPolicy) -> Result<Vec<PreferenceTriple>> {
    data::read_jsonl(path, policy.vocab())
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    // resolve everything before touching data
    let obj = a.objective.resolve()?;
    let cfg = a.train_config()?;
    let sweep = a.sweep.as_deref().map(parse_sweep).transpose()?;
    if sweep.is_some() && a.holdout.is_none() {
        return Err(Error::config("--sweep needs --holdout"));
    }
    let (init, reference, mut inputs) = train_models(a, obj.kind)?;
    let train_data = read_data(&a.data, &init)?;
    inputs.push(a.data.clone());
    let holdout = match &a.holdout {
        Some(p) => {
            inputs.push(p.clone());
            Some(read_data(p, &init)?)
        }
        None => None,
    };

    let mut dir = RunDir::create(&a.out)?;
    let (policy, trace) = trainer::train(&init, reference.as_ref(), &train_data, &obj, &cfg)?;
    dir.write("policy.json", &policy.to_checkpoint_string())?;
    dir.write("trace.csv", &trace.to_csv())?;
    let passes = trace.forward_pass_counter();
    let final_loss = trace.records.last().map(|r| r.loss);

    let mut summary = json!({
        "steps": trace.records.len(),
        "final_loss": final_loss,
        "policy_passes": passes.policy_passes,
        "reference_passes": passes.reference_passes,
    });

    if let Some(hold) = &holdout {
        let report = metrics::analyze(&obj, &policy, reference.as_ref(), hold, &AnalysisOptions::default())?;
        dir.write("report.json", &report.to_json())?;
        for (name, csv) in report.tables() {
            dir.write(&format!("tables/{name}"), &csv)?;
        }
        summary["holdout_reward_accuracy"] = json!(report.reward_accuracy);
    }

    if let (Some((param, values)), Some(hold)) = (&sweep, &holdout) {
        let mut csv = format!("{param},reward_accuracy,mean_kl_w,mean_kl_w_per_token,spearman_rho,final_loss\n");
        for value in values {
            let mut o = obj;
            o.set(param, value)?;
            o.validate()?;
            if o.kind != obj.kind {
                return Err(Error::config("--sweep cannot change the objective kind"));
            }
            let (p, t) = trainer::train(&init, reference.as_ref(), &train_data, &o, &cfg)?;
            dir.write(&format!("sweep/{param}={value}/policy.json"), &p.to_checkpoint_string())?;
            dir.write(&format!("sweep/{param}={value}/trace.csv"), &t.to_csv())?;
            let acc = metrics::reward_accuracy(&o, &p, reference.as_ref(), hold)?;
            let kl = reference
                .as_ref()
                .map(|r| metrics::mean_kl_to_ref(&p, r, hold))
                .transpose()?;
            let kl = match kl {
                Some(k) => Some(k),
                None => Some(metrics::mean_kl_to_ref(&p, &init, hold)?),
            };
            let rho = metrics::likelihood_length_correlation(&p, hold, metrics::Side::Both).ok();
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{value},{acc},{},{},{},{}\n",
                opt(kl.map(|k| k.per_sequence)),
                opt(kl.map(|k| k.per_token)),
                opt(rho),
                opt(t.records.last().map(|r| r.loss)),
            ));
        }
        dir.write(&format!("tables/sweep_{param}.csv"), &csv)?;
    }

    finish(
        "train",
        serde_json::to_value(a)?,
        &dir,
        Finished {
            config: json!({ "objective": obj, "train": cfg }),
            seeds: BTreeMap::from([("seed".to_string(), cfg.seed)]),
            inputs,
            summary,
        },
    )
}

fn eval_reference(obj: &ObjectiveConfig, reference: &Option<PathBuf>, inputs: &mut Vec<PathBuf>) -> Result<Option<TabularPolicy>> {
    match (obj.kind.uses_reference(), reference) {
        (true, None) => Err(Error::config(format!("objective '{}' requires --ref", obj.kind))),
        (_, Some(p)) => {
            inputs.push(p.clone());
            Ok(Some(load_policy(p)?))
        }
        (false, None) => Ok(None),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<RunManifest> {
    let obj = a.objective.resolve()?;
    let mut inputs = vec![a.policy.clone()];
    let reference = eval_reference(&obj, &a.reference, &mut inputs)?;
    let policy = load_policy(&a.policy)?;
    let held = read_data(&a.data, &policy)?;
    inputs.push(a.data.clone());
    let scoring_ref = if obj.kind.uses_reference() { reference.as_ref() } else { None };
    let loss = trainer::evaluate_loss(&obj, &policy, scoring_ref, &held)?;
    let acc = metrics::reward_accuracy(&obj, &policy, scoring_ref, &held)?;
    let summary = json!({ "n": held.len(), "loss": loss, "reward_accuracy": acc });
    let mut dir = RunDir::create(&a.out)?;
    write_json(&mut dir, "report.json", &summary)?;
    finish(
        "eval",
        serde_json::to_value(a)?,
        &dir,
        Finished {
            config: json!({ "objective": obj }),
            seeds: BTreeMap::new(),
            inputs,
            summary,
        },
    )
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<RunManifest> {
    let obj = a.objective.resolve()?;
    let opts = AnalysisOptions {
        length_bins: a.length_bins,
        hist_bins: a.hist_bins,
    };
    let mut inputs = vec![a.policy.clone()];
    let reference = eval_reference(&obj, &a.reference, &mut inputs)?;
    let policy = load_policy(&a.policy)?;
    let held = read_data(&a.data, &policy)?;
    inputs.push(a.data.clone());
    let report = metrics::analyze(&obj, &policy, reference.as_ref(), &held, &opts)?;
    let mut dir = RunDir::create(&a.out)?;
    dir.write("report.json", &report.to_json())?;
    for (name, csv) in report.tables() {
        dir.write(&format!("tables/{name}"), &csv)?;
    }
    let summary = json!({
        "n": report.n,
        "reward_accuracy": report.reward_accuracy,
        "spearman_rho": report.spearman_rho,
    });
    finish(
        "analyze",
        serde_json::to_value(a)?,
        &dir,
        Finished {
            config: json!({ "objective": obj, "analysis": opts }),
            seeds: BTreeMap::new(),
            inputs,
            summary,
        },
    )
}

/// Writes the report and manifest even when the check fails; the error is
/// returned afterwards.
pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<RunManifest> {
    let kinds = match &a.kinds {
        Some(list) => list
            .split(',')
            .map(|k| k.trim().parse::<ObjectiveKind>())
            .collect::<Result<Vec<_>>>()?,
        None => ObjectiveKind::ALL.to_vec(),
    };
    let opts = GradCheckOptions {
        kinds,
        instances: a.instances,
        step: a.step,
        threshold: a.threshold,
        seed: a.seed,
        ..Default::default()
    };
    let report = gradcheck::run(&opts)?;
    eprint!("{}", report.summary());
    let mut dir = RunDir::create(&a.out)?;
    dir.write("report.json", &report.to_json())?;
    let m = finish(
        "gradcheck",
        serde_json::to_value(a)?,
        &dir,
        Finished {
            config: serde_json::to_value(&opts)?,
            seeds: BTreeMap::from([("seed".to_string(), a.seed)]),
            inputs: vec![],
            summary: json!({ "passed": report.passed }),
        },
    )?;
    report.into_result()?;
    Ok(m)
}

fn args_from<T: serde::de::DeserializeOwned>(m: &RunManifest) -> Result<T> {
    serde_json::from_value(m.args.clone()).map_err(|e| Error::Data {
        path: manifest::MANIFEST_FILE.to_string(),
        message: format!("args: {e}"),
    })
}

/// Re-runs the manifest's command into `out`.
pub fn run_manifest(m: &RunManifest, out: &Path) -> Result<RunManifest> {
    match m.command.as_str() {
        "generate" => cmd_generate(&GenerateArgs { out: out.into(), ..args_from(m)? }),
        "train" => cmd_train(&TrainArgs { out: out.into(), ..args_from(m)? }),
        "eval" => cmd_eval(&EvalArgs { out: out.into(), ..args_from(m)? }),
        "analyze" => cmd_analyze(&AnalyzeArgs { out: out.into(), ..args_from(m)? }),
        "gradcheck" => cmd_gradcheck(&GradcheckArgs { out: out.into(), ..args_from(m)? }),
        other => Err(Error::Data {
            path: manifest::MANIFEST_FILE.to_string(),
            message: format!("unknown command '{other}'"),
        }),
    }
}

pub fn cmd_replay(a: &ReplayArgs) -> Result<RunManifest> {
    let original = RunManifest::load(&a.manifest)?;
    original.verify_inputs()?;
    let again = run_manifest(&original, &a.out)?;
    original.compare_outputs(&again)?;
    eprintln!("replay: {} outputs identical", again.outputs.len());
    Ok(again)
}

pub fn execute(cli: Cli) -> Result<RunManifest> {
    if let Some(n) = cli.threads {
        // the pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Replay(a) => cmd_replay(&a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args(argv: Vec<OsString>) -> i32 {
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(m) => {
            println!("{}", m.summary);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
