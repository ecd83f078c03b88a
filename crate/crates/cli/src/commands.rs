//! Subcommand implementations.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use rsd_core::engine::{
    boxed_answer, decode_best_of_n, decode_majority_voting, decode_process_best_of_n, decode_rsd,
    decode_sd, decode_single, BestOfNSelect,
};
use rsd_core::harness::{run_indexed, Backends};
use rsd_core::metrics::{
    delta_sweep, flops_of, sweep_csv, sweep_table, trajectory_reward, FlopsReport, RunStats,
    StatsAccumulator, SweepSettings,
};
use rsd_core::rng::trajectory_seed;
use rsd_core::verify::{self, CampaignSettings, Scope};
use rsd_core::{DecodeTrace, Prompt, StopReason};

use crate::config::{pick, Method, RunConfig};

/// One decode under the configured method.
struct MethodRun {
    chosen: DecodeTrace,
    /// Every trace whose cost was paid, including discarded candidates.
    all: Vec<DecodeTrace>,
    answer: Option<String>,
    detail: Value,
}

fn run_method(cfg: &RunConfig, b: &Backends, prompt: &Prompt, seed: u64) -> Result<MethodRun> {
    let plain = |chosen: DecodeTrace, detail: Value| MethodRun {
        answer: boxed_answer(&chosen.final_text),
        all: vec![chosen.clone()],
        chosen,
        detail,
    };
    Ok(match &cfg.method {
        Method::Rsd => plain(
            decode_rsd(prompt, b.draft.as_ref(), b.target.as_ref(), b.prm.as_ref(), &cfg.rsd_config(seed))?,
            Value::Null,
        ),
        Method::Single {
            model,
            temperature,
            top_p,
        } => plain(
            decode_single(prompt, pick(b, *model), model.origin(), &cfg.single_config(*temperature, *top_p, seed))?,
            Value::Null,
        ),
        Method::BestOfN {
            n,
            model,
            temperature,
            top_p,
        } => {
            let out = decode_best_of_n(
                prompt,
                pick(b, *model),
                model.origin(),
                b.prm.as_ref(),
                *n,
                BestOfNSelect::FinalStepReward,
                &cfg.single_config(*temperature, *top_p, seed),
            )?;
            let chosen = out.chosen_trace().clone();
            let failed = out.candidates.iter().filter(|c| c.is_err()).count();
            MethodRun {
                answer: boxed_answer(&chosen.final_text),
                all: out.candidates.into_iter().filter_map(Result::ok).collect(),
                chosen,
                detail: json!({ "chosen": out.chosen, "final_rewards": out.final_rewards, "failed_candidates": failed }),
            }
        }
        Method::Majority {
            n,
            model,
            temperature,
            top_p,
        } => {
            let out = decode_majority_voting(
                prompt,
                pick(b, *model),
                model.origin(),
                *n,
                &boxed_answer,
                &cfg.single_config(*temperature, *top_p, seed),
            )?;
            let chosen = out.samples[out.winner_index]
                .as_ref()
                .expect("winning sample succeeded")
                .clone();
            MethodRun {
                answer: Some(out.tally.winner.clone()),
                detail: json!({ "votes": out.tally.votes, "abstained": out.tally.abstained }),
                all: out.samples.into_iter().filter_map(Result::ok).collect(),
                chosen,
            }
        }
        Method::ProcessBestOfN {
            n_per_step,
            model,
            temperature,
            top_p,
        } => plain(
            decode_process_best_of_n(
                prompt,
                pick(b, *model),
                model.origin(),
                b.prm.as_ref(),
                *n_per_step,
                &cfg.single_config(*temperature, *top_p, seed),
            )?,
            Value::Null,
        ),
        Method::Sd { k_spec } => {
            let out = decode_sd(
                prompt,
                b.draft.as_ref(),
                b.target.as_ref(),
                *k_spec,
                &cfg.single_config(0.0, 1.0, seed),
            )?;
            let detail = json!({ "acceptance_rate": out.acceptance_rate(), "rounds": out.rounds.len() });
            plain(out.trace, detail)
        }
    })
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

pub fn decode(cfg: &RunConfig, prompt: &str) -> Result<ExitCode> {
    let prompt = Prompt::new(prompt)?;
    let backends = cfg.backends()?;
    let run = run_method(cfg, &backends, &prompt, cfg.seed)?;
    println!("{}", run.chosen.final_text);
    if let Some(path) = &cfg.output {
        let record = json!({
            "prompt": prompt.text(),
            "method": cfg.method.name(),
            "seed": cfg.seed,
            "answer": run.answer,
            "trace": run.chosen,
            "detail": run.detail,
        });
        let mut out = open_output(Some(path))?;
        writeln!(out, "{record}")?;
        out.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub answer: Option<String>,
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad dataset record", path.display(), i + 1))?;
        out.push(rec);
    }
    if out.is_empty() {
        bail!("dataset {} has no records", path.display());
    }
    Ok(out)
}

fn dataset(cfg: &RunConfig) -> Result<Vec<DatasetRecord>> {
    let path = cfg.dataset.as_ref().context("the config has no `dataset`")?;
    load_dataset(path)
}

fn grade(answer: Option<&str>, gold: Option<&str>) -> Option<bool> {
    gold.map(|g| answer.map(str::trim) == Some(g.trim()))
}

#[derive(Debug, Serialize)]
struct BenchRecord {
    id: String,
    method: &'static str,
    seed: u64,
    answer: Option<String>,
    gold: Option<String>,
    correct: Option<bool>,
    reward: Option<f64>,
    final_text: Option<String>,
    steps: usize,
    target_steps: usize,
    draft_tokens: u64,
    target_tokens: u64,
    prm_calls: u64,
    stopped_by: Option<StopReason>,
    detail: Value,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct BenchSummary {
    method: &'static str,
    seed: u64,
    prompts: usize,
    failures: Vec<Value>,
    stats: Option<RunStats>,
    flops: Option<FlopsReport>,
}

pub fn bench(cfg: &RunConfig) -> Result<ExitCode> {
    let records = dataset(cfg)?;
    let backends = cfg.backends()?;
    let profiles = cfg.model_profiles()?;
    let prompts: Vec<Prompt> = records
        .iter()
        .map(|r| Prompt::new(r.prompt.clone()).with_context(|| format!("record {}", r.id)))
        .collect::<Result<_>>()?;

    let runs = run_indexed(records.len(), cfg.concurrency, |i| {
        let seed = trajectory_seed(cfg.seed, i as u64);
        let run = run_method(cfg, &backends, &prompts[i], seed);
        let reward = match &run {
            Ok(r) if cfg.rescore => Some(trajectory_reward(&prompts[i], &r.chosen, backends.prm.as_ref())),
            _ => None,
        };
        (seed, run, reward)
    });

    let mut out = open_output(cfg.output.as_deref())?;
    let mut acc = StatsAccumulator::default();
    let mut paid: Vec<DecodeTrace> = Vec::new();
    let mut failures = Vec::new();
    for ((rec, (seed, run, reward)), _) in records.iter().zip(runs).zip(0..) {
        let line = match run {
            Ok(run) => {
                let reward = match reward {
                    Some(Ok(r)) => Some(r),
                    Some(Err(e)) => {
                        failures.push(json!({ "id": rec.id, "error": format!("rescoring: {e}") }));
                        None
                    }
                    None => None,
                };
                let correct = grade(run.answer.as_deref(), rec.answer.as_deref());
                acc.add(&run.chosen, reward, correct);
                let t = &run.chosen;
                let line = BenchRecord {
                    id: rec.id.clone(),
                    method: cfg.method.name(),
                    seed,
                    answer: run.answer.clone(),
                    gold: rec.answer.clone(),
                    correct,
                    reward,
                    final_text: Some(t.final_text.clone()),
                    steps: t.records.len(),
                    target_steps: t.target_steps(),
                    draft_tokens: t.draft_tokens(),
                    target_tokens: t.target_tokens(),
                    prm_calls: t.prm_calls(),
                    stopped_by: Some(t.stopped_by),
                    detail: run.detail,
                    error: None,
                };
                paid.extend(run.all);
                line
            }
            Err(e) => {
                let msg = format!("{e:#}");
                failures.push(json!({ "id": rec.id, "error": msg }));
                BenchRecord {
                    id: rec.id.clone(),
                    method: cfg.method.name(),
                    seed,
                    answer: None,
                    gold: rec.answer.clone(),
                    correct: None,
                    reward: None,
                    final_text: None,
                    steps: 0,
                    target_steps: 0,
                    draft_tokens: 0,
                    target_tokens: 0,
                    prm_calls: 0,
                    stopped_by: None,
                    detail: Value::Null,
                    error: Some(msg),
                }
            }
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;

    let stats = acc.finish().ok();
    let flops = match &profiles {
        Some(p) => Some(flops_of(&paid, p, cfg.flops_options())?),
        None => None,
    };
    let summary = BenchSummary {
        method: cfg.method.name(),
        seed: cfg.seed,
        prompts: records.len(),
        failures,
        stats,
        flops,
    };
    if let Some(path) = &cfg.output {
        let spath = summary_path(path);
        std::fs::write(&spath, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", spath.display()))?;
    }
    let table = summary_table(&summary);
    if cfg.output.is_some() {
        print!("{table}");
    } else {
        eprint!("{table}");
    }
    if summary.failures.len() == records.len() {
        eprintln!("error: every prompt failed");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn summary_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".summary.json");
    output.with_file_name(name)
}

fn summary_table(s: &BenchSummary) -> String {
    let mut t = format!("method {}  prompts {}  failures {}\n", s.method, s.prompts, s.failures.len());
    if let Some(st) = &s.stats {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        t += &format!(
            "accuracy {}  mean reward {}  accept rate {:.4}  draft-only {:.4}  mean steps {:.2}\n",
            opt(st.accuracy),
            opt(st.mean_reward),
            st.step_accept_rate,
            st.draft_only_solve_rate,
            st.mean_steps
        );
    }
    match &s.flops {
        Some(f) => {
            for (id, m) in &f.per_model {
                t += &format!("  {id:<16} tokens {:>10}  flops {:.4e}\n", m.tokens, m.flops);
            }
            t += &format!("  total flops {:.4e}\n", f.total_flops);
        }
        None => t += "  flops: no [profiles] configured\n",
    }
    for f in &s.failures {
        t += &format!("  failed {}: {}\n", f["id"].as_str().unwrap_or("?"), f["error"].as_str().unwrap_or(""));
    }
    t
}

pub fn verify(
    scope: Scope,
    instances: Option<usize>,
    trials: usize,
    seed: u64,
    output: Option<&Path>,
) -> Result<ExitCode> {
    let mut reports = Vec::new();
    for s in scope.expand() {
        let default = match s {
            Scope::Prop1 => 500,
            Scope::Prop2 => 1000,
            Scope::Prop3 => 200,
            _ => 50,
        };
        let n = instances.unwrap_or(default);
        let settings = CampaignSettings {
            trials,
            ..CampaignSettings::new(n, seed)
        };
        reports.extend(verify::run(s, &settings)?);
    }
    for r in &reports {
        print!("{r}");
    }
    if let Some(path) = output {
        let mut out = open_output(Some(path))?;
        for r in &reports {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        out.flush()?;
    }
    if reports.iter().any(|r| r.vacuous()) {
        eprintln!("warning: some campaigns ran 0 instances; their pass is vacuous");
    }
    if reports.iter().all(|r| r.passed()) {
        println!("verify: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verify: FAIL");
        Ok(ExitCode::from(1))
    }
}

pub fn parse_deltas(text: &str) -> Result<Vec<f64>> {
    let deltas: Vec<f64> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad delta `{s}`")))
        .collect::<Result<_>>()?;
    if deltas.is_empty() {
        bail!("no deltas given");
    }
    if let Some(d) = deltas.iter().find(|d| !d.is_finite()) {
        bail!("delta must be finite, got {d}");
    }
    Ok(deltas)
}

pub fn sweep(cfg: &RunConfig, deltas: &[f64], repeats: usize) -> Result<ExitCode> {
    let records = dataset(cfg)?;
    let backends = cfg.backends()?;
    let profiles = cfg
        .model_profiles()?
        .context("sweep reports FLOPs; add a [profiles] table with the parameter count of every model id")?;
    let prompts: Vec<Prompt> = records
        .iter()
        .map(|r| Prompt::new(r.prompt.clone()))
        .collect::<Result<_, _>>()?;
    let gold: Vec<Option<String>> = records.iter().map(|r| r.answer.clone()).collect();
    let grader = |i: usize, t: &DecodeTrace| grade(boxed_answer(&t.final_text).as_deref(), gold[i].as_deref());
    let mut template = cfg.rsd_config(cfg.seed);
    template.weighting = rsd_core::WeightingSpec::BinaryStep { delta: 0.7 };
    let points = delta_sweep(
        &prompts,
        &backends,
        &template,
        deltas,
        SweepSettings {
            repeats,
            concurrency: cfg.concurrency,
            flops: cfg.flops_options(),
            profiles: &profiles,
        },
        Some(&grader),
    )?;
    let csv = sweep_csv(&points);
    match &cfg.output {
        Some(path) => {
            std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            let jsonl = path.with_extension("jsonl");
            let mut out = open_output(Some(&jsonl))?;
            for p in &points {
                writeln!(out, "{}", serde_json::to_string(p)?)?;
            }
            out.flush()?;
            print!("{}", sweep_table(&points));
        }
        None => {
            print!("{csv}");
            eprint!("{}", sweep_table(&points));
        }
    }
    Ok(ExitCode::SUCCESS)
}
