//! Acceptance suite. Every criterion prints one `[PASS]`/`[FAIL]` line to
//! stderr (bypassing test capture) before asserting.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use rsd_core::backends::http::{
    CompletionEndpoint, HttpCompletionModel, HttpRewardModel, RetryPolicy, RewardEndpoint,
};
use rsd_core::backends::tabular::{ContextTable, SymbolSpec, TabularModel, TabularPrm, TabularWorld, WorldSpec};
use rsd_core::backends::{RewardScale, Sampling};
use rsd_core::engine::{decode_rsd, decode_sd, decode_single, Limits, RsdConfig, SingleConfig};
use rsd_core::harness::Backends;
use rsd_core::metrics::{delta_sweep, flops_of, trajectory_reward, FlopsOptions, SweepSettings};
use rsd_core::oracle::threshold_nu;
use rsd_core::rng::trajectory_seed;
use rsd_core::testing::{MockResponse, MockServer};
use rsd_core::types::{StepRecord, StopReason, TraceModels};
use rsd_core::verify::{self, CampaignReport, CampaignSettings};
use rsd_core::{DecodeTrace, ModelProfile, Origin, Prompt, Step, WeightingSpec};

const SEED: u64 = 20_250_101;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id}: {name}: {detail}");
}

fn worst(reports: &[CampaignReport], check: &str) -> f64 {
    reports
        .iter()
        .filter_map(|r| r.check(check))
        .map(|c| c.worst)
        .fold(0.0, f64::max)
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn reasoning_world() -> Arc<TabularWorld> {
    Arc::new(TabularWorld::load(&fixture("reasoning_world.json")).unwrap())
}

fn reasoning_prompts() -> Vec<Prompt> {
    std::fs::read_to_string(fixture("reasoning_dataset.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            Prompt::new(v["prompt"].as_str().unwrap()).unwrap()
        })
        .collect()
}

#[test]
fn criterion_1_mixture_identity() {
    let start = Instant::now();
    let settings = CampaignSettings {
        instances: 500,
        seed: SEED,
        sampled_instances: 500,
        trials: 100_000,
    };
    let rep = verify::mixture_campaign(&settings).unwrap();
    let elapsed = start.elapsed();
    let formula = rep.check("formula residual").unwrap();
    let nu = rep.check("nu residual").unwrap();
    let mass = rep.check("mass residual").unwrap();
    let tv = rep.check("sampled tv").unwrap();
    let pass = rep.instances >= 500
        && formula.worst <= 1e-12
        && nu.worst <= 1e-12
        && mass.worst <= 1e-12
        && tv.samples >= 500
        && tv.worst <= 0.01
        && elapsed <= Duration::from_secs(120);
    verdict(
        1,
        "mixture identity",
        pass,
        &format!(
            "{} instances, residual {:.1e}, nu residual {:.1e}, mass residual {:.1e}, max TV {:.4} over {} sampled x 1e5, {:.1?}",
            rep.instances, formula.worst, nu.worst, mass.worst, tv.worst, tv.samples, elapsed
        ),
    );
    assert!(pass, "{rep}");
}

#[test]
fn criterion_2_reward_dominance() {
    let start = Instant::now();
    let settings = CampaignSettings {
        instances: 1000,
        seed: SEED,
        sampled_instances: 0,
        trials: 0,
    };
    let reps = verify::dominance_campaign(&settings).unwrap();
    let elapsed = start.elapsed();
    let shortfall = worst(&reps, "dominance shortfall");
    let terms = worst(&reps, "term decomposition residual");
    let cov = worst(&reps, "covariance decomposition residual");
    let premises = worst(&reps, "premise violations");
    let pass = reps.len() == 4
        && reps.iter().all(|r| r.instances >= 1000)
        && shortfall <= 1e-12
        && terms <= 1e-12
        && cov <= 1e-12
        && premises == 0.0
        && elapsed <= Duration::from_secs(60);
    verdict(
        2,
        "reward dominance",
        pass,
        &format!(
            "4 variants x 1000 instances, shortfall {shortfall:.1e}, term residual {terms:.1e}, covariance residual {cov:.1e}, {elapsed:.1?}"
        ),
    );
    assert!(pass, "{}", reps.iter().map(|r| r.to_string()).collect::<String>());
}

#[test]
fn criterion_3_optimal_threshold() {
    let start = Instant::now();
    let settings = CampaignSettings {
        instances: 200,
        seed: SEED,
        sampled_instances: 0,
        trials: 0,
    };
    let rep = verify::threshold_campaign(&settings).unwrap();
    let elapsed = start.elapsed();
    let gap = rep.check("reward gap to brute force").unwrap().worst;
    let excess = rep.check("budget excess").unwrap().worst;
    let pass = rep.instances >= 200 && gap <= 1e-9 && excess <= 1e-12 && elapsed <= Duration::from_secs(300);
    verdict(
        3,
        "optimal threshold",
        pass,
        &format!("{} instances, max reward gap {gap:.1e}, max budget excess {excess:.1e}, {elapsed:.1?}", rep.instances),
    );
    assert!(pass, "{rep}");
}

fn same_decode(a: &DecodeTrace, b: &DecodeTrace) -> bool {
    a.records.len() == b.records.len()
        && a.final_text == b.final_text
        && a.stopped_by == b.stopped_by
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            x.step == y.step
                && x.origin == y.origin
                && x.draft_tokens == y.draft_tokens
                && x.target_tokens == y.target_tokens
        })
}

#[test]
fn criterion_4_reduction_identities() {
    let world = reasoning_world();
    let draft = TabularModel::new(Arc::clone(&world), Origin::Draft);
    let target = TabularModel::new(Arc::clone(&world), Origin::Target);
    let prm = TabularPrm::new(Arc::clone(&world));
    let rsd = |delta: f64, seed: u64| RsdConfig {
        weighting: WeightingSpec::BinaryStep { delta },
        sampling_draft: Sampling::ANCESTRAL,
        sampling_target: Sampling::ANCESTRAL,
        seed,
        ..RsdConfig::default()
    };
    let single = |seed: u64| SingleConfig {
        sampling: Sampling::ANCESTRAL,
        seed,
        ..SingleConfig::default()
    };
    let mut compared = 0;
    let mut draft_mismatch = 0;
    let mut target_mismatch = 0;
    for (p, prompt) in reasoning_prompts().iter().enumerate() {
        for rep in 0..50u64 {
            let seed = trajectory_seed(SEED, p as u64 * 1000 + rep);
            let all_in = decode_rsd(prompt, &draft, &target, &prm, &rsd(0.0, seed)).unwrap();
            let draft_only = decode_single(prompt, &draft, Origin::Draft, &single(seed)).unwrap();
            if !same_decode(&all_in, &draft_only) || all_in.target_tokens() != 0 {
                draft_mismatch += 1;
            }
            let all_out = decode_rsd(prompt, &draft, &target, &prm, &rsd(1.01, seed)).unwrap();
            let target_only = decode_single(prompt, &target, Origin::Target, &single(seed)).unwrap();
            let every_target = all_out.records.iter().all(|r| r.origin == Origin::Target);
            let same_steps = all_out.final_text == target_only.final_text
                && all_out.target_tokens() == target_only.target_tokens();
            if !(every_target && same_steps) {
                target_mismatch += 1;
            }
            compared += 1;
        }
    }
    let pass = draft_mismatch == 0 && target_mismatch == 0;
    verdict(
        4,
        "reduction identities",
        pass,
        &format!("{compared} seeded pairs each, delta=0 mismatches {draft_mismatch}, delta=1.01 mismatches {target_mismatch}"),
    );
    assert!(pass);
}

/// Long chains over non-terminal symbols, so rounds can use the full speculative length.
fn chain_world() -> Arc<TabularWorld> {
    let symbol = |s: &str, terminal| SymbolSpec {
        symbol: s.into(),
        terminal,
        tokens: None,
    };
    Arc::new(
        TabularWorld::new(WorldSpec {
            alphabet: vec![symbol("a", false), symbol("b", false), symbol("c", false), symbol("end", true)],
            contexts: vec![ContextTable {
                key: "*".into(),
                draft: vec![0.5, 0.3, 0.19, 0.01],
                target: vec![0.45, 0.35, 0.19, 0.01],
                reward: vec![0.5; 4],
            }],
            delimiter: "\n\n".into(),
            default_tokens: 1,
            reward_scale: RewardScale::UnitInterval,
        })
        .unwrap(),
    )
}

#[test]
fn criterion_5_sd_unbiased() {
    let start = Instant::now();
    let settings = CampaignSettings {
        instances: 50,
        seed: SEED,
        sampled_instances: 0,
        trials: 100_000,
    };
    let rep = verify::sd_campaign(&settings).unwrap();
    let tv = rep.check("tv to target").unwrap();

    let world = chain_world();
    let draft = TabularModel::new(Arc::clone(&world), Origin::Draft);
    let target = TabularModel::new(Arc::clone(&world), Origin::Target);
    let cfg = SingleConfig {
        sampling: Sampling::ANCESTRAL,
        limits: Limits {
            max_steps: 400,
            max_total_tokens: 1_000_000,
            ..Limits::default()
        },
        ..SingleConfig::default()
    };
    let mut max_proposed = 0;
    for seed in 0..200 {
        let out = decode_sd(&Prompt::new("chain").unwrap(), &draft, &target, 7, &cfg.with_seed(seed)).unwrap();
        max_proposed = max_proposed.max(out.rounds.iter().map(|r| r.proposed).max().unwrap_or(0));
    }
    let elapsed = start.elapsed();
    let pass = rep.instances >= 50 && tv.samples >= 50 && tv.worst <= 0.02 && max_proposed == 7;
    verdict(
        5,
        "speculative decoding unbiasedness",
        pass,
        &format!(
            "{} instances x 1e5 trials, max TV {:.4}, largest round {max_proposed} proposals (k_spec 7), {elapsed:.1?}",
            rep.instances, tv.worst
        ),
    );
    assert!(pass, "{rep}");
}

fn profiles() -> HashMap<String, ModelProfile> {
    [("draft", 1.5e9), ("target", 7e9), ("prm", 7e9)]
        .into_iter()
        .map(|(id, n)| (id.to_string(), ModelProfile::new(id, n).unwrap()))
        .collect()
}

fn synthetic_trace(rng: &mut ChaCha8Rng) -> DecodeTrace {
    let n = rng.gen_range(1..8);
    let records = (0..n)
        .map(|_| {
            let mut r = StepRecord::unscored(
                Step::new("x\n\n", false).unwrap(),
                if rng.gen() { Origin::Draft } else { Origin::Target },
                0,
                0,
            );
            r.draft_tokens = rng.gen_range(0..500);
            r.target_tokens = rng.gen_range(0..500);
            r.prm_calls = rng.gen_range(0..3);
            r
        })
        .collect();
    DecodeTrace {
        records,
        stopped_by: StopReason::Eos,
        final_text: String::new(),
        models: TraceModels {
            draft: Some("draft".into()),
            target: Some("target".into()),
            prm: Some("prm".into()),
        },
    }
}

#[test]
fn criterion_6_flops_accounting() {
    let mut golden_record = StepRecord::unscored(Step::new("x", true).unwrap(), Origin::Target, 0, 0);
    golden_record.draft_tokens = 100;
    golden_record.target_tokens = 20;
    golden_record.prm_calls = 18;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut golden = synthetic_trace(&mut rng);
    golden.records = vec![golden_record];
    let report = flops_of(&[golden], &profiles(), FlopsOptions::default()).unwrap();
    let golden_ok = report.total_flops == 8.32e11;

    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let traces: Vec<DecodeTrace> = (0..rng.gen_range(1..6)).map(|_| synthetic_trace(&mut rng)).collect();
        let k = rng.gen_range(2..6) as u64;
        let scaled: Vec<DecodeTrace> = traces
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for r in &mut t.records {
                    r.draft_tokens *= k;
                    r.target_tokens *= k;
                    r.prm_calls *= k;
                }
                t
            })
            .collect();
        let base = flops_of(&traces, &profiles(), FlopsOptions::default()).unwrap().total_flops;
        let big = flops_of(&scaled, &profiles(), FlopsOptions::default()).unwrap().total_flops;
        if base > 0.0 {
            worst_rel = worst_rel.max((big - k as f64 * base).abs() / (k as f64 * base));
        }
    }
    let pass = golden_ok && worst_rel <= 1e-12;
    verdict(
        6,
        "FLOPs accounting",
        pass,
        &format!("golden total {:e} (expected 8.32e11), linearity max relative error {worst_rel:.1e} over 200 trace sets", report.total_flops),
    );
    assert!(pass);
}

#[test]
fn criterion_7_delta_sweep() {
    let world = Arc::new(
        TabularWorld::single_step(
            vec![0.1, 0.15, 0.2, 0.25, 0.2, 0.1],
            vec![0.3, 0.2, 0.1, 0.1, 0.1, 0.2],
            vec![0.05, 0.3, 0.45, 0.6, 0.75, 0.95],
        )
        .unwrap(),
    );
    let backends = Backends {
        draft: Arc::new(TabularModel::new(Arc::clone(&world), Origin::Draft)),
        target: Arc::new(TabularModel::new(Arc::clone(&world), Origin::Target)),
        prm: Arc::new(TabularPrm::new(Arc::clone(&world))),
    };
    let template = RsdConfig {
        sampling_draft: Sampling::ANCESTRAL,
        sampling_target: Sampling::ANCESTRAL,
        seed: SEED,
        ..RsdConfig::default()
    };
    let deltas = [0.0, 0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 1.0, 1.01];
    let profiles = profiles();
    let points = delta_sweep(
        &[Prompt::new("sweep").unwrap()],
        &backends,
        &template,
        &deltas,
        SweepSettings {
            repeats: 100_000,
            concurrency: 1,
            flops: FlopsOptions::default(),
            profiles: &profiles,
        },
        None,
    )
    .unwrap();
    let mut worst = 0.0f64;
    let mut monotone = true;
    let mut prev = -1.0;
    let mut curve = Vec::new();
    for p in &points {
        let nu = threshold_nu(&world, "*", p.delta).unwrap();
        let measured = p.stats.target_invocation_rate;
        worst = worst.max((measured - nu).abs());
        monotone &= measured >= prev;
        prev = measured;
        curve.push(format!("{}:{measured:.3}", p.delta));
    }
    let pass = points.len() == deltas.len() && worst <= 0.01 && monotone;
    verdict(
        7,
        "delta sweep consistency",
        pass,
        &format!("max |rate - nu(delta)| {worst:.4} at 1e5 trajectories, monotone {monotone}, curve [{}]", curve.join(" ")),
    );
    assert!(pass);
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 3,
        base_backoff_ms: 1,
        timeout_ms: 5_000,
    }
}

/// Scripted run: accept, reject, accept, with three 5xx before the second score.
fn scripted_http_run() -> (DecodeTrace, usize, Vec<serde_json::Value>) {
    let server = MockServer::start();
    server.script(
        "/v1/completions",
        [
            MockResponse::completion("Let n = 2 + 2.\n\n", "stop", Some(8)),
            MockResponse::completion("So n = 5.\n\n", "stop", Some(6)),
            MockResponse::completion("So n = 4.\n\n", "stop", Some(6)),
            MockResponse::completion("The answer is \\boxed{4}.", "stop", Some(8)),
        ],
    );
    server.script(
        "/score",
        [
            MockResponse::reward(0.92),
            MockResponse::status(503),
            MockResponse::status(502),
            MockResponse::status(500),
            MockResponse::reward(0.12),
            MockResponse::reward(0.88),
        ],
    );
    let endpoint = |model: &str| CompletionEndpoint {
        base_url: server.base_url().to_string(),
        model: model.into(),
        id: None,
        eos: None,
        delimiter: "\n\n".into(),
    };
    let draft = HttpCompletionModel::new(endpoint("draft-1.5b"), fast_retry(), 2).unwrap();
    let target = HttpCompletionModel::new(endpoint("target-7b"), fast_retry(), 2).unwrap();
    let prm = HttpRewardModel::new(
        RewardEndpoint {
            url: server.url("/score"),
            id: "prm-7b".into(),
            scale: RewardScale::UnitInterval,
        },
        fast_retry(),
        2,
    )
    .unwrap();
    let cfg = RsdConfig {
        seed: SEED,
        ..RsdConfig::default()
    };
    let trace = decode_rsd(&Prompt::new("What is 2+2?").unwrap(), &draft, &target, &prm, &cfg).unwrap();
    let bodies = server.requests().into_iter().map(|r| json!({ "path": r.path, "body": r.body })).collect();
    (trace, server.request_count("/score"), bodies)
}

#[test]
fn criterion_8_http_integration() {
    let (a, score_requests, bodies_a) = scripted_http_run();
    let (b, _, bodies_b) = scripted_http_run();
    let origins: Vec<Origin> = a.records.iter().map(|r| r.origin).collect();
    let pattern_ok = origins == [Origin::Draft, Origin::Target, Origin::Draft]
        && a.final_text == "Let n = 2 + 2.\n\nSo n = 4.\n\nThe answer is \\boxed{4}."
        && a.stopped_by == StopReason::Eos;
    // Three scored steps, one of which needed three retries.
    let retries_ok = score_requests == 3 + 3;
    let reproducible = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap() && bodies_a == bodies_b;
    let pass = pattern_ok && retries_ok && reproducible;
    verdict(
        8,
        "HTTP integration",
        pass,
        &format!("origins {origins:?}, /score requests {score_requests} (3 steps + 3 retries), reproducible {reproducible}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_desk_benchmark() {
    let world = reasoning_world();
    let draft = TabularModel::new(Arc::clone(&world), Origin::Draft);
    let target = TabularModel::new(Arc::clone(&world), Origin::Target);
    let prm = TabularPrm::new(Arc::clone(&world));
    let prompts = reasoning_prompts();
    assert_eq!(prompts.len(), 20);

    let mut lines = Vec::new();
    let mut pass = true;
    for (label, sampling, repeats) in [("greedy", Sampling::GREEDY, 1u64), ("ancestral", Sampling::ANCESTRAL, 50)] {
        let rsd_cfg = RsdConfig {
            weighting: WeightingSpec::BinaryStep { delta: 0.7 },
            sampling_draft: sampling,
            sampling_target: sampling,
            ..RsdConfig::default()
        };
        let single_cfg = SingleConfig {
            sampling,
            ..SingleConfig::default()
        };
        let (mut r_rsd, mut r_draft, mut r_target) = (0.0, 0.0, 0.0);
        let (mut t_rsd, mut t_target) = (0u64, 0u64);
        let mut n = 0.0;
        for (p, prompt) in prompts.iter().enumerate() {
            for rep in 0..repeats {
                let seed = trajectory_seed(SEED, p as u64 * 1000 + rep);
                let rsd = decode_rsd(prompt, &draft, &target, &prm, &rsd_cfg.with_seed(seed)).unwrap();
                let d = decode_single(prompt, &draft, Origin::Draft, &single_cfg.with_seed(seed)).unwrap();
                let t = decode_single(prompt, &target, Origin::Target, &single_cfg.with_seed(seed)).unwrap();
                r_rsd += trajectory_reward(prompt, &rsd, &prm).unwrap();
                r_draft += trajectory_reward(prompt, &d, &prm).unwrap();
                r_target += trajectory_reward(prompt, &t, &prm).unwrap();
                t_rsd += rsd.target_tokens();
                t_target += t.target_tokens();
                n += 1.0;
            }
        }
        let ok = r_rsd / n >= r_draft / n && t_rsd < t_target;
        pass &= ok;
        lines.push(format!(
            "{label}: mean reward rsd {:.4} / draft {:.4} / target {:.4}, target tokens rsd {t_rsd} / target-only {t_target}",
            r_rsd / n,
            r_draft / n,
            r_target / n
        ));
    }
    verdict(9, "desk benchmark", pass, &lines.join("; "));
    assert!(pass);
}
