use rsd_core::backends::http::{
    CompletionEndpoint, HttpCompletionModel, HttpRewardModel, RetryPolicy, RewardEndpoint,
};
use rsd_core::backends::{GenerationStop, RewardModel, RewardScale, Sampling, StepCaps, StepGenerator};
use rsd_core::engine::{decode_rsd, RsdConfig};
use rsd_core::rng;
use rsd_core::testing::{MockResponse, MockServer};
use rsd_core::{BackendError, Context, Origin, Prompt, RsdError, Step};
use serde_json::json;

const COMPLETIONS: &str = "/v1/completions";

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 3,
        base_backoff_ms: 1,
        timeout_ms: 5_000,
    }
}

fn model(server: &MockServer, name: &str) -> HttpCompletionModel {
    let endpoint = CompletionEndpoint {
        base_url: server.base_url().to_string(),
        model: name.into(),
        id: None,
        eos: None,
        delimiter: "\n\n".into(),
    };
    HttpCompletionModel::new(endpoint, fast_retry(), 4).unwrap()
}

fn prm(server: &MockServer, scale: RewardScale) -> HttpRewardModel {
    let endpoint = RewardEndpoint {
        url: server.url("/score"),
        id: "prm-7b".into(),
        scale,
    };
    HttpRewardModel::new(endpoint, fast_retry(), 4).unwrap()
}

fn ctx() -> Context {
    Context::new(Prompt::new("What is 2+2?").unwrap())
}

fn generate(m: &HttpCompletionModel) -> Result<rsd_core::backends::StepGeneration, BackendError> {
    let mut r = rng::stream(7, "gen:test");
    m.generate_step(&ctx(), &Sampling::GREEDY, &StepCaps::default(), &mut r)
}

#[test]
fn delimiter_terminated_step() {
    let server = MockServer::start();
    server.script(COMPLETIONS, [MockResponse::completion("step one\n\n", "stop", Some(3))]);
    let g = generate(&model(&server, "draft-1.5b")).unwrap();
    assert_eq!(g.step.text, "step one\n\n");
    assert!(!g.step.terminal);
    assert_eq!(g.stop_reason, GenerationStop::Delimiter);
    assert_eq!(g.token_count, 3);

    let req = &server.requests()[0];
    assert_eq!(req.body["model"], "draft-1.5b");
    assert_eq!(req.body["prompt"], "What is 2+2?");
    assert_eq!(req.body["stop"], json!(["\n\n"]));
    assert_eq!(req.body["include_stop_str_in_output"], true);
    assert_eq!(req.body["temperature"], 0.0);
    assert!(req.body["seed"].is_u64());
}

#[test]
fn word_count_when_usage_is_missing() {
    let server = MockServer::start();
    server.script(COMPLETIONS, [MockResponse::completion("step one\n\n", "stop", None)]);
    assert_eq!(generate(&model(&server, "m")).unwrap().token_count, 2);
}

#[test]
fn stripped_delimiter_is_restored() {
    let server = MockServer::start();
    server.script(
        COMPLETIONS,
        [MockResponse::json(json!({
            "choices": [{ "text": "x = 4", "finish_reason": "stop", "stop_reason": "\n\n" }],
        }))],
    );
    let g = generate(&model(&server, "m")).unwrap();
    assert_eq!(g.stop_reason, GenerationStop::Delimiter);
    assert_eq!(g.step.text, "x = 4\n\n");
}

#[test]
fn end_of_sequence_and_length_cap() {
    let server = MockServer::start();
    server.script(
        COMPLETIONS,
        [
            MockResponse::completion("The answer is 4.", "stop", Some(5)),
            MockResponse::completion("a very long", "length", Some(512)),
        ],
    );
    let m = model(&server, "m");
    let eos = generate(&m).unwrap();
    assert!(eos.step.terminal);
    assert_eq!(eos.stop_reason, GenerationStop::Eos);
    let capped = generate(&m).unwrap();
    assert_eq!(capped.stop_reason, GenerationStop::LengthCap);
    assert!(!capped.step.terminal);
}

#[test]
fn empty_completion_is_an_error() {
    let server = MockServer::start();
    server.script(COMPLETIONS, [MockResponse::completion("", "stop", Some(0))]);
    assert!(matches!(generate(&model(&server, "m")), Err(BackendError::EmptyGeneration)));
}

#[test]
fn rewards_and_scales() {
    let server = MockServer::start();
    server.script(
        "/score",
        [MockResponse::reward(0.73), MockResponse::reward(-2.4), MockResponse::reward(-2.4)],
    );
    let step = Step::new("step one\n\n", false).unwrap();
    let unit = prm(&server, RewardScale::UnitInterval);
    assert_eq!(unit.score_step(&ctx(), &step).unwrap().value, 0.73);
    let req = &server.requests()[0];
    assert_eq!(req.body, json!({ "context": "What is 2+2?", "step": "step one\n\n" }));

    let orm = prm(&server, RewardScale::Unbounded);
    assert_eq!(orm.score_step(&ctx(), &step).unwrap().value, -2.4);
    assert!(matches!(
        unit.score_step(&ctx(), &step),
        Err(BackendError::RewardOutOfScale { .. })
    ));
}

#[test]
fn server_errors_are_retried_three_times() {
    let server = MockServer::start();
    server.script(
        "/score",
        [
            MockResponse::status(503),
            MockResponse::status(502),
            MockResponse::status(500),
            MockResponse::reward(0.5),
        ],
    );
    let step = Step::new("s\n\n", false).unwrap();
    let p = prm(&server, RewardScale::UnitInterval);
    assert_eq!(p.score_step(&ctx(), &step).unwrap().value, 0.5);
    assert_eq!(server.request_count("/score"), 4);

    let down = MockServer::start();
    down.fallback("/score", MockResponse::status(503));
    let p = prm(&down, RewardScale::UnitInterval);
    match p.score_step(&ctx(), &step) {
        Err(BackendError::Status { status, .. }) => assert_eq!(status, 503),
        other => panic!("expected a status error, got {other:?}"),
    }
    assert_eq!(down.request_count("/score"), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start();
    server.fallback("/score", MockResponse::status(422));
    let step = Step::new("s\n\n", false).unwrap();
    assert!(prm(&server, RewardScale::UnitInterval).score_step(&ctx(), &step).is_err());
    assert_eq!(server.request_count("/score"), 1);
}

#[test]
fn unreachable_server_names_the_endpoint() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    drop(listener);
    let p = HttpRewardModel::new(
        RewardEndpoint {
            url: url.clone(),
            id: "prm".into(),
            scale: RewardScale::UnitInterval,
        },
        RetryPolicy {
            max_retries: 0,
            ..fast_retry()
        },
        1,
    )
    .unwrap();
    match p.score_step(&ctx(), &Step::new("s", true).unwrap()) {
        Err(BackendError::Transport { endpoint, .. }) => assert_eq!(endpoint, url),
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn echo_logprob_sums_step_tokens() {
    let server = MockServer::start();
    // Prompt "What is 2+2?" is 12 bytes; the step starts at offset 12.
    server.script(
        COMPLETIONS,
        [MockResponse::json(json!({
            "choices": [{
                "text": "What is 2+2? 4\n\n",
                "logprobs": {
                    "text_offset": [0, 4, 7, 12, 14, 16],
                    "token_logprobs": [null, -1.0, -2.0, -0.5, -0.25, -9.0],
                },
            }],
        }))],
    );
    let m = model(&server, "m");
    let lp = m
        .step_logprob(&ctx(), &Step::new(" 4\n\n", false).unwrap())
        .unwrap()
        .unwrap();
    assert_eq!(lp, -0.75);
    assert_eq!(server.requests()[0].body["echo"], true);
}

/// Draft proposes three steps; the PRM rejects the second.
fn scripted_run() -> (rsd_core::DecodeTrace, Vec<serde_json::Value>) {
    let server = MockServer::start();
    server.script(
        COMPLETIONS,
        [
            MockResponse::completion("2 plus 2\n\n", "stop", Some(4)),
            MockResponse::completion("equals 5\n\n", "stop", Some(3)),
            MockResponse::completion("equals 4\n\n", "stop", Some(3)),
            MockResponse::completion("The answer is \\boxed{4}.", "stop", Some(6)),
        ],
    );
    server.script(
        "/score",
        [MockResponse::reward(0.9), MockResponse::reward(0.1), MockResponse::reward(0.8)],
    );
    let draft = model(&server, "draft-1.5b");
    let target = model(&server, "target-7b");
    let reward = prm(&server, RewardScale::UnitInterval);
    let cfg = RsdConfig {
        seed: 99,
        ..RsdConfig::default()
    };
    let trace = decode_rsd(&Prompt::new("What is 2+2?").unwrap(), &draft, &target, &reward, &cfg).unwrap();
    let bodies = server.requests().into_iter().map(|r| r.body).collect();
    (trace, bodies)
}

#[test]
fn scripted_accept_and_reject() {
    let (trace, bodies) = scripted_run();
    let origins: Vec<Origin> = trace.records.iter().map(|r| r.origin).collect();
    assert_eq!(origins, vec![Origin::Draft, Origin::Target, Origin::Draft]);
    assert_eq!(trace.final_text, "2 plus 2\n\nequals 4\n\nThe answer is \\boxed{4}.");
    assert_eq!(trace.records[1].draft_candidate.as_ref().unwrap().text, "equals 5\n\n");
    assert_eq!(trace.draft_tokens(), 4 + 3 + 6);
    assert_eq!(trace.target_tokens(), 3);
    assert_eq!(trace.prm_calls(), 3);
    assert_eq!(trace.models.target.as_deref(), Some("target-7b"));
    // The target regenerates from the context without the rejected step.
    let target_req = bodies.iter().find(|b| b["model"] == "target-7b").unwrap();
    assert_eq!(target_req["prompt"], "What is 2+2?2 plus 2\n\n");
}

#[test]
fn scripted_runs_are_bit_reproducible() {
    let (a, req_a) = scripted_run();
    let (b, req_b) = scripted_run();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(req_a, req_b);
}

#[test]
fn missing_prm_aborts_with_partial_trace() {
    let server = MockServer::start();
    server.fallback(COMPLETIONS, MockResponse::completion("step\n\n", "stop", Some(1)));
    let draft = model(&server, "d");
    let target = model(&server, "t");
    let reward = HttpRewardModel::new(
        RewardEndpoint {
            url: server.url("/missing"),
            id: "prm".into(),
            scale: RewardScale::UnitInterval,
        },
        fast_retry(),
        1,
    )
    .unwrap();
    let err = decode_rsd(&Prompt::new("q").unwrap(), &draft, &target, &reward, &RsdConfig::default())
        .unwrap_err();
    assert!(err.partial.is_empty());
    assert!(matches!(err.cause, RsdError::Backend(BackendError::Status { status: 500, .. })));
    assert!(err.to_string().contains("/missing"));
}
