//! Live-runner integration tests: mock-backend runs with full stage
//! accounting, and fixture-server runs covering retries, failures, and
//! health-check aborts.

mod common;

use std::time::Duration;

use dmoa::backend::{mock_transform, BackendSpec, HttpSpec, MockSpec};
use dmoa::dist::ServiceDist;
use dmoa::live::{run_live, LiveConfig, LiveError, LiveNodeConfig, LiveStatus, PromptEntry};
use dmoa::protocol::{MessageBundle, ProtocolParams};

use common::{FixtureServer, Script};

fn mock_node(id: usize) -> LiveNodeConfig {
    LiveNodeConfig {
        backend: BackendSpec::Mock(MockSpec {
            node: id,
            delay: ServiceDist::Deterministic { mean: 0.002 },
            seed: 1,
        }),
        temperature: 0.7,
        max_tokens: None,
    }
}

fn http_node(base_url: &str, timeout: f64, backoff_base: f64) -> LiveNodeConfig {
    LiveNodeConfig {
        backend: BackendSpec::Http(HttpSpec {
            base_url: Some(base_url.to_string()),
            model: "fixture-model".to_string(),
            timeout,
            backoff_base,
            ..HttpSpec::default()
        }),
        temperature: 0.7,
        max_tokens: None,
    }
}

#[test]
fn mock_run_accounts_every_stage_of_every_job() {
    const N: usize = 4;
    const K: u32 = 1;
    const M: u32 = 2;
    let stages_per_job = ((K + 1) * M + 1) as usize;

    let cfg = LiveConfig {
        params: ProtocolParams::new(N as u32, K, M).unwrap(),
        nodes: (0..N).map(mock_node).collect(),
        seed: 40,
        validate: true,
    };
    let prompts: Vec<PromptEntry> = (0..10)
        .map(|i| PromptEntry {
            origin: i % N,
            text: format!("prompt number {i}"),
        })
        .collect();
    let outcomes = run_live(&cfg, &prompts).unwrap();
    assert_eq!(outcomes.len(), 10);

    for (i, outcome) in outcomes.iter().enumerate() {
        assert_eq!(outcome.job, i as u64, "outcomes keep prompt order");
        assert_eq!(outcome.origin, i % N);
        assert_eq!(outcome.status, LiveStatus::Completed);
        assert_eq!(outcome.stages.len(), stages_per_job);

        let count = |label: &str| outcome.stages.iter().filter(|s| s.stage == label).count();
        assert_eq!(count("proposal-1"), (K + 1) as usize);
        assert_eq!(count("proposal-2"), (K + 1) as usize);
        assert_eq!(count("aggregation"), 1);

        let aggregation = outcome
            .stages
            .iter()
            .find(|s| s.stage == "aggregation")
            .unwrap();
        assert_eq!(
            aggregation.node, outcome.origin,
            "the origin aggregates its own job"
        );
        for stage in &outcome.stages {
            assert!(stage.inference_latency >= 0.002 * 0.9, "mock delay is wall-clock");
            assert!(
                stage.completed_at <= aggregation.completed_at,
                "aggregation finishes last"
            );
        }
        let latency = outcome.end_to_end_latency.unwrap();
        assert!(latency >= aggregation.inference_latency);
        let final_text = outcome.final_text.as_deref().unwrap();
        assert!(final_text.starts_with(&format!("MOCK[{}]:", outcome.origin)));
    }
}

#[test]
fn mock_direct_job_reproduces_the_seeded_digest() {
    let cfg = LiveConfig {
        params: ProtocolParams::new(2, 0, 0).unwrap(),
        nodes: (0..2).map(mock_node).collect(),
        seed: 7,
        validate: false,
    };
    let prompts = vec![PromptEntry {
        origin: 1,
        text: "single direct prompt".to_string(),
    }];
    let outcomes = run_live(&cfg, &prompts).unwrap();
    assert_eq!(outcomes[0].status, LiveStatus::Completed);
    let expected = mock_transform(
        1,
        &MessageBundle {
            system_text: None,
            user_text: "single direct prompt".to_string(),
        },
    );
    assert_eq!(outcomes[0].final_text.as_deref(), Some(expected.as_str()));
}

#[test]
fn one_failing_job_does_not_sink_the_others() {
    let server = FixtureServer::start();
    // Exactly one chat request anywhere in the run gets a non-retryable 400.
    server.push_script(Script::Status(400));

    let cfg = LiveConfig {
        params: ProtocolParams::new(2, 1, 1).unwrap(),
        nodes: vec![
            http_node(&server.base_url, 30.0, 0.01),
            http_node(&server.base_url, 30.0, 0.01),
        ],
        seed: 11,
        validate: false,
    };
    let prompts = vec![
        PromptEntry { origin: 0, text: "first".into() },
        PromptEntry { origin: 1, text: "second".into() },
    ];
    let outcomes = run_live(&cfg, &prompts).unwrap();
    assert_eq!(outcomes.len(), 2);

    let failed: Vec<_> = outcomes
        .iter()
        .filter(|o| matches!(o.status, LiveStatus::Failed { .. }))
        .collect();
    let completed: Vec<_> = outcomes
        .iter()
        .filter(|o| o.status == LiveStatus::Completed)
        .collect();
    assert_eq!(failed.len(), 1, "exactly the 400-struck job fails");
    assert_eq!(completed.len(), 1, "the other job still completes");

    match &failed[0].status {
        LiveStatus::Failed { stage, error, .. } => {
            assert_eq!(stage, "proposal-1");
            assert!(error.contains("400"), "error should carry the status: {error}");
        }
        _ => unreachable!(),
    }
    assert!(failed[0].final_text.is_none());
    assert!(failed[0].end_to_end_latency.is_none());
    assert_eq!(completed[0].stages.len(), 3);
}

#[test]
fn retryable_statuses_are_retried_transparently() {
    let server = FixtureServer::start();
    server.push_script(Script::Status(429));
    server.push_script(Script::Status(503));
    server.push_script(Script::Reply("recovered".to_string()));

    let cfg = LiveConfig {
        params: ProtocolParams::new(2, 0, 0).unwrap(),
        nodes: vec![
            http_node(&server.base_url, 30.0, 0.01),
            http_node(&server.base_url, 30.0, 0.01),
        ],
        seed: 2,
        validate: false,
    };
    let prompts = vec![PromptEntry { origin: 0, text: "retry me".into() }];
    let outcomes = run_live(&cfg, &prompts).unwrap();
    assert_eq!(outcomes[0].status, LiveStatus::Completed);
    assert_eq!(outcomes[0].final_text.as_deref(), Some("recovered"));
    assert_eq!(
        server.chat_requests().len(),
        3,
        "429 and 503 must each be retried"
    );
}

#[test]
fn timeouts_are_retried() {
    let server = FixtureServer::start();
    server.push_script(Script::Delay(
        Duration::from_secs(3),
        "too late".to_string(),
    ));

    let cfg = LiveConfig {
        params: ProtocolParams::new(2, 0, 0).unwrap(),
        nodes: vec![
            http_node(&server.base_url, 0.4, 0.01),
            http_node(&server.base_url, 0.4, 0.01),
        ],
        seed: 2,
        validate: false,
    };
    let prompts = vec![PromptEntry { origin: 1, text: "slow".into() }];
    let outcomes = run_live(&cfg, &prompts).unwrap();
    assert_eq!(outcomes[0].status, LiveStatus::Completed);
    assert!(outcomes[0]
        .final_text
        .as_deref()
        .unwrap()
        .starts_with("fixture-reply-"));
    assert_eq!(server.chat_requests().len(), 2, "timed-out call plus retry");
}

#[test]
fn unhealthy_backend_aborts_before_any_inference() {
    let server = FixtureServer::start();
    server.set_models_status(503);

    let cfg = LiveConfig {
        params: ProtocolParams::new(2, 1, 1).unwrap(),
        nodes: vec![
            http_node(&server.base_url, 5.0, 0.01),
            http_node(&server.base_url, 5.0, 0.01),
        ],
        seed: 2,
        validate: true,
    };
    let prompts = vec![PromptEntry { origin: 0, text: "never sent".into() }];
    let err = run_live(&cfg, &prompts).expect_err("validation must abort the run");
    assert!(matches!(err, LiveError::Unhealthy { .. }), "got: {err}");
    assert_eq!(server.chat_requests().len(), 0, "no inference may be issued");
}

#[test]
fn bad_origins_and_empty_prompt_sets_are_rejected() {
    let cfg = LiveConfig {
        params: ProtocolParams::new(2, 0, 0).unwrap(),
        nodes: (0..2).map(mock_node).collect(),
        seed: 1,
        validate: false,
    };
    let err = run_live(
        &cfg,
        &[PromptEntry { origin: 9, text: "out of range".into() }],
    )
    .expect_err("origin 9 does not exist");
    assert!(matches!(err, LiveError::BadOrigin { .. }), "got: {err}");

    let err = run_live(&cfg, &[]).expect_err("no prompts");
    assert!(matches!(err, LiveError::NoPrompts), "got: {err}");
}

#[test]
fn prompt_parsing_skips_comments_and_names_bad_lines() {
    use dmoa::live::parse_prompts;
    let good = "# comment\n0\tfirst prompt\n\n3\tsecond\tprompt with tab\n";
    let entries = parse_prompts(good.as_bytes()).unwrap();
    assert_eq!(
        entries,
        vec![
            PromptEntry { origin: 0, text: "first prompt".into() },
            PromptEntry { origin: 3, text: "second\tprompt with tab".into() },
        ]
    );

    for bad in ["no tab here", "x\tnon-numeric origin", "4\t"] {
        let err = parse_prompts(bad.as_bytes()).expect_err(bad);
        assert!(
            matches!(err, LiveError::BadPromptLine { .. }),
            "{bad}: {err}"
        );
    }
}
