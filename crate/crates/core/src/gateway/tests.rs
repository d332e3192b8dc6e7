use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use proptest::prelude::*;

use super::*;
use crate::document::ElementKind;

fn script(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("script.json");
    std::fs::write(&path, json).unwrap();
    path
}

fn gateway() -> Gateway {
    Gateway::new(Arc::new(LogicalClock::default()))
}

fn stub_profile(dir: &Path, json: &str, ctx: u64, out: u64) -> BackendProfile {
    BackendProfile::stub("stub", &script(dir, json), ctx, out)
}

#[test]
fn stub_session_starts_empty_and_ids_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stub_profile(dir.path(), "[]", 8_192, 4_096);
    let mut gw = gateway();
    let a = gw.open_session(&profile, "extract").unwrap();
    let b = gw.open_session(&profile, "extract").unwrap();
    assert_eq!(a.transcript().records.len(), 0);
    assert_ne!(a.id(), b.id());
}

#[test]
fn profile_with_output_above_context_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stub_profile(dir.path(), "[]", 100, 200);
    assert!(matches!(gateway().open_session(&profile, "x"), Err(GatewayError::RejectedProfile(_))));
    let mut zero = stub_profile(dir.path(), "[]", 100, 0);
    zero.max_output_tokens = 0;
    assert!(zero.validate().is_err());
}

#[test]
fn scripted_reply_is_returned_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let reply = r#"{"sub_domain": "Traffic Engineering"}"#;
    let json = serde_json::to_string(&serde_json::json!([{"match": "Q1", "reply": reply}])).unwrap();
    let profile = stub_profile(dir.path(), &json, 8_192, 4_096);
    let mut s = gateway().open_session(&profile, "extract").unwrap();
    let prompt = RenderedPrompt::handcrafted("Q1: which sub-domain?");
    assert_eq!(s.send(&prompt, Origin::Automatic).unwrap(), reply);
    let r = &s.transcript().records[0];
    assert_eq!(r.origin, Origin::Automatic);
    assert_eq!(r.response_text, reply);
    assert_eq!(r.stage, "extract");
}

#[test]
fn over_budget_prompt_is_rejected_without_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stub_profile(dir.path(), r#"[{"regex": ".", "reply": "ok", "repeat": true}]"#, 100, 50);
    let mut gw = gateway().with_preamble("");
    let mut s = gw.open_session(&profile, "x").unwrap();
    let err = s.send(&RenderedPrompt::handcrafted("a".repeat(404)), Origin::Automatic).unwrap_err();
    assert!(matches!(err, GatewayError::BudgetExceeded { estimate: 101, limit: 100 }), "{err:?}");
    assert!(s.transcript().records.is_empty());
    s.send(&RenderedPrompt::handcrafted("a".repeat(400)), Origin::Automatic).unwrap();
    assert_eq!(s.transcript().records.len(), 1);
}

#[test]
fn human_origin_is_recorded_and_indices_are_gapless() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stub_profile(dir.path(), r#"[{"regex": ".", "reply": "ok", "repeat": true}]"#, 8_192, 4_096);
    let mut s = gateway().open_session(&profile, "repair").unwrap();
    s.send(&RenderedPrompt::handcrafted("a"), Origin::Automatic).unwrap();
    s.send(&RenderedPrompt::handcrafted("b"), Origin::Human).unwrap();
    s.send(&RenderedPrompt::handcrafted("c"), Origin::Automatic).unwrap();
    let t = s.transcript();
    assert_eq!(t.records.iter().map(|r| r.index).collect::<Vec<_>>(), [0, 1, 2]);
    assert_eq!(t.records[1].origin, Origin::Human);
    assert_eq!(t.count(Origin::Automatic) + t.count(Origin::Human), 3);
}

#[test]
fn export_round_trips_and_reports_unwritable_paths() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stub_profile(dir.path(), r#"[{"regex": ".", "reply": "line1\nline2", "repeat": true}]"#, 8_192, 4_096);
    let mut s = gateway().open_session(&profile, "x").unwrap();
    s.send(&RenderedPrompt::handcrafted("q"), Origin::Automatic).unwrap();
    let path = dir.path().join("t.jsonl");
    s.export_transcript(&path).unwrap();
    assert_eq!(&Transcript::load(&path).unwrap(), s.transcript());
    let bad = dir.path().join("missing-dir/t.jsonl");
    assert!(matches!(s.export_transcript(&bad), Err(GatewayError::Io(_))));
}

#[test]
fn unmatched_prompt_exhausts_the_stub() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stub_profile(dir.path(), r#"[{"match": "yes", "reply": "ok"}]"#, 8_192, 4_096);
    let mut s = gateway().open_session(&profile, "x").unwrap();
    assert!(matches!(
        s.send(&RenderedPrompt::handcrafted("no"), Origin::Automatic),
        Err(GatewayError::StubExhausted { .. })
    ));
    assert!(s.transcript().records.is_empty());
}

#[test]
fn estimator_examples() {
    assert_eq!(estimate_tokens(""), 0);
    assert_eq!(estimate_tokens(&"x".repeat(400)), 100);
    assert_eq!(estimate_tokens("abcde"), 2);
}

proptest! {
    #[test]
    fn estimator_is_monotone(s in ".{0,200}", t in ".{0,200}") {
        let joined = format!("{s}{t}");
        prop_assert!(estimate_tokens(&joined) >= estimate_tokens(&s));
    }
}

/// Records what the backend was asked.
struct Echo(Arc<Mutex<Vec<Vec<Message>>>>);

impl Backend for Echo {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        self.0.lock().unwrap().push(req.messages.to_vec());
        Ok("r".repeat(40))
    }
}

#[test]
fn context_keeps_newest_turns_within_budget() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let mut gw = gateway().with_preamble("");
    gw.insert_backend("echo", Arc::new(Mutex::new(Echo(seen.clone()))));
    let mut profile = BackendProfile::known_model("gpt-4", "https://example.invalid/v1").unwrap();
    profile.name = "echo".into();
    // 10 tokens of history budget per turn pair: prompt 40 chars + reply 40 chars = 20 tokens
    profile.max_context_tokens = 60;
    profile.max_output_tokens = 10;
    let mut s = gw.open_session(&profile, "x").unwrap();
    for i in 0..4 {
        s.send(&RenderedPrompt::handcrafted(format!("{i}").repeat(40)), Origin::Automatic).unwrap();
    }
    let calls = seen.lock().unwrap();
    let last = calls.last().unwrap();
    // budget 60 - 10 output - 10 for the prompt leaves 40: two prior turns fit
    let users: Vec<_> = last.iter().filter(|m| m.role == Role::User).map(|m| &m.content[..1]).collect();
    assert_eq!(users, ["1", "2", "3"]);
    assert_eq!(last[0].role, Role::System);
    assert!(s.transcript().records.iter().all(|r| r.tokens_in <= 60));
}

#[test]
fn captions_replace_attachments_for_text_only_backends() {
    let dir = tempfile::tempdir().unwrap();
    let profile = stub_profile(dir.path(), r#"[{"match": "[FIGURE fig1] Throughput", "reply": "ok"}]"#, 8_192, 4_096);
    let mut s = gateway().open_session(&profile, "x").unwrap();
    let prompt = RenderedPrompt::handcrafted("look").with_attachments(vec![AttachmentRef {
        id: "fig1".into(),
        kind: ElementKind::Figure,
        caption: "Throughput over time".into(),
        path: dir.path().join("fig1.png"),
    }]);
    s.send(&prompt, Origin::Automatic).unwrap();
    let r = &s.transcript().records[0];
    assert!(r.substituted_attachments);
    assert_eq!(r.attachments, ["fig1"]);
}

#[test]
fn identical_runs_give_identical_transcripts() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"[{"match": "a", "reply": "1"}, {"match": "b", "reply": "2"}]"#;
        let profile = stub_profile(dir.path(), json, 8_192, 4_096);
        let mut s = gateway().open_session(&profile, "x").unwrap();
        s.send(&RenderedPrompt::handcrafted("a"), Origin::Automatic).unwrap();
        s.send(&RenderedPrompt::handcrafted("b"), Origin::Human).unwrap();
        s.transcript().to_jsonl()
    };
    assert_eq!(run(), run());
}

#[test]
fn sink_receives_every_update_and_state_restores_stub_progress() {
    let dir = tempfile::tempdir().unwrap();
    let json = r#"[{"match": "q", "reply": "1"}, {"match": "q", "reply": "2"}]"#;
    let profile = stub_profile(dir.path(), json, 8_192, 4_096);
    let out = dir.path().join("transcripts");
    let mut gw = gateway().with_sink(Arc::new(DirSink(out.clone())));
    let mut s = gw.open_session(&profile, "x").unwrap();
    s.send(&RenderedPrompt::handcrafted("q"), Origin::Automatic).unwrap();
    let saved = Transcript::load(&out.join("x-0.jsonl")).unwrap();
    assert_eq!(saved.records.len(), 1);

    let state = gw.state();
    assert_eq!(state.next_session, 1);
    let mut fresh = gateway();
    fresh.restore(&state);
    let mut s2 = fresh.open_session(&profile, "x").unwrap();
    assert_eq!(s2.id(), "x-1");
    assert_eq!(s2.send(&RenderedPrompt::handcrafted("q"), Origin::Automatic).unwrap(), "2");
}

/// Serves the given HTTP responses in order, one per connection.
fn mock_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn remote_backend_retries_once_on_server_error() {
    let ok = r#"{"choices": [{"message": {"role": "assistant", "content": "hello"}}]}"#.to_string();
    let (url, server) = mock_server(vec![(503, "busy".into()), (200, ok)]);
    let mut backend = RemoteBackend::new(&url, "gpt-4", Some("k".into()), Duration::from_secs(5))
        .with_retry_backoff(Duration::from_millis(10));
    let messages = [Message::new(Role::User, "hi")];
    let req = CompletionRequest {
        messages: &messages,
        attachments: &[],
        max_output_tokens: 16,
        temperature: Some(0.0),
        seed: Some(7),
    };
    assert_eq!(backend.complete(&req).unwrap(), "hello");
    let bodies = server.join().unwrap();
    let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(sent["model"], "gpt-4");
    assert_eq!(sent["max_tokens"], 16);
    assert_eq!(sent["seed"], 7);
    assert_eq!(sent["messages"][0]["content"], "hi");
}

#[test]
fn remote_backend_reports_client_errors_and_unreachable_hosts() {
    let (url, server) = mock_server(vec![(401, "denied".into())]);
    let mut backend = RemoteBackend::new(&url, "m", None, Duration::from_secs(5));
    let messages = [Message::new(Role::User, "hi")];
    let req = CompletionRequest {
        messages: &messages,
        attachments: &[],
        max_output_tokens: 16,
        temperature: None,
        seed: None,
    };
    assert!(matches!(backend.complete(&req), Err(GatewayError::BackendError { status: Some(401), .. })));
    server.join().unwrap();

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut gone = RemoteBackend::new(&format!("http://127.0.0.1:{port}/v1"), "m", None, Duration::from_secs(5));
    assert!(matches!(gone.complete(&req), Err(GatewayError::BackendUnreachable(_))));
}

#[test]
fn known_profiles_carry_published_limits() {
    let gpt4 = BackendProfile::known_model("gpt-4", "https://x").unwrap();
    assert_eq!((gpt4.max_context_tokens, gpt4.max_output_tokens), (8_192, 4_096));
    let claude = BackendProfile::known_model("claude-3.5-sonnet", "https://x").unwrap();
    assert_eq!((claude.max_context_tokens, claude.max_output_tokens), (200_000, 8_192));
    assert!(gpt4.validate().is_ok());
}
