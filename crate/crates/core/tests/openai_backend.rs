use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cqr_core::lm_client::{
    CompletionRequest, GenerationParams, LmClient, LmError, OpenAiBackend, RetryPolicy,
    ScoreRequest,
};
use serde_json::Value;

struct Captured {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves the canned `(status, body)` replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line
                .split_whitespace()
                .nth(1)
                .unwrap_or_default()
                .to_string();
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (name, value) = h.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn client(base: &str) -> LmClient {
    let backend = OpenAiBackend::new(base, Some("secret".into()), Duration::from_secs(5)).unwrap();
    LmClient::new(Arc::new(backend)).with_retry(RetryPolicy::no_delay(3))
}

fn completion() -> CompletionRequest {
    CompletionRequest {
        model_ref: "m".into(),
        prompt: "hello".into(),
        params: GenerationParams::default().with_seed(4),
    }
}

fn chat(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
        .to_string()
}

#[test]
fn rate_limit_is_retried_then_succeeds() {
    let (base, seen) = serve(vec![(429, "{}".into()), (200, chat("a rewrite"))]);
    let c = client(&base);
    assert_eq!(c.complete(&completion()).unwrap(), "a rewrite");
    assert_eq!(c.retries(), 1);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].path, "/v1/chat/completions");
    assert_eq!(seen[1].auth.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[1].body["messages"][0]["content"], "hello");
    assert_eq!(seen[1].body["seed"], 4);
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let (base, _) = serve(vec![
        (503, "{}".into()),
        (503, "{}".into()),
        (503, "{}".into()),
    ]);
    match client(&base).complete(&completion()) {
        Err(LmError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unauthorized_is_not_retried() {
    let (base, seen) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let c = client(&base);
    assert!(matches!(
        c.complete(&completion()),
        Err(LmError::Credential(_))
    ));
    assert_eq!(c.retries(), 0);
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_reply_is_a_protocol_error() {
    let (base, _) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    assert!(matches!(
        client(&base).complete(&completion()),
        Err(LmError::Protocol(_))
    ));
}

#[test]
fn scoring_sums_continuation_logprobs() {
    // Context "ab" covers offsets 0..2; the continuation tokens start at 2.
    let body = serde_json::json!({"choices": [{"logprobs": {
        "tokens": ["a", "b", "c", "d"],
        "token_logprobs": [null, -1.0, -0.5, -0.25],
        "text_offset": [0, 1, 2, 3]
    }}]})
    .to_string();
    let (base, seen) = serve(vec![(200, body)]);
    let scored = client(&base)
        .score(&ScoreRequest {
            model_ref: "m".into(),
            context: "ab".into(),
            continuation: "cd".into(),
        })
        .unwrap();
    assert_eq!(scored.total_logprob, -0.75);
    assert_eq!(scored.token_count, 2);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/completions");
    assert_eq!(seen[0].body["prompt"], "abcd");
    assert_eq!(seen[0].body["echo"], true);
}

#[test]
fn missing_logprobs_is_a_capability_error() {
    let (base, _) = serve(vec![(
        200,
        r#"{"choices": [{"text": "x", "logprobs": null}]}"#.into(),
    )]);
    let r = client(&base).score(&ScoreRequest {
        model_ref: "m".into(),
        context: "a".into(),
        continuation: "b".into(),
    });
    assert!(matches!(r, Err(LmError::Capability(_))));
}
