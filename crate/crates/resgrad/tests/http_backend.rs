//! Wire-level tests for the HTTP backend against a local stub server: exact
//! request body shape, bearer-auth handling, usage fallback, and retry
//! behaviour, all without leaving the loopback interface.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use resgrad::backend::{count_tokens, Backend, ChatRequest, HttpBackend, HttpConfig, API_KEY_ENV};

/// One captured request: the raw head (request line + headers) and the body.
struct CapturedRequest {
    head: String,
    body: String,
}

/// Serves `responses` in order, one connection each, capturing every request.
/// Responses close the connection, so the client reconnects per attempt.
fn spawn_stub(responses: Vec<(u16, &'static str)>) -> (u16, mpsc::Receiver<CapturedRequest>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let port = listener.local_addr().unwrap().port();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = match listener.accept() {
                Ok(conn) => conn,
                Err(_) => return,
            };
            let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
            let mut head = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                    break;
                }
                head.push_str(&line);
            }
            let content_length = head
                .lines()
                .find_map(|line| {
                    let (name, value) = line.split_once(':')?;
                    if name.eq_ignore_ascii_case("content-length") {
                        value.trim().parse::<usize>().ok()
                    } else {
                        None
                    }
                })
                .unwrap_or(0);
            let mut body_bytes = vec![0u8; content_length];
            reader.read_exact(&mut body_bytes).expect("read body");
            let _ = tx.send(CapturedRequest {
                head,
                body: String::from_utf8(body_bytes).expect("utf-8 body"),
            });

            let reason = match status {
                200 => "OK",
                400 => "Bad Request",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                _ => "Status",
            };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(response.as_bytes());
            let _ = stream.flush();
        }
    });
    (port, rx)
}

fn backend_for(port: u16, max_attempts: u32) -> HttpBackend {
    HttpBackend::new(HttpConfig {
        base_url: format!("http://127.0.0.1:{port}/v1"),
        model: "stub-model".to_string(),
        max_attempts,
        base_backoff_ms: 0,
        timeout_ms: 5_000,
    })
    .expect("client builds")
}

fn request() -> ChatRequest {
    ChatRequest {
        model: String::new(),
        system: "system text".to_string(),
        user: "user text".to_string(),
        temperature: 0.25,
        max_new_tokens: 77,
    }
}

const OK_BODY: &str = r#"{"choices":[{"message":{"content":"All good."}}],"usage":{"prompt_tokens":12,"completion_tokens":5}}"#;

#[test]
fn request_body_matches_the_wire_contract_exactly() {
    let (port, rx) = spawn_stub(vec![(200, OK_BODY)]);
    let backend = backend_for(port, 1);

    let response = backend.complete(&request()).expect("stub accepts");
    assert_eq!(response.text, "All good.");
    assert_eq!(response.usage.prompt_tokens, 12);
    assert_eq!(response.usage.completion_tokens, 5);

    let captured = rx.recv().expect("one request served");
    let head = captured.head.to_ascii_lowercase();
    assert!(
        head.starts_with("post /v1/chat/completions http/1.1"),
        "unexpected request line in head: {head}"
    );
    assert!(head.contains("content-type: application/json"), "head: {head}");

    let body: serde_json::Value = serde_json::from_str(&captured.body).expect("json body");
    let object = body.as_object().expect("body is an object");
    let mut keys: Vec<&str> = object.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["max_tokens", "messages", "model", "temperature"]);

    assert_eq!(object["model"], "stub-model");
    assert_eq!(object["temperature"], 0.25);
    assert_eq!(object["max_tokens"], 77);

    let messages = object["messages"].as_array().expect("messages array");
    assert_eq!(messages.len(), 2);
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[0]["content"], "system text");
    assert_eq!(messages[1]["role"], "user");
    assert_eq!(messages[1]["content"], "user text");
    for message in messages {
        let mut keys: Vec<&str> =
            message.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["content", "role"]);
    }
}

#[test]
fn request_model_overrides_the_configured_default() {
    let (port, rx) = spawn_stub(vec![(200, OK_BODY)]);
    let backend = backend_for(port, 1);

    let mut req = request();
    req.model = "explicit-model".to_string();
    backend.complete(&req).expect("stub accepts");

    let captured = rx.recv().unwrap();
    let body: serde_json::Value = serde_json::from_str(&captured.body).unwrap();
    assert_eq!(body["model"], "explicit-model");
}

#[test]
fn missing_usage_block_falls_back_to_character_estimates() {
    let (port, _rx) = spawn_stub(vec![(200, r#"{"choices":[{"message":{"content":"abcdefgh"}}]}"#)]);
    let backend = backend_for(port, 1);

    let req = request();
    let response = backend.complete(&req).expect("stub accepts");
    assert_eq!(response.text, "abcdefgh");
    assert_eq!(response.usage.completion_tokens, count_tokens("abcdefgh"));
    assert_eq!(
        response.usage.prompt_tokens,
        count_tokens(&req.system) + count_tokens(&req.user)
    );
}

#[test]
fn rate_limits_are_retried_and_client_errors_are_not() {
    // 429 then success: the client must transparently retry.
    let (port, rx) = spawn_stub(vec![(429, "{}"), (200, OK_BODY)]);
    let backend = backend_for(port, 3);
    let response = backend.complete(&request()).expect("second attempt lands");
    assert_eq!(response.text, "All good.");
    assert!(rx.recv().is_ok(), "first attempt reached the server");
    assert!(rx.recv().is_ok(), "retry reached the server");

    // 400 is permanent: exactly one request, no retry.
    let (port, rx) = spawn_stub(vec![(400, "{}"), (200, OK_BODY)]);
    let backend = backend_for(port, 3);
    let err = backend.complete(&request()).expect_err("400 is terminal");
    assert!(!err.retryable, "client errors must be permanent: {err}");
    assert!(rx.recv().is_ok(), "the one attempt reached the server");
    assert!(
        rx.recv_timeout(std::time::Duration::from_millis(300)).is_err(),
        "no second attempt may be sent after a permanent error"
    );
}

#[test]
fn malformed_response_bodies_are_permanent_errors() {
    let (port, _rx) = spawn_stub(vec![(200, "this is not json")]);
    let backend = backend_for(port, 3);
    let err = backend.complete(&request()).expect_err("body must parse");
    assert!(!err.retryable, "malformed bodies are not transient: {err}");
}

#[test]
fn bearer_auth_comes_only_from_the_environment() {
    // The variable is process-global, so both halves live in one test: no
    // other test in this binary reads it, and none asserts its absence.
    std::env::remove_var(API_KEY_ENV);
    let (port, rx) = spawn_stub(vec![(200, OK_BODY)]);
    backend_for(port, 1).complete(&request()).expect("stub accepts");
    let head = rx.recv().unwrap().head.to_ascii_lowercase();
    assert!(!head.contains("authorization"), "no key set, no header: {head}");

    std::env::set_var(API_KEY_ENV, "sk-test-key");
    let (port, rx) = spawn_stub(vec![(200, OK_BODY)]);
    backend_for(port, 1).complete(&request()).expect("stub accepts");
    std::env::remove_var(API_KEY_ENV);
    let head = rx.recv().unwrap().head.to_ascii_lowercase();
    assert!(
        head.contains("authorization: bearer sk-test-key"),
        "key from the environment must be sent as a bearer token: {head}"
    );
}
