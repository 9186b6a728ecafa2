use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use reasontsc_core::llm::{
    CallContext, ChatMessage, HttpBackend, HttpConfig, LlmError, RetryPolicy, ScriptedBackend,
};
use reasontsc_core::prompts::Round;
use reasontsc_core::{ChatBackend, LlmClient};

struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen, handle)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn config(url: String, key_env: &str) -> HttpConfig {
    let mut c = HttpConfig::new(url);
    c.api_key_env = key_env.into();
    c.retry = RetryPolicy {
        max_attempts: 3,
        initial_delay_ms: 5,
        multiplier: 2.0,
        max_delay_ms: 20,
    };
    c
}

fn ctx() -> CallContext {
    CallContext::new("test:0", Round::Three)
}

#[test]
fn server_error_is_retried() {
    let (url, seen, h) = serve(vec![(500, "oops".into()), (429, "slow".into()), (200, ok_body("True Label: Category 2"))]);
    std::env::set_var("REASONTSC_TEST_KEY_RETRY", "sk-test");
    let backend = Arc::new(HttpBackend::new(config(url, "REASONTSC_TEST_KEY_RETRY")).unwrap());
    let client = LlmClient::new(backend.clone(), "gpt-x");
    let req = client.request(vec![ChatMessage::user("hello")]);
    let out = client.complete(&req, &ctx()).unwrap();
    h.join().unwrap();
    assert_eq!(out.text, "True Label: Category 2");
    assert_eq!(out.attempts, 3);
    assert_eq!(backend.call_count(), 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "gpt-x");
    assert_eq!(seen[0].body["temperature"], 0.2);
    assert_eq!(seen[0].body["messages"][0]["role"], "user");
    assert_eq!(seen[0].body["messages"][0]["content"], "hello");
}

#[test]
fn client_error_is_fatal() {
    let (url, seen, h) = serve(vec![(400, "bad request".into())]);
    let backend = Arc::new(HttpBackend::new(config(url, "REASONTSC_TEST_KEY_UNSET")).unwrap());
    let client = LlmClient::new(backend.clone(), "m");
    let err = client.complete(&client.request(vec![ChatMessage::user("x")]), &ctx()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, LlmError::Config(ref m) if m.contains("400")), "{err:?}");
    assert_eq!(backend.call_count(), 1);
    assert_eq!(seen.lock().unwrap()[0].auth, None);
}

#[test]
fn exhausted_retries_report_transport() {
    let (url, _, h) = serve(vec![(503, "a".into()), (503, "b".into()), (503, "c".into())]);
    let backend = Arc::new(HttpBackend::new(config(url, "REASONTSC_TEST_KEY_UNSET")).unwrap());
    let client = LlmClient::new(backend, "m");
    let err = client.complete(&client.request(vec![ChatMessage::user("x")]), &ctx()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, LlmError::Transport { attempts: 3, .. }), "{err:?}");
}

#[test]
fn malformed_body_is_fatal() {
    let (url, _, h) = serve(vec![(200, "{\"choices\": []}".into())]);
    let backend = Arc::new(HttpBackend::new(config(url, "REASONTSC_TEST_KEY_UNSET")).unwrap());
    let client = LlmClient::new(backend, "m");
    assert!(client.complete(&client.request(vec![ChatMessage::user("x")]), &ctx()).is_err());
    h.join().unwrap();
}

#[test]
fn budget_error_makes_no_call() {
    let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("x".into())));
    let client = LlmClient::new(backend.clone(), "m").with_token_cap(10);
    let req = client.request(vec![ChatMessage::user("word ".repeat(200))]);
    let err = client.complete(&req, &ctx()).unwrap_err();
    assert!(matches!(err, LlmError::Budget { cap: 10, .. }), "{err:?}");
    assert_eq!(backend.call_count(), 0);
}

#[test]
fn malformed_conversation_makes_no_call() {
    let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("x".into())));
    let client = LlmClient::new(backend.clone(), "m");
    let req = client.request(vec![ChatMessage::user("a"), ChatMessage::user("b")]);
    assert!(client.complete(&req, &ctx()).is_err());
    let req = client.request(vec![ChatMessage::user("a"), ChatMessage::assistant("b")]);
    assert!(client.complete(&req, &ctx()).is_err());
    assert_eq!(backend.call_count(), 0);
}
