use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use saeatlas_core::embed::{embed_text, RemoteEmbedder, RemoteEmbedderConfig};
use saeatlas_core::retrieval::{rewrite_query, QueryRewriter, RemoteRewriter, RemoteRewriterConfig};
use saeatlas_core::Error;
use serde_json::{json, Value};

struct Captured {
    request_line: String,
    headers: Vec<String>,
    body: Value,
}

/// Serves one canned response per entry of `replies`, then stops.
fn mock(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            tx.send(Captured {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            })
            .unwrap();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn embedder(endpoint: String, dim: usize, key: Option<&str>) -> RemoteEmbedder {
    RemoteEmbedder::new(RemoteEmbedderConfig {
        endpoint,
        model: "text-embedding-test".into(),
        dim,
        api_key_env: key.map(String::from),
        timeout_secs: 5,
    })
}

#[test]
fn remote_embedder_sends_model_and_dimension() {
    std::env::set_var("SAEATLAS_TEST_EMBED_KEY", "secret-1");
    let reply = json!({"data": [{"embedding": [3.0, 0.0, 4.0]}]}).to_string();
    let (url, rx) = mock(vec![(200, reply)]);
    let v = embed_text(&embedder(url, 3, Some("SAEATLAS_TEST_EMBED_KEY")), "gardens").unwrap();
    assert_eq!(v.len(), 3);
    let seen = rx.recv().unwrap();
    assert!(seen.request_line.starts_with("POST /v1/endpoint"));
    assert!(seen.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer secret-1")));
    assert_eq!(seen.body, json!({"model": "text-embedding-test", "input": "gardens", "dimensions": 3}));
}

#[test]
fn remote_embedder_failures_are_retryable() {
    let (url, _rx) = mock(vec![(503, "{}".into())]);
    let err = embed_text(&embedder(url, 3, None), "gardens").unwrap_err();
    assert!(matches!(err, Error::Remote(_)) && err.is_retryable(), "{err}");

    let (url, _rx) = mock(vec![(200, json!({"data": [{"embedding": [1.0, 2.0]}]}).to_string())]);
    assert!(matches!(embed_text(&embedder(url, 3, None), "gardens"), Err(Error::Shape { .. })));

    let missing = embedder("http://127.0.0.1:9/unused".into(), 3, Some("SAEATLAS_TEST_KEY_NOT_SET"));
    assert!(embed_text(&missing, "gardens").unwrap_err().is_retryable());
}

fn rewriter(endpoint: String) -> RemoteRewriter {
    RemoteRewriter::new(RemoteRewriterConfig {
        endpoint,
        model: "chat-test".into(),
        prompt_template: "Rewrite: {query}".into(),
        api_key_env: None,
        timeout_secs: 5,
    })
}

#[test]
fn remote_rewriter_fills_the_template() {
    let reply = json!({"choices": [{"message": {"role": "assistant", "content": "  words about plants  "}}]}).to_string();
    let (url, rx) = mock(vec![(200, reply)]);
    assert_eq!(rewriter(url).rewrite(" plants ").unwrap(), "words about plants");
    let seen = rx.recv().unwrap();
    assert_eq!(seen.body["model"], "chat-test");
    assert_eq!(seen.body["messages"][0]["content"], "Rewrite: plants");
}

#[test]
fn rewriter_failure_falls_back_to_raw_text() {
    let (url, _rx) = mock(vec![(500, "{}".into()), (200, json!({"choices": []}).to_string())]);
    let r = rewriter(url);
    assert_eq!(rewrite_query(&r, "plants ").unwrap(), "plants");
    assert_eq!(rewrite_query(&r, "plants").unwrap(), "plants");
    assert!(rewrite_query(&r, "  ").is_err());
}
