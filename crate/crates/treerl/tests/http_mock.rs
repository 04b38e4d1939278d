//! The completions client against a scripted local server.

use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use treerl::gentree::{Prompt, TokenRecord};
use treerl::policy::{BackendError, FinishReason, GenParams, GradeError, HttpBackend, HttpConfig, HttpErrorKind, PolicyBackend};
use treerl::search::{eptree_search, SearchConfig};

type Script = Box<dyn Fn(usize, &Value) -> (u16, String) + Send>;

struct Mock {
    url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
    handle: Option<JoinHandle<()>>,
}

/// Serve `max_requests` requests, answering each with `script(index, body)`.
fn serve(max_requests: usize, script: Script) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    let handle = std::thread::spawn(move || {
        for (i, stream) in listener.incoming().take(max_requests).enumerate() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
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
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let (status, text) = script(i, &body);
            seen.lock().unwrap().push(body);
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    Mock { url, bodies, handle: Some(handle) }
}

impl Mock {
    fn backend(&self, max_attempts: u32) -> HttpBackend {
        HttpBackend::new(HttpConfig {
            endpoint: self.url.clone(),
            max_attempts,
            backoff_ms: 1,
            timeout_secs: 10.0,
            api_key_env: "TREERL_TEST_UNSET_KEY".into(),
            ..HttpConfig::default()
        })
        .unwrap()
    }

    fn finish(mut self) -> Vec<Value> {
        self.handle.take().unwrap().join().unwrap();
        self.bodies.lock().unwrap().clone()
    }
}

fn completion(tokens: &[&str], logprobs: &[f64], finish: &str) -> String {
    json!({
        "choices": [{
            "text": tokens.concat(),
            "finish_reason": finish,
            "logprobs": { "tokens": tokens, "token_logprobs": logprobs },
        }]
    })
    .to_string()
}

fn prompt() -> Prompt {
    Prompt { id: "q0".into(), tokens: vec![], text: "Q: 2+2=".into() }
}

fn params(seed: u64) -> GenParams {
    GenParams { max_new_tokens: 64, seed, ..GenParams::http() }
}

#[test]
fn server_errors_are_retried() {
    let mock = serve(
        2,
        Box::new(|i, _| match i {
            0 => (503, "busy".into()),
            _ => (200, completion(&[" 4", "."], &[-0.1, -2.0], "stop")),
        }),
    );
    let c = mock.backend(3).sample_continuation(&prompt(), &[], &params(5)).unwrap();
    assert_eq!(c.tokens.len(), 2);
    assert_eq!(c.tokens[1].surprisal, 2.0);
    assert_eq!(c.finish_reason, FinishReason::EndToken);
    let bodies = mock.finish();
    assert_eq!(bodies.len(), 2);
    assert_eq!(bodies[0], bodies[1]);
    assert_eq!(bodies[0]["logprobs"], 1);
    assert_eq!(bodies[0]["seed"], 5);
    assert_eq!(bodies[0]["prompt"], "Q: 2+2=");
}

#[test]
fn retries_give_up_after_max_attempts() {
    let mock = serve(3, Box::new(|_, _| (500, "down".into())));
    let e = mock.backend(3).sample_continuation(&prompt(), &[], &params(0)).unwrap_err();
    assert!(matches!(e, BackendError::Http { kind: HttpErrorKind::Status, .. }), "{e}");
    assert_eq!(mock.finish().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = serve(1, Box::new(|_, _| (400, "bad request".into())));
    let e = mock.backend(3).sample_continuation(&prompt(), &[], &params(0)).unwrap_err();
    assert!(matches!(e, BackendError::Http { kind: HttpErrorKind::Status, .. }));
    assert_eq!(mock.finish().len(), 1);
}

#[test]
fn missing_logprobs_is_reported() {
    let mock = serve(
        1,
        Box::new(|_, _| (200, json!({"choices":[{"text":" 4","finish_reason":"stop","logprobs":null}]}).to_string())),
    );
    let e = mock.backend(3).sample_continuation(&prompt(), &[], &params(0)).unwrap_err();
    assert!(e.is_missing_logprobs());
    assert_eq!(mock.finish().len(), 1);
}

#[test]
fn length_finish_is_surfaced() {
    let mock = serve(1, Box::new(|_, _| (200, completion(&["a", "b", "c"], &[-1.0, -1.0, -1.0], "length"))));
    let c = mock.backend(1).sample_continuation(&prompt(), &[], &params(0)).unwrap();
    assert_eq!(c.finish_reason, FinishReason::Length);
    mock.finish();
}

#[test]
fn prefix_text_is_appended_and_budget_shrinks() {
    let mock = serve(1, Box::new(|_, _| (200, completion(&["!"], &[-0.5], "stop"))));
    let mut a = TokenRecord::new(1, 0.1);
    a.text = Some(" 4".into());
    let mut b = TokenRecord::new(2, 0.1);
    b.text = Some(" and".into());
    mock.backend(1).sample_continuation(&prompt(), &[a, b], &params(0)).unwrap();
    let bodies = mock.finish();
    assert_eq!(bodies[0]["prompt"], "Q: 2+2= 4 and");
    assert_eq!(bodies[0]["max_tokens"], 62);
}

#[test]
fn tree_search_runs_over_http() {
    // M = 2, N = 1, L = 1, T = 1: two roots plus one fork per tree
    let mock = serve(
        4,
        Box::new(|i, _| {
            let lp = [-0.1, -0.2, -3.0 - i as f64 * 0.1, -0.3, -0.1, -0.2, -0.1, -0.1];
            (200, completion(&["a", "b", "c", "d", "e", "f", "g", "h"], &lp, "stop"))
        }),
    );
    let backend = mock.backend(1);
    let grader = |_: &Prompt, r: &[TokenRecord]| -> Result<bool, GradeError> { Ok(r.len() % 2 == 0) };
    let mut cfg = SearchConfig::mnlt(2, 1, 1, 1);
    cfg.gen = params(9);
    let out = eptree_search(&backend, &grader, &prompt(), &cfg).unwrap();
    assert_eq!(out.forest.leaf_count(), 4);
    assert_eq!(out.report.backend_calls, 4);
    let bodies = mock.finish();
    // fork requests carry the prefix before the highest-surprisal token
    assert!(bodies[2..].iter().all(|b| b["prompt"] == "Q: 2+2=ab"), "{bodies:?}");
}
