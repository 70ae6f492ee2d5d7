//! The remote chat-completions backend against a local single-shot HTTP
//! server: valid replies parse, malformed or out-of-range replies fall
//! back to the heuristic without failing the run.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use advloop_core::agents::{advise, info_analyze, AgentBackend, MethodParams, RemoteClient, RemoteConfig};
use advloop_core::attacks::AttackMethod;
use advloop_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serves canned chat-completions responses on a local port, one per
/// queued body, then stops.
fn spawn_server(replies: Vec<String>) -> (String, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        for content in replies {
            let (mut stream, _) = listener.accept().unwrap();
            stream
                .set_read_timeout(Some(Duration::from_secs(5)))
                .unwrap();
            // Drain the request: headers, then the announced body length.
            let mut buf = Vec::new();
            let mut tmp = [0u8; 4096];
            let mut content_length = 0usize;
            loop {
                let n = stream.read(&mut tmp).unwrap();
                buf.extend_from_slice(&tmp[..n]);
                if let Some(pos) = find_header_end(&buf) {
                    let headers = String::from_utf8_lossy(&buf[..pos]);
                    for line in headers.lines() {
                        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().to_string()) {
                            content_length = v.parse().unwrap_or(0);
                        }
                    }
                    let have = buf.len() - pos;
                    if have >= content_length {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let body = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": content}}]
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), handle)
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

fn client_for(base_url: String) -> RemoteClient {
    RemoteClient::new(
        RemoteConfig {
            base_url,
            api_key: Some("test-key".into()),
            model: "test-model".into(),
            timeout: Duration::from_secs(5),
            retries: 0,
        },
        false,
    )
}

fn test_image() -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    Tensor::from_vec(
        &[1, 8, 8],
        (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn valid_vision_reply_is_parsed_into_a_report() {
    let reply = serde_json::json!({
        "regions": [{"y0": 0, "x0": 0, "y1": 4, "x1": 4, "score": 0.8, "label": "busy corner"}],
        "texture": 0.42,
        "summary": "one busy corner"
    })
    .to_string();
    let (url, handle) = spawn_server(vec![reply]);
    let backend = AgentBackend::Remote(client_for(url));
    let (report, fallback) = info_analyze(&test_image(), &backend);
    handle.join().unwrap();
    assert!(fallback.is_none());
    assert_eq!(report.regions.len(), 1);
    assert_eq!(report.texture, 0.42);
    assert_eq!(report.regions[0].label, "busy corner");
}

#[test]
fn malformed_vision_reply_falls_back_to_heuristic() {
    let (url, handle) = spawn_server(vec!["here is my analysis: nice image!".to_string()]);
    let backend = AgentBackend::Remote(client_for(url));
    let x = test_image();
    let (report, fallback) = info_analyze(&x, &backend);
    handle.join().unwrap();
    let event = fallback.expect("fallback must be recorded");
    assert!(event.contains("fell back"));
    // The report equals the heuristic one.
    let heuristic = advloop_core::agents::heuristic_report(&x);
    assert_eq!(report, heuristic);
}

#[test]
fn out_of_bounds_region_falls_back_to_heuristic() {
    let reply = serde_json::json!({
        "regions": [{"y0": 0, "x0": 0, "y1": 99, "x1": 4, "score": 0.8, "label": "oob"}],
        "texture": 0.3,
        "summary": ""
    })
    .to_string();
    let (url, handle) = spawn_server(vec![reply]);
    let backend = AgentBackend::Remote(client_for(url));
    let (_, fallback) = info_analyze(&test_image(), &backend);
    handle.join().unwrap();
    assert!(fallback.is_some());
}

#[test]
fn valid_advisor_proposal_is_adopted() {
    let reply = serde_json::json!({"c": 42.0, "eta": 0.005, "iterations": 123}).to_string();
    let (url, handle) = spawn_server(vec![reply]);
    let backend = AgentBackend::Remote(client_for(url));
    let params = MethodParams::default();
    let (updated, event) = advise(&[], AttackMethod::Cw, &params, 0.03, &backend);
    handle.join().unwrap();
    assert!(event.is_none());
    assert_eq!(updated.cw.c, 42.0);
    assert_eq!(updated.cw.eta, 0.005);
    assert_eq!(updated.cw.iterations, 123);
    // Untouched methods stay as they were.
    assert_eq!(updated.jsma, params.jsma);
}

#[test]
fn out_of_range_advisor_proposal_is_rejected_with_fallback() {
    // step 5.0 is far beyond the eps-feasible range.
    let reply = serde_json::json!({"step": 5.0, "top_k": 2, "iterations": 10}).to_string();
    let (url, handle) = spawn_server(vec![reply]);
    let backend = AgentBackend::Remote(client_for(url));
    let params = MethodParams::default();
    let (updated, event) = advise(&[], AttackMethod::Jsma, &params, 0.03, &backend);
    handle.join().unwrap();
    let event = event.expect("rejection must be reported");
    assert!(event.contains("fell back"));
    // Heuristic on empty history keeps the defaults.
    assert_eq!(updated, params);
}

#[test]
fn unreachable_endpoint_falls_back_without_error() {
    // Nothing listens on this port.
    let client = RemoteClient::new(
        RemoteConfig {
            base_url: "http://127.0.0.1:1".into(),
            api_key: None,
            model: "m".into(),
            timeout: Duration::from_millis(200),
            retries: 1,
        },
        false,
    );
    let backend = AgentBackend::Remote(client);
    let (report, fallback) = info_analyze(&test_image(), &backend);
    assert!(fallback.is_some());
    assert!(!report.summary.is_empty() || report.regions.is_empty());
}
