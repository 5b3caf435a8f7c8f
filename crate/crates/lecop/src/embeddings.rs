//! Loading LLM news embeddings from files and fetching them from an HTTP
//! embedding service.
//!
//! Service contract: POST JSON {"input": [prompts], "ids": [ids]} answered
//! with 200 and {"embeddings": [[floats]]}, one vector per prompt in order.
//! 5xx and transport failures are retried with exponential backoff; 4xx and
//! any other status are fatal. Short responses never yield a partial table;
//! the unanswered ids are enumerated in the error.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::PromptRecord;
use crate::vectors::VectorTable;

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub endpoint: String,
    pub batch_size: usize,
    pub bearer_token: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            endpoint: String::new(),
            batch_size: 16,
            bearer_token: None,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }
}

/// Read an embedding table from the binary layout or TSV, by sniffing.
pub fn load_embeddings(path: &Path) -> Result<VectorTable> {
    VectorTable::read_auto(path)
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: Vec<&'a str>,
    ids: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

fn send_batch(
    client: &reqwest::blocking::Client,
    cfg: &FetchConfig,
    input: Vec<&str>,
    ids: Vec<&str>,
) -> Result<Vec<Vec<f64>>> {
    let request = EmbedRequest { input, ids };
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let mut builder = client.post(&cfg.endpoint).json(&request);
        if let Some(token) = &cfg.bearer_token {
            builder = builder.bearer_auth(token);
        }
        let outcome: std::result::Result<EmbedResponse, Error> = match builder.send() {
            Ok(resp) => {
                let status = resp.status().as_u16();
                if status == 200 {
                    match resp.json::<EmbedResponse>() {
                        Ok(body) => Ok(body),
                        Err(e) => Err(Error::Http {
                            message: format!("invalid response body: {e}"),
                            transient: false,
                        }),
                    }
                } else {
                    Err(Error::Http {
                        message: format!("embedding service returned status {status}"),
                        transient: (500..600).contains(&status),
                    })
                }
            }
            Err(e) => Err(Error::Http {
                message: format!("request failed: {e}"),
                transient: true,
            }),
        };
        match outcome {
            Ok(body) => return Ok(body.embeddings),
            Err(Error::Http { message, transient }) => {
                if transient && attempt < cfg.max_attempts {
                    let backoff = cfg.initial_backoff * 2u32.pow(attempt - 1);
                    std::thread::sleep(backoff);
                    continue;
                }
                let message = if transient {
                    format!("{message} (after {attempt} attempts)")
                } else {
                    message
                };
                return Err(Error::Http { message, transient });
            }
            Err(other) => return Err(other),
        }
    }
}

/// Fetch one vector per prompt, batched. An empty prompt list returns an
/// empty table without touching the network. The vector dimension is fixed
/// by the first returned vector.
pub fn fetch_embeddings(cfg: &FetchConfig, prompts: &[PromptRecord]) -> Result<VectorTable> {
    if prompts.is_empty() {
        return Ok(VectorTable::new(0));
    }
    if cfg.endpoint.is_empty() {
        return Err(Error::invalid("embedding endpoint is not configured"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("embedding batch_size must be positive"));
    }
    if cfg.max_attempts == 0 {
        return Err(Error::invalid("max_attempts must be at least 1"));
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(cfg.timeout)
        .build()
        .map_err(|e| Error::Http {
            message: format!("client construction failed: {e}"),
            transient: false,
        })?;

    let mut table: Option<VectorTable> = None;
    for batch in prompts.chunks(cfg.batch_size) {
        let input: Vec<&str> = batch.iter().map(|p| p.prompt_text.as_str()).collect();
        let ids: Vec<&str> = batch.iter().map(|p| p.news_id.as_str()).collect();
        let vectors = send_batch(&client, cfg, input, ids)?;
        if vectors.len() != batch.len() {
            if vectors.len() > batch.len() {
                return Err(Error::invalid(format!(
                    "embedding service returned {} vectors for {} prompts",
                    vectors.len(),
                    batch.len()
                )));
            }
            let missing: Vec<String> = batch[vectors.len()..]
                .iter()
                .map(|p| p.news_id.clone())
                .collect();
            return Err(Error::MissingIds {
                context: "embedding service response".to_string(),
                ids: missing,
            });
        }
        for (record, vector) in batch.iter().zip(vectors) {
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    id: record.news_id.clone(),
                });
            }
            if vector.is_empty() {
                return Err(Error::invalid(format!(
                    "embedding service returned an empty vector for {:?}",
                    record.news_id
                )));
            }
            let table = table.get_or_insert_with(|| VectorTable::new(vector.len()));
            let row: Vec<f32> = vector.iter().map(|&v| v as f32).collect();
            table.insert(record.news_id.clone(), row)?;
        }
    }
    Ok(table.expect("at least one prompt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::thread::JoinHandle;

    /// Deterministic per-id vector the mock answers with.
    fn generated(id: &str) -> Vec<f64> {
        let sum: u64 = id.bytes().map(u64::from).sum();
        (0..3).map(|i| ((sum + i * 7) % 100) as f64 / 10.0).collect()
    }

    enum Reply {
        /// 200 with generated vectors for every id.
        Vectors,
        /// 200 but only the first n vectors.
        Short(usize),
        Status(u16),
        /// 200 with one vector whose component overflows f32.
        Huge,
        /// 200 with vectors of the given dimension.
        Dim(usize),
    }

    struct Seen {
        body: serde_json::Value,
        auth: Option<String>,
    }

    fn read_request(stream: &mut std::net::TcpStream) -> Seen {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 1024];
        let header_end = loop {
            let n = stream.read(&mut chunk).unwrap();
            assert!(n > 0, "connection closed mid-request");
            buf.extend_from_slice(&chunk[..n]);
            if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                break pos + 4;
            }
        };
        let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
        let mut content_length = 0usize;
        let mut auth = None;
        for line in headers.lines() {
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap();
            }
            if lower.starts_with("authorization:") {
                auth = Some(line.split_once(':').unwrap().1.trim().to_string());
            }
        }
        while buf.len() < header_end + content_length {
            let n = stream.read(&mut chunk).unwrap();
            assert!(n > 0, "connection closed mid-body");
            buf.extend_from_slice(&chunk[..n]);
        }
        let body = serde_json::from_slice(&buf[header_end..header_end + content_length]).unwrap();
        Seen { body, auth }
    }

    fn respond(stream: &mut std::net::TcpStream, status: u16, body: &str) {
        let reason = if status == 200 { "OK" } else { "ERR" };
        let response = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(response.as_bytes()).unwrap();
        stream.flush().unwrap();
    }

    /// One accepted connection per scripted reply; returns what was seen.
    fn mock_server(script: Vec<Reply>) -> (String, JoinHandle<Vec<Seen>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}/embed", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for reply in script {
                let (mut stream, _) = listener.accept().unwrap();
                let request = read_request(&mut stream);
                let ids: Vec<String> = request.body["ids"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_str().unwrap().to_string())
                    .collect();
                seen.push(request);
                match reply {
                    Reply::Vectors => {
                        let vecs: Vec<Vec<f64>> = ids.iter().map(|id| generated(id)).collect();
                        let body =
                            serde_json::to_string(&serde_json::json!({ "embeddings": vecs }))
                                .unwrap();
                        respond(&mut stream, 200, &body);
                    }
                    Reply::Short(n) => {
                        let vecs: Vec<Vec<f64>> =
                            ids.iter().take(n).map(|id| generated(id)).collect();
                        let body =
                            serde_json::to_string(&serde_json::json!({ "embeddings": vecs }))
                                .unwrap();
                        respond(&mut stream, 200, &body);
                    }
                    Reply::Status(code) => respond(&mut stream, code, "{}"),
                    Reply::Huge => {
                        let vecs: Vec<Vec<f64>> = ids.iter().map(|_| vec![1e39, 0.0, 0.0]).collect();
                        let body =
                            serde_json::to_string(&serde_json::json!({ "embeddings": vecs }))
                                .unwrap();
                        respond(&mut stream, 200, &body);
                    }
                    Reply::Dim(d) => {
                        let vecs: Vec<Vec<f64>> = ids.iter().map(|_| vec![0.5; d]).collect();
                        let body =
                            serde_json::to_string(&serde_json::json!({ "embeddings": vecs }))
                                .unwrap();
                        respond(&mut stream, 200, &body);
                    }
                }
            }
            seen
        });
        (endpoint, handle)
    }

    fn prompts(n: usize) -> Vec<PromptRecord> {
        (0..n)
            .map(|i| PromptRecord {
                news_id: format!("N{i}"),
                prompt_text: format!("prompt {i}"),
            })
            .collect()
    }

    fn quick_cfg(endpoint: String) -> FetchConfig {
        FetchConfig {
            endpoint,
            batch_size: 2,
            initial_backoff: Duration::from_millis(5),
            timeout: Duration::from_secs(5),
            ..FetchConfig::default()
        }
    }

    #[test]
    fn fetches_batches_and_matches_the_generator() {
        let (endpoint, handle) = mock_server(vec![Reply::Vectors, Reply::Vectors, Reply::Vectors]);
        let records = prompts(5);
        let table = fetch_embeddings(&quick_cfg(endpoint), &records).unwrap();
        assert_eq!(table.len(), 5);
        assert_eq!(table.dim(), 3);
        for record in &records {
            let got = table.get(&record.news_id).unwrap();
            for (g, e) in got.iter().zip(generated(&record.news_id)) {
                assert_eq!(*g, e as f32);
            }
        }
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[0].body["ids"], serde_json::json!(["N0", "N1"]));
        assert_eq!(seen[0].body["input"], serde_json::json!(["prompt 0", "prompt 1"]));
        assert_eq!(seen[2].body["ids"], serde_json::json!(["N4"]));
        assert!(seen[0].auth.is_none());
    }

    #[test]
    fn empty_prompt_list_makes_no_network_call() {
        // Port 9 is the discard service; a real call would fail loudly.
        let cfg = quick_cfg("http://127.0.0.1:9/embed".to_string());
        let table = fetch_embeddings(&cfg, &[]).unwrap();
        assert!(table.is_empty());
    }

    #[test]
    fn short_response_enumerates_missing_ids() {
        let (endpoint, handle) = mock_server(vec![Reply::Short(1)]);
        let err = fetch_embeddings(&quick_cfg(endpoint), &prompts(2)).unwrap_err();
        match err {
            Error::MissingIds { ids, .. } => assert_eq!(ids, vec!["N1".to_string()]),
            other => panic!("unexpected error {other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn transient_failure_is_retried_then_succeeds() {
        let (endpoint, handle) = mock_server(vec![Reply::Status(503), Reply::Vectors]);
        let table = fetch_embeddings(&quick_cfg(endpoint), &prompts(2)).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn persistent_server_errors_exhaust_attempts() {
        let (endpoint, handle) =
            mock_server(vec![Reply::Status(500), Reply::Status(500), Reply::Status(500)]);
        let err = fetch_embeddings(&quick_cfg(endpoint), &prompts(1)).unwrap_err();
        match err {
            Error::Http { transient, message } => {
                assert!(transient);
                assert!(message.contains("3 attempts"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(handle.join().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_are_fatal_without_retry() {
        let (endpoint, handle) = mock_server(vec![Reply::Status(400)]);
        let err = fetch_embeddings(&quick_cfg(endpoint), &prompts(1)).unwrap_err();
        match err {
            Error::Http { transient, .. } => assert!(!transient),
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(handle.join().unwrap().len(), 1);
    }

    #[test]
    fn bearer_token_is_forwarded() {
        let (endpoint, handle) = mock_server(vec![Reply::Vectors]);
        let cfg = FetchConfig {
            bearer_token: Some("sekret".to_string()),
            ..quick_cfg(endpoint)
        };
        fetch_embeddings(&cfg, &prompts(1)).unwrap();
        let seen = handle.join().unwrap();
        assert_eq!(seen[0].auth.as_deref(), Some("Bearer sekret"));
    }

    #[test]
    fn component_overflowing_f32_is_rejected() {
        let (endpoint, handle) = mock_server(vec![Reply::Huge]);
        let err = fetch_embeddings(&quick_cfg(endpoint), &prompts(1)).unwrap_err();
        match err {
            Error::NonFinite { id } => assert_eq!(id, "N0"),
            other => panic!("unexpected error {other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn dimension_drift_across_batches_is_rejected() {
        let (endpoint, handle) = mock_server(vec![Reply::Dim(3), Reply::Dim(4)]);
        let err = fetch_embeddings(&quick_cfg(endpoint), &prompts(3)).unwrap_err();
        match err {
            Error::DimensionMismatch { id, expected, found } => {
                assert_eq!(id, "N2");
                assert_eq!(expected, 3);
                assert_eq!(found, 4);
            }
            other => panic!("unexpected error {other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn refetching_is_idempotent() {
        let (endpoint_a, ha) = mock_server(vec![Reply::Vectors]);
        let (endpoint_b, hb) = mock_server(vec![Reply::Vectors]);
        let a = fetch_embeddings(&quick_cfg(endpoint_a), &prompts(2)).unwrap();
        let b = fetch_embeddings(&quick_cfg(endpoint_b), &prompts(2)).unwrap();
        assert_eq!(a, b);
        ha.join().unwrap();
        hb.join().unwrap();
    }

    #[test]
    fn rejects_misconfiguration() {
        let records = prompts(1);
        let mut cfg = quick_cfg(String::new());
        assert!(fetch_embeddings(&cfg, &records).is_err());
        cfg.endpoint = "http://127.0.0.1:9/embed".to_string();
        cfg.batch_size = 0;
        assert!(fetch_embeddings(&cfg, &records).is_err());
    }
}
