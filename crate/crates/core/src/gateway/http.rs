//! Chat-completion style HTTP backend (`POST {base_url}/chat/completions`).

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, ChatRequest, ChatResponse, Usage};

#[derive(Debug, Clone)]
pub struct ProviderEndpoint {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl ProviderEndpoint {
    /// Reads the key from `FLOWSMITH_<PROVIDER>_API_KEY`.
    pub fn from_env(provider: &str, base_url: impl Into<String>, timeout: Duration) -> Self {
        let var = format!("FLOWSMITH_{}_API_KEY", provider.to_ascii_uppercase().replace('-', "_"));
        ProviderEndpoint {
            base_url: base_url.into(),
            api_key: std::env::var(var).ok().filter(|k| !k.is_empty()),
            timeout,
        }
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoints: BTreeMap<String, ProviderEndpoint>,
}

impl HttpBackend {
    pub fn new(endpoints: BTreeMap<String, ProviderEndpoint>) -> Self {
        HttpBackend { client: reqwest::blocking::Client::new(), endpoints }
    }

    pub fn has_credentials(&self, provider: &str) -> bool {
        self.endpoints.get(provider).is_some_and(|e| e.api_key.is_some())
    }

    fn body(req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(schema) = &req.response_schema {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {"name": "reply", "schema": schema, "strict": true},
            });
        }
        body
    }
}

impl Backend for HttpBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let endpoint = self
            .endpoints
            .get(&req.provider)
            .ok_or_else(|| BackendError::Fatal(format!("no endpoint configured for provider {}", req.provider)))?;
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let mut call = self.client.post(url).timeout(endpoint.timeout).json(&HttpBackend::body(req));
        if let Some(key) = &endpoint.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.without_url().to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.without_url().to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        parse_completion(&text)
    }
}

fn parse_completion(body: &str) -> Result<ChatResponse, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Fatal(format!("provider reply is not JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Fatal("provider reply has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_owned();
    let count = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        text,
        finish_reason: choice
            .get("finish_reason")
            .and_then(Value::as_str)
            .unwrap_or("stop")
            .to_owned(),
        usage: Usage { input_tokens: count("prompt_tokens"), output_tokens: count("completion_tokens") },
        latency_ms: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Message;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// One-shot HTTP server returning `status` and `body`; hands back the
    /// request it saw.
    fn serve_once(status: u16, body: &'static str) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            head + &String::from_utf8(buf).unwrap()
        });
        (addr, handle)
    }

    fn backend(addr: String) -> HttpBackend {
        HttpBackend::new(BTreeMap::from([(
            "local".to_string(),
            ProviderEndpoint { base_url: addr, api_key: Some("sk-test".into()), timeout: Duration::from_secs(5) },
        )]))
    }

    #[test]
    fn posts_chat_completion_and_parses_reply() {
        let (addr, server) = serve_once(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"hi there"},"finish_reason":"stop"}],"usage":{"prompt_tokens":5,"completion_tokens":2}}"#,
        );
        let req = ChatRequest::new("local", "tiny", vec![Message::user("hello")])
            .with_schema(json!({"type": "object"}));
        let resp = backend(addr).send(&req).unwrap();
        assert_eq!(resp.text, "hi there");
        assert_eq!(resp.usage, Usage { input_tokens: 5, output_tokens: 2 });

        let seen = server.join().unwrap();
        assert!(seen.starts_with("POST /chat/completions"));
        assert!(seen.to_ascii_lowercase().contains("authorization: bearer sk-test"));
        assert!(seen.contains("\"response_format\""));
    }

    #[test]
    fn error_status_is_surfaced() {
        let (addr, server) = serve_once(503, r#"{"error":"overloaded"}"#);
        let req = ChatRequest::new("local", "tiny", vec![Message::user("hello")]);
        match backend(addr).send(&req) {
            Err(BackendError::Status { status, .. }) => assert_eq!(status, 503),
            other => panic!("{other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn unknown_provider_is_fatal() {
        let req = ChatRequest::new("nowhere", "m", vec![Message::user("x")]);
        assert!(matches!(backend("http://127.0.0.1:9".into()).send(&req), Err(BackendError::Fatal(_))));
    }
}
