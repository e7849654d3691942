//! Two JSON-over-HTTPS wire dialects for hosted models.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, GatewayError, LvmOutcome, LvmRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// `messages: [{role, content: [{type: text}, {type: image_url}]}]`,
    /// bearer auth, answer in `choices[0].message.content`.
    ChatCompletions,
    /// `messages: [{role, content: [{type: image, source: base64}]}]`,
    /// `x-api-key` auth, answer in `content[*].text`.
    Messages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub dialect: Dialect,
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    1024
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    id: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        if config.endpoint.trim().is_empty() {
            return Err(GatewayError::Config("endpoint URL is empty".into()));
        }
        if config.model.trim().is_empty() {
            return Err(GatewayError::Config("model name is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        let id = format!(
            "{}:{}",
            match config.dialect {
                Dialect::ChatCompletions => "chat",
                Dialect::Messages => "messages",
            },
            config.model
        );
        Ok(HttpBackend { config, agent, id })
    }

    pub fn request_body(&self, req: &LvmRequest) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let b = &req.bundle;
        match self.config.dialect {
            Dialect::ChatCompletions => {
                let mut content = vec![json!({"type": "text", "text": b.text})];
                content.extend(b.images.iter().map(|img| {
                    json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{}", b64.encode(img))}
                    })
                }));
                json!({
                    "model": self.config.model,
                    "temperature": req.temperature,
                    "max_tokens": self.config.max_tokens,
                    "messages": [{"role": "user", "content": content}],
                })
            }
            Dialect::Messages => {
                let mut content: Vec<Value> = b
                    .images
                    .iter()
                    .map(|img| {
                        json!({
                            "type": "image",
                            "source": {"type": "base64", "media_type": "image/png", "data": b64.encode(img)}
                        })
                    })
                    .collect();
                content.push(json!({"type": "text", "text": b.text}));
                json!({
                    "model": self.config.model,
                    "temperature": req.temperature,
                    "max_tokens": self.config.max_tokens,
                    "messages": [{"role": "user", "content": content}],
                })
            }
        }
    }

    /// Maps a 2xx body to an outcome.
    pub fn parse_body(&self, body: &Value) -> Result<LvmOutcome, GatewayError> {
        let malformed = || GatewayError::Transport(format!("unexpected response shape: {body}"));
        match self.config.dialect {
            Dialect::ChatCompletions => {
                let choice = body.pointer("/choices/0").ok_or_else(malformed)?;
                if let Some(r) = choice.pointer("/message/refusal").and_then(Value::as_str) {
                    return Ok(LvmOutcome::Refusal(r.to_string()));
                }
                if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
                    return Ok(LvmOutcome::Refusal("content filter".into()));
                }
                let text = choice
                    .pointer("/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(malformed)?;
                Ok(LvmOutcome::Text(text.to_string()))
            }
            Dialect::Messages => {
                let parts = body.get("content").and_then(Value::as_array).ok_or_else(malformed)?;
                let text: String = parts
                    .iter()
                    .filter(|p| p.get("type").and_then(Value::as_str) == Some("text"))
                    .filter_map(|p| p.get("text").and_then(Value::as_str))
                    .collect::<Vec<_>>()
                    .join("\n");
                if body.get("stop_reason").and_then(Value::as_str) == Some("refusal") {
                    return Ok(LvmOutcome::Refusal(text));
                }
                Ok(LvmOutcome::Text(text))
            }
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn is_live(&self) -> bool {
        true
    }

    fn call(&self, req: &LvmRequest, _hash: &str) -> Result<LvmOutcome, GatewayError> {
        let mut r = self
            .agent
            .post(&self.config.endpoint)
            .config()
            .timeout_global(Some(Duration::from_secs(req.timeout_s.max(1))))
            .build()
            .header("content-type", "application/json");
        if let Some(key) = &self.config.api_key {
            r = match self.config.dialect {
                Dialect::ChatCompletions => r.header("authorization", format!("Bearer {key}")),
                Dialect::Messages => r
                    .header("x-api-key", key)
                    .header("anthropic-version", "2023-06-01"),
            };
        }
        let body = serde_json::to_vec(&self.request_body(req))
            .map_err(|e| GatewayError::Config(format!("cannot encode request: {e}")))?;
        let mut resp = r
            .send(&body[..])
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        match status {
            200..=299 => {
                let body: Value = serde_json::from_str(&text)
                    .map_err(|e| GatewayError::Transport(format!("invalid JSON body: {e}")))?;
                self.parse_body(&body)
            }
            401 | 403 => Err(GatewayError::Auth(format!("HTTP {status}: {text}"))),
            408 | 429 | 500..=599 => Err(GatewayError::Transport(format!("HTTP {status}"))),
            _ => Err(GatewayError::Config(format!("HTTP {status}: {text}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Backoff, Gateway};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Loopback server answering each connection with the next canned reply.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut head = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(format!("{head}\n{}", String::from_utf8(buf).unwrap()));
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn backend(dialect: Dialect, url: String) -> Arc<HttpBackend> {
        Arc::new(
            HttpBackend::new(HttpConfig {
                dialect,
                endpoint: url,
                model: "m".into(),
                api_key: Some("k".into()),
                max_tokens: 64,
            })
            .unwrap(),
        )
    }

    fn req() -> LvmRequest {
        LvmRequest::new(crate::gateway::tests::bundle("look"), "http")
    }

    #[test]
    fn chat_dialect_retries_5xx() {
        let ok = r#"{"choices":[{"message":{"content":"FINAL ANSWER: KEEP"}}]}"#.to_string();
        let (url, h) = serve(vec![(503, "{}".into()), (200, ok)]);
        let g = Gateway::new(backend(Dialect::ChatCompletions, url)).with_backoff(Backoff::none());
        let r = g.send(&req()).unwrap();
        assert_eq!(r.outcome, LvmOutcome::Text("FINAL ANSWER: KEEP".into()));
        let seen = h.join().unwrap();
        assert!(seen[1].to_lowercase().contains("authorization: bearer k"));
        assert!(seen[1].contains("data:image/png;base64,AQID"));
        assert!(seen[1].contains("\"temperature\":0.0"));
    }

    #[test]
    fn messages_dialect_and_auth_error() {
        let ok = r#"{"content":[{"type":"text","text":"FINAL ANSWER: DISCARD"}],"stop_reason":"end_turn"}"#;
        let (url, h) = serve(vec![(200, ok.into()), (401, r#"{"error":"bad key"}"#.into())]);
        let g = Gateway::new(backend(Dialect::Messages, url)).with_backoff(Backoff::none());
        assert_eq!(
            g.send(&req()).unwrap().outcome,
            LvmOutcome::Text("FINAL ANSWER: DISCARD".into())
        );
        assert!(matches!(g.send(&req()), Err(GatewayError::Auth(_))));
        let seen = h.join().unwrap();
        assert!(seen[0].to_lowercase().contains("x-api-key: k"));
        assert!(seen[0].contains("\"media_type\":\"image/png\""));
    }

    #[test]
    fn refusal_shapes() {
        let b = backend(Dialect::ChatCompletions, "http://unused".into());
        let body = json!({"choices":[{"message":{"content":null,"refusal":"no"}}]});
        assert_eq!(b.parse_body(&body).unwrap(), LvmOutcome::Refusal("no".into()));
        let m = backend(Dialect::Messages, "http://unused".into());
        let body = json!({"content":[{"type":"text","text":"cannot"}],"stop_reason":"refusal"});
        assert_eq!(m.parse_body(&body).unwrap(), LvmOutcome::Refusal("cannot".into()));
    }

    #[test]
    fn empty_endpoint_is_config_error() {
        let r = HttpBackend::new(HttpConfig {
            dialect: Dialect::Messages,
            endpoint: " ".into(),
            model: "m".into(),
            api_key: None,
            max_tokens: 1,
        });
        assert!(matches!(r, Err(GatewayError::Config(_))));
    }
}
