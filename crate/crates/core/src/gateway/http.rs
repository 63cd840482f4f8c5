//! HTTP JSON backends.
//!
//! Wire contracts:
//!
//! | capability   | request body                                                     | response                                  |
//! |--------------|------------------------------------------------------------------|-------------------------------------------|
//! | `text`       | chat-completions: `{model, messages, temperature, top_p, ...}`   | `choices[0].message.content`, `usage`     |
//! | `multimodal` | chat-completions with an `image_url` data-URI content part       | `choices[0].message.content`              |
//! | `text_embed` | `{model, input: [text, ...]}`                                    | `data[i].embedding` (ordered by `index`)  |
//! | `image_embed`| `{model, input: [{image: <base64 png>}]}`                        | `data[0].embedding`                       |
//! | joint score  | `POST <url>/similarity {model, image, text}`                     | `{score}`                                 |
//! | `image`      | `{model, prompt, params: {steps, guidance_scale, width, height, seed}}` | `{image: <base64 png>, seed?}`     |
//!
//! Credentials are read from the environment variable named in the backend
//! config at request time and sent as a bearer token.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use super::{
    BackendError, Completion, ImageBackend, ImageEmbedBackend, MultimodalBackend, RenderParams, SamplingParams,
    TextBackend, TextEmbedBackend,
};
use crate::Embedding;

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    url: String,
    model: String,
    auth_env: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEndpoint {
    pub fn new(url: &str, model: &str, auth_env: Option<&str>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpEndpoint {
            url: url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            auth_env: auth_env.map(str::to_string),
            client,
        })
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Some(var) = &self.auth_env {
            let token = std::env::var(var).map_err(|_| BackendError::Auth(format!("environment variable {var} is not set")))?;
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            if is_policy_refusal(status.as_u16(), &text) {
                return Err(BackendError::ModerationRefusal(extract_message(&text)));
            }
            return Err(BackendError::Status {
                code: status.as_u16(),
                body: truncate(&text, 512),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn extract_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("message"))
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| truncate(body, 512))
}

fn is_policy_refusal(code: u16, body: &str) -> bool {
    if code == 451 {
        return true;
    }
    let lower = body.to_lowercase();
    (code == 400 || code == 403) && (lower.contains("content_policy") || lower.contains("moderation") || lower.contains("safety"))
}

fn chat_body(model: &str, content: Value, params: &SamplingParams) -> Value {
    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": params.temperature,
        "top_p": params.top_p,
        "repetition_penalty": params.repetition_penalty,
        "max_tokens": params.max_tokens,
    });
    if let Some(seed) = params.seed {
        body["seed"] = json!(seed);
    }
    body
}

fn chat_content(v: &Value) -> Result<String, BackendError> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
}

fn parse_vector(v: &Value) -> Result<Embedding, BackendError> {
    v.as_array()
        .ok_or_else(|| BackendError::Malformed("embedding is not an array".into()))?
        .iter()
        .map(|x| {
            x.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| BackendError::Malformed("non-numeric embedding component".into()))
        })
        .collect()
}

pub struct HttpText(pub HttpEndpoint);

impl TextBackend for HttpText {
    fn model_id(&self) -> &str {
        &self.0.model
    }
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        let v = self.0.post(&self.0.url, &chat_body(&self.0.model, json!(prompt), params))?;
        Ok(Completion {
            text: chat_content(&v)?,
            prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
            completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64),
        })
    }
}

pub struct HttpMultimodal {
    pub endpoint: HttpEndpoint,
    pub max_side: u32,
}

impl MultimodalBackend for HttpMultimodal {
    fn model_id(&self) -> &str {
        &self.endpoint.model
    }
    fn answer(&self, png: &[u8], prompt: &str, params: &SamplingParams) -> Result<String, BackendError> {
        let content = json!([
            {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", B64.encode(png))}},
            {"type": "text", "text": prompt},
        ]);
        let v = self
            .endpoint
            .post(&self.endpoint.url, &chat_body(&self.endpoint.model, content, params))?;
        chat_content(&v)
    }
    fn max_image_side(&self) -> u32 {
        self.max_side
    }
}

pub struct HttpTextEmbedder(pub HttpEndpoint);

impl TextEmbedBackend for HttpTextEmbedder {
    fn model_id(&self) -> &str {
        &self.0.model
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let v = self.0.post(&self.0.url, &json!({"model": self.0.model, "input": texts}))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Malformed("missing data array".into()))?;
        let mut rows: Vec<(u64, Embedding)> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let idx = d.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
                let emb = d
                    .get("embedding")
                    .ok_or_else(|| BackendError::Malformed("missing embedding".into()))
                    .and_then(parse_vector)?;
                Ok((idx, emb))
            })
            .collect::<Result<_, BackendError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, e)| e).collect())
    }
}

pub struct HttpImageEmbedder(pub HttpEndpoint);

impl ImageEmbedBackend for HttpImageEmbedder {
    fn model_id(&self) -> &str {
        &self.0.model
    }
    fn embed_image(&self, png: &[u8]) -> Result<Embedding, BackendError> {
        let v = self.0.post(
            &self.0.url,
            &json!({"model": self.0.model, "input": [{"image": B64.encode(png)}]}),
        )?;
        v.pointer("/data/0/embedding")
            .ok_or_else(|| BackendError::Malformed("missing data[0].embedding".into()))
            .and_then(parse_vector)
    }
    fn joint_similarity(&self, png: &[u8], text: &str) -> Result<f32, BackendError> {
        let v = self.0.post(
            &format!("{}/similarity", self.0.url),
            &json!({"model": self.0.model, "image": B64.encode(png), "text": text}),
        )?;
        v.get("score")
            .and_then(Value::as_f64)
            .map(|s| s as f32)
            .ok_or_else(|| BackendError::Malformed("missing score".into()))
    }
}

pub struct HttpRenderer(pub HttpEndpoint);

impl ImageBackend for HttpRenderer {
    fn model_id(&self) -> &str {
        &self.0.model
    }
    fn render(&self, description: &str, params: &RenderParams) -> Result<Vec<u8>, BackendError> {
        let body = json!({
            "model": self.0.model,
            "prompt": description,
            "params": {
                "steps": params.inference_steps,
                "guidance_scale": params.guidance_scale,
                "width": params.width,
                "height": params.height,
                "seed": params.seed,
            }
        });
        let v = self.0.post(&self.0.url, &body)?;
        if let Some(reason) = v.get("refused").and_then(Value::as_str) {
            return Err(BackendError::ModerationRefusal(reason.to_string()));
        }
        let b64 = v
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Malformed("missing image".into()))?;
        B64.decode(b64).map_err(|e| BackendError::Malformed(format!("bad base64 image: {e}")))
    }
}
