//! Backend configuration file.
//!
//! ```toml
//! [backends.llm]
//! capability = "text"
//! url = "https://inference.example/v1/chat/completions"
//! model = "llama-3.1-70b-instruct"
//! auth_env = "LLM_API_KEY"
//! timeout_s = 120
//! max_concurrent = 4
//! retries = 3
//! ```
//!
//! URLs with the `mock://` scheme select the in-tree deterministic providers:
//! `mock://template` (text), `mock://pattern` (image), `mock://hash?dim=N`
//! (text_embed), `mock://pixel-hash?dim=N` (image_embed, joint scoring
//! enabled), `mock://constant?answer=A` and `mock://hash` (multimodal).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::http::{HttpEndpoint, HttpImageEmbedder, HttpMultimodal, HttpRenderer, HttpText, HttpTextEmbedder};
use super::mock::{ConstantAnswerer, HashAnswerer, HashTextEmbedder, PatternRenderer, PixelHashImageEmbedder, TemplateText};
use super::{Capability, Gateway, GatewayBuilder, GatewayError, RetryPolicy, RunLog};

pub const MOCK_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub capability: Capability,
    pub url: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// never appears in configuration or logs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Longest image side accepted by a multimodal backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_side: Option<u32>,
}

fn default_model() -> String {
    "default".into()
}
fn default_timeout() -> f64 {
    120.0
}
fn default_concurrency() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

impl BackendConfig {
    pub fn mock(capability: Capability, url: &str) -> Self {
        BackendConfig {
            capability,
            url: url.into(),
            model: format!("mock-{capability}"),
            auth_env: None,
            timeout_s: default_timeout(),
            max_concurrent: 8,
            retries: default_retries(),
            backoff_ms: 0,
            max_image_side: None,
        }
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retries.max(1),
            base_delay: Duration::from_millis(self.backoff_ms),
            max_delay: Duration::from_secs(30),
        }
    }

    fn validate(&self, name: &str) -> Result<(), GatewayError> {
        if self.max_concurrent == 0 {
            return Err(GatewayError::Precondition(format!("backend {name}: max_concurrent must be >= 1")));
        }
        if !(self.timeout_s > 0.0) {
            return Err(GatewayError::Precondition(format!("backend {name}: timeout_s must be positive")));
        }
        Ok(())
    }

    fn mock_query(&self, key: &str) -> Option<String> {
        let (_, q) = self.url.split_once('?')?;
        q.split('&').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k == key).then(|| v.to_string())
        })
    }

    fn mock_kind(&self) -> Option<&str> {
        let rest = self.url.strip_prefix("mock://")?;
        Some(rest.split('?').next().unwrap_or(rest))
    }

    fn endpoint(&self) -> Result<HttpEndpoint, GatewayError> {
        HttpEndpoint::new(
            &self.url,
            &self.model,
            self.auth_env.as_deref(),
            Duration::from_secs_f64(self.timeout_s),
        )
        .map_err(GatewayError::Backend)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
}

impl GatewayConfig {
    pub fn all_mock() -> Self {
        let dim = format!("?dim={MOCK_EMBED_DIM}");
        let backends = [
            ("mock-llm", BackendConfig::mock(Capability::Text, "mock://template")),
            ("mock-t2i", BackendConfig::mock(Capability::Image, "mock://pattern")),
            (
                "mock-text-embed",
                BackendConfig::mock(Capability::TextEmbed, &format!("mock://hash{dim}")),
            ),
            (
                "mock-image-embed",
                BackendConfig::mock(Capability::ImageEmbed, &format!("mock://pixel-hash{dim}")),
            ),
            ("mock-vlm", BackendConfig::mock(Capability::Multimodal, "mock://hash")),
        ];
        GatewayConfig {
            backends: backends.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        let cfg: GatewayConfig =
            toml::from_str(text).map_err(|e| GatewayError::Precondition(format!("gateway config: {e}")))?;
        for (name, b) in &cfg.backends {
            b.validate(name)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Precondition(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Capabilities missing from this config are filled from the mocks.
    pub fn with_mock_fallbacks(mut self) -> Self {
        for (name, b) in GatewayConfig::all_mock().backends {
            if !self.backends.values().any(|x| x.capability == b.capability) {
                self.backends.insert(name, b);
            }
        }
        self
    }

    fn pick(&self, cap: Capability, preferred: Option<&str>) -> Result<Option<(&String, &BackendConfig)>, GatewayError> {
        if let Some(name) = preferred {
            return match self.backends.get_key_value(name) {
                Some((k, b)) if b.capability == cap => Ok(Some((k, b))),
                Some(_) => Err(GatewayError::Precondition(format!("backend {name} is not a {cap} backend"))),
                None => Err(GatewayError::Precondition(format!("no backend named {name}"))),
            };
        }
        Ok(self.backends.iter().find(|(_, b)| b.capability == cap))
    }

    /// Builds a gateway using the first backend of each capability (by name),
    /// or the named backend for the multimodal slot.
    pub fn build(&self, multimodal: Option<&str>, log: RunLog) -> Result<Gateway, GatewayError> {
        let mut gb: GatewayBuilder = Gateway::builder().run_log(log);
        for cap in [
            Capability::Text,
            Capability::Image,
            Capability::TextEmbed,
            Capability::ImageEmbed,
            Capability::Multimodal,
        ] {
            let preferred = if cap == Capability::Multimodal { multimodal } else { None };
            let Some((name, b)) = self.pick(cap, preferred)? else {
                continue;
            };
            b.validate(name)?;
            gb = attach(gb, b)?;
        }
        Ok(gb.build())
    }
}

fn attach(gb: GatewayBuilder, b: &BackendConfig) -> Result<GatewayBuilder, GatewayError> {
    let (n, r) = (b.max_concurrent, b.retry());
    let dim = || {
        b.mock_query("dim")
            .and_then(|d| d.parse().ok())
            .unwrap_or(MOCK_EMBED_DIM)
    };
    let unknown = |kind: &str| GatewayError::Precondition(format!("unknown mock provider mock://{kind} for {}", b.capability));
    Ok(match (b.capability, b.mock_kind()) {
        (Capability::Text, Some("template")) => gb.text(Arc::new(TemplateText::new(&b.model)), n, r),
        (Capability::Image, Some("pattern")) => gb.image(Arc::new(PatternRenderer::new(&b.model)), n, r),
        (Capability::TextEmbed, Some("hash")) => gb.text_embed(Arc::new(HashTextEmbedder::new(dim())), n, r),
        (Capability::ImageEmbed, Some("pixel-hash")) => gb.image_embed(
            Arc::new(PixelHashImageEmbedder::new(dim()).with_text_encoder(HashTextEmbedder::new(dim()))),
            n,
            r,
        ),
        (Capability::Multimodal, Some("constant")) => gb.multimodal(
            Arc::new(ConstantAnswerer::new(&b.mock_query("answer").unwrap_or_else(|| "A".into()))),
            n,
            r,
        ),
        (Capability::Multimodal, Some("hash")) => gb.multimodal(Arc::new(HashAnswerer::new(&b.model)), n, r),
        (_, Some(kind)) => return Err(unknown(kind)),
        (Capability::Text, None) => gb.text(Arc::new(HttpText(b.endpoint()?)), n, r),
        (Capability::Image, None) => gb.image(Arc::new(HttpRenderer(b.endpoint()?)), n, r),
        (Capability::TextEmbed, None) => gb.text_embed(Arc::new(HttpTextEmbedder(b.endpoint()?)), n, r),
        (Capability::ImageEmbed, None) => gb.image_embed(Arc::new(HttpImageEmbedder(b.endpoint()?)), n, r),
        (Capability::Multimodal, None) => gb.multimodal(
            Arc::new(HttpMultimodal {
                endpoint: b.endpoint()?,
                max_side: b.max_image_side.unwrap_or(2048),
            }),
            n,
            r,
        ),
    })
}
