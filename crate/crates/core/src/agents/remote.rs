//! Chat-completions client for the remote agent backends.
//!
//! Speaks the OpenAI-compatible `/v1/chat/completions` protocol: the info
//! agent sends the image as a base64 PNG data URL to a vision model, the
//! advisor sends recent history as JSON to a text model. Replies must be a
//! single JSON object matching the expected schema; anything else is an
//! error the caller turns into a heuristic fallback. One retry, bounded
//! timeout, and the credential never appears in logged bodies.

use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use crate::agents::{HistoryEntry, MethodParams, SalientRegion, SemanticReport};
use crate::attacks::AttackMethod;
use crate::error::{Error, Result};
use crate::imageio::image_to_png_bytes;
use crate::tensor::Tensor;

/// Environment variables holding the endpoint, credential, and model name.
pub const ENV_BASE_URL: &str = "ADVLOOP_API_BASE";
pub const ENV_API_KEY: &str = "ADVLOOP_API_KEY";
pub const ENV_MODEL: &str = "ADVLOOP_MODEL";

/// Connection settings for a chat-completions endpoint.
#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Additional attempts after the first failure.
    pub retries: u32,
}

impl RemoteConfig {
    /// Reads the endpoint from the environment; `None` when no base URL is
    /// set.
    pub fn from_env() -> Option<Self> {
        let base_url = std::env::var(ENV_BASE_URL).ok()?;
        Some(RemoteConfig {
            base_url,
            api_key: std::env::var(ENV_API_KEY).ok(),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".to_string()),
            timeout: Duration::from_secs(30),
            retries: 1,
        })
    }
}

/// A configured chat-completions client.
pub struct RemoteClient {
    config: RemoteConfig,
    agent: ureq::Agent,
    verbose: bool,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig, verbose: bool) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteClient {
            config,
            agent,
            verbose,
        }
    }

    /// Asks the vision model for a semantic report of the image.
    pub fn analyze_image(&self, x: &Tensor) -> Result<SemanticReport> {
        let png = image_to_png_bytes(x)?;
        let data_url = format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(png)
        );
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let system = format!(
            "You analyze an image for an adversarial-perturbation planner. Reply with \
             exactly one JSON object, no prose: {{\"regions\": [{{\"y0\": int, \"x0\": int, \
             \"y1\": int, \"x1\": int, \"score\": float in [0,1], \"label\": string}}], \
             \"texture\": float >= 0, \"summary\": string}}. Boxes are half-open pixel \
             bounds within a {h}x{w} image; list at most 3 visually busy regions."
        );
        let user = json!([
            {"type": "text", "text": "Report the salient regions and texture of this image."},
            {"type": "image_url", "image_url": {"url": data_url}}
        ]);
        let content = self.chat(&system, user)?;
        let report: WireReport = parse_json_reply(&content)?;
        report.into_semantic(h, w)
    }

    /// Asks the text model for updated hyperparameters of one method.
    pub fn propose_params(
        &self,
        history: &[HistoryEntry],
        method: AttackMethod,
        current: &MethodParams,
        eps: f64,
    ) -> Result<MethodParams> {
        let schema = match method {
            AttackMethod::Cw => {
                "{\"c\": float > 0, \"eta\": float > 0, \"iterations\": int >= 0}"
            }
            AttackMethod::Jsma => {
                "{\"step\": float in (0, eps], \"top_k\": 1 or 2, \"iterations\": int >= 0}"
            }
            AttackMethod::Sta => {
                "{\"gamma\": float > 0, \"t_sta\": int >= 0, \"s_min\": float >= 0, \
                 \"s_max\": float >= s_min, \"theta\": float >= 0}"
            }
        };
        let system = format!(
            "You tune hyperparameters for the `{}` adversarial perturbation generator. \
             Reply with exactly one JSON object matching {schema}, no prose. The \
             perturbation budget eps is {eps}.",
            method.name()
        );
        let tail: Vec<&HistoryEntry> =
            history.iter().rev().take(3).rev().collect();
        let user_text = json!({
            "recent_history": tail,
            "current": method_view(current, method),
        })
        .to_string();
        let content = self.chat(&system, json!(user_text))?;
        let mut updated = current.clone();
        match method {
            AttackMethod::Cw => updated.cw = parse_json_reply(&content)?,
            AttackMethod::Jsma => updated.jsma = parse_json_reply(&content)?,
            AttackMethod::Sta => updated.sta = parse_json_reply(&content)?,
        }
        Ok(updated)
    }

    /// One chat-completions round trip with retry.
    fn chat(&self, system: &str, user_content: serde_json::Value) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user_content},
            ],
            "temperature": 0,
        });
        let url = format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut last_err = None;
        for attempt in 0..=self.config.retries {
            if self.verbose {
                eprintln!(
                    "remote attempt {} -> {url} body: {body}",
                    attempt + 1
                );
            }
            match self.send(&url, &body) {
                Ok(content) => {
                    if self.verbose {
                        eprintln!("remote reply: {content}");
                    }
                    return Ok(content);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn send(&self, url: &str, body: &serde_json::Value) -> Result<String> {
        let mut request = self.agent.post(url);
        if let Some(key) = &self.config.api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| Error::Remote(format!("transport: {e}")))?;
        let reply: ChatReply = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Remote(format!("malformed response body: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Remote("no choices in response".into()))
    }
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: String,
}

/// Parses a reply that should be a single JSON object, tolerating code
/// fences around it.
fn parse_json_reply<T: serde::de::DeserializeOwned>(content: &str) -> Result<T> {
    let trimmed = content
        .trim()
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    serde_json::from_str(trimmed).map_err(|e| Error::Remote(format!("schema violation: {e}")))
}

fn method_view(params: &MethodParams, method: AttackMethod) -> serde_json::Value {
    match method {
        AttackMethod::Cw => serde_json::to_value(&params.cw),
        AttackMethod::Jsma => serde_json::to_value(&params.jsma),
        AttackMethod::Sta => serde_json::to_value(&params.sta),
    }
    .expect("params serialize")
}

#[derive(Deserialize)]
struct WireReport {
    #[serde(default)]
    regions: Vec<WireRegion>,
    texture: f64,
    #[serde(default)]
    summary: String,
}

#[derive(Deserialize)]
struct WireRegion {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
    score: f64,
    #[serde(default)]
    label: String,
}

impl WireReport {
    fn into_semantic(self, h: usize, w: usize) -> Result<SemanticReport> {
        if !self.texture.is_finite() || self.texture < 0.0 {
            return Err(Error::Remote(format!(
                "texture {} is not a nonnegative real",
                self.texture
            )));
        }
        let mut regions = Vec::with_capacity(self.regions.len());
        for r in self.regions {
            if r.y0 >= r.y1 || r.x0 >= r.x1 || r.y1 > h || r.x1 > w {
                return Err(Error::Remote(format!(
                    "region ({}, {})..({}, {}) outside {h}x{w} image",
                    r.y0, r.x0, r.y1, r.x1
                )));
            }
            if !(0.0..=1.0).contains(&r.score) {
                return Err(Error::Remote(format!("region score {} outside [0, 1]", r.score)));
            }
            regions.push(SalientRegion {
                y0: r.y0,
                x0: r.x0,
                y1: r.y1,
                x1: r.x1,
                score: r.score,
                label: r.label,
            });
        }
        Ok(SemanticReport {
            regions,
            texture: self.texture,
            summary: self.summary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_tolerates_code_fences() {
        let fenced = "```json\n{\"c\": 2.0, \"eta\": 0.01, \"iterations\": 10}\n```";
        let p: crate::attacks::CwParams = parse_json_reply(fenced).unwrap();
        assert_eq!(p.c, 2.0);
    }

    #[test]
    fn parse_rejects_prose() {
        let err = parse_json_reply::<crate::attacks::CwParams>("sure! here you go");
        assert!(matches!(err, Err(Error::Remote(_))));
    }

    #[test]
    fn wire_report_validates_bounds() {
        let bad = WireReport {
            regions: vec![WireRegion {
                y0: 0,
                x0: 0,
                y1: 20,
                x1: 4,
                score: 0.5,
                label: String::new(),
            }],
            texture: 0.1,
            summary: String::new(),
        };
        assert!(bad.into_semantic(16, 16).is_err());

        let bad_score = WireReport {
            regions: vec![WireRegion {
                y0: 0,
                x0: 0,
                y1: 4,
                x1: 4,
                score: 1.5,
                label: String::new(),
            }],
            texture: 0.1,
            summary: String::new(),
        };
        assert!(bad_score.into_semantic(16, 16).is_err());
    }
}
