//! HTTP/JSON inference endpoint client.
//!
//! Request body: `{"prompt": "<assembled text>"}`. Accepted responses, in
//! order of preference:
//!
//! - `{"p_yes": <float in [0,1]>}`
//! - `{"yes_logprob": <float>, "no_logprob": <float>}`, turned into
//!   `p = exp(yes) / (exp(yes) + exp(no))`
//! - `{"text": "<generation>"}`: the first word, case-insensitive and with
//!   surrounding punctuation stripped, must be "yes" (p = 1) or "no" (p = 0);
//!   anything else is a protocol violation.
//!
//! Transport errors, non-2xx statuses and protocol violations are retried up
//! to `retries` extra times before the instance is reported as failed.

use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{BackendScore, Scorer};
use crate::icl::IclInstance;
use crate::{Error, Result};

pub const ENDPOINT_ENV: &str = "RECICL_ENDPOINT";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: usize,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_millis(30_000),
            retries: 2,
            backoff: Duration::from_millis(100),
        }
    }
}

pub struct RemoteScorer {
    agent: ureq::Agent,
    config: RemoteConfig,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.endpoint.trim().is_empty() {
            return Err(Error::Invalid(format!(
                "remote backend needs an endpoint (--endpoint or {ENDPOINT_ENV})"
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteScorer { agent, config })
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<f64, String> {
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .send_json(ScoreRequest { prompt })
            .map_err(|e| format!("transport: {e}"))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("http status {status}"));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| format!("response body: {e}"))?;
        parse_response(&value)
    }
}

/// Two-way softmax over the label log-likelihoods.
pub fn p_yes_from_logprobs(yes_logprob: f64, no_logprob: f64) -> f64 {
    1.0 / (1.0 + (no_logprob - yes_logprob).exp())
}

pub fn parse_response(value: &Value) -> std::result::Result<f64, String> {
    let obj = value.as_object().ok_or("response is not a JSON object")?;
    if let Some(p) = obj.get("p_yes") {
        let p = p.as_f64().ok_or("p_yes is not a number")?;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("p_yes {p} outside [0, 1]"));
        }
        return Ok(p);
    }
    if let (Some(y), Some(n)) = (obj.get("yes_logprob"), obj.get("no_logprob")) {
        let (y, n) = (
            y.as_f64().ok_or("yes_logprob is not a number")?,
            n.as_f64().ok_or("no_logprob is not a number")?,
        );
        if y.is_nan() || n.is_nan() || y > 0.0 || n > 0.0 {
            return Err(format!("invalid log-probabilities ({y}, {n})"));
        }
        return Ok(p_yes_from_logprobs(y, n));
    }
    if let Some(text) = obj.get("text").and_then(Value::as_str) {
        let first = text
            .split_whitespace()
            .next()
            .unwrap_or("")
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase();
        return match first.as_str() {
            "yes" => Ok(1.0),
            "no" => Ok(0.0),
            _ => Err(format!("unparseable generation {text:?}")),
        };
    }
    Err("response has neither p_yes, yes_logprob/no_logprob nor text".into())
}

impl Scorer for RemoteScorer {
    fn tag(&self) -> &str {
        "remote"
    }

    fn score_instance(&self, instance: &IclInstance) -> Result<BackendScore> {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for k in 0..attempts {
            if k > 0 {
                std::thread::sleep(self.config.backoff * k as u32);
            }
            match self.attempt(&instance.text) {
                Ok(p) => return Ok(p.into()),
                Err(e) => last = e,
            }
        }
        Err(Error::Backend {
            attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn logprob_softmax() {
        let p = parse_response(&json!({"yes_logprob": -0.1, "no_logprob": -2.4})).unwrap();
        let expected = (-0.1f64).exp() / ((-0.1f64).exp() + (-2.4f64).exp());
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 0.909).abs() < 5e-4);
    }

    #[test]
    fn direct_probability() {
        assert_eq!(parse_response(&json!({"p_yes": 0.25})).unwrap(), 0.25);
        assert!(parse_response(&json!({"p_yes": 1.5})).is_err());
        assert!(parse_response(&json!({"p_yes": "high"})).is_err());
    }

    #[test]
    fn generation_fallback() {
        assert_eq!(parse_response(&json!({"text": " Yes, definitely"})).unwrap(), 1.0);
        assert_eq!(parse_response(&json!({"text": "no."})).unwrap(), 0.0);
        assert!(parse_response(&json!({"text": "Maybe"})).is_err());
        assert!(parse_response(&json!({"text": ""})).is_err());
    }

    #[test]
    fn malformed_responses() {
        assert!(parse_response(&json!([1, 2])).is_err());
        assert!(parse_response(&json!({"yes_logprob": -0.1})).is_err());
        assert!(parse_response(&json!({"yes_logprob": 0.5, "no_logprob": -1.0})).is_err());
    }

    #[test]
    fn empty_endpoint_rejected() {
        assert!(RemoteScorer::new(RemoteConfig::new("  ")).is_err());
    }
}
