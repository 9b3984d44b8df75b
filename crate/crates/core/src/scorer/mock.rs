//! Deterministic backends for tests and latency studies.

use std::time::Duration;

use super::toy::{mean_shot_label, shot_similarity};
use super::{BackendScore, Scorer};
use crate::digest::{fnv1a, mix64};
use crate::icl::IclInstance;
use crate::Result;

/// Ignores shots; `p(Yes)` is a hash of the query prompt.
#[derive(Debug, Clone, Default)]
pub struct BlindMock;

impl BlindMock {
    pub fn probability(text: &str) -> f64 {
        (mix64(fnv1a(text.as_bytes())) >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl Scorer for BlindMock {
    fn tag(&self) -> &str {
        "mock-blind"
    }

    fn score_instance(&self, instance: &IclInstance) -> Result<BackendScore> {
        Ok(Self::probability(&instance.query.prompt_text).into())
    }
}

/// Follows the shots: `clamp(0.5 + 0.4 * 2 * (mean_label - 0.5) + 0.1 * similarity)`.
#[derive(Debug, Clone, Default)]
pub struct AwareMock;

impl AwareMock {
    pub fn probability(instance: &IclInstance) -> f64 {
        let shots: Vec<_> = instance.shots.iter().map(|s| &s.raw).collect();
        let mean = mean_shot_label(&shots).unwrap_or(0.5);
        let sim = shot_similarity(&instance.query.raw, &shots);
        (0.5 + 0.4 * (mean - 0.5) * 2.0 + 0.1 * sim).clamp(0.0, 1.0)
    }
}

impl Scorer for AwareMock {
    fn tag(&self) -> &str {
        "mock-aware"
    }

    fn score_instance(&self, instance: &IclInstance) -> Result<BackendScore> {
        Ok(Self::probability(instance).into())
    }
}

/// Reports a latency of `base + per_token * tokens(x')`, tokens being
/// whitespace-separated words of the assembled text. Scores like
/// [`AwareMock`]. With `sleep` set it also blocks for that long.
#[derive(Debug, Clone)]
pub struct CostModelMock {
    pub base: Duration,
    pub per_token: Duration,
    pub sleep: bool,
}

impl Default for CostModelMock {
    fn default() -> Self {
        CostModelMock {
            base: Duration::from_millis(20),
            per_token: Duration::from_micros(150),
            sleep: false,
        }
    }
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl CostModelMock {
    pub fn latency_for(&self, instance: &IclInstance) -> Duration {
        self.base + self.per_token * token_count(&instance.text) as u32
    }
}

impl Scorer for CostModelMock {
    fn tag(&self) -> &str {
        "mock-cost"
    }

    fn score_instance(&self, instance: &IclInstance) -> Result<BackendScore> {
        let latency = self.latency_for(instance);
        if self.sleep {
            std::thread::sleep(latency);
        }
        Ok(BackendScore {
            p_yes: AwareMock::probability(instance),
            latency: Some(latency),
        })
    }
}
