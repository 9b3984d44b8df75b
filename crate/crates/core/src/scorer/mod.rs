//! Scoring backends behind one interface.
//!
//! A backend maps an assembled [`IclInstance`] to `p(Yes)`. Backends are
//! shared across worker threads by [`score_batch`], so they must be
//! `Send + Sync`.

pub mod mock;
pub mod remote;
pub mod toy;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::icl::IclInstance;
use crate::{Error, Result};

pub use mock::{AwareMock, BlindMock, CostModelMock};
pub use remote::{RemoteConfig, RemoteScorer};
pub use toy::{train_toy, FeatureMode, ToyModel, ToyScorerParams};

/// What a backend returns for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackendScore {
    pub p_yes: f64,
    /// Backend-reported latency (e.g. a cost model); wall time is used when absent.
    pub latency: Option<Duration>,
}

impl From<f64> for BackendScore {
    fn from(p_yes: f64) -> Self {
        BackendScore { p_yes, latency: None }
    }
}

pub trait Scorer: Send + Sync {
    fn tag(&self) -> &str;

    fn score_instance(&self, instance: &IclInstance) -> Result<BackendScore>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub user_id: String,
    pub timestamp: i64,
    pub label: bool,
    pub p_yes: f64,
    pub latency_ms: f64,
    pub backend: String,
}

pub fn score(instance: &IclInstance, backend: &dyn Scorer) -> Result<Prediction> {
    let start = Instant::now();
    let out = backend.score_instance(instance)?;
    let wall = start.elapsed();
    if !out.p_yes.is_finite() || !(0.0..=1.0).contains(&out.p_yes) {
        return Err(Error::Backend {
            attempts: 1,
            message: format!("p_yes {} outside [0, 1]", out.p_yes),
        });
    }
    Ok(Prediction {
        instance_id: instance.id(),
        user_id: instance.user_id.clone(),
        timestamp: instance.query.timestamp,
        label: instance.label.is_yes(),
        p_yes: out.p_yes,
        latency_ms: out.latency.unwrap_or(wall).as_secs_f64() * 1e3,
        backend: backend.tag().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ScoreOutcome {
    Scored(Prediction),
    Failed {
        instance_id: String,
        user_id: String,
        timestamp: i64,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    /// One outcome per input instance, in input order.
    pub outcomes: Vec<ScoreOutcome>,
    pub wall_time_ms: f64,
}

impl BatchResult {
    pub fn predictions(&self) -> impl Iterator<Item = &Prediction> {
        self.outcomes.iter().filter_map(|o| match o {
            ScoreOutcome::Scored(p) => Some(p),
            ScoreOutcome::Failed { .. } => None,
        })
    }

    pub fn n_failed(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, ScoreOutcome::Failed { .. }))
            .count()
    }
}

/// Scores `instances` with at most `max_in_flight` concurrent calls.
/// Failures are recorded per instance; the batch never aborts.
pub fn score_batch(instances: &[IclInstance], backend: &dyn Scorer, max_in_flight: usize) -> Result<BatchResult> {
    if max_in_flight == 0 {
        return Err(Error::Invalid("max_in_flight must be positive".into()));
    }
    let start = Instant::now();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ScoreOutcome>>> = Mutex::new(vec![None; instances.len()]);
    let workers = max_in_flight.min(instances.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= instances.len() {
                    break;
                }
                let outcome = match score(&instances[i], backend) {
                    Ok(p) => ScoreOutcome::Scored(p),
                    Err(e) => ScoreOutcome::Failed {
                        instance_id: instances[i].id(),
                        user_id: instances[i].user_id.clone(),
                        timestamp: instances[i].query.timestamp,
                        error: e.to_string(),
                    },
                };
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    let outcomes = slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect();
    Ok(BatchResult {
        outcomes,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
