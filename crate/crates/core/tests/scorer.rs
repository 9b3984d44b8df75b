mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::user_stream;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recicl::icl::{assemble_icl, IclConfig, IclInstance};
use recicl::ingest::Label;
use recicl::metrics::{auc, linear_fit};
use recicl::prompt::{build_user_sequences, render_sequence, PromptTemplate, RawSample};
use recicl::scorer::mock::token_count;
use recicl::scorer::toy::*;
use recicl::scorer::*;
use recicl::{Error, Result};
use serde_json::{json, Value};

fn instances(n_events: usize, m: usize) -> Vec<IclInstance> {
    let evs = user_stream("u", &(1..=n_events as i64).collect::<Vec<_>>());
    let t = PromptTemplate::default();
    let seq = render_sequence(&build_user_sequences(&evs, 10).unwrap()["u"], &t);
    (0..seq.len())
        .map(|n| assemble_icl(&seq, n, &IclConfig::recent(m), &t).unwrap())
        .collect()
}

/// Serves each request with `respond(request_number, body)`; one request
/// per connection.
fn serve<F>(respond: F) -> String
where
    F: Fn(usize, Value) -> (u16, String, Duration) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let counter = Arc::new(AtomicUsize::new(0));
    let respond = Arc::new(respond);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let counter = Arc::clone(&counter);
            let respond = Arc::clone(&respond);
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let k = counter.fetch_add(1, Ordering::SeqCst);
                let (status, payload, delay) = respond(k, value);
                std::thread::sleep(delay);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            });
        }
    });
    format!("http://{addr}/score")
}

fn remote(endpoint: String, retries: usize, timeout_ms: u64) -> RemoteScorer {
    let mut cfg = RemoteConfig::new(endpoint);
    cfg.retries = retries;
    cfg.timeout = Duration::from_millis(timeout_ms);
    cfg.backoff = Duration::from_millis(1);
    RemoteScorer::new(cfg).unwrap()
}

#[test]
fn remote_logprob_response() {
    let url = serve(|_, body| {
        assert!(body["prompt"].as_str().unwrap().ends_with("Answer:"));
        (200, json!({"yes_logprob": -0.1, "no_logprob": -2.4}).to_string(), Duration::ZERO)
    });
    let inst = &instances(3, 2)[2];
    let p = score(inst, &remote(url, 0, 5000)).unwrap();
    let oracle = (-0.1f64).exp() / ((-0.1f64).exp() + (-2.4f64).exp());
    assert!((p.p_yes - oracle).abs() < 1e-12);
    assert!((p.p_yes - 0.909).abs() < 1e-3);
}

#[test]
fn remote_p_yes_and_text_fallback() {
    let url = serve(|k, _| {
        let body = if k % 2 == 0 { json!({"p_yes": 0.25}) } else { json!({"text": " No, because"}) };
        (200, body.to_string(), Duration::ZERO)
    });
    let backend = remote(url, 0, 5000);
    let inst = &instances(2, 1)[1];
    assert_eq!(score(inst, &backend).unwrap().p_yes, 0.25);
    assert_eq!(score(inst, &backend).unwrap().p_yes, 0.0);
}

#[test]
fn remote_retries_then_succeeds() {
    let url = serve(|k, _| {
        if k < 2 {
            (503, "{}".into(), Duration::ZERO)
        } else {
            (200, json!({"p_yes": 0.7}).to_string(), Duration::ZERO)
        }
    });
    let inst = &instances(2, 1)[1];
    assert_eq!(score(inst, &remote(url, 2, 5000)).unwrap().p_yes, 0.7);
}

#[test]
fn remote_failures_are_reported_per_instance() {
    let url = serve(|k, _| match k % 3 {
        0 => (200, json!({"p_yes": 0.6}).to_string(), Duration::ZERO),
        1 => (200, "not json".into(), Duration::ZERO),
        _ => (200, json!({"text": "maybe"}).to_string(), Duration::ZERO),
    });
    let batch = score_batch(&instances(6, 2), &remote(url, 0, 5000), 1).unwrap();
    assert_eq!(batch.outcomes.len(), 6);
    assert_eq!(batch.n_failed(), 4);
    match &batch.outcomes[1] {
        ScoreOutcome::Failed { instance_id, .. } => assert_eq!(instance_id, "u#1"),
        other => panic!("expected failure, got {other:?}"),
    }
}

#[test]
fn remote_timeout_exhausts_retries() {
    let url = serve(|_, _| (200, json!({"p_yes": 0.5}).to_string(), Duration::from_millis(500)));
    let err = score(&instances(2, 1)[1], &remote(url, 1, 50)).unwrap_err();
    assert!(matches!(err, Error::Backend { attempts: 2, .. }));
}

#[test]
fn remote_requires_endpoint() {
    assert!(RemoteScorer::new(RemoteConfig::new("")).is_err());
}

#[test]
fn batch_keeps_input_order_and_is_pure() {
    let insts = instances(10, 4);
    let one = score_batch(&insts, &AwareMock, 1).unwrap();
    let many = score_batch(&insts, &AwareMock, 8).unwrap();
    let ids: Vec<String> = one.predictions().map(|p| p.instance_id.clone()).collect();
    let expect: Vec<String> = insts.iter().map(IclInstance::id).collect();
    assert_eq!(ids, expect);
    let p1: Vec<f64> = one.predictions().map(|p| p.p_yes).collect();
    let p8: Vec<f64> = many.predictions().map(|p| p.p_yes).collect();
    assert_eq!(p1, p8);
    assert!(score_batch(&insts, &AwareMock, 0).is_err());
}

struct FailOdd;

impl Scorer for FailOdd {
    fn tag(&self) -> &str {
        "fail-odd"
    }

    fn score_instance(&self, instance: &IclInstance) -> Result<BackendScore> {
        if instance.query_index % 2 == 1 {
            Err(Error::Backend { attempts: 1, message: "odd".into() })
        } else {
            Ok(1.5.into())
        }
    }
}

#[test]
fn out_of_range_probabilities_and_errors_fail_instances() {
    let batch = score_batch(&instances(4, 1), &FailOdd, 2).unwrap();
    assert_eq!(batch.n_failed(), 4);
}

#[test]
fn blind_mock_ignores_shots_and_aware_follows_them() {
    let with = instances(8, 4);
    let without = instances(8, 0);
    for (a, b) in with.iter().zip(&without) {
        assert_eq!(
            BlindMock.score_instance(a).unwrap().p_yes,
            BlindMock.score_instance(b).unwrap().p_yes
        );
    }
    let mut all_yes = with[5].clone();
    for s in &mut all_yes.shots {
        s.label = Label::Yes;
        s.raw.label = Label::Yes;
    }
    assert!(AwareMock.score_instance(&all_yes).unwrap().p_yes > 0.5);
}

#[test]
fn cost_mock_latency_is_affine_in_shots() {
    let mock = CostModelMock::default();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for m in 0..=4 {
        let insts: Vec<IclInstance> = instances(30, m).into_iter().skip(10).collect();
        let batch = score_batch(&insts, &mock, 4).unwrap();
        let mean = batch.predictions().map(|p| p.latency_ms).sum::<f64>() / insts.len() as f64;
        let tokens = insts.iter().map(|i| token_count(&i.text)).sum::<usize>() as f64 / insts.len() as f64;
        let expect = 20.0 + 0.15 * tokens;
        assert!((mean - expect).abs() < 1e-9);
        xs.push(m as f64);
        ys.push(mean);
    }
    assert!(linear_fit(&xs, &ys).2 > 0.99);
}

fn sample(target: &str, label: bool) -> RawSample {
    RawSample {
        user_id: "u".into(),
        index: 0,
        history: Vec::new(),
        target_item_id: target.into(),
        target_title: target.into(),
        label: Label::from(label),
        timestamp: 1,
    }
}

/// Queries whose label is the majority of three shot labels, with no other
/// signal anywhere.
fn majority_corpus(n: usize, mode: FeatureMode, seed: u64) -> Vec<Example> {
    let spec = FeatureSpec { mode, memory_buckets: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let labels: Vec<bool> = (0..3).map(|_| rng.random()).collect();
            let y = labels.iter().filter(|&&b| b).count() >= 2;
            let shots: Vec<RawSample> = labels
                .iter()
                .enumerate()
                .map(|(j, &l)| sample(&format!("s{k}x{j}"), l))
                .collect();
            let refs: Vec<&RawSample> = shots.iter().collect();
            (featurize_parts(&sample(&format!("q{k}"), y), &refs, &spec), y)
        })
        .collect()
}

#[test]
fn shot_only_signal_separates_modes() {
    for (mode, lo, hi) in [(FeatureMode::Plain, 0.45, 0.55), (FeatureMode::IclFormat, 0.999, 1.0)] {
        let params = ToyScorerParams { mode, memory_buckets: 0, epochs: 10, ..ToyScorerParams::default() };
        let model = train_on_features(&majority_corpus(2000, mode, 1), &params).unwrap().model;
        let test = majority_corpus(1000, mode, 2);
        let scores: Vec<f64> = test.iter().map(|(f, _)| model.predict_features(f)).collect();
        let labels: Vec<bool> = test.iter().map(|(_, y)| *y).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!((lo..=hi).contains(&a), "{mode:?} AUC {a}");
    }
}

#[test]
fn separable_loss_decreases_monotonically() {
    let spec = FeatureSpec { mode: FeatureMode::IclFormat, memory_buckets: 0 };
    let examples = majority_corpus(300, FeatureMode::IclFormat, 5);
    let params = ToyScorerParams {
        optimizer: Optimizer::GradientDescent,
        learning_rate: 0.5,
        epochs: 50,
        memory_buckets: spec.memory_buckets,
        ..ToyScorerParams::default()
    };
    let out = train_on_features(&examples, &params).unwrap();
    let start = objective_loss(&vec![0.0; spec.dim()], &examples, params.l2);
    let mut prev = start;
    for &l in &out.loss_history {
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let spec = FeatureSpec { mode: FeatureMode::IclFormat, memory_buckets: 4 };
    let insts = instances(12, 3);
    let examples: Vec<Example> = insts.iter().map(|i| (featurize(i, &spec), i.label.is_yes())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for _ in 0..5 {
        let w: Vec<f64> = (0..spec.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = objective(&w, &examples, 0.01);
        for i in 0..w.len() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (objective_loss(&up, &examples, 0.01) - objective_loss(&down, &examples, 0.01)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn trained_toy_scores_instances() {
    let insts = instances(40, 4);
    let out = train_toy(&insts, &ToyScorerParams { memory_buckets: 16, ..ToyScorerParams::default() }).unwrap();
    assert!(out.final_loss.is_finite());
    let batch = score_batch(&insts, &out.model, 4).unwrap();
    assert_eq!(batch.n_failed(), 0);
    assert!(batch.predictions().all(|p| p.backend == "toy-icl"));
    assert!(matches!(train_toy(&[], &ToyScorerParams::default()), Err(Error::Invalid(_))));
}

proptest! {
    #[test]
    fn plain_mode_ignores_shot_permutation_and_labels(flips in prop::collection::vec(any::<bool>(), 4), seed in any::<u64>()) {
        let inst = instances(9, 4).pop().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..FeatureSpec { mode: FeatureMode::Plain, memory_buckets: 8 }.dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let model = ToyModel { spec: FeatureSpec { mode: FeatureMode::Plain, memory_buckets: 8 }, weights: w };
        let mut other = inst.clone();
        other.shots.reverse();
        for (s, f) in other.shots.iter_mut().zip(&flips) {
            if *f {
                s.raw.label = Label::from(!s.raw.label.is_yes());
            }
        }
        prop_assert_eq!(model.predict(&inst), model.predict(&other));
    }
}
