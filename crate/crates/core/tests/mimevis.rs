use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mindsem::mimevis::{
    caption_jobs, read_corpus, round_two_condense, synthesize_corpus, validate_caption, word_count, write_corpus,
    CaptionCache, CaptionJob, CondenseOptions, CorpusConfig, Fallback, HttpClientConfig, HttpVlmClient, MockVlmClient,
    Transport, TransportError, VlmClient, VlmRequest,
};
use mindsem::synthdata::{emit_dataset, generate_world, load_dataset, DatasetSpec, WorldConfig};
use mindsem::Error;
use proptest::prelude::*;
use serde_json::{json, Value};

fn jobs(n: usize) -> Vec<CaptionJob> {
    let dir = tempfile::tempdir().unwrap();
    let world = generate_world(&WorldConfig::default()).unwrap();
    let spec = DatasetSpec {
        n_train: n,
        n_test: 2,
        reps_test: 1,
    };
    emit_dataset(&world, &spec, dir.path()).unwrap();
    caption_jobs(&load_dataset(dir.path()).unwrap(), Some(n)).unwrap()
}

fn corpus_bytes(jobs: &[CaptionJob], cache: &CaptionCache, concurrency: usize) -> (Vec<u8>, usize) {
    let cfg = CorpusConfig {
        concurrency,
        ..Default::default()
    };
    let summary = synthesize_corpus(&MockVlmClient::from_jobs(0, jobs), jobs, cache, &cfg).unwrap();
    let out = tempfile::NamedTempFile::new().unwrap();
    write_corpus(out.path(), &summary.records).unwrap();
    (std::fs::read(out.path()).unwrap(), summary.client_calls)
}

#[test]
fn mock_corpus_is_complete_and_valid() {
    let jobs = jobs(10);
    let dir = tempfile::tempdir().unwrap();
    let cache = CaptionCache::new(dir.path()).unwrap();
    let summary = synthesize_corpus(&MockVlmClient::from_jobs(0, &jobs), &jobs, &cache, &CorpusConfig::default()).unwrap();
    assert_eq!(summary.records.len(), 10);
    assert_eq!(summary.errors, 0);
    for r in &summary.records {
        assert!(!r.v_cc.is_empty());
        assert_eq!(r.captions.len(), 4);
        assert!(r.passed(), "{}", r.id);
        for (&n, c) in &r.captions {
            assert!(word_count(c) <= n as usize);
        }
        assert!(word_count(&r.captions[&75]) >= word_count(&r.captions[&30]));
    }
}

#[test]
fn output_does_not_depend_on_concurrency_or_cache_state() {
    let jobs = jobs(12);
    let (d1, d4) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (c1, c4) = (CaptionCache::new(d1.path()).unwrap(), CaptionCache::new(d4.path()).unwrap());
    let (serial, calls) = corpus_bytes(&jobs, &c1, 1);
    let (parallel, _) = corpus_bytes(&jobs, &c4, 4);
    assert!(calls > 0);
    assert_eq!(serial, parallel);
    let (warm, warm_calls) = corpus_bytes(&jobs, &c1, 3);
    assert_eq!(warm_calls, 0);
    assert_eq!(warm, serial);
}

#[test]
fn corpus_file_round_trips() {
    let jobs = jobs(5);
    let dir = tempfile::tempdir().unwrap();
    let cache = CaptionCache::new(dir.path().join("cache")).unwrap();
    let summary = synthesize_corpus(&MockVlmClient::from_jobs(0, &jobs), &jobs, &cache, &CorpusConfig::default()).unwrap();
    let path = dir.path().join("captions.jsonl");
    write_corpus(&path, &summary.records).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), summary.records);
}

#[test]
fn stop_words_do_not_count_towards_grounding() {
    // Content words of the reference are {dog, red, sofa}; only `sofa` survives.
    let r = validate_caption("a cat on a sofa", "a dog on a red sofa", 30);
    assert!((r.grounding_overlap - 1.0 / 3.0).abs() < 1e-12);
    assert!(!r.passed);
    let same = validate_caption("a dog on a red sofa", "a dog on a red sofa", 30);
    assert_eq!(same.grounding_overlap, 1.0);
    assert!(same.passed);
}

/// Ignores its instructions and always answers with the same text.
struct Stubborn(String);

impl VlmClient for Stubborn {
    fn id(&self) -> String {
        "stubborn".into()
    }
    fn complete(&self, _: &VlmRequest) -> mindsem::Result<String> {
        Ok(self.0.clone())
    }
}

#[test]
fn ignored_budget_falls_back_to_truncation() {
    let raw: String = (0..100).map(|i| format!("dog{i} ")).collect::<String>() + "dog sofa";
    let raw = format!("dog sofa {raw}");
    let out = round_two_condense(&Stubborn(raw.clone()), &raw, "a dog on a sofa", 30, &CondenseOptions::default()).unwrap();
    assert_eq!(out.fallback, Some(Fallback::Truncated));
    assert_eq!(word_count(&out.caption), 30);
    assert_eq!(out.client_attempts, 3);
}

/// Replays canned replies and records what it was sent.
struct Scripted {
    replies: Mutex<Vec<Result<Value, TransportError>>>,
    seen: Arc<Mutex<Vec<(Option<String>, Value)>>>,
    calls: AtomicUsize,
}

impl Scripted {
    fn new(mut replies: Vec<Result<Value, TransportError>>) -> Self {
        replies.reverse();
        Self {
            replies: Mutex::new(replies),
            seen: Arc::default(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl Transport for Scripted {
    fn post_json(&self, _: &str, bearer: Option<&str>, body: &Value, _: Duration) -> Result<Value, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen.lock().unwrap().push((bearer.map(str::to_string), body.clone()));
        self.replies.lock().unwrap().pop().unwrap_or(Err(TransportError::Timeout))
    }
}

fn quick() -> HttpClientConfig {
    HttpClientConfig {
        backoff_ms: 0,
        max_retries: 2,
        ..Default::default()
    }
}

#[test]
fn repeated_timeouts_surface_the_attempt_count() {
    let client = HttpVlmClient::new(quick(), Box::new(Scripted::new(vec![])));
    match client.complete(&VlmRequest::text("hello")) {
        Err(Error::Client { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn transient_failure_is_retried_and_both_reply_shapes_parse() {
    let transport = Scripted::new(vec![
        Err(TransportError::Status(503)),
        Ok(json!({"choices": [{"message": {"content": "a dog"}}]})),
        Ok(json!({"text": "a sofa"})),
    ]);
    let seen = transport.seen.clone();
    let client = HttpVlmClient::new(quick(), Box::new(transport)).with_api_key(Some("k".into()));
    let req = VlmRequest {
        image_png: Some(vec![1, 2, 3]),
        ..VlmRequest::text("describe")
    };
    assert_eq!(client.complete(&req).unwrap(), "a dog");
    assert_eq!(client.complete(&VlmRequest::text("again")).unwrap(), "a sofa");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].0.as_deref(), Some("k"));
    assert_eq!(seen[0].1["image"]["data"], "AQID");
    assert_eq!(seen[0].1["messages"][0]["content"], "describe");
    assert!(seen[2].1.get("image").is_none());
}

#[test]
fn empty_reply_is_an_error() {
    let client = HttpVlmClient::new(quick(), Box::new(Scripted::new(vec![Ok(json!({"text": "  "}))])));
    assert!(client.complete(&VlmRequest::text("x")).is_err());
}

const VOCAB: &[&str] = &["dog", "red", "sofa", "tree", "car", "blue", "sky", "the", "a", "on", "in", "person"];

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB), 1..max).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn condensing_always_yields_a_valid_caption(
        reference in sentence(8),
        raw in sentence(60),
        answer in sentence(90),
        budget in 8usize..40,
    ) {
        prop_assume!(mindsem::mimevis::content_words(&reference).len() > 0);
        let out = round_two_condense(&Stubborn(answer), &raw, &reference, budget, &CondenseOptions::default()).unwrap();
        prop_assert!(out.report.passed);
        prop_assert!(word_count(&out.caption) <= budget);
    }

    #[test]
    fn budget_rule_is_exact(n in 1usize..60, extra in 0usize..3) {
        let caption = vec!["dog"; n + extra].join(" ");
        let r = validate_caption(&caption, "dog", n);
        prop_assert_eq!(r.word_count, n + extra);
        prop_assert_eq!(r.passed, extra == 0);
    }
}
