use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::format::{sha256_hex, write_atomic};
use crate::imageio::encode_png;
use crate::mimevis::{
    reference_caption, round_one_describe, round_two_condense, validate_caption_with, CaptionSet, CondenseOptions,
    MockVlmClient, PromptTemplates, Provenance, ValidationReport, VlmClient, VlmRequest, DEFAULT_BUDGETS,
    DEFAULT_GROUNDING_THRESHOLD,
};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionJob {
    pub id: u64,
    pub png: Vec<u8>,
    /// Object names, most salient first.
    pub names: Vec<String>,
}

/// One job per stimulus (train then test), optionally only the first `limit`.
pub fn caption_jobs(dataset: &Dataset, limit: Option<usize>) -> Result<Vec<CaptionJob>> {
    let names = dataset.config().category_names();
    let side = dataset.config().image_side;
    dataset
        .all_ids()
        .take(limit.unwrap_or(usize::MAX))
        .map(|id| {
            let row = dataset.row_of(id)?;
            let scene: Vec<f64> = dataset.scenes.row(row).iter().map(|&v| f64::from(v)).collect();
            let margins = dataset.world.label_margins(&scene);
            let thresholds = &dataset.world.label_threshold;
            let mut on: Vec<usize> = dataset
                .labels_of(id)?
                .iter()
                .enumerate()
                .filter(|(_, b)| **b)
                .map(|(c, _)| c)
                .collect();
            let salience = |c: usize| margins[c] / thresholds[c].max(1e-12);
            on.sort_by(|&a, &b| salience(b).total_cmp(&salience(a)).then(a.cmp(&b)));
            Ok(CaptionJob {
                id,
                png: encode_png(&dataset.pixels_of(id)?, side)?,
                names: on.iter().map(|&c| names[c].to_string()).collect(),
            })
        })
        .collect()
}

impl MockVlmClient {
    pub fn from_jobs(seed: u64, jobs: &[CaptionJob]) -> Self {
        let mut m = Self::new(seed);
        for j in jobs {
            m.register(&j.png, j.names.clone());
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub budgets: Vec<u32>,
    pub concurrency: usize,
    pub max_reprompts: usize,
    pub threshold: f64,
    pub templates: PromptTemplates,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            budgets: DEFAULT_BUDGETS.to_vec(),
            concurrency: 4,
            max_reprompts: 2,
            threshold: DEFAULT_GROUNDING_THRESHOLD,
            templates: PromptTemplates::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::config("budgets", "need at least one positive word budget"));
        }
        if self.concurrency == 0 {
            return Err(Error::config("concurrency", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must lie in [0, 1]"));
        }
        self.templates.validate()
    }

    fn condense_options(&self) -> CondenseOptions {
        CondenseOptions {
            templates: self.templates.clone(),
            max_reprompts: self.max_reprompts,
            threshold: self.threshold,
        }
    }
}

/// Directory of JSON files, one per key, written atomically.
#[derive(Debug, Clone)]
pub struct CaptionCache {
    pub dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    id: u64,
    slot: String,
    template: String,
    text: String,
}

impl CaptionCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn path(&self, id: u64, slot: &str, template: &str) -> PathBuf {
        let key = sha256_hex(format!("{id}\u{1f}{slot}\u{1f}{template}").as_bytes());
        self.dir.join(format!("{}.json", &key[..32]))
    }

    pub fn get(&self, id: u64, slot: &str, template: &str) -> Option<String> {
        let bytes = std::fs::read(self.path(id, slot, template)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        (entry.id == id && entry.slot == slot && entry.template == template).then_some(entry.text)
    }

    pub fn put(&self, id: u64, slot: &str, template: &str, text: &str) -> Result<()> {
        let entry = CacheEntry {
            id,
            slot: slot.into(),
            template: template.into(),
            text: text.into(),
        };
        let bytes = serde_json::to_vec(&entry).map_err(|e| Error::json("cache entry", e))?;
        write_atomic(&self.path(id, slot, template), &bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub id: u64,
    pub v_cc: String,
    pub captions: BTreeMap<u32, String>,
    pub reports: BTreeMap<u32, ValidationReport>,
    pub provenance: Provenance,
    pub error: Option<String>,
}

impl CorpusRecord {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("id".into(), self.id.into());
        m.insert("v_cc".into(), self.v_cc.clone().into());
        for (n, c) in &self.captions {
            m.insert(format!("v_{n}"), c.clone().into());
        }
        let reports: Map<String, Value> = self
            .reports
            .iter()
            .map(|(n, r)| (format!("v_{n}"), serde_json::to_value(r).expect("report serialises")))
            .collect();
        m.insert("validation".into(), reports.into());
        m.insert(
            "provenance".into(),
            serde_json::to_value(&self.provenance).expect("provenance serialises"),
        );
        m.insert("error".into(), self.error.clone().into());
        Value::Object(m)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let bad = |field: &str, why: &str| Error::format(field, why.to_string());
        let obj = value.as_object().ok_or_else(|| bad("record", "not an object"))?;
        let id = obj.get("id").and_then(Value::as_u64).ok_or_else(|| bad("id", "missing"))?;
        let v_cc = obj
            .get("v_cc")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("v_cc", "missing"))?
            .to_string();
        let mut captions = BTreeMap::new();
        for (k, v) in obj {
            if let Some(n) = k.strip_prefix("v_").and_then(|n| n.parse::<u32>().ok()) {
                captions.insert(n, v.as_str().ok_or_else(|| bad(k, "not a string"))?.to_string());
            }
        }
        let mut reports = BTreeMap::new();
        if let Some(Value::Object(rs)) = obj.get("validation") {
            for (k, v) in rs {
                let n = k
                    .strip_prefix("v_")
                    .and_then(|n| n.parse::<u32>().ok())
                    .ok_or_else(|| bad("validation", "bad key"))?;
                reports.insert(n, serde_json::from_value(v.clone()).map_err(|e| Error::format("validation", e.to_string()))?);
            }
        }
        let provenance = serde_json::from_value(obj.get("provenance").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::format("provenance", e.to_string()))?;
        let error = obj.get("error").and_then(Value::as_str).map(str::to_string);
        Ok(Self {
            id,
            v_cc,
            captions,
            reports,
            provenance,
            error,
        })
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.reports.values().all(|r| r.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub records: Vec<CorpusRecord>,
    pub errors: usize,
    pub client_calls: usize,
    pub cache_hits: usize,
}

struct Counting<'a> {
    inner: &'a dyn VlmClient,
    calls: AtomicUsize,
}

impl VlmClient for Counting<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn complete(&self, request: &VlmRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }
}

fn caption_one(
    client: &dyn VlmClient,
    job: &CaptionJob,
    cache: &CaptionCache,
    cfg: &CorpusConfig,
    hits: &AtomicUsize,
) -> Result<(String, BTreeMap<u32, String>)> {
    let v_cc = reference_caption(&job.names);
    let r1 = cfg.templates.round_one_hash();
    let r2 = cfg.templates.hash();
    let mut captions = BTreeMap::new();
    let mut raw: Option<String> = None;
    for &n in &cfg.budgets {
        let slot = format!("v_{n}");
        if let Some(text) = cache.get(job.id, &slot, &r2) {
            hits.fetch_add(1, Ordering::Relaxed);
            captions.insert(n, text);
            continue;
        }
        if raw.is_none() {
            raw = Some(match cache.get(job.id, "round_one", &r1) {
                Some(text) => {
                    hits.fetch_add(1, Ordering::Relaxed);
                    text
                }
                None => {
                    let text = round_one_describe(client, &job.png, &cfg.templates)?;
                    cache.put(job.id, "round_one", &r1, &text)?;
                    text
                }
            });
        }
        let out = round_two_condense(client, raw.as_deref().unwrap_or_default(), &v_cc, n as usize, &cfg.condense_options())?;
        if let Some(kind) = out.fallback {
            log::info!("stimulus {} budget {n}: used {kind:?} fallback", job.id);
        }
        cache.put(job.id, &slot, &r2, &out.caption)?;
        captions.insert(n, out.caption);
    }
    Ok((v_cc, captions))
}

/// Captions every job, consulting the cache first; failures become error records.
pub fn synthesize_corpus(
    client: &dyn VlmClient,
    jobs: &[CaptionJob],
    cache: &CaptionCache,
    cfg: &CorpusConfig,
) -> Result<CorpusSummary> {
    cfg.validate()?;
    let counting = Counting {
        inner: client,
        calls: AtomicUsize::new(0),
    };
    let hits = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CorpusRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let provenance = Provenance {
        client: client.id(),
        round_one_template: cfg.templates.round_one_hash(),
        round_two_template: cfg.templates.round_two_hash(),
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.concurrency.min(jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let record = match caption_one(&counting, job, cache, cfg, &hits) {
                    Ok((v_cc, captions)) => CorpusRecord {
                        id: job.id,
                        reports: captions
                            .iter()
                            .map(|(&n, c)| (n, validate_caption_with(c, &v_cc, n as usize, cfg.threshold)))
                            .collect(),
                        v_cc,
                        captions,
                        provenance: provenance.clone(),
                        error: None,
                    },
                    Err(e) => CorpusRecord {
                        id: job.id,
                        v_cc: reference_caption(&job.names),
                        captions: BTreeMap::new(),
                        reports: BTreeMap::new(),
                        provenance: provenance.clone(),
                        error: Some(e.to_string()),
                    },
                };
                slots.lock().expect("corpus slots")[i] = Some(record);
            });
        }
    });
    let records: Vec<CorpusRecord> = slots
        .into_inner()
        .expect("corpus slots")
        .into_iter()
        .map(|r| r.expect("every job produces a record"))
        .collect();
    let errors = records.iter().filter(|r| r.error.is_some()).count();
    if errors > 0 {
        log::warn!("{errors} of {} stimuli failed caption synthesis", records.len());
    }
    Ok(CorpusSummary {
        records,
        errors,
        client_calls: counting.calls.into_inner(),
        cache_hits: hits.into_inner(),
    })
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r.to_json()).map_err(|e| Error::json("corpus record", e))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let v: Value = serde_json::from_str(l).map_err(|e| Error::format(format!("line {}", i + 1), e.to_string()))?;
            CorpusRecord::from_json(&v)
        })
        .collect()
}

/// Caption sets for every record without an error.
pub fn corpus_captions(records: &[CorpusRecord]) -> BTreeMap<u64, CaptionSet> {
    records
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| {
            (
                r.id,
                CaptionSet {
                    v_cc: r.v_cc.clone(),
                    captions: r.captions.clone(),
                    provenance: r.provenance.clone(),
                },
            )
        })
        .collect()
}
