use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::info;
use mindsem::format::{hash_of, read_json, read_tensor, write_atomic, write_json};
use mindsem::metrics::{
    evaluate, roi_importance, run_2afc, svg::heatmap, write_evaluation, FeatureJudge, Judge, RandomJudge,
    TwoAfcSpec, ROI_GROUPS,
};
use mindsem::mimevis::{
    caption_jobs, corpus_captions, read_corpus, synthesize_corpus, write_corpus, CaptionCache, CorpusConfig,
    Granularity, HttpClientConfig, HttpVlmClient, MockVlmClient, VlmClient,
};
use mindsem::nncore::Real;
use mindsem::pipeline::{load_model, save_model, train, Mode, TrainConfig, TrainingData};
use mindsem::renderer::{load_renderer, save_renderer, train_decoder, RenderPairs, RendererConfig};
use mindsem::synthdata::{emit_dataset, generate_world, load_dataset, Dataset, DatasetSpec, WorldConfig};
use mindsem::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Name of the resolved training config stored next to a checkpoint.
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

/// What a finished subcommand reports to the run log.
pub struct Outcome {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub details: Value,
}

/// Settings shared by every subcommand.
pub struct Globals {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Reads a JSON config, or the default when no path is given. Parse
/// failures become config errors naming the offending field.
pub fn read_config<V: DeserializeOwned + Default>(path: Option<&Path>) -> Result<V> {
    let Some(path) = path else {
        return Ok(V::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::config(if field == "." { "config".to_string() } else { field }, e.into_inner().to_string())
    })
}

fn artifact(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_with_captions(data: &Path, captions: Option<&Path>, granularity: Granularity) -> Result<Dataset> {
    let mut ds = load_dataset(data)?;
    match (captions, granularity) {
        (Some(path), _) => ds.attach_captions(corpus_captions(&read_corpus(path)?)),
        (None, Granularity::Full) => {}
        (None, g) => {
            return Err(Error::config(
                "captions",
                format!("granularity `{g}` needs a caption corpus; pass --captions"),
            ))
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub dataset: DatasetSpec,
}

pub fn gen_data(g: &Globals, config: Option<&Path>, out: &Path) -> Result<Outcome> {
    let mut cfg: DataConfig = read_config(config)?;
    if let Some(seed) = g.seed {
        cfg.world.seed = seed;
    }
    cfg.world.validate()?;
    let world = generate_world(&cfg.world)?;
    let manifest = emit_dataset(&world, &cfg.dataset, out)?;
    info!(
        "dataset with {} train / {} test stimuli written to {}",
        manifest.train_ids.len(),
        manifest.test_ids.len(),
        out.display()
    );
    let mut artifacts = vec![artifact(out, mindsem::synthdata::MANIFEST_FILE)];
    artifacts.extend(manifest.files.values().map(|f| artifact(out, f)));
    Ok(Outcome {
        config_hash: hash_of(&cfg),
        seed: cfg.world.seed,
        artifacts,
        details: Value::Null,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Mock,
    Http,
}

pub struct CaptionArgs<'a> {
    pub data: &'a Path,
    pub client: ClientKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub budgets: Option<Vec<u32>>,
    pub limit: Option<usize>,
    pub cache: Option<PathBuf>,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn gen_captions(g: &Globals, a: CaptionArgs<'_>) -> Result<Outcome> {
    let mut cfg: CorpusConfig = read_config(a.config)?;
    if let Some(b) = a.budgets {
        cfg.budgets = b;
    }
    if let Some(t) = g.threads {
        cfg.concurrency = t;
    }
    cfg.validate()?;
    let seed = g.seed.unwrap_or(0);
    let ds = load_dataset(a.data)?;
    let jobs = caption_jobs(&ds, a.limit)?;
    let client: Box<dyn VlmClient> = match a.client {
        ClientKind::Mock => Box::new(MockVlmClient::from_jobs(seed, &jobs)),
        ClientKind::Http => {
            let mut http = HttpClientConfig::default();
            if let Some(e) = a.endpoint {
                http.endpoint = e;
            }
            if let Some(m) = a.model {
                http.model = m;
            }
            Box::new(HttpVlmClient::with_ureq(http))
        }
    };
    create_dir(a.out)?;
    let cache = CaptionCache::new(a.cache.unwrap_or_else(|| a.out.join("cache")))?;
    let summary = synthesize_corpus(client.as_ref(), &jobs, &cache, &cfg)?;
    let path = a.out.join("captions.jsonl");
    write_corpus(&path, &summary.records)?;
    let passed = summary.records.iter().filter(|r| r.passed()).count();
    info!(
        "{} records ({passed} passed validation, {} errors), {} client calls, {} cache hits",
        summary.records.len(),
        summary.errors,
        summary.client_calls,
        summary.cache_hits
    );
    // Concurrency only affects scheduling, so it stays out of the hash.
    let hashed = CorpusConfig {
        concurrency: 0,
        ..cfg.clone()
    };
    Ok(Outcome {
        config_hash: hash_of(&(hashed, a.client, seed, a.limit)),
        seed,
        artifacts: vec![path.display().to_string()],
        details: json!({
            "records": summary.records.len(),
            "passed": passed,
            "errors": summary.errors,
            "client_calls": summary.client_calls,
            "cache_hits": summary.cache_hits,
        }),
    })
}

/// Everything `train` needs: the encoder run and the renderer fitted after it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub renderer: RendererConfig,
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub captions: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub mode: Option<String>,
    pub epochs: Option<usize>,
    pub renderer_epochs: Option<usize>,
    pub mixco: bool,
    pub granularity: Option<String>,
    pub freeze: Vec<String>,
    pub out: &'a Path,
}

fn write_renderer_history(dir: &Path, losses: &[f64]) -> Result<()> {
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l:.9e}\n"));
    }
    write_atomic(&dir.join("history.csv"), csv.as_bytes())
}

fn fit_renderer<T: Real>(
    pairs: RenderPairs,
    cfg: &RendererConfig,
    dir: &Path,
) -> Result<Vec<String>> {
    let (dec, losses) = train_decoder::<T>(&pairs, cfg)?;
    info!("renderer trained, final loss {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    save_renderer(dir, &dec)?;
    write_renderer_history(dir, &losses)?;
    Ok(vec![artifact(dir, mindsem::renderer::RENDERER_FILE), artifact(dir, "history.csv")])
}

fn renderer_pairs<T: Real>(
    model: &mindsem::pipeline::Model<T>,
    data: &TrainingData,
    cfg: &RendererConfig,
) -> Result<RenderPairs> {
    if cfg.teacher_forcing {
        Ok(RenderPairs::teacher_forced(data, model.mode == Mode::Full))
    } else {
        RenderPairs::from_pipeline(model, data)
    }
}

pub fn train_cmd<T: Real>(g: &Globals, a: TrainArgs<'_>) -> Result<Outcome> {
    let mut cfg: ExperimentConfig = read_config(a.config)?;
    let t = &mut cfg.train;
    if let Some(m) = &a.mode {
        t.mode = m.parse()?;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(e) = a.renderer_epochs {
        cfg.renderer.epochs = e;
    }
    if a.mixco {
        t.mixco = true;
    }
    if let Some(gr) = &a.granularity {
        t.granularity = gr.parse()?;
    }
    if !a.freeze.is_empty() {
        t.freeze = a.freeze.clone();
    }
    if let Some(seed) = g.seed {
        t.seed = seed;
        cfg.renderer.seed = seed;
    }
    cfg.train.validate()?;
    cfg.renderer.validate()?;
    let tc = &cfg.train;

    let ds = load_with_captions(a.data, a.captions, tc.granularity)?;
    let data = TrainingData::from_dataset(&ds, tc.granularity, tc.model.pooled_side)?;
    info!(
        "training {} on {} samples ({} subjects), granularity {}",
        tc.mode.label(),
        data.samples().len(),
        data.n_subjects(),
        tc.granularity
    );
    let (model, history) = train::<T>(&data, tc, |r| {
        info!("epoch {:>3} step {:>5} loss {:.6} lr {:.3e}", r.epoch, r.step, r.losses.total, r.lr);
    })?;

    create_dir(a.out)?;
    let hash = hash_of(&cfg);
    write_json(&a.out.join("config.json"), &cfg)?;
    write_atomic(&a.out.join("history.csv"), history.to_csv().as_bytes())?;
    let ckpt = a.out.join("checkpoint");
    save_model(&ckpt, &model, &hash)?;
    write_json(&ckpt.join(TRAIN_CONFIG_FILE), tc)?;
    let mut artifacts = vec![
        artifact(a.out, "config.json"),
        artifact(a.out, "history.csv"),
        artifact(&ckpt, mindsem::pipeline::CHECKPOINT_FILE),
    ];
    let pairs = renderer_pairs(&model, &data, &cfg.renderer)?;
    artifacts.extend(fit_renderer::<T>(pairs, &cfg.renderer, &a.out.join("renderer"))?);
    Ok(Outcome {
        config_hash: hash,
        seed: tc.seed,
        artifacts,
        details: json!({ "final_loss": history.totals().last() }),
    })
}

fn read_train_config(checkpoint: &Path) -> Result<TrainConfig> {
    read_json(&checkpoint.join(TRAIN_CONFIG_FILE))
}

pub struct RendererArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub captions: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub epochs: Option<usize>,
    pub teacher_forcing: bool,
    pub out: &'a Path,
}

pub fn train_renderer<T: Real>(g: &Globals, a: RendererArgs<'_>) -> Result<Outcome> {
    let mut cfg: RendererConfig = read_config(a.config)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.teacher_forcing {
        cfg.teacher_forcing = true;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let tc = read_train_config(a.checkpoint)?;
    let (model, manifest) = load_model::<T>(a.checkpoint)?;
    let ds = load_with_captions(a.data, a.captions, tc.granularity)?;
    let data = TrainingData::from_dataset(&ds, tc.granularity, model.config.pooled_side)?;
    let pairs = renderer_pairs(&model, &data, &cfg)?;
    let artifacts = fit_renderer::<T>(pairs, &cfg, a.out)?;
    Ok(Outcome {
        config_hash: hash_of(&(&cfg, &manifest.config_hash)),
        seed: cfg.seed,
        artifacts,
        details: Value::Null,
    })
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub renderer: &'a Path,
    pub data: &'a Path,
    pub captions: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn eval_cmd<T: Real>(a: EvalArgs<'_>) -> Result<Outcome> {
    let tc = read_train_config(a.checkpoint)?;
    let (model, manifest) = load_model::<T>(a.checkpoint)?;
    let renderer = load_renderer::<T>(a.renderer)?;
    let ds = load_with_captions(a.data, a.captions, tc.granularity)?;
    let eval = evaluate(&model, &renderer, &ds, tc.granularity, &manifest.config_hash)?;
    create_dir(a.out)?;
    let mut artifacts: Vec<String> = write_evaluation(a.out, &eval, ds.config().image_side)?
        .iter()
        .map(|n| artifact(a.out, n))
        .collect();
    let summary = json!({
        "label": eval.report.label,
        "granularity": tc.granularity,
        "config_hash": manifest.config_hash,
        "embedding_two_way": eval.embedding_two_way,
        "metrics": eval.report.mean,
    });
    write_json(&a.out.join("eval.json"), &summary)?;
    artifacts.push(artifact(a.out, "eval.json"));
    let m = &eval.report.mean;
    info!(
        "{}: PixCorr {:.3} SSIM {:.3} TwoWay(deep-B) {:.2}%",
        eval.report.label, m.pixcorr, m.ssim, m.two_way[3]
    );
    Ok(Outcome {
        config_hash: manifest.config_hash.clone(),
        seed: tc.seed,
        artifacts,
        details: summary,
    })
}

pub fn roi_map<T: Real>(checkpoints: &[PathBuf], out: &Path) -> Result<Outcome> {
    if checkpoints.is_empty() {
        return Err(Error::config("checkpoint", "pass at least one --checkpoint"));
    }
    create_dir(out)?;
    let mut seen = BTreeSet::new();
    let mut artifacts = Vec::new();
    let mut hashes = Vec::new();
    let mut summary = format!("granularity,subject,entropy,{}\n", ROI_GROUPS.join(","));
    for ckpt in checkpoints {
        let tc = read_train_config(ckpt)?;
        let g = tc.granularity;
        if !seen.insert(g.to_string()) {
            return Err(Error::config("checkpoint", format!("two checkpoints share granularity `{g}`")));
        }
        let (model, manifest) = load_model::<T>(ckpt)?;
        hashes.push(manifest.config_hash);
        let mut rows = Vec::new();
        for (k, layer) in model.swm.iter().enumerate() {
            let map = roi_importance(model.params.get(layer.weight), k, g)?;
            let name = format!("roi_s{k}_{g}.csv");
            write_atomic(&out.join(&name), map.to_csv().as_bytes())?;
            artifacts.push(artifact(out, &name));
            let totals: Vec<f64> = ROI_GROUPS.iter().map(|r| map.group_totals.get(*r).copied().unwrap_or(0.0)).collect();
            summary.push_str(&format!("{g},{k},{:.9e}", map.entropy));
            for t in &totals {
                summary.push_str(&format!(",{t:.9e}"));
            }
            summary.push('\n');
            rows.push((format!("subject {k}"), totals));
        }
        let svg = format!("roi_{g}.svg");
        let title = format!("ROI importance, granularity {g} ({})", ROI_GROUPS.join(" "));
        write_atomic(&out.join(&svg), heatmap(&title, &rows, 24).as_bytes())?;
        artifacts.push(artifact(out, &svg));
    }
    write_atomic(&out.join("roi_summary.csv"), summary.as_bytes())?;
    artifacts.push(artifact(out, "roi_summary.csv"));
    Ok(Outcome {
        config_hash: hash_of(&hashes),
        seed: 0,
        artifacts,
        details: Value::Null,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    Feature,
    Random,
}

pub struct TwoAfcArgs<'a> {
    pub a: &'a Path,
    pub b: &'a Path,
    pub data: &'a Path,
    pub subject: usize,
    pub judge: JudgeKind,
    pub judges: usize,
    pub sentinel_every: Option<usize>,
    pub out: &'a Path,
}

/// `dir/renders/subject<k>` when `dir` is an eval output, otherwise `dir`.
fn render_dir(dir: &Path, subject: usize) -> PathBuf {
    let nested = dir.join("renders").join(format!("subject{subject}"));
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_renders(dir: &Path, ids: &[u64]) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|id| Ok(read_tensor::<f64>(&dir.join(format!("recon_{id}.bin")))?.into_data()))
        .collect()
}

pub fn two_afc(g: &Globals, a: TwoAfcArgs<'_>) -> Result<Outcome> {
    if a.judges == 0 {
        return Err(Error::config("judges", "need at least one judge"));
    }
    let ds = load_dataset(a.data)?;
    let ids = &ds.manifest.test_ids;
    let ra = read_renders(&render_dir(a.a, a.subject), ids)?;
    let rb = read_renders(&render_dir(a.b, a.subject), ids)?;
    let originals = ids.iter().map(|&id| ds.pixels_of(id)).collect::<Result<Vec<_>>>()?;
    let mut spec = TwoAfcSpec {
        seed: g.seed.unwrap_or(0),
        ..Default::default()
    };
    if let Some(s) = a.sentinel_every {
        spec.sentinel_every = s;
    }
    let side = ds.config().image_side;
    let mut owned: Vec<Box<dyn Judge>> = (0..a.judges)
        .map(|j| -> Result<Box<dyn Judge>> {
            Ok(match a.judge {
                JudgeKind::Feature => Box::new(FeatureJudge::new(side)?),
                JudgeKind::Random => Box::new(RandomJudge::new(spec.seed.wrapping_add(j as u64))),
            })
        })
        .collect::<Result<_>>()?;
    let mut judges: Vec<&mut dyn Judge> = owned.iter_mut().map(|j| j.as_mut() as &mut dyn Judge).collect();
    let result = run_2afc(&spec, &mut judges, &ra, &rb, &originals)?;
    create_dir(a.out)?;
    write_json(&a.out.join("2afc.json"), &result)?;
    info!(
        "preference for A: {:.2}% (delta {:+.2}) over {} valid trials",
        result.rate, result.delta, result.valid_trials
    );
    Ok(Outcome {
        config_hash: hash_of(&(spec, a.judge, a.judges, a.subject)),
        seed: spec.seed,
        artifacts: vec![artifact(a.out, "2afc.json")],
        details: json!({ "rate": result.rate, "delta": result.delta, "valid_trials": result.valid_trials }),
    })
}
