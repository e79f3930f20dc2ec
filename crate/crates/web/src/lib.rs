//! WebAssembly bindings for the browser demo.
//!
//! Every export returns a JSON string; the page parses it. The plain
//! functions are usable (and tested) natively.

use mindsem::imageio::encode_png;
use mindsem::metrics::{pixcorr, ssim};
use mindsem::mimevis::{
    reference_caption, round_one_describe, round_two_condense, validate_caption, CondenseOptions, MockVlmClient,
    PromptTemplates, DEFAULT_BUDGETS,
};
use mindsem::synthdata::{generate_world, GroundTruthWorld, WorldConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub fn world(seed: u64) -> mindsem::Result<GroundTruthWorld> {
    generate_world(&WorldConfig {
        seed,
        ..WorldConfig::default()
    })
}

/// Active object names of a scene, most salient first.
pub fn objects(world: &GroundTruthWorld, scene: &[f64]) -> Vec<String> {
    let names = world.config.category_names();
    let margins = world.label_margins(scene);
    let salience = |c: usize| margins[c] / world.label_threshold[c].max(1e-12);
    let mut on: Vec<usize> = world
        .labels(scene)
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(c, _)| c)
        .collect();
    on.sort_by(|&a, &b| salience(b).total_cmp(&salience(a)).then(a.cmp(&b)));
    on.into_iter().map(|c| names[c].to_string()).collect()
}

/// One stimulus with its reference caption and mock captions at each budget.
pub fn stimulus_value(world_seed: u64, scene_seed: u64) -> mindsem::Result<Value> {
    let w = world(world_seed)?;
    let scene = w.scene(scene_seed);
    let pixels = w.image(&scene);
    let side = w.config.image_side;
    let names = objects(&w, &scene);
    let png = encode_png(&pixels, side)?;
    let mut client = MockVlmClient::new(world_seed);
    client.register(&png, names.clone());
    let raw = round_one_describe(&client, &png, &PromptTemplates::default())?;
    let v_cc = reference_caption(&names);
    let mut captions = serde_json::Map::new();
    for n in DEFAULT_BUDGETS {
        let c = round_two_condense(&client, &raw, &v_cc, n as usize, &CondenseOptions::default())?;
        captions.insert(
            n.to_string(),
            json!({ "text": c.caption, "words": c.report.word_count, "grounding": c.report.grounding_overlap }),
        );
    }
    Ok(json!({
        "side": side,
        "pixels": pixels,
        "objects": names,
        "v_cc": v_cc,
        "description": raw,
        "captions": captions,
    }))
}

pub fn caption_report_value(caption: &str, reference: &str, budget: usize) -> Value {
    let r = validate_caption(caption, reference, budget);
    json!({
        "word_count": r.word_count,
        "budget": r.budget,
        "grounding_overlap": r.grounding_overlap,
        "threshold": r.threshold,
        "passed": r.passed,
        "violation": r.violation(),
    })
}

/// Pixel correlation and SSIM between two scenes of the same world.
pub fn compare_value(world_seed: u64, scene_a: u64, scene_b: u64) -> mindsem::Result<Value> {
    let w = world(world_seed)?;
    let side = w.config.image_side;
    let a = w.image(&w.scene(scene_a));
    let b = w.image(&w.scene(scene_b));
    Ok(json!({
        "side": side,
        "a": a,
        "b": b,
        "pixcorr": pixcorr(&a, &b)?,
        "ssim": ssim(&a, &b, side)?,
    }))
}

fn to_js(v: mindsem::Result<Value>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn stimulus(world_seed: u32, scene_seed: u32) -> Result<String, JsError> {
    to_js(stimulus_value(world_seed.into(), scene_seed.into()))
}

#[wasm_bindgen]
pub fn check_caption(caption: &str, reference: &str, budget: u32) -> String {
    caption_report_value(caption, reference, budget as usize).to_string()
}

#[wasm_bindgen]
pub fn compare(world_seed: u32, scene_a: u32, scene_b: u32) -> Result<String, JsError> {
    to_js(compare_value(world_seed.into(), scene_a.into(), scene_b.into()))
}
