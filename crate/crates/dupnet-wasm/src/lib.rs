//! Browser bindings for the DupNet toolkit. Three interactive operations:
//! cost analysis of an editable network config, activation-quantizer
//! transfer curves, and detection on seeded synthetic images with a small
//! embedded pre-trained model. All results cross the boundary as JSON
//! strings; the page under `www/` renders them without any framework.

use dupnet_core::config::NetworkSpec;
use dupnet_core::cost::{analyze, CostMode};
use dupnet_core::model::InferPath;
use dupnet_core::presets;
use dupnet_core::quant::{quantize_act, QuantSpec};
use dupnet_core::synth::{generate, SynthDatasetSpec};
use dupnet_core::tensor::Tensor;
use dupnet_core::weights::load_weights;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Desk-scale detector weights trained on the synthetic set; see the
/// README for the exact training command.
const DEMO_WEIGHTS: &[u8] = include_bytes!("../assets/desk64.dupw");

#[derive(Serialize)]
struct CostRowJson {
    name: String,
    madds: u64,
    mflops: f64,
    weight_bits: u64,
    weight_kb: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    opt_mflops: Option<f64>,
}

#[derive(Serialize)]
struct CostReportJson {
    rows: Vec<CostRowJson>,
    total_mflops: f64,
    total_weight_kb: f64,
}

fn analyze_cfg_impl(cfg_text: &str, optimized: bool) -> Result<String, String> {
    let spec = NetworkSpec::parse(cfg_text).map_err(|e| e.to_string())?;
    let mode = if optimized {
        CostMode::DupOptimized
    } else {
        CostMode::DupFull
    };
    let report = analyze(&spec, mode);
    let json = CostReportJson {
        total_mflops: report.total_mflops(),
        total_weight_kb: report.total_weight_kb(),
        rows: report
            .rows
            .iter()
            .map(|r| CostRowJson {
                name: r.name.clone(),
                madds: r.madds,
                mflops: r.mflops(),
                weight_bits: r.weight_bits,
                weight_kb: r.weight_kb(),
                opt_mflops: r.opt_mflops(),
            })
            .collect(),
    };
    serde_json::to_string(&json).map_err(|e| e.to_string())
}

/// Cost report for a config text as JSON rows plus totals.
#[wasm_bindgen]
pub fn analyze_cfg(cfg_text: &str, optimized: bool) -> Result<String, JsValue> {
    analyze_cfg_impl(cfg_text, optimized).map_err(|e| JsValue::from_str(&e))
}

/// Embedded preset config text by name.
#[wasm_bindgen]
pub fn preset_cfg_text(name: &str) -> Result<String, JsValue> {
    presets::preset_cfg(name)
        .map(|s| s.to_string())
        .ok_or_else(|| JsValue::from_str(&format!("unknown preset '{name}'")))
}

#[wasm_bindgen]
pub fn preset_names_json() -> String {
    serde_json::to_string(presets::preset_names()).expect("static list serializes")
}

#[derive(Serialize)]
struct CurveJson {
    x: Vec<f64>,
    y: Vec<f64>,
    delta: f64,
    levels: u32,
}

fn quantizer_curve_impl(a_bits: u8, alpha: f64, x_max: f64, steps: u32) -> Result<String, String> {
    let spec = QuantSpec::new(a_bits, 1, alpha).map_err(|e| e.to_string())?;
    let steps = steps.clamp(2, 4096) as usize;
    let xs: Vec<f64> = (0..steps)
        .map(|i| -0.25 * x_max + 1.25 * x_max * i as f64 / (steps - 1) as f64)
        .collect();
    let input = Tensor::new(1, 1, 1, xs.len(), xs.clone()).map_err(|e| e.to_string())?;
    let q = quantize_act(&input, &spec).map_err(|e| e.to_string())?;
    let y = q.dequantize();
    let json = CurveJson {
        x: xs,
        y: y.data().to_vec(),
        delta: spec.delta(),
        levels: (spec.max_code() + 1) as u32,
    };
    serde_json::to_string(&json).map_err(|e| e.to_string())
}

/// Transfer curve of the clipped activation quantizer (dequantized
/// output against input) over [-x_max/4, x_max].
#[wasm_bindgen]
pub fn quantizer_curve(a_bits: u8, alpha: f64, x_max: f64, steps: u32) -> Result<String, JsValue> {
    quantizer_curve_impl(a_bits, alpha, x_max, steps).map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize)]
struct BoxJson {
    score: f64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize)]
struct DetectDemoJson {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    boxes: Vec<BoxJson>,
    ground_truth: Vec<BoxJson>,
}

fn detect_demo_impl(seed: u64, threshold: f64, packed: bool) -> Result<String, String> {
    let spec = NetworkSpec::parse(presets::DESK64_CFG).map_err(|e| e.to_string())?;
    let model = load_weights(DEMO_WEIGHTS, &spec).map_err(|e| e.to_string())?;
    let image = generate(&SynthDatasetSpec {
        num_images: 1,
        seed,
        ..Default::default()
    })
    .pop()
    .expect("one image requested");
    let path = if packed {
        InferPath::Packed
    } else {
        InferPath::Reference
    };
    let boxes = model
        .detect(&image.to_tensor(), threshold, path)
        .map_err(|e| e.to_string())?;
    let json = DetectDemoJson {
        width: image.width,
        height: image.height,
        pixels: image.pixels.clone(),
        boxes: boxes
            .iter()
            .map(|b| BoxJson {
                score: b.score,
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
            })
            .collect(),
        ground_truth: image
            .boxes
            .iter()
            .map(|g| BoxJson {
                score: 1.0,
                cx: g.cx,
                cy: g.cy,
                w: g.w,
                h: g.h,
            })
            .collect(),
    };
    serde_json::to_string(&json).map_err(|e| e.to_string())
}

/// Runs the embedded detector on a seeded synthetic image; returns the
/// image pixels, detections and ground truth as JSON.
#[wasm_bindgen]
pub fn detect_demo(seed: u32, threshold: f64, packed: bool) -> Result<String, JsValue> {
    detect_demo_impl(seed as u64, threshold, packed).map_err(|e| JsValue::from_str(&e))
}
