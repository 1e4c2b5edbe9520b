//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export returns a JSON string; the plain `*_json` functions hold the
//! logic so they can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use scenic::curation::ColorHistogram;
use scenic::evaluation::compute_metrics;
use scenic::model::PredictionBreakdown;
use scenic::scoring::fuse_scores;

/// Order of the values accepted by [`fuse`].
pub const BREAKDOWN_FIELDS: [&str; 8] = [
    "global_input",
    "global_reference",
    "global_relative",
    "local_relative",
    "emotion_target",
    "emotion_assistant",
    "emotion_difference",
    "reference_score",
];

#[derive(Serialize)]
struct Fused {
    z_cr: f64,
    z_ea: f64,
    z: f64,
    calibrated: f64,
    /// Each term summed into `z`, with its value.
    terms: Vec<(&'static str, f64)>,
}

pub fn fuse_json(values: &[f64]) -> Result<String, String> {
    let [gi, gq, grel, lrel, et, ea, ed, rs]: [f64; 8] = values
        .try_into()
        .map_err(|_| format!("expected {} values, got {}", BREAKDOWN_FIELDS.len(), values.len()))?;
    let b = PredictionBreakdown {
        global_input: gi,
        global_reference: gq,
        global_relative: grel,
        local_relative: lrel,
        emotion_target: et,
        emotion_assistant: ea,
        emotion_difference: ed,
        reference_score: rs,
    };
    let f = fuse_scores(&b).map_err(|e| e.to_string())?;
    let out = Fused {
        z_cr: f.z_cr,
        z_ea: f.z_ea,
        z: f.z,
        calibrated: f.calibrated,
        terms: vec![
            ("global_input", gi),
            ("global_relative", grel),
            ("local_relative", lrel),
            ("reference_score x2", 2.0 * rs),
            ("emotion_assistant", ea),
            ("emotion_difference", ed),
        ],
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Parses numbers separated by commas, whitespace or newlines.
pub fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

pub fn metrics_json(pred: &str, truth: &str, threshold: f64) -> Result<String, String> {
    let (p, t) = (parse_numbers(pred)?, parse_numbers(truth)?);
    let m = compute_metrics(&p, &t, threshold).map_err(|e| e.to_string())?;
    serde_json::to_string(&m).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct HistogramComparison {
    distance: f64,
    duplicate: bool,
    bins_per_channel: usize,
    /// Most populated bins of each image as `(bin, mass)`.
    top_a: Vec<(usize, f64)>,
    top_b: Vec<(usize, f64)>,
}

fn histogram_of(bytes: &[u8], bins: usize) -> Result<ColorHistogram, String> {
    let img = image::load_from_memory(bytes).map_err(|e| format!("cannot decode image: {e}"))?;
    ColorHistogram::of_image(&img.to_rgb8(), bins).map_err(|e| e.to_string())
}

fn top_bins(h: &ColorHistogram, n: usize) -> Vec<(usize, f64)> {
    let mut bins: Vec<(usize, f64)> = h.bins().iter().copied().enumerate().filter(|(_, m)| *m > 0.0).collect();
    bins.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    bins.truncate(n);
    bins
}

pub fn histogram_json(a: &[u8], b: &[u8], bins: usize, threshold: f64) -> Result<String, String> {
    let (ha, hb) = (histogram_of(a, bins)?, histogram_of(b, bins)?);
    let distance = ha.distance(&hb);
    let out = HistogramComparison {
        distance,
        duplicate: distance < threshold,
        bins_per_channel: bins,
        top_a: top_bins(&ha, 5),
        top_b: top_bins(&hb, 5),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Fuses eight sub-predictions, in [`BREAKDOWN_FIELDS`] order, into the final score.
#[wasm_bindgen]
pub fn fuse(values: &[f64]) -> Result<String, JsValue> {
    fuse_json(values).map_err(|e| JsValue::from_str(&e))
}

/// ACC, MSE, SRCC and LCC of two pasted number lists.
#[wasm_bindgen]
pub fn metrics(pred: &str, truth: &str, threshold: f64) -> Result<String, JsValue> {
    metrics_json(pred, truth, threshold).map_err(|e| JsValue::from_str(&e))
}

/// L1 distance between the colour histograms of two encoded images.
#[wasm_bindgen]
pub fn histogram_distance(a: &[u8], b: &[u8], bins: usize, threshold: f64) -> Result<String, JsValue> {
    histogram_json(a, b, bins, threshold).map_err(|e| JsValue::from_str(&e))
}
