//! Browser bindings for a small humanization workbench on synthetic data.

pub mod explore;

use wasm_bindgen::prelude::*;

fn to_json<T: serde::Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn overview() -> Result<String, JsValue> {
    to_json(Ok(explore::overview()))
}

#[wasm_bindgen(js_name = positionView)]
pub fn position_view(position: usize, tau_mlm: f64, tau_k: f64) -> Result<String, JsValue> {
    to_json(explore::position_view(position, tau_mlm, tau_k))
}

/// `tau_k <= 0` runs without guidance.
#[wasm_bindgen(js_name = runBatch)]
pub fn run_batch(
    method: &str,
    trajectories: usize,
    tau_mlm: f64,
    tau_k: f64,
    seed: u32,
    framework_all: bool,
) -> Result<String, JsValue> {
    let tau_k = (tau_k > 0.0).then_some(tau_k);
    to_json(explore::run_batch(method, trajectories, tau_mlm, tau_k, seed as u64, framework_all))
}

#[wasm_bindgen(js_name = checkLiabilities)]
pub fn check_liabilities(sequence: &str, canonical: &[u32]) -> Result<String, JsValue> {
    let canonical: Vec<usize> = canonical.iter().map(|&p| p as usize).collect();
    to_json(explore::check_liabilities(sequence, &canonical))
}
