//! WebAssembly bindings for a static demo page.
//!
//! Three operations are exported: temperature pooling of a relevance
//! matrix, the discounted perception reward of each agent turn, and
//! candidate ranking by length-normalised LM score mixed with the
//! classifier score. Each has a plain Rust form returning `Result<_, String>`
//! so it can be tested natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use persona_core::metrics::rank_desc;
use persona_core::neural::Matrix;
use persona_core::receiver::{agg, cumulative_score};
use persona_core::selfplay::reward_persona_perception;
use persona_core::transmitter::combined_score;
use wasm_bindgen::prelude::*;

/// Pooled view of a row-major relevance matrix.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Pooling {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    row_scores: Vec<f64>,
    cumulative: f64,
}

#[wasm_bindgen]
impl Pooling {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major pooling weights; each row sums to one.
    #[wasm_bindgen(getter)]
    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    #[wasm_bindgen(getter, js_name = rowScores)]
    pub fn row_scores(&self) -> Vec<f64> {
        self.row_scores.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn cumulative(&self) -> f64 {
        self.cumulative
    }
}

pub fn pool(values: &[f64], cols: usize, tau: f64) -> Result<Pooling, String> {
    if cols == 0 || values.is_empty() || values.len() % cols != 0 {
        return Err(format!("{} values do not fill rows of {cols}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("values must be finite".into());
    }
    let rows = values.len() / cols;
    let u = Matrix::from_shape_vec((rows, cols), values.to_vec()).map_err(|e| e.to_string())?;
    let mut weights = Vec::with_capacity(values.len());
    let mut row_scores = Vec::with_capacity(rows);
    for row in values.chunks(cols) {
        row_scores.push(agg(row, tau).map_err(|e| e.to_string())?);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let e: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        weights.extend(e.iter().map(|w| w / z));
    }
    let cumulative = cumulative_score(&u, tau).map_err(|e| e.to_string())?;
    Ok(Pooling {
        rows,
        cols,
        weights,
        row_scores,
        cumulative,
    })
}

/// Discounted perception reward of every agent turn, `n = 1..=N`.
pub fn perception_rewards(agent: &[f64], user: &[f64], gamma: f64) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(format!("gamma {gamma} outside [0, 1]"));
    }
    (1..=agent.len())
        .map(|n| reward_persona_perception(agent, user, n, gamma).map_err(|e| e.to_string()))
        .collect()
}

#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    order: Vec<u32>,
    scores: Vec<f64>,
}

#[wasm_bindgen]
impl Ranking {
    /// Candidate indices, best first.
    #[wasm_bindgen(getter)]
    pub fn order(&self) -> Vec<u32> {
        self.order.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn scores(&self) -> Vec<f64> {
        self.scores.clone()
    }
}

pub fn rank(lm_logprobs: &[f64], lengths: &[u32], nup_logprobs: &[f64], alpha: f64) -> Result<Ranking, String> {
    let n = lm_logprobs.len();
    if n == 0 || lengths.len() != n || nup_logprobs.len() != n {
        return Err(format!(
            "need equal non-empty columns, got {n}, {}, {}",
            lengths.len(),
            nup_logprobs.len()
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(format!("alpha {alpha} outside [0, 1]"));
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| combined_score(lm_logprobs[i], lengths[i] as usize, nup_logprobs[i], alpha))
        .collect();
    let order = rank_desc(&scores).into_iter().map(|i| i as u32).collect();
    Ok(Ranking { order, scores })
}

#[wasm_bindgen(js_name = poolRelevance)]
pub fn pool_relevance(values: &[f64], cols: usize, tau: f64) -> Result<Pooling, JsError> {
    pool(values, cols, tau).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = perceptionRewards)]
pub fn perception_rewards_js(agent: &[f64], user: &[f64], gamma: f64) -> Result<Vec<f64>, JsError> {
    perception_rewards(agent, user, gamma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = rankCandidates)]
pub fn rank_candidates(lm_logprobs: &[f64], lengths: &[u32], nup_logprobs: &[f64], alpha: f64) -> Result<Ranking, JsError> {
    rank(lm_logprobs, lengths, nup_logprobs, alpha).map_err(|e| JsError::new(&e))
}
