//! Analytical prefill-cost calculator.
//!
//! A forward pass over `L` tokens costs `L^2 * d` abstract units. The
//! multimodal input has `l_q + l_v` tokens and the text-only input `l_q`.
//! The image-contrast baselines are assumed to run a second pass of the
//! same length as the multimodal one. Decode-phase cost is not modelled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::Method;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("question length must be at least 1 token")]
    EmptyQuestion,
    #[error("scale factor d must be finite and positive, got {0}")]
    BadScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Text tokens in the question/prompt.
    pub l_q: u64,
    /// Visual tokens from the figure.
    pub l_v: u64,
    /// Hidden-size scale factor.
    pub d: f64,
}

impl CostParams {
    pub fn new(l_q: u64, l_v: u64, d: f64) -> Result<Self, CostError> {
        if l_q == 0 {
            return Err(CostError::EmptyQuestion);
        }
        if !d.is_finite() || d <= 0.0 {
            return Err(CostError::BadScale(d));
        }
        Ok(CostParams { l_q, l_v, d })
    }
}

pub fn prefill_cost(length: u64, d: f64) -> f64 {
    let l = length as f64;
    l * l * d
}

pub fn method_cost(method: Method, p: &CostParams) -> f64 {
    let mm = prefill_cost(p.l_q + p.l_v, p.d);
    let txt = prefill_cost(p.l_q, p.d);
    match method {
        Method::GreedyMm => mm,
        Method::TextOnly => txt,
        Method::Scicon => mm + txt,
        Method::Vcd | Method::Icd => 2.0 * mm,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: Method,
    pub cost: f64,
    /// Cost relative to greedy multimodal decoding.
    pub ratio_to_greedy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: CostParams,
    pub rows: Vec<CostRow>,
    /// `greedy < scicon < vcd == icd` holds strictly.
    pub strict_ordering: bool,
    pub note: String,
}

const REPORT_METHODS: [Method; 4] = [Method::GreedyMm, Method::Scicon, Method::Vcd, Method::Icd];

pub fn cost_report(params: &CostParams) -> CostReport {
    let greedy = method_cost(Method::GreedyMm, params);
    let rows: Vec<CostRow> = REPORT_METHODS
        .iter()
        .map(|&method| {
            let cost = method_cost(method, params);
            CostRow { method, cost, ratio_to_greedy: cost / greedy }
        })
        .collect();
    let (g, s, v, i) = (rows[0].cost, rows[1].cost, rows[2].cost, rows[3].cost);
    let strict_ordering = g < s && s < v && v == i;
    let note = if strict_ordering {
        "greedy < scicon < vcd = icd".to_string()
    } else if params.l_v == 0 {
        "no visual tokens: ordering collapses to greedy < scicon = vcd = icd".to_string()
    } else {
        format!("unexpected ordering: greedy {g}, scicon {s}, vcd {v}, icd {i}")
    };
    CostReport { params: *params, rows, strict_ordering, note }
}
