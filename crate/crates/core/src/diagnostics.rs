//! Divergence measures and per-record bias diagnostics.
//!
//! Cross-branch quantities (gold uplift, visual evidence margin) are taken
//! on per-branch log-softmax values: two forward passes can differ by an
//! arbitrary additive constant in raw logits, and normalizing removes it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{self, DecodeError, Method};
use crate::par::{self, Execution};
use crate::record::{Branch, EvalRecord};

/// Tolerance on `sum(p) == 1` for inputs to [`js_divergence`].
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("record '{0}' has a gold label outside its candidates")]
    GoldNotInLabels(String),
    #[error("empty group")]
    EmptyGroup,
    #[error("{0} predictions for {1} records")]
    LengthMismatch(usize, usize),
}

fn check_distribution(p: &[f64]) -> Result<(), DiagnosticError> {
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(DiagnosticError::NotADistribution(format!("entry {x}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(DiagnosticError::NotADistribution(format!("sums to {total}")));
    }
    Ok(())
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`. Callers guarantee `q_i > 0`
/// wherever `p_i > 0`.
fn kl_term_sum(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, DiagnosticError> {
    if p.len() != q.len() {
        return Err(DiagnosticError::DimensionMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_term_sum(p, &m) + 0.5 * kl_term_sum(q, &m);
    Ok(js.max(0.0))
}

pub fn cosine_similarity(p: &[f64], q: &[f64]) -> Result<f64, DiagnosticError> {
    if p.len() != q.len() {
        return Err(DiagnosticError::DimensionMismatch(p.len(), q.len()));
    }
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return Err(DiagnosticError::ZeroVector);
    }
    Ok((dot / (np * nq)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    #[serde(rename = "id")]
    pub record_id: String,
    /// JS(p_mm || p_txt).
    pub js_mm_txt: f64,
    /// cos(p_mm, p_txt), the prior alignment.
    pub cos_mm_txt: f64,
    /// l_sc(gold) - l_mm(gold).
    pub gold_uplift: f64,
    /// l_mm(gold) - l_txt(gold).
    pub visual_margin: f64,
    /// The text-only branch already ranks gold first.
    pub txt_gold_hit: bool,
    /// Greedy multimodal prediction is wrong and the text-only branch
    /// prefers that distractor over gold.
    pub prior_dominant: bool,
}

pub fn diagnose_record(record: &EvalRecord, alpha: f64) -> Result<DiagnosticRow, DiagnosticError> {
    let get = |b: Branch| {
        record.branch(b).ok_or_else(|| DecodeError::MissingBranch {
            record_id: record.id().to_string(),
            method: Method::Scicon,
            branch: b,
        })
    };
    let mm = decode::log_softmax(get(Branch::Mm)?)?;
    let txt = decode::log_softmax(get(Branch::Txt)?)?;
    if mm.len() != txt.len() {
        return Err(DiagnosticError::DimensionMismatch(mm.len(), txt.len()));
    }
    let gold = record
        .example
        .gold_index()
        .filter(|g| *g < mm.len())
        .ok_or_else(|| DiagnosticError::GoldNotInLabels(record.id().to_string()))?;

    let p_mm: Vec<f64> = mm.iter().map(|x| x.exp()).collect();
    let p_txt: Vec<f64> = txt.iter().map(|x| x.exp()).collect();

    let sc_gold = mm[gold] - alpha * txt[gold];
    let greedy = decode::argmax(&mm)?;

    Ok(DiagnosticRow {
        record_id: record.id().to_string(),
        js_mm_txt: js_divergence(&p_mm, &p_txt)?,
        cos_mm_txt: cosine_similarity(&p_mm, &p_txt)?,
        gold_uplift: sc_gold - mm[gold],
        visual_margin: mm[gold] - txt[gold],
        txt_gold_hit: decode::argmax(&txt)? == gold,
        prior_dominant: greedy != gold && p_txt[greedy] > p_txt[gold],
    })
}

pub fn diagnose_batch(records: &[EvalRecord], alpha: f64) -> Result<Vec<DiagnosticRow>, DiagnosticError> {
    diagnose_batch_with(Execution::default(), records, alpha)
}

pub fn diagnose_batch_with(
    exec: Execution,
    records: &[EvalRecord],
    alpha: f64,
) -> Result<Vec<DiagnosticRow>, DiagnosticError> {
    par::map(exec, records, |r| diagnose_record(r, alpha)).into_iter().collect()
}

/// Record indices split by whether the baseline got them right.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrectWrong {
    pub correct: Vec<usize>,
    pub wrong: Vec<usize>,
}

pub fn partition_correct_wrong<P: AsRef<str>>(
    records: &[EvalRecord],
    baseline_preds: &[P],
) -> Result<CorrectWrong, DiagnosticError> {
    if records.len() != baseline_preds.len() {
        return Err(DiagnosticError::LengthMismatch(baseline_preds.len(), records.len()));
    }
    let mut out = CorrectWrong::default();
    for (i, (r, p)) in records.iter().zip(baseline_preds).enumerate() {
        if p.as_ref() == r.example.gold {
            out.correct.push(i);
        } else {
            out.wrong.push(i);
        }
    }
    Ok(out)
}

/// Records a method fixed (`corrected`) or broke (`harmed`) relative to a
/// baseline. Records both get right or both get wrong are in neither.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrectedHarmed {
    pub corrected: Vec<usize>,
    pub harmed: Vec<usize>,
}

pub fn partition_corrected_harmed<P: AsRef<str>, Q: AsRef<str>>(
    records: &[EvalRecord],
    baseline_preds: &[P],
    method_preds: &[Q],
) -> Result<CorrectedHarmed, DiagnosticError> {
    if records.len() != baseline_preds.len() {
        return Err(DiagnosticError::LengthMismatch(baseline_preds.len(), records.len()));
    }
    if records.len() != method_preds.len() {
        return Err(DiagnosticError::LengthMismatch(method_preds.len(), records.len()));
    }
    let mut out = CorrectedHarmed::default();
    for (i, r) in records.iter().enumerate() {
        let gold = r.example.gold.as_str();
        let base_ok = baseline_preds[i].as_ref() == gold;
        let method_ok = method_preds[i].as_ref() == gold;
        match (base_ok, method_ok) {
            (false, true) => out.corrected.push(i),
            (true, false) => out.harmed.push(i),
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Correct,
    Wrong,
    Corrected,
    Harmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: Group,
    pub n: usize,
    pub mean_js: f64,
    pub mean_cos: f64,
    pub mean_gold_uplift: f64,
    pub mean_visual_margin: f64,
    pub txt_gold_hit_rate: f64,
    pub prior_dominant_rate: f64,
}

/// Means of every diagnostic over a group. An empty group is an error: the
/// caller omits it from reports.
pub fn group_stats<'a, I>(group: Group, rows: I) -> Result<GroupStats, DiagnosticError>
where
    I: IntoIterator<Item = &'a DiagnosticRow>,
{
    let mut n = 0usize;
    let mut sums = [0.0f64; 6];
    for r in rows {
        n += 1;
        sums[0] += r.js_mm_txt;
        sums[1] += r.cos_mm_txt;
        sums[2] += r.gold_uplift;
        sums[3] += r.visual_margin;
        sums[4] += f64::from(u8::from(r.txt_gold_hit));
        sums[5] += f64::from(u8::from(r.prior_dominant));
    }
    if n == 0 {
        return Err(DiagnosticError::EmptyGroup);
    }
    let m = sums.map(|s| s / n as f64);
    Ok(GroupStats {
        group,
        n,
        mean_js: m[0],
        mean_cos: m[1],
        mean_gold_uplift: m[2],
        mean_visual_margin: m[3],
        txt_gold_hit_rate: m[4],
        prior_dominant_rate: m[5],
    })
}

/// The four group blocks; a block is `None` when its group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub alpha: f64,
    pub method: Method,
    pub n: usize,
    pub correct: Option<GroupStats>,
    pub wrong: Option<GroupStats>,
    pub corrected: Option<GroupStats>,
    pub harmed: Option<GroupStats>,
}

/// Groups rows by greedy-multimodal correctness (correct/wrong) and by how
/// `method_preds` changed the outcome (corrected/harmed).
pub fn summarize<P: AsRef<str>, Q: AsRef<str>>(
    records: &[EvalRecord],
    rows: &[DiagnosticRow],
    baseline_preds: &[P],
    method: Method,
    alpha: f64,
    method_preds: &[Q],
) -> Result<DiagnosticSummary, DiagnosticError> {
    if rows.len() != records.len() {
        return Err(DiagnosticError::LengthMismatch(rows.len(), records.len()));
    }
    let cw = partition_correct_wrong(records, baseline_preds)?;
    let ch = partition_corrected_harmed(records, baseline_preds, method_preds)?;
    let stats = |g: Group, idx: &[usize]| group_stats(g, idx.iter().map(|&i| &rows[i])).ok();
    Ok(DiagnosticSummary {
        alpha,
        method,
        n: records.len(),
        correct: stats(Group::Correct, &cw.correct),
        wrong: stats(Group::Wrong, &cw.wrong),
        corrected: stats(Group::Corrected, &ch.corrected),
        harmed: stats(Group::Harmed, &ch.harmed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Example;

    fn ln(xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| x.ln()).collect()
    }

    fn record(id: &str, gold: &str, mm: Vec<f64>, txt: Vec<f64>) -> EvalRecord {
        let labels: Vec<String> = (0..mm.len()).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
        EvalRecord::new(Example {
            id: id.into(),
            dataset: "t".into(),
            category: None,
            question: None,
            image_ref: None,
            labels,
            gold: gold.into(),
        })
        .with_branch(Branch::Mm, mm)
        .with_branch(Branch::Txt, txt)
    }

    #[test]
    fn js_cases() {
        assert_eq!(js_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let max = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((max - std::f64::consts::LN_2).abs() < 1e-15);
        // M = (0.7, 0.3); 0.5*KL(P||M) + 0.5*KL(Q||M)
        let js = js_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((js - 0.101_749_225_079_196_8).abs() < 1e-12, "{js}");
    }

    #[test]
    fn js_rejects_bad_input() {
        assert!(matches!(js_divergence(&[1.0], &[0.5, 0.5]), Err(DiagnosticError::DimensionMismatch(1, 2))));
        assert!(matches!(js_divergence(&[0.6, 0.6], &[0.5, 0.5]), Err(DiagnosticError::NotADistribution(_))));
        assert!(matches!(js_divergence(&[1.5, -0.5], &[0.5, 0.5]), Err(DiagnosticError::NotADistribution(_))));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[0.3, 0.7], &[0.3, 0.7]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(DiagnosticError::ZeroVector));
    }

    #[test]
    fn mmsci_case_is_prior_dominant() {
        let r = record(
            "mmsci",
            "B",
            ln(&[0.013, 0.235, 0.724, 0.028]),
            ln(&[0.015, 0.036, 0.914, 0.036]),
        );
        let row = diagnose_record(&r, 0.5).unwrap();
        assert!(row.prior_dominant);
        assert!(!row.txt_gold_hit);
        // the transcribed txt probabilities sum to 1.001; log-softmax renormalizes
        let (mm_sum, txt_sum) = (1.0f64, 1.001f64);
        let ls_txt_gold = (0.036 / txt_sum).ln();
        assert!((row.visual_margin - ((0.235 / mm_sum).ln() - ls_txt_gold)).abs() < 1e-9);
        assert!((row.gold_uplift + 0.5 * ls_txt_gold).abs() < 1e-9);
    }

    #[test]
    fn identical_branches() {
        let v = ln(&[0.1, 0.2, 0.7]);
        let row = diagnose_record(&record("same", "C", v.clone(), v), 0.5).unwrap();
        assert_eq!(row.js_mm_txt, 0.0);
        assert!((row.cos_mm_txt - 1.0).abs() < 1e-12);
        assert_eq!(row.visual_margin, 0.0);
        assert!(row.txt_gold_hit);
    }

    #[test]
    fn correct_greedy_is_never_prior_dominant() {
        let r = record("ok", "A", vec![3.0, 0.0, 0.0], vec![-5.0, 4.0, 0.0]);
        let row = diagnose_record(&r, 0.5).unwrap();
        assert!(!row.prior_dominant);
    }

    #[test]
    fn shift_invariant_rows() {
        let r = record("s", "B", vec![0.3, 1.2, -0.4], vec![2.0, -1.0, 0.1]);
        let shifted = record("s", "B", vec![10.3, 11.2, 9.6], vec![-3.0, -6.0, -4.9]);
        let a = diagnose_record(&r, 0.7).unwrap();
        let b = diagnose_record(&shifted, 0.7).unwrap();
        assert!((a.js_mm_txt - b.js_mm_txt).abs() < 1e-12);
        assert!((a.gold_uplift - b.gold_uplift).abs() < 1e-12);
        assert!((a.visual_margin - b.visual_margin).abs() < 1e-12);
        assert_eq!(a.prior_dominant, b.prior_dominant);
    }

    #[test]
    fn partitions() {
        let rs: Vec<_> = (0..4).map(|i| record(&i.to_string(), "A", vec![0.0; 2], vec![0.0; 2])).collect();
        let cw = partition_correct_wrong(&rs, &["A", "A", "B", "A"]).unwrap();
        assert_eq!((cw.correct.len(), cw.wrong.len()), (3, 1));
        let cw = partition_correct_wrong(&rs, &["A"; 4]).unwrap();
        assert!(cw.wrong.is_empty());
        let empty = partition_correct_wrong::<&str>(&[], &[]).unwrap();
        assert_eq!(empty, CorrectWrong::default());
        assert!(partition_correct_wrong(&rs, &["A"]).is_err());

        let same = ["A", "B", "A", "B"];
        assert_eq!(partition_corrected_harmed(&rs, &same, &same).unwrap(), CorrectedHarmed::default());
        let ch = partition_corrected_harmed(&rs, &["B", "A", "B", "A"], &["A", "B", "B", "A"]).unwrap();
        assert_eq!(ch.corrected, vec![0]);
        assert_eq!(ch.harmed, vec![1]);
    }

    #[test]
    fn group_means() {
        let row = |js: f64, hit: bool| DiagnosticRow {
            record_id: "r".into(),
            js_mm_txt: js,
            cos_mm_txt: 0.5,
            gold_uplift: 1.0,
            visual_margin: -1.0,
            txt_gold_hit: hit,
            prior_dominant: false,
        };
        let one = group_stats(Group::Harmed, [&row(0.1, true)]).unwrap();
        assert_eq!((one.n, one.mean_js, one.txt_gold_hit_rate), (1, 0.1, 1.0));
        let rows = [row(0.1, true), row(0.3, false)];
        let two = group_stats(Group::Correct, &rows).unwrap();
        assert!((two.mean_js - 0.2).abs() < 1e-15);
        assert_eq!(two.txt_gold_hit_rate, 0.5);
        assert_eq!(group_stats(Group::Wrong, &[]), Err(DiagnosticError::EmptyGroup));
    }
}
