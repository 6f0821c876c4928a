//! Candidate-level scoring rules and prediction.
//!
//! All rules combine two candidate-aligned logit vectors:
//!
//! | method      | score                                   | branches        |
//! |-------------|-----------------------------------------|-----------------|
//! | `greedy_mm` | `l_mm`                                  | mm              |
//! | `text_only` | `l_txt`                                 | txt             |
//! | `scicon`    | `l_mm - alpha * l_txt`                  | mm, txt         |
//! | `vcd`       | `l_mm + alpha * (l_mm - l_noisy)`       | mm, noisy_img   |
//! | `icd`       | `l_mm + alpha * (l_mm - l_dist)`        | mm, disturbed   |
//!
//! Each rule shifts every candidate by the same amount when a constant is
//! added to one of its input branches, so predictions do not depend on
//! whether a branch carries raw logits or log-probabilities.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::record::{Branch, EvalRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GreedyMm,
    TextOnly,
    Scicon,
    Vcd,
    Icd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::GreedyMm, Method::TextOnly, Method::Scicon, Method::Vcd, Method::Icd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GreedyMm => "greedy_mm",
            Method::TextOnly => "text_only",
            Method::Scicon => "scicon",
            Method::Vcd => "vcd",
            Method::Icd => "icd",
        }
    }

    pub fn required_branches(self) -> &'static [Branch] {
        match self {
            Method::GreedyMm => &[Branch::Mm],
            Method::TextOnly => &[Branch::Txt],
            Method::Scicon => &[Branch::Mm, Branch::Txt],
            Method::Vcd => &[Branch::Mm, Branch::NoisyImg],
            Method::Icd => &[Branch::Mm, Branch::Disturbed],
        }
    }

    /// 0.5 for the text-prior subtraction, 1.0 for the two image-contrast
    /// baselines. Single-branch methods ignore alpha.
    pub const fn default_alpha(self) -> f64 {
        match self {
            Method::Scicon => 0.5,
            Method::Vcd | Method::Icd => 1.0,
            Method::GreedyMm | Method::TextOnly => 0.0,
        }
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, Method::Scicon | Method::Vcd | Method::Icd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected greedy_mm, text_only, scicon, vcd or icd)"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("empty score vector")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("alpha must be finite and non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("record '{record_id}': method {method} needs branch {branch}")]
    MissingBranch { record_id: String, method: Method, branch: Branch },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub method: Method,
    pub alpha: f64,
}

impl DecodeConfig {
    pub fn new(method: Method, alpha: f64) -> Result<Self, DecodeError> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(DecodeError::InvalidAlpha(alpha));
        }
        Ok(DecodeConfig { method, alpha })
    }

    pub fn with_default_alpha(method: Method) -> Self {
        DecodeConfig { method, alpha: method.default_alpha() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    #[serde(rename = "id")]
    pub record_id: String,
    pub method: Method,
    pub alpha: f64,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: String,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, DecodeError> {
    let max = max_finite(logits)?;
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `x - logsumexp(x)`, elementwise.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, DecodeError> {
    let max = max_finite(logits)?;
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|x| x - lse).collect())
}

fn max_finite(xs: &[f64]) -> Result<f64, DecodeError> {
    xs.iter().copied().reduce(f64::max).ok_or(DecodeError::Empty)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), DecodeError> {
    if a.len() != b.len() {
        return Err(DecodeError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

/// `l_mm(c) - alpha * l_txt(c)`.
pub fn score_scicon(mm: &[f64], txt: &[f64], alpha: f64) -> Result<Vec<f64>, DecodeError> {
    check_pair(mm, txt)?;
    Ok(mm.iter().zip(txt).map(|(m, t)| m - alpha * t).collect())
}

/// `l_orig(c) + alpha * (l_orig(c) - l_noisy(c))`.
pub fn score_vcd(orig: &[f64], noisy: &[f64], alpha: f64) -> Result<Vec<f64>, DecodeError> {
    check_pair(orig, noisy)?;
    Ok(orig.iter().zip(noisy).map(|(o, n)| o + alpha * (o - n)).collect())
}

/// `l_orig(c) + alpha * (l_orig(c) - l_dist(c))`.
pub fn score_icd(orig: &[f64], disturbed: &[f64], alpha: f64) -> Result<Vec<f64>, DecodeError> {
    check_pair(orig, disturbed)?;
    Ok(orig.iter().zip(disturbed).map(|(o, d)| o + alpha * (o - d)).collect())
}

/// Index of the largest score; the earliest index wins ties.
pub fn argmax(scores: &[f64]) -> Result<usize, DecodeError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i).ok_or(DecodeError::Empty)
}

pub fn predict<'a>(scores: &[f64], labels: &'a [String]) -> Result<&'a str, DecodeError> {
    if scores.len() != labels.len() {
        return Err(DecodeError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    Ok(&labels[argmax(scores)?])
}

fn branch(record: &EvalRecord, method: Method, branch: Branch) -> Result<&[f64], DecodeError> {
    record.branch(branch).ok_or_else(|| DecodeError::MissingBranch {
        record_id: record.id().to_string(),
        method,
        branch,
    })
}

/// Raw method scores for a record.
pub fn method_scores(record: &EvalRecord, config: &DecodeConfig) -> Result<Vec<f64>, DecodeError> {
    let m = config.method;
    match m {
        Method::GreedyMm => Ok(branch(record, m, Branch::Mm)?.to_vec()),
        Method::TextOnly => Ok(branch(record, m, Branch::Txt)?.to_vec()),
        Method::Scicon => score_scicon(
            branch(record, m, Branch::Mm)?,
            branch(record, m, Branch::Txt)?,
            config.alpha,
        ),
        Method::Vcd => score_vcd(
            branch(record, m, Branch::Mm)?,
            branch(record, m, Branch::NoisyImg)?,
            config.alpha,
        ),
        Method::Icd => score_icd(
            branch(record, m, Branch::Mm)?,
            branch(record, m, Branch::Disturbed)?,
            config.alpha,
        ),
    }
}

pub fn decode_record(record: &EvalRecord, config: &DecodeConfig) -> Result<DecodeResult, DecodeError> {
    let scores = method_scores(record, config)?;
    let probs = softmax(&scores)?;
    let predicted = predict(&scores, record.labels())?.to_string();
    Ok(DecodeResult {
        record_id: record.id().to_string(),
        method: config.method,
        alpha: config.alpha,
        scores,
        probs,
        predicted,
    })
}

pub fn decode_batch(records: &[EvalRecord], config: &DecodeConfig) -> Result<Vec<DecodeResult>, DecodeError> {
    decode_batch_with(Execution::default(), records, config)
}

pub fn decode_batch_with(
    exec: Execution,
    records: &[EvalRecord],
    config: &DecodeConfig,
) -> Result<Vec<DecodeResult>, DecodeError> {
    par::map(exec, records, |r| decode_record(r, config)).into_iter().collect()
}

/// Whether two score vectors order their indices identically, ties included.
pub fn rank_equivalent(a: &[f64], b: &[f64]) -> Result<bool, DecodeError> {
    check_pair(a, b)?;
    for i in 0..a.len() {
        for j in (i + 1)..a.len() {
            if a[i].partial_cmp(&a[j]) != b[i].partial_cmp(&b[j]) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Total order of indices by descending score (ties by index).
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Example;

    fn ln(xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| x.ln()).collect()
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
        }
    }

    fn mmsci_record() -> EvalRecord {
        EvalRecord::new(Example {
            id: "mmsci".into(),
            dataset: "mmsci".into(),
            category: None,
            question: None,
            image_ref: None,
            labels: labels(&["A", "B", "C", "D"]),
            gold: "B".into(),
        })
        .with_branch(Branch::Mm, ln(&[0.013, 0.235, 0.724, 0.028]))
        .with_branch(Branch::Txt, ln(&[0.015, 0.036, 0.914, 0.036]))
    }

    #[test]
    fn softmax_basics() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = [0.013, 0.235, 0.724, 0.028];
        assert_close(&softmax(&ln(&p)).unwrap(), &p, 1e-9);
        let v = [0.3, -1.2, 4.0, 2.5];
        let shifted: Vec<f64> = v.iter().map(|x| x + 7.3).collect();
        assert_close(&softmax(&v).unwrap(), &softmax(&shifted).unwrap(), 1e-15);
        assert_eq!(softmax(&[]), Err(DecodeError::Empty));
        // no overflow on large logits
        let big = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn log_softmax_matches_ln_softmax() {
        let v = [2.0, -3.0, 0.5];
        let a = log_softmax(&v).unwrap();
        let b: Vec<f64> = softmax(&v).unwrap().iter().map(|p| p.ln()).collect();
        assert_close(&a, &b, 1e-12);
    }

    #[test]
    fn scicon_alpha_zero_is_mm() {
        let mm = [0.1, -2.0, 3.5];
        assert_eq!(score_scicon(&mm, &[9.0, 1.0, -4.0], 0.0).unwrap(), mm.to_vec());
        assert!(matches!(score_scicon(&mm, &[1.0], 0.5), Err(DecodeError::LengthMismatch { .. })));
    }

    #[test]
    fn scicon_worked_cases() {
        // (mm probs, txt probs, expected scicon probs, tolerance)
        type Case<'a> = (&'a [f64], &'a [f64], &'a [f64], f64);
        let cases: [Case; 3] = [
            (&[0.013, 0.235, 0.724, 0.028], &[0.015, 0.036, 0.914, 0.036], &[0.048, 0.552, 0.335, 0.066], 0.005),
            (&[0.6063, 0.3677, 0.0162, 0.0098], &[0.8531, 0.0057, 0.0794, 0.0618], &[0.117, 0.866, 0.010, 0.007], 0.005),
            (
                &[0.404, 0.029, 0.519, 0.043, 0.004],
                &[0.004, 0.022, 0.918, 0.040, 0.017],
                &[0.870, 0.026, 0.071, 0.028, 0.005],
                0.01,
            ),
        ];
        for (mm, txt, want, tol) in cases {
            let s = score_scicon(&ln(mm), &ln(txt), 0.5).unwrap();
            assert_close(&softmax(&s).unwrap(), want, tol);
        }
    }

    #[test]
    fn vcd_icd_formulas() {
        let orig = [0.4, -1.0, 2.0];
        assert_eq!(score_vcd(&orig, &orig, 3.0).unwrap(), orig.to_vec());
        assert_eq!(score_vcd(&orig, &[5.0, 5.0, 5.0], 0.0).unwrap(), orig.to_vec());
        assert_eq!(score_vcd(&[2.0, 1.0], &[1.0, 3.0], 1.0).unwrap(), vec![3.0, -1.0]);

        assert_eq!(score_icd(&orig, &orig, 2.0).unwrap(), orig.to_vec());
        assert_eq!(score_icd(&orig, &[1.0, 1.0, 1.0], 0.0).unwrap(), orig.to_vec());
        assert_eq!(score_icd(&[0.0, 1.0, 2.0], &[2.0, 1.0, 0.0], 1.0).unwrap(), vec![-2.0, 1.0, 4.0]);
    }

    #[test]
    fn predict_and_ties() {
        let ls = labels(&["A", "B", "C"]);
        assert_eq!(predict(&[0.1, 0.9, 0.2], &ls).unwrap(), "B");
        assert_eq!(predict(&[0.5, 0.5], &ls[..2]).unwrap(), "A");
        assert_eq!(predict(&[], &[]), Err(DecodeError::Empty));
        assert!(predict(&[1.0], &ls).is_err());
    }

    #[test]
    fn mmsci_case_decode() {
        let r = mmsci_record();
        let sc = decode_record(&r, &DecodeConfig::with_default_alpha(Method::Scicon)).unwrap();
        assert_eq!(sc.predicted, "B");
        let greedy = decode_record(&r, &DecodeConfig::with_default_alpha(Method::GreedyMm)).unwrap();
        assert_eq!(greedy.predicted, "C");
        assert!((sc.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn missing_branch() {
        let err = decode_record(&mmsci_record(), &DecodeConfig::with_default_alpha(Method::Vcd)).unwrap_err();
        assert_eq!(
            err,
            DecodeError::MissingBranch { record_id: "mmsci".into(), method: Method::Vcd, branch: Branch::NoisyImg }
        );
        assert!(decode_record(&mmsci_record(), &DecodeConfig::with_default_alpha(Method::Icd)).is_err());
    }

    #[test]
    fn config_rejects_bad_alpha() {
        assert!(DecodeConfig::new(Method::Scicon, -0.1).is_err());
        assert!(DecodeConfig::new(Method::Scicon, f64::NAN).is_err());
        assert!(DecodeConfig::new(Method::Scicon, 0.0).is_ok());
    }

    #[test]
    fn rank_equivalence_cases() {
        let v = [0.3, -1.0, 2.2, 0.3];
        let w: Vec<f64> = v.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!(rank_equivalent(&v, &w).unwrap());
        assert!(!rank_equivalent(&[1.0, 2.0], &[2.0, 1.0]).unwrap());
        // a tie must be preserved as a tie
        assert!(!rank_equivalent(&[1.0, 1.0], &[1.0, 1.1]).unwrap());
        assert_eq!(ranking(&v), vec![2, 0, 3, 1]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("beam".parse::<Method>().is_err());
    }
}
