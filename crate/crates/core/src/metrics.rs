//! Accuracy, macro-F1 and dataset composition.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::EvalRecord;

pub const UNCATEGORIZED: &str = "uncategorized";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("no predictions to score")]
    Empty,
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
}

fn check<P, G>(preds: &[P], golds: &[G]) -> Result<(), MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64, MetricError> {
    check(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 per class over the union of predicted and gold labels. Precision or
/// recall with a zero denominator counts as 0, as does F1 when both are 0.
pub fn per_class_f1<P: AsRef<str>, G: AsRef<str>>(
    preds: &[P],
    golds: &[G],
) -> Result<BTreeMap<String, f64>, MetricError> {
    check(preds, golds)?;
    let mut counts: HashMap<&str, Counts> = HashMap::new();
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p == g {
            counts.entry(p).or_default().tp += 1;
        } else {
            counts.entry(p).or_default().fp += 1;
            counts.entry(g).or_default().fn_ += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(label, c)| {
            let precision = ratio(c.tp, c.tp + c.fp);
            let recall = ratio(c.tp, c.tp + c.fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (label.to_string(), f1)
        })
        .collect())
}

pub fn macro_f1<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64, MetricError> {
    let per_class = per_class_f1(preds, golds)?;
    Ok(mean_f1(&per_class))
}

fn mean_f1(per_class: &BTreeMap<String, f64>) -> f64 {
    per_class.values().sum::<f64>() / per_class.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub n: usize,
    pub accuracy: f64,
}

/// Accuracy per record category, largest categories first. Records with no
/// (or an empty) category land in `"uncategorized"`.
pub fn category_breakdown<P: AsRef<str>>(
    records: &[EvalRecord],
    preds: &[P],
) -> Result<Vec<CategoryRow>, MetricError> {
    if records.len() != preds.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), golds: records.len() });
    }
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (r, p) in records.iter().zip(preds) {
        let cat = match r.example.category.as_deref() {
            Some(c) if !c.is_empty() => c,
            _ => UNCATEGORIZED,
        };
        let entry = tally.entry(cat).or_default();
        entry.0 += 1;
        if p.as_ref() == r.example.gold {
            entry.1 += 1;
        }
    }
    let mut rows: Vec<CategoryRow> = tally
        .into_iter()
        .map(|(c, (n, hits))| CategoryRow { category: c.to_string(), n, accuracy: hits as f64 / n as f64 })
        .collect();
    // stable sort keeps name order within equal sizes
    rows.sort_by_key(|r| std::cmp::Reverse(r.n));
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub gold_labels: BTreeMap<String, usize>,
    pub candidate_counts: BTreeMap<usize, usize>,
}

pub fn composition_stats(records: &[EvalRecord]) -> Composition {
    let mut out = Composition::default();
    for r in records {
        *out.gold_labels.entry(r.example.gold.clone()).or_default() += 1;
        *out.candidate_counts.entry(r.example.k()).or_default() += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    pub per_category: Vec<CategoryRow>,
}

/// Full report for one prediction list against the records' gold labels.
pub fn evaluate<P: AsRef<str>>(records: &[EvalRecord], preds: &[P]) -> Result<MetricReport, MetricError> {
    let golds: Vec<&str> = records.iter().map(|r| r.example.gold.as_str()).collect();
    let per_class_f1 = per_class_f1(preds, &golds)?;
    Ok(MetricReport {
        n: records.len(),
        accuracy: accuracy(preds, &golds)?,
        macro_f1: mean_f1(&per_class_f1),
        per_class_f1,
        per_category: category_breakdown(records, preds)?,
    })
}

/// Percentage with two decimals, as tables print it.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Branch, Example};

    fn rec(id: &str, category: Option<&str>, labels: &[&str], gold: &str) -> EvalRecord {
        let k = labels.len();
        EvalRecord::new(Example {
            id: id.into(),
            dataset: "t".into(),
            category: category.map(str::to_string),
            question: None,
            image_ref: None,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            gold: gold.into(),
        })
        .with_branch(Branch::Mm, vec![0.0; k])
        .with_branch(Branch::Txt, vec![0.0; k])
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&["A", "C"], &["A", "C"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["A", "B"], &["B", "A"]).unwrap(), 0.0);
        assert_eq!(accuracy(&["A", "A", "B", "C"], &["A", "B", "B", "C"]).unwrap(), 0.75);
        assert_eq!(accuracy::<&str, &str>(&[], &[]), Err(MetricError::Empty));
        assert!(matches!(accuracy(&["A"], &["A", "B"]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn macro_f1_hand_cases() {
        assert_eq!(macro_f1(&["A", "B", "C"], &["A", "B", "C"]).unwrap(), 1.0);

        // A: tp1 fp1 fn0 -> P=1/2 R=1 F1=2/3; B: tp1 fp0 fn1 -> F1=2/3
        let per = per_class_f1(&["A", "A", "B"], &["A", "B", "B"]).unwrap();
        assert!((per["A"] - 2.0 / 3.0).abs() < 1e-15);
        assert!((per["B"] - 2.0 / 3.0).abs() < 1e-15);
        assert!((macro_f1(&["A", "A", "B"], &["A", "B", "B"]).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        // A: tp1 fp2 -> P=1/3 R=1 F1=1/2; B, C never predicted -> 0
        let per = per_class_f1(&["A", "A", "A"], &["A", "B", "C"]).unwrap();
        assert_eq!(per.len(), 3);
        assert!((per["A"] - 0.5).abs() < 1e-15);
        assert_eq!((per["B"], per["C"]), (0.0, 0.0));
        assert!((macro_f1(&["A", "A", "A"], &["A", "B", "C"]).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn spurious_predicted_label_counts_as_class() {
        // "E" is only predicted, never gold; it joins the class set with F1 0
        let per = per_class_f1(&["E", "B"], &["A", "B"]).unwrap();
        assert_eq!(per.keys().collect::<Vec<_>>(), ["A", "B", "E"]);
        assert_eq!(per["E"], 0.0);
    }

    #[test]
    fn categories() {
        let rs = vec![
            rec("1", Some("bio"), &["A", "B"], "A"),
            rec("2", Some("bio"), &["A", "B"], "A"),
            rec("3", Some("chem"), &["A", "B"], "A"),
            rec("4", Some("chem"), &["A", "B"], "A"),
            rec("5", Some(""), &["A", "B"], "A"),
        ];
        let preds = ["A", "A", "B", "B", "A"];
        let rows = category_breakdown(&rs, &preds).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].category.as_str(), rows[0].accuracy), ("bio", 1.0));
        assert_eq!((rows[1].category.as_str(), rows[1].accuracy), ("chem", 0.0));
        assert_eq!((rows[2].category.as_str(), rows[2].n), (UNCATEGORIZED, 1));

        let report = evaluate(&rs[..4], &preds[..4]).unwrap();
        assert_eq!(report.accuracy, 0.5);

        let one = category_breakdown(&rs[..2], &["A", "B"]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].accuracy, accuracy(&["A", "B"], &["A", "A"]).unwrap());
    }

    #[test]
    fn composition() {
        assert_eq!(composition_stats(&[]), Composition::default());
        let c = composition_stats(&[rec("x", None, &["A", "B", "C", "D", "E"], "E")]);
        assert_eq!(c.gold_labels, BTreeMap::from([("E".to_string(), 1)]));
        assert_eq!(c.candidate_counts, BTreeMap::from([(5, 1)]));
    }

    #[test]
    fn pct_two_decimals() {
        assert_eq!(pct(0.69724), "69.72");
        assert_eq!(pct(1.0), "100.00");
    }
}
