//! Multiple-choice records carrying per-branch candidate logits, and their
//! JSONL encoding.
//!
//! One line per record:
//!
//! ```text
//! {"id":..,"dataset":..,"category":..?,"question":..?,"image_ref":..?,
//!  "labels":[..],"gold":..,"branches":{"mm":[..],"txt":[..],"noisy_img":[..]?,"disturbed":[..]?}}
//! ```
//!
//! Logit vectors may be raw logits or log-probabilities; every scoring rule
//! downstream is invariant to a per-branch additive shift.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::par::{self, Execution};

/// Conditioning context a logit vector was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Figure + question + options.
    Mm,
    /// Question + options, figure removed.
    Txt,
    /// Noise-corrupted figure + question + options.
    NoisyImg,
    /// Figure + question + options under a disturbance instruction.
    Disturbed,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Mm, Branch::Txt, Branch::NoisyImg, Branch::Disturbed];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Mm => "mm",
            Branch::Txt => "txt",
            Branch::NoisyImg => "noisy_img",
            Branch::Disturbed => "disturbed",
        }
    }

    /// Whether producing this branch needs the figure.
    pub fn needs_image(self) -> bool {
        self != Branch::Txt
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Branch::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown branch '{s}' (expected mm, txt, noisy_img or disturbed)"))
    }
}

/// The question-level part of a record: candidates and gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub labels: Vec<String>,
    pub gold: String,
}

impl Example {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn gold_index(&self) -> Option<usize> {
        self.labels.iter().position(|l| *l == self.gold)
    }

    /// Every invariant violation on the example, in field order.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.id.is_empty() {
            out.push(Violation::new("id", "must be non-empty"));
        }
        if self.labels.len() < 2 {
            out.push(Violation::new(
                "labels",
                format!("need at least 2 candidates, got {}", self.labels.len()),
            ));
        }
        for (i, label) in self.labels.iter().enumerate() {
            if label.is_empty() {
                out.push(Violation::new(format!("labels[{i}]"), "empty label"));
            } else if self.labels[..i].contains(label) {
                out.push(Violation::new(format!("labels[{i}]"), format!("duplicate label '{label}'")));
            }
        }
        if self.gold_index().is_none() {
            out.push(Violation::new("gold", "gold not in labels"));
        }
        out
    }
}

/// A candidate-aligned logit vector for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchScores {
    pub branch: Branch,
    pub logits: Vec<f64>,
}

/// One example with the logit vectors of every branch it was scored under.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub example: Example,
    pub branches: BTreeMap<Branch, Vec<f64>>,
}

impl EvalRecord {
    pub fn new(example: Example) -> Self {
        EvalRecord { example, branches: BTreeMap::new() }
    }

    pub fn with_branch(mut self, branch: Branch, logits: Vec<f64>) -> Self {
        self.branches.insert(branch, logits);
        self
    }

    pub fn id(&self) -> &str {
        &self.example.id
    }

    pub fn labels(&self) -> &[String] {
        &self.example.labels
    }

    pub fn branch(&self, branch: Branch) -> Option<&[f64]> {
        self.branches.get(&branch).map(Vec::as_slice)
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = self.example.violations();
        let k = self.example.k();
        for required in [Branch::Mm, Branch::Txt] {
            if !self.branches.contains_key(&required) {
                out.push(Violation::new(
                    format!("branches.{required}"),
                    "required branch absent",
                ));
            }
        }
        for (branch, logits) in &self.branches {
            if logits.len() != k {
                out.push(Violation::new(
                    format!("branches.{branch}"),
                    format!("length {} does not match {k} labels", logits.len()),
                ));
            }
            for (i, x) in logits.iter().enumerate() {
                if !x.is_finite() {
                    out.push(Violation::new(format!("branches.{branch}[{i}]"), "non-finite logit"));
                }
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

/// A single broken invariant, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("read failed: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: record '{id}': {violation}")]
    Schema { line: usize, id: String, violation: Violation },
    #[error("line {line}: duplicate id '{id}' (first seen on line {first_line})")]
    DuplicateId { line: usize, id: String, first_line: usize },
}

/// Reads newline-delimited records. Blank lines are skipped; the first
/// malformed or invalid line aborts the parse.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<EvalRecord>, ParseError> {
    parse_records_with(Execution::default(), reader)
}

pub fn parse_records_with<R: BufRead>(
    exec: Execution,
    reader: R,
) -> Result<Vec<EvalRecord>, ParseError> {
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }

    let parsed = par::map(exec, &lines, |(n, text)| parse_line(*n, text));

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::with_capacity(parsed.len());
    for ((line, _), record) in lines.iter().zip(parsed) {
        let record = record?;
        if let Some(first_line) = seen.insert(record.example.id.clone(), *line) {
            return Err(ParseError::DuplicateId {
                line: *line,
                id: record.example.id,
                first_line,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Parses one record from a single JSON line.
pub fn parse_line(line: usize, text: &str) -> Result<EvalRecord, ParseError> {
    let value: Value = serde_json::from_str(text.trim())
        .map_err(|e| ParseError::Json { line, message: e.to_string() })?;
    let record = record_from_value(&value).map_err(|(id, violation)| ParseError::Schema {
        line,
        id: id.unwrap_or_else(|| "<unknown>".to_string()),
        violation,
    })?;
    if let Some(violation) = record.violations().into_iter().next() {
        return Err(ParseError::Schema { line, id: record.example.id, violation });
    }
    Ok(record)
}

type ShapeError = (Option<String>, Violation);

fn record_from_value(value: &Value) -> Result<EvalRecord, ShapeError> {
    let obj = value
        .as_object()
        .ok_or_else(|| (None, Violation::new("$", "record must be a JSON object")))?;
    let id = required_str(obj, "id").map_err(|v| (None, v))?;
    let ctx = |v: Violation| (Some(id.clone()), v);

    let example = Example {
        dataset: required_str(obj, "dataset").map_err(ctx)?,
        category: optional_str(obj, "category").map_err(ctx)?,
        question: optional_str(obj, "question").map_err(ctx)?,
        image_ref: optional_str(obj, "image_ref").map_err(ctx)?,
        labels: string_list(obj, "labels").map_err(ctx)?,
        gold: required_str(obj, "gold").map_err(ctx)?,
        id: id.clone(),
    };

    let branches_obj = match obj.get("branches") {
        Some(Value::Object(b)) => b,
        Some(_) => return Err(ctx(Violation::new("branches", "expected an object"))),
        None => return Err(ctx(Violation::new("branches", "missing field"))),
    };
    let mut branches = BTreeMap::new();
    for (key, logits) in branches_obj {
        let path = format!("branches.{key}");
        let branch: Branch = key.parse().map_err(|m: String| ctx(Violation::new(&path, m)))?;
        let arr = logits
            .as_array()
            .ok_or_else(|| ctx(Violation::new(&path, "expected an array of numbers")))?;
        let xs = arr
            .iter()
            .enumerate()
            .map(|(i, x)| {
                x.as_f64()
                    .ok_or_else(|| ctx(Violation::new(format!("{path}[{i}]"), "expected a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        branches.insert(branch, xs);
    }
    Ok(EvalRecord { example, branches })
}

fn required_str(obj: &Map<String, Value>, field: &str) -> Result<String, Violation> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Violation::new(field, "expected a string")),
        None => Err(Violation::new(field, "missing field")),
    }
}

fn optional_str(obj: &Map<String, Value>, field: &str) -> Result<Option<String>, Violation> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Violation::new(field, "expected a string")),
    }
}

fn string_list(obj: &Map<String, Value>, field: &str) -> Result<Vec<String>, Violation> {
    let arr = match obj.get(field) {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(Violation::new(field, "expected an array of strings")),
        None => return Err(Violation::new(field, "missing field")),
    };
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Violation::new(format!("{field}[{i}]"), "expected a string"))
        })
        .collect()
}

/// Logits written as shortest round-trip scientific notation.
struct SciLogits<'a>(&'a [f64]);

impl Serialize for SciLogits<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for x in self.0 {
            let raw = RawValue::from_string(format!("{x:e}"))
                .map_err(|_| S::Error::custom(format!("cannot encode logit {x}")))?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct WireRecord<'a> {
    #[serde(flatten)]
    example: &'a Example,
    branches: BTreeMap<Branch, SciLogits<'a>>,
}

/// Encodes one record as a JSON line (without the trailing newline).
pub fn record_to_line(record: &EvalRecord) -> Result<String, serde_json::Error> {
    let wire = WireRecord {
        example: &record.example,
        branches: record.branches.iter().map(|(b, xs)| (*b, SciLogits(xs))).collect(),
    };
    serde_json::to_string(&wire)
}

/// Writes records one per line, each terminated by `\n`.
pub fn write_records<W: Write>(records: &[EvalRecord], mut writer: W) -> io::Result<()> {
    for record in records {
        let line = record_to_line(record).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn records_to_bytes(records: &[EvalRecord]) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_records(records, &mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordFailure {
    pub index: usize,
    /// 1-based source line, when validating a file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub id: String,
    pub reasons: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub total: usize,
    pub failures: Vec<RecordFailure>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn failure_count(&self) -> usize {
        self.failures.iter().map(|f| f.reasons.len()).sum()
    }
}

/// Checks every record and collects every violation, plus duplicate ids.
pub fn validate_batch(records: &[EvalRecord]) -> ValidationReport {
    let mut per_record = par::map(Execution::default(), records, EvalRecord::violations);

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(first) = seen.insert(r.id(), i) {
            per_record[i].push(Violation::new("id", format!("duplicate of record #{first}")));
        }
    }

    let failures = per_record
        .into_iter()
        .enumerate()
        .filter(|(_, reasons)| !reasons.is_empty())
        .map(|(index, reasons)| RecordFailure { index, line: None, id: records[index].id().to_string(), reasons })
        .collect();
    ValidationReport { total: records.len(), failures }
}

/// Validates newline-delimited records without stopping at the first bad
/// one. Lines that are not JSON or lack the record shape are reported as
/// failures alongside the semantic checks of [`validate_batch`].
pub fn validate_lines<R: BufRead>(reader: R) -> io::Result<ValidationReport> {
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    let shaped = par::map(Execution::default(), &lines, |(n, text)| {
        let value: Value = serde_json::from_str(text.trim()).map_err(|e| {
            let msg = ParseError::Json { line: *n, message: e.to_string() }.to_string();
            (None, Violation::new("$", msg))
        })?;
        record_from_value(&value)
    });

    let mut failures = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (index, ((line, _), result)) in lines.iter().zip(shaped).enumerate() {
        let (id, reasons) = match result {
            Ok(record) => {
                let mut reasons = record.violations();
                if let Some(first) = seen.insert(record.example.id.clone(), index) {
                    reasons.push(Violation::new("id", format!("duplicate of record #{first}")));
                }
                (record.example.id, reasons)
            }
            Err((id, violation)) => (id.unwrap_or_else(|| "<unknown>".to_string()), vec![violation]),
        };
        if !reasons.is_empty() {
            failures.push(RecordFailure { index, line: Some(*line), id, reasons });
        }
    }
    Ok(ValidationReport { total: lines.len(), failures })
}
