//! Synthetic records with a planted text prior and planted visual evidence.
//!
//! For each record, in this draw order from a `ChaCha8Rng` seeded with
//! `seed_from_u64(seed)`:
//!
//! 1. gold index, uniform over `0..k`;
//! 2. a uniform `f64` in `[0, 1)`; the record is *misleading* when it falls
//!    below `mislead_fraction`, *aligned* otherwise;
//! 3. a distractor offset, uniform over `1..k` (drawn for every record so
//!    the stream does not depend on the regime);
//! 4. `k` standard-normal draws, scaled by `noise_sigma`.
//!
//! The text-only branch puts `prior_strength` on its favorite (the
//! distractor `(gold + offset) % k` when misleading, gold otherwise) and 0
//! elsewhere. The multimodal branch is the text-only branch plus
//! `visual_strength` on gold plus the noise.
//!
//! With zero noise the winner of every rule is known in closed form. On a
//! misleading record the text-prior subtraction scores gold at
//! `visual_strength`, the favorite at `(1 - alpha) * prior_strength` and
//! every other candidate at 0.

use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{Branch, EvalRecord, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub prior_strength: f64,
    pub visual_strength: f64,
    pub mislead_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            k: 4,
            prior_strength: 3.0,
            visual_strength: 4.0,
            mislead_fraction: 0.5,
            noise_sigma: 0.3,
            seed: 42,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("{0} predictions/labels for {1} records")]
    LengthMismatch(usize, usize),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if !nonneg(self.prior_strength) {
            return bad("prior_strength must be finite and >= 0");
        }
        if !nonneg(self.visual_strength) {
            return bad("visual_strength must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.mislead_fraction) {
            return bad("mislead_fraction must lie in [0, 1]");
        }
        if !nonneg(self.noise_sigma) {
            return bad("noise_sigma must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The text prior's favorite is a distractor.
    Misleading,
    /// The text prior's favorite is gold.
    Aligned,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Misleading => "misleading",
            Regime::Aligned => "aligned",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBatch {
    pub records: Vec<EvalRecord>,
    pub regimes: Vec<Regime>,
}

/// Candidate label for index `i`: `A`..`Z`, then `O27`, `O28`, ...
pub fn label_for(i: usize) -> String {
    if i < 26 {
        ((b'A' + i as u8) as char).to_string()
    } else {
        format!("O{}", i + 1)
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthBatch, SynthError> {
    config.validate()?;
    let k = config.k;
    let labels: Vec<String> = (0..k).map(label_for).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.n);
    let mut regimes = Vec::with_capacity(config.n);

    for i in 0..config.n {
        let gold = rng.random_range(0..k);
        let misleading = rng.random::<f64>() < config.mislead_fraction;
        let offset = rng.random_range(1..k);
        let favorite = if misleading { (gold + offset) % k } else { gold };
        let regime = if misleading { Regime::Misleading } else { Regime::Aligned };

        let mut txt = vec![0.0; k];
        txt[favorite] = config.prior_strength;
        let mut mm = txt.clone();
        mm[gold] += config.visual_strength;
        for x in mm.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += config.noise_sigma * z;
        }

        let example = Example {
            id: format!("synth-{i:06}"),
            dataset: "synthetic".to_string(),
            category: Some(regime.as_str().to_string()),
            question: None,
            image_ref: None,
            labels: labels.clone(),
            gold: labels[gold].clone(),
        };
        records.push(EvalRecord::new(example).with_branch(Branch::Mm, mm).with_branch(Branch::Txt, txt));
        regimes.push(regime);
    }
    Ok(SynthBatch { records, regimes })
}

#[derive(Serialize)]
struct RegimeLine<'a> {
    id: &'a str,
    regime: Regime,
}

/// Sidecar JSONL: one `{"id":..,"regime":..}` line per record.
pub fn write_regimes<W: Write>(batch: &SynthBatch, mut writer: W) -> io::Result<()> {
    for (r, regime) in batch.records.iter().zip(&batch.regimes) {
        let line = serde_json::to_string(&RegimeLine { id: r.id(), regime: *regime })?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: Regime,
    pub method: String,
    pub n: usize,
    pub accuracy: f64,
}

/// Accuracy of each named prediction list within each regime. Regimes with
/// no records are omitted.
pub fn regime_summary<S: AsRef<str>>(
    records: &[EvalRecord],
    regimes: &[Regime],
    preds: &[(&str, &[S])],
) -> Result<Vec<RegimeRow>, SynthError> {
    if regimes.len() != records.len() {
        return Err(SynthError::LengthMismatch(regimes.len(), records.len()));
    }
    let mut rows = Vec::new();
    for regime in [Regime::Misleading, Regime::Aligned] {
        let members: Vec<usize> = (0..records.len()).filter(|&i| regimes[i] == regime).collect();
        if members.is_empty() {
            continue;
        }
        for (name, p) in preds {
            if p.len() != records.len() {
                return Err(SynthError::LengthMismatch(p.len(), records.len()));
            }
            let hits = members.iter().filter(|&&i| p[i].as_ref() == records[i].example.gold).count();
            rows.push(RegimeRow {
                regime,
                method: name.to_string(),
                n: members.len(),
                accuracy: hits as f64 / members.len() as f64,
            });
        }
    }
    Ok(rows)
}
