//! Post-hoc detection scores. Every score is oriented so that higher means
//! more in-distribution.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Msp,
    Odin,
    Energy,
}

impl Scorer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scorer::Msp => "msp",
            Scorer::Odin => "odin",
            Scorer::Energy => "energy",
        }
    }

    /// Temperatures selected on validation data: 1000 for ODIN, 1 otherwise.
    pub fn default_temperature(&self) -> f64 {
        match self {
            Scorer::Odin => 1000.0,
            Scorer::Msp | Scorer::Energy => 1.0,
        }
    }

    pub fn score(&self, logits: &[f64], temperature: f64) -> Result<f64> {
        match self {
            Scorer::Msp => score_msp(logits),
            Scorer::Odin => score_odin(logits, temperature),
            Scorer::Energy => score_energy(logits, temperature),
        }
    }
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(Scorer::Msp),
            "odin" => Ok(Scorer::Odin),
            "energy" => Ok(Scorer::Energy),
            other => Err(Error::invalid_arg(format!("unknown scorer {other:?}"))),
        }
    }
}

impl std::fmt::Display for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logit vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("logits contain NaN or infinity".into()));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid_arg(format!("temperature must be positive, got {tau}")))
    }
}

pub(crate) fn msp_unchecked(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum softmax probability.
pub fn score_msp(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(msp_unchecked(logits))
}

/// Maximum softmax probability of `logits / tau`. No input perturbation is
/// applied.
pub fn score_odin(logits: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    check_logits(logits)?;
    if tau == 1.0 {
        return Ok(msp_unchecked(logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    Ok(msp_unchecked(&scaled))
}

/// Negative free energy, `tau · log Σ exp(z_k / tau)`.
pub fn score_energy(logits: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    check_logits(logits)?;
    if tau == 1.0 {
        return Ok(logsumexp(logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    Ok(tau * logsumexp(&scaled))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    IdTest,
    FineOod,
    CoarseOod,
}

impl Origin {
    pub const ALL: [Origin; 3] = [Origin::IdTest, Origin::FineOod, Origin::CoarseOod];

    pub fn as_str(&self) -> &'static str {
        match self {
            Origin::IdTest => "id_test",
            Origin::FineOod => "fine_ood",
            Origin::CoarseOod => "coarse_ood",
        }
    }
}

/// Per-example scores from one scorer, tagged by where each example came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub example_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub origins: Vec<Origin>,
    pub scorer: Scorer,
    pub temperature: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    example_id: u64,
    origin: Origin,
    scorer: Scorer,
    score: f64,
}

impl ScoreTable {
    pub fn new(scorer: Scorer, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self {
            example_ids: Vec::new(),
            scores: Vec::new(),
            origins: Vec::new(),
            scorer,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores a batch of logit rows and appends them under `origin`.
    pub fn push_logits<'a, I>(&mut self, ids: &[u64], logits: I, origin: Origin) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let before = self.scores.len();
        for row in logits {
            self.scores.push(self.scorer.score(row, self.temperature)?);
        }
        let added = self.scores.len() - before;
        if added != ids.len() {
            self.scores.truncate(before);
            return Err(Error::invalid_arg(format!("{} ids for {added} logit rows", ids.len())));
        }
        self.example_ids.extend_from_slice(ids);
        self.origins.extend(std::iter::repeat_n(origin, added));
        Ok(())
    }

    pub fn scores_for(&self, origin: Origin) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.origins)
            .filter(|(_, o)| **o == origin)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn mean_for(&self, origin: Origin) -> Option<f64> {
        let s = self.scores_for(origin);
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    /// Columnar text: `example_id,origin,scorer,score`.
    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for i in 0..self.len() {
            writer
                .serialize(ScoreRow {
                    example_id: self.example_ids[i],
                    origin: self.origins[i],
                    scorer: self.scorer,
                    score: self.scores[i],
                })
                .map_err(|e| Error::parse("score table", e))?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::parse("score table", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses the columnar form. The temperature is not part of the file and
    /// must be supplied.
    pub fn from_csv(text: &str, temperature: f64) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut table: Option<ScoreTable> = None;
        for row in reader.deserialize::<ScoreRow>() {
            let row = row.map_err(|e| Error::parse("score table", e))?;
            let t = match table.as_mut() {
                Some(t) => t,
                None => table.insert(ScoreTable::new(row.scorer, temperature)?),
            };
            if t.scorer != row.scorer {
                return Err(Error::InvalidData("score table mixes scorers".into()));
            }
            t.example_ids.push(row.example_id);
            t.origins.push(row.origin);
            t.scores.push(row.score);
        }
        table.ok_or_else(|| Error::InvalidData("score table is empty".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
