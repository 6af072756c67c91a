//! Listening-test statistics for A/B discrimination studies.
//!
//! Each participant hears pairs of clips and answers `A` ("identical") or
//! `B` ("different"). A pair is either truly identical or a clean clip next
//! to its adversarial version, so `B` is correct on adversarial pairs and `A`
//! on identical ones. Under pure guessing the number of correct answers is
//! Binomial(n, 1/2).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal-approximation z-score of `correct` successes in `total` fair coin
/// flips: `(x - n/2) / (sqrt(n) / 2)`.
pub fn human_zscore(correct: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Domain("z-score needs at least one trial".into()));
    }
    if correct > total {
        return Err(Error::Domain(format!("{correct} correct answers out of {total}")));
    }
    let n = total as f64;
    Ok((correct as f64 - n / 2.0) / (n.sqrt() / 2.0))
}

/// Upper-tail probability `1 - Phi(z)` of the standard normal.
pub fn one_tailed_p(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Adversarial,
    Identical,
}

impl Truth {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adversarial" => Some(Truth::Adversarial),
            "identical" => Some(Truth::Identical),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Truth::Adversarial => "adversarial",
            Truth::Identical => "identical",
        }
    }

    fn correct_answer(self) -> Answer {
        match self {
            Truth::Adversarial => Answer::B,
            Truth::Identical => Answer::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    A,
    B,
}

impl Answer {
    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "A" | "a" => Some(Answer::A),
            "B" | "b" => Some(Answer::B),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanStudyTable {
    pub pair_ids: Vec<String>,
    pub truth: Vec<Truth>,
    pub participants: Vec<String>,
    /// `responses[participant][pair]`.
    pub responses: Vec<Vec<Answer>>,
}

impl HumanStudyTable {
    pub fn validate(&self) -> Result<()> {
        let pairs = self.pair_ids.len();
        if pairs == 0 || self.participants.is_empty() {
            return Err(Error::InvalidData(
                "study table needs at least one pair and one participant".into(),
            ));
        }
        if self.truth.len() != pairs {
            return Err(Error::InvalidData(format!(
                "{} truth flags for {pairs} pairs",
                self.truth.len()
            )));
        }
        if self.responses.len() != self.participants.len() {
            return Err(Error::InvalidData(format!(
                "{} response rows for {} participants",
                self.responses.len(),
                self.participants.len()
            )));
        }
        if let Some((i, row)) = self.responses.iter().enumerate().find(|(_, r)| r.len() != pairs) {
            return Err(Error::InvalidData(format!(
                "participant {} answered {} pairs, expected {pairs}",
                self.participants[i],
                row.len()
            )));
        }
        Ok(())
    }

    /// Reads the CSV layout written by [`HumanStudyTable::write_csv`]:
    ///
    /// ```text
    /// participant,p01,p02,...
    /// truth,adversarial,identical,...
    /// P01,A,B,...
    /// ```
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut rows = reader.records();
        let header = rows
            .next()
            .ok_or_else(|| Error::InvalidData("study CSV is empty".into()))??;
        let pair_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let truth_row = rows
            .next()
            .ok_or_else(|| Error::InvalidData("study CSV has no truth row".into()))??;
        if truth_row.get(0).map(str::trim) != Some("truth") {
            return Err(Error::InvalidData(
                "second row of the study CSV must start with 'truth'".into(),
            ));
        }
        let truth = truth_row
            .iter()
            .skip(1)
            .map(|s| Truth::parse(s).ok_or_else(|| Error::InvalidData(format!("unknown truth flag '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        let mut participants = Vec::new();
        let mut responses = Vec::new();
        for (line, row) in rows.enumerate() {
            let row = row?;
            let mut fields = row.iter();
            participants.push(fields.next().unwrap_or_default().to_string());
            responses.push(
                fields
                    .map(|s| {
                        Answer::parse(s).ok_or_else(|| {
                            Error::InvalidData(format!("row {}: answer '{s}' is neither A nor B", line + 3))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let table = Self {
            pair_ids,
            truth,
            participants,
            responses,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(std::iter::once("participant").chain(self.pair_ids.iter().map(String::as_str)))?;
        w.write_record(std::iter::once("truth").chain(self.truth.iter().map(|t| t.as_str())))?;
        for (id, row) in self.participants.iter().zip(&self.responses) {
            w.write_record(std::iter::once(id.as_str()).chain(row.iter().map(|a| {
                if *a == Answer::A {
                    "A"
                } else {
                    "B"
                }
            })))?;
        }
        w.flush().map_err(|e| Error::io("study csv", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub pair_id: String,
    pub truth: Truth,
    pub b_count: usize,
    pub believing_identical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantStats {
    pub participant: String,
    pub correct: usize,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub participants: usize,
    pub pairs: usize,
    pub pair_stats: Vec<PairStats>,
    pub participant_stats: Vec<ParticipantStats>,
    /// Correct-answer count -> number of participants.
    pub correct_histogram: BTreeMap<usize, usize>,
    /// B-answer count -> number of pairs, split by pair truth.
    pub b_histogram_adversarial: BTreeMap<usize, usize>,
    pub b_histogram_identical: BTreeMap<usize, usize>,
    pub max_z: f64,
    pub min_p: f64,
}

pub fn study_summary(table: &HumanStudyTable) -> Result<StudySummary> {
    table.validate()?;
    let n_participants = table.participants.len();
    let n_pairs = table.pair_ids.len();

    let pair_stats: Vec<PairStats> = (0..n_pairs)
        .map(|j| {
            let b_count = table.responses.iter().filter(|r| r[j] == Answer::B).count();
            PairStats {
                pair_id: table.pair_ids[j].clone(),
                truth: table.truth[j],
                b_count,
                believing_identical: (n_participants - b_count) as f64 / n_participants as f64,
            }
        })
        .collect();

    let participant_stats = table
        .participants
        .iter()
        .zip(&table.responses)
        .map(|(id, row)| {
            let correct = row
                .iter()
                .zip(&table.truth)
                .filter(|(a, t)| **a == t.correct_answer())
                .count();
            let z = human_zscore(correct, n_pairs)?;
            Ok(ParticipantStats {
                participant: id.clone(),
                correct,
                z,
                p: one_tailed_p(z),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut correct_histogram = BTreeMap::new();
    for s in &participant_stats {
        *correct_histogram.entry(s.correct).or_insert(0) += 1;
    }
    let mut b_histogram_adversarial = BTreeMap::new();
    let mut b_histogram_identical = BTreeMap::new();
    for s in &pair_stats {
        let h = match s.truth {
            Truth::Adversarial => &mut b_histogram_adversarial,
            Truth::Identical => &mut b_histogram_identical,
        };
        *h.entry(s.b_count).or_insert(0) += 1;
    }
    let max_z = participant_stats.iter().map(|s| s.z).fold(f64::NEG_INFINITY, f64::max);
    Ok(StudySummary {
        participants: n_participants,
        pairs: n_pairs,
        pair_stats,
        participant_stats,
        correct_histogram,
        b_histogram_adversarial,
        b_histogram_identical,
        max_z,
        min_p: one_tailed_p(max_z),
    })
}

/// A 35-participant, 30-pair table shaped like a small perceptual study:
/// three blocks of seven adversarial and three identical pairs, correct
/// counts between 8 and 17, and at most 10 `B` answers on any pair.
pub fn example_table() -> HumanStudyTable {
    const PARTICIPANTS: usize = 35;
    let truth: Vec<Truth> = (0..30)
        .map(|j| {
            if j % 10 < 7 {
                Truth::Adversarial
            } else {
                Truth::Identical
            }
        })
        .collect();
    let adversarial: Vec<usize> = (0..30).filter(|&j| truth[j] == Truth::Adversarial).collect();
    let identical: Vec<usize> = (0..30).filter(|&j| truth[j] == Truth::Identical).collect();
    let mut load = [0usize; 30];
    let mut responses = Vec::with_capacity(PARTICIPANTS);
    for i in 0..PARTICIPANTS {
        let correct = 8 + i % 10;
        // One B on an identical pair costs a correct answer; the first ten
        // participants and everyone at the floor of 8 take one.
        let wrong_identical = usize::from(i < 10 || correct == 8);
        let b_adversarial = correct + wrong_identical - identical.len();
        let mut row = vec![Answer::A; 30];
        if wrong_identical == 1 {
            row[if i < 10 {
                identical[0]
            } else {
                identical[1 + i % (identical.len() - 1)]
            }] = Answer::B;
        }
        let mut picks: Vec<usize> = Vec::with_capacity(b_adversarial);
        if b_adversarial > 0 && load[adversarial[0]] < 10 {
            picks.push(adversarial[0]);
        }
        let mut rest: Vec<usize> = adversarial[1..].to_vec();
        rest.sort_by_key(|&j| (load[j], j));
        picks.extend(rest.into_iter().take(b_adversarial - picks.len()));
        for j in picks {
            row[j] = Answer::B;
            load[j] += 1;
        }
        for (j, a) in row.iter().enumerate() {
            if *a == Answer::B && truth[j] == Truth::Identical {
                load[j] += 1;
            }
        }
        responses.push(row);
    }
    HumanStudyTable {
        pair_ids: (1..=30).map(|j| format!("p{j:02}")).collect(),
        truth,
        participants: (1..=PARTICIPANTS).map(|i| format!("P{i:02}")).collect(),
        responses,
    }
}
