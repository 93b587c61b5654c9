//! Trial protocols and enrollment maps.
//!
//! Both files are plain UTF-8 text with one whitespace-separated record per
//! line. Blank lines and lines whose first non-blank character is `#` are
//! skipped. LF and CRLF line endings are accepted.
//!
//! ```text
//! # trials: <speaker_id> <test_utt_id> <target|nontarget|spoof>
//! spk1 utt9 target
//!
//! # enrollment: <speaker_id> <utt_id>
//! spk1 utt1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("duplicate enrollment utterance '{1}' for speaker '{0}'")]
    DuplicateEnrollment(String, String),
    #[error("trial {1} references unenrolled speaker '{0}'")]
    UnenrolledSpeaker(String, usize),
    #[error("invalid identifier '{0}': ids must be non-empty and contain no whitespace")]
    InvalidId(String),
}

/// Ground-truth class of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    /// Bona fide, same speaker.
    Target,
    /// Bona fide, different speaker.
    NonTarget,
    /// Spoofed utterance aimed at the enrolled speaker.
    Spoof,
}

impl TrialLabel {
    pub const ALL: [TrialLabel; 3] = [TrialLabel::Target, TrialLabel::NonTarget, TrialLabel::Spoof];

    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::NonTarget => "nontarget",
            TrialLabel::Spoof => "spoof",
        }
    }

    /// Binary training target: 1 only for bona fide target trials.
    pub fn is_positive(self) -> bool {
        self == TrialLabel::Target
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::NonTarget),
            "spoof" => Ok(TrialLabel::Spoof),
            _ => Err(()),
        }
    }
}

fn check_id(id: &str) -> Result<(), ProtocolError> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(ProtocolError::InvalidId(id.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub speaker_id: String,
    pub test_utt_id: String,
    pub label: TrialLabel,
}

impl Trial {
    pub fn new(
        speaker_id: impl Into<String>,
        test_utt_id: impl Into<String>,
        label: TrialLabel,
    ) -> Result<Self, ProtocolError> {
        let speaker_id = speaker_id.into();
        let test_utt_id = test_utt_id.into();
        check_id(&speaker_id)?;
        check_id(&test_utt_id)?;
        Ok(Self { speaker_id, test_utt_id, label })
    }
}

/// Speaker id to enrollment utterance ids, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnrollmentMap {
    speakers: IndexMap<String, Vec<String>>,
}

impl EnrollmentMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `utt_id` to the speaker's list, creating the speaker if needed.
    pub fn insert(&mut self, speaker_id: &str, utt_id: &str) -> Result<(), ProtocolError> {
        check_id(speaker_id)?;
        check_id(utt_id)?;
        let list = self.speakers.entry(speaker_id.to_string()).or_default();
        if list.iter().any(|u| u == utt_id) {
            return Err(ProtocolError::DuplicateEnrollment(
                speaker_id.to_string(),
                utt_id.to_string(),
            ));
        }
        list.push(utt_id.to_string());
        Ok(())
    }

    pub fn get(&self, speaker_id: &str) -> Option<&[String]> {
        self.speakers.get(speaker_id).map(Vec::as_slice)
    }

    pub fn contains(&self, speaker_id: &str) -> bool {
        self.speakers.contains_key(speaker_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.speakers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Number of trials per label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub target: usize,
    pub nontarget: usize,
    pub spoof: usize,
}

impl LabelCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = TrialLabel>) -> Self {
        let mut counts = Self::default();
        for label in labels {
            counts.add(label);
        }
        counts
    }

    pub fn add(&mut self, label: TrialLabel) {
        match label {
            TrialLabel::Target => self.target += 1,
            TrialLabel::NonTarget => self.nontarget += 1,
            TrialLabel::Spoof => self.spoof += 1,
        }
    }

    pub fn get(&self, label: TrialLabel) -> usize {
        match label {
            TrialLabel::Target => self.target,
            TrialLabel::NonTarget => self.nontarget,
            TrialLabel::Spoof => self.spoof,
        }
    }

    pub fn total(&self) -> usize {
        self.target + self.nontarget + self.spoof
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSet {
    pub partition_name: String,
    pub trials: Vec<Trial>,
    pub enrollment: EnrollmentMap,
    pub counts: LabelCounts,
}

impl ProtocolSet {
    /// Distinct utterance ids referenced by the protocol (enrollment first, then
    /// test utterances), in first-seen order.
    pub fn utterance_ids(&self) -> Vec<&str> {
        let mut seen = indexmap::IndexSet::new();
        for (_, utts) in self.enrollment.iter() {
            for u in utts {
                seen.insert(u.as_str());
            }
        }
        for t in &self.trials {
            seen.insert(t.test_utt_id.as_str());
        }
        seen.into_iter().collect()
    }
}

/// Yields `(1-based line number, fields)` for every record line.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line.split_whitespace().collect()))
        }
    })
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>, ProtocolError> {
    records(text)
        .map(|(line_no, fields)| {
            let [spk, utt, label] = fields.as_slice() else {
                return Err(ProtocolError::MalformedLine(
                    line_no,
                    format!("expected 3 fields, found {}", fields.len()),
                ));
            };
            let label = label.parse::<TrialLabel>().map_err(|_| {
                ProtocolError::MalformedLine(line_no, format!("unknown label '{label}'"))
            })?;
            Ok(Trial { speaker_id: spk.to_string(), test_utt_id: utt.to_string(), label })
        })
        .collect()
}

pub fn parse_enrollment(text: &str) -> Result<EnrollmentMap, ProtocolError> {
    let mut map = EnrollmentMap::new();
    for (line_no, fields) in records(text) {
        let [spk, utt] = fields.as_slice() else {
            return Err(ProtocolError::MalformedLine(
                line_no,
                format!("expected 2 fields, found {}", fields.len()),
            ));
        };
        map.insert(spk, utt)?;
    }
    Ok(map)
}

pub fn validate_protocol(
    partition_name: &str,
    trials: Vec<Trial>,
    enrollment: EnrollmentMap,
) -> Result<ProtocolSet, ProtocolError> {
    for (i, t) in trials.iter().enumerate() {
        if !enrollment.contains(&t.speaker_id) {
            return Err(ProtocolError::UnenrolledSpeaker(t.speaker_id.clone(), i));
        }
    }
    let counts = LabelCounts::from_labels(trials.iter().map(|t| t.label));
    Ok(ProtocolSet { partition_name: partition_name.to_string(), trials, enrollment, counts })
}

pub fn serialize_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!("{} {} {}\n", t.speaker_id, t.test_utt_id, t.label));
    }
    out
}

pub fn serialize_enrollment(enrollment: &EnrollmentMap) -> String {
    let mut out = String::new();
    for (spk, utts) in enrollment.iter() {
        for u in utts {
            out.push_str(&format!("{spk} {u}\n"));
        }
    }
    out
}

/// Label counts keyed by label name, for reports.
pub fn counts_by_name(counts: &LabelCounts) -> BTreeMap<&'static str, usize> {
    TrialLabel::ALL.iter().map(|&l| (l.as_str(), counts.get(l))).collect()
}
