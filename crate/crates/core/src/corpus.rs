//! Conversation data model, canonical JSONL ingestion, dynamic prefix
//! expansion, and equal-depth score binning.
//!
//! Canonical on-disk format is one JSON object per line:
//! `{"conv_id", "label", "turns": [{"turn_id", "text", "user_id", "score"?,
//! "parent_id"?}]}`. The final turn carries the conversation label; model
//! code only ever sees turns `1..N-1` (see [`Conversation::visible_turns`]).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Civil,
    PersonalAttack,
}

impl Label {
    pub fn is_attack(self) -> bool {
        matches!(self, Label::PersonalAttack)
    }

    pub fn from_attack_flag(attack: bool) -> Self {
        if attack {
            Label::PersonalAttack
        } else {
            Label::Civil
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Civil => write!(f, "civil"),
            Label::PersonalAttack => write!(f, "personal_attack"),
        }
    }
}

/// One message in a conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: String,
    pub text: String,
    pub user_id: String,
    /// Up-votes minus down-votes, when the platform exposes votes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<i64>,
    /// Id of the turn this one replies to; must point at an earlier turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

/// An ordered multi-party conversation whose final turn carries the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub label: Label,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Number of turns including the labeled final one.
    pub fn turn_count(&self) -> usize {
        self.turns.len()
    }

    /// The turns a forecaster may look at: everything before the final turn.
    pub fn visible_turns(&self) -> &[Turn] {
        &self.turns[..self.turns.len() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_id.trim().is_empty() {
            return Err(Error::Validation {
                conv_id: self.conv_id.clone(),
                message: "conv_id must be non-empty".into(),
            });
        }
        if self.turns.len() < 2 {
            return Err(Error::Validation {
                conv_id: self.conv_id.clone(),
                message: format!("needs at least 2 turns, found {}", self.turns.len()),
            });
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.trim().is_empty() {
                return Err(Error::Validation {
                    conv_id: self.conv_id.clone(),
                    message: format!("turn `{}` (index {i}) has empty text", turn.turn_id),
                });
            }
            if let Some(parent) = &turn.parent_id {
                if !seen.contains(parent.as_str()) {
                    return Err(Error::Validation {
                        conv_id: self.conv_id.clone(),
                        message: format!(
                            "turn `{}` (index {i}) has parent_id `{parent}` that does not \
                             reference an earlier turn",
                            turn.turn_id
                        ),
                    });
                }
            }
            if !seen.insert(&turn.turn_id) {
                return Err(Error::Validation {
                    conv_id: self.conv_id.clone(),
                    message: format!("duplicate turn_id `{}`", turn.turn_id),
                });
            }
        }
        Ok(())
    }
}

/// A conversation truncated to its first `prefix_len` turns for dynamic
/// training and inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixInstance {
    pub conv_id: String,
    pub prefix_len: usize,
    pub turns: Vec<Turn>,
    pub label: Label,
}

/// Supported corpus file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    CanonicalJsonl,
}

/// Load and validate a canonical JSONL corpus.
pub fn load_conversations(path: &Path, format: CorpusFormat) -> Result<Vec<Conversation>> {
    let CorpusFormat::CanonicalJsonl = format;
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_conversation_line(&line, lineno + 1)?);
    }
    Ok(out)
}

/// Parse and validate a single canonical JSONL record.
pub fn parse_conversation_line(line: &str, lineno: usize) -> Result<Conversation> {
    match serde_json::from_str::<Conversation>(line) {
        Ok(conv) => {
            conv.validate()?;
            Ok(conv)
        }
        Err(e) => {
            // Recover the conv_id (when parseable at all) so the error names
            // the offending record, not just a line number.
            let conv_id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("conv_id").and_then(|c| c.as_str().map(String::from)))
                .unwrap_or_else(|| format!("<line {lineno}>"));
            Err(Error::Parse {
                conv_id,
                field: field_from_serde_error(&e),
                message: e.to_string(),
            })
        }
    }
}

fn field_from_serde_error(e: &serde_json::Error) -> String {
    // serde_json messages look like "missing field `text` at line ..";
    // pull the backticked name when present.
    let msg = e.to_string();
    if let Some(start) = msg.find('`') {
        if let Some(end) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + end].to_string();
        }
    }
    "<record>".to_string()
}

/// Write conversations as canonical JSONL (inverse of [`load_conversations`]).
pub fn save_conversations(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut writer = BufWriter::new(file);
    for conv in conversations {
        let line = serde_json::to_string(conv).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        writeln!(writer, "{line}").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

/// Expand a conversation into its N-1 prefix instances (lengths 1..=N-1),
/// each inheriting the conversation label.
pub fn expand_dynamic_instances(conv: &Conversation) -> Vec<PrefixInstance> {
    let visible = conv.visible_turns();
    (1..=visible.len())
        .map(|k| PrefixInstance {
            conv_id: conv.conv_id.clone(),
            prefix_len: k,
            turns: visible[..k].to_vec(),
            label: conv.label,
        })
        .collect()
}

/// Index of the bin used for zero and missing scores.
pub const NEUTRAL_BIN: usize = 3;
/// Total bin count: three negative levels, one neutral, three positive.
pub const SCORE_BIN_COUNT: usize = 7;

/// Equal-depth score binning fitted on the training split.
///
/// Bin layout over the 7 indices: `0..=2` negative (ascending score),
/// `3` neutral (zero or missing), `4..=6` positive (ascending score).
/// Boundary values belong to the lower bin. Sides with fewer than three
/// distinct values collapse to fewer bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreBinning {
    pub positive_boundaries: Vec<i64>,
    pub negative_boundaries: Vec<i64>,
}

impl ScoreBinning {
    /// Total, deterministic score-to-bin mapping.
    pub fn bin(&self, score: Option<i64>) -> usize {
        match score {
            None | Some(0) => NEUTRAL_BIN,
            Some(s) if s > 0 => 4 + self.positive_boundaries.iter().filter(|&&b| s > b).count(),
            Some(s) => self.negative_boundaries.iter().filter(|&&b| s > b).count(),
        }
    }

    pub fn all_neutral(&self) -> bool {
        self.positive_boundaries.is_empty() && self.negative_boundaries.is_empty()
    }
}

/// Rank-based tertile boundaries over a sorted multiset. Returns up to two
/// ascending values; a duplicated cut advances to the next distinct value so
/// bins never share a boundary.
fn tertile_boundaries(sorted: &[i64]) -> Vec<i64> {
    let distinct: Vec<i64> = {
        let mut d = sorted.to_vec();
        d.dedup();
        d
    };
    match distinct.len() {
        0 | 1 => vec![],
        2 => vec![distinct[0]],
        _ => {
            let n = sorted.len();
            let s1 = n.div_ceil(3);
            let s2 = (n - s1).div_ceil(2);
            let b1 = sorted[s1 - 1];
            let mut b2 = sorted[s1 + s2 - 1];
            if b2 <= b1 {
                match distinct.iter().find(|&&v| v > b1) {
                    Some(&v) if v < *distinct.last().unwrap() => b2 = v,
                    _ => return vec![b1],
                }
            }
            vec![b1, b2]
        }
    }
}

/// Fit equal-depth binning from the training split, using only the turns a
/// model would see (everything before each final turn). Scores of zero are
/// neutral by definition and do not shape the boundaries.
pub fn fit_score_binning(train: &[Conversation]) -> Result<ScoreBinning> {
    if train.is_empty() {
        return Err(Error::Config(
            "cannot fit score binning on an empty training set".into(),
        ));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for conv in train {
        for turn in conv.visible_turns() {
            match turn.score {
                Some(s) if s > 0 => positives.push(s),
                Some(s) if s < 0 => negatives.push(s),
                _ => {}
            }
        }
    }
    positives.sort_unstable();
    negatives.sort_unstable();
    let binning = ScoreBinning {
        positive_boundaries: tertile_boundaries(&positives),
        negative_boundaries: tertile_boundaries(&negatives),
    };
    if binning.positive_boundaries.len() < 2 {
        log::warn!(
            "fewer than 3 distinct positive scores in the training split; \
             collapsing to {} positive bin(s)",
            binning.positive_boundaries.len() + 1
        );
    }
    if binning.negative_boundaries.len() < 2 {
        log::warn!(
            "fewer than 3 distinct negative scores in the training split; \
             collapsing to {} negative bin(s)",
            binning.negative_boundaries.len() + 1
        );
    }
    Ok(binning)
}
