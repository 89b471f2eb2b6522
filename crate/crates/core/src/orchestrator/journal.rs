//! Append-only campaign journal (`journal.jsonl`).
//!
//! Every client call is bracketed by a `begin` and an `end` (or `fail`)
//! entry; the `end` entry stores the client's response so a resumed campaign
//! replays it instead of calling the client again. Internal steps record the
//! SHA-256 of every manifest they emit.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Begin,
    End,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub round: u32,
    pub step: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manifests: Vec<ManifestRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Raised when the test-only append budget runs out; simulates a crash
/// right before the entry would have been written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupted;

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    next_seq: u64,
    completed: HashMap<(u32, String), serde_json::Value>,
    append_budget: Option<usize>,
}

impl Journal {
    /// Opens (or creates) the journal, indexing completed client steps. A
    /// torn final line from a crash mid-write is ignored.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut next_seq = 0;
        let mut completed = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                let Ok(entry) = serde_json::from_str::<JournalEntry>(&line) else {
                    continue;
                };
                next_seq = next_seq.max(entry.seq + 1);
                if entry.phase == Phase::End {
                    if let Some(resp) = entry.response {
                        completed.insert((entry.round, entry.step), resp);
                    }
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            next_seq,
            completed,
            append_budget: None,
        })
    }

    pub fn set_append_budget(&mut self, budget: Option<usize>) {
        self.append_budget = budget;
    }

    pub fn completed(&self, round: u32, step: &str) -> Option<&serde_json::Value> {
        self.completed.get(&(round, step.to_string()))
    }

    pub fn append(
        &mut self,
        round: u32,
        step: &str,
        phase: Phase,
        response: Option<serde_json::Value>,
        manifests: Vec<ManifestRecord>,
        detail: Option<String>,
    ) -> Result<(), JournalError> {
        if let Some(budget) = self.append_budget.as_mut() {
            if *budget == 0 {
                return Err(JournalError::Interrupted(Interrupted));
            }
            *budget -= 1;
        }
        let entry = JournalEntry {
            seq: self.next_seq,
            round,
            step: step.to_string(),
            phase,
            response,
            manifests,
            detail,
        };
        let mut line = serde_json::to_vec(&entry).map_err(|e| JournalError::Io(e.to_string()))?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| JournalError::Io(e.to_string()))?;
        f.write_all(&line).map_err(|e| JournalError::Io(e.to_string()))?;
        f.sync_data().map_err(|e| JournalError::Io(e.to_string()))?;
        self.next_seq += 1;
        if phase == Phase::End {
            if let Some(resp) = entry.response {
                self.completed.insert((round, step.to_string()), resp);
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> std::io::Result<Vec<JournalEntry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        Ok(BufReader::new(File::open(&self.path)?)
            .lines()
            .map_while(Result::ok)
            .filter_map(|l| serde_json::from_str(&l).ok())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JournalError {
    Interrupted(Interrupted),
    Io(String),
}
