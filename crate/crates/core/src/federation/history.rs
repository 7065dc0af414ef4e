//! On-disk round history: `round_<r>/client_<k>.pv` blobs plus `index.tsv`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::param_space::ParamVector;

use super::server::{HistoryEntry, HistoryRound};

pub const INDEX_FILE: &str = "index.tsv";
pub const INDEX_HEADER: &str = "round\tclient\tsample_count\tlambda";

/// Append-only writer/reader for persisted round history. Directory numbers
/// count rounds written to this store, independent of the server's round index.
#[derive(Debug)]
pub struct HistoryStore {
    root: PathBuf,
    next_round: usize,
}

impl HistoryStore {
    /// Creates `root` (and an index with just a header) if missing; an existing
    /// store is appended to.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let index = root.join(INDEX_FILE);
        let next_round = if index.exists() {
            read_index(&index)?
                .iter()
                .map(|r| r.round + 1)
                .max()
                .unwrap_or(0)
        } else {
            fs::write(&index, format!("{INDEX_HEADER}\n")).map_err(|e| Error::io(&index, e))?;
            0
        };
        Ok(Self { root, next_round })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes one round's updates and appends its rows to the index.
    pub fn write_round(&mut self, round: &HistoryRound) -> Result<usize> {
        let r = self.next_round;
        let dir = self.root.join(format!("round_{r}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rows = String::new();
        for (client, entry) in &round.entries {
            let path = dir.join(format!("client_{client}.pv"));
            entry.update.save(&path)?;
            rows.push_str(&format!(
                "{r}\t{client}\t{}\t{}\n",
                entry.sample_count, entry.lambda
            ));
        }
        let index = self.root.join(INDEX_FILE);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&index)
            .map_err(|e| Error::io(&index, e))?;
        f.write_all(rows.as_bytes()).map_err(|e| Error::io(&index, e))?;
        self.next_round += 1;
        Ok(r)
    }

    /// Reads every stored round back, in round order.
    pub fn load(root: &Path) -> Result<Vec<HistoryRound>> {
        let rows = read_index(&root.join(INDEX_FILE))?;
        let mut rounds: BTreeMap<usize, BTreeMap<usize, HistoryEntry>> = BTreeMap::new();
        for row in rows {
            let path = root
                .join(format!("round_{}", row.round))
                .join(format!("client_{}.pv", row.client));
            let update = ParamVector::load(&path)?;
            rounds.entry(row.round).or_default().insert(
                row.client,
                HistoryEntry {
                    update,
                    sample_count: row.sample_count,
                    lambda: row.lambda,
                },
            );
        }
        let expected: Vec<usize> = (0..rounds.len()).collect();
        let found: Vec<usize> = rounds.keys().copied().collect();
        if found != expected {
            return Err(Error::InconsistentState(format!(
                "history rounds {found:?} are not contiguous from 0"
            )));
        }
        Ok(rounds
            .into_iter()
            .map(|(round, entries)| HistoryRound { round, entries })
            .collect())
    }
}

#[derive(Debug)]
struct IndexRow {
    round: usize,
    client: usize,
    sample_count: usize,
    lambda: f64,
}

fn read_index(path: &Path) -> Result<Vec<IndexRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: 1,
            message: format!("expected header {INDEX_HEADER:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = i + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: fields.len(),
                message: "expected 4 tab-separated fields".into(),
            });
        }
        let bad = |column: usize| Error::Parse {
            path: path.to_path_buf(),
            row,
            column,
            message: format!("malformed field {:?}", fields[column - 1]),
        };
        rows.push(IndexRow {
            round: fields[0].parse().map_err(|_| bad(1))?,
            client: fields[1].parse().map_err(|_| bad(2))?,
            sample_count: fields[2].parse().map_err(|_| bad(3))?,
            lambda: fields[3].parse().map_err(|_| bad(4))?,
        });
    }
    Ok(rows)
}
