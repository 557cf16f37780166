//! Line-delimited JSON dataset manifests.

use crate::error::{Error, Result};
use crate::types::DatasetRecord;
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Parse a manifest file: one JSON record per line, in file order.
/// Malformed lines and duplicate ids are reported with their line number.
pub fn parse_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if record.grade > 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("grade out of range at line {lineno}"),
            });
        }
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate image_id {}", record.image_id),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
