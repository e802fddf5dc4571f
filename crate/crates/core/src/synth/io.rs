use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Item, Session};
use crate::error::{CoreError, Result};

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SPACE_FILE: &str = "space.json";

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CoreError::Data(format!("{}:{}: {}", path.display(), n + 1, e))
        })?);
    }
    Ok(out)
}

pub fn write_catalog(path: &Path, items: &[Item]) -> Result<()> {
    write_jsonl(path, items)
}

/// Reads a catalog and checks that item ids are dense and in order.
pub fn read_catalog(path: &Path) -> Result<Vec<Item>> {
    let items: Vec<Item> = read_jsonl(path)?;
    for (i, it) in items.iter().enumerate() {
        if it.item_id != i {
            return Err(CoreError::Data(format!(
                "{}: expected item_id {} on line {}, found {}",
                path.display(),
                i,
                i + 1,
                it.item_id
            )));
        }
    }
    Ok(items)
}

pub fn write_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    write_jsonl(path, sessions)
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let sessions: Vec<Session> = read_jsonl(path)?;
    for s in &sessions {
        s.check()?;
    }
    Ok(sessions)
}
