use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::encoder::EmbeddingModel;
use crate::error::{CoreError, Result};
use crate::synth::Item;

/// Pre-head embedding of every catalog item, in item-id order.
pub fn export_embeddings(model: &EmbeddingModel, catalog: &[Item]) -> Result<Vec<Vec<f64>>> {
    let feats: Vec<Vec<f64>> = catalog.iter().map(|it| it.features.clone()).collect();
    let table = model.embed(&feats)?;
    if table.iter().flatten().any(|x| !x.is_finite()) {
        return Err(CoreError::Numeric {
            step: 0,
            batch: 0,
            detail: "non-finite exported embedding".into(),
        });
    }
    Ok(table)
}

/// One line per item: `item_id`, then the embedding, tab separated. Floats
/// use the shortest representation that parses back to the same bits.
pub fn write_embedding_tsv(path: &Path, table: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, row) in table.iter().enumerate() {
        write!(w, "{id}")?;
        for x in row {
            write!(w, "\t{x:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_tsv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let r = BufReader::new(File::open(path)?);
    let mut table: Vec<Vec<f64>> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| CoreError::Data(format!("{}:{}: {m}", path.display(), n + 1));
        let mut fields = line.split('\t');
        let id: usize = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e| bad(format!("item id: {e}")))?;
        if id != table.len() {
            return Err(bad(format!("expected item {}, found {id}", table.len())));
        }
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = table.first() {
            if first.len() != row.len() {
                return Err(bad(format!("{} columns, expected {}", row.len(), first.len())));
            }
        }
        table.push(row);
    }
    Ok(table)
}
