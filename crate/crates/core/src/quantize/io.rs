use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

fn lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if !line.is_empty() {
            out.push((n + 1, line.split('\t').map(str::to_string).collect()));
        }
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| CoreError::Data(format!("{}:{line}: {s:?}: {e}", path.display())))
}

/// `item_id \t cluster_id` per line.
pub fn write_cluster_map_tsv(path: &Path, assignments: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (item, c) in assignments.iter().enumerate() {
        writeln!(w, "{item}\t{c}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cluster_map_tsv(path: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (n, fields) in lines(path)? {
        if fields.len() != 2 {
            return Err(CoreError::Data(format!("{}:{n}: expected 2 columns", path.display())));
        }
        let item: usize = parse(path, n, &fields[0])?;
        if item != out.len() {
            return Err(CoreError::Data(format!(
                "{}:{n}: expected item {}, found {item}",
                path.display(),
                out.len()
            )));
        }
        out.push(parse(path, n, &fields[1])?);
    }
    Ok(out)
}

/// `cluster_id \t c_1 … c_d` per line.
pub fn write_centers_tsv(path: &Path, centers: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (c, row) in centers.iter().enumerate() {
        write!(w, "{c}")?;
        for x in row {
            write!(w, "\t{x:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_centers_tsv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (n, fields) in lines(path)? {
        let id: usize = parse(path, n, &fields[0])?;
        if id != out.len() {
            return Err(CoreError::Data(format!("{}:{n}: centers out of order", path.display())));
        }
        out.push(
            fields[1..]
                .iter()
                .map(|f| parse(path, n, f))
                .collect::<Result<_>>()?,
        );
    }
    Ok(out)
}
