use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Pretrained item embeddings, all of dimension `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::shape(
                "embedding table",
                format!("item {id}: {} values, table dim {}", vector.len(), self.dim),
            ));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Config(format!("duplicate item id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&r| self.vector(r))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Row-major `[len, dim]` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Reads `item_id,dim=<d>` followed by `id,v0,...,v{d-1}` rows.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))??;
    let dim = header
        .trim()
        .strip_prefix("item_id,dim=")
        .and_then(|d| d.parse::<usize>().ok())
        .ok_or_else(|| perr(1, format!("expected header 'item_id,dim=<d>', got '{header}'")))?;
    let mut table = EmbeddingTable::new(dim);
    let mut buf = Vec::with_capacity(dim);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim();
        buf.clear();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("bad number '{f}'")))?;
            buf.push(v);
        }
        if buf.len() != dim {
            return Err(perr(lineno, format!("expected {dim} values, got {}", buf.len())));
        }
        table
            .insert(id, &buf)
            .map_err(|e| perr(lineno, e.to_string()))?;
    }
    Ok(table)
}

/// Writes values with shortest round-trip formatting, so reading back is
/// exact.
pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "item_id,dim={}", table.dim())?;
    for (r, id) in table.ids().iter().enumerate() {
        write!(w, "{id}")?;
        for v in table.vector(r) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_items() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "item_id,dim=4\na,1,2,3,4\nb,0.5,-1,0,2\n").unwrap();
        let t = read_embeddings(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("b").unwrap(), &[0.5, -1.0, 0.0, 2.0]);
    }

    #[test]
    fn duplicate_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "item_id,dim=2\na,1,2\na,3,4\n").unwrap();
        let err = read_embeddings(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "item_id,dim=2\na,1,2\nb,3\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "a,1,2\n").unwrap();
        assert!(read_embeddings(&p).is_err());
    }
}
