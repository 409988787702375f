use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Semantic-ID tuple of every item: exactly `K` codes in `[0, V)` each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SidTable {
    k: usize,
    v: usize,
    ids: Vec<String>,
    codes: Vec<u16>,
    index: HashMap<String, usize>,
}

impl SidTable {
    pub fn new(k: usize, v: usize) -> Self {
        Self {
            k,
            v,
            ids: Vec::new(),
            codes: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, codes: &[usize]) -> Result<()> {
        let id = id.into();
        if codes.len() != self.k {
            return Err(Error::shape("sid table", format!("{} codes for item {id}, expected {}", codes.len(), self.k)));
        }
        if let Some(&c) = codes.iter().find(|&&c| c >= self.v) {
            return Err(Error::OutOfRange {
                what: "semantic id",
                index: c,
                len: self.v,
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::Config(format!("duplicate item id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.codes.extend(codes.iter().map(|&c| c as u16));
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn v(&self) -> usize {
        self.v
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

    pub fn codes(&self, row: usize) -> &[u16] {
        &self.codes[row * self.k..(row + 1) * self.k]
    }

    pub fn get(&self, id: &str) -> Option<&[u16]> {
        self.index.get(id).map(|&r| self.codes(r))
    }
}

pub fn write_sid_table(table: &SidTable, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "item_id,K={},V={}", table.k, table.v)?;
    for (r, id) in table.ids.iter().enumerate() {
        write!(w, "{id}")?;
        for c in table.codes(r) {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sid_table(path: &Path) -> Result<SidTable> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))??;
    let parts: Vec<&str> = header.trim().split(',').collect();
    let (k, v) = match parts.as_slice() {
        ["item_id", k, v] => {
            let k = k.strip_prefix("K=").and_then(|s| s.parse::<usize>().ok());
            let v = v.strip_prefix("V=").and_then(|s| s.parse::<usize>().ok());
            match (k, v) {
                (Some(k), Some(v)) if k > 0 && v > 0 => (k, v),
                _ => return Err(parse_err(1, format!("bad header '{header}'"))),
            }
        }
        _ => return Err(parse_err(1, format!("bad header '{header}'"))),
    };
    let mut table = SidTable::new(k, v);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim().split(',');
        let id = fields.next().unwrap_or_default();
        let codes = fields
            .map(|f| f.parse::<usize>().map_err(|e| parse_err(lineno, format!("code '{f}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        table.insert(id, &codes).map_err(|e| parse_err(lineno, e.to_string()))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut t = SidTable::new(3, 16);
        t.insert("a", &[0, 15, 3]).unwrap();
        t.insert("b", &[1, 1, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sids.csv");
        write_sid_table(&t, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("item_id,K=3,V=16\na,0,15,3\n"));
        assert_eq!(read_sid_table(&p).unwrap(), t);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut t = SidTable::new(2, 4);
        assert!(t.insert("a", &[0, 4]).is_err());
        assert!(t.insert("a", &[0]).is_err());
        t.insert("a", &[0, 3]).unwrap();
        assert!(t.insert("a", &[1, 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sids.csv");
        fs::write(&p, "item_id,K=2,V=4\nx,1,2\ny,1,9\n").unwrap();
        match read_sid_table(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
