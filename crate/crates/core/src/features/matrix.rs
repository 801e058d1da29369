use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Nllf,
    Ef,
    Bong,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nllf" => Ok(FeatureKind::Nllf),
            "ef" => Ok(FeatureKind::Ef),
            "bong" => Ok(FeatureKind::Bong),
            _ => Err(Error::Config(format!("unknown feature kind `{s}` (nllf, ef, bong)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub id: String,
    pub kind: FeatureKind,
    pub label: String,
    /// Question id, rule id, or vocabulary index.
    pub source: String,
}

/// Dense row-major matrix with one descriptor per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub descriptors: Vec<FeatureDescriptor>,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(row_ids: Vec<String>, descriptors: Vec<FeatureDescriptor>, values: Vec<f64>) -> Result<Self> {
        let m = FeatureMatrix { row_ids, descriptors, values };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        if self.values.len() != self.row_ids.len() * self.descriptors.len() {
            return Err(Error::Internal(format!(
                "matrix holds {} values for {} rows x {} columns",
                self.values.len(),
                self.row_ids.len(),
                self.descriptors.len()
            )));
        }
        let mut seen = HashSet::new();
        for d in &self.descriptors {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Internal(format!("duplicate feature id `{}`", d.id)));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.row_ids.len()
    }

    pub fn width(&self) -> usize {
        self.descriptors.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width() + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.height()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.descriptors.iter().position(|d| d.id == id)
    }

    /// Keeps the listed columns, in the listed order.
    pub fn select_columns(&self, ids: &[String]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.column_index(id)
                    .ok_or_else(|| Error::validation(format!("feature `{id}` not in matrix")))
            })
            .collect::<Result<_>>()?;
        self.take_columns(&idx)
    }

    pub fn take_columns(&self, idx: &[usize]) -> Result<FeatureMatrix> {
        let mut values = Vec::with_capacity(self.height() * idx.len());
        for i in 0..self.height() {
            let row = self.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        FeatureMatrix::new(
            self.row_ids.clone(),
            idx.iter().map(|&j| self.descriptors[j].clone()).collect(),
            values,
        )
    }

    /// Rows in the order of `ids`.
    pub fn select_rows(&self, ids: &[String]) -> Result<FeatureMatrix> {
        let pos: std::collections::HashMap<&str, usize> =
            self.row_ids.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
        let mut values = Vec::with_capacity(ids.len() * self.width());
        for id in ids {
            let &i = pos
                .get(id.as_str())
                .ok_or_else(|| Error::validation(format!("row `{id}` not in matrix")))?;
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix::new(ids.to_vec(), self.descriptors.clone(), values)
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        let mut k: Vec<FeatureKind> = self.descriptors.iter().map(|d| d.kind).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Writes `<stem>.csv` (header `id,<feature ids>`) and `<stem>.descriptors.json`.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.descriptors.iter().map(|d| d.id.clone()));
        w.write_record(&header)?;
        for (i, id) in self.row_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            // `{:?}` on f64 prints the shortest string that round-trips exactly.
            rec.extend(self.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        util::write_atomic(csv_path, &bytes)?;
        util::write_json(&descriptor_path(csv_path), &self.descriptors)
    }

    pub fn load(csv_path: &Path) -> Result<FeatureMatrix> {
        let descriptors: Vec<FeatureDescriptor> = util::read_json(&descriptor_path(csv_path))?;
        let mut r = csv::Reader::from_path(csv_path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(csv_path, io),
            other => Error::Input(format!("{}: {other:?}", csv_path.display())),
        })?;
        let header = r.headers()?.clone();
        if header.len() != descriptors.len() + 1
            || header.iter().skip(1).zip(&descriptors).any(|(h, d)| h != d.id)
        {
            return Err(Error::Input(format!(
                "{}: header does not match its descriptor file",
                csv_path.display()
            )));
        }
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            row_ids.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                values.push(cell.parse::<f64>().map_err(|e| Error::Parse {
                    path: csv_path.to_path_buf(),
                    line: line + 2,
                    message: format!("bad number `{cell}`: {e}"),
                })?);
            }
        }
        FeatureMatrix::new(row_ids, descriptors, values)
    }
}

pub fn descriptor_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("descriptors.json")
}

/// Column-concatenates blocks built over the same rows.
pub fn assemble(blocks: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::validation("no feature kinds requested"))?;
    for b in &blocks[1..] {
        if b.row_ids != first.row_ids {
            return Err(Error::Internal(format!(
                "row mismatch between feature blocks ({} vs {} rows)",
                first.height(),
                b.height()
            )));
        }
    }
    let mut values = Vec::with_capacity(first.height() * blocks.iter().map(|b| b.width()).sum::<usize>());
    for i in 0..first.height() {
        for b in blocks {
            values.extend_from_slice(b.row(i));
        }
    }
    FeatureMatrix::new(
        first.row_ids.clone(),
        blocks.iter().flat_map(|b| b.descriptors.iter().cloned()).collect(),
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(prefix: &str, kind: FeatureKind, rows: usize, cols: usize) -> FeatureMatrix {
        let descriptors = (0..cols)
            .map(|j| FeatureDescriptor {
                id: format!("{prefix}{j}"),
                kind,
                label: format!("{prefix} {j}"),
                source: j.to_string(),
            })
            .collect();
        let values = (0..rows * cols).map(|v| v as f64 / 7.0).collect();
        FeatureMatrix::new((0..rows).map(|i| format!("r{i}")).collect(), descriptors, values).unwrap()
    }

    #[test]
    fn assemble_concatenates_columns() {
        let a = block("a", FeatureKind::Nllf, 5, 2);
        let b = block("b", FeatureKind::Ef, 5, 3);
        let c = block("c", FeatureKind::Bong, 5, 4);
        let m = assemble(&[&a, &b, &c]).unwrap();
        assert_eq!((m.height(), m.width()), (5, 9));
        assert_eq!(m.row(2)[..2], *a.row(2));
        assert_eq!(m.row(2)[2..5], *b.row(2));
        assert_eq!(m.kinds(), [FeatureKind::Nllf, FeatureKind::Ef, FeatureKind::Bong]);
        assert_eq!(assemble(&[&a]).unwrap(), a);
    }

    #[test]
    fn mismatched_rows_are_internal_errors() {
        let a = block("a", FeatureKind::Nllf, 5, 2);
        let b = block("b", FeatureKind::Ef, 4, 3);
        assert!(matches!(assemble(&[&a, &b]), Err(Error::Internal(_))));
        let dup = block("a", FeatureKind::Ef, 5, 1);
        assert!(matches!(assemble(&[&a, &dup]), Err(Error::Internal(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = assemble(&[&block("a", FeatureKind::Nllf, 3, 2), &block("b", FeatureKind::Bong, 3, 2)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.csv");
        m.save(&p).unwrap();
        assert_eq!(FeatureMatrix::load(&p).unwrap(), m);
    }

    #[test]
    fn column_and_row_selection() {
        let m = block("a", FeatureKind::Ef, 3, 3);
        let s = m.select_columns(&["a2".into(), "a0".into()]).unwrap();
        assert_eq!(s.row(1), [m.get(1, 2), m.get(1, 0)]);
        assert!(m.select_columns(&["zz".into()]).is_err());
        let r = m.select_rows(&["r2".into(), "r0".into()]).unwrap();
        assert_eq!(r.row(0), m.row(2));
    }
}
