use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Seed, structural sizes and true parameter values behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub sizes: BTreeMap<String, usize>,
    pub truth: BTreeMap<String, f64>,
}

impl DatasetSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, sizes: BTreeMap::new(), truth: BTreeMap::new() }
    }

    pub fn size(mut self, key: &str, v: usize) -> Self {
        self.sizes.insert(key.to_string(), v);
        self
    }

    pub fn truth(mut self, key: &str, v: f64) -> Self {
        self.truth.insert(key.to_string(), v);
        self
    }
}

/// One row per observation with a fixed header per model.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec, columns: &[&str]) -> Self {
        Self { spec, columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns)?;
        for row in &self.rows {
            out.write_record(row.iter().map(|v| format!("{v}")))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads rows back; the spec is not stored in the CSV and is supplied.
    pub fn read_csv<R: Read>(r: R, spec: DatasetSpec) -> Result<Self, ModelError> {
        let mut rdr = csv::Reader::from_reader(r);
        let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| ModelError::Dataset(format!("`{s}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != columns.len() {
                return Err(ModelError::Dataset(format!("expected {} fields, got {}", columns.len(), row.len())));
            }
            rows.push(row);
        }
        Ok(Self { spec, columns, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut d = Dataset::new(DatasetSpec::new(3).size("n", 2), &["x", "y"]);
        d.push(vec![1.5, 2.0]);
        d.push(vec![-0.25, 1e-300]);
        let text = d.to_csv_string();
        assert!(text.starts_with("x,y\n"));
        let back = Dataset::read_csv(text.as_bytes(), d.spec.clone()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.column("y").unwrap(), vec![2.0, 1e-300]);
        assert!(Dataset::read_csv("x\nfoo\n".as_bytes(), DatasetSpec::new(0)).is_err());
    }
}
