//! Versioned CSV output: a `#schema=<name>.v<N>` line, then a header row.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub struct CsvOut {
    inner: csv::Writer<File>,
    columns: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

impl CsvOut {
    pub fn create(path: &Path, schema: &str, header: &[&str]) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "#schema={schema}")?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(header).map_err(csv_err)?;
        Ok(Self { inner, columns: header.len() })
    }

    /// Reopens an existing file for appending rows; the schema line and
    /// header must match.
    pub fn append(path: &Path, schema: &str, header: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let ok = lines.next() == Some(&format!("#schema={schema}")) && lines.next() == Some(&header.join(","));
        if !ok {
            return Err(Error::Format(format!("{} does not carry schema {schema}", path.display())));
        }
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        let inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(Self { inner, columns: header.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.columns);
        self.inner.write_record(fields).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
