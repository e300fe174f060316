//! CSV traces: one header row, numeric cells, empty cells for missing values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::stats::quantile;

fn io(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// Missing and non-finite values become empty cells.
pub fn cell(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => v.to_string(),
        _ => String::new(),
    }
}

pub struct CsvLog {
    path: PathBuf,
    // Only `None` while a comment is being written.
    w: Option<csv::Writer<BufWriter<File>>>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(header).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            w: Some(w),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn writer(&mut self) -> &mut csv::Writer<BufWriter<File>> {
        self.w.as_mut().expect("writer present outside comment")
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer().write_record(fields).map_err(io)
    }

    /// Appends `# text` after the rows written so far.
    pub fn comment(&mut self, text: &str) -> Result<()> {
        let Some(w) = self.w.take() else {
            return Ok(());
        };
        let mut inner = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        writeln!(inner, "# {text}")?;
        self.w = Some(csv::Writer::from_writer(inner));
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer().flush()?;
        Ok(())
    }

    /// Records a divergence before handing the error back.
    pub fn note_divergence<T>(&mut self, res: Result<T>) -> Result<T> {
        if let Err(Error::Divergence { step, reason }) = &res {
            self.comment(&format!("diverged at step {step}: {reason}"))?;
            self.writer().flush()?;
        }
        res
    }
}

/// Header and rows of a trace, skipping `#` comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(io)?;
    let header = r.headers().map_err(io)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(io)?;
    Ok((header, rows))
}

/// Per-row mean and quartiles across seed files sharing a header.
///
/// The first column is the row key and is copied from the first file; rows past the
/// shortest file are dropped. Each other column `c` becomes `c_mean`, `c_q25`, `c_q75`.
pub fn aggregate(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let Some(first) = inputs.first() else {
        return Err(Error::Config("nothing to aggregate".into()));
    };
    let (header, _) = read_csv(first)?;
    let mut tables = Vec::with_capacity(inputs.len());
    for p in inputs {
        let (h, rows) = read_csv(p)?;
        if h != header {
            return Err(Error::Config(format!("{} has a different header", p.display())));
        }
        tables.push(rows);
    }
    let n = tables.iter().map(Vec::len).min().unwrap_or(0);

    let mut cols = vec![header[0].clone()];
    for c in &header[1..] {
        cols.extend([format!("{c}_mean"), format!("{c}_q25"), format!("{c}_q75")]);
    }
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut log = CsvLog::create(out, &col_refs)?;
    for i in 0..n {
        let mut row = vec![tables[0][i][0].clone()];
        for j in 1..header.len() {
            let xs: Vec<f64> = tables
                .iter()
                .filter_map(|t| t[i].get(j).and_then(|v| v.parse::<f64>().ok()))
                .collect();
            if xs.is_empty() {
                row.extend([String::new(), String::new(), String::new()]);
            } else {
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                row.extend([
                    cell(Some(mean)),
                    cell(Some(quantile(&xs, 0.25))),
                    cell(Some(quantile(&xs, 0.75))),
                ]);
            }
        }
        log.row(&row)?;
    }
    log.finish()
}
