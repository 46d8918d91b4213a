//! CSV ingestion and emission, atomic file output and the two-proportion
//! gap preprocessing.
//!
//! Every reader reports failures with the 1-based line number of the
//! offending record (the header is line 1). Floats are written as the
//! shortest decimal that parses back to the identical `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sample::{validate_sample, HeteroSample};
use crate::sure::{csv_err, fmt_f64};

/// A CSV file held as a header plus raw string cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Source line of each row.
    pub lines: Vec<usize>,
}

impl CsvTable {
    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| parse_err(1, e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if headers.iter().all(String::is_empty) {
            return Err(Error::Parse {
                line: 1,
                what: "missing header row".into(),
            });
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                parse_err(line, e)
            })?;
            lines.push(rec.position().map(|p| p.line() as usize).unwrap_or(0));
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(CsvTable { headers, rows, lines })
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read(file)
    }

    /// Index of the first header among `names`.
    pub fn find(&self, names: &[&str]) -> Option<usize> {
        self.headers.iter().position(|h| names.contains(&h.as_str()))
    }

    pub fn require(&self, names: &[&str]) -> Result<usize> {
        self.find(names).ok_or_else(|| Error::Parse {
            line: 1,
            what: format!("missing column {}", names.join(" or ")),
        })
    }

    pub fn column_str(&self, col: usize) -> Vec<String> {
        self.rows.iter().map(|r| r[col].clone()).collect()
    }

    pub fn column_f64(&self, col: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(r, &line)| parse_f64(&r[col], &self.headers[col], line))
            .collect()
    }

    pub fn column_u64(&self, col: usize) -> Result<Vec<u64>> {
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(r, &line)| {
                r[col].trim().parse::<u64>().map_err(|_| Error::Parse {
                    line,
                    what: format!("column {}: {:?} is not a non-negative integer", self.headers[col], r[col]),
                })
            })
            .collect()
    }
}

fn parse_err(line: usize, e: csv::Error) -> Error {
    Error::Parse {
        line,
        what: e.to_string(),
    }
}

fn parse_f64(cell: &str, column: &str, line: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        what: format!("column {column}: {cell:?} is not a number"),
    })
}

/// A validated sample together with its row identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub sample: HeteroSample,
}

impl Dataset {
    /// Reads columns `id`, `x` and `sigma` (or `s`), plus `mu_true` when
    /// present. A missing `id` column numbers rows from 1.
    pub fn read<R: Read>(input: R) -> Result<Self> {
        Self::from_table(&CsvTable::read(input)?)
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        Self::from_table(&CsvTable::read_path(path)?)
    }

    pub fn from_table(t: &CsvTable) -> Result<Self> {
        let x = t.column_f64(t.require(&["x"])?)?;
        let sigma = t.column_f64(t.require(&["sigma", "s"])?)?;
        let mu = t.find(&["mu_true"]).map(|c| t.column_f64(c)).transpose()?;
        let ids = match t.find(&["id"]) {
            Some(c) => t.column_str(c),
            None => (1..=t.rows.len()).map(|i| i.to_string()).collect(),
        };
        let sample = validate_sample(&x, &sigma, mu.as_deref()).map_err(|e| at_line(e, &t.lines))?;
        Ok(Dataset { ids, sample })
    }

    /// Writes `id,x,sigma[,mu_true]` followed by one column per estimate.
    pub fn write_with<W: Write>(&self, estimates: &[(String, Vec<f64>)], out: W) -> Result<()> {
        let n = self.sample.len();
        if let Some((name, _)) = estimates.iter().find(|(_, v)| v.len() != n) {
            return Err(Error::LengthMismatch {
                what: format!("column {name} does not have {n} rows"),
            });
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "x".into(), "sigma".into()];
        let mu = self.sample.mu_true();
        if mu.is_some() {
            header.push("mu_true".into());
        }
        header.extend(estimates.iter().map(|(name, _)| name.clone()));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..n {
            let mut rec = vec![self.ids[i].clone(), fmt_f64(self.sample.x()[i]), fmt_f64(self.sample.sigma()[i])];
            if let Some(mu) = mu {
                rec.push(fmt_f64(mu[i]));
            }
            rec.extend(estimates.iter().map(|(_, v)| fmt_f64(v[i])));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        self.write_with(&[], out)
    }
}

/// Rewrites a row index inside a validation error as a file line.
fn at_line(e: Error, lines: &[usize]) -> Error {
    let index = match &e {
        Error::NonPositiveSigma(i) | Error::NonFiniteValue(i) => Some(*i),
        _ => None,
    };
    match index.and_then(|i| lines.get(i)) {
        Some(&line) => Error::Parse {
            line,
            what: e.to_string(),
        },
        None => e,
    }
}

/// Writes a file by filling a temporary sibling and renaming it into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| Error::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Minimum testers per group for a school to be kept.
pub const MIN_TESTERS: u64 = 30;
/// Minimum passes and minimum failures per group.
pub const MIN_OUTCOME: u64 = 5;

/// Why a school was left out of the gap data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterReason {
    MinTesters,
    MinPass,
    MinFail,
}

impl FilterReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterReason::MinTesters => "min-testers",
            FilterReason::MinPass => "min-pass",
            FilterReason::MinFail => "min-fail",
        }
    }
}

/// Pass counts and group sizes for one school.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapCounts {
    pub pass_a: u64,
    pub n_a: u64,
    pub pass_d: u64,
    pub n_d: u64,
}

impl GapCounts {
    pub fn filter_reason(&self) -> Option<FilterReason> {
        let groups = [(self.pass_a, self.n_a), (self.pass_d, self.n_d)];
        if groups.iter().any(|&(_, n)| n < MIN_TESTERS) {
            Some(FilterReason::MinTesters)
        } else if groups.iter().any(|&(p, _)| p < MIN_OUTCOME) {
            Some(FilterReason::MinPass)
        } else if groups.iter().any(|&(p, n)| n - p < MIN_OUTCOME) {
            Some(FilterReason::MinFail)
        } else {
            None
        }
    }

    /// Gap `100 (p_A - p_D)` and its plug-in standard error, in percentage points.
    pub fn gap(&self) -> (f64, f64) {
        let pa = self.pass_a as f64 / self.n_a as f64;
        let pd = self.pass_d as f64 / self.n_d as f64;
        let var = pa * (1.0 - pa) / self.n_a as f64 + pd * (1.0 - pd) / self.n_d as f64;
        (100.0 * (pa - pd), 100.0 * var.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub id: String,
    pub x: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilteredRow {
    pub id: String,
    pub line: usize,
    pub reason: FilterReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GapData {
    pub kept: Vec<GapRow>,
    pub filtered: Vec<FilteredRow>,
}

/// Reads `id,pass_A,n_A,pass_D,n_D` and computes gaps for schools passing the
/// size filters.
pub fn prep_gap<R: Read>(input: R) -> Result<GapData> {
    let t = CsvTable::read(input)?;
    let ids = t.column_str(t.require(&["id"])?);
    let pass_a = t.column_u64(t.require(&["pass_A"])?)?;
    let n_a = t.column_u64(t.require(&["n_A"])?)?;
    let pass_d = t.column_u64(t.require(&["pass_D"])?)?;
    let n_d = t.column_u64(t.require(&["n_D"])?)?;
    let mut out = GapData::default();
    for (i, id) in ids.into_iter().enumerate() {
        let c = GapCounts {
            pass_a: pass_a[i],
            n_a: n_a[i],
            pass_d: pass_d[i],
            n_d: n_d[i],
        };
        let line = t.lines[i];
        for (group, p, n) in [("A", c.pass_a, c.n_a), ("D", c.pass_d, c.n_d)] {
            if p > n {
                return Err(Error::NonsensicalCounts {
                    line,
                    what: format!("pass_{group} = {p} exceeds n_{group} = {n}"),
                });
            }
        }
        match c.filter_reason() {
            Some(reason) => out.filtered.push(FilteredRow { id, line, reason }),
            None => {
                let (x, s) = c.gap();
                out.kept.push(GapRow { id, x, s });
            }
        }
    }
    Ok(out)
}

impl GapData {
    /// Kept rows as `id,x,s`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "x", "s"]).map_err(csv_err)?;
        for r in &self.kept {
            w.write_record([r.id.clone(), fmt_f64(r.x), fmt_f64(r.s)]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Filtered rows as `id,line,reason`.
    pub fn write_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "line", "reason"]).map_err(csv_err)?;
        for r in &self.filtered {
            w.write_record([r.id.clone(), r.line.to_string(), r.reason.as_str().to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
