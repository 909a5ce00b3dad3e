//! Dataset CSV: `series_id,timestamp,<channel>...,label`.
//!
//! An empty channel cell is a missing value; an empty label marks a row
//! that is not a prediction point. Rows are grouped by series (in order of
//! first appearance) and sorted by timestamp.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context};

use satt_core::data::{Series, SeriesDataset, SENTINEL};
use satt_core::Matrix;

struct Row {
    line: u64,
    timestamp: f64,
    values: Vec<Option<f64>>,
    label: Option<u8>,
}

pub fn read_dataset<R: Read>(reader: R) -> anyhow::Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().context("reading header")?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 4 || cols[0] != "series_id" || cols[1] != "timestamp" || cols[cols.len() - 1] != "label" {
        bail!("line 1: header must be `series_id,timestamp,<channels>...,label`");
    }
    let channels: Vec<String> = cols[2..cols.len() - 1].iter().map(|s| s.to_string()).collect();
    let c = channels.len();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| match e.position() {
            Some(p) => anyhow!("line {}: {e}", p.line()),
            None => anyhow!("{e}"),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != c + 3 {
            bail!("line {line}: expected {} fields, found {}", c + 3, rec.len());
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            bail!("line {line}: empty series_id");
        }
        let timestamp: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| anyhow!("line {line}: invalid timestamp `{}`", &rec[1]))?;
        if !timestamp.is_finite() {
            bail!("line {line}: timestamp must be finite");
        }
        let mut values = Vec::with_capacity(c);
        for j in 0..c {
            let cell = rec[2 + j].trim();
            values.push(if cell.is_empty() {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| anyhow!("line {line}: invalid value `{cell}` for channel `{}`", channels[j]))?;
                if !v.is_finite() {
                    bail!("line {line}: non-finite value for channel `{}`", channels[j]);
                }
                Some(v)
            });
        }
        let label = match rec[c + 2].trim() {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => bail!("line {line}: label must be 0, 1 or empty, found `{other}`"),
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row {
            line,
            timestamp,
            values,
            label,
        });
    }
    let mut series = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped");
        rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        for w in rows.windows(2) {
            if w[0].timestamp == w[1].timestamp {
                bail!(
                    "line {}: duplicate timestamp {} for series `{id}` (also on line {})",
                    w[1].line.max(w[0].line),
                    w[0].timestamp,
                    w[1].line.min(w[0].line)
                );
            }
        }
        let n = rows.len();
        let values = Matrix::from_fn(n, c, |i, j| rows[i].values[j].unwrap_or(SENTINEL));
        let mask = Matrix::from_fn(n, c, |i, j| if rows[i].values[j].is_some() { 1.0 } else { 0.0 });
        series.push(Series {
            id,
            timestamps: rows.iter().map(|r| r.timestamp).collect(),
            values,
            mask,
            labels: rows.iter().map(|r| r.label).collect(),
        });
    }
    let ds = SeriesDataset { channels, series };
    ds.validate()?;
    Ok(ds)
}

pub fn load_csv(path: &Path) -> anyhow::Result<SeriesDataset> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_dataset(std::io::BufReader::new(file)).with_context(|| format!("{}", path.display()))
}

pub fn write_dataset<W: Write>(ds: &SeriesDataset, writer: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "timestamp".to_string()];
    header.extend(ds.channels.iter().cloned());
    header.push("label".into());
    w.write_record(&header)?;
    let c = ds.channels.len();
    let mut rec: Vec<String> = Vec::with_capacity(c + 3);
    for s in &ds.series {
        for i in 0..s.len() {
            rec.clear();
            rec.push(s.id.clone());
            rec.push(s.timestamps[i].to_string());
            for j in 0..c {
                rec.push(if s.mask[(i, j)] != 0.0 {
                    s.values[(i, j)].to_string()
                } else {
                    String::new()
                });
            }
            rec.push(s.labels[i].map(|l| l.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(ds: &SeriesDataset, path: &Path) -> anyhow::Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    write_dataset(ds, std::io::BufWriter::new(file))
}
