//! CSV and binary event files plus their JSON sidecars.
//!
//! Binary layout: the 8-byte magic `RCEVT001`, then `d` and `N` as
//! little-endian u64, then `N·d` little-endian f64 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EventTable, FeatureKind, FeatureSchema, FeatureSpec, Provenance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::util::fmt_g17;

pub const BINARY_MAGIC: &[u8; 8] = b"RCEVT001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// `.csv` files are CSV, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

/// Sidecar contents written next to every event file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub schema: FeatureSchema,
    pub provenance: Provenance,
    pub seed: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_events(table: &EventTable, path: &Path, format: EventFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = table.n_features();
    let n = table.n_events();
    let data = table.values().data();
    let res: std::io::Result<()> = (|| {
        match format {
            EventFormat::Csv => {
                writeln!(w, "{}", table.schema().names().join(","))?;
                for row in data.chunks(d.max(1)).take(n) {
                    let line: Vec<String> = row.iter().map(|&v| fmt_g17(v)).collect();
                    writeln!(w, "{}", line.join(","))?;
                }
            }
            EventFormat::Binary => {
                w.write_all(BINARY_MAGIC)?;
                w.write_all(&(d as u64).to_le_bytes())?;
                w.write_all(&(n as u64).to_le_bytes())?;
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))?;

    let meta = Metadata {
        schema: table.schema().clone(),
        provenance: table.provenance(),
        seed: table.seed(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

/// Reads an event file. The schema comes from `schema` when given, otherwise
/// from the sidecar; a CSV without either gets kind `other` for every column.
pub fn read_events(
    path: &Path,
    format: EventFormat,
    schema: Option<&FeatureSchema>,
) -> Result<EventTable> {
    let meta = read_metadata(path).ok();
    let (provenance, seed) = meta
        .as_ref()
        .map_or((Provenance::Source, 0), |m| (m.provenance, m.seed));
    let schema = schema.cloned().or_else(|| meta.map(|m| m.schema));
    match format {
        EventFormat::Csv => read_csv(path, schema, provenance, seed),
        EventFormat::Binary => {
            let schema = schema.ok_or_else(|| {
                Error::Schema(format!(
                    "{}: binary file needs a schema or sidecar",
                    path.display()
                ))
            })?;
            read_binary(path, schema, provenance, seed)
        }
    }
}

fn read_csv(
    path: &Path,
    schema: Option<FeatureSchema>,
    provenance: Provenance,
    seed: u64,
) -> Result<EventTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let header: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => return Err(Error::Format(format!("{}: {e}", path.display()))),
    };
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let schema = match schema {
        Some(s) => s,
        None => FeatureSchema::new(
            header
                .iter()
                .map(|h| FeatureSpec::new(h.clone(), FeatureKind::Other))
                .collect(),
        )?,
    };
    let columns: Vec<usize> = schema
        .names()
        .iter()
        .map(|name| {
            header.iter().position(|h| h == name).ok_or_else(|| {
                Error::Schema(format!("{}: missing column `{name}`", path.display()))
            })
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::new();
    let mut n = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: r + 1,
            column: 0,
            message: e.to_string(),
        })?;
        for &c in &columns {
            let cell = rec.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: c,
                message: format!("not a number: `{cell}`"),
            })?;
            data.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    EventTable::new(
        schema.clone(),
        Tensor::new(n, schema.len(), data)?,
        provenance,
        seed,
    )
}

fn read_binary(
    path: &Path,
    schema: FeatureSchema,
    provenance: Provenance,
    seed: u64,
) -> Result<EventTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 24];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &head[..8] != BINARY_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let d = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let n = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes")) as usize;
    if d != schema.len() {
        return Err(Error::Schema(format!(
            "{}: file has {d} features, schema has {}",
            path.display(),
            schema.len()
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != n * d * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            n * d * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    EventTable::new(schema, Tensor::new(n, d, data)?, provenance, seed)
}
