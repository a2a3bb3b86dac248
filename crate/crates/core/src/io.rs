//! On-disk formats.
//!
//! **Point CSV.** Comma separated, header row, LF line endings, one row per
//! atom. Feature columns come first (`x0,x1,...`); an optional trailing
//! `label` column holds integer class ids. Floats are written in Rust's
//! shortest round-trip form, so a save/load cycle is bit-exact.
//!
//! **SSOTMAT1.** A binary float64 matrix record: the 8 ASCII bytes
//! `SSOTMAT1`, then `rows` and `cols` as little-endian `u64`, then
//! `rows * cols` little-endian `f64` values in column-major order. A file may
//! hold several records back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, ShapeBuilder};

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"SSOTMAT1";

/// Feature rows with optional integer labels, as stored in a point CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTable {
    pub points: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

pub fn write_points_csv(
    path: impl AsRef<Path>,
    points: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(l) = labels {
        if l.len() != points.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} rows",
                l.len(),
                points.nrows()
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());

    let mut header: Vec<String> = (0..points.ncols()).map(|k| format!("x{k}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut record = Vec::with_capacity(header.len());
    for (i, row) in points.outer_iter().enumerate() {
        record.clear();
        record.extend(row.iter().map(|v| v.to_string()));
        if let Some(l) = labels {
            record.push(l[i].to_string());
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<PointTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());

    let header = r.headers().map_err(csv_err)?.clone();
    let has_label = header.iter().next_back().is_some_and(|h| h.trim() == "label");
    let d = header.len() - usize::from(has_label);
    if d == 0 {
        return Err(Error::format(path, "no feature columns"));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for (k, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(path, format!("row {}: bad number {field:?} in column {k}", line + 1))
            })?;
            values.push(v);
        }
        if has_label {
            let field = &rec[d];
            let y: usize = field.trim().parse().map_err(|_| {
                Error::format(path, format!("row {}: bad label {field:?}", line + 1))
            })?;
            labels.push(y);
        }
    }
    let n = values.len() / d;
    if n == 0 {
        return Err(Error::format(path, "no data rows"));
    }
    let points = Array2::from_shape_vec((n, d), values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(PointTable {
        points,
        labels: has_label.then_some(labels),
    })
}

pub fn write_matrix<W: Write>(w: &mut W, m: ArrayView2<'_, f64>) -> std::io::Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    // `t()` iterates the transpose in row-major order, i.e. `m` column-major
    for v in m.t().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_matrix<R: Read>(r: &mut R) -> std::io::Result<Option<Array2<f64>>> {
    use std::io::{Error as IoError, ErrorKind};

    let mut magic = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        match r.read(&mut magic[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(IoError::new(ErrorKind::UnexpectedEof, "truncated header")),
            k => got += k,
        }
    }
    if &magic != MATRIX_MAGIC {
        return Err(IoError::new(ErrorKind::InvalidData, "bad magic, expected SSOTMAT1"));
    }
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let rows = u64::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf)?;
    let cols = u64::from_le_bytes(buf) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| IoError::new(ErrorKind::InvalidData, "matrix size overflow"))?;
    let mut data = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let m = Array2::from_shape_vec((rows, cols).f(), data)
        .map_err(|e| IoError::new(ErrorKind::InvalidData, e.to_string()))?;
    Ok(Some(m))
}

pub fn save_matrices(path: impl AsRef<Path>, mats: &[ArrayView2<'_, f64>]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for m in mats {
        write_matrix(&mut w, *m).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_matrices(path: impl AsRef<Path>) -> Result<Vec<Array2<f64>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(m) = read_matrix(&mut r).map_err(|e| Error::io(path, e))? {
        out.push(m);
    }
    Ok(out)
}
