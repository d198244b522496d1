use std::path::Path;

use ndarray::Array2;

use crate::error::{HgotError, Result};

/// Writes `id,z0,…,z{d-1}` followed by one row per node in index order.
pub fn export_embeddings(z: &Array2<f64>, ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != z.nrows() {
        return Err(HgotError::Input(format!("{} ids for {} embeddings", ids.len(), z.nrows())));
    }
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => HgotError::io(path, io),
        other => HgotError::Numerical(format!("csv write failed: {other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..z.ncols()).map(|j| format!("z{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, row) in ids.iter().zip(z.rows()) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HgotError::io(path, e))
}

/// Reads a file written by [`export_embeddings`].
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Vec<String>, Array2<f64>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => HgotError::io(path, io),
        other => HgotError::data(path, 1, format!("{other:?}")),
    })?;
    let d = r
        .headers()
        .map_err(|e| HgotError::data(path, 1, e.to_string()))?
        .len()
        .saturating_sub(1);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (k, record) in r.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| HgotError::data(path, line, e.to_string()))?;
        let mut cells = record.iter();
        ids.push(cells.next().unwrap_or_default().to_string());
        for cell in cells {
            data.push(
                cell.parse::<f64>()
                    .map_err(|e| HgotError::data(path, line, format!("bad value {cell:?}: {e}")))?,
            );
        }
    }
    let z = Array2::from_shape_vec((ids.len(), d), data)
        .map_err(|_| HgotError::data(path, 1, "ragged embedding rows"))?;
    Ok((ids, z))
}
