//! CSV form of a snapshot matrix: header `t,<field.component.point>...`,
//! one row per time step, values in raw (unscaled) units.

use nalgebra::DMatrix;

use super::{FieldLayout, FieldSpec, SnapshotMatrix};
use crate::error::{Error, Result};

pub fn write_csv(data: &SnapshotMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend(data.layout().row_labels());
    w.write_record(&header).map_err(csv_err)?;
    let raw = data.raw_values();
    for (k, col) in raw.column_iter().enumerate() {
        let mut rec = Vec::with_capacity(raw.nrows() + 1);
        rec.push(data.time(k).to_string());
        rec.extend(col.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Parsed CSV: times and raw values, one column per time step.
#[derive(Debug, Clone)]
pub struct CsvSnapshots {
    pub layout: FieldLayout,
    pub times: Vec<f64>,
    pub raw: DMatrix<f64>,
}

impl CsvSnapshots {
    /// Scales the raw values with the layout's scaling.
    pub fn into_snapshots(self) -> Result<SnapshotMatrix> {
        let scaled = self.layout.scale(&self.raw);
        SnapshotMatrix::new(self.layout, &self.times, scaled)
    }

    pub fn scaled(&self) -> DMatrix<f64> {
        self.layout.scale(&self.raw)
    }
}

/// Reads a snapshot CSV. With `layout` given the header must match it column
/// for column; without, the layout is inferred from the header with identity
/// scaling.
pub fn read_csv(text: &str, layout: Option<&FieldLayout>) -> Result<CsvSnapshots> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::Format(format!(
            "CSV schema mismatch in column 0: expected 't', found '{}'",
            header.first().cloned().unwrap_or_default()
        )));
    }
    let layout = match layout {
        Some(l) => {
            let labels = l.row_labels();
            for (i, label) in labels.iter().enumerate() {
                match header.get(i + 1) {
                    Some(h) if h == label => {}
                    Some(h) => {
                        return Err(Error::Format(format!(
                            "CSV schema mismatch in column {}: expected '{label}', found '{h}'",
                            i + 1
                        )))
                    }
                    None => {
                        return Err(Error::Format(format!(
                            "CSV schema mismatch: missing column {} '{label}'",
                            i + 1
                        )))
                    }
                }
            }
            if header.len() > labels.len() + 1 {
                return Err(Error::Format(format!(
                    "CSV schema mismatch in column {}: unexpected extra column '{}'",
                    labels.len() + 1,
                    header[labels.len() + 1]
                )));
            }
            l.clone()
        }
        None => infer_layout(&header[1..])?,
    };
    let n_state = layout.n_state();
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != n_state + 1 {
            return Err(Error::Format(format!(
                "CSV row {} has {} fields, expected {}",
                line + 1,
                rec.len(),
                n_state + 1
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "CSV row {} column '{}': cannot parse '{field}'",
                    line + 1,
                    header[j]
                ))
            })?;
            if j == 0 {
                times.push(v);
            } else {
                flat.push(v);
            }
        }
    }
    let raw = DMatrix::from_vec(n_state, times.len(), flat);
    Ok(CsvSnapshots { layout, times, raw })
}

fn infer_layout(labels: &[String]) -> Result<FieldLayout> {
    // (name, max component, max point) in first-seen order
    let mut fields: Vec<(String, usize, usize)> = Vec::new();
    let parsed: Vec<(String, usize, usize)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| parse_label(l).ok_or_else(|| {
            Error::Format(format!("CSV schema mismatch in column {}: malformed label '{l}'", i + 1))
        }))
        .collect::<Result<_>>()?;
    for (name, c, p) in &parsed {
        match fields.iter_mut().find(|f| &f.0 == name) {
            Some(f) => {
                f.1 = f.1.max(*c);
                f.2 = f.2.max(*p);
            }
            None => fields.push((name.clone(), *c, *p)),
        }
    }
    let layout = FieldLayout::new(
        fields
            .into_iter()
            .map(|(n, c, p)| FieldSpec::new(n, c + 1, p + 1))
            .collect(),
    )?;
    for (i, (expected, found)) in layout.row_labels().iter().zip(labels).enumerate() {
        if expected != found {
            return Err(Error::Format(format!(
                "CSV schema mismatch in column {}: expected '{expected}', found '{found}'",
                i + 1
            )));
        }
    }
    if layout.n_state() != labels.len() {
        return Err(Error::Format("CSV header does not describe a complete layout".into()));
    }
    Ok(layout)
}

fn parse_label(label: &str) -> Option<(String, usize, usize)> {
    let mut parts = label.rsplitn(3, '.');
    let point = parts.next()?.parse().ok()?;
    let comp = parts.next()?.parse().ok()?;
    let name = parts.next()?;
    (!name.is_empty()).then(|| (name.to_string(), comp, point))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SnapshotMatrix {
        let mut p = FieldSpec::new("p", 1, 2);
        p.scale_offset = vec![100.0];
        p.scale_factor = vec![3.0];
        let layout = FieldLayout::new(vec![p, FieldSpec::new("U", 3, 2)]).unwrap();
        let values = DMatrix::from_fn(8, 3, |i, j| 0.1 * i as f64 - 0.7 * j as f64);
        SnapshotMatrix::with_spacing(layout, 0.0, 0.5, values).unwrap()
    }

    #[test]
    fn header_format() {
        let text = write_csv(&sample()).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, "t,p.0.0,p.0.1,U.0.0,U.0.1,U.1.0,U.1.1,U.2.0,U.2.1");
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn round_trip_with_layout() {
        let s = sample();
        let text = write_csv(&s).unwrap();
        let back = read_csv(&text, Some(s.layout())).unwrap().into_snapshots().unwrap();
        assert!((back.values() - s.values()).abs().max() < 1e-12);
        assert_eq!(back.dt(), 0.5);
    }

    #[test]
    fn inferred_layout() {
        let text = write_csv(&sample()).unwrap();
        let back = read_csv(&text, None).unwrap();
        assert_eq!(back.layout.fields()[1].components, 3);
        assert_eq!(back.layout.n_state(), 8);
    }

    #[test]
    fn schema_mismatch_names_column() {
        let s = sample();
        let text = write_csv(&s).unwrap().replacen("U.1.0", "U.1.9", 1);
        let msg = read_csv(&text, Some(s.layout())).unwrap_err().to_string();
        assert!(msg.contains("column 5") && msg.contains("U.1.0") && msg.contains("U.1.9"), "{msg}");
    }
}
