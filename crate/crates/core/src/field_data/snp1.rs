//! SNP1 container.
//!
//! ```text
//! "SNP1" | u32 n_rows | u32 n_cols | u32 n_fields
//! per field: u16 name_len, name (UTF-8), u32 components, u32 points,
//!            components × (f64 scale_offset, f64 scale_factor)
//! f64 t0 | f64 dt | n_rows × n_cols f64, column-major
//! ```
//! Everything little-endian.

use nalgebra::DMatrix;

use super::{FieldLayout, FieldSpec, SnapshotMatrix};
use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"SNP1";

pub fn write_snp1(data: &SnapshotMatrix) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.magic(MAGIC);
    w.u32(to_u32(data.n_state(), "n_rows")?);
    w.u32(to_u32(data.n_times(), "n_cols")?);
    let fields = data.layout().fields();
    w.u32(to_u32(fields.len(), "n_fields")?);
    for f in fields {
        let name = f.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("field name '{}' too long", f.name)))?;
        w.u16(len);
        w.bytes(name);
        w.u32(to_u32(f.components, "components")?);
        w.u32(to_u32(f.points, "points")?);
        for (o, s) in f.scale_offset.iter().zip(&f.scale_factor) {
            w.f64(*o);
            w.f64(*s);
        }
    }
    w.f64(data.t0());
    w.f64(data.dt());
    w.matrix(data.values());
    Ok(w.finish())
}

pub fn read_snp1(bytes: &[u8]) -> Result<SnapshotMatrix> {
    let mut r = Reader::new("SNP1", bytes);
    r.expect_magic(MAGIC)?;
    let n_rows = r.u32()? as usize;
    let n_cols = r.u32()? as usize;
    let n_fields = r.u32()? as usize;
    let mut fields = Vec::with_capacity(n_fields.min(1024));
    for _ in 0..n_fields {
        let name = r.string()?;
        let components = r.u32()? as usize;
        let points = r.u32()? as usize;
        let mut spec = FieldSpec::new(name, components, points);
        for c in 0..components {
            spec.scale_offset[c] = r.f64()?;
            spec.scale_factor[c] = r.f64()?;
        }
        fields.push(spec);
    }
    let t0 = r.f64()?;
    let dt = r.f64()?;
    let payload = n_rows
        .checked_mul(n_cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("SNP1 payload size overflows".into()))?;
    let expected = r.position() + payload;
    if expected != r.len() {
        return Err(Error::Format(format!(
            "SNP1 file length mismatch: expected {expected} bytes, found {}",
            r.len()
        )));
    }
    let values: DMatrix<f64> = r.matrix(n_rows, n_cols)?;
    r.finish()?;
    let layout = FieldLayout::new(fields)?;
    if layout.n_state() != n_rows {
        return Err(Error::Format(format!(
            "SNP1 header declares {n_rows} rows but fields sum to {}",
            layout.n_state()
        )));
    }
    SnapshotMatrix::with_spacing(layout, t0, dt, values)
}
