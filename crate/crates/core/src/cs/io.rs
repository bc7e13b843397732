//! Measurement file: `CSMEAS1`, N u32, M u32, H u32, W u32, C u32, the
//! operator descriptor, then `N*M` f64 (little-endian throughout).

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::MeasurementSet;
use crate::dataio::csv_psnr;
use crate::error::{Error, Result};
use crate::sensing::OperatorDescriptor;

pub const MEASUREMENT_MAGIC: &[u8; 7] = b"CSMEAS1";
const HEADER_LEN: u64 = 7 + 20;

pub fn write_measurements<W: Write>(w: &mut W, m: &MeasurementSet) -> std::io::Result<()> {
    let (h, wd, c) = m.image_shape();
    w.write_all(MEASUREMENT_MAGIC)?;
    for v in [m.len(), m.operator().rows(), h, wd, c] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    m.operator().descriptor().write_to(w)?;
    for y in m.y() {
        for v in y {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_measurements<R: Read>(r: &mut R) -> Result<MeasurementSet> {
    let trunc = |offset: u64| {
        move |_e: std::io::Error| Error::Parse {
            offset,
            message: "truncated measurement file".into(),
        }
    };
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(trunc(0))?;
    if &magic != MEASUREMENT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!(
                "expected measurement magic \"CSMEAS1\", found {:?}",
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.read_u32::<LittleEndian>().map_err(trunc(7 + 4 * i as u64))? as usize;
    }
    let [n, m, h, w, c] = dims;
    let desc = OperatorDescriptor::read_from(r, HEADER_LEN)?;
    if desc.rows != m || desc.cols != h * w * c {
        return Err(Error::Parse {
            offset: HEADER_LEN,
            message: format!(
                "operator is {}x{} but header declares M={m} and {h}x{w}x{c} images",
                desc.rows, desc.cols
            ),
        });
    }
    let data_start = HEADER_LEN + OperatorDescriptor::ENCODED_LEN;
    let mut y = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let mut v = Vec::with_capacity(m);
        for j in 0..m {
            let off = data_start + 8 * (i * m + j) as u64;
            v.push(r.read_f64::<LittleEndian>().map_err(trunc(off))?);
        }
        y.push(v);
    }
    let op = desc.build()?;
    MeasurementSet::new(y, Arc::new(op), (h, w, c))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub index: usize,
    /// Present when ground truth was supplied.
    pub psnr: Option<f64>,
    pub rel_meas_err: f64,
    pub iters: usize,
}

/// `index,psnr,rel_meas_err,iters`; PSNR is capped for identical images.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "psnr", "rel_meas_err", "iters"])?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.psnr.map(|p| csv_psnr(p).to_string()).unwrap_or_default(),
            r.rel_meas_err.to_string(),
            r.iters.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
