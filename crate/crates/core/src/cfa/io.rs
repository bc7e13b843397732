//! Dictionary binary format and trace CSV.
//!
//! Dictionary layout (little-endian): `CFAD1`, version u8, layer u8, K u32,
//! h u32, w u32, C u32, then `K*h*w*C` f64 values, atom-major and row-major
//! over `(h, w, C)`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;

use super::TraceRow;
use crate::error::{Error, Result};
use crate::tensor::ConvDictionary;

pub const DICTIONARY_MAGIC: &[u8; 5] = b"CFAD1";
const VERSION: u8 = 1;
const HEADER_LEN: u64 = 5 + 1 + 1 + 16;

pub fn write_dictionary<W: Write>(w: &mut W, dict: &ConvDictionary) -> std::io::Result<()> {
    let (h, wd) = dict.kernel_shape();
    let c = dict.channels();
    w.write_all(DICTIONARY_MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u8(dict.layer())?;
    w.write_u32::<LittleEndian>(dict.len() as u32)?;
    w.write_u32::<LittleEndian>(h as u32)?;
    w.write_u32::<LittleEndian>(wd as u32)?;
    w.write_u32::<LittleEndian>(c as u32)?;
    for atom in dict.atoms() {
        for r in 0..h {
            for col in 0..wd {
                for ch in 0..c {
                    w.write_f64::<LittleEndian>(atom[[ch, r, col]])?;
                }
            }
        }
    }
    Ok(())
}

/// Reads one dictionary record; `base` is its offset within the file.
pub fn read_dictionary<R: Read>(r: &mut R, base: u64) -> Result<ConvDictionary> {
    let trunc = |offset: u64| {
        move |_e: std::io::Error| Error::Parse {
            offset: base + offset,
            message: "truncated dictionary record".into(),
        }
    };
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(trunc(0))?;
    if &magic != DICTIONARY_MAGIC {
        return Err(Error::Parse {
            offset: base,
            message: format!(
                "expected dictionary magic \"CFAD1\", found {:?}",
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    let version = r.read_u8().map_err(trunc(5))?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: base + 5,
            message: format!("unsupported dictionary version {version}"),
        });
    }
    let layer = r.read_u8().map_err(trunc(6))?;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.read_u32::<LittleEndian>().map_err(trunc(7 + 4 * i as u64))? as usize;
    }
    let [k, h, w, c] = dims;
    if k == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Parse {
            offset: base + 7,
            message: format!("degenerate dictionary dimensions K={k} h={h} w={w} C={c}"),
        });
    }
    let per_atom = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .filter(|v| *v <= 1 << 28)
        .ok_or(Error::Parse {
            offset: base + 7,
            message: "dictionary atom too large".into(),
        })?;
    let mut atoms = Vec::with_capacity(k.min(1 << 16));
    let mut offset = HEADER_LEN;
    for _ in 0..k {
        let mut atom = Array3::zeros((c, h, w));
        for idx in 0..per_atom {
            let v = r.read_f64::<LittleEndian>().map_err(trunc(offset))?;
            let (row, rest) = (idx / (w * c), idx % (w * c));
            atom[[rest % c, row, rest / c]] = v;
            offset += 8;
        }
        atoms.push(atom);
    }
    ConvDictionary::new(atoms, layer)
}

/// `iter,objective,recon_err,primal_residual,eta`
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "objective", "recon_err", "primal_residual", "eta"])?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.objective.to_string(),
            r.recon_err.to_string(),
            r.primal_residual.to_string(),
            r.eta.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = ConvDictionary::random(3, (2, 4), 3, 2, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_dictionary(&mut buf, &d).unwrap();
        assert_eq!(buf.len() as u64, HEADER_LEN + 3 * 2 * 4 * 3 * 8);
        let back = read_dictionary(&mut buf.as_slice(), 0).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn layout_is_row_major_channel_last() {
        let atom = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let d = ConvDictionary::new(vec![atom], 1).unwrap();
        let mut buf = Vec::new();
        write_dictionary(&mut buf, &d).unwrap();
        let vals: Vec<f64> = buf[HEADER_LEN as usize..]
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        // (row 0, col 0, ch 0), (row 0, col 0, ch 1), (row 0, col 1, ch 0), ...
        assert_eq!(vals, vec![1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = ConvDictionary::random(1, (2, 2), 1, 1, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_dictionary(&mut buf, &d).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_dictionary(&mut &cut[..], 0), Err(Error::Parse { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dictionary(&mut bad.as_slice(), 0), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn trace_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trace_csv(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "iter,objective,recon_err,primal_residual,eta\n");
    }
}
