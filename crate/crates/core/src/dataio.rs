//! Dataset loading (IDX), PGM images, CSV tables and PSNR.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Map};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Value written to CSV in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Option<Vec<u8>>,
    pub source: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images `[start, start + count)`, clipped to the dataset.
    pub fn slice(&self, start: usize, count: usize) -> Dataset {
        let end = (start + count).min(self.len());
        let start = start.min(end);
        Dataset {
            images: self.images[start..end].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            source: format!("{}[{start}..{end}]", self.source),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Parse {
            offset: offset as u64,
            message: "truncated IDX header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX magic: expected {expected:#010x}, found {found:#010x}"),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let have = bytes.len() - header;
    if have < expected {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!("truncated IDX payload: expected {expected} bytes, found {have}"),
        });
    }
    if have > expected {
        return Err(Error::Parse {
            offset: (header + expected) as u64,
            message: format!("{} trailing bytes after IDX payload", have - expected),
        });
    }
    Ok(())
}

/// Parses an IDX image file, scaling pixels to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ImageTensor>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(n).map(|t| (p, t)))
        .ok_or(Error::Parse {
            offset: 4,
            message: "IDX dimensions overflow".into(),
        })?;
    check_payload(bytes, 16, size.1)?;
    Ok(bytes[16..]
        .chunks_exact(size.0.max(1))
        .take(n)
        .map(|px| {
            ImageTensor::from_gray(
                Map::from_shape_vec((rows, cols), px.iter().map(|&b| b as f64 / 255.0).collect()).unwrap(),
            )
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, n)?;
    Ok(bytes[8..].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path)?).map_err(|e| with_path(images_path, e))?;
    let labels = match labels_path {
        Some(p) => {
            let labels = parse_idx_labels(&read_file(p)?).map_err(|e| with_path(p, e))?;
            if labels.len() != images.len() {
                return Err(Error::Parse {
                    offset: 4,
                    message: format!(
                        "{}: {} labels for {} images",
                        p.display(),
                        labels.len(),
                        images.len()
                    ),
                });
            }
            Some(labels)
        }
        None => None,
    };
    Ok(Dataset {
        images,
        labels,
        source: images_path.display().to_string(),
    })
}

/// Writes single-channel images as IDX bytes (values quantized like PGM).
pub fn write_idx_images(path: &Path, images: &[ImageTensor]) -> Result<()> {
    let (h, w) = images.first().map(|x| (x.height(), x.width())).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, h as u32, w as u32] {
        out.extend(v.to_be_bytes());
    }
    for img in images {
        if img.channels() != 1 || img.height() != h || img.width() != w {
            return Err(Error::shape("IDX images must be single-channel and equally sized"));
        }
        let plane = img.channel(0);
        out.extend(plane.iter().map(|v| quantize(*v)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `10 log10(1 / MSE)` for `[0, 1]` data; infinite for identical images.
pub fn psnr(reference: &ImageTensor, estimate: &ImageTensor) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::shape(format!(
            "PSNR of {:?} against {:?}",
            reference.shape(),
            estimate.shape()
        )));
    }
    let n = reference.len();
    if n == 0 {
        return Err(Error::shape("PSNR of empty images"));
    }
    let sse: f64 = reference
        .as_slice()
        .iter()
        .zip(estimate.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (n as f64 / sse).log10())
}

pub fn csv_psnr(p: f64) -> f64 {
    p.min(PSNR_CAP)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary greyscale PGM (P5, maxval 255).
pub fn save_image_pgm(img: &ImageTensor, path: &Path) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::shape(format!(
            "PGM needs a single-channel image, got {} channels",
            img.channels()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.channel(0).iter().map(|v| quantize(*v)));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_image_pgm(path: &Path) -> Result<ImageTensor> {
    let bytes = read_file(path)?;
    parse_pgm(&bytes).map_err(|e| with_path(path, e))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                offset: pos as u64,
                message: "truncated PGM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected PGM magic P5, found {:?}", fields[0].1),
        });
    }
    let mut nums = [0usize; 3];
    for (i, (off, s)) in fields[1..].iter().enumerate() {
        nums[i] = s.parse().map_err(|_| Error::Parse {
            offset: *off as u64,
            message: format!("bad PGM header field {s:?}"),
        })?;
    }
    let [w, h, maxval] = nums;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            offset: fields[3].0 as u64,
            message: format!("unsupported PGM maxval {maxval}"),
        });
    }
    pos += 1;
    let need = w.checked_mul(h).unwrap_or(usize::MAX);
    if bytes.len().saturating_sub(pos) < need {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: "truncated PGM raster".into(),
        });
    }
    let px = bytes[pos..pos + need].iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(ImageTensor::from_gray(Map::from_shape_vec((h, w), px).unwrap()))
}

/// Header plus one record per row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Locates `images-idx3-ubyte`/`labels-idx1-ubyte` under a directory.
pub fn idx_pair(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"))
}
