use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Single-channel byte images parsed from an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("truncated header at byte {at}"),
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("bad magic 0x{magic:08x}, expected 0x{want:08x}"),
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("truncated payload: {} of {want} bytes", payload.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..want].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("truncated payload: {} of {count} labels", payload.len()),
        });
    }
    let labels = payload[..count].to_vec();
    if let Some(i) = labels.iter().position(|l| *l > 9) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("label {} at index {i} outside [0, 9]", labels[i]),
        });
    }
    Ok(labels)
}

/// Reads an IDX image file and its label file (raw or gzip).
pub fn load_idx(images: &Path, labels: &Path) -> Result<(IdxImages, Vec<u8>)> {
    let imgs = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let labs = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if imgs.count != labs.len() {
        return Err(Error::Data(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            imgs.count,
            labels.display(),
            labs.len()
        )));
    }
    Ok((imgs, labs))
}
