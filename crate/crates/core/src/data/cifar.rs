use std::fs;
use std::path::Path;

use super::raw::{DatasetKind, RawDataset, RawDatasetSpec, Split};
use crate::diffusion::Shape;
use crate::{Error, Result};

const PIXELS: usize = 32 * 32 * 3;

fn label_bytes(kind: DatasetKind) -> usize {
    match kind {
        DatasetKind::Cifar100 => 2,
        _ => 1,
    }
}

/// Parses concatenated CIFAR binary records.
///
/// CIFAR-10 records carry one label byte, CIFAR-100 records a coarse then a
/// fine label byte; both are followed by 1024 red, 1024 green and 1024 blue
/// bytes.
pub fn parse_cifar_records(
    bytes: &[u8],
    kind: DatasetKind,
    path: &Path,
    out: &mut RawDataset,
) -> Result<()> {
    let record = label_bytes(kind) + PIXELS;
    if bytes.len() % record != 0 {
        let offset = bytes.len() - bytes.len() % record;
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!(
                "length {} is not a multiple of the {record}-byte record; partial record at byte offset {offset}",
                bytes.len()
            ),
        });
    }
    for rec in bytes.chunks_exact(record) {
        match kind {
            DatasetKind::Cifar100 => {
                if rec[0] > 19 || rec[1] > 99 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        message: format!("labels ({}, {}) out of range", rec[0], rec[1]),
                    });
                }
                out.coarse.get_or_insert_with(Vec::new).push(rec[0]);
                out.fine.push(rec[1]);
            }
            _ => {
                if rec[0] > 9 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        message: format!("label {} out of range", rec[0]),
                    });
                }
                out.fine.push(rec[0]);
            }
        }
        out.pixels.extend_from_slice(&rec[label_bytes(kind)..]);
    }
    Ok(())
}

/// Loads a CIFAR-10 or CIFAR-100 split from its binary batch files.
pub fn load_cifar(spec: &RawDatasetSpec) -> Result<RawDataset> {
    let files: Vec<String> = match (spec.kind, spec.split) {
        (DatasetKind::Cifar10, Split::Train) => {
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
        }
        (DatasetKind::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
        (DatasetKind::Cifar100, Split::Train) => vec!["train.bin".into()],
        (DatasetKind::Cifar100, Split::Test) => vec!["test.bin".into()],
        (kind, _) => return Err(Error::Data(format!("{kind:?} is not a CIFAR dataset"))),
    };
    let dir = spec.dir();
    let mut out = RawDataset::empty(spec.kind, spec.split, Shape::new(3, 32, 32));
    if spec.kind == DatasetKind::Cifar100 {
        out.coarse = Some(Vec::new());
    }
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_cifar_records(&bytes, spec.kind, &path, &mut out)?;
    }
    Ok(out)
}
