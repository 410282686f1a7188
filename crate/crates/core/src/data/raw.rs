use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{cifar, idx, shapes};
use crate::diffusion::Shape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    Cifar10,
    Cifar100,
    /// Procedurally drawn squares, circles and triangles; needs no files.
    Shapes,
}

impl DatasetKind {
    /// Sub-directory of the data root holding this dataset's files.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
            DatasetKind::Shapes => "shapes",
        }
    }

    /// Image shape as stored, before any padding.
    pub fn image_shape(self) -> Shape {
        match self {
            DatasetKind::Mnist | DatasetKind::Fmnist => Shape::new(1, 28, 28),
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => Shape::new(3, 32, 32),
            DatasetKind::Shapes => Shape::new(1, super::shapes::SHAPE_SIZE, super::shapes::SHAPE_SIZE),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "MNIST",
            DatasetKind::Fmnist => "FMNIST",
            DatasetKind::Cifar10 => "CIFAR-10",
            DatasetKind::Cifar100 => "CIFAR-100",
            DatasetKind::Shapes => "SHAPES",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Where to find one split of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub split: Split,
}

impl RawDatasetSpec {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            kind,
            root: root.into(),
            split,
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(self.kind.dir_name())
    }
}

/// Byte images with their labels, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub kind: DatasetKind,
    pub split: Split,
    pub shape: Shape,
    /// Image-major CHW bytes.
    pub pixels: Vec<u8>,
    pub fine: Vec<u8>,
    /// CIFAR-100 superclass labels.
    pub coarse: Option<Vec<u8>>,
}

impl RawDataset {
    pub fn empty(kind: DatasetKind, split: Split, shape: Shape) -> Self {
        Self {
            kind,
            split,
            shape,
            pixels: Vec::new(),
            fine: Vec::new(),
            coarse: None,
        }
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn image_bytes(&self, index: usize) -> &[u8] {
        let n = self.shape.len();
        &self.pixels[index * n..(index + 1) * n]
    }
}

fn idx_file(dir: &Path, stem: &str) -> PathBuf {
    let raw = dir.join(stem);
    if raw.exists() {
        raw
    } else {
        dir.join(format!("{stem}.gz"))
    }
}

/// Loads one split of any supported dataset.
pub fn load_raw(spec: &RawDatasetSpec) -> Result<RawDataset> {
    match spec.kind {
        DatasetKind::Mnist | DatasetKind::Fmnist => {
            let dir = spec.dir();
            if !dir.is_dir() {
                return Err(Error::Data(format!("dataset directory {} not found", dir.display())));
            }
            let prefix = match spec.split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let (images, labels) = idx::load_idx(
                &idx_file(&dir, &format!("{prefix}-images-idx3-ubyte")),
                &idx_file(&dir, &format!("{prefix}-labels-idx1-ubyte")),
            )?;
            Ok(RawDataset {
                kind: spec.kind,
                split: spec.split,
                shape: Shape::new(1, images.rows, images.cols),
                pixels: images.pixels,
                fine: labels,
                coarse: None,
            })
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let dir = spec.dir();
            if !dir.is_dir() {
                return Err(Error::Data(format!("dataset directory {} not found", dir.display())));
            }
            cifar::load_cifar(spec)
        }
        DatasetKind::Shapes => Ok(shapes::shapes_dataset(spec.split)),
    }
}

/// A file the loader expects, with the MD5 of the published archive it comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedFile {
    pub path: &'static str,
    pub archive: &'static str,
    pub archive_md5: &'static str,
}

/// Files expected under `<root>/<dir_name>` for `kind`.
pub fn expected_files(kind: DatasetKind) -> Vec<ExpectedFile> {
    let f = |path, archive, archive_md5| ExpectedFile {
        path,
        archive,
        archive_md5,
    };
    match kind {
        DatasetKind::Mnist => vec![
            f("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
            f("train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
            f("t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
            f("t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
        ],
        DatasetKind::Fmnist => vec![
            f("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
            f("train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe"),
            f("t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79"),
            f("t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310"),
        ],
        DatasetKind::Cifar10 => {
            let a = "cifar-10-binary.tar.gz";
            let md5 = "c32a1d4ab5d03f1284b67883e8d87530";
            vec![
                f("data_batch_1.bin", a, md5),
                f("data_batch_2.bin", a, md5),
                f("data_batch_3.bin", a, md5),
                f("data_batch_4.bin", a, md5),
                f("data_batch_5.bin", a, md5),
                f("test_batch.bin", a, md5),
            ]
        }
        DatasetKind::Cifar100 => {
            let a = "cifar-100-binary.tar.gz";
            let md5 = "03b5dce01913d631647c71ecec9e9cb8";
            vec![f("train.bin", a, md5), f("test.bin", a, md5)]
        }
        DatasetKind::Shapes => Vec::new(),
    }
}
