//! Dataset ingestion, class-to-task partitioning and task-homogeneous batches.

mod batches;
mod cifar;
mod idx;
mod raw;
mod shapes;
mod tasks;

pub use batches::{batches, Batch, BatchStream};
pub use cifar::{load_cifar, parse_cifar_records};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use raw::{expected_files, load_raw, DatasetKind, ExpectedFile, RawDataset, RawDatasetSpec, Split};
pub use shapes::{shapes_dataset, SHAPE_CLASSES, SHAPE_SIZE};
pub use tasks::{
    denormalize, denormalize_image, normalize, normalize_image, partition_tasks, partition_with,
    PartitionSpec, TaskDataset, TaskRule,
};
