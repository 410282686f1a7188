//! Checkpoint directories: a JSON manifest plus one little-endian `f32` blob
//! per tensor under `shared/` and `task_<i>/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use srddpm_core::model::{Conditioning, ModelConfig, ModelParams, Tensor, Unet};
use srddpm_core::trainer::{Moments, OptimizerState};
use thiserror::Error;

use crate::config::ScheduleConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const SHARED: &str = "shared";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: unknown format version {found} (supported: {FORMAT_VERSION})", path.display())]
    UnknownVersion { path: PathBuf, found: u32 },

    #[error("missing blob for tensor `{tensor}` ({})", path.display())]
    MissingBlob { tensor: String, path: PathBuf },

    #[error("tensor `{tensor}`: shape {actual:?} does not match the model ({expected:?})")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor `{tensor}` is corrupt: {reason}")]
    CorruptBlob { tensor: String, reason: String },

    #[error("{}: invalid manifest: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("save interrupted after {0} blobs")]
    Interrupted(usize),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How a set of weights came to be.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    /// `train` or `add-task`.
    pub stage: String,
    pub init_seed: u64,
    pub data_seed: u64,
    pub train_seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    namespace: String,
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    namespace: String,
    name: String,
    step: u64,
    len: usize,
    sha256_m: String,
    sha256_v: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    schedule: ScheduleConfig,
    n_tasks: usize,
    step: u64,
    lineage: Vec<LineageEntry>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<Vec<MomentEntry>>,
}

/// Model weights with everything needed to sample from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Optimisation steps taken over the whole lineage.
    pub step: u64,
    pub lineage: Vec<LineageEntry>,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

/// Test-only fault injection for [`save_checkpoint_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SaveOptions {
    /// Abort after writing this many blobs, leaving the temporary directory.
    pub fail_after_blobs: Option<usize>,
}

fn task_namespace(task: usize) -> String {
    format!("task_{task}")
}

fn blob_path(dir: &Path, namespace: &str, name: &str, suffix: &str) -> PathBuf {
    dir.join(namespace).join(format!("{name}{suffix}.bin"))
}

fn encode(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct BlobWriter<'a> {
    dir: &'a Path,
    written: usize,
    fail_after: Option<usize>,
}

impl BlobWriter<'_> {
    fn write(&mut self, namespace: &str, name: &str, suffix: &str, data: &[f32]) -> Result<String> {
        if self.fail_after == Some(self.written) {
            return Err(CheckpointError::Interrupted(self.written));
        }
        let path = blob_path(self.dir, namespace, name, suffix);
        let bytes = encode(data);
        fs::write(&path, &bytes).map_err(io(&path))?;
        self.written += 1;
        Ok(digest(&bytes))
    }
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    save_checkpoint_with(ckpt, path, SaveOptions::default())
}

/// Writes into a temporary sibling directory, manifest last, then renames it
/// over `path`. An interrupted save never leaves a manifest behind.
pub fn save_checkpoint_with(ckpt: &Checkpoint, path: &Path, options: SaveOptions) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let tmp = sibling(path, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir_all(tmp.join(SHARED)).map_err(io(&tmp))?;
    let n_exclusive = ckpt.params.n_exclusive();
    for task in 1..=n_exclusive {
        let d = tmp.join(task_namespace(task));
        fs::create_dir_all(&d).map_err(io(&d))?;
    }

    let mut writer = BlobWriter {
        dir: &tmp,
        written: 0,
        fail_after: options.fail_after_blobs,
    };
    let mut tensors = Vec::new();
    let mut groups: Vec<(String, &BTreeMap<String, Tensor>)> = vec![(SHARED.into(), ckpt.params.shared())];
    for task in 1..=n_exclusive {
        groups.push((task_namespace(task), ckpt.params.exclusive(task).expect("task in range")));
    }
    for (namespace, coll) in &groups {
        for (name, t) in coll.iter() {
            let sha256 = writer.write(namespace, name, "", t.data())?;
            tensors.push(TensorEntry {
                namespace: namespace.clone(),
                name: name.clone(),
                shape: t.shape().to_vec(),
                sha256,
            });
        }
    }

    let optimizer = match &ckpt.optimizer {
        None => None,
        Some(opt) => {
            let mut entries = Vec::new();
            let mut groups: Vec<(String, &BTreeMap<String, Moments>)> = vec![(SHARED.into(), &opt.shared)];
            groups.extend(opt.exclusive.iter().enumerate().map(|(i, m)| (task_namespace(i + 1), m)));
            for (namespace, coll) in groups {
                let ns = format!("optimizer/{namespace}");
                let d = tmp.join(&ns);
                fs::create_dir_all(&d).map_err(io(&d))?;
                for (name, m) in coll {
                    entries.push(MomentEntry {
                        sha256_m: writer.write(&ns, name, ".m", &m.m)?,
                        sha256_v: writer.write(&ns, name, ".v", &m.v)?,
                        namespace: ns.clone(),
                        name: name.clone(),
                        step: m.step,
                        len: m.m.len(),
                    });
                }
            }
            Some(entries)
        }
    };

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: ckpt.model.clone(),
        schedule: ckpt.schedule,
        n_tasks: ckpt.model.n_tasks,
        step: ckpt.step,
        lineage: ckpt.lineage.clone(),
        tensors,
        optimizer,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, text + "\n").map_err(io(&mpath))?;

    let old = sibling(path, "old");
    if path.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io(&old))?;
        }
        fs::rename(path, &old).map_err(io(path))?;
    }
    fs::rename(&tmp, path).map_err(io(path))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io(&old))?;
    }
    Ok(())
}

fn read_blob(dir: &Path, namespace: &str, name: &str, suffix: &str, len: usize, sha256: &str) -> Result<Vec<f32>> {
    let label = format!("{namespace}/{name}{suffix}");
    let path = blob_path(dir, namespace, name, suffix);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::MissingBlob { tensor: label, path });
        }
        Err(e) => return Err(io(&path)(e)),
    };
    if bytes.len() != 4 * len {
        return Err(CheckpointError::CorruptBlob {
            tensor: label,
            reason: format!("{} bytes, expected {}", bytes.len(), 4 * len),
        });
    }
    if digest(&bytes) != sha256 {
        return Err(CheckpointError::CorruptBlob {
            tensor: label,
            reason: "checksum mismatch".into(),
        });
    }
    Ok(decode(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mpath = path.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let bad = |message: String| CheckpointError::Manifest {
        path: mpath.clone(),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| bad("no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(CheckpointError::UnknownVersion {
            path: mpath.clone(),
            found: found as u32,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    manifest.model.validate().map_err(|e| bad(e.to_string()))?;
    if manifest.n_tasks != manifest.model.n_tasks {
        return Err(bad(format!(
            "n_tasks {} disagrees with the model ({})",
            manifest.n_tasks, manifest.model.n_tasks
        )));
    }
    let unet = Unet::new(&manifest.model).map_err(|e| bad(e.to_string()))?;
    let expected_ns = match manifest.model.conditioning {
        Conditioning::SharedRepresentation => manifest.n_tasks,
        _ => 0,
    };

    let mut shared = BTreeMap::new();
    let mut exclusive = vec![BTreeMap::new(); expected_ns];
    for entry in &manifest.tensors {
        let coll = if entry.namespace == SHARED {
            &mut shared
        } else {
            let task = entry
                .namespace
                .strip_prefix("task_")
                .and_then(|t| t.parse::<usize>().ok())
                .filter(|t| (1..=expected_ns).contains(t))
                .ok_or_else(|| bad(format!("unexpected namespace `{}`", entry.namespace)))?;
            &mut exclusive[task - 1]
        };
        let spec = unet.slots().iter().find(|s| s.name == entry.name);
        let tensor_label = format!("{}/{}", entry.namespace, entry.name);
        let spec = spec.ok_or_else(|| bad(format!("unknown tensor `{tensor_label}`")))?;
        if spec.shape != entry.shape {
            return Err(CheckpointError::ShapeMismatch {
                tensor: tensor_label,
                expected: spec.shape.clone(),
                actual: entry.shape.clone(),
            });
        }
        let len = entry.shape.iter().product();
        let data = read_blob(path, &entry.namespace, &entry.name, "", len, &entry.sha256)?;
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        coll.insert(entry.name.clone(), tensor);
    }
    // Report any tensor the model needs but the manifest omits by name.
    for slot in unet.slots() {
        let namespaces: Vec<String> = match slot.route {
            srddpm_core::model::Route::Shared => vec![SHARED.into()],
            srddpm_core::model::Route::Exclusive => (1..=expected_ns).map(task_namespace).collect(),
        };
        for ns in namespaces {
            let present = if ns == SHARED {
                shared.contains_key(&slot.name)
            } else {
                let task: usize = ns["task_".len()..].parse().expect("own namespace");
                exclusive[task - 1].contains_key(&slot.name)
            };
            if !present {
                return Err(CheckpointError::MissingBlob {
                    tensor: format!("{ns}/{}", slot.name),
                    path: blob_path(path, &ns, &slot.name, ""),
                });
            }
        }
    }
    let params = ModelParams::from_parts(&unet, shared, exclusive).map_err(|e| bad(e.to_string()))?;

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(entries) => {
            let mut opt = OptimizerState::new();
            for e in entries {
                let m = read_blob(path, &e.namespace, &e.name, ".m", e.len, &e.sha256_m)?;
                let v = read_blob(path, &e.namespace, &e.name, ".v", e.len, &e.sha256_v)?;
                let moments = Moments { m, v, step: e.step };
                let ns = e.namespace.strip_prefix("optimizer/").unwrap_or(&e.namespace);
                if ns == SHARED {
                    opt.shared.insert(e.name.clone(), moments);
                } else {
                    let task = ns
                        .strip_prefix("task_")
                        .and_then(|t| t.parse::<usize>().ok())
                        .filter(|t| *t >= 1)
                        .ok_or_else(|| bad(format!("unexpected optimizer namespace `{ns}`")))?;
                    if opt.exclusive.len() < task {
                        opt.exclusive.resize_with(task, BTreeMap::new);
                    }
                    opt.exclusive[task - 1].insert(e.name.clone(), moments);
                }
            }
            Some(opt)
        }
    };

    Ok(Checkpoint {
        model: manifest.model,
        schedule: manifest.schedule,
        step: manifest.step,
        lineage: manifest.lineage,
        params,
        optimizer,
    })
}

/// Blob files of a namespace, sorted by name, for byte comparisons.
pub fn namespace_blobs(path: &Path, namespace: &str) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path.join(namespace))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            out.push((entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use srddpm_core::model::{init_model, StagePosition};

    use super::*;

    fn model(conditioning: Conditioning) -> ModelConfig {
        ModelConfig {
            image_channels: 1,
            image_size: 8,
            base_channels: 4,
            n_stages: 2,
            n_tasks: 3,
            exclusive_stages: if conditioning == Conditioning::SharedRepresentation {
                [StagePosition::First, StagePosition::Last].into()
            } else {
                Default::default()
            },
            conditioning,
            time_embed_dim: 8,
        }
    }

    fn checkpoint(conditioning: Conditioning) -> Checkpoint {
        let model = model(conditioning);
        let params = init_model(&model, 2).unwrap();
        let mut opt = OptimizerState::new();
        opt.shared.insert(
            "time.dense1.bias".into(),
            Moments {
                m: vec![0.5, -1.0],
                v: vec![0.25, 1.0],
                step: 7,
            },
        );
        Checkpoint {
            model,
            schedule: ScheduleConfig::default(),
            step: 42,
            lineage: vec![LineageEntry {
                stage: "train".into(),
                init_seed: 1,
                data_seed: 2,
                train_seed: 3,
                steps: 42,
            }],
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for c in [
            Conditioning::Unconditional,
            Conditioning::ClassConditional,
            Conditioning::SharedRepresentation,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt");
            let ckpt = checkpoint(c);
            save_checkpoint(&ckpt, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ckpt);
            if c != Conditioning::SharedRepresentation {
                assert_eq!(back.params.n_exclusive(), 0);
            }
        }
    }

    #[test]
    fn blob_length_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let ckpt = checkpoint(Conditioning::SharedRepresentation);
        save_checkpoint(&ckpt, &path).unwrap();
        for (name, t) in ckpt.params.shared() {
            let len = fs::metadata(blob_path(&path, SHARED, name, "")).unwrap().len();
            assert_eq!(len as usize, 4 * t.len());
        }
        let text = fs::read_to_string(path.join(MANIFEST)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format_version"], FORMAT_VERSION);
        assert_eq!(v["n_tasks"], 3);
        let task_dirs = fs::read_dir(&path)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("task_"))
            .count();
        assert_eq!(task_dirs, 3);
    }

    #[test]
    fn missing_blob_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&checkpoint(Conditioning::SharedRepresentation), &path).unwrap();
        fs::remove_file(blob_path(&path, "task_3", "dec0.out.weight", "")).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(&err, CheckpointError::MissingBlob { tensor, .. } if tensor == "task_3/dec0.out.weight"));
    }

    #[test]
    fn corrupt_blob_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&checkpoint(Conditioning::SharedRepresentation), &path).unwrap();
        let blob = blob_path(&path, SHARED, "time.dense2.weight", "");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&blob, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("shared/time.dense2.weight"), "{err}");
        bytes.truncate(8);
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::CorruptBlob { .. })));
    }

    #[test]
    fn unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&checkpoint(Conditioning::Unconditional), &path).unwrap();
        let m = path.join(MANIFEST);
        let text = fs::read_to_string(&m).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::UnknownVersion { found: 99, .. })));
    }

    #[test]
    fn shape_mismatch_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&checkpoint(Conditioning::Unconditional), &path).unwrap();
        let m = path.join(MANIFEST);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
        let entry = v["tensors"]
            .as_array_mut()
            .unwrap()
            .iter_mut()
            .find(|e| e["name"] == "dec0.out.bias")
            .unwrap();
        entry["shape"] = serde_json::json!([2]);
        fs::write(&m, v.to_string()).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(&err, CheckpointError::ShapeMismatch { tensor, .. } if tensor == "shared/dec0.out.bias"));
    }

    #[test]
    fn interrupted_save_leaves_previous_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let first = checkpoint(Conditioning::SharedRepresentation);
        save_checkpoint(&first, &path).unwrap();
        let mut second = first.clone();
        second.step = 99;
        for stop in [0, 3, 20] {
            let err = save_checkpoint_with(&second, &path, SaveOptions { fail_after_blobs: Some(stop) });
            assert!(matches!(err, Err(CheckpointError::Interrupted(_))));
            assert_eq!(load_checkpoint(&path).unwrap(), first);
            assert!(load_checkpoint(&sibling(&path, "tmp")).is_err());
        }
        let fresh = dir.path().join("fresh");
        let _ = save_checkpoint_with(&first, &fresh, SaveOptions { fail_after_blobs: Some(2) });
        assert!(load_checkpoint(&fresh).is_err());
        save_checkpoint(&second, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().step, 99);
    }
}
