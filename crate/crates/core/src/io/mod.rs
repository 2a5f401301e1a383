//! On-disk formats: trajectory datasets and model checkpoints.

mod checkpoint;
mod dataset;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_filtered, read_manifest, save_checkpoint, Checkpoint, CheckpointError, Manifest,
    TensorEntry,
};
pub use dataset::{
    read_dataset, write_dataset, DatasetError, DatasetMeta, TrajectoryDataset, DATASET_MAGIC, DATASET_VERSION,
};

use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}
