//! Filesystem access: checkpoints, IDX datasets and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ienlab_core::layers::{decode_checkpoint, encode_checkpoint, Model};
use ienlab_core::train::{parse_idx, Dataset};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: ienlab_core::Error,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn format(path: &Path, source: ienlab_core::Error) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| IoError::io(path, std::io::Error::other("not a file path")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(IoError::io(path, e));
    }
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), IoError> {
    atomic_write(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model, IoError> {
    decode_checkpoint(&read(path)?).map_err(|e| IoError::format(path, e))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, IoError> {
    let img = read(images)?;
    let lbl = read(labels)?;
    parse_idx(&img, &lbl).map_err(|e| IoError::format(images, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ienlab_core::layers::{LayerDef, LayerSpec};
    use ienlab_core::SeededRng;

    fn model() -> Model {
        let defs = [
            LayerDef::Weighted(LayerSpec::dense(4, 6).ien(4).relu().with_bias()),
            LayerDef::Weighted(LayerSpec::dense(6, 3)),
        ];
        Model::initialized(&defs, &SeededRng::new(5)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ienw");
        let b = dir.path().join("b.ienw");
        save_checkpoint(&model(), &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, model());
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 2, "temp files left behind: {names:?}");
    }

    #[test]
    fn errors_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.ienw");
        assert!(matches!(load_checkpoint(&missing), Err(IoError::Io { .. })));
        let bad = dir.path().join("bad.ienw");
        save_checkpoint(&model(), &bad).unwrap();
        let mut bytes = fs::read(&bad).unwrap();
        bytes[0] = b'X';
        fs::write(&bad, bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(IoError::Format { .. })));
    }

    #[test]
    fn idx_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = idx_bytes(4, 4);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lbl).unwrap();
        let data = load_idx(&ip, &lp).unwrap();
        assert_eq!(data.len(), 4);
        assert!(data.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
        fs::write(&ip, &img[..img.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(IoError::Format { .. })));
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, idx_bytes(4, 5).1).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(IoError::Format { .. })));
    }

    fn idx_bytes(n: u32, n_labels: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3];
        for d in [n, 2, 3] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..n * 6).map(|i| (i * 37 % 256) as u8));
        let mut lbl = vec![0, 0, 8, 1];
        lbl.extend_from_slice(&n_labels.to_be_bytes());
        lbl.extend((0..n_labels).map(|i| (i % 3) as u8));
        (img, lbl)
    }
}
