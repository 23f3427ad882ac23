//! On-disk layout: `manifest.json` plus content-addressed files under `blobs/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, WorkflowConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";

/// A manifest bound to its directory. Every mutation goes through
/// [`Workspace::commit`], which validates and atomically replaces the file.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    manifest: DatasetManifest,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

impl Workspace {
    pub fn create(root: impl Into<PathBuf>, config: WorkflowConfig) -> Result<Self> {
        config.validate()?;
        let root = root.into();
        fs::create_dir_all(root.join(BLOB_DIR)).map_err(|e| Error::io(&root, e))?;
        if root.join(MANIFEST_FILE).exists() {
            return Err(Error::Conflict(format!("{} already holds a manifest", root.display())));
        }
        let ws = Self { manifest: DatasetManifest::new(config), root };
        ws.write_manifest(&ws.manifest)?;
        Ok(ws)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = Self::read_manifest(&root)?;
        Ok(Self { root, manifest })
    }

    fn read_manifest(root: &Path) -> Result<DatasetManifest> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&text)?;
        m.validate()?;
        Ok(m)
    }

    /// Re-reads the manifest, picking up commits made by other processes.
    pub fn reload(&mut self) -> Result<()> {
        self.manifest = Self::read_manifest(&self.root)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn config(&self) -> &WorkflowConfig {
        &self.manifest.config
    }

    fn write_manifest(&self, m: &DatasetManifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(m)?;
        write_atomic(&self.root.join(MANIFEST_FILE), &bytes)
    }

    /// Applies `f` to a copy of the manifest; the copy replaces the stored
    /// manifest only if `f` succeeds and the result validates.
    pub fn commit<T>(&mut self, f: impl FnOnce(&mut DatasetManifest) -> Result<T>) -> Result<T> {
        let mut next = self.manifest.clone();
        let out = f(&mut next)?;
        next.validate()?;
        self.write_manifest(&next)?;
        self.manifest = next;
        Ok(out)
    }

    /// Stores `bytes` under their SHA-256 digest; returns the path relative to the root.
    pub fn put_blob(&self, bytes: &[u8], ext: &str) -> Result<String> {
        let digest = Sha256::digest(bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let rel = format!("{BLOB_DIR}/{hex}.{ext}");
        let path = self.root.join(&rel);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(rel)
    }

    pub fn read_blob(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.blob_path(rel)?;
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn blob_path(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::InvalidArgument(format!("blob path {rel} escapes the workspace")));
        }
        Ok(self.root.join(p))
    }

    /// Manifest integrity plus presence of every referenced file.
    pub fn verify(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        let paths = m
            .images
            .iter()
            .map(|r| &r.path)
            .chain(m.tiles.iter().map(|r| &r.path))
            .chain(m.annotations.iter().map(|r| &r.mask))
            .chain(m.checkpoints.iter().map(|r| &r.path))
            .chain(m.iterations.iter().filter_map(|r| r.stats.as_ref()))
            .chain(m.iterations.iter().filter_map(|r| r.loss_history.as_ref()));
        for rel in paths {
            if !self.blob_path(rel)?.is_file() {
                return Err(Error::Integrity(format!("missing file {rel}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_commit_leaves_manifest_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::create(dir.path(), WorkflowConfig::default()).unwrap();
        let before = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let r: Result<()> = ws.commit(|m| {
            m.validation_tiles.push("ghost".into());
            Ok(())
        });
        assert!(matches!(r, Err(Error::Integrity(_))));
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), before);
        assert!(ws.manifest().validation_tiles.is_empty());
    }

    #[test]
    fn blobs_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(dir.path(), WorkflowConfig::default()).unwrap();
        let a = ws.put_blob(b"hello", "bin").unwrap();
        let b = ws.put_blob(b"hello", "bin").unwrap();
        assert_eq!(a, b);
        assert_eq!(ws.read_blob(&a).unwrap(), b"hello");
        assert!(ws.read_blob("../etc/passwd").is_err());
    }

    #[test]
    fn create_refuses_existing() {
        let dir = tempfile::tempdir().unwrap();
        Workspace::create(dir.path(), WorkflowConfig::default()).unwrap();
        assert!(matches!(Workspace::create(dir.path(), WorkflowConfig::default()), Err(Error::Conflict(_))));
        Workspace::open(dir.path()).unwrap();
    }
}
