//! Checkpoints kept as files, one per learning step.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mib_core::checkpoint::Checkpoint;
use mib_core::training::CheckpointStore;

use crate::formats::write_atomic;

/// `step_NN.ckpt` files in one directory. Also notes when each step was
/// saved, which is how the CLI times steps.
#[derive(Debug)]
pub struct DirStore {
    dir: PathBuf,
    started: Instant,
    saved: Vec<(usize, f64)>,
}

impl DirStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            started: Instant::now(),
            saved: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:02}.ckpt"))
    }

    /// Seconds from construction to each save, in save order.
    pub fn save_times(&self) -> &[(usize, f64)] {
        &self.saved
    }

    /// Highest step with a checkpoint on disk.
    pub fn latest(&self) -> Option<usize> {
        (0..100).rev().find(|&s| self.path(s).is_file())
    }
}

impl CheckpointStore for DirStore {
    fn save(&mut self, step: usize, checkpoint: &Checkpoint) -> mib_core::Result<()> {
        write_atomic(&self.path(step), &checkpoint.encode())
            .map_err(|e| mib_core::Error::Storage(e.to_string()))?;
        self.saved.push((step, self.started.elapsed().as_secs_f64()));
        Ok(())
    }

    fn load(&self, step: usize) -> mib_core::Result<Checkpoint> {
        let path = self.path(step);
        let bytes = std::fs::read(&path)
            .map_err(|e| mib_core::Error::Storage(format!("{}: {e}", path.display())))?;
        Checkpoint::decode(&bytes)
    }
}
