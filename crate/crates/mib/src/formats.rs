//! On-disk dataset layout and binary raster formats.
//!
//! All integers and reals are little-endian.
//!
//! Image grid (`.img`):
//!
//! ```text
//! magic     8 bytes  "MIBGRID1"
//! height    u32
//! width     u32
//! channels  u32
//! values    f64 x (height*width*channels), pixel-major, channel-minor
//! ```
//!
//! Label mask (`.gt` truth, `.ann` training annotation):
//!
//! ```text
//! magic     8 bytes  "MIBMASK1"
//! height    u32
//! width     u32
//! labels    u8 x (height*width), row-major; 255 marks an unlabeled pixel
//! ```
//!
//! A dataset directory holds `manifest.json`, one `step_NN/` directory per
//! learning step with `NNNNNN.img`, `NNNNNN.gt` and `NNNNNN.ann` per scene
//! (`NNNNNN` is the scene's index in the training pool), and `test/` with
//! `.img` and `.gt` files numbered from zero. Every file is written to a
//! temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mib_core::synthdata::{Sample, Scene, SplitReport, StepDataset};
use mib_core::{Annotation, ClassId, ClassSet, Grid, Mode};
use serde::{Deserialize, Serialize};

use crate::config::{Protocol, SCHEMA_VERSION};
use crate::error::{CliError, Result};

pub const GRID_MAGIC: &[u8; 8] = b"MIBGRID1";
pub const MASK_MAGIC: &[u8; 8] = b"MIBMASK1";
pub const MANIFEST: &str = "manifest.json";
pub const TEST_DIR: &str = "test";

/// Largest raster side accepted by the readers.
const MAX_SIDE: usize = 1 << 14;

pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * grid.data().len());
    out.extend_from_slice(GRID_MAGIC);
    for v in [grid.height(), grid.width(), grid.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid, String> {
    let dims = header(bytes, GRID_MAGIC, 3)?;
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    if c == 0 || c > 64 {
        return Err(format!("channel count {c} out of range"));
    }
    let body = &bytes[20..];
    if body.len() != h * w * c * 8 {
        return Err(format!("{} value bytes for a {h}x{w}x{c} grid", body.len()));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Grid::from_vec(h, w, c, data).map_err(|e| e.to_string())
}

pub fn encode_mask(annotation: &Annotation) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + annotation.pixels());
    out.extend_from_slice(MASK_MAGIC);
    for v in [annotation.height(), annotation.width()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&annotation.to_codes());
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Annotation, String> {
    let dims = header(bytes, MASK_MAGIC, 2)?;
    let (h, w) = (dims[0], dims[1]);
    let body = &bytes[16..];
    if body.len() != h * w {
        return Err(format!("{} label bytes for a {h}x{w} mask", body.len()));
    }
    Annotation::from_codes(h, w, body).map_err(|e| e.to_string())
}

fn header(bytes: &[u8], magic: &[u8; 8], fields: usize) -> Result<Vec<usize>, String> {
    let len = 8 + 4 * fields;
    if bytes.len() < len {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[..8] != magic {
        return Err("bad magic".into());
    }
    let dims: Vec<usize> = bytes[8..len]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    if dims[..2].iter().any(|&d| d == 0 || d > MAX_SIDE) {
        return Err(format!("raster size {}x{} out of range", dims[0], dims[1]));
    }
    Ok(dims)
}

/// Writes `bytes` next to `path` and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path)(e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(CliError::io(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: usize,
    /// Steps that train on this scene; empty when the split left it out.
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepEntry {
    pub step: usize,
    pub dir: String,
    /// New classes of the step, background included.
    pub classes: ClassSet,
    pub scenes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exclusions {
    pub background_only: usize,
    pub outside_schedule: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// Hex data digest of the config that produced the directory.
    pub data_digest: String,
    pub protocol: Protocol,
    pub mode: Mode,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Every scene of the training pool, once, in id order.
    pub scenes: Vec<SceneEntry>,
    pub steps: Vec<StepEntry>,
    pub test_scenes: usize,
    pub excluded: Exclusions,
}

/// A dataset as held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub steps: Vec<StepDataset>,
    pub test: Vec<Arc<Scene>>,
}

fn step_dir(step: usize) -> String {
    format!("step_{step:02}")
}

fn stem(id: usize) -> String {
    format!("{id:06}")
}

/// Builds the manifest of `dataset`, generated from a pool of `pool_size`
/// scenes.
pub fn manifest_for(
    dataset: &Dataset,
    step_classes: &[ClassSet],
    pool_size: usize,
    protocol: Protocol,
    data_digest: String,
    excluded: &SplitReport,
) -> Result<Manifest> {
    let first = dataset
        .test
        .first()
        .ok_or_else(|| CliError::Config("dataset has no test scenes".into()))?;
    let mut scenes: Vec<SceneEntry> = (0..pool_size).map(|id| SceneEntry { id, steps: Vec::new() }).collect();
    let mut steps = Vec::with_capacity(dataset.steps.len());
    for (data, classes) in dataset.steps.iter().zip(step_classes) {
        let ids: Vec<usize> = data.samples.iter().map(|s| s.scene_id).collect();
        for &id in &ids {
            scenes[id].steps.push(data.step);
        }
        steps.push(StepEntry {
            step: data.step,
            dir: step_dir(data.step),
            classes: classes.clone(),
            scenes: ids,
        });
    }
    Ok(Manifest {
        schema_version: SCHEMA_VERSION,
        data_digest,
        protocol,
        mode: first.mode(),
        height: first.height(),
        width: first.width(),
        channels: first.image().channels(),
        scenes,
        steps,
        test_scenes: dataset.test.len(),
        excluded: Exclusions {
            background_only: excluded.background_only,
            outside_schedule: excluded.outside_schedule,
        },
    })
}

/// Writes `dataset` under `root`. Refuses a non-empty directory that is not
/// a dataset; an existing dataset is replaced.
pub fn write_dataset(root: &Path, dataset: &Dataset, manifest: &Manifest) -> Result<()> {
    if root.exists() {
        let mut entries = fs::read_dir(root).map_err(CliError::io(root))?;
        if entries.next().is_some() && !root.join(MANIFEST).exists() {
            return Err(CliError::format(root, "exists, is not empty and holds no dataset manifest"));
        }
        clear_dataset(root)?;
    }
    for data in &dataset.steps {
        let dir = root.join(step_dir(data.step));
        for s in &data.samples {
            let base = dir.join(stem(s.scene_id));
            write_atomic(&base.with_extension("img"), &encode_grid(s.scene.image()))?;
            write_atomic(&base.with_extension("gt"), &encode_mask(&truth_mask(&s.scene)))?;
            write_atomic(&base.with_extension("ann"), &encode_mask(&s.annotation))?;
        }
    }
    let dir = root.join(TEST_DIR);
    for (i, scene) in dataset.test.iter().enumerate() {
        let base = dir.join(stem(i));
        write_atomic(&base.with_extension("img"), &encode_grid(scene.image()))?;
        write_atomic(&base.with_extension("gt"), &encode_mask(&truth_mask(scene)))?;
    }
    let text = serde_json::to_string_pretty(manifest).expect("manifests always serialize");
    write_atomic(&root.join(MANIFEST), text.as_bytes())
}

fn clear_dataset(root: &Path) -> Result<()> {
    for entry in fs::read_dir(root).map_err(CliError::io(root))? {
        let path = entry.map_err(CliError::io(root))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_dir() && (name == TEST_DIR || name.starts_with("step_")) {
            fs::remove_dir_all(&path).map_err(CliError::io(&path))?;
        } else if name == MANIFEST {
            fs::remove_file(&path).map_err(CliError::io(&path))?;
        }
    }
    Ok(())
}

fn truth_mask(scene: &Scene) -> Annotation {
    Annotation::dense(scene.height(), scene.width(), scene.truth()).expect("scene truth matches its size")
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    if !root.is_dir() {
        return Err(CliError::format(root, "dataset directory does not exist (run `mib generate` first)"));
    }
    let bytes = read_file(&path)?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| CliError::format(&path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CliError::format(
            &path,
            format!("schema version {} (expected {SCHEMA_VERSION})", manifest.schema_version),
        ));
    }
    Ok(manifest)
}

fn read_scene(base: &Path, mode: Mode) -> Result<Scene> {
    let img = base.with_extension("img");
    let gt = base.with_extension("gt");
    let image = decode_grid(&read_file(&img)?).map_err(|m| CliError::format(&img, m))?;
    let truth = decode_mask(&read_file(&gt)?).map_err(|m| CliError::format(&gt, m))?;
    let classes: Option<Vec<ClassId>> = truth.labels().iter().copied().collect();
    let classes = classes.ok_or_else(|| CliError::format(&gt, "truth mask has unlabeled pixels"))?;
    Scene::from_parts(image, classes, mode).map_err(|e| CliError::format(base, e.to_string()))
}

/// Loads every step and the test scenes listed in the manifest.
pub fn read_dataset(root: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = read_manifest(root)?;
    let mode = manifest.mode;
    let mut steps = Vec::with_capacity(manifest.steps.len());
    for entry in &manifest.steps {
        let dir = root.join(&entry.dir);
        let samples = entry
            .scenes
            .iter()
            .map(|&id| {
                let base = dir.join(stem(id));
                let scene = Arc::new(read_scene(&base, mode)?);
                let ann_path = base.with_extension("ann");
                let annotation =
                    decode_mask(&read_file(&ann_path)?).map_err(|m| CliError::format(&ann_path, m))?;
                if annotation.height() != scene.height() || annotation.width() != scene.width() {
                    return Err(CliError::format(&ann_path, "annotation size differs from the image"));
                }
                Ok(Sample {
                    scene_id: id,
                    scene,
                    annotation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        steps.push(StepDataset {
            step: entry.step,
            mode,
            samples,
        });
    }
    let dir = root.join(TEST_DIR);
    let test = (0..manifest.test_scenes)
        .map(|i| read_scene(&dir.join(stem(i)), mode).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, Dataset { steps, test }))
}

/// Every file under `root`, relative and sorted, for comparisons.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(CliError::io(dir))? {
            let path = entry.map_err(CliError::io(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}
