use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::png;
use crate::error::{Error, Result};
use crate::geometry::{self, CameraIntrinsics, DepthMap, SurfaceNormalImage};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INTRINSICS_FILE: &str = "intrinsics.json";

/// One scene: RGB, depth, camera, and (where the protocol allows) its label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `3 x H x W` in `[0, 1]`.
    pub rgb: Array3<f32>,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    /// Road mask in {0, 1}; `None` for unlabeled target-train samples.
    pub label: Option<Array2<u8>>,
    pub normals: Option<SurfaceNormalImage>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    /// Cached normals, or freshly estimated ones.
    pub fn normals_or_compute(&self) -> Result<SurfaceNormalImage> {
        match &self.normals {
            Some(n) => Ok(n.clone()),
            None => geometry::surface_normals(&self.depth, &self.intrinsics),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    SourceTrain,
    TargetTrain,
    TargetEval,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::SourceTrain => "source-train",
            SplitRole::TargetTrain => "target-train",
            SplitRole::TargetEval => "target-eval",
        }
    }

    /// Whether labels of this split may be read at all. Target-train labels
    /// exist on disk only as a held-out copy.
    pub fn labels_readable(self) -> bool {
        self != SplitRole::TargetTrain
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-train" => Ok(SplitRole::SourceTrain),
            "target-train" => Ok(SplitRole::TargetTrain),
            "target-eval" => Ok(SplitRole::TargetEval),
            other => Err(Error::Config(format!("unknown split role '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: SplitRole,
    /// Seed the sample was generated from, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub rgb: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn write_intrinsics(root: &Path, k: &CameraIntrinsics) -> Result<()> {
    let path = root.join(INTRINSICS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(k)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// What to read when loading a sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub need_normals: bool,
    pub with_label: bool,
}

/// A dataset directory: `rgb/`, `depth/`, `label/`, optional `sn/`,
/// `intrinsics.json` and `manifest.json`.
#[derive(Debug)]
pub struct DatasetLayout {
    root: PathBuf,
    manifest: Manifest,
    intrinsics: CameraIntrinsics,
    index: HashMap<String, usize>,
}

impl DatasetLayout {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
        let intrinsics: CameraIntrinsics = read_json(&root.join(INTRINSICS_FILE))?;
        intrinsics.validate_for(manifest.height, manifest.width)?;
        let mut index = HashMap::new();
        for (i, e) in manifest.samples.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::format(
                    root.join(MANIFEST_FILE),
                    format!("duplicate sample id '{}'", e.id),
                ));
            }
            let files = [Some(&e.rgb), Some(&e.depth), e.label.as_ref(), e.heldout_label.as_ref(), e.normals.as_ref()];
            for rel in files.into_iter().flatten() {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    ));
                }
            }
        }
        Ok(Self {
            root,
            manifest,
            intrinsics,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Manifest entries of a split, in manifest order.
    pub fn entries(&self, role: SplitRole) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest.samples.iter().filter(move |e| e.role == role)
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.index
            .get(id)
            .map(|&i| &self.manifest.samples[i])
            .ok_or_else(|| Error::Input(format!("sample '{id}' not in manifest of {}", self.root.display())))
    }

    pub fn load_sample(&self, id: &str, opts: LoadOptions) -> Result<Sample> {
        let entry = self.entry(id)?;
        let rgb = png::read_rgb(&self.root.join(&entry.rgb))?;
        let depth = DepthMap::from_millimeters(&png::read_gray16(&self.root.join(&entry.depth))?);
        if rgb.dim().1 != depth.height() || rgb.dim().2 != depth.width() {
            return Err(Error::format(
                self.root.join(&entry.rgb),
                "rgb and depth sizes differ",
            ));
        }
        let label = if opts.with_label {
            if !entry.role.labels_readable() {
                return Err(Error::Contract(format!(
                    "labels of {} sample '{id}' must not be read",
                    entry.role
                )));
            }
            let rel = entry.label.as_ref().ok_or_else(|| {
                Error::Input(format!("sample '{id}' has no label"))
            })?;
            Some(png::read_mask(&self.root.join(rel))?)
        } else {
            None
        };
        let normals = match (&entry.normals, opts.need_normals) {
            (Some(rel), true) => Some(SurfaceNormalImage::from_rgb8(&png::read_rgb8(&self.root.join(rel))?)),
            (None, true) => Some(geometry::surface_normals(&depth, &self.intrinsics)?),
            (_, false) => None,
        };
        Ok(Sample {
            id: id.to_string(),
            rgb,
            depth,
            intrinsics: self.intrinsics,
            label,
            normals,
        })
    }

    /// Held-out ground truth of a target-train sample. Reserved for offline
    /// analysis; the training loop never calls this.
    pub fn load_heldout_label(&self, id: &str) -> Result<Array2<u8>> {
        let entry = self.entry(id)?;
        let rel = entry
            .heldout_label
            .as_ref()
            .or(entry.label.as_ref())
            .ok_or_else(|| Error::Input(format!("sample '{id}' has no held-out label")))?;
        png::read_mask(&self.root.join(rel))
    }
}

/// Random access to the samples of one split.
pub trait SampleSource: Send + Sync {
    fn role(&self) -> SplitRole;
    fn len(&self) -> usize;
    fn id(&self, index: usize) -> &str;
    fn load(&self, index: usize, opts: LoadOptions) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A split gathered from one or more dataset directories.
#[derive(Debug, Clone)]
pub struct DiskSplit {
    role: SplitRole,
    items: Vec<(Arc<DatasetLayout>, String)>,
}

impl DiskSplit {
    pub fn new(role: SplitRole, layouts: &[Arc<DatasetLayout>]) -> Self {
        let items = layouts
            .iter()
            .flat_map(|l| l.entries(role).map(move |e| (Arc::clone(l), e.id.clone())))
            .collect();
        Self { role, items }
    }

    pub fn layout(&self, index: usize) -> &DatasetLayout {
        &self.items[index].0
    }
}

impl SampleSource for DiskSplit {
    fn role(&self) -> SplitRole {
        self.role
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.items[index].1
    }

    fn load(&self, index: usize, opts: LoadOptions) -> Result<Sample> {
        let (layout, id) = &self.items[index];
        layout.load_sample(id, opts)
    }
}

/// In-memory split. Labels of target-train samples are dropped on
/// construction so they cannot leak into training.
#[derive(Debug, Clone)]
pub struct MemorySplit {
    role: SplitRole,
    samples: Vec<Sample>,
}

impl MemorySplit {
    pub fn new(role: SplitRole, mut samples: Vec<Sample>) -> Self {
        if !role.labels_readable() {
            for s in &mut samples {
                s.label = None;
            }
        }
        Self { role, samples }
    }
}

impl SampleSource for MemorySplit {
    fn role(&self) -> SplitRole {
        self.role
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.samples[index].id
    }

    fn load(&self, index: usize, opts: LoadOptions) -> Result<Sample> {
        let mut s = self.samples[index].clone();
        if opts.with_label {
            if !self.role.labels_readable() {
                return Err(Error::Contract(format!(
                    "labels of {} sample '{}' must not be read",
                    self.role, s.id
                )));
            }
            if s.label.is_none() {
                return Err(Error::Input(format!("sample '{}' has no label", s.id)));
            }
        } else {
            s.label = None;
        }
        if opts.need_normals && s.normals.is_none() {
            s.normals = Some(geometry::surface_normals(&s.depth, &s.intrinsics)?);
        }
        Ok(s)
    }
}

/// A directory holding either one dataset or several dataset
/// subdirectories (one per domain), searched in name order.
#[derive(Debug, Clone)]
pub struct DataRoot {
    layouts: Vec<Arc<DatasetLayout>>,
}

impl DataRoot {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.join(MANIFEST_FILE).is_file() {
            return Ok(Self {
                layouts: vec![Arc::new(DatasetLayout::open(path)?)],
            });
        }
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST_FILE).is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Input(format!(
                "no dataset (manifest.json) found under {}",
                path.display()
            )));
        }
        let layouts = dirs
            .into_iter()
            .map(|d| DatasetLayout::open(d).map(Arc::new))
            .collect::<Result<_>>()?;
        Ok(Self { layouts })
    }

    pub fn layouts(&self) -> &[Arc<DatasetLayout>] {
        &self.layouts
    }

    pub fn split(&self, role: SplitRole) -> DiskSplit {
        DiskSplit::new(role, &self.layouts)
    }
}
