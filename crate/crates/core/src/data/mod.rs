//! Synthetic dataset generation, PGM I/O and the manifest-backed loader.
//!
//! On-disk layout under a dataset root:
//!
//! ```text
//! manifest.csv
//! <split>/<A|B>/<index>_image.pgm   16-bit intensities
//! <split>/<A|B>/<index>_mask.pgm    8-bit category indices
//! ```
//!
//! Domain A is the labeled source, domain B the target.

mod pgm;
mod scene;

pub use pgm::{read_pgm, write_pgm, Pgm};
pub use scene::{generate_scene, mean_b, Scene, SceneSpec, MEANS_A, NOISE_A, NOISE_B};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene size {height}x{width} is below the 16x16 minimum")]
    SceneSize { height: usize, width: usize },
    #[error("scenes support 2 to 5 categories, got {0}")]
    Categories(usize),
    #[error("PGM parse error at byte {offset}: {message}")]
    Pgm { offset: usize, message: String },
    #[error("{path}: PGM parse error at byte {offset}: {message}")]
    PgmFile {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("target-domain masks are evaluation-only and cannot be read for training ({split} split)")]
    TargetMaskAccess { split: Split },
    #[error("{path}: expected {expected} image, found {found}")]
    Raster {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            Self::Pgm { offset, message } => Self::PgmFile {
                path: path.to_path_buf(),
                offset,
                message,
            },
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}; expected train, val or test"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    /// Labeled source modality, "A" on disk.
    Source,
    /// Unlabeled target modality, "B" on disk.
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "A",
            Domain::Target => "B",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" => Ok(Domain::Source),
            "B" => Ok(Domain::Target),
            other => Err(format!("unknown domain {other:?}; expected A or B")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestRow {
    pub split: Split,
    pub domain: Domain,
    /// Relative to the dataset root, `/`-separated.
    pub image_path: String,
    pub mask_path: String,
}

/// How many scenes go into each split, and how they are rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train: 200,
            val: 20,
            test: 40,
            seed: 0,
            height: 64,
            width: 64,
        }
    }
}

/// Render every scene into `dir` and write the manifest.
///
/// Scenes are numbered consecutively across train, val and test; scene `i`
/// uses seed `cfg.seed + i`.
pub fn generate_dataset(dir: &Path, cfg: &GenConfig) -> Result<Vec<ManifestRow>, DataError> {
    let mut index = 0u64;
    for (split, count) in [
        (Split::Train, cfg.train),
        (Split::Val, cfg.val),
        (Split::Test, cfg.test),
    ] {
        for _ in 0..count {
            let spec = SceneSpec::new(cfg.seed.wrapping_add(index)).with_size(cfg.height, cfg.width);
            let sc = generate_scene(&spec)?;
            let mask = Pgm::from_u8(sc.width, sc.height, &sc.mask);
            for (domain, image) in [(Domain::Source, &sc.image_a), (Domain::Target, &sc.image_b)] {
                let sub = dir.join(split.as_str()).join(domain.as_str());
                std::fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
                write_pgm(
                    &sub.join(format!("{index:05}_image.pgm")),
                    &Pgm::from_unit(sc.width, sc.height, image),
                )?;
                write_pgm(&sub.join(format!("{index:05}_mask.pgm")), &mask)?;
            }
            index += 1;
        }
    }
    build_manifest(dir)
}

/// Scan `dir` for `<split>/<domain>/*_image.pgm` and write `manifest.csv`.
pub fn build_manifest(dir: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let mut rows = Vec::new();
    for split in Split::ALL {
        for domain in [Domain::Source, Domain::Target] {
            let sub = dir.join(split.as_str()).join(domain.as_str());
            if !sub.is_dir() {
                continue;
            }
            let entries = std::fs::read_dir(&sub).map_err(|e| DataError::io(&sub, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| DataError::io(&sub, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(stem) = name.strip_suffix("_image.pgm") {
                    let base = format!("{}/{}", split.as_str(), domain.as_str());
                    rows.push(ManifestRow {
                        split,
                        domain,
                        image_path: format!("{base}/{name}"),
                        mask_path: format!("{base}/{stem}_mask.pgm"),
                    });
                }
            }
        }
    }
    rows.sort();
    write_manifest(dir, &rows)?;
    Ok(rows)
}

fn manifest_err(path: &Path, message: impl ToString) -> DataError {
    DataError::Manifest {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let path = dir.join(MANIFEST);
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(|e| manifest_err(&path, e))?;
    w.write_record(["split", "domain", "image_path", "mask_path"])
        .map_err(|e| manifest_err(&path, e))?;
    for r in rows {
        w.write_record([r.split.as_str(), r.domain.as_str(), &r.image_path, &r.mask_path])
            .map_err(|e| manifest_err(&path, e))?;
    }
    w.flush().map_err(|e| DataError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(manifest_err(&path, "not found"));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| manifest_err(&path, e))?;
    let header = r.headers().map_err(|e| manifest_err(&path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["split", "domain", "image_path", "mask_path"] {
        return Err(manifest_err(&path, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| manifest_err(&path, e))?;
        let bad = |m: String| manifest_err(&path, format!("row {}: {m}", line + 2));
        rows.push(ManifestRow {
            split: rec[0].parse().map_err(bad)?,
            domain: rec[1].parse().map_err(bad)?,
            image_path: rec[2].to_string(),
            mask_path: rec[3].to_string(),
        });
    }
    Ok(rows)
}

/// What a [`Dataset`] handle may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    /// Training code: target-domain masks are refused.
    Training,
    /// Evaluation code: everything is readable.
    Evaluation,
}

/// One image with its mask when the access mode permits it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    /// Row-major intensities in [0, 1].
    pub image: Vec<f64>,
    pub mask: Option<Vec<u8>>,
}

impl Sample {
    /// Stack images into an `[n, h, w, 1]` batch.
    pub fn batch(samples: &[&Sample]) -> Tensor {
        let (h, w) = samples.first().map_or((0, 0), |s| (s.height, s.width));
        let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
        Tensor::new(vec![samples.len(), h, w, 1], data).expect("uniform sample sizes")
    }
}

/// Manifest-backed reader with guarded mask access.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    rows: Vec<ManifestRow>,
    access: Access,
}

impl Dataset {
    pub fn open(root: &Path, access: Access) -> Result<Self, DataError> {
        Ok(Self {
            root: root.to_path_buf(),
            rows: read_manifest(root)?,
            access,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn access(&self) -> Access {
        self.access
    }

    pub fn rows(&self, split: Split, domain: Domain) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split && r.domain == domain)
    }

    pub fn len(&self, split: Split, domain: Domain) -> usize {
        self.rows(split, domain).count()
    }

    /// Images only; never touches mask files.
    pub fn images(&self, split: Split, domain: Domain) -> Result<Vec<Sample>, DataError> {
        self.load(split, domain, false)
    }

    /// Images with masks. Refused for the target domain under training access.
    pub fn labeled(&self, split: Split, domain: Domain) -> Result<Vec<Sample>, DataError> {
        if domain == Domain::Target && self.access == Access::Training {
            return Err(DataError::TargetMaskAccess { split });
        }
        self.load(split, domain, true)
    }

    fn load(&self, split: Split, domain: Domain, masks: bool) -> Result<Vec<Sample>, DataError> {
        let mut out = Vec::new();
        for row in self.rows(split, domain) {
            let path = self.root.join(&row.image_path);
            let img = read_pgm(&path)?;
            let mask = if masks {
                let mpath = self.root.join(&row.mask_path);
                let m = read_pgm(&mpath)?;
                if (m.width, m.height) != (img.width, img.height) {
                    return Err(DataError::Raster {
                        path: mpath,
                        expected: format!("{}x{}", img.width, img.height),
                        found: format!("{}x{}", m.width, m.height),
                    });
                }
                Some(m.to_u8().map_err(|e| e.at(&mpath))?)
            } else {
                None
            };
            let name = Path::new(&row.image_path)
                .file_name()
                .map(|n| n.to_string_lossy().trim_end_matches("_image.pgm").to_string())
                .unwrap_or_default();
            out.push(Sample {
                name,
                height: img.height,
                width: img.width,
                domain,
                image: img.to_unit(),
                mask,
            });
        }
        Ok(out)
    }
}
