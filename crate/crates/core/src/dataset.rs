//! Dataset container, manifest-driven ingestion, and the on-disk format.
//!
//! A dataset is a fixed number of equally sized clouds with string labels
//! and a train/test split. The binary layout is a versioned header followed
//! by a little-endian f64 coordinate payload and a label table.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{self, normalize, PointCloud};

const MAGIC: &[u8; 8] = b"PCAEDATA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub points_per_cloud: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Wrap samples, enforcing the uniform-size and unique-id invariants.
    pub fn new(points_per_cloud: usize, samples: Vec<Sample>) -> Result<Dataset> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        let mut ids: Vec<&str> = samples.iter().map(|s| s.cloud.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate sample ids"));
        }
        for s in &samples {
            if s.cloud.len() != points_per_cloud {
                return Err(Error::invalid(format!(
                    "sample {} has {} points, expected {points_per_cloud}",
                    s.cloud.id,
                    s.cloud.len()
                )));
            }
            if s.label.is_empty() {
                return Err(Error::invalid(format!("sample {} has empty label", s.cloud.id)));
            }
        }
        Ok(Dataset {
            points_per_cloud,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.points_per_cloud as u64).to_le_bytes());
        for s in &self.samples {
            for p in &s.cloud.points {
                for &v in p {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for s in &self.samples {
            write_str(&mut buf, &s.cloud.id);
            write_str(&mut buf, &s.label);
            buf.push(match s.split {
                Split::Train => 0,
                Split::Test => 1,
            });
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::invalid(format!(
                "{}: not a dataset file (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported dataset version {version}",
                path.display()
            )));
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let points = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let mut clouds = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pts = Vec::with_capacity(points);
            for _ in 0..points {
                let mut p = [0.0; 3];
                for v in &mut p {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
                pts.push(p);
            }
            clouds.push(pts);
        }
        let mut samples = Vec::with_capacity(count);
        for pts in clouds {
            let id = r.take_str()?;
            let label = r.take_str()?;
            let split = match r.take(1)?[0] {
                0 => Split::Train,
                1 => Split::Test,
                other => {
                    return Err(Error::invalid(format!(
                        "{}: bad split tag {other}",
                        path.display()
                    )))
                }
            };
            samples.push(Sample {
                cloud: PointCloud::new(id, pts),
                label,
                split,
            });
        }
        Dataset::new(points, samples)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::invalid(format!(
                "{}: truncated dataset file",
                self.path.display()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_str(&mut self) -> Result<String> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            Error::invalid(format!("{}: non-utf8 string in label table", self.path.display()))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceFormat {
    Off,
    Xyz,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub format: SourceFormat,
    pub label: String,
    pub split: Split,
}

/// Parse a manifest: one `path format label split` record per line,
/// whitespace separated, `#` comments.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let format = match fields[1] {
            "off" => SourceFormat::Off,
            "xyz" => SourceFormat::Xyz,
            other => return Err(err(format!("unknown format tag {other:?}"))),
        };
        let split = Split::parse(fields[3])
            .ok_or_else(|| err(format!("unknown split {:?}", fields[3])))?;
        if fields[2].is_empty() {
            return Err(err("empty label".into()));
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            format,
            label: fields[2].to_string(),
            split,
        });
    }
    Ok(entries)
}

pub struct IngestReport {
    pub dataset: Dataset,
    /// Entries that failed, with the reason; ingestion continues past them.
    pub skipped: Vec<(PathBuf, Error)>,
}

/// Build a dataset from manifest entries: meshes are surface-sampled to
/// `n_points` and normalized, point files are normalized only and must
/// already hold exactly `n_points` points. Bad entries are skipped and
/// reported; zero good entries is an error.
pub fn ingest(entries: &[ManifestEntry], n_points: usize, seed: u64) -> Result<IngestReport> {
    if n_points == 0 {
        return Err(Error::invalid("n_points must be positive"));
    }
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let entry_seed = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        match ingest_one(entry, n_points, entry_seed) {
            Ok(cloud) => samples.push(Sample {
                cloud,
                label: entry.label.clone(),
                split: entry.split,
            }),
            Err(e) => skipped.push((entry.path.clone(), e)),
        }
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "no usable manifest entries ({} skipped)",
            skipped.len()
        )));
    }
    Ok(IngestReport {
        dataset: Dataset::new(n_points, samples)?,
        skipped,
    })
}

fn ingest_one(entry: &ManifestEntry, n_points: usize, seed: u64) -> Result<PointCloud> {
    let cloud = match entry.format {
        SourceFormat::Off => {
            let mesh = geometry::read_off(&entry.path)?;
            let mut c = geometry::sample_mesh_surface(&mesh, n_points, seed)?;
            c.id = stem_of(&entry.path);
            c
        }
        SourceFormat::Xyz => {
            let c = geometry::read_xyz(&entry.path)?;
            if c.len() != n_points {
                return Err(Error::invalid(format!(
                    "{}: has {} points, expected {n_points}",
                    entry.path.display(),
                    c.len()
                )));
            }
            c
        }
    };
    normalize(&cloud)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
