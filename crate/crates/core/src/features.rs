//! Visual feature files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMTF" | u32 version=1 | u32 count | u32 L | u32 D
//! count x ( u32 id_len | id bytes (UTF-8) | L*D f32, row-major )
//! ```
//!
//! Records are keyed by [`example_key`], i.e. corpus row index plus image id,
//! because one image may back several rows with different regions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng as _;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: [u8; 4] = *b"MMTF";
pub const VERSION: u32 = 1;

/// Feature-store key of the `row`-th (0-based) corpus example.
pub fn example_key(row: usize, image_id: &str) -> String {
    format!("{row}_{image_id}")
}

/// `regions x dim` matrix of region vectors for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    regions: usize,
    dim: usize,
    data: Vec<f32>,
}

impl VisualFeatures {
    pub fn new(regions: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if regions == 0 || dim == 0 || data.len() != regions * dim {
            return Err(Error::FeatureFile(format!(
                "expected {regions}x{dim} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::FeatureFile("non-finite feature value".into()));
        }
        Ok(VisualFeatures { regions, dim, data })
    }

    pub fn zeros(regions: usize, dim: usize) -> Self {
        VisualFeatures {
            regions,
            dim,
            data: vec![0.0; regions * dim],
        }
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.regions, self.dim],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("validated shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub features: VisualFeatures,
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::FeatureFile(format!("{}: truncated", path.display()))
        } else {
            Error::io(path, e)
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes a complete feature file. Every record must be `regions x dim`.
pub fn write_feature_file(
    path: impl AsRef<Path>,
    regions: usize,
    dim: usize,
    records: &[FeatureRecord],
) -> Result<()> {
    let path = path.as_ref();
    let err = io_err(path);
    let mut w = BufWriter::new(File::create(path).map_err(&err)?);
    let mut header = Vec::with_capacity(20);
    header.extend_from_slice(&MAGIC);
    for v in [VERSION, records.len() as u32, regions as u32, dim as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header).map_err(&err)?;
    for rec in records {
        if rec.features.regions != regions || rec.features.dim != dim {
            return Err(Error::FeatureFile(format!(
                "record {} is {}x{}, file is {regions}x{dim}",
                rec.id, rec.features.regions, rec.features.dim
            )));
        }
        w.write_all(&(rec.id.len() as u32).to_le_bytes())
            .map_err(&err)?;
        w.write_all(rec.id.as_bytes()).map_err(&err)?;
        let mut payload = Vec::with_capacity(rec.features.data.len() * 4);
        for v in &rec.features.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload).map_err(&err)?;
    }
    w.flush().map_err(&err)
}

enum Backing {
    File {
        path: PathBuf,
        reader: Mutex<BufReader<File>>,
        offsets: HashMap<String, u64>,
    },
    Memory(HashMap<String, VisualFeatures>),
}

/// Random-access view of a feature file. Opening indexes record offsets;
/// payloads are read on demand, so large files are never fully loaded.
pub struct FeatureStore {
    regions: usize,
    dim: usize,
    ids: Vec<String>,
    backing: Backing,
}

impl FeatureStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = io_err(path);
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(&err)?;
        if magic != MAGIC {
            return Err(Error::FeatureFile(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = read_u32(&mut r).map_err(&err)?;
        if version != VERSION {
            return Err(Error::FeatureFile(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let count = read_u32(&mut r).map_err(&err)? as usize;
        let regions = read_u32(&mut r).map_err(&err)? as usize;
        let dim = read_u32(&mut r).map_err(&err)? as usize;
        if regions == 0 || dim == 0 {
            return Err(Error::FeatureFile(format!(
                "{}: empty feature shape {regions}x{dim}",
                path.display()
            )));
        }
        let payload = (regions * dim * 4) as u64;
        let mut pos = 20u64;
        let mut ids = Vec::with_capacity(count);
        let mut offsets = HashMap::with_capacity(count);
        for i in 0..count {
            let id_len = read_u32(&mut r).map_err(&err)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id).map_err(&err)?;
            let id = String::from_utf8(id).map_err(|_| {
                Error::FeatureFile(format!("{}: record {i} id is not UTF-8", path.display()))
            })?;
            pos += 4 + id_len as u64;
            if pos + payload > file_len {
                return Err(Error::FeatureFile(format!("{}: truncated", path.display())));
            }
            if offsets.insert(id.clone(), pos).is_some() {
                return Err(Error::FeatureFile(format!(
                    "{}: duplicate id {id}",
                    path.display()
                )));
            }
            ids.push(id);
            r.seek_relative(payload as i64).map_err(&err)?;
            pos += payload;
        }
        if pos != file_len {
            return Err(Error::FeatureFile(format!(
                "{}: {} trailing bytes after {count} records",
                path.display(),
                file_len - pos
            )));
        }
        Ok(FeatureStore {
            regions,
            dim,
            ids,
            backing: Backing::File {
                path: path.to_path_buf(),
                reader: Mutex::new(r),
                offsets,
            },
        })
    }

    pub fn from_records(regions: usize, dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut map = HashMap::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        for rec in records {
            if rec.features.regions != regions || rec.features.dim != dim {
                return Err(Error::FeatureFile(format!(
                    "record {} has shape {}x{}",
                    rec.id, rec.features.regions, rec.features.dim
                )));
            }
            if map.contains_key(&rec.id) {
                return Err(Error::FeatureFile(format!("duplicate id {}", rec.id)));
            }
            ids.push(rec.id.clone());
            map.insert(rec.id, rec.features);
        }
        Ok(FeatureStore {
            regions,
            dim,
            ids,
            backing: Backing::Memory(map),
        })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        match &self.backing {
            Backing::File { offsets, .. } => offsets.contains_key(id),
            Backing::Memory(map) => map.contains_key(id),
        }
    }

    pub fn get(&self, id: &str) -> Result<VisualFeatures> {
        match &self.backing {
            Backing::Memory(map) => map
                .get(id)
                .cloned()
                .ok_or_else(|| Error::MissingFeature(id.to_string())),
            Backing::File {
                path,
                reader,
                offsets,
            } => {
                let &offset = offsets
                    .get(id)
                    .ok_or_else(|| Error::MissingFeature(id.to_string()))?;
                let mut bytes = vec![0u8; self.regions * self.dim * 4];
                {
                    let mut r = reader.lock().unwrap_or_else(|p| p.into_inner());
                    r.seek(SeekFrom::Start(offset)).map_err(io_err(path))?;
                    r.read_exact(&mut bytes).map_err(io_err(path))?;
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                VisualFeatures::new(self.regions, self.dim, data)
                    .map_err(|e| Error::FeatureFile(format!("{}: {id}: {e}", path.display())))
            }
        }
    }
}

/// Seeded synthetic features for `ids`, uniform in `[0, 1)` like post-ReLU
/// activations. Stands in for real image features in tests and demos.
pub fn synthetic_records(
    ids: &[String],
    regions: usize,
    dim: usize,
    seed: u64,
) -> Vec<FeatureRecord> {
    let mut rng = rng::stream(seed, rng::streams::FIXTURE);
    ids.iter()
        .map(|id| FeatureRecord {
            id: id.clone(),
            features: VisualFeatures {
                regions,
                dim,
                data: (0..regions * dim).map(|_| rng.random::<f32>()).collect(),
            },
        })
        .collect()
}
